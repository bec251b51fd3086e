//! Attention visualization: class activation maps, input saliency and its
//! noise-averaged variant, plus heatmap overlay rendering.
//!
//! Attribution always targets the pre-sigmoid class score: for the binary
//! model the class-1 score is the logit and the class-0 score its negation,
//! so the argmax rule agrees with thresholding the probability at one half.

use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::exec;
use crate::imageio::Image;
use crate::network::{ForwardMode, Model};
use crate::rng::{self, tag};
use crate::tensor::{dims4, NodeId, Tape, Tensor};

/// Anything that can lay a class score on a tape for a given input.
///
/// Implemented by [`Model`]; tests use small hand-built score functions.
pub trait ScoreModel {
    /// Build the forward graph for `input`, returning the scalar score node
    /// for `class_index` together with any named intermediate activations.
    /// With `track_input` the input leaf accumulates gradients.
    fn build_score(&self, input: &Tensor, class_index: usize, track_input: bool)
        -> Result<ScoreGraph>;

    fn class_count(&self) -> usize {
        2
    }
}

/// A built score graph: the tape plus handles into it.
pub struct ScoreGraph {
    pub tape: Tape,
    pub score: NodeId,
    pub input: NodeId,
    pub activations: BTreeMap<String, NodeId>,
}

impl ScoreModel for Model {
    fn build_score(
        &self,
        input: &Tensor,
        class_index: usize,
        track_input: bool,
    ) -> Result<ScoreGraph> {
        if class_index >= 2 {
            return Err(Error::Parameter(format!(
                "class index {class_index} out of range for a binary model"
            )));
        }
        let pass = self.forward_traced(input, ForwardMode::Eval, track_input)?;
        let (mut tape, logit, input_node, activations) = pass.into_parts();
        let score = if class_index == 1 {
            logit
        } else {
            tape.scale(logit, -1.0)
        };
        Ok(ScoreGraph {
            tape,
            score,
            input: input_node,
            activations,
        })
    }
}

/// Which attribution produced a heatmap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatmapKind {
    Gradcam,
    VanillaSaliency,
    Smoothgrad,
}

impl HeatmapKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            HeatmapKind::Gradcam => "gradcam",
            HeatmapKind::VanillaSaliency => "vanilla_saliency",
            HeatmapKind::Smoothgrad => "smoothgrad",
        }
    }
}

/// A localization or sensitivity map with its provenance.
#[derive(Debug, Clone)]
pub struct Heatmap {
    pub kind: HeatmapKind,
    pub width: usize,
    pub height: usize,
    /// Row-major `height x width` values; nonnegative for class activation
    /// maps and for channel-reduced saliency magnitudes.
    pub values: Vec<f64>,
    pub class_index: usize,
    pub layer_id: Option<String>,
    pub samples: Option<usize>,
    pub sigma: Option<f64>,
    pub seed: Option<u64>,
}

impl Heatmap {
    /// Min-max normalization to `[0, 1]`; an all-equal map renders as all
    /// zeros.
    pub fn normalized(&self) -> Vec<f64> {
        let min = self.values.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = self
            .values
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        if max <= min {
            return vec![0.0; self.values.len()];
        }
        self.values.iter().map(|v| (v - min) / (max - min)).collect()
    }
}

/// Class activation map: gradients of the class score w.r.t. a spatial
/// activation are averaged per channel into weights, the weighted channel
/// sum passes through a ReLU.
pub fn gradcam<M: ScoreModel>(
    model: &M,
    input: &Tensor,
    class_index: usize,
    layer_id: &str,
) -> Result<Heatmap> {
    let mut graph = model.build_score(input, class_index, false)?;
    let act = *graph.activations.get(layer_id).ok_or_else(|| {
        Error::Lookup(format!(
            "unknown layer id {layer_id:?}; known: {:?}",
            graph.activations.keys().collect::<Vec<_>>()
        ))
    })?;
    let (n, k, u, v) = dims4(graph.tape.value(act).shape(), "class activation layer")
        .map_err(|_| {
            Error::Contract(format!(
                "layer {layer_id:?} has no spatial dimensions: shape {:?}",
                graph.tape.value(act).shape()
            ))
        })?;
    if n != 1 {
        return Err(Error::Contract(format!(
            "class activation maps are per-image; got batch of {n}"
        )));
    }
    graph.tape.backward(graph.score)?;
    let grad = graph.tape.grad(act).ok_or_else(|| {
        Error::Contract(format!(
            "layer {layer_id:?} is not on the gradient path of the score"
        ))
    })?;

    let activation = graph.tape.value(act);
    let plane = u * v;
    let mut map = vec![0.0; plane];
    for ch in 0..k {
        let g = &grad.data()[ch * plane..(ch + 1) * plane];
        let weight = g.iter().sum::<f64>() / plane as f64;
        let a = &activation.data()[ch * plane..(ch + 1) * plane];
        for (m, &ai) in map.iter_mut().zip(a) {
            *m += weight * ai;
        }
    }
    for m in &mut map {
        *m = m.max(0.0);
    }
    Ok(Heatmap {
        kind: HeatmapKind::Gradcam,
        width: v,
        height: u,
        values: map,
        class_index,
        layer_id: Some(layer_id.to_string()),
        samples: None,
        sigma: None,
        seed: None,
    })
}

/// Signed per-pixel gradient of the class score w.r.t. the input,
/// `[1, C, H, W]`.
fn input_gradient<M: ScoreModel>(
    model: &M,
    input: &Tensor,
    class_index: usize,
) -> Result<Tensor> {
    let mut graph = model.build_score(input, class_index, true)?;
    graph.tape.backward(graph.score)?;
    graph
        .tape
        .grad(graph.input)
        .cloned()
        .ok_or_else(|| Error::Contract("input is not on the gradient path".into()))
}

/// Reduce a `[1, C, H, W]` signed gradient over channels by the maximum
/// absolute value.
fn reduce_channels_max_abs(grad: &Tensor) -> Result<(usize, usize, Vec<f64>)> {
    let (n, c, h, w) = dims4(grad.shape(), "input gradient")?;
    if n != 1 {
        return Err(Error::Contract(format!(
            "saliency maps are per-image; got batch of {n}"
        )));
    }
    let plane = h * w;
    let mut out = vec![0.0f64; plane];
    for ch in 0..c {
        let g = &grad.data()[ch * plane..(ch + 1) * plane];
        for (o, &gi) in out.iter_mut().zip(g) {
            *o = (*o).max(gi.abs());
        }
    }
    Ok((h, w, out))
}

/// Per-pixel sensitivity of the class score to the input.
pub fn vanilla_saliency<M: ScoreModel>(
    model: &M,
    input: &Tensor,
    class_index: usize,
) -> Result<Heatmap> {
    let grad = input_gradient(model, input, class_index)?;
    let (h, w, values) = reduce_channels_max_abs(&grad)?;
    Ok(Heatmap {
        kind: HeatmapKind::VanillaSaliency,
        width: w,
        height: h,
        values,
        class_index,
        layer_id: None,
        samples: None,
        sigma: None,
        seed: None,
    })
}

/// Saliency averaged over `n` Gaussian-perturbed copies of the input; the
/// average runs over signed gradients before channel reduction, so `n = 1`
/// with zero noise reproduces [`vanilla_saliency`] bit for bit.
///
/// Samples run on independent tapes, possibly in parallel; the average sums
/// in sample order.
pub fn smoothgrad<M: ScoreModel + Sync>(
    model: &M,
    input: &Tensor,
    class_index: usize,
    n: usize,
    sigma: f64,
    seed: u64,
) -> Result<Heatmap> {
    if n == 0 {
        return Err(Error::Parameter(
            "smoothgrad needs at least one sample".into(),
        ));
    }
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(Error::Parameter(format!(
            "noise level {sigma} must be finite and non-negative"
        )));
    }
    let grads: Vec<Result<Tensor>> = exec::map_indexed(n, |i| {
        let sample = if sigma == 0.0 {
            input.clone()
        } else {
            let mut rng = rng::stream(seed, &[tag::NOISE, i as u64]);
            let normal = Normal::new(0.0, sigma).expect("sigma validated");
            let data = input
                .data()
                .iter()
                .map(|&x| x + normal.sample(&mut rng))
                .collect();
            Tensor::new(input.shape().to_vec(), data)?
        };
        input_gradient(model, &sample, class_index)
    });

    let mut mean: Option<Tensor> = None;
    for g in grads {
        let g = g?;
        match &mut mean {
            None => mean = Some(g),
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
        }
    }
    let mut mean = mean.expect("n >= 1");
    if n > 1 {
        for x in mean.data_mut() {
            *x /= n as f64;
        }
    }
    let (h, w, values) = reduce_channels_max_abs(&mean)?;
    Ok(Heatmap {
        kind: HeatmapKind::Smoothgrad,
        width: w,
        height: h,
        values,
        class_index,
        layer_id: None,
        samples: Some(n),
        sigma: Some(sigma),
        seed: Some(seed),
    })
}

/// Predicted class as the argmax over class scores; for the binary model
/// this is 1 exactly when the logit is non-negative, matching the 0.5
/// probability threshold.
pub fn classify<M: ScoreModel>(model: &M, input: &Tensor) -> Result<usize> {
    let graph = model.build_score(input, 1, false)?;
    let score = graph.tape.value(graph.score).item()?;
    Ok(classify_logit(score))
}

/// Thresholding rule shared with the metrics side: logit >= 0 predicts 1.
pub fn classify_logit(logit: f64) -> usize {
    usize::from(logit >= 0.0)
}

/// Fixed blue -> green -> red colormap over `[0, 1]`.
pub fn colormap(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let (r, g, b) = if v < 0.5 {
        let t = v * 2.0;
        (0.0, t, 1.0 - t)
    } else {
        let t = (v - 0.5) * 2.0;
        (t, 1.0 - t, 0.0)
    };
    [
        (r * 255.0).round() as u8,
        (g * 255.0).round() as u8,
        (b * 255.0).round() as u8,
    ]
}

/// Alpha-blend the normalized, bilinearly upsampled, colormapped heatmap
/// over the input image.
pub fn render_overlay(heatmap: &Heatmap, image: &Image, alpha: f64) -> Result<Image> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Parameter(format!("alpha {alpha} outside [0, 1]")));
    }
    let normalized = heatmap.normalized();
    let (w, h) = (image.width(), image.height());
    let mut out = Image::filled(w, h, [0, 0, 0]);
    for y in 0..h {
        for x in 0..w {
            let hx = (x as f64 + 0.5) * heatmap.width as f64 / w as f64 - 0.5;
            let hy = (y as f64 + 0.5) * heatmap.height as f64 / h as f64 - 0.5;
            let v = sample_bilinear_clamped(&normalized, heatmap.width, heatmap.height, hx, hy);
            let color = colormap(v);
            let base = image.pixel(x, y);
            let mut px = [0u8; 3];
            for c in 0..3 {
                px[c] = ((1.0 - alpha) * base[c] as f64 + alpha * color[c] as f64).round() as u8;
            }
            out.set_pixel(x, y, px);
        }
    }
    Ok(out)
}

fn sample_bilinear_clamped(values: &[f64], w: usize, h: usize, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let top = values[y0 * w + x0] * (1.0 - fx) + values[y0 * w + x1] * fx;
    let bottom = values[y1 * w + x0] * (1.0 - fx) + values[y1 * w + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_model, ModelConfig};

    /// Score = sum of the input, exposed as activation "plane": every
    /// gradient entry is 1.
    struct SumModel;

    impl ScoreModel for SumModel {
        fn build_score(
            &self,
            input: &Tensor,
            _class_index: usize,
            _track_input: bool,
        ) -> Result<ScoreGraph> {
            let mut tape = Tape::new();
            let x = tape.leaf(input.clone(), true);
            let score = tape.sum(x);
            let mut activations = BTreeMap::new();
            activations.insert("plane".to_string(), x);
            Ok(ScoreGraph {
                tape,
                score,
                input: x,
                activations,
            })
        }
    }

    /// Score = w . x for a fixed weight tensor.
    struct LinearModel {
        weights: Tensor,
    }

    impl ScoreModel for LinearModel {
        fn build_score(
            &self,
            input: &Tensor,
            class_index: usize,
            _track_input: bool,
        ) -> Result<ScoreGraph> {
            let mut tape = Tape::new();
            let x = tape.leaf(input.clone(), true);
            let w = tape.constant(self.weights.clone());
            let prod = tape.mul(x, w)?;
            let mut score = tape.sum(prod);
            if class_index == 0 {
                score = tape.scale(score, -1.0);
            }
            Ok(ScoreGraph {
                tape,
                score,
                input: x,
                activations: BTreeMap::new(),
            })
        }
    }

    /// Score = sum(x * x): gradient 2x, curvature for the noise-average
    /// check.
    struct QuadraticModel;

    impl ScoreModel for QuadraticModel {
        fn build_score(
            &self,
            input: &Tensor,
            _class_index: usize,
            _track_input: bool,
        ) -> Result<ScoreGraph> {
            let mut tape = Tape::new();
            let x = tape.leaf(input.clone(), true);
            let xx = tape.mul(x, x)?;
            let score = tape.sum(xx);
            Ok(ScoreGraph {
                tape,
                score,
                input: x,
                activations: BTreeMap::new(),
            })
        }
    }

    #[test]
    fn gradcam_uniform_gradient_reduces_to_relu_of_activation() {
        // Single channel, d(score)/dA = 1 everywhere: weight 1, map ReLU(A).
        let input = Tensor::new(
            vec![1, 1, 2, 2],
            vec![1.0, -2.0, 3.0, -4.0],
        )
        .unwrap();
        let model = SumModel;
        let map = gradcam(&model, &input, 1, "plane").unwrap();
        assert_eq!(map.values, vec![1.0, 0.0, 3.0, 0.0]);
        assert_eq!((map.height, map.width), (2, 2));
    }

    #[test]
    fn gradcam_unknown_layer_and_flat_layer_errors() {
        let input = Tensor::zeros(vec![1, 1, 2, 2]);
        let model = SumModel;
        assert!(matches!(
            gradcam(&model, &input, 1, "nope"),
            Err(Error::Lookup(_))
        ));
        let flat = Tensor::zeros(vec![1, 4]);
        assert!(matches!(
            gradcam(&model, &flat, 1, "plane"),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn gradcam_on_tiny_vgg_is_nonnegative_with_feature_shape() {
        let model = build_model(&ModelConfig::tiny_vgg(64, 5)).unwrap();
        let input = Tensor::filled(vec![1, 3, 64, 64], 0.4);
        let map = gradcam(&model, &input, 1, "features").unwrap();
        assert_eq!((map.height, map.width), (8, 8));
        assert!(map.values.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn saliency_of_linear_model_is_abs_weights() {
        let w = Tensor::new(
            vec![1, 2, 2, 2],
            vec![0.5, -1.0, 2.0, 0.0, -0.25, 1.5, -3.0, 0.75],
        )
        .unwrap();
        let model = LinearModel { weights: w.clone() };
        let input = Tensor::filled(vec![1, 2, 2, 2], 0.3);
        let map = vanilla_saliency(&model, &input, 1).unwrap();
        // Channel reduction by max |.|.
        let expect = [
            0.5f64.max(0.25),
            1.0f64.max(1.5),
            2.0f64.max(3.0),
            0.0f64.max(0.75),
        ];
        assert_eq!(map.values, expect);
    }

    #[test]
    fn saliency_zero_on_ignored_region() {
        let w = Tensor::new(vec![1, 1, 1, 4], vec![1.0, 2.0, 0.0, 0.0]).unwrap();
        let model = LinearModel { weights: w };
        let input = Tensor::filled(vec![1, 1, 1, 4], 0.9);
        let map = vanilla_saliency(&model, &input, 1).unwrap();
        assert_eq!(&map.values[2..], &[0.0, 0.0]);
    }

    #[test]
    fn smoothgrad_degenerate_case_is_bitwise_vanilla() {
        let model = build_model(&ModelConfig::tiny_vgg(16, 6)).unwrap();
        let input = Tensor::filled(vec![1, 3, 16, 16], 0.3);
        let vanilla = vanilla_saliency(&model, &input, 1).unwrap();
        let smooth = smoothgrad(&model, &input, 1, 1, 0.0, 99).unwrap();
        assert_eq!(vanilla.values, smooth.values);
    }

    #[test]
    fn smoothgrad_constant_gradient_exact_for_any_n_sigma() {
        // Dyadic weights keep the sample average exact in floating point.
        let w = Tensor::new(vec![1, 1, 2, 2], vec![0.5, -0.25, 1.5, 2.0]).unwrap();
        let model = LinearModel { weights: w };
        let input = Tensor::filled(vec![1, 1, 2, 2], 0.1);
        for (n, sigma) in [(1, 0.0), (4, 0.5), (7, 1.0)] {
            let map = smoothgrad(&model, &input, 1, n, sigma, 3).unwrap();
            assert_eq!(map.values, vec![0.5, 0.25, 1.5, 2.0], "n={n} sigma={sigma}");
        }
    }

    #[test]
    fn smoothgrad_quadratic_matches_expected_gradient() {
        let model = QuadraticModel;
        let input = Tensor::filled(vec![1, 1, 1, 1], 1.0);
        let map = smoothgrad(&model, &input, 1, 10_000, 0.1, 12).unwrap();
        assert!((map.values[0] - 2.0).abs() < 0.01, "{}", map.values[0]);
    }

    #[test]
    fn smoothgrad_variance_shrinks_with_samples() {
        let model = build_model(&ModelConfig::tiny_vgg(32, 7)).unwrap();
        let base = Tensor::filled(vec![1, 3, 32, 32], 0.5);
        let spread = |n: usize| -> f64 {
            let maps: Vec<Vec<f64>> = (0..10)
                .map(|s| smoothgrad(&model, &base, 1, n, 0.2, s).unwrap().values)
                .collect();
            let len = maps[0].len();
            let mut total = 0.0;
            for i in 0..len {
                let mean = maps.iter().map(|m| m[i]).sum::<f64>() / maps.len() as f64;
                total += maps
                    .iter()
                    .map(|m| (m[i] - mean).powi(2))
                    .sum::<f64>()
                    / maps.len() as f64;
            }
            total
        };
        assert!(spread(64) < spread(4));
    }

    #[test]
    fn classify_boundary_and_agreement_with_threshold() {
        assert_eq!(classify_logit(0.0), 1);
        assert_eq!(classify_logit(-1e-9), 0);
        assert_eq!(classify_logit(3.2), 1);

        let mut r = crate::rng::stream(8, &[4]);
        use rand::Rng;
        for _ in 0..1000 {
            let z: f64 = r.random_range(-6.0..6.0);
            let p = 1.0 / (1.0 + (-z).exp());
            let c = crate::metrics::confusion(&[p], &[1], 0.5).unwrap();
            let predicted_positive = c.true_pos == 1;
            assert_eq!(classify_logit(z) == 1, predicted_positive, "z={z}");
        }
    }

    #[test]
    fn classify_runs_on_model() {
        let model = build_model(&ModelConfig::tiny_vgg(16, 9)).unwrap();
        let input = Tensor::filled(vec![1, 3, 16, 16], 0.2);
        let class = classify(&model, &input).unwrap();
        let probs = model.predict(&input).unwrap();
        assert_eq!(class, usize::from(probs.data()[0] >= 0.5));
    }

    #[test]
    fn overlay_alpha_zero_is_identity() {
        let img = Image::filled(8, 8, [120, 90, 60]);
        let map = Heatmap {
            kind: HeatmapKind::Gradcam,
            width: 2,
            height: 2,
            values: vec![0.0, 1.0, 0.5, 0.25],
            class_index: 1,
            layer_id: None,
            samples: None,
            sigma: None,
            seed: None,
        };
        assert_eq!(render_overlay(&map, &img, 0.0).unwrap(), img);
        assert!(render_overlay(&map, &img, 1.5).is_err());
    }

    #[test]
    fn overlay_constant_map_blends_zero_color() {
        let img = Image::filled(4, 4, [100, 100, 100]);
        let map = Heatmap {
            kind: HeatmapKind::Gradcam,
            width: 2,
            height: 2,
            values: vec![0.7; 4],
            class_index: 1,
            layer_id: None,
            samples: None,
            sigma: None,
            seed: None,
        };
        let out = render_overlay(&map, &img, 0.5).unwrap();
        // Normalized all-equal map is all zeros; zero maps to pure blue.
        let expect = [50, 50, 178]; // 0.5*100 + 0.5*(0,0,255)
        assert_eq!(out.pixel(0, 0), expect);
        assert_eq!(out.pixel(3, 3), expect);
    }

    #[test]
    fn overlay_upsamples_to_image_size() {
        let img = Image::filled(64, 64, [0, 0, 0]);
        let map = Heatmap {
            kind: HeatmapKind::Gradcam,
            width: 8,
            height: 8,
            values: (0..64).map(|i| i as f64).collect(),
            class_index: 1,
            layer_id: None,
            samples: None,
            sigma: None,
            seed: None,
        };
        let out = render_overlay(&map, &img, 1.0).unwrap();
        assert_eq!((out.width(), out.height()), (64, 64));
    }

    #[test]
    fn colormap_endpoints() {
        assert_eq!(colormap(0.0), [0, 0, 255]);
        assert_eq!(colormap(0.5), [0, 255, 0]);
        assert_eq!(colormap(1.0), [255, 0, 0]);
    }
}
