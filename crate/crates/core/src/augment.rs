//! Seeded, composable image augmentation.
//!
//! The pipeline first center-crops to a square and resizes to the target
//! side, then applies its steps in order, each firing independently with its
//! configured probability. A given `(seed, draw index)` pair fully
//! determines the output, so augmentation is reproducible and freely
//! parallel across images.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::Image;
use crate::rng::{self, tag};

/// Mirror axis for [`flip`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlipAxis {
    Horizontal,
    Vertical,
}

/// One probabilistic step of an [`AugmentPipeline`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AugmentStep {
    /// Rotation by an angle drawn uniformly from `[-max_degrees, max_degrees]`.
    Rotate { max_degrees: f64, probability: f64 },
    FlipHorizontal { probability: f64 },
    FlipVertical { probability: f64 },
    /// Scale all channels by a factor drawn from `[1-max_delta, 1+max_delta]`.
    Brightness { max_delta: f64, probability: f64 },
    /// Shift by up to `max_fraction` of the image side along each axis.
    Translate { max_fraction: f64, probability: f64 },
    /// Re-crop a random sub-square of side at least `min_scale` of the image
    /// and resize back, as a training-time alternative to the center crop.
    RandomCrop { min_scale: f64, probability: f64 },
}

impl AugmentStep {
    fn probability(&self) -> f64 {
        match self {
            AugmentStep::Rotate { probability, .. }
            | AugmentStep::FlipHorizontal { probability }
            | AugmentStep::FlipVertical { probability }
            | AugmentStep::Brightness { probability, .. }
            | AugmentStep::Translate { probability, .. }
            | AugmentStep::RandomCrop { probability, .. } => *probability,
        }
    }

    fn validate(&self) -> Result<()> {
        let p = self.probability();
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Parameter(format!(
                "step probability {p} outside [0, 1]"
            )));
        }
        match *self {
            AugmentStep::Rotate { max_degrees, .. } => {
                if !(0.0..360.0).contains(&max_degrees) {
                    return Err(Error::Parameter(format!(
                        "rotation bound {max_degrees} outside [0, 360)"
                    )));
                }
            }
            AugmentStep::Brightness { max_delta, .. } => {
                if !(0.0..1.0).contains(&max_delta) {
                    return Err(Error::Parameter(format!(
                        "brightness delta {max_delta} outside [0, 1)"
                    )));
                }
            }
            AugmentStep::Translate { max_fraction, .. } => {
                if !(0.0..=0.5).contains(&max_fraction) {
                    return Err(Error::Parameter(format!(
                        "translate fraction {max_fraction} outside [0, 0.5]"
                    )));
                }
            }
            AugmentStep::RandomCrop { min_scale, .. } => {
                if !(0.0..=1.0).contains(&min_scale) || min_scale == 0.0 {
                    return Err(Error::Parameter(format!(
                        "random crop scale {min_scale} outside (0, 1]"
                    )));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// Ordered augmentation steps plus the square side every image is brought to.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentPipeline {
    pub target_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub steps: Vec<AugmentStep>,
}

impl AugmentPipeline {
    /// The LC25000 baseline: rotations up to 25 degrees (always applied) and
    /// both flips at probability 0.5.
    pub fn baseline(target_size: usize, seed: u64) -> Self {
        AugmentPipeline {
            target_size,
            seed,
            steps: vec![
                AugmentStep::Rotate {
                    max_degrees: 25.0,
                    probability: 1.0,
                },
                AugmentStep::FlipHorizontal { probability: 0.5 },
                AugmentStep::FlipVertical { probability: 0.5 },
            ],
        }
    }

    /// Crop-only pipeline used for validation and test images.
    pub fn crop_only(target_size: usize) -> Self {
        AugmentPipeline {
            target_size,
            seed: 0,
            steps: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_size == 0 {
            return Err(Error::Parameter("target size must be positive".into()));
        }
        self.steps.iter().try_for_each(AugmentStep::validate)
    }

    /// Deterministic crop + steps for one image; `draw_index` selects the
    /// random draw.
    pub fn apply(&self, img: &Image, draw_index: u64) -> Result<Image> {
        self.validate()?;
        let mut out = crop_square_resize(img, self.target_size)?;
        let mut rng = rng::stream(self.seed, &[tag::AUGMENT, draw_index]);
        for step in &self.steps {
            let fired = rng.random::<f64>() < step.probability();
            if !fired {
                continue;
            }
            out = match *step {
                AugmentStep::Rotate { max_degrees, .. } => {
                    let angle = rng.random_range(-max_degrees..=max_degrees);
                    rotate(&out, angle)
                }
                AugmentStep::FlipHorizontal { .. } => flip(&out, FlipAxis::Horizontal),
                AugmentStep::FlipVertical { .. } => flip(&out, FlipAxis::Vertical),
                AugmentStep::Brightness { max_delta, .. } => {
                    let factor = rng.random_range(1.0 - max_delta..=1.0 + max_delta);
                    brightness(&out, factor)
                }
                AugmentStep::Translate { max_fraction, .. } => {
                    let side = out.width() as f64;
                    let dx = rng.random_range(-max_fraction..=max_fraction) * side;
                    let dy = rng.random_range(-max_fraction..=max_fraction) * side;
                    translate(&out, dx, dy)
                }
                AugmentStep::RandomCrop { min_scale, .. } => {
                    let scale = rng.random_range(min_scale..=1.0);
                    let side = ((out.width() as f64 * scale).round() as usize).max(1);
                    let max_off = out.width() - side;
                    let ox = if max_off > 0 {
                        rng.random_range(0..=max_off)
                    } else {
                        0
                    };
                    let oy = if max_off > 0 {
                        rng.random_range(0..=max_off)
                    } else {
                        0
                    };
                    let cropped = crop(&out, ox, oy, side, side);
                    resize_area(&cropped, self.target_size, self.target_size)
                }
            };
        }
        Ok(out)
    }

    /// The deterministic non-augmenting path: crop and resize only.
    pub fn prepare(&self, img: &Image) -> Result<Image> {
        crop_square_resize(img, self.target_size)
    }
}

/// Center-crop to a square of side `min(w, h)`, then resample to
/// `target x target` by area averaging.
pub fn crop_square_resize(img: &Image, target: usize) -> Result<Image> {
    if target == 0 {
        return Err(Error::Parameter("crop target must be positive".into()));
    }
    let side = img.width().min(img.height());
    let ox = (img.width() - side) / 2;
    let oy = (img.height() - side) / 2;
    let square = if side == img.width() && side == img.height() {
        img.clone()
    } else {
        crop(img, ox, oy, side, side)
    };
    if side == target {
        return Ok(square);
    }
    Ok(resize_area(&square, target, target))
}

fn crop(img: &Image, ox: usize, oy: usize, w: usize, h: usize) -> Image {
    let mut data = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        let row = ((oy + y) * img.width() + ox) * 3;
        data.extend_from_slice(&img.data()[row..row + w * 3]);
    }
    Image::new(w, h, data).expect("crop within bounds")
}

/// Box-filter resample; exact pixel averages for integer reductions.
fn resize_area(img: &Image, out_w: usize, out_h: usize) -> Image {
    let (w, h) = (img.width(), img.height());
    let sx = w as f64 / out_w as f64;
    let sy = h as f64 / out_h as f64;
    let mut data = vec![0u8; out_w * out_h * 3];
    for ty in 0..out_h {
        let y0 = ty as f64 * sy;
        let y1 = (ty + 1) as f64 * sy;
        for tx in 0..out_w {
            let x0 = tx as f64 * sx;
            let x1 = (tx + 1) as f64 * sx;
            let mut acc = [0.0f64; 3];
            let mut area = 0.0;
            let iy_end = (y1.ceil() as usize).min(h);
            let ix_end = (x1.ceil() as usize).min(w);
            for iy in y0.floor() as usize..iy_end {
                let wy = (y1.min((iy + 1) as f64) - y0.max(iy as f64)).max(0.0);
                for ix in x0.floor() as usize..ix_end {
                    let wx = (x1.min((ix + 1) as f64) - x0.max(ix as f64)).max(0.0);
                    let px = img.pixel(ix, iy);
                    let weight = wx * wy;
                    for c in 0..3 {
                        acc[c] += px[c] as f64 * weight;
                    }
                    area += weight;
                }
            }
            let base = (ty * out_w + tx) * 3;
            for c in 0..3 {
                data[base + c] = (acc[c] / area).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Image::new(out_w, out_h, data).expect("sized above")
}

/// Rotate about the image center with bilinear interpolation and reflected
/// out-of-bounds sampling; output keeps the input size.
pub fn rotate(img: &Image, angle_degrees: f64) -> Image {
    if angle_degrees == 0.0 {
        return img.clone();
    }
    let theta = angle_degrees.to_radians();
    let (cos_t, sin_t) = (theta.cos(), theta.sin());
    let (w, h) = (img.width(), img.height());
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let mut out = Image::filled(w, h, [0, 0, 0]);
    for y in 0..h {
        let dy = y as f64 - cy;
        for x in 0..w {
            let dx = x as f64 - cx;
            let sx = cos_t * dx + sin_t * dy + cx;
            let sy = -sin_t * dx + cos_t * dy + cy;
            out.set_pixel(x, y, sample_bilinear_reflect(img, sx, sy));
        }
    }
    out
}

/// Shift by a (possibly fractional) pixel offset, reflect-filled.
pub fn translate(img: &Image, dx: f64, dy: f64) -> Image {
    let (w, h) = (img.width(), img.height());
    let mut out = Image::filled(w, h, [0, 0, 0]);
    for y in 0..h {
        for x in 0..w {
            out.set_pixel(
                x,
                y,
                sample_bilinear_reflect(img, x as f64 - dx, y as f64 - dy),
            );
        }
    }
    out
}

/// Exact lossless mirror.
pub fn flip(img: &Image, axis: FlipAxis) -> Image {
    let (w, h) = (img.width(), img.height());
    let mut out = Image::filled(w, h, [0, 0, 0]);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = match axis {
                FlipAxis::Horizontal => (w - 1 - x, y),
                FlipAxis::Vertical => (x, h - 1 - y),
            };
            out.set_pixel(x, y, img.pixel(sx, sy));
        }
    }
    out
}

/// Scale all channels by `factor`, clamped to the valid byte range.
pub fn brightness(img: &Image, factor: f64) -> Image {
    let data = img
        .data()
        .iter()
        .map(|&b| (b as f64 * factor).round().clamp(0.0, 255.0) as u8)
        .collect();
    Image::new(img.width(), img.height(), data).expect("same size")
}

fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i % period;
    if m < 0 {
        m += period;
    }
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

fn sample_bilinear_reflect(img: &Image, x: f64, y: f64) -> [u8; 3] {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (w, h) = (img.width(), img.height());
    let xi0 = reflect_index(x0 as isize, w);
    let xi1 = reflect_index(x0 as isize + 1, w);
    let yi0 = reflect_index(y0 as isize, h);
    let yi1 = reflect_index(y0 as isize + 1, h);
    let p00 = img.pixel(xi0, yi0);
    let p10 = img.pixel(xi1, yi0);
    let p01 = img.pixel(xi0, yi1);
    let p11 = img.pixel(xi1, yi1);
    let mut out = [0u8; 3];
    for c in 0..3 {
        let top = p00[c] as f64 * (1.0 - fx) + p10[c] as f64 * fx;
        let bottom = p01[c] as f64 * (1.0 - fx) + p11[c] as f64 * fx;
        out[c] = (top * (1.0 - fy) + bottom * fy)
            .round()
            .clamp(0.0, 255.0) as u8;
    }
    out
}

/// Tile `rows x cols` augmented variants of one image into a single grid.
pub fn augment_grid(
    pipeline: &AugmentPipeline,
    img: &Image,
    rows: usize,
    cols: usize,
) -> Result<Image> {
    let side = pipeline.target_size;
    let mut grid = Image::filled(cols * side, rows * side, [255, 255, 255]);
    for r in 0..rows {
        for c in 0..cols {
            let tile = pipeline.apply(img, (r * cols + c) as u64)?;
            for y in 0..side {
                for x in 0..side {
                    grid.set_pixel(c * side + x, r * side + y, tile.pixel(x, y));
                }
            }
        }
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn gradient_image(w: usize, h: usize) -> Image {
        let mut img = Image::filled(w, h, [0, 0, 0]);
        for y in 0..h {
            for x in 0..w {
                let v = ((x + y) * 255 / (w + h - 2)) as u8;
                img.set_pixel(x, y, [v, v / 2, 255 - v]);
            }
        }
        img
    }

    fn noise_image(w: usize, h: usize, seed: u64) -> Image {
        let mut r = rng::stream(seed, &[99]);
        let data = (0..w * h * 3).map(|_| r.random::<u8>()).collect();
        Image::new(w, h, data).unwrap()
    }

    #[test]
    fn crop_resize_sizes() {
        let img = noise_image(768, 768, 1);
        let out = crop_square_resize(&img, 224).unwrap();
        assert_eq!((out.width(), out.height()), (224, 224));
    }

    #[test]
    fn crop_resize_identity_at_matching_size() {
        let img = noise_image(224, 224, 2);
        assert_eq!(crop_square_resize(&img, 224).unwrap(), img);
    }

    #[test]
    fn crop_resize_constant_collapse() {
        let img = Image::filled(2, 2, [13, 37, 73]);
        let out = crop_square_resize(&img, 1).unwrap();
        assert_eq!(out.pixel(0, 0), [13, 37, 73]);
    }

    #[test]
    fn crop_resize_rejects_zero_target() {
        assert!(matches!(
            crop_square_resize(&Image::filled(4, 4, [0, 0, 0]), 0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn resize_halving_averages_quads() {
        // 2x2 blocks average exactly under the box filter.
        let mut img = Image::filled(2, 2, [0, 0, 0]);
        img.set_pixel(0, 0, [100, 0, 0]);
        img.set_pixel(1, 0, [200, 0, 0]);
        img.set_pixel(0, 1, [50, 0, 0]);
        img.set_pixel(1, 1, [150, 0, 0]);
        let out = resize_area(&img, 1, 1);
        assert_eq!(out.pixel(0, 0), [125, 0, 0]);
    }

    #[test]
    fn rotate_zero_is_identity() {
        let img = gradient_image(16, 16);
        assert_eq!(rotate(&img, 0.0), img);
    }

    #[test]
    fn rotate_constant_image_invariant() {
        let img = Image::filled(9, 9, [90, 120, 30]);
        for angle in [-180.0, -25.0, 13.7, 90.0, 179.0] {
            assert_eq!(rotate(&img, angle), img);
        }
    }

    #[test]
    fn rotate_roundtrip_bounded_error() {
        let img = gradient_image(32, 32);
        let back = rotate(&rotate(&img, 90.0), -90.0);
        let max_dev = img
            .data()
            .iter()
            .zip(back.data())
            .map(|(&a, &b)| (a as i16 - b as i16).unsigned_abs())
            .max()
            .unwrap();
        assert!(max_dev <= 3, "max deviation {max_dev}");
    }

    #[test]
    fn flip_involution_and_worked_pair() {
        let img = noise_image(7, 5, 3);
        assert_eq!(flip(&flip(&img, FlipAxis::Horizontal), FlipAxis::Horizontal), img);
        assert_eq!(flip(&flip(&img, FlipAxis::Vertical), FlipAxis::Vertical), img);

        let mut two = Image::filled(2, 1, [0, 0, 0]);
        two.set_pixel(0, 0, [1, 1, 1]);
        two.set_pixel(1, 0, [2, 2, 2]);
        let flipped = flip(&two, FlipAxis::Horizontal);
        assert_eq!(flipped.pixel(0, 0), [2, 2, 2]);
        assert_eq!(flipped.pixel(1, 0), [1, 1, 1]);
    }

    #[test]
    fn flips_commute() {
        let img = noise_image(6, 6, 4);
        let hv = flip(&flip(&img, FlipAxis::Horizontal), FlipAxis::Vertical);
        let vh = flip(&flip(&img, FlipAxis::Vertical), FlipAxis::Horizontal);
        assert_eq!(hv, vh);
    }

    #[test]
    fn pipeline_zero_probability_is_crop_only() {
        let img = noise_image(100, 100, 5);
        let mut pipeline = AugmentPipeline::baseline(64, 11);
        for step in &mut pipeline.steps {
            match step {
                AugmentStep::Rotate { probability, .. }
                | AugmentStep::FlipHorizontal { probability }
                | AugmentStep::FlipVertical { probability } => *probability = 0.0,
                _ => unreachable!("baseline has three steps"),
            }
        }
        let out = pipeline.apply(&img, 0).unwrap();
        assert_eq!(out, crop_square_resize(&img, 64).unwrap());
    }

    #[test]
    fn pipeline_deterministic_per_draw_index() {
        let img = noise_image(96, 96, 6);
        let pipeline = AugmentPipeline::baseline(64, 17);
        assert_eq!(
            pipeline.apply(&img, 41).unwrap(),
            pipeline.apply(&img, 41).unwrap()
        );
    }

    #[test]
    fn rotation_at_probability_one_always_fires() {
        let img = gradient_image(48, 48);
        let pipeline = AugmentPipeline {
            target_size: 32,
            seed: 23,
            steps: vec![AugmentStep::Rotate {
                max_degrees: 25.0,
                probability: 1.0,
            }],
        };
        let crop = pipeline.prepare(&img).unwrap();
        let mut fired = 0;
        for draw in 0..32 {
            if pipeline.apply(&img, draw).unwrap() != crop {
                fired += 1;
            }
        }
        // An angle near zero could leave pixels unchanged, but not 32 times.
        assert!(fired >= 31, "rotation fired only {fired}/32 times");
    }

    #[test]
    fn flip_firing_rate_near_half() {
        let pipeline = AugmentPipeline {
            target_size: 2,
            seed: 5,
            steps: vec![AugmentStep::FlipHorizontal { probability: 0.5 }],
        };
        let mut img = Image::filled(2, 2, [0, 0, 0]);
        img.set_pixel(1, 0, [255, 255, 255]);
        img.set_pixel(1, 1, [255, 255, 255]);
        let unflipped = pipeline.prepare(&img).unwrap();
        let n = 10_000;
        let fired = (0..n)
            .filter(|&d| pipeline.apply(&img, d).unwrap() != unflipped)
            .count();
        let rate = fired as f64 / n as f64;
        assert!((0.48..=0.52).contains(&rate), "rate {rate}");
    }

    #[test]
    fn step_validation() {
        assert!(AugmentStep::Rotate {
            max_degrees: 400.0,
            probability: 1.0
        }
        .validate()
        .is_err());
        assert!(AugmentStep::FlipHorizontal { probability: 1.5 }
            .validate()
            .is_err());
    }

    #[test]
    fn brightness_clamps() {
        let img = Image::filled(2, 2, [200, 10, 128]);
        let up = brightness(&img, 1.5);
        assert_eq!(up.pixel(0, 0), [255, 15, 192]);
    }

    #[test]
    fn translate_zero_is_identity() {
        let img = gradient_image(8, 8);
        assert_eq!(translate(&img, 0.0, 0.0), img);
    }

    #[test]
    fn grid_dimensions() {
        let img = noise_image(64, 64, 8);
        let pipeline = AugmentPipeline::baseline(16, 3);
        let grid = augment_grid(&pipeline, &img, 8, 8).unwrap();
        assert_eq!((grid.width(), grid.height()), (128, 128));
    }
}
