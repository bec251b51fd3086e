//! Layer-graph assembly: configurable CNN backbone, concat-pool head,
//! forward inference, freeze contract and weight persistence.
//!
//! The head is fixed by construction: global max pool, global average pool
//! and a flatten of the final feature map are concatenated, passed through
//! dropout and a single dense unit, and squashed by a sigmoid.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::tensor::{Mode, NodeId, Tape, Tensor};

const WEIGHTS_MAGIC: &[u8; 5] = b"HSCW1";
const DTYPE_F64: u8 = 1;

/// One backbone layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "default_one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    Relu,
    MaxPool {
        window: usize,
        stride: usize,
    },
    AvgPool {
        window: usize,
        stride: usize,
    },
}

fn default_one() -> usize {
    1
}

/// Backbone + head description; fully determines the parameter layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_name")]
    pub name: String,
    /// Input size as (height, width, channels).
    pub input_size: (usize, usize, usize),
    pub backbone: Vec<LayerSpec>,
    #[serde(default = "default_dropout")]
    pub head_dropout: f64,
    #[serde(default)]
    pub frozen_layers: Vec<String>,
    #[serde(default)]
    pub seed: u64,
}

fn default_name() -> String {
    "TinyVGG".into()
}

fn default_dropout() -> f64 {
    0.5
}

impl ModelConfig {
    /// Three conv-relu-maxpool blocks with 8/16/32 channels on a square
    /// input; the stock desk-scale backbone.
    pub fn tiny_vgg(input_side: usize, seed: u64) -> Self {
        let mut backbone = Vec::new();
        for out_channels in [8, 16, 32] {
            backbone.push(LayerSpec::Conv {
                out_channels,
                kernel: 3,
                stride: 1,
                padding: 1,
            });
            backbone.push(LayerSpec::Relu);
            backbone.push(LayerSpec::MaxPool {
                window: 2,
                stride: 2,
            });
        }
        ModelConfig {
            name: default_name(),
            input_size: (input_side, input_side, 3),
            backbone,
            head_dropout: 0.5,
            frozen_layers: Vec::new(),
            seed,
        }
    }
}

/// Dropout behaviour of a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Dropout active, mask drawn from the given seed.
    Train { dropout_seed: u64 },
    /// Deterministic: dropout is the identity.
    Eval,
}

#[derive(Debug, Clone)]
pub(crate) struct Param {
    pub id: String,
    pub layer: String,
    pub value: Tensor,
}

/// A built model: stable layer ids, parameter tensors, frozen flags.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    layers: Vec<(String, LayerSpec)>,
    params: Vec<Param>,
    frozen: BTreeSet<String>,
    feature_shape: (usize, usize, usize),
    head_input_len: usize,
}

/// Validate a config, size every layer, and initialize parameters
/// (He-uniform weights, zero biases) from the config seed.
pub fn build_model(config: &ModelConfig) -> Result<Model> {
    let (in_h, in_w, in_c) = config.input_size;
    if in_h == 0 || in_w == 0 || in_c == 0 {
        return Err(Error::Config(format!(
            "input size {:?} must be positive",
            config.input_size
        )));
    }
    if !(0.0..1.0).contains(&config.head_dropout) {
        return Err(Error::Config(format!(
            "head dropout {} outside [0, 1)",
            config.head_dropout
        )));
    }
    if config.backbone.is_empty() {
        return Err(Error::Config("backbone has no layers".into()));
    }

    let mut layers = Vec::new();
    let mut params = Vec::new();
    let (mut c, mut h, mut w) = (in_c, in_h, in_w);
    let (mut conv_n, mut relu_n, mut pool_n) = (0, 0, 0);
    let mut init_ordinal = 0u64;

    for spec in &config.backbone {
        let id = match spec {
            LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                conv_n += 1;
                let id = format!("conv{conv_n}");
                if *out_channels == 0 || *kernel == 0 || *stride == 0 {
                    return Err(Error::Config(format!(
                        "layer {id}: channels, kernel and stride must be positive"
                    )));
                }
                if h + 2 * padding < *kernel || w + 2 * padding < *kernel {
                    return Err(Error::Config(format!(
                        "layer {id}: kernel {kernel} exceeds padded input {h}x{w}"
                    )));
                }
                let fan_in = c * kernel * kernel;
                let mut rng = rng::stream(config.seed, &[tag::INIT, init_ordinal]);
                init_ordinal += 1;
                params.push(Param {
                    id: format!("{id}.weight"),
                    layer: id.clone(),
                    value: he_uniform(vec![*out_channels, c, *kernel, *kernel], fan_in, &mut rng),
                });
                params.push(Param {
                    id: format!("{id}.bias"),
                    layer: id.clone(),
                    value: Tensor::zeros(vec![*out_channels]),
                });
                h = (h + 2 * padding - kernel) / stride + 1;
                w = (w + 2 * padding - kernel) / stride + 1;
                c = *out_channels;
                id
            }
            LayerSpec::Relu => {
                relu_n += 1;
                format!("relu{relu_n}")
            }
            LayerSpec::MaxPool { window, stride } | LayerSpec::AvgPool { window, stride } => {
                pool_n += 1;
                let id = format!("pool{pool_n}");
                if *window == 0 || *stride == 0 {
                    return Err(Error::Config(format!(
                        "layer {id}: window and stride must be positive"
                    )));
                }
                if *window > h || *window > w {
                    return Err(Error::Config(format!(
                        "layer {id}: pool window {window} collapses {h}x{w} input below 1x1"
                    )));
                }
                h = (h - window) / stride + 1;
                w = (w - window) / stride + 1;
                id
            }
        };
        layers.push((id, spec.clone()));
    }

    let head_input_len = c * (2 + h * w);
    let mut rng = rng::stream(config.seed, &[tag::INIT, init_ordinal]);
    params.push(Param {
        id: "head_dense.weight".into(),
        layer: "head_dense".into(),
        value: he_uniform(vec![head_input_len, 1], head_input_len, &mut rng),
    });
    params.push(Param {
        id: "head_dense.bias".into(),
        layer: "head_dense".into(),
        value: Tensor::zeros(vec![1]),
    });

    let mut model = Model {
        config: config.clone(),
        layers,
        params,
        frozen: BTreeSet::new(),
        feature_shape: (c, h, w),
        head_input_len,
    };
    let frozen = config.frozen_layers.clone();
    if !frozen.is_empty() {
        model.set_frozen(&frozen)?;
    }
    Ok(model)
}

fn he_uniform(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let data = (0..shape.iter().product())
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Tensor::new(shape, data).expect("sized above")
}

/// Tape, output handles and recorded per-layer activations of one forward
/// pass.
pub struct ForwardPass {
    tape: Tape,
    pub probabilities: NodeId,
    pub logit: NodeId,
    pub input: NodeId,
    activations: BTreeMap<String, NodeId>,
    param_nodes: BTreeMap<String, NodeId>,
}

impl ForwardPass {
    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn tape_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }

    /// Node of the named layer's activation from this pass, still attached
    /// to the tape.
    pub fn activation(&self, layer_id: &str) -> Result<NodeId> {
        self.activations.get(layer_id).copied().ok_or_else(|| {
            Error::Lookup(format!(
                "unknown layer id {layer_id:?}; known: {:?}",
                self.activations.keys().collect::<Vec<_>>()
            ))
        })
    }

    /// Recorded activation value of the named layer.
    pub fn activation_value(&self, layer_id: &str) -> Result<&Tensor> {
        Ok(self.tape.value(self.activation(layer_id)?))
    }

    pub fn param_node(&self, param_id: &str) -> Option<NodeId> {
        self.param_nodes.get(param_id).copied()
    }

    /// Take the pass apart for direct tape manipulation: tape, logit node,
    /// input node, and the recorded activations.
    pub fn into_parts(self) -> (Tape, NodeId, NodeId, BTreeMap<String, NodeId>) {
        (self.tape, self.logit, self.input, self.activations)
    }
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn name(&self) -> &str {
        &self.config.name
    }

    /// Channels and spatial extent of the backbone output: (K, u, v).
    pub fn feature_shape(&self) -> (usize, usize, usize) {
        self.feature_shape
    }

    /// Length of the concatenated head vector, `K * (2 + u*v)`.
    pub fn head_input_len(&self) -> usize {
        self.head_input_len
    }

    /// Backbone layer ids in order, then the head layer.
    pub fn layer_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.layers.iter().map(|(id, _)| id.clone()).collect();
        ids.push("head_dense".into());
        ids
    }

    pub fn param_ids(&self) -> Vec<String> {
        self.params.iter().map(|p| p.id.clone()).collect()
    }

    pub fn param(&self, param_id: &str) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|p| p.id == param_id)
            .map(|p| &p.value)
    }

    /// Overwrite one parameter tensor; the shape must match.
    pub fn set_param(&mut self, param_id: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .iter_mut()
            .find(|p| p.id == param_id)
            .ok_or_else(|| Error::Lookup(format!("unknown parameter {param_id:?}")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::Dimension(format!(
                "parameter {param_id:?} has shape {:?}, got {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn is_layer_frozen(&self, layer_id: &str) -> bool {
        self.frozen.contains(layer_id)
    }

    pub fn is_param_frozen(&self, param_id: &str) -> bool {
        self.params
            .iter()
            .find(|p| p.id == param_id)
            .is_some_and(|p| self.frozen.contains(&p.layer))
    }

    /// Replace the frozen set; frozen layers receive no optimizer updates.
    pub fn set_frozen(&mut self, layer_ids: &[String]) -> Result<()> {
        let known: BTreeSet<String> = self.layer_ids().into_iter().collect();
        for id in layer_ids {
            if !known.contains(id) {
                return Err(Error::Lookup(format!(
                    "cannot freeze unknown layer {id:?}; known: {known:?}"
                )));
            }
        }
        self.frozen = layer_ids.iter().cloned().collect();
        Ok(())
    }

    /// Eval-mode probabilities for a batch.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        let pass = self.forward(batch, ForwardMode::Eval)?;
        Ok(pass.tape().value(pass.probabilities).clone())
    }

    pub fn forward(&self, batch: &Tensor, mode: ForwardMode) -> Result<ForwardPass> {
        self.forward_traced(batch, mode, false)
    }

    /// Forward pass that optionally tracks gradients w.r.t. the input batch
    /// (needed for saliency maps).
    pub fn forward_traced(
        &self,
        batch: &Tensor,
        mode: ForwardMode,
        track_input: bool,
    ) -> Result<ForwardPass> {
        let (in_h, in_w, in_c) = self.config.input_size;
        let shape = batch.shape();
        if shape.len() != 4 || shape[1] != in_c || shape[2] != in_h || shape[3] != in_w {
            return Err(Error::Dimension(format!(
                "batch shape {shape:?} does not match model input [N, {in_c}, {in_h}, {in_w}]"
            )));
        }

        let mut tape = Tape::new();
        let input = tape.leaf(batch.clone(), track_input);
        let mut param_nodes = BTreeMap::new();
        for p in &self.params {
            param_nodes.insert(p.id.clone(), tape.leaf(p.value.clone(), true));
        }

        let mut activations = BTreeMap::new();
        let mut cursor = input;
        for (id, spec) in &self.layers {
            cursor = match spec {
                LayerSpec::Conv {
                    stride, padding, ..
                } => {
                    let weight = param_nodes[&format!("{id}.weight")];
                    let bias = param_nodes[&format!("{id}.bias")];
                    tape.conv2d(cursor, weight, bias, *stride, *padding)?
                }
                LayerSpec::Relu => tape.relu(cursor),
                LayerSpec::MaxPool { window, stride } => {
                    tape.max_pool2d(cursor, *window, *stride)?
                }
                LayerSpec::AvgPool { window, stride } => {
                    tape.avg_pool2d(cursor, *window, *stride)?
                }
            };
            activations.insert(id.clone(), cursor);
        }
        // Alias for the feature map feeding the head; the default target for
        // class activation maps.
        activations.insert("features".into(), cursor);

        let gmax = tape.global_max_pool(cursor)?;
        let gavg = tape.global_avg_pool(cursor)?;
        let flat = tape.flatten(cursor)?;
        let vector = tape.concat(&[gmax, gavg, flat], 1)?;
        debug_assert_eq!(tape.value(vector).shape()[1], self.head_input_len);

        let dropped = match mode {
            ForwardMode::Train { dropout_seed } => {
                let mut rng = rng::stream(dropout_seed, &[tag::DROPOUT]);
                tape.dropout(vector, self.config.head_dropout, Mode::Train, &mut rng)?
            }
            ForwardMode::Eval => vector,
        };
        let logit = tape.dense(
            dropped,
            param_nodes["head_dense.weight"],
            param_nodes["head_dense.bias"],
        )?;
        let probabilities = tape.sigmoid(logit);

        Ok(ForwardPass {
            tape,
            probabilities,
            logit,
            input,
            activations,
            param_nodes,
        })
    }

    /// Write all parameters to the binary weights format.
    pub fn save_weights(&self, path: &Path) -> Result<()> {
        let mut ordered: Vec<&Param> = self.params.iter().collect();
        ordered.sort_by(|a, b| a.id.cmp(&b.id));
        let mut buf = Vec::new();
        buf.extend_from_slice(WEIGHTS_MAGIC);
        for p in ordered {
            let id = p.id.as_bytes();
            buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
            buf.extend_from_slice(id);
            buf.push(DTYPE_F64);
            buf.push(p.value.shape().len() as u8);
            for &d in p.value.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    /// Load parameters saved by [`Model::save_weights`]. The file must cover
    /// exactly this model's parameters with matching shapes; on any error
    /// the model is left unmodified.
    pub fn load_weights(&mut self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut buf = Vec::new();
        file.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
        let records = parse_weights(&buf)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;

        let mut staged: BTreeMap<String, Tensor> = BTreeMap::new();
        for (id, tensor) in records {
            if staged.insert(id.clone(), tensor).is_some() {
                return Err(Error::Format(format!(
                    "{}: duplicate record for {id:?}",
                    path.display()
                )));
            }
        }
        for p in &self.params {
            match staged.get(&p.id) {
                None => {
                    return Err(Error::Format(format!(
                        "{}: missing record for {:?}",
                        path.display(),
                        p.id
                    )))
                }
                Some(t) if t.shape() != p.value.shape() => {
                    return Err(Error::Format(format!(
                        "{}: layer {:?} has shape {:?} in file but {:?} in model",
                        path.display(),
                        p.id,
                        t.shape(),
                        p.value.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if staged.len() != self.params.len() {
            let known: BTreeSet<&String> = self.params.iter().map(|p| &p.id).collect();
            let extra: Vec<&String> = staged.keys().filter(|k| !known.contains(k)).collect();
            return Err(Error::Format(format!(
                "{}: file contains unknown layers {extra:?}",
                path.display()
            )));
        }
        for p in &mut self.params {
            p.value = staged.remove(&p.id).expect("verified above");
        }
        Ok(())
    }
}

fn parse_weights(buf: &[u8]) -> std::result::Result<Vec<(String, Tensor)>, String> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> std::result::Result<&[u8], String> {
        if *pos + n > buf.len() {
            return Err(format!(
                "truncated payload at byte {} (need {n} more bytes)",
                *pos
            ));
        }
        let s = &buf[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };

    if take(&mut pos, WEIGHTS_MAGIC.len())? != WEIGHTS_MAGIC {
        return Err("bad magic, not a weights file".into());
    }
    let mut out = Vec::new();
    while pos < buf.len() {
        let id_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let id = String::from_utf8(take(&mut pos, id_len)?.to_vec())
            .map_err(|_| "layer id is not valid UTF-8".to_string())?;
        let dtype = take(&mut pos, 1)?[0];
        if dtype != DTYPE_F64 {
            return Err(format!("layer {id:?}: unsupported dtype tag {dtype}"));
        }
        let rank = take(&mut pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take(&mut pos, numel * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| format!("layer {id:?}: {e}"))?;
        out.push((id, tensor));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn zero_all_params(model: &mut Model) {
        for p in model.params_mut() {
            p.value = Tensor::zeros(p.value.shape().to_vec());
        }
    }

    #[test]
    fn tiny_vgg_feature_map_and_head_len() {
        let model = build_model(&ModelConfig::tiny_vgg(64, 1)).unwrap();
        assert_eq!(model.feature_shape(), (32, 8, 8));
        assert_eq!(model.head_input_len(), 32 + 32 + 2048);
    }

    #[test]
    fn same_seed_gives_identical_parameters() {
        let a = build_model(&ModelConfig::tiny_vgg(32, 9)).unwrap();
        let b = build_model(&ModelConfig::tiny_vgg(32, 9)).unwrap();
        for id in a.param_ids() {
            assert_eq!(a.param(&id).unwrap(), b.param(&id).unwrap(), "{id}");
        }
        let c = build_model(&ModelConfig::tiny_vgg(32, 10)).unwrap();
        assert_ne!(
            a.param("conv1.weight").unwrap(),
            c.param("conv1.weight").unwrap()
        );
    }

    #[test]
    fn collapsing_input_is_config_error_naming_layer() {
        let cfg = ModelConfig::tiny_vgg(4, 1);
        let err = build_model(&cfg).unwrap_err();
        match err {
            Error::Config(msg) => assert!(msg.contains("pool3"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn forward_shapes_and_range() {
        let model = build_model(&ModelConfig::tiny_vgg(32, 2)).unwrap();
        let batch = Tensor::filled(vec![3, 3, 32, 32], 0.25);
        let probs = model.predict(&batch).unwrap();
        assert_eq!(probs.shape(), &[3, 1]);
        assert!(probs.data().iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn activations_recorded_per_layer() {
        let model = build_model(&ModelConfig::tiny_vgg(64, 3)).unwrap();
        let batch = Tensor::filled(vec![2, 3, 64, 64], 0.5);
        let pass = model.forward(&batch, ForwardMode::Eval).unwrap();
        assert_eq!(
            pass.activation_value("features").unwrap().shape(),
            &[2, 32, 8, 8]
        );
        assert_eq!(
            pass.activation_value("conv3").unwrap().shape(),
            &[2, 32, 16, 16]
        );
        assert!(matches!(
            pass.activation("conv9"),
            Err(Error::Lookup(_))
        ));
    }

    #[test]
    fn wrong_input_size_is_dimension_error() {
        let model = build_model(&ModelConfig::tiny_vgg(32, 2)).unwrap();
        let batch = Tensor::filled(vec![1, 3, 16, 16], 0.0);
        assert!(matches!(
            model.forward(&batch, ForwardMode::Eval),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn zero_weights_give_half_probability() {
        let mut model = build_model(&ModelConfig::tiny_vgg(16, 4)).unwrap();
        zero_all_params(&mut model);
        let batch = Tensor::zeros(vec![1, 3, 16, 16]);
        let probs = model.predict(&batch).unwrap();
        assert_eq!(probs.data(), &[0.5]);
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let model = build_model(&ModelConfig::tiny_vgg(16, 5)).unwrap();
        let batch = Tensor::filled(vec![1, 3, 16, 16], 0.7);
        let a = model.predict(&batch).unwrap();
        let b = model.predict(&batch).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn train_mode_dropout_depends_only_on_seed() {
        let model = build_model(&ModelConfig::tiny_vgg(16, 6)).unwrap();
        let batch = Tensor::filled(vec![1, 3, 16, 16], 0.7);
        let p = |seed| {
            let pass = model
                .forward(&batch, ForwardMode::Train { dropout_seed: seed })
                .unwrap();
            pass.tape().value(pass.probabilities).clone()
        };
        assert_eq!(p(1), p(1));
        assert_ne!(p(1), p(2));
    }

    #[test]
    fn freeze_validates_layer_ids() {
        let mut model = build_model(&ModelConfig::tiny_vgg(16, 7)).unwrap();
        assert!(model.set_frozen(&["conv1".into(), "head_dense".into()]).is_ok());
        assert!(model.is_param_frozen("conv1.weight"));
        assert!(!model.is_param_frozen("conv2.weight"));
        assert!(matches!(
            model.set_frozen(&["conv99".into()]),
            Err(Error::Lookup(_))
        ));
    }

    #[test]
    fn weights_roundtrip_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.hscw");
        let model = build_model(&ModelConfig::tiny_vgg(16, 8)).unwrap();
        model.save_weights(&path).unwrap();

        let mut other = build_model(&ModelConfig::tiny_vgg(16, 99)).unwrap();
        other.load_weights(&path).unwrap();
        let batch = Tensor::filled(vec![2, 3, 16, 16], 0.3);
        assert_eq!(
            model.predict(&batch).unwrap(),
            other.predict(&batch).unwrap()
        );
        for id in model.param_ids() {
            assert_eq!(model.param(&id).unwrap(), other.param(&id).unwrap());
        }
    }

    #[test]
    fn truncated_weights_leave_model_unmodified() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.hscw");
        let model = build_model(&ModelConfig::tiny_vgg(16, 8)).unwrap();
        model.save_weights(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();

        let mut other = build_model(&ModelConfig::tiny_vgg(16, 99)).unwrap();
        let before: Vec<Tensor> = other
            .param_ids()
            .iter()
            .map(|id| other.param(id).unwrap().clone())
            .collect();
        let err = other.load_weights(&path).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err:?}");
        for (id, b) in other.param_ids().iter().zip(&before) {
            assert_eq!(other.param(id).unwrap(), b);
        }
    }

    #[test]
    fn shape_mismatch_on_load_names_layer_and_shapes() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.hscw");
        build_model(&ModelConfig::tiny_vgg(16, 8))
            .unwrap()
            .save_weights(&path)
            .unwrap();
        let mut bigger = build_model(&ModelConfig::tiny_vgg(32, 8)).unwrap();
        let err = bigger.load_weights(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("head_dense.weight"), "{msg}");
        assert!(msg.contains("in file") && msg.contains("in model"), "{msg}");
    }
}
