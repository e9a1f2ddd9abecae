//! Layer weights, calibrated activation scales, and deterministic synthetic
//! models.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, EncoderConfig};
use crate::container::{ContainerError, TensorPayload, WeightContainer};
use crate::engine::{self, EngineError};
use crate::quant::{max_abs_scale, quantize, QuantTensor};
use crate::strategy::{Registry, StrategyError};

/// Scale of synthetic weights (real value per LSB).
pub const SYNTH_WEIGHT_SCALE: f64 = 0.02;
/// Synthetic inputs used to calibrate activation scales.
pub const CALIBRATION_BATCH: usize = 2;

const CONFIG_TENSOR: &str = "__config__";
pub const INPUT_TENSOR: &str = "input";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("calibration failed: {0}")]
    Calibration(#[from] Box<EngineError>),
}

impl From<EngineError> for ModelError {
    fn from(e: EngineError) -> Self {
        ModelError::Calibration(Box::new(e))
    }
}

/// Per-layer scales for every point where a real tensor is quantized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerScales {
    /// LayerNorm-1 output (QKV input).
    pub x1: f64,
    pub q: f64,
    pub k: f64,
    pub v: f64,
    /// Concatenated attention-times-V output (projection input).
    pub ctx: f64,
    /// LayerNorm-2 output (FFN1 input).
    pub x2: f64,
    /// Post-activation FFN1 output (FFN2 input).
    pub act: f64,
    /// Block output.
    pub out: f64,
}

impl LayerScales {
    pub const COUNT: usize = 8;

    pub fn to_array(self) -> [f64; Self::COUNT] {
        [
            self.x1, self.q, self.k, self.v, self.ctx, self.x2, self.act, self.out,
        ]
    }

    pub fn from_array(a: [f64; Self::COUNT]) -> Self {
        Self {
            x1: a[0],
            q: a[1],
            k: a[2],
            v: a[3],
            ctx: a[4],
            x2: a[5],
            act: a[6],
            out: a[7],
        }
    }

    pub fn uniform(s: f64) -> Self {
        Self::from_array([s; Self::COUNT])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub wq: QuantTensor,
    pub wk: QuantTensor,
    pub wv: QuantTensor,
    pub wproj: QuantTensor,
    pub wffn1: QuantTensor,
    pub wffn2: QuantTensor,
    pub ln1_gamma: Vec<f64>,
    pub ln1_beta: Vec<f64>,
    pub ln2_gamma: Vec<f64>,
    pub ln2_beta: Vec<f64>,
}

impl LayerWeights {
    fn quant_tensors(&self) -> [(&'static str, &QuantTensor); 6] {
        [
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wproj", &self.wproj),
            ("wffn1", &self.wffn1),
            ("wffn2", &self.wffn2),
        ]
    }

    fn norm_params(&self) -> [(&'static str, &Vec<f64>); 4] {
        [
            ("ln1_gamma", &self.ln1_gamma),
            ("ln1_beta", &self.ln1_beta),
            ("ln2_gamma", &self.ln2_gamma),
            ("ln2_beta", &self.ln2_beta),
        ]
    }

    pub fn validate(&self, config: &EncoderConfig, layer: usize) -> Result<(), ContainerError> {
        let d = config.embed_dim;
        let f = config.ffn_dim;
        let expected = [[d, d], [d, d], [d, d], [d, d], [d, f], [f, d]];
        for ((name, t), want) in self.quant_tensors().iter().zip(expected) {
            if t.shape() != want {
                return Err(ContainerError::ShapeMismatch(format!(
                    "layer {layer} {name}: expected {want:?}, got {:?}",
                    t.shape()
                )));
            }
        }
        for (name, v) in self.norm_params() {
            if v.len() != d {
                return Err(ContainerError::ShapeMismatch(format!(
                    "layer {layer} {name}: expected {d} values, got {}",
                    v.len()
                )));
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.quant_tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

fn uniform_weights(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> QuantTensor {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-127i8..=127))
        .collect();
    QuantTensor::new(vec![rows, cols], data, SYNTH_WEIGHT_SCALE, 0).expect("valid shape")
}

/// f32-representable values so the container round trip is exact.
fn norm_vector(rng: &mut ChaCha8Rng, len: usize, center: f32, spread: f32) -> Vec<f64> {
    (0..len)
        .map(|_| (center + rng.random_range(-spread..=spread)) as f64)
        .collect()
}

/// Deterministic weights: uniform INT8 in [-127, 127] at scale 0.02,
/// LayerNorm gain near 1 and bias near 0.
pub fn synth_model(config: &EncoderConfig, seed: u64) -> Result<Vec<LayerWeights>, ConfigError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.embed_dim;
    let f = config.ffn_dim;
    Ok((0..config.num_layers)
        .map(|_| LayerWeights {
            wq: uniform_weights(&mut rng, d, d),
            wk: uniform_weights(&mut rng, d, d),
            wv: uniform_weights(&mut rng, d, d),
            wproj: uniform_weights(&mut rng, d, d),
            wffn1: uniform_weights(&mut rng, d, f),
            wffn2: uniform_weights(&mut rng, f, d),
            ln1_gamma: norm_vector(&mut rng, d, 1.0, 0.1),
            ln1_beta: norm_vector(&mut rng, d, 0.0, 0.1),
            ln2_gamma: norm_vector(&mut rng, d, 1.0, 0.1),
            ln2_beta: norm_vector(&mut rng, d, 0.0, 0.1),
        })
        .collect())
}

/// Standard-normal token embeddings `[num_tokens x embed_dim]`, max-abs
/// quantized.
pub fn synth_input(config: &EncoderConfig, seed: u64) -> QuantTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1a2b_3c4d_5e6f_7081);
    let n = config.num_tokens * config.embed_dim;
    let x: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let scale = max_abs_scale(x.iter().copied()) as f32 as f64;
    quantize(&x, &[config.num_tokens, config.embed_dim], scale, 0).expect("finite input")
}

pub fn calibration_batch(config: &EncoderConfig, seed: u64) -> Vec<QuantTensor> {
    (0..CALIBRATION_BATCH as u64)
        .map(|i| synth_input(config, seed.wrapping_add(0xca11_b000 + i)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: EncoderConfig,
    pub layers: Vec<LayerWeights>,
    pub scales: Vec<LayerScales>,
}

impl Model {
    /// Synthetic weights plus activation scales calibrated on a seeded batch.
    pub fn synthesize(
        config: &EncoderConfig,
        seed: u64,
        registry: &Registry,
    ) -> Result<Self, ModelError> {
        let layers = synth_model(config, seed)?;
        Self::calibrated(config.clone(), layers, seed, registry)
    }

    pub fn calibrated(
        config: EncoderConfig,
        layers: Vec<LayerWeights>,
        seed: u64,
        registry: &Registry,
    ) -> Result<Self, ModelError> {
        let batch = calibration_batch(&config, seed);
        let scales = engine::calibrate(&config, &layers, &batch, registry)?;
        Ok(Self {
            config,
            layers,
            scales,
        })
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerWeights::param_count).sum()
    }

    pub fn to_container(&self, input: Option<&QuantTensor>) -> WeightContainer {
        let mut c = WeightContainer::default();
        let json = serde_json::to_vec(&self.config).expect("config serializes");
        let bytes = json.iter().map(|&b| b as i8).collect::<Vec<_>>();
        c.push(
            CONFIG_TENSOR,
            TensorPayload::I8(
                QuantTensor::new(vec![bytes.len()], bytes, 1.0, 0).expect("non-empty"),
            ),
        );
        for (i, (layer, scales)) in self.layers.iter().zip(&self.scales).enumerate() {
            for (name, t) in layer.quant_tensors() {
                c.push(format!("layers.{i}.{name}"), TensorPayload::I8(t.clone()));
            }
            for (name, v) in layer.norm_params() {
                c.push(
                    format!("layers.{i}.{name}"),
                    TensorPayload::f32(vec![v.len()], v.iter().map(|&x| x as f32).collect()),
                );
            }
            c.push(
                format!("layers.{i}.act_scales"),
                TensorPayload::f32(
                    vec![LayerScales::COUNT],
                    scales.to_array().iter().map(|&s| s as f32).collect(),
                ),
            );
        }
        if let Some(x) = input {
            c.push(INPUT_TENSOR, TensorPayload::I8(x.clone()));
        }
        c
    }

    /// Rebuilds a model; containers without stored scales are calibrated
    /// with seed 0.
    pub fn from_container(
        c: &WeightContainer,
        registry: &Registry,
    ) -> Result<(Self, Option<QuantTensor>), ModelError> {
        let raw = c.quant(CONFIG_TENSOR)?;
        let json: Vec<u8> = raw.data().iter().map(|&b| b as u8).collect();
        let config: EncoderConfig =
            serde_json::from_slice(&json).map_err(|e| ContainerError::Config(e.to_string()))?;
        config.validate()?;
        registry.resolve(&config)?;

        let mut layers = Vec::with_capacity(config.num_layers);
        let mut scales = Vec::with_capacity(config.num_layers);
        for i in 0..config.num_layers {
            let q = |name: &str| c.quant(&format!("layers.{i}.{name}")).cloned();
            let v = |name: &str| {
                c.f32_values(&format!("layers.{i}.{name}"))
                    .map(|(_, d)| d.iter().map(|&x| x as f64).collect::<Vec<_>>())
            };
            let layer = LayerWeights {
                wq: q("wq")?,
                wk: q("wk")?,
                wv: q("wv")?,
                wproj: q("wproj")?,
                wffn1: q("wffn1")?,
                wffn2: q("wffn2")?,
                ln1_gamma: v("ln1_gamma")?,
                ln1_beta: v("ln1_beta")?,
                ln2_gamma: v("ln2_gamma")?,
                ln2_beta: v("ln2_beta")?,
            };
            layer.validate(&config, i + 1)?;
            layers.push(layer);
            match c.f32_values(&format!("layers.{i}.act_scales")) {
                Ok((_, s)) if s.len() == LayerScales::COUNT => {
                    let mut a = [0.0; LayerScales::COUNT];
                    for (dst, &src) in a.iter_mut().zip(s) {
                        *dst = src as f64;
                    }
                    scales.push(LayerScales::from_array(a));
                }
                Ok((shape, _)) => {
                    return Err(ContainerError::ShapeMismatch(format!(
                        "layers.{i}.act_scales has shape {shape:?}"
                    ))
                    .into())
                }
                Err(ContainerError::MissingTensor(_)) => {}
                Err(e) => return Err(e.into()),
            }
        }
        let input = match c.quant(INPUT_TENSOR) {
            Ok(t) => Some(t.clone()),
            Err(ContainerError::MissingTensor(_)) => None,
            Err(e) => return Err(e.into()),
        };
        let model = if scales.len() == config.num_layers {
            Self {
                config,
                layers,
                scales,
            }
        } else {
            Self::calibrated(config, layers, 0, registry)?
        };
        Ok((model, input))
    }
}

pub fn save_model(
    path: impl AsRef<Path>,
    model: &Model,
    input: Option<&QuantTensor>,
) -> Result<(), ContainerError> {
    model.to_container(input).write(path)
}

pub fn load_model(
    path: impl AsRef<Path>,
    registry: &Registry,
) -> Result<(Model, Option<QuantTensor>), ModelError> {
    let c = WeightContainer::read(path)?;
    Model::from_container(&c, registry)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_layer() -> EncoderConfig {
        EncoderConfig {
            num_layers: 1,
            prune_layers: vec![],
            ffn2_thresholds: vec![0.0],
            ..EncoderConfig::tiny()
        }
    }

    #[test]
    fn synth_is_deterministic() {
        let c = EncoderConfig::tiny();
        assert_eq!(synth_model(&c, 5).unwrap(), synth_model(&c, 5).unwrap());
        assert_ne!(synth_model(&c, 5).unwrap(), synth_model(&c, 6).unwrap());
        assert_eq!(synth_input(&c, 1), synth_input(&c, 1));
    }

    #[test]
    fn synth_weight_range_and_scale() {
        let layers = synth_model(&EncoderConfig::tiny(), 0).unwrap();
        for l in &layers {
            assert!(l.wffn1.data().iter().all(|&v| v >= -127));
            assert_eq!(l.wq.scale(), SYNTH_WEIGHT_SCALE);
        }
    }

    #[test]
    fn deit_s_parameter_count() {
        let c = EncoderConfig::deit_s();
        let layers = synth_model(&c, 0).unwrap();
        assert_eq!(layers.len(), 12);
        assert_eq!(layers[0].wffn1.shape(), &[384, 1536]);
        let total: usize = layers.iter().map(LayerWeights::param_count).sum();
        // 12 x (4 x 384^2 + 2 x 384 x 1536)
        assert_eq!(total, 12 * (4 * 384 * 384 + 2 * 384 * 1536));
        assert_eq!(total, 21_233_664);
    }

    #[test]
    fn container_round_trip_is_byte_identical() {
        let reg = Registry::builtin();
        let model = Model::synthesize(&one_layer(), 3, &reg).unwrap();
        let input = synth_input(&model.config, 3);
        let bytes = model.to_container(Some(&input)).to_bytes();
        let (back, back_input) =
            Model::from_container(&WeightContainer::from_bytes(&bytes).unwrap(), &reg).unwrap();
        assert_eq!(back.to_container(back_input.as_ref()).to_bytes(), bytes);
        assert_eq!(back, model);
        assert_eq!(back_input, Some(input));
    }

    #[test]
    fn truncated_payload_is_shape_mismatch() {
        let reg = Registry::builtin();
        let model = Model::synthesize(&one_layer(), 3, &reg).unwrap();
        let bytes = model.to_container(None).to_bytes();
        let err = WeightContainer::from_bytes(&bytes[..bytes.len() - 10]).unwrap_err();
        assert!(matches!(err, ContainerError::ShapeMismatch(_)));
    }

    #[test]
    fn wrong_weight_shape_is_rejected() {
        let reg = Registry::builtin();
        let model = Model::synthesize(&one_layer(), 3, &reg).unwrap();
        let mut c = model.to_container(None);
        let t = c
            .tensors
            .iter_mut()
            .find(|t| t.name == "layers.0.wffn2")
            .unwrap();
        t.payload =
            TensorPayload::I8(QuantTensor::new(vec![16, 32], vec![0; 512], 0.02, 0).unwrap());
        let err = Model::from_container(&c, &reg).unwrap_err();
        assert!(
            matches!(err, ModelError::Container(ContainerError::ShapeMismatch(_))),
            "{err}"
        );
    }

    #[test]
    fn missing_scales_are_recalibrated() {
        let reg = Registry::builtin();
        let model = Model::synthesize(&one_layer(), 0, &reg).unwrap();
        let mut c = model.to_container(None);
        c.tensors.retain(|t| !t.name.ends_with("act_scales"));
        let (back, _) = Model::from_container(&c, &reg).unwrap();
        assert_eq!(back.scales, model.scales);
    }
}
