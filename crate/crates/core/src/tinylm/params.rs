use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelError, VOCAB_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Context window W: the longest sequence `forward` accepts.
    pub context_window: usize,
    pub vocab_size: usize,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            context_window: 64,
            vocab_size: VOCAB_SIZE,
            init_std: 0.02,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.vocab_size != VOCAB_SIZE {
            return bad(format!("vocab_size must be {VOCAB_SIZE}, got {}", self.vocab_size));
        }
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model ({}) must be a positive multiple of n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.context_window < 2 {
            return bad(format!("context_window must be >= 2, got {}", self.context_window));
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return bad(format!("init_std must be finite and >= 0, got {}", self.init_std));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn hidden_dim(&self) -> usize {
        4 * self.d_model
    }
}

/// Offsets of every named tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub layers: Vec<LayerLayout>,
    pub lnf_gain: usize,
    pub lnf_bias: usize,
    pub out_proj: usize,
    pub total: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerLayout {
    pub ln1_gain: usize,
    pub ln1_bias: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub ln2_gain: usize,
    pub ln2_bias: usize,
    pub w_up: usize,
    pub w_down: usize,
}

/// Kind of a parameter block, used by `init` to decide how to fill it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Weight,
    NormGain,
    NormBias,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (v, d, w, h) = (cfg.vocab_size, cfg.d_model, cfg.context_window, cfg.hidden_dim());
        let mut cursor = 0;
        let mut take = |n: usize| {
            let at = cursor;
            cursor += n;
            at
        };
        let tok_emb = take(v * d);
        let pos_emb = take(w * d);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerLayout {
                ln1_gain: take(d),
                ln1_bias: take(d),
                wq: take(d * d),
                wk: take(d * d),
                wv: take(d * d),
                wo: take(d * d),
                ln2_gain: take(d),
                ln2_bias: take(d),
                w_up: take(d * h),
                w_down: take(h * d),
            })
            .collect();
        let lnf_gain = take(d);
        let lnf_bias = take(d);
        let out_proj = take(d * v);
        Layout {
            tok_emb,
            pos_emb,
            layers,
            lnf_gain,
            lnf_bias,
            out_proj,
            total: cursor,
        }
    }

    /// Every block as `(name, offset, len, kind)` in storage order.
    pub fn blocks(&self, cfg: &ModelConfig) -> Vec<(String, usize, usize, BlockKind)> {
        let (v, d, w, h) = (cfg.vocab_size, cfg.d_model, cfg.context_window, cfg.hidden_dim());
        use BlockKind::*;
        let mut out = vec![
            ("tok_emb".to_string(), self.tok_emb, v * d, Weight),
            ("pos_emb".to_string(), self.pos_emb, w * d, Weight),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.extend([
                (format!("layer{i}.ln1_gain"), l.ln1_gain, d, NormGain),
                (format!("layer{i}.ln1_bias"), l.ln1_bias, d, NormBias),
                (format!("layer{i}.wq"), l.wq, d * d, Weight),
                (format!("layer{i}.wk"), l.wk, d * d, Weight),
                (format!("layer{i}.wv"), l.wv, d * d, Weight),
                (format!("layer{i}.wo"), l.wo, d * d, Weight),
                (format!("layer{i}.ln2_gain"), l.ln2_gain, d, NormGain),
                (format!("layer{i}.ln2_bias"), l.ln2_bias, d, NormBias),
                (format!("layer{i}.w_up"), l.w_up, d * h, Weight),
                (format!("layer{i}.w_down"), l.w_down, h * d, Weight),
            ]);
        }
        out.extend([
            ("lnf_gain".to_string(), self.lnf_gain, d, NormGain),
            ("lnf_bias".to_string(), self.lnf_bias, d, NormBias),
            ("out_proj".to_string(), self.out_proj, d * v, Weight),
        ]);
        out
    }
}

/// Flat parameter vector θ with its configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    config: ModelConfig,
    layout: Layout,
    values: Vec<f64>,
}

impl Parameters {
    /// Seeded gaussian init: weights ~ N(0, init_std²), norm gains 1, norm
    /// biases 0.
    pub fn init(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = Layout::new(config);
        let mut values = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, config.init_std)
            .map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
        for (_, offset, len, kind) in layout.blocks(config) {
            let block = &mut values[offset..offset + len];
            match kind {
                BlockKind::Weight => block.iter_mut().for_each(|x| *x = normal.sample(&mut rng)),
                BlockKind::NormGain => block.fill(1.0),
                BlockKind::NormBias => block.fill(0.0),
            }
        }
        Ok(Parameters {
            config: *config,
            layout,
            values,
        })
    }

    pub fn from_values(config: &ModelConfig, values: Vec<f64>) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = Layout::new(config);
        if values.len() != layout.total {
            return Err(ModelError::ShapeMismatch {
                expected: layout.total,
                got: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|x| !x.is_finite()) {
            return Err(ModelError::NonFiniteParameter(i));
        }
        Ok(Parameters {
            config: *config,
            layout,
            values,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn block(&self, offset: usize, len: usize) -> &[f64] {
        &self.values[offset..offset + len]
    }

    /// SHA-256 of the little-endian parameter bytes, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for x in &self.values {
            h.update(x.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Read-only snapshot used as the KL reference θ₀. No mutable access is
/// exposed, so a trainer holding one cannot change it.
#[derive(Debug, Clone)]
pub struct FrozenParameters(Arc<Parameters>);

impl FrozenParameters {
    pub fn params(&self) -> &Parameters {
        &self.0
    }

    pub fn fingerprint(&self) -> String {
        self.0.fingerprint()
    }
}

impl std::ops::Deref for FrozenParameters {
    type Target = Parameters;
    fn deref(&self) -> &Parameters {
        &self.0
    }
}

pub fn freeze_reference(params: &Parameters) -> FrozenParameters {
    FrozenParameters(Arc::new(params.clone()))
}
