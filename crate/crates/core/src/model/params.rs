//! Flat parameter storage with a named tensor layout.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::error::{Error, Result};

/// Standard deviation of the normal initializer for projection weights.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rank-1 tensors are row vectors; rank-2 tensors are `[in, out]`.
    pub fn matrix_shape(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => unreachable!("layout only holds rank 1 and 2 tensors"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Ordered tensor names, shapes and offsets for one [`ModelConfig`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    entries: Vec<ParamEntry>,
    inits: Vec<Init>,
    index: HashMap<String, usize>,
    total: usize,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut l = Self {
            entries: Vec::new(),
            inits: Vec::new(),
            index: HashMap::new(),
            total: 0,
        };
        let c = cfg.embed_dim;
        l.push("embed.weight", vec![cfg.patch_len(), c], Init::Normal);
        l.push("embed.bias", vec![c], Init::Zeros);
        l.push("pos_embed", vec![cfg.tokens_per_frame(), c], Init::Normal);
        for b in 0..cfg.enc_blocks {
            l.push_block(&format!("enc.{b}.frame"), cfg, false);
            l.push_block(&format!("enc.{b}.global"), cfg, false);
        }
        for b in 0..cfg.dec_blocks {
            l.push_block(&format!("dec.{b}.frame"), cfg, false);
            l.push_block(&format!("dec.{b}.cross"), cfg, true);
        }
        l.push("head.norm.weight", vec![c], Init::Ones);
        l.push("head.norm.bias", vec![c], Init::Zeros);
        l.push("head.fc1.weight", vec![c, c], Init::Normal);
        l.push("head.fc1.bias", vec![c], Init::Zeros);
        l.push("head.fc2.weight", vec![c, cfg.head_out()], Init::Zeros);
        l.push("head.fc2.bias", vec![cfg.head_out()], Init::Zeros);
        l
    }

    fn push(&mut self, name: &str, shape: Vec<usize>, init: Init) {
        let entry = ParamEntry {
            name: name.to_owned(),
            offset: self.total,
            shape,
        };
        self.total += entry.len();
        self.index.insert(entry.name.clone(), self.entries.len());
        self.entries.push(entry);
        self.inits.push(init);
    }

    fn push_block(&mut self, prefix: &str, cfg: &ModelConfig, cross: bool) {
        let c = cfg.embed_dim;
        let hidden = c * cfg.mlp_ratio;
        self.push(&format!("{prefix}.norm1.weight"), vec![c], Init::Ones);
        self.push(&format!("{prefix}.norm1.bias"), vec![c], Init::Zeros);
        if cross {
            self.push(&format!("{prefix}.norm_kv.weight"), vec![c], Init::Ones);
            self.push(&format!("{prefix}.norm_kv.bias"), vec![c], Init::Zeros);
        }
        for proj in ["q", "k", "v", "o"] {
            self.push(&format!("{prefix}.attn.{proj}.weight"), vec![c, c], Init::Normal);
            self.push(&format!("{prefix}.attn.{proj}.bias"), vec![c], Init::Zeros);
        }
        self.push(&format!("{prefix}.norm2.weight"), vec![c], Init::Ones);
        self.push(&format!("{prefix}.norm2.bias"), vec![c], Init::Zeros);
        self.push(&format!("{prefix}.mlp.fc1.weight"), vec![c, hidden], Init::Normal);
        self.push(&format!("{prefix}.mlp.fc1.bias"), vec![hidden], Init::Zeros);
        self.push(&format!("{prefix}.mlp.fc2.weight"), vec![hidden, c], Init::Normal);
        self.push(&format!("{prefix}.mlp.fc2.bias"), vec![c], Init::Zeros);
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn entry(&self, name: &str) -> &ParamEntry {
        self.get(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
    }
}

/// All learnable values of one model, stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    layout: ParamLayout,
    values: Vec<f64>,
}

impl ModelParams {
    /// Seeded initialization: normal(0, 0.02) projections, unit norms, zero
    /// biases, and a zero final head layer so the model starts as identity.
    /// Values are rounded to `f32` so checkpoints round-trip exactly.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut values = vec![0.0; layout.total()];
        for (entry, init) in layout.entries.iter().zip(&layout.inits) {
            let dst = &mut values[entry.offset..entry.offset + entry.len()];
            match init {
                Init::Zeros => {}
                Init::Ones => dst.fill(1.0),
                Init::Normal => dst
                    .iter_mut()
                    .for_each(|v| *v = normal.sample(&mut rng) as f32 as f64),
            }
        }
        Ok(Self {
            config,
            layout,
            values,
        })
    }

    pub fn from_values(config: ModelConfig, values: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        if values.len() != layout.total() {
            return Err(Error::DimensionMismatch(format!(
                "model needs {} parameters, got {}",
                layout.total(),
                values.len()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(Self {
            config,
            layout,
            values,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn tensor(&self, name: &str) -> &[f64] {
        let e = self.layout.entry(name);
        &self.values[e.offset..e.offset + e.len()]
    }

    pub fn tensor_mut(&mut self, name: &str) -> &mut [f64] {
        let e = self.layout.entry(name).clone();
        &mut self.values[e.offset..e.offset + e.len()]
    }

    /// Round every value to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        self.values.iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
}
