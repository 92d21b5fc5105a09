//! Low-rank adapters on frozen projections.
//!
//! An adapted projection computes `x·W + s · (x·Aᵀ)·Bᵀ` where `A` is `r×in`,
//! `B` is `out×r` and `s` is the adapter scale. `B` starts at zero, so a fresh
//! adapter leaves the frozen output untouched.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::FrozenBackbone;
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Real, Tensor};

/// A frozen projection matrix inside a decoder block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    Query,
    Key,
    Value,
    Output,
    FfnUp,
    FfnDown,
}

impl Projection {
    pub const ALL: [Projection; 6] = [
        Projection::Query,
        Projection::Key,
        Projection::Value,
        Projection::Output,
        Projection::FfnUp,
        Projection::FfnDown,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Projection::Query => "query",
            Projection::Key => "key",
            Projection::Value => "value",
            Projection::Output => "output",
            Projection::FfnUp => "ffn_up",
            Projection::FfnDown => "ffn_down",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Projection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Projection::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown adapter target {s:?}")))
    }
}

/// How the adapter update is scaled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterScale {
    /// `s = alpha / r`.
    #[default]
    Ratio,
    /// `s = 1`, the bare `B·A·h` update.
    Unit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterSpec {
    #[serde(default = "default_rank")]
    pub rank: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_targets")]
    pub targets: Vec<String>,
    #[serde(default)]
    pub scale: AdapterScale,
}

fn default_rank() -> usize {
    64
}

fn default_alpha() -> f64 {
    16.0
}

fn default_targets() -> Vec<String> {
    vec!["query".into(), "value".into()]
}

impl Default for AdapterSpec {
    fn default() -> Self {
        Self {
            rank: default_rank(),
            alpha: default_alpha(),
            targets: default_targets(),
            scale: AdapterScale::Ratio,
        }
    }
}

impl AdapterSpec {
    pub fn scale_factor(&self) -> f64 {
        match self.scale {
            AdapterScale::Ratio => self.alpha / self.rank as f64,
            AdapterScale::Unit => 1.0,
        }
    }

    /// Parsed, deduplicated targets in canonical order.
    pub fn projections(&self) -> Result<Vec<Projection>> {
        let mut out = Vec::new();
        for t in &self.targets {
            let p: Projection = t.parse()?;
            if !out.contains(&p) {
                out.push(p);
            }
        }
        out.sort();
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct LoraAdapter {
    pub layer: usize,
    pub projection: Projection,
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub scale: f64,
}

#[derive(Clone, Debug, Default)]
pub struct AdapterSet {
    pub adapters: Vec<LoraAdapter>,
}

impl AdapterSet {
    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn find(&self, layer: usize, projection: Projection) -> Option<&LoraAdapter> {
        self.adapters
            .iter()
            .find(|a| a.layer == layer && a.projection == projection)
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.adapters.iter().flat_map(|a| [a.a, a.b])
    }
}

pub fn adapter_param_name(layer: usize, p: Projection, which: char) -> String {
    format!("adapter.{layer}.{}.{which}", p.name())
}

/// Creates one adapter per (layer, target) and registers `A` (small uniform
/// noise drawn from `seed`) and `B` (zeros) as trainable tensors in `store`.
pub fn attach_adapters<F: Real>(
    bb: &FrozenBackbone<F>,
    spec: &AdapterSpec,
    store: &mut ParamStore<F>,
    seed: u64,
) -> Result<AdapterSet> {
    if spec.rank == 0 {
        return Err(Error::Config("adapter rank must be >= 1".into()));
    }
    if !(spec.alpha.is_finite()) {
        return Err(Error::Config("adapter alpha must be finite".into()));
    }
    let d = bb.config().model_dim;
    if spec.rank > d {
        return Err(Error::Config(format!(
            "adapter rank {} exceeds model dimension {d}",
            spec.rank
        )));
    }
    let targets = spec.projections()?;
    let scale = spec.scale_factor();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x00ad_a97e_5eed);
    let mut set = AdapterSet::default();
    for layer in 0..bb.config().num_layers {
        for &p in &targets {
            let (fan_in, fan_out) = bb.projection_dims(p);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let a_vals = (0..spec.rank * fan_in)
                .map(|_| F::of(rng.random_range(-bound..bound)))
                .collect();
            let a = store.add(
                adapter_param_name(layer, p, 'A'),
                Tensor::from_parts(vec![spec.rank, fan_in], a_vals),
                true,
            )?;
            let b = store.add(
                adapter_param_name(layer, p, 'B'),
                Tensor::zeros(&[fan_out, spec.rank]),
                true,
            )?;
            set.adapters.push(LoraAdapter {
                layer,
                projection: p,
                a,
                b,
                rank: spec.rank,
                scale,
            });
        }
    }
    Ok(set)
}
