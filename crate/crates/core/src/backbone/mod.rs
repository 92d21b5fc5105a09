//! Frozen decoder-only transformer.
//!
//! Blocks are pre-norm: `h += Attn(RmsNorm(h))`, then
//! `h += W_down · silu(W_up · RmsNorm(h))`, with a final RmsNorm on the output.
//! Learned absolute position embeddings are added to the token embeddings at
//! layer 0. All backbone tensors are frozen; only adapters attached through
//! [`attach_adapters`] receive gradients.

mod adapter;
pub mod nf4;

use std::borrow::Cow;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use adapter::{
    adapter_param_name, attach_adapters, AdapterScale, AdapterSet, AdapterSpec, LoraAdapter,
    Projection,
};
pub use nf4::{dequantize_nf4, quantize_nf4, QuantizedWeight, DEFAULT_BLOCK_SIZE, NF4_LEVELS};

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            model_dim: 64,
            num_heads: 4,
            ffn_dim: 128,
            vocab_size: 260,
            max_seq_len: 256,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    /// Small config with `ffn_dim = 2d` used by tests and the toy profile.
    pub fn tiny(model_dim: usize, num_layers: usize, num_heads: usize, vocab_size: usize) -> Self {
        Self {
            num_layers,
            model_dim,
            num_heads,
            ffn_dim: 2 * model_dim,
            vocab_size,
            max_seq_len: 256,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_layers", self.num_layers),
            ("model_dim", self.model_dim),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("backbone.{name} must be >= 1")));
            }
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "backbone.num_heads ({}) must divide model_dim ({})",
                self.num_heads, self.model_dim
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

/// A frozen weight matrix, stored densely or as NF4 codes.
#[derive(Clone, Debug, PartialEq)]
pub enum FrozenMatrix<F> {
    Dense(Tensor<F>),
    Nf4(QuantizedWeight<F>),
}

impl<F: Real> FrozenMatrix<F> {
    /// Values used by the forward pass; NF4 blocks are dequantized on demand.
    pub fn materialize(&self) -> Cow<'_, Tensor<F>> {
        match self {
            FrozenMatrix::Dense(t) => Cow::Borrowed(t),
            FrozenMatrix::Nf4(q) => Cow::Owned(dequantize_nf4(q)),
        }
    }

    pub fn is_quantized(&self) -> bool {
        matches!(self, FrozenMatrix::Nf4(_))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrozenLayer<F> {
    pub attn_norm: Tensor<F>,
    pub ffn_norm: Tensor<F>,
    /// Indexed by [`Projection::index`].
    pub projections: [FrozenMatrix<F>; 6],
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrozenBackbone<F> {
    config: BackboneConfig,
    pub embedding: Tensor<F>,
    pub positions: Tensor<F>,
    pub layers: Vec<FrozenLayer<F>>,
    pub final_norm: Tensor<F>,
}

fn normal_matrix<F: Real>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor<F> {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            F::of(z * scale)
        })
        .collect();
    Tensor::from_parts(vec![rows, cols], data)
}

impl<F: Real> FrozenBackbone<F> {
    /// Draws all weights from `cfg.seed` (standard normal scaled by
    /// `1/sqrt(fan_in)`, norm gains at one). With `quantize`, projection
    /// matrices are stored as NF4 with block size 64.
    pub fn init(cfg: &BackboneConfig, quantize: bool) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        let embedding = normal_matrix(&mut rng, cfg.vocab_size, d, inv_sqrt_d);
        let positions = normal_matrix(&mut rng, cfg.max_seq_len, d, inv_sqrt_d);
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for _ in 0..cfg.num_layers {
            let mut mats = Vec::with_capacity(6);
            for p in Projection::ALL {
                let (fan_in, fan_out) = projection_dims(cfg, p);
                let w = normal_matrix(&mut rng, fan_in, fan_out, 1.0 / (fan_in as f64).sqrt());
                mats.push(if quantize {
                    FrozenMatrix::Nf4(quantize_nf4(&w, DEFAULT_BLOCK_SIZE)?)
                } else {
                    FrozenMatrix::Dense(w)
                });
            }
            let projections: [FrozenMatrix<F>; 6] = mats.try_into().expect("six projections");
            layers.push(FrozenLayer {
                attn_norm: Tensor::full(&[d], F::one()),
                ffn_norm: Tensor::full(&[d], F::one()),
                projections,
            });
        }
        Ok(Self {
            config: cfg.clone(),
            embedding,
            positions,
            layers,
            final_norm: Tensor::full(&[d], F::one()),
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn is_quantized(&self) -> bool {
        self.layers
            .iter()
            .any(|l| l.projections.iter().any(FrozenMatrix::is_quantized))
    }

    /// `(fan_in, fan_out)` of a projection in `x·W` convention.
    pub fn projection_dims(&self, p: Projection) -> (usize, usize) {
        projection_dims(&self.config, p)
    }

    /// Every frozen tensor by name, materialized.
    pub fn named_tensors(&self) -> Vec<(String, Cow<'_, Tensor<F>>)> {
        let mut out = vec![
            ("embedding".to_string(), Cow::Borrowed(&self.embedding)),
            ("positions".to_string(), Cow::Borrowed(&self.positions)),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer.{l}.attn_norm"), Cow::Borrowed(&layer.attn_norm)));
            out.push((format!("layer.{l}.ffn_norm"), Cow::Borrowed(&layer.ffn_norm)));
            for p in Projection::ALL {
                out.push((
                    format!("layer.{l}.{}", p.name()),
                    layer.projections[p.index()].materialize(),
                ));
            }
        }
        out.push(("final_norm".to_string(), Cow::Borrowed(&self.final_norm)));
        out
    }

    /// Rebuilds a backbone from named tensors (the inverse of
    /// [`named_tensors`](Self::named_tensors)); re-quantizes projections when
    /// `quantize` is set, which is exact for tensors that came from NF4.
    pub fn from_named_tensors(
        cfg: &BackboneConfig,
        quantize: bool,
        mut get: impl FnMut(&str) -> Result<Tensor<F>>,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            let mut mats = Vec::with_capacity(6);
            for p in Projection::ALL {
                let w = get(&format!("layer.{l}.{}", p.name()))?;
                let (fan_in, fan_out) = projection_dims(cfg, p);
                if w.shape() != [fan_in, fan_out] {
                    return Err(Error::Checkpoint(format!(
                        "layer.{l}.{} has shape {:?}, expected [{fan_in}, {fan_out}]",
                        p.name(),
                        w.shape()
                    )));
                }
                mats.push(if quantize {
                    FrozenMatrix::Nf4(quantize_nf4(&w, DEFAULT_BLOCK_SIZE)?)
                } else {
                    FrozenMatrix::Dense(w)
                });
            }
            layers.push(FrozenLayer {
                attn_norm: get(&format!("layer.{l}.attn_norm"))?,
                ffn_norm: get(&format!("layer.{l}.ffn_norm"))?,
                projections: mats.try_into().expect("six projections"),
            });
        }
        Ok(Self {
            config: cfg.clone(),
            embedding: get("embedding")?,
            positions: get("positions")?,
            layers,
            final_norm: get("final_norm")?,
        })
    }

    /// Records every frozen tensor and adapter parameter on `tape`.
    pub fn bind(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        adapters: &AdapterSet,
    ) -> BoundBackbone<F> {
        let embedding = tape.constant(self.embedding.clone());
        let positions = tape.constant(self.positions.clone());
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(l, layer)| {
                let projections = Projection::ALL.map(|p| {
                    let weight = tape.constant(layer.projections[p.index()].materialize().into_owned());
                    let adapter = adapters.find(l, p).map(|a| BoundAdapter {
                        a: tape.param(store, a.a),
                        b: tape.param(store, a.b),
                        scale: F::of(a.scale),
                    });
                    BoundProjection { weight, adapter }
                });
                BoundLayer {
                    attn_norm: tape.constant(layer.attn_norm.clone()),
                    ffn_norm: tape.constant(layer.ffn_norm.clone()),
                    projections,
                }
            })
            .collect();
        BoundBackbone {
            config: self.config.clone(),
            embedding,
            positions,
            layers,
            final_norm: tape.constant(self.final_norm.clone()),
        }
    }
}

fn projection_dims(cfg: &BackboneConfig, p: Projection) -> (usize, usize) {
    let d = cfg.model_dim;
    match p {
        Projection::FfnUp => (d, cfg.ffn_dim),
        Projection::FfnDown => (cfg.ffn_dim, d),
        _ => (d, d),
    }
}

#[derive(Clone, Copy, Debug)]
struct BoundAdapter<F> {
    a: Var,
    b: Var,
    scale: F,
}

#[derive(Clone, Copy, Debug)]
struct BoundProjection<F> {
    weight: Var,
    adapter: Option<BoundAdapter<F>>,
}

#[derive(Clone, Debug)]
struct BoundLayer<F> {
    attn_norm: Var,
    ffn_norm: Var,
    projections: [BoundProjection<F>; 6],
}

/// A backbone whose tensors have been recorded on one tape.
#[derive(Clone, Debug)]
pub struct BoundBackbone<F> {
    config: BackboneConfig,
    embedding: Var,
    positions: Var,
    layers: Vec<BoundLayer<F>>,
    final_norm: Var,
}

impl<F: Real> BoundBackbone<F> {
    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// The token embedding table as recorded on the tape.
    pub fn embedding(&self) -> Var {
        self.embedding
    }

    fn project(&self, tape: &mut Tape<F>, x: Var, p: &BoundProjection<F>) -> Result<Var> {
        let base = tape.matmul(x, p.weight)?;
        match p.adapter {
            None => Ok(base),
            Some(ad) => {
                let down = tape.matmul_bt(x, ad.a)?;
                let up = tape.matmul_bt(down, ad.b)?;
                let up = tape.scale(up, ad.scale)?;
                tape.add(base, up)
            }
        }
    }

    fn attention(&self, tape: &mut Tape<F>, x: Var, layer: &BoundLayer<F>) -> Result<Var> {
        let q = self.project(tape, x, &layer.projections[Projection::Query.index()])?;
        let k = self.project(tape, x, &layer.projections[Projection::Key.index()])?;
        let v = self.project(tape, x, &layer.projections[Projection::Value.index()])?;
        let hd = self.config.head_dim();
        let inv = F::of(1.0 / (hd as f64).sqrt());
        let mut heads = Vec::with_capacity(self.config.num_heads);
        for h in 0..self.config.num_heads {
            let qh = tape.slice_cols(q, h * hd, hd)?;
            let kh = tape.slice_cols(k, h * hd, hd)?;
            let vh = tape.slice_cols(v, h * hd, hd)?;
            let scores = tape.matmul_bt(qh, kh)?;
            let scores = tape.scale(scores, inv)?;
            let masked = tape.causal_mask(scores)?;
            let probs = tape.softmax_lastdim(masked)?;
            heads.push(tape.matmul(probs, vh)?);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        };
        self.project(tape, merged, &layer.projections[Projection::Output.index()])
    }

    /// Final-layer hidden states (`n×d`) of an unpadded token sequence.
    pub fn encode(&self, tape: &mut Tape<F>, ids: &[u32]) -> Result<Var> {
        let n = ids.len();
        if n == 0 {
            return Err(Error::Input("empty token sequence".into()));
        }
        if n > self.config.max_seq_len {
            return Err(Error::Truncation {
                len: n,
                max: self.config.max_seq_len,
                what: "backbone input",
            });
        }
        let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..n).collect();
        let tok = tape.embedding(self.embedding, &ids)?;
        let pos = tape.embedding(self.positions, &positions)?;
        let mut h = tape.add(tok, pos)?;
        for layer in &self.layers {
            let a = tape.rms_norm(h, layer.attn_norm)?;
            let attn = self.attention(tape, a, layer)?;
            h = tape.add(h, attn)?;
            let b = tape.rms_norm(h, layer.ffn_norm)?;
            let up = self.project(tape, b, &layer.projections[Projection::FfnUp.index()])?;
            let act = tape.silu(up)?;
            let down = self.project(tape, act, &layer.projections[Projection::FfnDown.index()])?;
            h = tape.add(h, down)?;
        }
        tape.rms_norm(h, self.final_norm)
    }

    /// Final-layer hidden states of a right-padded sequence. Padding must be
    /// trailing; padded positions are computed but never influence earlier
    /// ones.
    pub fn forward(&self, tape: &mut Tape<F>, ids: &[u32], pad_mask: &[bool]) -> Result<Var> {
        check_trailing_padding(ids, pad_mask)?;
        self.encode(tape, ids)
    }
}

/// `pad_mask[i]` is true for real tokens. Returns the number of real tokens.
fn check_trailing_padding(ids: &[u32], pad_mask: &[bool]) -> Result<usize> {
    if ids.len() != pad_mask.len() {
        return Err(Error::Input(format!(
            "token ids ({}) and pad mask ({}) differ in length",
            ids.len(),
            pad_mask.len()
        )));
    }
    let real = pad_mask.iter().take_while(|&&m| m).count();
    if pad_mask[real..].iter().any(|&m| m) {
        return Err(Error::Input("padding must be trailing".into()));
    }
    Ok(real)
}

/// Hidden state (`1×d`) of the last non-pad position.
pub fn pool<F: Real>(tape: &mut Tape<F>, hidden: Var, pad_mask: &[bool]) -> Result<Var> {
    let rows = tape.shape(hidden).first().copied().unwrap_or(0);
    if pad_mask.len() != rows {
        return Err(Error::Input(format!(
            "pad mask length {} does not match {rows} hidden rows",
            pad_mask.len()
        )));
    }
    let last = pad_mask
        .iter()
        .rposition(|&m| m)
        .ok_or_else(|| Error::Input("cannot pool an all-padding sequence".into()))?;
    tape.select_row(hidden, last)
}
