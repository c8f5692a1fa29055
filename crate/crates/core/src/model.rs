//! Graph Embodiment Transformer.
//!
//! Tokens go through a linear embedding, an optional DFS positional
//! embedding, pre-norm encoder layers and two linear heads reading the same
//! final per-joint latent: a tanh-bounded policy head (one delta target per
//! joint) and a self-model head (planar joint position).
//!
//! With the graph variant every layer and head owns scalar tables indexed by
//! shortest-path, parent and child distance; the looked-up scalars are added
//! to the attention logits before the softmax.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::numerics::rng::{self, streams};
use crate::numerics::{Gradients, ParamStore, ShapeError, Tape, Tensor, Var};
use crate::tokenizer::{token_width, TokenBatch};

/// Positional-encoding variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeVariant {
    /// No structural information.
    None,
    /// Learned embedding over DFS rank, added once at the input.
    Dfs,
    /// Distance-indexed attention biases.
    Graph,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GetConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    /// Past frames in each token.
    pub history: usize,
    /// Last index of each bias table; larger distances clamp to it.
    pub max_distance: usize,
    /// Rows of the DFS positional table.
    pub max_tokens: usize,
    pub pe_variant: PeVariant,
    /// Shortest-path bias table (graph variant only).
    pub use_spatial: bool,
    /// Parent and child bias tables (graph variant only).
    pub use_parent_child: bool,
    pub use_self_model: bool,
    pub self_model_weight: f64,
    /// Disabled for the FK probe.
    pub use_action_loss: bool,
    /// Policy output bound in radians per step.
    pub max_delta: f64,
    pub layer_norm_eps: f64,
}

impl Default for GetConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_layers: 3,
            d_ff: 128,
            history: 2,
            max_distance: 16,
            max_tokens: 32,
            pe_variant: PeVariant::Graph,
            use_spatial: true,
            use_parent_child: true,
            use_self_model: true,
            self_model_weight: 1.0,
            use_action_loss: true,
            max_delta: 0.1,
            layer_norm_eps: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("d_model {0} is not divisible by n_heads {1}")]
    Heads(usize, usize),
    #[error("batch tokens have width {got}, model expects {want}")]
    TokenWidth { got: usize, want: usize },
    #[error("{0} joints exceed the positional table size {1}")]
    TooManyTokens(usize, usize),
    #[error("batch carries no labels")]
    Unlabelled,
    #[error("both loss terms are disabled")]
    NoLoss,
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

impl GetConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ModelError::Heads(self.d_model, self.n_heads));
        }
        if !self.use_action_loss && !self.use_self_model {
            return Err(ModelError::NoLoss);
        }
        Ok(())
    }

    fn graph_tables(&self) -> (bool, bool) {
        match self.pe_variant {
            PeVariant::Graph => (self.use_spatial, self.use_parent_child),
            _ => (false, false),
        }
    }
}

#[derive(Debug, Clone)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone)]
struct Norm {
    gain: usize,
    bias: usize,
}

#[derive(Debug, Clone)]
struct Layer {
    ln1: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    spatial: Option<usize>,
    parent: Option<usize>,
    child: Option<usize>,
    ln2: Norm,
    ff1: Linear,
    ff2: Linear,
}

/// Parameter ids of the self-model head.
#[derive(Debug, Clone, Copy)]
pub struct HeadIds {
    pub weight: usize,
    pub bias: usize,
}

/// Per-sample prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    /// Delta joint targets in radians.
    pub actions: Vec<f64>,
    /// Joint positions in the base frame, `J x 2` row-major.
    pub fk_pred: Vec<f64>,
}

/// Tape handles produced by [`GetModel::forward`].
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    /// `[B * J_max, 1]`.
    pub actions: Var,
    /// `[B * J_max, 2]`.
    pub fk: Var,
}

#[derive(Debug, Clone)]
pub struct GetModel {
    config: GetConfig,
    width: usize,
    params: ParamStore,
    embed: Linear,
    pos: Option<usize>,
    layers: Vec<Layer>,
    final_ln: Norm,
    policy: Linear,
    fk: Linear,
}

impl GetModel {
    pub fn new(config: GetConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let width = token_width(config.history);
        let mut rng = rng::stream(seed, streams::INIT);
        let mut p = ParamStore::new();
        let d = config.d_model;
        let mut linear = |p: &mut ParamStore, name: &str, i: usize, o: usize| Linear {
            w: p.add_glorot(format!("{name}.weight"), i, o, &mut rng),
            b: p.add(format!("{name}.bias"), Tensor::zeros(&[o])),
        };
        let norm = |p: &mut ParamStore, name: &str| Norm {
            gain: p.add(format!("{name}.gain"), Tensor::full(&[d], 1.0)),
            bias: p.add(format!("{name}.bias"), Tensor::zeros(&[d])),
        };
        let embed = linear(&mut p, "embed", width, d);
        let (use_s, use_pc) = config.graph_tables();
        let table = |p: &mut ParamStore, name: String| {
            p.add(name, Tensor::zeros(&[config.n_heads, config.max_distance + 1]))
        };
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let pre = format!("layers.{l}");
            layers.push(Layer {
                ln1: norm(&mut p, &format!("{pre}.ln1")),
                q: linear(&mut p, &format!("{pre}.attn.q"), d, d),
                k: linear(&mut p, &format!("{pre}.attn.k"), d, d),
                v: linear(&mut p, &format!("{pre}.attn.v"), d, d),
                o: linear(&mut p, &format!("{pre}.attn.o"), d, d),
                spatial: use_s.then(|| table(&mut p, format!("{pre}.bias.spatial"))),
                parent: use_pc.then(|| table(&mut p, format!("{pre}.bias.parent"))),
                child: use_pc.then(|| table(&mut p, format!("{pre}.bias.child"))),
                ln2: norm(&mut p, &format!("{pre}.ln2")),
                ff1: linear(&mut p, &format!("{pre}.ff1"), d, config.d_ff),
                ff2: linear(&mut p, &format!("{pre}.ff2"), config.d_ff, d),
            });
        }
        let final_ln = norm(&mut p, "final_ln");
        let policy = linear(&mut p, "policy", d, 1);
        let fk = linear(&mut p, "fk", d, 2);
        let pos = (config.pe_variant == PeVariant::Dfs).then(|| {
            use rand::Rng;
            let vals = (0..config.max_tokens * d).map(|_| rng.random_range(-0.1..0.1)).collect();
            p.add("pos.table", Tensor::new(&[config.max_tokens, d], vals))
        });
        Ok(Self { config, width, params: p, embed, pos, layers, final_ln, policy, fk })
    }

    /// Rebuilds a model around stored parameter values.
    pub fn from_params(config: GetConfig, params: &ParamStore) -> Result<Self, ModelError> {
        let mut m = Self::new(config, 0)?;
        let copied = m.params.load_values(params);
        if copied != m.params.len() || params.len() != m.params.len() {
            return Err(ModelError::Shape(ShapeError {
                op: "from_params",
                shapes: vec![vec![m.params.len()], vec![params.len(), copied]],
            }));
        }
        Ok(m)
    }

    pub fn config(&self) -> &GetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn self_model_head(&self) -> HeadIds {
        HeadIds { weight: self.fk.w, bias: self.fk.b }
    }

    /// Ids of every attention-bias table, in layer order.
    pub fn bias_tables(&self) -> Vec<usize> {
        self.layers.iter().flat_map(|l| [l.spatial, l.parent, l.child]).flatten().collect()
    }

    fn lin(&self, tape: &mut Tape, x: Var, l: &Linear) -> Result<Var, ShapeError> {
        let w = tape.param(&self.params, l.w);
        let b = tape.param(&self.params, l.b);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }

    fn norm(&self, tape: &mut Tape, x: Var, n: &Norm) -> Result<Var, ShapeError> {
        let g = tape.param(&self.params, n.gain);
        let b = tape.param(&self.params, n.bias);
        tape.layer_norm(x, g, b, self.config.layer_norm_eps)
    }

    /// Records the forward pass for `batch` on `tape`.
    pub fn forward(&self, tape: &mut Tape, batch: &TokenBatch) -> Result<ForwardVars, ModelError> {
        let cfg = &self.config;
        if batch.width != self.width {
            return Err(ModelError::TokenWidth { got: batch.width, want: self.width });
        }
        let (bsz, nj, nh) = (batch.batch, batch.max_joints, cfg.n_heads);
        let rows = bsz * nj;

        let x = tape.constant(Tensor::new(&[rows, self.width], batch.tokens.clone()));
        let mut h = self.lin(tape, x, &self.embed)?;
        if let Some(pos) = self.pos {
            if nj > cfg.max_tokens {
                return Err(ModelError::TooManyTokens(nj, cfg.max_tokens));
            }
            let table = tape.param(&self.params, pos);
            let pe = tape.gather(table, batch.dfs_positions.clone())?;
            h = tape.add(h, pe)?;
        }

        let valid: Box<[bool]> = batch.mask.clone().into_boxed_slice();
        let bias_index = |which: fn(&crate::graph::DistanceMaps, usize, usize) -> u32| -> Vec<usize> {
            let stride = cfg.max_distance + 1;
            let mut idx = Vec::with_capacity(bsz * nh * nj * nj);
            for b in 0..bsz {
                let m = &batch.distance_maps[b];
                for head in 0..nh {
                    for i in 0..nj {
                        for j in 0..nj {
                            let dist = (which(m, i, j) as usize).min(cfg.max_distance);
                            idx.push(head * stride + dist);
                        }
                    }
                }
            }
            idx
        };
        let (use_s, use_pc) = cfg.graph_tables();
        let spd_idx = use_s.then(|| bias_index(|m, i, j| m.spd(i, j)));
        let par_idx = use_pc.then(|| bias_index(|m, i, j| m.parent(i, j)));
        let chi_idx = use_pc.then(|| bias_index(|m, i, j| m.child(i, j)));

        for layer in &self.layers {
            let a = self.norm(tape, h, &layer.ln1)?;
            let q = self.lin(tape, a, &layer.q)?;
            let k = self.lin(tape, a, &layer.k)?;
            let v = self.lin(tape, a, &layer.v)?;
            let mut bias = None;
            for (table, idx) in [(layer.spatial, &spd_idx), (layer.parent, &par_idx), (layer.child, &chi_idx)] {
                if let (Some(t), Some(idx)) = (table, idx) {
                    let tv = tape.param(&self.params, t);
                    let flat = tape.reshape(tv, &[nh * (cfg.max_distance + 1), 1])?;
                    let g = tape.gather(flat, idx.clone())?;
                    bias = Some(match bias {
                        Some(acc) => tape.add(acc, g)?,
                        None => g,
                    });
                }
            }
            let bias = bias.map(|b| tape.reshape(b, &[bsz, nh, nj, nj])).transpose()?;
            let o = tape.attention(q, k, v, bias, valid.clone(), bsz, nh)?;
            let o = self.lin(tape, o, &layer.o)?;
            h = tape.add(h, o)?;

            let f = self.norm(tape, h, &layer.ln2)?;
            let f = self.lin(tape, f, &layer.ff1)?;
            let f = tape.gelu(f);
            let f = self.lin(tape, f, &layer.ff2)?;
            h = tape.add(h, f)?;
        }
        let hf = self.norm(tape, h, &self.final_ln)?;
        let a = self.lin(tape, hf, &self.policy)?;
        let a = tape.tanh(a);
        let actions = tape.scale(a, cfg.max_delta);
        let fk = self.lin(tape, hf, &self.fk)?;
        Ok(ForwardVars { actions, fk })
    }

    /// Behavior-cloning loss on a labelled batch: per-sample mean over real
    /// joints, then mean over samples. The FK term is the mean over both
    /// coordinates and is scaled by `self_model_weight`.
    pub fn loss(&self, tape: &mut Tape, out: &ForwardVars, batch: &TokenBatch) -> Result<Var, ModelError> {
        let cfg = &self.config;
        let (Some(actions), Some(fk)) = (&batch.actions, &batch.fk) else {
            return Err(ModelError::Unlabelled);
        };
        let nj = batch.max_joints;
        let weights: Vec<f64> = (0..batch.batch * nj)
            .map(|i| {
                let b = i / nj;
                if batch.mask[i] { 1.0 / (batch.batch * batch.joint_counts[b]) as f64 } else { 0.0 }
            })
            .collect();
        let mut total = None;
        if cfg.use_action_loss {
            total = Some(tape.weighted_squared_error(out.actions, actions.clone(), weights.clone())?);
        }
        if cfg.use_self_model {
            let w2 = weights.iter().flat_map(|w| [w * 0.5 * cfg.self_model_weight; 2]).collect();
            let l = tape.weighted_squared_error(out.fk, fk.clone(), w2)?;
            total = Some(match total {
                Some(t) => tape.add(t, l)?,
                None => l,
            });
        }
        total.ok_or(ModelError::NoLoss)
    }

    /// Loss and parameter gradients for one labelled batch.
    pub fn loss_and_grads(&self, batch: &TokenBatch) -> Result<(f64, Vec<Vec<f64>>), ModelError> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, batch)?;
        let loss = self.loss(&mut tape, &out, batch)?;
        let grads: Gradients = tape.backward(loss);
        Ok((tape.value(loss)[0], grads.params(&tape, &self.params)))
    }

    /// Loss value only.
    pub fn evaluate_loss(&self, batch: &TokenBatch) -> Result<f64, ModelError> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, batch)?;
        let loss = self.loss(&mut tape, &out, batch)?;
        Ok(tape.value(loss)[0])
    }

    /// Per-sample outputs, padding stripped.
    pub fn predict(&self, batch: &TokenBatch) -> Result<Vec<ModelOutput>, ModelError> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, batch)?;
        let (a, f) = (tape.value(out.actions), tape.value(out.fk));
        let nj = batch.max_joints;
        Ok((0..batch.batch)
            .map(|b| {
                let n = batch.joint_counts[b];
                ModelOutput {
                    actions: a[b * nj..b * nj + n].to_vec(),
                    fk_pred: f[b * nj * 2..(b * nj + n) * 2].to_vec(),
                }
            })
            .collect())
    }
}

/// Reference loss on unpadded outputs, matching [`GetModel::loss`].
pub fn bc_loss(outputs: &[ModelOutput], actions: &[Vec<f64>], fk: &[Vec<f64>], config: &GetConfig) -> f64 {
    let mut total = 0.0;
    for ((o, a), f) in outputs.iter().zip(actions).zip(fk) {
        let n = o.actions.len() as f64;
        if config.use_action_loss {
            total += o.actions.iter().zip(a).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n;
        }
        if config.use_self_model {
            let se: f64 = o.fk_pred.iter().zip(f).map(|(p, t)| (p - t) * (p - t)).sum();
            total += config.self_model_weight * se / (2.0 * n);
        }
    }
    total / outputs.len() as f64
}
