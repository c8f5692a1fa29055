//! Behavior-cloning distillation.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bench::{DemoDataset, Policy, StepObs};
use crate::graph::DfsOrder;
use crate::math;
use crate::model::{GetConfig, GetModel, ModelError, PeVariant};
use crate::numerics::rng::{self, streams};
use crate::numerics::{AdamConfig, NumericsError, ParamStore};
use crate::tokenizer::{collate, Labels, PreparedEmbodiment, Sample, TokenError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub steps: usize,
    pub batch_size: usize,
    /// Peak learning rate; decays to zero along a half cosine.
    pub lr: f64,
    pub eval_every: usize,
    /// Every n-th record is held out for validation.
    pub val_stride: usize,
    /// Upper bound on validation records scored per evaluation.
    pub val_records: usize,
    pub seed: u64,
    pub dfs_order: DfsOrder,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            steps: 50_000,
            batch_size: 64,
            lr: 3e-4,
            eval_every: 500,
            val_stride: 20,
            val_records: 512,
            seed: 0,
            dfs_order: DfsOrder::Canonical,
        }
    }
}

impl Schedule {
    pub fn lr_at(&self, step: usize) -> f64 {
        let t = step as f64 / self.steps.max(1) as f64;
        self.lr * 0.5 * (1.0 + math::cos(math::PI * t))
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("dataset has no records")]
    EmptyDataset,
    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: usize, loss: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Token(#[from] TokenError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Emitted after every optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainEvent {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: GetModel,
    /// Parameters at the lowest validation loss.
    pub best: ParamStore,
    pub best_val_loss: f64,
    pub best_step: usize,
}

struct Prepared<'a> {
    dataset: &'a DemoDataset,
    embodiments: Vec<PreparedEmbodiment>,
}

impl Prepared<'_> {
    fn samples(&self, idx: &[usize]) -> Vec<Sample<'_>> {
        idx.iter()
            .map(|&i| {
                let r = &self.dataset.records[i];
                Sample {
                    embodiment: &self.embodiments[r.embodiment],
                    history: &r.history,
                    labels: Some(Labels { actions: r.actions.clone(), fk: r.fk.clone() }),
                }
            })
            .collect()
    }
}

/// Splits record indices into training and validation sets.
pub fn split_records(n: usize, val_stride: usize) -> (Vec<usize>, Vec<usize>) {
    if val_stride < 2 || n < val_stride {
        return ((0..n).collect(), Vec::new());
    }
    (0..n).partition(|i| i % val_stride != val_stride - 1)
}

/// Mean loss over `idx`, weighting every batch by its size.
pub fn dataset_loss(
    model: &GetModel,
    dataset: &DemoDataset,
    idx: &[usize],
    batch_size: usize,
    order: DfsOrder,
) -> Result<f64, TrainError> {
    let p = Prepared { dataset, embodiments: dataset.embodiments.iter().cloned().map(PreparedEmbodiment::new).collect() };
    let mut total = 0.0;
    for chunk in idx.chunks(batch_size.max(1)) {
        let b = collate(&p.samples(chunk), dataset.history, order)?;
        total += model.evaluate_loss(&b)? * chunk.len() as f64;
    }
    Ok(total / idx.len().max(1) as f64)
}

/// Trains a fresh model. Batches are drawn uniformly over training records
/// with replacement. `on_event` sees every step.
pub fn train(
    dataset: &DemoDataset,
    config: &GetConfig,
    schedule: &Schedule,
    mut on_event: impl FnMut(&TrainEvent),
) -> Result<TrainOutcome, TrainError> {
    if dataset.records.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let cfg = GetConfig { history: dataset.history, ..config.clone() };
    let mut model = GetModel::new(cfg, schedule.seed)?;
    let prep = Prepared { dataset, embodiments: dataset.embodiments.iter().cloned().map(PreparedEmbodiment::new).collect() };
    let (train_idx, val_all) = split_records(dataset.records.len(), schedule.val_stride);
    let val_step = val_all.len().div_ceil(schedule.val_records.max(1)).max(1);
    let val_idx: Vec<usize> = val_all.into_iter().step_by(val_step).collect();
    let val_batches: Vec<_> = val_idx
        .chunks(schedule.batch_size.max(1))
        .map(|c| collate(&prep.samples(c), dataset.history, schedule.dfs_order).map(|b| (b, c.len())))
        .collect::<Result<_, _>>()?;
    let mut rng = rng::stream(schedule.seed, streams::BATCHES);
    let mut best = model.params().clone();
    let mut best_val = f64::INFINITY;
    let mut best_step = 0;
    let mut picks = Vec::with_capacity(schedule.batch_size);

    for step in 1..=schedule.steps {
        picks.clear();
        picks.extend((0..schedule.batch_size).map(|_| train_idx[rng.random_range(0..train_idx.len())]));
        let batch = collate(&prep.samples(&picks), dataset.history, schedule.dfs_order)?;
        let (loss, grads) = model.loss_and_grads(&batch)?;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { step, loss });
        }
        let lr = schedule.lr_at(step - 1);
        model.params_mut().adam_step(&grads, &AdamConfig { lr, ..AdamConfig::default() })?;

        let mut val_loss = None;
        let eval_now = schedule.eval_every > 0 && (step % schedule.eval_every == 0 || step == schedule.steps);
        if eval_now && !val_batches.is_empty() {
            let mut total = 0.0;
            for (b, n) in &val_batches {
                total += model.evaluate_loss(b)? * *n as f64;
            }
            let v = total / val_idx.len() as f64;
            if !v.is_finite() {
                return Err(TrainError::NonFiniteLoss { step, loss: v });
            }
            if v < best_val {
                best_val = v;
                best_step = step;
                best = model.params().clone();
            }
            val_loss = Some(v);
        }
        on_event(&TrainEvent { step, loss, lr, val_loss });
    }
    if val_batches.is_empty() {
        best = model.params().clone();
        best_step = schedule.steps;
    }
    Ok(TrainOutcome { model, best, best_val_loss: best_val, best_step })
}

/// Mean Euclidean error of the self-model head over every real joint of
/// every record.
pub fn fk_probe_error(model: &GetModel, dataset: &DemoDataset, batch_size: usize, order: DfsOrder) -> Result<f64, TrainError> {
    if dataset.records.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let embodiments: Vec<PreparedEmbodiment> = dataset.embodiments.iter().cloned().map(PreparedEmbodiment::new).collect();
    let mut total = 0.0;
    let mut joints = 0usize;
    for chunk in dataset.records.chunks(batch_size.max(1)) {
        let samples: Vec<Sample> = chunk
            .iter()
            .map(|r| Sample { embodiment: &embodiments[r.embodiment], history: &r.history, labels: None })
            .collect();
        let batch = collate(&samples, model.config().history, order)?;
        for (out, r) in model.predict(&batch)?.iter().zip(chunk) {
            for (p, t) in out.fk_pred.chunks_exact(2).zip(r.fk.chunks_exact(2)) {
                total += math::hypot(p[0] - t[0], p[1] - t[1]);
                joints += 1;
            }
        }
    }
    Ok(total / joints as f64)
}

/// Closed-loop policy backed by a trained model.
#[derive(Debug, Clone, Copy)]
pub struct ModelPolicy<'m> {
    pub model: &'m GetModel,
    pub order: DfsOrder,
}

impl Policy for ModelPolicy<'_> {
    type Error = TrainError;
    fn act(&mut self, obs: &[StepObs<'_>]) -> Result<Vec<Vec<f64>>, TrainError> {
        let samples: Vec<Sample> = obs
            .iter()
            .map(|o| Sample { embodiment: o.embodiment, history: o.history, labels: None })
            .collect();
        let batch = collate(&samples, self.model.config().history, self.order)?;
        Ok(self.model.predict(&batch)?.into_iter().map(|o| o.actions).collect())
    }
}

/// One row of the ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub name: String,
    pub config: GetConfig,
}

/// The seven ablation rows built on top of `base`. Only the positional
/// variant, the two bias-table toggles and the self-model flag change.
pub fn ablation_grid(base: &GetConfig) -> Vec<AblationEntry> {
    let rows: [(&str, PeVariant, bool, bool, bool); 7] = [
        ("ET", PeVariant::None, false, false, false),
        ("ET+DFS", PeVariant::Dfs, false, false, false),
        ("ET+SL", PeVariant::None, false, false, true),
        ("ET+PE+SE", PeVariant::Graph, true, true, false),
        ("ET+PE+SL", PeVariant::Graph, false, true, true),
        ("ET+SE+SL", PeVariant::Graph, true, false, true),
        ("ET+PE+SE+SL", PeVariant::Graph, true, true, true),
    ];
    rows.iter()
        .map(|&(name, pe, spatial, pc, sm)| AblationEntry {
            name: name.into(),
            config: GetConfig {
                pe_variant: pe,
                use_spatial: spatial,
                use_parent_child: pc,
                use_self_model: sm,
                ..base.clone()
            },
        })
        .collect()
}

pub fn make_ablation_grid() -> Vec<AblationEntry> {
    ablation_grid(&GetConfig::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::{generate_demos, DemoConfig, TaskSpec};
    use crate::graph::{EmbodimentGraph, JointSpec};

    fn finger(n: usize, name: &str) -> EmbodimentGraph {
        let joints = (0..n)
            .map(|k| JointSpec::new(if k == 0 { [0.0, 0.0] } else { [0.25, 0.0] }, 0.25, -0.6, 1.6))
            .collect();
        EmbodimentGraph::new(name, joints, (1..n).map(|i| (i - 1, i)).collect(), alloc::vec![]).unwrap()
    }

    fn tiny() -> GetConfig {
        GetConfig { d_model: 16, n_heads: 2, n_layers: 1, d_ff: 32, ..Default::default() }
    }

    fn dataset(steps: usize) -> DemoDataset {
        let cfg = DemoConfig { steps_per_embodiment: steps, ..Default::default() };
        generate_demos(&[finger(3, "f3"), finger(2, "f2")], &TaskSpec::default(), &cfg).unwrap().dataset
    }

    #[test]
    fn grid_rows() {
        let g = make_ablation_grid();
        assert_eq!(g.len(), 7);
        let full = &g[6].config;
        assert!(full.pe_variant == PeVariant::Graph && full.use_spatial && full.use_parent_child && full.use_self_model);
        let et = &g[0].config;
        assert_eq!(et.pe_variant, PeVariant::None);
        assert!(!et.use_self_model);
        for e in &g {
            let reset = GetConfig {
                pe_variant: PeVariant::Graph,
                use_spatial: true,
                use_parent_child: true,
                use_self_model: true,
                ..e.config.clone()
            };
            assert_eq!(reset, GetConfig::default());
        }
    }

    #[test]
    fn cosine_schedule() {
        let s = Schedule { steps: 100, lr: 1.0, ..Default::default() };
        assert_eq!(s.lr_at(0), 1.0);
        assert!((s.lr_at(50) - 0.5).abs() < 1e-12);
        assert!(s.lr_at(100).abs() < 1e-12);
    }

    #[test]
    fn same_seed_same_parameters() {
        let d = dataset(40);
        let s = Schedule { steps: 20, batch_size: 8, eval_every: 10, ..Default::default() };
        let a = train(&d, &tiny(), &s, |_| {}).unwrap();
        let b = train(&d, &tiny(), &s, |_| {}).unwrap();
        assert_eq!(a.model.params().iter().collect::<Vec<_>>(), b.model.params().iter().collect::<Vec<_>>());
        let c = train(&d, &tiny(), &Schedule { seed: 1, ..s }, |_| {}).unwrap();
        assert_ne!(a.model.params().tensor(0), c.model.params().tensor(0));
    }

    #[test]
    fn validation_loss_drops() {
        let d = dataset(200);
        let s = Schedule { steps: 400, batch_size: 16, lr: 3e-3, eval_every: 20, ..Default::default() };
        let mut vals = Vec::new();
        train(&d, &tiny(), &s, |e| vals.extend(e.val_loss)).unwrap();
        let k = vals.len() / 10;
        let median = |v: &[f64]| {
            let mut v = v.to_vec();
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        };
        assert!(median(&vals[vals.len() - k..]) < median(&vals[..k]));
    }

    #[test]
    fn self_model_head_stays_untouched_without_self_model() {
        let d = dataset(64);
        let cfg = GetConfig { use_self_model: false, ..tiny() };
        let init = GetModel::new(GetConfig { history: d.history, ..cfg.clone() }, 0).unwrap();
        let s = Schedule { steps: 12, batch_size: 8, ..Default::default() };
        let out = train(&d, &cfg, &s, |_| {}).unwrap();
        let head = out.model.self_model_head();
        assert_eq!(out.model.params().tensor(head.weight), init.params().tensor(head.weight));
        assert_eq!(out.model.params().tensor(head.bias), init.params().tensor(head.bias));
    }

    #[test]
    fn split_is_disjoint_and_complete() {
        let (t, v) = split_records(101, 20);
        assert_eq!(v, alloc::vec![19, 39, 59, 79, 99]);
        assert_eq!(t.len() + v.len(), 101);
        assert!(t.iter().all(|i| !v.contains(i)));
    }
}
