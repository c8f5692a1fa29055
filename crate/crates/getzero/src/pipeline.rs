//! One function per subcommand. Each reads its inputs, writes into a run
//! directory and returns a short human-readable report.

use std::path::Path;
use std::time::Instant;

use getzero_core::bench::{
    competence_error, demos_for_embodiment, is_competent, make_splits, Category, DemoConfig, DemoDataset, DemoReport,
    Expert, Splits, ZeroPolicy,
};
use getzero_core::graph::{enumerate_hand_variants, enumeration_report, FilterRules};
use getzero_core::tokenizer::PreparedEmbodiment;
use getzero_core::trainer::{ablation_grid, train, AblationEntry};
use getzero_core::{EmbodimentGraph, GetModel};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::evalsuite::{self, Cell, EvalPlan, RolloutSummary};
use crate::io::{self, ExcludedEmbodiment, JsonlWriter, SplitManifest};

/// Runs `f` on a pool with `threads` workers; 0 keeps rayon's default.
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

pub fn gen_embodiments(cfg: &RunConfig, out: &Path) -> Result<Vec<String>, CliError> {
    cfg.task.validate()?;
    io::prepare_run_dir(out, "gen-embodiments", cfg)?;
    let e = &cfg.embodiments;
    let err = |x: getzero_core::GraphError| CliError::Config(format!("catalog: {x}"));
    let all = enumerate_hand_variants(&e.catalog, &FilterRules::none()).map_err(err)?;
    let kept = enumerate_hand_variants(&e.catalog, &e.filter.rules()).map_err(err)?;
    let report = enumeration_report(&e.catalog).map_err(err)?;
    let (splits, rejected) = make_splits(&kept, &cfg.task, &cfg.demos.expert, &e.splits)?;
    io::write_embodiments(&out.join(io::EMBODIMENTS_FILE), &kept)?;
    io::write_json(&out.join("enumeration.json"), &report)?;
    let manifest = SplitManifest { pre_filter: all.len(), post_filter: kept.len(), rejected, splits };
    io::write_json(&out.join(io::SPLITS_FILE), &manifest)?;
    let flag = |m: bool| if m { "matched" } else { "unmatched" };
    let mut lines = vec![
        format!("pre-filter count: {}", report.pre_filter),
        format!("post-filter (exactly two joints): {} ({} vs {})", report.post_filter_exactly_two, flag(report.exactly_two_matches), report.target),
        format!("post-filter (at least two joints): {} ({} vs {})", report.post_filter_at_least_two, flag(report.at_least_two_matches), report.target),
        format!("assumptions: {}", report.assumptions.join("; ")),
        format!("selected filter {:?}: {} graphs, {} rejected by the expert probe", e.filter, kept.len(), manifest.rejected.len()),
    ];
    for c in Category::ALL {
        lines.push(format!("{}: {}", c.label(), manifest.splits.get(c).len()));
    }
    Ok(lines)
}

pub fn read_splits(path: &Path) -> Result<SplitManifest, CliError> {
    let m: SplitManifest = io::read_json(path)?;
    let names = m.splits.names();
    let mut sorted = names.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != names.len() {
        return Err(CliError::Format(format!("{}: splits share embodiment names", path.display())));
    }
    Ok(m)
}

/// Same result as the sequential generator in the core crate, with the
/// per-embodiment work spread over the pool.
pub fn generate_demos_parallel(
    graphs: &[EmbodimentGraph],
    task: &getzero_core::bench::TaskSpec,
    demo: &DemoConfig,
) -> Result<DemoReport, CliError> {
    task.validate()?;
    let verdicts: Vec<(PreparedEmbodiment, bool)> = graphs
        .par_iter()
        .map(|g| {
            let emb = PreparedEmbodiment::new(g.clone());
            let ok = is_competent(&emb, task, &demo.expert);
            (emb, ok)
        })
        .collect();
    let excluded: Vec<(String, f64)> = verdicts
        .iter()
        .filter(|(_, ok)| !ok)
        .map(|(e, _)| (e.graph.name().to_string(), competence_error(e, task, &demo.expert)))
        .collect();
    let kept: Vec<PreparedEmbodiment> = verdicts.into_iter().filter(|(_, ok)| *ok).map(|(e, _)| e).collect();
    if kept.is_empty() {
        return Err(getzero_core::bench::BenchError::NothingKept.into());
    }
    let per: Vec<_> = kept.par_iter().enumerate().map(|(i, e)| demos_for_embodiment(e, i, task, demo)).collect();
    let mut records = Vec::new();
    let mut expert_errors = Vec::new();
    for (r, e) in per {
        records.extend(r);
        expert_errors.push(e);
    }
    Ok(DemoReport {
        dataset: DemoDataset { history: demo.history, embodiments: kept.into_iter().map(|e| e.graph).collect(), records },
        excluded,
        expert_errors,
    })
}

#[derive(Serialize)]
struct DemoHashInput<'a> {
    task: &'a getzero_core::bench::TaskSpec,
    demos: &'a DemoConfig,
    embodiments: Vec<&'a str>,
}

pub fn gen_demos(cfg: &RunConfig, splits_path: &Path, out: &Path) -> Result<Vec<String>, CliError> {
    let m = read_splits(splits_path)?;
    io::prepare_run_dir(out, "gen-demos", cfg)?;
    let demo = cfg.demos.demo_config();
    let report = with_threads(cfg.demos.threads, || generate_demos_parallel(&m.splits.train, &cfg.task, &demo))??;
    let hash_input = DemoHashInput {
        task: &cfg.task,
        demos: &demo,
        embodiments: m.splits.train.iter().map(|g| g.name()).collect(),
    };
    let hash = io::sha256_hex(&io::to_json_bytes(&hash_input));
    let excluded = report.excluded.iter().map(|(n, e)| ExcludedEmbodiment { name: n.clone(), probe_error: *e }).collect();
    let manifest = io::write_dataset(out, &report.dataset, &report.expert_errors, excluded, hash)?;
    let mean = report.expert_errors.iter().sum::<f64>() / report.expert_errors.len().max(1) as f64;
    Ok(vec![
        format!("records: {} over {} embodiments", manifest.record_count, manifest.embodiments.len()),
        format!("excluded by the competence filter: {}", manifest.excluded.len()),
        format!("expert mean tracking error: {mean:.6}"),
    ])
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLogLine {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub val_loss: Option<f64>,
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub best_step: usize,
    pub best_val_loss: Option<f64>,
    pub parameters: usize,
}

pub fn train_cmd(cfg: &RunConfig, demos: &Path, out: &Path) -> Result<Vec<String>, CliError> {
    let (_, dataset) = io::read_dataset(demos)?;
    io::prepare_run_dir(out, "train", cfg)?;
    let log_path = out.join("train_log.jsonl");
    if log_path.exists() {
        std::fs::remove_file(&log_path).map_err(|e| CliError::io(&log_path, e))?;
    }
    let mut log = JsonlWriter::create(&log_path)?;
    let start = Instant::now();
    let mut log_err = None;
    let outcome = train(&dataset, &cfg.model, &cfg.train, |ev| {
        let line = TrainLogLine { step: ev.step, loss: ev.loss, lr: ev.lr, val_loss: ev.val_loss, wall_time: start.elapsed().as_secs_f64() };
        if let Err(e) = log.write(&line) {
            log_err.get_or_insert(e);
        }
    });
    log.flush()?;
    if let Some(e) = log_err {
        return Err(e);
    }
    let outcome = outcome?;
    let best = GetModel::from_params(outcome.model.config().clone(), &outcome.best).map_err(|e| CliError::Format(e.to_string()))?;
    io::write_checkpoint(out, io::CHECKPOINT_FINAL, &outcome.model)?;
    io::write_checkpoint(out, io::CHECKPOINT_BEST, &best)?;
    let summary = TrainSummary {
        steps: cfg.train.steps,
        best_step: outcome.best_step,
        best_val_loss: outcome.best_val_loss.is_finite().then_some(outcome.best_val_loss),
        parameters: best.params().num_scalars(),
    };
    io::write_json(&out.join("train_summary.json"), &summary)?;
    Ok(vec![
        format!("trained {} steps, {} parameters", summary.steps, summary.parameters),
        format!("best validation loss {:?} at step {}", summary.best_val_loss, summary.best_step),
    ])
}

/// What `eval` rolls out.
#[derive(Debug, Clone)]
pub enum EvalPolicy<'a> {
    Checkpoint(&'a Path),
    Expert,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryEval {
    pub category: String,
    pub mean_error: f64,
    pub drops: f64,
    pub embodiments: Vec<RolloutSummary>,
}

pub fn plan(cfg: &RunConfig) -> EvalPlan {
    EvalPlan { task: cfg.task.clone(), episodes: cfg.eval.episodes, seeds: cfg.eval.seeds, seed_base: cfg.eval.seed_base }
}

pub fn eval_cmd(cfg: &RunConfig, splits_path: &Path, policy: EvalPolicy<'_>, out: &Path) -> Result<Vec<String>, CliError> {
    let m = read_splits(splits_path)?;
    let model = match policy {
        EvalPolicy::Checkpoint(dir) => Some(io::read_checkpoint(dir, io::CHECKPOINT_BEST)?),
        _ => None,
    };
    io::prepare_run_dir(out, "eval", cfg)?;
    let plan = plan(cfg);
    let history = model.as_ref().map_or(cfg.demos.history, |m| m.config().history);
    let mut results = Vec::new();
    for c in Category::ALL {
        let graphs = m.splits.get(c);
        let rows = match (&policy, &model) {
            (EvalPolicy::Checkpoint(_), Some(model)) => evalsuite::rollout_model(model, cfg.train.dfs_order, graphs, &plan)?,
            (EvalPolicy::Expert, _) => {
                let Ok(r) = evalsuite::rollout(&mut Expert(cfg.demos.expert), history, graphs, &plan);
                r
            }
            _ => {
                let Ok(r) = evalsuite::rollout(&mut ZeroPolicy, history, graphs, &plan);
                r
            }
        };
        let (mean_error, drops) = evalsuite::aggregate(&rows);
        results.push(CategoryEval { category: c.key().into(), mean_error, drops, embodiments: rows });
    }
    io::write_json(&out.join("eval.json"), &results)?;
    Ok(results.iter().map(|r| format!("{}: mean error {:.6}, drops {:.2}", r.category, r.mean_error, r.drops)).collect())
}

fn select_rows(cfg: &RunConfig, names: &[String]) -> Result<Vec<AblationEntry>, CliError> {
    let grid = ablation_grid(&cfg.model);
    if names.is_empty() {
        return Ok(grid);
    }
    names
        .iter()
        .map(|n| {
            grid.iter()
                .find(|e| &e.name == n)
                .cloned()
                .ok_or_else(|| CliError::Config(format!("unknown grid row `{n}`")))
        })
        .collect()
}

fn write_table(out: &Path, stem: &str, title: &str, cells: &[Cell]) -> Result<evalsuite::ResultsJson, CliError> {
    let json = evalsuite::results_json(cells);
    io::write_bytes(&out.join(format!("{stem}.csv")), &evalsuite::cells_csv(cells))?;
    io::write_json(&out.join(format!("{stem}.json")), &json)?;
    let cats: Vec<String> = Category::ALL.iter().map(|c| c.key().to_string()).collect();
    io::write_bytes(&out.join(format!("{stem}.svg")), evalsuite::bar_chart_svg(title, &json.rows, &cats).as_bytes())?;
    Ok(json)
}

fn table_lines(json: &evalsuite::ResultsJson) -> Vec<String> {
    let mut lines = Vec::new();
    for r in &json.rows {
        let cells: Vec<String> = Category::ALL
            .iter()
            .map(|c| {
                let s = &r.categories[c.key()];
                match (s.mean, s.std) {
                    (Some(m), Some(d)) => format!("{}={m:.4}±{d:.4}{}", c.key(), if s.complete { "" } else { "*" }),
                    _ => format!("{}=incomplete", c.key()),
                }
            })
            .collect();
        lines.push(format!("{:12} {}", r.config, cells.join(" ")));
    }
    for o in &json.orderings {
        lines.push(format!("{}: {} < {} {}", o.category, o.better, o.worse, if o.holds { "holds" } else { "does not hold" }));
    }
    lines
}

fn load_inputs(splits: &Path, demos: &Path) -> Result<(Splits, DemoDataset), CliError> {
    let m = read_splits(splits)?;
    let (_, d) = io::read_dataset(demos)?;
    Ok((m.splits, d))
}

pub fn ablate_cmd(cfg: &RunConfig, splits: &Path, demos: &Path, out: &Path) -> Result<Vec<String>, CliError> {
    let (splits, dataset) = load_inputs(splits, demos)?;
    let rows = select_rows(cfg, &cfg.ablate.rows)?;
    io::prepare_run_dir(out, "ablate", cfg)?;
    let plan = plan(cfg);
    let cells = with_threads(cfg.ablate.threads, || {
        evalsuite::run_ablation_matrix(&rows, &dataset, &splits, &cfg.train, &plan, cfg.ablate.seeds)
    })?;
    let json = write_table(out, "results", "Mean tracking error (lower is better)", &cells)?;
    Ok(table_lines(&json))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub cells: Vec<evalsuite::ProbeCell>,
    pub means: Vec<ProbeMean>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeMean {
    pub config: String,
    pub train_error: Option<f64>,
    pub unseen_error: Option<f64>,
}

pub fn fk_probe_cmd(cfg: &RunConfig, splits: &Path, demos: &Path, out: &Path) -> Result<Vec<String>, CliError> {
    let (splits, dataset) = load_inputs(splits, demos)?;
    let rows = select_rows(cfg, &cfg.fk_probe.rows)?;
    io::prepare_run_dir(out, "fk-probe", cfg)?;
    let mut unseen = splits.new_graph.clone();
    unseen.extend(splits.new_graph_geo.iter().cloned());
    let probe_demo = DemoConfig { steps_per_embodiment: cfg.fk_probe.probe_steps, seed: cfg.fk_probe.probe_seed, ..cfg.demos.demo_config() };
    let cells = with_threads(cfg.fk_probe.threads, || -> Result<_, CliError> {
        let probe = generate_demos_parallel(&unseen, &cfg.task, &probe_demo)?.dataset;
        Ok(evalsuite::fk_probe(&rows, &dataset, &probe, &cfg.train, cfg.fk_probe.seeds))
    })??;
    let means: Vec<ProbeMean> = evalsuite::probe_means(&cells)
        .into_iter()
        .map(|(config, train_error, unseen_error)| ProbeMean { config, train_error, unseen_error })
        .collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["config", "seed", "train_error", "unseen_error"]).expect("in-memory write");
    for c in &cells {
        let f = |x: Option<f64>| x.map(|v| format!("{v:.6e}")).unwrap_or_default();
        w.write_record([c.config.clone(), c.seed.to_string(), f(c.train_error), f(c.unseen_error)]).expect("in-memory write");
    }
    io::write_bytes(&out.join("fk_probe.csv"), &w.into_inner().expect("in-memory flush"))?;
    let lines = means
        .iter()
        .map(|m| format!("{:12} train {:?} unseen {:?}", m.config, m.train_error, m.unseen_error))
        .collect();
    io::write_json(&out.join("fk_probe.json"), &ProbeReport { cells, means })?;
    Ok(lines)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DfsReport {
    pub config: String,
    pub cells: Vec<evalsuite::DfsCell>,
    pub canonical_mean: Option<f64>,
    pub reversed_mean: Option<f64>,
    /// Relative increase of tracking error under the reversed order.
    pub degradation: Option<f64>,
}

pub fn dfs_sensitivity_cmd(cfg: &RunConfig, splits: &Path, demos: &Path, out: &Path) -> Result<Vec<String>, CliError> {
    let (splits, dataset) = load_inputs(splits, demos)?;
    let row = select_rows(cfg, &["ET+DFS".to_string()])?.remove(0);
    io::prepare_run_dir(out, "dfs-sensitivity", cfg)?;
    let plan = plan(cfg);
    let cells = with_threads(cfg.ablate.threads, || {
        evalsuite::dfs_sensitivity(&row.config, &dataset, &splits.train, &cfg.train, &plan, cfg.ablate.seeds)
    })?;
    let mean = |f: fn(&evalsuite::DfsCell) -> Option<f64>| {
        let v: Vec<f64> = cells.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| evalsuite::mean_std(&v).0)
    };
    let c = mean(|x| x.canonical);
    let r = mean(|x| x.reversed);
    let degradation = c.zip(r).map(|(c, r)| r / c - 1.0);
    let report = DfsReport { config: row.name, cells, canonical_mean: c, reversed_mean: r, degradation };
    io::write_json(&out.join("dfs_sensitivity.json"), &report)?;
    Ok(vec![format!("canonical {c:?} reversed {r:?} degradation {degradation:?}")])
}

pub fn size_sweep_cmd(cfg: &RunConfig, splits: &Path, demos: &Path, out: &Path) -> Result<Vec<String>, CliError> {
    let (splits, dataset) = load_inputs(splits, demos)?;
    let full = select_rows(cfg, &["ET+PE+SE+SL".to_string()])?.remove(0);
    io::prepare_run_dir(out, "size-sweep", cfg)?;
    let plan = plan(cfg);
    let s = &cfg.size_sweep;
    let cells = with_threads(s.threads, || {
        evalsuite::size_sweep(&full.config, &dataset, &splits, &cfg.train, &plan, &s.sizes, s.seeds)
    })?;
    let json = write_table(out, "size_sweep", "Tracking error versus training-set size", &cells)?;
    Ok(table_lines(&json))
}
