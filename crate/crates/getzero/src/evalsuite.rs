//! Closed-loop evaluation, the FK probe, the ablation matrix and the
//! reports built from them.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use getzero_core::bench::{
    episode_starts, run_episodes, Category, DemoDataset, EpisodeSpec, Policy, Splits, TaskSpec,
};
use getzero_core::graph::DfsOrder;
use getzero_core::tokenizer::PreparedEmbodiment;
use getzero_core::trainer::{fk_probe_error, train, AblationEntry, ModelPolicy, Schedule, TrainError};
use getzero_core::{EmbodimentGraph, GetConfig, GetModel};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// How closed-loop evaluation is budgeted.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPlan {
    pub task: TaskSpec,
    pub episodes: usize,
    pub seeds: usize,
    pub seed_base: u64,
}

/// One embodiment under one evaluation seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutSummary {
    pub embodiment: String,
    pub seed: usize,
    /// Mean over episodes of the per-episode mean tracking error.
    pub mean_error: f64,
    /// Mean over episodes of the count of steps with error above the radius.
    pub drops: f64,
    pub failed_episodes: usize,
}

/// Rolls `policy` on every graph for every evaluation seed. Episodes of one
/// (graph, seed) pair run in lockstep.
pub fn rollout<P: Policy>(
    policy: &mut P,
    history: usize,
    graphs: &[EmbodimentGraph],
    plan: &EvalPlan,
) -> Result<Vec<RolloutSummary>, P::Error> {
    let mut out = Vec::with_capacity(graphs.len() * plan.seeds);
    for g in graphs {
        let emb = PreparedEmbodiment::new(g.clone());
        for s in 0..plan.seeds {
            let specs: Vec<EpisodeSpec> = episode_starts(g, plan.seed_base + s as u64, plan.episodes)
                .into_iter()
                .map(|q| EpisodeSpec { embodiment: &emb, initial_angles: q })
                .collect();
            let res = run_episodes(&plan.task, history, &specs, policy, |_, _, _, _| {})?;
            let n = res.len().max(1) as f64;
            out.push(RolloutSummary {
                embodiment: g.name().to_string(),
                seed: s,
                mean_error: res.iter().map(|r| r.mean_error).sum::<f64>() / n,
                drops: res.iter().map(|r| r.drops as f64).sum::<f64>() / n,
                failed_episodes: res.iter().filter(|r| r.failed).count(),
            });
        }
    }
    Ok(out)
}

/// [`rollout`] for a trained model, one worker per embodiment.
pub fn rollout_model(
    model: &GetModel,
    order: DfsOrder,
    graphs: &[EmbodimentGraph],
    plan: &EvalPlan,
) -> Result<Vec<RolloutSummary>, TrainError> {
    let per_graph: Vec<_> = graphs
        .par_iter()
        .map(|g| rollout(&mut ModelPolicy { model, order }, model.config().history, std::slice::from_ref(g), plan))
        .collect::<Result<_, _>>()?;
    Ok(per_graph.into_iter().flatten().collect())
}

/// Mean tracking error and drop count over a set of rollout summaries.
pub fn aggregate(rows: &[RolloutSummary]) -> (f64, f64) {
    let n = rows.len().max(1) as f64;
    (rows.iter().map(|r| r.mean_error).sum::<f64>() / n, rows.iter().map(|r| r.drops).sum::<f64>() / n)
}

/// One (config, category, training seed) cell of a results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub config: String,
    pub row: usize,
    pub category: String,
    pub seed: usize,
    /// Mean tracking error; `None` when the run failed.
    pub metric: Option<f64>,
    pub drops: Option<f64>,
    pub error: Option<String>,
}

/// Trains `config` with `seed` and evaluates the best checkpoint on every
/// split category.
pub fn train_and_evaluate(
    dataset: &DemoDataset,
    config: &GetConfig,
    schedule: &Schedule,
    seed: usize,
    splits: &Splits,
    plan: &EvalPlan,
) -> Result<Vec<(Category, f64, f64)>, TrainError> {
    let s = Schedule { seed: seed as u64, ..schedule.clone() };
    let out = train(dataset, config, &s, |_| {})?;
    let model = GetModel::from_params(out.model.config().clone(), &out.best)?;
    Category::ALL
        .iter()
        .map(|&c| {
            let (m, d) = aggregate(&rollout_model(&model, s.dfs_order, splits.get(c), plan)?);
            Ok((c, m, d))
        })
        .collect()
}

/// Every grid row times every training seed, as independent parallel jobs.
/// A failing job marks its cells incomplete and the rest carry on.
pub fn run_ablation_matrix(
    grid: &[AblationEntry],
    dataset: &DemoDataset,
    splits: &Splits,
    schedule: &Schedule,
    plan: &EvalPlan,
    seeds: usize,
) -> Vec<Cell> {
    let jobs: Vec<(usize, usize)> = (0..grid.len()).flat_map(|r| (0..seeds).map(move |s| (r, s))).collect();
    let results: Vec<_> = jobs
        .par_iter()
        .map(|&(r, s)| (r, s, train_and_evaluate(dataset, &grid[r].config, schedule, s, splits, plan)))
        .collect();
    let mut cells = Vec::new();
    for (r, s, res) in results {
        for c in Category::ALL {
            let (metric, drops, error) = match &res {
                Ok(v) => {
                    let &(_, m, d) = v.iter().find(|x| x.0 == c).expect("every category evaluated");
                    (Some(m), Some(d), None)
                }
                Err(e) => (None, None, Some(e.to_string())),
            };
            cells.push(Cell { config: grid[r].name.clone(), row: r, category: c.key().into(), seed: s, metric, drops, error });
        }
    }
    cells
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub seeds: Vec<Option<f64>>,
    /// False when any seed failed.
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowSummary {
    pub config: String,
    pub row: usize,
    /// Keyed by category key.
    pub categories: BTreeMap<String, CellSummary>,
}

/// Collapses training seeds into mean ± std per (row, category).
pub fn summarize(cells: &[Cell]) -> Vec<RowSummary> {
    let mut rows: BTreeMap<usize, RowSummary> = BTreeMap::new();
    for c in cells {
        let row = rows.entry(c.row).or_insert_with(|| RowSummary { config: c.config.clone(), row: c.row, categories: BTreeMap::new() });
        let cell = row.categories.entry(c.category.clone()).or_insert_with(|| CellSummary { mean: None, std: None, seeds: Vec::new(), complete: true });
        cell.seeds.push(c.metric);
        cell.complete &= c.metric.is_some();
    }
    for row in rows.values_mut() {
        for cell in row.categories.values_mut() {
            let ok: Vec<f64> = cell.seeds.iter().flatten().copied().collect();
            if !ok.is_empty() {
                let (m, s) = mean_std(&ok);
                cell.mean = Some(m);
                cell.std = Some(s);
            }
        }
    }
    rows.into_values().collect()
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6e}")).unwrap_or_default()
}

/// `config,row,category,seed,metric`; failed runs leave the metric empty.
pub fn cells_csv(cells: &[Cell]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["config", "row", "category", "seed", "metric"]).expect("in-memory write");
    for c in cells {
        w.write_record([c.config.clone(), c.row.to_string(), c.category.clone(), c.seed.to_string(), fmt_opt(c.metric)])
            .expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

/// One directional comparison between two table means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingCheck {
    pub category: String,
    pub better: String,
    pub worse: String,
    pub better_mean: Option<f64>,
    pub worse_mean: Option<f64>,
    pub holds: bool,
}

fn lookup(rows: &[RowSummary], config: &str, category: Category) -> Option<f64> {
    rows.iter().find(|r| r.config == config)?.categories.get(category.key())?.mean
}

/// Expected zero-shot directions: the full model beats both baselines on
/// new graphs, and on new geometry DFS beats no encoding.
pub fn ordering_checks(rows: &[RowSummary]) -> Vec<OrderingCheck> {
    use Category::*;
    let pairs = [
        (NewGraph, "ET+PE+SE+SL", "ET"),
        (NewGraph, "ET+PE+SE+SL", "ET+DFS"),
        (NewGraphGeo, "ET+PE+SE+SL", "ET"),
        (NewGraphGeo, "ET+PE+SE+SL", "ET+DFS"),
        (NewGeo, "ET+DFS", "ET"),
        (NewGeo, "ET+PE+SE+SL", "ET"),
        (NewGeo, "ET+PE+SE+SL", "ET+DFS"),
    ];
    pairs
        .iter()
        .filter_map(|&(c, better, worse)| {
            let b = lookup(rows, better, c);
            let w = lookup(rows, worse, c);
            if b.is_none() && w.is_none() {
                return None;
            }
            Some(OrderingCheck {
                category: c.key().into(),
                better: better.into(),
                worse: worse.into(),
                better_mean: b,
                worse_mean: w,
                holds: matches!((b, w), (Some(b), Some(w)) if b < w),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsJson {
    pub metric: String,
    pub rows: Vec<RowSummary>,
    pub orderings: Vec<OrderingCheck>,
}

pub fn results_json(cells: &[Cell]) -> ResultsJson {
    let rows = summarize(cells);
    ResultsJson { metric: "mean_tracking_error".into(), orderings: ordering_checks(&rows), rows }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Grouped bar chart: one group per category, one bar per row, whiskers at
/// one standard deviation.
pub fn bar_chart_svg(title: &str, rows: &[RowSummary], categories: &[String]) -> String {
    const PALETTE: [&str; 8] = ["#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#9c755f"];
    let (w, h, left, bottom, top) = (900.0, 420.0, 60.0, 60.0, 40.0);
    let plot_h = h - bottom - top;
    let ymax = rows
        .iter()
        .flat_map(|r| r.categories.values())
        .filter_map(|c| Some(c.mean? + c.std.unwrap_or(0.0)))
        .fold(0.0_f64, f64::max)
        .max(1e-12)
        * 1.1;
    let group_w = (w - left - 20.0) / categories.len().max(1) as f64;
    let bar_w = group_w * 0.8 / rows.len().max(1) as f64;
    let y = |v: f64| top + plot_h * (1.0 - v / ymax);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, xml_escape(title));
    let _ = writeln!(s, r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{}" stroke="black"/>"#, h - bottom);
    let _ = writeln!(s, r#"<line x1="{left}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/>"#, h - bottom, w - 20.0);
    for k in 0..=4 {
        let v = ymax * k as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.3}</text>"#, left - 4.0, y(v) + 4.0);
    }
    for (ci, cat) in categories.iter().enumerate() {
        let gx = left + group_w * ci as f64 + group_w * 0.1;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#, gx + group_w * 0.4, h - bottom + 16.0, xml_escape(cat));
        for (ri, row) in rows.iter().enumerate() {
            let Some(cell) = row.categories.get(cat) else { continue };
            let Some(mean) = cell.mean else { continue };
            let x = gx + bar_w * ri as f64;
            let color = PALETTE[ri % PALETTE.len()];
            let _ = writeln!(
                s,
                r#"<rect x="{x:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{color}"/>"#,
                y(mean),
                bar_w * 0.9,
                (h - bottom) - y(mean)
            );
            if let Some(sd) = cell.std {
                let cx = x + bar_w * 0.45;
                let _ = writeln!(s, r#"<line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="black"/>"#, y(mean + sd), y((mean - sd).max(0.0)));
            }
        }
    }
    for (ri, row) in rows.iter().enumerate() {
        let ly = h - 22.0 + 0.0 * ri as f64;
        let lx = left + 110.0 * ri as f64;
        let _ = writeln!(s, r#"<rect x="{lx:.1}" y="{ly}" width="10" height="10" fill="{}"/>"#, PALETTE[ri % PALETTE.len()]);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}">{}</text>"#, lx + 14.0, ly + 9.0, xml_escape(&row.config));
    }
    s.push_str("</svg>\n");
    s
}

/// One probe run: self-model error on training and on held-out graphs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeCell {
    pub config: String,
    pub seed: usize,
    pub train_error: Option<f64>,
    pub unseen_error: Option<f64>,
    pub error: Option<String>,
}

/// The probe variant of a grid row: self-model on, action loss off.
pub fn probe_config(config: &GetConfig) -> GetConfig {
    GetConfig { use_self_model: true, use_action_loss: false, ..config.clone() }
}

/// Trains each row with only the FK head and scores it against the oracle
/// targets of `probe` (records from held-out graphs).
pub fn fk_probe(
    rows: &[AblationEntry],
    dataset: &DemoDataset,
    probe: &DemoDataset,
    schedule: &Schedule,
    seeds: usize,
) -> Vec<ProbeCell> {
    let jobs: Vec<(usize, usize)> = (0..rows.len()).flat_map(|r| (0..seeds).map(move |s| (r, s))).collect();
    jobs.par_iter()
        .map(|&(r, s)| {
            let run = || -> Result<(f64, f64), TrainError> {
                let sched = Schedule { seed: s as u64, ..schedule.clone() };
                let out = train(dataset, &probe_config(&rows[r].config), &sched, |_| {})?;
                let model = GetModel::from_params(out.model.config().clone(), &out.best)?;
                Ok((
                    fk_probe_error(&model, dataset, 256, sched.dfs_order)?,
                    fk_probe_error(&model, probe, 256, sched.dfs_order)?,
                ))
            };
            match run() {
                Ok((t, u)) => ProbeCell { config: rows[r].name.clone(), seed: s, train_error: Some(t), unseen_error: Some(u), error: None },
                Err(e) => ProbeCell { config: rows[r].name.clone(), seed: s, train_error: None, unseen_error: None, error: Some(e.to_string()) },
            }
        })
        .collect()
}

/// Per-config probe means over seeds, in first-seen order.
pub fn probe_means(cells: &[ProbeCell]) -> Vec<(String, Option<f64>, Option<f64>)> {
    let mut names: Vec<String> = Vec::new();
    for c in cells {
        if !names.contains(&c.config) {
            names.push(c.config.clone());
        }
    }
    names
        .into_iter()
        .map(|n| {
            let pick = |f: fn(&ProbeCell) -> Option<f64>| {
                let v: Vec<f64> = cells.iter().filter(|c| c.config == n).filter_map(f).collect();
                (!v.is_empty()).then(|| mean_std(&v).0)
            };
            let t = pick(|c| c.train_error);
            let u = pick(|c| c.unseen_error);
            (n, t, u)
        })
        .collect()
}

/// Canonical versus reversed DFS order for one trained model and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DfsCell {
    pub seed: usize,
    pub canonical: Option<f64>,
    pub reversed: Option<f64>,
    pub error: Option<String>,
}

/// Trains `config` per seed and evaluates it on `graphs` under both DFS
/// orders. The model is always trained on the canonical order.
pub fn dfs_sensitivity(
    config: &GetConfig,
    dataset: &DemoDataset,
    graphs: &[EmbodimentGraph],
    schedule: &Schedule,
    plan: &EvalPlan,
    seeds: usize,
) -> Vec<DfsCell> {
    (0..seeds)
        .into_par_iter()
        .map(|s| {
            let run = || -> Result<(f64, f64), TrainError> {
                let sched = Schedule { seed: s as u64, dfs_order: DfsOrder::Canonical, ..schedule.clone() };
                let out = train(dataset, config, &sched, |_| {})?;
                let model = GetModel::from_params(out.model.config().clone(), &out.best)?;
                let c = aggregate(&rollout_model(&model, DfsOrder::Canonical, graphs, plan)?).0;
                let r = aggregate(&rollout_model(&model, DfsOrder::Reversed, graphs, plan)?).0;
                Ok((c, r))
            };
            match run() {
                Ok((c, r)) => DfsCell { seed: s, canonical: Some(c), reversed: Some(r), error: None },
                Err(e) => DfsCell { seed: s, canonical: None, reversed: None, error: Some(e.to_string()) },
            }
        })
        .collect()
}

/// Keeps the first `k` embodiments of a dataset and their records.
pub fn subset_dataset(dataset: &DemoDataset, k: usize) -> DemoDataset {
    let k = k.min(dataset.embodiments.len());
    DemoDataset {
        history: dataset.history,
        embodiments: dataset.embodiments[..k].to_vec(),
        records: dataset.records.iter().filter(|r| r.embodiment < k).cloned().collect(),
    }
}

/// The full model retrained on growing prefixes of the training set. Cells
/// are labelled `n=<size>`.
pub fn size_sweep(
    config: &GetConfig,
    dataset: &DemoDataset,
    splits: &Splits,
    schedule: &Schedule,
    plan: &EvalPlan,
    sizes: &[usize],
    seeds: usize,
) -> Vec<Cell> {
    let resolved: Vec<usize> = sizes
        .iter()
        .map(|&k| if k == 0 { dataset.embodiments.len() } else { k.min(dataset.embodiments.len()) })
        .collect();
    let grid: Vec<AblationEntry> = resolved.iter().map(|k| AblationEntry { name: format!("n={k}"), config: config.clone() }).collect();
    let subsets: Vec<DemoDataset> = resolved.iter().map(|&k| subset_dataset(dataset, k)).collect();
    let jobs: Vec<(usize, usize)> = (0..grid.len()).flat_map(|r| (0..seeds).map(move |s| (r, s))).collect();
    let results: Vec<_> = jobs
        .par_iter()
        .map(|&(r, s)| (r, s, train_and_evaluate(&subsets[r], config, schedule, s, splits, plan)))
        .collect();
    let mut cells = Vec::new();
    for (r, s, res) in results {
        for c in Category::ALL {
            let (metric, drops, error) = match &res {
                Ok(v) => {
                    let &(_, m, d) = v.iter().find(|x| x.0 == c).expect("every category evaluated");
                    (Some(m), Some(d), None)
                }
                Err(e) => (None, None, Some(e.to_string())),
            };
            cells.push(Cell { config: grid[r].name.clone(), row: r, category: c.key().into(), seed: s, metric, drops, error });
        }
    }
    cells
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(config: &str, row: usize, cat: Category, seed: usize, m: Option<f64>) -> Cell {
        Cell { config: config.into(), row, category: cat.key().into(), seed, metric: m, drops: m, error: None }
    }

    #[test]
    fn mean_std_matches_hand_values() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(m, 3.0);
        // sample variance of 1..5 is 2.5
        assert!((s - 2.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[7.0]), (7.0, 0.0));
    }

    #[test]
    fn failed_seed_marks_cell_incomplete() {
        let cells = vec![
            cell("ET", 0, Category::NewGraph, 0, Some(1.0)),
            cell("ET", 0, Category::NewGraph, 1, None),
            cell("ET", 0, Category::NewGraph, 2, Some(3.0)),
        ];
        let rows = summarize(&cells);
        let c = &rows[0].categories["new_graph"];
        assert!(!c.complete);
        assert_eq!(c.mean, Some(2.0));
        assert_eq!(c.seeds.len(), 3);
    }

    #[test]
    fn csv_has_header_and_one_line_per_cell() {
        let cells = vec![cell("ET", 0, Category::TrainingGraph, 0, Some(0.5)), cell("ET", 0, Category::NewGeo, 0, None)];
        let text = String::from_utf8(cells_csv(&cells)).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "config,row,category,seed,metric");
        assert_eq!(lines[1], "ET,0,training_graph,0,5.000000e-1");
        assert_eq!(lines[2], "ET,0,new_geo,0,");
    }

    #[test]
    fn ordering_flags_follow_means() {
        let mut cells = Vec::new();
        for (i, (name, v)) in [("ET", 3.0), ("ET+DFS", 2.0), ("ET+PE+SE+SL", 1.0)].iter().enumerate() {
            for c in Category::ALL {
                cells.push(cell(name, i, c, 0, Some(*v)));
            }
        }
        let checks = ordering_checks(&summarize(&cells));
        assert_eq!(checks.len(), 7);
        assert!(checks.iter().all(|c| c.holds));
        cells.iter_mut().filter(|c| c.config == "ET").for_each(|c| c.metric = Some(0.5));
        let checks = ordering_checks(&summarize(&cells));
        assert!(checks.iter().filter(|c| c.worse == "ET").all(|c| !c.holds));
        assert!(checks.iter().filter(|c| c.worse == "ET+DFS").all(|c| c.holds));
    }

    #[test]
    fn chart_is_well_formed_svg() {
        let cells = vec![cell("ET", 0, Category::NewGraph, 0, Some(1.0)), cell("ET<x>", 1, Category::NewGraph, 0, Some(2.0))];
        let svg = bar_chart_svg("t & u", &summarize(&cells), &["new_graph".to_string()]);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<rect").count(), 4);
        assert!(svg.contains("ET&lt;x&gt;") && svg.contains("t &amp; u"));
    }

    #[test]
    fn subset_keeps_prefix_embodiments() {
        use getzero_core::bench::{generate_demos, DemoConfig};
        use getzero_core::graph::fixtures;
        let graphs: Vec<_> = (2..5).map(|n| fixtures::chain(n).with_name(format!("c{n}"))).collect();
        let task = TaskSpec { target_radius: 0.02, ..TaskSpec::default() };
        let d = generate_demos(&graphs, &task, &DemoConfig { steps_per_embodiment: 80, ..Default::default() }).unwrap().dataset;
        let s = subset_dataset(&d, 2);
        assert_eq!(s.embodiments.len(), 2);
        assert_eq!(s.records.len(), 160);
        assert!(s.records.iter().all(|r| r.embodiment < 2));
        assert!(s.verify(1e-12).is_ok());
    }
}
