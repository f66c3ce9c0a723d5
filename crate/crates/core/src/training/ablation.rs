use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate_model, fit, TrainConfig};
use crate::data::{generate_synthetic, make_split, SyntheticConfig};
use crate::error::Result;
use crate::losses::{LossWeights, Objective};
use crate::metrics::{activation_histogram, projection_confusion, DEFAULT_BINS};
use crate::model::{init_model, DualBranchModel, EncoderConfig};
use crate::scoring::ScoreRule;

/// One configuration of the ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub objective: Objective,
    pub rule: ScoreRule,
}

fn row(name: &str, mp: bool, lambda: f64, gamma: f64, alpha: f64, beta: f64) -> AblationRow {
    AblationRow {
        name: name.to_string(),
        objective: Objective {
            weights: LossWeights {
                lambda,
                gamma,
                alpha,
                beta,
            },
            multi_projection: mp,
        },
        rule: if !mp && lambda == 0.0 && gamma == 0.0 {
            ScoreRule::PlSimilarity
        } else if mp {
            ScoreRule::Combined
        } else {
            ScoreRule::SingleBranch
        },
    }
}

/// The six configurations, from plain prototype learning up to the full
/// method. Single-branch rows score with branch A alone.
pub fn table3_suite() -> Vec<AblationRow> {
    let d = LossWeights::default();
    vec![
        row("pl", false, 0.0, 0.0, 0.0, 0.0),
        row("pl+l_f", false, d.lambda, 0.0, 0.0, 0.0),
        row("pl+l_f+l_fb", false, d.lambda, d.gamma, 0.0, 0.0),
        row("mp+faem", true, d.lambda, d.gamma, 0.0, 0.0),
        row("mp+faem+l_orth", true, d.lambda, d.gamma, d.alpha, 0.0),
        row("mp+faem+l_orth+l_pb", true, d.lambda, d.gamma, d.alpha, d.beta),
    ]
}

/// Everything but the seed that defines one synthetic trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Experiment {
    /// Its seed field is replaced by the trial seed.
    pub data: SyntheticConfig,
    pub n_known: usize,
    pub test_fraction: f64,
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    /// Loss weights, structure and seed are replaced per cell.
    pub train: TrainConfig,
}

impl Default for Experiment {
    fn default() -> Self {
        Experiment::benchmark()
    }
}

impl Experiment {
    pub fn benchmark() -> Self {
        Experiment {
            data: SyntheticConfig::benchmark(0),
            n_known: 8,
            test_fraction: 0.3,
            hidden_dims: vec![64, 64],
            // narrower than the desk encoder default; see the README
            feature_dim: 8,
            train: TrainConfig::default(),
        }
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            input_dim: self.data.raw_dim,
            hidden_dims: self.hidden_dims.clone(),
            feature_dim: self.feature_dim,
            activation: Default::default(),
        }
    }
}

/// Per-cell measurements behind the activation, projection and
/// orthogonality diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellDiagnostics {
    /// Mean `||z_A||_1` over known test samples.
    pub mean_activation_known: f64,
    pub mean_activation_unknown: f64,
    pub histogram_overlap: f64,
    pub known_diagonal: f64,
    pub unknown_diagonal: f64,
    /// Mean squared same-class cross-branch prototype dot product.
    pub orth_initial: f64,
    pub orth_final: f64,
    /// Mean training `l_orth` over the last ten steps.
    pub orth_last_steps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub row: usize,
    pub seed: u64,
    pub auroc: f64,
    pub oscr: f64,
    pub closed_acc: f64,
    pub diagnostics: CellDiagnostics,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
}

impl Stat {
    pub fn of(v: &[f64]) -> Stat {
        if v.is_empty() {
            return Stat {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = if v.len() > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Stat { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowSummary {
    pub name: String,
    pub auroc: Stat,
    pub oscr: Stat,
    pub closed_acc: Stat,
    pub n_ok: usize,
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<RowSummary>,
    pub cells: Vec<CellResult>,
}

impl AblationTable {
    pub fn cells_of(&self, row: usize) -> impl Iterator<Item = &CellResult> {
        self.cells.iter().filter(move |c| c.row == row)
    }

    /// Mean of a per-cell quantity over the successful cells of `row`.
    pub fn mean_of(&self, row: usize, f: impl Fn(&CellResult) -> f64) -> f64 {
        Stat::of(&self.cells_of(row).map(f).collect::<Vec<_>>()).mean
    }

    /// Header `row,name,auroc_mean,auroc_std,oscr_mean,oscr_std,acc_mean,acc_std,n_ok,n_failed`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "row", "name", "auroc_mean", "auroc_std", "oscr_mean", "oscr_std", "acc_mean", "acc_std", "n_ok",
            "n_failed",
        ])?;
        for (i, r) in self.rows.iter().enumerate() {
            out.write_record([
                (i + 1).to_string(),
                r.name.clone(),
                r.auroc.mean.to_string(),
                r.auroc.std.to_string(),
                r.oscr.mean.to_string(),
                r.oscr.std.to_string(),
                r.closed_acc.mean.to_string(),
                r.closed_acc.std.to_string(),
                r.n_ok.to_string(),
                r.failures.len().to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

fn orth_value(m: &DualBranchModel) -> f64 {
    let (pa, pb) = (&m.branch_a.prototypes, &m.branch_b.prototypes);
    let n = pa.rows();
    (0..n)
        .map(|k| pa.row(k).iter().zip(pb.row(k)).map(|(x, y)| x * y).sum::<f64>().powi(2))
        .sum::<f64>()
        / n as f64
}

fn run_cell(exp: &Experiment, r: &AblationRow, row_idx: usize, seed: u64) -> Result<CellResult> {
    let ds = generate_synthetic(&SyntheticConfig {
        seed,
        ..exp.data.clone()
    })?;
    let split = make_split(&ds, exp.n_known, exp.test_fraction, seed)?;
    let enc = exp.encoder();
    let cfg = TrainConfig {
        loss_weights: r.objective.weights,
        multi_projection: r.objective.multi_projection,
        seed,
        eval_every: 0,
        ..exp.train.clone()
    };
    let initial = init_model(&enc, exp.n_known, seed)?;
    let (model, history) = fit(&ds, &split, &enc, &cfg)?;
    let ev = evaluate_model(&model, &ds, &split, &split.test_known, &split.test_unknown, r.rule)?;
    let act_k: Vec<f64> = ev.known.iter().map(|s| s.act_a).collect();
    let act_u: Vec<f64> = ev.unknown.iter().map(|s| s.act_a).collect();
    let hist = activation_histogram(&act_k, &act_u, DEFAULT_BINS)?;
    let conf = projection_confusion(&ev.known, &ev.unknown)?;
    let tail = &history.losses[history.losses.len().saturating_sub(10)..];
    Ok(CellResult {
        row: row_idx,
        seed,
        auroc: ev.report.auroc,
        oscr: ev.report.oscr,
        closed_acc: ev.report.closed_acc,
        diagnostics: CellDiagnostics {
            mean_activation_known: Stat::of(&act_k).mean,
            mean_activation_unknown: Stat::of(&act_u).mean,
            histogram_overlap: hist.overlap,
            known_diagonal: conf.known_diagonal,
            unknown_diagonal: conf.unknown_diagonal,
            orth_initial: orth_value(&initial),
            orth_final: orth_value(&model),
            orth_last_steps: Stat::of(&tail.iter().map(|l| l.l_orth).collect::<Vec<_>>()).mean,
        },
    })
}

/// Trains every (row, seed) cell in parallel. A failed cell is recorded in
/// its row's `failures` and the rest of the suite continues.
pub fn run_ablation(suite: &[AblationRow], seeds: &[u64], exp: &Experiment) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(crate::Error::Config("ablation needs at least one seed".into()));
    }
    let jobs: Vec<(usize, u64)> = (0..suite.len()).flat_map(|r| seeds.iter().map(move |&s| (r, s))).collect();
    let outcomes: Vec<(usize, u64, Result<CellResult>)> = jobs
        .par_iter()
        .map(|&(r, s)| (r, s, run_cell(exp, &suite[r], r, s)))
        .collect();
    let mut cells = Vec::new();
    let mut rows: Vec<RowSummary> = suite
        .iter()
        .map(|r| RowSummary {
            name: r.name.clone(),
            auroc: Stat::default(),
            oscr: Stat::default(),
            closed_acc: Stat::default(),
            n_ok: 0,
            failures: Vec::new(),
        })
        .collect();
    for (r, s, out) in outcomes {
        match out {
            Ok(c) => cells.push(c),
            Err(e) => rows[r].failures.push(format!("seed {s}: {e}")),
        }
    }
    for (i, summary) in rows.iter_mut().enumerate() {
        let mine: Vec<&CellResult> = cells.iter().filter(|c| c.row == i).collect();
        summary.n_ok = mine.len();
        summary.auroc = Stat::of(&mine.iter().map(|c| c.auroc).collect::<Vec<_>>());
        summary.oscr = Stat::of(&mine.iter().map(|c| c.oscr).collect::<Vec<_>>());
        summary.closed_acc = Stat::of(&mine.iter().map(|c| c.closed_acc).collect::<Vec<_>>());
    }
    Ok(AblationTable { rows, cells })
}
