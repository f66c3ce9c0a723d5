//! Plain SGD over both branches, batch sampling, evaluation snapshots, and
//! the ablation runner.

mod ablation;

pub use ablation::{
    run_ablation, table3_suite, AblationRow, AblationTable, CellDiagnostics, CellResult, Experiment, RowSummary, Stat,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, OpenSetSplit};
use crate::error::{Error, Result};
use crate::losses::{build_loss, Batch, LossReport, LossWeights, Objective};
use crate::metrics::{evaluate, EvalRecord, MetricReport};
use crate::model::{init_model, BranchId, DualBranchModel, EncoderConfig};
use crate::ndnum::{Tape, Tensor};
use crate::scoring::{score_batch, ScoreRule, ScoredSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Share of each batch drawn from the background class. `None` means
    /// `1 / (N + 1)`.
    pub background_fraction: Option<f64>,
    pub loss_weights: LossWeights,
    pub multi_projection: bool,
    pub seed: u64,
    /// Snapshot period in steps; 0 keeps only the final snapshot.
    pub eval_every: usize,
    /// Share of the known training pool held out for snapshots.
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            batch_size: 64,
            epochs: 50,
            background_fraction: None,
            loss_weights: LossWeights::default(),
            multi_projection: true,
            seed: 0,
            eval_every: 0,
            validation_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        if let Some(f) = self.background_fraction {
            if !(0.0..1.0).contains(&f) {
                return Err(Error::Config(format!("background_fraction {f} outside [0, 1)")));
            }
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(format!(
                "validation_fraction {} outside [0, 1)",
                self.validation_fraction
            )));
        }
        self.loss_weights.validate()
    }

    pub fn objective(&self) -> Objective {
        Objective {
            weights: self.loss_weights,
            multi_projection: self.multi_projection,
        }
    }

    /// The detection score matching the trained structure.
    pub fn score_rule(&self) -> ScoreRule {
        if self.multi_projection {
            ScoreRule::Combined
        } else {
            ScoreRule::SingleBranch
        }
    }

    pub fn background_fraction_for(&self, n_known: usize) -> f64 {
        self.background_fraction.unwrap_or(1.0 / (n_known as f64 + 1.0))
    }
}

/// The mutable state of one training run.
#[derive(Debug, Clone)]
pub struct RunState {
    pub model: DualBranchModel,
    /// Number of applied updates.
    pub step: u64,
    pub history: Vec<LossReport>,
    pub rng: ChaCha8Rng,
}

impl RunState {
    pub fn new(model: DualBranchModel, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        RunState {
            model,
            step: 0,
            history: Vec::new(),
            rng,
        }
    }
}

/// Draws `round(batch_size * fraction)` background rows and fills the rest
/// with known rows, uniformly with replacement. Labels are remapped to the
/// split's known order.
pub fn sample_batch(
    split: &OpenSetSplit,
    ds: &LabeledDataset,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    if split.train_known.is_empty() {
        return Err(Error::Data("known training pool is empty".into()));
    }
    let m_b = if split.train_background.is_empty() {
        0
    } else {
        let f = cfg.background_fraction_for(split.n_known());
        ((cfg.batch_size as f64 * f).round() as usize).min(cfg.batch_size - 1)
    };
    let m = cfg.batch_size - m_b;
    let known: Vec<usize> = (0..m)
        .map(|_| split.train_known[rng.gen_range(0..split.train_known.len())])
        .collect();
    let bg: Vec<usize> = (0..m_b)
        .map(|_| split.train_background[rng.gen_range(0..split.train_background.len())])
        .collect();
    let known_y = known
        .iter()
        .map(|&i| {
            split
                .remap(ds.labels[i])
                .ok_or_else(|| Error::Data(format!("sample {i} in the known pool has label {}", ds.labels[i])))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Batch {
        known_x: ds.rows(&known),
        known_y,
        background_x: ds.rows(&bg),
    })
}

/// `param <- param - lr * grad`.
pub fn sgd_update(param: &mut Tensor, grad: &Tensor, lr: f64) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::dim("sgd_update", param.shape(), grad.shape()));
    }
    param.data_mut().iter_mut().zip(grad.data()).for_each(|(p, g)| *p -= lr * g);
    Ok(())
}

/// One forward/backward pass and update of every active parameter.
///
/// With `multi_projection` on, every parameter of both branches must
/// receive a gradient; a detached one is a contract error.
pub fn sgd_step(state: &mut RunState, batch: &Batch, obj: &Objective, lr: f64) -> Result<LossReport> {
    let mut tape = Tape::new();
    let (a, b) = state.model.bind(&mut tape, true);
    let graph = build_loss(&mut tape, &a, &b, batch, obj, None)?;
    let report = graph.report(&tape)?;
    if let Some(term) = report.first_non_finite() {
        return Err(Error::Numeric(format!(
            "loss term {term} is not finite at step {} (total {})",
            state.step, report.total
        )));
    }
    tape.backward(graph.total)?;

    let active: &[BranchId] = if obj.multi_projection { &[BranchId::A, BranchId::B] } else { &[BranchId::A] };
    let mut updates = Vec::new();
    for &id in active {
        let bound = if id == BranchId::A { &a } else { &b };
        let names = state.model.branch(id).parameter_names();
        for (v, name) in bound.params().iter().zip(names) {
            let g = tape
                .grad(*v)
                .ok_or_else(|| Error::Contract(format!("parameter {name} received no gradient")))?;
            if g.data().iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!("gradient of {name} is not finite at step {}", state.step)));
            }
            updates.push((id, g));
        }
    }
    let mut it = updates.into_iter();
    for &id in active {
        for p in state.model.branch_mut(id).parameters_mut() {
            let (_, g) = it.next().expect("one gradient per parameter");
            sgd_update(p, &g, lr)?;
        }
    }
    state.step += 1;
    state.history.push(report);
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub step: u64,
    pub report: MetricReport,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub losses: Vec<LossReport>,
    pub snapshots: Vec<Snapshot>,
}

/// Receives progress as it happens, for example to persist it.
pub trait Observer {
    fn on_step(&mut self, _step: u64, _report: &LossReport) -> Result<()> {
        Ok(())
    }

    fn on_snapshot(&mut self, _snapshot: &Snapshot) -> Result<()> {
        Ok(())
    }
}

impl Observer for () {}

/// Scored test populations plus their metric report.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricReport,
    pub records: Vec<EvalRecord>,
    pub known: Vec<ScoredSample>,
    pub unknown: Vec<ScoredSample>,
}

/// Scores `known_idx` and `unknown_idx` of `ds` under `rule`.
pub fn evaluate_model(
    model: &DualBranchModel,
    ds: &LabeledDataset,
    split: &OpenSetSplit,
    known_idx: &[usize],
    unknown_idx: &[usize],
    rule: ScoreRule,
) -> Result<Evaluation> {
    let known = score_batch(model, &ds.rows(known_idx))?;
    let unknown = score_batch(model, &ds.rows(unknown_idx))?;
    let mut records = Vec::with_capacity(known.len() + unknown.len());
    for (s, &i) in known.iter().zip(known_idx) {
        let (score, k) = rule.apply(s);
        let c = split
            .remap(ds.labels[i])
            .ok_or_else(|| Error::Data(format!("sample {i} is not from a known class")))?;
        records.push(EvalRecord::known(c, k, score));
    }
    for s in &unknown {
        let (score, k) = rule.apply(s);
        records.push(EvalRecord::unknown(k, score));
    }
    Ok(Evaluation {
        report: evaluate(&records)?,
        records,
        known,
        unknown,
    })
}

/// The known training pool after holding out a validation slice.
pub fn validation_split(split: &OpenSetSplit, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    let mut pool = split.train_known.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    pool.shuffle(&mut rng);
    let n_val = if fraction > 0.0 && pool.len() >= 2 {
        ((pool.len() as f64 * fraction).floor() as usize).clamp(1, pool.len() - 1)
    } else {
        0
    };
    let mut val = pool[..n_val].to_vec();
    let mut train = pool[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

pub fn fit(
    ds: &LabeledDataset,
    split: &OpenSetSplit,
    model_cfg: &EncoderConfig,
    cfg: &TrainConfig,
) -> Result<(DualBranchModel, History)> {
    fit_observed(ds, split, model_cfg, cfg, &mut ())
}

/// Trains from a fresh [`init_model`] for `epochs * (pool / batch_size)`
/// steps, where the pool is the known training rows left after validation
/// plus the background rows.
pub fn fit_observed(
    ds: &LabeledDataset,
    split: &OpenSetSplit,
    model_cfg: &EncoderConfig,
    cfg: &TrainConfig,
    observer: &mut dyn Observer,
) -> Result<(DualBranchModel, History)> {
    cfg.validate()?;
    model_cfg.validate()?;
    if model_cfg.input_dim != ds.input_dim() {
        return Err(Error::Config(format!(
            "encoder input_dim {} but dataset has {} features",
            model_cfg.input_dim,
            ds.input_dim()
        )));
    }
    split.validate(ds)?;
    let model = init_model(model_cfg, split.n_known(), cfg.seed)?;
    let (train_known, val) = validation_split(split, cfg.validation_fraction, cfg.seed);
    let train_split = OpenSetSplit {
        train_known,
        ..split.clone()
    };
    let mut state = RunState::new(model, cfg.seed);
    let mut snapshots = Vec::new();
    let pool = train_split.train_known.len() + train_split.train_background.len();
    let total_steps = cfg.epochs as u64 * (pool / cfg.batch_size).max(1) as u64;
    let obj = cfg.objective();
    let can_eval = !val.is_empty() && !split.test_unknown.is_empty();

    for _ in 0..total_steps {
        let batch = sample_batch(&train_split, ds, cfg, &mut state.rng)?;
        let report = sgd_step(&mut state, &batch, &obj, cfg.learning_rate)?;
        observer.on_step(state.step, &report)?;
        let last = state.step == total_steps;
        let periodic = cfg.eval_every > 0 && state.step.is_multiple_of(cfg.eval_every as u64);
        if can_eval && (periodic || last) {
            let ev = evaluate_model(&state.model, ds, split, &val, &split.test_unknown, cfg.score_rule())?;
            let snap = Snapshot {
                step: state.step,
                report: ev.report,
            };
            observer.on_snapshot(&snap)?;
            snapshots.push(snap);
        }
    }
    Ok((
        state.model,
        History {
            losses: state.history,
            snapshots,
        },
    ))
}
