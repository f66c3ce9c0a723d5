use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use orthoproto::data::{generate_synthetic, make_split_with, write_vector_csv, LabeledDataset, OpenSetSplit, SplitOptions};
use orthoproto::losses::{gradient_suite, LossReport, GRADIENT_TOLERANCE};
use orthoproto::metrics::{activation_histogram, oscr, projection_confusion, write_confusion_csv, write_curve_csv, write_histogram_csv};
use orthoproto::model::{load_checkpoint, save_checkpoint, DualBranchModel};
use orthoproto::scoring::{decide, score_batch, write_scores_csv, ScoreRow, ScoreRule, ScoredSample};
use orthoproto::training::{evaluate_model, fit_observed, run_ablation, table3_suite, Observer, Snapshot};
use orthoproto::{Error, Result};

use crate::config::{
    AblateConfig, EvalConfig, EvalFlags, GenDataConfig, GradcheckConfig, ScoreConfig, SplitConfig,
    SplitFlags, TrainRunConfig,
};
use crate::io::{create, create_dir, echo_config, load_dataset, load_split, meta_path, with_file, write_json};
use crate::{Common, Failure};

fn write_dataset(dir: &Path, ds: &LabeledDataset) -> Result<()> {
    let csv = dir.join("dataset.csv");
    with_file(&csv, |w| write_vector_csv(w, ds))?;
    write_json(&meta_path(&csv), &ds.provenance)
}

pub fn gen_data(common: &Common) -> std::result::Result<(), Failure> {
    let cfg = GenDataConfig::resolve(common)?;
    echo_config(&cfg.out, &cfg)?;
    let ds = generate_synthetic(&cfg.synthetic)?;
    write_dataset(&cfg.out, &ds)?;
    println!(
        "wrote {} samples, {} classes, {} features to {}",
        ds.len(),
        ds.classes().len(),
        ds.input_dim(),
        cfg.out.join("dataset.csv").display()
    );
    Ok(())
}

pub fn split(common: &Common, flags: SplitFlags) -> std::result::Result<(), Failure> {
    let cfg = SplitConfig::resolve(common, flags)?;
    echo_config(&cfg.out, &cfg)?;
    let ds = load_dataset(&cfg.dataset)?;
    let s = make_split_with(
        &ds,
        cfg.n_known,
        cfg.test_fraction,
        cfg.seed,
        &SplitOptions {
            include_background_in_test: cfg.include_background_in_test,
        },
    )?;
    fs::write(cfg.out.join("split.json"), s.to_json()?).map_err(Error::from)?;
    println!(
        "known {:?}, background {}, unknown {:?}; train {} + {} background, test {} known + {} unknown",
        s.known_class_ids,
        s.background_class_id,
        s.unknown_class_ids,
        s.train_known.len(),
        s.train_background.len(),
        s.test_known.len(),
        s.test_unknown.len()
    );
    Ok(())
}

/// Streams step losses to `steps.log` and snapshots to `snapshots/`.
struct RunLog {
    steps: BufWriter<fs::File>,
    snapshot_dir: std::path::PathBuf,
}

impl Observer for RunLog {
    fn on_step(&mut self, step: u64, report: &LossReport) -> Result<()> {
        #[derive(serde::Serialize)]
        struct Line<'a> {
            step: u64,
            #[serde(flatten)]
            report: &'a LossReport,
        }
        serde_json::to_writer(&mut self.steps, &Line { step, report })?;
        self.steps.write_all(b"\n")?;
        Ok(())
    }

    fn on_snapshot(&mut self, snapshot: &Snapshot) -> Result<()> {
        write_json(&self.snapshot_dir.join(format!("step_{:06}.json", snapshot.step)), snapshot)
    }
}

pub fn train(
    common: &Common,
    dataset: Option<std::path::PathBuf>,
    split: Option<std::path::PathBuf>,
) -> std::result::Result<(), Failure> {
    let cfg = TrainRunConfig::resolve(common, dataset, split)?;
    echo_config(&cfg.out, &cfg)?;
    let exp = &cfg.experiment;
    let ds = match cfg.dataset.path {
        Some(_) => load_dataset(&cfg.dataset)?,
        None => generate_synthetic(&exp.data)?,
    };
    let s = match &cfg.split {
        Some(p) => load_split(p, &ds)?,
        None => make_split_with(&ds, exp.n_known, exp.test_fraction, cfg.seed, &SplitOptions::default())?,
    };
    write_dataset(&cfg.out, &ds)?;
    fs::write(cfg.out.join("split.json"), s.to_json()?).map_err(Error::from)?;

    let mut enc = exp.encoder();
    enc.input_dim = ds.input_dim();
    let snapshot_dir = cfg.out.join("snapshots");
    create_dir(&snapshot_dir)?;
    let mut log = RunLog {
        steps: create(&cfg.out.join("steps.log"))?,
        snapshot_dir,
    };
    let (model, history) = fit_observed(&ds, &s, &enc, &exp.train, &mut log)?;
    log.steps.flush().map_err(Error::from)?;
    save_checkpoint(&model, cfg.out.join("model.ckpt"))?;

    let ev = evaluate_model(&model, &ds, &s, &s.test_known, &s.test_unknown, exp.train.score_rule())?;
    write_json(&cfg.out.join("metrics.json"), &ev.report)?;
    let last = history.losses.last().map_or(f64::NAN, |l| l.total);
    println!(
        "{} steps, final loss {last:.6}; test AUROC {:.4} OSCR {:.4} ACC {:.4}",
        history.losses.len(),
        ev.report.auroc,
        ev.report.oscr,
        ev.report.closed_acc
    );
    Ok(())
}

fn load_model(path: &Path, ds: &LabeledDataset) -> Result<DualBranchModel> {
    let m = load_checkpoint(path).map_err(|e| match e {
        Error::Io(io) => Error::Data(format!("checkpoint {}: {io}", path.display())),
        other => other,
    })?;
    if m.branch_a.input_dim() != ds.input_dim() {
        return Err(Error::Data(format!(
            "checkpoint expects {} features, dataset has {}",
            m.branch_a.input_dim(),
            ds.input_dim()
        )));
    }
    Ok(m)
}

fn write_decisions<W: Write>(w: W, ids: &[usize], scores: &[(f64, usize)], threshold: f64) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["sample_id", "score", "accepted", "predicted"])?;
    for (&id, &(score, k)) in ids.iter().zip(scores) {
        let accepted = score > threshold;
        let pred = if accepted { k.to_string() } else { "REJECT".into() };
        out.write_record([id.to_string(), score.to_string(), u8::from(accepted).to_string(), pred])?;
    }
    out.flush()?;
    Ok(())
}

fn scored_rows<'a>(
    ids: &[usize],
    scored: &'a [ScoredSample],
    ds: &LabeledDataset,
    split: Option<&OpenSetSplit>,
) -> Vec<ScoreRow<'a>> {
    ids.iter()
        .zip(scored)
        .map(|(&i, s)| {
            let label = split.and_then(|sp| sp.remap(ds.labels[i]));
            ScoreRow {
                sample_id: i,
                true_label: label,
                is_known: label.is_some(),
                scored: s,
            }
        })
        .collect()
}

pub fn eval(common: &Common, flags: EvalFlags) -> std::result::Result<(), Failure> {
    let cfg = EvalConfig::resolve(common, flags)?;
    echo_config(&cfg.out, &cfg)?;
    let ds = load_dataset(&cfg.dataset)?;
    let s = load_split(cfg.split.as_deref().expect("resolved"), &ds)?;
    let model = load_model(cfg.checkpoint.as_deref().expect("resolved"), &ds)?;
    let ev = evaluate_model(&model, &ds, &s, &s.test_known, &s.test_unknown, cfg.rule)?;
    let out = &cfg.out;
    write_json(&out.join("metrics.json"), &ev.report)?;
    let (_, curve) = oscr(&ev.records)?;
    with_file(&out.join("curve.csv"), |w| write_curve_csv(w, &curve))?;
    let act = |v: &[ScoredSample]| v.iter().map(|s| s.act_a).collect::<Vec<_>>();
    let hist = activation_histogram(&act(&ev.known), &act(&ev.unknown), cfg.bins)?;
    with_file(&out.join("histogram.csv"), |w| write_histogram_csv(w, &hist))?;
    let conf = projection_confusion(&ev.known, &ev.unknown)?;
    with_file(&out.join("confusion.csv"), |w| write_confusion_csv(w, &conf))?;

    let ids: Vec<usize> = s.test_known.iter().chain(&s.test_unknown).copied().collect();
    let all: Vec<ScoredSample> = ev.known.iter().chain(&ev.unknown).cloned().collect();
    with_file(&out.join("scores.csv"), |w| write_scores_csv(w, &scored_rows(&ids, &all, &ds, Some(&s))))?;
    if let Some(t) = cfg.threshold {
        let rule_scores: Vec<(f64, usize)> = all.iter().map(|x| cfg.rule.apply(x)).collect();
        with_file(&out.join("decisions.csv"), |w| write_decisions(w, &ids, &rule_scores, t))?;
    }
    println!(
        "rule {}: AUROC {:.4} OSCR {:.4} ACC {:.4} ({} known, {} unknown); overlap {:.4}, diagonal known {:.4} unknown {:.4}",
        cfg.rule.name(),
        ev.report.auroc,
        ev.report.oscr,
        ev.report.closed_acc,
        ev.report.n_known,
        ev.report.n_unknown,
        hist.overlap,
        conf.known_diagonal,
        conf.unknown_diagonal
    );
    Ok(())
}

pub fn ablate(common: &Common, suite: Option<String>, seeds: Option<usize>) -> std::result::Result<(), Failure> {
    let cfg = AblateConfig::resolve(common, suite, seeds)?;
    let rows = match cfg.suite.as_str() {
        "table3" => table3_suite(),
        other => return Err(Failure::usage(format!("unknown suite {other:?}; available: table3"))),
    };
    echo_config(&cfg.out, &cfg)?;
    let seed_list: Vec<u64> = (0..cfg.seeds as u64).map(|i| cfg.seed + i).collect();
    let table = run_ablation(&rows, &seed_list, &cfg.experiment)?;
    with_file(&cfg.out.join("ablation.csv"), |w| table.write_csv(w))?;
    write_json(&cfg.out.join("ablation.json"), &table)?;
    for r in &table.rows {
        println!(
            "{:<24} AUROC {:.4}±{:.4} OSCR {:.4}±{:.4} ACC {:.4}±{:.4} ({} ok, {} failed)",
            r.name,
            r.auroc.mean,
            r.auroc.std,
            r.oscr.mean,
            r.oscr.std,
            r.closed_acc.mean,
            r.closed_acc.std,
            r.n_ok,
            r.failures.len()
        );
        for f in &r.failures {
            eprintln!("  {}: {f}", r.name);
        }
    }
    let failed: usize = table.rows.iter().map(|r| r.failures.len()).sum();
    if failed > 0 {
        return Err(Failure::numeric(format!("{failed} ablation cells failed")));
    }
    Ok(())
}

pub fn gradcheck(common: &Common, points: Option<usize>) -> std::result::Result<(), Failure> {
    let cfg = GradcheckConfig::resolve(common, points)?;
    if let Some(out) = &cfg.out {
        echo_config(out, &cfg)?;
    } else {
        println!("config: {}", serde_json::to_string(&cfg).map_err(Error::from)?);
    }
    let checks = gradient_suite(cfg.seed, cfg.points)?;
    for c in &checks {
        println!(
            "{:<8} max_rel_err {:.3e} over {} points {}",
            c.term,
            c.max_relative_error,
            c.points,
            if c.passed() { "ok" } else { "FAIL" }
        );
    }
    if let Some(out) = &cfg.out {
        write_json(&out.join("gradcheck.json"), &checks)?;
    }
    let bad: Vec<&str> = checks.iter().filter(|c| !c.passed()).map(|c| c.term).collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Failure::numeric(format!(
            "gradient check above {GRADIENT_TOLERANCE:e} for {}",
            bad.join(", ")
        )))
    }
}

pub fn score(
    common: &Common,
    checkpoint: Option<std::path::PathBuf>,
    dataset: Option<std::path::PathBuf>,
    split: Option<std::path::PathBuf>,
    threshold: Option<f64>,
) -> std::result::Result<(), Failure> {
    let cfg = ScoreConfig::resolve(common, checkpoint, dataset, split, threshold)?;
    echo_config(&cfg.out, &cfg)?;
    let ds = load_dataset(&cfg.dataset)?;
    let s = cfg.split.as_deref().map(|p| load_split(p, &ds)).transpose()?;
    let model = load_model(cfg.checkpoint.as_deref().expect("resolved"), &ds)?;
    let scored = score_batch(&model, &ds.samples)?;
    let ids: Vec<usize> = (0..ds.len()).collect();
    with_file(&cfg.out.join("scores.csv"), |w| write_scores_csv(w, &scored_rows(&ids, &scored, &ds, s.as_ref())))?;
    if let Some(t) = cfg.threshold {
        let pairs: Vec<(f64, usize)> = scored.iter().map(|x| ScoreRule::Combined.apply(x)).collect();
        with_file(&cfg.out.join("decisions.csv"), |w| write_decisions(w, &ids, &pairs, t))?;
        let accepted = scored.iter().filter(|x| decide(x, t).accepted).count();
        println!("scored {} samples; {accepted} accepted at threshold {t}", ds.len());
    } else {
        println!("scored {} samples", ds.len());
    }
    Ok(())
}
