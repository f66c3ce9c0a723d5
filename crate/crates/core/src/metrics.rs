//! Open-set evaluation metrics and the activation / projection diagnostics.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::argmax;
use crate::scoring::ScoredSample;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub is_known: bool,
    /// Remapped known class; `None` for unknown samples.
    pub true_class: Option<usize>,
    pub predicted: usize,
    pub score: f64,
}

impl EvalRecord {
    pub fn known(true_class: usize, predicted: usize, score: f64) -> Self {
        EvalRecord {
            is_known: true,
            true_class: Some(true_class),
            predicted,
            score,
        }
    }

    pub fn unknown(predicted: usize, score: f64) -> Self {
        EvalRecord {
            is_known: false,
            true_class: None,
            predicted,
            score,
        }
    }

    fn correct(&self) -> bool {
        self.is_known && self.true_class == Some(self.predicted)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Acceptance requires `score > threshold`.
    pub threshold: f64,
    pub fpr: f64,
    pub ccr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub auroc: f64,
    pub oscr: f64,
    pub closed_acc: f64,
    /// `(fpr, ccr)` pairs in sweep order.
    pub ccr_fpr_curve: Vec<(f64, f64)>,
    pub n_known: usize,
    pub n_unknown: usize,
}

fn split_scores(records: &[EvalRecord]) -> Result<(Vec<f64>, Vec<f64>)> {
    let known: Vec<f64> = records.iter().filter(|r| r.is_known).map(|r| r.score).collect();
    let unknown: Vec<f64> = records.iter().filter(|r| !r.is_known).map(|r| r.score).collect();
    if known.is_empty() {
        return Err(Error::Data("no known records to evaluate".into()));
    }
    if unknown.is_empty() {
        return Err(Error::Data("no unknown records to evaluate".into()));
    }
    if records.iter().any(|r| r.score.is_nan()) {
        return Err(Error::Data("NaN score in evaluation records".into()));
    }
    Ok((known, unknown))
}

/// Probability that a known sample outscores an unknown one, ties counting
/// one half (rank-sum form, `O(n log n)`).
pub fn auroc(records: &[EvalRecord]) -> Result<f64> {
    let (known, unknown) = split_scores(records)?;
    let mut all: Vec<(f64, bool)> = known
        .iter()
        .map(|&s| (s, true))
        .chain(unknown.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j share their mean
        let mid = (i + 1 + j) as f64 / 2.0;
        rank_sum += mid * all[i..j].iter().filter(|x| x.1).count() as f64;
        i = j;
    }
    let (nk, nu) = (known.len() as f64, unknown.len() as f64);
    Ok((rank_sum - nk * (nk + 1.0) / 2.0) / (nk * nu))
}

/// ROC curve as `(fpr, tpr)` points from the strictest threshold down,
/// treating known samples as positives.
pub fn roc_curve(records: &[EvalRecord]) -> Result<Vec<(f64, f64)>> {
    let (known, unknown) = split_scores(records)?;
    let mut all: Vec<&EvalRecord> = records.iter().collect();
    all.sort_by(|a, b| b.score.total_cmp(&a.score));
    let (nk, nu) = (known.len() as f64, unknown.len() as f64);
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let s = all[i].score;
        while i < all.len() && all[i].score == s {
            if all[i].is_known {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        pts.push((fp as f64 / nu, tp as f64 / nk));
    }
    Ok(pts)
}

/// Trapezoidal area under [`roc_curve`]; agrees with [`auroc`].
pub fn auroc_trapezoid(records: &[EvalRecord]) -> Result<f64> {
    let pts = roc_curve(records)?;
    Ok(pts
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum())
}

/// Open-set classification rate.
///
/// The threshold sweeps `+inf`, every distinct observed score in descending
/// order, then `-inf`. At each threshold θ, CCR counts known samples that
/// are correctly classified with `score > θ`, FPR counts unknown samples
/// with `score > θ`. The area uses right-step rectangles:
/// `sum (fpr_j - fpr_{j-1}) * ccr_j`.
pub fn oscr(records: &[EvalRecord]) -> Result<(f64, Vec<CurvePoint>)> {
    let (known, unknown) = split_scores(records)?;
    let (nk, nu) = (known.len() as f64, unknown.len() as f64);
    let mut sorted: Vec<&EvalRecord> = records.iter().collect();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));

    let mut curve = vec![CurvePoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        ccr: 0.0,
    }];
    let (mut correct, mut false_pos) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].score;
        // nothing at or above s is accepted yet
        curve.push(CurvePoint {
            threshold: s,
            fpr: false_pos as f64 / nu,
            ccr: correct as f64 / nk,
        });
        while i < sorted.len() && sorted[i].score == s {
            if sorted[i].correct() {
                correct += 1;
            } else if !sorted[i].is_known {
                false_pos += 1;
            }
            i += 1;
        }
    }
    curve.push(CurvePoint {
        threshold: f64::NEG_INFINITY,
        fpr: false_pos as f64 / nu,
        ccr: correct as f64 / nk,
    });
    Ok((step_area(&curve), curve))
}

/// Right-step rectangle area under a CCR-vs-FPR curve ordered by rising FPR.
pub fn step_area(curve: &[CurvePoint]) -> f64 {
    curve.windows(2).map(|w| (w[1].fpr - w[0].fpr) * w[1].ccr).sum()
}

/// Fraction of known records whose prediction matches, ignoring scores.
pub fn closed_acc(records: &[EvalRecord]) -> Result<f64> {
    let known: Vec<&EvalRecord> = records.iter().filter(|r| r.is_known).collect();
    if known.is_empty() {
        return Err(Error::Data("no known records for closed-set accuracy".into()));
    }
    Ok(known.iter().filter(|r| r.correct()).count() as f64 / known.len() as f64)
}

pub fn evaluate(records: &[EvalRecord]) -> Result<MetricReport> {
    let (o, curve) = oscr(records)?;
    Ok(MetricReport {
        auroc: auroc(records)?,
        oscr: o,
        closed_acc: closed_acc(records)?,
        ccr_fpr_curve: curve.iter().map(|p| (p.fpr, p.ccr)).collect(),
        n_known: records.iter().filter(|r| r.is_known).count(),
        n_unknown: records.iter().filter(|r| !r.is_known).count(),
    })
}

/// CSV with header `threshold,fpr,ccr`.
pub fn write_curve_csv<W: Write>(w: W, curve: &[CurvePoint]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["threshold", "fpr", "ccr"])?;
    for p in curve {
        out.write_record([p.threshold.to_string(), p.fpr.to_string(), p.ccr.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

pub const DEFAULT_BINS: usize = 50;

/// Known and unknown activation histograms over shared bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationHistogram {
    /// `bins + 1` edges spanning the union of both populations.
    pub edges: Vec<f64>,
    /// Fraction of the known population in each bin (sums to 1).
    pub known: Vec<f64>,
    pub unknown: Vec<f64>,
    /// Sum over bins of the smaller fraction.
    pub overlap: f64,
}

impl ActivationHistogram {
    pub fn bin_width(&self) -> f64 {
        self.edges[1] - self.edges[0]
    }
}

pub fn activation_histogram(known: &[f64], unknown: &[f64], bins: usize) -> Result<ActivationHistogram> {
    if bins < 2 {
        return Err(Error::Config(format!("histogram needs at least 2 bins, got {bins}")));
    }
    if known.is_empty() || unknown.is_empty() {
        return Err(Error::Data("activation histogram needs both populations".into()));
    }
    if known.iter().chain(unknown).any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite activation value".into()));
    }
    let lo = known.iter().chain(unknown).copied().fold(f64::INFINITY, f64::min);
    let mut hi = known.iter().chain(unknown).copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        hi = lo + 1.0;
    }
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
    let fill = |vals: &[f64]| {
        let mut h = vec![0.0; bins];
        for &v in vals {
            let b = (((v - lo) / width).floor() as usize).min(bins - 1);
            h[b] += 1.0;
        }
        let n = vals.len() as f64;
        h.iter_mut().for_each(|c| *c /= n);
        h
    };
    let (k, u) = (fill(known), fill(unknown));
    let overlap = k.iter().zip(&u).map(|(a, b)| a.min(*b)).sum();
    Ok(ActivationHistogram {
        edges,
        known: k,
        unknown: u,
        overlap,
    })
}

/// CSV with header `bin_lo,bin_hi,known_mass,unknown_mass,known_density,unknown_density`.
pub fn write_histogram_csv<W: Write>(w: W, h: &ActivationHistogram) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["bin_lo", "bin_hi", "known_mass", "unknown_mass", "known_density", "unknown_density"])?;
    let width = h.bin_width();
    for i in 0..h.known.len() {
        out.write_record([
            h.edges[i].to_string(),
            h.edges[i + 1].to_string(),
            h.known[i].to_string(),
            h.unknown[i].to_string(),
            (h.known[i] / width).to_string(),
            (h.unknown[i] / width).to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Counts of (branch-A class, branch-B class) assignments per population,
/// where each branch assigns the class of its highest known confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionConfusion {
    pub known: Vec<Vec<u64>>,
    pub unknown: Vec<Vec<u64>>,
    pub known_diagonal: f64,
    pub unknown_diagonal: f64,
}

fn confusion_matrix(samples: &[&ScoredSample], n: usize) -> (Vec<Vec<u64>>, f64) {
    let mut m = vec![vec![0u64; n]; n];
    for s in samples {
        m[argmax(&s.score_a())][argmax(&s.score_b())] += 1;
    }
    let diag: u64 = (0..n).map(|i| m[i][i]).sum();
    let frac = if samples.is_empty() {
        0.0
    } else {
        diag as f64 / samples.len() as f64
    };
    (m, frac)
}

/// Cross-branch projection agreement from scored samples.
pub fn projection_confusion(known: &[ScoredSample], unknown: &[ScoredSample]) -> Result<ProjectionConfusion> {
    let n = known
        .first()
        .or(unknown.first())
        .map(|s| s.sim_a.len())
        .ok_or_else(|| Error::Data("projection confusion needs samples".into()))?;
    let (k, kd) = confusion_matrix(&known.iter().collect::<Vec<_>>(), n);
    let (u, ud) = confusion_matrix(&unknown.iter().collect::<Vec<_>>(), n);
    Ok(ProjectionConfusion {
        known: k,
        unknown: u,
        known_diagonal: kd,
        unknown_diagonal: ud,
    })
}

/// CSV with header `population,row_class,col_class,count` (long format).
pub fn write_confusion_csv<W: Write>(w: W, c: &ProjectionConfusion) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["population", "branch_a_class", "branch_b_class", "count"])?;
    for (name, m) in [("known", &c.known), ("unknown", &c.unknown)] {
        for (i, row) in m.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                out.write_record([name.to_string(), i.to_string(), j.to_string(), v.to_string()])?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn recs(known: &[(f64, bool)], unknown: &[f64]) -> Vec<EvalRecord> {
        let mut v: Vec<EvalRecord> = known
            .iter()
            .map(|&(s, ok)| EvalRecord::known(0, if ok { 0 } else { 1 }, s))
            .collect();
        v.extend(unknown.iter().map(|&s| EvalRecord::unknown(0, s)));
        v
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&recs(&[(5.0, true), (4.0, true)], &[1.0, 2.0])).unwrap(), 1.0);
        assert_eq!(auroc(&recs(&[(3.0, true), (3.0, true)], &[3.0, 3.0, 3.0])).unwrap(), 0.5);
        assert_eq!(auroc(&recs(&[(3.0, true), (1.0, true)], &[2.0])).unwrap(), 0.5);
        let r = recs(&[(3.0, true), (1.0, true)], &[2.0]);
        assert_eq!(auroc_trapezoid(&r).unwrap(), 0.5);
    }

    #[test]
    fn auroc_reports_empty_side() {
        let e = auroc(&recs(&[(1.0, true)], &[])).unwrap_err();
        assert!(e.to_string().contains("unknown"));
        let e = auroc(&recs(&[], &[1.0])).unwrap_err();
        assert!(e.to_string().contains("known"));
    }

    #[test]
    fn oscr_examples() {
        let (o, curve) = oscr(&recs(&[(5.0, true), (4.0, true)], &[1.0, 2.0])).unwrap();
        assert_eq!(o, 1.0);
        assert_eq!(curve.first().map(|p| (p.fpr, p.ccr)), Some((0.0, 0.0)));
        assert_eq!(curve.last().map(|p| (p.fpr, p.ccr)), Some((1.0, 1.0)));

        // accuracy 0.75, every known above every unknown
        let r = recs(&[(9.0, true), (8.0, false), (7.0, true), (6.0, true)], &[1.0, 2.0, 3.0]);
        assert_eq!(oscr(&r).unwrap().0, 0.75);

        // one correct known at 3, one wrong known at 1, unknown at 2:
        // thresholds +inf,3 -> (0,0); 2 -> (0,.5); 1 -> (1,.5); -inf -> (1,.5)
        let (o, curve) = oscr(&recs(&[(3.0, true), (1.0, false)], &[2.0])).unwrap();
        assert_eq!(o, 0.5);
        let pts: Vec<(f64, f64)> = curve.iter().map(|p| (p.fpr, p.ccr)).collect();
        assert_eq!(pts, vec![(0.0, 0.0), (0.0, 0.0), (0.0, 0.5), (1.0, 0.5), (1.0, 0.5)]);
    }

    #[test]
    fn closed_acc_examples() {
        assert_eq!(closed_acc(&recs(&[(1.0, true), (2.0, true)], &[])).unwrap(), 1.0);
        assert_eq!(closed_acc(&recs(&[(1.0, false)], &[0.0])).unwrap(), 0.0);
        let r = recs(&[(1.0, true), (2.0, false), (0.0, true), (9.0, true)], &[5.0]);
        assert_eq!(closed_acc(&r).unwrap(), 0.75);
        assert!(closed_acc(&recs(&[], &[1.0])).is_err());
    }

    #[test]
    fn histogram_examples() {
        let h = activation_histogram(&[1.0, 2.0, 2.5], &[1.0, 2.0, 2.5], 10).unwrap();
        assert!((h.overlap - 1.0).abs() < 1e-15);
        let h = activation_histogram(&[1.0, 1.5], &[8.0, 9.0], 4).unwrap();
        assert_eq!(h.overlap, 0.0);
        // hand binning over [1, 3] with 2 bins: known [2/3, 1/3], unknown [0, 1]
        let h = activation_histogram(&[1.0, 1.0, 2.0], &[3.0, 3.0], 2).unwrap();
        assert_eq!(h.edges, vec![1.0, 2.0, 3.0]);
        assert_eq!(h.known, vec![2.0 / 3.0, 1.0 / 3.0]);
        assert_eq!(h.unknown, vec![0.0, 1.0]);
        assert!((h.overlap - 1.0 / 3.0).abs() < 1e-15);
        assert!(activation_histogram(&[1.0], &[2.0], 1).is_err());
        assert!(activation_histogram(&[], &[2.0], 5).is_err());
    }

    fn sample(sim_a: Vec<f64>, sim_b: Vec<f64>) -> ScoredSample {
        ScoredSample::combine(sim_a, 1.0, sim_b, 1.0)
    }

    #[test]
    fn confusion_examples() {
        let s = sample(vec![0.0, 1.0, 5.0], vec![3.0, 0.0, 1.0]);
        let c = projection_confusion(std::slice::from_ref(&s), &[]).unwrap();
        assert_eq!(c.known[2][0], 1);
        assert_eq!(c.known_diagonal, 0.0);
        let same: Vec<ScoredSample> = (0..3)
            .map(|k| {
                let mut v = vec![0.0; 3];
                v[k] = 2.0;
                sample(v.clone(), v)
            })
            .collect();
        let c = projection_confusion(&same, &same).unwrap();
        assert_eq!((c.known_diagonal, c.unknown_diagonal), (1.0, 1.0));
    }
}
