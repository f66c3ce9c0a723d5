//! Unknown detection: per-branch known confidence (similarity scaled by the
//! feature's L1 activation), summed across branches, then thresholded.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::argmax;
use crate::model::{Branch, DualBranchModel};
use crate::ndnum::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub sim_a: Vec<f64>,
    pub sim_b: Vec<f64>,
    /// `||z_A||_1`
    pub act_a: f64,
    /// `||z_B||_1`
    pub act_b: f64,
    /// Combined per-class confidence.
    pub confidence: Vec<f64>,
    pub c_max: f64,
    pub k_star: usize,
}

impl ScoredSample {
    /// Builds the combined confidence `sim_a[k] * act_a + sim_b[k] * act_b`.
    pub fn combine(sim_a: Vec<f64>, act_a: f64, sim_b: Vec<f64>, act_b: f64) -> Self {
        let confidence: Vec<f64> = sim_a
            .iter()
            .zip(&sim_b)
            .map(|(sa, sb)| sa * act_a + sb * act_b)
            .collect();
        let k_star = argmax(&confidence);
        ScoredSample {
            c_max: confidence[k_star],
            k_star,
            sim_a,
            sim_b,
            act_a,
            act_b,
            confidence,
        }
    }

    /// Per-class known confidence of branch A alone.
    pub fn score_a(&self) -> Vec<f64> {
        self.sim_a.iter().map(|s| s * self.act_a).collect()
    }

    pub fn score_b(&self) -> Vec<f64> {
        self.sim_b.iter().map(|s| s * self.act_b).collect()
    }
}

fn embed_and_compare(branch: &Branch, x: &Tensor) -> Result<(Tensor, Tensor)> {
    let z = branch.encode(x)?;
    let s = branch.similarity_matrix(&z)?;
    Ok((z, s))
}

/// Scores every row of `x` (`[n, input_dim]`) with both branches.
pub fn score_batch(model: &DualBranchModel, x: &Tensor) -> Result<Vec<ScoredSample>> {
    let (za, sa) = embed_and_compare(&model.branch_a, x)?;
    let (zb, sb) = embed_and_compare(&model.branch_b, x)?;
    Ok((0..x.rows())
        .map(|i| {
            let act_a = za.row(i).iter().map(|v| v.abs()).sum();
            let act_b = zb.row(i).iter().map(|v| v.abs()).sum();
            ScoredSample::combine(sa.row(i).to_vec(), act_a, sb.row(i).to_vec(), act_b)
        })
        .collect())
}

pub fn score_sample(model: &DualBranchModel, x: &[f64]) -> Result<ScoredSample> {
    let t = Tensor::matrix(1, x.len(), x.to_vec())?;
    Ok(score_batch(model, &t)?.remove(0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Prediction {
    Class(usize),
    Reject,
}

impl fmt::Display for Prediction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Prediction::Class(k) => write!(f, "{k}"),
            Prediction::Reject => f.write_str("REJECT"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub accepted: bool,
    pub predicted: Prediction,
    pub threshold: f64,
}

/// Accepts iff `c_max > threshold`; equality rejects.
pub fn decide(s: &ScoredSample, threshold: f64) -> Decision {
    let accepted = s.c_max > threshold;
    Decision {
        accepted,
        predicted: if accepted {
            Prediction::Class(s.k_star)
        } else {
            Prediction::Reject
        },
        threshold,
    }
}

/// Lower-interpolation empirical quantile of known validation scores at
/// level `target`: the element at index `floor(target * (n - 1))` of the
/// sorted list.
pub fn calibrate_threshold(scores: &[f64], target: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Data("cannot calibrate a threshold from no scores".into()));
    }
    if !(0.0..1.0).contains(&target) {
        return Err(Error::Config(format!("quantile level {target} outside [0, 1)")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Data("NaN in calibration scores".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let idx = (target * (sorted.len() - 1) as f64).floor() as usize;
    Ok(sorted[idx])
}

/// How a per-sample scalar score (and predicted class) is read off a
/// [`ScoredSample`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreRule {
    /// Sum of both branches' known confidence.
    Combined,
    /// Branch A's known confidence only.
    SingleBranch,
    /// Plain prototype similarity `max_k z . p_k` on branch A.
    PlSimilarity,
    /// Maximum softmax probability over branch A similarities.
    SoftmaxConfidence,
}

impl ScoreRule {
    pub fn name(self) -> &'static str {
        match self {
            ScoreRule::Combined => "combined",
            ScoreRule::SingleBranch => "single_branch",
            ScoreRule::PlSimilarity => "pl_similarity",
            ScoreRule::SoftmaxConfidence => "softmax_confidence",
        }
    }

    /// (score, predicted class)
    pub fn apply(self, s: &ScoredSample) -> (f64, usize) {
        match self {
            ScoreRule::Combined => (s.c_max, s.k_star),
            ScoreRule::SingleBranch => {
                let sc = s.score_a();
                let k = argmax(&sc);
                (sc[k], k)
            }
            ScoreRule::PlSimilarity => {
                let k = argmax(&s.sim_a);
                (s.sim_a[k], k)
            }
            ScoreRule::SoftmaxConfidence => {
                let k = argmax(&s.sim_a);
                (softmax_max(&s.sim_a), k)
            }
        }
    }
}

impl FromStr for ScoreRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "combined" => Ok(ScoreRule::Combined),
            "single_branch" => Ok(ScoreRule::SingleBranch),
            "pl_similarity" => Ok(ScoreRule::PlSimilarity),
            "softmax_confidence" | "softmax" => Ok(ScoreRule::SoftmaxConfidence),
            other => Err(Error::Config(format!("unknown score rule {other:?}"))),
        }
    }
}

fn softmax_max(logits: &[f64]) -> f64 {
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = logits.iter().map(|v| (v - mx).exp()).sum();
    1.0 / denom
}

/// Scores of a baseline comparator (`softmax_confidence` or `pl_similarity`).
pub fn baseline_scores(kind: &str, model: &DualBranchModel, x: &Tensor) -> Result<Vec<f64>> {
    let rule = match kind.parse::<ScoreRule>()? {
        r @ (ScoreRule::PlSimilarity | ScoreRule::SoftmaxConfidence) => r,
        other => {
            return Err(Error::Config(format!("{} is not a baseline score", other.name())));
        }
    };
    Ok(score_batch(model, x)?.iter().map(|s| rule.apply(s).0).collect())
}

/// One row of a score export.
pub struct ScoreRow<'a> {
    pub sample_id: usize,
    pub true_label: Option<usize>,
    pub is_known: bool,
    pub scored: &'a ScoredSample,
}

/// CSV with header `sample_id,true_label,is_known,c_max,k_star,c_0..c_{N-1}`.
/// Unknown samples have an empty `true_label`.
pub fn write_scores_csv<W: Write>(w: W, rows: &[ScoreRow<'_>]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let n = rows.first().map_or(0, |r| r.scored.confidence.len());
    let mut header = vec!["sample_id".to_string(), "true_label".into(), "is_known".into(), "c_max".into(), "k_star".into()];
    header.extend((0..n).map(|k| format!("c_{k}")));
    out.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.sample_id.to_string(),
            r.true_label.map(|l| l.to_string()).unwrap_or_default(),
            u8::from(r.is_known).to_string(),
            r.scored.c_max.to_string(),
            r.scored.k_star.to_string(),
        ];
        rec.extend(r.scored.confidence.iter().map(f64::to_string));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}
