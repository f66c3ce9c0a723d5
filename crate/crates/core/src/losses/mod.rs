//! Training objectives.
//!
//! Per branch: distance-based cross-entropy plus the two activation
//! alignment terms (known features toward their prototype, background
//! features toward the prototype mean). Across branches: squared
//! same-class prototype dot products and a penalty on background samples
//! that both branches assign to the same class.

mod check;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BoundBranch, BranchId, DualBranchModel};
use crate::ndnum::{Tape, Tensor, Var};

pub use check::{gradient_suite, TermCheck, GRADIENT_TOLERANCE};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// known-to-prototype alignment
    pub lambda: f64,
    /// background-to-center alignment
    pub gamma: f64,
    /// prototype orthogonality
    pub alpha: f64,
    /// background penalty
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 1.0,
            gamma: 1.0,
            alpha: 0.1,
            beta: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda", self.lambda),
            ("gamma", self.gamma),
            ("alpha", self.alpha),
            ("beta", self.beta),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }

    /// Cross-entropy only.
    pub fn none() -> Self {
        LossWeights {
            lambda: 0.0,
            gamma: 0.0,
            alpha: 0.0,
            beta: 0.0,
        }
    }
}

/// One training step's inputs. Labels are already remapped to `[0, N)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub known_x: Tensor,
    pub known_y: Vec<usize>,
    /// `[M_b, input_dim]`; zero rows disables the background terms.
    pub background_x: Tensor,
}

impl Batch {
    pub fn n_known(&self) -> usize {
        self.known_y.len()
    }

    pub fn n_background(&self) -> usize {
        self.background_x.rows()
    }
}

/// Scalar value of every term of one objective evaluation. Unweighted.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub l_eps_a: f64,
    pub l_eps_b: f64,
    pub l_f_a: f64,
    pub l_f_b: f64,
    pub l_fb_a: f64,
    pub l_fb_b: f64,
    pub l_orth: f64,
    pub l_pb: f64,
    pub total: f64,
    pub m_pb: usize,
}

impl LossReport {
    /// Weighted sum recomputed from the stored components.
    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        self.l_eps_a
            + w.lambda * self.l_f_a
            + w.gamma * self.l_fb_a
            + self.l_eps_b
            + w.lambda * self.l_f_b
            + w.gamma * self.l_fb_b
            + w.alpha * self.l_orth
            + w.beta * self.l_pb
    }

    pub fn named(&self) -> [(&'static str, f64); 9] {
        [
            ("l_eps_a", self.l_eps_a),
            ("l_eps_b", self.l_eps_b),
            ("l_f_a", self.l_f_a),
            ("l_f_b", self.l_f_b),
            ("l_fb_a", self.l_fb_a),
            ("l_fb_b", self.l_fb_b),
            ("l_orth", self.l_orth),
            ("l_pb", self.l_pb),
            ("total", self.total),
        ]
    }

    /// Name of the first non-finite term, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.named().into_iter().find(|(_, v)| !v.is_finite()).map(|(n, _)| n)
    }
}

fn zero(tape: &mut Tape) -> Var {
    tape.constant(Tensor::scalar(0.0))
}

fn check_labels(labels: &[usize], n_classes: usize) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
        return Err(Error::Data(format!("label {bad} outside [0, {n_classes})")));
    }
    Ok(())
}

/// Mean negative log-probability of the labelled class under a softmax over
/// `logits` (`[M, N]`, similarities i.e. negated distances).
pub fn dce_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (m, n) = tape.value(logits).matrix_dims();
    if labels.len() != m {
        return Err(Error::Data(format!("{} labels for {m} rows of logits", labels.len())));
    }
    check_labels(labels, n)?;
    let logp = tape.log_softmax(logits)?;
    let picked = tape.pick(logp, labels)?;
    let mean = tape.mean(picked);
    Ok(tape.scale(mean, -1.0))
}

/// Row-wise smooth norm: `0.5 * ||u||_2` when `||u||_1 < 1`, otherwise
/// `||u||_1 - 0.5`. Returns a vector with one entry per row.
pub fn smooth_norm_rows(tape: &mut Tape, u: Var) -> Result<Var> {
    let l1 = tape.row_l1(u)?;
    let l2 = tape.row_l2(u)?;
    let half_l2 = tape.scale(l2, 0.5);
    let rows = tape.value(l1).len();
    let offset = tape.constant(Tensor::vector(vec![-0.5; rows]));
    let shifted = tape.add(l1, offset)?;
    let norms: Vec<f64> = tape.value(l1).data().to_vec();
    for v in &norms {
        tape.note_kink(v - 1.0);
    }
    let mask: Vec<bool> = norms.iter().map(|&v| v < 1.0).collect();
    tape.select(&mask, half_l2, shifted)
}

/// Smooth norm of a single vector `u`, as a scalar.
pub fn smooth_norm_loss(tape: &mut Tape, u: Var) -> Result<Var> {
    let n = tape.value(u).len();
    let row = tape.reshape(u, vec![1, n])?;
    let per_row = smooth_norm_rows(tape, row)?;
    Ok(tape.sum(per_row))
}

/// Mean smooth norm of `z_i - p_{y_i}` over the batch.
pub fn l_f(tape: &mut Tape, z: Var, labels: &[usize], prototypes: Var) -> Result<Var> {
    let (m, _) = tape.value(z).matrix_dims();
    if labels.len() != m {
        return Err(Error::Data(format!("{} labels for {m} embeddings", labels.len())));
    }
    check_labels(labels, tape.value(prototypes).rows())?;
    if m == 0 {
        return Ok(zero(tape));
    }
    let targets = tape.gather_rows(prototypes, labels)?;
    let u = tape.sub(z, targets)?;
    let per = smooth_norm_rows(tape, u)?;
    Ok(tape.mean(per))
}

/// Mean smooth norm of `z_b,i - p_c` over background embeddings; 0 when
/// there are none.
pub fn l_fb(tape: &mut Tape, z_b: Var, center: Var) -> Result<Var> {
    if tape.value(z_b).rows() == 0 || tape.value(z_b).is_empty() {
        return Ok(zero(tape));
    }
    let u = tape.sub_row(z_b, center)?;
    let per = smooth_norm_rows(tape, u)?;
    Ok(tape.mean(per))
}

/// Vars of each per-branch term.
#[derive(Debug, Clone, Copy)]
pub struct FaemTerms {
    pub dce: Var,
    pub l_f: Var,
    pub l_fb: Var,
    pub total: Var,
}

/// Embeddings of one batch under one branch.
#[derive(Debug, Clone, Copy)]
pub struct BranchEmbedding {
    pub known: Var,
    pub background: Option<Var>,
}

pub fn embed_batch(tape: &mut Tape, branch: &BoundBranch, known_x: Var, background_x: Option<Var>) -> Result<BranchEmbedding> {
    let known = branch.encode(tape, known_x)?;
    let background = match background_x {
        Some(b) => Some(branch.encode(tape, b)?),
        None => None,
    };
    Ok(BranchEmbedding { known, background })
}

/// Cross-entropy + λ·known alignment + γ·background alignment for one branch.
pub fn l_faem(
    tape: &mut Tape,
    branch: &BoundBranch,
    emb: &BranchEmbedding,
    labels: &[usize],
    w: &LossWeights,
) -> Result<FaemTerms> {
    let logits = branch.similarity(tape, emb.known)?;
    let dce = dce_loss(tape, logits, labels)?;
    let lf = l_f(tape, emb.known, labels, branch.prototypes)?;
    let lfb = match emb.background {
        Some(zb) => {
            let center = branch.center(tape)?;
            l_fb(tape, zb, center)?
        }
        None => zero(tape),
    };
    let a = tape.scale(lf, w.lambda);
    let b = tape.scale(lfb, w.gamma);
    let s = tape.add(dce, a)?;
    let total = tape.add(s, b)?;
    Ok(FaemTerms {
        dce,
        l_f: lf,
        l_fb: lfb,
        total,
    })
}

/// Mean over classes of the squared dot product between the two branches'
/// prototypes of that class.
pub fn l_orth(tape: &mut Tape, p_a: Var, p_b: Var) -> Result<Var> {
    let prod = tape.mul(p_a, p_b).map_err(|_| {
        Error::dim("l_orth", tape.value(p_a).shape(), tape.value(p_b).shape())
    })?;
    let dots = tape.row_sum(prod)?;
    let sq = tape.square(dots);
    Ok(tape.mean(sq))
}

/// A background sample whose nearest class agrees across both branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Penalty {
    pub index: usize,
    pub branch: BranchId,
    pub class: usize,
}

/// Index of the maximum, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Background samples whose most similar class is the same in both branches.
/// The penalised branch is the one more similar at that class (ties to A).
pub fn penalty_set(sim_a: &Tensor, sim_b: &Tensor) -> Result<Vec<Penalty>> {
    if sim_a.shape() != sim_b.shape() {
        return Err(Error::dim("penalty_set", sim_a.shape(), sim_b.shape()));
    }
    if sim_a.is_empty() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for i in 0..sim_a.rows() {
        let (ra, rb) = (sim_a.row(i), sim_b.row(i));
        let (ka, kb) = (argmax(ra), argmax(rb));
        if ka == kb {
            let branch = if rb[kb] > ra[ka] { BranchId::B } else { BranchId::A };
            out.push(Penalty {
                index: i,
                branch,
                class: ka,
            });
        }
    }
    Ok(out)
}

/// Mean similarity between each selected background embedding and the
/// selected prototype in its chosen branch; 0 for an empty selection.
pub fn l_pb(tape: &mut Tape, selected: &[Penalty], z_a: Var, z_b: Var, p_a: Var, p_b: Var) -> Result<Var> {
    if selected.is_empty() {
        return Ok(zero(tape));
    }
    let mut parts = Vec::new();
    for (id, z, p) in [(BranchId::A, z_a, p_a), (BranchId::B, z_b, p_b)] {
        let (rows, classes): (Vec<usize>, Vec<usize>) = selected
            .iter()
            .filter(|s| s.branch == id)
            .map(|s| (s.index, s.class))
            .unzip();
        if rows.is_empty() {
            continue;
        }
        let zr = tape.gather_rows(z, &rows)?;
        let pr = tape.gather_rows(p, &classes)?;
        let prod = tape.mul(zr, pr)?;
        let dots = tape.row_sum(prod)?;
        parts.push(tape.sum(dots));
    }
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = tape.add(acc, p)?;
    }
    Ok(tape.scale(acc, 1.0 / selected.len() as f64))
}

/// Which terms of the objective are active.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub weights: LossWeights,
    /// Train both branches (otherwise only branch A, and no cross-branch terms).
    pub multi_projection: bool,
}

impl Default for Objective {
    fn default() -> Self {
        Objective {
            weights: LossWeights::default(),
            multi_projection: true,
        }
    }
}

/// Recorded objective: the total plus every component var.
#[derive(Debug, Clone)]
pub struct LossGraph {
    pub total: Var,
    pub faem_a: FaemTerms,
    pub faem_b: Option<FaemTerms>,
    pub orth: Option<Var>,
    pub pb: Option<Var>,
    pub selection: Vec<Penalty>,
}

impl LossGraph {
    pub fn report(&self, tape: &Tape) -> Result<LossReport> {
        let v = |x: Var| tape.scalar_value(x);
        let mut r = LossReport {
            l_eps_a: v(self.faem_a.dce)?,
            l_f_a: v(self.faem_a.l_f)?,
            l_fb_a: v(self.faem_a.l_fb)?,
            total: v(self.total)?,
            m_pb: self.selection.len(),
            ..LossReport::default()
        };
        if let Some(b) = &self.faem_b {
            r.l_eps_b = v(b.dce)?;
            r.l_f_b = v(b.l_f)?;
            r.l_fb_b = v(b.l_fb)?;
        }
        if let Some(o) = self.orth {
            r.l_orth = v(o)?;
        }
        if let Some(p) = self.pb {
            r.l_pb = v(p)?;
        }
        Ok(r)
    }
}

/// Records the full objective for `batch` on already-bound branches.
///
/// The background penalty selection is recomputed from the current
/// similarities unless `frozen` supplies one; either way it is treated as a
/// constant of the step.
pub fn build_loss(
    tape: &mut Tape,
    a: &BoundBranch,
    b: &BoundBranch,
    batch: &Batch,
    obj: &Objective,
    frozen: Option<&[Penalty]>,
) -> Result<LossGraph> {
    let w = &obj.weights;
    let known_x = tape.constant(batch.known_x.clone());
    let bg_x = (batch.n_background() > 0).then(|| tape.constant(batch.background_x.clone()));

    let emb_a = embed_batch(tape, a, known_x, bg_x)?;
    let faem_a = l_faem(tape, a, &emb_a, &batch.known_y, w)?;
    if !obj.multi_projection {
        return Ok(LossGraph {
            total: faem_a.total,
            faem_a,
            faem_b: None,
            orth: None,
            pb: None,
            selection: Vec::new(),
        });
    }

    let emb_b = embed_batch(tape, b, known_x, bg_x)?;
    let faem_b = l_faem(tape, b, &emb_b, &batch.known_y, w)?;
    let orth = l_orth(tape, a.prototypes, b.prototypes)?;

    let (selection, pb) = match (emb_a.background, emb_b.background) {
        (Some(za), Some(zb)) => {
            let sim_a = a.similarity(tape, za)?;
            let sim_b = b.similarity(tape, zb)?;
            let selection = match frozen {
                Some(s) => s.to_vec(),
                None => penalty_set(tape.value(sim_a), tape.value(sim_b))?,
            };
            let pb = l_pb(tape, &selection, za, zb, a.prototypes, b.prototypes)?;
            (selection, pb)
        }
        _ => (Vec::new(), zero(tape)),
    };

    let s = tape.add(faem_a.total, faem_b.total)?;
    let wo = tape.scale(orth, w.alpha);
    let wp = tape.scale(pb, w.beta);
    let s = tape.add(s, wo)?;
    let total = tape.add(s, wp)?;
    Ok(LossGraph {
        total,
        faem_a,
        faem_b: Some(faem_b),
        orth: Some(orth),
        pb: Some(pb),
        selection,
    })
}

/// Evaluates the objective without recording gradients.
pub fn total_loss(model: &DualBranchModel, batch: &Batch, obj: &Objective) -> Result<(f64, LossReport)> {
    let mut tape = Tape::new();
    let (a, b) = model.bind(&mut tape, false);
    let g = build_loss(&mut tape, &a, &b, batch, obj, None)?;
    let report = g.report(&tape)?;
    Ok((report.total, report))
}
