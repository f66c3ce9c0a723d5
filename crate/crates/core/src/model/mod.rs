//! Dual-branch prototype model: two feed-forward encoders with identical
//! structure and independent weights, each paired with a prototype matrix.

mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndnum::{Tape, Tensor, Var};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

/// XORed into the model seed to derive branch B's stream.
pub const BRANCH_B_SEED_MASK: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl EncoderConfig {
    /// Small default used for synthetic benchmarks.
    pub fn desk(input_dim: usize) -> Self {
        EncoderConfig {
            input_dim,
            hidden_dims: vec![64, 64],
            feature_dim: 32,
            activation: Activation::Relu,
        }
    }

    /// 128-dimensional embedding space.
    pub fn wide(input_dim: usize) -> Self {
        EncoderConfig {
            feature_dim: 128,
            ..EncoderConfig::desk(input_dim)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        Ok(())
    }

    /// (fan_in, fan_out) of each linear layer in order.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut prev = self.input_dim;
        for &h in &self.hidden_dims {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.feature_dim));
        dims
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BranchId {
    A,
    B,
}

impl BranchId {
    pub fn tag(self) -> &'static str {
        match self {
            BranchId::A => "a",
            BranchId::B => "b",
        }
    }
}

/// One affine layer `x W + b`. `weight` is `[fan_in, fan_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub id: BranchId,
    pub layers: Vec<Layer>,
    /// `[n_classes, feature_dim]`
    pub prototypes: Tensor,
}

impl Branch {
    fn init(config: &EncoderConfig, n_classes: usize, id: BranchId, rng: &mut ChaCha8Rng) -> Self {
        let dims = config.layer_dims();
        let last = dims.len() - 1;
        let layers = dims
            .iter()
            .enumerate()
            .map(|(i, &(fan_in, fan_out))| {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let w = (0..fan_in * fan_out)
                    .map(|_| rng.gen_range(-limit..=limit))
                    .collect();
                Layer {
                    weight: Tensor::matrix(fan_in, fan_out, w).unwrap(),
                    // the projection into feature space carries no bias
                    bias: (i != last).then(|| Tensor::zeros(vec![fan_out])),
                }
            })
            .collect();
        let protos = (0..n_classes * config.feature_dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        Branch {
            id,
            layers,
            prototypes: Tensor::matrix(n_classes, config.feature_dim, protos).unwrap(),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.prototypes.cols()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    /// Parameters in canonical order: per layer weight then bias, then prototypes.
    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(&l.weight);
            if let Some(b) = &l.bias {
                out.push(b);
            }
        }
        out.push(&self.prototypes);
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.weight);
            if let Some(b) = &mut l.bias {
                out.push(b);
            }
        }
        out.push(&mut self.prototypes);
        out
    }

    pub fn parameter_names(&self) -> Vec<String> {
        let tag = self.id.tag();
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push(format!("{tag}.layer{i}.weight"));
            if l.bias.is_some() {
                out.push(format!("{tag}.layer{i}.bias"));
            }
        }
        out.push(format!("{tag}.prototypes"));
        out
    }

    /// Records this branch's parameters on `tape`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundBranch {
        let mut params = Vec::new();
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let w = tape.leaf(l.weight.clone(), trainable);
            params.push(w);
            let b = l.bias.as_ref().map(|b| {
                let v = tape.leaf(b.clone(), trainable);
                params.push(v);
                v
            });
            layers.push((w, b));
        }
        let prototypes = tape.leaf(self.prototypes.clone(), trainable);
        params.push(prototypes);
        BoundBranch {
            id: self.id,
            input_dim: self.input_dim(),
            layers,
            prototypes,
            params,
        }
    }

    /// Wraps vars already on a tape (in [`Branch::parameters`] order) as
    /// this branch's parameters.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<BoundBranch> {
        let expected = self.parameters().len();
        if vars.len() != expected {
            return Err(Error::Contract(format!(
                "branch has {expected} parameter tensors, got {} vars",
                vars.len()
            )));
        }
        let mut it = vars.iter().copied();
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let w = it.next().unwrap();
                let b = l.bias.as_ref().map(|_| it.next().unwrap());
                (w, b)
            })
            .collect();
        Ok(BoundBranch {
            id: self.id,
            input_dim: self.input_dim(),
            layers,
            prototypes: it.next().unwrap(),
            params: vars.to_vec(),
        })
    }

    /// Rebuilds a branch structure around replacement parameter values,
    /// given in [`Branch::parameters`] order.
    pub fn with_parameters(&self, values: &[Tensor]) -> Result<Branch> {
        let mut b = self.clone();
        let slots = b.parameters_mut();
        if slots.len() != values.len() {
            return Err(Error::Contract(format!(
                "branch has {} parameter tensors, got {}",
                slots.len(),
                values.len()
            )));
        }
        for (slot, v) in slots.into_iter().zip(values) {
            if slot.shape() != v.shape() {
                return Err(Error::dim("with_parameters", slot.shape(), v.shape()));
            }
            *slot = v.clone();
        }
        Ok(b)
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let z = bound.encode(&mut tape, xv)?;
        Ok(tape.value(z).clone())
    }

    pub fn center_prototype(&self) -> Tensor {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let c = bound.center(&mut tape).expect("prototype matrix is non-empty");
        tape.value(c).clone()
    }

    pub fn similarity_matrix(&self, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let s = bound.similarity(&mut tape, zv)?;
        Ok(tape.value(s).clone())
    }
}

/// A branch whose parameters have been recorded on a tape.
#[derive(Debug, Clone)]
pub struct BoundBranch {
    pub id: BranchId,
    input_dim: usize,
    layers: Vec<(Var, Option<Var>)>,
    pub prototypes: Var,
    params: Vec<Var>,
}

impl BoundBranch {
    /// Parameter vars in [`Branch::parameters`] order.
    pub fn params(&self) -> &[Var] {
        &self.params
    }

    /// `[batch, input_dim] -> [batch, feature_dim]`
    pub fn encode(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(Error::dim("encode", &shape, &[shape.first().copied().unwrap_or(0), self.input_dim]));
        }
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = tape.matmul(h, w)?;
            if let Some(b) = b {
                h = tape.add_row(h, b)?;
            }
            if i != last {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Mean of all prototypes, recomputed from their current values.
    pub fn center(&self, tape: &mut Tape) -> Result<Var> {
        tape.mean_rows(self.prototypes)
    }

    /// `[batch, d] -> [batch, n_classes]`, entry `(i, k) = z_i . p_k`.
    pub fn similarity(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let pt = tape.transpose(self.prototypes)?;
        tape.matmul(z, pt).map_err(|e| match e {
            Error::Dimension { .. } => Error::dim(
                "similarity",
                tape.value(z).shape(),
                tape.value(self.prototypes).shape(),
            ),
            e => e,
        })
    }

    /// Generalized distance, the negated similarity.
    pub fn distance(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let s = self.similarity(tape, z)?;
        Ok(tape.scale(s, -1.0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualBranchModel {
    pub config: EncoderConfig,
    pub n_classes: usize,
    pub seed: u64,
    pub branch_a: Branch,
    pub branch_b: Branch,
}

/// Draws a fresh model. Prototypes are standard normal; encoder weights are
/// uniform in `±sqrt(6 / (fan_in + fan_out))` with zero biases.
pub fn init_model(config: &EncoderConfig, n_classes: usize, seed: u64) -> Result<DualBranchModel> {
    config.validate()?;
    if n_classes < 2 {
        return Err(Error::Config(format!("need at least 2 known classes, got {n_classes}")));
    }
    let mut rng_a = ChaCha8Rng::seed_from_u64(seed);
    let mut rng_b = ChaCha8Rng::seed_from_u64(seed ^ BRANCH_B_SEED_MASK);
    Ok(DualBranchModel {
        config: config.clone(),
        n_classes,
        seed,
        branch_a: Branch::init(config, n_classes, BranchId::A, &mut rng_a),
        branch_b: Branch::init(config, n_classes, BranchId::B, &mut rng_b),
    })
}

impl DualBranchModel {
    pub fn branch(&self, id: BranchId) -> &Branch {
        match id {
            BranchId::A => &self.branch_a,
            BranchId::B => &self.branch_b,
        }
    }

    pub fn branch_mut(&mut self, id: BranchId) -> &mut Branch {
        match id {
            BranchId::A => &mut self.branch_a,
            BranchId::B => &mut self.branch_b,
        }
    }

    pub fn branches(&self) -> [&Branch; 2] {
        [&self.branch_a, &self.branch_b]
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> (BoundBranch, BoundBranch) {
        (self.branch_a.bind(tape, trainable), self.branch_b.bind(tape, trainable))
    }

    pub fn num_parameters(&self) -> usize {
        self.branches()
            .iter()
            .flat_map(|b| b.parameters())
            .map(Tensor::len)
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> EncoderConfig {
        EncoderConfig {
            input_dim: 5,
            hidden_dims: vec![7],
            feature_dim: 4,
            activation: Activation::Relu,
        }
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let a = init_model(&cfg(), 3, 11).unwrap();
        let b = init_model(&cfg(), 3, 11).unwrap();
        assert_eq!(a, b);
        let c = init_model(&cfg(), 3, 12).unwrap();
        assert!(a.branch_a.prototypes.max_abs_diff(&c.branch_a.prototypes) > 0.0);
    }

    #[test]
    fn branches_share_shape_but_not_weights() {
        let m = init_model(&cfg(), 3, 0).unwrap();
        let (pa, pb) = (m.branch_a.parameters(), m.branch_b.parameters());
        assert_eq!(pa.len(), pb.len());
        let mut max_diff: f64 = 0.0;
        for (x, y) in pa.iter().zip(&pb) {
            assert_eq!(x.shape(), y.shape());
            max_diff = max_diff.max(x.max_abs_diff(y));
        }
        assert!(max_diff > 0.0);
    }

    #[test]
    fn wide_config_prototype_shape() {
        let m = init_model(&EncoderConfig::wide(24), 15, 3).unwrap();
        assert_eq!(m.branch_a.prototypes.shape(), &[15, 128]);
        assert_eq!(m.branch_b.prototypes.shape(), &[15, 128]);
        let x = Tensor::zeros(vec![256, 24]);
        assert_eq!(m.branch_a.encode(&x).unwrap().shape(), &[256, 128]);
    }

    #[test]
    fn rejects_single_class() {
        assert!(matches!(init_model(&cfg(), 1, 0), Err(Error::Config(_))));
        let mut bad = cfg();
        bad.feature_dim = 0;
        assert!(matches!(init_model(&bad, 3, 0), Err(Error::Config(_))));
    }

    #[test]
    fn linear_encoder_is_xw() {
        let cfg = EncoderConfig {
            input_dim: 3,
            hidden_dims: vec![],
            feature_dim: 3,
            activation: Activation::Relu,
        };
        let mut m = init_model(&cfg, 2, 0).unwrap();
        assert!(m.branch_a.layers[0].bias.is_none());
        m.branch_a.layers[0].weight = Tensor::identity(3);
        let x = Tensor::from_rows(&[vec![1.0, -2.0, 0.5], vec![0.0, 3.0, -1.0]]).unwrap();
        assert_eq!(m.branch_a.encode(&x).unwrap(), x);
    }

    #[test]
    fn encode_is_batch_independent() {
        let m = init_model(&cfg(), 3, 5).unwrap();
        let row = vec![0.3, -1.2, 0.8, 2.0, -0.1];
        let other = vec![1.0, 1.0, -1.0, 0.0, 0.5];
        let single = m.branch_a.encode(&Tensor::from_rows(std::slice::from_ref(&row)).unwrap()).unwrap();
        let pair = m.branch_a.encode(&Tensor::from_rows(&[other, row]).unwrap()).unwrap();
        for (a, b) in single.row(0).iter().zip(pair.row(1)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn encode_rejects_wrong_width() {
        let m = init_model(&cfg(), 3, 5).unwrap();
        let x = Tensor::zeros(vec![2, 4]);
        assert!(matches!(m.branch_a.encode(&x), Err(Error::Dimension { .. })));
    }

    fn with_prototypes(rows: &[Vec<f64>]) -> Branch {
        let p = Tensor::from_rows(rows).unwrap();
        let cfg = EncoderConfig {
            input_dim: 2,
            hidden_dims: vec![],
            feature_dim: p.cols(),
            activation: Activation::Relu,
        };
        let mut m = init_model(&cfg, p.rows(), 0).unwrap();
        m.branch_a.prototypes = p;
        m.branch_a
    }

    #[test]
    fn center_prototype_examples() {
        let b = with_prototypes(&[vec![1.5, -2.0], vec![-1.5, 2.0]]);
        assert_eq!(b.center_prototype().data(), &[0.0, 0.0]);
        let b = with_prototypes(&[vec![0.4, 2.0], vec![0.4, 2.0], vec![0.4, 2.0]]);
        let c = b.center_prototype();
        assert!((c.data()[0] - 0.4).abs() < 1e-15 && (c.data()[1] - 2.0).abs() < 1e-15);
        let mut b = with_prototypes(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 2.0]]);
        assert_eq!(b.center_prototype().data(), &[1.0, 1.0]);
        // no stale caching
        b.prototypes.data_mut()[0] = 4.0;
        assert_eq!(b.center_prototype().data(), &[2.0, 1.0]);
    }

    #[test]
    fn similarity_examples() {
        let b = with_prototypes(&[vec![3.0, 4.0], vec![-1.0, 0.0]]);
        let z = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert_eq!(b.similarity_matrix(&z).unwrap().data(), &[11.0, -1.0]);

        let b = with_prototypes(&[vec![0.0, 1.0], vec![0.0, -2.0]]);
        let z = Tensor::from_rows(&[vec![5.0, 0.0]]).unwrap();
        assert_eq!(b.similarity_matrix(&z).unwrap().data(), &[0.0, 0.0]);

        let b = with_prototypes(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let z = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
        assert_eq!(b.similarity_matrix(&z).unwrap().data(), &[0.0, 1.0]);

        let z = Tensor::from_rows(&[vec![0.0, 1.0, 2.0]]).unwrap();
        assert!(matches!(b.similarity_matrix(&z), Err(Error::Dimension { .. })));
    }

    #[test]
    fn distance_is_negated_similarity() {
        let m = init_model(&cfg(), 3, 9).unwrap();
        let mut tape = Tape::new();
        let (a, _) = m.bind(&mut tape, false);
        let z = tape.constant(Tensor::from_rows(&[vec![0.1, -0.7, 2.0, 0.3]]).unwrap());
        let s = a.similarity(&mut tape, z).unwrap();
        let d = a.distance(&mut tape, z).unwrap();
        for (x, y) in tape.value(s).data().iter().zip(tape.value(d).data()) {
            assert_eq!(*x, -*y);
        }
    }
}
