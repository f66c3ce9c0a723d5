//! Datasets: the synthetic open-set benchmark, windowed signal ingestion,
//! and the known / background / unknown class split.

mod signal;
mod split;

pub use signal::{
    ingest_csv, recordings_to_dataset, sliding_window, Ingested, Schema, SignalRecording, DEFAULT_STRIDE,
    DEFAULT_WINDOW,
};
pub use split::{make_split, make_split_with, OpenSetSplit, SplitOptions};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndnum::Tensor;

/// Where a dataset came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Synthetic {
        config: SyntheticConfig,
        /// Classes built from independent means. The remaining classes are
        /// pseudo-similar to pairs of these.
        known_style_classes: Vec<usize>,
    },
    VectorCsv {
        path: String,
    },
    SignalCsv {
        path: String,
        window: usize,
        stride: usize,
    },
    InMemory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    /// `[n, input_dim]`
    pub samples: Tensor,
    pub labels: Vec<usize>,
    pub class_names: Option<Vec<String>>,
    /// Optional grouping key per sample (a recording trial). Splits keep a
    /// group on one side.
    pub groups: Option<Vec<u64>>,
    pub provenance: Provenance,
}

impl LabeledDataset {
    pub fn new(samples: Tensor, labels: Vec<usize>, provenance: Provenance) -> Result<Self> {
        let ds = LabeledDataset {
            samples,
            labels,
            class_names: None,
            groups: None,
            provenance,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.shape().len() != 2 {
            return Err(Error::Data(format!("samples must be a matrix, got shape {:?}", self.samples.shape())));
        }
        if self.samples.rows() != self.labels.len() {
            return Err(Error::Data(format!(
                "{} samples but {} labels",
                self.samples.rows(),
                self.labels.len()
            )));
        }
        if let Some(g) = &self.groups {
            if g.len() != self.labels.len() {
                return Err(Error::Data("group list length differs from label count".into()));
            }
        }
        if let Some(names) = &self.class_names {
            if let Some(&l) = self.labels.iter().find(|&&l| l >= names.len()) {
                return Err(Error::Data(format!("label {l} has no class name")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.samples.cols()
    }

    /// Distinct labels present, ascending.
    pub fn classes(&self) -> Vec<usize> {
        let mut c = self.labels.clone();
        c.sort_unstable();
        c.dedup();
        c
    }

    /// Indices of samples with label `class`, ascending.
    pub fn indices_of(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    /// Gathers the given rows into a new matrix.
    pub fn rows(&self, idx: &[usize]) -> Tensor {
        let d = self.input_dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.samples.row(i));
        }
        Tensor::new(vec![idx.len(), d], data).expect("row gather keeps dimensions")
    }

    /// The classes a split should draw known ids from, if the source
    /// distinguishes them.
    pub fn known_style_classes(&self) -> Option<&[usize]> {
        match &self.provenance {
            Provenance::Synthetic {
                known_style_classes, ..
            } => Some(known_style_classes),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_total_classes: usize,
    pub raw_dim: usize,
    pub samples_per_class: usize,
    pub cluster_spread: f64,
    pub pseudo_similarity_mix: f64,
    /// How many classes (the highest class ids) are built as pseudo-similar
    /// blends rather than from independent means.
    pub n_unknown_style: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig::benchmark(0)
    }
}

impl SyntheticConfig {
    /// 8 known, 1 background and 4 unknown classes. The background and
    /// unknown classes are all pseudo-similar.
    pub fn benchmark(seed: u64) -> Self {
        SyntheticConfig {
            n_total_classes: 13,
            raw_dim: 24,
            samples_per_class: 200,
            cluster_spread: 1.0,
            pseudo_similarity_mix: 0.7,
            n_unknown_style: 5,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_total_classes < 4 {
            return fail(format!("n_total_classes must be at least 4, got {}", self.n_total_classes));
        }
        if self.raw_dim == 0 || self.samples_per_class == 0 {
            return fail("raw_dim and samples_per_class must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.pseudo_similarity_mix) {
            return fail(format!("pseudo_similarity_mix {} outside [0, 1]", self.pseudo_similarity_mix));
        }
        if !(self.cluster_spread >= 0.0 && self.cluster_spread.is_finite()) {
            return fail(format!("cluster_spread {} must be finite and non-negative", self.cluster_spread));
        }
        if self.n_unknown_style + 2 > self.n_total_classes {
            return fail("pseudo-similar classes need at least two independent classes to blend".into());
        }
        Ok(())
    }

    pub fn known_style_classes(&self) -> Vec<usize> {
        (0..self.n_total_classes - self.n_unknown_style).collect()
    }
}

/// How each pseudo-similar class mean was built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Blend {
    pub class: usize,
    pub parents: (usize, usize),
    /// Weight on the first parent.
    pub t: f64,
}

/// Class means plus the blend recipe for the pseudo-similar classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMeans {
    pub means: Tensor,
    pub blends: Vec<Blend>,
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Independent means are standard normal per coordinate. A blended mean is
/// `mix * (t m_a + (1 - t) m_b) + (1 - mix) * novel` with `t` uniform in
/// `[0.25, 0.75]`.
pub fn class_means(cfg: &SyntheticConfig) -> Result<ClassMeans> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.raw_dim;
    let n_indep = cfg.n_total_classes - cfg.n_unknown_style;
    let mut means = Vec::with_capacity(cfg.n_total_classes * d);
    for _ in 0..n_indep {
        means.extend(normal_vec(&mut rng, d));
    }
    let mut blends = Vec::new();
    let mix = cfg.pseudo_similarity_mix;
    for class in n_indep..cfg.n_total_classes {
        let a = rng.gen_range(0..n_indep);
        let mut b = rng.gen_range(0..n_indep - 1);
        if b >= a {
            b += 1;
        }
        let t = rng.gen_range(0.25..=0.75);
        let novel = normal_vec(&mut rng, d);
        for j in 0..d {
            let seg = t * means[a * d + j] + (1.0 - t) * means[b * d + j];
            means.push(mix * seg + (1.0 - mix) * novel[j]);
        }
        blends.push(Blend {
            class,
            parents: (a, b),
            t,
        });
    }
    Ok(ClassMeans {
        means: Tensor::matrix(cfg.n_total_classes, d, means)?,
        blends,
    })
}

/// Gaussian clusters around [`class_means`]; samples are grouped by class.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<LabeledDataset> {
    let cm = class_means(cfg)?;
    // separate stream so the means do not depend on sample counts
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let d = cfg.raw_dim;
    let n = cfg.n_total_classes * cfg.samples_per_class;
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for c in 0..cfg.n_total_classes {
        let mean = cm.means.row(c);
        for _ in 0..cfg.samples_per_class {
            data.extend(mean.iter().map(|m| m + cfg.cluster_spread * rng.sample::<f64, _>(StandardNormal)));
            labels.push(c);
        }
    }
    LabeledDataset::new(
        Tensor::matrix(n, d, data)?,
        labels,
        Provenance::Synthetic {
            config: cfg.clone(),
            known_style_classes: cfg.known_style_classes(),
        },
    )
}

/// Writes the vector CSV schema `label,f1..fd`.
pub fn write_vector_csv<W: std::io::Write>(w: W, ds: &LabeledDataset) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["label".to_string()];
    header.extend((1..=ds.input_dim()).map(|j| format!("f{j}")));
    out.write_record(&header)?;
    for i in 0..ds.len() {
        let mut rec = vec![ds.labels[i].to_string()];
        rec.extend(ds.samples.row(i).iter().map(|v| v.to_string()));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(mix: f64, spread: f64, seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            n_total_classes: 6,
            raw_dim: 8,
            samples_per_class: 40,
            cluster_spread: spread,
            pseudo_similarity_mix: mix,
            n_unknown_style: 3,
            seed,
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_synthetic(&cfg(0.5, 0.3, 4)).unwrap();
        let b = generate_synthetic(&cfg(0.5, 0.3, 4)).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&cfg(0.5, 0.3, 5)).unwrap();
        assert_ne!(a.samples, c.samples);
        assert_eq!(a.classes(), (0..6).collect::<Vec<_>>());
    }

    fn distance_to_segment(x: &[f64], a: &[f64], b: &[f64]) -> f64 {
        let ab: Vec<f64> = b.iter().zip(a).map(|(b, a)| b - a).collect();
        let ax: Vec<f64> = x.iter().zip(a).map(|(x, a)| x - a).collect();
        let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(p, q)| p * q).sum::<f64>();
        let t = (dot(&ax, &ab) / dot(&ab, &ab)).clamp(0.0, 1.0);
        ax.iter().zip(&ab).map(|(p, q)| (p - t * q).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn full_mix_lies_on_segments() {
        let c = cfg(1.0, 0.0, 9);
        let ds = generate_synthetic(&c).unwrap();
        let cm = class_means(&c).unwrap();
        for bl in &cm.blends {
            let (a, b) = bl.parents;
            for i in ds.indices_of(bl.class) {
                let dist = distance_to_segment(ds.samples.row(i), cm.means.row(a), cm.means.row(b));
                assert!(dist < 1e-9, "{dist}");
            }
        }
    }

    #[test]
    fn zero_mix_is_uncorrelated_with_parents() {
        // average correlation between blended means and their parents
        let mut total = 0.0;
        let mut count = 0.0;
        for seed in 0..200 {
            let cm = class_means(&cfg(0.0, 0.1, seed)).unwrap();
            for bl in &cm.blends {
                let u = cm.means.row(bl.class);
                let v = cm.means.row(bl.parents.0);
                let dot: f64 = u.iter().zip(v).map(|(p, q)| p * q).sum();
                total += dot / (u.iter().map(|p| p * p).sum::<f64>() * v.iter().map(|q| q * q).sum::<f64>()).sqrt();
                count += 1.0;
            }
        }
        assert!((total / count).abs() < 0.05, "{}", total / count);
    }

    #[test]
    fn class_means_converge() {
        for seed in [1, 2, 3] {
            let c = SyntheticConfig {
                samples_per_class: 400,
                ..cfg(0.7, 0.5, seed)
            };
            let ds = generate_synthetic(&c).unwrap();
            let cm = class_means(&c).unwrap();
            let bound = 3.0 * c.cluster_spread / (c.samples_per_class as f64).sqrt();
            let mut violations = 0;
            let mut checks = 0;
            for class in 0..c.n_total_classes {
                let idx = ds.indices_of(class);
                for j in 0..c.raw_dim {
                    let m = idx.iter().map(|&i| ds.samples.at(i, j)).sum::<f64>() / idx.len() as f64;
                    checks += 1;
                    if (m - cm.means.at(class, j)).abs() > bound {
                        violations += 1;
                    }
                }
            }
            // a 3-sigma band misses about 0.27% of coordinates
            assert!(violations * 100 <= checks, "{violations}/{checks}");
        }
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(generate_synthetic(&SyntheticConfig { n_total_classes: 3, n_unknown_style: 0, ..cfg(0.5, 0.1, 0) }).is_err());
        assert!(generate_synthetic(&cfg(1.5, 0.1, 0)).is_err());
        assert!(generate_synthetic(&SyntheticConfig { n_unknown_style: 5, ..cfg(0.5, 0.1, 0) }).is_err());
    }

    #[test]
    fn vector_csv_round_trip() {
        let ds = generate_synthetic(&cfg(0.5, 0.3, 4)).unwrap();
        let mut buf = Vec::new();
        write_vector_csv(&mut buf, &ds).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, &buf).unwrap();
        match ingest_csv(&p, None).unwrap() {
            Ingested::Vectors(back) => {
                assert_eq!(back.samples, ds.samples);
                assert_eq!(back.labels, ds.labels);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
