use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::LabeledDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitOptions {
    /// Holds out `test_fraction` of the background class as extra test
    /// unknowns, for sensitivity analysis. Off by default.
    pub include_background_in_test: bool,
}

/// Class roles and sample index lists for one open-set experiment.
///
/// Known class `known_class_ids[k]` is trained as label `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenSetSplit {
    pub known_class_ids: Vec<usize>,
    pub background_class_id: usize,
    pub unknown_class_ids: Vec<usize>,
    pub train_known: Vec<usize>,
    pub test_known: Vec<usize>,
    pub train_background: Vec<usize>,
    pub test_unknown: Vec<usize>,
    pub seed: u64,
    pub test_fraction: f64,
    #[serde(default)]
    pub options: SplitOptions,
}

impl OpenSetSplit {
    pub fn n_known(&self) -> usize {
        self.known_class_ids.len()
    }

    /// Position of a dataset label among the known classes.
    pub fn remap(&self, label: usize) -> Option<usize> {
        self.known_class_ids.iter().position(|&c| c == label)
    }

    /// Checks the partition invariants against `ds`.
    pub fn validate(&self, ds: &LabeledDataset) -> Result<()> {
        let fail = |m: String| Err(Error::Data(format!("invalid split: {m}")));
        let known: BTreeSet<usize> = self.known_class_ids.iter().copied().collect();
        let unknown: BTreeSet<usize> = self.unknown_class_ids.iter().copied().collect();
        if known.len() != self.known_class_ids.len() || unknown.len() != self.unknown_class_ids.len() {
            return fail("repeated class id".into());
        }
        if known.contains(&self.background_class_id) || unknown.contains(&self.background_class_id) {
            return fail(format!("background class {} reused", self.background_class_id));
        }
        if !known.is_disjoint(&unknown) {
            return fail("known and unknown class sets overlap".into());
        }
        let mut seen = vec![false; ds.len()];
        let lists = [
            ("train_known", &self.train_known),
            ("test_known", &self.test_known),
            ("train_background", &self.train_background),
            ("test_unknown", &self.test_unknown),
        ];
        for (name, list) in lists {
            for &i in list {
                if i >= ds.len() {
                    return fail(format!("{name} index {i} out of range"));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return fail(format!("sample {i} appears twice"));
                }
                let l = ds.labels[i];
                let ok = match name {
                    "train_known" | "test_known" => known.contains(&l),
                    "train_background" => l == self.background_class_id,
                    _ => {
                        unknown.contains(&l)
                            || (self.options.include_background_in_test && l == self.background_class_id)
                    }
                };
                if !ok {
                    return fail(format!("sample {i} with label {l} does not belong in {name}"));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn test_count(n: usize, fraction: f64) -> usize {
    if fraction <= 0.0 || n < 2 {
        return 0;
    }
    ((n as f64 * fraction).round() as usize).clamp(1, n - 1)
}

/// Splits `idx` (all one class) into (train, test). With groups, whole
/// groups move together as long as there are at least two of them.
fn split_class(idx: &[usize], groups: Option<&[u64]>, fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut keys: Vec<u64> = match groups {
        Some(g) => {
            let mut k: Vec<u64> = idx.iter().map(|&i| g[i]).collect();
            k.sort_unstable();
            k.dedup();
            k
        }
        None => Vec::new(),
    };
    if keys.len() >= 2 {
        let g = groups.unwrap();
        keys.shuffle(rng);
        let held: BTreeSet<u64> = keys[..test_count(keys.len(), fraction)].iter().copied().collect();
        let (test, train): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| held.contains(&g[i]));
        return (train, test);
    }
    let mut order = idx.to_vec();
    order.shuffle(rng);
    let n_test = test_count(order.len(), fraction);
    let mut test = order[..n_test].to_vec();
    let mut train = order[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    (train, test)
}

pub fn make_split(ds: &LabeledDataset, n_known: usize, test_fraction: f64, seed: u64) -> Result<OpenSetSplit> {
    make_split_with(ds, n_known, test_fraction, seed, &SplitOptions::default())
}

/// Draws known classes (from the independent classes of a synthetic
/// dataset, otherwise from all), one background class from the rest, and
/// treats everything left as unknown.
pub fn make_split_with(
    ds: &LabeledDataset,
    n_known: usize,
    test_fraction: f64,
    seed: u64,
    opts: &SplitOptions,
) -> Result<OpenSetSplit> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Config(format!("test_fraction {test_fraction} outside [0, 1)")));
    }
    if n_known < 2 {
        return Err(Error::Config(format!("need at least 2 known classes, got {n_known}")));
    }
    let classes = ds.classes();
    if classes.len() < n_known + 2 {
        return Err(Error::Data(format!(
            "{} classes present, need at least {} for {n_known} known, background and unknown",
            classes.len(),
            n_known + 2
        )));
    }
    for &c in &classes {
        let n = ds.indices_of(c).len();
        if n < 2 {
            return Err(Error::Data(format!("class {c} has {n} sample(s), need at least 2")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool: Vec<usize> = match ds.known_style_classes() {
        Some(k) => {
            let k: Vec<usize> = k.iter().copied().filter(|c| classes.contains(c)).collect();
            if k.len() >= n_known {
                k
            } else {
                classes.clone()
            }
        }
        None => classes.clone(),
    };
    let mut known: Vec<usize> = pool.choose_multiple(&mut rng, n_known).copied().collect();
    known.sort_unstable();
    let rest: Vec<usize> = classes.iter().copied().filter(|c| !known.contains(c)).collect();
    let background = *rest.choose(&mut rng).expect("at least two classes remain");
    let unknown: Vec<usize> = rest.into_iter().filter(|&c| c != background).collect();

    let groups = ds.groups.as_deref();
    let (mut train_known, mut test_known) = (Vec::new(), Vec::new());
    for &c in &known {
        let (tr, te) = split_class(&ds.indices_of(c), groups, test_fraction, &mut rng);
        train_known.extend(tr);
        test_known.extend(te);
    }
    let mut train_background = ds.indices_of(background);
    let mut test_unknown: Vec<usize> = unknown.iter().flat_map(|&c| ds.indices_of(c)).collect();
    if opts.include_background_in_test {
        let (tr, te) = split_class(&train_background, groups, test_fraction, &mut rng);
        train_background = tr;
        test_unknown.extend(te);
    }
    for v in [&mut train_known, &mut test_known, &mut train_background, &mut test_unknown] {
        v.sort_unstable();
    }
    let split = OpenSetSplit {
        known_class_ids: known,
        background_class_id: background,
        unknown_class_ids: unknown,
        train_known,
        test_known,
        train_background,
        test_unknown,
        seed,
        test_fraction,
        options: opts.clone(),
    };
    split.validate(ds)?;
    Ok(split)
}
