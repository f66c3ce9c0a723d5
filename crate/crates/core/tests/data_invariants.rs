use std::collections::{BTreeSet, HashMap};

use orthoproto::data::{
    generate_synthetic, make_split_with, recordings_to_dataset, sliding_window, LabeledDataset, OpenSetSplit,
    Provenance, SignalRecording, SplitOptions, SyntheticConfig,
};
use orthoproto::Tensor;
use proptest::prelude::*;

/// Partition checks written against the raw labels, without `validate`.
fn check_partition(ds: &LabeledDataset, s: &OpenSetSplit, with_bg_test: bool) -> Result<(), TestCaseError> {
    let lists = [&s.train_known, &s.test_known, &s.train_background, &s.test_unknown];
    let mut count = vec![0usize; ds.len()];
    for l in lists {
        for &i in l {
            count[i] += 1;
        }
    }
    prop_assert!(count.iter().all(|&c| c == 1), "every sample in exactly one list");

    let known: BTreeSet<usize> = s.known_class_ids.iter().copied().collect();
    let unknown: BTreeSet<usize> = s.unknown_class_ids.iter().copied().collect();
    prop_assert!(known.is_disjoint(&unknown));
    prop_assert!(!known.contains(&s.background_class_id) && !unknown.contains(&s.background_class_id));
    prop_assert_eq!(known.len() + unknown.len() + 1, ds.classes().len());

    for &i in s.train_known.iter().chain(&s.test_known) {
        prop_assert!(known.contains(&ds.labels[i]));
    }
    for &i in &s.train_background {
        prop_assert_eq!(ds.labels[i], s.background_class_id);
    }
    for &i in &s.test_unknown {
        let l = ds.labels[i];
        prop_assert!(unknown.contains(&l) || (with_bg_test && l == s.background_class_id));
    }
    for &c in &known {
        let tr = s.train_known.iter().filter(|&&i| ds.labels[i] == c).count();
        let te = s.test_known.iter().filter(|&&i| ds.labels[i] == c).count();
        prop_assert!(tr >= 1 && te >= 1, "class {} has {} train, {} test", c, tr, te);
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn synthetic_split_partitions(
        total in 5usize..12,
        per in 4usize..25,
        frac in 0.05f64..0.9,
        data_seed in any::<u64>(),
        split_seed in any::<u64>(),
        bg_test in any::<bool>(),
    ) {
        let n_unknown_style = 1 + (data_seed as usize % (total - 3));
        let ds = generate_synthetic(&SyntheticConfig {
            n_total_classes: total,
            raw_dim: 3,
            samples_per_class: per,
            cluster_spread: 0.5,
            pseudo_similarity_mix: 0.7,
            n_unknown_style,
            seed: data_seed,
        })
        .unwrap();
        let n_known = 2 + (split_seed as usize % (total - 3));
        let opts = SplitOptions { include_background_in_test: bg_test };
        let s = make_split_with(&ds, n_known, frac, split_seed, &opts).unwrap();
        check_partition(&ds, &s, bg_test)?;
        prop_assert_eq!(s.known_class_ids.len(), n_known);
        prop_assert_eq!(&s, &make_split_with(&ds, n_known, frac, split_seed, &opts).unwrap());
    }

    #[test]
    fn grouped_split_keeps_groups_whole(
        n_classes in 4usize..8,
        groups_per_class in 2usize..5,
        per_group in 1usize..6,
        seed in any::<u64>(),
    ) {
        let mut labels = Vec::new();
        let mut groups = Vec::new();
        for c in 0..n_classes {
            for g in 0..groups_per_class {
                for _ in 0..per_group {
                    labels.push(c);
                    groups.push((c * 100 + g) as u64);
                }
            }
        }
        let n = labels.len();
        let mut ds = LabeledDataset::new(Tensor::matrix(n, 1, vec![0.0; n]).unwrap(), labels, Provenance::InMemory).unwrap();
        ds.groups = Some(groups.clone());
        let s = make_split_with(&ds, 2, 0.4, seed, &SplitOptions::default()).unwrap();
        check_partition(&ds, &s, false)?;
        let mut side: HashMap<u64, bool> = HashMap::new();
        for (list, is_test) in [(&s.train_known, false), (&s.test_known, true)] {
            for &i in list {
                let prev = side.insert(groups[i], is_test);
                prop_assert!(prev.is_none() || prev == Some(is_test), "group {} straddles", groups[i]);
            }
        }
    }

    #[test]
    fn window_counts(
        channels in 1usize..4,
        length in 1usize..200,
        win_frac in 0.0f64..1.0,
        stride in 1usize..40,
    ) {
        let win = 1 + ((length - 1) as f64 * win_frac) as usize;
        let values: Vec<f64> = (0..channels * length).map(|v| v as f64).collect();
        let rec = SignalRecording::new(Tensor::matrix(channels, length, values).unwrap(), 0, 0, 0).unwrap();
        let w = sliding_window(&rec, win, stride).unwrap();
        prop_assert_eq!(w.len(), (length - win) / stride + 1);
        for (j, t) in w.iter().enumerate() {
            prop_assert_eq!(t.shape(), &[channels, win][..]);
            for c in 0..channels {
                prop_assert_eq!(t.at(c, 0), (c * length + j * stride) as f64);
                prop_assert_eq!(t.at(c, win - 1), (c * length + j * stride + win - 1) as f64);
            }
        }
    }

    #[test]
    fn oversized_window_rejected(length in 1usize..50, extra in 1usize..10) {
        let rec = SignalRecording::new(Tensor::matrix(1, length, vec![0.0; length]).unwrap(), 0, 0, 0).unwrap();
        prop_assert!(sliding_window(&rec, length + extra, 1).is_err());
    }
}

#[test]
fn windows_become_rows_grouped_by_trial() {
    let rec = |label, trial, subject| {
        SignalRecording::new(Tensor::matrix(2, 10, (0..20).map(f64::from).collect()).unwrap(), label, trial, subject).unwrap()
    };
    let ds = recordings_to_dataset(&[rec(0, 1, 1), rec(1, 2, 1), rec(1, 1, 2)], 4, 3, "mem").unwrap();
    // (10 - 4) / 3 + 1 = 3 windows per recording
    assert_eq!(ds.len(), 9);
    assert_eq!(ds.input_dim(), 8);
    let g = ds.groups.as_ref().unwrap();
    assert_eq!(g.iter().collect::<BTreeSet<_>>().len(), 3);
    assert_eq!(ds.labels, vec![0, 0, 0, 1, 1, 1, 1, 1, 1]);
}
