use std::collections::BTreeSet;

use chronorag_core::coherer::{mmd2, Bandwidth, Estimator, LossConfig};
use chronorag_core::hhtr::{linear_scan_oracle, retrieve_global, retrieve_topk, Query};
use chronorag_core::index::{SeriesTree, TreeConfig};
use chronorag_core::msil::{attend, extract_patterns, raw_product, FusionParams};
use chronorag_core::series::{interpolate_missing, SeriesWindow};
use chronorag_core::storage::{read_store, write_store, StoreRecord};
use proptest::prelude::*;

const DOMAINS: [&str; 3] = ["Energy", "Traffic", "Web"];

fn corpus(dim: usize, max: usize) -> impl Strategy<Value = Vec<SeriesWindow>> {
    prop::collection::vec((0..DOMAINS.len(), prop::collection::vec(-3.0f64..3.0, dim)), 1..max).prop_map(|rows| {
        rows.into_iter()
            .enumerate()
            .map(|(i, (d, v))| SeriesWindow::new(format!("s{i}"), 0, 0, DOMAINS[d], v))
            .collect()
    })
}

fn ids(tree: &SeriesTree) -> Vec<String> {
    let mut out: Vec<String> = tree
        .clusters()
        .flat_map(|(_, c)| c.members.iter().map(|&m| tree.window(m).id.clone()))
        .collect();
    out.sort();
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn store_round_trip(rows in prop::collection::vec(
        ("[A-Za-z]{1,8}", prop::collection::vec(any::<f64>().prop_filter("finite", |x| x.is_finite()), 1..20)),
        1..12,
    )) {
        let records: Vec<StoreRecord> = rows
            .into_iter()
            .enumerate()
            .map(|(i, (domain, target))| StoreRecord::new(domain, format!("item{i}"), "2020-01-01 00:00:00", "H", target))
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.crb.jsonl");
        write_store(&records, &path).unwrap();
        let back = read_store(&path).unwrap();
        prop_assert_eq!(back.len(), records.len());
        for (a, b) in records.iter().zip(&back) {
            prop_assert_eq!(a, b);
            let bits_a: Vec<u64> = a.target.iter().map(|x| x.to_bits()).collect();
            let bits_b: Vec<u64> = b.target.iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn interpolation_idempotent_and_faithful(raw in prop::collection::vec(prop::option::of(-100.0f64..100.0), 1..40)) {
        prop_assume!(raw.iter().any(Option::is_some));
        let filled = interpolate_missing(&raw).unwrap();
        for (r, f) in raw.iter().zip(&filled) {
            if let Some(v) = r {
                prop_assert_eq!(v.to_bits(), f.to_bits());
            }
        }
        let again = interpolate_missing(&filled.iter().copied().map(Some).collect::<Vec<_>>()).unwrap();
        prop_assert_eq!(again, filled);
    }

    #[test]
    fn tree_invariants_survive_inserts(
        initial in corpus(4, 60),
        extra in corpus(4, 80),
        cap in 2usize..9,
        seed in any::<u64>(),
    ) {
        let config = TreeConfig { cap, seed, ..TreeConfig::default() };
        let mut tree = SeriesTree::build(initial.clone(), config).unwrap();
        prop_assert_eq!(tree.check_invariants(), Ok(()));
        let mut expected: Vec<String> = initial.iter().map(|w| w.id.clone()).collect();
        for (i, mut w) in extra.into_iter().enumerate() {
            w = SeriesWindow::new(format!("x{i}"), 0, 0, w.domain, w.values);
            expected.push(w.id.clone());
            tree.insert(w).unwrap();
            prop_assert_eq!(tree.check_invariants(), Ok(()));
        }
        expected.sort();
        prop_assert_eq!(ids(&tree), expected);
    }

    #[test]
    fn build_is_deterministic(windows in corpus(3, 80), cap in 2usize..12, seed in any::<u64>()) {
        let config = TreeConfig { cap, seed, ..TreeConfig::default() };
        let a = SeriesTree::build(windows.clone(), config).unwrap();
        let b = SeriesTree::build(windows, config).unwrap();
        prop_assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn full_probing_matches_oracle(
        windows in corpus(5, 120),
        target in prop::collection::vec(-3.0f64..3.0, 5),
        k in 1usize..10,
        cap in 2usize..16,
    ) {
        let tree = SeriesTree::build(windows, TreeConfig { cap, ..TreeConfig::default() }).unwrap();
        let q = Query::new(target).with_k(k).with_probes(tree.cluster_count());
        let found: BTreeSet<String> = retrieve_global(&q, &tree).unwrap().ids().into_iter().map(String::from).collect();
        let exact: BTreeSet<String> = linear_scan_oracle(&q, tree.windows()).unwrap().ids().into_iter().map(String::from).collect();
        prop_assert_eq!(found, exact);
    }

    #[test]
    fn hits_sorted_and_unique(
        windows in corpus(4, 100),
        target in prop::collection::vec(-3.0f64..3.0, 4),
        k in 1usize..12,
        rho in 0.0f64..=1.0,
        probes in 1usize..4,
        domain in 0..DOMAINS.len(),
    ) {
        let tree = SeriesTree::build(windows, TreeConfig { cap: 6, ..TreeConfig::default() }).unwrap();
        let q = Query::new(target).with_domain(DOMAINS[domain]).with_k(k).with_rho(rho).with_probes(probes);
        let hits = retrieve_topk(&q, &tree).unwrap().hits;
        prop_assert!(hits.len() <= k);
        prop_assert!(hits.windows(2).all(|p| p[0].score >= p[1].score));
        let unique: BTreeSet<&str> = hits.iter().map(|h| h.window_id.as_str()).collect();
        prop_assert_eq!(unique.len(), hits.len());
    }

    #[test]
    fn patterns_permutation_invariant(
        series in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 6), 1..8),
        shift in 0usize..8,
        seed in any::<u64>(),
    ) {
        let params = FusionParams::init(4, 5, seed);
        let a = extract_patterns(&series, &params).unwrap();
        let mut rotated = series.clone();
        rotated.rotate_left(shift % series.len());
        rotated.reverse();
        let b = extract_patterns(&rotated, &params).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&a.p_int), bits(&b.p_int));
        prop_assert_eq!(bits(&a.p_avg), bits(&b.p_avg));
        prop_assert_eq!(bits(&a.raw_product), bits(&b.raw_product));
        prop_assert_eq!(bits(&a.raw_mean), bits(&b.raw_mean));
    }

    #[test]
    fn product_unit_norm(series in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 6), 1..6)) {
        let p = raw_product(&series).unwrap();
        let norm = p.iter().map(|x| x * x).sum::<f64>().sqrt();
        if p.iter().all(|&x| x == 0.0) {
            prop_assert_eq!(norm, 0.0);
        } else {
            prop_assert!((norm - 1.0).abs() <= 1e-9, "norm {}", norm);
        }
    }

    #[test]
    fn attention_rows_stochastic(
        t in prop::collection::vec(-5.0f64..5.0, 1..12),
        seed in any::<u64>(),
    ) {
        let n = t.len();
        let p_avg: Vec<f64> = t.iter().map(|x| x * 0.5 - 1.0).collect();
        let p_int: Vec<f64> = t.iter().rev().copied().collect();
        let att = attend(&t, &p_avg, &p_int, &FusionParams::init(3, 4, seed)).unwrap();
        for r in 0..n {
            let s: f64 = att.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
            prop_assert!(att.row(r).iter().all(|&w| w >= 0.0));
        }
    }

    #[test]
    fn mmd_axioms(
        x in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 2..10),
        y in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 2..10),
        fixed in prop::option::of(0.1f64..5.0),
    ) {
        let bandwidth = fixed.map_or(Bandwidth::MedianHeuristic, Bandwidth::Fixed);
        let biased = LossConfig { bandwidth, estimator: Estimator::Biased, ..LossConfig::default() };
        let xy = mmd2(&x, &y, &biased).unwrap();
        prop_assert!(xy >= -1e-12);
        prop_assert_eq!(xy.to_bits(), mmd2(&y, &x, &biased).unwrap().to_bits());
        prop_assert!(mmd2(&x, &x, &biased).unwrap() <= 1e-12);
        let unbiased = LossConfig { estimator: Estimator::Unbiased, ..biased };
        let u = mmd2(&x, &y, &unbiased).unwrap();
        prop_assert_eq!(u.to_bits(), mmd2(&y, &x, &unbiased).unwrap().to_bits());
    }
}
