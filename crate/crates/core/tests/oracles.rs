//! Equivalence against brute-force reference implementations.

mod common;

use common::*;
use proptest::prelude::*;
use pvfuse::head::DescriptorRecord;
use pvfuse::numkit::Tensor;
use pvfuse::pointbranch::{farthest_point_sample, knn_graph};
use pvfuse::retrieval::{average_precision, evaluate, f1_at_n, ndcg_at_n, rank_all, RankedList};
use rand::Rng;

#[test]
fn fps_matches_greedy_oracle_on_100_clouds() {
    let mut r = rng(11);
    for _ in 0..100 {
        let n = r.random_range(1..=64);
        let k = r.random_range(1..=n);
        let cloud = random_cloud(&mut r, n);
        assert_eq!(farthest_point_sample(&cloud, k).unwrap(), fps_oracle(&cloud, k));
    }
}

#[test]
fn knn_matches_full_sort_oracle() {
    let mut r = rng(12);
    for _ in 0..100 {
        let n = r.random_range(2..=64);
        let d = r.random_range(1..=9);
        let k = r.random_range(1..n);
        let x = gaussian(&mut r, &[n, d], 1.0);
        let g = knn_graph(&x, k).unwrap();
        let want = knn_oracle(&x, k);
        for (i, w) in want.iter().enumerate() {
            assert_eq!(g.row(i), w.as_slice());
        }
    }
}

#[test]
fn knn_ties_on_integer_grid_follow_oracle() {
    let mut r = rng(13);
    for _ in 0..50 {
        let n = r.random_range(3..=30);
        let data: Vec<f64> = (0..n * 2).map(|_| r.random_range(0..3) as f64).collect();
        let x = Tensor::new(vec![n, 2], data).unwrap();
        let k = r.random_range(1..n);
        let g = knn_graph(&x, k).unwrap();
        let want = knn_oracle(&x, k);
        for (i, w) in want.iter().enumerate() {
            assert_eq!(g.row(i), w.as_slice());
        }
    }
}

#[test]
fn metrics_match_scalar_oracles_on_50_corpora() {
    let mut r = rng(14);
    for _ in 0..50 {
        let db = random_corpus(&mut r, 50, 5);
        let report = evaluate(&db).unwrap();
        let [micro, macro_, both] = corpus_metrics_oracle(&db);
        for (got, want) in [(report.micro, micro), (report.macro_, macro_), (report.micro_macro, both)] {
            assert!((got.map - want.map).abs() <= 1e-9);
            assert!((got.f1 - want.f1).abs() <= 1e-9);
            assert!((got.ndcg - want.ndcg).abs() <= 1e-9);
        }
        assert_eq!(report.micro_macro.map, (report.micro.map + report.macro_.map) / 2.0);
        assert_eq!(report.micro_macro.f1, (report.micro.f1 + report.macro_.f1) / 2.0);
        assert_eq!(report.micro_macro.ndcg, (report.micro.ndcg + report.macro_.ndcg) / 2.0);
    }
}

#[test]
fn ranking_matches_brute_force() {
    let mut r = rng(15);
    for _ in 0..20 {
        let db = random_corpus(&mut r, 10, 3);
        let lists = rank_all(&db).unwrap();
        for (q, list) in lists.iter().enumerate() {
            let want: Vec<&str> = ranking_oracle(&db, q).into_iter().map(|i| db[i].object_id.as_str()).collect();
            assert_eq!(list.ids, want);
        }
    }
}

#[test]
fn two_classes_of_two_and_six() {
    let angles: [f64; 8] = [0.0, 0.3, 1.0, 1.2, 1.4, 2.0, 2.6, 3.0];
    let labels = [0, 0, 1, 1, 1, 1, 1, 1];
    let db: Vec<DescriptorRecord> = angles
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (a, l))| DescriptorRecord::from_raw(format!("o{i}"), l, &[a.cos(), a.sin()]).unwrap())
        .collect();
    let report = evaluate(&db).unwrap();
    let [micro, macro_, _] = corpus_metrics_oracle(&db);
    assert!((report.micro.map - micro.map).abs() < 1e-12);
    assert!((report.macro_.map - macro_.map).abs() < 1e-12);
    assert!(report.micro.map != report.macro_.map);
}

fn list_from(rel: &[bool]) -> RankedList {
    RankedList {
        query_id: "q".into(),
        query_label: 0,
        ids: (0..rel.len()).map(|i| format!("{i}")).collect(),
        similarities: vec![0.0; rel.len()],
        relevance: rel.to_vec(),
    }
}

proptest! {
    #[test]
    fn per_query_metrics_match_definitions(rel in proptest::collection::vec(any::<bool>(), 1..40)) {
        let list = list_from(&rel);
        let r = rel.iter().filter(|&&x| x).count();
        let want = query_metrics_oracle(&rel, r);
        prop_assert!((average_precision(&list) - want.map).abs() <= 1e-12);
        prop_assert!((f1_at_n(&list) - want.f1).abs() <= 1e-12);
        prop_assert!((ndcg_at_n(&list) - want.ndcg).abs() <= 1e-12);
        for v in [average_precision(&list), f1_at_n(&list), ndcg_at_n(&list)] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn fps_oracle_agreement(seed in any::<u64>(), n in 1usize..48) {
        let mut r = rng(seed);
        let cloud = random_cloud(&mut r, n);
        let k = r.random_range(1..=n);
        prop_assert_eq!(farthest_point_sample(&cloud, k).unwrap(), fps_oracle(&cloud, k));
    }

    #[test]
    fn query_never_in_own_list(seed in any::<u64>()) {
        let db = random_corpus(&mut rng(seed), 20, 4);
        for (q, list) in rank_all(&db).unwrap().iter().enumerate() {
            prop_assert_eq!(list.ids.len(), db.len() - 1);
            let own = list.ids.iter().filter(|id| **id == db[q].object_id).count();
            let dupes = db.iter().filter(|d| d.object_id == db[q].object_id).count() - 1;
            prop_assert_eq!(own, dupes);
        }
    }

    #[test]
    fn ranking_invariant_under_rotation(seed in any::<u64>(), angle in 0.0f64..std::f64::consts::TAU) {
        let mut r = rng(seed);
        let n = r.random_range(3..15);
        let db: Vec<DescriptorRecord> = (0..n)
            .map(|i| {
                let a: f64 = r.random_range(0.0..std::f64::consts::TAU);
                DescriptorRecord::from_raw(format!("{i:02}"), r.random_range(0..3), &[a.cos(), a.sin()]).unwrap()
            })
            .collect();
        let (c, s) = (angle.cos(), angle.sin());
        let rotated: Vec<DescriptorRecord> = db
            .iter()
            .map(|d| {
                let v = &d.vector;
                DescriptorRecord::from_raw(d.object_id.clone(), d.label, &[c * v[0] - s * v[1], s * v[0] + c * v[1]]).unwrap()
            })
            .collect();
        let a = rank_all(&db).unwrap();
        let b = rank_all(&rotated).unwrap();
        for (x, y) in a.iter().zip(&b) {
            let s = &x.similarities;
            for w in 0..s.len() {
                prop_assert!((s[w] - y.similarities[w]).abs() < 1e-12);
                let isolated = (w == 0 || s[w - 1] - s[w] > 1e-9) && (w + 1 == s.len() || s[w] - s[w + 1] > 1e-9);
                if isolated {
                    prop_assert_eq!(&x.ids[w], &y.ids[w]);
                }
            }
        }
    }
}
