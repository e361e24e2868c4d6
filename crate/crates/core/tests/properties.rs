//! Property tests for the numeric contracts and format round trips.

use std::io::Cursor;

use proptest::prelude::*;

use dsmlr_core::data::{parse_libsvm, write_libsvm, ParseOptions, SparseDataset, SparseRow};
use dsmlr_core::math::{log_sum_exp, objective_l1, objective_l2, refresh_b, sgd_update, sparse_dot};
use dsmlr_core::metrics::{micro_f1, rank_cdf, read_progress, write_progress, ProgressRecord};
use dsmlr_core::weights::{DenseWeights, WeightVector};
use dsmlr_core::Hyperparams;

fn sparse_row_strategy(max_d: usize) -> impl Strategy<Value = SparseRow> {
    prop::collection::btree_map(0..max_d as u32, -3.0f64..3.0, 0..max_d).prop_map(|m| {
        let (idx, vals): (Vec<u32>, Vec<f64>) =
            m.into_iter().filter(|(_, v)| *v != 0.0).unzip();
        SparseRow::new(idx, vals).unwrap()
    })
}

fn instance_strategy() -> impl Strategy<Value = (DenseWeights, SparseDataset)> {
    (1usize..=5, 1usize..=8, 1usize..=12).prop_flat_map(|(k, d, n)| {
        let weights = prop::collection::vec(
            prop::collection::vec(-1.5f64..1.5, d),
            k,
        );
        let rows = prop::collection::vec(sparse_row_strategy(d), n);
        let labels = prop::collection::vec(0..k, n);
        (weights, rows, labels).prop_map(move |(w, rows, labels)| {
            (
                DenseWeights::from_rows(w).unwrap(),
                SparseDataset::new(rows, labels, d, k).unwrap(),
            )
        })
    })
}

proptest! {
    #[test]
    fn log_sum_exp_is_stable_and_matches_naive(
        vals in prop::collection::vec(-700.0f64..700.0, 1..8)
    ) {
        let stable = log_sum_exp(&vals);
        prop_assert!(stable.is_finite());
        let naive = vals.iter().map(|v| v.exp()).sum::<f64>().ln();
        if naive.is_finite() {
            prop_assert!((stable - naive).abs() <= 1e-12 * naive.abs().max(1.0));
        }
    }

    #[test]
    fn l2_with_refreshed_b_equals_l1((w, data) in instance_strategy()) {
        let h = Hyperparams::new(0.05, 1.0).unwrap();
        let b: Vec<f64> = (0..data.n_rows())
            .map(|i| {
                let partial: f64 = w
                    .classes()
                    .map(|wk| sparse_dot(wk, data.row(i)).exp())
                    .sum();
                refresh_b(partial).unwrap()
            })
            .collect();
        let l1 = objective_l1(&w, &data, &h).unwrap();
        let l2 = objective_l2(&w, &b, &data, &h).unwrap();
        prop_assert!((l1 - l2).abs() <= 1e-10 * l1.abs().max(1.0));
    }

    #[test]
    fn unregularized_updates_touch_only_row_coordinates(
        dense in prop::collection::vec(-2.0f64..2.0, 8),
        x in sparse_row_strategy(8),
        y_ik in any::<bool>(),
        b in -3.0f64..1.0,
        eta0 in 0.0f64..0.5,
    ) {
        let h = Hyperparams::new(0.0, eta0).unwrap();
        let mut w = WeightVector::from_dense(dense.clone());
        sgd_update(&mut w, &x, y_ik, b, 1, &h, 4).unwrap();
        let touched: Vec<usize> = x.iter().map(|(j, _)| j).collect();
        for (j, (&before, after)) in dense.iter().zip(w.to_dense()).enumerate() {
            if !touched.contains(&j) {
                prop_assert_eq!(before.to_bits(), after.to_bits());
            }
        }
    }

    #[test]
    fn micro_f1_is_accuracy(
        pairs in prop::collection::vec((0usize..5, 0usize..5), 1..40)
    ) {
        let (preds, labels): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let acc = preds.iter().zip(&labels).filter(|(p, y)| p == y).count() as f64
            / preds.len() as f64;
        let micro = micro_f1(&preds, &labels, 5).unwrap();
        prop_assert!((micro - acc).abs() < 1e-12);
    }

    #[test]
    fn rank_cdf_is_monotone_and_ends_at_one(
        rows in prop::collection::vec(
            (prop::collection::vec(-2.0f64..2.0, 4), 0usize..4),
            1..30,
        )
    ) {
        let (scores, labels): (Vec<Vec<f64>>, Vec<usize>) = rows.into_iter().unzip();
        let cdf = rank_cdf(&scores, &labels).unwrap();
        prop_assert!(cdf.is_valid());
    }

    #[test]
    fn libsvm_round_trip_is_identity(
        rows in prop::collection::vec((sparse_row_strategy(6), 0usize..3), 1..15),
        one_based in any::<bool>(),
    ) {
        let (rows, labels): (Vec<SparseRow>, Vec<usize>) = rows.into_iter().unzip();
        // make every class id label-name-stable by first-appearance order
        let mut remap: Vec<usize> = Vec::new();
        let labels: Vec<usize> = labels
            .into_iter()
            .map(|l| match remap.iter().position(|&x| x == l) {
                Some(id) => id,
                None => {
                    remap.push(l);
                    remap.len() - 1
                }
            })
            .collect();
        let k = remap.len();
        let names: Vec<String> = (0..k).map(|i| format!("c{}", remap[i])).collect();
        let ds = SparseDataset::with_label_names(rows, labels, 6, k, names).unwrap();

        let mut buf = Vec::new();
        write_libsvm(&ds, &mut buf, !one_based).unwrap();
        let opts = ParseOptions { zero_based: !one_based, expected_features: Some(6) };
        let back = parse_libsvm(Cursor::new(buf), &opts).unwrap();
        prop_assert_eq!(back.dataset, ds);
        prop_assert_eq!(back.reordered_rows, 0);
    }

    #[test]
    fn progress_round_trip_is_identity(
        raw in prop::collection::vec((0.0f64..10.0, 0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0), 1..20)
    ) {
        let mut seconds = 0.0;
        let log: Vec<ProgressRecord> = raw
            .into_iter()
            .enumerate()
            .map(|(i, (obj, dt, mac, mic))| {
                seconds += dt;
                ProgressRecord {
                    iter: (i + 1) as u64,
                    objective: obj,
                    seconds,
                    macro_f1: mac,
                    micro_f1: mic,
                }
            })
            .collect();
        let mut buf = Vec::new();
        write_progress(&log, &mut buf).unwrap();
        let back = read_progress(&buf[..]).unwrap();
        prop_assert_eq!(back, log);
    }
}
