mod common;

use graphmoe::autodiff::{softmax, Tape};
use graphmoe::eval::auroc;
use graphmoe::flow::{self, Flow};
use graphmoe::ingest::{self, NormStats, RawSeries, SplitScheme};
use graphmoe::memory::{self, Router};
use graphmoe::params::ParamStore;
use proptest::prelude::*;

use common::{auroc_pairs, random, small_flow};

fn scored_labels(max: usize) -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2..=max).prop_flat_map(|n| {
        // coarse grid so ties are common
        let scores = prop::collection::vec((-20i32..20).prop_map(|v| f64::from(v) / 4.0), n);
        let labels = prop::collection::vec(0u8..=1, n).prop_filter("both classes", |l| {
            l.contains(&0) && l.contains(&1)
        });
        (scores, labels)
    })
}

fn series(rows: usize, len: usize) -> impl Strategy<Value = RawSeries> {
    prop::collection::vec(prop::collection::vec(-1e3f64..1e3, len), rows).prop_map(|values| {
        let names = (0..values.len()).map(|k| format!("e{k}")).collect();
        RawSeries::new(names, values, None).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn softmax_is_a_distribution(v in prop::collection::vec(-50.0f64..50.0, 1..40)) {
        let p = softmax(&v);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tape_softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..9, seed in any::<u64>()) {
        let mut tape = Tape::new();
        let mut x = random(&[rows, cols], seed, "logits");
        x.data_mut().iter_mut().for_each(|v| *v *= 30.0);
        let v = tape.constant(x);
        let s = tape.softmax(v).unwrap();
        for row in tape.value(s).data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_standardises_rows(cols in 2usize..20, seed in any::<u64>(), scale in 0.1f64..100.0) {
        let mut tape = Tape::new();
        let mut x = random(&[3, cols], seed, "ln");
        x.data_mut().iter_mut().for_each(|v| *v *= scale);
        let v = tape.constant(x);
        let y = tape.layer_norm(v, 1e-5).unwrap();
        for row in tape.value(y).data().chunks(cols) {
            let n = cols as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!(var < 1.0 + 1e-9);
        }
    }

    #[test]
    fn auroc_matches_pair_enumeration((scores, labels) in scored_labels(200)) {
        let rank = auroc(&scores, &labels).unwrap().auroc;
        prop_assert!((rank - auroc_pairs(&scores, &labels)).abs() < 1e-12);
    }

    #[test]
    fn auroc_is_antisymmetric_under_negation((scores, labels) in scored_labels(120)) {
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        let sum = auroc(&scores, &labels).unwrap().auroc + auroc(&neg, &labels).unwrap().auroc;
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn auroc_ignores_increasing_transforms((scores, labels) in scored_labels(120)) {
        let warped: Vec<f64> = scores.iter().map(|s| (s / 3.0).exp() * 7.0 - 2.0).collect();
        prop_assert_eq!(auroc(&scores, &labels).unwrap().auroc, auroc(&warped, &labels).unwrap().auroc);
    }

    #[test]
    fn roc_curve_is_monotone((scores, labels) in scored_labels(80)) {
        let r = auroc(&scores, &labels).unwrap();
        prop_assert_eq!(r.curve[0], (0.0, 0.0));
        prop_assert_eq!(*r.curve.last().unwrap(), (1.0, 1.0));
        prop_assert!(r.curve.windows(2).all(|w| w[1].0 >= w[0].0 && w[1].1 >= w[0].1));
    }

    #[test]
    fn zscore_output_is_standardised(s in series(3, 50)) {
        let z = ingest::zscore_normalize(&s).unwrap();
        let stats = NormStats::fit(&s).unwrap();
        for (k, row) in z.values.iter().enumerate() {
            if stats.std[k] <= ingest::STD_FLOOR {
                continue;
            }
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let std = (row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((std - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn window_count_and_contiguity(len in 1usize..400, window in 1usize..80, stride in 1usize..25) {
        let s = RawSeries::new(vec!["a".into()], vec![(0..len).map(|i| i as f64).collect()], None).unwrap();
        match ingest::slide_windows(&s, window, stride) {
            Ok(w) => {
                prop_assert_eq!(w.len(), (len - window) / stride + 1);
                for (start, t) in w.starts.iter().zip(&w.windows) {
                    prop_assert_eq!(t.data(), &s.values[0][*start..start + window]);
                }
            }
            Err(_) => prop_assert!(window > len),
        }
    }

    #[test]
    fn splits_concatenate_back(len in 10usize..500, three in any::<bool>()) {
        let scheme = if three { SplitScheme::TRAIN_VAL_TEST } else { SplitScheme::TRAIN_TEST };
        let s = RawSeries::new(vec!["a".into()], vec![(0..len).map(|i| i as f64).collect()], None).unwrap();
        let sp = ingest::split_dataset(&s, scheme).unwrap();
        let mut joined = sp.train.values[0].clone();
        if let Some(v) = &sp.val {
            joined.extend_from_slice(&v.values[0]);
        }
        joined.extend_from_slice(&sp.test.values[0]);
        prop_assert_eq!(joined, s.values[0].clone());
    }

    #[test]
    fn memory_step_is_bounded(seed in any::<u64>(), scale in 0.1f64..20.0) {
        let mut store = ParamStore::new();
        memory::register(&mut store, "r", 4, 3, 2, 5, seed);
        let mut tape = Tape::new();
        let bound = store.bind_constants(&mut tape);
        let router = Router::bind(&tape, &bound, "r").unwrap();
        let mut m0 = random(&[2, 5], seed, "m");
        m0.data_mut().iter_mut().for_each(|v| *v *= scale);
        let mut rows = random(&[3, 5], seed, "rows");
        rows.data_mut().iter_mut().for_each(|v| *v *= scale);
        let prev_max = m0.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let m = tape.constant(m0);
        let r = tape.constant(rows);
        let out = router.step(&mut tape, m, r).unwrap();
        let next_max = tape.value(out.memory).data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        prop_assert!(next_max <= prev_max + 1.0);
        let routes = tape.value(out.routes).data();
        prop_assert!(routes.iter().all(|&p| p > 0.0));
        prop_assert!((routes.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn flow_round_trip(seed in any::<u64>(), scale in 0.1f64..5.0) {
        let shape = small_flow();
        let mut store = ParamStore::new();
        flow::register(&mut store, "f", &shape, seed);
        let mut x = random(&[5, 4], seed, "x");
        x.data_mut().iter_mut().for_each(|v| *v *= scale);
        let c = random(&[5, 3], seed, "c");
        let mut tape = Tape::new();
        let bound = store.bind_constants(&mut tape);
        let f = Flow::bind(&bound, "f", shape).unwrap();
        let (xv, cv) = (tape.constant(x.clone()), tape.constant(c));
        let (z, _) = f.forward(&mut tape, xv, cv).unwrap();
        let back = f.inverse(&mut tape, z, cv).unwrap();
        prop_assert!(tape.value(back).max_abs_diff(&x) < 1e-8);
    }
}

#[test]
fn brute_force_oracle_on_hand_example() {
    assert_eq!(auroc_pairs(&[0.8, 0.6, 0.4, 0.2], &[1, 0, 1, 0]), 0.75);
}
