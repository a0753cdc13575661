use proptest::prelude::*;

use ssmkt::checkpoint::{decode, encode};
use ssmkt::data::{window, Interaction, InteractionSequence};
use ssmkt::interpret::{materialize_alpha, normalize_row, softmax};
use ssmkt::metrics::{acc, auc, masked};
use ssmkt::model::{KtModel, ModelConfig};
use ssmkt::scan::ScanMode;
use ssmkt::ssm::{scan_parallel, scan_sequential, S6Config, S6Layer};
use ssmkt::{ParamStore, Rng, Tape, Tensor};

fn tensor(shape: Vec<usize>, rng: &mut Rng, f: impl Fn(&mut Rng) -> f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| f(rng)).collect()).unwrap()
}

fn sequence(seed: u64, t: usize, nq: usize, nc: usize) -> Vec<Interaction> {
    let mut rng = Rng::new(seed);
    (0..t)
        .map(|_| {
            let q = rng.below(nq);
            Interaction {
                question: q,
                concept: q % nc,
                response: rng.below(2) as u8,
            }
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn tree_scan_matches_sequential(t in 1usize..80, d in 1usize..6, n in 1usize..6, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let abar = tensor(vec![t, d, n], &mut rng, |r| r.uniform_range(0.0, 1.0));
        let bbar = tensor(vec![t, d, n], &mut rng, Rng::standard_normal);
        let c = tensor(vec![t, n], &mut rng, Rng::standard_normal);
        let x = tensor(vec![t, d], &mut rng, Rng::standard_normal);
        let s = scan_sequential(&abar, &bbar, &c, &x).unwrap();
        let p = scan_parallel(&abar, &bbar, &c, &x).unwrap();
        let scale = s.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for (a, b) in s.data().iter().zip(p.data()) {
            prop_assert!((a - b).abs() <= 1e-10 * scale);
        }
    }

    #[test]
    fn alpha_is_causal_and_reconstructs(t in 1usize..24, d in 1usize..6, n in 1usize..5, skip in any::<bool>(), seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::<f64>::new();
        let cfg = S6Config { n_state: n, use_skip: skip, ..S6Config::new(d) };
        let layer = S6Layer::new(cfg, "s6", &mut store, &mut rng).unwrap();
        let x = tensor(vec![t, d], &mut rng, Rng::standard_normal);
        let mut tape = Tape::no_grad();
        let xv = tape.constant(x);
        let mut trace = None;
        layer.forward(&store, &mut tape, xv, ScanMode::Sequential, Some(&mut trace)).unwrap();
        let trace = trace.unwrap();
        let alpha = materialize_alpha(&trace, false).unwrap();
        for m in 0..d {
            for i in 0..t {
                prop_assert!(alpha.row(m, i)[i + 1..].iter().all(|&a| a == 0.0));
                prop_assert!(alpha.row(m, i).iter().all(|a| a.is_finite()));
            }
        }
        let y = alpha.apply(trace.x.data());
        let scale = trace.y.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for (a, b) in y.iter().zip(trace.y.data()) {
            prop_assert!((a - b).abs() <= 1e-10 * scale);
        }
    }

    #[test]
    fn normalized_rows_sum_to_one(row in prop::collection::vec(0.01f64..3.0, 1..40)) {
        let w = normalize_row(&row).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn softmax_is_shift_invariant(beta in prop::collection::vec(-20.0f64..20.0, 1..40), shift in -50.0f64..50.0) {
        let g = softmax(&beta);
        prop_assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let shifted: Vec<f64> = beta.iter().map(|b| b + shift).collect();
        for (a, b) in softmax(&shifted).iter().zip(&g) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn padding_never_changes_metrics(v in prop::collection::vec((0.0f64..1.0, any::<bool>()), 2..50), pad in 1usize..20) {
        let preds: Vec<f64> = v.iter().map(|x| x.0).collect();
        let labels: Vec<bool> = v.iter().map(|x| x.1).collect();
        let mut pp = preds.clone();
        let mut ll = labels.clone();
        let mut mask = vec![true; preds.len()];
        pp.extend(std::iter::repeat_n(0.99, pad));
        ll.extend(std::iter::repeat_n(false, pad));
        mask.extend(std::iter::repeat_n(false, pad));
        let (mp, ml) = masked(&pp, &ll, &mask);
        prop_assert_eq!(auc(&mp, &ml), auc(&preds, &labels));
        prop_assert_eq!(acc(&mp, &ml, 0.5), acc(&preds, &labels, 0.5));
    }

    #[test]
    fn windows_conserve_every_interaction(lens in prop::collection::vec(1usize..70, 1..6), max_len in 1usize..30) {
        let seqs: Vec<InteractionSequence> = lens
            .iter()
            .enumerate()
            .map(|(i, &l)| InteractionSequence { student_id: format!("s{i}"), items: sequence(i as u64, l, 5, 2) })
            .collect();
        let ws = window(&seqs, max_len);
        prop_assert!(ws.iter().all(|w| w.padded_len() == max_len && w.num_valid() >= 1));
        let mut rebuilt: Vec<Interaction> = Vec::new();
        for w in &ws {
            rebuilt.extend(w.items());
        }
        let all: Vec<Interaction> = seqs.iter().flat_map(|s| s.items.clone()).collect();
        prop_assert_eq!(rebuilt, all);
    }

    #[test]
    fn predictions_ignore_the_future(seed in any::<u64>(), t in 2usize..14, cut in 0usize..13) {
        let cut = cut % (t - 1);
        let mut cfg = ModelConfig::new(9, 3);
        cfg.d_model = 8;
        cfg.n_layers = 1;
        let (model, store) = KtModel::init::<f64>(cfg, seed).unwrap();
        let seq = sequence(seed, t, 9, 3);
        let mut other = seq.clone();
        other[cut].response ^= 1;
        for it in &mut other[cut + 1..] {
            *it = Interaction { question: (it.question + 4) % 9, concept: (it.question + 4) % 9 % 3, response: 1 - it.response };
        }
        let a = model.predict(&store, &seq).unwrap();
        let b = model.predict(&store, &other).unwrap();
        for i in 0..=cut {
            prop_assert_eq!(a[i].to_bits(), b[i].to_bits());
        }
    }

    #[test]
    fn checkpoints_round_trip_bitwise(seed in any::<u64>()) {
        let mut cfg = ModelConfig::new(7, 2);
        cfg.d_model = 4;
        cfg.n_layers = 1;
        let (_, store) = KtModel::init::<f64>(cfg, seed).unwrap();
        let back: ParamStore<f64> = decode(&encode(&store)).unwrap();
        for ((_, a), (_, b)) in store.iter().zip(back.iter()) {
            prop_assert_eq!(&a.name, &b.name);
            let (x, y): (Vec<u64>, Vec<u64>) = (
                a.value.data().iter().map(|v| v.to_bits()).collect(),
                b.value.data().iter().map(|v| v.to_bits()).collect(),
            );
            prop_assert_eq!(x, y);
        }
    }
}
