//! Randomised properties of the change-based pipeline against the dense
//! oracle.

mod common;

use changenet::analysis::count_ops_dense;
use changenet::calibration::{
    evaluate, layer_increments, select_thresholds, sweep_threshold_factor, CalibConfig, EvalConfig, EvalSequence,
};
use changenet::network::{convert_to_cb, CbNode, RunOptions};
use changenet::tensor::{maxpool, Tensor3};
use changenet::Source;
use common::{random_case, random_thresholds};
use proptest::prelude::*;

fn input_of<'a>(cb: &'a changenet::CbNetwork, frame: &'a Tensor3, i: usize) -> &'a Tensor3 {
    match cb.spec().layers[i].inputs[0] {
        Source::Input => frame,
        Source::Layer(j) => cb.node(j).output(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn zero_thresholds_reproduce_dense(seed in any::<u64>()) {
        let case = random_case(seed);
        let mut cb = convert_to_cb(&case.net, &vec![0.0; case.n_conv()], &case.policies).unwrap();
        for x in &case.frames {
            cb.forward_frame(x).unwrap();
            prop_assert!(cb.output().max_rel_diff(&case.net.forward(x).unwrap()) <= 1e-5);
        }
    }

    #[test]
    fn layers_stay_consistent_with_their_state(seed in any::<u64>()) {
        let case = random_case(seed);
        let taus = random_thresholds(case.n_conv(), seed ^ 0x5eed);
        let mut cb = convert_to_cb(&case.net, &taus, &case.policies).unwrap();
        let dense = count_ops_dense(case.net.spec()).unwrap();
        for x in &case.frames {
            let before: Vec<Tensor3> = cb.nodes().iter().map(|n| n.output().clone()).collect();
            let states: Vec<Option<Tensor3>> =
                cb.nodes().iter().map(|n| n.as_conv().map(|l| l.state().tensor().clone())).collect();
            let stats = cb.forward_frame(x).unwrap();
            for (layer, expect, got) in cb.closed_loop_outputs().unwrap() {
                prop_assert!(got.max_rel_diff(&expect) <= 1e-5, "layer {} drifted", layer);
            }
            for (i, node) in cb.nodes().iter().enumerate() {
                let out = node.output();
                // Pixels outside the index list are untouched.
                let mut touched = vec![false; out.height() * out.width()];
                for p in node.indexes().pixels() {
                    touched[p.row as usize * out.width() + p.col as usize] = true;
                }
                for c in 0..out.channels() {
                    for r in 0..out.height() {
                        for col in 0..out.width() {
                            if !touched[r * out.width() + col] {
                                prop_assert_eq!(
                                    out.get(c, r, col).to_bits(),
                                    before[i].get(c, r, col).to_bits()
                                );
                            }
                        }
                    }
                }
                match node {
                    CbNode::Conv(l) => {
                        prop_assert!(stats[i].eff_ops <= dense[i]);
                        // Every state pixel holds either the new input or
                        // its old value, across all channels at once.
                        let input = input_of(&cb, x, i);
                        let (old, new) = (states[i].as_ref().unwrap(), l.state().tensor());
                        for r in 0..new.height() {
                            for col in 0..new.width() {
                                let all = |t: &Tensor3| (0..new.channels()).all(|c| new.get(c, r, col) == t.get(c, r, col));
                                prop_assert!(all(input) || all(old));
                            }
                        }
                    }
                    CbNode::Pool(p) => {
                        let expect = maxpool(input_of(&cb, x, i), &p.pool()).unwrap();
                        prop_assert_eq!(out.data(), expect.data());
                    }
                    CbNode::Elementwise(_) => {}
                }
            }
        }
    }

    #[test]
    fn runs_are_deterministic(seed in any::<u64>()) {
        let case = random_case(seed);
        let taus = random_thresholds(case.n_conv(), seed);
        let mut a = convert_to_cb(&case.net, &taus, &case.policies).unwrap();
        let mut b = a.clone();
        let (out_a, stats_a) = a.forward_sequence(&case.frames, None).unwrap();
        let (out_b, stats_b) = b.forward_sequence(&case.frames, None).unwrap();
        prop_assert_eq!(stats_a, stats_b);
        for (x, y) in out_a.iter().zip(&out_b) {
            prop_assert_eq!(
                x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                y.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn detected_maps_stay_within_worst_case(seed in any::<u64>()) {
        let case = random_case(seed);
        let mut cb = convert_to_cb(&case.net, &random_thresholds(case.n_conv(), seed), &case.policies).unwrap();
        cb.set_options(RunOptions { track_propagation: true, ..RunOptions::default() });
        for x in &case.frames {
            cb.forward_frame(x).unwrap();
            for &i in cb.conv_layers() {
                let l = cb.node(i).as_conv().unwrap();
                if let Some(worst) = l.propagated_map() {
                    prop_assert!(l.change_map().is_subset_of(worst));
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn calibration_respects_budget(seed in any::<u64>(), budget in prop::sample::select(vec![0.0, 1e-5, 1e-3])) {
        let case = random_case(seed);
        let n = case.n_conv();
        let cb = convert_to_cb(&case.net, &vec![0.0; n], &case.policies).unwrap();
        let seq = EvalSequence::with_dense_reference(&case.net, case.frames.clone()).unwrap();
        let cfg = CalibConfig { per_layer_budget: budget, max_iterations: 40, ..CalibConfig::default() };
        let cal = select_thresholds(&cb, &cfg, std::slice::from_ref(&seq)).unwrap();
        prop_assert_eq!(cal.thresholds.len(), n);
        prop_assert!(cal.thresholds.iter().all(|t| *t >= 0.0));
        let inc = layer_increments(&cb, &cal.thresholds, std::slice::from_ref(&seq), &cfg.eval).unwrap();
        prop_assert!(inc.iter().all(|d| *d <= budget));
        let at = evaluate(&cb, &cal.thresholds, std::slice::from_ref(&seq), &cfg.eval).unwrap().loss;
        let zero = evaluate(&cb, &vec![0.0; n], std::slice::from_ref(&seq), &cfg.eval).unwrap().loss;
        prop_assert!(at >= zero);
    }

    #[test]
    fn sweep_rows_follow_factors(seed in any::<u64>()) {
        let case = random_case(seed);
        let n = case.n_conv();
        let cb = convert_to_cb(&case.net, &vec![0.0; n], &case.policies).unwrap();
        let seq = EvalSequence::with_dense_reference(&case.net, case.frames.clone()).unwrap();
        let factors = [0.0, 0.5, 1.0, 2.0];
        let curve = sweep_threshold_factor(&cb, &vec![0.05; n], &factors, &[seq], &EvalConfig::default()).unwrap();
        prop_assert_eq!(curve.rows.iter().map(|r| r.factor).collect::<Vec<_>>(), factors.to_vec());
        prop_assert!(curve.rows[0].loss <= 1e-9);
    }
}
