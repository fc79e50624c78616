//! Property tests for the numeric core and metric invariants.

use proptest::prelude::*;

use ctrm_core::graph::Tape;
use ctrm_core::metrics::{bleu4, cider, rouge_l, EvalCorpus, EvalEntry};
use ctrm_core::tensor::Tensor;

fn finite_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    proptest::collection::vec(-50.0f64..50.0, rows * cols)
        .prop_map(move |data| Tensor::new(vec![rows, cols], data).unwrap())
}

proptest! {
    #[test]
    fn softmax_rows_are_stochastic_and_shift_invariant(
        x in finite_matrix(4, 6),
        shift in -100.0f64..100.0,
    ) {
        let tape = Tape::new();
        let v = tape.constant(x.clone());
        let sm = tape.value(tape.row_softmax(v).unwrap());
        for i in 0..4 {
            let row_sum: f64 = sm.row_slice(i).iter().sum();
            prop_assert!((row_sum - 1.0).abs() < 1e-12);
            prop_assert!(sm.row_slice(i).iter().all(|&p| p >= 0.0));
        }
        // shifting every entry of a row by a constant leaves it unchanged
        let mut shifted = x.clone();
        for i in 0..4 {
            for j in 0..6 {
                shifted.set(i, j, x.at(i, j) + shift);
            }
        }
        let vs = tape.constant(shifted);
        let sm2 = tape.value(tape.row_softmax(vs).unwrap());
        prop_assert!(sm.max_abs_diff(&sm2) < 1e-12);
    }

    #[test]
    fn matmul_is_associative(
        a in finite_matrix(3, 4),
        b in finite_matrix(4, 2),
        c in finite_matrix(2, 5),
    ) {
        let tape = Tape::new();
        let (av, bv, cv) = (tape.constant(a), tape.constant(b), tape.constant(c));
        let left = tape.matmul(tape.matmul(av, bv).unwrap(), cv).unwrap();
        let right = tape.matmul(av, tape.matmul(bv, cv).unwrap()).unwrap();
        let (l, r) = (tape.value(left), tape.value(right));
        // inputs are bounded by 50, so products stay well within 1e-9
        // after normalizing by magnitude
        let scale = l.data().iter().fold(1.0f64, |m, x| m.max(x.abs()));
        prop_assert!(l.max_abs_diff(&r) / scale < 1e-9);
    }

    #[test]
    fn metrics_are_invariant_to_entry_order(perm_seed in 0u64..1000) {
        let base = vec![
            ("a", "the cat sat on a mat", vec!["the cat sat on the mat"]),
            ("b", "a dog runs", vec!["a dog runs far", "the dog runs"]),
            ("c", "fish swim deep", vec!["fish swim very deep"]),
            ("d", "x y z", vec!["p q r"]),
        ];
        let entries: Vec<EvalEntry> = base
            .iter()
            .map(|(id, hyp, refs)| EvalEntry {
                id: id.to_string(),
                hypothesis: hyp.split_whitespace().map(String::from).collect(),
                references: refs
                    .iter()
                    .map(|r| r.split_whitespace().map(String::from).collect())
                    .collect(),
            })
            .collect();
        let mut shuffled = entries.clone();
        let mut rng = ctrm_core::rng::Rng::seeded(perm_seed);
        rng.shuffle(&mut shuffled);
        let fwd = EvalCorpus::new(entries).unwrap();
        let rev = EvalCorpus::new(shuffled).unwrap();
        prop_assert_eq!(bleu4(&fwd).unwrap(), bleu4(&rev).unwrap());
        prop_assert_eq!(rouge_l(&fwd).unwrap(), rouge_l(&rev).unwrap());
        prop_assert!((cider(&fwd).unwrap() - cider(&rev).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn losses_are_non_negative(
        logits in finite_matrix(3, 6),
        h in finite_matrix(4, 5),
        v in finite_matrix(3, 4),
        t in finite_matrix(3, 4),
        scores in finite_matrix(3, 3),
    ) {
        use ctrm_core::losses::{
            caption_cross_entropy, causal_alignment_loss, contrastive_loss,
            temporal_consistency_loss, CausalAnnotation, LossWeights,
        };
        prop_assert!(caption_cross_entropy(&logits, &[1, 4, 2]).unwrap() >= 0.0);
        prop_assert!(temporal_consistency_loss(&h).unwrap() >= 0.0);
        // rows of v/t are nonzero with probability one under this strategy
        if v.data().iter().any(|&x| x != 0.0) && t.data().iter().any(|&x| x != 0.0) {
            if let Ok(loss) = contrastive_loss(&v, &t, &LossWeights::default()) {
                prop_assert!(loss >= 0.0);
            }
        }
        let tape = Tape::new();
        let s = tape.constant(scores);
        let attn = tape.value(tape.causal_row_softmax(s).unwrap());
        let mut stacked = Vec::new();
        stacked.extend_from_slice(attn.data());
        let attention = Tensor::new(vec![1, 3, 3], stacked).unwrap();
        let mut annot = CausalAnnotation::empty(3);
        annot.add_edge(0, 1);
        annot.add_edge(1, 2);
        prop_assert!(causal_alignment_loss(&attention, &annot).unwrap() >= 0.0);
    }

    #[test]
    fn gradient_replay_is_deterministic(x in finite_matrix(3, 3)) {
        let tape = Tape::new();
        let v = tape.var("x", x);
        let sm = tape.row_softmax(v).unwrap();
        let prod = tape.matmul(sm, v).unwrap();
        let loss = tape.mean_all(prod);
        let g1 = tape.gradient(loss).unwrap();
        let g2 = tape.gradient(loss).unwrap();
        prop_assert_eq!(g1, g2);
    }
}
