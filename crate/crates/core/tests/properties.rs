use ndarray::{Array1, Array2};
use proptest::prelude::*;

use oncoclip::clfmetrics::roc_auc;
use oncoclip::encoders::{l2_normalize, TextEncoder};
use oncoclip::losses::cox_partial_loglik;
use oncoclip::retrieval::{recall_at_k, Direction};
use oncoclip::rng;
use oncoclip::survival::harrell_cindex;
use oncoclip::textmetrics::{bleu_n, rouge_l, TokenPair};
use oncoclip::train::{clip_grad_norm, fuse_logits, lr_at, Schedule, ScheduleConfig};

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

proptest! {
    #[test]
    fn normalize_is_scale_free(v in prop::collection::vec(-10.0f64..10.0, 1..8), alpha in 0.01f64..100.0) {
        prop_assume!(norm(&v) > 1e-3);
        let scaled: Vec<f64> = v.iter().map(|x| x * alpha).collect();
        let (a, b) = (l2_normalize(&v).unwrap(), l2_normalize(&scaled).unwrap());
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn text_pooling_ignores_order(mut tokens in prop::collection::vec(0usize..20, 1..12), seed in 0u64..1000) {
        let enc = TextEncoder::new(20, 6, 0.0, &mut rng::seeded(seed)).unwrap();
        let before = enc.embed(&tokens).unwrap();
        tokens.reverse();
        prop_assert_eq!(before, enc.embed(&tokens).unwrap());
    }

    #[test]
    fn grad_clipping_never_grows(g in prop::collection::vec(-5.0f64..5.0, 0..16), max in 0.01f64..3.0) {
        let mut c = g.clone();
        let pre = clip_grad_norm(&mut c, max);
        prop_assert!((pre - norm(&g)).abs() < 1e-12);
        prop_assert!(norm(&c) <= norm(&g) + 1e-12);
        prop_assert!(norm(&c) <= max.max(norm(&g)) + 1e-12);
    }

    #[test]
    fn fusion_is_order_free(rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 1..5)) {
        let arrays: Vec<Array1<f64>> = rows.iter().map(|r| Array1::from(r.clone())).collect();
        let views: Vec<_> = arrays.iter().map(|a| a.view()).collect();
        let rev: Vec<_> = views.iter().rev().cloned().collect();
        let (a, b) = (fuse_logits(&views).unwrap(), fuse_logits(&rev).unwrap());
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn lr_stays_within_base(step in 0u64..1000, total in 1u64..1000, base in 1e-6f64..1.0) {
        let cfg = ScheduleConfig { schedule: Schedule::Cosine, warmup_ratio: 0.1, total_steps: total };
        let lr = lr_at(step.min(total), &cfg, base);
        prop_assert!((0.0..=base * (1.0 + 1e-12)).contains(&lr));
    }

    #[test]
    fn auc_flips_with_labels(pairs in prop::collection::vec((-3.0f64..3.0, any::<bool>()), 2..40)) {
        let (s, y): (Vec<f64>, Vec<bool>) = pairs.into_iter().unzip();
        prop_assume!(y.iter().any(|&b| b) && y.iter().any(|&b| !b));
        let flipped: Vec<bool> = y.iter().map(|b| !b).collect();
        let (a, b) = (roc_auc(&s, &y).unwrap(), roc_auc(&s, &flipped).unwrap());
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn harrell_reverses_with_risk(recs in prop::collection::vec((1u8..30, any::<bool>(), -5.0f64..5.0), 2..40)) {
        let times: Vec<f64> = recs.iter().map(|r| f64::from(r.0)).collect();
        let events: Vec<bool> = recs.iter().map(|r| r.1).collect();
        let risks: Vec<f64> = recs.iter().map(|r| r.2).collect();
        let neg: Vec<f64> = risks.iter().map(|r| -r).collect();
        if let Ok(c) = harrell_cindex(&times, &events, &risks) {
            let d = harrell_cindex(&times, &events, &neg).unwrap();
            prop_assert!((c + d - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cox_loss_shift_invariant(recs in prop::collection::vec((1u8..10, any::<bool>(), -2.0f64..2.0), 1..20), shift in -5.0f64..5.0) {
        let times: Vec<f64> = recs.iter().map(|r| f64::from(r.0)).collect();
        let mut events: Vec<bool> = recs.iter().map(|r| r.1).collect();
        events[0] = true;
        let eta: Vec<f64> = recs.iter().map(|r| r.2).collect();
        let shifted: Vec<f64> = eta.iter().map(|e| e + shift).collect();
        let (a, _) = cox_partial_loglik(&eta, &times, &events).unwrap();
        let (b, _) = cox_partial_loglik(&shifted, &times, &events).unwrap();
        prop_assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()));
    }

    #[test]
    fn recall_grows_with_k(vals in prop::collection::vec(0u8..5, 36)) {
        let sim = Array2::from_shape_vec((6, 6), vals.into_iter().map(f64::from).collect()).unwrap();
        for dir in [Direction::I2t, Direction::T2i] {
            let r: Vec<f64> = (1..=6).map(|k| recall_at_k(sim.view(), k, dir).unwrap()).collect();
            prop_assert!(r.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(r[5], 1.0);
        }
    }

    #[test]
    fn text_scores_bounded(c in "[a-d ]{1,20}", r in "[a-d ]{1,20}") {
        let pair = TokenPair::from_text(&c, &r);
        prop_assume!(!pair.reference.is_empty());
        let b = bleu_n(std::slice::from_ref(&pair), 2).unwrap().score;
        prop_assert!((0.0..=1.0).contains(&b));
        if !pair.candidate.is_empty() {
            let l = rouge_l(&pair).unwrap();
            prop_assert!((0.0..=1.0).contains(&l));
        }
    }
}
