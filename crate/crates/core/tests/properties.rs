//! Randomized invariants across tensors, noise, population and metrics.

use std::sync::Arc;

use btrans::bayes::{apply_bayesian_transform, NoiseMode, NoisePrior, SiteSelector};
use btrans::metrics::{pairwise_cosine_diversity, pca_project};
use btrans::model::{ModelConfig, ModelParams, ModelRef, NoHooks};
use btrans::population::{majority_vote, pass_at_k, pass_at_k_curve, MemberRecord, PopulationResult};
use btrans::rl::grpo_advantages;
use btrans::tensor::{rms_norm, softmax, Tensor};
use proptest::prelude::*;

fn row(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-8.0f64..8.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn softmax_normalizes_and_ignores_shifts(x in row(7), c in -50.0f64..50.0) {
        let a = softmax(&Tensor::<f64>::from_f64(vec![1, 7], &x).unwrap()).unwrap();
        let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
        let b = softmax(&Tensor::<f64>::from_f64(vec![1, 7], &shifted).unwrap()).unwrap();
        prop_assert!((a.data().iter().sum::<f64>() - 1.0).abs() < 1e-6);
        for (p, q) in a.data().iter().zip(b.data()) {
            prop_assert!((p - q).abs() < 1e-6);
        }
    }

    #[test]
    fn rms_norm_is_scale_invariant(x in row(6), c in 0.01f64..100.0) {
        prop_assume!(x.iter().any(|v| v.abs() > 1e-3));
        let w = Tensor::<f64>::from_f64(vec![6], &[1.0, 0.5, -2.0, 1.5, 0.1, 3.0]).unwrap();
        let a = rms_norm(&Tensor::<f64>::from_f64(vec![1, 6], &x).unwrap(), &w, 0.0).unwrap();
        let scaled: Vec<f64> = x.iter().map(|v| v * c).collect();
        let b = rms_norm(&Tensor::<f64>::from_f64(vec![1, 6], &scaled).unwrap(), &w, 0.0).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            prop_assert!((p - q).abs() < 1e-5);
        }
    }

    #[test]
    fn advantages_are_centered_and_shift_invariant(r in prop::collection::vec(0.0f64..1.0, 2..12), c in -5.0f64..5.0) {
        let a = grpo_advantages(&r);
        prop_assert!(a.iter().sum::<f64>().abs() < 1e-6);
        let shifted: Vec<f64> = r.iter().map(|x| x + c).collect();
        for (p, q) in a.iter().zip(grpo_advantages(&shifted)) {
            prop_assert!((p - q).abs() < 1e-6);
        }
    }

    #[test]
    fn pass_at_k_is_monotone_per_question(bits in prop::collection::vec(prop::collection::vec(any::<bool>(), 6), 1..8)) {
        for q in &bits {
            let curve = pass_at_k_curve(std::slice::from_ref(q)).unwrap();
            prop_assert!(curve.windows(2).all(|w| w[0] <= w[1]));
        }
        let curve = pass_at_k_curve(&bits).unwrap();
        prop_assert!(curve.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(curve[5], pass_at_k(&bits, 6).unwrap());
    }

    #[test]
    fn vote_counts_cover_answered_members(xs in prop::collection::vec(prop::option::of(0u8..4), 1..10)) {
        let answers: Vec<Option<String>> = xs.iter().map(|x| x.map(|v| v.to_string())).collect();
        let v = majority_vote(&answers);
        prop_assert_eq!(v.counts.values().sum::<usize>(), xs.iter().flatten().count());
        prop_assert_eq!(v.consensus.is_none(), xs.iter().all(|x| x.is_none()));
    }

    #[test]
    fn population_votes_ignore_member_order(xs in prop::collection::vec(prop::option::of(0u8..3), 2..8), rot in 0usize..8) {
        let members: Vec<MemberRecord> = xs
            .iter()
            .enumerate()
            .map(|(k, a)| MemberRecord {
                k,
                noise_seed: k as u64,
                decode_seed: k as u64,
                tokens: vec![],
                text: String::new(),
                answer: a.map(|v| v.to_string()),
                logprobs: vec![],
                logprob_sum: 0.0,
                error: None,
            })
            .collect();
        let mut rotated = members.clone();
        rotated.rotate_left(rot % members.len());
        let a = PopulationResult::new(0, 0.02, members, Some("1"), None);
        let b = PopulationResult::new(0, 0.02, rotated, Some("1"), None);
        prop_assert_eq!(&a.votes, &b.votes);
        let top = a.votes.values().copied().max();
        let tied = a.votes.values().filter(|&&c| Some(c) == top).count() > 1;
        if !tied {
            prop_assert_eq!(&a.consensus, &b.consensus);
        }
        let (pa, pb) = (a.pass_at_k.unwrap(), b.pass_at_k.unwrap());
        prop_assert_eq!(pa.last(), pb.last());
    }

    #[test]
    fn diversity_ignores_member_order(v in prop::collection::vec(row(5), 2..6), rot in 0usize..6) {
        prop_assume!(v.iter().all(|x| x.iter().map(|a| a * a).sum::<f64>() > 1e-3));
        let mut w = v.clone();
        w.rotate_left(rot % v.len());
        let a = pairwise_cosine_diversity(&v).unwrap();
        let b = pairwise_cosine_diversity(&w).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn parallel_embeddings_have_zero_diversity(base in row(5), scales in prop::collection::vec(0.1f64..10.0, 2..6)) {
        prop_assume!(base.iter().map(|a| a * a).sum::<f64>() > 1e-3);
        let v: Vec<Vec<f64>> = scales.iter().map(|s| base.iter().map(|x| x * s).collect()).collect();
        prop_assert!(pairwise_cosine_diversity(&v).unwrap().abs() < 1e-6);
    }

    #[test]
    fn pca_residual_equals_discarded_variance(pts in prop::collection::vec(row(4), 5..12)) {
        let p = pca_project(&pts, 2).unwrap();
        prop_assume!(!p.degenerate);
        let n = pts.len() as f64;
        let mut residual = 0.0;
        for (x, c) in pts.iter().zip(&p.coords) {
            for j in 0..4 {
                let recon = p.mean[j] + c[0] * p.components[0][j] + c[1] * p.components[1][j];
                residual += (x[j] - recon).powi(2);
            }
        }
        // eigenvalues are of the 1/n covariance
        let discarded: f64 = p.eigenvalues[2..].iter().sum::<f64>() * n;
        prop_assert!((residual - discarded).abs() < 1e-5 * (1.0 + residual), "{residual} vs {discarded}");
    }
}

fn small_model(seed: u64) -> Arc<ModelParams<f32>> {
    let cfg = ModelConfig { d_model: 16, n_layers: 2, n_heads: 2, d_ff: 24, max_seq_len: 24, ..Default::default() };
    Arc::new(ModelParams::init(&cfg, seed).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn zero_sigma_reproduces_base_logits(toks in prop::collection::vec(0u32..32, 1..12), mode in 0usize..3) {
        let base = small_model(3);
        let plain = ModelRef::new(&base).logits(&toks, 1, None, &mut NoHooks).unwrap();
        let mut w = apply_bayesian_transform(Arc::clone(&base), NoisePrior::new(0.0, 0.0).unwrap(), &SiteSelector::All).unwrap();
        w.set_mode(NoiseMode::ALL[mode]);
        prop_assert!(w.logits(None, &toks, 1).unwrap().bit_eq(&plain));
    }

    #[test]
    fn sampling_never_touches_base_weights(seeds in prop::collection::vec(any::<u64>(), 1..4), sigma in 0.0f64..0.5) {
        let base = small_model(5);
        let snapshot = (*base).clone();
        let mut w = apply_bayesian_transform(Arc::clone(&base), NoisePrior::new(0.1, sigma).unwrap(), &SiteSelector::All).unwrap();
        for s in &seeds {
            w.reset_posterior_seeded(&[*s, s ^ 1]);
            w.logits(None, &[1, 4, 7, 1, 4, 7], 2).unwrap();
        }
        prop_assert_eq!(&*base, &snapshot);
    }

    #[test]
    fn offsets_follow_the_prior(mu in -0.5f64..0.5, sigma in 0.01f64..1.0, seed in any::<u64>()) {
        let mut w = apply_bayesian_transform(small_model(1), NoisePrior::new(mu, sigma).unwrap(), &SiteSelector::All).unwrap();
        w.set_mode(NoiseMode::Token);
        w.reset_posterior_seeded(&[seed]);
        let mut xs = Vec::new();
        let site = w.sites()[0];
        for _ in 0..400 {
            xs.extend(w.sample_offset(site, 1).unwrap().data().iter().map(|&v| v as f64));
        }
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let sd = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        // 5 standard errors on the mean, and a loose band on the spread
        prop_assert!((m - mu).abs() < 5.0 * sigma / n.sqrt(), "mean {m}");
        prop_assert!((sd / sigma - 1.0).abs() < 0.06, "sd {sd}");
    }
}
