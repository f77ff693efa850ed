use proptest::prelude::*;

use super::*;

fn arch(max_len: usize) -> Arch {
    Arch { embed_dim: 4, hidden_dim: 5, context_window: 16, max_len }
}

fn random_policy(v: usize, max_len: usize, seed: u64) -> Policy<f64> {
    // Larger-than-init weights so distributions are far from uniform.
    let mut p = Policy::<f64>::new(Vocab::new(v).unwrap(), arch(max_len), Role::Generation, seed).unwrap();
    p.params_mut_unchecked().iter_mut().for_each(|x| *x *= 15.0);
    p
}

fn seq(t: &[u32]) -> TokenSeq {
    TokenSeq::new(t.to_vec())
}

fn fd_grad(p: &Policy<f64>, ctx: &TokenSeq, s: &TokenSeq, h: f64) -> Vec<f64> {
    (0..p.num_params())
        .map(|i| {
            let mut plus = p.clone();
            plus.params_mut_unchecked()[i] += h;
            let mut minus = p.clone();
            minus.params_mut_unchecked()[i] -= h;
            (plus.log_prob(ctx, s).unwrap() - minus.log_prob(ctx, s).unwrap()) / (2.0 * h)
        })
        .collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if den < 1e-12 {
        num
    } else {
        num / den
    }
}

#[test]
fn uniform_policy_one_token_plus_eos() {
    let p = Policy::<f64>::zeros(Vocab::new(4).unwrap(), arch(3), Role::Generation).unwrap();
    let lp = p.log_prob(&TokenSeq::empty(), &seq(&[2])).unwrap();
    assert!((lp - 2.0 * (0.25f64).ln()).abs() < 1e-12);
    assert!((lp + 2.7726).abs() < 1e-4);
}

#[test]
fn empty_sequence_is_eos_probability() {
    let p = random_policy(5, 3, 3);
    let ctx = seq(&[2, 3]);
    let lp = p.log_prob(&ctx, &TokenSeq::empty()).unwrap();
    let first = &p.step_distributions(&ctx, &TokenSeq::empty()).unwrap()[0];
    assert!((lp - first[EOS as usize].ln()).abs() < 1e-12);
}

#[test]
fn rejects_invalid_tokens() {
    let p = random_policy(4, 2, 1);
    assert!(matches!(p.log_prob(&TokenSeq::empty(), &seq(&[4])), Err(PopiError::InvalidInput(_))));
    assert!(p.log_prob(&seq(&[9]), &TokenSeq::empty()).is_err());
    assert!(p.log_prob(&TokenSeq::empty(), &seq(&[1, 0])).is_err());
    assert!(p.log_prob(&TokenSeq::empty(), &seq(&[1, 1, 1])).is_err());
    assert!(p.log_prob(&seq(&[1; 17]), &TokenSeq::empty()).is_err());
}

#[test]
fn enumeration_vocab2_len1() {
    let p = random_policy(2, 1, 5);
    let d = p.enumerate_distribution(&TokenSeq::empty(), 1, DEFAULT_ENUMERATION_CAP).unwrap();
    assert_eq!(d.support, vec![TokenSeq::empty(), seq(&[1])]);
    assert!((d.total_mass() - 1.0).abs() < 1e-12);
}

#[test]
fn uniform_enumeration_strata_are_equal() {
    let p = Policy::<f64>::zeros(Vocab::new(3).unwrap(), arch(2), Role::Generation).unwrap();
    let d = p.enumerate_distribution(&TokenSeq::empty(), 2, DEFAULT_ENUMERATION_CAP).unwrap();
    assert_eq!(d.len(), 1 + 2 + 4);
    for len in 0..=2 {
        let ps: Vec<f64> = d.support.iter().zip(d.probs()).filter(|(s, _)| s.len() == len).map(|(_, p)| p).collect();
        assert!(ps.iter().all(|&x| (x - ps[0]).abs() < 1e-15));
    }
    assert!((d.total_mass() - 1.0).abs() < 1e-12);
}

#[test]
fn enumeration_cap_is_enforced() {
    let p = random_policy(8, 4, 1);
    assert_eq!(support_size(Vocab::new(8).unwrap(), 4), 1 + 7 + 49 + 343 + 2401);
    assert!(matches!(
        p.enumerate_distribution(&TokenSeq::empty(), 4, 100),
        Err(PopiError::EnumerationTooLarge { size: 2801, cap: 100 })
    ));
}

#[test]
fn enumeration_matches_log_prob_and_normalizes() {
    for s in 0..20 {
        let v = 2 + (s as usize % 4);
        let p = random_policy(v, 3, s);
        let ctx = seq(&[1, (s % (v as u64 - 1) + 1) as u32]);
        let d = p.enumerate_distribution(&ctx, 3, DEFAULT_ENUMERATION_CAP).unwrap();
        let sum: f64 = d.support.iter().map(|y| p.log_prob(&ctx, y).unwrap().exp()).sum();
        assert!((sum - 1.0).abs() < 1e-9, "sum {sum}");
        for (y, lp) in d.support.iter().zip(&d.log_probs) {
            assert!((p.log_prob(&ctx, y).unwrap().exp() - lp.exp()).abs() < 1e-9);
        }
        let mut sorted = d.support.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), d.len());
    }
}

#[test]
fn sampling_is_deterministic_and_bounded() {
    let p = random_policy(6, 4, 11);
    let ctx = seq(&[2, 3, 1]);
    for s in 0..50 {
        let a = p.sample(&ctx, s, 4).unwrap();
        assert_eq!(a, p.sample(&ctx, s, 4).unwrap());
        assert!(a.len() <= 4);
        assert!(p.sample(&ctx, s, 2).unwrap().len() <= 2);
    }
    assert!(p.sample(&ctx, 0, 0).is_err());
}

#[test]
fn eos_degenerate_policy_samples_empty() {
    let a = arch(3);
    let p = Policy::<f64>::constant_output(Vocab::new(5).unwrap(), a, Role::Inference, &TokenSeq::empty()).unwrap();
    for s in 0..20 {
        assert!(p.sample(&seq(&[2, 3]), s, 3).unwrap().is_empty());
    }
    let q = Policy::<f64>::constant_output(Vocab::new(5).unwrap(), a, Role::Inference, &seq(&[4, 2])).unwrap();
    assert_eq!(q.log_prob(&seq(&[3]), &seq(&[4, 2])).unwrap(), 0.0);
    assert_eq!(q.sample(&TokenSeq::empty(), 7, 3).unwrap(), seq(&[4, 2]));
}

#[test]
fn empirical_frequencies_match_enumeration() {
    let p = random_policy(3, 2, 21);
    let ctx = seq(&[2]);
    let d = p.enumerate_distribution(&ctx, 2, DEFAULT_ENUMERATION_CAP).unwrap();
    let n = 100_000u64;
    let mut counts = std::collections::HashMap::new();
    for s in 0..n {
        *counts.entry(p.sample(&ctx, crate::seed::derive(99, &[s]), 2).unwrap()).or_insert(0u64) += 1;
    }
    for (y, prob) in d.support.iter().zip(d.probs()) {
        let emp = *counts.get(y).unwrap_or(&0) as f64 / n as f64;
        let sigma = (prob * (1.0 - prob) / n as f64).sqrt();
        assert!((emp - prob).abs() <= 3.0 * sigma + 1e-12, "{y:?}: {emp} vs {prob}");
    }
}

#[test]
fn logistic_toy_gradient_closed_form() {
    // All-zero weights: only the output bias moves, p(token 1) = σ(b1 - b0).
    let a = Arch { embed_dim: 1, hidden_dim: 1, context_window: 2, max_len: 1 };
    let mut p = Policy::<f64>::zeros(Vocab::new(2).unwrap(), a, Role::Generation).unwrap();
    let n = p.num_params();
    p.params_mut_unchecked()[n - 1] = 0.7;
    let g = p.grad_log_prob(&TokenSeq::empty(), &seq(&[1])).unwrap();
    let s = 1.0 / (1.0 + (-0.7f64).exp());
    assert!((g[n - 1] - (1.0 - s)).abs() < 1e-14);
    assert!((g[n - 2] + (1.0 - s)).abs() < 1e-14);
    assert!(g[..n - 2].iter().all(|&x| x == 0.0));
}

#[test]
fn gradient_matches_finite_differences_on_100_instances() {
    let mut worst: f64 = 0.0;
    for s in 0..100u64 {
        let v = 2 + (s as usize % 5);
        let max_len = 1 + (s as usize % 3);
        let p = random_policy(v, max_len, 1000 + s);
        let mut rng = crate::seed::rng(s);
        let ctx_len = rng.gen_range(0..5);
        let ctx = TokenSeq::new((0..ctx_len).map(|_| rng.gen_range(1..v as u32)).collect());
        let len = rng.gen_range(0..=max_len);
        let y = TokenSeq::new((0..len).map(|_| rng.gen_range(1..v as u32)).collect());
        let g = p.grad_log_prob(&ctx, &y).unwrap();
        let fd = fd_grad(&p, &ctx, &y, 1e-5);
        worst = worst.max(rel_err(&g, &fd));
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn gradient_of_total_mass_vanishes() {
    let p = random_policy(4, 2, 8);
    let ctx = seq(&[3, 1]);
    let d = p.enumerate_distribution(&ctx, 2, DEFAULT_ENUMERATION_CAP).unwrap();
    let mut g = vec![0.0; p.num_params()];
    for (y, lp) in d.support.iter().zip(&d.log_probs) {
        p.accumulate_grad_log_prob(&ctx, y, lp.exp(), &mut g).unwrap();
    }
    assert!(g.iter().map(|x| x * x).sum::<f64>().sqrt() < 1e-6);
}

#[test]
fn token_kl_gradient_matches_finite_differences() {
    let p = random_policy(4, 3, 31);
    let r = random_policy(4, 3, 32);
    let ctx = seq(&[2, 3]);
    let y = seq(&[3, 1]);
    let mut g = vec![0.0; p.num_params()];
    p.accumulate_grad_token_kl(&r, &ctx, &y, 1.0, &mut g).unwrap();
    let fd: Vec<f64> = (0..p.num_params())
        .map(|i| {
            let mut a = p.clone();
            a.params_mut_unchecked()[i] += 1e-5;
            let mut b = p.clone();
            b.params_mut_unchecked()[i] -= 1e-5;
            (a.token_kl(&r, &ctx, &y).unwrap() - b.token_kl(&r, &ctx, &y).unwrap()) / 2e-5
        })
        .collect();
    assert!(rel_err(&g, &fd) < 1e-4);
}

#[test]
fn expected_token_kl_equals_sequence_kl() {
    let p = random_policy(3, 3, 41);
    let r = random_policy(3, 3, 42);
    let ctx = seq(&[2]);
    let dp = p.enumerate_distribution(&ctx, 3, DEFAULT_ENUMERATION_CAP).unwrap();
    let dq = r.enumerate_distribution(&ctx, 3, DEFAULT_ENUMERATION_CAP).unwrap();
    let exact = dp.kl(&dq).unwrap();
    let via_tokens: f64 = dp.support.iter().zip(dp.probs()).map(|(y, w)| w * p.token_kl(&r, &ctx, y).unwrap()).sum();
    assert!((exact - via_tokens).abs() < 1e-10);
    assert!(exact >= 0.0);
}

#[test]
fn frozen_policy_rejects_updates() {
    let mut p = random_policy(4, 2, 2).frozen();
    let before = p.params().to_vec();
    assert!(matches!(p.grad_log_prob(&TokenSeq::empty(), &TokenSeq::empty()), Err(PopiError::FrozenPolicy)));
    let delta = vec![1.0; p.num_params()];
    assert!(matches!(p.apply_update(&delta, 1.0), Err(PopiError::FrozenPolicy)));
    assert!(p.set_params(delta).is_err());
    assert_eq!(p.params(), &before[..]);
}

#[test]
fn f32_policy_agrees_with_f64() {
    let p = random_policy(5, 3, 4);
    let q: Policy<f32> = p.cast();
    let ctx = seq(&[1, 2]);
    let y = seq(&[3, 4]);
    let a = p.log_prob(&ctx, &y).unwrap();
    let b = q.log_prob(&ctx, &y).unwrap() as f64;
    assert!((a - b).abs() < 1e-4);
}

proptest! {
    #[test]
    fn distributions_normalize(seed in 0u64..10_000, v in 2usize..6, ctx in proptest::collection::vec(1u32..6, 0..6)) {
        let p = random_policy(v, 3, seed);
        let ctx = TokenSeq::new(ctx.into_iter().map(|t| 1 + t % (v as u32 - 1)).collect());
        let d = p.enumerate_distribution(&ctx, 3, DEFAULT_ENUMERATION_CAP).unwrap();
        prop_assert!((d.total_mass() - 1.0).abs() < 1e-9);
        for row in p.step_distributions(&ctx, &TokenSeq::empty()).unwrap() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
