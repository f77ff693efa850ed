use super::*;
use crate::policy::{Arch, ExactDistribution, Role, Vocab, DEFAULT_ENUMERATION_CAP};
use crate::synthworld::Persona;

const V: usize = 5;

fn arch(max_len: usize) -> Arch {
    Arch { embed_dim: 4, hidden_dim: 5, context_window: 16, max_len }
}

fn policy(seed: u64, scale: f64) -> Policy<f64> {
    let mut p = Policy::new(Vocab::new(V).unwrap(), arch(3), Role::Generation, seed).unwrap();
    p.params_mut_unchecked().iter_mut().for_each(|x| *x *= scale);
    p
}

fn inf_policy(seed: u64) -> Policy<f64> {
    let mut p = Policy::new(Vocab::new(V).unwrap(), arch(2), Role::Inference, seed).unwrap();
    p.params_mut_unchecked().iter_mut().for_each(|x| *x *= 15.0);
    p
}

fn seq(t: &[u32]) -> TokenSeq {
    TokenSeq::new(t.to_vec())
}

fn pair(x: &[u32], c: &[u32], r: &[u32]) -> PreferencePair {
    PreferencePair::new(seq(x), seq(c), seq(r)).unwrap()
}

fn user(id: usize, signals: &[u32], pairs: Vec<PreferencePair>) -> UserRecord {
    UserRecord::new(id, Persona { id, weights: vec![0.0; 3] }, seq(signals), pairs, vec![])
}

fn empty_inf() -> Policy<f64> {
    Policy::constant_output(Vocab::new(V).unwrap(), arch(2), Role::Inference, &TokenSeq::empty()).unwrap()
}

/// Log-probability read off the enumerated distribution rather than `log_prob`.
fn enum_lp(p: &Policy<f64>, ctx: &TokenSeq, y: &TokenSeq) -> f64 {
    let d = p.enumerate_distribution(ctx, 3, DEFAULT_ENUMERATION_CAP).unwrap();
    let i = d.support.iter().position(|s| s == y).unwrap();
    d.probs()[i].ln()
}

fn oracle_dpo(beta: f64, delta: f64) -> f64 {
    -(1.0 / (1.0 + (-beta * delta).exp())).ln()
}

#[test]
fn coupled_alpha_values() {
    let d = ObjectiveConfig::dpo(0.1f64).unwrap();
    assert!((d.alpha - 0.0002).abs() < 1e-18);
    let i = ObjectiveConfig::ipo(0.1f64).unwrap();
    assert!((i.alpha - 0.04).abs() < 1e-15);
    assert_eq!(ObjectiveConfig::dpo(0.1).unwrap().with_alpha(0.5).unwrap().alpha, 0.5);
    assert!(ObjectiveConfig::<f64>::dpo(0.0).is_err());
    assert!(ObjectiveConfig::dpo(0.1).unwrap().with_alpha(-1.0).is_err());
}

#[test]
fn pair_requires_distinct_responses() {
    assert!(PreferencePair::new(seq(&[2]), seq(&[3]), seq(&[3])).is_err());
}

#[test]
fn dedicated_loss_identical_policies_is_ln2() {
    let p = policy(1, 10.0);
    let cfg = ObjectiveConfig::dpo(0.1).unwrap();
    let l = dpo_dedicated_loss(&p, &p, &pair(&[2], &[3, 4], &[4]), &cfg).unwrap();
    assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    assert!((cfg.loss_from_margin(10.0) - 0.313262).abs() < 1e-6);
    assert!(dpo_dedicated_loss(&p, &p, &pair(&[2], &[3], &[4]), &ObjectiveConfig::ipo(0.1).unwrap()).is_err());
}

#[test]
fn dedicated_loss_matches_enumeration_oracle() {
    let cfg = ObjectiveConfig::dpo(0.5).unwrap();
    for s in 0..10 {
        let p = policy(10 + s, 10.0);
        let r = policy(20 + s, 10.0);
        let pr = pair(&[2, 3], &[4, 1], &[2]);
        let ctx = TokenSeq::compose(&TokenSeq::empty(), &pr.prompt);
        let delta = (enum_lp(&p, &ctx, &pr.chosen) - enum_lp(&r, &ctx, &pr.chosen))
            - (enum_lp(&p, &ctx, &pr.rejected) - enum_lp(&r, &ctx, &pr.rejected));
        let got = dpo_dedicated_loss(&p, &r, &pr, &cfg).unwrap();
        assert!((got - oracle_dpo(0.5, delta)).abs() < 1e-9);
    }
}

#[test]
fn summary_blind_generator_gives_neutral_losses() {
    let mut g = policy(3, 10.0);
    g.blind_to_context();
    let pr = pair(&[2], &[3], &[4, 4]);
    let z = seq(&[2, 3]);
    let dpo = sa_loss_pointwise(&g, &g, &pr, &z, &ObjectiveConfig::dpo(0.1).unwrap()).unwrap();
    assert!((dpo - std::f64::consts::LN_2).abs() < 1e-12);
    for beta in [0.1, 0.05, 0.01] {
        let ipo = sa_loss_pointwise(&g, &g, &pr, &z, &ObjectiveConfig::ipo(beta).unwrap()).unwrap();
        assert!((ipo - 1.0 / (4.0 * beta * beta)).abs() < 1e-9 * ipo);
    }
    let ipo = sa_loss_pointwise(&g, &g, &pr, &z, &ObjectiveConfig::ipo(0.1).unwrap()).unwrap();
    assert!((ipo - 25.0).abs() < 1e-9);
}

#[test]
fn small_beta_large_margin() {
    let cfg = ObjectiveConfig::dpo(0.01f64).unwrap();
    assert!((cfg.loss_from_margin(10.0) - 0.644397).abs() < 1e-6);
    assert!((cfg.loss_from_margin(-10.0) - 0.744397).abs() < 1e-6);
}

#[test]
fn pointwise_matches_enumeration_oracle() {
    for (k, cfg) in [ObjectiveConfig::dpo(0.1).unwrap(), ObjectiveConfig::ipo(0.05).unwrap()].into_iter().enumerate() {
        for s in 0..8u64 {
            let g = policy(40 + s + 100 * k as u64, 12.0);
            let r = policy(60 + s, 12.0);
            let pr = pair(&[3], &[2, 2], &[4, 1, 3]);
            let z = seq(&[4, 2]);
            let with_z = TokenSeq::compose(&z, &pr.prompt);
            let no_z = TokenSeq::compose(&TokenSeq::empty(), &pr.prompt);
            let delta = (enum_lp(&g, &with_z, &pr.chosen) - enum_lp(&r, &no_z, &pr.chosen))
                - (enum_lp(&g, &with_z, &pr.rejected) - enum_lp(&r, &no_z, &pr.rejected));
            let expect = match cfg.variant {
                Variant::Dpo => oracle_dpo(cfg.beta, delta),
                Variant::Ipo => (delta - 1.0 / (2.0 * cfg.beta)).powi(2),
            };
            let got = sa_loss_pointwise(&g, &r, &pr, &z, &cfg).unwrap();
            assert!((got - expect).abs() < 1e-9 * expect.max(1.0));
        }
    }
}

#[test]
fn dpo_loss_is_positive_and_decreasing_in_margin() {
    let cfg = ObjectiveConfig::dpo(0.1).unwrap();
    let grid: Vec<f64> = (-200..=200).map(|i| i as f64 * 0.5).collect();
    let vals: Vec<f64> = grid.iter().map(|&d| cfg.loss_from_margin(d)).collect();
    assert!(vals.iter().all(|&v| v > 0.0));
    assert!(vals.windows(2).all(|w| w[1] < w[0]));
}

#[test]
fn ipo_minimum_at_half_inverse_beta() {
    for beta in [0.1, 0.05, 0.01] {
        let cfg = ObjectiveConfig::ipo(beta).unwrap();
        let star = 1.0 / (2.0 * beta);
        assert_eq!(cfg.loss_from_margin(star), 0.0);
        for eps in [1e-3, 0.1, 1.0] {
            assert!(cfg.loss_from_margin(star + eps) > 0.0);
            assert!(cfg.loss_from_margin(star - eps) > 0.0);
        }
    }
}

#[test]
fn batch_with_constant_summary_equals_pointwise() {
    let g = policy(5, 10.0);
    let r = policy(6, 10.0);
    let pr = pair(&[2], &[3], &[4]);
    let users = vec![user(0, &[2, 3], vec![pr.clone()])];
    let cfg = ObjectiveConfig::dpo(0.1).unwrap();
    let batch = sa_loss_batch(&g, &r, &empty_inf(), &users, &cfg, 3, 7).unwrap();
    let point = sa_loss_pointwise(&g, &r, &pr, &TokenSeq::empty(), &cfg).unwrap();
    assert!((batch - point).abs() < 1e-12);

    let z = seq(&[3, 2]);
    let const_inf = Policy::constant_output(Vocab::new(V).unwrap(), arch(2), Role::Inference, &z).unwrap();
    let batch = sa_loss_batch(&g, &r, &const_inf, &users, &cfg, 1, 7).unwrap();
    let point = sa_loss_pointwise(&g, &r, &pr, &z, &cfg).unwrap();
    assert!((batch - point).abs() < 1e-12);
}

#[test]
fn duplicated_users_do_not_change_the_average() {
    let g = policy(5, 10.0);
    let r = policy(6, 10.0);
    let u = user(0, &[2, 3], vec![pair(&[2], &[3], &[4]), pair(&[3], &[4, 4], &[2])]);
    let cfg = ObjectiveConfig::dpo(0.1).unwrap();
    let inf = Policy::constant_output(Vocab::new(V).unwrap(), arch(2), Role::Inference, &seq(&[4])).unwrap();
    let one = sa_loss_batch(&g, &r, &inf, &[u.clone()], &cfg, 1, 3).unwrap();
    let two = sa_loss_batch(&g, &r, &inf, &[u.clone(), u], &cfg, 1, 3).unwrap();
    assert!((one - two).abs() < 1e-12);
}

#[test]
fn monte_carlo_batch_matches_exact_expectation() {
    let g = policy(7, 12.0);
    let r = policy(8, 12.0);
    let inf = inf_policy(9);
    let pr = pair(&[2], &[3, 3], &[4]);
    let u = user(0, &[2, 4, 4], vec![pr.clone()]);
    let cfg = ObjectiveConfig::dpo(0.5).unwrap();
    let ctx = TokenSeq::compose(&u.signals, &TokenSeq::empty());
    let d: ExactDistribution<f64> = inf.enumerate_distribution(&ctx, 2, DEFAULT_ENUMERATION_CAP).unwrap();
    let losses: Vec<f64> = d.support.iter().map(|z| sa_loss_pointwise(&g, &r, &pr, z, &cfg).unwrap()).collect();
    let probs = d.probs();
    let mean: f64 = probs.iter().zip(&losses).map(|(p, l)| p * l).sum();
    let var: f64 = probs.iter().zip(&losses).map(|(p, l)| p * (l - mean).powi(2)).sum();
    let n = 10_000;
    let est = sa_loss_batch(&g, &r, &inf, &[u], &cfg, n, 11).unwrap();
    assert!((est - mean).abs() <= 3.0 * (var / n as f64).sqrt(), "{est} vs {mean}");
}

#[test]
fn unified_reduces_to_batch_and_kl_is_exact() {
    let g = policy(12, 10.0);
    let r = policy(13, 10.0);
    let inf = inf_policy(14);
    let inf_ref = inf_policy(15);
    let users = vec![user(0, &[2, 3], vec![pair(&[2], &[3], &[4])]), user(1, &[4, 4, 1], vec![pair(&[3], &[2, 4], &[3])])];
    let cfg = ObjectiveConfig::dpo(0.1).unwrap();

    let zero = cfg.with_alpha(0.0).unwrap();
    let u0 = unified_loss(&inf, &inf_ref, &g, &r, &users, &zero, 2, 5, DEFAULT_ENUMERATION_CAP).unwrap();
    let b = sa_loss_batch(&g, &r, &inf, &users, &zero, 2, 5).unwrap();
    assert_eq!(u0.total.to_bits(), b.to_bits());

    let same = unified_loss(&inf, &inf, &g, &r, &users, &cfg, 2, 5, DEFAULT_ENUMERATION_CAP).unwrap();
    assert!(same.kl.abs() < 1e-15);
    assert_eq!(same.total, same.sa_loss);

    let big = cfg.with_alpha(0.7).unwrap();
    let u = unified_loss(&inf, &inf_ref, &g, &r, &users, &big, 2, 5, DEFAULT_ENUMERATION_CAP).unwrap();
    assert_eq!(u.kl_estimator, KlEstimator::ExactEnumeration);
    let mut kl_oracle = 0.0;
    for us in &users {
        let ctx = TokenSeq::compose(&us.signals, &TokenSeq::empty());
        let p = inf.enumerate_distribution(&ctx, 2, DEFAULT_ENUMERATION_CAP).unwrap().probs();
        let q = inf_ref.enumerate_distribution(&ctx, 2, DEFAULT_ENUMERATION_CAP).unwrap().probs();
        kl_oracle += p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum::<f64>() / users.len() as f64;
    }
    assert!((u.kl - kl_oracle).abs() < 1e-8);
    assert!((u.total - (u.sa_loss + 0.7 * kl_oracle)).abs() < 1e-8);

    let mc = unified_loss(&inf, &inf_ref, &g, &r, &users, &big, 4000, 5, 3).unwrap();
    assert_eq!(mc.kl_estimator, KlEstimator::PerTokenMonteCarlo);
    assert!((mc.kl - kl_oracle).abs() < 0.05 * kl_oracle.max(0.1));
}

#[test]
fn empty_users_and_numeric_errors() {
    let g = policy(1, 1.0);
    let cfg = ObjectiveConfig::dpo(0.1).unwrap();
    assert!(matches!(sa_loss_batch(&g, &g, &empty_inf(), &[], &cfg, 1, 0), Err(PopiError::InvalidInput(_))));
    struct NanModel;
    impl SequenceModel<f64> for NanModel {
        fn vocab(&self) -> Vocab {
            Vocab::new(V).unwrap()
        }
        fn max_len(&self) -> usize {
            3
        }
        fn log_prob(&self, _: &TokenSeq, _: &TokenSeq) -> Result<f64> {
            Ok(f64::NAN)
        }
        fn sample(&self, _: &TokenSeq, _: u64, _: usize) -> Result<TokenSeq> {
            Ok(TokenSeq::empty())
        }
        fn enumerate(&self, _: &TokenSeq, _: usize, _: usize) -> Result<ExactDistribution<f64>> {
            unimplemented!()
        }
    }
    assert!(matches!(
        sa_loss_pointwise(&NanModel, &g, &pair(&[2], &[3], &[4]), &TokenSeq::empty(), &cfg),
        Err(PopiError::Numeric(_))
    ));
}

#[test]
fn empty_summaries_make_loss_independent_of_inference() {
    let g = policy(21, 10.0);
    let r = policy(22, 10.0);
    let users = vec![user(0, &[2, 3], vec![pair(&[2], &[3], &[4]), pair(&[4], &[2], &[2, 2])])];
    let cfg = ObjectiveConfig::dpo(0.1).unwrap();
    let base = batch_loss(&g, &r, &Conditioning::None, &users, &[0], &cfg, 1, 0, None).unwrap().0;
    for s in 0..5 {
        let inf = inf_policy(100 + s);
        let with_inf = batch_loss(&g, &r, &Conditioning::None, &users, &[0], &cfg, 1, s, None).unwrap().0;
        assert_eq!(with_inf, base);
        // Any inference policy collapsed to EOS gives the same value.
        let _ = inf;
        assert_eq!(sa_loss_batch(&g, &r, &empty_inf(), &users, &cfg, 1, s).unwrap(), base);
    }
}

/// Returns garbage for any context with tokens before the separator.
struct PromptOnlyGuard<'a>(&'a Policy<f64>);

impl SequenceModel<f64> for PromptOnlyGuard<'_> {
    fn vocab(&self) -> Vocab {
        self.0.vocab()
    }
    fn max_len(&self) -> usize {
        self.0.arch().max_len
    }
    fn log_prob(&self, ctx: &TokenSeq, seq: &TokenSeq) -> Result<f64> {
        if ctx.tokens().first() != Some(&crate::SEP) {
            return Ok(-1234.5);
        }
        self.0.log_prob(ctx, seq)
    }
    fn sample(&self, ctx: &TokenSeq, seed: u64, max_len: usize) -> Result<TokenSeq> {
        self.0.sample(ctx, seed, max_len)
    }
    fn enumerate(&self, ctx: &TokenSeq, max_len: usize, cap: usize) -> Result<ExactDistribution<f64>> {
        self.0.enumerate_distribution(ctx, max_len, cap)
    }
}

#[test]
fn reference_terms_never_see_the_summary() {
    let g = policy(31, 10.0);
    let r = policy(32, 10.0);
    let pr = pair(&[2], &[3], &[4, 4]);
    let cfg = ObjectiveConfig::dpo(0.1).unwrap();
    for z in [seq(&[2]), seq(&[3, 4])] {
        let plain = sa_loss_pointwise(&g, &r, &pr, &z, &cfg).unwrap();
        let guarded = sa_loss_pointwise(&g, &PromptOnlyGuard(&r), &pr, &z, &cfg).unwrap();
        assert_eq!(plain, guarded);
    }
}

fn fd_check(g: &Policy<f64>, r: &Policy<f64>, inf: &Policy<f64>, users: &[UserRecord], cfg: &ObjectiveConfig<f64>) -> f64 {
    let grad = grad_unified_wrt_gen(g, r, inf, users, cfg, 2, 3).unwrap();
    let h = 1e-5;
    let fd: Vec<f64> = (0..g.num_params())
        .map(|i| {
            let mut a = g.clone();
            a.params_mut_unchecked()[i] += h;
            let mut b = g.clone();
            b.params_mut_unchecked()[i] -= h;
            (sa_loss_batch(&a, r, inf, users, cfg, 2, 3).unwrap() - sa_loss_batch(&b, r, inf, users, cfg, 2, 3).unwrap()) / (2.0 * h)
        })
        .collect();
    let num: f64 = grad.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let den: f64 = fd.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    num / den
}

#[test]
fn generator_gradient_matches_finite_differences() {
    for s in 0..6u64 {
        let g = policy(200 + s, 8.0);
        let r = policy(300 + s, 8.0);
        let inf = inf_policy(400 + s);
        let users = vec![
            user(0, &[2, 3], vec![pair(&[2], &[3], &[4]), pair(&[3], &[4, 2], &[1])]),
            user(1, &[4], vec![pair(&[4, 4], &[2, 2, 2], &[3])]),
        ];
        for cfg in [ObjectiveConfig::dpo(0.5).unwrap(), ObjectiveConfig::ipo(0.5).unwrap()] {
            let e = fd_check(&g, &r, &inf, &users, &cfg);
            assert!(e < 1e-4, "relative error {e}");
        }
    }
}

#[test]
fn symmetric_construction_is_stationary() {
    let g = policy(41, 10.0);
    let r = g.cloned_as(Role::GenerationReference).frozen();
    let users = vec![user(0, &[2], vec![pair(&[2], &[3], &[4, 4]), pair(&[2], &[4, 4], &[3])])];
    let grad = grad_unified_wrt_gen(&g, &r, &empty_inf(), &users, &ObjectiveConfig::dpo(0.1).unwrap(), 1, 0).unwrap();
    assert!(grad.iter().map(|x| x * x).sum::<f64>().sqrt() < 1e-8);
}

#[test]
fn beta_rescaling_on_one_parameter_toy() {
    let a = Arch { embed_dim: 1, hidden_dim: 1, context_window: 4, max_len: 1 };
    let vocab = Vocab::new(2).unwrap();
    let r = Policy::<f64>::zeros(vocab, a, Role::GenerationReference).unwrap();
    let mut g = Policy::<f64>::zeros(vocab, a, Role::Generation).unwrap();
    let n = g.num_params();
    g.params_mut_unchecked()[n - 1] = 0.8;
    let users = vec![user(0, &[1], vec![pair(&[1], &[1], &[])])];
    let inf = Policy::constant_output(vocab, Arch { embed_dim: 1, hidden_dim: 1, context_window: 4, max_len: 1 }, Role::Inference, &TokenSeq::empty()).unwrap();
    for beta in [0.1, 0.2, 0.4] {
        let grad = grad_unified_wrt_gen(&g, &r, &inf, &users, &ObjectiveConfig::dpo(beta).unwrap(), 1, 0).unwrap();
        let delta = 0.8;
        let expect = -beta / (1.0 + (beta * delta).exp());
        assert!((grad[n - 1] - expect).abs() < 1e-14);
        assert!((grad[n - 2] + expect).abs() < 1e-14);
        assert!(grad[..n - 2].iter().all(|&x| x == 0.0));
    }
}

#[test]
fn frozen_generator_has_no_gradient() {
    let g = policy(1, 1.0).frozen();
    let users = vec![user(0, &[2], vec![pair(&[2], &[3], &[4])])];
    assert!(matches!(
        grad_unified_wrt_gen(&g, &g, &empty_inf(), &users, &ObjectiveConfig::dpo(0.1).unwrap(), 1, 0),
        Err(PopiError::FrozenPolicy)
    ));
}

#[test]
fn gradient_pass_reports_the_same_loss() {
    let g = policy(51, 10.0);
    let r = policy(52, 10.0);
    let inf = inf_policy(53);
    let users = vec![user(0, &[2, 3], vec![pair(&[2], &[3], &[4])]), user(1, &[4], vec![pair(&[3], &[2], &[4, 4])])];
    let cfg = ObjectiveConfig::dpo(0.1).unwrap();
    let mut grad = vec![0.0; g.num_params()];
    let (l, _) = batch_loss(&g, &r, &Conditioning::summaries(&inf), &users, &[0, 1], &cfg, 2, 9, Some(&mut grad)).unwrap();
    assert_eq!(l.to_bits(), sa_loss_batch(&g, &r, &inf, &users, &cfg, 2, 9).unwrap().to_bits());
}
