//! Checks shared by the invariant tests and the acceptance run. Every check
//! panics with a message on failure.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use famle_core::adaptation::{argmin_lowest_index, embedding_losses, select_embedding_on};
use famle_core::experiment::{aggregate, run_comparison, ExperimentConfig};
use famle_core::meta::{
    famle_meta_train_from, initialize, loop_rng, maml_fo_train_from, maml_split,
    mean_post_adaptation_loss, reptile_train_from,
};
use famle_core::mpc::{plan_detailed, sample_candidate, PlanOutcome};
use famle_core::*;
use proptest::prelude::*;
use proptest::test_runner::{Config as PtConfig, RngAlgorithm, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn runner(cases: u32) -> TestRunner {
    let cfg = PtConfig {
        cases,
        failure_persistence: None,
        ..PtConfig::default()
    };
    TestRunner::new_with_rng(cfg, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn forall<S: Strategy>(cases: u32, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>)
where
    S::Value: std::fmt::Debug,
{
    if let Err(e) = runner(cases).run(&strategy, test) {
        panic!("{e}");
    }
}

pub fn random_params(rng: &mut ChaCha8Rng, arch: &Architecture) -> ModelParams<f64> {
    let mut p = ModelParams::init(arch, rng);
    for l in &mut p.layers {
        for b in &mut l.bias {
            *b = rng.random_range(-0.5..0.5);
        }
    }
    p
}

pub fn random_batch(rng: &mut ChaCha8Rng, n: usize, sd: usize, ad: usize) -> TransitionDataset<f64> {
    let v = |rng: &mut ChaCha8Rng, k: usize| (0..k).map(|_| rng.random_range(-1.5..1.5)).collect::<Vec<f64>>();
    TransitionDataset::new(
        (0..n)
            .map(|_| {
                let s = v(rng, sd);
                let a = v(rng, ad);
                let next = v(rng, sd);
                Transition::new(s, a, next)
            })
            .collect(),
    )
}

pub fn sine_corpus(n: usize, per: usize, seed: u64) -> MetaCorpus<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let specs: Vec<_> = (0..n).map(|_| sample_situation(Family::Sine, &mut rng)).collect();
    let data = specs
        .iter()
        .enumerate()
        .map(|(i, s)| collect_random_dataset(s, &CollectionConfig::new(per, seed * 100 + i as u64)).unwrap())
        .collect();
    MetaCorpus::new(data, specs).unwrap()
}

fn full_batch(k: usize, alpha: f64, beta: f64) -> InnerUpdateConfig {
    InnerUpdateConfig {
        full_batch: true,
        ..InnerUpdateConfig::new(k, alpha, beta)
    }
}

// ---------------------------------------------------------------- gradients

/// Central finite differences on a random small network. Returns the number
/// of coordinates checked.
pub fn gradient_check(seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = rng.random_range(1..=4);
    let ad = rng.random_range(0..=3);
    let ed = rng.random_range(0..=3);
    let depth = rng.random_range(0..=2);
    let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(1..=20)).collect();
    let arch = Architecture::new(sd, ad, ed, hidden);
    let mut p = random_params(&mut rng, &arch);
    p.norm.state_mean = (0..sd).map(|_| rng.random_range(-1.0..1.0)).collect();
    p.norm.state_std = (0..sd).map(|_| rng.random_range(0.5..2.0)).collect();
    p.norm.action_mean = (0..ad).map(|_| rng.random_range(-1.0..1.0)).collect();
    p.norm.action_std = (0..ad).map(|_| rng.random_range(0.5..2.0)).collect();
    let h = Embedding::init(ed, &mut rng);
    let n = rng.random_range(1..=8);
    let batch = random_batch(&mut rng, n, sd, ad);
    let g = grad(&p, &h, &batch).unwrap();

    let step = 1e-5;
    let flat = p.flatten();
    let mut fd = Vec::with_capacity(flat.len() + ed);
    let mut q = p.clone();
    for i in 0..flat.len() {
        let mut f = flat.clone();
        f[i] = flat[i] + step;
        q.set_flat(&f).unwrap();
        let up = nll_loss(&q, &h, &batch).unwrap();
        f[i] = flat[i] - step;
        q.set_flat(&f).unwrap();
        let dn = nll_loss(&q, &h, &batch).unwrap();
        fd.push((up - dn) / (2.0 * step));
    }
    for i in 0..ed {
        let mut e = h.clone();
        e.values[i] = h.values[i] + step;
        let up = nll_loss(&p, &e, &batch).unwrap();
        e.values[i] = h.values[i] - step;
        let dn = nll_loss(&p, &e, &batch).unwrap();
        fd.push((up - dn) / (2.0 * step));
    }
    let analytic: Vec<f64> = g.params.flatten().into_iter().chain(g.embedding.iter().copied()).collect();
    assert_eq!(analytic.len(), fd.len());
    for (k, (a, n)) in analytic.iter().zip(&fd).enumerate() {
        let err = (a - n).abs();
        assert!(
            err <= 1e-7 || err / a.abs().max(n.abs()) <= 1e-4,
            "seed {seed} coordinate {k}: backprop {a} vs finite difference {n}"
        );
    }
    analytic.len()
}

// ----------------------------------------------------------- update oracles

/// FAMLE with unit outer rates and one iteration equals one inner update
/// applied to the sampled situation.
pub fn famle_unit_rate_oracle() {
    let c = sine_corpus(4, 30, 21);
    let conf = MetaConfig {
        alpha_meta: 1.0,
        beta_meta: 1.0,
        inner: InnerUpdateConfig::new(3, 0.05, 0.04),
        outer_iterations: 1,
        rng_seed: 5,
    };
    let arch = Architecture::new(1, 0, 3, vec![10, 10]);
    let (theta, table) = initialize(&c, &arch, 4, conf.rng_seed).unwrap();
    let r = famle_meta_train_from(&c, theta.clone(), table.clone(), &conf, None).unwrap();

    let mut rng = loop_rng(conf.rng_seed);
    let i = rng.random_range(0..4);
    let (tt, th) = inner_update(&theta, table.get(i).unwrap(), &c.datasets[i], &conf.inner, &mut rng).unwrap();
    assert_eq!(r.theta_meta.layers, tt.layers);
    assert_eq!(r.embedding_table.get(i).unwrap(), &th);
    for j in (0..4).filter(|&j| j != i) {
        assert_eq!(r.embedding_table.get(j), table.get(j));
    }
}

/// Reptile with outer rate 1 and k = 1 is one SGD step on the sampled
/// situation, with and without a shared embedding.
pub fn reptile_single_step_oracle() {
    let c = sine_corpus(3, 25, 22);
    for embed in [0, 2] {
        let conf = MetaConfig {
            alpha_meta: 1.0,
            beta_meta: 1.0,
            inner: InnerUpdateConfig::new(1, 0.07, 0.07),
            outer_iterations: 1,
            rng_seed: 8,
        };
        let arch = Architecture::new(1, 0, embed, vec![9]);
        let (theta, table) = initialize(&c, &arch, 1, 3).unwrap();
        let h = table.entries()[0].clone();
        let r = reptile_train_from(&c, theta.clone(), h.clone(), &conf).unwrap();

        let mut rng = loop_rng(conf.rng_seed);
        let i = rng.random_range(0..3);
        let g = grad(&theta, &h, &c.datasets[i]).unwrap();
        let mut want = theta.clone();
        want.sgd_step(&g.params, 0.07);
        let mut want_h = h.clone();
        want_h.sgd_step(&g.embedding, 0.07);
        assert_eq!(r.theta_meta.layers, want.layers, "embed {embed}");
        assert_eq!(r.embedding_table.entries()[0], want_h, "embed {embed}");
    }
}

/// First-order MAML with no inner steps is SGD on the evaluation halves of
/// the sampled situations.
pub fn maml_degenerate_oracle() {
    let c = sine_corpus(3, 24, 23);
    let conf = MetaConfig {
        alpha_meta: 0.05,
        beta_meta: 0.05,
        inner: InnerUpdateConfig {
            k: 0,
            ..full_batch(1, 0.1, 0.1)
        },
        outer_iterations: 6,
        rng_seed: 13,
    };
    let arch = Architecture::new(1, 0, 0, vec![8, 8]);
    let (theta, _) = initialize(&c, &arch, 1, 4).unwrap();
    let r = maml_fo_train_from(&c, theta.clone(), Embedding::empty(), &conf).unwrap();

    let halves = maml_split(&c, conf.rng_seed).unwrap();
    let mut rng = loop_rng(conf.rng_seed);
    let mut want = theta;
    for _ in 0..conf.outer_iterations {
        let i = rng.random_range(0..3);
        let g = grad(&want, &Embedding::empty(), &halves[i].1).unwrap();
        want.sgd_step(&g.params, 0.05);
    }
    assert_eq!(r.theta_meta, want);
}

// --------------------------------------------------------------- adaptation

pub fn window_fifo() {
    forall(
        300,
        (1usize..12, prop::collection::vec(-10.0f64..10.0, 0..40)),
        |(m, xs)| {
            let mut w = ObservationWindow::new(m).unwrap();
            for (n, &x) in xs.iter().enumerate() {
                w.push(Transition::new(vec![x], vec![], vec![x]));
                prop_assert_eq!(w.len(), (n + 1).min(m));
            }
            let got: Vec<f64> = w.iter().map(|t| t.state[0]).collect();
            let keep = xs.len().min(m);
            prop_assert_eq!(got, xs[xs.len() - keep..].to_vec());
            Ok(())
        },
    );
}

/// The selected index depends only on the ordering of the losses: it moves
/// with a permutation and ignores a common shift.
pub fn argmax_permutation_invariance() {
    let losses = prop::collection::hash_set(-10_000i32..10_000, 1..12)
        .prop_map(|s| s.into_iter().map(|v| v as f64 / 7.0).collect::<Vec<f64>>());
    let strategy = losses.prop_flat_map(|v| {
        let n = v.len();
        (Just(v), Just((0..n).collect::<Vec<usize>>()).prop_shuffle(), -1e3f64..1e3)
    });
    forall(300, strategy, |(v, perm, shift)| {
        let best = argmin_lowest_index(&v).unwrap();
        let permuted: Vec<f64> = perm.iter().map(|&p| v[p]).collect();
        let pb = argmin_lowest_index(&permuted).unwrap();
        prop_assert_eq!(perm[pb], best);
        let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
        prop_assert_eq!(argmin_lowest_index(&shifted).unwrap(), best);
        Ok(())
    });
}

/// Selection on real tables agrees with re-scoring every row.
pub fn selection_rescoring() {
    forall(60, any::<u64>(), |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arch = Architecture::new(2, 1, 3, vec![6]);
        let p = random_params(&mut rng, &arch);
        let table = EmbeddingTable::init(5, 3, &mut rng).unwrap();
        let data = random_batch(&mut rng, 7, 2, 1);
        let idx = select_embedding_on(&p, &table, &data).unwrap();
        let losses = embedding_losses(&p, &table, &data).unwrap();
        for h in table.iter() {
            prop_assert!(nll_loss(&p, h, &data).unwrap() >= losses[idx]);
        }
        prop_assert_eq!(nll_loss(&p, table.get(idx).unwrap(), &data).unwrap(), losses[idx]);
        Ok(())
    });
}

/// Two adaptations with the same window and seed agree bit for bit, even
/// with an unrelated adaptation in between, and leave their inputs alone.
pub fn restart_purity() {
    forall(30, any::<u64>(), |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arch = Architecture::new(2, 1, 2, vec![8]);
        let theta = random_params(&mut rng, &arch);
        let table = EmbeddingTable::init(3, 2, &mut rng).unwrap();
        let mut w = ObservationWindow::new(12).unwrap();
        let mut other = ObservationWindow::new(12).unwrap();
        for t in random_batch(&mut rng, 15, 2, 1).iter() {
            w.push(t.clone());
        }
        for t in random_batch(&mut rng, 9, 2, 1).iter() {
            other.push(t.clone());
        }
        let cfg = InnerUpdateConfig {
            batch_size: 5,
            ..InnerUpdateConfig::new(4, 0.05, 0.05)
        };
        let (t0, h0) = (theta.clone(), table.clone());
        let a = adapt(&theta, &table, &w, &cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        adapt(&theta, &table, &other, &cfg, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let b = adapt(&theta, &table, &w, &cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        prop_assert_eq!(a, b);
        prop_assert_eq!(theta, t0);
        prop_assert_eq!(table, h0);
        Ok(())
    });
}

// ---------------------------------------------------------------- inner rule

pub fn inner_update_purity_and_determinism() {
    forall(60, (any::<u64>(), 1usize..6, 1usize..20), |(seed, k, batch)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arch = Architecture::new(2, 2, 2, vec![7]);
        let p = random_params(&mut rng, &arch);
        let h = Embedding::init(2, &mut rng);
        let data = random_batch(&mut rng, 12, 2, 2);
        let (p0, h0, d0) = (p.clone(), h.clone(), data.clone());
        let cfg = InnerUpdateConfig {
            batch_size: batch,
            ..InnerUpdateConfig::new(k, 0.03, 0.02)
        };
        let a = inner_update(&p, &h, &data, &cfg, &mut ChaCha8Rng::seed_from_u64(seed ^ 1)).unwrap();
        let b = inner_update(&p, &h, &data, &cfg, &mut ChaCha8Rng::seed_from_u64(seed ^ 1)).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(p, p0);
        prop_assert_eq!(h, h0);
        prop_assert_eq!(data, d0);
        Ok(())
    });
}

// -------------------------------------------------------------- meta-training

/// Replays a FAMLE run from its log: one row per iteration changes, the
/// outer step is the interpolation toward the inner update's target, and the
/// logged losses are the losses before and after the inner update.
pub fn outer_update_algebra_and_locality() {
    for (seed, alpha, beta) in [(1u64, 0.3, 0.7), (2, 1.0, 0.5), (3, 0.05, 1.0)] {
        let c = sine_corpus(5, 20, 30 + seed);
        let conf = MetaConfig {
            alpha_meta: alpha,
            beta_meta: beta,
            inner: full_batch(3, 0.03, 0.05),
            outer_iterations: 40,
            rng_seed: seed,
        };
        let arch = Architecture::new(1, 0, 3, vec![10]);
        let (theta, table) = initialize(&c, &arch, 5, seed).unwrap();
        let mut snaps = vec![(theta.clone(), table.clone())];
        let mut obs = |_: usize, t: &ModelParams<f64>, h: &EmbeddingTable<f64>| snaps.push((t.clone(), h.clone()));
        let r = famle_meta_train_from(&c, theta, table, &conf, Some(&mut obs)).unwrap();
        assert_eq!(r.training_log.len(), 40);
        let close = |lhs: f64, rhs: f64, scale: f64| (lhs - rhs).abs() <= 1e-12 * (1.0 + scale.abs());
        for (it, e) in r.training_log.iter().enumerate() {
            let (pre_t, pre_h) = &snaps[it];
            let (post_t, post_h) = &snaps[it + 1];
            let i = e.situation_index;
            for j in (0..5).filter(|&j| j != i) {
                assert_eq!(pre_h.get(j), post_h.get(j), "iteration {it} touched row {j}");
            }
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let (tt, th) = inner_update(pre_t, pre_h.get(i).unwrap(), &c.datasets[i], &conf.inner, &mut rng).unwrap();
            assert_eq!(e.loss_before, nll_loss(pre_t, pre_h.get(i).unwrap(), &c.datasets[i]).unwrap());
            assert_eq!(e.loss_after, nll_loss(&tt, &th, &c.datasets[i]).unwrap());
            for ((post, pre), tgt) in post_t.flatten().iter().zip(pre_t.flatten()).zip(tt.flatten()) {
                assert!(close(post - pre, alpha * (tgt - pre), pre), "theta algebra at iteration {it}");
            }
            let (hp, hq) = (&pre_h.get(i).unwrap().values, &post_h.get(i).unwrap().values);
            for ((post, pre), tgt) in hq.iter().zip(hp).zip(&th.values) {
                assert!(close(post - pre, beta * (tgt - pre), *pre), "embedding algebra at iteration {it}");
            }
        }
    }
}

/// Mean post-adaptation loss over the 5-situation sine corpus at iteration
/// 100 against the final iteration, for 10 seeds. Returns how many improved.
pub fn sine_meta_progress() -> usize {
    let iterations = 1000;
    let inner = InnerUpdateConfig {
        batch_size: 5,
        ..InnerUpdateConfig::new(5, 0.02, 0.02)
    };
    let mut improved = 0;
    for seed in 0..10u64 {
        let c = sine_corpus(5, 50, 200 + seed);
        let conf = MetaConfig {
            alpha_meta: 1.0,
            beta_meta: 1.0,
            inner: inner.clone(),
            outer_iterations: iterations,
            rng_seed: seed,
        };
        let arch = Architecture::new(1, 0, 4, vec![20, 20]);
        let (theta, table) = initialize(&c, &arch, 5, seed).unwrap();
        let mut curve = Vec::new();
        let mut obs = |it: usize, t: &ModelParams<f64>, h: &EmbeddingTable<f64>| {
            if (it + 1).is_multiple_of(100) {
                curve.push(mean_post_adaptation_loss(&c, t, h, &inner, seed).unwrap());
            }
        };
        famle_meta_train_from(&c, theta, table, &conf, Some(&mut obs)).unwrap();
        assert_eq!(curve.len(), iterations / 100);
        if curve[curve.len() - 1] < curve[0] {
            improved += 1;
        }
    }
    improved
}

// ----------------------------------------------------------------------- MPC

fn quadratic_reward(s: &[f64], a: &[f64], next: &[f64]) -> f64 {
    -next.iter().map(|v| v * v).sum::<f64>() - 0.1 * a.iter().map(|v| v * v).sum::<f64>() + 0.01 * s[0]
}

#[derive(Debug, Clone)]
struct PlanCase {
    model: AdaptedModel<f64>,
    s0: Vec<f64>,
    cfg: MpcConfig,
}

fn plan_case(seed: u64) -> PlanCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = rng.random_range(1..=3);
    let ad = rng.random_range(1..=2);
    let ed = rng.random_range(0..=2);
    let arch = Architecture::new(sd, ad, ed, vec![6]);
    let theta = random_params(&mut rng, &arch);
    let h = Embedding::init(ed, &mut rng);
    let low: Vec<f64> = (0..ad).map(|_| rng.random_range(-2.0..0.0)).collect();
    let high: Vec<f64> = low.iter().map(|l| l + rng.random_range(0.1..2.0)).collect();
    let cfg = MpcConfig {
        horizon: rng.random_range(1..=5),
        n_candidates: rng.random_range(1..=40),
        ..MpcConfig::default()
    }
    .with_bounds(low, high)
    .with_seed(rng.random());
    PlanCase {
        model: AdaptedModel::unadapted(theta, h, 0),
        s0: (0..sd).map(|_| rng.random_range(-1.0..1.0)).collect(),
        cfg,
    }
}

fn plan_in_pool(threads: usize, c: &PlanCase) -> PlanOutcome<f64> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap()
        .install(|| plan_detailed(&c.model, &quadratic_reward, &c.s0, &c.cfg).unwrap())
}

/// Re-scores every candidate: the chosen one attains the maximum (lowest
/// index on ties), every action is inside the bounds, and each total equals
/// the sum of its per-step rewards.
pub fn plan_argmax_bounds_and_accounting() {
    forall(80, any::<u64>(), |seed| {
        let c = plan_case(seed);
        let out = plan_detailed(&c.model, &quadratic_reward, &c.s0, &c.cfg).unwrap();
        let mut best = 0;
        for i in 0..c.cfg.n_candidates {
            let traj = sample_candidate::<f64>(&c.cfg, i);
            for a in traj.actions.chunks(traj.action_dim) {
                for ((v, lo), hi) in a.iter().zip(&c.cfg.action_low).zip(&c.cfg.action_high) {
                    prop_assert!(lo <= v && v <= hi);
                }
            }
            let rs = rollout_score(&c.model, &quadratic_reward, &c.s0, &traj).unwrap();
            prop_assert_eq!(rs.total_reward, out.scores[i]);
            let summed: f64 = (0..traj.horizon())
                .map(|t| quadratic_reward(&rs.predicted_states[t], traj.action(t), &rs.predicted_states[t + 1]))
                .sum();
            prop_assert!((summed - rs.total_reward).abs() <= 1e-12 * (1.0 + summed.abs()));
            if out.scores[i] > out.scores[best] {
                best = i;
            }
        }
        prop_assert_eq!(out.best_index, best);
        prop_assert_eq!(out.action, sample_candidate::<f64>(&c.cfg, best).action(0).to_vec());
        Ok(())
    });
}

pub fn plan_parallel_determinism() {
    forall(25, any::<u64>(), |seed| {
        let mut c = plan_case(seed);
        c.cfg.n_candidates = 200;
        prop_assert_eq!(plan_in_pool(1, &c), plan_in_pool(4, &c));
        Ok(())
    });
}

/// The 1-D toy `s' = s + a`, reward `-|s'|`, from `s0 = 0.7`: fraction of
/// seeded plans whose action lands within 0.1 of -0.7.
pub fn mpc_toy_hits(trials: u64) -> u64 {
    let arch = Architecture::new(1, 1, 0, vec![]);
    let mut p = ModelParams::zeros(&arch);
    p.layers[0].weights = vec![0.0, 1.0];
    let model = AdaptedModel::unadapted(p, Embedding::empty(), 0);
    let reward = |_: &[f64], _: &[f64], n: &[f64]| -n[0].abs();
    (0..trials)
        .filter(|&seed| {
            let cfg = MpcConfig {
                horizon: 1,
                n_candidates: 1000,
                ..MpcConfig::default()
            }
            .with_bounds(vec![-1.0], vec![1.0])
            .with_seed(seed);
            let a = plan(&model, &reward, &[0.7], &cfg).unwrap();
            (a[0] + 0.7).abs() < 0.1
        })
        .count() as u64
}

/// A frozen zero network scores every candidate alike, so its controller is
/// a random policy. Compares point-mass cumulative rewards of the two.
pub fn frozen_prior_matches_random_policy() {
    let spec = SituationSpec::PointMass { friction: 1.0 };
    let reward = TaskReward::PointMassGoal;
    let (lo, hi) = Family::PointMass.action_bounds();
    let model = AdaptedModel::unadapted(ModelParams::zeros(&Architecture::new(4, 2, 0, vec![8])), Embedding::empty(), 0);
    let steps = 60;
    let episode = |seed: u64, frozen: bool| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s: Vec<f64> = spec.initial_state();
        let mut total = 0.0;
        for t in 0..steps {
            let a: Vec<f64> = if frozen {
                let cfg = MpcConfig {
                    horizon: 5,
                    n_candidates: 50,
                    ..MpcConfig::default()
                }
                .with_bounds(lo.clone(), hi.clone())
                .with_seed(famle_core::episode::step_seed(seed, t));
                plan(&model, &reward, &s, &cfg).unwrap()
            } else {
                lo.iter().zip(&hi).map(|(&l, &h)| rng.random_range(l..=h)).collect()
            };
            let next = spec.step(&s, &a).unwrap();
            total += reward.reward(&s, &a, &next);
            s = next;
        }
        total
    };
    let stats = |v: &[f64]| {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, var / n)
    };
    let frozen: Vec<f64> = (0..40).map(|s| episode(s, true)).collect();
    let random: Vec<f64> = (1000..1040).map(|s| episode(s, false)).collect();
    let ((mf, vf), (mr, vr)) = (stats(&frozen), stats(&random));
    assert!(
        (mf - mr).abs() <= 4.0 * (vf + vr).sqrt(),
        "frozen mean {mf:.3} vs random mean {mr:.3}"
    );
}

// ------------------------------------------------------ serialization, runs

pub fn checkpoint_round_trip() {
    forall(40, (any::<u64>(), 0usize..4, 1usize..5), |(seed, embed, rows)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arch = Architecture::new(3, 2, embed, vec![5, 4]);
        let mut theta = random_params(&mut rng, &arch);
        theta.norm.state_std = vec![0.3, 1.7, 2.2];
        let table = EmbeddingTable::init(rows, embed, &mut rng).unwrap();
        let ck = Checkpoint::new(Method::Famle, theta, table).unwrap();
        let back = Checkpoint::<f64>::from_json(&ck.to_json().unwrap()).unwrap();
        prop_assert_eq!(&back, &ck);
        let ck32 = Checkpoint::<f32>::from_json(&ck.to_json().unwrap()).unwrap();
        let back32 = Checkpoint::<f32>::from_json(&ck32.to_json().unwrap()).unwrap();
        prop_assert_eq!(back32, ck32);
        Ok(())
    });
}

pub fn config_round_trip() {
    for f in ["sine.toml", "arm.toml", "smoke.toml"] {
        let cfg = ExperimentConfig::load(&configs_dir().join(f)).unwrap();
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, cfg, "{f}");
    }
    let strategy = (
        any::<u64>(),
        1usize..20,
        0usize..9,
        prop::collection::vec(1usize..64, 0..3),
        1e-4f64..2.0,
        1e-4f64..2.0,
        prop::sample::subsequence(vec![Method::Famle, Method::Maml, Method::Reptile, Method::Scratch], 1..4),
    );
    forall(100, strategy, |(seed, n, embed, hidden, a, b, methods)| {
        let mut cfg = ExperimentConfig {
            seed,
            n_situations: n,
            methods,
            ..ExperimentConfig::default()
        };
        cfg.model.embed_dim = embed;
        cfg.model.hidden = hidden;
        cfg.meta.alpha_meta = a;
        cfg.adaptation.inner.beta = b;
        cfg.maml.alpha_meta = Some(a * b);
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        prop_assert_eq!(back, cfg);
        Ok(())
    });
}

fn tiny_arm_config() -> ExperimentConfig {
    ExperimentConfig::from_toml_str(
        r#"
family = { kind = "arm", joints = 2 }
n_situations = 3
n_transitions = 80
seeds = [0, 1, 2, 3, 4]
methods = ["famle", "scratch"]
episode_length = 15
[model]
embed_dim = 2
hidden = [8]
[meta]
outer_iterations = 10
[adaptation]
window = 8
every = 4
[adaptation.inner]
k = 2
alpha = 0.05
beta = 0.05
[planner]
horizon = 3
n_candidates = 12
"#,
    )
    .unwrap()
}

fn tiny_priors(cfg: &ExperimentConfig) -> (Vec<(Method, ControlPrior<f64>)>, SituationSpec) {
    use famle_core::experiment::{collect_corpus, control_prior, held_out_situation, metatrain};
    let corpus = collect_corpus(cfg).unwrap();
    let ck = Checkpoint::from_result(Method::Famle, &metatrain(cfg, &corpus, Method::Famle).unwrap());
    let priors = cfg
        .methods
        .iter()
        .map(|&m| (m, control_prior(cfg, m, Some(&ck), Some(&ck), cfg.seed).unwrap()))
        .collect();
    (priors, held_out_situation(cfg.family, &corpus.specs, cfg.seed).unwrap())
}

fn oracle_quantile(v: &[f64], q: f64) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let h = q * (s.len() as f64 - 1.0);
    let lo = h as usize;
    if lo + 1 >= s.len() {
        return s[lo];
    }
    s[lo] + (h - lo as f64) * (s[lo + 1] - s[lo])
}

/// Re-derives `aggregate.csv` from the written per-seed curves.
pub fn report_aggregation_from_curves() {
    let cfg = tiny_arm_config();
    let (priors, held_out) = tiny_priors(&cfg);
    let report = run_comparison(&cfg, &priors, &held_out).unwrap();
    let dir = tempfile::tempdir().unwrap();
    report.write(dir.path()).unwrap();

    let mut agg = csv::Reader::from_path(dir.path().join("aggregate.csv")).unwrap();
    let header = agg.headers().unwrap().clone();
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    let rows: Vec<csv::StringRecord> = agg.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), cfg.methods.len() * cfg.episode_length);
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * (1.0 + b.abs());

    for &m in &cfg.methods {
        let curves: Vec<Vec<f64>> = cfg
            .seeds
            .iter()
            .map(|s| {
                let mut r = csv::Reader::from_path(dir.path().join(m.name()).join(format!("seed_{s}.csv"))).unwrap();
                let rc = r.headers().unwrap().iter().position(|h| h == "reward").unwrap();
                r.records().map(|x| x.unwrap()[rc].parse::<f64>().unwrap()).collect()
            })
            .collect();
        let sums: Vec<Vec<f64>> = curves
            .iter()
            .map(|c| c.iter().scan(0.0, |acc, r| { *acc += r; Some(*acc) }).collect())
            .collect();
        let mine: Vec<&csv::StringRecord> = rows.iter().filter(|r| &r[col("method")] == m.name()).collect();
        assert_eq!(mine.len(), cfg.episode_length);
        for (t, row) in mine.iter().enumerate() {
            assert_eq!(row[col("step")].parse::<usize>().unwrap(), t);
            let r: Vec<f64> = curves.iter().map(|c| c[t]).collect();
            let c: Vec<f64> = sums.iter().map(|c| c[t]).collect();
            for (name, vals, q) in [
                ("reward_q25", &r, 0.25),
                ("reward_median", &r, 0.5),
                ("reward_q75", &r, 0.75),
                ("cumulative_q25", &c, 0.25),
                ("cumulative_median", &c, 0.5),
                ("cumulative_q75", &c, 0.75),
            ] {
                let got: f64 = row[col(name)].parse().unwrap();
                assert!(close(got, oracle_quantile(vals, q)), "{m} step {t} {name}");
            }
        }
        let run = report.runs.iter().find(|r| r.method == m).unwrap();
        assert_eq!(aggregate(run, cfg.episode_length).len(), cfg.episode_length);
    }
}

/// Identical inputs give identical datasets, training results, episodes and
/// comparison reports, whatever the worker count.
pub fn determinism() {
    let spec = SituationSpec::PointMass { friction: 2.5 };
    let cc = CollectionConfig::new(200, 4);
    assert_eq!(
        collect_random_dataset::<f64>(&spec, &cc).unwrap(),
        collect_random_dataset::<f64>(&spec, &cc).unwrap()
    );

    let c = sine_corpus(3, 30, 77);
    let arch = Architecture::new(1, 0, 2, vec![8]);
    let conf = MetaConfig {
        outer_iterations: 30,
        inner: InnerUpdateConfig {
            batch_size: 7,
            ..InnerUpdateConfig::new(3, 0.02, 0.02)
        },
        ..MetaConfig::default()
    };
    assert_eq!(famle_meta_train(&c, &arch, &conf).unwrap(), famle_meta_train(&c, &arch, &conf).unwrap());
    let a0 = arch.without_embedding();
    assert_eq!(maml_fo_train(&c, &a0, &conf).unwrap(), maml_fo_train(&c, &a0, &conf).unwrap());
    assert_eq!(reptile_train(&c, &a0, &conf).unwrap(), reptile_train(&c, &a0, &conf).unwrap());

    let cfg = tiny_arm_config();
    let (priors, held_out) = tiny_priors(&cfg);
    let in_pool = |n: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .unwrap()
            .install(|| run_comparison(&cfg, &priors, &held_out).unwrap())
    };
    assert_eq!(in_pool(1), in_pool(3));
}

/// Every invariant check, in the order the acceptance run reports them.
pub fn invariant_checks() -> Vec<(&'static str, fn())> {
    vec![
        ("window FIFO", window_fifo),
        ("argmax permutation invariance", argmax_permutation_invariance),
        ("selection re-scoring", selection_rescoring),
        ("restart purity", restart_purity),
        ("inner update purity and determinism", inner_update_purity_and_determinism),
        ("outer update algebra and locality", outer_update_algebra_and_locality),
        ("sine meta-progress", || {
            let n = sine_meta_progress();
            assert!(n >= 9, "only {n}/10 seeds improved");
        }),
        ("plan argmax, bounds, reward accounting", plan_argmax_bounds_and_accounting),
        ("plan parallel determinism", plan_parallel_determinism),
        ("frozen prior vs random policy", frozen_prior_matches_random_policy),
        ("checkpoint round trip", checkpoint_round_trip),
        ("config round trip", config_round_trip),
        ("report aggregation", report_aggregation_from_curves),
        ("determinism", determinism),
    ]
}
