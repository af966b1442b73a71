mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use ouexec::closed_form::BrownianClosedForm;
use ouexec::riccati::{solve_backward, theta_eval, RiccatiSolution};
use ouexec::simulation::{monte_carlo_outcomes, rollout, simulate_path, McConfig};
use ouexec::strategy::*;
use ouexec::{ExecutionSpec, ExecutionState, OuParams, TimeGrid};
use rand::Rng;

fn solve(ou: &OuParams, exec: &ExecutionSpec, n: usize) -> RiccatiSolution {
    solve_backward(ou, exec, &TimeGrid::new(exec.horizon, n).unwrap()).unwrap()
}

fn build(kind: StrategyKind, mode: Mode, ou: &OuParams, exec: &ExecutionSpec, q0: &DVector<f64>, sol: Option<&RiccatiSolution>) -> Strategy {
    let inputs = StrategyInputs {
        ou,
        sigma_ac: None,
        solution: sol,
    };
    build_strategy(&StrategyConfig::new(kind, mode), inputs, exec, q0).unwrap()
}

fn scaled(base: StrategyKind, factor: f64) -> StrategyKind {
    StrategyKind::Scaled {
        base: Box::new(base),
        factor,
    }
}

#[test]
fn hamiltonian_examples() {
    let exec = single_asset().1;
    let (h, v) = hamiltonian(&DVector::zeros(1), &exec).unwrap();
    assert_eq!(h, 0.0);
    assert_eq!(v[0], 0.0);
    let (h, v) = hamiltonian(&vec1(1.0), &exec).unwrap();
    assert!((h - 50.0).abs() < 1e-12);
    assert!((v[0] - 100.0).abs() < 1e-10);
}

#[test]
fn hamiltonian_is_a_supremum() {
    let mut g = rng(81);
    for d in 1..=3 {
        let eta = rand_spd(d, &mut g, 1.0);
        let exec = ExecutionSpec::without_impact(eta.clone(), DMatrix::zeros(d, d), 1.0, 1.0).unwrap();
        let p = rand_vec(d, &mut g) * 5.0;
        let (h, vstar) = hamiltonian(&p, &exec).unwrap();
        let obj = |v: &DVector<f64>| v.dot(&p) - v.dot(&(&eta * v));
        assert!((obj(&vstar) - h).abs() < 1e-12 * h.abs().max(1.0));
        let scale = vstar.norm().max(1.0);
        for _ in 0..10_000 {
            let v = &vstar + rand_vec(d, &mut g) * (scale * g.random_range(1e-4..2.0));
            assert!(obj(&v) <= h + 1e-12 * h.abs().max(1.0));
        }
    }
}

#[test]
fn feedback_vanishes_without_reversion_or_inventory() {
    let ou = OuParams::brownian(vec1(100.0), scalar(4.0)).unwrap();
    let exec = single_asset().1;
    let sol = solve(&ou, &exec, 1000);
    for t in [0.0, 0.3, 1.0] {
        assert_eq!(feedback_rate(&sol, t, &vec1(0.0), &vec1(123.0), &exec).unwrap()[0], 0.0);
    }
    assert!(feedback_rate(&sol, 1.1, &vec1(0.0), &vec1(1.0), &exec).is_err());
    assert!(feedback_rate(&sol, -0.1, &vec1(0.0), &vec1(1.0), &exec).is_err());
}

#[test]
fn feedback_sells_when_long_without_reversion() {
    let ou = OuParams::brownian(vec1(SA_SBAR), scalar(SA_SIGMA * SA_SIGMA)).unwrap();
    let exec = single_asset().1;
    let sol = solve(&ou, &exec, 2000);
    for k in 0..=20 {
        let t = k as f64 / 20.0;
        for q in [-500.0, 1.0, 2250.0] {
            let v = feedback_rate(&sol, t, &vec1(q), &vec1(SA_S0), &exec).unwrap()[0];
            assert!(v * q < 0.0, "t={t} q={q} v={v}");
        }
    }
}

#[test]
fn feedback_is_affine() {
    let (ou, exec) = pair(2e-5);
    let sol = solve(&ou, &exec, 2000);
    let mut g = rng(82);
    for t in [0.0, 0.37, 0.999] {
        let pts: Vec<(DVector<f64>, DVector<f64>)> = (0..3)
            .map(|_| (rand_vec(2, &mut g) * 1e4, &ou.sbar + rand_vec(2, &mut g)))
            .collect();
        let w = [0.3, -1.7, 2.4];
        let q = pts.iter().zip(w).fold(DVector::zeros(2), |a, (p, c)| a + &p.0 * c);
        let s = pts.iter().zip(w).fold(DVector::zeros(2), |a, (p, c)| a + &p.1 * c);
        let combo = pts.iter().zip(w).fold(DVector::zeros(2), |a, (p, c)| {
            a + feedback_rate(&sol, t, &p.0, &p.1, &exec).unwrap() * c
        });
        let direct = feedback_rate(&sol, t, &q, &s, &exec).unwrap();
        assert!((direct - &combo).amax() <= 1e-12 * combo.amax().max(1.0) * 10.0);
    }
}

#[test]
fn feedback_is_half_inverse_eta_times_gradient() {
    for (ou, exec) in [single_asset(), pair(2e-3)] {
        let d = ou.dim();
        let sol = solve(&ou, &exec, 2000);
        let eta_inv = exec.eta.clone().try_inverse().unwrap();
        let mut g = rng(83);
        for _ in 0..10 {
            let t = g.random_range(0.0..1.0);
            let q = rand_vec(d, &mut g) * 1000.0;
            let s = &ou.sbar + rand_vec(d, &mut g);
            let h = 1e-4 * (1.0 + q.norm());
            let grad = DVector::from_fn(d, |i, _| {
                let mut qp = q.clone();
                let mut qm = q.clone();
                qp[i] += h;
                qm[i] -= h;
                (theta_eval(&sol, t, &qp, &s).unwrap() - theta_eval(&sol, t, &qm, &s).unwrap()) / (2.0 * h)
            });
            let want = &eta_inv * grad * 0.5;
            let got = feedback_rate(&sol, t, &q, &s, &exec).unwrap();
            assert!((&got - &want).norm() <= 1e-5 * want.norm(), "{got} vs {want}");
        }
    }
}

#[test]
fn ac_rate_liquidates_monotonically() {
    let ou = OuParams::brownian(vec1(SA_SBAR), scalar(SA_SIGMA_AC * SA_SIGMA_AC)).unwrap();
    let exec = single_asset().1;
    assert_eq!(ac_rate(&ou, &exec, 0.5, &vec1(0.0)).unwrap()[0], 0.0);
    let n = 10_000;
    let dt = 1.0 / n as f64;
    let mut q = vec1(SA_Q0);
    for k in 0..n {
        let v = ac_rate(&ou, &exec, k as f64 * dt, &q).unwrap();
        let next = &q + v * dt;
        assert!(next[0] < q[0] && next[0] > 0.0);
        q = next;
    }
    assert!(q[0] < 0.01 * SA_Q0);
    let qs = DVector::from_vec(vec![3.0, -7.0]);
    let (ou2, exec2) = pair(2e-5);
    let bm = OuParams::brownian(ou2.sbar.clone(), ou2.sigma.clone()).unwrap();
    assert_eq!(ac_rate(&bm, &exec2, 0.4, &(-&qs)).unwrap(), -ac_rate(&bm, &exec2, 0.4, &qs).unwrap());
    assert!(ac_rate(&ou2, &exec2, 0.4, &qs).is_err());
}

#[test]
fn almgren_chriss_strategy_uses_the_closed_form() {
    let (ou, exec) = single_asset();
    let sigma_ac = scalar(SA_SIGMA_AC * SA_SIGMA_AC);
    let inputs = StrategyInputs {
        ou: &ou,
        sigma_ac: Some(&sigma_ac),
        solution: None,
    };
    let cfg = StrategyConfig::new(StrategyKind::AlmgrenChriss, Mode::Liquidation);
    let strat = build_strategy(&cfg, inputs, &exec, &vec1(SA_Q0)).unwrap();
    let bm = OuParams::brownian(ou.sbar.clone(), sigma_ac).unwrap();
    let a = BrownianClosedForm::new(&bm, &exec).unwrap().a(0.25).unwrap();
    let v = strat.rate(0.25, 1e-3, &vec1(1000.0), &vec1(1.0)).unwrap();
    assert!((v[0] - a[(0, 0)] / SA_ETA * 1000.0).abs() < 1e-9 * v[0].abs());
}

#[test]
fn twap_and_idle_rates() {
    let (ou, exec) = pair(2e-5);
    let twap = build(StrategyKind::Twap, Mode::Liquidation, &ou, &exec, &t4_q0(), None);
    let v = twap.rate(0.7, 0.01, &DVector::from_vec(vec![1.0, 2.0]), &t4_s0()).unwrap();
    assert_eq!(v, -t4_q0() / exec.horizon);
    let idle = build(scaled(StrategyKind::Twap, 0.0), Mode::Liquidation, &ou, &exec, &t4_q0(), None);
    assert_eq!(idle.rate(0.7, 0.01, &t4_q0(), &t4_s0()).unwrap(), DVector::zeros(2));
}

#[test]
fn stat_arb_mode_clears_penalty_and_inventory() {
    let (ou, exec) = pair(2e-3);
    let cfg = StrategyConfig::new(StrategyKind::OptimalOU, Mode::StatArb);
    let (resolved, q0) = cfg.resolve(&exec, &t4_q0()).unwrap();
    assert_eq!(resolved.penalty(), DMatrix::zeros(2, 2));
    assert_eq!(q0, DVector::zeros(2));
    let sol = solve(&ou, &resolved, 500);
    let strat = build(StrategyKind::OptimalOU, Mode::StatArb, &ou, &exec, &t4_q0(), Some(&sol));
    assert_eq!(strat.q0, DVector::zeros(2));
    assert_eq!(strat.exec.penalty(), DMatrix::zeros(2, 2));
    // A liquidation solution has the wrong terminal condition for stat-arb.
    let liq = solve(&ou, &exec, 500);
    let inputs = StrategyInputs {
        ou: &ou,
        sigma_ac: None,
        solution: Some(&liq),
    };
    assert!(build_strategy(&cfg, inputs, &exec, &t4_q0()).is_err());
}

#[test]
fn unit_scaling_is_identity() {
    let (ou, exec) = pair(2e-5);
    let sol = solve(&ou, &exec, 1000);
    let base = build(StrategyKind::OptimalOU, Mode::Liquidation, &ou, &exec, &t4_q0(), Some(&sol));
    let same = build(scaled(StrategyKind::OptimalOU, 1.0), Mode::Liquidation, &ou, &exec, &t4_q0(), Some(&sol));
    let path = simulate_path(&ou, &TimeGrid::new(1.0, PAIR_BARS).unwrap(), &t4_s0(), &mut rng(84)).unwrap();
    let init = ExecutionState::initial(t4_q0(), t4_s0(), 0.0);
    let a = rollout(&base, &exec, &init, &path).unwrap();
    let b = rollout(&same, &exec, &init, &path).unwrap();
    assert!((&a.v - &b.v).amax() <= 1e-12 * a.v.amax());
    assert_eq!(a.pnl, b.pnl);
}

#[test]
fn build_errors() {
    let (ou, exec) = single_asset();
    let inputs = StrategyInputs {
        ou: &ou,
        sigma_ac: None,
        solution: None,
    };
    let cfg = StrategyConfig::new(StrategyKind::OptimalOU, Mode::Liquidation);
    let msg = build_strategy(&cfg, inputs, &exec, &vec1(SA_Q0)).unwrap_err().to_string();
    assert!(msg.contains("Riccati solution"), "{msg}");

    let (ou2, _) = pair(2e-5);
    let bad_eta = ExecutionSpec::without_impact(
        DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1e-13])),
        DMatrix::identity(2, 2),
        1.0,
        1.0,
    )
    .unwrap();
    let inputs2 = StrategyInputs {
        ou: &ou2,
        sigma_ac: None,
        solution: None,
    };
    let twap = StrategyConfig::new(StrategyKind::Twap, Mode::Liquidation);
    let msg = build_strategy(&twap, inputs2, &bad_eta, &t4_q0()).unwrap_err().to_string();
    assert!(msg.contains("ill-conditioned"), "{msg}");
    assert!(build_strategy(&twap, inputs, &exec, &t4_q0()).is_err());
}

#[test]
fn merton_tracks_its_target() {
    let ou = pair_ou();
    let exec = pair(2e-3).1;
    let strat = build(StrategyKind::Merton, Mode::StatArb, &ou, &exec, &t4_q0(), None);
    // q0 is flat in stat-arb mode, so no default cap applies.
    assert_eq!(strat.max_rate, None);
    let m = ouexec::closed_form::MertonSolution::new(&ou, 2e-3, 1.0).unwrap();
    let s = &ou.sbar + DVector::from_vec(vec![0.01, -0.02]);
    let q = DVector::from_vec(vec![5.0, -3.0]);
    let dt = 1.0 / PAIR_BARS as f64;
    let v = strat.rate(0.2, dt, &q, &s).unwrap();
    let want = (m.position(0.2, &s).unwrap() - &q) / dt;
    assert!((v - &want).amax() < 1e-9 * want.amax());

    let mut cfg = StrategyConfig::new(StrategyKind::Merton, Mode::Liquidation);
    cfg.max_rate = Some(10.0);
    let inputs = StrategyInputs {
        ou: &ou,
        sigma_ac: None,
        solution: None,
    };
    let capped = build_strategy(&cfg, inputs, &exec, &t4_q0()).unwrap();
    let v = capped.rate(0.2, dt, &q, &(&ou.sbar * 1.1)).unwrap();
    assert!(v.amax() <= 10.0);
}

#[test]
fn optimal_control_beats_alternatives_in_utility() {
    let (ou, exec) = single_asset();
    let q0 = vec1(SA_Q0);
    let sol = solve(&ou, &exec, 5000);
    let init = ExecutionState::initial(q0.clone(), vec1(SA_S0), 0.0);
    let n = 20_000;
    let utilities = |kind: StrategyKind| -> Vec<f64> {
        let strat = build(kind, Mode::Liquidation, &ou, &exec, &q0, Some(&sol));
        monte_carlo_outcomes(&strat, &ou, &exec, &init, &McConfig::new(n, 5, SA_BARS))
            .unwrap()
            .iter()
            .map(|o| -(-SA_GAMMA * o.penalized_pnl).exp())
            .collect()
    };
    let best = utilities(StrategyKind::OptimalOU);
    for kind in [StrategyKind::Twap, scaled(StrategyKind::OptimalOU, 1.5)] {
        let other = utilities(kind.clone());
        let diff: Vec<f64> = best.iter().zip(&other).map(|(a, b)| a - b).collect();
        let (m, sd, _) = ouexec::simulation::moments(&diff);
        let z = m / (sd / (n as f64).sqrt());
        assert!(z > 3.0, "{kind:?}: z = {z}");
    }
}

#[test]
fn pair_inventories_are_long_short() {
    let (ou, exec) = pair(2e-3);
    let cfg = StrategyConfig::new(StrategyKind::OptimalOU, Mode::StatArb);
    let (resolved, _) = cfg.resolve(&exec, &t4_q0()).unwrap();
    let sol = solve(&ou, &resolved, 5000);
    let strat = build(StrategyKind::OptimalOU, Mode::StatArb, &ou, &exec, &t4_q0(), Some(&sol));
    for seed in [42, 43, 44] {
        let path = simulate_path(&ou, &TimeGrid::new(1.0, PAIR_BARS).unwrap(), &t4_s0(), &mut rng(seed)).unwrap();
        let tr = rollout(&strat, &strat.exec, &ExecutionState::initial(strat.q0.clone(), t4_s0(), 0.0), &path).unwrap();
        let a: Vec<f64> = tr.q.column(0).iter().map(|x| -3.46 * x).collect();
        let b: Vec<f64> = tr.q.column(1).iter().copied().collect();
        let corr = correlation(&a, &b);
        assert!(corr > 0.8, "seed {seed}: correlation {corr}");
    }
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn config_json_round_trip() {
    let mut cfg = StrategyConfig::new(scaled(StrategyKind::AlmgrenChriss, 1.5), Mode::Liquidation);
    cfg.overrides.gamma = Some(1e-3);
    cfg.overrides.q0 = Some(vec![10.0]);
    cfg.max_rate = Some(5.0);
    let json = serde_json::to_string(&cfg).unwrap();
    assert_eq!(serde_json::from_str::<StrategyConfig>(&json).unwrap(), cfg);
    let parsed: StrategyConfig = serde_json::from_str(r#"{"kind":"Merton","mode":"statarb"}"#).unwrap();
    assert_eq!(parsed.kind, StrategyKind::Merton);
    assert_eq!(parsed.mode, Mode::StatArb);

    let (ou, exec) = single_asset();
    let inputs = StrategyInputs {
        ou: &ou,
        sigma_ac: None,
        solution: None,
    };
    let strat = build_strategy(&StrategyConfig::new(StrategyKind::Twap, Mode::Liquidation), inputs, &exec, &vec1(1.0)).unwrap();
    let over = build_strategy(&cfg, inputs, &exec, &vec1(1.0)).unwrap();
    assert_eq!(over.q0[0], 10.0);
    assert_eq!(over.exec.risk_aversion, 1e-3);
    assert_eq!(strat.q0[0], 1.0);
}
