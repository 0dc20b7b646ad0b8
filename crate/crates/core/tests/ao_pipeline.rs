use stars_opt::ao::{feasibility_violations, run_scheme, InitialLayout, Scheme};
use stars_opt::channel::{Scenario, Side};
use stars_opt::config::{AlgorithmConfig, SystemConfig};
use stars_opt::rates::Protocol;

fn short_alg(iters: usize) -> AlgorithmConfig {
    AlgorithmConfig {
        max_ao_iters: iters,
        ..AlgorithmConfig::default()
    }
}

fn solve(scheme: Scheme, seed: u64, alg: &AlgorithmConfig) -> stars_opt::ao::SolveResult {
    let scenario = Scenario::sample(&SystemConfig::default(), seed).unwrap();
    let layout = if scheme.movable() { InitialLayout::Random } else { InitialLayout::Grid };
    run_scheme(&scenario, alg, scheme, layout).unwrap()
}

#[test]
fn every_scheme_ends_feasible_and_monotone() {
    let alg = short_alg(4);
    let scenario = Scenario::sample(&SystemConfig::default(), 11).unwrap();
    for scheme in Scheme::ALL {
        let layout = if scheme.movable() { InitialLayout::Random } else { InitialLayout::Grid };
        let r = run_scheme(&scenario, &alg, scheme, layout).unwrap();
        assert!(feasibility_violations(&scenario, &r).is_empty(), "{}", scheme.label());
        assert!(r.rank_residual < alg.rank_tol, "{} rank residual {}", scheme.label(), r.rank_residual);
        for w in r.trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-6, "{} trace {:?}", scheme.label(), r.trace);
        }
        assert!((r.wsr - r.trace.last().copied().unwrap()).abs() < 1e-9);
        assert!(r.iterations() <= 4);
    }
}

#[test]
fn runs_are_reproducible() {
    let alg = short_alg(3);
    let a = solve(Scheme::Es, 5, &alg);
    let b = solve(Scheme::Es, 5, &alg);
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.positions.coords, b.positions.coords);
    assert_eq!(a.record(), b.record().replace(&format!("{:.3}", b.seconds), &format!("{:.3}", a.seconds)));
}

#[test]
fn infinite_tolerance_stops_after_one_iteration() {
    let alg = AlgorithmConfig {
        ao_tol: f64::INFINITY,
        ..AlgorithmConfig::default()
    };
    let r = solve(Scheme::Es, 2, &alg);
    assert_eq!(r.iterations(), 1);
    assert!(r.converged);
}

#[test]
fn protocol_constraints_hold_elementwise() {
    let alg = short_alg(3);
    let ms = solve(Scheme::Ms, 3, &alg);
    assert_eq!(ms.coeffs.protocol, Protocol::Ms);
    for (t, r) in ms.coeffs.beta_t.iter().zip(&ms.coeffs.beta_r) {
        assert!((*t == 0.0 && *r == 1.0) || (*t == 1.0 && *r == 0.0), "β = ({t}, {r})");
    }

    let ts = solve(Scheme::Ts, 3, &alg);
    for side in Side::BOTH {
        assert!(ts.coeffs.amplitudes(side).iter().all(|b| *b == 1.0));
    }
    let tau = ts.state.tau(Side::Transmission) + ts.state.tau(Side::Reflection);
    assert!((tau - 1.0).abs() < 1e-12);

    let es = solve(Scheme::Es, 3, &alg);
    for (t, r) in es.coeffs.beta_t.iter().zip(&es.coeffs.beta_r) {
        assert!((t + r - 1.0).abs() < 1e-9 && *t >= 0.0 && *r >= 0.0);
    }
}

#[test]
fn baselines_keep_their_fixed_parts() {
    let alg = short_alg(3);
    let cfg = SystemConfig::default();
    let grid = stars_opt::position::fpe_grid(&cfg).unwrap();
    for scheme in [Scheme::FpeEs, Scheme::FpeMs, Scheme::FpeTs] {
        let r = solve(scheme, 4, &alg);
        assert_eq!(r.positions.coords, grid.coords, "{}", scheme.label());
    }
    let ris = solve(Scheme::MeRis, 4, &alg);
    let t = ris.coeffs.amplitudes(Side::Transmission).iter().filter(|b| **b == 1.0).count();
    let r = ris.coeffs.amplitudes(Side::Reflection).iter().filter(|b| **b == 1.0).count();
    assert_eq!(t + r, cfg.num_elements);
    assert!(t > 0 && r > 0, "both sides keep elements: {t} + {r}");
}

#[test]
fn power_budget_is_spent() {
    let r = solve(Scheme::Es, 6, &short_alg(2));
    let p = SystemConfig::default().max_power;
    assert!(r.state.total_power() <= p * (1.0 + 1e-9));
    assert!(r.state.total_power() >= 0.5 * p);
}
