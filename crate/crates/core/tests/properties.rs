use std::fs;

use bsvie_core::kernel::KernelGrid;
use bsvie_core::output::write_z;
use bsvie_core::resolvent::{
    apply_resolvent, iterated_kernel_bound, neumann_resolvent, resolvent_residual, tail_bound,
    truncation_order, volterra_solve, IteratedKernels,
};
use bsvie_core::scenario::ScenarioConfig;
use bsvie_core::simulate::{girsanov_weights, simulate_paths_with};
use bsvie_core::solver::{compute_u, solve};
use bsvie_core::{Scenario, TimeGrid};
use proptest::prelude::*;

fn unit_kernel_scenario(n: usize, phi: &str, c: f64, f0: &str) -> Scenario {
    Scenario::parse(
        &format!(
            "[grid]\nT = 1.0\nn_steps = {n}\n[coefficients]\nphi = \"{phi}\"\nbound_C = {c}\n\
             [terminal]\nf0 = \"{f0}\"\n"
        ),
        ".",
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn scenario_renders_and_reparses_bit_exactly(
        horizon in 0.1f64..5.0,
        n in 1usize..40,
        a in -1.0f64..1.0,
        xi in -2.0f64..2.0,
        marks in prop::collection::btree_set(-50i32..50, 0..4),
        rate in 0.1f64..5.0,
        seed in any::<u64>(),
    ) {
        let marks: Vec<f64> = marks.into_iter().map(|m| m as f64 / 7.0).collect();
        let rates = vec![rate; marks.len()];
        let text = format!(
            "[grid]\nT = {horizon:?}\nn_steps = {n}\n[levy]\nmarks = {marks:?}\nintensities = {rates:?}\n\
             [coefficients]\nphi = \"{a:?} * cos(t - s)\"\nxi = \"{xi:?} + sin(s)\"\nbeta = \"0.2 * z^2 * exp(-s)\"\n\
             bound_C = 1.0\n[terminal]\nf0 = \"t^2\"\nf1 = \"exp(-t)\"\nf2 = \"{a:?}\"\ng = \"z\"\n\
             [mc]\nseed = {seed}\n"
        );
        let first = Scenario::parse(&text, ".").unwrap();
        let second = Scenario::parse(&first.render(), ".").unwrap();
        prop_assert_eq!(first.config(), second.config());
        prop_assert_eq!(first.coeffs.phi.values(), second.coeffs.phi.values());
        prop_assert_eq!(&first.coeffs.xi, &second.coeffs.xi);
        prop_assert_eq!(&first.coeffs.beta, &second.coeffs.beta);
        prop_assert_eq!(&first.terminal.f1, &second.terminal.f1);
        prop_assert_eq!(&first.terminal.g, &second.terminal.g);
        prop_assert_eq!(&first.levy.marks, &marks);
        prop_assert_eq!(first.mc.seed, seed);
    }

    #[test]
    fn tabulated_inputs_are_read_bit_exactly(
        n in 1usize..12,
        values in prop::collection::vec(-1e3f64..1e3, 13),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let mut csv = String::from("i,value\n");
        for (i, v) in values.iter().take(n + 1).enumerate() {
            csv.push_str(&format!("{i},{v:?}\n"));
        }
        fs::write(dir.path().join("xi.csv"), csv).unwrap();
        let text = format!(
            "[grid]\nT = 1.0\nn_steps = {n}\n[coefficients]\nphi = \"0\"\nxi = {{ table = \"xi.csv\" }}\n\
             bound_C = 0.0\n[terminal]\nf0 = \"0\"\n"
        );
        let s = Scenario::parse(&text, dir.path()).unwrap();
        prop_assert_eq!(&s.coeffs.xi[..], &values[..=n]);
        let again = Scenario::parse(&s.render(), dir.path()).unwrap();
        prop_assert_eq!(&again.coeffs.xi, &s.coeffs.xi);
    }

    #[test]
    fn iterated_kernels_obey_factorial_bound(
        c in 0.1f64..2.0,
        horizon in 0.2f64..2.0,
        n_steps in 8usize..40,
        freq in 0.0f64..3.0,
    ) {
        // |c cos(freq t s)| <= c everywhere
        let grid = TimeGrid::new(horizon, n_steps).unwrap();
        let phi = KernelGrid::from_fn(grid, |i, j| c * (freq * grid.node(i) * grid.node(j)).cos());
        let dt = grid.dt();
        for (order, k) in IteratedKernels::new(&phi).take(8) {
            let slack = 10.0 * order as f64 * dt * dt * (c * horizon.max(1.0)).powi(order as i32);
            let bound = iterated_kernel_bound(c, horizon, order) + slack;
            prop_assert!(k.max_abs() <= bound, "order {} max {} bound {}", order, k.max_abs(), bound);
        }
    }

    #[test]
    fn truncation_order_is_minimal_and_controls_the_tail(
        c in 0.1f64..2.5,
        horizon in 0.2f64..2.0,
        log_tol in -12.0f64..-3.0,
    ) {
        let tol = 10f64.powf(log_tol);
        let n = truncation_order(c, horizon, tol).unwrap();
        prop_assert!(tail_bound(c, horizon, n) <= tol);
        if n > 1 {
            prop_assert!(tail_bound(c, horizon, n - 1) > tol);
        }
    }

    #[test]
    fn series_converges_within_its_tail_bound(
        c in 0.2f64..2.0,
        n_steps in 10usize..40,
    ) {
        let grid = TimeGrid::new(1.0, n_steps).unwrap();
        let phi = KernelGrid::from_fn(grid, |i, j| c * (grid.node(i) - grid.node(j)).cos());
        let coarse = neumann_resolvent(&phi, c, 1e-4).unwrap();
        let fine = neumann_resolvent(&phi, c, 1e-13).unwrap();
        prop_assert!(coarse.psi.max_abs_diff(&fine.psi) <= coarse.tail_bound + 1e-12);
    }

    #[test]
    fn resolvent_and_direct_solve_agree_at_second_order(
        a in 0.0f64..1.0,
        b in 0.0f64..1.0,
        k in 0.5f64..3.0,
    ) {
        let c = a + b;
        let phi = format!("{a:?} + {b:?}*t*s");
        let f0 = format!("cos({k:?}*t)");
        let gaps: Vec<f64> = [20usize, 40, 80].iter().map(|&n| {
            let s = unit_kernel_scenario(n, &phi, c, &f0);
            let table = neumann_resolvent(&s.coeffs.phi, c, 1e-12).unwrap();
            let via = apply_resolvent(&table.psi, &s.terminal.f0).unwrap();
            let direct = volterra_solve(&s.coeffs.phi, &s.terminal.f0).unwrap();
            via.iter().zip(&direct).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
        }).collect();
        // halving Δt divides an O(Δt²) gap by 4; allow down to 3
        prop_assert!(gaps[1] <= gaps[0] / 3.0 + 1e-12, "{:?}", gaps);
        prop_assert!(gaps[2] <= gaps[1] / 3.0 + 1e-12, "{:?}", gaps);
    }

    #[test]
    fn non_convolution_kernels_have_second_order_identity_residual(
        a in 0.0f64..1.0,
        b in 0.3f64..1.5,
    ) {
        let phi = format!("{a:?} + {b:?}*t*s");
        let r: Vec<f64> = [25usize, 50, 100].iter().map(|&n| {
            let s = unit_kernel_scenario(n, &phi, a + b, "0");
            let table = neumann_resolvent(&s.coeffs.phi, a + b, 1e-12).unwrap();
            resolvent_residual(&s.coeffs.phi, &table.psi).unwrap()
        }).collect();
        let slope = (r[0] / r[2]).log2() / 2.0;
        prop_assert!((slope - 2.0).abs() <= 0.3, "{:?} slope {}", r, slope);
    }

    #[test]
    fn deterministic_terminal_has_no_martingale_part(
        a in -1.0f64..1.0,
        b in -1.0f64..1.0,
        xi in -1.0f64..1.0,
        beta in -0.5f64..2.0,
        n in 5usize..30,
    ) {
        let c = a.abs() + b.abs();
        let s = Scenario::parse(&format!(
            "[grid]\nT = 1.0\nn_steps = {n}\n[levy]\nmarks = [1.0, 2.0]\nintensities = [1.0, 0.5]\n\
             [coefficients]\nphi = \"{a:?} + {b:?}*sin(t*s)\"\nxi = \"{xi:?}\"\nbeta = \"{beta:?}\"\nbound_C = {c:?}\n\
             [terminal]\nf0 = \"exp(t)\"\n"
        ), ".").unwrap();
        let table = neumann_resolvent(&s.coeffs.phi, c, 1e-12).unwrap();
        let t = solve(&s, &table).unwrap();
        prop_assert_eq!(t.z.max_abs(), 0.0);
        prop_assert!(t.k.iter().all(|k| k.max_abs() == 0.0));
        prop_assert!(t.y.b.iter().chain(&t.y.c).all(|&v| v == 0.0));
        let u = compute_u(&s, &t.y);
        prop_assert_eq!(u.brownian.max_abs(), 0.0);
        prop_assert_eq!(u.jump.max_abs(), 0.0);
    }

    #[test]
    fn density_matches_closed_form_for_constant_coefficients(
        xi in -1.0f64..1.0,
        beta in -0.9f64..2.0,
        rate in 0.1f64..3.0,
        seed in any::<u64>(),
    ) {
        let s = Scenario::parse(&format!(
            "[grid]\nT = 1.0\nn_steps = 16\n[levy]\nmarks = [1.0]\nintensities = [{rate:?}]\n\
             [coefficients]\nphi = \"0\"\nxi = \"{xi:?}\"\nbeta = \"{beta:?}\"\nbound_C = 0.0\n\
             [terminal]\nf0 = \"0\"\n"
        ), ".").unwrap();
        let paths = simulate_paths_with(&s, 32, seed);
        let w = girsanov_weights(&s, &paths).unwrap();
        for p in 0..32 {
            let b_t = *paths.brownian_path(p).last().unwrap();
            let n_t = paths.total_jumps(p) as f64;
            let expected = xi * b_t - 0.5 * xi * xi + n_t * (1.0 + beta).ln() - beta * rate;
            let got = w.terminal(p).ln();
            prop_assert!((got - expected).abs() <= 1e-10 * (1.0 + expected.abs()), "{} vs {}", got, expected);
        }
    }

    #[test]
    fn csv_output_round_trips(n in 1usize..10, seed in any::<u32>()) {
        let grid = TimeGrid::new(1.0, n).unwrap();
        let z = KernelGrid::from_fn(grid, |i, j| ((seed as f64 + i as f64) * 1.37).sin() * 10f64.powi(j as i32 - 4));
        let mut buf = Vec::new();
        write_z(&mut buf, &z).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let back: Vec<f64> = text.lines().skip(1)
            .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
            .collect();
        prop_assert_eq!(back, z.iter().map(|(_, _, v)| v).collect::<Vec<_>>());
    }
}

#[test]
fn parsed_config_matches_rendered_config() {
    let text = fs::read_to_string(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/../../scenarios/mixed.toml"
    ))
    .unwrap();
    let cfg = ScenarioConfig::from_toml(&text).unwrap();
    assert_eq!(ScenarioConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
}
