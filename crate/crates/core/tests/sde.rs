//! SDE integrators against exact Brownian and geometric laws, and the
//! Ito/Stratonovich conversion.

use fastslow::sde::{
    advect_density_particles, euler_maruyama_step, member_rng, simulate_sde_ensemble, ConstantField, Field,
    Interpretation, LinearField, Particle, SdeSpec,
};
use nalgebra::{Matrix1, Matrix2, Vector1, Vector2};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::sync::Arc;

fn spec1(
    drift: Field<1>,
    noise: Vec<Field<1>>,
    interpretation: Interpretation,
    dt: f64,
    n: usize,
    seed: u64,
) -> SdeSpec<1> {
    SdeSpec {
        drift,
        noise,
        interpretation,
        dt,
        t_final: 1.0,
        ensemble_size: n,
        seed,
    }
}

fn zero() -> Field<1> {
    Arc::new(ConstantField(Vector1::new(0.0)))
}

fn linear(a: f64) -> Field<1> {
    Arc::new(LinearField::new(Matrix1::new(a)))
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
}

#[test]
fn em_step_without_noise_is_constant_advection() {
    let s = spec1(
        Arc::new(ConstantField(Vector1::new(0.4))),
        vec![],
        Interpretation::Ito,
        0.1,
        1,
        0,
    );
    let next = euler_maruyama_step(&Vector1::new(1.0), &s, &[]).unwrap();
    assert!((next[0] - 1.04).abs() < 1e-15);
}

#[test]
fn brownian_endpoint_law() {
    let s = spec1(
        zero(),
        vec![Arc::new(ConstantField(Vector1::new(1.0)))],
        Interpretation::Ito,
        0.01,
        100_000,
        3,
    );
    let ends: Vec<f64> = simulate_sde_ensemble(&s, &Vector1::new(0.5))
        .unwrap()
        .iter()
        .map(|v| v[0])
        .collect();
    let (m, v) = mean_var(&ends);
    let n = ends.len() as f64;
    assert!((m - 0.5).abs() < 3.0 / n.sqrt(), "mean {m}");
    assert!((v - 1.0).abs() < 3.0 * (2.0 / n).sqrt(), "var {v}");
}

#[test]
fn increments_are_uncorrelated() {
    let s = spec1(
        zero(),
        vec![Arc::new(ConstantField(Vector1::new(1.0)))],
        Interpretation::Ito,
        0.01,
        1,
        0,
    );
    let n = 20_000;
    let (mut a, mut b) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for member in 0..n as u64 {
        let mut rng = member_rng(9, member);
        let mut x = Vector1::new(0.0);
        let mut incs = [0.0; 2];
        for inc in incs.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            let next = euler_maruyama_step(&x, &s, &[0.1 * z]).unwrap();
            *inc = next[0] - x[0];
            x = next;
        }
        a.push(incs[0]);
        b.push(incs[1]);
    }
    let (ma, va) = mean_var(&a);
    let (mb, vb) = mean_var(&b);
    let cov = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (n as f64 - 1.0);
    let corr = cov / (va * vb).sqrt();
    assert!(corr.abs() < 3.0 / (n as f64).sqrt(), "{corr}");
}

#[test]
fn stratonovich_geometric_noise_keeps_log_mean() {
    let s = spec1(
        zero(),
        vec![linear(1.0)],
        Interpretation::Stratonovich,
        0.01,
        100_000,
        4,
    );
    let logs: Vec<f64> = simulate_sde_ensemble(&s, &Vector1::new(2.0))
        .unwrap()
        .iter()
        .map(|v| v[0].ln())
        .collect();
    let (m, v) = mean_var(&logs);
    let se = (v / logs.len() as f64).sqrt();
    assert!((m - 2f64.ln()).abs() < 3.0 * se, "E ln q = {m}, se {se}");
}

#[test]
fn heun_and_converted_euler_share_a_law() {
    let n = 100_000;
    let strat = spec1(zero(), vec![linear(1.0)], Interpretation::Stratonovich, 0.002, n, 5);
    // Ito form of dq = q o dW: dq = q/2 dt + q dW
    let ito = spec1(linear(0.5), vec![linear(1.0)], Interpretation::Ito, 0.002, n, 6);
    let q0 = Vector1::new(1.0);
    let ls: Vec<f64> = simulate_sde_ensemble(&strat, &q0)
        .unwrap()
        .iter()
        .map(|v| v[0].ln())
        .collect();
    let li: Vec<f64> = simulate_sde_ensemble(&ito, &q0)
        .unwrap()
        .iter()
        .map(|v| v[0].ln())
        .collect();
    let ((ms, vs), (mi, vi)) = (mean_var(&ls), mean_var(&li));
    let nf = n as f64;
    let mean_se = ((vs + vi) / nf).sqrt();
    let var_se = ((2.0 * vs * vs + 2.0 * vi * vi) / nf).sqrt();
    assert!((ms - mi).abs() < 3.0 * mean_se, "{ms} vs {mi}");
    assert!((vs - vi).abs() < 3.0 * var_se, "{vs} vs {vi}");
}

#[test]
fn interpretations_differ_by_the_noise_induced_drift() {
    // sigma(q) = s q: Ito keeps E q, Stratonovich grows it by exp(s^2 T / 2)
    let s = 0.5;
    let n = 50_000;
    let q0 = Vector1::new(1.0);
    let ito = spec1(zero(), vec![linear(s)], Interpretation::Ito, 0.002, n, 7);
    let strat = spec1(zero(), vec![linear(s)], Interpretation::Stratonovich, 0.002, n, 8);
    let ei: Vec<f64> = simulate_sde_ensemble(&ito, &q0).unwrap().iter().map(|v| v[0]).collect();
    let es: Vec<f64> = simulate_sde_ensemble(&strat, &q0)
        .unwrap()
        .iter()
        .map(|v| v[0])
        .collect();
    let ((mi, vi), (ms, vs)) = (mean_var(&ei), mean_var(&es));
    let se = ((vi + vs) / n as f64).sqrt();
    let expected = (s * s / 2.0f64).exp() - 1.0;
    assert!(((ms - mi) - expected).abs() < 3.0 * se, "{} vs {expected}", ms - mi);
}

#[test]
fn zero_noise_ensemble_is_degenerate_at_the_ode_endpoint() {
    let spec = SdeSpec {
        drift: Arc::new(LinearField::new(Matrix2::new(0.0, 1.0, -1.0, 0.0))) as Field<2>,
        noise: vec![],
        interpretation: Interpretation::Stratonovich,
        dt: 1e-3,
        t_final: 1.0,
        ensemble_size: 8,
        seed: 1,
    };
    let q0 = Vector2::new(1.0, 0.0);
    let ends = simulate_sde_ensemble(&spec, &q0).unwrap();
    let exact = Vector2::new(1f64.cos(), -1f64.sin());
    assert!(ends.iter().all(|e| *e == ends[0]));
    assert!((ends[0] - exact).norm() < 1e-6, "{}", (ends[0] - exact).norm());
}

#[test]
fn seeds_control_the_ensemble() {
    let run = |seed| {
        let s = spec1(zero(), vec![linear(0.3)], Interpretation::Ito, 0.01, 64, seed);
        simulate_sde_ensemble(&s, &Vector1::new(1.0)).unwrap()
    };
    assert_eq!(run(10), run(10));
    assert_ne!(run(10), run(11));
}

#[test]
fn transport_conserves_weight_bit_exactly() {
    let particles: Vec<Particle<2>> = (0..50)
        .map(|i| Particle {
            position: Vector2::new(0.1 * i as f64, 1.0),
            weight: 1.0 / (1.0 + i as f64),
            density: 1.0,
        })
        .collect();
    let u: Field<2> = Arc::new(LinearField::new(Matrix2::new(0.2, 0.5, -0.3, 0.1)));
    let xi: Vec<Field<2>> = vec![Arc::new(LinearField::new(Matrix2::new(0.1, 0.0, 0.0, 0.3)))];
    let r = advect_density_particles(&particles, u.as_ref(), &xi, 0.01, 1.0, 3).unwrap();
    assert_eq!(r.total_weight_before, r.total_weight_after);
    // compressible fields move J away from 1 and the density follows
    for p in &r.particles {
        assert!((p.density * p.jacobian_det - 1.0).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn member_streams_are_pure_functions(seed in any::<u64>(), member in 0u64..1_000_000) {
        let mut a = member_rng(seed, member);
        let mut b = member_rng(seed, member);
        let mut c = member_rng(seed, member + 1);
        let xa: Vec<u64> = (0..16).map(|_| a.random()).collect();
        let xb: Vec<u64> = (0..16).map(|_| b.random()).collect();
        let xc: Vec<u64> = (0..16).map(|_| c.random()).collect();
        prop_assert_eq!(&xa, &xb);
        prop_assert_ne!(&xa, &xc);
    }
}
