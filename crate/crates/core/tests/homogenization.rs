//! Homogenized drift and diffusion estimators against closed-form OU values
//! and formula reductions.

use fastslow::acf::{self, Truncation};
use fastslow::config::ExperimentConfig;
use fastslow::driver::{Channel, DriverKind, FastDriver, ObservableMap};
use fastslow::harness;
use fastslow::homogenization::{
    estimate_diffusion_tensor, estimate_drift, extract_xi, factor_diffusion, outer, sample_fast, FastSamples,
};
use fastslow::linalg;
use fastslow::modes::{Domain, Mode, ModeBasis};
use fastslow::series::Series;
use fastslow::velocity::MeanVelocityField;
use nalgebra::{DMatrix, Matrix2, Vector1, Vector2};
use proptest::prelude::*;
use std::path::PathBuf;

fn ou_samples(n: usize, seed: u64) -> FastSamples {
    let mut d = FastDriver::new(DriverKind::ou(1.0, 1.0), vec![0.0], seed, 0).unwrap();
    let map = ObservableMap::raw(vec![Channel::Coord(0)]);
    sample_fast(&mut d, &map, None, 0.05, n, 1000, 2).unwrap()
}

fn cos_basis(a: f64) -> ModeBasis<1> {
    let m = Mode {
        wavevector: Vector1::new(1.0),
        phase: 0.0,
        amplitude: a,
        direction: Vector1::new(1.0),
    };
    ModeBasis::new(Domain::unit_torus(), vec![m]).unwrap()
}

#[test]
fn outer_product_examples() {
    assert_eq!(
        outer(&[1.0, 0.0], &[0.0, 1.0]).unwrap(),
        DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0])
    );
    assert_eq!(
        outer(&[1.0, 1.0], &[1.0, 1.0]).unwrap(),
        DMatrix::from_element(2, 2, 1.0)
    );
    assert!(outer(&[1.0], &[1.0, 2.0]).is_err());
}

#[test]
fn ou_constant_mode_diffusion_is_one_half() {
    let samples = ou_samples(1_000_000, 1);
    let basis = ModeBasis::constant(Domain::<1>::unit_torus(), 1.0, Vector1::new(1.0)).unwrap();
    let c = acf::autocorrelation(&samples.lambda, 100, samples.spacing).unwrap();
    let d = estimate_diffusion_tensor(
        &basis,
        &Vector1::new(0.3),
        &c,
        &samples,
        Truncation::FixedLag { lag: 100 },
    )
    .unwrap();
    assert!((d.tensor[(0, 0)] - 0.5).abs() <= 0.025, "{}", d.tensor[(0, 0)]);
}

#[test]
fn diagonal_green_kubo_reduces_to_mode_sum() {
    // two independent OU channels with gamma 1 and 2: G = diag(1/2, 1/8)
    let mut d1 = FastDriver::new(DriverKind::ou(1.0, 1.0), vec![0.0], 2, 0).unwrap();
    let mut d2 = FastDriver::new(DriverKind::ou(2.0, 1.0), vec![0.0], 3, 0).unwrap();
    let map = ObservableMap::raw(vec![Channel::Coord(0)]);
    let s1 = sample_fast(&mut d1, &map, None, 0.05, 400_000, 1000, 2).unwrap();
    let s2 = sample_fast(&mut d2, &map, None, 0.05, 400_000, 1000, 2).unwrap();
    let rows: Vec<[f64; 2]> = (0..s1.len())
        .map(|t| [s1.lambda.row(t)[0], s2.lambda.row(t)[0]])
        .collect();
    let samples = FastSamples {
        lambda: Series::from_rows(2, rows),
        coeffs: None,
        spacing: 0.1,
    };
    let c = acf::autocorrelation(&samples.lambda, 80, 0.1).unwrap();
    let trunc = Truncation::FixedLag { lag: 80 };
    let g = acf::green_kubo_integral(&c, trunc).unwrap().symmetrized();

    let basis = ModeBasis::new(
        Domain::<2>::unit_torus(),
        vec![
            Mode {
                wavevector: Vector2::new(0.0, 1.0),
                phase: 0.0,
                amplitude: 1.0,
                direction: Vector2::new(1.0, 0.0),
            },
            Mode {
                wavevector: Vector2::new(1.0, 0.0),
                phase: 0.4,
                amplitude: 1.0,
                direction: Vector2::new(0.0, 1.0),
            },
        ],
    )
    .unwrap();
    let q = Vector2::new(0.9, 2.2);
    let est = estimate_diffusion_tensor(&basis, &q, &c, &samples, trunc)
        .unwrap()
        .tensor;
    // closed form from the estimated G, written out entry by entry
    let (p1, p2) = (q[1].cos(), (q[0] + 0.4).cos());
    let closed = Matrix2::new(
        g[(0, 0)] * p1 * p1,
        g[(0, 1)] * p1 * p2,
        g[(1, 0)] * p1 * p2,
        g[(1, 1)] * p2 * p2,
    );
    assert!((est - closed).abs().max() < 1e-12);
    let exact = Matrix2::new(0.5 * p1 * p1, 0.0, 0.0, 0.125 * p2 * p2);
    assert!((est - exact).abs().max() < 0.05 * 0.5, "{est} vs {exact}");
}

#[test]
fn zero_correlations_give_zero_diffusion() {
    let samples = FastSamples {
        lambda: Series::from_flat(1, vec![0.0; 5000]),
        coeffs: None,
        spacing: 0.1,
    };
    let c = acf::autocorrelation(&samples.lambda, 20, 0.1).unwrap();
    let d = estimate_diffusion_tensor(
        &cos_basis(0.5),
        &Vector1::new(1.0),
        &c,
        &samples,
        Truncation::FixedLag { lag: 20 },
    )
    .unwrap();
    assert_eq!(d.tensor[(0, 0)], 0.0);
}

#[test]
fn doubling_observables_scale_diffusion_by_four() {
    let samples = ou_samples(100_000, 4);
    let basis = cos_basis(0.5);
    let q = Vector1::new(0.4);
    let trunc = Truncation::FixedLag { lag: 60 };
    let d1 = estimate_diffusion_tensor(
        &basis,
        &q,
        &acf::autocorrelation(&samples.lambda, 60, samples.spacing).unwrap(),
        &samples,
        trunc,
    )
    .unwrap();
    let doubled = samples.scaled(2.0);
    let d2 = estimate_diffusion_tensor(
        &basis,
        &q,
        &acf::autocorrelation(&doubled.lambda, 60, doubled.spacing).unwrap(),
        &doubled,
        trunc,
    )
    .unwrap();
    assert!((d2.tensor[(0, 0)] - 4.0 * d1.tensor[(0, 0)]).abs() < 1e-12);
}

#[test]
fn drift_reductions() {
    let samples = FastSamples {
        lambda: Series::from_flat(1, vec![0.0; 3000]),
        coeffs: Some(Series::from_flat(1, vec![0.0; 3000])),
        spacing: 0.1,
    };
    let u = MeanVelocityField::Cellular {
        amplitude: 0.7,
        wavenumber: 1.0,
    };
    let basis = ModeBasis::<2>::auto(Domain::unit_torus(), 1, 0.5, 0).unwrap();
    let q = Vector2::new(0.3, 1.1);
    let d = estimate_drift(&basis, &q, &u, &samples, 10, 0.0).unwrap();
    // the sample mean of identical values is exact up to summation rounding
    assert!((d.total() - u.eval(&q, 0.0)).norm() < 1e-12);

    let ou = ou_samples(20_000, 5);
    let flat = ModeBasis::constant(Domain::<1>::unit_torus(), 1.0, Vector1::new(1.0)).unwrap();
    let u = MeanVelocityField::Uniform { velocity: vec![0.25] };
    let d = estimate_drift(&flat, &Vector1::new(2.0), &u, &ou, 50, 0.0).unwrap();
    assert_eq!(d.correction[0], 0.0);
    assert_eq!(d.total()[0], 0.25);
}

#[test]
fn frozen_drift_correction_is_half_diffusion_gradient() {
    // phi = a cos x: D(x) = G a^2 cos^2 x, so D'/2 = -G a^2 sin x cos x
    let samples = ou_samples(1_000_000, 6);
    let basis = cos_basis(0.5);
    let x = 0.6;
    let lag = 100;
    let d = estimate_drift(&basis, &Vector1::new(x), &MeanVelocityField::Zero, &samples, lag, 0.0).unwrap();
    let expected = -0.5 * 0.25 * x.sin() * x.cos();
    assert!(
        (d.correction[0] - expected).abs() <= 0.1 * expected.abs(),
        "{} vs {expected}",
        d.correction[0]
    );
}

#[test]
fn estimated_coefficients_are_symmetric_psd_at_every_probe() {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml");
    let mut cfg = ExperimentConfig::load(&path).unwrap();
    if let Some(e) = cfg.estimation.as_mut() {
        e.n_samples = 20_000;
    }
    let summary = harness::estimate_table::<2>(&cfg).unwrap();
    assert!(!summary.table.probes.is_empty());
    for p in &summary.table.probes {
        let d2 = DMatrix::from_row_slice(2, 2, &p.diffusion);
        assert!((&d2 - d2.transpose()).amax() < 1e-10);
        let (values, _) = linalg::sym_eigen_sorted(&d2);
        assert!(values.iter().all(|v| *v >= -1e-8), "{values}");
        let sigma = DMatrix::from_row_slice(2, 2, &p.sigma);
        assert!((&sigma * sigma.transpose() - &d2).amax() < 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn xi_outer_products_rebuild_sigma_sigma_t(entries in proptest::collection::vec(-2.0f64..2.0, 9)) {
        let a = DMatrix::from_row_slice(3, 3, &entries);
        let d2 = &a * a.transpose();
        let sigma = factor_diffusion(&d2).unwrap().sigma;
        let xi = extract_xi(&sigma);
        let mut sum = DMatrix::zeros(3, 3);
        for v in &xi.xi {
            sum += outer(v.as_slice(), v.as_slice()).unwrap();
        }
        prop_assert!((&sum - &sigma * sigma.transpose()).amax() < 1e-10 * d2.amax().max(1.0));
        prop_assert!((&sigma * sigma.transpose() - &d2).amax() < 1e-10 * d2.amax().max(1.0));
    }

    #[test]
    fn trace_of_outer_is_dot(a in proptest::collection::vec(-5.0f64..5.0, 4), b in proptest::collection::vec(-5.0f64..5.0, 4)) {
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        prop_assert!((outer(&a, &b).unwrap().trace() - dot).abs() < 1e-12);
    }
}
