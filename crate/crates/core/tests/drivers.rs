//! Fast drivers, invariant-measure sampling and Green-Kubo integrals against
//! closed-form OU and doubling-map statistics.

use fastslow::acf::{self, Truncation};
use fastslow::driver::{sample_invariant_measure, Channel, DriverKind, FastDriver, ObservableMap};
use fastslow::linalg;
use fastslow::series::Series;
use proptest::prelude::*;

fn coord0() -> ObservableMap {
    ObservableMap::raw(vec![Channel::Coord(0)])
}

fn ou(gamma: f64, seed: u64) -> FastDriver {
    FastDriver::new(DriverKind::ou(gamma, 1.0), vec![0.0], seed, 0).unwrap()
}

fn doubling(seed: u64) -> FastDriver {
    FastDriver::new(DriverKind::DoublingMap, vec![0.3], seed, 0).unwrap()
}

/// Independent reference: classical RK4 written out on arrays.
fn lorenz_reference(mut y: [f64; 3], h: f64, n: usize) -> (f64, [f64; 3]) {
    let f = |y: [f64; 3]| {
        [
            10.0 * (y[1] - y[0]),
            y[0] * (28.0 - y[2]) - y[1],
            y[0] * y[1] - 8.0 / 3.0 * y[2],
        ]
    };
    let mut max_norm: f64 = 0.0;
    for _ in 0..n {
        let k1 = f(y);
        let k2 = f(std::array::from_fn(|i| y[i] + 0.5 * h * k1[i]));
        let k3 = f(std::array::from_fn(|i| y[i] + 0.5 * h * k2[i]));
        let k4 = f(std::array::from_fn(|i| y[i] + h * k3[i]));
        y = std::array::from_fn(|i| y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]));
        max_norm = max_norm.max(y.iter().map(|v| v * v).sum::<f64>().sqrt());
    }
    (max_norm, y)
}

#[test]
fn doubling_map_examples() {
    for (y0, y1) in [(0.3, 0.6), (0.7, 0.4)] {
        let mut d = FastDriver::new(DriverKind::DoublingMap, vec![y0], 1, 0).unwrap();
        d.step(1.0).unwrap();
        assert!((d.state()[0] - y1).abs() < 1e-15, "{} -> {}", y0, d.state()[0]);
    }
}

#[test]
fn lorenz_stays_bounded_and_matches_reference() {
    let mut d = FastDriver::new(DriverKind::lorenz63(), vec![1.0, 1.0, 1.0], 0, 0).unwrap();
    let mut max_norm: f64 = 0.0;
    for _ in 0..100_000 {
        d.step(0.005).unwrap();
        max_norm = max_norm.max(d.state().iter().map(|v| v * v).sum::<f64>().sqrt());
    }
    let (ref_max, _) = lorenz_reference([1.0, 1.0, 1.0], 0.005, 100_000);
    assert!(max_norm < 100.0 && ref_max < 100.0, "{max_norm} {ref_max}");
    // short horizon: before chaos amplifies rounding differences
    let mut d = FastDriver::new(DriverKind::lorenz63(), vec![1.0, 1.0, 1.0], 0, 0).unwrap();
    for _ in 0..1000 {
        d.step(0.005).unwrap();
    }
    let (_, y) = lorenz_reference([1.0, 1.0, 1.0], 0.005, 1000);
    for i in 0..3 {
        assert!((d.state()[i] - y[i]).abs() < 1e-9);
    }
}

#[test]
fn ou_stationary_moments() {
    let s = sample_invariant_measure(&mut ou(1.0, 3), &coord0(), 0.1, 100_000, 1000, 5).unwrap();
    let var = s.values.std_devs()[0].powi(2);
    assert!(s.means[0].abs() < 0.02, "mean {}", s.means[0]);
    assert!((0.45..=0.55).contains(&var), "var {var}");
}

#[test]
fn doubling_map_uniform_variance() {
    let map = ObservableMap::raw(vec![Channel::Coord(0)]).with_offset(vec![-0.5]);
    let s = sample_invariant_measure(&mut doubling(4), &map, 1.0, 100_000, 100, 1).unwrap();
    let var = s.values.std_devs()[0].powi(2);
    assert!((var - 1.0 / 12.0).abs() <= 0.05 / 12.0, "var {var}");
}

#[test]
fn single_sample_is_initial_observable() {
    for kind in [
        DriverKind::lorenz63(),
        DriverKind::DoublingMap,
        DriverKind::ou(1.0, 1.0),
    ] {
        let init = match kind {
            DriverKind::Lorenz63 { .. } => vec![1.0, 2.0, 3.0],
            _ => vec![0.25],
        };
        let mut d = FastDriver::new(kind, init.clone(), 9, 0).unwrap();
        let s = sample_invariant_measure(&mut d, &coord0(), 0.01, 1, 0, 1).unwrap();
        assert_eq!(s.values.row(0), &init[..1]);
    }
}

#[test]
fn doubling_map_correlations_halve() {
    let map = ObservableMap::raw(vec![Channel::Coord(0)]).with_offset(vec![-0.5]);
    let s = sample_invariant_measure(&mut doubling(5), &map, 1.0, 1_000_000, 100, 1).unwrap();
    let c = acf::autocorrelation(&s.values, 10, 1.0).unwrap();
    for n in 0..=5 {
        let exact = 2f64.powi(-(n as i32)) / 12.0;
        let got = c.values[n][(0, 0)];
        assert!((got - exact).abs() <= 0.1 * exact, "C({n}) = {got} vs {exact}");
    }
}

#[test]
fn ou_correlation_decays_exponentially() {
    let s = sample_invariant_measure(&mut ou(2.0, 6), &coord0(), 0.05, 1_000_000, 1000, 1).unwrap();
    let c = acf::autocorrelation(&s.values, 20, 0.05).unwrap();
    for k in [0, 5, 10, 20] {
        let exact = 0.25 * (-2.0 * 0.05 * k as f64).exp();
        let got = c.values[k][(0, 0)];
        assert!((got - exact).abs() <= 0.1 * exact, "C({k}) = {got} vs {exact}");
    }
}

#[test]
fn zero_observable_gives_zero_green_kubo() {
    let zeros = Series::from_flat(1, vec![0.0; 2000]);
    let c = acf::autocorrelation(&zeros, 10, 0.1).unwrap();
    assert!(c.values.iter().all(|m| m[(0, 0)] == 0.0));
    let g = acf::green_kubo_integral(&c, Truncation::FixedLag { lag: 10 }).unwrap();
    assert_eq!(g.matrix[(0, 0)], 0.0);
}

#[test]
fn ou_green_kubo_error_shrinks_with_sample_count() {
    let mut errors = Vec::new();
    for (i, n) in [10_000usize, 100_000, 1_000_000].into_iter().enumerate() {
        // independent replicates per N; the RMS error is the statistic
        let reps = 4;
        let mut sq = 0.0;
        for r in 0..reps {
            let s = sample_invariant_measure(&mut ou(1.0, 100 * i as u64 + r), &coord0(), 0.1, n, 1000, 1).unwrap();
            let c = acf::autocorrelation(&s.values, 80, 0.1).unwrap();
            let g = acf::green_kubo_integral(&c, Truncation::FixedLag { lag: 80 }).unwrap();
            sq += (g.matrix[(0, 0)] - 0.5).powi(2);
        }
        errors.push((sq / reps as f64).sqrt());
    }
    assert!(errors[2] < 0.025, "{errors:?}");
    for w in errors.windows(2) {
        assert!(w[1] <= 1.5 * w[0], "{errors:?}");
    }
}

#[test]
fn lorenz_green_kubo_symmetrization_is_psd() {
    let map = ObservableMap::raw(vec![Channel::Coord(0), Channel::Coord(1), Channel::Product(0, 1)]);
    let mut d = FastDriver::new(DriverKind::lorenz63(), vec![1.0, 1.0, 1.0], 0, 0).unwrap();
    let s = sample_invariant_measure(&mut d, &map, 0.01, 200_000, 2000, 5).unwrap();
    let c = acf::autocorrelation(&s.values, 400, s.spacing).unwrap();
    let g = acf::green_kubo_integral(&c, Truncation::default()).unwrap();
    let sym = g.symmetrized();
    assert_eq!(sym, sym.transpose());
    let (values, _) = linalg::sym_eigen_sorted(&sym);
    assert!(
        values.iter().all(|v| *v >= -1e-8 * values[0].abs().max(1.0)),
        "{values}"
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn identical_seeds_are_bit_identical(seed in any::<u64>(), stream in 0u64..1000, gamma in 0.2f64..5.0) {
        for kind in [DriverKind::lorenz63(), DriverKind::DoublingMap, DriverKind::ou(gamma, 1.0)] {
            let mut a = FastDriver::randomized(kind.clone(), seed, stream).unwrap();
            let mut b = FastDriver::randomized(kind, seed, stream).unwrap();
            for _ in 0..200 {
                a.step(0.01).unwrap();
                b.step(0.01).unwrap();
            }
            prop_assert_eq!(a.state(), b.state());
        }
    }

    #[test]
    fn green_kubo_of_any_series_symmetrizes(values in proptest::collection::vec(-3.0f64..3.0, 400..600)) {
        let s = Series::from_flat(2, values[..values.len() / 2 * 2].to_vec());
        let c = acf::autocorrelation(&s, 5, 0.5).unwrap();
        let g = acf::green_kubo_integral(&c, Truncation::FixedLag { lag: 5 }).unwrap().symmetrized();
        prop_assert_eq!(g[(0, 1)], g[(1, 0)]);
    }
}
