use ldpnn_core::kernel::{closed_relu_1d, kappa_eval, mean_sigma, sigma_outer, KappaMethod, KappaOptions};
use ldpnn_core::legendre::{conditional_rate_j, kappa_star, LayerParams, LegendreOptions, LegendreStatus};
use ldpnn_core::linalg::{matrix_root, pseudo_inverse, Matrix, PsdMatrix, SymMatrix};
use ldpnn_core::rate::{rate_i_z, NetworkConfig, RateMode, RateOptions};
use ldpnn_core::simulator::{sample_gram_chain_full, sample_network, WidthSchedule};
use ldpnn_core::{Activation, CovMatrix, DualMatrix};
use proptest::prelude::*;

fn square(n: usize) -> impl Strategy<Value = Matrix<f64>> {
    proptest::collection::vec(-2.0f64..2.0, n * n).prop_map(move |v| Matrix::from_row_major(n, n, v).unwrap())
}

/// PSD matrix `B B^T` of dimension `1..=max_dim` with a random rank.
fn psd(max_dim: usize) -> impl Strategy<Value = CovMatrix> {
    (1..=max_dim).prop_flat_map(|n| {
        (1..=n).prop_flat_map(move |r| {
            proptest::collection::vec(-2.0f64..2.0, n * r)
                .prop_map(move |v| PsdMatrix::gram(&Matrix::from_row_major(n, r, v).unwrap()))
        })
    })
}

fn well_conditioned_2x2() -> impl Strategy<Value = CovMatrix> {
    (0.3f64..2.0, 0.3f64..2.0, -0.8f64..0.8).prop_map(|(a, b, rho)| {
        let c = rho * (a * b).sqrt();
        CovMatrix::from_rows(&[vec![a, c], vec![c, b]]).unwrap()
    })
}

fn relu_config(x: Vec<Vec<f64>>, c_b: f64) -> NetworkConfig {
    let n0 = x[0].len();
    NetworkConfig { depth: 1, gammas: vec![1.0], c_b, c_w: 1.0, n0, inputs: x, n_out: 1, activation: Activation::Relu }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn matrix_root_squares_back(q in psd(6)) {
        let r = matrix_root(&q);
        prop_assert!(r.matrix().max_asymmetry() == 0.0);
        prop_assert!(r.sym().eigen().values[0] >= -1e-12 * (1.0 + q.frobenius_norm()));
        let back = r.matrix().matmul(r.matrix()).unwrap();
        let err = back.sub(q.matrix()).unwrap().frobenius_norm();
        prop_assert!(err <= 1e-10 * q.frobenius_norm().max(f64::MIN_POSITIVE), "{err}");
    }

    #[test]
    fn pseudo_inverse_is_symmetric_and_reflexive(q in psd(5)) {
        let p = pseudo_inverse(q.matrix());
        prop_assert!(p.max_asymmetry() <= 1e-9 * (1.0 + p.max_abs()));
        let pgp = p.matmul(q.matrix()).unwrap().matmul(&p).unwrap();
        prop_assert!(pgp.sub(&p).unwrap().frobenius_norm() <= 1e-7 * (1.0 + p.frobenius_norm()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matrix_root_is_continuous(q in psd(4), d in square(4)) {
        let n = q.dim();
        let delta = SymMatrix::symmetrize(&Matrix::from_fn(n, n, |i, j| d[(i, j)]));
        let dn = delta.frobenius_norm();
        prop_assume!(dn > 0.0);
        let root = matrix_root(&q);
        let mut last = f64::INFINITY;
        for k in 0..4 {
            // keep the perturbation PSD-preserving by adding its square
            let s = 1e-6 * 10f64.powi(-k) / dn;
            let dd = delta.matrix().matmul(delta.matrix()).unwrap().scale(s);
            let qk = CovMatrix::new(q.matrix().add(&dd).unwrap()).unwrap();
            let gap = matrix_root(&qk).matrix().sub(root.matrix()).unwrap().frobenius_norm();
            prop_assert!(gap <= last);
            last = gap;
        }
    }

    #[test]
    fn sigma_outer_is_rank_one_psd(q in psd(4), seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: Vec<f64> = (0..q.dim()).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
        let s = sigma_outer(&q, &n, &Activation::Gelu).unwrap();
        let eig = s.sym().eigen().values;
        let top = eig.last().copied().unwrap_or(0.0);
        prop_assert!(eig[0] >= -1e-12 * (1.0 + top));
        prop_assert!(eig.iter().rev().skip(1).all(|&v| v.abs() <= 1e-10 * (1.0 + top)));
    }

    #[test]
    fn kappa_vanishes_at_zero(q in psd(3), m in 0usize..3) {
        let method = [KappaMethod::Mc, KappaMethod::Quadrature, KappaMethod::Series][m];
        prop_assume!(method != KappaMethod::Quadrature || q.dim() <= 2);
        let diag = q.matrix().max_asymmetry() == 0.0 && (0..q.dim()).all(|i| (0..q.dim()).all(|j| i == j || q.get(i, j) == 0.0));
        prop_assume!(method != KappaMethod::Series || (diag && (0..q.dim()).all(|i| q.get(i, i) > 0.0)));
        let opts = KappaOptions { method: Some(method), samples: 1000, ..KappaOptions::default() };
        let v = kappa_eval(&DualMatrix::zeros(q.dim()), &q, &Activation::Relu, &opts).unwrap();
        prop_assert_eq!(v.value, 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn kappa_is_convex_in_eta(
        q in well_conditioned_2x2(),
        e1 in proptest::collection::vec(-0.25f64..0.25, 3),
        e2 in proptest::collection::vec(-0.25f64..0.25, 3),
        t in 0.05f64..0.95,
    ) {
        // entries bounded by 0.25 keep 2 lambda_max(q) eta strictly inside the finiteness region
        let scale = 0.2 / q.sym().eigen().values[1];
        let a = DualMatrix::from_upper(2, &e1.iter().map(|x| x * scale).collect::<Vec<_>>()).unwrap();
        let b = DualMatrix::from_upper(2, &e2.iter().map(|x| x * scale).collect::<Vec<_>>()).unwrap();
        let mid = a.scale(t).add(&b.scale(1.0 - t)).unwrap();
        for act in [Activation::Relu, Activation::Softplus] {
            for method in [KappaMethod::Quadrature, KappaMethod::Mc] {
                let opts = KappaOptions { method: Some(method), samples: 20_000, ..KappaOptions::default() };
                let ka = kappa_eval(&a, &q, &act, &opts).unwrap();
                let kb = kappa_eval(&b, &q, &act, &opts).unwrap();
                let km = kappa_eval(&mid, &q, &act, &opts).unwrap();
                let slack = 3.0 * (ka.std_error + kb.std_error + km.std_error) + 1e-10;
                prop_assert!(km.value <= t * ka.value + (1.0 - t) * kb.value + slack);
            }
        }
    }

    #[test]
    fn kappa_star_is_zero_only_at_the_mean(y in 0.0f64..3.0, q in 0.3f64..3.0) {
        let qm = CovMatrix::scalar(q).unwrap();
        let opts = LegendreOptions::default();
        let mean = mean_sigma(&qm, &Activation::Relu, &opts.kappa).unwrap().get(0, 0);
        let v = kappa_star(&DualMatrix::scalar(y), &qm, &Activation::Relu, &opts).unwrap().value;
        prop_assert!(v >= 0.0);
        if (y - mean).abs() > 1e-3 {
            prop_assert!(v > 1e-8, "kappa*({y}) = {v}");
        }
        let at_mean = kappa_star(&DualMatrix::scalar(mean), &qm, &Activation::Relu, &opts).unwrap().value;
        prop_assert!(at_mean <= 1e-8);
    }

    #[test]
    fn negative_arguments_are_infeasible_for_relu(y in -5.0f64..-1e-6, q in 0.1f64..3.0) {
        let r = kappa_star(&DualMatrix::scalar(y), &CovMatrix::scalar(q).unwrap(), &Activation::Relu, &LegendreOptions::default()).unwrap();
        prop_assert_eq!(r.status, LegendreStatus::DivergedInfeasible);
        prop_assert_eq!(r.value, f64::INFINITY);
    }

    #[test]
    fn conditional_rate_is_the_scaled_transform(g in 0.05f64..3.0, c_b in 0.0f64..1.0, c_w in 0.2f64..3.0, gamma in 1.0f64..4.0, prev in 0.2f64..2.0) {
        let layer = LayerParams { gamma, c_b, c_w };
        let opts = LegendreOptions::default();
        let q = CovMatrix::scalar(prev).unwrap();
        let lhs = conditional_rate_j(&CovMatrix::scalar(g).unwrap(), &q, &layer, &Activation::Relu, &opts).unwrap();
        let y = DualMatrix::scalar((g - c_b) / c_w);
        let rhs = gamma * kappa_star(&y, &q, &Activation::Relu, &opts).unwrap().value;
        if rhs.is_finite() {
            prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + rhs));
        } else {
            prop_assert_eq!(lhs, f64::INFINITY);
        }
    }

    #[test]
    fn simulation_is_reproducible(seed in any::<u64>(), v in 1usize..12) {
        let mut c = relu_config(vec![vec![1.0, 0.2], vec![-0.4, 0.9]], 0.1);
        c.depth = 2;
        c.gammas = vec![1.0, 1.5];
        let s = WidthSchedule::new(&c, v).unwrap();
        prop_assert_eq!(sample_network(&c, &s, seed).unwrap(), sample_network(&c, &s, seed).unwrap());
        let chain = sample_gram_chain_full(&c, &s, seed).unwrap();
        prop_assert_eq!(&chain, &sample_gram_chain_full(&c, &s, seed).unwrap());
        for g in &chain {
            prop_assert!(g.sym().eigen().values[0] >= -1e-12 * (1.0 + g.frobenius_norm()));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn output_rate_is_nonnegative_and_honest(z in -2.0f64..2.0, c_b in 0.0f64..0.5) {
        let c = relu_config(vec![vec![1.0]], c_b);
        let opts = RateOptions { restarts: 3, ..RateOptions::default() };
        let cert = rate_i_z(&Matrix::from_rows(&[vec![z]]).unwrap(), &c, &opts, RateMode::Simplified).unwrap();
        prop_assert!(cert.value >= 0.0);
        let again = cert.recompute(&c.layers(), &c.activation, &opts.legendre).unwrap();
        prop_assert!((again - cert.value).abs() <= 1e-8);
        let zero = rate_i_z(&Matrix::zeros(1, 1), &c, &opts, RateMode::Simplified).unwrap();
        prop_assert!(zero.value <= 1e-10);
    }
}

#[test]
fn closed_form_grows_without_bound_at_the_boundary() {
    let vals: Vec<f64> = (1..=8).map(|k| closed_relu_1d(0.5 - 10f64.powi(-k), 1.0).unwrap()).collect();
    assert!(vals.windows(2).all(|w| w[1] > w[0]));
    assert!(*vals.last().unwrap() > 4.0);
    assert!(closed_relu_1d(0.5, 1.0).is_none());
}

#[test]
fn one_dimensional_evaluators_agree() {
    let q = CovMatrix::scalar(1.0).unwrap();
    // eta = -0.5 sits on the rim of the convergence disc, where only the alternating tail helps
    let series = KappaOptions { method: Some(KappaMethod::Series), series_order: 2000, ..KappaOptions::default() };
    let mc = KappaOptions::mc(1_000_000, 3);
    for eta in [-0.5, -0.1, 0.1, 0.2] {
        let e = DualMatrix::scalar(eta);
        let exact = closed_relu_1d(eta, 1.0).unwrap();
        let s = kappa_eval(&e, &q, &Activation::Relu, &series).unwrap();
        let m = kappa_eval(&e, &q, &Activation::Relu, &mc).unwrap();
        let tol = 1e-6f64.max(3.0 * m.std_error);
        assert!((s.value - exact).abs() <= tol, "series at {eta}: {} vs {exact}", s.value);
        assert!(s.truncation_bound.unwrap() >= (s.value - exact).abs());
        assert!((m.value - exact).abs() <= tol, "mc at {eta}");
        assert!((m.value - s.value).abs() <= tol);
    }
}

#[test]
fn kappa_is_continuous_in_q() {
    let eta = DualMatrix::from_rows(&[vec![0.1, -0.05], vec![-0.05, 0.08]]).unwrap();
    let q = CovMatrix::from_rows(&[vec![1.0, 0.3], vec![0.3, 0.8]]).unwrap();
    let opts = KappaOptions::with_method(KappaMethod::Quadrature);
    let target = kappa_eval(&eta, &q, &Activation::Gelu, &opts).unwrap().value;
    let dir = Matrix::from_rows(&[vec![0.6, 0.0], vec![0.0, 0.8]]).unwrap();
    let mut last = f64::INFINITY;
    for j in 1..=6 {
        let qj = CovMatrix::new(q.matrix().add(&dir.scale(10f64.powi(-j))).unwrap()).unwrap();
        let err = (kappa_eval(&eta, &qj, &Activation::Gelu, &opts).unwrap().value - target).abs();
        assert!(err < last, "j = {j}: {err} vs {last}");
        last = err;
    }
}
