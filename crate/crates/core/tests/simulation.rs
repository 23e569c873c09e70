use ldpnn_core::rate::NetworkConfig;
use ldpnn_core::simulator::{sample_network, sample_via_gram, tail_experiment, Direction, Summary, TailOptions, WidthSchedule};
use ldpnn_core::Activation;

fn one_d(depth: usize) -> NetworkConfig {
    NetworkConfig {
        depth,
        gammas: vec![1.0; depth],
        c_b: 0.0,
        c_w: 1.0,
        n0: 1,
        inputs: vec![vec![1.0]],
        n_out: 1,
        activation: Activation::Relu,
    }
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
}

#[test]
fn network_and_covariance_root_agree_in_two_moments() {
    let c = one_d(1);
    let s = WidthSchedule::new(&c, 256).unwrap();
    let reps = 100_000u64;
    let a: Vec<f64> = (0..reps).map(|k| sample_network(&c, &s, k).unwrap()[(0, 0)]).collect();
    let b: Vec<f64> = (0..reps).map(|k| sample_via_gram(&c, &s, reps + k).unwrap()[(0, 0)]).collect();
    for power in [1, 2] {
        let pa: Vec<f64> = a.iter().map(|x| x.powi(power)).collect();
        let pb: Vec<f64> = b.iter().map(|x| x.powi(power)).collect();
        let ((ma, va), (mb, vb)) = (mean_var(&pa), mean_var(&pb));
        let z = (ma - mb).abs() / ((va + vb) / reps as f64).sqrt();
        assert!(z < 4.0, "moment {power}: {ma} vs {mb}, z = {z}");
    }
}

#[test]
fn fitted_slopes_increase_with_the_threshold() {
    let c = one_d(1);
    let opts = TailOptions { v_list: vec![10, 20, 40], samples_per_v: 400_000, seed: 21, ..TailOptions::default() };
    let fit = |t: f64| tail_experiment(&c, &Summary::GramDiagonal { alpha: 0 }, t, Direction::Above, &opts).unwrap();
    let (lo, hi) = (fit(0.8), fit(1.0));
    assert!(lo.fit.slope <= hi.fit.slope + 2.0 * (lo.fit.slope_std_error + hi.fit.slope_std_error), "{:?} vs {:?}", lo.fit, hi.fit);
    assert!(lo.predicted_rate < hi.predicted_rate);
}

#[test]
fn deeper_event_rates_are_positive_and_ordered() {
    let c = one_d(2);
    let opts = TailOptions { v_list: vec![8, 16], samples_per_v: 20_000, seed: 2, ..TailOptions::default() };
    let r = tail_experiment(&c, &Summary::GramDiagonal { alpha: 0 }, 0.5, Direction::Above, &opts).unwrap();
    assert!(r.predicted_rate > 0.0 && r.predicted_rate.is_finite());
    assert!(r.rows.iter().all(|row| row.p_hat > 0.0 && row.p_hat < 0.5));
}
