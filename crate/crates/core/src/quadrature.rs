//! Globally adaptive Gauss-Kronrod (7/15) integration of vector-valued integrands.

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
// Gauss weights for the odd Kronrod nodes XGK[1], XGK[3], XGK[5], XGK[7].
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

#[derive(Clone, Copy, Debug)]
pub struct Tolerance {
    pub abs: f64,
    pub rel: f64,
    pub max_intervals: usize,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self { abs: 1e-300, rel: 1e-12, max_intervals: 400 }
    }
}

struct Piece {
    a: f64,
    b: f64,
    value: Vec<f64>,
    error: f64,
}

fn rule(f: &mut impl FnMut(f64, &mut [f64]), a: f64, b: f64, dim: usize, buf: &mut [f64]) -> Piece {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let mut kronrod = vec![0.0; dim];
    let mut gauss = vec![0.0; dim];
    for (k, &x) in XGK.iter().enumerate() {
        let nodes: &[f64] = if x == 0.0 { &[0.0] } else { &[-1.0, 1.0] };
        for &sign in nodes {
            buf.iter_mut().for_each(|v| *v = 0.0);
            f(center + sign * half * x, buf);
            for i in 0..dim {
                kronrod[i] += WGK[k] * buf[i];
                if k % 2 == 1 {
                    gauss[i] += WG[k / 2] * buf[i];
                }
            }
        }
    }
    let mut error = 0.0f64;
    for i in 0..dim {
        kronrod[i] *= half;
        gauss[i] *= half;
        error = error.max((kronrod[i] - gauss[i]).abs());
    }
    Piece { a, b, value: kronrod, error }
}

/// Integrates `f` (which writes `dim` values into its output slice) over `[a, b]`, starting from
/// `initial` equal subintervals. Returns the integral and the summed error estimate (max-norm).
pub fn integrate_vec(
    mut f: impl FnMut(f64, &mut [f64]),
    a: f64,
    b: f64,
    dim: usize,
    initial: usize,
    tol: Tolerance,
) -> (Vec<f64>, f64) {
    let mut buf = vec![0.0; dim];
    let n0 = initial.max(1);
    let width = (b - a) / n0 as f64;
    let mut pieces: Vec<Piece> = (0..n0)
        .map(|i| {
            let lo = a + i as f64 * width;
            let hi = if i + 1 == n0 { b } else { lo + width };
            rule(&mut f, lo, hi, dim, &mut buf)
        })
        .collect();
    loop {
        let mut total = vec![0.0; dim];
        let mut err = 0.0;
        for p in &pieces {
            for (t, v) in total.iter_mut().zip(&p.value) {
                *t += v;
            }
            err += p.error;
        }
        let scale = total.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if err <= tol.abs.max(tol.rel * scale) || pieces.len() >= tol.max_intervals {
            return (total, err);
        }
        let (worst, _) = pieces
            .iter()
            .enumerate()
            .fold((0, -1.0), |(bi, be), (i, p)| if p.error > be { (i, p.error) } else { (bi, be) });
        let p = pieces.swap_remove(worst);
        let mid = 0.5 * (p.a + p.b);
        if !(mid > p.a && mid < p.b) {
            // interval exhausted at machine resolution
            pieces.push(Piece { error: 0.0, ..p });
            continue;
        }
        pieces.push(rule(&mut f, p.a, mid, dim, &mut buf));
        pieces.push(rule(&mut f, mid, p.b, dim, &mut buf));
    }
}

/// Scalar convenience wrapper around [`integrate_vec`].
pub fn integrate(mut f: impl FnMut(f64) -> f64, a: f64, b: f64, tol: Tolerance) -> (f64, f64) {
    let (v, e) = integrate_vec(|x, out| out[0] = f(x), a, b, 1, 1, tol);
    (v[0], e)
}

/// `int_0^inf f` through the substitution `x = t / (1 - t)`.
pub fn integrate_half_line(mut f: impl FnMut(f64) -> f64, tol: Tolerance) -> (f64, f64) {
    integrate(
        |t| {
            let s = 1.0 - t;
            let x = t / s;
            let v = f(x);
            if v == 0.0 {
                0.0
            } else {
                v / (s * s)
            }
        },
        0.0,
        1.0,
        tol,
    )
}
