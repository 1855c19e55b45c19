//! Adaptive Gauss–Kronrod quadrature and the numerical inclusion oracle.
//!
//! The oracle evaluates `log ∫ p1² p2` and `log ∫ p1 p2²` per dimension by
//! direct integration of the density products. Each integrand is evaluated
//! as `exp(log f(x) − shift)` where `shift` is the largest log-integrand
//! value found on a coarse grid, then integrated to an absolute tolerance of
//! `1e-12` on the shifted scale.

use crate::error::{check_dim, Error, Result};

use super::DiagGaussian;

/// Absolute tolerance per 1-D integral (on the shifted scale).
pub const ORACLE_ABS_TOL: f64 = 1e-12;
/// Largest dimension the oracle accepts.
pub const ORACLE_MAX_DIM: usize = 8;

const MAX_INTERVALS: usize = 4000;
const SUPPORT_SIGMAS: f64 = 40.0;
const INITIAL_PIECES: usize = 32;
const GRID_POINTS: usize = 4001;

// 15-point Kronrod nodes on [0, 1]; Gauss nodes are the odd indices.
#[allow(clippy::excessive_precision)]
const XGK: [f64; 8] = [
    0.991_455_371_120_812_639_206_854_697_526_329,
    0.949_107_912_342_758_524_526_189_684_047_851,
    0.864_864_423_359_769_072_789_712_788_640_926,
    0.741_531_185_599_394_439_863_864_773_280_788,
    0.586_087_235_467_691_130_294_144_845_693_013,
    0.405_845_151_377_397_166_906_606_412_076_961,
    0.207_784_955_007_898_467_600_689_403_773_245,
    0.0,
];
#[allow(clippy::excessive_precision)]
const WGK: [f64; 8] = [
    0.022_935_322_010_529_224_963_732_008_058_970,
    0.063_092_092_629_978_553_290_700_663_189_204,
    0.104_790_010_322_250_183_839_876_322_541_518,
    0.140_653_259_715_525_918_745_189_590_510_238,
    0.169_004_726_639_267_902_826_583_426_598_550,
    0.190_350_578_064_785_409_913_256_402_421_014,
    0.204_432_940_075_298_892_414_161_999_234_649,
    0.209_482_141_084_727_828_012_999_174_891_714,
];
#[allow(clippy::excessive_precision)]
const WG: [f64; 4] = [
    0.129_484_966_168_869_693_270_611_432_679_082,
    0.279_705_391_489_276_667_901_467_771_423_780,
    0.381_830_050_505_118_944_950_369_775_488_975,
    0.417_959_183_673_469_387_755_102_040_816_327,
];

#[derive(Debug, Clone, Copy)]
struct Segment {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

fn gauss_kronrod_15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> Segment {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for (j, (&x, &w)) in XGK.iter().zip(&WGK).take(7).enumerate() {
        let dx = half * x;
        let pair = f(center - dx) + f(center + dx);
        kronrod += w * pair;
        if j % 2 == 1 {
            gauss += WG[j / 2] * pair;
        }
    }
    Segment {
        a,
        b,
        value: kronrod * half,
        error: ((kronrod - gauss) * half).abs(),
    }
}

/// Globally adaptive 15-point Gauss–Kronrod integration of `f` over the
/// given breakpoints. Returns `(value, error_estimate)`.
pub fn integrate_adaptive<F: Fn(f64) -> f64>(
    f: F,
    breakpoints: &[f64],
    abs_tol: f64,
) -> Result<(f64, f64)> {
    if breakpoints.len() < 2 {
        return Err(Error::invalid("need at least two breakpoints"));
    }
    let mut segments: Vec<Segment> = breakpoints
        .windows(2)
        .filter(|w| w[1] > w[0])
        .map(|w| gauss_kronrod_15(&f, w[0], w[1]))
        .collect();
    loop {
        let total_err: f64 = segments.iter().map(|s| s.error).sum();
        if total_err <= abs_tol {
            let value = segments.iter().map(|s| s.value).sum();
            return Ok((value, total_err));
        }
        if segments.len() >= MAX_INTERVALS {
            let value: f64 = segments.iter().map(|s| s.value).sum();
            return Err(Error::Quadrature(format!(
                "{} intervals exhausted over [{}, {}]: estimate {value:e}, error {total_err:e} > {abs_tol:e}",
                segments.len(),
                breakpoints[0],
                breakpoints[breakpoints.len() - 1],
            )));
        }
        let (worst, _) = segments
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.error.total_cmp(&y.1.error))
            .expect("segments are never empty");
        let seg = segments.swap_remove(worst);
        let mid = 0.5 * (seg.a + seg.b);
        if !(mid > seg.a && mid < seg.b) {
            return Err(Error::Quadrature(format!(
                "interval [{}, {}] cannot be bisected further (error {:e})",
                seg.a, seg.b, seg.error
            )));
        }
        segments.push(gauss_kronrod_15(&f, seg.a, mid));
        segments.push(gauss_kronrod_15(&f, mid, seg.b));
    }
}

fn log_normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let r = x - mean;
    -0.5 * (2.0 * std::f64::consts::PI * var).ln() - 0.5 * r * r / var
}

/// `log ∫ N(x; m_sq, v_sq)² N(x; m_lin, v_lin) dx` by quadrature.
fn log_cross_power_integral(m_sq: f64, v_sq: f64, m_lin: f64, v_lin: f64) -> Result<f64> {
    let log_f = |x: f64| 2.0 * log_normal_pdf(x, m_sq, v_sq) + log_normal_pdf(x, m_lin, v_lin);
    let (s_sq, s_lin) = (v_sq.sqrt(), v_lin.sqrt());
    let lo = (m_sq - SUPPORT_SIGMAS * s_sq).min(m_lin - SUPPORT_SIGMAS * s_lin);
    let hi = (m_sq + SUPPORT_SIGMAS * s_sq).max(m_lin + SUPPORT_SIGMAS * s_lin);

    let (mut peak_x, mut shift) = (lo, f64::NEG_INFINITY);
    for k in 0..GRID_POINTS {
        let x = lo + (hi - lo) * k as f64 / (GRID_POINTS - 1) as f64;
        let v = log_f(x);
        if v > shift {
            shift = v;
            peak_x = x;
        }
    }
    if !shift.is_finite() {
        return Err(Error::Quadrature(format!(
            "log-integrand has no finite value on [{lo}, {hi}]"
        )));
    }

    let mut breaks: Vec<f64> = (0..=INITIAL_PIECES)
        .map(|k| lo + (hi - lo) * k as f64 / INITIAL_PIECES as f64)
        .collect();
    breaks.push(peak_x);
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();

    let (value, _) = integrate_adaptive(|x| (log_f(x) - shift).exp(), &breaks, ORACLE_ABS_TOL)?;
    if !(value > 0.0) {
        return Err(Error::Quadrature(format!(
            "shifted integral is {value:e} (peak at {peak_x}, shift {shift})"
        )));
    }
    Ok(value.ln() + shift)
}

/// Numerical `H(z1 ⊂ z2)`: per-dimension quadrature of both integrals,
/// summed in the log domain. Independent of the closed form.
pub fn quadrature_inclusion_oracle(z1: &DiagGaussian, z2: &DiagGaussian) -> Result<f64> {
    check_dim(z1.dim(), z2.dim())?;
    if z1.dim() > ORACLE_MAX_DIM {
        return Err(Error::invalid(format!(
            "quadrature oracle supports d <= {ORACLE_MAX_DIM}, got {}",
            z1.dim()
        )));
    }
    let (v1, v2) = (z1.variance(), z2.variance());
    for (index, &value) in v1.iter().chain(&v2).enumerate() {
        if !(value > 0.0) {
            return Err(Error::NonPositiveVariance {
                index: index % z1.dim(),
                value,
            });
        }
    }
    let mut h = 0.0;
    for i in 0..z1.dim() {
        let (m1, m2) = (z1.mu()[i], z2.mu()[i]);
        h += log_cross_power_integral(m1, v1[i], m2, v2[i])?
            - log_cross_power_integral(m2, v2[i], m1, v1[i])?;
    }
    Ok(h)
}
