//! Numerical convolution of Gaussian kernels, used to check the closed-form
//! covariances independently.

use crate::error::{Error, Result};
use crate::kernel::MogpHyperparams;

// Gauss–Kronrod 7/15 nodes and weights on [-1, 1].
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
    0.209_482_141_084_728_0,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for (j, (&x, &w)) in XGK.iter().zip(&WGK).take(7).enumerate() {
        let f1 = f(c - h * x);
        let f2 = f(c + h * x);
        kronrod += w * (f1 + f2);
        // odd Kronrod nodes coincide with the Gauss nodes
        if j % 2 == 1 {
            gauss += WG[j / 2] * (f1 + f2);
        }
    }
    (kronrod * h, ((kronrod - gauss) * h).abs())
}

/// Adaptive Gauss–Kronrod integration of `f` on `[a, b]`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> Result<f64> {
    fn recurse<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64, depth: u32) -> Result<f64> {
        let (v, err) = gk15(f, a, b);
        if err <= tol.max(1e-15 * v.abs()) {
            return Ok(v);
        }
        if depth == 0 {
            return Err(Error::Numerical(format!(
                "quadrature did not converge on [{a}, {b}] (error estimate {err:e})"
            )));
        }
        let m = 0.5 * (a + b);
        Ok(recurse(f, a, m, 0.5 * tol, depth - 1)? + recurse(f, m, b, 0.5 * tol, depth - 1)?)
    }
    recurse(&f, a, b, tol, 40)
}

/// `∫ h_1(dt - s) h_2(-s) ds` for kernels `h(u) = v exp(-B² u² / 2)`.
pub fn kernel_convolution(v1: f64, b1: f64, v2: f64, b2: f64, dt: f64) -> Result<f64> {
    if v1 == 0.0 || v2 == 0.0 {
        return Ok(0.0);
    }
    if !(dt.is_finite() && b1 > 0.0 && b2 > 0.0) {
        return Err(Error::InvalidArgument("invalid kernel or lag".into()));
    }
    let reach = 12.0 / b1.min(b2);
    let lo = dt.min(0.0) - reach;
    let hi = dt.max(0.0) + reach;
    let f = |s: f64| {
        let u = dt - s;
        v1 * (-0.5 * b1 * b1 * u * u).exp() * v2 * (-0.5 * b2 * b2 * s * s).exp()
    };
    let scale = (v1 * v2).abs() / b1.max(b2);
    let tol = 1e-13 * scale.max(1e-300);
    // panels no wider than the product's peak, so no node pattern can step over it
    let width = 1.0 / (b1 * b1 + b2 * b2).sqrt();
    let panels = ((hi - lo) / width).ceil().max(1.0) as usize;
    let step = (hi - lo) / panels as f64;
    (0..panels).try_fold(0.0, |acc, j| {
        let a = lo + j as f64 * step;
        let b = if j + 1 == panels { hi } else { a + step };
        Ok(acc + integrate(f, a, b, tol / panels as f64)?)
    })
}

/// Quadrature counterpart of the closed-form covariances: the auto covariance
/// without noise when `a == b`, the shared-component cross covariance otherwise.
pub fn quadrature_oracle(a: usize, b: usize, dt: f64, hp: &MogpHyperparams) -> Result<f64> {
    let k = hp.k();
    for idx in [a, b] {
        if idx >= k {
            return Err(Error::FactorIndex { index: idx, k });
        }
    }
    if a == b {
        Ok(kernel_convolution(hp.v0[a], hp.b0[a], hp.v0[a], hp.b0[a], dt)?
            + kernel_convolution(hp.v1[a], hp.b1[a], hp.v1[a], hp.b1[a], dt)?)
    } else {
        kernel_convolution(hp.v0[a], hp.b0[a], hp.v0[b], hp.b0[b], dt)
    }
}
