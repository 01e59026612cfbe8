//! Quasi-Newton maximization with BFGS updates and backtracking line search.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BfgsOptions {
    pub max_iterations: usize,
    /// Stop once the gradient max-norm falls below this.
    pub grad_tol: f64,
    /// Step halvings allowed per line search.
    pub max_halvings: usize,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self { max_iterations: 500, grad_tol: 1e-5, max_halvings: 60 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BfgsOutcome {
    pub x: DVector<f64>,
    pub value: f64,
    pub gradient: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl BfgsOutcome {
    pub fn grad_norm(&self) -> f64 {
        self.gradient.amax()
    }
}

const ARMIJO: f64 = 1e-4;

/// Maximize `f`, which returns the value and gradient at a point, or `None`
/// where the objective is undefined (such points are treated as `-inf` and
/// shrink the step). The returned value is never below the value at `x0`.
pub fn maximize<F>(mut f: F, x0: DVector<f64>, opts: &BfgsOptions) -> Result<BfgsOutcome>
where
    F: FnMut(&DVector<f64>) -> Result<Option<(f64, DVector<f64>)>>,
{
    let n = x0.len();
    let (mut fx, mut gx) = f(&x0)?
        .ok_or_else(|| Error::InvalidArgument("objective undefined at the starting point".into()))?;
    if !fx.is_finite() || gx.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numerical("non-finite objective or gradient at the starting point".into()));
    }
    let mut x = x0;
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut fresh = true;
    let mut iterations = 0;

    while iterations < opts.max_iterations {
        if gx.amax() < opts.grad_tol {
            return Ok(BfgsOutcome { x, value: fx, gradient: gx, iterations, converged: true });
        }
        iterations += 1;
        let mut dir = &h * &gx;
        let mut slope = gx.dot(&dir);
        if !(slope > 0.0) {
            h = DMatrix::identity(n, n);
            fresh = true;
            dir = gx.clone();
            slope = gx.dot(&dir);
        }
        let mut step = if fresh { (1.0 / gx.amax()).min(1.0) } else { 1.0 };
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let trial = &x + step * &dir;
            if let Some((ft, gt)) = f(&trial)? {
                if ft.is_finite() && gt.iter().all(|g| g.is_finite()) && ft >= fx + ARMIJO * step * slope {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((xn, fnew, gn)) = accepted else {
            if fresh {
                // no ascent even along the gradient: stationary to working precision
                break;
            }
            h = DMatrix::identity(n, n);
            fresh = true;
            continue;
        };
        let s = &xn - &x;
        // gradients of the minimized function −f
        let y = &gx - &gn;
        let ys = y.dot(&s);
        if ys > 1e-12 * s.norm() * y.norm() {
            if fresh {
                h *= ys / y.dot(&y);
            }
            let rho = 1.0 / ys;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            // H ← (I − ρ s yᵀ) H (I − ρ y sᵀ) + ρ s sᵀ
            h += (rho * rho * yhy + rho) * (&s * s.transpose()) - rho * (&hy * s.transpose() + &s * hy.transpose());
            fresh = false;
        }
        x = xn;
        fx = fnew;
        gx = gn;
    }
    let converged = gx.amax() < opts.grad_tol;
    Ok(BfgsOutcome { x, value: fx, gradient: gx, iterations, converged })
}
