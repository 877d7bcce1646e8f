//! Box-constrained BFGS with backtracking line search, sized for the handful
//! of variance parameters in the mixed-model fitter.

#[derive(Debug, Clone)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Stop when the relative objective change stays below this for
    /// `patience` consecutive iterations.
    pub rel_tol: f64,
    pub grad_tol: f64,
    pub patience: usize,
    pub lower: f64,
    pub upper: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            rel_tol: 1e-8,
            grad_tol: 1e-6,
            patience: 2,
            lower: -25.0,
            upper: 25.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes `f` given a closure returning `(value, gradient)`.
pub fn bfgs<F>(mut fg: F, x0: &[f64], opts: &BfgsOptions) -> Minimum
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let n = x0.len();
    let clamp = |v: f64| v.clamp(opts.lower, opts.upper);
    let mut x: Vec<f64> = x0.iter().map(|&v| clamp(v)).collect();
    let (mut f, mut g) = fg(&x);
    // Inverse Hessian approximation, row-major.
    let mut h = vec![0.0; n * n];
    for i in 0..n {
        h[i * n + i] = 1.0;
    }
    let mut small_steps = 0;
    let mut iterations = 0;
    let mut converged = false;
    if !f.is_finite() {
        return Minimum { x, f, grad: g, iterations, converged };
    }

    while iterations < opts.max_iter {
        // Projected gradient: components pushing against an active bound are ignored.
        let pg: Vec<f64> = (0..n)
            .map(|i| {
                if (x[i] <= opts.lower && g[i] > 0.0) || (x[i] >= opts.upper && g[i] < 0.0) {
                    0.0
                } else {
                    g[i]
                }
            })
            .collect();
        if dot(&pg, &pg).sqrt() < opts.grad_tol {
            converged = true;
            break;
        }
        iterations += 1;
        let mut d: Vec<f64> = (0..n).map(|i| -(0..n).map(|j| h[i * n + j] * pg[j]).sum::<f64>()).collect();
        let mut slope = dot(&d, &pg);
        if slope >= 0.0 {
            for i in 0..n {
                for j in 0..n {
                    h[i * n + j] = if i == j { 1.0 } else { 0.0 };
                }
            }
            d = pg.iter().map(|v| -v).collect();
            slope = dot(&d, &pg);
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let xn: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| clamp(xi + step * di)).collect();
            let (fnew, gnew) = fg(&xn);
            if fnew.is_finite() && fnew <= f + 1e-4 * step * slope {
                accepted = Some((xn, fnew, gnew));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fnew, gnew)) = accepted else {
            // No decrease possible along the search direction: a stationary point
            // up to numerical precision.
            converged = dot(&pg, &pg).sqrt() < opts.grad_tol.sqrt();
            break;
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gnew.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-14 {
            if iterations == 1 {
                let scale = sy / dot(&y, &y);
                h.iter_mut().for_each(|v| *v *= scale);
            }
            // H <- (I - rho s y^T) H (I - rho y s^T) + rho s s^T
            let rho = 1.0 / sy;
            let hy: Vec<f64> = (0..n).map(|i| (0..n).map(|j| h[i * n + j] * y[j]).sum()).collect();
            let yhy = dot(&y, &hy);
            for i in 0..n {
                for j in 0..n {
                    h[i * n + j] += rho * ((1.0 + rho * yhy) * s[i] * s[j] - hy[i] * s[j] - s[i] * hy[j]);
                }
            }
        }
        let rel = (f - fnew).abs() / (f.abs().max(1e-10));
        x = xn;
        f = fnew;
        g = gnew;
        if rel < opts.rel_tol {
            small_steps += 1;
            if small_steps >= opts.patience {
                converged = true;
                break;
            }
        } else {
            small_steps = 0;
        }
    }
    Minimum { x, f, grad: g, iterations, converged }
}
