//! Box-constrained limited-memory quasi-Newton minimization.
//!
//! Projected L-BFGS: the two-loop recursion supplies a direction on the
//! variables not held at a bound, and a backtracking Armijo search runs along
//! the projected path.

use std::collections::VecDeque;

#[derive(Debug, Clone, Copy)]
pub struct LbfgsbOptions {
    pub max_iter: usize,
    pub memory: usize,
    /// Stop when the projected gradient's largest entry falls below this.
    pub pgtol: f64,
    /// Stop when the relative decrease of f falls below this.
    pub ftol: f64,
    /// Relative size of rounding noise in f. Trial points whose value is
    /// within this band of the current one are judged by the directional
    /// derivative instead of the sufficient-decrease test.
    pub noise: f64,
}

impl Default for LbfgsbOptions {
    fn default() -> Self {
        LbfgsbOptions {
            max_iter: 200,
            memory: 10,
            pgtol: 1e-8,
            ftol: 1e-13,
            noise: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub message: &'static str,
}

fn project(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for i in 0..x.len() {
        x[i] = x[i].clamp(lo[i], hi[i]);
    }
}

fn projected_gradient(x: &[f64], g: &[f64], lo: &[f64], hi: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            if (x[i] <= lo[i] && g[i] > 0.0) || (x[i] >= hi[i] && g[i] < 0.0) {
                0.0
            } else {
                g[i]
            }
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimize `f` over the box [lo, hi]. `f` returns the value and gradient;
/// a non-finite value is treated as "step too long".
pub fn minimize<F>(mut f: F, x0: &[f64], lo: &[f64], hi: &[f64], opts: &LbfgsbOptions) -> OptimResult
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let n = x0.len();
    let mut x = x0.to_vec();
    project(&mut x, lo, hi);
    let (mut fx, mut g) = f(&x);
    let mut evaluations = 1;
    let mut mem: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let done = |x: Vec<f64>, fx, g, it, ev, ok, msg| OptimResult {
        x,
        f: fx,
        grad: g,
        iterations: it,
        evaluations: ev,
        converged: ok,
        message: msg,
    };
    if n == 0 {
        return done(x, fx, g, 0, evaluations, true, "no free variables");
    }
    if !fx.is_finite() {
        return done(x, fx, g, 0, evaluations, false, "non-finite objective at start");
    }
    for it in 0..opts.max_iter {
        let pg = projected_gradient(&x, &g, lo, hi);
        if pg.iter().fold(0.0f64, |a, v| a.max(v.abs())) < opts.pgtol {
            return done(x, fx, g, it, evaluations, true, "projected gradient small");
        }
        let free: Vec<bool> = pg.iter().zip(&g).map(|(p, gi)| *p != 0.0 || *gi == 0.0).collect();
        let mask = |v: &[f64]| -> Vec<f64> {
            v.iter().zip(&free).map(|(a, &fr)| if fr { *a } else { 0.0 }).collect()
        };

        // two-loop recursion on the free subspace
        let mut q = mask(&g);
        let mut alphas = Vec::with_capacity(mem.len());
        for (s, y, rho) in mem.iter().rev() {
            let a = rho * dot(&mask(s), &q);
            for i in 0..n {
                q[i] -= a * y[i] * f64::from(u8::from(free[i]));
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = mem.back() {
            let (sm, ym) = (mask(s), mask(y));
            let yy = dot(&ym, &ym);
            if yy > 0.0 {
                let gamma = dot(&sm, &ym) / yy;
                if gamma > 0.0 {
                    q.iter_mut().for_each(|v| *v *= gamma);
                }
            }
        }
        for ((s, y, rho), a) in mem.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(&mask(y), &q);
            for i in 0..n {
                q[i] += (a - b) * s[i] * f64::from(u8::from(free[i]));
            }
        }
        let mut d: Vec<f64> = q.iter().map(|v| -v).collect();
        if dot(&d, &g) >= 0.0 || d.iter().any(|v| !v.is_finite()) {
            mem.clear();
            d = pg.iter().map(|v| -v).collect();
        }
        let scale = fx.abs().max(1.0);
        if -dot(&d, &g) <= opts.ftol * scale {
            return done(x, fx, g, it, evaluations, true, "predicted decrease small");
        }
        let mut t = if mem.is_empty() {
            let norm = d.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            (1.0 / norm).min(1.0)
        } else {
            1.0
        };
        let x_size = x.iter().fold(1.0f64, |a, v| a.max(v.abs()));

        let mut accepted = None;
        let mut noise_floor = false;
        for _ in 0..40 {
            let mut xn: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + t * b).collect();
            project(&mut xn, lo, hi);
            let step: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
            let slope = dot(&g, &step);
            if step.iter().fold(0.0f64, |a, v| a.max(v.abs())) <= 1e-12 * x_size || slope >= 0.0 {
                break;
            }
            let (fn_, gn) = f(&xn);
            evaluations += 1;
            if fn_.is_finite() && fn_ <= fx + 1e-4 * slope {
                accepted = Some((xn, fn_, gn, step));
                break;
            }
            let shrink = if fn_.is_finite() && (fn_ - fx).abs() <= opts.noise * scale {
                let end_slope = dot(&gn, &step);
                if end_slope.abs() < slope.abs() {
                    accepted = Some((xn, fn_, gn, step));
                    break;
                }
                if end_slope <= 0.0 {
                    noise_floor = true;
                    break;
                }
                // root of the linear model of the directional derivative
                (slope / (slope - end_slope)).clamp(0.1, 0.5)
            } else if fn_.is_finite() {
                // minimizer of the quadratic through f(x), the slope and f(xn)
                let curv = fn_ - fx - slope;
                if curv > 0.0 {
                    (-0.5 * slope / curv).clamp(0.1, 0.5)
                } else {
                    0.5
                }
            } else {
                0.1
            };
            t *= shrink;
        }
        let Some((xn, fn_, gn, s)) = accepted else {
            if noise_floor {
                return done(x, fx, g, it, evaluations, true, "objective noise floor reached");
            }
            if !mem.is_empty() {
                mem.clear();
                continue;
            }
            return done(x, fx, g, it, evaluations, false, "line search failed");
        };
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
            if mem.len() == opts.memory {
                mem.pop_front();
            }
            mem.push_back((s, y, 1.0 / sy));
        }
        let decrease = fx - fn_;
        x = xn;
        g = gn;
        let scale = fx.abs().max(fn_.abs()).max(1.0);
        fx = fn_;
        if (0.0..=opts.ftol * scale).contains(&decrease) {
            return done(x, fx, g, it + 1, evaluations, true, "relative decrease small");
        }
    }
    done(x, fx, g, opts.max_iter, evaluations, false, "iteration limit")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> (f64, Vec<f64>) {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
        (f, g)
    }

    #[test]
    fn unconstrained_rosenbrock() {
        let inf = f64::INFINITY;
        let r = minimize(rosenbrock, &[-1.2, 1.0], &[-inf, -inf], &[inf, inf], &LbfgsbOptions::default());
        assert!(r.converged, "{}", r.message);
        assert!((r.x[0] - 1.0).abs() < 1e-5 && (r.x[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn active_bound_is_respected() {
        let r = minimize(rosenbrock, &[0.0, 0.0], &[-2.0, -2.0], &[0.5, 2.0], &LbfgsbOptions::default());
        assert_eq!(r.x[0], 0.5);
        assert!((r.x[1] - 0.25).abs() < 1e-6);
    }

    #[test]
    fn quadratic_in_many_dimensions() {
        let n = 30;
        let f = |x: &[f64]| {
            let mut v = 0.0;
            let mut g = vec![0.0; n];
            for i in 0..n {
                let w = (i + 1) as f64;
                v += 0.5 * w * (x[i] - 1.0 / w).powi(2);
                g[i] = w * (x[i] - 1.0 / w);
            }
            (v, g)
        };
        let lo = vec![-30.0; n];
        let hi = vec![30.0; n];
        let r = minimize(f, &vec![3.0; n], &lo, &hi, &LbfgsbOptions::default());
        for i in 0..n {
            assert!((r.x[i] - 1.0 / (i + 1) as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn noisy_objective_still_reaches_minimum() {
        // rounding-level noise that a strict Armijo test would reject near the optimum
        let f = |x: &[f64]| {
            let bits = x.iter().fold(0u64, |h, v| h.rotate_left(17) ^ v.to_bits());
            let wobble = ((bits.wrapping_mul(0x9E37_79B9_7F4A_7C15) >> 11) as f64 / (1u64 << 53) as f64) - 0.5;
            let v = 1e4 + (x[0] - 2.0).powi(2) + 10.0 * (x[1] + 1.0).powi(2);
            (v * (1.0 + 1e-12 * wobble), vec![2.0 * (x[0] - 2.0), 20.0 * (x[1] + 1.0)])
        };
        let opts = LbfgsbOptions { noise: 1e-10, ftol: 0.0, ..LbfgsbOptions::default() };
        let r = minimize(f, &[0.0, 0.0], &[-10.0, -10.0], &[10.0, 10.0], &opts);
        assert!((r.x[0] - 2.0).abs() < 1e-6 && (r.x[1] + 1.0).abs() < 1e-6, "{:?} {}", r.x, r.message);
    }
}
