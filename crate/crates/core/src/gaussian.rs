//! Multivariate-normal substrate: jittered Cholesky factorization,
//! log-density, sampling, Gaussian conditioning, truncated normals.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::basis::MeanSpec;
use crate::error::{LgpError, Result};
use crate::kernels::{cross_cov, gram, GramMatrix, KernelSpec};
use crate::normal;

/// Relative jitter rungs tried after a bare factorization fails.
pub const JITTER_LADDER: [f64; 7] = [0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5];
/// Largest relative jitter; the last rung of the ladder.
pub const MAX_REL_JITTER: f64 = 1e-4;

fn ladder() -> impl Iterator<Item = f64> {
    JITTER_LADDER.into_iter().chain(std::iter::once(MAX_REL_JITTER))
}

fn try_factor(matrix: &DMatrix<f64>, jitter: f64, scale: f64) -> Option<Cholesky<f64, Dyn>> {
    let mut m = matrix.clone();
    for i in 0..m.nrows() {
        m[(i, i)] += jitter;
    }
    let chol = Cholesky::new(m)?;
    let floor = 0.5 * jitter.max(1e-12 * scale);
    let ok = chol.l_dirty().diagonal().iter().all(|d| d * d >= floor && d.is_finite());
    ok.then_some(chol)
}

/// Lower Cholesky factor of `matrix + jitter·I` with the smallest jitter on
/// the ladder that yields a numerically positive-definite factor. Returns the
/// factor, the absolute jitter and the jittered matrix.
pub fn factor_with_jitter(
    matrix: DMatrix<f64>,
) -> Result<(Cholesky<f64, Dyn>, f64, DMatrix<f64>)> {
    factor_from_rung(matrix, 0)
}

fn factor_from_rung(
    matrix: DMatrix<f64>,
    first_rung: usize,
) -> Result<(Cholesky<f64, Dyn>, f64, DMatrix<f64>)> {
    let scale = matrix.diagonal().iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let scale = if scale > 0.0 { scale } else { 1.0 };
    for rel in ladder().skip(first_rung) {
        let jitter = rel * scale;
        if let Some(chol) = try_factor(&matrix, jitter, scale) {
            let mut m = matrix;
            for i in 0..m.nrows() {
                m[(i, i)] += jitter;
            }
            return Ok((chol, jitter, m));
        }
    }
    Err(LgpError::IllConditioned {
        max_jitter: MAX_REL_JITTER * scale,
        t_a: f64::NAN,
        t_b: f64::NAN,
    })
}

/// Solve L x = b in place for lower-triangular L.
pub fn solve_lower(l: &DMatrix<f64>, b: &mut DVector<f64>) {
    let n = b.len();
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[(i, k)] * b[k];
        }
        b[i] = s / l[(i, i)];
    }
}

/// L⁻¹ for lower-triangular L (only the lower triangle of `l` is read).
pub fn lower_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let mut x = DMatrix::zeros(n, n);
    let mut col = vec![0.0; n];
    for j in 0..n {
        col[j..].iter_mut().for_each(|v| *v = 0.0);
        col[j] = 1.0;
        for k in j..n {
            let xk = col[k] / l[(k, k)];
            col[k] = xk;
            if xk != 0.0 {
                let lk = &l.as_slice()[k * n + k + 1..(k + 1) * n];
                for (c, lv) in col[k + 1..].iter_mut().zip(lk) {
                    *c -= xk * lv;
                }
            }
        }
        x.column_mut(j).rows_mut(j, n - j).copy_from_slice(&col[j..]);
    }
    x
}

/// A⁻¹ from the Cholesky factor of A.
pub fn spd_inverse(chol: &Cholesky<f64, Dyn>) -> DMatrix<f64> {
    let li = lower_inverse(chol.l_dirty());
    li.transpose() * &li
}

/// Mean vector and factorized covariance of one individual's θ at its
/// observation times.
#[derive(Clone, Debug)]
pub struct GaussianSurrogate {
    pub mean: DVector<f64>,
    pub cov: GramMatrix,
}

impl GaussianSurrogate {
    pub fn new(mean: &MeanSpec, kernel: &KernelSpec, times: &[f64]) -> Result<Self> {
        let m = times
            .iter()
            .map(|&t| mean.eval(t))
            .collect::<Result<Vec<_>>>()?;
        Ok(GaussianSurrogate {
            mean: DVector::from_vec(m),
            cov: gram(kernel, times)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

pub fn mvn_logpdf(x: &DVector<f64>, s: &GaussianSurrogate) -> Result<f64> {
    let n = s.dim();
    if x.len() != n {
        return Err(LgpError::DimensionMismatch {
            expected: n,
            got: x.len(),
        });
    }
    let l = s.cov.chol.l_dirty();
    let mut r = x - &s.mean;
    solve_lower(l, &mut r);
    let half_ln_det: f64 = l.diagonal().iter().map(|d| d.ln()).sum();
    Ok(-(n as f64) * normal::LN_SQRT_2PI - half_ln_det - 0.5 * r.norm_squared())
}

pub fn mvn_sample<R: Rng + ?Sized>(s: &GaussianSurrogate, rng: &mut R) -> DVector<f64> {
    let z = standard_normal_vec(s.dim(), rng);
    lower_times(s.cov.chol.l_dirty(), &z) + &s.mean
}

pub(crate) fn standard_normal_vec<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// L z using only the lower triangle of L.
pub(crate) fn lower_times(l: &DMatrix<f64>, z: &DVector<f64>) -> DVector<f64> {
    let n = z.len();
    DVector::from_fn(n, |i, _| (0..=i).map(|k| l[(i, k)] * z[k]).sum())
}

/// Law of θ(t*) given θ at the conditioning times, under the prior GP.
#[derive(Clone, Debug)]
pub struct ConditionalGaussian {
    /// m(t*).
    pub prior_mean_star: f64,
    /// m at the conditioning times.
    pub prior_mean: DVector<f64>,
    /// Σ₁₂ Σ₂₂⁻¹.
    pub weights: DVector<f64>,
    /// K(t*,t*) − Σ₁₂ Σ₂₂⁻¹ Σ₂₁, clamped at 0.
    pub sigma2: f64,
}

impl ConditionalGaussian {
    /// μ(θ) = m(t*) + weightsᵀ(θ − m).
    pub fn mu(&self, theta: &DVector<f64>) -> f64 {
        self.prior_mean_star + self.weights.dot(&(theta - &self.prior_mean))
    }
}

/// Conditioning of a whole evaluation grid on the same times.
#[derive(Clone, Debug)]
pub struct ConditionalGrid {
    pub grid: Vec<f64>,
    pub prior_mean_star: DVector<f64>,
    pub prior_mean: DVector<f64>,
    /// Row g holds Σ₁₂ Σ₂₂⁻¹ for grid point g.
    pub weights: DMatrix<f64>,
    pub sigma2: Vec<f64>,
    pub jitter_applied: f64,
}

impl ConditionalGrid {
    pub fn mu(&self, theta: &DVector<f64>) -> DVector<f64> {
        &self.weights * (theta - &self.prior_mean) + &self.prior_mean_star
    }

    pub fn at(&self, g: usize) -> ConditionalGaussian {
        ConditionalGaussian {
            prior_mean_star: self.prior_mean_star[g],
            prior_mean: self.prior_mean.clone(),
            weights: self.weights.row(g).transpose(),
            sigma2: self.sigma2[g],
        }
    }
}

pub fn conditional_at(
    t_star: f64,
    times: &[f64],
    mean: &MeanSpec,
    kernel: &KernelSpec,
) -> Result<ConditionalGaussian> {
    Ok(conditional_grid(&[t_star], times, mean, kernel)?.at(0))
}

/// Conditional laws of θ at every grid point given θ at `times`.
///
/// If cancellation drives a variance below −1e-10·scale the factorization is
/// repeated at the next jitter rung; only when the ladder is exhausted is a
/// negative variance reported.
pub fn conditional_grid(
    grid: &[f64],
    times: &[f64],
    mean: &MeanSpec,
    kernel: &KernelSpec,
) -> Result<ConditionalGrid> {
    let eval_mean = |ts: &[f64]| -> Result<DVector<f64>> {
        Ok(DVector::from_vec(
            ts.iter().map(|&t| mean.eval(t)).collect::<Result<Vec<_>>>()?,
        ))
    };
    let prior_mean_star = eval_mean(grid)?;
    let prior_mean = eval_mean(times)?;
    let kss: Vec<f64> = grid.iter().map(|&t| kernel.eval(t, t)).collect();
    if times.is_empty() {
        return Ok(ConditionalGrid {
            grid: grid.to_vec(),
            prior_mean_star,
            prior_mean,
            weights: DMatrix::zeros(grid.len(), 0),
            sigma2: kss,
            jitter_applied: 0.0,
        });
    }
    let base = gram(kernel, times)?;
    let raw = {
        let mut m = base.matrix.clone();
        for i in 0..m.nrows() {
            m[(i, i)] -= base.jitter_applied;
        }
        m
    };
    let scale = raw.diagonal().iter().fold(0.0f64, |a, &b| a.max(b.abs())).max(f64::MIN_POSITIVE);
    let first = ladder()
        .position(|r| r * scale >= base.jitter_applied)
        .unwrap_or(0);
    let k_ts = cross_cov(kernel, times, grid);
    let mut worst = 0.0;
    for rung in first..JITTER_LADDER.len() + 1 {
        let (chol, jitter, _) = match factor_from_rung(raw.clone(), rung) {
            Ok(f) => f,
            Err(_) => break,
        };
        let sol = chol.solve(&k_ts);
        let mut sigma2 = Vec::with_capacity(grid.len());
        let mut bad = false;
        for (g, &kss_g) in kss.iter().enumerate() {
            let s = kss_g - k_ts.column(g).dot(&sol.column(g));
            if s < -1e-10 * scale.max(kss_g) {
                worst = s;
                bad = true;
                break;
            }
            sigma2.push(s.max(0.0));
        }
        if !bad {
            return Ok(ConditionalGrid {
                grid: grid.to_vec(),
                prior_mean_star,
                prior_mean,
                weights: sol.transpose(),
                sigma2,
                jitter_applied: jitter,
            });
        }
    }
    Err(LgpError::NegativeVariance(worst))
}

/// One draw from N(mu, 1) restricted to [lo, hi).
pub fn truncnorm_sample<R: Rng + ?Sized>(mu: f64, lo: f64, hi: f64, rng: &mut R) -> Result<f64> {
    if lo.is_nan() || hi.is_nan() || lo >= hi {
        return Err(LgpError::EmptyInterval { lo, hi });
    }
    let a = lo - mu;
    let b = hi - mu;
    let z = if a > 0.0 {
        -std_truncnorm_nonpositive(-b, -a, rng)
    } else {
        std_truncnorm_nonpositive(a, b, rng)
    };
    let x = (mu + z).max(lo);
    Ok(if x >= hi { lo.max(hi - hi.abs().max(1.0) * f64::EPSILON) } else { x })
}

/// Standard normal on [a, b) with a ≤ 0.
fn std_truncnorm_nonpositive<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> f64 {
    if b <= -4.0 {
        return -tail_sample(-b, -a, rng);
    }
    let pa = normal::cdf(a);
    let pb = normal::cdf(b);
    let u: f64 = rng.random();
    let p = pa + u * (pb - pa);
    normal::quantile(p).clamp(a, b)
}

/// Standard normal on [a, b) with a ≥ 4, by rejection.
fn tail_sample<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> f64 {
    let lambda = 0.5 * (a + (a * a + 4.0).sqrt());
    if b - a < 1.0 / lambda {
        loop {
            let z = a + (b - a) * rng.random::<f64>();
            let u: f64 = rng.random();
            if u.ln() <= 0.5 * (a * a - z * z) {
                return z;
            }
        }
    }
    loop {
        let e = -(1.0 - rng.random::<f64>()).ln() / lambda;
        let z = a + e;
        if z >= b {
            continue;
        }
        let u: f64 = rng.random();
        let d = z - lambda;
        if u.ln() <= -0.5 * d * d {
            return z;
        }
    }
}
