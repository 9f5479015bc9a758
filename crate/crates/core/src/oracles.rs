//! Brute-force references for the fast paths: dense O(d³) linear algebra,
//! adaptive 2-D quadrature and Monte-Carlo estimators.
//!
//! Nothing here calls into `lowrank`'s kernels; covariances are rebuilt
//! entry by entry from `(w, a)`.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::lowrank::{CholeskyFactor, DiagRankOneCov};
use crate::rng::{self, Purpose};
use crate::special;

pub const MAX_DENSE_DIM: usize = 256;

#[derive(Debug, Clone)]
pub struct DenseReference {
    pub matrix: Array2<f64>,
    pub logdet: f64,
    pub inverse: Array2<f64>,
    pub cholesky: Array2<f64>,
}

fn oracle_err(message: impl Into<String>, estimate: f64) -> Error {
    Error::Oracle {
        message: message.into(),
        estimate,
    }
}

/// Σ = diag(w) + aaᵀ assembled entrywise.
pub fn dense_matrix(cov: &DiagRankOneCov) -> Array2<f64> {
    let (w, a) = (cov.w(), cov.a());
    let d = w.len();
    Array2::from_shape_fn((d, d), |(i, j)| a[i] * a[j] + if i == j { w[i] } else { 0.0 })
}

/// Cholesky–Banachiewicz on a dense symmetric matrix.
pub fn dense_cholesky(m: &Array2<f64>) -> Result<Array2<f64>> {
    let d = m.nrows();
    let mut l = Array2::<f64>::zeros((d, d));
    for i in 0..d {
        for j in 0..=i {
            let mut s = m[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if s <= 0.0 {
                    return Err(oracle_err(format!("matrix not positive definite at pivot {i}"), s));
                }
                l[[i, i]] = s.sqrt();
            } else {
                l[[i, j]] = s / l[[j, j]];
            }
        }
    }
    Ok(l)
}

/// log|det m| by Gaussian elimination with partial pivoting.
pub fn dense_logdet(m: &Array2<f64>) -> Result<f64> {
    let mut u = m.clone();
    let d = u.nrows();
    let mut logdet = 0.0;
    for c in 0..d {
        let p = (c..d)
            .max_by(|&x, &y| u[[x, c]].abs().total_cmp(&u[[y, c]].abs()))
            .expect("non-empty range");
        let pivot = u[[p, c]];
        if pivot.abs() < 1e-300 {
            return Err(oracle_err("numerically singular matrix", 0.0));
        }
        if p != c {
            for k in 0..d {
                u.swap([p, k], [c, k]);
            }
        }
        logdet += pivot.abs().ln();
        for r in c + 1..d {
            let f = u[[r, c]] / pivot;
            for k in c..d {
                u[[r, k]] -= f * u[[c, k]];
            }
        }
    }
    Ok(logdet)
}

/// Gauss–Jordan inverse with partial pivoting.
pub fn dense_inverse(m: &Array2<f64>) -> Result<Array2<f64>> {
    let d = m.nrows();
    let mut a = m.clone();
    let mut inv = Array2::<f64>::eye(d);
    for c in 0..d {
        let p = (c..d)
            .max_by(|&x, &y| a[[x, c]].abs().total_cmp(&a[[y, c]].abs()))
            .expect("non-empty range");
        if a[[p, c]].abs() < 1e-300 {
            return Err(oracle_err("numerically singular matrix", 0.0));
        }
        for k in 0..d {
            a.swap([p, k], [c, k]);
            inv.swap([p, k], [c, k]);
        }
        let pivot = a[[c, c]];
        for k in 0..d {
            a[[c, k]] /= pivot;
            inv[[c, k]] /= pivot;
        }
        for r in 0..d {
            if r != c {
                let f = a[[r, c]];
                if f != 0.0 {
                    for k in 0..d {
                        a[[r, k]] -= f * a[[c, k]];
                        inv[[r, k]] -= f * inv[[c, k]];
                    }
                }
            }
        }
    }
    Ok(inv)
}

pub fn dense_reference(cov: &DiagRankOneCov) -> Result<DenseReference> {
    if cov.dim() > MAX_DENSE_DIM {
        return Err(Error::Domain(format!("dense reference limited to d <= {MAX_DENSE_DIM}")));
    }
    let matrix = dense_matrix(cov);
    Ok(DenseReference {
        logdet: dense_logdet(&matrix)?,
        inverse: dense_inverse(&matrix)?,
        cholesky: dense_cholesky(&matrix)?,
        matrix,
    })
}

/// qᵀ M q for a dense M.
pub fn dense_quadratic(m: &Array2<f64>, q: &[f64]) -> f64 {
    let d = q.len();
    (0..d).map(|i| (0..d).map(|j| q[i] * m[[i, j]] * q[j]).sum::<f64>()).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadratureSpec {
    /// Initial cells per axis.
    pub resolution: usize,
    /// Integration box [lo, hi]² in u-space.
    pub lo: f64,
    pub hi: f64,
    /// Target absolute error.
    pub tol: f64,
    pub max_depth: usize,
    /// Integrand evaluation budget.
    pub max_evals: usize,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        QuadratureSpec {
            resolution: 16,
            lo: 1e-6,
            hi: 1.0 - 1e-6,
            tol: 1e-4,
            max_depth: 24,
            max_evals: 1_000_000,
        }
    }
}

impl QuadratureSpec {
    fn validate(&self) -> Result<()> {
        if self.resolution < 16 {
            return Err(Error::Domain("quadrature resolution must be at least 16".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Domain("quadrature tolerance must be positive".into()));
        }
        if !(0.0 <= self.lo && self.lo < self.hi && self.hi <= 1.0) {
            return Err(Error::Domain("quadrature box must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Upper bound on copula mass outside the box (uniform marginals).
    pub fn excluded_mass(&self) -> f64 {
        2.0 * (self.lo + (1.0 - self.hi))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quadrature {
    pub value: f64,
    /// Sum of local refinement differences plus excluded mass.
    pub error: f64,
    pub evaluations: usize,
}

// 5-point Gauss–Legendre on [−1, 1]
const GL_X: [f64; 5] = [
    -0.906_179_845_938_664,
    -0.538_469_310_105_683,
    0.0,
    0.538_469_310_105_683,
    0.906_179_845_938_664,
];
const GL_W: [f64; 5] = [
    0.236_926_885_056_189,
    0.478_628_670_499_366,
    0.568_888_888_888_889,
    0.478_628_670_499_366,
    0.236_926_885_056_189,
];

fn gl_cell(f: &mut dyn FnMut(f64, f64) -> f64, x0: f64, x1: f64, y0: f64, y1: f64, evals: &mut usize) -> f64 {
    let (hx, hy) = (0.5 * (x1 - x0), 0.5 * (y1 - y0));
    let (cx, cy) = (0.5 * (x0 + x1), 0.5 * (y0 + y1));
    let mut s = 0.0;
    for (xi, wi) in GL_X.iter().zip(GL_W) {
        for (yj, wj) in GL_X.iter().zip(GL_W) {
            s += wi * wj * f(cx + hx * xi, cy + hy * yj);
        }
    }
    *evals += 25;
    s * hx * hy
}

struct Cell {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
    value: f64,
    error: f64,
    depth: usize,
}

impl PartialEq for Cell {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl Eq for Cell {}
impl PartialOrd for Cell {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Cell {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.error.total_cmp(&other.error)
    }
}

/// Value of a cell as the sum of its four children, with the refinement
/// difference as the local error.
fn split_cell(
    f: &mut dyn FnMut(f64, f64) -> f64,
    (x0, x1, y0, y1): (f64, f64, f64, f64),
    whole: f64,
    depth: usize,
    evals: &mut usize,
) -> Vec<Cell> {
    let (xm, ym) = (0.5 * (x0 + x1), 0.5 * (y0 + y1));
    let quads = [(x0, xm, y0, ym), (xm, x1, y0, ym), (x0, xm, ym, y1), (xm, x1, ym, y1)];
    let parts: Vec<f64> = quads.iter().map(|&(a, b, c, d)| gl_cell(f, a, b, c, d, evals)).collect();
    let share = ((parts.iter().sum::<f64>() - whole).abs()) / 4.0;
    quads
        .iter()
        .zip(parts)
        .map(|(&(x0, x1, y0, y1), value)| Cell {
            x0,
            x1,
            y0,
            y1,
            value,
            error: share,
            depth,
        })
        .collect()
}

/// Globally adaptive tensor Gauss–Legendre over `[lo, hi]²`: the cell with
/// the largest error estimate is split until the total meets `tol`.
pub fn adaptive_2d(f: &mut dyn FnMut(f64, f64) -> f64, spec: &QuadratureSpec) -> Result<Quadrature> {
    spec.validate()?;
    let n = spec.resolution;
    let h = (spec.hi - spec.lo) / n as f64;
    let mut evals = 0;
    let mut heap = std::collections::BinaryHeap::new();
    let mut finished: Vec<Cell> = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let (x0, y0) = (spec.lo + i as f64 * h, spec.lo + j as f64 * h);
            let b = (x0, x0 + h, y0, y0 + h);
            let whole = gl_cell(f, b.0, b.1, b.2, b.3, &mut evals);
            heap.extend(split_cell(f, b, whole, 1, &mut evals));
        }
    }
    let total = |heap: &std::collections::BinaryHeap<Cell>, done: &[Cell]| -> (f64, f64) {
        heap.iter().chain(done).fold((0.0, 0.0), |(v, e), c| (v + c.value, e + c.error))
    };
    let mut error = total(&heap, &finished).1;
    while error > spec.tol && evals < spec.max_evals {
        let Some(c) = heap.pop() else { break };
        if c.depth >= spec.max_depth {
            finished.push(c);
            continue;
        }
        let children = split_cell(f, (c.x0, c.x1, c.y0, c.y1), c.value, c.depth + 1, &mut evals);
        error += children.iter().map(|k| k.error).sum::<f64>() - c.error;
        heap.extend(children);
    }
    // re-add from scratch to avoid drift in the running sum
    let (value, error) = total(&heap, &finished);
    if error > spec.tol {
        return Err(oracle_err(
            format!(
                "refinement did not reach tolerance {} (error {error:.3e} after {evals} evaluations)",
                spec.tol
            ),
            value,
        ));
    }
    Ok(Quadrature { value, error, evaluations: evals })
}

/// Non-adaptive composite Gauss–Legendre at `resolution` cells per axis;
/// the error estimate compares against half the resolution.
pub fn composite_2d(f: &mut dyn FnMut(f64, f64) -> f64, spec: &QuadratureSpec) -> Result<Quadrature> {
    spec.validate()?;
    let mut evals = 0;
    let mut grid = |n: usize, evals: &mut usize| {
        let h = (spec.hi - spec.lo) / n as f64;
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                let (x0, y0) = (spec.lo + i as f64 * h, spec.lo + j as f64 * h);
                s += gl_cell(f, x0, x0 + h, y0, y0 + h, evals);
            }
        }
        s
    };
    let fine = grid(spec.resolution, &mut evals);
    let coarse = grid(spec.resolution / 2, &mut evals);
    Ok(Quadrature {
        value: fine,
        error: (fine - coarse).abs(),
        evaluations: evals,
    })
}

/// ∫∫ c_Σ(u₁, u₂) du over the clipped unit square for a 2-D covariance.
/// `log_density(q)` is the function under test.
pub fn copula_normalization_2d(
    cov: &DiagRankOneCov,
    spec: &QuadratureSpec,
    log_density: &dyn Fn(&DiagRankOneCov, &[f64]) -> f64,
) -> Result<Quadrature> {
    if cov.dim() != 2 {
        return Err(Error::Domain("copula normalization check is two-dimensional".into()));
    }
    let m = dense_matrix(cov);
    let (s1, s2) = (m[[0, 0]].sqrt(), m[[1, 1]].sqrt());
    let mut f = |u1: f64, u2: f64| {
        let q = [s1 * special::quantile(u1), s2 * special::quantile(u2)];
        log_density(cov, &q).exp()
    };
    let mut out = adaptive_2d(&mut f, spec)?;
    out.error += spec.excluded_mass();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
}

impl McEstimate {
    fn from_samples(xs: impl Iterator<Item = f64>) -> Self {
        // Welford
        let (mut n, mut mean, mut m2) = (0.0, 0.0, 0.0);
        for x in xs {
            n += 1.0;
            let d = x - mean;
            mean += d / n;
            m2 += d * (x - mean);
        }
        let var = if n > 1.0 { m2 / (n - 1.0) } else { 0.0 };
        McEstimate {
            mean,
            std_error: (var / n).sqrt(),
        }
    }

    /// |mean − target| ≤ k standard errors (with a round-off floor).
    pub fn brackets(&self, target: f64, k: f64) -> bool {
        (self.mean - target).abs() <= k * self.std_error + 1e-12
    }
}

fn check_n(n: usize) -> Result<()> {
    if n < 10_000 {
        return Err(Error::Domain(format!("Monte-Carlo oracle needs n >= 10000, got {n}")));
    }
    Ok(())
}

/// (1/n) Σ [log q(z) − log p(z)], z ~ N(μ, diag(exp(logσ²))).
pub fn mc_kl_estimate(mu: &[f64], logvar: &[f64], n: usize, seed: u64) -> Result<McEstimate> {
    check_n(n)?;
    if mu.len() != logvar.len() {
        return Err(Error::shape("mc_kl_estimate", mu.len(), logvar.len()));
    }
    let mut r = rng::stream(seed, Purpose::GradCheck, 1, 0);
    let d = mu.len();
    Ok(McEstimate::from_samples((0..n).map(|_| {
        let eps = rng::normals(&mut r, d);
        let mut s = 0.0;
        for i in 0..d {
            let sd = (0.5 * logvar[i]).exp();
            let z = mu[i] + sd * eps[i];
            // log N(z; μ, σ²) − log N(z; 0, 1); the 2π terms cancel
            s += -0.5 * logvar[i] - 0.5 * eps[i] * eps[i] + 0.5 * z * z;
        }
        s
    })))
}

/// Same estimator for a full covariance, using dense references only.
pub fn mc_kl_fullcov(mu: &[f64], cov: &DiagRankOneCov, n: usize, seed: u64) -> Result<McEstimate> {
    check_n(n)?;
    if mu.len() != cov.dim() {
        return Err(Error::shape("mc_kl_fullcov", cov.dim(), mu.len()));
    }
    let dense = dense_reference(cov)?;
    let d = mu.len();
    let mut r = rng::stream(seed, Purpose::GradCheck, 2, 0);
    Ok(McEstimate::from_samples((0..n).map(|_| {
        let eps = rng::normals(&mut r, d);
        let x: Vec<f64> = (0..d).map(|i| (0..=i).map(|j| dense.cholesky[[i, j]] * eps[j]).sum()).collect();
        let quad = dense_quadratic(&dense.inverse, &x);
        let z2: f64 = (0..d).map(|i| (mu[i] + x[i]).powi(2)).sum();
        -0.5 * dense.logdet - 0.5 * quad + 0.5 * z2
    })))
}

/// Sample covariance of `n` draws of Lε and the entrywise standard errors.
pub fn mc_covariance(chol: &CholeskyFactor, n: usize, seed: u64) -> Result<(Array2<f64>, Array2<f64>)> {
    check_n(n)?;
    let l = chol.matrix();
    let d = l.nrows();
    let mut r = rng::stream(seed, Purpose::GradCheck, 3, 0);
    let mut sum = vec![0.0; d];
    let mut prod = Array2::<f64>::zeros((d, d));
    let mut prod2 = Array2::<f64>::zeros((d, d));
    for _ in 0..n {
        let eps = rng::normals(&mut r, d);
        let x: Vec<f64> = (0..d).map(|i| (0..=i).map(|j| l[[i, j]] * eps[j]).sum()).collect();
        for i in 0..d {
            sum[i] += x[i];
            for j in 0..d {
                let p = x[i] * x[j];
                prod[[i, j]] += p;
                prod2[[i, j]] += p * p;
            }
        }
    }
    let nf = n as f64;
    let cov = Array2::from_shape_fn((d, d), |(i, j)| (prod[[i, j]] - sum[i] * sum[j] / nf) / (nf - 1.0));
    let se = Array2::from_shape_fn((d, d), |(i, j)| {
        let m = prod[[i, j]] / nf;
        ((prod2[[i, j]] / nf - m * m) / nf).sqrt()
    });
    Ok((cov, se))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::copula::log_copula_density;
    use crate::lowrank;
    use ndarray::array;

    fn density(cov: &DiagRankOneCov, q: &[f64]) -> f64 {
        log_copula_density(cov, q).unwrap()
    }

    #[test]
    fn identity_reference() {
        let r = dense_reference(&DiagRankOneCov::isotropic(5, 1.0).unwrap()).unwrap();
        assert!(r.logdet.abs() < 1e-15);
        assert_eq!(r.inverse, Array2::eye(5));
    }

    #[test]
    fn two_by_two_by_hand() {
        // w = [2, 3], a = [1, 1] → [[3, 1], [1, 4]]
        let cov = DiagRankOneCov::new(vec![2.0, 3.0], vec![1.0, 1.0]).unwrap();
        let r = dense_reference(&cov).unwrap();
        assert_eq!(r.matrix, array![[3.0, 1.0], [1.0, 4.0]]);
        assert!((r.logdet - 11f64.ln()).abs() < 1e-14);
        let want = array![[4.0, -1.0], [-1.0, 3.0]] / 11.0;
        assert!((&r.inverse - &want).iter().all(|x| x.abs() < 1e-15));
        let llt = r.cholesky.dot(&r.cholesky.t());
        assert!((&llt - &r.matrix).iter().all(|x| x.abs() < 1e-14));
    }

    #[test]
    fn singular_input_is_an_oracle_error() {
        let m = array![[1.0, 2.0], [2.0, 4.0]];
        assert!(matches!(dense_inverse(&m), Err(Error::Oracle { .. })));
        assert!(matches!(dense_logdet(&m), Err(Error::Oracle { .. })));
        assert!(matches!(dense_cholesky(&m), Err(Error::Oracle { .. })));
    }

    #[test]
    fn fast_path_agrees_on_random_instance() {
        let mut r = rng::stream(4, Purpose::GradCheck, 0, 0);
        let d = 40;
        let w: Vec<f64> = rng::normals(&mut r, d).iter().map(|x| 0.2 + x.abs()).collect();
        let a = rng::normals(&mut r, d);
        let cov = DiagRankOneCov::new(w, a).unwrap();
        let reference = dense_reference(&cov).unwrap();
        assert!((lowrank::log_det(&cov) - reference.logdet).abs() <= 1e-9 * reference.logdet.abs().max(1.0));
        let q = rng::normals(&mut r, d);
        let fast = lowrank::inv_quadratic_form(&cov, &q).unwrap();
        let slow = dense_quadratic(&reference.inverse, &q);
        assert!((fast - slow).abs() <= 1e-9 * slow.abs());
        let chol = lowrank::cholesky(&cov).unwrap();
        let diff = (chol.matrix() - &reference.cholesky).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(diff < 1e-9);
    }

    #[test]
    fn normalization_of_identity_and_correlated() {
        let spec = QuadratureSpec::default();
        let id = copula_normalization_2d(&DiagRankOneCov::isotropic(2, 1.0).unwrap(), &spec, &density).unwrap();
        assert!((id.value - 1.0).abs() < 1e-5, "{id:?}");
        let cov = DiagRankOneCov::new(vec![1.0, 1.0], vec![0.6, 0.8]).unwrap();
        let q = copula_normalization_2d(&cov, &spec, &density).unwrap();
        assert!((q.value - 1.0).abs() < 1e-3, "{q:?}");
    }

    #[test]
    fn normalization_strongly_correlated() {
        // correlation a²/(w + a²) = 0.95 with w = 1
        let a = 19f64.sqrt();
        let cov = DiagRankOneCov::new(vec![1.0, 1.0], vec![a, a]).unwrap();
        let spec = QuadratureSpec {
            resolution: 32,
            tol: 1e-3,
            ..QuadratureSpec::default()
        };
        let q = copula_normalization_2d(&cov, &spec, &density).unwrap();
        assert!((q.value - 1.0).abs() < 1e-2, "{q:?}");
    }

    #[test]
    fn quadrature_spec_validation() {
        let bad = QuadratureSpec {
            resolution: 8,
            ..QuadratureSpec::default()
        };
        assert!(adaptive_2d(&mut |_, _| 1.0, &bad).is_err());
        let bad = QuadratureSpec {
            tol: 0.0,
            ..QuadratureSpec::default()
        };
        assert!(adaptive_2d(&mut |_, _| 1.0, &bad).is_err());
    }

    #[test]
    fn error_estimate_halves_with_resolution() {
        // smooth integrand with a known integral over [0, 1]²
        let mut f = |x: f64, y: f64| (40.0 * x).sin() * (35.0 * y).cos();
        let exact = ((1.0 - 40f64.cos()) / 40.0) * (35f64.sin() / 35.0);
        let base = QuadratureSpec {
            lo: 0.0,
            hi: 1.0,
            ..QuadratureSpec::default()
        };
        let mut last = f64::INFINITY;
        for n in [16, 32, 64] {
            let q = composite_2d(&mut f, &QuadratureSpec { resolution: n, ..base }).unwrap();
            assert!(q.error <= 0.5 * last, "n={n}: {} vs {last}", q.error);
            assert!((q.value - exact).abs() <= q.error.max(1e-14));
            last = q.error;
        }
    }

    #[test]
    fn non_convergence_reports_estimate() {
        let spec = QuadratureSpec {
            tol: 1e-14,
            max_depth: 1,
            lo: 0.0,
            hi: 1.0,
            ..QuadratureSpec::default()
        };
        let err = adaptive_2d(&mut |x, y| 1.0 / (x * y + 1e-9).sqrt(), &spec).unwrap_err();
        assert!(matches!(err, Error::Oracle { estimate, .. } if estimate > 0.0));
    }

    #[test]
    fn mc_kl_examples() {
        let zero = mc_kl_estimate(&[0.0; 3], &[0.0; 3], 10_000, 1).unwrap();
        assert_eq!(zero.mean, 0.0);
        let one = mc_kl_estimate(&[1.0], &[0.0], 100_000, 2).unwrap();
        assert!(one.brackets(0.5, 3.0), "{one:?}");
        assert!(mc_kl_estimate(&[0.0], &[0.0], 100, 0).is_err());
    }

    #[test]
    fn mc_covariance_examples() {
        let id = CholeskyFactor::from_lower(Array2::eye(3)).unwrap();
        let (c, _) = mc_covariance(&id, 100_000, 5).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((c[[i, j]] - want).abs() < 0.05);
            }
        }
        let one = CholeskyFactor::from_lower(array![[1.7]]).unwrap();
        let (c, se) = mc_covariance(&one, 50_000, 6).unwrap();
        assert!((c[[0, 0]] - 1.7 * 1.7).abs() < 3.0 * se[[0, 0]] + 1e-3);
    }
}
