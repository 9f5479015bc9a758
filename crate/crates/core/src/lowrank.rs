//! Diagonal-plus-rank-one covariance algebra.
//!
//! Everything here works on Σ = diag(w) + aaᵀ without materialising Σ⁻¹:
//! the determinant comes from the matrix determinant lemma, quadratic forms
//! from Sherman–Morrison, and the Cholesky factor from a rank-one update of
//! diag(√w), which for a diagonal base collapses to an O(d) recurrence.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Lower bound applied to the diagonal head after its ReLU.
pub const W_FLOOR: f64 = 1e-4;

/// Σ = diag(w) + aaᵀ.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagRankOneCov {
    w: Vec<f64>,
    a: Vec<f64>,
}

impl DiagRankOneCov {
    pub fn new(w: Vec<f64>, a: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::Input("covariance dimension must be at least 1".into()));
        }
        if w.len() != a.len() {
            return Err(Error::shape("DiagRankOneCov::new", w.len(), a.len()));
        }
        if let Some(i) = w.iter().position(|&x| !(x >= W_FLOOR) || !x.is_finite()) {
            return Err(Error::Domain(format!(
                "diagonal entry w[{i}] = {} below floor {W_FLOOR}",
                w[i]
            )));
        }
        if a.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("rank-one direction a".into()));
        }
        Ok(DiagRankOneCov { w, a })
    }

    /// Σ = c·I; handy in tests and oracles.
    pub fn isotropic(dim: usize, c: f64) -> Result<Self> {
        Self::new(vec![c; dim], vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }

    pub fn w(&self) -> &[f64] {
        &self.w
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }
}

/// Lower-triangular L with LLᵀ = Σ.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    l: Array2<f64>,
}

impl CholeskyFactor {
    pub fn from_lower(l: Array2<f64>) -> Result<Self> {
        let (r, c) = l.dim();
        if r != c || r == 0 {
            return Err(Error::shape("CholeskyFactor", "square, non-empty", format!("{r}x{c}")));
        }
        for i in 0..r {
            if !(l[[i, i]] > 0.0) {
                return Err(Error::Factorization { pivot: i });
            }
        }
        Ok(CholeskyFactor { l })
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.l
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }
}

/// Writes the row-major d×d factor of diag(w) + aaᵀ into `out`.
///
/// With b₀ = 1 and b_{j+1} = b_j + a_j²/w_j:
/// L_jj = sqrt(w_j + a_j²/b_j) and L_kj = a_k · a_j / (b_j L_jj) for k > j.
pub(crate) fn chol_rank1_kernel(w: &[f64], a: &[f64], out: &mut [f64]) -> Result<()> {
    let d = w.len();
    debug_assert_eq!(out.len(), d * d);
    out.iter_mut().for_each(|v| *v = 0.0);
    let mut b = 1.0;
    for j in 0..d {
        let s = w[j] + a[j] * a[j] / b;
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::Factorization { pivot: j });
        }
        let ljj = s.sqrt();
        out[j * d + j] = ljj;
        let c = a[j] / (b * ljj);
        for k in j + 1..d {
            out[k * d + j] = a[k] * c;
        }
        b += a[j] * a[j] / w[j];
    }
    Ok(())
}

/// Reverse pass of [`chol_rank1_kernel`]: accumulates ∂/∂w and ∂/∂a given ∂/∂L.
pub(crate) fn chol_rank1_backward(w: &[f64], a: &[f64], gl: &[f64], gw: &mut [f64], ga: &mut [f64]) {
    let d = w.len();
    let mut bs = Vec::with_capacity(d);
    let mut b = 1.0;
    for j in 0..d {
        bs.push(b);
        b += a[j] * a[j] / w[j];
    }
    // gradient flowing into b_{j+1}
    let mut gb_next = 0.0;
    for j in (0..d).rev() {
        let bj = bs[j];
        let s = w[j] + a[j] * a[j] / bj;
        let ljj = s.sqrt();
        let c = a[j] / (bj * ljj);

        let mut gc = 0.0;
        for k in j + 1..d {
            let g = gl[k * d + j];
            gc += g * a[k];
            ga[k] += g * c;
        }
        let gljj = gl[j * d + j] - gc * a[j] / (bj * ljj * ljj);
        let gs = gljj / (2.0 * ljj);
        let mut gb = gb_next;
        ga[j] += gc / (bj * ljj);
        gb -= gc * a[j] / (bj * bj * ljj);
        gw[j] += gs;
        ga[j] += gs * 2.0 * a[j] / bj;
        gb -= gs * a[j] * a[j] / (bj * bj);
        // b_{j+1} = b_j + a_j²/w_j
        ga[j] += gb_next * 2.0 * a[j] / w[j];
        gw[j] -= gb_next * a[j] * a[j] / (w[j] * w[j]);
        gb_next = gb;
    }
}

pub(crate) fn log_det_kernel(w: &[f64], a: &[f64]) -> f64 {
    let mut logw = 0.0;
    let mut t = 0.0;
    for (&wi, &ai) in w.iter().zip(a) {
        logw += wi.ln();
        t += ai * ai / wi;
    }
    logw + t.ln_1p()
}

pub(crate) fn log_det_backward(w: &[f64], a: &[f64], g: f64, gw: &mut [f64], ga: &mut [f64]) {
    let s = 1.0 + w.iter().zip(a).map(|(&wi, &ai)| ai * ai / wi).sum::<f64>();
    for i in 0..w.len() {
        gw[i] += g * (1.0 / w[i] - a[i] * a[i] / (w[i] * w[i] * s));
        ga[i] += g * 2.0 * a[i] / (w[i] * s);
    }
}

/// qᵀΣ⁻¹q = qᵀD⁻¹q − (aᵀD⁻¹q)² / (1 + aᵀD⁻¹a)
pub(crate) fn inv_quad_kernel(w: &[f64], a: &[f64], q: &[f64]) -> f64 {
    let (mut qdq, mut adq, mut ada) = (0.0, 0.0, 0.0);
    for i in 0..w.len() {
        qdq += q[i] * q[i] / w[i];
        adq += a[i] * q[i] / w[i];
        ada += a[i] * a[i] / w[i];
    }
    (qdq - adq * adq / (1.0 + ada)).max(0.0)
}

pub(crate) fn inv_quad_backward(
    w: &[f64],
    a: &[f64],
    q: &[f64],
    g: f64,
    gw: &mut [f64],
    ga: &mut [f64],
    gq: &mut [f64],
) {
    let (mut t, mut ada) = (0.0, 0.0);
    for i in 0..w.len() {
        t += a[i] * q[i] / w[i];
        ada += a[i] * a[i] / w[i];
    }
    let s = 1.0 + ada;
    let r = t / s;
    for i in 0..w.len() {
        // Σ⁻¹q = (q − r·a) / w
        let y = (q[i] - r * a[i]) / w[i];
        gq[i] += g * 2.0 * y;
        ga[i] -= g * 2.0 * r * y;
        gw[i] -= g * y * y;
    }
}

pub fn cholesky(cov: &DiagRankOneCov) -> Result<CholeskyFactor> {
    let d = cov.dim();
    let mut buf = vec![0.0; d * d];
    chol_rank1_kernel(&cov.w, &cov.a, &mut buf)?;
    let l = Array2::from_shape_vec((d, d), buf).expect("d*d buffer");
    Ok(CholeskyFactor { l })
}

/// log |Σ| by the matrix determinant lemma.
pub fn log_det(cov: &DiagRankOneCov) -> f64 {
    log_det_kernel(&cov.w, &cov.a)
}

/// qᵀΣ⁻¹q by Sherman–Morrison.
pub fn inv_quadratic_form(cov: &DiagRankOneCov, q: &[f64]) -> Result<f64> {
    if q.len() != cov.dim() {
        return Err(Error::shape("inv_quadratic_form", cov.dim(), q.len()));
    }
    Ok(inv_quad_kernel(&cov.w, &cov.a, q))
}

/// Marginal variances Σ_ii = w_i + a_i².
pub fn diag_of(cov: &DiagRankOneCov) -> Vec<f64> {
    cov.w.iter().zip(&cov.a).map(|(w, a)| w + a * a).collect()
}

/// Lε.
pub fn sample(chol: &CholeskyFactor, eps: &[f64]) -> Result<Vec<f64>> {
    let d = chol.dim();
    if eps.len() != d {
        return Err(Error::shape("sample", d, eps.len()));
    }
    let l = &chol.l;
    Ok((0..d)
        .map(|i| (0..=i).map(|j| l[[i, j]] * eps[j]).sum())
        .collect())
}

/// Explicit diag(w) + aaᵀ.
pub fn dense(cov: &DiagRankOneCov) -> Array2<f64> {
    let d = cov.dim();
    Array2::from_shape_fn((d, d), |(i, j)| {
        let base = cov.a[i] * cov.a[j];
        if i == j {
            base + cov.w[i]
        } else {
            base
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn cov(w: &[f64], a: &[f64]) -> DiagRankOneCov {
        DiagRankOneCov::new(w.to_vec(), a.to_vec()).unwrap()
    }

    #[test]
    fn cholesky_examples() {
        let l = cholesky(&cov(&[4.0, 9.0], &[0.0, 0.0])).unwrap();
        assert_eq!(l.matrix(), &ndarray::array![[2.0, 0.0], [0.0, 3.0]]);

        let l = cholesky(&cov(&[2.0, 3.0], &[1.0, 1.0])).unwrap();
        // dense Cholesky of [[3,1],[1,4]] by hand: √3, 1/√3, √(4 − 1/3)
        let m = l.matrix();
        assert_abs_diff_eq!(m[[0, 0]], 3f64.sqrt(), epsilon = 1e-14);
        assert_abs_diff_eq!(m[[1, 0]], 1.0 / 3f64.sqrt(), epsilon = 1e-14);
        assert_abs_diff_eq!(m[[1, 1]], (11.0f64 / 3.0).sqrt(), epsilon = 1e-14);
        assert_eq!(m[[0, 1]], 0.0);
        assert_abs_diff_eq!(m[[0, 0]], 1.7321, epsilon = 1e-4);
        assert_abs_diff_eq!(m[[1, 0]], 0.5774, epsilon = 1e-4);
        assert_abs_diff_eq!(m[[1, 1]], 1.9149, epsilon = 1e-4);

        let s = 0.7;
        let l = cholesky(&cov(&[s * s], &[0.0])).unwrap();
        assert_abs_diff_eq!(l.matrix()[[0, 0]], s, epsilon = 1e-15);
    }

    #[test]
    fn log_det_examples() {
        assert_eq!(log_det(&cov(&[1.0, 1.0], &[0.0, 0.0])), 0.0);
        assert_abs_diff_eq!(log_det(&cov(&[2.0, 3.0], &[1.0, 1.0])), 11f64.ln(), epsilon = 1e-14);
        let c = DiagRankOneCov::isotropic(7, 2.5).unwrap();
        assert_abs_diff_eq!(log_det(&c), 7.0 * 2.5f64.ln(), epsilon = 1e-13);
    }

    #[test]
    fn inv_quadratic_form_examples() {
        let id = DiagRankOneCov::isotropic(3, 1.0).unwrap();
        assert_abs_diff_eq!(inv_quadratic_form(&id, &[1.0, -2.0, 0.5]).unwrap(), 5.25, epsilon = 1e-15);
        let c = cov(&[2.0, 3.0], &[1.0, 1.0]);
        assert_abs_diff_eq!(inv_quadratic_form(&c, &[1.0, 0.0]).unwrap(), 4.0 / 11.0, epsilon = 1e-15);
        assert_eq!(inv_quadratic_form(&c, &[0.0, 0.0]).unwrap(), 0.0);
        assert!(matches!(inv_quadratic_form(&c, &[1.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn diag_and_dense_examples() {
        let d = diag_of(&cov(&[1.0, 1.0], &[0.6, 0.8]));
        assert_abs_diff_eq!(d[0], 1.36, epsilon = 1e-15);
        assert_abs_diff_eq!(d[1], 1.64, epsilon = 1e-15);
        assert_eq!(diag_of(&cov(&[2.0, 5.0], &[0.0, 0.0])), vec![2.0, 5.0]);
        assert_eq!(diag_of(&cov(&[2.0], &[3.0])), vec![11.0]);

        assert_eq!(dense(&cov(&[1.0, 1.0], &[0.0, 0.0])), Array2::eye(2));
        assert_eq!(dense(&cov(&[2.0, 3.0], &[1.0, 1.0])), ndarray::array![[3.0, 1.0], [1.0, 4.0]]);
    }

    #[test]
    fn sample_examples() {
        let id = cholesky(&DiagRankOneCov::isotropic(3, 1.0).unwrap()).unwrap();
        assert_eq!(sample(&id, &[0.3, -1.0, 2.0]).unwrap(), vec![0.3, -1.0, 2.0]);
        let l = cholesky(&cov(&[2.0, 3.0, 1.0], &[1.0, -0.5, 0.2])).unwrap();
        assert_eq!(sample(&l, &[0.0; 3]).unwrap(), vec![0.0; 3]);
        assert!(sample(&l, &[0.0; 2]).is_err());
    }

    #[test]
    fn constructor_rejects_bad_input() {
        assert!(DiagRankOneCov::new(vec![], vec![]).is_err());
        assert!(DiagRankOneCov::new(vec![1.0], vec![1.0, 2.0]).is_err());
        assert!(DiagRankOneCov::new(vec![0.0, 1.0], vec![1.0, 2.0]).is_err());
        assert!(DiagRankOneCov::new(vec![1.0, 1.0], vec![f64::NAN, 2.0]).is_err());
        assert!(CholeskyFactor::from_lower(ndarray::array![[1.0, 0.0], [0.0, 0.0]]).is_err());
    }

    #[test]
    fn backward_kernels_match_central_differences() {
        let w = [0.7, 1.3, 2.1, 0.4];
        let a = [0.5, -0.9, 0.3, 0.8];
        let q = [0.2, -1.1, 0.6, 1.5];
        let h = 1e-6;
        let d = w.len();

        // log det
        let mut gw = [0.0; 4];
        let mut ga = [0.0; 4];
        log_det_backward(&w, &a, 1.0, &mut gw, &mut ga);
        for i in 0..d {
            let (mut wp, mut wm) = (w, w);
            wp[i] += h;
            wm[i] -= h;
            let fd = (log_det_kernel(&wp, &a) - log_det_kernel(&wm, &a)) / (2.0 * h);
            assert_abs_diff_eq!(gw[i], fd, epsilon = 1e-7);
            let (mut ap, mut am) = (a, a);
            ap[i] += h;
            am[i] -= h;
            let fd = (log_det_kernel(&w, &ap) - log_det_kernel(&w, &am)) / (2.0 * h);
            assert_abs_diff_eq!(ga[i], fd, epsilon = 1e-7);
        }

        // inverse quadratic form
        let (mut gw, mut ga, mut gq) = ([0.0; 4], [0.0; 4], [0.0; 4]);
        inv_quad_backward(&w, &a, &q, 1.0, &mut gw, &mut ga, &mut gq);
        for i in 0..d {
            let f = |w: &[f64], a: &[f64], q: &[f64]| inv_quad_kernel(w, a, q);
            let (mut p, mut m) = (w, w);
            p[i] += h;
            m[i] -= h;
            assert_abs_diff_eq!(gw[i], (f(&p, &a, &q) - f(&m, &a, &q)) / (2.0 * h), epsilon = 1e-6);
            let (mut p, mut m) = (a, a);
            p[i] += h;
            m[i] -= h;
            assert_abs_diff_eq!(ga[i], (f(&w, &p, &q) - f(&w, &m, &q)) / (2.0 * h), epsilon = 1e-6);
            let (mut p, mut m) = (q, q);
            p[i] += h;
            m[i] -= h;
            assert_abs_diff_eq!(gq[i], (f(&w, &a, &p) - f(&w, &a, &m)) / (2.0 * h), epsilon = 1e-6);
        }

        // cholesky: contract the factor with a fixed weight matrix
        let wts: Vec<f64> = (0..d * d).map(|k| ((k * 7 % 11) as f64 - 5.0) / 3.0).collect();
        let contract = |w: &[f64], a: &[f64]| {
            let mut l = vec![0.0; d * d];
            chol_rank1_kernel(w, a, &mut l).unwrap();
            l.iter().zip(&wts).map(|(x, y)| x * y).sum::<f64>()
        };
        let (mut gw, mut ga) = ([0.0; 4], [0.0; 4]);
        chol_rank1_backward(&w, &a, &wts, &mut gw, &mut ga);
        for i in 0..d {
            let (mut p, mut m) = (w, w);
            p[i] += h;
            m[i] -= h;
            assert_abs_diff_eq!(gw[i], (contract(&p, &a) - contract(&m, &a)) / (2.0 * h), epsilon = 1e-6);
            let (mut p, mut m) = (a, a);
            p[i] += h;
            m[i] -= h;
            assert_abs_diff_eq!(ga[i], (contract(&w, &p) - contract(&w, &m)) / (2.0 * h), epsilon = 1e-6);
        }
    }
}
