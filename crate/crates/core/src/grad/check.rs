use ndarray::Array2;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct FdOptions {
    /// Finite-difference step h (the stencil uses ±h and ±2h).
    pub step: f64,
    /// Pass threshold on the relative error.
    pub tol: f64,
    /// Check at most this many coordinates per tensor (chosen at random); `None` checks all.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Floor on the error denominator; gradients whose combined norm is
    /// below it are compared in absolute terms.
    pub atol: f64,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions {
            step: 1e-4,
            tol: 1e-4,
            max_coords: None,
            seed: 0,
            atol: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradientEntry {
    pub name: String,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// Coordinates left out because the stencil crossed a kink.
    pub skipped: usize,
    /// ‖g_a − g_n‖ / max(atol, ‖g_a‖ + ‖g_n‖) over the checked coordinates.
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradientReport {
    pub entries: Vec<GradientEntry>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

impl GradientReport {
    pub fn worst(&self) -> Option<&GradientEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

pub(crate) fn relative_error(analytic: &[f64], numeric: &[f64], atol: f64) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()) + norm(&mut numeric.iter().copied());
    diff / scale.max(atol)
}

/// Compares `analytic` gradients against central differences of `loss`.
///
/// `params` are the named tensors the loss is evaluated at; `loss` receives a
/// perturbed copy of all of them. A non-finite loss at any perturbed point is
/// an error naming the tensor and coordinate.
pub fn finite_diff_check<F>(
    mut loss: F,
    params: &[(String, Array2<f64>)],
    analytic: &[Array2<f64>],
    opts: &FdOptions,
) -> Result<GradientReport>
where
    F: FnMut(&[Array2<f64>]) -> Result<f64>,
{
    finite_diff_check_piecewise(|p| Ok((loss(p)?, ())), params, analytic, opts)
}

/// As [`finite_diff_check`] for a piecewise-smooth loss. `loss` also returns
/// the regime it was evaluated in (for example which units sit on a clamp);
/// coordinates whose stencil leaves the regime of the unperturbed point are
/// skipped, since a difference quotient across a kink measures nothing.
pub fn finite_diff_check_piecewise<F, R>(
    mut loss: F,
    params: &[(String, Array2<f64>)],
    analytic: &[Array2<f64>],
    opts: &FdOptions,
) -> Result<GradientReport>
where
    F: FnMut(&[Array2<f64>]) -> Result<(f64, R)>,
    R: PartialEq,
{
    if params.len() != analytic.len() {
        return Err(Error::shape("finite_diff_check", params.len(), analytic.len()));
    }
    let base_point: Vec<Array2<f64>> = params.iter().map(|(_, p)| p.clone()).collect();
    let (_, base_regime) = loss(&base_point)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut point: Vec<Array2<f64>> = params.iter().map(|(_, p)| p.clone()).collect();
    let mut entries = Vec::with_capacity(params.len());

    for (t, ((name, base), grad)) in params.iter().zip(analytic).enumerate() {
        if base.dim() != grad.dim() {
            return Err(Error::shape("finite_diff_check gradient", format!("{:?}", base.dim()), format!("{:?}", grad.dim())));
        }
        let n = base.len();
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let mut ga = Vec::with_capacity(coords.len());
        let mut gn = Vec::with_capacity(coords.len());
        let mut skipped = 0;
        for &k in &coords {
            let orig = base.as_slice().expect("standard layout")[k];
            let h = opts.step;
            let mut f = [0.0; 4];
            let mut smooth = true;
            for (slot, x) in f.iter_mut().zip([orig + h, orig - h, orig + 2.0 * h, orig - 2.0 * h]) {
                point[t].as_slice_mut().expect("standard layout")[k] = x;
                let (v, regime) = loss(&point)?;
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("loss at perturbed {name}[{k}]")));
                }
                smooth &= regime == base_regime;
                *slot = v;
            }
            point[t].as_slice_mut().expect("standard layout")[k] = orig;
            if !smooth {
                skipped += 1;
                continue;
            }
            // five-point stencil, truncation error O(h⁴)
            gn.push((8.0 * (f[0] - f[1]) - (f[2] - f[3])) / (12.0 * h));
            ga.push(grad.as_slice().expect("standard layout")[k]);
        }
        let rel_error = relative_error(&ga, &gn, opts.atol);
        entries.push(GradientEntry {
            name: name.clone(),
            analytic: ga,
            numeric: gn,
            skipped,
            rel_error,
        });
    }
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    Ok(GradientReport {
        entries,
        max_rel_error,
        tol: opts.tol,
        passed: max_rel_error <= opts.tol,
    })
}
