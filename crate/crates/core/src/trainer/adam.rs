use ndarray::{Array2, Zip};

use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment accumulators, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[Array2<f64>]) -> Self {
        AdamState {
            m: params.iter().map(|p| Array2::zeros(p.dim())).collect(),
            v: params.iter().map(|p| Array2::zeros(p.dim())).collect(),
            step: 0,
        }
    }
}

/// Bias-corrected Adam update in place.
pub fn adam_step(params: &mut [Array2<f64>], grads: &[Array2<f64>], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape("adam_step", params.len(), grads.len()));
    }
    if !(lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.dim() != g.dim() || p.dim() != state.m[i].dim() {
            return Err(Error::shape("adam_step", format!("{:?}", p.dim()), format!("{:?}", g.dim())));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of tensor {i}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        });
    }
    Ok(())
}

/// Global L2 norm over all tensors.
pub fn global_norm(grads: &[Array2<f64>]) -> f64 {
    grads.iter().flat_map(|g| g.iter()).map(|x| x * x).sum::<f64>().sqrt()
}

/// Rescales so the global norm is at most `max_norm` (0 disables); returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Array2<f64>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|x| x * s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![array![[1.0, -2.0]]];
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &[array![[0.0, 0.0]]], &mut s, 1e-3).unwrap();
        assert_eq!(p[0], array![[1.0, -2.0]]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![array![[0.0]]];
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &[array![[2.0]]], &mut s, 1e-3).unwrap();
        assert!((p[0][[0, 0]] + 1e-3).abs() < 1e-10);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut p = vec![array![[0.3, -0.1], [0.2, 0.5]]];
            let mut s = AdamState::new(&p);
            for k in 0..50 {
                let g = p[0].mapv(|x| 2.0 * x + k as f64 * 0.01);
                adam_step(&mut p, &[g], &mut s, 1e-2).unwrap();
            }
            p
        };
        let (a, b) = (run(), run());
        assert!(a[0].iter().zip(b[0].iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn rejects_bad_input() {
        let mut p = vec![array![[0.0]]];
        let mut s = AdamState::new(&p);
        assert!(matches!(adam_step(&mut p, &[array![[f64::NAN]]], &mut s, 1e-3), Err(Error::NonFinite(_))));
        assert_eq!(s.step, 0);
        assert!(adam_step(&mut p, &[array![[1.0]]], &mut s, 0.0).is_err());
    }

    #[test]
    fn clipping() {
        let mut g = vec![array![[3.0]], array![[4.0]]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-12);
        let mut g = vec![array![[3.0]], array![[4.0]]];
        clip_global_norm(&mut g, 0.0);
        assert_eq!(g[1][[0, 0]], 4.0);
    }
}
