//! Adam, learning-rate warmup and the unit-norm decoder constraint.

use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD, Axis, IxDyn, Zip};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::sae::SaeParams;

/// Linear ramp from 0 to `lr` over `warmup_steps`, then constant.
pub fn lr_at(step: u64, lr: f64, warmup_steps: u64) -> f64 {
    if step >= warmup_steps {
        lr
    } else {
        lr * step as f64 / warmup_steps as f64
    }
}

/// Adam moments for a list of tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub m: Vec<ArrayD<F>>,
    pub v: Vec<ArrayD<F>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<F: Real> AdamState<F> {
    pub fn new(shapes: &[Vec<usize>], beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&beta1) {
            return Err(Error::config("adam_beta1", format!("must be in [0, 1), got {beta1}")));
        }
        if !(0.0..1.0).contains(&beta2) {
            return Err(Error::config("adam_beta2", format!("must be in [0, 1), got {beta2}")));
        }
        if !(eps > 0.0) {
            return Err(Error::config("adam_eps", "must be > 0"));
        }
        let zeros = || shapes.iter().map(|s| ArrayD::zeros(IxDyn(s))).collect::<Vec<_>>();
        Ok(Self {
            m: zeros(),
            v: zeros(),
            t: 0,
            beta1,
            beta2,
            eps,
        })
    }

    /// One bias-corrected Adam update. Nothing is modified if any gradient
    /// is non-finite or shapes disagree.
    pub fn step(&mut self, mut params: Vec<ArrayViewMutD<F>>, grads: Vec<ArrayViewD<F>>, lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(&grads).enumerate() {
            if p.shape() != self.m[i].shape() || g.shape() != self.m[i].shape() {
                return Err(Error::Shape(format!("tensor {i}: shape mismatch")));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric(format!("gradient tensor {i}")));
            }
        }
        self.t += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let t = self.t.min(i32::MAX as u64) as i32;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(&grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                let g = g.as_f64();
                let m_new = b1 * m.as_f64() + (1.0 - b1) * g;
                let v_new = b2 * v.as_f64() + (1.0 - b2) * g * g;
                *m = F::of(m_new);
                *v = F::of(v_new);
                let update = lr * (m_new / bc1) / ((v_new / bc2).sqrt() + eps);
                *p = F::of(p.as_f64() - update);
            });
        }
        Ok(())
    }
}

/// Removes from each decoder-gradient column its component along the
/// corresponding decoder column.
pub fn project_decoder_grads<F: Real>(params: &SaeParams<F>, grad_w_dec: &mut ndarray::Array2<F>) -> Result<()> {
    if grad_w_dec.dim() != params.w_dec.dim() {
        return Err(Error::Shape("decoder gradient shape".into()));
    }
    for (j, (w, mut g)) in params
        .w_dec
        .axis_iter(Axis(1))
        .zip(grad_w_dec.axis_iter_mut(Axis(1)))
        .enumerate()
    {
        let sq: f64 = w.iter().map(|v| v.as_f64() * v.as_f64()).sum();
        if !(sq > 0.0) || !sq.is_finite() {
            return Err(Error::numeric(format!("w_dec column {j}")));
        }
        let dot: f64 = w.iter().zip(g.iter()).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
        let coef = dot / sq;
        Zip::from(&mut g)
            .and(&w)
            .for_each(|g, &w| *g = F::of(g.as_f64() - coef * w.as_f64()));
    }
    Ok(())
}

/// Rescales every decoder column to unit Euclidean norm.
pub fn renormalize_decoder<F: Real>(params: &mut SaeParams<F>) -> Result<()> {
    for (j, mut col) in params.w_dec.axis_iter_mut(Axis(1)).enumerate() {
        let norm = col.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::numeric(format!("w_dec column {j}")));
        }
        col.mapv_inplace(|v| F::of(v.as_f64() / norm));
    }
    Ok(())
}
