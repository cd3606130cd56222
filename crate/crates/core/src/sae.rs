//! Sparse autoencoder parameters, forward pass and analytic gradients.
//!
//! The encoder is `f = act(W_enc x + b_enc)` and the decoder reconstructs
//! from the masked code, `x̂ = W_dec (f ⊙ m) + b_dec`. The objective for a
//! batch of `B` samples is
//!
//! ```text
//! L = 1/B Σ ‖x − x̂‖²  +  λ · 1/B Σ ‖f ⊙ m‖₁
//! ```
//!
//! Vanilla, TopK and JumpReLU autoencoders use an all-ones mask; the ATM
//! trainer supplies a sampled one.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::{domain, stream};

/// Encoder/decoder weights. `w_enc` is `n × d`, `w_dec` is `d × n` with
/// unit-norm columns.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeParams<F> {
    pub w_enc: Array2<F>,
    pub b_enc: Array1<F>,
    pub w_dec: Array2<F>,
    pub b_dec: Array1<F>,
}

/// Nonlinearity applied to encoder pre-activations.
#[derive(Debug, Clone, PartialEq)]
pub enum ActivationKind<F> {
    Relu,
    /// Keep the `k` largest positive values per sample.
    TopK {
        k: usize,
    },
    /// `z` if `z > θ_j` else 0, with learnable per-feature thresholds.
    JumpRelu {
        theta: Array1<F>,
        bandwidth: F,
    },
}

impl<F: Real> ActivationKind<F> {
    pub fn validate(&self, n: usize) -> Result<()> {
        match self {
            ActivationKind::Relu => Ok(()),
            ActivationKind::TopK { k } => {
                if *k == 0 || *k > n {
                    Err(Error::config("topk_k", format!("must be in 1..={n}, got {k}")))
                } else {
                    Ok(())
                }
            }
            ActivationKind::JumpRelu { theta, bandwidth } => {
                if theta.len() != n {
                    return Err(Error::Shape(format!("theta has {} entries, expected {n}", theta.len())));
                }
                if theta.iter().any(|t| !(*t >= F::zero())) {
                    return Err(Error::config("jumprelu_init_theta", "thresholds must be >= 0"));
                }
                if !(*bandwidth > F::zero()) {
                    return Err(Error::config("jumprelu_bandwidth", "must be > 0"));
                }
                Ok(())
            }
        }
    }

    pub fn cast<G: Real>(&self) -> ActivationKind<G> {
        match self {
            ActivationKind::Relu => ActivationKind::Relu,
            ActivationKind::TopK { k } => ActivationKind::TopK { k: *k },
            ActivationKind::JumpRelu { theta, bandwidth } => ActivationKind::JumpRelu {
                theta: theta.mapv(|v| G::of(v.as_f64())),
                bandwidth: G::of(bandwidth.as_f64()),
            },
        }
    }
}

impl<F: Real> SaeParams<F> {
    pub fn d(&self) -> usize {
        self.w_dec.nrows()
    }

    pub fn n(&self) -> usize {
        self.w_dec.ncols()
    }

    pub fn check_shapes(&self) -> Result<()> {
        let (d, n) = (self.d(), self.n());
        if self.w_enc.dim() != (n, d) || self.b_enc.len() != n || self.b_dec.len() != d {
            return Err(Error::Shape(format!(
                "inconsistent parameter shapes: w_enc {:?}, b_enc {}, w_dec {:?}, b_dec {}",
                self.w_enc.dim(),
                self.b_enc.len(),
                self.w_dec.dim(),
                self.b_dec.len()
            )));
        }
        Ok(())
    }

    pub fn cast<G: Real>(&self) -> SaeParams<G> {
        let c = |v: &F| G::of(v.as_f64());
        SaeParams {
            w_enc: self.w_enc.map(c),
            b_enc: self.b_enc.map(c),
            w_dec: self.w_dec.map(c),
            b_dec: self.b_dec.map(c),
        }
    }

    /// Largest deviation of a decoder column norm from 1, computed in `f64`.
    pub fn decoder_norm_error(&self) -> f64 {
        self.w_dec
            .axis_iter(Axis(1))
            .map(|col| {
                let sq: f64 = col.iter().map(|v| v.as_f64() * v.as_f64()).sum();
                (sq.sqrt() - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }
}

/// Decoder columns drawn isotropically and normalized; encoder tied to the
/// decoder transpose; zero biases.
pub fn init_params<F: Real>(d: usize, n: usize, seed: u64) -> Result<SaeParams<F>> {
    if d < 1 {
        return Err(Error::config("d", "must be at least 1"));
    }
    if n <= d {
        return Err(Error::config(
            "n",
            format!("latent size {n} must exceed input size {d}"),
        ));
    }
    let mut rng = stream(seed, domain::INIT, 0);
    let mut w_dec = Array2::<f64>::zeros((d, n));
    for mut col in w_dec.axis_iter_mut(Axis(1)) {
        loop {
            col.mapv_inplace(|_| rng.sample(StandardNormal));
            let norm = col.dot(&col).sqrt();
            if norm > 1e-8 {
                col /= norm;
                break;
            }
        }
    }
    let w_dec = w_dec.mapv(F::of);
    Ok(SaeParams {
        w_enc: w_dec.t().as_standard_layout().into_owned(),
        b_enc: Array1::zeros(n),
        w_dec,
        b_dec: Array1::zeros(d),
    })
}

/// Applies the nonlinearity row by row.
pub fn apply_activation<F: Real>(preacts: ArrayView2<F>, kind: &ActivationKind<F>) -> Array2<F> {
    match kind {
        ActivationKind::Relu => preacts.mapv(|z| z.max(F::zero())),
        ActivationKind::TopK { k } => {
            let mut out = preacts.mapv(|z| z.max(F::zero()));
            let n = out.ncols();
            let k = (*k).min(n);
            let mut order: Vec<usize> = (0..n).collect();
            for mut row in out.axis_iter_mut(Axis(0)) {
                if k == n {
                    continue;
                }
                order.iter_mut().enumerate().for_each(|(i, o)| *o = i);
                // total order: larger value first, lower index on ties
                order.select_nth_unstable_by(k, |&a, &b| {
                    row[b]
                        .partial_cmp(&row[a])
                        .unwrap_or(std::cmp::Ordering::Equal)
                        .then(a.cmp(&b))
                });
                for &j in &order[k..] {
                    row[j] = F::zero();
                }
            }
            out
        }
        ActivationKind::JumpRelu { theta, .. } => {
            let mut out = preacts.to_owned();
            for mut row in out.axis_iter_mut(Axis(0)) {
                Zip::from(&mut row).and(theta).for_each(|z, &t| {
                    if !(*z > t) {
                        *z = F::zero();
                    }
                });
            }
            out
        }
    }
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<F> {
    pub preacts: Array2<F>,
    /// Post-activation, pre-mask.
    pub features: Array2<F>,
    pub masked_features: Array2<F>,
    pub recon: Array2<F>,
    /// `∂L_recon/∂(masked features)`, i.e. taken at the decoder input, so a
    /// masked feature still sees how it would affect the reconstruction.
    pub recon_grad_features: Array2<F>,
}

fn check_inputs<F: Real>(params: &SaeParams<F>, x: ArrayView2<F>, mask: ArrayView1<F>) -> Result<()> {
    params.check_shapes()?;
    if x.ncols() != params.d() {
        return Err(Error::Shape(format!(
            "batch has dim {}, model expects {}",
            x.ncols(),
            params.d()
        )));
    }
    if x.nrows() == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    if mask.len() != params.n() {
        return Err(Error::Shape(format!(
            "mask has {} entries, model has {} latents",
            mask.len(),
            params.n()
        )));
    }
    Ok(())
}

/// Pre-activations `x W_encᵀ + b_enc`.
pub fn preactivations<F: Real>(params: &SaeParams<F>, x: ArrayView2<F>) -> Array2<F> {
    x.dot(&params.w_enc.t()) + &params.b_enc
}

/// Latent codes without any mask.
pub fn encode<F: Real>(params: &SaeParams<F>, x: ArrayView2<F>, kind: &ActivationKind<F>) -> Array2<F> {
    apply_activation(preactivations(params, x).view(), kind)
}

/// Reconstruction `codes W_decᵀ + b_dec`.
pub fn decode<F: Real>(params: &SaeParams<F>, codes: ArrayView2<F>) -> Array2<F> {
    codes.dot(&params.w_dec.t()) + &params.b_dec
}

pub fn forward<F: Real>(
    params: &SaeParams<F>,
    x: ArrayView2<F>,
    kind: &ActivationKind<F>,
    mask: ArrayView1<F>,
) -> Result<ForwardTrace<F>> {
    check_inputs(params, x, mask)?;
    if mask.iter().any(|&v| v != F::zero() && v != F::one()) {
        return Err(Error::config("mask", "entries must be 0 or 1"));
    }
    let preacts = preactivations(params, x);
    let features = apply_activation(preacts.view(), kind);
    let masked_features = &features * &mask;
    let recon = decode(params, masked_features.view());
    let scale = F::of(2.0 / x.nrows() as f64);
    let resid = &recon - &x;
    let recon_grad_features = resid.dot(&params.w_dec) * scale;
    Ok(ForwardTrace {
        preacts,
        features,
        masked_features,
        recon,
        recon_grad_features,
    })
}

/// Gradients with the same layout as [`SaeParams`]; `theta` only for JumpReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeGrads<F> {
    pub w_enc: Array2<F>,
    pub b_enc: Array1<F>,
    pub w_dec: Array2<F>,
    pub b_dec: Array1<F>,
    pub theta: Option<Array1<F>>,
}

#[derive(Debug, Clone)]
pub struct LossAndGrads<F> {
    pub loss_total: f64,
    pub loss_recon: f64,
    pub loss_l1: f64,
    pub grads: SaeGrads<F>,
    pub trace: ForwardTrace<F>,
}

/// Rectangle kernel used as the pseudo-derivative of the Heaviside step.
fn rectangle<F: Real>(u: F) -> F {
    let half = F::of(0.5);
    if u > -half && u < half {
        F::one()
    } else {
        F::zero()
    }
}

/// Objective value and analytic gradients.
///
/// Gradients flow through the activation where the feature is nonzero
/// (ReLU: `z > 0`, TopK: kept entries, JumpReLU: `z > θ`). JumpReLU
/// thresholds get the straight-through estimate
/// `∂f/∂θ ≈ −(θ/ε)·rect((z − θ)/ε)`.
pub fn loss_and_grads<F: Real>(
    params: &SaeParams<F>,
    x: ArrayView2<F>,
    kind: &ActivationKind<F>,
    mask: ArrayView1<F>,
    lambda_sparse: f64,
) -> Result<LossAndGrads<F>> {
    if !(lambda_sparse >= 0.0) {
        return Err(Error::config("lambda_sparse", "must be >= 0"));
    }
    let trace = forward(params, x, kind, mask)?;
    let batch = x.nrows() as f64;

    let resid = &trace.recon - &x;
    let loss_recon = resid.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>() / batch;
    let loss_l1 = trace.masked_features.iter().map(|v| v.as_f64().abs()).sum::<f64>() / batch;
    let loss_total = loss_recon + lambda_sparse * loss_l1;

    // ∂L/∂x̂
    let g_recon = resid.mapv(|v| v * F::of(2.0 / batch));
    let w_dec = g_recon.t().dot(&trace.masked_features);
    let b_dec = g_recon.sum_axis(Axis(0));

    // ∂L/∂(f ⊙ m) = recon part + sparsity part, then through the mask
    let l1_scale = F::of(lambda_sparse / batch);
    let mut g_feat = trace.recon_grad_features.clone();
    Zip::from(&mut g_feat).and(&trace.masked_features).for_each(|g, &mf| {
        let sign = if mf > F::zero() {
            F::one()
        } else if mf < F::zero() {
            -F::one()
        } else {
            F::zero()
        };
        *g += l1_scale * sign;
    });
    g_feat *= &mask;

    let theta_grad = match kind {
        ActivationKind::JumpRelu { theta, bandwidth } => {
            let mut g = Array1::<F>::zeros(theta.len());
            for (row_z, row_g) in trace.preacts.axis_iter(Axis(0)).zip(g_feat.axis_iter(Axis(0))) {
                for j in 0..theta.len() {
                    let k = rectangle((row_z[j] - theta[j]) / *bandwidth);
                    if k != F::zero() {
                        g[j] -= row_g[j] * theta[j] / *bandwidth * k;
                    }
                }
            }
            Some(g)
        }
        _ => None,
    };

    let mut g_pre = g_feat;
    Zip::from(&mut g_pre).and(&trace.features).for_each(|g, &f| {
        if !(f > F::zero()) {
            *g = F::zero();
        }
    });
    let w_enc = g_pre.t().dot(&x);
    let b_enc = g_pre.sum_axis(Axis(0));

    let grads = SaeGrads {
        w_enc,
        b_enc,
        w_dec,
        b_dec,
        theta: theta_grad,
    };
    for (name, finite) in [
        ("w_enc", grads.w_enc.iter().all(|v| v.is_finite())),
        ("b_enc", grads.b_enc.iter().all(|v| v.is_finite())),
        ("w_dec", grads.w_dec.iter().all(|v| v.is_finite())),
        ("b_dec", grads.b_dec.iter().all(|v| v.is_finite())),
        (
            "theta",
            grads.theta.as_ref().is_none_or(|t| t.iter().all(|v| v.is_finite())),
        ),
    ] {
        if !finite {
            return Err(Error::numeric(name));
        }
    }
    Ok(LossAndGrads {
        loss_total,
        loss_recon,
        loss_l1,
        grads,
        trace,
    })
}

pub mod file {
    //! `ATMP` parameter files.
    //!
    //! Layout (little-endian): magic `"ATMP"`, `u32` version = 1, `u32` d,
    //! `u32` n, `u8` kind tag (0 ReLU, 1 TopK, 2 JumpReLU), kind payload
    //! (TopK: `u32` k; JumpReLU: `f32` bandwidth then `n` `f32` thresholds),
    //! then `w_enc` (n×d), `b_enc`, `w_dec` (d×n), `b_dec` as `f32`
    //! row-major.

    use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
    use ndarray::{Array1, Array2};
    use std::io::{Cursor, Read};

    use super::{ActivationKind, SaeParams};
    use crate::error::{Error, Result};

    const MAGIC: &[u8; 4] = b"ATMP";
    const VERSION: u32 = 1;

    pub fn encode(params: &SaeParams<f32>, kind: &ActivationKind<f32>) -> Vec<u8> {
        let (d, n) = (params.d(), params.n());
        let mut out = Vec::with_capacity(17 + 4 * (2 * d * n + d + 2 * n + 1));
        out.extend_from_slice(MAGIC);
        out.write_u32::<LittleEndian>(VERSION).unwrap();
        out.write_u32::<LittleEndian>(d as u32).unwrap();
        out.write_u32::<LittleEndian>(n as u32).unwrap();
        match kind {
            ActivationKind::Relu => out.push(0),
            ActivationKind::TopK { k } => {
                out.push(1);
                out.write_u32::<LittleEndian>(*k as u32).unwrap();
            }
            ActivationKind::JumpRelu { theta, bandwidth } => {
                out.push(2);
                out.write_f32::<LittleEndian>(*bandwidth).unwrap();
                theta.iter().for_each(|v| out.write_f32::<LittleEndian>(*v).unwrap());
            }
        }
        for v in params
            .w_enc
            .iter()
            .chain(params.b_enc.iter())
            .chain(params.w_dec.iter())
            .chain(params.b_dec.iter())
        {
            out.write_f32::<LittleEndian>(*v).unwrap();
        }
        out
    }

    fn floats(cur: &mut Cursor<&[u8]>, count: usize, what: &str) -> Result<Vec<f32>> {
        let start = cur.position();
        let remaining = cur.get_ref().len() as u64 - start;
        if remaining < 4 * count as u64 {
            return Err(Error::format(
                cur.get_ref().len() as u64,
                format!("truncated {what}: expected {} bytes, found {remaining}", 4 * count),
            ));
        }
        let mut v = vec![0f32; count];
        cur.read_f32_into::<LittleEndian>(&mut v).unwrap();
        Ok(v)
    }

    pub fn decode(bytes: &[u8]) -> Result<(SaeParams<f32>, ActivationKind<f32>)> {
        let mut cur = Cursor::new(bytes);
        let short = |cur: &Cursor<&[u8]>| Error::format(cur.get_ref().len() as u64, "truncated header");
        let mut magic = [0u8; 4];
        cur.read_exact(&mut magic).map_err(|_| short(&cur))?;
        if &magic != MAGIC {
            return Err(Error::format(0, format!("bad magic {magic:?}, expected \"ATMP\"")));
        }
        let version = cur.read_u32::<LittleEndian>().map_err(|_| short(&cur))?;
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let d = cur.read_u32::<LittleEndian>().map_err(|_| short(&cur))? as usize;
        let n = cur.read_u32::<LittleEndian>().map_err(|_| short(&cur))? as usize;
        let tag_offset = cur.position();
        let kind = match cur.read_u8().map_err(|_| short(&cur))? {
            0 => ActivationKind::Relu,
            1 => ActivationKind::TopK {
                k: cur.read_u32::<LittleEndian>().map_err(|_| short(&cur))? as usize,
            },
            2 => {
                let bandwidth = cur.read_f32::<LittleEndian>().map_err(|_| short(&cur))?;
                let theta = Array1::from(floats(&mut cur, n, "thresholds")?);
                ActivationKind::JumpRelu { theta, bandwidth }
            }
            t => return Err(Error::format(tag_offset, format!("unknown activation tag {t}"))),
        };
        let w_enc = Array2::from_shape_vec((n, d), floats(&mut cur, n * d, "w_enc")?).unwrap();
        let b_enc = Array1::from(floats(&mut cur, n, "b_enc")?);
        let w_dec = Array2::from_shape_vec((d, n), floats(&mut cur, d * n, "w_dec")?).unwrap();
        let b_dec = Array1::from(floats(&mut cur, d, "b_dec")?);
        if cur.position() != bytes.len() as u64 {
            return Err(Error::format(
                cur.position(),
                format!("{} trailing bytes", bytes.len() as u64 - cur.position()),
            ));
        }
        Ok((
            SaeParams {
                w_enc,
                b_enc,
                w_dec,
                b_dec,
            },
            kind,
        ))
    }
}
