//! Capsule primitives: vector nonlinearities, primary capsules and
//! routing-by-agreement.
//!
//! Capsule tensors are `[B, N, D]`: `B` examples, `N` capsules per example,
//! each an activity vector of length `D`. Functions that take a single
//! example accept `[N, D]` as well.

use rayon::prelude::*;

use crate::tensor::{gemm, MatMut, MatRef, Scalar, Tape, Tensor, TensorError, Var};

/// Guard added to `‖s‖²` before taking its square root in the activations.
pub const NORM_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CapsuleError {
    #[error("capsule config error: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, CapsuleError>;

/// Vector nonlinearity applied per capsule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    /// `(‖s‖² / (1 + ‖s‖²)) · s/‖s‖`
    #[default]
    Squash,
    /// `(1 − e^{−‖s‖}) · s/‖s‖`
    Custom,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Squash => "squash",
            Activation::Custom => "custom",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "squash" => Some(Activation::Squash),
            "custom" => Some(Activation::Custom),
            _ => None,
        }
    }

    /// Output is `gain(q) · s` with `q = ‖s‖²`. Returns `(gain, d gain / dq)`.
    fn gain<T: Scalar>(self, q: T) -> (T, T) {
        let one = T::one();
        let two = T::from_f64(2.0);
        let n = (q + T::from_f64(NORM_EPS)).sqrt();
        match self {
            Activation::Squash => {
                let h = q / ((one + q) * n);
                let dh = (n - q * (one + q) / (two * n)) / ((one + q) * (one + q) * n * n);
                (h, dh)
            }
            Activation::Custom => {
                let e = (-n).exp();
                let rise = -(-n).exp_m1();
                let h = rise / n;
                let dh_dn = (n * e - rise) / (n * n);
                (h, dh_dn / (two * n))
            }
        }
    }

    /// Applies the activation to every vector along the last axis, outside
    /// of any tape.
    pub fn apply_tensor<T: Scalar>(self, s: &Tensor<T>) -> Tensor<T> {
        let d = *s.shape().last().expect("capsule tensor needs a last axis");
        let mut out = s.clone();
        for v in out.data_mut().chunks_mut(d) {
            let q = v.iter().map(|&x| x * x).sum::<T>();
            let (h, _) = self.gain(q);
            for x in v.iter_mut() {
                *x = *x * h;
            }
        }
        out
    }

    /// Differentiable activation over the last axis.
    pub fn apply<'t, T: Scalar>(self, s: Var<'t, T>) -> Result<Var<'t, T>> {
        let sv = s.value();
        let Some(&d) = sv.shape().last() else {
            return Err(TensorError::Dimension {
                op: "activation",
                detail: "scalar input has no capsule axis".into(),
            }
            .into());
        };
        let out = self.apply_tensor(&sv);
        let act = self;
        Ok(s.tape().record(act.name(), out, &[s], move |g, _| {
            let mut gs = Tensor::zeros(sv.shape().to_vec());
            for ((gsv, sv), gv) in gs
                .data_mut()
                .chunks_mut(d)
                .zip(sv.data().chunks(d))
                .zip(g.data().chunks(d))
            {
                let q = sv.iter().map(|&x| x * x).sum::<T>();
                let (h, dh) = act.gain(q);
                let dot: T = sv.iter().zip(gv).map(|(&a, &b)| a * b).sum();
                let k = T::from_f64(2.0) * dh * dot;
                for ((o, &si), &gi) in gsv.iter_mut().zip(sv).zip(gv) {
                    *o = h * gi + k * si;
                }
            }
            vec![Some(gs)]
        })?)
    }
}

/// Convolutional capsules that start the capsule hierarchy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrimaryCapsuleConfig {
    pub num_capsule_types: usize,
    pub capsule_dim: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Default for PrimaryCapsuleConfig {
    fn default() -> Self {
        Self {
            num_capsule_types: 32,
            capsule_dim: 8,
            kernel: 9,
            stride: 2,
        }
    }
}

impl PrimaryCapsuleConfig {
    /// Channels of the convolution that produces the capsules.
    pub fn channels(&self) -> usize {
        self.num_capsule_types * self.capsule_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_capsule_types == 0 || self.capsule_dim == 0 || self.kernel == 0 || self.stride == 0 {
            return Err(CapsuleError::Config(format!(
                "primary capsule sizes must be positive, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// A capsule layer whose inputs reach it through routing-by-agreement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoutingCapsuleConfig {
    pub num_out_capsules: usize,
    pub out_dim: usize,
    pub routing_iterations: usize,
}

impl Default for RoutingCapsuleConfig {
    fn default() -> Self {
        Self {
            num_out_capsules: 10,
            out_dim: 16,
            routing_iterations: 3,
        }
    }
}

impl RoutingCapsuleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.routing_iterations == 0 {
            return Err(CapsuleError::Config("routing_iterations must be at least 1".into()));
        }
        if self.num_out_capsules == 0 || self.out_dim == 0 {
            return Err(CapsuleError::Config(format!(
                "routing layer sizes must be positive, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Routing quantities from one forward pass, batch axis first.
#[derive(Debug, Clone)]
pub struct RoutingState<T> {
    /// Agreement logits `[B, N_in, N_out]` as they stood before the final iteration.
    pub logits: Tensor<T>,
    /// Couplings `[B, N_in, N_out]` used by the final iteration.
    pub couplings: Tensor<T>,
    /// Couplings of every iteration, first to last.
    pub coupling_history: Vec<Tensor<T>>,
    /// Prediction vectors `[B, N_in, N_out, D_out]`.
    pub predictions: Tensor<T>,
}

/// Forms primary capsules: convolution, regrouping of the channels into
/// `num_capsule_types` vectors of `capsule_dim` per grid cell, then squash.
///
/// `features` is `[C, H, W]` or `[B, C, H, W]`; the result is `[N, D]` or
/// `[B, N, D]` with `N = types × H' × W'`. Capsule `t·H'W' + y·W' + x` is
/// built from channels `t·D .. (t+1)·D` at cell `(y, x)`.
pub fn primary_capsules<'t, T: Scalar>(
    features: Var<'t, T>,
    cfg: &PrimaryCapsuleConfig,
    kernels: Var<'t, T>,
    bias: Option<Var<'t, T>>,
) -> Result<Var<'t, T>> {
    cfg.validate()?;
    let kshape = kernels.shape();
    if kshape.len() != 4 || kshape[0] != cfg.channels() || kshape[2] != cfg.kernel || kshape[3] != cfg.kernel {
        return Err(CapsuleError::Config(format!(
            "primary kernels {kshape:?} do not match {} channels of {}x{}",
            cfg.channels(),
            cfg.kernel,
            cfg.kernel
        )));
    }
    let unbatched = features.shape().len() == 3;
    let conv = features.conv2d(kernels, bias, cfg.stride)?;
    let cs = conv.shape();
    let (b, oh, ow) = if unbatched {
        (1, cs[1], cs[2])
    } else {
        (cs[0], cs[2], cs[3])
    };
    let (types, dim) = (cfg.num_capsule_types, cfg.capsule_dim);
    let grouped = conv.reshape([b, types, dim, oh * ow])?.permute(&[0, 1, 3, 2])?;
    let n = types * oh * ow;
    let caps = if unbatched {
        grouped.reshape([n, dim])?
    } else {
        grouped.reshape([b, n, dim])?
    };
    Activation::Squash.apply(caps)
}

/// Prediction vectors `û[b,i,j] = W[i,j] · u[b,i]`.
///
/// `u` is `[B, N_in, D_in]`, `weights` is `[N_in, N_out, D_out, D_in]`.
pub fn capsule_predictions<'t, T: Scalar>(u: Var<'t, T>, weights: Var<'t, T>) -> Result<Var<'t, T>> {
    let uv = u.value();
    let wv = weights.value();
    let (&[bsz, nin, din], &[wn, nout, dout, wd]) = (uv.shape(), wv.shape()) else {
        return Err(TensorError::Dimension {
            op: "capsule_predictions",
            detail: format!(
                "expected [B,N,D] and [N,M,D',D], got {:?} and {:?}",
                uv.shape(),
                wv.shape()
            ),
        }
        .into());
    };
    if wn != nin || wd != din {
        return Err(TensorError::Dimension {
            op: "capsule_predictions",
            detail: format!("weights {:?} do not fit capsules {:?}", wv.shape(), uv.shape()),
        }
        .into());
    }
    let m = nout * dout;

    // Per input capsule: [B, D_in] x [D_in, M], gathered as [N_in, B, M].
    let (ud, wd) = (uv.data(), wv.data());
    let mut staged = vec![T::zero(); nin * bsz * m];
    staged.par_chunks_mut(bsz * m).enumerate().for_each(|(i, dst)| {
        let ui = MatRef::strided(&ud[i * din..], bsz, din, nin * din, 1);
        let wi = MatRef::new(&wd[i * m * din..(i + 1) * m * din], m, din).t();
        gemm(T::one(), ui, wi, T::zero(), MatMut::new(dst, bsz, m));
    });
    let mut out = Tensor::zeros([bsz, nin, nout, dout]);
    scatter_batch_major(&staged, out.data_mut(), nin, bsz, m);

    Ok(u.tape()
        .record("capsule_predictions", out, &[u, weights], move |g, needs| {
            let (gd, ud, wd) = (g.data(), uv.data(), wv.data());
            let gu = needs[0].then(|| {
                let mut staged = vec![T::zero(); nin * bsz * din];
                staged.par_chunks_mut(bsz * din).enumerate().for_each(|(i, dst)| {
                    let gi = MatRef::strided(&gd[i * m..], bsz, m, nin * m, 1);
                    let wi = MatRef::new(&wd[i * m * din..(i + 1) * m * din], m, din);
                    gemm(T::one(), gi, wi, T::zero(), MatMut::new(dst, bsz, din));
                });
                let mut gu = Tensor::zeros([bsz, nin, din]);
                scatter_batch_major(&staged, gu.data_mut(), nin, bsz, din);
                gu
            });
            let gw = needs[1].then(|| {
                let mut gw = Tensor::zeros([nin, nout, dout, din]);
                gw.data_mut().par_chunks_mut(m * din).enumerate().for_each(|(i, dst)| {
                    let gi = MatRef::strided(&gd[i * m..], bsz, m, nin * m, 1).t();
                    let ui = MatRef::strided(&ud[i * din..], bsz, din, nin * din, 1);
                    gemm(T::one(), gi, ui, T::zero(), MatMut::new(dst, m, din));
                });
                gw
            });
            vec![gu, gw]
        })?)
}

/// `[N, B, M]` → `[B, N, M]`.
fn scatter_batch_major<T: Scalar>(staged: &[T], out: &mut [T], n: usize, b: usize, m: usize) {
    for i in 0..n {
        for bi in 0..b {
            let src = &staged[(i * b + bi) * m..(i * b + bi + 1) * m];
            out[(bi * n + i) * m..(bi * n + i + 1) * m].copy_from_slice(src);
        }
    }
}

/// `s[b,j] = Σ_i c[b,i,j] · û[b,i,j]` with the couplings held constant.
fn coupled_sum<'t, T: Scalar>(predictions: Var<'t, T>, couplings: Tensor<T>) -> Result<Var<'t, T>> {
    let pv = predictions.value();
    let &[bsz, nin, nout, d] = pv.shape() else {
        unreachable!("predictions are 4-D");
    };
    let out = coupled_sum_plain(&pv, &couplings);
    Ok(predictions
        .tape()
        .record("coupled_sum", out, &[predictions], move |g, _| {
            let mut gp = Tensor::zeros([bsz, nin, nout, d]);
            let (gd, cd) = (g.data(), couplings.data());
            for (b, block) in gp.data_mut().chunks_mut(nin * nout * d).enumerate() {
                for i in 0..nin {
                    for j in 0..nout {
                        let c = cd[(b * nin + i) * nout + j];
                        let src = &gd[(b * nout + j) * d..(b * nout + j + 1) * d];
                        let dst = &mut block[(i * nout + j) * d..(i * nout + j + 1) * d];
                        for (o, &gv) in dst.iter_mut().zip(src) {
                            *o = c * gv;
                        }
                    }
                }
            }
            vec![Some(gp)]
        })?)
}

fn coupled_sum_plain<T: Scalar>(predictions: &Tensor<T>, couplings: &Tensor<T>) -> Tensor<T> {
    let &[bsz, nin, nout, d] = predictions.shape() else {
        unreachable!("predictions are 4-D");
    };
    let mut out = Tensor::zeros([bsz, nout, d]);
    let (pd, cd) = (predictions.data(), couplings.data());
    for (b, dst) in out.data_mut().chunks_mut(nout * d).enumerate() {
        for i in 0..nin {
            for j in 0..nout {
                let c = cd[(b * nin + i) * nout + j];
                let src = &pd[((b * nin + i) * nout + j) * d..((b * nin + i) * nout + j + 1) * d];
                for (o, &p) in dst[j * d..(j + 1) * d].iter_mut().zip(src) {
                    *o = *o + c * p;
                }
            }
        }
    }
    out
}

/// Softmax over the last axis of `[B, N_in, N_out]` logits.
fn softmax_over_outputs<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let nout = *logits.shape().last().unwrap();
    let mut c = logits.clone();
    for row in c.data_mut().chunks_mut(nout) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            z = z + *x;
        }
        for x in row.iter_mut() {
            *x = *x / z;
        }
    }
    c
}

/// `b[b,i,j] += û[b,i,j] · v[b,j]`.
fn add_agreement<T: Scalar>(logits: &mut Tensor<T>, predictions: &Tensor<T>, outputs: &Tensor<T>) {
    let &[bsz, nin, nout, d] = predictions.shape() else {
        unreachable!("predictions are 4-D");
    };
    let (pd, vd) = (predictions.data(), outputs.data());
    for b in 0..bsz {
        for i in 0..nin {
            for j in 0..nout {
                let p = &pd[((b * nin + i) * nout + j) * d..][..d];
                let v = &vd[(b * nout + j) * d..][..d];
                let a: T = p.iter().zip(v).map(|(&x, &y)| x * y).sum();
                let at = (b * nin + i) * nout + j;
                logits.data_mut()[at] = logits.data()[at] + a;
            }
        }
    }
}

/// Routes `[B, N_in, D_in]` (or `[N_in, D_in]`) capsules into
/// `cfg.num_out_capsules` parents by iterative agreement.
///
/// Logits start at zero on every call. Each iteration takes
/// `c = softmax_j(b)`, `s_j = Σ_i c_ij û_{j|i}` and `v_j = activation(s_j)`;
/// all but the last then add `û_{j|i} · v_j` to `b_ij`. The couplings are
/// treated as constants by the gradient, so only the final
/// `s → v` composition is differentiated.
///
/// With `frozen_couplings`, the iterations are skipped and the given
/// couplings drive the final composition. Finite-difference checks use this
/// to evaluate the same function the gradient describes.
pub fn routed_capsules<'t, T: Scalar>(
    u: Var<'t, T>,
    cfg: &RoutingCapsuleConfig,
    weights: Var<'t, T>,
    activation: Activation,
    frozen_couplings: Option<&Tensor<T>>,
) -> Result<(Var<'t, T>, RoutingState<T>)> {
    cfg.validate()?;
    let ushape = u.shape();
    let unbatched = ushape.len() == 2;
    let u3 = if unbatched {
        u.reshape([1, ushape[0], ushape[1]])?
    } else {
        u
    };
    let wshape = weights.shape();
    if wshape.len() != 4 || wshape[1] != cfg.num_out_capsules || wshape[2] != cfg.out_dim {
        return Err(CapsuleError::Config(format!(
            "routing weights {wshape:?} do not match {} output capsules of dim {}",
            cfg.num_out_capsules, cfg.out_dim
        )));
    }
    let predictions = capsule_predictions(u3, weights)?;
    let pv = predictions.value();
    let &[bsz, nin, nout, _] = pv.shape() else {
        unreachable!()
    };

    let mut logits = Tensor::zeros([bsz, nin, nout]);
    let mut history = Vec::with_capacity(cfg.routing_iterations);
    let couplings = match frozen_couplings {
        Some(c) => {
            if c.shape() != [bsz, nin, nout] {
                return Err(CapsuleError::Config(format!(
                    "frozen couplings {:?} do not match [{bsz}, {nin}, {nout}]",
                    c.shape()
                )));
            }
            history.push(c.clone());
            c.clone()
        }
        None => {
            for _ in 1..cfg.routing_iterations {
                let c = softmax_over_outputs(&logits);
                let v = activation.apply_tensor(&coupled_sum_plain(&pv, &c));
                add_agreement(&mut logits, &pv, &v);
                history.push(c);
            }
            let c = softmax_over_outputs(&logits);
            history.push(c.clone());
            c
        }
    };

    let s = coupled_sum(predictions, couplings.clone())?;
    let mut v = activation.apply(s)?;
    if unbatched {
        v = v.reshape([nout, cfg.out_dim])?;
    }
    let state = RoutingState {
        logits,
        couplings,
        coupling_history: history,
        predictions: (*pv).clone(),
    };
    Ok((v, state))
}

/// A capsule-to-capsule routing layer stacked after another one. Same
/// contract as [`routed_capsules`]; the input has no grid structure.
pub fn stack_capsule_layer<'t, T: Scalar>(
    v: Var<'t, T>,
    cfg: &RoutingCapsuleConfig,
    weights: Var<'t, T>,
    activation: Activation,
) -> Result<Var<'t, T>> {
    Ok(routed_capsules(v, cfg, weights, activation, None)?.0)
}

/// Capsule lengths `[.., N]` from activities `[.., N, D]`.
pub fn capsule_lengths<'t, T: Scalar>(v: Var<'t, T>) -> Result<Var<'t, T>> {
    Ok(v.l2_norm_last()?)
}

/// Untaped forward of [`routed_capsules`], convenient for analysis.
pub fn route<T: Scalar>(
    u: &Tensor<T>,
    cfg: &RoutingCapsuleConfig,
    weights: &Tensor<T>,
    activation: Activation,
) -> Result<(Tensor<T>, RoutingState<T>)> {
    let tape = Tape::new();
    let (v, state) = routed_capsules(
        tape.constant(u.clone()),
        cfg,
        tape.constant(weights.clone()),
        activation,
        None,
    )?;
    let out = (*v.value()).clone();
    Ok((out, state))
}
