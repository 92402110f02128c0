use rayon::prelude::*;

use super::gemm::{gemm, MatMut, MatRef};
use super::{dim_err, strides_of, Result, Scalar, Tensor, Var};

/// Images per partial sum when reducing kernel gradients across a batch.
/// Fixed so that the reduction order does not depend on the thread count.
const REDUCE_CHUNK: usize = 4;

fn same_shape<T: Scalar>(op: &'static str, a: &Var<'_, T>, b: &Var<'_, T>) -> Result<Vec<usize>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(dim_err(op, format!("shapes {sa:?} and {sb:?} differ")));
    }
    Ok(sa)
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape().to_vec(), data).unwrap()
}

/// `(outer, axis_len, inner)` decomposition of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

// Fallible, tape-recording arithmetic; not the std operator traits.
#[allow(clippy::should_implement_trait)]
impl<'t, T: Scalar> Var<'t, T> {
    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        same_shape("add", &self, &other)?;
        let out = zip_map(&self.value(), &other.value(), |x, y| x + y);
        self.tape.record("add", out, &[self, other], |g, _| {
            vec![Some(g.clone()), Some(g.clone())]
        })
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        same_shape("sub", &self, &other)?;
        let out = zip_map(&self.value(), &other.value(), |x, y| x - y);
        self.tape.record("sub", out, &[self, other], |g, _| {
            vec![Some(g.clone()), Some(g.map(|x| -x))]
        })
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        same_shape("mul", &self, &other)?;
        let (a, b) = (self.value(), other.value());
        let out = zip_map(&a, &b, |x, y| x * y);
        self.tape.record("mul", out, &[self, other], move |g, needs| {
            vec![
                needs[0].then(|| zip_map(g, &b, |x, y| x * y)),
                needs[1].then(|| zip_map(g, &a, |x, y| x * y)),
            ]
        })
    }

    pub fn scale(self, factor: T) -> Result<Var<'t, T>> {
        let out = self.value().map(|x| x * factor);
        self.tape
            .record("scale", out, &[self], move |g, _| vec![Some(g.map(|x| x * factor))])
    }

    pub fn relu(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let out = x.map(|v| if v <= T::zero() { T::zero() } else { v });
        self.tape.record("relu", out, &[self], move |g, _| {
            vec![Some(zip_map(g, &x, |g, v| if v <= T::zero() { T::zero() } else { g }))]
        })
    }

    pub fn sigmoid(self) -> Result<Var<'t, T>> {
        let out = self.value().map(|v| T::one() / (T::one() + (-v).exp()));
        let y = out.clone();
        self.tape.record("sigmoid", out, &[self], move |g, _| {
            vec![Some(zip_map(g, &y, |g, y| g * y * (T::one() - y)))]
        })
    }

    pub fn exp(self) -> Result<Var<'t, T>> {
        let out = self.value().map(|v| v.exp());
        let y = out.clone();
        self.tape.record("exp", out, &[self], move |g, _| {
            vec![Some(zip_map(g, &y, |g, y| g * y))]
        })
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let total = x.data().iter().copied().sum();
        let shape = x.shape().to_vec();
        self.tape.record("sum", Tensor::scalar(total), &[self], move |g, _| {
            vec![Some(Tensor::full(shape.clone(), g.data()[0]))]
        })
    }

    pub fn mean(self) -> Result<Var<'t, T>> {
        let n = self.value().numel();
        if n == 0 {
            return Err(dim_err("mean", "empty tensor"));
        }
        self.sum()?.scale(T::one() / T::from_f64(n as f64))
    }

    /// Euclidean norm over the last axis; the output drops that axis.
    /// The gradient at an exactly-zero vector is taken as zero.
    pub fn l2_norm_last(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let Some((&d, rest)) = shape.split_last() else {
            return Err(dim_err("l2_norm_last", "scalar input"));
        };
        if d == 0 {
            return Err(dim_err("l2_norm_last", "empty last axis"));
        }
        let norms: Vec<T> = x
            .data()
            .chunks(d)
            .map(|v| v.iter().map(|&e| e * e).sum::<T>().sqrt())
            .collect();
        let out = Tensor::from_vec(rest.to_vec(), norms.clone())?;
        self.tape.record("l2_norm_last", out, &[self], move |g, _| {
            let mut gx = Tensor::zeros(shape.clone());
            for (((gv, xv), &n), &gn) in gx
                .data_mut()
                .chunks_mut(d)
                .zip(x.data().chunks(d))
                .zip(&norms)
                .zip(g.data())
            {
                if n > T::zero() {
                    for (o, &e) in gv.iter_mut().zip(xv) {
                        *o = gn * e / n;
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() {
            return Err(dim_err("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut y = Tensor::zeros(shape.clone());
        let (xd, yd) = (x.data(), y.data_mut());
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| xd[at(k)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for k in 0..len {
                    let e = (xd[at(k)] - max).exp();
                    yd[at(k)] = e;
                    z = z + e;
                }
                for k in 0..len {
                    yd[at(k)] = yd[at(k)] / z;
                }
            }
        }
        let yc = y.clone();
        self.tape.record("softmax", y, &[self], move |g, _| {
            let mut gx = Tensor::zeros(yc.shape().to_vec());
            let (gd, yd, out) = (g.data(), yc.data(), gx.data_mut());
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * len + k) * inner + i;
                    let dot: T = (0..len).map(|k| gd[at(k)] * yd[at(k)]).sum();
                    for k in 0..len {
                        out[at(k)] = yd[at(k)] * (gd[at(k)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = shape.into();
        let new_len: usize = shape.iter().product();
        if new_len != x.numel() {
            return Err(dim_err("reshape", format!("cannot view {:?} as {shape:?}", x.shape())));
        }
        let old = x.shape().to_vec();
        let out = x.reshape(shape)?;
        self.tape.record("reshape", out, &[self], move |g, _| {
            vec![Some(g.reshape(old.clone()).unwrap())]
        })
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(self, axes: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes
                .iter()
                .any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(dim_err(
                "permute",
                format!("{axes:?} is not a permutation of {} axes", shape.len()),
            ));
        }
        let out = permute_tensor(&x, axes);
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.tape.record("permute", out, &[self], move |g, _| {
            vec![Some(permute_tensor(g, &inverse))]
        })
    }

    /// 2-D matrix product `[m×k] · [k×n]`.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err("matmul", format!("cannot multiply {sa:?} by {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros([m, n]);
        gemm(
            T::one(),
            MatRef::new(a.data(), m, k),
            MatRef::new(b.data(), k, n),
            T::zero(),
            MatMut::new(out.data_mut(), m, n),
        );
        self.tape.record("matmul", out, &[self, other], move |g, needs| {
            let gm = MatRef::new(g.data(), m, n);
            let ga = needs[0].then(|| {
                let mut ga = Tensor::zeros([m, k]);
                let bt = MatRef::new(b.data(), k, n).t();
                gemm(T::one(), gm, bt, T::zero(), MatMut::new(ga.data_mut(), m, k));
                ga
            });
            let gb = needs[1].then(|| {
                let mut gb = Tensor::zeros([k, n]);
                let at = MatRef::new(a.data(), m, k).t();
                gemm(T::one(), at, gm, T::zero(), MatMut::new(gb.data_mut(), k, n));
                gb
            });
            vec![ga, gb]
        })
    }

    /// Adds a vector along the last axis (row-broadcast bias).
    pub fn add_bias(self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        let (x, b) = (self.value(), bias.value());
        let n = b.numel();
        if b.ndim() != 1 || x.shape().last() != Some(&n) {
            return Err(dim_err(
                "add_bias",
                format!("bias {:?} does not match last axis of {:?}", b.shape(), x.shape()),
            ));
        }
        let mut out = (*x).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(b.data()) {
                *o = *o + bv;
            }
        }
        self.tape.record("add_bias", out, &[self, bias], move |g, needs| {
            let gb = needs[1].then(|| {
                let mut gb = Tensor::zeros([n]);
                for row in g.data().chunks(n) {
                    for (o, &gv) in gb.data_mut().iter_mut().zip(row) {
                        *o = *o + gv;
                    }
                }
                gb
            });
            vec![Some(g.clone()), gb]
        })
    }

    /// Joins tensors along `axis`; all other axes must agree.
    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let Some(first) = parts.first() else {
            return Err(dim_err("concat", "no operands"));
        };
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(dim_err("concat", format!("axis {axis} out of range for {base:?}")));
        }
        for v in &values[1..] {
            let s = v.shape();
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(dim_err(
                    "concat",
                    format!("{base:?} and {s:?} disagree off axis {axis}"),
                ));
            }
        }
        let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let (outer, _, inner) = split_axis(&base, axis);
        let mut shape = base.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &len) in values.iter().zip(&lens) {
                data.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let out = Tensor::from_vec(shape.clone(), data)?;
        let tape = first.tape;
        tape.record("concat", out, parts, move |g, _| {
            let mut grads: Vec<Vec<T>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
            let gd = g.data();
            let mut at = 0;
            for _ in 0..outer {
                for (gv, &len) in grads.iter_mut().zip(&lens) {
                    gv.extend_from_slice(&gd[at..at + len * inner]);
                    at += len * inner;
                }
            }
            grads
                .into_iter()
                .zip(&lens)
                .map(|(gv, &len)| {
                    let mut s = shape.clone();
                    s[axis] = len;
                    Some(Tensor::from_vec(s, gv).unwrap())
                })
                .collect()
        })
    }

    /// Valid (unpadded) 2-D cross-correlation.
    ///
    /// `self` is `[C, H, W]` or `[B, C, H, W]`; `kernels` is `[O, C, K, K]`;
    /// `bias`, when given, is `[O]`.
    pub fn conv2d(self, kernels: Var<'t, T>, bias: Option<Var<'t, T>>, stride: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let kv = kernels.value();
        let unbatched = x.ndim() == 3;
        let in_shape = match x.shape() {
            &[c, h, w] => [1, c, h, w],
            &[b, c, h, w] => [b, c, h, w],
            s => return Err(dim_err("conv2d", format!("input must be 3-D or 4-D, got {s:?}"))),
        };
        let [bsz, c, h, w] = in_shape;
        let &[o, kc, k, k2] = kv.shape() else {
            return Err(dim_err(
                "conv2d",
                format!("kernels must be [O, C, K, K], got {:?}", kv.shape()),
            ));
        };
        if kc != c || k != k2 {
            return Err(dim_err(
                "conv2d",
                format!("kernels {:?} do not fit input {:?}", kv.shape(), x.shape()),
            ));
        }
        let geom = ConvGeometry::new(c, h, w, k, stride).map_err(|d| dim_err("conv2d", d))?;
        let bias_val = match bias {
            Some(b) => {
                let bv = b.value();
                if bv.shape() != [o] {
                    return Err(dim_err(
                        "conv2d",
                        format!("bias {:?} does not match {o} kernels", bv.shape()),
                    ));
                }
                Some(bv)
            }
            None => None,
        };
        let out_data = conv2d_forward(x.data(), bsz, &geom, kv.data(), o, bias_val.as_ref().map(|b| b.data()));
        let out_shape = if unbatched {
            vec![o, geom.oh, geom.ow]
        } else {
            vec![bsz, o, geom.oh, geom.ow]
        };
        let out = Tensor::from_vec(out_shape, out_data)?;

        let mut parents = vec![self, kernels];
        parents.extend(bias);
        let x_shape = x.shape().to_vec();
        let k_shape = kv.shape().to_vec();
        self.tape.record("conv2d", out, &parents, move |g, needs| {
            let (gx, gk) = conv2d_backward(&x, &kv, g.data(), bsz, &geom, o, needs[0], needs[1]);
            let mut grads = vec![
                gx.map(|d| Tensor::from_vec(x_shape.clone(), d).unwrap()),
                gk.map(|d| Tensor::from_vec(k_shape.clone(), d).unwrap()),
            ];
            if needs.len() == 3 {
                let plane = geom.oh * geom.ow;
                let mut gb = vec![T::zero(); o];
                for img in g.data().chunks(o * plane) {
                    for (ch, acc) in gb.iter_mut().enumerate() {
                        *acc = *acc + img[ch * plane..(ch + 1) * plane].iter().copied().sum();
                    }
                }
                grads.push(Some(Tensor::from_vec([o], gb).unwrap()));
            }
            grads
        })
    }
}

fn permute_tensor<T: Scalar>(x: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let shape = x.shape();
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = x.numel();
    let mut out = Vec::with_capacity(n);
    let mut index = vec![0usize; out_shape.len()];
    let mut src = 0usize;
    let xd = x.data();
    for _ in 0..n {
        out.push(xd[src]);
        for ax in (0..out_shape.len()).rev() {
            index[ax] += 1;
            src += src_strides[ax];
            if index[ax] < out_shape[ax] {
                break;
            }
            src -= src_strides[ax] * out_shape[ax];
            index[ax] = 0;
        }
    }
    Tensor::from_vec(out_shape, out).unwrap()
}

/// `floor((size - kernel) / stride) + 1`, or `None` when the kernel does not fit.
pub fn conv_output_size(size: usize, kernel: usize, stride: usize) -> Option<usize> {
    if kernel == 0 || stride == 0 || kernel > size {
        None
    } else {
        Some((size - kernel) / stride + 1)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvGeometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    fn new(c: usize, h: usize, w: usize, k: usize, stride: usize) -> std::result::Result<Self, String> {
        let (Some(oh), Some(ow)) = (conv_output_size(h, k, stride), conv_output_size(w, k, stride)) else {
            return Err(format!("kernel {k}x{k} stride {stride} does not fit a {h}x{w} input"));
        };
        Ok(Self {
            c,
            h,
            w,
            k,
            stride,
            oh,
            ow,
        })
    }

    fn patch(&self) -> usize {
        self.c * self.k * self.k
    }

    fn plane(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds one `[C, H, W]` image into a `[C*K*K, OH*OW]` column matrix.
pub fn im2col<T: Scalar>(img: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let plane = g.plane();
    for ch in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ch * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let src = ch * g.h * g.w + (oy * g.stride + ky) * g.w + kx;
                    let dst_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if g.stride == 1 {
                        dst_row.copy_from_slice(&img[src..src + g.ow]);
                    } else {
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            *d = img[src + ox * g.stride];
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeometry, img: &mut [T]) {
    let plane = g.plane();
    for ch in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ch * g.k + ky) * g.k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let base = ch * g.h * g.w + (oy * g.stride + ky) * g.w + kx;
                    for ox in 0..g.ow {
                        let at = base + ox * g.stride;
                        img[at] = img[at] + src[oy * g.ow + ox];
                    }
                }
            }
        }
    }
}

/// Batched convolution on raw buffers; returns `[B, O, OH, OW]`.
pub fn conv2d_forward<T: Scalar>(
    input: &[T],
    batch: usize,
    g: &ConvGeometry,
    kernels: &[T],
    out_channels: usize,
    bias: Option<&[T]>,
) -> Vec<T> {
    let in_len = g.c * g.h * g.w;
    let out_len = out_channels * g.plane();
    let mut out = vec![T::zero(); batch * out_len];
    out.par_chunks_mut(out_len).enumerate().for_each(|(b, dst)| {
        let mut cols = vec![T::zero(); g.patch() * g.plane()];
        im2col(&input[b * in_len..(b + 1) * in_len], g, &mut cols);
        gemm(
            T::one(),
            MatRef::new(kernels, out_channels, g.patch()),
            MatRef::new(&cols, g.patch(), g.plane()),
            T::zero(),
            MatMut::new(dst, out_channels, g.plane()),
        );
        if let Some(bias) = bias {
            for (ch, row) in dst.chunks_mut(g.plane()).enumerate() {
                for v in row {
                    *v = *v + bias[ch];
                }
            }
        }
    });
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    kernels: &Tensor<T>,
    gout: &[T],
    batch: usize,
    g: &ConvGeometry,
    out_channels: usize,
    need_input: bool,
    need_kernels: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let in_len = g.c * g.h * g.w;
    let out_len = out_channels * g.plane();
    let kmat = MatRef::new(kernels.data(), out_channels, g.patch());

    let gx = need_input.then(|| {
        let mut gx = vec![T::zero(); batch * in_len];
        gx.par_chunks_mut(in_len).enumerate().for_each(|(b, dst)| {
            let mut dcols = vec![T::zero(); g.patch() * g.plane()];
            gemm(
                T::one(),
                kmat.t(),
                MatRef::new(&gout[b * out_len..(b + 1) * out_len], out_channels, g.plane()),
                T::zero(),
                MatMut::new(&mut dcols, g.patch(), g.plane()),
            );
            col2im_add(&dcols, g, dst);
        });
        gx
    });

    let gk = need_kernels.then(|| {
        let chunks: Vec<usize> = (0..batch.div_ceil(REDUCE_CHUNK)).collect();
        let partials: Vec<Vec<T>> = chunks
            .par_iter()
            .map(|&ci| {
                let mut acc = vec![T::zero(); out_channels * g.patch()];
                let mut cols = vec![T::zero(); g.patch() * g.plane()];
                for b in ci * REDUCE_CHUNK..((ci + 1) * REDUCE_CHUNK).min(batch) {
                    im2col(&x.data()[b * in_len..(b + 1) * in_len], g, &mut cols);
                    gemm(
                        T::one(),
                        MatRef::new(&gout[b * out_len..(b + 1) * out_len], out_channels, g.plane()),
                        MatRef::new(&cols, g.patch(), g.plane()).t(),
                        T::one(),
                        MatMut::new(&mut acc, out_channels, g.patch()),
                    );
                }
                acc
            })
            .collect();
        let mut total = vec![T::zero(); out_channels * g.patch()];
        for p in partials {
            for (t, v) in total.iter_mut().zip(p) {
                *t = *t + v;
            }
        }
        total
    });
    (gx, gk)
}
