//! Layer primitives with explicit forward/backward passes.
//!
//! Each layer caches whatever its backward pass needs during forward; a
//! backward call consumes that cache, accumulates parameter gradients (when
//! enabled), and returns the gradient with respect to its input. Layers are
//! generic over the float type so gradient tests can run at 64-bit while
//! production stays at 32-bit.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayViewMutD, Axis, Dimension};
use rand::Rng;

use super::Scalar;

/// Mutable handles to one parameter tensor and its gradient accumulator,
/// used for optimizer steps, checksums, and serialization. The visit order
/// is fixed by each model's layer declaration order.
pub struct ParamVisit<'a, F> {
    pub name: String,
    pub value: ArrayViewMutD<'a, F>,
    pub grad: ArrayViewMutD<'a, F>,
}

/// Uniform Kaiming-style init bound: sqrt(6 / fan_in).
fn init_bound<F: Scalar>(fan_in: usize) -> F {
    F::from((6.0 / fan_in as f64).sqrt()).unwrap()
}

fn uniform_array<F: Scalar, R: Rng, Sh>(rng: &mut R, shape: Sh, bound: F) -> ndarray::Array<F, Sh::Dim>
where
    Sh: ndarray::ShapeBuilder,
{
    ndarray::Array::from_shape_simple_fn(shape, || rng.random_range(-bound..=bound))
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// 2-D convolution over `[C, H, W]` tensors via im2col + matmul, with zero
/// padding. Output size per axis: `(size + 2*pad - kernel) / stride + 1`.
pub struct Conv2d<F> {
    pub weight: Array4<F>, // [c_out, c_in, k, k]
    pub bias: Array1<F>,
    pub dweight: Array4<F>,
    pub dbias: Array1<F>,
    kernel: usize,
    stride: usize,
    pad: usize,
    param_grads: bool,
    cache: Option<ConvCache<F>>,
}

struct ConvCache<F> {
    cols: Array2<F>, // [c_in*k*k, oh*ow]
    in_h: usize,
    in_w: usize,
}

impl<F: Scalar> Conv2d<F> {
    pub fn new<R: Rng>(
        rng: &mut R,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let bound = init_bound::<F>(c_in * kernel * kernel);
        Self {
            weight: uniform_array(rng, (c_out, c_in, kernel, kernel), bound),
            bias: Array1::zeros(c_out),
            dweight: Array4::zeros((c_out, c_in, kernel, kernel)),
            dbias: Array1::zeros(c_out),
            kernel,
            stride,
            pad,
            param_grads: true,
            cache: None,
        }
    }

    pub fn set_param_grads(&mut self, on: bool) {
        self.param_grads = on;
    }

    pub fn zero_grad(&mut self) {
        self.dweight.fill(F::zero());
        self.dbias.fill(F::zero());
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &Array3<F>) -> Array2<F> {
        let (c_in, h, w) = x.dim();
        let (oh, ow) = self.out_size(h, w);
        let k = self.kernel;
        let mut cols = Array2::zeros((c_in * k * k, oh * ow));
        for ci in 0..c_in {
            for kr in 0..k {
                for kc in 0..k {
                    let row = (ci * k + kr) * k + kc;
                    for or in 0..oh {
                        // Input row for this kernel tap; `pad` shifts origin.
                        let ir = (or * self.stride + kr) as isize - self.pad as isize;
                        if ir < 0 || ir as usize >= h {
                            continue;
                        }
                        for oc in 0..ow {
                            let ic = (oc * self.stride + kc) as isize - self.pad as isize;
                            if ic < 0 || ic as usize >= w {
                                continue;
                            }
                            cols[[row, or * ow + oc]] = x[[ci, ir as usize, ic as usize]];
                        }
                    }
                }
            }
        }
        cols
    }

    pub fn forward(&mut self, x: &Array3<F>) -> Array3<F> {
        let (c_in, h, w) = x.dim();
        assert_eq!(c_in, self.weight.dim().1, "channel mismatch");
        let (oh, ow) = self.out_size(h, w);
        let c_out = self.weight.dim().0;
        let cols = self.im2col(x);
        let k = self.kernel;
        let w_mat = self
            .weight
            .view()
            .into_shape_with_order((c_out, c_in * k * k))
            .unwrap();
        let mut out_mat = w_mat.dot(&cols); // [c_out, oh*ow]
        for co in 0..c_out {
            let b = self.bias[co];
            out_mat.row_mut(co).mapv_inplace(|v| v + b);
        }
        self.cache = Some(ConvCache {
            cols,
            in_h: h,
            in_w: w,
        });
        out_mat.into_shape_with_order((c_out, oh, ow)).unwrap()
    }

    pub fn backward(&mut self, dy: &Array3<F>) -> Array3<F> {
        let cache = self.cache.take().expect("conv backward without forward");
        let (c_out, c_in, k, _) = self.weight.dim();
        let (oh, ow) = self.out_size(cache.in_h, cache.in_w);
        assert_eq!(dy.dim(), (c_out, oh, ow), "conv dy shape");
        let dy_mat = dy
            .view()
            .into_shape_with_order((c_out, oh * ow))
            .unwrap();

        if self.param_grads {
            // dot may return a column-major array when the RHS is a
            // transposed view, so reshape the accumulator instead.
            let dw_mat = dy_mat.dot(&cache.cols.t()); // [c_out, c_in*k*k]
            let mut dw_acc = self
                .dweight
                .view_mut()
                .into_shape_with_order((c_out, c_in * k * k))
                .unwrap();
            dw_acc += &dw_mat;
            self.dbias += &dy_mat.sum_axis(Axis(1));
        }

        let w_mat = self
            .weight
            .view()
            .into_shape_with_order((c_out, c_in * k * k))
            .unwrap();
        let dcols = w_mat.t().dot(&dy_mat); // [c_in*k*k, oh*ow]

        // col2im: scatter-add each kernel tap back into the input grid.
        let mut dx = Array3::zeros((c_in, cache.in_h, cache.in_w));
        for ci in 0..c_in {
            for kr in 0..k {
                for kc in 0..k {
                    let row = (ci * k + kr) * k + kc;
                    for or in 0..oh {
                        let ir = (or * self.stride + kr) as isize - self.pad as isize;
                        if ir < 0 || ir as usize >= cache.in_h {
                            continue;
                        }
                        for oc in 0..ow {
                            let ic = (oc * self.stride + kc) as isize - self.pad as isize;
                            if ic < 0 || ic as usize >= cache.in_w {
                                continue;
                            }
                            dx[[ci, ir as usize, ic as usize]] =
                                dx[[ci, ir as usize, ic as usize]] + dcols[[row, or * ow + oc]];
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn visit_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamVisit<'a, F>>) {
        out.push(ParamVisit {
            name: format!("{prefix}.weight"),
            value: self.weight.view_mut().into_dyn(),
            grad: self.dweight.view_mut().into_dyn(),
        });
        out.push(ParamVisit {
            name: format!("{prefix}.bias"),
            value: self.bias.view_mut().into_dyn(),
            grad: self.dbias.view_mut().into_dyn(),
        });
    }
}

// ---------------------------------------------------------------------------
// Pointwise and resampling ops
// ---------------------------------------------------------------------------

/// ReLU over tensors of any dimensionality; caches the activation mask.
pub struct Relu<D: Dimension> {
    mask: Option<ndarray::Array<bool, D>>,
}

impl<D: Dimension> Relu<D> {
    pub fn new() -> Self {
        Self { mask: None }
    }

    pub fn forward<F: Scalar>(&mut self, x: &ndarray::Array<F, D>) -> ndarray::Array<F, D> {
        self.mask = Some(x.mapv(|v| v > F::zero()));
        x.mapv(|v| if v > F::zero() { v } else { F::zero() })
    }

    pub fn backward<F: Scalar>(&mut self, dy: &ndarray::Array<F, D>) -> ndarray::Array<F, D> {
        let mask = self.mask.take().expect("relu backward without forward");
        let mut dx = dy.clone();
        ndarray::Zip::from(&mut dx).and(&mask).for_each(|d, &m| {
            if !m {
                *d = F::zero();
            }
        });
        dx
    }
}

/// Nearest-neighbor upsampling by an integer factor on `[C, H, W]`.
/// Backward sums gradients over each replicated block.
pub struct UpsampleNearest {
    pub factor: usize,
}

impl UpsampleNearest {
    pub fn forward<F: Scalar>(&self, x: &Array3<F>) -> Array3<F> {
        let (c, h, w) = x.dim();
        let f = self.factor;
        Array3::from_shape_fn((c, h * f, w * f), |(k, r, cidx)| x[[k, r / f, cidx / f]])
    }

    pub fn backward<F: Scalar>(&self, dy: &Array3<F>, in_h: usize, in_w: usize) -> Array3<F> {
        let (c, oh, ow) = dy.dim();
        let f = self.factor;
        assert_eq!((oh, ow), (in_h * f, in_w * f), "upsample dy shape");
        let mut dx = Array3::zeros((c, in_h, in_w));
        for k in 0..c {
            for r in 0..oh {
                for cidx in 0..ow {
                    dx[[k, r / f, cidx / f]] = dx[[k, r / f, cidx / f]] + dy[[k, r, cidx]];
                }
            }
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// Token ops (attention path)
// ---------------------------------------------------------------------------

/// Fully connected layer on token matrices `[T, in] -> [T, out]`.
pub struct Linear<F> {
    pub weight: Array2<F>, // [in, out]
    pub bias: Array1<F>,
    pub dweight: Array2<F>,
    pub dbias: Array1<F>,
    param_grads: bool,
    cache: Option<Array2<F>>, // input tokens
}

impl<F: Scalar> Linear<F> {
    pub fn new<R: Rng>(rng: &mut R, dim_in: usize, dim_out: usize) -> Self {
        let bound = init_bound::<F>(dim_in);
        Self {
            weight: uniform_array(rng, (dim_in, dim_out), bound),
            bias: Array1::zeros(dim_out),
            dweight: Array2::zeros((dim_in, dim_out)),
            dbias: Array1::zeros(dim_out),
            param_grads: true,
            cache: None,
        }
    }

    pub fn set_param_grads(&mut self, on: bool) {
        self.param_grads = on;
    }

    pub fn zero_grad(&mut self) {
        self.dweight.fill(F::zero());
        self.dbias.fill(F::zero());
    }

    pub fn forward(&mut self, x: &Array2<F>) -> Array2<F> {
        let y = x.dot(&self.weight) + &self.bias;
        self.cache = Some(x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Array2<F>) -> Array2<F> {
        let x = self.cache.take().expect("linear backward without forward");
        if self.param_grads {
            self.dweight += &x.t().dot(dy);
            self.dbias += &dy.sum_axis(Axis(0));
        }
        dy.dot(&self.weight.t())
    }

    pub fn visit_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamVisit<'a, F>>) {
        out.push(ParamVisit {
            name: format!("{prefix}.weight"),
            value: self.weight.view_mut().into_dyn(),
            grad: self.dweight.view_mut().into_dyn(),
        });
        out.push(ParamVisit {
            name: format!("{prefix}.bias"),
            value: self.bias.view_mut().into_dyn(),
            grad: self.dbias.view_mut().into_dyn(),
        });
    }
}

/// Per-token layer normalization over the feature axis of `[T, D]`.
pub struct LayerNorm<F> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
    pub dgamma: Array1<F>,
    pub dbeta: Array1<F>,
    eps: F,
    param_grads: bool,
    cache: Option<LnCache<F>>,
}

struct LnCache<F> {
    normalized: Array2<F>,
    inv_std: Array1<F>,
}

impl<F: Scalar> LayerNorm<F> {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
            dgamma: Array1::zeros(dim),
            dbeta: Array1::zeros(dim),
            eps: F::from(1e-5).unwrap(),
            param_grads: true,
            cache: None,
        }
    }

    pub fn set_param_grads(&mut self, on: bool) {
        self.param_grads = on;
    }

    pub fn zero_grad(&mut self) {
        self.dgamma.fill(F::zero());
        self.dbeta.fill(F::zero());
    }

    pub fn forward(&mut self, x: &Array2<F>) -> Array2<F> {
        let (t, d) = x.dim();
        let dim = F::from(d).unwrap();
        let mut normalized = Array2::zeros((t, d));
        let mut inv_std = Array1::zeros(t);
        for row in 0..t {
            let mut mean = F::zero();
            for col in 0..d {
                mean = mean + x[[row, col]];
            }
            mean = mean / dim;
            let mut var = F::zero();
            for col in 0..d {
                let diff = x[[row, col]] - mean;
                var = var + diff * diff;
            }
            var = var / dim;
            let istd = F::one() / (var + self.eps).sqrt();
            inv_std[row] = istd;
            for col in 0..d {
                normalized[[row, col]] = (x[[row, col]] - mean) * istd;
            }
        }
        let mut y = normalized.clone();
        for row in 0..t {
            for col in 0..d {
                y[[row, col]] = y[[row, col]] * self.gamma[col] + self.beta[col];
            }
        }
        self.cache = Some(LnCache {
            normalized,
            inv_std,
        });
        y
    }

    pub fn backward(&mut self, dy: &Array2<F>) -> Array2<F> {
        let cache = self.cache.take().expect("layernorm backward without forward");
        let (t, d) = dy.dim();
        let dim = F::from(d).unwrap();
        if self.param_grads {
            for row in 0..t {
                for col in 0..d {
                    self.dgamma[col] =
                        self.dgamma[col] + dy[[row, col]] * cache.normalized[[row, col]];
                    self.dbeta[col] = self.dbeta[col] + dy[[row, col]];
                }
            }
        }
        let mut dx = Array2::zeros((t, d));
        for row in 0..t {
            // dxhat = dy * gamma; dx = istd * (dxhat - mean(dxhat)
            //                                  - xhat * mean(dxhat * xhat))
            let mut mean_dxhat = F::zero();
            let mut mean_dxhat_xhat = F::zero();
            for col in 0..d {
                let dxhat = dy[[row, col]] * self.gamma[col];
                mean_dxhat = mean_dxhat + dxhat;
                mean_dxhat_xhat = mean_dxhat_xhat + dxhat * cache.normalized[[row, col]];
            }
            mean_dxhat = mean_dxhat / dim;
            mean_dxhat_xhat = mean_dxhat_xhat / dim;
            for col in 0..d {
                let dxhat = dy[[row, col]] * self.gamma[col];
                dx[[row, col]] = cache.inv_std[row]
                    * (dxhat - mean_dxhat - cache.normalized[[row, col]] * mean_dxhat_xhat);
            }
        }
        dx
    }

    pub fn visit_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamVisit<'a, F>>) {
        out.push(ParamVisit {
            name: format!("{prefix}.gamma"),
            value: self.gamma.view_mut().into_dyn(),
            grad: self.dgamma.view_mut().into_dyn(),
        });
        out.push(ParamVisit {
            name: format!("{prefix}.beta"),
            value: self.beta.view_mut().into_dyn(),
            grad: self.dbeta.view_mut().into_dyn(),
        });
    }
}

fn softmax_rows<F: Scalar>(scores: &Array2<F>) -> Array2<F> {
    let (t, u) = scores.dim();
    let mut out = Array2::zeros((t, u));
    for r in 0..t {
        let mut max = scores[[r, 0]];
        for c in 1..u {
            max = max.max(scores[[r, c]]);
        }
        let mut sum = F::zero();
        for c in 0..u {
            let e = (scores[[r, c]] - max).exp();
            out[[r, c]] = e;
            sum = sum + e;
        }
        for c in 0..u {
            out[[r, c]] = out[[r, c]] / sum;
        }
    }
    out
}

/// Multi-head self-attention on `[T, D]` tokens with a fused QKV projection
/// and an output projection.
pub struct MultiHeadAttention<F> {
    pub qkv: Linear<F>,
    pub proj: Linear<F>,
    heads: usize,
    cache: Option<AttnCache<F>>,
}

struct AttnCache<F> {
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    attn: Vec<Array2<F>>, // per head, [T, T]
}

impl<F: Scalar> MultiHeadAttention<F> {
    pub fn new<R: Rng>(rng: &mut R, dim: usize, heads: usize) -> Self {
        assert!(dim % heads == 0, "dim must divide evenly across heads");
        Self {
            qkv: Linear::new(rng, dim, 3 * dim),
            proj: Linear::new(rng, dim, dim),
            heads,
            cache: None,
        }
    }

    pub fn set_param_grads(&mut self, on: bool) {
        self.qkv.set_param_grads(on);
        self.proj.set_param_grads(on);
    }

    pub fn zero_grad(&mut self) {
        self.qkv.zero_grad();
        self.proj.zero_grad();
    }

    pub fn forward(&mut self, x: &Array2<F>) -> Array2<F> {
        let (t, d) = x.dim();
        let dk = d / self.heads;
        let scale = F::from(1.0 / (dk as f64).sqrt()).unwrap();
        let fused = self.qkv.forward(x); // [T, 3D]
        let q = fused.slice(s![.., 0..d]).to_owned();
        let k = fused.slice(s![.., d..2 * d]).to_owned();
        let v = fused.slice(s![.., 2 * d..3 * d]).to_owned();

        let mut context = Array2::zeros((t, d));
        let mut attn_maps = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let cols = head * dk..(head + 1) * dk;
            let qh = q.slice(s![.., cols.clone()]);
            let kh = k.slice(s![.., cols.clone()]);
            let vh = v.slice(s![.., cols.clone()]);
            let scores = qh.dot(&kh.t()).mapv(|v| v * scale);
            let attn = softmax_rows(&scores);
            let ctx = attn.dot(&vh);
            context.slice_mut(s![.., cols]).assign(&ctx);
            attn_maps.push(attn);
        }
        self.cache = Some(AttnCache {
            q,
            k,
            v,
            attn: attn_maps,
        });
        self.proj.forward(&context)
    }

    pub fn backward(&mut self, dy: &Array2<F>) -> Array2<F> {
        let cache = self.cache.take().expect("attention backward without forward");
        let (t, d) = dy.dim();
        let dk = d / self.heads;
        let scale = F::from(1.0 / (dk as f64).sqrt()).unwrap();
        let dcontext = self.proj.backward(dy);

        let mut dq = Array2::zeros((t, d));
        let mut dkm = Array2::zeros((t, d));
        let mut dv = Array2::zeros((t, d));
        for head in 0..self.heads {
            let cols = head * dk..(head + 1) * dk;
            let attn = &cache.attn[head];
            let qh = cache.q.slice(s![.., cols.clone()]);
            let kh = cache.k.slice(s![.., cols.clone()]);
            let vh = cache.v.slice(s![.., cols.clone()]);
            let dctx = dcontext.slice(s![.., cols.clone()]);

            let dattn = dctx.dot(&vh.t()); // [T, T]
            dv.slice_mut(s![.., cols.clone()])
                .assign(&attn.t().dot(&dctx));

            // Softmax backward per row: ds = a * (da - sum(da * a)).
            let mut dscores = Array2::zeros((t, t));
            for r in 0..t {
                let mut dot = F::zero();
                for c in 0..t {
                    dot = dot + dattn[[r, c]] * attn[[r, c]];
                }
                for c in 0..t {
                    dscores[[r, c]] = attn[[r, c]] * (dattn[[r, c]] - dot) * scale;
                }
            }
            dq.slice_mut(s![.., cols.clone()]).assign(&dscores.dot(&kh));
            dkm.slice_mut(s![.., cols]).assign(&dscores.t().dot(&qh));
        }

        let mut dfused = Array2::zeros((t, 3 * d));
        dfused.slice_mut(s![.., 0..d]).assign(&dq);
        dfused.slice_mut(s![.., d..2 * d]).assign(&dkm);
        dfused.slice_mut(s![.., 2 * d..3 * d]).assign(&dv);
        self.qkv.backward(&dfused)
    }

    pub fn visit_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamVisit<'a, F>>) {
        self.qkv.visit_params(&format!("{prefix}.qkv"), out);
        self.proj.visit_params(&format!("{prefix}.proj"), out);
    }
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Plain SGD with classical momentum: `v = mu*v + g; w -= lr*v`.
/// Velocity buffers are allocated on first step, keyed by visit order.
pub struct Sgd<F> {
    pub lr: F,
    pub momentum: F,
    velocity: Vec<ndarray::ArrayD<F>>,
}

impl<F: Scalar> Sgd<F> {
    pub fn new(lr: F, momentum: F) -> Self {
        Self {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [ParamVisit<'_, F>]) {
        if self.velocity.is_empty() {
            self.velocity = params
                .iter()
                .map(|p| ndarray::ArrayD::zeros(p.value.raw_dim()))
                .collect();
        }
        assert_eq!(self.velocity.len(), params.len(), "parameter set changed");
        for (slot, p) in self.velocity.iter_mut().zip(params.iter_mut()) {
            ndarray::Zip::from(&mut *slot)
                .and(&p.grad)
                .for_each(|v, &g| *v = *v * self.momentum + g);
            ndarray::Zip::from(&mut p.value)
                .and(&*slot)
                .for_each(|w, &v| *w = *w - self.lr * v);
        }
    }
}
