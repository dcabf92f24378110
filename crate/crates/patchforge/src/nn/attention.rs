//! Attention-based toy segmenter: non-overlapping 8x8 patch embedding,
//! fixed 2-D sinusoidal position encoding, two pre-norm self-attention
//! blocks, and a linear per-token classifier whose logits are nearest-
//! upsampled back to input resolution.
//!
//! Unlike the convolutional model, every token attends to every other
//! token, so a single perturbed input pixel can move logits arbitrarily far
//! away — the global-receptive-field half of the locality contrast.

use ndarray::{s, Array2, Array3, Ix2};
use rand::rngs::StdRng;
use rand::SeedableRng;

use super::ops::{Conv2d, LayerNorm, Linear, MultiHeadAttention, ParamVisit, Relu, UpsampleNearest};
use super::{pad_to_multiple, Scalar};

const PATCH: usize = 8;

struct Block<F> {
    ln1: LayerNorm<F>,
    attn: MultiHeadAttention<F>,
    ln2: LayerNorm<F>,
    fc1: Linear<F>,
    relu: Relu<Ix2>,
    fc2: Linear<F>,
}

impl<F: Scalar> Block<F> {
    fn new(rng: &mut StdRng, dim: usize, heads: usize) -> Self {
        Self {
            ln1: LayerNorm::new(dim),
            attn: MultiHeadAttention::new(rng, dim, heads),
            ln2: LayerNorm::new(dim),
            fc1: Linear::new(rng, dim, 2 * dim),
            relu: Relu::new(),
            fc2: Linear::new(rng, 2 * dim, dim),
        }
    }

    fn forward(&mut self, x: &Array2<F>) -> Array2<F> {
        let attended = x + &self.attn.forward(&self.ln1.forward(x));
        let hidden = self.relu.forward(&self.fc1.forward(&self.ln2.forward(&attended)));
        &attended + &self.fc2.forward(&hidden)
    }

    fn backward(&mut self, dy: &Array2<F>) -> Array2<F> {
        // Residual 2: y = a + mlp(ln2(a)).
        let dh = self.fc2.backward(dy);
        let d_ln2 = self.fc1.backward(&self.relu.backward(&dh));
        let da = dy + &self.ln2.backward(&d_ln2);
        // Residual 1: a = x + attn(ln1(x)).
        let d_ln1 = self.attn.backward(&da);
        &da + &self.ln1.backward(&d_ln1)
    }

    fn zero_grad(&mut self) {
        self.ln1.zero_grad();
        self.attn.zero_grad();
        self.ln2.zero_grad();
        self.fc1.zero_grad();
        self.fc2.zero_grad();
    }

    fn set_param_grads(&mut self, on: bool) {
        self.ln1.set_param_grads(on);
        self.attn.set_param_grads(on);
        self.ln2.set_param_grads(on);
        self.fc1.set_param_grads(on);
        self.fc2.set_param_grads(on);
    }

    fn visit_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamVisit<'a, F>>) {
        self.ln1.visit_params(&format!("{prefix}.ln1"), out);
        self.attn.visit_params(&format!("{prefix}.attn"), out);
        self.ln2.visit_params(&format!("{prefix}.ln2"), out);
        self.fc1.visit_params(&format!("{prefix}.fc1"), out);
        self.fc2.visit_params(&format!("{prefix}.fc2"), out);
    }
}

pub struct TinyAttention<F> {
    embed: Conv2d<F>, // 3 -> dim, kernel 8, stride 8
    blocks: Vec<Block<F>>,
    head: Linear<F>, // dim -> C per token
    up: UpsampleNearest,
    dim: usize,
    num_classes: usize,
    dims: Option<FwdDims>,
}

struct FwdDims {
    in_h: usize,
    in_w: usize,
    pad_h: usize,
    pad_w: usize,
    grid_h: usize,
    grid_w: usize,
}

impl<F: Scalar> TinyAttention<F> {
    pub fn new(num_classes: usize, dim: usize, seed: u64) -> Self {
        assert!(num_classes >= 2, "need at least 2 classes");
        assert!(dim % 4 == 0, "embed dim must be a multiple of 4");
        let heads = if dim % 4 == 0 && dim >= 16 { 4 } else { 2 };
        let mut rng = StdRng::seed_from_u64(seed);
        let embed = Conv2d::new(&mut rng, 3, dim, PATCH, PATCH, 0);
        let blocks = (0..2).map(|_| Block::new(&mut rng, dim, heads)).collect();
        let head = Linear::new(&mut rng, dim, num_classes);
        Self {
            embed,
            blocks,
            head,
            up: UpsampleNearest { factor: PATCH },
            dim,
            num_classes,
            dims: None,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Fixed 2-D sinusoidal position encoding: the first half of the
    /// feature vector encodes the token row, the second half the column,
    /// each as interleaved sin/cos at geometrically spaced frequencies.
    /// Purely positional — valid for any grid size, which is what lets a
    /// model trained on 128x128 crops run on 128x256 images.
    fn position_encoding(grid_h: usize, grid_w: usize, dim: usize) -> Array2<F> {
        let half = dim / 2;
        let mut pe = Array2::zeros((grid_h * grid_w, dim));
        for r in 0..grid_h {
            for c in 0..grid_w {
                let t = r * grid_w + c;
                for i in 0..half / 2 {
                    let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / half as f64);
                    let row_angle = r as f64 * freq;
                    let col_angle = c as f64 * freq;
                    pe[[t, 2 * i]] = F::from(row_angle.sin()).unwrap();
                    pe[[t, 2 * i + 1]] = F::from(row_angle.cos()).unwrap();
                    pe[[t, half + 2 * i]] = F::from(col_angle.sin()).unwrap();
                    pe[[t, half + 2 * i + 1]] = F::from(col_angle.cos()).unwrap();
                }
            }
        }
        pe
    }

    /// Logits `[C, h, w]` for an image `[3, h, w]`; non-multiple-of-8 inputs
    /// are zero-padded internally and the logits cropped back.
    pub fn forward(&mut self, x: &Array3<F>) -> Array3<F> {
        let (c, h, w) = x.dim();
        assert_eq!(c, 3, "expected RGB input");
        let (ph, pw) = (pad_to_multiple(h, PATCH), pad_to_multiple(w, PATCH));
        let mut padded = Array3::zeros((3, ph, pw));
        padded.slice_mut(s![.., ..h, ..w]).assign(x);

        let emb = self.embed.forward(&padded); // [dim, gh, gw]
        let (dim, gh, gw) = emb.dim();
        let tokens_t = emb.into_shape_with_order((dim, gh * gw)).unwrap();
        let mut tokens = tokens_t.t().to_owned(); // [T, dim]
        tokens += &Self::position_encoding(gh, gw, dim);

        let mut x2 = tokens;
        for block in &mut self.blocks {
            x2 = block.forward(&x2);
        }
        let logits_tok = self.head.forward(&x2); // [T, C]

        let grid = Array3::from_shape_fn((self.num_classes, gh, gw), |(k, r, cidx)| {
            logits_tok[[r * gw + cidx, k]]
        });
        let zu = self.up.forward(&grid);
        self.dims = Some(FwdDims {
            in_h: h,
            in_w: w,
            pad_h: ph,
            pad_w: pw,
            grid_h: gh,
            grid_w: gw,
        });
        zu.slice(s![.., ..h, ..w]).to_owned()
    }

    pub fn backward(&mut self, dlogits: &Array3<F>) -> Array3<F> {
        let dims = self.dims.take().expect("backward without forward");
        let (c, h, w) = dlogits.dim();
        assert_eq!((c, h, w), (self.num_classes, dims.in_h, dims.in_w));
        let mut dzu = Array3::zeros((self.num_classes, dims.pad_h, dims.pad_w));
        dzu.slice_mut(s![.., ..h, ..w]).assign(dlogits);

        let dgrid = self.up.backward(&dzu, dims.grid_h, dims.grid_w);
        let t = dims.grid_h * dims.grid_w;
        let dtok_logits = Array2::from_shape_fn((t, self.num_classes), |(tok, k)| {
            dgrid[[k, tok / dims.grid_w, tok % dims.grid_w]]
        });
        let mut dx2 = self.head.backward(&dtok_logits);
        for block in self.blocks.iter_mut().rev() {
            dx2 = block.backward(&dx2);
        }
        // Position encoding is additive and constant: gradient passes through.
        let demb = Array3::from_shape_fn((self.dim, dims.grid_h, dims.grid_w), |(d, r, cidx)| {
            dx2[[r * dims.grid_w + cidx, d]]
        });
        let dpadded = self.embed.backward(&demb);
        dpadded.slice(s![.., ..h, ..w]).to_owned()
    }

    pub fn zero_grad(&mut self) {
        self.embed.zero_grad();
        for block in &mut self.blocks {
            block.zero_grad();
        }
        self.head.zero_grad();
    }

    pub fn set_param_grads(&mut self, on: bool) {
        self.embed.set_param_grads(on);
        for block in &mut self.blocks {
            block.set_param_grads(on);
        }
        self.head.set_param_grads(on);
    }

    pub fn visit_params(&mut self) -> Vec<ParamVisit<'_, F>> {
        let mut out = Vec::new();
        self.embed.visit_params("embed", &mut out);
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.visit_params(&format!("block{i}"), &mut out);
        }
        self.head.visit_params("head", &mut out);
        out
    }
}
