//! Convolutional toy segmenter: a four-stage encoder (stride-2 down to 1/8
//! resolution, with a second conv at the bottleneck to widen the receptive
//! field), a two-stage nearest-upsample decoder, and a 1x1 classifier head
//! at half resolution whose logits are upsampled to full resolution.
//!
//! The architecture is intentionally *local*: its receptive field spans at
//! most [`TinyCnn::receptive_radius`] input pixels, so an adversarial patch
//! can only disturb predictions in a bounded neighborhood — the contrast to
//! the globally-connected attention model.

use ndarray::{s, Array3, Ix3};
use rand::rngs::StdRng;
use rand::SeedableRng;

use super::ops::{Conv2d, ParamVisit, Relu, UpsampleNearest};
use super::{pad_to_multiple, Scalar};

pub struct TinyCnn<F> {
    stem: Conv2d<F>,  // 3 -> w,  stride 1
    enc1: Conv2d<F>,  // w -> 2w, stride 2
    enc2: Conv2d<F>,  // 2w -> 4w, stride 2
    enc3a: Conv2d<F>, // 4w -> 4w, stride 2
    enc3b: Conv2d<F>, // 4w -> 4w, stride 1 (bottleneck)
    dec1: Conv2d<F>,  // 4w -> 2w, stride 1 after 2x upsample
    dec2: Conv2d<F>,  // 2w -> w,  stride 1 after 2x upsample
    head: Conv2d<F>,  // w -> C, 1x1
    relu_stem: Relu<Ix3>,
    relu_enc1: Relu<Ix3>,
    relu_enc2: Relu<Ix3>,
    relu_enc3a: Relu<Ix3>,
    relu_enc3b: Relu<Ix3>,
    relu_dec1: Relu<Ix3>,
    relu_dec2: Relu<Ix3>,
    up: UpsampleNearest,
    num_classes: usize,
    width: usize,
    dims: Option<FwdDims>,
}

struct FwdDims {
    in_h: usize,
    in_w: usize,
    pad_h: usize,
    pad_w: usize,
}

impl<F: Scalar> TinyCnn<F> {
    pub fn new(num_classes: usize, width: usize, seed: u64) -> Self {
        assert!(num_classes >= 2, "need at least 2 classes");
        assert!(width >= 1, "width must be >= 1");
        let mut rng = StdRng::seed_from_u64(seed);
        let w = width;
        Self {
            stem: Conv2d::new(&mut rng, 3, w, 3, 1, 1),
            enc1: Conv2d::new(&mut rng, w, 2 * w, 3, 2, 1),
            enc2: Conv2d::new(&mut rng, 2 * w, 4 * w, 3, 2, 1),
            enc3a: Conv2d::new(&mut rng, 4 * w, 4 * w, 3, 2, 1),
            enc3b: Conv2d::new(&mut rng, 4 * w, 4 * w, 3, 1, 1),
            dec1: Conv2d::new(&mut rng, 4 * w, 2 * w, 3, 1, 1),
            dec2: Conv2d::new(&mut rng, 2 * w, w, 3, 1, 1),
            head: Conv2d::new(&mut rng, w, num_classes, 1, 1, 0),
            relu_stem: Relu::new(),
            relu_enc1: Relu::new(),
            relu_enc2: Relu::new(),
            relu_enc3a: Relu::new(),
            relu_enc3b: Relu::new(),
            relu_dec1: Relu::new(),
            relu_dec2: Relu::new(),
            up: UpsampleNearest { factor: 2 },
            num_classes,
            width,
            dims: None,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Upper bound on how far (in input pixels, Chebyshev) a single input
    /// perturbation can reach in the logits: the conv taps contribute
    /// sum(stride * floor(kernel/2)) = 1+1+2+4+8+4+2 = 22, and the three
    /// nearest upsamplings add at most stride-1 = 7 pixels of alignment
    /// slack.
    pub fn receptive_radius(&self) -> usize {
        29
    }

    /// Logits `[C, h, w]` for an image `[3, h, w]`. Inputs that are not a
    /// multiple of 8 are zero-padded bottom/right internally and the logits
    /// cropped back, so the output always matches the input spatially.
    pub fn forward(&mut self, x: &Array3<F>) -> Array3<F> {
        let (c, h, w) = x.dim();
        assert_eq!(c, 3, "expected RGB input");
        let (ph, pw) = (pad_to_multiple(h, 8), pad_to_multiple(w, 8));
        let mut padded = Array3::zeros((3, ph, pw));
        padded.slice_mut(s![.., ..h, ..w]).assign(x);

        let t0 = self.relu_stem.forward(&self.stem.forward(&padded));
        let t1 = self.relu_enc1.forward(&self.enc1.forward(&t0));
        let t2 = self.relu_enc2.forward(&self.enc2.forward(&t1));
        let t3 = self.relu_enc3a.forward(&self.enc3a.forward(&t2));
        let t4 = self.relu_enc3b.forward(&self.enc3b.forward(&t3));
        let u1 = self.up.forward(&t4);
        let t5 = self.relu_dec1.forward(&self.dec1.forward(&u1));
        let u2 = self.up.forward(&t5);
        let t6 = self.relu_dec2.forward(&self.dec2.forward(&u2));
        let z = self.head.forward(&t6);
        let zu = self.up.forward(&z);

        self.dims = Some(FwdDims {
            in_h: h,
            in_w: w,
            pad_h: ph,
            pad_w: pw,
        });
        zu.slice(s![.., ..h, ..w]).to_owned()
    }

    /// Input gradient `[3, h, w]` for upstream logits gradient `[C, h, w]`.
    /// Parameter gradients accumulate into the layers unless disabled via
    /// [`TinyCnn::set_param_grads`].
    pub fn backward(&mut self, dlogits: &Array3<F>) -> Array3<F> {
        let dims = self.dims.take().expect("backward without forward");
        let (c, h, w) = dlogits.dim();
        assert_eq!((c, h, w), (self.num_classes, dims.in_h, dims.in_w));
        let mut dzu = Array3::zeros((self.num_classes, dims.pad_h, dims.pad_w));
        dzu.slice_mut(s![.., ..h, ..w]).assign(dlogits);

        let dz = self.up.backward(&dzu, dims.pad_h / 2, dims.pad_w / 2);
        let dt6 = self.head.backward(&dz);
        let du2 = self.dec2.backward(&self.relu_dec2.backward(&dt6));
        let dt5 = self.up.backward(&du2, dims.pad_h / 4, dims.pad_w / 4);
        let du1 = self.dec1.backward(&self.relu_dec1.backward(&dt5));
        let dt4 = self.up.backward(&du1, dims.pad_h / 8, dims.pad_w / 8);
        let dt3 = self.enc3b.backward(&self.relu_enc3b.backward(&dt4));
        let dt2 = self.enc3a.backward(&self.relu_enc3a.backward(&dt3));
        let dt1 = self.enc2.backward(&self.relu_enc2.backward(&dt2));
        let dt0 = self.enc1.backward(&self.relu_enc1.backward(&dt1));
        let dpadded = self.stem.backward(&self.relu_stem.backward(&dt0));
        dpadded.slice(s![.., ..h, ..w]).to_owned()
    }

    pub fn zero_grad(&mut self) {
        for conv in [
            &mut self.stem,
            &mut self.enc1,
            &mut self.enc2,
            &mut self.enc3a,
            &mut self.enc3b,
            &mut self.dec1,
            &mut self.dec2,
            &mut self.head,
        ] {
            conv.zero_grad();
        }
    }

    pub fn set_param_grads(&mut self, on: bool) {
        for conv in [
            &mut self.stem,
            &mut self.enc1,
            &mut self.enc2,
            &mut self.enc3a,
            &mut self.enc3b,
            &mut self.dec1,
            &mut self.dec2,
            &mut self.head,
        ] {
            conv.set_param_grads(on);
        }
    }

    pub fn visit_params(&mut self) -> Vec<ParamVisit<'_, F>> {
        let mut out = Vec::new();
        self.stem.visit_params("stem", &mut out);
        self.enc1.visit_params("enc1", &mut out);
        self.enc2.visit_params("enc2", &mut out);
        self.enc3a.visit_params("enc3a", &mut out);
        self.enc3b.visit_params("enc3b", &mut out);
        self.dec1.visit_params("dec1", &mut out);
        self.dec2.visit_params("dec2", &mut out);
        self.head.visit_params("head", &mut out);
        out
    }
}
