//! QP-conditioned enhancement module and the full generator.
//!
//! The enhancer is an encoder-decoder with two stride-2 stages around a
//! trunk of nine residual blocks. Each block embeds the one-hot QP code
//! through a fully connected layer with softplus activation and multiplies
//! the resulting positive scale vector channel-wise into the features
//! between the first convolution and its ReLU. One parameter set serves
//! every supported QP.

use ndarray::{Array2, Array4};
use rand::Rng;

use crate::align::{triplets_to_tensor, AlignedFeature, DeformAlign, DeformAlignCache};
use crate::config::{AlignBackend, GeneratorConfig, RES_BLOCKS};
use crate::error::{Error, Result};
use crate::flow::{FlowAlign, FlowAlignCache};
use crate::frame::{FrameTriplet, LumaFrame, QpCode};
use crate::nn::{
    crop_hw, leaky_relu, leaky_relu_backward, reflect_pad_hw, reflect_pad_hw_backward, relu, relu_backward,
    sigmoid, sigmoid_backward, softplus, softplus_backward, upsample2_bilinear, upsample2_bilinear_backward,
    zero_pad_grad_hw, BatchNorm2d, BatchNorm2dCache, Conv2d, Conv2dCache, Grads, Linear, LinearCache, Mode,
    Params, Scalar,
};

/// Re-export: one-hot encode a supported QP.
pub fn encode_qp(qp: u8) -> Result<QpCode> {
    QpCode::encode(qp)
}

/// Stack one-hot codes into `[n, 4]`.
pub fn codes_to_tensor<F: Scalar>(codes: &[QpCode]) -> Array2<F> {
    let mut out = Array2::<F>::zeros((codes.len(), codes[0].len()));
    for (i, c) in codes.iter().enumerate() {
        out[[i, c.hot_index()]] = F::one();
    }
    out
}

/// Positive per-channel scales from a QP code: `softplus(FC(code))`.
pub fn qp_scales<F: Scalar>(fc: &Linear, p: &Params<F>, code: &QpCode) -> Vec<F> {
    let x = codes_to_tensor::<F>(std::slice::from_ref(code));
    let (pre, _) = fc.forward(p, &x);
    softplus(&pre).row(0).to_vec()
}

/// One QP-modulated residual block.
#[derive(Debug, Clone)]
pub struct ModResBlock {
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    /// Block-owned QP embedding; `None` when the enhancer shares one.
    pub fc: Option<Linear>,
    modulate_before_bn: bool,
}

pub struct ModResBlockCache<F> {
    conv1: Conv2dCache<F>,
    bn1: BatchNorm2dCache<F>,
    /// Features right before the channel scaling.
    mod_in: Array4<F>,
    /// Features right before the ReLU.
    pre_relu: Array4<F>,
    conv2: Conv2dCache<F>,
    scales: Array2<F>,
    fc_pre: Array2<F>,
    fc_cache: LinearCache<F>,
}

impl ModResBlock {
    fn new<F: Scalar, R: Rng>(
        params: &mut Params<F>,
        rng: &mut R,
        name: &str,
        channels: usize,
        qp_len: usize,
        own_fc: bool,
        modulate_before_bn: bool,
    ) -> Self {
        ModResBlock {
            conv1: Conv2d::new(params, rng, &format!("{name}.conv1"), channels, channels, 3, 1, 1),
            bn1: BatchNorm2d::new(params, &format!("{name}.bn1"), channels),
            conv2: Conv2d::new(params, rng, &format!("{name}.conv2"), channels, channels, 3, 1, 1),
            fc: own_fc.then(|| Linear::new(params, rng, &format!("{name}.fc"), qp_len, channels)),
            modulate_before_bn,
        }
    }

    fn fc_layer<'a>(&'a self, shared: Option<&'a Linear>) -> &'a Linear {
        self.fc.as_ref().or(shared).expect("block has no FC layer")
    }

    /// `out = feat + conv2(relu(scale(bn(conv1(feat)))))` with the scale
    /// vector from the QP code (order of bn/scale per config).
    pub fn forward<F: Scalar>(
        &self,
        p: &Params<F>,
        feat: &Array4<F>,
        codes: &Array2<F>,
        shared_fc: Option<&Linear>,
        mode: Mode,
    ) -> (Array4<F>, ModResBlockCache<F>) {
        let fc = self.fc_layer(shared_fc);
        let (fc_pre, fc_cache) = fc.forward(p, codes);
        let scales = softplus(&fc_pre);

        let (h1, conv1) = self.conv1.forward(p, feat);
        let (mod_in, bn1, pre_relu) = if self.modulate_before_bn {
            let scaled = scale_channels(&h1, &scales);
            let (bn_out, bn1) = self.bn1.forward(p, &scaled, mode);
            (h1, bn1, bn_out)
        } else {
            let (bn_out, bn1) = self.bn1.forward(p, &h1, mode);
            let scaled = scale_channels(&bn_out, &scales);
            (bn_out, bn1, scaled)
        };
        let act = relu(&pre_relu);
        let (h2, conv2) = self.conv2.forward(p, &act);
        let out = feat + &h2;
        (
            out,
            ModResBlockCache {
                conv1,
                bn1,
                mod_in,
                pre_relu,
                conv2,
                scales,
                fc_pre,
                fc_cache,
            },
        )
    }

    pub fn backward<F: Scalar>(
        &self,
        p: &Params<F>,
        cache: &ModResBlockCache<F>,
        dy: &Array4<F>,
        shared_fc: Option<&Linear>,
        mut grads: Option<&mut Grads<F>>,
    ) -> Array4<F> {
        let fc = self.fc_layer(shared_fc);
        let act = relu(&cache.pre_relu);
        let _ = act;
        let d_h2 = dy;
        let d_act = self.conv2.backward(p, &cache.conv2, d_h2, grads.as_deref_mut());
        let d_pre_relu = relu_backward(&cache.pre_relu, &d_act);

        let (d_feat_path, d_scales) = if self.modulate_before_bn {
            // pre_relu = bn(scale(conv1)); mod_in = conv1 output
            let d_scaled = self.bn1.backward(p, &cache.bn1, &d_pre_relu, grads.as_deref_mut());
            let d_h1 = scale_channels_backward_input(&d_scaled, &cache.scales);
            let d_scales = scale_channels_backward_scales(&d_scaled, &cache.mod_in);
            (
                self.conv1.backward(p, &cache.conv1, &d_h1, grads.as_deref_mut()),
                d_scales,
            )
        } else {
            // pre_relu = scale(bn(conv1)); mod_in = bn output
            let d_bn_out = scale_channels_backward_input(&d_pre_relu, &cache.scales);
            let d_scales = scale_channels_backward_scales(&d_pre_relu, &cache.mod_in);
            let d_h1 = self.bn1.backward(p, &cache.bn1, &d_bn_out, grads.as_deref_mut());
            (
                self.conv1.backward(p, &cache.conv1, &d_h1, grads.as_deref_mut()),
                d_scales,
            )
        };

        let d_fc_pre = softplus_backward(&cache.fc_pre, &d_scales);
        fc.backward(p, &cache.fc_cache, &d_fc_pre, grads);

        dy + &d_feat_path
    }

    fn update_running<F: Scalar>(&self, p: &mut Params<F>, cache: &ModResBlockCache<F>, batch_elems: usize) {
        self.bn1.update_running(p, &cache.bn1, batch_elems);
    }
}

fn scale_channels<F: Scalar>(x: &Array4<F>, scales: &Array2<F>) -> Array4<F> {
    let mut y = x.clone();
    let (n, c, _, _) = x.dim();
    for ni in 0..n {
        for ci in 0..c {
            let s = scales[[ni, ci]];
            y.slice_mut(ndarray::s![ni, ci, .., ..]).mapv_inplace(|v| v * s);
        }
    }
    y
}

fn scale_channels_backward_input<F: Scalar>(dy: &Array4<F>, scales: &Array2<F>) -> Array4<F> {
    scale_channels(dy, scales)
}

fn scale_channels_backward_scales<F: Scalar>(dy: &Array4<F>, x: &Array4<F>) -> Array2<F> {
    let (n, c, _, _) = dy.dim();
    let mut out = Array2::<F>::zeros((n, c));
    for ni in 0..n {
        for ci in 0..c {
            let d = dy.slice(ndarray::s![ni, ci, .., ..]);
            let xv = x.slice(ndarray::s![ni, ci, .., ..]);
            out[[ni, ci]] = d.iter().zip(xv.iter()).map(|(&a, &b)| a * b).sum();
        }
    }
    out
}

/// Encoder-decoder enhancement module `E(z, q)`.
#[derive(Debug, Clone)]
pub struct Enhancer {
    pub cfg: GeneratorConfig,
    enc_in: EncPair,
    down1: EncPair,
    down2: EncPair,
    blocks: Vec<ModResBlock>,
    shared_fc: Option<Linear>,
    up1: EncPair,
    up2: EncPair,
    head: Conv2d,
}

/// Conv + BatchNorm + LeakyReLU(0.2) stage.
#[derive(Debug, Clone)]
struct EncPair(ConvBnActInner);

#[derive(Debug, Clone)]
struct ConvBnActInner {
    conv: Conv2d,
    bn: BatchNorm2d,
}

pub struct EnhancerCache<F> {
    in_dims: (usize, usize),
    padded_dims: (usize, usize),
    enc_in: ConvBnActCacheI<F>,
    down1: ConvBnActCacheI<F>,
    down2: ConvBnActCacheI<F>,
    blocks: Vec<ModResBlockCache<F>>,
    up1: (usize, usize, ConvBnActCacheI<F>),
    up2: (usize, usize, ConvBnActCacheI<F>),
    head: Conv2dCache<F>,
    squash_out: Array4<F>,
}

struct ConvBnActCacheI<F> {
    conv: Conv2dCache<F>,
    bn: BatchNorm2dCache<F>,
    preact: Array4<F>,
}

impl EncPair {
    fn new<F: Scalar, R: Rng>(
        params: &mut Params<F>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        EncPair(ConvBnActInner {
            conv: Conv2d::new(params, rng, &format!("{name}.conv"), cin, cout, k, stride, k / 2),
            bn: BatchNorm2d::new(params, &format!("{name}.bn"), cout),
        })
    }

    fn forward<F: Scalar>(&self, p: &Params<F>, x: &Array4<F>, mode: Mode) -> (Array4<F>, ConvBnActCacheI<F>) {
        let (h, conv) = self.0.conv.forward(p, x);
        let (preact, bn) = self.0.bn.forward(p, &h, mode);
        let y = leaky_relu(&preact, F::from_f64(0.2));
        (y, ConvBnActCacheI { conv, bn, preact })
    }

    fn backward<F: Scalar>(
        &self,
        p: &Params<F>,
        cache: &ConvBnActCacheI<F>,
        dy: &Array4<F>,
        mut grads: Option<&mut Grads<F>>,
    ) -> Array4<F> {
        let d_pre = leaky_relu_backward(&cache.preact, dy, F::from_f64(0.2));
        let d_h = self.0.bn.backward(p, &cache.bn, &d_pre, grads.as_deref_mut());
        self.0.conv.backward(p, &cache.conv, &d_h, grads)
    }

    fn update_running<F: Scalar>(&self, p: &mut Params<F>, cache: &ConvBnActCacheI<F>, batch_elems: usize) {
        self.0.bn.update_running(p, &cache.bn, batch_elems);
    }
}

impl Enhancer {
    pub fn new<F: Scalar, R: Rng>(params: &mut Params<F>, rng: &mut R, name: &str, cfg: &GeneratorConfig) -> Self {
        let c0 = cfg.enc_base;
        let cr = cfg.trunk_channels();
        let qp_len = cfg.qp_set.len().max(crate::frame::QP_SET.len());
        let enc_in = EncPair::new(params, rng, &format!("{name}.enc_in"), cfg.aligned_channels, c0, cfg.enc_kernel, 1);
        let down1 = EncPair::new(params, rng, &format!("{name}.down1"), c0, c0 * 2, 3, 2);
        let down2 = EncPair::new(params, rng, &format!("{name}.down2"), c0 * 2, cr, 3, 2);
        let shared_fc = cfg
            .share_fc
            .then(|| Linear::new(params, rng, &format!("{name}.shared_fc"), qp_len, cr));
        let blocks = (0..RES_BLOCKS)
            .map(|i| {
                ModResBlock::new(
                    params,
                    rng,
                    &format!("{name}.block{i}"),
                    cr,
                    qp_len,
                    !cfg.share_fc,
                    cfg.modulate_before_bn,
                )
            })
            .collect();
        let up1 = EncPair::new(params, rng, &format!("{name}.up1"), cr, c0 * 2, 3, 1);
        let up2 = EncPair::new(params, rng, &format!("{name}.up2"), c0 * 2, c0, 3, 1);
        let head = Conv2d::new(params, rng, &format!("{name}.head"), c0, 1, 3, 1, 1);
        Enhancer {
            cfg: cfg.clone(),
            enc_in,
            down1,
            down2,
            blocks,
            shared_fc,
            up1,
            up2,
            head,
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn block(&self, i: usize) -> &ModResBlock {
        &self.blocks[i]
    }

    pub fn shared_fc(&self) -> Option<&Linear> {
        self.shared_fc.as_ref()
    }

    /// Enhance an aligned representation conditioned on QP codes.
    /// `skip` is the center input frame, used only with `global_skip`.
    pub fn forward<F: Scalar>(
        &self,
        p: &Params<F>,
        z: &Array4<F>,
        codes: &Array2<F>,
        skip: Option<&Array4<F>>,
        mode: Mode,
    ) -> (Array4<F>, EnhancerCache<F>) {
        let (_, _, h, w) = z.dim();
        let (zp, _) = reflect_pad_hw(z, 4);
        let padded_dims = (zp.dim().2, zp.dim().3);

        let (e0, enc_in) = self.enc_in.forward(p, &zp, mode);
        let (e1, down1) = self.down1.forward(p, &e0, mode);
        let (e2, down2) = self.down2.forward(p, &e1, mode);

        let mut cur = e2;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (next, cache) = b.forward(p, &cur, codes, self.shared_fc.as_ref(), mode);
            blocks.push(cache);
            cur = next;
        }

        let d1_dims = (cur.dim().2, cur.dim().3);
        let u1 = upsample2_bilinear(&cur);
        let (u1o, up1) = self.up1.forward(p, &u1, mode);
        let d2_dims = (u1o.dim().2, u1o.dim().3);
        let u2 = upsample2_bilinear(&u1o);
        let (u2o, up2) = self.up2.forward(p, &u2, mode);

        let (mut logit, head) = self.head.forward(p, &u2o);
        if let (true, Some(s)) = (self.cfg.global_skip, skip) {
            // residual prediction in logit space keeps the output in [0,1]
            let sp = reflect_pad_hw(s, 4).0;
            let eps = F::from_f64(1e-4);
            let one = F::one();
            logit += &sp.mapv(|v| {
                let v = v.max(eps).min(one - eps);
                (v / (one - v)).ln()
            });
        }
        let squashed = sigmoid(&logit);
        let out = crop_hw(&squashed, h, w);
        (
            out,
            EnhancerCache {
                in_dims: (h, w),
                padded_dims,
                enc_in,
                down1,
                down2,
                blocks,
                up1: (d1_dims.0, d1_dims.1, up1),
                up2: (d2_dims.0, d2_dims.1, up2),
                head,
                squash_out: squashed,
            },
        )
    }

    /// Backward from enhanced-frame gradients to aligned-feature gradients.
    pub fn backward<F: Scalar>(
        &self,
        p: &Params<F>,
        cache: &EnhancerCache<F>,
        dy: &Array4<F>,
        mut grads: Option<&mut Grads<F>>,
    ) -> Array4<F> {
        let (ph, pw) = cache.padded_dims;
        let d_squash = zero_pad_grad_hw(dy, ph, pw);
        let d_logit = sigmoid_backward(&cache.squash_out, &d_squash);
        let d_u2o = self.head.backward(p, &cache.head, &d_logit, grads.as_deref_mut());

        let d_u2 = self.up2.backward(p, &cache.up2.2, &d_u2o, grads.as_deref_mut());
        let d_u1o = upsample2_bilinear_backward(&d_u2, cache.up2.0, cache.up2.1);
        let d_u1 = self.up1.backward(p, &cache.up1.2, &d_u1o, grads.as_deref_mut());
        let mut d_cur = upsample2_bilinear_backward(&d_u1, cache.up1.0, cache.up1.1);

        for (b, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            d_cur = b.backward(p, c, &d_cur, self.shared_fc.as_ref(), grads.as_deref_mut());
        }

        let d_e1 = self.down2.backward(p, &cache.down2, &d_cur, grads.as_deref_mut());
        let d_e0 = self.down1.backward(p, &cache.down1, &d_e1, grads.as_deref_mut());
        let d_zp = self.enc_in.backward(p, &cache.enc_in, &d_e0, grads);
        reflect_pad_hw_backward(&d_zp, cache.in_dims.0, cache.in_dims.1)
    }

    pub fn update_running<F: Scalar>(&self, p: &mut Params<F>, cache: &EnhancerCache<F>) {
        let elems = |c: &ConvBnActCacheI<F>| {
            let d = c.preact.dim();
            d.0 * d.2 * d.3
        };
        self.enc_in.update_running(p, &cache.enc_in, elems(&cache.enc_in));
        self.down1.update_running(p, &cache.down1, elems(&cache.down1));
        self.down2.update_running(p, &cache.down2, elems(&cache.down2));
        for (b, c) in self.blocks.iter().zip(&cache.blocks) {
            let d = c.pre_relu.dim();
            b.update_running(p, c, d.0 * d.2 * d.3);
        }
        self.up1.update_running(p, &cache.up1.2, elems(&cache.up1.2));
        self.up2.update_running(p, &cache.up2.2, elems(&cache.up2.2));
    }
}

/// The alignment stage of a generator: deformable or flow-based.
#[derive(Debug, Clone)]
pub enum AlignModule {
    DConv(Box<DeformAlign>),
    Flow(Box<FlowAlign>),
}

pub enum AlignCache<F> {
    DConv(DeformAlignCache<F>),
    Flow(FlowAlignCache<F>),
}

impl AlignModule {
    pub fn backend(&self) -> AlignBackend {
        match self {
            AlignModule::DConv(_) => AlignBackend::DConv,
            AlignModule::Flow(_) => AlignBackend::Flow,
        }
    }

    pub fn forward<F: Scalar>(&self, p: &Params<F>, frames: &Array4<F>) -> (Array4<F>, AlignCache<F>) {
        match self {
            AlignModule::DConv(a) => {
                let (z, c) = a.forward(p, frames);
                (z, AlignCache::DConv(c))
            }
            AlignModule::Flow(a) => {
                let (z, c) = a.forward(p, frames);
                (z, AlignCache::Flow(c))
            }
        }
    }

    pub fn backward<F: Scalar>(
        &self,
        p: &Params<F>,
        cache: &AlignCache<F>,
        dz: &Array4<F>,
        grads: Option<&mut Grads<F>>,
    ) -> Array4<F> {
        match (self, cache) {
            (AlignModule::DConv(a), AlignCache::DConv(c)) => a.backward(p, c, dz, grads),
            (AlignModule::Flow(a), AlignCache::Flow(c)) => a.backward(p, c, dz, grads),
            _ => unreachable!("align cache kind mismatch"),
        }
    }
}

/// Full generator `G(y_t, q)`: alignment followed by enhancement.
#[derive(Debug, Clone)]
pub struct Generator {
    pub cfg: GeneratorConfig,
    pub align: AlignModule,
    pub enhancer: Enhancer,
}

pub struct GeneratorCache<F> {
    pub align: AlignCache<F>,
    pub enhancer: EnhancerCache<F>,
}

impl Generator {
    pub fn new<F: Scalar, R: Rng>(
        params: &mut Params<F>,
        rng: &mut R,
        cfg: &GeneratorConfig,
        backend: AlignBackend,
        flow_cfg: &crate::config::FlowConfig,
    ) -> Self {
        let align = match backend {
            AlignBackend::DConv => {
                AlignModule::DConv(Box::new(DeformAlign::new(params, rng, "generator.align", cfg)))
            }
            AlignBackend::Flow => AlignModule::Flow(Box::new(FlowAlign::new(
                params,
                rng,
                "generator.align",
                cfg.aligned_channels,
                flow_cfg,
            ))),
        };
        let enhancer = Enhancer::new(params, rng, "generator.enhance", cfg);
        Generator {
            cfg: cfg.clone(),
            align,
            enhancer,
        }
    }

    /// `frames`: `[n, 3, h, w]`, `codes`: `[n, 4]`.
    pub fn forward<F: Scalar>(
        &self,
        p: &Params<F>,
        frames: &Array4<F>,
        codes: &Array2<F>,
        mode: Mode,
    ) -> (Array4<F>, GeneratorCache<F>) {
        let (z, align) = self.align.forward(p, frames);
        let skip = self
            .cfg
            .global_skip
            .then(|| frames.slice(ndarray::s![.., 1..2, .., ..]).to_owned());
        let (out, enhancer) = self.enhancer.forward(p, &z, codes, skip.as_ref(), mode);
        (
            out,
            GeneratorCache { align, enhancer },
        )
    }

    pub fn backward<F: Scalar>(
        &self,
        p: &Params<F>,
        cache: &GeneratorCache<F>,
        d_out: &Array4<F>,
        mut grads: Option<&mut Grads<F>>,
    ) -> Array4<F> {
        let dz = self.enhancer.backward(p, &cache.enhancer, d_out, grads.as_deref_mut());
        self.align.backward(p, &cache.align, &dz, grads)
    }

    pub fn update_running<F: Scalar>(&self, p: &mut Params<F>, cache: &GeneratorCache<F>) {
        self.enhancer.update_running(p, &cache.enhancer);
    }

    /// Enhance one triplet at inference settings.
    pub fn generate<F: Scalar>(
        &self,
        p: &Params<F>,
        triplet: &FrameTriplet,
        qp: u8,
    ) -> Result<LumaFrame> {
        let code = QpCode::encode(qp)?;
        if !self.cfg.qp_set.contains(&qp) {
            return Err(Error::UnsupportedQp {
                qp,
                supported: self.cfg.qp_set.clone(),
            });
        }
        let frames = triplets_to_tensor::<F>(&[triplet]);
        let codes = codes_to_tensor::<F>(&[code]);
        let (out, _) = self.forward(p, &frames, &codes, Mode::Eval);
        let (h, w) = (triplet.height(), triplet.width());
        let plane = ndarray::Array2::from_shape_fn((h, w), |(y, x)| out[[0, 0, y, x]].to_f64() as f32);
        LumaFrame::from_clamped(plane)
    }

    /// The aligned representation alone (for interchange tests and the
    /// alignment benchmark).
    pub fn align_only<F: Scalar>(&self, p: &Params<F>, frames: &Array4<F>) -> AlignedFeature<F> {
        let (z, _) = self.align.forward(p, frames);
        AlignedFeature { features: z }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::FlowConfig;
    use ndarray::Array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn desk_gen(seed: u64) -> (Params<f32>, Generator) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::<f32>::new();
        let mut cfg = GeneratorConfig::desk();
        cfg.unet_base = 4;
        cfg.aligned_channels = 8;
        cfg.enc_base = 8;
        let g = Generator::new(&mut p, &mut rng, &cfg, AlignBackend::DConv, &FlowConfig::default());
        (p, g)
    }

    #[test]
    fn qp_scales_of_zero_fc_are_ln2() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = Params::<f64>::new();
        let fc = Linear::new(&mut p, &mut rng, "fc", 4, 6);
        p.get_mut(fc.w).fill(0.0);
        p.get_mut(fc.b).fill(0.0);
        let s = qp_scales(&fc, &p, &QpCode::encode(27).unwrap());
        assert_eq!(s.len(), 6);
        for v in s {
            assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn qp_scales_are_positive_and_code_sensitive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = Params::<f64>::new();
        let fc = Linear::new(&mut p, &mut rng, "fc", 4, 8);
        let s22 = qp_scales(&fc, &p, &QpCode::encode(22).unwrap());
        let s37 = qp_scales(&fc, &p, &QpCode::encode(37).unwrap());
        assert!(s22.iter().all(|&v| v > 0.0));
        assert!(s37.iter().all(|&v| v > 0.0));
        let diff: f64 = s22.iter().zip(&s37).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 1e-6, "different codes should modulate differently");
    }

    #[test]
    fn residual_block_with_unit_scales_is_plain() {
        // scales==1 exactly when fc output is softplus^{-1}(1)
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = Params::<f64>::new();
        let block = ModResBlock::new(&mut p, &mut rng, "b", 4, 4, true, false);
        let inv_softplus_one = (std::f64::consts::E - 1.0f64).ln();
        {
            let fc = block.fc.as_ref().unwrap();
            p.get_mut(fc.w).fill(0.0);
            p.get_mut(fc.b).fill(inv_softplus_one);
        }
        let x = Array::from_shape_fn((1, 4, 6, 6), |_| rng.random_range(-1.0..1.0));
        let codes = codes_to_tensor::<f64>(&[QpCode::encode(22).unwrap()]);
        let (y, _) = block.forward(&p, &x, &codes, None, Mode::Train);

        // reference: same convs without modulation
        let (h1, _) = block.conv1.forward(&p, &x);
        let (bn_out, _) = block.bn1.forward(&p, &h1, Mode::Train);
        let act = relu(&bn_out);
        let (h2, _) = block.conv2.forward(&p, &act);
        let want = &x + &h2;
        let max = (&y - &want).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max < 1e-9, "max {max}");
    }

    #[test]
    fn residual_block_zero_convs_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut p = Params::<f64>::new();
        let block = ModResBlock::new(&mut p, &mut rng, "b", 3, 4, true, false);
        p.get_mut(block.conv1.w).fill(0.0);
        p.get_mut(block.conv1.b).fill(0.0);
        p.get_mut(block.conv2.w).fill(0.0);
        p.get_mut(block.conv2.b).fill(0.0);
        let x = Array::from_shape_fn((2, 3, 5, 5), |_| rng.random_range(-1.0..1.0));
        let codes = codes_to_tensor::<f64>(&[QpCode::encode(22).unwrap(), QpCode::encode(37).unwrap()]);
        let (y, _) = block.forward(&p, &x, &codes, None, Mode::Train);
        let max = (&y - &x).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max < 1e-12);
    }

    #[test]
    fn modulation_sensitivity_to_scale_doubling() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = Params::<f64>::new();
        let block = ModResBlock::new(&mut p, &mut rng, "b", 4, 4, true, false);
        let x = Array::from_shape_fn((1, 4, 6, 6), |_| rng.random_range(-1.0..1.0));
        let c22 = codes_to_tensor::<f64>(&[QpCode::encode(22).unwrap()]);
        let c37 = codes_to_tensor::<f64>(&[QpCode::encode(37).unwrap()]);
        let (y22, _) = block.forward(&p, &x, &c22, None, Mode::Train);
        let (y37, _) = block.forward(&p, &x, &c37, None, Mode::Train);
        let diff: f64 = (&y22 - &y37).iter().map(|v| v.abs()).sum();
        assert!(diff > 1e-9, "different scales must change the output");
    }

    #[test]
    fn generator_output_shape_and_range() {
        let (p, g) = desk_gen(11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let frames = Array::from_shape_fn((2, 3, 12, 20), |_| rng.random_range(0.0f32..1.0));
        let codes = codes_to_tensor::<f32>(&[QpCode::encode(22).unwrap(), QpCode::encode(37).unwrap()]);
        let (y, _) = g.forward(&p, &frames, &codes, Mode::Train);
        assert_eq!(y.dim(), (2, 1, 12, 20));
        assert!(y.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn generator_is_deterministic() {
        let (p, g) = desk_gen(13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let frames = Array::from_shape_fn((1, 3, 16, 16), |_| rng.random_range(0.0f32..1.0));
        let codes = codes_to_tensor::<f32>(&[QpCode::encode(32).unwrap()]);
        let (a, _) = g.forward(&p, &frames, &codes, Mode::Eval);
        let (b, _) = g.forward(&p, &frames, &codes, Mode::Eval);
        assert_eq!(a, b);
    }

    #[test]
    fn zeroed_head_gives_half_gray_output() {
        let (mut p, g) = desk_gen(15);
        let head_w = p.find("generator.enhance.head.weight").unwrap();
        let head_b = p.find("generator.enhance.head.bias").unwrap();
        p.get_mut(head_w).fill(0.0);
        p.get_mut(head_b).fill(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let frames = Array::from_shape_fn((1, 3, 8, 8), |_| rng.random_range(0.0f32..1.0));
        let codes = codes_to_tensor::<f32>(&[QpCode::encode(22).unwrap()]);
        let (y, _) = g.forward(&p, &frames, &codes, Mode::Train);
        assert!(y.iter().all(|&v| (v - 0.5).abs() < 1e-6));
    }

    #[test]
    fn unit_scale_fc_makes_output_qp_independent() {
        let (mut p, g) = desk_gen(17);
        let inv_softplus_one = (std::f32::consts::E - 1.0f32).ln();
        for i in 0..g.enhancer.num_blocks() {
            let fc = g.enhancer.block(i).fc.as_ref().unwrap();
            p.get_mut(fc.w).fill(0.0);
            p.get_mut(fc.b).fill(inv_softplus_one);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let frames = Array::from_shape_fn((1, 3, 8, 8), |_| rng.random_range(0.0f32..1.0));
        let (a, _) = g.forward(&p, &frames, &codes_to_tensor::<f32>(&[QpCode::encode(22).unwrap()]), Mode::Eval);
        let (b, _) = g.forward(&p, &frames, &codes_to_tensor::<f32>(&[QpCode::encode(37).unwrap()]), Mode::Eval);
        assert_eq!(a, b, "scales forced to 1 must erase QP dependence");
    }

    #[test]
    fn nine_blocks_and_four_code_entries() {
        let (_, g) = desk_gen(19);
        assert_eq!(g.enhancer.num_blocks(), RES_BLOCKS);
        assert_eq!(RES_BLOCKS, 9);
        assert_eq!(QpCode::encode(22).unwrap().len(), 4);
    }

    #[test]
    fn enhancer_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut p = Params::<f64>::new();
        let mut cfg = GeneratorConfig::desk();
        cfg.aligned_channels = 4;
        cfg.enc_base = 4;
        cfg.unet_base = 4;
        let e = Enhancer::new(&mut p, &mut rng, "e", &cfg);
        let z = Array::from_shape_fn((1, 4, 8, 8), |_| rng.random_range(-0.5..0.5));
        let codes = codes_to_tensor::<f64>(&[QpCode::encode(27).unwrap()]);
        let mask = Array::from_shape_fn((1, 1, 8, 8), |_| rng.random_range(-1.0..1.0));

        let loss = |zz: &Array4<f64>| (e.forward(&p, zz, &codes, None, Mode::Train).0 * &mask).sum();
        let (_, cache) = e.forward(&p, &z, &codes, None, Mode::Train);
        let dz = e.backward(&p, &cache, &mask, None);

        let h = 1e-6;
        let mut checked = 0;
        for idx in [[0usize, 0, 0, 0], [0, 1, 3, 4], [0, 3, 7, 7], [0, 2, 5, 1]] {
            let mut zp = z.clone();
            zp[idx] += h;
            let mut zm = z.clone();
            zm[idx] -= h;
            let fd = (loss(&zp) - loss(&zm)) / (2.0 * h);
            if fd.abs() > 1e-7 {
                let rel = (dz[idx] - fd).abs() / fd.abs().max(1e-6);
                assert!(rel < 1e-3, "{idx:?}: got {} fd {fd}", dz[idx]);
                checked += 1;
            }
        }
        assert!(checked > 0);
    }
}
