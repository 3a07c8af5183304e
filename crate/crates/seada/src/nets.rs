//! The four parametric components: encoder f_E, decoder f_D (single-head,
//! or branched per domain for the multi-decoder variant), style encoder
//! f_SE, and domain predictor g_D, plus checkpoint serialization.
//!
//! The decoder consumes the *sum* of the content latent z and the style
//! latent z_k; with z_k = 0 this degenerates to plain autoencoder decoding.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array4, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Volume;
use crate::error::{Result, SeadaError};
use crate::nn::*;
use crate::seeds;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SEADACK1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    CAE,
    ADA,
    MDADA,
    SEADA,
}

impl Method {
    pub fn parse(s: &str) -> Result<Method> {
        match s.to_ascii_uppercase().as_str() {
            "CAE" => Ok(Method::CAE),
            "ADA" => Ok(Method::ADA),
            "MDADA" | "MD-ADA" => Ok(Method::MDADA),
            "SEADA" | "SE-ADA" => Ok(Method::SEADA),
            _ => Err(SeadaError::InvalidInput(format!("unknown trainable method '{s}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::CAE => "CAE",
            Method::ADA => "ADA",
            Method::MDADA => "MDADA",
            Method::SEADA => "SEADA",
        }
    }

    pub fn adversarial(&self) -> bool {
        !matches!(self, Method::CAE)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub shape: [usize; 3],
    pub latent_dim: usize,
    /// Channel widths of the four strided encoder stages.
    pub channels: [usize; 4],
    /// Channel widths of the two style-encoder conv stages.
    pub style_channels: [usize; 2],
    pub predictor_hidden: usize,
    /// Number of training domains K; style/domain logits have this length.
    pub num_domains: usize,
}

impl ArchConfig {
    pub fn desk_default(num_domains: usize) -> Self {
        ArchConfig {
            shape: [32, 32, 32],
            latent_dim: 64,
            channels: [8, 16, 32, 64],
            style_channels: [8, 16],
            predictor_hidden: 128,
            num_domains,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(SeadaError::InvalidInput("latent_dim must be > 0".into()));
        }
        if self.num_domains < 2 {
            return Err(SeadaError::InvalidInput("num_domains must be >= 2".into()));
        }
        for &s in &self.shape {
            if s == 0 || s % 16 != 0 {
                return Err(SeadaError::InvalidInput(format!(
                    "volume shape {:?} must be positive and divisible by 16 (four stride-2 stages)",
                    self.shape
                )));
            }
        }
        Ok(())
    }

    /// Spatial size after the four stride-2 encoder stages.
    pub fn base_spatial(&self) -> (usize, usize, usize) {
        (self.shape[0] / 16, self.shape[1] / 16, self.shape[2] / 16)
    }
}

pub struct ConvBlock {
    pub conv: Conv3d,
    pub norm: InstanceNorm,
}

pub struct ConvBlockCache {
    conv: Conv3dCache,
    norm: InstanceNormCache,
    pre_act: Array4<f32>,
}

impl ConvBlock {
    fn new(name: &str, cin: usize, cout: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        ConvBlock {
            conv: Conv3d::new(&format!("{name}.conv"), cin, cout, 3, stride, 1, rng),
            norm: InstanceNorm::new(&format!("{name}.norm"), cout),
        }
    }

    fn forward(&self, x: &Array4<f32>) -> (Array4<f32>, ConvBlockCache) {
        let (c, conv_cache) = self.conv.forward(x);
        let (n, norm_cache) = self.norm.forward(&c);
        let y = silu4(&n);
        (y, ConvBlockCache { conv: conv_cache, norm: norm_cache, pre_act: n })
    }

    fn backward(&mut self, cache: &ConvBlockCache, grad_out: &Array4<f32>) -> Array4<f32> {
        let g = silu4_backward(&cache.pre_act, grad_out);
        let g = self.norm.backward(&cache.norm, &g);
        self.conv.backward(&cache.conv, &g)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.conv.params_mut();
        p.extend(self.norm.params_mut());
        p
    }
}

/// Content encoder f_E: four strided conv stages then a linear map to z.
pub struct Encoder {
    pub blocks: Vec<ConvBlock>,
    pub fc: Linear,
}

pub struct EncoderCache {
    blocks: Vec<ConvBlockCache>,
    flat_dim: (usize, usize, usize, usize),
    fc: LinearCache,
}

impl Encoder {
    fn new(arch: &ArchConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ch = arch.channels;
        let blocks = vec![
            ConvBlock::new("enc.b0", 1, ch[0], 2, &mut rng),
            ConvBlock::new("enc.b1", ch[0], ch[1], 2, &mut rng),
            ConvBlock::new("enc.b2", ch[1], ch[2], 2, &mut rng),
            ConvBlock::new("enc.b3", ch[2], ch[3], 2, &mut rng),
        ];
        let (bd, bh, bw) = arch.base_spatial();
        let fc = Linear::new("enc.fc", ch[3] * bd * bh * bw, arch.latent_dim, &mut rng);
        Encoder { blocks, fc }
    }

    pub fn forward(&self, x: &Array4<f32>) -> (Array1<f32>, EncoderCache) {
        let mut caches = Vec::with_capacity(4);
        let mut cur = x.clone();
        for b in &self.blocks {
            let (y, c) = b.forward(&cur);
            caches.push(c);
            cur = y;
        }
        let flat_dim = cur.dim();
        let flat = Array1::from_iter(cur.iter().cloned());
        let (z, fc_cache) = self.fc.forward(&flat);
        (z, EncoderCache { blocks: caches, flat_dim, fc: fc_cache })
    }

    pub fn backward(&mut self, cache: &EncoderCache, grad_z: &Array1<f32>) {
        let g = self.fc.backward(&cache.fc, grad_z);
        let mut g4 = Array4::from_shape_vec(cache.flat_dim, g.to_vec()).unwrap();
        for (b, c) in self.blocks.iter_mut().zip(cache.blocks.iter()).rev() {
            g4 = b.backward(c, &g4);
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = Vec::new();
        for b in &mut self.blocks {
            p.extend(b.params_mut());
        }
        p.extend(self.fc.params_mut());
        p
    }
}

pub struct UpBlock {
    pub conv: Conv3d,
    pub norm: InstanceNorm,
}

pub struct UpBlockCache {
    in_dim: (usize, usize, usize, usize),
    conv: Conv3dCache,
    norm: InstanceNormCache,
    pre_act: Array4<f32>,
}

impl UpBlock {
    fn new(name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        UpBlock {
            conv: Conv3d::new(&format!("{name}.conv"), cin, cout, 3, 1, 1, rng),
            norm: InstanceNorm::new(&format!("{name}.norm"), cout),
        }
    }

    fn forward(&self, x: &Array4<f32>) -> (Array4<f32>, UpBlockCache) {
        let up = upsample2(x);
        let (c, conv_cache) = self.conv.forward(&up);
        let (n, norm_cache) = self.norm.forward(&c);
        let y = silu4(&n);
        (y, UpBlockCache { in_dim: x.dim(), conv: conv_cache, norm: norm_cache, pre_act: n })
    }

    fn backward(&mut self, cache: &UpBlockCache, grad_out: &Array4<f32>) -> Array4<f32> {
        let g = silu4_backward(&cache.pre_act, grad_out);
        let g = self.norm.backward(&cache.norm, &g);
        let g = self.conv.backward(&cache.conv, &g);
        upsample2_backward(&g, cache.in_dim)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.conv.params_mut();
        p.extend(self.norm.params_mut());
        p
    }
}

/// Decoder f_D. `heads` holds one linear latent->grid map per branch: a
/// single entry normally, one per training domain for the multi-decoder
/// variant (only this first fully connected layer is branched; the conv
/// trunk downstream is shared).
pub struct Decoder {
    pub heads: Vec<Linear>,
    pub blocks: Vec<UpBlock>,
    pub final_conv: Conv3d,
    arch: ArchConfig,
}

pub struct DecoderCache {
    branch: usize,
    head: LinearCache,
    head_out: Array1<f32>,
    blocks: Vec<UpBlockCache>,
    final_in_dim: (usize, usize, usize, usize),
    final_conv: Conv3dCache,
    output: Array4<f32>,
}

impl Decoder {
    fn new(arch: &ArchConfig, seed: u64, branches: usize) -> Self {
        let ch = arch.channels;
        let (bd, bh, bw) = arch.base_spatial();
        let head_out = ch[3] * bd * bh * bw;
        let heads = (0..branches)
            .map(|k| {
                let branch_seed = if k == 0 { seed } else { seeds::derive_indexed(seed, "branch", k as u64) };
                let mut rng = ChaCha8Rng::seed_from_u64(branch_seed);
                Linear::new(&format!("dec.head{k}"), arch.latent_dim, head_out, &mut rng)
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, "trunk"));
        let blocks = vec![
            UpBlock::new("dec.u0", ch[3], ch[2], &mut rng),
            UpBlock::new("dec.u1", ch[2], ch[1], &mut rng),
            UpBlock::new("dec.u2", ch[1], ch[0], &mut rng),
        ];
        let final_conv = Conv3d::new("dec.out", ch[0], 1, 3, 1, 1, &mut rng);
        Decoder { heads, blocks, final_conv, arch: arch.clone() }
    }

    pub fn forward(&self, z_total: &Array1<f32>, branch: usize) -> (Array4<f32>, DecoderCache) {
        let (h, head_cache) = self.heads[branch].forward(z_total);
        let a = silu1(&h);
        let (bd, bh, bw) = self.arch.base_spatial();
        let mut cur = Array4::from_shape_vec((self.arch.channels[3], bd, bh, bw), a.to_vec()).unwrap();
        let mut caches = Vec::with_capacity(3);
        for b in &self.blocks {
            let (y, c) = b.forward(&cur);
            caches.push(c);
            cur = y;
        }
        let final_in_dim = cur.dim();
        let up = upsample2(&cur);
        let (pre, final_cache) = self.final_conv.forward(&up);
        let out = sigmoid4(&pre);
        (
            out.clone(),
            DecoderCache {
                branch,
                head: head_cache,
                head_out: h,
                blocks: caches,
                final_in_dim,
                final_conv: final_cache,
                output: out,
            },
        )
    }

    /// Returns the gradient with respect to z_total.
    pub fn backward(&mut self, cache: &DecoderCache, grad_out: &Array4<f32>) -> Array1<f32> {
        let g = sigmoid4_backward(&cache.output, grad_out);
        let g = self.final_conv.backward(&cache.final_conv, &g);
        let mut g4 = upsample2_backward(&g, cache.final_in_dim);
        for (b, c) in self.blocks.iter_mut().zip(cache.blocks.iter()).rev() {
            g4 = b.backward(c, &g4);
        }
        let flat = Array1::from_iter(g4.iter().cloned());
        let g1 = silu1_backward(&cache.head_out, &flat);
        self.heads[cache.branch].backward(&cache.head, &g1)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = Vec::new();
        for h in &mut self.heads {
            p.extend(h.params_mut());
        }
        for b in &mut self.blocks {
            p.extend(b.params_mut());
        }
        p.extend(self.final_conv.params_mut());
        p
    }

    pub fn param_count(&mut self) -> usize {
        self.params_mut().iter().map(|p| p.count()).sum()
    }

    /// Parameter count of one branch head (the branched layer).
    pub fn branch_param_count(&self) -> usize {
        self.heads[0].w.count() + self.heads[0].b.count()
    }
}

/// Style encoder f_SE: a small conv classifier producing style logits s, and
/// a fully connected map from softmax(s) to the style latent z_k. Routing
/// z_k through s alone starves the style latent of content information.
pub struct StyleEncoder {
    pub conv0: Conv3d,
    pub conv1: Conv3d,
    pub cls: Linear,
    pub zk_fc: Linear,
}

pub struct StyleCache {
    conv0: Conv3dCache,
    conv0_out: Array4<f32>,
    conv1: Conv3dCache,
    conv1_out: Array4<f32>,
    pooled_dim: (usize, usize, usize, usize),
    cls: LinearCache,
    pub softmax_s: Array1<f32>,
    zk: LinearCache,
}

impl StyleEncoder {
    fn new(arch: &ArchConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sc = arch.style_channels;
        StyleEncoder {
            conv0: Conv3d::new("se.conv0", 1, sc[0], 3, 2, 1, &mut rng),
            conv1: Conv3d::new("se.conv1", sc[0], sc[1], 3, 2, 1, &mut rng),
            cls: Linear::new("se.cls", sc[1], arch.num_domains, &mut rng),
            zk_fc: Linear::new("se.zk", arch.num_domains, arch.latent_dim, &mut rng),
        }
    }

    /// Returns (style logits s, style latent z_k, cache).
    pub fn forward(&self, x: &Array4<f32>) -> (Array1<f32>, Array1<f32>, StyleCache) {
        let (c0, c0_cache) = self.conv0.forward(x);
        let a0 = silu4(&c0);
        let (c1, c1_cache) = self.conv1.forward(&a0);
        let a1 = silu4(&c1);
        let pooled = global_mean_pool(&a1);
        let pooled_dim = a1.dim();
        // note: cls consumes the pooled activations
        let (s, cls_cache) = self.cls.forward(&pooled);
        let p = softmax(&s);
        let (zk, zk_cache) = self.zk_fc.forward(&p);
        (
            s,
            zk,
            StyleCache {
                conv0: c0_cache,
                conv0_out: c0,
                conv1: c1_cache,
                conv1_out: c1,
                pooled_dim,
                cls: cls_cache,
                softmax_s: p,
                zk: zk_cache,
            },
        )
    }

    /// Backward from gradients on z_k and on the style logits s.
    pub fn backward(&mut self, cache: &StyleCache, grad_zk: &Array1<f32>, grad_s_direct: &Array1<f32>) {
        let grad_p = self.zk_fc.backward(&cache.zk, grad_zk);
        let mut grad_s = softmax_backward(&cache.softmax_s, &grad_p);
        grad_s += grad_s_direct;
        let grad_pooled = self.cls.backward(&cache.cls, &grad_s);
        let g = global_mean_pool_backward(&grad_pooled, cache.pooled_dim);
        let g = silu4_backward(&cache.conv1_out, &g);
        let g = self.conv1.backward(&cache.conv1, &g);
        let g = silu4_backward(&cache.conv0_out, &g);
        let _ = self.conv0.backward(&cache.conv0, &g);
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.conv0.params_mut();
        p.extend(self.conv1.params_mut());
        p.extend(self.cls.params_mut());
        p.extend(self.zk_fc.params_mut());
        p
    }
}

/// Domain predictor g_D: two-layer MLP over z.
pub struct DomainPredictor {
    pub fc0: Linear,
    pub fc1: Linear,
}

pub struct PredictorCache {
    fc0: LinearCache,
    hidden_pre: Array1<f32>,
    fc1: LinearCache,
}

impl DomainPredictor {
    pub(crate) fn new(arch: &ArchConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DomainPredictor {
            fc0: Linear::new("gd.fc0", arch.latent_dim, arch.predictor_hidden, &mut rng),
            fc1: Linear::new("gd.fc1", arch.predictor_hidden, arch.num_domains, &mut rng),
        }
    }

    pub fn forward(&self, z: &Array1<f32>) -> (Array1<f32>, PredictorCache) {
        let (h, fc0_cache) = self.fc0.forward(z);
        let a = silu1(&h);
        let (d, fc1_cache) = self.fc1.forward(&a);
        (d, PredictorCache { fc0: fc0_cache, hidden_pre: h, fc1: fc1_cache })
    }

    /// Returns the gradient with respect to z.
    pub fn backward(&mut self, cache: &PredictorCache, grad_d: &Array1<f32>) -> Array1<f32> {
        let g = self.fc1.backward(&cache.fc1, grad_d);
        let g = silu1_backward(&cache.hidden_pre, &g);
        self.fc0.backward(&cache.fc0, &g)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.fc0.params_mut();
        p.extend(self.fc1.params_mut());
        p
    }
}

/// All parametric state for one method.
pub struct ModelBundle {
    pub method: Method,
    pub arch: ArchConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub style: Option<StyleEncoder>,
    pub predictor: Option<DomainPredictor>,
    /// Manifest domain indices of the training domains, sorted; branch /
    /// class j corresponds to train_domain_indices[j].
    pub train_domain_indices: Vec<usize>,
    pub step: u64,
}

impl ModelBundle {
    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    pub fn num_domains(&self) -> usize {
        self.arch.num_domains
    }

    /// Class index (dense, [0, K)) of a manifest domain index.
    pub fn class_of_domain(&self, domain_index: usize) -> Result<usize> {
        self.train_domain_indices
            .iter()
            .position(|&d| d == domain_index)
            .ok_or_else(|| {
                SeadaError::InvalidInput(format!(
                    "domain index {domain_index} is not a training domain of this bundle"
                ))
            })
    }

    fn check_volume(&self, x: &Volume) -> Result<()> {
        let (d, h, w) = x.shape();
        if [d, h, w] != self.arch.shape {
            return Err(SeadaError::ShapeMismatch {
                expected: format!("{:?}", self.arch.shape),
                got: format!("{:?}", [d, h, w]),
            });
        }
        Ok(())
    }

    pub fn volume_to_input(&self, x: &Volume) -> Result<Array4<f32>> {
        self.check_volume(x)?;
        let (d, h, w) = x.shape();
        Ok(x.data.clone().into_shape((1, d, h, w)).unwrap())
    }

    /// Inference-mode encode.
    pub fn encode(&self, x: &Volume) -> Result<Array1<f32>> {
        let x4 = self.volume_to_input(x)?;
        let (z, _) = self.encoder.forward(&x4);
        if !z.iter().all(|v| v.is_finite()) {
            return Err(SeadaError::NonFinite("encoder output".into()));
        }
        Ok(z)
    }

    /// Inference-mode style encode. Returns (style logits, style latent).
    pub fn style_encode(&self, x: &Volume) -> Result<(Array1<f32>, Array1<f32>)> {
        let x4 = self.volume_to_input(x)?;
        let style = self.style.as_ref().ok_or_else(|| {
            SeadaError::InvalidInput(format!("method {} has no style encoder", self.method.as_str()))
        })?;
        let (s, zk, _) = style.forward(&x4);
        Ok((s, zk))
    }

    /// Inference-mode decode through the single head.
    pub fn decode(&self, z_total: &Array1<f32>) -> Result<Volume> {
        if z_total.len() != self.arch.latent_dim {
            return Err(SeadaError::ShapeMismatch {
                expected: format!("latent dim {}", self.arch.latent_dim),
                got: format!("{}", z_total.len()),
            });
        }
        if self.method == Method::MDADA {
            return Err(SeadaError::InvalidInput(
                "multi-decoder bundle requires decode_mdada with a domain".into(),
            ));
        }
        let (out, _) = self.decoder.forward(z_total, 0);
        let [d, h, w] = self.arch.shape;
        Ok(Volume::new(out.into_shape((d, h, w)).unwrap(), 1.0))
    }

    /// Inference-mode decode through the branch of `domain_index`.
    pub fn decode_mdada(&self, z: &Array1<f32>, domain_index: usize) -> Result<Volume> {
        if self.method != Method::MDADA {
            return Err(SeadaError::InvalidInput("decode_mdada requires an MDADA bundle".into()));
        }
        if z.len() != self.arch.latent_dim {
            return Err(SeadaError::ShapeMismatch {
                expected: format!("latent dim {}", self.arch.latent_dim),
                got: format!("{}", z.len()),
            });
        }
        let branch = self.class_of_domain(domain_index)?;
        let (out, _) = self.decoder.forward(z, branch);
        let [d, h, w] = self.arch.shape;
        Ok(Volume::new(out.into_shape((d, h, w)).unwrap(), 1.0))
    }

    /// Inference-mode domain logits from z.
    pub fn domain_predict(&self, z: &Array1<f32>) -> Result<Array1<f32>> {
        if z.len() != self.arch.latent_dim {
            return Err(SeadaError::ShapeMismatch {
                expected: format!("latent dim {}", self.arch.latent_dim),
                got: format!("{}", z.len()),
            });
        }
        let pred = self.predictor.as_ref().ok_or_else(|| {
            SeadaError::InvalidInput(format!("method {} has no domain predictor", self.method.as_str()))
        })?;
        let (d, _) = pred.forward(z);
        Ok(d)
    }

    /// Inference-mode encode/decode round trip, routing z through the
    /// style path or the per-domain decoder branch as the method requires.
    pub fn reconstruct(&self, x: &Volume, domain_index: usize) -> Result<Volume> {
        let z = self.encode(x)?;
        match self.method {
            Method::SEADA => {
                let (_, zk) = self.style_encode(x)?;
                self.decode(&(&z + &zk))
            }
            Method::MDADA => self.decode_mdada(&z, domain_index),
            _ => self.decode(&z),
        }
    }

    /// Fixed-order parameter list over every component present.
    pub fn all_params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.encoder.params_mut();
        p.extend(self.decoder.params_mut());
        if let Some(se) = &mut self.style {
            p.extend(se.params_mut());
        }
        if let Some(gd) = &mut self.predictor {
            p.extend(gd.params_mut());
        }
        p
    }
}

/// Deterministic initialization. Component seeds are derived from (seed,
/// component tag), so the encoder initialization is identical across methods
/// for the same seed (controlled comparisons).
pub fn init_bundle(
    arch: &ArchConfig,
    method: Method,
    seed: u64,
    train_domain_indices: Vec<usize>,
) -> Result<ModelBundle> {
    arch.validate()?;
    if train_domain_indices.len() != arch.num_domains {
        return Err(SeadaError::InvalidInput(format!(
            "arch.num_domains = {} but {} training domains supplied",
            arch.num_domains,
            train_domain_indices.len()
        )));
    }
    let encoder = Encoder::new(arch, seeds::derive(seed, "encoder"));
    let branches = if method == Method::MDADA { arch.num_domains } else { 1 };
    let decoder = Decoder::new(arch, seeds::derive(seed, "decoder"), branches);
    let style = if method == Method::SEADA {
        Some(StyleEncoder::new(arch, seeds::derive(seed, "style")))
    } else {
        None
    };
    let predictor = if method.adversarial() {
        Some(DomainPredictor::new(arch, seeds::derive(seed, "predictor")))
    } else {
        None
    };
    Ok(ModelBundle {
        method,
        arch: arch.clone(),
        encoder,
        decoder,
        style,
        predictor,
        train_domain_indices,
        step: 0,
    })
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    method: Method,
    arch: ArchConfig,
    train_domain_indices: Vec<usize>,
    step: u64,
    tensors: Vec<TensorInfo>,
}

#[derive(Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

/// Write a bit-exact checkpoint: JSON header + raw little-endian f32 blobs
/// in fixed parameter order.
pub fn save_checkpoint(path: &Path, bundle: &mut ModelBundle) -> Result<()> {
    let method = bundle.method;
    let arch = bundle.arch.clone();
    let train_domain_indices = bundle.train_domain_indices.clone();
    let step = bundle.step;
    let params = bundle.all_params_mut();
    let tensors: Vec<TensorInfo> = params
        .iter()
        .map(|p| TensorInfo { name: p.name.clone(), shape: p.value.shape().to_vec() })
        .collect();
    let header = CheckpointHeader { method, arch, train_domain_indices, step, tensors };
    let header_json = serde_json::to_vec(&header)?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(CHECKPOINT_MAGIC)?;
    f.write_all(&(header_json.len() as u64).to_le_bytes())?;
    f.write_all(&header_json)?;
    for p in params {
        let mut bytes = Vec::with_capacity(p.value.len() * 4);
        for v in p.value.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        f.write_all(&bytes)?;
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelBundle> {
    let mut f = fs::File::open(path)?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(SeadaError::Serde(format!("{}: not a checkpoint file", path.display())));
    }
    let mut len_bytes = [0u8; 8];
    f.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    f.read_exact(&mut header_json)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_json)?;
    let mut bundle = init_bundle(
        &header.arch,
        header.method,
        0,
        header.train_domain_indices.clone(),
    )?;
    bundle.step = header.step;
    let params = bundle.all_params_mut();
    if params.len() != header.tensors.len() {
        return Err(SeadaError::Serde(format!(
            "checkpoint lists {} tensors, bundle has {}",
            header.tensors.len(),
            params.len()
        )));
    }
    for (p, info) in params.into_iter().zip(&header.tensors) {
        if p.value.shape() != info.shape.as_slice() {
            return Err(SeadaError::Serde(format!(
                "tensor '{}' shape mismatch: checkpoint {:?}, bundle {:?}",
                info.name,
                info.shape,
                p.value.shape()
            )));
        }
        let n = p.value.len();
        let mut bytes = vec![0u8; n * 4];
        f.read_exact(&mut bytes).map_err(|e| {
            SeadaError::Serde(format!("checkpoint truncated reading tensor '{}': {e}", info.name))
        })?;
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        p.value = ArrayD::from_shape_vec(IxDyn(&info.shape), values).unwrap();
        p.grad = ArrayD::zeros(p.value.raw_dim());
    }
    Ok(bundle)
}

/// Concatenated little-endian bytes of a component's parameters; used by
/// stage-isolation checks.
pub fn param_bytes(params: &mut [&mut Param]) -> Vec<u8> {
    let mut out = Vec::new();
    for p in params {
        for v in p.value.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}
