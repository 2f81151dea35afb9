//! Convolutional VQ autoencoders for images and camera ray maps.
//!
//! Both tokenizers share one architecture: a stride-1 stem, `n` stages of
//! 2×2 patch downsampling followed by a residual block, and a 1×1
//! projection into the codebook space. The decoder mirrors it with
//! nearest-neighbour upsampling. Only the configuration differs.

use gst_core::geometry::{normalize_raymap, raymap_to_pose, CameraPose, GeometryError, Intrinsics, RayMap};
use gst_core::quantizer::{init_codebook, quantize, vq_loss_grads, Codebook, QuantizeResult, QuantizerError};
use gst_core::sequence::{Modality, TokenGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::layers::{silu_backward_inplace, silu_vec, upsample2, upsample2_backward, ResCache, Shape4};
use crate::nn::{join, Conv3x3, Linear, Param, Parameters, PatchDown, Real, ResBlock};

#[derive(Debug, thiserror::Error)]
pub enum TokenizerError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("token index {index} outside codebook of size {size}")]
    InvalidIndex { index: usize, size: usize },
    #[error("invalid tokenizer config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Quantizer(#[from] QuantizerError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerConfig {
    #[serde(with = "modality_name")]
    pub modality: Modality,
    pub input_channels: usize,
    pub base_channels: usize,
    /// Channel multiplier per resolution level, `num_downsamples + 1` long.
    pub channel_mult: Vec<usize>,
    pub num_downsamples: usize,
    pub codebook_size: usize,
    pub codebook_dim: usize,
    pub height: usize,
    pub width: usize,
    pub commitment_weight: f64,
    /// Camera maps only: moments are divided by this before encoding.
    pub moment_scale: f64,
}

impl TokenizerConfig {
    pub fn image(height: usize, width: usize) -> Self {
        Self {
            modality: Modality::Image,
            input_channels: 3,
            base_channels: 32,
            channel_mult: vec![1, 2, 2],
            num_downsamples: 2,
            codebook_size: 1024,
            codebook_dim: 8,
            height,
            width,
            commitment_weight: 0.25,
            moment_scale: 1.0,
        }
    }

    pub fn camera(height: usize, width: usize) -> Self {
        Self {
            modality: Modality::Camera,
            input_channels: 6,
            base_channels: 16,
            channel_mult: vec![1, 2, 2],
            num_downsamples: 2,
            codebook_size: 512,
            codebook_dim: 4,
            height,
            width,
            commitment_weight: 0.25,
            moment_scale: gst_core::geometry::DEFAULT_DISTANCE_THRESHOLD,
        }
    }

    pub fn validate(&self) -> Result<(), TokenizerError> {
        let f = 1usize << self.num_downsamples;
        let bad = |m: &str| Err(TokenizerError::InvalidConfig(m.to_string()));
        if self.height == 0 || self.width == 0 || self.height % f != 0 || self.width % f != 0 {
            return bad("resolution must be a positive multiple of 2^num_downsamples");
        }
        if self.channel_mult.len() != self.num_downsamples + 1 || self.channel_mult.contains(&0) {
            return bad("channel_mult needs num_downsamples + 1 positive entries");
        }
        let expected = match self.modality {
            Modality::Image => 3,
            Modality::Camera => 6,
        };
        if self.input_channels != expected {
            return bad("input_channels must be 3 for images and 6 for camera maps");
        }
        if self.codebook_size < 2 || self.codebook_dim == 0 || self.base_channels == 0 {
            return bad("codebook needs K >= 2, d >= 1");
        }
        if !(self.commitment_weight >= 0.0) || !(self.moment_scale > 0.0) {
            return bad("commitment_weight must be >= 0 and moment_scale > 0");
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height >> self.num_downsamples, self.width >> self.num_downsamples)
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mult[level]
    }
}

mod modality_name {
    use gst_core::sequence::Modality;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &Modality, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(m.name())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Modality, D::Error> {
        let name = String::deserialize(d)?;
        match name.as_str() {
            "image" => Ok(Modality::Image),
            "camera" => Ok(Modality::Camera),
            other => Err(serde::de::Error::custom(format!("unknown modality {other:?}"))),
        }
    }
}

/// Per-item squared error averaged over all elements, plus its gradient
/// with respect to the reconstruction.
pub fn reconstruction_loss<T: Real>(target: &[T], recon: &[T]) -> (T, Vec<T>) {
    let n = T::from_f(target.len().max(1) as f64);
    let two_n = T::from_f(2.0) / n;
    let mut loss = T::zero();
    let grad = target
        .iter()
        .zip(recon)
        .map(|(&x, &y)| {
            let d = y - x;
            loss += d * d;
            two_n * d
        })
        .collect();
    (loss / n, grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer<T> {
    pub config: TokenizerConfig,
    stem: Conv3x3<T>,
    down: Vec<PatchDown<T>>,
    enc_res: Vec<ResBlock<T>>,
    to_code: Linear<T>,
    pub codebook: Param<T>,
    from_code: Linear<T>,
    dec_mid: ResBlock<T>,
    up_conv: Vec<Conv3x3<T>>,
    dec_res: Vec<ResBlock<T>>,
    head: Conv3x3<T>,
}

/// Everything the backward pass needs from an encode.
pub struct EncodeCache<T> {
    stem_col: Vec<T>,
    down_packed: Vec<Vec<T>>,
    res: Vec<ResCache<T>>,
    pre_act: Vec<T>,
    pub features: Vec<T>,
    pub batch: usize,
}

pub struct DecodeCache<T> {
    z: Vec<T>,
    mid: ResCache<T>,
    up_col: Vec<Vec<T>>,
    res: Vec<ResCache<T>>,
    pre_act: Vec<T>,
    head_col: Vec<T>,
    batch: usize,
}

/// Result of one training-mode forward pass.
pub struct StepOutput<T> {
    pub recon_loss: T,
    pub vq: QuantizeResult<T>,
    pub total_loss: T,
}

impl<T: Real> Tokenizer<T> {
    pub fn new(config: TokenizerConfig, seed: u64) -> Result<Self, TokenizerError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = config.num_downsamples;
        let c0 = config.channels(0);
        let stem = Conv3x3::new(config.input_channels, c0, 1.0, &mut rng);
        let mut down = Vec::new();
        let mut enc_res = Vec::new();
        for i in 0..n {
            down.push(PatchDown::new(config.channels(i), config.channels(i + 1), &mut rng));
            enc_res.push(ResBlock::new(config.channels(i + 1), &mut rng));
        }
        let top = config.channels(n);
        let d = config.codebook_dim;
        let to_code = Linear::new(top, d, true, (1.0 / top as f64).sqrt(), &mut rng);
        let book = init_codebook::<f64>(rng.random(), config.codebook_size, d, None)?;
        let codebook = Param {
            value: book.vectors().iter().map(|&v| T::from_f(v)).collect(),
            grad: vec![T::zero(); config.codebook_size * d],
            shape: vec![config.codebook_size, d],
        };
        let from_code = Linear::new(d, top, true, (1.0 / d as f64).sqrt(), &mut rng);
        let dec_mid = ResBlock::new(top, &mut rng);
        let mut up_conv = Vec::new();
        let mut dec_res = Vec::new();
        for i in (0..n).rev() {
            up_conv.push(Conv3x3::new(config.channels(i + 1), config.channels(i), 1.0, &mut rng));
            dec_res.push(ResBlock::new(config.channels(i), &mut rng));
        }
        let head = Conv3x3::new(c0, config.input_channels, 0.5, &mut rng);
        Ok(Self { config, stem, down, enc_res, to_code, codebook, from_code, dec_mid, up_conv, dec_res, head })
    }

    pub fn codebook_view(&self) -> Codebook<T> {
        Codebook::new(self.codebook.value.clone(), self.config.codebook_size, self.config.codebook_dim)
            .expect("codebook shape is fixed at construction")
    }

    fn input_shape(&self, batch: usize) -> Shape4 {
        Shape4::new(batch, self.config.height, self.config.width, self.config.input_channels)
    }

    /// Pre-quantization features `(batch·h·w) × d` for NHWC inputs.
    pub fn encode_features(&self, x: &[T], batch: usize) -> Result<EncodeCache<T>, TokenizerError> {
        let s = self.input_shape(batch);
        if x.len() != s.len() {
            return Err(TokenizerError::ShapeMismatch(format!("expected {} values, got {}", s.len(), x.len())));
        }
        let (mut h, stem_col) = self.stem.forward(x, s);
        let mut shape = Shape4::new(batch, s.h, s.w, self.stem.out_channels());
        let mut down_packed = Vec::new();
        let mut res = Vec::new();
        for (d, r) in self.down.iter().zip(&self.enc_res) {
            let (y, packed) = d.forward(&h, shape);
            down_packed.push(packed);
            shape = Shape4::new(batch, shape.h / 2, shape.w / 2, d.lin.out_dim);
            let (y, cache) = r.forward(y, shape);
            res.push(cache);
            h = y;
        }
        let act = silu_vec(&h);
        let features = self.to_code.forward(&act, shape.pixels());
        Ok(EncodeCache { stem_col, down_packed, res, pre_act: h, features, batch })
    }

    fn encode_backward(&mut self, cache: &EncodeCache<T>, dfeat: &[T]) {
        let batch = cache.batch;
        let (gh, gw) = self.config.grid();
        let top = Shape4::new(batch, gh, gw, self.config.channels(self.config.num_downsamples));
        let act = silu_vec(&cache.pre_act);
        let mut g = self.to_code.backward(&act, dfeat, top.pixels(), true).expect("dx");
        silu_backward_inplace(&cache.pre_act, &mut g);
        let mut shape = top;
        for i in (0..self.down.len()).rev() {
            g = self.enc_res[i].backward(&cache.res[i], &g, shape);
            let full = Shape4::new(batch, shape.h * 2, shape.w * 2, self.config.channels(i));
            g = self.down[i].backward(&cache.down_packed[i], &g, full, true).expect("dx");
            shape = full;
        }
        let s = self.input_shape(batch);
        self.stem.backward(&cache.stem_col, &g, s, false);
    }

    /// Decodes quantized features `(batch·h·w) × d` to NHWC outputs.
    pub fn decode_features(&self, z: &[T], batch: usize) -> (Vec<T>, DecodeCache<T>) {
        let (gh, gw) = self.config.grid();
        let n = self.config.num_downsamples;
        let mut shape = Shape4::new(batch, gh, gw, self.config.channels(n));
        let h = self.from_code.forward(z, shape.pixels());
        let (mut h, mid) = self.dec_mid.forward(h, shape);
        let mut up_col = Vec::new();
        let mut res = Vec::new();
        for (conv, r) in self.up_conv.iter().zip(&self.dec_res) {
            let up = upsample2(&h, shape);
            shape = Shape4::new(batch, shape.h * 2, shape.w * 2, shape.c);
            let (y, col) = conv.forward(&up, shape);
            up_col.push(col);
            shape.c = conv.out_channels();
            let (y, cache) = r.forward(y, shape);
            res.push(cache);
            h = y;
        }
        let act = silu_vec(&h);
        let (out, head_col) = self.head.forward(&act, shape);
        (out, DecodeCache { z: z.to_vec(), mid, up_col, res, pre_act: h, head_col, batch })
    }

    /// Backward through the decoder; returns the gradient on `z`.
    fn decode_backward(&mut self, cache: &DecodeCache<T>, dout: &[T]) -> Vec<T> {
        let batch = cache.batch;
        let mut shape = Shape4::new(batch, self.config.height, self.config.width, self.config.channels(0));
        let mut g = self.head.backward(&cache.head_col, dout, shape, true).expect("dx");
        silu_backward_inplace(&cache.pre_act, &mut g);
        for j in (0..self.up_conv.len()).rev() {
            g = self.dec_res[j].backward(&cache.res[j], &g, shape);
            let cin = self.up_conv[j].in_channels();
            let conv_shape = Shape4::new(batch, shape.h, shape.w, cin);
            g = self.up_conv[j].backward(&cache.up_col[j], &g, conv_shape, true).expect("dx");
            shape = Shape4::new(batch, shape.h / 2, shape.w / 2, cin);
            g = upsample2_backward(&g, shape);
        }
        g = self.dec_mid.backward(&cache.mid, &g, shape);
        self.from_code.backward(&cache.z, &g, shape.pixels(), true).expect("dx")
    }

    /// Forward and backward for one batch, accumulating gradients scaled by
    /// `grad_scale`. The loss is reconstruction MSE plus the VQ loss.
    pub fn train_step(&mut self, x: &[T], batch: usize, grad_scale: T) -> Result<StepOutput<T>, TokenizerError> {
        let enc = self.encode_features(x, batch)?;
        let book = self.codebook_view();
        let vq = quantize(&enc.features, &book)?;
        let (out, dec) = self.decode_features(&vq.quantized, batch);
        let (recon_loss, mut dout) = reconstruction_loss(x, &out);
        dout.iter_mut().for_each(|g| *g *= grad_scale);
        let beta = T::from_f(self.config.commitment_weight);
        let total_loss = recon_loss + vq.codebook_loss + beta * vq.commitment_loss;
        let dz = self.decode_backward(&dec, &dout);
        // Straight-through: the decoder's input gradient flows to the features.
        let (mut dfeat, dbook) = vq_loss_grads(&enc.features, &vq, &book, beta);
        for (f, &g) in dfeat.iter_mut().zip(&dz) {
            *f = *f * grad_scale + g;
        }
        for (g, &d) in self.codebook.grad.iter_mut().zip(&dbook) {
            *g += d * grad_scale;
        }
        self.encode_backward(&enc, &dfeat);
        Ok(StepOutput { recon_loss, vq, total_loss })
    }

    /// Token indices for a batch of NHWC inputs (model-space channels).
    pub fn encode_indices(&self, x: &[T], batch: usize) -> Result<Vec<usize>, TokenizerError> {
        let enc = self.encode_features(x, batch)?;
        Ok(quantize(&enc.features, &self.codebook_view())?.indices)
    }

    /// Model-space reconstruction from flat token indices.
    pub fn decode_indices(&self, indices: &[usize], batch: usize) -> Result<Vec<T>, TokenizerError> {
        let (gh, gw) = self.config.grid();
        if indices.len() != batch * gh * gw {
            return Err(TokenizerError::ShapeMismatch(format!(
                "expected {} tokens, got {}",
                batch * gh * gw,
                indices.len()
            )));
        }
        let k = self.config.codebook_size;
        if let Some(&bad) = indices.iter().find(|&&i| i >= k) {
            return Err(TokenizerError::InvalidIndex { index: bad, size: k });
        }
        let z = self.codebook_view().lookup(indices)?;
        Ok(self.decode_features(&z, batch).0)
    }

    /// Encodes one item to a token grid. Inputs are images in `[−1, 1]` or
    /// raw ray-map channels (moment then direction).
    pub fn encode(&self, input: &[f32]) -> Result<(TokenGrid, QuantizeResult<T>), TokenizerError> {
        let x = self.to_model_space(input);
        let enc = self.encode_features(&x, 1)?;
        let vq = quantize(&enc.features, &self.codebook_view())?;
        let (h, w) = self.config.grid();
        let grid = TokenGrid::new(h, w, vq.indices.iter().map(|&i| i as u32).collect(), self.config.modality)
            .map_err(|e| TokenizerError::ShapeMismatch(e.to_string()))?;
        Ok((grid, vq))
    }

    /// Decodes a token grid to an image in `[−1, 1]` or to raw ray-map
    /// channels (not yet normalized).
    pub fn decode(&self, tokens: &TokenGrid) -> Result<Vec<f32>, TokenizerError> {
        if (tokens.height, tokens.width) != self.config.grid() {
            return Err(TokenizerError::ShapeMismatch("token grid does not match tokenizer".into()));
        }
        let idx: Vec<usize> = tokens.indices.iter().map(|&i| i as usize).collect();
        let out = self.decode_indices(&idx, 1)?;
        Ok(self.from_model_space(&out))
    }

    /// Maps external data into the network's input space.
    pub fn to_model_space(&self, input: &[f32]) -> Vec<T> {
        match self.config.modality {
            Modality::Image => input.iter().map(|&v| T::from_f(v as f64)).collect(),
            Modality::Camera => {
                let s = 1.0 / self.config.moment_scale;
                input
                    .chunks_exact(6)
                    .flat_map(|c| {
                        [c[0] as f64 * s, c[1] as f64 * s, c[2] as f64 * s, c[3] as f64, c[4] as f64, c[5] as f64]
                    })
                    .map(T::from_f)
                    .collect()
            }
        }
    }

    pub fn from_model_space(&self, out: &[T]) -> Vec<f32> {
        match self.config.modality {
            Modality::Image => out.iter().map(|v| v.as_f64().clamp(-1.0, 1.0) as f32).collect(),
            Modality::Camera => {
                let s = self.config.moment_scale;
                out.chunks_exact(6)
                    .flat_map(|c| {
                        [
                            c[0].as_f64() * s,
                            c[1].as_f64() * s,
                            c[2].as_f64() * s,
                            c[3].as_f64(),
                            c[4].as_f64(),
                            c[5].as_f64(),
                        ]
                    })
                    .map(|v| v as f32)
                    .collect()
            }
        }
    }

    /// Replaces the codebook with rows drawn from encoder features.
    pub fn init_codebook_from(&mut self, features: &[T], seed: u64) -> Result<(), TokenizerError> {
        let f: Vec<f64> = features.iter().map(|v| v.as_f64()).collect();
        let book = init_codebook(seed, self.config.codebook_size, self.config.codebook_dim, Some(&f))?;
        self.codebook.value = book.vectors().iter().map(|&v| T::from_f(v)).collect();
        Ok(())
    }

    /// Re-seeds codewords never selected in the last window from random
    /// feature rows, with a little noise so duplicates separate.
    pub fn restart_codes<R: Rng>(&mut self, dead: &[usize], features: &[T], rng: &mut R) {
        let d = self.config.codebook_dim;
        let rows = features.len() / d;
        if rows == 0 {
            return;
        }
        for &k in dead {
            let r = rng.random_range(0..rows);
            for j in 0..d {
                let noise = T::from_f(rng.random_range(-1e-3..1e-3));
                self.codebook.value[k * d + j] = features[r * d + j] + noise;
            }
        }
    }
}

impl<T: Real> Parameters<T> for Tokenizer<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.stem.lin.visit("stem", f);
        for (i, (d, r)) in self.down.iter().zip(&self.enc_res).enumerate() {
            d.lin.visit(&format!("down{i}"), f);
            r.visit(&format!("enc_res{i}"), f);
        }
        self.to_code.visit("to_code", f);
        f("codebook", &self.codebook);
        self.from_code.visit("from_code", f);
        self.dec_mid.visit("dec_mid", f);
        for (i, (c, r)) in self.up_conv.iter().zip(&self.dec_res).enumerate() {
            c.lin.visit(&format!("up{i}"), f);
            r.visit(&format!("dec_res{i}"), f);
        }
        self.head.lin.visit("head", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.stem.lin.visit_mut("stem", f);
        for (i, (d, r)) in self.down.iter_mut().zip(&mut self.enc_res).enumerate() {
            d.lin.visit_mut(&format!("down{i}"), f);
            r.visit_mut(&format!("enc_res{i}"), f);
        }
        self.to_code.visit_mut("to_code", f);
        f("codebook", &mut self.codebook);
        self.from_code.visit_mut("from_code", f);
        self.dec_mid.visit_mut("dec_mid", f);
        for (i, (c, r)) in self.up_conv.iter_mut().zip(&mut self.dec_res).enumerate() {
            c.lin.visit_mut(&format!("up{i}"), f);
            r.visit_mut(&format!("dec_res{i}"), f);
        }
        self.head.lin.visit_mut("head", f);
    }
}

/// Camera-specific convenience: decoded tokens to a valid pose.
pub fn tokens_to_pose<T: Real>(
    tok: &Tokenizer<T>,
    tokens: &TokenGrid,
    intrinsics: &Intrinsics,
) -> Result<(CameraPose, RayMap), PoseDecodeError> {
    let raw = tok.decode(tokens)?;
    let raw64: Vec<f64> = raw.iter().map(|&v| v as f64).collect();
    let map = normalize_raymap(&raw64, tok.config.height, tok.config.width)?;
    let pose = raymap_to_pose(&map, intrinsics)?;
    Ok((pose, map))
}

#[derive(Debug, thiserror::Error)]
pub enum PoseDecodeError {
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub fn raymap_channels_f32(map: &RayMap) -> Vec<f32> {
    map.to_channels().into_iter().map(|v| v as f32).collect()
}

/// Helper used by property tests and gradient checks: names of all
/// parameter tensors with a prefix.
pub fn prefixed_names<T: Real>(tok: &Tokenizer<T>, prefix: &str) -> Vec<String> {
    tok.param_names().into_iter().map(|n| join(prefix, &n)).collect()
}
