//! Decoder-only transformer with RMSNorm, QK-norm and 2D rotary embeddings.
//!
//! Activations are `(batch·seq) × dim` row-major. Attention takes an
//! arbitrary boolean [`AttentionMask`] shared by every sequence in a batch.
//! The backward pass is written out by hand and checked against finite
//! differences in the tests.

use std::ops::Range;

use gst_core::sequence::{AttentionMask, PositionTag, NUM_SEGMENTS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::layers::{inv_rms, silu, silu_grad, RMS_EPS};
use crate::nn::{join, matmul, Linear, Param, Parameters, Real, RmsNorm};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence of length {len} exceeds the maximum {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("attention mask of size {mask} does not match sequence length {len}")]
    MaskMismatch { mask: usize, len: usize },
    #[error("token id {0} outside the vocabulary")]
    InvalidToken(u32),
    #[error("generated id {id} at step {step} is outside the allowed range")]
    ModalityViolation { step: usize, id: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub rope_base: f64,
    /// Only 0 is supported; kept so configs state it explicitly.
    pub dropout: f64,
    pub mlp_ratio: usize,
    /// Token-grid extent; scalar positions get RoPE coordinates past it.
    pub grid_height: usize,
    pub grid_width: usize,
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads.max(1)
    }

    pub fn hidden_dim(&self) -> usize {
        self.mlp_ratio * self.model_dim
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.into()));
        if self.num_layers == 0 || self.model_dim == 0 || self.num_heads == 0 || self.vocab_size == 0 {
            return bad("layers, dim, heads and vocab must be positive");
        }
        if self.model_dim % self.num_heads != 0 {
            return bad("model_dim must be divisible by num_heads");
        }
        if self.head_dim() % 4 != 0 {
            return bad("head_dim must be divisible by 4 for 2D RoPE");
        }
        if self.dropout != 0.0 {
            return bad("dropout is not supported");
        }
        if self.mlp_ratio == 0 || self.max_seq_len == 0 || !(self.rope_base > 1.0) {
            return bad("mlp_ratio, max_seq_len must be positive and rope_base > 1");
        }
        Ok(())
    }
}

/// Rotation angles of one position: `head_dim / 2` entries, the first half
/// driven by the row coordinate and the second by the column.
pub fn rope_angles(row: u32, col: u32, head_dim: usize, base: f64) -> Vec<f64> {
    let quarter = head_dim / 4;
    let freq = |i: usize| base.powf(-(2.0 * i as f64) / (head_dim as f64 / 2.0));
    (0..quarter).map(|i| row as f64 * freq(i)).chain((0..quarter).map(|i| col as f64 * freq(i))).collect()
}

/// Rotates consecutive pairs of `v` by `(cos, sin)`; `sign = −1` applies
/// the inverse rotation.
pub fn rope_rotate<T: Real>(v: &mut [T], cos: &[T], sin: &[T], inverse: bool) {
    for (j, pair) in v.chunks_exact_mut(2).enumerate() {
        let (c, s) = (cos[j], if inverse { -sin[j] } else { sin[j] });
        let (a, b) = (pair[0], pair[1]);
        pair[0] = a * c - b * s;
        pair[1] = a * s + b * c;
    }
}

/// `rope2d` on one head vector with explicit grid coordinates.
pub fn rope2d<T: Real>(v: &[T], row: u32, col: u32, base: f64) -> Vec<T> {
    let angles = rope_angles(row, col, v.len(), base);
    let cos: Vec<T> = angles.iter().map(|a| T::from_f(a.cos())).collect();
    let sin: Vec<T> = angles.iter().map(|a| T::from_f(a.sin())).collect();
    let mut out = v.to_vec();
    rope_rotate(&mut out, &cos, &sin, false);
    out
}

/// RMS-normalizes `v` and multiplies by `scale`.
pub fn qk_norm<T: Real>(v: &[T], scale: T) -> Vec<T> {
    let r = inv_rms(v);
    v.iter().map(|&x| x * r * scale).collect()
}

/// A batch of equal-length sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<u32>,
    pub coords: Vec<(u32, u32)>,
    pub segments: Vec<u8>,
    pub batch: usize,
    pub len: usize,
}

impl Batch {
    pub fn new(config: &ModelConfig, seqs: &[(&[u32], &[PositionTag])]) -> Self {
        let len = seqs.first().map_or(0, |s| s.0.len());
        let mut b = Batch { ids: Vec::new(), coords: Vec::new(), segments: Vec::new(), batch: seqs.len(), len };
        for (ids, tags) in seqs {
            assert_eq!(ids.len(), len, "all sequences in a batch must have equal length");
            assert!(tags.len() >= len, "missing position tags");
            b.ids.extend_from_slice(ids);
            for t in &tags[..len] {
                b.coords.push(t.rope_coords(config.grid_height, config.grid_width));
                b.segments.push(t.segment() as u8);
            }
        }
        b
    }

    pub fn rows(&self) -> usize {
        self.batch * self.len
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub norm1: RmsNorm<T>,
    pub qkv: Linear<T>,
    pub q_scale: Param<T>,
    pub k_scale: Param<T>,
    pub wo: Linear<T>,
    pub norm2: RmsNorm<T>,
    pub gate_up: Linear<T>,
    pub down: Linear<T>,
}

impl<T: Real> Block<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "norm1.gain"), &self.norm1.gain);
        self.qkv.visit(&join(prefix, "qkv"), f);
        f(&join(prefix, "q_scale"), &self.q_scale);
        f(&join(prefix, "k_scale"), &self.k_scale);
        self.wo.visit(&join(prefix, "wo"), f);
        f(&join(prefix, "norm2.gain"), &self.norm2.gain);
        self.gate_up.visit(&join(prefix, "gate_up"), f);
        self.down.visit(&join(prefix, "down"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "norm1.gain"), &mut self.norm1.gain);
        self.qkv.visit_mut(&join(prefix, "qkv"), f);
        f(&join(prefix, "q_scale"), &mut self.q_scale);
        f(&join(prefix, "k_scale"), &mut self.k_scale);
        self.wo.visit_mut(&join(prefix, "wo"), f);
        f(&join(prefix, "norm2.gain"), &mut self.norm2.gain);
        self.gate_up.visit_mut(&join(prefix, "gate_up"), f);
        self.down.visit_mut(&join(prefix, "down"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transformer<T> {
    pub config: ModelConfig,
    pub tok_emb: Param<T>,
    pub seg_emb: Param<T>,
    pub blocks: Vec<Block<T>>,
    pub final_norm: RmsNorm<T>,
    pub head: Linear<T>,
}

impl<T: Real> Parameters<T> for Transformer<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Param<T>)) {
        f("tok_emb", &self.tok_emb);
        f("seg_emb", &self.seg_emb);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("blocks.{i}"), f);
        }
        f("final_norm.gain", &self.final_norm.gain);
        self.head.visit("head", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f("tok_emb", &mut self.tok_emb);
        f("seg_emb", &mut self.seg_emb);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("blocks.{i}"), f);
        }
        f("final_norm.gain", &mut self.final_norm.gain);
        self.head.visit_mut("head", f);
    }
}

struct BlockCache<T> {
    x_in: Vec<T>,
    h1: Vec<T>,
    inv1: Vec<T>,
    /// Per (batch, head, position): raw q/k rows, their inverse RMS, the
    /// rotated normalized q/k and v, all `hd` wide.
    q_raw: Vec<T>,
    k_raw: Vec<T>,
    inv_q: Vec<T>,
    inv_k: Vec<T>,
    qr: Vec<T>,
    kr: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
    attn: Vec<T>,
    x_mid: Vec<T>,
    h2: Vec<T>,
    inv2: Vec<T>,
    gate_up: Vec<T>,
    act: Vec<T>,
}

pub struct ForwardCache<T> {
    batch: Batch,
    cos: Vec<T>,
    sin: Vec<T>,
    blocks: Vec<BlockCache<T>>,
    x_final: Vec<T>,
    inv_final: Vec<T>,
    h_final: Vec<T>,
}

/// Per-layer keys and values of an incremental decode.
#[derive(Debug, Clone)]
pub struct KvCache<T> {
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    capacity: usize,
    len: usize,
}

impl<T: Real> KvCache<T> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    /// 0 selects the arg-max.
    pub temperature: f64,
    /// 0 disables top-k filtering.
    pub top_k: usize,
}

impl SamplingParams {
    pub const GREEDY: SamplingParams = SamplingParams { temperature: 0.0, top_k: 0 };
}

/// One position to generate: its tag, the id range it may take, and how
/// to sample it.
#[derive(Debug, Clone, PartialEq)]
pub struct GenStep {
    pub tag: PositionTag,
    pub allowed: Option<Range<u32>>,
    pub sampling: SamplingParams,
}

/// Draws a token from `logits` restricted to `allowed`. Ties in the
/// arg-max and top-k ranking go to the smaller id.
pub fn sample_from_logits<T: Real, R: Rng>(
    logits: &[T],
    allowed: Option<&Range<u32>>,
    params: &SamplingParams,
    rng: &mut R,
) -> u32 {
    let range = allowed.cloned().unwrap_or(0..logits.len() as u32);
    let mut cand: Vec<(u32, f64)> = range.map(|i| (i, logits[i as usize].as_f64())).collect();
    assert!(!cand.is_empty(), "empty candidate range");
    if params.temperature <= 0.0 {
        let mut best = cand[0];
        for &c in &cand[1..] {
            if c.1 > best.1 {
                best = c;
            }
        }
        return best.0;
    }
    cand.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    if params.top_k > 0 && params.top_k < cand.len() {
        cand.truncate(params.top_k);
    }
    let max = cand[0].1;
    let weights: Vec<f64> = cand.iter().map(|c| ((c.1 - max) / params.temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (c, w) in cand.iter().zip(&weights) {
        if u < *w {
            return c.0;
        }
        u -= w;
    }
    cand.last().expect("non-empty").0
}

/// Masked next-token cross-entropy. Returns the summed loss over masked-in
/// rows, their count, and `d(grad_scale · loss_sum)/d logits`.
pub fn cross_entropy<T: Real>(
    logits: &[T],
    targets: &[u32],
    mask: &[bool],
    vocab: usize,
    grad_scale: T,
) -> (f64, usize, Vec<T>) {
    let weights: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let (loss, _, grad) = weighted_cross_entropy(logits, targets, &weights, vocab, grad_scale);
    (loss, mask.iter().filter(|&&m| m).count(), grad)
}

/// Cross-entropy with a non-negative weight per row. Returns
/// `Σ w·ce`, `Σ w` and `d(grad_scale · Σ w·ce)/d logits`; rows with zero
/// weight are skipped entirely.
pub fn weighted_cross_entropy<T: Real>(
    logits: &[T],
    targets: &[u32],
    weights: &[f64],
    vocab: usize,
    grad_scale: T,
) -> (f64, f64, Vec<T>) {
    let mut grad = vec![T::zero(); logits.len()];
    let mut loss = 0.0;
    let mut total = 0.0;
    for (r, row) in logits.chunks_exact(vocab).enumerate() {
        let w = weights[r];
        if w == 0.0 {
            continue;
        }
        total += w;
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        let t = targets[r] as usize;
        loss += w * (lse - row[t]).as_f64();
        let scale = grad_scale * T::from_f(w);
        let g = &mut grad[r * vocab..(r + 1) * vocab];
        for (gi, &v) in g.iter_mut().zip(row) {
            *gi = (v - lse).exp() * scale;
        }
        g[t] -= scale;
    }
    (loss, total, grad)
}

impl<T: Real> Transformer<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h, f, v) = (config.model_dim, config.num_heads, config.hidden_dim(), config.vocab_size);
        let std = 0.02;
        let out_std = std / (2.0 * config.num_layers as f64).sqrt();
        let tok_emb = Param::normal(&[v, d], std, &mut rng);
        let seg_emb = Param::normal(&[NUM_SEGMENTS, d], std, &mut rng);
        let blocks = (0..config.num_layers)
            .map(|_| Block {
                norm1: RmsNorm::new(d),
                qkv: Linear::new(d, 3 * d, false, std, &mut rng),
                q_scale: Param::filled(&[h], T::one()),
                k_scale: Param::filled(&[h], T::one()),
                wo: Linear::new(d, d, false, out_std, &mut rng),
                norm2: RmsNorm::new(d),
                gate_up: Linear::new(d, 2 * f, false, std, &mut rng),
                down: Linear::new(f, d, false, out_std, &mut rng),
            })
            .collect();
        let head = Linear::new(d, v, false, std, &mut rng);
        Ok(Self { config, tok_emb, seg_emb, blocks, final_norm: RmsNorm::new(d), head })
    }

    fn check_batch(&self, batch: &Batch, mask: &AttentionMask) -> Result<(), ModelError> {
        if batch.len > self.config.max_seq_len {
            return Err(ModelError::SequenceTooLong { len: batch.len, max: self.config.max_seq_len });
        }
        if mask.size() != batch.len {
            return Err(ModelError::MaskMismatch { mask: mask.size(), len: batch.len });
        }
        if let Some(&bad) = batch.ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(ModelError::InvalidToken(bad));
        }
        Ok(())
    }

    fn rope_tables(&self, coords: &[(u32, u32)]) -> (Vec<T>, Vec<T>) {
        let hd = self.config.head_dim();
        let mut cos = Vec::with_capacity(coords.len() * hd / 2);
        let mut sin = Vec::with_capacity(coords.len() * hd / 2);
        for &(r, c) in coords {
            for a in rope_angles(r, c, hd, self.config.rope_base) {
                cos.push(T::from_f(a.cos()));
                sin.push(T::from_f(a.sin()));
            }
        }
        (cos, sin)
    }

    fn embed(&self, id: u32, segment: u8, out: &mut [T]) {
        let d = self.config.model_dim;
        let te = &self.tok_emb.value[id as usize * d..(id as usize + 1) * d];
        let se = &self.seg_emb.value[segment as usize * d..(segment as usize + 1) * d];
        for ((o, &a), &b) in out.iter_mut().zip(te).zip(se) {
            *o = a + b;
        }
    }

    /// Logits `(batch·len) × V` plus the activations for [`Self::backward`].
    pub fn forward(&self, batch: &Batch, mask: &AttentionMask) -> Result<(Vec<T>, ForwardCache<T>), ModelError> {
        self.check_batch(batch, mask)?;
        let cfg = &self.config;
        let (d, nh, hd, f) = (cfg.model_dim, cfg.num_heads, cfg.head_dim(), cfg.hidden_dim());
        let (bsz, n) = (batch.batch, batch.len);
        let rows = batch.rows();
        let (cos, sin) = self.rope_tables(&batch.coords);
        let mut x = vec![T::zero(); rows * d];
        for r in 0..rows {
            self.embed(batch.ids[r], batch.segments[r], &mut x[r * d..(r + 1) * d]);
        }
        let scale = T::from_f(1.0 / (hd as f64).sqrt());
        let mut caches = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let (h1, inv1) = blk.norm1.forward(&x);
            let qkv = blk.qkv.forward(&h1, rows);
            let per = bsz * nh * n;
            let mut c = BlockCache {
                x_in: x,
                h1,
                inv1,
                q_raw: vec![T::zero(); per * hd],
                k_raw: vec![T::zero(); per * hd],
                inv_q: vec![T::zero(); per],
                inv_k: vec![T::zero(); per],
                qr: vec![T::zero(); per * hd],
                kr: vec![T::zero(); per * hd],
                v: vec![T::zero(); per * hd],
                probs: vec![T::zero(); per * n],
                attn: vec![T::zero(); rows * d],
                x_mid: Vec::new(),
                h2: Vec::new(),
                inv2: Vec::new(),
                gate_up: Vec::new(),
                act: Vec::new(),
            };
            for b in 0..bsz {
                for h in 0..nh {
                    let base = (b * nh + h) * n;
                    let (sq, sk) = (blk.q_scale.value[h], blk.k_scale.value[h]);
                    for t in 0..n {
                        let r = b * n + t;
                        let src = &qkv[r * 3 * d..(r + 1) * 3 * d];
                        let slot = (base + t) * hd;
                        c.q_raw[slot..slot + hd].copy_from_slice(&src[h * hd..(h + 1) * hd]);
                        c.k_raw[slot..slot + hd].copy_from_slice(&src[d + h * hd..d + (h + 1) * hd]);
                        c.v[slot..slot + hd].copy_from_slice(&src[2 * d + h * hd..2 * d + (h + 1) * hd]);
                        let iq = inv_rms(&c.q_raw[slot..slot + hd]);
                        let ik = inv_rms(&c.k_raw[slot..slot + hd]);
                        c.inv_q[base + t] = iq;
                        c.inv_k[base + t] = ik;
                        for i in 0..hd {
                            c.qr[slot + i] = c.q_raw[slot + i] * iq * sq;
                            c.kr[slot + i] = c.k_raw[slot + i] * ik * sk;
                        }
                        let tab = r * hd / 2..(r + 1) * hd / 2;
                        rope_rotate(&mut c.qr[slot..slot + hd], &cos[tab.clone()], &sin[tab.clone()], false);
                        rope_rotate(&mut c.kr[slot..slot + hd], &cos[tab.clone()], &sin[tab], false);
                    }
                    let q = &c.qr[base * hd..(base + n) * hd];
                    let k = &c.kr[base * hd..(base + n) * hd];
                    let p = &mut c.probs[base * n..(base + n) * n];
                    matmul(q, k, p, n, hd, n, false, true, false);
                    for (qi, row) in p.chunks_exact_mut(n).enumerate() {
                        softmax_masked(row, mask.row(qi), scale);
                    }
                    let mut o = vec![T::zero(); n * hd];
                    matmul(p, &c.v[base * hd..(base + n) * hd], &mut o, n, n, hd, false, false, false);
                    for t in 0..n {
                        let r = b * n + t;
                        c.attn[r * d + h * hd..r * d + (h + 1) * hd].copy_from_slice(&o[t * hd..(t + 1) * hd]);
                    }
                }
            }
            let proj = blk.wo.forward(&c.attn, rows);
            let x_mid: Vec<T> = c.x_in.iter().zip(&proj).map(|(&a, &b)| a + b).collect();
            let (h2, inv2) = blk.norm2.forward(&x_mid);
            let gate_up = blk.gate_up.forward(&h2, rows);
            let mut act = vec![T::zero(); rows * f];
            for r in 0..rows {
                let gu = &gate_up[r * 2 * f..(r + 1) * 2 * f];
                for i in 0..f {
                    act[r * f + i] = silu(gu[i]) * gu[f + i];
                }
            }
            let mlp = blk.down.forward(&act, rows);
            x = x_mid.iter().zip(&mlp).map(|(&a, &b)| a + b).collect();
            c.x_mid = x_mid;
            c.h2 = h2;
            c.inv2 = inv2;
            c.gate_up = gate_up;
            c.act = act;
            caches.push(c);
        }
        let (h_final, inv_final) = self.final_norm.forward(&x);
        let logits = self.head.forward(&h_final, rows);
        Ok((logits, ForwardCache { batch: batch.clone(), cos, sin, blocks: caches, x_final: x, inv_final, h_final }))
    }

    pub fn logits(&self, batch: &Batch, mask: &AttentionMask) -> Result<Vec<T>, ModelError> {
        Ok(self.forward(batch, mask)?.0)
    }

    /// Accumulates parameter gradients for upstream gradient `dlogits`.
    pub fn backward(&mut self, cache: &ForwardCache<T>, dlogits: &[T]) {
        let cfg = self.config.clone();
        let (d, nh, hd, f) = (cfg.model_dim, cfg.num_heads, cfg.head_dim(), cfg.hidden_dim());
        let batch = &cache.batch;
        let (bsz, n) = (batch.batch, batch.len);
        let rows = batch.rows();
        let scale = T::from_f(1.0 / (hd as f64).sqrt());
        let inv_hd = T::from_f(1.0 / hd as f64);
        let dh = self.head.backward(&cache.h_final, dlogits, rows, true).expect("dx");
        let mut dx = self.final_norm.backward(&cache.x_final, &cache.inv_final, &dh);
        for (li, c) in cache.blocks.iter().enumerate().rev() {
            let blk = &mut self.blocks[li];
            // MLP branch
            let dact = blk.down.backward(&c.act, &dx, rows, true).expect("dx");
            let mut dgu = vec![T::zero(); rows * 2 * f];
            for r in 0..rows {
                let gu = &c.gate_up[r * 2 * f..(r + 1) * 2 * f];
                for i in 0..f {
                    let da = dact[r * f + i];
                    dgu[r * 2 * f + i] = da * gu[f + i] * silu_grad(gu[i]);
                    dgu[r * 2 * f + f + i] = da * silu(gu[i]);
                }
            }
            let dh2 = blk.gate_up.backward(&c.h2, &dgu, rows, true).expect("dx");
            let dmid = blk.norm2.backward(&c.x_mid, &c.inv2, &dh2);
            dx.iter_mut().zip(&dmid).for_each(|(a, &b)| *a += b);
            // attention branch
            let dattn = blk.wo.backward(&c.attn, &dx, rows, true).expect("dx");
            let mut dqkv = vec![T::zero(); rows * 3 * d];
            let mut d_o = vec![T::zero(); n * hd];
            let mut dp = vec![T::zero(); n * n];
            let mut dq = vec![T::zero(); n * hd];
            let mut dk = vec![T::zero(); n * hd];
            let mut dv = vec![T::zero(); n * hd];
            for b in 0..bsz {
                for h in 0..nh {
                    let base = (b * nh + h) * n;
                    for t in 0..n {
                        let r = b * n + t;
                        d_o[t * hd..(t + 1) * hd].copy_from_slice(&dattn[r * d + h * hd..r * d + (h + 1) * hd]);
                    }
                    let p = &c.probs[base * n..(base + n) * n];
                    let v = &c.v[base * hd..(base + n) * hd];
                    matmul(&d_o, v, &mut dp, n, hd, n, false, true, false);
                    matmul(p, &d_o, &mut dv, n, n, hd, true, false, false);
                    // softmax backward, folding in the 1/sqrt(hd) scale
                    for (prow, dprow) in p.chunks_exact(n).zip(dp.chunks_exact_mut(n)) {
                        let dot: T = prow.iter().zip(dprow.iter()).map(|(&a, &b)| a * b).sum();
                        for (g, &pv) in dprow.iter_mut().zip(prow) {
                            *g = pv * (*g - dot) * scale;
                        }
                    }
                    let q = &c.qr[base * hd..(base + n) * hd];
                    let k = &c.kr[base * hd..(base + n) * hd];
                    matmul(&dp, k, &mut dq, n, n, hd, false, false, false);
                    matmul(&dp, q, &mut dk, n, n, hd, true, false, false);
                    let (sq, sk) = (blk.q_scale.value[h], blk.k_scale.value[h]);
                    let mut gsq = T::zero();
                    let mut gsk = T::zero();
                    for t in 0..n {
                        let r = b * n + t;
                        let slot = (base + t) * hd;
                        let tab = r * hd / 2..(r + 1) * hd / 2;
                        let dqt = &mut dq[t * hd..(t + 1) * hd];
                        let dkt = &mut dk[t * hd..(t + 1) * hd];
                        rope_rotate(dqt, &cache.cos[tab.clone()], &cache.sin[tab.clone()], true);
                        rope_rotate(dkt, &cache.cos[tab.clone()], &cache.sin[tab], true);
                        let qraw = &c.q_raw[slot..slot + hd];
                        let kraw = &c.k_raw[slot..slot + hd];
                        let (iq, ik) = (c.inv_q[base + t], c.inv_k[base + t]);
                        let out = &mut dqkv[r * 3 * d..(r + 1) * 3 * d];
                        gsq += norm_backward(qraw, iq, sq, dqt, &mut out[h * hd..(h + 1) * hd], inv_hd);
                        gsk += norm_backward(kraw, ik, sk, dkt, &mut out[d + h * hd..d + (h + 1) * hd], inv_hd);
                        out[2 * d + h * hd..2 * d + (h + 1) * hd].copy_from_slice(&dv[t * hd..(t + 1) * hd]);
                    }
                    blk.q_scale.grad[h] += gsq;
                    blk.k_scale.grad[h] += gsk;
                }
            }
            let dh1 = blk.qkv.backward(&c.h1, &dqkv, rows, true).expect("dx");
            let dx_in = blk.norm1.backward(&c.x_in, &c.inv1, &dh1);
            dx.iter_mut().zip(&dx_in).for_each(|(a, &b)| *a += b);
        }
        for r in 0..rows {
            let id = batch.ids[r] as usize;
            let seg = batch.segments[r] as usize;
            let g = &dx[r * d..(r + 1) * d];
            for i in 0..d {
                self.tok_emb.grad[id * d + i] += g[i];
                self.seg_emb.grad[seg * d + i] += g[i];
            }
        }
    }

    /// Forward, masked cross-entropy and backward in one call. Returns the
    /// summed loss and the number of supervised positions.
    pub fn loss_and_backward(
        &mut self,
        batch: &Batch,
        targets: &[u32],
        loss_mask: &[bool],
        mask: &AttentionMask,
        grad_scale: T,
    ) -> Result<(f64, usize), ModelError> {
        let (logits, cache) = self.forward(batch, mask)?;
        let (loss, count, dlogits) = cross_entropy(&logits, targets, loss_mask, self.config.vocab_size, grad_scale);
        self.backward(&cache, &dlogits);
        Ok((loss, count))
    }

    /// Weighted variant of [`Transformer::loss_and_backward`]. Returns
    /// `Σ w·ce` and `Σ w`.
    pub fn weighted_loss_and_backward(
        &mut self,
        batch: &Batch,
        targets: &[u32],
        weights: &[f64],
        mask: &AttentionMask,
        grad_scale: T,
    ) -> Result<(f64, f64), ModelError> {
        let (logits, cache) = self.forward(batch, mask)?;
        let (loss, total, dlogits) =
            weighted_cross_entropy(&logits, targets, weights, self.config.vocab_size, grad_scale);
        self.backward(&cache, &dlogits);
        Ok((loss, total))
    }

    pub fn new_cache(&self) -> KvCache<T> {
        let cap = self.config.max_seq_len;
        let size = self.config.num_heads * cap * self.config.head_dim();
        KvCache {
            keys: vec![vec![T::zero(); size]; self.config.num_layers],
            values: vec![vec![T::zero(); size]; self.config.num_layers],
            capacity: cap,
            len: 0,
        }
    }

    /// Appends one token to the cache and returns the next-token logits.
    /// Attention is causal over everything cached so far.
    pub fn step(&self, cache: &mut KvCache<T>, id: u32, tag: PositionTag) -> Result<Vec<T>, ModelError> {
        let cfg = &self.config;
        if cache.len >= cache.capacity {
            return Err(ModelError::SequenceTooLong { len: cache.len + 1, max: cache.capacity });
        }
        if id as usize >= cfg.vocab_size {
            return Err(ModelError::InvalidToken(id));
        }
        let (d, nh, hd, f) = (cfg.model_dim, cfg.num_heads, cfg.head_dim(), cfg.hidden_dim());
        let (row, col) = tag.rope_coords(cfg.grid_height, cfg.grid_width);
        let (cos, sin): (Vec<T>, Vec<T>) = rope_angles(row, col, hd, cfg.rope_base)
            .iter()
            .map(|a| (T::from_f(a.cos()), T::from_f(a.sin())))
            .unzip();
        let t = cache.len;
        let n = t + 1;
        let scale = T::from_f(1.0 / (hd as f64).sqrt());
        let mut x = vec![T::zero(); d];
        self.embed(id, tag.segment() as u8, &mut x);
        let mut scores = vec![T::zero(); n];
        for (li, blk) in self.blocks.iter().enumerate() {
            let (h1, _) = blk.norm1.forward(&x);
            let qkv = blk.qkv.forward(&h1, 1);
            let mut attn = vec![T::zero(); d];
            for h in 0..nh {
                let mut q = qk_norm(&qkv[h * hd..(h + 1) * hd], blk.q_scale.value[h]);
                let mut k = qk_norm(&qkv[d + h * hd..d + (h + 1) * hd], blk.k_scale.value[h]);
                rope_rotate(&mut q, &cos, &sin, false);
                rope_rotate(&mut k, &cos, &sin, false);
                let slot = (h * cache.capacity + t) * hd;
                cache.keys[li][slot..slot + hd].copy_from_slice(&k);
                cache.values[li][slot..slot + hd].copy_from_slice(&qkv[2 * d + h * hd..2 * d + (h + 1) * hd]);
                let keys = &cache.keys[li][h * cache.capacity * hd..(h * cache.capacity + n) * hd];
                for (s, kk) in scores.iter_mut().zip(keys.chunks_exact(hd)) {
                    *s = q.iter().zip(kk).map(|(&a, &b)| a * b).sum();
                }
                softmax_masked(&mut scores, &vec![true; n], scale);
                let vals = &cache.values[li][h * cache.capacity * hd..(h * cache.capacity + n) * hd];
                let out = &mut attn[h * hd..(h + 1) * hd];
                for (&p, vv) in scores.iter().zip(vals.chunks_exact(hd)) {
                    for (o, &v) in out.iter_mut().zip(vv) {
                        *o += p * v;
                    }
                }
            }
            let proj = blk.wo.forward(&attn, 1);
            x.iter_mut().zip(&proj).for_each(|(a, &b)| *a += b);
            let (h2, _) = blk.norm2.forward(&x);
            let gu = blk.gate_up.forward(&h2, 1);
            let act: Vec<T> = (0..f).map(|i| silu(gu[i]) * gu[f + i]).collect();
            let mlp = blk.down.forward(&act, 1);
            x.iter_mut().zip(&mlp).for_each(|(a, &b)| *a += b);
        }
        cache.len = n;
        let (hf, _) = self.final_norm.forward(&x);
        Ok(self.head.forward(&hf, 1))
    }

    /// Autoregressive generation after a prefix. With `use_cache = false`
    /// every step recomputes the full causal forward pass; both paths draw
    /// from `rng` identically.
    pub fn generate<R: Rng>(
        &self,
        prefix_ids: &[u32],
        prefix_tags: &[PositionTag],
        plan: &[GenStep],
        rng: &mut R,
        use_cache: bool,
        constrained: bool,
    ) -> Result<Vec<u32>, ModelError> {
        assert_eq!(prefix_ids.len(), prefix_tags.len());
        assert!(!prefix_ids.is_empty(), "generation needs a non-empty prefix");
        let total = prefix_ids.len() + plan.len();
        if total > self.config.max_seq_len + 1 {
            return Err(ModelError::SequenceTooLong { len: total, max: self.config.max_seq_len });
        }
        let mut out = Vec::with_capacity(plan.len());
        let mut ids = prefix_ids.to_vec();
        let mut tags = prefix_tags.to_vec();
        let mut cache = use_cache.then(|| self.new_cache());
        let mut logits = match &mut cache {
            Some(c) => {
                let mut last = Vec::new();
                for (&id, &tag) in ids.iter().zip(&tags) {
                    last = self.step(c, id, tag)?;
                }
                last
            }
            None => self.last_logits(&ids, &tags)?,
        };
        for (i, st) in plan.iter().enumerate() {
            let allowed = if constrained { st.allowed.as_ref() } else { None };
            let id = sample_from_logits(&logits, allowed, &st.sampling, rng);
            if let Some(r) = &st.allowed {
                if !r.contains(&id) && !constrained {
                    // Reported to the caller, who decides whether to parse.
                    log::debug!("unconstrained sample {id} outside {r:?} at step {i}");
                }
            }
            out.push(id);
            if i + 1 == plan.len() {
                break;
            }
            ids.push(id);
            tags.push(st.tag);
            logits = match &mut cache {
                Some(c) => self.step(c, id, st.tag)?,
                None => self.last_logits(&ids, &tags)?,
            };
        }
        Ok(out)
    }

    fn last_logits(&self, ids: &[u32], tags: &[PositionTag]) -> Result<Vec<T>, ModelError> {
        let batch = Batch::new(&self.config, &[(ids, tags)]);
        let logits = self.logits(&batch, &AttentionMask::causal(ids.len()))?;
        let v = self.config.vocab_size;
        Ok(logits[(ids.len() - 1) * v..].to_vec())
    }

    /// Converts parameters to another precision (e.g. `f32` → `f64`).
    pub fn cast<U: Real>(&self) -> Transformer<U> {
        let mut out = Transformer::<U>::new(self.config.clone(), 0).expect("valid config");
        let mut src = Vec::new();
        self.visit(&mut |_, p| src.push(p.value.iter().map(|v| v.as_f64()).collect::<Vec<_>>()));
        let mut i = 0;
        out.visit_mut(&mut |_, p| {
            p.value = src[i].iter().map(|&v| U::from_f(v)).collect();
            i += 1;
        });
        out
    }
}

/// Backward of `y = rope⁻¹`-space `x·inv_rms(x)·s`: writes `dx` and returns
/// the gradient on `s`.
fn norm_backward<T: Real>(x: &[T], inv: T, s: T, dy: &[T], dx: &mut [T], inv_dim: T) -> T {
    let mut gs = T::zero();
    let mut dot = T::zero();
    for i in 0..x.len() {
        gs += dy[i] * x[i] * inv;
        dot += dy[i] * x[i];
    }
    let coef = inv * inv * inv * s * dot * inv_dim;
    for i in 0..x.len() {
        dx[i] = inv * s * dy[i] - coef * x[i];
    }
    gs
}

/// Scales `row`, masks disallowed keys to zero probability and applies a
/// numerically stable softmax in place.
fn softmax_masked<T: Real>(row: &mut [T], allowed: &[bool], scale: T) {
    let mut max = T::neg_infinity();
    for (v, &ok) in row.iter_mut().zip(allowed) {
        if ok {
            *v *= scale;
            if *v > max {
                max = *v;
            }
        }
    }
    let mut sum = T::zero();
    for (v, &ok) in row.iter_mut().zip(allowed) {
        if ok {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = T::zero();
        }
    }
    let inv = T::one() / sum;
    row.iter_mut().for_each(|v| *v *= inv);
}

/// Epsilon used inside QK-norm, exposed for tests.
pub const QK_NORM_EPS: f64 = RMS_EPS;
