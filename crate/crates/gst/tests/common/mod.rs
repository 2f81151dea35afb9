//! Oracle checks shared by the property tests and the acceptance target.
#![allow(dead_code)]

use gst::nn::Parameters;
use gst::transformer::{Batch, GenStep, ModelConfig, SamplingParams, Transformer};
use gst_core::sequence::{build_attention_mask, AttentionMask, MaskMode, PositionTag, Segment};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_config(vocab: usize) -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        model_dim: 16,
        num_heads: 2,
        vocab_size: vocab,
        max_seq_len: 64,
        rope_base: 10000.0,
        dropout: 0.0,
        mlp_ratio: 4,
        grid_height: 3,
        grid_width: 3,
    }
}

pub fn random_tags(n: usize, rng: &mut ChaCha8Rng) -> Vec<PositionTag> {
    (0..n)
        .map(|i| {
            if i == 0 || rng.random_bool(0.1) {
                PositionTag::Scalar(rng.random_range(0..3))
            } else {
                let segment = [Segment::Observation, Segment::TargetImage, Segment::TargetCamera][rng.random_range(0..3)];
                PositionTag::Grid { row: rng.random_range(0..3), col: rng.random_range(0..3), segment }
            }
        })
        .collect()
}

/// Largest relative error between analytic and central-difference
/// gradients over every parameter entry of the tiny config, plus the count
/// of entries compared.
pub fn transformer_gradient_check(seed: u64) -> (f64, usize) {
    let cfg = tiny_config(13);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Transformer::<f64>::new(cfg.clone(), seed).unwrap();
    // move the learned scales and gains off 1 so their gradients are generic
    model.visit_mut(&mut |name, p| {
        if name.contains("scale") || name.contains("gain") {
            p.value.iter_mut().for_each(|v| *v = 1.0 + 0.3 * rng.random_range(-1.0..1.0));
        }
    });
    let n = 10;
    let seqs: Vec<(Vec<u32>, Vec<PositionTag>)> =
        (0..2).map(|_| ((0..n).map(|_| rng.random_range(0..13)).collect(), random_tags(n, &mut rng))).collect();
    let refs: Vec<(&[u32], &[PositionTag])> = seqs.iter().map(|(a, b)| (a.as_slice(), b.as_slice())).collect();
    let batch = Batch::new(&cfg, &refs);
    let targets: Vec<u32> = (0..2 * n).map(|_| rng.random_range(0..13)).collect();
    let loss_mask: Vec<bool> = (0..2 * n).map(|i| i % 3 != 0).collect();
    // packed mask truncated to the sequence: exercises non-causal blocking
    let mask = build_attention_mask(MaskMode::PackedJoint, 2).truncated(n);
    let count = loss_mask.iter().filter(|&&m| m).count() as f64;
    model.zero_grad();
    model.loss_and_backward(&batch, &targets, &loss_mask, &mask, 1.0 / count).unwrap();
    let loss = |m: &Transformer<f64>| {
        let logits = m.logits(&batch, &mask).unwrap();
        gst::transformer::cross_entropy(&logits, &targets, &loss_mask, 13, 1.0).0 / count
    };
    let mut analytic = Vec::new();
    model.visit(&mut |_, p| analytic.push(p.grad.clone()));
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    let mut compared = 0;
    for (pi, g) in analytic.iter().enumerate() {
        for i in 0..g.len() {
            let eval = |delta: f64| {
                let mut m = model.clone();
                let mut k = 0;
                m.visit_mut(&mut |_, p| {
                    if k == pi {
                        p.value[i] += delta;
                    }
                    k += 1;
                });
                loss(&m)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let denom = fd.abs().max(g[i].abs());
            // entries whose gradient is numerically zero (e.g. unused
            // embedding rows) are compared absolutely
            let err = if denom < 1e-7 { (fd - g[i]).abs() / 1e-7 * 1e-3 } else { (fd - g[i]).abs() / denom };
            worst = worst.max(err);
            compared += 1;
        }
    }
    (worst, compared)
}

/// Max relative deviation between cached incremental logits and full
/// recomputation over `prefixes` random sequences.
pub fn kv_cache_check<T: gst::nn::Real>(prefixes: usize, seed: u64) -> f64 {
    let cfg = tiny_config(17);
    let model = Transformer::<T>::new(cfg.clone(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..prefixes {
        let n = rng.random_range(1..=30);
        let ids: Vec<u32> = (0..n).map(|_| rng.random_range(0..17)).collect();
        let tags = random_tags(n, &mut rng);
        let full = model.logits(&Batch::new(&cfg, &[(&ids, &tags)]), &AttentionMask::causal(n)).unwrap();
        let mut cache = model.new_cache();
        for t in 0..n {
            let step = model.step(&mut cache, ids[t], tags[t]).unwrap();
            let reference = &full[t * 17..(t + 1) * 17];
            let scale = reference.iter().map(|v| v.as_f64().abs()).fold(0.0, f64::max).max(1e-12);
            for (a, b) in step.iter().zip(reference) {
                worst = worst.max((a.as_f64() - b.as_f64()).abs() / scale);
            }
        }
    }
    worst
}

/// Number of prefixes (out of `prefixes`) where cached and uncached
/// sampling disagree on any token.
pub fn sampling_equivalence_mismatches(prefixes: usize, seed: u64) -> usize {
    let cfg = tiny_config(17);
    let model = Transformer::<f64>::new(cfg.clone(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let mut mismatches = 0;
    for p in 0..prefixes {
        let n = rng.random_range(1..=10);
        let ids: Vec<u32> = (0..n).map(|_| rng.random_range(0..17)).collect();
        let tags = random_tags(n, &mut rng);
        let plan: Vec<GenStep> = random_tags(12, &mut rng)
            .into_iter()
            .map(|tag| GenStep {
                tag,
                allowed: Some(4..12),
                sampling: SamplingParams { temperature: 1.0, top_k: 5 },
            })
            .collect();
        let a = model.generate(&ids, &tags, &plan, &mut ChaCha8Rng::seed_from_u64(p as u64), true, true).unwrap();
        let b = model.generate(&ids, &tags, &plan, &mut ChaCha8Rng::seed_from_u64(p as u64), false, true).unwrap();
        assert!(a.iter().all(|id| (4..12).contains(id)));
        if a != b {
            mismatches += 1;
        }
    }
    mismatches
}

/// Worst deviation of the RoPE relative-offset property over random trials.
pub fn rope_relative_check(trials: usize, seed: u64) -> f64 {
    use gst::transformer::rope2d;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let hd = 4 * rng.random_range(1..=8);
        let q: Vec<f64> = (0..hd).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..hd).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (r1, c1, r2, c2) = (rng.random_range(0..20), rng.random_range(0..20), rng.random_range(0..20), rng.random_range(0..20));
        let (dr, dc) = (rng.random_range(0..20), rng.random_range(0..20));
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let base = dot(&rope2d(&q, r1, c1, 10000.0), &rope2d(&k, r2, c2, 10000.0));
        let shifted = dot(&rope2d(&q, r1 + dr, c1 + dc, 10000.0), &rope2d(&k, r2 + dr, c2 + dc, 10000.0));
        worst = worst.max((base - shifted).abs());
        let norm = |a: &[f64]| dot(a, a).sqrt();
        worst = worst.max((norm(&rope2d(&q, r1, c1, 10000.0)) - norm(&q)).abs());
    }
    worst
}

/// Mean next-token loss of a freshly initialized model on uniform random
/// tokens, and ln V.
pub fn init_loss(cfg: &ModelConfig, seed: u64) -> (f64, f64) {
    let model = Transformer::<f32>::new(cfg.clone(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = cfg.vocab_size as u32;
    let n = cfg.max_seq_len.min(64);
    let mut total = 0.0;
    let mut count = 0;
    for _ in 0..4 {
        let ids: Vec<u32> = (0..n).map(|_| rng.random_range(0..v)).collect();
        let tags = random_tags(n, &mut rng);
        let logits = model.logits(&Batch::new(cfg, &[(&ids, &tags)]), &AttentionMask::causal(n)).unwrap();
        let targets: Vec<u32> = (0..n).map(|_| rng.random_range(0..v)).collect();
        let (l, c, _) = gst::transformer::cross_entropy(&logits, &targets, &vec![true; n], cfg.vocab_size, 1.0f32);
        total += l;
        count += c;
    }
    (total / count as f64, (cfg.vocab_size as f64).ln())
}

/// Max change of second-branch logits of a packed sequence when
/// first-branch tokens are substituted.
pub fn packed_invariance_check(trials: usize, seed: u64) -> f64 {
    let (h, w) = (2, 2);
    let l = h * w;
    let vocab = gst_core::sequence::Vocabulary::new(8, 8);
    let mask = build_attention_mask(MaskMode::PackedJoint, l);
    let n = mask.size();
    let cfg = ModelConfig { max_seq_len: n, grid_height: h, grid_width: w, vocab_size: vocab.size() as usize, ..tiny_config(0) };
    let model = Transformer::<f32>::new(cfg.clone(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let grid = |m, rng: &mut ChaCha8Rng| {
            gst_core::sequence::TokenGrid::new(h, w, (0..l).map(|_| rng.random_range(0..8)).collect(), m).unwrap()
        };
        use gst_core::sequence::Modality::{Camera, Image};
        let (o, i, c) = (grid(Image, &mut rng), grid(Image, &mut rng), grid(Camera, &mut rng));
        let layout = gst_core::sequence::build_packed_sequence(&vocab, &o, &i, &c).unwrap();
        let base = model.logits(&Batch::new(&cfg, &[(&layout.ids, &layout.tags)]), &mask).unwrap();
        let mut ids = layout.ids.clone();
        // permute and substitute first-branch tokens, keeping modality ranges
        ids[l + 2..2 * l + 2].reverse();
        ids[2 * l + 2..3 * l + 2].rotate_left(1);
        ids[l + 2] = vocab.to_global(Camera, rng.random_range(0..8));
        let other = model.logits(&Batch::new(&cfg, &[(&ids, &layout.tags)]), &mask).unwrap();
        let v = cfg.vocab_size;
        for p in 3 * l + 2..n {
            for j in 0..v {
                worst = worst.max((base[p * v + j] - other[p * v + j]).abs() as f64);
            }
        }
    }
    worst
}
