use gst_core::quantizer::{init_codebook, quantize, vq_loss, Codebook, UsageCounter};
use gst_core::sequence::{build_sequence, loss_targets, parse_sequence, Modality, Ordering, TokenGrid, Vocabulary};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Exhaustive nearest neighbor, written independently of `Codebook::nearest`.
fn brute_force_nearest(f: &[f64], cb: &[f64], dim: usize) -> usize {
    let dists: Vec<f64> = cb.chunks(dim).map(|c| c.iter().zip(f).map(|(a, b)| (a - b) * (a - b)).sum()).collect();
    let best = dists.iter().cloned().fold(f64::INFINITY, f64::min);
    dists.iter().position(|&d| d == best).unwrap()
}

#[test]
fn nearest_neighbor_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..10_000 {
        let dim = 1 + case % 6;
        let k = 2 + (case / 6) % 30;
        let vectors: Vec<f64> = (0..k * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cb = Codebook::new(vectors.clone(), k, dim).unwrap();
        let f: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect();
        let r = quantize(&f, &cb).unwrap();
        assert_eq!(r.indices[0], brute_force_nearest(&f, &vectors, dim));
        assert_eq!(&r.quantized[..], cb.codeword(r.indices[0]));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn quantize_is_idempotent(seed in any::<u64>(), cells in 1usize..20) {
        let cb = init_codebook::<f64>(seed, 16, 3, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let f: Vec<f64> = (0..cells * 3).map(|_| rng.random_range(-0.1..0.1)).collect();
        let r = quantize(&f, &cb).unwrap();
        let again = quantize(&r.quantized, &cb).unwrap();
        prop_assert_eq!(&again.indices, &r.indices);
        prop_assert_eq!(vq_loss(&again, 0.25), 0.0);
    }

    #[test]
    fn shift_invariance(seed in any::<u64>(), shift in proptest::array::uniform3(-2.0f64..2.0)) {
        // dyadic values keep the shifted distances exact
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut q = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-64i32..64) as f64 / 64.0).collect() };
        let vectors = q(8 * 3);
        let f = q(10 * 3);
        let shift = shift.map(|s| (s * 16.0).round() / 16.0);
        let add = |v: &[f64]| -> Vec<f64> { v.iter().enumerate().map(|(i, x)| x + shift[i % 3]).collect() };
        let a = quantize(&f, &Codebook::new(vectors.clone(), 8, 3).unwrap()).unwrap();
        let b = quantize(&add(&f), &Codebook::new(add(&vectors), 8, 3).unwrap()).unwrap();
        prop_assert_eq!(a.indices, b.indices);
    }

    #[test]
    fn vq_loss_zero_iff_exact(seed in any::<u64>()) {
        let cb = init_codebook::<f64>(seed, 8, 2, None).unwrap();
        let exact = cb.lookup(&[3, 1, 7]).unwrap();
        prop_assert_eq!(vq_loss(&quantize(&exact, &cb).unwrap(), 0.25), 0.0);
        let mut off = exact.clone();
        off[2] += 1e-3;
        prop_assert!(vq_loss(&quantize(&off, &cb).unwrap(), 0.25) > 0.0);
    }

    #[test]
    fn usage_is_monotone(batches in proptest::collection::vec(proptest::collection::vec(0usize..32, 1..20), 1..10)) {
        let mut c = UsageCounter::new(32);
        let mut prev = 0.0;
        for b in &batches {
            c.record(b).unwrap();
            let u = c.usage().unwrap();
            prop_assert!(u >= prev);
            prev = u;
        }
        prop_assert_eq!(c.total(), c.counts().iter().sum::<u64>());
    }
}

#[test]
fn sequence_round_trip_10k_layouts() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..10_000 {
        let h = rng.random_range(1..5);
        let w = rng.random_range(1..5);
        let vocab = Vocabulary::new(rng.random_range(2..300), rng.random_range(2..300));
        let mut grid = |m: Modality| {
            let k = vocab.local_size(m);
            TokenGrid::new(h, w, (0..h * w).map(|_| rng.random_range(0..k)).collect(), m).unwrap()
        };
        let (o, i, c) = (grid(Modality::Image), grid(Modality::Image), grid(Modality::Camera));
        let ordering = if rng.random_bool(0.5) { Ordering::CamThenImg } else { Ordering::ImgThenCam };
        let layout = build_sequence(&vocab, &o, &i, &c, ordering).unwrap();
        let parsed = parse_sequence(&layout.ids, &vocab, (h, w)).unwrap();
        assert_eq!(parsed.observation, o);
        assert_eq!(parsed.image(), &i);
        assert_eq!(parsed.camera(), &c);
        assert_eq!(parsed.ordering, ordering);

        // every target token is supervised exactly once
        let t = loss_targets(&layout);
        let l = h * w;
        let supervised: Vec<usize> = t.mask.iter().enumerate().filter(|(_, &m)| m).map(|(p, _)| p + 1).collect();
        assert_eq!(supervised, (l + 2..3 * l + 2).collect::<Vec<_>>());
        for id in &layout.ids {
            assert!(vocab.classify(*id).is_some());
        }
    }
}

#[test]
fn uniform_logits_cross_entropy_is_ln_v() {
    let v = 18usize;
    let logits = vec![0.0f64; v];
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    let ce = lse - logits[3];
    assert!((ce - 2.8904).abs() < 1e-4);
}
