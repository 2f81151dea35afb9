//! Evaluation suites: tokenizer round trips, pose estimation, novel view
//! synthesis and prior sampling. Every report carries the matching ceiling
//! (ground-truth tokens through the codec) or baseline so model numbers can
//! be read against what the codec and the camera prior allow.

use gst_core::geometry::{filter_pair, rotation_geodesic_error, CameraPose, Intrinsics, Mat3};
use gst_core::metrics::{fraction_within, mean, median, psnr, quantile_grid, ssim, wasserstein_1d, IMAGE_PEAK};
use gst_core::quantizer::UsageCounter;
use gst_core::scenes::{elevation_deg, sample_camera, sample_scene, CameraSampler};
use gst_core::seed::{derive, stream};
use gst_core::sequence::{
    allowed_range, build_sequence, Modality, Ordering, SampleLayout, TokenGrid, Vocabulary,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::data::Dataset;
use crate::error::{GstError, Result};
use crate::tokenizer::{tokens_to_pose, Tokenizer};
use crate::train::{camera_map, map_intrinsics, relative_camera, TokenizedPairs, TokenizerSource};
use crate::transformer::{GenStep, SamplingParams, Transformer};

/// Failed pose decodes count as this rotation error.
pub const FAILURE_ROTATION_DEG: f64 = 180.0;

pub const LPIPS_NOTE: &str = "LPIPS not computed; PSNR and SSIM only";

/// Up to `max` indices spread evenly over `0..n` (all of them when `max`
/// is 0 or at least `n`).
pub fn spread_indices(n: usize, max: usize) -> Vec<usize> {
    if max == 0 || max >= n {
        return (0..n).collect();
    }
    (0..max).map(|k| k * n / max).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTokenizerReport {
    pub kind: String,
    pub items: usize,
    pub psnr_mean: f64,
    pub psnr_median: f64,
    pub ssim_mean: f64,
    pub codebook_usage: f64,
}

pub fn evaluate_image_tokenizer(tok: &Tokenizer<f32>, src: &TokenizerSource, max_items: usize) -> Result<ImageTokenizerReport> {
    let (h, w) = (tok.config.height, tok.config.width);
    let mut usage = UsageCounter::new(tok.config.codebook_size);
    let (mut p, mut s) = (Vec::new(), Vec::new());
    for i in spread_indices(src.len(), max_items) {
        let x = src.item(i);
        let (grid, _) = tok.encode(&x)?;
        usage.record(&grid.indices.iter().map(|&k| k as usize).collect::<Vec<_>>())?;
        let y = tok.decode(&grid)?;
        p.push(psnr(&x, &y, IMAGE_PEAK));
        s.push(ssim(&x, &y, h, w, 3));
    }
    Ok(ImageTokenizerReport {
        kind: "image_tokenizer_eval".into(),
        items: p.len(),
        psnr_mean: mean(&p),
        psnr_median: median(&p),
        ssim_mean: mean(&s),
        codebook_usage: usage.usage()?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraTokenizerReport {
    pub kind: String,
    pub items: usize,
    pub median_rotation_error_deg: f64,
    pub mean_rotation_error_deg: f64,
    pub acc_15: f64,
    pub acc_30: f64,
    pub median_center_error: f64,
    pub failures: usize,
    /// Every recovered pose had an orthonormal rotation with det +1.
    pub all_valid: bool,
    pub codebook_usage: f64,
}

fn pose_is_valid(p: &CameraPose) -> bool {
    let r = p.rotation();
    let dev = (r.transpose() * r - Mat3::identity()).abs().max();
    dev <= 1e-6 && (r.determinant() - 1.0).abs() < 1e-6 && p.center().iter().all(|c| c.is_finite())
}

/// Round trip of held-out relative cameras through the camera tokenizer.
pub fn evaluate_camera_tokenizer(
    tok: &Tokenizer<f32>,
    src: &TokenizerSource,
    max_items: usize,
) -> Result<CameraTokenizerReport> {
    let mut usage = UsageCounter::new(tok.config.codebook_size);
    let (mut rot, mut cen) = (Vec::new(), Vec::new());
    let mut failures = 0;
    let mut all_valid = true;
    for i in spread_indices(src.len(), max_items) {
        let (s, a, b) = src.items[i];
        let gt = relative_camera(src.dataset, s, a, b);
        let (grid, _) = tok.encode(&camera_map(&gt, &src.intrinsics))?;
        usage.record(&grid.indices.iter().map(|&k| k as usize).collect::<Vec<_>>())?;
        match tokens_to_pose(tok, &grid, &src.intrinsics) {
            Ok((pose, _)) => {
                all_valid &= pose_is_valid(&pose);
                rot.push(rotation_geodesic_error(pose.rotation(), gt.rotation()));
                cen.push((pose.center() - gt.center()).norm());
            }
            Err(_) => {
                failures += 1;
                rot.push(FAILURE_ROTATION_DEG);
            }
        }
    }
    Ok(CameraTokenizerReport {
        kind: "camera_tokenizer_eval".into(),
        items: rot.len(),
        median_rotation_error_deg: median(&rot),
        mean_rotation_error_deg: mean(&rot),
        acc_15: fraction_within(&rot, 15.0),
        acc_30: fraction_within(&rot, 30.0),
        median_center_error: if cen.is_empty() { f64::NAN } else { median(&cen) },
        failures,
        all_valid,
        codebook_usage: usage.usage()?,
    })
}

/// Trained artifacts needed by the model-level suites.
pub struct EvalContext<'a> {
    pub config: &'a Config,
    pub dataset: &'a Dataset,
    pub image_tokenizer: &'a Tokenizer<f32>,
    pub camera_tokenizer: &'a Tokenizer<f32>,
    pub model: &'a Transformer<f32>,
    /// Tokenized evaluation split.
    pub pairs: &'a TokenizedPairs,
}

impl EvalContext<'_> {
    fn vocab(&self) -> Vocabulary {
        self.config.vocabulary()
    }

    fn l(&self) -> usize {
        self.pairs.grid.0 * self.pairs.grid.1
    }

    fn camera_intrinsics(&self) -> Intrinsics {
        map_intrinsics(self.dataset, self.camera_tokenizer.config.width, self.camera_tokenizer.config.height)
    }

    fn layout(&self, pair: usize, ordering: Ordering) -> Result<SampleLayout> {
        let (s, a, b) = self.pairs.pairs[pair];
        Ok(build_sequence(
            &self.vocab(),
            &self.pairs.image_grid(s, a),
            &self.pairs.image_grid(s, b),
            &self.pairs.camera_grid(pair),
            ordering,
        )?)
    }

    /// Generates the ordered layout's positions `start..start + L` after the
    /// prefix `..start`. Returns local ids, or `None` if an unconstrained
    /// sample left the expected modality.
    fn generate_segment(
        &self,
        layout: &SampleLayout,
        start: usize,
        sampling: SamplingParams,
        seed: u64,
    ) -> Result<Option<TokenGrid>> {
        let l = self.l();
        let vocab = self.vocab();
        let ordering = layout.ordering.expect("ordered layout");
        let plan: Vec<GenStep> = (start..start + l)
            .map(|p| GenStep { tag: layout.tags[p], allowed: Some(allowed_range(&vocab, ordering, l, p)), sampling })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids = self.model.generate(
            &layout.ids[..start],
            &layout.tags[..start],
            &plan,
            &mut rng,
            true,
            self.config.sampling.constrained,
        )?;
        let modality = if start == l + 2 { ordering.first() } else { ordering.second() };
        let range = vocab.range(modality);
        if ids.iter().any(|id| !range.contains(id)) {
            return Ok(None);
        }
        Ok(Some(TokenGrid {
            height: self.pairs.grid.0,
            width: self.pairs.grid.1,
            indices: ids.iter().map(|id| id - range.start).collect(),
            modality,
        }))
    }

    fn eval_seed(&self, suite: u64, item: usize) -> u64 {
        derive(self.config.seed, &[stream::EVAL, suite, item as u64])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseReport {
    pub kind: String,
    pub pairs: usize,
    pub acc_15: f64,
    pub acc_30: f64,
    pub median_rotation_error_deg: f64,
    pub median_center_error: f64,
    pub failures: usize,
    pub ceiling_acc_15: f64,
    pub ceiling_acc_30: f64,
    pub ceiling_median_rotation_error_deg: f64,
    pub ceiling_failures: usize,
    pub baseline_acc_15: f64,
    pub baseline_acc_30: f64,
    pub baseline_draws: usize,
}

/// Chance accuracy of guessing a relative rotation by drawing an
/// independent pair from the camera sampler.
pub fn random_pose_baseline(ds: &Dataset, draws: usize, seed: u64) -> Result<(f64, f64)> {
    let sampler: CameraSampler = ds.manifest.params.sampler.into();
    let norm = ds.normalization()?;
    let draw_pair = |tag: u64| -> CameraPose {
        for attempt in 0..1000u64 {
            let spec = sample_scene(derive(seed, &[stream::BASELINE, tag, attempt, 0]));
            let a = sample_camera(&spec, &sampler, derive(seed, &[stream::BASELINE, tag, attempt, 1]));
            let b = sample_camera(&spec, &sampler, derive(seed, &[stream::BASELINE, tag, attempt, 2]));
            let (a, b) = (a.with_scaled_center(norm.scale), b.with_scaled_center(norm.scale));
            if filter_pair(&a, &b, &norm) {
                return b.relative_to(&a);
            }
        }
        CameraPose::identity()
    };
    let errs: Vec<f64> = (0..draws)
        .map(|i| {
            let truth = draw_pair(2 * i as u64);
            let guess = draw_pair(2 * i as u64 + 1);
            rotation_geodesic_error(truth.rotation(), guess.rotation())
        })
        .collect();
    Ok((fraction_within(&errs, 15.0), fraction_within(&errs, 30.0)))
}

pub fn evaluate_pose(ctx: &EvalContext) -> Result<PoseReport> {
    let l = ctx.l();
    let k = ctx.camera_intrinsics();
    let (mut rot, mut cen, mut ceil) = (Vec::new(), Vec::new(), Vec::new());
    let (mut failures, mut ceiling_failures) = (0, 0);
    for p in spread_indices(ctx.pairs.pairs.len(), ctx.config.eval.max_pairs) {
        let (s, a, b) = ctx.pairs.pairs[p];
        let gt = relative_camera(ctx.dataset, s, a, b);
        let layout = ctx.layout(p, Ordering::ImgThenCam)?;
        let sampled = ctx.generate_segment(&layout, 2 * l + 2, ctx.config.sampling.camera, ctx.eval_seed(1, p))?;
        match sampled.map(|g| tokens_to_pose(ctx.camera_tokenizer, &g, &k)) {
            Some(Ok((pose, _))) => {
                rot.push(rotation_geodesic_error(pose.rotation(), gt.rotation()));
                cen.push((pose.center() - gt.center()).norm());
            }
            _ => {
                failures += 1;
                rot.push(FAILURE_ROTATION_DEG);
            }
        }
        match tokens_to_pose(ctx.camera_tokenizer, &ctx.pairs.camera_grid(p), &k) {
            Ok((pose, _)) => ceil.push(rotation_geodesic_error(pose.rotation(), gt.rotation())),
            Err(_) => {
                ceiling_failures += 1;
                ceil.push(FAILURE_ROTATION_DEG);
            }
        }
    }
    let draws = ctx.config.eval.baseline_draws;
    let (b15, b30) = random_pose_baseline(ctx.dataset, draws, ctx.config.seed)?;
    Ok(PoseReport {
        kind: "eval_pose".into(),
        pairs: rot.len(),
        acc_15: fraction_within(&rot, 15.0),
        acc_30: fraction_within(&rot, 30.0),
        median_rotation_error_deg: median(&rot),
        median_center_error: if cen.is_empty() { f64::NAN } else { median(&cen) },
        failures,
        ceiling_acc_15: fraction_within(&ceil, 15.0),
        ceiling_acc_30: fraction_within(&ceil, 30.0),
        ceiling_median_rotation_error_deg: median(&ceil),
        ceiling_failures,
        baseline_acc_15: b15,
        baseline_acc_30: b30,
        baseline_draws: draws,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NvsReport {
    pub kind: String,
    pub note: String,
    pub pairs: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub ceiling_psnr: f64,
    pub ceiling_ssim: f64,
    pub failures: usize,
}

pub fn evaluate_nvs(ctx: &EvalContext) -> Result<NvsReport> {
    let l = ctx.l();
    let (h, w) = (ctx.dataset.intrinsics.height, ctx.dataset.intrinsics.width);
    let (mut p, mut s, mut cp, mut cs) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut failures = 0;
    for i in spread_indices(ctx.pairs.pairs.len(), ctx.config.eval.max_pairs) {
        let (sc, _, b) = ctx.pairs.pairs[i];
        let truth = &ctx.dataset.scene(sc).images[b];
        let layout = ctx.layout(i, Ordering::CamThenImg)?;
        let img = match ctx.generate_segment(&layout, 2 * l + 2, ctx.config.sampling.image, ctx.eval_seed(2, i))? {
            Some(g) => ctx.image_tokenizer.decode(&g)?,
            None => {
                failures += 1;
                vec![0.0; truth.len()]
            }
        };
        p.push(psnr(truth, &img, IMAGE_PEAK));
        s.push(ssim(truth, &img, h, w, 3));
        let recon = ctx.image_tokenizer.decode(&ctx.pairs.image_grid(sc, b))?;
        cp.push(psnr(truth, &recon, IMAGE_PEAK));
        cs.push(ssim(truth, &recon, h, w, 3));
    }
    Ok(NvsReport {
        kind: "eval_nvs".into(),
        note: LPIPS_NOTE.into(),
        pairs: p.len(),
        psnr: mean(&p),
        ssim: mean(&s),
        ceiling_psnr: mean(&cp),
        ceiling_ssim: mean(&cs),
        failures,
    })
}

/// Prior samples drawn from one observation.
#[derive(Debug, Clone, PartialEq)]
pub enum PriorSample {
    /// Sampled camera in world coordinates (unscaled), and its elevation
    /// above the scene centroid.
    Camera { pose: CameraPose, elevation_deg: f64 },
    Image(Vec<f32>),
    Invalid,
}

/// Draws camera (`TASK_CAM_FIRST` prefix) or image (`TASK_POSE_FIRST`
/// prefix) samples conditioned on the observation of evaluation pair
/// `pair`. Draw `i` uses seed `derive(seed, [SAMPLE, pair, i])`.
pub fn sample_prior(ctx: &EvalContext, modality: Modality, pair: usize, n: usize, seed: u64) -> Result<Vec<PriorSample>> {
    let l = ctx.l();
    let (ordering, sampling) = match modality {
        Modality::Camera => (Ordering::CamThenImg, ctx.config.sampling.camera),
        Modality::Image => (Ordering::ImgThenCam, ctx.config.sampling.image),
    };
    let layout = ctx.layout(pair, ordering)?;
    let (s, a, _) = ctx.pairs.pairs[pair];
    let obs = ctx.dataset.scaled_pose(s, a);
    let centroid = ctx.dataset.spec(s).centroid();
    let beta = ctx.dataset.manifest.scale;
    let k = ctx.camera_intrinsics();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let g = ctx.generate_segment(&layout, l + 2, sampling, derive(seed, &[stream::SAMPLE, pair as u64, i as u64]))?;
        let sample = match (g, modality) {
            (None, _) => PriorSample::Invalid,
            (Some(g), Modality::Camera) => match tokens_to_pose(ctx.camera_tokenizer, &g, &k) {
                Ok((rel, _)) => {
                    let world = rel.compose_onto(&obs).with_scaled_center(1.0 / beta);
                    PriorSample::Camera { elevation_deg: elevation_deg(world.center(), &centroid), pose: world }
                }
                Err(_) => PriorSample::Invalid,
            },
            (Some(g), Modality::Image) => PriorSample::Image(ctx.image_tokenizer.decode(&g)?),
        };
        out.push(sample);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraPriorReport {
    pub kind: String,
    pub samples: usize,
    pub invalid: usize,
    pub mean_elevation_deg: f64,
    /// W1 distance to the training sampler's elevation distribution.
    pub w1_sampler: f64,
    /// W1 distance to elevation uniform on `[−90°, 90°]`.
    pub w1_uniform: f64,
}

/// Elevation statistics of `n` camera-prior samples, one per evaluation
/// observation in turn.
pub fn evaluate_camera_prior(ctx: &EvalContext, n: usize) -> Result<CameraPriorReport> {
    let pairs = spread_indices(ctx.pairs.pairs.len(), n);
    let mut elev = Vec::new();
    let mut invalid = 0;
    for i in 0..n {
        let pair = pairs[i % pairs.len()];
        let seed = derive(ctx.config.seed, &[stream::SAMPLE, i as u64]);
        match sample_prior(ctx, Modality::Camera, pair, 1, seed)?.pop() {
            Some(PriorSample::Camera { elevation_deg, .. }) => elev.push(elevation_deg),
            _ => invalid += 1,
        }
    }
    if elev.is_empty() {
        return Err(GstError::Model(crate::transformer::ModelError::InvalidConfig(
            "no valid camera-prior samples".into(),
        )));
    }
    let sampler: CameraSampler = ctx.dataset.manifest.params.sampler.into();
    let (lo, hi) = sampler.elevation_range_deg;
    let grid = 2000;
    let reference = quantile_grid(grid, |q| lo + q * (hi - lo));
    let uniform = quantile_grid(grid, |q| -90.0 + q * 180.0);
    Ok(CameraPriorReport {
        kind: "eval_camera_prior".into(),
        samples: elev.len(),
        invalid,
        mean_elevation_deg: mean(&elev),
        w1_sampler: wasserstein_1d(&elev, &reference),
        w1_uniform: wasserstein_1d(&elev, &uniform),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePriorReport {
    pub kind: String,
    pub samples: usize,
    pub invalid: usize,
    pub all_finite_in_range: bool,
}

pub fn evaluate_image_prior(ctx: &EvalContext, n: usize) -> Result<ImagePriorReport> {
    let pairs = spread_indices(ctx.pairs.pairs.len(), n);
    let (mut ok, mut invalid, mut fine) = (0, 0, true);
    for i in 0..n {
        let seed = derive(ctx.config.seed, &[stream::SAMPLE, 1 << 32 | i as u64]);
        match sample_prior(ctx, Modality::Image, pairs[i % pairs.len()], 1, seed)?.pop() {
            Some(PriorSample::Image(img)) => {
                ok += 1;
                fine &= img.iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v));
            }
            _ => invalid += 1,
        }
    }
    Ok(ImagePriorReport { kind: "eval_image_prior".into(), samples: ok, invalid, all_finite_in_range: fine })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spread_is_even_and_bounded() {
        assert_eq!(spread_indices(10, 0), (0..10).collect::<Vec<_>>());
        assert_eq!(spread_indices(10, 5), vec![0, 2, 4, 6, 8]);
        assert_eq!(spread_indices(3, 5), vec![0, 1, 2]);
    }
}
