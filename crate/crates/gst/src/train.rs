//! Training loops for the tokenizers and the sequence model.
//!
//! Every random choice is drawn from a generator seeded by
//! `derive(seed, [stream, step, ...])`, so a step's batch depends only on
//! the seed and the step index. That is what makes checkpoint resume exact:
//! the loop state that must be saved is the model, the optimizer moments,
//! the open metric window and the usage counters.

use std::collections::HashMap;

use gst_core::geometry::{pose_to_raymap, CameraPose, Intrinsics};
use gst_core::quantizer::UsageCounter;
use gst_core::seed::{derive, stream};
use gst_core::sequence::{
    build_attention_mask, build_packed_sequence, build_sequence, loss_targets, Modality, Ordering, SampleLayout,
    TokenGrid, Vocabulary,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{learning_rate, Config, ConditionalWeights, TokenizerTrainConfig, TrainConfig, TrainMode};
use crate::data::{Dataset, IntrinsicsRecord, Split};
use crate::error::{GstError, Result};
use crate::metrics_log::{MetricsLog, WindowAccumulator};
use crate::nn::{clip_grad_norm, AdamW, Parameters};
use crate::tokenizer::{raymap_channels_f32, Tokenizer, TokenizerConfig};
use crate::transformer::{Batch, Transformer};

/// Sub-streams separating the three training runs that share one seed.
pub mod run_stream {
    pub const IMAGE_TOKENIZER: u64 = 1;
    pub const CAMERA_TOKENIZER: u64 = 2;
    pub const GST: u64 = 3;
}

pub const KIND_IMAGE_TOKENIZER: &str = "image_tokenizer";
pub const KIND_CAMERA_TOKENIZER: &str = "camera_tokenizer";
pub const KIND_GST: &str = "gst";

/// Intrinsics for rendering ray maps at `width × height`, rescaled from the
/// dataset's camera so the field of view is preserved.
pub fn map_intrinsics(ds: &Dataset, width: usize, height: usize) -> Intrinsics {
    scale_intrinsics(&ds.intrinsics, width, height)
}

pub fn scale_intrinsics(k: &Intrinsics, width: usize, height: usize) -> Intrinsics {
    let k = *k;
    if (k.width, k.height) == (width, height) {
        return k;
    }
    let (sx, sy) = (width as f64 / k.width as f64, height as f64 / k.height as f64);
    Intrinsics { fx: k.fx * sx, fy: k.fy * sy, cx: k.cx * sx, cy: k.cy * sy, width, height }
}

/// Target camera expressed in the observation camera's frame, with centers
/// in standardized units.
pub fn relative_camera(ds: &Dataset, scene: usize, obs: usize, target: usize) -> CameraPose {
    ds.scaled_pose(scene, target).relative_to(&ds.scaled_pose(scene, obs))
}

pub fn camera_map(pose: &CameraPose, k: &Intrinsics) -> Vec<f32> {
    raymap_channels_f32(&pose_to_raymap(pose, k))
}

/// Items a tokenizer trains or evaluates on: every view of a split for
/// images, every filtered pair's relative ray map for cameras.
pub struct TokenizerSource<'a> {
    pub dataset: &'a Dataset,
    pub modality: Modality,
    pub intrinsics: Intrinsics,
    pub items: Vec<(usize, usize, usize)>,
}

impl<'a> TokenizerSource<'a> {
    pub fn new(dataset: &'a Dataset, config: &TokenizerConfig, split: Split) -> Result<Self> {
        let items = match config.modality {
            Modality::Image => {
                if (config.width, config.height) != (dataset.intrinsics.width, dataset.intrinsics.height) {
                    return Err(GstError::Config("image tokenizer resolution differs from the dataset".into()));
                }
                dataset
                    .split_ids(split)
                    .iter()
                    .flat_map(|&s| (0..dataset.scene(s).images.len()).map(move |v| (s, v, v)))
                    .collect()
            }
            Modality::Camera => dataset.pairs(split)?,
        };
        if items.is_empty() {
            return Err(GstError::Config("split holds no items".into()));
        }
        Ok(Self {
            dataset,
            modality: config.modality,
            intrinsics: map_intrinsics(dataset, config.width, config.height),
            items,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Raw item: an image in `[−1, 1]` or ray-map channels.
    pub fn item(&self, i: usize) -> Vec<f32> {
        let (s, a, b) = self.items[i];
        match self.modality {
            Modality::Image => self.dataset.scene(s).images[a].clone(),
            Modality::Camera => camera_map(&relative_camera(self.dataset, s, a, b), &self.intrinsics),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TokenizerLoopState {
    window: WindowAccumulator,
    window_usage: Vec<u64>,
    restart_usage: Vec<u64>,
    log: MetricsLog,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TokenizerCheckpointConfig {
    tokenizer: TokenizerConfig,
    train: TokenizerTrainConfig,
}

/// Per-step values reported by the training loops.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

/// A tokenizer training run that can be advanced, checkpointed and resumed.
#[derive(Debug, Clone)]
pub struct TokenizerRun {
    pub tokenizer: Tokenizer<f32>,
    pub optimizer: AdamW<f32>,
    pub train: TokenizerTrainConfig,
    pub seed: u64,
    pub step: u64,
    pub window: WindowAccumulator,
    pub window_usage: UsageCounter,
    pub restart_usage: UsageCounter,
    pub log: MetricsLog,
}

impl TokenizerRun {
    pub fn new(config: TokenizerConfig, train: TokenizerTrainConfig, seed: u64) -> Result<Self> {
        let code = Self::stream_of(config.modality);
        let tokenizer = Tokenizer::new(config, derive(seed, &[stream::INIT, code]))?;
        let k = tokenizer.config.codebook_size;
        Ok(Self {
            tokenizer,
            optimizer: AdamW::new(train.optimizer),
            window: WindowAccumulator::new(train.log_every),
            train,
            seed,
            step: 0,
            window_usage: UsageCounter::new(k),
            restart_usage: UsageCounter::new(k),
            log: MetricsLog::default(),
        })
    }

    fn stream_of(m: Modality) -> u64 {
        match m {
            Modality::Image => run_stream::IMAGE_TOKENIZER,
            Modality::Camera => run_stream::CAMERA_TOKENIZER,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self.tokenizer.config.modality {
            Modality::Image => KIND_IMAGE_TOKENIZER,
            Modality::Camera => KIND_CAMERA_TOKENIZER,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let cfg = TokenizerCheckpointConfig { tokenizer: self.tokenizer.config.clone(), train: self.train.clone() };
        let mut ck = Checkpoint::new(self.kind(), serde_json::to_value(cfg).expect("config serializes"), self.seed);
        ck.step = self.step;
        ck.state = serde_json::to_value(TokenizerLoopState {
            window: self.window.clone(),
            window_usage: self.window_usage.counts().to_vec(),
            restart_usage: self.restart_usage.counts().to_vec(),
            log: self.log.clone(),
        })
        .expect("state serializes");
        ck.store_model(&self.tokenizer, Some(&self.optimizer));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != KIND_IMAGE_TOKENIZER && ck.kind != KIND_CAMERA_TOKENIZER {
            return Err(GstError::Format(format!("expected a tokenizer checkpoint, found {}", ck.kind)));
        }
        let cfg: TokenizerCheckpointConfig = serde_json::from_value(ck.config.clone())?;
        let mut run = Self::new(cfg.tokenizer, cfg.train, ck.seed)?;
        ck.load_model(&mut run.tokenizer)?;
        run.optimizer = ck.load_optimizer(&run.tokenizer)?;
        run.step = ck.step;
        let state: TokenizerLoopState = serde_json::from_value(ck.state.clone())?;
        run.window = state.window;
        run.window_usage = UsageCounter::from_counts(state.window_usage);
        run.restart_usage = UsageCounter::from_counts(state.restart_usage);
        run.log = state.log;
        Ok(run)
    }

    fn batch_input(&self, src: &TokenizerSource, rng: &mut ChaCha8Rng) -> Vec<f32> {
        let mut x = Vec::new();
        for _ in 0..self.train.batch_size {
            let i = rng.random_range(0..src.len());
            x.extend(self.tokenizer.to_model_space(&src.item(i)));
        }
        x
    }

    /// One optimizer step.
    pub fn step_once(&mut self, src: &TokenizerSource) -> Result<StepReport> {
        let step = self.step;
        let code = Self::stream_of(self.tokenizer.config.modality);
        let b = self.train.batch_size;
        let mut rng = ChaCha8Rng::seed_from_u64(derive(self.seed, &[stream::BATCH, code, step]));
        let x = self.batch_input(src, &mut rng);
        if step == 0 && self.train.data_init {
            let feats = self.tokenizer.encode_features(&x, b)?.features;
            self.tokenizer.init_codebook_from(&feats, derive(self.seed, &[stream::INIT, code, 1]))?;
        }
        self.tokenizer.zero_grad();
        let out = self.tokenizer.train_step(&x, b, 1.0)?;
        let loss = out.total_loss as f64;
        if !loss.is_finite() {
            return Err(GstError::NonFiniteLoss { step, detail: format!("{} loss {loss}", self.kind()) });
        }
        self.window_usage.record(&out.vq.indices)?;
        self.restart_usage.record(&out.vq.indices)?;
        let grad_norm = clip_grad_norm(&mut self.tokenizer, self.train.grad_clip);
        if !grad_norm.is_finite() {
            return Err(GstError::NonFiniteLoss { step, detail: format!("gradient norm {grad_norm}") });
        }
        let t = &self.train;
        let lr = learning_rate(step, t.steps, t.lr, t.lr_final, t.decay_at, t.warmup_steps);
        self.optimizer.update(&mut self.tokenizer, lr);

        let restart_window = self.train.restart_every;
        if restart_window > 0 && (step + 1) % restart_window == 0 {
            if ((step + 1) as f64) < self.train.restart_until * self.train.steps as f64 {
                let dead: Vec<usize> = self.restart_usage.dead_codes().collect();
                if !dead.is_empty() {
                    let feats = self.tokenizer.encode_features(&x, b)?.features;
                    let mut r = ChaCha8Rng::seed_from_u64(derive(self.seed, &[stream::BATCH, code, step, 1]));
                    self.tokenizer.restart_codes(&dead, &feats, &mut r);
                    log::debug!("step {step}: restarted {} dead codes", dead.len());
                }
            }
            self.restart_usage = UsageCounter::new(self.tokenizer.config.codebook_size);
        }

        let extras = [
            ("recon_loss", out.recon_loss as f64),
            ("codebook_loss", out.vq.codebook_loss as f64),
            ("commitment_loss", out.vq.commitment_loss as f64),
        ];
        if let Some(mut rec) = self.window.push(self.kind(), step, loss, grad_norm, lr, &extras) {
            rec.extra.insert("codebook_usage".into(), self.window_usage.usage()?);
            log::info!(
                "{} step {} loss {:.5} grad {:.4} usage {:.3}",
                self.kind(),
                rec.step,
                rec.window_loss,
                rec.window_grad_norm,
                rec.extra["codebook_usage"]
            );
            self.log.push(&rec);
            self.window_usage = UsageCounter::new(self.tokenizer.config.codebook_size);
        }
        self.step += 1;
        Ok(StepReport { step, loss, grad_norm, lr })
    }

    /// Advances to `until` (capped at the configured total), calling
    /// `on_checkpoint` every `checkpoint_every` steps when non-zero.
    pub fn run_until(
        &mut self,
        src: &TokenizerSource,
        until: u64,
        checkpoint_every: u64,
        on_checkpoint: &mut dyn FnMut(&Self) -> Result<()>,
    ) -> Result<()> {
        let until = until.min(self.train.steps);
        while self.step < until {
            self.step_once(src)?;
            if checkpoint_every > 0 && self.step % checkpoint_every == 0 {
                on_checkpoint(self)?;
            }
        }
        Ok(())
    }
}

pub fn load_tokenizer(ck: &Checkpoint) -> Result<Tokenizer<f32>> {
    Ok(TokenizerRun::from_checkpoint(ck)?.tokenizer)
}

/// Pre-tokenized pairs of one split. Image tokens are stored per view and
/// camera tokens per pair, all as local (per-modality) ids.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedPairs {
    pub grid: (usize, usize),
    pub pairs: Vec<(usize, usize, usize)>,
    pub images: HashMap<(usize, usize), Vec<u32>>,
    pub cameras: Vec<Vec<u32>>,
}

impl TokenizedPairs {
    pub fn image_grid(&self, scene: usize, view: usize) -> TokenGrid {
        TokenGrid {
            height: self.grid.0,
            width: self.grid.1,
            indices: self.images[&(scene, view)].clone(),
            modality: Modality::Image,
        }
    }

    pub fn camera_grid(&self, pair: usize) -> TokenGrid {
        TokenGrid {
            height: self.grid.0,
            width: self.grid.1,
            indices: self.cameras[pair].clone(),
            modality: Modality::Camera,
        }
    }
}

const ENCODE_CHUNK: usize = 64;

fn encode_all(tok: &Tokenizer<f32>, items: &[Vec<f32>]) -> Result<Vec<Vec<u32>>> {
    let l = tok.config.grid().0 * tok.config.grid().1;
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(ENCODE_CHUNK) {
        let x: Vec<f32> = chunk.iter().flat_map(|it| tok.to_model_space(it)).collect();
        let idx = tok.encode_indices(&x, chunk.len())?;
        out.extend(idx.chunks_exact(l).map(|c| c.iter().map(|&i| i as u32).collect()));
    }
    Ok(out)
}

pub fn tokenize_pairs(
    ds: &Dataset,
    split: Split,
    image_tok: &Tokenizer<f32>,
    camera_tok: &Tokenizer<f32>,
) -> Result<TokenizedPairs> {
    if image_tok.config.grid() != camera_tok.config.grid() {
        return Err(GstError::Config("image and camera token grids differ".into()));
    }
    let pairs = ds.pairs(split)?;
    let views: Vec<(usize, usize)> = ds
        .split_ids(split)
        .iter()
        .flat_map(|&s| (0..ds.scene(s).images.len()).map(move |v| (s, v)))
        .collect();
    let imgs: Vec<Vec<f32>> = views.iter().map(|&(s, v)| ds.scene(s).images[v].clone()).collect();
    let images = views.into_iter().zip(encode_all(image_tok, &imgs)?).collect();
    let k = map_intrinsics(ds, camera_tok.config.width, camera_tok.config.height);
    let maps: Vec<Vec<f32>> = pairs.iter().map(|&(s, a, b)| camera_map(&relative_camera(ds, s, a, b), &k)).collect();
    let cameras = encode_all(camera_tok, &maps)?;
    Ok(TokenizedPairs { grid: image_tok.config.grid(), pairs, images, cameras })
}

fn pick(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Per-position loss weights for one layout. Weights are chosen so that,
/// in expectation over the sampled ordering, conditional `k` receives a
/// share of the loss proportional to `conditionals[k]`.
pub fn position_weights(
    mode: TrainMode,
    layout: &SampleLayout,
    conditionals: &ConditionalWeights,
    supervise_task_token: bool,
) -> Vec<f64> {
    let l = layout.segment_len();
    let n = layout.len();
    let seg = |p: usize, start: usize| p >= start && p < start + l;
    let mut w = vec![0.0; n];
    match mode {
        TrainMode::JointOrdered => {
            let (a, b) = match layout.ordering.expect("ordered layout") {
                Ordering::CamThenImg => (conditionals[0], conditionals[1]),
                Ordering::ImgThenCam => (conditionals[2], conditionals[3]),
            };
            let s = a + b;
            for (p, wp) in w.iter_mut().enumerate() {
                if seg(p, l + 2) {
                    *wp = 2.0 * a / s;
                } else if seg(p, 2 * l + 2) {
                    *wp = 2.0 * b / s;
                }
            }
            if supervise_task_token {
                w[l + 1] = 1.0;
            }
        }
        TrainMode::JointPacked => {
            let b2 = 3 * l + 2;
            for (p, wp) in w.iter_mut().enumerate() {
                let k = if seg(p, l + 2) {
                    0
                } else if seg(p, 2 * l + 2) {
                    1
                } else if seg(p, b2 + 1) {
                    2
                } else if seg(p, b2 + 1 + l) {
                    3
                } else {
                    continue;
                };
                *wp = 4.0 * conditionals[k];
            }
            if supervise_task_token {
                w[l + 1] = 1.0;
                w[b2] = 1.0;
            }
        }
        TrainMode::Alternating => {
            for (p, wp) in w.iter_mut().enumerate() {
                if layout.loss_mask[p] {
                    *wp = 1.0;
                }
            }
        }
    }
    w
}

/// Builds one training sequence and its per-position weights.
pub fn sample_training_item(
    rng: &mut ChaCha8Rng,
    train: &TrainConfig,
    conditionals: &ConditionalWeights,
    vocab: &Vocabulary,
    observation: &TokenGrid,
    image: &TokenGrid,
    camera: &TokenGrid,
) -> Result<(SampleLayout, Vec<f64>)> {
    let layout = match train.mode {
        TrainMode::JointOrdered => {
            let c = conditionals;
            let ordering = if pick(rng, &[c[0] + c[1], c[2] + c[3]]) == 0 {
                Ordering::CamThenImg
            } else {
                Ordering::ImgThenCam
            };
            build_sequence(vocab, observation, image, camera, ordering)?
        }
        TrainMode::JointPacked => build_packed_sequence(vocab, observation, image, camera)?,
        TrainMode::Alternating => {
            // Novel view synthesis supervises the image after the camera;
            // pose estimation supervises the camera after the image.
            let ordering = if pick(rng, &train.task_weights) == 0 {
                Ordering::CamThenImg
            } else {
                Ordering::ImgThenCam
            };
            build_sequence(vocab, observation, image, camera, ordering)?.with_loss_on_second_only()
        }
    };
    let w = position_weights(train.mode, &layout, conditionals, train.supervise_task_token);
    Ok((layout, w))
}

/// One assembled micro-batch.
pub struct MicroBatch {
    pub batch: Batch,
    pub targets: Vec<u32>,
    pub weights: Vec<f64>,
    pub first_ids: Vec<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GstLoopState {
    window: WindowAccumulator,
    log: MetricsLog,
    data: Option<DataInfo>,
}

/// Dataset facts a trained model needs at sampling time: β and the
/// camera the images were rendered with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataInfo {
    pub scale: f64,
    pub intrinsics: IntrinsicsRecord,
}

impl DataInfo {
    pub fn of(ds: &Dataset) -> Self {
        Self { scale: ds.manifest.scale, intrinsics: ds.intrinsics.into() }
    }
}

/// A sequence-model training run.
#[derive(Debug, Clone)]
pub struct GstRun {
    pub config: Config,
    pub model: Transformer<f32>,
    pub optimizer: AdamW<f32>,
    pub step: u64,
    pub window: WindowAccumulator,
    pub log: MetricsLog,
    pub data: Option<DataInfo>,
}

impl GstRun {
    pub fn new(config: Config) -> Result<Self> {
        config.validate()?;
        let model = Transformer::new(config.model_config(), derive(config.seed, &[stream::INIT, run_stream::GST]))?;
        Ok(Self {
            optimizer: AdamW::new(config.train.optimizer),
            window: WindowAccumulator::new(config.train.log_every),
            model,
            config,
            step: 0,
            log: MetricsLog::default(),
            data: None,
        })
    }

    pub fn run_name(&self) -> &'static str {
        self.config.train.mode.name()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck =
            Checkpoint::new(KIND_GST, serde_json::to_value(&self.config).expect("config serializes"), self.config.seed);
        ck.step = self.step;
        ck.state = serde_json::to_value(GstLoopState {
            window: self.window.clone(),
            log: self.log.clone(),
            data: self.data.clone(),
        })
            .expect("state serializes");
        ck.store_model(&self.model, Some(&self.optimizer));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != KIND_GST {
            return Err(GstError::Format(format!("expected a gst checkpoint, found {}", ck.kind)));
        }
        let config: Config = serde_json::from_value(ck.config.clone())?;
        let mut run = Self::new(config)?;
        ck.load_model(&mut run.model)?;
        run.optimizer = ck.load_optimizer(&run.model)?;
        run.step = ck.step;
        let state: GstLoopState = serde_json::from_value(ck.state.clone())?;
        run.window = state.window;
        run.log = state.log;
        run.data = state.data;
        Ok(run)
    }

    /// Samples the effective batch of `step` and splits it into
    /// micro-batches of `batch_size` sequences.
    pub fn assemble(&self, data: &TokenizedPairs, step: u64) -> Result<Vec<MicroBatch>> {
        let t = &self.config.train;
        let vocab = self.config.vocabulary();
        let conditionals = t.conditionals_at(step);
        let mcfg = self.model.config.clone();
        let mut out = Vec::with_capacity(t.grad_accum);
        for m in 0..t.grad_accum {
            let mut layouts = Vec::with_capacity(t.batch_size);
            for j in 0..t.batch_size {
                let item = (m * t.batch_size + j) as u64;
                let mut rng =
                    ChaCha8Rng::seed_from_u64(derive(self.config.seed, &[stream::BATCH, run_stream::GST, step, item]));
                let p = rng.random_range(0..data.pairs.len());
                let (s, a, b) = data.pairs[p];
                let obs = data.image_grid(s, a);
                let img = data.image_grid(s, b);
                let cam = data.camera_grid(p);
                layouts.push(sample_training_item(&mut rng, t, &conditionals, &vocab, &obs, &img, &cam)?);
            }
            let mut targets = Vec::new();
            let mut weights = Vec::new();
            let mut inputs = Vec::with_capacity(layouts.len());
            for (layout, w) in &layouts {
                let lt = loss_targets(layout);
                targets.extend_from_slice(&lt.targets);
                weights.extend_from_slice(&w[1..]);
                inputs.push((lt.inputs, layout.tags.clone()));
            }
            let seqs: Vec<(&[u32], &[_])> = inputs.iter().map(|(i, t)| (i.as_slice(), t.as_slice())).collect();
            out.push(MicroBatch {
                batch: Batch::new(&mcfg, &seqs),
                targets,
                weights,
                first_ids: layouts[0].0.ids.clone(),
            });
        }
        Ok(out)
    }

    /// Loss and gradients of one step without updating parameters. The
    /// loss is the weighted mean over every supervised position in the
    /// effective batch, so accumulation over micro-batches matches one large
    /// batch.
    pub fn compute_gradients(&mut self, micro: &[MicroBatch]) -> Result<f64> {
        let total: f64 = micro.iter().map(|m| m.weights.iter().sum::<f64>()).sum();
        if total <= 0.0 {
            return Err(GstError::Config("effective batch has no supervised positions".into()));
        }
        let l = self.config.image_tokenizer.grid().0 * self.config.image_tokenizer.grid().1;
        let mode = self.config.train.mode.mask_mode();
        let mask = build_attention_mask(mode, l);
        self.model.zero_grad();
        let mut loss = 0.0;
        for mb in micro {
            let mask = mask.truncated(mb.batch.len);
            let (ls, _) = self.model.weighted_loss_and_backward(
                &mb.batch,
                &mb.targets,
                &mb.weights,
                &mask,
                (1.0 / total) as f32,
            )?;
            loss += ls;
        }
        Ok(loss / total)
    }

    pub fn step_once(&mut self, data: &TokenizedPairs) -> Result<StepReport> {
        let step = self.step;
        let micro = self.assemble(data, step)?;
        let loss = self.compute_gradients(&micro)?;
        let grad_norm = clip_grad_norm(&mut self.model, self.config.train.grad_clip);
        if !loss.is_finite() || !grad_norm.is_finite() {
            let ids = &micro[0].first_ids;
            return Err(GstError::NonFiniteLoss {
                step,
                detail: format!("loss {loss}, gradient norm {grad_norm}, first sequence {ids:?}"),
            });
        }
        let t = &self.config.train;
        let lr = learning_rate(step, t.steps, t.lr, t.lr_final, t.decay_at, t.warmup_steps);
        self.optimizer.update(&mut self.model, lr);
        if let Some(rec) = self.window.push(self.run_name(), step, loss, grad_norm, lr, &[]) {
            log::info!(
                "{} step {} loss {:.4} grad {:.4}",
                self.run_name(),
                rec.step,
                rec.window_loss,
                rec.window_grad_norm
            );
            self.log.push(&rec);
        }
        self.step += 1;
        Ok(StepReport { step, loss, grad_norm, lr })
    }

    pub fn run_until(
        &mut self,
        data: &TokenizedPairs,
        until: u64,
        on_checkpoint: &mut dyn FnMut(&Self) -> Result<()>,
    ) -> Result<()> {
        let until = until.min(self.config.train.steps);
        let every = self.config.train.checkpoint_every;
        while self.step < until {
            self.step_once(data)?;
            if every > 0 && self.step % every == 0 {
                on_checkpoint(self)?;
            }
        }
        Ok(())
    }
}

/// Loads a trained sequence model, the config it was trained with and the
/// dataset facts recorded at training time.
pub fn load_gst(ck: &Checkpoint) -> Result<(Config, Transformer<f32>, Option<DataInfo>)> {
    let run = GstRun::from_checkpoint(ck)?;
    Ok((run.config, run.model, run.data))
}
