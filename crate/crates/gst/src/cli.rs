//! Command-line interface. [`run`] parses arguments before touching the
//! filesystem, so a usage error has no side effects.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use gst_core::geometry::{CameraPose, Intrinsics};
use gst_core::scenes::CameraSampler;
use gst_core::sequence::{build_sequence, Modality, Ordering, TokenGrid};

use crate::checkpoint::Checkpoint;
use crate::config::{Config, TrainMode};
use crate::data::{
    format_pose_file, gen_dataset, load_dataset, parse_pose_file, read_png, write_png, GenParams, Split,
};
use crate::error::{GstError, Result};
use crate::eval::{
    evaluate_camera_prior, evaluate_camera_tokenizer, evaluate_image_prior, evaluate_image_tokenizer, evaluate_nvs,
    evaluate_pose, EvalContext, LPIPS_NOTE,
};
use crate::metrics_log::MetricsLog;
use crate::tokenizer::{tokens_to_pose, Tokenizer};
use crate::train::{
    load_gst, load_tokenizer, scale_intrinsics, tokenize_pairs, DataInfo, GstRun, TokenizerRun,
    TokenizerSource,
};
use crate::transformer::{GenStep, Transformer};

const IMAGE_CKPT: &str = "image_tokenizer.ckpt";
const CAMERA_CKPT: &str = "camera_tokenizer.ckpt";
const GST_CKPT: &str = "gst.ckpt";

#[derive(Debug, Parser)]
#[command(name = "gst", version, about = "Generative sparse-view camera and image modelling on synthetic scenes")]
pub struct Cli {
    /// TOML run configuration (defaults to the reference profile).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Writes line-delimited JSON metrics here.
    #[arg(long, global = true)]
    pub metrics_out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset.
    GenData(GenDataArgs),
    /// Train the image tokenizer.
    TrainImageTokenizer(TrainArgs),
    /// Train the camera tokenizer.
    TrainCameraTokenizer(TrainArgs),
    /// Train the sequence model on frozen tokenizers.
    TrainGst(TrainGstArgs),
    /// Draw samples from a trained model.
    Sample(SampleArgs),
    /// Run evaluation suites on the test split.
    Eval(EvalArgs),
    /// Print a checkpoint's header and tensor manifest.
    InspectCheckpoint(InspectArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub scenes: Option<usize>,
    #[arg(long)]
    pub views: Option<usize>,
    #[arg(long)]
    pub resolution: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RunDirs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    /// Directory holding the run's checkpoints.
    #[arg(long, default_value = "run")]
    pub run: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub dirs: RunDirs,
    /// Overrides the configured number of steps.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Stop after this many completed steps without changing the schedule.
    #[arg(long)]
    pub stop_after: Option<u64>,
    /// Continue from the run's existing checkpoint.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct TrainGstArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Checkpoint file name inside the run directory.
    #[arg(long, default_value = GST_CKPT)]
    pub name: String,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    JointOrdered,
    JointPacked,
    Alternating,
}

impl From<ModeArg> for TrainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::JointOrdered => TrainMode::JointOrdered,
            ModeArg::JointPacked => TrainMode::JointPacked,
            ModeArg::Alternating => TrainMode::Alternating,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SampleMode {
    Nvs,
    Pose,
    CameraPrior,
    ImagePrior,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long, value_enum)]
    pub mode: SampleMode,
    #[arg(long, default_value = "run")]
    pub run: PathBuf,
    /// Observation image (PNG at the model's resolution).
    #[arg(long)]
    pub observation: PathBuf,
    /// Pose file: either the target camera relative to the observation, or
    /// two views (observation, target) in world coordinates. Required for
    /// `nvs`.
    #[arg(long)]
    pub camera: Option<PathBuf>,
    /// Target image for `pose`.
    #[arg(long)]
    pub target: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub num: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Pose,
    Nvs,
    CameraPrior,
    ImagePrior,
    Tokenizers,
    All,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_enum, default_value = "all")]
    pub suite: Suite,
    #[command(flatten)]
    pub dirs: RunDirs,
    /// Overrides the configured number of test pairs.
    #[arg(long)]
    pub max_pairs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub path: PathBuf,
}

/// Parses `argv` and runs the command. Returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut c = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::reference(),
    };
    if let Some(s) = cli.seed {
        c.seed = s;
    }
    Ok(c)
}

fn write_metrics(cli: &Cli, log: &MetricsLog) -> Result<()> {
    if let Some(p) = &cli.metrics_out {
        log.write(p)?;
    }
    Ok(())
}

pub fn execute(cli: Cli) -> Result<()> {
    let config = load_config(&cli)?;
    match &cli.command {
        Command::GenData(a) => gen_data(&config, a),
        Command::TrainImageTokenizer(a) => train_tokenizer(&cli, config, a, Modality::Image),
        Command::TrainCameraTokenizer(a) => train_tokenizer(&cli, config, a, Modality::Camera),
        Command::TrainGst(a) => train_gst(&cli, config, a),
        Command::Sample(a) => sample(&cli, a),
        Command::Eval(a) => eval(&cli, config, a),
        Command::InspectCheckpoint(a) => {
            print!("{}", Checkpoint::load(&a.path)?.summary());
            Ok(())
        }
    }
}

fn gen_data(config: &Config, a: &GenDataArgs) -> Result<()> {
    let res = a.resolution.unwrap_or(config.data.resolution);
    let params = GenParams {
        num_scenes: a.scenes.unwrap_or(config.data.num_scenes),
        views_per_scene: a.views.unwrap_or(config.data.views_per_scene),
        seed: config.seed,
        sampler: CameraSampler::default().into(),
        intrinsics: Intrinsics::default_for(res, res).into(),
    };
    let ds = gen_dataset(&params, &a.out)?;
    println!(
        "wrote {} scenes × {} views to {} (scale {:.6}, train/val/test {}/{}/{})",
        params.num_scenes,
        params.views_per_scene,
        a.out.display(),
        ds.manifest.scale,
        ds.manifest.splits.train.len(),
        ds.manifest.splits.val.len(),
        ds.manifest.splits.test.len()
    );
    Ok(())
}

fn train_tokenizer(cli: &Cli, mut config: Config, a: &TrainArgs, modality: Modality) -> Result<()> {
    let ds = load_dataset(&a.dirs.data)?;
    let (name, tcfg, tt) = match modality {
        Modality::Image => (IMAGE_CKPT, config.image_tokenizer.clone(), &mut config.image_tokenizer_train),
        Modality::Camera => (CAMERA_CKPT, config.camera_tokenizer.clone(), &mut config.camera_tokenizer_train),
    };
    if let Some(s) = a.steps {
        tt.steps = s;
    }
    let path = a.dirs.run.join(name);
    let mut run = if a.resume && path.exists() {
        let r = TokenizerRun::from_checkpoint(&Checkpoint::load(&path)?)?;
        if r.tokenizer.config != tcfg || r.train != *tt || r.seed != config.seed {
            return Err(GstError::Config(format!("{} was trained with a different config", path.display())));
        }
        r
    } else {
        TokenizerRun::new(tcfg.clone(), tt.clone(), config.seed)?
    };
    let src = TokenizerSource::new(&ds, &tcfg, Split::Train)?;
    let until = a.stop_after.unwrap_or(u64::MAX);
    let every = config.train.checkpoint_every;
    run.run_until(&src, until, every, &mut |r| r.checkpoint().save(&path))?;
    run.checkpoint().save(&path)?;
    let mut log = run.log.clone();
    if run.step >= run.train.steps {
        let val = TokenizerSource::new(&ds, &tcfg, Split::Val)?;
        match modality {
            Modality::Image => {
                let r = evaluate_image_tokenizer(&run.tokenizer, &val, 0)?;
                println!("val psnr {:.2} dB  ssim {:.3}  usage {:.3}", r.psnr_mean, r.ssim_mean, r.codebook_usage);
                log.push(&r);
            }
            Modality::Camera => {
                let r = evaluate_camera_tokenizer(&run.tokenizer, &val, 0)?;
                println!(
                    "val median rotation error {:.2}°  usage {:.3}  failures {}",
                    r.median_rotation_error_deg, r.codebook_usage, r.failures
                );
                log.push(&r);
            }
        }
    }
    println!("saved {} at step {}", path.display(), run.step);
    write_metrics(cli, &log)
}

fn load_tokenizers(run: &Path) -> Result<(Tokenizer<f32>, Tokenizer<f32>)> {
    let img = load_tokenizer(&Checkpoint::load(&run.join(IMAGE_CKPT))?)?;
    let cam = load_tokenizer(&Checkpoint::load(&run.join(CAMERA_CKPT))?)?;
    Ok((img, cam))
}

fn train_gst(cli: &Cli, mut config: Config, a: &TrainGstArgs) -> Result<()> {
    let t = &a.train;
    if let Some(m) = a.mode {
        config.train.mode = m.into();
    }
    if let Some(s) = t.steps {
        config.train.steps = s;
    }
    let ds = load_dataset(&t.dirs.data)?;
    let (img, cam) = load_tokenizers(&t.dirs.run)?;
    if img.config != config.image_tokenizer || cam.config != config.camera_tokenizer {
        return Err(GstError::Config("tokenizer checkpoints do not match the config".into()));
    }
    let path = t.dirs.run.join(&a.name);
    let mut run = if t.resume && path.exists() {
        let r = GstRun::from_checkpoint(&Checkpoint::load(&path)?)?;
        if r.config != config {
            return Err(GstError::Config(format!("{} was trained with a different config", path.display())));
        }
        r
    } else {
        let mut r = GstRun::new(config)?;
        r.data = Some(DataInfo::of(&ds));
        r
    };
    let data = tokenize_pairs(&ds, Split::Train, &img, &cam)?;
    run.run_until(&data, t.stop_after.unwrap_or(u64::MAX), &mut |r| r.checkpoint().save(&path))?;
    run.checkpoint().save(&path)?;
    println!("saved {} at step {}", path.display(), run.step);
    write_metrics(cli, &run.log)
}

fn print_record<S: serde::Serialize>(log: &mut MetricsLog, r: &S) {
    println!("{}", serde_json::to_string(r).expect("report serializes"));
    log.push(r);
}

fn eval(cli: &Cli, config: Config, a: &EvalArgs) -> Result<()> {
    let ds = load_dataset(&a.dirs.data)?;
    let (img, cam) = load_tokenizers(&a.dirs.run)?;
    let mut log = MetricsLog::default();
    if matches!(a.suite, Suite::Tokenizers | Suite::All) {
        let src = TokenizerSource::new(&ds, &img.config, Split::Test)?;
        let r = evaluate_image_tokenizer(&img, &src, 0)?;
        println!("image tokenizer: psnr {:.2} dB, ssim {:.3}, usage {:.3}", r.psnr_mean, r.ssim_mean, r.codebook_usage);
        log.push(&r);
        let src = TokenizerSource::new(&ds, &cam.config, Split::Test)?;
        let r = evaluate_camera_tokenizer(&cam, &src, 0)?;
        println!(
            "camera tokenizer: median rotation error {:.2}°, @15° {:.3}, usage {:.3}, failures {}",
            r.median_rotation_error_deg, r.acc_15, r.codebook_usage, r.failures
        );
        log.push(&r);
    }
    if a.suite != Suite::Tokenizers {
        let (mut mcfg, model, _) = load_gst(&Checkpoint::load(&a.dirs.run.join(GST_CKPT))?)?;
        mcfg.seed = cli.seed.unwrap_or(config.seed);
        mcfg.sampling = config.sampling.clone();
        mcfg.eval = config.eval.clone();
        if let Some(m) = a.max_pairs {
            mcfg.eval.max_pairs = m;
        }
        let pairs = tokenize_pairs(&ds, Split::Test, &img, &cam)?;
        let ctx = EvalContext {
            config: &mcfg,
            dataset: &ds,
            image_tokenizer: &img,
            camera_tokenizer: &cam,
            model: &model,
            pairs: &pairs,
        };
        if matches!(a.suite, Suite::Pose | Suite::All) {
            let r = evaluate_pose(&ctx)?;
            println!(
                "pose: @15° {:.3}  @30° {:.3}  median {:.2}°  | baseline @15° {:.3} @30° {:.3} | tokenizer ceiling @15° {:.3} @30° {:.3}",
                r.acc_15, r.acc_30, r.median_rotation_error_deg, r.baseline_acc_15, r.baseline_acc_30, r.ceiling_acc_15, r.ceiling_acc_30
            );
            log.push(&r);
        }
        if matches!(a.suite, Suite::Nvs | Suite::All) {
            println!("# {LPIPS_NOTE}");
            let r = evaluate_nvs(&ctx)?;
            println!(
                "nvs: psnr {:.2} dB  ssim {:.3}  | tokenizer ceiling psnr {:.2} dB ssim {:.3}",
                r.psnr, r.ssim, r.ceiling_psnr, r.ceiling_ssim
            );
            log.push(&r);
        }
        if matches!(a.suite, Suite::CameraPrior | Suite::All) {
            print_record(&mut log, &evaluate_camera_prior(&ctx, mcfg.eval.prior_samples)?);
        }
        if matches!(a.suite, Suite::ImagePrior | Suite::All) {
            print_record(&mut log, &evaluate_image_prior(&ctx, mcfg.eval.prior_samples.min(32))?);
        }
    }
    write_metrics(cli, &log)
}

/// Artifacts for sampling outside a dataset.
struct Sampler {
    config: Config,
    model: Transformer<f32>,
    img: Tokenizer<f32>,
    cam: Tokenizer<f32>,
    info: DataInfo,
}

impl Sampler {
    fn load(run: &Path, seed: Option<u64>) -> Result<Self> {
        let (mut config, model, info) = load_gst(&Checkpoint::load(&run.join(GST_CKPT))?)?;
        if let Some(s) = seed {
            config.seed = s;
        }
        let info = info.ok_or_else(|| GstError::Format("model checkpoint lacks dataset information".into()))?;
        let (img, cam) = load_tokenizers(run)?;
        Ok(Self { config, model, img, cam, info })
    }

    fn read_image(&self, path: &Path) -> Result<TokenGrid> {
        let (x, w, h) = read_png(path)?;
        if (w, h) != (self.img.config.width, self.img.config.height) {
            return Err(GstError::Usage(format!(
                "{} is {w}x{h}; the model expects {}x{}",
                path.display(),
                self.img.config.width,
                self.img.config.height
            )));
        }
        Ok(self.img.encode(&x)?.0)
    }

    fn camera_k(&self) -> Result<Intrinsics> {
        let k = self.info.intrinsics.to_intrinsics()?;
        Ok(scale_intrinsics(&k, self.cam.config.width, self.cam.config.height))
    }

    /// Generates one segment of an ordered layout after the prefix
    /// `..start`. Placeholder grids in the layout only fix its shape; their
    /// tokens past the prefix are never read.
    fn generate(&self, layout_ids: &[u32], tags: &[gst_core::sequence::PositionTag], ordering: Ordering, start: usize, seed: u64) -> Result<Vec<u32>> {
        let vocab = self.config.vocabulary();
        let (h, w) = self.img.config.grid();
        let l = h * w;
        let modality = if start == l + 2 { ordering.first() } else { ordering.second() };
        let sampling = match modality {
            Modality::Image => self.config.sampling.image,
            Modality::Camera => self.config.sampling.camera,
        };
        let plan: Vec<GenStep> = (start..start + l)
            .map(|p| GenStep {
                tag: tags[p],
                allowed: Some(gst_core::sequence::allowed_range(&vocab, ordering, l, p)),
                sampling,
            })
            .collect();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let ids =
            self.model.generate(&layout_ids[..start], &tags[..start], &plan, &mut rng, true, self.config.sampling.constrained)?;
        let range = vocab.range(modality);
        if let Some(bad) = ids.iter().find(|id| !range.contains(id)) {
            return Err(GstError::Format(format!("sampled id {bad} outside the {} range", modality.name())));
        }
        Ok(ids.iter().map(|id| id - range.start).collect())
    }
}

fn read_relative_camera(path: &Path, scale: f64) -> Result<CameraPose> {
    let (_, poses) = parse_pose_file(&std::fs::read_to_string(path)?)?;
    match poses.as_slice() {
        [rel] => Ok(rel.with_scaled_center(scale)),
        [obs, target, ..] => Ok(target.with_scaled_center(scale).relative_to(&obs.with_scaled_center(scale))),
        [] => Err(GstError::Usage(format!("{} holds no views", path.display()))),
    }
}

fn sample(cli: &Cli, a: &SampleArgs) -> Result<()> {
    if a.mode == SampleMode::Nvs && a.camera.is_none() {
        return Err(GstError::Usage("--mode nvs needs --camera".into()));
    }
    if a.mode == SampleMode::Pose && a.target.is_none() {
        return Err(GstError::Usage("--mode pose needs --target".into()));
    }
    let s = Sampler::load(&a.run, cli.seed)?;
    let vocab = s.config.vocabulary();
    let (h, w) = s.img.config.grid();
    let l = h * w;
    let obs = s.read_image(&a.observation)?;
    let k = s.camera_k()?;
    let blank_cam = TokenGrid { height: h, width: w, indices: vec![0; l], modality: Modality::Camera };
    let blank_img = TokenGrid { height: h, width: w, indices: vec![0; l], modality: Modality::Image };
    std::fs::create_dir_all(&a.out)?;
    let (iw, ih) = (s.img.config.width, s.img.config.height);
    let mut poses = vec![CameraPose::identity()];
    let unscale = 1.0 / s.info.scale;
    for i in 0..a.num {
        let seed = gst_core::seed::derive(s.config.seed, &[gst_core::seed::stream::SAMPLE, i as u64]);
        match a.mode {
            SampleMode::Nvs => {
                let rel = read_relative_camera(a.camera.as_ref().expect("checked"), s.info.scale)?;
                let map = crate::train::camera_map(&rel, &k);
                let cam = s.cam.encode(&map)?.0;
                let lay = build_sequence(&vocab, &obs, &blank_img, &cam, Ordering::CamThenImg)?;
                let ids = s.generate(&lay.ids, &lay.tags, Ordering::CamThenImg, 2 * l + 2, seed)?;
                let img = s.img.decode(&TokenGrid { height: h, width: w, indices: ids, modality: Modality::Image })?;
                write_png(&a.out.join(format!("nvs_{i:03}.png")), &img, iw, ih)?;
            }
            SampleMode::ImagePrior => {
                let lay = build_sequence(&vocab, &obs, &blank_img, &blank_cam, Ordering::ImgThenCam)?;
                let ids = s.generate(&lay.ids, &lay.tags, Ordering::ImgThenCam, l + 2, seed)?;
                let img = s.img.decode(&TokenGrid { height: h, width: w, indices: ids, modality: Modality::Image })?;
                write_png(&a.out.join(format!("image_prior_{i:03}.png")), &img, iw, ih)?;
            }
            SampleMode::Pose | SampleMode::CameraPrior => {
                let (lay, start) = if a.mode == SampleMode::Pose {
                    let target = s.read_image(a.target.as_ref().expect("checked"))?;
                    (build_sequence(&vocab, &obs, &target, &blank_cam, Ordering::ImgThenCam)?, 2 * l + 2)
                } else {
                    (build_sequence(&vocab, &obs, &blank_img, &blank_cam, Ordering::CamThenImg)?, l + 2)
                };
                let ordering = lay.ordering.expect("ordered");
                let ids = s.generate(&lay.ids, &lay.tags, ordering, start, seed)?;
                let grid = TokenGrid { height: h, width: w, indices: ids, modality: Modality::Camera };
                match tokens_to_pose(&s.cam, &grid, &k) {
                    Ok((pose, _)) => poses.push(pose.with_scaled_center(unscale)),
                    Err(e) => eprintln!("sample {i}: could not recover a pose ({e})"),
                }
            }
        }
    }
    if matches!(a.mode, SampleMode::Pose | SampleMode::CameraPrior) {
        let k_img = s.info.intrinsics.to_intrinsics()?;
        let name = if a.mode == SampleMode::Pose { "pose.txt" } else { "camera_prior.txt" };
        std::fs::write(a.out.join(name), format_pose_file(&k_img, &poses))?;
        println!("wrote {} poses (view 0 is the observation) to {}", poses.len() - 1, a.out.join(name).display());
    } else {
        println!("wrote {} images to {}", a.num, a.out.display());
    }
    write_metrics(cli, &MetricsLog::default())
}
