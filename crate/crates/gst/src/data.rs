//! Synthetic multi-view datasets: generation, on-disk layout and loading.
//!
//! ```text
//! <root>/manifest.json
//! <root>/scenes/scene_00000/poses.txt
//! <root>/scenes/scene_00000/view_00.png
//! ```
//!
//! Images are 8-bit RGB. Poses are world-space camera-to-world transforms
//! in RUB; the dataset scale β lives in the manifest and is applied when
//! poses are loaded for training.

use std::fs;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use gst_core::geometry::{
    filter_pair, standardize_dataset, CameraPose, Convention, GeometryError, Intrinsics, Mat3, SceneNormalization, Vec3,
    DEFAULT_DISTANCE_THRESHOLD,
};
use gst_core::scenes::{render, sample_camera, sample_scene, CameraSampler, SceneSpec};
use gst_core::seed::{derive, stream};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GstError, Result};

pub const MANIFEST_VERSION: u32 = 1;
pub const POSE_FILE_VERSION: u32 = 1;

/// Maps an image value in `[−1, 1]` to an 8-bit level.
pub fn to_u8(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

pub fn from_u8(b: u8) -> f32 {
    b as f32 / 255.0 * 2.0 - 1.0
}

/// Rounds an image through 8-bit storage, as a disk round trip would.
pub fn quantize_image(img: &[f32]) -> Vec<f32> {
    img.iter().map(|&v| from_u8(to_u8(v))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntrinsicsRecord {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl From<Intrinsics> for IntrinsicsRecord {
    fn from(k: Intrinsics) -> Self {
        Self { fx: k.fx, fy: k.fy, cx: k.cx, cy: k.cy, width: k.width, height: k.height }
    }
}

impl IntrinsicsRecord {
    pub fn to_intrinsics(&self) -> Result<Intrinsics> {
        Ok(Intrinsics::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerRecord {
    pub radius_min: f64,
    pub radius_max: f64,
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
    pub jitter_sigma: f64,
}

impl From<CameraSampler> for SamplerRecord {
    fn from(s: CameraSampler) -> Self {
        Self {
            radius_min: s.radius_range.0,
            radius_max: s.radius_range.1,
            elevation_min_deg: s.elevation_range_deg.0,
            elevation_max_deg: s.elevation_range_deg.1,
            jitter_sigma: s.jitter_sigma,
        }
    }
}

impl From<SamplerRecord> for CameraSampler {
    fn from(s: SamplerRecord) -> Self {
        CameraSampler {
            radius_range: (s.radius_min, s.radius_max),
            elevation_range_deg: (s.elevation_min_deg, s.elevation_max_deg),
            jitter_sigma: s.jitter_sigma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Generation parameters; two runs with equal parameters produce identical
/// trees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub num_scenes: usize,
    pub views_per_scene: usize,
    pub seed: u64,
    pub sampler: SamplerRecord,
    pub intrinsics: IntrinsicsRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub params: GenParams,
    /// β: multiplies every camera center so training-split centers have
    /// unit variance.
    pub scale: f64,
    /// δ, in standardized units.
    pub distance_threshold: f64,
    pub splits: Splits,
}

impl Manifest {
    pub fn normalization(&self) -> Result<SceneNormalization> {
        Ok(SceneNormalization::new(self.scale, self.distance_threshold)?)
    }
}

/// One scene's views; images are 8-bit-exact values in `[−1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub id: usize,
    pub spec_seed: u64,
    pub poses: Vec<CameraPose>,
    pub images: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub intrinsics: Intrinsics,
    pub scenes: Vec<SceneRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl Dataset {
    pub fn split_ids(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.manifest.splits.train,
            Split::Val => &self.manifest.splits.val,
            Split::Test => &self.manifest.splits.test,
        }
    }

    pub fn scene(&self, id: usize) -> &SceneRecord {
        &self.scenes[id]
    }

    pub fn normalization(&self) -> Result<SceneNormalization> {
        self.manifest.normalization()
    }

    /// Scene spec for re-rendering, regenerated from its seed.
    pub fn spec(&self, id: usize) -> SceneSpec {
        sample_scene(self.scenes[id].spec_seed)
    }

    /// Pose of view `v` with its center multiplied by β.
    pub fn scaled_pose(&self, scene: usize, view: usize) -> CameraPose {
        self.scenes[scene].poses[view].with_scaled_center(self.manifest.scale)
    }

    /// All `(scene, obs_view, target_view)` pairs in a split that pass the
    /// distance filter, `obs ≠ target`, in a fixed order.
    pub fn pairs(&self, split: Split) -> Result<Vec<(usize, usize, usize)>> {
        let norm = self.normalization()?;
        let mut out = Vec::new();
        for &s in self.split_ids(split) {
            let n = self.scenes[s].poses.len();
            for a in 0..n {
                for b in 0..n {
                    if a != b && filter_pair(&self.scaled_pose(s, a), &self.scaled_pose(s, b), &norm) {
                        out.push((s, a, b));
                    }
                }
            }
        }
        Ok(out)
    }
}

/// 90/5/5 split by scene, keeping at least one validation and one test scene
/// once there are three or more scenes.
pub fn split_scenes(num_scenes: usize, seed: u64) -> Splits {
    let mut ids: Vec<usize> = (0..num_scenes).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(derive(seed, &[stream::SPLIT])));
    let (mut val_n, mut test_n) = ((num_scenes * 5) / 100, (num_scenes * 5) / 100);
    if num_scenes >= 3 {
        val_n = val_n.max(1);
        test_n = test_n.max(1);
    }
    let mut test: Vec<usize> = ids[..test_n].to_vec();
    let mut val: Vec<usize> = ids[test_n..test_n + val_n].to_vec();
    let mut train: Vec<usize> = ids[test_n + val_n..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Splits { train, val, test }
}

/// Renders every scene in memory. Deterministic in `params`.
pub fn generate(params: &GenParams) -> Result<Dataset> {
    if params.num_scenes == 0 || params.views_per_scene < 2 {
        return Err(GstError::Usage("need at least one scene and two views per scene".into()));
    }
    let intrinsics = params.intrinsics.to_intrinsics()?;
    let sampler: CameraSampler = params.sampler.into();
    let scenes: Vec<SceneRecord> = (0..params.num_scenes)
        .map(|id| {
            let spec_seed = derive(params.seed, &[stream::SCENE, id as u64]);
            let spec = sample_scene(spec_seed);
            let poses: Vec<CameraPose> = (0..params.views_per_scene)
                .map(|v| sample_camera(&spec, &sampler, derive(params.seed, &[stream::CAMERA, id as u64, v as u64])))
                .collect();
            let images = poses.iter().map(|p| quantize_image(&render(&spec, p, &intrinsics))).collect();
            SceneRecord { id, spec_seed, poses, images }
        })
        .collect();
    let splits = split_scenes(params.num_scenes, params.seed);
    let train_centers: Vec<Vec3> =
        splits.train.iter().flat_map(|&s| scenes[s].poses.iter().map(|p| *p.center())).collect();
    let norm = standardize_dataset(&train_centers)?;
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        params: *params,
        scale: norm.scale,
        distance_threshold: DEFAULT_DISTANCE_THRESHOLD,
        splits,
    };
    Ok(Dataset { manifest, intrinsics, scenes })
}

pub fn scene_dir(root: &Path, id: usize) -> PathBuf {
    root.join("scenes").join(format!("scene_{id:05}"))
}

/// Writes a dataset to `root`. Refuses to touch a directory whose existing
/// manifest was produced with different parameters.
pub fn write_dataset(ds: &Dataset, root: &Path) -> Result<()> {
    let manifest_path = root.join("manifest.json");
    if manifest_path.exists() {
        let existing: Manifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
        if existing.params != ds.manifest.params {
            return Err(GstError::ManifestConflict(root.display().to_string()));
        }
    } else if root.exists() && fs::read_dir(root)?.next().is_some() {
        return Err(GstError::ManifestConflict(format!("{} is not empty", root.display())));
    }
    fs::create_dir_all(root)?;
    for scene in &ds.scenes {
        let dir = scene_dir(root, scene.id);
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("poses.txt"), format_pose_file(&ds.intrinsics, &scene.poses))?;
        for (v, img) in scene.images.iter().enumerate() {
            write_png(&dir.join(format!("view_{v:02}.png")), img, ds.intrinsics.width, ds.intrinsics.height)?;
        }
    }
    let mut text = serde_json::to_string_pretty(&ds.manifest)?;
    text.push('\n');
    fs::write(manifest_path, text)?;
    Ok(())
}

pub fn gen_dataset(params: &GenParams, root: &Path) -> Result<Dataset> {
    let ds = generate(params)?;
    write_dataset(&ds, root)?;
    Ok(ds)
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(root.join("manifest.json"))?)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(GstError::Format(format!("unsupported manifest version {}", manifest.version)));
    }
    let intrinsics = manifest.params.intrinsics.to_intrinsics()?;
    let mut scenes = Vec::with_capacity(manifest.params.num_scenes);
    for id in 0..manifest.params.num_scenes {
        let dir = scene_dir(root, id);
        let (k, poses) = parse_pose_file(&fs::read_to_string(dir.join("poses.txt"))?)?;
        if k != intrinsics {
            return Err(GstError::Format(format!("scene {id}: intrinsics differ from manifest")));
        }
        let mut images = Vec::with_capacity(poses.len());
        for v in 0..poses.len() {
            let (img, w, h) = read_png(&dir.join(format!("view_{v:02}.png")))?;
            if (w, h) != (intrinsics.width, intrinsics.height) {
                return Err(GstError::Format(format!("scene {id} view {v}: unexpected image size {w}x{h}")));
            }
            images.push(img);
        }
        let spec_seed = derive(manifest.params.seed, &[stream::SCENE, id as u64]);
        scenes.push(SceneRecord { id, spec_seed, poses, images });
    }
    Ok(Dataset { manifest, intrinsics, scenes })
}

/// Text pose file. Reals use 17 significant digits so values round-trip.
pub fn format_pose_file(k: &Intrinsics, poses: &[CameraPose]) -> String {
    let mut s = String::new();
    s.push_str(&format!("version {POSE_FILE_VERSION}\n"));
    s.push_str("convention RUB\n");
    s.push_str(&format!(
        "intrinsics {:.16e} {:.16e} {:.16e} {:.16e} {} {}\n",
        k.fx, k.fy, k.cx, k.cy, k.width, k.height
    ));
    s.push_str(&format!("views {}\n", poses.len()));
    for (i, p) in poses.iter().enumerate() {
        s.push_str(&format!("view {i}"));
        let r = p.rotation();
        for row in 0..3 {
            for col in 0..3 {
                s.push_str(&format!(" {:.16e}", r[(row, col)]));
            }
        }
        for v in p.center().iter() {
            s.push_str(&format!(" {v:.16e}"));
        }
        s.push('\n');
    }
    s
}

pub fn parse_pose_file(text: &str) -> Result<(Intrinsics, Vec<CameraPose>)> {
    let bad = |m: &str| GstError::Format(format!("pose file: {m}"));
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let mut field = |name: &str| -> Result<Vec<String>> {
        let line = lines.next().ok_or_else(|| bad(&format!("missing {name}")))?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some(name) {
            return Err(bad(&format!("expected {name}")));
        }
        Ok(parts.map(str::to_string).collect())
    };
    let version = field("version")?;
    if version != [POSE_FILE_VERSION.to_string()] {
        return Err(bad("unsupported version"));
    }
    let conv = field("convention")?;
    let convention = conv.first().and_then(|c| Convention::parse(c)).ok_or_else(|| bad("unknown convention"))?;
    let kf = field("intrinsics")?;
    if kf.len() != 6 {
        return Err(bad("intrinsics needs 6 fields"));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|_| bad("invalid number"));
    let int = |s: &str| s.parse::<usize>().map_err(|_| bad("invalid integer"));
    let k = Intrinsics::new(num(&kf[0])?, num(&kf[1])?, num(&kf[2])?, num(&kf[3])?, int(&kf[4])?, int(&kf[5])?)?;
    let count = field("views")?;
    let n = count.first().map(|c| int(c)).transpose()?.ok_or_else(|| bad("views count"))?;
    let mut poses = Vec::with_capacity(n);
    for i in 0..n {
        let v = field("view")?;
        if v.len() != 13 || int(&v[0])? != i {
            return Err(bad("malformed view line"));
        }
        let vals: Vec<f64> = v[1..].iter().map(|s| num(s)).collect::<Result<_>>()?;
        let r = Mat3::from_row_slice(&vals[..9]);
        let c = Vec3::new(vals[9], vals[10], vals[11]);
        let pose = CameraPose::new(r, c)?;
        poses.push(gst_core::geometry::to_rub(&pose, convention));
    }
    Ok((k, poses))
}

pub fn write_png(path: &Path, img: &[f32], width: usize, height: usize) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| GstError::Format(e.to_string()))?;
    let bytes: Vec<u8> = img.iter().map(|&v| to_u8(v)).collect();
    writer.write_image_data(&bytes).map_err(|e| GstError::Format(e.to_string()))?;
    writer.finish().map_err(|e| GstError::Format(e.to_string()))?;
    Ok(())
}

/// Reads an 8-bit RGB PNG into `[−1, 1]` values plus `(width, height)`.
pub fn read_png(path: &Path) -> Result<(Vec<f32>, usize, usize)> {
    let file = fs::File::open(path)?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| GstError::Format(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(|e| GstError::Format(e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(GstError::Format(format!("{}: expected 8-bit RGB", path.display())));
    }
    let bytes = &buf[..info.buffer_size()];
    Ok((bytes.iter().map(|&b| from_u8(b)).collect(), info.width as usize, info.height as usize))
}

/// Writes a binary PPM; handy for eyeballing samples without a PNG viewer.
pub fn write_ppm(path: &Path, img: &[f32], width: usize, height: usize) -> Result<()> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    write!(f, "P6\n{width} {height}\n255\n")?;
    f.write_all(&img.iter().map(|&v| to_u8(v)).collect::<Vec<_>>())?;
    Ok(())
}

impl From<GeometryError> for GstError {
    fn from(e: GeometryError) -> Self {
        GstError::Geometry(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_params(n: usize, views: usize, seed: u64) -> GenParams {
        GenParams {
            num_scenes: n,
            views_per_scene: views,
            seed,
            sampler: CameraSampler::default().into(),
            intrinsics: Intrinsics::default_for(8, 8).into(),
        }
    }

    #[test]
    fn u8_mapping_is_exact_on_levels() {
        for b in 0..=255u8 {
            assert_eq!(to_u8(from_u8(b)), b);
        }
        assert_eq!(to_u8(-1.0), 0);
        assert_eq!(to_u8(1.0), 255);
    }

    #[test]
    fn split_is_a_partition() {
        for n in [1, 2, 3, 10, 100, 2000] {
            let s = split_scenes(n, 4);
            let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..n).collect::<Vec<_>>());
            if n >= 3 {
                assert!(!s.val.is_empty() && !s.test.is_empty());
            }
        }
        let s = split_scenes(2000, 1);
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (1800, 100, 100));
    }

    #[test]
    fn pose_file_round_trip() {
        let ds = generate(&small_params(2, 3, 9)).unwrap();
        let text = format_pose_file(&ds.intrinsics, &ds.scenes[1].poses);
        let (k, poses) = parse_pose_file(&text).unwrap();
        assert_eq!(k, ds.intrinsics);
        assert_eq!(poses, ds.scenes[1].poses);
    }

    #[test]
    fn pose_file_rejects_garbage() {
        assert!(parse_pose_file("version 2\n").is_err());
        assert!(parse_pose_file("version 1\nconvention XYZ\n").is_err());
    }

    #[test]
    fn rdf_pose_file_is_converted() {
        let text = "version 1\nconvention RDF\nintrinsics 8 8 4 4 8 8\nviews 1\nview 0 1 0 0 0 1 0 0 0 1 0 0 2\n";
        let (_, poses) = parse_pose_file(text).unwrap();
        assert_eq!(poses[0].view_direction(), Vec3::new(0.0, 0.0, 1.0));
    }
}
