//! Procedural scenes of spheres and axis-aligned boxes, a camera sampler and
//! a one-ray-per-pixel Lambertian renderer.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{pose_to_raymap, CameraPose, Intrinsics, Mat3, Vec3};

pub const MIN_PRIMITIVES: usize = 1;
pub const MAX_PRIMITIVES: usize = 5;
pub const SIZE_RANGE: (f64, f64) = (0.15, 0.5);
pub const MIN_CENTER_SPACING: f64 = 0.1;
const SPACING_RETRIES: usize = 64;

pub const AMBIENT: f64 = 0.2;

/// Unit direction toward the light.
pub fn light_direction() -> Vec3 {
    Vec3::new(1.0, 1.0, 1.0).normalize()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrimitiveKind {
    Sphere,
    Box,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Primitive {
    pub kind: PrimitiveKind,
    pub center: Vec3,
    /// Sphere radius or box half-extent.
    pub size: f64,
    pub albedo: [f64; 3],
}

impl Primitive {
    /// Nearest positive hit distance along the ray and the surface normal.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, Vec3)> {
        const EPS: f64 = 1e-9;
        match self.kind {
            PrimitiveKind::Sphere => {
                let oc = origin - self.center;
                let b = oc.dot(dir);
                let c = oc.norm_squared() - self.size * self.size;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let sq = libm::sqrt(disc);
                let t = if -b - sq > EPS { -b - sq } else { -b + sq };
                if t <= EPS {
                    return None;
                }
                let p = origin + dir * t;
                Some((t, (p - self.center) / self.size))
            }
            PrimitiveKind::Box => {
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                let mut near_axis = 0;
                let mut far_axis = 0;
                for axis in 0..3 {
                    let lo = self.center[axis] - self.size;
                    let hi = self.center[axis] + self.size;
                    if dir[axis] == 0.0 {
                        if origin[axis] < lo || origin[axis] > hi {
                            return None;
                        }
                        continue;
                    }
                    let inv = 1.0 / dir[axis];
                    let (t0, t1) = {
                        let a = (lo - origin[axis]) * inv;
                        let b = (hi - origin[axis]) * inv;
                        if a < b { (a, b) } else { (b, a) }
                    };
                    if t0 > t_near {
                        t_near = t0;
                        near_axis = axis;
                    }
                    if t1 < t_far {
                        t_far = t1;
                        far_axis = axis;
                    }
                }
                if t_near > t_far {
                    return None;
                }
                let (t, axis) = if t_near > EPS {
                    (t_near, near_axis)
                } else if t_far > EPS {
                    (t_far, far_axis)
                } else {
                    return None;
                };
                let p = origin + dir * t;
                let mut normal = Vec3::zeros();
                normal[axis] = if p[axis] > self.center[axis] { 1.0 } else { -1.0 };
                Some((t, normal))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    pub background: [f64; 3],
    pub seed: u64,
}

impl SceneSpec {
    /// Mean of the primitive centers, or the origin for an empty scene.
    pub fn centroid(&self) -> Vec3 {
        if self.primitives.is_empty() {
            return Vec3::zeros();
        }
        self.primitives.iter().fold(Vec3::zeros(), |acc, p| acc + p.center) / self.primitives.len() as f64
    }
}

fn random_unit_cube_point(rng: &mut ChaCha8Rng) -> Vec3 {
    Vec3::new(rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0))
}

fn random_rgb(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 3] {
    [rng.random_range(lo..=hi), rng.random_range(lo..=hi), rng.random_range(lo..=hi)]
}

pub fn sample_scene(seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.random_range(MIN_PRIMITIVES..=MAX_PRIMITIVES);
    let mut primitives: Vec<Primitive> = Vec::with_capacity(count);
    let mut spacing = MIN_CENTER_SPACING;
    while primitives.len() < count {
        let mut placed = false;
        for _ in 0..SPACING_RETRIES {
            let center = random_unit_cube_point(&mut rng);
            if primitives.iter().all(|p| (p.center - center).norm() >= spacing) {
                let kind = if rng.random_bool(0.5) { PrimitiveKind::Sphere } else { PrimitiveKind::Box };
                let size = rng.random_range(SIZE_RANGE.0..=SIZE_RANGE.1);
                let albedo = random_rgb(&mut rng, 0.0, 1.0);
                primitives.push(Primitive { kind, center, size, albedo });
                placed = true;
                break;
            }
        }
        if !placed {
            spacing *= 0.5;
        }
    }
    let background = random_rgb(&mut rng, 0.0, 0.6);
    SceneSpec { primitives, background, seed }
}

/// Distribution of viewpoints around a scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraSampler {
    pub radius_range: (f64, f64),
    pub elevation_range_deg: (f64, f64),
    pub jitter_sigma: f64,
}

impl Default for CameraSampler {
    fn default() -> Self {
        Self { radius_range: (1.8, 3.2), elevation_range_deg: (-10.0, 70.0), jitter_sigma: 0.05 }
    }
}

/// Camera at `position` looking at `target` with world up `+Y`, RUB axes.
pub fn look_at(position: Vec3, target: Vec3) -> CameraPose {
    let back = (position - target).normalize();
    let up_world = Vec3::new(0.0, 1.0, 0.0);
    let right = up_world.cross(&back).normalize();
    let up = back.cross(&right);
    let rotation = Mat3::from_columns(&[right, up, back]);
    CameraPose::from_approximate(&rotation, position).expect("look-at produced an invalid pose")
}

/// Elevation in degrees of `position` seen from `centroid`.
pub fn elevation_deg(position: &Vec3, centroid: &Vec3) -> f64 {
    let v = position - centroid;
    libm::asin((v.y / v.norm()).clamp(-1.0, 1.0)).to_degrees()
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)
}

/// Camera position and look-at target for explicit spherical coordinates.
pub fn spherical_camera(centroid: Vec3, radius: f64, elevation_deg: f64, azimuth_rad: f64, jitter: Vec3) -> CameraPose {
    let (se, ce) = libm::sincos(elevation_deg.to_radians());
    let (sa, ca) = libm::sincos(azimuth_rad);
    let position = centroid + Vec3::new(ce * sa, se, ce * ca) * radius;
    look_at(position, centroid + jitter)
}

pub fn sample_camera(spec: &SceneSpec, sampler: &CameraSampler, seed: u64) -> CameraPose {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let radius = rng.random_range(sampler.radius_range.0..=sampler.radius_range.1);
    let elevation = rng.random_range(sampler.elevation_range_deg.0..=sampler.elevation_range_deg.1);
    let azimuth = rng.random_range(0.0..core::f64::consts::TAU);
    let jitter = Vec3::new(standard_normal(&mut rng), standard_normal(&mut rng), standard_normal(&mut rng))
        * sampler.jitter_sigma;
    spherical_camera(spec.centroid(), radius, elevation, azimuth, jitter)
}

/// Renders an `H×W×3` image with values in `[−1, 1]`, row-major RGB.
pub fn render(spec: &SceneSpec, pose: &CameraPose, intrinsics: &Intrinsics) -> Vec<f32> {
    let raymap = pose_to_raymap(pose, intrinsics);
    let light = light_direction();
    let origin = *pose.center();
    let mut out = Vec::with_capacity(raymap.rays.len() * 3);
    for ray in &raymap.rays {
        let mut best: Option<(f64, Vec3, [f64; 3])> = None;
        for prim in &spec.primitives {
            if let Some((t, n)) = prim.intersect(&origin, &ray.direction) {
                if best.as_ref().is_none_or(|(bt, _, _)| t < *bt) {
                    best = Some((t, n, prim.albedo));
                }
            }
        }
        let rgb = match best {
            Some((_, normal, albedo)) => {
                let shade = (AMBIENT + normal.dot(&light).max(0.0)).min(1.0);
                [albedo[0] * shade, albedo[1] * shade, albedo[2] * shade]
            }
            None => spec.background,
        };
        out.extend(rgb.iter().map(|&c| (2.0 * c - 1.0) as f32));
    }
    out
}
