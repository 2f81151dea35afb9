//! Camera conventions, Plücker ray maps and pose recovery.
//!
//! Poses are stored camera-to-world in the RUB convention: rotation column 0
//! is the camera's right axis, column 1 up, column 2 back, so the camera looks
//! along its local −Z. A pixel `(u, v)` uses integer coordinates directly
//! (no half-pixel offset) and rows grow downward, hence the sign flip on the
//! vertical component in [`pixel_directions`].

use alloc::vec::Vec;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Tolerance used when validating rotations and unit directions.
pub const ORTHONORMAL_TOL: f64 = 1e-9;

/// Published per-dataset scale factors, kept for reference.
pub const REFERENCE_SCALE_FACTORS: [(&str, f64); 4] = [
    ("Objaverse", 1.0),
    ("Co3D", 0.1),
    ("MVImgNet", 0.5),
    ("RealEstate10K", 10.0),
];

/// Default maximum distance between two cameras of a training pair.
pub const DEFAULT_DISTANCE_THRESHOLD: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(&'static str),
    #[error("rotation is not orthonormal with det +1 (deviation {0:e})")]
    InvalidRotation(f64),
    #[error("non-finite camera center")]
    InvalidCenter,
    #[error("ray map is degenerate: smallest eigenvalue {smallest:e} below {threshold:e}")]
    SingularGeometry { smallest: f64, threshold: f64 },
    #[error("direction at cell {0} has near-zero norm")]
    DegenerateDirection(usize),
    #[error("ray map has {got} values, expected {expected}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("dataset needs at least two distinct camera centers (variance {0:e})")]
    DegenerateDataset(f64),
    #[error("scene normalization values must be positive")]
    InvalidNormalization,
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        if !(fx > 0.0 && fx.is_finite()) || !(fy > 0.0 && fy.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics("focal lengths must be positive"));
        }
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidIntrinsics("image size must be non-zero"));
        }
        if !(cx >= 0.0 && cx < width as f64) || !(cy >= 0.0 && cy < height as f64) {
            return Err(GeometryError::InvalidIntrinsics("principal point outside the image"));
        }
        Ok(Self { fx, fy, cx, cy, width, height })
    }

    /// Fixed default camera: focal length equal to the image width (about 53°
    /// horizontal field of view) and the principal point at the image center.
    pub fn default_for(width: usize, height: usize) -> Self {
        Self {
            fx: width as f64,
            fy: width as f64,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        }
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }
}

/// Rigid camera-to-world transform in the RUB convention.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    rotation: Mat3,
    center: Vec3,
}

impl CameraPose {
    pub fn new(rotation: Mat3, center: Vec3) -> Result<Self, GeometryError> {
        let dev = rotation_deviation(&rotation);
        if !(dev <= ORTHONORMAL_TOL) {
            return Err(GeometryError::InvalidRotation(dev));
        }
        if !center.iter().all(|c| c.is_finite()) {
            return Err(GeometryError::InvalidCenter);
        }
        Ok(Self { rotation, center })
    }

    pub fn identity() -> Self {
        Self { rotation: Mat3::identity(), center: Vec3::zeros() }
    }

    /// Builds a pose from an arbitrary (nearly orthonormal) matrix by projecting
    /// it onto the closest proper rotation.
    pub fn from_approximate(rotation: &Mat3, center: Vec3) -> Result<Self, GeometryError> {
        Self::new(nearest_rotation(rotation), center)
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn center(&self) -> &Vec3 {
        &self.center
    }

    /// World-space viewing direction (the camera's −Z axis).
    pub fn view_direction(&self) -> Vec3 {
        -self.rotation.column(2).into_owned()
    }

    /// World-to-camera rotation and translation: `x_cam = R·x_world + t`.
    pub fn world_to_camera(&self) -> (Mat3, Vec3) {
        let r = self.rotation.transpose();
        let t = -(r * self.center);
        (r, t)
    }

    pub fn from_world_to_camera(rotation: Mat3, translation: Vec3) -> Result<Self, GeometryError> {
        let r = rotation.transpose();
        Self::new(r, -(r * translation))
    }

    /// Expresses `self` in the camera frame of `reference`.
    pub fn relative_to(&self, reference: &CameraPose) -> CameraPose {
        let rt = reference.rotation.transpose();
        CameraPose {
            rotation: orthonormalize(&(rt * self.rotation)),
            center: rt * (self.center - reference.center),
        }
    }

    /// Inverse of [`CameraPose::relative_to`]: maps a pose given in the frame of
    /// `reference` back to world coordinates.
    pub fn compose_onto(&self, reference: &CameraPose) -> CameraPose {
        CameraPose {
            rotation: orthonormalize(&(reference.rotation * self.rotation)),
            center: reference.rotation * self.center + reference.center,
        }
    }

    pub fn with_scaled_center(&self, scale: f64) -> CameraPose {
        CameraPose { rotation: self.rotation, center: self.center * scale }
    }
}

fn rotation_deviation(r: &Mat3) -> f64 {
    if !r.iter().all(|v| v.is_finite()) {
        return f64::INFINITY;
    }
    let ortho = (r.transpose() * r - Mat3::identity()).abs().max();
    let det = (r.determinant() - 1.0).abs();
    ortho.max(det)
}

/// Closest proper rotation in Frobenius norm (polar factor with det +1).
pub fn nearest_rotation(m: &Mat3) -> Mat3 {
    procrustes(m)
}

/// Re-orthonormalizes a matrix that is already a rotation up to rounding.
fn orthonormalize(m: &Mat3) -> Mat3 {
    if rotation_deviation(m) < 1e-14 {
        *m
    } else {
        procrustes(m)
    }
}

/// Rotation maximizing `trace(Rᵀ·M)`: for `M = UΣVᵀ` this is
/// `U·diag(1, 1, det(UVᵀ))·Vᵀ`, with the sign correction applied to the
/// smallest singular direction.
fn procrustes(m: &Mat3) -> Mat3 {
    let svd = m.svd(true, true);
    let (Some(mut u), Some(v_t)) = (svd.u, svd.v_t) else {
        return Mat3::identity();
    };
    let det = (u * v_t).determinant();
    if det < 0.0 {
        let mut min_i = 0;
        for i in 1..3 {
            if svd.singular_values[i] < svd.singular_values[min_i] {
                min_i = i;
            }
        }
        let mut col = u.column_mut(min_i);
        col *= -1.0;
    }
    u * v_t
}

/// Plücker line coordinates `(o × d, d)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PluckerRay {
    pub moment: Vec3,
    pub direction: Vec3,
}

impl PluckerRay {
    pub fn through(origin: &Vec3, direction: &Vec3) -> Self {
        let d = direction.normalize();
        Self { moment: origin.cross(&d), direction: d }
    }

    /// Largest deviation from the unit-direction and orthogonality constraints.
    pub fn constraint_violation(&self) -> f64 {
        let unit = (self.direction.norm() - 1.0).abs();
        let ortho = self.moment.dot(&self.direction).abs();
        unit.max(ortho)
    }
}

/// Per-pixel Plücker rays, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RayMap {
    pub height: usize,
    pub width: usize,
    pub rays: Vec<PluckerRay>,
}

impl RayMap {
    pub fn get(&self, row: usize, col: usize) -> &PluckerRay {
        &self.rays[row * self.width + col]
    }

    /// Flattens to `H×W×6` channels ordered moment then direction.
    pub fn to_channels(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.rays.len() * 6);
        for ray in &self.rays {
            out.extend_from_slice(ray.moment.as_slice());
            out.extend_from_slice(ray.direction.as_slice());
        }
        out
    }

    pub fn max_constraint_violation(&self) -> f64 {
        self.rays.iter().map(PluckerRay::constraint_violation).fold(0.0, f64::max)
    }
}

/// Unit ray directions in the camera frame for every pixel, row-major.
pub fn pixel_directions(intrinsics: &Intrinsics) -> Vec<Vec3> {
    let mut out = Vec::with_capacity(intrinsics.num_pixels());
    for v in 0..intrinsics.height {
        for u in 0..intrinsics.width {
            let x = (u as f64 - intrinsics.cx) / intrinsics.fx;
            let y = -(v as f64 - intrinsics.cy) / intrinsics.fy;
            out.push(Vec3::new(x, y, -1.0).normalize());
        }
    }
    out
}

pub fn pose_to_raymap(pose: &CameraPose, intrinsics: &Intrinsics) -> RayMap {
    let rays = pixel_directions(intrinsics)
        .iter()
        .map(|d_cam| {
            let d = (pose.rotation * d_cam).normalize();
            PluckerRay { moment: pose.center.cross(&d), direction: d }
        })
        .collect();
    RayMap { height: intrinsics.height, width: intrinsics.width, rays }
}

/// Sums in a fixed binary-tree order so results do not depend on how the
/// caller schedules the per-pixel work.
fn pairwise_sum<T, F>(items: &[T], f: &F) -> (Mat3, Vec3)
where
    F: Fn(&T) -> (Mat3, Vec3),
{
    match items.len() {
        0 => (Mat3::zeros(), Vec3::zeros()),
        1 => f(&items[0]),
        n => {
            let (l, r) = items.split_at(n / 2);
            let (la, lb) = pairwise_sum(l, f);
            let (ra, rb) = pairwise_sum(r, f);
            (la + ra, lb + rb)
        }
    }
}

/// Least-squares point closest to every ray: solves
/// `Σ(I − ddᵀ)·c = Σ d × m`.
pub fn least_squares_center(rays: &[PluckerRay]) -> Result<Vec3, GeometryError> {
    let (a, b) = pairwise_sum(rays, &|ray: &PluckerRay| {
        let d = &ray.direction;
        (Mat3::identity() - d * d.transpose(), d.cross(&ray.moment))
    });
    let threshold = 1e-8 * a.trace();
    let eig = SymmetricEigen::new(a);
    let smallest = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(smallest > threshold) || !threshold.is_finite() {
        return Err(GeometryError::SingularGeometry { smallest, threshold });
    }
    // A is symmetric positive definite here; solve through its eigenbasis.
    let q = eig.eigenvectors;
    let qb = q.transpose() * b;
    let scaled = Vec3::new(
        qb[0] / eig.eigenvalues[0],
        qb[1] / eig.eigenvalues[1],
        qb[2] / eig.eigenvalues[2],
    );
    Ok(q * scaled)
}

/// Recovers the camera from a ray map: the center is the least-squares ray
/// intersection, the rotation the Procrustes fit between canonical
/// camera-frame directions and the observed world directions.
pub fn raymap_to_pose(raymap: &RayMap, intrinsics: &Intrinsics) -> Result<CameraPose, GeometryError> {
    let expected = intrinsics.num_pixels();
    if raymap.rays.len() != expected {
        return Err(GeometryError::ShapeMismatch { expected, got: raymap.rays.len() });
    }
    let center = least_squares_center(&raymap.rays)?;
    let cam_dirs = pixel_directions(intrinsics);
    let pairs: Vec<(Vec3, Vec3)> =
        raymap.rays.iter().zip(cam_dirs).map(|(r, c)| (r.direction, c)).collect();
    let (m, _) = pairwise_sum(&pairs, &|(dw, dc): &(Vec3, Vec3)| (dw * dc.transpose(), Vec3::zeros()));
    let rotation = procrustes(&m);
    if !center.iter().all(|c| c.is_finite()) {
        return Err(GeometryError::InvalidCenter);
    }
    Ok(CameraPose { rotation, center })
}

/// Projects a raw 6-channel grid (moment then direction) onto valid Plücker
/// rays: unit direction, moment with its direction component removed.
pub fn normalize_raymap(raw: &[f64], height: usize, width: usize) -> Result<RayMap, GeometryError> {
    let expected = height * width * 6;
    if raw.len() != expected {
        return Err(GeometryError::ShapeMismatch { expected, got: raw.len() });
    }
    let mut rays = Vec::with_capacity(height * width);
    for (i, cell) in raw.chunks_exact(6).enumerate() {
        let m = Vec3::new(cell[0], cell[1], cell[2]);
        let d = Vec3::new(cell[3], cell[4], cell[5]);
        let norm = d.norm();
        if !(norm >= 1e-8) || !m.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::DegenerateDirection(i));
        }
        let d = d / norm;
        let m = m - d * m.dot(&d);
        rays.push(PluckerRay { moment: m, direction: d });
    }
    Ok(RayMap { height, width, rays })
}

/// Dataset-wide scale and pair-distance filter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneNormalization {
    pub scale: f64,
    pub distance_threshold: f64,
}

impl SceneNormalization {
    pub fn new(scale: f64, distance_threshold: f64) -> Result<Self, GeometryError> {
        if !(scale > 0.0 && scale.is_finite()) || !(distance_threshold > 0.0) {
            return Err(GeometryError::InvalidNormalization);
        }
        Ok(Self { scale, distance_threshold })
    }
}

/// Mean squared distance of the centers from their centroid.
pub fn center_variance(centers: &[Vec3]) -> f64 {
    if centers.is_empty() {
        return 0.0;
    }
    let n = centers.len() as f64;
    let centroid = centers.iter().fold(Vec3::zeros(), |acc, c| acc + c) / n;
    centers.iter().map(|c| (c - centroid).norm_squared()).sum::<f64>() / n
}

/// Scale factor that brings the variance of the camera centers to one.
pub fn standardize_dataset(centers: &[Vec3]) -> Result<SceneNormalization, GeometryError> {
    let variance = center_variance(centers);
    if centers.len() < 2 || !(variance >= 1e-12) {
        return Err(GeometryError::DegenerateDataset(variance));
    }
    SceneNormalization::new(1.0 / libm::sqrt(variance), DEFAULT_DISTANCE_THRESHOLD)
}

/// Keeps a pair of (already scaled) cameras when their centers are within the
/// distance threshold.
pub fn filter_pair(a: &CameraPose, b: &CameraPose, norm: &SceneNormalization) -> bool {
    (a.center - b.center).norm() <= norm.distance_threshold
}

/// Angle of `r1ᵀ·r2` in degrees.
pub fn rotation_geodesic_error(r1: &Mat3, r2: &Mat3) -> f64 {
    let rel = r1.transpose() * r2;
    let c = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    libm::acos(c).to_degrees()
}

/// Axis convention a pose was authored in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Convention {
    /// right, up, back
    Rub,
    /// right, down, forward (OpenCV / COLMAP)
    Rdf,
    /// left, up, forward
    Luf,
}

impl Convention {
    /// Axis flip that maps camera axes of this convention onto RUB axes.
    pub fn correction(self) -> Mat3 {
        match self {
            Convention::Rub => Mat3::identity(),
            Convention::Rdf => Mat3::from_diagonal(&Vec3::new(1.0, -1.0, -1.0)),
            Convention::Luf => Mat3::from_diagonal(&Vec3::new(-1.0, 1.0, -1.0)),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Convention::Rub => "RUB",
            Convention::Rdf => "RDF",
            Convention::Luf => "LUF",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "RUB" => Some(Convention::Rub),
            "RDF" => Some(Convention::Rdf),
            "LUF" => Some(Convention::Luf),
            _ => None,
        }
    }
}

pub fn to_rub(pose: &CameraPose, source: Convention) -> CameraPose {
    CameraPose { rotation: pose.rotation * source.correction(), center: pose.center }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use core::f64::consts::FRAC_1_SQRT_2;

    fn rot_z(deg: f64) -> Mat3 {
        let (s, c) = libm::sincos(deg.to_radians());
        Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
    }

    #[test]
    fn optical_axis_pixel_looks_down_negative_z() {
        let k = Intrinsics::new(1.0, 1.0, 2.0, 2.0, 5, 5).unwrap();
        let dirs = pixel_directions(&k);
        let d = dirs[2 * 5 + 2];
        assert_relative_eq!(d, Vec3::new(0.0, 0.0, -1.0), epsilon = 1e-15);
    }

    #[test]
    fn pixel_one_focal_length_right_is_45_degrees() {
        let k = Intrinsics::new(1.0, 1.0, 1.0, 1.0, 3, 3).unwrap();
        let d = pixel_directions(&k)[1 * 3 + 2];
        assert_relative_eq!(d, Vec3::new(FRAC_1_SQRT_2, 0.0, -FRAC_1_SQRT_2), epsilon = 1e-15);
    }

    #[test]
    fn pixel_grid_matches_scalar_recomputation() {
        let k = Intrinsics::new(2.0, 2.0, 1.5, 1.5, 4, 4).unwrap();
        let dirs = pixel_directions(&k);
        for v in 0..4 {
            for u in 0..4 {
                let x = (u as f64 - 1.5) / 2.0;
                let y = -(v as f64 - 1.5) / 2.0;
                let n = libm::sqrt(x * x + y * y + 1.0);
                let d = dirs[v * 4 + u];
                assert_relative_eq!(d.x, x / n, epsilon = 1e-15);
                assert_relative_eq!(d.y, y / n, epsilon = 1e-15);
                assert_relative_eq!(d.z, -1.0 / n, epsilon = 1e-15);
            }
        }
        // top-left pixel points left and up
        assert!(dirs[0].x < 0.0 && dirs[0].y > 0.0);
    }

    #[test]
    fn rejects_bad_intrinsics() {
        assert!(Intrinsics::new(0.0, 1.0, 0.0, 0.0, 4, 4).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 4.0, 0.0, 4, 4).is_err());
        assert!(Intrinsics::new(1.0, 1.0, -0.5, 0.0, 4, 4).is_err());
    }

    #[test]
    fn ray_through_origin_has_zero_moment() {
        let pose = CameraPose::new(Mat3::identity(), Vec3::new(0.0, 0.0, 2.0)).unwrap();
        let k = Intrinsics::new(1.0, 1.0, 1.0, 1.0, 3, 3).unwrap();
        let map = pose_to_raymap(&pose, &k);
        let ray = map.get(1, 1);
        assert_relative_eq!(ray.moment, Vec3::zeros(), epsilon = 1e-15);
        assert_relative_eq!(ray.direction, Vec3::new(0.0, 0.0, -1.0), epsilon = 1e-15);
    }

    #[test]
    fn moment_cross_product() {
        let ray = PluckerRay::through(&Vec3::new(1.0, 0.0, 0.0), &Vec3::new(0.0, 0.0, -1.0));
        assert_relative_eq!(ray.moment, Vec3::new(0.0, 1.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn identity_round_trip() {
        let pose = CameraPose::new(Mat3::identity(), Vec3::new(0.0, 0.0, 2.0)).unwrap();
        let k = Intrinsics::default_for(8, 8);
        let back = raymap_to_pose(&pose_to_raymap(&pose, &k), &k).unwrap();
        assert!(rotation_geodesic_error(back.rotation(), pose.rotation()).to_radians() < 1e-6);
        assert!((back.center() - pose.center()).norm() < 1e-6);
    }

    #[test]
    fn two_rays_intersect_at_point() {
        let p = Vec3::new(1.0, 2.0, 3.0);
        let rays = [
            PluckerRay::through(&p, &Vec3::new(1.0, 0.0, 0.0)),
            PluckerRay::through(&p, &Vec3::new(0.0, 1.0, 0.0)),
        ];
        let c = least_squares_center(&rays).unwrap();
        assert_relative_eq!(c, p, epsilon = 1e-12);
    }

    #[test]
    fn parallel_rays_are_singular() {
        let d = Vec3::new(0.0, 0.0, -1.0);
        let rays: Vec<_> = (0..6)
            .map(|i| PluckerRay::through(&Vec3::new(i as f64, 0.5 * i as f64, 0.0), &d))
            .collect();
        assert!(matches!(
            least_squares_center(&rays),
            Err(GeometryError::SingularGeometry { .. })
        ));
    }

    #[test]
    fn normalize_projects_moment() {
        let raw = [1.0, 0.0, -1.0, 0.0, 0.0, -2.0];
        let map = normalize_raymap(&raw, 1, 1).unwrap();
        assert_relative_eq!(map.rays[0].direction, Vec3::new(0.0, 0.0, -1.0), epsilon = 1e-15);
        assert_relative_eq!(map.rays[0].moment, Vec3::new(1.0, 0.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn normalize_keeps_valid_ray() {
        let ray = PluckerRay::through(&Vec3::new(0.3, -1.0, 2.0), &Vec3::new(1.0, 2.0, -0.5));
        let raw: Vec<f64> = ray.moment.iter().chain(ray.direction.iter()).copied().collect();
        let map = normalize_raymap(&raw, 1, 1).unwrap();
        assert_relative_eq!(map.rays[0].moment, ray.moment, epsilon = 1e-12);
        assert_relative_eq!(map.rays[0].direction, ray.direction, epsilon = 1e-12);
    }

    #[test]
    fn normalize_rejects_zero_direction() {
        let raw = [0.0, 1.0, 0.0, 0.0, 0.0, 1e-9];
        assert_eq!(normalize_raymap(&raw, 1, 1), Err(GeometryError::DegenerateDirection(0)));
        assert!(matches!(
            normalize_raymap(&raw[..5], 1, 1),
            Err(GeometryError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn standardize_examples() {
        let n = standardize_dataset(&[Vec3::zeros(), Vec3::new(2.0, 0.0, 0.0)]).unwrap();
        assert_relative_eq!(n.scale, 1.0, epsilon = 1e-12);
        let n = standardize_dataset(&[Vec3::zeros(), Vec3::new(4.0, 0.0, 0.0)]).unwrap();
        assert_relative_eq!(n.scale, 0.5, epsilon = 1e-12);
        assert_eq!(n.distance_threshold, 5.0);
    }

    #[test]
    fn standardize_rejects_degenerate() {
        let p = Vec3::new(1.0, 1.0, 1.0);
        assert!(matches!(standardize_dataset(&[p, p]), Err(GeometryError::DegenerateDataset(_))));
        assert!(matches!(standardize_dataset(&[p]), Err(GeometryError::DegenerateDataset(_))));
    }

    #[test]
    fn reference_scale_factors() {
        let get = |name: &str| REFERENCE_SCALE_FACTORS.iter().find(|(n, _)| *n == name).unwrap().1;
        assert_eq!(get("Objaverse"), 1.0);
        assert_eq!(get("Co3D"), 0.1);
        assert_eq!(get("MVImgNet"), 0.5);
        assert_eq!(get("RealEstate10K"), 10.0);
    }

    #[test]
    fn filter_pair_threshold() {
        let norm = SceneNormalization::new(1.0, 5.0).unwrap();
        let a = CameraPose::identity();
        let at = |x: f64| CameraPose::new(Mat3::identity(), Vec3::new(x, 0.0, 0.0)).unwrap();
        assert!(filter_pair(&a, &at(4.9), &norm));
        assert!(!filter_pair(&a, &at(5.1), &norm));
        assert!(filter_pair(&a, &a, &norm));
    }

    #[test]
    fn geodesic_error_examples() {
        let r1 = rot_z(30.0);
        assert_eq!(rotation_geodesic_error(&r1, &r1), 0.0);
        let r2 = rot_z(15.0) * r1;
        assert!((rotation_geodesic_error(&r1, &r2) - 15.0).abs() < 1e-9);
    }

    #[test]
    fn to_rub_conventions() {
        let pose = CameraPose::new(rot_z(20.0), Vec3::new(1.0, 2.0, 3.0)).unwrap();
        assert_eq!(to_rub(&pose, Convention::Rub), pose);

        // An RDF camera looks along its +Z; after conversion the RUB −Z axis
        // must point the same way in the world.
        let rdf = CameraPose::identity();
        let rdf_view = rdf.rotation() * Vec3::new(0.0, 0.0, 1.0);
        let rub = to_rub(&rdf, Convention::Rdf);
        assert_relative_eq!(rub.view_direction(), rdf_view, epsilon = 1e-15);
        assert_relative_eq!(rub.rotation().determinant(), 1.0, epsilon = 1e-15);

        let luf_view = Vec3::new(0.0, 0.0, 1.0);
        let rub = to_rub(&CameraPose::identity(), Convention::Luf);
        assert_relative_eq!(rub.view_direction(), luf_view, epsilon = 1e-15);

        for c in [Convention::Rub, Convention::Rdf, Convention::Luf] {
            assert_eq!(c.correction() * c.correction(), Mat3::identity());
            assert_eq!(Convention::parse(c.name()), Some(c));
        }
    }

    #[test]
    fn relative_pose_round_trip() {
        let a = CameraPose::new(rot_z(40.0), Vec3::new(1.0, -2.0, 0.5)).unwrap();
        let b = CameraPose::new(rot_z(-75.0), Vec3::new(0.0, 3.0, 1.5)).unwrap();
        let rel = b.relative_to(&a);
        let back = rel.compose_onto(&a);
        assert_relative_eq!(back.rotation(), b.rotation(), epsilon = 1e-12);
        assert_relative_eq!(back.center(), b.center(), epsilon = 1e-12);
        assert_relative_eq!(*a.relative_to(&a).rotation(), Mat3::identity(), epsilon = 1e-12);
    }

    #[test]
    fn world_to_camera_inverse() {
        let a = CameraPose::new(rot_z(40.0), Vec3::new(1.0, -2.0, 0.5)).unwrap();
        let (r, t) = a.world_to_camera();
        let b = CameraPose::from_world_to_camera(r, t).unwrap();
        assert_relative_eq!(b.center(), a.center(), epsilon = 1e-12);
        // the center maps to the camera origin
        assert_relative_eq!(r * a.center() + t, Vec3::zeros(), epsilon = 1e-12);
    }

    #[test]
    fn rejects_reflection() {
        let m = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, -1.0));
        assert!(matches!(CameraPose::new(m, Vec3::zeros()), Err(GeometryError::InvalidRotation(_))));
        let fixed = nearest_rotation(&(rot_z(10.0) * 1.01));
        assert!(rotation_deviation(&fixed) < 1e-12);
    }
}
