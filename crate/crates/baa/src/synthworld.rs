//! Procedural indoor scenes rendered in two visual styles that share
//! geometry exactly.
//!
//! A [`Scene`] is a closed axis-aligned room (floor, ceiling, four walls)
//! with clutter boxes placed in a ring between the walls and the navigable
//! interior, plus thin wall panels for appearance variety. Cameras sampled
//! inside the navigable region can never intersect a primitive, and every
//! ray terminates on the room shell, so depth is finite everywhere.
//!
//! A [`DomainStyle`] maps the geometric attributes at a ray hit (surface
//! normal, height, per-primitive identity) to colour. Source and target
//! styles differ in palette, lighting, gamma and noise amplitude, never in
//! geometry: depth maps rendered under the two styles are bit-identical.
//!
//! Units are millimetres throughout.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

use crate::geometry::{GeometryError, Intrinsics, Pose, Trajectory};
use crate::par;
use crate::tensor::io::{load_tensor, save_tensor, ContainerError};
use crate::tensor::Tensor;

/// Inter-frame motion caps for trajectory sequences.
pub const MAX_STEP_MM: f64 = 400.0;
pub const MAX_STEP_ROT_RAD: f64 = 30.0 * std::f64::consts::PI / 180.0;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("clutter placement failed after {attempts} attempts")]
    PlacementFailed { attempts: usize },
    #[error("camera pose at ({x:.0}, {y:.0}, {z:.0}) is outside the navigable region")]
    PoseOutsideNavigable { x: f64, y: f64, z: f64 },
    #[error("no trajectory satisfying the motion bounds after {attempts} attempts")]
    PathNotFound { attempts: usize },
    #[error("trajectory length must be at least 2, got {0}")]
    PathTooShort(usize),
    #[error("scene needs at least one clutter primitive")]
    NoPrimitives,
    #[error("invalid dataset config: {0}")]
    BadConfig(String),
    #[error("dataset on disk disagrees with its manifest: {0}")]
    ManifestMismatch(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("malformed manifest: {0}")]
    BadManifest(#[from] serde_json::Error),
}

// ---- deterministic seed derivation ----

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Independent stream for (`seed`, `salt`) pairs.
pub(crate) fn mix_seed(seed: u64, salt: u64) -> u64 {
    splitmix64(seed ^ splitmix64(salt))
}

const SALT_SCENE: u64 = 0x7363656e65;
const SALT_TRAJ: u64 = 0x7472616a;
const SALT_TARGET_POSE: u64 = 0x74706f7365;
const SALT_NOISE: u64 = 0x6e6f697365;

// ---- scene ----

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }

    /// The two in-plane axes, in ascending index order.
    fn others(self) -> (usize, usize) {
        match self {
            Axis::X => (1, 2),
            Axis::Y => (0, 2),
            Axis::Z => (0, 1),
        }
    }
}

/// Finite axis-aligned rectangle: the plane `p[axis] = offset`, bounded by
/// `lo..hi` on the remaining two axes.
#[derive(Clone, Copy, Debug)]
pub struct RectPrim {
    pub axis: Axis,
    pub offset: f64,
    pub lo: [f64; 2],
    pub hi: [f64; 2],
    pub id: u32,
}

#[derive(Clone, Copy, Debug)]
pub struct BoxPrim {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
    pub id: u32,
}

impl BoxPrim {
    pub fn contains(&self, p: Vector3<f64>) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Primitive {
    Rect(RectPrim),
    Box(BoxPrim),
}

impl Primitive {
    pub fn id(&self) -> u32 {
        match self {
            Primitive::Rect(r) => r.id,
            Primitive::Box(b) => b.id,
        }
    }
}

/// Axis-aligned rectangle in the x/z plane where camera centres may lie,
/// with the admissible camera-height band.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct NavRegion {
    pub min_x: f64,
    pub max_x: f64,
    pub min_z: f64,
    pub max_z: f64,
    pub min_y: f64,
    pub max_y: f64,
}

impl NavRegion {
    pub fn contains(&self, p: Vector3<f64>) -> bool {
        p.x >= self.min_x
            && p.x <= self.max_x
            && p.z >= self.min_z
            && p.z <= self.max_z
            && p.y >= self.min_y
            && p.y <= self.max_y
    }

    /// Plan-view diagonal, the length scale for trajectory sampling.
    pub fn diameter(&self) -> f64 {
        ((self.max_x - self.min_x).powi(2) + (self.max_z - self.min_z).powi(2)).sqrt()
    }
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub seed: u64,
    pub primitives: Vec<Primitive>,
    pub navigable: NavRegion,
    /// Room extents: x in `0..room[0]`, y in `0..room[1]`, z in `0..room[2]`.
    pub room: Vector3<f64>,
    noise_seed: u64,
}

/// Clearance between the navigable region and any clutter primitive.
const NAV_CLEARANCE: f64 = 100.0;
/// Navigable inset from the walls; clutter lives in this ring.
const NAV_INSET: f64 = 1000.0;
const WALL_MARGIN: f64 = 50.0;
const PLACEMENT_TRIES: usize = 50;

/// Builds a closed room with `n_clutter` boxes in the wall ring and a few
/// wall panels. Deterministic in `seed`.
pub fn generate_scene(seed: u64, n_clutter: usize) -> Result<Scene, WorldError> {
    if n_clutter == 0 {
        return Err(WorldError::NoPrimitives);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, SALT_SCENE));
    let room = Vector3::new(
        rng.gen_range(3600.0..4800.0),
        rng.gen_range(2400.0..2800.0),
        rng.gen_range(4400.0..6000.0),
    );
    let navigable = NavRegion {
        min_x: NAV_INSET,
        max_x: room.x - NAV_INSET,
        min_z: NAV_INSET,
        max_z: room.z - NAV_INSET,
        min_y: 1400.0,
        max_y: 1650.0,
    };

    let mut primitives = Vec::new();
    let mut next_id = 0u32;
    let mut id = || {
        let i = next_id;
        next_id += 1;
        i
    };

    // room shell: floor, ceiling, four walls
    let shell = [
        (Axis::Y, 0.0, [0.0, 0.0], [room.x, room.z]),
        (Axis::Y, room.y, [0.0, 0.0], [room.x, room.z]),
        (Axis::X, 0.0, [0.0, 0.0], [room.y, room.z]),
        (Axis::X, room.x, [0.0, 0.0], [room.y, room.z]),
        (Axis::Z, 0.0, [0.0, 0.0], [room.x, room.y]),
        (Axis::Z, room.z, [0.0, 0.0], [room.x, room.y]),
    ];
    for (axis, offset, lo, hi) in shell {
        primitives.push(Primitive::Rect(RectPrim {
            axis,
            offset,
            lo,
            hi,
            id: id(),
        }));
    }

    // wall panels: thin decals slightly inside each x/z wall
    for (axis, wall_at, inward) in [
        (Axis::X, 0.0, 1.0),
        (Axis::X, room.x, -1.0),
        (Axis::Z, 0.0, 1.0),
        (Axis::Z, room.z, -1.0),
    ] {
        let along_max = if axis == Axis::X { room.z } else { room.x };
        for _ in 0..rng.gen_range(1..=2usize) {
            let w = rng.gen_range(600.0..1500.0);
            let h = rng.gen_range(400.0..1100.0);
            let a0 = rng.gen_range(100.0..(along_max - w - 100.0));
            let y0 = rng.gen_range(300.0..(room.y - h - 300.0));
            // rect in-plane axes for X: (y, z); for Z: (x, y)
            let (lo, hi) = if axis == Axis::X {
                ([y0, a0], [y0 + h, a0 + w])
            } else {
                ([a0, y0], [a0 + w, y0 + h])
            };
            primitives.push(Primitive::Rect(RectPrim {
                axis,
                offset: wall_at + inward * 2.0,
                lo,
                hi,
                id: id(),
            }));
        }
    }

    // clutter boxes in the ring between navigable region and walls
    for _ in 0..n_clutter {
        let b = place_clutter(&mut rng, room, &navigable)?;
        primitives.push(Primitive::Box(BoxPrim {
            min: b.0,
            max: b.1,
            id: id(),
        }));
    }

    Ok(Scene {
        seed,
        primitives,
        navigable,
        room,
        noise_seed: mix_seed(seed, SALT_NOISE),
    })
}

/// Samples a clutter footprint whose plan-view rectangle stays inside the
/// room (with wall margin) and outside the navigable region (with
/// clearance).
fn place_clutter(
    rng: &mut ChaCha8Rng,
    room: Vector3<f64>,
    nav: &NavRegion,
) -> Result<(Vector3<f64>, Vector3<f64>), WorldError> {
    for _ in 0..PLACEMENT_TRIES {
        let sx = rng.gen_range(250.0..800.0);
        let sz = rng.gen_range(250.0..800.0);
        let h = rng.gen_range(400.0..2200.0);
        let cx = rng.gen_range((WALL_MARGIN + sx / 2.0)..(room.x - WALL_MARGIN - sx / 2.0));
        let cz = rng.gen_range((WALL_MARGIN + sz / 2.0)..(room.z - WALL_MARGIN - sz / 2.0));
        let (min_x, max_x) = (cx - sx / 2.0, cx + sx / 2.0);
        let (min_z, max_z) = (cz - sz / 2.0, cz + sz / 2.0);
        let overlaps_nav = max_x > nav.min_x - NAV_CLEARANCE
            && min_x < nav.max_x + NAV_CLEARANCE
            && max_z > nav.min_z - NAV_CLEARANCE
            && min_z < nav.max_z + NAV_CLEARANCE;
        if !overlaps_nav {
            return Ok((
                Vector3::new(min_x, 0.0, min_z),
                Vector3::new(max_x, h, max_z),
            ));
        }
    }
    Err(WorldError::PlacementFailed {
        attempts: PLACEMENT_TRIES,
    })
}

// ---- styles ----

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleId {
    Source,
    Target,
}

impl std::fmt::Display for StyleId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StyleId::Source => write!(f, "source"),
            StyleId::Target => write!(f, "target"),
        }
    }
}

/// Appearance parameters; geometry is untouched by construction.
#[derive(Clone, Copy, Debug)]
pub struct DomainStyle {
    pub style_id: StyleId,
    /// Per-primitive colours come from `hash(palette_seed, primitive id)`.
    pub palette_seed: u64,
    /// Direction light travels (normalised at use).
    pub light_dir: Vector3<f64>,
    pub ambient: f64,
    pub diffuse: f64,
    pub gamma: f64,
    /// Additive texture-noise amplitude; the noise pattern itself is
    /// scene-seeded and shared across styles.
    pub noise_amp: f64,
    /// Whether rendered frames keep depth and pose. True for the source
    /// domain, false for the target domain.
    pub retain_gt: bool,
}

impl DomainStyle {
    pub fn source() -> Self {
        DomainStyle {
            style_id: StyleId::Source,
            palette_seed: 0x736f75726365,
            light_dir: Vector3::new(0.35, -0.8, 0.45),
            ambient: 0.35,
            diffuse: 0.65,
            gamma: 1.0,
            noise_amp: 0.03,
            retain_gt: true,
        }
    }

    pub fn target() -> Self {
        DomainStyle {
            style_id: StyleId::Target,
            palette_seed: 0x746172676574,
            light_dir: Vector3::new(-0.55, -0.5, -0.35),
            ambient: 0.55,
            diffuse: 0.45,
            gamma: 1.45,
            noise_amp: 0.10,
            retain_gt: false,
        }
    }

    pub fn for_id(id: StyleId) -> Self {
        match id {
            StyleId::Source => Self::source(),
            StyleId::Target => Self::target(),
        }
    }

    /// Same appearance, but frames keep depth and pose. For tests and for
    /// held-out evaluation data.
    pub fn probe(mut self) -> Self {
        self.retain_gt = true;
        self
    }

    fn base_colour(&self, prim_id: u32) -> [f64; 3] {
        let h = splitmix64(self.palette_seed ^ (prim_id as u64).wrapping_mul(0x9e37_79b9));
        let unit = |bits: u64| (bits & 0xffff) as f64 / 65535.0;
        [
            0.15 + 0.75 * unit(h),
            0.15 + 0.75 * unit(h >> 16),
            0.15 + 0.75 * unit(h >> 32),
        ]
    }
}

// ---- value noise ----

fn lattice_value(seed: u64, ix: i64, iy: i64, iz: i64) -> f64 {
    let h = splitmix64(
        seed ^ (ix as u64).wrapping_mul(0x8da6b343)
            ^ (iy as u64).wrapping_mul(0xd8163841)
            ^ (iz as u64).wrapping_mul(0xcb1ab31f),
    );
    (h & 0xffff_ffff) as f64 / u32::MAX as f64 * 2.0 - 1.0
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Trilinear value noise in [-1, 1], one octave.
fn value_noise(seed: u64, p: Vector3<f64>) -> f64 {
    let base = p.map(|v| v.floor());
    let frac = p - base;
    let (ix, iy, iz) = (base.x as i64, base.y as i64, base.z as i64);
    let (fx, fy, fz) = (smooth(frac.x), smooth(frac.y), smooth(frac.z));
    let mut corners = [0.0; 8];
    for (i, c) in corners.iter_mut().enumerate() {
        let (dx, dy, dz) = ((i & 1) as i64, ((i >> 1) & 1) as i64, ((i >> 2) & 1) as i64);
        *c = lattice_value(seed, ix + dx, iy + dy, iz + dz);
    }
    let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
    let x00 = lerp(corners[0], corners[1], fx);
    let x10 = lerp(corners[2], corners[3], fx);
    let x01 = lerp(corners[4], corners[5], fx);
    let x11 = lerp(corners[6], corners[7], fx);
    let y0 = lerp(x00, x10, fy);
    let y1 = lerp(x01, x11, fy);
    lerp(y0, y1, fz)
}

/// Two octaves at wavelengths of roughly 500 mm and 170 mm.
fn texture_noise(seed: u64, p: Vector3<f64>) -> f64 {
    0.7 * value_noise(seed, p / 500.0) + 0.3 * value_noise(seed ^ 0xa5a5, p / 170.0)
}

// ---- ray casting ----

struct Hit {
    /// Camera-frame z of the hit point (the ray is parameterised so the
    /// parameter equals depth).
    depth: f64,
    normal: Vector3<f64>,
    prim_id: u32,
    point: Vector3<f64>,
}

const RAY_EPS: f64 = 1e-9;

fn intersect_rect(rect: &RectPrim, origin: Vector3<f64>, dir: Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
    let a = rect.axis.index();
    if dir[a].abs() < RAY_EPS {
        return None;
    }
    let s = (rect.offset - origin[a]) / dir[a];
    if s <= RAY_EPS {
        return None;
    }
    let p = origin + s * dir;
    let (b, c) = rect.axis.others();
    if p[b] < rect.lo[0] || p[b] > rect.hi[0] || p[c] < rect.lo[1] || p[c] > rect.hi[1] {
        return None;
    }
    // face the viewer
    let mut n = Vector3::zeros();
    n[a] = if dir[a] > 0.0 { -1.0 } else { 1.0 };
    Some((s, n))
}

fn intersect_box(bx: &BoxPrim, origin: Vector3<f64>, dir: Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut near_axis = 0usize;
    for a in 0..3 {
        if dir[a].abs() < RAY_EPS {
            if origin[a] < bx.min[a] || origin[a] > bx.max[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[a];
        let (mut t0, mut t1) = ((bx.min[a] - origin[a]) * inv, (bx.max[a] - origin[a]) * inv);
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        if t0 > t_near {
            t_near = t0;
            near_axis = a;
        }
        t_far = t_far.min(t1);
        if t_near > t_far {
            return None;
        }
    }
    if t_near <= RAY_EPS {
        return None; // inside or behind: cameras never are, by construction
    }
    let mut n = Vector3::zeros();
    n[near_axis] = if dir[near_axis] > 0.0 { -1.0 } else { 1.0 };
    Some((t_near, n))
}

fn trace(scene: &Scene, origin: Vector3<f64>, dir: Vector3<f64>) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    for prim in &scene.primitives {
        let hit = match prim {
            Primitive::Rect(r) => intersect_rect(r, origin, dir),
            Primitive::Box(b) => intersect_box(b, origin, dir),
        };
        if let Some((s, n)) = hit {
            if best.as_ref().map_or(true, |b| s < b.depth) {
                best = Some(Hit {
                    depth: s,
                    normal: n,
                    prim_id: prim.id(),
                    point: origin + s * dir,
                });
            }
        }
    }
    best
}

// ---- rendering ----

/// One rendered frame. Images are HxWx3 in [0, 1]; depth, when present, is
/// HxW camera-frame z in millimetres.
#[derive(Clone, Debug)]
pub struct FrameSample {
    pub image: Tensor<f32>,
    pub depth: Option<Tensor<f32>>,
    pub pose: Option<Pose>,
}

/// Ray-casts one frame. Depth depends only on geometry; colour is
/// `appearance(normal, height, primitive id; style)` plus scene-seeded
/// texture noise. The returned sample keeps depth and pose only when the
/// style retains ground truth.
pub fn render(
    scene: &Scene,
    style: &DomainStyle,
    pose: &Pose,
    k: &Intrinsics,
) -> Result<FrameSample, WorldError> {
    let c = pose.translation();
    if !scene.navigable.contains(c) {
        return Err(WorldError::PoseOutsideNavigable {
            x: c.x,
            y: c.y,
            z: c.z,
        });
    }
    let (h, w) = (k.height, k.width);
    let mut image = Tensor::zeros(&[h, w, 3]);
    let mut depth = Tensor::zeros(&[h, w]);
    let light = style.light_dir.normalize();
    let r = pose.rotation();

    for py in 0..h {
        for px in 0..w {
            // camera-frame direction with z = 1: the ray parameter is depth
            let dir_cam = k.unproject(px as f64, py as f64, 1.0);
            let dir = r * dir_cam;
            // closed room: every ray hits the shell
            let hit = trace(scene, c, dir).expect("closed room yields a hit for every ray");
            depth.data_mut()[py * w + px] = hit.depth as f32;

            let lambert = style.ambient + style.diffuse * hit.normal.dot(&-light).max(0.0);
            let height_shade = 0.85 + 0.15 * (hit.point.y / scene.room.y).clamp(0.0, 1.0);
            let noise = style.noise_amp * texture_noise(scene.noise_seed, hit.point);
            let base = style.base_colour(hit.prim_id);
            let out = &mut image.data_mut()[(py * w + px) * 3..(py * w + px) * 3 + 3];
            for ch in 0..3 {
                let v = (base[ch] * lambert * height_shade + noise).clamp(0.0, 1.0);
                out[ch] = v.powf(style.gamma) as f32;
            }
        }
    }

    Ok(FrameSample {
        image,
        depth: style.retain_gt.then_some(depth),
        pose: style.retain_gt.then_some(*pose),
    })
}

// ---- trajectories ----

/// Smooth path between two navigable points: linear interpolation plus a
/// perpendicular sinusoidal sway, yaw following a blend of local heading
/// and the overall direction, constant downward pitch. Resamples until the
/// inter-frame motion bounds hold.
pub fn sample_trajectory(scene: &Scene, length: usize, seed: u64) -> Result<Vec<Pose>, WorldError> {
    if length < 2 {
        return Err(WorldError::PathTooShort(length));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(scene.seed, mix_seed(seed, SALT_TRAJ)));
    let nav = &scene.navigable;
    let diag = nav.diameter();
    let steps = (length - 1) as f64;
    const ATTEMPTS: usize = 100;

    for _ in 0..ATTEMPTS {
        // endpoints inset so the sway cannot leave the navigable region
        let margin = 240.0;
        if nav.max_x - nav.min_x < 2.0 * margin || nav.max_z - nav.min_z < 2.0 * margin {
            return Err(WorldError::PathNotFound { attempts: 0 });
        }
        let draw = |rng: &mut ChaCha8Rng| {
            Vector3::new(
                rng.gen_range((nav.min_x + margin)..(nav.max_x - margin)),
                0.0,
                rng.gen_range((nav.min_z + margin)..(nav.max_z - margin)),
            )
        };
        let a = draw(&mut rng);
        let mut b = draw(&mut rng);
        let min_len = (0.3 * diag).min(steps * 250.0);
        let max_len = (0.95 * diag).min(steps * 380.0);
        let ab = b - a;
        if ab.norm() < 1.0 {
            continue;
        }
        if ab.norm() > max_len {
            b = a + ab / ab.norm() * max_len;
        }
        if (b - a).norm() < min_len {
            continue;
        }

        let ab = b - a;
        let path_len = ab.norm();
        let ab_dir = ab / path_len;
        let perp = Vector3::new(-ab_dir.z, 0.0, ab_dir.x);
        let amp = rng.gen_range(0.03..0.06) * path_len;
        let freq = rng.gen_range(0.8..2.2) * (steps / 19.0).min(1.0);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let y = rng.gen_range(nav.min_y..nav.max_y);
        let pitch = rng.gen_range(0.07..0.17);

        let pos = |i: usize| {
            let s = i as f64 / steps;
            let sway = amp * (std::f64::consts::TAU * freq * s + phase).sin();
            let p = a + s * ab + sway * perp;
            Vector3::new(p.x, y, p.z)
        };

        let mut poses = Vec::with_capacity(length);
        for i in 0..length {
            let p = pos(i);
            let tangent = if i + 1 < length { pos(i + 1) - p } else { p - pos(i - 1) };
            let heading = (0.5 * tangent.normalize() + 0.5 * ab_dir).normalize();
            let yaw = heading.x.atan2(heading.z);
            let r_yaw = Pose::from_axis_angle(Vector3::y(), yaw, Vector3::zeros());
            let r_pitch = Pose::from_axis_angle(Vector3::x(), pitch, Vector3::zeros());
            poses.push(Pose::new_unchecked(
                (r_yaw.compose(&r_pitch).rotation()).clone_owned(),
                p,
            ));
        }

        let bound = MAX_STEP_MM.min(0.3 * scene.room.norm());
        let ok = poses.windows(2).all(|w| {
            let dt = (w[1].translation() - w[0].translation()).norm();
            let dr = w[0].rotation_angle_to(&w[1]);
            dt <= bound && dr <= MAX_STEP_ROT_RAD
        }) && poses.iter().all(|p| nav.contains(p.translation()));
        if ok {
            return Ok(poses);
        }
    }
    Err(WorldError::PathNotFound { attempts: ATTEMPTS })
}

/// Unordered single-view pose for target-domain stills.
fn sample_still_pose(scene: &Scene, seed: u64) -> Pose {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(scene.seed, mix_seed(seed, SALT_TARGET_POSE)));
    let nav = &scene.navigable;
    let p = Vector3::new(
        rng.gen_range(nav.min_x..nav.max_x),
        rng.gen_range(nav.min_y..nav.max_y),
        rng.gen_range(nav.min_z..nav.max_z),
    );
    let yaw = rng.gen_range(0.0..std::f64::consts::TAU);
    let pitch = rng.gen_range(0.07..0.17);
    let r_yaw = Pose::from_axis_angle(Vector3::y(), yaw, Vector3::zeros());
    let r_pitch = Pose::from_axis_angle(Vector3::x(), pitch, Vector3::zeros());
    Pose::new_unchecked(r_yaw.compose(&r_pitch).rotation().clone_owned(), p)
}

// ---- datasets ----

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub image_size: usize,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub clutter_per_scene: usize,
    pub source_train_sequences: usize,
    pub seq_len: usize,
    pub target_train_images: usize,
    pub test_trajectories: usize,
    pub test_traj_len: usize,
    /// Disjoint offsets carving scene-seed ranges out of the master seed.
    pub train_seed_base: u64,
    pub test_seed_base: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            seed: 0,
            image_size: 32,
            train_scenes: 8,
            test_scenes: 4,
            clutter_per_scene: 10,
            source_train_sequences: 2000,
            seq_len: 5,
            target_train_images: 4000,
            test_trajectories: 20,
            test_traj_len: 50,
            train_seed_base: 1_000,
            test_seed_base: 2_000,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), WorldError> {
        let bad = |m: String| Err(WorldError::BadConfig(m));
        if self.image_size == 0 || self.image_size % 8 != 0 {
            return bad(format!("image_size must be a positive multiple of 8, got {}", self.image_size));
        }
        if self.train_scenes == 0 || self.test_scenes == 0 {
            return bad("need at least one train and one test scene".into());
        }
        if self.seq_len < 2 || self.test_traj_len < 2 {
            return bad("sequence lengths must be at least 2".into());
        }
        if self.source_train_sequences == 0 || self.target_train_images == 0 || self.test_trajectories == 0 {
            return bad("all split sizes must be positive".into());
        }
        let train = self.train_seed_base..self.train_seed_base + self.train_scenes as u64;
        let test = self.test_seed_base..self.test_seed_base + self.test_scenes as u64;
        if train.start < test.end && test.start < train.end {
            return bad(format!(
                "train scene seeds {}..{} overlap test scene seeds {}..{}",
                train.start, train.end, test.start, test.end
            ));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics::square(self.image_size)
    }

    fn train_scene_seeds(&self) -> Vec<u64> {
        (0..self.train_scenes as u64)
            .map(|i| splitmix64(self.seed).wrapping_add(self.train_seed_base + i))
            .collect()
    }

    fn test_scene_seeds(&self) -> Vec<u64> {
        (0..self.test_scenes as u64)
            .map(|i| splitmix64(self.seed).wrapping_add(self.test_seed_base + i))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: u64,
    pub style: StyleId,
    pub sequences: usize,
    pub frames_per_sequence: usize,
}

/// Fixed-length frame sequences with shared metadata.
#[derive(Clone, Debug)]
pub struct SequenceDataset {
    pub sequences: Vec<Vec<FrameSample>>,
    pub meta: DatasetMeta,
}

/// Unordered stills; order is storage order only.
#[derive(Clone, Debug)]
pub struct ImageDataset {
    pub images: Vec<FrameSample>,
    pub meta: DatasetMeta,
}

#[derive(Clone, Debug)]
pub struct Datasets {
    pub source_train: SequenceDataset,
    pub source_test: SequenceDataset,
    pub target_train: ImageDataset,
    /// Target-style test sequences. Poses (all frames) and depth (frame 0
    /// only) are evaluation anchors, never training inputs.
    pub target_test: SequenceDataset,
    pub config: DatasetConfig,
}

/// Trajectories longer than a training sequence are cut into consecutive
/// windows, so several training sequences share one smooth path.
const TRAIN_TRAJ_WINDOWS: usize = 4;

pub fn build_datasets(config: &DatasetConfig) -> Result<Datasets, WorldError> {
    config.validate()?;
    let k = config.intrinsics();
    let source = DomainStyle::source();
    let target = DomainStyle::target();
    // target test frames keep gt for evaluation; loaders/trainers strip it
    let target_probe = DomainStyle::target().probe();

    let train_scenes: Vec<Scene> = config
        .train_scene_seeds()
        .iter()
        .map(|&s| generate_scene(s, config.clutter_per_scene))
        .collect::<Result<_, _>>()?;
    let test_scenes: Vec<Scene> = config
        .test_scene_seeds()
        .iter()
        .map(|&s| generate_scene(s, config.clutter_per_scene))
        .collect::<Result<_, _>>()?;

    // source_train: consecutive windows of longer smooth paths
    let n_traj = config.source_train_sequences.div_ceil(TRAIN_TRAJ_WINDOWS);
    let traj_len = config.seq_len * TRAIN_TRAJ_WINDOWS;
    let mut train_jobs: Vec<(usize, Pose)> = Vec::new(); // (scene index, pose)
    let mut train_seq_bounds = Vec::new();
    for t in 0..n_traj {
        let scene_idx = t % train_scenes.len();
        let poses = sample_trajectory(&train_scenes[scene_idx], traj_len, t as u64)?;
        for w in 0..TRAIN_TRAJ_WINDOWS {
            if train_seq_bounds.len() == config.source_train_sequences {
                break;
            }
            let start = train_jobs.len();
            for i in 0..config.seq_len {
                train_jobs.push((scene_idx, poses[w * config.seq_len + i]));
            }
            train_seq_bounds.push(start);
        }
    }
    let train_frames = render_jobs(&train_jobs, &train_scenes, &source, &k)?;
    let source_train = SequenceDataset {
        sequences: chunk_frames(train_frames, config.seq_len),
        meta: DatasetMeta {
            seed: config.seed,
            style: StyleId::Source,
            sequences: config.source_train_sequences,
            frames_per_sequence: config.seq_len,
        },
    };

    // test splits: identical trajectories rendered in both styles
    let mut test_jobs: Vec<(usize, Pose)> = Vec::new();
    for t in 0..config.test_trajectories {
        let scene_idx = t % test_scenes.len();
        let poses = sample_trajectory(&test_scenes[scene_idx], config.test_traj_len, 10_000 + t as u64)?;
        for p in poses {
            test_jobs.push((scene_idx, p));
        }
    }
    let source_test_frames = render_jobs(&test_jobs, &test_scenes, &source, &k)?;
    let target_test_frames = render_jobs(&test_jobs, &test_scenes, &target_probe, &k)?;
    let source_test = SequenceDataset {
        sequences: chunk_frames(source_test_frames, config.test_traj_len),
        meta: DatasetMeta {
            seed: config.seed,
            style: StyleId::Source,
            sequences: config.test_trajectories,
            frames_per_sequence: config.test_traj_len,
        },
    };
    let target_test = SequenceDataset {
        sequences: chunk_frames(target_test_frames, config.test_traj_len),
        meta: DatasetMeta {
            seed: config.seed,
            style: StyleId::Target,
            sequences: config.test_trajectories,
            frames_per_sequence: config.test_traj_len,
        },
    };

    // target_train: unordered stills over the train scenes
    let still_jobs: Vec<(usize, Pose)> = (0..config.target_train_images)
        .map(|i| {
            let scene_idx = i % train_scenes.len();
            (scene_idx, sample_still_pose(&train_scenes[scene_idx], i as u64))
        })
        .collect();
    let target_train = ImageDataset {
        images: render_jobs(&still_jobs, &train_scenes, &target, &k)?,
        meta: DatasetMeta {
            seed: config.seed,
            style: StyleId::Target,
            sequences: config.target_train_images,
            frames_per_sequence: 1,
        },
    };

    Ok(Datasets {
        source_train,
        source_test,
        target_train,
        target_test,
        config: config.clone(),
    })
}

fn render_jobs(
    jobs: &[(usize, Pose)],
    scenes: &[Scene],
    style: &DomainStyle,
    k: &Intrinsics,
) -> Result<Vec<FrameSample>, WorldError> {
    let rendered: Vec<Result<FrameSample, WorldError>> =
        par::map_indexed(jobs.len(), |i| render(&scenes[jobs[i].0], style, &jobs[i].1, k));
    rendered.into_iter().collect()
}

fn chunk_frames(frames: Vec<FrameSample>, len: usize) -> Vec<Vec<FrameSample>> {
    let mut out = Vec::with_capacity(frames.len() / len);
    let mut it = frames.into_iter();
    loop {
        let chunk: Vec<FrameSample> = it.by_ref().take(len).collect();
        if chunk.is_empty() {
            return out;
        }
        out.push(chunk);
    }
}

// ---- persistence ----

#[derive(Serialize, Deserialize)]
struct SplitManifest {
    style: StyleId,
    sequences: usize,
    frames_per_sequence: usize,
    has_depth: DepthPolicy,
    has_poses: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum DepthPolicy {
    All,
    FirstFrame,
    None,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: DatasetConfig,
    train_scene_seeds: Vec<u64>,
    test_scene_seeds: Vec<u64>,
    splits: std::collections::BTreeMap<String, SplitManifest>,
}

/// Storage chunk for the unordered target stills; carries no temporal
/// meaning.
const STILLS_PER_DIR: usize = 50;

impl Datasets {
    /// Writes `<dir>/<split>/seq_XXXX/frame_YY.{img,dep}` trees, per-sequence
    /// `poses.txt`, and a `manifest.json`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), WorldError> {
        let dir = dir.as_ref();
        save_split(&dir.join("source_train"), &self.source_train.sequences, DepthPolicy::All, true)?;
        save_split(&dir.join("source_test"), &self.source_test.sequences, DepthPolicy::All, true)?;
        save_split(
            &dir.join("target_test"),
            &self.target_test.sequences,
            DepthPolicy::FirstFrame,
            true,
        )?;
        let stills = chunk_frames(self.target_train.images.clone(), STILLS_PER_DIR);
        save_split(&dir.join("target_train"), &stills, DepthPolicy::None, false)?;

        let mut splits = std::collections::BTreeMap::new();
        for (name, meta, depth, poses) in [
            ("source_train", &self.source_train.meta, DepthPolicy::All, true),
            ("source_test", &self.source_test.meta, DepthPolicy::All, true),
            ("target_train", &self.target_train.meta, DepthPolicy::None, false),
            ("target_test", &self.target_test.meta, DepthPolicy::FirstFrame, true),
        ] {
            splits.insert(
                name.to_string(),
                SplitManifest {
                    style: meta.style,
                    sequences: meta.sequences,
                    frames_per_sequence: meta.frames_per_sequence,
                    has_depth: depth,
                    has_poses: poses,
                },
            );
        }
        let manifest = Manifest {
            config: self.config.clone(),
            train_scene_seeds: self.config.train_scene_seeds(),
            test_scene_seeds: self.config.test_scene_seeds(),
            splits,
        };
        let path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&path, json).map_err(|source| WorldError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Datasets, WorldError> {
        let dir = dir.as_ref();
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|source| WorldError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let config = manifest.config.clone();

        let get = |name: &str| {
            manifest
                .splits
                .get(name)
                .ok_or_else(|| WorldError::ManifestMismatch(format!("missing split {name}")))
        };
        let load_seq = |name: &str| -> Result<SequenceDataset, WorldError> {
            let m = get(name)?;
            let sequences = load_split(&dir.join(name), m)?;
            Ok(SequenceDataset {
                sequences,
                meta: DatasetMeta {
                    seed: config.seed,
                    style: m.style,
                    sequences: m.sequences,
                    frames_per_sequence: m.frames_per_sequence,
                },
            })
        };

        let source_train = load_seq("source_train")?;
        let source_test = load_seq("source_test")?;
        let target_test = load_seq("target_test")?;
        let m = get("target_train")?;
        let images: Vec<FrameSample> = load_split(&dir.join("target_train"), m)?
            .into_iter()
            .flatten()
            .collect();
        if images.len() != m.sequences {
            return Err(WorldError::ManifestMismatch(format!(
                "target_train: manifest says {} images, found {}",
                m.sequences,
                images.len()
            )));
        }
        let target_train = ImageDataset {
            images,
            meta: DatasetMeta {
                seed: config.seed,
                style: m.style,
                sequences: m.sequences,
                frames_per_sequence: 1,
            },
        };
        Ok(Datasets {
            source_train,
            source_test,
            target_train,
            target_test,
            config,
        })
    }
}

fn save_split(
    dir: &Path,
    sequences: &[Vec<FrameSample>],
    depth: DepthPolicy,
    poses: bool,
) -> Result<(), WorldError> {
    for (s, seq) in sequences.iter().enumerate() {
        let seq_dir = dir.join(format!("seq_{s:04}"));
        std::fs::create_dir_all(&seq_dir).map_err(|source| WorldError::Io {
            path: seq_dir.display().to_string(),
            source,
        })?;
        for (f, frame) in seq.iter().enumerate() {
            save_tensor(seq_dir.join(format!("frame_{f:02}.img")), &frame.image, "HWC")?;
            let write_depth = match depth {
                DepthPolicy::All => true,
                DepthPolicy::FirstFrame => f == 0,
                DepthPolicy::None => false,
            };
            if write_depth {
                let d = frame.depth.as_ref().ok_or_else(|| {
                    WorldError::ManifestMismatch(format!("frame {f} of seq {s} is missing depth"))
                })?;
                save_tensor(seq_dir.join(format!("frame_{f:02}.dep")), d, "HW")?;
            }
        }
        if poses {
            let traj = Trajectory::new(
                seq.iter()
                    .map(|fr| {
                        fr.pose.ok_or_else(|| {
                            WorldError::ManifestMismatch(format!("sequence {s} is missing a pose"))
                        })
                    })
                    .collect::<Result<_, _>>()?,
            );
            traj.save(seq_dir.join("poses.txt"))?;
        }
    }
    Ok(())
}

fn load_split(dir: &Path, m: &SplitManifest) -> Result<Vec<Vec<FrameSample>>, WorldError> {
    let n_dirs = if m.frames_per_sequence == 1 {
        m.sequences.div_ceil(STILLS_PER_DIR)
    } else {
        m.sequences
    };
    let mut out = Vec::with_capacity(n_dirs);
    for s in 0..n_dirs {
        let seq_dir = dir.join(format!("seq_{s:04}"));
        let traj = if m.has_poses {
            Some(Trajectory::load(seq_dir.join("poses.txt"))?)
        } else {
            None
        };
        let mut frames = Vec::new();
        for f in 0.. {
            let img_path = seq_dir.join(format!("frame_{f:02}.img"));
            if !img_path.exists() {
                break;
            }
            let (image, _) = load_tensor::<f32>(&img_path)?;
            let dep_path = seq_dir.join(format!("frame_{f:02}.dep"));
            let depth = if dep_path.exists() {
                Some(load_tensor::<f32>(&dep_path)?.0)
            } else {
                None
            };
            let pose = match &traj {
                Some(t) => Some(*t.poses.get(f).ok_or_else(|| {
                    WorldError::ManifestMismatch(format!(
                        "{}: poses.txt has no entry for frame {f}",
                        seq_dir.display()
                    ))
                })?),
                None => None,
            };
            frames.push(FrameSample { image, depth, pose });
        }
        if m.frames_per_sequence > 1 && frames.len() != m.frames_per_sequence {
            return Err(WorldError::ManifestMismatch(format!(
                "{}: expected {} frames, found {}",
                seq_dir.display(),
                m.frames_per_sequence,
                frames.len()
            )));
        }
        out.push(frames);
    }
    if m.frames_per_sequence > 1 && out.len() != m.sequences {
        return Err(WorldError::ManifestMismatch(format!(
            "{}: expected {} sequences, found {}",
            dir.display(),
            m.sequences,
            out.len()
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nav_centre(scene: &Scene) -> Pose {
        let nav = &scene.navigable;
        Pose::from_axis_angle(
            Vector3::y(),
            0.7,
            Vector3::new(
                (nav.min_x + nav.max_x) / 2.0,
                1500.0,
                (nav.min_z + nav.max_z) / 2.0,
            ),
        )
    }

    #[test]
    fn scene_generation_is_deterministic() {
        let a = generate_scene(42, 10).unwrap();
        let b = generate_scene(42, 10).unwrap();
        assert_eq!(a.primitives.len(), b.primitives.len());
        for (pa, pb) in a.primitives.iter().zip(&b.primitives) {
            match (pa, pb) {
                (Primitive::Rect(x), Primitive::Rect(y)) => {
                    assert_eq!((x.offset, x.lo, x.hi), (y.offset, y.lo, y.hi));
                }
                (Primitive::Box(x), Primitive::Box(y)) => {
                    assert_eq!((x.min, x.max), (y.min, y.max));
                }
                _ => panic!("primitive kinds diverge"),
            }
        }
        let c = generate_scene(43, 10).unwrap();
        let boxes = |s: &Scene| {
            s.primitives
                .iter()
                .filter_map(|p| match p {
                    Primitive::Box(b) => Some(b.min),
                    _ => None,
                })
                .collect::<Vec<_>>()
        };
        assert_ne!(boxes(&a), boxes(&c), "different seeds, same layout");
    }

    #[test]
    fn navigable_region_is_free_of_primitives() {
        // rejection oracle: densely sampled camera positions hit nothing
        for seed in [1u64, 7, 13] {
            let scene = generate_scene(seed, 12).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let nav = &scene.navigable;
            for _ in 0..1000 {
                let p = Vector3::new(
                    rng.gen_range(nav.min_x..nav.max_x),
                    rng.gen_range(nav.min_y..nav.max_y),
                    rng.gen_range(nav.min_z..nav.max_z),
                );
                for prim in &scene.primitives {
                    if let Primitive::Box(b) = prim {
                        assert!(!b.contains(p), "camera at {p:?} inside clutter {b:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn depth_is_style_independent_and_images_differ() {
        let scene = generate_scene(5, 10).unwrap();
        let k = Intrinsics::square(32);
        let pose = nav_centre(&scene);
        let src = render(&scene, &DomainStyle::source(), &pose, &k).unwrap();
        let probe = render(&scene, &DomainStyle::target().probe(), &pose, &k).unwrap();
        assert_eq!(
            src.depth.as_ref().unwrap().data(),
            probe.depth.as_ref().unwrap().data(),
            "depth must be bit-identical across styles"
        );
        let diff: f32 = src
            .image
            .data()
            .iter()
            .zip(probe.image.data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f32>()
            / src.image.len() as f32;
        assert!(diff > 0.05, "style gap too small: {diff}");
    }

    #[test]
    fn rendered_images_stay_in_unit_range() {
        let scene = generate_scene(3, 10).unwrap();
        let k = Intrinsics::square(32);
        for style in [DomainStyle::source(), DomainStyle::target()] {
            let f = render(&scene, &style, &nav_centre(&scene), &k).unwrap();
            assert!(f.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn target_style_strips_ground_truth() {
        let scene = generate_scene(5, 10).unwrap();
        let k = Intrinsics::square(32);
        let f = render(&scene, &DomainStyle::target(), &nav_centre(&scene), &k).unwrap();
        assert!(f.depth.is_none() && f.pose.is_none());
        let f = render(&scene, &DomainStyle::source(), &nav_centre(&scene), &k).unwrap();
        assert!(f.depth.is_some() && f.pose.is_some());
    }

    #[test]
    fn render_rejects_pose_outside_navigable_region() {
        let scene = generate_scene(5, 10).unwrap();
        let k = Intrinsics::square(32);
        let pose = Pose::from_axis_angle(Vector3::y(), 0.0, Vector3::new(10.0, 1500.0, 10.0));
        assert!(matches!(
            render(&scene, &DomainStyle::source(), &pose, &k),
            Err(WorldError::PoseOutsideNavigable { .. })
        ));
    }

    #[test]
    fn depth_matches_analytic_box_intersection() {
        // hand-placed box 1 m in front of a camera looking straight down +z
        let mut scene = generate_scene(1, 1).unwrap();
        scene.primitives.retain(|p| matches!(p, Primitive::Rect(r) if r.id < 6));
        let c = Vector3::new(
            (scene.navigable.min_x + scene.navigable.max_x) / 2.0,
            1500.0,
            scene.navigable.min_z,
        );
        scene.primitives.push(Primitive::Box(BoxPrim {
            min: Vector3::new(c.x - 500.0, 0.0, c.z + 1000.0),
            max: Vector3::new(c.x + 500.0, 2200.0, c.z + 1400.0),
            id: 99,
        }));
        let k = Intrinsics::square(32);
        let pose = Pose::from_axis_angle(Vector3::y(), 0.0, c); // +z forward
        let f = render(&scene, &DomainStyle::source(), &pose, &k).unwrap();
        let depth = f.depth.unwrap();
        // centre rays: the image centre sits between pixels 15 and 16; both
        // rays hit the front face at z-depth exactly 1000
        for (px, py) in [(15, 15), (16, 16), (15, 16)] {
            let d = depth.data()[py * 32 + px] as f64;
            assert!((d - 1000.0).abs() < 1e-6, "pixel ({px},{py}): {d}");
        }
    }

    #[test]
    fn trajectories_obey_motion_bounds() {
        let scene = generate_scene(2, 10).unwrap();
        for seed in 0..20 {
            let poses = sample_trajectory(&scene, 20, seed).unwrap();
            assert_eq!(poses.len(), 20);
            for w in poses.windows(2) {
                let dt = (w[1].translation() - w[0].translation()).norm();
                assert!(dt <= MAX_STEP_MM, "step {dt}");
                assert!(w[0].rotation_angle_to(&w[1]) <= MAX_STEP_ROT_RAD);
            }
            for p in &poses {
                assert!(scene.navigable.contains(p.translation()));
            }
        }
    }

    #[test]
    fn trajectory_progress_is_monotone_along_its_axis() {
        let scene = generate_scene(4, 10).unwrap();
        for seed in 0..10 {
            let poses = sample_trajectory(&scene, 50, seed).unwrap();
            let axis = (poses[49].translation() - poses[0].translation()).normalize();
            let proj: Vec<f64> = poses.iter().map(|p| p.translation().dot(&axis)).collect();
            for w in proj.windows(2) {
                assert!(w[1] > w[0], "progress reversed: {} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn trajectory_edge_cases() {
        let scene = generate_scene(2, 10).unwrap();
        assert!(matches!(
            sample_trajectory(&scene, 1, 0),
            Err(WorldError::PathTooShort(1))
        ));
        assert_eq!(sample_trajectory(&scene, 2, 0).unwrap().len(), 2);
        assert_eq!(sample_trajectory(&scene, 5, 3).unwrap().len(), 5);
    }

    #[test]
    fn config_rejects_overlapping_seed_ranges() {
        let cfg = DatasetConfig {
            train_seed_base: 100,
            test_seed_base: 104,
            train_scenes: 8,
            ..DatasetConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(WorldError::BadConfig(_))));
        assert!(DatasetConfig::default().validate().is_ok());
    }

    #[test]
    fn value_noise_is_continuous_and_bounded() {
        let seed = 7;
        let mut prev = value_noise(seed, Vector3::new(0.0, 0.3, 0.9));
        for i in 1..200 {
            let p = Vector3::new(i as f64 * 0.01, 0.3, 0.9);
            let v = value_noise(seed, p);
            assert!((-1.0..=1.0).contains(&v));
            assert!((v - prev).abs() < 0.1, "jump at {i}: {prev} -> {v}");
            prev = v;
        }
    }
}
