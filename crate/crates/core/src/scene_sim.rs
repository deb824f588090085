//! Synthetic manipulation episodes: a scripted 2D pick-and-place world with
//! three injectable anomaly kinds, plus the 3D geometry utilities (grid
//! sampling inside a box, pinhole projection, bounding boxes) used to seed
//! object masks in a camera-based pipeline.
//!
//! The world lives in normalized image coordinates `[0,1]^2` with y growing
//! downward. Objects rest on a table line, get carried to one of four
//! shelf compartments, and are rendered as disc/rectangle masks from which
//! point sets are grid-sampled.

use crate::error::{Error, Result};
use crate::util::rng_from;
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub const DEFAULT_JOINTS: usize = 7;
pub const DEFAULT_IMAGE_SIZE: usize = 128;
pub const DEFAULT_POINTS_PER_FRAME: usize = 32;
/// Minimum frames needed by the scripted phases.
pub const MIN_EPISODE_LEN: usize = 24;

const TABLE_Y: f64 = 0.80;
const SHELF_Y: f64 = 0.24;
const CRUISE_Y: f64 = 0.48;
const ATTACH_DY: f64 = 0.04;
const EE_JITTER: f64 = 0.003;
const JOINT_JITTER: f64 = 0.002;
const FALL_ACCEL: f64 = 0.012;
/// Path deviation (normalized units, ~1.5 px at the default render size)
/// at which a wrong-target trajectory counts as having branched.
const BRANCH_EPS: f64 = 1.5 / 128.0;

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RobotStateFrame {
    pub joints: Vec<f64>,
    pub gripper: f64,
    /// Position (m) then unit quaternion (w, x, y, z).
    pub pose: [f64; 7],
}

impl RobotStateFrame {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gripper) {
            return Err(Error::InvalidDimensions(format!(
                "gripper {} outside [0,1]",
                self.gripper
            )));
        }
        let q = &self.pose[3..7];
        let n: f64 = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidDimensions(format!("quaternion norm {n}")));
        }
        if self.joints.iter().chain(self.pose.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidDimensions("non-finite robot state".into()));
        }
        Ok(())
    }

    /// Flat vector: joints ++ gripper ++ pose.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.joints.clone();
        v.push(self.gripper);
        v.extend_from_slice(&self.pose);
        v
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PointFrame {
    /// Normalized image coordinates in `[0,1]^2`.
    pub points: Vec<[f64; 2]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Normal,
    Anomalous,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    None,
    GripperOpen,
    GripperSlippage,
    SpatialMisalignment,
}

impl AnomalyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AnomalyKind::None => "none",
            AnomalyKind::GripperOpen => "gripper_open",
            AnomalyKind::GripperSlippage => "gripper_slippage",
            AnomalyKind::SpatialMisalignment => "spatial_misalignment",
        }
    }

    pub fn parse(s: &str) -> Option<AnomalyKind> {
        match s {
            "none" => Some(AnomalyKind::None),
            "gripper_open" => Some(AnomalyKind::GripperOpen),
            "gripper_slippage" => Some(AnomalyKind::GripperSlippage),
            "spatial_misalignment" => Some(AnomalyKind::SpatialMisalignment),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Episode {
    pub task_id: String,
    pub frames: Vec<(RobotStateFrame, PointFrame, Label)>,
    pub anomaly_kind: AnomalyKind,
    pub t_anomaly: Option<usize>,
    /// Scripted (pre-render) object centers, kept for test oracles.
    pub object_centers: Vec<[f64; 2]>,
}

#[derive(Clone, Debug)]
pub struct CameraModel {
    pub intrinsics: [[f64; 3]; 3],
    pub extrinsic: [[f64; 4]; 4],
    pub image_size: (usize, usize),
}

impl CameraModel {
    pub fn new(
        intrinsics: [[f64; 3]; 3],
        extrinsic: [[f64; 4]; 4],
        image_size: (usize, usize),
    ) -> Result<Self> {
        let cam = CameraModel {
            intrinsics,
            extrinsic,
            image_size,
        };
        if !(cam.intrinsics[0][0] > 0.0 && cam.intrinsics[1][1] > 0.0) {
            return Err(Error::InvalidDimensions("fx and fy must be positive".into()));
        }
        // Rotation block must be orthonormal.
        let r = &cam.extrinsic;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-6 {
                    return Err(Error::InvalidDimensions(
                        "extrinsic rotation block is not orthonormal".into(),
                    ));
                }
            }
        }
        Ok(cam)
    }

    pub fn identity(image_size: (usize, usize)) -> Self {
        let mut ext = [[0.0; 4]; 4];
        for (i, row) in ext.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        CameraModel {
            intrinsics: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            extrinsic: ext,
            image_size,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GeomBox {
    pub geom_pos: [f64; 3],
    pub rotation: [[f64; 3]; 3],
    /// Width, height, depth (full extents).
    pub geom_size: [f64; 3],
}

impl GeomBox {
    pub fn validate(&self) -> Result<()> {
        for i in 0..3 {
            if !(self.geom_size[i] > 0.0) {
                return Err(Error::InvalidDimensions("geom_size must be positive".into()));
            }
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| self.rotation[k][i] * self.rotation[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-6 {
                    return Err(Error::InvalidDimensions("rotation not orthonormal".into()));
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Geometry utilities
// ---------------------------------------------------------------------------

/// Evenly spaced grid offsets in `[-0.5, 0.5]` per axis, scaled by the box
/// extents and mapped into world coordinates.
pub fn sample_geom_points(geom: &GeomBox, grid: usize) -> Result<Vec<[f64; 3]>> {
    if grid < 1 {
        return Err(Error::InvalidDimensions("grid must be >= 1".into()));
    }
    geom.validate()?;
    let offsets: Vec<f64> = if grid == 1 {
        vec![0.0]
    } else {
        (0..grid)
            .map(|i| -0.5 + i as f64 / (grid - 1) as f64)
            .collect()
    };
    let mut out = Vec::with_capacity(grid * grid * grid);
    for &dx in &offsets {
        for &dy in &offsets {
            for &dz in &offsets {
                let local = [
                    dx * geom.geom_size[0],
                    dy * geom.geom_size[1],
                    dz * geom.geom_size[2],
                ];
                let mut world = geom.geom_pos;
                for i in 0..3 {
                    world[i] += geom.rotation[i][0] * local[0]
                        + geom.rotation[i][1] * local[1]
                        + geom.rotation[i][2] * local[2];
                }
                out.push(world);
            }
        }
    }
    Ok(out)
}

const DEPTH_EPS: f64 = 1e-6;

/// Pinhole projection with behind-camera and image-bounds filtering.
/// Surviving pixels come back in input order.
pub fn project_points(camera: &CameraModel, world_points: &[[f64; 3]]) -> Vec<[f64; 2]> {
    let (w, h) = (camera.image_size.0 as f64, camera.image_size.1 as f64);
    let mut out = Vec::new();
    for p in world_points {
        let mut cam = [0.0f64; 3];
        for (i, c) in cam.iter_mut().enumerate() {
            *c = camera.extrinsic[i][0] * p[0]
                + camera.extrinsic[i][1] * p[1]
                + camera.extrinsic[i][2] * p[2]
                + camera.extrinsic[i][3];
        }
        let depth = cam[2];
        if depth <= DEPTH_EPS {
            continue;
        }
        let xn = cam[0] / depth;
        let yn = cam[1] / depth;
        let k = &camera.intrinsics;
        let px = k[0][0] * xn + k[0][1] * yn + k[0][2];
        let py = k[1][1] * yn + k[1][2];
        if px >= 0.0 && px < w && py >= 0.0 && py < h {
            out.push([px, py]);
        }
    }
    out
}

/// Componentwise min/max of a pixel list.
pub fn bbox_of(pixels: &[[f64; 2]]) -> Result<(f64, f64, f64, f64)> {
    if pixels.is_empty() {
        return Err(Error::EmptyProjection);
    }
    let mut r = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in pixels {
        r.0 = r.0.min(p[0]);
        r.1 = r.1.min(p[1]);
        r.2 = r.2.max(p[0]);
        r.3 = r.3.max(p[1]);
    }
    Ok(r)
}

/// Overlay a `ceil(sqrt(N)) x ceil(sqrt(N))` lattice on the mask's bounding
/// box, keep in-mask lattice points, then deterministically pad (cyclic
/// repetition) or subsample (evenly by index) to exactly `n` points.
/// Output coordinates are pixel centers normalized by the image size.
///
/// `_seed` is reserved for randomized sampling variants; the default path is
/// fully deterministic.
pub fn grid_sample_mask(mask: &Array2<bool>, n: usize, _seed: u64) -> Result<PointFrame> {
    if n < 1 {
        return Err(Error::InvalidDimensions("need n >= 1 points".into()));
    }
    let (rows, cols) = mask.dim();
    let mut x_min = usize::MAX;
    let mut x_max = 0usize;
    let mut y_min = usize::MAX;
    let mut y_max = 0usize;
    for ((y, x), &v) in mask.indexed_iter() {
        if v {
            x_min = x_min.min(x);
            x_max = x_max.max(x);
            y_min = y_min.min(y);
            y_max = y_max.max(y);
        }
    }
    if x_min == usize::MAX {
        return Err(Error::EmptyMask);
    }
    let side = (n as f64).sqrt().ceil() as usize;
    let coords = |lo: usize, hi: usize| -> Vec<i64> {
        if side == 1 {
            vec![((lo + hi) / 2) as i64]
        } else {
            (0..side)
                .map(|i| {
                    let f = lo as f64 + i as f64 * (hi - lo) as f64 / (side - 1) as f64;
                    f.round() as i64
                })
                .collect()
        }
    };
    let xs = coords(x_min, x_max);
    let ys = coords(y_min, y_max);
    let mut kept: Vec<(i64, i64)> = Vec::new();
    for &py in &ys {
        for &px in &xs {
            if px >= 0 && py >= 0 && (px as usize) < cols && (py as usize) < rows
                && mask[[py as usize, px as usize]]
            {
                kept.push((px, py));
            }
        }
    }
    if kept.is_empty() {
        // Lattice may straddle a sparse mask; fall back to the first true pixel.
        kept.push((x_min as i64, y_min as i64));
    }
    // Centered-rounding index selection: subsamples evenly when the lattice
    // kept more than `n`, duplicates evenly when it kept fewer. Keeps the
    // selection balanced across the raster order either way.
    let chosen: Vec<(i64, i64)> = (0..n)
        .map(|i| kept[(2 * i + 1) * kept.len() / (2 * n)])
        .collect();
    let points = chosen
        .into_iter()
        .map(|(px, py)| {
            [
                (px as f64 + 0.5) / cols as f64,
                (py as f64 + 0.5) / rows as f64,
            ]
        })
        .collect();
    Ok(PointFrame { points })
}

// ---------------------------------------------------------------------------
// Task scripts and episode generation
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectShape {
    Disc { radius: f64 },
    Rect { half_w: f64, half_h: f64 },
}

impl ObjectShape {
    fn half_height(self) -> f64 {
        match self {
            ObjectShape::Disc { radius } => radius,
            ObjectShape::Rect { half_h, .. } => half_h,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskScript {
    pub task_id: String,
    pub start_x: f64,
    pub target_x: f64,
    pub shape: ObjectShape,
}

/// The world: a fixed task set plus render configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskWorld {
    pub tasks: Vec<TaskScript>,
    pub image_size: usize,
    pub points_per_frame: usize,
    /// Shelf compartment x positions; spatial misalignment diverts to one of
    /// the compartments that is not the task's own target.
    pub compartments: Vec<f64>,
}

impl TaskWorld {
    /// Ten tasks in five pairs. Tasks within a pair share the start position
    /// and object shape and differ only in the target compartment, so a
    /// misaligned trajectory of one task replays its sibling's nominal path.
    pub fn standard() -> TaskWorld {
        let compartments = vec![0.20, 0.40, 0.60, 0.80];
        let starts = [0.15, 0.325, 0.50, 0.675, 0.85];
        let mut tasks = Vec::new();
        for (p, &sx) in starts.iter().enumerate() {
            let shape = if p % 2 == 0 {
                ObjectShape::Disc {
                    radius: 0.040 + 0.004 * p as f64,
                }
            } else {
                ObjectShape::Rect {
                    half_w: 0.048 + 0.004 * p as f64,
                    half_h: 0.036 + 0.003 * p as f64,
                }
            };
            for (slot, ci) in [(0usize, p % 4), (1usize, (p + 2) % 4)] {
                tasks.push(TaskScript {
                    task_id: format!("task{:02}", 2 * p + slot),
                    start_x: sx,
                    target_x: compartments[ci],
                    shape,
                });
            }
        }
        TaskWorld {
            tasks,
            image_size: DEFAULT_IMAGE_SIZE,
            points_per_frame: DEFAULT_POINTS_PER_FRAME,
            compartments,
        }
    }

    pub fn task(&self, task_id: &str) -> Result<&TaskScript> {
        self.tasks
            .iter()
            .find(|t| t.task_id == task_id)
            .ok_or_else(|| Error::UnknownTask(task_id.to_string()))
    }

    pub fn task_ids(&self) -> Vec<String> {
        self.tasks.iter().map(|t| t.task_id.clone()).collect()
    }
}

fn ease(a: f64, b: f64, frac: f64) -> f64 {
    let s = 0.5 - 0.5 * (std::f64::consts::PI * frac.clamp(0.0, 1.0)).cos();
    a + (b - a) * s
}

fn ease2(a: [f64; 2], b: [f64; 2], frac: f64) -> [f64; 2] {
    [ease(a[0], b[0], frac), ease(a[1], b[1], frac)]
}

/// Piecewise path through waypoints with given per-segment frame budgets.
fn path_through(waypoints: &[[f64; 2]], budgets: &[usize]) -> Vec<[f64; 2]> {
    assert_eq!(waypoints.len(), budgets.len() + 1);
    let mut out = Vec::new();
    for (seg, &frames) in budgets.iter().enumerate() {
        for i in 0..frames {
            let frac = (i + 1) as f64 / frames as f64;
            out.push(ease2(waypoints[seg], waypoints[seg + 1], frac));
        }
    }
    out
}

fn split_carry(frames: usize) -> [usize; 3] {
    let lift = (frames as f64 * 0.25).round().max(1.0) as usize;
    let rise = (frames as f64 * 0.25).round().max(1.0) as usize;
    let traverse = frames.saturating_sub(lift + rise).max(1);
    [lift, traverse, rise]
}

fn render_mask(world: &TaskWorld, shape: ObjectShape, center: [f64; 2]) -> Array2<bool> {
    let s = world.image_size;
    let sf = s as f64;
    Array2::from_shape_fn((s, s), |(i, j)| {
        let x = (j as f64 + 0.5) / sf;
        let y = (i as f64 + 0.5) / sf;
        match shape {
            ObjectShape::Disc { radius } => {
                let dx = x - center[0];
                let dy = y - center[1];
                dx * dx + dy * dy <= radius * radius
            }
            ObjectShape::Rect { half_w, half_h } => {
                (x - center[0]).abs() <= half_w && (y - center[1]).abs() <= half_h
            }
        }
    })
}

fn synth_joints(ex: f64, ey: f64, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<f64> {
    // A fixed smooth map standing in for inverse kinematics.
    const A: [f64; 7] = [0.9, -0.7, 0.5, -1.1, 0.8, -0.4, 0.6];
    const B: [f64; 7] = [-0.5, 0.8, -0.9, 0.4, -0.6, 1.0, -0.3];
    const P: [f64; 7] = [0.0, 0.7, 1.4, 2.1, 2.8, 3.5, 4.2];
    let noise = Normal::new(0.0, JOINT_JITTER).unwrap();
    (0..DEFAULT_JOINTS)
        .map(|k| {
            1.2 * (A[k] * ex + B[k] * ey)
                + 0.25 * (2.1 * (A[k] * ex - B[k] * ey) + P[k]).sin()
                + noise.sample(rng)
        })
        .collect()
}

fn make_state(ex: f64, ey: f64, gripper: f64, rng: &mut rand_chacha::ChaCha8Rng) -> RobotStateFrame {
    let theta = 0.3 * (ex - 0.5);
    let (half_sin, half_cos) = ((theta / 2.0).sin(), (theta / 2.0).cos());
    RobotStateFrame {
        joints: synth_joints(ex, ey, rng),
        gripper,
        pose: [
            ex,
            ey,
            0.12 + 0.3 * (TABLE_Y - ey),
            half_cos,
            0.0,
            0.0,
            half_sin,
        ],
    }
}

/// One scripted episode. Deterministic for fixed inputs.
pub fn generate_episode(
    world: &TaskWorld,
    task_id: &str,
    anomaly_kind: AnomalyKind,
    seed: u64,
    length: usize,
) -> Result<Episode> {
    let script = world.task(task_id)?.clone();
    if length < MIN_EPISODE_LEN {
        return Err(Error::InvalidDimensions(format!(
            "episode length {length} below minimum {MIN_EPISODE_LEN}"
        )));
    }
    let mut rng = rng_from(seed, &format!("episode-{task_id}-{}", anomaly_kind.as_str()));
    let ee_noise = Normal::new(0.0, EE_JITTER).unwrap();

    let rest_y = TABLE_Y - script.shape.half_height();
    let obj_start = [script.start_x + rng.gen_range(-0.008..0.008), rest_y];

    // The grasp sits mid-episode so anomaly onsets (which land at or after
    // it) leave scorable pre-anomaly frames beyond a T-frame warm-up.
    let lf = length as f64;
    let t_grasp = (lf * rng.gen_range(0.45..0.50)).round() as usize;
    let t_place = (lf * rng.gen_range(0.75..0.80)).round() as usize;
    let carry_frames = t_place - (t_grasp + 1);

    // A spatially misaligned episode is a complete, otherwise-nominal
    // trajectory toward one of the wrong compartments; the anomaly begins
    // where that path first observably leaves the intended one.
    let target_x = if anomaly_kind == AnomalyKind::SpatialMisalignment {
        let options: Vec<f64> = world
            .compartments
            .iter()
            .copied()
            .filter(|&c| (c - script.target_x).abs() > 1e-9)
            .collect();
        options[rng.gen_range(0..options.len())]
    } else {
        script.target_x
    };
    let place = [target_x, SHELF_Y];

    // End-effector path toward a given target. The object, while held,
    // hangs ATTACH_DY below the end-effector.
    let grasp_pt = [obj_start[0], obj_start[1] - ATTACH_DY];
    let home = [script.start_x, 0.42];
    let build_path = |place_x: f64| -> Vec<[f64; 2]> {
        let place_ee = [place_x, SHELF_Y - ATTACH_DY];
        let retreat_pt = [place_x, 0.46];
        let mut path: Vec<[f64; 2]> = Vec::with_capacity(length);
        path.extend(path_through(&[home, grasp_pt], &[t_grasp]));
        path.push(grasp_pt); // gripper closing frame
        let carry_wp = [
            grasp_pt,
            [grasp_pt[0], CRUISE_Y],
            [place_x, CRUISE_Y],
            place_ee,
        ];
        path.extend(path_through(&carry_wp, &split_carry(carry_frames)));
        while path.len() < t_place + 1 {
            path.push(place_ee);
        }
        let retreat_frames = length - (t_place + 1);
        if retreat_frames > 0 {
            path.extend(path_through(&[place_ee, retreat_pt], &[retreat_frames]));
        }
        path.truncate(length);
        path
    };
    let ee_path = build_path(target_x);

    // Nominal gripper trace: open until the grasp, closed while carrying,
    // open again from the place frame on.
    let gripper_at = |t: usize| -> f64 {
        if t < t_grasp {
            1.0
        } else if t == t_grasp {
            0.5
        } else if t < t_place {
            0.0
        } else if t == t_place {
            0.5
        } else {
            1.0
        }
    };

    // Nominal object path: resting, then attached to the EE, then placed.
    let nominal_obj = |t: usize, ee: &[[f64; 2]]| -> [f64; 2] {
        if t <= t_grasp {
            obj_start
        } else if t < t_place {
            [ee[t][0], ee[t][1] + ATTACH_DY]
        } else {
            place
        }
    };

    // Anomaly schedule.
    let t_anomaly = match anomaly_kind {
        AnomalyKind::None => None,
        AnomalyKind::GripperOpen => Some(t_grasp),
        AnomalyKind::GripperSlippage => {
            let lo = t_grasp + 3;
            let hi = (t_place - 3).max(lo + 1);
            Some(rng.gen_range(lo..hi))
        }
        AnomalyKind::SpatialMisalignment => {
            // First frame where the executed path observably (more than a
            // pixel) leaves the intended-target path.
            let own_path = build_path(script.target_x);
            let branch = ee_path
                .iter()
                .zip(own_path.iter())
                .position(|(a, b)| {
                    (a[0] - b[0]).abs().max((a[1] - b[1]).abs()) > BRANCH_EPS
                })
                .unwrap_or(t_grasp + 2);
            Some(branch)
        }
    };
    if let Some(ta) = t_anomaly {
        debug_assert!(
            ta >= length / 5 && ta < length * 4 / 5,
            "t_anomaly {ta} outside middle 60% of {length}"
        );
    }

    // Object trajectory with anomaly effects.
    let mut obj_centers = Vec::with_capacity(length);
    let mut slip_state: Option<([f64; 2], f64)> = None; // (pos, vy)
    for t in 0..length {
        let center = match anomaly_kind {
            // A misaligned episode is kinematically a nominal pick-and-place
            // toward its (wrong) target.
            AnomalyKind::None | AnomalyKind::SpatialMisalignment => nominal_obj(t, &ee_path),
            AnomalyKind::GripperOpen => {
                // Gripper never closes; the object never leaves its rest pose.
                obj_start
            }
            AnomalyKind::GripperSlippage => {
                let ta = t_anomaly.unwrap();
                if t < ta {
                    nominal_obj(t, &ee_path)
                } else {
                    // Vertical free fall from the decouple pose down to the
                    // table line; the arm carries on without the object.
                    let (mut pos, mut vy) =
                        slip_state.unwrap_or_else(|| (nominal_obj(ta - 1, &ee_path), 0.0));
                    if pos[1] < rest_y {
                        vy += FALL_ACCEL;
                        pos = [pos[0], (pos[1] + vy).min(rest_y)];
                    }
                    slip_state = Some((pos, vy));
                    pos
                }
            }
        };
        obj_centers.push(center);
    }

    // Assemble frames: jittered EE state, rendered object mask, labels.
    let mut frames = Vec::with_capacity(length);
    let deq = 0.5 / world.image_size as f64;
    for (t, center) in obj_centers.iter().enumerate() {
        let gripper = if anomaly_kind == AnomalyKind::GripperOpen
            && t >= t_anomaly.unwrap()
        {
            1.0
        } else {
            gripper_at(t)
        };
        let ex = ee_path[t][0] + ee_noise.sample(&mut rng);
        let ey = ee_path[t][1] + ee_noise.sample(&mut rng);
        let state = make_state(ex, ey, gripper, &mut rng);

        // Jitter the object only while it is being carried; resting or
        // ballistic objects follow their exact scripted position.
        let carried = matches!(
            (anomaly_kind, t_anomaly),
            (AnomalyKind::None, _) | (AnomalyKind::SpatialMisalignment, _)
        ) && t > t_grasp
            && t < t_place
            || (anomaly_kind == AnomalyKind::GripperSlippage && t > t_grasp && t < t_anomaly.unwrap());
        let rendered_center = if carried {
            [
                center[0] + ee_noise.sample(&mut rng),
                center[1] + ee_noise.sample(&mut rng),
            ]
        } else {
            *center
        };
        let mask = render_mask(world, script.shape, rendered_center);
        let mut pf = grid_sample_mask(&mask, world.points_per_frame, seed)?;
        // Sub-pixel dequantization keeps the point density continuous.
        for p in pf.points.iter_mut() {
            p[0] = (p[0] + rng.gen_range(-deq..deq)).clamp(0.0, 1.0);
            p[1] = (p[1] + rng.gen_range(-deq..deq)).clamp(0.0, 1.0);
        }
        let label = match t_anomaly {
            Some(ta) if t >= ta => Label::Anomalous,
            _ => Label::Normal,
        };
        frames.push((state, pf, label));
    }

    Ok(Episode {
        task_id: script.task_id,
        frames,
        anomaly_kind,
        t_anomaly,
        object_centers: obj_centers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ident_box() -> GeomBox {
        GeomBox {
            geom_pos: [0.0, 0.0, 0.0],
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            geom_size: [1.0, 1.0, 1.0],
        }
    }

    #[test]
    fn grid_one_samples_center() {
        let pts = sample_geom_points(&ident_box(), 1).unwrap();
        assert_eq!(pts, vec![[0.0, 0.0, 0.0]]);
    }

    #[test]
    fn grid_two_samples_corners() {
        let geom = GeomBox {
            geom_pos: [1.0, 2.0, 3.0],
            rotation: ident_box().rotation,
            geom_size: [2.0, 2.0, 2.0],
        };
        let pts = sample_geom_points(&geom, 2).unwrap();
        assert_eq!(pts.len(), 8);
        for p in &pts {
            assert!((p[0] - 1.0).abs() == 1.0 && (p[1] - 2.0).abs() == 1.0 && (p[2] - 3.0).abs() == 1.0);
        }
    }

    #[test]
    fn grid_five_gives_125_points() {
        let pts = sample_geom_points(&ident_box(), 5).unwrap();
        assert_eq!(pts.len(), 125);
    }

    #[test]
    fn projection_pinhole_identity() {
        let cam = CameraModel::identity((2, 2));
        let px = project_points(&cam, &[[0.5, 0.25, 1.0]]);
        assert_eq!(px, vec![[0.5, 0.25]]);
    }

    #[test]
    fn projection_filters_behind_camera() {
        let cam = CameraModel::identity((2, 2));
        assert!(project_points(&cam, &[[0.0, 0.0, -1.0]]).is_empty());
    }

    #[test]
    fn projection_bound_is_half_open() {
        let mut cam = CameraModel::identity((2, 2));
        cam.intrinsics = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        // x/z = 2 == width -> rejected; just inside -> kept.
        assert!(project_points(&cam, &[[2.0, 0.0, 1.0]]).is_empty());
        assert_eq!(project_points(&cam, &[[1.999, 0.0, 1.0]]).len(), 1);
    }

    #[test]
    fn projection_roundtrip_with_known_depth() {
        let cam = CameraModel::identity((100, 100));
        let pts = [[3.0, 7.0, 2.0], [10.0, 20.0, 4.0]];
        let px = project_points(&cam, &pts);
        for (p, q) in pts.iter().zip(px.iter()) {
            let rx = q[0] * p[2];
            let ry = q[1] * p[2];
            assert!((rx - p[0]).abs() < 1e-9 && (ry - p[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn bbox_examples() {
        assert_eq!(bbox_of(&[[1.0, 2.0]]).unwrap(), (1.0, 2.0, 1.0, 2.0));
        assert_eq!(
            bbox_of(&[[0.0, 0.0], [3.0, 1.0], [2.0, 4.0]]).unwrap(),
            (0.0, 0.0, 3.0, 4.0)
        );
        assert!(matches!(bbox_of(&[]), Err(Error::EmptyProjection)));
    }

    #[test]
    fn bbox_is_permutation_invariant() {
        let mut pts = vec![[0.5, 2.0], [3.0, -1.0], [2.0, 4.0], [-1.0, 0.0]];
        let a = bbox_of(&pts).unwrap();
        pts.reverse();
        pts.swap(0, 2);
        assert_eq!(a, bbox_of(&pts).unwrap());
    }

    #[test]
    fn bbox_of_projected_unit_cube_corners() {
        // The grid=2 unit-cube corners pushed to depth 2..3, principal point
        // at the image center so all eight corners land in frame.
        let geom = GeomBox {
            geom_pos: [0.0, 0.0, 2.5],
            rotation: ident_box().rotation,
            geom_size: [1.0, 1.0, 1.0],
        };
        let world = sample_geom_points(&geom, 2).unwrap();
        let mut cam = CameraModel::identity((4, 4));
        cam.intrinsics[0][2] = 2.0;
        cam.intrinsics[1][2] = 2.0;
        let px = project_points(&cam, &world);
        assert_eq!(px.len(), 8);
        let bb = bbox_of(&px).unwrap();
        // Frozen from the direct min/max over the eight projected pixels:
        // x,y in {-0.5,0.5}/z with z in {2,3}, shifted by cx=cy=2.
        assert!((bb.0 - 1.75).abs() < 1e-12);
        assert!((bb.1 - 1.75).abs() < 1e-12);
        assert!((bb.2 - 2.25).abs() < 1e-12);
        assert!((bb.3 - 2.25).abs() < 1e-12);
    }

    #[test]
    fn full_mask_n4_hits_bbox_corners() {
        let mask = Array2::from_elem((10, 10), true);
        let pf = grid_sample_mask(&mask, 4, 0).unwrap();
        let want = [
            [0.05, 0.05],
            [0.95, 0.05],
            [0.05, 0.95],
            [0.95, 0.95],
        ];
        assert_eq!(pf.points.len(), 4);
        for w in &want {
            assert!(
                pf.points.iter().any(|p| (p[0] - w[0]).abs() < 1e-12 && (p[1] - w[1]).abs() < 1e-12),
                "missing corner {w:?} in {:?}",
                pf.points
            );
        }
    }

    #[test]
    fn single_pixel_mask_pads_center() {
        let mut mask = Array2::from_elem((8, 8), false);
        mask[[3, 5]] = true;
        let pf = grid_sample_mask(&mask, 3, 0).unwrap();
        assert_eq!(pf.points.len(), 3);
        for p in &pf.points {
            assert!((p[0] - 5.5 / 8.0).abs() < 1e-12);
            assert!((p[1] - 3.5 / 8.0).abs() < 1e-12);
        }
    }

    #[test]
    fn circle_mask_sampling_stays_inside_with_centered_mean() {
        let (w, h, r, cx, cy) = (100usize, 100usize, 20.0f64, 50.0f64, 50.0f64);
        let mask = Array2::from_shape_fn((h, w), |(i, j)| {
            let dx = j as f64 + 0.5 - cx;
            let dy = i as f64 + 0.5 - cy;
            dx * dx + dy * dy <= r * r
        });
        let pf = grid_sample_mask(&mask, 32, 0).unwrap();
        assert_eq!(pf.points.len(), 32);
        let mut mean = [0.0f64; 2];
        for p in &pf.points {
            let px = p[0] * w as f64;
            let py = p[1] * h as f64;
            let dx = px - cx;
            let dy = py - cy;
            assert!(dx * dx + dy * dy <= (r + 0.71) * (r + 0.71), "outside circle");
            mean[0] += px;
            mean[1] += py;
        }
        mean[0] /= 32.0;
        mean[1] /= 32.0;
        assert!((mean[0] - cx).abs() < 1.0 && (mean[1] - cy).abs() < 1.0);
    }

    #[test]
    fn mask_sampling_is_translation_equivariant() {
        let mut mask = Array2::from_elem((40, 40), false);
        for i in 8..16 {
            for j in 5..17 {
                mask[[i, j]] = true;
            }
        }
        let (dx, dy) = (7i64, 11i64);
        let mut shifted = Array2::from_elem((40, 40), false);
        for ((i, j), &v) in mask.indexed_iter() {
            if v {
                shifted[[(i as i64 + dy) as usize, (j as i64 + dx) as usize]] = true;
            }
        }
        let a = grid_sample_mask(&mask, 16, 0).unwrap();
        let b = grid_sample_mask(&shifted, 16, 0).unwrap();
        for (p, q) in a.points.iter().zip(b.points.iter()) {
            // Exact in pixel space; 1e-12 after normalization.
            assert!((q[0] - (p[0] + dx as f64 / 40.0)).abs() < 1e-12);
            assert!((q[1] - (p[1] + dy as f64 / 40.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_mask_is_rejected() {
        let mask = Array2::from_elem((4, 4), false);
        assert!(matches!(grid_sample_mask(&mask, 4, 0), Err(Error::EmptyMask)));
    }

    // ------------------------------------------------------------------
    // Episode generation
    // ------------------------------------------------------------------

    #[test]
    fn nominal_episode_reaches_target() {
        let world = TaskWorld::standard();
        let ep = generate_episode(&world, "task03", AnomalyKind::None, 5, 24).unwrap();
        assert_eq!(ep.frames.len(), 24);
        assert!(ep.t_anomaly.is_none());
        assert!(ep.frames.iter().all(|(_, _, l)| *l == Label::Normal));
        let target = world.task("task03").unwrap().target_x;
        let last = ep.object_centers.last().unwrap();
        assert!((last[0] - target).abs() < 0.02 && (last[1] - SHELF_Y).abs() < 0.02);
        for (state, pf, _) in &ep.frames {
            state.validate().unwrap();
            assert_eq!(pf.points.len(), world.points_per_frame);
            assert!(pf.points.iter().all(|p| p.iter().all(|v| v.is_finite())));
        }
    }

    #[test]
    fn gripper_open_object_never_moves() {
        let world = TaskWorld::standard();
        let ep = generate_episode(&world, "task00", AnomalyKind::GripperOpen, 7, 24).unwrap();
        let ta = ep.t_anomaly.unwrap();
        let first = ep.object_centers[0];
        for c in &ep.object_centers {
            assert_eq!(*c, first);
        }
        // Rendered centroid stays within render tolerance of the rest pose.
        let eps_render = 1.5 / world.image_size as f64;
        for (_, pf, _) in &ep.frames {
            let mx = pf.points.iter().map(|p| p[0]).sum::<f64>() / pf.points.len() as f64;
            let my = pf.points.iter().map(|p| p[1]).sum::<f64>() / pf.points.len() as f64;
            assert!((mx - first[0]).abs() < eps_render * 2.0);
            assert!((my - first[1]).abs() < eps_render * 2.0);
        }
        // Gripper stays open from the anomaly on.
        for (t, (state, _, label)) in ep.frames.iter().enumerate() {
            if t >= ta {
                assert_eq!(state.gripper, 1.0);
                assert_eq!(*label, Label::Anomalous);
            } else {
                assert_eq!(*label, Label::Normal);
            }
        }
    }

    #[test]
    fn slippage_falls_monotonically_to_table() {
        let world = TaskWorld::standard();
        let ep = generate_episode(&world, "task04", AnomalyKind::GripperSlippage, 11, 24).unwrap();
        let ta = ep.t_anomaly.unwrap();
        let rest_y = TABLE_Y - world.task("task04").unwrap().shape.half_height();
        let mut reached = false;
        for t in ta..ep.object_centers.len() - 1 {
            let y0 = ep.object_centers[t][1];
            let y1 = ep.object_centers[t + 1][1];
            assert!(y1 >= y0 - 1e-12, "fall not monotone at {t}: {y0} -> {y1}");
            if (y1 - rest_y).abs() < 1e-9 {
                reached = true;
            }
        }
        assert!(reached, "object never reached the table line");
    }

    #[test]
    fn misalignment_diverts_to_wrong_compartment() {
        let world = TaskWorld::standard();
        let ep =
            generate_episode(&world, "task02", AnomalyKind::SpatialMisalignment, 13, 24).unwrap();
        let own = world.task("task02").unwrap().target_x;
        let last = ep.object_centers.last().unwrap();
        assert!((last[0] - own).abs() > 0.05, "should not end at own target");
        assert!(
            world.compartments.iter().any(|&c| (last[0] - c).abs() < 0.02),
            "should end at some compartment"
        );
        assert!((last[1] - SHELF_Y).abs() < 0.02);
    }

    #[test]
    fn labels_flip_exactly_at_t_anomaly() {
        let world = TaskWorld::standard();
        for kind in [
            AnomalyKind::GripperOpen,
            AnomalyKind::GripperSlippage,
            AnomalyKind::SpatialMisalignment,
        ] {
            let ep = generate_episode(&world, "task05", kind, 3, 26).unwrap();
            let ta = ep.t_anomaly.unwrap();
            assert!(ta >= 26 / 5 && ta < 26 * 4 / 5, "t_anomaly in middle 60%");
            for (t, (_, _, label)) in ep.frames.iter().enumerate() {
                let want = if t >= ta { Label::Anomalous } else { Label::Normal };
                assert_eq!(*label, want, "frame {t}");
            }
        }
    }

    #[test]
    fn episodes_are_deterministic() {
        let world = TaskWorld::standard();
        let a = generate_episode(&world, "task07", AnomalyKind::GripperSlippage, 99, 24).unwrap();
        let b = generate_episode(&world, "task07", AnomalyKind::GripperSlippage, 99, 24).unwrap();
        assert_eq!(a.t_anomaly, b.t_anomaly);
        for ((sa, pa, la), (sb, pb, lb)) in a.frames.iter().zip(b.frames.iter()) {
            assert_eq!(sa.joints, sb.joints);
            assert_eq!(sa.pose, sb.pose);
            assert_eq!(sa.gripper, sb.gripper);
            assert_eq!(pa.points, pb.points);
            assert_eq!(la, lb);
        }
    }

    #[test]
    fn unknown_task_is_rejected() {
        let world = TaskWorld::standard();
        assert!(matches!(
            generate_episode(&world, "task99", AnomalyKind::None, 0, 24),
            Err(Error::UnknownTask(_))
        ));
    }

    #[test]
    fn sibling_tasks_share_geometry_but_not_target() {
        let world = TaskWorld::standard();
        for p in 0..5 {
            let a = world.task(&format!("task{:02}", 2 * p)).unwrap();
            let b = world.task(&format!("task{:02}", 2 * p + 1)).unwrap();
            assert_eq!(a.start_x, b.start_x);
            assert_eq!(a.shape, b.shape);
            assert_ne!(a.target_x, b.target_x);
        }
    }
}
