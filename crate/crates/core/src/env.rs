//! Deterministic synthetic data source: a 3-link arm (yaw at the base,
//! pitch at the two upper joints) over a table with one movable object box.
//! Episodes are scripted pick-and-place runs with minimum-jerk joint
//! trajectories; depth maps come from analytic ray casting against boxes
//! and arm-link capsules. Everything is f64 and fully determined by a seed.

use std::fmt::Write as _;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::WorkspaceSpec;
use crate::render::{CameraModel, DepthMap};
use crate::tensor::serial;

pub const STATE_DIM: usize = 4; // three joint angles + gripper

#[derive(Clone, Debug)]
pub struct ArmSpec {
    pub base: [f64; 3],
    pub link_lengths: [f64; 3],
    /// (min, max) per joint: yaw, pitch2, pitch3.
    pub joint_limits: [(f64, f64); 3],
    pub capsule_radius: f64,
}

impl ArmSpec {
    pub fn validate(&self) -> Result<()> {
        if self.link_lengths.iter().any(|&l| l <= 0.0) {
            return Err(Error::InvalidArgument {
                op: "arm_spec",
                msg: format!("non-positive link length in {:?}", self.link_lengths),
            });
        }
        if self.joint_limits.iter().any(|&(lo, hi)| lo >= hi) {
            return Err(Error::InvalidArgument {
                op: "arm_spec",
                msg: "degenerate joint limits".into(),
            });
        }
        Ok(())
    }

    pub fn keypoint_count(&self) -> usize {
        4
    }

    fn check_limits(&self, angles: [f64; 3]) -> Result<()> {
        for (j, (&a, &(lo, hi))) in angles.iter().zip(&self.joint_limits).enumerate() {
            if a < lo || a > hi {
                return Err(Error::InvalidArgument {
                    op: "forward_kinematics",
                    msg: format!("joint {} angle {} outside [{}, {}]", j, a, lo, hi),
                });
            }
        }
        Ok(())
    }
}

/// Keypoints: base, the two intermediate joints, and the end effector.
/// Link 1 stays horizontal (set by the base yaw); positive pitch raises a
/// link within the vertical plane the yaw selects.
pub fn forward_kinematics(arm: &ArmSpec, angles: [f64; 3]) -> Result<Vec<[f64; 3]>> {
    arm.check_limits(angles)?;
    let [yaw, p2, p3] = angles;
    let u = [yaw.cos(), yaw.sin(), 0.0];
    let dir = |phi: f64| -> [f64; 3] { [phi.cos() * u[0], phi.cos() * u[1], phi.sin()] };
    let l = arm.link_lengths;
    let p0 = arm.base;
    let p1 = [p0[0] + l[0] * u[0], p0[1] + l[0] * u[1], p0[2]];
    let d2 = dir(p2);
    let pt2 = [p1[0] + l[1] * d2[0], p1[1] + l[1] * d2[1], p1[2] + l[1] * d2[2]];
    let d3 = dir(p2 + p3);
    let pt3 = [
        pt2[0] + l[2] * d3[0],
        pt2[1] + l[2] * d3[1],
        pt2[2] + l[2] * d3[2],
    ];
    Ok(vec![p0, p1, pt2, pt3])
}

/// End-effector orientation: yaw about z composed with the cumulative pitch
/// about the (rotated) -y axis.
pub fn ee_orientation(angles: [f64; 3]) -> [[f64; 3]; 3] {
    let [yaw, p2, p3] = angles;
    let phi = p2 + p3;
    let (cy, sy) = (yaw.cos(), yaw.sin());
    let (cp, sp) = (phi.cos(), phi.sin());
    // Rz(yaw) * Ry(-phi)
    [
        [cy * cp, -sy, cy * sp],
        [sy * cp, cy, sy * sp],
        [-sp, 0.0, cp],
    ]
}

/// Closed-form position IK; returns joint angles within limits or `None`.
pub fn inverse_kinematics(arm: &ArmSpec, target: [f64; 3]) -> Option<[f64; 3]> {
    let rel = [
        target[0] - arm.base[0],
        target[1] - arm.base[1],
        target[2] - arm.base[2],
    ];
    let yaw = rel[1].atan2(rel[0]);
    let r = (rel[0] * rel[0] + rel[1] * rel[1]).sqrt() - arm.link_lengths[0];
    let z = rel[2];
    let (l2, l3) = (arm.link_lengths[1], arm.link_lengths[2]);
    let d = (r * r + z * z - l2 * l2 - l3 * l3) / (2.0 * l2 * l3);
    if !(-1.0..=1.0).contains(&d) {
        return None;
    }
    for elbow in [-1.0, 1.0] {
        let q3 = elbow * d.acos();
        let q2 = z.atan2(r) - (l3 * q3.sin()).atan2(l2 + l3 * q3.cos());
        let angles = [yaw, q2, q3];
        if arm.check_limits(angles).is_ok() {
            return Some(angles);
        }
    }
    None
}

// ── Ray casting ──────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct Box3 {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Box3 {
    /// Slab test; `t` is in units of the (unnormalized) ray direction.
    fn ray_enter(&self, origin: [f64; 3], dir: [f64; 3], t_min: f64) -> Option<f64> {
        let mut lo = t_min;
        let mut hi = f64::INFINITY;
        for a in 0..3 {
            if dir[a].abs() < 1e-15 {
                if origin[a] < self.min[a] || origin[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[a];
            let mut t0 = (self.min[a] - origin[a]) * inv;
            let mut t1 = (self.max[a] - origin[a]) * inv;
            if t0 > t1 {
                std::mem::swap(&mut t0, &mut t1);
            }
            lo = lo.max(t0);
            hi = hi.min(t1);
            if lo > hi {
                return None;
            }
        }
        Some(lo)
    }
}

fn ray_sphere(origin: [f64; 3], dir: [f64; 3], center: [f64; 3], r: f64, t_min: f64) -> Option<f64> {
    let oc = [
        origin[0] - center[0],
        origin[1] - center[1],
        origin[2] - center[2],
    ];
    let a = dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2];
    let b = 2.0 * (dir[0] * oc[0] + dir[1] * oc[1] + dir[2] * oc[2]);
    let c = oc[0] * oc[0] + oc[1] * oc[1] + oc[2] * oc[2] - r * r;
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    for t in [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)] {
        if t >= t_min {
            return Some(t);
        }
    }
    None
}

fn ray_capsule(
    origin: [f64; 3],
    dir: [f64; 3],
    pa: [f64; 3],
    pb: [f64; 3],
    r: f64,
    t_min: f64,
) -> Option<f64> {
    let axis = [pb[0] - pa[0], pb[1] - pa[1], pb[2] - pa[2]];
    let axis_len2 = axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2];
    let mut best: Option<f64> = None;
    let mut keep = |t: Option<f64>| {
        if let Some(t) = t {
            if best.map_or(true, |b| t < b) {
                best = Some(t);
            }
        }
    };
    if axis_len2 < 1e-18 {
        return ray_sphere(origin, dir, pa, r, t_min);
    }
    // Infinite cylinder: components orthogonal to the axis.
    let oa = [origin[0] - pa[0], origin[1] - pa[1], origin[2] - pa[2]];
    let da = dir[0] * axis[0] + dir[1] * axis[1] + dir[2] * axis[2];
    let oaa = oa[0] * axis[0] + oa[1] * axis[1] + oa[2] * axis[2];
    let mut a = 0.0;
    let mut b = 0.0;
    let mut c = 0.0;
    for i in 0..3 {
        let dp = dir[i] - da * axis[i] / axis_len2;
        let op = oa[i] - oaa * axis[i] / axis_len2;
        a += dp * dp;
        b += 2.0 * dp * op;
        c += op * op;
    }
    c -= r * r;
    if a > 1e-15 {
        let disc = b * b - 4.0 * a * c;
        if disc >= 0.0 {
            let sq = disc.sqrt();
            for t in [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)] {
                if t >= t_min {
                    // axial extent check
                    let s = (oaa + t * da) / axis_len2;
                    if (0.0..=1.0).contains(&s) {
                        keep(Some(t));
                        break;
                    }
                }
            }
        }
    }
    keep(ray_sphere(origin, dir, pa, r, t_min));
    keep(ray_sphere(origin, dir, pb, r, t_min));
    best
}

/// The static and per-step dynamic geometry of a scene snapshot.
pub struct ScenePose {
    pub boxes: Vec<Box3>,
    /// (endpoint a, endpoint b, radius) per arm link.
    pub capsules: Vec<([f64; 3], [f64; 3], f64)>,
}

/// Analytic depth render: per pixel, nearest intersection's camera-frame z;
/// no hit leaves the 0 sentinel.
pub fn raycast_depth(pose: &ScenePose, cam: &CameraModel) -> DepthMap<f64> {
    let mut depth = DepthMap::zeros(cam.width, cam.height);
    // Camera origin and world-frame ray directions with unit camera z, so
    // the ray parameter is camera-frame depth.
    let origin = {
        let t = cam.trans;
        [
            -(cam.rot[0][0] * t[0] + cam.rot[1][0] * t[1] + cam.rot[2][0] * t[2]),
            -(cam.rot[0][1] * t[0] + cam.rot[1][1] * t[1] + cam.rot[2][1] * t[2]),
            -(cam.rot[0][2] * t[0] + cam.rot[1][2] * t[1] + cam.rot[2][2] * t[2]),
        ]
    };
    let near = 1e-6;
    for iy in 0..cam.height {
        for ix in 0..cam.width {
            let dc = [
                (ix as f64 + 0.5 - cam.cx) / cam.fx,
                (iy as f64 + 0.5 - cam.cy) / cam.fy,
                1.0,
            ];
            let dw = [
                cam.rot[0][0] * dc[0] + cam.rot[1][0] * dc[1] + cam.rot[2][0] * dc[2],
                cam.rot[0][1] * dc[0] + cam.rot[1][1] * dc[1] + cam.rot[2][1] * dc[2],
                cam.rot[0][2] * dc[0] + cam.rot[1][2] * dc[1] + cam.rot[2][2] * dc[2],
            ];
            let mut best = f64::INFINITY;
            for b in &pose.boxes {
                if let Some(t) = b.ray_enter(origin, dw, near) {
                    best = best.min(t);
                }
            }
            for &(pa, pb, r) in &pose.capsules {
                if let Some(t) = ray_capsule(origin, dw, pa, pb, r, near) {
                    best = best.min(t);
                }
            }
            if best.is_finite() {
                depth.data[iy * cam.width + ix] = best;
            }
        }
    }
    depth
}

// ── Episodes ─────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct EnvSpec {
    pub arm: ArmSpec,
    pub workspace: WorkspaceSpec,
    pub cameras: Vec<CameraModel>,
    pub image_size: usize,
    /// Steps per episode.
    pub steps: usize,
    /// Horizon the dataset is generated to support (recorded in manifests).
    pub horizon: usize,
    pub table: Box3,
    pub object_half: f64,
    pub n_tasks: usize,
}

impl EnvSpec {
    /// Desk-scale default: elevated cameras on a circle around the
    /// workspace and a table slab whose top sits just inside it.
    pub fn toy(
        workspace: WorkspaceSpec,
        image_size: usize,
        steps: usize,
        horizon: usize,
        n_cameras: usize,
    ) -> Result<Self> {
        let wmin = workspace.min();
        let wmax = workspace.max();
        let center = [
            0.5 * (wmin[0] + wmax[0]),
            0.5 * (wmin[1] + wmax[1]),
            0.5 * (wmin[2] + wmax[2]),
        ];
        let span = wmax[0] - wmin[0];
        let f = image_size as f64;
        let mut cameras = Vec::with_capacity(n_cameras);
        for i in 0..n_cameras {
            let angle = -std::f64::consts::FRAC_PI_2
                + i as f64 * std::f64::consts::TAU / n_cameras as f64;
            let eye = [
                center[0] + 1.2 * span * angle.cos(),
                center[1] + 1.2 * span * angle.sin(),
                wmax[2] + 0.6 * span,
            ];
            cameras.push(CameraModel::look_at(
                eye,
                center,
                [0.0, 0.0, 1.0],
                f,
                f,
                image_size,
                image_size,
            )?);
        }
        let table_top = wmin[2] + 0.02;
        let spec = EnvSpec {
            arm: ArmSpec {
                base: [center[0], center[1], table_top + 0.04],
                link_lengths: [0.16, 0.14, 0.12],
                joint_limits: [
                    (-std::f64::consts::PI, std::f64::consts::PI),
                    (-0.9, 1.5),
                    (-2.4, 2.4),
                ],
                capsule_radius: 0.025,
            },
            table: Box3 {
                min: [wmin[0] - 0.1, wmin[1] - 0.1, wmin[2] - 0.1],
                max: [wmax[0] + 0.1, wmax[1] + 0.1, table_top],
            },
            object_half: 0.03,
            cameras,
            image_size,
            steps,
            horizon,
            workspace,
            n_tasks: 4,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.arm.validate()?;
        if self.steps < self.horizon + 2 {
            return Err(Error::InvalidArgument {
                op: "env_spec",
                msg: format!(
                    "episode length {} cannot cover horizon {}",
                    self.steps, self.horizon
                ),
            });
        }
        // Cameras must view the workspace: its center projects inside.
        let wmin = self.workspace.min();
        let wmax = self.workspace.max();
        let center = [
            0.5 * (wmin[0] + wmax[0]),
            0.5 * (wmin[1] + wmax[1]),
            0.5 * (wmin[2] + wmax[2]),
        ];
        for (i, cam) in self.cameras.iter().enumerate() {
            let c = cam.world_to_camera(center);
            if c[2] <= 0.0 {
                return Err(Error::InvalidArgument {
                    op: "env_spec",
                    msg: format!("camera {} looks away from the workspace", i),
                });
            }
            let u = cam.fx * c[0] / c[2] + cam.cx;
            let v = cam.fy * c[1] / c[2] + cam.cy;
            if u < 0.0 || u >= cam.width as f64 || v < 0.0 || v >= cam.height as f64 {
                return Err(Error::InvalidArgument {
                    op: "env_spec",
                    msg: format!("workspace center projects outside camera {}", i),
                });
            }
        }
        Ok(())
    }

    fn table_top(&self) -> f64 {
        self.table.max[2]
    }

    fn scene_pose(&self, angles: [f64; 3], object_center: [f64; 3]) -> ScenePose {
        let kp = forward_kinematics(&self.arm, angles).expect("pose within limits");
        let h = self.object_half;
        ScenePose {
            boxes: vec![
                self.table,
                Box3 {
                    min: [
                        object_center[0] - h,
                        object_center[1] - h,
                        object_center[2] - h,
                    ],
                    max: [
                        object_center[0] + h,
                        object_center[1] + h,
                        object_center[2] + h,
                    ],
                },
            ],
            capsules: (0..3)
                .map(|i| (kp[i], kp[i + 1], self.arm.capsule_radius))
                .collect(),
        }
    }
}

/// One demonstration. All per-step arrays are row-major over steps.
#[derive(Clone, Debug)]
pub struct EpisodeRecord {
    pub task_id: usize,
    pub k: usize,
    pub steps: usize,
    pub image_size: usize,
    pub horizon: usize,
    pub cameras: Vec<CameraModel>,
    /// `[steps, 3]`
    pub angles: Vec<f64>,
    /// `[steps, k, 3]`
    pub keypoints: Vec<f64>,
    /// `[steps, STATE_DIM]`
    pub proprio: Vec<f64>,
    /// `[steps - 1, 7]`: executed end-effector deltas + gripper command.
    pub actions: Vec<f64>,
    /// `[steps, cameras, image_size^2]`
    pub depths: Vec<f64>,
}

impl EpisodeRecord {
    pub fn keypoint(&self, t: usize, k: usize) -> [f64; 3] {
        let base = (t * self.k + k) * 3;
        [
            self.keypoints[base],
            self.keypoints[base + 1],
            self.keypoints[base + 2],
        ]
    }

    pub fn depth_image(&self, t: usize, cam: usize) -> &[f64] {
        let pix = self.image_size * self.image_size;
        let base = (t * self.cameras.len() + cam) * pix;
        &self.depths[base..base + pix]
    }

    pub fn state(&self, t: usize) -> &[f64] {
        &self.proprio[t * STATE_DIM..(t + 1) * STATE_DIM]
    }

    pub fn action_chunk(&self, t: usize, horizon: usize) -> &[f64] {
        &self.actions[t * 7..(t + horizon) * 7]
    }
}

fn min_jerk(u: f64) -> f64 {
    u * u * u * (10.0 - 15.0 * u + 6.0 * u * u)
}

fn axis_angle_delta(r_prev: [[f64; 3]; 3], r_next: [[f64; 3]; 3]) -> [f64; 3] {
    // dR = r_next * r_prev^T
    let mut dr = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            dr[i][j] = (0..3).map(|k| r_next[i][k] * r_prev[j][k]).sum();
        }
    }
    let w = [
        dr[2][1] - dr[1][2],
        dr[0][2] - dr[2][0],
        dr[1][0] - dr[0][1],
    ];
    let sin2 = 0.5 * (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
    let cos = 0.5 * (dr[0][0] + dr[1][1] + dr[2][2] - 1.0);
    let angle = sin2.atan2(cos.clamp(-1.0, 1.0));
    let norm = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
    if norm < 1e-12 {
        return [0.0; 3];
    }
    [
        angle * w[0] / norm,
        angle * w[1] / norm,
        angle * w[2] / norm,
    ]
}

struct PhasePlan {
    /// (target joints, steps, gripper command at target).
    segments: Vec<([f64; 3], usize, f64)>,
}

/// Scripted pick-and-place fully determined by the seed. Sampled object and
/// goal positions must be reachable and the whole trajectory must keep all
/// keypoints inside the workspace; otherwise the episode is resampled
/// (bounded retries).
pub fn generate_episode(env: &EnvSpec, task_id: usize, seed: u64) -> Result<EpisodeRecord> {
    if task_id >= env.n_tasks {
        return Err(Error::InvalidArgument {
            op: "generate_episode",
            msg: format!("task id {} out of {}", task_id, env.n_tasks),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (task_id as u64).wrapping_mul(0x9e3779b97f4a7c15));
    for _attempt in 0..64 {
        if let Some(ep) = try_generate(env, task_id, &mut rng)? {
            return Ok(ep);
        }
    }
    Err(Error::InvalidArgument {
        op: "generate_episode",
        msg: "no reachable pick-and-place scenario after bounded retries".into(),
    })
}

fn sample_table_point(env: &EnvSpec, rng: &mut ChaCha8Rng) -> [f64; 3] {
    // An annulus around the base, inside the workspace with margin.
    let reach_lo = env.arm.link_lengths[0] + 0.06;
    let reach_hi = env.arm.link_lengths[0] + env.arm.link_lengths[1] + env.arm.link_lengths[2] - 0.05;
    let radius = rng.gen_range(reach_lo..reach_hi);
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    [
        env.arm.base[0] + radius * angle.cos(),
        env.arm.base[1] + radius * angle.sin(),
        env.table_top() + env.object_half,
    ]
}

fn inside_with_margin(ws: &WorkspaceSpec, p: [f64; 3], margin: f64) -> bool {
    let (mn, mx) = (ws.min(), ws.max());
    (0..3).all(|a| p[a] >= mn[a] + margin && p[a] < mx[a] - margin)
}

fn try_generate(
    env: &EnvSpec,
    task_id: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Option<EpisodeRecord>> {
    let hover = 0.08;
    let object_start = sample_table_point(env, rng);
    let goal = sample_table_point(env, rng);
    if !inside_with_margin(&env.workspace, object_start, 0.05)
        || !inside_with_margin(&env.workspace, goal, 0.05)
    {
        return Ok(None);
    }
    let dist2: f64 = (0..2).map(|a| (goal[a] - object_start[a]).powi(2)).sum();
    if dist2.sqrt() < 0.08 {
        return Ok(None);
    }

    let above = |p: [f64; 3], dz: f64| [p[0], p[1], p[2] + dz];
    let ik = |p: [f64; 3]| inverse_kinematics(&env.arm, p);
    let (q_hover_obj, q_grasp, q_hover_goal, q_place) = match (
        ik(above(object_start, hover)),
        ik(object_start),
        ik(above(goal, hover)),
        ik(goal),
    ) {
        (Some(a), Some(b), Some(c), Some(d)) => (a, b, c, d),
        _ => return Ok(None),
    };

    // Random start pose near hover height.
    let start_target = sample_table_point(env, rng);
    let q_start = match ik(above(start_target, hover)) {
        Some(q) => q,
        None => return Ok(None),
    };

    // Distribute steps across motion segments; grips hold position.
    let t_total = env.steps;
    let move_steps = t_total - 1;
    let weights = [18usize, 8, 6, 10, 18, 8, 6, 4];
    let wsum: usize = weights.iter().sum();
    let mut seg_steps: Vec<usize> = weights
        .iter()
        .map(|&w| (w * move_steps / wsum).max(1))
        .collect();
    let assigned: usize = seg_steps.iter().sum();
    seg_steps[4] += move_steps - assigned.min(move_steps);
    if assigned > move_steps {
        return Ok(None);
    }
    let plan = PhasePlan {
        segments: vec![
            (q_hover_obj, seg_steps[0], 0.0),
            (q_grasp, seg_steps[1], 0.0),
            (q_grasp, seg_steps[2], 1.0), // close
            (q_hover_obj, seg_steps[3], 1.0),
            (q_hover_goal, seg_steps[4], 1.0),
            (q_place, seg_steps[5], 1.0),
            (q_place, seg_steps[6], 0.0), // open
            (q_place, seg_steps[7], 0.0),
        ],
    };

    // Roll the trajectory out step by step.
    let mut angles_seq = vec![q_start];
    let mut grip_seq = vec![0.0f64];
    let mut q_prev = q_start;
    let mut g_prev = 0.0;
    for &(q_target, n, g_target) in &plan.segments {
        for i in 1..=n {
            let s = min_jerk(i as f64 / n as f64);
            let q = [
                q_prev[0] + s * (q_target[0] - q_prev[0]),
                q_prev[1] + s * (q_target[1] - q_prev[1]),
                q_prev[2] + s * (q_target[2] - q_prev[2]),
            ];
            // The gripper ramps linearly within its segment.
            let g = g_prev + (i as f64 / n as f64) * (g_target - g_prev);
            angles_seq.push(q);
            grip_seq.push(g);
        }
        q_prev = q_target;
        g_prev = g_target;
    }
    debug_assert_eq!(angles_seq.len(), t_total);

    // Keypoints, limits, and workspace containment.
    let mut keypoints = Vec::with_capacity(t_total * 4 * 3);
    let mut all_kp: Vec<Vec<[f64; 3]>> = Vec::with_capacity(t_total);
    for &q in &angles_seq {
        let kp = match forward_kinematics(&env.arm, q) {
            Ok(kp) => kp,
            Err(_) => return Ok(None),
        };
        for p in &kp {
            if !env.workspace.contains(*p) {
                return Ok(None);
            }
            keypoints.extend_from_slice(p);
        }
        all_kp.push(kp);
    }

    // Object attachment: follows the end effector while the gripper is
    // closed and the arm started at the object.
    let grasp_done = seg_steps[..3].iter().sum::<usize>();
    let place_done = seg_steps[..6].iter().sum::<usize>();
    let mut object_centers = Vec::with_capacity(t_total);
    for (t, kp) in all_kp.iter().enumerate() {
        let c = if t <= grasp_done {
            object_start
        } else if t <= place_done {
            kp[3]
        } else {
            goal
        };
        object_centers.push(c);
    }

    // Depth maps.
    let pix = env.image_size * env.image_size;
    let mut depths = vec![0.0f64; t_total * env.cameras.len() * pix];
    for t in 0..t_total {
        let pose = env.scene_pose(angles_seq[t], object_centers[t]);
        for (ci, cam) in env.cameras.iter().enumerate() {
            let d = raycast_depth(&pose, cam);
            let base = (t * env.cameras.len() + ci) * pix;
            depths[base..base + pix].copy_from_slice(&d.data);
        }
    }

    // Proprioception and 7-DoF actions.
    let mut proprio = Vec::with_capacity(t_total * STATE_DIM);
    for t in 0..t_total {
        proprio.extend_from_slice(&angles_seq[t]);
        proprio.push(grip_seq[t]);
    }
    let mut actions = Vec::with_capacity((t_total - 1) * 7);
    for t in 0..t_total - 1 {
        let ee_now = all_kp[t][3];
        let ee_next = all_kp[t + 1][3];
        let rot_now = ee_orientation(angles_seq[t]);
        let rot_next = ee_orientation(angles_seq[t + 1]);
        let dth = axis_angle_delta(rot_now, rot_next);
        actions.extend_from_slice(&[
            ee_next[0] - ee_now[0],
            ee_next[1] - ee_now[1],
            ee_next[2] - ee_now[2],
            dth[0],
            dth[1],
            dth[2],
            grip_seq[t + 1],
        ]);
    }

    let angles_flat: Vec<f64> = angles_seq.iter().flatten().copied().collect();
    Ok(Some(EpisodeRecord {
        task_id,
        k: env.arm.keypoint_count(),
        steps: t_total,
        image_size: env.image_size,
        horizon: env.horizon,
        cameras: env.cameras.clone(),
        angles: angles_flat,
        keypoints,
        proprio,
        actions,
        depths,
    }))
}

// ── Dataset layout ───────────────────────────────────────────────────

const EPISODE_FILES: [&str; 5] = ["angles", "keypoints", "proprio", "actions", "depths"];

impl EpisodeRecord {
    /// One directory per episode: a text manifest plus raw tensor files.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut manifest = String::new();
        let _ = writeln!(manifest, "task_id = {}", self.task_id);
        let _ = writeln!(manifest, "keypoints = {}", self.k);
        let _ = writeln!(manifest, "steps = {}", self.steps);
        let _ = writeln!(manifest, "horizon = {}", self.horizon);
        let _ = writeln!(manifest, "image_size = {}", self.image_size);
        let _ = writeln!(manifest, "cameras = {}", self.cameras.len());
        for (i, cam) in self.cameras.iter().enumerate() {
            let mut vals = vec![cam.fx, cam.fy, cam.cx, cam.cy];
            vals.extend(cam.rot.iter().flatten());
            vals.extend_from_slice(&cam.trans);
            let joined = vals
                .iter()
                .map(|v| format!("{:.17e}", v))
                .collect::<Vec<_>>()
                .join(" ");
            let _ = writeln!(
                manifest,
                "camera{} = {} {} {}",
                i, cam.width, cam.height, joined
            );
        }
        std::fs::write(dir.join("manifest.txt"), manifest)?;

        let shapes: [(&str, &[f64], Vec<usize>); 5] = [
            ("angles", &self.angles, vec![self.steps, 3]),
            ("keypoints", &self.keypoints, vec![self.steps, self.k, 3]),
            ("proprio", &self.proprio, vec![self.steps, STATE_DIM]),
            ("actions", &self.actions, vec![self.steps - 1, 7]),
            (
                "depths",
                &self.depths,
                vec![
                    self.steps,
                    self.cameras.len(),
                    self.image_size * self.image_size,
                ],
            ),
        ];
        for (name, data, shape) in shapes {
            let mut f = std::fs::File::create(dir.join(format!("{name}.gpt")))?;
            serial::write_tensor(&mut f, data, &shape)?;
        }
        Ok(())
    }

    /// Load and validate: keypoints must equal forward kinematics of the
    /// logged joint angles for the default arm of the generating spec.
    pub fn load(dir: &Path, arm: Option<&ArmSpec>) -> Result<EpisodeRecord> {
        let manifest = std::fs::read_to_string(dir.join("manifest.txt"))?;
        let mut task_id = None;
        let mut k = None;
        let mut steps = None;
        let mut horizon = None;
        let mut image_size = None;
        let mut n_cams = None;
        let mut cam_lines: Vec<(usize, String)> = Vec::new();
        for line in manifest.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Format(format!("bad manifest line: {line}"))
            })?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "task_id" => task_id = Some(parse_usize(key, value)?),
                "keypoints" => k = Some(parse_usize(key, value)?),
                "steps" => steps = Some(parse_usize(key, value)?),
                "horizon" => horizon = Some(parse_usize(key, value)?),
                "image_size" => image_size = Some(parse_usize(key, value)?),
                "cameras" => n_cams = Some(parse_usize(key, value)?),
                other if other.starts_with("camera") => {
                    let idx = parse_usize(other, &other["camera".len()..])?;
                    cam_lines.push((idx, value.to_string()));
                }
                other => {
                    return Err(Error::Format(format!("unknown manifest key {other}")));
                }
            }
        }
        let missing = |what: &str| Error::Format(format!("manifest missing {what}"));
        let task_id = task_id.ok_or_else(|| missing("task_id"))?;
        let k = k.ok_or_else(|| missing("keypoints"))?;
        let steps = steps.ok_or_else(|| missing("steps"))?;
        let horizon = horizon.ok_or_else(|| missing("horizon"))?;
        let image_size = image_size.ok_or_else(|| missing("image_size"))?;
        let n_cams = n_cams.ok_or_else(|| missing("cameras"))?;
        cam_lines.sort_by_key(|(i, _)| *i);
        if cam_lines.len() != n_cams {
            return Err(Error::Format("camera count mismatch".into()));
        }
        let mut cameras = Vec::with_capacity(n_cams);
        for (_, line) in cam_lines {
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|_| Error::Format(format!("bad camera value {v}")))
                })
                .collect::<Result<_>>()?;
            if vals.len() != 18 {
                return Err(Error::Format("camera line needs 18 values".into()));
            }
            let rot = [
                [vals[6], vals[7], vals[8]],
                [vals[9], vals[10], vals[11]],
                [vals[12], vals[13], vals[14]],
            ];
            cameras.push(CameraModel::new(
                vals[2],
                vals[3],
                vals[4],
                vals[5],
                rot,
                [vals[15], vals[16], vals[17]],
                vals[0] as usize,
                vals[1] as usize,
            )?);
        }

        let mut load = |name: &str| -> Result<(Vec<f64>, Vec<usize>)> {
            let mut f = std::fs::File::open(dir.join(format!("{name}.gpt")))?;
            serial::read_tensor::<f64, _>(&mut f)
        };
        let (angles, _) = load(EPISODE_FILES[0])?;
        let (keypoints, _) = load(EPISODE_FILES[1])?;
        let (proprio, _) = load(EPISODE_FILES[2])?;
        let (actions, _) = load(EPISODE_FILES[3])?;
        let (depths, _) = load(EPISODE_FILES[4])?;

        let ep = EpisodeRecord {
            task_id,
            k,
            steps,
            image_size,
            horizon,
            cameras,
            angles,
            keypoints,
            proprio,
            actions,
            depths,
        };
        if ep.angles.len() != steps * 3
            || ep.keypoints.len() != steps * k * 3
            || ep.proprio.len() != steps * STATE_DIM
            || ep.actions.len() != (steps - 1) * 7
        {
            return Err(Error::Format("episode array sizes inconsistent".into()));
        }
        if let Some(arm) = arm {
            for t in 0..steps {
                let q = [ep.angles[t * 3], ep.angles[t * 3 + 1], ep.angles[t * 3 + 2]];
                let kp = forward_kinematics(arm, q)?;
                for (ki, p) in kp.iter().enumerate() {
                    let logged = ep.keypoint(t, ki);
                    for a in 0..3 {
                        if (p[a] - logged[a]).abs() > 1e-9 {
                            return Err(Error::Format(format!(
                                "keypoints inconsistent with kinematics at step {t}, keypoint {ki}"
                            )));
                        }
                    }
                }
            }
        }
        Ok(ep)
    }
}

fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value
        .trim()
        .parse::<usize>()
        .map_err(|_| Error::Format(format!("bad integer for {key}: {value}")))
}

/// Load every episode directory under `dir`, sorted by name.
pub fn load_dataset(dir: &Path, arm: Option<&ArmSpec>) -> Result<Vec<EpisodeRecord>> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir() && p.join("manifest.txt").exists())
        .collect();
    entries.sort();
    if entries.is_empty() {
        return Err(Error::Format(format!(
            "no episode directories under {}",
            dir.display()
        )));
    }
    entries
        .iter()
        .map(|p| EpisodeRecord::load(p, arm))
        .collect()
}

#[cfg(test)]
mod tests;
