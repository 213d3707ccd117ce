//! Differentiable depth-only Gaussian splatting.
//!
//! Primitives are projected through pinhole cameras with a first-order
//! covariance Jacobian, composited front-to-back per pixel as
//! `D(r) = Σ T_i α'_i d_i` with `T_i = Π_{j<i} (1 - α'_j)` and
//! `α'_i = α_i exp(-½ Δᵀ Σ₂D⁻¹ Δ)` (no normalization by accumulated alpha).
//! The backward pass is analytic, written by hand, and deterministic: tiles
//! are reduced in fixed order on one thread.
//!
//! Semantics are defined by the per-pixel ellipse test (`qf <= cutoff`); the
//! tile lists and screen bounding boxes are conservative accelerators only,
//! so the tiled path is bit-compatible with a brute-force per-pixel loop.

use crate::error::{Error, Result};
use crate::geometry::{
    realize_backward, GaussianPrimitive, GaussianSet, RealizeContext, WorkspaceSpec,
    RAW_PER_GAUSSIAN,
};
use crate::scalar::Scalar;
use crate::tensor::{ExternalOp, GraphRef, Tensor};
use std::rc::Rc;

/// Pinhole camera: `x_cam = R x_world + t`, pixel `u = fx x/z + cx`.
/// Pixel (ix, iy) samples the ray through (ix + 0.5, iy + 0.5).
#[derive(Clone, Debug)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rot: [[f64; 3]; 3],
    pub trans: [f64; 3],
    pub width: usize,
    pub height: usize,
}

impl CameraModel {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rot: [[f64; 3]; 3],
        trans: [f64; 3],
        width: usize,
        height: usize,
    ) -> Result<Self> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(Error::InvalidArgument {
                op: "camera",
                msg: format!("focal lengths must be positive, got {} {}", fx, fy),
            });
        }
        // Orthonormality within 1e-9.
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| rot[i][k] * rot[j][k]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (dot - expect).abs() > 1e-9 {
                    return Err(Error::InvalidArgument {
                        op: "camera",
                        msg: format!("rotation not orthonormal at ({}, {}): {}", i, j, dot),
                    });
                }
            }
        }
        Ok(CameraModel {
            fx,
            fy,
            cx,
            cy,
            rot,
            trans,
            width,
            height,
        })
    }

    /// Camera at `eye` looking toward `target` (camera z axis), with +y
    /// screen direction chosen from the world `up` hint.
    pub fn look_at(
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        fx: f64,
        fy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let fwd = normalize3(sub3(target, eye));
        let right = normalize3(cross3(fwd, up));
        let down = cross3(fwd, right);
        let rot = [right, down, fwd];
        // t = -R eye
        let trans = [
            -dot3(rot[0], eye),
            -dot3(rot[1], eye),
            -dot3(rot[2], eye),
        ];
        CameraModel::new(
            fx,
            fy,
            width as f64 / 2.0,
            height as f64 / 2.0,
            rot,
            trans,
            width,
            height,
        )
    }

    pub fn world_to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        [
            dot3(self.rot[0], p) + self.trans[0],
            dot3(self.rot[1], p) + self.trans[1],
            dot3(self.rot[2], p) + self.trans[2],
        ]
    }

    /// World point for a pixel sample and a camera-frame depth.
    pub fn back_project(&self, ix: usize, iy: usize, depth: f64) -> [f64; 3] {
        let u = ix as f64 + 0.5;
        let v = iy as f64 + 0.5;
        let pc = [
            (u - self.cx) / self.fx * depth,
            (v - self.cy) / self.fy * depth,
            depth,
        ];
        let q = sub3(pc, self.trans);
        // R^T q
        [
            self.rot[0][0] * q[0] + self.rot[1][0] * q[1] + self.rot[2][0] * q[2],
            self.rot[0][1] * q[0] + self.rot[1][1] * q[1] + self.rot[2][1] * q[2],
            self.rot[0][2] * q[0] + self.rot[1][2] * q[1] + self.rot[2][2] * q[2],
        ]
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }
}

fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize3(a: [f64; 3]) -> [f64; 3] {
    let n = dot3(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Per-pixel camera-frame depth; 0 is the "no hit" background sentinel.
#[derive(Clone, Debug)]
pub struct DepthMap<S> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> DepthMap<S> {
    pub fn zeros(width: usize, height: usize) -> Self {
        DepthMap {
            width,
            height,
            data: vec![S::zero(); width * height],
        }
    }

    pub fn at(&self, ix: usize, iy: usize) -> S {
        self.data[iy * self.width + ix]
    }
}

/// Rendering thresholds. `cutoff_sq` is the squared Mahalanobis radius of
/// splat support (9 = 3 sigma); `None` disables truncation (used by the
/// finite-difference harness, which needs a smooth forward map).
#[derive(Clone, Copy, Debug)]
pub struct RenderOptions {
    pub near: f64,
    pub alpha_clamp: f64,
    pub termination: Option<f64>,
    pub cutoff_sq: Option<f64>,
    pub falloff: bool,
    pub tile: usize,
    pub cov_reg: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            near: 0.01,
            alpha_clamp: 0.99,
            termination: Some(1e-4),
            cutoff_sq: Some(9.0),
            falloff: true,
            tile: 16,
            cov_reg: 0.3,
        }
    }
}

impl RenderOptions {
    /// Everything smooth: no support truncation, no early termination.
    pub fn smooth() -> Self {
        RenderOptions {
            termination: None,
            cutoff_sq: None,
            ..Default::default()
        }
    }
}

/// Screen-space data for one projected Gaussian.
#[derive(Clone, Debug)]
pub struct SplatRecord<S> {
    pub mean2d: [S; 2],
    /// Regularized 2D covariance (a, b, c) for [[a, b], [b, c]].
    pub cov2d: [S; 3],
    pub inv_cov2d: [S; 3],
    pub depth: S,
    pub alpha: S,
    /// Inclusive pixel index bounds (x0, x1, y0, y1) of the support box.
    pub bbox: (usize, usize, usize, usize),
    cam_point: [S; 3],
}

/// Project one primitive; `None` means culled (behind the near plane or
/// supported by no pixel).
pub fn project_gaussian<S: Scalar>(
    prim: &GaussianPrimitive<S>,
    cam: &CameraModel,
    opts: &RenderOptions,
) -> Option<SplatRecord<S>> {
    // All math in S so f32 renders are genuinely f32.
    let r: Vec<S> = cam
        .rot
        .iter()
        .flatten()
        .map(|&v| S::from_f64(v))
        .collect();
    let t = [
        S::from_f64(cam.trans[0]),
        S::from_f64(cam.trans[1]),
        S::from_f64(cam.trans[2]),
    ];
    let c = prim.center;
    let x = r[0] * c[0] + r[1] * c[1] + r[2] * c[2] + t[0];
    let y = r[3] * c[0] + r[4] * c[1] + r[5] * c[2] + t[1];
    let z = r[6] * c[0] + r[7] * c[1] + r[8] * c[2] + t[2];
    if z <= S::from_f64(opts.near) {
        return None;
    }
    let fx = S::from_f64(cam.fx);
    let fy = S::from_f64(cam.fy);
    let u = fx * x / z + S::from_f64(cam.cx);
    let v = fy * y / z + S::from_f64(cam.cy);

    // M = J R, rows of the 2x3 screen Jacobian times the world rotation.
    let zz = z * z;
    let j00 = fx / z;
    let j02 = -fx * x / zz;
    let j11 = fy / z;
    let j12 = -fy * y / zz;
    let m0 = [
        j00 * r[0] + j02 * r[6],
        j00 * r[1] + j02 * r[7],
        j00 * r[2] + j02 * r[8],
    ];
    let m1 = [
        j11 * r[3] + j12 * r[6],
        j11 * r[4] + j12 * r[7],
        j11 * r[5] + j12 * r[8],
    ];
    let sigma = prim.covariance();
    let ms0 = mat3_vec(&sigma, m0);
    let ms1 = mat3_vec(&sigma, m1);
    let reg = S::from_f64(opts.cov_reg);
    let a = dot3s(m0, ms0) + reg;
    let b = dot3s(m0, ms1);
    let cc = dot3s(m1, ms1) + reg;

    let det = a * cc - b * b;
    if det <= S::zero() {
        return None;
    }
    let inv = [cc / det, -b / det, a / det];

    // Support box from the dominant eigenvalue.
    let bbox = match opts.cutoff_sq {
        Some(cut) => {
            let mid = (a + cc) * S::from_f64(0.5);
            let disc = (((a - cc) * S::from_f64(0.5)).powi(2) + b * b).sqrt();
            let lam_max = mid + disc;
            let radius = (S::from_f64(cut) * lam_max).sqrt().to_f64_lossy();
            let uf = u.to_f64_lossy();
            let vf = v.to_f64_lossy();
            let x0 = (uf - radius - 0.5).ceil().max(0.0);
            let x1 = (uf + radius - 0.5).floor().min(cam.width as f64 - 1.0);
            let y0 = (vf - radius - 0.5).ceil().max(0.0);
            let y1 = (vf + radius - 0.5).floor().min(cam.height as f64 - 1.0);
            if x0 > x1 || y0 > y1 {
                return None;
            }
            (x0 as usize, x1 as usize, y0 as usize, y1 as usize)
        }
        None => (0, cam.width - 1, 0, cam.height - 1),
    };

    Some(SplatRecord {
        mean2d: [u, v],
        cov2d: [a, b, cc],
        inv_cov2d: inv,
        depth: z,
        alpha: prim.opacity,
        bbox,
        cam_point: [x, y, z],
    })
}

fn mat3_vec<S: Scalar>(m: &[[S; 3]; 3], v: [S; 3]) -> [S; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

fn dot3s<S: Scalar>(a: [S; 3], b: [S; 3]) -> S {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Forward state retained for the backward pass.
pub struct RenderContext<S> {
    /// Primitives in canonical order plus the map back to caller order.
    prims: Vec<GaussianPrimitive<S>>,
    canon_to_input: Vec<usize>,
    /// (canonical primitive index, record), sorted front-to-back.
    splats: Vec<(usize, SplatRecord<S>)>,
    /// Indices into `splats` per tile, front-to-back order preserved.
    tiles: Vec<Vec<usize>>,
    tiles_x: usize,
    opts: RenderOptions,
    cam: CameraModel,
    n_inputs: usize,
}

/// Render a depth map. Input order does not matter: the set is first sorted
/// by its canonical (provenance, voxel, slot) key, then by depth.
pub fn render_depth<S: Scalar>(
    set: &GaussianSet<S>,
    cam: &CameraModel,
    opts: &RenderOptions,
) -> (DepthMap<S>, RenderContext<S>) {
    // Canonical pre-sort.
    let mut canon: Vec<usize> = (0..set.items.len()).collect();
    canon.sort_by_key(|&i| {
        let it = &set.items[i];
        (it.tag, it.voxel, it.slot)
    });
    let prims: Vec<GaussianPrimitive<S>> = canon
        .iter()
        .map(|&i| set.items[i].prim.clone())
        .collect();

    // Project and sort front-to-back; equal depths break by canonical index.
    let mut splats: Vec<(usize, SplatRecord<S>)> = Vec::new();
    for (ci, prim) in prims.iter().enumerate() {
        if let Some(rec) = project_gaussian(prim, cam, opts) {
            splats.push((ci, rec));
        }
    }
    splats.sort_by(|(ia, a), (ib, b)| {
        a.depth
            .partial_cmp(&b.depth)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(ia.cmp(ib))
    });

    // Tile lists.
    let tile = opts.tile.max(1);
    let tiles_x = cam.width.div_ceil(tile);
    let tiles_y = cam.height.div_ceil(tile);
    let mut tiles: Vec<Vec<usize>> = vec![Vec::new(); tiles_x * tiles_y];
    for (si, (_, rec)) in splats.iter().enumerate() {
        let (x0, x1, y0, y1) = rec.bbox;
        for ty in (y0 / tile)..=(y1 / tile) {
            for tx in (x0 / tile)..=(x1 / tile) {
                tiles[ty * tiles_x + tx].push(si);
            }
        }
    }

    let ctx = RenderContext {
        prims,
        canon_to_input: canon,
        splats,
        tiles,
        tiles_x,
        opts: *opts,
        cam: cam.clone(),
        n_inputs: set.items.len(),
    };

    let mut depth = DepthMap::zeros(cam.width, cam.height);
    for iy in 0..cam.height {
        for ix in 0..cam.width {
            depth.data[iy * cam.width + ix] = ctx.composite_pixel(ix, iy, None);
        }
    }
    (depth, ctx)
}

/// One processed splat at a pixel, for the backward sweep.
struct PixelHit<S> {
    splat: usize,
    alpha_eff: S,
    trans: S,
    falloff: S,
    clamped: bool,
}

impl<S: Scalar> RenderContext<S> {
    fn tile_list(&self, ix: usize, iy: usize) -> &[usize] {
        let tile = self.opts.tile.max(1);
        &self.tiles[(iy / tile) * self.tiles_x + (ix / tile)]
    }

    /// Composite one pixel front to back. When `hits` is given, every
    /// processed splat is recorded for the backward sweep.
    fn composite_pixel(&self, ix: usize, iy: usize, mut hits: Option<&mut Vec<PixelHit<S>>>) -> S {
        let px = S::from_f64(ix as f64 + 0.5);
        let py = S::from_f64(iy as f64 + 0.5);
        let clamp = S::from_f64(self.opts.alpha_clamp);
        let mut transmittance = S::one();
        let mut out = S::zero();
        for &si in self.tile_list(ix, iy) {
            let (_, rec) = &self.splats[si];
            let (bx0, bx1, by0, by1) = rec.bbox;
            if ix < bx0 || ix > bx1 || iy < by0 || iy > by1 {
                continue;
            }
            let dx = px - rec.mean2d[0];
            let dy = py - rec.mean2d[1];
            let qf = rec.inv_cov2d[0] * dx * dx
                + S::from_f64(2.0) * rec.inv_cov2d[1] * dx * dy
                + rec.inv_cov2d[2] * dy * dy;
            if let Some(cut) = self.opts.cutoff_sq {
                if qf > S::from_f64(cut) {
                    continue;
                }
            }
            let falloff = if self.opts.falloff {
                (-qf * S::from_f64(0.5)).exp()
            } else {
                S::one()
            };
            let raw_alpha = rec.alpha * falloff;
            let clamped = raw_alpha > clamp;
            let alpha_eff = if clamped { clamp } else { raw_alpha };
            out = out + transmittance * alpha_eff * rec.depth;
            if let Some(h) = hits.as_deref_mut() {
                h.push(PixelHit {
                    splat: si,
                    alpha_eff,
                    trans: transmittance,
                    falloff,
                    clamped,
                });
            }
            transmittance = transmittance * (S::one() - alpha_eff);
            if let Some(term) = self.opts.termination {
                if transmittance < S::from_f64(term) {
                    break;
                }
            }
        }
        out
    }

    pub fn splat_count(&self) -> usize {
        self.splats.len()
    }
}

/// Per-primitive gradients in the natural parameterization
/// (center, opacity logit, log-scales, quaternion), caller input order.
pub fn render_depth_backward<S: Scalar>(
    ctx: &RenderContext<S>,
    upstream: &[S],
) -> Vec<[S; RAW_PER_GAUSSIAN]> {
    assert_eq!(upstream.len(), ctx.cam.pixels(), "upstream pixel count");
    let n_splats = ctx.splats.len();
    // Per-splat screen-space accumulators.
    let mut g_mean = vec![[S::zero(); 2]; n_splats];
    let mut g_cov = vec![[S::zero(); 3]; n_splats]; // symmetric (a, b-total, c)
    let mut g_depth = vec![S::zero(); n_splats];
    let mut g_alpha = vec![S::zero(); n_splats];

    let mut hits: Vec<PixelHit<S>> = Vec::new();
    let tile = ctx.opts.tile.max(1);
    let tiles_y = ctx.cam.height.div_ceil(tile);
    for ty in 0..tiles_y {
        for tx in 0..ctx.tiles_x {
            for iy in (ty * tile)..((ty * tile + tile).min(ctx.cam.height)) {
                for ix in (tx * tile)..((tx * tile + tile).min(ctx.cam.width)) {
                    let g_pix = upstream[iy * ctx.cam.width + ix];
                    if g_pix == S::zero() {
                        continue;
                    }
                    hits.clear();
                    let _ = ctx.composite_pixel(ix, iy, Some(&mut hits));
                    // Backward over the processed list: maintain the suffix
                    // sum of T_k a_k d_k for k > i.
                    let mut suffix = S::zero();
                    let px = S::from_f64(ix as f64 + 0.5);
                    let py = S::from_f64(iy as f64 + 0.5);
                    for h in hits.iter().rev() {
                        let (_, rec) = &ctx.splats[h.splat];
                        let d_alpha_eff =
                            h.trans * rec.depth - suffix / (S::one() - h.alpha_eff);
                        suffix = suffix + h.trans * h.alpha_eff * rec.depth;
                        g_depth[h.splat] = g_depth[h.splat] + g_pix * h.trans * h.alpha_eff;
                        if h.clamped {
                            continue;
                        }
                        let d_alpha = g_pix * d_alpha_eff * h.falloff;
                        g_alpha[h.splat] = g_alpha[h.splat] + d_alpha;
                        if !ctx.opts.falloff {
                            continue;
                        }
                        // alpha_eff = alpha exp(-qf/2):
                        // d qf = -1/2 alpha_eff * upstream * dD/dalpha_eff
                        let d_qf = -S::from_f64(0.5) * g_pix * d_alpha_eff * h.alpha_eff;
                        let dx = px - rec.mean2d[0];
                        let dy = py - rec.mean2d[1];
                        let adx = rec.inv_cov2d[0] * dx + rec.inv_cov2d[1] * dy;
                        let ady = rec.inv_cov2d[1] * dx + rec.inv_cov2d[2] * dy;
                        // dqf/dmean = -2 A d
                        let two = S::from_f64(2.0);
                        g_mean[h.splat][0] = g_mean[h.splat][0] - two * d_qf * adx;
                        g_mean[h.splat][1] = g_mean[h.splat][1] - two * d_qf * ady;
                        // dqf/dSigma = -(A d)(A d)^T; off-diagonal counted twice.
                        g_cov[h.splat][0] = g_cov[h.splat][0] - d_qf * adx * adx;
                        g_cov[h.splat][1] = g_cov[h.splat][1] - two * d_qf * adx * ady;
                        g_cov[h.splat][2] = g_cov[h.splat][2] - d_qf * ady * ady;
                    }
                }
            }
        }
    }

    // Push screen-space gradients through the projection, per splat.
    let mut out = vec![[S::zero(); RAW_PER_GAUSSIAN]; ctx.n_inputs];
    for (si, (ci, rec)) in ctx.splats.iter().enumerate() {
        let prim = &ctx.prims[*ci];
        let grads = projection_backward(
            prim,
            rec,
            &ctx.cam,
            g_mean[si],
            g_cov[si],
            g_depth[si],
            g_alpha[si],
        );
        let input_idx = ctx.canon_to_input[*ci];
        for a in 0..RAW_PER_GAUSSIAN {
            out[input_idx][a] = out[input_idx][a] + grads[a];
        }
    }
    out
}

/// Chain screen-space gradients back to one primitive's natural parameters.
#[allow(clippy::too_many_arguments)]
fn projection_backward<S: Scalar>(
    prim: &GaussianPrimitive<S>,
    rec: &SplatRecord<S>,
    cam: &CameraModel,
    g_mean: [S; 2],
    g_cov: [S; 3],
    g_depth: S,
    g_alpha: S,
) -> [S; RAW_PER_GAUSSIAN] {
    let rf: Vec<S> = cam.rot.iter().flatten().map(|&v| S::from_f64(v)).collect();
    let r = [
        [rf[0], rf[1], rf[2]],
        [rf[3], rf[4], rf[5]],
        [rf[6], rf[7], rf[8]],
    ];
    let [x, y, z] = rec.cam_point;
    let fx = S::from_f64(cam.fx);
    let fy = S::from_f64(cam.fy);
    let zz = z * z;
    let j00 = fx / z;
    let j02 = -fx * x / zz;
    let j11 = fy / z;
    let j12 = -fy * y / zz;
    // M = J R (2x3).
    let m = [
        [
            j00 * r[0][0] + j02 * r[2][0],
            j00 * r[0][1] + j02 * r[2][1],
            j00 * r[0][2] + j02 * r[2][2],
        ],
        [
            j11 * r[1][0] + j12 * r[2][0],
            j11 * r[1][1] + j12 * r[2][1],
            j11 * r[1][2] + j12 * r[2][2],
        ],
    ];
    let sigma = prim.covariance();

    // G2: symmetric upstream gradient of the regularized 2D covariance.
    let half = S::from_f64(0.5);
    let g2 = [[g_cov[0], g_cov[1] * half], [g_cov[1] * half, g_cov[2]]];

    // GSigma = M^T G2 M.
    let mut g_sigma = [[S::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut acc = S::zero();
            for p in 0..2 {
                for q in 0..2 {
                    acc = acc + m[p][i] * g2[p][q] * m[q][j];
                }
            }
            g_sigma[i][j] = acc;
        }
    }

    // GM = 2 G2 M Sigma.
    let mut msig = [[S::zero(); 3]; 2];
    for p in 0..2 {
        for j in 0..3 {
            msig[p][j] = (0..3).fold(S::zero(), |acc, k| acc + m[p][k] * sigma[k][j]);
        }
    }
    let two = S::from_f64(2.0);
    let mut g_m = [[S::zero(); 3]; 2];
    for p in 0..2 {
        for j in 0..3 {
            g_m[p][j] = two * (g2[p][0] * msig[0][j] + g2[p][1] * msig[1][j]);
        }
    }

    // GJ = GM R^T (only entries (0,0), (0,2), (1,1), (1,2) of J are nonzero).
    let mut g_j = [[S::zero(); 3]; 2];
    for p in 0..2 {
        for a in 0..3 {
            g_j[p][a] = (0..3).fold(S::zero(), |acc, k| acc + g_m[p][k] * r[a][k]);
        }
    }

    // Camera-point gradient from J, the projected mean, and the depth.
    let z3 = zz * z;
    let mut g_cam = [S::zero(); 3];
    g_cam[0] = g_j[0][2] * (-fx / zz) + g_mean[0] * (fx / z);
    g_cam[1] = g_j[1][2] * (-fy / zz) + g_mean[1] * (fy / z);
    g_cam[2] = g_j[0][0] * (-fx / zz)
        + g_j[1][1] * (-fy / zz)
        + g_j[0][2] * (two * fx * x / z3)
        + g_j[1][2] * (two * fy * y / z3)
        + g_mean[0] * (-fx * x / zz)
        + g_mean[1] * (-fy * y / zz)
        + g_depth;

    // World center gradient: R^T g_cam.
    let g_center = [
        r[0][0] * g_cam[0] + r[1][0] * g_cam[1] + r[2][0] * g_cam[2],
        r[0][1] * g_cam[0] + r[1][1] * g_cam[1] + r[2][1] * g_cam[2],
        r[0][2] * g_cam[0] + r[1][2] * g_cam[1] + r[2][2] * g_cam[2],
    ];

    // Sigma = Rq D Rq^T with D = diag(exp(2 s)).
    let q_hat = crate::geometry::normalize_quat(prim.quat);
    let rq = crate::geometry::quat_to_rot(q_hat);
    let d = [
        (prim.log_scales[0] + prim.log_scales[0]).exp(),
        (prim.log_scales[1] + prim.log_scales[1]).exp(),
        (prim.log_scales[2] + prim.log_scales[2]).exp(),
    ];

    // GD = Rq^T GSigma Rq, diagonal only; gs_i = GD_ii * 2 e^{2 s_i}.
    let mut g_s = [S::zero(); 3];
    for i in 0..3 {
        let mut acc = S::zero();
        for p in 0..3 {
            for q in 0..3 {
                acc = acc + rq[p][i] * g_sigma[p][q] * rq[q][i];
            }
        }
        g_s[i] = acc * two * d[i];
    }

    // GRq = 2 GSigma Rq D.
    let mut g_rq = [[S::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut acc = S::zero();
            for k in 0..3 {
                acc = acc + g_sigma[i][k] * rq[k][j];
            }
            g_rq[i][j] = two * acc * d[j];
        }
    }

    // dR/dq entries at the normalized quaternion.
    let (w, qx, qy, qz) = (q_hat[0], q_hat[1], q_hat[2], q_hat[3]);
    let zero = S::zero();
    let four = S::from_f64(4.0);
    let dr_dw = [
        [zero, -two * qz, two * qy],
        [two * qz, zero, -two * qx],
        [-two * qy, two * qx, zero],
    ];
    let dr_dx = [
        [zero, two * qy, two * qz],
        [two * qy, -four * qx, -two * w],
        [two * qz, two * w, -four * qx],
    ];
    let dr_dy = [
        [-four * qy, two * qx, two * w],
        [two * qx, zero, two * qz],
        [-two * w, two * qz, -four * qy],
    ];
    let dr_dz = [
        [-four * qz, -two * w, two * qx],
        [two * w, -four * qz, two * qy],
        [two * qx, two * qy, zero],
    ];
    let contract = |dr: &[[S; 3]; 3]| -> S {
        let mut acc = S::zero();
        for i in 0..3 {
            for j in 0..3 {
                acc = acc + g_rq[i][j] * dr[i][j];
            }
        }
        acc
    };
    let g_q_free = [
        contract(&dr_dw),
        contract(&dr_dx),
        contract(&dr_dy),
        contract(&dr_dz),
    ];
    // Project onto the tangent of the unit sphere at q_hat and divide by the
    // stored norm, so finite differences on the stored quaternion agree.
    let norm = (prim.quat[0] * prim.quat[0]
        + prim.quat[1] * prim.quat[1]
        + prim.quat[2] * prim.quat[2]
        + prim.quat[3] * prim.quat[3])
        .sqrt();
    let dot = g_q_free[0] * q_hat[0]
        + g_q_free[1] * q_hat[1]
        + g_q_free[2] * q_hat[2]
        + g_q_free[3] * q_hat[3];
    let mut g_q = [S::zero(); 4];
    if norm > S::from_f64(1e-12) {
        for a in 0..4 {
            g_q[a] = (g_q_free[a] - dot * q_hat[a]) / norm;
        }
    }

    // Opacity gradient through the logit.
    let g_logit = g_alpha * prim.opacity * (S::one() - prim.opacity);

    [
        g_center[0],
        g_center[1],
        g_center[2],
        g_logit,
        g_s[0],
        g_s[1],
        g_s[2],
        g_q[0],
        g_q[1],
        g_q[2],
        g_q[3],
    ]
}

// ── Workspace masking and the depth loss ─────────────────────────────

/// Per-pixel supervision validity: 1 where the ground-truth depth is a real
/// hit whose back-projected point lies inside the workspace box.
#[derive(Clone, Debug)]
pub struct WorkspaceMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
    pub valid_count: usize,
}

pub fn workspace_mask<S: Scalar>(
    gt: &DepthMap<S>,
    cam: &CameraModel,
    ws: &WorkspaceSpec,
) -> WorkspaceMask {
    let mut data = vec![false; gt.data.len()];
    let mut valid_count = 0;
    for iy in 0..gt.height {
        for ix in 0..gt.width {
            let d = gt.at(ix, iy).to_f64_lossy();
            if d == 0.0 {
                continue;
            }
            let p = cam.back_project(ix, iy, d);
            if ws.contains(p) {
                data[iy * gt.width + ix] = true;
                valid_count += 1;
            }
        }
    }
    WorkspaceMask {
        width: gt.width,
        height: gt.height,
        data,
        valid_count,
    }
}

impl WorkspaceMask {
    pub fn as_scalars<S: Scalar>(&self) -> Vec<S> {
        self.data
            .iter()
            .map(|&b| if b { S::one() } else { S::zero() })
            .collect()
    }
}

/// Masked L1 over a batch of (prediction, ground truth, mask) triples on the
/// tape: `Σ mask |pred - gt| / Σ mask`. Returns the scalar loss and a flag
/// that is true when every pixel was masked out (loss pinned to 0).
pub fn depth_loss<S: Scalar>(
    graph: &GraphRef<S>,
    triples: &[(Tensor<S>, Tensor<S>, &WorkspaceMask)],
) -> Result<(Tensor<S>, bool)> {
    let total_mask: usize = triples.iter().map(|(_, _, m)| m.valid_count).sum();
    if total_mask == 0 {
        return Ok((graph.constant(vec![S::zero()], &[1]), true));
    }
    let mut acc: Option<Tensor<S>> = None;
    for (pred, gt, mask) in triples {
        let m = graph.constant(mask.as_scalars(), &[mask.data.len()]);
        let term = pred.abs_err(gt)?.mul(&m)?.sum_all();
        acc = Some(match acc {
            None => term,
            Some(a) => a.add(&term)?,
        });
    }
    let loss = acc.unwrap().scale(1.0 / total_mask as f64);
    Ok((loss, false))
}

/// Plain-data masked L1 (evaluation helper): returns (sum, count).
pub fn masked_l1<S: Scalar>(pred: &[S], gt: &[S], mask: &WorkspaceMask) -> (f64, usize) {
    let mut sum = 0.0;
    for ((p, g), &m) in pred.iter().zip(gt).zip(&mask.data) {
        if m {
            sum += (p.to_f64_lossy() - g.to_f64_lossy()).abs();
        }
    }
    (sum, mask.valid_count)
}

// ── Tape bridge ──────────────────────────────────────────────────────

/// A realized Gaussian set plus everything needed to map natural-parameter
/// gradients back onto the raw head-output tensors it came from.
pub struct RealizedPack<S> {
    pub set: GaussianSet<S>,
    pub contexts: Vec<RealizeContext<S>>,
    /// Primitive count per block, in input order.
    pub block_sizes: Vec<usize>,
}

struct SplatTapeOp<S: Scalar> {
    render_ctx: RenderContext<S>,
    pack: Rc<RealizedPack<S>>,
}

impl<S: Scalar> ExternalOp<S> for SplatTapeOp<S> {
    fn name(&self) -> &'static str {
        "render_depth"
    }

    fn backward(&self, grad_out: &[S]) -> Vec<Vec<S>> {
        let natural = render_depth_backward(&self.render_ctx, grad_out);
        let mut out = Vec::with_capacity(self.pack.block_sizes.len());
        let mut offset = 0usize;
        for (block, ctx) in self.pack.block_sizes.iter().zip(&self.pack.contexts) {
            let slice = &natural[offset..offset + block];
            out.push(realize_backward(ctx, slice));
            offset += block;
        }
        out
    }
}

/// Record a depth render of an already realized pack as a tape node. The
/// `raw_inputs` must be the tensors the pack was realized from, in block
/// order; the output is the flattened depth map `[height * width]`.
pub fn render_on_tape<S: Scalar>(
    raw_inputs: &[&Tensor<S>],
    pack: &Rc<RealizedPack<S>>,
    cam: &CameraModel,
    opts: &RenderOptions,
) -> Tensor<S> {
    assert_eq!(raw_inputs.len(), pack.block_sizes.len());
    let graph = raw_inputs[0].graph().clone();
    let (depth, render_ctx) = render_depth(&pack.set, cam, opts);
    graph.external(
        raw_inputs,
        depth.data,
        &[cam.pixels()],
        Box::new(SplatTapeOp {
            render_ctx,
            pack: Rc::clone(pack),
        }),
    )
}

// ── Depth map export ─────────────────────────────────────────────────

/// 16-bit binary PGM in millimeters (big-endian samples per the format).
pub fn write_pgm16<S: Scalar, W: std::io::Write>(w: &mut W, depth: &DepthMap<S>) -> Result<()> {
    let header = format!("P5\n{} {}\n65535\n", depth.width, depth.height);
    w.write_all(header.as_bytes())?;
    let mut buf = Vec::with_capacity(depth.data.len() * 2);
    for &d in &depth.data {
        let mm = (d.to_f64_lossy() * 1000.0).clamp(0.0, 65535.0) as u16;
        buf.extend_from_slice(&mm.to_be_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}
