//! Predictive workspace geometry: coarse spatial queries decoded into
//! per-timestep 3D Gaussian sets, with extra primitives spawned in voxels
//! that predicted keypoints will visit.
//!
//! The fine voxel grid is the coarse grid upsampled by 4 along each axis.
//! Token and voxel raster order is x fastest, then y, then z, everywhere.

use crate::encoding::{SpatialEncoding, TemporalEncoding};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Factor applied to half a voxel size to bound the tanh center offset.
pub const OFFSET_RANGE_FACTOR: f64 = 1.5;

/// Axis-aligned workspace box discretized into cubic voxels.
#[derive(Clone, Debug)]
pub struct WorkspaceSpec {
    min: [f64; 3],
    max: [f64; 3],
    voxel_size: f64,
    fine: (usize, usize, usize),
}

impl WorkspaceSpec {
    /// Extents must come out integral (within 1e-9 of a whole voxel count)
    /// and divisible by 4 so two x2 upsampling stages restore them.
    pub fn new(min: [f64; 3], max: [f64; 3], voxel_size: f64) -> Result<Self> {
        if voxel_size <= 0.0 {
            return Err(Error::InvalidArgument {
                op: "workspace",
                msg: format!("voxel size {} must be positive", voxel_size),
            });
        }
        let mut fine = [0usize; 3];
        for a in 0..3 {
            let span = max[a] - min[a];
            if span <= 0.0 {
                return Err(Error::InvalidArgument {
                    op: "workspace",
                    msg: format!("axis {}: min {} >= max {}", a, min[a], max[a]),
                });
            }
            let n = span / voxel_size;
            let rounded = n.round();
            if (n - rounded).abs() > 1e-9 || rounded < 1.0 {
                return Err(Error::InvalidArgument {
                    op: "workspace",
                    msg: format!(
                        "axis {}: span {} is not a whole number of {} voxels",
                        a, span, voxel_size
                    ),
                });
            }
            let rounded = rounded as usize;
            if rounded % 4 != 0 {
                return Err(Error::InvalidArgument {
                    op: "workspace",
                    msg: format!(
                        "axis {}: {} voxels not divisible by 4; pad the workspace",
                        a, rounded
                    ),
                });
            }
            fine[a] = rounded;
        }
        Ok(WorkspaceSpec {
            min,
            max,
            voxel_size,
            fine: (fine[0], fine[1], fine[2]),
        })
    }

    pub fn min(&self) -> [f64; 3] {
        self.min
    }

    pub fn max(&self) -> [f64; 3] {
        self.max
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn fine_extents(&self) -> (usize, usize, usize) {
        self.fine
    }

    pub fn coarse_extents(&self) -> (usize, usize, usize) {
        (self.fine.0 / 4, self.fine.1 / 4, self.fine.2 / 4)
    }

    pub fn fine_voxel_count(&self) -> usize {
        self.fine.0 * self.fine.1 * self.fine.2
    }

    pub fn coarse_voxel_count(&self) -> usize {
        let (x, y, z) = self.coarse_extents();
        x * y * z
    }

    /// Flat fine-voxel index in raster order (x fastest).
    pub fn fine_flat(&self, ix: usize, iy: usize, iz: usize) -> usize {
        debug_assert!(ix < self.fine.0 && iy < self.fine.1 && iz < self.fine.2);
        (iz * self.fine.1 + iy) * self.fine.0 + ix
    }

    pub fn fine_coords(&self, flat: usize) -> (usize, usize, usize) {
        let ix = flat % self.fine.0;
        let iy = (flat / self.fine.0) % self.fine.1;
        let iz = flat / (self.fine.0 * self.fine.1);
        (ix, iy, iz)
    }

    pub fn fine_voxel_center(&self, flat: usize) -> [f64; 3] {
        let (ix, iy, iz) = self.fine_coords(flat);
        [
            self.min[0] + (ix as f64 + 0.5) * self.voxel_size,
            self.min[1] + (iy as f64 + 0.5) * self.voxel_size,
            self.min[2] + (iz as f64 + 0.5) * self.voxel_size,
        ]
    }

    /// Box membership, half-open on the max faces.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] < self.max[a])
    }

    /// Fine voxel holding `p` under half-open voxel intervals, if inside.
    pub fn fine_voxel_of(&self, p: [f64; 3]) -> Option<usize> {
        if !self.contains(p) {
            return None;
        }
        let idx = |a: usize, n: usize| -> usize {
            let i = ((p[a] - self.min[a]) / self.voxel_size).floor() as usize;
            i.min(n - 1)
        };
        Some(self.fine_flat(
            idx(0, self.fine.0),
            idx(1, self.fine.1),
            idx(2, self.fine.2),
        ))
    }
}

// ── Spatial queries and temporal shifting ────────────────────────────

/// Spatial query assembly: learnable grid embeddings plus the factored 3D
/// encoding, flattened in raster order.
pub fn assemble_spatial_queries<S: Scalar>(
    q_init: &Tensor<S>,
    pe: &SpatialEncoding<S>,
) -> Result<Tensor<S>> {
    let shape = q_init.shape();
    if shape != [pe.tokens(), pe.dim()] {
        return Err(Error::ShapeMismatch {
            op: "assemble_spatial_queries",
            lhs: shape,
            rhs: vec![pe.tokens(), pe.dim()],
        });
    }
    let table = q_init
        .graph()
        .constant(pe.as_slice().to_vec(), &[pe.tokens(), pe.dim()]);
    q_init.add(&table)
}

/// Add the temporal encoding row for step `tau` to every token.
pub fn shift_temporal<S: Scalar>(
    embeddings: &Tensor<S>,
    pe: &TemporalEncoding<S>,
    tau: usize,
) -> Result<Tensor<S>> {
    if tau >= pe.rows() {
        return Err(Error::InvalidArgument {
            op: "shift_temporal",
            msg: format!("step {} out of horizon range 0..{}", tau, pe.rows()),
        });
    }
    let dim = pe.dim();
    let shape = embeddings.shape();
    if shape.last() != Some(&dim) {
        return Err(Error::ShapeMismatch {
            op: "shift_temporal",
            lhs: shape,
            rhs: vec![dim],
        });
    }
    let row = embeddings.graph().constant(pe.row(tau).to_vec(), &[dim]);
    embeddings.add(&row)
}

// ── Voxel decoder ────────────────────────────────────────────────────

/// Whether the pointwise stage MLPs run normally or are bypassed (a test
/// hook for checking the linearity of the block-upsample maps).
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum PointwiseMode {
    Normal,
    Identity,
}

pub struct VoxelDecoderParams<S: Scalar> {
    /// Bias-free expansion of each coarse cell to a 2x2x2 block of children.
    pub up1: Tensor<S>, // [c_in, 8 * c_mid]
    pub mlp1_w1: Tensor<S>, // [c_mid, c_mid]
    pub mlp1_b1: Tensor<S>,
    pub mlp1_w2: Tensor<S>,
    pub mlp1_b2: Tensor<S>,
    pub up2: Tensor<S>, // [c_mid, 8 * c_out]
    pub mlp2_w1: Tensor<S>, // [c_out, c_out]
    pub mlp2_b1: Tensor<S>,
    pub mlp2_w2: Tensor<S>,
    pub mlp2_b2: Tensor<S>,
}

fn pointwise_mlp<S: Scalar>(
    x: &Tensor<S>,
    w1: &Tensor<S>,
    b1: &Tensor<S>,
    w2: &Tensor<S>,
    b2: &Tensor<S>,
    mode: PointwiseMode,
) -> Result<Tensor<S>> {
    match mode {
        PointwiseMode::Identity => Ok(x.clone()),
        PointwiseMode::Normal => x.matmul(w1)?.add(b1)?.tanh().matmul(w2)?.add(b2),
    }
}

/// One x2 upsampling stage: expand every cell's feature into a 2x2x2 block
/// of child features, rearrange into the doubled grid, then refine each
/// child with a pointwise MLP.
fn upsample_stage<S: Scalar>(
    x: &Tensor<S>,
    grid: (usize, usize, usize),
    up: &Tensor<S>,
    mlp: (&Tensor<S>, &Tensor<S>, &Tensor<S>, &Tensor<S>),
    mode: PointwiseMode,
) -> Result<Tensor<S>> {
    let (nx, ny, nz) = grid;
    let c_child = up.shape()[1] / 8;
    let expanded = x.matmul(up)?; // [n, 8 * c_child]
    // [nz, ny, nx, dz, dy, dx, c] -> [nz, dz, ny, dy, nx, dx, c]
    let blocks = expanded.reshape(&[nz, ny, nx, 2, 2, 2, c_child])?;
    let fine = blocks
        .transpose(&[0, 3, 1, 4, 2, 5, 6])?
        .reshape(&[nz * ny * nx * 8, c_child])?;
    pointwise_mlp(&fine, mlp.0, mlp.1, mlp.2, mlp.3, mode)
}

/// Decode shifted coarse embeddings `[n_coarse, c_in]` into the dense fine
/// feature volume `[n_fine, c_out]` via two x2 stages.
pub fn voxel_decode<S: Scalar>(
    shifted: &Tensor<S>,
    ws: &WorkspaceSpec,
    params: &VoxelDecoderParams<S>,
    mode: PointwiseMode,
) -> Result<Tensor<S>> {
    let coarse = ws.coarse_extents();
    let shape = shifted.shape();
    if shape.len() != 2 || shape[0] != ws.coarse_voxel_count() {
        return Err(Error::ShapeMismatch {
            op: "voxel_decode",
            lhs: shape,
            rhs: vec![ws.coarse_voxel_count(), 0],
        });
    }
    let mid = upsample_stage(
        shifted,
        coarse,
        &params.up1,
        (
            &params.mlp1_w1,
            &params.mlp1_b1,
            &params.mlp1_w2,
            &params.mlp1_b2,
        ),
        mode,
    )?;
    upsample_stage(
        &mid,
        (coarse.0 * 2, coarse.1 * 2, coarse.2 * 2),
        &params.up2,
        (
            &params.mlp2_w1,
            &params.mlp2_b1,
            &params.mlp2_w2,
            &params.mlp2_b2,
        ),
        mode,
    )
}

// ── Gaussian primitives ──────────────────────────────────────────────

/// Number of raw values parameterizing one primitive:
/// 3 center offsets, 1 opacity logit, 3 log-scales, 4 quaternion offsets.
pub const RAW_PER_GAUSSIAN: usize = 11;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Provenance {
    Initial,
    Refined,
}

/// One 3D Gaussian: center, opacity in (0,1), covariance factored as
/// log-scales and a unit quaternion (`Σ = R diag(exp(2s)) Rᵀ`).
#[derive(Clone, Debug)]
pub struct GaussianPrimitive<S> {
    pub center: [S; 3],
    pub opacity: S,
    pub log_scales: [S; 3],
    pub quat: [S; 4],
}

impl<S: Scalar> GaussianPrimitive<S> {
    /// Build from the natural 11-vector (center, opacity logit, log-scales,
    /// quaternion). The quaternion is normalized on use, not here.
    pub fn from_natural(v: &[S]) -> Self {
        assert_eq!(v.len(), RAW_PER_GAUSSIAN);
        GaussianPrimitive {
            center: [v[0], v[1], v[2]],
            opacity: sigmoid(v[3]),
            log_scales: [v[4], v[5], v[6]],
            quat: [v[7], v[8], v[9], v[10]],
        }
    }

    pub fn to_natural(&self) -> [S; RAW_PER_GAUSSIAN] {
        let logit = (self.opacity / (S::one() - self.opacity)).ln();
        [
            self.center[0],
            self.center[1],
            self.center[2],
            logit,
            self.log_scales[0],
            self.log_scales[1],
            self.log_scales[2],
            self.quat[0],
            self.quat[1],
            self.quat[2],
            self.quat[3],
        ]
    }

    pub fn rotation(&self) -> [[S; 3]; 3] {
        quat_to_rot(normalize_quat(self.quat))
    }

    pub fn covariance(&self) -> [[S; 3]; 3] {
        let r = self.rotation();
        let d = [
            (self.log_scales[0] + self.log_scales[0]).exp(),
            (self.log_scales[1] + self.log_scales[1]).exp(),
            (self.log_scales[2] + self.log_scales[2]).exp(),
        ];
        let mut out = [[S::zero(); 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = S::zero();
                for k in 0..3 {
                    acc = acc + r[i][k] * d[k] * r[j][k];
                }
                out[i][j] = acc;
            }
        }
        out
    }
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

pub fn normalize_quat<S: Scalar>(q: [S; 4]) -> [S; 4] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if n < S::from_f64(1e-12) {
        return [S::one(), S::zero(), S::zero(), S::zero()];
    }
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

pub fn quat_to_rot<S: Scalar>(q: [S; 4]) -> [[S; 3]; 3] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let two = S::from_f64(2.0);
    [
        [
            S::one() - two * (y * y + z * z),
            two * (x * y - w * z),
            two * (x * z + w * y),
        ],
        [
            two * (x * y + w * z),
            S::one() - two * (x * x + z * z),
            two * (y * z - w * x),
        ],
        [
            two * (x * z - w * y),
            two * (y * z + w * x),
            S::one() - two * (x * x + y * y),
        ],
    ]
}

/// A primitive plus its provenance and source voxel bookkeeping. `slot` is
/// the primitive's index within its voxel; (tag, voxel, slot) is the
/// canonical sort key used for deterministic rendering order.
#[derive(Clone, Debug)]
pub struct TaggedGaussian<S> {
    pub prim: GaussianPrimitive<S>,
    pub tag: Provenance,
    pub voxel: usize,
    pub slot: usize,
}

#[derive(Clone, Debug)]
pub struct GaussianSet<S> {
    pub items: Vec<TaggedGaussian<S>>,
}

impl<S> Default for GaussianSet<S> {
    fn default() -> Self {
        GaussianSet { items: Vec::new() }
    }
}

impl<S: Scalar> GaussianSet<S> {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn count_tag(&self, tag: Provenance) -> usize {
        self.items.iter().filter(|g| g.tag == tag).count()
    }
}

/// Union preserving provenance tags; the left set's items come first.
pub fn union_gaussians<S: Scalar>(init: GaussianSet<S>, refined: GaussianSet<S>) -> GaussianSet<S> {
    let mut items = init.items;
    items.extend(refined.items);
    GaussianSet { items }
}

// ── Raw value realization ────────────────────────────────────────────

/// Describes how a block of raw head outputs maps onto primitives: which
/// fine voxel each row decodes into, how many primitives per row, and the
/// activation constants.
#[derive(Clone, Debug)]
pub struct GaussianBlockMeta {
    pub voxels: Vec<usize>,
    pub n_per_voxel: usize,
    pub base_log_scale: f64,
    /// Meters of center travel allowed from the voxel center.
    pub offset_range: f64,
    pub tag: Provenance,
}

impl GaussianBlockMeta {
    pub fn initial(ws: &WorkspaceSpec, n_per_voxel: usize) -> Self {
        GaussianBlockMeta {
            voxels: (0..ws.fine_voxel_count()).collect(),
            n_per_voxel,
            base_log_scale: (ws.voxel_size() / 2.0).ln(),
            offset_range: OFFSET_RANGE_FACTOR * ws.voxel_size() / 2.0,
            tag: Provenance::Initial,
        }
    }

    pub fn refined(ws: &WorkspaceSpec, marked: Vec<usize>, n_refine: usize) -> Self {
        GaussianBlockMeta {
            voxels: marked,
            n_per_voxel: n_refine,
            base_log_scale: (ws.voxel_size() / 4.0).ln(),
            offset_range: OFFSET_RANGE_FACTOR * ws.voxel_size() / 2.0,
            tag: Provenance::Refined,
        }
    }

    pub fn raw_len(&self) -> usize {
        self.voxels.len() * self.n_per_voxel * RAW_PER_GAUSSIAN
    }
}

/// Saved forward quantities needed to push natural-parameter gradients back
/// to raw head outputs.
pub struct RealizeContext<S> {
    tanh_offsets: Vec<[S; 3]>,
    quat_hats: Vec<[S; 4]>,
    quat_norms: Vec<S>,
    offset_range: S,
}

/// Turn raw head outputs into primitives. Per primitive:
/// center = voxel_center + tanh(raw) * offset_range; opacity = sigmoid(raw);
/// log-scales = base + raw; quaternion = normalize(raw + identity).
pub fn realize_gaussians<S: Scalar>(
    raw: &[S],
    meta: &GaussianBlockMeta,
    ws: &WorkspaceSpec,
) -> (GaussianSet<S>, RealizeContext<S>) {
    assert_eq!(raw.len(), meta.raw_len(), "raw block length mismatch");
    let n = meta.voxels.len() * meta.n_per_voxel;
    let mut items = Vec::with_capacity(n);
    let mut ctx = RealizeContext {
        tanh_offsets: Vec::with_capacity(n),
        quat_hats: Vec::with_capacity(n),
        quat_norms: Vec::with_capacity(n),
        offset_range: S::from_f64(meta.offset_range),
    };
    let base = S::from_f64(meta.base_log_scale);
    for (row, &voxel) in meta.voxels.iter().enumerate() {
        let center = ws.fine_voxel_center(voxel);
        let cx = [
            S::from_f64(center[0]),
            S::from_f64(center[1]),
            S::from_f64(center[2]),
        ];
        for slot in 0..meta.n_per_voxel {
            let off = (row * meta.n_per_voxel + slot) * RAW_PER_GAUSSIAN;
            let v = &raw[off..off + RAW_PER_GAUSSIAN];
            let t = [v[0].tanh(), v[1].tanh(), v[2].tanh()];
            let opacity = sigmoid(v[3]);
            let q_eff = [v[7] + S::one(), v[8], v[9], v[10]];
            let norm = (q_eff[0] * q_eff[0]
                + q_eff[1] * q_eff[1]
                + q_eff[2] * q_eff[2]
                + q_eff[3] * q_eff[3])
                .sqrt();
            let q_hat = normalize_quat(q_eff);
            items.push(TaggedGaussian {
                prim: GaussianPrimitive {
                    center: [
                        cx[0] + t[0] * ctx.offset_range,
                        cx[1] + t[1] * ctx.offset_range,
                        cx[2] + t[2] * ctx.offset_range,
                    ],
                    opacity,
                    log_scales: [base + v[4], base + v[5], base + v[6]],
                    quat: q_hat,
                },
                tag: meta.tag,
                voxel,
                slot,
            });
            ctx.tanh_offsets.push(t);
            ctx.quat_hats.push(q_hat);
            ctx.quat_norms.push(norm);
        }
    }
    (GaussianSet { items }, ctx)
}

/// Map per-primitive natural-parameter gradients (center, opacity logit,
/// log-scales, stored quaternion — the latter already projected by the
/// renderer onto the unit sphere tangent) back to raw head outputs.
pub fn realize_backward<S: Scalar>(
    ctx: &RealizeContext<S>,
    natural_grads: &[[S; RAW_PER_GAUSSIAN]],
) -> Vec<S> {
    assert_eq!(natural_grads.len(), ctx.tanh_offsets.len());
    let mut raw = vec![S::zero(); natural_grads.len() * RAW_PER_GAUSSIAN];
    for (i, g) in natural_grads.iter().enumerate() {
        let out = &mut raw[i * RAW_PER_GAUSSIAN..(i + 1) * RAW_PER_GAUSSIAN];
        let t = ctx.tanh_offsets[i];
        for a in 0..3 {
            out[a] = g[a] * (S::one() - t[a] * t[a]) * ctx.offset_range;
        }
        // Opacity gradient arrives through the logit; log-scales are a
        // constant shift of the raw values.
        out[3] = g[3];
        out[4] = g[4];
        out[5] = g[5];
        out[6] = g[6];
        let qh = ctx.quat_hats[i];
        let n = ctx.quat_norms[i];
        if n < S::from_f64(1e-12) {
            continue;
        }
        let dot = g[7] * qh[0] + g[8] * qh[1] + g[9] * qh[2] + g[10] * qh[3];
        for a in 0..4 {
            out[7 + a] = (g[7 + a] - dot * qh[a]) / n;
        }
    }
    raw
}

// ── Track-guided refinement ──────────────────────────────────────────

/// Binary occupancy over the fine voxel grid: a voxel is marked iff some
/// predicted keypoint lies inside it (half-open intervals). Keypoints
/// outside the workspace are ignored and no gradient flows through the mask.
#[derive(Clone, Debug)]
pub struct RefinementMask {
    marked: Vec<bool>,
    count: usize,
}

impl RefinementMask {
    pub fn is_marked(&self, voxel: usize) -> bool {
        self.marked[voxel]
    }

    pub fn marked_count(&self) -> usize {
        self.count
    }

    /// Marked fine-voxel indices in ascending raster order.
    pub fn marked_indices(&self) -> Vec<usize> {
        self.marked
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }
}

pub fn refinement_mask(points: &[[f64; 3]], ws: &WorkspaceSpec) -> RefinementMask {
    let mut marked = vec![false; ws.fine_voxel_count()];
    let mut count = 0usize;
    for &p in points {
        if let Some(v) = ws.fine_voxel_of(p) {
            if !marked[v] {
                marked[v] = true;
                count += 1;
            }
        }
    }
    RefinementMask { marked, count }
}

// ── Heads on the tape ────────────────────────────────────────────────

pub struct GaussianHeadParams<S: Scalar> {
    pub w: Tensor<S>, // [c_feat, n_per_voxel * RAW_PER_GAUSSIAN]
    pub b: Tensor<S>,
}

/// Pointwise linear map from the fine feature volume to raw primitive
/// parameters, `[n_fine, n_per_voxel * 11]`.
pub fn gaussian_head_raw<S: Scalar>(
    volume: &Tensor<S>,
    params: &GaussianHeadParams<S>,
) -> Result<Tensor<S>> {
    volume.matmul(&params.w)?.add(&params.b)
}

pub struct RefineHeadParams<S: Scalar> {
    pub w1: Tensor<S>, // [c_feat, hidden]
    pub b1: Tensor<S>,
    pub w2: Tensor<S>, // [hidden, n_refine * RAW_PER_GAUSSIAN]
    pub b2: Tensor<S>,
}

/// Shared MLP over the features of marked voxels; returns `None` when the
/// mask is empty. Output shape `[marked, n_refine * 11]`.
pub fn refine_gaussians_raw<S: Scalar>(
    volume: &Tensor<S>,
    marked: &[usize],
    params: &RefineHeadParams<S>,
) -> Result<Option<Tensor<S>>> {
    if marked.is_empty() {
        return Ok(None);
    }
    let rows: Vec<Tensor<S>> = marked
        .iter()
        .map(|&v| volume.slice(0, v, 1))
        .collect::<Result<_>>()?;
    let row_refs: Vec<&Tensor<S>> = rows.iter().collect();
    let features = volume.graph().concat(&row_refs, 0)?;
    let out = features
        .matmul(&params.w1)?
        .add(&params.b1)?
        .tanh()
        .matmul(&params.w2)?
        .add(&params.b2)?;
    Ok(Some(out))
}

// ── Debug dump format ────────────────────────────────────────────────

/// Write a Gaussian set: magic `GSET`, count u64 LE, element width tag, then
/// per primitive the 11 natural values little-endian plus one tag byte.
pub fn write_gaussian_set<S: Scalar, W: std::io::Write>(
    w: &mut W,
    set: &GaussianSet<S>,
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(b"GSET");
    buf.extend_from_slice(&(set.len() as u64).to_le_bytes());
    buf.push(S::WIDTH);
    for item in &set.items {
        for v in item.prim.to_natural() {
            v.write_le(&mut buf);
        }
        buf.push(match item.tag {
            Provenance::Initial => 0,
            Provenance::Refined => 1,
        });
    }
    w.write_all(&buf)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::SpatialEncoding;
    use crate::tensor::GraphRef;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn test_ws() -> WorkspaceSpec {
        WorkspaceSpec::new([0.0, 0.0, 0.0], [0.8, 0.8, 0.4], 0.05).unwrap()
    }

    #[test]
    fn workspace_extents() {
        let ws = test_ws();
        assert_eq!(ws.fine_extents(), (16, 16, 8));
        assert_eq!(ws.coarse_extents(), (4, 4, 2));
        assert_eq!(ws.coarse_voxel_count(), 32);
    }

    #[test]
    fn workspace_rejects_non_divisible() {
        // 1.0 / 0.04 = 25 voxels: integral but not divisible by 4.
        assert!(WorkspaceSpec::new([0.0; 3], [1.6, 1.6, 1.0], 0.04).is_err());
        // Padding the depth to 1.12 m (28 voxels) fixes it.
        assert!(WorkspaceSpec::new([0.0; 3], [1.6, 1.6, 1.12], 0.04).is_ok());
        // Non-integral span.
        assert!(WorkspaceSpec::new([0.0; 3], [0.81, 0.8, 0.4], 0.05).is_err());
    }

    #[test]
    fn spatial_queries_zero_init_equals_encoding() {
        let g = GraphRef::<f64>::new();
        let pe = SpatialEncoding::<f64>::equal_split((4, 4, 2), 12).unwrap();
        let q = g.leaf(vec![0.0; 32 * 12], &[32, 12], true);
        let tokens = assemble_spatial_queries(&q, &pe).unwrap();
        assert_eq!(tokens.shape(), vec![32, 12]);
        assert_eq!(tokens.value(), pe.as_slice().to_vec());
    }

    #[test]
    fn spatial_queries_elementwise_sum() {
        let g = GraphRef::<f64>::new();
        let pe = SpatialEncoding::<f64>::equal_split((2, 2, 2), 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let init: Vec<f64> = (0..8 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let q = g.leaf(init.clone(), &[8, 6], true);
        let tokens = assemble_spatial_queries(&q, &pe).unwrap().value();
        for (i, t) in tokens.iter().enumerate() {
            assert_eq!(*t, init[i] + pe.as_slice()[i]);
        }
    }

    #[test]
    fn temporal_shift_examples() {
        let g = GraphRef::<f64>::new();
        let pe = crate::encoding::TemporalEncoding::<f64>::new(4, 6).unwrap();
        let base: Vec<f64> = (0..3 * 6).map(|i| i as f64 * 0.1).collect();
        let emb = g.constant(base.clone(), &[3, 6]);
        let s0 = shift_temporal(&emb, &pe, 0).unwrap().value();
        for tok in 0..3 {
            for c in 0..6 {
                assert_eq!(s0[tok * 6 + c], base[tok * 6 + c] + pe.row(0)[c]);
            }
        }
        let s1 = shift_temporal(&emb, &pe, 1).unwrap().value();
        let s2 = shift_temporal(&emb, &pe, 2).unwrap().value();
        for tok in 0..3 {
            for c in 0..6 {
                let diff = s2[tok * 6 + c] - s1[tok * 6 + c];
                assert!((diff - (pe.row(2)[c] - pe.row(1)[c])).abs() < 1e-15);
            }
        }
        assert!(shift_temporal(&emb, &pe, 5).is_err());
    }

    fn decoder_params(
        g: &GraphRef<f64>,
        c_in: usize,
        c_mid: usize,
        c_out: usize,
        rng: &mut ChaCha8Rng,
        zero: bool,
    ) -> VoxelDecoderParams<f64> {
        let mut mk = |rows: usize, cols: usize| {
            let data: Vec<f64> = (0..rows * cols)
                .map(|_| if zero { 0.0 } else { rng.gen_range(-0.3..0.3) })
                .collect();
            g.leaf(data, &[rows, cols], true)
        };
        VoxelDecoderParams {
            up1: mk(c_in, 8 * c_mid),
            mlp1_w1: mk(c_mid, c_mid),
            mlp1_b1: mk(1, c_mid).reshape(&[c_mid]).unwrap(),
            mlp1_w2: mk(c_mid, c_mid),
            mlp1_b2: mk(1, c_mid).reshape(&[c_mid]).unwrap(),
            up2: mk(c_mid, 8 * c_out),
            mlp2_w1: mk(c_out, c_out),
            mlp2_b1: mk(1, c_out).reshape(&[c_out]).unwrap(),
            mlp2_w2: mk(c_out, c_out),
            mlp2_b2: mk(1, c_out).reshape(&[c_out]).unwrap(),
        }
    }

    #[test]
    fn voxel_decode_shapes_and_zero_weights() {
        let ws = test_ws(); // coarse (4,4,2), fine (16,16,8)
        let g = GraphRef::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = decoder_params(&g, 6, 4, 5, &mut rng, true);
        let x = g.constant(vec![1.0; 32 * 6], &[32, 6]);
        let out = voxel_decode(&x, &ws, &params, PointwiseMode::Normal).unwrap();
        assert_eq!(out.shape(), vec![16 * 16 * 8, 5]);
        assert!(out.value().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn voxel_decode_receptive_field_is_one_coarse_cell() {
        let ws = test_ws();
        let g = GraphRef::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = decoder_params(&g, 6, 4, 5, &mut rng, false);
        // Single nonzero coarse cell at (ix, iy, iz) = (2, 1, 1).
        let (cx, cy, _cz) = ws.coarse_extents();
        let hot = (cy + 1) * cx + 2;
        let mut data = vec![0.0; 32 * 6];
        for c in 0..6 {
            data[hot * 6 + c] = 1.0;
        }
        let x = g.constant(data, &[32, 6]);
        // Identity pointwise stage isolates the block-expansion linear maps.
        let out = voxel_decode(&x, &ws, &params, PointwiseMode::Identity)
            .unwrap()
            .value();
        let (fx, fy, fz) = ws.fine_extents();
        for iz in 0..fz {
            for iy in 0..fy {
                for ix in 0..fx {
                    let flat = ws.fine_flat(ix, iy, iz);
                    let inside =
                        (8..12).contains(&ix) && (4..8).contains(&iy) && (4..8).contains(&iz);
                    let nonzero = (0..5).any(|c| out[flat * 5 + c] != 0.0);
                    if !inside {
                        assert!(!nonzero, "leak at ({ix},{iy},{iz})");
                    }
                }
            }
        }
        // The hot block itself is generically nonzero.
        let flat = ws.fine_flat(9, 5, 5);
        assert!((0..5).any(|c| out[flat * 5 + c] != 0.0));
    }

    #[test]
    fn voxel_decode_linear_before_activation() {
        let ws = test_ws();
        let g = GraphRef::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = decoder_params(&g, 6, 4, 5, &mut rng, false);
        let data: Vec<f64> = (0..32 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x1 = g.constant(data.clone(), &[32, 6]);
        let x2 = g.constant(data.iter().map(|v| v * 2.0).collect(), &[32, 6]);
        let y1 = voxel_decode(&x1, &ws, &params, PointwiseMode::Identity)
            .unwrap()
            .value();
        let y2 = voxel_decode(&x2, &ws, &params, PointwiseMode::Identity)
            .unwrap()
            .value();
        for (a, b) in y1.iter().zip(&y2) {
            assert!((b - 2.0 * a).abs() < 1e-12);
        }
    }

    #[test]
    fn realize_zero_raw_gives_centered_isotropic() {
        let ws = test_ws();
        let meta = GaussianBlockMeta::initial(&ws, 4);
        let raw = vec![0.0f64; meta.raw_len()];
        let (set, _) = realize_gaussians(&raw, &meta, &ws);
        assert_eq!(set.len(), ws.fine_voxel_count() * 4);
        let g = &set.items[17];
        let c = ws.fine_voxel_center(g.voxel);
        assert_eq!(g.prim.center, c);
        assert_eq!(g.prim.opacity, 0.5);
        let s0 = (ws.voxel_size() / 2.0).ln();
        assert!(g.prim.log_scales.iter().all(|&s| s == s0));
        let cov = g.prim.covariance();
        let want = (2.0 * s0).exp();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { want } else { 0.0 };
                assert!((cov[i][j] - expect).abs() < 1e-12);
            }
        }
    }

    /// Jacobi eigenvalue iteration for symmetric 3x3 matrices (test oracle).
    fn sym3_eigenvalues(m: [[f64; 3]; 3]) -> [f64; 3] {
        let mut a = m;
        for _ in 0..64 {
            let (mut p, mut q, mut big) = (0, 1, 0.0f64);
            for i in 0..3 {
                for j in (i + 1)..3 {
                    if a[i][j].abs() > big {
                        big = a[i][j].abs();
                        p = i;
                        q = j;
                    }
                }
            }
            if big < 1e-14 {
                break;
            }
            let theta = 0.5 * (a[q][q] - a[p][p]) / a[p][q];
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            let mut r = [[0.0; 3]; 3];
            for (i, row) in r.iter_mut().enumerate() {
                row[i] = 1.0;
            }
            r[p][p] = c;
            r[q][q] = c;
            r[p][q] = s;
            r[q][p] = -s;
            let mut tmp = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    tmp[i][j] = (0..3).map(|k| r[k][i] * a[k][j]).sum();
                }
            }
            for i in 0..3 {
                for j in 0..3 {
                    a[i][j] = (0..3).map(|k| tmp[i][k] * r[k][j]).sum();
                }
            }
        }
        [a[0][0], a[1][1], a[2][2]]
    }

    #[test]
    fn realized_covariances_positive_definite() {
        let ws = test_ws();
        let meta = GaussianBlockMeta::initial(&ws, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let raw: Vec<f64> = (0..meta.raw_len())
            .map(|_| rng.gen_range(-2.0..2.0))
            .collect();
        let (set, _) = realize_gaussians(&raw, &meta, &ws);
        for item in set.items.iter().step_by(37) {
            let eig = sym3_eigenvalues(item.prim.covariance());
            assert!(eig.iter().all(|&l| l > 0.0), "eigenvalues {:?}", eig);
            // Centers stay within the offset budget of the voxel center.
            let c = ws.fine_voxel_center(item.voxel);
            let d: f64 = (0..3)
                .map(|a| (item.prim.center[a] - c[a]).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(d <= OFFSET_RANGE_FACTOR * ws.voxel_size() / 2.0 * 3f64.sqrt() + 1e-12);
        }
    }

    #[test]
    fn refinement_mask_examples() {
        let ws = test_ws();
        // all outside -> empty
        let m = refinement_mask(&[[-1.0, 0.0, 0.0], [0.0, 0.9, 0.2]], &ws);
        assert_eq!(m.marked_count(), 0);
        // one keypoint at a voxel center
        let target = ws.fine_flat(3, 7, 2);
        let m = refinement_mask(&[ws.fine_voxel_center(target)], &ws);
        assert_eq!(m.marked_count(), 1);
        assert!(m.is_marked(target));
        // max-face exclusion (half-open)
        let m = refinement_mask(&[[0.8, 0.4, 0.2]], &ws);
        assert_eq!(m.marked_count(), 0);
    }

    #[test]
    fn refinement_mask_matches_bruteforce_and_ignores_order() {
        let ws = test_ws();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let mut pts: Vec<[f64; 3]> = (0..8)
                .map(|_| {
                    [
                        rng.gen_range(-0.2..1.0),
                        rng.gen_range(-0.2..1.0),
                        rng.gen_range(-0.2..0.6),
                    ]
                })
                .collect();
            let m = refinement_mask(&pts, &ws);
            for v in 0..ws.fine_voxel_count() {
                let (ix, iy, iz) = ws.fine_coords(v);
                let lo = [
                    ws.min()[0] + ix as f64 * ws.voxel_size(),
                    ws.min()[1] + iy as f64 * ws.voxel_size(),
                    ws.min()[2] + iz as f64 * ws.voxel_size(),
                ];
                let hit = pts.iter().any(|p| {
                    (0..3).all(|a| p[a] >= lo[a] && p[a] < lo[a] + ws.voxel_size())
                        && ws.contains(*p)
                });
                assert_eq!(m.is_marked(v), hit, "voxel {}", v);
            }
            let before = m.marked_indices();
            pts.reverse();
            let dup = [&pts[..], &pts[..]].concat();
            assert_eq!(refinement_mask(&dup, &ws).marked_indices(), before);
        }
    }

    #[test]
    fn refine_counts_and_union() {
        let ws = test_ws();
        let g = GraphRef::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c_feat = 5;
        let n_fine = ws.fine_voxel_count();
        let volume = g.constant(
            (0..n_fine * c_feat)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect(),
            &[n_fine, c_feat],
        );
        let params = RefineHeadParams {
            w1: g.constant(
                (0..c_feat * c_feat)
                    .map(|_| rng.gen_range(-0.3..0.3))
                    .collect(),
                &[c_feat, c_feat],
            ),
            b1: g.constant(vec![0.0; c_feat], &[c_feat]),
            w2: g.constant(
                (0..c_feat * 64 * RAW_PER_GAUSSIAN)
                    .map(|_| rng.gen_range(-0.1..0.1))
                    .collect(),
                &[c_feat, 64 * RAW_PER_GAUSSIAN],
            ),
            b2: g.constant(vec![0.0; 64 * RAW_PER_GAUSSIAN], &[64 * RAW_PER_GAUSSIAN]),
        };
        // empty mask -> no refined set
        assert!(refine_gaussians_raw(&volume, &[], &params)
            .unwrap()
            .is_none());

        let marked = vec![3usize, 100, 801];
        let raw = refine_gaussians_raw(&volume, &marked, &params)
            .unwrap()
            .unwrap();
        assert_eq!(raw.shape(), vec![3, 64 * RAW_PER_GAUSSIAN]);
        let meta = GaussianBlockMeta::refined(&ws, marked, 64);
        let (refined, _) = realize_gaussians(&raw.value(), &meta, &ws);
        assert_eq!(refined.len(), 64 * 3);

        let init_meta = GaussianBlockMeta::initial(&ws, 2);
        let (init, _) = realize_gaussians(&vec![0.0; init_meta.raw_len()], &init_meta, &ws);
        let n_init = init.len();
        let total = union_gaussians(init, refined);
        assert_eq!(total.len(), n_init + 64 * 3);
        assert_eq!(total.count_tag(Provenance::Initial), n_init);
        assert_eq!(total.count_tag(Provenance::Refined), 64 * 3);
    }

    #[test]
    fn union_with_empty_refined_is_identity() {
        let ws = test_ws();
        let meta = GaussianBlockMeta::initial(&ws, 1);
        let (init, _) = realize_gaussians(&vec![0.1; meta.raw_len()], &meta, &ws);
        let n = init.len();
        let total = union_gaussians(init, GaussianSet::default());
        assert_eq!(total.len(), n);
    }
}
