//! Finite-difference verification entry points, shared by the CLI and the
//! acceptance suite. Central differences with step 1e-5 at f64.
//!
//! Pass rule (both scopes): relative error `|a - n| / max(|a|, |n|)` under
//! the scope tolerance wherever the gradient is meaningfully sized; where
//! both sides are below 1e-6 the comparison switches to an absolute bound,
//! since the relative quotient of two near-zero estimates is noise.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::env::generate_episode;
use crate::error::Result;
use crate::geometry::{normalize_quat, GaussianPrimitive, GaussianSet, Provenance, TaggedGaussian};
use crate::model::{draw_noise, extract_window, Model, Toggles};
use crate::policy::{build_block_mask, trunk_forward, BlockMaskedSequence};
use crate::render::{
    masked_l1, render_depth, render_depth_backward, CameraModel, RenderOptions, WorkspaceMask,
};
use crate::tensor::GraphRef;

pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub scope: &'static str,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn log_line(&self) -> String {
        format!(
            "gradcheck scope={} checked={} max_rel_err={:.3e} tolerance={:.1e} worst={} passed={}",
            self.scope, self.checked, self.max_rel_err, self.tolerance, self.worst, self.passed
        )
    }
}

struct Accumulator {
    scope: &'static str,
    tol: f64,
    abs_floor: f64,
    checked: usize,
    max_rel: f64,
    worst: String,
    passed: bool,
}

impl Accumulator {
    fn new(scope: &'static str, tol: f64, abs_floor: f64) -> Self {
        Accumulator {
            scope,
            tol,
            abs_floor,
            checked: 0,
            max_rel: 0.0,
            worst: String::new(),
            passed: true,
        }
    }

    fn push(&mut self, label: &str, analytic: f64, numeric: f64) {
        self.checked += 1;
        let err = (analytic - numeric).abs();
        let denom = analytic.abs().max(numeric.abs());
        if denom < 1e-6 {
            if err > self.abs_floor {
                self.passed = false;
                self.worst = format!("{label} (abs err {err:.3e})");
            }
            return;
        }
        let rel = err / denom;
        if rel > self.max_rel {
            self.max_rel = rel;
            self.worst = format!("{label} ({analytic:.6e} vs {numeric:.6e})");
        }
        if rel > self.tol {
            self.passed = false;
        }
    }

    fn finish(self) -> GradCheckReport {
        GradCheckReport {
            scope: self.scope,
            checked: self.checked,
            max_rel_err: self.max_rel,
            worst: self.worst,
            tolerance: self.tol,
            passed: self.passed,
        }
    }
}

fn random_scene(rng: &mut ChaCha8Rng, n: usize) -> GaussianSet<f64> {
    let items = (0..n)
        .map(|i| {
            let q = normalize_quat([
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ]);
            TaggedGaussian {
                prim: GaussianPrimitive {
                    center: [
                        rng.gen_range(-0.25..0.25),
                        rng.gen_range(-0.25..0.25),
                        rng.gen_range(0.8..1.8),
                    ],
                    opacity: rng.gen_range(0.15..0.85),
                    log_scales: [
                        rng.gen_range(-3.2..-2.2),
                        rng.gen_range(-3.2..-2.2),
                        rng.gen_range(-3.2..-2.2),
                    ],
                    quat: q,
                },
                tag: Provenance::Initial,
                voxel: i,
                slot: 0,
            }
        })
        .collect();
    GaussianSet { items }
}

/// Analytic gradients of the masked L1 depth loss against central finite
/// differences over every natural parameter of every Gaussian (<= 8
/// primitives, 16x16 image). Runs with truncation disabled: support cutoffs
/// make the map piecewise and are validated by the oracle-equivalence suite
/// instead.
pub fn gradcheck_renderer(seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cam = CameraModel::new(
        14.0,
        14.0,
        8.5,
        8.5,
        [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        [0.0; 3],
        16,
        16,
    )
    .unwrap();
    let opts = RenderOptions::smooth();
    let set = random_scene(&mut rng, 8);
    let gt_set = random_scene(&mut rng, 6);
    let (gt, _) = render_depth(&gt_set, &cam, &opts);
    let mask = WorkspaceMask {
        width: cam.width,
        height: cam.height,
        data: vec![true; cam.pixels()],
        valid_count: cam.pixels(),
    };

    let loss_of = |s: &GaussianSet<f64>| -> f64 {
        let (pred, _) = render_depth(s, &cam, &opts);
        let (sum, count) = masked_l1(&pred.data, &gt.data, &mask);
        sum / count as f64
    };

    // Analytic pass.
    let (pred, ctx) = render_depth(&set, &cam, &opts);
    let upstream: Vec<f64> = pred
        .data
        .iter()
        .zip(&gt.data)
        .map(|(&p, &g)| {
            let d = p - g;
            let sign = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
            sign / mask.valid_count as f64
        })
        .collect();
    let analytic = render_depth_backward(&ctx, &upstream);

    let natural: Vec<[f64; 11]> = set.items.iter().map(|g| g.prim.to_natural()).collect();
    let rebuild = |nat: &[[f64; 11]]| -> GaussianSet<f64> {
        GaussianSet {
            items: nat
                .iter()
                .zip(&set.items)
                .map(|(v, item)| TaggedGaussian {
                    prim: GaussianPrimitive::from_natural(v),
                    tag: item.tag,
                    voxel: item.voxel,
                    slot: item.slot,
                })
                .collect(),
        }
    };

    let mut acc = Accumulator::new("renderer", 1e-3, 1e-8);
    for gi in 0..set.items.len() {
        for p in 0..11 {
            let mut up = natural.to_vec();
            up[gi][p] += FD_STEP;
            let mut dn = natural.to_vec();
            dn[gi][p] -= FD_STEP;
            let numeric = (loss_of(&rebuild(&up)) - loss_of(&rebuild(&dn))) / (2.0 * FD_STEP);
            acc.push(&format!("gaussian{gi}.p{p}"), analytic[gi][p], numeric);
        }
    }
    acc.finish()
}

/// Finite differences over every trunk parameter of a one-layer toy trunk.
pub fn gradcheck_trunk(seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = 12;
    let sizes = [3usize, 2, 2, 1, 2];
    let t: usize = sizes.iter().sum();
    let x: Vec<f64> = (0..t * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let target: Vec<f64> = (0..t * c).map(|_| rng.gen_range(-1.0..1.0)).collect();

    // Parameter vector: flattened in a fixed order.
    let layout: Vec<(&str, Vec<usize>, f64)> = vec![
        ("ln1.g", vec![c], 1.0),
        ("ln1.b", vec![c], 0.0),
        ("ln1a.g", vec![c], 1.0),
        ("ln1a.b", vec![c], 0.0),
        ("wq", vec![c, c], f64::NAN),
        ("bq", vec![c], 0.0),
        ("wk", vec![c, c], f64::NAN),
        ("bk", vec![c], 0.0),
        ("wv", vec![c, c], f64::NAN),
        ("bv", vec![c], 0.0),
        ("wo", vec![c, c], f64::NAN),
        ("bo", vec![c], 0.0),
        ("ln2.g", vec![c], 1.0),
        ("ln2.b", vec![c], 0.0),
        ("ln2a.g", vec![c], 1.0),
        ("ln2a.b", vec![c], 0.0),
        ("mlp.w1", vec![c, 2 * c], f64::NAN),
        ("mlp.b1", vec![2 * c], 0.0),
        ("mlp.w2", vec![2 * c, c], f64::NAN),
        ("mlp.b2", vec![c], 0.0),
        ("final.g", vec![c], 1.0),
        ("final.b", vec![c], 0.0),
        ("finala.g", vec![c], 1.0),
        ("finala.b", vec![c], 0.0),
    ];
    let mut values: Vec<Vec<f64>> = layout
        .iter()
        .map(|(_, shape, fill)| {
            let n: usize = shape.iter().product();
            (0..n)
                .map(|_| {
                    if fill.is_nan() {
                        rng.gen_range(-0.4..0.4)
                    } else {
                        *fill
                    }
                })
                .collect()
        })
        .collect();

    let eval = |values: &[Vec<f64>], want_grads: bool| -> (f64, Option<Vec<Vec<f64>>>) {
        let g = GraphRef::<f64>::new();
        let leaves: Vec<_> = layout
            .iter()
            .zip(values)
            .map(|((_, shape, _), data)| g.leaf(data.clone(), shape, true))
            .collect();
        let layer = crate::policy::TrunkLayerParams {
            ln1_g: leaves[0].clone(),
            ln1_b: leaves[1].clone(),
            ln1_act_g: leaves[2].clone(),
            ln1_act_b: leaves[3].clone(),
            wq: leaves[4].clone(),
            bq: leaves[5].clone(),
            wk: leaves[6].clone(),
            bk: leaves[7].clone(),
            wv: leaves[8].clone(),
            bv: leaves[9].clone(),
            wo: leaves[10].clone(),
            bo: leaves[11].clone(),
            ln2_g: leaves[12].clone(),
            ln2_b: leaves[13].clone(),
            ln2_act_g: leaves[14].clone(),
            ln2_act_b: leaves[15].clone(),
            mlp_w1: leaves[16].clone(),
            mlp_b1: leaves[17].clone(),
            mlp_w2: leaves[18].clone(),
            mlp_b2: leaves[19].clone(),
        };
        let trunk = crate::policy::TrunkParams {
            layers: vec![layer],
            final_g: leaves[20].clone(),
            final_b: leaves[21].clone(),
            final_act_g: leaves[22].clone(),
            final_act_b: leaves[23].clone(),
            heads: 2,
        };
        let seq = BlockMaskedSequence {
            tokens: g.constant(x.clone(), &[t, c]),
            sizes,
        };
        let mask = build_block_mask(&g, &sizes).unwrap();
        let out = trunk_forward(&seq, &mask, &trunk).unwrap();
        let tgt = g.constant(target.clone(), &[t, c]);
        let loss = out.squared_err(&tgt).unwrap().mean_all();
        let value = loss.item();
        if want_grads {
            loss.backward().unwrap();
            let grads = leaves
                .iter()
                .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
                .collect();
            (value, Some(grads))
        } else {
            (value, None)
        }
    };

    let (_, grads) = eval(&values, true);
    let grads = grads.unwrap();
    let mut acc = Accumulator::new("trunk", 1e-4, 1e-9);
    for (pi, (name, _, _)) in layout.iter().enumerate() {
        for idx in 0..values[pi].len() {
            let orig = values[pi][idx];
            values[pi][idx] = orig + FD_STEP;
            let (up, _) = eval(&values, false);
            values[pi][idx] = orig - FD_STEP;
            let (dn, _) = eval(&values, false);
            values[pi][idx] = orig;
            let numeric = (up - dn) / (2.0 * FD_STEP);
            acc.push(&format!("{name}[{idx}]"), grads[pi][idx], numeric);
        }
    }
    acc.finish()
}

/// End-to-end: the tiny configuration's total training loss against finite
/// differences over `n_params` randomly chosen parameters. Rendering runs
/// with truncation disabled so the loss is differentiable everywhere.
pub fn gradcheck_full(n_params: usize, seed: u64) -> Result<GradCheckReport> {
    let cfg = RunConfig::tiny();
    let mut model = Model::<f64>::new(cfg.clone())?;
    model.render_opts = RenderOptions::smooth();
    let env = cfg.env_spec()?;
    let ep = generate_episode(&env, 0, seed)?;
    let window = extract_window(&ep, 3, &cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let noise = draw_noise::<f64>(&mut rng, cfg.horizon);
    let s = 0.37;

    let eval = |model: &Model<f64>, want_grads: bool| -> Result<(f64, Option<crate::model::GradMap<f64>>)> {
        let g = GraphRef::<f64>::new();
        let bound = model.store.bind(&g, want_grads);
        let w = model.bind_weights(&bound);
        let fwd = model.forward_window(&g, &w, &window, Toggles::default(), &noise, s)?;
        let value = fwd.total.item();
        if want_grads {
            fwd.total.backward()?;
            Ok((value, Some(bound.collect_grads())))
        } else {
            Ok((value, None))
        }
    };

    let (_, grads) = eval(&model, true)?;
    let grads = grads.unwrap();

    // Sample parameter coordinates uniformly over all values.
    let names: Vec<(String, usize)> = model
        .store
        .iter()
        .map(|(n, p)| (n.to_string(), p.data.len()))
        .collect();
    let total: usize = names.iter().map(|(_, l)| l).sum();
    let mut picks = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let mut flat = rng.gen_range(0..total);
        for (name, len) in &names {
            if flat < *len {
                picks.push((name.clone(), flat));
                break;
            }
            flat -= len;
        }
    }

    let mut acc = Accumulator::new("full", 1e-4, 1e-7);
    for (name, idx) in picks {
        let orig = model.store.get(&name).data[idx];
        model.store.get_mut(&name).data[idx] = orig + FD_STEP;
        let (up, _) = eval(&model, false)?;
        model.store.get_mut(&name).data[idx] = orig - FD_STEP;
        let (dn, _) = eval(&model, false)?;
        model.store.get_mut(&name).data[idx] = orig;
        let numeric = (up - dn) / (2.0 * FD_STEP);
        let analytic = grads.get(&name).map(|g| g[idx]).unwrap_or(0.0);
        acc.push(&format!("{name}[{idx}]"), analytic, numeric);
    }
    Ok(acc.finish())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renderer_gradcheck_passes() {
        let report = gradcheck_renderer(0);
        assert!(report.passed, "{}", report.log_line());
        assert_eq!(report.checked, 8 * 11);
    }

    #[test]
    fn trunk_gradcheck_passes() {
        let report = gradcheck_trunk(0);
        assert!(report.passed, "{}", report.log_line());
        assert!(report.checked > 500);
    }

    #[test]
    fn full_gradcheck_small_sample_passes() {
        // The acceptance suite runs the full 100-parameter version.
        let report = gradcheck_full(20, 1).unwrap();
        assert!(report.passed, "{}", report.log_line());
        assert_eq!(report.checked, 20);
    }
}
