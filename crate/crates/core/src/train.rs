//! Training loop, evaluation metrics, and checkpointing.
//!
//! All randomness flows from the config seed through three ChaCha streams
//! (window sampling, flow noise, flow time), so a run is a pure function of
//! (config, dataset). Checkpoints capture parameters, optimizer moments,
//! iteration count and the exact stream positions; a save/load round trip
//! continues training bit-exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::config::{Precision, RunConfig};
use crate::env::EpisodeRecord;
use crate::error::{Error, Result};
use crate::model::{draw_noise, extract_window, Model, Toggles};
use crate::params::AdamW;
use crate::scalar::Scalar;
use crate::tensor::serial;
use crate::tensor::GraphRef;

pub struct TrainState<S: Scalar> {
    pub model: Model<S>,
    pub opt: AdamW<S>,
    pub iter: usize,
    pub toggles: Toggles,
    pub rng_data: ChaCha8Rng,
    pub rng_noise: ChaCha8Rng,
    pub rng_time: ChaCha8Rng,
}

fn seeded_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl<S: Scalar> TrainState<S> {
    pub fn new(cfg: RunConfig, toggles: Toggles) -> Result<Self> {
        let opt = AdamW::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.weight_decay);
        let seed = cfg.seed;
        Ok(TrainState {
            model: Model::new(cfg)?,
            opt,
            iter: 0,
            toggles,
            rng_data: seeded_stream(seed, 1),
            rng_noise: seeded_stream(seed, 2),
            rng_time: seeded_stream(seed, 3),
        })
    }
}

#[derive(Clone, Debug)]
pub struct StepReport {
    pub iter: usize,
    pub total: f64,
    pub action: f64,
    pub track: f64,
    pub depth: f64,
    pub marked_voxels: usize,
    pub gaussians_initial: usize,
    pub gaussians_total: usize,
    pub depth_warned: bool,
}

impl StepReport {
    pub fn log_line(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "iter={} loss_total={:.6e} loss_action={:.6e} loss_track={:.6e} loss_depth={:.6e} \
             gaussians_init={} gaussians_total={} marked_voxels={}",
            self.iter,
            self.total,
            self.action,
            self.track,
            self.depth,
            self.gaussians_initial,
            self.gaussians_total,
            self.marked_voxels
        );
        if self.depth_warned {
            let _ = write!(s, " depth_mask_empty=1");
        }
        s
    }
}

/// Episodes long enough to carry a full (H+1)-step future window.
pub fn usable_episodes<'a>(
    episodes: &'a [EpisodeRecord],
    cfg: &RunConfig,
) -> Vec<&'a EpisodeRecord> {
    episodes
        .iter()
        .filter(|ep| ep.steps >= cfg.horizon + 2 && ep.k == cfg.keypoints)
        .collect()
}

/// One optimizer step over a freshly sampled batch of windows. The whole
/// batch shares one graph and one backward pass.
pub fn train_step<S: Scalar>(
    state: &mut TrainState<S>,
    episodes: &[EpisodeRecord],
) -> Result<StepReport> {
    let cfg = state.model.cfg.clone();
    let pool = usable_episodes(episodes, &cfg);
    if pool.is_empty() {
        return Err(Error::InvalidArgument {
            op: "train_step",
            msg: "no episode is long enough for the configured horizon".into(),
        });
    }

    let mut windows = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let ep = pool[state.rng_data.gen_range(0..pool.len())];
        let t_max = ep.steps - 1 - cfg.horizon;
        let t = state.rng_data.gen_range(1..=t_max);
        windows.push(extract_window(ep, t, &cfg));
    }

    let g = GraphRef::<S>::new();
    let bound = state.model.store.bind(&g, true);
    let weights = state.model.bind_weights(&bound);

    let mut sum = g.constant(vec![S::zero()], &[1]);
    let mut report = StepReport {
        iter: state.iter,
        total: 0.0,
        action: 0.0,
        track: 0.0,
        depth: 0.0,
        marked_voxels: 0,
        gaussians_initial: 0,
        gaussians_total: 0,
        depth_warned: false,
    };
    for window in &windows {
        let noise = draw_noise::<S>(&mut state.rng_noise, cfg.horizon);
        let s: f64 = state.rng_time.gen::<f64>();
        let fwd = state
            .model
            .forward_window(&g, &weights, window, state.toggles, &noise, s)?;
        report.action += fwd.action_loss;
        report.track += fwd.track_loss;
        report.depth += fwd.depth_loss;
        report.marked_voxels += fwd.marked_voxels;
        report.gaussians_initial += fwd.gaussians_initial;
        report.gaussians_total += fwd.gaussians_total;
        report.depth_warned |= fwd.depth_warned;
        sum = sum.add(&fwd.total)?;
    }
    let inv_batch = 1.0 / cfg.batch_size as f64;
    let loss = sum.scale(inv_batch);
    report.action *= inv_batch;
    report.track *= inv_batch;
    report.depth *= inv_batch;
    report.total = loss.item().to_f64_lossy();

    if !report.total.is_finite() {
        let (node, name, shape) = g
            .first_non_finite()
            .unwrap_or((0, "loss".to_string(), vec![1]));
        return Err(Error::NonFinite { name, node, shape });
    }

    loss.backward()?;
    let grads = bound.collect_grads();
    state.opt.step(&mut state.model.store, &grads);
    state.iter += 1;
    report.iter = state.iter;
    Ok(report)
}

/// Run `iterations` steps, logging `key=value` lines to the sink every
/// `log_every` steps (and always for the final one).
pub fn run_training<S: Scalar>(
    state: &mut TrainState<S>,
    episodes: &[EpisodeRecord],
    iterations: usize,
    mut sink: Option<&mut dyn std::io::Write>,
) -> Result<Vec<StepReport>> {
    let every = state.model.cfg.log_every.max(1);
    let mut reports = Vec::with_capacity(iterations);
    for i in 0..iterations {
        let report = train_step(state, episodes)?;
        if i % every == 0 || i + 1 == iterations {
            if let Some(w) = sink.as_deref_mut() {
                writeln!(w, "{}", report.log_line())?;
            }
        }
        reports.push(report);
    }
    Ok(reports)
}

// ── Evaluation ───────────────────────────────────────────────────────

#[derive(Clone, Debug, Default)]
pub struct EvalReport {
    /// Mean squared 3D keypoint error over steps and keypoints (m^2).
    pub track_mse: f64,
    /// Masked mean absolute depth error (m).
    pub depth_l1: f64,
    /// Open-loop MSE between sampled and demonstrated action chunks.
    pub action_mse: f64,
    /// Mean refined-voxel count per forward.
    pub refined_voxels: f64,
    pub windows: usize,
}

impl EvalReport {
    pub fn log_line(&self) -> String {
        format!(
            "eval_windows={} track_mse={:.6e} depth_l1={:.6e} action_mse={:.6e} refined_voxels={:.2}",
            self.windows, self.track_mse, self.depth_l1, self.action_mse, self.refined_voxels
        )
    }
}

/// Plain elementwise mean squared error (the open-loop action metric).
pub fn action_mse(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64
}

/// Deterministic evaluation over fixed windows of the given episodes.
pub fn evaluate<S: Scalar>(
    model: &Model<S>,
    toggles: Toggles,
    episodes: &[EpisodeRecord],
    seed: u64,
) -> Result<EvalReport> {
    let cfg = model.cfg.clone();
    let pool = usable_episodes(episodes, &cfg);
    if pool.is_empty() {
        return Err(Error::InvalidArgument {
            op: "evaluate",
            msg: "no usable episodes".into(),
        });
    }
    let mut rng = seeded_stream(seed, 7);
    let mut report = EvalReport::default();
    for ep in &pool {
        let t_max = ep.steps - 1 - cfg.horizon;
        for t in [1, (1 + t_max) / 2, t_max] {
            let window = extract_window(ep, t, &cfg);
            let g = GraphRef::<S>::new();
            let bound = model.store.bind(&g, false);
            let weights = model.bind_weights(&bound);
            let noise = draw_noise::<S>(&mut rng, cfg.horizon);
            let fwd = model.forward_window(&g, &weights, &window, toggles, &noise, 0.5)?;
            report.track_mse += fwd.track_loss;
            report.depth_l1 += fwd.depth_loss;
            report.refined_voxels += fwd.marked_voxels as f64;
            let sampled = model.sample_actions(
                &window.obs,
                toggles,
                cfg.denoise_steps,
                seed ^ (t as u64) << 8,
                false,
            )?;
            report.action_mse += action_mse(&sampled, &window.actions);
            report.windows += 1;
        }
    }
    let n = report.windows as f64;
    report.track_mse /= n;
    report.depth_l1 /= n;
    report.action_mse /= n;
    report.refined_voxels /= n;
    Ok(report)
}

// ── Checkpoints ──────────────────────────────────────────────────────

const CKPT_MANIFEST: &str = "checkpoint.manifest";
const CKPT_DATA: &str = "checkpoint.bin";
const CKPT_CONFIG: &str = "config.txt";

/// Manifest (text, name -> shape, plus counters and RNG stream positions)
/// next to one file of concatenated tensor serializations in manifest order.
pub fn save_checkpoint<S: Scalar>(state: &TrainState<S>, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(CKPT_CONFIG), state.model.cfg.to_text())?;

    let mut manifest = String::new();
    let _ = writeln!(manifest, "iteration = {}", state.iter);
    let _ = writeln!(manifest, "opt_steps = {}", state.opt.step_count);
    let _ = writeln!(
        manifest,
        "toggles = {} {} {} {}",
        state.toggles.history_track as u8,
        state.toggles.future_track as u8,
        state.toggles.depth as u8,
        state.toggles.refinement as u8
    );
    let _ = writeln!(manifest, "rng_data_pos = {}", state.rng_data.get_word_pos());
    let _ = writeln!(
        manifest,
        "rng_noise_pos = {}",
        state.rng_noise.get_word_pos()
    );
    let _ = writeln!(manifest, "rng_time_pos = {}", state.rng_time.get_word_pos());

    let mut data = Vec::new();
    let mut emit = |manifest: &mut String, kind: &str, name: &str, values: &[S], shape: &[usize]| {
        let dims = shape
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x");
        let _ = writeln!(manifest, "tensor = {} {} {}", kind, name, dims);
        serial::write_tensor(&mut data, values, shape)
    };
    for (name, p) in state.model.store.iter() {
        emit(&mut manifest, "param", name, &p.data, &p.shape)?;
    }
    for (name, m) in &state.opt.m {
        emit(&mut manifest, "adam_m", name, m, &[m.len()])?;
    }
    for (name, v) in &state.opt.v {
        emit(&mut manifest, "adam_v", name, v, &[v.len()])?;
    }
    std::fs::write(dir.join(CKPT_MANIFEST), manifest)?;
    std::fs::write(dir.join(CKPT_DATA), data)?;
    Ok(())
}

pub fn checkpoint_precision(dir: &Path) -> Result<Precision> {
    let cfg = RunConfig::parse(&std::fs::read_to_string(dir.join(CKPT_CONFIG))?)?;
    Ok(cfg.precision)
}

pub fn load_checkpoint<S: Scalar>(dir: &Path) -> Result<TrainState<S>> {
    let cfg = RunConfig::parse(&std::fs::read_to_string(dir.join(CKPT_CONFIG))?)?;
    let manifest = std::fs::read_to_string(dir.join(CKPT_MANIFEST))?;
    let mut state = TrainState::<S>::new(cfg, Toggles::default())?;

    let mut tensors: Vec<(String, String)> = Vec::new();
    for line in manifest.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("bad checkpoint line: {line}")))?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "iteration" => state.iter = parse_u64(value)? as usize,
            "opt_steps" => state.opt.step_count = parse_u64(value)? as usize,
            "toggles" => {
                let flags: Vec<&str> = value.split_whitespace().collect();
                if flags.len() != 4 {
                    return Err(Error::Format("toggles needs 4 flags".into()));
                }
                state.toggles = Toggles {
                    history_track: flags[0] == "1",
                    future_track: flags[1] == "1",
                    depth: flags[2] == "1",
                    refinement: flags[3] == "1",
                };
            }
            "rng_data_pos" => state.rng_data.set_word_pos(parse_u128(value)?),
            "rng_noise_pos" => state.rng_noise.set_word_pos(parse_u128(value)?),
            "rng_time_pos" => state.rng_time.set_word_pos(parse_u128(value)?),
            "tensor" => {
                let parts: Vec<&str> = value.split_whitespace().collect();
                if parts.len() != 3 {
                    return Err(Error::Format(format!("bad tensor line: {value}")));
                }
                tensors.push((parts[0].to_string(), parts[1].to_string()));
            }
            other => return Err(Error::Format(format!("unknown checkpoint key {other}"))),
        }
    }

    let data = std::fs::read(dir.join(CKPT_DATA))?;
    let mut cursor = data.as_slice();
    for (kind, name) in tensors {
        let (values, shape) = serial::read_tensor::<S, _>(&mut cursor)?;
        match kind.as_str() {
            "param" => {
                let p = state.model.store.get_mut(&name);
                if p.shape != shape {
                    return Err(Error::Format(format!(
                        "checkpoint shape mismatch for {name}: {:?} vs {:?}",
                        shape, p.shape
                    )));
                }
                p.data = values;
            }
            "adam_m" => {
                state.opt.m.insert(name, values);
            }
            "adam_v" => {
                state.opt.v.insert(name, values);
            }
            other => return Err(Error::Format(format!("unknown tensor kind {other}"))),
        }
    }
    Ok(state)
}

fn parse_u64(v: &str) -> Result<u64> {
    v.parse::<u64>()
        .map_err(|_| Error::Format(format!("bad integer {v}")))
}

fn parse_u128(v: &str) -> Result<u128> {
    v.parse::<u128>()
        .map_err(|_| Error::Format(format!("bad integer {v}")))
}
