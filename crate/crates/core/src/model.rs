//! The assembled model: parameter registry, the joint training forward
//! (action + track + depth losses through one graph), and the cached
//! inference path that never touches the geometry decoders.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::RunConfig;
use crate::encoding::{SpatialEncoding, TemporalEncoding};
use crate::env::{EpisodeRecord, STATE_DIM};
use crate::error::{Error, Result};
use crate::geometry::{
    assemble_spatial_queries, gaussian_head_raw, realize_gaussians, refine_gaussians_raw,
    refinement_mask, shift_temporal, union_gaussians, voxel_decode, GaussianBlockMeta,
    GaussianHeadParams, PointwiseMode, RefineHeadParams, VoxelDecoderParams, WorkspaceSpec,
};
use crate::params::{BoundParams, ParamStore};
use crate::policy::{
    self, assemble_sequence, build_block_mask, build_kv_cache, embed_action_tokens, embed_context,
    trunk_action_forward, trunk_forward, ActionExpertParams, BlockMaskedSequence, ContextInputs,
    EmbedderParams, TrunkLayerParams, TrunkParams, ACTION_DIM,
};
use crate::render::{
    depth_loss, render_on_tape, workspace_mask, CameraModel, DepthMap, RealizedPack,
    RenderOptions,
};
use crate::scalar::{cast_slice, Scalar};
use crate::tensor::{GraphRef, Tensor};
use crate::tracks::{
    decode_future_tracks, encode_history, track_loss, KeypointHistory, TrackDecoderParams,
    TrackEncoderParams,
};

/// Which training pathways are active. `future_track` off forces
/// `refinement` off because the mask needs predicted keypoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Toggles {
    pub history_track: bool,
    pub future_track: bool,
    pub depth: bool,
    pub refinement: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles {
            history_track: true,
            future_track: true,
            depth: true,
            refinement: true,
        }
    }
}

impl Toggles {
    /// Apply the dependency rule; the flag reports whether refinement was
    /// forced off so the harness can log it.
    pub fn effective(mut self) -> (Self, bool) {
        let forced = self.refinement && !self.future_track;
        if forced {
            self.refinement = false;
        }
        (self, forced)
    }
}

/// Everything the policy sees at one control step.
#[derive(Clone, Debug)]
pub struct Observation {
    pub task_id: usize,
    /// Current depth image per camera, flattened.
    pub images: Vec<Vec<f64>>,
    pub state: Vec<f64>,
    /// `[K, history_window, 3]`, left-padded.
    pub history: Vec<f64>,
    pub history_valid_from: usize,
}

/// One training sample: an observation plus its supervision targets.
#[derive(Clone, Debug)]
pub struct TrainWindow {
    pub obs: Observation,
    /// `[(H+1) * K, 3]` ground-truth keypoints from the window start.
    pub gt_tracks: Vec<f64>,
    /// Ground-truth depth maps indexed `tau * cameras + cam`.
    pub gt_depths: Vec<Vec<f64>>,
    /// `[H, 7]` demonstrated action chunk.
    pub actions: Vec<f64>,
}

/// Cut a training window out of an episode at start step `t`
/// (`1 <= t <= steps - 1 - horizon`).
pub fn extract_window(ep: &EpisodeRecord, t: usize, cfg: &RunConfig) -> TrainWindow {
    let h = cfg.horizon;
    let k = cfg.keypoints;
    assert!(t >= 1 && t + h < ep.steps, "window start {} out of range", t);
    assert_eq!(ep.k, k, "episode keypoint count mismatch");

    let l_max = cfg.history_window;
    let avail = t.min(l_max);
    let valid_from = l_max - avail;
    let mut history = vec![0.0f64; k * l_max * 3];
    for ki in 0..k {
        for j in 0..avail {
            let step = t - avail + j;
            let p = ep.keypoint(step, ki);
            let slot = valid_from + j;
            history[(ki * l_max + slot) * 3..(ki * l_max + slot) * 3 + 3].copy_from_slice(&p);
        }
    }

    let images = (0..ep.cameras.len())
        .map(|c| ep.depth_image(t, c).to_vec())
        .collect();

    let mut gt_tracks = Vec::with_capacity((h + 1) * k * 3);
    for tau in 0..=h {
        for ki in 0..k {
            gt_tracks.extend_from_slice(&ep.keypoint(t + tau, ki));
        }
    }

    let mut gt_depths = Vec::with_capacity((h + 1) * ep.cameras.len());
    for tau in 0..=h {
        for c in 0..ep.cameras.len() {
            gt_depths.push(ep.depth_image(t + tau, c).to_vec());
        }
    }

    TrainWindow {
        obs: Observation {
            task_id: ep.task_id,
            images,
            state: ep.state(t).to_vec(),
            history,
            history_valid_from: valid_from,
        },
        gt_tracks,
        gt_depths,
        actions: ep.action_chunk(t, h).to_vec(),
    }
}

/// Bound per-module weight views for one graph.
pub struct Weights<S: Scalar> {
    pub embedder: EmbedderParams<S>,
    pub track_enc: TrackEncoderParams<S>,
    pub track_dec: TrackDecoderParams<S>,
    pub trunk: TrunkParams<S>,
    pub expert: ActionExpertParams<S>,
    pub decoder: VoxelDecoderParams<S>,
    pub head: GaussianHeadParams<S>,
    pub refine: RefineHeadParams<S>,
    pub q_init: Tensor<S>,
}

pub struct Model<S: Scalar> {
    pub cfg: RunConfig,
    pub ws: WorkspaceSpec,
    pub cameras: Vec<CameraModel>,
    pub pe_time: TemporalEncoding<S>,
    pub pe_spatial: SpatialEncoding<S>,
    pub store: ParamStore<S>,
    pub render_opts: RenderOptions,
}

/// Scalar loss values of one window forward, plus structural diagnostics.
pub struct WindowForward<S: Scalar> {
    pub total: Tensor<S>,
    pub action_loss: f64,
    pub track_loss: f64,
    pub depth_loss: f64,
    pub marked_voxels: usize,
    pub gaussians_initial: usize,
    pub gaussians_total: usize,
    pub depth_warned: bool,
}

impl<S: Scalar> Model<S> {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let ws = cfg.workspace()?;
        let env = cfg.env_spec()?;
        let c = cfg.embed_dim;
        let pe_time = TemporalEncoding::new(cfg.horizon, c)?;
        let pe_spatial = SpatialEncoding::equal_split(ws.coarse_extents(), c)?;

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e3779b97f4a7c15) ^ 0x517c_c1b_727_220a95);
        let mut store = ParamStore::new();
        register_params(&mut store, &cfg, &ws, &mut rng);

        Ok(Model {
            cfg,
            ws,
            cameras: env.cameras,
            pe_time,
            pe_spatial,
            store,
            render_opts: RenderOptions::default(),
        })
    }

    pub fn bind_weights(&self, bound: &BoundParams<S>) -> Weights<S> {
        let layers = (0..self.cfg.layers)
            .map(|i| {
                let p = |suffix: &str| bound.get(&format!("trunk.l{:02}.{}", i, suffix));
                TrunkLayerParams {
                    ln1_g: p("ln1.g"),
                    ln1_b: p("ln1.b"),
                    ln1_act_g: p("ln1a.g"),
                    ln1_act_b: p("ln1a.b"),
                    wq: p("attn.wq"),
                    bq: p("attn.bq"),
                    wk: p("attn.wk"),
                    bk: p("attn.bk"),
                    wv: p("attn.wv"),
                    bv: p("attn.bv"),
                    wo: p("attn.wo"),
                    bo: p("attn.bo"),
                    ln2_g: p("ln2.g"),
                    ln2_b: p("ln2.b"),
                    ln2_act_g: p("ln2a.g"),
                    ln2_act_b: p("ln2a.b"),
                    mlp_w1: p("mlp.w1"),
                    mlp_b1: p("mlp.b1"),
                    mlp_w2: p("mlp.w2"),
                    mlp_b2: p("mlp.b2"),
                }
            })
            .collect();
        Weights {
            embedder: EmbedderParams {
                instr_table: bound.get("embed.instr"),
                patch_w: bound.get("embed.patch.w"),
                patch_b: bound.get("embed.patch.b"),
                state_w: bound.get("embed.state.w"),
                state_b: bound.get("embed.state.b"),
                type_emb: bound.get("embed.type"),
                kp_emb: bound.get("track.kp_emb"),
                fut_query: bound.get("track.fut_query"),
            },
            track_enc: TrackEncoderParams {
                embed_w1: bound.get("track.enc.embed.w1"),
                embed_b1: bound.get("track.enc.embed.b1"),
                embed_w2: bound.get("track.enc.embed.w2"),
                embed_b2: bound.get("track.enc.embed.b2"),
                query: bound.get("track.enc.query"),
                wk: bound.get("track.enc.wk"),
                wv: bound.get("track.enc.wv"),
            },
            track_dec: TrackDecoderParams {
                w1: bound.get("track.dec.w1"),
                b1: bound.get("track.dec.b1"),
                w2: bound.get("track.dec.w2"),
                b2: bound.get("track.dec.b2"),
            },
            trunk: TrunkParams {
                layers,
                final_g: bound.get("trunk.final.g"),
                final_b: bound.get("trunk.final.b"),
                final_act_g: bound.get("trunk.finala.g"),
                final_act_b: bound.get("trunk.finala.b"),
                heads: self.cfg.heads,
            },
            expert: ActionExpertParams {
                w_in: bound.get("act.w_in"),
                b_in: bound.get("act.b_in"),
                w_out: bound.get("act.w_out"),
                b_out: bound.get("act.b_out"),
            },
            decoder: VoxelDecoderParams {
                up1: bound.get("dec.up1.w"),
                mlp1_w1: bound.get("dec.mlp1.w1"),
                mlp1_b1: bound.get("dec.mlp1.b1"),
                mlp1_w2: bound.get("dec.mlp1.w2"),
                mlp1_b2: bound.get("dec.mlp1.b2"),
                up2: bound.get("dec.up2.w"),
                mlp2_w1: bound.get("dec.mlp2.w1"),
                mlp2_b1: bound.get("dec.mlp2.b1"),
                mlp2_w2: bound.get("dec.mlp2.w2"),
                mlp2_b2: bound.get("dec.mlp2.b2"),
            },
            head: GaussianHeadParams {
                w: bound.get("head.w"),
                b: bound.get("head.b"),
            },
            refine: RefineHeadParams {
                w1: bound.get("refine.w1"),
                b1: bound.get("refine.b1"),
                w2: bound.get("refine.w2"),
                b2: bound.get("refine.b2"),
            },
            q_init: bound.get("spatial.q_init"),
        }
    }

    /// Context blocks (1)-(4). Returns the sequence and the offset of the
    /// spatial query tokens inside block 3 (after any future track queries).
    pub fn build_context(
        &self,
        g: &GraphRef<S>,
        w: &Weights<S>,
        obs: &Observation,
        toggles: Toggles,
    ) -> Result<BlockMaskedSequence<S>> {
        let history_tokens = if toggles.history_track {
            let hist = KeypointHistory::new(
                cast_slice::<S>(&obs.history),
                self.cfg.keypoints,
                self.cfg.history_window,
                obs.history_valid_from,
            )?;
            Some(encode_history(&hist, &w.track_enc)?)
        } else {
            None
        };
        let spatial_tokens = if toggles.depth {
            Some(assemble_spatial_queries(&w.q_init, &self.pe_spatial)?)
        } else {
            None
        };
        let images: Vec<Vec<S>> = obs.images.iter().map(|im| cast_slice(im)).collect();
        let state: Vec<S> = cast_slice(&obs.state);
        embed_context(
            g,
            &ContextInputs {
                task_id: obs.task_id,
                images: &images,
                image_size: self.cfg.image_size,
                patch: self.cfg.patch_size,
                history_tokens,
                spatial_tokens,
                include_future_queries: toggles.future_track,
                state: &state,
            },
            &w.embedder,
        )
    }

    /// The joint training forward for one window: one trunk pass over all
    /// five blocks, then the track decoder, the geometry pipeline with
    /// per-step rendering, and the flow-matching loss.
    pub fn forward_window(
        &self,
        g: &GraphRef<S>,
        w: &Weights<S>,
        window: &TrainWindow,
        toggles: Toggles,
        noise: &[S],
        s: f64,
    ) -> Result<WindowForward<S>> {
        let (toggles, _) = toggles.effective();
        let cfg = &self.cfg;
        let k = cfg.keypoints;
        let h = cfg.horizon;

        let ctx = self.build_context(g, w, &window.obs, toggles)?;

        // Block 5: noised actions.
        let action_s: Vec<S> = cast_slice(&window.actions);
        assert_eq!(action_s.len(), h * ACTION_DIM);
        assert_eq!(noise.len(), h * ACTION_DIM);
        let x_s = policy::flow_interpolate(noise, &action_s, s);
        let act_tokens = embed_action_tokens(g, &x_s, s, &self.pe_time, &w.expert, &w.embedder.type_emb)?;
        let seq = assemble_sequence(&ctx, &act_tokens)?;
        let mask = build_block_mask(g, &seq.sizes)?;
        let out = trunk_forward(&seq, &mask, &w.trunk)?;

        // Action pathway.
        let act_rows = out.slice(0, ctx.total(), h)?;
        let v_hat = policy::action_readout(&act_rows, &w.expert)?;
        let target = policy::flow_target(noise, &action_s);
        let action_loss = policy::cfm_loss(&v_hat, &target)?;
        action_loss.set_label("loss.action");

        // Track pathway.
        let b3 = ctx.block_offset(2);
        let (track_loss_t, predicted) = if toggles.future_track {
            let e_fut = out.slice(0, b3, k)?;
            let tracks = decode_future_tracks(&e_fut, &self.pe_time, &w.track_dec)?;
            let gt = g.constant(cast_slice(&window.gt_tracks), &[(h + 1) * k, 3]);
            let loss = track_loss(&tracks.tensor, &gt)?;
            loss.set_label("loss.track");
            (loss, Some(tracks))
        } else {
            (g.constant(vec![S::zero()], &[1]), None)
        };

        // Geometry pathway.
        let mut marked_total = 0usize;
        let mut gaussians_initial = 0usize;
        let mut gaussians_total = 0usize;
        let mut depth_warned = false;
        let depth_loss_t = if toggles.depth {
            let spatial_off = b3 + if toggles.future_track { k } else { 0 };
            let n_coarse = self.ws.coarse_voxel_count();
            let spatial_emb = out.slice(0, spatial_off, n_coarse)?;
            let mut triples = Vec::with_capacity((h + 1) * self.cameras.len());
            for tau in 0..=h {
                let shifted = shift_temporal(&spatial_emb, &self.pe_time, tau)?;
                let volume = voxel_decode(&shifted, &self.ws, &w.decoder, PointwiseMode::Normal)?;
                let raw_init = gaussian_head_raw(&volume, &w.head)?;
                let init_meta = GaussianBlockMeta::initial(&self.ws, cfg.n_gaussians);
                let (init_set, init_ctx) = realize_gaussians(&raw_init.value(), &init_meta, &self.ws);

                // Track-guided refinement: detached predicted keypoints.
                let mut raw_inputs = vec![&raw_init];
                let mut block_sizes = vec![init_set.len()];
                let mut contexts = vec![init_ctx];
                let refined_raw;
                let set = if toggles.refinement {
                    let points = predicted
                        .as_ref()
                        .expect("refinement requires future tracks")
                        .positions_at(tau);
                    let rmask = refinement_mask(&points, &self.ws);
                    let marked = rmask.marked_indices();
                    marked_total += marked.len();
                    match refine_gaussians_raw(&volume, &marked, &w.refine)? {
                        Some(raw_ref) => {
                            let meta = GaussianBlockMeta::refined(&self.ws, marked, cfg.n_refine);
                            let (ref_set, ref_ctx) = realize_gaussians(&raw_ref.value(), &meta, &self.ws);
                            refined_raw = raw_ref;
                            raw_inputs.push(&refined_raw);
                            block_sizes.push(ref_set.len());
                            contexts.push(ref_ctx);
                            union_gaussians(init_set, ref_set)
                        }
                        None => init_set,
                    }
                } else {
                    init_set
                };
                gaussians_initial += block_sizes[0];
                gaussians_total += set.len();

                let pack = Rc::new(RealizedPack {
                    set,
                    contexts,
                    block_sizes,
                });
                for (ci, cam) in self.cameras.iter().enumerate() {
                    let pred = render_on_tape(&raw_inputs, &pack, cam, &self.render_opts);
                    let gt_data = cast_slice::<S>(&window.gt_depths[tau * self.cameras.len() + ci]);
                    let gt_map = DepthMap {
                        width: cam.width,
                        height: cam.height,
                        data: gt_data.clone(),
                    };
                    let wmask = workspace_mask(&gt_map, cam, &self.ws);
                    let gt = g.constant(gt_data, &[cam.pixels()]);
                    triples.push((pred, gt, wmask));
                }
            }
            let triple_refs: Vec<_> = triples
                .iter()
                .map(|(p, gt, m)| (p.clone(), gt.clone(), m))
                .collect();
            let (loss, warned) = depth_loss(g, &triple_refs)?;
            depth_warned = warned;
            loss.set_label("loss.depth");
            loss
        } else {
            g.constant(vec![S::zero()], &[1])
        };

        let lambdas = [cfg.lambda_action, cfg.lambda_track, cfg.lambda_depth];
        let total = policy::total_loss(&action_loss, &track_loss_t, &depth_loss_t, lambdas)?;
        total.set_label("loss.total");

        Ok(WindowForward {
            total,
            action_loss: action_loss.item().to_f64_lossy(),
            track_loss: track_loss_t.item().to_f64_lossy(),
            depth_loss: depth_loss_t.item().to_f64_lossy(),
            marked_voxels: marked_total,
            gaussians_initial,
            gaussians_total,
            depth_warned,
        })
    }

    /// Flow-matching inference: embed the context once, cache per-layer
    /// keys/values, then Euler-integrate the learned velocity field with
    /// `steps` uniform steps. The voxel decoder, Gaussian heads, renderer
    /// and track-decoding MLP are not executed. When `exercise_decoders` is
    /// set they are run on the side and their outputs discarded, which must
    /// not change the returned actions.
    pub fn sample_actions(
        &self,
        obs: &Observation,
        toggles: Toggles,
        steps: usize,
        seed: u64,
        exercise_decoders: bool,
    ) -> Result<Vec<f64>> {
        if steps == 0 {
            return Err(Error::InvalidArgument {
                op: "sample_actions",
                msg: "need at least one denoising step".into(),
            });
        }
        let (toggles, _) = toggles.effective();
        let g = GraphRef::<S>::new();
        let bound = self.store.bind(&g, false);
        let w = self.bind_weights(&bound);
        let ctx = self.build_context(&g, &w, obs, toggles)?;

        if exercise_decoders {
            self.run_decoders_discarding(&g, &w, &ctx, toggles)?;
        }

        let cache = build_kv_cache(&ctx, &w.trunk)?;

        let h = self.cfg.horizon;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise: Vec<S> = (0..h * ACTION_DIM)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                S::from_f64(z)
            })
            .collect();

        let out = policy::euler_sample(noise, steps, |x, s| {
            let act = embed_action_tokens(&g, x, s, &self.pe_time, &w.expert, &w.embedder.type_emb)
                .expect("action embedding");
            let trunk_out = trunk_action_forward(&act, &cache, &w.trunk).expect("cached forward");
            policy::action_readout(&trunk_out, &w.expert)
                .expect("readout")
                .value()
        });
        Ok(out.iter().map(|v| v.to_f64_lossy()).collect())
    }

    /// Decode and splat the predicted workspace geometry for one future step
    /// as seen by one camera (the visualization path behind `render-depth`).
    pub fn render_predicted_depth(
        &self,
        obs: &Observation,
        toggles: Toggles,
        tau: usize,
        camera: usize,
    ) -> Result<DepthMap<S>> {
        let (toggles, _) = toggles.effective();
        if !toggles.depth {
            return Err(Error::InvalidArgument {
                op: "render_predicted_depth",
                msg: "depth pathway is disabled".into(),
            });
        }
        let cam = self.cameras.get(camera).ok_or_else(|| Error::InvalidArgument {
            op: "render_predicted_depth",
            msg: format!("camera {} of {}", camera, self.cameras.len()),
        })?;
        let g = GraphRef::<S>::new();
        let bound = self.store.bind(&g, false);
        let w = self.bind_weights(&bound);
        let ctx = self.build_context(&g, &w, obs, toggles)?;
        let mask = build_block_mask(&g, &ctx.sizes)?;
        let out = trunk_forward(&ctx, &mask, &w.trunk)?;
        let b3 = ctx.block_offset(2);
        let k = self.cfg.keypoints;
        let predicted = if toggles.future_track {
            let e_fut = out.slice(0, b3, k)?;
            Some(decode_future_tracks(&e_fut, &self.pe_time, &w.track_dec)?)
        } else {
            None
        };
        let spatial_off = b3 + if toggles.future_track { k } else { 0 };
        let spatial_emb = out.slice(0, spatial_off, self.ws.coarse_voxel_count())?;
        let shifted = shift_temporal(&spatial_emb, &self.pe_time, tau)?;
        let volume = voxel_decode(&shifted, &self.ws, &w.decoder, PointwiseMode::Normal)?;
        let raw_init = gaussian_head_raw(&volume, &w.head)?;
        let init_meta = GaussianBlockMeta::initial(&self.ws, self.cfg.n_gaussians);
        let (init_set, _) = realize_gaussians(&raw_init.value(), &init_meta, &self.ws);
        let set = match (&predicted, toggles.refinement) {
            (Some(tracks), true) => {
                let rmask = refinement_mask(&tracks.positions_at(tau), &self.ws);
                match refine_gaussians_raw(&volume, &rmask.marked_indices(), &w.refine)? {
                    Some(raw_ref) => {
                        let meta = GaussianBlockMeta::refined(
                            &self.ws,
                            rmask.marked_indices(),
                            self.cfg.n_refine,
                        );
                        let (ref_set, _) = realize_gaussians(&raw_ref.value(), &meta, &self.ws);
                        union_gaussians(init_set, ref_set)
                    }
                    None => init_set,
                }
            }
            _ => init_set,
        };
        let (depth, _) = crate::render::render_depth(&set, cam, &self.render_opts);
        Ok(depth)
    }

    /// Run the predictive decoders on the context for their side effects
    /// only. Exists to demonstrate they are outside the sampling path.
    fn run_decoders_discarding(
        &self,
        g: &GraphRef<S>,
        w: &Weights<S>,
        ctx: &BlockMaskedSequence<S>,
        toggles: Toggles,
    ) -> Result<()> {
        let mask = build_block_mask(g, &ctx.sizes)?;
        let out = trunk_forward(ctx, &mask, &w.trunk)?;
        let b3 = ctx.block_offset(2);
        let k = self.cfg.keypoints;
        if toggles.future_track {
            let e_fut = out.slice(0, b3, k)?;
            let _ = decode_future_tracks(&e_fut, &self.pe_time, &w.track_dec)?;
        }
        if toggles.depth {
            let spatial_off = b3 + if toggles.future_track { k } else { 0 };
            let spatial_emb = out.slice(0, spatial_off, self.ws.coarse_voxel_count())?;
            let shifted = shift_temporal(&spatial_emb, &self.pe_time, 0)?;
            let volume = voxel_decode(&shifted, &self.ws, &w.decoder, PointwiseMode::Normal)?;
            let raw = gaussian_head_raw(&volume, &w.head)?;
            let meta = GaussianBlockMeta::initial(&self.ws, self.cfg.n_gaussians);
            let (set, _) = realize_gaussians(&raw.value(), &meta, &self.ws);
            for cam in &self.cameras {
                let _ = crate::render::render_depth(&set, cam, &self.render_opts);
            }
        }
        Ok(())
    }
}

fn register_params<S: Scalar>(
    store: &mut ParamStore<S>,
    cfg: &RunConfig,
    ws: &WorkspaceSpec,
    rng: &mut ChaCha8Rng,
) {
    let c = cfg.embed_dim;
    let k = cfg.keypoints;
    let p2 = cfg.patch_size * cfg.patch_size;
    let fan = |n: usize| 1.0 / (n as f64).sqrt();

    store.register_normal("embed.instr", &[cfg.n_tasks, c], 0.02, rng);
    store.register_normal("embed.patch.w", &[p2, c], fan(p2), rng);
    store.register_const("embed.patch.b", &[c], 0.0);
    store.register_normal("embed.state.w", &[STATE_DIM, c], fan(STATE_DIM), rng);
    store.register_const("embed.state.b", &[c], 0.0);
    store.register_normal("embed.type", &[5, c], 0.02, rng);

    store.register_normal("track.enc.embed.w1", &[3, c], fan(3), rng);
    store.register_const("track.enc.embed.b1", &[c], 0.0);
    store.register_normal("track.enc.embed.w2", &[c, c], fan(c), rng);
    store.register_const("track.enc.embed.b2", &[c], 0.0);
    store.register_normal("track.enc.query", &[1, c], 0.02, rng);
    store.register_normal("track.enc.wk", &[c, c], fan(c), rng);
    store.register_normal("track.enc.wv", &[c, c], fan(c), rng);
    store.register_normal("track.kp_emb", &[k, c], 0.02, rng);
    store.register_normal("track.fut_query", &[k, c], 0.02, rng);
    store.register_normal("track.dec.w1", &[c, c], fan(c), rng);
    store.register_const("track.dec.b1", &[c], 0.0);
    // Small output weights and a center bias: freshly initialized track
    // predictions start at the workspace center, strictly inside the box,
    // so the refinement pathway is exercised from the first step.
    store.register_normal("track.dec.w2", &[c, 3], 0.01, rng);
    let center: Vec<S> = (0..3)
        .map(|a| S::from_f64(0.5 * (ws.min()[a] + ws.max()[a])))
        .collect();
    store.insert("track.dec.b2", center, &[3]);

    store.register_normal("spatial.q_init", &[ws.coarse_voxel_count(), c], 0.02, rng);

    for i in 0..cfg.layers {
        let name = |suffix: &str| format!("trunk.l{:02}.{}", i, suffix);
        store.register_const(&name("ln1.g"), &[c], 1.0);
        store.register_const(&name("ln1.b"), &[c], 0.0);
        store.register_const(&name("ln1a.g"), &[c], 1.0);
        store.register_const(&name("ln1a.b"), &[c], 0.0);
        store.register_normal(&name("attn.wq"), &[c, c], fan(c), rng);
        store.register_const(&name("attn.bq"), &[c], 0.0);
        store.register_normal(&name("attn.wk"), &[c, c], fan(c), rng);
        store.register_const(&name("attn.bk"), &[c], 0.0);
        store.register_normal(&name("attn.wv"), &[c, c], fan(c), rng);
        store.register_const(&name("attn.bv"), &[c], 0.0);
        store.register_normal(&name("attn.wo"), &[c, c], fan(c), rng);
        store.register_const(&name("attn.bo"), &[c], 0.0);
        store.register_const(&name("ln2.g"), &[c], 1.0);
        store.register_const(&name("ln2.b"), &[c], 0.0);
        store.register_const(&name("ln2a.g"), &[c], 1.0);
        store.register_const(&name("ln2a.b"), &[c], 0.0);
        store.register_normal(&name("mlp.w1"), &[c, 4 * c], fan(c), rng);
        store.register_const(&name("mlp.b1"), &[4 * c], 0.0);
        store.register_normal(&name("mlp.w2"), &[4 * c, c], fan(4 * c), rng);
        store.register_const(&name("mlp.b2"), &[c], 0.0);
    }
    store.register_const("trunk.final.g", &[c], 1.0);
    store.register_const("trunk.final.b", &[c], 0.0);
    store.register_const("trunk.finala.g", &[c], 1.0);
    store.register_const("trunk.finala.b", &[c], 0.0);

    store.register_normal("act.w_in", &[ACTION_DIM, c], fan(ACTION_DIM), rng);
    store.register_const("act.b_in", &[c], 0.0);
    store.register_normal("act.w_out", &[c, ACTION_DIM], 0.02, rng);
    store.register_const("act.b_out", &[ACTION_DIM], 0.0);

    let mid = cfg.decoder_mid_channels;
    let cv = cfg.voxel_channels;
    store.register_normal("dec.up1.w", &[c, 8 * mid], fan(c), rng);
    store.register_normal("dec.mlp1.w1", &[mid, mid], fan(mid), rng);
    store.register_const("dec.mlp1.b1", &[mid], 0.0);
    store.register_normal("dec.mlp1.w2", &[mid, mid], fan(mid), rng);
    store.register_const("dec.mlp1.b2", &[mid], 0.0);
    store.register_normal("dec.up2.w", &[mid, 8 * cv], fan(mid), rng);
    store.register_normal("dec.mlp2.w1", &[cv, cv], fan(cv), rng);
    store.register_const("dec.mlp2.b1", &[cv], 0.0);
    store.register_normal("dec.mlp2.w2", &[cv, cv], fan(cv), rng);
    store.register_const("dec.mlp2.b2", &[cv], 0.0);

    let raw_init = cfg.n_gaussians * crate::geometry::RAW_PER_GAUSSIAN;
    store.register_normal("head.w", &[cv, raw_init], 0.01, rng);
    store.register_const("head.b", &[raw_init], 0.0);
    let raw_ref = cfg.n_refine * crate::geometry::RAW_PER_GAUSSIAN;
    store.register_normal("refine.w1", &[cv, cv], fan(cv), rng);
    store.register_const("refine.b1", &[cv], 0.0);
    store.register_normal("refine.w2", &[cv, raw_ref], 0.01, rng);
    store.register_const("refine.b2", &[raw_ref], 0.0);
}

/// Draw the per-window flow-matching noise (standard normal over the chunk).
pub fn draw_noise<S: Scalar>(rng: &mut ChaCha8Rng, horizon: usize) -> Vec<S> {
    (0..horizon * ACTION_DIM)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            S::from_f64(z)
        })
        .collect()
}

/// Per-parameter gradient buffers keyed by name.
pub type GradMap<S> = BTreeMap<String, Vec<S>>;
