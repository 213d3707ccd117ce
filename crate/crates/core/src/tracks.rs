//! Keypoint trajectory machinery: compress motion history into one token
//! per keypoint with a shared learnable query attending over the embedded
//! steps, and decode future-track embeddings into explicit multi-step 3D
//! trajectories supervised by mean squared error.

use crate::encoding::TemporalEncoding;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{GraphRef, Tensor};

/// Fixed-window keypoint motion history. Positions are `[K, L, 3]` row-major
/// with steps ordered oldest to newest; steps before `valid_from` are
/// left-padding and masked out of attention.
#[derive(Clone, Debug)]
pub struct KeypointHistory<S> {
    positions: Vec<S>,
    k: usize,
    len: usize,
    valid_from: usize,
}

impl<S: Scalar> KeypointHistory<S> {
    pub fn new(positions: Vec<S>, k: usize, len: usize, valid_from: usize) -> Result<Self> {
        if k == 0 || len == 0 || positions.len() != k * len * 3 {
            return Err(Error::InvalidArgument {
                op: "keypoint_history",
                msg: format!(
                    "{} values for K={} L={}",
                    positions.len(),
                    k,
                    len
                ),
            });
        }
        if valid_from >= len {
            return Err(Error::InvalidArgument {
                op: "keypoint_history",
                msg: format!("no valid steps: valid_from {} of {}", valid_from, len),
            });
        }
        if positions.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidArgument {
                op: "keypoint_history",
                msg: "non-finite position".into(),
            });
        }
        Ok(KeypointHistory {
            positions,
            k,
            len,
            valid_from,
        })
    }

    pub fn keypoints(&self) -> usize {
        self.k
    }

    pub fn window(&self) -> usize {
        self.len
    }

    pub fn valid_from(&self) -> usize {
        self.valid_from
    }

    pub fn positions(&self) -> &[S] {
        &self.positions
    }
}

/// Weights of the history encoder: a shared two-layer step embedder, one
/// learnable query, and key/value projections.
pub struct TrackEncoderParams<S: Scalar> {
    pub embed_w1: Tensor<S>, // [3, c]
    pub embed_b1: Tensor<S>,
    pub embed_w2: Tensor<S>, // [c, c]
    pub embed_b2: Tensor<S>,
    pub query: Tensor<S>, // [1, c]
    pub wk: Tensor<S>,    // [c, c]
    pub wv: Tensor<S>,    // [c, c]
}

/// Encode every keypoint's history into one token: `[K, c]`.
///
/// Keys and values are projections of the embedded steps; the single shared
/// query attends over valid steps only.
pub fn encode_history<S: Scalar>(
    history: &KeypointHistory<S>,
    params: &TrackEncoderParams<S>,
) -> Result<Tensor<S>> {
    let g = params.query.graph().clone();
    let c = params.query.shape()[1];
    let (k, l) = (history.keypoints(), history.window());

    let steps = g.constant(history.positions().to_vec(), &[k * l, 3]);
    let hidden = steps.matmul(&params.embed_w1)?.add(&params.embed_b1)?.tanh();
    let embedded = hidden.matmul(&params.embed_w2)?.add(&params.embed_b2)?; // [k*l, c]
    let keys = embedded.matmul(&params.wk)?;
    let values = embedded.matmul(&params.wv)?;

    let mut mask_row = vec![S::zero(); l];
    for m in mask_row.iter_mut().take(history.valid_from()) {
        *m = S::neg_infinity();
    }
    let mask = g.constant(mask_row, &[1, l]);
    let scale = 1.0 / (c as f64).sqrt();

    let mut tokens = Vec::with_capacity(k);
    for ki in 0..k {
        let keys_k = keys.slice(0, ki * l, l)?; // [l, c]
        let values_k = values.slice(0, ki * l, l)?;
        let scores = params.query.matmul(&keys_k.t()?)?.scale(scale); // [1, l]
        let attn = scores.softmax_masked(&mask)?;
        tokens.push(attn.matmul(&values_k)?);
    }
    let refs: Vec<&Tensor<S>> = tokens.iter().collect();
    g.concat(&refs, 0)
}

/// Multi-step trajectory decoded from per-keypoint embeddings, kept on the
/// tape for the loss; index 0 of the first axis is the current time.
pub struct PredictedTracks<S: Scalar> {
    /// `[(horizon + 1) * k, 3]`; row `tau * k + ki`.
    pub tensor: Tensor<S>,
    pub horizon: usize,
    pub k: usize,
}

impl<S: Scalar> PredictedTracks<S> {
    /// Detached keypoint positions at one step (used by the refinement mask;
    /// no gradient flows through this copy).
    pub fn positions_at(&self, tau: usize) -> Vec<[f64; 3]> {
        assert!(tau <= self.horizon);
        let v = self.tensor.value();
        (0..self.k)
            .map(|ki| {
                let base = (tau * self.k + ki) * 3;
                [
                    v[base].to_f64_lossy(),
                    v[base + 1].to_f64_lossy(),
                    v[base + 2].to_f64_lossy(),
                ]
            })
            .collect()
    }
}

pub struct TrackDecoderParams<S: Scalar> {
    pub w1: Tensor<S>, // [c, c]
    pub b1: Tensor<S>,
    pub w2: Tensor<S>, // [c, 3]
    pub b2: Tensor<S>,
}

/// Decode per-keypoint embeddings `[K, c]` into positions for steps
/// `0..=horizon` with one shared MLP: `p(k, tau) = MLP(e_k + pe[tau])`.
pub fn decode_future_tracks<S: Scalar>(
    embeddings: &Tensor<S>,
    pe: &TemporalEncoding<S>,
    params: &TrackDecoderParams<S>,
) -> Result<PredictedTracks<S>> {
    let shape = embeddings.shape();
    if shape.len() != 2 || shape[1] != pe.dim() {
        return Err(Error::ShapeMismatch {
            op: "decode_future_tracks",
            lhs: shape,
            rhs: vec![0, pe.dim()],
        });
    }
    let k = shape[0];
    let g = embeddings.graph().clone();
    let mut rows = Vec::with_capacity(pe.rows());
    for tau in 0..pe.rows() {
        let row = g.constant(pe.row(tau).to_vec(), &[pe.dim()]);
        rows.push(embeddings.add(&row)?);
    }
    let refs: Vec<&Tensor<S>> = rows.iter().collect();
    let stacked = g.concat(&refs, 0)?; // [(h+1)*k, c]
    let out = stacked
        .matmul(&params.w1)?
        .add(&params.b1)?
        .tanh()
        .matmul(&params.w2)?
        .add(&params.b2)?;
    Ok(PredictedTracks {
        tensor: out,
        horizon: pe.rows() - 1,
        k,
    })
}

/// Mean squared trajectory error: the squared L2 norm of each 3D error
/// vector, summed over keypoints and steps, divided by `K (H+1)`. The
/// normalizer deliberately excludes the factor 3.
pub fn track_loss<S: Scalar>(pred: &Tensor<S>, gt: &Tensor<S>) -> Result<Tensor<S>> {
    let shape = pred.shape();
    if shape != gt.shape() {
        return Err(Error::ShapeMismatch {
            op: "track_loss",
            lhs: shape,
            rhs: gt.shape(),
        });
    }
    let terms = shape[..shape.len() - 1].iter().product::<usize>();
    Ok(pred.squared_err(gt)?.sum_all().scale(1.0 / terms as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn mk_params(g: &GraphRef<f64>, c: usize, rng: &mut ChaCha8Rng) -> TrackEncoderParams<f64> {
        let mut mk = |rows: usize, cols: usize| {
            g.leaf(
                (0..rows * cols).map(|_| rng.gen_range(-0.5..0.5)).collect(),
                &[rows, cols],
                true,
            )
        };
        TrackEncoderParams {
            embed_w1: mk(3, c),
            embed_b1: mk(1, c).reshape(&[c]).unwrap(),
            embed_w2: mk(c, c),
            embed_b2: mk(1, c).reshape(&[c]).unwrap(),
            query: mk(1, c),
            wk: mk(c, c),
            wv: mk(c, c),
        }
    }

    fn random_history(k: usize, l: usize, valid_from: usize, rng: &mut ChaCha8Rng) -> KeypointHistory<f64> {
        let pos: Vec<f64> = (0..k * l * 3).map(|_| rng.gen_range(-0.5..0.5)).collect();
        KeypointHistory::new(pos, k, l, valid_from).unwrap()
    }

    #[test]
    fn eight_keypoints_give_eight_tokens() {
        let g = GraphRef::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = mk_params(&g, 6, &mut rng);
        let hist = random_history(8, 5, 0, &mut rng);
        let tokens = encode_history(&hist, &params).unwrap();
        assert_eq!(tokens.shape(), vec![8, 6]);
    }

    #[test]
    fn zero_valid_steps_rejected() {
        assert!(KeypointHistory::<f64>::new(vec![0.0; 2 * 4 * 3], 2, 4, 4).is_err());
        assert!(KeypointHistory::<f64>::new(vec![f64::NAN; 12], 1, 4, 0).is_err());
    }

    #[test]
    fn single_valid_step_token_is_value_projection() {
        let g = GraphRef::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = 5;
        let params = mk_params(&g, c, &mut rng);
        let l = 4;
        let hist = random_history(1, l, l - 1, &mut rng); // one valid step
        let tokens = encode_history(&hist, &params).unwrap().value();

        // Independent: embed the last step and push through W_v.
        let step = &hist.positions()[(l - 1) * 3..l * 3];
        let w1 = params.embed_w1.value();
        let b1 = params.embed_b1.value();
        let w2 = params.embed_w2.value();
        let b2 = params.embed_b2.value();
        let wv = params.wv.value();
        let mut h = vec![0.0; c];
        for j in 0..c {
            let mut acc = b1[j];
            for i in 0..3 {
                acc += step[i] * w1[i * c + j];
            }
            h[j] = acc.tanh();
        }
        let mut e = vec![0.0; c];
        for j in 0..c {
            let mut acc = b2[j];
            for i in 0..c {
                acc += h[i] * w2[i * c + j];
            }
            e[j] = acc;
        }
        for j in 0..c {
            let mut acc = 0.0;
            for i in 0..c {
                acc += e[i] * wv[i * c + j];
            }
            assert!((tokens[j] - acc).abs() < 1e-12, "channel {j}");
        }
    }

    /// Re-evaluate the attention formula with plain loops.
    fn attention_oracle(
        hist: &KeypointHistory<f64>,
        params: &TrackEncoderParams<f64>,
    ) -> Vec<f64> {
        let c = params.query.shape()[1];
        let (k, l) = (hist.keypoints(), hist.window());
        let w1 = params.embed_w1.value();
        let b1 = params.embed_b1.value();
        let w2 = params.embed_w2.value();
        let b2 = params.embed_b2.value();
        let wk = params.wk.value();
        let wv = params.wv.value();
        let q = params.query.value();
        let mut out = vec![0.0; k * c];
        for ki in 0..k {
            let mut keys = vec![vec![0.0; c]; l];
            let mut vals = vec![vec![0.0; c]; l];
            for t in 0..l {
                let step = &hist.positions()[(ki * l + t) * 3..(ki * l + t) * 3 + 3];
                let mut h = vec![0.0; c];
                for j in 0..c {
                    let mut acc = b1[j];
                    for i in 0..3 {
                        acc += step[i] * w1[i * c + j];
                    }
                    h[j] = acc.tanh();
                }
                let mut e = vec![0.0; c];
                for j in 0..c {
                    let mut acc = b2[j];
                    for i in 0..c {
                        acc += h[i] * w2[i * c + j];
                    }
                    e[j] = acc;
                }
                for j in 0..c {
                    let (mut ak, mut av) = (0.0, 0.0);
                    for i in 0..c {
                        ak += e[i] * wk[i * c + j];
                        av += e[i] * wv[i * c + j];
                    }
                    keys[t][j] = ak;
                    vals[t][j] = av;
                }
            }
            let mut scores = vec![f64::NEG_INFINITY; l];
            for (t, key) in keys.iter().enumerate().skip(hist.valid_from()) {
                scores[t] = q.iter().zip(key).map(|(a, b)| a * b).sum::<f64>()
                    / (c as f64).sqrt();
            }
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores
                .iter()
                .map(|&s| if s == f64::NEG_INFINITY { 0.0 } else { (s - m).exp() })
                .collect();
            let z: f64 = exps.iter().sum();
            for t in 0..l {
                let w = exps[t] / z;
                for j in 0..c {
                    out[ki * c + j] += w * vals[t][j];
                }
            }
        }
        out
    }

    #[test]
    fn encoder_matches_attention_oracle() {
        let g = GraphRef::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = mk_params(&g, 6, &mut rng);
        for valid_from in [0, 2] {
            let hist = random_history(3, 5, valid_from, &mut rng);
            let got = encode_history(&hist, &params).unwrap().value();
            let want = attention_oracle(&hist, &params);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn encoder_is_permutation_equivariant() {
        let g = GraphRef::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = 6;
        let params = mk_params(&g, c, &mut rng);
        let hist = random_history(4, 5, 1, &mut rng);
        let base = encode_history(&hist, &params).unwrap().value();
        // Swap keypoints 1 and 3.
        let l = hist.window();
        let mut swapped = hist.positions().to_vec();
        for t in 0..l * 3 {
            swapped.swap(l * 3 + t, 3 * l * 3 + t);
        }
        let hist2 = KeypointHistory::new(swapped, 4, l, 1).unwrap();
        let out2 = encode_history(&hist2, &params).unwrap().value();
        for j in 0..c {
            assert_eq!(base[c + j], out2[3 * c + j]);
            assert_eq!(base[3 * c + j], out2[c + j]);
            assert_eq!(base[j], out2[j]);
        }
    }

    fn mk_decoder(g: &GraphRef<f64>, c: usize, rng: &mut ChaCha8Rng, zero: bool) -> TrackDecoderParams<f64> {
        let mut mk = |rows: usize, cols: usize| {
            let data: Vec<f64> = (0..rows * cols)
                .map(|_| if zero { 0.0 } else { rng.gen_range(-0.5..0.5) })
                .collect();
            g.leaf(data, &[rows, cols], true)
        };
        TrackDecoderParams {
            w1: mk(c, c),
            b1: mk(1, c).reshape(&[c]).unwrap(),
            w2: mk(c, 3),
            b2: mk(1, 3).reshape(&[3]).unwrap(),
        }
    }

    #[test]
    fn decode_horizon_50_gives_51_steps() {
        let g = GraphRef::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = 6;
        let pe = TemporalEncoding::new(50, c).unwrap();
        let params = mk_decoder(&g, c, &mut rng, false);
        let e = g.leaf(vec![0.1; 2 * c], &[2, c], true);
        let tracks = decode_future_tracks(&e, &pe, &params).unwrap();
        assert_eq!(tracks.horizon, 50);
        assert_eq!(tracks.tensor.shape(), vec![51 * 2, 3]);
    }

    #[test]
    fn decode_zero_weights_gives_zero_positions() {
        let g = GraphRef::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c = 6;
        let pe = TemporalEncoding::new(4, c).unwrap();
        let params = mk_decoder(&g, c, &mut rng, true);
        let e = g.leaf(vec![0.3; 2 * c], &[2, c], true);
        let tracks = decode_future_tracks(&e, &pe, &params).unwrap();
        assert!(tracks.tensor.value().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_embeddings_give_identical_trajectories() {
        let g = GraphRef::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = 6;
        let pe = TemporalEncoding::new(3, c).unwrap();
        let params = mk_decoder(&g, c, &mut rng, false);
        let row: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut data = row.clone();
        data.extend_from_slice(&row);
        let e = g.leaf(data, &[2, c], true);
        let v = decode_future_tracks(&e, &pe, &params).unwrap().tensor.value();
        for tau in 0..4 {
            for d in 0..3 {
                assert_eq!(v[(tau * 2) * 3 + d], v[(tau * 2 + 1) * 3 + d]);
            }
        }
    }

    #[test]
    fn decode_matches_mlp_oracle() {
        let g = GraphRef::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let c = 6;
        let pe = TemporalEncoding::new(4, c).unwrap();
        let params = mk_decoder(&g, c, &mut rng, false);
        let k = 3;
        let edata: Vec<f64> = (0..k * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let e = g.leaf(edata.clone(), &[k, c], true);
        let got = decode_future_tracks(&e, &pe, &params).unwrap().tensor.value();
        let (w1, b1, w2, b2) = (
            params.w1.value(),
            params.b1.value(),
            params.w2.value(),
            params.b2.value(),
        );
        for tau in 0..5 {
            for ki in 0..k {
                let mut x = vec![0.0; c];
                for j in 0..c {
                    x[j] = edata[ki * c + j] + pe.row(tau)[j];
                }
                let mut h = vec![0.0; c];
                for j in 0..c {
                    let mut acc = b1[j];
                    for i in 0..c {
                        acc += x[i] * w1[i * c + j];
                    }
                    h[j] = acc.tanh();
                }
                for d in 0..3 {
                    let mut acc = b2[d];
                    for i in 0..c {
                        acc += h[i] * w2[i * 3 + d];
                    }
                    let idx = (tau * k + ki) * 3 + d;
                    assert!((got[idx] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn loss_examples_and_gradient() {
        let g = GraphRef::<f64>::new();
        // identity -> 0
        let p = g.leaf(vec![0.5; 6], &[2, 3], true);
        let t = g.constant(vec![0.5; 6], &[2, 3]);
        assert_eq!(track_loss(&p, &t).unwrap().item(), 0.0);

        // K=1, H=0, error (1,0,0) -> 1.0
        let p1 = g.leaf(vec![1.0, 0.0, 0.0], &[1, 3], true);
        let t1 = g.constant(vec![0.0, 0.0, 0.0], &[1, 3]);
        assert_eq!(track_loss(&p1, &t1).unwrap().item(), 1.0);

        // gradient = 2 (pred - gt) / (K (H+1))
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let k = 2;
        let steps = 4; // H + 1
        let pd: Vec<f64> = (0..k * steps * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let td: Vec<f64> = (0..k * steps * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let pt = g.leaf(pd.clone(), &[steps * k, 3], true);
        let tt = g.constant(td.clone(), &[steps * k, 3]);
        let loss = track_loss(&pt, &tt).unwrap();
        // loop oracle
        let mut expect = 0.0;
        for i in 0..pd.len() {
            expect += (pd[i] - td[i]).powi(2);
        }
        expect /= (k * steps) as f64;
        assert!((loss.item() - expect).abs() < 1e-12);
        loss.backward().unwrap();
        let grad = pt.grad().unwrap();
        for i in 0..pd.len() {
            let want = 2.0 * (pd[i] - td[i]) / (k * steps) as f64;
            assert!((grad[i] - want).abs() < 1e-15);
        }

        // shape mismatch rejected
        let bad = g.constant(vec![0.0; 3], &[1, 3]);
        assert!(track_loss(&pt, &bad).is_err());
    }
}
