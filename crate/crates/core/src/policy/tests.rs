use super::*;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn randn(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

fn mk_trunk(
    g: &GraphRef<f64>,
    c: usize,
    layers: usize,
    heads: usize,
    rng: &mut ChaCha8Rng,
) -> TrunkParams<f64> {
    fn mat(g: &GraphRef<f64>, rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
        g.leaf(randn(rng, rows * cols, 0.3), &[rows, cols], true)
    }
    fn vecp(g: &GraphRef<f64>, rng: &mut ChaCha8Rng, n: usize, fill: Option<f64>) -> Tensor<f64> {
        let data = match fill {
            Some(v) => vec![v; n],
            None => randn(rng, n, 0.1),
        };
        g.leaf(data, &[n], true)
    }
    let layer_params: Vec<TrunkLayerParams<f64>> = (0..layers)
        .map(|_| TrunkLayerParams {
            ln1_g: vecp(g, rng, c, Some(1.0)),
            ln1_b: vecp(g, rng, c, Some(0.0)),
            ln1_act_g: vecp(g, rng, c, Some(1.0)),
            ln1_act_b: vecp(g, rng, c, Some(0.0)),
            wq: mat(g, rng, c, c),
            bq: vecp(g, rng, c, None),
            wk: mat(g, rng, c, c),
            bk: vecp(g, rng, c, None),
            wv: mat(g, rng, c, c),
            bv: vecp(g, rng, c, None),
            wo: mat(g, rng, c, c),
            bo: vecp(g, rng, c, None),
            ln2_g: vecp(g, rng, c, Some(1.0)),
            ln2_b: vecp(g, rng, c, Some(0.0)),
            ln2_act_g: vecp(g, rng, c, Some(1.0)),
            ln2_act_b: vecp(g, rng, c, Some(0.0)),
            mlp_w1: mat(g, rng, c, 2 * c),
            mlp_b1: vecp(g, rng, 2 * c, None),
            mlp_w2: mat(g, rng, 2 * c, c),
            mlp_b2: vecp(g, rng, c, None),
        })
        .collect();
    TrunkParams {
        layers: layer_params,
        final_g: vecp(g, rng, c, Some(1.0)),
        final_b: vecp(g, rng, c, Some(0.0)),
        final_act_g: vecp(g, rng, c, Some(1.0)),
        final_act_b: vecp(g, rng, c, Some(0.0)),
        heads,
    }
}

#[test]
fn block_mask_examples() {
    let sizes = [2, 1, 2, 1, 2];
    let mask = block_mask_bool(&sizes).unwrap();
    let t = 8;
    // token 0 (block 0) must not see key 3 (block 2)
    assert!(!mask[0 * t + 3]);
    // same-block pairs see each other both ways
    assert!(mask[0 * t + 1] && mask[1 * t + 0]);
    assert!(mask[3 * t + 4] && mask[4 * t + 3]);
    // brute-force double loop over block indices
    let block_idx = [0, 0, 1, 2, 2, 3, 4, 4];
    for q in 0..t {
        for k in 0..t {
            assert_eq!(mask[q * t + k], block_idx[k] <= block_idx[q]);
        }
    }
}

#[test]
fn block_mask_rejects_empty() {
    assert!(block_mask_bool(&[0, 0, 0, 0, 0]).is_err());
}

#[test]
fn block_mask_tensor_values() {
    let g = GraphRef::<f64>::new();
    let m = build_block_mask(&g, &[1, 0, 1, 0, 0]).unwrap();
    let v = m.value();
    assert_eq!(v[0], 0.0); // (0,0)
    assert_eq!(v[1], f64::NEG_INFINITY); // (0,1): forward block
    assert_eq!(v[2], 0.0); // (1,0)
    assert_eq!(v[3], 0.0); // (1,1)
}

fn mk_embedder(g: &GraphRef<f64>, c: usize, k: usize, rng: &mut ChaCha8Rng) -> EmbedderParams<f64> {
    EmbedderParams {
        instr_table: g.leaf(randn(rng, 3 * c, 0.3), &[3, c], true),
        patch_w: g.leaf(randn(rng, 64 * c, 0.3), &[64, c], true),
        patch_b: g.leaf(randn(rng, c, 0.1), &[c], true),
        state_w: g.leaf(randn(rng, 4 * c, 0.3), &[4, c], true),
        state_b: g.leaf(randn(rng, c, 0.1), &[c], true),
        type_emb: g.leaf(randn(rng, 5 * c, 0.1), &[5, c], true),
        kp_emb: g.leaf(randn(rng, k * c, 0.1), &[k, c], true),
        fut_query: g.leaf(randn(rng, k * c, 0.3), &[k, c], true),
    }
}

#[test]
fn embed_context_partitions_sequence() {
    let g = GraphRef::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (c, k) = (8, 4);
    let params = mk_embedder(&g, c, k, &mut rng);
    let images: Vec<Vec<f64>> = (0..2).map(|_| randn(&mut rng, 32 * 32, 1.0)).collect();
    let history = g.constant(randn(&mut rng, k * c, 1.0), &[k, c]);
    let spatial = g.constant(randn(&mut rng, 8 * c, 1.0), &[8, c]);
    let state = randn(&mut rng, 4, 1.0);
    let inputs = ContextInputs {
        task_id: 1,
        images: &images,
        image_size: 32,
        patch: 8,
        history_tokens: Some(history),
        spatial_tokens: Some(spatial),
        include_future_queries: true,
        state: &state,
    };
    let seq = embed_context(&g, &inputs, &params).unwrap();
    // 1 instruction + 2 views x 16 patches, K history, K + 8 queries, 1 state.
    assert_eq!(seq.sizes, [33, 4, 12, 1, 0]);
    assert_eq!(seq.total(), 50);
    assert_eq!(seq.tokens.shape(), vec![50, c]);

    // Purity: same inputs give bit-identical tokens.
    let seq2 = embed_context(&g, &inputs, &params).unwrap();
    let (a, b) = (seq.tokens.value(), seq2.tokens.value());
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));

    // Unknown task id is rejected.
    let mut bad = ContextInputs { task_id: 7, ..inputs };
    assert!(embed_context(&g, &bad, &params).is_err());
    // Non-divisible patch size is rejected.
    bad.task_id = 0;
    bad.patch = 5;
    assert!(embed_context(&g, &bad, &params).is_err());
}

#[test]
fn singleton_sequence_ignores_query_key_weights() {
    // With one token, the softmax weight is 1 regardless of scores, so the
    // output cannot depend on W_q or W_k.
    let g = GraphRef::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let c = 8;
    let trunk_a = mk_trunk(&g, c, 1, 2, &mut rng);
    let token = randn(&mut rng, c, 1.0);
    let run = |trunk: &TrunkParams<f64>| -> Vec<f64> {
        let seq = BlockMaskedSequence {
            tokens: g.constant(token.clone(), &[1, c]),
            sizes: [1, 0, 0, 0, 0],
        };
        let mask = build_block_mask(&g, &seq.sizes).unwrap();
        trunk_forward(&seq, &mask, trunk).unwrap().value()
    };
    let base = run(&trunk_a);
    // Overwrite wq/wk with different random values.
    let trunk_b = TrunkParams {
        layers: vec![TrunkLayerParams {
            wq: g.leaf(randn(&mut rng, c * c, 0.5), &[c, c], true),
            bq: g.leaf(randn(&mut rng, c, 0.5), &[c], true),
            wk: g.leaf(randn(&mut rng, c * c, 0.5), &[c, c], true),
            bk: g.leaf(randn(&mut rng, c, 0.5), &[c], true),
            ..TrunkLayerParams {
                ln1_g: trunk_a.layers[0].ln1_g.clone(),
                ln1_b: trunk_a.layers[0].ln1_b.clone(),
                ln1_act_g: trunk_a.layers[0].ln1_act_g.clone(),
                ln1_act_b: trunk_a.layers[0].ln1_act_b.clone(),
                wq: trunk_a.layers[0].wq.clone(),
                bq: trunk_a.layers[0].bq.clone(),
                wk: trunk_a.layers[0].wk.clone(),
                bk: trunk_a.layers[0].bk.clone(),
                wv: trunk_a.layers[0].wv.clone(),
                bv: trunk_a.layers[0].bv.clone(),
                wo: trunk_a.layers[0].wo.clone(),
                bo: trunk_a.layers[0].bo.clone(),
                ln2_g: trunk_a.layers[0].ln2_g.clone(),
                ln2_b: trunk_a.layers[0].ln2_b.clone(),
                ln2_act_g: trunk_a.layers[0].ln2_act_g.clone(),
                ln2_act_b: trunk_a.layers[0].ln2_act_b.clone(),
                mlp_w1: trunk_a.layers[0].mlp_w1.clone(),
                mlp_b1: trunk_a.layers[0].mlp_b1.clone(),
                mlp_w2: trunk_a.layers[0].mlp_w2.clone(),
                mlp_b2: trunk_a.layers[0].mlp_b2.clone(),
            }
        }],
        final_g: trunk_a.final_g.clone(),
        final_b: trunk_a.final_b.clone(),
        final_act_g: trunk_a.final_act_g.clone(),
        final_act_b: trunk_a.final_act_b.clone(),
        heads: trunk_a.heads,
    };
    let changed = run(&trunk_b);
    for (x, y) in base.iter().zip(&changed) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn same_block_key_permutation_leaves_other_tokens_unchanged() {
    let g = GraphRef::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let c = 8;
    let trunk = mk_trunk(&g, c, 2, 2, &mut rng);
    let sizes: BlockSizes = [3, 2, 0, 1, 0];
    let t: usize = sizes.iter().sum();
    let tokens = randn(&mut rng, t * c, 1.0);
    let run = |data: Vec<f64>| -> Vec<f64> {
        let seq = BlockMaskedSequence {
            tokens: g.constant(data, &[t, c]),
            sizes,
        };
        let mask = build_block_mask(&g, &sizes).unwrap();
        trunk_forward(&seq, &mask, &trunk).unwrap().value()
    };
    let base = run(tokens.clone());
    // Swap tokens 0 and 2 (both in block 0).
    let mut permuted = tokens.clone();
    for j in 0..c {
        permuted.swap(j, 2 * c + j);
    }
    let out = run(permuted);
    // Tokens outside the swap keep their outputs; swapped rows exchange.
    for row in [1usize, 3, 4, 5] {
        for j in 0..c {
            assert!(
                (base[row * c + j] - out[row * c + j]).abs() < 1e-9,
                "row {row}"
            );
        }
    }
    for j in 0..c {
        assert!((base[j] - out[2 * c + j]).abs() < 1e-9);
        assert!((base[2 * c + j] - out[j]).abs() < 1e-9);
    }
}

#[test]
fn kv_cache_matches_full_forward_bitwise() {
    let g = GraphRef::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let c = 8;
    let trunk = mk_trunk(&g, c, 2, 2, &mut rng);
    let sizes: BlockSizes = [4, 2, 3, 1, 0];
    let ctx_len: usize = sizes.iter().sum();
    let h_act = 3;
    let ctx_tokens = randn(&mut rng, ctx_len * c, 1.0);
    let act_tokens = randn(&mut rng, h_act * c, 1.0);

    // Full forward with the action block appended.
    let mut full_sizes = sizes;
    full_sizes[4] = h_act;
    let mut all = ctx_tokens.clone();
    all.extend_from_slice(&act_tokens);
    let full_seq = BlockMaskedSequence {
        tokens: g.constant(all, &[ctx_len + h_act, c]),
        sizes: full_sizes,
    };
    let mask = build_block_mask(&g, &full_sizes).unwrap();
    let full_out = trunk_forward(&full_seq, &mask, &trunk).unwrap().value();
    let full_act = &full_out[ctx_len * c..];

    // Cached path.
    let ctx_seq = BlockMaskedSequence {
        tokens: g.constant(ctx_tokens, &[ctx_len, c]),
        sizes,
    };
    let cache = build_kv_cache(&ctx_seq, &trunk).unwrap();
    assert_eq!(cache.ctx_len, ctx_len);
    let act = g.constant(act_tokens, &[h_act, c]);
    let cached_out = trunk_action_forward(&act, &cache, &trunk).unwrap().value();

    for (a, b) in full_act.iter().zip(&cached_out) {
        assert_eq!(a.to_bits(), b.to_bits(), "{a} vs {b}");
    }
}

#[test]
fn kv_cache_rejects_action_tokens_and_is_reusable() {
    let g = GraphRef::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let c = 8;
    let trunk = mk_trunk(&g, c, 1, 2, &mut rng);
    let bad = BlockMaskedSequence {
        tokens: g.constant(randn(&mut rng, 3 * c, 1.0), &[3, c]),
        sizes: [1, 0, 0, 1, 1],
    };
    assert!(build_kv_cache(&bad, &trunk).is_err());

    let ctx = BlockMaskedSequence {
        tokens: g.constant(randn(&mut rng, 3 * c, 1.0), &[3, c]),
        sizes: [2, 0, 0, 1, 0],
    };
    let cache = build_kv_cache(&ctx, &trunk).unwrap();
    let act1 = g.constant(randn(&mut rng, 2 * c, 1.0), &[2, c]);
    let out1 = trunk_action_forward(&act1, &cache, &trunk).unwrap().value();
    let _other = trunk_action_forward(
        &g.constant(randn(&mut rng, 2 * c, 1.0), &[2, c]),
        &cache,
        &trunk,
    )
    .unwrap();
    // Same cache object, same inputs, same outputs: no mutation.
    let out1_again = trunk_action_forward(&act1, &cache, &trunk).unwrap().value();
    assert!(out1
        .iter()
        .zip(&out1_again)
        .all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn flow_matching_pieces() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let noise = randn(&mut rng, 14, 1.0);
    let action = randn(&mut rng, 14, 1.0);
    // s = 1 reaches the clean action.
    let x1 = flow_interpolate(&noise, &action, 1.0);
    assert_eq!(x1, action);
    // s = 0 is the noise.
    assert_eq!(flow_interpolate(&noise, &action, 0.0), noise);

    // Perfect velocity prediction gives zero loss.
    let g = GraphRef::<f64>::new();
    let target = flow_target(&noise, &action);
    let v_hat = g.leaf(target.clone(), &[2, 7], true);
    assert_eq!(cfm_loss(&v_hat, &target).unwrap().item(), 0.0);

    // Random case matches a scalar MSE oracle.
    let pred = randn(&mut rng, 14, 1.0);
    let v2 = g.leaf(pred.clone(), &[2, 7], true);
    let loss = cfm_loss(&v2, &target).unwrap().item();
    let oracle: f64 = pred
        .iter()
        .zip(&target)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / 14.0;
    assert!((loss - oracle).abs() < 1e-12);
}

#[test]
fn euler_sampler_test_hooks() {
    let noise = vec![0.5f64, -1.0, 2.0];
    // Zero field: output equals the initial noise.
    let out = euler_sample(noise.clone(), 10, |_, _| vec![0.0; 3]);
    assert_eq!(out, noise);
    // Constant field c: output = noise + c after unit time.
    let c = [0.3, -0.7, 1.1];
    let out = euler_sample(noise.clone(), 7, |_, _| c.to_vec());
    for i in 0..3 {
        assert!((out[i] - (noise[i] + c[i])).abs() < 1e-12);
    }
}

#[test]
fn total_loss_weighted_sum() {
    let g = GraphRef::<f64>::new();
    let a = g.scalar(2.0);
    let t = g.scalar(3.0);
    let d = g.scalar(4.0);
    assert_eq!(total_loss(&a, &t, &d, [1.0, 1.0, 1.0]).unwrap().item(), 9.0);
    assert_eq!(total_loss(&a, &t, &d, [0.5, 2.0, 0.0]).unwrap().item(), 7.0);
    let z = g.scalar(0.0);
    assert_eq!(total_loss(&z, &z, &z, [1.0, 1.0, 1.0]).unwrap().item(), 0.0);
}

#[test]
fn action_embedding_separates_steps_and_time() {
    let g = GraphRef::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let c = 8;
    let pe = TemporalEncoding::new(4, c).unwrap();
    let expert = ActionExpertParams {
        w_in: g.leaf(randn(&mut rng, 7 * c, 0.3), &[7, c], true),
        b_in: g.leaf(randn(&mut rng, c, 0.1), &[c], true),
        w_out: g.leaf(randn(&mut rng, c * 7, 0.3), &[c, 7], true),
        b_out: g.leaf(randn(&mut rng, 7, 0.1), &[7], true),
    };
    let type_emb = g.leaf(randn(&mut rng, 5 * c, 0.1), &[5, c], true);
    let x = vec![0.0; 3 * 7];
    let t1 = embed_action_tokens(&g, &x, 0.2, &pe, &expert, &type_emb)
        .unwrap()
        .value();
    let t2 = embed_action_tokens(&g, &x, 0.8, &pe, &expert, &type_emb)
        .unwrap()
        .value();
    // Same zero inputs, different flow time: embeddings differ.
    assert!(t1.iter().zip(&t2).any(|(a, b)| a != b));
    // Steps differ through the temporal rows even at equal inputs.
    assert!((0..c).any(|j| t1[j] != t1[c + j]));
}
