use ndarray::Array2;

use super::*;

fn tiny_config(seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: 11,
        hidden: 8,
        layers: 1,
        heads: 2,
        ffn_hidden: 16,
        max_input_len: 6,
        max_decode_len: 5,
        tie_embeddings: true,
        seed,
    }
}

fn seq(ids: &[u32], max_len: usize) -> InputSequence {
    let mut v = ids.to_vec();
    let len = v.len();
    v.resize(max_len, PAD);
    InputSequence { ids: v, len }
}

fn tiny_inputs() -> Vec<InputSequence> {
    vec![
        seq(&[4, 5, 6, 7, 8, 9], 6),
        seq(&[10, 4, 4], 6),
        seq(&[5, 9, 7, 6], 6),
    ]
}

/// Deterministic pattern weights, distinct per tensor.
fn hand_set(model: &mut FidModel<f64>) {
    for (n, (_, t)) in model.params_mut().named_mut().into_iter().enumerate() {
        for (e, v) in t.iter_mut().enumerate() {
            *v = 0.4 * (1.7 * e as f64 + 0.9 * n as f64).sin() + 0.05;
        }
    }
}

mod reference {
    //! Scalar re-derivation of the forward pass with nested `Vec`s.
    use super::super::{FidModel, BOS};
    use ndarray::{Array1, Array2};

    type M = Vec<Vec<f64>>;

    fn m(a: &Array2<f64>) -> M {
        a.rows().into_iter().map(|r| r.to_vec()).collect()
    }

    fn v(a: &Array1<f64>) -> Vec<f64> {
        a.to_vec()
    }

    fn matmul(x: &M, w: &M) -> M {
        x.iter()
            .map(|row| {
                (0..w[0].len())
                    .map(|j| (0..row.len()).map(|k| row[k] * w[k][j]).sum())
                    .collect()
            })
            .collect()
    }

    fn add(a: &M, b: &M) -> M {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
            .collect()
    }

    fn layer_norm(x: &M, g: &[f64], b: &[f64]) -> M {
        x.iter()
            .map(|row| {
                let n = row.len() as f64;
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
                row.iter()
                    .enumerate()
                    .map(|(i, a)| (a - mean) / (var + 1e-5).sqrt() * g[i] + b[i])
                    .collect()
            })
            .collect()
    }

    fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
    }

    fn mha(xq: &M, xkv: &M, w: [&M; 4], heads: usize, causal: bool) -> M {
        let (q, k, val) = (matmul(xq, w[0]), matmul(xkv, w[1]), matmul(xkv, w[2]));
        let h = q[0].len();
        let dh = h / heads;
        let mut ctx = vec![vec![0.0; h]; xq.len()];
        for hd in 0..heads {
            for i in 0..xq.len() {
                let keys: Vec<usize> = (0..xkv.len()).filter(|&j| !causal || j <= i).collect();
                let scores: Vec<f64> = keys
                    .iter()
                    .map(|&j| {
                        (0..dh)
                            .map(|c| q[i][hd * dh + c] * k[j][hd * dh + c])
                            .sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
                for (s, &j) in scores.iter().zip(&keys) {
                    let p = (s - mx).exp() / z;
                    for c in 0..dh {
                        ctx[i][hd * dh + c] += p * val[j][hd * dh + c];
                    }
                }
            }
        }
        matmul(&ctx, w[3])
    }

    fn ffn(x: &M, w1: &M, b1: &[f64], w2: &M, b2: &[f64]) -> M {
        let pre = matmul(x, w1);
        let act: M = pre
            .iter()
            .map(|r| r.iter().zip(b1).map(|(a, b)| gelu(a + b)).collect())
            .collect();
        matmul(&act, w2)
            .iter()
            .map(|r| r.iter().zip(b2).map(|(a, b)| a + b).collect())
            .collect()
    }

    fn embed(model: &FidModel<f64>, ids: &[u32]) -> M {
        let h = model.config().hidden;
        let e = m(&model.params().embed);
        ids.iter()
            .enumerate()
            .map(|(p, &t)| {
                (0..h)
                    .map(|i| {
                        let angle = p as f64 / 10000f64.powf(2.0 * (i / 2) as f64 / h as f64);
                        e[t as usize][i] + if i % 2 == 0 { angle.sin() } else { angle.cos() }
                    })
                    .collect()
            })
            .collect()
    }

    pub fn encode(model: &FidModel<f64>, ids: &[u32]) -> M {
        let p = model.params();
        let heads = model.config().heads;
        let mut x = embed(model, ids);
        for l in &p.encoder {
            let a = layer_norm(&x, &v(&l.norm_attn.gain), &v(&l.norm_attn.bias));
            let w = [m(&l.attn.wq), m(&l.attn.wk), m(&l.attn.wv), m(&l.attn.wo)];
            x = add(&x, &mha(&a, &a, [&w[0], &w[1], &w[2], &w[3]], heads, false));
            let b = layer_norm(&x, &v(&l.norm_ffn.gain), &v(&l.norm_ffn.bias));
            x = add(
                &x,
                &ffn(
                    &b,
                    &m(&l.ffn.w1),
                    &v(&l.ffn.b1),
                    &m(&l.ffn.w2),
                    &v(&l.ffn.b2),
                ),
            );
        }
        layer_norm(&x, &v(&p.encoder_norm.gain), &v(&p.encoder_norm.bias))
    }

    pub fn decode_step(model: &FidModel<f64>, memory: &M, prefix: &[u32]) -> Vec<f64> {
        let p = model.params();
        let heads = model.config().heads;
        let ids: Vec<u32> = std::iter::once(BOS).chain(prefix.iter().copied()).collect();
        let mut y = embed(model, &ids);
        for l in &p.decoder {
            let a = layer_norm(&y, &v(&l.norm_self.gain), &v(&l.norm_self.bias));
            let w = [
                m(&l.self_attn.wq),
                m(&l.self_attn.wk),
                m(&l.self_attn.wv),
                m(&l.self_attn.wo),
            ];
            y = add(&y, &mha(&a, &a, [&w[0], &w[1], &w[2], &w[3]], heads, true));
            let b = layer_norm(&y, &v(&l.norm_cross.gain), &v(&l.norm_cross.bias));
            let w = [
                m(&l.cross_attn.wq),
                m(&l.cross_attn.wk),
                m(&l.cross_attn.wv),
                m(&l.cross_attn.wo),
            ];
            y = add(
                &y,
                &mha(&b, memory, [&w[0], &w[1], &w[2], &w[3]], heads, false),
            );
            let c = layer_norm(&y, &v(&l.norm_ffn.gain), &v(&l.norm_ffn.bias));
            y = add(
                &y,
                &ffn(
                    &c,
                    &m(&l.ffn.w1),
                    &v(&l.ffn.b1),
                    &m(&l.ffn.w2),
                    &v(&l.ffn.b2),
                ),
            );
        }
        let out = layer_norm(&y, &v(&p.decoder_norm.gain), &v(&p.decoder_norm.bias));
        let last = vec![out.last().unwrap().clone()];
        let logits = match &p.lm_head {
            Some(w) => matmul(&last, &m(w)).remove(0),
            None => {
                let e = m(&p.embed);
                let h = e[0].len() as f64;
                e.iter()
                    .map(|row| row.iter().zip(&last[0]).map(|(a, b)| a * b).sum::<f64>() / h.sqrt())
                    .collect()
            }
        };
        let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
        logits.iter().map(|l| (l - mx).exp() / z).collect()
    }
}

#[test]
fn encode_shape_and_padding_rows() {
    let model = FidModel::<f64>::new(ModelConfig {
        vocab_size: 20,
        hidden: 16,
        max_input_len: 10,
        ..ModelConfig::default()
    })
    .unwrap();
    let enc = model.encode(&seq(&[4, 5, 6], 10)).unwrap();
    assert_eq!(enc.hidden.dim(), (10, 16));
    assert!(enc
        .hidden
        .rows()
        .into_iter()
        .skip(3)
        .all(|r| r.iter().all(|&v| v == 0.0)));
    assert!(enc.hidden.iter().all(|v| v.is_finite()));
    let bad = seq(&[4, 25], 10);
    assert!(model.encode(&bad).is_err());
}

#[test]
fn padding_tokens_do_not_leak() {
    let model = FidModel::<f64>::new(tiny_config(3)).unwrap();
    let a = seq(&[4, 5, 6], 6);
    let mut b = a.clone();
    b.ids[3] = 9;
    b.ids[5] = 10;
    let (ea, eb) = (model.encode(&a).unwrap(), model.encode(&b).unwrap());
    assert_eq!(
        ea.hidden.slice(ndarray::s![..3, ..]),
        eb.hidden.slice(ndarray::s![..3, ..])
    );
    let fa = model.prepare(&fuse(&[ea]).unwrap());
    let fb = model.prepare(&fuse(&[eb]).unwrap());
    assert_eq!(
        model.decode_step(&fa, &[7]).unwrap(),
        model.decode_step(&fb, &[7]).unwrap()
    );
}

#[test]
fn fuse_shapes_and_block_permutation() {
    let model = FidModel::<f64>::new(ModelConfig {
        vocab_size: 20,
        hidden: 16,
        max_input_len: 10,
        ..ModelConfig::default()
    })
    .unwrap();
    let encs: Vec<_> = [[4u32, 5, 6].as_slice(), &[7, 8], &[9, 10, 11, 12]]
        .iter()
        .map(|ids| model.encode(&seq(ids, 10)).unwrap())
        .collect();
    let fused = fuse(&encs).unwrap();
    assert_eq!(fused.hidden.dim(), (30, 16));
    assert_eq!(fused.boundaries, [0, 10, 20]);

    let single = fuse(&encs[..1]).unwrap();
    assert_eq!(single.hidden, encs[0].hidden);

    let swapped = fuse(&[encs[2].clone(), encs[0].clone(), encs[1].clone()]).unwrap();
    for (dst, src) in [(0, 2), (1, 0), (2, 1)] {
        assert_eq!(
            swapped
                .hidden
                .slice(ndarray::s![dst * 10..dst * 10 + 10, ..]),
            fused.hidden.slice(ndarray::s![src * 10..src * 10 + 10, ..])
        );
    }
    assert!(fuse::<f64>(&[]).is_err());
    let other = EncodedPassage {
        hidden: Array2::zeros((9, 16)),
        len: 9,
    };
    assert!(fuse(&[encs[0].clone(), other]).is_err());
}

#[test]
fn forward_matches_scalar_reference() {
    for tie_embeddings in [true, false] {
        forward_matches_scalar_reference_with(ModelConfig {
            tie_embeddings,
            ..tiny_config(0)
        });
    }
}

fn forward_matches_scalar_reference_with(config: ModelConfig) {
    let mut model = FidModel::<f64>::new(config).unwrap();
    hand_set(&mut model);
    let input = seq(&[4, 9], 6);
    let enc = model.encode(&input).unwrap();
    let want = reference::encode(&model, &[4, 9]);
    for (r, row) in want.iter().enumerate() {
        for (c, &w) in row.iter().enumerate() {
            assert!((enc.hidden[(r, c)] - w).abs() < 1e-12, "encoder ({r},{c})");
        }
    }
    let memory = model.prepare(&fuse(&[enc]).unwrap());
    for prefix in [&[][..], &[5], &[5, 8, 2]] {
        let got = model.decode_step(&memory, prefix).unwrap();
        let want = reference::decode_step(&model, &want, prefix);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }
}

#[test]
fn decode_step_is_a_distribution() {
    for seed in 0..5 {
        let model = FidModel::<f64>::new(tiny_config(seed)).unwrap();
        let memory = model.prepare(&model.encode_all(&tiny_inputs()).unwrap());
        let p = model.decode_step(&memory, &[4, 7]).unwrap();
        assert_eq!(p.len(), 11);
        assert!(p.iter().all(|&v| v >= 0.0));
        assert!((p.sum() - 1.0).abs() < 1e-6);
        assert!(model.decode_step(&memory, &[4; 5]).is_err());
    }
}

#[test]
fn zero_output_projection_is_uniform() {
    let cfg = ModelConfig {
        vocab_size: 4,
        tie_embeddings: false,
        ..tiny_config(1)
    };
    let mut model = FidModel::<f64>::new(cfg).unwrap();
    model.params_mut().lm_head.as_mut().unwrap().fill(0.0);
    let inputs = vec![seq(&[3, 2, 1], 6)];
    let fused = model.encode_all(&inputs).unwrap();
    let memory = model.prepare(&fused);
    let p = model.decode_step(&memory, &[3]).unwrap();
    assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    let loss = model.training_loss(&fused, &[3, 1, EOS]).unwrap();
    assert!((loss - 4f64.ln()).abs() < 1e-12);
}

#[test]
fn mean_nll_hand_values() {
    let want = (2f64.ln() + 4f64.ln()) / 2.0;
    let logp = Array2::from_shape_fn((2, 5), |(r, c)| match (r, c) {
        (0, 4) => 0.5f64.ln(),
        (1, 4) => 0.25f64.ln(),
        _ => (0.125f64).ln(),
    });
    assert!((mean_nll(&logp, &[4, 4]) - want).abs() < 1e-15);
    let certain = Array2::from_shape_fn(
        (2, 5),
        |(_, c)| if c == 4 { 0.0 } else { f64::NEG_INFINITY },
    );
    assert_eq!(mean_nll(&certain, &[4, 4]), 0.0);
    assert!((mean_nll(&logp, &[4, PAD]) - 2f64.ln()).abs() < 1e-15);
}

#[test]
fn teacher_forcing_is_causal() {
    let model = FidModel::<f64>::new(tiny_config(4)).unwrap();
    let fused = model.encode_all(&tiny_inputs()).unwrap();
    let memory = model.prepare(&fused);
    let target = [5, 8, 9, EOS];
    let rows = model.teacher_forced_log_probs(&fused, &target).unwrap();
    for t in 0..target.len() {
        let step = model.next_log_probs(&memory, &target[..t]).unwrap();
        for (a, b) in rows.row(t).iter().zip(&step) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    let other = [5, 8, 4, 4];
    let rows2 = model.teacher_forced_log_probs(&fused, &other).unwrap();
    for t in 0..=2 {
        assert_eq!(rows.row(t), rows2.row(t));
    }
}

#[test]
fn single_passage_matches_plain_forward() {
    let model = FidModel::<f64>::new(tiny_config(6)).unwrap();
    let input = seq(&[4, 5, 6, 7], 6);
    let fused = model.encode_all(std::slice::from_ref(&input)).unwrap();
    let memory = model.prepare(&fused);
    for prefix in [&[][..], &[8], &[8, 9]] {
        assert_eq!(
            model.decode_step(&memory, prefix).unwrap(),
            model.plain_decode_step(&input, prefix).unwrap()
        );
    }
}

fn finite_difference_worst(config: ModelConfig) -> f64 {
    let model = FidModel::<f64>::new(config).unwrap();
    let inputs = tiny_inputs();
    let target = [6, 9, EOS];
    let (loss, grad) = model.loss_and_gradient(&inputs, &target).unwrap();
    let direct = model
        .training_loss(&model.encode_all(&inputs).unwrap(), &target)
        .unwrap();
    assert!((loss - direct).abs() < 1e-12);

    let eps = 1e-4;
    let analytic: Vec<f64> = grad
        .named()
        .iter()
        .flat_map(|(_, _, t)| t.to_vec())
        .collect();
    let mut worst = 0.0f64;
    let mut probe = model.clone();
    let mut flat = 0;
    let n_tensors = probe.params().named().len();
    for ti in 0..n_tensors {
        let len = probe.params().named()[ti].2.len();
        for e in 0..len {
            let orig = probe.params().named()[ti].2[e];
            let eval = |m: &mut FidModel<f64>, v: f64| {
                m.params_mut().named_mut()[ti].1[e] = v;
                m.training_loss(&m.encode_all(&inputs).unwrap(), &target)
                    .unwrap()
            };
            let plus = eval(&mut probe, orig + eps);
            let minus = eval(&mut probe, orig - eps);
            probe.params_mut().named_mut()[ti].1[e] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[flat];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
            worst = worst.max(rel);
            flat += 1;
        }
    }
    worst
}

#[test]
fn gradient_matches_finite_differences() {
    for tie_embeddings in [true, false] {
        let worst = finite_difference_worst(ModelConfig {
            tie_embeddings,
            ..tiny_config(11)
        });
        assert!(
            worst < 1e-3,
            "tied={tie_embeddings}: worst relative error {worst}"
        );
    }
}

#[test]
fn duplicated_example_doubles_gradient() {
    let model = FidModel::<f64>::new(tiny_config(2)).unwrap();
    let (_, g) = model.loss_and_gradient(&tiny_inputs(), &[6, EOS]).unwrap();
    let mut sum = g.clone();
    sum.add_scaled(&g, 1.0);
    for ((_, _, s), (_, _, x)) in sum.named().iter().zip(g.named().iter()) {
        for (a, b) in s.iter().zip(x.iter()) {
            assert_eq!(*a, 2.0 * b);
        }
    }
}

#[test]
fn attribution_properties() {
    let model = FidModel::<f64>::new(tiny_config(8)).unwrap();
    let one = model.prepare(&model.encode_all(&tiny_inputs()[..1]).unwrap());
    let a = model.attribution(&one, &[5, EOS]).unwrap();
    assert_eq!(a.len(), 1);
    assert!((a[0] - 1.0).abs() < 1e-12);

    let twin = vec![tiny_inputs()[1].clone(), tiny_inputs()[1].clone()];
    let mem = model.prepare(&model.encode_all(&twin).unwrap());
    let a = model.attribution(&mem, &[5, 6, EOS]).unwrap();
    assert!((a[0] - 0.5).abs() < 1e-12 && (a[1] - 0.5).abs() < 1e-12);

    let inputs = tiny_inputs();
    let mem = model.prepare(&model.encode_all(&inputs).unwrap());
    let generated = [5, 6, EOS];
    let a = model.attribution(&mem, &generated).unwrap();
    assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!(a.iter().all(|&s| s >= 0.0));

    // Recompute from the raw maps with explicit loops.
    let maps = model.cross_attention(&mem, &generated).unwrap();
    let lens: Vec<usize> = inputs.iter().map(|i| i.len).collect();
    let mut per_passage = vec![0.0; 3];
    let mut n = 0.0;
    for layer in &maps {
        for head in layer {
            assert_eq!(head.nrows(), generated.len());
            for r in 0..head.nrows() {
                let mut col = 0;
                for (p, &len) in lens.iter().enumerate() {
                    for _ in 0..len {
                        per_passage[p] += head[(r, col)];
                        col += 1;
                    }
                }
                n += 1.0;
            }
        }
    }
    let total: f64 = per_passage.iter().map(|v| v / n).sum();
    for (got, raw) in a.iter().zip(&per_passage) {
        assert!((got - raw / n / total).abs() < 1e-12);
    }

    // Permuting passages permutes the scores.
    let perm = [2usize, 0, 1];
    let shuffled: Vec<_> = perm.iter().map(|&i| inputs[i].clone()).collect();
    let mem2 = model.prepare(&model.encode_all(&shuffled).unwrap());
    let b = model.attribution(&mem2, &generated).unwrap();
    for (dst, &src) in perm.iter().enumerate() {
        assert!((b[dst] - a[src]).abs() < 1e-12);
    }
}

fn toy_examples(n: usize) -> Vec<TrainExample> {
    (0..n as u32)
        .map(|i| TrainExample {
            inputs: vec![seq(&[4 + i % 7, 5, 6], 6), seq(&[10, 4 + (i * 3) % 7], 6)],
            target: vec![4 + i % 7, EOS],
        })
        .collect()
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let mut model = FidModel::<f32>::new(tiny_config(1)).unwrap();
    let before = model.clone();
    let cfg = OptimizerConfig {
        learning_rate: 0.0,
        warmup_steps: 2,
        total_steps: 5,
        ..OptimizerConfig::default()
    };
    let report = train(&mut model, &toy_examples(3), &cfg).unwrap();
    assert_eq!(report.losses.len(), 5);
    assert_eq!(model, before);
}

#[test]
fn training_is_deterministic_and_overfits() {
    let cfg = OptimizerConfig {
        learning_rate: 1e-2,
        warmup_steps: 20,
        total_steps: 400,
        seed: 5,
        ..OptimizerConfig::default()
    };
    let data = toy_examples(10);
    let mut a = FidModel::<f32>::new(ModelConfig {
        hidden: 16,
        ..tiny_config(3)
    })
    .unwrap();
    let mut b = a.clone();
    let ra = train(&mut a, &data, &cfg).unwrap();
    let rb = train(&mut b, &data, &cfg).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(a, b);
    let final_loss: f32 = data
        .iter()
        .map(|ex| {
            a.training_loss(&a.encode_all(&ex.inputs).unwrap(), &ex.target)
                .unwrap()
        })
        .sum::<f32>()
        / data.len() as f32;
    assert!(final_loss < 0.05, "final loss {final_loss}");

    // A converged model has small gradients.
    let g = a
        .loss_and_gradient(&data[0].inputs, &data[0].target)
        .unwrap()
        .1;
    let norm: f32 = g
        .named()
        .iter()
        .flat_map(|(_, _, t)| t.iter())
        .map(|v| v * v)
        .sum::<f32>()
        .sqrt();
    assert!(norm < 0.5, "gradient norm {norm}");
}

#[test]
fn linear_schedule() {
    let cfg = OptimizerConfig::default();
    assert_eq!(learning_rate(&cfg, 1000), 5e-5);
    assert_eq!(learning_rate(&cfg, 2000), 1e-4);
    assert!((learning_rate(&cfg, 11_000) - 5e-5).abs() < 1e-15);
    assert_eq!(learning_rate(&cfg, 20_000), 0.0);
}

#[test]
fn tied_model_has_no_output_matrix() {
    let tied = FidModel::<f64>::new(tiny_config(0)).unwrap();
    let untied = FidModel::<f64>::new(ModelConfig {
        tie_embeddings: false,
        ..tiny_config(0)
    })
    .unwrap();
    assert!(tied.params().lm_head.is_none());
    assert_eq!(
        untied.params().num_parameters() - tied.params().num_parameters(),
        8 * 11
    );
    assert!(FidModel::from_params(tiny_config(0), untied.params().clone()).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let tok = Tokenizer::build(["a b c d e f g"], None);
    for tie_embeddings in [true, false] {
        let model = FidModel::<f32>::new(ModelConfig {
            vocab_size: tok.len(),
            tie_embeddings,
            ..tiny_config(9)
        })
        .unwrap();
        save_checkpoint(&path, &model, &tok).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.model, model);
        assert_eq!(back.tokenizer, tok);
    }
    let bytes = std::fs::read(&path).unwrap();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 2]).is_err());
}
