use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::engine::grad_check;
use crate::train::{AdamW, AdamWConfig};

fn tiny_cfg(kv_heads: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 12,
        factor_dim: 3,
        model_dim: 8,
        ffn_hidden: 6,
        layers: 2,
        heads: 2,
        kv_heads,
        context_len: 16,
        dropout: 0.0,
        struct_dim: 4,
        sem_dim: 5,
        rope_base: 10_000.0,
    }
}

fn tiny_model<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Model<T> {
    let fused = FusedEmbeddings::random(cfg.vocab_size, cfg.struct_dim, cfg.sem_dim, cfg.model_dim, seed).unwrap();
    init_model(cfg, &fused, seed).unwrap()
}

/// Scales every trainable tensor so activations and gradients are O(1).
fn widen(m: &mut Model64, factor: f64) {
    for i in 0..m.params.len() {
        let p = m.params.param_mut(i);
        if p.trainable && p.value.shape().len() == 2 {
            p.value.data_mut().iter_mut().for_each(|x| *x *= factor);
        }
    }
}

#[test]
fn full_size_inventory() {
    let b = count_params(&ModelConfig::full(31_901));
    assert_eq!(b.total, 49_902_166);
    assert_eq!(b.trainable, 13_152_214);
    assert_eq!(b.frozen, b.total - b.trainable);
    let blocks = b.components.iter().find(|c| c.name == "decoder_blocks").unwrap();
    assert_eq!(blocks.count, 9_441_792);
    let factors: usize = b
        .components
        .iter()
        .filter(|c| c.name == "token_factors" || c.name == "factor_projection")
        .map(|c| c.count)
        .sum();
    assert_eq!(factors, 3_228_500);
}

#[test]
fn tiny_inventory_by_hand() {
    let cfg = ModelConfig {
        vocab_size: 10,
        factor_dim: 2,
        model_dim: 4,
        ffn_hidden: 8,
        layers: 1,
        heads: 1,
        kv_heads: 1,
        struct_dim: 3,
        sem_dim: 5,
        ..Default::default()
    };
    // factors 20 + 8, hierarchy 30 (frozen) + 12, semantic 50 (frozen) + 20,
    // norms 8, gates 2, block 8 + 16 + 32 + 16 + 96, final 4, output 8
    let b = count_params(&cfg);
    assert_eq!(b.total, 330);
    assert_eq!(b.trainable, 250);
    assert_eq!(b.frozen, 80);
}

#[test]
fn stored_tensors_match_closed_form() {
    for kv in [1, 2] {
        let cfg = tiny_cfg(kv);
        let m = tiny_model::<f32>(&cfg, 1);
        let b = count_params(&cfg);
        assert_eq!(m.breakdown(), (b.trainable, b.frozen));
    }
}

#[test]
fn init_is_deterministic_and_installs_frozen_rows() {
    let cfg = tiny_cfg(1);
    let fused = FusedEmbeddings::<f32>::random(12, 4, 5, 8, 3).unwrap();
    let a = init_model(&cfg, &fused, 9).unwrap();
    let b = init_model(&cfg, &fused, 9).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, init_model(&cfg, &fused, 10).unwrap());
    assert_eq!(a.params.get(names::STRUCT_RAW), &fused.struct_raw);
    assert_eq!(a.params.get(names::SEM_RAW), &fused.sem_raw);
    assert_eq!(a.knowledge_table().unwrap(), fused.z);
    let wrong = FusedEmbeddings::<f32>::random(11, 4, 5, 8, 3).unwrap();
    assert!(matches!(init_model(&cfg, &wrong, 0), Err(ModelError::Shape(_))));
}

#[test]
fn config_validation() {
    let mut c = tiny_cfg(1);
    c.kv_heads = 3;
    assert!(c.validate().is_err());
    let mut c = tiny_cfg(1);
    c.factor_dim = 9;
    assert!(c.validate().is_err());
    let mut c = tiny_cfg(1);
    c.heads = 8;
    c.kv_heads = 1;
    assert!(c.validate().is_err(), "head width 1 is odd");
}

#[test]
fn logits_shape_and_input_errors() {
    let m = tiny_model::<f32>(&tiny_cfg(1), 2);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = m.forward(&[1, 4, 2, 7], false, &mut rng).unwrap();
    assert_eq!(out.shape(), &[4, 12]);
    assert!(matches!(m.forward(&[1, 12], false, &mut rng), Err(ModelError::TokenOutOfRange { id: 12, .. })));
    let long = vec![1; 17];
    assert!(matches!(m.forward(&long, false, &mut rng), Err(ModelError::TooLong { .. })));
}

#[test]
fn causal_rows_are_bit_identical_under_future_edits() {
    let m = tiny_model::<f32>(&tiny_cfg(1), 4);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let base: Vec<usize> = vec![3, 1, 4, 1, 5, 9, 2, 6, 5, 3];
    let a = m.forward(&base, false, &mut rng).unwrap();
    for t in 0..base.len() - 1 {
        let mut edited = base.clone();
        edited[t + 1] = (edited[t + 1] + 7) % 12;
        let b = m.forward(&edited, false, &mut rng).unwrap();
        for pos in 0..=t {
            assert_eq!(a.row(pos), b.row(pos), "edit at {} moved row {pos}", t + 1);
        }
    }
}

#[test]
fn dropout_off_is_deterministic_and_on_changes_output() {
    let mut cfg = tiny_cfg(1);
    cfg.dropout = 0.3;
    let m = tiny_model::<f64>(&cfg, 4);
    let ids = [1, 2, 3, 4];
    let mut r1 = ChaCha8Rng::seed_from_u64(1);
    let mut r2 = ChaCha8Rng::seed_from_u64(2);
    assert_eq!(m.forward(&ids, false, &mut r1).unwrap(), m.forward(&ids, false, &mut r2).unwrap());
    assert_ne!(m.forward(&ids, true, &mut r1).unwrap(), m.forward(&ids, false, &mut r2).unwrap());
}

/// Independent per-position forward pass written with plain loops.
fn reference_forward(m: &Model64, ids: &[usize]) -> Vec<Vec<f64>> {
    let cfg = &m.cfg;
    let p = &m.params;
    let (d, h, kvh, hd) = (cfg.model_dim, cfg.heads, cfg.kv_heads, cfg.head_dim());
    let proj = |x: &[f64], w: &Tensor<f64>| -> Vec<f64> {
        (0..w.cols()).map(|j| (0..x.len()).map(|i| x[i] * w.data()[i * w.cols() + j]).sum()).collect()
    };
    let rms = |x: &[f64], g: &[f64]| -> Vec<f64> {
        let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        x.iter().zip(g).map(|(v, s)| v / (ms + NORM_EPS).sqrt() * s).collect()
    };
    let rotate = |x: &mut [f64], pos: usize| {
        for i in 0..hd / 2 {
            let th = pos as f64 * cfg.rope_base.powf(-2.0 * i as f64 / hd as f64);
            let (a, b) = (x[2 * i], x[2 * i + 1]);
            x[2 * i] = a * th.cos() - b * th.sin();
            x[2 * i + 1] = a * th.sin() + b * th.cos();
        }
    };
    let mut xs: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| {
            let tok = proj(p.get(names::TOK_FACTORS).row(id), p.get(names::TOK_PROJ));
            let s = rms(&proj(p.get(names::STRUCT_RAW).row(id), p.get(names::STRUCT_PROJ)), p.get(names::STRUCT_NORM).data());
            let e = rms(&proj(p.get(names::SEM_RAW).row(id), p.get(names::SEM_PROJ)), p.get(names::SEM_NORM).data());
            let (ah, as_) = (p.get(names::ALPHA_H).item(), p.get(names::ALPHA_S).item());
            (0..d).map(|j| tok[j] + ah * s[j] + as_ * e[j]).collect()
        })
        .collect();
    for l in 0..cfg.layers {
        let w = |part: &str| p.get(&names::block(l, part));
        let xn: Vec<Vec<f64>> = xs.iter().map(|x| rms(x, w("attn_norm").data())).collect();
        let mut qs: Vec<Vec<f64>> = xn.iter().map(|x| proj(x, w("wq"))).collect();
        let mut ks: Vec<Vec<f64>> = xn.iter().map(|x| proj(x, w("wk"))).collect();
        let vs: Vec<Vec<f64>> = xn.iter().map(|x| proj(x, w("wv"))).collect();
        for (t, (q, k)) in qs.iter_mut().zip(ks.iter_mut()).enumerate() {
            for head in 0..h {
                rotate(&mut q[head * hd..(head + 1) * hd], t);
            }
            for head in 0..kvh {
                rotate(&mut k[head * hd..(head + 1) * hd], t);
            }
        }
        for t in 0..ids.len() {
            let mut cat = vec![0.0; d];
            for head in 0..h {
                let kv = head * kvh / h;
                let q = &qs[t][head * hd..(head + 1) * hd];
                let scores: Vec<f64> = (0..=t)
                    .map(|s| q.iter().zip(&ks[s][kv * hd..(kv + 1) * hd]).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt())
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
                for (s, sc) in scores.iter().enumerate() {
                    for i in 0..hd {
                        cat[head * hd + i] += (sc - mx).exp() / z * vs[s][kv * hd + i];
                    }
                }
            }
            let o = proj(&cat, w("wo"));
            xs[t].iter_mut().zip(o).for_each(|(x, o)| *x += o);
            let xn = rms(&xs[t], w("ffn_norm").data());
            let gate = proj(&xn, w("w_gate"));
            let up = proj(&xn, w("w_up"));
            let hid: Vec<f64> = gate.iter().zip(&up).map(|(g, u)| g / (1.0 + (-g).exp()) * u).collect();
            let down = proj(&hid, w("w_down"));
            xs[t].iter_mut().zip(down).for_each(|(x, o)| *x += o);
        }
    }
    xs.iter()
        .map(|x| {
            let he = proj(&rms(x, p.get(names::FINAL_NORM).data()), p.get(names::OUT_PROJ));
            (0..cfg.vocab_size)
                .map(|v| p.get(names::TOK_FACTORS).row(v).iter().zip(&he).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect()
}

fn max_abs_diff(a: &Tensor<f64>, b: &[Vec<f64>]) -> f64 {
    b.iter()
        .enumerate()
        .flat_map(|(t, row)| row.iter().zip(a.row(t)).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
}

#[test]
fn full_heads_match_reference_attention() {
    let mut m = tiny_model::<f64>(&tiny_cfg(2), 5);
    widen(&mut m, 20.0);
    let ids = [0, 5, 2, 11, 7, 7, 3];
    let out = m.forward(&ids, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let diff = max_abs_diff(&out, &reference_forward(&m, &ids));
    assert!(diff < 1e-6, "{diff}");
}

#[test]
fn grouped_heads_match_reference_attention() {
    let mut m = tiny_model::<f64>(&tiny_cfg(1), 6);
    widen(&mut m, 20.0);
    let ids = [4, 5, 6, 0, 1];
    let out = m.forward(&ids, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(max_abs_diff(&out, &reference_forward(&m, &ids)) < 1e-6);
}

#[test]
fn incremental_decoding_matches_full_pass() {
    let mut m = tiny_model::<f64>(&tiny_cfg(1), 7);
    widen(&mut m, 20.0);
    let ids = [2, 9, 9, 1, 0, 4, 8, 3];
    let full = m.forward(&ids, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut s = InferenceSession::new(&m).unwrap();
    for (t, &id) in ids.iter().enumerate() {
        let row = s.step(id).unwrap();
        for (a, b) in row.iter().zip(full.row(t)) {
            assert!((a - b).abs() < 1e-10, "position {t}");
        }
    }
    assert_eq!(s.position(), ids.len());
}

#[test]
fn factorized_path_equals_plain_table_when_projection_is_identity() {
    let mut cfg = tiny_cfg(1);
    cfg.factor_dim = cfg.model_dim;
    let mut m = tiny_model::<f64>(&cfg, 8);
    *m.params.get_mut(names::TOK_PROJ) = Tensor::identity(8);
    let know = m.knowledge_table().unwrap();
    let ids = [3, 0, 11];
    let g = Graph::new();
    let b = m.bind(&g);
    let x = m.embed_on(&g, &b, &ids).unwrap();
    let x = g.value(x);
    for (t, &id) in ids.iter().enumerate() {
        for j in 0..8 {
            let plain = m.params.get(names::TOK_FACTORS).row(id)[j] + know.row(id)[j];
            assert!((x.row(t)[j] - plain).abs() < 1e-15);
        }
    }
}

#[test]
fn end_to_end_gradient_check() {
    let mut m = tiny_model::<f64>(&tiny_cfg(1), 11);
    widen(&mut m, 15.0);
    let ids = [1, 4, 7, 2, 9, 3];
    let targets: Vec<Option<usize>> = ids[1..].iter().map(|&t| Some(t)).chain([None]).collect();
    let trainable: Vec<usize> = (0..m.params.len()).filter(|&i| m.params.param(i).trainable).collect();
    let points: Vec<Tensor<f64>> = trainable.iter().map(|&i| m.params.param(i).value.clone()).collect();
    let err = grad_check(
        |g, pts| {
            let mut it = pts.iter();
            let vars = (0..m.params.len())
                .map(|i| {
                    let p = m.params.param(i);
                    if p.trainable {
                        *it.next().expect("one point per trainable tensor")
                    } else {
                        g.constant(p.value.clone())
                    }
                })
                .collect();
            let b = Bound { model: &m, vars };
            let logits = m
                .forward_on(g, &b, &ids, 1, false, &mut ChaCha8Rng::seed_from_u64(0))
                .map_err(|e| match e {
                    ModelError::Engine(e) => e,
                    other => panic!("{other}"),
                })?;
            g.cross_entropy(logits, &targets)
        },
        &points,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-3, "max relative error {err}");
}

#[test]
fn one_step_moves_trainable_and_keeps_frozen() {
    let m0 = tiny_model::<f32>(&tiny_cfg(1), 12);
    let mut m = m0.clone();
    let ids = [1, 2, 3, 4, 5, 6];
    let g = Graph::new();
    let b = m.bind(&g);
    let logits = m.forward_on(&g, &b, &ids, 1, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let targets: Vec<Option<usize>> = ids[1..].iter().map(|&t| Some(t)).chain([None]).collect();
    let loss = g.cross_entropy(logits, &targets).unwrap();
    let mut grads = g.backward(loss).unwrap();
    let gs = m.params.collect_grads(&mut grads, &b.vars);
    drop(b);
    let mut opt = AdamW::new(AdamWConfig::default(), &m.params);
    opt.step(&mut m.params, &gs, 1e-3).unwrap();
    for (i, (before, after)) in m0.params.iter().zip(m.params.iter()).enumerate() {
        if !before.trainable {
            assert_eq!(before.value, after.value, "{}", before.name);
        } else if gs[i].as_ref().is_some_and(|g| g.iter().any(|&x| x != 0.0)) {
            assert_ne!(before.value, after.value, "{}", before.name);
        }
    }
}

#[test]
fn checkpoint_round_trip() {
    let m = tiny_model::<f32>(&tiny_cfg(1), 13);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("model.bin");
    m.save(&p, 13, 250).unwrap();
    let (back, seed, step) = Model32::load(&p).unwrap();
    assert_eq!((seed, step), (13, 250));
    assert_eq!(back, m);
}
