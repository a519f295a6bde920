use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::datamodel::InteractionEvent;
use crate::numerics::{gradcheck, kernels, Adam, AdamConfig, Tensor};

fn schema() -> FeatureSchema {
    FeatureSchema {
        item_vocab: vec![15, 4],
        behavior_vocab: vec![3, 4],
        context_vocab: vec![3, 5],
    }
}

fn model_config(d: usize, heads: usize, layers: usize) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            num_layers: layers,
            d_model: d,
            num_heads: heads,
            ffn_multiplier: 2,
            max_seq_len: 12,
        },
        finetune: FinetuneConfig {
            num_queries: 3,
            head_hidden: 6,
            ..FinetuneConfig::default()
        },
        schema: schema(),
    }
}

fn build<R: Real>(cfg: &ModelConfig, seed: u64) -> (ParamStore<R>, CtrModel) {
    let mut store = ParamStore::new();
    let model = CtrModel::new(&mut store, cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (store, model)
}

fn random_seq(rng: &mut ChaCha8Rng, n: usize) -> InteractionSequence {
    InteractionSequence {
        user_id: 1,
        events: (0..n)
            .map(|_| {
                InteractionEvent::new(
                    vec![rng.random_range(1..15), rng.random_range(1..4)],
                    vec![rng.random_range(1..3), rng.random_range(1..4)],
                )
            })
            .collect(),
    }
}

fn random_target(rng: &mut ChaCha8Rng) -> Vec<u32> {
    vec![rng.random_range(1..15), rng.random_range(1..4)]
}

fn random_context(rng: &mut ChaCha8Rng) -> Vec<u32> {
    vec![rng.random_range(1..3), rng.random_range(1..5)]
}

fn fill(store: &mut ParamStore<impl Real>, prefix: &str, value: f64) {
    let ids: Vec<ParamId> = store
        .iter()
        .filter(|(_, p)| p.name.starts_with(prefix))
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        store.value_mut(id).data_mut().iter_mut().for_each(|x| *x = Real::of(value));
    }
}

fn example(rng: &mut ChaCha8Rng, n: usize) -> CtrExample {
    CtrExample {
        sequence: Arc::new(random_seq(rng, n)),
        target_item: random_target(rng),
        context_features: random_context(rng),
        label: rng.random_range(0..2),
    }
}

#[test]
fn zero_head_gives_one_half() {
    let (mut store, model) = build::<f32>(&model_config(8, 2, 2), 1);
    fill(&mut store, "ctr.head", 0.0);
    let ex = example(&mut ChaCha8Rng::seed_from_u64(2), 7);
    assert_eq!(model.predict(&store, &ex).unwrap(), 0.5);
}

#[test]
fn ablated_model_is_pooled_target_context_concat() {
    let mut cfg = model_config(8, 2, 2);
    cfg.finetune.use_uni_attn = false;
    cfg.finetune.use_qformer = false;
    let (store, model) = build::<f64>(&cfg, 3);
    assert_eq!(model.head.hidden.in_dim, 3 * 8);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ex = example(&mut rng, 6);
    let mut g = Graph::inference(&store);
    let z = model
        .forward(&mut g, &ex.sequence, &ex.context_features, &[&ex.target_item])
        .unwrap();
    let z = g.value(z).data()[0];

    let mut h = Graph::inference(&store);
    let x = model.encoder.embed_sequence(&mut h, &ex.sequence, None).unwrap();
    let st = model.encoder.encode(&mut h, x, None).unwrap();
    let pooled = h.mean_rows(st.final_state(), 6).unwrap();
    let t = model.encoder.item_embedding(&mut h, &[&ex.target_item]).unwrap();
    let c = crate::encoder::sum_embeddings(&mut h, &model.context_tables, &[&ex.context_features]).unwrap();
    let f = h.concat_cols(&[pooled, t, c]).unwrap();
    let expect = model.head.forward(&mut h, f).unwrap();
    assert_eq!(z, h.value(expect).data()[0]);
}

#[test]
fn folded_and_joint_paths_agree() {
    for tie in [false, true] {
        let mut cfg = model_config(8, 2, 2);
        cfg.finetune.tie_uni_attn = tie;
        let (store, model) = build::<f32>(&cfg, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let n = rng.random_range(1..=12);
            let ex = example(&mut rng, n);
            let mut g = Graph::inference(&store);
            let a = model
                .forward(&mut g, &ex.sequence, &ex.context_features, &[&ex.target_item])
                .unwrap();
            let b = model
                .joint_forward(&mut g, &ex.sequence, &ex.context_features, &ex.target_item)
                .unwrap()
                .logit;
            let pa = kernels::sigmoid(g.value(a).data()[0]) as f64;
            let pb = kernels::sigmoid(g.value(b).data()[0]) as f64;
            worst = worst.max((pa - pb).abs());
        }
        assert!(worst <= 1e-5, "tie={tie}: {worst}");
    }
}

#[test]
fn mp_baseline_contract() {
    let mut cfg = model_config(8, 2, 1);
    cfg.finetune.use_uni_attn = false;
    cfg.finetune.use_qformer = false;
    cfg.finetune.baseline_mp = true;
    cfg.finetune.freeze_encoder = true;
    let (mut store, model) = build::<f32>(&cfg, 7);
    fill(&mut store, "ctr.head", 0.0);
    let ex = example(&mut ChaCha8Rng::seed_from_u64(8), 5);
    assert_eq!(model.mp_baseline_forward(&store, &ex).unwrap(), 0.5);
    store.set_frozen_prefix("encoder.", false);
    assert!(matches!(model.mp_baseline_forward(&store, &ex), Err(Error::Config(_))));

    cfg.finetune.freeze_encoder = false;
    let mut s = ParamStore::<f32>::new();
    let r = CtrModel::new(&mut s, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn invalid_configurations_are_rejected() {
    let enc = model_config(8, 2, 1).encoder;
    let bad = [
        FinetuneConfig {
            baseline_mp: true,
            freeze_encoder: true,
            ..FinetuneConfig::default()
        },
        FinetuneConfig {
            num_queries: 12,
            ..FinetuneConfig::default()
        },
        FinetuneConfig {
            use_uni_attn: false,
            tie_uni_attn: true,
            ..FinetuneConfig::default()
        },
    ];
    for cfg in bad {
        assert!(matches!(cfg.validate(&enc), Err(Error::Config(_))), "{cfg:?}");
    }
}

#[test]
fn binary_ce_cases() {
    assert!((binary_ce_loss(0.5, 0) - 2f64.ln()).abs() < 1e-15);
    assert!((binary_ce_loss(0.5, 1) - 2f64.ln()).abs() < 1e-15);
    assert!(binary_ce_loss(1.0 - 1e-12, 1) < 1e-11);
    assert!(binary_ce_loss(1.0, 1) < 1e-15);
    assert!(binary_ce_loss(0.0, 1).is_finite());
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..1000 {
        let p: f64 = rng.random_range(0.001..0.999);
        let y: u8 = rng.random_range(0..2);
        let oracle = if y == 1 { -p.ln() } else { -(1.0 - p).ln() };
        assert!((binary_ce_loss(p, y) - oracle).abs() < 1e-12 * oracle.max(1.0));
    }
}

#[test]
fn single_event_makes_query_projection_irrelevant() {
    let (mut store, model) = build::<f64>(&model_config(8, 2, 2), 10);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let ex = example(&mut rng, 1);
    let run = |store: &ParamStore<f64>| {
        let mut g = Graph::inference(store);
        let user = model.encode_user(&mut g, &ex.sequence, &ex.context_features).unwrap();
        let t = model.encoder.item_embedding(&mut g, &[&ex.target_item]).unwrap();
        let out = model.uni.as_ref().unwrap().forward(&mut g, t, &user.states).unwrap();
        g.value(out).clone()
    };
    let before = run(&store);
    for layer in &model.uni.as_ref().unwrap().layers {
        let w = store.value_mut(layer.query.weight);
        w.data_mut().iter_mut().for_each(|x| *x = rng.random_range(-3.0..3.0));
    }
    assert!(run(&store).max_abs_diff(&before) < 1e-12);
}

#[test]
fn scoring_leaves_sequence_states_untouched() {
    let (store, model) = build::<f32>(&model_config(8, 2, 2), 12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let ex = example(&mut rng, 9);
    let mut g = Graph::inference(&store);
    let user = model.encode_user(&mut g, &ex.sequence, &ex.context_features).unwrap();
    let snapshot: Vec<Tensor> = user.states.layer_outputs.iter().map(|&v| g.value(v).clone()).collect();
    let t1 = random_target(&mut rng);
    let t2 = random_target(&mut rng);
    model.score(&mut g, &user, &[&t1]).unwrap();
    model.score(&mut g, &user, &[&t2]).unwrap();
    for (v, s) in user.states.layer_outputs.iter().zip(&snapshot) {
        assert_eq!(g.value(*v), s);
    }

    let mut fresh = Graph::inference(&store);
    let alone = model.encode_user(&mut fresh, &ex.sequence, &ex.context_features).unwrap();
    for (v, s) in alone.states.layer_outputs.iter().zip(&snapshot) {
        assert_eq!(fresh.value(*v), s);
    }
}

fn layer_norm_ref(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let r = 1.0 / (var + 1e-6).sqrt();
    x.iter()
        .zip(gain.iter().zip(bias))
        .map(|(v, (g, b))| (v - mean) * r * g + b)
        .collect()
}

fn affine_ref(x: &[f64], w: &Tensor<f64>, b: Option<&Tensor<f64>>) -> Vec<f64> {
    (0..w.cols())
        .map(|j| b.map_or(0.0, |b| b.data()[j]) + (0..x.len()).map(|i| x[i] * w.at(i, j)).sum::<f64>())
        .collect()
}

fn gelu_ref(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

#[test]
fn uni_attention_matches_hand_evaluation() {
    let cfg = model_config(4, 1, 1);
    let (mut store, model) = build::<f64>(&cfg, 14);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        store
            .value_mut(id)
            .data_mut()
            .iter_mut()
            .for_each(|x| *x = rng.random_range(-0.8..0.8));
    }
    let ex = example(&mut rng, 3);
    let mut g = Graph::inference(&store);
    let user = model.encode_user(&mut g, &ex.sequence, &ex.context_features).unwrap();
    let t = model.encoder.item_embedding(&mut g, &[&ex.target_item]).unwrap();
    let uni = model.uni.as_ref().unwrap();
    let out = uni.forward(&mut g, t, &user.states).unwrap();
    let got = g.value(out).data().to_vec();

    let v = |id: ParamId| store.value(id).clone();
    let layer = &uni.layers[0];
    let enc = &model.encoder.layers[0];
    let emb_in = g.value(user.states.layer_outputs[0]).clone();
    let target: Vec<f64> = (0..4)
        .map(|j| {
            v(model.encoder.item_tables[0]).at(ex.target_item[0] as usize, j)
                + v(model.encoder.item_tables[1]).at(ex.target_item[1] as usize, j)
                + v(uni.target_position).data()[j]
        })
        .collect();
    let keys: Vec<Vec<f64>> = (0..3)
        .map(|r| {
            let h = layer_norm_ref(emb_in.row(r), v(enc.norm1.gain).data(), v(enc.norm1.bias).data());
            affine_ref(&h, &v(enc.attn.key.weight), enc.attn.key.bias.map(v).as_ref())
        })
        .collect();
    let values: Vec<Vec<f64>> = (0..3)
        .map(|r| {
            let h = layer_norm_ref(emb_in.row(r), v(enc.norm1.gain).data(), v(enc.norm1.bias).data());
            affine_ref(&h, &v(enc.attn.value.weight), enc.attn.value.bias.map(v).as_ref())
        })
        .collect();
    let h = layer_norm_ref(&target, v(layer.norm1.gain).data(), v(layer.norm1.bias).data());
    let q = affine_ref(&h, &v(layer.query.weight), layer.query.bias.map(v).as_ref());
    let scores: Vec<f64> = keys
        .iter()
        .map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / 2.0)
        .collect();
    let m = scores.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    let a: Vec<f64> = (0..4)
        .map(|j| (0..3).map(|r| e[r] / z * values[r][j]).sum())
        .collect();
    let o = affine_ref(&a, &v(layer.output.weight), layer.output.bias.map(v).as_ref());
    let x: Vec<f64> = target.iter().zip(&o).map(|(t, o)| t + o).collect();
    let h = layer_norm_ref(&x, v(layer.norm2.gain).data(), v(layer.norm2.bias).data());
    let up: Vec<f64> = affine_ref(&h, &v(layer.ffn.up.weight), layer.ffn.up.bias.map(v).as_ref())
        .into_iter()
        .map(gelu_ref)
        .collect();
    let down = affine_ref(&up, &v(layer.ffn.down.weight), layer.ffn.down.bias.map(v).as_ref());
    for j in 0..4 {
        assert!((got[j] - (x[j] + down[j])).abs() < 1e-12);
    }
}

#[test]
fn uniform_query_attention_averages_values() {
    let mut cfg = model_config(8, 2, 1);
    cfg.finetune.num_queries = 1;
    let (mut store, model) = build::<f64>(&cfg, 16);
    let qf = model.qformer.clone().unwrap();
    fill(&mut store, "ctr.qformer.queries", 0.0);
    fill(&mut store, "ctr.qformer.attn.query", 0.0);
    fill(&mut store, "ctr.qformer.ffn", 0.0);
    fill(&mut store, "ctr.qformer.attn.output", 0.0);
    let w = store.value_mut(qf.attn.output.weight);
    for i in 0..8 {
        w.data_mut()[i * 8 + i] = 1.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let data: Vec<f64> = (0..5 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut g = Graph::inference(&store);
    let mem = g.input(Tensor::new(vec![5, 8], data).unwrap());
    let out = qf.forward(&mut g, mem, None, None).unwrap();
    let m = qf.memory_norm.forward(&mut g, mem).unwrap();
    let vals = qf.attn.value.forward(&mut g, m).unwrap();
    let mean = g.mean_rows(vals, 5).unwrap();
    assert!(g.value(out).max_abs_diff(g.value(mean)) < 1e-12);
}

#[test]
fn query_outputs_ignore_the_candidate() {
    let (store, model) = build::<f32>(&model_config(8, 2, 2), 18);
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let ex = example(&mut rng, 8);
    let run = |target: &[u32]| {
        let mut g = Graph::inference(&store);
        let user = model.encode_user(&mut g, &ex.sequence, &ex.context_features).unwrap();
        model.score(&mut g, &user, &[target]).unwrap();
        g.value(user.queries.unwrap()).clone()
    };
    assert_eq!(run(&random_target(&mut rng)), run(&random_target(&mut rng)));
}

#[test]
fn zero_context_equals_no_context() {
    let (store, model) = build::<f32>(&model_config(8, 2, 1), 20);
    let qf = model.qformer.clone().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let data: Vec<f32> = (0..6 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut g = Graph::inference(&store);
    let mem = g.input(Tensor::new(vec![6, 8], data).unwrap());
    let zero = g.input(Tensor::zeros(&[1, 8]));
    let a = qf.forward(&mut g, mem, Some(zero), None).unwrap();
    let b = qf.forward(&mut g, mem, None, None).unwrap();
    assert_eq!(g.value(a), g.value(b));
}

fn one_step(store: &mut ParamStore<f32>, model: &CtrModel, ex: &CtrExample) {
    let grads = {
        let mut g = Graph::new(store);
        let z = model
            .forward(&mut g, &ex.sequence, &ex.context_features, &[&ex.target_item])
            .unwrap();
        let loss = g.bce_with_logits(z, &[ex.label as f32]).unwrap();
        g.backward(loss).unwrap()
    };
    grads.apply(store);
    Adam::new(AdamConfig::default()).step(store);
}

#[test]
fn untied_projections_diverge_and_tied_ones_alias() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let ex = example(&mut rng, 6);
    for tie in [false, true] {
        let mut cfg = model_config(8, 2, 2);
        cfg.finetune.tie_uni_attn = tie;
        let (mut store, model) = build::<f32>(&cfg, 23);
        let uni = model.uni.clone().unwrap();
        for (u, e) in uni.layers.iter().zip(&model.encoder.layers) {
            assert_eq!(u.query.weight == e.attn.query.weight, tie);
            assert_eq!(u.output.weight == e.attn.output.weight, tie);
        }
        one_step(&mut store, &model, &ex);
        for (u, e) in uni.layers.iter().zip(&model.encoder.layers) {
            let same = store.value(u.query.weight) == store.value(e.attn.query.weight);
            assert_eq!(same, tie);
        }
    }
}

#[test]
fn candidate_path_reaches_shared_key_value_projections() {
    let (store, model) = build::<f64>(&model_config(8, 2, 2), 24);
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let ex = example(&mut rng, 5);
    let mut g = Graph::new(&store);
    let user = model.encode_user(&mut g, &ex.sequence, &ex.context_features).unwrap();
    let t = model.encoder.item_embedding(&mut g, &[&ex.target_item]).unwrap();
    let out = model.uni.as_ref().unwrap().forward(&mut g, t, &user.states).unwrap();
    let loss = g.sum(out);
    let grads = g.backward(loss).unwrap();
    // The last layer's keys and values feed nothing but uni cross-attention here.
    let last = model.encoder.layers.last().unwrap();
    for id in [last.attn.key.weight, last.attn.value.weight] {
        let gr = grads.param(id).unwrap();
        assert!(gr.iter().any(|&x| x != 0.0));
    }
}

#[test]
fn frozen_encoder_gets_no_gradient() {
    let mut cfg = model_config(8, 2, 1);
    cfg.finetune.freeze_encoder = true;
    let (store, model) = build::<f32>(&cfg, 26);
    let ex = example(&mut ChaCha8Rng::seed_from_u64(27), 5);
    let mut g = Graph::new(&store);
    let z = model
        .forward(&mut g, &ex.sequence, &ex.context_features, &[&ex.target_item])
        .unwrap();
    let loss = g.bce_with_logits(z, &[1.0]).unwrap();
    let grads = g.backward(loss).unwrap();
    for (id, p) in store.iter() {
        assert_eq!(grads.param(id).is_some(), !p.name.starts_with("encoder."), "{}", p.name);
    }
}

#[test]
fn ctr_loss_gradients_match_finite_differences() {
    let variants = [
        FinetuneConfig::default(),
        FinetuneConfig {
            tie_uni_attn: true,
            ..FinetuneConfig::default()
        },
    ];
    for (i, ft) in variants.into_iter().enumerate() {
        let mut cfg = model_config(4, 2, 1);
        cfg.finetune = FinetuneConfig {
            num_queries: 2,
            head_hidden: 3,
            ..ft
        };
        let (mut store, model) = build::<f64>(&cfg, 30 + i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        // Initial weights are small enough that deep gradients sink below
        // finite-difference noise.
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            for x in store.value_mut(id).data_mut() {
                *x += rng.random_range(-0.5..0.5);
            }
        }
        let ex = example(&mut rng, 4);
        let t2 = random_target(&mut rng);
        let report = gradcheck::check(
            &mut store,
            |g| {
                let z = model.forward(g, &ex.sequence, &ex.context_features, &[&ex.target_item, &t2])?;
                g.bce_with_logits(z, &[1.0, 0.0])
            },
            1e-5,
            10,
        )
        .unwrap();
        let (name, err) = report.worst();
        assert!(err < 1e-4, "{name}: {err}");
    }
}

#[test]
fn prediction_is_deterministic() {
    let (store, model) = build::<f32>(&model_config(8, 2, 2), 40);
    let ex = example(&mut ChaCha8Rng::seed_from_u64(41), 10);
    let p = model.predict(&store, &ex).unwrap();
    assert!(p > 0.0 && p < 1.0);
    assert_eq!(p, model.predict(&store, &ex).unwrap());
    let (store2, model2) = build::<f32>(&model_config(8, 2, 2), 40);
    assert_eq!(p, model2.predict(&store2, &ex).unwrap());
}

