use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::datamodel::{FeatureSchema, InteractionEvent};
use crate::encoder::EncoderConfig;
use crate::finetune::FinetuneConfig;

fn schema() -> FeatureSchema {
    FeatureSchema {
        item_vocab: vec![30, 5, 4],
        behavior_vocab: vec![6, 5],
        context_vocab: vec![3, 6],
    }
}

fn config(layers: usize, d: usize, heads: usize, l: usize) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            num_layers: layers,
            d_model: d,
            num_heads: heads,
            ffn_multiplier: 4,
            max_seq_len: l,
        },
        finetune: FinetuneConfig {
            head_hidden: 16,
            ..FinetuneConfig::default()
        },
        schema: schema(),
    }
}

fn request(rng: &mut ChaCha8Rng, n: usize, b: usize) -> ServingRequest {
    let event = |rng: &mut ChaCha8Rng| {
        InteractionEvent::new(
            vec![rng.random_range(1..30), rng.random_range(1..5), rng.random_range(1..4)],
            vec![rng.random_range(1..6), rng.random_range(1..5)],
        )
    };
    ServingRequest {
        sequence: Arc::new(InteractionSequence {
            user_id: 0,
            events: (0..n).map(|_| event(rng)).collect(),
        }),
        context: vec![rng.random_range(1..3), rng.random_range(1..6)],
        candidates: (0..b).map(|_| event(rng).item_features).collect(),
    }
}

fn model(cfg: &ModelConfig, seed: u64) -> (ParamStore<f32>, CtrModel) {
    let mut store = ParamStore::new();
    let m = CtrModel::new(&mut store, cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (store, m)
}

#[test]
fn reference_ratio_arithmetic() {
    let r = metric_ratio(26.88, 64.56).unwrap();
    assert_eq!(format!("{r:.2}"), "2.40");
    let r = metric_ratio(8.96, 51.22).unwrap();
    assert_eq!(format!("{r:.2}"), "5.72");
    assert_eq!(metric_ratio(3.5, 3.5).unwrap(), 1.0);
    assert!(matches!(metric_ratio(0.0, 1.0), Err(Error::Contract(_))));
}

#[test]
fn head_only_model_scales_with_batch() {
    let mut cfg = config(0, 8, 2, 10);
    cfg.finetune.use_uni_attn = false;
    cfg.finetune.use_qformer = false;
    for b in [1, 7, 100] {
        let r = count_flops(&cfg, b).unwrap();
        assert_eq!(r.ratio, b as f64);
        assert_eq!(r.stage(Stage::SequenceEncoder), 0);
    }
}

#[test]
fn encoder_only_model_is_fully_foldable() {
    let encoder = stage_flops(&config(2, 16, 2, 20), 20)
        .into_iter()
        .filter(|s| s.stage == Stage::SequenceEncoder)
        .collect::<Vec<_>>();
    for b in [1, 3, 100] {
        assert_eq!(CostReport::from_stages(encoder.clone(), b).unwrap().ratio, 1.0);
    }
}

#[test]
fn accounting_identities() {
    let r = count_flops(&config(2, 16, 2, 20), 100).unwrap();
    let all: u64 = r.stages.iter().map(|s| s.flops).sum();
    let folded: u64 = r.stages.iter().filter(|s| s.foldable).map(|s| s.flops).sum();
    assert_eq!(r.efficiency_flops, all);
    assert_eq!(r.inference_flops, folded + 100 * (all - folded));
    assert!(r.ratio >= 1.0);
    assert!(matches!(CostReport::from_stages(r.stages, 0), Err(Error::Contract(_))));
}

#[test]
fn analytic_counts_match_the_instrumented_counter() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..12 {
        let heads = [1, 2, 4][rng.random_range(0..3)];
        let d = heads * rng.random_range(1..5) * 2;
        let l = rng.random_range(5..16);
        let mut cfg = config(rng.random_range(0..3), d, heads, l);
        cfg.finetune.use_uni_attn = rng.random_bool(0.7);
        cfg.finetune.use_qformer = rng.random_bool(0.7);
        cfg.finetune.context_queries = rng.random_bool(0.5);
        cfg.finetune.num_queries = rng.random_range(1..l);
        cfg.finetune.head_hidden = rng.random_range(1..20);
        let (store, m) = model(&cfg, trial);
        let n = rng.random_range(1..=l);
        let b = rng.random_range(1..6);
        let req = request(&mut rng, n, b);
        let folded = serve_folded(&req, &m, &store).unwrap();
        for s in stage_flops(&cfg, n) {
            let mult = if s.foldable { 1 } else { b as u64 };
            assert_eq!(folded.flops.get(s.stage), s.flops * mult, "{cfg:?} {:?}", s.stage);
        }
        let naive = serve_naive(&req, &m, &store).unwrap();
        for s in stage_flops(&cfg, n) {
            assert_eq!(naive.flops.get(s.stage), s.flops * b as u64);
        }
        assert!(max_deviation(&folded, &naive) <= 1e-5);
    }
}

#[test]
fn batch_of_one_costs_the_same_either_way() {
    let cfg = config(2, 8, 2, 12);
    let (store, m) = model(&cfg, 3);
    let req = request(&mut ChaCha8Rng::seed_from_u64(4), 12, 1);
    let folded = serve_folded(&req, &m, &store).unwrap();
    let naive = serve_naive(&req, &m, &store).unwrap();
    assert_eq!(folded.flops, naive.flops);
    assert_eq!(folded.flops.total(), count_flops(&cfg, 1).unwrap().efficiency_flops);
}

#[test]
fn folding_amortises_the_user_part() {
    let cfg = config(2, 8, 2, 12);
    let mut prev = f64::INFINITY;
    for b in [1usize, 2, 5, 10, 50, 100] {
        let r = count_flops(&cfg, b).unwrap();
        let naive = b as u64 * r.efficiency_flops;
        let ratio = r.inference_flops as f64 / naive as f64;
        assert!(ratio < prev);
        prev = ratio;
    }
}

#[test]
fn report_formats() {
    let r = count_flops(&config(1, 8, 2, 10), 4).unwrap();
    let tsv = r.to_tsv();
    let lines: Vec<&str> = tsv.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("sequence_encoder\t"));
    assert!(lines[0].ends_with("\ttrue"));
    assert!(lines[3].starts_with("head\t") && lines[3].ends_with("\tfalse"));
    let table = r.to_table();
    assert!(table.contains(&format!("{:.2}", r.ratio)));
    assert!(table.contains("inference_flops"));
}
