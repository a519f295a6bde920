use super::*;
use crate::datamodel::{generate_synthetic, SyntheticConfig};
use crate::encoder::EncoderConfig;
use crate::finetune::FinetuneConfig;

fn data() -> (SyntheticConfig, Corpus) {
    let cfg = SyntheticConfig {
        num_users: 40,
        num_items: 30,
        num_categories: 5,
        max_seq_len: 10,
        min_seq_len: 4,
        ..SyntheticConfig::default()
    };
    let corpus = generate_synthetic(&cfg, 3).unwrap();
    (cfg, corpus)
}

fn model(data: &SyntheticConfig) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            num_layers: 1,
            d_model: 8,
            num_heads: 2,
            ffn_multiplier: 2,
            max_seq_len: data.max_seq_len,
        },
        finetune: FinetuneConfig {
            num_queries: 2,
            head_hidden: 8,
            from_scratch: true,
            ..FinetuneConfig::default()
        },
        schema: data.schema(),
    }
}

fn spec(phase: Phase, steps: usize) -> TrainRunSpec {
    let (d, _) = data();
    let mut s = TrainRunSpec::new(phase, model(&d));
    s.steps = steps;
    s.batch = 4;
    s.eval_every = 3;
    s.optimizer.total_steps = steps;
    s.optimizer.lr_initial = 1e-2;
    s.val_fraction = 0.25;
    s
}

#[test]
fn zero_steps_rejected() {
    let (_, corpus) = data();
    let s = spec(Phase::Pretrain, 0);
    assert!(matches!(run_pretrain(&s, &corpus), Err(Error::Config(_))));
}

#[test]
fn zero_learning_rate_freezes_everything() {
    let (_, corpus) = data();
    let mut s = spec(Phase::Pretrain, 4);
    s.optimizer.lr_initial = 0.0;
    s.optimizer.lr_end = 0.0;
    let mut t = Pretrainer::new(&s, &corpus).unwrap();
    let before = t.store.digest("");
    let l0 = t.evaluate().unwrap();
    for _ in 0..4 {
        t.step().unwrap();
    }
    assert_eq!(t.store.digest(""), before);
    assert_eq!(t.evaluate().unwrap(), l0);
}

#[test]
fn batches_walk_through_epoch_permutations() {
    let n = 10;
    let mut seen = vec![0; n];
    for step in 0..5 {
        for i in batch_indices(7, step, 4, n) {
            seen[i] += 1;
        }
    }
    assert!(seen.iter().all(|&c| c == 2));
    assert_eq!(batch_indices(7, 3, 4, n), batch_indices(7, 3, 4, n));
}

#[test]
fn metric_lines_round_trip() {
    let rows = vec![
        MetricRow {
            step: 0,
            metric: "eval_item_loss".into(),
            value: 3.4011973816621555,
        },
        MetricRow {
            step: 200,
            metric: "val_auc".into(),
            value: 0.75,
        },
    ];
    let text = format_metrics(&rows);
    assert_eq!(text.lines().next().unwrap(), "0\teval_item_loss\t3.4011973816621555");
    assert_eq!(parse_metrics(&text).unwrap(), rows);
}

#[test]
fn pretraining_runs_are_bitwise_reproducible() {
    let (_, corpus) = data();
    let dir = tempfile::tempdir().unwrap();
    let mut a = spec(Phase::Pretrain, 5);
    a.run_dir = Some(dir.path().join("a"));
    let mut b = a.clone();
    b.run_dir = Some(dir.path().join("b"));
    let ra = run_pretrain(&a, &corpus).unwrap();
    let rb = run_pretrain(&b, &corpus).unwrap();
    assert_eq!(ra.metrics, rb.metrics);
    let read = |p: &Path| std::fs::read(p).unwrap();
    assert_eq!(read(&ra.checkpoint.unwrap()), read(&rb.checkpoint.unwrap()));
    assert_eq!(
        read(&dir.path().join("a/metrics.tsv")),
        read(&dir.path().join("b/metrics.tsv"))
    );
}

#[test]
fn restored_pretrainer_continues_identically() {
    let (_, corpus) = data();
    let s = spec(Phase::Pretrain, 10);
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("mid.srpc");

    let mut straight = Pretrainer::new(&s, &corpus).unwrap();
    for _ in 0..3 {
        straight.step().unwrap();
    }
    straight.save(&ckpt).unwrap();
    straight.step().unwrap();

    let mut resumed = Pretrainer::new(&s, &corpus).unwrap();
    resumed.restore(&ckpt).unwrap();
    assert_eq!(resumed.step_count(), 3);
    resumed.step().unwrap();
    assert_eq!(resumed.store.digest(""), straight.store.digest(""));
}

#[test]
fn restored_finetuner_continues_identically() {
    let (_, corpus) = data();
    let s = spec(Phase::Finetune, 10);
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("mid.srpc");
    let mut straight = Finetuner::new(&s, &corpus).unwrap();
    for _ in 0..2 {
        straight.step().unwrap();
    }
    straight.save(&ckpt).unwrap();
    straight.step().unwrap();
    let mut resumed = Finetuner::new(&s, &corpus).unwrap();
    resumed.restore(&ckpt).unwrap();
    resumed.step().unwrap();
    assert_eq!(resumed.store.digest(""), straight.store.digest(""));
}

#[test]
fn scratch_ignores_the_checkpoint_argument() {
    let (_, corpus) = data();
    let mut s = spec(Phase::Finetune, 3);
    s.init_checkpoint = Some(PathBuf::from("/nonexistent/never.srpc"));
    let a = run_finetune(&s, &corpus).unwrap();
    s.init_checkpoint = None;
    let b = run_finetune(&s, &corpus).unwrap();
    assert_eq!(a.trainer.store.digest(""), b.trainer.store.digest(""));
    assert!((0.0..=1.0).contains(&a.best_auc));
}

#[test]
fn missing_checkpoint_without_scratch_is_config_error() {
    let (_, corpus) = data();
    let mut s = spec(Phase::Finetune, 3);
    s.model.finetune.from_scratch = false;
    assert!(matches!(Finetuner::new(&s, &corpus), Err(Error::Config(_))));
}

#[test]
fn frozen_encoder_keeps_its_digest() {
    let (_, corpus) = data();
    let dir = tempfile::tempdir().unwrap();
    let mut p = spec(Phase::Pretrain, 3);
    p.run_dir = Some(dir.path().join("pre"));
    let pre = run_pretrain(&p, &corpus).unwrap();

    let mut s = spec(Phase::Finetune, 6);
    s.model.finetune.from_scratch = false;
    s.model.finetune.freeze_encoder = true;
    s.init_checkpoint = pre.checkpoint.clone();
    let t = Finetuner::new(&s, &corpus).unwrap();
    let before = t.store.digest("encoder.");
    assert_eq!(before, pre.trainer.store.digest("encoder."));
    let out = run_finetune(&s, &corpus).unwrap();
    assert_eq!(out.trainer.store.digest("encoder."), before);
    assert_ne!(out.trainer.store.digest("ctr."), t.store.digest("ctr."));
}

#[test]
fn mismatched_checkpoint_names_the_tensor() {
    let (d, corpus) = data();
    let dir = tempfile::tempdir().unwrap();
    let mut p = spec(Phase::Pretrain, 1);
    p.run_dir = Some(dir.path().join("pre"));
    let pre = run_pretrain(&p, &corpus).unwrap();

    let mut s = spec(Phase::Finetune, 1);
    s.model = model(&d);
    s.model.encoder.d_model = 12;
    s.model.finetune.from_scratch = false;
    s.init_checkpoint = pre.checkpoint;
    match Finetuner::new(&s, &corpus) {
        Err(Error::Load { name, .. }) => assert!(name.starts_with("encoder."), "{name}"),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("shape mismatch accepted"),
    }
}

#[test]
fn best_checkpoint_is_tracked() {
    let (_, corpus) = data();
    let dir = tempfile::tempdir().unwrap();
    let mut s = spec(Phase::Finetune, 7);
    s.run_dir = Some(dir.path().join("ft"));
    let out = run_finetune(&s, &corpus).unwrap();
    let aucs: Vec<(usize, f64)> = out
        .metrics
        .iter()
        .filter(|r| r.metric == "val_auc")
        .map(|r| (r.step, r.value))
        .collect();
    assert_eq!(aucs.iter().map(|a| a.0).collect::<Vec<_>>(), vec![3, 6, 7]);
    let max = aucs.iter().map(|a| a.1).fold(f64::MIN, f64::max);
    assert_eq!(out.best_auc, max);
    assert_eq!(out.best_evaluation().unwrap().auc().unwrap(), max);
    assert!(out.checkpoint.unwrap().exists());
    assert!(dir.path().join("ft/metrics.tsv").exists());
}

#[test]
fn users_split_without_overlap() {
    let (_, corpus) = data();
    let groups = group_by_user(&corpus.examples);
    let (train, val) = split_users(groups.clone(), 0.1, 9);
    assert_eq!(val.len(), 4);
    assert_eq!(train.len() + val.len(), groups.len());
    for v in &val {
        assert!(train.iter().all(|t| t.sequence.user_id != v.sequence.user_id));
    }
    let (_, val2) = split_users(groups, 0.1, 9);
    let ids = |g: &[UserGroup]| g.iter().map(|x| x.sequence.user_id).collect::<Vec<_>>();
    assert_eq!(ids(&val), ids(&val2));
}
