use srp4ctr::datamodel::{
    corpus_digest, generate_synthetic, load_dataset, sample_mask_plan, save_dataset,
    InteractionEvent, InteractionSequence, SyntheticConfig,
};
use srp4ctr::runtime::tail_share;

#[test]
fn reference_positive_rate() {
    let cfg = SyntheticConfig::default();
    let corpus = generate_synthetic(&cfg, 42).unwrap();
    let pos = corpus.examples.iter().filter(|e| e.label == 1).count();
    let rate = pos as f64 / corpus.examples.len() as f64;
    assert!((rate - cfg.positive_rate).abs() <= 0.02, "positive rate {rate}");
}

#[test]
fn bottom_fifth_of_items_is_a_thin_tail() {
    let cfg = SyntheticConfig::default();
    for seed in [1, 42] {
        let corpus = generate_synthetic(&cfg, seed).unwrap();
        let share = tail_share(&corpus.item_frequency(cfg.num_items + 1)).unwrap();
        assert!((0.01..=0.15).contains(&share), "seed {seed}: tail share {share}");
    }
}

#[test]
fn reference_corpus_round_trips_through_a_file() {
    let cfg = SyntheticConfig::default();
    let corpus = generate_synthetic(&cfg, 42).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.tsv");
    save_dataset(&corpus, &path).unwrap();
    let back = load_dataset(&path, Some(&cfg.schema())).unwrap();
    assert_eq!(back, corpus);
    assert_eq!(corpus_digest(&back), corpus_digest(&corpus));
    assert_eq!(
        corpus_digest(&generate_synthetic(&cfg, 42).unwrap()),
        corpus_digest(&corpus)
    );
    assert_ne!(
        corpus_digest(&generate_synthetic(&cfg, 43).unwrap()),
        corpus_digest(&corpus)
    );
}

#[test]
fn mask_rates_over_long_sequences() {
    let seq = InteractionSequence {
        user_id: 1,
        events: (0..200).map(|i| InteractionEvent::new(vec![i + 1], vec![1])).collect(),
    };
    let (mut item, mut behavior) = (0usize, 0usize);
    let draws = 10_000;
    for seed in 0..draws {
        let plan = sample_mask_plan(&seq, 0.2, 0.2, seed).unwrap();
        item += plan.item_positions.len();
        behavior += plan.behavior_positions.len();
    }
    let total = (draws * 200) as f64;
    let item_rate = item as f64 / total;
    let behavior_rate = behavior as f64 / total;
    assert!((item_rate - 0.2).abs() <= 0.01, "{item_rate}");
    assert!((behavior_rate - 0.2 * 0.8).abs() <= 0.01, "{behavior_rate}");
}
