//! Command-line entry point.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{key_help, Config};
use crate::costmodel::{count_flops, max_deviation, serve_folded, serve_naive, stage_flops, ServingRequest};
use crate::datamodel::{self, corpus_digest, generate_synthetic, group_by_user, Corpus};
use crate::error::{Error, Result};
use crate::finetune::CtrModel;
use crate::numerics::ParamStore;
use crate::runtime::{self, format_metrics, longtail_report, split_users, MetricRow, Phase};

#[derive(Parser, Debug)]
#[command(name = "srp4ctr", version, about = "Sequence pre-training for CTR prediction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory [default: runs/<command>].
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ServeMode {
    Folded,
    Naive,
    Both,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic corpus.
    GenData(#[command(flatten)] Common),
    /// Masked-sequence pre-training.
    Pretrain(#[command(flatten)] Common),
    /// CTR fine-tuning; keeps the best validation checkpoint.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Pre-trained checkpoint (overrides finetune.init_checkpoint).
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Validation AUC and long-tail report of a fine-tuned checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Analytic FLOPs report.
    Flops {
        #[command(flatten)]
        common: Common,
        /// Candidates per request (overrides serve.batch).
        #[arg(long)]
        batch: Option<usize>,
    },
    /// Score requests with folded and/or naive inference.
    ServeSim {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long, value_enum, default_value_t = ServeMode::Both)]
        mode: ServeMode,
        /// Model parameters; random initialisation when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Pretrain(_) => "pretrain",
            Command::Finetune { .. } => "finetune",
            Command::Eval { .. } => "eval",
            Command::Flops { .. } => "flops",
            Command::ServeSim { .. } => "serve-sim",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::GenData(c) | Command::Pretrain(c) => c,
            Command::Finetune { common, .. }
            | Command::Eval { common, .. }
            | Command::Flops { common, .. }
            | Command::ServeSim { common, .. } => common,
        }
    }
}

/// Parses `argv`, runs the command and returns the process exit code:
/// 0 on success, 1 on invalid input, 2 on runtime failure.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let help = key_help();
    let command = Cli::command()
        .after_help(help.clone())
        .mut_subcommands(|s| s.after_help(help.clone()));
    let cli = match command
        .try_get_matches_from(argv)
        .and_then(|m| Cli::from_arg_matches(&m))
    {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(&cli.command) {
        Ok(report) => {
            print!("{report}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

/// File, then `--set` overrides, then command flags.
pub fn resolve_config(command: &Command) -> Result<Config> {
    let common = command.common();
    let mut cfg = match &common.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    for o in &common.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    match command {
        Command::Finetune { init: Some(p), .. } => cfg.init_checkpoint = p.display().to_string(),
        Command::Flops { batch: Some(b), .. } | Command::ServeSim { batch: Some(b), .. } => cfg.serve.batch = *b,
        _ => {}
    }
    Ok(cfg)
}

fn out_dir(command: &Command) -> PathBuf {
    command
        .common()
        .out
        .clone()
        .unwrap_or_else(|| Path::new("runs").join(command.name()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// The dataset named by `data.path`, or the synthetic corpus for the seed.
pub fn load_corpus(cfg: &Config) -> Result<Corpus> {
    if cfg.data_path.is_empty() {
        generate_synthetic(&cfg.data, cfg.seed)
    } else {
        datamodel::load_dataset(Path::new(&cfg.data_path), Some(&cfg.data.schema()))
    }
}

/// Runs one command and returns its stdout report.
pub fn run(command: &Command) -> Result<String> {
    let cfg = resolve_config(command)?;
    let out = out_dir(command);
    let mut report = String::new();
    match command {
        Command::GenData(_) => {
            cfg.data.validate()?;
            let corpus = generate_synthetic(&cfg.data, cfg.seed)?;
            write(&out.join("config"), &cfg.to_text())?;
            datamodel::save_dataset(&corpus, &out.join("dataset.tsv"))?;
            writeln!(report, "sequences\t{}", corpus.sequences.len()).unwrap();
            writeln!(report, "examples\t{}", corpus.examples.len()).unwrap();
            writeln!(report, "digest\t{}", corpus_digest(&corpus)).unwrap();
        }
        Command::Pretrain(_) => {
            let mut spec = cfg.run_spec(Phase::Pretrain);
            spec.validate()?;
            let corpus = load_corpus(&cfg)?;
            spec.run_dir = Some(out.clone());
            write(&out.join("config"), &cfg.to_text())?;
            let res = runtime::run_pretrain(&spec, &corpus)?;
            writeln!(report, "initial_item_loss\t{}", res.initial.item_loss).unwrap();
            writeln!(report, "final_item_loss\t{}", res.last.item_loss).unwrap();
            writeln!(report, "final_behavior_loss\t{}", res.last.behavior_loss).unwrap();
            if let Some(c) = res.checkpoint {
                writeln!(report, "checkpoint\t{}", c.display()).unwrap();
            }
        }
        Command::Finetune { .. } => {
            let mut spec = cfg.run_spec(Phase::Finetune);
            spec.validate()?;
            let corpus = load_corpus(&cfg)?;
            spec.run_dir = Some(out.clone());
            write(&out.join("config"), &cfg.to_text())?;
            let res = runtime::run_finetune(&spec, &corpus)?;
            writeln!(report, "best_val_auc\t{}", res.best_auc).unwrap();
            writeln!(report, "best_step\t{}", res.best_step).unwrap();
            writeln!(report, "final_val_auc\t{}", res.final_auc).unwrap();
            if let Some(c) = res.checkpoint {
                writeln!(report, "checkpoint\t{}", c.display()).unwrap();
            }
        }
        Command::Eval { checkpoint: ckpt, .. } => {
            let model_cfg = cfg.model();
            model_cfg.validate()?;
            let corpus = load_corpus(&cfg)?;
            let (store, model) = load_model(&cfg, Some(ckpt))?;
            let (_, val) = split_users(group_by_user(&corpus.examples), cfg.val_fraction, cfg.seed);
            let ev = runtime::evaluate_groups(&model, &store, &val)?;
            let freq = corpus.item_frequency(model_cfg.schema.item_vocab[0]);
            let lt = longtail_report(&ev.scores, &ev.labels, &ev.items, &freq)?;
            let mut rows = vec![("val_auc", lt.overall_auc)];
            if let (Some(t), Some(d)) = (lt.tail_auc, lt.diff) {
                rows.push(("tail_auc", t));
                rows.push(("tail_diff", d));
            }
            let metrics: Vec<MetricRow> = rows
                .iter()
                .map(|&(m, v)| MetricRow {
                    step: 0,
                    metric: m.into(),
                    value: v,
                })
                .collect();
            write(&out.join("config"), &cfg.to_text())?;
            write(&out.join("metrics.tsv"), &format_metrics(&metrics))?;
            for (m, v) in rows {
                writeln!(report, "{m}\t{v}").unwrap();
            }
            writeln!(report, "tail_examples\t{}", lt.tail_examples).unwrap();
        }
        Command::Flops { .. } => {
            let r = count_flops(&cfg.model(), cfg.serve.batch)?;
            write(&out.join("config"), &cfg.to_text())?;
            write(&out.join("flops.tsv"), &r.to_tsv())?;
            report = r.to_table();
        }
        Command::ServeSim { mode, checkpoint: ckpt, .. } => {
            report = serve_sim(&cfg, *mode, ckpt.as_deref(), &out)?;
        }
    }
    Ok(report)
}

fn load_model(cfg: &Config, ckpt: Option<&Path>) -> Result<(ParamStore<f32>, CtrModel)> {
    runtime::load_ctr_model(&cfg.model(), cfg.seed, ckpt)
}

fn serve_sim(cfg: &Config, mode: ServeMode, ckpt: Option<&Path>, out: &Path) -> Result<String> {
    if cfg.serve.batch == 0 || cfg.serve.requests == 0 {
        return Err(Error::Config("serve.batch and serve.requests must be positive".into()));
    }
    let model_cfg = cfg.model();
    model_cfg.validate()?;
    let corpus = load_corpus(cfg)?;
    let (store, model) = load_model(cfg, ckpt)?;

    let mut catalog: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for e in corpus.sequences.iter().flat_map(|s| &s.events) {
        catalog.entry(e.item_id()).or_insert_with(|| e.item_features.clone());
    }
    let catalog: Vec<Vec<u32>> = catalog.into_values().collect();
    let groups = group_by_user(&corpus.examples);
    if catalog.is_empty() || groups.is_empty() {
        return Err(Error::Config("serving needs a corpus with labelled users".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut tsv = String::from("request\tmode\tflops\tpredicted\n");
    let mut worst: f64 = 0.0;
    let (mut folded_total, mut naive_total) = (0u64, 0u64);
    for r in 0..cfg.serve.requests {
        let g = &groups[r % groups.len()];
        let req = ServingRequest {
            sequence: g.sequence.clone(),
            context: g.context_features.clone(),
            candidates: (0..cfg.serve.batch)
                .map(|_| catalog[rng.random_range(0..catalog.len())].clone())
                .collect(),
        };
        let costs = stage_flops(&model_cfg, g.sequence.true_length());
        let per_candidate: u64 = costs.iter().filter(|s| !s.foldable).map(|s| s.flops).sum();
        let shared: u64 = costs.iter().filter(|s| s.foldable).map(|s| s.flops).sum();
        let b = cfg.serve.batch as u64;
        let folded = matches!(mode, ServeMode::Folded | ServeMode::Both)
            .then(|| serve_folded(&req, &model, &store))
            .transpose()?;
        let naive = matches!(mode, ServeMode::Naive | ServeMode::Both)
            .then(|| serve_naive(&req, &model, &store))
            .transpose()?;
        if let Some(f) = &folded {
            folded_total += f.flops.total();
            writeln!(tsv, "{r}\tfolded\t{}\t{}", f.flops.total(), shared + b * per_candidate).unwrap();
        }
        if let Some(n) = &naive {
            naive_total += n.flops.total();
            writeln!(tsv, "{r}\tnaive\t{}\t{}", n.flops.total(), b * (shared + per_candidate)).unwrap();
        }
        if let (Some(f), Some(n)) = (&folded, &naive) {
            worst = worst.max(max_deviation(f, n));
        }
    }
    write(&out.join("config"), &cfg.to_text())?;
    write(&out.join("serve.tsv"), &tsv)?;

    let mut report = String::new();
    writeln!(report, "requests\t{}", cfg.serve.requests).unwrap();
    writeln!(report, "candidates\t{}", cfg.serve.batch).unwrap();
    if mode != ServeMode::Naive {
        writeln!(report, "folded_flops\t{folded_total}").unwrap();
    }
    if mode != ServeMode::Folded {
        writeln!(report, "naive_flops\t{naive_total}").unwrap();
    }
    if mode == ServeMode::Both {
        writeln!(report, "flops_ratio\t{:.4}", folded_total as f64 / naive_total as f64).unwrap();
        writeln!(report, "max_deviation\t{worst:e}").unwrap();
    }
    Ok(report)
}
