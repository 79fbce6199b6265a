mod config;

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sessrec::checkpoint::{read_manifest, Checkpoint, MAGIC};
use sessrec::dataset::{
    augment_corpus, parse_clicks, split_and_filter_with, synth_generate_with, temporal_fraction, write_clicks,
    SplitData, TrainingExample,
};
use sessrec::evaluation::{
    bench_prediction, evaluate, session_events, EmbeddingRanker, ItemKnn, Popularity, Recommender, SPop,
    SoftmaxRanker, ITEMKNN_DAMPING,
};
use sessrec::model::{count_params, HeadKind};
use sessrec::training::{finetune_m2, train_m1, train_m3, train_m4, TrainReport};
use sessrec::{Error, Result};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "sessrec", version, about = "GRU session-based recommendation lab")]
struct Cli {
    /// key=value configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any configuration key (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded Markov-chain click log
    GenData {
        #[arg(long)]
        n_items: Option<usize>,
        #[arg(long)]
        n_sessions: Option<usize>,
        #[arg(long)]
        days: Option<u32>,
        /// Switch transition tables after this fraction of the timeline
        #[arg(long)]
        shift_at: Option<f64>,
    },
    /// Split, filter and augment a click log, printing the counts
    Prepare {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        fraction: Option<String>,
        #[arg(long)]
        min_item_support: Option<usize>,
        /// last-day or none
        #[arg(long)]
        split: Option<String>,
        /// Write prefix|label|privileged lines to <out>/examples.txt
        #[arg(long)]
        dump_examples: bool,
    },
    /// Train a softmax model (M1)
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        fraction: Option<String>,
    },
    /// Fine-tune a checkpoint on the most recent fraction (M2)
    Finetune {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        base_checkpoint: PathBuf,
        #[arg(long)]
        fraction: Option<String>,
    },
    /// Train a teacher on privileged sequences and distil a student (M3)
    Distill {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        fraction: Option<String>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        temperature: Option<f64>,
    },
    /// Train an embedding-output model against a checkpoint's item embeddings (M4)
    TrainEmbed {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        fraction: Option<String>,
        #[arg(long)]
        embedding_source: PathBuf,
    },
    /// Recall@k and MRR@k on the test split
    Evaluate {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint path, spop or itemknn
        #[arg(long)]
        model: String,
    },
    /// Time batched prediction over test prefixes
    Bench {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint path, spop or itemknn
        #[arg(long)]
        model: String,
        #[arg(long)]
        batches: Option<usize>,
        #[arg(long)]
        repetitions: Option<usize>,
    },
    /// Print a checkpoint manifest
    Inspect { checkpoint: PathBuf },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 1,
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

fn set_opt<T: ToString>(cfg: &mut RunConfig, key: &str, v: &Option<T>) -> Result<()> {
    match v {
        Some(v) => cfg.set(key, &v.to_string()),
        None => Ok(()),
    }
}

fn set_path(cfg: &mut RunConfig, v: &Option<PathBuf>) -> Result<()> {
    set_opt(cfg, "data", &v.as_ref().map(|p| p.display().to_string()))
}

fn build_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    for o in &cli.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::config(format!("--set expects KEY=VALUE, got {o:?}")))?;
        cfg.set(k.trim(), v)?;
    }
    set_opt(&mut cfg, "seed", &cli.seed)?;
    match &cli.command {
        Command::GenData {
            n_items,
            n_sessions,
            days,
            shift_at,
        } => {
            set_opt(&mut cfg, "n_items", n_items)?;
            set_opt(&mut cfg, "n_sessions", n_sessions)?;
            set_opt(&mut cfg, "day_count", days)?;
            set_opt(&mut cfg, "shift_at", shift_at)?;
        }
        Command::Prepare {
            data,
            fraction,
            min_item_support,
            split,
            ..
        } => {
            set_path(&mut cfg, data)?;
            set_opt(&mut cfg, "fraction", fraction)?;
            set_opt(&mut cfg, "min_item_support", min_item_support)?;
            set_opt(&mut cfg, "split", split)?;
        }
        Command::Train { data, fraction }
        | Command::Finetune { data, fraction, .. }
        | Command::TrainEmbed { data, fraction, .. } => {
            set_path(&mut cfg, data)?;
            set_opt(&mut cfg, "fraction", fraction)?;
        }
        Command::Distill {
            data,
            fraction,
            lambda,
            temperature,
        } => {
            set_path(&mut cfg, data)?;
            set_opt(&mut cfg, "fraction", fraction)?;
            set_opt(&mut cfg, "lambda", lambda)?;
            set_opt(&mut cfg, "temperature", temperature)?;
        }
        Command::Evaluate { data, .. } => set_path(&mut cfg, data)?,
        Command::Bench {
            data,
            batches,
            repetitions,
            ..
        } => {
            set_path(&mut cfg, data)?;
            set_opt(&mut cfg, "bench_batches", batches)?;
            set_opt(&mut cfg, "bench_repetitions", repetitions)?;
        }
        Command::Inspect { .. } => {}
    }
    Ok(cfg)
}

fn write(out: &Path, name: &str, text: &str) -> Result<()> {
    fs::write(out.join(name), text)?;
    Ok(())
}

fn load_split(cfg: &RunConfig) -> Result<SplitData> {
    let path = cfg
        .data
        .as_ref()
        .ok_or_else(|| Error::config("no data file: pass --data or set data= in the config"))?;
    let file = File::open(path).map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?;
    let sessions = parse_clicks(BufReader::new(file))?;
    split_and_filter_with(sessions, &cfg.filter_config())
}

fn training_examples(cfg: &RunConfig, data: &SplitData) -> Result<Vec<TrainingExample>> {
    let all = augment_corpus(&data.train, &data.vocab)?;
    let n = all.len();
    let kept = temporal_fraction(all, cfg.fraction)?;
    println!("{} of {n} training sequences (fraction {})", kept.len(), cfg.fraction);
    Ok(kept)
}

fn encoded_sessions(data: &SplitData, test: bool) -> Result<Vec<Vec<usize>>> {
    let sessions = if test { &data.test } else { &data.train };
    sessions.iter().map(|s| data.vocab.encode(s)).collect()
}

fn report_training(out: &Path, prefix: &str, report: &TrainReport) -> Result<()> {
    for line in report.log_lines() {
        println!("{prefix}epoch {line}");
    }
    println!(
        "{prefix}best epoch {} with validation loss {}",
        report.best_epoch, report.best_val_loss
    );
    let name = if prefix.is_empty() { "train" } else { prefix.trim_end_matches(": ") };
    write(out, &format!("{name}_report.txt"), &report.to_text())?;
    write(out, &format!("{name}_timing.txt"), &report.timing_text())
}

fn save(out: &Path, name: &str, ck: &Checkpoint) -> Result<()> {
    let path = out.join(name);
    ck.save(&path)?;
    println!("wrote {} ({} parameters)", path.display(), count_params(ck.config()));
    Ok(())
}

fn check_vocab(ck: &Checkpoint, data: &SplitData) -> Result<()> {
    let want = data.vocab.size_with_padding();
    let have = ck.config().vocab_size_with_pad;
    if have != want {
        return Err(Error::checkpoint(format!(
            "vocab_size_with_pad is {have} in the checkpoint but the data gives {want}"
        )));
    }
    Ok(())
}

enum Loaded {
    Checkpoint(Checkpoint),
    SPop(SPop),
    ItemKnn(ItemKnn),
}

impl Loaded {
    fn open(spec: &str, data: &SplitData) -> Result<Loaded> {
        let v = data.vocab.size_with_padding();
        Ok(match spec {
            "spop" => Loaded::SPop(SPop {
                popularity: Popularity::from_sessions(&encoded_sessions(data, false)?, v),
            }),
            "itemknn" => Loaded::ItemKnn(ItemKnn::from_sessions(&encoded_sessions(data, false)?, v, ITEMKNN_DAMPING)),
            path => {
                let ck = Checkpoint::load(path)?;
                check_vocab(&ck, data)?;
                Loaded::Checkpoint(ck)
            }
        })
    }

    fn with_recommender<T>(&self, f: impl FnOnce(&dyn Recommender) -> Result<T>) -> Result<T> {
        match self {
            Loaded::SPop(r) => f(r),
            Loaded::ItemKnn(r) => f(r),
            Loaded::Checkpoint(ck) => match ck.config().head {
                HeadKind::Softmax => f(&SoftmaxRanker::new(&ck.model)?),
                HeadKind::Embedding => {
                    let targets = ck
                        .item_targets
                        .as_ref()
                        .ok_or_else(|| Error::checkpoint("embedding checkpoint has no item_targets tensor"))?;
                    f(&EmbeddingRanker::new(&ck.model, targets)?)
                }
            },
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    if let Command::Inspect { checkpoint } = &cli.command {
        let bytes = fs::read(checkpoint)?;
        let manifest = read_manifest(&bytes)?;
        let ck = Checkpoint::from_bytes(&bytes)?;
        print!("{}", String::from_utf8_lossy(MAGIC));
        print!("{}", manifest.to_text());
        println!("# parameters={}", count_params(ck.config()));
        println!("# payload_bytes={}", manifest.tensors.iter().map(|t| t.byte_length).sum::<usize>());
        return Ok(());
    }

    let cfg = build_config(cli)?;
    let out = cli.out.as_path();
    fs::create_dir_all(out)?;
    write(out, "run_config.txt", &cfg.to_text())?;

    match &cli.command {
        Command::GenData { .. } => {
            let (sessions, _) = synth_generate_with(cfg.seed, &cfg.synth_config());
            let path = out.join("clicks.csv");
            let mut w = BufWriter::new(File::create(&path)?);
            write_clicks(&sessions, &mut w)?;
            w.flush()?;
            let clicks: usize = sessions.iter().map(|s| s.len()).sum();
            println!("wrote {} sessions, {clicks} clicks to {}", sessions.len(), path.display());
        }
        Command::Prepare { dump_examples, .. } => {
            let data = load_split(&cfg)?;
            let examples = augment_corpus(&data.train, &data.vocab)?;
            let recent = temporal_fraction(examples.clone(), cfg.fraction)?;
            println!("{} training sessions", data.train.len());
            println!("{} test sessions", data.test.len());
            println!("{} items", data.vocab.len());
            println!("{} training sequences", examples.len());
            if recent.len() != examples.len() {
                println!("{} sequences in the most recent fraction {}", recent.len(), cfg.fraction);
            }
            write(
                out,
                "prepare.txt",
                &format!(
                    "train_sessions={}\ntest_sessions={}\nitems={}\ntraining_sequences={}\nfraction_sequences={}\n",
                    data.train.len(),
                    data.test.len(),
                    data.vocab.len(),
                    examples.len(),
                    recent.len()
                ),
            )?;
            if *dump_examples {
                let mut w = BufWriter::new(File::create(out.join("examples.txt"))?);
                for e in &recent {
                    writeln!(w, "{}", e.to_line())?;
                }
                w.flush()?;
            }
        }
        Command::Train { .. } => {
            let data = load_split(&cfg)?;
            let examples = training_examples(&cfg, &data)?;
            let model_cfg = cfg.model_config(data.vocab.size_with_padding(), HeadKind::Softmax);
            let (ck, report) = train_m1(examples, &model_cfg, &cfg.train_config())?;
            report_training(out, "", &report)?;
            save(out, "model.ckpt", &ck)?;
        }
        Command::Finetune { base_checkpoint, .. } => {
            let data = load_split(&cfg)?;
            let base = Checkpoint::load(base_checkpoint)?;
            check_vocab(&base, &data)?;
            let examples = training_examples(&cfg, &data)?;
            let model_cfg = cfg.model_config(data.vocab.size_with_padding(), HeadKind::Softmax);
            let (ck, report) = finetune_m2(&base, examples, &model_cfg, &cfg.train_config())?;
            report_training(out, "", &report)?;
            save(out, "model.ckpt", &ck)?;
        }
        Command::Distill { .. } => {
            let data = load_split(&cfg)?;
            let examples = training_examples(&cfg, &data)?;
            let model_cfg = cfg.model_config(data.vocab.size_with_padding(), HeadKind::Softmax);
            let outcome = train_m3(examples, &model_cfg, &cfg.train_config(), &cfg.distill_config())?;
            report_training(out, "teacher: ", &outcome.teacher_report)?;
            report_training(out, "", &outcome.student_report)?;
            save(out, "teacher.ckpt", &outcome.teacher)?;
            save(out, "model.ckpt", &outcome.student)?;
        }
        Command::TrainEmbed { embedding_source, .. } => {
            let data = load_split(&cfg)?;
            let source = Checkpoint::load(embedding_source)?;
            check_vocab(&source, &data)?;
            let targets = source.model.params.embedding.value.clone();
            let examples = training_examples(&cfg, &data)?;
            let mut model_cfg = cfg.model_config(data.vocab.size_with_padding(), HeadKind::Embedding);
            if model_cfg.embed_dim != source.config().embed_dim {
                return Err(Error::checkpoint(format!(
                    "embed_dim is {} in the embedding source but {} was requested",
                    source.config().embed_dim,
                    model_cfg.embed_dim
                )));
            }
            model_cfg.embed_dim = source.config().embed_dim;
            let (ck, report) = train_m4(
                examples,
                &model_cfg,
                &targets,
                &cfg.train_config(),
                cfg.freeze_input_embedding,
            )?;
            report_training(out, "", &report)?;
            save(out, "model.ckpt", &ck)?;
        }
        Command::Evaluate { model, .. } => {
            let data = load_split(&cfg)?;
            let test = encoded_sessions(&data, true)?;
            let loaded = Loaded::open(model, &data)?;
            let report = loaded.with_recommender(|r| evaluate(r, &test, &cfg.eval_config()))?;
            print!("{}", report.to_text());
            write(out, "eval_report.txt", &report.to_text())?;
        }
        Command::Bench { model, .. } => {
            let data = load_split(&cfg)?;
            let test = encoded_sessions(&data, true)?;
            let events = session_events(&test);
            if events.is_empty() {
                return Err(Error::data("no test events to benchmark on"));
            }
            let prefixes: Vec<&[usize]> = events.iter().map(|e| e.0).collect();
            let batches: Vec<Vec<&[usize]>> = prefixes
                .chunks(cfg.eval_batch_size.max(1))
                .take(cfg.bench_batches.max(1))
                .map(<[&[usize]]>::to_vec)
                .collect();
            let loaded = Loaded::open(model, &data)?;
            let result =
                loaded.with_recommender(|r| bench_prediction(r, &batches, cfg.k, cfg.bench_repetitions.max(1)))?;
            let text = format!(
                "batches={}\nbatch_size={}\nrepetitions={}\nmean_batch_seconds={:.6}\nstd_batch_seconds={:.6}\n",
                result.batches,
                cfg.eval_batch_size,
                cfg.bench_repetitions.max(1),
                result.mean_batch_seconds(),
                result.std_batch_seconds()
            );
            print!("{text}");
            write(out, "bench_report.txt", &text)?;
        }
        Command::Inspect { .. } => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
