//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any fails.
//!
//! Set `SESSREC_CLICKS` to the full RecSys Challenge 2015 clicks file to
//! additionally check the published preprocessing counts.

mod common;

use std::fs::File;
use std::io::BufReader;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use common::{batch, brute_metrics, ce, check, check_with, output, random_scores, random_sessions, toy, RELU_EPS, TOL};
use sessrec::checkpoint::Checkpoint;
use sessrec::dataset::{
    augment_corpus, augment_prefixes, parse_clicks, split_and_filter, split_and_filter_with, synth_generate,
    synth_generate_with, temporal_fraction, FilterConfig, Session, SplitData, SplitMode, SynthConfig, Vocabulary,
};
use sessrec::evaluation::{
    bench_prediction, evaluate, session_events, EmbeddingRanker, EvalConfig, EvalReport, Popularity, Recommender,
    ScoreRanker, SoftmaxRanker, SPop,
};
use sessrec::model::{count_params, Model, ModelConfig};
use sessrec::tensor::{softmax_in_place, Stencil};
use sessrec::training::{
    cosine_loss, distillation_loss, finetune_m2, tempered_softmax, train_m1, train_m3, DistillConfig, TrainConfig,
};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn encoded(sessions: &[Session], vocab: &Vocabulary) -> Vec<Vec<usize>> {
    sessions.iter().map(|s| vocab.encode(s).unwrap()).collect()
}

fn recall(r: &dyn Recommender, sessions: &[Vec<usize>]) -> EvalReport {
    evaluate(r, sessions, &EvalConfig::default()).unwrap()
}

fn parameter_counts() -> Outcome {
    let small = count_params(&ModelConfig::softmax(37_484, 50, 100));
    let large = count_params(&ModelConfig::softmax(37_484, 50, 1000));
    ensure(small == 5_705_384, format!("H=100 gives {small}"))?;
    ensure(large == 42_548_684, format!("H=1000 gives {large}"))?;
    Ok(format!("{small} / {large}"))
}

fn augmentation() -> Outcome {
    let fixture = "s1,2014-04-01T10:00:00.000Z,a,0\ns1,2014-04-01T10:01:00.000Z,b,0\n\
                   s1,2014-04-01T10:02:00.000Z,c,0\ns1,2014-04-01T10:03:00.000Z,d,0\n";
    let cfg = FilterConfig {
        min_item_support: 1,
        split: SplitMode::None,
        ..FilterConfig::default()
    };
    let data = split_and_filter_with(parse_clicks(fixture.as_bytes()).unwrap(), &cfg).unwrap();
    let ex = augment_prefixes(&data.train[0], &data.vocab).unwrap();
    let lines: Vec<String> = ex.iter().map(|e| e.to_line()).collect();
    ensure(lines == ["1|2|4 3", "1 2|3|4", "1 2 3|4|"], format!("{lines:?}"))?;

    let data = split_and_filter(synth_generate(5, 200, 5000, 6)).unwrap();
    let n = augment_corpus(&data.train, &data.vocab).unwrap().len();
    let want: usize = data.train.iter().map(|s| s.len() - 1).sum();
    ensure(n == want, format!("{n} examples, expected {want}"))?;

    let mut detail = format!("3 sequences on the 4-click session; {n} = sum(n_i - 1) on synthetic data");
    if let Ok(path) = std::env::var("SESSREC_CLICKS") {
        let sessions = parse_clicks(BufReader::new(File::open(&path).map_err(|e| e.to_string())?))
            .map_err(|e| e.to_string())?;
        let data = split_and_filter(sessions).map_err(|e| e.to_string())?;
        let examples: usize = data.train.iter().map(|s| s.len() - 1).sum();
        let got = (data.train.len(), data.test.len(), data.vocab.len(), examples);
        ensure(
            got == (7_966_257, 15_234, 37_483, 23_670_981),
            format!("full corpus gives {got:?}"),
        )?;
        detail.push_str("; full corpus counts match");
    } else {
        detail.push_str("; full corpus not supplied");
    }
    Ok(detail)
}

fn gradient_suite() -> Outcome {
    let b = batch();
    let mut worst: f64 = 0.0;
    let softmax = Model::new(toy(false), 1).unwrap();
    worst = worst.max(check(&softmax, &b, Some(2), |r, s| ce(b.labels[r], s)));

    let teacher_logits = output(&Model::new(toy(false), 3).unwrap(), &b, None);
    for lambda in [0.0, 0.2, 1.0] {
        let cfg = DistillConfig {
            lambda,
            temperature: 2.0,
            cache_teacher: false,
        };
        let q: Vec<Vec<f64>> = (0..b.len())
            .map(|r| tempered_softmax(teacher_logits.row(r), cfg.temperature))
            .collect();
        worst = worst.max(check(&softmax, &b, Some(4), |r, s| {
            distillation_loss(s, b.labels[r], &q[r], &cfg).unwrap()
        }));
    }

    let targets = Model::new(toy(false), 5).unwrap().params.embedding.value;
    let emb = Model::new(toy(true), 6).unwrap();
    worst = worst.max(check_with(&emb, &b, None, Stencil::Central, RELU_EPS, |r, s| cosine_loss(s, targets.row(b.labels[r])).unwrap()));
    ensure(worst < TOL, format!("worst relative error {worst:e}"))?;
    Ok(format!("worst relative error {worst:.2e} < {TOL:e}"))
}

fn metric_oracle() -> Outcome {
    let n = 120;
    let mut detail = Vec::new();
    for quantize in [false, true] {
        let sessions = random_sessions(17, n, 1000);
        let ranker = ScoreRanker {
            score: |p: &[usize]| random_scores(p, n, quantize),
        };
        let r = evaluate(&ranker, &sessions, &EvalConfig { k: 20, batch_size: 64 }).unwrap();
        let (recall, mrr, events) = brute_metrics(&sessions, n, quantize);
        ensure(r.event_count == 1000 && events == 1000, "event count")?;
        ensure(
            r.recall_at_k == recall && r.mrr_at_k == mrr,
            format!("evaluate {}/{} vs brute force {recall}/{mrr}", r.recall_at_k, r.mrr_at_k),
        )?;
        ensure(r.mrr_at_k <= r.recall_at_k, "MRR above recall")?;
        detail.push(format!("recall {recall:.4} mrr {mrr:.4}"));
    }
    Ok(format!("exact on 1000 events ({})", detail.join("; ")))
}

fn markov_split(seed: u64, cfg: &SynthConfig) -> SplitData {
    split_and_filter(synth_generate_with(seed, cfg).0).unwrap()
}

fn desk_scale_learning() -> Outcome {
    let started = Instant::now();
    let data = markov_split(
        2024,
        &SynthConfig {
            n_items: 200,
            n_sessions: 20_000,
            ..SynthConfig::default()
        },
    );
    let examples = augment_corpus(&data.train, &data.vocab).unwrap();
    let train = encoded(&data.train, &data.vocab);
    let test = encoded(&data.test, &data.vocab);
    let v = data.vocab.size_with_padding();

    let (m1, report) = train_m1(examples, &ModelConfig::softmax(v, 32, 32), &TrainConfig::default()).unwrap();
    let model = recall(&SoftmaxRanker::new(&m1.model).unwrap(), &test).recall_at_k;
    let spop = recall(
        &SPop {
            popularity: Popularity::from_sessions(&train, v),
        },
        &test,
    )
    .recall_at_k;
    let random = recall(
        &ScoreRanker {
            score: |p: &[usize]| random_scores(p, v, false),
        },
        &test,
    )
    .recall_at_k;
    let secs = started.elapsed().as_secs_f64();
    let detail = format!(
        "M1 {model:.4}, S-POP {spop:.4}, random {random:.4}, {} epochs, {secs:.0}s",
        report.stopped_epoch
    );
    ensure(model >= 1.5 * spop, format!("below 1.5x S-POP: {detail}"))?;
    ensure(model >= 3.0 * random, format!("below 3x random: {detail}"))?;
    ensure(secs < 600.0, format!("too slow: {detail}"))?;
    Ok(detail)
}

fn temporal_adaptation() -> Outcome {
    let data = markov_split(
        77,
        &SynthConfig {
            n_items: 200,
            n_sessions: 20_000,
            branching: 15,
            shift_at: Some(0.75),
            ..SynthConfig::default()
        },
    );
    let examples = augment_corpus(&data.train, &data.vocab).unwrap();
    let test = encoded(&data.test, &data.vocab);
    let cfg = ModelConfig::softmax(data.vocab.size_with_padding(), 32, 32);
    let tcfg = TrainConfig::default();
    let (base, _) = train_m1(examples.clone(), &cfg, &tcfg).unwrap();
    let recent = temporal_fraction(examples, 0.25).unwrap();
    let (tuned, _) = finetune_m2(&base, recent, &cfg, &tcfg).unwrap();
    let b = recall(&SoftmaxRanker::new(&base.model).unwrap(), &test).recall_at_k;
    let t = recall(&SoftmaxRanker::new(&tuned.model).unwrap(), &test).recall_at_k;
    let detail = format!("final-day Recall@20 base {b:.4}, fine-tuned on last 1/4 {t:.4}");
    ensure(t > b, detail.clone())?;
    Ok(detail)
}

fn distillation_reductions() -> Outcome {
    let data = markov_split(
        9,
        &SynthConfig {
            n_items: 60,
            n_sessions: 1500,
            day_count: 4,
            ..SynthConfig::default()
        },
    );
    let examples = augment_corpus(&data.train, &data.vocab).unwrap();
    let mut cfg = ModelConfig::softmax(data.vocab.size_with_padding(), 16, 16);
    cfg.window = 10;
    let tcfg = TrainConfig {
        batch_size: 128,
        max_epochs: 3,
        seed: 31,
        ..TrainConfig::default()
    };
    let (m1, r1) = train_m1(examples.clone(), &cfg, &tcfg).unwrap();
    let d = DistillConfig {
        lambda: 0.0,
        ..DistillConfig::default()
    };
    let out = train_m3(examples, &cfg, &tcfg, &d).unwrap();
    ensure(out.student.to_bytes() == m1.to_bytes(), "lambda=0 student differs from M1")?;
    ensure(out.student_report.same_outcome(&r1), "lambda=0 report differs from M1")?;

    let logits = [0.3, -1.2, 2.0, 0.7, -0.1];
    let mut teacher = vec![1.1, 0.2, -0.4, 0.9, 0.0];
    softmax_in_place(&mut teacher);
    let soft = DistillConfig {
        lambda: 1.0,
        temperature: 1.0,
        cache_teacher: false,
    };
    let got = distillation_loss(&logits, 2, &teacher, &soft).unwrap().loss;
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    let plain: f64 = -teacher.iter().zip(&p).map(|(q, p)| q * p.ln()).sum::<f64>();
    ensure((got - plain).abs() < 1e-12, format!("T=1 soft term {got} vs CE {plain}"))?;
    Ok(format!("lambda=0 checkpoint bit-identical to M1; T=1 soft term - CE = {:.1e}", got - plain))
}

fn benchmark_direction() -> Outcome {
    let (v, d, h) = (10_001, 50, 100);
    let mut soft_cfg = ModelConfig::softmax(v, d, h);
    soft_cfg.window = 19;
    let mut emb_cfg = ModelConfig::embedding(v, d, h);
    emb_cfg.window = 19;
    let softmax = Model::new(soft_cfg, 1).unwrap();
    let embedding = Model::new(emb_cfg, 2).unwrap();
    let items = softmax.params.embedding.value.clone();

    let sessions = random_sessions(5, v, 2048);
    let events = session_events(&sessions);
    let prefixes: Vec<&[usize]> = events.iter().map(|e| e.0).collect();
    let batches: Vec<Vec<&[usize]>> = prefixes.chunks(512).map(|c| c.to_vec()).collect();

    let s = bench_prediction(&SoftmaxRanker::new(&softmax).unwrap(), &batches, 20, 5).unwrap();
    let e = bench_prediction(&EmbeddingRanker::new(&embedding, &items).unwrap(), &batches, 20, 5).unwrap();
    let detail = format!(
        "per batch of 512: softmax {:.4}s ± {:.4}, embedding {:.4}s ± {:.4} (ratio {:.2})",
        s.mean_batch_seconds(),
        s.std_batch_seconds(),
        e.mean_batch_seconds(),
        e.std_batch_seconds(),
        e.mean_seconds / s.mean_seconds
    );
    ensure(e.mean_seconds < s.mean_seconds, detail.clone())?;
    Ok(detail)
}

fn round_trips() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = markov_split(
        12,
        &SynthConfig {
            n_items: 50,
            n_sessions: 1200,
            day_count: 4,
            ..SynthConfig::default()
        },
    );
    let examples = augment_corpus(&data.train, &data.vocab).unwrap();
    let test = encoded(&data.test, &data.vocab);
    let mut cfg = ModelConfig::softmax(data.vocab.size_with_padding(), 16, 16);
    cfg.window = 10;
    let tcfg = TrainConfig {
        batch_size: 128,
        max_epochs: 3,
        seed: 99,
        ..TrainConfig::default()
    };
    let run = || {
        let (ck, report) = train_m1(examples.clone(), &cfg, &tcfg).unwrap();
        let eval = recall(&SoftmaxRanker::new(&ck.model).unwrap(), &test);
        (ck, report, eval)
    };
    let (a, ra, ea) = run();
    let (b, rb, eb) = run();

    let first = dir.path().join("a.ckpt");
    let second = dir.path().join("b.ckpt");
    a.save(&first).map_err(|e| e.to_string())?;
    Checkpoint::load(&first)
        .and_then(|c| c.save(&second))
        .map_err(|e| e.to_string())?;
    let (x, y) = (std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());
    ensure(x == y, "save/load/save changed the file")?;
    ensure(a.to_bytes() == b.to_bytes(), "same seed produced different checkpoints")?;
    ensure(ra.same_outcome(&rb), "same seed produced different training reports")?;
    ensure(ea.same_metrics(&eb), "same seed produced different evaluation reports")?;
    Ok(format!("{} byte checkpoint reproduced exactly", x.len()))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("parameter counts", parameter_counts),
        ("augmentation arithmetic", augmentation),
        ("gradient suite", gradient_suite),
        ("metric oracle", metric_oracle),
        ("desk-scale learning", desk_scale_learning),
        ("temporal adaptation", temporal_adaptation),
        ("distillation reductions", distillation_reductions),
        ("benchmark direction", benchmark_direction),
        ("round trips", round_trips),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("acceptance {}: PASS {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("acceptance {}: FAIL {name}: {detail}", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
