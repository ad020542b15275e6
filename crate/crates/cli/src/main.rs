use std::io::{BufRead, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use oosd::bench::harness::{self, BenchOptions, SweepGrid};
use oosd::container::ModelContainer;
use oosd::drift;
use oosd::pipeline::{FormulationKind, OosSystem};
use serde_json::json;

mod config;

/// Number of worker threads; unset means one per core.
const THREADS_ENV: &str = "OOSD_THREADS";
const PREDICT_CHUNK: usize = 1024;

#[derive(Parser)]
#[command(name = "oosd", version, about = "Out-of-scope intent detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file and write the container.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Classify stdin, one utterance per line, as JSON lines on stdout.
    Predict {
        #[arg(long)]
        model: PathBuf,
        /// Time each query and print median/p99 latency to stderr.
        #[arg(long)]
        latency: bool,
        /// Include the whole discounted confidence vector.
        #[arg(long)]
        full_conf: bool,
    },
    /// Run formulations over every dataset manifest in a directory.
    Bench {
        #[arg(long)]
        manifests: PathBuf,
        /// Comma separated, e.g. `discounting,max-conf`.
        #[arg(long, value_delimiter = ',', default_value = "discounting,binary-gate,k-plus-1,max-conf")]
        formulations: Vec<FormulationKind>,
        #[arg(long)]
        seed: Option<u64>,
        /// Dataset root; defaults to $OOSD_DATA, then ./data.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "bench-out")]
        out: PathBuf,
        /// Tune blend weight, OOS penalty and steepness on dev first.
        #[arg(long)]
        sweep: bool,
    },
    /// Compare top confidences of two models over a traffic sample.
    Drift {
        #[arg(long)]
        model_a: PathBuf,
        #[arg(long)]
        model_b: PathBuf,
        #[arg(long)]
        traffic: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::FAILURE;
    }
    let result = match cli.command {
        Command::Train { config } => train(&config),
        Command::Predict {
            model,
            latency,
            full_conf,
        } => predict(&model, latency, full_conf),
        Command::Bench {
            manifests,
            formulations,
            seed,
            data,
            out,
            sweep,
        } => bench(manifests, formulations, seed, data, out, sweep),
        Command::Drift {
            model_a,
            model_b,
            traffic,
        } => drift_cmd(&model_a, &model_b, &traffic),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v.trim().parse().with_context(|| format!("{THREADS_ENV}={v:?} is not a thread count"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn train(path: &std::path::Path) -> Result<()> {
    let job = config::load(path)?;
    let started = Instant::now();
    let system = OosSystem::train(&job.data, &job.system, job.lexicon)?;
    let seconds = started.elapsed().as_secs_f64();
    let container = ModelContainer::new(system, &job.system);
    let bytes = container.save(&job.output)?;
    eprintln!("trained in {seconds:.2} s, wrote {} ({bytes} bytes)", job.output.display());
    println!(
        "{}",
        json!({
            "output": job.output,
            "bytes": bytes,
            "train_seconds": seconds,
            "in_scope_examples": job.data.is_examples.len(),
            "oos_examples": job.data.oos_examples.len(),
            "classes": job.data.n_classes(),
            "config_digest": container.provenance.config_digest,
        })
    );
    Ok(())
}

fn decision_json(line: usize, d: &oosd::pipeline::Decision, full_conf: bool) -> serde_json::Value {
    let mut v = json!({
        "line": line,
        "verdict": if d.verdict.is_oos() { "oos" } else { "intent" },
        "intent": d.verdict.intent(),
        "top_confidence": d.top_confidence,
        "score": d.score,
    });
    if let Some(s) = &d.oos_score {
        v["oos_distance"] = json!(s.distance);
    }
    if full_conf {
        v["final_conf"] = json!(d.final_conf);
    }
    v
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    // nearest rank
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

fn predict(model: &std::path::Path, latency: bool, full_conf: bool) -> Result<()> {
    let container = ModelContainer::load(model)?;
    let system = &container.system;
    let stdin = std::io::stdin().lock();
    let mut out = BufWriter::new(std::io::stdout().lock());
    let mut timings = Vec::new();
    let mut lines = stdin.lines().enumerate();
    loop {
        let mut chunk = Vec::with_capacity(PREDICT_CHUNK);
        for (i, line) in lines.by_ref().take(PREDICT_CHUNK) {
            chunk.push((i + 1, line.context("reading stdin")?));
        }
        if chunk.is_empty() {
            break;
        }
        let texts: Vec<&str> = chunk.iter().map(|(_, t)| t.as_str()).collect();
        let results = if latency {
            // sequential so each timing covers one query alone
            texts
                .iter()
                .map(|t| {
                    let start = Instant::now();
                    let r = system.predict(t);
                    timings.push(start.elapsed().as_secs_f64() * 1e3);
                    r
                })
                .collect()
        } else {
            system.predict_batch(&texts)
        };
        for ((line, _), r) in chunk.iter().zip(results) {
            let v = match r {
                Ok(d) => decision_json(*line, &d, full_conf),
                Err(e) => json!({ "line": line, "error": e.to_string() }),
            };
            writeln!(out, "{v}")?;
        }
    }
    out.flush()?;
    if latency && !timings.is_empty() {
        timings.sort_by(f64::total_cmp);
        eprintln!(
            "{}",
            json!({
                "queries": timings.len(),
                "median_ms": percentile(&timings, 50.0),
                "p99_ms": percentile(&timings, 99.0),
            })
        );
    }
    Ok(())
}

fn bench(
    manifests: PathBuf,
    formulations: Vec<FormulationKind>,
    seed: Option<u64>,
    data: Option<PathBuf>,
    out: PathBuf,
    sweep: bool,
) -> Result<()> {
    let data = data
        .or_else(|| std::env::var_os("OOSD_DATA").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"));
    let paths = harness::manifest_paths(&manifests)?;
    if paths.is_empty() {
        bail!("no manifests in {}", manifests.display());
    }
    let options = BenchOptions {
        formulations,
        seed,
        sweep: sweep.then(SweepGrid::default),
        ..Default::default()
    };
    let summary = harness::run_manifests(&paths, &data, &options);
    for (name, why) in &summary.missing {
        eprintln!("missing dataset {name}: {why}");
    }
    for (name, why) in &summary.failed {
        eprintln!("failed dataset {name}: {why}");
    }
    let tables = harness::write_reports(&out, &summary)?;
    print!("{}", harness::render_tables(&tables));
    eprintln!("{} reports written to {}", summary.runs.len(), out.display());
    if !summary.failed.is_empty() {
        bail!("{} dataset(s) failed", summary.failed.len());
    }
    Ok(())
}

fn drift_cmd(a: &std::path::Path, b: &std::path::Path, traffic: &std::path::Path) -> Result<()> {
    let a = ModelContainer::load(a)?;
    let b = ModelContainer::load(b)?;
    let text = std::fs::read_to_string(traffic).with_context(|| format!("reading {}", traffic.display()))?;
    let lines: Vec<String> = text.lines().map(str::to_string).collect();
    let report = drift::drift_report(&a.system, &b.system, &lines)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}
