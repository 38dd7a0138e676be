//! `lac`: generate episodes, train the backbone and policies, evaluate,
//! benchmark, sweep cache ratios, print FLOP tables and draw plots.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use lac_core::bench::{self, Condition};
use lac_core::config::RunConfig;
use lac_core::costmodel::{flops_table, FlopsReport};
use lac_core::scenegen::{generate_episode, write_episode};
use lac_core::training::{self, mean_ratio_by_class, saliency_auc, MetricRow, Stages};
use lac_core::transformer::Transformer;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "lac", version, about = "Learnable adaptive KV caching on synthetic frame streams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run config (JSON). Defaults are used for missing fields or when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Render one synthetic episode to a binary file.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Output episode file.
        #[arg(long, default_value = "episode.bin")]
        out: PathBuf,
        /// Also dump every frame's luminance as PGM into this directory.
        #[arg(long)]
        pgm: Option<PathBuf>,
    },
    /// Pretrain the backbone and train the policy (Stage I alignment, Stage II end to end).
    Train {
        #[command(flatten)]
        common: Common,
        /// Run directory for checkpoints and metrics.csv.
        #[arg(long)]
        out: Option<PathBuf>,
        /// all | pretrain | stage1 | stage2 | policy
        #[arg(long, default_value = "all")]
        stages: String,
    },
    /// Evaluate the trained adaptive policy against full recompute on held-out episodes.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Run directory holding the checkpoints; eval.json is written here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare baseline, rule-based, fixed-ratio and adaptive policies; writes bench.csv.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Accuracy and latency of learned and rule-based masks at forced ratios; writes sweep.csv.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated ratios in [0, 1). Defaults to the config sweep list.
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
    },
    /// Print the itemized FLOP table for the configured model and policy.
    Flops {
        #[command(flatten)]
        common: Common,
        /// Also write the table as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
    },
    /// Draw accuracy and wall-clock SVG charts from a bench or sweep CSV.
    Plot {
        #[command(flatten)]
        common: Common,
        /// Input CSV.
        #[arg(long)]
        csv: PathBuf,
        /// Output directory for accuracy.svg and wallclock.svg.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

type CliResult = Result<(), Box<dyn std::error::Error>>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn load_config(common: &Common, out: Option<&Path>) -> lac_core::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.out_dir = o.to_path_buf();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(command: Command) -> CliResult {
    match command {
        Command::Gen { common, out, pgm } => {
            let cfg = load_config(&common, None)?;
            let ep = generate_episode(&cfg.scene, cfg.seed)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            write_episode(&ep, &out)?;
            if let Some(dir) = pgm {
                std::fs::create_dir_all(&dir)?;
                for (t, frame) in ep.frames.iter().enumerate() {
                    let f = std::fs::File::create(dir.join(format!("frame_{t:03}.pgm")))?;
                    lac_core::scenegen::write_pgm(frame, std::io::BufWriter::new(f))?;
                }
            }
            println!("wrote {} ({} frames, class {:?})", out.display(), ep.len(), ep.class);
        }
        Command::Train { common, out, stages } => {
            let cfg = load_config(&common, out.as_deref())?;
            let stages = Stages::parse(&stages)?;
            let summary = training::train(&cfg, stages, &mut print_row)?;
            for w in &summary.warnings {
                eprintln!("warning: {w}");
            }
            println!("wrote {}", cfg.metrics_path().display());
        }
        Command::Eval { common, out } => {
            let cfg = load_config(&common, out.as_deref())?;
            let report = evaluate(&cfg)?;
            let path = cfg.out_dir.join("eval.json");
            std::fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            println!("wrote {}", path.display());
        }
        Command::Bench { common, out } => {
            let cfg = load_config(&common, out.as_deref())?;
            let rows = bench::run_benchmark(&cfg)?;
            let path = cfg.out_dir.join("bench.csv");
            bench::write_rows(&path, &rows)?;
            print_rows(&rows);
            println!("wrote {}", path.display());
        }
        Command::Sweep { common, out, ratios } => {
            let cfg = load_config(&common, out.as_deref())?;
            let ratios = ratios.unwrap_or_else(|| cfg.bench.sweep_ratios.clone());
            let rows = bench::sweep_ratio(&cfg, &ratios)?;
            let path = cfg.out_dir.join("sweep.csv");
            bench::write_rows(&path, &rows)?;
            print_rows(&rows);
            println!("wrote {}", path.display());
        }
        Command::Flops { common, out, ratios } => {
            let cfg = load_config(&common, None)?;
            let ratios = ratios.unwrap_or_else(|| cfg.policy.ratios.clone());
            let model = Transformer::init(cfg.model.clone(), cfg.seed)?;
            let frame = generate_episode(&cfg.scene, cfg.seed)?.frames[0].to_tensor();
            let table = flops_table(&model, &cfg.policy, &frame, &ratios)?;
            print_flops(&table);
            if let Some(path) = out {
                if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(dir)?;
                }
                let mut w = csv::Writer::from_path(&path)?;
                for r in &table {
                    w.serialize(r)?;
                }
                w.flush()?;
                println!("wrote {}", path.display());
            }
        }
        Command::Plot { common: _, csv, out } => {
            for p in bench::emit_plots(&csv, &out)? {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    seed: u64,
    episodes: usize,
    baseline_accuracy: f64,
    lac_accuracy: f64,
    mean_ratio: f64,
    baseline_flops: f64,
    lac_flops: f64,
    saliency_auc: Option<f64>,
    ratio_static: Option<f64>,
    ratio_slow: Option<f64>,
    ratio_fast: Option<f64>,
}

fn evaluate(cfg: &RunConfig) -> lac_core::Result<EvalReport> {
    let fx = bench::Fixture::load(cfg)?;
    let base = fx.evaluate(cfg, &Condition::baseline())?;
    let lac = fx.evaluate(cfg, &Condition::learned("lac", None, true))?;
    let [ratio_static, ratio_slow, ratio_fast] = mean_ratio_by_class(&fx.policy, &fx.episodes, cfg.execution())?;
    Ok(EvalReport {
        seed: cfg.seed,
        episodes: fx.episodes.len(),
        baseline_accuracy: base.accuracy(),
        lac_accuracy: lac.accuracy(),
        mean_ratio: lac.mean_ratio,
        baseline_flops: base.analytic_flops,
        lac_flops: lac.analytic_flops,
        saliency_auc: saliency_auc(&fx.policy, &fx.episodes, cfg.execution())?,
        ratio_static,
        ratio_slow,
        ratio_fast,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

fn print_row(r: &MetricRow) {
    println!(
        "{:<8} epoch {:>2}  task {}  align {}  ratio {}  total {}  acc {}  auc {}  rho s/sl/f {} {} {}",
        r.stage,
        r.epoch,
        opt(r.loss_task),
        opt(r.loss_align),
        opt(r.loss_ratio),
        opt(r.loss_total),
        opt(r.accuracy),
        opt(r.saliency_auc),
        opt(r.ratio_static),
        opt(r.ratio_slow),
        opt(r.ratio_fast),
    );
}

fn print_rows(rows: &[bench::BenchRow]) {
    println!("{:<16} {:>6} {:>9} {:>10} {:>14} {:>14} {:>10}", "policy", "ratio", "accuracy", "mean_ratio", "analytic_flops", "measured_flops", "wall_ms");
    for r in rows {
        println!(
            "{:<16} {:>6} {:>9.4} {:>10.4} {:>14.0} {:>14.0} {:>10.4}",
            r.policy,
            r.ratio.map_or_else(|| "adapt".into(), |x| format!("{x:.2}")),
            r.accuracy,
            r.mean_ratio,
            r.analytic_flops,
            r.measured_flops,
            r.wallclock_ms
        );
    }
}

fn print_flops(table: &[FlopsReport]) {
    if let Some(r) = table.first() {
        println!(
            "N={} D={} M={} L={} frame={}x{} C_cnn={}  C_base={}  C_policy={}",
            r.n, r.d, r.m, r.l, r.h, r.w, r.c_cnn, r.c_base, r.c_policy
        );
    }
    println!(
        "{:>5} {:>5} {:>10} {:>12} {:>12} {:>12} {:>14} {:>12} {:>10} {:>8}",
        "rho", "N_act", "C_lac", "dC/layer", "dFLOPs", "measured", "matmul_MACs", "overhead", "readout", "rel_err"
    );
    for r in table {
        println!(
            "{:>5.2} {:>5} {:>10} {:>12} {:>12} {:>12} {:>14} {:>12} {:>10} {:>8}",
            r.rho,
            r.n_act,
            r.c_lac,
            r.delta_layer,
            r.delta_total,
            r.measured.map_or("-".into(), |v| v.to_string()),
            r.measured_matmul_macs.map_or("-".into(), |v| v.to_string()),
            r.measured_overhead.map_or("-".into(), |v| v.to_string()),
            r.measured_readout.map_or("-".into(), |v| v.to_string()),
            r.relative_error.map_or("-".into(), |v| format!("{v:.4}")),
        );
    }
}
