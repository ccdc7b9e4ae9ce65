//! `man`: train, ablate and analyse mask attention models.
//!
//! Exit status is 0 on success, 1 on runtime failure (divergence, corrupt
//! checkpoint, I/O, an ablation in which every run failed) and 2 on
//! configuration errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use man_core::analysis::{capture_attention, LocalityReport};
use man_core::config::{ExperimentConfig, OUT_DIR_ENV};
use man_core::train::{init_model, run_ablation, train_with};
use man_core::{load_checkpoint, save_checkpoint, Error, Model64};

const CHECKPOINT_DIR: &str = "checkpoint";
const TEST_SET_FILE: &str = "test_set.txt";

#[derive(Parser)]
#[command(name = "man", version, about = "Mask attention network experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model with the first configured seed.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train every ordering under every seed and tabulate accuracy.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated presets or chains; replaces `ablation.orderings`.
        #[arg(long, value_delimiter = ',')]
        orderings: Option<Vec<String>>,
        /// Use this many consecutive seeds starting at the first configured one.
        #[arg(long)]
        seeds: Option<usize>,
        /// Append the static-mask presets.
        #[arg(long)]
        smans: bool,
    },
    /// Windowed attention locality of a trained encoder.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        /// One sequence of token ids per line.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
        windows: Vec<usize>,
        /// `all` or comma-separated one-based layers.
        #[arg(long, default_value = "all")]
        layers: String,
        /// Output directory; defaults to the checkpoint's parent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write every head-averaged matrix as CSV.
        #[arg(long)]
        dump_attention: bool,
    },
}

/// Failure with its exit status.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if matches!(e, Error::Config(_)) { 2 } else { 1 };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure {
            code: 1,
            message: e.to_string(),
        }
    }
}

fn config_error(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config } => cmd_train(&config),
        Command::Ablate {
            config,
            orderings,
            seeds,
            smans,
        } => cmd_ablate(&config, orderings, seeds, smans),
        Command::Analyze {
            checkpoint,
            dataset,
            windows,
            layers,
            out,
            dump_attention,
        } => cmd_analyze(&checkpoint, &dataset, &windows, &layers, out, dump_attention),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn cmd_train(path: &Path) -> Result<(), Failure> {
    let cfg = ExperimentConfig::load(path)?;
    let out = cfg.resolved_out_dir();
    cfg.write_snapshot(&out)?;
    let seed = cfg.seeds[0];
    let mut model: Model64 = init_model(cfg.model.clone(), seed)?;
    let train_cfg = cfg.train_for(seed);
    let report = train_with(&mut model, &cfg.task, &train_cfg, |l| {
        if l.step % 100 == 0 {
            eprintln!("step {:>6}  loss {:.4}  lr {:.2e}", l.step, l.loss, l.lr);
        }
    })?;
    save_checkpoint(&model, &out.join(CHECKPOINT_DIR))?;
    fs::write(out.join("report.csv"), report.to_csv())?;
    fs::write(out.join("report.json"), report.to_json()?)?;
    let held_out = cfg.task.test_set(train_cfg.eval_size)?;
    let lines: Vec<String> = held_out
        .iter()
        .map(|e| e.src.iter().map(ToString::to_string).collect::<Vec<_>>().join(" "))
        .collect();
    fs::write(out.join(TEST_SET_FILE), lines.join("\n") + "\n")?;
    println!(
        "token_accuracy {:.4} exact_match {:.4} -> {}",
        report.final_eval.token_accuracy,
        report.final_eval.exact_match,
        out.display()
    );
    Ok(())
}

fn cmd_ablate(path: &Path, orderings: Option<Vec<String>>, seeds: Option<usize>, smans: bool) -> Result<(), Failure> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(o) = orderings {
        cfg.ablation.orderings = o;
    }
    cfg.ablation.smans |= smans;
    if let Some(n) = seeds {
        let first = cfg.seeds[0];
        cfg.seeds = (0..n as u64).map(|i| first + i).collect();
    }
    cfg.validate()?;
    let variants = cfg.ablation.variants()?;
    let out = cfg.resolved_out_dir();
    cfg.write_snapshot(&out)?;
    let table = run_ablation::<f64>(&cfg.model, &variants, &cfg.task, &cfg.train, &cfg.seeds)?;
    fs::write(out.join("ablation.csv"), table.to_csv())?;
    fs::write(out.join("ablation_runs.csv"), table.runs_csv())?;
    fs::write(out.join("ablation.json"), table.to_json()?)?;
    print!("{}", table.to_csv());
    if table.rows.iter().all(|r| r.failures() == r.runs.len()) {
        return Err(Failure {
            code: 1,
            message: "every run failed; see ablation_runs.csv".into(),
        });
    }
    Ok(())
}

fn parse_dataset(path: &Path) -> Result<Vec<Vec<usize>>, Failure> {
    let text = fs::read_to_string(path).map_err(|e| config_error(format!("cannot read {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let seq = line
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<Vec<usize>, _>>()
            .map_err(|e| config_error(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(seq);
    }
    if out.is_empty() {
        return Err(config_error(format!("{} holds no sequences", path.display())));
    }
    Ok(out)
}

fn parse_layers(spec: &str) -> Result<Option<Vec<usize>>, Failure> {
    if spec.trim().eq_ignore_ascii_case("all") {
        return Ok(None);
    }
    spec.split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map(Some)
        .map_err(|e| config_error(format!("--layers `{spec}`: {e}")))
}

fn cmd_analyze(
    checkpoint: &Path,
    dataset: &Path,
    windows: &[usize],
    layers: &str,
    out: Option<PathBuf>,
    dump_attention: bool,
) -> Result<(), Failure> {
    let layers = parse_layers(layers)?;
    let data = parse_dataset(dataset)?;
    let model: Model64 = load_checkpoint(checkpoint)?;
    let id = dataset.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
    let record = capture_attention(&model, &data, &id)?;
    let report = LocalityReport::compute(&record, windows, layers.as_deref())?;
    let out = out
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| checkpoint.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf));
    fs::create_dir_all(&out)?;
    fs::write(out.join("locality.csv"), report.to_csv())?;
    fs::write(out.join("locality.json"), report.to_json()?)?;
    if dump_attention {
        let dir = out.join("attention");
        fs::create_dir_all(&dir)?;
        for e in &record.entries {
            let name = format!("s{}_l{}_{}.csv", e.sentence, e.slot.layer, e.slot.label());
            let csv = man_core::mask::matrix_to_csv(e.mean.rows(), e.mean.cols(), e.mean.data());
            fs::write(dir.join(name), csv)?;
        }
    }
    print!("{}", report.to_csv());
    Ok(())
}
