use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};

use wac_core::config::ExperimentConfig;
use wac_core::error::WacError;
use wac_core::experiments::{
    compare, compare_csv, gap_csv, gap_curve, gradcheck, mode_dir, prepare, Prepared,
};
use wac_core::io::{self, write_atomic};
use wac_core::optimizer::{BaselineMode, Checkpoint, RunRecord, Trainer};
use wac_core::synth::generate;

#[derive(Parser)]
#[command(name = "wac", version, about = "Weighted augmentation-consistency training and analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output file or directory; defaults to the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the generator and training seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Redo work even if the output directory is up to date.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset as JSON.
    Generate(Common),
    /// Train every configured method; writes run records, traces and checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue a single method from a checkpoint file.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Method to resume (defaults to train.mode).
        #[arg(long)]
        mode: Option<String>,
    },
    /// Duality gap against the theoretical bound over the configured sweep.
    GapCurve(Common),
    /// Held-out scores and separation for trained methods.
    Compare(Common),
    /// Finite-difference check of every loss gradient for the configured model.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        trials: usize,
    },
    /// Rewrite per-epoch trace CSVs from saved run records.
    ExportTraces {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mode: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(v) = std::env::var("WAC_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: WAC_THREADS must be a positive integer, got {v:?}");
                return ExitCode::from(2);
            }
        }
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(w) = cause.downcast_ref::<WacError>() {
            return match w {
                WacError::Config(_) => 2,
                WacError::Diverged { .. } | WacError::NonFinite(_) => 3,
                _ => 1,
            };
        }
    }
    1
}

fn load_config(c: &Common) -> anyhow::Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(&c.config)?;
    Ok(match c.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn out_dir(c: &Common, cfg: &ExperimentConfig) -> PathBuf {
    c.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output_dir))
}

fn parse_mode(name: &str) -> anyhow::Result<BaselineMode> {
    BaselineMode::from_name(name).map_err(|e| anyhow!(WacError::Config(e.to_string())))
}

fn dispatch(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Generate(c) => cmd_generate(&c),
        Command::Train { common, resume, mode } => cmd_train(&common, resume.as_deref(), mode.as_deref()),
        Command::GapCurve(c) => cmd_gap_curve(&c),
        Command::Compare(c) => cmd_compare(&c),
        Command::Gradcheck { common, trials } => cmd_gradcheck(&common, trials),
        Command::ExportTraces { common, mode } => cmd_export_traces(&common, mode.as_deref()),
    }
}

fn cmd_generate(c: &Common) -> anyhow::Result<()> {
    let cfg = load_config(c)?;
    let path = c
        .out
        .clone()
        .unwrap_or_else(|| Path::new(&cfg.output_dir).join("dataset.json"));
    let ds = generate(&cfg.mixture)?;
    io::save_dataset(&path, &ds).with_context(|| format!("writing {}", path.display()))?;
    println!(
        "wrote {} samples ({:.3} dense) to {}",
        ds.len(),
        ds.dense_fraction(),
        path.display()
    );
    Ok(())
}

/// Returns false when `dir` already holds outputs for exactly this config.
fn claim_dir(dir: &Path, cfg: &ExperimentConfig, force: bool, needed: &[PathBuf]) -> anyhow::Result<bool> {
    let hash = cfg.hash()?;
    let hash_path = dir.join("config.sha256");
    if !force {
        if let Ok(old) = std::fs::read_to_string(&hash_path) {
            if old.trim() == hash && needed.iter().all(|p| p.exists()) {
                return Ok(false);
            }
        }
    }
    write_atomic(&dir.join("config.toml"), cfg.to_toml_string()?.as_bytes())?;
    write_atomic(&hash_path, format!("{hash}\n").as_bytes())?;
    Ok(true)
}

fn save_run(dir: &Path, prep: &Prepared, rec: &RunRecord) -> anyhow::Result<()> {
    let ckdir = dir.join("checkpoints");
    for ck in &rec.checkpoints {
        io::save_json(&ckdir.join(format!("iter_{:012}.json", ck.iteration)), ck)?;
    }
    io::write_atomic(&dir.join("traces.csv"), io::traces_csv(rec, &prep.dataset)?.as_bytes())?;
    io::save_json(&dir.join("run.json"), rec)?;
    Ok(())
}

fn cmd_train(c: &Common, resume: Option<&Path>, mode: Option<&str>) -> anyhow::Result<()> {
    let cfg = load_config(c)?;
    let out = out_dir(c, &cfg);
    let prep = prepare(&cfg)?;
    if let Some(ck_path) = resume {
        let mode = match mode {
            Some(m) => parse_mode(m)?,
            None => cfg.train.mode,
        };
        let ck: Checkpoint = io::load_json(ck_path)
            .with_context(|| format!("reading checkpoint {}", ck_path.display()))?;
        let mut tr = Trainer::resume(&prep.problem, prep.train_config(mode), &ck, prep.projection.clone())
            .with_context(|| format!("resuming {}", mode.name()))?;
        tr.run_to_end().with_context(|| format!("training {}", mode.name()))?;
        let dir = mode_dir(&out, mode);
        save_run(&dir, &prep, &tr.finish())?;
        println!("{}: resumed from iteration {} -> {}", mode.name(), ck.iteration, dir.display());
        return Ok(());
    }
    let modes = cfg.modes();
    let needed: Vec<PathBuf> = modes.iter().map(|m| mode_dir(&out, *m).join("run.json")).collect();
    if !claim_dir(&out, &cfg, c.force, &needed)? {
        println!("{} is up to date (use --force to rerun)", out.display());
        return Ok(());
    }
    io::save_dataset(&out.join("dataset.json"), &prep.dataset)?;
    for mode in modes {
        let rec = prep.run(mode).with_context(|| format!("training {}", mode.name()))?;
        let dir = mode_dir(&out, mode);
        save_run(&dir, &prep, &rec)?;
        println!(
            "{}: {} iterations, {} skipped steps -> {}",
            mode.name(),
            rec.iterations,
            rec.skipped_steps,
            dir.display()
        );
    }
    Ok(())
}

fn cmd_gap_curve(c: &Common) -> anyhow::Result<()> {
    let cfg = load_config(c)?;
    let out = out_dir(c, &cfg);
    let csv_path = out.join("gap_curve.csv");
    if !claim_dir(&out, &cfg, c.force, &[csv_path.clone()])? {
        println!("{} is up to date (use --force to rerun)", out.display());
        return Ok(());
    }
    let curve = gap_curve(&cfg)?;
    io::save_json(&out.join("gap_curve.json"), &curve)?;
    gap_csv(&curve).write(&csv_path)?;
    for (t, g, b) in &curve.means {
        println!("T={t} mean_gap={} bound={}", io::fmt9(*g), io::fmt9(*b));
    }
    if let Some(f) = &curve.fit {
        println!("slope={} r2={}", io::fmt9(f.slope), io::fmt9(f.r_squared));
    }
    Ok(())
}

fn cmd_compare(c: &Common) -> anyhow::Result<()> {
    let cfg = load_config(c)?;
    let out = out_dir(c, &cfg);
    let modes = cfg.modes();
    let missing: Vec<String> = modes
        .iter()
        .filter(|m| !mode_dir(&out, **m).join("run.json").exists())
        .map(|m| m.name())
        .collect();
    if !missing.is_empty() {
        bail!(
            "no trained run for {} in {}; run `wac train` first",
            missing.join(", "),
            out.display()
        );
    }
    let prep = prepare(&cfg)?;
    let mut records = Vec::new();
    for m in modes {
        let p = mode_dir(&out, m).join("run.json");
        let rec: RunRecord = io::load_json(&p).with_context(|| format!("reading {}", p.display()))?;
        records.push((m, rec));
    }
    let rows = compare(&prep, &records)?;
    let csv = compare_csv(&rows);
    csv.write(&out.join("compare.csv"))?;
    print!("{}", csv.as_str());
    Ok(())
}

fn cmd_gradcheck(c: &Common, trials: usize) -> anyhow::Result<()> {
    let cfg = load_config(c)?;
    let rows = gradcheck(&cfg.model_spec()?, trials, 1e-6, cfg.train.seed)?;
    let mut ok = true;
    for r in &rows {
        let pass = r.max_rel_error < 1e-4;
        ok &= pass;
        println!(
            "{:<14} max_rel_error={} {}",
            r.loss,
            io::fmt9(r.max_rel_error),
            if pass { "ok" } else { "FAIL" }
        );
    }
    if !ok {
        bail!("gradient check failed");
    }
    Ok(())
}

fn cmd_export_traces(c: &Common, mode: Option<&str>) -> anyhow::Result<()> {
    let cfg = load_config(c)?;
    let out = out_dir(c, &cfg);
    let modes = match mode {
        Some(m) => vec![parse_mode(m)?],
        None => cfg.modes(),
    };
    let ds_path = out.join("dataset.json");
    let dataset = io::load_dataset(&ds_path).with_context(|| format!("reading {}", ds_path.display()))?;
    for m in modes {
        let dir = mode_dir(&out, m);
        let p = dir.join("run.json");
        let rec: RunRecord = io::load_json(&p)
            .with_context(|| format!("no trained run for {} ({})", m.name(), p.display()))?;
        let text = io::traces_csv(&rec, &dataset)?;
        write_atomic(&dir.join("traces.csv"), text.as_bytes())?;
        println!("{}: {} trace rows", m.name(), text.lines().count() - 1);
    }
    Ok(())
}
