use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mimo_ra::analytics::{
    baseline_detection_probability, collision_probability, complexity_counts, expected_code_load,
};
use mimo_ra::harness::{
    emit, emit_to_path, load_config, preset_points, run_sweep, Format, ResultRow, Scale, SimConfig,
    SweepPoint, PRESETS,
};

#[derive(Parser)]
#[command(name = "mimo-ra", version, about = "Massive MIMO random-access simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the config's own operating point for every listed M.
    Simulate(Common),
    /// Run a named figure sweep.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(PRESETS))]
        preset: String,
        /// Reduced grid and trial count (default).
        #[arg(long, conflicts_with = "full")]
        desk: bool,
        /// Reference grid and the config's trial count.
        #[arg(long)]
        full: bool,
    },
    /// Print the closed-form quantities at the config's operating point.
    Analytic {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Quick self-check of the closed forms and of determinism.
    Verify,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<u64>,
    /// Output file; stdout when absent (and no `output` key in the config).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = OutFormat::Csv)]
    format: OutFormat,
    /// Worker threads; defaults to the number of cores.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum OutFormat {
    Csv,
    Jsonl,
}

fn read_config(path: &Option<PathBuf>) -> Result<SimConfig> {
    match path {
        Some(p) => load_config(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(SimConfig::default()),
    }
}

fn prepare(common: &Common) -> Result<SimConfig> {
    let mut cfg = read_config(&common.config)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(t) = common.trials {
        cfg.trials = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_rows(rows: &[ResultRow], common: &Common, cfg: &SimConfig) -> Result<()> {
    let format = match common.format {
        OutFormat::Csv => Format::Csv,
        OutFormat::Jsonl => Format::JsonLines,
    };
    let out = common.out.clone().or_else(|| cfg.output.clone().map(PathBuf::from));
    match out {
        Some(path) => {
            emit_to_path(rows, format, &path).with_context(|| format!("writing {}", path.display()))?;
            log::info!("wrote {} rows to {}", rows.len(), path.display());
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            emit(rows, format, &mut lock)?;
            lock.flush()?;
        }
    }
    Ok(())
}

fn analytic(cfg: &SimConfig) -> Result<()> {
    let (pop, p, q, n) = (cfg.population(), cfg.protocol.p_active, cfg.codes.q, cfg.codes.n);
    println!("population          {pop}");
    println!("code load           {:.6}", expected_code_load(pop, p, q, n)?);
    println!("collision prob      {:.6}", collision_probability(pop, p, q, n)?);
    match baseline_detection_probability(pop, p, q, n) {
        Ok(b) => println!("baseline detection  {b:.6}"),
        Err(e) => println!("baseline detection  undefined ({e})"),
    }
    let k = ((pop as f64 * p).round() as u64).max(1);
    for &m in &cfg.antennas {
        let c = complexity_counts(m as u64, n as u64, k, q as u64)?;
        println!("M = {m:<4} K = {k:<4} step 1 ops {:>12}  step 3 ops {:>12}", c.step1(), c.step3());
    }
    Ok(())
}

fn check(name: &str, ok: bool, detail: String) -> bool {
    println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    ok
}

fn verify() -> Result<bool> {
    let mut ok = true;
    let c = collision_probability(2500, 0.01, 2, 8)?;
    ok &= check("collision probability", (c - 0.462928).abs() < 1e-6, format!("{c:.6}"));
    let l = expected_code_load(2500, 0.01, 2, 8)?;
    ok &= check("code load", l == 1.5625, format!("{l}"));
    let b = baseline_detection_probability(2500, 0.01, 2, 8)?;
    ok &= check("baseline", (b - 0.4143).abs() < 1e-4, format!("{b:.4}"));
    let s3 = complexity_counts(100, 8, 25, 2)?.step3();
    ok &= check("step 3 complexity", s3 == 125_000, format!("{s3}"));

    let cfg = SimConfig {
        trials: 8,
        ..SimConfig::default()
    };
    let pts = vec![SweepPoint::from_config(&cfg, 20)];
    let mut outputs = Vec::new();
    for workers in [1, 4] {
        let rows = run_sweep(&cfg, &pts, Some(workers))?;
        let mut buf = Vec::new();
        emit(&rows, Format::Csv, &mut buf)?;
        outputs.push(buf);
    }
    ok &= check(
        "determinism",
        outputs[0] == outputs[1],
        "1 vs 4 workers".to_string(),
    );
    println!("full statistical suite: cargo test --release --test acceptance -- --nocapture");
    Ok(ok)
}

fn run() -> Result<bool> {
    let cli = Cli::parse();
    match cli.command {
        Command::Simulate(common) => {
            let cfg = prepare(&common)?;
            let pts: Vec<SweepPoint> = cfg.antennas.iter().map(|&m| SweepPoint::from_config(&cfg, m)).collect();
            let rows = run_sweep(&cfg, &pts, common.workers)?;
            write_rows(&rows, &common, &cfg)?;
        }
        Command::Sweep {
            common,
            preset,
            desk: _,
            full,
        } => {
            let cfg = prepare(&common)?;
            let scale = if full { Scale::Full } else { Scale::Desk };
            let pts = preset_points(&preset, scale, &cfg, common.trials)?;
            log::info!("{preset}: {} sweep points", pts.len());
            let rows = run_sweep(&cfg, &pts, common.workers)?;
            write_rows(&rows, &common, &cfg)?;
        }
        Command::Analytic { config } => analytic(&read_config(&config)?)?,
        Command::Verify => return verify(),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
