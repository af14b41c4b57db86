use clap::{Parser, Subcommand};
use peierls_core::config::RunConfig;
use peierls_core::error::ErrorClass;
use peierls_core::pipeline::{self, Stages, Timings};
use peierls_core::reference::EvolutionRecord;
use peierls_core::{effective, magnetic_frame, Error, Result};
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "peierls-lab", version, about = "Magnetic Bloch-band reduction experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// output directory (overrides run.out_dir; default "out")
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// worker threads
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// seed for all pseudorandom choices (overrides run.seed)
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// band table and cache
    Bands,
    /// Wannier functions, decay profile and magnetic Gram spectra
    Frame,
    /// hopping sequence, Peierls matrices and residuals
    Effective,
    /// spectral distance, commutator and evolution report
    Compare,
    /// evolution error table
    Evolve,
    /// flux-resolved spectra
    Butterfly,
    /// invariant suite
    Validate,
}

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_INVARIANT: u8 = 4;

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    cache: Option<PathBuf>,
}

fn eps_tag(e: f64) -> String {
    format!("{e:.4}")
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn write_json(dir: &Path, name: &str, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(dir.join(name), text)?;
    Ok(())
}

fn cmd_bands(ctx: &Ctx, timings: &mut Timings) -> Result<()> {
    let bands = timings.record("bands", || pipeline::bands_with_cache(&ctx.cfg, ctx.cache.as_deref()))?;
    pipeline::write_bands_csv(&bands, create(&ctx.out, "bands.csv")?)
}

fn cmd_frame(ctx: &Ctx, timings: &mut Timings) -> Result<()> {
    let st = Stages::prepare(&ctx.cfg, ctx.cache.as_deref())?;
    st.wannier.write_csv(create(&ctx.out, "wannier.csv")?)?;
    pipeline::write_decay_csv(&st.wannier, create(&ctx.out, "decay.csv")?)?;
    write_json(
        &ctx.out,
        "frame.json",
        &serde_json::json!({
            "n_b": st.frame.n_b,
            "conditioning": st.frame.conditioning,
            "extra_trial_seed": st.frame.seed,
            "wannier_tail": st.wannier.tail,
            "family": st.family,
        }),
    )?;
    for &eps in &ctx.cfg.field.epsilons {
        let spec = st.spec(eps);
        let gram = timings.record(&format!("gram ε={eps}"), || {
            let f = magnetic_frame::build_magnetic_frame(&st.wannier, &spec, &st.supercell)?;
            magnetic_frame::gram_spectrum(&f)
        })?;
        gram.write_csv(create(&ctx.out, &format!("gram_eps{}.csv", eps_tag(eps)))?)?;
    }
    timings.0.extend(st.timings.0);
    Ok(())
}

fn cmd_effective(ctx: &Ctx, timings: &mut Timings) -> Result<()> {
    let st = Stages::prepare(&ctx.cfg, ctx.cache.as_deref())?;
    std::fs::write(ctx.out.join("hopping.json"), serde_json::to_string_pretty(&st.hopping.to_json())? + "\n")?;
    let first = if ctx.cfg.field.c == 0.0 {
        let m1 = timings.record("first order", || st.first_order(st.hopping.radius))?;
        std::fs::write(ctx.out.join("first_order.json"), serde_json::to_string_pretty(&m1.to_json())? + "\n")?;
        Some(m1)
    } else {
        None
    };
    let mut rows = Vec::new();
    for &eps in &ctx.cfg.field.epsilons {
        let run = timings.record(&format!("ε={eps}"), || st.epsilon_run(eps))?;
        let peierls = st.peierls(&run, None)?;
        std::fs::write(
            ctx.out.join(format!("matrix_eps{}.json", eps_tag(eps))),
            serde_json::to_string_pretty(&peierls.to_json())? + "\n",
        )?;
        let residual = effective::matrix_residual(&run.direct, &peierls)?;
        let corrected = match &first {
            Some(m1) => Some(effective::matrix_residual(&run.direct, &st.peierls(&run, Some(m1))?)?),
            None => None,
        };
        let cov = effective::covariance_extract(&run.direct, &run.spec.gauge()?, st.hopping.radius)?;
        rows.push(serde_json::json!({
            "epsilon": eps,
            "peierls_residual": residual,
            "corrected_residual": corrected,
            "covariance_residual": cov.residual,
            "hopping_shift": cov.hopping.distance(&st.hopping),
        }));
    }
    write_json(&ctx.out, "effective.json", &rows)?;
    timings.0.extend(st.timings.0);
    Ok(())
}

fn cmd_compare(ctx: &Ctx, timings: &mut Timings) -> Result<()> {
    let st = Stages::prepare(&ctx.cfg, ctx.cache.as_deref())?;
    let mut entries = Vec::new();
    for &eps in &ctx.cfg.field.epsilons {
        let e = timings.record(&format!("ε={eps}"), || {
            let run = st.epsilon_run(eps)?;
            pipeline::compare_at(&st, &run, &ctx.cfg.run.times)
        })?;
        entries.push(e);
    }
    write_json(&ctx.out, "compare.json", &pipeline::comparison_report(&st, entries))?;
    timings.0.extend(st.timings.0);
    Ok(())
}

fn cmd_evolve(ctx: &Ctx, timings: &mut Timings) -> Result<()> {
    let st = Stages::prepare(&ctx.cfg, ctx.cache.as_deref())?;
    let mut errors = Vec::new();
    for &eps in &ctx.cfg.field.epsilons {
        let row = timings.record(&format!("ε={eps}"), || {
            let run = st.epsilon_run(eps)?;
            let window = st.window_spectrum(&run)?;
            pipeline::evolve_at(&st, &run, &window, &ctx.cfg.run.times)
        })?;
        errors.push(row);
    }
    let rec = EvolutionRecord::new(ctx.cfg.run.times.clone(), ctx.cfg.field.epsilons.clone(), errors)?;
    pipeline::write_evolution_csv(&rec, create(&ctx.out, "evolution.csv")?)?;
    timings.0.extend(st.timings.0);
    Ok(())
}

fn cmd_butterfly(ctx: &Ctx, timings: &mut Timings) -> Result<()> {
    let hop = timings.record("hopping", || pipeline::butterfly_hopping(&ctx.cfg, ctx.cache.as_deref()))?;
    let fluxes = pipeline::flux_grid(ctx.cfg.run.flux_points);
    let points = timings.record("spectra", || effective::butterfly(&hop, &fluxes, ctx.cfg.run.butterfly_l))?;
    effective::write_butterfly_csv(&points, create(&ctx.out, "butterfly.csv")?)
}

/// Ok(false) when some invariant failed.
fn cmd_validate(ctx: &Ctx, timings: &mut Timings) -> Result<bool> {
    let st = Stages::prepare(&ctx.cfg, ctx.cache.as_deref())?;
    let report = timings.record("validate", || pipeline::validate(&st))?;
    write_json(&ctx.out, "report.json", &report)?;
    for c in &report.checks {
        log::info!("{:?} {} {:?}", c.status, c.name, c.value);
    }
    timings.0.extend(st.timings.0);
    Ok(report.passed())
}

fn load(cli: &Cli) -> Result<Ctx> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("--config <path> is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.run.seed = s;
    }
    if let Some(w) = cli.workers {
        if w == 0 {
            return Err(Error::InvalidInput("--workers must be ≥ 1".into()));
        }
        cfg.run.workers = Some(w);
    }
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.run.out_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    let cache = std::env::var_os("PEIERLS_CACHE_DIR")
        .map(PathBuf::from)
        .or_else(|| cfg.run.cache_dir.as_ref().map(PathBuf::from));
    std::fs::create_dir_all(&out)?;
    Ok(Ctx { cfg, out, cache })
}

fn run(cli: &Cli) -> Result<bool> {
    let ctx = load(cli)?;
    if let Some(w) = ctx.cfg.run.workers {
        // fails only if a pool already exists, which is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(w).build_global();
    }
    let mut timings = Timings::default();
    let ok = match cli.command {
        Command::Bands => cmd_bands(&ctx, &mut timings).map(|_| true),
        Command::Frame => cmd_frame(&ctx, &mut timings).map(|_| true),
        Command::Effective => cmd_effective(&ctx, &mut timings).map(|_| true),
        Command::Compare => cmd_compare(&ctx, &mut timings).map(|_| true),
        Command::Evolve => cmd_evolve(&ctx, &mut timings).map(|_| true),
        Command::Butterfly => cmd_butterfly(&ctx, &mut timings).map(|_| true),
        Command::Validate => cmd_validate(&ctx, &mut timings),
    }?;
    write_json(&ctx.out, "timings.json", &timings)?;
    Ok(ok)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("validation failed; see report.json");
            ExitCode::from(EXIT_INVARIANT)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Config => EXIT_CONFIG,
                ErrorClass::Numerical => EXIT_NUMERICAL,
                ErrorClass::Invariant => EXIT_INVARIANT,
            })
        }
    }
}
