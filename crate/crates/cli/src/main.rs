use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use cweyl::discretize::{
    assemble_operator, assemble_perturbation, count_in, eigenvalues, sigma_min_map, sort_spectrum, write_matrix,
    FourierTruncation,
};
use cweyl::domains::{weyl_measure, WeylOptions};
use cweyl::harness::{run_experiment, write_report, ExperimentConfig, ExperimentSpec, HarnessError, RunOptions};
use cweyl::quasimode::{build_quasimode, default_grid_size, residual, write_quasimode, CutoffOptions};
use cweyl::randomness::{sample_draw, SeedSpec};
use cweyl::symbol::{classify_region, find_roots, RegionClass, RootOptions};
use cweyl::{Complex64, MatrixSymbol, SpectralDomain};
use serde_json::json;

#[derive(Parser)]
#[command(name = "cweyl", version, about = "Eigenvalue counting for randomly perturbed systems on the circle")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Classify a grid of z values as outside Σ, inside Λ, or near Φ.
    SymbolScan {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Grid size `NxM` over the bounding box of the first domain.
        #[arg(long, default_value = "40x40")]
        grid: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the classified roots of det(p - z) as JSON.
    Roots {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long, allow_hyphen_values = true)]
        z: String,
    },
    /// Phase-space measure of a domain and the predicted count.
    Weyl {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Index into the config's domain list.
        #[arg(long, default_value_t = 0)]
        domain: usize,
        /// Semiclassical parameter; the classical prefactor is used when absent.
        #[arg(long)]
        h: Option<f64>,
    },
    /// Export the truncated operator matrix.
    Assemble {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        h: f64,
        #[arg(long = "K")]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Eigenvalues of the truncated operator, optionally perturbed.
    Spectrum {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        h: f64,
        #[arg(long, default_value_t = 0.0)]
        delta: f64,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 0)]
        trial: u64,
        #[arg(long = "K")]
        k: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Smallest singular value of P - z on a grid.
    Pseudospec {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        h: f64,
        /// `NxM`, or `RE0:RE1:N,IM0:IM1:M` for an explicit box.
        #[arg(long, default_value = "40x40", allow_hyphen_values = true)]
        grid: String,
        #[arg(long = "K")]
        k: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// WKB quasimode at the first plus root over z.
    Quasimode {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long, allow_hyphen_values = true)]
        z: String,
        #[arg(long)]
        h: f64,
        #[arg(long = "K")]
        k: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Monte Carlo semiclassical counting experiment.
    McSemiclassical {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dump_eigs: bool,
        /// Record per-trial wall clock (makes trials.csv run dependent).
        #[arg(long)]
        timing: bool,
    },
    /// Monte Carlo high-energy counting experiment.
    McHighenergy {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dump_eigs: bool,
        #[arg(long)]
        timing: bool,
    },
}

/// An error with the process exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        Self { code: e.exit_code() as u8, error: e.into() }
    }
}

fn config_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 2, error: e.into() }
}

fn numeric_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 3, error: e.into() }
}

fn io_fail(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| config_err(anyhow::Error::new(e).context(format!("writing {}", path.display())))
}

type Res<T> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let mut msg = f.error.to_string();
            for cause in f.error.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(f.code)
        }
    }
}

fn run(cmd: Command) -> Res<()> {
    match cmd {
        Command::SymbolScan { cfg, grid, out } => symbol_scan(&load(&cfg)?, &grid, &out),
        Command::Roots { cfg, z } => {
            let cfg = load(&cfg)?;
            let inv = find_roots(&symbol(&cfg)?, parse_z(&z)?, &RootOptions::default()).map_err(numeric_err)?;
            println!("{}", serde_json::to_string_pretty(&inv).map_err(numeric_err)?);
            Ok(())
        }
        Command::Weyl { cfg, domain, h } => weyl(&load(&cfg)?, domain, h),
        Command::Assemble { cfg, h, k, out } => {
            let cfg = load(&cfg)?;
            let trunc = FourierTruncation::new(k, cfg.symbol.n, h).map_err(config_err)?;
            let m = assemble_operator(&symbol(&cfg)?, &trunc).map_err(config_err)?;
            let file = create(&out)?;
            write_matrix(&m, BufWriter::new(file)).map_err(numeric_err)
        }
        Command::Spectrum { cfg, h, delta, seed, trial, k, out } => {
            spectrum(&load(&cfg)?, h, delta, seed, trial, k, &out)
        }
        Command::Pseudospec { cfg, h, grid, k, out } => pseudospec(&load(&cfg)?, h, &grid, k, &out),
        Command::Quasimode { cfg, z, h, k, out } => quasimode(&load(&cfg)?, parse_z(&z)?, h, k, &out),
        Command::McSemiclassical { cfg, out, dump_eigs, timing } => monte_carlo(&cfg, "semiclassical", &out, dump_eigs, timing),
        Command::McHighenergy { cfg, out, dump_eigs, timing } => monte_carlo(&cfg, "highenergy", &out, dump_eigs, timing),
    }
}

fn load(arg: &ConfigArg) -> Res<ExperimentConfig> {
    Ok(ExperimentConfig::load(&arg.config)?)
}

fn symbol(cfg: &ExperimentConfig) -> Res<MatrixSymbol> {
    Ok(cfg.symbol.build()?)
}

fn create(path: &Path) -> Res<fs::File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_fail(dir))?;
    }
    fs::File::create(path).map_err(io_fail(path))
}

fn out_file(dir: &Path, name: &str) -> Res<(PathBuf, BufWriter<fs::File>)> {
    fs::create_dir_all(dir).map_err(io_fail(dir))?;
    let path = dir.join(name);
    let file = create(&path)?;
    Ok((path, BufWriter::new(file)))
}

fn parse_z(s: &str) -> Res<Complex64> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [re, im] = parts.as_slice() else {
        return Err(config_err(anyhow!("expected RE,IM but got {s:?}")));
    };
    let re: f64 = re.parse().with_context(|| format!("bad real part {re:?}")).map_err(config_err)?;
    let im: f64 = im.parse().with_context(|| format!("bad imaginary part {im:?}")).map_err(config_err)?;
    Ok(Complex64::new(re, im))
}

fn parse_dims(s: &str) -> Res<(usize, usize)> {
    let (a, b) = s.split_once(['x', 'X']).ok_or_else(|| config_err(anyhow!("expected NxM but got {s:?}")))?;
    let n: usize = a.trim().parse().map_err(config_err)?;
    let m: usize = b.trim().parse().map_err(config_err)?;
    if n == 0 || m == 0 {
        return Err(config_err(anyhow!("grid dimensions must be positive")));
    }
    Ok((n, m))
}

fn parse_range(s: &str) -> Res<(f64, f64, usize)> {
    let parts: Vec<&str> = s.split(':').collect();
    let [a, b, n] = parts.as_slice() else {
        return Err(config_err(anyhow!("expected LO:HI:N but got {s:?}")));
    };
    let n: usize = n.trim().parse().map_err(config_err)?;
    if n == 0 {
        return Err(config_err(anyhow!("grid dimensions must be positive")));
    }
    Ok((a.trim().parse().map_err(config_err)?, b.trim().parse().map_err(config_err)?, n))
}

/// Cell-centred grid over a box, real part outermost.
fn z_grid(spec: &str, domain: Option<&SpectralDomain>) -> Res<Vec<Complex64>> {
    let (re, im) = if let Some((r, i)) = spec.split_once(',') {
        (parse_range(r)?, parse_range(i)?)
    } else {
        let (n, m) = parse_dims(spec)?;
        let d = domain.ok_or_else(|| config_err(anyhow!("a plain NxM grid needs a domain in the config")))?;
        let (a, b, c, e) = d.bounding_box();
        ((a, b, n), (c, e, m))
    };
    let mut out = Vec::with_capacity(re.2 * im.2);
    for i in 0..re.2 {
        for j in 0..im.2 {
            let u = (i as f64 + 0.5) / re.2 as f64;
            let v = (j as f64 + 0.5) / im.2 as f64;
            out.push(Complex64::new(re.0 + (re.1 - re.0) * u, im.0 + (im.1 - im.0) * v));
        }
    }
    Ok(out)
}

fn truncation(cfg: &ExperimentConfig, s: &MatrixSymbol, h: f64, k: Option<usize>) -> Res<FourierTruncation<f64>> {
    match k {
        Some(k) => FourierTruncation::new(k, s.dim(), h).map_err(config_err),
        None => {
            let sup = cfg.domain()?.sup_abs();
            FourierTruncation::rule(s, sup, h, 2.0).map_err(config_err)
        }
    }
}

fn symbol_scan(cfg: &ExperimentConfig, grid: &str, out: &Path) -> Res<()> {
    let s = symbol(cfg)?;
    let zs = z_grid(grid, Some(&cfg.domain()?))?;
    let opts = RootOptions::default();
    let (_, mut w) = out_file(out, "region_map.csv")?;
    writeln!(w, "re,im,class,beta,gamma").map_err(numeric_err)?;
    for z in zs {
        let row = match classify_region(&s, z, &opts).map_err(numeric_err)? {
            RegionClass::OutsideSigma => ("outside".to_string(), 0, 0),
            RegionClass::NearPhi => ("phi".to_string(), 0, 0),
            RegionClass::InLambda(inv) => ("lambda".to_string(), inv.beta, inv.gamma),
        };
        writeln!(w, "{:e},{:e},{},{},{}", z.re, z.im, row.0, row.1, row.2).map_err(numeric_err)?;
    }
    w.flush().map_err(numeric_err)
}

fn weyl(cfg: &ExperimentConfig, index: usize, h: Option<f64>) -> Res<()> {
    let s = symbol(cfg)?;
    let spec = cfg
        .domains
        .get(index)
        .ok_or_else(|| config_err(anyhow!("domain index {index} out of range")))?;
    let domain = spec.build()?;
    let m = weyl_measure(&s, &domain, &WeylOptions::default()).map_err(numeric_err)?;
    let scale = std::f64::consts::TAU * h.unwrap_or(1.0);
    let report = json!({
        "measure": m.value,
        "last_delta": m.last_delta,
        "grid": m.grid,
        "h": h,
        "prediction": m.value / scale,
    });
    println!("{}", serde_json::to_string_pretty(&report).map_err(numeric_err)?);
    Ok(())
}

fn spectrum(
    cfg: &ExperimentConfig,
    h: f64,
    delta: f64,
    seed: Option<u64>,
    trial: u64,
    k: Option<usize>,
    out: &Path,
) -> Res<()> {
    let s = symbol(cfg)?;
    let trunc = truncation(cfg, &s, h, k)?;
    let mut m = assemble_operator(&s, &trunc).map_err(config_err)?;
    if delta > 0.0 {
        let law = cfg.perturbation.law(s.dim(), 2 * trunc.k_max)?;
        let draw = sample_draw(&law, &SeedSpec::new(seed.unwrap_or(cfg.seed), "spectrum", trial), h);
        let q = assemble_perturbation(&draw, &trunc, delta).map_err(numeric_err)?;
        m = m.minus_perturbation(&q).map_err(numeric_err)?;
    } else if delta < 0.0 {
        return Err(config_err(anyhow!("delta must be non-negative")));
    }
    let mut eigs = eigenvalues(&m).map_err(numeric_err)?;
    sort_spectrum(&mut eigs);
    let (_, mut w) = out_file(out, "eigenvalues.csv")?;
    writeln!(w, "re,im").map_err(numeric_err)?;
    for z in &eigs {
        writeln!(w, "{:e},{:e}", z.re, z.im).map_err(numeric_err)?;
    }
    w.flush().map_err(numeric_err)?;
    let counts: Vec<usize> = cfg
        .domains
        .iter()
        .map(|d| d.build().map(|d| count_in(&eigs, &d)))
        .collect::<Result<_, _>>()?;
    let info = json!({ "h": h, "K": trunc.k_max, "delta": delta, "dim": trunc.dim(), "counts": counts });
    let (_, mut w) = out_file(out, "spectrum.json")?;
    writeln!(w, "{}", serde_json::to_string_pretty(&info).map_err(numeric_err)?).map_err(numeric_err)?;
    Ok(())
}

fn pseudospec(cfg: &ExperimentConfig, h: f64, grid: &str, k: Option<usize>, out: &Path) -> Res<()> {
    let s = symbol(cfg)?;
    let trunc = truncation(cfg, &s, h, k)?;
    let m = assemble_operator(&s, &trunc).map_err(config_err)?;
    let domain = cfg.domain().ok();
    let zs = z_grid(grid, domain.as_ref())?;
    let sig = sigma_min_map(&m, &zs);
    let (_, mut w) = out_file(out, "sigma_min.csv")?;
    writeln!(w, "re,im,sigma_min").map_err(numeric_err)?;
    for (z, s) in zs.iter().zip(&sig) {
        writeln!(w, "{:e},{:e},{:e}", z.re, z.im, s).map_err(numeric_err)?;
    }
    w.flush().map_err(numeric_err)
}

fn quasimode(cfg: &ExperimentConfig, z: Complex64, h: f64, k: Option<usize>, out: &Path) -> Res<()> {
    let s = symbol(cfg)?;
    let inv = find_roots(&s, z, &RootOptions::default()).map_err(numeric_err)?;
    if inv.degenerate {
        return Err(config_err(anyhow!("z = {z} lies near Φ; roots are degenerate")));
    }
    let root = *inv
        .plus_roots()
        .next()
        .ok_or_else(|| config_err(anyhow!("no plus root over z = {z}")))?;
    let k = match k {
        Some(k) => k,
        None => FourierTruncation::rule(&s, z.norm(), h, 2.0).map_err(config_err)?.k_max,
    };
    let trunc = FourierTruncation::new(k, s.dim(), h).map_err(config_err)?;
    let mut opts = CutoffOptions::default();
    for (slot, r) in opts.other_bases.iter_mut().zip(inv.plus_roots().filter(|r| **r != root)) {
        *slot = Some(r.point.x);
    }
    let q = build_quasimode(&s, z, &root, h, default_grid_size(k), &opts).map_err(numeric_err)?;
    let m = assemble_operator(&s, &trunc).map_err(config_err)?;
    let res = residual(&m, z, &q).map_err(numeric_err)?;
    let (_, w) = out_file(out, "quasimode.csv")?;
    write_quasimode(&q, w).map_err(numeric_err)?;
    let info = json!({
        "z": [z.re, z.im],
        "h": h,
        "K": k,
        "root": root,
        "cutoff_support": q.cutoff.support,
        "residual": res,
    });
    let (_, mut w) = out_file(out, "quasimode.json")?;
    writeln!(w, "{}", serde_json::to_string_pretty(&info).map_err(numeric_err)?).map_err(numeric_err)?;
    Ok(())
}

fn monte_carlo(arg: &ConfigArg, mode: &str, out: &Path, dump_eigs: bool, timing: bool) -> Res<()> {
    let cfg = load(arg)?;
    let actual = match &cfg.experiment {
        Some(ExperimentSpec::Semiclassical { .. }) => "semiclassical",
        Some(ExperimentSpec::Highenergy { .. }) => "highenergy",
        None => return Err(config_err(anyhow!("config has no experiment section"))),
    };
    if actual != mode {
        return Err(config_err(anyhow!("config describes a {actual} experiment, not {mode}")));
    }
    let opts = RunOptions { timing, keep_eigenvalues: dump_eigs, ..RunOptions::default() };
    let report = run_experiment(&cfg, &opts)?;
    for path in write_report(&report, out, dump_eigs)? {
        println!("{}", path.display());
    }
    Ok(())
}
