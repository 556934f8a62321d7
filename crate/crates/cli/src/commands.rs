use std::fs;
use std::path::{Path, PathBuf};

use cellscale_core::corpus::{
    filter_zero_library, load_matrix, normalize_log1p, save_matrix, select_hvg, split,
    subset_genes, synthesize, ExpressionMatrix, SplitTag, Stage, SyntheticSpec, DEFAULT_TARGET_SUM,
};
use cellscale_core::entropy::{entropy_report, nll_points, refit_nll, DERIVED_PROVENANCE};
use cellscale_core::fit::{
    fit_power_law, read_points_csv, FitResult, ScalingPoint, DEFAULT_GRID_SIZE,
};
use cellscale_core::model::{ModelConfig, Preset};
use cellscale_core::trainer::train;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::config::{ConfigFile, TrainOverrides};
use crate::error::{CliError, Result};
use crate::plot::loglog_svg;
use crate::report::{render, ReportInputs};
use crate::sweep::{run_sweep, SweepIndex, SweepSpec, DEFAULT_SEEDS};

pub const DEFAULT_SPLIT_SEED: u64 = 42;

#[derive(Debug, Parser)]
#[command(
    name = "cellscale",
    version,
    about = "Scaling-law sweeps for masked expression models"
)]
pub struct Cli {
    /// Base directory for relative paths.
    #[arg(long, global = true, env = "CELLSCALE_OUT")]
    pub out_root: Option<PathBuf>,
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create or preprocess expression matrices.
    #[command(subcommand)]
    Data(DataCommand),
    /// Train one model.
    Train(TrainArgs),
    /// Train every preset and seed combination and write a run index.
    Sweep(SweepArgs),
    /// Fit the power law to a run index or a points CSV.
    Fit(FitArgs),
    /// Entropy estimates from fitted floors.
    Entropy(EntropyArgs),
    /// Markdown report for a sweep directory.
    Report(ReportArgs),
}

#[derive(Debug, Subcommand)]
pub enum DataCommand {
    /// Low-rank synthetic matrix with censored Gaussian noise.
    Synth(SynthArgs),
    /// Raw counts to a normalized, gene-selected, split corpus.
    Build(BuildArgs),
    /// Print dimensions, stage and split counts.
    Info { path: PathBuf },
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 2000)]
    pub cells: usize,
    #[arg(long, default_value_t = 64)]
    pub genes: usize,
    #[arg(long, default_value_t = 8)]
    pub rank: usize,
    #[arg(long, default_value_t = 0.5)]
    pub sigma: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_SPLIT_SEED)]
    pub split_seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    /// Raw-count XMAT file.
    #[arg(long)]
    pub input: PathBuf,
    /// Number of highly variable genes to keep.
    #[arg(long)]
    pub n_top: usize,
    #[arg(long, default_value_t = DEFAULT_TARGET_SUM)]
    pub target_sum: f64,
    #[arg(long, default_value_t = DEFAULT_SPLIT_SEED)]
    pub split_seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Size preset (XXS, TINY, XS, S, M, L, XL).
    #[arg(long, conflicts_with_all = ["dim", "layers", "heads", "ffn_mult"])]
    pub preset: Option<Preset>,
    #[arg(long, requires_all = ["layers", "heads"])]
    pub dim: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long, default_value_t = 4)]
    pub ffn_mult: usize,
}

impl ModelArgs {
    fn config(&self, vocab: usize) -> Result<ModelConfig> {
        match (self.preset, self.dim, self.layers, self.heads) {
            (Some(p), ..) => Ok(ModelConfig::from_preset(p, vocab)),
            (None, Some(d), Some(l), Some(h)) => {
                Ok(ModelConfig::custom(vocab, d, l, h, self.ffn_mult)?)
            }
            _ => Err(CliError::Usage(
                "give --preset or all of --dim, --layers, --heads".into(),
            )),
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[command(flatten)]
    pub train: TrainOverrides,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Comma-separated presets [default: XXS,TINY,XS,S].
    #[arg(long, value_delimiter = ',')]
    pub presets: Option<Vec<Preset>>,
    /// Comma-separated seeds [default: 7,8,9].
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[command(flatten)]
    pub train: TrainOverrides,
    /// Sweep directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Mse,
    /// Gaussian NLL derived from each run's MSE.
    Nll,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Sweep directory or index file.
    #[arg(long, conflicts_with = "csv", required_unless_present = "csv")]
    pub index: Option<PathBuf>,
    /// CSV with an `x,loss` header.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Metric::Mse)]
    pub metric: Metric,
    #[arg(long)]
    pub grid_size: Option<usize>,
    /// Fit JSON output.
    #[arg(long)]
    pub out: PathBuf,
    /// SVG output [default: next to --out].
    #[arg(long)]
    pub plot: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EntropyArgs {
    /// Fit JSON of the MSE metric.
    #[arg(long)]
    pub fit: PathBuf,
    /// Fit JSON of the derived NLL metric.
    #[arg(long, conflicts_with = "runs")]
    pub nll_fit: Option<PathBuf>,
    /// Sweep directory or index file; its runs are NLL-transformed and refit.
    #[arg(long)]
    pub runs: Option<PathBuf>,
    #[arg(long)]
    pub grid_size: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Sweep directory.
    #[arg(long)]
    pub runs: PathBuf,
    /// Markdown output [default: report.md in the sweep directory].
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub grid_size: Option<usize>,
    /// Decimals in the range table.
    #[arg(long, default_value_t = 2)]
    pub decimals: usize,
}

/// Written by `fit`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOutput {
    pub metric: Metric,
    pub provenance: Option<String>,
    pub fit: FitResult,
    pub non_scaling: bool,
    pub points: Vec<ScalingPoint>,
}

struct Ctx {
    root: Option<PathBuf>,
    file: ConfigFile,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        match &self.root {
            Some(root) if p.is_relative() => root.join(p),
            _ => p.to_path_buf(),
        }
    }

    fn grid(&self, flag: Option<usize>) -> usize {
        flag.or(self.file.fit.grid_size)
            .unwrap_or(DEFAULT_GRID_SIZE)
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<String> {
    let json = serde_json::to_string_pretty(value).map_err(CliError::json(path))? + "\n";
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    }
    fs::write(path, &json).map_err(CliError::io(path))?;
    Ok(json)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    serde_json::from_str(&text).map_err(CliError::json(path))
}

fn save_corpus(m: &ExpressionMatrix, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    }
    save_matrix(m, path)?;
    Ok(())
}

fn describe(m: &ExpressionMatrix) -> String {
    let mut s = format!(
        "{} cells x {} genes, {:?}",
        m.n_cells(),
        m.n_genes(),
        m.stage()
    );
    if let Some(split) = m.split() {
        s += &format!(
            ", split train/val/test {}/{}/{} (seed {})",
            split.count(SplitTag::Train),
            split.count(SplitTag::Val),
            split.count(SplitTag::Test),
            split.seed()
        );
    }
    s
}

/// Executes one parsed command. Human-readable progress goes to stderr,
/// results to stdout.
pub fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let ctx = Ctx {
        root: cli.out_root,
        file,
    };
    match cli.command {
        Command::Data(cmd) => data(&ctx, cmd),
        Command::Train(args) => train_cmd(&ctx, args),
        Command::Sweep(args) => sweep_cmd(&ctx, args),
        Command::Fit(args) => fit_cmd(&ctx, args),
        Command::Entropy(args) => entropy_cmd(&ctx, args),
        Command::Report(args) => report_cmd(&ctx, args),
    }
}

fn data(ctx: &Ctx, cmd: DataCommand) -> Result<()> {
    match cmd {
        DataCommand::Synth(a) => {
            let m = synthesize(&SyntheticSpec {
                n_cells: a.cells,
                n_genes: a.genes,
                latent_rank: a.rank,
                noise_sigma: a.sigma,
                seed: a.seed,
            })?;
            let s = split(&m, a.split_seed);
            let m = m.with_split(s)?;
            let out = ctx.path(&a.out);
            save_corpus(&m, &out)?;
            println!("{}: {}", out.display(), describe(&m));
        }
        DataCommand::Build(a) => {
            let input = ctx.path(&a.input);
            let raw = load_matrix(&input)?;
            if raw.stage() != Stage::RawCounts {
                return Err(CliError::Usage(format!(
                    "{} is already normalized; build expects raw counts",
                    input.display()
                )));
            }
            let kept = filter_zero_library(&raw)?;
            let genes = select_hvg(&kept, a.n_top)?;
            let m = normalize_log1p(&subset_genes(&kept, &genes)?, a.target_sum)?;
            let s = split(&m, a.split_seed);
            let m = m.with_split(s)?;
            let out = ctx.path(&a.out);
            save_corpus(&m, &out)?;
            eprintln!(
                "dropped {} zero-library cells, kept {} of {} genes",
                raw.n_cells() - kept.n_cells(),
                genes.len(),
                raw.n_genes()
            );
            println!("{}: {}", out.display(), describe(&m));
        }
        DataCommand::Info { path } => {
            let path = ctx.path(&path);
            let m = load_matrix(&path)?;
            println!("{}: {}", path.display(), describe(&m));
        }
    }
    Ok(())
}

fn train_cmd(ctx: &Ctx, a: TrainArgs) -> Result<()> {
    let corpus = load_matrix(&ctx.path(&a.corpus))?;
    let model = a.model.config(corpus.n_genes())?;
    let mut config = ctx.file.train_config(&a.train);
    config.seed = a.seed;
    let out = ctx.path(&a.out);
    eprintln!(
        "training {} ({} parameters), lr {:e}, {} steps",
        model.label(),
        model.param_count(),
        config.lr(),
        config.total_steps
    );
    let result = train(&model, &corpus, &config, Some(&out))?;
    println!(
        "{}: best val mse {} at step {}",
        out.display(),
        result.record.best_val_mse,
        result.record.best_step
    );
    Ok(())
}

fn sweep_cmd(ctx: &Ctx, a: SweepArgs) -> Result<()> {
    let corpus = load_matrix(&ctx.path(&a.corpus))?;
    let presets = a
        .presets
        .or_else(|| ctx.file.sweep.presets.clone())
        .unwrap_or_else(|| vec![Preset::Xxs, Preset::Tiny, Preset::Xs, Preset::S]);
    let seeds = a
        .seeds
        .or_else(|| ctx.file.sweep.seeds.clone())
        .unwrap_or_else(|| DEFAULT_SEEDS.to_vec());
    let spec = SweepSpec {
        presets,
        seeds,
        train: ctx.file.train_config(&a.train),
        out_dir: ctx.path(&a.out),
    };
    let index = run_sweep(&spec, &corpus, |msg| eprintln!("{msg}"))?;
    println!(
        "{}: {} runs indexed",
        spec.out_dir.join(crate::sweep::INDEX_FILE).display(),
        index.runs.len()
    );
    Ok(())
}

fn load_points(ctx: &Ctx, index: Option<&Path>, csv: Option<&Path>) -> Result<Vec<ScalingPoint>> {
    match (index, csv) {
        (Some(p), _) => Ok(SweepIndex::load(&ctx.path(p))?.points()),
        (None, Some(p)) => Ok(read_points_csv(&ctx.path(p))?),
        (None, None) => Err(CliError::Usage("give --index or --csv".into())),
    }
}

fn fit_cmd(ctx: &Ctx, a: FitArgs) -> Result<()> {
    let raw = load_points(ctx, a.index.as_deref(), a.csv.as_deref())?;
    let (points, provenance, y_label) = match a.metric {
        Metric::Mse => (raw, None, "best validation MSE"),
        Metric::Nll => (
            nll_points(&raw)?,
            Some(DERIVED_PROVENANCE.to_string()),
            "derived Gaussian NLL (nats)",
        ),
    };
    let fit = fit_power_law(&points, ctx.grid(a.grid_size))?;
    let out = ctx.path(&a.out);
    let output = FitOutput {
        metric: a.metric,
        provenance,
        fit,
        non_scaling: fit.looks_non_scaling(),
        points,
    };
    write_json(&output, &out)?;
    let plot = a
        .plot
        .map(|p| ctx.path(&p))
        .unwrap_or_else(|| out.with_extension("svg"));
    let svg = loglog_svg(&output.points, Some(&fit), "Scaling fit", y_label);
    fs::write(&plot, svg).map_err(CliError::io(&plot))?;
    if output.non_scaling {
        eprintln!(
            "warning: alpha = {:.4}, R² = {:.4}; the data show no power-law scaling (non-scaling regime)",
            fit.alpha, fit.r2
        );
    }
    println!(
        "alpha {:.6} a {:.6} c {:.6} r2 {:.6} n {}",
        fit.alpha, fit.a, fit.c, fit.r2, fit.n
    );
    Ok(())
}

fn entropy_cmd(ctx: &Ctx, a: EntropyArgs) -> Result<()> {
    let mse: FitOutput = read_json(&ctx.path(&a.fit))?;
    if mse.metric != Metric::Mse {
        return Err(CliError::Usage("--fit must be an MSE fit".into()));
    }
    let nll_fit = match (&a.nll_fit, &a.runs) {
        (Some(p), _) => {
            let nll: FitOutput = read_json(&ctx.path(p))?;
            if nll.metric != Metric::Nll {
                return Err(CliError::Usage("--nll-fit must be an NLL fit".into()));
            }
            Some(nll.fit)
        }
        (None, Some(p)) => {
            let points = SweepIndex::load(&ctx.path(p))?.points();
            Some(refit_nll(&points, ctx.grid(a.grid_size))?)
        }
        (None, None) => None,
    };
    let report = entropy_report(&mse.fit, nll_fit.as_ref())?;
    let json = match &a.out {
        Some(p) => write_json(&report, &ctx.path(p))?,
        None => serde_json::to_string_pretty(&report).expect("report serializes") + "\n",
    };
    print!("{json}");
    eprintln!(
        "MSE floor {:.4} -> {:.3} bits per masked position",
        report.mse_floor.floor_value, report.mse_floor.bits_per_position
    );
    if let Some(n) = report.nll_floor {
        eprintln!(
            "NLL floor {:.4} nats -> {:.3} bits per masked position",
            n.floor_value, n.bits_per_position
        );
    }
    Ok(())
}

fn report_cmd(ctx: &Ctx, a: ReportArgs) -> Result<()> {
    let runs = ctx.path(&a.runs);
    let index = SweepIndex::load(&runs)?;
    if index.runs.is_empty() {
        return Err(CliError::Usage(format!("{} lists no runs", runs.display())));
    }
    let out = a
        .out
        .map(|p| ctx.path(&p))
        .unwrap_or_else(|| runs.join("report.md"));
    let grid = ctx.grid(a.grid_size);
    let points = index.points();
    let (fit, note) = match fit_power_law(&points, grid) {
        Ok(f) => (Some(f), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let entropy = match &fit {
        Some(f) => {
            let nll = refit_nll(&points, grid).ok();
            entropy_report(f, nll.as_ref()).ok()
        }
        None => None,
    };
    let plot_name = "scaling.svg";
    let plot_path = out.with_file_name(plot_name);
    fs::write(
        &plot_path,
        loglog_svg(
            &points,
            fit.as_ref(),
            "Best validation MSE",
            "best validation MSE",
        ),
    )
    .map_err(CliError::io(&plot_path))?;
    let md = render(&ReportInputs {
        index: &index,
        fit: fit.as_ref(),
        fit_note: note,
        entropy: entropy.as_ref(),
        plot: Some(plot_name),
        decimals: a.decimals,
    });
    fs::write(&out, &md).map_err(CliError::io(&out))?;
    println!("{}", out.display());
    Ok(())
}
