//! The `ntg` command-line interface.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numeric
//! failure.

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::autograd::Fault;
use crate::error::Error;
use crate::featnet::FeatureExtractor;
use crate::formats::{read_ntx1, read_pgm, write_ntx1, write_pgm, NdArray, Ntx1Map};
use crate::generator::{GeneratorConfig, GeneratorNet};
use crate::gradcheck;
use crate::matchswap::{swap_pyramid, MatchOptions, ReferencePyramids, SwapResult};
use crate::metrics::{evaluate_pair, row_to_csv, MetricReport, EVAL_HEADER};
use crate::toy::{ToyCorpus, ToyDomainSpec};
use crate::trainer::{run_training, sub_seed, TextureMode, TrainConfig, GENERATOR_PREFIX, TRAIN_CSV_HEADER};

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "ntg", version, about = "Multi-scale neural texture transfer for image-to-image translation")]
pub struct Cli {
    /// Seed for every seeded component [default: 0, or the config file's seed]
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads [default: all cores]
    #[arg(long, global = true, env = "NTG_THREADS")]
    pub threads: Option<usize>,
    /// Training configuration file (`key = value` lines)
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the feature pyramid of an image as NTX1 sections `level<l>`
    Extract(ExtractArgs),
    /// Print the best reference patch for every input patch as CSV
    Match(MatchArgs),
    /// Write swapped features, weight maps and index maps as NTX1
    Swap(MatchArgs),
    /// Run extract, match, swap and generate on one image
    Synthesize(SynthesizeArgs),
    /// Train on the toy corpus (or a `gen-data` tree)
    Train(TrainArgs),
    /// Compare predictions against targets; prints the metric CSV
    Eval(EvalArgs),
    /// Materialize the seeded toy corpus as PGM files plus a manifest
    GenData(GenDataArgs),
    /// Finite-difference check of every loss term on a small seeded instance
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// NTX1 weights with extractor sections [default: seeded extractor]
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Channel plan of the seeded extractor when --weights is absent
    #[arg(long, value_delimiter = ',', default_value = "16,32,64")]
    pub plan: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Reference image; repeat to pool several references
    #[arg(long = "ref", required = true)]
    pub refs: Vec<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Single pyramid level (1-based) [default: all levels]
    #[arg(long)]
    pub level: Option<usize>,
    #[arg(long, default_value_t = 3)]
    pub patch_size: usize,
    /// Stride between reference patches
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    /// Blur factor for the matching copy of each reference
    #[arg(long, default_value_t = 2.0)]
    pub blur: f64,
    /// Output file [default: standard output for match; required for swap]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthesizeArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Reference image; repeatable, required unless --mode none
    #[arg(long = "ref")]
    pub refs: Vec<PathBuf>,
    /// NTX1 weights with extractor and generator sections [default: seeded, untrained]
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// full | single | none
    #[arg(long, default_value = "full")]
    pub mode: String,
    /// 1 (translation) or 2 (super-resolution)
    #[arg(long, default_value_t = 1)]
    pub scale: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Ground truth; prints one eval CSV row when given
    #[arg(long)]
    pub target: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Corpus written by gen-data [default: generate from the config]
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory for metrics.csv and checkpoints
    #[arg(long)]
    pub out: PathBuf,
    /// Override the configured number of epochs
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Override the configured texture mode (full | single | none)
    #[arg(long)]
    pub mode: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Prediction PGM, or a directory of them
    #[arg(long)]
    pub pred: PathBuf,
    /// Target PGM, or a directory holding files of the same names
    #[arg(long)]
    pub target: PathBuf,
    /// Also write the CSV here
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    /// Training images per domain
    #[arg(long, default_value_t = 64)]
    pub train: usize,
    /// Validation pairs
    #[arg(long, default_value_t = 16)]
    pub val: usize,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Image side length (even, 8..=16)
    #[arg(long, default_value_t = gradcheck::DEFAULT_SIZE)]
    pub size: usize,
    /// Scale kernel gradients by this factor (negative control)
    #[arg(long, hide = true)]
    pub inject_fault: Option<f64>,
}

/// Failure of one CLI invocation.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(Error::NonFinite(_) | Error::GradCheck { .. } | Error::NonScalarLoss(_)) => EXIT_NUMERIC,
            CliError::Core(_) => EXIT_DATA,
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

/// Parses `args` and runs the command; the process entry point.
pub fn main_with(args: impl IntoIterator<Item = impl Into<OsString> + Clone>) -> ExitCode {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ntg: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

pub fn run(cli: Cli) -> CliResult {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        // Fails only if a pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let config = match &cli.config {
        Some(p) => Some(TrainConfig::load(p)?),
        None => None,
    };
    let seed = cli.seed.or(config.as_ref().map(|c| c.seed)).unwrap_or(0);
    let config = config.unwrap_or_default();
    match cli.command {
        Command::Extract(a) => extract(&a, seed),
        Command::Match(a) => match_cmd(&a, seed),
        Command::Swap(a) => swap_cmd(&a, seed),
        Command::Synthesize(a) => synthesize(&a, seed, &config),
        Command::Train(a) => train(&a, seed, config),
        Command::Eval(a) => eval(&a),
        Command::GenData(a) => gen_data(&a, seed),
        Command::Gradcheck(a) => gradcheck_cmd(&a, seed),
    }
}

fn load_extractor(m: &ModelArgs, seed: u64) -> CliResult<FeatureExtractor> {
    match &m.weights {
        Some(p) => Ok(FeatureExtractor::import(&read_ntx1(p)?)?),
        None => {
            if m.plan.is_empty() || m.plan.contains(&0) {
                return Err(CliError::Usage("--plan needs positive channel counts".into()));
            }
            Ok(crate::featnet::build_extractor(sub_seed(seed, 1), m.plan.len(), &m.plan)?)
        }
    }
}

fn extract(a: &ExtractArgs, seed: u64) -> CliResult {
    let fx = load_extractor(&a.model, seed)?;
    let pyr = fx.extract_pyramid(&read_pgm(&a.input)?)?;
    let mut map = Ntx1Map::new();
    for (i, g) in pyr.levels().iter().enumerate() {
        map.insert(format!("level{}", i + 1), NdArray::from_grid(g));
    }
    write_ntx1(&map, &a.out)?;
    Ok(())
}

fn run_swaps(a: &MatchArgs, seed: u64) -> CliResult<Vec<SwapResult>> {
    let fx = load_extractor(&a.model, seed)?;
    let levels: Vec<usize> = match a.level {
        Some(l) if (1..=fx.levels()).contains(&l) => vec![l],
        Some(l) => {
            return Err(CliError::Usage(format!(
                "--level {l} outside 1..={} of the extractor",
                fx.levels()
            )))
        }
        None => (1..=fx.levels()).collect(),
    };
    if a.patch_size == 0 || a.stride == 0 {
        return Err(CliError::Usage("--patch-size and --stride must be positive".into()));
    }
    let opts = MatchOptions {
        patch_size: a.patch_size,
        ref_stride: a.stride,
        ..MatchOptions::default()
    };
    let input = fx.extract_pyramid(&read_pgm(&a.input)?)?;
    let refs = reference_pyramids(&fx, &a.refs, a.blur)?;
    let refs: Vec<&ReferencePyramids> = refs.iter().collect();
    Ok(swap_pyramid(&input, &refs, &levels, &opts)?)
}

fn reference_pyramids(fx: &FeatureExtractor, paths: &[PathBuf], blur: f64) -> CliResult<Vec<ReferencePyramids>> {
    paths
        .iter()
        .map(|p| Ok(ReferencePyramids::new(fx, &read_pgm(p)?, blur)?))
        .collect()
}

fn write_text(out: Option<&Path>, text: &str) -> CliResult {
    match out {
        Some(p) => crate::formats::atomic_write(p, text.as_bytes())?,
        None => {
            let mut so = std::io::stdout().lock();
            so.write_all(text.as_bytes())
                .and_then(|_| so.flush())
                .map_err(|e| Error::io("<stdout>", e))?;
        }
    }
    Ok(())
}

fn match_cmd(a: &MatchArgs, seed: u64) -> CliResult {
    let swaps = run_swaps(a, seed)?;
    let mut csv = String::from("level,y,x,index\n");
    for s in &swaps {
        let m = &s.index_map;
        for y in 0..m.height {
            for x in 0..m.width {
                csv.push_str(&format!("{},{y},{x},{}\n", s.level, m.at(y, x)));
            }
        }
    }
    write_text(a.out.as_deref(), &csv)
}

fn swap_cmd(a: &MatchArgs, seed: u64) -> CliResult {
    let out = a
        .out
        .as_ref()
        .ok_or_else(|| CliError::Usage("swap needs --out".into()))?;
    let mut map = Ntx1Map::new();
    for s in run_swaps(a, seed)? {
        let l = s.level;
        map.insert(format!("swap.level{l}.features"), NdArray::from_grid(&s.swapped));
        map.insert(format!("swap.level{l}.weight"), NdArray::from_grid(&s.weight_map));
        map.insert(format!("swap.level{l}.index"), NdArray::from_grid(&s.index_map.to_grid()));
    }
    write_ntx1(&map, out)?;
    Ok(())
}

fn synthesize(a: &SynthesizeArgs, seed: u64, config: &TrainConfig) -> CliResult {
    let mode: TextureMode = a.mode.parse().map_err(|e: Error| CliError::Usage(e.to_string()))?;
    if !matches!(a.scale, 1 | 2) {
        return Err(CliError::Usage(format!("--scale must be 1 or 2, got {}", a.scale)));
    }
    if mode != TextureMode::None && a.refs.is_empty() {
        return Err(CliError::Usage(format!("--mode {} needs at least one --ref", a.mode)));
    }
    let (fx, g) = match &a.weights {
        Some(p) => {
            let map = read_ntx1(p)?;
            (FeatureExtractor::import(&map)?, GeneratorNet::import(GENERATOR_PREFIX, &map)?)
        }
        None => {
            let plan = &config.channel_plan;
            (
                crate::featnet::build_extractor(sub_seed(seed, 1), plan.len(), plan)?,
                GeneratorNet::seeded(sub_seed(seed, 2), GeneratorConfig::new(plan, a.scale))?,
            )
        }
    };
    if g.config().scale_factor != a.scale {
        return Err(Error::InvalidArgument(format!(
            "weights hold a scale-{} generator, --scale {} requested",
            g.config().scale_factor,
            a.scale
        ))
        .into());
    }
    if fx.levels() != g.levels() {
        return Err(Error::InvalidArgument(format!(
            "extractor has {} levels but the generator has {}",
            fx.levels(),
            g.levels()
        ))
        .into());
    }
    let input = read_pgm(&a.input)?;
    let levels = mode.levels(g.levels());
    let swaps = if levels.is_empty() {
        vec![]
    } else {
        let refs = reference_pyramids(&fx, &a.refs, config.blur_factor)?;
        let refs: Vec<&ReferencePyramids> = refs.iter().collect();
        swap_pyramid(&fx.extract_pyramid(&input)?, &refs, &levels, &config.match_options())?
    };
    let out = g.generate(&input, &swaps)?;
    if out.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("synthesized image".into()).into());
    }
    write_pgm(&out, &a.out)?;
    if let Some(t) = &a.target {
        let id = a.input.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
        let row = evaluate_pair(id, &out, &read_pgm(t)?)?;
        write_text(None, &format!("{EVAL_HEADER}\n{}\n", row_to_csv(&row)))?;
    }
    Ok(())
}

fn train(a: &TrainArgs, seed: u64, mut config: TrainConfig) -> CliResult {
    config.seed = seed;
    if let Some(e) = a.epochs {
        config.epochs = e;
    }
    if let Some(m) = &a.mode {
        config.mode = m.parse().map_err(|e: Error| CliError::Usage(e.to_string()))?;
    }
    config.validate()?;
    let corpus = match &a.data {
        Some(d) => ToyCorpus::load(d)?,
        None => config.corpus_spec().generate()?,
    };
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    println!("{TRAIN_CSV_HEADER}");
    let mut print = |row: &crate::trainer::EpochRow| println!("{}", row.to_csv());
    run_training(&config, &corpus, &a.out, Some(&mut print))?;
    Ok(())
}

fn pgm_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
        .collect();
    files.sort();
    Ok(files)
}

fn eval(a: &EvalArgs) -> CliResult {
    let stem = |p: &Path| p.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    let pairs: Vec<(String, PathBuf, PathBuf)> = match (a.pred.is_dir(), a.target.is_dir()) {
        (true, true) => pgm_files(&a.pred)?
            .into_iter()
            .filter_map(|p| {
                let t = a.target.join(p.file_name()?);
                t.is_file().then(|| (stem(&p), p, t))
            })
            .collect(),
        (false, false) => vec![(stem(&a.pred), a.pred.clone(), a.target.clone())],
        _ => return Err(CliError::Usage("--pred and --target must both be files or both directories".into())),
    };
    if pairs.is_empty() {
        return Err(Error::InvalidArgument(format!("no matching PGM files in {}", a.pred.display())).into());
    }
    let rows = pairs
        .iter()
        .map(|(id, p, t)| evaluate_pair(id.clone(), &read_pgm(p)?, &read_pgm(t)?))
        .collect::<crate::error::Result<Vec<_>>>()?;
    let csv = MetricReport::new(rows)?.to_csv();
    if let Some(out) = &a.out {
        write_text(Some(out), &csv)?;
    }
    write_text(None, &csv)
}

fn gen_data(a: &GenDataArgs, seed: u64) -> CliResult {
    let spec = ToyDomainSpec {
        image_size: a.size,
        train_per_domain: a.train,
        val_pairs: a.val,
        seed,
        ..ToyDomainSpec::default()
    };
    spec.generate()?.save(&a.out)?;
    Ok(())
}

fn gradcheck_cmd(a: &GradcheckArgs, seed: u64) -> CliResult {
    if a.size > gradcheck::MAX_SIZE {
        return Err(CliError::Usage(format!("--size must be at most {}", gradcheck::MAX_SIZE)));
    }
    let fault = a.inject_fault.map(Fault::ScaleKernelGrad);
    let outcome = gradcheck::run(a.size, seed, fault)?;
    write_text(None, &outcome.to_text())?;
    outcome.into_result()?;
    Ok(())
}
