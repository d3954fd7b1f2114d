use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use birkhoff_core::baselines::{find_sinkhorn_gap, AdversarialPattern, SinkhornReport};
use birkhoff_core::hc_layer::{
    depth_sweep, IdentityNorm, LayerWeights, RmsNorm, TanhAffine, ZeroSublayer,
};
use birkhoff_core::{
    analyze, compose_chain, count_params, tbp_forward, tbp_inverse, ChartParams, Margins, Matrix,
    MixerKind, MixerSpec, SquashSpec, TransportMatrix,
};
use clap::{Args, ValueEnum};
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::args::MixerArgs;

/// Name recorded next to every seed.
pub const GENERATOR: &str = "xoshiro256++";
pub const THREADS_ENV: &str = "BIRKHOFF_LAB_THREADS";
pub const ROUNDTRIP_TOL: f64 = 1e-10;
pub const EXACT_TOL: f64 = 1e-12;

/// Whether every checked tolerance held.
pub type Pass = bool;

fn normals(rng: &mut Xoshiro256PlusPlus, len: usize) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

fn seeded(seed: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => {
            std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("plain data serializes");
    s.push('\n');
    s
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[command(flatten)]
    pub mixer: MixerArgs,
    /// `zeros`, `init`, a JSON array, or a file holding one.
    #[arg(long, conflicts_with = "seed")]
    pub params: Option<String>,
    /// Draw standard-normal logits from this seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
pub struct GenFile {
    pub n: usize,
    pub m: usize,
    pub row_sums: Vec<f64>,
    pub col_sums: Vec<f64>,
    pub entries: Matrix,
    pub spec: MixerSpec,
    pub seed: Option<u64>,
    pub generator: Option<String>,
    pub params: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sinkhorn: Option<SinkhornReport>,
}

fn parse_params(text: &str, spec: &MixerSpec) -> Result<Vec<f64>> {
    let values: Vec<f64> = match text {
        "zeros" => vec![0.0; spec.logit_count()],
        "init" => spec.init_logits(),
        t if t.trim_start().starts_with('[') => {
            serde_json::from_str(t).context("parsing --params")?
        }
        path => {
            let body = std::fs::read_to_string(path).with_context(|| format!("reading {path}"))?;
            serde_json::from_str(&body).with_context(|| format!("parsing {path}"))?
        }
    };
    Ok(values)
}

pub fn gen(args: &GenArgs) -> Result<Pass> {
    let spec = args.mixer.to_spec()?;
    let params = match (&args.params, args.seed) {
        (Some(p), _) => parse_params(p, &spec)?,
        (None, Some(seed)) => normals(&mut seeded(seed), spec.logit_count()),
        (None, None) => spec.init_logits(),
    };
    let out = spec.build(&params)?;
    let n = spec.n;
    let file = GenFile {
        n,
        m: n,
        row_sums: vec![1.0; n],
        col_sums: vec![1.0; n],
        entries: out.matrix,
        seed: args.seed,
        generator: args.seed.map(|_| GENERATOR.to_string()),
        spec,
        params,
        sinkhorn: out.sinkhorn,
    };
    emit(&pretty(&file), args.out.as_deref())?;
    Ok(true)
}

/// Any matrix file: generator output, a bare transport matrix, or a bare
/// array of rows (taken as doubly stochastic).
#[derive(Deserialize)]
#[serde(untagged)]
enum MatrixFile {
    Full {
        entries: Matrix,
        row_sums: Option<Vec<f64>>,
        col_sums: Option<Vec<f64>>,
        spec: Option<MixerSpec>,
    },
    Rows(Matrix),
}

struct Loaded {
    entries: Matrix,
    row_sums: Vec<f64>,
    col_sums: Vec<f64>,
    spec: Option<MixerSpec>,
}

fn load(path: &Path) -> Result<Loaded> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let file: MatrixFile =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let (entries, rs, cs, spec) = match file {
        MatrixFile::Full {
            entries,
            row_sums,
            col_sums,
            spec,
        } => (entries, row_sums, col_sums, spec),
        MatrixFile::Rows(entries) => (entries, None, None, None),
    };
    let row_sums = rs.unwrap_or_else(|| vec![1.0; entries.rows()]);
    let col_sums = cs.unwrap_or_else(|| vec![1.0; entries.cols()]);
    if row_sums.len() != entries.rows() || col_sums.len() != entries.cols() {
        bail!(
            "margins of length {}/{} do not fit a {}x{} matrix",
            row_sums.len(),
            col_sums.len(),
            entries.rows(),
            entries.cols()
        );
    }
    Ok(Loaded {
        entries,
        row_sums,
        col_sums,
        spec,
    })
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    pub path: PathBuf,
    /// Margin tolerance.
    #[arg(long, default_value_t = EXACT_TOL)]
    pub tol: f64,
    /// Also invert with the TBP chart and rebuild.
    #[arg(long)]
    pub roundtrip: bool,
}

#[derive(Serialize)]
struct RoundTrip {
    max_entry_error: Option<f64>,
    tol: f64,
    error: Option<String>,
    pass: bool,
}

#[derive(Serialize)]
struct VerifyReport {
    n: usize,
    m: usize,
    row_residual: f64,
    col_residual: f64,
    min_entry: f64,
    tol: f64,
    exact: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    roundtrip: Option<RoundTrip>,
    pass: bool,
}

fn roundtrip(loaded: &Loaded) -> RoundTrip {
    let squash = loaded
        .spec
        .as_ref()
        .map_or_else(SquashSpec::sigmoid, |s| s.squash);
    let attempt = || -> birkhoff_core::Result<f64> {
        let margins = Margins::new(loaded.row_sums.clone(), loaded.col_sums.clone())?;
        let tm = TransportMatrix::new(loaded.entries.clone(), margins)?;
        let params = tbp_inverse(&tm, &squash)?;
        let back = tbp_forward(tm.margins(), &params, &squash)?;
        Ok(back.entries().max_abs_diff(tm.entries()))
    };
    match attempt() {
        Ok(err) => RoundTrip {
            max_entry_error: Some(err),
            tol: ROUNDTRIP_TOL,
            error: None,
            pass: err <= ROUNDTRIP_TOL,
        },
        Err(e) => RoundTrip {
            max_entry_error: None,
            tol: ROUNDTRIP_TOL,
            error: Some(e.to_string()),
            pass: false,
        },
    }
}

pub fn verify(args: &VerifyArgs) -> Result<Pass> {
    let loaded = load(&args.path)?;
    let (row_residual, col_residual) = loaded
        .entries
        .margin_deviation(&loaded.row_sums, &loaded.col_sums);
    let min_entry = loaded.entries.min_entry();
    let exact = row_residual.max(col_residual) <= args.tol && min_entry >= -args.tol;
    let rt = args.roundtrip.then(|| roundtrip(&loaded));
    let pass = exact && rt.as_ref().is_none_or(|r| r.pass);
    let report = VerifyReport {
        n: loaded.entries.rows(),
        m: loaded.entries.cols(),
        row_residual,
        col_residual,
        min_entry,
        tol: args.tol,
        exact,
        roundtrip: rt,
        pass,
    };
    print!("{}", pretty(&report));
    Ok(pass)
}

#[derive(Args, Debug)]
pub struct SpectralArgs {
    pub path: PathBuf,
}

pub fn spectral(args: &SpectralArgs) -> Result<Pass> {
    let loaded = load(&args.path)?;
    println!("{}", analyze(&loaded.entries)?.to_json());
    Ok(true)
}

#[derive(Args, Debug)]
pub struct ComposeArgs {
    #[command(flatten)]
    pub mixer: MixerArgs,
    #[arg(long, default_value_t = 100)]
    pub depth: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fail when the final product deviation exceeds this.
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn compose(args: &ComposeArgs) -> Result<Pass> {
    let spec = args.mixer.to_spec()?;
    if args.depth == 0 {
        bail!("--depth must be positive");
    }
    let mut rng = seeded(args.seed);
    let chain = (0..args.depth)
        .map(|_| Ok(spec.build(&normals(&mut rng, spec.logit_count()))?.matrix))
        .collect::<Result<Vec<_>>>()?;
    let trace = compose_chain(&chain)?;
    emit(&trace.to_csv(), args.out.as_deref())?;
    let dev = trace.final_deviation();
    log::info!("final product deviation {dev:e}");
    Ok(args.tol.is_none_or(|t| dev <= t))
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    #[arg(long, default_value_t = 4)]
    pub n: usize,
    #[arg(long, default_value_t = 20)]
    pub iters: usize,
    /// Logit scales to try, in order.
    #[arg(long, value_delimiter = ',', default_values_t = [4.0, 8.0, 16.0])]
    pub scale: Vec<f64>,
    /// Sinkhorn residual that counts as a gap.
    #[arg(long, default_value_t = 1e-4)]
    pub threshold: f64,
    /// Seed for the TBP parameters.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Serialize)]
struct SinkhornSide {
    pattern: AdversarialPattern,
    scale: f64,
    logits: Matrix,
    row_residual: f64,
    col_residual: f64,
    iterations: usize,
}

#[derive(Serialize)]
struct TbpSide {
    seed: u64,
    generator: &'static str,
    residual: f64,
}

#[derive(Serialize)]
struct CompareReport {
    n: usize,
    iterations: usize,
    threshold: f64,
    exact_tol: f64,
    sinkhorn: Option<SinkhornSide>,
    tbp: TbpSide,
    pass: bool,
}

pub fn compare_sk(args: &CompareArgs) -> Result<Pass> {
    let gap = find_sinkhorn_gap(args.n, args.iters, &args.scale, args.threshold)?;
    let params = normals(
        &mut seeded(args.seed),
        ChartParams::expected_len(args.n, args.n),
    );
    let tbp = tbp_forward(
        &Margins::uniform(args.n),
        &ChartParams::new(params),
        &SquashSpec::sigmoid(),
    )?;
    let residual = tbp.max_margin_deviation();
    let pass = gap.is_some() && residual <= EXACT_TOL;
    let report = CompareReport {
        n: args.n,
        iterations: args.iters,
        threshold: args.threshold,
        exact_tol: EXACT_TOL,
        sinkhorn: gap.map(|g| SinkhornSide {
            pattern: g.pattern,
            scale: g.scale,
            logits: g.logits,
            row_residual: g.report.row_residual,
            col_residual: g.report.col_residual,
            iterations: g.report.iterations,
        }),
        tbp: TbpSide {
            seed: args.seed,
            generator: GENERATOR,
            residual,
        },
        pass,
    };
    print!("{}", pretty(&report));
    Ok(pass)
}

#[derive(Args, Debug)]
pub struct CountArgs {
    #[arg(long)]
    pub n: usize,
    /// Defaults to `--n`.
    #[arg(long)]
    pub m: Option<usize>,
}

pub fn count(args: &CountArgs) -> Result<Pass> {
    if args.n == 0 || args.m == Some(0) {
        bail!("sizes must be positive");
    }
    println!("{}", count_params(args.n, args.m.unwrap_or(args.n)));
    Ok(true)
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    pub mixer: MixerArgs,
    #[arg(long, default_value_t = 1024)]
    pub batch: usize,
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    /// Untimed reps run first.
    #[arg(long, default_value_t = 1)]
    pub warmup: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Serialize)]
struct BenchReport {
    kind: MixerKind,
    n: usize,
    batch: usize,
    reps: usize,
    warmup: usize,
    threads: usize,
    seconds: f64,
    matrices_per_sec: f64,
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let k: usize = v
            .parse()
            .with_context(|| format!("{THREADS_ENV}={v} is not a count"))?;
        if k == 0 {
            bail!("{THREADS_ENV} must be positive");
        }
        builder = builder.num_threads(k);
    }
    Ok(builder.build()?)
}

pub fn bench(args: &BenchArgs) -> Result<Pass> {
    let spec = args.mixer.to_spec()?;
    if args.batch == 0 || args.reps == 0 {
        bail!("--batch and --reps must be positive");
    }
    let mut rng = seeded(args.seed);
    let logits: Vec<Vec<f64>> = (0..args.batch)
        .map(|_| normals(&mut rng, spec.logit_count()))
        .collect();
    let pool = thread_pool()?;
    let run = || -> Result<()> {
        pool.install(|| logits.par_iter().try_for_each(|l| spec.build(l).map(drop)))?;
        Ok(())
    };
    for _ in 0..args.warmup {
        run()?;
    }
    let start = Instant::now();
    for _ in 0..args.reps {
        run()?;
    }
    let seconds = start.elapsed().as_secs_f64();
    let report = BenchReport {
        kind: spec.kind,
        n: spec.n,
        batch: args.batch,
        reps: args.reps,
        warmup: args.warmup,
        threads: pool.current_num_threads(),
        seconds,
        matrices_per_sec: (args.batch * args.reps) as f64 / seconds.max(f64::MIN_POSITIVE),
    };
    print!("{}", pretty(&report));
    Ok(true)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LogitSource {
    /// The mixer's initial logits as a dynamic bias.
    Init,
    /// Static standard-normal logits per layer.
    Random,
    /// Static single-entry logits at scale 8 (sinkhorn only).
    Adversarial,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SublayerArg {
    Zero,
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum NormArg {
    Rms,
    Identity,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub mixer: MixerArgs,
    /// Stream width.
    #[arg(long, default_value_t = 4)]
    pub c: usize,
    #[arg(long, default_value_t = 32)]
    pub depth: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "init")]
    pub logits: LogitSource,
    #[arg(long, value_enum, default_value = "zero")]
    pub sublayer: SublayerArg,
    #[arg(long, value_enum, default_value = "rms")]
    pub norm: NormArg,
    /// Fail when any layer's mixer deviation exceeds this.
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn sweep(args: &SweepArgs) -> Result<Pass> {
    let spec = args.mixer.to_spec()?;
    let (n, c) = (spec.n, args.c);
    if args.logits == LogitSource::Adversarial && spec.kind != MixerKind::Sinkhorn {
        bail!("adversarial logits apply only to sinkhorn");
    }
    let mut rng = seeded(args.seed);
    let x0 = Matrix::from_vec(n, c, normals(&mut rng, n * c))?;
    let layers: Vec<LayerWeights> = (0..args.depth)
        .map(|l| match args.logits {
            LogitSource::Init => LayerWeights::init(c, spec.clone(), l % n),
            LogitSource::Random => LayerWeights::with_static_logits(
                c,
                spec.clone(),
                normals(&mut rng, spec.logit_count()),
            ),
            LogitSource::Adversarial => LayerWeights::with_static_logits(
                c,
                spec.clone(),
                AdversarialPattern::SingleEntry.logits(n, 8.0).into_data(),
            ),
        })
        .collect();
    let trace = match (args.sublayer, args.norm) {
        (SublayerArg::Zero, NormArg::Rms) => {
            depth_sweep(&layers, &x0, &RmsNorm::default(), &ZeroSublayer)?
        }
        (SublayerArg::Zero, NormArg::Identity) => {
            depth_sweep(&layers, &x0, &IdentityNorm, &ZeroSublayer)?
        }
        (SublayerArg::Tanh, norm) => {
            let f = TanhAffine {
                weight: Matrix::from_vec(c, c, normals(&mut rng, c * c))?.map(|v| 0.5 * v),
                bias: normals(&mut rng, c),
            };
            match norm {
                NormArg::Rms => depth_sweep(&layers, &x0, &RmsNorm::default(), &f)?,
                NormArg::Identity => depth_sweep(&layers, &x0, &IdentityNorm, &f)?,
            }
        }
    };
    emit(&trace.to_csv(), args.out.as_deref())?;
    let worst = trace
        .rows
        .iter()
        .map(|r| r.ds_deviation)
        .fold(0.0, f64::max);
    Ok(args.tol.is_none_or(|t| worst <= t))
}
