//! `groundkit`: zero-shot phrase localization from the command line.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 unreadable or invalid bundle,
//! 3 unreadable image, 4 invalid flags.

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use groundkit::bundle::{load_bundle, save_bundle, validate_bundle, Arch, ExportManifest, WeightsBundle};
use groundkit::eval::{evaluate, evaluate_indexed, load_dataset, load_predictions, DatasetKind, EvalReport, LineError, Prediction};
use groundkit::features::{parse_slic_spec, PipelineConfig};
use groundkit::superpixel::{DEFAULT_COMPACTNESS, DEFAULT_ITERATIONS};
use groundkit::imageio::load_rgb;
use groundkit::parity::{check_parity, FixtureArchive, ParityReport};
use groundkit::pipeline::{Grounder, GroundingOptions, Timings};
use groundkit::rawio::write_raw;
use groundkit::score::{write_pgm16, ScoreMap};
use groundkit::search::{search, BoundingBox, HierarchicalParams, Lambda, SearchMethod, BRUTE_FORCE_LIMIT};
use groundkit::synthetic::{smooth_random_map, toy_bundle, ToyConfig};

const EXIT_RUNTIME: u8 = 1;
const EXIT_BUNDLE: u8 = 2;
const EXIT_IMAGE: u8 = 3;
const EXIT_FLAGS: u8 = 4;

/// An error tagged with the process exit code it maps to.
#[derive(Debug)]
struct Coded {
    code: u8,
    error: anyhow::Error,
}

impl fmt::Display for Coded {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

impl std::error::Error for Coded {}

fn coded(code: u8) -> impl FnOnce(anyhow::Error) -> anyhow::Error {
    move |error| Coded { code, error }.into()
}

fn flag_error(msg: impl fmt::Display) -> anyhow::Error {
    Coded {
        code: EXIT_FLAGS,
        error: anyhow!("{msg}"),
    }
    .into()
}

#[derive(Parser, Debug)]
#[command(name = "groundkit", version, about = "Zero-shot phrase localization with contrastive vision-language weights")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Predict the box for one phrase in one image.
    Ground(GroundArgs),
    /// Accuracy over a JSONL dataset.
    Eval(EvalArgs),
    /// Score map only, as a 16-bit PGM plus a raw float dump.
    Heatmap(HeatmapArgs),
    /// Time the box-search methods on random smooth maps.
    BenchSearch(BenchArgs),
    /// Check a bundle, optionally against its export manifest.
    Validate(ValidateArgs),
    /// Compare the engine against a reference fixture archive.
    Parity(ParityArgs),
    /// Write a small random-weight bundle for experiments.
    MakeToy(MakeToyArgs),
}

#[derive(Args, Debug, Clone)]
struct FeatureArgs {
    /// Architecture options: `stride=N` (1, 2 or 4), `dilate`, `no-dilate`.
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    arch_opts: Vec<String>,
    /// Superpixel counts: `start:stop:step`, a comma list, or one count.
    #[arg(long, default_value = "100:600:50")]
    slic: String,
    /// SLIC compactness.
    #[arg(long, default_value_t = DEFAULT_COMPACTNESS)]
    compactness: f32,
    /// SLIC k-means iterations.
    #[arg(long, default_value_t = DEFAULT_ITERATIONS)]
    slic_iters: usize,
    /// Score-map temperature; defaults to the bundle's.
    #[arg(long)]
    sigma: Option<f32>,
    /// Wrap the phrase as "A photo of a {phrase}." before encoding.
    #[arg(long)]
    template: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Clone)]
struct SearchArgs {
    /// Area penalty as a multiple of the score-map mean.
    #[arg(long, conflicts_with = "lambda")]
    lambda_rel: Option<f64>,
    /// Absolute area penalty per pixel.
    #[arg(long)]
    lambda: Option<f64>,
    /// brute, ess or hier.
    #[arg(long, default_value = "ess")]
    search: String,
    #[arg(long, default_value_t = HierarchicalParams::default().factor)]
    hier_factor: usize,
    #[arg(long, default_value_t = HierarchicalParams::default().levels)]
    levels: usize,
}

#[derive(Args, Debug)]
struct GroundArgs {
    #[arg(long, env = "GROUNDKIT_BUNDLE")]
    bundle: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    query: String,
    #[command(flatten)]
    features: FeatureArgs,
    #[command(flatten)]
    search: SearchArgs,
    /// Write the JSON result here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the score map (PGM, plus `.raw` beside it).
    #[arg(long)]
    heatmap: Option<PathBuf>,
    /// Leave timings out so repeated runs are byte-identical.
    #[arg(long)]
    no_timings: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// JSONL records with `image`, `phrase`, `box` and optional `split`.
    #[arg(long)]
    dataset: PathBuf,
    /// Required unless `--predictions` is given.
    #[arg(long, env = "GROUNDKIT_BUNDLE")]
    bundle: Option<PathBuf>,
    /// Precomputed predictions, one `{"box": [...], "score": s}` per record.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// IoU threshold; defaults by dataset kind (flickr 0.5, vg 0.3).
    #[arg(long)]
    thr: Option<f64>,
    /// flickr or vg; inferred from split tags when omitted.
    #[arg(long)]
    dataset_kind: Option<String>,
    #[command(flatten)]
    features: FeatureArgs,
    #[command(flatten)]
    search: SearchArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct HeatmapArgs {
    #[arg(long, env = "GROUNDKIT_BUNDLE")]
    bundle: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    query: String,
    #[command(flatten)]
    features: FeatureArgs,
    /// PGM output path.
    #[arg(long)]
    out: PathBuf,
    /// Raw dump path; defaults to the PGM path with a `.raw` extension.
    #[arg(long)]
    raw: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, default_value_t = 256)]
    size: usize,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Comma list of methods.
    #[arg(long, default_value = "brute,ess,hier", value_delimiter = ',')]
    methods: Vec<String>,
    #[arg(long, default_value_t = 1.0)]
    lambda_rel: f64,
    #[arg(long, default_value_t = HierarchicalParams::default().factor)]
    hier_factor: usize,
    #[arg(long, default_value_t = HierarchicalParams::default().levels)]
    levels: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Print JSON instead of a table.
    #[arg(long)]
    json: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ParityArgs {
    #[arg(long)]
    bundle: PathBuf,
    /// Fixture directory containing `index.json`.
    #[arg(long)]
    fixtures: PathBuf,
}

#[derive(Args, Debug)]
struct MakeToyArgs {
    /// vit or resnet.
    #[arg(long, default_value = "vit")]
    arch: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also write an export manifest here.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

fn pipeline_config(arch: Arch, f: &FeatureArgs) -> anyhow::Result<PipelineConfig> {
    let mut cfg = PipelineConfig::new(arch);
    cfg.seed = f.seed;
    cfg.slic_counts = parse_slic_spec(&f.slic).map_err(flag_error)?;
    cfg.compactness = f.compactness;
    cfg.slic_iterations = f.slic_iters;
    for opt in &f.arch_opts {
        match opt.trim() {
            "dilate" => cfg.dilation_enabled = true,
            "no-dilate" => cfg.dilation_enabled = false,
            o if o.starts_with("stride=") => {
                cfg.stride_divisor = o["stride=".len()..]
                    .parse()
                    .map_err(|_| flag_error(format!("bad arch option {o:?}")))?;
            }
            o => return Err(flag_error(format!("unknown arch option {o:?}; expected stride=N, dilate or no-dilate"))),
        }
    }
    cfg.validate().map_err(flag_error)?;
    Ok(cfg)
}

fn grounding_options(arch: Arch, f: &FeatureArgs, s: &SearchArgs) -> anyhow::Result<GroundingOptions> {
    let mut opts = GroundingOptions::new(pipeline_config(arch, f)?);
    if let Some(sigma) = f.sigma {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(flag_error(format!("--sigma must be positive, got {sigma}")));
        }
        opts.sigma = Some(sigma);
    }
    opts.template = f.template;
    opts.lambda = match (s.lambda, s.lambda_rel) {
        (Some(v), _) => Lambda::Absolute(v),
        (None, Some(r)) => Lambda::Relative(r),
        (None, None) => Lambda::default(),
    };
    let (Lambda::Absolute(v) | Lambda::Relative(v)) = opts.lambda;
    if !(v >= 0.0 && v.is_finite()) {
        return Err(flag_error(format!("lambda must be finite and nonnegative, got {v}")));
    }
    opts.method = s.search.parse().map_err(flag_error)?;
    if s.hier_factor == 0 {
        return Err(flag_error("--hier-factor must be at least 1"));
    }
    opts.hier = HierarchicalParams {
        factor: s.hier_factor,
        levels: s.levels,
    };
    Ok(opts)
}

fn open_bundle(path: &Path) -> anyhow::Result<Grounder> {
    let bundle = load_bundle(path)
        .with_context(|| format!("loading bundle {}", path.display()))
        .map_err(coded(EXIT_BUNDLE))?;
    Grounder::from_bundle(bundle)
        .with_context(|| format!("building models from {}", path.display()))
        .map_err(coded(EXIT_BUNDLE))
}

fn write_output(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => std::fs::write(p, format!("{text}\n")).with_context(|| format!("writing {}", p.display())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn raw_path_for(pgm: &Path) -> PathBuf {
    pgm.with_extension("raw")
}

fn write_heatmap(map: &ScoreMap, pgm: &Path, raw: &Path) -> anyhow::Result<()> {
    write_pgm16(pgm, map).with_context(|| format!("writing {}", pgm.display()))?;
    write_raw(raw, &map.to_raw()).with_context(|| format!("writing {}", raw.display()))?;
    Ok(())
}

#[derive(Serialize)]
struct GroundOutput {
    #[serde(rename = "box")]
    bbox: BoundingBox,
    map_box: BoundingBox,
    score: f64,
    lambda: f64,
    method: SearchMethod,
    evaluated: u64,
    image_size: [usize; 2],
    query: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    timings: Option<Timings>,
}

fn cmd_ground(a: GroundArgs) -> anyhow::Result<()> {
    let g = open_bundle(&a.bundle)?;
    let opts = grounding_options(g.bundle().arch, &a.features, &a.search)?;
    let img = load_rgb(&a.image).map_err(|e| coded(EXIT_IMAGE)(e.into()))?;
    let prepared = g.prepare(&img).map_err(|e| coded(EXIT_IMAGE)(e.into()))?;
    let (found, map) = g.ground_with_map(&prepared, &a.query, &opts)?;
    if let Some(pgm) = &a.heatmap {
        write_heatmap(&map.resized(prepared.orig_h, prepared.orig_w)?, pgm, &raw_path_for(pgm))?;
    }
    let out = GroundOutput {
        bbox: found.bbox,
        map_box: found.map_box,
        score: found.score,
        lambda: found.lambda,
        method: found.method,
        evaluated: found.evaluated,
        image_size: [prepared.orig_h, prepared.orig_w],
        query: a.query,
        timings: (!a.no_timings).then_some(found.timings),
    };
    write_output(a.out.as_deref(), &serde_json::to_string_pretty(&out)?)
}

#[derive(Serialize)]
struct EvalOutput {
    #[serde(flatten)]
    report: EvalReport,
    malformed: Vec<LineError>,
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    let ds = load_dataset(&a.dataset).map_err(|e| coded(EXIT_FLAGS)(e.into()))?;
    for e in &ds.errors {
        eprintln!("{}:{}: skipped malformed record: {}", a.dataset.display(), e.line, e.message);
    }
    let kind = match &a.dataset_kind {
        Some(k) => Some(k.parse::<DatasetKind>().map_err(flag_error)?),
        None => DatasetKind::infer(&ds.records),
    };
    let thr = a.thr.unwrap_or_else(|| kind.unwrap_or(DatasetKind::Flickr).default_threshold());
    if !(thr > 0.0 && thr < 1.0) {
        return Err(flag_error(format!("--thr must lie in (0, 1), got {thr}")));
    }
    let report = if let Some(pred_path) = &a.predictions {
        let preds = load_predictions(pred_path).map_err(|e| coded(EXIT_FLAGS)(e.into()))?;
        if preds.len() != ds.records.len() {
            return Err(flag_error(format!(
                "{} predictions for {} records",
                preds.len(),
                ds.records.len()
            )));
        }
        evaluate_indexed(&ds.records, |i, _| Ok(preds[i].clone()), thr)?
    } else {
        let Some(bundle) = &a.bundle else {
            return Err(flag_error("eval needs --bundle or --predictions"));
        };
        let g = open_bundle(bundle)?;
        let opts = grounding_options(g.bundle().arch, &a.features, &a.search)?;
        evaluate(
            &ds.records,
            |r| {
                let img = load_rgb(&r.image_path)?;
                r.gt_box.check_within(img.height() as usize, img.width() as usize)?;
                let prepared = g.prepare(&img)?;
                let found = g.ground(&prepared, &r.phrase, &opts)?;
                Ok(Prediction {
                    bbox: found.bbox,
                    score: Some(found.score),
                })
            },
            thr,
        )?
    };
    eprintln!(
        "accuracy {:.4} ({} of {} correct at IoU > {}, {} errors)",
        report.accuracy, report.correct, report.evaluated, report.threshold, report.errors
    );
    let out = EvalOutput {
        report,
        malformed: ds.errors,
    };
    write_output(a.out.as_deref(), &serde_json::to_string_pretty(&out)?)
}

fn cmd_heatmap(a: HeatmapArgs) -> anyhow::Result<()> {
    let g = open_bundle(&a.bundle)?;
    let search_defaults = SearchArgs {
        lambda_rel: None,
        lambda: None,
        search: "ess".into(),
        hier_factor: HierarchicalParams::default().factor,
        levels: HierarchicalParams::default().levels,
    };
    let opts = grounding_options(g.bundle().arch, &a.features, &search_defaults)?;
    let img = load_rgb(&a.image).map_err(|e| coded(EXIT_IMAGE)(e.into()))?;
    let prepared = g.prepare(&img).map_err(|e| coded(EXIT_IMAGE)(e.into()))?;
    let map = g.heatmap(&prepared, &a.query, &opts)?;
    let raw = a.raw.clone().unwrap_or_else(|| raw_path_for(&a.out));
    write_heatmap(&map, &a.out, &raw)?;
    let (lo, hi) = map.min_max();
    eprintln!(
        "wrote {}x{} heatmap to {} and {} (min {lo:.6e}, max {hi:.6e})",
        map.width(),
        map.height(),
        a.out.display(),
        raw.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct BenchRow {
    method: SearchMethod,
    mean_ms: Option<f64>,
    std_ms: Option<f64>,
    trials: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    skipped: Option<String>,
}

#[derive(Serialize)]
struct BenchOutput {
    size: usize,
    trials: usize,
    lambda_rel: f64,
    rows: Vec<BenchRow>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn cmd_bench(a: BenchArgs) -> anyhow::Result<()> {
    if a.size == 0 || a.trials == 0 {
        return Err(flag_error("--size and --trials must be positive"));
    }
    if a.hier_factor == 0 {
        return Err(flag_error("--hier-factor must be at least 1"));
    }
    let methods = a
        .methods
        .iter()
        .map(|m| m.parse::<SearchMethod>().map_err(flag_error))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let hier = HierarchicalParams {
        factor: a.hier_factor,
        levels: a.levels,
    };
    let maps = (0..a.trials)
        .map(|t| ScoreMap::from_values(a.size, a.size, smooth_random_map(a.size, a.size, 4, a.seed + t as u64)))
        .collect::<groundkit::Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for method in methods {
        if method == SearchMethod::Brute && a.size > BRUTE_FORCE_LIMIT {
            let notice = format!("map exceeds the {BRUTE_FORCE_LIMIT}x{BRUTE_FORCE_LIMIT} brute-force guard");
            eprintln!("brute: skipped ({notice})");
            rows.push(BenchRow {
                method,
                mean_ms: None,
                std_ms: None,
                trials: 0,
                skipped: Some(notice),
            });
            continue;
        }
        let mut times = Vec::with_capacity(maps.len());
        for map in &maps {
            let lambda = Lambda::Relative(a.lambda_rel).resolve(map)?;
            let t = Instant::now();
            search(map, lambda, method, hier)?;
            times.push(t.elapsed().as_secs_f64() * 1e3);
        }
        let (mean, std) = mean_std(&times);
        rows.push(BenchRow {
            method,
            mean_ms: Some(mean),
            std_ms: Some(std),
            trials: times.len(),
            skipped: None,
        });
    }
    let out = BenchOutput {
        size: a.size,
        trials: a.trials,
        lambda_rel: a.lambda_rel,
        rows,
    };
    let text = if a.json {
        serde_json::to_string_pretty(&out)?
    } else {
        let mut s = format!("{}x{} maps, {} trials, lambda {} x mean\n", a.size, a.size, a.trials, a.lambda_rel);
        s.push_str(&format!("{:<8} {:>12} {:>12}\n", "method", "mean (ms)", "std (ms)"));
        for r in &out.rows {
            match (r.mean_ms, r.std_ms) {
                (Some(m), Some(sd)) => s.push_str(&format!("{:<8} {:>12.4} {:>12.4}\n", r.method.to_string(), m, sd)),
                _ => s.push_str(&format!("{:<8} {:>12} {:>12}\n", r.method.to_string(), "skipped", "-")),
            }
        }
        s.trim_end().to_string()
    };
    write_output(a.out.as_deref(), &text)
}

fn cmd_validate(a: ValidateArgs) -> anyhow::Result<()> {
    let bytes = std::fs::read(&a.bundle)
        .with_context(|| format!("reading {}", a.bundle.display()))
        .map_err(coded(EXIT_BUNDLE))?;
    let bundle = WeightsBundle::from_bytes(&bytes).map_err(|e| coded(EXIT_BUNDLE)(e.into()))?;
    let mut violations = validate_bundle(&bundle).violations;
    if let Some(m) = &a.manifest {
        let manifest = ExportManifest::load(m)
            .with_context(|| format!("reading manifest {}", m.display()))
            .map_err(coded(EXIT_BUNDLE))?;
        violations.extend(manifest.check(&bundle).violations);
    }
    if violations.is_empty() {
        println!("ok: {} bundle with {} tensors", bundle.arch, bundle.tensors.len());
        Ok(())
    } else {
        for v in &violations {
            println!("violation: {v}");
        }
        Err(coded(EXIT_BUNDLE)(anyhow!("{} violation(s)", violations.len())))
    }
}

fn cmd_parity(a: ParityArgs) -> anyhow::Result<()> {
    let bundle = load_bundle(&a.bundle).map_err(|e| coded(EXIT_BUNDLE)(e.into()))?;
    let archive = FixtureArchive::load(&a.fixtures).with_context(|| format!("reading {}", a.fixtures.display()))?;
    let report: ParityReport = check_parity(&archive, &bundle)?;
    for r in &report.rows {
        println!("{} {:<40} cosine {:.6}", if r.pass { "PASS" } else { "FAIL" }, r.name, r.cosine);
    }
    if report.passed() {
        Ok(())
    } else {
        bail!("parity check failed")
    }
}

fn cmd_make_toy(a: MakeToyArgs) -> anyhow::Result<()> {
    let cfg = match a.arch.as_str() {
        "vit" => ToyConfig::vit(),
        "resnet" => ToyConfig::resnet(),
        other => return Err(flag_error(format!("unknown arch {other:?}; expected vit or resnet"))),
    }
    .with_seed(a.seed);
    let bundle = toy_bundle(&cfg);
    save_bundle(&bundle, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(m) = &a.manifest {
        let manifest = ExportManifest::for_bundle(&format!("toy-{}-{}", a.arch, a.seed), &bundle);
        std::fs::write(m, serde_json::to_string_pretty(&manifest)?)?;
    }
    Ok(())
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("GROUNDKIT_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| flag_error(format!("GROUNDKIT_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Ground(a) => cmd_ground(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Heatmap(a) => cmd_heatmap(a),
        Command::BenchSearch(a) => cmd_bench(a),
        Command::Validate(a) => cmd_validate(a),
        Command::Parity(a) => cmd_parity(a),
        Command::MakeToy(a) => cmd_make_toy(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_FLAGS),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.downcast_ref::<Coded>().map_or(EXIT_RUNTIME, |c| c.code);
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}
