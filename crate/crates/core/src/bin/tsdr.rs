use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use serde_json::json;

use tsdr::bench::{table1, table2, Table1Options, Table1Setting, Table2Setting};
use tsdr::eval::{c_impurity, impurity, mse, psnr, Psnr};
use tsdr::gamma_sup::{auto_phase_transition, gamma_sup, normalize, GammaSupConfig};
use tsdr::io::{
    encode_labels_csv, read_labels_csv, read_matrix_csv, read_model, read_stack, write_matrix_csv,
    write_model, write_stack, Dtype, Manifest, ModelFile, OutputRecord, Provenance, RunRecord,
    StackFormat,
};
use tsdr::sure::NoiseEstimator;
use tsdr::synth::{
    gen_hmpca_data, gen_pca_data, gen_template_classes, HmpcaSynthSpec, NoiseFamily, PcaSynthSpec,
    TemplateSynthSpec, RNG_ALGORITHM,
};
use tsdr::tsne::{tsne, TsneConfig};
use tsdr::{denoise, fit_2sdr, rank_selection_report, scores, Error, FitConfig, ImageStack};

/// Two-stage dimension reduction for stacks of noisy images.
#[derive(Parser, Debug)]
#[command(name = "tsdr", version, arg_required_else_help = true)]
struct Cli {
    /// Worker threads (default: all cores). Also read from TSDR_THREADS.
    #[arg(long, global = true, env = "TSDR_THREADS")]
    threads: Option<usize>,

    /// Where to write the run manifest (default: next to the main output).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic stack together with its noiseless truth.
    Synth(SynthArgs),
    /// Fit a 2SDR model with SURE and GIC rank selection.
    Fit(FitArgs),
    /// Write the full rank-selection report (SURE grid, GIC/AIC/BIC curves).
    Select(SelectArgs),
    /// Denoise a stack with a fitted model; optionally write its scores.
    Reconstruct(ReconstructArgs),
    /// γ-SUP clustering of a score matrix with phase-transition τ selection.
    Cluster(ClusterArgs),
    /// Exact t-SNE embedding of a score matrix.
    Embed(EmbedArgs),
    /// Reconstruction error of a model against a truth stack, or clustering purity.
    Metrics(MetricsArgs),
    /// Replication experiments.
    #[command(subcommand)]
    Bench(BenchCommand),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum SynthModel {
    Hmpca,
    Pca,
    Templates,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum FormatArg {
    Container,
    Mrc,
    Csv,
}

impl From<FormatArg> for StackFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Container => StackFormat::Container,
            FormatArg::Mrc => StackFormat::Mrc,
            FormatArg::Csv => StackFormat::Csv,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum DtypeArg {
    F32,
    F64,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum NoiseArg {
    Gaussian,
    T5,
}

impl From<NoiseArg> for NoiseFamily {
    fn from(n: NoiseArg) -> Self {
        match n {
            NoiseArg::Gaussian => NoiseFamily::Gaussian,
            NoiseArg::T5 => NoiseFamily::T5,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum EstimatorArg {
    Modes,
    Vectorized,
    Auto,
}

impl From<EstimatorArg> for NoiseEstimator {
    fn from(e: EstimatorArg) -> Self {
        match e {
            EstimatorArg::Modes => NoiseEstimator::Modes,
            EstimatorArg::Vectorized => NoiseEstimator::Vectorized,
            EstimatorArg::Auto => NoiseEstimator::Auto,
        }
    }
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, value_enum, default_value = "hmpca")]
    model: SynthModel,
    /// Noise variance (hmpca).
    #[arg(long, default_value_t = 1.1)]
    sigma2: f64,
    /// Noise level c (pca).
    #[arg(long, default_value_t = 4.0)]
    c: f64,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, value_enum, default_value = "gaussian")]
    noise: NoiseArg,
    #[arg(long, default_value_t = 50)]
    classes: usize,
    #[arg(long, default_value_t = 20)]
    per_class: usize,
    /// Signal-to-noise ratio (templates).
    #[arg(long, default_value_t = 0.1)]
    snr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    #[arg(long, value_enum, default_value = "f64")]
    dtype: DtypeArg,
}

#[derive(Args, Debug)]
struct InputArgs {
    /// Input stack.
    #[arg(long = "in")]
    input: PathBuf,
    /// Input format (default: from the extension).
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
}

impl InputArgs {
    fn read(&self) -> tsdr::Result<ImageStack> {
        read_stack(&self.input, stack_format(&self.input, self.format))
    }
}

#[derive(Args, Debug)]
struct FitOptions {
    /// Surrogate row rank for the SURE grid.
    #[arg(long)]
    p_u: Option<usize>,
    /// Surrogate column rank for the SURE grid.
    #[arg(long)]
    q_u: Option<usize>,
    /// Known noise variance; estimated when omitted.
    #[arg(long)]
    sigma2: Option<f64>,
    #[arg(long, value_enum, default_value = "modes")]
    noise_estimator: EstimatorArg,
    /// Largest stage-2 rank considered by GIC.
    #[arg(long)]
    r_max: Option<usize>,
    #[arg(long, default_value_t = 0.35)]
    surrogate_fraction: f64,
}

impl FitOptions {
    fn config(&self) -> FitConfig {
        FitConfig {
            p_u: self.p_u,
            q_u: self.q_u,
            surrogate_fraction: self.surrogate_fraction,
            sigma2: self.sigma2,
            noise: self.noise_estimator.into(),
            r_max: self.r_max,
            ..FitConfig::default()
        }
    }
}

#[derive(Args, Debug)]
struct FitArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    options: FitOptions,
    /// Model file to write.
    #[arg(long)]
    out: PathBuf,
    /// Also write the rank-selection report here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SelectArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    options: FitOptions,
    /// JSON report to write (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReconstructArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    input: InputArgs,
    /// Denoised stack to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    out_format: Option<FormatArg>,
    /// Also write the `n x r` score matrix as CSV.
    #[arg(long)]
    scores: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ClusterArgs {
    /// Score matrix: CSV, or a stack whose images are flattened into rows.
    #[arg(long = "in")]
    input: PathBuf,
    /// Labels CSV to write.
    #[arg(long)]
    out: PathBuf,
    /// Phase-transition table CSV to write.
    #[arg(long)]
    phase: Option<PathBuf>,
    /// Fixed τ; skips the phase-transition scan.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, default_value_t = 0.025)]
    s: f64,
    /// Number of τ values between the bracket bounds.
    #[arg(long, default_value_t = 30)]
    grid: usize,
    /// Clusters must be larger than this to count in the τ rule.
    #[arg(long, default_value_t = 10)]
    min_size: usize,
    /// Use the scores as given instead of centering and scaling them.
    #[arg(long)]
    no_normalize: bool,
}

#[derive(Args, Debug)]
struct EmbedArgs {
    /// Score matrix: CSV, or a stack whose images are flattened into rows.
    #[arg(long = "in")]
    input: PathBuf,
    /// Coordinates CSV to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2)]
    dims: usize,
    #[arg(long, default_value_t = 30.0)]
    perplexity: f64,
    #[arg(long, default_value_t = 200.0)]
    eta: f64,
    #[arg(long, default_value_t = 1000)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the KL trace as CSV.
    #[arg(long)]
    kl: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MetricsArgs {
    /// Model whose reconstruction is scored.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Noiseless reference stack.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Noisy input to reconstruct (default: the stack the model was fitted on).
    #[arg(long = "in")]
    input: Option<PathBuf>,
    /// Intensity range for PSNR (default: truth max - min).
    #[arg(long)]
    range: Option<f64>,
    /// True class labels CSV.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Predicted cluster labels CSV.
    #[arg(long)]
    pred: Option<PathBuf>,
    /// JSON to write (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum BenchCommand {
    /// Reconstruction MSE of PCA, MPCA and 2SDR.
    Table1(Table1Args),
    /// Rank-selection accuracy of SURE, GIC, AIC and BIC.
    Table2(Table2Args),
}

#[derive(Args, Debug)]
struct Table1Args {
    #[arg(long, value_enum, default_value = "hmpca")]
    setting: BenchSetting,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 1.1)]
    sigma2: f64,
    #[arg(long, default_value_t = 4.0)]
    c: f64,
    #[arg(long, value_enum, default_value = "gaussian")]
    noise: NoiseArg,
    #[arg(long, default_value_t = 100)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    p_u: usize,
    #[arg(long, default_value_t = 16)]
    q_u: usize,
    /// CSV to write (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum BenchSetting {
    Hmpca,
    Pca,
}

#[derive(Args, Debug)]
struct Table2Args {
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// Noise variances to run; repeat the flag for several.
    #[arg(long, num_args = 1.., default_values_t = vec![1.1, 5.6])]
    sigma2: Vec<f64>,
    #[arg(long, value_enum, default_value = "gaussian")]
    noise: NoiseArg,
    #[arg(long, default_value_t = 100)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    p_u: usize,
    #[arg(long, default_value_t = 16)]
    q_u: usize,
    /// CSV to write (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn stack_format(path: &Path, explicit: Option<FormatArg>) -> StackFormat {
    explicit
        .map(Into::into)
        .unwrap_or_else(|| StackFormat::from_path(path))
}

/// `dir/name.ext` with `tag` inserted before the extension.
fn sibling(path: &Path, tag: &str, ext: Option<&str>) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    let ext = ext.or_else(|| path.extension().and_then(|e| e.to_str()));
    let name = match ext {
        Some(e) => format!("{stem}.{tag}.{e}"),
        None => format!("{stem}.{tag}"),
    };
    path.with_file_name(name)
}

fn read_points(path: &Path) -> tsdr::Result<DMatrix<f64>> {
    match StackFormat::from_path(path) {
        StackFormat::Csv => read_matrix_csv(path),
        format => {
            let stack = read_stack(path, format)?;
            let (p, q) = stack.dims();
            let flat = stack.to_row_major();
            Ok(DMatrix::from_row_slice(stack.len(), p * q, &flat))
        }
    }
}

fn write_text(path: Option<&Path>, text: &str) -> tsdr::Result<()> {
    match path {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

struct Run {
    command: &'static str,
    seed: Option<u64>,
    spec: serde_json::Value,
    outputs: Vec<PathBuf>,
}

impl Run {
    fn new(command: &'static str, spec: serde_json::Value) -> Self {
        Self {
            command,
            seed: None,
            spec,
            outputs: Vec::new(),
        }
    }
}

fn finish(run: Run, manifest: Option<&Path>) -> tsdr::Result<()> {
    let target = match (manifest, run.outputs.first()) {
        (Some(m), _) => m.to_path_buf(),
        (None, Some(first)) => sibling(first, "manifest", Some("json")),
        (None, None) => return Ok(()),
    };
    let outputs = run
        .outputs
        .iter()
        .map(|p| OutputRecord::of(p))
        .collect::<tsdr::Result<Vec<_>>>()?;
    let record = RunRecord {
        tool: "tsdr".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: run.command.into(),
        argv: std::env::args().collect(),
        seed: run.seed,
        rng: RNG_ALGORITHM.into(),
        spec: run.spec,
        outputs,
    };
    Manifest::new(record)?.write(&target)
}

fn synth(args: &SynthArgs) -> tsdr::Result<Run> {
    let format = stack_format(&args.out, args.format);
    let dtype = match args.dtype {
        DtypeArg::F32 => Dtype::F32,
        DtypeArg::F64 => Dtype::F64,
    };
    let truth_path = sibling(&args.out, "truth", None);
    let sidecar = sibling(&args.out, "spec", Some("json"));
    let mut outputs = vec![args.out.clone(), truth_path.clone(), sidecar.clone()];
    let (stack, truth, spec) = match args.model {
        SynthModel::Hmpca => {
            let spec = HmpcaSynthSpec::standard(args.sigma2, args.n, args.noise.into(), args.seed);
            let data = gen_hmpca_data(&spec)?;
            let info = json!({"model": "hmpca", "spec": spec, "snr": spec.snr()});
            (data.stack, data.truth, info)
        }
        SynthModel::Pca => {
            let spec = PcaSynthSpec::standard(args.c, args.n, args.seed);
            let data = gen_pca_data(&spec)?;
            let info = json!({"model": "pca", "spec": spec, "snr": spec.snr()});
            (data.stack, data.truth, info)
        }
        SynthModel::Templates => {
            let spec = TemplateSynthSpec {
                classes: args.classes,
                per_class: args.per_class,
                snr: args.snr,
                seed: args.seed,
                ..TemplateSynthSpec::default()
            };
            let data = gen_template_classes(&spec)?;
            let labels_path = sibling(&args.out, "labels", Some("csv"));
            std::fs::write(&labels_path, encode_labels_csv(&data.labels))?;
            outputs.push(labels_path);
            let info =
                json!({"model": "templates", "spec": spec, "noise_variance": data.noise_variance});
            (data.stack, data.truth, info)
        }
    };
    write_stack(&stack, &args.out, format, Some(dtype))?;
    write_stack(&truth, &truth_path, format, Some(dtype))?;
    std::fs::write(&sidecar, serde_json::to_string_pretty(&spec)?)?;
    let mut run = Run::new("synth", spec);
    run.seed = Some(args.seed);
    run.outputs = outputs;
    Ok(run)
}

fn fit(args: &FitArgs) -> tsdr::Result<Run> {
    let stack = args.input.read()?;
    let config = args.options.config();
    let model = fit_2sdr(&stack, &config)?;
    for w in &model.warnings {
        eprintln!("warning: {w}");
    }
    let input =
        std::fs::canonicalize(&args.input.input).unwrap_or_else(|_| args.input.input.clone());
    let file = ModelFile {
        model,
        provenance: Provenance {
            input: Some(input.display().to_string()),
            config,
            version: env!("CARGO_PKG_VERSION").into(),
        },
    };
    write_model(&file, &args.out)?;
    let mut run = Run::new(
        "fit",
        json!({"config": config, "ranks": file.model.ranks()}),
    );
    run.outputs.push(args.out.clone());
    if let Some(path) = &args.report {
        let report = rank_selection_report(&file.model, stack.len())?;
        std::fs::write(path, serde_json::to_string_pretty(&report)?)?;
        run.outputs.push(path.clone());
    }
    let (p0, q0, r) = file.model.ranks();
    eprintln!("ranks p0={p0} q0={q0} r={r}");
    Ok(run)
}

fn select(args: &SelectArgs) -> tsdr::Result<Run> {
    let stack = args.input.read()?;
    let config = args.options.config();
    let model = fit_2sdr(&stack, &config)?;
    let report = rank_selection_report(&model, stack.len())?;
    write_text(
        args.out.as_deref(),
        &(serde_json::to_string_pretty(&report)? + "\n"),
    )?;
    let mut run = Run::new("select", json!({"config": config, "ranks": report.ranks}));
    run.outputs.extend(args.out.clone());
    Ok(run)
}

fn reconstruct(args: &ReconstructArgs) -> tsdr::Result<Run> {
    let file = read_model(&args.model)?;
    let stack = args.input.read()?;
    let rec = denoise(&file.model, &stack)?;
    write_stack(
        &rec,
        &args.out,
        stack_format(&args.out, args.out_format),
        None,
    )?;
    let mut run = Run::new("reconstruct", json!({"ranks": file.model.ranks()}));
    run.outputs.push(args.out.clone());
    if let Some(path) = &args.scores {
        let z = scores(&file.model, &stack)?;
        let names: Vec<String> = (1..=z.ncols()).map(|k| format!("score{k}")).collect();
        let header: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
        write_matrix_csv(&z, path, Some(&header))?;
        run.outputs.push(path.clone());
    }
    Ok(run)
}

fn cluster(args: &ClusterArgs) -> tsdr::Result<Run> {
    let raw = read_points(&args.input)?;
    let points = if args.no_normalize {
        raw
    } else {
        normalize(&raw)?
    };
    let mut outputs = vec![args.out.clone()];
    let (tau, phase) = match args.tau {
        Some(t) => (t, None),
        None => {
            let scan = auto_phase_transition(&points, args.s, args.grid, args.min_size)?;
            (scan.recommended_tau, Some(scan))
        }
    };
    let result = gamma_sup(
        &points,
        &GammaSupConfig {
            s: args.s,
            ..GammaSupConfig::new(tau)
        },
    )?;
    std::fs::write(&args.out, encode_labels_csv(&result.labels))?;
    if let (Some(path), Some(scan)) = (&args.phase, &phase) {
        std::fs::write(path, scan.to_csv())?;
        outputs.push(path.clone());
    }
    eprintln!("tau={tau} clusters={}", result.n_clusters());
    let mut run = Run::new(
        "cluster",
        json!({"tau": tau, "s": args.s, "grid": args.grid, "min_size": args.min_size,
               "normalized": !args.no_normalize, "clusters": result.n_clusters(),
               "converged": result.converged}),
    );
    run.outputs = outputs;
    Ok(run)
}

fn embed(args: &EmbedArgs) -> tsdr::Result<Run> {
    let points = read_points(&args.input)?;
    let config = TsneConfig {
        out_dim: args.dims,
        perplexity: args.perplexity,
        eta: args.eta,
        iters: args.iters,
        seed: args.seed,
        ..TsneConfig::default()
    };
    let res = tsne(&points, &config)?;
    let names: Vec<String> = (1..=args.dims).map(|k| format!("y{k}")).collect();
    let header: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    write_matrix_csv(&res.embedding, &args.out, Some(&header))?;
    let mut run = Run::new("embed", serde_json::to_value(&config)?);
    run.seed = Some(args.seed);
    run.outputs.push(args.out.clone());
    if let Some(path) = &args.kl {
        let mut text = String::from("iteration,kl\n");
        for (t, v) in &res.kl_trace {
            text.push_str(&format!("{t},{v}\n"));
        }
        std::fs::write(path, text)?;
        run.outputs.push(path.clone());
    }
    Ok(run)
}

fn metrics(args: &MetricsArgs) -> tsdr::Result<Run> {
    let mut out = serde_json::Map::new();
    match (&args.model, &args.truth) {
        (Some(model_path), Some(truth_path)) => {
            let file = read_model(model_path)?;
            let input = match (&args.input, &file.provenance.input) {
                (Some(p), _) => p.clone(),
                (None, Some(p)) => PathBuf::from(p),
                (None, None) => {
                    return Err(Error::InvalidInput(
                        "no --in given and the model records no input".into(),
                    ))
                }
            };
            let stack = read_stack(&input, StackFormat::from_path(&input))?;
            let truth = read_stack(truth_path, StackFormat::from_path(truth_path))?;
            let rec = denoise(&file.model, &stack)?;
            out.insert("mse".into(), json!(mse(&rec, &truth)?));
            let db = match psnr(&truth, &rec, args.range)? {
                Psnr::Db(v) => json!(v),
                Psnr::Perfect => json!("inf"),
            };
            out.insert("psnr_db".into(), db);
            out.insert("ranks".into(), json!(file.model.ranks()));
            out.insert("input".into(), json!(input.display().to_string()));
        }
        (None, None) => {}
        _ => {
            return Err(Error::InvalidInput(
                "--model and --truth go together".into(),
            ))
        }
    }
    match (&args.labels, &args.pred) {
        (Some(l), Some(p)) => {
            let truth = read_labels_csv(l)?;
            let pred = read_labels_csv(p)?;
            out.insert("impurity".into(), json!(impurity(&truth, &pred)?));
            out.insert("c_impurity".into(), json!(c_impurity(&truth, &pred)?));
        }
        (None, None) => {}
        _ => {
            return Err(Error::InvalidInput(
                "--labels and --pred go together".into(),
            ))
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidInput(
            "nothing to measure: give --model with --truth, or --labels with --pred".into(),
        ));
    }
    let value = serde_json::Value::Object(out);
    write_text(
        args.out.as_deref(),
        &(serde_json::to_string_pretty(&value)? + "\n"),
    )?;
    let mut run = Run::new("metrics", value);
    run.outputs.extend(args.out.clone());
    Ok(run)
}

fn bench_table1(args: &Table1Args) -> tsdr::Result<Run> {
    let setting = match args.setting {
        BenchSetting::Hmpca => Table1Setting::Hmpca {
            sigma2: args.sigma2,
            n: args.n,
            noise: args.noise.into(),
        },
        BenchSetting::Pca => Table1Setting::Pca {
            c: args.c,
            n: args.n,
        },
    };
    let opts = Table1Options {
        p_u: args.p_u,
        q_u: args.q_u,
        ..Table1Options::default()
    };
    let table = table1(setting, args.reps, args.seed, &opts)?;
    for (i, msg) in &table.failures {
        eprintln!("replicate {i} failed: {msg}");
    }
    let text = format!(
        "{}\n{}",
        tsdr::eval::ReplicateTable::csv_header(),
        table.csv_rows()
    );
    write_text(args.out.as_deref(), &text)?;
    let mut run = Run::new(
        "bench table1",
        json!({"setting": setting, "options": opts, "reps": args.reps}),
    );
    run.seed = Some(args.seed);
    run.outputs.extend(args.out.clone());
    Ok(run)
}

fn bench_table2(args: &Table2Args) -> tsdr::Result<Run> {
    let mut text = String::from("noise,sigma2,n,reps,failures,SURE,GIC,AIC,BIC\n");
    for &sigma2 in &args.sigma2 {
        let setting = Table2Setting {
            sigma2,
            n: args.n,
            noise: args.noise.into(),
        };
        let table = table2(setting, args.reps, args.seed, args.p_u, args.q_u)?;
        for (i, msg) in &table.failures {
            eprintln!("replicate {i} failed: {msg}");
        }
        let acc = |m: &str| table.summary(m).map(|s| s.mean).unwrap_or(f64::NAN);
        let reps = table.values.values().next().map_or(0, |v| v.len());
        text.push_str(&format!(
            "{:?},{},{},{},{},{},{},{},{}\n",
            setting.noise,
            sigma2,
            args.n,
            reps,
            table.failures.len(),
            acc("SURE"),
            acc("GIC"),
            acc("AIC"),
            acc("BIC")
        ));
    }
    write_text(args.out.as_deref(), &text)?;
    let mut run = Run::new(
        "bench table2",
        json!({"n": args.n, "sigma2": args.sigma2, "noise": NoiseFamily::from(args.noise),
               "reps": args.reps, "p_u": args.p_u, "q_u": args.q_u}),
    );
    run.seed = Some(args.seed);
    run.outputs.extend(args.out.clone());
    Ok(run)
}

fn dispatch(cli: &Cli) -> tsdr::Result<()> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(Error::InvalidInput("--threads must be positive".into()));
        }
        // a second initialization attempt is harmless, so the error is ignored
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global();
    }
    let run = match &cli.command {
        Command::Synth(a) => synth(a)?,
        Command::Fit(a) => fit(a)?,
        Command::Select(a) => select(a)?,
        Command::Reconstruct(a) => reconstruct(a)?,
        Command::Cluster(a) => cluster(a)?,
        Command::Embed(a) => embed(a)?,
        Command::Metrics(a) => metrics(a)?,
        Command::Bench(BenchCommand::Table1(a)) => bench_table1(a)?,
        Command::Bench(BenchCommand::Table2(a)) => bench_table2(a)?,
    };
    finish(run, cli.manifest.as_deref())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}
