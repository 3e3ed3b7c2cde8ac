use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use qrgmm::datagen::{
    csv_encode, csv_ingest, synth_generate, BadRowPolicy, FieldSchema, FmLocationScaleParams,
    FmParamConfig, RawValue, SchemaConfig,
};
use qrgmm::eval::{
    calibration, conditional_test, unconditional_test, write_summary_table, ModelSpec,
    ReplicationPlan,
};
use qrgmm::generator::{covariate_hash, write_samples_csv, ConditionalSampler, SampleMetadata};
use qrgmm::model::{AnyModel, QuantileModel};
use qrgmm::risk::{risk_curve, Estimator, GeneralizedLoss, RiskSpec};
use qrgmm_svc::config::{LogFormat, ServeOverrides};
use qrgmm_svc::metadata::{sidecar, RunMetadata};
use qrgmm_svc::{router, AppState, Registry, ServeConfig};
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(
    name = "qrgmm",
    version,
    about = "Quantile-regression generative models and credit-risk curves"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic sales dataset from a random FM location-scale model.
    Synth(SynthArgs),
    /// Validate a CSV against a schema and write the cleaned rows.
    Ingest(IngestArgs),
    /// Fit a quantile model and write its artifact.
    Fit(FitArgs),
    /// Draw samples for one covariate vector.
    Generate(GenerateArgs),
    /// Compute a risk curve for one covariate vector.
    Risk(RiskArgs),
    /// Evaluate a fitted model on held-out data.
    Eval(EvalArgs),
    /// Run the HTTP/JSON service.
    Serve(ServeArgs),
}

#[derive(Args, Serialize)]
struct SynthArgs {
    #[arg(long, default_value_t = 100)]
    categories: usize,
    #[arg(long, default_value_t = 300)]
    sellers: usize,
    #[arg(long, default_value_t = 10)]
    continuous: usize,
    #[arg(long, default_value_t = 15_000)]
    n: usize,
    /// Seed of the row draws.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Seed of the random model parameters.
    #[arg(long, default_value_t = 1)]
    param_seed: u64,
    /// Reuse ground-truth parameters written by an earlier run.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, short)]
    out: PathBuf,
}

/// Ground truth written by `synth`: enough to regenerate the data and to
/// run conditional tests.
#[derive(Serialize, Deserialize)]
struct Truth {
    schema: FieldSchema,
    params: FmLocationScaleParams,
}

#[derive(Args, Serialize)]
struct DataArgs {
    /// Schema TOML (response column, delimiter, fields).
    #[arg(long)]
    schema: PathBuf,
    #[arg(long, short)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "error")]
    bad_rows: BadRows,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
enum BadRows {
    Error,
    Skip,
}

impl From<BadRows> for BadRowPolicy {
    fn from(b: BadRows) -> Self {
        match b {
            BadRows::Error => BadRowPolicy::Error,
            BadRows::Skip => BadRowPolicy::Skip,
        }
    }
}

#[derive(Args, Serialize)]
struct IngestArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
enum EstimatorKind {
    Linear,
    Deepfm,
}

#[derive(Args, Serialize)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value = "linear")]
    estimator: EstimatorKind,
    /// TOML with solver or training settings for the chosen estimator.
    #[arg(long)]
    estimator_config: Option<PathBuf>,
    /// Grid size; defaults to round(sqrt(n)).
    #[arg(long)]
    m: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct Covariates {
    #[arg(long)]
    model: PathBuf,
    /// Covariate as `field=value`; repeat for every field.
    #[arg(long = "x", value_parser = parse_pair, required = true)]
    x: Vec<(String, String)>,
}

fn parse_pair(s: &str) -> std::result::Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected field=value, got {s:?}"))
}

impl Covariates {
    fn raw(&self) -> BTreeMap<String, RawValue> {
        self.x
            .iter()
            .map(|(k, v)| (k.clone(), RawValue::Text(v.clone())))
            .collect()
    }
}

#[derive(Args, Serialize)]
struct GenerateArgs {
    #[command(flatten)]
    covariates: Covariates,
    #[arg(long, short, default_value_t = 10_000)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[value(rename_all = "snake_case")]
#[serde(rename_all = "snake_case")]
enum LossName {
    DefaultProbability,
    ExpectedLoss,
    SquaredLoss,
}

impl LossName {
    fn loss(self) -> GeneralizedLoss {
        match self {
            LossName::DefaultProbability => GeneralizedLoss::default_probability(),
            LossName::ExpectedLoss => GeneralizedLoss::expected_loss(),
            LossName::SquaredLoss => GeneralizedLoss::squared_loss(),
        }
    }
}

#[derive(Args, Serialize)]
struct RiskArgs {
    #[command(flatten)]
    covariates: Covariates,
    /// Net revenue per unit sold.
    #[arg(long)]
    r: f64,
    /// Largest loan level; defaults to r times the generated 99th percentile.
    #[arg(long)]
    l_bar: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    l_min: f64,
    #[arg(long, default_value_t = 100)]
    points: usize,
    #[arg(long)]
    xi: Option<f64>,
    #[arg(long, value_enum)]
    loss: Option<LossName>,
    /// Monte Carlo draws; omitted means the closed form.
    #[arg(long)]
    mc: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Curve CSV.
    #[arg(long, short)]
    out: PathBuf,
    /// Also write the curve as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Held-out CSV with the model's columns and the response.
    #[arg(long)]
    test: PathBuf,
    #[arg(long, default_value = "sales")]
    response: String,
    #[arg(long, default_value = ",")]
    delimiter: char,
    #[arg(long, default_value_t = 10)]
    replications: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Ground truth from `synth`, for the conditional test.
    #[arg(long, requires = "x")]
    truth: Option<PathBuf>,
    /// Covariate of the conditional test as `field=value`.
    #[arg(long = "x", value_parser = parse_pair)]
    x: Vec<(String, String)>,
    #[arg(long, default_value_t = 10_000)]
    k: usize,
    /// Directory for the report files.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Serialize)]
struct ServeArgs {
    /// TOML config file; flags and environment variables override it.
    #[arg(long, env = "QRGMM_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, env = "QRGMM_BIND")]
    bind: Option<String>,
    #[arg(long, env = "QRGMM_REGISTRY")]
    registry: Option<PathBuf>,
    #[arg(long, env = "QRGMM_SYNC_MAX_ROWS")]
    sync_max_rows: Option<usize>,
    #[arg(long, env = "QRGMM_MAX_SAMPLES")]
    max_samples: Option<usize>,
    #[arg(long, env = "QRGMM_LOG_FORMAT")]
    log_format: Option<LogFormat>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 usage, 3 data, 4 fit failure, 5 internal.
fn exit_code(e: &anyhow::Error) -> u8 {
    use qrgmm::Error as E;
    for cause in e.chain() {
        if let Some(q) = cause.downcast_ref::<qrgmm::Error>() {
            return match q {
                E::Parameter(_) | E::Config(_) | E::Unsupported(_) => 2,
                E::Domain(_)
                | E::Schema(_)
                | E::UnseenLevel { .. }
                | E::Ingest { .. }
                | E::Csv(_)
                | E::Json(_)
                | E::Artifact(_)
                | E::Io(_) => 3,
                E::Fit(_) | E::Training { .. } => 4,
            };
        }
        if cause.downcast_ref::<Usage>().is_some() {
            return 2;
        }
    }
    5
}

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct Usage(String);

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Ingest(a) => ingest(a),
        Command::Fit(a) => fit(a),
        Command::Generate(a) => generate(a),
        Command::Risk(a) => risk(a),
        Command::Eval(a) => eval(a),
        Command::Serve(a) => serve(a),
    }
}

fn finish(mut meta: RunMetadata, outputs: &[&Path]) -> Result<()> {
    for p in outputs {
        meta.output(p)
            .with_context(|| format!("hashing {}", p.display()))?;
    }
    let path = sidecar(outputs[0]);
    meta.write(&path)
        .with_context(|| format!("writing {}", path.display()))
}

fn with_extension(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(ext);
    PathBuf::from(s)
}

fn synth(a: SynthArgs) -> Result<()> {
    let truth = match &a.truth {
        Some(p) => {
            let t: Truth = serde_json::from_slice(&std::fs::read(p).map_err(qrgmm::Error::from)?)
                .map_err(qrgmm::Error::from)?;
            t.params.check(&t.schema)?;
            t
        }
        None => {
            let schema = FieldSchema::sales_layout(a.categories, a.sellers, a.continuous)?;
            let params =
                FmLocationScaleParams::random(&schema, &FmParamConfig::default(), a.param_seed)?;
            Truth { schema, params }
        }
    };
    let data = synth_generate(&truth.params, &truth.schema, a.n, a.seed)?;
    data.save_csv(&a.out, b',', "sales")?;
    let schema_path = with_extension(&a.out, ".schema.toml");
    std::fs::write(
        &schema_path,
        SchemaConfig::from_schema(&truth.schema, "sales", b',').to_toml_string()?,
    )?;
    let truth_path = with_extension(&a.out, ".truth.json");
    std::fs::write(&truth_path, serde_json::to_vec(&truth)?)?;
    eprintln!("wrote {} rows to {}", data.n(), a.out.display());
    let meta = RunMetadata::new("synth")
        .seed("data", a.seed)
        .seed("params", a.param_seed)
        .config(&a);
    finish(meta, &[&a.out, &schema_path, &truth_path])
}

fn load_data(
    d: &DataArgs,
) -> Result<(
    qrgmm::datagen::Dataset,
    qrgmm::datagen::IngestReport,
    SchemaConfig,
)> {
    let config = SchemaConfig::load(&d.schema)
        .with_context(|| format!("reading schema {}", d.schema.display()))?;
    let (data, report) = csv_ingest(&d.input, &config, d.bad_rows.into())
        .with_context(|| format!("reading {}", d.input.display()))?;
    for r in &report.rejected {
        eprintln!("skipped row {} ({}): {}", r.row, r.column, r.message);
    }
    Ok((data, report, config))
}

fn ingest(a: IngestArgs) -> Result<()> {
    let (data, report, config) = load_data(&a.data)?;
    data.save_csv(&a.out, config.delimiter_byte()?, &config.response)?;
    let summary = serde_json::json!({
        "rows_read": report.rows_read,
        "rows_kept": data.n(),
        "rejected": report.rejected,
        "dataset_hash": data.content_hash(),
    });
    let meta =
        RunMetadata::new("ingest").config(serde_json::json!({ "args": &a, "report": &summary }));
    finish(meta, &[&a.out])?;
    emit(&summary)
}

fn fit(a: FitArgs) -> Result<()> {
    let (data, _, _) = load_data(&a.data)?;
    let spec = estimator_spec(a.estimator, a.estimator_config.as_deref())?;
    let model = qrgmm_svc::fit_model(&data, &spec, a.m, a.seed)?;
    let id = qrgmm::artifact::save(&model, &a.out)?;
    let meta = RunMetadata::new("fit")
        .seed("fit", a.seed)
        .config(serde_json::json!({ "args": &a, "estimator": spec }));
    finish(meta, &[&a.out])?;
    emit(&serde_json::json!({
        "model_id": id,
        "kind": model.kind(),
        "m": model.grid().m(),
        "n": data.n(),
        "dataset_hash": data.content_hash(),
        "fit": qrgmm_svc::fit_summary(&model),
    }))
}

/// Prints a JSON summary on stdout; a closed pipe is not an error.
fn emit(v: &serde_json::Value) -> Result<()> {
    use std::io::Write;
    let text = serde_json::to_string_pretty(v)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn estimator_spec(kind: EstimatorKind, config: Option<&Path>) -> Result<ModelSpec> {
    let text = match config {
        Some(p) => std::fs::read_to_string(p).map_err(qrgmm::Error::from)?,
        None => String::new(),
    };
    let bad = |e: toml::de::Error| qrgmm::Error::Config(format!("estimator config: {e}"));
    Ok(match kind {
        EstimatorKind::Linear => ModelSpec::LinearQr {
            solver: toml::from_str(&text).map_err(bad)?,
        },
        EstimatorKind::Deepfm => ModelSpec::DeepFm {
            config: toml::from_str(&text).map_err(bad)?,
        },
    })
}

fn load_model(path: &Path) -> Result<(AnyModel, String)> {
    let model =
        qrgmm::artifact::load(path).with_context(|| format!("loading model {}", path.display()))?;
    let id = qrgmm::artifact::model_id(&model)?;
    Ok((model, id))
}

fn generate(a: GenerateArgs) -> Result<()> {
    if a.k == 0 {
        return Err(Usage("k must be at least 1".into()).into());
    }
    let (model, id) = load_model(&a.covariates.model)?;
    let x = model.schema().encode_named(&a.covariates.raw())?;
    let sampler = ConditionalSampler::new(model);
    let samples = sampler.sample(&x, a.k, a.seed)?;
    let meta = SampleMetadata {
        model_id: id,
        x_hash: covariate_hash(&x),
        seed: a.seed,
        k: a.k,
        rng: "chacha8".into(),
    };
    let f = File::create(&a.out).map_err(qrgmm::Error::from)?;
    write_samples_csv(BufWriter::new(f), &meta, &samples)?;
    let run = RunMetadata::new("generate")
        .seed("samples", a.seed)
        .config(&a);
    finish(run, &[&a.out])
}

fn risk(a: RiskArgs) -> Result<()> {
    let (model, id) = load_model(&a.covariates.model)?;
    let x = model.schema().encode_named(&a.covariates.raw())?;
    let cdf = ConditionalSampler::new(model).curve(&x)?;
    let mut spec = match a.l_bar {
        Some(l_bar) => RiskSpec::uniform(a.r, a.l_min, l_bar, a.points)?,
        None => RiskSpec::auto(&cdf, a.r, a.l_min, a.points)?,
    };
    if let Some(xi) = a.xi {
        spec = spec.with_xi(xi)?;
    }
    let estimator = match a.mc {
        Some(k) => Estimator::MonteCarlo { k, seed: a.seed },
        None => Estimator::ClosedForm,
    };
    let loss = a.loss.map(LossName::loss);
    let curve = risk_curve(&cdf, &spec, estimator, loss.as_ref())?;
    let f = File::create(&a.out).map_err(qrgmm::Error::from)?;
    curve.write_csv(BufWriter::new(f))?;
    let mut outputs = vec![a.out.as_path()];
    if let Some(j) = &a.json {
        let body = serde_json::json!({
            "model_id": id,
            "x_hash": covariate_hash(&x),
            "estimator": estimator.to_string(),
            "curve": curve,
        });
        std::fs::write(j, serde_json::to_vec_pretty(&body)?).map_err(qrgmm::Error::from)?;
        outputs.push(j);
    }
    eprintln!(
        "model {id}, {} loan levels up to {}",
        curve.len(),
        spec.l_bar
    );
    let meta = RunMetadata::new("risk").seed("mc", a.seed).config(&a);
    finish(meta, &outputs)
}

fn eval(a: EvalArgs) -> Result<()> {
    let (model, id) = load_model(&a.model)?;
    if !a.delimiter.is_ascii() {
        return Err(Usage(format!(
            "delimiter must be one ASCII character, got {:?}",
            a.delimiter
        ))
        .into());
    }
    let test = csv_encode(&a.test, model.schema(), &a.response, a.delimiter as u8)
        .with_context(|| format!("reading {}", a.test.display()))?;
    std::fs::create_dir_all(&a.out_dir).map_err(qrgmm::Error::from)?;
    let plan = ReplicationPlan {
        replications: a.replications,
        base_seed: a.seed,
        ..Default::default()
    };

    let calib_path = a.out_dir.join("calibration.csv");
    let tau_hat = calibration(&model, &test)?;
    let mut w = csv::Writer::from_path(&calib_path).context("writing calibration")?;
    w.write_record(["tau", "tau_hat"])?;
    for (tau, th) in model.grid().levels().iter().zip(&tau_hat) {
        w.write_record([tau.to_string(), th.to_string()])?;
    }
    w.flush()?;

    let unc = unconditional_test(&model, &test, &plan)?;
    let unc_path = a.out_dir.join("unconditional.csv");
    unc.write_rows_csv(File::create(&unc_path).map_err(qrgmm::Error::from)?)?;
    let mut outputs = vec![a.out_dir.join("summary.csv"), calib_path, unc_path];

    let cond = match &a.truth {
        Some(p) => {
            let t: Truth = serde_json::from_slice(&std::fs::read(p).map_err(qrgmm::Error::from)?)
                .map_err(qrgmm::Error::from)?;
            if &t.schema != model.schema() {
                return Err(qrgmm::Error::Schema("truth and model schemas differ".into()).into());
            }
            let raw =
                a.x.iter()
                    .map(|(k, v)| (k.clone(), RawValue::Text(v.clone())))
                    .collect();
            let x = model.schema().encode_named(&raw)?;
            let c = conditional_test(&model, Some(&t.params), &x, &plan, a.k)?;
            let path = a.out_dir.join("conditional.csv");
            c.write_rows_csv(File::create(&path).map_err(qrgmm::Error::from)?)?;
            outputs.push(path);
            Some(c)
        }
        None => None,
    };
    let method = match model.kind() {
        qrgmm::model::ModelKind::LinearQr => "qrgmm-linear",
        qrgmm::model::ModelKind::DeepFm => "qrgmm-deepfm",
    };
    write_summary_table(
        File::create(&outputs[0]).map_err(qrgmm::Error::from)?,
        method,
        &unc,
        cond.as_ref(),
    )?;
    let u = &unc.aggregate;
    eprintln!(
        "model {id}: unconditional mean {:.4} vs {:.4}, wd {:.4}, ks {:.4}",
        u.generated_mean, u.reference_mean, u.wd, u.ks
    );
    let meta = RunMetadata::new("eval").seed("eval", a.seed).config(&a);
    let refs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    finish(meta, &refs)
}

fn serve(a: ServeArgs) -> Result<()> {
    let flags = ServeOverrides {
        bind: a.bind.clone(),
        registry: a.registry.clone(),
        sync_max_rows: a.sync_max_rows,
        max_samples: a.max_samples,
        log_format: a.log_format,
    };
    let mut layers = vec![flags];
    if let Some(p) = &a.config {
        layers.push(ServeOverrides::load(p)?);
    }
    let config = ServeConfig::resolve(&layers);
    init_tracing(config.log_format);
    let registry = Registry::open(&config.registry).context("opening the model registry")?;
    let meta_path = config.registry.join("serve.run.json");
    RunMetadata::new("serve")
        .config(&config)
        .write(&meta_path)
        .with_context(|| format!("writing {}", meta_path.display()))?;
    let rt = tokio::runtime::Runtime::new().context("starting the runtime")?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&config.bind)
            .await
            .map_err(|e| Usage(format!("cannot bind {}: {e}", config.bind)))?;
        tracing::info!(bind = %config.bind, registry = %config.registry.display(), "listening");
        let app = router(AppState::new(registry, config));
        axum::serve(listener, app)
            .with_graceful_shutdown(shutdown_signal())
            .await
            .context("server failed")
    })?;
    Ok(())
}

async fn shutdown_signal() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        if let Ok(mut term) = signal(SignalKind::terminate()) {
            tokio::select! {
                _ = tokio::signal::ctrl_c() => {}
                _ = term.recv() => {}
            }
            return;
        }
    }
    let _ = tokio::signal::ctrl_c().await;
}

fn init_tracing(format: LogFormat) {
    use tracing_subscriber::EnvFilter;
    let filter = EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info"));
    let builder = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr);
    let _ = match format {
        LogFormat::Text => builder.try_init(),
        LogFormat::Json => builder.json().try_init(),
    };
}
