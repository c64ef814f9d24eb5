//! `qualcode`: embedding-based deductive coding from the command line.

mod table;

use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use qualcode_core::adapter::AdapterHyperparams;
use qualcode_core::audit::{self, CodeSource};
use qualcode_core::classifier::{ClassifyMode, DEFAULT_TEMPERATURE};
use qualcode_core::corpus::{Codebook, ImportMapping, Project, SourceFormat};
use qualcode_core::embedder::{InstructionPreset, ProviderConfig};
use qualcode_core::engine::{self, render_json, EvaluateOptions, ResampleSpec};
use qualcode_core::projection::{ProjectionMethod, TsneParams};
use qualcode_core::synthetic::{self, SyntheticSpec};
use qualcode_core::{Error, ErrorKind, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "qualcode", version, about = "Deductive coding of survey responses with text embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Default, ValueEnum)]
enum Output {
    #[default]
    Json,
    Table,
}

#[derive(Args)]
struct Common {
    /// Project directory.
    #[arg(long)]
    project: PathBuf,
    /// Output format.
    #[arg(long, value_enum, default_value_t = Output::Json)]
    format: Output,
}

#[derive(Subcommand)]
enum Command {
    /// Import responses from CSV or JSON lines into a project.
    Import(ImportArgs),
    /// Embed every response, reusing cached vectors.
    Embed(EmbedArgs),
    /// Manage the codebook.
    #[command(subcommand)]
    Codebook(CodebookCommand),
    /// Assign every response to its nearest category centroid.
    Classify(ClassifyArgs),
    /// Score assignments against human codes and print a metrics report.
    Evaluate(EvaluateArgs),
    /// Flag close response pairs with different codes, or apply resolutions.
    Audit(AuditArgs),
    /// Train or toggle the linear adapter.
    #[command(subcommand)]
    Adapter(AdapterCommand),
    /// Compute a 2-D projection of the embeddings.
    Project(ProjectArgs),
    /// Export assignments, responses, audit or projection data.
    Export(ExportArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
    /// Write the bundled synthetic corpus and its configuration files.
    Synthetic(SyntheticArgs),
}

#[derive(Args)]
struct ImportArgs {
    #[arg(long)]
    input: PathBuf,
    /// Source format; inferred from the file extension when omitted.
    #[arg(long, value_parser = parse_source)]
    format: Option<SourceFormat>,
    #[arg(long)]
    project: PathBuf,
    /// Column holding response ids; `-` synthesizes ids from row numbers.
    #[arg(long, default_value = "id")]
    id_column: String,
    #[arg(long, default_value = "text")]
    text_column: String,
    /// Column holding human codes; `-` for none.
    #[arg(long, default_value = "code")]
    code_column: String,
}

#[derive(Args)]
struct EmbedArgs {
    #[command(flatten)]
    common: Common,
    /// Provider configuration (JSON).
    #[arg(long)]
    provider: PathBuf,
    #[arg(long, value_parser = parse_from_str::<InstructionPreset>)]
    instruction: Option<InstructionPreset>,
    /// Overrides the seed of a mock provider.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum CodebookCommand {
    /// Install categories and exemplar ids from a JSON file.
    Set {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        file: PathBuf,
    },
    /// Print the codebook.
    Show {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct ClassifyArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_parser = parse_from_str::<ClassifyMode>, default_value = "selective")]
    mode: ClassifyMode,
    #[arg(long, default_value_t = DEFAULT_TEMPERATURE)]
    temperature: f64,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    /// Resample exemplars, e.g. `k=3,runs=20,seed=42` (`k.L=5` per category).
    #[arg(long)]
    resample: Option<String>,
    /// Leave out responses human-coded with the residual category.
    #[arg(long)]
    drop_other: bool,
    /// Leave exemplar responses out of the scored set.
    #[arg(long)]
    exclude_exemplars: bool,
    /// Mode for resampling runs; defaults to the last classification's.
    #[arg(long, value_parser = parse_from_str::<ClassifyMode>)]
    mode: Option<ClassifyMode>,
    #[arg(long)]
    temperature: Option<f64>,
    /// Overrides the resampling seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
#[command(args_conflicts_with_subcommands = true)]
struct AuditArgs {
    #[command(subcommand)]
    action: Option<AuditCommand>,
    #[arg(long)]
    project: Option<PathBuf>,
    #[arg(long, default_value_t = audit::DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long, value_parser = parse_from_str::<CodeSource>, default_value = "human")]
    code_source: CodeSource,
    /// Also write the review sheet (CSV) here.
    #[arg(long)]
    review: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Output::Json)]
    format: Output,
}

#[derive(Subcommand)]
enum AuditCommand {
    /// Apply reviewer decisions from `response_id,old_code,new_code[,resolver,note]` CSV.
    Resolve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        file: PathBuf,
        /// Refuse to apply unless the project is at this revision.
        #[arg(long)]
        revision: Option<u64>,
    },
    /// Print flagged/resolved/outstanding counts.
    Summary {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Subcommand)]
enum AdapterCommand {
    /// Train on the codebook exemplars.
    Train {
        #[command(flatten)]
        common: Common,
        /// Hyperparameters (JSON); missing fields take defaults.
        #[arg(long)]
        hyperparams: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Use the adapter for classification right away.
        #[arg(long)]
        activate: bool,
    },
    /// Use the trained adapter for classification and projection.
    Apply {
        #[command(flatten)]
        common: Common,
        /// Switch back to base embeddings instead.
        #[arg(long)]
        off: bool,
    },
}

#[derive(Args)]
struct ProjectArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_parser = parse_from_str::<ProjectionMethod>)]
    method: ProjectionMethod,
    #[arg(long, default_value_t = 30.0)]
    perplexity: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    iterations: usize,
    /// Also write the points as CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    project: PathBuf,
    /// assignments, responses, audit or projection
    #[arg(long, default_value = "assignments")]
    data: String,
    #[arg(long, default_value = "csv")]
    format: String,
    /// Destination file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    #[arg(long)]
    store: PathBuf,
    /// Default provider configuration for embed requests.
    #[arg(long)]
    provider: Option<PathBuf>,
    /// Built UI bundle to serve at `/`.
    #[arg(long)]
    ui: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    workers: usize,
}

#[derive(Args)]
struct SyntheticArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = synthetic::DEFAULT_SEED)]
    seed: u64,
}

fn parse_from_str<T: std::str::FromStr<Err = Error>>(s: &str) -> std::result::Result<T, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_source(s: &str) -> std::result::Result<SourceFormat, String> {
    parse_from_str(s)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.display().to_string()),
        _ => Error::Io(e),
    })
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_slice(&read_file(path)?).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn load(dir: &Path) -> Result<Project> {
    Project::load(dir)
}

/// Load, apply, save when the revision moved.
fn mutate<T>(dir: &Path, create: bool, f: impl FnOnce(&mut Project, &Path) -> Result<T>) -> Result<(T, u64)> {
    let mut project = if create { engine::open_or_create(dir)? } else { load(dir)? };
    let before = project.revision;
    let out = f(&mut project, dir)?;
    if project.revision != before || create {
        project.save(dir)?;
    }
    Ok((out, project.revision))
}

#[derive(Serialize)]
struct Revised<T> {
    revision: u64,
    #[serde(flatten)]
    inner: T,
}

enum Rendered {
    Json(String),
    Text(String),
}

fn emit<T: Serialize>(value: &T, format: Output) -> Rendered {
    match format {
        Output::Json => Rendered::Json(render_json(value)),
        Output::Table => Rendered::Text(table::generic(&serde_json::to_value(value).expect("serializable"))),
    }
}

fn revised<T: Serialize>(inner: T, revision: u64, format: Output) -> Rendered {
    emit(&Revised { revision, inner }, format)
}

fn run(cli: Cli) -> Result<Rendered> {
    match cli.command {
        Command::Import(a) => {
            let format = match a.format {
                Some(f) => f,
                None => match a.input.extension().and_then(|e| e.to_str()) {
                    Some("csv") => SourceFormat::Csv,
                    Some("jsonl" | "ndjson") => SourceFormat::Jsonl,
                    _ => return Err(Error::Invalid("cannot infer the input format; pass --format".into())),
                },
            };
            let dash = |c: String| Some(c).filter(|c| c != "-");
            let mapping = ImportMapping {
                id_column: dash(a.id_column),
                text_column: a.text_column,
                code_column: dash(a.code_column),
                metadata_columns: None,
            };
            let bytes = read_file(&a.input)?;
            let (n, rev) = mutate(&a.project, true, |p, _| engine::import_into(p, &bytes[..], format, &mapping))?;
            Ok(revised(json!({"imported": n}), rev, Output::Json))
        }
        Command::Embed(a) => {
            let mut provider: ProviderConfig = read_json(&a.provider)?;
            if let Some(preset) = a.instruction {
                provider = provider.with_instruction(preset);
            }
            if let Some(seed) = a.seed {
                provider.seed = seed;
            }
            let (summary, rev) = mutate(&a.common.project, false, |p, dir| engine::embed_project(p, dir, provider))?;
            Ok(revised(summary, rev, a.common.format))
        }
        Command::Codebook(CodebookCommand::Set { common, file }) => {
            let codebook: Codebook = read_json(&file)?;
            let (cb, rev) = mutate(&common.project, false, |p, _| {
                engine::set_codebook(p, codebook)?;
                Ok(p.codebook.clone())
            })?;
            Ok(revised(json!({"codebook": cb}), rev, common.format))
        }
        Command::Codebook(CodebookCommand::Show { common }) => Ok(emit(&load(&common.project)?.codebook, common.format)),
        Command::Classify(a) => {
            let (summary, rev) = mutate(&a.common.project, false, |p, dir| {
                engine::classify_project(p, dir, a.mode, a.temperature)
            })?;
            Ok(revised(summary, rev, a.common.format))
        }
        Command::Evaluate(a) => {
            let mut resample = a.resample.as_deref().map(ResampleSpec::parse).transpose()?;
            if let (Some(spec), Some(seed)) = (resample.as_mut(), a.seed) {
                spec.seed = seed;
            }
            let opts = EvaluateOptions {
                drop_other: a.drop_other,
                exclude_exemplars: a.exclude_exemplars,
                resample,
                mode: a.mode,
                temperature: a.temperature,
            };
            let project = load(&a.common.project)?;
            let report = engine::evaluate(&project, &a.common.project, &opts)?;
            Ok(match a.common.format {
                Output::Json => Rendered::Json(render_json(&report)),
                Output::Table => Rendered::Text(table::metrics(&report)),
            })
        }
        Command::Audit(a) => match a.action {
            Some(AuditCommand::Resolve { common, file, revision }) => {
                let resolutions = engine::parse_resolutions_csv(&read_file(&file)?[..])?;
                let (summary, rev) = mutate(&common.project, false, |p, _| engine::resolve(p, resolutions, revision))?;
                Ok(revised(json!({"summary": summary}), rev, common.format))
            }
            Some(AuditCommand::Summary { common }) => {
                let project = load(&common.project)?;
                let summary = engine::summary(&project)?
                    .ok_or_else(|| Error::NotFound("no audit report; run an audit first".into()))?;
                Ok(emit(&summary, common.format))
            }
            None => {
                let dir = a
                    .project
                    .ok_or_else(|| Error::Invalid("audit needs --project".into()))?;
                let (report, _) = mutate(&dir, false, |p, dir| {
                    let report = engine::audit_project(p, dir, a.threshold, a.code_source)?;
                    if let Some(path) = &a.review {
                        fs::write(path, engine::audit_review_csv(p, &report)?)?;
                    }
                    Ok(report)
                })?;
                Ok(match a.format {
                    Output::Json => Rendered::Json(render_json(&report)),
                    Output::Table => Rendered::Text(table::audit(&report)),
                })
            }
        },
        Command::Adapter(AdapterCommand::Train { common, hyperparams, seed, activate }) => {
            let mut hp: AdapterHyperparams = match &hyperparams {
                Some(path) => read_json(path)?,
                None => AdapterHyperparams::default(),
            };
            if let Some(seed) = seed {
                hp.seed = seed;
            }
            hp.validate()?;
            let (out, rev) = mutate(&common.project, false, |p, dir| {
                let trained = engine::train_adapter(p, dir, &hp)?;
                if activate {
                    engine::set_adapter_active(p, dir, true)?;
                }
                Ok(json!({
                    "model_id": trained.adapted_model_id(),
                    "pair_count": trained.manifest.pair_count,
                    "initial_loss": trained.manifest.initial_loss,
                    "final_loss": trained.manifest.final_loss,
                    "active": p.adapter_active,
                }))
            })?;
            Ok(revised(out, rev, common.format))
        }
        Command::Adapter(AdapterCommand::Apply { common, off }) => {
            let (active, rev) = mutate(&common.project, false, |p, dir| {
                engine::set_adapter_active(p, dir, !off)?;
                Ok(p.adapter_active)
            })?;
            Ok(revised(json!({"adapter_active": active}), rev, common.format))
        }
        Command::Project(a) => {
            let params = TsneParams {
                perplexity: a.perplexity,
                seed: a.seed,
                iterations: a.iterations,
                ..Default::default()
            };
            let project = load(&a.common.project)?;
            let result = engine::project_2d(&project, &a.common.project, a.method, &params)?;
            if let Some(path) = &a.out {
                fs::write(path, engine::projection_csv(&result.points)?)?;
            }
            let summary = json!({
                "method": result.projection.method,
                "points": result.points.len(),
                "params": result.projection.params,
                "path": a.common.project.join(engine::PROJECTION_FILE),
            });
            Ok(match a.common.format {
                Output::Json => Rendered::Json(render_json(&summary)),
                Output::Table => Rendered::Text(engine::projection_csv(&result.points)?),
            })
        }
        Command::Export(a) => {
            let project = load(&a.project)?;
            let body = match (a.data.as_str(), a.format.as_str()) {
                ("assignments", "csv") => engine::assignments_csv(&project)?,
                ("assignments", "jsonl") => engine::assignments_jsonl(&project)?,
                ("responses", "jsonl") => engine::responses_jsonl(&project)?,
                ("audit", "csv") => {
                    let report = project
                        .audit
                        .as_ref()
                        .ok_or_else(|| Error::NotFound("no audit report; run an audit first".into()))?;
                    engine::audit_review_csv(&project, report)?
                }
                ("projection", "csv") => {
                    let result = engine::load_projection(&a.project)?
                        .ok_or_else(|| Error::NotFound("no projection; run one first".into()))?;
                    engine::projection_csv(&result.points)?
                }
                (d, f) => return Err(Error::Invalid(format!("cannot export `{d}` as `{f}`"))),
            };
            match &a.out {
                Some(path) => {
                    fs::write(path, &body)?;
                    Ok(Rendered::Json(render_json(&json!({"path": path, "bytes": body.len()}))))
                }
                None => Ok(Rendered::Text(body)),
            }
        }
        Command::Serve(a) => {
            let mut config = qualcode_service::ServeConfig::new(a.addr, a.store);
            config.provider = a.provider.as_deref().map(read_json).transpose()?;
            config.ui_dir = a.ui;
            config.workers = a.workers;
            let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
            rt.block_on(qualcode_service::serve(config)).map_err(|e| match e {
                qualcode_service::ServeError::Core(e) => e,
                other => Error::Io(std::io::Error::other(other.to_string())),
            })?;
            Ok(Rendered::Text(String::new()))
        }
        Command::Synthetic(a) => {
            let corpus = synthetic::generate(&SyntheticSpec {
                seed: a.seed,
                ..Default::default()
            })?;
            fs::create_dir_all(&a.out)?;
            let files = [
                ("responses.csv", synthetic::to_csv(&corpus.responses)?),
                ("codebook.json", render_json(&corpus.codebook)),
                ("provider.json", render_json(&corpus.provider)),
                ("adapter.json", render_json(&synthetic::adapter_hyperparams())),
            ];
            for (name, body) in &files {
                fs::write(a.out.join(name), body)?;
            }
            Ok(Rendered::Json(render_json(&json!({
                "out": a.out,
                "responses": corpus.responses.len(),
                "files": files.iter().map(|(n, _)| *n).collect::<Vec<_>>(),
            }))))
        }
    }
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Validation | ErrorKind::NotFound => 2,
        ErrorKind::Transport => 3,
        ErrorKind::Integrity => 4,
        ErrorKind::Io => 1,
    }
}

fn report_error(code: &str, kind: &str, message: String, mut details: Value) {
    if let Value::Object(map) = &mut details {
        map.insert("kind".into(), json!(kind));
    }
    let body = json!({"code": code, "message": message, "details": details});
    let _ = writeln!(std::io::stderr(), "{body}");
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            report_error("usage", "validation", e.to_string().trim().to_string(), json!({}));
            return ExitCode::from(2);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(cli) {
        Ok(Rendered::Json(s)) | Ok(Rendered::Text(s)) => {
            let mut out = std::io::stdout().lock();
            let _ = out.write_all(s.as_bytes());
            let _ = out.flush();
            ExitCode::SUCCESS
        }
        Err(e) => {
            report_error(e.code(), e.kind().as_str(), e.to_string(), e.details());
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
