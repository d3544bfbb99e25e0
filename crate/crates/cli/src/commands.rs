use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use anyhow::{anyhow, Context};
use serde::Deserialize;
use sha2::{Digest, Sha256};

use cpc_core::backend::{
    estimate_cost, BackendConfig, BackendError, BackendKind, CharsPerToken, ChatApiBackend, ChatBackend,
    KeyedMock, TokenEstimator, TranscriptLog, Usage,
};
use cpc_core::corpus::{load_dataset, select_fewshot_examples, split_eval_set, Dataset, FewShotSet};
use cpc_core::eval::{
    baseline_rows, best_of, compute_report, render_report, ConfigDescriptor, ReportFormat, ReportRow,
    UnparsablePolicy,
};
use cpc_core::pipeline::{run_batch, BatchOptions, Classifier, OutcomeCache, RunOutcome, Shots};
use cpc_core::prompting::{build_conversation, build_summary_conversation, Conversation, PromptTemplate};
use cpc_core::PreferenceLabel;

use crate::config::{RunConfig, ShotMode};

pub const EXIT_OK: u8 = 0;
pub const EXIT_IO: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_BACKEND: u8 = 3;
pub const EXIT_PARTIAL: u8 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub error: anyhow::Error,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

pub fn config_error(e: impl Into<anyhow::Error>) -> CliError {
    CliError {
        code: EXIT_CONFIG,
        error: e.into(),
    }
}

fn io_error(e: impl Into<anyhow::Error>) -> CliError {
    CliError {
        code: EXIT_IO,
        error: e.into(),
    }
}

pub type CmdResult = Result<u8, CliError>;

fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Dataset, prompt and exemplars resolved from a config.
struct Prepared {
    dataset: Dataset,
    template: PromptTemplate,
    fewshot: Option<FewShotSet>,
}

impl Prepared {
    fn load(cfg: &RunConfig) -> Result<Self, CliError> {
        let path = cfg.dataset_path().map_err(config_error)?;
        let tag = cfg.dataset_tag();
        let dataset = load_dataset(path, cfg.dataset_format().map_err(config_error)?, &tag)
            .with_context(|| format!("loading {}", path.display()))
            .map_err(config_error)?;
        let template = PromptTemplate::for_dataset(cfg.prompt.style, &tag);
        let fewshot = match cfg.prompt.shots {
            ShotMode::Zero => None,
            ShotMode::Few => Some(
                select_fewshot_examples(&dataset, cfg.prompt.fewshot_word_threshold)
                    .context("selecting few-shot exemplars")
                    .map_err(config_error)?,
            ),
        };
        Ok(Prepared {
            dataset,
            template,
            fewshot,
        })
    }

    fn shots(&self) -> Shots<'_> {
        match &self.fewshot {
            Some(fs) => Shots::Few(fs),
            None => Shots::Zero,
        }
    }

    /// Instances a run actually classifies.
    fn evaluated(&self) -> Result<Dataset, CliError> {
        match &self.fewshot {
            Some(fs) => split_eval_set(&self.dataset, fs).map_err(config_error),
            None => Ok(self.dataset.clone()),
        }
    }

    /// The first conversation a run sends for `inst`.
    fn first_conversation(
        &self,
        cfg: &RunConfig,
        inst: &cpc_core::corpus::ComparisonInstance,
    ) -> Result<Conversation, CliError> {
        if cfg.run.two_stage {
            build_summary_conversation(inst).map_err(config_error)
        } else {
            build_conversation(&self.template, inst, self.fewshot.as_ref()).map_err(config_error)
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScriptLine {
    id: String,
    #[serde(default)]
    responses: Vec<String>,
    /// Fail every call for this instance instead: rate-limited, timeout,
    /// transport or server-error.
    #[serde(default)]
    error: Option<String>,
}

fn scripted_error(kind: &str) -> anyhow::Result<BackendError> {
    Ok(match kind {
        "rate-limited" => BackendError::RateLimited {
            retry_after: std::time::Duration::ZERO,
        },
        "timeout" => BackendError::Timeout(std::time::Duration::ZERO),
        "transport" => BackendError::Transport("scripted transport failure".into()),
        "server-error" => BackendError::Protocol {
            status: Some(500),
            body: "scripted server error".into(),
        },
        other => anyhow::bail!("unknown scripted error {other:?}"),
    })
}

/// Mock keyed by instance text, scripted from a record-lines file of
/// `{"id", "responses"}` or `{"id", "error"}` objects.
fn build_mock(cfg: &RunConfig, dataset: &Dataset) -> Result<KeyedMock, CliError> {
    let mut mock = KeyedMock::new()
        .with_model_name(cfg.backend.model_name())
        .with_pricing(cfg.backend.resolved_pricing());
    if let Some(r) = &cfg.backend.default_response {
        mock = mock.with_default(r.clone());
    }
    if let Some(path) = &cfg.backend.responses {
        let file = fs::File::open(path)
            .with_context(|| format!("opening {}", path.display()))
            .map_err(config_error)?;
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(config_error)?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ScriptLine = serde_json::from_str(&line)
                .with_context(|| format!("{} line {}", path.display(), i + 1))
                .map_err(config_error)?;
            let inst = dataset.get(&entry.id).ok_or_else(|| {
                config_error(anyhow!(
                    "{} line {}: unknown instance {:?}",
                    path.display(),
                    i + 1,
                    entry.id
                ))
            })?;
            match entry.error {
                Some(kind) => {
                    let err = scripted_error(&kind)
                        .with_context(|| format!("{} line {}", path.display(), i + 1))
                        .map_err(config_error)?;
                    mock = mock.fail(inst.text.clone(), err);
                }
                None => mock.insert_script(inst.text.clone(), entry.responses),
            }
        }
    }
    Ok(mock)
}

enum Backend {
    Mock(KeyedMock),
    Remote(ChatApiBackend),
}

impl Backend {
    fn as_dyn(&self) -> &dyn ChatBackend {
        match self {
            Backend::Mock(m) => m,
            Backend::Remote(r) => r,
        }
    }

    /// Remote requests and responses are logged verbatim to `path`.
    fn with_transcript(self, path: &Path) -> Result<Self, CliError> {
        Ok(match self {
            Backend::Remote(r) => {
                Backend::Remote(r.with_transcript(TranscriptLog::open(path).map_err(io_error)?))
            }
            mock => mock,
        })
    }
}

fn build_backend(cfg: &RunConfig, dataset: &Dataset) -> Result<Backend, CliError> {
    match cfg.backend.kind {
        BackendKind::ScriptedMock => Ok(Backend::Mock(build_mock(cfg, dataset)?)),
        BackendKind::RemoteChatApi => {
            let mut bc = BackendConfig::remote(
                cfg.backend.endpoint.clone().unwrap_or_default(),
                cfg.backend.model_name(),
            );
            bc.api_key_env = cfg.backend.api_key_env.clone();
            bc.pricing = cfg.backend.resolved_pricing();
            if let Some(t) = cfg.backend.request_timeout_secs {
                bc.request_timeout_secs = t;
            }
            ChatApiBackend::from_config(&bc)
                .map(Backend::Remote)
                .map_err(|e| match e {
                    BackendError::MissingCredentials(_) | BackendError::Config(_) => config_error(e),
                    other => CliError {
                        code: EXIT_BACKEND,
                        error: other.into(),
                    },
                })
        }
    }
}

fn descriptor(cfg: &RunConfig) -> ConfigDescriptor {
    let mut train_mode = cfg.prompt.shots.train_mode().to_string();
    if cfg.run.two_stage {
        train_mode.push_str(", two-stage");
    }
    ConfigDescriptor::new(cfg.backend.model_name(), cfg.prompt.style.as_str(), train_mode)
}

fn write_outcomes(path: &Path, outcomes: &[RunOutcome]) -> anyhow::Result<()> {
    let mut out = std::io::BufWriter::new(
        fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
    );
    for o in outcomes {
        serde_json::to_writer(&mut out, o)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn classify(cfg: &mut RunConfig, cancel: Arc<AtomicBool>) -> CmdResult {
    cfg.validate().map_err(config_error)?;
    let out_dir = cfg.out_dir().map_err(config_error)?.to_path_buf();
    let prepared = Prepared::load(cfg)?;
    let params = cfg.sampling().map_err(config_error)?;
    let backend = build_backend(cfg, &prepared.dataset)?;

    fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))
        .map_err(io_error)?;
    let backend = backend.with_transcript(&out_dir.join("transcript.jsonl"))?;
    let cache_path = cfg
        .run
        .cache
        .clone()
        .unwrap_or_else(|| out_dir.join("cache.jsonl"));
    let cache = OutcomeCache::open(&cache_path)
        .with_context(|| format!("opening cache {}", cache_path.display()))
        .map_err(io_error)?;

    let classifier = Classifier::new(backend.as_dyn(), prepared.template.clone())
        .with_policy(cfg.retry)
        .with_params(params)
        .with_transient(cfg.backend.transient());
    let opts = BatchOptions {
        concurrency_limit: cfg.run.concurrency,
        two_stage: cfg.run.two_stage,
        cancel: Some(cancel.clone()),
        ..Default::default()
    };
    let result = run_batch(
        &classifier,
        &prepared.dataset,
        prepared.shots(),
        Some(&cache),
        &opts,
    )
    .map_err(|e| CliError {
        code: EXIT_IO,
        error: e.into(),
    })?;
    let cancelled = cancel.load(Ordering::SeqCst);

    write_outcomes(&out_dir.join("outcomes.jsonl"), &result.outcomes).map_err(io_error)?;

    let golds = prepared.dataset.golds();
    let scored = result.outcomes.iter().all(|o| golds.contains_key(&o.instance_id));
    if scored && !result.outcomes.is_empty() {
        let report = compute_report(&result.outcomes, &golds, cfg.run.unparsable_policy).map_err(io_error)?;
        let rows = vec![ReportRow::from_report(descriptor(cfg), &report)];
        let text = render_report(&rows, ReportFormat::AlignedText);
        fs::write(out_dir.join("report.txt"), &text).map_err(io_error)?;
        fs::write(
            out_dir.join("report.csv"),
            render_report(&rows, ReportFormat::DelimitedTable),
        )
        .map_err(io_error)?;
        print!("{text}");
    } else {
        log::warn!("some instances have no gold label; no report written");
    }

    let usage = result
        .outcomes
        .iter()
        .fold(Usage::default(), |acc, o| acc + o.usage_total);
    let cost: f64 = result.outcomes.iter().map(|o| o.cost_total).sum();
    let mut provenance = toml::Table::new();
    provenance.insert("tool".into(), format!("cpc {}", env!("CARGO_PKG_VERSION")).into());
    provenance.insert(
        "dataset_sha256".into(),
        sha256_file(cfg.dataset_path().map_err(config_error)?)
            .map_err(io_error)?
            .into(),
    );
    if let Some(r) = &cfg.backend.responses {
        provenance.insert(
            "responses_sha256".into(),
            sha256_file(r).map_err(io_error)?.into(),
        );
    }
    if let Some(fs) = &prepared.fewshot {
        let ids: Vec<toml::Value> = fs.ids().into_iter().map(|s| s.to_string().into()).collect();
        provenance.insert("fewshot_ids".into(), ids.into());
    }
    provenance.insert("instances".into(), (result.outcomes.len() as i64).into());
    provenance.insert("failures".into(), (result.failures.len() as i64).into());
    provenance.insert("cache_hits".into(), (result.cache_hits as i64).into());
    provenance.insert("input_tokens".into(), (usage.input_tokens as i64).into());
    provenance.insert("output_tokens".into(), (usage.output_tokens as i64).into());
    provenance.insert("cost_usd".into(), cost.into());
    provenance.insert("cancelled".into(), cancelled.into());
    cfg.run.cache = Some(cache_path);
    cfg.provenance = Some(provenance);
    let manifest = toml::to_string(cfg).map_err(io_error)?;
    fs::write(out_dir.join("manifest.toml"), manifest).map_err(io_error)?;

    eprintln!(
        "{} instances, {} failed, {} from cache; outputs in {}",
        result.outcomes.len(),
        result.failures.len(),
        result.cache_hits,
        out_dir.display()
    );
    Ok(if cancelled {
        EXIT_PARTIAL
    } else if !result.failures.is_empty() && result.failures.len() == result.outcomes.len() {
        EXIT_BACKEND
    } else if !result.failures.is_empty() {
        EXIT_PARTIAL
    } else {
        EXIT_OK
    })
}

pub fn inspect_prompt(cfg: &RunConfig, id: &str) -> CmdResult {
    cfg.sampling().map_err(config_error)?;
    let prepared = Prepared::load(cfg)?;
    let inst = prepared
        .dataset
        .get(id)
        .ok_or_else(|| config_error(anyhow!("no instance with id {id:?}")))?;
    if prepared.fewshot.as_ref().is_some_and(|fs| fs.ids().contains(&id)) {
        return Err(config_error(anyhow!(
            "instance {id:?} is a few-shot exemplar and is never classified"
        )));
    }
    let conv = prepared.first_conversation(cfg, inst)?;
    print!("{}", conv.to_record_lines());
    Ok(EXIT_OK)
}

fn conversation_tokens(conv: &Conversation, est: &dyn TokenEstimator) -> u64 {
    conv.messages()
        .iter()
        .map(|m| est.estimate(&m.content) as u64)
        .sum()
}

/// Token and cost projection without calling the backend. Every call is
/// assumed to be answered with a delimiter-wrapped canonical phrase; the
/// worst case assumes every instance spends its whole retry budget.
pub fn estimate(cfg: &RunConfig) -> CmdResult {
    cfg.sampling().map_err(config_error)?;
    let prepared = Prepared::load(cfg)?;
    let evaluated = prepared.evaluated()?;
    let est = CharsPerToken::default();
    let answer = prepared
        .template
        .wrap(PreferenceLabel::APreferred.canonical_phrase());
    let answer_tokens = est.estimate(&answer) as u64;
    let max_output = cfg.sampling().map_err(config_error)?.max_output_tokens as u64;

    let (mut first, mut worst) = (Usage::default(), Usage::default());
    let (mut first_calls, mut worst_calls) = (0u64, 0u64);
    for inst in evaluated.instances() {
        if cfg.run.two_stage {
            let summary = build_summary_conversation(inst).map_err(config_error)?;
            let summary_out = (est.estimate(&inst.text) as u64).min(max_output);
            let u = Usage::reported(conversation_tokens(&summary, &est), summary_out);
            first = first + u;
            worst = worst + u;
            first_calls += 1;
            worst_calls += 1;
        }
        let mut conv =
            build_conversation(&prepared.template, inst, prepared.fewshot.as_ref()).map_err(config_error)?;
        first = first + Usage::reported(conversation_tokens(&conv, &est), answer_tokens);
        first_calls += 1;
        for attempt in 0..=cfg.retry.max_retries {
            if attempt > 0 {
                conv = conv
                    .with_retry(&answer, &prepared.template.retry_text)
                    .map_err(config_error)?;
            }
            worst = worst + Usage::reported(conversation_tokens(&conv, &est), answer_tokens);
            worst_calls += 1;
        }
    }
    let pricing = cfg.backend.resolved_pricing();
    println!(
        "dataset: {} ({} instances, {} classified)",
        evaluated.tag,
        prepared.dataset.len(),
        evaluated.len()
    );
    println!(
        "model: {} (input ${:.2}/1M tokens, output ${:.2}/1M tokens)",
        cfg.backend.model_name(),
        pricing.input_cost_per_token * 1e6,
        pricing.output_cost_per_token * 1e6
    );
    for (name, calls, u) in [
        ("expected", first_calls, first),
        ("worst case", worst_calls, worst),
    ] {
        println!(
            "{name}: {calls} calls, {} input tokens, {} output tokens, ${:.4}",
            u.input_tokens,
            u.output_tokens,
            estimate_cost(&u, &pricing)
        );
    }
    Ok(EXIT_OK)
}

pub struct ReportArgs {
    pub files: Vec<PathBuf>,
    pub baselines: bool,
    pub format: ReportFormat,
    pub policy: UnparsablePolicy,
}

fn read_outcomes(path: &Path) -> anyhow::Result<Vec<RunOutcome>> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .with_context(|| format!("{} line {}: not an outcome record", path.display(), i + 1))?,
        );
    }
    Ok(out)
}

/// Combine outcome files into one comparison table. Each file's descriptor
/// and gold labels come from the manifest beside it unless `--dataset` is
/// given.
pub fn report(flags: &RunConfig, args: ReportArgs) -> CmdResult {
    let mut rows = Vec::new();
    let mut tag = None;
    for file in &args.files {
        let outcomes = read_outcomes(file).map_err(config_error)?;
        let manifest_path = file.with_file_name("manifest.toml");
        let manifest = if manifest_path.is_file() {
            Some(RunConfig::load(&manifest_path).map_err(config_error)?)
        } else {
            None
        };
        let gold_source = if flags.dataset.path.is_some() {
            flags
        } else {
            manifest.as_ref().ok_or_else(|| {
                config_error(anyhow!(
                    "{}: no manifest beside it; pass --dataset",
                    file.display()
                ))
            })?
        };
        let path = gold_source.dataset_path().map_err(config_error)?;
        let dataset = load_dataset(
            path,
            gold_source.dataset_format().map_err(config_error)?,
            &gold_source.dataset_tag(),
        )
        .with_context(|| format!("loading {}", path.display()))
        .map_err(config_error)?;
        let golds: BTreeMap<_, _> = dataset.golds();
        let report = compute_report(&outcomes, &golds, args.policy)
            .with_context(|| format!("scoring {}", file.display()))
            .map_err(config_error)?;
        let desc = match &manifest {
            Some(m) => descriptor(m),
            None => ConfigDescriptor::new(
                file.file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default(),
                "-",
                "-",
            ),
        };
        tag.get_or_insert(dataset.tag.clone());
        rows.push(ReportRow::from_report(desc, &report));
    }
    if args.baselines {
        if let Some(best) = best_of("Best LLM", &rows) {
            rows.push(best);
        }
        rows.extend(baseline_rows(tag.as_deref().unwrap_or_default()));
    }
    print!("{}", render_report(&rows, args.format));
    Ok(EXIT_OK)
}
