use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use cpc_core::backend::{BackendKind, Pricing, SamplingParams};
use cpc_core::corpus::{DatasetFormat, DEFAULT_WORD_THRESHOLD};
use cpc_core::eval::UnparsablePolicy;
use cpc_core::pipeline::{Fallback, RetryPolicy, TransientRetry};
use cpc_core::prompting::PromptStyle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ShotMode {
    #[default]
    Zero,
    Few,
}

impl ShotMode {
    pub fn train_mode(self) -> &'static str {
        match self {
            ShotMode::Zero => "zero-shot",
            ShotMode::Few => "few-shot",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub path: Option<PathBuf>,
    pub format: Option<DatasetFormat>,
    /// Defaults to the file stem.
    pub tag: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptSection {
    pub style: PromptStyle,
    pub shots: ShotMode,
    pub fewshot_word_threshold: usize,
}

impl Default for PromptSection {
    fn default() -> Self {
        PromptSection {
            style: PromptStyle::Short,
            shots: ShotMode::Zero,
            fewshot_word_threshold: DEFAULT_WORD_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    pub kind: BackendKind,
    pub model_name: Option<String>,
    pub endpoint: Option<String>,
    /// Name of the environment variable holding the API key.
    pub api_key_env: Option<String>,
    pub pricing: Option<Pricing>,
    pub request_timeout_secs: Option<f64>,
    /// Retries of failed requests (rate limits, timeouts, 5xx) per call.
    pub transient_retries: Option<u32>,
    /// First backoff delay; doubles per attempt up to 30 s.
    pub backoff_ms: Option<u64>,
    /// Mock only: record lines of `{"id": ..., "responses": [...]}`.
    pub responses: Option<PathBuf>,
    /// Mock only: answer for instances without scripted responses.
    pub default_response: Option<String>,
}

impl Default for BackendSection {
    fn default() -> Self {
        BackendSection {
            kind: BackendKind::ScriptedMock,
            model_name: None,
            endpoint: None,
            api_key_env: None,
            pricing: None,
            request_timeout_secs: None,
            transient_retries: None,
            backoff_ms: None,
            responses: None,
            default_response: None,
        }
    }
}

impl BackendSection {
    pub fn model_name(&self) -> &str {
        match (&self.model_name, self.kind) {
            (Some(m), _) => m,
            (None, BackendKind::ScriptedMock) => "mock",
            (None, BackendKind::RemoteChatApi) => "",
        }
    }

    pub fn transient(&self) -> TransientRetry {
        let mut t = TransientRetry::default();
        set(&mut t.max_retries, self.transient_retries);
        set(&mut t.base_delay, self.backoff_ms.map(Duration::from_millis));
        t
    }

    /// Configured rates, else the known rates for the model, else free.
    pub fn resolved_pricing(&self) -> Pricing {
        self.pricing
            .or_else(|| Pricing::for_model(self.model_name()))
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingSection {
    pub temperature: Option<f64>,
    pub top_p: Option<f64>,
    pub max_output_tokens: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub concurrency: usize,
    pub two_stage: bool,
    /// Defaults to `cache.jsonl` in the output directory.
    pub cache: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub unparsable_policy: UnparsablePolicy,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            concurrency: 4,
            two_stage: false,
            cache: None,
            out: None,
            unparsable_policy: UnparsablePolicy::default(),
        }
    }
}

/// Everything a run depends on. Written back out, with provenance, as the
/// run manifest; a manifest is itself a valid config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub prompt: PromptSection,
    pub backend: BackendSection,
    pub sampling: SamplingSection,
    pub retry: RetryPolicy,
    pub run: RunSection,
    /// Filled in by `classify`; ignored when read back.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub provenance: Option<toml::Table>,
}

/// Flag values that override the config file.
#[derive(Debug, Default)]
pub struct Overrides {
    pub dataset: Option<PathBuf>,
    pub dataset_format: Option<DatasetFormat>,
    pub tag: Option<String>,
    pub style: Option<PromptStyle>,
    pub shots: Option<ShotMode>,
    pub backend: Option<BackendKind>,
    pub model: Option<String>,
    pub endpoint: Option<String>,
    pub api_key_env: Option<String>,
    pub responses: Option<PathBuf>,
    pub temperature: Option<f64>,
    pub top_p: Option<f64>,
    pub max_output_tokens: Option<u32>,
    pub concurrency: Option<usize>,
    pub max_retries: Option<u32>,
    pub fallback: Option<Fallback>,
    pub two_stage: bool,
    pub cache: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

fn absolute(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl RunConfig {
    /// Read a config file. Relative paths inside it are taken relative to the
    /// file's directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        cfg.provenance = None;
        let cwd = std::env::current_dir().context("reading the working directory")?;
        cfg.rebase(&cwd.join(path.parent().unwrap_or(Path::new(""))));
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        for p in [
            &mut self.dataset.path,
            &mut self.backend.responses,
            &mut self.run.cache,
            &mut self.run.out,
        ]
        .into_iter()
        .flatten()
        {
            *p = absolute(base, p);
        }
    }

    pub fn apply(&mut self, o: Overrides) -> anyhow::Result<()> {
        let cwd = std::env::current_dir().context("reading the working directory")?;
        let abs = |p: PathBuf| absolute(&cwd, &p);
        if let Some(p) = o.dataset {
            self.dataset.path = Some(abs(p));
        }
        set(&mut self.dataset.format, o.dataset_format.map(Some));
        set(&mut self.dataset.tag, o.tag.map(Some));
        set(&mut self.prompt.style, o.style);
        set(&mut self.prompt.shots, o.shots);
        set(&mut self.backend.kind, o.backend);
        set(&mut self.backend.model_name, o.model.map(Some));
        set(&mut self.backend.endpoint, o.endpoint.map(Some));
        set(&mut self.backend.api_key_env, o.api_key_env.map(Some));
        set(&mut self.backend.responses, o.responses.map(|p| Some(abs(p))));
        set(&mut self.sampling.temperature, o.temperature.map(Some));
        set(&mut self.sampling.top_p, o.top_p.map(Some));
        set(
            &mut self.sampling.max_output_tokens,
            o.max_output_tokens.map(Some),
        );
        set(&mut self.run.concurrency, o.concurrency);
        set(&mut self.retry.max_retries, o.max_retries);
        set(&mut self.retry.fallback, o.fallback);
        self.run.two_stage |= o.two_stage;
        set(&mut self.run.cache, o.cache.map(|p| Some(abs(p))));
        set(&mut self.run.out, o.out.map(|p| Some(abs(p))));
        Ok(())
    }

    pub fn dataset_path(&self) -> anyhow::Result<&Path> {
        let Some(path) = self.dataset.path.as_deref() else {
            bail!("no dataset given (use --dataset or [dataset] path)");
        };
        if !path.is_file() {
            bail!("dataset {} does not exist", path.display());
        }
        Ok(path)
    }

    pub fn dataset_tag(&self) -> String {
        self.dataset.tag.clone().unwrap_or_else(|| {
            self.dataset
                .path
                .as_deref()
                .and_then(|p| p.file_stem())
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "dataset".into())
        })
    }

    pub fn dataset_format(&self) -> anyhow::Result<DatasetFormat> {
        Ok(self
            .dataset
            .format
            .unwrap_or(DatasetFormat::from_path(self.dataset_path()?)))
    }

    pub fn sampling(&self) -> anyhow::Result<SamplingParams> {
        let mut p = self.prompt.style.default_sampling();
        set(&mut p.temperature, self.sampling.temperature);
        set(&mut p.top_p, self.sampling.top_p);
        set(&mut p.max_output_tokens, self.sampling.max_output_tokens);
        p.validate()?;
        Ok(p)
    }

    pub fn out_dir(&self) -> anyhow::Result<&Path> {
        self.run
            .out
            .as_deref()
            .context("no output directory given (use --out or [run] out)")
    }

    /// Check everything that can be checked before any file is written.
    pub fn validate(&self) -> anyhow::Result<()> {
        self.dataset_path()?;
        self.sampling()?;
        if self.run.concurrency == 0 {
            bail!("concurrency must be at least 1");
        }
        if let Some(r) = &self.backend.responses {
            if !r.is_file() {
                bail!("mock responses file {} does not exist", r.display());
            }
        }
        match self.backend.kind {
            BackendKind::RemoteChatApi => {
                if self.backend.endpoint.is_none() {
                    bail!("the remote backend needs an endpoint (--endpoint or [backend] endpoint)");
                }
                if self.backend.model_name.is_none() {
                    bail!("the remote backend needs a model name (--model or [backend] model_name)");
                }
            }
            BackendKind::ScriptedMock => {
                if self.backend.responses.is_none() && self.backend.default_response.is_none() {
                    bail!("the mock backend needs a responses file or a default response");
                }
            }
        }
        Ok(())
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}
