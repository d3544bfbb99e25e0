use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use super::cache::template_digest;
use super::{CacheKey, CacheKeyFields, Classifier, OutcomeCache, PipelineError, RunOutcome};
use crate::corpus::{split_eval_set, ComparisonInstance, Dataset, FewShotSet};

#[derive(Debug, Clone, Copy)]
pub enum Shots<'a> {
    Zero,
    /// Exemplars are removed from the evaluated instances before running.
    Few(&'a FewShotSet),
}

impl Shots<'_> {
    pub fn as_str(&self) -> &'static str {
        match self {
            Shots::Zero => "zero",
            Shots::Few(_) => "few",
        }
    }

    fn fewshot(&self) -> Option<&FewShotSet> {
        match self {
            Shots::Zero => None,
            Shots::Few(fs) => Some(fs),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    /// Spread instances over a pool of `concurrency_limit` threads. Falls back
    /// to sequential when built without the `parallel` feature.
    #[default]
    Parallel,
}

#[derive(Debug, Clone)]
pub struct BatchOptions {
    pub concurrency_limit: usize,
    pub two_stage: bool,
    pub execution: Execution,
    /// When set, instances not yet started are recorded as failed.
    pub cancel: Option<Arc<AtomicBool>>,
}

impl Default for BatchOptions {
    fn default() -> Self {
        BatchOptions {
            concurrency_limit: 4,
            two_stage: false,
            execution: Execution::default(),
            cancel: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchResult {
    /// One per evaluated instance, in dataset order.
    pub outcomes: Vec<RunOutcome>,
    /// Ids of instances whose backend calls failed.
    pub failures: Vec<String>,
    pub cache_hits: usize,
}

/// Classify every instance, reusing cached outcomes. Backend failures are
/// recorded per instance and do not stop the batch; failed outcomes are not
/// cached so a later run retries them.
pub fn run_batch(
    classifier: &Classifier<'_>,
    dataset: &Dataset,
    shots: Shots<'_>,
    cache: Option<&OutcomeCache>,
    opts: &BatchOptions,
) -> Result<BatchResult, PipelineError> {
    if opts.concurrency_limit == 0 {
        return Err(PipelineError::Options(
            "concurrency_limit must be at least 1".into(),
        ));
    }
    let eval_set;
    let instances = match shots {
        Shots::Zero => dataset.instances(),
        Shots::Few(fs) => {
            eval_set = split_eval_set(dataset, fs)?;
            eval_set.instances()
        }
    };

    let tdigest = template_digest(&classifier.template);
    let model_name = classifier.backend.model_name();
    let stage = if opts.two_stage {
        "summarize-then-classify"
    } else {
        "direct"
    };

    let work = |inst: &ComparisonInstance| -> Result<(RunOutcome, bool), PipelineError> {
        if opts.cancel.as_ref().is_some_and(|c| c.load(Ordering::SeqCst)) {
            return Ok((RunOutcome::failed(&inst.id, "cancelled"), false));
        }
        let key = CacheKey::new(&CacheKeyFields {
            model_name,
            style: classifier.template.style,
            template_digest: tdigest.clone(),
            shot_mode: shots.as_str(),
            sampling: classifier.params,
            policy: classifier.policy,
            instance_id: &inst.id,
            dataset_tag: &dataset.tag,
            stage,
        });
        if let Some(hit) = cache.and_then(|c| c.get(&key)) {
            return Ok((hit, true));
        }
        let result = if opts.two_stage {
            classifier.summarize_then_classify(inst, shots.fewshot())
        } else {
            classifier.classify_instance(inst, shots.fewshot())
        };
        match result {
            Ok(outcome) => {
                if let Some(c) = cache {
                    c.insert(key, outcome.clone())?;
                }
                Ok((outcome, false))
            }
            Err(PipelineError::Cache(e)) => Err(PipelineError::Cache(e)),
            Err(e) => {
                log::warn!("instance {}: {e}", inst.id);
                Ok((RunOutcome::failed(&inst.id, e), false))
            }
        }
    };

    let results: Vec<(RunOutcome, bool)> = match opts.execution {
        #[cfg(feature = "parallel")]
        Execution::Parallel if opts.concurrency_limit > 1 => {
            use rayon::prelude::*;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(opts.concurrency_limit)
                .thread_name(|i| format!("cpc-batch-{i}"))
                .build()
                .map_err(|e| PipelineError::Options(e.to_string()))?;
            pool.install(|| instances.par_iter().map(work).collect::<Result<_, _>>())?
        }
        _ => instances.iter().map(work).collect::<Result<_, _>>()?,
    };

    let cache_hits = results.iter().filter(|(_, hit)| *hit).count();
    let outcomes: Vec<RunOutcome> = results.into_iter().map(|(o, _)| o).collect();
    let failures = outcomes
        .iter()
        .filter(|o| o.is_failed())
        .map(|o| o.instance_id.clone())
        .collect();
    Ok(BatchResult {
        outcomes,
        failures,
        cache_hits,
    })
}
