//! Acceptance suite. Prints one line per criterion and exits non-zero if any
//! gating criterion fails. The live smoke check (AC9) never gates.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Instant;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use cpc_core::backend::{
    estimate_cost, BackendConfig, BackendError, CharsPerToken, ChatApiBackend, ChatBackend, CompletionResult,
    KeyedMock, Pricing, SamplingParams, ScriptedMock, Usage,
};
use cpc_core::corpus::{
    dataset_stats, load_dataset, select_fewshot_examples, ComparisonInstance, Dataset, DatasetFormat,
    FewShotSet, COLLEGE_CONFIDENTIAL, COMPSENT19, DEFAULT_WORD_THRESHOLD,
};
use cpc_core::eval::{compute_report, ConfusionMatrix, UnparsablePolicy};
use cpc_core::pipeline::{
    run_batch, BatchOptions, Classifier, Execution, Fallback, OutcomeCache, ParseStatus, RetryPolicy,
    RunOutcome, Shots, TransientRetry,
};
use cpc_core::prompting::{
    build_conversation, build_retry_conversation, parse_response, Conversation, ParseResult, PromptDomain,
    PromptTemplate,
};
use cpc_core::{EvalClass, PreferenceLabel};

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

type Check = Result<String, String>;
type Criterion = (&'static str, &'static str, bool, fn() -> Verdict);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn main() {
    let criteria: Vec<Criterion> = vec![
        ("AC1", "golden prompts", true, || gate(ac1_golden_prompts())),
        ("AC2", "response parser", true, || gate(ac2_parser())),
        ("AC3", "retry state machine", true, || {
            gate(ac3_retry_state_machine())
        }),
        ("AC4", "metric oracle", true, || gate(ac4_metric_oracle())),
        ("AC5", "dataset statistics", true, ac5_dataset_stats),
        ("AC6", "cost model", true, || gate(ac6_cost_model())),
        ("AC7", "determinism and cache", true, || {
            gate(ac7_determinism_and_cache())
        }),
        ("AC8", "end-to-end mock F1", true, || gate(ac8_end_to_end())),
        ("AC9", "live smoke (optional)", false, ac9_live_smoke),
    ];

    let mut failed = 0;
    for (id, name, gating, run) in criteria {
        let started = Instant::now();
        let verdict = run();
        let ms = started.elapsed().as_millis();
        match verdict {
            Verdict::Pass(detail) => println!("[PASS] {id} {name}: {detail} ({ms} ms)"),
            Verdict::Skip(detail) => println!("[SKIP] {id} {name}: {detail}"),
            Verdict::Fail(detail) => {
                println!("[FAIL] {id} {name}: {detail} ({ms} ms)");
                if gating {
                    failed += 1;
                }
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn gate(r: Check) -> Verdict {
    match r {
        Ok(s) => Verdict::Pass(s),
        Err(s) => Verdict::Fail(s),
    }
}

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

fn college_task() -> ComparisonInstance {
    ComparisonInstance::new(
        "task",
        "I would prefer Stanford rather than UCB.",
        "Stanford University",
        "UCB",
        Some(PreferenceLabel::APreferred),
    )
}

fn fixture_exemplars() -> FewShotSet {
    FewShotSet::from_instances(vec![
        ComparisonInstance::new(
            "ex-a",
            "Daughter graduating from Cal next month. full disclosure. To me, Cal is a no brainer.",
            "Cal",
            "Duke",
            Some(PreferenceLabel::APreferred),
        ),
        ComparisonInstance::new(
            "ex-b",
            "If Duke is more expensive then go to UCB. Your parents will thank you for saving them money by going there.",
            "Duke",
            "UCB",
            Some(PreferenceLabel::BPreferred),
        ),
        ComparisonInstance::new(
            "ex-none",
            "Both are really good schools. You cannot make a mistake going to either place.",
            "MIT",
            "CMU",
            Some(PreferenceLabel::NoPreference),
        ),
    ])
    .expect("fixture exemplars are valid")
}

fn ac1_golden_prompts() -> Check {
    let started = Instant::now();
    let fs = fixture_exemplars();
    let cases = [
        (
            "short_zero_shot.jsonl",
            PromptTemplate::short(PromptDomain::CollegeConfidential),
            false,
            "",
        ),
        (
            "long_zero_shot.jsonl",
            PromptTemplate::long(PromptDomain::CollegeConfidential),
            false,
            "",
        ),
        (
            "short_few_shot_retry.jsonl",
            PromptTemplate::short(PromptDomain::CollegeConfidential),
            true,
            "A is better than B in every way",
        ),
        (
            "long_few_shot_retry.jsonl",
            PromptTemplate::long(PromptDomain::CollegeConfidential),
            true,
            "... Therefore, I think A is preferred over B",
        ),
    ];
    for (file, template, few, bad) in &cases {
        let expected =
            std::fs::read_to_string(golden_dir().join(file)).map_err(|e| format!("{file}: {e}"))?;
        let mut conv =
            build_conversation(template, &college_task(), few.then_some(&fs)).map_err(|e| e.to_string())?;
        if !bad.is_empty() {
            conv = build_retry_conversation(&conv, bad, template).map_err(|e| e.to_string())?;
        }
        ensure!(
            conv.to_record_lines() == expected,
            "{file} differs from the rendered conversation"
        );
    }
    let elapsed = started.elapsed();
    ensure!(elapsed.as_secs_f64() < 1.0, "took {elapsed:?}");
    Ok(format!("{} fixtures byte-identical", cases.len()))
}

fn ac2_parser() -> Check {
    let t = PromptTemplate::short(PromptDomain::CollegeConfidential);
    let mut checked = 0;
    for label in PreferenceLabel::ALL {
        let p = label.canonical_phrase();
        let variants = [
            p.to_string(),
            format!("```{p}```"),
            format!("{p}."),
            p.to_lowercase(),
            p.to_uppercase(),
            format!("  ```{}```.\n", p.to_lowercase()),
        ];
        for v in &variants {
            ensure!(
                parse_response(v, &t) == ParseResult::Exact(label),
                "{v:?} did not parse as exact {label:?}"
            );
            checked += 1;
        }
    }
    let bad = "A is better than B in every way";
    ensure!(
        matches!(parse_response(bad, &t), ParseResult::Malformed(_)),
        "{bad:?} should be malformed"
    );
    let embedded = "... Therefore, I think A is preferred over B";
    ensure!(
        parse_response(embedded, &t) == ParseResult::Embedded(PreferenceLabel::APreferred),
        "{embedded:?} should be embedded A>B"
    );
    Ok(format!("{checked} variants exact, 2 failure strings classified"))
}

fn ac3_retry_state_machine() -> Check {
    let t = PromptTemplate::short(PromptDomain::CollegeConfidential);
    let inst = college_task();
    let classify = |script: Vec<&str>, fallback: Fallback| -> Result<(RunOutcome, ScriptedMock), String> {
        let mock = ScriptedMock::new(script);
        let policy = RetryPolicy {
            max_retries: 3,
            fallback,
        };
        let outcome = Classifier::new(&mock, t.clone())
            .with_policy(policy)
            .with_transient(TransientRetry::none())
            .classify_instance(&inst, None)
            .map_err(|e| e.to_string())?;
        Ok((outcome, mock))
    };

    let (o, mock) = classify(
        vec!["A is better than B in every way", "A is preferred over B"],
        Fallback::UseEmbeddedLabel,
    )?;
    ensure!(
        o.retry_count == 1,
        "retry_count {} after one malformed answer",
        o.retry_count
    );
    ensure!(
        o.predicted == Some(PreferenceLabel::APreferred),
        "predicted {:?}",
        o.predicted
    );
    ensure!(
        o.parse_status == ParseStatus::Exact,
        "status {:?}",
        o.parse_status
    );
    let second: Conversation = mock.recorded()[1].clone();
    ensure!(
        second.history().len() == 1 && second.final_user().content == t.retry_text,
        "retry turn does not carry the malformed answer and the reminder"
    );

    let exhausted = vec![
        "A is better than B in every way",
        "... Therefore, I think B is preferred over A",
        "I cannot say",
        "Still unsure",
    ];
    let (o, mock) = classify(exhausted.clone(), Fallback::UseEmbeddedLabel)?;
    ensure!(
        mock.calls() == 4,
        "expected max_retries + 1 = 4 calls, saw {}",
        mock.calls()
    );
    ensure!(
        o.predicted == Some(PreferenceLabel::BPreferred),
        "fallback predicted {:?}",
        o.predicted
    );
    ensure!(
        o.parse_status == ParseStatus::EmbeddedFallback,
        "status {:?}",
        o.parse_status
    );
    ensure!(o.retry_count == 3, "retry_count {}", o.retry_count);

    let (o, _) = classify(exhausted, Fallback::MarkUnparsable)?;
    ensure!(
        o.predicted.is_none(),
        "mark-unparsable predicted {:?}",
        o.predicted
    );
    ensure!(
        o.parse_status == ParseStatus::Unparsable,
        "status {:?}",
        o.parse_status
    );
    Ok("retry, embedded fallback and unparsable paths as expected".into())
}

/// Per-class precision and recall counted straight from the instance lists.
fn oracle_scores(
    golds: &[EvalClass],
    preds: &[Option<EvalClass>],
    policy: UnparsablePolicy,
) -> (f64, f64, [f64; 3]) {
    let harmonic = |p: f64, r: f64| if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let kept: Vec<(EvalClass, Option<EvalClass>)> = golds
        .iter()
        .zip(preds)
        .filter(|(_, p)| p.is_some() || policy == UnparsablePolicy::CountAsWrong)
        .map(|(g, p)| (*g, *p))
        .collect();
    let mut per_class = [0.0; 3];
    let (mut all_tp, mut all_predicted, mut all_gold) = (0, 0, 0);
    for class in EvalClass::ALL {
        let tp = kept
            .iter()
            .filter(|(g, p)| *g == class && *p == Some(class))
            .count();
        let predicted = kept.iter().filter(|(_, p)| *p == Some(class)).count();
        let gold = kept.iter().filter(|(g, _)| *g == class).count();
        per_class[class.index()] = harmonic(ratio(tp, predicted), ratio(tp, gold));
        all_tp += tp;
        all_predicted += predicted;
        all_gold += gold;
    }
    let micro = harmonic(ratio(all_tp, all_predicted), ratio(all_tp, all_gold));
    let macro_ = per_class.iter().sum::<f64>() / 3.0;
    (micro, macro_, per_class)
}

fn outcome(id: &str, predicted: Option<PreferenceLabel>) -> RunOutcome {
    let mut o = RunOutcome::failed(id, "placeholder");
    o.error = None;
    o.predicted = predicted;
    o.parse_status = if predicted.is_some() {
        ParseStatus::Exact
    } else {
        ParseStatus::Unparsable
    };
    o
}

fn raw_label_for(class: EvalClass, rng: &mut StdRng) -> PreferenceLabel {
    match class {
        EvalClass::APref => PreferenceLabel::APreferred,
        EvalClass::BPref => PreferenceLabel::BPreferred,
        EvalClass::NA if rng.random_bool(0.5) => PreferenceLabel::NoPreference,
        EvalClass::NA => PreferenceLabel::EqualPreference,
    }
}

fn ac4_metric_oracle() -> Check {
    const TOL: f64 = 1e-12;
    for seed in 0..1000u64 {
        let mut rng = StdRng::seed_from_u64(seed);
        let n = rng.random_range(1..=50);
        let golds: Vec<EvalClass> = (0..n).map(|_| EvalClass::ALL[rng.random_range(0..3)]).collect();
        let preds: Vec<Option<EvalClass>> = (0..n)
            .map(|_| (!rng.random_bool(0.1)).then(|| EvalClass::ALL[rng.random_range(0..3)]))
            .collect();
        let outcomes: Vec<RunOutcome> = preds
            .iter()
            .enumerate()
            .map(|(i, p)| outcome(&format!("{i}"), p.map(|c| raw_label_for(c, &mut rng))))
            .collect();
        let gold_map: BTreeMap<String, EvalClass> = golds
            .iter()
            .enumerate()
            .map(|(i, g)| (format!("{i}"), *g))
            .collect();
        for policy in [UnparsablePolicy::CountAsWrong, UnparsablePolicy::Exclude] {
            let report = compute_report(&outcomes, &gold_map, policy).map_err(|e| e.to_string())?;
            let (micro, macro_, per_class) = oracle_scores(&golds, &preds, policy);
            ensure!(
                (report.f1_micro - micro).abs() <= TOL,
                "seed {seed} {policy:?}: micro {} vs {micro}",
                report.f1_micro
            );
            ensure!(
                (report.f1_macro - macro_).abs() <= TOL,
                "seed {seed} {policy:?}: macro {} vs {macro_}",
                report.f1_macro
            );
            for class in EvalClass::ALL {
                let got = report.class_f1(class);
                let want = per_class[class.index()];
                ensure!(
                    (got - want).abs() <= TOL,
                    "seed {seed} {policy:?} {class:?}: {got} vs {want}"
                );
            }
        }
    }

    use EvalClass::*;
    let golds = [APref, BPref, NA, NA];
    let raw = [
        PreferenceLabel::APreferred,
        PreferenceLabel::NoPreference,
        PreferenceLabel::EqualPreference,
        PreferenceLabel::BPreferred,
    ];
    let preds: Vec<Option<EvalClass>> = raw.iter().map(|l| Some(l.to_eval_class())).collect();
    let (oracle_micro, oracle_macro, _) = oracle_scores(&golds, &preds, UnparsablePolicy::CountAsWrong);
    ensure!(
        oracle_micro == 0.5 && oracle_macro == 0.5,
        "oracle disagrees on the worked example"
    );
    let outcomes: Vec<RunOutcome> = raw
        .iter()
        .enumerate()
        .map(|(i, l)| outcome(&i.to_string(), Some(*l)))
        .collect();
    let gold_map = golds
        .iter()
        .enumerate()
        .map(|(i, g)| (i.to_string(), *g))
        .collect();
    let report =
        compute_report(&outcomes, &gold_map, UnparsablePolicy::CountAsWrong).map_err(|e| e.to_string())?;
    ensure!(
        report.f1_macro == 0.5 && report.f1_micro == 0.5,
        "worked example gave {report:?}"
    );
    Ok("1000 seeds x 2 policies agree within 1e-12; worked example macro 0.5 micro 0.5".into())
}

struct Distribution {
    tag: &'static str,
    a_pref: usize,
    b_pref: usize,
    na: usize,
    avg_tokens: f64,
}

const REFERENCE: [Distribution; 2] = [
    Distribution {
        tag: COLLEGE_CONFIDENTIAL,
        a_pref: 598,
        b_pref: 544,
        na: 1822,
        avg_tokens: 116.12,
    },
    Distribution {
        tag: COMPSENT19,
        a_pref: 1364,
        b_pref: 593,
        na: 5242,
        avg_tokens: 26.94,
    },
];

fn synthetic_corpus(d: &Distribution) -> Dataset {
    let four_labels = d.tag != COMPSENT19;
    let mut instances = Vec::new();
    let mut push = |label: PreferenceLabel| {
        let i = instances.len();
        instances.push(ComparisonInstance::new(
            format!("{}-{i:05}", d.tag),
            format!("synthetic comment {i} comparing the two alternatives"),
            "A",
            "B",
            Some(label),
        ));
    };
    (0..d.a_pref).for_each(|_| push(PreferenceLabel::APreferred));
    (0..d.b_pref).for_each(|_| push(PreferenceLabel::BPreferred));
    for i in 0..d.na {
        push(if four_labels && i % 9 == 0 {
            PreferenceLabel::EqualPreference
        } else {
            PreferenceLabel::NoPreference
        });
    }
    Dataset::new(d.tag, instances).expect("synthetic corpus is valid")
}

fn check_counts(dataset: &Dataset, d: &Distribution) -> Result<f64, String> {
    let stats = dataset_stats(dataset, &CharsPerToken::default());
    let got = (
        stats.count(EvalClass::APref),
        stats.count(EvalClass::BPref),
        stats.count(EvalClass::NA),
    );
    let want = (d.a_pref, d.b_pref, d.na);
    ensure!(got == want, "{}: counts {got:?}, expected {want:?}", d.tag);
    ensure!(
        stats.total == d.a_pref + d.b_pref + d.na,
        "{}: total {}",
        d.tag,
        stats.total
    );
    Ok(stats.avg_token_length)
}

fn find_corpus(dir: &Path, tag: &str) -> Option<PathBuf> {
    ["jsonl", "csv", "tsv"]
        .iter()
        .map(|ext| dir.join(format!("{tag}.{ext}")))
        .find(|p| p.exists())
}

/// Counts are checked on synthetic corpora built to the reference
/// distributions. The original corpora are only checked (counts and average
/// token length) when `CPC_CORPUS_DIR` points at them.
fn ac5_dataset_stats() -> Verdict {
    let mut notes = Vec::new();
    for d in &REFERENCE {
        if let Err(e) = check_counts(&synthetic_corpus(d), d) {
            return Verdict::Fail(format!("synthetic {e}"));
        }
    }
    notes.push("synthetic counts 2964 / 7199 exact".to_string());

    let Some(dir) = std::env::var_os("CPC_CORPUS_DIR").map(PathBuf::from) else {
        return Verdict::Pass(format!(
            "{}; token-length check on the original corpora skipped (set CPC_CORPUS_DIR)",
            notes.join("; ")
        ));
    };
    for d in &REFERENCE {
        let Some(path) = find_corpus(&dir, d.tag) else {
            return Verdict::Fail(format!("{} not found in {}", d.tag, dir.display()));
        };
        let dataset = match load_dataset(&path, DatasetFormat::from_path(&path), d.tag) {
            Ok(ds) => ds,
            Err(e) => return Verdict::Fail(format!("{}: {e}", path.display())),
        };
        match check_counts(&dataset, d) {
            Ok(avg) => {
                let rel = (avg - d.avg_tokens).abs() / d.avg_tokens;
                if rel > 0.15 {
                    return Verdict::Fail(format!(
                        "{}: avg tokens {avg:.2} vs {} ({:.1}% off)",
                        d.tag,
                        d.avg_tokens,
                        rel * 100.0
                    ));
                }
                notes.push(format!("{} avg tokens {avg:.2}", d.tag));
            }
            Err(e) => return Verdict::Fail(e),
        }
    }
    Verdict::Pass(notes.join("; "))
}

fn ac6_cost_model() -> Check {
    let usage = Usage::reported(1000, 500);
    let gpt4 = estimate_cost(&usage, &Pricing::GPT4);
    ensure!(
        format!("{gpt4:.4}") == "0.0600" && (gpt4 - 0.06).abs() < 1e-12,
        "GPT-4 cost {gpt4}"
    );
    let llama = estimate_cost(&usage, &Pricing::LLAMA2_70B);
    ensure!(llama == 0.0, "LLaMa cost {llama}");
    let turbo = estimate_cost(&usage, &Pricing::GPT35_TURBO);
    ensure!((turbo - 0.0025).abs() < 1e-12, "GPT-3.5 cost {turbo}");
    let big = estimate_cost(&Usage::reported(10_000_000, 1_000_000), &Pricing::LLAMA2_70B);
    ensure!(big == 0.0, "LLaMa cost at scale {big}");
    Ok(format!(
        "GPT-4 ${gpt4:.4}, GPT-3.5 ${turbo:.4}, LLaMa ${llama:.2}"
    ))
}

/// Deterministic synthetic run: every instance text carries a unique tag the
/// keyed mock scripts against.
fn scripted_corpus(n: usize) -> (Dataset, KeyedMock) {
    let mut mock = KeyedMock::new().with_model_name("scripted");
    let mut instances = Vec::with_capacity(n);
    for i in 0..n {
        let key = format!("[item {i:05}]");
        let gold = [
            PreferenceLabel::APreferred,
            PreferenceLabel::BPreferred,
            PreferenceLabel::NoPreference,
            PreferenceLabel::EqualPreference,
        ][i % 4];
        let responses: Vec<&str> = match i % 5 {
            0 => vec!["A is preferred over B"],
            1 => vec!["```B is preferred over A```."],
            2 => vec!["A is better than B in every way", "No preference"],
            3 => vec!["hmm", "I think B is preferred over A", "no idea", "still no idea"],
            _ => vec!["Equal preference"],
        };
        mock.insert_script(key.clone(), responses);
        instances.push(ComparisonInstance::new(
            format!("s{i:05}"),
            format!("{key} forum comment weighing the first option against the second"),
            format!("Alpha {i}"),
            format!("Beta {i}"),
            Some(gold),
        ));
    }
    (Dataset::new("synthetic", instances).expect("valid"), mock)
}

fn outcomes_bytes(outcomes: &[RunOutcome]) -> Vec<u8> {
    let mut out = Vec::new();
    for o in outcomes {
        serde_json::to_writer(&mut out, o).expect("serializable");
        out.push(b'\n');
    }
    out
}

/// Sets a cancel flag once a given number of calls has been made.
struct Interrupting<'a> {
    inner: &'a KeyedMock,
    after: usize,
    seen: AtomicUsize,
    flag: Arc<AtomicBool>,
}

impl ChatBackend for Interrupting<'_> {
    fn complete(
        &self,
        conv: &Conversation,
        params: &SamplingParams,
    ) -> Result<CompletionResult, BackendError> {
        if self.seen.fetch_add(1, Ordering::SeqCst) + 1 >= self.after {
            self.flag.store(true, Ordering::SeqCst);
        }
        self.inner.complete(conv, params)
    }

    fn model_name(&self) -> &str {
        self.inner.model_name()
    }

    fn pricing(&self) -> Pricing {
        self.inner.pricing()
    }
}

fn ac7_determinism_and_cache() -> Check {
    let started = Instant::now();
    let n = 600;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let template = PromptTemplate::short(PromptDomain::Generic);
    let opts = BatchOptions {
        concurrency_limit: 8,
        ..Default::default()
    };
    let err = |e: cpc_core::pipeline::PipelineError| e.to_string();

    let (dataset, mock) = scripted_corpus(n);
    let classifier = Classifier::new(&mock, template.clone()).with_transient(TransientRetry::none());
    let cache_path = dir.path().join("full.jsonl");
    let first = {
        let cache = OutcomeCache::open(&cache_path).map_err(|e| e.to_string())?;
        run_batch(&classifier, &dataset, Shots::Zero, Some(&cache), &opts).map_err(err)?
    };
    let first_calls = mock.calls();
    ensure!(
        first.failures.is_empty(),
        "first run had failures: {:?}",
        first.failures
    );
    let cache = OutcomeCache::open(&cache_path).map_err(|e| e.to_string())?;
    let second = run_batch(&classifier, &dataset, Shots::Zero, Some(&cache), &opts).map_err(err)?;
    ensure!(
        mock.calls() == first_calls,
        "second run made {} backend calls",
        mock.calls() - first_calls
    );
    ensure!(
        second.cache_hits == n,
        "second run cache hits {}",
        second.cache_hits
    );
    let reference = outcomes_bytes(&first.outcomes);
    ensure!(
        outcomes_bytes(&second.outcomes) == reference,
        "outcome files differ between runs"
    );

    let (dataset, mock) = scripted_corpus(n);
    let flag = Arc::new(AtomicBool::new(false));
    let interrupting = Interrupting {
        inner: &mock,
        after: first_calls / 3,
        seen: AtomicUsize::new(0),
        flag: flag.clone(),
    };
    let resume_path = dir.path().join("resume.jsonl");
    let interrupted = {
        let classifier =
            Classifier::new(&interrupting, template.clone()).with_transient(TransientRetry::none());
        let cache = OutcomeCache::open(&resume_path).map_err(|e| e.to_string())?;
        let opts = BatchOptions {
            cancel: Some(flag),
            ..opts.clone()
        };
        run_batch(&classifier, &dataset, Shots::Zero, Some(&cache), &opts).map_err(err)?
    };
    let completed = n - interrupted.failures.len();
    ensure!(
        !interrupted.failures.is_empty() && completed > 0,
        "interruption did not split the run"
    );
    let classifier = Classifier::new(&mock, template).with_transient(TransientRetry::none());
    let cache = OutcomeCache::open(&resume_path).map_err(|e| e.to_string())?;
    let resumed = run_batch(&classifier, &dataset, Shots::Zero, Some(&cache), &opts).map_err(err)?;
    ensure!(
        resumed.cache_hits == completed,
        "resume reused {} of {completed} outcomes",
        resumed.cache_hits
    );
    ensure!(
        mock.calls() == first_calls,
        "interrupted + resumed runs made {} calls, an uninterrupted run makes {first_calls}",
        mock.calls()
    );
    ensure!(
        outcomes_bytes(&resumed.outcomes) == reference,
        "resumed outcomes differ from an uninterrupted run"
    );

    let elapsed = started.elapsed();
    ensure!(elapsed.as_secs_f64() < 30.0, "took {elapsed:?}");
    Ok(format!(
        "{n} instances, {first_calls} calls then 0; resume after {completed} reused them all"
    ))
}

fn ac8_end_to_end() -> Check {
    use PreferenceLabel::*;
    // (gold, responses) per instance; planted errors are noted inline.
    let plan: Vec<(PreferenceLabel, Vec<&str>)> = vec![
        (APreferred, vec!["A is preferred over B"]),
        (APreferred, vec!["```A is preferred over B```"]),
        (APreferred, vec!["a is preferred over b."]),
        (APreferred, vec!["A is preferred over B"]),
        (APreferred, vec!["A is preferred over B"]),
        // recovered after one retry
        (
            APreferred,
            vec!["A is better than B in every way", "A is preferred over B"],
        ),
        // wrong class
        (APreferred, vec!["B is preferred over A"]),
        // never well-formed, nothing embedded
        (
            APreferred,
            vec!["I like both", "Hard to say", "Cannot decide", "No comment"],
        ),
        (BPreferred, vec!["B is preferred over A"]),
        (BPreferred, vec!["B is preferred over A"]),
        (BPreferred, vec!["```B is preferred over A```"]),
        (BPreferred, vec!["B is preferred over A."]),
        // wrong class
        (BPreferred, vec!["No preference"]),
        // embedded fallback picks the wrong class
        (
            BPreferred,
            vec!["Clearly A is preferred over B here", "unsure", "unsure", "unsure"],
        ),
        (NoPreference, vec!["No preference"]),
        (NoPreference, vec!["No preference"]),
        (NoPreference, vec!["No preference"]),
        // different raw label, same evaluation class
        (NoPreference, vec!["Equal preference"]),
        (EqualPreference, vec!["Equal preference"]),
        // wrong class
        (EqualPreference, vec!["A is preferred over B"]),
    ];
    let mut mock = KeyedMock::new();
    let mut instances = Vec::new();
    for (i, (gold, responses)) in plan.iter().enumerate() {
        let key = format!("<post {i:02}>");
        mock.insert_script(key.clone(), responses.iter().copied());
        instances.push(ComparisonInstance::new(
            format!("e{i:02}"),
            format!("{key} text"),
            "First",
            "Second",
            Some(*gold),
        ));
    }
    let dataset = Dataset::new("end-to-end", instances).map_err(|e| e.to_string())?;
    let classifier = Classifier::new(&mock, PromptTemplate::short(PromptDomain::Generic))
        .with_policy(RetryPolicy::default())
        .with_transient(TransientRetry::none());
    let opts = BatchOptions {
        execution: Execution::Sequential,
        ..Default::default()
    };
    let result = run_batch(&classifier, &dataset, Shots::Zero, None, &opts).map_err(|e| e.to_string())?;
    ensure!(result.failures.is_empty(), "failures {:?}", result.failures);
    let expected_calls: usize = 20 + 1 + 3 + 3;
    ensure!(
        mock.calls() == expected_calls,
        "{} backend calls, expected {expected_calls}",
        mock.calls()
    );
    ensure!(
        result.outcomes[13].parse_status == ParseStatus::EmbeddedFallback,
        "instance e13 status {:?}",
        result.outcomes[13].parse_status
    );

    let report = compute_report(&result.outcomes, &dataset.golds(), UnparsablePolicy::CountAsWrong)
        .map_err(|e| e.to_string())?;
    let want = ConfusionMatrix {
        counts: [[6, 1, 0], [1, 4, 1], [1, 0, 5]],
        unparsable: [1, 0, 0],
    };
    ensure!(report.confusion == want, "confusion {:?}", report.confusion);
    ensure!(
        report.n_scored == 19 && report.n_unparsable == 1,
        "scored {} unparsable {}",
        report.n_scored,
        report.n_unparsable
    );
    // A>B: tp 6 fp 2 fn 2; A<B: tp 4 fp 1 fn 2; N/A: tp 5 fp 1 fn 1.
    let expected = [
        (EvalClass::APref, 12.0 / 16.0),
        (EvalClass::BPref, 8.0 / 11.0),
        (EvalClass::NA, 10.0 / 12.0),
    ];
    for (class, f1) in expected {
        ensure!(
            (report.class_f1(class) - f1).abs() < 1e-12,
            "{class:?} F1 {} vs {f1}",
            report.class_f1(class)
        );
    }
    ensure!(
        (report.f1_micro - 30.0 / 39.0).abs() < 1e-12,
        "micro {}",
        report.f1_micro
    );
    ensure!(
        (report.f1_macro - 305.0 / 396.0).abs() < 1e-12,
        "macro {}",
        report.f1_macro
    );
    Ok(format!(
        "micro {:.4}, macro {:.4}, 1 unparsable",
        report.f1_micro, report.f1_macro
    ))
}

/// Needs `CPC_LIVE_ENDPOINT`, `CPC_LIVE_MODEL` and `CPC_LIVE_DATASET`; the
/// key is read from the variable named by `CPC_LIVE_API_KEY_ENV`
/// (default `OPENAI_API_KEY`).
fn ac9_live_smoke() -> Verdict {
    let vars = ["CPC_LIVE_ENDPOINT", "CPC_LIVE_MODEL", "CPC_LIVE_DATASET"].map(std::env::var);
    let [Ok(endpoint), Ok(model), Ok(dataset_path)] = vars else {
        return Verdict::Skip("set CPC_LIVE_ENDPOINT, CPC_LIVE_MODEL and CPC_LIVE_DATASET to run".into());
    };
    let tag = std::env::var("CPC_LIVE_TAG").unwrap_or_else(|_| COLLEGE_CONFIDENTIAL.to_string());
    let run = || -> Check {
        let mut cfg = BackendConfig::remote(endpoint, model);
        cfg.api_key_env =
            Some(std::env::var("CPC_LIVE_API_KEY_ENV").unwrap_or_else(|_| "OPENAI_API_KEY".into()));
        let backend = ChatApiBackend::from_config(&cfg).map_err(|e| e.to_string())?;
        let path = PathBuf::from(dataset_path);
        let full = load_dataset(&path, DatasetFormat::from_path(&path), &tag).map_err(|e| e.to_string())?;
        let fewshot = select_fewshot_examples(&full, DEFAULT_WORD_THRESHOLD).map_err(|e| e.to_string())?;
        let mut keep: Vec<ComparisonInstance> = fewshot.iter().map(|(_, i)| i.clone()).collect();
        let exemplar_ids = fewshot.ids();
        keep.extend(
            full.instances()
                .iter()
                .filter(|i| !exemplar_ids.contains(&i.id.as_str()))
                .take(30)
                .cloned(),
        );
        let sample = Dataset::new(tag.clone(), keep).map_err(|e| e.to_string())?;
        let classifier = Classifier::new(
            &backend,
            PromptTemplate::for_dataset(cpc_core::prompting::PromptStyle::Short, &tag),
        );
        let result = run_batch(
            &classifier,
            &sample,
            Shots::Few(&fewshot),
            None,
            &BatchOptions::default(),
        )
        .map_err(|e| e.to_string())?;
        ensure!(
            result.failures.is_empty(),
            "{} backend failures",
            result.failures.len()
        );
        let report = compute_report(&result.outcomes, &sample.golds(), UnparsablePolicy::CountAsWrong)
            .map_err(|e| e.to_string())?;
        ensure!(
            report.n_unparsable == 0,
            "{} unparsable responses",
            report.n_unparsable
        );
        Ok(format!(
            "{} instances, micro {:.4}, macro {:.4}",
            report.n_scored, report.f1_micro, report.f1_macro
        ))
    };
    match run() {
        Ok(s) => Verdict::Pass(s),
        Err(s) => Verdict::Fail(s),
    }
}
