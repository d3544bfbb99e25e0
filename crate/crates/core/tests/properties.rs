use std::collections::BTreeMap;

use proptest::prelude::*;
use proptest::sample::select;

use cpc_core::backend::{CharsPerToken, ScriptedMock};
use cpc_core::corpus::{dataset_stats, select_fewshot_examples, split_eval_set, ComparisonInstance, Dataset};
use cpc_core::eval::{compute_report, UnparsablePolicy};
use cpc_core::pipeline::{Classifier, Fallback, ParseStatus, RetryPolicy, RunOutcome, TransientRetry};
use cpc_core::prompting::{parse_response, Conversation, ParseResult, PromptDomain, PromptTemplate};
use cpc_core::{EvalClass, PreferenceLabel};

fn any_label() -> impl Strategy<Value = PreferenceLabel> {
    select(PreferenceLabel::ALL.to_vec())
}

fn outcome(id: usize, predicted: Option<PreferenceLabel>) -> RunOutcome {
    let mut o = RunOutcome::failed(id.to_string(), "unused");
    o.error = None;
    o.predicted = predicted;
    o.parse_status = if predicted.is_some() {
        ParseStatus::Exact
    } else {
        ParseStatus::Unparsable
    };
    o
}

fn class_label(c: EvalClass) -> PreferenceLabel {
    match c {
        EvalClass::APref => PreferenceLabel::APreferred,
        EvalClass::BPref => PreferenceLabel::BPreferred,
        EvalClass::NA => PreferenceLabel::NoPreference,
    }
}

/// (gold, prediction) pairs; `None` is an unparsable outcome.
fn scored_pairs(max: usize) -> impl Strategy<Value = Vec<(EvalClass, Option<EvalClass>)>> {
    let class = || select(EvalClass::ALL.to_vec());
    prop::collection::vec((class(), prop::option::weighted(0.9, class())), 1..max)
}

fn report_inputs(pairs: &[(EvalClass, Option<EvalClass>)]) -> (Vec<RunOutcome>, BTreeMap<String, EvalClass>) {
    let outcomes = pairs
        .iter()
        .enumerate()
        .map(|(i, (_, p))| outcome(i, p.map(class_label)))
        .collect();
    let golds = pairs
        .iter()
        .enumerate()
        .map(|(i, (g, _))| (i.to_string(), *g))
        .collect();
    (outcomes, golds)
}

fn dataset(labels: &[(PreferenceLabel, usize)], prefix: &str) -> Dataset {
    let instances = labels
        .iter()
        .enumerate()
        .map(|(i, (label, words))| {
            let text = (0..*words).map(|w| format!("w{w}")).collect::<Vec<_>>().join(" ");
            ComparisonInstance::new(format!("{prefix}{i}"), text, "A", "B", Some(*label))
        })
        .collect();
    Dataset::new("props", instances).unwrap()
}

proptest! {
    #[test]
    fn canonical_phrases_parse_exactly_under_surface_noise(
        label in any_label(),
        lead in "[ \t\n]{0,3}",
        trail in "[ \t\n]{0,3}",
        punct in select(vec!["", ".", "!", "?"]),
        wrap in select(vec!["", "```", "\"", "'"]),
        upper in any::<bool>(),
    ) {
        let phrase = if upper { label.canonical_phrase().to_uppercase() } else { label.canonical_phrase().to_lowercase() };
        let raw = format!("{lead}{wrap}{phrase}{wrap}{punct}{trail}");
        let t = PromptTemplate::short(PromptDomain::CollegeConfidential);
        prop_assert_eq!(parse_response(&raw, &t), ParseResult::Exact(label));
    }

    #[test]
    fn one_phrase_inside_chatter_is_embedded(label in any_label(), before in "[xyz ]{1,20}", after in "[xyz ]{1,20}") {
        let raw = format!("Well {before}, {} {after} overall", label.canonical_phrase());
        let t = PromptTemplate::long(PromptDomain::Generic);
        prop_assert_eq!(parse_response(&raw, &t), ParseResult::Embedded(label));
    }

    #[test]
    fn report_ignores_outcome_order(pairs in scored_pairs(50), seed in any::<u64>()) {
        let (mut outcomes, golds) = report_inputs(&pairs);
        let before = compute_report(&outcomes, &golds, UnparsablePolicy::CountAsWrong).unwrap();
        // Deterministic shuffle driven by the seed.
        let n = outcomes.len();
        let mut state = seed;
        for i in (1..n).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            outcomes.swap(i, (state >> 33) as usize % (i + 1));
        }
        let after = compute_report(&outcomes, &golds, UnparsablePolicy::CountAsWrong).unwrap();
        prop_assert_eq!(before, after);
    }

    #[test]
    fn consistent_relabeling_keeps_macro_and_micro(pairs in scored_pairs(50), perm in select(vec![
        [0usize, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0],
    ])) {
        let map = |c: EvalClass| EvalClass::ALL[perm[c.index()]];
        let relabeled: Vec<_> = pairs.iter().map(|(g, p)| (map(*g), p.map(map))).collect();
        for policy in [UnparsablePolicy::CountAsWrong, UnparsablePolicy::Exclude] {
            let (o1, g1) = report_inputs(&pairs);
            let (o2, g2) = report_inputs(&relabeled);
            let a = compute_report(&o1, &g1, policy).unwrap();
            let b = compute_report(&o2, &g2, policy).unwrap();
            prop_assert!((a.f1_macro - b.f1_macro).abs() < 1e-12);
            prop_assert!((a.f1_micro - b.f1_micro).abs() < 1e-12);
            for c in EvalClass::ALL {
                prop_assert!((a.class_f1(c) - b.class_f1(map(c))).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn micro_f1_is_accuracy_when_everything_parses(pairs in scored_pairs(60)) {
        let pairs: Vec<_> = pairs.into_iter().map(|(g, p)| (g, Some(p.unwrap_or(g)))).collect();
        let (outcomes, golds) = report_inputs(&pairs);
        let r = compute_report(&outcomes, &golds, UnparsablePolicy::Exclude).unwrap();
        let correct = pairs.iter().filter(|(g, p)| Some(*g) == *p).count();
        prop_assert_eq!(r.n_unparsable, 0);
        prop_assert!((r.f1_micro - correct as f64 / pairs.len() as f64).abs() < 1e-12);
    }

    #[test]
    fn unparsable_never_helps_under_count_as_wrong(pairs in scored_pairs(40)) {
        let (outcomes, golds) = report_inputs(&pairs);
        let wrong = compute_report(&outcomes, &golds, UnparsablePolicy::CountAsWrong).unwrap();
        let excl = compute_report(&outcomes, &golds, UnparsablePolicy::Exclude).unwrap();
        prop_assert!(wrong.f1_micro <= excl.f1_micro + 1e-12);
        prop_assert_eq!(wrong.confusion.total() as usize, pairs.len());
    }

    #[test]
    fn stats_of_a_concatenation_combine(
        left in prop::collection::vec((any_label(), 1usize..40), 0..30),
        right in prop::collection::vec((any_label(), 1usize..40), 0..30),
    ) {
        let est = CharsPerToken::default();
        let a = dataset_stats(&dataset(&left, "l"), &est);
        let b = dataset_stats(&dataset(&right, "r"), &est);
        let mut joined = dataset(&left, "l").instances().to_vec();
        joined.extend(dataset(&right, "r").instances().iter().cloned());
        let ab = dataset_stats(&Dataset::new("props", joined).unwrap(), &est);
        for c in EvalClass::ALL {
            prop_assert_eq!(ab.count(c), a.count(c) + b.count(c));
        }
        prop_assert_eq!(ab.total, a.total + b.total);
        let weighted = a.avg_token_length * left.len() as f64 + b.avg_token_length * right.len() as f64;
        prop_assert!((ab.avg_token_length * (left.len() + right.len()) as f64 - weighted).abs() < 1e-6);
    }

    #[test]
    fn split_removes_exactly_the_exemplars(labels in prop::collection::vec((any_label(), 1usize..150), 4..60)) {
        let mut labels = labels;
        // Guarantee every label is present.
        for (i, l) in PreferenceLabel::ALL.into_iter().enumerate() {
            labels[i].0 = l;
        }
        let d = dataset(&labels, "i");
        let fs = select_fewshot_examples(&d, 100).unwrap();
        prop_assert_eq!(fs.len(), 4);
        let eval = split_eval_set(&d, &fs).unwrap();
        prop_assert_eq!(eval.len(), d.len() - fs.len());
        for id in fs.ids() {
            prop_assert!(eval.get(id).is_none());
        }
    }

    #[test]
    fn each_retry_adds_one_turn(malformed in 0usize..6, max_retries in 0u32..5) {
        let mut script: Vec<String> = (0..malformed).map(|i| format!("rambling {i}")).collect();
        script.push("B is preferred over A".into());
        let mock = ScriptedMock::new(script);
        let inst = ComparisonInstance::new("x", "some comment", "P", "Q", None);
        let policy = RetryPolicy { max_retries, fallback: Fallback::MarkUnparsable };
        let o = Classifier::new(&mock, PromptTemplate::short(PromptDomain::Generic))
            .with_policy(policy)
            .with_transient(TransientRetry::none())
            .classify_instance(&inst, None)
            .unwrap();
        let expected_calls = malformed.min(max_retries as usize) + 1;
        prop_assert_eq!(mock.calls(), expected_calls);
        for (i, conv) in mock.recorded().iter().enumerate() {
            prop_assert_eq!(conv.history().len(), i);
        }
        prop_assert_eq!(o.retry_count as usize, expected_calls - 1);
        if malformed <= max_retries as usize {
            prop_assert_eq!(o.predicted, Some(PreferenceLabel::BPreferred));
        } else {
            prop_assert_eq!(o.parse_status, ParseStatus::Unparsable);
        }
    }

    #[test]
    fn record_lines_round_trip(system in ".{1,40}", turns in prop::collection::vec((".{1,30}", ".{1,30}"), 0..4), last in ".{1,40}") {
        prop_assume!(!system.trim().is_empty() && !last.trim().is_empty());
        prop_assume!(turns.iter().all(|(u, a)| !u.trim().is_empty() && !a.trim().is_empty()));
        let mut conv = Conversation::new(system, last).unwrap();
        for (u, a) in turns {
            conv.push_turn(u, a).unwrap();
        }
        let back = Conversation::from_record_lines(&conv.to_record_lines()).unwrap();
        prop_assert_eq!(back.digest(), conv.digest());
        prop_assert_eq!(back, conv);
    }
}
