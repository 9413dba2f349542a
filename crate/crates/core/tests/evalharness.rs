mod common;

use granary::dataset::render_assistant;
use granary::distiller::{BackendError, ChatRequest, MockBackend, RetryPolicy, Role};
use granary::evalharness::{
    extract_answer, grade, load_quiz, render_eval_prompt, BackendResponder, EvalError, McqItem, ModelResponder,
    EVAL_SYSTEM_PROMPT,
};
use granary::tinylm::{ModelConfig, Parameters};
use proptest::prelude::*;

use common::fixtures;

fn quiz() -> Vec<McqItem> {
    load_quiz(&fixtures().join("quiz.jsonl")).unwrap()
}

/// Correct letter for every item except the Thevenin one.
fn scripted(req: &ChatRequest) -> Result<String, BackendError> {
    let user = req.last_user().unwrap();
    let letter = if user.contains("Kirchhoff") {
        "B"
    } else if user.contains("Thevenin") {
        "A"
    } else if user.contains("common-source") {
        "C"
    } else {
        "B"
    };
    Ok(format!("<think>working</think>\nSo the choice follows.\n<answer>{letter}</answer>"))
}

#[test]
fn fixture_quiz_includes_the_noise_item() {
    let items = quiz();
    assert_eq!(items.len(), 4);
    let noise = items.iter().find(|i| i.item_id == "opamp-noise-1").unwrap();
    assert!(noise.stem.contains("(g_m3/g_m1)^2"));
    assert_eq!(noise.correct, "B");
    assert!(noise.options["B"].contains("(g_m3/g_m1)^2"));
}

#[test]
fn prompt_is_deterministic_at_temperature_zero() {
    for item in quiz() {
        let req = render_eval_prompt(&item);
        assert_eq!(req.temperature, 0.0);
        assert_eq!(req.messages[0].role, Role::System);
        assert_eq!(req.messages[0].content, EVAL_SYSTEM_PROMPT);
        assert!(EVAL_SYSTEM_PROMPT.contains("<answer>"));
        let user = req.last_user().unwrap();
        let mut last = 0;
        for (letter, text) in &item.options {
            let line = format!("{letter}) {text}");
            assert_eq!(user.matches(&line).count(), 1);
            let at = user.find(&line).unwrap();
            assert!(at >= last);
            last = at;
        }
        assert_eq!(render_eval_prompt(&item), req);
    }
}

#[test]
fn scripted_responder_scores_three_of_four() {
    let report = grade(&quiz(), &scripted, 2).unwrap();
    assert_eq!(report.accuracy, 0.75);
    assert_eq!(report.counts.items, 4);
    assert_eq!(report.counts.correct, 3);
    assert_eq!(report.counts.unparsable, 0);
    let wrong: Vec<&str> = report
        .per_item
        .iter()
        .filter(|r| !r.correct)
        .map(|r| r.item_id.as_str())
        .collect();
    assert_eq!(wrong, ["thevenin-1"]);

    let mut reversed = quiz();
    reversed.reverse();
    assert_eq!(grade(&reversed, &scripted, 1).unwrap().accuracy, 0.75);
}

#[test]
fn letterless_responses_are_all_unparsable() {
    let silent = |_: &ChatRequest| Ok::<_, BackendError>("I would rather not say.".to_string());
    let report = grade(&quiz(), &silent, 4).unwrap();
    assert_eq!(report.accuracy, 0.0);
    assert_eq!(report.counts.unparsable, 4);
    assert_eq!(report.counts.answered, 0);
}

#[test]
fn backend_errors_count_as_unparsable() {
    let failing = |_: &ChatRequest| Err::<String, _>(BackendError::Permanent("down".into()));
    let report = grade(&quiz(), &failing, 2).unwrap();
    assert_eq!(report.counts.unparsable, 4);
    assert!(matches!(grade(&[], &failing, 2), Err(EvalError::NoItems)));
}

#[test]
fn mock_backend_and_tiny_model_are_gradable() {
    let mock = MockBackend::new(7);
    let responder = BackendResponder {
        backend: &mock,
        retry: RetryPolicy::no_wait(2),
    };
    let a = grade(&quiz(), &responder, 2).unwrap();
    let b = grade(&quiz(), &responder, 1).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.counts.unparsable, 0);

    let params = Parameters::init(&ModelConfig::default()).unwrap();
    let model = ModelResponder {
        params: &params,
        max_new_tokens: 8,
    };
    let r = grade(&quiz(), &model, 1).unwrap();
    assert_eq!(r.counts.items, 4);
    assert_eq!(r.accuracy, r.counts.correct as f64 / 4.0);
}

#[test]
fn extraction_examples() {
    assert_eq!(extract_answer("…reasoning…<answer>C</answer>").as_deref(), Some("C"));
    assert_eq!(extract_answer("The answer is B.").as_deref(), Some("B"));
    assert_eq!(extract_answer("no letter here"), None);
    assert_eq!(extract_answer("<answer>A</answer> then <answer>D</answer>").as_deref(), Some("D"));
    assert_eq!(extract_answer("<answer> (B) </answer>").as_deref(), Some("B"));
    assert_eq!(extract_answer("Answer: C\nanswer: A").as_deref(), Some("A"));
}

proptest! {
    #[test]
    fn rendered_assistant_answers_round_trip(
        t in "[a-z <>/]{0,30}",
        s in "[a-z .]{0,30}",
        a in "[A-Z]",
    ) {
        prop_assert_eq!(extract_answer(&render_assistant(&t, &s, &a)), Some(a));
    }
}

#[test]
fn invalid_quiz_items_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("quiz.jsonl");
    std::fs::write(
        &p,
        r#"{"item_id": "x", "stem": "?", "options": {"A": "a", "B": "b"}, "correct": "C"}"#.to_string() + "\n",
    )
    .unwrap();
    assert!(matches!(load_quiz(&p), Err(EvalError::InvalidItem { .. })));
}
