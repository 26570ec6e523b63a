mod common;

use std::fs;
use std::path::Path;

use adaptkit::evalmc::*;
use adaptkit::model::{init_params, Proj, TinyLM};
use adaptkit::synth::{fixture_tokenizer, mcq_suite};
use adaptkit::tensor::{DType, Tensor};
use common::*;

fn fixture(name: &str) -> String {
    fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)).unwrap()
}

fn capital() -> McqItem {
    McqItem {
        question: "What is the capital of France?".into(),
        options: ["Berlin", "Madrid", "Paris", "Rome"].map(String::from),
        answer: 2,
        subject: None,
        id: None,
    }
}

#[test]
fn raw_prompt_goldens() {
    let raw = PromptTemplate::default();
    let text = render(&build_prompt(&capital(), &raw));
    assert_eq!(text.as_bytes(), fixture("prompt_raw_capital.txt").as_bytes());
    assert!(text.ends_with("Answer:"));

    let color = McqItem {
        question: "what color is ba ?".into(),
        options: ["red", "blue", "green", "black"].map(String::from),
        answer: 0,
        subject: None,
        id: None,
    };
    assert_eq!(render(&build_prompt(&color, &raw)), fixture("prompt_raw_color.txt"));

    let localized = PromptTemplate {
        question_label: "Вопрос".into(),
        answer_label: "Ответ".into(),
        letters: ["А", "Б", "В", "Г"].map(String::from),
        ..PromptTemplate::default()
    };
    let item = McqItem {
        question: "2 + 2 = ?".into(),
        options: ["3", "4", "5", "22"].map(String::from),
        answer: 1,
        subject: None,
        id: None,
    };
    assert_eq!(
        render(&build_prompt(&item, &localized)),
        fixture("prompt_raw_labels.txt")
    );
}

#[test]
fn chat_prompt_golden() {
    let chat = PromptTemplate {
        format: PromptFormat::Chat,
        ..PromptTemplate::default()
    };
    assert_eq!(
        render(&build_prompt(&capital(), &chat)),
        fixture("prompt_chat_capital.txt")
    );
}

#[test]
fn harness_matches_brute_force_oracle() {
    let items = mcq_suite(50, 17);
    let (tuned, tok) = tuned_model(&items, 60, 1e-2, 5);
    let tok_cfg = tuned.config().clone();
    let random = scaled_model(&tok_cfg, 4, 0.1, DType::F32);
    for model in [&tuned, &random] {
        let report = evaluate(model, &items, &PromptTemplate::default(), &tok, &EvalOptions::default()).unwrap();
        assert_eq!(report.total, 50);
        for (rec, item) in report.items.iter().zip(&items) {
            let (pred, probs) = brute_force_mcq(model, &tok, item);
            assert_eq!(rec.predicted, ["A", "B", "C", "D"][pred], "item {}", rec.index);
            assert!((rec.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            // The oracle reads logits rounded to the model's F32 output.
            for (a, b) in rec.probs.iter().zip(&probs) {
                assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
            }
        }
    }
}

/// Projections zeroed, every embedding along one axis, and a head whose only
/// non-zero row belongs to `token`: the top prediction is always `token`.
fn always_emits(token: u32, vocab: usize) -> TinyLM {
    let mut cfg = toy_config(16, vocab, 1, false);
    cfg.max_seq = 64;
    let mut params = init_params(&cfg, 0).unwrap().into_params();
    for p in Proj::ALL {
        let name = format!("layers.0.{}", p.name());
        let shape = params.get(&name).unwrap().shape().to_vec();
        params.insert(name, Tensor::zeros(DType::F32, shape));
    }
    let d = cfg.d_model;
    let mut emb = vec![0.0; vocab * d];
    for r in 0..vocab {
        emb[r * d] = 1.0;
    }
    params.insert(
        "embed_tokens",
        Tensor::from_values(DType::F32, vec![vocab, d], &emb).unwrap(),
    );
    let mut head = vec![0.0; vocab * d];
    head[token as usize * d] = 1.0;
    params.insert(
        "lm_head",
        Tensor::from_values(DType::F32, vec![vocab, d], &head).unwrap(),
    );
    TinyLM::from_checkpoint(cfg, params).unwrap()
}

#[test]
fn hard_wired_model_scores_by_construction() {
    let tok = fixture_tokenizer();
    let b = tok.token_id(" B").unwrap();
    let model = always_emits(b, tok.vocab_size());
    let mut items = mcq_suite(20, 2);
    let tmpl = PromptTemplate::default();
    for it in &mut items {
        let gold = it.options[it.answer].clone();
        it.options.swap(it.answer, 1);
        it.answer = 1;
        assert_eq!(it.options[1], gold);
    }
    let r = evaluate(&model, &items, &tmpl, &tok, &EvalOptions::default()).unwrap();
    assert_eq!(r.accuracy, 1.0);
    assert!(r.items.iter().all(|i| i.predicted == "B"));
    for it in &mut items {
        it.options.swap(0, 1);
        it.answer = 0;
    }
    let r = evaluate(&model, &items, &tmpl, &tok, &EvalOptions::default()).unwrap();
    assert_eq!(r.accuracy, 0.0);
}

#[test]
fn item_order_does_not_change_scores() {
    let items = mcq_suite(40, 6);
    let (model, tok) = tuned_model(&items, 40, 1e-2, 2);
    let tmpl = PromptTemplate::default();
    let a = evaluate(&model, &items, &tmpl, &tok, &EvalOptions::default()).unwrap();
    let mut rev = items.clone();
    rev.reverse();
    let b = evaluate(&model, &rev, &tmpl, &tok, &EvalOptions::default()).unwrap();
    assert_eq!(a.accuracy, b.accuracy);
    assert_eq!(a.per_subject, b.per_subject);
}

#[test]
fn raw_and_chat_both_report() {
    let items = mcq_suite(12, 1);
    let (model, tok) = tuned_model(&items, 10, 1e-2, 1);
    for format in [PromptFormat::Raw, PromptFormat::Chat] {
        let tmpl = PromptTemplate {
            format,
            ..PromptTemplate::default()
        };
        let r = evaluate(&model, &items, &tmpl, &tok, &EvalOptions::default()).unwrap();
        assert_eq!(r.total, 12);
        assert!(r
            .items
            .iter()
            .all(|i| (i.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-9));
        assert_eq!(r.per_subject.values().map(|s| s.total).sum::<usize>(), 12);
    }
}
