mod common;

use std::collections::HashSet;
use std::io::Write;

use common::{small_generator, small_model, small_task};
use loraens::data::{
    corpus_loss, export_jsonl, generate_synthetic, ingest_jsonl, pretrain_base, read_corpus, render_demo_text,
    render_prompt_text, write_corpus, GeneratorConfig, PretrainConfig, QaRecord, ShiftKind, TaskDataset, TaskExample,
    Tokenizer,
};
use loraens::model::BaseModel;

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

#[test]
fn two_option_prompt_matches_golden_file() {
    let opts = strings(&["yes", "no"]);
    let prompt = render_prompt_text("Is the sky blue?", &opts).unwrap();
    assert_eq!(prompt, include_str!("golden/two_option_prompt.txt"));
    let demo = render_demo_text("Is the sky blue?", &opts, 1).unwrap();
    assert_eq!(demo, include_str!("golden/two_option_demo.txt"));

    let tok = Tokenizer::fit([demo.as_str()]);
    let ex = TaskExample::new(
        QaRecord {
            id: "toy".into(),
            question: "Is the sky blue?".into(),
            options: opts,
            answer: 1,
        },
        &tok,
    )
    .unwrap();
    assert_eq!(tok.decode(&ex.prompt_tokens), prompt);
    // The demonstration continues the prompt with the gold letter.
    assert_eq!(&ex.demo_tokens[..ex.prompt_tokens.len()], &ex.prompt_tokens[..]);
    assert_eq!(ex.demo_tokens[ex.prompt_tokens.len()], ex.gold_token());
    assert_eq!(ex.label_tokens, vec![tok.letter(0).unwrap(), tok.letter(1).unwrap()]);
}

#[test]
fn five_choice_commonsense_sample() {
    let question = "The sanctions against the school were a punishing blow, and they seemed to what the efforts the school had made to change?";
    let opts = strings(&["ignore", "enforce", "authoritarian", "yell at", "avoid"]);
    let text = render_demo_text(question, &opts, 0).unwrap();
    let expected = format!(
        "Q: {question}\nAnswer Choices:\n(a) ignore\n(b) enforce\n(c) authoritarian\n(d) yell at\n(e) avoid\nA: (a).\n\n"
    );
    assert_eq!(text, expected);
    let tok = Tokenizer::fit([text.as_str()]);
    let ex = TaskExample::new(
        QaRecord {
            id: "cqa-1".into(),
            question: question.into(),
            options: opts,
            answer: 0,
        },
        &tok,
    )
    .unwrap();
    assert_eq!(ex.label_tokens.len(), 5);
    let again = TaskExample::new(ex.record(), &tok).unwrap();
    assert_eq!(again.prompt_tokens, ex.prompt_tokens);
}

#[test]
fn option_counts_outside_the_alphabet_are_rejected() {
    assert!(render_prompt_text("q", &strings(&["only"])).is_err());
    let many: Vec<String> = (0..27).map(|i| format!("o{i}")).collect();
    assert!(render_prompt_text("q", &many).is_err());
    assert!(render_prompt_text("q", &many[..26]).is_ok());
}

#[test]
fn tokenizer_round_trips_the_corpus() {
    let task = small_task(4);
    let tok = &task.tokenizer;
    for doc in &task.corpus {
        assert_eq!(tok.decode(&tok.encode(doc)), *doc);
    }
    for ex in task.in_dist.train.iter().chain(&task.ood.train) {
        assert!(!ex.prompt_tokens.contains(&tok.unk()));
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tok.json");
    tok.save(&path).unwrap();
    assert_eq!(Tokenizer::load(&path).unwrap(), *tok);
}

fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    for l in lines {
        writeln!(f, "{l}").unwrap();
    }
    f
}

fn letters_tokenizer() -> Tokenizer {
    Tokenizer::fit(["Q: x\nAnswer Choices:\n(a) y\nA: (a).\n\n"])
}

#[test]
fn ingest_empty_file() {
    let f = write_lines(&[]);
    let got = ingest_jsonl(f.path(), &letters_tokenizer()).unwrap();
    assert!(got.dataset.is_empty());
    assert!(got.errors.is_empty());
}

#[test]
fn ingest_reports_malformed_lines() {
    let f = write_lines(&[
        r#"{"id": "a", "question": "x", "options": ["y", "z"], "answer": 0}"#,
        r#"{"id": "b", "question": "x", "options": ["y", "z"]"#,
        r#"{"id": "c", "question": "x", "options": ["y", "z"], "answer": 1}"#,
    ]);
    let got = ingest_jsonl(f.path(), &letters_tokenizer()).unwrap();
    assert_eq!(got.dataset.train.len(), 2);
    assert_eq!(got.errors.len(), 1);
    assert_eq!(got.errors[0].line, 2);
}

#[test]
fn ingest_rejects_bad_records() {
    let f = write_lines(&[
        r#"{"id": "a", "question": "x", "options": ["y", "z"], "answer": 0}"#,
        r#"{"id": "a", "question": "x", "options": ["y", "z"], "answer": 1}"#,
        r#"{"id": "b", "question": "x", "options": ["y", "z"], "answer": 2}"#,
        r#"{"id": "c", "question": "x", "answer": 0}"#,
        "",
        r#"{"id": "d", "question": "x", "options": ["y", "z", "w"], "answer": 0}"#,
    ]);
    let got = ingest_jsonl(f.path(), &letters_tokenizer()).unwrap();
    assert_eq!(got.dataset.train.len(), 1);
    let lines: Vec<usize> = got.errors.iter().map(|e| e.line).collect();
    assert_eq!(lines, vec![2, 3, 4, 6]);
}

#[test]
fn ingest_five_option_line() {
    let f = write_lines(&[
        r#"{"id": "cqa-1", "question": "Where might he go?", "options": ["race track", "populated areas", "the desert", "apartment", "roadblock"], "answer": 1}"#,
    ]);
    let got = ingest_jsonl(f.path(), &letters_tokenizer()).unwrap();
    assert_eq!(got.dataset.n_options, 5);
    assert_eq!(got.dataset.train[0].label_tokens.len(), 5);
    assert!(ingest_jsonl(std::path::Path::new("/nonexistent/x.jsonl"), &letters_tokenizer()).is_err());
}

#[test]
fn export_then_ingest_round_trips() {
    let task = small_task(2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.jsonl");
    export_jsonl(&path, &task.in_dist.train).unwrap();
    let back = ingest_jsonl(&path, &task.tokenizer).unwrap();
    assert!(back.errors.is_empty());
    assert_eq!(back.dataset.train, task.in_dist.train);
}

#[test]
fn datasets_reject_id_collisions() {
    let task = small_task(2);
    let mut val = task.in_dist.validation.clone();
    val[0].id = task.in_dist.train[0].id.clone();
    assert!(TaskDataset::new("x", task.in_dist.train.clone(), val, task.in_dist.provenance.clone()).is_err());
}

#[test]
fn generator_is_deterministic() {
    let a = small_task(7);
    let b = small_task(7);
    assert_eq!(a, b);
    assert_ne!(a.in_dist.train, small_task(8).in_dist.train);
}

#[test]
fn splits_are_disjoint_and_relations_held_out() {
    let task = small_task(3);
    let ids: Vec<&str> = task
        .in_dist
        .train
        .iter()
        .chain(&task.in_dist.validation)
        .chain(&task.ood.train)
        .map(|e| e.id.as_str())
        .collect();
    assert_eq!(ids.iter().collect::<HashSet<_>>().len(), ids.len());
    let questions: HashSet<&str> = task.in_dist.train.iter().map(|e| e.question.as_str()).collect();
    assert!(task.in_dist.validation.iter().all(|e| !questions.contains(e.question.as_str())));

    let relation = |q: &str| q.split_whitespace().nth(1).unwrap().to_string();
    let in_rel: HashSet<String> = task.in_dist.train.iter().chain(&task.in_dist.validation).map(|e| relation(&e.question)).collect();
    let ood_rel: HashSet<String> = task.ood.train.iter().map(|e| relation(&e.question)).collect();
    assert!(in_rel.is_disjoint(&ood_rel));
    assert_eq!(ood_rel, task.ood_relations.iter().cloned().collect());
    // Held-out relations never occur in the pretraining corpus.
    for r in &task.ood_relations {
        let needle = format!(" {r} ");
        assert!(task.corpus.iter().all(|d| !d.contains(&needle)));
    }
}

#[test]
fn in_distribution_answers_appear_in_the_corpus() {
    let task = small_task(3);
    let corpus: HashSet<&str> = task.corpus.iter().map(String::as_str).collect();
    for ex in task.in_dist.train.iter().chain(&task.in_dist.validation) {
        let fact = format!("{} {}.", ex.question, ex.options[ex.gold]);
        assert!(corpus.contains(fact.as_str()), "{fact}");
    }
}

#[test]
fn subject_holdout_keeps_relations() {
    let cfg = GeneratorConfig {
        shift: ShiftKind::SubjectHoldout,
        ..small_generator()
    };
    let task = generate_synthetic(&cfg, 1).unwrap();
    let subject = |q: &str| q.split_whitespace().nth(3).unwrap().to_string();
    let in_subj: HashSet<String> = task.in_dist.train.iter().map(|e| subject(&e.question)).collect();
    assert!(task.ood.train.iter().all(|e| !in_subj.contains(&subject(&e.question))));
}

fn position_counts(cfg: &GeneratorConfig, seed: u64) -> (Vec<usize>, usize) {
    let task = generate_synthetic(cfg, seed).unwrap();
    let mut counts = vec![0; cfg.n_options];
    let mut n = 0;
    for ex in task.in_dist.train.iter().chain(&task.in_dist.validation).chain(&task.ood.train) {
        counts[ex.gold] += 1;
        n += 1;
    }
    (counts, n)
}

#[test]
fn gold_positions_are_uniform() {
    let base = GeneratorConfig {
        n_subjects: 2500,
        n_relations: 5,
        n_ood_relations: 1,
        n_train: 9000,
        n_validation: 500,
        n_corpus_questions: 100,
        n_ood: 500,
        ..Default::default()
    };
    let shuffled = GeneratorConfig {
        n_objects: 6,
        shuffle_options: true,
        ..base.clone()
    };
    for cfg in [base, shuffled] {
        let (counts, n) = position_counts(&cfg, 11);
        assert!(n >= 10_000);
        let p = 1.0 / cfg.n_options as f64;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * p).abs() <= 3.0 * sigma, "{c} of {n}");
        }
    }
}

#[test]
fn corpus_file_round_trips() {
    let task = small_task(5);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.txt");
    write_corpus(&path, &task.corpus).unwrap();
    assert_eq!(read_corpus(&path).unwrap(), task.corpus);
}

fn tiny_pretrain(epochs: usize, seed: u64) -> PretrainConfig {
    PretrainConfig {
        model: small_model(0),
        epochs,
        batch_size: 8,
        step_size: 1e-2,
        seed,
        ..Default::default()
    }
}

#[test]
fn zero_epochs_gives_the_frozen_initialisation() {
    let task = small_task(5);
    let (model, report) = pretrain_base(&task.corpus, &task.tokenizer, &tiny_pretrain(0, 3)).unwrap();
    assert!(model.frozen);
    assert!(report.epoch_losses.is_empty());
    let init: BaseModel = BaseModel::init(small_model(task.tokenizer.len()), 3).unwrap();
    assert_eq!(model.params, init.params);
    assert!(pretrain_base(&[], &task.tokenizer, &tiny_pretrain(1, 3)).is_err());
}

#[test]
fn pretraining_beats_the_uniform_guess_and_is_reproducible() {
    let task = small_task(5);
    let cfg = tiny_pretrain(8, 1);
    let (a, report) = pretrain_base(&task.corpus, &task.tokenizer, &cfg).unwrap();
    let uniform = (task.tokenizer.len() as f64).ln();
    let loss = corpus_loss(&a, &task.corpus, &task.tokenizer).unwrap();
    assert!(loss < uniform, "{loss} vs {uniform}");
    assert!(report.epoch_losses.last().unwrap() < &report.epoch_losses[0]);
    let (b, _) = pretrain_base(&task.corpus, &task.tokenizer, &cfg).unwrap();
    assert_eq!(a.fingerprint(), b.fingerprint());
    let (c, _) = pretrain_base(&task.corpus, &task.tokenizer, &tiny_pretrain(8, 2)).unwrap();
    assert_ne!(a.fingerprint(), c.fingerprint());

    let early = PretrainConfig {
        loss_threshold: Some(f64::INFINITY),
        ..cfg
    };
    let (_, stopped) = pretrain_base(&task.corpus, &task.tokenizer, &early).unwrap();
    assert!(stopped.reached_threshold);
    assert_eq!(stopped.epoch_losses.len(), 1);
}
