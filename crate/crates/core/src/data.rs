//! Multiple-choice QA data: schema, prompt template, a word-level tokenizer,
//! JSONL ingestion and a synthetic relational-fact generator with its
//! pretraining corpus.
//!
//! Prompts follow this template, one line per option:
//!
//! ```text
//! Q: {question}
//! Answer Choices:
//! (a) {option 0}
//! (b) {option 1}
//! A: (
//! ```
//!
//! The token after `A: (` is the option letter. A demonstration used for
//! few-shot prompting is the same text followed by `{letter}).` and a blank line.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{sequence_loss_and_grads, BaseModel, DropoutMode, ModelConfig, Params, Supervised, TokenId};
use crate::train::{adamw_step, AdamWConfig, OptimizerState};

pub const MIN_OPTIONS: usize = 2;
pub const MAX_OPTIONS: usize = 26;
pub const UNK: &str = "<unk>";

/// Letter used for option `index` (`a` for 0).
pub fn option_letter(index: usize) -> char {
    (b'a' + index as u8) as char
}

/// Splits text into contiguous pieces: alphanumeric runs and single
/// punctuation characters, each optionally carrying one leading space, and
/// single whitespace characters otherwise. Concatenating the pieces gives the
/// input back.
pub fn pretokenize(text: &str) -> Vec<&str> {
    let bytes: Vec<(usize, char)> = text.char_indices().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let start = bytes[i].0;
        let mut j = i;
        if bytes[j].1 == ' ' && j + 1 < bytes.len() && !bytes[j + 1].1.is_whitespace() {
            j += 1;
        }
        let c = bytes[j].1;
        if c.is_alphanumeric() {
            while j < bytes.len() && bytes[j].1.is_alphanumeric() {
                j += 1;
            }
        } else {
            j += 1;
        }
        let end = bytes.get(j).map_or(text.len(), |b| b.0);
        out.push(&text[start..end]);
        i = j;
    }
    out
}

/// Word-level vocabulary. Id 0 is `<unk>`, ids 1..=26 are the option letters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, TokenId>,
}

impl Tokenizer {
    /// Reserved tokens followed by every piece of `texts`, most frequent first.
    pub fn fit<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for t in texts {
            for p in pretokenize(t) {
                *counts.entry(p).or_default() += 1;
            }
        }
        let mut tokens: Vec<String> = std::iter::once(UNK.to_string())
            .chain((0..MAX_OPTIONS).map(|i| option_letter(i).to_string()))
            .collect();
        let reserved: HashSet<String> = tokens.iter().cloned().collect();
        let mut rest: Vec<(&str, usize)> = counts.into_iter().filter(|(p, _)| !reserved.contains(*p)).collect();
        rest.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        tokens.extend(rest.into_iter().map(|(p, _)| p.to_string()));
        Self::from_tokens(tokens).expect("fitted vocabulary is valid")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 1 + MAX_OPTIONS
            || tokens[0] != UNK
            || (0..MAX_OPTIONS).any(|i| tokens[1 + i] != option_letter(i).to_string())
        {
            return Err(Error::invalid("vocabulary must start with <unk> and the letters a..z"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn unk(&self) -> TokenId {
        0
    }

    pub fn letter(&self, index: usize) -> Result<TokenId> {
        if index >= MAX_OPTIONS {
            return Err(Error::invalid(format!("no option letter for index {index}")));
        }
        Ok(1 + index as TokenId)
    }

    pub fn token_id(&self, piece: &str) -> Option<TokenId> {
        self.index.get(piece).copied()
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        pretokenize(text)
            .into_iter()
            .map(|p| self.token_id(p).unwrap_or(0))
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&i| self.tokens.get(i as usize).map_or(UNK, String::as_str))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::checkpoint::write_atomic(path, &serde_json::to_vec_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let raw: Tokenizer = serde_json::from_slice(&bytes)?;
        Self::from_tokens(raw.tokens)
    }
}

/// Prompt text for a question, ending at the answer cue.
pub fn render_prompt_text(question: &str, options: &[String]) -> Result<String> {
    check_option_count(options.len())?;
    let mut s = format!("Q: {question}\nAnswer Choices:\n");
    for (i, o) in options.iter().enumerate() {
        s.push_str(&format!("({}) {o}\n", option_letter(i)));
    }
    s.push_str("A: (");
    Ok(s)
}

/// Full demonstration text: prompt, gold letter and a blank line.
pub fn render_demo_text(question: &str, options: &[String], gold: usize) -> Result<String> {
    Ok(format!("{}{}).\n\n", render_prompt_text(question, options)?, option_letter(gold)))
}

fn check_option_count(n: usize) -> Result<()> {
    if !(MIN_OPTIONS..=MAX_OPTIONS).contains(&n) {
        return Err(Error::invalid(format!(
            "{n} options; between {MIN_OPTIONS} and {MAX_OPTIONS} are supported"
        )));
    }
    Ok(())
}

/// A multiple-choice question as stored on disk.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaRecord {
    pub id: String,
    pub question: String,
    pub options: Vec<String>,
    pub answer: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskExample {
    pub id: String,
    pub question: String,
    pub options: Vec<String>,
    pub gold: usize,
    pub prompt_tokens: Vec<TokenId>,
    /// Prompt followed by the gold letter, for use as a demonstration.
    pub demo_tokens: Vec<TokenId>,
    /// One token per option.
    pub label_tokens: Vec<TokenId>,
}

impl TaskExample {
    pub fn new(record: QaRecord, tokenizer: &Tokenizer) -> Result<Self> {
        check_option_count(record.options.len())?;
        if record.answer >= record.options.len() {
            return Err(Error::invalid(format!(
                "answer {} out of range for {} options",
                record.answer,
                record.options.len()
            )));
        }
        let prompt_tokens = tokenizer.encode(&render_prompt_text(&record.question, &record.options)?);
        let demo_tokens = tokenizer.encode(&render_demo_text(&record.question, &record.options, record.answer)?);
        let label_tokens = (0..record.options.len())
            .map(|i| tokenizer.letter(i))
            .collect::<Result<_>>()?;
        Ok(Self {
            id: record.id,
            question: record.question,
            options: record.options,
            gold: record.answer,
            prompt_tokens,
            demo_tokens,
            label_tokens,
        })
    }

    pub fn record(&self) -> QaRecord {
        QaRecord {
            id: self.id.clone(),
            question: self.question.clone(),
            options: self.options.clone(),
            answer: self.gold,
        }
    }

    pub fn gold_token(&self) -> TokenId {
        self.label_tokens[self.gold]
    }

    pub(crate) fn check_labels(&self, vocab: usize) -> Result<()> {
        if let Some(&t) = self.label_tokens.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::TokenOutOfVocab { token: t, vocab });
        }
        Ok(())
    }
}

impl Supervised for TaskExample {
    fn tokens(&self) -> &[TokenId] {
        &self.prompt_tokens
    }

    fn target(&self) -> TokenId {
        self.gold_token()
    }

    fn label_tokens(&self) -> &[TokenId] {
        &self.label_tokens
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Provenance {
    Ingested { path: PathBuf },
    Synthetic { seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub name: String,
    pub train: Vec<TaskExample>,
    pub validation: Vec<TaskExample>,
    pub n_options: usize,
    pub provenance: Provenance,
}

impl TaskDataset {
    pub fn new(
        name: impl Into<String>,
        train: Vec<TaskExample>,
        validation: Vec<TaskExample>,
        provenance: Provenance,
    ) -> Result<Self> {
        let mut ids = HashSet::new();
        let mut n_options = None;
        for ex in train.iter().chain(&validation) {
            if !ids.insert(ex.id.as_str()) {
                return Err(Error::invalid(format!("example id {:?} appears twice", ex.id)));
            }
            match n_options {
                None => n_options = Some(ex.options.len()),
                Some(n) if n != ex.options.len() => {
                    return Err(Error::invalid(format!("example {:?} has {} options, expected {n}", ex.id, ex.options.len())))
                }
                _ => {}
            }
        }
        Ok(Self {
            name: name.into(),
            train,
            validation,
            n_options: n_options.unwrap_or(0),
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineError {
    /// 1-based line number.
    pub line: usize,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ingested {
    /// Every well-formed record, in file order, in `train`.
    pub dataset: TaskDataset,
    pub errors: Vec<LineError>,
}

/// Reads `{"id", "question", "options", "answer"}` records, one per line.
/// Blank lines are skipped. Malformed lines are reported, not fatal. All
/// records must share the option count of the first well-formed one.
pub fn ingest_jsonl(path: &Path, tokenizer: &Tokenizer) -> Result<Ingested> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path.file_stem().map_or("dataset".into(), |s| s.to_string_lossy().into_owned());
    let mut examples = Vec::new();
    let mut errors = Vec::new();
    let mut ids = HashSet::new();
    let mut n_options = None;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut fail = |message: String| errors.push(LineError { line: i + 1, message });
        let record: QaRecord = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => {
                fail(e.to_string());
                continue;
            }
        };
        if ids.contains(&record.id) {
            fail(format!("duplicate id {:?}", record.id));
            continue;
        }
        if let Some(n) = n_options {
            if record.options.len() != n {
                fail(format!("{} options, expected {n}", record.options.len()));
                continue;
            }
        }
        match TaskExample::new(record, tokenizer) {
            Ok(ex) => {
                n_options.get_or_insert(ex.options.len());
                ids.insert(ex.id.clone());
                examples.push(ex);
            }
            Err(e) => fail(e.to_string()),
        }
    }
    let dataset = TaskDataset::new(name, examples, Vec::new(), Provenance::Ingested { path: path.to_path_buf() })?;
    Ok(Ingested { dataset, errors })
}

pub fn export_jsonl(path: &Path, examples: &[TaskExample]) -> Result<()> {
    let mut out = Vec::new();
    for ex in examples {
        serde_json::to_writer(&mut out, &ex.record())?;
        out.push(b'\n');
    }
    crate::checkpoint::write_atomic(path, &out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    /// OOD questions ask about relations that appear neither in the corpus
    /// nor in the in-distribution questions.
    #[default]
    RelationHoldout,
    /// OOD questions ask held-in relations about subjects absent from the corpus.
    SubjectHoldout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub n_subjects: usize,
    pub n_relations: usize,
    /// Relations reserved for the OOD split under `relation_holdout`.
    pub n_ood_relations: usize,
    /// Subjects reserved for the OOD split under `subject_holdout`.
    pub n_ood_subjects: usize,
    /// Candidate answers per relation.
    pub n_objects: usize,
    pub n_options: usize,
    pub n_train: usize,
    pub n_validation: usize,
    pub n_ood: usize,
    /// Held-in facts additionally written into the corpus in QA format.
    pub n_corpus_questions: usize,
    /// Randomize option order per question instead of keeping each
    /// relation's candidate order.
    pub shuffle_options: bool,
    pub shift: ShiftKind,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_subjects: 128,
            n_relations: 6,
            n_ood_relations: 2,
            n_ood_subjects: 16,
            n_objects: 4,
            n_options: 4,
            n_train: 128,
            n_validation: 64,
            n_ood: 64,
            n_corpus_questions: 96,
            shuffle_options: false,
            shift: ShiftKind::RelationHoldout,
        }
    }
}

/// Pretraining documents plus in-distribution and OOD question sets.
#[derive(Clone, Debug, PartialEq)]
pub struct Synthetic {
    pub corpus: Vec<String>,
    pub tokenizer: Tokenizer,
    pub in_dist: TaskDataset,
    /// OOD questions live in `train`.
    pub ood: TaskDataset,
    /// Relation names used by each split.
    pub in_relations: Vec<String>,
    pub ood_relations: Vec<String>,
}

const TEMPLATE_WORDS: &[&str] = &["the", "of", "is", "q", "a", "answer", "choices"];

fn pseudo_words(rng: &mut ChaCha8Rng, n: usize, taken: &mut HashSet<String>) -> Vec<String> {
    const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
    const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = rng.random_range(2..=3);
        let w: String = (0..syllables)
            .map(|_| format!("{}{}", ONSETS.choose(rng).unwrap(), VOWELS.choose(rng).unwrap()))
            .collect();
        if !TEMPLATE_WORDS.contains(&w.as_str()) && taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn fact_sentence(rel: &str, subj: &str, obj: &str) -> String {
    format!("the {rel} of {subj} is {obj}.")
}

/// Cloze question: the corpus sentence up to the object.
fn question_text(rel: &str, subj: &str) -> String {
    format!("the {rel} of {subj} is")
}

/// Options for a question: the gold candidate plus distinct distractors.
/// With `shuffle` the order is uniformly random; otherwise options keep the
/// relation's candidate order. Returns the options and the gold position.
fn sample_options(
    rng: &mut ChaCha8Rng,
    gold: usize,
    candidates: &[String],
    n: usize,
    shuffle: bool,
) -> (Vec<String>, usize) {
    let others: Vec<usize> = (0..candidates.len()).filter(|&c| c != gold).collect();
    let mut picked: Vec<usize> = others.choose_multiple(rng, n - 1).copied().collect();
    picked.push(gold);
    if shuffle {
        picked.shuffle(rng);
    } else {
        picked.sort_unstable();
    }
    let pos = picked.iter().position(|&c| c == gold).expect("gold is among the options");
    (picked.into_iter().map(|c| candidates[c].clone()).collect(), pos)
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        check_option_count(self.n_options)?;
        if self.n_options > self.n_objects {
            return Err(Error::invalid(format!(
                "{} options but only {} candidate answers per relation",
                self.n_options, self.n_objects
            )));
        }
        let (held_rel, held_subj) = match self.shift {
            ShiftKind::RelationHoldout => (self.n_ood_relations, 0),
            ShiftKind::SubjectHoldout => (0, self.n_ood_subjects),
        };
        if held_rel >= self.n_relations || held_subj >= self.n_subjects {
            return Err(Error::invalid("holdout leaves no in-distribution relations or subjects"));
        }
        let in_pairs = (self.n_subjects - held_subj) * (self.n_relations - held_rel);
        let ood_pairs = match self.shift {
            ShiftKind::RelationHoldout => self.n_subjects * held_rel,
            ShiftKind::SubjectHoldout => held_subj * (self.n_relations - held_rel),
        };
        let needed = self.n_train + self.n_validation + self.n_corpus_questions;
        if needed > in_pairs || self.n_ood > ood_pairs {
            return Err(Error::invalid(format!(
                "requested {needed} held-in and {} OOD questions from {in_pairs} and {ood_pairs} facts",
                self.n_ood
            )));
        }
        Ok(())
    }
}

/// Builds the synthetic relational task. Every (subject, relation) pair has
/// one object drawn from that relation's candidates. Held-in facts go into
/// the corpus as sentences; a disjoint subset is also written as solved QA
/// documents. Train, validation and OOD questions use disjoint facts.
pub fn generate_synthetic(config: &GeneratorConfig, seed: u64) -> Result<Synthetic> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut taken = HashSet::new();
    let subjects = pseudo_words(&mut rng, config.n_subjects, &mut taken);
    let relations = pseudo_words(&mut rng, config.n_relations, &mut taken);
    let objects: Vec<Vec<String>> = (0..config.n_relations)
        .map(|_| pseudo_words(&mut rng, config.n_objects, &mut taken))
        .collect();
    let facts: Vec<Vec<usize>> = (0..config.n_subjects)
        .map(|_| (0..config.n_relations).map(|_| rng.random_range(0..config.n_objects)).collect())
        .collect();

    let (n_in_rel, n_in_subj) = match config.shift {
        ShiftKind::RelationHoldout => (config.n_relations - config.n_ood_relations, config.n_subjects),
        ShiftKind::SubjectHoldout => (config.n_relations, config.n_subjects - config.n_ood_subjects),
    };
    let held_in = |s: usize, r: usize| s < n_in_subj && r < n_in_rel;
    let mut in_pairs: Vec<(usize, usize)> = Vec::new();
    let mut ood_pairs: Vec<(usize, usize)> = Vec::new();
    for s in 0..config.n_subjects {
        for r in 0..config.n_relations {
            if held_in(s, r) {
                in_pairs.push((s, r));
            } else {
                ood_pairs.push((s, r));
            }
        }
    }
    in_pairs.shuffle(&mut rng);
    ood_pairs.shuffle(&mut rng);

    let record = |rng: &mut ChaCha8Rng, (s, r): (usize, usize), id: String| {
        let (options, answer) = sample_options(rng, facts[s][r], &objects[r], config.n_options, config.shuffle_options);
        QaRecord {
            id,
            question: question_text(&relations[r], &subjects[s]),
            options,
            answer,
        }
    };
    let take = |rng: &mut ChaCha8Rng, pairs: &[(usize, usize)], prefix: &str| -> Vec<QaRecord> {
        pairs
            .iter()
            .enumerate()
            .map(|(i, &p)| record(rng, p, format!("{prefix}-{i:05}")))
            .collect()
    };
    let (a, rest) = in_pairs.split_at(config.n_train);
    let (b, rest) = rest.split_at(config.n_validation);
    let c = &rest[..config.n_corpus_questions];
    let train = take(&mut rng, a, "train");
    let validation = take(&mut rng, b, "val");
    let corpus_qa = take(&mut rng, c, "corpus");
    let ood = take(&mut rng, &ood_pairs[..config.n_ood], "ood");

    let mut corpus: Vec<String> = Vec::new();
    for s in 0..n_in_subj {
        for r in 0..n_in_rel {
            corpus.push(fact_sentence(&relations[r], &subjects[s], &objects[r][facts[s][r]]));
        }
    }
    for q in &corpus_qa {
        corpus.push(render_demo_text(&q.question, &q.options, q.answer)?.trim_end().to_string());
    }
    corpus.shuffle(&mut rng);

    let mut vocab_texts: Vec<String> = corpus.clone();
    for q in train.iter().chain(&validation).chain(&ood) {
        vocab_texts.push(render_demo_text(&q.question, &q.options, q.answer)?);
    }
    let tokenizer = Tokenizer::fit(vocab_texts.iter().map(String::as_str));
    let build = |records: Vec<QaRecord>| -> Result<Vec<TaskExample>> {
        records.into_iter().map(|r| TaskExample::new(r, &tokenizer)).collect()
    };
    let provenance = Provenance::Synthetic { seed };
    let in_dist = TaskDataset::new("synthetic", build(train)?, build(validation)?, provenance.clone())?;
    let ood = TaskDataset::new("synthetic-ood", build(ood)?, Vec::new(), provenance)?;
    let (in_relations, ood_relations) = relations.split_at(n_in_rel);
    Ok(Synthetic {
        corpus,
        tokenizer,
        in_dist,
        ood,
        in_relations: in_relations.to_vec(),
        ood_relations: if config.shift == ShiftKind::RelationHoldout {
            ood_relations.to_vec()
        } else {
            in_relations.to_vec()
        },
    })
}

/// Corpus file: documents separated by blank lines. Single-sentence
/// documents therefore appear one sentence per line.
pub fn write_corpus(path: &Path, corpus: &[String]) -> Result<()> {
    crate::checkpoint::write_atomic(path, (corpus.join("\n\n") + "\n").as_bytes())
}

pub fn read_corpus(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .replace("\r\n", "\n")
        .split("\n\n")
        .map(|d| d.trim_matches('\n').to_string())
        .filter(|d| !d.is_empty())
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub step_size: f64,
    pub weight_decay: f64,
    /// Stop once the mean epoch loss drops below this value.
    pub loss_threshold: Option<f64>,
    /// Join documents into full-length sequences instead of training on
    /// one document per sequence.
    pub pack_documents: bool,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            epochs: 40,
            batch_size: 16,
            step_size: 3e-3,
            weight_decay: 0.0,
            loss_threshold: None,
            pack_documents: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean next-token loss of each completed epoch.
    pub epoch_losses: Vec<f64>,
    pub reached_threshold: bool,
}

/// Greedily joins documents, in `order`, into sequences of at most `limit`
/// tokens with `separator` between neighbours.
fn pack(documents: &[Vec<TokenId>], order: &[usize], separator: &[TokenId], limit: usize) -> Vec<Vec<TokenId>> {
    let mut out = Vec::new();
    let mut current: Vec<TokenId> = Vec::new();
    for &i in order {
        let doc = &documents[i];
        if !current.is_empty() && current.len() + separator.len() + doc.len() > limit {
            out.push(std::mem::take(&mut current));
        }
        if !current.is_empty() {
            current.extend_from_slice(separator);
        }
        current.extend_from_slice(doc);
    }
    if current.len() >= 2 {
        out.push(current);
    }
    out
}

/// Next-token training of a fresh model on `corpus`, returned frozen.
/// `config.model.vocab_size` is overridden by the tokenizer size. Each
/// epoch visits the documents in a fresh order; with `pack_documents` they
/// are joined, separated by a blank line, into sequences filling the
/// context window.
pub fn pretrain_base(
    corpus: &[String],
    tokenizer: &Tokenizer,
    config: &PretrainConfig,
) -> Result<(BaseModel, PretrainReport)> {
    if corpus.is_empty() {
        return Err(Error::invalid("pretraining corpus is empty"));
    }
    if config.batch_size == 0 {
        return Err(Error::invalid("batch_size must be at least 1"));
    }
    let model_config = ModelConfig {
        vocab_size: tokenizer.len(),
        ..config.model.clone()
    };
    let mut model: BaseModel = BaseModel::init(model_config, config.seed)?;
    let limit = model.config.max_seq_len + 1;
    let documents: Vec<Vec<TokenId>> = corpus
        .iter()
        .map(|d| {
            let mut t = tokenizer.encode(d);
            t.truncate(limit);
            t
        })
        .filter(|t| !t.is_empty())
        .collect();
    let separator = tokenizer.encode("\n\n");
    if documents.iter().all(|d| d.len() < 2) {
        return Err(Error::invalid("no corpus document has two or more tokens"));
    }
    let opt = AdamWConfig {
        step_size: config.step_size,
        weight_decay: config.weight_decay,
        baseline_decay: config.weight_decay,
        ..Default::default()
    };
    let mut state = OptimizerState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7072_6574);
    let mut order: Vec<usize> = (0..documents.len()).collect();
    let mut report = PretrainReport::default();
    let initial = (model.config.vocab_size as f64).ln();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let sequences = if config.pack_documents {
            pack(&documents, &order, &separator, limit)
        } else {
            order.iter().map(|&i| documents[i].clone()).filter(|d| d.len() >= 2).collect()
        };
        let mut total = 0.0;
        for batch in sequences.chunks(config.batch_size) {
            let (loss, grads) = sequence_loss_and_grads(&model, batch, DropoutMode::Train, &mut rng)?;
            if !loss.is_finite() || loss > 1e3 * initial {
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    reason: format!("pretraining loss {loss}"),
                });
            }
            total += loss * batch.len() as f64;
            let named = grads.to_named();
            adamw_step(&mut state, &named, &mut model.params as &mut Params, &opt).map_err(|e| match e {
                Error::NonFiniteGradient(name) => Error::Diverged {
                    epoch: epoch + 1,
                    reason: format!("non-finite gradient in {name}"),
                },
                e => e,
            })?;
        }
        let mean = total / sequences.len() as f64;
        report.epoch_losses.push(mean);
        if config.loss_threshold.is_some_and(|t| mean < t) {
            report.reached_threshold = true;
            break;
        }
    }
    Ok((model.freeze(), report))
}

/// Mean next-token loss of `model` over `corpus` without dropout.
pub fn corpus_loss(model: &BaseModel, corpus: &[String], tokenizer: &Tokenizer) -> Result<f64> {
    let limit = model.config.max_seq_len + 1;
    let sequences: Vec<Vec<TokenId>> = corpus
        .iter()
        .map(|d| {
            let mut t = tokenizer.encode(d);
            t.truncate(limit);
            t
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    Ok(sequence_loss_and_grads(model, &sequences, DropoutMode::Eval, &mut rng)?.0)
}
