//! Closed whitespace vocabulary with named token classes.
//!
//! Every token the system can read or emit is registered up front: control
//! tokens, specifier tags, option numbers, task labels, acoustic units, and
//! instruction text words (including label characters, which option lists
//! expose one token per character). Ids are dense and deterministic: classes
//! are laid out in a fixed order and sorted lexicographically within each
//! class, so the same task registry always produces the same id assignment.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::prompts::ParaphrasePool;
use crate::tasks::{TaskDescriptor, TaskKind};

/// Start-of-transcript control, opens every decoder sequence's task frame.
pub const SOT: &str = "SOT";
/// Start-of-prompt control, opens a natural-language instruction prefix.
pub const SOP: &str = "SOP";
/// No-timestamps control, closes the task frame.
pub const NT: &str = "NT";
/// Transcribe control, stands in for the task tag in instruction prompts.
pub const TRANS: &str = "TRANS";
/// End-of-sequence control, terminates every target.
pub const EOS: &str = "EOS";
/// Padding control, reserved; batches are assembled per example so it is
/// never consumed by the model, but the id is stable for external tooling.
pub const PAD: &str = "PAD";
/// Unknown-token control; inference-time words outside the closed
/// vocabulary map here via [`Vocabulary::encode_lossy`].
pub const UNK: &str = "UNK";

pub const CONTROLS: [&str; 7] = [SOT, SOP, NT, TRANS, EOS, PAD, UNK];

/// Fixed words of the option-list grammar, always registered.
pub const OPTION_PREAMBLE: [&str; 3] = ["The", "options", "are"];
/// Opens a quoted label after its option number: renders as `."`.
pub const QUOTE_OPEN: &str = ".\"";
/// Closes a quoted label before another option follows: renders as `",`.
pub const QUOTE_SEP: &str = "\",";
/// Closes the final quoted label: renders as `".`.
pub const QUOTE_END: &str = "\".";

/// Wraps a specifier name in angle brackets, e.g. `en` -> `⟨en⟩`.
#[must_use]
pub fn tag(name: &str) -> String {
    format!("\u{27e8}{name}\u{27e9}")
}

/// Dense index into the vocabulary. Also the row index for embedding and
/// output-projection matrices.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub usize);

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error)]
pub enum VocabError {
    /// A specifier tag or dataset name is claimed twice.
    #[error("duplicate specifier `{0}`")]
    DuplicateSpecifier(String),
    /// A classification task declared no labels (or a seqgen task no output
    /// inventory), so its targets would be unrepresentable.
    #[error("task `{0}` has an empty label set")]
    EmptyLabelSet(String),
    #[error("unknown token `{0}`")]
    UnknownToken(String),
    #[error("unknown token id {0}")]
    UnknownId(usize),
    /// Tokens are whitespace-delimited on disk and in prompts, so embedded
    /// whitespace (or an empty string) is unrepresentable.
    #[error("malformed token {0:?}: empty or contains whitespace")]
    MalformedToken(String),
    #[error("malformed vocabulary file: {0}")]
    MalformedFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Named token classes. Lists are disjoint (a string belongs to the first
/// class that claims it) and sorted; their concatenation in struct order is
/// the id assignment.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenClasses {
    pub control: Vec<String>,
    pub lang_tags: Vec<String>,
    pub task_tags: Vec<String>,
    pub dataset_tags: Vec<String>,
    pub option_tokens: Vec<String>,
    pub label_tokens: Vec<String>,
    pub input_tokens: Vec<String>,
    pub text_tokens: Vec<String>,
}

impl TokenClasses {
    fn class_lists(&self) -> [&Vec<String>; 8] {
        [
            &self.control,
            &self.lang_tags,
            &self.task_tags,
            &self.dataset_tags,
            &self.option_tokens,
            &self.label_tokens,
            &self.input_tokens,
            &self.text_tokens,
        ]
    }
}

#[derive(Clone, Debug)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
    classes: TokenClasses,
}

impl Vocabulary {
    /// Assembles a vocabulary from validated, already-deduplicated classes.
    fn from_classes(classes: TokenClasses) -> Result<Self, VocabError> {
        let mut tokens = Vec::new();
        let mut ids = HashMap::new();
        for list in classes.class_lists() {
            for t in list {
                check_token(t)?;
                let id = TokenId(tokens.len());
                if ids.insert(t.clone(), id).is_some() {
                    return Err(VocabError::DuplicateSpecifier(t.clone()));
                }
                tokens.push(t.clone());
            }
        }
        Ok(Self { tokens, ids, classes })
    }

    #[must_use]
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    #[must_use]
    pub fn classes(&self) -> &TokenClasses {
        &self.classes
    }

    #[must_use]
    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn id(&self, token: &str) -> Result<TokenId, VocabError> {
        self.ids
            .get(token)
            .copied()
            .ok_or_else(|| VocabError::UnknownToken(token.to_owned()))
    }

    pub fn token(&self, id: TokenId) -> Result<&str, VocabError> {
        self.tokens
            .get(id.0)
            .map(String::as_str)
            .ok_or(VocabError::UnknownId(id.0))
    }

    /// Strict encoding: any token outside the vocabulary is an error.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<TokenId>, VocabError> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Inference-time encoding: unknown tokens collapse to [`UNK`].
    #[must_use]
    pub fn encode_lossy<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<TokenId> {
        let unk = self.ids[UNK];
        tokens
            .iter()
            .map(|t| self.ids.get(t.as_ref()).copied().unwrap_or(unk))
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<Vec<String>, VocabError> {
        ids.iter().map(|&i| self.token(i).map(str::to_owned)).collect()
    }

    #[must_use]
    pub fn eos(&self) -> TokenId {
        self.ids[EOS]
    }

    #[must_use]
    pub fn unk(&self) -> TokenId {
        self.ids[UNK]
    }

    /// Serialized line-oriented form: token per line, line number = id.
    #[must_use]
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    /// Content hash of the serialized token list; checkpoints refuse to load
    /// under a different vocabulary.
    #[must_use]
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_text().as_bytes());
        let digest = h.finalize();
        let mut out = String::with_capacity(64);
        for b in digest {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }

    /// Writes `<stem>.txt` (token per line) and `<stem>.classes.json`.
    pub fn save(&self, stem: &Path) -> Result<(), VocabError> {
        fs::write(stem_txt(stem), self.to_text())?;
        let json = serde_json::to_string_pretty(&self.classes)
            .expect("token classes serialize infallibly");
        fs::write(stem_classes(stem), json)?;
        Ok(())
    }

    /// Loads and cross-validates both files: the text file's line order must
    /// equal the canonical ordering derived from the class sidecar.
    pub fn load(stem: &Path) -> Result<Self, VocabError> {
        let text = fs::read_to_string(stem_txt(stem))?;
        let classes_json = fs::read_to_string(stem_classes(stem))?;
        let classes: TokenClasses = serde_json::from_str(&classes_json)
            .map_err(|e| VocabError::MalformedFile(e.to_string()))?;
        let vocab = Self::from_classes(classes)?;
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() != vocab.tokens.len() {
            return Err(VocabError::MalformedFile(format!(
                "token file has {} lines, classes declare {}",
                lines.len(),
                vocab.tokens.len()
            )));
        }
        for (i, (line, tok)) in lines.iter().zip(&vocab.tokens).enumerate() {
            if line != tok {
                return Err(VocabError::MalformedFile(format!(
                    "line {i} is {line:?} but canonical order requires {tok:?}"
                )));
            }
        }
        Ok(vocab)
    }
}

fn stem_txt(stem: &Path) -> PathBuf {
    stem.with_extension("txt")
}

fn stem_classes(stem: &Path) -> PathBuf {
    stem.with_extension("classes.json")
}

fn check_token(t: &str) -> Result<(), VocabError> {
    if t.is_empty() || t.chars().any(char::is_whitespace) {
        return Err(VocabError::MalformedToken(t.to_owned()));
    }
    Ok(())
}

/// Builds the closed vocabulary for a task registry.
///
/// Id layout: controls, language tags, task-type tags, dataset tags, option
/// numbers, labels (plus seqgen output inventories), acoustic units, then
/// text tokens (option grammar, label characters, pool words); each class
/// sorted lexicographically. Later classes skip strings an earlier class
/// already claimed, so e.g. the digit `1` stays an option token even when it
/// is also a label character.
pub fn build_vocabulary(
    tasks: &[TaskDescriptor],
    pools: &[ParaphrasePool],
) -> Result<Vocabulary, VocabError> {
    let mut datasets = BTreeSet::new();
    for t in tasks {
        if !datasets.insert(t.dataset.clone()) {
            return Err(VocabError::DuplicateSpecifier(t.dataset.clone()));
        }
        let empty = match t.kind {
            TaskKind::Classification => t.labels.is_empty(),
            TaskKind::SeqGen => t.output_tokens.is_empty(),
        };
        if empty {
            return Err(VocabError::EmptyLabelSet(t.dataset.clone()));
        }
    }

    let mut claimed: BTreeSet<String> = BTreeSet::new();
    let mut classes = TokenClasses::default();

    let mut claim_sorted =
        |set: BTreeSet<String>, strict_tags: bool| -> Result<Vec<String>, VocabError> {
            let mut out = Vec::with_capacity(set.len());
            for t in set {
                check_token(&t)?;
                if claimed.insert(t.clone()) {
                    out.push(t);
                } else if strict_tags {
                    // A tag colliding with anything already claimed means two
                    // specifiers share a surface form.
                    return Err(VocabError::DuplicateSpecifier(t));
                }
            }
            Ok(out)
        };

    classes.control = claim_sorted(CONTROLS.iter().map(|s| s.to_string()).collect(), true)?;
    classes.lang_tags =
        claim_sorted(tasks.iter().map(|t| tag(&t.language)).collect(), true)?;
    classes.task_tags =
        claim_sorted(tasks.iter().map(|t| tag(&t.task_type)).collect(), true)?;
    classes.dataset_tags =
        claim_sorted(tasks.iter().map(|t| tag(&t.dataset)).collect(), true)?;

    let max_options = tasks
        .iter()
        .filter(|t| t.kind == TaskKind::Classification)
        .map(|t| t.labels.len())
        .max()
        .unwrap_or(0);
    classes.option_tokens = claim_sorted((0..max_options).map(|i| i.to_string()).collect(), false)?;

    let mut labels = BTreeSet::new();
    for t in tasks {
        labels.extend(t.labels.iter().cloned());
        labels.extend(t.output_tokens.iter().cloned());
    }
    classes.label_tokens = claim_sorted(labels, false)?;

    let mut inputs = BTreeSet::new();
    for t in tasks {
        inputs.extend(t.input_tokens.iter().cloned());
    }
    classes.input_tokens = claim_sorted(inputs, false)?;

    let mut text = BTreeSet::new();
    text.extend(OPTION_PREAMBLE.iter().map(|s| s.to_string()));
    text.extend([QUOTE_OPEN, QUOTE_SEP, QUOTE_END].map(str::to_owned));
    for t in tasks {
        for label in &t.labels {
            text.extend(label.chars().map(String::from));
        }
    }
    for p in pools {
        for phrase in p.seen.iter().chain(&p.unseen) {
            text.extend(phrase.split_whitespace().map(str::to_owned));
        }
    }
    classes.text_tokens = claim_sorted(text, false)?;

    Vocabulary::from_classes(classes)
}

// ------------------------------------------------------------------
// tests
// ------------------------------------------------------------------
