//! Synthetic paired speech/text corpora, vocabularies and tokenizers.

mod bpe;
mod io;
mod synth;

pub use bpe::{train_speech_bpe, MergeTable};
pub use io::{read_corpus, write_corpus};
pub use synth::{subword_count, synth_utterance, Lexicon, SynthConfig, Synthesizer};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CorpusError {
    #[error("invalid synthesis config: {0}")]
    Config(String),
    #[error("unknown word id {id} (text vocabulary has {content} content ids)")]
    UnknownWord { id: u32, content: u32 },
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, CorpusError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VocabKind {
    Speech,
    Text,
}

/// Token vocabulary. Text vocabularies reserve their four highest ids for
/// the separator, the `<t>` and `<s>` modality markers, and padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub kind: VocabKind,
    pub size: u32,
}

pub const DEFAULT_SPEECH_VOCAB: u32 = 501;
pub const DEFAULT_TEXT_VOCAB: u32 = 512;
const TEXT_SPECIALS: u32 = 4;

impl Vocabulary {
    pub fn speech(size: u32) -> Result<Self> {
        if size == 0 {
            return Err(CorpusError::Config("speech vocabulary must be non-empty".into()));
        }
        Ok(Self {
            kind: VocabKind::Speech,
            size,
        })
    }

    pub fn text(size: u32) -> Result<Self> {
        if size <= TEXT_SPECIALS {
            return Err(CorpusError::Config(format!(
                "text vocabulary needs more than {TEXT_SPECIALS} ids, got {size}"
            )));
        }
        Ok(Self {
            kind: VocabKind::Text,
            size,
        })
    }

    /// Ids `0..content_size()` are ordinary tokens.
    pub fn content_size(&self) -> u32 {
        match self.kind {
            VocabKind::Speech => self.size,
            VocabKind::Text => self.size - TEXT_SPECIALS,
        }
    }

    pub fn is_special(&self, id: u32) -> bool {
        id >= self.content_size()
    }

    pub fn sep(&self) -> u32 {
        self.size - 4
    }

    pub fn text_marker(&self) -> u32 {
        self.size - 3
    }

    pub fn speech_marker(&self) -> u32 {
        self.size - 2
    }

    pub fn pad(&self) -> u32 {
        self.size - 1
    }
}

/// One textual unit aligned to the inclusive frame range `[b, e]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 3]", into = "[usize; 3]")]
pub struct AlignmentSpan {
    pub unit: usize,
    pub b: usize,
    pub e: usize,
}

impl From<[usize; 3]> for AlignmentSpan {
    fn from([unit, b, e]: [usize; 3]) -> Self {
        Self { unit, b, e }
    }
}

impl From<AlignmentSpan> for [usize; 3] {
    fn from(s: AlignmentSpan) -> Self {
        [s.unit, s.b, s.e]
    }
}

impl AlignmentSpan {
    pub fn len(&self) -> usize {
        self.e - self.b + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Sorted, non-overlapping alignment spans. Frames outside every span are silence.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AlignmentSpanList(pub Vec<AlignmentSpan>);

impl AlignmentSpanList {
    pub fn new(spans: Vec<AlignmentSpan>) -> Self {
        Self(spans)
    }

    pub fn spans(&self) -> &[AlignmentSpan] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Checks `b ≤ e < t` and `e_k < b_{k+1}`.
    pub fn validate(&self, t: usize) -> Result<()> {
        for (k, s) in self.0.iter().enumerate() {
            if s.b > s.e {
                return Err(CorpusError::Alignment(format!("span {k} has b={} > e={}", s.b, s.e)));
            }
            if s.e >= t {
                return Err(CorpusError::Alignment(format!(
                    "span {k} ends at frame {} but the run has {t} frames",
                    s.e
                )));
            }
            if k > 0 && self.0[k - 1].e >= s.b {
                return Err(CorpusError::Alignment(format!("span {k} overlaps span {}", k - 1)));
            }
        }
        Ok(())
    }

    /// Number of frames not covered by any span.
    pub fn silence_frames(&self, t: usize) -> usize {
        t - self.0.iter().map(AlignmentSpan::len).sum::<usize>()
    }
}

/// A paired utterance: one text token per word, its speech frames and the
/// word-to-frame alignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub text_tokens: Vec<u32>,
    pub speech_tokens: Vec<u32>,
    pub spans: AlignmentSpanList,
}

impl Utterance {
    pub fn n_words(&self) -> usize {
        self.text_tokens.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.spans.validate(self.speech_tokens.len())?;
        if self.spans.len() != self.text_tokens.len() {
            return Err(CorpusError::Alignment(format!(
                "{} words but {} spans",
                self.text_tokens.len(),
                self.spans.len()
            )));
        }
        for (k, s) in self.spans.spans().iter().enumerate() {
            if s.unit != k {
                return Err(CorpusError::Alignment(format!("span {k} points at unit {}", s.unit)));
            }
        }
        Ok(())
    }
}

/// Closed-vocabulary text tokenizer: synthetic word `w` is token `w`.
pub fn tokenize_text(words: &[u32], vocab: &Vocabulary) -> Result<Vec<u32>> {
    words
        .iter()
        .map(|&w| {
            if w < vocab.content_size() {
                Ok(w)
            } else {
                Err(CorpusError::UnknownWord {
                    id: w,
                    content: vocab.content_size(),
                })
            }
        })
        .collect()
}

pub fn detokenize_text(tokens: &[u32], vocab: &Vocabulary) -> Result<Vec<u32>> {
    tokenize_text(tokens, vocab)
}
