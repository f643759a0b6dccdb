//! Interleaved speech/text sequences and packing into fixed-capacity rows.

mod pack;

pub use pack::{pack_batch, PackedBatch, PackedRow, PatchPlan, PlanUnit, PlannedSequence, RowPacker, UnitKind};

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{AlignmentSpan, AlignmentSpanList, Utterance, Vocabulary};
use crate::rng::Rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InterleaveError {
    #[error("utterance has {0} words; interleaving needs at least 2")]
    TooShort(usize),
    #[error("invalid packing request: {0}")]
    Config(String),
    #[error(transparent)]
    Patch(#[from] crate::patching::PatchError),
}

pub type Result<T> = std::result::Result<T, InterleaveError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Speech,
}

/// Where a run came from: source word range `[w0, w1)` and, for speech,
/// source frame range `[f0, f1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Origin {
    pub w0: usize,
    pub w1: usize,
    pub f0: usize,
    pub f1: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Run {
    pub modality: Modality,
    pub tokens: Vec<u32>,
    /// Run-local alignment for speech runs (frame and unit indices restart at 0).
    pub spans: Option<AlignmentSpanList>,
    /// Word ids covered by the run, in order.
    pub words: Vec<u32>,
    pub origin: Origin,
}

/// A sequence of modality runs. Rendering puts the run's marker before it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterleavedSequence {
    pub runs: Vec<Run>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InterleaveMode {
    /// Keep alternating text and speech spans until the utterance is used up.
    #[default]
    Repeat,
    /// Stop after the first text span and its speech follow-up.
    SingleSwitch,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterleaveConfig {
    pub mode: InterleaveMode,
}

/// First frame owned by word `k`'s speech run: silence before a word
/// travels with it.
fn run_start(utt: &Utterance, k: usize) -> usize {
    if k == 0 {
        0
    } else {
        utt.spans.spans()[k - 1].e + 1
    }
}

fn run_end(utt: &Utterance, k: usize) -> usize {
    if k == utt.n_words() {
        utt.speech_tokens.len()
    } else {
        utt.spans.spans()[k - 1].e + 1
    }
}

fn speech_run(utt: &Utterance, w0: usize, w1: usize) -> Run {
    let f0 = run_start(utt, w0);
    let f1 = run_end(utt, w1);
    let spans = utt.spans.spans()[w0..w1]
        .iter()
        .enumerate()
        .map(|(k, s)| AlignmentSpan {
            unit: k,
            b: s.b - f0,
            e: s.e - f0,
        })
        .collect();
    Run {
        modality: Modality::Speech,
        tokens: utt.speech_tokens[f0..f1].to_vec(),
        spans: Some(AlignmentSpanList::new(spans)),
        words: utt.text_tokens[w0..w1].to_vec(),
        origin: Origin { w0, w1, f0, f1 },
    }
}

fn text_run(utt: &Utterance, w0: usize, w1: usize) -> Run {
    Run {
        modality: Modality::Text,
        tokens: utt.text_tokens[w0..w1].to_vec(),
        spans: None,
        words: utt.text_tokens[w0..w1].to_vec(),
        origin: Origin { w0, w1, f0: 0, f1: 0 },
    }
}

/// Replaces random contiguous word spans by their text tokens. Words before
/// the first text span stay speech; each text span of `L` words is followed by
/// `max(1, floor(L/2))` words of speech.
pub fn interleave(utt: &Utterance, rng: &mut Rng, cfg: &InterleaveConfig) -> Result<InterleavedSequence> {
    let n = utt.n_words();
    if n < 2 {
        return Err(InterleaveError::TooShort(n));
    }
    let mut runs = Vec::new();
    let s0 = rng.random_range(0..n);
    if s0 > 0 {
        runs.push(speech_run(utt, 0, s0));
    }
    let mut c = s0;
    while c < n {
        let len = rng.random_range(1..=n - c);
        runs.push(text_run(utt, c, c + len));
        c += len;
        if c < n {
            let sp = (len / 2).max(1).min(n - c);
            runs.push(speech_run(utt, c, c + sp));
            c += sp;
        }
        if cfg.mode == InterleaveMode::SingleSwitch {
            break;
        }
    }
    Ok(InterleavedSequence { runs })
}

impl InterleavedSequence {
    pub fn pure_speech(utt: &Utterance) -> Self {
        Self {
            runs: vec![speech_run(utt, 0, utt.n_words())],
        }
    }

    pub fn pure_text(utt: &Utterance) -> Self {
        Self {
            runs: vec![text_run(utt, 0, utt.n_words())],
        }
    }

    /// Raw speech tokens without alignment, one run.
    pub fn speech_only(tokens: Vec<u32>) -> Self {
        let f1 = tokens.len();
        Self {
            runs: vec![Run {
                modality: Modality::Speech,
                tokens,
                spans: None,
                words: Vec::new(),
                origin: Origin { w0: 0, w1: 0, f0: 0, f1 },
            }],
        }
    }

    pub fn speech_tokens(&self) -> usize {
        self.runs
            .iter()
            .filter(|r| r.modality == Modality::Speech)
            .map(|r| r.tokens.len())
            .sum()
    }

    pub fn text_tokens(&self) -> usize {
        self.runs
            .iter()
            .filter(|r| r.modality == Modality::Text)
            .map(|r| r.tokens.len())
            .sum()
    }

    /// Flat rendering with markers; each entry is `(modality, id)` and markers
    /// are text-vocabulary ids.
    pub fn render(&self, vocab: &Vocabulary) -> Vec<(Modality, u32)> {
        let mut out = Vec::new();
        for r in &self.runs {
            let marker = match r.modality {
                Modality::Text => vocab.text_marker(),
                Modality::Speech => vocab.speech_marker(),
            };
            out.push((Modality::Text, marker));
            out.extend(r.tokens.iter().map(|&t| (r.modality, t)));
        }
        out
    }

    pub fn marker_positions(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.runs.len());
        let mut pos = 0;
        for r in &self.runs {
            out.push(pos);
            pos += 1 + r.tokens.len();
        }
        out
    }

    /// Human-readable one-line rendering.
    pub fn describe(&self) -> String {
        self.runs
            .iter()
            .map(|r| match r.modality {
                Modality::Text => format!("<t> {:?}", r.tokens),
                Modality::Speech => format!("<s> [{} frames, words {}..{}]", r.tokens.len(), r.origin.w0, r.origin.w1),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_utterance, SynthConfig, DEFAULT_TEXT_VOCAB};
    use crate::rng::seeded;

    fn utt(n: usize) -> Utterance {
        synth_utterance(11, n, &SynthConfig::default()).unwrap()
    }

    #[test]
    fn too_short_is_signalled() {
        let u = utt(1);
        assert_eq!(
            interleave(&u, &mut seeded(0), &InterleaveConfig::default()),
            Err(InterleaveError::TooShort(1))
        );
    }

    #[test]
    fn same_seed_same_sequence() {
        let u = utt(10);
        let cfg = InterleaveConfig::default();
        assert_eq!(
            interleave(&u, &mut seeded(4), &cfg).unwrap(),
            interleave(&u, &mut seeded(4), &cfg).unwrap()
        );
    }

    #[test]
    fn markers_precede_every_run() {
        let v = Vocabulary::text(DEFAULT_TEXT_VOCAB).unwrap();
        let u = utt(12);
        for s in 0..50 {
            let seq = interleave(&u, &mut seeded(s), &InterleaveConfig::default()).unwrap();
            let flat = seq.render(&v);
            for (r, &p) in seq.runs.iter().zip(&seq.marker_positions()) {
                let want = match r.modality {
                    Modality::Text => v.text_marker(),
                    Modality::Speech => v.speech_marker(),
                };
                assert_eq!(flat[p], (Modality::Text, want));
            }
            for w in seq.runs.windows(2) {
                assert_ne!(w[0].modality, w[1].modality);
            }
        }
    }

    #[test]
    fn half_length_speech_follows_text() {
        let u = utt(4);
        let cfg = InterleaveConfig {
            mode: InterleaveMode::SingleSwitch,
        };
        let mut seen = false;
        for s in 0..500 {
            let seq = interleave(&u, &mut seeded(s), &cfg).unwrap();
            if seq.runs[0].modality == Modality::Text && seq.runs[0].origin.w1 == 2 {
                assert_eq!(seq.runs.len(), 2);
                assert_eq!(seq.runs[0].tokens, u.text_tokens[0..2]);
                assert_eq!((seq.runs[1].origin.w0, seq.runs[1].origin.w1), (2, 3));
                seen = true;
            }
        }
        assert!(seen);
    }

    #[test]
    fn whole_utterance_span_is_pure_text() {
        let u = utt(3);
        let mut seen = false;
        for s in 0..500 {
            let seq = interleave(&u, &mut seeded(s), &InterleaveConfig::default()).unwrap();
            if seq.runs.len() == 1 {
                assert_eq!(seq.runs[0].modality, Modality::Text);
                assert_eq!(seq.runs[0].tokens, u.text_tokens);
                seen = true;
            }
        }
        assert!(seen);
    }

    #[test]
    fn local_spans_are_reindexed() {
        let u = utt(8);
        for s in 0..50 {
            let seq = interleave(&u, &mut seeded(s), &InterleaveConfig::default()).unwrap();
            for r in seq.runs.iter().filter(|r| r.modality == Modality::Speech) {
                let sp = r.spans.as_ref().unwrap();
                sp.validate(r.tokens.len()).unwrap();
                for (k, span) in sp.spans().iter().enumerate() {
                    let src = u.spans.spans()[r.origin.w0 + k];
                    assert_eq!(span.b + r.origin.f0, src.b);
                    assert_eq!(span.e + r.origin.f0, src.e);
                }
            }
        }
    }
}
