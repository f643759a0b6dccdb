use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Result, TrainError};
use crate::corpus::{subword_count, Utterance};
use crate::interleave::{interleave, Modality, InterleaveConfig, InterleaveError, InterleavedSequence, PackedRow, RowPacker};
use crate::model::{Architecture, Model};
use crate::patching::{curriculum_prob, select_patching, PatchingConfig, PatchingMode, Strategy};
use crate::rng::rng_for;

/// Target speech:text token ratio. `1:0` yields a pure interleaved stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixRatio {
    pub speech: f64,
    pub text: f64,
}

impl Default for MixRatio {
    fn default() -> Self {
        Self { speech: 1.0, text: 2.0 }
    }
}

impl MixRatio {
    pub fn validate(&self) -> Result<()> {
        let ok = |x: f64| x.is_finite() && x >= 0.0;
        if !ok(self.speech) || !ok(self.text) || self.speech + self.text <= 0.0 {
            return Err(TrainError::Config(format!(
                "mix ratio {}:{} needs non-negative parts with a positive sum",
                self.speech, self.text
            )));
        }
        Ok(())
    }

    pub fn speech_fraction(&self) -> f64 {
        self.speech / (self.speech + self.text)
    }
}

/// Source a batch was drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BatchKind {
    Interleaved,
    Text,
}

/// Resumable position of a [`BatchStream`]. Counters are absolute draw
/// indices; epoch `e` of a source is the `e`-th seeded shuffle of the corpus.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamState {
    pub batches: u64,
    pub interleaved_drawn: u64,
    pub text_drawn: u64,
    pub speech_tokens: u64,
    pub text_tokens: u64,
}

impl StreamState {
    pub fn raw_tokens(&self) -> u64 {
        self.speech_tokens + self.text_tokens
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    /// Curriculum step the batch was patched for.
    pub step: u64,
    pub kind: BatchKind,
    pub rows: Vec<PackedRow>,
    pub sequences: usize,
    /// Sequences whose speech was patched along the alignment.
    pub aligned: usize,
    pub truncated: usize,
    pub p_u: f64,
    /// Stream position right after this batch.
    pub state: StreamState,
}

#[derive(Debug, Clone)]
pub struct StreamConfig {
    pub rows: usize,
    pub context_len: usize,
    pub ratio: MixRatio,
    pub patching: PatchingConfig,
    pub interleave: InterleaveConfig,
    pub seed: u64,
    /// Raw-token budget; the stream ends once it is reached.
    pub max_tokens: Option<u64>,
}

/// Deterministic batch generator. Each batch comes wholly from one source,
/// picked so the realized speech-token fraction tracks the ratio.
#[derive(Debug, Clone)]
pub struct BatchStream {
    corpus: Arc<Vec<Utterance>>,
    cfg: StreamConfig,
    arch: Architecture,
    planner: Model,
    state: StreamState,
    perm: [Option<(u64, Vec<usize>)>; 2],
}

impl BatchStream {
    /// `model` supplies the architecture and any BPE table; its weights are not used.
    pub fn new(corpus: Arc<Vec<Utterance>>, model: &Model, cfg: StreamConfig) -> Result<Self> {
        if corpus.is_empty() {
            return Err(TrainError::Config("training corpus is empty".into()));
        }
        if cfg.rows == 0 {
            return Err(TrainError::Config("batch needs at least one row".into()));
        }
        cfg.ratio.validate()?;
        cfg.patching.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        if model.arch == Architecture::Lst && cfg.patching.needs_alignment() {
            if let Some(i) = corpus.iter().position(|u| u.spans.len() != u.n_words()) {
                return Err(TrainError::Config(format!("utterance {i} lacks alignment for aligned patching")));
            }
        }
        let mut planner = model.clone();
        planner.params = Default::default();
        Ok(Self {
            corpus,
            arch: model.arch,
            planner,
            cfg,
            state: StreamState::default(),
            perm: [None, None],
        })
    }

    pub fn state(&self) -> StreamState {
        self.state
    }

    pub fn set_state(&mut self, state: StreamState) {
        self.state = state;
    }

    pub fn config(&self) -> &StreamConfig {
        &self.cfg
    }

    fn choose(&self) -> BatchKind {
        let target = self.cfg.ratio.speech_fraction();
        if self.cfg.ratio.text == 0.0 {
            return BatchKind::Interleaved;
        }
        if self.cfg.ratio.speech == 0.0 {
            return BatchKind::Text;
        }
        let total = self.state.raw_tokens();
        let frac = if total == 0 {
            0.0
        } else {
            self.state.speech_tokens as f64 / total as f64
        };
        if frac < target {
            BatchKind::Interleaved
        } else {
            BatchKind::Text
        }
    }

    fn index(&mut self, kind: BatchKind, draw: u64) -> usize {
        let n = self.corpus.len() as u64;
        let (slot, label) = match kind {
            BatchKind::Interleaved => (0, "shuffle-interleaved"),
            BatchKind::Text => (1, "shuffle-text"),
        };
        let epoch = draw / n;
        if self.perm[slot].as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut p: Vec<usize> = (0..self.corpus.len()).collect();
            p.shuffle(&mut rng_for(self.cfg.seed, label, epoch));
            self.perm[slot] = Some((epoch, p));
        }
        self.perm[slot].as_ref().expect("permutation just built").1[(draw % n) as usize]
    }

    fn sequence(&mut self, kind: BatchKind, draw: u64) -> Result<InterleavedSequence> {
        let i = self.index(kind, draw);
        let utt = &self.corpus[i];
        if kind == BatchKind::Text {
            return Ok(InterleavedSequence::pure_text(utt));
        }
        let mut rng = rng_for(self.cfg.seed, "interleave", draw);
        match interleave(utt, &mut rng, &self.cfg.interleave) {
            Ok(s) => Ok(s),
            Err(InterleaveError::TooShort(_)) => Ok(InterleavedSequence::pure_speech(utt)),
            Err(e) => Err(e.into()),
        }
    }

    pub fn p_u(&self, step: u64) -> f64 {
        match self.cfg.patching.mode {
            PatchingMode::Static => 0.0,
            PatchingMode::Aligned | PatchingMode::BpeAligned => 1.0,
            PatchingMode::Mixed => self.cfg.patching.mixed_aligned_prob,
            PatchingMode::Curriculum => curriculum_prob(step, &self.cfg.patching.schedule),
        }
    }

    /// Produces the next batch, or `None` once the token budget is spent.
    pub fn next_batch(&mut self) -> Result<Option<Batch>> {
        if let Some(max) = self.cfg.max_tokens {
            if self.state.raw_tokens() >= max {
                return Ok(None);
            }
        }
        let step = self.state.batches;
        let kind = self.choose();
        let mut packer = RowPacker::new(self.cfg.context_len, self.planner.text_vocab())?;
        let mut drawn = 0u64;
        let mut aligned = Vec::new();
        let mut truncated_before = 0;
        while packer.completed() < self.cfg.rows {
            let draw = match kind {
                BatchKind::Interleaved => self.state.interleaved_drawn + drawn,
                BatchKind::Text => self.state.text_drawn + drawn,
            };
            let seq = self.sequence(kind, draw)?;
            let strategy = if self.arch == Architecture::Lst && seq.speech_tokens() > 0 {
                let label = match kind {
                    BatchKind::Interleaved => "patching",
                    BatchKind::Text => "patching-text",
                };
                let mut rng = rng_for(self.cfg.seed, label, draw);
                let has_spans = seq
                    .runs
                    .iter()
                    .filter(|r| r.modality == Modality::Speech)
                    .all(|r| r.spans.is_some());
                select_patching(step, &mut rng, &self.cfg.patching, has_spans)?
            } else {
                Strategy::Static { p: self.cfg.patching.p }
            };
            aligned.push(matches!(strategy, Strategy::Aligned(_) | Strategy::BpeAligned));
            let planned = self.planner.plan(&seq, strategy, &subword_count)?;
            truncated_before = packer.truncated();
            packer.push(planned);
            drawn += 1;
        }
        // A row beyond the quota holds only the last sequence pushed.
        let extra = packer.completed() - self.cfg.rows;
        let returned = (packer.pending_sequences() + extra) as u64;
        let used = drawn - returned;
        let truncated = if extra > 0 { truncated_before } else { packer.truncated() };
        let rows = packer.take_rows(self.cfg.rows);
        let vocab = self.planner.text_vocab();
        for r in &rows {
            self.state.speech_tokens += r.speech_tokens() as u64;
            self.state.text_tokens += r.text_content_tokens(&vocab) as u64;
        }
        match kind {
            BatchKind::Interleaved => self.state.interleaved_drawn += used,
            BatchKind::Text => self.state.text_drawn += used,
        }
        self.state.batches += 1;
        let aligned = aligned[..used as usize].iter().filter(|&&a| a).count();
        Ok(Some(Batch {
            step,
            kind,
            rows,
            sequences: used as usize,
            aligned,
            truncated,
            p_u: self.p_u(step),
            state: self.state,
        }))
    }
}

impl Iterator for BatchStream {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_batch().transpose()
    }
}
