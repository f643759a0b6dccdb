use serde::{Deserialize, Serialize};

use super::{InterleaveError, InterleavedSequence, Modality, Result, Run};
use crate::corpus::Vocabulary;
use crate::patching::{PatchSegmentation, SegmentKind};

/// What a global unit is made of.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UnitKind {
    /// One text-vocabulary token (content, marker or separator).
    Text,
    /// A patch of speech tokens pooled by the local encoder.
    Patch(SegmentKind),
    /// One speech token fed to the global model directly.
    Token,
}

/// Inclusive position range `[start, end]` of one global unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanUnit {
    pub start: usize,
    pub end: usize,
    pub kind: UnitKind,
}

impl PlanUnit {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Position-to-unit map of a row. Units tile the row in order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchPlan {
    pub units: Vec<PlanUnit>,
    pub pos_unit: Vec<usize>,
}

impl PatchPlan {
    pub fn from_units(units: Vec<PlanUnit>) -> Result<Self> {
        let mut pos_unit = Vec::new();
        for (u, unit) in units.iter().enumerate() {
            if unit.start != pos_unit.len() || unit.end < unit.start {
                return Err(InterleaveError::Config(format!(
                    "unit {u} spans [{}, {}] but position {} is next",
                    unit.start,
                    unit.end,
                    pos_unit.len()
                )));
            }
            pos_unit.extend(std::iter::repeat_n(u, unit.len()));
        }
        Ok(Self { units, pos_unit })
    }

    pub fn n_units(&self) -> usize {
        self.units.len()
    }

    pub fn len(&self) -> usize {
        self.pos_unit.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pos_unit.is_empty()
    }

    /// Number of leading units a prediction made at position `t` may read:
    /// everything strictly before the unit holding position `t + 1`.
    pub fn visible(&self, t: usize) -> usize {
        self.pos_unit.get(t + 1).copied().unwrap_or(self.units.len())
    }
}

/// One sequence flattened to positions and grouped into global units.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlannedSequence {
    pub tokens: Vec<u32>,
    pub modality: Vec<Modality>,
    /// Speech run index within the sequence; `None` at text positions.
    pub run: Vec<Option<usize>>,
    pub units: Vec<PlanUnit>,
}

impl PlannedSequence {
    /// Flattens `seq` (markers included) and asks `segment` for the patch
    /// layout of every speech run. Returning `None` keeps that run at token
    /// granularity.
    pub fn build(
        seq: &InterleavedSequence,
        vocab: &Vocabulary,
        mut segment: impl FnMut(usize, &Run) -> Result<Option<PatchSegmentation>>,
    ) -> Result<Self> {
        let mut out = Self {
            tokens: Vec::new(),
            modality: Vec::new(),
            run: Vec::new(),
            units: Vec::new(),
        };
        let mut speech_idx = 0;
        for r in &seq.runs {
            let marker = match r.modality {
                Modality::Text => vocab.text_marker(),
                Modality::Speech => vocab.speech_marker(),
            };
            out.push_text(marker);
            match r.modality {
                Modality::Text => r.tokens.iter().for_each(|&t| out.push_text(t)),
                Modality::Speech => {
                    let base = out.tokens.len();
                    out.tokens.extend_from_slice(&r.tokens);
                    out.modality.extend(std::iter::repeat_n(Modality::Speech, r.tokens.len()));
                    out.run.extend(std::iter::repeat_n(Some(speech_idx), r.tokens.len()));
                    match segment(speech_idx, r)? {
                        Some(seg) => {
                            if seg.t != r.tokens.len() || !seg.is_tiling() {
                                return Err(InterleaveError::Config(format!(
                                    "segmentation of run {speech_idx} does not tile its {} frames",
                                    r.tokens.len()
                                )));
                            }
                            out.units.extend(seg.segments.iter().map(|s| PlanUnit {
                                start: base + s.start,
                                end: base + s.end,
                                kind: UnitKind::Patch(s.kind),
                            }));
                        }
                        None => out.units.extend((0..r.tokens.len()).map(|i| PlanUnit {
                            start: base + i,
                            end: base + i,
                            kind: UnitKind::Token,
                        })),
                    }
                    speech_idx += 1;
                }
            }
        }
        Ok(out)
    }

    /// Every speech token is its own unit.
    pub fn token_level(seq: &InterleavedSequence, vocab: &Vocabulary) -> Self {
        Self::build(seq, vocab, |_, _| Ok(None)).expect("token-level planning cannot fail")
    }

    fn push_text(&mut self, id: u32) {
        let p = self.tokens.len();
        self.tokens.push(id);
        self.modality.push(Modality::Text);
        self.run.push(None);
        self.units.push(PlanUnit {
            start: p,
            end: p,
            kind: UnitKind::Text,
        });
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_units(&self) -> usize {
        self.units.len()
    }

    fn truncate_units(&mut self, k: usize) {
        let end = self.units[k - 1].end + 1;
        self.units.truncate(k);
        self.tokens.truncate(end);
        self.modality.truncate(end);
        self.run.truncate(end);
    }
}

/// One packed context row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedRow {
    pub tokens: Vec<u32>,
    pub modality: Vec<Modality>,
    /// Row-global speech run id; `None` at text positions.
    pub run: Vec<Option<usize>>,
    /// Positions whose token is a prediction target.
    pub targets: Vec<bool>,
    pub plan: PatchPlan,
}

impl PackedRow {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_units(&self) -> usize {
        self.plan.n_units()
    }

    pub fn speech_tokens(&self) -> usize {
        self.modality.iter().filter(|&&m| m == Modality::Speech).count()
    }

    /// Content text tokens (markers and separators excluded).
    pub fn text_content_tokens(&self, vocab: &Vocabulary) -> usize {
        self.tokens
            .iter()
            .zip(&self.modality)
            .filter(|(&t, &m)| m == Modality::Text && !vocab.is_special(t))
            .count()
    }

    pub fn speech_units(&self) -> usize {
        self.plan
            .units
            .iter()
            .filter(|u| u.kind != UnitKind::Text)
            .count()
    }

    pub fn n_targets(&self, m: Modality) -> usize {
        self.targets
            .iter()
            .zip(&self.modality)
            .filter(|(&t, &mm)| t && mm == m)
            .count()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PackedBatch {
    pub rows: Vec<PackedRow>,
    /// Sequences cut to fit a row.
    pub truncated: usize,
}

#[derive(Debug, Clone, Default)]
struct RowBuilder {
    tokens: Vec<u32>,
    modality: Vec<Modality>,
    run: Vec<Option<usize>>,
    units: Vec<PlanUnit>,
    next_run: usize,
    sequences: usize,
}

/// Greedy row packer: sequences are appended with a separator unit between
/// them while the row has at most `l` units.
#[derive(Debug, Clone)]
pub struct RowPacker {
    l: usize,
    vocab: Vocabulary,
    cur: RowBuilder,
    done: Vec<PackedRow>,
    truncated: usize,
}

impl RowPacker {
    pub fn new(l: usize, vocab: Vocabulary) -> Result<Self> {
        if l < 8 {
            return Err(InterleaveError::Config(format!("context length {l} is below 8 units")));
        }
        Ok(Self {
            l,
            vocab,
            cur: RowBuilder::default(),
            done: Vec::new(),
            truncated: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.l
    }

    pub fn truncated(&self) -> usize {
        self.truncated
    }

    pub fn completed(&self) -> usize {
        self.done.len()
    }

    /// Sequences sitting in the unfinished row.
    pub fn pending_sequences(&self) -> usize {
        self.cur.sequences
    }

    pub fn push(&mut self, mut seq: PlannedSequence) {
        if seq.units.is_empty() {
            return;
        }
        let used = self.cur.units.len();
        if used > 0 && used + 1 + seq.n_units() > self.l {
            self.flush();
        }
        if !self.cur.units.is_empty() {
            let p = self.cur.tokens.len();
            self.cur.tokens.push(self.vocab.sep());
            self.cur.modality.push(Modality::Text);
            self.cur.run.push(None);
            self.cur.units.push(PlanUnit {
                start: p,
                end: p,
                kind: UnitKind::Text,
            });
        }
        self.cur.sequences += 1;
        if seq.n_units() > self.l {
            seq.truncate_units(self.l);
            self.truncated += 1;
        }
        let base = self.cur.tokens.len();
        let run_base = self.cur.next_run;
        let mut max_run = None;
        self.cur.tokens.extend_from_slice(&seq.tokens);
        self.cur.modality.extend_from_slice(&seq.modality);
        self.cur.run.extend(seq.run.iter().map(|r| {
            r.map(|r| {
                max_run = Some(max_run.map_or(r, |m: usize| m.max(r)));
                run_base + r
            })
        }));
        if let Some(m) = max_run {
            self.cur.next_run = run_base + m + 1;
        }
        self.cur.units.extend(seq.units.iter().map(|u| PlanUnit {
            start: u.start + base,
            end: u.end + base,
            kind: u.kind,
        }));
        if self.cur.units.len() >= self.l {
            self.flush();
        }
    }

    fn flush(&mut self) {
        if self.cur.units.is_empty() {
            return;
        }
        let b = std::mem::take(&mut self.cur);
        let targets = b
            .tokens
            .iter()
            .zip(&b.modality)
            .enumerate()
            .map(|(p, (&t, &m))| p > 0 && (m == Modality::Speech || !self.vocab.is_special(t)))
            .collect();
        let plan = PatchPlan::from_units(b.units).expect("packer keeps units contiguous");
        self.done.push(PackedRow {
            tokens: b.tokens,
            modality: b.modality,
            run: b.run,
            targets,
            plan,
        });
    }

    /// Removes and returns up to `n` completed rows.
    pub fn take_rows(&mut self, n: usize) -> Vec<PackedRow> {
        let k = n.min(self.done.len());
        self.done.drain(..k).collect()
    }

    /// Flushes the partial row and returns every completed row.
    pub fn finish(mut self) -> PackedBatch {
        self.flush();
        PackedBatch {
            rows: self.done,
            truncated: self.truncated,
        }
    }
}

pub fn pack_batch(seqs: Vec<PlannedSequence>, l: usize, vocab: &Vocabulary) -> Result<PackedBatch> {
    let mut p = RowPacker::new(l, *vocab)?;
    for s in seqs {
        p.push(s);
    }
    Ok(p.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::DEFAULT_TEXT_VOCAB;
    use crate::interleave::{Origin, Run};

    fn vocab() -> Vocabulary {
        Vocabulary::text(DEFAULT_TEXT_VOCAB).unwrap()
    }

    fn text_seq(n: usize) -> PlannedSequence {
        let seq = InterleavedSequence {
            runs: vec![Run {
                modality: Modality::Text,
                tokens: (0..n as u32 - 1).collect(),
                spans: None,
                words: Vec::new(),
                origin: Origin { w0: 0, w1: n - 1, f0: 0, f1: 0 },
            }],
        };
        PlannedSequence::token_level(&seq, &vocab())
    }

    #[test]
    fn two_short_sequences_share_a_row() {
        let b = pack_batch(vec![text_seq(5), text_seq(5)], 16, &vocab()).unwrap();
        assert_eq!(b.rows.len(), 1);
        assert_eq!(b.rows[0].n_units(), 11);
        assert_eq!(b.rows[0].tokens[5], vocab().sep());
    }

    #[test]
    fn exact_fit_fills_one_row() {
        let b = pack_batch(vec![text_seq(16)], 16, &vocab()).unwrap();
        assert_eq!(b.rows.len(), 1);
        assert_eq!(b.rows[0].n_units(), 16);
        assert_eq!(b.truncated, 0);
    }

    #[test]
    fn overlong_sequence_is_truncated_and_counted() {
        let b = pack_batch(vec![text_seq(20)], 16, &vocab()).unwrap();
        assert_eq!(b.rows[0].n_units(), 16);
        assert_eq!(b.truncated, 1);
    }

    #[test]
    fn small_context_rejected() {
        assert!(RowPacker::new(7, vocab()).is_err());
    }

    #[test]
    fn visibility_excludes_the_next_unit() {
        let plan = PatchPlan::from_units(vec![
            PlanUnit { start: 0, end: 0, kind: UnitKind::Text },
            PlanUnit { start: 1, end: 3, kind: UnitKind::Patch(SegmentKind::Static) },
            PlanUnit { start: 4, end: 5, kind: UnitKind::Patch(SegmentKind::Static) },
        ])
        .unwrap();
        assert_eq!(plan.visible(0), 1);
        assert_eq!(plan.visible(1), 1);
        assert_eq!(plan.visible(3), 2);
        assert_eq!(plan.visible(5), 3);
    }
}
