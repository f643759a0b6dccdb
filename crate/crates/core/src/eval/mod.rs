//! Multiple-choice likelihood evaluation, synthetic benchmark construction,
//! patch-embedding cluster statistics, multi-seed summaries and plotting.

mod cluster;
mod plot;
mod stability;
mod synth;

pub use cluster::{cluster_metrics, cluster_stats, extract_word_patches, ClusterStats};
pub use plot::{plot_csv, PlotError};
pub use stability::{stability_report, MetricSummary, StabilityReport};
pub use synth::{build_eval_set, build_matched_eval_set, EvalSetConfig};

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{AlignmentSpan, AlignmentSpanList};
use crate::interleave::{pack_batch, InterleavedSequence, Modality, Origin, PlannedSequence, Run};
use crate::model::{Architecture, Model, ModelError};
use crate::patching::{SilenceMode, Strategy};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("candidate is empty")]
    EmptyCandidate,
    #[error("no record could be scored ({skipped} skipped)")]
    Empty { skipped: usize },
    #[error("sequence needs {needed} units but the context holds {capacity}")]
    Overflow { needed: usize, capacity: usize },
    #[error("invalid eval record: {0}")]
    Record(String),
    #[error("invalid eval config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalModality {
    Speech,
    Text,
}

/// Word alignment of a speech record, local to each sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordSpans {
    pub prompt: AlignmentSpanList,
    pub candidates: Vec<AlignmentSpanList>,
}

/// One multiple-choice item. Candidates continue the shared prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRecord {
    pub prompt: Vec<u32>,
    pub candidates: Vec<Vec<u32>>,
    pub gold: usize,
    pub modality: EvalModality,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spans: Option<RecordSpans>,
}

impl EvalRecord {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(EvalError::Record(m));
        if self.candidates.len() < 2 {
            return bad(format!("{} candidates, need at least 2", self.candidates.len()));
        }
        if self.gold >= self.candidates.len() {
            return bad(format!("gold {} out of {} candidates", self.gold, self.candidates.len()));
        }
        if self.candidates.iter().any(|c| c.is_empty()) {
            return Err(EvalError::EmptyCandidate);
        }
        if let Some(s) = &self.spans {
            if self.modality != EvalModality::Speech {
                return bad("alignment given for a text record".into());
            }
            if s.candidates.len() != self.candidates.len() {
                return bad("one span list per candidate required".into());
            }
            let check = |l: &AlignmentSpanList, t: usize| l.validate(t).map_err(|e| EvalError::Record(e.to_string()));
            check(&s.prompt, self.prompt.len())?;
            for (l, c) in s.candidates.iter().zip(&self.candidates) {
                check(l, c.len())?;
            }
        }
        Ok(())
    }
}

pub fn write_records(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let io = |e: &dyn std::fmt::Display| EvalError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| io(&e))?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| io(&e))?;
        w.write_all(b"\n").map_err(|e| io(&e))?;
    }
    w.flush().map_err(|e| io(&e))
}

pub fn read_records(path: &Path) -> Result<Vec<EvalRecord>> {
    let f = std::fs::File::open(path).map_err(|e| EvalError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let at = |m: String| EvalError::Io {
            path: format!("{}:{}", path.display(), i + 1),
            message: m,
        };
        let line = line.map_err(|e| at(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: EvalRecord = serde_json::from_str(&line).map_err(|e| at(e.to_string()))?;
        r.validate().map_err(|e| at(e.to_string()))?;
        out.push(r);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    #[default]
    Sum,
    PerToken,
}

/// Anything that assigns per-token NLLs to a continuation.
pub trait Scorer {
    /// NLL of each candidate token given the prompt, plus the global units used.
    fn token_nll(
        &self,
        prompt: &[u32],
        candidate: &[u32],
        modality: EvalModality,
        spans: Option<(&AlignmentSpanList, &AlignmentSpanList)>,
    ) -> Result<(Vec<f64>, usize)>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateScore {
    pub total: f64,
    pub per_token: f64,
    pub n_tokens: usize,
    pub units: usize,
}

impl CandidateScore {
    pub fn value(&self, n: Normalization) -> f64 {
        match n {
            Normalization::Sum => self.total,
            Normalization::PerToken => self.per_token,
        }
    }
}

pub fn score_candidate(
    scorer: &dyn Scorer,
    prompt: &[u32],
    candidate: &[u32],
    modality: EvalModality,
    spans: Option<(&AlignmentSpanList, &AlignmentSpanList)>,
) -> Result<CandidateScore> {
    if candidate.is_empty() {
        return Err(EvalError::EmptyCandidate);
    }
    let (nll, units) = scorer.token_nll(prompt, candidate, modality, spans)?;
    let total: f64 = nll.iter().sum();
    Ok(CandidateScore {
        total,
        per_token: total / nll.len() as f64,
        n_tokens: nll.len(),
        units,
    })
}

/// Scorer backed by a trained model. Speech is patched with the model's
/// inference patching, or along the alignment when `aligned` is set.
#[derive(Debug, Clone)]
pub struct ModelScorer<'a> {
    pub model: &'a Model,
    pub max_units: usize,
    pub aligned: bool,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a Model, max_units: usize) -> Self {
        Self {
            model,
            max_units,
            aligned: false,
        }
    }
}

fn concat_spans(a: &AlignmentSpanList, b: &AlignmentSpanList, offset: usize) -> AlignmentSpanList {
    let n = a.len();
    let mut v = a.spans().to_vec();
    v.extend(b.spans().iter().map(|s| AlignmentSpan {
        unit: s.unit + n,
        b: s.b + offset,
        e: s.e + offset,
    }));
    AlignmentSpanList::new(v)
}

impl Scorer for ModelScorer<'_> {
    fn token_nll(
        &self,
        prompt: &[u32],
        candidate: &[u32],
        modality: EvalModality,
        spans: Option<(&AlignmentSpanList, &AlignmentSpanList)>,
    ) -> Result<(Vec<f64>, usize)> {
        let m = self.model;
        let vocab = m.text_vocab();
        let (tokens, offset) = match (modality, &m.bpe) {
            (EvalModality::Speech, Some(table)) if m.arch == Architecture::Bpe => {
                let p = table.encode(prompt);
                let mut t = p.clone();
                t.extend(table.encode(candidate));
                (t, p.len())
            }
            _ => ([prompt, candidate].concat(), prompt.len()),
        };
        let n = tokens.len();
        let run = Run {
            modality: match modality {
                EvalModality::Speech => Modality::Speech,
                EvalModality::Text => Modality::Text,
            },
            spans: None,
            words: if modality == EvalModality::Text { tokens.clone() } else { Vec::new() },
            origin: Origin { w0: 0, w1: 0, f0: 0, f1: n },
            tokens,
        };
        let mut seq = InterleavedSequence { runs: vec![run] };
        let planned = match (m.arch, modality) {
            (Architecture::Lst, EvalModality::Speech) if self.aligned => {
                let (a, b) = spans.ok_or_else(|| EvalError::Record("aligned scoring needs spans".into()))?;
                seq.runs[0].spans = Some(concat_spans(a, b, prompt.len()));
                m.plan(&seq, Strategy::Aligned(SilenceMode::Separate), &|_| 1)?
            }
            (Architecture::Lst, _) => m.plan_static(&seq)?,
            _ => PlannedSequence::token_level(&seq, &vocab),
        };
        if planned.n_units() > self.max_units {
            return Err(EvalError::Overflow {
                needed: planned.n_units(),
                capacity: self.max_units,
            });
        }
        let l = self.max_units.max(8);
        let batch = pack_batch(vec![planned], l, &vocab).map_err(ModelError::from)?;
        let row = &batch.rows[0];
        let nll = m.position_nll(row)?;
        // Position 0 holds the modality marker.
        let scores: Option<Vec<f64>> = nll[1 + offset..].iter().copied().collect();
        let scores = scores.ok_or_else(|| EvalError::Record("candidate position without a prediction".into()))?;
        Ok((scores, row.n_units()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// Mean over records of NLL(gold) − mean NLL(distractors); more negative
    /// means stronger separation.
    pub nll_diff: f64,
    pub n_records: usize,
    pub skipped: usize,
    pub units: u64,
    pub predictions: Vec<Option<usize>>,
}

/// Argmin-NLL prediction for every record. Records that overflow the
/// context are skipped; any other error aborts.
pub fn evaluate(scorer: &dyn Scorer, records: &[EvalRecord], norm: Normalization) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(EvalError::Empty { skipped: 0 });
    }
    let mut correct = 0usize;
    let mut diff_sum = 0.0;
    let mut scored = 0usize;
    let mut units = 0u64;
    let mut predictions = Vec::with_capacity(records.len());
    'records: for r in records {
        r.validate()?;
        let mut vals = Vec::with_capacity(r.candidates.len());
        for (i, c) in r.candidates.iter().enumerate() {
            let spans = r.spans.as_ref().map(|s| (&s.prompt, &s.candidates[i]));
            match score_candidate(scorer, &r.prompt, c, r.modality, spans) {
                Ok(s) => {
                    units += s.units as u64;
                    vals.push(s.value(norm));
                }
                Err(EvalError::Overflow { .. }) => {
                    predictions.push(None);
                    continue 'records;
                }
                Err(e) => return Err(e),
            }
        }
        let pred = argmin(&vals);
        predictions.push(Some(pred));
        correct += (pred == r.gold) as usize;
        let others: Vec<f64> = vals.iter().enumerate().filter(|(i, _)| *i != r.gold).map(|(_, v)| *v).collect();
        diff_sum += vals[r.gold] - others.iter().sum::<f64>() / others.len() as f64;
        scored += 1;
    }
    let skipped = records.len() - scored;
    if scored == 0 {
        return Err(EvalError::Empty { skipped });
    }
    Ok(EvalReport {
        accuracy: correct as f64 / scored as f64,
        nll_diff: diff_sum / scored as f64,
        n_records: scored,
        skipped,
        units,
        predictions,
    })
}

/// Index of the smallest value; ties go to the lowest index.
fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x < v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Uniform over `v` symbols.
    struct Uniform(usize);

    impl Scorer for Uniform {
        fn token_nll(
            &self,
            _: &[u32],
            c: &[u32],
            _: EvalModality,
            _: Option<(&AlignmentSpanList, &AlignmentSpanList)>,
        ) -> Result<(Vec<f64>, usize)> {
            Ok((vec![(self.0 as f64).ln(); c.len()], c.len()))
        }
    }

    /// NLL is the token id, so smaller ids win.
    struct ById(f64);

    impl Scorer for ById {
        fn token_nll(
            &self,
            _: &[u32],
            c: &[u32],
            _: EvalModality,
            _: Option<(&AlignmentSpanList, &AlignmentSpanList)>,
        ) -> Result<(Vec<f64>, usize)> {
            Ok((c.iter().map(|&t| t as f64 + self.0).collect(), 0))
        }
    }

    fn rec(cands: Vec<Vec<u32>>, gold: usize) -> EvalRecord {
        EvalRecord {
            prompt: vec![1, 2],
            candidates: cands,
            gold,
            modality: EvalModality::Text,
            spans: None,
        }
    }

    #[test]
    fn uniform_closed_form() {
        let s = score_candidate(&Uniform(4), &[0], &[1, 2, 3], EvalModality::Text, None).unwrap();
        assert!((s.total - 3.0 * 4f64.ln()).abs() < 1e-12);
        assert!((s.per_token - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_candidate_rejected() {
        let r = score_candidate(&Uniform(4), &[0], &[], EvalModality::Text, None);
        assert!(matches!(r, Err(EvalError::EmptyCandidate)));
    }

    #[test]
    fn equal_nll_gives_zero_difference() {
        let rep = evaluate(&Uniform(7), &[rec(vec![vec![1, 2], vec![3, 4]], 1)], Normalization::Sum).unwrap();
        assert_eq!(rep.nll_diff, 0.0);
    }

    #[test]
    fn offset_does_not_change_predictions() {
        let recs = vec![rec(vec![vec![5, 5], vec![1, 2], vec![9, 0]], 1), rec(vec![vec![3], vec![2]], 0)];
        let a = evaluate(&ById(0.0), &recs, Normalization::Sum).unwrap();
        let b = evaluate(&ById(100.0), &recs, Normalization::Sum).unwrap();
        assert_eq!(a.predictions, b.predictions);
        assert_eq!(a.accuracy, 0.5);
    }

    #[test]
    fn record_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("set.jsonl");
        let recs = vec![rec(vec![vec![1], vec![2]], 0)];
        write_records(&p, &recs).unwrap();
        assert_eq!(read_records(&p).unwrap(), recs);
        let line = std::fs::read_to_string(&p).unwrap();
        assert!(line.contains("\"modality\":\"text\""));
    }

    #[test]
    fn bad_gold_rejected() {
        assert!(rec(vec![vec![1], vec![2]], 2).validate().is_err());
    }
}
