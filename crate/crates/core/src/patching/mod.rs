//! Segmentation of speech runs into patches.
//!
//! A segmentation re-tiles `[0, T)` with contiguous inclusive ranges. The
//! strategies differ only in where the boundaries fall: every `p` frames,
//! at alignment boundaries, or at subword boundaries inside aligned words.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{AlignmentSpan, AlignmentSpanList};
use crate::rng::{bernoulli, bernoulli_threshold, Rng};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PatchError {
    #[error("invalid patching config: {0}")]
    Config(String),
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("aligned patching requested but the sequence carries no alignment")]
    AlignmentMissing,
    #[error("cannot split a {frames}-frame word into {subwords} subwords")]
    Split { frames: usize, subwords: usize },
}

pub type Result<T> = std::result::Result<T, PatchError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentKind {
    Word,
    Silence,
    Static,
    Merged,
}

/// Inclusive frame range `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub kind: SegmentKind,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSegmentation {
    pub t: usize,
    pub segments: Vec<Segment>,
}

impl PatchSegmentation {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// True when segments are non-empty, sorted, contiguous and cover `[0, t)` exactly.
    pub fn is_tiling(&self) -> bool {
        let mut next = 0;
        for s in &self.segments {
            if s.start != next || s.end < s.start {
                return false;
            }
            next = s.end + 1;
        }
        next == self.t
    }

    pub fn mean_size(&self) -> f64 {
        if self.segments.is_empty() {
            0.0
        } else {
            self.t as f64 / self.segments.len() as f64
        }
    }

    /// Patch index of every frame.
    pub fn frame_to_patch(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.t);
        for (i, s) in self.segments.iter().enumerate() {
            out.extend(std::iter::repeat_n(i, s.len()));
        }
        out
    }
}

pub fn static_patch(t: usize, p: usize) -> Result<PatchSegmentation> {
    if p == 0 {
        return Err(PatchError::Config("patch size must be at least 1".into()));
    }
    let segments = (0..t.div_ceil(p))
        .map(|i| Segment {
            start: i * p,
            end: ((i + 1) * p - 1).min(t - 1),
            kind: SegmentKind::Static,
        })
        .collect();
    Ok(PatchSegmentation { t, segments })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SilenceMode {
    #[default]
    Separate,
    Merged,
}

fn check_spans(t: usize, spans: &AlignmentSpanList) -> Result<()> {
    spans
        .validate(t)
        .map_err(|e| PatchError::Alignment(e.to_string()))
}

/// Word and silence pieces in frame order, before any merging.
fn alignment_pieces(t: usize, spans: &[AlignmentSpan]) -> Vec<Segment> {
    let mut out = Vec::with_capacity(2 * spans.len() + 1);
    let mut next = 0;
    for s in spans {
        if s.b > next {
            out.push(Segment {
                start: next,
                end: s.b - 1,
                kind: SegmentKind::Silence,
            });
        }
        out.push(Segment {
            start: s.b,
            end: s.e,
            kind: SegmentKind::Word,
        });
        next = s.e + 1;
    }
    if next < t {
        out.push(Segment {
            start: next,
            end: t - 1,
            kind: SegmentKind::Silence,
        });
    }
    out
}

pub fn aligned_patch(t: usize, spans: &AlignmentSpanList, mode: SilenceMode) -> Result<PatchSegmentation> {
    check_spans(t, spans)?;
    let pieces = alignment_pieces(t, spans.spans());
    let segments = match mode {
        SilenceMode::Separate => pieces,
        SilenceMode::Merged => {
            let mut out = Vec::with_capacity(pieces.len());
            let mut pending: Option<usize> = None;
            for s in pieces {
                match s.kind {
                    SegmentKind::Silence => pending = Some(s.start),
                    _ => match pending.take() {
                        Some(start) => out.push(Segment {
                            start,
                            end: s.end,
                            kind: SegmentKind::Merged,
                        }),
                        None => out.push(s),
                    },
                }
            }
            if let Some(start) = pending {
                out.push(Segment {
                    start,
                    end: t - 1,
                    kind: SegmentKind::Silence,
                });
            }
            out
        }
    };
    Ok(PatchSegmentation { t, segments })
}

/// Splits `[start, end]` into `k` contiguous pieces whose lengths differ by at
/// most one, longer pieces first.
pub fn equal_split(start: usize, end: usize, k: usize) -> Result<Vec<(usize, usize)>> {
    let n = end - start + 1;
    if k == 0 || k > n {
        return Err(PatchError::Split {
            frames: n,
            subwords: k,
        });
    }
    let (q, r) = (n / k, n % k);
    let mut out = Vec::with_capacity(k);
    let mut s = start;
    for i in 0..k {
        let len = q + usize::from(i < r);
        out.push((s, s + len - 1));
        s += len;
    }
    Ok(out)
}

/// Aligned patching with each word further cut into `subwords[k]` pieces.
/// Silence stays separate.
pub fn bpe_aligned_patch(t: usize, spans: &AlignmentSpanList, subwords: &[usize]) -> Result<PatchSegmentation> {
    check_spans(t, spans)?;
    if subwords.len() != spans.len() {
        return Err(PatchError::Alignment(format!(
            "{} spans but {} subword counts",
            spans.len(),
            subwords.len()
        )));
    }
    let mut segments = Vec::new();
    let mut word = 0;
    for piece in alignment_pieces(t, spans.spans()) {
        if piece.kind == SegmentKind::Word {
            for (a, b) in equal_split(piece.start, piece.end, subwords[word])? {
                segments.push(Segment {
                    start: a,
                    end: b,
                    kind: SegmentKind::Word,
                });
            }
            word += 1;
        } else {
            segments.push(piece);
        }
    }
    Ok(PatchSegmentation { t, segments })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumSchedule {
    pub tau1: u64,
    pub tau2: u64,
}

impl CurriculumSchedule {
    pub fn new(tau1: u64, tau2: u64) -> Result<Self> {
        let s = Self { tau1, tau2 };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau1 >= self.tau2 {
            return Err(PatchError::Config(format!(
                "curriculum needs tau1 < tau2, got {} and {}",
                self.tau1, self.tau2
            )));
        }
        Ok(())
    }
}

/// Probability of alignment patching at step `u`: 1 before `tau1`, 0 from
/// `tau2`, linear in between.
pub fn curriculum_prob(u: u64, sched: &CurriculumSchedule) -> f64 {
    if u < sched.tau1 {
        1.0
    } else if u < sched.tau2 {
        1.0 - (u - sched.tau1) as f64 / (sched.tau2 - sched.tau1) as f64
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatchingMode {
    Static,
    Aligned,
    Mixed,
    Curriculum,
    BpeAligned,
}

impl std::str::FromStr for PatchingMode {
    type Err = PatchError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "static" => Self::Static,
            "aligned" => Self::Aligned,
            "mixed" => Self::Mixed,
            "curriculum" => Self::Curriculum,
            "bpe-aligned" | "bpe" => Self::BpeAligned,
            other => return Err(PatchError::Config(format!("unknown patching mode `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchingConfig {
    pub mode: PatchingMode,
    pub p: usize,
    pub silence: SilenceMode,
    pub schedule: CurriculumSchedule,
    /// Probability of the aligned branch under mixed patching.
    pub mixed_aligned_prob: f64,
}

impl Default for PatchingConfig {
    fn default() -> Self {
        Self {
            mode: PatchingMode::Static,
            p: 4,
            silence: SilenceMode::Separate,
            schedule: CurriculumSchedule { tau1: 500, tau2: 1500 },
            mixed_aligned_prob: 0.5,
        }
    }
}

impl PatchingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p == 0 {
            return Err(PatchError::Config("patch size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.mixed_aligned_prob) {
            return Err(PatchError::Config("mixed_aligned_prob outside [0, 1]".into()));
        }
        if self.mode == PatchingMode::Curriculum {
            self.schedule.validate()?;
        }
        Ok(())
    }

    pub fn needs_alignment(&self) -> bool {
        self.mode != PatchingMode::Static
    }
}

/// The concrete rule chosen for one sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    Static { p: usize },
    Aligned(SilenceMode),
    BpeAligned,
}

/// Chooses the strategy of one sequence at training step `u`, with a single
/// draw from `rng` for the stochastic modes.
pub fn select_patching(u: u64, rng: &mut Rng, cfg: &PatchingConfig, has_spans: bool) -> Result<Strategy> {
    let aligned = Strategy::Aligned(cfg.silence);
    let pick = match cfg.mode {
        PatchingMode::Static => return Ok(Strategy::Static { p: cfg.p }),
        PatchingMode::Aligned => aligned,
        PatchingMode::BpeAligned => Strategy::BpeAligned,
        PatchingMode::Mixed | PatchingMode::Curriculum => {
            let prob = match cfg.mode {
                PatchingMode::Mixed => cfg.mixed_aligned_prob,
                _ => curriculum_prob(u, &cfg.schedule),
            };
            if bernoulli(rng, bernoulli_threshold(prob)) {
                aligned
            } else {
                Strategy::Static { p: cfg.p }
            }
        }
    };
    if !has_spans {
        return Err(PatchError::AlignmentMissing);
    }
    Ok(pick)
}

/// Applies a strategy to a run of `t` frames.
pub fn segment(
    strategy: Strategy,
    t: usize,
    spans: Option<&AlignmentSpanList>,
    subwords: Option<&[usize]>,
) -> Result<PatchSegmentation> {
    match strategy {
        Strategy::Static { p } => static_patch(t, p),
        Strategy::Aligned(mode) => aligned_patch(t, spans.ok_or(PatchError::AlignmentMissing)?, mode),
        Strategy::BpeAligned => {
            let spans = spans.ok_or(PatchError::AlignmentMissing)?;
            match subwords {
                Some(sw) => bpe_aligned_patch(t, spans, sw),
                None => bpe_aligned_patch(t, spans, &vec![1; spans.len()]),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ranges(s: &PatchSegmentation) -> Vec<(usize, usize)> {
        s.segments.iter().map(|g| (g.start, g.end)).collect()
    }

    fn spans(v: &[(usize, usize)]) -> AlignmentSpanList {
        AlignmentSpanList::new(
            v.iter()
                .enumerate()
                .map(|(k, &(b, e))| AlignmentSpan { unit: k, b, e })
                .collect(),
        )
    }

    #[test]
    fn static_examples() {
        assert_eq!(ranges(&static_patch(7, 3).unwrap()), vec![(0, 2), (3, 5), (6, 6)]);
        assert!(static_patch(0, 3).unwrap().is_empty());
        assert_eq!(ranges(&static_patch(4, 4).unwrap()), vec![(0, 3)]);
        assert!(matches!(static_patch(4, 0), Err(PatchError::Config(_))));
    }

    #[test]
    fn aligned_examples() {
        let sp = spans(&[(2, 4), (6, 7)]);
        let sep = aligned_patch(8, &sp, SilenceMode::Separate).unwrap();
        assert_eq!(ranges(&sep), vec![(0, 1), (2, 4), (5, 5), (6, 7)]);
        let kinds: Vec<_> = sep.segments.iter().map(|s| s.kind).collect();
        assert_eq!(
            kinds,
            vec![SegmentKind::Silence, SegmentKind::Word, SegmentKind::Silence, SegmentKind::Word]
        );
        let merged = aligned_patch(8, &sp, SilenceMode::Merged).unwrap();
        assert_eq!(ranges(&merged), vec![(0, 4), (5, 7)]);
    }

    #[test]
    fn trailing_silence_stands_alone_when_merged() {
        let sp = spans(&[(0, 2)]);
        let merged = aligned_patch(5, &sp, SilenceMode::Merged).unwrap();
        assert_eq!(ranges(&merged), vec![(0, 2), (3, 4)]);
        assert_eq!(merged.segments[1].kind, SegmentKind::Silence);
    }

    #[test]
    fn tiled_spans_make_modes_agree() {
        let sp = spans(&[(0, 2), (3, 3), (4, 9)]);
        assert_eq!(
            ranges(&aligned_patch(10, &sp, SilenceMode::Separate).unwrap()),
            ranges(&aligned_patch(10, &sp, SilenceMode::Merged).unwrap())
        );
    }

    #[test]
    fn span_past_the_run_is_an_alignment_error() {
        let sp = spans(&[(2, 9)]);
        assert!(matches!(
            aligned_patch(8, &sp, SilenceMode::Separate),
            Err(PatchError::Alignment(_))
        ));
    }

    #[test]
    fn bpe_split_examples() {
        let sp = spans(&[(2, 7)]);
        let s = bpe_aligned_patch(8, &sp, &[2]).unwrap();
        assert_eq!(ranges(&s), vec![(0, 1), (2, 4), (5, 7)]);
        let sp = spans(&[(2, 6)]);
        let s = bpe_aligned_patch(7, &sp, &[2]).unwrap();
        assert_eq!(ranges(&s), vec![(0, 1), (2, 4), (5, 6)]);
        assert!(matches!(
            bpe_aligned_patch(7, &sp, &[6]),
            Err(PatchError::Split { frames: 5, subwords: 6 })
        ));
        let sp = spans(&[(2, 4), (6, 7)]);
        assert_eq!(
            bpe_aligned_patch(8, &sp, &[1, 1]).unwrap().segments,
            aligned_patch(8, &sp, SilenceMode::Separate).unwrap().segments
        );
    }

    #[test]
    fn curriculum_cases() {
        let s = CurriculumSchedule::new(100, 300).unwrap();
        assert_eq!(curriculum_prob(0, &s), 1.0);
        assert_eq!(curriculum_prob(99, &s), 1.0);
        assert_eq!(curriculum_prob(100, &s), 1.0);
        assert_eq!(curriculum_prob(200, &s), 0.5);
        assert_eq!(curriculum_prob(300, &s), 0.0);
        assert_eq!(curriculum_prob(10_000, &s), 0.0);
        assert!(CurriculumSchedule::new(5, 5).is_err());
    }

    #[test]
    fn selection_edges() {
        let mut rng = crate::rng::seeded(1);
        let cfg = PatchingConfig {
            mode: PatchingMode::Curriculum,
            schedule: CurriculumSchedule { tau1: 10, tau2: 20 },
            ..PatchingConfig::default()
        };
        for _ in 0..200 {
            assert_eq!(
                select_patching(0, &mut rng, &cfg, true).unwrap(),
                Strategy::Aligned(SilenceMode::Separate)
            );
            assert_eq!(select_patching(20, &mut rng, &cfg, true).unwrap(), Strategy::Static { p: 4 });
        }
        let aligned = PatchingConfig {
            mode: PatchingMode::Aligned,
            ..PatchingConfig::default()
        };
        assert_eq!(
            select_patching(0, &mut rng, &aligned, false),
            Err(PatchError::AlignmentMissing)
        );
        let st = PatchingConfig::default();
        assert!(select_patching(0, &mut rng, &st, false).is_ok());
    }

    #[test]
    fn mixed_is_fair() {
        let mut rng = crate::rng::seeded(2);
        let cfg = PatchingConfig {
            mode: PatchingMode::Mixed,
            ..PatchingConfig::default()
        };
        let n = 10_000;
        let aligned = (0..n)
            .filter(|_| matches!(select_patching(0, &mut rng, &cfg, true).unwrap(), Strategy::Aligned(_)))
            .count();
        let frac = aligned as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.02, "{frac}");
    }
}
