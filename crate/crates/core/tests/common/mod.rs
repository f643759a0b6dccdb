//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use lst_core::corpus::{AlignmentSpan, AlignmentSpanList};
use lst_core::patching::{PatchSegmentation, SilenceMode};
use lst_core::rng::Rng;
use rand::Rng as _;

/// Frame label for the brute-force segmenters: frames with equal labels in a
/// contiguous run form one patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Block(usize),
    Word(usize, usize),
    Silence(usize),
    Trailing,
}

/// Groups consecutive equal labels into inclusive ranges.
pub fn runs(labels: &[Label]) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    for (f, l) in labels.iter().enumerate() {
        match out.last_mut() {
            Some(last) if labels[last.1] == *l => last.1 = f,
            _ => out.push((f, f)),
        }
    }
    out
}

pub fn ranges(seg: &PatchSegmentation) -> Vec<(usize, usize)> {
    seg.segments.iter().map(|s| (s.start, s.end)).collect()
}

pub fn static_oracle(t: usize, p: usize) -> Vec<(usize, usize)> {
    runs(&(0..t).map(|f| Label::Block(f / p)).collect::<Vec<_>>())
}

fn word_of(spans: &[AlignmentSpan], f: usize) -> Option<usize> {
    spans.iter().position(|s| s.b <= f && f <= s.e)
}

/// Silence frames are numbered by the gap they sit in (the index of the next word).
fn gap_of(spans: &[AlignmentSpan], f: usize) -> usize {
    spans.iter().filter(|s| s.e < f).count()
}

pub fn aligned_oracle(t: usize, spans: &[AlignmentSpan], mode: SilenceMode) -> Vec<(usize, usize)> {
    let labels: Vec<Label> = (0..t)
        .map(|f| match word_of(spans, f) {
            Some(k) => Label::Word(k, 0),
            None => {
                let gap = gap_of(spans, f);
                match mode {
                    SilenceMode::Separate => Label::Silence(gap),
                    SilenceMode::Merged if gap < spans.len() => Label::Word(gap, 0),
                    SilenceMode::Merged => Label::Trailing,
                }
            }
        })
        .collect();
    runs(&labels)
}

/// Piece of offset `o` when `n` frames are cut into `k` near-equal pieces,
/// longer ones first.
fn piece(o: usize, n: usize, k: usize) -> usize {
    let (q, r) = (n / k, n % k);
    if o < r * (q + 1) {
        o / (q + 1)
    } else {
        r + (o - r * (q + 1)) / q
    }
}

pub fn bpe_aligned_oracle(t: usize, spans: &[AlignmentSpan], subwords: &[usize]) -> Vec<(usize, usize)> {
    let labels: Vec<Label> = (0..t)
        .map(|f| match word_of(spans, f) {
            Some(k) => {
                let s = spans[k];
                Label::Word(k, piece(f - s.b, s.len(), subwords[k]))
            }
            None => Label::Silence(gap_of(spans, f)),
        })
        .collect();
    runs(&labels)
}

/// Random sorted, non-overlapping span list over `t` frames.
pub fn random_spans(rng: &mut Rng, t: usize) -> AlignmentSpanList {
    let mut spans = Vec::new();
    let mut f = 0;
    while f < t {
        f += rng.random_range(0..4);
        if f >= t {
            break;
        }
        let len = rng.random_range(1..=12).min(t - f);
        spans.push(AlignmentSpan {
            unit: spans.len(),
            b: f,
            e: f + len - 1,
        });
        f += len;
    }
    AlignmentSpanList::new(spans)
}

/// True when the segments cover `0..t` exactly once, in order.
pub fn tiles(seg: &PatchSegmentation) -> bool {
    let mut cover = vec![0u8; seg.t];
    for s in &seg.segments {
        if s.start > s.end || s.end >= seg.t {
            return false;
        }
        for c in &mut cover[s.start..=s.end] {
            *c += 1;
        }
    }
    cover.iter().all(|&c| c == 1) && seg.segments.windows(2).all(|w| w[0].end + 1 == w[1].start)
}
