use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{EvalError, Result};
use crate::corpus::Utterance;
use crate::interleave::{pack_batch, InterleavedSequence};
use crate::model::{Architecture, Model, ModelError};
use crate::patching::{SegmentKind, SilenceMode, Strategy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterStats {
    /// Mean pairwise cosine similarity between patches of the same word.
    pub within: f64,
    /// Mean pairwise cosine similarity between patches of different words.
    pub between: f64,
    /// Mean silhouette under cosine distance.
    pub silhouette: f64,
    pub n_words: usize,
    pub n_points: usize,
    /// Words dropped for having fewer than two occurrences.
    pub excluded: Vec<u32>,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Cluster statistics of labelled vectors. Labels with a single point are
/// excluded before anything is computed.
pub fn cluster_metrics(points: &[(u32, Vec<f64>)]) -> Result<ClusterStats> {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for (l, _) in points {
        *counts.entry(*l).or_default() += 1;
    }
    let excluded: Vec<u32> = counts.iter().filter(|(_, &c)| c < 2).map(|(&l, _)| l).collect();
    let pts: Vec<&(u32, Vec<f64>)> = points.iter().filter(|(l, _)| counts[l] >= 2).collect();
    let n_words = counts.values().filter(|&&c| c >= 2).count();
    if n_words < 2 {
        return Err(EvalError::Config(format!("{n_words} words with two or more patches; need 2")));
    }
    let n = pts.len();
    let mut sim = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let s = cosine(&pts[i].1, &pts[j].1);
            sim[i * n + j] = s;
            sim[j * n + i] = s;
        }
    }
    let (mut w_sum, mut w_n, mut b_sum, mut b_n) = (0.0, 0u64, 0.0, 0u64);
    for i in 0..n {
        for j in i + 1..n {
            if pts[i].0 == pts[j].0 {
                w_sum += sim[i * n + j];
                w_n += 1;
            } else {
                b_sum += sim[i * n + j];
                b_n += 1;
            }
        }
    }
    let labels: Vec<u32> = counts.iter().filter(|(_, &c)| c >= 2).map(|(&l, _)| l).collect();
    let mut sil = 0.0;
    for i in 0..n {
        let mut dist: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
        for j in 0..n {
            if i != j {
                let e = dist.entry(pts[j].0).or_default();
                e.0 += 1.0 - sim[i * n + j];
                e.1 += 1;
            }
        }
        let own = pts[i].0;
        let a = dist[&own].0 / dist[&own].1 as f64;
        let b = labels
            .iter()
            .filter(|&&l| l != own)
            .map(|l| dist[l].0 / dist[l].1 as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        sil += if m > 0.0 { (b - a) / m } else { 0.0 };
    }
    Ok(ClusterStats {
        within: w_sum / w_n as f64,
        between: b_sum / b_n as f64,
        silhouette: sil / n as f64,
        n_words,
        n_points: n,
        excluded,
    })
}

/// Local-encoder embeddings of word patches under aligned patching, labelled
/// by word id. Only words in `words` are kept (all when empty), at most
/// `per_word` occurrences each.
pub fn extract_word_patches(
    model: &Model,
    corpus: &[Utterance],
    words: &[u32],
    per_word: usize,
) -> Result<Vec<(u32, Vec<f64>)>> {
    if model.arch != Architecture::Lst {
        return Err(EvalError::Config("patch embeddings need the hierarchical model".into()));
    }
    let vocab = model.text_vocab();
    let mut taken: BTreeMap<u32, usize> = BTreeMap::new();
    let mut out = Vec::new();
    for u in corpus {
        if u.spans.len() != u.n_words() {
            return Err(EvalError::Config("aligned extraction needs word alignments".into()));
        }
        let seq = InterleavedSequence::pure_speech(u);
        let planned = model.plan(&seq, Strategy::Aligned(SilenceMode::Separate), &|_| 1)?;
        let l = planned.n_units().max(8);
        let batch = pack_batch(vec![planned], l, &vocab).map_err(ModelError::from)?;
        let row = &batch.rows[0];
        let emb = model.patch_embeddings(row)?;
        let kinds = row.plan.units.iter().filter_map(|unit| match unit.kind {
            crate::interleave::UnitKind::Patch(k) => Some(k),
            _ => None,
        });
        let mut word = 0usize;
        for (k, e) in kinds.zip(emb) {
            if k != SegmentKind::Word {
                continue;
            }
            let w = u.text_tokens[word];
            word += 1;
            if !words.is_empty() && !words.contains(&w) {
                continue;
            }
            let c = taken.entry(w).or_default();
            if *c < per_word {
                *c += 1;
                out.push((w, e));
            }
        }
    }
    Ok(out)
}

pub fn cluster_stats(model: &Model, corpus: &[Utterance], words: &[u32], per_word: usize) -> Result<ClusterStats> {
    cluster_metrics(&extract_word_patches(model, corpus, words, per_word)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ideal_geometry() {
        let mut pts = Vec::new();
        for w in 0..3u32 {
            let mut v = vec![0.0; 3];
            v[w as usize] = 2.0;
            pts.push((w, v.clone()));
            pts.push((w, v));
        }
        pts.push((7, vec![1.0, 1.0, 1.0]));
        let s = cluster_metrics(&pts).unwrap();
        assert_eq!(s.within, 1.0);
        assert_eq!(s.between, 0.0);
        assert!((s.silhouette - 1.0).abs() < 1e-12);
        assert_eq!(s.excluded, vec![7]);
        assert_eq!(s.n_words, 3);
    }

    #[test]
    fn needs_two_words() {
        assert!(cluster_metrics(&[(0, vec![1.0]), (0, vec![2.0])]).is_err());
    }
}
