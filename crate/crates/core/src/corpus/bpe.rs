use std::collections::{BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::{CorpusError, Result};

/// Ordered merge list. Merge `r` creates id `base_vocab + r`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeTable {
    pub base_vocab: u32,
    pub merges: Vec<(u32, u32)>,
}

type Pair = (u32, u32);

fn add_pairs(seq: &[u32], sign: i64, idx: usize, counts: &mut HashMap<Pair, i64>, where_: &mut HashMap<Pair, HashSet<usize>>) {
    for w in seq.windows(2) {
        let p = (w[0], w[1]);
        *counts.entry(p).or_insert(0) += sign;
        if sign > 0 {
            where_.entry(p).or_default().insert(idx);
        }
    }
}

fn merge_in_place(seq: &[u32], pair: Pair, new: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(seq.len());
    let mut i = 0;
    while i < seq.len() {
        if i + 1 < seq.len() && seq[i] == pair.0 && seq[i + 1] == pair.1 {
            out.push(new);
            i += 2;
        } else {
            out.push(seq[i]);
            i += 1;
        }
    }
    out
}

/// Greedy frequency-ordered pair merging until the vocabulary reaches
/// `vocab_size` or no pair occurs twice. Ties go to the smallest pair.
pub fn train_speech_bpe(corpus: &[Vec<u32>], base_vocab: u32, vocab_size: u32) -> Result<MergeTable> {
    if vocab_size <= base_vocab {
        return Err(CorpusError::Config(format!(
            "BPE vocabulary {vocab_size} must exceed the base vocabulary {base_vocab}"
        )));
    }
    let mut seqs: Vec<Vec<u32>> = corpus.to_vec();
    let mut counts: HashMap<Pair, i64> = HashMap::new();
    let mut where_: HashMap<Pair, HashSet<usize>> = HashMap::new();
    for (i, s) in seqs.iter().enumerate() {
        add_pairs(s, 1, i, &mut counts, &mut where_);
    }
    let mut merges = Vec::new();
    while base_vocab + (merges.len() as u32) < vocab_size {
        let best = counts
            .iter()
            .filter(|(_, &c)| c >= 2)
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)))
            .map(|(&p, _)| p);
        let Some(pair) = best else { break };
        let new = base_vocab + merges.len() as u32;
        let affected: BTreeSet<usize> = where_.remove(&pair).unwrap_or_default().into_iter().collect();
        for i in affected {
            add_pairs(&seqs[i], -1, i, &mut counts, &mut where_);
            seqs[i] = merge_in_place(&seqs[i], pair, new);
            add_pairs(&seqs[i], 1, i, &mut counts, &mut where_);
        }
        counts.retain(|_, c| *c > 0);
        counts.remove(&pair);
        merges.push(pair);
    }
    Ok(MergeTable { base_vocab, merges })
}

impl MergeTable {
    pub fn vocab_size(&self) -> u32 {
        self.base_vocab + self.merges.len() as u32
    }

    fn ranks(&self) -> HashMap<Pair, u32> {
        self.merges.iter().enumerate().map(|(r, &p)| (p, r as u32)).collect()
    }

    pub fn encode(&self, seq: &[u32]) -> Vec<u32> {
        let ranks = self.ranks();
        self.encode_with(&ranks, seq)
    }

    fn encode_with(&self, ranks: &HashMap<Pair, u32>, seq: &[u32]) -> Vec<u32> {
        let mut cur = seq.to_vec();
        loop {
            let best = cur
                .windows(2)
                .filter_map(|w| ranks.get(&(w[0], w[1])).copied())
                .min();
            let Some(r) = best else { return cur };
            cur = merge_in_place(&cur, self.merges[r as usize], self.base_vocab + r);
        }
    }

    pub fn encode_all(&self, seqs: &[Vec<u32>]) -> Vec<Vec<u32>> {
        let ranks = self.ranks();
        seqs.iter().map(|s| self.encode_with(&ranks, s)).collect()
    }

    pub fn decode(&self, units: &[u32]) -> Vec<u32> {
        let mut out = Vec::with_capacity(units.len() * 2);
        for &u in units {
            self.expand(u, &mut out);
        }
        out
    }

    fn expand(&self, u: u32, out: &mut Vec<u32>) {
        if u < self.base_vocab {
            out.push(u);
        } else {
            let (a, b) = self.merges[(u - self.base_vocab) as usize];
            self.expand(a, out);
            self.expand(b, out);
        }
    }

    /// Raw tokens per encoded unit over `corpus`.
    pub fn compression_ratio(&self, corpus: &[Vec<u32>]) -> f64 {
        let raw: usize = corpus.iter().map(Vec::len).sum();
        let enc: usize = self.encode_all(corpus).iter().map(Vec::len).sum();
        if enc == 0 {
            1.0
        } else {
            raw as f64 / enc as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_merge_is_the_repeated_pair() {
        let corpus = vec![vec![3, 7, 3, 7, 3, 7], vec![3, 7, 1]];
        let t = train_speech_bpe(&corpus, 10, 11).unwrap();
        assert_eq!(t.merges, vec![(3, 7)]);
        assert_eq!(t.encode(&[3, 7, 3, 7, 1]), vec![10, 10, 1]);
    }

    #[test]
    fn ties_break_toward_smallest_pair() {
        let corpus = vec![vec![5, 6, 5, 6], vec![1, 2, 1, 2]];
        let t = train_speech_bpe(&corpus, 10, 11).unwrap();
        assert_eq!(t.merges, vec![(1, 2)]);
    }

    #[test]
    fn stops_when_nothing_repeats() {
        let t = train_speech_bpe(&[vec![1, 2, 3, 4]], 10, 100).unwrap();
        assert!(t.merges.is_empty());
    }

    #[test]
    fn vocab_must_grow() {
        assert!(matches!(train_speech_bpe(&[vec![1, 2]], 10, 10), Err(CorpusError::Config(_))));
    }

    #[test]
    fn nested_merges_decode() {
        let corpus = vec![vec![1, 1, 1, 1, 1, 1, 1, 1]];
        let t = train_speech_bpe(&corpus, 4, 7).unwrap();
        let enc = t.encode(&corpus[0]);
        assert!(enc.len() < 8);
        assert_eq!(t.decode(&enc), corpus[0]);
    }
}
