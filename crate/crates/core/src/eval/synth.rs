use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{EvalError, EvalModality, EvalRecord, RecordSpans, Result};
use crate::corpus::{AlignmentSpan, AlignmentSpanList, Synthesizer, Utterance};
use crate::rng::{rng_for, seeded};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSetConfig {
    pub n_records: usize,
    /// 2 or 4.
    pub n_candidates: usize,
    pub modality: EvalModality,
    /// Words of the held-out utterance shown as prompt.
    pub prompt_words: usize,
    /// Continuation length: frames for speech, words for text.
    pub continuation: usize,
}

impl Default for EvalSetConfig {
    fn default() -> Self {
        Self {
            n_records: 200,
            n_candidates: 2,
            modality: EvalModality::Speech,
            prompt_words: 3,
            continuation: 16,
        }
    }
}

/// Prompt end (exclusive frame) after `k` words.
fn prompt_end(u: &Utterance, k: usize) -> usize {
    u.spans.spans()[k - 1].e + 1
}

/// Spans overlapping `[f0, f1)`, clipped and shifted to start at 0.
fn clip_spans(u: &Utterance, f0: usize, f1: usize) -> AlignmentSpanList {
    let v = u
        .spans
        .spans()
        .iter()
        .filter(|s| s.e >= f0 && s.b < f1)
        .enumerate()
        .map(|(k, s)| AlignmentSpan {
            unit: k,
            b: s.b.max(f0) - f0,
            e: s.e.min(f1 - 1) - f0,
        })
        .collect();
    AlignmentSpanList::new(v)
}

/// Continuation of `u` starting at word `k`: `(tokens, spans)`, or `None` if too short.
fn continuation(u: &Utterance, k: usize, cfg: &EvalSetConfig) -> Option<(Vec<u32>, Option<AlignmentSpanList>)> {
    match cfg.modality {
        EvalModality::Text => {
            let end = k + cfg.continuation;
            (end <= u.n_words()).then(|| (u.text_tokens[k..end].to_vec(), None))
        }
        EvalModality::Speech => {
            let f0 = if k == 0 { 0 } else { prompt_end(u, k) };
            let f1 = f0 + cfg.continuation;
            (f1 <= u.speech_tokens.len()).then(|| (u.speech_tokens[f0..f1].to_vec(), Some(clip_spans(u, f0, f1))))
        }
    }
}

/// Builds records from held-out utterances. The gold candidate is the true
/// continuation; each distractor is an equally long continuation cut at a
/// word boundary from an utterance of another topic. `topic` maps a word id
/// to its topic.
pub fn build_eval_set(
    held_out: &[Utterance],
    topic: &dyn Fn(u32) -> u32,
    cfg: &EvalSetConfig,
    seed: u64,
) -> Result<Vec<EvalRecord>> {
    if !(cfg.n_candidates == 2 || cfg.n_candidates == 4) {
        return Err(EvalError::Config(format!("{} candidates; use 2 or 4", cfg.n_candidates)));
    }
    if cfg.prompt_words == 0 || cfg.continuation == 0 {
        return Err(EvalError::Config("prompt and continuation must be non-empty".into()));
    }
    let usable: Vec<usize> = (0..held_out.len())
        .filter(|&i| {
            let u = &held_out[i];
            u.n_words() > cfg.prompt_words && continuation(u, cfg.prompt_words, cfg).is_some()
        })
        .collect();
    if usable.is_empty() {
        return Err(EvalError::Config("no held-out utterance is long enough".into()));
    }
    let topic_of = |u: &Utterance| topic(u.text_tokens[0]);
    let mut out = Vec::with_capacity(cfg.n_records);
    let mut attempt = 0u64;
    while out.len() < cfg.n_records {
        if attempt > 100 * cfg.n_records as u64 + 1000 {
            return Err(EvalError::Config("could not find enough distractors of other topics".into()));
        }
        let mut rng = rng_for(seed, "eval-record", attempt);
        attempt += 1;
        let ui = usable[rng.random_range(0..usable.len())];
        let u = &held_out[ui];
        let t = topic_of(u);
        let prompt = match cfg.modality {
            EvalModality::Text => u.text_tokens[..cfg.prompt_words].to_vec(),
            EvalModality::Speech => u.speech_tokens[..prompt_end(u, cfg.prompt_words)].to_vec(),
        };
        let (gold_tokens, gold_spans) = continuation(u, cfg.prompt_words, cfg).expect("usable utterance");
        let mut cands = vec![(gold_tokens, gold_spans)];
        let mut tries = 0;
        while cands.len() < cfg.n_candidates && tries < 200 {
            tries += 1;
            let d = &held_out[rng.random_range(0..held_out.len())];
            if topic_of(d) == t || d.n_words() < 2 {
                continue;
            }
            let k = rng.random_range(1..d.n_words());
            if let Some(c) = continuation(d, k, cfg) {
                if cands.iter().all(|x| x.0 != c.0) {
                    cands.push(c);
                }
            }
        }
        if cands.len() < cfg.n_candidates {
            continue;
        }
        let gold = rng.random_range(0..cfg.n_candidates);
        cands.swap(0, gold);
        let spans = (cfg.modality == EvalModality::Speech).then(|| RecordSpans {
            prompt: clip_spans(u, 0, prompt.len()),
            candidates: cands.iter().map(|c| c.1.clone().expect("speech spans")).collect(),
        });
        out.push(EvalRecord {
            prompt,
            candidates: cands.into_iter().map(|c| c.0).collect(),
            gold,
            modality: cfg.modality,
            spans,
        });
    }
    Ok(out)
}

/// Minimal-pair records drawn straight from the generator. Every candidate
/// shares the prompt words and is rendered with the same random stream, so
/// durations, silences and corrupted frames coincide; only the words after
/// the prompt differ. Distractor words are a walk in another topic. Speech only.
pub fn build_matched_eval_set(synth: &Synthesizer, cfg: &EvalSetConfig, seed: u64) -> Result<Vec<EvalRecord>> {
    if !(cfg.n_candidates == 2 || cfg.n_candidates == 4) {
        return Err(EvalError::Config(format!("{} candidates; use 2 or 4", cfg.n_candidates)));
    }
    if cfg.modality != EvalModality::Speech || cfg.prompt_words == 0 || cfg.continuation == 0 {
        return Err(EvalError::Config("matched sets need speech, a prompt and a continuation".into()));
    }
    let lex = synth.lexicon();
    if lex.n_topics < 2 {
        return Err(EvalError::Config("distractors need a second topic".into()));
    }
    // Enough words that the continuation almost always fits.
    let cont_words = cfg.continuation + 1;
    let n_words = cfg.prompt_words + cont_words;
    let mut out = Vec::with_capacity(cfg.n_records);
    let mut attempt = 0u64;
    while out.len() < cfg.n_records {
        if attempt > 100 * cfg.n_records as u64 + 1000 {
            return Err(EvalError::Config("continuation never fits; lower it".into()));
        }
        let mut rng = rng_for(seed, "matched-record", attempt);
        attempt += 1;
        let words = synth.words(&mut rng, n_words);
        let topic = lex.topic(words[0]);
        let mut seqs = vec![words.clone()];
        while seqs.len() < cfg.n_candidates {
            let d = synth.words(&mut rng, cont_words);
            if lex.topic(d[0]) != topic && seqs.iter().all(|s| s[cfg.prompt_words..] != d[..]) {
                seqs.push(words[..cfg.prompt_words].iter().chain(&d).copied().collect());
            }
        }
        let render_seed: u64 = rng.random();
        let rendered: Vec<Utterance> = seqs.iter().map(|w| synth.render(&mut seeded(render_seed), w)).collect();
        let u = &rendered[0];
        let f0 = prompt_end(u, cfg.prompt_words);
        let f1 = f0 + cfg.continuation;
        if rendered.iter().any(|r| r.speech_tokens.len() < f1) {
            continue;
        }
        let gold = rng.random_range(0..cfg.n_candidates);
        let mut order: Vec<usize> = (0..cfg.n_candidates).collect();
        order.swap(0, gold);
        let prompt = u.speech_tokens[..f0].to_vec();
        out.push(EvalRecord {
            candidates: order.iter().map(|&i| rendered[i].speech_tokens[f0..f1].to_vec()).collect(),
            spans: Some(RecordSpans {
                prompt: clip_spans(u, 0, f0),
                candidates: order.iter().map(|&i| clip_spans(&rendered[i], f0, f1)).collect(),
            }),
            prompt,
            gold,
            modality: EvalModality::Speech,
        });
    }
    Ok(out)
}
