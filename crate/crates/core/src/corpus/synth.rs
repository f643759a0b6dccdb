use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{AlignmentSpan, AlignmentSpanList, CorpusError, Result, Utterance};
use crate::rng::{bernoulli, bernoulli_threshold, rng_for, Rng};

/// Knobs of the synthetic generator. Frame counts are geometric on `{1, 2, …}`
/// with the configured means, truncated at `max_frames`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub speech_vocab: u32,
    pub lexicon_size: u32,
    pub n_topics: u32,
    pub lexicon_seed: u64,
    pub mean_word_frames: f64,
    pub mean_sil_frames: f64,
    pub sil_prob: f64,
    pub max_frames: usize,
    /// Reserved ids `0..silence_tokens` render silence.
    pub silence_tokens: u32,
    /// Probability that a frame emits its phone's token rather than a uniform one.
    pub fidelity: f64,
    /// Probability that the next word is the topic successor of the current one.
    pub successor_prob: f64,
    /// Probability that the second half of an utterance repeats its first half.
    pub repeat_prob: f64,
    pub min_words: usize,
    pub max_words: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            speech_vocab: super::DEFAULT_SPEECH_VOCAB,
            lexicon_size: 40,
            n_topics: 4,
            lexicon_seed: 0,
            mean_word_frames: 5.8,
            mean_sil_frames: 3.7,
            sil_prob: 0.3,
            max_frames: 200,
            silence_tokens: 4,
            fidelity: 0.8,
            successor_prob: 0.95,
            repeat_prob: 0.0,
            min_words: 6,
            max_words: 14,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CorpusError::Config(m));
        if !(self.mean_word_frames >= 1.0) || !(self.mean_sil_frames >= 1.0) {
            return bad(format!(
                "mean frame counts must be at least 1 (word {}, silence {})",
                self.mean_word_frames, self.mean_sil_frames
            ));
        }
        if !(0.0..=1.0).contains(&self.sil_prob) {
            return bad(format!("sil_prob {} outside [0, 1]", self.sil_prob));
        }
        if [self.fidelity, self.successor_prob, self.repeat_prob]
            .iter()
            .any(|p| !(0.0..=1.0).contains(p))
        {
            return bad("fidelity, successor_prob and repeat_prob must lie in [0, 1]".into());
        }
        if self.max_frames == 0 {
            return bad("max_frames must be positive".into());
        }
        if self.silence_tokens == 0 || self.silence_tokens >= self.speech_vocab {
            return bad(format!(
                "silence_tokens {} must be in 1..{}",
                self.silence_tokens, self.speech_vocab
            ));
        }
        if self.n_topics == 0 || self.lexicon_size < self.n_topics {
            return bad(format!(
                "need at least one word per topic ({} words, {} topics)",
                self.lexicon_size, self.n_topics
            ));
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return bad(format!("word range {}..={} is empty", self.min_words, self.max_words));
        }
        Ok(())
    }
}

/// Subword count (1 to 3) of a synthetic word, a fixed function of its id.
pub fn subword_count(word: u32) -> usize {
    1 + (crate::rng::substream(0, "subwords", word as u64) % 3) as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    /// Per-word phone prototype: the non-silence tokens its frames emit.
    pub phones: Vec<Vec<u32>>,
    pub successor: Vec<u32>,
    pub subwords: Vec<usize>,
    pub n_topics: u32,
}

impl Lexicon {
    pub fn build(cfg: &SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_for(cfg.lexicon_seed, "lexicon", 0);
        let n = cfg.lexicon_size as usize;
        let phones = (0..n)
            .map(|_| {
                let k = rng.random_range(3..=5);
                (0..k)
                    .map(|_| rng.random_range(cfg.silence_tokens..cfg.speech_vocab))
                    .collect()
            })
            .collect();
        let subwords = (0..n as u32).map(subword_count).collect();
        let mut successor = vec![0u32; n];
        for topic in 0..cfg.n_topics {
            let mut words: Vec<u32> = (topic..cfg.lexicon_size).step_by(cfg.n_topics as usize).collect();
            for i in (1..words.len()).rev() {
                let j = rng.random_range(0..=i);
                words.swap(i, j);
            }
            for i in 0..words.len() {
                successor[words[i] as usize] = words[(i + 1) % words.len()];
            }
        }
        Ok(Self {
            phones,
            successor,
            subwords,
            n_topics: cfg.n_topics,
        })
    }

    pub fn len(&self) -> usize {
        self.phones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phones.is_empty()
    }

    pub fn topic(&self, word: u32) -> u32 {
        word % self.n_topics
    }

    pub fn topic_words(&self, topic: u32) -> impl Iterator<Item = u32> + '_ {
        (topic..self.len() as u32).step_by(self.n_topics as usize)
    }
}

/// Generator bound to one lexicon.
#[derive(Debug, Clone)]
pub struct Synthesizer {
    cfg: SynthConfig,
    lexicon: Lexicon,
    word_continue: u64,
    sil_continue: u64,
    sil_insert: u64,
    fidelity: u64,
    successor: u64,
    repeat: u64,
}

impl Synthesizer {
    pub fn new(cfg: SynthConfig) -> Result<Self> {
        let lexicon = Lexicon::build(&cfg)?;
        Ok(Self {
            word_continue: bernoulli_threshold(1.0 - 1.0 / cfg.mean_word_frames),
            sil_continue: bernoulli_threshold(1.0 - 1.0 / cfg.mean_sil_frames),
            sil_insert: bernoulli_threshold(cfg.sil_prob),
            fidelity: bernoulli_threshold(cfg.fidelity),
            successor: bernoulli_threshold(cfg.successor_prob),
            repeat: bernoulli_threshold(cfg.repeat_prob),
            cfg,
            lexicon,
        })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.cfg
    }

    pub fn lexicon(&self) -> &Lexicon {
        &self.lexicon
    }

    fn duration(&self, rng: &mut Rng, cont: u64) -> usize {
        let mut n = 1;
        while n < self.cfg.max_frames && bernoulli(rng, cont) {
            n += 1;
        }
        n
    }

    fn silence(&self, rng: &mut Rng, out: &mut Vec<u32>) {
        let n = self.duration(rng, self.sil_continue);
        for _ in 0..n {
            out.push(rng.random_range(0..self.cfg.silence_tokens));
        }
    }

    /// Word sequence of one utterance: a topic, then a successor-biased walk
    /// inside it. Sometimes the second half copies the first.
    pub fn words(&self, rng: &mut Rng, n_words: usize) -> Vec<u32> {
        let topic = rng.random_range(0..self.lexicon.n_topics);
        let pool: Vec<u32> = self.lexicon.topic_words(topic).collect();
        let mut w = pool[rng.random_range(0..pool.len())];
        let mut out = Vec::with_capacity(n_words);
        for _ in 0..n_words {
            out.push(w);
            w = if bernoulli(rng, self.successor) {
                self.lexicon.successor[w as usize]
            } else {
                pool[rng.random_range(0..pool.len())]
            };
        }
        if n_words >= 2 && bernoulli(rng, self.repeat) {
            let h = n_words.div_ceil(2);
            for i in h..n_words {
                out[i] = out[i - h];
            }
        }
        out
    }

    /// Renders a word sequence to frames with alignment.
    pub fn render(&self, rng: &mut Rng, words: &[u32]) -> Utterance {
        let mut speech = Vec::new();
        let mut spans = Vec::with_capacity(words.len());
        for (k, &w) in words.iter().enumerate() {
            if bernoulli(rng, self.sil_insert) {
                self.silence(rng, &mut speech);
            }
            let n = self.duration(rng, self.word_continue);
            let phones = &self.lexicon.phones[w as usize];
            let b = speech.len();
            for j in 0..n {
                let phone = phones[j * phones.len() / n];
                let tok = if bernoulli(rng, self.fidelity) {
                    phone
                } else {
                    rng.random_range(self.cfg.silence_tokens..self.cfg.speech_vocab)
                };
                speech.push(tok);
            }
            spans.push(AlignmentSpan {
                unit: k,
                b,
                e: speech.len() - 1,
            });
        }
        if bernoulli(rng, self.sil_insert) {
            self.silence(rng, &mut speech);
        }
        Utterance {
            text_tokens: words.to_vec(),
            speech_tokens: speech,
            spans: AlignmentSpanList::new(spans),
        }
    }

    pub fn utterance(&self, seed: u64, n_words: usize) -> Result<Utterance> {
        if n_words == 0 {
            return Err(CorpusError::Config("an utterance needs at least one word".into()));
        }
        let mut rng = rng_for(seed, "utterance", 0);
        let words = self.words(&mut rng, n_words);
        Ok(self.render(&mut rng, &words))
    }

    /// `n` utterances with word counts drawn from the configured range.
    pub fn corpus(&self, seed: u64, n: usize) -> Vec<Utterance> {
        (0..n as u64)
            .map(|i| {
                let mut rng = rng_for(seed, "corpus", i);
                let n_words = rng.random_range(self.cfg.min_words..=self.cfg.max_words);
                let words = self.words(&mut rng, n_words);
                self.render(&mut rng, &words)
            })
            .collect()
    }

    /// Smallest corpus whose speech-token count reaches `tokens`.
    pub fn corpus_with_tokens(&self, seed: u64, tokens: usize) -> Vec<Utterance> {
        let mut out = Vec::new();
        let mut total = 0;
        let mut i = 0u64;
        while total < tokens {
            let mut rng = rng_for(seed, "corpus", i);
            let n_words = rng.random_range(self.cfg.min_words..=self.cfg.max_words);
            let words = self.words(&mut rng, n_words);
            let u = self.render(&mut rng, &words);
            total += u.speech_tokens.len();
            out.push(u);
            i += 1;
        }
        out
    }
}

pub fn synth_utterance(seed: u64, n_words: usize, cfg: &SynthConfig) -> Result<Utterance> {
    Synthesizer::new(cfg.clone())?.utterance(seed, n_words)
}
