use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::interleave::PackedRow;

/// Monotone counters of data consumed and units processed. "Compute" means
/// global-model units, not wall clock.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetLedger {
    pub iterations: u64,
    /// Row slots offered to the global model: rows × context length.
    pub capacity_units: u64,
    /// Units actually occupied (text tokens, markers, separators, patches).
    pub units: u64,
    /// Units that carry speech (patches, or speech tokens for baselines).
    pub speech_units: u64,
    pub raw_speech_tokens: u64,
    pub raw_text_tokens: u64,
    pub truncated_sequences: u64,
    pub sequences: u64,
    pub aligned_sequences: u64,
}

impl BudgetLedger {
    pub fn record_row(&mut self, row: &PackedRow, capacity: usize, vocab: &Vocabulary) {
        self.capacity_units += capacity as u64;
        self.units += row.n_units() as u64;
        self.speech_units += row.speech_units() as u64;
        self.raw_speech_tokens += row.speech_tokens() as u64;
        self.raw_text_tokens += row.text_content_tokens(vocab) as u64;
    }

    pub fn raw_tokens(&self) -> u64 {
        self.raw_speech_tokens + self.raw_text_tokens
    }

    pub fn speech_fraction(&self) -> f64 {
        let t = self.raw_tokens();
        if t == 0 {
            0.0
        } else {
            self.raw_speech_tokens as f64 / t as f64
        }
    }

    /// `1 − units / baseline units`, for ledgers recorded over the same data.
    pub fn savings_vs(&self, baseline: &BudgetLedger) -> f64 {
        1.0 - self.units as f64 / baseline.units as f64
    }

    /// Savings restricted to the speech runs.
    pub fn speech_savings_vs(&self, baseline: &BudgetLedger) -> f64 {
        1.0 - self.speech_units as f64 / baseline.speech_units as f64
    }
}
