//! Token-based cost accounting for LLM calls and human re-annotation.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRates {
    /// USD per one million prompt tokens.
    pub in_per_1m: f64,
    /// USD per one million completion tokens.
    pub out_per_1m: f64,
    /// USD per human labelling unit.
    pub human_per_unit: f64,
    /// Tokens per human labelling unit.
    pub unit_tokens: u64,
}

impl Default for CostRates {
    fn default() -> Self {
        CostRates {
            in_per_1m: 3.00,
            out_per_1m: 6.00,
            human_per_unit: 0.11,
            unit_tokens: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cost {
    pub llm_usd: f64,
    pub human_usd: f64,
    pub total_usd: f64,
}

/// Running totals. Every field only ever grows.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    pub rates: CostRates,
    pub llm_prompt_tokens: u64,
    pub llm_completion_tokens: u64,
    pub llm_calls: u64,
    pub human_tokens: u64,
    pub human_units: u64,
    pub human_items: u64,
}

impl CostLedger {
    pub fn new(rates: CostRates) -> Self {
        CostLedger {
            rates,
            ..Default::default()
        }
    }

    pub fn record_llm(&mut self, prompt_tokens: u64, completion_tokens: u64) {
        self.llm_prompt_tokens += prompt_tokens;
        self.llm_completion_tokens += completion_tokens;
        self.llm_calls += 1;
    }

    /// One re-annotated item is billed `ceil(tokens / unit_tokens)` units.
    pub fn record_human(&mut self, tokens: u64) {
        self.human_tokens += tokens;
        self.human_units += tokens.div_ceil(self.rates.unit_tokens.max(1));
        self.human_items += 1;
    }

    pub fn cost(&self) -> Cost {
        let llm_usd = (self.rates.in_per_1m * self.llm_prompt_tokens as f64
            + self.rates.out_per_1m * self.llm_completion_tokens as f64)
            / 1e6;
        let human_usd = self.rates.human_per_unit * self.human_units as f64;
        Cost {
            llm_usd,
            human_usd,
            total_usd: llm_usd + human_usd,
        }
    }
}

/// Rough token count of a text: one token per four characters, at least one.
pub fn estimate_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4).max(1)
}
