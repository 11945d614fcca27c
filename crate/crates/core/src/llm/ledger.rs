//! Exact token and cost accounting.
//!
//! Costs are `Decimal`: `tokens × rate / 1e6` is exact, so summing entry costs
//! equals the cost of summed entries. Rounding happens only for display.

use std::collections::BTreeMap;
use std::time::Duration;

use rust_decimal::prelude::*;
use serde::{Deserialize, Serialize};

/// Currency units per million tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Rates {
    pub input_per_million: Decimal,
    pub output_per_million: Decimal,
}

impl Default for Rates {
    fn default() -> Rates {
        Rates {
            input_per_million: Decimal::new(300, 2),
            output_per_million: Decimal::new(1500, 2),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub scope: String,
    pub request_count: u64,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub cache_hits: u64,
    pub failed_calls: u64,
    #[serde(with = "duration_ms")]
    pub wall_time: Duration,
}

impl LedgerEntry {
    pub fn new(scope: impl Into<String>, input_tokens: u64, output_tokens: u64) -> LedgerEntry {
        LedgerEntry {
            scope: scope.into(),
            input_tokens,
            output_tokens,
            ..LedgerEntry::default()
        }
    }

    pub fn total_tokens(&self) -> u64 {
        self.input_tokens + self.output_tokens
    }

    /// Field-wise sum; the scope of `self` is kept.
    pub fn combine(&self, other: &LedgerEntry) -> LedgerEntry {
        LedgerEntry {
            scope: self.scope.clone(),
            request_count: self.request_count + other.request_count,
            input_tokens: self.input_tokens + other.input_tokens,
            output_tokens: self.output_tokens + other.output_tokens,
            cache_hits: self.cache_hits + other.cache_hits,
            failed_calls: self.failed_calls + other.failed_calls,
            wall_time: self.wall_time + other.wall_time,
        }
    }
}

/// Full-precision cost of an entry.
pub fn compute_cost(entry: &LedgerEntry, rates: &Rates) -> Decimal {
    let million = Decimal::from(1_000_000u32);
    (Decimal::from(entry.input_tokens) * rates.input_per_million
        + Decimal::from(entry.output_tokens) * rates.output_per_million)
        / million
}

/// Round half-up (away from zero) to `places` decimals.
pub fn display_cost(cost: Decimal, places: u32) -> Decimal {
    cost.round_dp_with_strategy(places, RoundingStrategy::MidpointAwayFromZero)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageLedger {
    pub rates: Rates,
    entries: BTreeMap<String, LedgerEntry>,
}

impl UsageLedger {
    pub fn new(rates: Rates) -> UsageLedger {
        UsageLedger {
            rates,
            entries: BTreeMap::new(),
        }
    }

    fn entry_mut(&mut self, scope: &str) -> &mut LedgerEntry {
        self.entries
            .entry(scope.to_string())
            .or_insert_with(|| LedgerEntry {
                scope: scope.to_string(),
                ..LedgerEntry::default()
            })
    }

    /// One completed provider call.
    pub fn record_call(
        &mut self,
        scope: &str,
        input_tokens: u64,
        output_tokens: u64,
        cache_hit: bool,
    ) {
        let entry = self.entry_mut(scope);
        entry.request_count += 1;
        entry.input_tokens += input_tokens;
        entry.output_tokens += output_tokens;
        if cache_hit {
            entry.cache_hits += 1;
        }
    }

    pub fn record_failure(&mut self, scope: &str) {
        self.entry_mut(scope).failed_calls += 1;
    }

    pub fn add_wall_time(&mut self, scope: &str, elapsed: Duration) {
        self.entry_mut(scope).wall_time += elapsed;
    }

    pub fn entry(&self, scope: &str) -> Option<&LedgerEntry> {
        self.entries.get(scope)
    }

    pub fn entries(&self) -> impl Iterator<Item = &LedgerEntry> {
        self.entries.values()
    }

    pub fn total(&self) -> LedgerEntry {
        self.entries
            .values()
            .fold(LedgerEntry::new("total", 0, 0), |acc, e| acc.combine(e))
    }

    pub fn cost(&self, scope: &str) -> Decimal {
        self.entry(scope)
            .map(|e| compute_cost(e, &self.rates))
            .unwrap_or_default()
    }

    pub fn total_cost(&self) -> Decimal {
        compute_cost(&self.total(), &self.rates)
    }

    /// Keep only the given scopes.
    pub fn restricted_to<'a>(&self, scopes: impl IntoIterator<Item = &'a str>) -> UsageLedger {
        let mut out = UsageLedger::new(self.rates);
        for scope in scopes {
            if let Some(entry) = self.entries.get(scope) {
                out.entries.insert(scope.to_string(), entry.clone());
            }
        }
        out
    }

    /// Copy with every wall time zeroed, for reproducible artifacts.
    pub fn without_wall_time(&self) -> UsageLedger {
        let mut out = self.clone();
        for entry in out.entries.values_mut() {
            entry.wall_time = Duration::ZERO;
        }
        out
    }

    pub fn merge(&mut self, other: &UsageLedger) {
        for entry in other.entries.values() {
            let mine = self.entry_mut(&entry.scope);
            *mine = mine.combine(entry);
        }
    }

    /// Tabular export: scope, tokens, requests, cost, cache hits, failures,
    /// wall time.
    pub fn to_csv(&self) -> String {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer
            .write_record([
                "policy",
                "in_tokens",
                "out_tokens",
                "requests",
                "total_cost",
                "cache_hits",
                "failed_calls",
                "wall_time_ms",
            ])
            .expect("in-memory csv write");
        let rows = self.entries.values().cloned().chain([self.total()]);
        for entry in rows {
            writer
                .write_record([
                    entry.scope.clone(),
                    entry.input_tokens.to_string(),
                    entry.output_tokens.to_string(),
                    entry.request_count.to_string(),
                    format!("{:.4}", display_cost(compute_cost(&entry, &self.rates), 4)),
                    entry.cache_hits.to_string(),
                    entry.failed_calls.to_string(),
                    entry.wall_time.as_millis().to_string(),
                ])
                .expect("in-memory csv write");
        }
        String::from_utf8(writer.into_inner().expect("csv flush")).expect("utf-8")
    }
}

mod duration_ms {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(value: &Duration, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_u64(value.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(deserializer)?))
    }
}
