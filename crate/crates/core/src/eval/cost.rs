//! Token cost accounting.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{mean_std, EvalError};
use crate::prior::PriorRecord;
use crate::prompt::{Ordering, PromptStrategy};

/// Currency per thousand tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Price {
    pub input_per_1k: f64,
    pub output_per_1k: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PriceTable(pub BTreeMap<String, Price>);

#[derive(Deserialize)]
struct PriceRow {
    model_id: String,
    input_per_1k: f64,
    output_per_1k: f64,
}

impl PriceTable {
    /// Parses `model_id,input_per_1k,output_per_1k` rows (header required).
    pub fn from_csv(reader: impl Read) -> Result<Self, EvalError> {
        let mut table = BTreeMap::new();
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).comment(Some(b'#')).from_reader(reader);
        for row in rdr.deserialize::<PriceRow>() {
            let row = row.map_err(|e| EvalError::Prices(e.to_string()))?;
            let ok = |v: f64| v.is_finite() && v >= 0.0;
            if !ok(row.input_per_1k) || !ok(row.output_per_1k) {
                return Err(EvalError::Prices(format!("negative or non-finite price for {}", row.model_id)));
            }
            table.insert(
                row.model_id,
                Price {
                    input_per_1k: row.input_per_1k,
                    output_per_1k: row.output_per_1k,
                },
            );
        }
        Ok(Self(table))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EvalError> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|source| EvalError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_csv(file)
    }

    pub fn get(&self, model_id: &str) -> Option<Price> {
        self.0.get(model_id).copied()
    }
}

impl Price {
    pub fn cost(&self, input_tokens: u64, output_tokens: u64) -> f64 {
        input_tokens as f64 / 1000.0 * self.input_per_1k + output_tokens as f64 / 1000.0 * self.output_per_1k
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostLine {
    pub strategy: PromptStrategy,
    pub model_id: String,
    pub records: usize,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub cost: f64,
    /// Cost of one full pass over the pairs, averaged over replicates.
    pub replicate_mean: f64,
    pub replicate_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub lines: Vec<CostLine>,
}

/// Totals per (strategy, model).
pub fn cost_report(records: &[PriorRecord], prices: &PriceTable) -> Result<CostReport, EvalError> {
    type Key = (String, String);
    let mut groups: BTreeMap<Key, (PromptStrategy, Vec<&PriorRecord>)> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.strategy.to_string(), r.model_id.clone()))
            .or_insert_with(|| (r.strategy, Vec::new()))
            .1
            .push(r);
    }
    let mut lines = Vec::new();
    for ((_, model_id), (strategy, recs)) in groups {
        let price = prices.get(&model_id).ok_or_else(|| EvalError::MissingPrice(model_id.clone()))?;
        let input_tokens: u64 = recs.iter().map(|r| r.usage.input_tokens).sum();
        let output_tokens: u64 = recs.iter().map(|r| r.usage.output_tokens).sum();
        let mut per_rep: BTreeMap<(Ordering, u32), f64> = BTreeMap::new();
        for r in &recs {
            *per_rep.entry((r.ordering, r.repeat)).or_default() +=
                price.cost(r.usage.input_tokens, r.usage.output_tokens);
        }
        let (replicate_mean, replicate_std) = mean_std(&per_rep.into_values().collect::<Vec<_>>());
        lines.push(CostLine {
            strategy,
            records: recs.len(),
            cost: price.cost(input_tokens, output_tokens),
            model_id,
            input_tokens,
            output_tokens,
            replicate_mean,
            replicate_std,
        });
    }
    Ok(CostReport { lines })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_price() {
        let p = Price {
            input_per_1k: 0.01,
            output_per_1k: 0.03,
        };
        assert!((p.cost(1000, 10) - 0.0103).abs() < 1e-15);
        let free = Price {
            input_per_1k: 0.0,
            output_per_1k: 0.0,
        };
        assert_eq!(free.cost(123_456, 789), 0.0);
    }

    #[test]
    fn price_csv() {
        let t = PriceTable::from_csv("model_id,input_per_1k,output_per_1k\ngpt-4-turbo, 0.01, 0.03\nllama3,0,0\n".as_bytes())
            .unwrap();
        assert_eq!(t.get("gpt-4-turbo").unwrap().output_per_1k, 0.03);
        assert_eq!(t.get("llama3").unwrap().input_per_1k, 0.0);
        assert!(t.get("claude").is_none());
        assert!(PriceTable::from_csv("model_id,input_per_1k,output_per_1k\nx,-1,0\n".as_bytes()).is_err());
    }
}
