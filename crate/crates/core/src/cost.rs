//! Hardware cost comparison between machine setups.
//!
//! Prices are kept in whole cents so totals add up exactly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetupSpec {
    pub name: String,
    /// Line item name to count.
    pub items: BTreeMap<String, u32>,
    /// Training throughput of this setup, any consistent unit.
    #[serde(default)]
    pub throughput: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareCostConfig {
    /// Line item name to unit price in dollars.
    pub prices: BTreeMap<String, f64>,
    pub setups: Vec<SetupSpec>,
    /// Setup every other one is compared with.
    pub reference: String,
}

#[derive(Debug, Error, PartialEq)]
pub enum CostError {
    #[error("price of {0} must be a non-negative finite number")]
    BadPrice(String),
    #[error("setup {setup} uses unpriced item {item}")]
    UnknownItem { setup: String, item: String },
    #[error("reference setup {0} not found")]
    UnknownReference(String),
    #[error("setup {0} costs nothing")]
    ZeroCost(String),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostRow {
    pub setup: String,
    pub total_dollars: f64,
    /// Reference cost divided by this setup's cost.
    pub savings_vs_reference: f64,
    pub throughput: Option<f64>,
    /// Throughput per million dollars.
    pub throughput_per_million: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub reference: String,
    pub rows: Vec<CostRow>,
}

impl CostReport {
    pub fn row(&self, setup: &str) -> Option<&CostRow> {
        self.rows.iter().find(|r| r.setup == setup)
    }
}

fn cents(dollars: f64) -> u64 {
    (dollars * 100.0).round() as u64
}

pub fn cost_efficiency(config: &HardwareCostConfig) -> Result<CostReport, CostError> {
    for (name, &p) in &config.prices {
        if !(p.is_finite() && p >= 0.0) {
            return Err(CostError::BadPrice(name.clone()));
        }
    }
    let mut totals = Vec::with_capacity(config.setups.len());
    for s in &config.setups {
        let mut total = 0u64;
        for (item, &count) in &s.items {
            let price = config
                .prices
                .get(item)
                .ok_or_else(|| CostError::UnknownItem {
                    setup: s.name.clone(),
                    item: item.clone(),
                })?;
            total += cents(*price) * count as u64;
        }
        if total == 0 {
            return Err(CostError::ZeroCost(s.name.clone()));
        }
        totals.push(total);
    }
    let ri = config
        .setups
        .iter()
        .position(|s| s.name == config.reference)
        .ok_or_else(|| CostError::UnknownReference(config.reference.clone()))?;
    let reference = totals[ri] as f64;
    let rows = config
        .setups
        .iter()
        .zip(&totals)
        .map(|(s, &c)| CostRow {
            setup: s.name.clone(),
            total_dollars: c as f64 / 100.0,
            savings_vs_reference: reference / c as f64,
            throughput: s.throughput,
            throughput_per_million: s.throughput.map(|t| t / (c as f64 / 100.0) * 1e6),
        })
        .collect();
    Ok(CostReport {
        reference: config.reference.clone(),
        rows,
    })
}

/// Two-GPU servers offloading to SSDs or host memory, compared with enough
/// eight-GPU servers to hold everything in GPU memory.
pub fn default_cost_config() -> HardwareCostConfig {
    let prices = [
        ("server-2gpu-128gb", 84_139.9),
        ("server-2gpu-1tb", 91_047.9),
        ("server-8gpu-128gb", 249_795.7),
        ("ssd-2tb", 170.0),
    ]
    .into_iter()
    .map(|(n, p)| (n.to_string(), p))
    .collect();
    let setup = |name: &str, items: &[(&str, u32)]| SetupSpec {
        name: name.into(),
        items: items.iter().map(|&(i, c)| (i.to_string(), c)).collect(),
        throughput: None,
    };
    HardwareCostConfig {
        prices,
        setups: vec![
            setup("ssd-only", &[("server-2gpu-128gb", 1), ("ssd-2tb", 8)]),
            setup("ssd-and-host", &[("server-2gpu-1tb", 1), ("ssd-2tb", 8)]),
            setup("host-only", &[("server-2gpu-1tb", 1)]),
            setup("gpu-only", &[("server-8gpu-128gb", 2)]),
        ],
        reference: "gpu-only".into(),
    }
}
