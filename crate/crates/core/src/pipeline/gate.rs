use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateConfig {
    /// DECS must be strictly greater.
    pub decs_min: f64,
    /// PESQ strictly below triggers enhancement.
    pub pesq_min: f64,
    /// DNSMOS strictly below triggers enhancement.
    pub dnsmos_min: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            decs_min: 0.8,
            pesq_min: 3.0,
            dnsmos_min: 2.7,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if ![self.decs_min, self.pesq_min, self.dnsmos_min].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("gate thresholds must be finite".into()));
        }
        if !(self.decs_min > 0.0 && self.decs_min < 1.0) {
            return Err(Error::InvalidArgument(format!("decs_min {} outside (0, 1)", self.decs_min)));
        }
        Ok(())
    }

    /// Names and values of the metrics in `metrics` that fail their threshold.
    pub fn failing(&self, metrics: &BTreeMap<String, f64>) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        for (name, value) in metrics {
            let fails = match name.as_str() {
                "decs" => *value <= self.decs_min,
                "pesq" => *value < self.pesq_min,
                "dnsmos" => *value < self.dnsmos_min,
                _ => false,
            };
            if fails {
                out.push((name.clone(), *value));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GateInput {
    pub decs: Option<f64>,
    pub pesq: Option<f64>,
    pub dnsmos: Option<f64>,
}

impl GateInput {
    pub fn from_metrics(metrics: &BTreeMap<String, f64>) -> Self {
        GateInput {
            decs: metrics.get("decs").copied(),
            pesq: metrics.get("pesq").copied(),
            dnsmos: metrics.get("dnsmos").copied(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateDecision {
    Accept,
    Enhance,
    Reject,
}

/// Dialect gate first, then perceptual quality. Absent PESQ/DNSMOS pass.
pub fn gate(input: &GateInput, config: &GateConfig) -> Result<GateDecision> {
    let decs = input
        .decs
        .ok_or_else(|| Error::Contract("gate requires a decs value".into()))?;
    for (name, v) in [("decs", Some(decs)), ("pesq", input.pesq), ("dnsmos", input.dnsmos)] {
        if let Some(v) = v.filter(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{name} = {v}")));
        }
    }
    if decs <= config.decs_min {
        return Ok(GateDecision::Reject);
    }
    if input.pesq.is_none() {
        log::debug!("gate: no pesq value, treated as passing");
    }
    if input.dnsmos.is_none() {
        log::debug!("gate: no dnsmos value, treated as passing");
    }
    let low_pesq = input.pesq.is_some_and(|p| p < config.pesq_min);
    let low_dnsmos = input.dnsmos.is_some_and(|d| d < config.dnsmos_min);
    Ok(if low_pesq || low_dnsmos {
        GateDecision::Enhance
    } else {
        GateDecision::Accept
    })
}
