// SPDX-License-Identifier: Apache-2.0

//! Scenario descriptions, readable as `key = value` text or JSON.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Duration;

use fedcrypt_core::paillier::ALLOWED_KEY_BITS;
use fedcrypt_core::protocol::Protocol;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("bad value for `{key}`: {reason}")]
    Value { key: String, reason: String },
    #[error("scenario infeasible: {0}")]
    Infeasible(String),
    #[error("invalid JSON scenario: {0}")]
    Json(#[from] serde_json::Error),
    #[error("cannot read scenario: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollusionMode {
    PassThrough,
    DuplicateCiphertext,
}

impl FromStr for CollusionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "pass_through" | "passthrough" => Ok(Self::PassThrough),
            "duplicate_ciphertext" | "duplicate" => Ok(Self::DuplicateCiphertext),
            other => Err(format!("unknown collusion mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollusionPlan {
    pub ranks: BTreeSet<u16>,
    pub mode: CollusionMode,
}

/// A learner that goes silent during `round` once it has sent `fail_at_step`
/// aggregation frames. `rank` is the rank held in that round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureEvent {
    pub round: u32,
    pub rank: u16,
    #[serde(default)]
    pub fail_at_step: u32,
    /// Seconds of virtual time until the learner comes back. A learner never
    /// returns before the coordinator has paused the job.
    #[serde(default)]
    pub reconnect_after_s: Option<f64>,
}

/// How `transform_time_s` is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TransformCost {
    /// Real CPU time of encryption and addition.
    #[default]
    Measured,
    /// Fixed cost per operation, for byte-identical reports.
    Modeled { encrypt_us: f64, add_us: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Workload {
    /// Each learner repeats a seeded random gradient in [-1, 1).
    #[default]
    Random,
    /// Least-squares regression on a synthetic dataset split across learners.
    Linear {
        samples_per_party: usize,
        learning_rate: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Scenario {
    pub parties: usize,
    #[serde(with = "protocol_name")]
    pub protocol: Protocol,
    pub vector_length: usize,
    pub key_bits: u64,
    pub rounds: u32,
    /// One-way delay per message, milliseconds.
    pub link_latency: f64,
    /// Bytes per second per sender; 0 means unlimited.
    pub bandwidth: u64,
    pub failure_plan: Vec<FailureEvent>,
    pub collusion_plan: Option<CollusionPlan>,
    pub seed: u64,
    pub transform: TransformCost,
    pub workload: Workload,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            parties: 3,
            protocol: Protocol::Ring,
            vector_length: 8,
            key_bits: 512,
            rounds: 1,
            link_latency: 0.0,
            bandwidth: 0,
            failure_plan: Vec::new(),
            collusion_plan: None,
            seed: 1,
            transform: TransformCost::Measured,
            workload: Workload::Random,
        }
    }
}

mod protocol_name {
    use fedcrypt_core::protocol::Protocol;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(p: &Protocol, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(p.name())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Protocol, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl Scenario {
    pub fn new(parties: usize, protocol: Protocol, vector_length: usize) -> Self {
        Self {
            parties,
            protocol,
            vector_length,
            ..Self::default()
        }
    }

    pub fn latency(&self) -> Duration {
        Duration::from_secs_f64(self.link_latency / 1000.0)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        std::fs::read_to_string(path)?.parse()
    }

    /// Checks the invariants a run depends on.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Infeasible(m));
        if self.parties < 2 {
            return bad(format!("{} parties; at least 2 are required", self.parties));
        }
        if self.parties > u16::MAX as usize {
            return bad("too many parties".into());
        }
        if self.vector_length == 0 {
            return bad("vector_length must be positive".into());
        }
        if !ALLOWED_KEY_BITS.contains(&self.key_bits) {
            return bad(format!("key_bits {} not in {:?}", self.key_bits, ALLOWED_KEY_BITS));
        }
        if self.rounds == 0 {
            return bad("rounds must be positive".into());
        }
        if !(self.link_latency.is_finite() && self.link_latency >= 0.0) {
            return bad("link_latency must be a non-negative number".into());
        }
        for f in &self.failure_plan {
            if f.rank == 0 || f.rank as usize > self.parties {
                return bad(format!("failure_plan rank {} outside 1..={}", f.rank, self.parties));
            }
            if f.round == 0 {
                return bad("failure_plan rounds start at 1".into());
            }
            if let Some(s) = f.reconnect_after_s {
                if !(s.is_finite() && s >= 0.0) {
                    return bad("reconnect_after_s must be non-negative".into());
                }
            }
        }
        if let Some(c) = &self.collusion_plan {
            if c.ranks.is_empty() {
                return bad("collusion_plan names no ranks".into());
            }
            if let Some(r) = c.ranks.iter().find(|&&r| r == 0 || r as usize > self.parties) {
                return bad(format!("collusion_plan rank {r} outside 1..={}", self.parties));
            }
            if c.mode == CollusionMode::DuplicateCiphertext && c.ranks.len() < 2 {
                return bad("duplicate_ciphertext needs at least two ranks".into());
            }
        }
        if let TransformCost::Modeled { encrypt_us, add_us } = self.transform {
            if !(encrypt_us >= 0.0 && add_us >= 0.0) {
                return bad("modeled transform costs must be non-negative".into());
            }
        }
        if let Workload::Linear {
            samples_per_party,
            learning_rate,
        } = self.workload
        {
            if samples_per_party == 0 || !(learning_rate > 0.0) {
                return bad("linear workload needs samples and a positive learning rate".into());
            }
        }
        Ok(())
    }

    /// Renders the scenario in the text format accepted by [`FromStr`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
        kv("parties", self.parties.to_string());
        kv("protocol", self.protocol.name().into());
        kv("vector_length", self.vector_length.to_string());
        kv("key_bits", self.key_bits.to_string());
        kv("rounds", self.rounds.to_string());
        kv("link_latency", self.link_latency.to_string());
        kv("bandwidth", self.bandwidth.to_string());
        kv("seed", self.seed.to_string());
        kv("transform", self.transform.to_string());
        kv("workload", self.workload.to_string());
        for f in &self.failure_plan {
            let mut v = format!("{}:{}:{}", f.round, f.rank, f.fail_at_step);
            if let Some(s) = f.reconnect_after_s {
                v.push_str(&format!(":{s}"));
            }
            kv("failure", v);
        }
        if let Some(c) = &self.collusion_plan {
            let ranks: Vec<String> = c.ranks.iter().map(|r| r.to_string()).collect();
            let mode = match c.mode {
                CollusionMode::PassThrough => "pass_through",
                CollusionMode::DuplicateCiphertext => "duplicate_ciphertext",
            };
            kv("collusion", format!("{mode}:{}", ranks.join(",")));
        }
        out
    }
}

impl fmt::Display for TransformCost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TransformCost::Measured => f.write_str("measured"),
            TransformCost::Modeled { encrypt_us, add_us } => write!(f, "modeled:{encrypt_us},{add_us}"),
        }
    }
}

impl FromStr for TransformCost {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        if s == "measured" {
            return Ok(Self::Measured);
        }
        let rest = s
            .strip_prefix("modeled:")
            .ok_or_else(|| format!("expected `measured` or `modeled:<encrypt_us>,<add_us>`, got `{s}`"))?;
        let (e, a) = rest.split_once(',').ok_or("modeled cost needs two numbers")?;
        Ok(Self::Modeled {
            encrypt_us: e.trim().parse().map_err(|_| format!("bad number `{e}`"))?,
            add_us: a.trim().parse().map_err(|_| format!("bad number `{a}`"))?,
        })
    }
}

impl fmt::Display for Workload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Workload::Random => f.write_str("random"),
            Workload::Linear {
                samples_per_party,
                learning_rate,
            } => write!(f, "linear:{samples_per_party},{learning_rate}"),
        }
    }
}

impl FromStr for Workload {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        if s == "random" {
            return Ok(Self::Random);
        }
        let rest = s
            .strip_prefix("linear:")
            .ok_or_else(|| format!("expected `random` or `linear:<samples>,<rate>`, got `{s}`"))?;
        let (n, lr) = rest.split_once(',').ok_or("linear workload needs two numbers")?;
        Ok(Self::Linear {
            samples_per_party: n.trim().parse().map_err(|_| format!("bad count `{n}`"))?,
            learning_rate: lr.trim().parse().map_err(|_| format!("bad rate `{lr}`"))?,
        })
    }
}

fn parse_failure(v: &str) -> Result<FailureEvent, String> {
    let parts: Vec<&str> = v.split(':').map(str::trim).collect();
    if !(3..=4).contains(&parts.len()) {
        return Err("expected round:rank:step[:reconnect_s]".into());
    }
    let num = |s: &str| s.parse::<u32>().map_err(|_| format!("bad integer `{s}`"));
    Ok(FailureEvent {
        round: num(parts[0])?,
        rank: parts[1].parse().map_err(|_| format!("bad rank `{}`", parts[1]))?,
        fail_at_step: num(parts[2])?,
        reconnect_after_s: match parts.get(3) {
            Some(s) => Some(s.parse().map_err(|_| format!("bad seconds `{s}`"))?),
            None => None,
        },
    })
}

fn parse_collusion(v: &str) -> Result<CollusionPlan, String> {
    let (mode, ranks) = v.split_once(':').ok_or("expected mode:rank,rank,...")?;
    let ranks = ranks
        .split(',')
        .map(|r| r.trim().parse::<u16>().map_err(|_| format!("bad rank `{r}`")))
        .collect::<Result<BTreeSet<_>, _>>()?;
    Ok(CollusionPlan {
        ranks,
        mode: mode.parse()?,
    })
}

impl FromStr for Scenario {
    type Err = ScenarioError;

    fn from_str(text: &str) -> Result<Self, ScenarioError> {
        if text.trim_start().starts_with('{') {
            let s: Scenario = serde_json::from_str(text)?;
            s.validate()?;
            return Ok(s);
        }
        let mut s = Scenario::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ScenarioError::Syntax { line: i + 1 })?;
            let (key, value) = (key.trim(), value.trim());
            let value_err = |reason: String| ScenarioError::Value {
                key: key.to_string(),
                reason,
            };
            fn num<T: FromStr>(v: &str) -> Result<T, String> {
                v.parse().map_err(|_| format!("`{v}` is not a number"))
            }
            match key {
                "parties" => s.parties = num(value).map_err(value_err)?,
                "protocol" => s.protocol = value.parse().map_err(|e| value_err(format!("{e}")))?,
                "vector_length" => s.vector_length = num(value).map_err(value_err)?,
                "key_bits" => s.key_bits = num(value).map_err(value_err)?,
                "rounds" => s.rounds = num(value).map_err(value_err)?,
                "link_latency" | "link_latency_ms" => s.link_latency = num(value).map_err(value_err)?,
                "bandwidth" => s.bandwidth = num(value).map_err(value_err)?,
                "seed" => s.seed = num(value).map_err(value_err)?,
                "failure" => s.failure_plan.push(parse_failure(value).map_err(value_err)?),
                "collusion" => s.collusion_plan = Some(parse_collusion(value).map_err(value_err)?),
                "transform" => s.transform = value.parse().map_err(value_err)?,
                "workload" => s.workload = value.parse().map_err(value_err)?,
                other => {
                    return Err(ScenarioError::UnknownKey {
                        line: i + 1,
                        key: other.to_string(),
                    })
                }
            }
        }
        s.validate()?;
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut s = Scenario::new(4, Protocol::AllReduce, 16);
        s.failure_plan.push(FailureEvent {
            round: 2,
            rank: 3,
            fail_at_step: 1,
            reconnect_after_s: Some(1.5),
        });
        s.collusion_plan = Some(CollusionPlan {
            ranks: [2, 4].into(),
            mode: CollusionMode::DuplicateCiphertext,
        });
        s.transform = TransformCost::Modeled {
            encrypt_us: 500.0,
            add_us: 2.5,
        };
        let back: Scenario = s.to_text().parse().unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn json_round_trip() {
        let s = Scenario::new(5, Protocol::Broadcast, 3);
        let back: Scenario = serde_json::to_string(&s).unwrap().parse().unwrap();
        assert_eq!(back, s);
    }
}
