// SPDX-License-Identifier: Apache-2.0

//! Learner configuration file: one `key = value` per line, `#` comments.
//!
//! ```text
//! name = hospital-a
//! endpoint = 10.0.0.4:7101
//! job_id = 5f1c0e...      # 32 hex digits, or any label
//! token = 9ab3...         # 64 hex digits
//! role = local_aggregator
//! domain_learners = 4
//! ```

use std::path::Path;
use std::str::FromStr;

use fedcrypt_core::wire::{AuthToken, JobId};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected key = value")]
    Syntax { line: usize },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key {key:?}")]
    Duplicate { line: usize, key: String },
    #[error("missing required key {0:?}")]
    Missing(&'static str),
    #[error("invalid value for {key}: {reason}")]
    Invalid { key: &'static str, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Learner,
    LocalAggregator,
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "learner" => Ok(Role::Learner),
            "local_aggregator" => Ok(Role::LocalAggregator),
            other => Err(format!("expected learner or local_aggregator, got {other:?}")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LearnerConfig {
    pub name: String,
    pub endpoint: String,
    pub job_id: JobId,
    pub token: AuthToken,
    pub role: Role,
    pub domain_learners: usize,
    pub location: Option<String>,
    pub coordinator: Option<String>,
}

const KEYS: [&str; 8] = [
    "name",
    "endpoint",
    "job_id",
    "token",
    "role",
    "domain_learners",
    "location",
    "coordinator",
];

impl LearnerConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        std::fs::read_to_string(path)?.parse()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "name = {}\nendpoint = {}\njob_id = {}\ntoken = {}\nrole = {}\ndomain_learners = {}\n",
            self.name,
            self.endpoint,
            self.job_id.to_hex(),
            self.token.to_hex(),
            match self.role {
                Role::Learner => "learner",
                Role::LocalAggregator => "local_aggregator",
            },
            self.domain_learners
        );
        if let Some(l) = &self.location {
            out.push_str(&format!("location = {l}\n"));
        }
        if let Some(c) = &self.coordinator {
            out.push_str(&format!("coordinator = {c}\n"));
        }
        out
    }
}

impl FromStr for LearnerConfig {
    type Err = ConfigError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let mut values: [Option<String>; 8] = Default::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            let (k, v) = (k.trim(), v.trim());
            let slot = KEYS
                .iter()
                .position(|&key| key == k)
                .ok_or_else(|| ConfigError::UnknownKey {
                    line: i + 1,
                    key: k.to_string(),
                })?;
            if values[slot].replace(v.to_string()).is_some() {
                return Err(ConfigError::Duplicate {
                    line: i + 1,
                    key: k.to_string(),
                });
            }
        }
        let [name, endpoint, job_id, token, role, domain_learners, location, coordinator] = values;

        let job_id = job_id.ok_or(ConfigError::Missing("job_id"))?;
        let job_id = if job_id.len() == 32 {
            JobId::from_hex(&job_id).unwrap_or_else(|| JobId::from_label(&job_id))
        } else {
            JobId::from_label(&job_id)
        };
        let token = token.ok_or(ConfigError::Missing("token"))?;
        let token = AuthToken::from_hex(&token).ok_or(ConfigError::Invalid {
            key: "token",
            reason: "expected 64 hex digits".into(),
        })?;
        let role = match role {
            Some(r) => r
                .parse()
                .map_err(|reason| ConfigError::Invalid { key: "role", reason })?,
            None => Role::Learner,
        };
        let domain_learners = match domain_learners {
            Some(d) => d
                .parse::<usize>()
                .ok()
                .filter(|&d| d >= 1)
                .ok_or(ConfigError::Invalid {
                    key: "domain_learners",
                    reason: format!("expected an integer >= 1, got {d:?}"),
                })?,
            None => 1,
        };
        if role == Role::Learner && domain_learners != 1 {
            return Err(ConfigError::Invalid {
                key: "domain_learners",
                reason: "a plain learner represents exactly one learner".into(),
            });
        }
        Ok(Self {
            name: name.ok_or(ConfigError::Missing("name"))?,
            endpoint: endpoint.ok_or(ConfigError::Missing("endpoint"))?,
            job_id,
            token,
            role,
            domain_learners,
            location,
            coordinator,
        })
    }
}
