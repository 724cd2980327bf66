use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Logical clock. The simulator advances it explicitly; the live control
/// loop advances it once per loop iteration.
pub type Tick = u64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid identifier {0:?}")]
pub struct InvalidId(pub String);

/// Monotonic job identifier, rendered as `job-<n>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct JobId(pub u64);

impl fmt::Display for JobId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "job-{}", self.0)
    }
}

impl FromStr for JobId {
    type Err = InvalidId;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.strip_prefix("job-")
            .and_then(|n| n.parse().ok())
            .map(JobId)
            .ok_or_else(|| InvalidId(s.to_string()))
    }
}

impl Serialize for JobId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for JobId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub String);

impl NodeId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for NodeId {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

/// Lowercase hex SHA-256 of an uploaded code archive.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct CodeDigest(String);

impl CodeDigest {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl FromStr for CodeDigest {
    type Err = InvalidId;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.strip_prefix("sha256:").unwrap_or(s);
        if s.len() == 64 && s.bytes().all(|b| b.is_ascii_hexdigit()) {
            Ok(CodeDigest(s.to_ascii_lowercase()))
        } else {
            Err(InvalidId(s.to_string()))
        }
    }
}

impl<'de> Deserialize<'de> for CodeDigest {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl fmt::Display for CodeDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Task names are `<group>-<index>` with a zero-based index. They are the
/// task's stable identity and its hostname within the job.
pub fn task_name(group: &str, index: u32) -> String {
    format!("{group}-{index}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn job_id_round_trips_through_text() {
        let id: JobId = "job-42".parse().unwrap();
        assert_eq!(id, JobId(42));
        assert_eq!(id.to_string(), "job-42");
        assert!("job42".parse::<JobId>().is_err());
        assert!(JobId(2) < JobId(10));
    }

    #[test]
    fn digest_accepts_prefixed_and_uppercase_hex() {
        let hex = "AB".repeat(32);
        let d: CodeDigest = format!("sha256:{hex}").parse().unwrap();
        assert_eq!(d.as_str(), "ab".repeat(32));
        assert!("abc".parse::<CodeDigest>().is_err());
    }
}
