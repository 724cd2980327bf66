//! Resource vectors: the unit of demand and capacity for scheduling and
//! autoscaling.
//!
//! CPU is tracked in millicores so that fractional core requests stay exact.

use std::cmp::Ordering;
use std::fmt;
use std::ops::Add;

use serde::de::{self, Deserializer};
use serde::ser::{SerializeStruct, Serializer};
use serde::{Deserialize, Serialize};
use thiserror::Error;

const MILLIS_PER_CORE: u64 = 1000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ResourceError {
    #[error("subtracting {rhs} from {lhs} would make a component negative")]
    Underflow { lhs: ResourceVector, rhs: ResourceVector },
    #[error("resource arithmetic overflowed")]
    Overflow,
    #[error("invalid quantity {0:?}")]
    InvalidQuantity(String),
}

/// CPU, GPU and memory amounts. Either a demand or a capacity.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct ResourceVector {
    cpu_millis: u64,
    gpus: u32,
    memory_bytes: u64,
}

impl ResourceVector {
    pub const ZERO: ResourceVector = ResourceVector {
        cpu_millis: 0,
        gpus: 0,
        memory_bytes: 0,
    };

    pub const fn new(cpu_millis: u64, gpus: u32, memory_bytes: u64) -> Self {
        Self {
            cpu_millis,
            gpus,
            memory_bytes,
        }
    }

    /// Whole cores.
    pub const fn cores(cores: u64, gpus: u32, memory_bytes: u64) -> Self {
        Self::new(cores * MILLIS_PER_CORE, gpus, memory_bytes)
    }

    pub fn cpu_millis(&self) -> u64 {
        self.cpu_millis
    }

    pub fn cpu_cores(&self) -> f64 {
        self.cpu_millis as f64 / MILLIS_PER_CORE as f64
    }

    pub fn gpus(&self) -> u32 {
        self.gpus
    }

    pub fn memory_bytes(&self) -> u64 {
        self.memory_bytes
    }

    pub fn is_zero(&self) -> bool {
        *self == Self::ZERO
    }

    /// True if at least one component is non-zero.
    pub fn is_positive(&self) -> bool {
        !self.is_zero()
    }

    /// `self` fits within `capacity` in every component.
    pub fn fits(&self, capacity: &ResourceVector) -> bool {
        self.cpu_millis <= capacity.cpu_millis
            && self.gpus <= capacity.gpus
            && self.memory_bytes <= capacity.memory_bytes
    }

    pub fn checked_add(&self, rhs: &ResourceVector) -> Result<ResourceVector, ResourceError> {
        Ok(ResourceVector {
            cpu_millis: self
                .cpu_millis
                .checked_add(rhs.cpu_millis)
                .ok_or(ResourceError::Overflow)?,
            gpus: self.gpus.checked_add(rhs.gpus).ok_or(ResourceError::Overflow)?,
            memory_bytes: self
                .memory_bytes
                .checked_add(rhs.memory_bytes)
                .ok_or(ResourceError::Overflow)?,
        })
    }

    /// Componentwise subtraction. Never clamps.
    pub fn checked_sub(&self, rhs: &ResourceVector) -> Result<ResourceVector, ResourceError> {
        let underflow = || ResourceError::Underflow { lhs: *self, rhs: *rhs };
        Ok(ResourceVector {
            cpu_millis: self.cpu_millis.checked_sub(rhs.cpu_millis).ok_or_else(underflow)?,
            gpus: self.gpus.checked_sub(rhs.gpus).ok_or_else(underflow)?,
            memory_bytes: self.memory_bytes.checked_sub(rhs.memory_bytes).ok_or_else(underflow)?,
        })
    }

    /// Multiply every component by `n`.
    pub fn checked_scale(&self, n: u32) -> Result<ResourceVector, ResourceError> {
        Ok(ResourceVector {
            cpu_millis: self
                .cpu_millis
                .checked_mul(u64::from(n))
                .ok_or(ResourceError::Overflow)?,
            gpus: self.gpus.checked_mul(n).ok_or(ResourceError::Overflow)?,
            memory_bytes: self
                .memory_bytes
                .checked_mul(u64::from(n))
                .ok_or(ResourceError::Overflow)?,
        })
    }

    /// Key used by first-fit-decreasing: GPUs, then memory, then CPU.
    pub fn packing_key(&self) -> (u32, u64, u64) {
        (self.gpus, self.memory_bytes, self.cpu_millis)
    }

    pub fn sum<'a>(items: impl IntoIterator<Item = &'a ResourceVector>) -> Result<Self, ResourceError> {
        items
            .into_iter()
            .try_fold(ResourceVector::ZERO, |acc, r| acc.checked_add(r))
    }
}

impl Add for ResourceVector {
    type Output = ResourceVector;

    /// Panics on overflow; use [`ResourceVector::checked_add`] on untrusted input.
    fn add(self, rhs: Self) -> Self::Output {
        self.checked_add(&rhs).expect("resource vector overflow")
    }
}

/// The "fits" partial order: `a <= b` iff every component of `a` is at most
/// the matching component of `b`.
impl PartialOrd for ResourceVector {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        match (self.fits(other), other.fits(self)) {
            (true, true) => Some(Ordering::Equal),
            (true, false) => Some(Ordering::Less),
            (false, true) => Some(Ordering::Greater),
            (false, false) => None,
        }
    }
}

impl fmt::Display for ResourceVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{{cpu: {}, gpu: {}, memory: {}}}",
            format_cpu(self.cpu_millis),
            self.gpus,
            format_bytes(self.memory_bytes)
        )
    }
}

fn format_cpu(millis: u64) -> String {
    if millis % MILLIS_PER_CORE == 0 {
        (millis / MILLIS_PER_CORE).to_string()
    } else {
        format!("{millis}m")
    }
}

pub fn format_bytes(bytes: u64) -> String {
    const UNITS: [(&str, u64); 4] = [("Ti", 1 << 40), ("Gi", 1 << 30), ("Mi", 1 << 20), ("Ki", 1 << 10)];
    for (suffix, size) in UNITS {
        if bytes >= size && bytes % size == 0 {
            return format!("{}{suffix}", bytes / size);
        }
    }
    bytes.to_string()
}

/// Parses `"1.5"`, `"500m"` or a plain number of cores into millicores.
pub fn parse_cpu(text: &str) -> Result<u64, ResourceError> {
    let text = text.trim();
    let invalid = || ResourceError::InvalidQuantity(text.to_string());
    if let Some(millis) = text.strip_suffix('m') {
        return millis.parse::<u64>().map_err(|_| invalid());
    }
    let cores: f64 = text.parse().map_err(|_| invalid())?;
    cores_to_millis(cores).ok_or_else(invalid)
}

fn cores_to_millis(cores: f64) -> Option<u64> {
    if !cores.is_finite() || cores < 0.0 {
        return None;
    }
    let millis = cores * MILLIS_PER_CORE as f64;
    let rounded = millis.round();
    if (millis - rounded).abs() > 1e-6 || rounded > u64::MAX as f64 {
        return None;
    }
    Some(rounded as u64)
}

/// Parses a byte quantity with an optional binary (`Ki`, `Mi`, `Gi`, `Ti`)
/// or decimal (`K`, `M`, `G`, `T`) suffix.
pub fn parse_bytes(text: &str) -> Result<u64, ResourceError> {
    let text = text.trim();
    let invalid = || ResourceError::InvalidQuantity(text.to_string());
    let split = text.find(|c: char| !c.is_ascii_digit()).unwrap_or(text.len());
    let (digits, suffix) = text.split_at(split);
    let value: u64 = digits.parse().map_err(|_| invalid())?;
    let multiplier: u64 = match suffix {
        "" => 1,
        "Ki" => 1 << 10,
        "Mi" => 1 << 20,
        "Gi" => 1 << 30,
        "Ti" => 1 << 40,
        "K" => 1_000,
        "M" => 1_000_000,
        "G" => 1_000_000_000,
        "T" => 1_000_000_000_000,
        _ => return Err(invalid()),
    };
    value.checked_mul(multiplier).ok_or_else(invalid)
}

// Wire form: {"cpu": <cores>, "gpu": <count>, "memory": <bytes>}. Input also
// accepts quantity strings such as "500m" and "64Gi".
impl Serialize for ResourceVector {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut s = serializer.serialize_struct("ResourceVector", 3)?;
        s.serialize_field("cpu", &self.cpu_cores())?;
        s.serialize_field("gpu", &self.gpus)?;
        s.serialize_field("memory", &self.memory_bytes)?;
        s.end()
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Quantity {
    Int(u64),
    Float(f64),
    Text(String),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawResources {
    #[serde(default)]
    cpu: Option<Quantity>,
    #[serde(default)]
    gpu: Option<u32>,
    #[serde(default)]
    memory: Option<Quantity>,
}

impl<'de> Deserialize<'de> for ResourceVector {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = RawResources::deserialize(deserializer)?;
        let cpu_millis = match raw.cpu {
            None => 0,
            Some(Quantity::Int(cores)) => cores
                .checked_mul(MILLIS_PER_CORE)
                .ok_or_else(|| de::Error::custom("cpu quantity overflows"))?,
            Some(Quantity::Float(cores)) => {
                cores_to_millis(cores).ok_or_else(|| de::Error::custom(format!("invalid cpu quantity {cores}")))?
            }
            Some(Quantity::Text(text)) => parse_cpu(&text).map_err(de::Error::custom)?,
        };
        let memory_bytes = match raw.memory {
            None => 0,
            Some(Quantity::Int(bytes)) => bytes,
            Some(Quantity::Float(f)) => {
                return Err(de::Error::custom(format!(
                    "memory must be a whole number of bytes, got {f}"
                )))
            }
            Some(Quantity::Text(text)) => parse_bytes(&text).map_err(de::Error::custom)?,
        };
        Ok(ResourceVector {
            cpu_millis,
            gpus: raw.gpu.unwrap_or(0),
            memory_bytes,
        })
    }
}
