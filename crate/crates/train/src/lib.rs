//! Batch-size dependent training parameters.
//!
//! A job's global batch is `machines × processes_per_machine ×
//! gpus_per_process × per_gpu_batch`. Hyperparameters are written once for a
//! reference batch size and rescaled for whatever topology the job runs on:
//! the learning rate grows linearly with the global batch (after a linear
//! warm-up), and step counts shrink so the number of examples seen stays the
//! same.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("{0} must be positive")]
    NotPositive(&'static str),
    #[error("global batch size overflows")]
    BatchOverflow,
    #[error("warm-up of {warmup_steps} steps exceeds {total_steps} total steps")]
    WarmupTooLong { warmup_steps: u64, total_steps: u64 },
    #[error("step {step} is outside 0..{total_steps}")]
    StepOutOfRange { step: u64, total_steps: u64 },
}

/// How GPUs and processes are laid out for a data-parallel job.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchTopology {
    machines: u32,
    processes_per_machine: u32,
    gpus_per_process: u32,
    per_gpu_batch: u32,
}

impl BatchTopology {
    pub fn new(
        machines: u32,
        processes_per_machine: u32,
        gpus_per_process: u32,
        per_gpu_batch: u32,
    ) -> Result<Self, TrainError> {
        for (value, name) in [
            (machines, "machines"),
            (processes_per_machine, "processes_per_machine"),
            (gpus_per_process, "gpus_per_process"),
            (per_gpu_batch, "per_gpu_batch"),
        ] {
            if value == 0 {
                return Err(TrainError::NotPositive(name));
            }
        }
        let topology = Self {
            machines,
            processes_per_machine,
            gpus_per_process,
            per_gpu_batch,
        };
        topology.checked_global_batch().ok_or(TrainError::BatchOverflow)?;
        Ok(topology)
    }

    /// One GPU per process, the layout the MPI harness launches.
    pub fn one_gpu_per_process(
        machines: u32,
        processes_per_machine: u32,
        per_gpu_batch: u32,
    ) -> Result<Self, TrainError> {
        Self::new(machines, processes_per_machine, 1, per_gpu_batch)
    }

    pub fn machines(&self) -> u32 {
        self.machines
    }

    pub fn processes_per_machine(&self) -> u32 {
        self.processes_per_machine
    }

    pub fn gpus_per_process(&self) -> u32 {
        self.gpus_per_process
    }

    pub fn per_gpu_batch(&self) -> u32 {
        self.per_gpu_batch
    }

    /// Fits in `u64` because the global batch does.
    pub fn total_gpus(&self) -> u64 {
        u64::from(self.machines) * u64::from(self.processes_per_machine) * u64::from(self.gpus_per_process)
    }

    fn checked_global_batch(&self) -> Option<u64> {
        [self.processes_per_machine, self.gpus_per_process, self.per_gpu_batch]
            .into_iter()
            .try_fold(u64::from(self.machines), |acc, v| acc.checked_mul(u64::from(v)))
    }

    pub fn global_batch(&self) -> u64 {
        self.checked_global_batch().expect("validated at construction")
    }
}

pub fn global_batch(topology: &BatchTopology) -> u64 {
    topology.global_batch()
}

/// Where the warm-up ramp starts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarmupStart {
    /// Ramp from the reference learning rate up to the scaled one.
    #[default]
    BaseLr,
    /// Ramp from zero.
    Zero,
}

/// A learning-rate schedule written against a reference batch size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    base_lr: f64,
    base_batch: u32,
    warmup_steps: u64,
    total_steps: u64,
    #[serde(default)]
    warmup_start: WarmupStart,
}

impl LrSchedule {
    pub fn new(base_lr: f64, base_batch: u32, warmup_steps: u64, total_steps: u64) -> Result<Self, TrainError> {
        if !(base_lr.is_finite() && base_lr > 0.0) {
            return Err(TrainError::NotPositive("base_lr"));
        }
        if base_batch == 0 {
            return Err(TrainError::NotPositive("base_batch"));
        }
        if total_steps == 0 {
            return Err(TrainError::NotPositive("total_steps"));
        }
        if warmup_steps > total_steps {
            return Err(TrainError::WarmupTooLong {
                warmup_steps,
                total_steps,
            });
        }
        Ok(Self {
            base_lr,
            base_batch,
            warmup_steps,
            total_steps,
            warmup_start: WarmupStart::BaseLr,
        })
    }

    pub fn with_warmup_start(mut self, start: WarmupStart) -> Self {
        self.warmup_start = start;
        self
    }

    pub fn base_lr(&self) -> f64 {
        self.base_lr
    }

    pub fn base_batch(&self) -> u32 {
        self.base_batch
    }

    pub fn warmup_steps(&self) -> u64 {
        self.warmup_steps
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    /// `base_lr · global_batch / base_batch`, rounded once to the nearest
    /// double.
    pub fn scaled_lr(&self, global_batch: u64) -> f64 {
        mul_ratio(self.base_lr, global_batch, u64::from(self.base_batch))
    }

    /// Learning rate for `step`: a linear ramp over the first
    /// `warmup_steps` steps that reaches the scaled rate on the last warm-up
    /// step, then the scaled rate. Decay after warm-up is the caller's.
    pub fn lr_at_step(&self, global_batch: u64, step: u64) -> Result<f64, TrainError> {
        if step >= self.total_steps {
            return Err(TrainError::StepOutOfRange {
                step,
                total_steps: self.total_steps,
            });
        }
        let target = self.scaled_lr(global_batch);
        if step + 1 >= self.warmup_steps {
            return Ok(target);
        }
        let start = match self.warmup_start {
            WarmupStart::BaseLr => self.base_lr,
            WarmupStart::Zero => 0.0,
        };
        let progress = (step + 1) as f64 / self.warmup_steps as f64;
        Ok(start + (target - start) * progress)
    }
}

pub fn scaled_lr(schedule: &LrSchedule, global_batch: u64) -> f64 {
    schedule.scaled_lr(global_batch)
}

pub fn lr_at_step(schedule: &LrSchedule, global_batch: u64, step: u64) -> Result<f64, TrainError> {
    schedule.lr_at_step(global_batch, step)
}

/// Steps needed at `global_batch` to see as many examples as `base_steps`
/// at `base_batch`: `⌈base_steps · base_batch / global_batch⌉`. Also used
/// for evaluation intervals. Saturates at `u64::MAX`.
pub fn normalized_steps(base_steps: u64, base_batch: u64, global_batch: u64) -> u64 {
    assert!(global_batch > 0, "global batch must be positive");
    let examples = u128::from(base_steps) * u128::from(base_batch);
    u64::try_from(examples.div_ceil(u128::from(global_batch))).unwrap_or(u64::MAX)
}

/// Largest global batch known to train without an accuracy drop for a model.
/// Purely informational: nothing in the control plane enforces it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSizeAdvisory {
    pub max_global_batch: u64,
}

impl BatchSizeAdvisory {
    pub fn exceeded_by(&self, global_batch: u64) -> bool {
        global_batch > self.max_global_batch
    }
}

const MANTISSA_BITS: u32 = 52;
const HIDDEN_BIT: u128 = 1 << MANTISSA_BITS;

/// `x · num / den` with a single round-to-nearest-even. Falls back to plain
/// floating point when the result leaves the normal range.
fn mul_ratio(x: f64, num: u64, den: u64) -> f64 {
    assert!(den > 0);
    if !x.is_finite() || x <= 0.0 || num == 0 {
        return x * num as f64 / den as f64;
    }
    let bits = x.to_bits();
    let biased = ((bits >> MANTISSA_BITS) & 0x7ff) as i32;
    let fraction = u128::from(bits & ((1u64 << MANTISSA_BITS) - 1));
    let (mantissa, exp) = if biased == 0 {
        (fraction, -1074)
    } else {
        (fraction | HIDDEN_BIT, biased - 1075)
    };

    // x·num/den = (p / d) · 2^exp. Pick a shift so p·2^shift / d lands in
    // [2^52, 2^53); both operands stay under 2^118.
    let p = mantissa * u128::from(num);
    let d = u128::from(den);
    let bitlen = |v: u128| 128 - v.leading_zeros() as i32;
    let mut shift = 53 - (bitlen(p) - bitlen(d));
    let quotient = |shift: i32| -> (u128, u128, u128) {
        let (n, dd) = if shift >= 0 { (p << shift, d) } else { (p, d << -shift) };
        (n / dd, n % dd, dd)
    };
    let (mut q, mut r, mut dd) = quotient(shift);
    while q >= HIDDEN_BIT << 1 {
        shift -= 1;
        (q, r, dd) = quotient(shift);
    }
    while q < HIDDEN_BIT {
        shift += 1;
        (q, r, dd) = quotient(shift);
    }
    if 2 * r > dd || (2 * r == dd && q & 1 == 1) {
        q += 1;
        if q == HIDDEN_BIT << 1 {
            q = HIDDEN_BIT;
            shift -= 1;
        }
    }
    let result_biased = exp - shift + 1075;
    if !(1..=2046).contains(&result_biased) {
        return x * num as f64 / den as f64;
    }
    f64::from_bits(((result_biased as u64) << MANTISSA_BITS) | (q - HIDDEN_BIT) as u64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topology_rejects_zero_fields() {
        assert_eq!(
            BatchTopology::new(1, 0, 1, 1),
            Err(TrainError::NotPositive("processes_per_machine"))
        );
        assert_eq!(
            BatchTopology::new(u32::MAX, u32::MAX, u32::MAX, u32::MAX),
            Err(TrainError::BatchOverflow)
        );
    }

    #[test]
    fn schedule_rejects_bad_parameters() {
        assert!(LrSchedule::new(0.0, 32, 0, 10).is_err());
        assert!(LrSchedule::new(0.1, 0, 0, 10).is_err());
        assert!(matches!(
            LrSchedule::new(0.1, 32, 11, 10),
            Err(TrainError::WarmupTooLong { .. })
        ));
    }

    #[test]
    fn mul_ratio_exact_cases() {
        assert_eq!(mul_ratio(0.1, 1024, 32), 3.2);
        assert_eq!(mul_ratio(1.5, 3, 3), 1.5);
        assert_eq!(mul_ratio(1.0, 1, 3), 1.0 / 3.0);
        assert_eq!(mul_ratio(f64::MIN_POSITIVE, 1, 2), f64::MIN_POSITIVE / 2.0);
    }

    #[test]
    fn step_out_of_range() {
        let s = LrSchedule::new(0.1, 32, 2, 10).unwrap();
        assert_eq!(
            s.lr_at_step(32, 10),
            Err(TrainError::StepOutOfRange {
                step: 10,
                total_steps: 10
            })
        );
    }

    #[test]
    fn advisory_has_no_effect_on_schedules() {
        let advisory = BatchSizeAdvisory { max_global_batch: 8192 };
        assert!(advisory.exceeded_by(16384));
        assert!(!advisory.exceeded_by(1024));
    }
}
