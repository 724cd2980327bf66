//! Direct-arithmetic oracles for the batch-size math, computed with exact
//! big-integer and rational arithmetic. They share no code with the
//! implementation under test.

#![allow(dead_code)]

use num_bigint::{BigInt, BigUint};
use num_rational::BigRational;
use num_traits::{Signed, ToPrimitive, Zero};

pub fn global_batch(m: u32, p: u32, g: u32, b: u32) -> BigUint {
    [m, p, g, b].into_iter().map(BigUint::from).product()
}

fn exact(x: f64) -> BigRational {
    BigRational::from_float(x).expect("finite")
}

fn ratio(n: u64, d: u64) -> BigRational {
    BigRational::new(BigInt::from(n), BigInt::from(d))
}

/// The double nearest to `q`, ties to even. Starts from an estimate and
/// walks neighbours until no neighbour is closer.
pub fn nearest_f64(q: &BigRational) -> f64 {
    let mut c = q.to_f64().expect("in range");
    let dist = |x: f64| (exact(x) - q).abs();
    loop {
        let d = dist(c);
        let up = c.next_up();
        let down = c.next_down();
        let (du, dd) = (dist(up), dist(down));
        if du < d || (du == d && up.to_bits() % 2 == 0 && c.to_bits() % 2 == 1) {
            c = up;
        } else if dd < d || (dd == d && down.to_bits() % 2 == 0 && c.to_bits() % 2 == 1) {
            c = down;
        } else {
            return c;
        }
    }
}

pub fn scaled_lr_exact(base_lr: f64, base_batch: u64, global: u64) -> BigRational {
    exact(base_lr) * ratio(global, base_batch)
}

pub fn scaled_lr(base_lr: f64, base_batch: u64, global: u64) -> f64 {
    nearest_f64(&scaled_lr_exact(base_lr, base_batch, global))
}

/// Warm-up ramp evaluated exactly, then rounded once.
pub fn lr_at_step(base_lr: f64, base_batch: u64, global: u64, warmup: u64, step: u64, from_zero: bool) -> f64 {
    let target = exact(scaled_lr(base_lr, base_batch, global));
    if step >= warmup {
        return nearest_f64(&target);
    }
    let start = if from_zero { BigRational::zero() } else { exact(base_lr) };
    let value = start.clone() + (target - start) * ratio(step + 1, warmup);
    nearest_f64(&value)
}

/// Smallest `n` with `n * global >= base_steps * base_batch`, by bisection.
pub fn normalized_steps(base_steps: u64, base_batch: u64, global: u64) -> u64 {
    let examples = u128::from(base_steps) * u128::from(base_batch);
    let (mut lo, mut hi) = (0u128, examples.max(1));
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if mid * u128::from(global) >= examples {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    lo as u64
}

/// One random (topology, schedule) case.
#[derive(Debug, Clone, Copy)]
pub struct Draw {
    pub machines: u32,
    pub processes: u32,
    pub gpus_per_process: u32,
    pub per_gpu_batch: u32,
    pub base_lr: f64,
    pub base_batch: u32,
    pub warmup: u64,
    pub total_steps: u64,
    pub base_steps: u64,
}

pub fn draw(rng: &mut impl rand::Rng) -> Draw {
    let warmup = rng.random_range(0..=500);
    Draw {
        machines: rng.random_range(1..=64),
        processes: rng.random_range(1..=8),
        gpus_per_process: rng.random_range(1..=2),
        per_gpu_batch: rng.random_range(1..=64),
        base_lr: rng.random_range(1e-5..1.0),
        base_batch: rng.random_range(1..=1024),
        warmup,
        total_steps: warmup + rng.random_range(1..=10_000),
        base_steps: rng.random_range(1..=1_000_000),
    }
}
