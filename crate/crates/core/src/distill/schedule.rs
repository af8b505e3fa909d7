use std::f64::consts::PI;

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::model::ParamStore;

/// Teacher momentum `1 - (1 - λ0)(cos(πt/T) + 1)/2`, rising from λ0 to 1.
pub fn lambda_schedule(t: u64, total: u64, lambda0: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::invalid("momentum schedule needs T > 0"));
    }
    if t > total {
        return Err(Error::invalid(format!("step {t} beyond schedule length {total}")));
    }
    if !(0.0..=1.0).contains(&lambda0) {
        return Err(Error::invalid("lambda0 must lie in [0, 1]"));
    }
    let c = ((PI * t as f64 / total as f64).cos() + 1.0) / 2.0;
    Ok(1.0 - (1.0 - lambda0) * c)
}

/// Linear warmup to `base` over `warmup` steps, then cosine decay to 0 at `total`.
pub fn lr_schedule(t: u64, total: u64, warmup: u64, base: f64) -> f64 {
    if t < warmup {
        return base * (t + 1) as f64 / warmup as f64;
    }
    if total <= warmup {
        return base;
    }
    let p = ((t - warmup) as f64 / (total - warmup) as f64).min(1.0);
    0.5 * base * (1.0 + (PI * p).cos())
}

/// Teacher temperature warming linearly from `start` to `end` over `warmup` steps.
pub fn teacher_temperature(t: u64, warmup: u64, start: f64, end: f64) -> f64 {
    if t >= warmup || warmup == 0 {
        return end;
    }
    start + (end - start) * t as f64 / warmup as f64
}

/// θ_t ← λθ_t + (1−λ)θ_s for every parameter the two stores share.
pub fn ema_update(teacher: &mut ParamStore, student: &ParamStore, lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("momentum {lambda} outside [0, 1]")));
    }
    if !teacher.shapes_match(student) {
        return Err(Error::shape("teacher and student parameter inventories differ"));
    }
    for i in 0..teacher.len() {
        let t = &teacher.tensors()[i];
        let s = student.tensors()[i].detach();
        let next: Tensor = ((t * lambda)? + (s * (1.0 - lambda))?)?;
        teacher.set(i, &next)?;
    }
    Ok(())
}

/// Host-side recursion used as a closed-form reference.
pub fn ema_update_slice(teacher: &mut [f64], student: &[f64], lambda: f64) {
    for (t, s) in teacher.iter_mut().zip(student) {
        *t = lambda * *t + (1.0 - lambda) * s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_endpoints_and_midpoint() {
        assert!((lambda_schedule(0, 100, 0.996).unwrap() - 0.996).abs() < 1e-15);
        assert_eq!(lambda_schedule(100, 100, 0.996).unwrap(), 1.0);
        assert!((lambda_schedule(50, 100, 0.996).unwrap() - 0.998).abs() < 1e-12);
        assert!(lambda_schedule(0, 0, 0.996).is_err());
    }

    #[test]
    fn lambda_is_nondecreasing() {
        let mut prev = 0.0;
        for t in 0..=37 {
            let l = lambda_schedule(t, 37, 0.996).unwrap();
            assert!(l >= prev);
            prev = l;
        }
    }

    #[test]
    fn lr_warms_then_decays() {
        let base = 5e-4;
        assert!((lr_schedule(9, 100, 10, base) - base).abs() < 1e-15);
        assert!(lr_schedule(0, 100, 10, base) < base);
        let mut prev = f64::INFINITY;
        for t in 10..=100 {
            let lr = lr_schedule(t, 100, 10, base);
            assert!(lr <= prev);
            prev = lr;
        }
        assert!(lr_schedule(100, 100, 10, base).abs() < 1e-18);
    }

    #[test]
    fn teacher_temperature_ramp() {
        assert_eq!(teacher_temperature(0, 10, 0.04, 0.07), 0.04);
        assert!((teacher_temperature(5, 10, 0.04, 0.07) - 0.055).abs() < 1e-15);
        assert_eq!(teacher_temperature(20, 10, 0.04, 0.07), 0.07);
    }

    #[test]
    fn ema_scalar_toy() {
        let mut t = vec![1.0];
        ema_update_slice(&mut t, &[0.0], 0.996);
        assert_eq!(t[0], 0.996);
    }
}
