//! Noise levels, noising, and the step-dependent training schedules.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KarrasSchedule {
    pub eps: f64,
    pub t_max: f64,
    pub rho: f64,
    pub n: usize,
}

impl KarrasSchedule {
    pub fn new(eps: f64, t_max: f64, rho: f64, n: usize) -> Result<Self> {
        let s = Self { eps, t_max, rho, n };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps < self.t_max && self.t_max.is_finite()) {
            return Err(Error::contract(format!(
                "noise range needs 0 < eps < T, got eps={} T={}",
                self.eps, self.t_max
            )));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::contract(format!("rho must be > 0, got {}", self.rho)));
        }
        if self.n < 2 {
            return Err(Error::contract(format!("schedule needs N >= 2, got {}", self.n)));
        }
        Ok(())
    }
}

/// `t_i = (eps^(1/rho) + i/(N-1) * (T^(1/rho) - eps^(1/rho)))^rho`, increasing.
///
/// Endpoints are pinned to `eps` and `T` so they hold exactly.
pub fn timesteps(sched: &KarrasSchedule) -> Result<Vec<f64>> {
    sched.validate()?;
    let inv = 1.0 / sched.rho;
    let lo = sched.eps.powf(inv);
    let hi = sched.t_max.powf(inv);
    let last = sched.n - 1;
    Ok((0..sched.n)
        .map(|i| match i {
            0 => sched.eps,
            i if i == last => sched.t_max,
            i => (lo + i as f64 / last as f64 * (hi - lo)).powf(sched.rho),
        })
        .collect())
}

/// `x0 + t * noise`.
pub fn add_noise(x0: &Tensor, t: f64, noise: &Tensor) -> Result<Tensor> {
    if x0.shape() != noise.shape() {
        return Err(Error::contract(format!(
            "noise shape {:?} does not match data shape {:?}",
            noise.shape(),
            x0.shape()
        )));
    }
    let data = x0.data().iter().zip(noise.data()).map(|(a, e)| a + t * e).collect();
    Tensor::new(x0.shape().to_vec(), data)
}

/// One Euler step of the probability-flow ODE with the clean sample as the
/// score estimate: `x_n + (x_n - x0) / t_n * (t_next - t_n)`.
pub fn euler_step(x_n: &Tensor, x0: &Tensor, t_n: f64, t_next: f64) -> Result<Tensor> {
    if t_n == 0.0 {
        return Err(Error::contract("euler step from t = 0"));
    }
    if x_n.shape() != x0.shape() {
        return Err(Error::contract(format!(
            "euler step shapes differ: {:?} vs {:?}",
            x_n.shape(),
            x0.shape()
        )));
    }
    let dt = t_next - t_n;
    let data = x_n
        .data()
        .iter()
        .zip(x0.data())
        .map(|(x, c)| x + (x - c) / t_n * dt)
        .collect();
    Tensor::new(x_n.shape().to_vec(), data)
}

/// `1/t^2 + 1/sigma_data^2`.
pub fn lambda_weight(t: f64, sigma_data: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::contract(format!("loss weight needs t > 0, got {t}")));
    }
    Ok(1.0 / (t * t) + 1.0 / (sigma_data * sigma_data))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NkForm {
    /// `floor(sqrt(k/K((s1+1)^2 - s0^2) + s0^2 - 1)) + 1`
    Floor,
    /// `ceil(sqrt((1-k/K) s0^2 + k/K (s1+1)^2) - 1) + 1`
    Ceil,
}

impl std::str::FromStr for NkForm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "floor" => Ok(NkForm::Floor),
            "ceil" => Ok(NkForm::Ceil),
            other => Err(Error::Config(format!("n_k_form must be floor or ceil, got {other:?}"))),
        }
    }
}

impl std::fmt::Display for NkForm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NkForm::Floor => "floor",
            NkForm::Ceil => "ceil",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaptiveSchedule {
    pub s0: u64,
    pub s1: u64,
    pub mu0: f64,
    pub total_steps: u64,
    pub form: NkForm,
}

impl AdaptiveSchedule {
    pub fn new(s0: u64, s1: u64, mu0: f64, total_steps: u64) -> Result<Self> {
        let s = Self {
            s0,
            s1,
            mu0,
            total_steps,
            form: NkForm::Floor,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2 <= self.s0 && self.s0 < self.s1) {
            return Err(Error::contract(format!(
                "step-count bounds need 2 <= s0 < s1, got s0={} s1={}",
                self.s0, self.s1
            )));
        }
        if !(self.mu0 > 0.0 && self.mu0 < 1.0) {
            return Err(Error::contract(format!("mu0 must be in (0, 1), got {}", self.mu0)));
        }
        if self.total_steps == 0 {
            return Err(Error::contract("total training steps must be positive"));
        }
        Ok(())
    }

    /// Discretization size `N(k)`, computed in exact integer arithmetic.
    pub fn n_of_k(&self, k: u64) -> Result<u64> {
        if k > self.total_steps {
            return Err(Error::contract(format!(
                "step {k} exceeds total {}",
                self.total_steps
            )));
        }
        let (s0, s1, kk, big_k) = (
            u128::from(self.s0),
            u128::from(self.s1),
            u128::from(k),
            u128::from(self.total_steps),
        );
        let span = (s1 + 1) * (s1 + 1) - s0 * s0;
        match self.form {
            NkForm::Floor => {
                // floor(sqrt(p/q)) == isqrt(floor(p/q))
                let p = kk * span + big_k * (s0 * s0 - 1);
                Ok((isqrt(p / big_k) + 1) as u64)
            }
            NkForm::Ceil => {
                let p = kk * span + big_k * s0 * s0;
                let r = isqrt(p / big_k);
                let exact = r * r * big_k == p;
                Ok((if exact { r } else { r + 1 }) as u64)
            }
        }
    }

    /// EMA rate `exp(s0 log(mu0) / N(k))`.
    pub fn mu_of_k(&self, k: u64) -> Result<f64> {
        Ok(self.mu_for_n(self.n_of_k(k)?))
    }

    pub fn mu_for_n(&self, n: u64) -> f64 {
        (self.s0 as f64 * self.mu0.ln() / n as f64).exp()
    }
}

fn isqrt(v: u128) -> u128 {
    if v < 2 {
        return v;
    }
    let mut x = (v as f64).sqrt() as u128;
    while x * x > v {
        x -= 1;
    }
    while (x + 1) * (x + 1) <= v {
        x += 1;
    }
    x
}

/// Constant warm phase, log-linear anneal, constant tail. Breakpoints sit at
/// `total/80` and `79 total/80`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub last: f64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn learning_rate(&self, step: u64) -> f64 {
        let total = self.total_steps as f64;
        let warm = total / 80.0;
        let end = total * 79.0 / 80.0;
        let s = step as f64;
        if s < warm {
            self.initial
        } else if s >= end {
            self.last
        } else {
            let frac = (s - warm) / (end - warm);
            (self.initial.ln() + frac * (self.last.ln() - self.initial.ln())).exp()
        }
    }
}

/// The `schedule.*` settings that drive training.
#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub t_max: f64,
    pub rho: f64,
    pub s0: u64,
    pub s1: u64,
    pub mu0: f64,
    pub n_k_form: NkForm,
    pub lr_initial: f64,
    pub lr_final: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            t_max: 80.0,
            rho: 7.0,
            s0: 2,
            s1: 1025,
            mu0: 0.95,
            n_k_form: NkForm::Floor,
            lr_initial: 2e-4,
            lr_final: 5e-6,
        }
    }
}

impl ScheduleConfig {
    pub fn adaptive(&self, total_steps: u64) -> Result<AdaptiveSchedule> {
        let a = AdaptiveSchedule {
            s0: self.s0,
            s1: self.s1,
            mu0: self.mu0,
            total_steps: total_steps.max(1),
            form: self.n_k_form,
        };
        a.validate()?;
        Ok(a)
    }

    pub fn karras(&self, eps: f64, n: usize) -> Result<KarrasSchedule> {
        KarrasSchedule::new(eps, self.t_max, self.rho, n)
    }

    pub fn lr(&self, total_steps: u64) -> LrSchedule {
        LrSchedule {
            initial: self.lr_initial,
            last: self.lr_final,
            total_steps,
        }
    }
}
