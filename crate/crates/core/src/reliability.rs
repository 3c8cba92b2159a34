//! Client success probabilities, rank tags and per-round availability.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ReliabilityError {
    #[error("beta shape parameters must be positive, got ({0}, {1})")]
    BadShape(f64, f64),
    #[error("unknown scenario `{0}` (expected beta_8_2 or beta_10_6)")]
    UnknownScenario(String),
    #[error("success probability {0} outside (0, 1]")]
    BadProbability(f64),
    #[error("no clients")]
    Empty,
}

/// Lowest success probability a client may be given.
pub const MIN_SUCCESS_PROBABILITY: f64 = 0.01;

/// Gamma(shape, 1) by Marsaglia–Tsang squeeze/rejection; shapes below one are
/// boosted through `Gamma(shape + 1)·U^(1/shape)`.
pub fn sample_gamma<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    if shape < 1.0 {
        let g = sample_gamma(shape + 1.0, rng);
        let u: f64 = open01(rng);
        return g * u.powf(1.0 / shape);
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x: f64 = StandardNormal.sample(rng);
        let t = 1.0 + c * x;
        if t <= 0.0 {
            continue;
        }
        let v = t * t * t;
        let u: f64 = open01(rng);
        let x2 = x * x;
        if u < 1.0 - 0.0331 * x2 * x2 {
            return d * v;
        }
        if u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
            return d * v;
        }
    }
}

fn open01<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

/// Beta(α, β) as `X / (X + Y)` with independent Gamma(α), Gamma(β).
pub fn sample_beta<R: Rng + ?Sized>(alpha: f64, beta: f64, rng: &mut R) -> Result<f64, ReliabilityError> {
    if !(alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite()) {
        return Err(ReliabilityError::BadShape(alpha, beta));
    }
    loop {
        let x = sample_gamma(alpha, rng);
        let y = sample_gamma(beta, rng);
        let b = x / (x + y);
        if b > 0.0 && b < 1.0 {
            return Ok(b);
        }
    }
}

/// Beta shape pair that success probabilities are drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub alpha: f64,
    pub beta: f64,
}

impl Scenario {
    pub fn new(name: impl Into<String>, alpha: f64, beta: f64) -> Result<Self, ReliabilityError> {
        if !(alpha > 0.0 && beta > 0.0) {
            return Err(ReliabilityError::BadShape(alpha, beta));
        }
        Ok(Self {
            name: name.into(),
            alpha,
            beta,
        })
    }

    /// Highly reliable clients, mean 0.8.
    pub fn beta_8_2() -> Self {
        Self::new("beta_8_2", 8.0, 2.0).unwrap()
    }

    /// Moderately reliable clients, mean 0.625.
    pub fn beta_10_6() -> Self {
        Self::new("beta_10_6", 10.0, 6.0).unwrap()
    }

    pub fn preset(name: &str) -> Result<Self, ReliabilityError> {
        match name {
            "beta_8_2" => Ok(Self::beta_8_2()),
            "beta_10_6" => Ok(Self::beta_10_6()),
            other => Err(ReliabilityError::UnknownScenario(other.to_owned())),
        }
    }

    pub fn mean(&self) -> f64 {
        self.alpha / (self.alpha + self.beta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilitySample {
    pub p: Vec<f64>,
    /// Clients whose draw fell below [`MIN_SUCCESS_PROBABILITY`] and were raised to it.
    pub clamped: Vec<usize>,
}

/// Draws one success probability per client. The server is assumed to learn
/// these values exactly.
pub fn sample_reliabilities<R: Rng + ?Sized>(
    scenario: &Scenario,
    k: usize,
    rng: &mut R,
) -> Result<ReliabilitySample, ReliabilityError> {
    let mut p = Vec::with_capacity(k);
    let mut clamped = Vec::new();
    for client in 0..k {
        let v = sample_beta(scenario.alpha, scenario.beta, rng)?;
        if v < MIN_SUCCESS_PROBABILITY {
            clamped.push(client);
            p.push(MIN_SUCCESS_PROBABILITY);
        } else {
            p.push(v);
        }
    }
    Ok(ReliabilitySample { p, clamped })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityProfile {
    pub client_id: usize,
    pub p: f64,
    /// `2^rank` with rank 0 for the least reliable client.
    pub tag: u32,
}

/// Tags clients `1, 2, 4, …` in ascending order of `p`; ties go to the lower index first.
pub fn assign_tags(p: &[f64]) -> Result<Vec<ReliabilityProfile>, ReliabilityError> {
    if p.is_empty() {
        return Err(ReliabilityError::Empty);
    }
    if let Some(&bad) = p.iter().find(|&&v| !(v > 0.0 && v <= 1.0)) {
        return Err(ReliabilityError::BadProbability(bad));
    }
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]).then(a.cmp(&b)));
    let mut profiles: Vec<ReliabilityProfile> = p
        .iter()
        .enumerate()
        .map(|(client_id, &p)| ReliabilityProfile {
            client_id,
            p,
            tag: 0,
        })
        .collect();
    for (rank, &client) in order.iter().enumerate() {
        profiles[client].tag = 1 << rank;
    }
    Ok(profiles)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AvailabilityPattern {
    pub round_index: usize,
    pub draws: Vec<bool>,
}

impl AvailabilityPattern {
    pub fn all(k: usize, round_index: usize) -> Self {
        Self {
            round_index,
            draws: vec![true; k],
        }
    }

    pub fn available_count(&self) -> usize {
        self.draws.iter().filter(|&&a| a).count()
    }

    /// `0`/`1` string in client order, e.g. `1011`.
    pub fn bits(&self) -> String {
        self.draws.iter().map(|&a| if a { '1' } else { '0' }).collect()
    }
}

/// One independent Bernoulli(p_k) draw per client.
pub fn draw_availability<R: Rng + ?Sized>(
    profiles: &[ReliabilityProfile],
    round_index: usize,
    rng: &mut R,
) -> AvailabilityPattern {
    let draws = profiles
        .iter()
        .map(|prof| rng.random::<f64>() < prof.p)
        .collect();
    AvailabilityPattern { round_index, draws }
}
