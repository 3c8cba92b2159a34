//! Availability-pattern accounting and the per-pattern weighted test loss.
//!
//! A pattern ID is `Σ a_k·tag_k` with power-of-two tags, so it is a bijection
//! between non-empty availability patterns and `1..2^K`. ID 0 (nobody
//! available) is counted but left out of every statistic.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{ProtocolError, VflSystem};
use crate::reliability::draw_availability;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{draws} availability entries for {tags} tags")]
    LengthMismatch { draws: usize, tags: usize },
    #[error("baseline weighted losses sum to zero")]
    ZeroBaseline,
    #[error("loss maps cover different pattern IDs")]
    DomainMismatch,
    #[error("test phase needs at least one round")]
    ZeroRounds,
    #[error("no runs to report")]
    NoRuns,
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PatternId(pub u32);

/// `None` for the all-absent pattern.
pub fn pattern_id(availability: &[bool], tags: &[u32]) -> Result<Option<PatternId>, EvalError> {
    if availability.len() != tags.len() {
        return Err(EvalError::LengthMismatch {
            draws: availability.len(),
            tags: tags.len(),
        });
    }
    let id: u32 = availability
        .iter()
        .zip(tags)
        .filter(|(&a, _)| a)
        .map(|(_, &t)| t)
        .sum();
    Ok((id != 0).then_some(PatternId(id)))
}

/// Per-pattern loss sums and counts for the test phase of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternStats {
    pub n_clients: usize,
    /// Indexed by pattern ID; entry 0 is the all-absent pattern.
    pub counts: Vec<u64>,
    pub loss_sums: Vec<f64>,
}

impl PatternStats {
    pub fn new(n_clients: usize) -> Self {
        let n = 1usize << n_clients;
        Self {
            n_clients,
            counts: vec![0; n],
            loss_sums: vec![0.0; n],
        }
    }

    pub fn max_id(&self) -> u32 {
        (self.counts.len() - 1) as u32
    }

    pub fn record(&mut self, id: Option<PatternId>, loss: f64) {
        match id {
            Some(PatternId(m)) => {
                self.counts[m as usize] += 1;
                self.loss_sums[m as usize] += loss;
            }
            None => self.counts[0] += 1,
        }
    }

    pub fn zero_count(&self) -> u64 {
        self.counts[0]
    }

    pub fn count(&self, m: u32) -> u64 {
        self.counts[m as usize]
    }

    pub fn total_rounds(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn nonzero_rounds(&self) -> u64 {
        self.total_rounds() - self.zero_count()
    }

    /// Mean loss over rounds that showed pattern `m`; zero if it never did.
    pub fn mean_loss(&self, m: u32) -> f64 {
        let c = self.counts[m as usize];
        if c == 0 || m == 0 {
            0.0
        } else {
            self.loss_sums[m as usize] / c as f64
        }
    }

    /// Share of non-zero-ID rounds that showed pattern `m`.
    pub fn frequency(&self, m: u32) -> f64 {
        let n = self.nonzero_rounds();
        if n == 0 || m == 0 {
            0.0
        } else {
            self.counts[m as usize] as f64 / n as f64
        }
    }
}

/// `ℓ(m) = (1/N_sim) Σ_n ℓ(m|n)·f(m|n)` for every `m` in `1..2^K`.
pub fn weighted_loss(stats: &[PatternStats], n_sim: usize) -> BTreeMap<u32, f64> {
    let max_id = stats.iter().map(PatternStats::max_id).max().unwrap_or(0);
    (1..=max_id)
        .map(|m| {
            let sum: f64 = stats
                .iter()
                .filter(|s| m <= s.max_id())
                .map(|s| s.mean_loss(m) * s.frequency(m))
                .sum();
            (m, sum / n_sim.max(1) as f64)
        })
        .collect()
}

/// `Σ_m |ℓ_prop(m) − ℓ_base(m)| / Σ_m ℓ_base(m)` in percent, signed positive
/// when the proposed losses are lower in aggregate.
pub fn improvement_percent(
    proposed: &BTreeMap<u32, f64>,
    baseline: &BTreeMap<u32, f64>,
) -> Result<f64, EvalError> {
    if proposed.keys().ne(baseline.keys()) {
        return Err(EvalError::DomainMismatch);
    }
    let denom: f64 = baseline.values().sum();
    if denom == 0.0 {
        return Err(EvalError::ZeroBaseline);
    }
    let abs: f64 = proposed
        .values()
        .zip(baseline.values())
        .map(|(p, b)| (p - b).abs())
        .sum();
    let signed: f64 = proposed.values().zip(baseline.values()).map(|(p, b)| b - p).sum();
    let sign = if signed < 0.0 { -1.0 } else { 1.0 };
    Ok(sign * 100.0 * abs / denom)
}

/// Draws availability for `n_rounds` inference rounds and scores the whole
/// test split under each. Each distinct pattern is evaluated once, since
/// inference is deterministic for fixed models.
pub fn run_test_phase<R: Rng + ?Sized>(
    system: &VflSystem,
    test_rows: &[usize],
    n_rounds: usize,
    rng: &mut R,
) -> Result<PatternStats, EvalError> {
    if n_rounds == 0 {
        return Err(EvalError::ZeroRounds);
    }
    let profiles = system.profiles();
    let tags = system.tags();
    let mut stats = PatternStats::new(system.n_clients());
    let mut cache: HashMap<u32, f64> = HashMap::new();
    for round in 0..n_rounds {
        let avail = draw_availability(&profiles, round, rng);
        let id = pattern_id(&avail.draws, &tags)?;
        let loss = match id {
            None => 0.0,
            Some(PatternId(m)) => match cache.get(&m) {
                Some(&l) => l,
                None => {
                    let l = system.infer_round(test_rows, &avail)?.loss;
                    cache.insert(m, l);
                    l
                }
            },
        };
        stats.record(id, loss);
    }
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub weighted_loss: BTreeMap<u32, f64>,
    /// Per-run test statistics in run order.
    pub runs: Vec<PatternStats>,
}

impl MethodReport {
    pub fn from_runs(runs: Vec<PatternStats>) -> Self {
        Self {
            weighted_loss: weighted_loss(&runs, runs.len()),
            runs,
        }
    }

    pub fn total(&self) -> f64 {
        self.weighted_loss.values().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub n_clients: usize,
    pub n_sim: usize,
    pub test_rounds: usize,
    pub proposed: Option<MethodReport>,
    pub baseline: Option<MethodReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub scenario: String,
    pub n_clients: usize,
    pub n_sim: usize,
    pub test_rounds: usize,
    pub total_weighted_loss_proposed: Option<f64>,
    pub total_weighted_loss_baseline: Option<f64>,
    pub improvement_percent: Option<f64>,
    /// Improvement computed from each run alone (ℓ·f maps of that run).
    pub per_run_improvement_percent: Vec<f64>,
    pub per_run_improvement_std: Option<f64>,
    pub zero_id_rounds_proposed: Vec<u64>,
    pub zero_id_rounds_baseline: Vec<u64>,
    pub config: serde_json::Value,
}

impl RunReport {
    pub fn improvement_percent(&self) -> Option<f64> {
        match (&self.proposed, &self.baseline) {
            (Some(p), Some(b)) => improvement_percent(&p.weighted_loss, &b.weighted_loss).ok(),
            _ => None,
        }
    }

    /// Improvement per run, using only that run's statistics.
    pub fn per_run_improvement(&self) -> Vec<f64> {
        let (Some(p), Some(b)) = (&self.proposed, &self.baseline) else {
            return vec![];
        };
        p.runs
            .iter()
            .zip(&b.runs)
            .filter_map(|(pr, br)| {
                let pm = weighted_loss(std::slice::from_ref(pr), 1);
                let bm = weighted_loss(std::slice::from_ref(br), 1);
                improvement_percent(&pm, &bm).ok()
            })
            .collect()
    }

    /// Per-ID difference `proposed − baseline`; negative favours proposed.
    pub fn differences(&self) -> Option<BTreeMap<u32, f64>> {
        let (Some(p), Some(b)) = (&self.proposed, &self.baseline) else {
            return None;
        };
        Some(
            p.weighted_loss
                .iter()
                .map(|(&m, &lp)| (m, lp - b.weighted_loss.get(&m).copied().unwrap_or(0.0)))
                .collect(),
        )
    }

    pub fn summary(&self, config: serde_json::Value) -> Summary {
        let per_run = self.per_run_improvement();
        let std = (per_run.len() > 1).then(|| {
            let m = per_run.iter().sum::<f64>() / per_run.len() as f64;
            (per_run.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (per_run.len() - 1) as f64).sqrt()
        });
        let zeros = |r: &Option<MethodReport>| {
            r.as_ref()
                .map(|r| r.runs.iter().map(PatternStats::zero_count).collect())
                .unwrap_or_default()
        };
        Summary {
            schema_version: REPORT_SCHEMA_VERSION,
            scenario: self.scenario.clone(),
            n_clients: self.n_clients,
            n_sim: self.n_sim,
            test_rounds: self.test_rounds,
            total_weighted_loss_proposed: self.proposed.as_ref().map(MethodReport::total),
            total_weighted_loss_baseline: self.baseline.as_ref().map(MethodReport::total),
            improvement_percent: self.improvement_percent(),
            per_run_improvement_percent: per_run,
            per_run_improvement_std: std,
            zero_id_rounds_proposed: zeros(&self.proposed),
            zero_id_rounds_baseline: zeros(&self.baseline),
            config,
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:?}")).unwrap_or_default()
}

fn write_file(path: &Path, contents: &str) -> Result<(), EvalError> {
    std::fs::write(path, contents).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Writes `weighted_loss.csv`, `diff.csv` and `summary.json` into `dir`.
pub fn emit_report(report: &RunReport, config: serde_json::Value, dir: &Path) -> Result<Summary, EvalError> {
    if report.n_sim == 0 || (report.proposed.is_none() && report.baseline.is_none()) {
        return Err(EvalError::NoRuns);
    }
    std::fs::create_dir_all(dir).map_err(|source| EvalError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let max_id = (1u32 << report.n_clients) - 1;
    let get = |r: &Option<MethodReport>, m: u32| {
        r.as_ref()
            .map(|r| r.weighted_loss.get(&m).copied().unwrap_or(0.0))
    };
    let diffs = report.differences();

    let mut wl = String::from("id,weighted_loss_proposed,weighted_loss_baseline,diff\n");
    let mut df = String::from("id,diff\n");
    for m in 1..=max_id {
        let d = diffs.as_ref().and_then(|d| d.get(&m).copied());
        wl.push_str(&format!(
            "{m},{},{},{}\n",
            fmt_opt(get(&report.proposed, m)),
            fmt_opt(get(&report.baseline, m)),
            fmt_opt(d)
        ));
        df.push_str(&format!("{m},{}\n", fmt_opt(d)));
    }
    write_file(&dir.join("weighted_loss.csv"), &wl)?;
    write_file(&dir.join("diff.csv"), &df)?;
    let summary = report.summary(config);
    let json = serde_json::to_string_pretty(&summary)?;
    write_file(&dir.join("summary.json"), &(json + "\n"))?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pattern_id_examples() {
        let tags = [8, 1, 4, 2];
        assert_eq!(
            pattern_id(&[true, true, false, false], &tags).unwrap(),
            Some(PatternId(9))
        );
        assert_eq!(pattern_id(&[true; 4], &tags).unwrap(), Some(PatternId(15)));
        assert_eq!(pattern_id(&[false; 4], &tags).unwrap(), None);
        assert!(pattern_id(&[true], &tags).is_err());
    }

    fn stats_with(k: usize, entries: &[(u32, u64, f64)], zeros: u64) -> PatternStats {
        let mut s = PatternStats::new(k);
        for &(m, c, loss) in entries {
            for _ in 0..c {
                s.record(Some(PatternId(m)), loss);
            }
        }
        for _ in 0..zeros {
            s.record(None, 0.0);
        }
        s
    }

    #[test]
    fn weighted_loss_two_runs() {
        // run 1: ID 3 has f = 0.4, ℓ = 0.5; run 2: f = 0.6, ℓ = 0.3
        let a = stats_with(2, &[(3, 4, 0.5), (1, 6, 1.0)], 0);
        let b = stats_with(2, &[(3, 6, 0.3), (2, 4, 1.0)], 0);
        let w = weighted_loss(&[a, b], 2);
        assert!((w[&3] - 0.19).abs() < 1e-12);
        assert_eq!(w.len(), 3);
    }

    #[test]
    fn unseen_pattern_and_single_run() {
        let a = stats_with(2, &[(3, 10, 0.7)], 5);
        let w = weighted_loss(std::slice::from_ref(&a), 1);
        assert_eq!(w[&1], 0.0);
        assert_eq!(w[&2], 0.0);
        assert!((w[&3] - 0.7).abs() < 1e-12);
        assert_eq!(a.frequency(3), 1.0);
        assert_eq!(a.zero_count(), 5);
        assert_eq!(a.total_rounds(), 15);
    }

    #[test]
    fn improvement_examples() {
        let base: BTreeMap<u32, f64> = (1..=15).map(|m| (m, 0.1 + m as f64 * 0.01)).collect();
        assert_eq!(improvement_percent(&base, &base).unwrap(), 0.0);
        let scaled = |c: f64| base.iter().map(|(&m, &v)| (m, v * c)).collect::<BTreeMap<_, _>>();
        assert!((improvement_percent(&scaled(0.855), &base).unwrap() - 14.5).abs() < 1e-9);
        assert!((improvement_percent(&scaled(0.82), &base).unwrap() - 18.0).abs() < 1e-9);
        assert!((improvement_percent(&scaled(1.1), &base).unwrap() + 10.0).abs() < 1e-9);
        let zero: BTreeMap<u32, f64> = (1..=15).map(|m| (m, 0.0)).collect();
        assert!(matches!(improvement_percent(&base, &zero), Err(EvalError::ZeroBaseline)));
        let short: BTreeMap<u32, f64> = (1..=3).map(|m| (m, 1.0)).collect();
        assert!(matches!(improvement_percent(&short, &base), Err(EvalError::DomainMismatch)));
    }

    proptest! {
        #[test]
        fn id_is_a_bijection(k in 1usize..=6) {
            let tags: Vec<u32> = (0..k).map(|r| 1 << r).collect();
            let mut seen = vec![false; 1 << k];
            for mask in 1u32..(1 << k) {
                let draws: Vec<bool> = (0..k).map(|i| mask >> i & 1 == 1).collect();
                let PatternId(m) = pattern_id(&draws, &tags).unwrap().unwrap();
                prop_assert!(m >= 1 && m < (1 << k));
                prop_assert!(!seen[m as usize]);
                seen[m as usize] = true;
            }
            prop_assert!(seen[1..].iter().all(|&s| s));
        }

        #[test]
        fn improvement_is_scale_invariant(
            vals in proptest::collection::vec((0.01f64..5.0, 0.01f64..5.0), 15),
            c in 0.01f64..100.0,
        ) {
            let p: BTreeMap<u32, f64> = vals.iter().enumerate().map(|(i, v)| (i as u32 + 1, v.0)).collect();
            let b: BTreeMap<u32, f64> = vals.iter().enumerate().map(|(i, v)| (i as u32 + 1, v.1)).collect();
            let ps: BTreeMap<u32, f64> = p.iter().map(|(&m, &v)| (m, v * c)).collect();
            let bs: BTreeMap<u32, f64> = b.iter().map(|(&m, &v)| (m, v * c)).collect();
            let x = improvement_percent(&p, &b).unwrap();
            let y = improvement_percent(&ps, &bs).unwrap();
            prop_assert!((x - y).abs() < 1e-9 * x.abs().max(1.0));
        }
    }
}
