//! Reliability-proportional feature partitioning, embedding-width
//! apportionment, model shapes, and the random-split baseline.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::MlpSpec;

#[derive(Debug, Error, PartialEq)]
pub enum AllocationError {
    #[error("reliabilities must be positive and finite")]
    BadReliability,
    #[error("{features} features cannot cover {clients} clients")]
    TooFewFeatures { features: usize, clients: usize },
    #[error("embedding budget {budget} is smaller than client count {clients}")]
    BudgetTooSmall { budget: usize, clients: usize },
    #[error("partition has {partition} clients, plan has {plan}")]
    InconsistentClients { partition: usize, plan: usize },
    #[error("no clients")]
    NoClients,
    #[error("hidden layer widths must be ≥ 1")]
    BadHidden,
}

/// Disjoint feature index lists, one per client, covering every feature.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeaturePartition {
    pub assignments: Vec<Vec<usize>>,
}

impl FeaturePartition {
    pub fn n_clients(&self) -> usize {
        self.assignments.len()
    }

    pub fn n_features(&self) -> usize {
        self.assignments.iter().map(Vec::len).sum()
    }

    /// Sum of the importances each client was given.
    pub fn assigned_importance(&self, importance: &[f64]) -> Vec<f64> {
        self.assignments
            .iter()
            .map(|cols| cols.iter().map(|&j| importance[j]).sum())
            .collect()
    }

    /// True if the lists are pairwise disjoint and cover `0..n_features`.
    pub fn is_exact_cover(&self, n_features: usize) -> bool {
        let mut seen = vec![false; n_features];
        for &j in self.assignments.iter().flatten() {
            if j >= n_features || std::mem::replace(&mut seen[j], true) {
                return false;
            }
        }
        seen.into_iter().all(|s| s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingPlan {
    pub dims: Vec<usize>,
    pub total_budget: usize,
}

/// Placement of one client's embedding inside the server input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub offset: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpecSet {
    pub clients: Vec<MlpSpec>,
    pub server: MlpSpec,
    pub layout: Vec<Slot>,
}

/// Overrides for hidden layer widths. `None` keeps the default rule.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HiddenPolicy {
    #[serde(default)]
    pub client_hidden: Option<Vec<usize>>,
    #[serde(default)]
    pub server_hidden: Option<Vec<usize>>,
}

fn check_reliability(p: &[f64]) -> Result<f64, AllocationError> {
    if p.is_empty() {
        return Err(AllocationError::NoClients);
    }
    if p.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(AllocationError::BadReliability);
    }
    Ok(p.iter().sum())
}

/// `p_k / Σ p`.
pub fn importance_shares(p: &[f64]) -> Result<Vec<f64>, AllocationError> {
    let total = check_reliability(p)?;
    Ok(p.iter().map(|v| v / total).collect())
}

/// Greedy deficit fill.
///
/// Features are visited in descending importance (ties by index). Each goes
/// to the client whose target `share_k · Σ importance` is furthest from being
/// met, ties resolved toward the larger share and then the lower client
/// index. Because a feature is only ever handed to a client whose deficit is
/// non-negative, and the deficits sum to zero at the end, every client's
/// assigned total ends within one feature's importance of its target.
///
/// Zero-importance features are dealt afterwards, each to the client holding
/// the fewest features. When the remaining features are only just enough to
/// give every still-empty client one, they go to empty clients.
pub fn partition_features(importance: &[f64], shares: &[f64]) -> Result<FeaturePartition, AllocationError> {
    let k = shares.len();
    let j = importance.len();
    if k == 0 {
        return Err(AllocationError::NoClients);
    }
    if j < k {
        return Err(AllocationError::TooFewFeatures {
            features: j,
            clients: k,
        });
    }
    if shares.iter().any(|&s| !(s > 0.0 && s.is_finite()))
        || importance.iter().any(|&v| !(v >= 0.0 && v.is_finite()))
    {
        return Err(AllocationError::BadReliability);
    }
    let share_total: f64 = shares.iter().sum();
    let total: f64 = importance.iter().sum();

    let mut order: Vec<usize> = (0..j).collect();
    order.sort_by(|&a, &b| importance[b].total_cmp(&importance[a]).then(a.cmp(&b)));

    let mut deficit: Vec<f64> = shares.iter().map(|s| s / share_total * total).collect();
    let mut assignments: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut empty = k;

    for (pos, &feature) in order.iter().enumerate() {
        let remaining = j - pos;
        let must_fill = remaining <= empty;
        let candidates = (0..k).filter(|&c| !must_fill || assignments[c].is_empty());
        let target = if importance[feature] > 0.0 || must_fill {
            candidates
                .max_by(|&a, &b| {
                    deficit[a]
                        .total_cmp(&deficit[b])
                        .then(shares[a].total_cmp(&shares[b]))
                        .then(b.cmp(&a))
                })
                .unwrap()
        } else {
            candidates
                .min_by(|&a, &b| assignments[a].len().cmp(&assignments[b].len()).then(a.cmp(&b)))
                .unwrap()
        };
        if assignments[target].is_empty() {
            empty -= 1;
        }
        deficit[target] -= importance[feature];
        assignments[target].push(feature);
    }
    for cols in &mut assignments {
        cols.sort_unstable();
    }
    Ok(FeaturePartition { assignments })
}

/// Largest-remainder apportionment of `seats` over `weights`. Remainder ties
/// go to the larger weight, then the lower index.
fn largest_remainder(weights: &[f64], seats: usize) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| seats as f64 * w / total).collect();
    let mut dims: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = dims.iter().sum();
    let mut left = seats.saturating_sub(assigned);
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra)
            .then(weights[b].total_cmp(&weights[a]))
            .then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        dims[i] += 1;
        left -= 1;
    }
    dims
}

/// Embedding widths proportional to reliability with a minimum width of one.
///
/// Plain largest-remainder rounding is tried first; any client it would leave
/// at zero is pinned to one, and the rest of the budget is re-apportioned
/// over the remaining clients until no one is below the floor.
pub fn allocate_embedding_dims(p: &[f64], total_budget: usize) -> Result<EmbeddingPlan, AllocationError> {
    check_reliability(p)?;
    let k = p.len();
    if total_budget < k {
        return Err(AllocationError::BudgetTooSmall {
            budget: total_budget,
            clients: k,
        });
    }
    let mut pinned = vec![false; k];
    loop {
        let free: Vec<usize> = (0..k).filter(|&i| !pinned[i]).collect();
        let seats = total_budget - (k - free.len());
        let weights: Vec<f64> = free.iter().map(|&i| p[i]).collect();
        let alloc = largest_remainder(&weights, seats);
        let zero: Vec<usize> = free
            .iter()
            .zip(&alloc)
            .filter(|&(_, &d)| d == 0)
            .map(|(&i, _)| i)
            .collect();
        if zero.is_empty() {
            let mut dims = vec![1; k];
            for (&i, &d) in free.iter().zip(&alloc) {
                dims[i] = d;
            }
            return Ok(EmbeddingPlan { dims, total_budget });
        }
        for i in zero {
            pinned[i] = true;
        }
    }
}

pub fn default_client_hidden(n_features: usize, width: usize) -> usize {
    (2 * n_features).max(width)
}

pub fn default_server_hidden(input: usize) -> Vec<usize> {
    let h = input.max(32);
    vec![h, (h / 2).max(1)]
}

/// Client `k`: `[|J_k| → h → d_k]`, `h = max(2|J_k|, d_k)`.
/// Server: `[Σd → H → H/2 → 1]`, `H = max(32, Σd)`.
pub fn build_model_specs(
    partition: &FeaturePartition,
    plan: &EmbeddingPlan,
    hidden: &HiddenPolicy,
) -> Result<ModelSpecSet, AllocationError> {
    if partition.n_clients() != plan.dims.len() {
        return Err(AllocationError::InconsistentClients {
            partition: partition.n_clients(),
            plan: plan.dims.len(),
        });
    }
    if partition.n_clients() == 0 {
        return Err(AllocationError::NoClients);
    }
    let bad = |h: &Option<Vec<usize>>| h.as_ref().is_some_and(|v| v.contains(&0));
    if bad(&hidden.client_hidden) || bad(&hidden.server_hidden) {
        return Err(AllocationError::BadHidden);
    }
    let mut layout = Vec::with_capacity(plan.dims.len());
    let mut offset = 0;
    let clients = partition
        .assignments
        .iter()
        .zip(&plan.dims)
        .map(|(cols, &d)| {
            layout.push(Slot { offset, width: d });
            offset += d;
            let mut sizes = vec![cols.len()];
            match &hidden.client_hidden {
                Some(h) => sizes.extend_from_slice(h),
                None => sizes.push(default_client_hidden(cols.len(), d)),
            }
            sizes.push(d);
            MlpSpec::relu(sizes)
        })
        .collect();
    let mut sizes = vec![offset];
    match &hidden.server_hidden {
        Some(h) => sizes.extend_from_slice(h),
        None => sizes.extend(default_server_hidden(offset)),
    }
    sizes.push(1);
    Ok(ModelSpecSet {
        clients,
        server: MlpSpec::relu(sizes),
        layout,
    })
}

/// Baseline configuration: a uniformly shuffled feature order dealt
/// round-robin, and `budget / K` dims each with the remainder going to the
/// lowest client indices. Never looks at reliability.
pub fn random_partition<R: Rng + ?Sized>(
    n_features: usize,
    n_clients: usize,
    budget: usize,
    rng: &mut R,
) -> Result<(FeaturePartition, EmbeddingPlan), AllocationError> {
    if n_clients == 0 {
        return Err(AllocationError::NoClients);
    }
    if n_features < n_clients {
        return Err(AllocationError::TooFewFeatures {
            features: n_features,
            clients: n_clients,
        });
    }
    if budget < n_clients {
        return Err(AllocationError::BudgetTooSmall {
            budget,
            clients: n_clients,
        });
    }
    let mut perm: Vec<usize> = (0..n_features).collect();
    perm.shuffle(rng);
    let mut assignments = vec![Vec::new(); n_clients];
    for (i, f) in perm.into_iter().enumerate() {
        assignments[i % n_clients].push(f);
    }
    for cols in &mut assignments {
        cols.sort_unstable();
    }
    let base = budget / n_clients;
    let extra = budget % n_clients;
    let dims = (0..n_clients).map(|i| base + usize::from(i < extra)).collect();
    Ok((
        FeaturePartition { assignments },
        EmbeddingPlan {
            dims,
            total_budget: budget,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SimRng;
    use proptest::prelude::*;
    use rand::SeedableRng;

    #[test]
    fn shares_examples() {
        let s = importance_shares(&[0.8, 0.6, 0.4, 0.2]).unwrap();
        for (a, b) in s.iter().zip([0.4, 0.3, 0.2, 0.1]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(importance_shares(&[0.5; 4]).unwrap(), vec![0.25; 4]);
        assert_eq!(importance_shares(&[0.3]).unwrap(), vec![1.0]);
        assert!(importance_shares(&[0.0, 0.0]).is_err());
        assert!(importance_shares(&[]).is_err());
    }

    #[test]
    fn greedy_perfect_match() {
        // Walkthrough: deficits start (.4,.3,.2,.1); f0 → c0 leaves (0,.3,.2,.1);
        // f1 → c1 leaves (0,0,.2,.1); f2 → c2; f3 → c3.
        let p = partition_features(&[0.4, 0.3, 0.2, 0.1], &[0.4, 0.3, 0.2, 0.1]).unwrap();
        assert_eq!(p.assignments, vec![vec![0], vec![1], vec![2], vec![3]]);
    }

    #[test]
    fn greedy_uniform_is_balanced() {
        let p = partition_features(&[0.125; 8], &[0.25; 4]).unwrap();
        // equal deficits resolve to the lowest index, so features pair up in order
        assert_eq!(p.assignments, vec![vec![0, 4], vec![1, 5], vec![2, 6], vec![3, 7]]);
    }

    #[test]
    fn single_client_takes_everything() {
        let p = partition_features(&[0.1, 0.0, 0.9], &[1.0]).unwrap();
        assert_eq!(p.assignments, vec![vec![0, 1, 2]]);
        assert!(partition_features(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn zero_importance_features_fill_emptiest() {
        let p = partition_features(&[0.0, 1.0, 0.0, 0.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!(p.is_exact_cover(5));
        // f1 → c0 by tie rule, then zeros alternate starting with the empty c1
        assert_eq!(p.assignments[0], vec![1, 2, 4]);
        assert_eq!(p.assignments[1], vec![0, 3]);
    }

    #[test]
    fn every_client_gets_a_feature() {
        // pure greedy would give c0 two features and leave c3 empty
        let p = partition_features(&[0.25; 4], &[0.4, 0.3, 0.2, 0.1]).unwrap();
        assert!(p.assignments.iter().all(|a| a.len() == 1));
        let p = partition_features(&[0.97, 0.01, 0.01, 0.01], &[0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(p.assignments[3], vec![0]);
        assert!(p.assignments.iter().all(|a| a.len() == 1));
    }

    #[test]
    fn apportionment_examples() {
        assert_eq!(
            allocate_embedding_dims(&[0.8, 0.6, 0.4, 0.2], 48).unwrap().dims,
            vec![19, 14, 10, 5]
        );
        assert_eq!(allocate_embedding_dims(&[0.7; 4], 48).unwrap().dims, vec![12; 4]);
        assert_eq!(
            allocate_embedding_dims(&[0.99, 0.005, 0.005], 4).unwrap().dims,
            vec![2, 1, 1]
        );
        assert_eq!(
            allocate_embedding_dims(&[0.5; 4], 3),
            Err(AllocationError::BudgetTooSmall { budget: 3, clients: 4 })
        );
    }

    #[test]
    fn specs_default_rules() {
        let part = FeaturePartition {
            assignments: vec![vec![0, 1, 2, 3, 4], (5..12).collect(), vec![12], vec![13, 14]],
        };
        let plan = EmbeddingPlan {
            dims: vec![10, 14, 19, 5],
            total_budget: 48,
        };
        let specs = build_model_specs(&part, &plan, &HiddenPolicy::default()).unwrap();
        assert_eq!(specs.clients[0].sizes, vec![5, 10, 10]);
        assert_eq!(specs.clients[1].sizes, vec![7, 14, 14]);
        assert_eq!(specs.clients[3].sizes, vec![2, 5, 5]);
        assert_eq!(specs.server.sizes, vec![48, 48, 24, 1]);
        let offsets: Vec<usize> = specs.layout.iter().map(|s| s.offset).collect();
        assert_eq!(offsets, vec![0, 10, 24, 43]);

        let custom = HiddenPolicy {
            client_hidden: Some(vec![64]),
            server_hidden: None,
        };
        let specs = build_model_specs(&part, &plan, &custom).unwrap();
        assert_eq!(specs.clients[0].sizes, vec![5, 64, 10]);

        let small = EmbeddingPlan {
            dims: vec![2, 2, 2, 2],
            total_budget: 8,
        };
        assert_eq!(
            build_model_specs(&part, &small, &HiddenPolicy::default()).unwrap().server.sizes,
            vec![8, 32, 16, 1]
        );
        let short = EmbeddingPlan {
            dims: vec![24, 24],
            total_budget: 48,
        };
        assert!(build_model_specs(&part, &short, &HiddenPolicy::default()).is_err());
    }

    #[test]
    fn baseline_sizes_and_dims() {
        let mut rng = SimRng::seed_from_u64(3);
        let (part, plan) = random_partition(69, 4, 48, &mut rng).unwrap();
        let sizes: Vec<usize> = part.assignments.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![18, 17, 17, 17]);
        assert_eq!(plan.dims, vec![12; 4]);
        assert!(part.is_exact_cover(69));
        let (_, plan) = random_partition(10, 3, 10, &mut rng).unwrap();
        assert_eq!(plan.dims, vec![4, 3, 3]);

        let again = |seed| random_partition(30, 4, 48, &mut SimRng::seed_from_u64(seed)).unwrap();
        assert_eq!(again(11), again(11));
        assert_ne!(again(11).0, again(12).0);
        assert!(random_partition(3, 4, 48, &mut rng).is_err());
    }

    proptest! {
        #[test]
        fn partition_cover_and_deficit_bound(
            k in 1usize..=6,
            extra in 0usize..30,
            seed in any::<u64>(),
        ) {
            let mut rng = SimRng::seed_from_u64(seed);
            let j = k + extra;
            let imp: Vec<f64> = (0..j).map(|_| rng.random::<f64>()).collect();
            let total: f64 = imp.iter().sum();
            let imp: Vec<f64> = imp.iter().map(|v| v / total).collect();
            let p: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
            let shares = importance_shares(&p).unwrap();
            let part = partition_features(&imp, &shares).unwrap();
            prop_assert!(part.is_exact_cover(j));
            prop_assert!(part.assignments.iter().all(|a| !a.is_empty()));
            let max_imp = imp.iter().cloned().fold(0.0, f64::max);
            for (got, share) in part.assigned_importance(&imp).iter().zip(&shares) {
                prop_assert!((got - share).abs() <= max_imp + 1e-12);
            }
        }

        #[test]
        fn apportionment_invariants(
            p in proptest::collection::vec(0.01f64..1.0, 1..=6),
            slack in 0usize..60,
        ) {
            let budget = p.len() + slack;
            let plan = allocate_embedding_dims(&p, budget).unwrap();
            prop_assert_eq!(plan.dims.iter().sum::<usize>(), budget);
            prop_assert!(plan.dims.iter().all(|&d| d >= 1));
            for a in 0..p.len() {
                for b in 0..p.len() {
                    if p[a] > p[b] {
                        prop_assert!(plan.dims[a] >= plan.dims[b]);
                    }
                }
            }
            let plain = largest_remainder(&p, budget);
            if plain.iter().all(|&d| d >= 1) {
                prop_assert_eq!(&plan.dims, &plain);
            }
            let total: f64 = p.iter().sum();
            if plain.iter().all(|&d| d >= 1) {
                for (d, w) in plan.dims.iter().zip(&p) {
                    prop_assert!((*d as f64 - budget as f64 * w / total).abs() < 1.0);
                }
            }
        }
    }
}
