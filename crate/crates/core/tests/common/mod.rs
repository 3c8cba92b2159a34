#![allow(dead_code)]

use rand::{Rng, SeedableRng};

use relvfl::allocation::HiddenPolicy;
use relvfl::dataset::{generate_synthetic, split, standardize, DataSplit, Dataset};
use relvfl::matrix::Matrix;
use relvfl::nn::{loss_gradient, GradientBundle, Layer, MlpModel};
use relvfl::protocol::{init_training, InitSetup, InitSummary, Method, VflSystem};
use relvfl::reliability::{AvailabilityPattern, Scenario};
use relvfl::rng::{SeedTree, SimRng};
use relvfl::tree::TreeParams;

pub struct Fixture {
    pub ds: Dataset,
    pub split: DataSplit,
    pub system: VflSystem,
    pub summary: InitSummary,
    pub seeds: SeedTree,
}

pub fn data(n: usize, j: usize, seed: u64) -> (Dataset, DataSplit) {
    let informative: Vec<usize> = (0..j.min(8)).collect();
    let raw = generate_synthetic(n, j, &informative, 0.1, seed).unwrap();
    let ds = standardize(&raw).0;
    let sp = split(&ds, 0.2, seed ^ 0xabc).unwrap();
    (ds, sp)
}

pub fn fixture_with(
    n: usize,
    j: usize,
    p: Vec<f64>,
    budget: usize,
    method: Method,
    hidden: HiddenPolicy,
    seed: u64,
) -> Fixture {
    let (ds, sp) = data(n, j, seed);
    let seeds = SeedTree::for_run(seed, 0);
    let scenario = Scenario::beta_8_2();
    let setup = InitSetup {
        dataset: &ds,
        train_indices: &sp.train_indices,
        scenario: &scenario,
        n_clients: p.len(),
        budget,
        tree: TreeParams::default(),
        hidden,
        method,
        delta: 1.0,
        seeds,
        p_override: Some(p),
    };
    let (system, summary) = init_training(&setup).unwrap();
    Fixture {
        ds,
        split: sp,
        system,
        summary,
        seeds,
    }
}

pub fn fixture(p: Vec<f64>, seed: u64) -> Fixture {
    fixture_with(300, 12, p, 24, Method::Proposed, HiddenPolicy::default(), seed)
}

fn block_diag(blocks: &[&Matrix]) -> Matrix {
    let rows: usize = blocks.iter().map(|b| b.rows()).sum();
    let cols: usize = blocks.iter().map(|b| b.cols()).sum();
    let mut out = Matrix::zeros(rows, cols);
    let (mut r0, mut c0) = (0, 0);
    for b in blocks {
        for r in 0..b.rows() {
            for c in 0..b.cols() {
                out[(r0 + r, c0 + c)] = b[(r, c)];
            }
        }
        r0 += b.rows();
        c0 += b.cols();
    }
    out
}

/// The split system as one network: client layers stacked block-diagonally,
/// followed by the server layers. Requires equal client depth. Returns the
/// model and the dataset column order its input expects.
pub fn compose(system: &VflSystem) -> (MlpModel, Vec<usize>) {
    let depth = system.clients[0].model.layers().len();
    assert!(system.clients.iter().all(|c| c.model.layers().len() == depth));
    let mut layers = Vec::new();
    for l in 0..depth {
        let ws: Vec<&Matrix> = system.clients.iter().map(|c| &c.model.layers()[l].weights).collect();
        let biases = system
            .clients
            .iter()
            .flat_map(|c| c.model.layers()[l].biases.clone())
            .collect();
        layers.push(Layer {
            weights: block_diag(&ws),
            biases,
            activation: system.clients[0].model.layers()[l].activation,
        });
    }
    layers.extend(system.server.model.layers().iter().cloned());
    let columns = system.clients.iter().flat_map(|c| c.columns.clone()).collect();
    (MlpModel::from_layers(layers).unwrap(), columns)
}

/// Largest absolute difference between the split system's gradients and
/// those of the composed network, with all clients available.
pub fn monolithic_gap(system: &VflSystem, ds: &Dataset, rows: &[usize]) -> f64 {
    let k = system.n_clients();
    let split = system
        .round_gradients(rows, &AvailabilityPattern::all(k, 0))
        .unwrap();
    let (model, columns) = compose(system);
    let x = ds.features().select_rows(rows).select_columns(&columns);
    let y = ds.labels_at(rows);
    let (loss, mono) = loss_gradient(&model, &x, &y, system.delta).unwrap();
    let mut gap = (loss - split.loss).abs();
    let depth = system.clients[0].model.layers().len();
    let server_grads: &GradientBundle = &split.server;
    for (l, g) in server_grads.layers.iter().enumerate() {
        gap = gap.max(max_diff(g.weights.as_slice(), mono.layers[depth + l].weights.as_slice()));
        gap = gap.max(max_diff(&g.biases, &mono.layers[depth + l].biases));
    }
    for l in 0..depth {
        let (mut r0, mut c0) = (0, 0);
        for cg in &split.clients {
            let g = &cg.as_ref().unwrap().layers[l];
            let m = &mono.layers[l];
            for r in 0..g.weights.rows() {
                for c in 0..g.weights.cols() {
                    gap = gap.max((g.weights[(r, c)] - m.weights[(r0 + r, c0 + c)]).abs());
                }
                gap = gap.max((g.biases[r] - m.biases[r0 + r]).abs());
            }
            r0 += g.weights.rows();
            c0 += g.weights.cols();
        }
    }
    gap
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Trains `rounds` rounds under a random forced availability trace and
/// checks every round that absent clients keep bit-identical parameters and
/// contribute all-zero server-input slices. Returns the number of absent
/// client-rounds seen.
pub fn forced_trace_check(fx: &mut Fixture, rounds: usize, seed: u64) -> Result<usize, String> {
    let k = fx.system.n_clients();
    let mut rng = SimRng::seed_from_u64(seed);
    let rows = &fx.split.train_indices;
    let mut absent_rounds = 0;
    for round in 0..rounds {
        let draws: Vec<bool> = (0..k).map(|_| rng.random::<f64>() < 0.6).collect();
        let avail = AvailabilityPattern {
            round_index: round,
            draws: draws.clone(),
        };
        let start = (round * 32) % (rows.len() - 32);
        let batch = &rows[start..start + 32];
        let (input, _) = fx.system.server_input(batch, &avail).map_err(|e| e.to_string())?;
        for (c, slot) in fx.system.server.layout.iter().enumerate() {
            if !draws[c] {
                let block = input.column_block(slot.offset, slot.width);
                if block.as_slice().iter().any(|v| v.to_bits() != 0) {
                    return Err(format!("round {round}: client {c} slice not zero"));
                }
            }
        }
        let before: Vec<Vec<u64>> = fx
            .system
            .clients
            .iter()
            .map(|c| c.model.parameters().iter().map(|v| v.to_bits()).collect())
            .collect();
        fx.system.train_round(batch, &avail, 0.05).map_err(|e| e.to_string())?;
        for (c, client) in fx.system.clients.iter().enumerate() {
            let after: Vec<u64> = client.model.parameters().iter().map(|v| v.to_bits()).collect();
            if !draws[c] {
                absent_rounds += 1;
                if after != before[c] {
                    return Err(format!("round {round}: absent client {c} changed"));
                }
            } else if after == before[c] {
                return Err(format!("round {round}: present client {c} did not update"));
            }
        }
    }
    Ok(absent_rounds)
}
