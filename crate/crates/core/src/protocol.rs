//! Split-model training and inference across unreliable clients.
//!
//! Each round, available clients encode their columns of a mini-batch, the
//! server concatenates the embeddings (zeros for absent clients), computes
//! the Huber loss, updates itself and returns each available client its
//! slice of the input gradient. Absent clients receive nothing.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocation::{
    allocate_embedding_dims, build_model_specs, importance_shares, partition_features,
    random_partition, AllocationError, EmbeddingPlan, FeaturePartition, HiddenPolicy,
    ModelSpecSet, Slot,
};
use crate::dataset::{project, ClientView, Dataset, DatasetError};
use crate::matrix::Matrix;
use crate::nn::{huber, init_model_with, ForwardTrace, GradientBundle, MlpModel, NnError};
use crate::reliability::{
    assign_tags, draw_availability, sample_reliabilities, AvailabilityPattern, ReliabilityError,
    ReliabilityProfile, Scenario,
};
use crate::rng::{Phase, SeedTree};
use crate::tree::{fit_tree, ImportanceVector, TreeError, TreeParams};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Allocation(#[from] AllocationError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Reliability(#[from] ReliabilityError),
    #[error("non-finite training loss at round {round}")]
    NonFiniteLoss { round: usize },
    #[error("round budget must be ≥ 1")]
    ZeroRounds,
    #[error("batch is empty")]
    EmptyBatch,
    #[error("availability has {found} entries for {expected} clients")]
    AvailabilityLength { expected: usize, found: usize },
    #[error("{models} stored models for {clients} clients")]
    ClientCount { models: usize, clients: usize },
    #[error("invalid schedule: {0}")]
    Schedule(String),
}

pub type Result<T> = std::result::Result<T, ProtocolError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Reliability-aware partition and embedding widths.
    Proposed,
    /// Random feature split with equal widths.
    Baseline,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Proposed => "proposed",
            Method::Baseline => "baseline",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: usize,
    pub profile: ReliabilityProfile,
    pub columns: Vec<usize>,
    pub model: MlpModel,
    pub view: ClientView,
    /// Sum of the importances of `columns`.
    pub importance: f64,
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub model: MlpModel,
    pub layout: Vec<Slot>,
    pub labels: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round_index: usize,
    pub availability: AvailabilityPattern,
    pub train_loss: f64,
    pub eval_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredClientModel {
    pub model: MlpModel,
    pub columns: Vec<usize>,
    pub importance: f64,
    pub memory_bytes: usize,
}

/// Best models seen so far, saved whenever evaluation loss improves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub server: MlpModel,
    pub layout: Vec<Slot>,
    pub clients: Vec<StoredClientModel>,
    pub eval_loss: f64,
    pub round_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub rounds: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub eval_every: usize,
    /// Availability draws averaged per evaluation.
    pub eval_draws: usize,
    /// Stop after this many evaluations without a new best.
    pub patience: Option<usize>,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            rounds: 1500,
            batch_size: 64,
            lr: 0.01,
            eval_every: 25,
            eval_draws: 20,
            patience: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Inference {
    pub predictions: Vec<f64>,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct RoundGradients {
    pub loss: f64,
    pub server: GradientBundle,
    pub clients: Vec<Option<GradientBundle>>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub records: Vec<RoundRecord>,
}

/// Everything the server decided while setting up one method in one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitSummary {
    pub method: Method,
    pub p: Vec<f64>,
    pub clamped: Vec<usize>,
    pub tags: Vec<u32>,
    pub importance: Vec<f64>,
    pub partition: FeaturePartition,
    pub plan: EmbeddingPlan,
    pub specs: ModelSpecSet,
    pub client_importance: Vec<f64>,
}

/// Inputs to [`init_training`].
#[derive(Debug, Clone)]
pub struct InitSetup<'a> {
    pub dataset: &'a Dataset,
    pub train_indices: &'a [usize],
    pub scenario: &'a Scenario,
    pub n_clients: usize,
    pub budget: usize,
    pub tree: TreeParams,
    pub hidden: HiddenPolicy,
    pub method: Method,
    pub delta: f64,
    pub seeds: SeedTree,
    /// Use these probabilities instead of sampling from the scenario.
    pub p_override: Option<Vec<f64>>,
}

/// Fits the importance tree on the training rows.
pub fn analyze_importance(
    ds: &Dataset,
    train_indices: &[usize],
    params: &TreeParams,
) -> Result<ImportanceVector> {
    let x = ds.features().select_rows(train_indices);
    let y = ds.labels_at(train_indices);
    Ok(fit_tree(&x, &y, params)?.importance()?)
}

/// Samples reliabilities, ranks features, allocates them and materializes
/// client and server models.
pub fn init_training(setup: &InitSetup<'_>) -> Result<(VflSystem, InitSummary)> {
    let k = setup.n_clients;
    let sample = match &setup.p_override {
        Some(p) => crate::reliability::ReliabilitySample {
            p: p.clone(),
            clamped: vec![],
        },
        None => sample_reliabilities(
            setup.scenario,
            k,
            &mut setup.seeds.stream(Phase::Reliability, 0),
        )?,
    };
    let profiles = assign_tags(&sample.p)?;
    if profiles.len() != k {
        return Err(ProtocolError::ClientCount {
            models: profiles.len(),
            clients: k,
        });
    }
    let importance = analyze_importance(setup.dataset, setup.train_indices, &setup.tree)?;
    let j = setup.dataset.n_features();
    let (partition, plan) = match setup.method {
        Method::Proposed => {
            let plan = allocate_embedding_dims(&sample.p, setup.budget)?;
            let shares = importance_shares(&sample.p)?;
            (partition_features(importance.values(), &shares)?, plan)
        }
        Method::Baseline => random_partition(
            j,
            k,
            setup.budget,
            &mut setup.seeds.stream(Phase::BaselinePartition, 0),
        )?,
    };
    let specs = build_model_specs(&partition, &plan, &setup.hidden)?;
    let system = VflSystem::build(
        setup.dataset,
        &profiles,
        &partition,
        &specs,
        importance.values(),
        setup.seeds,
        setup.delta,
    )?;
    let summary = InitSummary {
        method: setup.method,
        p: sample.p,
        clamped: sample.clamped,
        tags: profiles.iter().map(|p| p.tag).collect(),
        client_importance: partition.assigned_importance(importance.values()),
        importance: importance.0,
        partition,
        plan,
        specs,
    };
    Ok((system, summary))
}

/// Client and server state for one split model.
#[derive(Debug, Clone)]
pub struct VflSystem {
    pub clients: Vec<ClientState>,
    pub server: ServerState,
    pub delta: f64,
}

impl VflSystem {
    /// Initializes fresh models for the given allocation.
    pub fn build(
        ds: &Dataset,
        profiles: &[ReliabilityProfile],
        partition: &FeaturePartition,
        specs: &ModelSpecSet,
        importance: &[f64],
        seeds: SeedTree,
        delta: f64,
    ) -> Result<Self> {
        if profiles.len() != partition.n_clients() || specs.clients.len() != profiles.len() {
            return Err(ProtocolError::ClientCount {
                models: specs.clients.len(),
                clients: profiles.len(),
            });
        }
        let mut clients = Vec::with_capacity(profiles.len());
        for (k, ((profile, cols), spec)) in profiles
            .iter()
            .zip(&partition.assignments)
            .zip(&specs.clients)
            .enumerate()
        {
            let model = init_model_with(spec, &mut seeds.stream(Phase::ClientInit, k as u64))?;
            clients.push(ClientState {
                client_id: profile.client_id,
                profile: *profile,
                columns: cols.clone(),
                model,
                view: project(ds, cols, profile.client_id)?,
                importance: cols.iter().map(|&j| importance[j]).sum(),
            });
        }
        let server = ServerState {
            model: init_model_with(&specs.server, &mut seeds.stream(Phase::ServerInit, 0))?,
            layout: specs.layout.clone(),
            labels: ds.labels().to_vec(),
        };
        Ok(Self {
            clients,
            server,
            delta,
        })
    }

    pub fn n_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn profiles(&self) -> Vec<ReliabilityProfile> {
        self.clients.iter().map(|c| c.profile).collect()
    }

    pub fn tags(&self) -> Vec<u32> {
        self.clients.iter().map(|c| c.profile.tag).collect()
    }

    fn check_availability(&self, availability: &AvailabilityPattern) -> Result<()> {
        if availability.draws.len() != self.clients.len() {
            return Err(ProtocolError::AvailabilityLength {
                expected: self.clients.len(),
                found: availability.draws.len(),
            });
        }
        Ok(())
    }

    /// Concatenated embeddings for `rows`; absent clients' slices stay zero.
    pub fn server_input(
        &self,
        rows: &[usize],
        availability: &AvailabilityPattern,
    ) -> Result<(Matrix, Vec<Option<ForwardTrace>>)> {
        self.check_availability(availability)?;
        let mut input = Matrix::zeros(rows.len(), self.server.model.input_dim());
        let mut traces = Vec::with_capacity(self.clients.len());
        for ((client, slot), &present) in self
            .clients
            .iter()
            .zip(&self.server.layout)
            .zip(&availability.draws)
        {
            if !present {
                traces.push(None);
                continue;
            }
            let (emb, trace) = client.model.forward(&client.view.batch(rows))?;
            debug_assert_eq!(emb.cols(), slot.width);
            input.set_column_block(slot.offset, &emb);
            traces.push(Some(trace));
        }
        Ok((input, traces))
    }

    /// Loss and gradients for one round without touching any parameter.
    /// Absent clients get `None`.
    pub fn round_gradients(
        &self,
        rows: &[usize],
        availability: &AvailabilityPattern,
    ) -> Result<RoundGradients> {
        if rows.is_empty() {
            return Err(ProtocolError::EmptyBatch);
        }
        let (input, traces) = self.server_input(rows, availability)?;
        let (pred, server_trace) = self.server.model.forward(&input)?;
        let targets: Vec<f64> = rows.iter().map(|&i| self.server.labels[i]).collect();
        let (loss, grad) = huber(pred.as_slice(), &targets, self.delta)?;
        if !loss.is_finite() {
            return Err(ProtocolError::NonFiniteLoss {
                round: availability.round_index,
            });
        }
        let grad = Matrix::from_vec(pred.rows(), 1, grad);
        let server = self.server.model.backward(&server_trace, &grad)?;

        let mut clients = Vec::with_capacity(self.clients.len());
        for ((client, slot), trace) in self.clients.iter().zip(&self.server.layout).zip(&traces) {
            match trace {
                Some(trace) => {
                    let slice = server.input_gradient.column_block(slot.offset, slot.width);
                    clients.push(Some(client.model.backward(trace, &slice)?));
                }
                None => clients.push(None),
            }
        }
        Ok(RoundGradients {
            loss,
            server,
            clients,
        })
    }

    /// One communication round. All gradients are computed before any
    /// parameter changes, so a non-finite loss leaves every model untouched.
    pub fn train_round(
        &mut self,
        rows: &[usize],
        availability: &AvailabilityPattern,
        lr: f64,
    ) -> Result<RoundRecord> {
        let g = self.round_gradients(rows, availability)?;
        self.server.model.sgd_step(&g.server, lr)?;
        for (client, grads) in self.clients.iter_mut().zip(&g.clients) {
            if let Some(grads) = grads {
                client.model.sgd_step(grads, lr)?;
            }
        }
        Ok(RoundRecord {
            round_index: availability.round_index,
            availability: availability.clone(),
            train_loss: g.loss,
            eval_loss: None,
        })
    }

    /// Forward-only pass with the same zero-imputation as training.
    pub fn infer_round(&self, rows: &[usize], availability: &AvailabilityPattern) -> Result<Inference> {
        let (input, _) = self.server_input(rows, availability)?;
        let pred = self.server.model.predict(&input)?;
        let targets: Vec<f64> = rows.iter().map(|&i| self.server.labels[i]).collect();
        let (loss, _) = huber(pred.as_slice(), &targets, self.delta)?;
        Ok(Inference {
            predictions: pred.into_vec(),
            loss,
        })
    }

    /// Mean loss over a set of availability draws, evaluating each distinct
    /// pattern once.
    pub fn availability_weighted_loss(
        &self,
        rows: &[usize],
        draws: &[AvailabilityPattern],
    ) -> Result<f64> {
        let mut cache: HashMap<Vec<bool>, f64> = HashMap::new();
        let mut total = 0.0;
        for d in draws {
            let loss = match cache.get(&d.draws) {
                Some(&l) => l,
                None => {
                    let l = self.infer_round(rows, d)?.loss;
                    cache.insert(d.draws.clone(), l);
                    l
                }
            };
            total += loss;
        }
        Ok(total / draws.len().max(1) as f64)
    }

    pub fn checkpoint(&self, eval_loss: f64, round_index: usize) -> Checkpoint {
        Checkpoint {
            server: self.server.model.clone(),
            layout: self.server.layout.clone(),
            clients: self
                .clients
                .iter()
                .map(|c| StoredClientModel {
                    model: c.model.clone(),
                    columns: c.columns.clone(),
                    importance: c.importance,
                    memory_bytes: c.model.memory_bytes(),
                })
                .collect(),
            eval_loss,
            round_index,
        }
    }

    /// Runs the round budget over shuffled mini-batches of the training rows.
    ///
    /// Every `eval_every` rounds (and after the last round) the test rows are
    /// scored under `eval_draws` fresh availability draws; the models are
    /// checkpointed whenever that score is a new minimum.
    pub fn train(
        &mut self,
        train_rows: &[usize],
        eval_rows: &[usize],
        schedule: &Schedule,
        seeds: &SeedTree,
    ) -> Result<TrainOutcome> {
        self.train_with(train_rows, eval_rows, schedule, seeds, |round, profiles| {
            draw_availability(
                profiles,
                round,
                &mut seeds.stream(Phase::TrainAvailability, round as u64),
            )
        })
    }

    /// [`VflSystem::train`] with caller-supplied training availability.
    pub fn train_with<F>(
        &mut self,
        train_rows: &[usize],
        eval_rows: &[usize],
        schedule: &Schedule,
        seeds: &SeedTree,
        mut availability: F,
    ) -> Result<TrainOutcome>
    where
        F: FnMut(usize, &[ReliabilityProfile]) -> AvailabilityPattern,
    {
        if schedule.rounds == 0 {
            return Err(ProtocolError::ZeroRounds);
        }
        if schedule.batch_size == 0 || schedule.eval_every == 0 || schedule.eval_draws == 0 {
            return Err(ProtocolError::Schedule(
                "batch_size, eval_every and eval_draws must be ≥ 1".into(),
            ));
        }
        if train_rows.is_empty() || eval_rows.is_empty() {
            return Err(ProtocolError::EmptyBatch);
        }
        let profiles = self.profiles();
        let mut records = Vec::with_capacity(schedule.rounds);
        let mut best: Option<Checkpoint> = None;
        let mut stale = 0usize;
        let mut order: Vec<usize> = Vec::new();
        let mut cursor = 0usize;
        let mut epoch = 0u64;
        let mut evals = 0u64;

        for round in 0..schedule.rounds {
            if cursor >= order.len() {
                order = train_rows.to_vec();
                order.shuffle(&mut seeds.stream(Phase::BatchShuffle, epoch));
                epoch += 1;
                cursor = 0;
            }
            let end = (cursor + schedule.batch_size).min(order.len());
            let batch = order[cursor..end].to_vec();
            cursor = end;

            let avail = availability(round, &profiles);
            let mut record = self.train_round(&batch, &avail, schedule.lr)?;

            if (round + 1) % schedule.eval_every == 0 || round + 1 == schedule.rounds {
                let mut rng = seeds.stream(Phase::EvalAvailability, evals);
                evals += 1;
                let draws: Vec<AvailabilityPattern> = (0..schedule.eval_draws)
                    .map(|i| draw_availability(&profiles, i, &mut rng))
                    .collect();
                let eval = self.availability_weighted_loss(eval_rows, &draws)?;
                record.eval_loss = Some(eval);
                if best.as_ref().is_none_or(|b| eval < b.eval_loss) {
                    best = Some(self.checkpoint(eval, round));
                    stale = 0;
                } else {
                    stale += 1;
                }
            }
            records.push(record);
            if schedule.patience.is_some_and(|p| stale >= p) {
                break;
            }
        }
        Ok(TrainOutcome {
            checkpoint: best.expect("at least one evaluation runs"),
            records,
        })
    }

    /// Restores stored models as a system, placing them on clients chosen by
    /// [`assign_models_for_inference`].
    pub fn from_checkpoint(
        checkpoint: &Checkpoint,
        profiles: &[ReliabilityProfile],
        ds: &Dataset,
        delta: f64,
    ) -> Result<Self> {
        let clients = assign_models_for_inference(checkpoint, profiles, ds)?;
        Ok(Self {
            clients,
            server: ServerState {
                model: checkpoint.server.clone(),
                layout: checkpoint.layout.clone(),
                labels: ds.labels().to_vec(),
            },
            delta,
        })
    }
}

/// Matches stored models to clients rank-for-rank: the model with the largest
/// importance goes to the most reliable client. Ties in importance or
/// reliability fall back to index order, so equal scores leave every model on
/// the client with its own index.
///
/// The returned states stay in stored-model order so that each one still
/// lines up with its slot in the server input.
pub fn assign_models_for_inference(
    checkpoint: &Checkpoint,
    profiles: &[ReliabilityProfile],
    ds: &Dataset,
) -> Result<Vec<ClientState>> {
    let k = checkpoint.clients.len();
    if profiles.len() != k {
        return Err(ProtocolError::ClientCount {
            models: k,
            clients: profiles.len(),
        });
    }
    let mut models: Vec<usize> = (0..k).collect();
    models.sort_by(|&a, &b| {
        checkpoint.clients[b]
            .importance
            .total_cmp(&checkpoint.clients[a].importance)
            .then(a.cmp(&b))
    });
    let mut clients: Vec<usize> = (0..k).collect();
    clients.sort_by(|&a, &b| profiles[b].p.total_cmp(&profiles[a].p).then(a.cmp(&b)));

    let mut owner = vec![0usize; k];
    let mut start = 0;
    while start < k {
        // models with equal importance share their block of rank positions,
        // handed out in client-index order
        let imp = checkpoint.clients[models[start]].importance;
        let mut end = start + 1;
        while end < k && checkpoint.clients[models[end]].importance == imp {
            end += 1;
        }
        let mut group_clients = clients[start..end].to_vec();
        group_clients.sort_unstable();
        for (&m, c) in models[start..end].iter().zip(group_clients) {
            owner[m] = c;
        }
        start = end;
    }
    owner
        .into_iter()
        .enumerate()
        .map(|(m, c)| {
            let stored = &checkpoint.clients[m];
            let profile = profiles[c];
            Ok(ClientState {
                client_id: profile.client_id,
                profile,
                columns: stored.columns.clone(),
                model: stored.model.clone(),
                view: project(ds, &stored.columns, profile.client_id)?,
                importance: stored.importance,
            })
        })
        .collect()
}
