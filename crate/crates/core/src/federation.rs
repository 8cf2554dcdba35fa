//! Round orchestration for the two-phase summary/selection protocol.
//!
//! One round, in order:
//! 1. every client computes its full-batch gradient at the broadcast weights;
//! 2. every client sends a [`GradientSummary`] of its selection layers;
//! 3. the policy picks the active set from summaries (or losses);
//! 4. only the selected clients surrender full gradients;
//! 5. the server averages them with uniform `1/J` weights;
//! 6. `w ← w − η_t ĝ_t`;
//! 7. metrics are recorded.
//!
//! With regret tracking on, the oracle evaluates every subset's hypothetical
//! update on the same gradients. That read is instrumentation and is kept
//! apart from the protocol's access log.

use std::cell::RefCell;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, ExperimentConfig};
use crate::data::{self, ClientDataset, Dataset, PartitionSpec, SyntheticSpec};
use crate::error::{FedselError, Result};
use crate::model::{self, apply_update, evaluate, Arch, Batch, ModelParameters};
use crate::numerics::GradientVector;
use crate::rng;
use crate::selection::{
    self, AoUQueue, OracleOutcome, PairwiseMatrix, PncsParams, PolicySpec, QueueEntry, SearchMethod,
    SelectionDecision,
};
use crate::sketch::{self, full_gradient_bytes, GradientSummary};

/// Everything about one seed's run that does not change between rounds.
#[derive(Debug, Clone)]
pub struct Federation {
    pub cfg: ExperimentConfig,
    pub seed: u64,
    pub dataset: Dataset,
    pub clients: Vec<ClientDataset>,
    pub arch: Arch,
    pub selection_layers: Vec<String>,
    /// Bytes per client in the summary phase.
    pub summary_bytes: u64,
    /// Bytes per selected client in the full-gradient phase.
    pub full_bytes: u64,
}

/// Mutable per-round state: the global model and the cooldown queue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundState {
    /// Rounds completed so far.
    pub round: usize,
    pub params: ModelParameters,
    pub queue: AoUQueue,
    pub cumulative_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub seed: u64,
    /// 1-based; metrics describe the model after this round's update.
    pub round: usize,
    pub eta: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
    pub selected: Vec<usize>,
    pub subset_score: Option<f64>,
    pub regret: Option<f64>,
    pub bytes_summary: u64,
    pub bytes_full: u64,
    pub bytes_cumulative: u64,
}

/// Selection diagnostics written to the JSON-lines round log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundDiagnostics {
    pub eligible: Vec<usize>,
    pub evicted: Vec<usize>,
    pub degenerate: bool,
    pub search: Option<SearchMethod>,
    pub pairwise: Option<PairwiseMatrix>,
    pub queue: Vec<QueueEntry>,
    /// Client ids whose full gradients the server read through the protocol.
    pub full_gradient_reads: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    #[serde(flatten)]
    pub metrics: RoundMetrics,
    pub diagnostics: RoundDiagnostics,
}

/// Client gradients held on the client side until the server asks for them.
struct GradientVault {
    gradients: Vec<GradientVector>,
    reads: RefCell<Vec<usize>>,
}

impl GradientVault {
    fn new(gradients: Vec<GradientVector>) -> Self {
        Self {
            gradients,
            reads: RefCell::new(Vec::new()),
        }
    }

    /// Full-gradient phase: the selected clients upload.
    fn surrender(&self, ids: &[usize]) -> Vec<&GradientVector> {
        self.reads.borrow_mut().extend_from_slice(ids);
        ids.iter().map(|&i| &self.gradients[i]).collect()
    }

    /// Oracle instrumentation; not part of the protocol.
    fn audit_all(&self) -> Vec<&GradientVector> {
        self.gradients.iter().collect()
    }
}

/// Data-size weighted mean of the clients' local losses, which equals the
/// loss over the union of their data.
pub fn global_loss(params: &ModelParameters, clients: &[ClientDataset]) -> Result<f64> {
    let mut weighted = 0.0;
    let mut total = 0usize;
    for c in clients {
        weighted += model::loss(params, &c.train)? * c.train.len() as f64;
        total += c.train.len();
    }
    if total == 0 {
        return Err(FedselError::EmptyDataset("no client data".into()));
    }
    Ok(weighted / total as f64)
}

fn load_dataset(cfg: &ExperimentConfig, seed: u64) -> Result<Dataset> {
    match &cfg.data {
        DataSource::Synthetic {
            classes,
            dim,
            per_class,
            spread,
        } => data::generate_synthetic(
            &SyntheticSpec {
                classes: *classes,
                dim: *dim,
                per_class: *per_class,
                spread: *spread,
            },
            seed,
        ),
        DataSource::Csv { path } => {
            let all = data::load_csv(path)?;
            let classes = data::infer_classes(&all);
            if classes < 2 {
                return Err(FedselError::Schema("csv data needs at least 2 classes".into()));
            }
            data::split_dataset(&all, classes, &mut rng::stream(seed, rng::STREAM_DATA))
        }
    }
}

impl Federation {
    /// Builds data, partition and layer bookkeeping for one seed.
    pub fn setup(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let dataset = load_dataset(cfg, seed)?;
        Self::with_dataset(cfg, seed, dataset)
    }

    /// As [`Federation::setup`] with a caller-provided dataset.
    pub fn with_dataset(cfg: &ExperimentConfig, seed: u64, dataset: Dataset) -> Result<Self> {
        cfg.validate()?;
        let clients = data::partition(
            &dataset,
            &PartitionSpec {
                mode: cfg.partition,
                num_clients: cfg.num_clients,
                seed,
            },
        )?;
        Self::from_parts(cfg, seed, dataset, clients)
    }

    /// As [`Federation::setup`] with caller-provided client partitions.
    pub fn from_parts(cfg: &ExperimentConfig, seed: u64, dataset: Dataset, clients: Vec<ClientDataset>) -> Result<Self> {
        if clients.len() != cfg.num_clients {
            return Err(FedselError::Config(format!(
                "{} client datasets for num_clients = {}",
                clients.len(),
                cfg.num_clients
            )));
        }
        if let Some(c) = clients.iter().find(|c| c.train.is_empty()) {
            return Err(FedselError::EmptyDataset(format!("client {} has no data", c.client_id)));
        }
        let arch = cfg.model.arch(dataset.train.dim, dataset.classes);
        let selection_layers = cfg.selection_layer_ids();
        let zero = ModelParameters::zeros(arch);
        let seg_lens: Vec<usize> = selection_layers
            .iter()
            .map(|id| {
                let i: usize = id.trim_start_matches("layer").parse().expect("validated layer id");
                zero.layers[i].weights.len() + zero.layers[i].bias.len()
            })
            .collect();
        cfg.sketch.validate_for(&seg_lens)?;
        Ok(Self {
            summary_bytes: cfg.sketch.summary_bytes(&seg_lens),
            full_bytes: full_gradient_bytes(arch.num_params()),
            cfg: cfg.clone(),
            seed,
            dataset,
            clients,
            arch,
            selection_layers,
        })
    }

    pub fn initial_state(&self) -> RoundState {
        let mut rng = rng::stream(self.seed, rng::STREAM_INIT);
        RoundState {
            round: 0,
            params: ModelParameters::init(self.arch, &mut rng),
            queue: AoUQueue::new(self.cfg.policy.queue_len(), self.cfg.clients_per_round),
            cumulative_bytes: 0,
        }
    }

    /// Local losses and full gradients of every client at `params`.
    pub fn client_gradients(&self, params: &ModelParameters) -> Result<(Vec<f64>, Vec<GradientVector>)> {
        let out: Vec<(f64, GradientVector)> = self
            .clients
            .par_iter()
            .map(|c| Ok((model::loss(params, &c.train)?, model::gradient(params, &c.train)?)))
            .collect::<Result<_>>()?;
        Ok(out.into_iter().unzip())
    }

    fn decide(
        &self,
        state: &mut RoundState,
        round: usize,
        losses: &[f64],
        summaries: &[GradientSummary],
        oracle: Option<&OracleOutcome>,
    ) -> Result<SelectionDecision> {
        let k = self.cfg.num_clients;
        let j = self.cfg.clients_per_round;
        match &self.cfg.policy {
            PolicySpec::Pncs {
                p,
                variant,
                budget,
                segment_weights,
                ..
            } => selection::select_pncs(
                summaries,
                j,
                &mut state.queue,
                &PncsParams {
                    p: *p,
                    variant: *variant,
                    segment_weights: segment_weights.clone(),
                    budget: *budget,
                },
                round,
            ),
            PolicySpec::Random => selection::select_random(k, j, self.seed, round),
            PolicySpec::TopLoss { candidate_frac } => {
                selection::select_top_loss(losses, j, *candidate_frac, self.seed, round)
            }
            PolicySpec::LossSoftmax { temperature } => {
                selection::select_loss_softmax(losses, j, *temperature, self.seed, round)
            }
            PolicySpec::Full => Ok(selection::select_full(k, round)),
            PolicySpec::Oracle => {
                let o = oracle.expect("oracle computed for oracle policy");
                let mut d = selection::select_full(k, round);
                d.selected = o.best_entry().subset.clone();
                Ok(d)
            }
        }
    }

    /// Executes one protocol round and returns the new state and its record.
    pub fn run_round(&self, state: &RoundState) -> Result<(RoundState, RoundRecord)> {
        if state.round >= self.cfg.rounds {
            return Err(FedselError::Config(format!(
                "all {} rounds already completed",
                self.cfg.rounds
            )));
        }
        let round = state.round + 1;
        let eta = self.cfg.learning_rate.at(round);
        let mut next = state.clone();

        // (1) local gradients
        let (losses, gradients) = self.client_gradients(&state.params)?;
        let vault = GradientVault::new(gradients);

        // (2) summaries of the selection layers
        let summaries: Vec<GradientSummary> = vault
            .gradients
            .par_iter()
            .enumerate()
            .map(|(k, g)| sketch::sketch(&g.select_segments(&self.selection_layers)?, &self.cfg.sketch, k, round))
            .collect::<Result<_>>()?;

        let per_round = self.cfg.per_round();
        let oracle = if self.cfg.track_regret || self.cfg.policy == PolicySpec::Oracle {
            Some(selection::oracle_table(
                &state.params,
                &vault.audit_all(),
                &self.dataset.validation,
                per_round,
                eta,
                self.cfg.oracle_budget,
            )?)
        } else {
            None
        };

        // (3) selection
        let decision = self.decide(&mut next, round, &losses, &summaries, oracle.as_ref())?;

        // (4) full-gradient phase, (5) aggregation
        let uploaded = vault.surrender(&decision.selected);
        let aggregate = GradientVector::mean(&uploaded)?;
        if !aggregate.is_all_finite() {
            return Err(FedselError::Divergence {
                round,
                message: "aggregated gradient is not finite".into(),
            });
        }

        // (6) update
        next.params = apply_update(&state.params, &aggregate, eta)?;
        if !next.params.is_finite() {
            return Err(FedselError::Divergence {
                round,
                message: "model parameters are not finite".into(),
            });
        }
        next.round = round;

        // (7) metrics
        let bytes_summary = self.summary_bytes * self.cfg.num_clients as u64;
        let bytes_full = self.full_bytes * decision.selected.len() as u64;
        next.cumulative_bytes += bytes_summary + bytes_full;
        let (val_loss, val_accuracy) = evaluate(&next.params, &self.dataset.validation)?;
        let (test_loss, test_accuracy) = evaluate(&next.params, &self.dataset.test)?;
        let train_loss = global_loss(&next.params, &self.clients)?;
        if !(train_loss.is_finite() && val_loss.is_finite()) {
            return Err(FedselError::Divergence {
                round,
                message: "loss is not finite".into(),
            });
        }
        let regret = oracle.as_ref().and_then(|o| o.regret(&decision.selected));

        let record = RoundRecord {
            metrics: RoundMetrics {
                seed: self.seed,
                round,
                eta,
                train_loss,
                val_loss,
                val_accuracy,
                test_loss,
                test_accuracy,
                selected: decision.selected.clone(),
                subset_score: decision.score,
                regret,
                bytes_summary,
                bytes_full,
                bytes_cumulative: next.cumulative_bytes,
            },
            diagnostics: RoundDiagnostics {
                eligible: decision.eligible,
                evicted: decision.evicted,
                degenerate: decision.degenerate,
                search: decision.search,
                pairwise: decision.pairwise,
                queue: next.queue.entries().copied().collect(),
                full_gradient_reads: vault.reads.into_inner(),
            },
        };
        Ok((next, record))
    }

    /// Runs all configured rounds from the initial state.
    pub fn run(&self) -> Result<SeedRun> {
        let mut state = self.initial_state();
        let mut records = Vec::with_capacity(self.cfg.rounds);
        for _ in 0..self.cfg.rounds {
            let (next, rec) = self.run_round(&state)?;
            log::debug!(
                "seed {} round {}: selected {:?} val_acc {:.4}",
                self.seed,
                rec.metrics.round,
                rec.metrics.selected,
                rec.metrics.val_accuracy
            );
            records.push(rec);
            state = next;
        }
        Ok(SeedRun {
            seed: self.seed,
            records,
            final_state: state,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub records: Vec<RoundRecord>,
    pub final_state: RoundState,
}

impl SeedRun {
    pub fn metrics(&self) -> impl Iterator<Item = &RoundMetrics> {
        self.records.iter().map(|r| &r.metrics)
    }
}

/// Mean and sample standard deviation across seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub round: usize,
    pub seeds: usize,
    pub train_loss: MeanStd,
    pub val_loss: MeanStd,
    pub val_accuracy: MeanStd,
    pub test_loss: MeanStd,
    pub test_accuracy: MeanStd,
    pub regret: Option<MeanStd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub runs: Vec<SeedRun>,
    pub aggregate: Vec<AggregateRow>,
}

/// Per-round mean ± sample std across seeds.
pub fn aggregate_runs(runs: &[SeedRun]) -> Vec<AggregateRow> {
    let rounds = runs.iter().map(|r| r.records.len()).min().unwrap_or(0);
    (0..rounds)
        .map(|t| {
            let col = |f: &dyn Fn(&RoundMetrics) -> f64| -> MeanStd {
                MeanStd::of(&runs.iter().map(|r| f(&r.records[t].metrics)).collect::<Vec<_>>())
            };
            let regrets: Option<Vec<f64>> = runs.iter().map(|r| r.records[t].metrics.regret).collect();
            AggregateRow {
                round: t + 1,
                seeds: runs.len(),
                train_loss: col(&|m| m.train_loss),
                val_loss: col(&|m| m.val_loss),
                val_accuracy: col(&|m| m.val_accuracy),
                test_loss: col(&|m| m.test_loss),
                test_accuracy: col(&|m| m.test_accuracy),
                regret: regrets.map(|v| MeanStd::of(&v)),
            }
        })
        .collect()
}

/// Runs every seed (in parallel, results in seed-list order) and aggregates.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let runs: Vec<SeedRun> = cfg
        .seeds
        .par_iter()
        .map(|&seed| Federation::setup(cfg, seed)?.run())
        .collect::<Result<_>>()?;
    let aggregate = aggregate_runs(&runs);
    Ok(ExperimentResult { runs, aggregate })
}

/// Loss and accuracy of `params` on a batch; re-exported for callers that
/// only need evaluation.
pub fn evaluate_on(params: &ModelParameters, batch: &Batch) -> Result<(f64, f64)> {
    evaluate(params, batch)
}
