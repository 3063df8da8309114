use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::aggregate::{aggregate, AggregationMode, UploadPayload};
use super::client::{
    download, evaluate, local_update, ClientState, LocalConfig, Routing, Trainable, UpdateKey,
};
use super::comm::{payload_param_count, CommLedger, Direction, Phase};
use crate::arch::{ActiveMask, ArchitectureSpec, DecisionVector, HypernetSpec};
use crate::data::FederatedDataset;
use crate::error::{Error, Result};
use crate::network::GATE_THRESHOLD;
use crate::pool::{ModulePool, Unit};
use crate::rng::{stream, Stream};
use crate::routing::{RoutingProbs, TemperatureSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    FedMn,
    FedAvg,
    Local,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::FedMn => "fedmn",
            Method::FedAvg => "fedavg",
            Method::Local => "local",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fedmn" => Ok(Method::FedMn),
            "fedavg" => Ok(Method::FedAvg),
            "local" => Ok(Method::Local),
            other => Err(Error::Config(format!(
                "unknown method `{other}` (expected fedmn, fedavg or local)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub method: Method,
    pub arch: ArchitectureSpec,
    pub hypernet: HypernetSpec,
    pub rounds: usize,
    pub local_epochs: usize,
    pub learning_rate: f64,
    /// Multiplier on `learning_rate` for the hypernetwork.
    pub hypernet_lr_scale: f64,
    pub batch_size: Option<usize>,
    pub tau_start: f64,
    pub tau_end: f64,
    /// Encoder-only FedAvg rounds before the main phase (FedMN only).
    pub pretrain_rounds: usize,
    pub aggregation: AggregationMode,
    /// Upload and average the hypernetwork every round.
    pub share_hypernet: bool,
    /// Include the hypernetwork in communication counts.
    pub count_hypernet: bool,
    /// Fraction of clients sampled each round.
    pub participation: f64,
    pub gate_threshold: f64,
    pub seed: u64,
    /// Worker threads for client updates; `0` uses the available cores.
    pub threads: usize,
}

impl TrainingConfig {
    pub fn new(method: Method, arch: ArchitectureSpec) -> Self {
        TrainingConfig {
            method,
            arch,
            hypernet: HypernetSpec::default(),
            rounds: 150,
            local_epochs: 1,
            learning_rate: 0.01,
            hypernet_lr_scale: 1.0,
            batch_size: Some(32),
            tau_start: 1.0,
            tau_end: 0.1,
            pretrain_rounds: 0,
            aggregation: AggregationMode::Renormalized,
            share_hypernet: true,
            count_hypernet: false,
            participation: 1.0,
            gate_threshold: GATE_THRESHOLD,
            seed: 0,
            threads: 0,
        }
    }

    pub fn schedule(&self) -> Result<TemperatureSchedule> {
        TemperatureSchedule::new(self.tau_start, self.tau_end, self.rounds)
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if let Err(Error::InvalidConfig(v)) = self.arch.validate() {
            p.extend(v);
        }
        if self.rounds == 0 {
            p.push("rounds must be at least 1".into());
        }
        if self.local_epochs == 0 {
            p.push("local_epochs must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            p.push(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if !(self.hypernet_lr_scale >= 0.0 && self.hypernet_lr_scale.is_finite()) {
            p.push(format!(
                "hypernet_lr_scale must be a finite value >= 0, got {}",
                self.hypernet_lr_scale
            ));
        }
        if self.batch_size == Some(0) {
            p.push("batch_size must be at least 1".into());
        }
        if self.rounds > 0 {
            if let Err(e) = self.schedule() {
                p.push(e.to_string().replace("configuration error: ", ""));
            }
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            p.push(format!(
                "participation must be in (0, 1], got {}",
                self.participation
            ));
        }
        if !(self.gate_threshold >= 0.0 && self.gate_threshold.is_finite()) {
            p.push("gate_threshold must be a finite value >= 0".into());
        }
        if self.hypernet.feature_dim == 0 || self.hypernet.label_dim == 0 {
            p.push("hypernetwork widths must be positive".into());
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(p))
        }
    }

    fn local(&self) -> LocalConfig {
        LocalConfig {
            epochs: self.local_epochs,
            learning_rate: self.learning_rate,
            hypernet_lr_scale: self.hypernet_lr_scale,
            batch_size: self.batch_size,
            gate_threshold: self.gate_threshold,
            share_hypernet: self.share_hypernet && self.method == Method::FedMn,
            seed: self.seed,
        }
    }

    fn counted_hypernet(&self) -> Option<&HypernetSpec> {
        (self.method == Method::FedMn && self.share_hypernet && self.count_hypernet)
            .then_some(&self.hypernet)
    }
}

/// Everything observed at the end of one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub phase: Phase,
    /// `0` is the state before any training.
    pub round: usize,
    /// Sample-weighted mean training loss of the evaluated models.
    pub global_loss: f64,
    pub mean_accuracy: f64,
    pub median_accuracy: f64,
    /// Test accuracy per client; `None` for a client without test data.
    pub client_accuracy: Vec<Option<f64>>,
    pub upload: Vec<usize>,
    pub download: Vec<usize>,
    pub cumulative: usize,
    pub tau: Option<f64>,
    /// Hard decisions as bitstrings (FedMN).
    pub decisions: Option<Vec<String>>,
}

/// A client's final personalized model.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientModel {
    pub model: ModulePool,
    pub decision: DecisionVector,
    pub probs: Option<RoutingProbs>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingOutput {
    pub global: ModulePool,
    pub clients: Vec<ClientModel>,
    pub ledger: CommLedger,
    pub metrics: Vec<RoundMetrics>,
}

impl TrainingOutput {
    pub fn decisions(&self) -> Vec<DecisionVector> {
        self.clients.iter().map(|c| c.decision.clone()).collect()
    }
}

/// The pool every method starts from. Encoders and blocks do not depend on
/// whether a hypernetwork is attached.
pub fn initial_pool(config: &TrainingConfig) -> Result<ModulePool> {
    let hypernet = (config.method == Method::FedMn).then_some(config.hypernet);
    ModulePool::init(
        config.arch.clone(),
        hypernet,
        &mut stream(config.seed, Stream::Init, &[]),
    )
}

fn check_data(config: &TrainingConfig, data: &FederatedDataset) -> Result<()> {
    if data.clients.is_empty() {
        return Err(Error::Data("dataset has no clients".into()));
    }
    if data.input_dim != config.arch.input_dim {
        return Err(Error::Config(format!(
            "data has {} features but the architecture expects {}",
            data.input_dim, config.arch.input_dim
        )));
    }
    if data.num_classes != config.arch.num_classes {
        return Err(Error::Config(format!(
            "data has {} classes but the architecture expects {}",
            data.num_classes, config.arch.num_classes
        )));
    }
    if data.total_train() == 0 {
        return Err(Error::EmptyDataset);
    }
    if data.clients.iter().all(|c| c.test.is_empty()) {
        return Err(Error::Data("no client has test data".into()));
    }
    Ok(())
}

fn worker_count(config: &TrainingConfig, jobs: usize) -> usize {
    let cores = if config.threads == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        config.threads
    };
    cores.clamp(1, jobs.max(1))
}

/// Applies `job` to the selected clients on worker threads. Results come
/// back in the order of `selected`, so the outcome does not depend on
/// scheduling.
fn for_clients<T: Send>(
    clients: &mut [ClientState],
    selected: &[usize],
    workers: usize,
    job: impl Fn(&mut ClientState) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let mut picked: Vec<&mut ClientState> = clients
        .iter_mut()
        .enumerate()
        .filter(|(i, _)| selected.contains(i))
        .map(|(_, c)| c)
        .collect();
    if workers <= 1 || picked.len() <= 1 {
        return picked.into_iter().map(&job).collect();
    }
    let per = picked.len().div_ceil(workers);
    let job = &job;
    std::thread::scope(|s| {
        let handles: Vec<_> = picked
            .chunks_mut(per)
            .map(|chunk| {
                s.spawn(move || chunk.iter_mut().map(|c| job(c)).collect::<Vec<Result<T>>>())
            })
            .collect();
        let mut out = Vec::with_capacity(selected.len());
        for h in handles {
            for r in h.join().expect("client worker panicked") {
                out.push(r?);
            }
        }
        Ok(out)
    })
}

fn participants(config: &TrainingConfig, clients: &[ClientState], round: usize) -> Vec<usize> {
    let eligible: Vec<usize> = clients
        .iter()
        .filter(|c| {
            if c.train.is_empty() {
                log::warn!("client {} has no training data and is skipped", c.id);
            }
            !c.train.is_empty()
        })
        .map(|c| c.id)
        .collect();
    if config.participation >= 1.0 {
        return eligible;
    }
    let k =
        ((config.participation * eligible.len() as f64).round() as usize).clamp(1, eligible.len());
    let mut picked = eligible;
    picked.shuffle(&mut stream(config.seed, Stream::Sampling, &[round as u64]));
    picked.truncate(k);
    picked.sort_unstable();
    picked
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

struct Recorder<'a> {
    ledger: CommLedger,
    metrics: Vec<RoundMetrics>,
    observer: &'a mut dyn FnMut(&RoundMetrics) -> Result<()>,
}

impl Recorder<'_> {
    #[allow(clippy::too_many_arguments)]
    fn emit(
        &mut self,
        config: &TrainingConfig,
        phase: Phase,
        round: usize,
        clients: &[ClientState],
        models: &[&ModulePool],
        decisions: &[DecisionVector],
        tau: Option<f64>,
    ) -> Result<()> {
        let m = clients.len();
        let mut loss_sum = 0.0;
        let mut weight = 0usize;
        let mut accuracy = Vec::with_capacity(m);
        for (i, c) in clients.iter().enumerate() {
            let probs = c.probs.as_ref();
            if let Some((loss, _)) = evaluate(
                models[i],
                &decisions[i],
                probs,
                &c.train,
                config.gate_threshold,
            )? {
                loss_sum += loss * c.train.len() as f64;
                weight += c.train.len();
            }
            accuracy.push(
                evaluate(
                    models[i],
                    &decisions[i],
                    probs,
                    &c.test,
                    config.gate_threshold,
                )?
                .map(|(_, acc)| acc),
            );
        }
        let mut present: Vec<f64> = accuracy.iter().flatten().copied().collect();
        let mean = if present.is_empty() {
            f64::NAN
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        let record = RoundMetrics {
            phase,
            round,
            global_loss: loss_sum / weight.max(1) as f64,
            mean_accuracy: mean,
            median_accuracy: median(&mut present),
            client_accuracy: accuracy,
            upload: self.ledger.round_counts(phase, round, Direction::Up, m),
            download: self.ledger.round_counts(phase, round, Direction::Down, m),
            cumulative: self.ledger.total(),
            tau,
            decisions: (config.method == Method::FedMn)
                .then(|| decisions.iter().map(DecisionVector::bitstring).collect()),
        };
        if !record.global_loss.is_finite() {
            return Err(Error::Diverged(format!(
                "global loss is not finite in round {round}"
            )));
        }
        (self.observer)(&record)?;
        self.metrics.push(record);
        Ok(())
    }
}

/// Runs the configured method end to end. `observer` sees every round's
/// metrics as soon as they are known.
pub fn run_training(
    config: &TrainingConfig,
    data: &FederatedDataset,
    observer: &mut dyn FnMut(&RoundMetrics) -> Result<()>,
) -> Result<TrainingOutput> {
    config.validate()?;
    check_data(config, data)?;
    let spec = config.arch.clone();
    let mut global = initial_pool(config)?;
    let mut clients: Vec<ClientState> = data
        .clients
        .iter()
        .enumerate()
        .map(|(m, c)| ClientState::new(m, c.train.clone(), c.test.clone(), global.clone()))
        .collect();
    let m = clients.len();
    let local = config.local();
    let schedule = config.schedule()?;
    let ones = DecisionVector::ones(spec.path_count());
    let all_ones = vec![ones.clone(); m];
    let full_mask = ActiveMask::all(&spec);
    let counted = config.counted_hypernet();
    let workers = worker_count(config, m);
    let mut rec = Recorder {
        ledger: CommLedger::new(),
        metrics: Vec::new(),
        observer,
    };

    let initial: Vec<&ModulePool> = vec![&global; m];
    rec.emit(config, Phase::Main, 0, &clients, &initial, &all_ones, None)?;

    if config.method == Method::FedMn {
        for round in 1..=config.pretrain_rounds {
            let selected = participants(config, &clients, round);
            let encoders_only = ActiveMask::none(&spec);
            let g = &global;
            let results = for_clients(&mut clients, &selected, workers, |c| {
                let down_mask = if c.synced { &encoders_only } else { &full_mask };
                let share = config.share_hypernet && !c.synced;
                download(c, g, down_mask, share)?;
                let down = payload_param_count(&spec, down_mask, counted.filter(|_| share));
                let key = UpdateKey { phase: 1, round };
                let payload =
                    local_update(c, key, Routing::AllOpen, Trainable::EncodersOnly, &local)?;
                Ok((down, payload))
            })?;
            let payloads = record_transfers(
                &mut rec.ledger,
                Phase::Pretrain,
                round,
                &global,
                counted,
                results,
            );
            global = aggregate(&payloads, &global, config.aggregation)?;
            let models: Vec<&ModulePool> = vec![&global; m];
            rec.emit(
                config,
                Phase::Pretrain,
                round,
                &clients,
                &models,
                &all_ones,
                None,
            )?;
        }
    }

    for round in 1..=config.rounds {
        let selected = participants(config, &clients, round);
        let key = UpdateKey { phase: 0, round };
        match config.method {
            Method::FedMn => {
                let tau = schedule.at(round)?;
                let g = &global;
                let results = for_clients(&mut clients, &selected, workers, |c| {
                    let down_mask = if c.synced {
                        c.start_of_round_mask(key, tau, config.seed)?
                    } else {
                        full_mask.clone()
                    };
                    download(c, g, &down_mask, config.share_hypernet)?;
                    let down = payload_param_count(&spec, &down_mask, counted);
                    let payload =
                        local_update(c, key, Routing::Learned { tau }, Trainable::All, &local)?;
                    Ok((down, payload))
                })?;
                let payloads = record_transfers(
                    &mut rec.ledger,
                    Phase::Main,
                    round,
                    &global,
                    counted,
                    results,
                );
                global = aggregate(&payloads, &global, config.aggregation)?;
                let models: Vec<&ModulePool> = clients.iter().map(|c| &c.model).collect();
                let decisions: Vec<DecisionVector> =
                    clients.iter().map(ClientState::eval_decision).collect();
                rec.emit(
                    config,
                    Phase::Main,
                    round,
                    &clients,
                    &models,
                    &decisions,
                    Some(tau),
                )?;
            }
            Method::FedAvg => {
                let g = &global;
                let results = for_clients(&mut clients, &selected, workers, |c| {
                    download(c, g, &full_mask, false)?;
                    let down = payload_param_count(&spec, &full_mask, None);
                    let payload = local_update(c, key, Routing::AllOpen, Trainable::All, &local)?;
                    Ok((down, payload))
                })?;
                let payloads =
                    record_transfers(&mut rec.ledger, Phase::Main, round, &global, None, results);
                global = aggregate(&payloads, &global, config.aggregation)?;
                let models: Vec<&ModulePool> = vec![&global; m];
                rec.emit(
                    config,
                    Phase::Main,
                    round,
                    &clients,
                    &models,
                    &all_ones,
                    None,
                )?;
            }
            Method::Local => {
                for_clients(&mut clients, &selected, workers, |c| {
                    local_update(c, key, Routing::AllOpen, Trainable::All, &local).map(|_| ())
                })?;
                let models: Vec<&ModulePool> = clients.iter().map(|c| &c.model).collect();
                rec.emit(
                    config,
                    Phase::Main,
                    round,
                    &clients,
                    &models,
                    &all_ones,
                    None,
                )?;
            }
        }
    }

    let finals = clients
        .into_iter()
        .map(|c| {
            let decision = c.eval_decision();
            let model = if config.method == Method::FedAvg {
                global.clone()
            } else {
                c.model
            };
            ClientModel {
                model,
                decision,
                probs: c.probs,
            }
        })
        .collect();
    Ok(TrainingOutput {
        global,
        clients: finals,
        ledger: rec.ledger,
        metrics: rec.metrics,
    })
}

fn record_transfers(
    ledger: &mut CommLedger,
    phase: Phase,
    round: usize,
    pool: &ModulePool,
    hypernet: Option<&HypernetSpec>,
    results: Vec<(usize, UploadPayload)>,
) -> Vec<UploadPayload> {
    results
        .into_iter()
        .map(|(down, payload)| {
            let carries_hypernet = payload.has_unit(pool, Unit::Hypernet);
            let up = payload_param_count(
                pool.spec(),
                &payload.mask,
                hypernet.filter(|_| carries_hypernet),
            );
            ledger.record(phase, round, payload.client, Direction::Down, down);
            ledger.record(phase, round, payload.client, Direction::Up, up);
            payload
        })
        .collect()
}

/// One global model trained with every path open and full payloads.
pub fn fedavg_baseline(
    config: &TrainingConfig,
    data: &FederatedDataset,
    observer: &mut dyn FnMut(&RoundMetrics) -> Result<()>,
) -> Result<TrainingOutput> {
    let config = TrainingConfig {
        method: Method::FedAvg,
        ..config.clone()
    };
    run_training(&config, data, observer)
}

/// Every client trains alone; nothing is transmitted.
pub fn local_baseline(
    config: &TrainingConfig,
    data: &FederatedDataset,
    observer: &mut dyn FnMut(&RoundMetrics) -> Result<()>,
) -> Result<TrainingOutput> {
    let config = TrainingConfig {
        method: Method::Local,
        ..config.clone()
    };
    run_training(&config, data, observer)
}
