use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::aggregate::UploadPayload;
use crate::arch::{active_mask, ActiveMask, DecisionVector};
use crate::dataset::LabeledData;
use crate::error::{Error, Result};
use crate::network::{forward, forward_on_tape, register_model, ForwardOptions, Gates};
use crate::ops;
use crate::pool::{ModulePool, Unit};
use crate::rng::{stream, Stream};
use crate::routing::{
    register_hypernet, relax, routing_probs, routing_probs_on_tape, ConcreteNoise, RoutingProbs,
};
use crate::tape::Tape;

/// Settings of one client's local solver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalConfig {
    pub epochs: usize,
    /// `0` leaves the parameters untouched.
    pub learning_rate: f64,
    /// The hypernetwork steps with `learning_rate * hypernet_lr_scale`.
    pub hypernet_lr_scale: f64,
    /// `None` trains on the whole local set at once.
    pub batch_size: Option<usize>,
    pub gate_threshold: f64,
    /// Whether the hypernetwork travels with the payload.
    pub share_hypernet: bool,
    pub seed: u64,
}

/// How the gates are set during a local update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Routing {
    /// Relaxed decisions drawn from the client's hypernetwork at this
    /// temperature.
    Learned { tau: f64 },
    /// Every path open.
    AllOpen,
}

/// Which units an update may change.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    All,
    EncodersOnly,
}

impl Trainable {
    fn allows(self, unit: Unit) -> bool {
        match self {
            Trainable::All => true,
            Trainable::EncodersOnly => matches!(unit, Unit::Encoder(_)),
        }
    }
}

/// Identifies one local update for seeding: stream paths are
/// `(phase, client, round, epoch)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UpdateKey {
    pub phase: u64,
    pub round: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub id: usize,
    pub train: LabeledData,
    pub test: LabeledData,
    pub model: ModulePool,
    /// Routing probabilities after the last local update.
    pub probs: Option<RoutingProbs>,
    /// Evaluation decision after the last local update.
    pub decision: Option<DecisionVector>,
    /// Mask of the last upload.
    pub mask: Option<ActiveMask>,
    /// Whether the client has synchronized with the server before.
    pub synced: bool,
}

impl ClientState {
    pub fn new(id: usize, train: LabeledData, test: LabeledData, model: ModulePool) -> Self {
        ClientState {
            id,
            train,
            test,
            model,
            probs: None,
            decision: None,
            mask: None,
            synced: false,
        }
    }

    pub fn samples(&self) -> usize {
        self.train.len()
    }

    fn path(&self, key: UpdateKey, epoch: u64) -> [u64; 4] {
        [key.phase, self.id as u64, key.round as u64, epoch]
    }

    /// Hard decision sampled from the client's current hypernetwork, used to
    /// choose which blocks to download at the start of a round.
    pub fn start_of_round_mask(&self, key: UpdateKey, tau: f64, seed: u64) -> Result<ActiveMask> {
        let probs = routing_probs(&self.train, &self.model)?;
        let mut rng = stream(seed, Stream::Concrete, &self.path(key, 0));
        let noise = ConcreteNoise::draw(probs.len(), &mut rng);
        let decision = relax(&probs, tau, &noise)?.harden();
        active_mask(&decision, self.model.spec())
    }

    /// Decision used to evaluate the client's model.
    pub fn eval_decision(&self) -> DecisionVector {
        self.decision
            .clone()
            .unwrap_or_else(|| DecisionVector::ones(self.model.spec().path_count()))
    }
}

/// Overwrites the client's encoders, shared hypernetwork and the blocks
/// active in `mask` with the global values. Returns the scalars copied.
pub fn download(
    client: &mut ClientState,
    global: &ModulePool,
    mask: &ActiveMask,
    share_hypernet: bool,
) -> Result<usize> {
    let spec = global.spec().clone();
    let mut copied = 0;
    for unit in global.units() {
        let wanted = match unit {
            Unit::Encoder(_) => true,
            Unit::Block(b) => mask.is_active(&spec, b),
            Unit::Hypernet => share_hypernet,
        };
        if wanted {
            client.model.copy_unit_from(global, unit)?;
            copied += global.unit_param_count(unit);
        }
    }
    client.synced = true;
    Ok(copied)
}

/// Runs the local solver and builds the upload: every encoder, the blocks
/// active under the client's final hard decision and, when shared, the
/// hypernetwork.
pub fn local_update(
    client: &mut ClientState,
    key: UpdateKey,
    routing: Routing,
    trainable: Trainable,
    config: &LocalConfig,
) -> Result<UploadPayload> {
    if client.train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if config.epochs == 0 {
        return Err(Error::Config("local epochs must be at least 1".into()));
    }
    if config.learning_rate != 0.0 {
        crate::param::check_learning_rate(config.learning_rate)?;
    }
    let spec = client.model.spec().clone();
    let n = client.train.len();
    let batch = config.batch_size.unwrap_or(n).clamp(1, n);
    let ones = DecisionVector::ones(spec.path_count());
    let mut last_noise = None;

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream(
            config.seed,
            Stream::Shuffle,
            &client.path(key, epoch as u64),
        ));
        let noise = match routing {
            Routing::Learned { .. } => {
                let mut rng = stream(
                    config.seed,
                    Stream::Concrete,
                    &client.path(key, epoch as u64 + 1),
                );
                Some(ConcreteNoise::draw(spec.path_count(), &mut rng).logistic())
            }
            Routing::AllOpen => None,
        };
        for rows in order.chunks(batch) {
            let part = client.train.subset(rows);
            let mut tape = Tape::new();
            let vars = register_model(&mut tape, &client.model)?;
            let x = tape.input(part.features.clone());
            let (gates, fallback) = match (routing, &noise) {
                (Routing::Learned { tau }, Some(noise)) => {
                    let hv = register_hypernet(&mut tape, &client.model)?;
                    let fx = tape.input(client.train.features.clone());
                    let fy = tape.input(client.train.one_hot());
                    let p = routing_probs_on_tape(&mut tape, &hv, fx, fy)?;
                    let v = tape.concrete(p, noise, tau)?;
                    (Gates::Tracked(v), Some(tape.value(p).data().to_vec()))
                }
                _ => (Gates::Fixed(&ones), None),
            };
            let options = ForwardOptions {
                gate_threshold: config.gate_threshold,
                fallback: fallback.as_deref(),
            };
            let logits = forward_on_tape(&mut tape, &spec, &vars, x, gates, options)?;
            let loss = tape.softmax_cross_entropy(logits, &part.one_hot())?;
            let grads = tape.backward(loss)?;
            client.model.zero_grad();
            client.model.accumulate(&tape, &grads)?;
            if config.learning_rate > 0.0 {
                client.model.sgd_step_where(config.learning_rate, |u| {
                    trainable.allows(u) && u != Unit::Hypernet
                })?;
                let hypernet_lr = config.learning_rate * config.hypernet_lr_scale;
                if hypernet_lr > 0.0 && trainable.allows(Unit::Hypernet) {
                    client
                        .model
                        .sgd_step_where(hypernet_lr, |u| u == Unit::Hypernet)?;
                }
            }
        }
        last_noise = noise;
    }
    client.model.zero_grad();

    // The upload follows the relaxed sample of the last epoch; the model is
    // evaluated under the thresholded probabilities.
    let (sampled, decision, probs) = match (routing, last_noise) {
        (Routing::Learned { tau }, Some(_)) => {
            let probs = routing_probs(&client.train, &client.model)?;
            let mut rng = stream(
                config.seed,
                Stream::Concrete,
                &client.path(key, config.epochs as u64),
            );
            let noise = ConcreteNoise::draw(probs.len(), &mut rng);
            let sampled = relax(&probs, tau, &noise)?.harden();
            (sampled, threshold(&probs), Some(probs))
        }
        _ => (ones.clone(), ones, None),
    };
    let mask = active_mask(&sampled, &spec)?;

    let mut params = BTreeMap::new();
    for unit in client.model.units() {
        let send = match unit {
            Unit::Encoder(_) => true,
            Unit::Block(b) => mask.is_active(&spec, b) && trainable == Trainable::All,
            Unit::Hypernet => config.share_hypernet && trainable == Trainable::All,
        };
        if send {
            for id in client.model.unit_ids(unit) {
                params.insert(id, client.model.param(id)?.value.clone());
            }
        }
    }
    let payload = UploadPayload {
        client: client.id,
        samples: n,
        mask: if trainable == Trainable::All {
            mask.clone()
        } else {
            ActiveMask::none(&spec)
        },
        params,
    };
    if matches!(routing, Routing::Learned { .. }) {
        client.probs = probs;
        client.decision = Some(decision);
        client.mask = Some(mask);
    }
    Ok(payload)
}

/// Hard decision opening exactly the paths with probability above 0.5.
pub fn threshold(probs: &RoutingProbs) -> DecisionVector {
    let bits: Vec<bool> = probs.values().iter().map(|&p| p > 0.5).collect();
    DecisionVector::hard(&bits)
}

/// Mean cross-entropy and accuracy of `model` under `decision` on `data`.
/// `None` for an empty dataset.
pub fn evaluate(
    model: &ModulePool,
    decision: &DecisionVector,
    probs: Option<&RoutingProbs>,
    data: &LabeledData,
    gate_threshold: f64,
) -> Result<Option<(f64, f64)>> {
    if data.is_empty() {
        return Ok(None);
    }
    let options = ForwardOptions {
        gate_threshold,
        fallback: probs.map(|p| p.values()),
    };
    let logits = forward(&data.features, decision, model, options)?;
    let loss = ops::softmax_cross_entropy(&logits, &data.one_hot())?;
    let predicted = ops::argmax_rows(&logits);
    let correct = predicted
        .iter()
        .zip(&data.labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(Some((loss, correct as f64 / data.len() as f64)))
}
