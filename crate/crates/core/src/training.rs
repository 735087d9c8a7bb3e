//! Two-phase training: encoder and transition under the contrastive hinge
//! loss, then per-slot decoders on the frozen backbone.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{Dataset, Episode, FRAME_BYTES};
use crate::error::{Error, Result};
use crate::model::{
    encode_actions, random_orders, stack_observations, Decoder, DecoderConfig, ModelConfig, Policy, WorldModel,
};
use crate::netops::{AdamConfig, Graph, ParamStore, SelectMode, Var};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { gamma: 1.0 }
    }
}

/// `mean_b [H_b + max(0, gamma - H~_b)]` where `H_b` is the MSE between the
/// predicted and target slot sets of element `b` and `H~_b` the MSE between
/// its negative and target. All inputs are `(batch*N) x d_s`.
pub fn contrastive_loss<F: Scalar>(
    g: &mut Graph<F>,
    pred: Var,
    target: Var,
    negative: Var,
    slots: usize,
    cfg: &LossConfig,
) -> Result<Var> {
    if !(cfg.gamma > 0.0) {
        return Err(Error::InvalidArgument(format!("gamma {}", cfg.gamma)));
    }
    let h = g.row_mse(pred, target)?;
    let h = g.mean_groups(h, slots)?;
    let h_neg = g.row_mse(negative, target)?;
    let h_neg = g.mean_groups(h_neg, slots)?;
    let hinge = g.hinge_below(h_neg, F::of(cfg.gamma))?;
    let per_sample = g.add(h, hinge)?;
    g.mean(per_sample)
}

/// A permutation of `0..batch` without fixed points: one shuffle, one
/// reshuffle if it fixed any index, then a cyclic shift as a last resort.
pub fn negative_sample<R: Rng>(batch: usize, rng: &mut R) -> Result<Vec<usize>> {
    if batch < 2 {
        return Err(Error::InvalidArgument(format!(
            "negative sampling needs a batch of at least 2, got {batch}"
        )));
    }
    let deranged = |p: &[usize]| p.iter().enumerate().all(|(i, &j)| i != j);
    let mut perm: Vec<usize> = (0..batch).collect();
    for _ in 0..2 {
        perm.shuffle(rng);
        if deranged(&perm) {
            return Ok(perm);
        }
    }
    Ok((0..batch).map(|i| (i + 1) % batch).collect())
}

/// Expands a per-element permutation to the `(batch*N)` slot rows.
fn slot_rows(perm: &[usize], slots: usize) -> Vec<usize> {
    perm.iter().flat_map(|&b| (0..slots).map(move |i| b * slots + i)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub loss: LossConfig,
    pub seed: u64,
}

impl TrainConfig {
    /// 100 epochs, batch 1024, lr 5e-4.
    pub fn new(model: ModelConfig, seed: u64) -> Self {
        Self {
            model,
            epochs: 100,
            batch_size: 1024,
            lr: 5e-4,
            loss: LossConfig::default(),
            seed,
        }
    }
}

/// One record of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub phase: String,
    pub epoch: usize,
    pub loss: f64,
    pub wall_ms: u64,
}

/// Appends metrics as newline-delimited JSON.
pub struct MetricsWriter {
    path: PathBuf,
    file: File,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn write(&mut self, m: &EpochMetrics) -> Result<()> {
        let line = serde_json::to_string(m)?;
        writeln!(self.file, "{line}").map_err(|e| Error::io(&self.path, e))
    }
}

/// Every `(episode, t)` transition of a dataset.
pub fn transition_index(dataset: &Dataset) -> Vec<(usize, usize)> {
    dataset
        .episodes
        .iter()
        .enumerate()
        .flat_map(|(e, ep)| (0..ep.transitions()).map(move |t| (e, t)))
        .collect()
}

/// Observations at `t` and `t + 1` plus the encoded actions for a batch of transitions.
pub struct TransitionBatch<F> {
    pub obs: Array2<F>,
    pub next_obs: Array2<F>,
    pub actions: Array2<F>,
}

pub fn assemble_batch<F: Scalar>(
    episodes: &[Episode],
    items: &[(usize, usize)],
    slots: usize,
    action_dim: usize,
) -> Result<TransitionBatch<F>> {
    let now: Vec<(&Episode, usize)> = items.iter().map(|&(e, t)| (&episodes[e], t)).collect();
    let next: Vec<(&Episode, usize)> = items.iter().map(|&(e, t)| (&episodes[e], t + 1)).collect();
    let actions: Vec<_> = items.iter().map(|&(e, t)| episodes[e].actions.get(t).copied()).collect();
    Ok(TransitionBatch {
        obs: stack_observations(&now)?,
        next_obs: stack_observations(&next)?,
        actions: encode_actions(&actions, slots, action_dim)?,
    })
}

/// Summary of a world-model run.
#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    /// Parameters whose gradient was exactly zero throughout the final epoch.
    pub silent_params: Vec<String>,
}

/// Contrastive loss of one batch; gradients accumulate into `model.store`
/// when `backward` is set.
pub fn world_model_batch_loss<F: Scalar, R: Rng>(
    model: &mut WorldModel<F>,
    batch: &TransitionBatch<F>,
    loss_cfg: &LossConfig,
    mode: SelectMode,
    backward: bool,
    rng: &mut R,
) -> Result<F> {
    let n = model.slots();
    let b = batch.obs.nrows();
    let mut g = Graph::new();
    let obs = g.constant(batch.obs.clone())?;
    let next_obs = g.constant(batch.next_obs.clone())?;
    let s_t = model.encoder.forward(&mut g, &model.store, obs)?;
    let s_next = model.encoder.forward(&mut g, &model.store, next_obs)?;
    let actions = if model.config.transition.action_dim > 0 {
        Some(g.constant(batch.actions.clone())?)
    } else {
        None
    };
    let orders = random_orders(b, n, rng);
    let (pred, _) =
        model
            .transition
            .step(&mut g, &model.store, s_t, actions, &orders, Policy::Learned(mode), rng)?;
    let perm = negative_sample(b, rng)?;
    let negative = g.gather_rows(s_t, &slot_rows(&perm, n))?;
    let loss = contrastive_loss(&mut g, pred, s_next, negative, n, loss_cfg)?;
    let value = g.value(loss)[[0, 0]];
    if backward {
        g.backward(loss, &mut model.store)?;
    }
    Ok(value)
}

fn nonfinite_context(e: Error, phase: &str, epoch: usize, step: usize) -> Error {
    match e {
        Error::NonFinite(msg) => Error::NonFinite(format!("{phase} epoch {epoch} batch {step}: {msg}")),
        other => other,
    }
}

fn mark_gradients<F: Scalar>(store: &ParamStore<F>, touched: &mut [bool]) {
    for ((_, p), t) in store.iter().zip(touched.iter_mut()) {
        if !*t && p.grad.iter().any(|&x| x != F::zero()) {
            *t = true;
        }
    }
}

/// Trains encoder and transition from scratch. `on_epoch` receives one
/// metrics record per epoch.
pub fn train_world_model<F: Scalar>(
    dataset: &Dataset,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochMetrics) -> Result<()>,
) -> Result<(WorldModel<F>, TrainReport)> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("training dataset is empty".into()));
    }
    if dataset.kind() != cfg.model.env {
        return Err(Error::ConfigMismatch(format!(
            "model is configured for {} but the dataset holds {}",
            cfg.model.env,
            dataset.kind()
        )));
    }
    if cfg.batch_size < 2 || cfg.epochs == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 2 and epochs positive".into()));
    }
    let max_object = dataset.header.config.objects;
    if dataset.kind().action_dim() > 0 && max_object > cfg.model.transition.slots {
        return Err(Error::ConfigMismatch(format!(
            "dataset has {max_object} objects but the model has {} slots",
            cfg.model.transition.slots
        )));
    }
    let mut model = WorldModel::<F>::new(cfg.model.clone(), cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_6169_6e00);
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut samples = transition_index(dataset);
    let n = model.slots();
    let action_dim = cfg.model.transition.action_dim;
    let mut report = TrainReport::default();
    let start = Instant::now();
    let mut touched = Vec::new();
    for epoch in 1..=cfg.epochs {
        samples.shuffle(&mut rng);
        touched = vec![false; model.store.len()];
        let mut total = 0.0;
        let mut count = 0usize;
        for (step, chunk) in samples.chunks(cfg.batch_size).enumerate() {
            // a lone trailing sample has no in-batch negative
            if chunk.len() < 2 {
                continue;
            }
            let batch = assemble_batch::<F>(&dataset.episodes, chunk, n, action_dim)?;
            let loss = world_model_batch_loss(&mut model, &batch, &cfg.loss, SelectMode::Train, true, &mut rng)
                .map_err(|e| nonfinite_context(e, "world", epoch, step))?;
            mark_gradients(&model.store, &mut touched);
            model
                .store
                .adam_step(&adam)
                .map_err(|e| nonfinite_context(e, "world", epoch, step))?;
            total += loss.as_f64() * chunk.len() as f64;
            count += chunk.len();
        }
        let mean = total / count.max(1) as f64;
        log::info!("world epoch {epoch}: loss {mean:.6}");
        report.epoch_losses.push(mean);
        on_epoch(&EpochMetrics {
            phase: "world".into(),
            epoch,
            loss: mean,
            wall_ms: start.elapsed().as_millis() as u64,
        })?;
    }
    report.silent_params = model
        .store
        .iter()
        .zip(&touched)
        .filter(|(_, &t)| !t)
        .map(|((_, p), _)| p.name.clone())
        .collect();
    Ok((model, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderTrainConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Rows per forward/backward pass; gradients are accumulated to the full batch.
    pub microbatch: usize,
}

impl DecoderTrainConfig {
    /// Hidden width 2048, 100 epochs, batch 1024, lr 5e-4.
    pub fn new(seed: u64) -> Self {
        Self {
            hidden: 2048,
            epochs: 100,
            batch_size: 1024,
            lr: 5e-4,
            seed,
            microbatch: 256,
        }
    }
}

/// Frozen-backbone inputs and targets for decoder training: encoded states
/// `s_t`, predicted `s'_{t+1}` and the frames they should reproduce.
pub struct DecoderData<F> {
    pub slots: Array2<F>,
    pub predicted: Array2<F>,
    pub frames: Array2<F>,
    pub next_frames: Array2<F>,
}

/// The newest frame of the observation at `t`, as CHW values in `[0, 1]`.
pub fn target_frames<F: Scalar>(episodes: &[Episode], items: &[(usize, usize)]) -> Array2<F> {
    let mut out = Array2::zeros((items.len(), FRAME_BYTES));
    for (mut row, &(e, t)) in out.outer_iter_mut().zip(items) {
        let ep = &episodes[e];
        let frame = &ep.frames[t + ep.kind.input_frames() - 1];
        frame.write_chw(row.as_slice_mut().expect("standard layout"));
    }
    out
}

/// Encodes and predicts every transition once with the frozen model.
pub fn decoder_data<F: Scalar>(model: &WorldModel<F>, dataset: &Dataset, seed: u64) -> Result<DecoderData<F>> {
    let items = transition_index(dataset);
    let n = model.slots();
    let d_s = model.config.transition.slot_dim;
    let mut slots = Array2::zeros((items.len() * n, d_s));
    let mut predicted = Array2::zeros((items.len() * n, d_s));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (c, chunk) in items.chunks(512).enumerate() {
        let batch = assemble_batch::<F>(&dataset.episodes, chunk, n, model.config.transition.action_dim)?;
        let s = model.encode(&batch.obs)?;
        let orders = random_orders(chunk.len(), n, &mut rng);
        let (p, _) = model.step(&s, &batch.actions, &orders, Policy::Learned(SelectMode::Infer), &mut rng)?;
        let rows = c * 512 * n..(c * 512 + chunk.len()) * n;
        slots.slice_mut(ndarray::s![rows.clone(), ..]).assign(&s);
        predicted.slice_mut(ndarray::s![rows, ..]).assign(&p);
    }
    let next_items: Vec<_> = items.iter().map(|&(e, t)| (e, t + 1)).collect();
    Ok(DecoderData {
        slots,
        predicted,
        frames: target_frames(&dataset.episodes, &items),
        next_frames: target_frames(&dataset.episodes, &next_items),
    })
}

fn slot_block<F: Scalar>(a: &Array2<F>, items: &[usize], n: usize) -> Array2<F> {
    a.select(Axis(0), &slot_rows(items, n))
}

/// `L1 + L2` of the decoder on the given rows of `data`. With a weight, the
/// weighted loss is back-propagated into the decoder's gradients.
fn decoder_loss<F: Scalar>(
    decoder: &mut Decoder<F>,
    data: &DecoderData<F>,
    rows: &[usize],
    backward: Option<F>,
) -> Result<F> {
    let n = decoder.slots();
    let mut g = if backward.is_some() { Graph::new() } else { Graph::inference() };
    let s = g.constant(slot_block(&data.slots, rows, n))?;
    let p = g.constant(slot_block(&data.predicted, rows, n))?;
    let x = g.constant(data.frames.select(Axis(0), rows))?;
    let x_next = g.constant(data.next_frames.select(Axis(0), rows))?;
    let d1 = decoder.decode_graph(&mut g, s)?;
    let d2 = decoder.decode_graph(&mut g, p)?;
    let l1 = g.bce(d1.frame, x)?;
    let l2 = g.bce(d2.frame, x_next)?;
    let loss = g.add(l1, l2)?;
    let value = g.value(loss)[[0, 0]];
    if let Some(w) = backward {
        let weighted = g.scale(loss, w)?;
        g.backward(weighted, &mut decoder.store)?;
    }
    Ok(value)
}

/// Mean per-pixel BCE of decoded encodings `s_t` against their frames.
pub fn reconstruction_bce<F: Scalar>(decoder: &Decoder<F>, data: &DecoderData<F>) -> Result<f64> {
    let n = decoder.slots();
    let count = data.frames.nrows();
    let mut total = 0.0;
    let all: Vec<usize> = (0..count).collect();
    for chunk in all.chunks(256) {
        let (frame, _) = decoder.decode(&slot_block(&data.slots, chunk, n))?;
        let target = data.frames.select(Axis(0), chunk);
        total += crate::netops::bce_array(&frame, &target)?.as_f64() * chunk.len() as f64;
    }
    Ok(total / count.max(1) as f64)
}

/// Trains per-slot decoders against a frozen world model.
pub fn train_decoder<F: Scalar>(
    dataset: &Dataset,
    model: &WorldModel<F>,
    cfg: &DecoderTrainConfig,
    on_epoch: &mut dyn FnMut(&EpochMetrics) -> Result<()>,
) -> Result<Decoder<F>> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("decoder dataset is empty".into()));
    }
    if dataset.kind() != model.config.env {
        return Err(Error::ConfigMismatch(format!(
            "world model is for {} but the dataset holds {}",
            model.config.env,
            dataset.kind()
        )));
    }
    if cfg.batch_size == 0 || cfg.microbatch == 0 {
        return Err(Error::InvalidArgument("batch sizes must be positive".into()));
    }
    let data = decoder_data(model, dataset, cfg.seed)?;
    let mut decoder = Decoder::<F>::new(
        DecoderConfig {
            model: model.config.clone(),
            hidden: cfg.hidden,
        },
        cfg.seed,
    )?;
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6465_636f_6465);
    let mut order: Vec<usize> = (0..data.frames.nrows()).collect();
    let start = Instant::now();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            for micro in batch.chunks(cfg.microbatch) {
                let weight = F::of(micro.len() as f64 / batch.len() as f64);
                let loss = decoder_loss(&mut decoder, &data, micro, Some(weight))
                    .map_err(|e| nonfinite_context(e, "decoder", epoch, step))?;
                total += loss.as_f64() * micro.len() as f64;
            }
            decoder
                .store
                .adam_step(&adam)
                .map_err(|e| nonfinite_context(e, "decoder", epoch, step))?;
        }
        let mean = total / order.len() as f64;
        log::info!("decoder epoch {epoch}: loss {mean:.6}");
        on_epoch(&EpochMetrics {
            phase: "decoder".into(),
            epoch,
            loss: mean,
            wall_ms: start.elapsed().as_millis() as u64,
        })?;
    }
    Ok(decoder)
}
