//! Multi-step latent H@1 evaluation, mechanism-usage analytics, the
//! random-mechanism baseline, reconstruction export and report aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{Dataset, Direction, EnvKind, Episode, Frame, FRAME_BYTES, FRAME_SIDE, GRID_SIZE};
use crate::error::{Error, Result};
use crate::model::{
    encode_actions, random_orders, stack_observations, Decoder, ModelConfig, Policy, Variant, WorldModel,
};
use crate::netops::SelectMode;
use crate::scalar::Scalar;

pub const DEFAULT_HORIZONS: [usize; 3] = [1, 5, 10];

fn sq_dist<F: Scalar>(a: ArrayView1<F>, b: ArrayView1<F>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum()
}

/// Whether the pool row nearest to `pred` (squared Euclidean distance, ties
/// to the smallest index) is `true_index`.
pub fn hits_at_1<F: Scalar>(pred: ArrayView1<F>, pool: &Array2<F>, true_index: usize) -> Result<bool> {
    if pool.nrows() == 0 || true_index >= pool.nrows() {
        return Err(Error::InvalidArgument(format!(
            "true index {true_index} for a pool of {}",
            pool.nrows()
        )));
    }
    if pool.ncols() != pred.len() {
        return Err(Error::shape("hits_at_1", "prediction and pool widths differ"));
    }
    let target = sq_dist(pred, pool.row(true_index));
    let beaten = pool.outer_iter().enumerate().any(|(j, row)| {
        j != true_index && {
            let d = sq_dist(pred, row);
            d < target || (d == target && j < true_index)
        }
    });
    Ok(!beaten)
}

/// Percentage of rows of `preds` whose nearest pool row has the same index.
pub fn hits_at_1_rate<F: Scalar>(preds: &Array2<F>, pool: &Array2<F>) -> Result<f64> {
    if preds.nrows() != pool.nrows() {
        return Err(Error::shape("hits_at_1_rate", "one prediction per pool entry expected"));
    }
    let mut hits = 0usize;
    for (i, p) in preds.outer_iter().enumerate() {
        hits += hits_at_1(p, pool, i)? as usize;
    }
    Ok(100.0 * hits as f64 / preds.nrows().max(1) as f64)
}

/// Selection counts per action direction and mechanism, split by whether the
/// slot was the action's target. Action-free environments use one `none` row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MechanismUsage {
    pub directions: Vec<String>,
    pub target: Vec<Vec<u64>>,
    pub other: Vec<Vec<u64>>,
}

impl MechanismUsage {
    pub fn new(kind: EnvKind, mechanisms: usize) -> Self {
        let directions: Vec<String> = match kind {
            EnvKind::Shapes => Direction::ALL.iter().map(|d| format!("{d:?}").to_lowercase()).collect(),
            EnvKind::Balls => vec!["none".into()],
        };
        let rows = directions.len();
        Self {
            directions,
            target: vec![vec![0; mechanisms]; rows],
            other: vec![vec![0; mechanisms]; rows],
        }
    }

    pub fn total(&self) -> u64 {
        self.target.iter().chain(&self.other).flatten().sum()
    }

    /// Per direction, all slots: `target + other`.
    pub fn combined(&self) -> Vec<Vec<u64>> {
        self.target
            .iter()
            .zip(&self.other)
            .map(|(t, o)| t.iter().zip(o).map(|(a, b)| a + b).collect())
            .collect()
    }

    /// For each direction, the mechanism holding a strict plurality of target-slot selections.
    pub fn target_pluralities(&self) -> Vec<Option<usize>> {
        self.target
            .iter()
            .map(|row| {
                let max = *row.iter().max()?;
                let mut winners = row.iter().enumerate().filter(|(_, &c)| c == max);
                let (j, _) = winners.next()?;
                (max > 0 && winners.next().is_none()).then_some(j)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub env: EnvKind,
    pub split: String,
    pub variant: Variant,
    /// `learned`, `random` or `identity`.
    pub selection: String,
    pub seed: u64,
    pub episodes: usize,
    pub horizons: Vec<usize>,
    /// H@1 in percent, one per horizon.
    pub hits_at_1: Vec<f64>,
    pub usage: MechanismUsage,
}

impl EvalReport {
    pub fn at(&self, horizon: usize) -> Option<f64> {
        self.horizons.iter().position(|&h| h == horizon).map(|i| self.hits_at_1[i])
    }
}

/// Rejects a dataset the model cannot be evaluated on.
pub fn check_compatible(config: &ModelConfig, dataset: &Dataset) -> Result<()> {
    let n = config.transition.slots;
    let objects = dataset.header.config.objects;
    if config.env != dataset.kind() {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint is for {} but the dataset holds {}",
            config.env,
            dataset.kind()
        )));
    }
    match config.env {
        EnvKind::Balls if objects != n => Err(Error::ConfigMismatch(format!(
            "checkpoint has N={n} slots but the dataset has {objects} balls"
        ))),
        EnvKind::Shapes if objects > n => Err(Error::ConfigMismatch(format!(
            "checkpoint has N={n} slots but the dataset has {objects} objects"
        ))),
        _ => Ok(()),
    }
}

/// Ground-truth encodings per time step: `pools[t]` holds one flattened slot set per episode.
pub fn encode_pools<F: Scalar>(model: &WorldModel<F>, episodes: &[Episode], steps: usize) -> Result<Vec<Array2<F>>> {
    let n = model.slots();
    let width = n * model.config.transition.slot_dim;
    let mut pools = vec![Array2::zeros((episodes.len(), width)); steps + 1];
    for (c, chunk) in episodes.chunks(256).enumerate() {
        for (t, pool) in pools.iter_mut().enumerate() {
            let items: Vec<_> = chunk.iter().map(|e| (e, t)).collect();
            let obs = stack_observations::<F>(&items)?;
            let slots = model.encode(&obs)?;
            let flat = slots
                .into_shape_with_order((chunk.len(), width))
                .map_err(|e| Error::shape("encode_pools", e.to_string()))?;
            pool.slice_mut(s![c * 256..c * 256 + chunk.len(), ..]).assign(&flat);
        }
    }
    Ok(pools)
}

/// Predicted slot sets per step (flattened) and the selections that produced them.
pub struct RolloutBatch<F> {
    pub predictions: Vec<Array2<F>>,
    pub usage: MechanismUsage,
}

/// Infer-mode rollouts of every episode from its encoded first observation,
/// fed with the ground-truth actions; one random slot order per episode.
pub fn rollout_split<F: Scalar>(
    model: &WorldModel<F>,
    episodes: &[Episode],
    start: &Array2<F>,
    steps: usize,
    policy: Policy,
    seed: u64,
) -> Result<RolloutBatch<F>> {
    let n = model.slots();
    let t_cfg = &model.config.transition;
    let width = n * t_cfg.slot_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let orders = random_orders(episodes.len(), n, &mut rng);
    let mut predictions = vec![Array2::zeros((episodes.len(), width)); steps];
    let mut usage = MechanismUsage::new(model.config.env, t_cfg.mechanisms);
    for (c, chunk) in episodes.chunks(256).enumerate() {
        let rows = c * 256..c * 256 + chunk.len();
        let mut slots = start
            .slice(s![rows.clone(), ..])
            .to_owned()
            .into_shape_with_order((chunk.len() * n, t_cfg.slot_dim))
            .map_err(|e| Error::shape("rollout_split", e.to_string()))?;
        for (t, pred) in predictions.iter_mut().enumerate() {
            let actions: Vec<_> = chunk.iter().map(|e| e.actions.get(t).copied()).collect();
            let a = encode_actions::<F>(&actions, n, t_cfg.action_dim)?;
            let (next, sel) = model.step(&slots, &a, &orders[rows.clone()], policy, &mut rng)?;
            for (b, row) in sel.iter().enumerate() {
                let (dir, target) = match actions[b] {
                    Some(act) => (act.direction.index(), Some(act.object)),
                    None => (0, None),
                };
                for (slot, &j) in row.iter().enumerate() {
                    let cell = if target == Some(slot) { &mut usage.target } else { &mut usage.other };
                    cell[dir][j] += 1;
                }
            }
            let flat = next
                .clone()
                .into_shape_with_order((chunk.len(), width))
                .map_err(|e| Error::shape("rollout_split", e.to_string()))?;
            pred.slice_mut(s![rows.clone(), ..]).assign(&flat);
            slots = next;
        }
    }
    Ok(RolloutBatch { predictions, usage })
}

fn policy_name(policy: Policy) -> &'static str {
    match policy {
        Policy::Learned(_) => "learned",
        Policy::Uniform => "random",
        Policy::Forced(_) => "forced",
    }
}

/// H@1 at each horizon over a split, with a split-wide same-horizon pool.
pub fn eval_with_policy<F: Scalar>(
    model: &WorldModel<F>,
    dataset: &Dataset,
    horizons: &[usize],
    policy: Policy,
    seed: u64,
) -> Result<EvalReport> {
    check_compatible(&model.config, dataset)?;
    let max_h = *horizons
        .iter()
        .max()
        .ok_or_else(|| Error::InvalidArgument("no horizons".into()))?;
    if horizons.contains(&0) {
        return Err(Error::InvalidArgument("horizons start at 1".into()));
    }
    if let Some(short) = dataset.episodes.iter().map(|e| e.transitions()).find(|&t| t < max_h) {
        return Err(Error::InvalidArgument(format!(
            "horizon {max_h} exceeds an episode of {short} transitions"
        )));
    }
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("evaluation split is empty".into()));
    }
    let pools = encode_pools(model, &dataset.episodes, max_h)?;
    let rollout = rollout_split(model, &dataset.episodes, &pools[0], max_h, policy, seed)?;
    let hits = horizons
        .iter()
        .map(|&h| hits_at_1_rate(&rollout.predictions[h - 1], &pools[h]))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        env: model.config.env,
        split: dataset.header.split.name().to_string(),
        variant: model.config.transition.variant,
        selection: policy_name(policy).to_string(),
        seed,
        episodes: dataset.len(),
        horizons: horizons.to_vec(),
        hits_at_1: hits,
        usage: rollout.usage,
    })
}

/// Learned selection in infer mode.
pub fn eval_rollout<F: Scalar>(model: &WorldModel<F>, dataset: &Dataset, horizons: &[usize], seed: u64) -> Result<EvalReport> {
    eval_with_policy(model, dataset, horizons, Policy::Learned(SelectMode::Infer), seed)
}

/// Uniformly random mechanism per slot and step, selector bypassed.
pub fn random_mech_eval<F: Scalar>(
    model: &WorldModel<F>,
    dataset: &Dataset,
    horizons: &[usize],
    seed: u64,
) -> Result<EvalReport> {
    eval_with_policy(model, dataset, horizons, Policy::Uniform, seed)
}

/// The same encoder with an all-zero mechanism bank, so every prediction is the start state.
pub fn identity_baseline<F: Scalar>(
    model: &WorldModel<F>,
    dataset: &Dataset,
    horizons: &[usize],
    seed: u64,
) -> Result<EvalReport> {
    let mut frozen = model.clone();
    frozen.transition.zero_mechanisms(&mut frozen.store);
    let mut report = eval_rollout(&frozen, dataset, horizons, seed)?;
    report.selection = "identity".into();
    Ok(report)
}

/// Selection counts over a split in infer mode.
pub fn mechanism_usage<F: Scalar>(model: &WorldModel<F>, dataset: &Dataset, seed: u64) -> Result<MechanismUsage> {
    check_compatible(&model.config, dataset)?;
    let steps = dataset.episodes.iter().map(|e| e.transitions()).min().unwrap_or(0);
    let pools = encode_pools(model, &dataset.episodes, 0)?;
    let r = rollout_split(
        model,
        &dataset.episodes,
        &pools[0],
        steps,
        Policy::Learned(SelectMode::Infer),
        seed,
    )?;
    Ok(r.usage)
}

fn save_png(frame: &Frame, path: &Path) -> Result<()> {
    frame.to_image().save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other),
    })
}

fn to_frame<F: Scalar>(row: ArrayView1<F>) -> Result<Frame> {
    Frame::from_chw(row.as_slice().ok_or_else(|| Error::shape("frame", "non-contiguous row"))?)
}

/// Writes, for each horizon, the true frame, the decoded prediction, each
/// slot's decoding and one decoded forced-mechanism prediction per
/// mechanism, plus the frames of the first observation.
pub fn export_reconstructions<F: Scalar>(
    model: &WorldModel<F>,
    decoder: &Decoder<F>,
    episode: &Episode,
    horizons: &[usize],
    out_dir: &Path,
    seed: u64,
) -> Result<Vec<PathBuf>> {
    if decoder.config.model != model.config {
        return Err(Error::ConfigMismatch(
            "decoder was trained for a different world-model config".into(),
        ));
    }
    let max_h = horizons.iter().copied().max().unwrap_or(0);
    if max_h > episode.transitions() {
        return Err(Error::InvalidArgument(format!(
            "horizon {max_h} exceeds an episode of {} transitions",
            episode.transitions()
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let n = model.slots();
    let t_cfg = &model.config.transition;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let orders = random_orders(1, n, &mut rng);
    let start = model.encode(&stack_observations(&[(episode, 0)])?)?;
    let actions = (0..max_h)
        .map(|t| encode_actions::<F>(&[episode.actions.get(t).copied()], n, t_cfg.action_dim))
        .collect::<Result<Vec<_>>>()?;
    let learned = model.rollout(&start, &actions, &orders, Policy::Learned(SelectMode::Infer), &mut rng)?;
    let forced = (0..t_cfg.mechanisms)
        .map(|j| model.forced_mechanism_rollout(&start, &actions, &orders, j))
        .collect::<Result<Vec<_>>>()?;

    let mut written = Vec::new();
    let mut emit = |frame: &Frame, name: String| -> Result<()> {
        let path = out_dir.join(name);
        save_png(frame, &path)?;
        written.push(path);
        Ok(())
    };
    for (k, f) in episode.observation(0).iter().enumerate() {
        emit(f, format!("original{k}.png"))?;
    }
    for &h in horizons {
        let truth = &episode.frames[h + episode.kind.input_frames() - 1];
        emit(truth, format!("h{h}_truth.png"))?;
        let (frame, per_slot) = decoder.decode(&learned.states[h])?;
        emit(&to_frame(frame.row(0))?, format!("h{h}_pred.png"))?;
        for (i, img) in per_slot.iter().enumerate() {
            emit(&to_frame(img.row(0))?, format!("h{h}_slot{i}.png"))?;
        }
        for (j, r) in forced.iter().enumerate() {
            let (frame, _) = decoder.decode(&r.states[h])?;
            emit(&to_frame(frame.row(0))?, format!("h{h}_mech{j}.png"))?;
        }
    }
    Ok(written)
}

/// Grid cell whose pixels best match each color, scored by a Gaussian kernel in RGB space.
pub fn object_cells(frame: &Frame, colors: &[[u8; 3]]) -> Vec<(usize, usize)> {
    let cell = FRAME_SIDE / GRID_SIZE;
    colors
        .iter()
        .map(|c| {
            let mut scores = [[0.0f64; GRID_SIZE]; GRID_SIZE];
            for y in 0..FRAME_SIDE {
                for x in 0..FRAME_SIDE {
                    let p = frame.get(x, y);
                    let d2: f64 = (0..3).map(|k| (p[k] as f64 - c[k] as f64).powi(2)).sum();
                    scores[y / cell][x / cell] += (-d2 / (2.0 * 40.0 * 40.0)).exp();
                }
            }
            let mut best = (0, 0);
            for r in 0..GRID_SIZE {
                for col in 0..GRID_SIZE {
                    if scores[r][col] > scores[best.1][best.0] {
                        best = (col, r);
                    }
                }
            }
            best
        })
        .collect()
}

/// Decodes the 1-step prediction of `episode` and checks that every object's
/// best-matching cell agrees with the true frame.
pub fn one_step_cells_match<F: Scalar>(
    model: &WorldModel<F>,
    decoder: &Decoder<F>,
    episode: &Episode,
    seed: u64,
) -> Result<bool> {
    let n = model.slots();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let orders = random_orders(1, n, &mut rng);
    let s0 = model.encode(&stack_observations(&[(episode, 0)])?)?;
    let a = encode_actions::<F>(&[episode.actions.first().copied()], n, model.config.transition.action_dim)?;
    let (s1, _) = model.step(&s0, &a, &orders, Policy::Learned(SelectMode::Infer), &mut rng)?;
    let (frame, _) = decoder.decode(&s1)?;
    let predicted = to_frame(frame.row(0))?;
    let truth = &episode.frames[episode.kind.input_frames()];
    let colors: Vec<[u8; 3]> = crate::envs::PALETTE_SPECS[..episode.object_count]
        .iter()
        .map(|s| s.rgb())
        .collect();
    Ok(object_cells(&predicted, &colors) == object_cells(truth, &colors))
}

/// Mean and standard error of one (split, variant, selection, horizon) cell over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub split: String,
    pub variant: String,
    pub selection: String,
    pub horizon: usize,
    pub runs: usize,
    pub mean: f64,
    pub stderr: f64,
}

/// Sample mean and standard error (`sd / sqrt(n)`, zero for a single value).
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

pub fn aggregate(reports: &[EvalReport]) -> Vec<Summary> {
    let mut cells: BTreeMap<(String, String, String, usize), Vec<f64>> = BTreeMap::new();
    for r in reports {
        for (&h, &v) in r.horizons.iter().zip(&r.hits_at_1) {
            cells
                .entry((r.split.clone(), r.variant.name().to_string(), r.selection.clone(), h))
                .or_default()
                .push(v);
        }
    }
    cells
        .into_iter()
        .map(|((split, variant, selection, horizon), v)| {
            let (mean, stderr) = mean_stderr(&v);
            Summary {
                split,
                variant,
                selection,
                horizon,
                runs: v.len(),
                mean,
                stderr,
            }
        })
        .collect()
}

/// Text table with one row per (split, variant, selection) and one column per horizon.
pub fn render_table(summaries: &[Summary]) -> String {
    let mut horizons: Vec<usize> = summaries.iter().map(|s| s.horizon).collect();
    horizons.sort_unstable();
    horizons.dedup();
    let mut rows: BTreeMap<(String, String, String), BTreeMap<usize, &Summary>> = BTreeMap::new();
    for s in summaries {
        rows.entry((s.split.clone(), s.variant.clone(), s.selection.clone()))
            .or_default()
            .insert(s.horizon, s);
    }
    let mut out = String::new();
    let _ = write!(out, "{:<10} {:<12} {:<9}", "split", "variant", "selection");
    for h in &horizons {
        let _ = write!(out, " {:>16}", format!("H@1 {h} step{}", if *h == 1 { "" } else { "s" }));
    }
    out.push('\n');
    for ((split, variant, selection), cells) in rows {
        let _ = write!(out, "{split:<10} {variant:<12} {selection:<9}");
        for h in &horizons {
            match cells.get(h) {
                Some(s) => {
                    let _ = write!(out, " {:>16}", format!("{:.1} ± {:.1}", s.mean, s.stderr));
                }
                None => {
                    let _ = write!(out, " {:>16}", "-");
                }
            }
        }
        out.push('\n');
    }
    out
}

/// Decoded frames as CHW rows, for callers that post-process reconstructions.
pub fn frames_from_rows<F: Scalar>(rows: &Array2<F>) -> Result<Vec<Frame>> {
    if rows.ncols() != FRAME_BYTES {
        return Err(Error::shape("frames_from_rows", "expected 7500 columns"));
    }
    rows.outer_iter().map(to_frame).collect()
}
