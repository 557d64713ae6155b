//! Pretraining, fine-tuning and evaluation.
//!
//! One pretraining step samples a batch, builds the affinity targets,
//! embeds actions and the batch's distinct descriptions, evaluates the
//! contrastive and imitation losses, updates the moving averages, and
//! takes an SGD-with-momentum step on the weighted total. Per-sample
//! backward passes run on rayon workers over fixed-size chunks and are
//! reduced in chunk order, so results do not depend on the thread count.

use crate::action_space::{class_indices, parse_language, ActionError, ClassIndices, PrimitiveTriple};
use crate::adaptive_weighting::{total_loss, LossWeights, MaState, WeightingError};
use crate::affinity::{
    collapse_target, dedup_in_order, row_normalize, similarity_matrix, AffinityError, AffinityMatrix, AffinityWeights,
    SelfMode,
};
use crate::datagen::{DataError, Dataset};
use crate::losses::{
    contrastive_total, imitation_loss, info_nce, l1_trajectory_loss, loss_action_action, loss_action_primitive,
    ContrastiveConfig, LossError, LossValue,
};
use crate::model::{action_scale, Checkpoint, HeadGrads, Model, ModelDims, ModelError, ModelParams, Observation, ParamGroup};
use crate::numerics::{cosine_matrix, Mat, NumericsError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("training diverged at step {step}: {what}")]
    Diverged { step: usize, what: String, last_good: Box<Checkpoint> },
    #[error("{0}")]
    Degenerate(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Affinity(#[from] AffinityError),
    #[error(transparent)]
    Weighting(#[from] WeightingError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Action(#[from] ActionError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("thread pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub clip_norm: f64,
    /// Seeds parameter init and batch sampling.
    pub seed: u64,
    pub affinity: AffinityWeights,
    pub contrastive: ContrastiveConfig,
    pub window: usize,
    /// Replace `S` by the identity.
    pub hard_labels: bool,
    /// Hold `w_il = w_cl = 0.5`.
    pub fixed_weights: bool,
    pub freeze_encoders: bool,
    pub inverse_weighting: bool,
    /// Compute the contrastive terms with the one-positive InfoNCE routine
    /// instead of the soft-target one. Requires `hard_labels`.
    pub reference_infonce: bool,
    /// `obs_dim` and `n_instructions` are taken from the dataset.
    pub model: ModelDims,
    /// Fraction of each task's episodes held out for evaluation.
    pub holdout: f64,
    /// Evaluate every this many steps (0: only after the last step).
    pub eval_every: usize,
    /// Worker threads for the batch fan-out (0: rayon default).
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            steps: 1500,
            lr: 0.05,
            momentum: 0.9,
            clip_norm: 10.0,
            seed: 0,
            affinity: AffinityWeights::default(),
            contrastive: ContrastiveConfig::default(),
            window: 100,
            hard_labels: false,
            fixed_weights: false,
            freeze_encoders: false,
            inverse_weighting: false,
            reference_infonce: false,
            model: ModelDims::default(),
            holdout: 0.2,
            eval_every: 0,
            threads: 0,
        }
    }
}

fn positive(name: &str, v: f64) -> Result<(), TrainError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(TrainError::Config(format!("{name} must be positive, got {v}")))
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size < 2 {
            return Err(TrainError::Config("batch_size must be at least 2".into()));
        }
        if self.steps == 0 || self.window == 0 {
            return Err(TrainError::Config("steps and window must be positive".into()));
        }
        positive("lr", self.lr)?;
        positive("clip_norm", self.clip_norm)?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::Config("momentum must lie in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.holdout) {
            return Err(TrainError::Config("holdout must lie in [0, 1)".into()));
        }
        if self.reference_infonce && !self.hard_labels {
            return Err(TrainError::Config("reference_infonce requires hard_labels".into()));
        }
        self.affinity.validate()?;
        self.contrastive.validate()?;
        Ok(())
    }
}

/// Losses and weights of one pretraining step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub l_a: f64,
    pub l_m: f64,
    pub l_cl: f64,
    pub l_il: f64,
    pub w_il: f64,
    pub w_cl: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub step: usize,
    pub retrieval_top1: f64,
    pub spearman: f64,
    pub per_task: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsLog {
    pub steps: Vec<StepMetrics>,
    pub evals: Vec<EvalMetrics>,
}

impl MetricsLog {
    pub fn write_steps_csv<W: Write>(&self, out: W) -> Result<(), TrainError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "l_a", "l_m", "l_cl", "l_il", "w_il", "w_cl", "total"])?;
        for s in &self.steps {
            let mut row = vec![s.step.to_string()];
            row.extend([s.l_a, s.l_m, s.l_cl, s.l_il, s.w_il, s.w_cl, s.total].iter().map(f64::to_string));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// `per_task` is written as `task:accuracy` pairs joined by `;`.
    pub fn write_evals_csv<W: Write>(&self, out: W) -> Result<(), TrainError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "retrieval_top1", "spearman", "per_task"])?;
        for e in &self.evals {
            let per_task: Vec<String> = e.per_task.iter().map(|(t, a)| format!("{t}:{a}")).collect();
            w.write_record([e.step.to_string(), e.retrieval_top1.to_string(), e.spearman.to_string(), per_task.join(";")])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Mean of `f` over the first (`tail = false`) or last `n` steps.
    pub fn window_mean(&self, n: usize, tail: bool, f: impl Fn(&StepMetrics) -> f64) -> f64 {
        let n = n.min(self.steps.len()).max(1);
        let slice = if tail { &self.steps[self.steps.len() - n..] } else { &self.steps[..n] };
        slice.iter().map(f).sum::<f64>() / slice.len() as f64
    }
}

/// Per-record inputs derived once from a dataset.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub obs: Vec<Observation>,
    pub triples: Vec<PrimitiveTriple>,
    pub labels: Vec<ClassIndices>,
    pub texts: Vec<String>,
    pub task_ids: Vec<usize>,
    /// Normalized continuous actions (see [`action_scale`]).
    pub actions: Vec<[f64; 7]>,
}

impl Prepared {
    pub fn new(data: &Dataset) -> Result<Self, TrainError> {
        let binning = &data.header.binning;
        let scale = action_scale(binning);
        let mut p = Prepared {
            obs: Vec::with_capacity(data.records.len()),
            triples: Vec::new(),
            labels: Vec::new(),
            texts: Vec::new(),
            task_ids: Vec::new(),
            actions: Vec::new(),
        };
        for r in &data.records {
            let triple = parse_language(&r.primitive_text, binning).map_err(|e| TrainError::Config(e.to_string()))?;
            p.obs.push(r.observation());
            p.labels.push(class_indices(&triple, binning)?);
            p.triples.push(triple);
            p.texts.push(r.primitive_text.clone());
            p.task_ids.push(r.task_id);
            p.actions.push(std::array::from_fn(|k| r.action[k] / scale[k]));
        }
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }
}

fn model_dims(base: &ModelDims, data: &Dataset) -> ModelDims {
    ModelDims { obs_dim: data.header.obs_dim, n_instructions: data.n_tasks().max(1), ..*base }
}

/// Samples per backward work unit; fixed so reduction order never depends
/// on the number of workers.
const CHUNK: usize = 8;

fn with_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T, TrainError> {
    if threads == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| TrainError::Pool(e.to_string()))?;
    Ok(pool.install(f))
}

fn sample_batch(rng: &mut ChaCha8Rng, pool: &[usize], n: usize) -> Vec<usize> {
    rand::seq::index::sample(rng, pool.len(), n).into_iter().map(|k| pool[k]).collect()
}

/// Rescales `grads` in place so their global norm over trainable blocks is
/// at most `max_norm`; returns the pre-clip norm.
fn clip(grads: &mut ModelParams, trainable: &dyn Fn(ParamGroup) -> bool, max_norm: f64) -> f64 {
    let sq: f64 = grads
        .blocks()
        .iter()
        .filter(|(_, g, _)| trainable(*g))
        .map(|(_, _, m)| m.as_slice().iter().map(|v| v * v).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let c = max_norm / norm;
        for (_, _, m) in grads.blocks_mut() {
            m.scale(c);
        }
    }
    norm
}

/// SGD with momentum: `v ← μ v + g`, `θ ← θ − lr v`, skipping frozen groups.
pub struct Sgd {
    lr: f64,
    momentum: f64,
    velocity: ModelParams,
}

impl Sgd {
    pub fn new(params: &ModelParams, lr: f64, momentum: f64) -> Self {
        Self { lr, momentum, velocity: params.zeros_like() }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, trainable: &dyn Fn(ParamGroup) -> bool) {
        for (((_, group, p), (_, _, v)), (_, _, g)) in
            params.blocks_mut().into_iter().zip(self.velocity.blocks_mut()).zip(grads.blocks())
        {
            if !trainable(group) {
                continue;
            }
            for ((p, v), g) in p.as_mut_slice().iter_mut().zip(v.as_mut_slice()).zip(g.as_slice()) {
                *v = self.momentum * *v + g;
                *p -= self.lr * *v;
            }
        }
    }
}

/// Forward pass of the pretraining objective over one batch.
pub struct BatchForward {
    traces: Vec<crate::model::ActionTrace>,
    descs: Vec<String>,
    pub l_a: LossValue,
    pub l_m: LossValue,
    pub l_il: LossValue,
    pub l_cl: f64,
}

/// Embeds the batch, builds its targets and evaluates `L_a`, `L_m`, `L_CL`
/// and `L_IL`.
pub fn batch_forward(model: &Model, prep: &Prepared, batch: &[usize], cfg: &TrainConfig) -> Result<BatchForward, TrainError> {
    let n = batch.len();
    let tau = cfg.contrastive.tau;
    let traces = batch.par_iter().map(|&i| model.forward_action(&prep.obs[i])).collect::<Result<Vec<_>, _>>()?;
    let a = Mat::from_rows(&traces.iter().map(|t| t.a.clone()).collect::<Vec<_>>())?;

    let batch_texts: Vec<&str> = batch.iter().map(|&i| prep.texts[i].as_str()).collect();
    let (descs, groups) = dedup_in_order(&batch_texts);
    let descs: Vec<String> = descs.into_iter().map(String::from).collect();
    let p = Mat::from_rows(&descs.iter().map(|t| model.embed_primitive_text(t)).collect::<Result<Vec<_>, _>>()?)?;

    let (l_a, l_m) = if cfg.reference_infonce {
        let own: Vec<usize> = (0..n).collect();
        let la = info_nce(&a, &a, &own, tau)?;
        let mut da = la.grads[0].clone();
        da.add_assign(&la.grads[1]);
        (LossValue { value: la.value, grads: vec![da] }, info_nce(&a, &p, &groups, tau)?)
    } else {
        let triples: Vec<PrimitiveTriple> = batch.iter().map(|&i| prep.triples[i]).collect();
        let (s, aa_mode) = if cfg.hard_labels {
            (AffinityMatrix::identity(n), SelfMode::IncludeSelf)
        } else {
            (similarity_matrix(&triples, &cfg.affinity)?, SelfMode::ExcludeSelf)
        };
        let t_aa = row_normalize(&s, aa_mode);
        let t_ap = collapse_target(&s, &groups, descs.len());
        (loss_action_action(&a, &t_aa, tau)?, loss_action_primitive(&a, &p, &t_ap, tau)?)
    };
    let l_cl = contrastive_total(l_a.value, l_m.value, cfg.contrastive.lambda);

    let heads: Vec<_> = traces.iter().map(|t| model.heads(&t.a)).collect();
    let rows = |f: fn(&crate::model::HeadOutputs) -> &Vec<f64>| {
        Mat::from_rows(&heads.iter().map(|h| f(h).clone()).collect::<Vec<_>>())
    };
    let labels: Vec<ClassIndices> = batch.iter().map(|&i| prep.labels[i]).collect();
    let l_il = imitation_loss(&rows(|h| &h.logits_t)?, &rows(|h| &h.logits_r)?, &rows(|h| &h.logits_g)?, &labels)?;
    Ok(BatchForward { traces, descs, l_a, l_m, l_il, l_cl })
}

/// Parameter gradients of `w_cl (L_a + λ L_m) + w_il L_IL`, the weights
/// held constant.
pub fn batch_backward(model: &Model, fwd: &BatchForward, w: LossWeights, lambda: f64) -> Result<ModelParams, TrainError> {
    let n = fwd.traces.len();
    let mut d_a = fwd.l_a.grads[0].clone();
    let mut d_am = fwd.l_m.grads[0].clone();
    d_am.scale(lambda);
    d_a.add_assign(&d_am);
    d_a.scale(w.w_cl);
    let mut head_g: Vec<Mat> = fwd.l_il.grads.clone();
    head_g.iter_mut().for_each(|g| g.scale(w.w_il));

    let order: Vec<usize> = (0..n).collect();
    let parts: Vec<ModelParams> = order
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = model.params.zeros_like();
            for &k in chunk {
                let up = HeadGrads {
                    logits_t: Some(head_g[0].row(k)),
                    logits_r: Some(head_g[1].row(k)),
                    logits_g: Some(head_g[2].row(k)),
                    action: None,
                };
                let mut dk = model.backward_heads(&fwd.traces[k].a, &up, &mut g);
                dk.iter_mut().zip(d_a.row(k)).for_each(|(x, y)| *x += y);
                model.backward_action(&fwd.traces[k], &dk, &mut g);
            }
            g
        })
        .collect();
    let mut grads = model.params.zeros_like();
    for part in &parts {
        grads.add_assign(part);
    }
    let mut d_p = fwd.l_m.grads[1].clone();
    d_p.scale(w.w_cl * lambda);
    for (k, text) in fwd.descs.iter().enumerate() {
        model.backward_primitive_text(text, d_p.row(k), &mut grads)?;
    }
    Ok(grads)
}

/// The weighted total under fixed `w` and its parameter gradients.
pub fn batch_objective(
    model: &Model,
    prep: &Prepared,
    batch: &[usize],
    cfg: &TrainConfig,
    w: LossWeights,
) -> Result<(f64, ModelParams), TrainError> {
    let fwd = batch_forward(model, prep, batch, cfg)?;
    let grads = batch_backward(model, &fwd, w, cfg.contrastive.lambda)?;
    Ok((total_loss(fwd.l_cl, fwd.l_il.value, w), grads))
}

/// One pretraining step: forward, moving-average update, backward.
fn train_step(
    model: &Model,
    prep: &Prepared,
    batch: &[usize],
    cfg: &TrainConfig,
    ma: &mut MaState,
    step: usize,
) -> Result<(StepMetrics, ModelParams), TrainError> {
    // Non-finite or collapsed activations surface as numeric errors in the losses.
    let fwd = batch_forward(model, prep, batch, cfg).map_err(|e| match e {
        TrainError::Loss(_) | TrainError::Numerics(_) => TrainError::Diverged {
            step,
            what: e.to_string(),
            last_good: Box::new(model.to_checkpoint()),
        },
        e => e,
    })?;
    for (what, v) in [("L_a", fwd.l_a.value), ("L_m", fwd.l_m.value), ("L_IL", fwd.l_il.value)] {
        if !v.is_finite() {
            return Err(TrainError::Diverged {
                step,
                what: format!("{what} = {v}"),
                last_good: Box::new(model.to_checkpoint()),
            });
        }
    }
    ma.update(fwd.l_il.value, fwd.l_cl)?;
    let w = if cfg.fixed_weights {
        LossWeights::EQUAL
    } else if cfg.inverse_weighting {
        ma.inverse_weights()?
    } else {
        ma.weights()?
    };
    let metrics = StepMetrics {
        step,
        l_a: fwd.l_a.value,
        l_m: fwd.l_m.value,
        l_cl: fwd.l_cl,
        l_il: fwd.l_il.value,
        w_il: w.w_il,
        w_cl: w.w_cl,
        total: total_loss(fwd.l_cl, fwd.l_il.value, w),
    };
    Ok((metrics, batch_backward(model, &fwd, w, cfg.contrastive.lambda)?))
}

fn pretrain_trainable(cfg: &TrainConfig) -> impl Fn(ParamGroup) -> bool + '_ {
    move |g| match g {
        ParamGroup::Encoders => !cfg.freeze_encoders,
        ParamGroup::ActionHead => false,
        _ => true,
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutput {
    pub model: Model,
    pub log: MetricsLog,
}

/// Pretrains a freshly initialized model on the training split of `data`.
pub fn pretrain(cfg: &TrainConfig, data: &Dataset) -> Result<PretrainOutput, TrainError> {
    cfg.validate()?;
    let dims = model_dims(&cfg.model, data);
    let model = Model::init(cfg.seed, dims, data.header.binning.clone())?;
    pretrain_from(cfg, data, model)
}

/// Continues pretraining `model` on the training split of `data`.
pub fn pretrain_from(cfg: &TrainConfig, data: &Dataset, mut model: Model) -> Result<PretrainOutput, TrainError> {
    cfg.validate()?;
    let prep = Prepared::new(data)?;
    let splits = data.split(cfg.holdout);
    if splits.train.len() < cfg.batch_size {
        return Err(TrainError::Config(format!(
            "training split has {} steps, fewer than batch_size {}",
            splits.train.len(),
            cfg.batch_size
        )));
    }
    let eval_idx = if splits.heldout.is_empty() { &splits.train } else { &splits.heldout };
    let candidates = distinct_descriptions(&prep);
    let trainable = pretrain_trainable(cfg);

    with_pool(cfg.threads, || {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::datagen::mix_seed(cfg.seed, 0x5A3D));
        let mut ma = MaState::new(cfg.window)?;
        let mut opt = Sgd::new(&model.params, cfg.lr, cfg.momentum);
        let mut log = MetricsLog::default();
        for step in 0..cfg.steps {
            let batch = sample_batch(&mut rng, &splits.train, cfg.batch_size);
            let (metrics, mut grads) = train_step(&model, &prep, &batch, cfg, &mut ma, step)?;
            let last_good = model.params.clone();
            clip(&mut grads, &trainable, cfg.clip_norm);
            opt.step(&mut model.params, &grads, &trainable);
            if !model.params.is_finite() {
                model.params = last_good;
                return Err(TrainError::Diverged {
                    step,
                    what: "non-finite parameters".into(),
                    last_good: Box::new(model.to_checkpoint()),
                });
            }
            log.steps.push(metrics);
            let last = step + 1 == cfg.steps;
            if last || (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0) {
                let r = evaluate_retrieval_with(&model, &prep, eval_idx, &candidates)?;
                let rho = affinity_correlation_with(&model, &prep, eval_idx, &cfg.affinity)?;
                log.evals.push(EvalMetrics { step: step + 1, retrieval_top1: r.top1, spearman: rho, per_task: r.per_task });
            }
        }
        Ok(PretrainOutput { model, log })
    })?
}

/// Which parameters fine-tuning updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneScope {
    ActionHead,
    All,
    Nothing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub scope: FinetuneScope,
    pub holdout: f64,
    /// Record the held-out L1 every this many steps (0: only at the end).
    pub eval_every: usize,
    pub threads: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            steps: 2000,
            lr: 0.2,
            momentum: 0.9,
            clip_norm: 10.0,
            seed: 0,
            scope: FinetuneScope::ActionHead,
            holdout: 0.2,
            eval_every: 100,
            threads: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 || self.steps == 0 {
            return Err(TrainError::Config("batch_size and steps must be positive".into()));
        }
        positive("lr", self.lr)?;
        positive("clip_norm", self.clip_norm)?;
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.holdout) {
            return Err(TrainError::Config("momentum and holdout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FinetuneLog {
    /// `(step, batch L1)` for every step.
    pub train: Vec<(usize, f64)>,
    /// `(steps taken, held-out mean L1)`; the first entry is before training.
    pub evals: Vec<(usize, f64)>,
}

impl FinetuneLog {
    /// First evaluation step at which held-out L1 fell below `threshold`.
    pub fn steps_to(&self, threshold: f64) -> Option<usize> {
        self.evals.iter().find(|(_, l)| *l < threshold).map(|(s, _)| *s)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), TrainError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "heldout_l1"])?;
        for (s, l) in &self.evals {
            w.write_record([s.to_string(), l.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Mean absolute error per dimension between the action head and the
/// normalized recorded actions over `indices`.
pub fn l1_error(model: &Model, prep: &Prepared, indices: &[usize]) -> Result<f64, TrainError> {
    let errs = indices
        .par_iter()
        .map(|&i| {
            let out = model.heads(&model.embed_action(&prep.obs[i])?).action;
            Ok(out.iter().zip(&prep.actions[i]).map(|(p, t)| (p - t).abs()).sum::<f64>())
        })
        .collect::<Result<Vec<f64>, TrainError>>()?;
    Ok(errs.iter().sum::<f64>() / (7 * indices.len().max(1)) as f64)
}

/// Fits the action head (by default only it) to the continuous actions of
/// the training split with the L1 trajectory loss, in normalized units.
pub fn finetune(cfg: &FinetuneConfig, data: &Dataset, model: Model) -> Result<(Model, FinetuneLog), TrainError> {
    cfg.validate()?;
    if model.dims.obs_dim != data.header.obs_dim {
        return Err(TrainError::Model(ModelError::Dimension(format!(
            "checkpoint expects {} observation features, dataset has {}",
            model.dims.obs_dim, data.header.obs_dim
        ))));
    }
    if model.dims.n_instructions < data.n_tasks() {
        return Err(TrainError::Model(ModelError::Dimension(format!(
            "checkpoint knows {} instructions, dataset has {} tasks",
            model.dims.n_instructions,
            data.n_tasks()
        ))));
    }
    if model.binning != data.header.binning {
        return Err(TrainError::Config("checkpoint and dataset use different binning".into()));
    }
    let prep = Prepared::new(data)?;
    let splits = data.split(cfg.holdout);
    let train: Vec<usize> = splits.train.iter().chain(&splits.transfer).copied().collect();
    let eval = if splits.heldout.is_empty() { train.clone() } else { splits.heldout.clone() };
    if train.is_empty() {
        return Err(TrainError::Config("no training steps to fine-tune on".into()));
    }
    let scope = cfg.scope;
    let trainable = move |g: ParamGroup| match scope {
        FinetuneScope::ActionHead => g == ParamGroup::ActionHead,
        FinetuneScope::All => true,
        FinetuneScope::Nothing => false,
    };
    let mut model = model;
    with_pool(cfg.threads, || {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::datagen::mix_seed(cfg.seed, 0xF17E));
        let mut opt = Sgd::new(&model.params, cfg.lr, cfg.momentum);
        let mut log = FinetuneLog { train: Vec::new(), evals: vec![(0, l1_error(&model, &prep, &eval)?)] };
        let n = cfg.batch_size.min(train.len());
        for step in 0..cfg.steps {
            let batch = sample_batch(&mut rng, &train, n);
            let traces = batch.par_iter().map(|&i| model.forward_action(&prep.obs[i])).collect::<Result<Vec<_>, _>>()?;
            let pred = Mat::from_rows(&traces.iter().map(|t| model.heads(&t.a).action).collect::<Vec<_>>())?;
            let target = Mat::from_rows(&batch.iter().map(|&i| prep.actions[i].to_vec()).collect::<Vec<_>>())?;
            let l1 = l1_trajectory_loss(&pred, &target)?;
            if !l1.value.is_finite() {
                return Err(TrainError::Diverged {
                    step,
                    what: format!("L1 = {}", l1.value),
                    last_good: Box::new(model.to_checkpoint()),
                });
            }
            let full = scope == FinetuneScope::All;
            let order: Vec<usize> = (0..batch.len()).collect();
            let parts: Vec<ModelParams> = order
                .par_chunks(CHUNK)
                .map(|chunk| {
                    let mut g = model.params.zeros_like();
                    for &k in chunk {
                        let up = HeadGrads { action: Some(l1.grads[0].row(k)), ..HeadGrads::default() };
                        let da = model.backward_heads(&traces[k].a, &up, &mut g);
                        if full {
                            model.backward_action(&traces[k], &da, &mut g);
                        }
                    }
                    g
                })
                .collect();
            let mut grads = model.params.zeros_like();
            parts.iter().for_each(|p| grads.add_assign(p));
            clip(&mut grads, &trainable, cfg.clip_norm);
            opt.step(&mut model.params, &grads, &trainable);
            log.train.push((step, l1.value));
            let done = step + 1;
            if done == cfg.steps || (cfg.eval_every > 0 && done % cfg.eval_every == 0) {
                log.evals.push((done, l1_error(&model, &prep, &eval)?));
            }
        }
        Ok((model, log))
    })?
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub top1: f64,
    pub per_task: BTreeMap<usize, f64>,
    /// Number of candidate descriptions.
    pub k: usize,
    pub n: usize,
}

impl RetrievalMetrics {
    pub fn chance(&self) -> f64 {
        1.0 / self.k as f64
    }
}

/// Distinct descriptions of a prepared dataset, in first-appearance order.
pub fn distinct_descriptions(prep: &Prepared) -> Vec<String> {
    dedup_in_order(&prep.texts).0
}

/// Top-1 nearest-description retrieval over the steps in `indices`.
/// Candidates are all distinct descriptions in `data`.
pub fn evaluate_retrieval(model: &Model, data: &Dataset, indices: &[usize]) -> Result<RetrievalMetrics, TrainError> {
    let prep = Prepared::new(data)?;
    evaluate_retrieval_with(model, &prep, indices, &distinct_descriptions(&prep))
}

pub fn evaluate_retrieval_with(
    model: &Model,
    prep: &Prepared,
    indices: &[usize],
    candidates: &[String],
) -> Result<RetrievalMetrics, TrainError> {
    if indices.is_empty() || candidates.is_empty() {
        return Err(TrainError::Degenerate("retrieval needs samples and candidates".into()));
    }
    let p = Mat::from_rows(&candidates.iter().map(|t| model.embed_primitive_text(t)).collect::<Result<Vec<_>, _>>()?)?;
    let a = Mat::from_rows(
        &indices.par_iter().map(|&i| model.embed_action(&prep.obs[i])).collect::<Result<Vec<_>, _>>()?,
    )?;
    let cos = cosine_matrix(&a, &p)?;
    let mut per_task: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let mut hits = 0;
    for (row, &i) in indices.iter().enumerate() {
        let r = cos.row(row);
        let best = (0..r.len()).fold(0, |b, j| if r[j] > r[b] { j } else { b });
        let ok = candidates[best] == prep.texts[i];
        hits += usize::from(ok);
        let e = per_task.entry(prep.task_ids[i]).or_default();
        e.0 += usize::from(ok);
        e.1 += 1;
    }
    Ok(RetrievalMetrics {
        top1: hits as f64 / indices.len() as f64,
        per_task: per_task.into_iter().map(|(t, (h, n))| (t, h as f64 / n as f64)).collect(),
        k: candidates.len(),
        n: indices.len(),
    })
}

/// Average ranks (1-based), ties sharing the mean of their positions.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation; `None` if either input is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len());
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

pub const PROBE_SIZE: usize = 256;

/// Evenly strided probe of at most [`PROBE_SIZE`] indices.
pub fn probe(indices: &[usize]) -> Vec<usize> {
    if indices.len() <= PROBE_SIZE {
        return indices.to_vec();
    }
    (0..PROBE_SIZE).map(|k| indices[k * indices.len() / PROBE_SIZE]).collect()
}

/// Spearman ρ between the upper-triangle entries of `cos(A, A)` and `S`.
pub fn rank_correlation(a: &Mat, triples: &[PrimitiveTriple], weights: &AffinityWeights) -> Result<f64, TrainError> {
    let s = similarity_matrix(triples, weights)?;
    let cos = cosine_matrix(a, a)?;
    let n = triples.len();
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for i in 0..n {
        for j in i + 1..n {
            xs.push(cos[(i, j)]);
            ys.push(s.matrix()[(i, j)]);
        }
    }
    if ys.is_empty() || ys.iter().all(|&v| v == ys[0]) {
        return Err(TrainError::Degenerate("affinity is constant over the probe".into()));
    }
    Ok(spearman(&xs, &ys).unwrap_or(0.0))
}

pub fn affinity_correlation(model: &Model, data: &Dataset, indices: &[usize], weights: &AffinityWeights) -> Result<f64, TrainError> {
    affinity_correlation_with(model, &Prepared::new(data)?, indices, weights)
}

pub fn affinity_correlation_with(
    model: &Model,
    prep: &Prepared,
    indices: &[usize],
    weights: &AffinityWeights,
) -> Result<f64, TrainError> {
    let idx = probe(indices);
    let a = Mat::from_rows(&idx.par_iter().map(|&i| model.embed_action(&prep.obs[i])).collect::<Result<Vec<_>, _>>()?)?;
    let triples: Vec<PrimitiveTriple> = idx.iter().map(|&i| prep.triples[i]).collect();
    rank_correlation(&a, &triples, weights)
}

/// One row per dataset step: task, description, class indices, `A`.
pub fn export_embeddings<W: Write>(model: &Model, data: &Dataset, out: W) -> Result<(), TrainError> {
    let prep = Prepared::new(data)?;
    let all: Vec<usize> = (0..prep.len()).collect();
    let emb = all.par_iter().map(|&i| model.embed_action(&prep.obs[i])).collect::<Result<Vec<_>, _>>()?;
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["task_id", "primitive_text", "t_idx", "r_idx", "g_idx"].map(String::from).to_vec();
    header.extend((0..model.dims.embed).map(|k| format!("e_{k}")));
    w.write_record(&header)?;
    for (i, e) in emb.iter().enumerate() {
        let l = prep.labels[i];
        let mut row = vec![prep.task_ids[i].to_string(), prep.texts[i].clone(), l.t.to_string(), l.r.to_string(), l.g.to_string()];
        row.extend(e.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn export_embeddings_to(model: &Model, data: &Dataset, path: &Path) -> Result<(), TrainError> {
    export_embeddings(model, data, std::io::BufWriter::new(std::fs::File::create(path)?))
}

/// Headline numbers of one pretraining run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub heldout_top1: f64,
    pub transfer_top1: Option<f64>,
    pub chance: f64,
    pub spearman: f64,
    /// Mean over the last `window` steps of `(L_CL + L_IL) / 2`, a
    /// weighting-independent total.
    pub final_total: f64,
    pub first_l_cl: f64,
    pub last_l_cl: f64,
    pub finite: bool,
}

/// Pretrains on `data` and evaluates on its held-out and transfer splits.
pub fn run_and_summarize(cfg: &TrainConfig, data: &Dataset) -> Result<(PretrainOutput, RunSummary), TrainError> {
    let out = pretrain(cfg, data)?;
    let prep = Prepared::new(data)?;
    let splits = data.split(cfg.holdout);
    let candidates = distinct_descriptions(&prep);
    let held = evaluate_retrieval_with(&out.model, &prep, &splits.heldout, &candidates)?;
    let transfer = if splits.transfer.is_empty() {
        None
    } else {
        Some(evaluate_retrieval_with(&out.model, &prep, &splits.transfer, &candidates)?.top1)
    };
    let rho = affinity_correlation_with(&out.model, &prep, &splits.heldout, &cfg.affinity)?;
    let log = &out.log;
    let w = cfg.window;
    let summary = RunSummary {
        seed: cfg.seed,
        heldout_top1: held.top1,
        transfer_top1: transfer,
        chance: held.chance(),
        spearman: rho,
        final_total: log.window_mean(w, true, |s| 0.5 * (s.l_cl + s.l_il)),
        first_l_cl: log.window_mean(w, false, |s| s.l_cl),
        last_l_cl: log.window_mean(w, true, |s| s.l_cl),
        finite: log.steps.iter().all(|s| {
            [s.l_a, s.l_m, s.l_cl, s.l_il, s.w_il, s.w_cl, s.total].iter().all(|v| v.is_finite())
        }),
    };
    Ok((out, summary))
}

/// The four `{soft, hard} × {adaptive, fixed}` variants.
pub const VARIANTS: [(&str, bool, bool); 4] = [
    ("soft+adaptive", false, false),
    ("soft+fixed", false, true),
    ("hard+adaptive", true, false),
    ("hard+fixed", true, true),
];

pub fn variant_config(base: &TrainConfig, hard_labels: bool, fixed_weights: bool, seed: u64) -> TrainConfig {
    TrainConfig { hard_labels, fixed_weights, seed, ..base.clone() }
}

/// Median of a non-empty sample.
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seeds: usize,
    pub spearman: f64,
    pub heldout_top1: f64,
    pub transfer_top1: f64,
    pub final_total: f64,
    pub finite: bool,
}

/// Per-variant median rows and the `(variant, summary)` of every run.
pub type AblationOutput = (Vec<AblationRow>, Vec<(String, RunSummary)>);

/// Runs every variant on every `(seed, dataset)` pair, the seed also
/// seeding training.
pub fn ablation(base: &TrainConfig, datasets: &[(u64, &Dataset)]) -> Result<AblationOutput, TrainError> {
    let mut rows = Vec::new();
    let mut raw = Vec::new();
    for (name, hard, fixed) in VARIANTS {
        let mut runs = Vec::new();
        for &(seed, data) in datasets {
            let (_, s) = run_and_summarize(&variant_config(base, hard, fixed, seed), data)?;
            raw.push((name.to_string(), s.clone()));
            runs.push(s);
        }
        let med = |f: fn(&RunSummary) -> f64| median(&runs.iter().map(f).collect::<Vec<_>>());
        rows.push(AblationRow {
            variant: name.to_string(),
            seeds: runs.len(),
            spearman: med(|s| s.spearman),
            heldout_top1: med(|s| s.heldout_top1),
            transfer_top1: med(|s| s.transfer_top1.unwrap_or(f64::NAN)),
            final_total: med(|s| s.final_total),
            finite: runs.iter().all(|s| s.finite),
        });
    }
    Ok((rows, raw))
}

pub fn write_ablation_csv<W: Write>(rows: &[AblationRow], out: W) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["variant", "seeds", "spearman", "heldout_top1", "transfer_top1", "final_total", "finite"])?;
    for r in rows {
        w.write_record([
            r.variant.clone(),
            r.seeds.to_string(),
            r.spearman.to_string(),
            r.heldout_top1.to_string(),
            r.transfer_top1.to_string(),
            r.final_total.to_string(),
            r.finite.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
