//! Synthetic multi-task manipulation data.
//!
//! A task is an ordered list of phases, each holding one primitive triple
//! for a fixed number of steps. A `sharing` fraction of every task's phases
//! comes from a suite-wide pool; the rest are unique to the task. Per step
//! the generator emits observation features, a noisy continuous action that
//! still discretizes to the phase template, and the template's sentence.
//!
//! Observation features are the sum of
//! * a suite-wide ("world") linear map of the one-hot primitive classes,
//!   shared by every task, so primitive identity is visible across tasks;
//! * a task-specific linear map of (one-hot phase index, step-in-phase
//!   fraction), a nuisance that differs between tasks;
//! * isotropic Gaussian noise.

use crate::action_space::{
    class_indices, discretize, parse_language, render_language, triple_from_indices, Action7, ActionError,
    BinningConfig, ClassIndices, Component, Primitive, PrimitiveTriple,
};
use crate::model::Observation;
use crate::numerics::Mat;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid suite config: {0}")]
    Config(String),
    #[error("infeasible suite: {0}")]
    Infeasible(String),
    #[error(transparent)]
    Action(#[from] ActionError),
    #[error("line {line}: {message} (last good line: {last_good})")]
    Malformed { line: usize, last_good: usize, message: String },
    #[error("dataset has no header line")]
    MissingHeader,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub template: PrimitiveTriple,
    pub duration: usize,
    /// Per-dimension action noise σ for dx, dy, dz (m) and rx, ry, rz (deg).
    pub noise: [f64; 6],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: usize,
    pub instruction: String,
    pub phases: Vec<Phase>,
    /// Seed of the task-specific observation map.
    pub obs_projection: u64,
    /// Held out of pretraining entirely; built from shared templates only.
    #[serde(default)]
    pub transfer: bool,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.phases.is_empty() {
            return Err(DataError::Config(format!("task {} has no phases", self.id)));
        }
        for p in &self.phases {
            if p.duration == 0 {
                return Err(DataError::Config(format!("task {} has a zero-length phase", self.id)));
            }
            if p.noise.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
                return Err(DataError::Config(format!("task {} has a negative noise level", self.id)));
            }
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.phases.iter().map(|p| p.duration).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteConfig {
    pub n_tasks: usize,
    /// Fraction of each task's phases drawn from the shared pool.
    pub sharing: f64,
    pub phases_per_task: usize,
    /// Number of templates in the shared pool.
    pub pool_size: usize,
    /// Distinct translation (and rotation) primitives the suite draws from.
    pub component_choices: usize,
    pub phase_duration: usize,
    /// Action noise σ relative to each template's bin label.
    pub action_noise: f64,
    pub obs_dim: usize,
    pub obs_noise: f64,
    /// Scale of the task-specific observation map.
    pub nuisance: f64,
    /// Append one transfer task built from shared templates.
    pub transfer_task: bool,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            n_tasks: 4,
            sharing: 0.5,
            phases_per_task: 4,
            pool_size: 4,
            component_choices: 6,
            phase_duration: 10,
            action_noise: 0.2,
            obs_dim: 32,
            obs_noise: 0.1,
            nuisance: 0.5,
            transfer_task: true,
        }
    }
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Config(m.to_string()));
        if self.n_tasks < 2 {
            return bad("n_tasks must be at least 2");
        }
        if !(0.0..=1.0).contains(&self.sharing) {
            return bad("sharing must lie in [0, 1]");
        }
        if self.phases_per_task == 0 || self.phase_duration == 0 || self.obs_dim == 0 {
            return bad("phases_per_task, phase_duration and obs_dim must be positive");
        }
        if self.component_choices == 0 {
            return bad("component_choices must be positive");
        }
        for (name, v) in [("action_noise", self.action_noise), ("obs_noise", self.obs_noise), ("nuisance", self.nuisance)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(DataError::Config(format!("{name} must be non-negative")));
            }
        }
        Ok(())
    }

    /// Phases per task taken from the shared pool.
    pub fn shared_phases(&self) -> usize {
        (self.sharing * self.phases_per_task as f64).round() as usize
    }
}

/// A generated task suite plus everything needed to regenerate its data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suite {
    pub seed: u64,
    pub config: SuiteConfig,
    pub binning: BinningConfig,
    pub pool: Vec<PrimitiveTriple>,
    pub tasks: Vec<TaskSpec>,
}

/// SplitMix64 finalizer, used to derive independent sub-seeds.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const VERBS: [&str; 8] = ["pick up", "push", "place", "slide", "lift", "rotate", "stack", "open"];
const OBJECTS: [&str; 8] = ["red block", "blue mug", "drawer", "bowl", "lid", "green cup", "sponge", "box"];

fn phase_noise(t: &PrimitiveTriple, cfg: &BinningConfig, rel: f64) -> [f64; 6] {
    let level = |p: Primitive, c: Component| match p.dir {
        None => rel * cfg.epsilon(c),
        Some(_) => rel * cfg.labels(c)[p.mag_bin],
    };
    let st = level(t.trans, Component::Translation);
    let sr = level(t.rot, Component::Rotation);
    [st, st, st, sr, sr, sr]
}

fn make_phases(templates: &[PrimitiveTriple], cfg: &SuiteConfig, binning: &BinningConfig) -> Vec<Phase> {
    templates
        .iter()
        .map(|t| Phase { template: *t, duration: cfg.phase_duration, noise: phase_noise(t, binning, cfg.action_noise) })
        .collect()
}

/// Builds a deterministic task suite.
pub fn build_suite(seed: u64, cfg: &SuiteConfig, binning: &BinningConfig) -> Result<Suite, DataError> {
    cfg.validate()?;
    binning.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (nt, nr, _) = binning.class_counts();
    if cfg.component_choices > nt.min(nr) {
        return Err(DataError::Infeasible(format!(
            "component_choices {} exceeds the {} available primitives",
            cfg.component_choices,
            nt.min(nr)
        )));
    }
    let n_shared = cfg.shared_phases();
    let n_unique = cfg.phases_per_task - n_shared;
    let pool_size = if n_shared > 0 { cfg.pool_size } else { 0 };
    if n_shared > pool_size {
        return Err(DataError::Infeasible(format!(
            "each task needs {n_shared} shared phases but the pool holds {pool_size}"
        )));
    }
    let combos = cfg.component_choices * cfg.component_choices * 2;
    let needed = pool_size + cfg.n_tasks * n_unique;
    if needed > combos {
        return Err(DataError::Infeasible(format!("{needed} distinct templates needed, only {combos} exist")));
    }

    let mut t_ids: Vec<usize> = (0..nt).collect();
    let mut r_ids: Vec<usize> = (0..nr).collect();
    t_ids.shuffle(&mut rng);
    r_ids.shuffle(&mut rng);
    t_ids.truncate(cfg.component_choices);
    r_ids.truncate(cfg.component_choices);

    let mut catalog: Vec<PrimitiveTriple> = Vec::with_capacity(combos);
    for &t in &t_ids {
        for &r in &r_ids {
            for g in 0..2 {
                catalog.push(triple_from_indices(ClassIndices { t, r, g }, binning)?);
            }
        }
    }
    catalog.shuffle(&mut rng);
    let mut fresh = catalog.into_iter();
    let pool: Vec<PrimitiveTriple> = fresh.by_ref().take(pool_size).collect();

    let mut tasks = Vec::with_capacity(cfg.n_tasks + 1);
    for id in 0..cfg.n_tasks {
        let mut templates: Vec<PrimitiveTriple> = pool.choose_multiple(&mut rng, n_shared).copied().collect();
        templates.extend(fresh.by_ref().take(n_unique));
        templates.shuffle(&mut rng);
        let instruction = format!(
            "{} the {} (task {id})",
            VERBS[rng.random_range(0..VERBS.len())],
            OBJECTS[rng.random_range(0..OBJECTS.len())]
        );
        tasks.push(TaskSpec {
            id,
            instruction,
            phases: make_phases(&templates, cfg, binning),
            obs_projection: rng.random(),
            transfer: false,
        });
    }

    if cfg.transfer_task {
        let used: BTreeSet<PrimitiveTriple> =
            tasks.iter().flat_map(|t| t.phases.iter().map(|p| p.template)).filter(|t| pool.contains(t)).collect();
        if used.is_empty() {
            return Err(DataError::Infeasible("a transfer task needs sharing > 0".into()));
        }
        let mut used: Vec<PrimitiveTriple> = used.into_iter().collect();
        used.shuffle(&mut rng);
        let templates: Vec<PrimitiveTriple> = used.iter().cycle().take(cfg.phases_per_task).copied().collect();
        let id = cfg.n_tasks;
        tasks.push(TaskSpec {
            id,
            instruction: format!("{} the {} (task {id})", VERBS[id % VERBS.len()], OBJECTS[(id * 3) % OBJECTS.len()]),
            phases: make_phases(&templates, cfg, binning),
            obs_projection: rng.random(),
            transfer: true,
        });
    }

    Ok(Suite { seed, config: cfg.clone(), binning: binning.clone(), pool, tasks })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub features: Vec<f64>,
    pub action: Action7,
    pub phase: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub task_id: usize,
    pub steps: Vec<Step>,
}

/// Forces an action component back inside its template's bin: the
/// dominant axis is clamped into the bin interval, the others to half its
/// magnitude.
fn clamp_component(v: &mut [f64], prim: Primitive, cfg: &BinningConfig, c: Component) {
    let eps = cfg.epsilon(c);
    match prim.dir {
        None => v.iter_mut().for_each(|x| *x = x.clamp(-0.5 * eps, 0.5 * eps)),
        Some(d) => {
            let (lo, hi) = cfg.bin_bounds(c, prim.mag_bin);
            let k = d.axis();
            let mut mag = (d.sign() * v[k]).max(lo);
            if hi.is_finite() {
                mag = mag.min(lo + (hi - lo) * 0.999);
            }
            v[k] = d.sign() * mag;
            for (j, x) in v.iter_mut().enumerate() {
                if j != k {
                    *x = x.clamp(-0.5 * mag, 0.5 * mag);
                }
            }
        }
    }
}

fn sample_action(
    template: &PrimitiveTriple,
    noise: &[f64; 6],
    cfg: &BinningConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Action7, DataError> {
    let center = template.center_action(cfg).to_array();
    let mut v = [0.0; 6];
    for _ in 0..10 {
        for k in 0..6 {
            v[k] = center[k] + noise[k] * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
        let a = Action7 { dx: v[0], dy: v[1], dz: v[2], rx: v[3], ry: v[4], rz: v[5], g: template.grip };
        if discretize(&a, cfg)? == *template {
            return Ok(a);
        }
    }
    clamp_component(&mut v[..3], template.trans, cfg, Component::Translation);
    clamp_component(&mut v[3..], template.rot, cfg, Component::Rotation);
    Ok(Action7 { dx: v[0], dy: v[1], dz: v[2], rx: v[3], ry: v[4], rz: v[5], g: template.grip })
}

/// Linear maps behind the observation features.
struct ObsMaps {
    world: Mat,
    task: Mat,
}

impl Suite {
    pub fn task(&self, id: usize) -> Option<&TaskSpec> {
        self.tasks.iter().find(|t| t.id == id)
    }

    fn max_phases(&self) -> usize {
        self.tasks.iter().map(|t| t.phases.len()).max().unwrap_or(1)
    }

    fn obs_maps(&self, task: &TaskSpec) -> ObsMaps {
        let (nt, nr, ng) = self.binning.class_counts();
        let code = nt + nr + ng;
        let std = Normal::new(0.0, 1.0).expect("unit normal");
        let mut wr = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, 0xB0B));
        let scale = 1.0 / 3f64.sqrt();
        let world = Mat::from_fn(self.config.obs_dim, code, |_, _| scale * std.sample(&mut wr));
        let mut tr = ChaCha8Rng::seed_from_u64(task.obs_projection);
        let nuisance = self.config.nuisance;
        let task_map = Mat::from_fn(self.config.obs_dim, self.max_phases() + 1, |_, _| nuisance * std.sample(&mut tr));
        ObsMaps { world, task: task_map }
    }

    fn features(&self, maps: &ObsMaps, idx: ClassIndices, phase: usize, frac: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let (nt, nr, _) = self.binning.class_counts();
        let phase_col = maps.task.cols() - 1;
        (0..self.config.obs_dim)
            .map(|i| {
                maps.world[(i, idx.t)]
                    + maps.world[(i, nt + idx.r)]
                    + maps.world[(i, nt + nr + idx.g)]
                    + maps.task[(i, phase)]
                    + maps.task[(i, phase_col)] * frac
                    + self.config.obs_noise * rng.sample::<f64, _>(rand_distr::StandardNormal)
            })
            .collect()
    }

    /// One episode of `task`; identical `(task, seed)` give identical output.
    pub fn generate_episode(&self, task: &TaskSpec, seed: u64) -> Result<Episode, DataError> {
        task.validate()?;
        let maps = self.obs_maps(task);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut steps = Vec::with_capacity(task.steps());
        for (pi, phase) in task.phases.iter().enumerate() {
            let idx = class_indices(&phase.template, &self.binning)?;
            for s in 0..phase.duration {
                let action = sample_action(&phase.template, &phase.noise, &self.binning, &mut rng)?;
                let frac = s as f64 / phase.duration as f64;
                let features = self.features(&maps, idx, pi, frac, &mut rng);
                steps.push(Step { features, action, phase: pi });
            }
        }
        Ok(Episode { task_id: task.id, steps })
    }

    /// Seed of episode `index` of task `task_id` under dataset seed `seed`.
    pub fn episode_seed(seed: u64, task_id: usize, index: usize) -> u64 {
        mix_seed(mix_seed(seed, task_id as u64 + 1), index as u64 + 1)
    }

    /// `episodes_per_task` episodes of every task, generated in parallel
    /// and emitted in (task, episode) order.
    pub fn generate_dataset(&self, episodes_per_task: usize, seed: u64) -> Result<Dataset, DataError> {
        let jobs: Vec<(usize, usize)> =
            (0..self.tasks.len()).flat_map(|t| (0..episodes_per_task).map(move |e| (t, e))).collect();
        let episodes: Vec<Episode> = jobs
            .par_iter()
            .map(|&(t, e)| {
                let task = &self.tasks[t];
                self.generate_episode(task, Self::episode_seed(seed, task.id, e))
            })
            .collect::<Result<_, _>>()?;
        let mut records = Vec::new();
        for ((t, e), ep) in jobs.iter().zip(episodes) {
            let task = &self.tasks[*t];
            for (k, step) in ep.steps.into_iter().enumerate() {
                let triple = task.phases[step.phase].template;
                records.push(StepRecord {
                    task_id: task.id,
                    episode: *e,
                    step: k,
                    instruction: task.instruction.clone(),
                    obs: step.features,
                    action: step.action.to_array(),
                    primitive_text: render_language(&triple, &self.binning)?,
                });
            }
        }
        Ok(Dataset { header: self.header(), records })
    }

    pub fn header(&self) -> DatasetHeader {
        DatasetHeader {
            format: DATASET_FORMAT.to_string(),
            version: DATASET_VERSION,
            obs_dim: self.config.obs_dim,
            binning: self.binning.clone(),
            tasks: self
                .tasks
                .iter()
                .map(|t| TaskInfo { id: t.id, instruction: t.instruction.clone(), transfer: t.transfer })
                .collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

pub const DATASET_FORMAT: &str = "lada-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInfo {
    pub id: usize,
    pub instruction: String,
    pub transfer: bool,
}

/// First line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub obs_dim: usize,
    pub binning: BinningConfig,
    pub tasks: Vec<TaskInfo>,
}

/// One step of one episode, as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub task_id: usize,
    pub episode: usize,
    pub step: usize,
    pub instruction: String,
    pub obs: Vec<f64>,
    pub action: [f64; 7],
    pub primitive_text: String,
}

impl StepRecord {
    pub fn observation(&self) -> Observation {
        Observation { features: self.obs.clone(), instruction_id: self.task_id }
    }

    pub fn action7(&self) -> Result<Action7, ActionError> {
        Action7::from_slice(&self.action)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<StepRecord>,
}

/// Record indices of a dataset partitioned for pretraining and evaluation.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Splits {
    /// Early episodes of ordinary tasks.
    pub train: Vec<usize>,
    /// The last episodes of each ordinary task.
    pub heldout: Vec<usize>,
    /// Every step of transfer tasks.
    pub transfer: Vec<usize>,
}

impl Dataset {
    pub fn n_tasks(&self) -> usize {
        self.header.tasks.len()
    }

    pub fn is_transfer(&self, task_id: usize) -> bool {
        self.header.tasks.iter().any(|t| t.id == task_id && t.transfer)
    }

    /// Holds out the last `ceil(holdout · episodes)` episodes of each
    /// ordinary task.
    pub fn split(&self, holdout: f64) -> Splits {
        let mut per_task: std::collections::BTreeMap<usize, usize> = Default::default();
        for r in &self.records {
            let e = per_task.entry(r.task_id).or_default();
            *e = (*e).max(r.episode + 1);
        }
        let mut out = Splits::default();
        for (i, r) in self.records.iter().enumerate() {
            if self.is_transfer(r.task_id) {
                out.transfer.push(i);
                continue;
            }
            let n = per_task[&r.task_id];
            let held = ((holdout * n as f64).ceil() as usize).min(n.saturating_sub(1));
            if r.episode >= n - held {
                out.heldout.push(i);
            } else {
                out.train.push(i);
            }
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), DataError> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), DataError> {
        serde_json::to_writer(&mut *w, &self.header)?;
        writeln!(w)?;
        for r in &self.records {
            serde_json::to_writer(&mut *w, r)?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, DataError> {
        Self::read_from(BufReader::new(std::fs::File::open(path)?))
    }

    /// Parses and validates a dataset; errors carry 1-based line numbers.
    pub fn read_from<R: BufRead>(reader: R) -> Result<Self, DataError> {
        let mut lines = reader.lines().enumerate();
        let (_, first) = lines.next().ok_or(DataError::MissingHeader)?;
        let malformed = |line: usize, message: String| DataError::Malformed { line, last_good: line - 1, message };
        let header: DatasetHeader = serde_json::from_str(&first?).map_err(|e| malformed(1, e.to_string()))?;
        if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
            return Err(malformed(1, format!("unsupported dataset {} v{}", header.format, header.version)));
        }
        header.binning.validate().map_err(|e| malformed(1, e.to_string()))?;
        let mut records = Vec::new();
        for (k, line) in lines {
            let n = k + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: StepRecord = serde_json::from_str(&line).map_err(|e| malformed(n, e.to_string()))?;
            if r.obs.len() != header.obs_dim {
                return Err(malformed(n, format!("obs has {} values, header says {}", r.obs.len(), header.obs_dim)));
            }
            if !header.tasks.iter().any(|t| t.id == r.task_id) {
                return Err(malformed(n, format!("unknown task id {}", r.task_id)));
            }
            parse_language(&r.primitive_text, &header.binning).map_err(|e| malformed(n, e.to_string()))?;
            r.action7().map_err(|e| malformed(n, e.to_string()))?;
            records.push(r);
        }
        Ok(Self { header, records })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affinity::{similarity_matrix, AffinityWeights};

    fn suite(seed: u64, sharing: f64) -> Suite {
        let cfg = SuiteConfig { sharing, ..SuiteConfig::default() };
        build_suite(seed, &cfg, &BinningConfig::default()).unwrap()
    }

    fn ordinary(s: &Suite) -> impl Iterator<Item = &TaskSpec> {
        s.tasks.iter().filter(|t| !t.transfer)
    }

    #[test]
    fn full_sharing_draws_only_from_pool() {
        let s = suite(1, 1.0);
        for t in ordinary(&s) {
            assert!(t.phases.iter().all(|p| s.pool.contains(&p.template)));
        }
    }

    #[test]
    fn zero_sharing_has_no_common_templates() {
        let b = BinningConfig::default();
        let cfg = SuiteConfig { sharing: 0.0, ..SuiteConfig::default() };
        assert!(matches!(build_suite(2, &cfg, &b), Err(DataError::Infeasible(_))), "transfer needs a pool");
        let cfg = SuiteConfig { sharing: 0.0, transfer_task: false, ..SuiteConfig::default() };
        let s = build_suite(2, &cfg, &b).unwrap();
        for (i, a) in s.tasks.iter().enumerate() {
            for other in &s.tasks[i + 1..] {
                for pa in &a.phases {
                    assert!(other.phases.iter().all(|pb| pb.template != pa.template));
                }
            }
        }
    }

    #[test]
    fn suites_are_seed_deterministic() {
        assert_eq!(suite(5, 0.5), suite(5, 0.5));
        assert_ne!(suite(5, 0.5), suite(6, 0.5));
    }

    #[test]
    fn infeasible_configs_rejected() {
        let b = BinningConfig::default();
        let cfg = SuiteConfig { sharing: 1.0, pool_size: 2, ..SuiteConfig::default() };
        assert!(matches!(build_suite(0, &cfg, &b), Err(DataError::Infeasible(_))));
        let cfg = SuiteConfig { sharing: 0.0, component_choices: 1, ..SuiteConfig::default() };
        assert!(matches!(build_suite(0, &cfg, &b), Err(DataError::Infeasible(_))));
        let cfg = SuiteConfig { n_tasks: 1, ..SuiteConfig::default() };
        assert!(matches!(build_suite(0, &cfg, &b), Err(DataError::Config(_))));
        let cfg = SuiteConfig { sharing: 1.5, ..SuiteConfig::default() };
        assert!(matches!(build_suite(0, &cfg, &b), Err(DataError::Config(_))));
    }

    #[test]
    fn transfer_task_uses_shared_templates_only() {
        let s = suite(3, 0.5);
        let transfer: Vec<_> = s.tasks.iter().filter(|t| t.transfer).collect();
        assert_eq!(transfer.len(), 1);
        let seen: BTreeSet<_> = ordinary(&s).flat_map(|t| t.phases.iter().map(|p| p.template)).collect();
        for p in &transfer[0].phases {
            assert!(s.pool.contains(&p.template) && seen.contains(&p.template));
        }
    }

    #[test]
    fn noiseless_episode_sits_on_bin_centers() {
        let cfg = SuiteConfig { action_noise: 0.0, ..SuiteConfig::default() };
        let s = build_suite(4, &cfg, &BinningConfig::default()).unwrap();
        let task = &s.tasks[0];
        let ep = s.generate_episode(task, 9).unwrap();
        assert_eq!(ep.steps.len(), task.steps());
        for st in &ep.steps {
            assert_eq!(st.action, task.phases[st.phase].template.center_action(&s.binning));
        }
    }

    #[test]
    fn every_action_rediscretizes_to_its_template() {
        for seed in 0..5 {
            let cfg = SuiteConfig { action_noise: 0.6, ..SuiteConfig::default() };
            let s = build_suite(seed, &cfg, &BinningConfig::default()).unwrap();
            for task in &s.tasks {
                for e in 0..5 {
                    let ep = s.generate_episode(task, e).unwrap();
                    for st in &ep.steps {
                        assert_eq!(discretize(&st.action, &s.binning).unwrap(), task.phases[st.phase].template);
                    }
                }
            }
        }
    }

    #[test]
    fn clamp_restores_bin_membership() {
        let b = BinningConfig::default();
        let template = triple_from_indices(ClassIndices { t: 5, r: 14, g: 1 }, &b).unwrap();
        let noise = [10.0; 6];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let a = sample_action(&template, &noise, &b, &mut rng).unwrap();
            assert_eq!(discretize(&a, &b).unwrap(), template);
        }
        let idle = triple_from_indices(ClassIndices { t: 0, r: 0, g: 0 }, &b).unwrap();
        for _ in 0..50 {
            let a = sample_action(&idle, &noise, &b, &mut rng).unwrap();
            assert_eq!(discretize(&a, &b).unwrap(), idle);
        }
    }

    #[test]
    fn episodes_are_reproducible() {
        let s = suite(7, 0.5);
        assert_eq!(s.generate_episode(&s.tasks[1], 3).unwrap(), s.generate_episode(&s.tasks[1], 3).unwrap());
        assert_ne!(s.generate_episode(&s.tasks[1], 3).unwrap(), s.generate_episode(&s.tasks[1], 4).unwrap());
    }

    #[test]
    fn dataset_round_trip_and_text_consistency() {
        let cfg = SuiteConfig { n_tasks: 3, ..SuiteConfig::default() };
        let s = build_suite(8, &cfg, &BinningConfig::default()).unwrap();
        let ds = s.generate_dataset(2, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        ds.write(&path).unwrap();
        let back = Dataset::read(&path).unwrap();
        assert_eq!(back, ds);
        for r in &back.records {
            let from_text = parse_language(&r.primitive_text, &back.header.binning).unwrap();
            assert_eq!(from_text, discretize(&r.action7().unwrap(), &back.header.binning).unwrap());
        }
        assert_eq!(ds, s.generate_dataset(2, 1).unwrap());
    }

    #[test]
    fn truncated_file_names_last_good_line() {
        let s = suite(9, 0.5);
        let ds = s.generate_dataset(1, 0).unwrap();
        let mut buf = Vec::new();
        ds.write_to(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let cut = &text[..text.len() - 40];
        let lines = cut.lines().count();
        match Dataset::read_from(cut.as_bytes()) {
            Err(DataError::Malformed { line, last_good, .. }) => {
                assert_eq!(line, lines);
                assert_eq!(last_good, lines - 1);
            }
            other => panic!("expected malformed error, got {other:?}"),
        }
        assert!(matches!(Dataset::read_from("".as_bytes()), Err(DataError::MissingHeader)));
    }

    #[test]
    fn split_holds_out_last_episodes() {
        let s = suite(10, 0.5);
        let ds = s.generate_dataset(10, 0).unwrap();
        let sp = ds.split(0.2);
        assert_eq!(sp.train.len() + sp.heldout.len() + sp.transfer.len(), ds.records.len());
        for &i in &sp.heldout {
            assert!(ds.records[i].episode >= 8);
        }
        for &i in &sp.train {
            assert!(ds.records[i].episode < 8 && !ds.is_transfer(ds.records[i].task_id));
        }
        assert!(sp.transfer.iter().all(|&i| ds.records[i].task_id == 4));
    }

    #[test]
    fn cross_task_exact_matches_grow_with_sharing() {
        let b = BinningConfig::default();
        let frac = |sharing: f64| {
            let mut hits = 0usize;
            let mut total = 0usize;
            for seed in 0..40 {
                let cfg = SuiteConfig { sharing, transfer_task: false, ..SuiteConfig::default() };
                let s = build_suite(seed, &cfg, &b).unwrap();
                let mut triples = Vec::new();
                let mut owner = Vec::new();
                for t in &s.tasks {
                    for p in &t.phases {
                        triples.push(p.template);
                        owner.push(t.id);
                    }
                }
                let sm = similarity_matrix(&triples, &AffinityWeights::default()).unwrap();
                for i in 0..triples.len() {
                    for j in 0..triples.len() {
                        if owner[i] != owner[j] {
                            total += 1;
                            hits += usize::from(sm.matrix()[(i, j)] == 1.0);
                        }
                    }
                }
            }
            hits as f64 / total as f64
        };
        let levels: Vec<f64> = [0.0, 0.25, 0.5, 0.75, 1.0].iter().map(|&s| frac(s)).collect();
        assert_eq!(levels[0], 0.0);
        assert!(levels.windows(2).all(|w| w[0] < w[1]), "{levels:?}");
    }
}
