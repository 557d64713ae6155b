//! The trainable embedding path.
//!
//! ```text
//! obs ──f_v (MLP)──► v ─┐
//!                       FiLM(v; γ(l), β(l)) ──adapter MLP──► A ──► heads
//! instruction ─table──► l ┘
//! sentence ──mean token embedding──► linear ──► P
//! ```
//!
//! Every forward pass returns a trace that the matching backward pass
//! consumes; gradients accumulate into a [`ModelParams`] of the same shape.

use crate::action_space::{parse_language, BinningConfig, Component, ParseError};
use crate::numerics::{dot, norm, Mat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension `{0}` must be positive")]
    ZeroDim(&'static str),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-canonical primitive sentence: {0}")]
    Text(#[from] ParseError),
    #[error("unknown token {0:?}")]
    Token(String),
    #[error("instruction id {id} out of range ({n} instructions)")]
    Instruction { id: usize, n: usize },
    #[error("checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelDims {
    pub obs_dim: usize,
    pub d_v: usize,
    pub d_l: usize,
    pub hidden: usize,
    /// Width of the shared action / description embedding space.
    pub embed: usize,
    pub n_instructions: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self { obs_dim: 32, d_v: 32, d_l: 32, hidden: 64, embed: 16, n_instructions: 8 }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<(), ModelError> {
        for (name, v) in [
            ("obs_dim", self.obs_dim),
            ("d_v", self.d_v),
            ("d_l", self.d_l),
            ("hidden", self.hidden),
            ("embed", self.embed),
            ("n_instructions", self.n_instructions),
        ] {
            if v == 0 {
                return Err(ModelError::ZeroDim(name));
            }
        }
        Ok(())
    }
}

/// Parameter blocks, grouped for freezing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Visual MLP, instruction table and sentence encoder.
    Encoders,
    Film,
    Adapter,
    ImitationHeads,
    ActionHead,
}

macro_rules! param_blocks {
    ($($name:ident => $group:ident),* $(,)?) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct ModelParams {
            $(pub $name: Mat,)*
        }

        impl ModelParams {
            pub const NAMES: &'static [&'static str] = &[$(stringify!($name)),*];

            pub fn blocks(&self) -> Vec<(&'static str, ParamGroup, &Mat)> {
                vec![$((stringify!($name), ParamGroup::$group, &self.$name)),*]
            }

            pub fn blocks_mut(&mut self) -> Vec<(&'static str, ParamGroup, &mut Mat)> {
                vec![$((stringify!($name), ParamGroup::$group, &mut self.$name)),*]
            }
        }
    };
}

param_blocks! {
    vis_w1 => Encoders,
    vis_b1 => Encoders,
    vis_w2 => Encoders,
    vis_b2 => Encoders,
    instr_emb => Encoders,
    tok_emb => Encoders,
    txt_w => Encoders,
    txt_b => Encoders,
    film_wg => Film,
    film_bg => Film,
    film_wb => Film,
    film_bb => Film,
    ada_w1 => Adapter,
    ada_b1 => Adapter,
    ada_w2 => Adapter,
    ada_b2 => Adapter,
    head_t_w => ImitationHeads,
    head_t_b => ImitationHeads,
    head_r_w => ImitationHeads,
    head_r_b => ImitationHeads,
    head_g_w => ImitationHeads,
    head_g_b => ImitationHeads,
    act_w => ActionHead,
    act_b => ActionHead,
}

impl ModelParams {
    /// All-zero parameters with the shapes implied by `dims`.
    pub fn zeros(dims: &ModelDims, binning: &BinningConfig) -> Self {
        let (ct, cr, cg) = binning.class_counts();
        let vocab = binning.vocabulary().len();
        let z = Mat::zeros;
        let d = dims;
        Self {
            vis_w1: z(d.hidden, d.obs_dim),
            vis_b1: z(d.hidden, 1),
            vis_w2: z(d.d_v, d.hidden),
            vis_b2: z(d.d_v, 1),
            instr_emb: z(d.n_instructions, d.d_l),
            tok_emb: z(vocab, d.d_l),
            txt_w: z(d.embed, d.d_l),
            txt_b: z(d.embed, 1),
            film_wg: z(d.d_v, d.d_l),
            film_bg: z(d.d_v, 1),
            film_wb: z(d.d_v, d.d_l),
            film_bb: z(d.d_v, 1),
            ada_w1: z(d.hidden, d.d_v),
            ada_b1: z(d.hidden, 1),
            ada_w2: z(d.embed, d.hidden),
            ada_b2: z(d.embed, 1),
            head_t_w: z(ct, d.embed),
            head_t_b: z(ct, 1),
            head_r_w: z(cr, d.embed),
            head_r_b: z(cr, 1),
            head_g_w: z(cg, d.embed),
            head_g_b: z(cg, 1),
            act_w: z(7, d.embed),
            act_b: z(7, 1),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.blocks_mut().into_iter().for_each(|(_, _, m)| m.fill(0.0));
        out
    }

    pub fn len(&self) -> usize {
        self.blocks().iter().map(|(_, _, m)| m.as_slice().len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.blocks().iter().flat_map(|(_, _, m)| m.as_slice().iter().copied()).collect()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.len(), "flat parameter length");
        let mut at = 0;
        for (_, _, m) in self.blocks_mut() {
            let n = m.as_slice().len();
            m.as_mut_slice().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
    }

    pub fn add_assign(&mut self, other: &ModelParams) {
        for ((_, _, a), (_, _, b)) in self.blocks_mut().into_iter().zip(other.blocks()) {
            a.add_assign(b);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|(_, _, m)| m.is_finite())
    }
}

/// Per-step model input: synthetic visual features and the task
/// instruction id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub features: Vec<f64>,
    pub instruction_id: usize,
}

/// Outputs of [`Model::heads`].
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs {
    pub logits_t: Vec<f64>,
    pub logits_r: Vec<f64>,
    pub logits_g: Vec<f64>,
    /// Normalized 7-DoF action prediction (see [`action_scale`]).
    pub action: Vec<f64>,
}

/// Upstream gradients for [`Model::backward_heads`]; `None` heads are skipped.
#[derive(Debug, Clone, Default)]
pub struct HeadGrads<'a> {
    pub logits_t: Option<&'a [f64]>,
    pub logits_r: Option<&'a [f64]>,
    pub logits_g: Option<&'a [f64]>,
    pub action: Option<&'a [f64]>,
}

/// Intermediate values of one action-embedding forward pass.
#[derive(Debug, Clone)]
pub struct ActionTrace {
    x: Vec<f64>,
    h1: Vec<f64>,
    v: Vec<f64>,
    instruction_id: usize,
    l: Vec<f64>,
    gamma: Vec<f64>,
    f: Vec<f64>,
    h2: Vec<f64>,
    pub a: Vec<f64>,
}

/// Per-dimension divisor mapping raw actions into the action head's
/// normalized range: the largest distance label for translation, the
/// largest angle label for rotation, 1 for the gripper.
pub fn action_scale(binning: &BinningConfig) -> [f64; 7] {
    let max = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
    let t = max(binning.labels(Component::Translation));
    let r = max(binning.labels(Component::Rotation));
    [t, t, t, r, r, r, 1.0]
}

fn affine(w: &Mat, b: &Mat, x: &[f64]) -> Vec<f64> {
    let mut y = w.matvec(x);
    y.iter_mut().zip(b.as_slice()).for_each(|(y, b)| *y += b);
    y
}

fn add_to(m: &mut Mat, v: &[f64]) {
    m.as_mut_slice().iter_mut().zip(v).for_each(|(a, b)| *a += b);
}

/// Backward through `y = W x + b`, returning `dx`.
fn affine_backward(w: &Mat, gw: &mut Mat, gb: &mut Mat, x: &[f64], dy: &[f64]) -> Vec<f64> {
    gw.add_outer(dy, x);
    add_to(gb, dy);
    w.matvec_t(dy)
}

/// `x / |x|` and `|x|`; the zero vector maps to itself.
fn unit(x: &[f64]) -> (Vec<f64>, f64) {
    let n = norm(x);
    if n == 0.0 {
        return (x.to_vec(), 0.0);
    }
    (x.iter().map(|v| v / n).collect(), n)
}

fn tanh_backward(dy: &[f64], y: &[f64]) -> Vec<f64> {
    dy.iter().zip(y).map(|(d, y)| d * (1.0 - y * y)).collect()
}

/// Feature-wise modulation `γ(l) ⊙ v + β(l)` with `γ(l) = 1 + W_γ l + b_γ`
/// and `β(l) = W_β l + b_β`. Returns the output and `γ`.
pub fn film(v: &[f64], l: &[f64], params: &ModelParams) -> (Vec<f64>, Vec<f64>) {
    let mut gamma = affine(&params.film_wg, &params.film_bg, l);
    gamma.iter_mut().for_each(|g| *g += 1.0);
    let beta = affine(&params.film_wb, &params.film_bb, l);
    let out = v.iter().zip(&gamma).zip(&beta).map(|((v, g), b)| g * v + b).collect();
    (out, gamma)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub dims: ModelDims,
    pub binning: BinningConfig,
    pub params: ModelParams,
    vocab: HashMap<String, usize>,
}

fn vocab_index(binning: &BinningConfig) -> HashMap<String, usize> {
    binning.vocabulary().into_iter().enumerate().map(|(i, w)| (w, i)).collect()
}

impl Model {
    /// Uniform `±1/√fan_in` weights, zero biases. Embedding tables are
    /// lookups of one-hot inputs and use fan-in 1.
    pub fn init(seed: u64, dims: ModelDims, binning: BinningConfig) -> Result<Self, ModelError> {
        dims.validate()?;
        binning.validate().map_err(|e| ModelError::Format(e.to_string()))?;
        let mut params = ModelParams::zeros(&dims, &binning);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, _, m) in params.blocks_mut() {
            if name.ends_with("_b") || name.ends_with("_b1") || name.ends_with("_b2") || name.starts_with("film_b") {
                continue;
            }
            let fan_in = if name.ends_with("_emb") { 1 } else { m.cols() };
            let bound = 1.0 / (fan_in as f64).sqrt();
            m.as_mut_slice().iter_mut().for_each(|w| *w = rng.random_range(-bound..=bound));
        }
        Ok(Self { vocab: vocab_index(&binning), dims, binning, params })
    }

    pub fn from_parts(dims: ModelDims, binning: BinningConfig, params: ModelParams) -> Result<Self, ModelError> {
        dims.validate()?;
        let expected = ModelParams::zeros(&dims, &binning);
        for ((name, _, want), (_, _, got)) in expected.blocks().into_iter().zip(params.blocks()) {
            if want.shape() != got.shape() {
                return Err(ModelError::Dimension(format!(
                    "{name} is {:?}, dims require {:?}",
                    got.shape(),
                    want.shape()
                )));
            }
        }
        Ok(Self { vocab: vocab_index(&binning), dims, binning, params })
    }

    fn check_obs(&self, obs: &Observation) -> Result<(), ModelError> {
        if obs.features.len() != self.dims.obs_dim {
            return Err(ModelError::Dimension(format!(
                "observation has {} features, model expects {}",
                obs.features.len(),
                self.dims.obs_dim
            )));
        }
        if obs.instruction_id >= self.dims.n_instructions {
            return Err(ModelError::Instruction { id: obs.instruction_id, n: self.dims.n_instructions });
        }
        Ok(())
    }

    pub fn forward_action(&self, obs: &Observation) -> Result<ActionTrace, ModelError> {
        self.check_obs(obs)?;
        let p = &self.params;
        let x = obs.features.clone();
        let h1: Vec<f64> = affine(&p.vis_w1, &p.vis_b1, &x).into_iter().map(f64::tanh).collect();
        let v = affine(&p.vis_w2, &p.vis_b2, &h1);
        let l = p.instr_emb.row(obs.instruction_id).to_vec();
        let (f, gamma) = film(&v, &l, p);
        let h2: Vec<f64> = affine(&p.ada_w1, &p.ada_b1, &f).into_iter().map(f64::tanh).collect();
        let a = affine(&p.ada_w2, &p.ada_b2, &h2);
        Ok(ActionTrace { x, h1, v, instruction_id: obs.instruction_id, l, gamma, f, h2, a })
    }

    /// Latent action embedding `A = MLP(FiLM(f_v(obs), f_l(instruction)))`.
    pub fn embed_action(&self, obs: &Observation) -> Result<Vec<f64>, ModelError> {
        Ok(self.forward_action(obs)?.a)
    }

    pub fn backward_action(&self, trace: &ActionTrace, d_a: &[f64], grads: &mut ModelParams) {
        let p = &self.params;
        let dh2 = affine_backward(&p.ada_w2, &mut grads.ada_w2, &mut grads.ada_b2, &trace.h2, d_a);
        let dz2 = tanh_backward(&dh2, &trace.h2);
        let df = affine_backward(&p.ada_w1, &mut grads.ada_w1, &mut grads.ada_b1, &trace.f, &dz2);

        let dv: Vec<f64> = df.iter().zip(&trace.gamma).map(|(d, g)| d * g).collect();
        let dgamma: Vec<f64> = df.iter().zip(&trace.v).map(|(d, v)| d * v).collect();
        let mut dl = affine_backward(&p.film_wg, &mut grads.film_wg, &mut grads.film_bg, &trace.l, &dgamma);
        let dl_beta = affine_backward(&p.film_wb, &mut grads.film_wb, &mut grads.film_bb, &trace.l, &df);
        dl.iter_mut().zip(&dl_beta).for_each(|(a, b)| *a += b);
        grads.instr_emb.row_mut(trace.instruction_id).iter_mut().zip(&dl).for_each(|(g, d)| *g += d);

        let dh1 = affine_backward(&p.vis_w2, &mut grads.vis_w2, &mut grads.vis_b2, &trace.h1, &dv);
        let dz1 = tanh_backward(&dh1, &trace.h1);
        grads.vis_w1.add_outer(&dz1, &trace.x);
        add_to(&mut grads.vis_b1, &dz1);
    }

    fn tokens(&self, text: &str) -> Result<Vec<usize>, ModelError> {
        parse_language(text, &self.binning)?;
        text.split_whitespace()
            .map(|t| {
                let t = t.trim_end_matches(',');
                self.vocab.get(t).copied().ok_or_else(|| ModelError::Token(t.to_string()))
            })
            .collect()
    }

    fn mean_token(&self, tokens: &[usize]) -> Vec<f64> {
        let mut e = vec![0.0; self.dims.d_l];
        for &t in tokens {
            e.iter_mut().zip(self.params.tok_emb.row(t)).for_each(|(a, b)| *a += b);
        }
        e.iter_mut().for_each(|v| *v /= tokens.len() as f64);
        e
    }

    /// Description embedding: mean token embedding, then a linear map into
    /// the action embedding space.
    pub fn embed_primitive_text(&self, text: &str) -> Result<Vec<f64>, ModelError> {
        let tokens = self.tokens(text)?;
        Ok(affine(&self.params.txt_w, &self.params.txt_b, &self.mean_token(&tokens)))
    }

    pub fn backward_primitive_text(&self, text: &str, d_p: &[f64], grads: &mut ModelParams) -> Result<(), ModelError> {
        let tokens = self.tokens(text)?;
        let e = self.mean_token(&tokens);
        let de = affine_backward(&self.params.txt_w, &mut grads.txt_w, &mut grads.txt_b, &e, d_p);
        let share = 1.0 / tokens.len() as f64;
        for &t in &tokens {
            grads.tok_emb.row_mut(t).iter_mut().zip(&de).for_each(|(g, d)| *g += d * share);
        }
        Ok(())
    }

    pub fn heads(&self, a: &[f64]) -> HeadOutputs {
        let p = &self.params;
        HeadOutputs {
            logits_t: affine(&p.head_t_w, &p.head_t_b, a),
            logits_r: affine(&p.head_r_w, &p.head_r_b, a),
            logits_g: affine(&p.head_g_w, &p.head_g_b, a),
            action: affine(&p.act_w, &p.act_b, &unit(a).0),
        }
    }

    /// Accumulates head parameter gradients and returns `dL/dA`.
    pub fn backward_heads(&self, a: &[f64], up: &HeadGrads<'_>, grads: &mut ModelParams) -> Vec<f64> {
        let p = &self.params;
        let mut da = vec![0.0; a.len()];
        let mut acc = |w: &Mat, gw: &mut Mat, gb: &mut Mat, dy: Option<&[f64]>| {
            if let Some(dy) = dy {
                let d = affine_backward(w, gw, gb, a, dy);
                da.iter_mut().zip(&d).for_each(|(x, y)| *x += y);
            }
        };
        acc(&p.head_t_w, &mut grads.head_t_w, &mut grads.head_t_b, up.logits_t);
        acc(&p.head_r_w, &mut grads.head_r_w, &mut grads.head_r_b, up.logits_r);
        acc(&p.head_g_w, &mut grads.head_g_w, &mut grads.head_g_b, up.logits_g);
        if let Some(dy) = up.action {
            let (u, n) = unit(a);
            let du = affine_backward(&p.act_w, &mut grads.act_w, &mut grads.act_b, &u, dy);
            if n > 0.0 {
                let proj = dot(&du, &u);
                da.iter_mut().zip(du.iter().zip(&u)).for_each(|(x, (g, u))| *x += (g - proj * u) / n);
            }
        }
        da
    }

    /// Continuous action prediction in raw units. The action regressor
    /// reads the unit-normalized embedding, so its scale does not depend
    /// on how far pretraining stretched `|A|`.
    pub fn predict_action(&self, obs: &Observation) -> Result<[f64; 7], ModelError> {
        let out = self.heads(&self.embed_action(obs)?).action;
        let scale = action_scale(&self.binning);
        Ok(std::array::from_fn(|k| out[k] * scale[k]))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            dims: self.dims,
            binning: self.binning.clone(),
            params: self
                .params
                .blocks()
                .into_iter()
                .map(|(name, _, m)| NamedArray {
                    name: name.to_string(),
                    rows: m.rows(),
                    cols: m.cols(),
                    data: m.as_slice().to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self, ModelError> {
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(ModelError::Format(format!("unsupported checkpoint {} v{}", ck.format, ck.version)));
        }
        ck.dims.validate()?;
        let mut params = ModelParams::zeros(&ck.dims, &ck.binning);
        let mut arrays: HashMap<String, NamedArray> = ck.params.into_iter().map(|a| (a.name.clone(), a)).collect();
        for (name, _, m) in params.blocks_mut() {
            let arr = arrays.remove(name).ok_or_else(|| ModelError::Format(format!("missing array {name}")))?;
            if (arr.rows, arr.cols) != m.shape() || arr.data.len() != arr.rows * arr.cols {
                return Err(ModelError::Dimension(format!(
                    "{name} stored as {}x{} ({} values), dims require {:?}",
                    arr.rows,
                    arr.cols,
                    arr.data.len(),
                    m.shape()
                )));
            }
            m.as_mut_slice().copy_from_slice(&arr.data);
        }
        if let Some(extra) = arrays.keys().next() {
            return Err(ModelError::Format(format!("unexpected array {extra}")));
        }
        Self::from_parts(ck.dims, ck.binning, params)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let json = serde_json::to_string(&self.to_checkpoint())?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_checkpoint(serde_json::from_str(&text)?)
    }
}

pub const CHECKPOINT_FORMAT: &str = "lada-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// Versioned on-disk form of a [`Model`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub dims: ModelDims,
    pub binning: BinningConfig,
    pub params: Vec<NamedArray>,
}
