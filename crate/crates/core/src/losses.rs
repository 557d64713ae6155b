//! Contrastive, imitation and regression objectives with analytic
//! gradients.
//!
//! All losses are batch means. Gradients are returned in the order the
//! inputs were passed.

use crate::action_space::ClassIndices;
use crate::numerics::{dot, log_softmax, normalize_rows, softmax, Mat, NumericsError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("target row {row} sums to {sum}, expected 1")]
    TargetRow { row: usize, sum: f64 },
    #[error("target row {row} has a negative or non-finite entry")]
    TargetEntry { row: usize },
    #[error("label {label} out of range for {head} head with {classes} classes (row {row})")]
    Label { head: &'static str, row: usize, label: usize, classes: usize },
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("empty batch")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastiveConfig {
    pub tau: f64,
    pub lambda: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self { tau: 0.07, lambda: 1.0 }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(LossError::Temperature(self.tau));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(LossError::Shape(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// A scalar loss and its gradient with respect to each input.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grads: Vec<Mat>,
}

const TARGET_TOL: f64 = 1e-9;

fn check_tau(tau: f64) -> Result<(), LossError> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(LossError::Temperature(tau))
    }
}

/// Back-propagates `g = dL/dx̂` through `x̂ = x / |x|`.
fn through_normalization(g: &[f64], unit: &[f64], norm: f64) -> Vec<f64> {
    let proj = dot(g, unit);
    g.iter().zip(unit).map(|(gi, ui)| (gi - proj * ui) / norm).collect()
}

/// Soft-label InfoNCE over cosine logits:
/// `-(1/N) Σ_i Σ_j T_ij log softmax_j(cos(a_i, c_j) / τ)`.
pub fn soft_infonce(anchors: &Mat, candidates: &Mat, target: &Mat, tau: f64) -> Result<LossValue, LossError> {
    check_tau(tau)?;
    let (n, k) = (anchors.rows(), candidates.rows());
    if n == 0 || k == 0 {
        return Err(LossError::Empty);
    }
    if anchors.cols() != candidates.cols() {
        return Err(LossError::Shape(format!(
            "anchor width {} vs candidate width {}",
            anchors.cols(),
            candidates.cols()
        )));
    }
    if target.shape() != (n, k) {
        return Err(LossError::Shape(format!("target is {:?}, expected ({n}, {k})", target.shape())));
    }
    for i in 0..n {
        let row = target.row(i);
        if row.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return Err(LossError::TargetEntry { row: i });
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > TARGET_TOL {
            return Err(LossError::TargetRow { row: i, sum });
        }
    }
    let (au, an) = normalize_rows(anchors, "anchors")?;
    let (cu, cn) = normalize_rows(candidates, "candidates")?;

    let d = anchors.cols();
    let mut value = 0.0;
    // dL/dsim
    let mut gsim = Mat::zeros(n, k);
    for i in 0..n {
        let z: Vec<f64> = (0..k).map(|j| dot(au.row(i), cu.row(j)) / tau).collect();
        let logp = log_softmax(&z);
        let row_mass: f64 = target.row(i).iter().sum();
        for j in 0..k {
            let t = target[(i, j)];
            if t > 0.0 {
                value -= t * logp[j];
            }
            gsim[(i, j)] = (logp[j].exp() * row_mass - t) / (n as f64 * tau);
        }
    }
    value /= n as f64;

    let mut ga = Mat::zeros(n, d);
    let mut gc_unit = Mat::zeros(k, d);
    for i in 0..n {
        let mut g = vec![0.0; d];
        for j in 0..k {
            let w = gsim[(i, j)];
            for (gx, c) in g.iter_mut().zip(cu.row(j)) {
                *gx += w * c;
            }
            for (gx, a) in gc_unit.row_mut(j).iter_mut().zip(au.row(i)) {
                *gx += w * a;
            }
        }
        ga.row_mut(i).copy_from_slice(&through_normalization(&g, au.row(i), an[i]));
    }
    let mut gc = Mat::zeros(k, d);
    for j in 0..k {
        gc.row_mut(j).copy_from_slice(&through_normalization(gc_unit.row(j), cu.row(j), cn[j]));
    }
    Ok(LossValue { value, grads: vec![ga, gc] })
}

/// Standard InfoNCE with one positive candidate per anchor.
pub fn info_nce(anchors: &Mat, candidates: &Mat, positives: &[usize], tau: f64) -> Result<LossValue, LossError> {
    check_tau(tau)?;
    let (n, k, d) = (anchors.rows(), candidates.rows(), anchors.cols());
    if n == 0 || k == 0 {
        return Err(LossError::Empty);
    }
    if candidates.cols() != d || positives.len() != n {
        return Err(LossError::Shape("anchors, candidates and positives disagree".into()));
    }
    if let Some((row, &label)) = positives.iter().enumerate().find(|(_, &p)| p >= k) {
        return Err(LossError::Label { head: "contrastive", row, label, classes: k });
    }
    let (au, an) = normalize_rows(anchors, "anchors")?;
    let (cu, cn) = normalize_rows(candidates, "candidates")?;
    let scale = 1.0 / (n as f64 * tau);
    let mut value = 0.0;
    let mut ga_unit = Mat::zeros(n, d);
    let mut gc_unit = Mat::zeros(k, d);
    for i in 0..n {
        let z: Vec<f64> = (0..k).map(|j| dot(au.row(i), cu.row(j)) / tau).collect();
        let p = softmax(&z);
        value -= log_softmax(&z)[positives[i]];
        for j in 0..k {
            let w = (p[j] - f64::from(u8::from(j == positives[i]))) * scale;
            for t in 0..d {
                ga_unit[(i, t)] += w * cu[(j, t)];
                gc_unit[(j, t)] += w * au[(i, t)];
            }
        }
    }
    let mut ga = Mat::zeros(n, d);
    for i in 0..n {
        ga.row_mut(i).copy_from_slice(&through_normalization(ga_unit.row(i), au.row(i), an[i]));
    }
    let mut gc = Mat::zeros(k, d);
    for j in 0..k {
        gc.row_mut(j).copy_from_slice(&through_normalization(gc_unit.row(j), cu.row(j), cn[j]));
    }
    Ok(LossValue { value: value / n as f64, grads: vec![ga, gc] })
}

/// Action-action branch: anchors and candidates are both `a`; the returned
/// single gradient sums both roles.
pub fn loss_action_action(a: &Mat, target: &Mat, tau: f64) -> Result<LossValue, LossError> {
    let mut lv = soft_infonce(a, a, target, tau)?;
    let gc = lv.grads.pop().expect("two grads");
    lv.grads[0].add_assign(&gc);
    Ok(lv)
}

/// Action-description branch. `p` holds one row per distinct description.
pub fn loss_action_primitive(a: &Mat, p: &Mat, target: &Mat, tau: f64) -> Result<LossValue, LossError> {
    soft_infonce(a, p, target, tau)
}

pub fn contrastive_total(l_a: f64, l_m: f64, lambda: f64) -> f64 {
    l_a + lambda * l_m
}

fn cross_entropy_head(
    logits: &Mat,
    labels: impl Iterator<Item = usize>,
    head: &'static str,
    n: usize,
) -> Result<(f64, Mat), LossError> {
    if logits.rows() != n {
        return Err(LossError::Shape(format!("{head} logits have {} rows for {n} labels", logits.rows())));
    }
    let classes = logits.cols();
    let mut grad = Mat::zeros(n, classes);
    let mut value = 0.0;
    for (row, label) in labels.enumerate() {
        if label >= classes {
            return Err(LossError::Label { head, row, label, classes });
        }
        let p = softmax(logits.row(row));
        value -= log_softmax(logits.row(row))[label];
        for (j, g) in grad.row_mut(row).iter_mut().enumerate() {
            *g = (p[j] - f64::from(u8::from(j == label))) / n as f64;
        }
    }
    Ok((value / n as f64, grad))
}

/// Mean over the batch of the summed translation, rotation and gripper
/// cross-entropies.
pub fn imitation_loss(
    logits_t: &Mat,
    logits_r: &Mat,
    logits_g: &Mat,
    labels: &[ClassIndices],
) -> Result<LossValue, LossError> {
    let n = labels.len();
    if n == 0 {
        return Err(LossError::Empty);
    }
    let (vt, gt) = cross_entropy_head(logits_t, labels.iter().map(|l| l.t), "translation", n)?;
    let (vr, gr) = cross_entropy_head(logits_r, labels.iter().map(|l| l.r), "rotation", n)?;
    let (vg, gg) = cross_entropy_head(logits_g, labels.iter().map(|l| l.g), "gripper", n)?;
    Ok(LossValue { value: vt + vr + vg, grads: vec![gt, gr, gg] })
}

/// Mean absolute error over every entry; subgradient is 0 at ties.
pub fn l1_trajectory_loss(pred: &Mat, target: &Mat) -> Result<LossValue, LossError> {
    if pred.shape() != target.shape() {
        return Err(LossError::Shape(format!("pred {:?} vs target {:?}", pred.shape(), target.shape())));
    }
    let count = pred.as_slice().len();
    if count == 0 {
        return Err(LossError::Empty);
    }
    let mut grad = Mat::zeros(pred.rows(), pred.cols());
    let mut value = 0.0;
    for ((g, p), t) in grad.as_mut_slice().iter_mut().zip(pred.as_slice()).zip(target.as_slice()) {
        let diff = p - t;
        value += diff.abs();
        *g = if diff > 0.0 {
            1.0
        } else if diff < 0.0 {
            -1.0
        } else {
            0.0
        } / count as f64;
    }
    Ok(LossValue { value: value / count as f64, grads: vec![grad] })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affinity::{row_normalize, similarity_matrix, AffinityWeights, SelfMode};
    use crate::action_space::{triple_from_indices, BinningConfig};
    use crate::numerics::{finite_diff_grad, max_relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const H: f64 = 1e-5;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
        Mat::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_target(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Mat {
        let mut t = Mat::from_fn(n, k, |_, _| if rng.random_bool(0.5) { rng.random() } else { 0.0 });
        for i in 0..n {
            t[(i, rng.random_range(0..k))] += 0.5;
            let s: f64 = t.row(i).iter().sum();
            t.row_mut(i).iter_mut().for_each(|v| *v /= s);
        }
        t
    }

    fn with_entries(m: &Mat, x: &[f64]) -> Mat {
        Mat::from_vec(m.rows(), m.cols(), x.to_vec()).unwrap()
    }

    #[test]
    fn two_by_two_identity_closed_form() {
        let a = Mat::identity(2);
        let v = soft_infonce(&a, &a, &Mat::identity(2), 1.0).unwrap().value;
        let e = std::f64::consts::E;
        assert!((v + (e / (e + 1.0)).ln()).abs() < 1e-14);
        assert!((v - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn identical_embeddings_give_log_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Mat::from_fn(3, 4, |_, j| j as f64 + 1.0);
        let c = Mat::from_fn(5, 4, |_, j| 2.0 * (j as f64 + 1.0));
        let t = random_target(3, 5, &mut rng);
        let v = soft_infonce(&a, &c, &t, 0.07).unwrap().value;
        assert!((v - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_targets_and_zero_rows() {
        let a = Mat::identity(2);
        let bad = Mat::from_rows(&[vec![0.7, 0.7], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(soft_infonce(&a, &a, &bad, 1.0), Err(LossError::TargetRow { row: 0, .. })));
        let z = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert!(matches!(
            soft_infonce(&z, &a, &Mat::identity(2), 1.0),
            Err(LossError::Numerics(NumericsError::ZeroNorm { row: 1, .. }))
        ));
        assert!(matches!(soft_infonce(&a, &a, &Mat::identity(2), 0.0), Err(LossError::Temperature(_))));
    }

    #[test]
    fn soft_infonce_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let a = random(6, 8, &mut rng);
        let c = random(6, 8, &mut rng);
        let t = random_target(6, 6, &mut rng);
        let lv = soft_infonce(&a, &c, &t, 0.3).unwrap();
        let fa = finite_diff_grad(|x| soft_infonce(&with_entries(&a, x), &c, &t, 0.3).unwrap().value, a.as_slice(), H);
        let fc = finite_diff_grad(|x| soft_infonce(&a, &with_entries(&c, x), &t, 0.3).unwrap().value, c.as_slice(), H);
        assert!(max_relative_error(lv.grads[0].as_slice(), &fa) < 1e-4);
        assert!(max_relative_error(lv.grads[1].as_slice(), &fc) < 1e-4);
    }

    #[test]
    fn info_nce_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random(5, 4, &mut rng);
        let c = random(3, 4, &mut rng);
        let pos = [0, 2, 1, 1, 0];
        let lv = info_nce(&a, &c, &pos, 0.2).unwrap();
        let fa = finite_diff_grad(|x| info_nce(&with_entries(&a, x), &c, &pos, 0.2).unwrap().value, a.as_slice(), H);
        let fc = finite_diff_grad(|x| info_nce(&a, &with_entries(&c, x), &pos, 0.2).unwrap().value, c.as_slice(), H);
        assert!(max_relative_error(lv.grads[0].as_slice(), &fa) < 1e-4);
        assert!(max_relative_error(lv.grads[1].as_slice(), &fc) < 1e-4);
    }

    #[test]
    fn identity_target_equals_info_nce() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random(7, 5, &mut rng);
        let c = random(7, 5, &mut rng);
        let soft = soft_infonce(&a, &c, &Mat::identity(7), 0.1).unwrap();
        let hard = info_nce(&a, &c, &(0..7).collect::<Vec<_>>(), 0.1).unwrap();
        assert!((soft.value - hard.value).abs() < 1e-12);
        assert!(max_relative_error(soft.grads[0].as_slice(), hard.grads[0].as_slice()) < 1e-9);
    }

    #[test]
    fn action_action_degenerate_batch() {
        // All-distinct triples with only the gripper weighted and all grippers
        // different is impossible for n > 2, so use S = I directly.
        let a = Mat::from_fn(4, 3, |_, j| [1.0, -2.0, 0.5][j]);
        let t = row_normalize(&crate::affinity::AffinityMatrix::identity(4), SelfMode::ExcludeSelf);
        let v = loss_action_action(&a, &t, 0.07).unwrap().value;
        // Softmax is uniform over 4 candidates and the target covers 3 of them.
        assert!((v - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn action_action_is_permutation_invariant_and_checks_gradients() {
        let cfg = BinningConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let ts: Vec<_> = (0..5)
            .map(|_| {
                triple_from_indices(
                    crate::action_space::ClassIndices {
                        t: rng.random_range(0..3),
                        r: rng.random_range(0..3),
                        g: rng.random_range(0..2),
                    },
                    &cfg,
                )
                .unwrap()
            })
            .collect();
        let s = similarity_matrix(&ts, &AffinityWeights::default()).unwrap();
        let t = row_normalize(&s, SelfMode::ExcludeSelf);
        let a = random(5, 8, &mut rng);
        let lv = loss_action_action(&a, &t, 0.5).unwrap();

        let perm = [4, 2, 0, 3, 1];
        let pts: Vec<_> = perm.iter().map(|&k| ts[k]).collect();
        let pt = row_normalize(&similarity_matrix(&pts, &AffinityWeights::default()).unwrap(), SelfMode::ExcludeSelf);
        let pa = Mat::from_fn(5, 8, |i, j| a[(perm[i], j)]);
        assert!((loss_action_action(&pa, &pt, 0.5).unwrap().value - lv.value).abs() < 1e-12);

        let fd = finite_diff_grad(|x| loss_action_action(&with_entries(&a, x), &t, 0.5).unwrap().value, a.as_slice(), H);
        assert!(max_relative_error(lv.grads[0].as_slice(), &fd) < 1e-4);
    }

    #[test]
    fn single_candidate_has_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random(4, 3, &mut rng);
        let p = random(1, 3, &mut rng);
        let lv = loss_action_primitive(&a, &p, &Mat::from_fn(4, 1, |_, _| 1.0), 0.07).unwrap();
        assert_eq!(lv.value, 0.0);
        assert!(lv.grads.iter().all(|g| g.max_abs() < 1e-15));
    }

    #[test]
    fn separable_batch_loss_drops_with_temperature() {
        let p = Mat::identity(3);
        let a = Mat::identity(3);
        let t = Mat::identity(3);
        let vals: Vec<f64> = [1.0, 0.5, 0.1]
            .iter()
            .map(|&tau| loss_action_primitive(&a, &p, &t, tau).unwrap().value)
            .collect();
        assert!(vals[0] > vals[1] && vals[1] > vals[2], "{vals:?}");
    }

    #[test]
    fn contrastive_total_examples() {
        assert_eq!(contrastive_total(0.3, 0.5, 0.0), 0.3);
        assert!((contrastive_total(0.3, 0.5, 1.0) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn imitation_uniform_logits() {
        let labels = vec![ClassIndices { t: 3, r: 18, g: 1 }; 4];
        let lv = imitation_loss(&Mat::zeros(4, 19), &Mat::zeros(4, 19), &Mat::zeros(4, 2), &labels).unwrap();
        let expect = 19f64.ln() * 2.0 + 2f64.ln();
        assert!((lv.value - expect).abs() < 1e-12);
        assert!((lv.value - 6.58203).abs() < 1e-5);
    }

    #[test]
    fn imitation_saturated_and_out_of_range() {
        let labels = vec![ClassIndices { t: 1, r: 0, g: 1 }];
        let mut lt = Mat::zeros(1, 19);
        lt[(0, 1)] = 1000.0;
        let mut lr = Mat::zeros(1, 19);
        lr[(0, 0)] = 1000.0;
        let mut lg = Mat::zeros(1, 2);
        lg[(0, 1)] = 1000.0;
        assert!(imitation_loss(&lt, &lr, &lg, &labels).unwrap().value < 1e-6);
        let bad = vec![ClassIndices { t: 19, r: 0, g: 0 }];
        assert!(matches!(
            imitation_loss(&lt, &lr, &lg, &bad),
            Err(LossError::Label { head: "translation", label: 19, .. })
        ));
    }

    #[test]
    fn imitation_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 6;
        let labels: Vec<_> = (0..n)
            .map(|_| ClassIndices { t: rng.random_range(0..19), r: rng.random_range(0..19), g: rng.random_range(0..2) })
            .collect();
        let lt = random(n, 19, &mut rng);
        let lr = random(n, 19, &mut rng);
        let lg = random(n, 2, &mut rng);
        let lv = imitation_loss(&lt, &lr, &lg, &labels).unwrap();
        let ft = finite_diff_grad(|x| imitation_loss(&with_entries(&lt, x), &lr, &lg, &labels).unwrap().value, lt.as_slice(), H);
        let fg = finite_diff_grad(|x| imitation_loss(&lt, &lr, &with_entries(&lg, x), &labels).unwrap().value, lg.as_slice(), H);
        assert!(max_relative_error(lv.grads[0].as_slice(), &ft) < 1e-4);
        assert!(max_relative_error(lv.grads[2].as_slice(), &fg) < 1e-4);
    }

    #[test]
    fn l1_examples_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random(4, 7, &mut rng);
        assert_eq!(l1_trajectory_loss(&p, &p).unwrap().value, 0.0);
        let mut shifted = p.clone();
        shifted.as_mut_slice().iter_mut().for_each(|v| *v -= 1.0);
        assert!((l1_trajectory_loss(&p, &shifted).unwrap().value - 1.0).abs() < 1e-15);
        assert!(l1_trajectory_loss(&p, &Mat::zeros(4, 6)).is_err());

        let t = random(4, 7, &mut rng);
        let lv = l1_trajectory_loss(&p, &t).unwrap();
        let fd = finite_diff_grad(|x| l1_trajectory_loss(&with_entries(&p, x), &t).unwrap().value, p.as_slice(), H);
        assert!(max_relative_error(lv.grads[0].as_slice(), &fd) < 1e-4);
    }
}
