//! Multi-task detection losses: softmax cross-entropy over face/background,
//! smooth-L1 box and landmark regression gated to positive anchors, online
//! hard negative mining, and the two-branch total. Gradients with respect to
//! every head output are analytic and verified against central differences.
//!
//! Class index convention: 0 = face, 1 = background. All arithmetic is f64.

use crate::anchor::{
    encode_targets, match_anchors_opts, AnchorBox, AnchorError, AnchorLabel, EncodedTargets,
    GroundTruthFace, MatchAssignment, MatchPolicy, Variances,
};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("misaligned inputs: {0}")]
    Misaligned(String),
    #[error(transparent)]
    Anchor(#[from] AnchorError),
}

#[derive(Debug, Clone)]
pub struct LossConfig {
    /// Weight of the box regression term.
    pub lambda1: f64,
    /// Weight of the landmark regression term.
    pub lambda2: f64,
    /// Hard-negative budget: at most `ohem_ratio * max(positives, 1)`
    /// negatives contribute to the classification term.
    pub ohem_ratio: usize,
    pub variances: Variances,
    pub policy1: MatchPolicy,
    pub policy2: MatchPolicy,
    pub force_best_match: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda1: 0.25,
            lambda2: 0.1,
            ohem_ratio: 7,
            variances: Variances::default(),
            policy1: MatchPolicy::branch1(),
            policy2: MatchPolicy::branch2(),
            force_best_match: true,
        }
    }
}

/// Head outputs for one branch, row-aligned with the anchor list.
#[derive(Debug, Clone, Default)]
pub struct BranchOutputs {
    pub cls: Vec<[f64; 2]>,
    pub boxes: Vec<[f64; 4]>,
    pub landms: Vec<[f64; 10]>,
}

impl BranchOutputs {
    pub fn rows(&self) -> usize {
        self.cls.len()
    }

    fn check_aligned(&self, anchors: usize) -> Result<(), LossError> {
        if self.cls.len() != anchors || self.boxes.len() != anchors || self.landms.len() != anchors
        {
            return Err(LossError::Misaligned(format!(
                "outputs rows ({}, {}, {}) vs {} anchors",
                self.cls.len(),
                self.boxes.len(),
                self.landms.len(),
                anchors
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BranchLoss {
    pub l_cls: f64,
    pub l_box: f64,
    pub l_landm: f64,
    pub l_branch: f64,
    pub n_pos: usize,
    pub n_neg_selected: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct LossReport {
    pub branch1: BranchLoss,
    pub branch2: BranchLoss,
    pub l_total: f64,
}

/// Gradients of a branch loss with respect to that branch's head outputs.
#[derive(Debug, Clone)]
pub struct BranchGradients {
    pub cls: Vec<[f64; 2]>,
    pub boxes: Vec<[f64; 4]>,
    pub landms: Vec<[f64; 10]>,
}

/// Fixed record of the published training schedule; kept for integration,
/// no optimizer is implemented here.
#[derive(Debug, Clone, Copy)]
pub struct TrainingRecipe {
    pub optimizer: &'static str,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: u32,
    pub lr_drop_epochs: [u32; 2],
    pub lr_drop_factor: f64,
    pub batch_size: u32,
}

pub const TRAINING_RECIPE: TrainingRecipe = TrainingRecipe {
    optimizer: "sgd",
    learning_rate: 1e-3,
    momentum: 0.9,
    weight_decay: 5e-4,
    epochs: 130,
    lr_drop_epochs: [100, 120],
    lr_drop_factor: 0.1,
    batch_size: 8,
};

/// Softmax cross-entropy over a (face, background) logit pair in the
/// log-sum-exp form.
pub fn cross_entropy(logits: [f64; 2], is_face: bool) -> f64 {
    let m = logits[0].max(logits[1]);
    let lse = m + ((logits[0] - m).exp() + (logits[1] - m).exp()).ln();
    let true_logit = if is_face { logits[0] } else { logits[1] };
    lse - true_logit
}

/// d(cross_entropy)/d(logits) = softmax - onehot.
pub fn cross_entropy_grad(logits: [f64; 2], is_face: bool) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    let z = e0 + e1;
    let mut grad = [e0 / z, e1 / z];
    if is_face {
        grad[0] -= 1.0;
    } else {
        grad[1] -= 1.0;
    }
    grad
}

/// Sum over coordinates of 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise.
pub fn smooth_l1(pred: &[f64], target: &[f64]) -> f64 {
    debug_assert_eq!(pred.len(), target.len());
    pred.iter()
        .zip(target)
        .map(|(p, t)| {
            let x = (p - t).abs();
            if x < 1.0 {
                0.5 * x * x
            } else {
                x - 0.5
            }
        })
        .sum()
}

/// Elementwise derivative: the difference clamped to [-1, 1].
pub fn smooth_l1_grad(pred: &[f64], target: &[f64]) -> Vec<f64> {
    pred.iter()
        .zip(target)
        .map(|(p, t)| (p - t).clamp(-1.0, 1.0))
        .collect()
}

/// Hard-negative selection: keep the `ratio * max(positives, 1)` negatives
/// with the highest classification loss, ties broken toward lower anchor
/// index. Returns the selected indices in ascending order.
pub fn ohem_select(cls_losses: &[f64], assignment: &MatchAssignment, ratio: usize) -> Vec<usize> {
    let positives = assignment.positive_count();
    let mut negatives: Vec<usize> = assignment
        .labels
        .iter()
        .enumerate()
        .filter(|(_, l)| **l == AnchorLabel::Negative)
        .map(|(i, _)| i)
        .collect();
    negatives.sort_by(|&a, &b| {
        cls_losses[b]
            .partial_cmp(&cls_losses[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let budget = ratio * positives.max(1);
    negatives.truncate(budget);
    negatives.sort_unstable();
    negatives
}

fn per_anchor_cls_losses(outputs: &BranchOutputs, assignment: &MatchAssignment) -> Vec<f64> {
    assignment
        .labels
        .iter()
        .zip(&outputs.cls)
        .map(|(label, logits)| match label {
            AnchorLabel::Positive(_) => cross_entropy(*logits, true),
            AnchorLabel::Negative => cross_entropy(*logits, false),
            AnchorLabel::Ignored => 0.0,
        })
        .collect()
}

fn check_target_alignment(
    assignment: &MatchAssignment,
    targets: &EncodedTargets,
) -> Result<(), LossError> {
    let positives = assignment.positive_indices();
    if positives != targets.anchor_indices {
        return Err(LossError::Misaligned(
            "encoded targets do not cover the assignment's positive anchors".into(),
        ));
    }
    Ok(())
}

/// Branch loss with the hard-negative selection supplied by the caller.
/// This is the evaluation the gradient check differentiates: the selection
/// is held fixed so the loss is smooth in the outputs.
pub fn branch_loss_with_selection(
    outputs: &BranchOutputs,
    assignment: &MatchAssignment,
    targets: &EncodedTargets,
    selected_negatives: &[usize],
    config: &LossConfig,
) -> Result<BranchLoss, LossError> {
    outputs.check_aligned(assignment.labels.len())?;
    check_target_alignment(assignment, targets)?;

    let positives = &targets.anchor_indices;
    let n_pos = positives.len();

    let mut cls_sum = 0.0;
    for &i in positives {
        cls_sum += cross_entropy(outputs.cls[i], true);
    }
    for &i in selected_negatives {
        cls_sum += cross_entropy(outputs.cls[i], false);
    }
    let n_cls = n_pos + selected_negatives.len();
    let l_cls = if n_cls > 0 {
        cls_sum / n_cls as f64
    } else {
        0.0
    };

    let mut box_sum = 0.0;
    for (k, &i) in positives.iter().enumerate() {
        box_sum += smooth_l1(&outputs.boxes[i], &targets.box_targets[k]);
    }
    let l_box = if n_pos > 0 {
        box_sum / n_pos as f64
    } else {
        0.0
    };

    let mut landm_sum = 0.0;
    let mut n_landm = 0usize;
    for (k, &i) in positives.iter().enumerate() {
        if let Some(target) = &targets.landm_targets[k] {
            landm_sum += smooth_l1(&outputs.landms[i], target);
            n_landm += 1;
        }
    }
    let l_landm = if n_landm > 0 {
        landm_sum / n_landm as f64
    } else {
        0.0
    };

    Ok(BranchLoss {
        l_cls,
        l_box,
        l_landm,
        l_branch: combine_terms(l_cls, l_box, l_landm, config),
        n_pos,
        n_neg_selected: selected_negatives.len(),
    })
}

/// l_cls + lambda1 * l_box + lambda2 * l_landm.
pub fn combine_terms(l_cls: f64, l_box: f64, l_landm: f64, config: &LossConfig) -> f64 {
    l_cls + config.lambda1 * l_box + config.lambda2 * l_landm
}

/// One branch's multi-task loss: mean cross-entropy over positives plus the
/// mined hard negatives, mean smooth-L1 over positives for boxes, and over
/// landmark-carrying positives for landmarks. Regression terms vanish when
/// there are no positives.
pub fn multitask_loss(
    outputs: &BranchOutputs,
    assignment: &MatchAssignment,
    targets: &EncodedTargets,
    config: &LossConfig,
) -> Result<BranchLoss, LossError> {
    outputs.check_aligned(assignment.labels.len())?;
    let cls_losses = per_anchor_cls_losses(outputs, assignment);
    let selected = ohem_select(&cls_losses, assignment, config.ohem_ratio);
    branch_loss_with_selection(outputs, assignment, targets, &selected, config)
}

/// Both branches against the same scene: the first branch is matched with
/// the dual-threshold policy, the second with the single-threshold one, and
/// the total is their sum.
pub fn total_loss(
    anchors: &[AnchorBox],
    branch1_outputs: &BranchOutputs,
    branch2_outputs: &BranchOutputs,
    gts: &[GroundTruthFace],
    config: &LossConfig,
) -> Result<LossReport, LossError> {
    let mut branches = Vec::with_capacity(2);
    for (outputs, policy) in [
        (branch1_outputs, config.policy1),
        (branch2_outputs, config.policy2),
    ] {
        let assignment = match_anchors_opts(anchors, gts, policy, config.force_best_match);
        let targets = encode_targets(anchors, &assignment, gts, config.variances)?;
        branches.push(multitask_loss(outputs, &assignment, &targets, config)?);
    }
    let branch2 = branches.pop().expect("two branches");
    let branch1 = branches.pop().expect("two branches");
    let l_total = branch1.l_branch + branch2.l_branch;
    Ok(LossReport {
        branch1,
        branch2,
        l_total,
    })
}

/// Analytic gradients of the branch loss with respect to the head outputs.
/// The hard-negative selection is computed once from the given outputs and
/// treated as a constant of the differentiation.
pub fn loss_gradients(
    outputs: &BranchOutputs,
    assignment: &MatchAssignment,
    targets: &EncodedTargets,
    config: &LossConfig,
) -> Result<BranchGradients, LossError> {
    outputs.check_aligned(assignment.labels.len())?;
    check_target_alignment(assignment, targets)?;
    let cls_losses = per_anchor_cls_losses(outputs, assignment);
    let selected = ohem_select(&cls_losses, assignment, config.ohem_ratio);

    let rows = outputs.rows();
    let mut grads = BranchGradients {
        cls: vec![[0.0; 2]; rows],
        boxes: vec![[0.0; 4]; rows],
        landms: vec![[0.0; 10]; rows],
    };

    let positives = &targets.anchor_indices;
    let n_pos = positives.len();
    let n_cls = n_pos + selected.len();
    if n_cls > 0 {
        let scale = 1.0 / n_cls as f64;
        for &i in positives {
            let g = cross_entropy_grad(outputs.cls[i], true);
            grads.cls[i] = [g[0] * scale, g[1] * scale];
        }
        for &i in &selected {
            let g = cross_entropy_grad(outputs.cls[i], false);
            grads.cls[i] = [g[0] * scale, g[1] * scale];
        }
    }

    if n_pos > 0 {
        let scale = config.lambda1 / n_pos as f64;
        for (k, &i) in positives.iter().enumerate() {
            let g = smooth_l1_grad(&outputs.boxes[i], &targets.box_targets[k]);
            for (dst, v) in grads.boxes[i].iter_mut().zip(g) {
                *dst = v * scale;
            }
        }
    }

    let n_landm = targets.landm_targets.iter().flatten().count();
    if n_landm > 0 {
        let scale = config.lambda2 / n_landm as f64;
        for (k, &i) in positives.iter().enumerate() {
            if let Some(target) = &targets.landm_targets[k] {
                let g = smooth_l1_grad(&outputs.landms[i], target);
                for (dst, v) in grads.landms[i].iter_mut().zip(g) {
                    *dst = v * scale;
                }
            }
        }
    }

    Ok(grads)
}
