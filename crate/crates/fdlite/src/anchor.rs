//! Anchor grids, IoU, ground-truth matching policies and the box/landmark
//! encode-decode transforms.
//!
//! The detector places three square anchors per grid cell on three levels
//! (strides 8/16/32). Anchor ordering is the contract shared with the head
//! outputs: level-major, then row-major over cells, then size index.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnchorError {
    #[error("ground-truth box must have positive size, got {w}x{h}")]
    NonPositiveSize { w: f64, h: f64 },
}

/// Corner-form box: (x, y) top-left, width, height, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl Rect {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Rect { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }
}

/// Intersection over union; zero when the union is empty.
pub fn iou(a: &Rect, b: &Rect) -> f64 {
    let ix = (a.x + a.w).min(b.x + b.w) - a.x.max(b.x);
    let iy = (a.y + a.h).min(b.y + b.h) - a.y.max(b.y);
    let inter = ix.max(0.0) * iy.max(0.0);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Anchor strides per level: 4 * 2^i for i in 1..=3.
pub const LEVEL_STRIDES: [usize; 3] = [8, 16, 32];

/// Square anchor sides per level: {2^i, 1.5*2^i, 2^(i+1)} times the stride,
/// covering 16x16 through 512x512.
pub const LEVEL_SIDES: [[f64; 3]; 3] = [
    [16.0, 24.0, 32.0],
    [64.0, 96.0, 128.0],
    [256.0, 384.0, 512.0],
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorBox {
    pub cx: f64,
    pub cy: f64,
    pub side: f64,
    /// Detection level 1..=3.
    pub level: u8,
    pub row: u32,
    pub col: u32,
}

impl AnchorBox {
    pub fn rect(&self) -> Rect {
        Rect::new(
            self.cx - self.side / 2.0,
            self.cy - self.side / 2.0,
            self.side,
            self.side,
        )
    }
}

/// Anchors for an image, in the ordering contract above. Grid dimensions use
/// ceil so every pixel is covered for sizes not divisible by 32; anchors near
/// borders are kept unclipped.
pub fn generate_anchors(image_w: usize, image_h: usize) -> Vec<AnchorBox> {
    let mut anchors = Vec::with_capacity(anchor_count(image_w, image_h));
    for (level_idx, (&stride, sides)) in LEVEL_STRIDES.iter().zip(LEVEL_SIDES).enumerate() {
        let rows = image_h.div_ceil(stride);
        let cols = image_w.div_ceil(stride);
        for row in 0..rows {
            for col in 0..cols {
                let cx = (col as f64 + 0.5) * stride as f64;
                let cy = (row as f64 + 0.5) * stride as f64;
                for side in sides {
                    anchors.push(AnchorBox {
                        cx,
                        cy,
                        side,
                        level: (level_idx + 1) as u8,
                        row: row as u32,
                        col: col as u32,
                    });
                }
            }
        }
    }
    anchors
}

/// Closed-form count: sum over levels of ceil(h/a)*ceil(w/a)*3.
pub fn anchor_count(image_w: usize, image_h: usize) -> usize {
    LEVEL_STRIDES
        .iter()
        .map(|&s| image_h.div_ceil(s) * image_w.div_ceil(s) * LEVEL_SIDES[0].len())
        .sum()
}

/// Landmark roles, in the fixed storage order.
pub const LANDMARK_ORDER: [&str; 5] =
    ["left_eye", "right_eye", "nose", "left_mouth", "right_mouth"];

/// Index permutation applied when an image is mirrored horizontally:
/// eyes swap, nose stays, mouth corners swap.
pub const LANDMARK_FLIP_PERMUTATION: [usize; 5] = [1, 0, 2, 4, 3];

pub type Landmarks = [[f64; 2]; 5];

#[derive(Debug, Clone, Copy)]
pub struct GroundTruthFace {
    pub rect: Rect,
    /// Five points in [`LANDMARK_ORDER`], absent when unannotated.
    pub landmarks: Option<Landmarks>,
}

impl GroundTruthFace {
    pub fn new(rect: Rect, landmarks: Option<Landmarks>) -> Result<Self, AnchorError> {
        if rect.w <= 0.0 || rect.h <= 0.0 {
            return Err(AnchorError::NonPositiveSize {
                w: rect.w,
                h: rect.h,
            });
        }
        Ok(GroundTruthFace { rect, landmarks })
    }
}

/// Anchor labelling rule. The first branch uses a dual threshold with an
/// ignored band, the second a single threshold with no ignored anchors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MatchPolicy {
    /// positive when best IoU >= `pos`, negative when < `neg`, else ignored.
    Dual { pos: f64, neg: f64 },
    /// positive when best IoU >= `pos`, else negative.
    Single { pos: f64 },
}

impl MatchPolicy {
    /// First-branch policy: 0.7 / 0.3 with an ignored band.
    pub fn branch1() -> Self {
        MatchPolicy::Dual { pos: 0.7, neg: 0.3 }
    }

    /// Second-branch policy: 0.35, everything else negative.
    pub fn branch2() -> Self {
        MatchPolicy::Single { pos: 0.35 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    /// Matched to the ground truth at this index.
    Positive(usize),
    Negative,
    Ignored,
}

impl AnchorLabel {
    pub fn gt_index(&self) -> Option<usize> {
        match self {
            AnchorLabel::Positive(i) => Some(*i),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MatchAssignment {
    pub labels: Vec<AnchorLabel>,
    pub policy: MatchPolicy,
}

impl MatchAssignment {
    pub fn positive_count(&self) -> usize {
        self.labels
            .iter()
            .filter(|l| matches!(l, AnchorLabel::Positive(_)))
            .count()
    }

    pub fn positive_indices(&self) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.gt_index().map(|_| i))
            .collect()
    }
}

/// Label anchors against ground truths under a policy, with the forced
/// best-anchor rule enabled (each gt claims its argmax-IoU anchor).
pub fn match_anchors(
    anchors: &[AnchorBox],
    gts: &[GroundTruthFace],
    policy: MatchPolicy,
) -> MatchAssignment {
    match_anchors_opts(anchors, gts, policy, true)
}

/// As [`match_anchors`], with the forced-match rule toggleable.
///
/// Per-anchor labels come from the best IoU over all gts (ties go to the
/// lowest gt index). With `force_best` on, each gt additionally claims its
/// single highest-IoU anchor as positive regardless of threshold (anchor
/// ties go to the lowest anchor index; when two gts claim one anchor the
/// higher IoU wins, then the lower gt index).
pub fn match_anchors_opts(
    anchors: &[AnchorBox],
    gts: &[GroundTruthFace],
    policy: MatchPolicy,
    force_best: bool,
) -> MatchAssignment {
    let mut labels = vec![AnchorLabel::Negative; anchors.len()];
    if gts.is_empty() {
        return MatchAssignment { labels, policy };
    }

    let anchor_rects: Vec<Rect> = anchors.iter().map(|a| a.rect()).collect();
    let mut best_gt: Vec<(usize, f64)> = vec![(0, -1.0); anchors.len()];
    let mut best_anchor: Vec<(usize, f64)> = vec![(0, -1.0); gts.len()];
    for (ai, rect) in anchor_rects.iter().enumerate() {
        for (gi, gt) in gts.iter().enumerate() {
            let overlap = iou(rect, &gt.rect);
            if overlap > best_gt[ai].1 {
                best_gt[ai] = (gi, overlap);
            }
            if overlap > best_anchor[gi].1 {
                best_anchor[gi] = (ai, overlap);
            }
        }
    }

    for (ai, &(gi, overlap)) in best_gt.iter().enumerate() {
        labels[ai] = match policy {
            MatchPolicy::Dual { pos, neg } => {
                if overlap >= pos {
                    AnchorLabel::Positive(gi)
                } else if overlap < neg {
                    AnchorLabel::Negative
                } else {
                    AnchorLabel::Ignored
                }
            }
            MatchPolicy::Single { pos } => {
                if overlap >= pos {
                    AnchorLabel::Positive(gi)
                } else {
                    AnchorLabel::Negative
                }
            }
        };
    }

    if force_best {
        let mut claimed: Vec<Option<(usize, f64)>> = vec![None; anchors.len()];
        for (gi, &(ai, overlap)) in best_anchor.iter().enumerate() {
            let take = match claimed[ai] {
                None => true,
                Some((_, prev)) => overlap > prev,
            };
            if take {
                claimed[ai] = Some((gi, overlap));
            }
        }
        for (ai, claim) in claimed.iter().enumerate() {
            if let Some((gi, _)) = claim {
                labels[ai] = AnchorLabel::Positive(*gi);
            }
        }
    }

    MatchAssignment { labels, policy }
}

/// Center/size normalization factors for the encode transforms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Variances {
    pub center: f64,
    pub size: f64,
}

impl Default for Variances {
    fn default() -> Self {
        Variances {
            center: 0.1,
            size: 0.2,
        }
    }
}

/// Box regression target: offsets of the gt center from the anchor center
/// normalized by anchor side and center variance, log size ratios scaled by
/// the size variance.
pub fn encode_box(
    anchor: &AnchorBox,
    gt: &Rect,
    variances: Variances,
) -> Result<[f64; 4], AnchorError> {
    if gt.w <= 0.0 || gt.h <= 0.0 {
        return Err(AnchorError::NonPositiveSize { w: gt.w, h: gt.h });
    }
    let (gcx, gcy) = gt.center();
    Ok([
        (gcx - anchor.cx) / (anchor.side * variances.center),
        (gcy - anchor.cy) / (anchor.side * variances.center),
        (gt.w / anchor.side).ln() / variances.size,
        (gt.h / anchor.side).ln() / variances.size,
    ])
}

/// Exact inverse of [`encode_box`].
pub fn decode_box(anchor: &AnchorBox, code: &[f64; 4], variances: Variances) -> Rect {
    let cx = anchor.cx + code[0] * anchor.side * variances.center;
    let cy = anchor.cy + code[1] * anchor.side * variances.center;
    let w = anchor.side * (code[2] * variances.size).exp();
    let h = anchor.side * (code[3] * variances.size).exp();
    Rect::new(cx - w / 2.0, cy - h / 2.0, w, h)
}

/// Landmark targets: each point offset from the anchor center, normalized
/// like the box center terms.
pub fn encode_landmarks(anchor: &AnchorBox, points: &Landmarks, variances: Variances) -> [f64; 10] {
    let mut out = [0.0; 10];
    for (i, p) in points.iter().enumerate() {
        out[2 * i] = (p[0] - anchor.cx) / (anchor.side * variances.center);
        out[2 * i + 1] = (p[1] - anchor.cy) / (anchor.side * variances.center);
    }
    out
}

/// Exact inverse of [`encode_landmarks`].
pub fn decode_landmarks(anchor: &AnchorBox, code: &[f64; 10], variances: Variances) -> Landmarks {
    let mut out = [[0.0; 2]; 5];
    for (i, p) in out.iter_mut().enumerate() {
        p[0] = anchor.cx + code[2 * i] * anchor.side * variances.center;
        p[1] = anchor.cy + code[2 * i + 1] * anchor.side * variances.center;
    }
    out
}

/// Regression targets for the positive anchors of an assignment, in
/// ascending anchor order. Landmark targets are present only where the
/// matched gt carries landmarks.
#[derive(Debug, Clone)]
pub struct EncodedTargets {
    pub anchor_indices: Vec<usize>,
    pub box_targets: Vec<[f64; 4]>,
    pub landm_targets: Vec<Option<[f64; 10]>>,
    pub variances: Variances,
}

pub fn encode_targets(
    anchors: &[AnchorBox],
    assignment: &MatchAssignment,
    gts: &[GroundTruthFace],
    variances: Variances,
) -> Result<EncodedTargets, AnchorError> {
    let mut targets = EncodedTargets {
        anchor_indices: Vec::new(),
        box_targets: Vec::new(),
        landm_targets: Vec::new(),
        variances,
    };
    for (ai, label) in assignment.labels.iter().enumerate() {
        if let AnchorLabel::Positive(gi) = label {
            let gt = &gts[*gi];
            targets.anchor_indices.push(ai);
            targets
                .box_targets
                .push(encode_box(&anchors[ai], &gt.rect, variances)?);
            targets.landm_targets.push(
                gt.landmarks
                    .as_ref()
                    .map(|lm| encode_landmarks(&anchors[ai], lm, variances)),
            );
        }
    }
    Ok(targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn level_sides_cover_16_through_512() {
        assert_eq!(LEVEL_SIDES[0], [16.0, 24.0, 32.0]);
        assert_eq!(LEVEL_SIDES[1], [64.0, 96.0, 128.0]);
        assert_eq!(LEVEL_SIDES[2], [256.0, 384.0, 512.0]);
    }

    #[test]
    fn vga_grid_has_18900_anchors() {
        let anchors = generate_anchors(640, 480);
        assert_eq!(anchors.len(), 18_900);
        assert_eq!(anchor_count(640, 480), 18_900);
    }

    #[test]
    fn first_anchor_sits_at_half_stride() {
        let anchors = generate_anchors(640, 480);
        let first = anchors[0];
        assert_eq!((first.cx, first.cy), (4.0, 4.0));
        assert_eq!(first.side, 16.0);
        assert_eq!(first.level, 1);
        assert_eq!((first.row, first.col), (0, 0));
        // size index runs fastest, then columns
        assert_eq!(anchors[1].side, 24.0);
        assert_eq!(anchors[2].side, 32.0);
        assert_eq!(anchors[3].cx, 12.0);
        assert_eq!(anchors[3].side, 16.0);
    }

    #[test]
    fn count_formula_matches_enumeration_at_odd_sizes() {
        for (w, h) in [(33, 65), (100, 50), (640, 480), (500, 667), (31, 31)] {
            assert_eq!(generate_anchors(w, h).len(), anchor_count(w, h), "{w}x{h}");
        }
    }

    #[test]
    fn iou_examples() {
        let a = Rect::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        let far = Rect::new(10.0, 10.0, 2.0, 2.0);
        assert_eq!(iou(&a, &far), 0.0);
        let b = Rect::new(1.0, 1.0, 2.0, 2.0);
        let overlap = iou(&a, &b);
        assert!((overlap - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn iou_is_symmetric_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..500 {
            let r = |rng: &mut ChaCha8Rng| {
                Rect::new(
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(0.1..6.0),
                    rng.gen_range(0.1..6.0),
                )
            };
            let a = r(&mut rng);
            let b = r(&mut rng);
            let ab = iou(&a, &b);
            assert_eq!(ab, iou(&b, &a));
            assert!((0.0..=1.0).contains(&ab));
            if ab == 1.0 {
                assert_eq!(a, b);
            }
        }
    }

    fn anchor(cx: f64, cy: f64, side: f64) -> AnchorBox {
        AnchorBox {
            cx,
            cy,
            side,
            level: 1,
            row: 0,
            col: 0,
        }
    }

    fn face(x: f64, y: f64, w: f64, h: f64) -> GroundTruthFace {
        GroundTruthFace::new(Rect::new(x, y, w, h), None).unwrap()
    }

    #[test]
    fn exact_overlap_is_positive_under_both_policies() {
        let anchors = vec![anchor(16.0, 16.0, 32.0)];
        let gts = vec![face(0.0, 0.0, 32.0, 32.0)];
        for policy in [MatchPolicy::branch1(), MatchPolicy::branch2()] {
            let m = match_anchors(&anchors, &gts, policy);
            assert_eq!(m.labels[0], AnchorLabel::Positive(0));
        }
    }

    #[test]
    fn half_iou_anchor_ignored_vs_positive() {
        // anchor A has IoU exactly 0.5, anchor B is the gt's argmax so the
        // forced-match rule does not reach A
        let anchors = vec![anchor(16.0, 16.0, 32.0), anchor(16.0, 8.0, 24.0)];
        let gts = vec![face(0.0, 0.0, 32.0, 16.0)];
        let a_iou = iou(&anchors[0].rect(), &gts[0].rect);
        let b_iou = iou(&anchors[1].rect(), &gts[0].rect);
        assert!((a_iou - 0.5).abs() < 1e-12);
        assert!(b_iou > a_iou);

        let first = match_anchors(&anchors, &gts, MatchPolicy::branch1());
        assert_eq!(first.labels[0], AnchorLabel::Ignored);
        let second = match_anchors(&anchors, &gts, MatchPolicy::branch2());
        assert_eq!(second.labels[0], AnchorLabel::Positive(0));
    }

    #[test]
    fn weak_gt_still_claims_its_argmax_anchor() {
        let anchors = vec![
            anchor(100.0, 100.0, 16.0),
            anchor(30.0, 30.0, 16.0),
            anchor(200.0, 200.0, 16.0),
        ];
        // best IoU well below both thresholds
        let gts = vec![face(24.0, 24.0, 40.0, 40.0)];
        let best: Vec<f64> = anchors
            .iter()
            .map(|a| iou(&a.rect(), &gts[0].rect))
            .collect();
        assert!(best.iter().all(|&v| v < 0.3));
        let m = match_anchors(&anchors, &gts, MatchPolicy::branch1());
        assert_eq!(m.labels[1], AnchorLabel::Positive(0));
        assert_eq!(m.positive_count(), 1);
        // with the rule disabled nothing is positive
        let off = match_anchors_opts(&anchors, &gts, MatchPolicy::branch1(), false);
        assert_eq!(off.positive_count(), 0);
    }

    #[test]
    fn empty_gt_list_labels_everything_negative() {
        let anchors = generate_anchors(64, 64);
        let m = match_anchors(&anchors, &[], MatchPolicy::branch2());
        assert!(m.labels.iter().all(|l| *l == AnchorLabel::Negative));
    }

    /// Independent nested-loop matcher used to cross-check the implementation.
    #[allow(clippy::needless_range_loop)] // deliberately index-explicit
    fn brute_force_match(
        anchors: &[AnchorBox],
        gts: &[GroundTruthFace],
        policy: MatchPolicy,
        force_best: bool,
    ) -> Vec<AnchorLabel> {
        let mut labels = vec![AnchorLabel::Negative; anchors.len()];
        if gts.is_empty() {
            return labels;
        }
        for ai in 0..anchors.len() {
            let mut best = (0usize, -1.0f64);
            for gi in 0..gts.len() {
                let o = iou(&anchors[ai].rect(), &gts[gi].rect);
                if o > best.1 {
                    best = (gi, o);
                }
            }
            labels[ai] = match policy {
                MatchPolicy::Dual { pos, neg } => {
                    if best.1 >= pos {
                        AnchorLabel::Positive(best.0)
                    } else if best.1 < neg {
                        AnchorLabel::Negative
                    } else {
                        AnchorLabel::Ignored
                    }
                }
                MatchPolicy::Single { pos } => {
                    if best.1 >= pos {
                        AnchorLabel::Positive(best.0)
                    } else {
                        AnchorLabel::Negative
                    }
                }
            };
        }
        if force_best {
            let mut claims: Vec<Option<(usize, f64)>> = vec![None; anchors.len()];
            for gi in 0..gts.len() {
                let mut best = (0usize, -1.0f64);
                for ai in 0..anchors.len() {
                    let o = iou(&anchors[ai].rect(), &gts[gi].rect);
                    if o > best.1 {
                        best = (ai, o);
                    }
                }
                let better = match claims[best.0] {
                    None => true,
                    Some((_, prev)) => best.1 > prev,
                };
                if better {
                    claims[best.0] = Some((gi, best.1));
                }
            }
            for (ai, c) in claims.iter().enumerate() {
                if let Some((gi, _)) = c {
                    labels[ai] = AnchorLabel::Positive(*gi);
                }
            }
        }
        labels
    }

    fn random_scene(rng: &mut ChaCha8Rng) -> (Vec<AnchorBox>, Vec<GroundTruthFace>) {
        let n_anchors = rng.gen_range(5..200);
        let anchors: Vec<AnchorBox> = (0..n_anchors)
            .map(|_| {
                anchor(
                    rng.gen_range(0.0..128.0),
                    rng.gen_range(0.0..128.0),
                    [8.0, 16.0, 24.0][rng.gen_range(0..3)],
                )
            })
            .collect();
        let n_gts = rng.gen_range(0..10);
        let gts: Vec<GroundTruthFace> = (0..n_gts)
            .map(|_| {
                face(
                    rng.gen_range(0.0..110.0),
                    rng.gen_range(0.0..110.0),
                    rng.gen_range(4.0..40.0),
                    rng.gen_range(4.0..40.0),
                )
            })
            .collect();
        (anchors, gts)
    }

    #[test]
    fn matcher_agrees_with_brute_force_on_random_scenes() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..200 {
            let (anchors, gts) = random_scene(&mut rng);
            for policy in [MatchPolicy::branch1(), MatchPolicy::branch2()] {
                for force in [false, true] {
                    let got = match_anchors_opts(&anchors, &gts, policy, force);
                    let want = brute_force_match(&anchors, &gts, policy, force);
                    assert_eq!(got.labels, want, "trial {trial} policy {policy:?}");
                }
            }
        }
    }

    #[test]
    fn label_partition_is_total() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let (anchors, gts) = random_scene(&mut rng);
            let second = match_anchors(&anchors, &gts, MatchPolicy::branch2());
            assert!(second.labels.iter().all(|l| *l != AnchorLabel::Ignored));
            let first = match_anchors(&anchors, &gts, MatchPolicy::branch1());
            assert_eq!(first.labels.len(), anchors.len());
        }
    }

    #[test]
    fn every_gt_gets_a_positive_when_argmax_anchors_are_distinct() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut checked = 0;
        while checked < 50 {
            let (anchors, gts) = random_scene(&mut rng);
            if gts.is_empty() {
                continue;
            }
            // distinct argmax anchors per gt, otherwise one claim wins
            let argmax: Vec<usize> = gts
                .iter()
                .map(|gt| {
                    let mut best = (0usize, -1.0f64);
                    for (ai, a) in anchors.iter().enumerate() {
                        let o = iou(&a.rect(), &gt.rect);
                        if o > best.1 {
                            best = (ai, o);
                        }
                    }
                    best.0
                })
                .collect();
            let mut distinct = argmax.clone();
            distinct.sort_unstable();
            distinct.dedup();
            if distinct.len() != gts.len() {
                continue;
            }
            for policy in [MatchPolicy::branch1(), MatchPolicy::branch2()] {
                let m = match_anchors(&anchors, &gts, policy);
                for gi in 0..gts.len() {
                    assert!(
                        m.labels.iter().any(|l| l.gt_index() == Some(gi)),
                        "gt {gi} unmatched"
                    );
                }
            }
            checked += 1;
        }
    }

    #[test]
    fn encode_box_examples() {
        let a = anchor(16.0, 16.0, 32.0);
        let v = Variances::default();
        let same = encode_box(&a, &a.rect(), v).unwrap();
        assert_eq!(same, [0.0, 0.0, 0.0, 0.0]);

        // center offset 3.2 px = one center-variance unit -> t_x = 1.0
        let shifted = Rect::new(19.2 - 16.0, 0.0, 32.0, 32.0);
        let code = encode_box(&a, &shifted, v).unwrap();
        assert!((code[0] - 1.0).abs() < 1e-12);

        assert!(matches!(
            encode_box(&a, &Rect::new(0.0, 0.0, 0.0, 4.0), v),
            Err(AnchorError::NonPositiveSize { .. })
        ));
    }

    #[test]
    fn box_round_trip_under_1e6() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let v = Variances::default();
        for _ in 0..10_000 {
            let a = anchor(
                rng.gen_range(4.0..640.0),
                rng.gen_range(4.0..480.0),
                [16.0, 64.0, 256.0][rng.gen_range(0..3)],
            );
            let gt = Rect::new(
                rng.gen_range(0.0..600.0),
                rng.gen_range(0.0..440.0),
                rng.gen_range(1.0..512.0),
                rng.gen_range(1.0..512.0),
            );
            let code = encode_box(&a, &gt, v).unwrap();
            let back = decode_box(&a, &code, v);
            for (got, want) in [
                (back.x, gt.x),
                (back.y, gt.y),
                (back.w, gt.w),
                (back.h, gt.h),
            ] {
                assert!((got - want).abs() < 1e-6, "{got} vs {want}");
            }
        }
    }

    #[test]
    fn landmark_examples_and_round_trip() {
        let a = anchor(16.0, 16.0, 32.0);
        let v = Variances::default();
        let centered: Landmarks = [[16.0, 16.0]; 5];
        assert_eq!(encode_landmarks(&a, &centered, v), [0.0; 10]);

        let mut offset = centered;
        offset[0] = [19.2, 16.0];
        let code = encode_landmarks(&a, &offset, v);
        assert!((code[0] - 1.0).abs() < 1e-12);
        assert_eq!(code[1], 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..10_000 {
            let mut points: Landmarks = [[0.0; 2]; 5];
            for p in &mut points {
                *p = [rng.gen_range(0.0..640.0), rng.gen_range(0.0..480.0)];
            }
            let code = encode_landmarks(&a, &points, v);
            let back = decode_landmarks(&a, &code, v);
            for (got, want) in back.iter().flatten().zip(points.iter().flatten()) {
                assert!((got - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn encoding_is_scale_covariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let v = Variances::default();
        for _ in 0..200 {
            let a = anchor(rng.gen_range(8.0..100.0), rng.gen_range(8.0..100.0), 32.0);
            let gt = Rect::new(
                rng.gen_range(0.0..90.0),
                rng.gen_range(0.0..90.0),
                rng.gen_range(2.0..50.0),
                rng.gen_range(2.0..50.0),
            );
            let s = rng.gen_range(0.25..4.0);
            let scaled_anchor = anchor(a.cx * s, a.cy * s, a.side * s);
            let scaled_gt = Rect::new(gt.x * s, gt.y * s, gt.w * s, gt.h * s);
            let base = encode_box(&a, &gt, v).unwrap();
            let scaled = encode_box(&scaled_anchor, &scaled_gt, v).unwrap();
            for (x, y) in base.iter().zip(&scaled) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn encode_targets_aligns_with_positives() {
        let anchors = vec![anchor(16.0, 16.0, 32.0), anchor(64.0, 64.0, 32.0)];
        let gts = vec![face(0.0, 0.0, 32.0, 32.0)];
        let m = match_anchors(&anchors, &gts, MatchPolicy::branch2());
        let t = encode_targets(&anchors, &m, &gts, Variances::default()).unwrap();
        assert_eq!(t.anchor_indices, vec![0]);
        assert_eq!(t.box_targets.len(), 1);
        assert!(t.landm_targets[0].is_none());
    }
}
