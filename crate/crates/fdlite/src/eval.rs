//! Detection-quality protocols: greedy IoU matching of detections to ground
//! truth, precision-recall curves with envelope-integrated average precision,
//! and true-positive rate at a false-positive budget.

use crate::anchor::{iou, Rect};
use serde::Serialize;
use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("average precision is undefined without ground truth")]
    NoGroundTruth,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

impl std::str::FromStr for Difficulty {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "easy" => Ok(Difficulty::Easy),
            "medium" => Ok(Difficulty::Medium),
            "hard" => Ok(Difficulty::Hard),
            other => Err(format!("unknown difficulty '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GtFace {
    pub rect: Rect,
    pub difficulty: Option<Difficulty>,
    /// Ignored boxes absorb detections without counting as TP or FP.
    pub ignore: bool,
}

/// Per-image ground truth, keyed by image name in sorted order.
#[derive(Debug, Clone, Default)]
pub struct AnnotationSet {
    pub images: BTreeMap<String, Vec<GtFace>>,
}

impl AnnotationSet {
    pub fn total_faces(&self) -> usize {
        self.images.values().map(|v| v.len()).sum()
    }
}

/// Parse ground truth in the event/file list layout: an image path line, a
/// face count line, then one `x y w h [attributes...]` line per face. Only
/// the first four numeric columns are used; a trailing `easy`/`medium`/`hard`
/// tag or `ignore` flag is honored when present. A count of zero may be
/// followed by an all-zero placeholder line.
pub fn load_gt(path: &Path) -> Result<AnnotationSet, EvalError> {
    let file = std::fs::File::open(path)?;
    parse_gt(std::io::BufReader::new(file))
}

pub fn parse_gt<R: BufRead>(reader: R) -> Result<AnnotationSet, EvalError> {
    let mut set = AnnotationSet::default();
    let lines: Vec<String> = reader.lines().collect::<Result<_, _>>()?;
    let mut i = 0usize;
    while i < lines.len() {
        let image = lines[i].trim();
        if image.is_empty() {
            i += 1;
            continue;
        }
        let header_line = i;
        i += 1;
        let count_text = lines.get(i).map(|s| s.trim()).ok_or(EvalError::Parse {
            line: header_line + 1,
            msg: format!("image '{image}' missing face count"),
        })?;
        let count: usize = count_text.parse().map_err(|_| EvalError::Parse {
            line: i + 1,
            msg: format!("bad face count '{count_text}'"),
        })?;
        i += 1;

        let mut faces = Vec::with_capacity(count);
        if count == 0 {
            // optional placeholder row of zeros
            if let Some(next) = lines.get(i) {
                let tokens: Vec<&str> = next.split_whitespace().collect();
                if !tokens.is_empty() && tokens.iter().all(|t| t.parse::<f64>().is_ok()) {
                    i += 1;
                }
            }
        }
        for _ in 0..count {
            let line_no = i + 1;
            let text = lines.get(i).ok_or(EvalError::Parse {
                line: line_no,
                msg: "unexpected end of file inside face list".into(),
            })?;
            faces.push(parse_face_line(text, line_no)?);
            i += 1;
        }
        set.images.insert(image.to_string(), faces);
    }
    Ok(set)
}

fn parse_face_line(text: &str, line_no: usize) -> Result<GtFace, EvalError> {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    if tokens.len() < 4 {
        return Err(EvalError::Parse {
            line: line_no,
            msg: format!("expected at least 4 columns, got {}", tokens.len()),
        });
    }
    let mut nums = [0.0f64; 4];
    for (dst, token) in nums.iter_mut().zip(&tokens[..4]) {
        *dst = token.parse().map_err(|_| EvalError::Parse {
            line: line_no,
            msg: format!("bad number '{token}'"),
        })?;
    }
    let [x, y, w, h] = nums;
    if w <= 0.0 || h <= 0.0 {
        return Err(EvalError::Parse {
            line: line_no,
            msg: format!("non-positive box size {w}x{h}"),
        });
    }
    let mut difficulty = None;
    let mut ignore = false;
    for token in &tokens[4..] {
        if let Ok(tag) = token.parse::<Difficulty>() {
            difficulty = Some(tag);
        } else if *token == "ignore" {
            ignore = true;
        }
        // remaining numeric attribute columns are ignored
    }
    Ok(GtFace {
        rect: Rect::new(x, y, w, h),
        difficulty,
        ignore,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetFlag {
    TruePositive,
    FalsePositive,
    /// Matched an ignore-flagged gt; excluded from the PR accounting.
    Absorbed,
}

#[derive(Debug, Clone)]
pub struct MatchOutcome {
    pub det_flags: Vec<DetFlag>,
    pub gt_matched: Vec<bool>,
}

/// Greedy matching of score-sorted detections: each detection takes the
/// highest-IoU candidate at or above the threshold, preferring unmatched
/// real gts; failing that an ignore gt absorbs it; otherwise it is a false
/// positive. `dets` must be sorted by descending score.
pub fn match_dets(dets: &[(Rect, f64)], gts: &[GtFace], iou_thresh: f64) -> MatchOutcome {
    debug_assert!(dets.windows(2).all(|w| w[0].1 >= w[1].1), "dets not sorted");
    let mut gt_matched = vec![false; gts.len()];
    let mut det_flags = Vec::with_capacity(dets.len());
    for (det_rect, _) in dets {
        let mut best_real: Option<(usize, f64)> = None;
        let mut best_ignore: Option<f64> = None;
        for (gi, gt) in gts.iter().enumerate() {
            let overlap = iou(det_rect, &gt.rect);
            if overlap < iou_thresh {
                continue;
            }
            if gt.ignore {
                if best_ignore.is_none_or(|prev| overlap > prev) {
                    best_ignore = Some(overlap);
                }
            } else if !gt_matched[gi] && best_real.is_none_or(|(_, prev)| overlap > prev) {
                best_real = Some((gi, overlap));
            }
        }
        let flag = if let Some((gi, _)) = best_real {
            gt_matched[gi] = true;
            DetFlag::TruePositive
        } else if best_ignore.is_some() {
            DetFlag::Absorbed
        } else {
            DetFlag::FalsePositive
        };
        det_flags.push(flag);
    }
    MatchOutcome {
        det_flags,
        gt_matched,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PRCurve {
    /// (recall, precision) per distinct score threshold, descending score.
    pub points: Vec<(f64, f64)>,
    pub ap: f64,
}

/// Average precision by integrating the precision envelope over recall.
/// `scored_flags` is the pooled (score, flag) list sorted by descending
/// score; absorbed detections are skipped.
pub fn average_precision(
    scored_flags: &[(f64, DetFlag)],
    n_gt: usize,
) -> Result<PRCurve, EvalError> {
    if n_gt == 0 {
        return Err(EvalError::NoGroundTruth);
    }
    debug_assert!(
        scored_flags.windows(2).all(|w| w[0].0 >= w[1].0),
        "flags not sorted by score"
    );
    let mut points = Vec::new();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0usize;
    let counted: Vec<&(f64, DetFlag)> = scored_flags
        .iter()
        .filter(|(_, f)| *f != DetFlag::Absorbed)
        .collect();
    while i < counted.len() {
        // consume the whole tie group at this score
        let score = counted[i].0;
        while i < counted.len() && counted[i].0 == score {
            match counted[i].1 {
                DetFlag::TruePositive => tp += 1,
                DetFlag::FalsePositive => fp += 1,
                DetFlag::Absorbed => {}
            }
            i += 1;
        }
        points.push((tp as f64 / n_gt as f64, tp as f64 / (tp + fp) as f64));
    }

    // integrate the monotone envelope: max precision at recall >= r
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (j, &(recall, _)) in points.iter().enumerate() {
        if recall > prev_recall {
            let envelope = points[j..]
                .iter()
                .map(|&(_, p)| p)
                .fold(f64::NEG_INFINITY, f64::max);
            ap += (recall - prev_recall) * envelope;
            prev_recall = recall;
        }
    }
    Ok(PRCurve { points, ap })
}

#[derive(Debug, Clone, Serialize)]
pub struct TprResult {
    pub tpr: f64,
    pub fp_budget: usize,
    /// True when the stream ran out before the budget was reached.
    pub under_budget: bool,
}

/// Walk the pooled score-sorted detections until `fp_budget` false positives
/// have accumulated; the true-positive rate at that point is TP / n_gt.
pub fn tpr_at_fp(
    scored_flags: &[(f64, DetFlag)],
    n_gt: usize,
    fp_budget: usize,
) -> Result<TprResult, EvalError> {
    if n_gt == 0 {
        return Err(EvalError::NoGroundTruth);
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    for (_, flag) in scored_flags {
        match flag {
            DetFlag::TruePositive => tp += 1,
            DetFlag::FalsePositive => {
                if fp == fp_budget {
                    return Ok(TprResult {
                        tpr: tp as f64 / n_gt as f64,
                        fp_budget,
                        under_budget: false,
                    });
                }
                fp += 1;
                if fp == fp_budget {
                    return Ok(TprResult {
                        tpr: tp as f64 / n_gt as f64,
                        fp_budget,
                        under_budget: false,
                    });
                }
            }
            DetFlag::Absorbed => {}
        }
    }
    Ok(TprResult {
        tpr: tp as f64 / n_gt as f64,
        fp_budget,
        under_budget: true,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SubsetReport {
    pub subset: String,
    pub ap: f64,
    pub n_images: usize,
    pub n_gt: usize,
}

/// Evaluate AP over one difficulty subset (or everything when `None`).
/// Ground truths outside the subset become ignore boxes that absorb
/// detections without counting.
pub fn evaluate_subset(
    annotations: &AnnotationSet,
    detections: &BTreeMap<String, Vec<(Rect, f64)>>,
    subset: Option<Difficulty>,
    iou_thresh: f64,
) -> Result<SubsetReport, EvalError> {
    let mut pooled: Vec<(f64, DetFlag)> = Vec::new();
    let mut n_gt = 0usize;
    for (image, faces) in &annotations.images {
        let filtered: Vec<GtFace> = faces
            .iter()
            .map(|f| {
                let in_subset = match subset {
                    None => !f.ignore,
                    Some(tag) => !f.ignore && f.difficulty == Some(tag),
                };
                GtFace {
                    ignore: !in_subset,
                    ..*f
                }
            })
            .collect();
        n_gt += filtered.iter().filter(|f| !f.ignore).count();

        let mut dets = detections.get(image).cloned().unwrap_or_default();
        dets.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        let outcome = match_dets(&dets, &filtered, iou_thresh);
        pooled.extend(dets.iter().map(|(_, score)| *score).zip(outcome.det_flags));
    }
    pooled.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let curve = average_precision(&pooled, n_gt)?;
    Ok(SubsetReport {
        subset: subset
            .map(|s| format!("{s:?}").to_lowercase())
            .unwrap_or_else(|| "all".into()),
        ap: curve.ap,
        n_images: annotations.images.len(),
        n_gt,
    })
}
