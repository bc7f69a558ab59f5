//! Inference pipeline: preprocessing, single- and multi-scale detection with
//! optional horizontal flip aggregation, greedy NMS and top-K selection.

pub mod image_io;
pub mod preprocess;

pub use image_io::{annotate, load_image, parse_ppm, save_image, write_ppm, RawImage};
pub use preprocess::{preprocess, CHANNEL_MEANS};

use crate::anchor::{
    decode_box, decode_landmarks, generate_anchors, iou, Landmarks, Rect, Variances,
    LANDMARK_FLIP_PERMUTATION,
};
use crate::exec::{run_forward, ExecError, TensorBuf, WeightStore};
use crate::graph::{GraphError, LayerGraph};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("format error: {0}")]
    Format(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("resized image would have {pixels} pixels, over the {limit} guard")]
    ResizeGuard { pixels: usize, limit: usize },
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One detected face in the source image frame.
#[derive(Debug, Clone)]
pub struct Detection {
    pub rect: Rect,
    /// Face probability in [0, 1].
    pub score: f64,
    pub landmarks: Landmarks,
    /// Short-edge scale of the pass that produced this detection.
    pub source_scale: f64,
    pub flipped: bool,
}

/// JSON-lines record emitted by the CLI.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image: String,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub score: f64,
    pub landmarks: Vec<[f64; 2]>,
}

impl Detection {
    pub fn to_record(&self, image: &str) -> DetectionRecord {
        DetectionRecord {
            image: image.to_string(),
            x: self.rect.x,
            y: self.rect.y,
            w: self.rect.w,
            h: self.rect.h,
            score: self.score,
            landmarks: self.landmarks.to_vec(),
        }
    }
}

fn default_score_threshold() -> f64 {
    0.02
}
fn default_nms_iou() -> f64 {
    0.4
}
fn default_top_k() -> usize {
    750
}
fn default_scales() -> Vec<usize> {
    vec![500, 800, 1100, 1400, 1700]
}
fn default_branch() -> u8 {
    2
}
fn default_max_resized_pixels() -> usize {
    16_000_000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InferenceConfig {
    #[serde(default = "default_score_threshold")]
    pub score_threshold: f64,
    #[serde(default = "default_nms_iou")]
    pub nms_iou: f64,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    /// Short-edge targets for the multi-scale protocol.
    #[serde(default = "default_scales")]
    pub scales: Vec<usize>,
    #[serde(default)]
    pub flip: bool,
    /// Which head branch to decode (1 or 2; the second refines the first).
    #[serde(default = "default_branch")]
    pub branch: u8,
    #[serde(default)]
    pub variances: Option<Variances>,
    /// Memory guard: reject passes whose resized area exceeds this.
    #[serde(default = "default_max_resized_pixels")]
    pub max_resized_pixels: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            score_threshold: default_score_threshold(),
            nms_iou: default_nms_iou(),
            top_k: default_top_k(),
            scales: default_scales(),
            flip: false,
            branch: default_branch(),
            variances: None,
            max_resized_pixels: default_max_resized_pixels(),
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(self.score_threshold > 0.0 && self.score_threshold <= 1.0) {
            return Err(PipelineError::Config(
                "score threshold must be in (0, 1]".into(),
            ));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            return Err(PipelineError::Config("nms iou must be in (0, 1)".into()));
        }
        if self.top_k == 0 {
            return Err(PipelineError::Config("top_k must be >= 1".into()));
        }
        if self.scales.is_empty() {
            return Err(PipelineError::Config("at least one scale required".into()));
        }
        if !(self.branch == 1 || self.branch == 2) {
            return Err(PipelineError::Config("branch must be 1 or 2".into()));
        }
        Ok(())
    }

    fn variances(&self) -> Variances {
        self.variances.unwrap_or_default()
    }
}

/// Face probability from a (face, background) logit pair.
fn face_probability(face_logit: f64, background_logit: f64) -> f64 {
    1.0 / (1.0 + (background_logit - face_logit).exp())
}

/// Run the network on one preprocessed tensor and decode every anchor row
/// above the score threshold into the original image frame (divide by
/// `scale`, clamp to the image bounds).
pub fn detect_single(
    tensor: &TensorBuf,
    scale: f64,
    orig_w: usize,
    orig_h: usize,
    graph: &LayerGraph,
    weights: &WeightStore,
    config: &InferenceConfig,
) -> Result<Vec<Detection>, PipelineError> {
    let outputs = run_forward(graph, weights, tensor)?;
    let cls = &outputs[&format!("cls{}", config.branch)];
    let boxes = &outputs[&format!("bbox{}", config.branch)];
    let landms = &outputs[&format!("landm{}", config.branch)];

    let anchors = generate_anchors(tensor.shape.w, tensor.shape.h);
    if cls.shape.h != anchors.len() {
        return Err(PipelineError::Format(format!(
            "head rows {} disagree with {} anchors at {}x{}",
            cls.shape.h,
            anchors.len(),
            tensor.shape.w,
            tensor.shape.h
        )));
    }

    let variances = config.variances();
    let mut detections = Vec::new();
    for (i, anchor) in anchors.iter().enumerate() {
        let p = face_probability(cls.data[2 * i] as f64, cls.data[2 * i + 1] as f64);
        if p <= config.score_threshold {
            continue;
        }
        let code: [f64; 4] = std::array::from_fn(|d| boxes.data[4 * i + d] as f64);
        let rect = decode_box(anchor, &code, variances);
        let lm_code: [f64; 10] = std::array::from_fn(|d| landms.data[10 * i + d] as f64);
        let points = decode_landmarks(anchor, &lm_code, variances);

        let mapped = Rect::new(
            rect.x / scale,
            rect.y / scale,
            rect.w / scale,
            rect.h / scale,
        );
        let clamped = clamp_rect(&mapped, orig_w as f64, orig_h as f64);
        let mut landmarks = [[0.0; 2]; 5];
        for (dst, src) in landmarks.iter_mut().zip(points) {
            *dst = [src[0] / scale, src[1] / scale];
        }
        detections.push(Detection {
            rect: clamped,
            score: p,
            landmarks,
            source_scale: scale,
            flipped: false,
        });
    }
    Ok(detections)
}

fn clamp_rect(rect: &Rect, w: f64, h: f64) -> Rect {
    let x0 = rect.x.clamp(0.0, w);
    let y0 = rect.y.clamp(0.0, h);
    let x1 = (rect.x + rect.w).clamp(0.0, w);
    let y1 = (rect.y + rect.h).clamp(0.0, h);
    Rect::new(x0, y0, (x1 - x0).max(0.0), (y1 - y0).max(0.0))
}

/// Candidate ordering for NMS: descending score, ties to the larger area,
/// further ties keep input order (the sort is stable).
fn sort_candidates(dets: &mut [Detection]) {
    dets.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(b.rect.area().partial_cmp(&a.rect.area()).unwrap())
    });
}

/// Greedy non-maximum suppression: walk the sorted list, keep a detection
/// iff its IoU with every kept detection is at or below the threshold.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    nms_limited(dets, iou_threshold, usize::MAX)
}

/// NMS that stops once `limit` detections are kept. Because kept results
/// accumulate in score order, this equals truncating the full result.
fn nms_limited(dets: &[Detection], iou_threshold: f64, limit: usize) -> Vec<Detection> {
    let mut ordered: Vec<Detection> = dets.to_vec();
    sort_candidates(&mut ordered);
    let mut kept: Vec<Detection> = Vec::new();
    for det in ordered {
        if kept.len() >= limit {
            break;
        }
        if kept
            .iter()
            .all(|k| iou(&k.rect, &det.rect) <= iou_threshold)
        {
            kept.push(det);
        }
    }
    kept
}

/// All candidates from every configured scale (and flip, when enabled),
/// mapped to the source frame, in deterministic pass order.
fn gather_candidates(
    image: &RawImage,
    graph: &LayerGraph,
    weights: &WeightStore,
    config: &InferenceConfig,
) -> Result<Vec<Detection>, PipelineError> {
    let flipped_image = config.flip.then(|| image.flip_horizontal());
    let mut pool = Vec::new();
    for &target in &config.scales {
        if target < 32 {
            return Err(PipelineError::Config(format!(
                "scale {target} is below the 32 px minimum"
            )));
        }
        let short = image.w.min(image.h);
        let ratio = target as f64 / short as f64;
        let pixels = ((image.w as f64 * ratio).ceil() * (image.h as f64 * ratio).ceil()) as usize;
        if pixels > config.max_resized_pixels {
            return Err(PipelineError::ResizeGuard {
                pixels,
                limit: config.max_resized_pixels,
            });
        }

        let (tensor, scale) = preprocess(image, target);
        pool.extend(detect_single(
            &tensor, scale, image.w, image.h, graph, weights, config,
        )?);

        if let Some(mirrored) = &flipped_image {
            let (tensor, scale) = preprocess(mirrored, target);
            let dets = detect_single(&tensor, scale, image.w, image.h, graph, weights, config)?;
            let w = image.w as f64;
            pool.extend(dets.into_iter().map(|d| flip_back(d, w)));
        }
    }
    Ok(pool)
}

fn flip_back(det: Detection, image_w: f64) -> Detection {
    let rect = Rect::new(
        image_w - det.rect.x - det.rect.w,
        det.rect.y,
        det.rect.w,
        det.rect.h,
    );
    let mut landmarks = [[0.0; 2]; 5];
    for (dst, &src_idx) in landmarks.iter_mut().zip(&LANDMARK_FLIP_PERMUTATION) {
        let p = det.landmarks[src_idx];
        *dst = [image_w - p[0], p[1]];
    }
    Detection {
        rect,
        landmarks,
        flipped: true,
        ..det
    }
}

/// Full protocol: detect at every scale (optionally with flips), pool the
/// candidates, run one global NMS, and keep the `top_k` best.
pub fn detect_multiscale(
    image: &RawImage,
    graph: &LayerGraph,
    weights: &WeightStore,
    config: &InferenceConfig,
) -> Result<Vec<Detection>, PipelineError> {
    config.validate()?;
    let pool = gather_candidates(image, graph, weights, config)?;
    Ok(nms_limited(&pool, config.nms_iou, config.top_k))
}
