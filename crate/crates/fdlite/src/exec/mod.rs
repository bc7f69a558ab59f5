//! Deterministic reference execution of a layer graph.
//!
//! Tensors are dense f32 buffers in row-major N,H,W,C order. Convolution and
//! batch-norm accumulate in f64 and store back f32; each output element is
//! reduced in a fixed order, so results are bit-identical across runs and
//! across thread counts — parallelism only ever splits work between output
//! elements.

mod weights;

pub use weights::{init_weights, load_weights, save_weights, validate_weights, WeightStore};

use crate::graph::{
    conv_out_dim, ConcatAxis, LayerGraph, LayerKind, LayerSpec, TensorShape, BN_EPS,
};
use rayon::prelude::*;
use std::collections::{BTreeMap, HashMap};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("node '{node}': {msg}")]
    Node { node: String, msg: String },
    #[error("node '{node}': missing weight '{name}'")]
    MissingWeight { node: String, name: String },
    #[error("node '{node}' produced non-finite values")]
    NonFinite { node: String },
    #[error("weight container format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Dense f32 tensor, row-major N,H,W,C.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorBuf {
    pub shape: TensorShape,
    pub data: Vec<f32>,
}

impl TensorBuf {
    pub fn new(shape: TensorShape, data: Vec<f32>) -> Self {
        assert_eq!(shape.elements(), data.len(), "shape/data length mismatch");
        TensorBuf { shape, data }
    }

    pub fn zeros(shape: TensorShape) -> Self {
        TensorBuf {
            data: vec![0.0; shape.elements()],
            shape,
        }
    }

    pub fn at(&self, n: usize, h: usize, w: usize, c: usize) -> f32 {
        let s = self.shape;
        self.data[((n * s.h + h) * s.w + w) * s.c + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Direct cross-correlation with symmetric zero padding. Kernel layout is
/// (out_channels, k_h, k_w, in_channels/groups).
///
/// Every output element is reduced in f64 in a fixed order — kernel row,
/// kernel column, then input channel — independent of parallelism. The
/// kernel is transposed once so the inner loop walks output channels
/// contiguously (one broadcast input scalar against a kernel run), which
/// vectorizes well while keeping one rounding chain per output element.
pub fn conv2d(
    input: &TensorBuf,
    kernel: &TensorBuf,
    bias: Option<&[f32]>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<TensorBuf, ExecError> {
    let TensorShape { n, h, w, c } = input.shape;
    let out_c = kernel.shape.n;
    let (kh, kw, icg) = (kernel.shape.h, kernel.shape.w, kernel.shape.c);
    if groups == 0 || c % groups != 0 || !out_c.is_multiple_of(groups) {
        return Err(ExecError::Shape(format!(
            "channels {c}->{out_c} not divisible by groups {groups}"
        )));
    }
    if icg != c / groups {
        return Err(ExecError::Shape(format!(
            "kernel expects {icg} channels per group, input provides {}",
            c / groups
        )));
    }
    if let Some(b) = bias {
        if b.len() != out_c {
            return Err(ExecError::Shape(format!(
                "bias length {} != {out_c} output channels",
                b.len()
            )));
        }
    }
    if stride == 0 {
        return Err(ExecError::Shape("stride must be >= 1".into()));
    }
    let oh = conv_out_dim(h, kh, stride, padding)
        .ok_or_else(|| ExecError::Shape("kernel exceeds padded input".into()))?;
    let ow = conv_out_dim(w, kw, stride, padding)
        .ok_or_else(|| ExecError::Shape("kernel exceeds padded input".into()))?;
    let ocg = out_c / groups;

    // (oc, ky, kx, ic) -> (ky, kx, g, ic, ocg): output channels innermost
    let mut kt = vec![0f32; kh * kw * out_c * icg];
    for oc in 0..out_c {
        let g = oc / ocg;
        for ky in 0..kh {
            for kx in 0..kw {
                for ic in 0..icg {
                    let src = ((oc * kh + ky) * kw + kx) * icg + ic;
                    let dst = ((((ky * kw + kx) * groups + g) * icg + ic) * ocg) + (oc % ocg);
                    kt[dst] = kernel.data[src];
                }
            }
        }
    }

    let mut out = vec![0f32; n * oh * ow * out_c];
    for batch in 0..n {
        let in_plane = &input.data[batch * h * w * c..][..h * w * c];
        let out_plane = &mut out[batch * oh * ow * out_c..][..oh * ow * out_c];
        out_plane
            .par_chunks_mut(ow * out_c)
            .enumerate()
            .for_each(|(oy, row)| {
                let y0 = (oy * stride) as isize - padding as isize;
                let mut acc = vec![0f64; out_c];
                for ox in 0..ow {
                    let x0 = (ox * stride) as isize - padding as isize;
                    acc.fill(0.0);
                    for ky in 0..kh {
                        let y = y0 + ky as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let x = x0 + kx as isize;
                            if x < 0 || x >= w as isize {
                                continue;
                            }
                            let in_off = ((y as usize * w) + x as usize) * c;
                            let k_base = ((ky * kw + kx) * groups) * icg * ocg;
                            for g in 0..groups {
                                let accg = &mut acc[g * ocg..(g + 1) * ocg];
                                for ic in 0..icg {
                                    let xv = in_plane[in_off + g * icg + ic] as f64;
                                    let run = k_base + (g * icg + ic) * ocg;
                                    for (a, kv) in accg.iter_mut().zip(&kt[run..run + ocg]) {
                                        *a += xv * *kv as f64;
                                    }
                                }
                            }
                        }
                    }
                    let cell = &mut row[ox * out_c..(ox + 1) * out_c];
                    match bias {
                        Some(b) => {
                            for ((dst, a), bv) in cell.iter_mut().zip(&acc).zip(b) {
                                *dst = (a + *bv as f64) as f32;
                            }
                        }
                        None => {
                            for (dst, a) in cell.iter_mut().zip(&acc) {
                                *dst = *a as f32;
                            }
                        }
                    }
                }
            });
    }
    Ok(TensorBuf::new(TensorShape::new(n, oh, ow, out_c), out))
}

/// Per-channel y = scale*(x - mean)/sqrt(var + eps) + shift, evaluated in f64.
pub fn batch_norm(
    input: &TensorBuf,
    scale: &[f32],
    shift: &[f32],
    mean: &[f32],
    var: &[f32],
    eps: f64,
) -> Result<TensorBuf, ExecError> {
    let c = input.shape.c;
    for (name, v) in [
        ("scale", scale),
        ("shift", shift),
        ("mean", mean),
        ("var", var),
    ] {
        if v.len() != c {
            return Err(ExecError::Shape(format!(
                "{name} length {} != {c} channels",
                v.len()
            )));
        }
    }
    if var.iter().any(|v| *v < 0.0) {
        return Err(ExecError::Data("negative variance".into()));
    }
    let denom: Vec<f64> = var.iter().map(|v| (*v as f64 + eps).sqrt()).collect();
    let data = input
        .data
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let ch = i % c;
            (scale[ch] as f64 * (*x as f64 - mean[ch] as f64) / denom[ch] + shift[ch] as f64) as f32
        })
        .collect();
    Ok(TensorBuf::new(input.shape, data))
}

/// x >= 0 -> x, x < 0 -> slope*x.
pub fn leaky_relu(input: &TensorBuf, slope: f32) -> TensorBuf {
    let data = input
        .data
        .iter()
        .map(|&x| if x >= 0.0 { x } else { slope * x })
        .collect();
    TensorBuf::new(input.shape, data)
}

/// Max over each window with symmetric padding; padded cells are -inf and
/// never selected (padding < kernel guarantees a non-empty window).
pub fn max_pool2d(
    input: &TensorBuf,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<TensorBuf, ExecError> {
    if padding >= kernel {
        return Err(ExecError::Shape("pool padding must be < kernel".into()));
    }
    let TensorShape { n, h, w, c } = input.shape;
    let oh = conv_out_dim(h, kernel, stride, padding)
        .ok_or_else(|| ExecError::Shape("kernel exceeds padded input".into()))?;
    let ow = conv_out_dim(w, kernel, stride, padding)
        .ok_or_else(|| ExecError::Shape("kernel exceeds padded input".into()))?;
    let mut out = vec![f32::NEG_INFINITY; n * oh * ow * c];
    for batch in 0..n {
        let in_plane = &input.data[batch * h * w * c..][..h * w * c];
        let out_plane = &mut out[batch * oh * ow * c..][..oh * ow * c];
        for oy in 0..oh {
            let y0 = (oy * stride) as isize - padding as isize;
            for ox in 0..ow {
                let x0 = (ox * stride) as isize - padding as isize;
                let cell = &mut out_plane[(oy * ow + ox) * c..][..c];
                for ky in 0..kernel {
                    let y = y0 + ky as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for kx in 0..kernel {
                        let x = x0 + kx as isize;
                        if x < 0 || x >= w as isize {
                            continue;
                        }
                        let src = &in_plane[((y as usize * w) + x as usize) * c..][..c];
                        for (dst, s) in cell.iter_mut().zip(src) {
                            if *s > *dst {
                                *dst = *s;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(TensorBuf::new(TensorShape::new(n, oh, ow, c), out))
}

/// Nearest-neighbour 2x upsample, then optional center crop/zero-pad to a
/// target spatial size (used against ceil-sized pyramid laterals).
pub(crate) fn upsample_nearest_2x(input: &TensorBuf, target: Option<(usize, usize)>) -> TensorBuf {
    let TensorShape { n, h, w, c } = input.shape;
    let (uh, uw) = (h * 2, w * 2);
    let (th, tw) = target.unwrap_or((uh, uw));
    let mut out = vec![0f32; n * th * tw * c];
    // center alignment: source row for target row y is (y + crop_y - pad_y)/2
    let off_y = uh as isize - th as isize; // >0 crop, <0 pad
    let off_x = uw as isize - tw as isize;
    let (crop_y, pad_y) = if off_y >= 0 {
        (off_y / 2, 0)
    } else {
        (0, (-off_y) / 2)
    };
    let (crop_x, pad_x) = if off_x >= 0 {
        (off_x / 2, 0)
    } else {
        (0, (-off_x) / 2)
    };
    for batch in 0..n {
        let in_plane = &input.data[batch * h * w * c..][..h * w * c];
        let out_plane = &mut out[batch * th * tw * c..][..th * tw * c];
        for ty in 0..th {
            let uy = ty as isize + crop_y - pad_y;
            if uy < 0 || uy >= uh as isize {
                continue;
            }
            let sy = uy as usize / 2;
            for tx in 0..tw {
                let ux = tx as isize + crop_x - pad_x;
                if ux < 0 || ux >= uw as isize {
                    continue;
                }
                let sx = ux as usize / 2;
                let dst = (ty * tw + tx) * c;
                let src = (sy * w + sx) * c;
                out_plane[dst..dst + c].copy_from_slice(&in_plane[src..src + c]);
            }
        }
    }
    TensorBuf::new(TensorShape::new(n, th, tw, c), out)
}

pub(crate) fn concat(inputs: &[&TensorBuf], axis: ConcatAxis) -> Result<TensorBuf, ExecError> {
    let first = inputs
        .first()
        .ok_or_else(|| ExecError::Shape("concat of nothing".into()))?
        .shape;
    match axis {
        ConcatAxis::Channel => {
            let c: usize = inputs.iter().map(|t| t.shape.c).sum();
            let shape = TensorShape::new(first.n, first.h, first.w, c);
            let mut out = Vec::with_capacity(shape.elements());
            for n in 0..first.n {
                for y in 0..first.h {
                    for x in 0..first.w {
                        for t in inputs {
                            let s = t.shape;
                            if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
                                return Err(ExecError::Shape(
                                    "channel concat inputs disagree on n/h/w".into(),
                                ));
                            }
                            let base = ((n * s.h + y) * s.w + x) * s.c;
                            out.extend_from_slice(&t.data[base..base + s.c]);
                        }
                    }
                }
            }
            Ok(TensorBuf::new(shape, out))
        }
        ConcatAxis::Row => {
            let h: usize = inputs.iter().map(|t| t.shape.h).sum();
            let shape = TensorShape::new(first.n, h, first.w, first.c);
            let mut out = Vec::with_capacity(shape.elements());
            for n in 0..first.n {
                for t in inputs {
                    let s = t.shape;
                    if (s.n, s.w, s.c) != (first.n, first.w, first.c) {
                        return Err(ExecError::Shape(
                            "row concat inputs disagree on n/w/c".into(),
                        ));
                    }
                    let plane = s.h * s.w * s.c;
                    out.extend_from_slice(&t.data[n * plane..(n + 1) * plane]);
                }
            }
            Ok(TensorBuf::new(shape, out))
        }
    }
}

pub(crate) fn add(inputs: &[&TensorBuf]) -> Result<TensorBuf, ExecError> {
    let first = inputs
        .first()
        .ok_or_else(|| ExecError::Shape("add of nothing".into()))?;
    let mut out = first.data.clone();
    for t in &inputs[1..] {
        if t.shape != first.shape {
            return Err(ExecError::Shape(format!(
                "add inputs disagree: {} vs {}",
                first.shape, t.shape
            )));
        }
        for (dst, s) in out.iter_mut().zip(&t.data) {
            *dst += *s;
        }
    }
    Ok(TensorBuf::new(first.shape, out))
}

/// Reinterpret (n,h,w,a*d) as per-anchor rows (n, h*w*a, 1, d); pure view
/// change, the flat order already matches.
pub(crate) fn reshape_rows(input: &TensorBuf, d: usize) -> Result<TensorBuf, ExecError> {
    let s = input.shape;
    if d == 0 || !s.c.is_multiple_of(d) {
        return Err(ExecError::Shape(format!(
            "channels {} not divisible by row width {d}",
            s.c
        )));
    }
    let rows = s.h * s.w * (s.c / d);
    Ok(TensorBuf::new(
        TensorShape::new(s.n, rows, 1, d),
        input.data.clone(),
    ))
}

fn weight<'a>(
    store: &'a WeightStore,
    node: &LayerSpec,
    suffix: &str,
) -> Result<&'a TensorBuf, ExecError> {
    let name = format!("{}.{}", node.weight_key, suffix);
    store.get(&name).ok_or_else(|| ExecError::MissingWeight {
        node: node.name.clone(),
        name,
    })
}

/// Evaluate the graph in its stored topological order and return every
/// declared output. Buffers are freed once their last consumer has run.
pub fn run_forward(
    graph: &LayerGraph,
    weights: &WeightStore,
    input: &TensorBuf,
) -> Result<BTreeMap<String, TensorBuf>, ExecError> {
    if input.shape.c != graph.input_channels {
        return Err(ExecError::Shape(format!(
            "input has {} channels, graph expects {}",
            input.shape.c, graph.input_channels
        )));
    }
    let mut pending = graph.consumer_counts();
    let mut live: HashMap<String, TensorBuf> = HashMap::new();
    live.insert(graph.input_name.clone(), input.clone());

    let at_node = |node: &LayerSpec, e: ExecError| -> ExecError {
        match e {
            ExecError::Shape(msg) | ExecError::Data(msg) => ExecError::Node {
                node: node.name.clone(),
                msg,
            },
            other => other,
        }
    };

    for node in graph.nodes() {
        let result = {
            let inputs: Vec<&TensorBuf> = node
                .inputs
                .iter()
                .map(|name| {
                    live.get(name).ok_or_else(|| ExecError::Node {
                        node: node.name.clone(),
                        msg: format!("producer '{name}' was freed or never computed"),
                    })
                })
                .collect::<Result<_, _>>()?;
            let first = inputs[0];
            match node.kind {
                LayerKind::Conv => {
                    let kernel = weight(weights, node, "weight")?;
                    let bias_buf = if node.has_bias {
                        Some(weight(weights, node, "bias")?)
                    } else {
                        None
                    };
                    conv2d(
                        first,
                        kernel,
                        bias_buf.map(|b| b.data.as_slice()),
                        node.stride,
                        node.padding,
                        node.groups,
                    )
                    .map_err(|e| at_node(node, e))?
                }
                LayerKind::BatchNorm => {
                    let scale = weight(weights, node, "scale")?;
                    let shift = weight(weights, node, "shift")?;
                    let mean = weight(weights, node, "mean")?;
                    let var = weight(weights, node, "var")?;
                    batch_norm(
                        first,
                        &scale.data,
                        &shift.data,
                        &mean.data,
                        &var.data,
                        BN_EPS,
                    )
                    .map_err(|e| at_node(node, e))?
                }
                LayerKind::LeakyReLU => leaky_relu(first, node.slope),
                LayerKind::MaxPool => max_pool2d(first, node.kernel_h, node.stride, node.padding)
                    .map_err(|e| at_node(node, e))?,
                LayerKind::UpsampleNearest2x => {
                    let target = inputs.get(1).map(|t| (t.shape.h, t.shape.w));
                    upsample_nearest_2x(first, target)
                }
                LayerKind::Concat => {
                    concat(&inputs, graph.concat_axis(&node.name)).map_err(|e| at_node(node, e))?
                }
                LayerKind::Add => add(&inputs).map_err(|e| at_node(node, e))?,
                LayerKind::Reshape => {
                    reshape_rows(first, node.out_channels).map_err(|e| at_node(node, e))?
                }
            }
        };
        if !result.is_finite() {
            return Err(ExecError::NonFinite {
                node: node.name.clone(),
            });
        }
        live.insert(node.name.clone(), result);
        for name in &node.inputs {
            if let Some(count) = pending.get_mut(name) {
                *count -= 1;
                if *count == 0 && !graph.outputs.iter().any(|o| o == name) {
                    live.remove(name);
                }
            }
        }
    }

    let mut outputs = BTreeMap::new();
    for name in &graph.outputs {
        let buf = live.remove(name).ok_or_else(|| ExecError::Node {
            node: name.clone(),
            msg: "declared output never computed".into(),
        })?;
        outputs.insert(name.clone(), buf);
    }
    Ok(outputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_fdlite, DetectorConfig};

    fn tensor(n: usize, h: usize, w: usize, c: usize, data: Vec<f32>) -> TensorBuf {
        TensorBuf::new(TensorShape::new(n, h, w, c), data)
    }

    /// Window-enumeration convolution, written as plainly as possible.
    fn conv_oracle(
        input: &TensorBuf,
        kernel: &TensorBuf,
        bias: Option<&[f32]>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> TensorBuf {
        let (n, h, w) = (input.shape.n, input.shape.h, input.shape.w);
        let (out_c, kh, kw, icg) = (
            kernel.shape.n,
            kernel.shape.h,
            kernel.shape.w,
            kernel.shape.c,
        );
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let ocg = out_c / groups;
        let mut out = TensorBuf::zeros(TensorShape::new(n, oh, ow, out_c));
        for b in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    for oc in 0..out_c {
                        let g = oc / ocg;
                        let mut acc = 0f64;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let y = (oy * stride + ky) as isize - padding as isize;
                                let x = (ox * stride + kx) as isize - padding as isize;
                                if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                                    continue;
                                }
                                for ic in 0..icg {
                                    let xv = input.at(b, y as usize, x as usize, g * icg + ic);
                                    let kv = kernel.at(oc, ky, kx, ic);
                                    acc += xv as f64 * kv as f64;
                                }
                            }
                        }
                        if let Some(bs) = bias {
                            acc += bs[oc] as f64;
                        }
                        out.data[((b * oh + oy) * ow + ox) * out_c + oc] = acc as f32;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn scalar_conv_multiplies() {
        let x = tensor(1, 1, 1, 1, vec![2.0]);
        let k = tensor(1, 1, 1, 1, vec![3.0]);
        let y = conv2d(&x, &k, None, 1, 0, 1).unwrap();
        assert_eq!(y.data, vec![6.0]);
    }

    #[test]
    fn ones_kernel_counts_window_coverage() {
        let x = tensor(1, 3, 3, 1, vec![1.0; 9]);
        let k = tensor(1, 3, 3, 1, vec![1.0; 9]);
        let y = conv2d(&x, &k, None, 1, 1, 1).unwrap();
        assert_eq!(y.shape, TensorShape::new(1, 3, 3, 1));
        assert_eq!(y.at(0, 1, 1, 0), 9.0);
        assert_eq!(y.at(0, 0, 0, 0), 4.0);
        assert_eq!(y.at(0, 0, 1, 0), 6.0);
    }

    #[test]
    fn conv_matches_enumeration_oracle_exactly_on_integers() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let c = [1usize, 2, 4, 6][rng.gen_range(0..4)];
            let groups = [1usize, 2, c][rng.gen_range(0..3)];
            let (c, oc) = if c.is_multiple_of(groups) {
                (c, 2 * groups)
            } else {
                (groups, groups)
            };
            let h = rng.gen_range(3..8);
            let w = rng.gen_range(3..8);
            let k = [1usize, 3][rng.gen_range(0..2)];
            let stride = rng.gen_range(1..3);
            let padding = rng.gen_range(0..k);
            let x = tensor(
                1,
                h,
                w,
                c,
                (0..h * w * c)
                    .map(|_| rng.gen_range(-4..5) as f32)
                    .collect(),
            );
            let kern = tensor(
                oc,
                k,
                k,
                c / groups,
                (0..oc * k * k * (c / groups))
                    .map(|_| rng.gen_range(-3..4) as f32)
                    .collect(),
            );
            let bias: Vec<f32> = (0..oc).map(|_| rng.gen_range(-2..3) as f32).collect();
            let got = conv2d(&x, &kern, Some(&bias), stride, padding, groups).unwrap();
            let want = conv_oracle(&x, &kern, Some(&bias), stride, padding, groups);
            assert_eq!(got.shape, want.shape);
            assert_eq!(got.data, want.data);
        }
    }

    #[test]
    fn depthwise_channels_never_mix() {
        // channel 0 sees kernel 10, channel 1 sees kernel 100
        let x = tensor(1, 1, 1, 2, vec![1.0, 2.0]);
        let k = tensor(2, 1, 1, 1, vec![10.0, 100.0]);
        let y = conv2d(&x, &k, None, 1, 0, 2).unwrap();
        assert_eq!(y.data, vec![10.0, 200.0]);
    }

    #[test]
    fn grouped_equals_block_diagonal_dense() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let (c, oc, groups, k) = (6usize, 4usize, 2usize, 3usize);
        let icg = c / groups;
        let ocg = oc / groups;
        let x = tensor(
            1,
            5,
            5,
            c,
            (0..25 * c).map(|_| rng.gen_range(-3..4) as f32).collect(),
        );
        let grouped = tensor(
            oc,
            k,
            k,
            icg,
            (0..oc * k * k * icg)
                .map(|_| rng.gen_range(-3..4) as f32)
                .collect(),
        );
        // dense kernel with zeros outside each group's channel block
        let mut dense = TensorBuf::zeros(TensorShape::new(oc, k, k, c));
        for o in 0..oc {
            let g = o / ocg;
            for ky in 0..k {
                for kx in 0..k {
                    for ic in 0..icg {
                        dense.data[((o * k + ky) * k + kx) * c + g * icg + ic] =
                            grouped.at(o, ky, kx, ic);
                    }
                }
            }
        }
        let a = conv2d(&x, &grouped, None, 1, 1, groups).unwrap();
        let b = conv2d(&x, &dense, None, 1, 1, 1).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn identity_pointwise_depthwise_is_identity() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let c = 5;
        let x = tensor(1, 4, 3, c, (0..12 * c).map(|_| rng.gen::<f32>()).collect());
        let k = tensor(c, 1, 1, 1, vec![1.0; c]);
        let y = conv2d(&x, &k, None, 1, 0, c).unwrap();
        assert_eq!(x.data, y.data);
    }

    #[test]
    fn conv_is_linear_within_tolerance() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let c = 3;
        let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
            tensor(
                1,
                6,
                6,
                c,
                (0..36 * c).map(|_| rng.gen::<f32>() - 0.5).collect(),
            )
        };
        let x = mk(&mut rng);
        let y = mk(&mut rng);
        let kern = tensor(
            4,
            3,
            3,
            c,
            (0..4 * 9 * c).map(|_| rng.gen::<f32>() - 0.5).collect(),
        );
        let (a, b) = (1.75f32, -0.4f32);
        let combined = tensor(
            1,
            6,
            6,
            c,
            x.data
                .iter()
                .zip(&y.data)
                .map(|(u, v)| a * u + b * v)
                .collect(),
        );
        let lhs = conv2d(&combined, &kern, None, 1, 1, 1).unwrap();
        let cx = conv2d(&x, &kern, None, 1, 1, 1).unwrap();
        let cy = conv2d(&y, &kern, None, 1, 1, 1).unwrap();
        for ((l, u), v) in lhs.data.iter().zip(&cx.data).zip(&cy.data) {
            let want = a * u + b * v;
            let err = (l - want).abs() / want.abs().max(1.0);
            assert!(err < 1e-4, "linearity violated: {l} vs {want}");
        }
    }

    #[test]
    fn batch_norm_examples() {
        let x = tensor(1, 1, 1, 1, vec![3.0]);
        // identity parameters
        let id = batch_norm(&x, &[1.0], &[0.0], &[0.0], &[1.0], 0.0).unwrap();
        assert_eq!(id.data, vec![3.0]);
        // 2*(3-1)/2 + 1 = 3
        let y = batch_norm(&x, &[2.0], &[1.0], &[1.0], &[4.0], 0.0).unwrap();
        assert_eq!(y.data, vec![3.0]);
        // constant input with mean = input collapses to shift
        let flat = tensor(1, 2, 2, 1, vec![5.0; 4]);
        let z = batch_norm(&flat, &[3.0], &[0.25], &[5.0], &[2.0], 0.0).unwrap();
        assert!(z.data.iter().all(|&v| v == 0.25));
        // negative variance is a data error
        assert!(matches!(
            batch_norm(&x, &[1.0], &[0.0], &[0.0], &[-1.0], 0.0),
            Err(ExecError::Data(_))
        ));
    }

    #[test]
    fn leaky_relu_examples() {
        let x = tensor(1, 1, 1, 3, vec![1.0, 0.0, -2.0]);
        let y = leaky_relu(&x, 0.1);
        assert_eq!(y.data, vec![1.0, 0.0, -0.2]);
    }

    /// Window-enumeration pooling oracle.
    fn max_pool_oracle(input: &TensorBuf, k: usize, stride: usize, padding: usize) -> TensorBuf {
        let (h, w, c) = (input.shape.h, input.shape.w, input.shape.c);
        let oh = (h + 2 * padding - k) / stride + 1;
        let ow = (w + 2 * padding - k) / stride + 1;
        let mut out = TensorBuf::zeros(TensorShape::new(1, oh, ow, c));
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = f32::NEG_INFINITY;
                    for ky in 0..k {
                        for kx in 0..k {
                            let y = (oy * stride + ky) as isize - padding as isize;
                            let x = (ox * stride + kx) as isize - padding as isize;
                            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                                continue;
                            }
                            best = best.max(input.at(0, y as usize, x as usize, ch));
                        }
                    }
                    out.data[(oy * ow + ox) * c + ch] = best;
                }
            }
        }
        out
    }

    #[test]
    fn max_pool_ramp_matches_enumeration_oracle() {
        let ramp = tensor(1, 4, 4, 1, (1..=16).map(|v| v as f32).collect());
        let got = max_pool2d(&ramp, 3, 2, 1).unwrap();
        let want = max_pool_oracle(&ramp, 3, 2, 1);
        assert_eq!(got.data, want.data);
        // frozen from the oracle: symmetric padding windows
        assert_eq!(got.data, vec![6.0, 8.0, 14.0, 16.0]);
    }

    #[test]
    fn max_pool_trivial_cases() {
        let flat = tensor(1, 3, 3, 2, vec![7.0; 18]);
        let pooled = max_pool2d(&flat, 3, 2, 1).unwrap();
        assert!(pooled.data.iter().all(|&v| v == 7.0));
        let pixel = tensor(1, 1, 1, 1, vec![4.5]);
        let same = max_pool2d(&pixel, 1, 1, 0).unwrap();
        assert_eq!(same.data, vec![4.5]);
    }

    #[test]
    fn upsample_copies_and_crops() {
        let x = tensor(1, 2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]);
        let up = upsample_nearest_2x(&x, None);
        assert_eq!(up.shape, TensorShape::new(1, 4, 4, 1));
        assert_eq!(up.at(0, 0, 1, 0), 1.0);
        assert_eq!(up.at(0, 3, 3, 0), 4.0);
        // crop to 3x4: offset (4-3)/2 = 0, last row dropped
        let cropped = upsample_nearest_2x(&x, Some((3, 4)));
        assert_eq!(cropped.shape, TensorShape::new(1, 3, 4, 1));
        assert_eq!(cropped.at(0, 2, 0, 0), 3.0);
        // pad to 6x4: one zero row top and bottom
        let padded = upsample_nearest_2x(&x, Some((6, 4)));
        assert_eq!(padded.at(0, 0, 0, 0), 0.0);
        assert_eq!(padded.at(0, 1, 0, 0), 1.0);
        assert_eq!(padded.at(0, 5, 0, 0), 0.0);
    }

    #[test]
    fn reshape_preserves_flat_order() {
        // (1,1,2,6) with anchor-major channels -> (1, 2*3, 1, 2)
        let x = tensor(1, 1, 2, 6, (0..12).map(|v| v as f32).collect());
        let rows = reshape_rows(&x, 2).unwrap();
        assert_eq!(rows.shape, TensorShape::new(1, 6, 1, 2));
        assert_eq!(rows.data, x.data);
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let g = build_fdlite(&DetectorConfig::default()).unwrap();
        let mut store = init_weights(&g, 0);
        for (_, buf) in store.iter_mut() {
            for v in &mut buf.data {
                if *v != 1.0 {
                    *v = 0.0; // keep BN scale/var at 1, zero everything else
                }
            }
        }
        let input = TensorBuf::zeros(TensorShape::new(1, 64, 64, 3));
        let out = run_forward(&g, &store, &input).unwrap();
        assert!(out["cls1"].data.iter().all(|&v| v == 0.0));
        assert!(out["cls2"].data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_bit_deterministic() {
        use rand::{Rng, SeedableRng};
        let g = build_fdlite(&DetectorConfig::default()).unwrap();
        let store = init_weights(&g, 42);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let input = TensorBuf::new(
            TensorShape::new(1, 64, 64, 3),
            (0..64 * 64 * 3).map(|_| rng.gen::<f32>()).collect(),
        );
        let a = run_forward(&g, &store, &input).unwrap();
        let b = run_forward(&g, &store, &input).unwrap();
        for (name, buf) in &a {
            assert_eq!(buf.data, b[name].data, "output {name} differs");
        }
    }

    #[test]
    fn missing_weight_names_the_node() {
        let g = build_fdlite(&DetectorConfig::default()).unwrap();
        let mut store = init_weights(&g, 0);
        store.remove("l1.cbl.conv.weight");
        let input = TensorBuf::zeros(TensorShape::new(1, 64, 64, 3));
        match run_forward(&g, &store, &input) {
            Err(ExecError::MissingWeight { node, name }) => {
                assert_eq!(node, "l1.cbl.conv");
                assert_eq!(name, "l1.cbl.conv.weight");
            }
            other => panic!("expected missing weight, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_intermediate_names_the_node() {
        let g = build_fdlite(&DetectorConfig::default()).unwrap();
        let mut store = init_weights(&g, 0);
        let poisoned = store.get("ife.cbl.bn.shift").unwrap().clone();
        let mut bad = poisoned;
        bad.data[0] = f32::INFINITY;
        store.insert("ife.cbl.bn.shift".to_string(), bad);
        let input = TensorBuf::zeros(TensorShape::new(1, 64, 64, 3));
        match run_forward(&g, &store, &input) {
            Err(ExecError::NonFinite { node }) => assert_eq!(node, "ife.cbl.bn"),
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }
}
