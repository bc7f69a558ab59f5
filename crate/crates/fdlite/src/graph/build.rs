//! Builders assembling the backbone and full detector graphs.
//!
//! Unit notation used throughout: a CBL is conv + batch-norm + LeakyReLU
//! (conv bias off), a CL is conv + LeakyReLU (bias on), a CDw is a pointwise
//! CBL followed by a depthwise CBL, and an FRU is the multi-branch residual
//! refinement unit (stem 3x3, a 3x3 and a 1x1 half-width branch, channel
//! concat, 3x3 fuse, residual add).

use super::{ConcatAxis, GraphError, LayerGraph, LayerKind, LayerSpec, BN_EPS};

/// Anchor shapes predicted per grid cell (three sizes, 1:1 aspect).
pub const ANCHORS_PER_CELL: usize = 3;

/// Detector head row widths: (name, per-anchor output dimension).
pub const HEAD_DIMS: [(&str, usize); 3] = [("cls", 2), ("bbox", 4), ("landm", 10)];

/// Declared graph outputs, one triple per head branch.
pub const BRANCH_OUTPUT_NAMES: [[&str; 3]; 2] =
    [["cls1", "bbox1", "landm1"], ["cls2", "bbox2", "landm2"]];

pub const DEFAULT_FPN_CHANNELS: usize = 32;

/// Convolution grouping used inside FRU units. `Dense` follows the unit
/// listing literally (g = 1 everywhere). `Grouped` turns the 3x3 convs into
/// group convolutions (g = output channels), a lighter reading offered for
/// budget comparison; the audit reports both against the published figures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FruVariant {
    Dense,
    Grouped,
}

impl std::str::FromStr for FruVariant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dense" => Ok(FruVariant::Dense),
            "grouped" => Ok(FruVariant::Grouped),
            other => Err(format!("unknown FRU variant '{other}' (dense|grouped)")),
        }
    }
}

/// Context-module topology. `Independent` gives each of the three branches
/// its own conv chain (1x, 2x, 3x stacked 3x3). `SharedStem` lets the two
/// deeper branches share their first 3x3, the arrangement used by SSH-style
/// detection modules.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CcpmVariant {
    Independent,
    SharedStem,
}

impl std::str::FromStr for CcpmVariant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "independent" => Ok(CcpmVariant::Independent),
            "shared" => Ok(CcpmVariant::SharedStem),
            other => Err(format!(
                "unknown context-module variant '{other}' (independent|shared)"
            )),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BackboneConfig {
    pub fru_variant: FruVariant,
    pub leaky_slope: f32,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            fru_variant: FruVariant::Dense,
            leaky_slope: 0.1,
        }
    }
}

impl BackboneConfig {
    fn validate(&self) -> Result<(), GraphError> {
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(GraphError::Config(format!(
                "leaky slope must be in (0,1), got {}",
                self.leaky_slope
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DetectorConfig {
    pub backbone: BackboneConfig,
    pub fpn_channels: usize,
    pub ccpm: CcpmVariant,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            backbone: BackboneConfig::default(),
            fpn_channels: DEFAULT_FPN_CHANNELS,
            ccpm: CcpmVariant::Independent,
        }
    }
}

impl DetectorConfig {
    fn validate(&self) -> Result<(), GraphError> {
        self.backbone.validate()?;
        if self.fpn_channels == 0 || !self.fpn_channels.is_multiple_of(4) {
            return Err(GraphError::Config(format!(
                "pyramid width {} must be a positive multiple of 4",
                self.fpn_channels
            )));
        }
        Ok(())
    }
}

struct Builder<'g> {
    graph: &'g mut LayerGraph,
    slope: f32,
}

// unit helpers mirror the conv notation, arity included
#[allow(clippy::too_many_arguments)]
impl<'g> Builder<'g> {
    fn conv(
        &mut self,
        name: &str,
        input: &str,
        k: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        bias: bool,
    ) -> Result<String, GraphError> {
        let mut spec = LayerSpec::new(name, LayerKind::Conv);
        spec.inputs = vec![input.to_string()];
        spec.kernel_h = k;
        spec.kernel_w = k;
        spec.in_channels = cin;
        spec.out_channels = cout;
        spec.stride = stride;
        spec.padding = padding;
        spec.groups = groups;
        spec.has_bias = bias;
        self.graph.add(spec)?;
        Ok(name.to_string())
    }

    fn bn(&mut self, name: &str, input: &str, channels: usize) -> Result<String, GraphError> {
        let mut spec = LayerSpec::new(name, LayerKind::BatchNorm);
        spec.inputs = vec![input.to_string()];
        spec.in_channels = channels;
        spec.out_channels = channels;
        self.graph.add(spec)?;
        Ok(name.to_string())
    }

    fn act(&mut self, name: &str, input: &str, channels: usize) -> Result<String, GraphError> {
        let mut spec = LayerSpec::new(name, LayerKind::LeakyReLU);
        spec.inputs = vec![input.to_string()];
        spec.in_channels = channels;
        spec.out_channels = channels;
        spec.slope = self.slope;
        self.graph.add(spec)?;
        Ok(name.to_string())
    }

    /// CBL(k x k x cin @ cout; s, p, g): conv without bias, then BN + LeakyReLU.
    fn cbl(
        &mut self,
        prefix: &str,
        input: &str,
        k: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<String, GraphError> {
        let conv = self.conv(
            &format!("{prefix}.conv"),
            input,
            k,
            cin,
            cout,
            stride,
            padding,
            groups,
            false,
        )?;
        let bn = self.bn(&format!("{prefix}.bn"), &conv, cout)?;
        self.act(&format!("{prefix}.act"), &bn, cout)
    }

    /// CL(k x k x cin @ cout; s, p, g): conv with bias, then LeakyReLU.
    fn cl(
        &mut self,
        prefix: &str,
        input: &str,
        k: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<String, GraphError> {
        let conv = self.conv(
            &format!("{prefix}.conv"),
            input,
            k,
            cin,
            cout,
            stride,
            padding,
            groups,
            true,
        )?;
        self.act(&format!("{prefix}.act"), &conv, cout)
    }

    /// CDw(k, q, s): pointwise CBL(1x1 k@q) then depthwise CBL(3x3 q@q; s,1,q).
    fn cdw(
        &mut self,
        prefix: &str,
        input: &str,
        k: usize,
        q: usize,
        stride: usize,
    ) -> Result<String, GraphError> {
        let pw = self.cbl(&format!("{prefix}.pw"), input, 1, k, q, 1, 0, 1)?;
        self.cbl(&format!("{prefix}.dw"), &pw, 3, q, q, stride, 1, q)
    }

    /// FRU(k): stem 3x3, parallel 3x3/1x1 half-width branches, channel
    /// concat, 3x3 fuse, residual add with the unit input.
    fn fru(
        &mut self,
        prefix: &str,
        input: &str,
        k: usize,
        variant: FruVariant,
    ) -> Result<String, GraphError> {
        if !k.is_multiple_of(2) {
            return Err(GraphError::Config(format!(
                "FRU channel count {k} must be even"
            )));
        }
        let g_full = match variant {
            FruVariant::Dense => 1,
            FruVariant::Grouped => k,
        };
        let g_half = match variant {
            FruVariant::Dense => 1,
            FruVariant::Grouped => k / 2,
        };
        let stem = self.cl(&format!("{prefix}.stem"), input, 3, k, k, 1, 1, g_full)?;
        let wide = self.cl(&format!("{prefix}.b3x3"), &stem, 3, k, k / 2, 1, 1, g_half)?;
        let narrow = self.cl(&format!("{prefix}.b1x1"), &stem, 1, k, k / 2, 1, 0, 1)?;
        let concat = format!("{prefix}.concat");
        let mut cat = LayerSpec::new(&concat, LayerKind::Concat);
        cat.inputs = vec![wide, narrow];
        cat.in_channels = k;
        cat.out_channels = k;
        self.graph.add_concat(cat, ConcatAxis::Channel)?;
        let fused = self.cl(&format!("{prefix}.fuse"), &concat, 3, k, k, 1, 1, g_full)?;
        let add = format!("{prefix}.add");
        let mut sum = LayerSpec::new(&add, LayerKind::Add);
        sum.inputs = vec![input.to_string(), fused];
        sum.in_channels = k;
        sum.out_channels = k;
        self.graph.add(sum)?;
        Ok(add)
    }

    fn max_pool(
        &mut self,
        name: &str,
        input: &str,
        k: usize,
        stride: usize,
        padding: usize,
        channels: usize,
    ) -> Result<String, GraphError> {
        let mut spec = LayerSpec::new(name, LayerKind::MaxPool);
        spec.inputs = vec![input.to_string()];
        spec.kernel_h = k;
        spec.kernel_w = k;
        spec.stride = stride;
        spec.padding = padding;
        spec.in_channels = channels;
        spec.out_channels = channels;
        self.graph.add(spec)?;
        Ok(name.to_string())
    }
}

/// Assemble the backbone into `graph`, returning the (C1, C2, C3) node names.
fn build_backbone_into(
    graph: &mut LayerGraph,
    config: &BackboneConfig,
) -> Result<[String; 3], GraphError> {
    let input = graph.input_name.clone();
    let v = config.fru_variant;
    let mut b = Builder {
        graph,
        slope: config.leaky_slope,
    };

    // IFE: CBL(7x7x3@8;2,3,1) -> CDw(8,16,1) -> CDw(16,32,2)
    let x = b.cbl("ife.cbl", &input, 7, 3, 8, 2, 3, 1)?;
    let x = b.cdw("ife.cdw1", &x, 8, 16, 1)?;
    let c_in = b.cdw("ife.cdw2", &x, 16, 32, 2)?;

    // L1: CBL(3x3x32@64;2,1,1) -> 2x FRU(64) -> CDw(64,64,1) -> FRU(64)
    let x = b.cbl("l1.cbl", &c_in, 3, 32, 64, 2, 1, 1)?;
    let x = b.fru("l1.fru1", &x, 64, v)?;
    let x = b.fru("l1.fru2", &x, 64, v)?;
    let x = b.cdw("l1.cdw", &x, 64, 64, 1)?;
    let c1 = b.fru("l1.fru3", &x, 64, v)?;

    // L2: same arrangement at 128 channels
    let x = b.cbl("l2.cbl", &c1, 3, 64, 128, 2, 1, 1)?;
    let x = b.fru("l2.fru1", &x, 128, v)?;
    let x = b.fru("l2.fru2", &x, 128, v)?;
    let x = b.cdw("l2.cdw", &x, 128, 128, 1)?;
    let c2 = b.fru("l2.fru3", &x, 128, v)?;

    // L3: MP(3x3;2,1) -> CDw(128,128,1) -> CDw(128,256,1) -> CDw(256,256,1)
    let x = b.max_pool("l3.pool", &c2, 3, 2, 1, 128)?;
    let x = b.cdw("l3.cdw1", &x, 128, 128, 1)?;
    let x = b.cdw("l3.cdw2", &x, 128, 256, 1)?;
    let c3 = b.cdw("l3.cdw3", &x, 256, 256, 1)?;

    Ok([c1, c2, c3])
}

/// Backbone graph alone, outputs C1..C3 (strides 8/16/32 at 64/128/256 channels).
pub fn build_blite(config: &BackboneConfig) -> Result<LayerGraph, GraphError> {
    config.validate()?;
    let mut graph = LayerGraph::new("input", 3);
    let [c1, c2, c3] = build_backbone_into(&mut graph, config)?;
    graph
        .metadata
        .insert("leaky_slope".into(), config.leaky_slope.to_string());
    graph.metadata.insert("bn_eps".into(), BN_EPS.to_string());
    for (alias, name) in [("C1", &c1), ("C2", &c2), ("C3", &c3)] {
        graph
            .metadata
            .insert(format!("output.{alias}"), name.clone());
    }
    graph.set_outputs(vec![c1, c2, c3])?;
    Ok(graph)
}

/// Pyramid level: lateral 1x1 onto `width` channels, top-down nearest-2x
/// upsample + add (upsample crops/pads to the lateral), 3x3 merge conv with
/// LeakyReLU per level. Returns merged P_i names, index 0 = finest.
fn build_fpn(
    b: &mut Builder,
    c: &[String; 3],
    c_channels: [usize; 3],
    width: usize,
) -> Result<[String; 3], GraphError> {
    let mut laterals = Vec::new();
    for (i, (name, cin)) in c.iter().zip(c_channels).enumerate() {
        laterals.push(b.conv(
            &format!("fpn.lat{}", i + 1),
            name,
            1,
            cin,
            width,
            1,
            0,
            1,
            true,
        )?);
    }

    let merge = |b: &mut Builder, level: usize, input: &str| -> Result<String, GraphError> {
        b.conv(
            &format!("fpn.merge{level}.conv"),
            input,
            3,
            width,
            width,
            1,
            1,
            1,
            true,
        )
        .and_then(|conv| b.act(&format!("fpn.merge{level}.act"), &conv, width))
    };

    let p3 = merge(b, 3, &laterals[2])?;

    let mut up3 = LayerSpec::new("fpn.up3", LayerKind::UpsampleNearest2x);
    up3.inputs = vec![p3.clone(), laterals[1].clone()];
    up3.in_channels = width;
    up3.out_channels = width;
    b.graph.add(up3)?;
    let mut add2 = LayerSpec::new("fpn.add2", LayerKind::Add);
    add2.inputs = vec![laterals[1].clone(), "fpn.up3".into()];
    add2.in_channels = width;
    add2.out_channels = width;
    b.graph.add(add2)?;
    let p2 = merge(b, 2, "fpn.add2")?;

    let mut up2 = LayerSpec::new("fpn.up2", LayerKind::UpsampleNearest2x);
    up2.inputs = vec![p2.clone(), laterals[0].clone()];
    up2.in_channels = width;
    up2.out_channels = width;
    b.graph.add(up2)?;
    let mut add1 = LayerSpec::new("fpn.add1", LayerKind::Add);
    add1.inputs = vec![laterals[0].clone(), "fpn.up2".into()];
    add1.in_channels = width;
    add1.out_channels = width;
    b.graph.add(add1)?;
    let p1 = merge(b, 1, "fpn.add1")?;

    Ok([p1, p2, p3])
}

/// One context module: branch a 3x3 to c/2, branch b stacked 3x3s to c/4,
/// branch c three stacked 3x3s to c/4; channel concat back to c, LeakyReLU
/// after the concat. Branch-final convs carry no activation of their own.
fn build_context_module(
    b: &mut Builder,
    prefix: &str,
    input: &str,
    channels: usize,
    variant: CcpmVariant,
) -> Result<String, GraphError> {
    let half = channels / 2;
    let quarter = channels / 4;
    let a = b.conv(
        &format!("{prefix}.a.conv"),
        input,
        3,
        channels,
        half,
        1,
        1,
        1,
        true,
    )?;
    let b1 = b.cl(
        &format!("{prefix}.b1"),
        input,
        3,
        channels,
        quarter,
        1,
        1,
        1,
    )?;
    let b2 = b.conv(
        &format!("{prefix}.b2.conv"),
        &b1,
        3,
        quarter,
        quarter,
        1,
        1,
        1,
        true,
    )?;
    let c_stem = match variant {
        CcpmVariant::Independent => b.cl(
            &format!("{prefix}.c1"),
            input,
            3,
            channels,
            quarter,
            1,
            1,
            1,
        )?,
        CcpmVariant::SharedStem => b1,
    };
    let c2 = b.cl(
        &format!("{prefix}.c2"),
        &c_stem,
        3,
        quarter,
        quarter,
        1,
        1,
        1,
    )?;
    let c3 = b.conv(
        &format!("{prefix}.c3.conv"),
        &c2,
        3,
        quarter,
        quarter,
        1,
        1,
        1,
        true,
    )?;
    let concat = format!("{prefix}.concat");
    let mut cat = LayerSpec::new(&concat, LayerKind::Concat);
    cat.inputs = vec![a, b2, c3];
    cat.in_channels = channels;
    cat.out_channels = channels;
    b.graph.add_concat(cat, ConcatAxis::Channel)?;
    b.act(&format!("{prefix}.act"), &concat, channels)
}

/// Full detector: backbone, pyramid, two cascaded context modules per level,
/// and the shared per-level head triple applied to both module outputs. Head
/// maps are flattened to per-anchor rows and stacked level-major into the six
/// declared outputs (cls/bbox/landm per branch).
pub fn build_fdlite(config: &DetectorConfig) -> Result<LayerGraph, GraphError> {
    config.validate()?;
    let mut graph = LayerGraph::new("input", 3);
    let c = build_backbone_into(&mut graph, &config.backbone)?;
    let width = config.fpn_channels;
    let mut b = Builder {
        graph: &mut graph,
        slope: config.backbone.leaky_slope,
    };

    let p = build_fpn(&mut b, &c, [64, 128, 256], width)?;

    // ccpm{u}.l{i}: first module takes P_i, second takes the first's output.
    let mut ccpm_out = [
        [String::new(), String::new(), String::new()],
        [String::new(), String::new(), String::new()],
    ];
    for (i, p_name) in p.iter().enumerate() {
        let first = build_context_module(
            &mut b,
            &format!("ccpm1.l{}", i + 1),
            p_name,
            width,
            config.ccpm,
        )?;
        let second = build_context_module(
            &mut b,
            &format!("ccpm2.l{}", i + 1),
            &first,
            width,
            config.ccpm,
        )?;
        ccpm_out[0][i] = first;
        ccpm_out[1][i] = second;
    }

    // Shared heads: branch u nodes at level i reuse the weight key
    // "head.l{i}.{task}" regardless of u.
    for (u, branch_outputs) in BRANCH_OUTPUT_NAMES.iter().enumerate() {
        for ((task, dim), output_name) in HEAD_DIMS.iter().zip(branch_outputs) {
            let mut row_nodes = Vec::new();
            for (i, src) in ccpm_out[u].iter().enumerate() {
                let key = format!("head.l{}.{}", i + 1, task);
                let conv_name = format!("{key}.u{}", u + 1);
                let mut conv = LayerSpec::new(&conv_name, LayerKind::Conv);
                conv.inputs = vec![src.clone()];
                conv.kernel_h = 1;
                conv.kernel_w = 1;
                conv.in_channels = width;
                conv.out_channels = ANCHORS_PER_CELL * dim;
                conv.has_bias = true;
                conv.weight_key = key;
                b.graph.add(conv)?;

                let rows_name = format!("{conv_name}.rows");
                let mut rows = LayerSpec::new(&rows_name, LayerKind::Reshape);
                rows.inputs = vec![conv_name.clone()];
                rows.in_channels = ANCHORS_PER_CELL * dim;
                rows.out_channels = *dim;
                b.graph.add(rows)?;
                row_nodes.push(rows_name);
            }
            let mut cat = LayerSpec::new(*output_name, LayerKind::Concat);
            cat.inputs = row_nodes;
            cat.in_channels = *dim;
            cat.out_channels = *dim;
            b.graph.add_concat(cat, ConcatAxis::Row)?;
        }
    }

    graph.metadata.insert(
        "leaky_slope".into(),
        config.backbone.leaky_slope.to_string(),
    );
    graph.metadata.insert("bn_eps".into(), BN_EPS.to_string());
    graph.metadata.insert(
        "anchor_ordering".into(),
        "level-major (stride 8,16,32), then row-major grid cells, then size index".into(),
    );
    graph
        .metadata
        .insert("anchors_per_cell".into(), ANCHORS_PER_CELL.to_string());
    let outputs = BRANCH_OUTPUT_NAMES
        .iter()
        .flatten()
        .map(|s| s.to_string())
        .collect();
    graph.set_outputs(outputs)?;
    Ok(graph)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{count_flops, count_params, shape_infer, LayerKind, TensorShape};

    // Closed-form unit sums, written out independently of the builders so the
    // two routes can disagree.
    mod oracle {
        pub fn cbl(m: usize, k: usize, q: usize, g: usize) -> u64 {
            (m * m * (k / g) * q + 2 * q) as u64
        }
        pub fn cl(m: usize, k: usize, q: usize, g: usize) -> u64 {
            (m * m * (k / g) * q + q) as u64
        }
        pub fn cdw(k: usize, q: usize) -> u64 {
            cbl(1, k, q, 1) + cbl(3, q, q, q)
        }
        pub fn fru_dense(k: usize) -> u64 {
            cl(3, k, k, 1) + cl(3, k, k / 2, 1) + cl(1, k, k / 2, 1) + cl(3, k, k, 1)
        }
        pub fn fru_grouped(k: usize) -> u64 {
            cl(3, k, k, k) + cl(3, k, k / 2, k / 2) + cl(1, k, k / 2, 1) + cl(3, k, k, k)
        }
        pub fn backbone(fru: fn(usize) -> u64) -> u64 {
            let ife = cbl(7, 3, 8, 1) + cdw(8, 16) + cdw(16, 32);
            let l1 = cbl(3, 32, 64, 1) + 3 * fru(64) + cdw(64, 64);
            let l2 = cbl(3, 64, 128, 1) + 3 * fru(128) + cdw(128, 128);
            let l3 = cdw(128, 128) + cdw(128, 256) + cdw(256, 256);
            ife + l1 + l2 + l3
        }
        pub fn fpn(width: usize) -> u64 {
            let lat: u64 = [64usize, 128, 256]
                .iter()
                .map(|&c| (c * width + width) as u64)
                .sum();
            let merge = 3 * (3 * 3 * width * width + width) as u64;
            lat + merge
        }
        pub fn context_module(c: usize) -> u64 {
            let conv = |k: usize, cin: usize, cout: usize| (k * k * cin * cout + cout) as u64;
            conv(3, c, c / 2)
                + conv(3, c, c / 4)
                + conv(3, c / 4, c / 4)
                + conv(3, c, c / 4)
                + conv(3, c / 4, c / 4)
                + conv(3, c / 4, c / 4)
        }
        pub fn heads(width: usize) -> u64 {
            // shared between branches: counted once per level
            (0..3)
                .map(|_| {
                    [(2usize), 4, 10]
                        .iter()
                        .map(|d| (width * 3 * d + 3 * d) as u64)
                        .sum::<u64>()
                })
                .sum()
        }
        pub fn detector(width: usize) -> u64 {
            backbone(fru_dense) + fpn(width) + 6 * context_module(width) + heads(width)
        }
    }

    fn vga() -> TensorShape {
        TensorShape::new(1, 480, 640, 3)
    }

    #[test]
    fn blite_feature_shapes_at_vga() {
        let g = build_blite(&BackboneConfig::default()).unwrap();
        let shapes = shape_infer(&g, vga()).unwrap();
        assert_eq!(shapes[&g.outputs[0]], TensorShape::new(1, 60, 80, 64));
        assert_eq!(shapes[&g.outputs[1]], TensorShape::new(1, 30, 40, 128));
        assert_eq!(shapes[&g.outputs[2]], TensorShape::new(1, 15, 20, 256));
    }

    #[test]
    fn ife_reduces_spatial_by_four() {
        let g = build_blite(&BackboneConfig::default()).unwrap();
        for (h, w) in [(64, 64), (128, 256), (480, 640)] {
            let shapes = shape_infer(&g, TensorShape::new(1, h, w, 3)).unwrap();
            assert_eq!(
                shapes["ife.cdw2.dw.act"],
                TensorShape::new(1, h / 4, w / 4, 32)
            );
        }
    }

    #[test]
    fn backbone_strides_hold_across_sizes() {
        let g = build_blite(&BackboneConfig::default()).unwrap();
        for size in [64usize, 128, 320, 480, 640] {
            let shapes = shape_infer(&g, TensorShape::new(1, size, size, 3)).unwrap();
            for (i, out) in g.outputs.iter().enumerate() {
                let div = 1 << (i + 3);
                assert_eq!(shapes[out].h, size / div, "level {i} at {size}");
                assert_eq!(shapes[out].w, size / div);
            }
        }
    }

    #[test]
    fn cbl_expands_to_three_primitive_nodes() {
        let g = build_blite(&BackboneConfig::default()).unwrap();
        let cbl_nodes: Vec<_> = g
            .nodes()
            .iter()
            .filter(|n| n.name.starts_with("ife.cbl."))
            .collect();
        assert_eq!(cbl_nodes.len(), 3);
        assert_eq!(cbl_nodes[0].kind, LayerKind::Conv);
        assert!(!cbl_nodes[0].has_bias);
        assert_eq!(cbl_nodes[1].kind, LayerKind::BatchNorm);
        assert_eq!(cbl_nodes[2].kind, LayerKind::LeakyReLU);
    }

    fn params_with_prefix(g: &LayerGraph, prefix: &str) -> u64 {
        count_params(g)
            .per_node
            .iter()
            .filter(|n| n.name.starts_with(prefix))
            .map(|n| n.params)
            .sum()
    }

    #[test]
    fn unit_param_counts_match_closed_forms() {
        let g = build_blite(&BackboneConfig::default()).unwrap();
        assert_eq!(params_with_prefix(&g, "ife.cbl."), 1192);
        assert_eq!(params_with_prefix(&g, "ife.cdw1."), 336);
        assert_eq!(params_with_prefix(&g, "l1.fru1."), 94_400);
        assert_eq!(oracle::fru_dense(64), 94_400);
    }

    #[test]
    fn backbone_total_matches_spreadsheet_oracle() {
        let dense = build_blite(&BackboneConfig::default()).unwrap();
        assert_eq!(
            count_params(&dense).total_params,
            oracle::backbone(oracle::fru_dense)
        );

        let grouped = build_blite(&BackboneConfig {
            fru_variant: FruVariant::Grouped,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(
            count_params(&grouped).total_params,
            oracle::backbone(oracle::fru_grouped)
        );
        assert!(count_params(&grouped).total_params < count_params(&dense).total_params);
    }

    #[test]
    fn detector_total_matches_spreadsheet_oracle() {
        let g = build_fdlite(&DetectorConfig::default()).unwrap();
        assert_eq!(count_params(&g).total_params, oracle::detector(32));
    }

    #[test]
    fn fru_residual_adds_join_equal_shapes() {
        let g = build_fdlite(&DetectorConfig::default()).unwrap();
        let shapes = shape_infer(&g, vga()).unwrap();
        for node in g.nodes().iter().filter(|n| n.kind == LayerKind::Add) {
            let first = shapes[&node.inputs[0]];
            for input in &node.inputs[1..] {
                assert_eq!(shapes[input], first, "add node {}", node.name);
            }
        }
    }

    #[test]
    fn head_weight_keys_are_shared_between_branches() {
        let g = build_fdlite(&DetectorConfig::default()).unwrap();
        for level in 1..=3 {
            for (task, _) in HEAD_DIMS {
                let u1 = g.node(&format!("head.l{level}.{task}.u1")).unwrap();
                let u2 = g.node(&format!("head.l{level}.{task}.u2")).unwrap();
                assert_eq!(u1.weight_key, u2.weight_key);
                assert_eq!(u1.weight_key, format!("head.l{level}.{task}"));
            }
        }
    }

    #[test]
    fn head_channels_are_six_twelve_thirty() {
        let g = build_fdlite(&DetectorConfig::default()).unwrap();
        assert_eq!(g.node("head.l1.cls.u1").unwrap().out_channels, 6);
        assert_eq!(g.node("head.l1.bbox.u1").unwrap().out_channels, 12);
        assert_eq!(g.node("head.l1.landm.u1").unwrap().out_channels, 30);
    }

    #[test]
    fn head_rows_at_vga_cover_the_anchor_grid() {
        let g = build_fdlite(&DetectorConfig::default()).unwrap();
        let shapes = shape_infer(&g, vga()).unwrap();
        // 80*60*3 + 40*30*3 + 20*15*3
        assert_eq!(shapes["cls1"], TensorShape::new(1, 18_900, 1, 2));
        assert_eq!(shapes["bbox1"], TensorShape::new(1, 18_900, 1, 4));
        assert_eq!(shapes["landm1"], TensorShape::new(1, 18_900, 1, 10));
        for (a, b) in BRANCH_OUTPUT_NAMES[0].iter().zip(BRANCH_OUTPUT_NAMES[1]) {
            assert_eq!(shapes[*a], shapes[b]);
        }
    }

    #[test]
    fn doubling_input_quadruples_conv_flops() {
        let g = build_fdlite(&DetectorConfig::default()).unwrap();
        let conv_total = |shape: TensorShape| -> u64 {
            count_flops(&g, shape)
                .unwrap()
                .per_node
                .iter()
                .filter(|n| g.node(&n.name).unwrap().kind == LayerKind::Conv)
                .map(|n| n.flops)
                .sum()
        };
        let base = conv_total(TensorShape::new(1, 160, 224, 3));
        let doubled = conv_total(TensorShape::new(1, 320, 448, 3));
        assert_eq!(doubled, 4 * base);
        let params_small = count_flops(&g, TensorShape::new(1, 160, 224, 3)).unwrap();
        let params_large = count_flops(&g, TensorShape::new(1, 320, 448, 3)).unwrap();
        assert_eq!(params_small.total_params, params_large.total_params);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad_slope = BackboneConfig {
            leaky_slope: 0.0,
            ..Default::default()
        };
        assert!(matches!(
            build_blite(&bad_slope),
            Err(GraphError::Config(_))
        ));

        let bad_width = DetectorConfig {
            fpn_channels: 30,
            ..Default::default()
        };
        assert!(matches!(
            build_fdlite(&bad_width),
            Err(GraphError::Config(_))
        ));
    }

    #[test]
    fn shared_stem_variant_builds_and_is_lighter() {
        let shared = build_fdlite(&DetectorConfig {
            ccpm: CcpmVariant::SharedStem,
            ..Default::default()
        })
        .unwrap();
        let independent = build_fdlite(&DetectorConfig::default()).unwrap();
        shape_infer(&shared, vga()).unwrap();
        assert!(count_params(&shared).total_params < count_params(&independent).total_params);
    }

    #[test]
    fn audit_at_vga_is_fast() {
        let start = std::time::Instant::now();
        let g = build_fdlite(&DetectorConfig::default()).unwrap();
        let _ = count_params(&g);
        let _ = count_flops(&g, vga()).unwrap();
        assert!(start.elapsed().as_secs_f64() < 1.0);
    }
}
