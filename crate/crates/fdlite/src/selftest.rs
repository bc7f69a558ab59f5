//! Built-in oracle checks behind the `selftest` CLI subcommand: quick,
//! self-contained versions of the verification suites, each with an
//! independent expected value. Returns one result per named check.

use crate::anchor::{
    decode_box, encode_box, encode_targets, generate_anchors, iou, match_anchors, AnchorBox,
    AnchorLabel, GroundTruthFace, MatchPolicy, Rect, Variances,
};
use crate::eval::{average_precision, tpr_at_fp, DetFlag};
use crate::exec::{
    batch_norm, conv2d, init_weights, load_weights, max_pool2d, run_forward, save_weights,
    TensorBuf,
};
use crate::graph::{
    build_blite, build_fdlite, count_params, shape_infer, BackboneConfig, DetectorConfig,
    TensorShape,
};
use crate::loss::{
    combine_terms, cross_entropy, loss_gradients, ohem_select, smooth_l1, total_loss,
    BranchOutputs, LossConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type CheckResult = (&'static str, Result<(), String>);

fn ensure(cond: bool, msg: &str) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.to_string())
    }
}

fn check_architecture_audit() -> Result<(), String> {
    let graph = build_blite(&BackboneConfig::default()).map_err(|e| e.to_string())?;
    let params = count_params(&graph);
    let by_prefix = |prefix: &str| -> u64 {
        params
            .per_node
            .iter()
            .filter(|n| n.name.starts_with(prefix))
            .map(|n| n.params)
            .sum()
    };
    ensure(
        by_prefix("ife.cbl.") == 1192,
        "7x7 stem unit params != 1192",
    )?;
    ensure(
        by_prefix("ife.cdw1.") == 336,
        "first bottleneck != 336 params",
    )?;
    ensure(by_prefix("l1.fru1.") == 94_400, "FRU(64) != 94400 params")?;
    let shapes =
        shape_infer(&graph, TensorShape::new(1, 480, 640, 3)).map_err(|e| e.to_string())?;
    ensure(
        shapes[&graph.outputs[0]] == TensorShape::new(1, 60, 80, 64)
            && shapes[&graph.outputs[1]] == TensorShape::new(1, 30, 40, 128)
            && shapes[&graph.outputs[2]] == TensorShape::new(1, 15, 20, 256),
        "backbone feature shapes at VGA are off",
    )
}

fn check_head_rows() -> Result<(), String> {
    let graph = build_fdlite(&DetectorConfig::default()).map_err(|e| e.to_string())?;
    let shapes =
        shape_infer(&graph, TensorShape::new(1, 480, 640, 3)).map_err(|e| e.to_string())?;
    ensure(shapes["cls1"].h == 18_900, "cls rows at VGA != 18900")?;
    ensure(shapes["cls1"] == shapes["cls2"], "branch shapes differ")
}

fn check_anchors() -> Result<(), String> {
    let anchors = generate_anchors(640, 480);
    ensure(anchors.len() == 18_900, "anchor count at VGA != 18900")?;
    ensure(
        anchors[0].cx == 4.0 && anchors[0].cy == 4.0 && anchors[0].side == 16.0,
        "first anchor is not (4,4) side 16",
    )?;
    let sides: Vec<f64> = anchors.iter().take(3).map(|a| a.side).collect();
    ensure(
        sides == [16.0, 24.0, 32.0],
        "level-1 sides are not {16,24,32}",
    )
}

fn check_encode_round_trip() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let v = Variances::default();
    for _ in 0..1000 {
        let anchor = AnchorBox {
            cx: rng.gen_range(4.0..640.0),
            cy: rng.gen_range(4.0..480.0),
            side: [16.0, 96.0, 384.0][rng.gen_range(0..3)],
            level: 1,
            row: 0,
            col: 0,
        };
        let gt = Rect::new(
            rng.gen_range(0.0..600.0),
            rng.gen_range(0.0..440.0),
            rng.gen_range(1.0..512.0),
            rng.gen_range(1.0..512.0),
        );
        let code = encode_box(&anchor, &gt, v).map_err(|e| e.to_string())?;
        let back = decode_box(&anchor, &code, v);
        let err = (back.x - gt.x)
            .abs()
            .max((back.y - gt.y).abs())
            .max((back.w - gt.w).abs())
            .max((back.h - gt.h).abs());
        ensure(err < 1e-6, "encode/decode round trip above 1e-6")?;
    }
    Ok(())
}

fn check_matching_policies() -> Result<(), String> {
    let anchor = |cx: f64, cy: f64, side: f64| AnchorBox {
        cx,
        cy,
        side,
        level: 1,
        row: 0,
        col: 0,
    };
    let anchors = vec![anchor(16.0, 16.0, 32.0), anchor(16.0, 8.0, 24.0)];
    let gts =
        vec![GroundTruthFace::new(Rect::new(0.0, 0.0, 32.0, 16.0), None)
            .map_err(|e| e.to_string())?];
    let half = iou(&anchors[0].rect(), &gts[0].rect);
    ensure((half - 0.5).abs() < 1e-12, "toy anchor IoU is not 0.5")?;
    let first = match_anchors(&anchors, &gts, MatchPolicy::branch1());
    ensure(
        first.labels[0] == AnchorLabel::Ignored,
        "0.5-IoU anchor not ignored under the dual policy",
    )?;
    let second = match_anchors(&anchors, &gts, MatchPolicy::branch2());
    ensure(
        second.labels[0] == AnchorLabel::Positive(0),
        "0.5-IoU anchor not positive under the single policy",
    )
}

fn check_ohem() -> Result<(), String> {
    use crate::anchor::MatchAssignment;
    let mut labels = vec![AnchorLabel::Positive(0), AnchorLabel::Positive(0)];
    labels.extend(std::iter::repeat_n(AnchorLabel::Negative, 20));
    let assignment = MatchAssignment {
        labels,
        policy: MatchPolicy::branch2(),
    };
    let losses: Vec<f64> = (0..22).map(|i| i as f64).collect();
    let selected = ohem_select(&losses, &assignment, 7);
    ensure(selected.len() == 14, "OHEM selection != 14 for P=2 ratio 7")?;

    let empty = MatchAssignment {
        labels: vec![AnchorLabel::Negative; 30],
        policy: MatchPolicy::branch2(),
    };
    let selected = ohem_select(&vec![1.0; 30], &empty, 7);
    ensure(selected.len() == 7, "OHEM budget without positives != 7")
}

fn check_loss_closed_forms() -> Result<(), String> {
    let ln2 = std::f64::consts::LN_2;
    ensure(
        (cross_entropy([0.0, 0.0], true) - ln2).abs() < 1e-12,
        "CE at even logits != ln 2",
    )?;
    ensure(
        (smooth_l1(&[0.5], &[0.0]) - 0.125).abs() < 1e-12,
        "smooth-L1 at 0.5 != 0.125",
    )?;
    ensure(
        (smooth_l1(&[2.0], &[0.0]) - 1.5).abs() < 1e-12,
        "smooth-L1 at 2 != 1.5",
    )?;
    let combined = combine_terms(0.2, 0.4, 1.0, &LossConfig::default());
    ensure((combined - 0.4).abs() < 1e-12, "term combination != 0.4")
}

fn check_gradients_fd() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let config = LossConfig::default();
    let step = 1e-3;
    for _ in 0..10 {
        let anchors = generate_anchors(64, 64);
        let cx = rng.gen_range(16.0..48.0);
        let cy = rng.gen_range(16.0..48.0);
        let gts = vec![
            GroundTruthFace::new(Rect::new(cx - 10.0, cy - 10.0, 20.0, 20.0), None)
                .map_err(|e| e.to_string())?,
        ];
        let assignment = match_anchors(&anchors, &gts, config.policy2);
        let targets = encode_targets(&anchors, &assignment, &gts, config.variances)
            .map_err(|e| e.to_string())?;
        let outputs = BranchOutputs {
            cls: (0..anchors.len())
                .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
                .collect(),
            boxes: (0..anchors.len())
                .map(|_| std::array::from_fn(|_| rng.gen_range(-0.8..0.8)))
                .collect(),
            landms: (0..anchors.len())
                .map(|_| std::array::from_fn(|_| rng.gen_range(-0.8..0.8)))
                .collect(),
        };
        let grads =
            loss_gradients(&outputs, &assignment, &targets, &config).map_err(|e| e.to_string())?;

        // probe one classification logit of a positive anchor
        let i = targets.anchor_indices[0];
        let eval = |outputs: &BranchOutputs| -> f64 {
            use crate::loss::{branch_loss_with_selection, ohem_select};
            let cls_losses: Vec<f64> = assignment
                .labels
                .iter()
                .zip(&outputs.cls)
                .map(|(l, z)| match l {
                    AnchorLabel::Positive(_) => cross_entropy(*z, true),
                    AnchorLabel::Negative => cross_entropy(*z, false),
                    AnchorLabel::Ignored => 0.0,
                })
                .collect();
            let selected = ohem_select(&cls_losses, &assignment, config.ohem_ratio);
            branch_loss_with_selection(outputs, &assignment, &targets, &selected, &config)
                .unwrap()
                .l_branch
        };
        // selection must stay fixed while probing: perturb and compare against
        // the analytic value
        let mut plus = outputs.clone();
        let mut minus = outputs.clone();
        plus.cls[i][0] += step;
        minus.cls[i][0] -= step;
        let fd = (eval(&plus) - eval(&minus)) / (2.0 * step);
        let analytic = grads.cls[i][0];
        let denom = analytic.abs().max(fd.abs()).max(1e-6);
        ensure(
            ((analytic - fd) / denom).abs() < 1e-4,
            "finite-difference gradient check failed",
        )?;
    }
    Ok(())
}

fn check_executor_ops() -> Result<(), String> {
    // scalar conv
    let x = TensorBuf::new(TensorShape::new(1, 1, 1, 1), vec![2.0]);
    let k = TensorBuf::new(TensorShape::new(1, 1, 1, 1), vec![3.0]);
    let y = conv2d(&x, &k, None, 1, 0, 1).map_err(|e| e.to_string())?;
    ensure(y.data == vec![6.0], "1x1 conv of 2 by 3 != 6")?;

    // all-ones 3x3, pad 1: coverage counts
    let x = TensorBuf::new(TensorShape::new(1, 3, 3, 1), vec![1.0; 9]);
    let k = TensorBuf::new(TensorShape::new(1, 3, 3, 1), vec![1.0; 9]);
    let y = conv2d(&x, &k, None, 1, 1, 1).map_err(|e| e.to_string())?;
    ensure(
        y.at(0, 1, 1, 0) == 9.0 && y.at(0, 0, 0, 0) == 4.0,
        "ones-kernel conv coverage mismatch",
    )?;

    // ramp pooling, frozen from the window-enumeration oracle
    let ramp = TensorBuf::new(
        TensorShape::new(1, 4, 4, 1),
        (1..=16).map(|v| v as f32).collect(),
    );
    let pooled = max_pool2d(&ramp, 3, 2, 1).map_err(|e| e.to_string())?;
    ensure(
        pooled.data == vec![6.0, 8.0, 14.0, 16.0],
        "3x3/s2/p1 pooling of the 4x4 ramp mismatch",
    )?;

    // batch norm closed form
    let x = TensorBuf::new(TensorShape::new(1, 1, 1, 1), vec![3.0]);
    let y = batch_norm(&x, &[2.0], &[1.0], &[1.0], &[4.0], 0.0).map_err(|e| e.to_string())?;
    ensure(y.data == vec![3.0], "batch norm closed form mismatch")
}

fn check_forward_determinism() -> Result<(), String> {
    let graph = build_fdlite(&DetectorConfig::default()).map_err(|e| e.to_string())?;
    let weights = init_weights(&graph, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let input = TensorBuf::new(
        TensorShape::new(1, 64, 64, 3),
        (0..64 * 64 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    );
    let a = run_forward(&graph, &weights, &input).map_err(|e| e.to_string())?;
    let b = run_forward(&graph, &weights, &input).map_err(|e| e.to_string())?;
    for (name, buf) in &a {
        if buf.data != b[name].data {
            return Err(format!("output {name} differs between runs"));
        }
    }
    Ok(())
}

fn check_weight_container() -> Result<(), String> {
    let graph = build_blite(&BackboneConfig::default()).map_err(|e| e.to_string())?;
    let store = init_weights(&graph, 4);
    let dir = std::env::temp_dir();
    let path = dir.join(format!("fdlite-selftest-{}.fdw", std::process::id()));
    save_weights(&store, &path).map_err(|e| e.to_string())?;
    let loaded = load_weights(&path).map_err(|e| e.to_string())?;
    let _ = std::fs::remove_file(&path);
    if loaded.len() != store.len() {
        return Err("entry count changed over round trip".into());
    }
    for ((name_a, buf_a), (name_b, buf_b)) in store.iter().zip(loaded.iter()) {
        if name_a != name_b || buf_a.data != buf_b.data {
            return Err(format!("entry {name_a} changed over round trip"));
        }
    }
    Ok(())
}

fn check_nms_against_oracle() -> Result<(), String> {
    use crate::pipeline::{nms, Detection};
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    for _ in 0..50 {
        let dets: Vec<Detection> = (0..rng.gen_range(0..50))
            .map(|_| Detection {
                rect: Rect::new(
                    rng.gen_range(0.0..50.0),
                    rng.gen_range(0.0..50.0),
                    rng.gen_range(2.0..30.0),
                    rng.gen_range(2.0..30.0),
                ),
                score: rng.gen::<f64>(),
                landmarks: [[0.0; 2]; 5],
                source_scale: 1.0,
                flipped: false,
            })
            .collect();
        let kept = nms(&dets, 0.4);
        // quadratic reference
        let mut order: Vec<usize> = (0..dets.len()).collect();
        order.sort_by(|&a, &b| {
            dets[b]
                .score
                .partial_cmp(&dets[a].score)
                .unwrap()
                .then(
                    dets[b]
                        .rect
                        .area()
                        .partial_cmp(&dets[a].rect.area())
                        .unwrap(),
                )
                .then(a.cmp(&b))
        });
        let mut reference: Vec<usize> = Vec::new();
        for &i in &order {
            if reference
                .iter()
                .all(|&k| iou(&dets[k].rect, &dets[i].rect) <= 0.4)
            {
                reference.push(i);
            }
        }
        if kept.len() != reference.len() {
            return Err("NMS disagrees with the quadratic reference".into());
        }
        for (a, &bi) in kept.iter().zip(&reference) {
            if a.rect != dets[bi].rect {
                return Err("NMS kept a different box than the reference".into());
            }
        }
    }
    Ok(())
}

fn check_ap_protocol() -> Result<(), String> {
    let perfect = vec![(0.9, DetFlag::TruePositive), (0.8, DetFlag::TruePositive)];
    let curve = average_precision(&perfect, 2).map_err(|e| e.to_string())?;
    ensure(curve.ap == 1.0, "perfect detector AP != 1.0")?;

    let two = vec![(0.9, DetFlag::FalsePositive), (0.8, DetFlag::TruePositive)];
    let curve = average_precision(&two, 1).map_err(|e| e.to_string())?;
    ensure(curve.ap == 0.5, "FP-then-TP case AP != 0.5")?;

    let stream = vec![
        (0.9, DetFlag::TruePositive),
        (0.8, DetFlag::FalsePositive),
        (0.7, DetFlag::TruePositive),
    ];
    let result = tpr_at_fp(&stream, 4, 1).map_err(|e| e.to_string())?;
    ensure(result.tpr == 0.25, "TPR hand-walk at budget 1 != 0.25")
}

/// Sample loss report over a toy scene, serialized for the CLI output.
pub fn sample_loss_report() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let anchors = generate_anchors(64, 64);
    let gts = vec![
        GroundTruthFace::new(Rect::new(20.0, 20.0, 24.0, 24.0), None).map_err(|e| e.to_string())?,
    ];
    let outputs = BranchOutputs {
        cls: (0..anchors.len())
            .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect(),
        boxes: (0..anchors.len())
            .map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0)))
            .collect(),
        landms: (0..anchors.len())
            .map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0)))
            .collect(),
    };
    let report = total_loss(&anchors, &outputs, &outputs, &gts, &LossConfig::default())
        .map_err(|e| e.to_string())?;
    serde_json::to_string_pretty(&report).map_err(|e| e.to_string())
}

/// Run every check; the CLI prints one line per entry.
pub fn run_all() -> Vec<CheckResult> {
    vec![
        ("architecture-audit", check_architecture_audit()),
        ("head-rows", check_head_rows()),
        ("anchor-grid", check_anchors()),
        ("encode-round-trip", check_encode_round_trip()),
        ("matching-policies", check_matching_policies()),
        ("hard-negative-mining", check_ohem()),
        ("loss-closed-forms", check_loss_closed_forms()),
        ("gradient-finite-difference", check_gradients_fd()),
        ("executor-ops", check_executor_ops()),
        ("forward-determinism", check_forward_determinism()),
        ("weight-container", check_weight_container()),
        ("nms-oracle", check_nms_against_oracle()),
        ("ap-protocol", check_ap_protocol()),
    ]
}
