//! Command-line interface: architecture audit, inference, evaluation
//! protocols, weight initialization, graph export and the built-in selftest.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fdlite::anchor::Rect;
use fdlite::eval::{evaluate_subset, load_gt, match_dets, tpr_at_fp, DetFlag, Difficulty};
use fdlite::exec::{init_weights, load_weights, save_weights, validate_weights};
use fdlite::graph::{
    build_blite, build_fdlite, count_flops, BackboneConfig, BudgetReport, CcpmVariant,
    DetectorConfig, FruVariant, TensorShape,
};
use fdlite::pipeline::{
    annotate, detect_multiscale, load_image, save_image, DetectionRecord, InferenceConfig,
};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;

/// Published reference budgets the audit compares against (parameters in
/// millions, forward cost in GFLOPs for a VGA input).
const PUBLISHED_BACKBONE: (f64, f64) = (0.167, 0.52);
const PUBLISHED_DETECTOR: (f64, f64) = (0.24, 0.94);
/// The abstract quotes 0.26M for the detector; the comparison table says
/// 0.24M. Both are recorded, the table value drives the deltas.
const PUBLISHED_DETECTOR_PARAMS_ALT: f64 = 0.26;

#[derive(Parser)]
#[command(name = "fdlite", about = "Lightweight face detector toolkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Args)]
struct ModelArgs {
    /// FRU convolution grouping: dense (as listed) or grouped (budget variant)
    #[arg(long, default_value = "dense")]
    variant: FruVariant,
    /// Context module topology
    #[arg(long, default_value = "independent")]
    ccpm: CcpmVariant,
    /// LeakyReLU negative slope
    #[arg(long, default_value_t = 0.1)]
    slope: f32,
}

impl ModelArgs {
    fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            fru_variant: self.variant,
            leaky_slope: self.slope,
        }
    }

    fn detector(&self) -> DetectorConfig {
        DetectorConfig {
            backbone: self.backbone(),
            ccpm: self.ccpm,
            ..Default::default()
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Parameter and FLOP audit against the published budgets
    Audit {
        /// Input size as WxH, e.g. 640x480
        #[arg(long, default_value = "640x480")]
        input_size: String,
        #[command(flatten)]
        model: ModelArgs,
        /// Print the per-node cost table
        #[arg(long)]
        detail: bool,
    },
    /// Detect faces in an image and emit JSON-lines records
    Infer {
        #[arg(long)]
        image: PathBuf,
        /// Weight container; omitted = deterministic random init from --seed
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Use the published multi-scale protocol instead of the native size
        #[arg(long)]
        multiscale: bool,
        /// Also run horizontally flipped passes
        #[arg(long)]
        flip: bool,
        /// Short-edge scales for --multiscale (comma separated)
        #[arg(long, value_delimiter = ',')]
        scales: Option<Vec<usize>>,
        /// Head branch to decode (1 or 2)
        #[arg(long)]
        branch: Option<u8>,
        #[arg(long)]
        score_threshold: Option<f64>,
        /// Inference settings as a JSON file; explicit flags win
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write an annotated copy (.ppm or .png)
        #[arg(long)]
        annotate: Option<PathBuf>,
        /// Print JSON-lines detections (default unless --annotate is given)
        #[arg(long)]
        json: bool,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Score detections against ground truth
    Eval {
        /// Detections as JSON-lines (the `infer` output format)
        #[arg(long)]
        dets: PathBuf,
        /// Ground-truth list file
        #[arg(long)]
        gts: PathBuf,
        /// ap: precision-recall protocol; fddb: TPR at a false-positive budget
        #[arg(long, default_value = "ap")]
        protocol: String,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        #[arg(long, default_value_t = 1000)]
        fp_budget: usize,
        /// Restrict AP to one difficulty subset
        #[arg(long)]
        subset: Option<Difficulty>,
    },
    /// Run the built-in oracle checks
    Selftest,
    /// Write a deterministic random weight container
    InitWeights {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Export the architecture as JSON
    ExportGraph {
        #[arg(long)]
        out: PathBuf,
        /// Export only the backbone
        #[arg(long)]
        backbone: bool,
        #[command(flatten)]
        model: ModelArgs,
    },
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(1);
        }
    }
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Audit {
            input_size,
            model,
            detail,
        } => audit(&input_size, &model, detail),
        Command::Infer {
            image,
            weights,
            seed,
            multiscale,
            flip,
            scales,
            branch,
            score_threshold,
            config,
            annotate,
            json,
            model,
        } => infer(InferOpts {
            image,
            weights,
            seed,
            multiscale,
            flip,
            scales,
            branch,
            score_threshold,
            config,
            annotate,
            json,
            model,
        }),
        Command::Eval {
            dets,
            gts,
            protocol,
            iou,
            fp_budget,
            subset,
        } => eval(&dets, &gts, &protocol, iou, fp_budget, subset),
        Command::Selftest => selftest(),
        Command::InitWeights { out, seed, model } => {
            let graph = build_fdlite(&model.detector())?;
            let store = init_weights(&graph, seed);
            save_weights(&store, &out)?;
            println!("wrote {} entries to {}", store.len(), out.display());
            Ok(0)
        }
        Command::ExportGraph {
            out,
            backbone,
            model,
        } => {
            let graph = if backbone {
                build_blite(&model.backbone())?
            } else {
                build_fdlite(&model.detector())?
            };
            std::fs::write(&out, graph.to_json())?;
            println!("wrote {} nodes to {}", graph.nodes().len(), out.display());
            Ok(0)
        }
    }
}

fn parse_size(text: &str) -> Result<(usize, usize)> {
    let (w, h) = text
        .split_once('x')
        .with_context(|| format!("input size '{text}' is not WxH"))?;
    Ok((
        w.parse().with_context(|| format!("bad width '{w}'"))?,
        h.parse().with_context(|| format!("bad height '{h}'"))?,
    ))
}

fn millions(count: u64) -> f64 {
    count as f64 / 1e6
}

fn giga(count: u64) -> f64 {
    count as f64 / 1e9
}

fn audit(input_size: &str, model: &ModelArgs, detail: bool) -> Result<i32> {
    let (w, h) = parse_size(input_size)?;
    let shape = TensorShape::new(1, h, w, 3);

    let backbone = build_blite(&model.backbone())?;
    let backbone_flops = count_flops(&backbone, shape)?;
    let detector = build_fdlite(&model.detector())?;
    let detector_flops = count_flops(&detector, shape)?;

    println!(
        "architecture audit at {w}x{h} (WxH), variant {:?}, context {:?}",
        model.variant, model.ccpm
    );
    print_budget_line("backbone (BLite)", &backbone_flops, PUBLISHED_BACKBONE);
    print_budget_line("detector (FDLite)", &detector_flops, PUBLISHED_DETECTOR);
    println!(
        "  note: the abstract quotes {PUBLISHED_DETECTOR_PARAMS_ALT}M detector parameters, the \
         comparison table {}M; deltas use the table value",
        PUBLISHED_DETECTOR.0
    );
    println!(
        "  note: FLOPs count one multiply-add as 2; the MAC column halves conv terms for \
         tables using that convention"
    );

    if detail {
        println!("\n  {:<28} {:>12} {:>16}", "node", "params", "flops");
        for node in &detector_flops.per_node {
            println!("  {:<28} {:>12} {:>16}", node.name, node.params, node.flops);
        }
    }
    Ok(0)
}

fn print_budget_line(label: &str, report: &BudgetReport, published: (f64, f64)) {
    let params_m = millions(report.total_params);
    let flops_g = giga(report.total_flops);
    let macs_g = giga(report.total_macs);
    println!(
        "  {label}: params {:.4}M  flops {:.4}G  (macs {:.4}G)",
        params_m, flops_g, macs_g
    );
    println!(
        "    published reference: {}M / {}G   delta {:+.4}M / {:+.4}G",
        published.0,
        published.1,
        params_m - published.0,
        flops_g - published.1
    );
}

struct InferOpts {
    image: PathBuf,
    weights: Option<PathBuf>,
    seed: u64,
    multiscale: bool,
    flip: bool,
    scales: Option<Vec<usize>>,
    branch: Option<u8>,
    score_threshold: Option<f64>,
    config: Option<PathBuf>,
    annotate: Option<PathBuf>,
    json: bool,
    model: ModelArgs,
}

fn infer(opts: InferOpts) -> Result<i32> {
    let mut config = match &opts.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<InferenceConfig>(&text)
                .with_context(|| format!("parsing {}", path.display()))?
        }
        None => InferenceConfig::default(),
    };

    let image = load_image(&opts.image)?;
    if !opts.multiscale && opts.scales.is_none() {
        config.scales = vec![image.w.min(image.h).max(32)];
    }
    if let Some(scales) = opts.scales {
        config.scales = scales;
    }
    if opts.flip {
        config.flip = true;
    }
    if let Some(branch) = opts.branch {
        config.branch = branch;
    }
    if let Some(threshold) = opts.score_threshold {
        config.score_threshold = threshold;
    }
    config.validate()?;

    let graph = build_fdlite(&opts.model.detector())?;
    let store = match &opts.weights {
        Some(path) => {
            let store = load_weights(path)?;
            let orphans = validate_weights(&graph, &store)?;
            for orphan in orphans {
                eprintln!("warning: weight entry '{orphan}' matches no node");
            }
            store
        }
        None => {
            eprintln!(
                "warning: no --weights given, using random initialization (seed {})",
                opts.seed
            );
            init_weights(&graph, opts.seed)
        }
    };

    let detections = detect_multiscale(&image, &graph, &store, &config)?;

    let image_name = opts
        .image
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| opts.image.display().to_string());
    if opts.json || opts.annotate.is_none() {
        let stdout = std::io::stdout();
        let mut out = stdout.lock();
        for det in &detections {
            serde_json::to_writer(&mut out, &det.to_record(&image_name))?;
            out.write_all(b"\n")?;
        }
    }
    if let Some(path) = &opts.annotate {
        let annotated = annotate(&image, &detections);
        save_image(&annotated, path)?;
        eprintln!(
            "wrote {} detections to {}",
            detections.len(),
            path.display()
        );
    }
    Ok(0)
}

fn load_detections(path: &std::path::Path) -> Result<BTreeMap<String, Vec<(Rect, f64)>>> {
    let text = std::fs::read_to_string(path)?;
    let mut by_image: BTreeMap<String, Vec<(Rect, f64)>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: DetectionRecord = serde_json::from_str(line)
            .with_context(|| format!("{}:{}: bad detection record", path.display(), i + 1))?;
        by_image.entry(record.image.clone()).or_default().push((
            Rect::new(record.x, record.y, record.w, record.h),
            record.score,
        ));
    }
    Ok(by_image)
}

fn eval(
    dets_path: &std::path::Path,
    gts_path: &std::path::Path,
    protocol: &str,
    iou: f64,
    fp_budget: usize,
    subset: Option<Difficulty>,
) -> Result<i32> {
    let annotations = load_gt(gts_path)?;
    let detections = load_detections(dets_path)?;
    match protocol {
        "ap" => {
            let subsets: Vec<Option<Difficulty>> = match subset {
                Some(tag) => vec![Some(tag)],
                None => {
                    let mut present: Vec<Option<Difficulty>> = vec![None];
                    for tag in [Difficulty::Easy, Difficulty::Medium, Difficulty::Hard] {
                        let any = annotations
                            .images
                            .values()
                            .flatten()
                            .any(|f| f.difficulty == Some(tag));
                        if any {
                            present.push(Some(tag));
                        }
                    }
                    present
                }
            };
            for subset in subsets {
                let report = evaluate_subset(&annotations, &detections, subset, iou)?;
                println!("{}", serde_json::to_string(&report)?);
            }
        }
        "fddb" => {
            let mut pooled: Vec<(f64, DetFlag)> = Vec::new();
            let mut n_gt = 0usize;
            for (image, faces) in &annotations.images {
                n_gt += faces.iter().filter(|f| !f.ignore).count();
                let mut dets = detections.get(image).cloned().unwrap_or_default();
                dets.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
                let outcome = match_dets(&dets, faces, iou);
                pooled.extend(dets.iter().map(|(_, s)| *s).zip(outcome.det_flags));
            }
            pooled.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            let result = tpr_at_fp(&pooled, n_gt, fp_budget)?;
            println!("{}", serde_json::to_string(&result)?);
        }
        other => bail!("unknown protocol '{other}' (ap|fddb)"),
    }
    Ok(0)
}

fn selftest() -> Result<i32> {
    let mut failures = 0;
    for (name, result) in fdlite::selftest::run_all() {
        match result {
            Ok(()) => println!("ok   {name}"),
            Err(msg) => {
                failures += 1;
                println!("FAIL {name}: {msg}");
            }
        }
    }
    match fdlite::selftest::sample_loss_report() {
        Ok(report) => println!("sample loss report:\n{report}"),
        Err(msg) => {
            failures += 1;
            println!("FAIL sample-loss-report: {msg}");
        }
    }
    if failures == 0 {
        println!("all checks passed");
        Ok(0)
    } else {
        println!("{failures} check(s) failed");
        Ok(1)
    }
}
