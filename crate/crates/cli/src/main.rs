//! Command-line front end for the plate location/recognition pipeline.
//!
//! Every subcommand reads and writes plain files — tensor archives
//! (`.ptar`), annotation/prediction JSON — so the stages can be chained,
//! inspected, and diffed. Exit code 0 on success, 2 on any validation or
//! I/O error. No environment variables are consulted.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use platenet_core::eval::{eval_detection, eval_e2e, EvalConfig, EvalImage, PredBox, TruthBox};
use platenet_core::fixtures::{gen_fixtures, Difficulty};
use platenet_core::fusion::{shared_features, standin_backbone, FusionWeights};
use platenet_core::geometry::Rect;
use platenet_core::heatmap::{decode_detections, encode_targets, DetectionMaps, DEFAULT_MAX_K};
use platenet_core::loss::ctc_loss;
use platenet_core::ptar::PtarArchive;
use platenet_core::recognize::{
    apply_rules, beam_search_decode, head_forward, Alphabet, RecognitionOutput, RecognitionWeights,
    RuleSet,
};
use platenet_core::rectify::rectify_batch;
use platenet_core::schema::{AnnotationFile, DetectionRecord, ImagePredictions, PredictionFile};
use platenet_core::tensor::Tensor;
use platenet_core::{Error, Result};

/// Default beam width for the `recognize` subcommand.
const DEFAULT_BEAM_WIDTH: usize = 10;

#[derive(Parser)]
#[command(
    name = "platenet",
    version,
    about = "License-plate location and recognition pipeline",
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate deterministic synthetic plate scenes with annotations.
    GenFixtures(GenFixturesArgs),
    /// Encode annotations into detection target maps.
    EncodeTargets(EncodeTargetsArgs),
    /// Decode detection maps into scored boxes and corners.
    Decode(DecodeArgs),
    /// Crop and perspective-rectify detected plates from shared features.
    Rectify(RectifyArgs),
    /// Recognize plate strings from crops (via weights) or raw logits.
    Recognize(RecognizeArgs),
    /// Score frame logits against label strings; optionally dump gradients.
    CtcLoss(CtcLossArgs),
    /// Compare predictions against ground truth.
    Eval(EvalArgs),
    /// Run the deterministic end-to-end pipeline check.
    Selftest(SelftestArgs),
}

#[derive(Args)]
struct GenFixturesArgs {
    /// Directory receiving fixtures.ptar and annotations.json.
    #[arg(long)]
    out: PathBuf,
    /// Number of scenes to generate.
    #[arg(long)]
    count: usize,
    /// Base seed; scene i derives its own generator from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scene geometry: axis-aligned, rotated, or tilted.
    #[arg(long, default_value = "rotated")]
    difficulty: String,
}

#[derive(Args)]
struct EncodeTargetsArgs {
    /// Annotation JSON file.
    #[arg(long)]
    ann: PathBuf,
    /// Output tensor archive with six maps per image.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DecodeArgs {
    /// Tensor archive holding `<id>.center_heat` … `<id>.corner_off`.
    #[arg(long)]
    maps: PathBuf,
    /// Maximum detections kept per image.
    #[arg(long, default_value_t = DEFAULT_MAX_K)]
    topk: usize,
    /// Minimum center-heat peak score.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Output prediction JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RectifyArgs {
    /// Tensor archive holding one `<id>.shared` feature map per image.
    #[arg(long)]
    features: PathBuf,
    /// Prediction JSON with the boxes/corners to crop.
    #[arg(long)]
    det: PathBuf,
    /// Output archive with `<id>.crops` (and `<id>.fallback` flags).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RecognizeArgs {
    /// Tensor archive with `<id>.crops` (requires --weights).
    #[arg(long, requires = "weights", conflicts_with = "logits")]
    crops: Option<PathBuf>,
    /// Recognition-head weights archive.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Tensor archive with precomputed `<id>.logits` instead of crops.
    #[arg(long)]
    logits: Option<PathBuf>,
    /// JSON file holding the token string (blank is implicit).
    #[arg(long)]
    alphabet: PathBuf,
    /// Optional JSON rule set used to verify candidates.
    #[arg(long)]
    rules: Option<PathBuf>,
    /// Prefix beam width.
    #[arg(long, default_value_t = DEFAULT_BEAM_WIDTH)]
    beam_width: usize,
}

#[derive(Args)]
struct CtcLossArgs {
    /// Tensor archive holding a `logits` tensor of shape T × B × K.
    #[arg(long)]
    logits: PathBuf,
    /// Comma-separated label strings, one per batch item.
    #[arg(long)]
    labels: String,
    /// Optional output archive receiving the `grad` tensor.
    #[arg(long)]
    grad: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Prediction JSON.
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth annotation JSON.
    #[arg(long)]
    gt: PathBuf,
    /// IoU threshold; a match requires IoU strictly above it.
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
    /// Score end-to-end (box and exact text) instead of detection only.
    #[arg(long)]
    e2e: bool,
    /// Keep only the highest-scoring prediction per image.
    #[arg(long)]
    one_per_image: bool,
}

#[derive(Args)]
struct SelftestArgs {
    /// Directory receiving the artifacts (default: selftest-artifacts).
    #[arg(long, default_value = "selftest-artifacts")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenFixtures(args) => run_gen_fixtures(&args),
        Command::EncodeTargets(args) => run_encode_targets(&args),
        Command::Decode(args) => run_decode(&args),
        Command::Rectify(args) => run_rectify(&args),
        Command::Recognize(args) => run_recognize(&args),
        Command::CtcLoss(args) => run_ctc_loss(&args),
        Command::Eval(args) => run_eval(&args),
        Command::Selftest(args) => run_selftest(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run_gen_fixtures(args: &GenFixturesArgs) -> Result<()> {
    let difficulty: Difficulty = args.difficulty.parse()?;
    let scenes = gen_fixtures::<f32>(args.count, args.seed, difficulty)?;
    std::fs::create_dir_all(&args.out)?;
    let mut archive = PtarArchive::new();
    let mut file = AnnotationFile::default();
    for scene in &scenes {
        archive.insert(
            &format!("{}.image", scene.annotation.id),
            scene.image.clone(),
        )?;
        file.images.push(scene.annotation.clone());
    }
    archive.write(args.out.join("fixtures.ptar"))?;
    file.save(args.out.join("annotations.json"))?;
    println!(
        "wrote {} {} scenes (seed {}) to fixtures.ptar + annotations.json",
        scenes.len(),
        difficulty,
        args.seed
    );
    Ok(())
}

fn run_encode_targets(args: &EncodeTargetsArgs) -> Result<()> {
    let file = AnnotationFile::load(&args.ann)?;
    let mut archive = PtarArchive::new();
    for img in &file.images {
        let targets =
            encode_targets::<f32>(&img.annotations(), img.width as usize, img.height as usize)?;
        insert_maps(&mut archive, &img.id, &targets.maps)?;
    }
    archive.write(&args.out)?;
    println!(
        "encoded {} images ({} tensors)",
        file.images.len(),
        archive.len()
    );
    Ok(())
}

/// Archives the six detection maps of one image under `<id>.<map>` names.
fn insert_maps(archive: &mut PtarArchive, id: &str, maps: &DetectionMaps<f32>) -> Result<()> {
    archive.insert(&format!("{id}.center_heat"), maps.center_heat.clone())?;
    archive.insert(&format!("{id}.wh"), maps.wh.clone())?;
    archive.insert(&format!("{id}.center_off"), maps.center_off.clone())?;
    archive.insert(&format!("{id}.corner_heat"), maps.corner_heat.clone())?;
    archive.insert(&format!("{id}.corner_rel"), maps.corner_rel.clone())?;
    archive.insert(&format!("{id}.corner_off"), maps.corner_off.clone())?;
    Ok(())
}

/// Reassembles the six detection maps of one image from an archive.
fn extract_maps(archive: &PtarArchive, id: &str) -> Result<DetectionMaps<f32>> {
    Ok(DetectionMaps {
        center_heat: archive.require(&format!("{id}.center_heat"))?.clone(),
        wh: archive.require(&format!("{id}.wh"))?.clone(),
        center_off: archive.require(&format!("{id}.center_off"))?.clone(),
        corner_heat: archive.require(&format!("{id}.corner_heat"))?.clone(),
        corner_rel: archive.require(&format!("{id}.corner_rel"))?.clone(),
        corner_off: archive.require(&format!("{id}.corner_off"))?.clone(),
    })
}

/// Image ids present in an archive, determined by a `.<suffix>` tensor name.
fn archive_ids(archive: &PtarArchive, suffix: &str) -> Vec<String> {
    let mut ids: Vec<String> = archive
        .names()
        .filter_map(|n| n.strip_suffix(suffix).map(str::to_string))
        .collect();
    ids.sort();
    ids
}

fn run_decode(args: &DecodeArgs) -> Result<()> {
    let archive = PtarArchive::read(&args.maps)?;
    let ids = archive_ids(&archive, ".center_heat");
    if ids.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no `<id>.center_heat` tensors in {}",
            args.maps.display()
        )));
    }
    let mut file = PredictionFile::default();
    let mut total = 0usize;
    for id in ids {
        let maps = extract_maps(&archive, &id)?;
        let dets = decode_detections(&maps, args.topk, args.threshold)?;
        total += dets.len();
        file.images.push(ImagePredictions {
            id,
            detections: dets.iter().map(DetectionRecord::from_detection).collect(),
        });
    }
    file.save(&args.out)?;
    println!(
        "decoded {} detections across {} images",
        total,
        file.images.len()
    );
    Ok(())
}

fn run_rectify(args: &RectifyArgs) -> Result<()> {
    let features = PtarArchive::read(&args.features)?;
    let det_file = PredictionFile::load(&args.det)?;
    let mut out = PtarArchive::new();
    let mut crops_total = 0usize;
    for img in &det_file.images {
        let shared = features.require(&format!("{}.shared", img.id))?;
        if img.detections.is_empty() {
            continue;
        }
        let dets: Vec<_> = img
            .detections
            .iter()
            .map(DetectionRecord::to_detection)
            .collect();
        let (crops, fallback) = rectify_batch(shared, &dets)?;
        crops_total += dets.len();
        out.insert(&format!("{}.crops", img.id), crops)?;
        let flags: Vec<f32> = fallback
            .iter()
            .map(|&f| if f { 1.0 } else { 0.0 })
            .collect();
        let n = flags.len();
        out.insert(&format!("{}.fallback", img.id), Tensor::new(&[n], flags)?)?;
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument(
            "no detections to rectify in the prediction file".into(),
        ));
    }
    out.write(&args.out)?;
    println!("rectified {crops_total} plates");
    Ok(())
}

/// Loads the serialized token string, e.g. `"0123…Z"`.
fn load_alphabet(path: &Path) -> Result<Alphabet> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn run_recognize(args: &RecognizeArgs) -> Result<()> {
    let alphabet = load_alphabet(&args.alphabet)?;
    let rules: Option<RuleSet> = match &args.rules {
        Some(path) => Some(serde_json::from_str(&std::fs::read_to_string(path)?)?),
        None => None,
    };

    // One recognition output per image id, from head inference or from disk.
    let outputs: Vec<(String, RecognitionOutput<f32>)> = match (&args.crops, &args.logits) {
        (Some(crops_path), None) => {
            let weights_path = args.weights.as_ref().expect("clap enforces --weights");
            let weights =
                RecognitionWeights::<f32>::from_archive(&PtarArchive::read(weights_path)?)?;
            if weights.class_count() != alphabet.class_count() {
                return Err(Error::ShapeMismatch(format!(
                    "weights emit {} classes, alphabet expects {}",
                    weights.class_count(),
                    alphabet.class_count()
                )));
            }
            let archive = PtarArchive::read(crops_path)?;
            let ids = archive_ids(&archive, ".crops");
            if ids.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "no `<id>.crops` tensors in {}",
                    crops_path.display()
                )));
            }
            let mut outs = Vec::with_capacity(ids.len());
            for id in ids {
                let crops = archive.require(&format!("{id}.crops"))?;
                outs.push((id, head_forward(&weights, crops)?));
            }
            outs
        }
        (None, Some(logits_path)) => {
            let archive = PtarArchive::read(logits_path)?;
            let ids = archive_ids(&archive, ".logits");
            if ids.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "no `<id>.logits` tensors in {}",
                    logits_path.display()
                )));
            }
            let mut outs = Vec::with_capacity(ids.len());
            for id in ids {
                let logits = archive.require(&format!("{id}.logits"))?.clone();
                outs.push((id, RecognitionOutput::from_logits(logits)?));
            }
            outs
        }
        _ => {
            return Err(Error::InvalidArgument(
                "pass either --crops with --weights or --logits".into(),
            ))
        }
    };

    let mut images = Vec::with_capacity(outputs.len());
    for (id, output) in &outputs {
        let candidates = beam_search_decode(output, &alphabet, args.beam_width)?;
        let mut plates = Vec::with_capacity(candidates.len());
        for cands in &candidates {
            let entry = match &rules {
                Some(rules) => {
                    let (best, verified) = apply_rules(cands, rules)?;
                    serde_json::json!({
                        "text": best.text,
                        "log_prob": best.log_prob,
                        "verified": verified,
                    })
                }
                None => serde_json::json!({
                    "text": cands[0].text,
                    "log_prob": cands[0].log_prob,
                }),
            };
            plates.push(entry);
        }
        images.push(serde_json::json!({ "id": id, "plates": plates }));
    }
    let report = serde_json::json!({ "images": images });
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn run_ctc_loss(args: &CtcLossArgs) -> Result<()> {
    let archive = PtarArchive::read(&args.logits)?;
    let logits = archive.require("logits")?.clone();
    let output = RecognitionOutput::from_logits(logits)?;
    let alphabet = Alphabet::default_plate();
    let labels: Vec<Vec<usize>> = args
        .labels
        .split(',')
        .map(|s| alphabet.encode(s))
        .collect::<Result<_>>()?;
    let outcome = ctc_loss(&output, &labels)?;
    for (i, (loss, infeasible)) in outcome.losses.iter().zip(&outcome.infeasible).enumerate() {
        if *infeasible {
            println!("item {i}: infeasible (label longer than the frame budget)");
        } else {
            println!("item {i}: loss {loss:.6}");
        }
    }
    match outcome.mean_feasible() {
        Some(mean) => println!("mean loss {mean:.6}"),
        None => println!("mean loss n/a (no feasible items)"),
    }
    if let Some(path) = &args.grad {
        let mut out = PtarArchive::new();
        out.insert("grad", outcome.grad)?;
        out.write(path)?;
    }
    Ok(())
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    let pred = PredictionFile::load(&args.pred)?;
    let gt = AnnotationFile::load(&args.gt)?;
    let mut by_id: BTreeMap<&str, &ImagePredictions> = BTreeMap::new();
    for img in &pred.images {
        by_id.insert(&img.id, img);
    }
    let known: Vec<&str> = gt.images.iter().map(|img| img.id.as_str()).collect();
    if let Some(img) = pred
        .images
        .iter()
        .find(|img| !known.contains(&img.id.as_str()))
    {
        return Err(Error::InvalidArgument(format!(
            "prediction references unknown image id '{}'",
            img.id
        )));
    }
    let images: Vec<EvalImage> = gt
        .images
        .iter()
        .map(|img| EvalImage {
            predictions: by_id
                .get(img.id.as_str())
                .map(|p| {
                    p.detections
                        .iter()
                        .map(|d| PredBox {
                            bbox: Rect::from_array(d.bbox),
                            score: d.score,
                            text: d.text.clone(),
                        })
                        .collect()
                })
                .unwrap_or_default(),
            truths: img
                .plates
                .iter()
                .map(|p| TruthBox {
                    bbox: Rect::from_array(p.bbox),
                    text: p.text.clone(),
                })
                .collect(),
        })
        .collect();
    let cfg = EvalConfig {
        iou_threshold: args.iou,
        one_prediction_per_image: args.one_per_image,
    };
    let report = if args.e2e {
        serde_json::to_string_pretty(&eval_e2e(&images, &cfg)?)?
    } else {
        serde_json::to_string_pretty(&eval_detection(&images, &cfg)?)?
    };
    println!("{report}");
    Ok(())
}

/// Fixed seeds and extent of the selftest pipeline. Every quantity printed
/// or written is a pure function of these, so two runs must agree byte for
/// byte.
const SELFTEST_SEED: u64 = 20;
const SELFTEST_SCENES: usize = 4;

/// Prints one selftest log line and appends it to the log artifact.
fn say(line: String, log: &mut String) {
    println!("{line}");
    log.push_str(&line);
    log.push('\n');
}

fn run_selftest(args: &SelftestArgs) -> Result<()> {
    let mut log = String::new();
    std::fs::create_dir_all(&args.out)?;

    say(
        format!("selftest: {SELFTEST_SCENES} rotated scenes, seed {SELFTEST_SEED}"),
        &mut log,
    );
    let scenes = gen_fixtures::<f32>(SELFTEST_SCENES, SELFTEST_SEED, Difficulty::Rotated)?;
    let mut fixtures = PtarArchive::new();
    let mut ann_file = AnnotationFile::default();
    for scene in &scenes {
        fixtures.insert(
            &format!("{}.image", scene.annotation.id),
            scene.image.clone(),
        )?;
        ann_file.images.push(scene.annotation.clone());
    }
    fixtures.write(args.out.join("fixtures.ptar"))?;
    ann_file.save(args.out.join("annotations.json"))?;

    // Encode every scene, decode back, and keep the detections around.
    let mut targets_archive = PtarArchive::new();
    let mut decoded = Vec::with_capacity(scenes.len());
    for img in &ann_file.images {
        let targets =
            encode_targets::<f32>(&img.annotations(), img.width as usize, img.height as usize)?;
        insert_maps(&mut targets_archive, &img.id, &targets.maps)?;
        let dets = decode_detections(&targets.maps, DEFAULT_MAX_K, 0.5)?;
        let truth = img.annotations();
        let worst = dets
            .iter()
            .zip(&truth)
            .map(|(d, t)| {
                d.bbox
                    .as_array()
                    .iter()
                    .zip(t.bbox.as_array())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max)
            })
            .fold(0.0f64, f64::max);
        say(
            format!(
                "decode {}: {} of {} boxes, worst box deviation {:.6} px",
                img.id,
                dets.len(),
                truth.len(),
                worst
            ),
            &mut log,
        );
        decoded.push(dets);
    }
    targets_archive.write(args.out.join("targets.ptar"))?;

    // Deep arm on the first scene: stand-in backbone, fusion, rectification,
    // and the recognition head.
    let fusion = FusionWeights::<f32>::seeded(SELFTEST_SEED, [32, 64, 128, 256])?;
    let backbone = standin_backbone(&scenes[0].image, SELFTEST_SEED)?;
    let shared = shared_features(&backbone, &fusion)?;
    let sd = shared.dims().to_vec();
    say(
        format!(
            "fusion {}: shared map {}x{}x{}x{}",
            scenes[0].annotation.id, sd[0], sd[1], sd[2], sd[3]
        ),
        &mut log,
    );
    let (crops, fallback) = rectify_batch(&shared, &decoded[0])?;
    let mut crops_archive = PtarArchive::new();
    crops_archive.insert(&format!("{}.crops", scenes[0].annotation.id), crops.clone())?;
    crops_archive.write(args.out.join("crops.ptar"))?;
    say(
        format!(
            "rectify {}: {} crops, {} degenerate fallbacks",
            scenes[0].annotation.id,
            crops.dims()[0],
            fallback.iter().filter(|&&f| f).count()
        ),
        &mut log,
    );
    let alphabet = Alphabet::default_plate();
    let head = RecognitionWeights::<f32>::seeded(SELFTEST_SEED + 1, 128, alphabet.class_count())?;
    let head_out = head_forward(&head, &crops)?;
    let (t_len, b_len, k_len) = head_out.extents();
    let fiber: f64 = head_out.clone().into_probs().values.data()[..k_len]
        .iter()
        .map(|v| *v as f64)
        .sum();
    say(
        format!("head: {t_len}x{b_len}x{k_len} frames, first probability fiber sums to {fiber:.6}"),
        &mut log,
    );

    // Oracle recognition arm over every scene, then the paired evaluation.
    let rules = RuleSet {
        allowed_lengths: vec![5, 6, 7],
        position_tokens: vec![],
    };
    let mut pred_file = PredictionFile::default();
    let mut eval_images = Vec::with_capacity(scenes.len());
    for (scene, dets) in scenes.iter().zip(&decoded) {
        let truth = scene.annotation.annotations();
        let mut records = Vec::with_capacity(dets.len());
        for det in dets {
            let logits = platenet_core::fixtures::oracle_logits::<f32>(&truth[0].text, &alphabet)?;
            let candidates = beam_search_decode(&logits, &alphabet, DEFAULT_BEAM_WIDTH)?;
            let (best, verified) = apply_rules(&candidates[0], &rules)?;
            say(
                format!(
                    "recognize {}: '{}' (verified {})",
                    scene.annotation.id, best.text, verified
                ),
                &mut log,
            );
            let mut record = DetectionRecord::from_detection(det);
            record.text = Some(best.text);
            record.verified = Some(verified);
            records.push(record);
        }
        pred_file.images.push(ImagePredictions {
            id: scene.annotation.id.clone(),
            detections: records,
        });
        eval_images.push(EvalImage {
            predictions: dets
                .iter()
                .zip(&pred_file.images.last().unwrap().detections)
                .map(|(d, r)| PredBox {
                    bbox: d.bbox,
                    score: d.score,
                    text: r.text.clone(),
                })
                .collect(),
            truths: truth
                .iter()
                .map(|t| TruthBox {
                    bbox: t.bbox,
                    text: t.text.clone(),
                })
                .collect(),
        });
    }
    pred_file.save(args.out.join("predictions.json"))?;

    let cfg = EvalConfig {
        iou_threshold: 0.7,
        one_prediction_per_image: false,
    };
    let det_metrics = eval_detection(&eval_images, &cfg)?;
    let e2e_metrics = eval_e2e(&eval_images, &cfg)?;
    say(
        format!(
            "eval: precision {:.6}, recall {:.6}, e2e accuracy {:.6}",
            det_metrics.precision,
            det_metrics.recall.unwrap_or(0.0),
            e2e_metrics.accuracy
        ),
        &mut log,
    );
    let metrics = serde_json::json!({ "detection": det_metrics, "e2e": e2e_metrics });
    std::fs::write(
        args.out.join("metrics.json"),
        serde_json::to_string_pretty(&metrics)?,
    )?;

    say("selftest: ok".to_string(), &mut log);
    std::fs::write(args.out.join("log.txt"), &log)?;
    Ok(())
}
