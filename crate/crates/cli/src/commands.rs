//! One function per subcommand. Stages communicate only through the files in
//! `out_dir`, so every command can be re-run on its own.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;

use snapseg::clustering::KMeansModel;
use snapseg::encoder::{EncoderModel, EpochStats};
use snapseg::evaluation::{confusion, metrics, write_metrics_report};
use snapseg::scene_io::{
    default_palette, export_colored_ply, load_scene, read_labels, remap_labels, save_xyzl, write_labels, ClassRemap,
    PointCloud, SceneFormat,
};
use snapseg::segmenter::fine_tune_for_scene;
use snapseg::snapshot::{label_snapshot, purity_report, SnapshotSet};
use snapseg::spatial_index::KdTree;
use snapseg::synth::{self, SceneSpec};
use snapseg::weak_classifier::LinearSvm;
use snapseg::Error;

use crate::config::PipelineConfig;
use crate::pipeline::{self, stage_seed, Stage};
use crate::CliError;

type CmdResult = Result<(), CliError>;

/// Artifact file names inside `out_dir`.
pub mod artifact {
    pub const SCENE: &str = "scene.xyzl";
    pub const SCENE_SPEC: &str = "scene_spec.txt";
    pub const SNAPSHOTS: &str = "snapshots.txt";
    pub const PURITY: &str = "purity.csv";
    pub const KMEANS: &str = "kmeans.txt";
    pub const CLUSTERS: &str = "clusters.txt";
    pub const CLUSTERNET: &str = "clusternet.model";
    pub const CLUSTERNET_TRACE: &str = "clusternet_trace.csv";
    pub const FEATURES: &str = "features.csv";
    pub const VIEW_LABELS: &str = "view_labels.txt";
    pub const SVM: &str = "svm.txt";
    pub const MANIFEST: &str = "weak_manifest.csv";
    pub const PSEUDO_LABELS: &str = "pseudo_labels.csv";
    pub const LABELS: &str = "labels.txt";
    pub const VOTES: &str = "votes.txt";
    pub const CAPTURE_LOG: &str = "capture_log.csv";
    pub const SEGMENTATION_PLY: &str = "segmentation.ply";
    pub const SEGMENTATION_METRICS: &str = "segmentation_metrics";
    pub const CLASSIFICATION_METRICS: &str = "classification_metrics";
    pub const FINETUNED: &str = "clusternet_finetuned.model";
    pub const FINETUNE_TRACE: &str = "finetune_trace.csv";

    /// The pretrained pair network is kept per pretext mode.
    pub fn contrastnet(mode: snapseg::pretext::PretextMode) -> String {
        format!("contrastnet_{mode}.model")
    }

    pub fn contrastnet_trace(mode: snapseg::pretext::PretextMode) -> String {
        format!("contrastnet_{mode}_trace.csv")
    }
}

const FEATURES_HEADER: &str = "# snapseg features v1";

fn out(cfg: &PipelineConfig, name: &str) -> PathBuf {
    cfg.out_dir.join(name)
}

/// `path` if it exists, otherwise the missing-artifact error.
fn require(path: PathBuf) -> Result<PathBuf, CliError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::MissingArtifact(path))
    }
}

fn prepare(cfg: &PipelineConfig, command: &str) -> CmdResult {
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::Io {
        path: cfg.out_dir.clone(),
        source: e,
    })?;
    let path = out(cfg, &format!("resolved_config_{command}.txt"));
    fs::write(&path, cfg.to_text()).map_err(|e| Error::Io { path: path.clone(), source: e })?;
    log::info!("{command}: seed {}, workers {}, out_dir {}", cfg.seed, cfg.workers, cfg.out_dir.display());
    for line in cfg.to_text().lines().skip(1) {
        log::debug!("  {line}");
    }
    Ok(())
}

/// The scene named by the configuration, or the one `synth` wrote.
pub fn load_configured_scene(cfg: &PipelineConfig) -> Result<PointCloud, CliError> {
    let cloud = match &cfg.scene_points {
        Some(points) => {
            let points = require(points.clone())?;
            let labels = cfg.scene_labels.clone().map(require).transpose()?;
            load_scene(&points, labels.as_deref(), cfg.scene_format)?
        }
        None => {
            let path = require(out(cfg, artifact::SCENE))?;
            let cloud = load_scene(&path, None, SceneFormat::Xyzl)?;
            let names = ClassRemap::semantic3d_six_class().class_names().to_vec();
            PointCloud::new(cloud.positions().to_vec(), cloud.labels().map(<[u32]>::to_vec), synth::N_CLASSES, names)?
        }
    };
    Ok(if cfg.remap_six_class {
        remap_labels(&cloud, &ClassRemap::semantic3d_six_class())?
    } else {
        cloud
    })
}

fn load_snapshots(cfg: &PipelineConfig, cloud: &PointCloud, tree: &KdTree) -> Result<SnapshotSet, CliError> {
    let path = require(out(cfg, artifact::SNAPSHOTS))?;
    let set = SnapshotSet::load(&path, tree, cloud)?;
    if set.k != cfg.k || set.fov_scales != cfg.fov_scales {
        return Err(CliError::Config(vec![format!(
            "{} was sampled with k = {} and fov_scales = {:?}; the configuration asks for k = {} and {:?}",
            path.display(),
            set.k,
            set.fov_scales,
            cfg.k,
            cfg.fov_scales
        )]));
    }
    Ok(set)
}

fn load_model(path: PathBuf) -> Result<EncoderModel, CliError> {
    Ok(EncoderModel::load(&require(path)?)?)
}

fn write_trace(path: &Path, trace: &[EpochStats]) -> Result<(), Error> {
    let io = |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    writeln!(w, "epoch,loss,accuracy").map_err(io)?;
    for s in trace {
        writeln!(w, "{},{:?},{:?}", s.epoch, s.loss, s.accuracy).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn write_features(path: &Path, features: &Array2<f64>) -> Result<(), Error> {
    let io = |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    writeln!(w, "{FEATURES_HEADER}").map_err(io)?;
    for row in features.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        writeln!(w, "{}", line.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_features(path: &Path) -> Result<Array2<f64>, Error> {
    let file = File::open(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut values = Vec::new();
    let mut n_rows = 0;
    let mut dim = None;
    for (no, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: no + 1,
            message,
        };
        let row: Vec<f64> = line
            .split(',')
            .map(|t| t.trim().parse::<f64>().map_err(|e| bad(format!("`{t}`: {e}"))))
            .collect::<Result<_, _>>()?;
        match dim {
            None => dim = Some(row.len()),
            Some(d) if d != row.len() => return Err(bad(format!("expected {d} values, found {}", row.len()))),
            _ => {}
        }
        values.extend(row);
        n_rows += 1;
    }
    Array2::from_shape_vec((n_rows, dim.unwrap_or(0)), values)
        .map_err(|e| Error::Structural(format!("{}: {e}", path.display())))
}

fn write_ids(path: &Path, ids: &[usize]) -> Result<(), Error> {
    let labels: Vec<u32> = ids.iter().map(|&i| i as u32).collect();
    write_labels(path, &labels)
}

pub fn cmd_synth(cfg: &PipelineConfig) -> CmdResult {
    prepare(cfg, "synth")?;
    let spec = match &cfg.scene_spec {
        Some(path) => SceneSpec::load(&require(path.clone())?)?,
        None => synth::default_benchmark_spec(),
    };
    let cloud = synth::generate(&spec)?;
    spec.save(&out(cfg, artifact::SCENE_SPEC))?;
    save_xyzl(&cloud, &out(cfg, artifact::SCENE))?;
    log::info!("synthesised {} points", cloud.len());
    Ok(())
}

pub fn cmd_sample(cfg: &PipelineConfig) -> CmdResult {
    prepare(cfg, "sample")?;
    let cloud = load_configured_scene(cfg)?;
    let tree = KdTree::build(&cloud, cfg.leaf_size)?;
    let set = pipeline::sample_snapshots(cfg, &cloud, &tree)?;
    set.save(&out(cfg, artifact::SNAPSHOTS))?;
    if cloud.labels().is_some() {
        write_purity(cfg, &cloud, &set)?;
    }
    log::info!("sampled {} snapshots at scales {:?}", set.snapshots.len(), set.fov_scales);
    Ok(())
}

/// Per-scale purity of the sampled views, one CSV row per class and scale.
fn write_purity(cfg: &PipelineConfig, cloud: &PointCloud, set: &SnapshotSet) -> CmdResult {
    let path = out(cfg, artifact::PURITY);
    let mut text = String::from("# snapseg purity v1\nfov_scale,class,purity,snapshots\n");
    for (v, scale) in set.fov_scales.iter().enumerate() {
        let run = set
            .snapshots
            .iter()
            .map(|m| label_snapshot(cloud, &m.views[v]))
            .collect::<Result<Vec<_>, _>>()?;
        let report = purity_report(&[run], cloud.n_classes())?;
        for (c, stats) in report.per_class.iter().enumerate() {
            if let Some(s) = stats {
                text.push_str(&format!("{scale},{c},{:.6},{}\n", s.purity_mean, s.count_mean));
            }
        }
        text.push_str(&format!(
            "{scale},all,{:.6},{}\n",
            report.overall.purity_mean, report.overall.count_mean
        ));
    }
    fs::write(&path, text).map_err(|e| Error::Io { path, source: e })?;
    Ok(())
}

pub fn cmd_pretrain(cfg: &PipelineConfig) -> CmdResult {
    prepare(cfg, "pretrain")?;
    let cloud = load_configured_scene(cfg)?;
    let tree = KdTree::build(&cloud, cfg.leaf_size)?;
    let set = load_snapshots(cfg, &cloud, &tree)?;
    let (model, trace) = pipeline::pretrain(cfg, &cloud, &set)?;
    model.save(&out(cfg, &artifact::contrastnet(cfg.pretext_mode)))?;
    write_trace(&out(cfg, &artifact::contrastnet_trace(cfg.pretext_mode)), &trace)?;
    Ok(())
}

pub fn cmd_cluster(cfg: &PipelineConfig) -> CmdResult {
    prepare(cfg, "cluster")?;
    let cloud = load_configured_scene(cfg)?;
    let tree = KdTree::build(&cloud, cfg.leaf_size)?;
    let set = load_snapshots(cfg, &cloud, &tree)?;
    let model = load_model(out(cfg, &artifact::contrastnet(cfg.pretext_mode)))?;
    let inputs = pipeline::view_inputs(cfg, &cloud, &set);
    let (kmeans, ids) = pipeline::cluster(cfg, &model, &inputs)?;
    kmeans.save(&out(cfg, artifact::KMEANS))?;
    write_ids(&out(cfg, artifact::CLUSTERS), &ids)?;
    Ok(())
}

pub fn cmd_cluster_train(cfg: &PipelineConfig) -> CmdResult {
    prepare(cfg, "cluster_train")?;
    let cloud = load_configured_scene(cfg)?;
    let tree = KdTree::build(&cloud, cfg.leaf_size)?;
    let set = load_snapshots(cfg, &cloud, &tree)?;
    let pretrained = load_model(out(cfg, &artifact::contrastnet(cfg.pretext_mode)))?;
    let clusters: Vec<usize> = read_labels(&require(out(cfg, artifact::CLUSTERS))?)?
        .into_iter()
        .map(|c| c as usize)
        .collect();
    let inputs = pipeline::view_inputs(cfg, &cloud, &set);
    if clusters.len() != inputs.len() {
        return Err(Error::DimensionMismatch {
            expected: inputs.len(),
            got: clusters.len(),
        }
        .into());
    }
    let (model, trace) = pipeline::cluster_train(cfg, &pretrained, &inputs, &clusters)?;
    model.save(&out(cfg, artifact::CLUSTERNET))?;
    write_trace(&out(cfg, artifact::CLUSTERNET_TRACE), &trace)?;
    Ok(())
}

pub fn cmd_extract(cfg: &PipelineConfig) -> CmdResult {
    prepare(cfg, "extract")?;
    let cloud = load_configured_scene(cfg)?;
    let tree = KdTree::build(&cloud, cfg.leaf_size)?;
    let set = load_snapshots(cfg, &cloud, &tree)?;
    let model = load_model(out(cfg, artifact::CLUSTERNET))?;
    let inputs = pipeline::view_inputs(cfg, &cloud, &set);
    let features = pipeline::extract(cfg, &model, &inputs)?;
    write_features(&out(cfg, artifact::FEATURES), &features)?;
    if cloud.labels().is_some() {
        write_labels(&out(cfg, artifact::VIEW_LABELS), &pipeline::view_labels(&cloud, &set)?)?;
    }
    Ok(())
}

pub fn cmd_fit(cfg: &PipelineConfig) -> CmdResult {
    prepare(cfg, "fit")?;
    let features = read_features(&require(out(cfg, artifact::FEATURES))?)?;
    let truth = read_labels(&require(out(cfg, artifact::VIEW_LABELS))?)?;
    let cloud = load_configured_scene(cfg)?;
    let outcome = pipeline::fit(cfg, &features, &truth, cloud.n_classes())?;
    outcome.svm.save(&out(cfg, artifact::SVM))?;
    outcome.training.write_manifest(&out(cfg, artifact::MANIFEST))?;
    if let Some(pseudo) = &outcome.pseudo {
        pseudo.write_csv(&out(cfg, artifact::PSEUDO_LABELS))?;
        log::info!("pseudo-label accuracy {:.4}", pseudo.accuracy(&truth));
    }
    Ok(())
}

pub fn cmd_segment(cfg: &PipelineConfig) -> CmdResult {
    prepare(cfg, "segment")?;
    let cloud = load_configured_scene(cfg)?;
    let tree = KdTree::build(&cloud, cfg.leaf_size)?;
    let model = load_model(out(cfg, artifact::CLUSTERNET))?;
    let svm = LinearSvm::load(&require(out(cfg, artifact::SVM))?)?;
    let (result, votes) = pipeline::segment_scene(cfg, &cloud, &tree, &model, &svm)?;
    log::info!(
        "segmented in {} iterations, coverage {:.5}, {} ties resolved",
        result.iterations,
        result.coverage,
        result.ties_resolved
    );
    if !result.complete {
        log::warn!("max_iters ran out before coverage_stop");
    }
    write_labels(&out(cfg, artifact::LABELS), &result.labels)?;
    votes.save(&out(cfg, artifact::VOTES))?;
    result.write_capture_log(&out(cfg, artifact::CAPTURE_LOG))?;
    export_colored_ply(&cloud, &result.labels, &default_palette(), &out(cfg, artifact::SEGMENTATION_PLY))?;
    Ok(())
}

pub fn cmd_eval(cfg: &PipelineConfig) -> CmdResult {
    prepare(cfg, "eval")?;
    let cloud = load_configured_scene(cfg)?;
    let labels = read_labels(&require(out(cfg, artifact::LABELS))?)?;
    let m = pipeline::point_metrics(&cloud, &labels)?;
    write_metrics_report(&m, cloud.class_names(), &cfg.out_dir, artifact::SEGMENTATION_METRICS)?;
    log::info!(
        "segmentation: OA {:.4}, average F {:.4}",
        m.overall_accuracy,
        m.average_f
    );
    let features = out(cfg, artifact::FEATURES);
    let view_labels = out(cfg, artifact::VIEW_LABELS);
    let svm = out(cfg, artifact::SVM);
    if features.exists() && view_labels.exists() && svm.exists() {
        let features = read_features(&features)?;
        let truth = read_labels(&view_labels)?;
        let pred = LinearSvm::load(&svm)?.predict(features.view())?;
        let m = metrics(&confusion(&truth, &pred, cloud.n_classes())?)?;
        write_metrics_report(&m, cloud.class_names(), &cfg.out_dir, artifact::CLASSIFICATION_METRICS)?;
        log::info!("snapshot classification: OA {:.4}", m.overall_accuracy);
    }
    Ok(())
}

/// Adapts the cluster network to the scene in `finetune_points` through the
/// frozen KMeans centres.
pub fn cmd_finetune(cfg: &PipelineConfig) -> CmdResult {
    prepare(cfg, "finetune")?;
    let Some(points) = &cfg.finetune_points else {
        return Err(CliError::Config(vec!["finetune needs finetune_points".into()]));
    };
    let points = require(points.clone())?;
    let labels = cfg.finetune_labels.clone().map(require).transpose()?;
    let cloud = load_scene(&points, labels.as_deref(), cfg.finetune_format)?;
    let model = load_model(out(cfg, artifact::CLUSTERNET))?;
    let kmeans = KMeansModel::load(&require(out(cfg, artifact::KMEANS))?)?;
    let tree = KdTree::build(&cloud, cfg.leaf_size)?;
    let set = SnapshotSet::sample(
        &tree,
        &cloud,
        cfg.k,
        &cfg.fov_scales,
        cfg.finetune_snapshots,
        stage_seed(cfg.seed, Stage::Finetune),
    )?;
    let inputs = pipeline::view_inputs(cfg, &cloud, &set);
    let train_cfg = cfg.train_config(cfg.finetune_epochs, stage_seed(cfg.seed, Stage::Finetune));
    let (tuned, trace) = fine_tune_for_scene(&model, &kmeans, &inputs, cfg.n_finetune, &train_cfg)?;
    tuned.save(&out(cfg, artifact::FINETUNED))?;
    write_trace(&out(cfg, artifact::FINETUNE_TRACE), &trace)?;
    Ok(())
}

/// Every stage in order. Synthesis is skipped when the configuration points
/// at an existing scene; fine-tuning runs only when it has a target scene.
pub fn cmd_run_all(cfg: &PipelineConfig) -> CmdResult {
    prepare(cfg, "run_all")?;
    if cfg.scene_points.is_none() {
        cmd_synth(cfg)?;
    }
    cmd_sample(cfg)?;
    cmd_pretrain(cfg)?;
    cmd_cluster(cfg)?;
    cmd_cluster_train(cfg)?;
    cmd_extract(cfg)?;
    cmd_fit(cfg)?;
    cmd_segment(cfg)?;
    cmd_eval(cfg)?;
    if cfg.finetune_points.is_some() {
        cmd_finetune(cfg)?;
    }
    Ok(())
}
