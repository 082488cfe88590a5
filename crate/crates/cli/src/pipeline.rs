//! Pipeline stages on in-memory data. The commands wrap these with artifact
//! reading and writing; the acceptance suite calls them directly.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use snapseg::clustering::{
    center_labels_from_truth, cluster_pseudo_label, fit_kmeans, select_random_clusters, KMeansModel,
    PseudoLabelSet,
};
use snapseg::encoder::{extract_features_parallel, train, EncoderModel, EpochStats, Example, HeadMode};
use snapseg::evaluation::{confusion, metrics, Metrics};
use snapseg::pretext::{make_pairs, multi_fov_points, snapshot_input};
use snapseg::scene_io::{PointCloud, UNLABELED};
use snapseg::segmenter::{segment, EncoderSvmClassifier, SegmentConfig, SegmentationResult, VoteTable};
use snapseg::snapshot::{label_snapshot, AdaptiveFovSelector, SnapshotSet};
use snapseg::spatial_index::KdTree;
use snapseg::weak_classifier::{build_weak_training_set, fit_svm, LinearSvm, SvmConfig, WeakTrainingSet};
use snapseg::Result;

use crate::config::PipelineConfig;

const KMEANS_TOL: f64 = 1e-8;

/// Independent seed for each stage, so changing one stage's draws leaves the
/// others alone.
#[derive(Debug, Clone, Copy)]
pub enum Stage {
    Sample = 1,
    Pairs,
    Pretrain,
    Cluster,
    ClusterTrain,
    Budget,
    Pseudo,
    Svm,
    Segment,
    Finetune,
}

pub fn stage_seed(seed: u64, stage: Stage) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((stage as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9))
}

pub fn sample_snapshots(cfg: &PipelineConfig, cloud: &PointCloud, tree: &KdTree) -> Result<SnapshotSet> {
    SnapshotSet::sample(
        tree,
        cloud,
        cfg.k,
        &cfg.fov_scales,
        cfg.n_snapshots,
        stage_seed(cfg.seed, Stage::Sample),
    )
}

/// Network inputs of every view, in [`SnapshotSet::views`] order.
pub fn view_inputs(cfg: &PipelineConfig, cloud: &PointCloud, set: &SnapshotSet) -> Vec<Array2<f64>> {
    set.views().map(|s| snapshot_input(cloud, s, cfg.side_channel)).collect()
}

/// Majority ground-truth class of every view.
pub fn view_labels(cloud: &PointCloud, set: &SnapshotSet) -> Result<Vec<u32>> {
    set.views().map(|s| Ok(label_snapshot(cloud, s)?.class_id)).collect()
}

/// Trains the pair-discrimination network on the configured pretext task.
pub fn pretrain(cfg: &PipelineConfig, cloud: &PointCloud, set: &SnapshotSet) -> Result<(EncoderModel, Vec<EpochStats>)> {
    let sources: Vec<_> = set.snapshots.iter().map(|m| multi_fov_points(cloud, m)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(cfg.seed, Stage::Pairs));
    let pairs = make_pairs(cfg.pretext_mode, &sources, cfg.pairs_per_snapshot, &mut rng)?;
    let data: Vec<Example> = pairs.iter().map(|p| Example::from_pair(p, cfg.side_channel)).collect();
    log::info!("pretraining on {} {} pairs", data.len(), cfg.pretext_mode);
    let seed = stage_seed(cfg.seed, Stage::Pretrain);
    let mut model = EncoderModel::new(&cfg.layer_sizes, HeadMode::Pair, 2, seed)?;
    let trace = train(&mut model, &data, &cfg.train_config(cfg.pretrain_epochs, seed))?;
    Ok((model, trace))
}

/// KMeans++ on the pretrained features; returns the model and each view's
/// cluster id.
pub fn cluster(cfg: &PipelineConfig, model: &EncoderModel, inputs: &[Array2<f64>]) -> Result<(KMeansModel, Vec<usize>)> {
    let features = extract_features_parallel(model, inputs, cfg.workers)?;
    let kmeans = fit_kmeans(
        features.view(),
        cfg.n_clusters,
        stage_seed(cfg.seed, Stage::Cluster),
        cfg.kmeans_max_iters,
        KMEANS_TOL,
    )?;
    let ids = snapseg::clustering::assign(&kmeans, features.view())?;
    log::info!(
        "kmeans: {} clusters, inertia {:.6}, {} iterations",
        kmeans.n_clusters(),
        kmeans.inertia,
        kmeans.n_iters_run
    );
    Ok((kmeans, ids))
}

/// Continues training the pretrained trunk on cluster ids.
pub fn cluster_train(
    cfg: &PipelineConfig,
    pretrained: &EncoderModel,
    inputs: &[Array2<f64>],
    clusters: &[usize],
) -> Result<(EncoderModel, Vec<EpochStats>)> {
    let mut model = pretrained.with_fresh_head(HeadMode::Single, cfg.n_clusters)?;
    let data: Vec<Example> = inputs
        .iter()
        .zip(clusters)
        .map(|(x, &label)| Example::Single { x: x.clone(), label })
        .collect();
    let seed = stage_seed(cfg.seed, Stage::ClusterTrain);
    let trace = train(&mut model, &data, &cfg.train_config(cfg.cluster_epochs, seed))?;
    Ok((model, trace))
}

pub fn extract(cfg: &PipelineConfig, model: &EncoderModel, inputs: &[Array2<f64>]) -> Result<Array2<f64>> {
    extract_features_parallel(model, inputs, cfg.workers)
}

/// Output of the weak-classifier stage.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub svm: LinearSvm,
    pub training: WeakTrainingSet,
    pub pseudo: Option<PseudoLabelSet>,
}

/// Picks the label budget, optionally adds cluster pseudo-labels, and fits
/// the linear classifier.
pub fn fit(cfg: &PipelineConfig, features: &Array2<f64>, truth: &[u32], n_classes: usize) -> Result<FitOutcome> {
    let pseudo = if cfg.pseudo_clusters > 0 {
        let seed = stage_seed(cfg.seed, Stage::Pseudo);
        let kmeans = fit_kmeans(features.view(), cfg.n_clusters, seed, cfg.kmeans_max_iters, KMEANS_TOL)?;
        let chosen = select_random_clusters(cfg.n_clusters, cfg.pseudo_clusters, seed)?;
        let centre_labels: std::collections::BTreeMap<usize, u32> =
            center_labels_from_truth(&kmeans, features.view(), truth, &chosen)?
                .into_iter()
                .filter(|&(_, l)| l != UNLABELED)
                .collect();
        let usable: Vec<usize> = centre_labels.keys().copied().collect();
        let set = cluster_pseudo_label(&kmeans, features.view(), &usable, &centre_labels, cfg.pseudo_threshold)?;
        log::info!("{} pseudo-labels from {} clusters", set.len(), usable.len());
        Some(set)
    } else {
        None
    };
    let training = build_weak_training_set(
        features.view(),
        truth,
        cfg.label_budget(),
        pseudo.as_ref(),
        stage_seed(cfg.seed, Stage::Budget),
    )?;
    log::info!(
        "weak training set: {} true, {} pseudo labels",
        training.n_true,
        training.n_pseudo()
    );
    let svm = fit_svm(
        training.features.view(),
        &training.labels,
        n_classes,
        &SvmConfig {
            c: cfg.svm_c,
            epochs: cfg.svm_epochs,
            seed: stage_seed(cfg.seed, Stage::Svm),
        },
    )?;
    Ok(FitOutcome { svm, training, pseudo })
}

pub fn segment_config(cfg: &PipelineConfig) -> SegmentConfig {
    SegmentConfig {
        k: cfg.k,
        fov_scales: cfg.fov_scales.clone(),
        coverage_stop: cfg.coverage_stop,
        max_iters: (cfg.max_iters > 0).then_some(cfg.max_iters),
        seed: stage_seed(cfg.seed, Stage::Segment),
        knn_k: cfg.knn_k,
        batch: if cfg.workers > 1 { 8 * cfg.workers } else { 1 },
        progress_dir: cfg.progress_ply.then(|| cfg.out_dir.clone()),
    }
}

pub fn segment_scene(
    cfg: &PipelineConfig,
    cloud: &PointCloud,
    tree: &KdTree,
    model: &EncoderModel,
    svm: &LinearSvm,
) -> Result<(SegmentationResult, VoteTable)> {
    let classifier = EncoderSvmClassifier {
        model,
        svm,
        side_channel: cfg.side_channel,
        workers: cfg.workers,
    };
    let mut selector = AdaptiveFovSelector::new(
        &cfg.fov_scales,
        cfg.fov_warmup,
        cfg.fov_refit,
        stage_seed(cfg.seed, Stage::Segment),
    )?;
    segment(cloud, tree, &classifier, &mut selector, &segment_config(cfg))
}

/// Point-wise metrics of `labels` against the scene's ground truth.
pub fn point_metrics(cloud: &PointCloud, labels: &[u32]) -> Result<Metrics> {
    let truth = cloud.require_labels()?;
    metrics(&confusion(truth, labels, cloud.n_classes())?)
}

/// Everything an end-to-end run produces in memory.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub snapshots: SnapshotSet,
    pub contrast_trace: Vec<EpochStats>,
    pub cluster_trace: Vec<EpochStats>,
    pub model: EncoderModel,
    pub features: Array2<f64>,
    pub view_labels: Vec<u32>,
    pub fit: FitOutcome,
    pub segmentation: SegmentationResult,
    pub votes: VoteTable,
    pub point_metrics: Metrics,
}

/// Sampling through segmentation on one scene.
pub fn run_in_memory(cfg: &PipelineConfig, cloud: &PointCloud) -> Result<RunOutcome> {
    let tree = KdTree::build(cloud, cfg.leaf_size)?;
    let snapshots = sample_snapshots(cfg, cloud, &tree)?;
    let inputs = view_inputs(cfg, cloud, &snapshots);
    let (pretrained, contrast_trace) = pretrain(cfg, cloud, &snapshots)?;
    let (_, clusters) = cluster(cfg, &pretrained, &inputs)?;
    let (model, cluster_trace) = cluster_train(cfg, &pretrained, &inputs, &clusters)?;
    finish_run(cfg, cloud, &tree, snapshots, &inputs, model, contrast_trace, cluster_trace)
}

/// The same classification and segmentation on top of an untrained encoder.
pub fn run_untrained_control(cfg: &PipelineConfig, cloud: &PointCloud) -> Result<RunOutcome> {
    let tree = KdTree::build(cloud, cfg.leaf_size)?;
    let snapshots = sample_snapshots(cfg, cloud, &tree)?;
    let inputs = view_inputs(cfg, cloud, &snapshots);
    let model = EncoderModel::new(
        &cfg.layer_sizes,
        HeadMode::Single,
        cfg.n_clusters,
        stage_seed(cfg.seed, Stage::Pretrain),
    )?;
    finish_run(cfg, cloud, &tree, snapshots, &inputs, model, Vec::new(), Vec::new())
}

#[allow(clippy::too_many_arguments)]
fn finish_run(
    cfg: &PipelineConfig,
    cloud: &PointCloud,
    tree: &KdTree,
    snapshots: SnapshotSet,
    inputs: &[Array2<f64>],
    model: EncoderModel,
    contrast_trace: Vec<EpochStats>,
    cluster_trace: Vec<EpochStats>,
) -> Result<RunOutcome> {
    let features = extract(cfg, &model, inputs)?;
    let view_labels = view_labels(cloud, &snapshots)?;
    let fit = fit(cfg, &features, &view_labels, cloud.n_classes())?;
    let (segmentation, votes) = segment_scene(cfg, cloud, tree, &model, &fit.svm)?;
    let point_metrics = point_metrics(cloud, &segmentation.labels)?;
    Ok(RunOutcome {
        snapshots,
        contrast_trace,
        cluster_trace,
        model,
        features,
        view_labels,
        fit,
        segmentation,
        votes,
        point_metrics,
    })
}
