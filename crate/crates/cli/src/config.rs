//! Flat `key = value` pipeline configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use snapseg::encoder::{EncoderModel, TrainConfig};
use snapseg::pretext::{input_dim, PretextMode};
use snapseg::scene_io::SceneFormat;
use snapseg::snapshot::validate_fov_scales;
use snapseg::weak_classifier::LabelBudget;

use crate::CliError;

/// Environment variable that replaces the configured seed.
pub const SEED_ENV: &str = "SNAPSEG_SEED";

pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Result<Self, String>;
    fn format_value(&self) -> String;
}

macro_rules! numeric_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> Result<Self, String> {
                s.parse().map_err(|e| format!("`{s}`: {e}"))
            }
            fn format_value(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

numeric_value!(usize, u64, f64, bool);

impl ConfigValue for PathBuf {
    fn parse_value(s: &str) -> Result<Self, String> {
        if s.is_empty() {
            return Err("empty path".into());
        }
        Ok(PathBuf::from(s))
    }
    fn format_value(&self) -> String {
        self.display().to_string()
    }
}

/// An empty value means unset.
impl ConfigValue for Option<PathBuf> {
    fn parse_value(s: &str) -> Result<Self, String> {
        Ok((!s.is_empty()).then(|| PathBuf::from(s)))
    }
    fn format_value(&self) -> String {
        self.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
    }
}

impl ConfigValue for Vec<usize> {
    fn parse_value(s: &str) -> Result<Self, String> {
        s.split(',')
            .map(|t| t.trim().parse().map_err(|e| format!("`{t}`: {e}")))
            .collect()
    }
    fn format_value(&self) -> String {
        self.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
    }
}

impl ConfigValue for PretextMode {
    fn parse_value(s: &str) -> Result<Self, String> {
        s.parse().map_err(|e: snapseg::Error| e.to_string())
    }
    fn format_value(&self) -> String {
        self.as_str().to_string()
    }
}

impl ConfigValue for SceneFormat {
    fn parse_value(s: &str) -> Result<Self, String> {
        s.parse().map_err(|e: snapseg::Error| e.to_string())
    }
    fn format_value(&self) -> String {
        match self {
            SceneFormat::Xyzl => "xyzl",
            SceneFormat::XyzIrgbLabels => "xyz_irgb_labels",
        }
        .to_string()
    }
}

macro_rules! pipeline_config {
    ($($(#[$doc:meta])* $name:ident: $ty:ty = $default:expr,)*) => {
        /// Every stage parameter. Keys in files and overrides use the field
        /// names.
        #[derive(Debug, Clone, PartialEq)]
        pub struct PipelineConfig {
            $($(#[$doc])* pub $name: $ty,)*
        }

        impl Default for PipelineConfig {
            fn default() -> Self {
                Self { $($name: $default,)* }
            }
        }

        impl PipelineConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($name)),*];

            pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
                match key {
                    $(stringify!($name) => {
                        self.$name = <$ty as ConfigValue>::parse_value(value)
                            .map_err(|e| format!("{key}: {e}"))?;
                    })*
                    _ => return Err(format!("unknown key `{key}`")),
                }
                Ok(())
            }

            /// The resolved configuration in the same format it is read from.
            pub fn to_text(&self) -> String {
                let mut out = String::from("# snapseg resolved config\n");
                $(let _ = writeln!(out, "{} = {}", stringify!($name), self.$name.format_value());)*
                out
            }
        }
    };
}

pipeline_config! {
    out_dir: PathBuf = PathBuf::from("snapseg_out"),
    seed: u64 = 0,
    workers: usize = 1,
    /// Scene spec for `synth`; the built-in benchmark when unset.
    scene_spec: Option<PathBuf> = None,
    /// An existing scene to use instead of `out_dir/scene.xyzl`.
    scene_points: Option<PathBuf> = None,
    scene_labels: Option<PathBuf> = None,
    scene_format: SceneFormat = SceneFormat::Xyzl,
    /// Collapse Semantic3D's eight classes into six.
    remap_six_class: bool = false,
    leaf_size: usize = 16,
    k: usize = 512,
    fov_scales: Vec<usize> = vec![1, 2, 10],
    n_snapshots: usize = 2000,
    pretext_mode: PretextMode = PretextMode::MultiFov,
    pairs_per_snapshot: usize = 2,
    side_channel: bool = false,
    layer_sizes: Vec<usize> = EncoderModel::DEFAULT_LAYER_SIZES.to_vec(),
    lr: f64 = 1e-3,
    beta1: f64 = 0.9,
    beta2: f64 = 0.999,
    adam_eps: f64 = 1e-8,
    batch_size: usize = 32,
    weight_decay: f64 = 0.0,
    pretrain_epochs: usize = 20,
    n_clusters: usize = 50,
    kmeans_max_iters: usize = 100,
    cluster_epochs: usize = 5,
    /// Fraction of snapshot views whose true label the classifier sees.
    label_fraction: f64 = 0.05,
    /// Replaces `label_fraction` with a per-class quota when nonzero.
    labels_per_class: usize = 0,
    /// Clusters whose centre label is propagated to nearby members; 0 disables.
    pseudo_clusters: usize = 0,
    pseudo_threshold: f64 = 0.9,
    svm_c: f64 = 1.0,
    svm_epochs: usize = 200,
    coverage_stop: f64 = 0.9995,
    /// 0 means `200 * N / K`.
    max_iters: usize = 0,
    knn_k: usize = 5,
    fov_warmup: usize = 256,
    fov_refit: usize = 512,
    progress_ply: bool = false,
    /// New scene for `finetune`.
    finetune_points: Option<PathBuf> = None,
    finetune_labels: Option<PathBuf> = None,
    finetune_format: SceneFormat = SceneFormat::Xyzl,
    finetune_snapshots: usize = 2000,
    n_finetune: usize = 0,
    finetune_epochs: usize = 5,
}

impl PipelineConfig {
    /// Defaults, then the file, then [`SEED_ENV`], then `overrides`.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        let mut problems = Vec::new();
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| {
                if e.kind() == std::io::ErrorKind::NotFound {
                    CliError::MissingArtifact(path.to_path_buf())
                } else {
                    CliError::Pipeline(snapseg::Error::Io {
                        path: path.to_path_buf(),
                        source: e,
                    })
                }
            })?;
            for (no, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                match line.split_once('=') {
                    Some((k, v)) => {
                        if let Err(e) = cfg.set(k.trim(), v.trim()) {
                            problems.push(format!("{}:{}: {e}", path.display(), no + 1));
                        }
                    }
                    None => problems.push(format!("{}:{}: expected key = value", path.display(), no + 1)),
                }
            }
        }
        if let Ok(seed) = std::env::var(SEED_ENV) {
            if let Err(e) = cfg.set("seed", seed.trim()) {
                problems.push(format!("{SEED_ENV}: {e}"));
            }
        }
        for o in overrides {
            match o.split_once('=') {
                Some((k, v)) => {
                    if let Err(e) = cfg.set(k.trim(), v.trim()) {
                        problems.push(format!("--set {o}: {e}"));
                    }
                }
                None => problems.push(format!("--set {o}: expected key=value")),
            }
        }
        problems.extend(cfg.violations());
        if problems.is_empty() {
            Ok(cfg)
        } else {
            Err(CliError::Config(problems))
        }
    }

    /// Every precondition the configured values break.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let mut check = |ok: bool, msg: String| {
            if !ok {
                v.push(msg);
            }
        };
        check(self.workers >= 1, "workers must be at least 1".into());
        check(self.leaf_size >= 1, "leaf_size must be at least 1".into());
        check(self.k >= 4, format!("k = {} is too small to cut in half", self.k));
        if let Err(e) = validate_fov_scales(&self.fov_scales) {
            check(false, format!("fov_scales: {e}"));
        }
        check(self.n_snapshots >= 2, "n_snapshots must be at least 2".into());
        check(self.pairs_per_snapshot >= 1, "pairs_per_snapshot must be at least 1".into());
        let dim = input_dim(self.side_channel);
        check(
            self.layer_sizes.len() >= 2 && self.layer_sizes[0] == dim,
            format!("layer_sizes must start with the input width {dim} and have a hidden layer"),
        );
        check(self.layer_sizes.iter().all(|&s| s > 0), "layer_sizes must be positive".into());
        if let Err(e) = self.train_config(1, self.seed).validate() {
            check(false, format!("training: {e}"));
        }
        let n_views = self.n_snapshots * self.fov_scales.len();
        check(
            self.n_clusters >= 2 && self.n_clusters <= n_views,
            format!("n_clusters = {} must lie in [2, {n_views}]", self.n_clusters),
        );
        check(self.kmeans_max_iters >= 1, "kmeans_max_iters must be at least 1".into());
        if let Err(e) = self.label_budget().validate() {
            check(false, format!("label budget: {e}"));
        }
        check(
            self.pseudo_clusters <= self.n_clusters,
            format!("pseudo_clusters = {} exceeds n_clusters", self.pseudo_clusters),
        );
        check(
            self.pseudo_threshold > 0.0 && self.pseudo_threshold <= 1.0,
            format!("pseudo_threshold = {} outside (0, 1]", self.pseudo_threshold),
        );
        check(self.svm_c >= 0.0 && self.svm_c.is_finite(), format!("svm_c = {} must be finite and >= 0", self.svm_c));
        check(self.svm_epochs >= 1, "svm_epochs must be at least 1".into());
        check(
            self.coverage_stop > 0.0 && self.coverage_stop <= 1.0,
            format!("coverage_stop = {} outside (0, 1]", self.coverage_stop),
        );
        check(self.knn_k >= 1, "knn_k must be at least 1".into());
        check(self.fov_warmup >= 1 && self.fov_refit >= 1, "fov_warmup and fov_refit must be positive".into());
        check(
            self.n_finetune <= self.finetune_snapshots * self.fov_scales.len(),
            format!("n_finetune = {} exceeds the fine-tune views", self.n_finetune),
        );
        v
    }

    pub fn label_budget(&self) -> LabelBudget {
        if self.labels_per_class > 0 {
            LabelBudget::PerClass(self.labels_per_class)
        } else {
            LabelBudget::Fraction(self.label_fraction)
        }
    }

    pub fn train_config(&self, epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            batch_size: self.batch_size,
            epochs,
            seed,
            weight_decay: self.weight_decay,
            workers: self.workers,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = PipelineConfig::default();
        cfg.set("fov_scales", "1,3").unwrap();
        cfg.set("scene_points", "a/b.txt").unwrap();
        cfg.set("pretext_mode", "part").unwrap();
        let mut back = PipelineConfig::default();
        for line in cfg.to_text().lines().skip(1) {
            let (k, v) = line.split_once('=').unwrap();
            back.set(k.trim(), v.trim()).unwrap();
        }
        assert_eq!(back, cfg);
    }

    #[test]
    fn every_key_is_settable() {
        let cfg = PipelineConfig::default();
        let text = cfg.to_text();
        for key in PipelineConfig::KEYS {
            assert!(text.contains(&format!("\n{key} = ")), "{key}");
        }
    }

    #[test]
    fn defaults_are_valid() {
        assert!(PipelineConfig::default().violations().is_empty());
    }

    #[test]
    fn violations_are_listed() {
        let mut cfg = PipelineConfig::default();
        cfg.k = 2;
        cfg.label_fraction = 0.0;
        cfg.fov_scales = vec![2, 1];
        let v = cfg.violations();
        assert!(v.len() >= 3, "{v:?}");
    }

    #[test]
    fn unknown_key_rejected() {
        let mut cfg = PipelineConfig::default();
        assert!(cfg.set("nope", "1").is_err());
        assert!(cfg.set("k", "many").is_err());
    }
}
