//! Point-set encoder: a shared per-point MLP with ReLU activations followed by
//! a coordinate-wise max pool, plus a linear classification head.
//!
//! The head runs in one of two modes. In pair mode it scores two point sets
//! from `[f(a), f(b), |f(a) - f(b)|]`; in single mode it maps one pooled
//! feature to `n_outputs` logits. The trunk is shared between the pretext
//! stage (pair head) and the cluster-classification stage (single head).
//!
//! Parameters live in one flat vector so the optimiser, the model file and
//! the finite-difference check all see the same layout: per trunk layer a
//! row-major `in x out` weight matrix followed by its bias, then the head
//! weight matrix and bias.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::pretext::ContrastPair;

/// Anything that turns an `n x input_dim` point set into a fixed-size
/// feature vector.
pub trait PointSetEncoder {
    fn input_dim(&self) -> usize;
    fn feature_dim(&self) -> usize;
    fn encode(&self, points: ArrayView2<f64>) -> Result<Array1<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadMode {
    Pair,
    Single,
}

impl fmt::Display for HeadMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadMode::Pair => "pair",
            HeadMode::Single => "single",
        })
    }
}

impl FromStr for HeadMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pair" => Ok(HeadMode::Pair),
            "single" => Ok(HeadMode::Single),
            other => Err(Error::InvalidArgument(format!("unknown head mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerSlot {
    w: usize,
    b: usize,
    fan_in: usize,
    fan_out: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    trunk: Vec<LayerSlot>,
    head: LayerSlot,
    total: usize,
}

impl Layout {
    fn new(layer_sizes: &[usize], head_mode: HeadMode, n_outputs: usize) -> Self {
        let mut off = 0;
        let mut slot = |fan_in: usize, fan_out: usize| {
            let s = LayerSlot {
                w: off,
                b: off + fan_in * fan_out,
                fan_in,
                fan_out,
            };
            off = s.b + fan_out;
            s
        };
        let trunk: Vec<LayerSlot> = layer_sizes.windows(2).map(|w| slot(w[0], w[1])).collect();
        let f = *layer_sizes.last().unwrap();
        let head_in = match head_mode {
            HeadMode::Pair => 3 * f,
            HeadMode::Single => f,
        };
        let head = slot(head_in, n_outputs);
        Self { trunk, head, total: off }
    }
}

fn weights<'a>(params: &'a [f64], s: &LayerSlot) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((s.fan_in, s.fan_out), &params[s.w..s.b]).unwrap()
}

fn bias<'a>(params: &'a [f64], s: &LayerSlot) -> ArrayView1<'a, f64> {
    ArrayView1::from(&params[s.b..s.b + s.fan_out])
}

fn weights_mut<'a>(params: &'a mut [f64], s: &LayerSlot) -> ArrayViewMut2<'a, f64> {
    ArrayViewMut2::from_shape((s.fan_in, s.fan_out), &mut params[s.w..s.b]).unwrap()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    layer_sizes: Vec<usize>,
    head_mode: HeadMode,
    n_outputs: usize,
    seed: u64,
    params: Vec<f64>,
}

/// Activations of one point set, kept for the backward pass.
struct SetForward {
    /// `acts[0]` is the input, `acts[l]` the ReLU output of trunk layer `l`.
    acts: Vec<Array2<f64>>,
    feature: Array1<f64>,
    /// Row that produced the pooled maximum of every feature; the first one
    /// on ties.
    argmax: Vec<usize>,
}

/// One training example.
#[derive(Debug, Clone, PartialEq)]
pub enum Example {
    Pair {
        a: Array2<f64>,
        b: Array2<f64>,
        label: usize,
    },
    Single {
        x: Array2<f64>,
        label: usize,
    },
}

impl Example {
    pub fn from_pair(pair: &ContrastPair, side_channel: bool) -> Self {
        Example::Pair {
            a: pair.a.encoder_input(side_channel),
            b: pair.b.encoder_input(side_channel),
            label: pair.label as usize,
        }
    }

    pub fn label(&self) -> usize {
        match self {
            Example::Pair { label, .. } | Example::Single { label, .. } => *label,
        }
    }
}

fn check_layer_sizes(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "layer sizes {layer_sizes:?} need an input and at least one positive layer"
        )));
    }
    Ok(())
}

impl EncoderModel {
    pub const DEFAULT_LAYER_SIZES: [usize; 4] = [3, 32, 64, 64];

    /// He-normal trunk weights, zero biases and a zero head, so an untrained
    /// model outputs uniform class probabilities.
    pub fn new(layer_sizes: &[usize], head_mode: HeadMode, n_outputs: usize, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(layer_sizes, head_mode, n_outputs, seed)?;
        let layout = model.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for s in &layout.trunk {
            let std = (2.0 / s.fan_in as f64).sqrt();
            for w in &mut model.params[s.w..s.b] {
                *w = std * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Ok(model)
    }

    pub fn zeros(layer_sizes: &[usize], head_mode: HeadMode, n_outputs: usize, seed: u64) -> Result<Self> {
        check_layer_sizes(layer_sizes)?;
        if n_outputs == 0 {
            return Err(Error::InvalidArgument("head needs at least one output".into()));
        }
        let total = Layout::new(layer_sizes, head_mode, n_outputs).total;
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            head_mode,
            n_outputs,
            seed,
            params: vec![0.0; total],
        })
    }

    /// Same trunk, fresh zero head.
    pub fn with_fresh_head(&self, head_mode: HeadMode, n_outputs: usize) -> Result<Self> {
        let mut out = Self::zeros(&self.layer_sizes, head_mode, n_outputs, self.seed)?;
        let n_trunk = self.layout().head.w;
        out.params[..n_trunk].copy_from_slice(&self.params[..n_trunk]);
        Ok(out)
    }

    /// Fills the head with normal noise of the given standard deviation.
    pub fn randomize_head<R: Rng + ?Sized>(&mut self, std: f64, rng: &mut R) {
        let start = self.layout().head.w;
        for w in &mut self.params[start..] {
            *w = std * rng.sample::<f64, _>(StandardNormal);
        }
    }

    fn layout(&self) -> Layout {
        Layout::new(&self.layer_sizes, self.head_mode, self.n_outputs)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn head_mode(&self) -> HeadMode {
        self.head_mode
    }

    pub fn n_outputs(&self) -> usize {
        self.n_outputs
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn check_input(&self, x: ArrayView2<f64>) -> Result<()> {
        if x.nrows() == 0 {
            return Err(Error::InvalidArgument("encoder input has no points".into()));
        }
        if x.ncols() != self.layer_sizes[0] {
            return Err(Error::DimensionMismatch {
                expected: self.layer_sizes[0],
                got: x.ncols(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("encoder input coordinate".into()));
        }
        Ok(())
    }

    fn forward_set(&self, layout: &Layout, x: ArrayView2<f64>) -> SetForward {
        let mut acts = Vec::with_capacity(layout.trunk.len() + 1);
        acts.push(x.to_owned());
        for s in &layout.trunk {
            let mut z = acts.last().unwrap().dot(&weights(&self.params, s));
            z += &bias(&self.params, s);
            z.mapv_inplace(|v| v.max(0.0));
            acts.push(z);
        }
        let last = acts.last().unwrap();
        let f = last.ncols();
        let mut feature = last.row(0).to_owned();
        let mut argmax = vec![0usize; f];
        for (r, row) in last.rows().into_iter().enumerate().skip(1) {
            for j in 0..f {
                if row[j] > feature[j] {
                    feature[j] = row[j];
                    argmax[j] = r;
                }
            }
        }
        SetForward { acts, feature, argmax }
    }

    /// Accumulates the parameter gradient of the trunk given the gradient of
    /// the pooled feature. Only the rows that won the max pool carry gradient.
    fn backward_set(&self, layout: &Layout, fwd: &SetForward, dfeat: ArrayView1<f64>, grad: &mut [f64]) {
        let mut rows: Vec<usize> = fwd.argmax.clone();
        rows.sort_unstable();
        rows.dedup();
        let f = fwd.feature.len();
        let mut dh = Array2::<f64>::zeros((rows.len(), f));
        for j in 0..f {
            let local = rows.binary_search(&fwd.argmax[j]).unwrap();
            dh[[local, j]] += dfeat[j];
        }
        for (l, s) in layout.trunk.iter().enumerate().rev() {
            let out = fwd.acts[l + 1].select(Axis(0), &rows);
            let mut dz = dh;
            ndarray::Zip::from(&mut dz).and(&out).for_each(|d, &h| {
                if h <= 0.0 {
                    *d = 0.0;
                }
            });
            let input = fwd.acts[l].select(Axis(0), &rows);
            general_mat_mul(1.0, &input.t(), &dz, 1.0, &mut weights_mut(grad, s));
            for (g, v) in grad[s.b..s.b + s.fan_out].iter_mut().zip(dz.sum_axis(Axis(0))) {
                *g += v;
            }
            dh = if l > 0 {
                dz.dot(&weights(&self.params, s).t())
            } else {
                Array2::zeros((0, 0))
            };
        }
    }

    /// Pooled feature of one point set.
    pub fn forward_features(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        self.check_input(x)?;
        Ok(self.forward_set(&self.layout(), x).feature)
    }

    fn head_logits(&self, layout: &Layout, u: &Array1<f64>) -> Array1<f64> {
        let mut z = u.dot(&weights(&self.params, &layout.head));
        z += &bias(&self.params, &layout.head);
        z
    }

    /// Logits of the pair head.
    pub fn forward_pair_logits(&self, a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<Array1<f64>> {
        if self.head_mode != HeadMode::Pair {
            return Err(Error::InvalidArgument("model head is not in pair mode".into()));
        }
        self.check_input(a)?;
        self.check_input(b)?;
        let layout = self.layout();
        let fa = self.forward_set(&layout, a).feature;
        let fb = self.forward_set(&layout, b).feature;
        Ok(self.head_logits(&layout, &pair_head_input(&fa, &fb)))
    }

    /// Logits of the single head.
    pub fn forward_logits(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        if self.head_mode != HeadMode::Single {
            return Err(Error::InvalidArgument("model head is not in single mode".into()));
        }
        self.check_input(x)?;
        let layout = self.layout();
        let f = self.forward_set(&layout, x).feature;
        Ok(self.head_logits(&layout, &f))
    }

    fn check_example(&self, ex: &Example) -> Result<()> {
        let (mode_ok, label) = match ex {
            Example::Pair { a, b, label } => {
                self.check_input(a.view())?;
                self.check_input(b.view())?;
                (self.head_mode == HeadMode::Pair, *label)
            }
            Example::Single { x, label } => {
                self.check_input(x.view())?;
                (self.head_mode == HeadMode::Single, *label)
            }
        };
        if !mode_ok {
            return Err(Error::InvalidArgument(format!(
                "example does not match the {} head",
                self.head_mode
            )));
        }
        if label >= self.n_outputs {
            return Err(Error::InvalidArgument(format!(
                "label {label} outside a head of {} outputs",
                self.n_outputs
            )));
        }
        Ok(())
    }

    /// Cross-entropy loss of one example and the predicted class. When `grad`
    /// is given the loss gradient is added to it.
    fn loss_and_grad(&self, layout: &Layout, ex: &Example, grad: Option<&mut [f64]>) -> (f64, usize) {
        match ex {
            Example::Pair { a, b, label } => {
                let fa = self.forward_set(layout, a.view());
                let fb = self.forward_set(layout, b.view());
                let u = pair_head_input(&fa.feature, &fb.feature);
                let (loss, pred, dz) = softmax_xent(&self.head_logits(layout, &u), *label);
                if let Some(grad) = grad {
                    let du = self.head_backward(layout, &u, &dz, grad);
                    let f = fa.feature.len();
                    let mut dfa = du.slice(ndarray::s![..f]).to_owned();
                    let mut dfb = du.slice(ndarray::s![f..2 * f]).to_owned();
                    for j in 0..f {
                        let diff = fa.feature[j] - fb.feature[j];
                        let sign = if diff > 0.0 {
                            1.0
                        } else if diff < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        dfa[j] += sign * du[2 * f + j];
                        dfb[j] -= sign * du[2 * f + j];
                    }
                    self.backward_set(layout, &fa, dfa.view(), grad);
                    self.backward_set(layout, &fb, dfb.view(), grad);
                }
                (loss, pred)
            }
            Example::Single { x, label } => {
                let fwd = self.forward_set(layout, x.view());
                let (loss, pred, dz) = softmax_xent(&self.head_logits(layout, &fwd.feature), *label);
                if let Some(grad) = grad {
                    let du = self.head_backward(layout, &fwd.feature, &dz, grad);
                    self.backward_set(layout, &fwd, du.view(), grad);
                }
                (loss, pred)
            }
        }
    }

    fn head_backward(&self, layout: &Layout, u: &Array1<f64>, dz: &Array1<f64>, grad: &mut [f64]) -> Array1<f64> {
        let s = &layout.head;
        {
            let mut gw = weights_mut(grad, s);
            for (i, &ui) in u.iter().enumerate() {
                if ui != 0.0 {
                    gw.row_mut(i).scaled_add(ui, dz);
                }
            }
        }
        for (g, d) in grad[s.b..s.b + s.fan_out].iter_mut().zip(dz) {
            *g += d;
        }
        weights(&self.params, s).dot(dz)
    }

    /// Loss of one example.
    pub fn loss(&self, ex: &Example) -> Result<f64> {
        self.check_example(ex)?;
        Ok(self.loss_and_grad(&self.layout(), ex, None).0)
    }

    /// Loss of one example and its gradient with respect to every parameter.
    pub fn gradient(&self, ex: &Example) -> Result<(f64, Vec<f64>)> {
        self.check_example(ex)?;
        let mut grad = vec![0.0; self.params.len()];
        let (loss, _) = self.loss_and_grad(&self.layout(), ex, Some(&mut grad));
        Ok((loss, grad))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        let sizes: Vec<String> = self.layer_sizes.iter().map(|s| s.to_string()).collect();
        writeln!(w, "layer_sizes {}", sizes.join(" ")).map_err(io)?;
        writeln!(w, "feature_dim {}", self.feature_dim()).map_err(io)?;
        writeln!(w, "head_mode {}", self.head_mode).map_err(io)?;
        writeln!(w, "n_outputs {}", self.n_outputs).map_err(io)?;
        writeln!(w, "seed {}", self.seed).map_err(io)?;
        for p in &self.params {
            writeln!(w, "{p:?}").map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let mut no = 0usize;
        let mut field = |key: &str| -> Result<String> {
            no += 1;
            let line = lines
                .next()
                .ok_or_else(|| Error::parse(path, no, "truncated header"))?
                .map_err(|e| Error::io(path, e))?;
            match line.split_once(' ') {
                Some((k, v)) if k == key => Ok(v.trim().to_string()),
                _ => Err(Error::parse(path, no, format!("expected `{key} ...`"))),
            }
        };
        let bad = |what: &str| Error::parse(path, 0, format!("bad {what}"));
        let layer_sizes = field("layer_sizes")?
            .split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|_| bad("layer size")))
            .collect::<Result<Vec<_>>>()?;
        let feature_dim: usize = field("feature_dim")?.parse().map_err(|_| bad("feature_dim"))?;
        let head_mode: HeadMode = field("head_mode")?.parse()?;
        let n_outputs: usize = field("n_outputs")?.parse().map_err(|_| bad("n_outputs"))?;
        let seed: u64 = field("seed")?.parse().map_err(|_| bad("seed"))?;
        let mut model = Self::zeros(&layer_sizes, head_mode, n_outputs, seed)?;
        if model.feature_dim() != feature_dim {
            return Err(Error::Structural(format!(
                "{}: feature_dim {feature_dim} disagrees with layer sizes {layer_sizes:?}",
                path.display()
            )));
        }
        let mut values = Vec::with_capacity(model.params.len());
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let v = line
                .trim()
                .parse::<f64>()
                .map_err(|_| Error::parse(path, i + 6, format!("bad parameter `{line}`")))?;
            values.push(v);
        }
        if values.len() != model.params.len() {
            return Err(Error::Structural(format!(
                "{}: expected {} parameters, found {}",
                path.display(),
                model.params.len(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{}: parameter", path.display())));
        }
        model.params = values;
        Ok(model)
    }
}

impl PointSetEncoder for EncoderModel {
    fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    fn feature_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    fn encode(&self, points: ArrayView2<f64>) -> Result<Array1<f64>> {
        self.forward_features(points)
    }
}

fn pair_head_input(fa: &Array1<f64>, fb: &Array1<f64>) -> Array1<f64> {
    let f = fa.len();
    let mut u = Array1::zeros(3 * f);
    for j in 0..f {
        u[j] = fa[j];
        u[f + j] = fb[j];
        u[2 * f + j] = (fa[j] - fb[j]).abs();
    }
    u
}

/// Loss, argmax (smallest index on ties) and gradient w.r.t. the logits.
fn softmax_xent(logits: &Array1<f64>, label: usize) -> (f64, usize, Array1<f64>) {
    let mut pred = 0;
    for (i, &z) in logits.iter().enumerate() {
        if z > logits[pred] {
            pred = i;
        }
    }
    let max = logits[pred];
    let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
    let lse = max + sum.ln();
    let loss = lse - logits[label];
    let mut dz = logits.mapv(|z| (z - lse).exp());
    dz[label] -= 1.0;
    (loss, pred, dz)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// L2 penalty on weight matrices (not biases), added to the gradient.
    pub weight_decay: f64,
    /// Threads computing per-batch gradients. Each thread sums a fixed chunk
    /// of the batch and the chunks are reduced in order, so results are
    /// reproducible for a given worker count but differ between counts.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 32,
            epochs: 100,
            seed: 0,
            weight_decay: 0.0,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.eps > 0.0
            && self.batch_size >= 1
            && self.weight_decay >= 0.0
            && self.workers >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid training configuration {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Per-sample losses and hits plus the summed gradient of one slice of a
/// batch.
fn batch_chunk(model: &EncoderModel, layout: &Layout, data: &[Example], ids: &[usize]) -> (Vec<f64>, Vec<bool>, Vec<f64>) {
    let mut grad = vec![0.0; model.params.len()];
    let mut losses = Vec::with_capacity(ids.len());
    let mut hits = Vec::with_capacity(ids.len());
    for &i in ids {
        let (loss, pred) = model.loss_and_grad(layout, &data[i], Some(&mut grad));
        losses.push(loss);
        hits.push(pred == data[i].label());
    }
    (losses, hits, grad)
}

/// Mini-batch Adam on softmax cross-entropy. Returns one entry per epoch.
///
/// The epoch loss is the mean per-sample loss seen during that epoch (before
/// each batch's update), summed in sample order.
pub fn train(model: &mut EncoderModel, data: &[Example], cfg: &TrainConfig) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    for ex in data {
        model.check_example(ex)?;
    }
    let layout = model.layout();
    let weight_mask: Vec<bool> = {
        let mut m = vec![false; model.params.len()];
        for s in layout.trunk.iter().chain(std::iter::once(&layout.head)) {
            m[s.w..s.b].iter_mut().for_each(|v| *v = true);
        }
        m
    };
    let mut m1 = vec![0.0; model.params.len()];
    let mut m2 = vec![0.0; model.params.len()];
    let mut step = 0i32;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut losses = vec![0.0; data.len()];
    let mut hits = vec![false; data.len()];

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for (batch_no, ids) in order.chunks(cfg.batch_size).enumerate() {
            let parts: Vec<(Vec<f64>, Vec<bool>, Vec<f64>)> = if cfg.workers == 1 || ids.len() < 2 {
                vec![batch_chunk(model, &layout, data, ids)]
            } else {
                let per = ids.len().div_ceil(cfg.workers);
                let shared: &EncoderModel = model;
                std::thread::scope(|scope| {
                    let handles: Vec<_> = ids
                        .chunks(per)
                        .map(|chunk| scope.spawn(|| batch_chunk(shared, &layout, data, chunk)))
                        .collect();
                    handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
                })
            };
            let mut grad = vec![0.0; model.params.len()];
            let mut pos = 0;
            let mut batch_loss = 0.0;
            for (l, h, g) in parts {
                for (loss, hit) in l.into_iter().zip(h) {
                    losses[ids[pos]] = loss;
                    hits[ids[pos]] = hit;
                    batch_loss += loss;
                    pos += 1;
                }
                for (acc, v) in grad.iter_mut().zip(g) {
                    *acc += v;
                }
            }
            let batch_loss = batch_loss / ids.len() as f64;
            if !batch_loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_no,
                    loss: batch_loss,
                });
            }
            step += 1;
            let bc1 = 1.0 - cfg.beta1.powi(step);
            let bc2 = 1.0 - cfg.beta2.powi(step);
            let scale = 1.0 / ids.len() as f64;
            for i in 0..grad.len() {
                let mut g = grad[i] * scale;
                if weight_mask[i] {
                    g += cfg.weight_decay * model.params[i];
                }
                m1[i] = cfg.beta1 * m1[i] + (1.0 - cfg.beta1) * g;
                m2[i] = cfg.beta2 * m2[i] + (1.0 - cfg.beta2) * g * g;
                let update = cfg.lr * (m1[i] / bc1) / ((m2[i] / bc2).sqrt() + cfg.eps);
                model.params[i] -= update;
            }
        }
        let loss = losses.iter().sum::<f64>() / data.len() as f64;
        let accuracy = hits.iter().filter(|&&h| h).count() as f64 / data.len() as f64;
        log::info!("epoch {epoch}: loss {loss:.5} accuracy {accuracy:.4}");
        trace.push(EpochStats { epoch, loss, accuracy });
    }
    Ok(trace)
}

/// Largest relative difference between the analytic gradient and central
/// finite differences, over every parameter.
///
/// The relative error of one parameter is `|a - n| / max(|a|, |n|, 1e-6)`;
/// the floor keeps near-zero gradients from being judged on rounding noise.
pub fn gradient_check(model: &EncoderModel, example: &Example, epsilon: f64) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!(
            "epsilon {epsilon} outside [1e-7, 1e-3]"
        )));
    }
    let (_, analytic) = model.gradient(example)?;
    let layout = model.layout();
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let orig = probe.params[i];
        probe.params[i] = orig + epsilon;
        let up = probe.loss_and_grad(&layout, example, None).0;
        probe.params[i] = orig - epsilon;
        let down = probe.loss_and_grad(&layout, example, None).0;
        probe.params[i] = orig;
        let numeric = (up - down) / (2.0 * epsilon);
        let denom = a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Pooled features of every input, one row each.
pub fn extract_features(model: &EncoderModel, inputs: &[Array2<f64>]) -> Result<Array2<f64>> {
    extract_features_parallel(model, inputs, 1)
}

/// [`extract_features`] split over `workers` threads. Rows are computed
/// independently, so the result does not depend on the worker count.
pub fn extract_features_parallel(model: &EncoderModel, inputs: &[Array2<f64>], workers: usize) -> Result<Array2<f64>> {
    let f = model.feature_dim();
    let mut out = Array2::zeros((inputs.len(), f));
    if inputs.is_empty() {
        return Ok(out);
    }
    let workers = workers.clamp(1, inputs.len());
    let per = inputs.len().div_ceil(workers);
    let rows: Vec<Result<Vec<Array1<f64>>>> = if workers == 1 {
        vec![inputs.iter().map(|x| model.forward_features(x.view())).collect()]
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = inputs
                .chunks(per)
                .map(|chunk| scope.spawn(move || chunk.iter().map(|x| model.forward_features(x.view())).collect()))
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        })
    };
    let mut r = 0;
    for chunk in rows {
        for row in chunk? {
            out.row_mut(r).assign(&row);
            r += 1;
        }
    }
    Ok(out)
}
