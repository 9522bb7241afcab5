//! Dense ZINB autoencoder with trainable cluster centers.
//!
//! All trainable values live in one flat vector. The encoder tensors come
//! first and form the protected partition; the decoder trunk, the three ZINB
//! heads and the cluster centers follow and form the exposed partition. A
//! per-sample gradient is therefore split at a single offset.
//!
//! Weights are stored `in × out`, row-major, so a layer computes `X·W + b`.

mod checkpoint;
mod optim;

use std::ops::Range;
use std::sync::Arc;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{self, sigmoid, softplus};

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT};
pub use optim::{OptimizerConfig, OptimizerKind, OptimizerState};

pub const DEFAULT_HIDDEN: [usize; 2] = [256, 64];
pub const DEFAULT_LATENT: usize = 32;

/// Dispersion head output is clamped to this range.
pub const DISPERSION_RANGE: (f64, f64) = (1e-4, 1e4);
/// `exp(mean head)` is clamped to this range before size-factor scaling.
pub const MEAN_RANGE: (f64, f64) = (1e-5, 1e6);

/// Layer widths of the autoencoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub latent: usize,
    pub n_clusters: usize,
}

impl Architecture {
    /// `input_dim → 256 → 64 → 32`, mirrored by the decoder.
    pub fn new(input_dim: usize, n_clusters: usize) -> Self {
        Self {
            input_dim,
            hidden: DEFAULT_HIDDEN.to_vec(),
            latent: DEFAULT_LATENT,
            n_clusters,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.latent == 0 || self.n_clusters == 0 {
            return Err(Error::config(
                "input_dim, latent width and n_clusters must all be >= 1",
            ));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("hidden widths must be >= 1"));
        }
        Ok(())
    }

    /// `[input, hidden..., latent]`.
    pub fn encoder_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden);
        dims.push(self.latent);
        dims
    }

    /// `[latent, hidden reversed...]`; the heads map the last width back to the input.
    pub fn trunk_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.latent];
        dims.extend(self.hidden.iter().rev());
        dims
    }

    pub fn n_encoder_layers(&self) -> usize {
        self.hidden.len() + 1
    }

    pub fn n_trunk_layers(&self) -> usize {
        self.hidden.len()
    }

    /// Encoder layers, trunk layers and the head layer, numbered from 1.
    pub fn n_network_layers(&self) -> usize {
        self.n_encoder_layers() + self.n_trunk_layers() + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    /// Released with the model; its gradients are noised.
    Protected,
    Exposed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
    pub partition: Partition,
    /// 1-based network layer; `None` for the cluster centers.
    pub layer: Option<usize>,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Head order inside the layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Mean = 0,
    Dispersion = 1,
    Dropout = 2,
}

/// Position of every tensor in the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    arch: Architecture,
    tensors: Vec<TensorSpec>,
    n_protected: usize,
    n_total: usize,
}

impl Layout {
    pub fn new(arch: &Architecture) -> Result<Self> {
        arch.validate()?;
        let mut tensors = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, rows: usize, cols: usize, partition, layer| {
            tensors.push(TensorSpec {
                name,
                rows,
                cols,
                offset,
                partition,
                layer,
            });
            offset += rows * cols;
        };
        let enc = arch.encoder_dims();
        for (i, w) in enc.windows(2).enumerate() {
            push(format!("encoder.{i}.weight"), w[0], w[1], Partition::Protected, Some(i + 1));
            push(format!("encoder.{i}.bias"), 1, w[1], Partition::Protected, Some(i + 1));
        }
        let n_protected = enc.windows(2).map(|w| (w[0] + 1) * w[1]).sum();
        let first_trunk = arch.n_encoder_layers() + 1;
        let trunk = arch.trunk_dims();
        for (i, w) in trunk.windows(2).enumerate() {
            let layer = Some(first_trunk + i);
            push(format!("decoder.{i}.weight"), w[0], w[1], Partition::Exposed, layer);
            push(format!("decoder.{i}.bias"), 1, w[1], Partition::Exposed, layer);
        }
        let head_in = *trunk.last().expect("trunk has a width");
        let head_layer = Some(arch.n_network_layers());
        for name in ["mean_head", "dispersion_head", "dropout_head"] {
            push(format!("{name}.weight"), head_in, arch.input_dim, Partition::Exposed, head_layer);
            push(format!("{name}.bias"), 1, arch.input_dim, Partition::Exposed, head_layer);
        }
        push("cluster_centers".into(), arch.n_clusters, arch.latent, Partition::Exposed, None);
        Ok(Self {
            arch: arch.clone(),
            tensors,
            n_protected,
            n_total: offset,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn n_protected(&self) -> usize {
        self.n_protected
    }

    pub fn n_exposed(&self) -> usize {
        self.n_total - self.n_protected
    }

    pub fn n_params(&self) -> usize {
        self.n_total
    }

    /// Flat ranges covered by the given 1-based network layers.
    pub fn layer_ranges(&self, layers: impl Fn(usize) -> bool) -> Vec<Range<usize>> {
        self.tensors
            .iter()
            .filter(|t| t.layer.is_some_and(&layers))
            .map(TensorSpec::range)
            .collect()
    }

    fn encoder_layer(&self, i: usize) -> (usize, usize) {
        (2 * i, 2 * i + 1)
    }

    fn trunk_layer(&self, i: usize) -> (usize, usize) {
        let base = 2 * self.arch.n_encoder_layers();
        (base + 2 * i, base + 2 * i + 1)
    }

    fn head(&self, head: Head) -> (usize, usize) {
        let base = 2 * (self.arch.n_encoder_layers() + self.arch.n_trunk_layers());
        let h = head as usize;
        (base + 2 * h, base + 2 * h + 1)
    }

    fn centers(&self) -> usize {
        self.tensors.len() - 1
    }
}

/// Decoded ZINB parameters, one row per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ZinbOutputs {
    pub mean: Array2<f64>,
    pub dispersion: Array2<f64>,
    pub dropout: Array2<f64>,
}

/// Inputs of one lot. Row `i` belongs to dataset sample `indices[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub features: Array2<f64>,
    pub counts: Array2<f64>,
    pub size_factors: Array1<f64>,
    /// Two augmented views of `features`, needed by the instance loss.
    pub views: Option<(Array2<f64>, Array2<f64>)>,
    /// Fixed target distribution rows, needed by the KL clustering loss.
    pub targets: Option<Array2<f64>>,
}

#[derive(Debug, Clone, Copy)]
pub struct BatchView<'a> {
    pub features: ArrayView2<'a, f64>,
    pub counts: ArrayView2<'a, f64>,
    pub size_factors: ArrayView1<'a, f64>,
    pub views: Option<(ArrayView2<'a, f64>, ArrayView2<'a, f64>)>,
    pub targets: Option<ArrayView2<'a, f64>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn view(&self) -> BatchView<'_> {
        self.rows(0..self.len())
    }

    /// The single-sample batch at row `i`.
    pub fn row(&self, i: usize) -> BatchView<'_> {
        self.rows(i..i + 1)
    }

    fn rows(&self, r: Range<usize>) -> BatchView<'_> {
        let sl = s![r.clone(), ..];
        BatchView {
            features: self.features.slice(sl),
            counts: self.counts.slice(sl),
            size_factors: self.size_factors.slice(s![r.clone()]),
            views: self
                .views
                .as_ref()
                .map(|(a, b)| (a.slice(sl), b.slice(sl))),
            targets: self.targets.as_ref().map(|t| t.slice(sl)),
        }
    }
}

/// Term weights of a composite per-sample loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub zinb: f64,
    pub instance: f64,
    pub kl: f64,
    pub cc: f64,
    /// Symmetric stop-gradient on the instance loss: each view only receives
    /// gradient from the term where it is the online branch.
    pub stop_gradient: bool,
}

impl LossSpec {
    fn only(zinb: f64, instance: f64, kl: f64, cc: f64) -> Self {
        Self {
            zinb,
            instance,
            kl,
            cc,
            stop_gradient: false,
        }
    }

    /// `ρ·L_zinb + (1−ρ)·L_ii`.
    pub fn instance_stage(w: &losses::LossWeights) -> Self {
        Self::only(w.rho, 1.0 - w.rho, 0.0, 0.0)
    }

    /// `β1·L_zinb + β2·L_cls + β3·L_cc`.
    pub fn cluster_stage(w: &losses::LossWeights) -> Self {
        Self::only(w.beta[0], 0.0, w.beta[1], w.beta[2])
    }

    pub fn zinb_only() -> Self {
        Self::only(1.0, 0.0, 0.0, 0.0)
    }

    pub fn instance_only() -> Self {
        Self::only(0.0, 1.0, 0.0, 0.0)
    }

    pub fn kl_only() -> Self {
        Self::only(0.0, 0.0, 1.0, 0.0)
    }

    pub fn cc_only() -> Self {
        Self::only(0.0, 0.0, 0.0, 1.0)
    }
}

/// Gradient of one sample's loss, split by partition.
#[derive(Debug, Clone, PartialEq)]
pub struct PerSampleGradient {
    pub sample_index: usize,
    pub loss: f64,
    pub protected: Vec<f64>,
    pub exposed: Vec<f64>,
}

/// Activations recorded by a forward pass through a stack of dense layers.
struct Trace {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    relu_last: bool,
}

/// Autoencoder parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    layout: Arc<Layout>,
    values: Vec<f64>,
}

impl ModelParams {
    /// Fan-in scaled uniform weights `U(−1/√fan_in, 1/√fan_in)`, zero biases,
    /// zero cluster centers.
    pub fn init(arch: &Architecture, seed: u64) -> Result<Self> {
        let layout = Arc::new(Layout::new(arch)?);
        let mut values = vec![0.0; layout.n_params()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in layout.tensors() {
            if t.name.ends_with(".weight") {
                let bound = 1.0 / (t.rows as f64).sqrt();
                for v in &mut values[t.range()] {
                    *v = rng.random_range(-bound..bound);
                }
            }
        }
        Ok(Self { layout, values })
    }

    pub fn from_values(layout: Arc<Layout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.n_params() {
            return Err(Error::ShapeMismatch {
                context: "parameter vector",
                expected: layout.n_params(),
                actual: values.len(),
            });
        }
        Ok(Self { layout, values })
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn architecture(&self) -> &Architecture {
        &self.layout.arch
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn protected(&self) -> &[f64] {
        &self.values[..self.layout.n_protected]
    }

    pub fn exposed(&self) -> &[f64] {
        &self.values[self.layout.n_protected..]
    }

    fn matrix(&self, idx: usize) -> ArrayView2<'_, f64> {
        let t = &self.layout.tensors[idx];
        ArrayView2::from_shape((t.rows, t.cols), &self.values[t.range()]).expect("layout shape")
    }

    fn vector(&self, idx: usize) -> ArrayView1<'_, f64> {
        let t = &self.layout.tensors[idx];
        ArrayView1::from(&self.values[t.range()])
    }

    /// Named tensor as an `rows × cols` view.
    pub fn tensor(&self, name: &str) -> Option<ArrayView2<'_, f64>> {
        let idx = self.layout.tensors.iter().position(|t| t.name == name)?;
        Some(self.matrix(idx))
    }

    pub fn centers(&self) -> ArrayView2<'_, f64> {
        self.matrix(self.layout.centers())
    }

    pub fn set_centers(&mut self, centers: ArrayView2<f64>) -> Result<()> {
        let t = &self.layout.tensors[self.layout.centers()];
        if centers.dim() != (t.rows, t.cols) {
            return Err(Error::ShapeMismatch {
                context: "cluster centers",
                expected: t.len(),
                actual: centers.len(),
            });
        }
        let range = t.range();
        for (dst, src) in self.values[range].iter_mut().zip(centers.iter()) {
            *dst = *src;
        }
        Ok(())
    }

    fn check_input(&self, x: ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.layout.arch.input_dim {
            return Err(Error::ShapeMismatch {
                context: "input columns",
                expected: self.layout.arch.input_dim,
                actual: x.ncols(),
            });
        }
        Ok(())
    }

    fn forward(&self, layers: &[(usize, usize)], x: ArrayView2<f64>, relu_last: bool) -> (Array2<f64>, Trace) {
        let mut inputs = Vec::with_capacity(layers.len());
        let mut pre = Vec::with_capacity(layers.len());
        let mut h = x.to_owned();
        for (k, &(w, b)) in layers.iter().enumerate() {
            let a = h.dot(&self.matrix(w)) + &self.vector(b);
            let out = if k + 1 < layers.len() || relu_last {
                a.mapv(|v| v.max(0.0))
            } else {
                a.clone()
            };
            inputs.push(h);
            pre.push(a);
            h = out;
        }
        (
            h,
            Trace {
                inputs,
                pre,
                relu_last,
            },
        )
    }

    /// Records one [`LayerUse`] per layer and returns the gradient with respect
    /// to the stack input when `need_input` is set.
    fn backward(
        &self,
        layers: &[(usize, usize)],
        trace: Trace,
        d_out: Array2<f64>,
        need_input: bool,
        uses: &mut Vec<LayerUse>,
    ) -> Option<Array2<f64>> {
        let Trace { inputs, pre, relu_last } = trace;
        let n_layers = layers.len();
        let mut d = d_out;
        for (k, (input, a)) in inputs.into_iter().zip(pre).enumerate().rev() {
            let (weight, bias) = layers[k];
            if k + 1 < n_layers || relu_last {
                Zip::from(&mut d).and(&a).for_each(|g, &a| {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
            let next = (k > 0 || need_input).then(|| d.dot(&self.matrix(weight).t()));
            uses.push(LayerUse {
                weight,
                bias,
                input,
                delta: d,
            });
            match next {
                Some(n) => d = n,
                None => return None,
            }
        }
        Some(d)
    }

    fn encoder_layers(&self) -> Vec<(usize, usize)> {
        (0..self.layout.arch.n_encoder_layers())
            .map(|i| self.layout.encoder_layer(i))
            .collect()
    }

    fn trunk_layers(&self) -> Vec<(usize, usize)> {
        (0..self.layout.arch.n_trunk_layers())
            .map(|i| self.layout.trunk_layer(i))
            .collect()
    }

    /// Latent embeddings for every row of `x`.
    pub fn encode(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        Ok(self.forward(&self.encoder_layers(), x, false).0)
    }

    fn head_logits(&self, trunk_out: &Array2<f64>, head: Head) -> Array2<f64> {
        let (w, b) = self.layout.head(head);
        trunk_out.dot(&self.matrix(w)) + &self.vector(b)
    }

    /// ZINB parameters for every embedding row.
    pub fn decode(&self, z: ArrayView2<f64>, size_factors: ArrayView1<f64>) -> Result<ZinbOutputs> {
        if z.ncols() != self.layout.arch.latent {
            return Err(Error::ShapeMismatch {
                context: "latent columns",
                expected: self.layout.arch.latent,
                actual: z.ncols(),
            });
        }
        if size_factors.len() != z.nrows() {
            return Err(Error::ShapeMismatch {
                context: "size factors",
                expected: z.nrows(),
                actual: size_factors.len(),
            });
        }
        if let Some(i) = size_factors.iter().position(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::domain(format!("size factor of row {i} is not positive")));
        }
        let (t, _) = self.forward(&self.trunk_layers(), z, true);
        let mut mean = self.head_logits(&t, Head::Mean).mapv(|h| mean_map(h).0);
        for (mut row, &sf) in mean.outer_iter_mut().zip(size_factors) {
            row *= sf;
        }
        let dispersion = self.head_logits(&t, Head::Dispersion).mapv(|h| dispersion_map(h).0);
        let dropout = self.head_logits(&t, Head::Dropout).mapv(sigmoid);
        Ok(ZinbOutputs {
            mean,
            dispersion,
            dropout,
        })
    }

    fn check_batch(&self, batch: &BatchView, spec: &LossSpec) -> Result<()> {
        self.check_input(batch.features)?;
        let n = batch.features.nrows();
        let d = self.layout.arch.input_dim;
        let s = self.layout.arch.n_clusters;
        if batch.counts.dim() != (n, d) {
            return Err(Error::ShapeMismatch {
                context: "batch counts",
                expected: n * d,
                actual: batch.counts.len(),
            });
        }
        if batch.size_factors.len() != n {
            return Err(Error::ShapeMismatch {
                context: "batch size factors",
                expected: n,
                actual: batch.size_factors.len(),
            });
        }
        if spec.instance != 0.0 {
            match batch.views {
                Some((a, b)) if a.dim() == (n, d) && b.dim() == (n, d) => {}
                _ => return Err(Error::domain("instance loss needs two augmented views per sample")),
            }
        }
        if spec.kl != 0.0 {
            match batch.targets {
                Some(t) if t.dim() == (n, s) => {}
                _ => return Err(Error::domain("KL loss needs a target distribution row per sample")),
            }
        }
        Ok(())
    }

    /// Forward pass over `batch`, plus the backward pass when `need_grad` is set.
    fn tape(&self, batch: BatchView, spec: &LossSpec, need_grad: bool) -> Result<Tape> {
        self.check_batch(&batch, spec)?;
        let n = batch.features.nrows();
        let arch = &self.layout.arch;
        let enc = self.encoder_layers();
        let mut tape = Tape {
            losses: vec![0.0; n],
            uses: Vec::new(),
            centers: Vec::new(),
        };
        let centered = spec.kl != 0.0 || spec.cc != 0.0;
        if need_grad && centered {
            tape.centers = vec![Array2::zeros(self.centers().raw_dim()); n];
        }

        if spec.zinb != 0.0 || spec.kl != 0.0 {
            let (z, enc_trace) = self.forward(&enc, batch.features, false);
            let mut dz = Array2::<f64>::zeros(z.raw_dim());

            if spec.zinb != 0.0 {
                let trunk = self.trunk_layers();
                let (t, trunk_trace) = self.forward(&trunk, z.view(), true);
                let h_mean = self.head_logits(&t, Head::Mean);
                let h_disp = self.head_logits(&t, Head::Dispersion);
                let h_drop = self.head_logits(&t, Head::Dropout);
                let scale = spec.zinb / arch.input_dim as f64;
                let mut g_mean = Array2::zeros(h_mean.raw_dim());
                let mut g_disp = Array2::zeros(h_mean.raw_dim());
                let mut g_drop = Array2::zeros(h_mean.raw_dim());
                for i in 0..n {
                    let sf = batch.size_factors[i];
                    let mut row = 0.0;
                    for g in 0..arch.input_dim {
                        let (m0, dm0) = mean_map(h_mean[[i, g]]);
                        let (theta, dtheta) = dispersion_map(h_disp[[i, g]]);
                        let (v, d_mu, d_theta, d_logit) =
                            losses::zinb_nll_logit_grad(batch.counts[[i, g]], m0 * sf, theta, h_drop[[i, g]]);
                        row += v;
                        g_mean[[i, g]] = scale * d_mu * dm0 * sf;
                        g_disp[[i, g]] = scale * d_theta * dtheta;
                        g_drop[[i, g]] = scale * d_logit;
                    }
                    tape.losses[i] += scale * row;
                }
                if need_grad {
                    let mut dt = Array2::zeros(t.raw_dim());
                    for (head, gh) in [(Head::Mean, g_mean), (Head::Dispersion, g_disp), (Head::Dropout, g_drop)] {
                        let (weight, bias) = self.layout.head(head);
                        general_mat_mul(1.0, &gh, &self.matrix(weight).t(), 1.0, &mut dt);
                        tape.uses.push(LayerUse {
                            weight,
                            bias,
                            input: t.clone(),
                            delta: gh,
                        });
                    }
                    dz += &self
                        .backward(&trunk, trunk_trace, dt, true, &mut tape.uses)
                        .expect("input gradient requested");
                }
            }

            if spec.kl != 0.0 {
                let targets = batch.targets.expect("checked");
                let centers = self.centers();
                for i in 0..n {
                    let (v, gz, gc) = losses::kl_sample_grad(z.row(i), centers, targets.row(i))?;
                    tape.losses[i] += spec.kl * v;
                    if need_grad {
                        dz.row_mut(i).scaled_add(spec.kl, &gz);
                        tape.centers[i].scaled_add(spec.kl, &gc);
                    }
                }
            }

            if need_grad {
                self.backward(&enc, enc_trace, dz, false, &mut tape.uses);
            }
        }

        if spec.instance != 0.0 {
            let (v1, v2) = batch.views.expect("checked");
            let (z1, tr1) = self.forward(&enc, v1, false);
            let (z2, tr2) = self.forward(&enc, v2, false);
            let mut dz1 = Array2::zeros(z1.raw_dim());
            let mut dz2 = Array2::zeros(z2.raw_dim());
            let side = if spec.stop_gradient { 0.5 } else { 1.0 };
            for i in 0..n {
                let (v, g1, g2) = losses::instance_loss_grad(z1.row(i), z2.row(i))?;
                tape.losses[i] += spec.instance * v;
                dz1.row_mut(i).scaled_add(spec.instance * side, &g1);
                dz2.row_mut(i).scaled_add(spec.instance * side, &g2);
            }
            if need_grad {
                self.backward(&enc, tr1, dz1, false, &mut tape.uses);
                self.backward(&enc, tr2, dz2, false, &mut tape.uses);
            }
        }

        if spec.cc != 0.0 && n > 0 {
            let (v, gc) = losses::cluster_loss_grad(self.centers())?;
            for i in 0..n {
                tape.losses[i] += spec.cc * v;
                if need_grad {
                    tape.centers[i].scaled_add(spec.cc, &gc);
                }
            }
        }
        Ok(tape)
    }

    /// Summed loss over the rows of `batch`; when `grad` is given, its gradient
    /// with respect to every parameter is added into it.
    pub fn loss_and_grad(&self, batch: BatchView, spec: &LossSpec, grad: Option<&mut [f64]>) -> Result<f64> {
        if let Some(g) = grad.as_deref() {
            if g.len() != self.layout.n_params() {
                return Err(Error::ShapeMismatch {
                    context: "gradient buffer",
                    expected: self.layout.n_params(),
                    actual: g.len(),
                });
            }
        }
        let tape = self.tape(batch, spec, grad.is_some())?;
        if let Some(grad) = grad {
            let ones = vec![1.0; batch.features.nrows()];
            tape.accumulate(&self.layout, grad, &ones, &ones);
        }
        Ok(tape.losses.iter().sum())
    }

    /// Summed loss over the batch.
    pub fn batch_loss(&self, batch: &Batch, spec: &LossSpec) -> Result<f64> {
        self.loss_and_grad(batch.view(), spec, None)
    }

    /// Summed loss over the batch and its full gradient.
    pub fn batch_gradient(&self, batch: &Batch, spec: &LossSpec) -> Result<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; self.layout.n_params()];
        let loss = self.loss_and_grad(batch.view(), spec, Some(&mut grad))?;
        Ok((loss, grad))
    }

    /// Exact gradient of each sample's loss, in batch order.
    ///
    /// Each sample is differentiated as its own one-row batch, in parallel;
    /// the returned list is ordered by batch row regardless of scheduling.
    pub fn per_sample_gradients(&self, batch: &Batch, spec: &LossSpec) -> Result<Vec<PerSampleGradient>> {
        self.check_batch(&batch.view(), spec)?;
        let split = self.layout.n_protected;
        (0..batch.len())
            .into_par_iter()
            .map(|i| {
                let sample_index = batch.indices[i];
                let mut grad = vec![0.0; self.layout.n_params()];
                let loss = self.loss_and_grad(batch.row(i), spec, Some(&mut grad))?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite {
                        what: "loss",
                        sample: sample_index,
                    });
                }
                if grad.iter().any(|g| !g.is_finite()) {
                    return Err(Error::NonFinite {
                        what: "gradient",
                        sample: sample_index,
                    });
                }
                let exposed = grad.split_off(split);
                Ok(PerSampleGradient {
                    sample_index,
                    loss,
                    protected: grad,
                    exposed,
                })
            })
            .collect()
    }

    /// Sum over the batch of per-sample gradients, each partition of each
    /// sample clipped to its bound (`None` leaves that partition unclipped).
    ///
    /// Per-sample gradients are never materialized: their norms follow from
    /// the recorded layer inputs and deltas, and the clipped sum is a batched
    /// product with per-row scale factors. Agrees with clipping the output of
    /// [`Self::per_sample_gradients`] up to rounding.
    pub fn clipped_gradient_sum(
        &self,
        batch: &Batch,
        spec: &LossSpec,
        protected_bound: Option<f64>,
        exposed_bound: Option<f64>,
    ) -> Result<ClippedSum> {
        for bound in [protected_bound, exposed_bound].into_iter().flatten() {
            if !(bound > 0.0) {
                return Err(Error::domain(format!("clip bound must be positive, got {bound}")));
            }
        }
        let tape = self.tape(batch.view(), spec, true)?;
        let (sq_p, sq_e) = tape.squared_norms(&self.layout);
        let n = batch.len();
        let mut protected_norms = Vec::with_capacity(n);
        let mut exposed_norms = Vec::with_capacity(n);
        for i in 0..n {
            let sample = batch.indices[i];
            if !tape.losses[i].is_finite() {
                return Err(Error::NonFinite { what: "loss", sample });
            }
            let (p, e) = (sq_p[i].sqrt(), sq_e[i].sqrt());
            if !(p.is_finite() && e.is_finite()) {
                return Err(Error::NonFinite { what: "gradient", sample });
            }
            protected_norms.push(p);
            exposed_norms.push(e);
        }
        let factor = |norms: &[f64], bound: Option<f64>| -> Vec<f64> {
            norms
                .iter()
                .map(|&g| bound.map_or(1.0, |c| 1.0 / (g / c).max(1.0)))
                .collect()
        };
        let protected_scale = factor(&protected_norms, protected_bound);
        let exposed_scale = factor(&exposed_norms, exposed_bound);
        let mut grad = vec![0.0; self.layout.n_params()];
        tape.accumulate(&self.layout, &mut grad, &protected_scale, &exposed_scale);
        let exposed = grad.split_off(self.layout.n_protected);
        Ok(ClippedSum {
            protected: grad,
            exposed,
            losses: tape.losses,
            protected_norms,
            exposed_norms,
            protected_scale,
            exposed_scale,
        })
    }
}

/// Gradient contributions of one application of a dense layer to a batch:
/// sample `i` contributes `input[i]ᵀ delta[i]` to the weight and `delta[i]`
/// to the bias.
struct LayerUse {
    weight: usize,
    bias: usize,
    input: Array2<f64>,
    delta: Array2<f64>,
}

struct Tape {
    losses: Vec<f64>,
    uses: Vec<LayerUse>,
    /// Per-sample gradient of the cluster centers; empty when no loss term involves them.
    centers: Vec<Array2<f64>>,
}

impl Tape {
    /// Adds `Σ_i scale_i · g_i` into `grad`, with the scale chosen by partition.
    fn accumulate(&self, layout: &Layout, grad: &mut [f64], protected_scale: &[f64], exposed_scale: &[f64]) {
        let scale_for = |idx: usize| match layout.tensors[idx].partition {
            Partition::Protected => protected_scale,
            Partition::Exposed => exposed_scale,
        };
        for u in &self.uses {
            let scale = Array1::from(scale_for(u.weight).to_vec());
            let delta = &u.delta * &scale.view().insert_axis(Axis(1));
            let tw = &layout.tensors[u.weight];
            let mut gw = ArrayViewMut2::from_shape((tw.rows, tw.cols), &mut grad[tw.range()]).expect("layout shape");
            general_mat_mul(1.0, &u.input.t(), &delta, 1.0, &mut gw);
            let tb = &layout.tensors[u.bias];
            for (g, v) in grad[tb.range()].iter_mut().zip(delta.sum_axis(Axis(0))) {
                *g += v;
            }
        }
        if !self.centers.is_empty() {
            let range = layout.tensors[layout.centers()].range();
            for (gc, &s) in self.centers.iter().zip(exposed_scale) {
                for (g, v) in grad[range.clone()].iter_mut().zip(gc.iter()) {
                    *g += s * v;
                }
            }
        }
    }

    /// Squared norms of every sample's protected and exposed gradient.
    fn squared_norms(&self, layout: &Layout) -> (Vec<f64>, Vec<f64>) {
        let n = self.losses.len();
        let mut protected = vec![0.0; n];
        let mut exposed = vec![0.0; n];
        let mut groups: Vec<(usize, Vec<&LayerUse>)> = Vec::new();
        for u in &self.uses {
            match groups.iter_mut().find(|(w, _)| *w == u.weight) {
                Some((_, g)) => g.push(u),
                None => groups.push((u.weight, vec![u])),
            }
        }
        for (weight, group) in groups {
            let out = match layout.tensors[weight].partition {
                Partition::Protected => &mut protected,
                Partition::Exposed => &mut exposed,
            };
            for (i, acc) in out.iter_mut().enumerate() {
                let mut w = 0.0;
                let mut bias = 0.0;
                for a in &group {
                    for b in &group {
                        let dd = a.delta.row(i).dot(&b.delta.row(i));
                        w += a.input.row(i).dot(&b.input.row(i)) * dd;
                        bias += dd;
                    }
                }
                *acc += w + bias;
            }
        }
        for (acc, gc) in exposed.iter_mut().zip(&self.centers) {
            *acc += gc.iter().map(|v| v * v).sum::<f64>();
        }
        (protected, exposed)
    }
}

/// Per-partition clipped gradient sum of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ClippedSum {
    pub protected: Vec<f64>,
    pub exposed: Vec<f64>,
    /// Per-sample loss, batch order.
    pub losses: Vec<f64>,
    /// Per-sample gradient norms before clipping.
    pub protected_norms: Vec<f64>,
    pub exposed_norms: Vec<f64>,
    /// Factor applied to each sample's gradient, `1 / max(1, ‖g‖/C)`.
    pub protected_scale: Vec<f64>,
    pub exposed_scale: Vec<f64>,
}

impl ClippedSum {
    /// Norm of each sample's clipped protected gradient.
    pub fn clipped_protected_norms(&self) -> impl Iterator<Item = f64> + '_ {
        self.protected_norms.iter().zip(&self.protected_scale).map(|(n, s)| n * s)
    }

    pub fn clipped_exposed_norms(&self) -> impl Iterator<Item = f64> + '_ {
        self.exposed_norms.iter().zip(&self.exposed_scale).map(|(n, s)| n * s)
    }
}

/// `exp(h)` clamped to [`MEAN_RANGE`], and its derivative.
fn mean_map(h: f64) -> (f64, f64) {
    let (lo, hi) = (MEAN_RANGE.0.ln(), MEAN_RANGE.1.ln());
    if h < lo {
        (MEAN_RANGE.0, 0.0)
    } else if h > hi {
        (MEAN_RANGE.1, 0.0)
    } else {
        let m = h.exp();
        (m, m)
    }
}

/// `softplus(h)` clamped to [`DISPERSION_RANGE`], and its derivative.
fn dispersion_map(h: f64) -> (f64, f64) {
    let v = softplus(h);
    if v < DISPERSION_RANGE.0 {
        (DISPERSION_RANGE.0, 0.0)
    } else if v > DISPERSION_RANGE.1 {
        (DISPERSION_RANGE.1, 0.0)
    } else {
        (v, sigmoid(h))
    }
}
