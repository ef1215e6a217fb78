//! The partitioned two-layer network.
//!
//! The first linear layer is split row-wise by feature ownership: each party
//! multiplies its own columns by its slice of the weights and the slices sum
//! to the full layer output. The aggregator applies ReLU and the global
//! `Linear(h, 1)` head on the unmasked sum.

use std::fs;
use std::io;
use std::path::Path;

use ndarray::{Array, Array1, Array2, ArrayView1, ArrayView2, Axis, Dimension, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),

    #[error("checkpoint sidecar: {0}")]
    Sidecar(#[from] serde_json::Error),
}

fn shape_err(what: impl Into<String>) -> ModelError {
    ModelError::ShapeMismatch(what.into())
}

/// One party's slice of the first layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelShard {
    /// `[d_local × h]`
    pub weights: Array2<f64>,
    /// Only the active party's shard carries a bias.
    pub bias: Option<Array1<f64>>,
    /// Column indices into the full encoded feature vector.
    pub owned_columns: Vec<usize>,
}

impl ModelShard {
    pub fn hidden(&self) -> usize {
        self.weights.ncols()
    }

    pub fn width(&self) -> usize {
        self.weights.nrows()
    }
}

/// The aggregator-held output layer, `Linear(h, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalModule {
    pub weights: Array1<f64>,
    pub bias: f64,
}

impl GlobalModule {
    pub fn init(hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GlobalModule {
            weights: uniform_init(&mut rng, hidden, 1).column(0).to_owned(),
            bias: 0.0,
        }
    }
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` of shape `[fan_in × fan_out]`.
pub fn uniform_init<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Array2::from_shape_simple_fn((fan_in, fan_out), || rng.gen_range(-bound..bound))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartialActivation {
    /// `[B × h]`, zero rows where `presence` is false.
    pub values: Array2<f64>,
    pub presence: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartialGradient {
    /// `[d_local × h]`
    pub weights: Array2<f64>,
    pub bias: Option<Array1<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logits: Array1<f64>,
    /// Post-ReLU hidden activations, `[B × h]`.
    pub hidden: Array2<f64>,
    pub relu_mask: Array2<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalGradient {
    pub weights: Array1<f64>,
    pub bias: f64,
}

pub fn local_forward(
    shard: &ModelShard,
    batch: ArrayView2<f64>,
    presence: &[bool],
) -> Result<PartialActivation, ModelError> {
    if batch.ncols() != shard.width() {
        return Err(shape_err(format!(
            "batch has {} columns, shard owns {}",
            batch.ncols(),
            shard.width()
        )));
    }
    if presence.len() != batch.nrows() {
        return Err(shape_err("presence length differs from batch rows"));
    }
    let mut values = batch.dot(&shard.weights);
    if let Some(bias) = &shard.bias {
        if bias.len() != shard.hidden() {
            return Err(shape_err("bias length differs from hidden width"));
        }
        values += bias;
    }
    for (mut row, &present) in values.outer_iter_mut().zip(presence) {
        if !present {
            row.fill(0.0);
        }
    }
    Ok(PartialActivation {
        values,
        presence: presence.to_vec(),
    })
}

pub fn finish_forward(z: ArrayView2<f64>, gm: &GlobalModule) -> Result<ForwardOutput, ModelError> {
    if z.ncols() != gm.weights.len() {
        return Err(shape_err(format!(
            "aggregate has width {}, global module expects {}",
            z.ncols(),
            gm.weights.len()
        )));
    }
    let relu_mask = z.mapv(|v| v > 0.0);
    let hidden = z.mapv(|v| v.max(0.0));
    let logits = hidden.dot(&gm.weights) + gm.bias;
    Ok(ForwardOutput {
        logits,
        hidden,
        relu_mask,
    })
}

/// Mean binary cross-entropy over the batch and its gradient w.r.t. each logit.
pub fn bce_loss_and_delta(logits: ArrayView1<f64>, labels: &[f64]) -> (f64, Array1<f64>) {
    assert_eq!(logits.len(), labels.len(), "one label per logit");
    let b = logits.len().max(1) as f64;
    let mut loss = 0.0;
    let dlogit = Array1::from_iter(logits.iter().zip(labels).map(|(&l, &y)| {
        // max(l, 0) - l*y + ln(1 + e^{-|l|})
        loss += l.max(0.0) - l * y + (-l.abs()).exp().ln_1p();
        (sigmoid(l) - y) / b
    }));
    (loss / b, dlogit)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Chain rule through the head: returns the per-sample hidden delta and
/// the head's own gradients.
pub fn backprop_hidden(
    dlogit: ArrayView1<f64>,
    gm: &GlobalModule,
    fwd: &ForwardOutput,
) -> Result<(Array2<f64>, GlobalGradient), ModelError> {
    let (b, h) = fwd.hidden.dim();
    if dlogit.len() != b || gm.weights.len() != h || fwd.relu_mask.dim() != (b, h) {
        return Err(shape_err("backprop inputs disagree with forward shapes"));
    }
    let mut delta = Array2::zeros((b, h));
    Zip::indexed(&mut delta)
        .and(&fwd.relu_mask)
        .for_each(|(k, j), d, &on| {
            if on {
                *d = dlogit[k] * gm.weights[j];
            }
        });
    let grad = GlobalGradient {
        weights: fwd.hidden.t().dot(&dlogit),
        bias: dlogit.sum(),
    };
    Ok((delta, grad))
}

pub fn local_backward(
    delta: ArrayView2<f64>,
    batch: ArrayView2<f64>,
    presence: &[bool],
    with_bias: bool,
) -> Result<PartialGradient, ModelError> {
    if delta.nrows() != batch.nrows() || presence.len() != batch.nrows() {
        return Err(shape_err("delta, batch and presence must have B rows"));
    }
    let mut gated = delta.to_owned();
    for (mut row, &present) in gated.outer_iter_mut().zip(presence) {
        if !present {
            row.fill(0.0);
        }
    }
    Ok(PartialGradient {
        weights: batch.t().dot(&gated),
        bias: with_bias.then(|| gated.sum_axis(Axis(0))),
    })
}

/// `w <- w - lr * grad`
pub fn sgd_step<D: Dimension>(
    weights: &mut Array<f64, D>,
    grad: &Array<f64, D>,
    lr: f64,
) -> Result<(), ModelError> {
    if weights.shape() != grad.shape() {
        return Err(shape_err(format!(
            "weights {:?} vs gradient {:?}",
            weights.shape(),
            grad.shape()
        )));
    }
    weights.scaled_add(-lr, grad);
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PretrainMode {
    #[default]
    Identity,
    LogisticHidden,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub mode: PretrainMode,
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            mode: PretrainMode::Identity,
            hidden: 16,
            epochs: 500,
            lr: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Pretrained {
    /// One embedding row per input row.
    pub embeddings: Array2<f64>,
    /// Local accuracy of the pre-training classifier; `None` in identity mode.
    pub train_accuracy: Option<f64>,
    /// Hidden layer `(w1, b1)`; `None` in identity mode.
    pub encoder: Option<(Array2<f64>, Array1<f64>)>,
}

impl Pretrained {
    /// Embeds rows that were not part of pre-training.
    pub fn embed(&self, features: ArrayView2<f64>) -> Array2<f64> {
        match &self.encoder {
            None => features.to_owned(),
            Some((w1, b1)) => (features.dot(w1) + b1).mapv(sigmoid),
        }
    }
}

/// First-stage model on the active party's own data.
///
/// `LogisticHidden` fits a one-hidden-layer sigmoid network with
/// full-batch gradient descent and returns its hidden activations.
pub fn pretrain_active(
    features: ArrayView2<f64>,
    labels: &[f64],
    config: &PretrainConfig,
) -> Result<Pretrained, ModelError> {
    if features.nrows() == 0 {
        return Err(ModelError::EmptyDataset);
    }
    if labels.len() != features.nrows() {
        return Err(shape_err("one label per row required"));
    }
    match config.mode {
        PretrainMode::Identity => Ok(Pretrained {
            embeddings: features.to_owned(),
            train_accuracy: None,
            encoder: None,
        }),
        PretrainMode::LogisticHidden => Ok(train_logistic_hidden(features, labels, config)),
    }
}

fn train_logistic_hidden(x: ArrayView2<f64>, y: &[f64], cfg: &PretrainConfig) -> Pretrained {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (n, d) = x.dim();
    let mut w1 = uniform_init(&mut rng, d, cfg.hidden);
    let mut b1 = Array1::<f64>::zeros(cfg.hidden);
    let mut w2 = uniform_init(&mut rng, cfg.hidden, 1).column(0).to_owned();
    let mut b2 = 0.0;
    let labels = ArrayView1::from(y);

    let hidden_of = |w1: &Array2<f64>, b1: &Array1<f64>| (x.dot(w1) + b1).mapv(sigmoid);
    for _ in 0..cfg.epochs {
        let hid = hidden_of(&w1, &b1);
        let logits = hid.dot(&w2) + b2;
        let (_, dlogit) = bce_loss_and_delta(logits.view(), y);
        let gw2 = hid.t().dot(&dlogit);
        let gb2 = dlogit.sum();
        // d/dz of sigmoid hidden units
        let mut dz = Array2::zeros((n, cfg.hidden));
        Zip::indexed(&mut dz).and(&hid).for_each(|(k, j), g, &a| {
            *g = dlogit[k] * w2[j] * a * (1.0 - a);
        });
        w1.scaled_add(-cfg.lr, &x.t().dot(&dz));
        b1.scaled_add(-cfg.lr, &dz.sum_axis(Axis(0)));
        w2.scaled_add(-cfg.lr, &gw2);
        b2 -= cfg.lr * gb2;
    }
    let embeddings = hidden_of(&w1, &b1);
    let logits = embeddings.dot(&w2) + b2;
    let correct = logits
        .iter()
        .zip(labels.iter())
        .filter(|(&l, &t)| (l >= 0.0) == (t >= 0.5))
        .count();
    Pretrained {
        embeddings,
        train_accuracy: Some(correct as f64 / n as f64),
        encoder: Some((w1, b1)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the binary file, in f64 elements.
    pub offset: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub owned_columns: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSidecar {
    pub format: String,
    pub tensors: Vec<TensorEntry>,
}

/// Named f64 tensors stored as `<stem>.bin` (little-endian) and `<stem>.json`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(TensorEntry, Vec<f64>)>,
}

impl Checkpoint {
    pub fn push(&mut self, name: &str, shape: &[usize], data: Vec<f64>, owned: Option<Vec<usize>>) {
        let offset = self.tensors.iter().map(|(_, d)| d.len()).sum();
        assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push((
            TensorEntry {
                name: name.to_owned(),
                shape: shape.to_vec(),
                offset,
                owned_columns: owned,
            },
            data,
        ));
    }

    pub fn get(&self, name: &str) -> Option<&(TensorEntry, Vec<f64>)> {
        self.tensors.iter().find(|(t, _)| t.name == name)
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<(), ModelError> {
        fs::create_dir_all(dir)?;
        let mut bin = Vec::new();
        for (_, data) in &self.tensors {
            for v in data {
                bin.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(dir.join(format!("{stem}.bin")), bin)?;
        let sidecar = CheckpointSidecar {
            format: "f64-le".into(),
            tensors: self.tensors.iter().map(|(t, _)| t.clone()).collect(),
        };
        fs::write(
            dir.join(format!("{stem}.json")),
            serde_json::to_string_pretty(&sidecar)?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self, ModelError> {
        let sidecar: CheckpointSidecar =
            serde_json::from_slice(&fs::read(dir.join(format!("{stem}.json")))?)?;
        let bin = fs::read(dir.join(format!("{stem}.bin")))?;
        if bin.len() % 8 != 0 {
            return Err(shape_err("binary checkpoint length is not a multiple of 8"));
        }
        let flat: Vec<f64> = bin
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut tensors = Vec::with_capacity(sidecar.tensors.len());
        for t in sidecar.tensors {
            let len: usize = t.shape.iter().product();
            let data = flat
                .get(t.offset..t.offset + len)
                .ok_or_else(|| shape_err(format!("tensor {} exceeds binary file", t.name)))?
                .to_vec();
            tensors.push((t, data));
        }
        Ok(Checkpoint { tensors })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array};

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((r, c), || rng.gen_range(-1.0..1.0))
    }

    /// Triple-loop matmul used as an independent oracle.
    fn naive_matmul(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((a.nrows(), b.ncols()));
        for i in 0..a.nrows() {
            for j in 0..b.ncols() {
                let mut s = 0.0;
                for k in 0..a.ncols() {
                    s += a[[i, k]] * b[[k, j]];
                }
                out[[i, j]] = s;
            }
        }
        out
    }

    fn max_abs_diff<D: Dimension>(a: &Array<f64, D>, b: &Array<f64, D>) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn identity_weights_select_rows() {
        let shard = ModelShard {
            weights: array![[1.0, 2.0], [3.0, 4.0]],
            bias: None,
            owned_columns: vec![0, 1],
        };
        let act = local_forward(&shard, array![[1.0, 0.0]].view(), &[true]).unwrap();
        assert_eq!(act.values, array![[1.0, 2.0]]);
    }

    #[test]
    fn absent_samples_give_zero_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let shard = ModelShard {
            weights: rand_matrix(&mut rng, 3, 4),
            bias: Some(Array1::ones(4)),
            owned_columns: vec![0, 1, 2],
        };
        let x = rand_matrix(&mut rng, 5, 3);
        let act = local_forward(&shard, x.view(), &[false; 5]).unwrap();
        assert!(act.values.iter().all(|&v| v == 0.0));
        let partial = local_forward(&shard, x.view(), &[true, false, true, false, true]).unwrap();
        assert!(partial.values.row(1).iter().all(|&v| v == 0.0));
        assert!(partial.values.row(0).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn local_forward_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let full_w = rand_matrix(&mut rng, 10, 6);
        let x = rand_matrix(&mut rng, 7, 10);
        let cols = vec![2, 5, 7];
        let shard = ModelShard {
            weights: full_w.select(Axis(0), &cols),
            bias: None,
            owned_columns: cols.clone(),
        };
        let act = local_forward(&shard, x.select(Axis(1), &cols).view(), &[true; 7]).unwrap();
        let mut masked_x = Array2::zeros(x.raw_dim());
        for &c in &cols {
            masked_x.column_mut(c).assign(&x.column(c));
        }
        let oracle = naive_matmul(&masked_x, &full_w);
        assert!(max_abs_diff(&act.values, &oracle) < 1e-12);
    }

    #[test]
    fn shape_errors() {
        let shard = ModelShard {
            weights: Array2::zeros((3, 2)),
            bias: None,
            owned_columns: vec![0, 1, 2],
        };
        assert!(matches!(
            local_forward(&shard, Array2::zeros((1, 2)).view(), &[true]),
            Err(ModelError::ShapeMismatch(_))
        ));
        let gm = GlobalModule {
            weights: Array1::zeros(3),
            bias: 0.0,
        };
        assert!(finish_forward(Array2::zeros((1, 2)).view(), &gm).is_err());
        let mut w = Array2::<f64>::zeros((2, 2));
        assert!(sgd_step(&mut w, &Array2::zeros((2, 3)), 0.1).is_err());
    }

    #[test]
    fn finish_forward_negative_and_zero_weights() {
        let gm = GlobalModule {
            weights: array![0.5, -2.0],
            bias: 0.3,
        };
        let z = array![[-1.0, -0.5], [-3.0, -0.1]];
        let out = finish_forward(z.view(), &gm).unwrap();
        assert_eq!(out.logits, array![0.3, 0.3]);
        assert!(out.relu_mask.iter().all(|&m| !m));

        let zero = GlobalModule {
            weights: Array1::zeros(2),
            bias: -1.25,
        };
        let out = finish_forward(array![[4.0, 1.0]].view(), &zero).unwrap();
        assert_eq!(out.logits, array![-1.25]);
    }

    #[test]
    fn finish_forward_matches_monolithic_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = rand_matrix(&mut rng, 6, 5);
        let gm = GlobalModule::init(5, 9);
        let out = finish_forward(z.view(), &gm).unwrap();
        for k in 0..6 {
            let mut l = gm.bias;
            for j in 0..5 {
                l += z[[k, j]].max(0.0) * gm.weights[j];
            }
            assert!((out.logits[k] - l).abs() < 1e-12);
        }
    }

    #[test]
    fn bce_examples() {
        let (loss, d) = bce_loss_and_delta(array![0.0, 0.0].view(), &[1.0, 1.0]);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(d, array![-0.25, -0.25]);

        let (loss, d) = bce_loss_and_delta(array![40.0, -40.0, 800.0].view(), &[1.0, 0.0, 1.0]);
        assert!(loss.is_finite() && loss < 1e-15);
        assert!(d.iter().all(|v| v.is_finite()));
        let (loss, _) = bce_loss_and_delta(array![-800.0].view(), &[1.0]);
        assert!((loss - 800.0).abs() < 1e-9);
    }

    #[test]
    fn bce_delta_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = Array1::from_shape_simple_fn(9, || rng.gen_range(-4.0..4.0));
        let labels: Vec<f64> = (0..9).map(|i| (i % 2) as f64).collect();
        let (_, d) = bce_loss_and_delta(logits.view(), &labels);
        let eps = 1e-5;
        for k in 0..9 {
            let mut hi = logits.clone();
            hi[k] += eps;
            let mut lo = logits.clone();
            lo[k] -= eps;
            let fd = (bce_loss_and_delta(hi.view(), &labels).0 - bce_loss_and_delta(lo.view(), &labels).0)
                / (2.0 * eps);
            assert!((fd - d[k]).abs() <= 1e-6 * d[k].abs().max(1e-3), "k={k}: {fd} vs {}", d[k]);
        }
    }

    #[test]
    fn backprop_hidden_edge_cases() {
        let gm = GlobalModule {
            weights: array![1.0, 0.0, 0.0],
            bias: 0.0,
        };
        let z = array![[1.0, 2.0, 3.0], [0.5, -1.0, 4.0]];
        let fwd = finish_forward(z.view(), &gm).unwrap();
        let (delta, grad) = backprop_hidden(array![0.2, -0.4].view(), &gm, &fwd).unwrap();
        assert_eq!(delta, array![[0.2, 0.0, 0.0], [-0.4, 0.0, 0.0]]);
        assert!((grad.bias + 0.2).abs() < 1e-15);

        let off = finish_forward((-z).view(), &gm).unwrap();
        let (delta, _) = backprop_hidden(array![0.2, -0.4].view(), &gm, &off).unwrap();
        assert!(delta.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn local_backward_edge_cases() {
        let x = array![[1.0, 2.0], [3.0, 4.0]];
        let g = local_backward(Array2::zeros((2, 3)).view(), x.view(), &[true, true], true).unwrap();
        assert!(g.weights.iter().all(|&v| v == 0.0));
        let delta = array![[1.0, 1.0, 1.0], [2.0, 2.0, 2.0]];
        let g = local_backward(delta.view(), x.view(), &[false, false], false).unwrap();
        assert!(g.weights.iter().all(|&v| v == 0.0));
        assert!(g.bias.is_none());
    }

    #[test]
    fn cluster_members_sum_to_whole_batch_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_matrix(&mut rng, 8, 3);
        let delta = rand_matrix(&mut rng, 8, 4);
        let first: Vec<bool> = (0..8).map(|k| k < 4).collect();
        let second: Vec<bool> = first.iter().map(|p| !p).collect();
        let g1 = local_backward(delta.view(), x.view(), &first, false).unwrap();
        let g2 = local_backward(delta.view(), x.view(), &second, false).unwrap();
        let oracle = naive_matmul(&x.t().to_owned(), &delta);
        assert!(max_abs_diff(&(g1.weights + g2.weights), &oracle) < 1e-12);
    }

    #[test]
    fn sgd_examples() {
        let mut w = array![1.0, 2.0];
        sgd_step(&mut w, &array![0.0, 0.0], 0.01).unwrap();
        assert_eq!(w, array![1.0, 2.0]);
        let mut w = array![1.0];
        sgd_step(&mut w, &array![1.0], 0.01).unwrap();
        assert!((w[0] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn sgd_decreases_convex_quadratic() {
        // f(w) = |w - c|^2, gradient 2(w - c)
        let c = array![3.0, -1.0, 0.5];
        let mut w = Array1::<f64>::zeros(3);
        let f = |w: &Array1<f64>| (w - &c).mapv(|v| v * v).sum();
        let mut last = f(&w);
        for _ in 0..5 {
            let g = (&w - &c) * 2.0;
            sgd_step(&mut w, &g, 0.1).unwrap();
            let now = f(&w);
            assert!(now < last);
            last = now;
        }
    }

    #[test]
    fn pretrain_identity_and_errors() {
        let x = array![[1.0, 2.0], [3.0, 4.0]];
        let p = pretrain_active(x.view(), &[0.0, 1.0], &PretrainConfig::default()).unwrap();
        assert_eq!(p.embeddings, x);
        assert!(matches!(
            pretrain_active(Array2::zeros((0, 2)).view(), &[], &PretrainConfig::default()),
            Err(ModelError::EmptyDataset)
        ));
    }

    fn separable(n: usize) -> (Array2<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_matrix(&mut rng, n, 2) * 2.0;
        let y = x.outer_iter().map(|r| (r[0] + 0.5 * r[1] > 0.1) as u8 as f64).collect();
        (x, y)
    }

    #[test]
    fn logistic_hidden_learns_separable_data() {
        let (x, y) = separable(200);
        let cfg = PretrainConfig {
            mode: PretrainMode::LogisticHidden,
            epochs: 800,
            ..Default::default()
        };
        let p = pretrain_active(x.view(), &y, &cfg).unwrap();
        assert!(p.train_accuracy.unwrap() >= 0.95, "{:?}", p.train_accuracy);
        assert_eq!(p.embeddings.dim(), (200, cfg.hidden));
        let again = pretrain_active(x.view(), &y, &cfg).unwrap();
        assert_eq!(again.embeddings, p.embeddings);
        assert_eq!(p.embed(x.view()), p.embeddings);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut ck = Checkpoint::default();
        ck.push("w.active", &[2, 2], vec![1.0, -2.0, 3.5, 0.0], Some(vec![0, 1]));
        ck.push("gm.bias", &[1], vec![0.25], None);
        ck.save(dir.path(), "model").unwrap();
        let bin = fs::read(dir.path().join("model.bin")).unwrap();
        assert_eq!(bin.len(), 5 * 8);
        let back = Checkpoint::load(dir.path(), "model").unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.get("gm.bias").unwrap().0.offset, 4);
    }
}
