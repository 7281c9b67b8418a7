//! Two-hidden-layer ReLU MLP classifier trained with mini-batch SGD and
//! classical momentum on softmax cross-entropy.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_from, tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
    pub w3: DMatrix<f64>,
    pub b3: DVector<f64>,
}

impl MlpParams {
    pub fn d_in(&self) -> usize {
        self.w1.nrows()
    }

    pub fn hidden(&self) -> (usize, usize) {
        (self.w1.ncols(), self.w2.ncols())
    }

    pub fn num_classes(&self) -> usize {
        self.w3.ncols()
    }

    pub fn param_count(&self) -> usize {
        self.slots().iter().map(|s| s.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.slots().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }

    fn slots(&self) -> [&[f64]; 6] {
        [
            self.w1.as_slice(),
            self.b1.as_slice(),
            self.w2.as_slice(),
            self.b2.as_slice(),
            self.w3.as_slice(),
            self.b3.as_slice(),
        ]
    }

    fn slots_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.w1.as_mut_slice(),
            self.b1.as_mut_slice(),
            self.w2.as_mut_slice(),
            self.b2.as_mut_slice(),
            self.w3.as_mut_slice(),
            self.b3.as_mut_slice(),
        ]
    }

    fn zeros_like(&self) -> MlpParams {
        let (h1, h2) = self.hidden();
        MlpParams {
            w1: DMatrix::zeros(self.d_in(), h1),
            b1: DVector::zeros(h1),
            w2: DMatrix::zeros(h1, h2),
            b2: DVector::zeros(h2),
            w3: DMatrix::zeros(h2, self.num_classes()),
            b3: DVector::zeros(self.num_classes()),
        }
    }

    fn get(&self, flat: usize) -> f64 {
        let mut i = flat;
        for s in self.slots() {
            if i < s.len() {
                return s[i];
            }
            i -= s.len();
        }
        panic!("parameter index {flat} out of range")
    }

    fn set(&mut self, flat: usize, v: f64) {
        let mut i = flat;
        for s in self.slots_mut() {
            if i < s.len() {
                s[i] = v;
                return;
            }
            i -= s.len();
        }
        panic!("parameter index {flat} out of range")
    }

    /// Column-major values of w1, b1, w2, b2, w3, b3 concatenated.
    pub fn to_flat(&self) -> Vec<f64> {
        self.slots().concat()
    }

    pub fn from_flat(d_in: usize, hidden: (usize, usize), num_classes: usize, flat: &[f64]) -> Result<Self> {
        let mut p = MlpParams {
            w1: DMatrix::zeros(d_in, hidden.0),
            b1: DVector::zeros(hidden.0),
            w2: DMatrix::zeros(hidden.0, hidden.1),
            b2: DVector::zeros(hidden.1),
            w3: DMatrix::zeros(hidden.1, num_classes),
            b3: DVector::zeros(num_classes),
        };
        if flat.len() != p.param_count() {
            return Err(Error::shape(format!(
                "{} values for {} parameters",
                flat.len(),
                p.param_count()
            )));
        }
        let mut at = 0;
        for s in p.slots_mut() {
            s.copy_from_slice(&flat[at..at + s.len()]);
            at += s.len();
        }
        Ok(p)
    }
}

fn glorot(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    DMatrix::from_fn(fan_in, fan_out, |_, _| rng.random_range(-bound..=bound))
}

/// Scaled-uniform weights, zero biases.
pub fn init_mlp(d_in: usize, hidden: (usize, usize), num_classes: usize, seed: u64) -> Result<MlpParams> {
    if d_in == 0 || hidden.0 == 0 || hidden.1 == 0 || num_classes == 0 {
        return Err(Error::invalid(format!(
            "MLP dims must be positive: d_in {d_in}, hidden {hidden:?}, classes {num_classes}"
        )));
    }
    let mut rng = rng_from(seed);
    Ok(MlpParams {
        w1: glorot(d_in, hidden.0, &mut rng),
        b1: DVector::zeros(hidden.0),
        w2: glorot(hidden.0, hidden.1, &mut rng),
        b2: DVector::zeros(hidden.1),
        w3: glorot(hidden.1, num_classes, &mut rng),
        b3: DVector::zeros(num_classes),
    })
}

fn affine(x: &DMatrix<f64>, w: &DMatrix<f64>, b: &DVector<f64>) -> DMatrix<f64> {
    let mut z = x * w;
    for (j, mut col) in z.column_iter_mut().enumerate() {
        col.add_scalar_mut(b[j]);
    }
    z
}

fn relu(z: &DMatrix<f64>) -> DMatrix<f64> {
    z.map(|v| v.max(0.0))
}

struct Tape {
    z1: DMatrix<f64>,
    a1: DMatrix<f64>,
    z2: DMatrix<f64>,
    a2: DMatrix<f64>,
    logits: DMatrix<f64>,
}

fn run(params: &MlpParams, x: &DMatrix<f64>) -> Tape {
    let z1 = affine(x, &params.w1, &params.b1);
    let a1 = relu(&z1);
    let z2 = affine(&a1, &params.w2, &params.b2);
    let a2 = relu(&z2);
    let logits = affine(&a2, &params.w3, &params.b3);
    Tape { z1, a1, z2, a2, logits }
}

fn check_input(params: &MlpParams, x: &DMatrix<f64>) -> Result<()> {
    if x.ncols() != params.d_in() {
        return Err(Error::shape(format!(
            "model expects {} input columns, got {}",
            params.d_in(),
            x.ncols()
        )));
    }
    Ok(())
}

pub fn forward(params: &MlpParams, batch: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_input(params, batch)?;
    Ok(run(params, batch).logits)
}

/// Row-wise softmax, shifted by the row max.
pub fn softmax_rows(logits: &DMatrix<f64>) -> DMatrix<f64> {
    let mut p = logits.clone();
    for mut row in p.row_iter_mut() {
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let s = row.sum();
        row /= s;
    }
    p
}

/// Mean cross-entropy and its softmax probabilities.
fn cross_entropy_from_logits(logits: &DMatrix<f64>, labels: &[usize]) -> (f64, DMatrix<f64>) {
    let probs = softmax_rows(logits);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.max();
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - logits[(i, y)];
    }
    (loss / labels.len() as f64, probs)
}

fn check_labels(params: &MlpParams, x: &DMatrix<f64>, labels: &[usize]) -> Result<()> {
    check_input(params, x)?;
    if x.nrows() != labels.len() {
        return Err(Error::shape(format!("{} rows but {} labels", x.nrows(), labels.len())));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= params.num_classes()) {
        return Err(Error::invalid(format!("label {y} outside 0..{}", params.num_classes())));
    }
    Ok(())
}

pub fn cross_entropy(params: &MlpParams, x: &DMatrix<f64>, labels: &[usize]) -> Result<f64> {
    check_labels(params, x, labels)?;
    if labels.is_empty() {
        return Err(Error::invalid("cross-entropy of an empty batch"));
    }
    Ok(cross_entropy_from_logits(&run(params, x).logits, labels).0)
}

/// Mean cross-entropy and its gradient with respect to every parameter.
pub fn loss_and_grad(params: &MlpParams, x: &DMatrix<f64>, labels: &[usize]) -> (f64, MlpParams) {
    let tape = run(params, x);
    let (loss, mut dlogits) = cross_entropy_from_logits(&tape.logits, labels);
    let scale = 1.0 / labels.len() as f64;
    for (i, &y) in labels.iter().enumerate() {
        dlogits[(i, y)] -= 1.0;
    }
    dlogits *= scale;

    let gw3 = tape.a2.transpose() * &dlogits;
    let gb3 = column_sums(&dlogits);
    let mut dz2 = &dlogits * params.w3.transpose();
    dz2.zip_apply(&tape.z2, |g, z| {
        if z <= 0.0 {
            *g = 0.0
        }
    });
    let gw2 = tape.a1.transpose() * &dz2;
    let gb2 = column_sums(&dz2);
    let mut dz1 = &dz2 * params.w2.transpose();
    dz1.zip_apply(&tape.z1, |g, z| {
        if z <= 0.0 {
            *g = 0.0
        }
    });
    let gw1 = x.transpose() * &dz1;
    let gb1 = column_sums(&dz1);
    (
        loss,
        MlpParams {
            w1: gw1,
            b1: gb1,
            w2: gw2,
            b2: gb2,
            w3: gw3,
            b3: gb3,
        },
    )
}

fn column_sums(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::momentum")]
    pub momentum: f64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
}

mod defaults {
    pub fn learning_rate() -> f64 {
        0.01
    }
    pub fn momentum() -> f64 {
        0.5
    }
    pub fn batch_size() -> usize {
        32
    }
    pub fn epochs() -> usize {
        50
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: defaults::learning_rate(),
            momentum: defaults::momentum(),
            batch_size: defaults::batch_size(),
            epochs: defaults::epochs(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::invalid("batch_size and epochs must be at least 1"));
        }
        Ok(())
    }
}

/// Trained parameters plus the mean mini-batch loss of every epoch.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: MlpParams,
    pub epoch_losses: Vec<f64>,
}

pub fn train(params: MlpParams, features: &DMatrix<f64>, labels: &[usize], cfg: &TrainConfig) -> Result<MlpParams> {
    train_with_history(params, features, labels, cfg).map(|o| o.params)
}

/// Shuffled mini-batch SGD with classical momentum:
/// `v <- mu * v - lr * g; w <- w + v`.
pub fn train_with_history(
    mut params: MlpParams,
    features: &DMatrix<f64>,
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_labels(&params, features, labels)?;
    if labels.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("training features contain non-finite values"));
    }

    let mut rng = rng_from(derive_seed(cfg.seed, &[tag("shuffle")]));
    let mut velocity = params.zeros_like();
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut batch_labels = Vec::with_capacity(cfg.batch_size);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let x = features.select_rows(chunk.iter());
            batch_labels.clear();
            batch_labels.extend(chunk.iter().map(|&i| labels[i]));
            let (loss, grad) = loss_and_grad(&params, &x, &batch_labels);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss(format!(
                    "loss {loss} at epoch {epoch}, batch {batches}"
                )));
            }
            for ((v, g), w) in velocity
                .slots_mut()
                .into_iter()
                .zip(grad.slots())
                .zip(params.slots_mut())
            {
                for ((vi, gi), wi) in v.iter_mut().zip(g).zip(w.iter_mut()) {
                    *vi = cfg.momentum * *vi - cfg.learning_rate * gi;
                    *wi += *vi;
                }
            }
            if !params.is_finite() {
                return Err(Error::NonFiniteLoss(format!(
                    "parameters overflowed at epoch {epoch}, batch {batches}"
                )));
            }
            total += loss;
            batches += 1;
        }
        epoch_losses.push(total / batches as f64);
    }
    Ok(TrainOutcome { params, epoch_losses })
}

/// Argmax of each logit row; ties go to the smaller class index.
pub fn argmax_rows(logits: &DMatrix<f64>) -> Vec<usize> {
    logits
        .row_iter()
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

pub fn predict(params: &MlpParams, features: &DMatrix<f64>) -> Result<Vec<usize>> {
    Ok(argmax_rows(&forward(params, features)?))
}

pub fn accuracy(predicted: &[usize], labels: &[usize]) -> Result<f64> {
    if labels.is_empty() || predicted.len() != labels.len() {
        return Err(Error::invalid(format!(
            "accuracy over {} predictions and {} labels",
            predicted.len(),
            labels.len()
        )));
    }
    let hits = predicted.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn evaluate(params: &MlpParams, features: &DMatrix<f64>, labels: &[usize]) -> Result<f64> {
    check_labels(params, features, labels)?;
    accuracy(&predict(params, features)?, labels)
}

/// Parameters above this count are spot-checked on a random subset.
pub const GRAD_CHECK_FULL_LIMIT: usize = 2000;
const GRAD_CHECK_SUBSET: usize = 200;
/// Gradients smaller than this are compared in absolute terms.
const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Largest relative error between analytic gradients and central finite
/// differences, `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn grad_check(params: &MlpParams, batch: &DMatrix<f64>, labels: &[usize], eps: f64) -> Result<f64> {
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(Error::invalid(format!("eps {eps} outside (0, 1e-3]")));
    }
    check_labels(params, batch, labels)?;
    if labels.is_empty() {
        return Err(Error::invalid("gradient check on an empty batch"));
    }
    let (_, grad) = loss_and_grad(params, batch, labels);
    let total = params.param_count();
    let mut indices: Vec<usize> = (0..total).collect();
    if total > GRAD_CHECK_FULL_LIMIT {
        indices.shuffle(&mut rng_from(derive_seed(total as u64, &[tag("grad-check")])));
        indices.truncate(GRAD_CHECK_SUBSET);
    }

    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for i in indices {
        let w = params.get(i);
        probe.set(i, w + eps);
        let up = cross_entropy_from_logits(&run(&probe, batch).logits, labels).0;
        probe.set(i, w - eps);
        let down = cross_entropy_from_logits(&run(&probe, batch).logits, labels).0;
        probe.set(i, w);
        let numeric = (up - down) / (2.0 * eps);
        let analytic = grad.get(i);
        let denom = analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        worst = worst.max((analytic - numeric).abs() / denom);
    }
    Ok(worst)
}

/// Per-feature standardization fitted on the training inputs of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputScaler {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

impl InputScaler {
    pub fn fit(x: &DMatrix<f64>) -> Self {
        let n = x.nrows().max(1) as f64;
        let means: Vec<f64> = x.column_iter().map(|c| c.sum() / n).collect();
        let scales = x
            .column_iter()
            .zip(&means)
            .map(|(c, mu)| {
                let sd = (c.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { means, scales }
    }

    pub fn transform(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.means.len() {
            return Err(Error::shape(format!(
                "scaler expects {} columns, got {}",
                self.means.len(),
                x.ncols()
            )));
        }
        let mut out = x.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            let (mu, sd) = (self.means[j], self.scales[j]);
            col.apply(|v| *v = (*v - mu) / sd);
        }
        Ok(out)
    }
}

/// The model `h_l` shipped to clients: input scaler followed by the MLP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub scaler: InputScaler,
    pub mlp: MlpParams,
}

impl Classifier {
    pub fn d_in(&self) -> usize {
        self.mlp.d_in()
    }

    pub fn num_classes(&self) -> usize {
        self.mlp.num_classes()
    }

    pub fn logits(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        forward(&self.mlp, &self.scaler.transform(x)?)
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(x)?))
    }

    pub fn evaluate(&self, x: &DMatrix<f64>, labels: &[usize]) -> Result<f64> {
        accuracy(&self.predict(x)?, labels)
    }

    /// Number of `f64` values in the encoded body.
    pub fn value_count(&self) -> usize {
        2 * self.scaler.means.len() + self.mlp.param_count()
    }

    /// JSON shape header plus little-endian `f64` body
    /// (scaler means, scaler scales, then [`MlpParams::to_flat`]).
    pub fn encode(&self) -> (ModelHeader, Vec<u8>) {
        let header = ModelHeader {
            d_in: self.d_in(),
            hidden: self.mlp.hidden(),
            num_classes: self.num_classes(),
            activation: "relu".into(),
            values: self.value_count(),
        };
        let mut body = Vec::with_capacity(8 * header.values);
        for v in self
            .scaler
            .means
            .iter()
            .chain(&self.scaler.scales)
            .chain(self.mlp.to_flat().iter())
        {
            body.extend_from_slice(&v.to_le_bytes());
        }
        (header, body)
    }

    pub fn decode(header: &ModelHeader, body: &[u8]) -> Result<Self> {
        if body.len() != 8 * header.values {
            return Err(Error::shape(format!(
                "body of {} bytes for {} values",
                body.len(),
                header.values
            )));
        }
        let vals: Vec<f64> = body
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        let d = header.d_in;
        if vals.len() < 2 * d {
            return Err(Error::shape("body shorter than the scaler block"));
        }
        let mlp = MlpParams::from_flat(d, header.hidden, header.num_classes, &vals[2 * d..])?;
        Ok(Self {
            scaler: InputScaler {
                means: vals[..d].to_vec(),
                scales: vals[d..2 * d].to_vec(),
            },
            mlp,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub d_in: usize,
    pub hidden: (usize, usize),
    pub num_classes: usize,
    pub activation: String,
    pub values: usize,
}

/// Fits a scaler on `x`, then trains a fresh MLP on the scaled inputs.
pub fn fit_classifier(
    x: &DMatrix<f64>,
    labels: &[usize],
    hidden: (usize, usize),
    num_classes: usize,
    cfg: &TrainConfig,
) -> Result<Classifier> {
    let scaler = InputScaler::fit(x);
    let scaled = scaler.transform(x)?;
    let init = init_mlp(x.ncols(), hidden, num_classes, derive_seed(cfg.seed, &[tag("init")]))?;
    let mlp = train(init, &scaled, labels, cfg)?;
    Ok(Classifier { scaler, mlp })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn zero_params(d: usize, h: (usize, usize), k: usize) -> MlpParams {
        MlpParams {
            w1: DMatrix::zeros(d, h.0),
            b1: DVector::zeros(h.0),
            w2: DMatrix::zeros(h.0, h.1),
            b2: DVector::zeros(h.1),
            w3: DMatrix::zeros(h.1, k),
            b3: DVector::zeros(k),
        }
    }

    #[test]
    fn init_shapes_and_determinism() {
        let p = init_mlp(10, (64, 32), 7, 1).unwrap();
        assert_eq!(p.w1.shape(), (10, 64));
        assert_eq!(p.w2.shape(), (64, 32));
        assert_eq!(p.w3.shape(), (32, 7));
        assert!(p.b1.iter().chain(p.b2.iter()).chain(p.b3.iter()).all(|&b| b == 0.0));
        assert_eq!(p, init_mlp(10, (64, 32), 7, 1).unwrap());
        assert_ne!(p, init_mlp(10, (64, 32), 7, 2).unwrap());
        let bound = (6.0f64 / 74.0).sqrt();
        assert!(p.w1.iter().all(|w| w.abs() <= bound));
        assert!(init_mlp(0, (4, 4), 2, 0).is_err());
    }

    #[test]
    fn forward_basics() {
        let z = zero_params(3, (4, 2), 5);
        let x = DMatrix::from_element(2, 3, 1.0);
        assert!(forward(&z, &x).unwrap().iter().all(|&v| v == 0.0));
        assert!(forward(&z, &DMatrix::zeros(1, 4)).is_err());

        let p = init_mlp(3, (8, 4), 3, 5).unwrap();
        let row = DMatrix::from_row_slice(1, 3, &[0.3, -1.2, 0.7]);
        let batch = DMatrix::from_fn(4, 3, |_, j| row[(0, j)]);
        let out = forward(&p, &batch).unwrap();
        for i in 1..4 {
            assert_eq!(out.row(i), out.row(0));
        }
        let tape = run(&p, &batch);
        assert!(tape.a1.iter().chain(tape.a2.iter()).all(|&v| v >= 0.0));
    }

    #[test]
    fn softmax_rows_normalize() {
        let p = init_mlp(4, (6, 5), 3, 3).unwrap();
        let x = DMatrix::from_fn(10, 4, |i, j| (i as f64 - 5.0) * (j as f64 + 0.5));
        let probs = softmax_rows(&forward(&p, &x).unwrap());
        for row in probs.row_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn grad_check_small_net() {
        let p = init_mlp(4, (6, 5), 3, 7).unwrap();
        let x = DMatrix::from_fn(8, 4, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let y: Vec<usize> = (0..8).map(|i| i % 3).collect();
        let err = grad_check(&p, &x, &y, 1e-5).unwrap();
        assert!(err < 1e-4, "max rel error {err}");
        assert!(grad_check(&p, &x, &y, 1e-2).is_err());
    }

    #[test]
    fn zero_weight_point_bias_gradients() {
        // With zero weights the logits are zero and only the output bias
        // receives gradient: p_k - freq_k.
        let p = zero_params(3, (4, 4), 2);
        let x = DMatrix::from_fn(4, 3, |i, j| (i + j) as f64);
        let y = vec![0, 1, 0, 1];
        let (_, g) = loss_and_grad(&p, &x, &y);
        assert!(g.b3.iter().all(|v| v.abs() < 1e-15));
        assert!(grad_check(&p, &x, &y, 1e-5).unwrap() < 1e-4);
        let y = vec![0, 0, 0, 1];
        let (_, g) = loss_and_grad(&p, &x, &y);
        assert_relative_eq!(g.b3[0], 0.5 - 0.75, epsilon = 1e-15);
        assert!(grad_check(&p, &x, &y, 1e-5).unwrap() < 1e-4);
    }

    #[test]
    fn flat_round_trip_and_blob() {
        let p = init_mlp(3, (4, 2), 3, 1).unwrap();
        let flat = p.to_flat();
        assert_eq!(MlpParams::from_flat(3, (4, 2), 3, &flat).unwrap(), p);
        assert!(MlpParams::from_flat(3, (4, 2), 3, &flat[1..]).is_err());
        let c = Classifier {
            scaler: InputScaler {
                means: vec![0.5, 1.0, -1.0],
                scales: vec![1.0, 2.0, 3.0],
            },
            mlp: p,
        };
        let (h, body) = c.encode();
        assert_eq!(body.len(), 8 * c.value_count());
        assert_eq!(Classifier::decode(&h, &body).unwrap(), c);
        assert!(Classifier::decode(&h, &body[8..]).is_err());
    }

    #[test]
    fn train_changes_params_and_rejects_bad_config() {
        let x = DMatrix::from_fn(20, 2, |i, j| if i % 2 == 0 { 1.0 + j as f64 } else { -1.0 - j as f64 });
        let y: Vec<usize> = (0..20).map(|i| i % 2).collect();
        let p0 = init_mlp(2, (4, 4), 2, 0).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let p1 = train(p0.clone(), &x, &y, &cfg).unwrap();
        assert_ne!(p0, p1);
        assert!(train(p0.clone(), &x, &y, &TrainConfig { epochs: 0, ..cfg.clone() }).is_err());
        assert!(train(p0.clone(), &x, &y, &TrainConfig { learning_rate: 0.0, ..cfg.clone() }).is_err());
        assert!(train(p0.clone(), &x, &[0, 1], &cfg).is_err());
        let mut bad = x.clone();
        bad[(0, 0)] = f64::NAN;
        assert!(train(p0, &bad, &y, &cfg).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let x = DMatrix::from_fn(8, 2, |i, _| 1e6 * i as f64);
        let y: Vec<usize> = (0..8).map(|i| i % 2).collect();
        let p0 = init_mlp(2, (4, 4), 2, 0).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e305,
            momentum: 0.9,
            epochs: 50,
            ..TrainConfig::default()
        };
        assert!(matches!(train(p0, &x, &y, &cfg), Err(Error::NonFiniteLoss(_))));
    }

    #[test]
    fn evaluate_edge_cases() {
        let mut p = zero_params(2, (2, 2), 2);
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
        // constant predictor: ties break toward class 0
        assert_eq!(evaluate(&p, &x, &[0, 0, 1, 1]).unwrap(), 0.5);
        assert!(evaluate(&p, &DMatrix::zeros(0, 2), &[]).is_err());
        // perfect predictor: logits copy the inputs through identity layers
        p.w1 = DMatrix::identity(2, 2);
        p.w2 = DMatrix::identity(2, 2);
        p.w3 = DMatrix::identity(2, 2);
        assert_eq!(evaluate(&p, &x, &[0, 0, 1, 1]).unwrap(), 1.0);
    }

    #[test]
    fn scaler_handles_constant_columns() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 5.0, 2.0, 5.0, 3.0, 5.0]);
        let s = InputScaler::fit(&x);
        assert_eq!(s.scales[1], 1.0);
        let t = s.transform(&x).unwrap();
        assert!(t.column(1).iter().all(|&v| v == 0.0));
        assert_relative_eq!(t.column(0).sum(), 0.0, epsilon = 1e-12);
    }
}
