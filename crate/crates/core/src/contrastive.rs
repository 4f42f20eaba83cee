//! Contrastive (InfoNCE / NT-Xent) training of the mask embedding network.
//!
//! A batch holds `2N` embeddings where every sample has exactly one partner
//! (its other augmentation, or its true match when fine-tuning). For anchor
//! `i` the loss term is the cross-entropy of picking the partner among all
//! other `2N - 1` batch members, with logits `z_i . z_a / τ`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{make_pair, AugmentConfig};
use crate::error::{Error, Result};
use crate::maskio::SemanticMask;
use crate::nn::{l2_normalize, l2_normalize_backward, ArchitectureConfig, EmbeddingModel, Tensor};
use crate::rng;

/// Which parameters a fine-tuning run updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    #[default]
    None,
    /// The last two dense layers of the projection head.
    LastTwoDense,
    /// Two freshly initialized dense layers appended to the head.
    AddTwoDense,
    AllLayers,
}

impl FromStr for FinetuneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "last_two_dense" => Ok(Self::LastTwoDense),
            "add_two_dense" => Ok(Self::AddTwoDense),
            "all_layers" => Ok(Self::AllLayers),
            other => Err(Error::Config(format!("unknown finetune mode {other:?}"))),
        }
    }
}

impl fmt::Display for FinetuneMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::LastTwoDense => "last_two_dense",
            Self::AddTwoDense => "add_two_dense",
            Self::AllLayers => "all_layers",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Source images per batch; the batch holds `2 * batch_n` views.
    pub batch_n: usize,
    pub temperature: f64,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Heavy-ball momentum; 0 is plain SGD.
    pub momentum: f64,
    /// Cosine learning-rate decay over epochs.
    pub cosine_decay: bool,
    pub augment: AugmentConfig,
    pub finetune_mode: FinetuneMode,
    pub arch: ArchitectureConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_n: 16,
            temperature: 0.07,
            lr: 0.05,
            epochs: 30,
            seed: 0,
            momentum: 0.0,
            cosine_decay: false,
            augment: AugmentConfig::default(),
            finetune_mode: FinetuneMode::None,
            arch: ArchitectureConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        // lr = 0 is accepted as an explicit no-op run
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be >= 0, got {}", self.lr)));
        }
        if self.batch_n < 2 {
            return Err(Error::Config(format!("batch_n must be >= 2, got {}", self.batch_n)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        self.augment.validate()
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        if self.cosine_decay && self.epochs > 0 {
            self.lr * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / self.epochs as f64).cos())
        } else {
            self.lr
        }
    }
}

/// `2N` embeddings and the partner index of each.
#[derive(Debug, Clone)]
pub struct Batch {
    z: Vec<Vec<f64>>,
    pair: Vec<usize>,
}

impl Batch {
    /// Validates that `pair` is a fixed-point-free involution over the batch.
    pub fn new(z: Vec<Vec<f64>>, pair: Vec<usize>) -> Result<Self> {
        if z.len() != pair.len() {
            return Err(Error::Shape(format!("{} embeddings but {} pair indices", z.len(), pair.len())));
        }
        if z.len() < 2 {
            return Err(Error::Degenerate("a batch needs at least one pair".into()));
        }
        for (i, &j) in pair.iter().enumerate() {
            if j >= pair.len() || j == i || pair[j] != i {
                return Err(Error::Shape(format!("pair index is not an involution at {i}")));
            }
        }
        let d = z[0].len();
        if d == 0 || z.iter().any(|v| v.len() != d) {
            return Err(Error::Shape("embeddings must share a positive dimension".into()));
        }
        if z.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding contains NaN or infinity".into()));
        }
        Ok(Self { z, pair })
    }

    /// Pairs `(0, 1), (2, 3), ...`.
    pub fn adjacent(z: Vec<Vec<f64>>) -> Result<Self> {
        if z.len() % 2 != 0 {
            return Err(Error::Shape("adjacent pairing needs an even batch".into()));
        }
        let pair = (0..z.len()).map(|i| i ^ 1).collect();
        Self::new(z, pair)
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    pub fn embeddings(&self) -> &[Vec<f64>] {
        &self.z
    }

    pub fn partner(&self, i: usize) -> usize {
        self.pair[i]
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Summed InfoNCE loss over all anchors and its gradient with respect to each
/// embedding. Uses a max-shifted log-sum-exp.
pub fn info_nce_loss(batch: &Batch, temperature: f64) -> Result<(f64, Vec<Vec<f64>>)> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Config(format!("temperature must be > 0, got {temperature}")));
    }
    let n = batch.len();
    let d = batch.z[0].len();
    let mut logits = vec![0.0; n * n];
    for i in 0..n {
        for a in i + 1..n {
            let s = dot(&batch.z[i], &batch.z[a]) / temperature;
            logits[i * n + a] = s;
            logits[a * n + i] = s;
        }
    }
    let mut loss = 0.0;
    let mut grad = vec![vec![0.0; d]; n];
    let mut prob = vec![0.0; n];
    for i in 0..n {
        let row = &logits[i * n..(i + 1) * n];
        let m = (0..n).filter(|&a| a != i).map(|a| row[a]).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = (0..n).filter(|&a| a != i).map(|a| (row[a] - m).exp()).sum();
        let lse = m + sum.ln();
        let j = batch.pair[i];
        loss += lse - row[j];
        for a in 0..n {
            prob[a] = if a == i { 0.0 } else { (row[a] - lse).exp() };
        }
        // d/dz_i and d/dz_a of (lse - l_ij)
        for a in 0..n {
            if a == i {
                continue;
            }
            let coef = (prob[a] - if a == j { 1.0 } else { 0.0 }) / temperature;
            if coef == 0.0 {
                continue;
            }
            let (za, zi) = (&batch.z[a], &batch.z[i]);
            for k in 0..d {
                grad[i][k] += coef * za[k];
            }
            for k in 0..d {
                grad[a][k] += coef * zi[k];
            }
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("InfoNCE loss is {loss}")));
    }
    Ok((loss, grad))
}

/// Per-epoch mean loss (per anchor) of a training run.
pub type LossHistory = Vec<f64>;

/// Writes a loss history as CSV `epoch,mean_loss` with 1-based epochs.
pub fn write_loss_history(path: &Path, history: &[f64]) -> Result<()> {
    let mut text = String::from("epoch,mean_loss\n");
    for (e, l) in history.iter().enumerate() {
        text.push_str(&format!("{},{l}\n", e + 1));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Per-anchor mean InfoNCE loss of a batch of prepared inputs paired
/// `(0,1), (2,3), ...` and its gradient with respect to every parameter.
/// Backpropagation stops at layer `first_layer`; earlier gradients are zero.
pub fn batch_loss_and_grad(
    model: &EmbeddingModel,
    inputs: &[Tensor],
    temperature: f64,
    first_layer: usize,
) -> Result<(f64, Vec<f64>)> {
    let trace = model.forward_batch(inputs)?;
    let raw: Vec<Vec<f64>> = (0..trace.len()).map(|i| trace.z(i).to_vec()).collect();
    let z = if model.normalize() {
        raw.iter().map(|v| l2_normalize(v)).collect::<Result<Vec<_>>>()?
    } else {
        raw.clone()
    };
    let batch = Batch::adjacent(z)?;
    let (loss, grad_z) = info_nce_loss(&batch, temperature)?;
    let scale = 1.0 / batch.len() as f64;
    let grad_raw = raw
        .iter()
        .zip(&grad_z)
        .map(|(r, g)| {
            let g: Vec<f64> = g.iter().map(|v| v * scale).collect();
            if model.normalize() {
                l2_normalize_backward(r, &g)
            } else {
                Ok(g)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((loss * scale, model.backward_from(&trace, &grad_raw, first_layer)?))
}

/// One SGD step on the parameters in `trainable`. Returns the mean loss.
#[allow(clippy::too_many_arguments)]
fn sgd_step(
    model: &mut EmbeddingModel,
    inputs: &[Tensor],
    temperature: f64,
    lr: f64,
    momentum: f64,
    velocity: &mut [f64],
    trainable: std::ops::Range<usize>,
    first_layer: usize,
) -> Result<f64> {
    let (loss, grads) = batch_loss_and_grad(model, inputs, temperature, first_layer)?;
    if grads[trainable.clone()].iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("non-finite parameter gradient".into()));
    }
    let params = model.params_mut();
    for k in trainable {
        velocity[k] = momentum * velocity[k] + grads[k];
        params[k] -= lr * velocity[k];
    }
    Ok(loss)
}

/// Self-supervised training on unlabeled masks.
///
/// Each epoch shuffles the masks, splits them into batches of `batch_n`
/// (dropping a partial final batch), augments every mask into two views and
/// takes one SGD step per batch. Input channels and resolution of the model
/// follow the masks' palette and the augmentation output size.
pub fn train(masks: &[SemanticMask], config: &TrainConfig) -> Result<(EmbeddingModel, LossHistory)> {
    config.validate()?;
    let first = masks
        .first()
        .ok_or_else(|| Error::Degenerate("training set is empty".into()))?;
    if masks.len() < config.batch_n {
        return Err(Error::Config(format!(
            "training set of {} masks is smaller than one batch of {}",
            masks.len(),
            config.batch_n
        )));
    }
    if let Some(m) = masks.iter().find(|m| !m.same_palette(first)) {
        return Err(Error::Palette(format!("mixed palettes in training set: {}", m.palette_id())));
    }
    let mut arch = config.arch.clone();
    arch.in_channels = first.palette_size();
    arch.in_h = config.augment.out_h;
    arch.in_w = config.augment.out_w;
    let mut model = arch.build(rng::derive_seed(config.seed, 1))?;
    let trainable = 0..model.param_count();
    let mut velocity = vec![0.0; model.param_count()];

    let mut shuffle_rng = rng::child(config.seed, 2);
    let mut order: Vec<usize> = (0..masks.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let lr = config.lr_at(epoch);
        let mut total = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks_exact(config.batch_n).enumerate() {
            let seeds: Vec<u64> = chunk.iter().map(|_| shuffle_rng.random()).collect();
            let inputs: Vec<Tensor> = chunk
                .par_iter()
                .zip(&seeds)
                .map(|(&idx, &s)| {
                    let (a, b) = make_pair(&masks[idx], &config.augment, &mut rng::seeded(s))?;
                    Ok([model.prepare(&a)?, model.prepare(&b)?])
                })
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .flatten()
                .collect();
            let loss = sgd_step(
                &mut model,
                &inputs,
                config.temperature,
                lr,
                config.momentum,
                &mut velocity,
                trainable.clone(),
                0,
            )
            .map_err(|e| annotate(e, epoch, b))?;
            total += loss;
            batches += 1;
        }
        let mean = total / batches as f64;
        log::info!("epoch {}/{}: mean loss {mean:.6}", epoch + 1, config.epochs);
        history.push(mean);
    }
    Ok((model, history))
}

fn annotate(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("epoch {} batch {batch}: {m}", epoch + 1)),
        other => other,
    }
}

/// Supervised fine-tuning on `(query mask, matching database mask)` pairs,
/// which take the place of augmented views as positives.
pub fn finetune(
    model: &EmbeddingModel,
    labeled_pairs: &[(SemanticMask, SemanticMask)],
    config: &TrainConfig,
) -> Result<(EmbeddingModel, LossHistory)> {
    config.validate()?;
    let mut model = model.clone();
    let (trainable, first_layer) = match config.finetune_mode {
        FinetuneMode::None => {
            return Err(Error::Config("finetune requires a finetune_mode other than none".into()))
        }
        FinetuneMode::AllLayers => (0..model.param_count(), 0),
        FinetuneMode::LastTwoDense => {
            let base = model.encoder_len();
            let dense: Vec<usize> = model
                .projection_layers()
                .iter()
                .enumerate()
                .filter(|(_, l)| l.is_dense())
                .map(|(i, _)| base + i)
                .collect();
            if dense.len() < 2 {
                return Err(Error::Config(format!(
                    "last_two_dense needs at least two dense layers in the projection head, found {}",
                    dense.len()
                )));
            }
            let first = dense[dense.len() - 2];
            (model.layer_param_range(first).start..model.param_count(), first)
        }
        FinetuneMode::AddTwoDense => {
            let range = model.append_dense_pair(rng::derive_seed(config.seed, 3))?;
            (range, model.layers().len() - 3)
        }
    };
    let n = config.batch_n.min(labeled_pairs.len());
    if n < 2 {
        return Err(Error::Degenerate(format!(
            "fine-tuning needs at least 2 labeled pairs, got {}",
            labeled_pairs.len()
        )));
    }
    for (q, d) in labeled_pairs {
        if q.width() != d.width() || q.height() != d.height() {
            return Err(Error::Dimension(format!(
                "labeled pair sizes differ: {}x{} vs {}x{}",
                q.width(),
                q.height(),
                d.width(),
                d.height()
            )));
        }
    }
    let prepared: Vec<[Tensor; 2]> = labeled_pairs
        .par_iter()
        .map(|(q, d)| Ok([model.prepare(q)?, model.prepare(d)?]))
        .collect::<Result<_>>()?;

    let mut velocity = vec![0.0; model.param_count()];
    let mut shuffle_rng = rng::child(config.seed, 4);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let lr = config.lr_at(epoch);
        let mut total = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks_exact(n).enumerate() {
            let inputs: Vec<Tensor> = chunk.iter().flat_map(|&i| prepared[i].clone()).collect();
            let loss = sgd_step(
                &mut model,
                &inputs,
                config.temperature,
                lr,
                config.momentum,
                &mut velocity,
                trainable.clone(),
                first_layer,
            )
            .map_err(|e| annotate(e, epoch, b))?;
            total += loss;
            batches += 1;
        }
        history.push(total / batches as f64);
    }
    Ok((model, history))
}

/// Similarity of two masks already at the model's input resolution: the dot
/// product of their embeddings (cosine when the model normalizes).
pub fn embed_similarity(model: &EmbeddingModel, a: &SemanticMask, b: &SemanticMask) -> Result<f64> {
    let s = model.input_shape();
    for m in [a, b] {
        if m.width() != s.w || m.height() != s.h {
            return Err(Error::Dimension(format!(
                "model input is {}x{}, mask is {}x{}",
                s.w,
                s.h,
                m.width(),
                m.height()
            )));
        }
    }
    let ea = model.embed_mask(a)?;
    let eb = model.embed_mask(b)?;
    Ok(dot(&ea, &eb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maskio::ClassPalette;
    use crate::rng::seeded;

    /// Softmax cross-entropy written directly from its definition: class
    /// scores are `z_i . z_a / τ` for `a != i`, target is the partner.
    fn cross_entropy_oracle(z: &[Vec<f64>], pair: &[usize], tau: f64) -> f64 {
        let mut total = 0.0;
        for i in 0..z.len() {
            let scores: Vec<(usize, f64)> = (0..z.len())
                .filter(|&a| a != i)
                .map(|a| (a, z[i].iter().zip(&z[a]).map(|(x, y)| x * y).sum::<f64>() / tau))
                .collect();
            let max = scores.iter().map(|s| s.1).fold(f64::MIN, f64::max);
            let denom: f64 = scores.iter().map(|s| (s.1 - max).exp()).sum();
            let target = scores.iter().find(|s| s.0 == pair[i]).unwrap().1;
            total += -((target - max).exp() / denom).ln();
        }
        total
    }

    fn random_unit_batch(rng: &mut crate::rng::PortableRng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| l2_normalize(&(0..d).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>()).unwrap())
            .collect()
    }

    #[test]
    fn loss_history_csv_is_one_based() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        write_loss_history(&path, &[2.5, 1.25]).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "epoch,mean_loss\n1,2.5\n2,1.25\n");
    }

    #[test]
    fn single_pair_has_zero_loss() {
        let b = Batch::adjacent(vec![vec![0.3, 0.1], vec![-2.0, 5.0]]).unwrap();
        let (loss, grad) = info_nce_loss(&b, 0.07).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().flatten().all(|&g| g == 0.0));
    }

    #[test]
    fn orthogonal_pairs_hand_value() {
        // positives identical unit vectors, cross pairs orthogonal, τ = 1
        let e1 = vec![1.0, 0.0];
        let e2 = vec![0.0, 1.0];
        let b = Batch::adjacent(vec![e1.clone(), e1, e2.clone(), e2]).unwrap();
        let (loss, _) = info_nce_loss(&b, 1.0).unwrap();
        let expected = 4.0 * (1.0 + 2.0 / std::f64::consts::E).ln();
        assert!((loss - expected).abs() < 1e-14, "{loss} vs {expected}");
    }

    #[test]
    fn matches_cross_entropy_oracle_on_random_batches() {
        let mut rng = seeded(4);
        for &n in &[2usize, 4, 8, 32] {
            for _ in 0..10 {
                let z = random_unit_batch(&mut rng, n, 16);
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut rng);
                let mut pair = vec![0; n];
                for c in perm.chunks(2) {
                    pair[c[0]] = c[1];
                    pair[c[1]] = c[0];
                }
                let tau = rng.random_range(0.05..1.0);
                let b = Batch::new(z.clone(), pair.clone()).unwrap();
                let (loss, _) = info_nce_loss(&b, tau).unwrap();
                assert!((loss - cross_entropy_oracle(&z, &pair, tau)).abs() <= 1e-10);
                assert!(loss >= 0.0);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = seeded(6);
        let z = random_unit_batch(&mut rng, 8, 5);
        let b = Batch::adjacent(z.clone()).unwrap();
        let tau = 0.2;
        let (_, grad) = info_nce_loss(&b, tau).unwrap();
        let h = 1e-6;
        for i in 0..8 {
            for k in 0..5 {
                let mut zp = z.clone();
                let mut zm = z.clone();
                zp[i][k] += h;
                zm[i][k] -= h;
                let lp = info_nce_loss(&Batch::adjacent(zp).unwrap(), tau).unwrap().0;
                let lm = info_nce_loss(&Batch::adjacent(zm).unwrap(), tau).unwrap().0;
                let num = (lp - lm) / (2.0 * h);
                let rel = (num - grad[i][k]).abs() / num.abs().max(grad[i][k].abs()).max(1e-8);
                assert!(rel <= 1e-6, "z[{i}][{k}]: {} vs {num}", grad[i][k]);
            }
        }
    }

    #[test]
    fn loss_nonincreasing_as_temperature_drops() {
        // positives more similar than every negative
        let b = Batch::adjacent(vec![
            vec![1.0, 0.0, 0.0],
            vec![0.96, 0.28, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![0.0, 0.28, 0.96],
        ])
        .unwrap();
        let taus = [2.0, 1.0, 0.5, 0.2, 0.1, 0.07, 0.03, 0.01];
        let losses: Vec<f64> = taus.iter().map(|&t| info_nce_loss(&b, t).unwrap().0).collect();
        for w in losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-15, "{losses:?}");
        }
    }

    #[test]
    fn batch_and_temperature_validation() {
        assert!(Batch::new(vec![vec![1.0]; 3], vec![1, 0, 2]).is_err());
        assert!(Batch::new(vec![vec![1.0]; 3], vec![1, 2, 0]).is_err());
        assert!(Batch::new(vec![vec![1.0]], vec![0]).is_err());
        assert!(matches!(Batch::adjacent(vec![vec![f64::NAN], vec![1.0]]), Err(Error::NonFinite(_))));
        let b = Batch::adjacent(vec![vec![1.0], vec![1.0]]).unwrap();
        assert!(matches!(info_nce_loss(&b, 0.0), Err(Error::Config(_))));
        assert!(matches!(info_nce_loss(&b, -1.0), Err(Error::Config(_))));
        for i in 0..b.len() {
            assert_eq!(b.partner(b.partner(i)), i);
        }
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            batch_n: 4,
            epochs: 2,
            augment: AugmentConfig { out_w: 20, out_h: 16, ..AugmentConfig::default() },
            arch: ArchitectureConfig {
                conv_channels: vec![4, 8],
                embed_dim: 16,
                proj_hidden: 32,
                proj_dim: 8,
                ..ArchitectureConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    fn blocks(n: usize) -> Vec<SemanticMask> {
        let p = ClassPalette::street();
        (0..n)
            .map(|i| SemanticMask::from_fn(40, 32, &p, |x, y| (((x / (4 + i % 5)) + y / 8 + i) % 9) as u8).unwrap())
            .collect()
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let cfg = TrainConfig { lr: 0.0, ..tiny_config() };
        let (model, hist) = train(&blocks(9), &cfg).unwrap();
        let mut arch = cfg.arch.clone();
        arch.in_h = 16;
        arch.in_w = 20;
        let fresh = arch.build(rng::derive_seed(cfg.seed, 1)).unwrap();
        assert_eq!(model.params(), fresh.params());
        assert_eq!(hist.len(), 2);
    }

    #[test]
    fn training_is_bit_reproducible() {
        let cfg = tiny_config();
        let (m1, h1) = train(&blocks(10), &cfg).unwrap();
        let (m2, h2) = train(&blocks(10), &cfg).unwrap();
        assert_eq!(h1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), h2.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(m1, m2);
    }

    #[test]
    fn train_rejects_bad_inputs() {
        assert!(matches!(train(&[], &tiny_config()), Err(Error::Degenerate(_))));
        assert!(matches!(train(&blocks(3), &tiny_config()), Err(Error::Config(_))));
        let cfg = TrainConfig { temperature: 0.0, ..tiny_config() };
        assert!(matches!(train(&blocks(8), &cfg), Err(Error::Config(_))));
        let cfg = TrainConfig { batch_n: 1, ..tiny_config() };
        assert!(matches!(train(&blocks(8), &cfg), Err(Error::Config(_))));
    }

    fn pairs() -> Vec<(SemanticMask, SemanticMask)> {
        blocks(8).into_iter().map(|m| (m.clone(), m.resize_nearest(40, 32).unwrap())).collect()
    }

    #[test]
    fn last_two_dense_freezes_encoder() {
        let (model, _) = train(&blocks(8), &tiny_config()).unwrap();
        let cfg = TrainConfig { finetune_mode: FinetuneMode::LastTwoDense, ..tiny_config() };
        let (tuned, _) = finetune(&model, &pairs(), &cfg).unwrap();
        let head_start = model.layer_param_range(model.encoder_len()).start;
        let bits = |p: &[f64]| p.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&tuned.params()[..head_start]), bits(&model.params()[..head_start]));
        assert_ne!(tuned.params()[head_start..], model.params()[head_start..]);
    }

    #[test]
    fn add_two_dense_trains_only_new_layers() {
        let (model, _) = train(&blocks(8), &tiny_config()).unwrap();
        let cfg = TrainConfig { finetune_mode: FinetuneMode::AddTwoDense, ..tiny_config() };
        let (tuned, _) = finetune(&model, &pairs(), &cfg).unwrap();
        let z = model.proj_dim();
        assert_eq!(tuned.param_count(), model.param_count() + 2 * (z * z + z));
        assert_eq!(&tuned.params()[..model.param_count()], model.params());
    }

    #[test]
    fn all_layers_with_zero_lr_is_a_no_op() {
        let (model, _) = train(&blocks(8), &tiny_config()).unwrap();
        let cfg = TrainConfig { finetune_mode: FinetuneMode::AllLayers, lr: 0.0, ..tiny_config() };
        let (tuned, _) = finetune(&model, &pairs(), &cfg).unwrap();
        assert_eq!(tuned, model);
        let cfg = TrainConfig { finetune_mode: FinetuneMode::AllLayers, ..tiny_config() };
        let (tuned, _) = finetune(&model, &pairs(), &cfg).unwrap();
        assert_ne!(tuned.params(), model.params());
    }

    #[test]
    fn finetune_mode_architecture_mismatch() {
        let mut arch = tiny_config().arch;
        arch.in_h = 16;
        arch.in_w = 20;
        let single_head = EmbeddingModel::new(
            crate::nn::Shape::new(9, 16, 20),
            arch.encoder_layers(),
            vec![crate::nn::LayerDescriptor::dense(16, 8)],
            true,
        )
        .unwrap();
        let cfg = TrainConfig { finetune_mode: FinetuneMode::LastTwoDense, ..tiny_config() };
        assert!(matches!(finetune(&single_head, &pairs(), &cfg), Err(Error::Config(_))));
        let cfg = TrainConfig { finetune_mode: FinetuneMode::None, ..tiny_config() };
        assert!(matches!(finetune(&single_head, &pairs(), &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn embed_similarity_identity_and_symmetry() {
        let (model, _) = train(&blocks(8), &tiny_config()).unwrap();
        let ms: Vec<_> = blocks(3).iter().map(|m| m.resize_nearest(20, 16).unwrap()).collect();
        let s = embed_similarity(&model, &ms[0], &ms[0]).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
        let ab = embed_similarity(&model, &ms[0], &ms[1]).unwrap();
        let ba = embed_similarity(&model, &ms[1], &ms[0]).unwrap();
        assert_eq!(ab, ba);
        assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&ab));
        assert!(matches!(embed_similarity(&model, &blocks(1)[0], &ms[0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn finetune_mode_parsing() {
        for m in [FinetuneMode::None, FinetuneMode::LastTwoDense, FinetuneMode::AddTwoDense, FinetuneMode::AllLayers] {
            assert_eq!(m.to_string().parse::<FinetuneMode>().unwrap(), m);
        }
        assert!("some".parse::<FinetuneMode>().is_err());
    }
}
