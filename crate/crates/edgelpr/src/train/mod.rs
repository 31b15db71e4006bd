//! Desk-scale metric learning: pose-based triplet mining, triplet loss,
//! reverse-mode gradients and AdamW updates.

pub mod autodiff;

use crate::backbone::{BackboneError, ModelGraph, WeightStore};
use crate::bev::{batch_tensor, rasterize, rotate_cloud, BevConfig};
use crate::ingest::Frame;
use crate::tensor::Tensor;
use autodiff::{backward, forward_trace, GradMap};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no valid triplets: no frame pair satisfies the positive rule")]
    NoValidTriplets,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite gradient at layer {layer}")]
    NonFiniteGradient { layer: usize },
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error("bev error: {0}")]
    Bev(#[from] crate::bev::BevError),
}

/// Training hyperparameters. `tau_pos`/`tau_neg` are the pose-distance
/// thresholds for positive and negative mining (meters).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub weight_decay: f32,
    pub epochs: usize,
    pub margin: f32,
    pub tau_pos: f32,
    pub tau_neg: f32,
    pub negatives_per_anchor: usize,
    pub anchors_per_epoch: usize,
    pub batch_size: usize,
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            epochs: 50,
            margin: 0.3,
            tau_pos: 5.0,
            tau_neg: 10.0,
            negatives_per_anchor: 4,
            anchors_per_epoch: 64,
            batch_size: 16,
            augment: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.tau_pos < self.tau_neg) {
            return Err(TrainError::InvalidConfig("tau_pos must be < tau_neg".into()));
        }
        if !(self.margin > 0.0) {
            return Err(TrainError::InvalidConfig("margin must be > 0".into()));
        }
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.negatives_per_anchor == 0 || self.batch_size == 0 || self.anchors_per_epoch == 0 {
            return Err(TrainError::InvalidConfig(
                "negatives_per_anchor, anchors_per_epoch and batch_size must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Anchor/positive/negatives by frame id. Positives are strictly closer than
/// tau_pos, negatives strictly farther than tau_neg; the band in between is
/// never sampled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Triplet {
    pub anchor_id: u64,
    pub positive_id: u64,
    pub negative_ids: Vec<u64>,
}

/// Deterministic pose-based mining for one epoch.
pub fn mine_triplets(
    frames: &[Frame],
    config: &TrainConfig,
    epoch_seed: u64,
) -> Result<Vec<Triplet>, TrainError> {
    config.validate()?;
    let n = frames.len();
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);

    let mut anchors: Vec<usize> = Vec::new();
    let mut positives: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut negatives: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let dist = frames[i].pose.distance(&frames[j].pose);
            if dist < config.tau_pos {
                positives[i].push(j);
            } else if dist > config.tau_neg {
                negatives[i].push(j);
            }
        }
        if !positives[i].is_empty() && !negatives[i].is_empty() {
            anchors.push(i);
        }
    }
    if anchors.is_empty() {
        return Err(TrainError::NoValidTriplets);
    }
    anchors.shuffle(&mut rng);
    anchors.truncate(config.anchors_per_epoch);

    let mut triplets = Vec::with_capacity(anchors.len());
    for &a in &anchors {
        let &p = positives[a].choose(&mut rng).expect("anchor has a positive");
        let negs: Vec<u64> = (0..config.negatives_per_anchor)
            .map(|_| {
                let &k = negatives[a].choose(&mut rng).expect("anchor has a negative");
                frames[k].id
            })
            .collect();
        triplets.push(Triplet {
            anchor_id: frames[a].id,
            positive_id: frames[p].id,
            negative_ids: negs,
        });
    }
    Ok(triplets)
}

/// Mean over negatives of max(0, |g_a - g_p| - |g_a - g_n| + margin).
pub fn triplet_loss(
    anchor: &[f32],
    positive: &[f32],
    negatives: &[&[f32]],
    margin: f32,
) -> Result<f32, TrainError> {
    Ok(triplet_loss_grads(anchor, positive, negatives, margin)?.0)
}

fn euclid(a: &[f32], b: &[f32]) -> f32 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f32>()
        .sqrt()
}

/// Loss plus gradients with respect to each descriptor. Inactive hinges
/// contribute exactly zero gradient.
#[allow(clippy::type_complexity)]
pub fn triplet_loss_grads(
    anchor: &[f32],
    positive: &[f32],
    negatives: &[&[f32]],
    margin: f32,
) -> Result<(f32, Vec<f32>, Vec<f32>, Vec<Vec<f32>>), TrainError> {
    let d = anchor.len();
    if positive.len() != d || negatives.iter().any(|n| n.len() != d) {
        return Err(TrainError::DimensionMismatch(
            "triplet descriptors must share one dimension".into(),
        ));
    }
    if negatives.is_empty() {
        return Err(TrainError::DimensionMismatch("at least one negative required".into()));
    }
    let k = negatives.len() as f32;
    let d_ap = euclid(anchor, positive);
    let mut loss = 0.0f32;
    let mut ga = vec![0.0f32; d];
    let mut gp = vec![0.0f32; d];
    let mut gns = vec![vec![0.0f32; d]; negatives.len()];
    for (ni, neg) in negatives.iter().enumerate() {
        let d_an = euclid(anchor, neg);
        let hinge = d_ap - d_an + margin;
        if hinge <= 0.0 {
            continue;
        }
        loss += hinge / k;
        if d_ap > 0.0 {
            for i in 0..d {
                let u = (anchor[i] - positive[i]) / d_ap / k;
                ga[i] += u;
                gp[i] -= u;
            }
        }
        if d_an > 0.0 {
            for i in 0..d {
                let u = (anchor[i] - neg[i]) / d_an / k;
                ga[i] -= u;
                gns[ni][i] += u;
            }
        }
    }
    Ok((loss, ga, gp, gns))
}

/// AdamW moments, keyed like the weight store.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub m: BTreeMap<(usize, String), Tensor>,
    pub v: BTreeMap<(usize, String), Tensor>,
    pub t: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for OptimizerState {
    fn default() -> Self {
        OptimizerState {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Decoupled AdamW update:
/// theta <- theta - lr * mhat/(sqrt(vhat)+eps) - lr * wd * theta.
pub fn adamw_step(
    weights: &mut WeightStore,
    grads: &GradMap,
    state: &mut OptimizerState,
    learning_rate: f32,
    weight_decay: f32,
) {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (key, grad) in grads {
        let Some(theta) = weights.params.get_mut(key) else {
            continue;
        };
        let m = state
            .m
            .entry(key.clone())
            .or_insert_with(|| Tensor::zeros(&grad.shape));
        let v = state
            .v
            .entry(key.clone())
            .or_insert_with(|| Tensor::zeros(&grad.shape));
        for i in 0..grad.data.len() {
            let g = grad.data[i];
            m.data[i] = state.beta1 * m.data[i] + (1.0 - state.beta1) * g;
            v.data[i] = state.beta2 * v.data[i] + (1.0 - state.beta2) * g * g;
            let mhat = m.data[i] / bc1;
            let vhat = v.data[i] / bc2;
            let w = theta.data[i];
            theta.data[i] = w - learning_rate * (mhat / (vhat.sqrt() + state.eps)) - learning_rate * weight_decay * w;
        }
    }
}

/// One row of the training log CSV.
#[derive(Debug, Clone)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f32,
}

/// Trains in place. Anchors are re-mined each epoch; anchor and positive
/// clouds get independent random rotations when augmentation is on;
/// gradient accumulation order over a batch is fixed, so a given seed
/// always produces identical weights on one thread.
pub fn train(
    graph: &ModelGraph,
    weights: &mut WeightStore,
    frames: &[Frame],
    bev_config: &BevConfig,
    config: &TrainConfig,
) -> Result<Vec<EpochLog>, TrainError> {
    config.validate()?;
    let index_by_id: BTreeMap<u64, usize> =
        frames.iter().enumerate().map(|(i, f)| (f.id, i)).collect();
    let mut state = OptimizerState::default();
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let epoch_seed = config
            .seed
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(epoch as u64 + 1);
        let triplets = mine_triplets(frames, config, epoch_seed)?;
        let mut aug_rng = ChaCha8Rng::seed_from_u64(epoch_seed ^ 0xa5a5_a5a5);
        let mut epoch_loss = 0.0f64;
        let mut count = 0usize;

        for batch in triplets.chunks(config.batch_size) {
            let mut acc: GradMap = BTreeMap::new();
            for triplet in batch {
                let loss = accumulate_triplet(
                    graph,
                    weights,
                    frames,
                    &index_by_id,
                    bev_config,
                    config,
                    triplet,
                    &mut aug_rng,
                    &mut acc,
                )?;
                epoch_loss += loss as f64;
                count += 1;
            }
            let scale = 1.0 / batch.len() as f32;
            for g in acc.values_mut() {
                for v in &mut g.data {
                    *v *= scale;
                }
            }
            adamw_step(weights, &acc, &mut state, config.learning_rate, config.weight_decay);
        }
        log.push(EpochLog {
            epoch: epoch + 1,
            mean_loss: (epoch_loss / count.max(1) as f64) as f32,
        });
    }
    Ok(log)
}

#[allow(clippy::too_many_arguments)]
fn accumulate_triplet(
    graph: &ModelGraph,
    weights: &WeightStore,
    frames: &[Frame],
    index_by_id: &BTreeMap<u64, usize>,
    bev_config: &BevConfig,
    config: &TrainConfig,
    triplet: &Triplet,
    aug_rng: &mut ChaCha8Rng,
    acc: &mut GradMap,
) -> Result<f32, TrainError> {
    let frame = |id: u64| -> &Frame { &frames[index_by_id[&id]] };
    let mut images = Vec::with_capacity(2 + triplet.negative_ids.len());
    for (slot, id) in [triplet.anchor_id, triplet.positive_id]
        .into_iter()
        .enumerate()
    {
        let f = frame(id);
        let cloud = if config.augment {
            rotate_cloud(&f.cloud, aug_rng.gen::<f32>() * std::f32::consts::TAU)
        } else {
            f.cloud.clone()
        };
        let _ = slot;
        images.push(rasterize(&cloud, bev_config, f.id)?);
    }
    for &id in &triplet.negative_ids {
        let f = frame(id);
        images.push(rasterize(&f.cloud, bev_config, f.id)?);
    }

    let refs: Vec<&crate::bev::BevImage> = images.iter().collect();
    let batch = batch_tensor(&refs);
    let trace = forward_trace(graph, weights, &batch)?;
    let d = graph.descriptor_dim;
    let desc = &trace.descriptors.data;
    let anchor = &desc[..d];
    let positive = &desc[d..2 * d];
    let negs: Vec<&[f32]> = (0..triplet.negative_ids.len())
        .map(|i| &desc[(2 + i) * d..(3 + i) * d])
        .collect();
    let (loss, ga, gp, gns) = triplet_loss_grads(anchor, positive, &negs, config.margin)?;

    if loss > 0.0 {
        let mut grad_desc = vec![0.0f32; desc.len()];
        grad_desc[..d].copy_from_slice(&ga);
        grad_desc[d..2 * d].copy_from_slice(&gp);
        for (i, gn) in gns.iter().enumerate() {
            grad_desc[(2 + i) * d..(3 + i) * d].copy_from_slice(gn);
        }
        let grad_desc = Tensor::from_vec(&trace.descriptors.shape, grad_desc).unwrap();
        let res = backward(graph, weights, &trace, &grad_desc)?;
        for (key, g) in res.grads {
            match acc.get_mut(&key) {
                Some(slot) => {
                    for (a, b) in slot.data.iter_mut().zip(&g.data) {
                        *a += b;
                    }
                }
                None => {
                    acc.insert(key, g);
                }
            }
        }
    }
    Ok(loss)
}

/// Writes the training log as CSV (`epoch,mean_loss`).
pub fn log_to_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,mean_loss\n");
    for row in log {
        out.push_str(&format!("{},{}\n", row.epoch, row.mean_loss));
    }
    out
}
