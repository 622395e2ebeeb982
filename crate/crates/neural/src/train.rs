//! Soft-Dice training with Adam, exponential learning-rate decay and
//! early stopping on one segment's Dice.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use netseg_core::labels::Segment;
use netseg_core::volume::{Modality, MultiModalRecord, Shape3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Tensor};
use crate::predictor::SegmentationModel;
use crate::NeuralError;

/// One training example: `[1, 4, D, H, W]` input and `[1, S, fD, fH, fW]`
/// binary targets in the model's segment order.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub input: Tensor,
    pub target: Tensor,
}

/// Stacks the four channels in network order.
pub fn record_input(record: &MultiModalRecord) -> Tensor {
    let [d, h, w] = record.shape();
    let mut data = Vec::with_capacity(4 * d * h * w);
    for m in Modality::ALL {
        data.extend_from_slice(record.channel(m).data());
    }
    Tensor { shape: vec![1, 4, d, h, w], data }
}

impl Sample {
    /// Z-scores the channels over the brain and builds targets from the
    /// record's labels, upscaled by repetition when `factor` is 2.
    pub fn from_record(record: &MultiModalRecord, segments: &[Segment], factor: usize) -> Result<Self, NeuralError> {
        let labels = record
            .labels
            .as_ref()
            .ok_or_else(|| NeuralError::BadConfig(format!("record {} has no labels", record.record_id)))?;
        let labels = if factor > 1 { labels.upscale_repeat(factor)? } else { labels.clone() };
        let schema = labels.schema();
        let [d, h, w] = labels.shape();
        let mut data = Vec::with_capacity(segments.len() * d * h * w);
        for &seg in segments {
            let set = schema
                .labels_of(seg)
                .ok_or_else(|| NeuralError::BadConfig(format!("segment {seg} is not defined by {schema} labels")))?;
            data.extend(labels.mask_of(set).data().iter().map(|&b| b as u8 as f64));
        }
        let target = Tensor { shape: vec![1, segments.len(), d, h, w], data };
        Ok(Self { id: record.record_id.clone(), input: record_input(&record.normalized()?), target })
    }

    /// Sub-volume starting at `origin` (input resolution) of size `size`.
    pub fn crop(&self, origin: Shape3, size: Shape3) -> Result<Self, NeuralError> {
        let sp = [self.input.shape[2], self.input.shape[3], self.input.shape[4]];
        let f = self.target.shape[2] / sp[0];
        if (0..3).any(|a| origin[a] + size[a] > sp[a]) {
            return Err(NeuralError::ShapeMismatch(format!("crop {origin:?}+{size:?} outside {sp:?}")));
        }
        let input = crop_tensor(&self.input, origin, size);
        let target = crop_tensor(&self.target, origin.map(|o| o * f), size.map(|s| s * f));
        Ok(Self { id: self.id.clone(), input, target })
    }
}

fn crop_tensor(t: &Tensor, origin: Shape3, size: Shape3) -> Tensor {
    let (c, d, h, w) = (t.shape[1], t.shape[2], t.shape[3], t.shape[4]);
    let mut data = Vec::with_capacity(c * size.iter().product::<usize>());
    for ch in 0..c {
        for z in origin[0]..origin[0] + size[0] {
            for y in origin[1]..origin[1] + size[1] {
                let row = ((ch * d + z) * h + y) * w;
                data.extend_from_slice(&t.data[row + origin[2]..row + origin[2] + size[2]]);
            }
        }
    }
    Tensor { shape: vec![1, c, size[0], size[1], size[2]], data }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyStop {
    pub metric: Segment,
    pub min_delta: f64,
    pub patience: usize,
}

impl EarlyStop {
    pub fn new(metric: Segment) -> Self {
        Self { metric, min_delta: 0.005, patience: 10 }
    }
}

/// Tracks the monitored value: a gain above `min_delta` over the best so far
/// resets the counter; training stops once `patience` epochs pass without one.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopper {
    rule: EarlyStop,
    best: f64,
    best_epoch: Option<usize>,
    wait: usize,
}

impl EarlyStopper {
    pub fn new(rule: EarlyStop) -> Self {
        Self { rule, best: f64::NEG_INFINITY, best_epoch: None, wait: 0 }
    }

    /// Records one epoch; returns `true` when training should stop.
    pub fn update(&mut self, epoch: usize, value: f64) -> bool {
        if value - self.best > self.rule.min_delta {
            self.best = value;
            self.best_epoch = Some(epoch);
            self.wait = 0;
        } else {
            self.wait += 1;
        }
        self.wait >= self.rule.patience
    }

    pub fn improved_at(&self, epoch: usize) -> bool {
        self.best_epoch == Some(epoch)
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }
}

/// Random sub-volume training: each epoch draws `per_sample` crops of
/// `size` from every sample, a `foreground_fraction` of them centred on a
/// random voxel inside any target channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchSampling {
    pub size: Shape3,
    pub per_sample: usize,
    pub foreground_fraction: f64,
}

impl PatchSampling {
    fn origin(&self, sample: &Sample, rng: &mut ChaCha8Rng) -> Result<Shape3, NeuralError> {
        let sp = [sample.input.shape[2], sample.input.shape[3], sample.input.shape[4]];
        if (0..3).any(|a| self.size[a] == 0 || self.size[a] > sp[a]) {
            return Err(NeuralError::ShapeMismatch(format!("patch {:?} larger than sample {sp:?}", self.size)));
        }
        let f = sample.target.shape[2] / sp[0];
        let centred = rng.random::<f64>() < self.foreground_fraction;
        let fg: Vec<usize> = if centred {
            let t = &sample.target;
            let plane = t.shape[2] * t.shape[3] * t.shape[4];
            (0..plane).filter(|&i| (0..t.shape[1]).any(|c| t.data[c * plane + i] >= 0.5)).collect()
        } else {
            Vec::new()
        };
        let mut origin = [0; 3];
        if fg.is_empty() {
            for a in 0..3 {
                origin[a] = rng.random_range(0..=sp[a] - self.size[a]);
            }
        } else {
            let idx = fg[rng.random_range(0..fg.len())];
            let (th, tw) = (sample.target.shape[3], sample.target.shape[4]);
            let at = [idx / (th * tw) / f, idx / tw % th / f, idx % tw / f];
            for a in 0..3 {
                origin[a] = at[a].saturating_sub(self.size[a] / 2).min(sp[a] - self.size[a]);
            }
        }
        Ok(origin)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub decay_per_epoch: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub early_stop: Option<EarlyStop>,
    /// Keep the weights of the best monitored epoch.
    pub restore_best: bool,
    pub dice_smooth: f64,
    /// Train on random crops instead of whole samples.
    pub patches: Option<PatchSampling>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            decay_per_epoch: 0.05,
            batch_size: 1,
            epochs: 100,
            early_stop: None,
            restore_best: true,
            dice_smooth: 1.0,
            patches: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * (1.0 - self.decay_per_epoch).powi(epoch as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    /// Hard Dice at threshold 0.5, on the validation set when one is given.
    pub dice: BTreeMap<Segment, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub segments: Vec<Segment>,
    pub epochs: Vec<EpochLog>,
    pub stopped_early: bool,
    pub best_epoch: Option<usize>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,lr,loss");
        for seg in &self.segments {
            let _ = write!(s, ",dice_{seg}");
        }
        s.push('\n');
        for e in &self.epochs {
            let _ = write!(s, "{},{:e},{:.9}", e.epoch, e.lr, e.loss);
            for seg in &self.segments {
                let _ = write!(s, ",{:.6}", e.dice.get(seg).copied().unwrap_or(f64::NAN));
            }
            s.push('\n');
        }
        s
    }

    pub fn last(&self) -> Option<&EpochLog> {
        self.epochs.last()
    }
}

/// Adam with the usual defaults (β₁ 0.9, β₂ 0.999, ε 1e-8).
#[derive(Debug, Clone)]
struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(sizes: impl Iterator<Item = usize>) -> Self {
        let m: Vec<Vec<f64>> = sizes.map(|n| vec![0.0; n]).collect();
        Self { v: m.clone(), m, t: 0 }
    }

    fn step(&mut self, params: &mut [&mut Vec<f64>], grads: &[Vec<f64>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, g) in grads[i].iter().enumerate() {
                m[j] = Self::B1 * m[j] + (1.0 - Self::B1) * g;
                v[j] = Self::B2 * v[j] + (1.0 - Self::B2) * g * g;
                p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Hard Dice per output channel at threshold 0.5 (1 when both are empty).
pub fn hard_dice_per_channel(pred: &Tensor, target: &Tensor) -> Vec<f64> {
    let c = pred.shape[1];
    let plane = pred.len() / (pred.shape[0] * c);
    let mut inter = vec![0usize; c];
    let mut total = vec![0usize; c];
    for (k, (p, t)) in pred.data.chunks(plane).zip(target.data.chunks(plane)).enumerate() {
        for (&a, &b) in p.iter().zip(t) {
            let (a, b) = (a >= 0.5, b >= 0.5);
            inter[k % c] += (a && b) as usize;
            total[k % c] += a as usize + b as usize;
        }
    }
    inter.iter().zip(&total).map(|(&i, &t)| if t == 0 { 1.0 } else { 2.0 * i as f64 / t as f64 }).collect()
}

fn mean_dice(model: &SegmentationModel, samples: &[Sample]) -> Result<BTreeMap<Segment, f64>, NeuralError> {
    let mut sums = vec![0.0; model.segments.len()];
    for s in samples {
        let pred = model.network.predict(&s.input)?;
        for (acc, d) in sums.iter_mut().zip(hard_dice_per_channel(&pred, &s.target)) {
            *acc += d;
        }
    }
    Ok(model.segments.iter().zip(sums).map(|(&seg, v)| (seg, v / samples.len() as f64)).collect())
}

/// Trains `model` in place. Per-epoch Dice (and the early-stopping monitor)
/// is measured on `validation` when it is nonempty, otherwise on the
/// training forward passes of that epoch.
pub fn train(
    model: &mut SegmentationModel,
    samples: &[Sample],
    validation: &[Sample],
    cfg: &TrainConfig,
) -> Result<TrainLog, NeuralError> {
    if samples.is_empty() {
        return Err(NeuralError::EmptyDataset);
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(NeuralError::BadConfig("batch size and epochs must be positive".into()));
    }
    if !(0.0..1.0).contains(&cfg.decay_per_epoch) || cfg.lr0 <= 0.0 {
        return Err(NeuralError::BadConfig(format!("lr0 {} / decay {}", cfg.lr0, cfg.decay_per_epoch)));
    }
    let n_seg = model.segments.len();
    if model.network.config.out_segments != n_seg {
        return Err(NeuralError::BadConfig(format!(
            "network has {} outputs for {n_seg} segments",
            model.network.config.out_segments
        )));
    }
    if let Some(es) = cfg.early_stop {
        if !model.segments.contains(&es.metric) {
            return Err(NeuralError::BadConfig(format!("early-stop segment {} is not a model output", es.metric)));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model.network.params.iter().map(|p| p.data.len()));
    let mut stopper = cfg.early_stop.map(EarlyStopper::new);
    let mut best_params = None;
    let mut log =
        TrainLog { segments: model.segments.clone(), epochs: Vec::new(), stopped_early: false, best_epoch: None };
    let per = cfg.patches.map_or(1, |p| p.per_sample.max(1));
    let mut order: Vec<usize> = (0..samples.len() * per).collect();

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut dice_sum = vec![0.0; n_seg];
        for batch in order.chunks(cfg.batch_size) {
            let mut grads: Vec<Vec<f64>> = model.network.params.iter().map(|p| vec![0.0; p.data.len()]).collect();
            for &i in batch {
                let cropped;
                let s = match &cfg.patches {
                    Some(p) => {
                        let whole = &samples[i / per];
                        cropped = whole.crop(p.origin(whole, &mut rng)?, p.size)?;
                        &cropped
                    }
                    None => &samples[i],
                };
                let mut g = Graph::new();
                let vars = model.network.bind(&mut g);
                let x = g.input(s.input.clone());
                let out = model.network.forward(&mut g, &vars, x, true, &mut rng)?;
                let loss = g.soft_dice_loss(out, &s.target, cfg.dice_smooth)?;
                let lv = g.value(loss).data[0];
                if !lv.is_finite() {
                    return Err(NeuralError::NonFiniteLoss { epoch, sample: s.id.clone(), loss: lv });
                }
                loss_sum += lv;
                if validation.is_empty() {
                    for (acc, d) in dice_sum.iter_mut().zip(hard_dice_per_channel(g.value(out), &s.target)) {
                        *acc += d;
                    }
                }
                g.backward(loss)?;
                for (acc, v) in grads.iter_mut().zip(&vars) {
                    if let Some(gr) = g.grad(*v) {
                        for (a, b) in acc.iter_mut().zip(gr) {
                            *a += b / batch.len() as f64;
                        }
                    }
                }
            }
            if grads.iter().flatten().any(|v| !v.is_finite()) {
                return Err(NeuralError::NonFiniteLoss { epoch, sample: "gradient".into(), loss: f64::NAN });
            }
            let mut params: Vec<&mut Vec<f64>> = model.network.params.iter_mut().map(|p| &mut p.data).collect();
            adam.step(&mut params, &grads, lr);
        }
        let dice = if validation.is_empty() {
            model.segments.iter().zip(&dice_sum).map(|(&seg, v)| (seg, v / order.len() as f64)).collect()
        } else {
            mean_dice(model, validation)?
        };
        let entry = EpochLog { epoch, lr, loss: loss_sum / order.len() as f64, dice };
        log::debug!("epoch {epoch} lr {lr:.3e} loss {:.5} dice {:?}", entry.loss, entry.dice);
        let mut stop = false;
        if let (Some(st), Some(es)) = (stopper.as_mut(), cfg.early_stop) {
            stop = st.update(epoch, entry.dice[&es.metric]);
            if st.improved_at(epoch) && cfg.restore_best {
                best_params = Some(model.network.params.clone());
            }
        }
        log.epochs.push(entry);
        if stop {
            log.stopped_early = true;
            break;
        }
    }
    log.best_epoch = stopper.as_ref().and_then(EarlyStopper::best_epoch);
    if let Some(p) = best_params {
        model.network.params = p;
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn learning_rate_schedule() {
        let cfg = TrainConfig::default();
        assert!((cfg.lr_at(0) - 1e-4).abs() < 1e-18);
        assert!((cfg.lr_at(1) - 9.5e-5).abs() < 1e-18);
        assert!((cfg.lr_at(2) - 9.025e-5).abs() < 1e-18);
    }

    #[test]
    fn stagnation_stops_after_patience() {
        let mut st = EarlyStopper::new(EarlyStop::new(Segment::Et));
        let seq = [0.50, 0.503, 0.504, 0.5041, 0.5042, 0.5043, 0.5044, 0.5045, 0.5046, 0.5047, 0.5048, 0.5049];
        let stop_at = seq.iter().enumerate().position(|(e, &v)| st.update(e, v));
        // epoch 0 sets the best; epochs 1..=10 are the ten stagnant ones
        assert_eq!(stop_at, Some(10));
        assert_eq!(st.best_epoch(), Some(0));
    }

    #[test]
    fn improvement_resets_patience() {
        let mut st = EarlyStopper::new(EarlyStop { metric: Segment::Et, min_delta: 0.005, patience: 2 });
        assert!(!st.update(0, 0.5));
        assert!(!st.update(1, 0.501));
        assert!(!st.update(2, 0.51));
        assert!(!st.update(3, 0.51));
        assert!(st.update(4, 0.512));
    }

    #[test]
    fn hard_dice_counts() {
        let p = Tensor::new(vec![1, 2, 1, 1, 4], vec![0.9, 0.9, 0.1, 0.1, 0.2, 0.2, 0.2, 0.2]).unwrap();
        let t = Tensor::new(vec![1, 2, 1, 1, 4], vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(hard_dice_per_channel(&p, &t), vec![2.0 / 3.0, 1.0]);
    }

    #[test]
    fn crop_keeps_target_aligned() {
        let input = Tensor::new(vec![1, 1, 2, 2, 2], (0..8).map(f64::from).collect()).unwrap();
        let target = Tensor::new(vec![1, 1, 4, 4, 4], (0..64).map(f64::from).collect()).unwrap();
        let s = Sample { id: "a".into(), input, target };
        let c = s.crop([1, 0, 1], [1, 1, 1]).unwrap();
        assert_eq!(c.input.data, vec![5.0]);
        assert_eq!(c.target.shape, vec![1, 1, 2, 2, 2]);
        assert_eq!(c.target.data[0], 32.0 + 2.0);
        assert!(s.crop([1, 1, 1], [2, 1, 1]).is_err());
    }
}
