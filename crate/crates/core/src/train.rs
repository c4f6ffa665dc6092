//! Future-frame segmentation training.
//!
//! A sample is the frames `T−j .. T−1` of a sequence and the label of frame
//! `T`. The session is reset, all `j` frames are streamed, and the loss on
//! the final logits is backpropagated through the final step only: cached
//! channels are constants. With `sequences_per_sample = s`, the sample is
//! used `s` times, starting at offsets `j, j−1, …, j−s+1`, each an
//! independent episode with its own update.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::LabelMap;
use crate::mask::ChannelMask;
use crate::metrics::{abt_eval, AbtConfig};
use crate::net::{NetGrads, Network};
use crate::ops::softmax_ce_loss;
use crate::scalar::Scalar;
use crate::synth::SequenceSample;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Frames streamed before the predicted frame.
    pub j: usize,
    pub sequences_per_sample: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
    /// Rescales each update's gradient to at most this global L2 norm.
    pub grad_clip: Option<f64>,
    /// Backpropagate through cached channels across the whole sequence
    /// instead of only through the final step.
    pub bptt: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            j: 7,
            sequences_per_sample: 2,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 10,
            seed: 0,
            grad_clip: None,
            bptt: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.j == 0 {
            return Err(Error::invalid("j", "must be at least 1"));
        }
        if !(1..=4).contains(&self.sequences_per_sample) {
            return Err(Error::invalid("sequences_per_sample", "must be in [1, 4]"));
        }
        if self.j < self.sequences_per_sample {
            return Err(Error::invalid(
                "j",
                format!(
                    "j = {} is smaller than sequences_per_sample = {}",
                    self.j, self.sequences_per_sample
                ),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum", "must be in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid("weight_decay", "must be non-negative"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::invalid("grad_clip", "must be positive"));
            }
        }
        Ok(())
    }
}

/// Start offsets (frames before `T`) of the sub-sequences of one sample.
pub fn sub_sequence_offsets(j: usize, sequences_per_sample: usize) -> Result<Vec<usize>> {
    if sequences_per_sample == 0 || j < sequences_per_sample {
        return Err(Error::invalid(
            "j",
            format!(
                "{sequences_per_sample} sub-sequences need j ≥ {sequences_per_sample}, got {j}"
            ),
        ));
    }
    Ok((0..sequences_per_sample).map(|s| j - s).collect())
}

/// SGD with momentum and decoupled weight decay:
/// `v ← μ·v + g`, `p ← p − lr·v − lr·wd·p`, with `g` optionally rescaled to
/// a maximum global L2 norm.
///
/// Rows outside a masked layer's active range keep their velocity and are
/// touched only by weight decay.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub lr: T,
    pub momentum: T,
    pub weight_decay: T,
    pub grad_clip: Option<f64>,
    /// Gradient mode used by [`train_sequence_step`].
    pub bptt: bool,
    velocity: Vec<(Tensor<T>, Tensor<T>)>,
    updates: usize,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr: T::from_f64_lossy(lr),
            momentum: T::from_f64_lossy(momentum),
            weight_decay: T::from_f64_lossy(weight_decay),
            grad_clip: None,
            bptt: false,
            velocity: Vec::new(),
            updates: 0,
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        let mut opt = Self::new(cfg.lr, cfg.momentum, cfg.weight_decay);
        opt.grad_clip = cfg.grad_clip;
        opt.bptt = cfg.bptt;
        opt
    }

    /// Updates applied so far.
    pub fn updates(&self) -> usize {
        self.updates
    }

    pub fn step(&mut self, net: &mut Network<T>, grads: &NetGrads<T>) -> Result<()> {
        let shapes: Vec<_> = net.convs().map(|c| c.kernel.shape().to_vec()).collect();
        if grads.convs.len() != shapes.len()
            || grads
                .convs
                .iter()
                .zip(&shapes)
                .any(|((k, _), s)| k.shape() != s.as_slice())
        {
            return Err(Error::InvalidState(
                "gradients do not match the network".into(),
            ));
        }
        if self.velocity.is_empty() {
            self.velocity = grads
                .convs
                .iter()
                .map(|(k, b)| (Tensor::zeros(k.shape()), Tensor::zeros(b.shape())))
                .collect();
        }
        let (lr, mu, wd) = (self.lr, self.momentum, self.weight_decay);
        let scaled;
        let convs = match self.grad_clip.map(|c| (c, grad_norm(grads))) {
            Some((clip, norm)) if norm > clip => {
                let f = T::from_f64_lossy(clip / norm);
                scaled = grads
                    .convs
                    .iter()
                    .map(|(k, b)| (k.map(|v| v * f), b.map(|v| v * f)))
                    .collect::<Vec<_>>();
                &scaled
            }
            _ => &grads.convs,
        };
        for (((conv, (gk, gb)), (vk, vb)), active) in net
            .convs_mut()
            .zip(convs)
            .zip(&mut self.velocity)
            .zip(&grads.active_rows)
        {
            let rows = conv.out_channels();
            let range = active.map_or((0, rows), |m: ChannelMask| (m.start(), m.end()));
            update_rows(
                conv.kernel.data_mut(),
                vk.data_mut(),
                gk.data(),
                rows,
                range,
                lr,
                mu,
                wd,
            );
            if let Some(bias) = &mut conv.bias {
                update_rows(
                    bias.data_mut(),
                    vb.data_mut(),
                    gb.data(),
                    rows,
                    range,
                    lr,
                    mu,
                    wd,
                );
            }
        }
        self.updates += 1;
        Ok(())
    }
}

/// Global L2 norm of all kernel and bias gradients.
pub fn grad_norm<T: Scalar>(grads: &NetGrads<T>) -> f64 {
    grads
        .convs
        .iter()
        .flat_map(|(k, b)| k.data().iter().chain(b.data()))
        .map(|v| v.to_f64_lossy().powi(2))
        .sum::<f64>()
        .sqrt()
}

#[allow(clippy::too_many_arguments)]
fn update_rows<T: Scalar>(
    p: &mut [T],
    v: &mut [T],
    g: &[T],
    rows: usize,
    (start, end): (usize, usize),
    lr: T,
    mu: T,
    wd: T,
) {
    let row = p.len() / rows;
    for r in 0..rows {
        let span = r * row..(r + 1) * row;
        let active = (start..end).contains(&r);
        for ((p, v), &g) in p[span.clone()]
            .iter_mut()
            .zip(&mut v[span.clone()])
            .zip(&g[span])
        {
            if active {
                *v = mu * *v + g;
                *p = *p - lr * *v - lr * wd * *p;
            } else if wd != T::zero() {
                *p = *p - lr * wd * *p;
            }
        }
    }
}

/// Loss and gradients of one episode without updating the weights.
pub fn sequence_gradients<T: Scalar>(
    net: &Network<T>,
    frames: &[Tensor<T>],
    target: &LabelMap,
) -> Result<(f64, NetGrads<T>)> {
    sequence_gradients_with(net, frames, target, false)
}

/// [`sequence_gradients`], optionally backpropagating through every step
/// (see [`Network::backward_through_time`]).
pub fn sequence_gradients_with<T: Scalar>(
    net: &Network<T>,
    frames: &[Tensor<T>],
    target: &LabelMap,
    bptt: bool,
) -> Result<(f64, NetGrads<T>)> {
    let Some((last, prefix)) = frames.split_last() else {
        return Err(Error::Empty("training sequence has no frames".into()));
    };
    let (_, _, h, w) = last.dims4("train_sequence_step")?;
    if (target.height(), target.width()) != (h, w) {
        return Err(Error::shape(
            "train_sequence_step",
            format!(
                "target {}×{} for {h}×{w} frames",
                target.height(),
                target.width()
            ),
        ));
    }
    let through_time = bptt && !net.is_stateless();
    let mut session = net.session();
    let mut traces = Vec::new();
    if !net.is_stateless() {
        for f in prefix {
            if through_time {
                traces.push(session.forward_traced(f)?.1);
            } else {
                session.forward(f)?;
            }
        }
    }
    let (logits, trace) = session.forward_traced(last)?;
    let (loss, grad) = softmax_ce_loss(&logits, std::slice::from_ref(target))?;
    let loss = loss.to_f64_lossy();
    if !loss.is_finite() {
        return Err(Error::InvalidState(format!("non-finite loss {loss}")));
    }
    if through_time {
        traces.push(trace);
        Ok((loss, net.backward_through_time(&traces, &grad)?))
    } else {
        Ok((loss, net.backward(&trace, &grad)?))
    }
}

/// Streams `frames` from a fresh session and applies one update for the
/// loss of the final logits against `target`.
pub fn train_sequence_step<T: Scalar>(
    net: &mut Network<T>,
    frames: &[Tensor<T>],
    target: &LabelMap,
    opt: &mut Sgd<T>,
) -> Result<f64> {
    let (loss, grads) = sequence_gradients_with(net, frames, target, opt.bptt)?;
    opt.step(net, &grads)?;
    Ok(loss)
}

/// One sub-sequence update of [`train_bisequence_step`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubSequenceLoss {
    /// Frames before the target at which the sub-sequence starts.
    pub offset: usize,
    pub loss: f64,
}

/// Runs [`train_sequence_step`] on `frames[s..]` for each sub-sequence `s`.
/// `frames` holds `T−j .. T−1`.
pub fn train_bisequence_step<T: Scalar>(
    net: &mut Network<T>,
    frames: &[Tensor<T>],
    target: &LabelMap,
    opt: &mut Sgd<T>,
    sequences_per_sample: usize,
) -> Result<Vec<SubSequenceLoss>> {
    let j = frames.len();
    sub_sequence_offsets(j, sequences_per_sample)?
        .into_iter()
        .map(|offset| {
            let loss = train_sequence_step(net, &frames[j - offset..], target, opt)?;
            Ok(SubSequenceLoss { offset, loss })
        })
        .collect()
}

/// Frames `T−j .. T−1` of `seq` as network inputs.
pub fn sample_frames<T: Scalar>(seq: &SequenceSample, j: usize) -> Result<Vec<Tensor<T>>> {
    let t = seq.annotated_index;
    if j > t {
        return Err(Error::invalid(
            "j",
            format!("j = {j} but only {t} frames precede the annotated frame"),
        ));
    }
    (t - j..t).map(|i| seq.frame_batch(i)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    /// Mean over all updates of the epoch.
    pub loss: f64,
    pub val_miou: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub epochs: Vec<EpochReport>,
    pub updates: usize,
    pub wall_clock_s: f64,
    pub weights_path: Option<String>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }

    /// Learning curve as CSV: `epoch,loss,val_miou,seconds`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,val_miou,seconds\n");
        for e in &self.epochs {
            let miou = e.val_miou.map(|m| format!("{m:.6}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{:.6},{},{:.3}\n",
                e.epoch, e.loss, miou, e.seconds
            ));
        }
        out
    }
}

/// Trains `net` on `train`, evaluating on `val` after each epoch when
/// `eval` is given. `on_epoch` sees each epoch report as it completes.
pub fn train<T: Scalar>(
    net: &mut Network<T>,
    train: &[SequenceSample],
    val: &[SequenceSample],
    cfg: &TrainConfig,
    eval: Option<&AbtConfig>,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("no training sequences".into()));
    }
    let start = Instant::now();
    let mut opt = Sgd::from_config(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0;
        for &i in &order {
            let seq = &train[i];
            let frames = sample_frames::<T>(seq, cfg.j)?;
            let losses = train_bisequence_step(
                net,
                &frames,
                seq.annotated_label(),
                &mut opt,
                cfg.sequences_per_sample,
            )?;
            total += losses.iter().map(|l| l.loss).sum::<f64>();
            count += losses.len();
        }
        let val_miou = match eval {
            Some(abt) if !val.is_empty() => Some(abt_eval(net, val, abt)?),
            _ => None,
        };
        let report = EpochReport {
            epoch,
            loss: total / count as f64,
            val_miou,
            seconds: t0.elapsed().as_secs_f64(),
        };
        on_epoch(&report);
        epochs.push(report);
    }
    Ok(TrainReport {
        config: cfg.clone(),
        epochs,
        updates: opt.updates(),
        wall_clock_s: start.elapsed().as_secs_f64(),
        weights_path: None,
    })
}
