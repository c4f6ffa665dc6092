//! mIoU and steady-state ("asymptotic behavior") evaluation of streaming
//! models.
//!
//! A sequence is evaluated by resetting the session, streaming the `k`
//! frames `T−k .. T−1` and comparing the final prediction with the label of
//! frame `T`. Bi-step models alternate behavior every step, so the score
//! can be averaged over `k` and `k − 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::{LabelMap, IGNORE_LABEL};
use crate::net::Network;
use crate::parallel::par_map;
use crate::scalar::Scalar;
use crate::synth::SequenceSample;
use crate::tensor::Tensor;

/// `counts[gt * n + pred]`, ignore pixels excluded.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, gt: &LabelMap, pred: &LabelMap) -> Result<()> {
        if (gt.height(), gt.width()) != (pred.height(), pred.width()) {
            return Err(Error::shape(
                "ConfusionMatrix::accumulate",
                format!(
                    "gt {}×{} vs pred {}×{}",
                    gt.height(),
                    gt.width(),
                    pred.height(),
                    pred.width()
                ),
            ));
        }
        gt.validate(self.num_classes)?;
        for (index, (&g, &p)) in gt.data().iter().zip(pred.data()).enumerate() {
            if g == IGNORE_LABEL {
                continue;
            }
            if p as usize >= self.num_classes {
                return Err(Error::LabelOutOfRange {
                    label: p,
                    index,
                    num_classes: self.num_classes,
                });
            }
            self.counts[g as usize * self.num_classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::shape(
                "ConfusionMatrix::merge",
                format!("{} vs {} classes", self.num_classes, other.num_classes),
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Per-class IoU, `None` for classes absent from both gt and prediction.
    pub fn ious(&self) -> Vec<Option<f64>> {
        let n = self.num_classes;
        (0..n)
            .map(|c| {
                let tp = self.get(c, c);
                let fn_: u64 = (0..n).map(|p| self.get(c, p)).sum::<u64>() - tp;
                let fp: u64 = (0..n).map(|g| self.get(g, c)).sum::<u64>() - tp;
                let union = tp + fp + fn_;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU over classes with a non-empty union.
    pub fn miou(&self) -> Result<f64> {
        let ious: Vec<f64> = self.ious().into_iter().flatten().collect();
        if ious.is_empty() {
            return Err(Error::Empty(
                "confusion matrix has no counted pixels".into(),
            ));
        }
        Ok(ious.iter().sum::<f64>() / ious.len() as f64)
    }
}

pub fn miou(cm: &ConfusionMatrix) -> Result<f64> {
    cm.miou()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbtConfig {
    /// Frames streamed before the prediction.
    pub k: usize,
    /// Average the scores for `k` and `k − 1`.
    pub average_pair: bool,
}

impl AbtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("k", "must be at least 1"));
        }
        if self.average_pair && self.k < 2 {
            return Err(Error::invalid("k", "average_pair needs k ≥ 2"));
        }
        Ok(())
    }
}

/// Streams frames `T−k .. T−1` of one sequence from a fresh session and
/// returns the predicted label map for frame `T`.
pub fn predict_future<T: Scalar>(
    net: &Network<T>,
    seq: &SequenceSample,
    k: usize,
) -> Result<LabelMap> {
    let t = seq.annotated_index;
    if k == 0 || k > t {
        return Err(Error::invalid(
            "k",
            format!("{k} frames requested before annotated frame {t}"),
        ));
    }
    let logits = if net.is_stateless() {
        net.forward_stateless(&seq.frame_batch::<T>(t - 1)?)?
    } else {
        let mut session = net.session();
        let mut last = None;
        for i in t - k..t {
            last = Some(session.forward(&seq.frame_batch::<T>(i)?)?);
        }
        last.expect("k ≥ 1")
    };
    LabelMap::argmax(&logits, 0)
}

fn confusion_at<T: Scalar>(
    net: &Network<T>,
    data: &[SequenceSample],
    k: usize,
) -> Result<ConfusionMatrix> {
    let n = net.spec().num_classes;
    let parts = par_map(data, |seq| -> Result<ConfusionMatrix> {
        let pred = predict_future(net, seq, k)?;
        let mut cm = ConfusionMatrix::new(n);
        cm.accumulate(seq.annotated_label(), &pred)?;
        Ok(cm)
    });
    let mut total = ConfusionMatrix::new(n);
    for p in parts {
        total.merge(&p?)?;
    }
    Ok(total)
}

/// Steady-state mIoU over `data`.
pub fn abt_eval<T: Scalar>(
    net: &Network<T>,
    data: &[SequenceSample],
    cfg: &AbtConfig,
) -> Result<f64> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("no evaluation sequences".into()));
    }
    if let Some(s) = data.iter().find(|s| s.annotated_index < cfg.k) {
        return Err(Error::invalid(
            "k",
            format!(
                "sequence has only {} frames before its annotated frame, k = {}",
                s.annotated_index, cfg.k
            ),
        ));
    }
    let main = confusion_at(net, data, cfg.k)?.miou()?;
    if cfg.average_pair {
        let prev = confusion_at(net, data, cfg.k - 1)?.miou()?;
        Ok((main + prev) / 2.0)
    } else {
        Ok(main)
    }
}

/// Unpaired [`abt_eval`] for each `k` in `ks`.
pub fn abt_sweep<T: Scalar>(
    net: &Network<T>,
    data: &[SequenceSample],
    ks: impl IntoIterator<Item = usize>,
) -> Result<Vec<(usize, f64)>> {
    ks.into_iter()
        .map(|k| {
            let cfg = AbtConfig {
                k,
                average_pair: false,
            };
            abt_eval(net, data, &cfg).map(|m| (k, m))
        })
        .collect()
}

pub fn sweep_csv(rows: &[(usize, f64)]) -> String {
    let mut out = String::from("k,miou\n");
    for (k, m) in rows {
        out.push_str(&format!("{k},{m:.6}\n"));
    }
    out
}

/// Accumulates one prediction against ground truth; convenience for
/// callers holding logits.
pub fn accumulate_logits<T: Scalar>(
    cm: &mut ConfusionMatrix,
    logits: &Tensor<T>,
    gt: &LabelMap,
) -> Result<()> {
    let pred = LabelMap::argmax(logits, 0)?;
    cm.accumulate(gt, &pred)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(v: &[u8]) -> LabelMap {
        LabelMap::from_vec(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&map(&[0, 1, 2, 2]), &map(&[0, 1, 2, 2]))
            .unwrap();
        assert_eq!(cm.miou().unwrap(), 1.0);
    }

    #[test]
    fn hand_computed_two_class_case() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&map(&[0, 0, 1, 1]), &map(&[0, 1, 1, 1]))
            .unwrap();
        let ious = cm.ious();
        assert_eq!(ious, [Some(0.5), Some(2.0 / 3.0)]);
        assert!((cm.miou().unwrap() - 7.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn empty_and_absent_classes() {
        let mut cm = ConfusionMatrix::new(4);
        cm.accumulate(&map(&[IGNORE_LABEL, IGNORE_LABEL]), &map(&[0, 1]))
            .unwrap();
        assert!(cm.miou().is_err());
        cm.accumulate(&map(&[1, 1]), &map(&[1, 1])).unwrap();
        assert_eq!(cm.ious(), [None, Some(1.0), None, None]);
        assert_eq!(cm.miou().unwrap(), 1.0);
        assert!(cm.accumulate(&map(&[1]), &map(&[7])).is_err());
        assert!(cm.accumulate(&map(&[9]), &map(&[1])).is_err());
    }

    #[test]
    fn abt_config_validation() {
        assert!(AbtConfig {
            k: 0,
            average_pair: false
        }
        .validate()
        .is_err());
        assert!(AbtConfig {
            k: 1,
            average_pair: true
        }
        .validate()
        .is_err());
        assert!(AbtConfig {
            k: 2,
            average_pair: true
        }
        .validate()
        .is_ok());
    }

    proptest! {
        #[test]
        fn relabeling_and_ignore_invariance(
            pairs in prop::collection::vec((0u8..4, 0u8..4), 1..60),
            ignored in prop::collection::vec(0u8..4, 0..20),
            perm_seed in 0usize..24,
        ) {
            let gt: Vec<u8> = pairs.iter().map(|p| p.0).collect();
            let pred: Vec<u8> = pairs.iter().map(|p| p.1).collect();
            let mut cm = ConfusionMatrix::new(4);
            cm.accumulate(&map(&gt), &map(&pred)).unwrap();
            let base = cm.miou().unwrap();

            let mut perm = vec![0u8, 1, 2, 3];
            let mut s = perm_seed;
            for i in (1..4).rev() {
                perm.swap(i, s % (i + 1));
                s /= i + 1;
            }
            let mut pcm = ConfusionMatrix::new(4);
            let pg: Vec<u8> = gt.iter().map(|&g| perm[g as usize]).collect();
            let pp: Vec<u8> = pred.iter().map(|&p| perm[p as usize]).collect();
            pcm.accumulate(&map(&pg), &map(&pp)).unwrap();
            prop_assert!((pcm.miou().unwrap() - base).abs() < 1e-12);

            let mut icm = ConfusionMatrix::new(4);
            let mut ig = gt.clone();
            let mut ip = pred.clone();
            ig.extend(std::iter::repeat_n(IGNORE_LABEL, ignored.len()));
            ip.extend(ignored.iter().copied());
            icm.accumulate(&map(&ig), &map(&ip)).unwrap();
            prop_assert_eq!(icm.miou().unwrap(), base);
        }

        #[test]
        fn accumulation_is_order_independent(
            frames in prop::collection::vec(prop::collection::vec((0u8..3, 0u8..3), 1..20), 1..6),
        ) {
            let mut forward = ConfusionMatrix::new(3);
            let mut backward = ConfusionMatrix::new(3);
            let maps: Vec<(LabelMap, LabelMap)> = frames
                .iter()
                .map(|f| (map(&f.iter().map(|p| p.0).collect::<Vec<_>>()), map(&f.iter().map(|p| p.1).collect::<Vec<_>>())))
                .collect();
            for (g, p) in &maps {
                forward.accumulate(g, p).unwrap();
            }
            for (g, p) in maps.iter().rev() {
                let mut one = ConfusionMatrix::new(3);
                one.accumulate(g, p).unwrap();
                backward.merge(&one).unwrap();
            }
            prop_assert_eq!(forward, backward);
        }
    }
}
