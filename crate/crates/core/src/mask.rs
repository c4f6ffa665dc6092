//! Pre-defined schedules of contiguous, equal-width channel masks.
//!
//! A mask is a half-open channel range, so a scattered mask cannot be
//! expressed. Schedules are validated once at construction: every mask has
//! the same number of active channels and their union covers all channels.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Active output channels `[start, end)` out of `total`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ChannelMask {
    start: usize,
    end: usize,
    total: usize,
}

impl ChannelMask {
    pub fn new(start: usize, end: usize, total: usize) -> Result<Self> {
        if start >= end || end > total {
            return Err(Error::InvalidMask(format!(
                "[{start}, {end}) is not a non-empty range inside [0, {total})"
            )));
        }
        Ok(Self { start, end, total })
    }

    pub fn full(total: usize) -> Result<Self> {
        Self::new(0, total, total)
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn end(&self) -> usize {
        self.end
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn count(&self) -> usize {
        self.end - self.start
    }

    pub fn contains(&self, channel: usize) -> bool {
        (self.start..self.end).contains(&channel)
    }

    pub fn is_full(&self) -> bool {
        self.start == 0 && self.end == self.total
    }
}

#[derive(Serialize, Deserialize)]
struct RangeJson {
    start: usize,
    end: usize,
}

#[derive(Serialize, Deserialize)]
struct ScheduleJson {
    total: usize,
    rho: Option<f64>,
    masks: Vec<RangeJson>,
}

/// Ordered, finite list of masks cycled through by time-step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleJson", into = "ScheduleJson")]
pub struct MaskSchedule {
    total: usize,
    masks: Vec<ChannelMask>,
    rho: Option<f64>,
}

impl From<MaskSchedule> for ScheduleJson {
    fn from(s: MaskSchedule) -> Self {
        ScheduleJson {
            total: s.total,
            rho: s.rho,
            masks: s
                .masks
                .iter()
                .map(|m| RangeJson {
                    start: m.start,
                    end: m.end,
                })
                .collect(),
        }
    }
}

impl TryFrom<ScheduleJson> for MaskSchedule {
    type Error = Error;

    fn try_from(j: ScheduleJson) -> Result<Self> {
        let masks = j
            .masks
            .iter()
            .map(|r| ChannelMask::new(r.start, r.end, j.total))
            .collect::<Result<_>>()?;
        MaskSchedule::new(j.total, masks, j.rho)
    }
}

impl MaskSchedule {
    /// Validates equal counts, a shared total and full coverage.
    pub fn new(total: usize, masks: Vec<ChannelMask>, rho: Option<f64>) -> Result<Self> {
        let first = masks
            .first()
            .ok_or_else(|| Error::InvalidMask("schedule has no masks".into()))?;
        if let Some(m) = masks.iter().find(|m| m.total != total) {
            return Err(Error::InvalidMask(format!(
                "mask over {} channels in a schedule over {total}",
                m.total
            )));
        }
        if let Some(m) = masks.iter().find(|m| m.count() != first.count()) {
            return Err(Error::InvalidMask(format!(
                "unequal active counts {} and {}",
                first.count(),
                m.count()
            )));
        }
        if !covers(&masks, total) {
            return Err(Error::CoverageUnachievable(format!(
                "masks do not cover all {total} channels"
            )));
        }
        if let Some(r) = rho {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::invalid("rho", format!("{r} not in [0, 1]")));
            }
        }
        Ok(Self { total, masks, rho })
    }

    /// A single full mask: every step computes every channel.
    pub fn full(total: usize) -> Result<Self> {
        Self::new(total, vec![ChannelMask::full(total)?], Some(1.0))
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn masks(&self) -> &[ChannelMask] {
        &self.masks
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// Requested always-active ratio; `None` for random schedules.
    pub fn rho(&self) -> Option<f64> {
        self.rho
    }

    /// Active channels per step, identical for every mask.
    pub fn count(&self) -> usize {
        self.masks[0].count()
    }

    /// Channels active in every mask.
    pub fn overlap(&self) -> usize {
        let lo = self.masks.iter().map(|m| m.start).max().unwrap();
        let hi = self.masks.iter().map(|m| m.end).min().unwrap();
        hi.saturating_sub(lo)
    }

    /// Mask applied at step `t ≥ 1`; step 0 is the unmasked first pass.
    pub fn mask_for_step(&self, t: usize) -> Result<ChannelMask> {
        if t == 0 {
            return Err(Error::invalid(
                "t",
                "step 0 is the full pass and has no mask",
            ));
        }
        Ok(self.masks[(t - 1) % self.masks.len()])
    }

    /// `count / total`, the per-step share of the layer's MACs.
    pub fn flop_fraction(&self) -> f64 {
        self.count() as f64 / self.total as f64
    }

    /// Rows for the first `steps` time-steps, `#` active and `.` inactive.
    ///
    /// Wide layers are binned to at most 64 columns; `+` marks a partially
    /// active bin.
    pub fn ascii_diagram(&self, steps: usize) -> String {
        let cols = self.total.min(64);
        let per = self.total.div_ceil(cols);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "channels 0..{} ({} per column), {} active per step, {} always active",
            self.total,
            per,
            self.count(),
            self.overlap()
        );
        for t in 1..=steps {
            let m = self.masks[(t - 1) % self.masks.len()];
            let row: String = (0..self.total.div_ceil(per))
                .map(|b| {
                    let lo = b * per;
                    let hi = ((b + 1) * per).min(self.total);
                    let active = (lo..hi).filter(|&c| m.contains(c)).count();
                    match active {
                        0 => '.',
                        a if a == hi - lo => '#',
                        _ => '+',
                    }
                })
                .collect();
            let _ = writeln!(out, "t={t:<3} |{row}|  [{}, {})", m.start, m.end);
        }
        out
    }
}

fn covers(masks: &[ChannelMask], total: usize) -> bool {
    let mut hit = vec![false; total];
    for m in masks {
        hit[m.start..m.end].iter_mut().for_each(|h| *h = true);
    }
    hit.into_iter().all(|h| h)
}

/// Active count of a ρ-bi-step schedule: `ceil((1+ρ)/2 · C)`, clamped to
/// `[ceil(C/2), C]`.
///
/// The product is nudged down by 1e-9 before rounding up so that values
/// like `0.6 · 10` that land a few ulps above an integer are not bumped.
pub fn bistep_count(channels: usize, rho: f64) -> usize {
    let raw = ((1.0 + rho) / 2.0 * channels as f64 - 1e-9).ceil() as usize;
    raw.clamp(channels.div_ceil(2), channels)
}

/// ρ-bi-step generator: mask A is the first `count` channels, mask B the
/// last `count`. The `2·count − C` channels in the middle are always active.
pub fn bistep_generator(channels: usize, rho: f64) -> Result<MaskSchedule> {
    if channels < 2 {
        return Err(Error::invalid("channels", format!("{channels} < 2")));
    }
    if !(0.0..=1.0).contains(&rho) || rho.is_nan() {
        return Err(Error::invalid("rho", format!("{rho} not in [0, 1]")));
    }
    let count = bistep_count(channels, rho);
    let a = ChannelMask::new(0, count, channels)?;
    let b = ChannelMask::new(channels - count, channels, channels)?;
    MaskSchedule::new(channels, vec![a, b], Some(rho))
}

const MAX_COVERAGE_RETRIES: usize = 10_000;

/// Random contiguous generator: `n_masks` windows of `count` channels whose
/// starts are drawn with [`SplitMix64::below`]`(C − count + 1)`, in order.
/// Whole draws are repeated until the union covers every channel.
pub fn random_contiguous_generator(
    channels: usize,
    count: usize,
    n_masks: usize,
    seed: u64,
) -> Result<MaskSchedule> {
    if channels == 0 {
        return Err(Error::invalid("channels", "must be at least 1"));
    }
    if count == 0 || count > channels {
        return Err(Error::invalid(
            "count",
            format!("{count} not in [1, {channels}]"),
        ));
    }
    if n_masks == 0 {
        return Err(Error::invalid("n_masks", "must be at least 1"));
    }
    if count < channels && (n_masks == 1 || n_masks * count < channels) {
        return Err(Error::CoverageUnachievable(format!(
            "{n_masks} masks of {count} cannot cover {channels} channels"
        )));
    }
    let mut rng = SplitMix64::new(seed);
    let span = (channels - count + 1) as u64;
    for _ in 0..MAX_COVERAGE_RETRIES {
        let masks: Vec<ChannelMask> = (0..n_masks)
            .map(|_| {
                let s = rng.below(span) as usize;
                ChannelMask::new(s, s + count, channels)
            })
            .collect::<Result<_>>()?;
        if covers(&masks, channels) {
            return MaskSchedule::new(channels, masks, None);
        }
    }
    Err(Error::CoverageUnachievable(format!(
        "no covering draw after {MAX_COVERAGE_RETRIES} attempts"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ranges(s: &MaskSchedule) -> Vec<(usize, usize)> {
        s.masks().iter().map(|m| (m.start(), m.end())).collect()
    }

    #[test]
    fn bistep_reference_cases() {
        let s = bistep_generator(8, 0.0).unwrap();
        assert_eq!(ranges(&s), [(0, 4), (4, 8)]);
        assert_eq!(s.overlap(), 0);

        let s = bistep_generator(8, 1.0).unwrap();
        assert_eq!(ranges(&s), [(0, 8), (0, 8)]);

        let s = bistep_generator(8, 0.25).unwrap();
        assert_eq!(s.count(), 5);
        assert_eq!(ranges(&s), [(0, 5), (3, 8)]);
        assert_eq!(s.overlap(), 2);
    }

    #[test]
    fn odd_channels_round_up() {
        let s = bistep_generator(7, 0.0).unwrap();
        assert_eq!(ranges(&s), [(0, 4), (3, 7)]);
        assert_eq!(s.overlap(), 1);
        assert_eq!(s.rho(), Some(0.0));
    }

    #[test]
    fn bistep_errors() {
        assert!(bistep_generator(1, 0.5).is_err());
        assert!(bistep_generator(8, 1.5).is_err());
        assert!(bistep_generator(8, -0.1).is_err());
    }

    #[test]
    fn step_cycle() {
        let s = bistep_generator(8, 0.25).unwrap();
        let a = s.masks()[0];
        let b = s.masks()[1];
        assert_eq!(s.mask_for_step(1).unwrap(), a);
        assert_eq!(s.mask_for_step(2).unwrap(), b);
        assert_eq!(s.mask_for_step(3).unwrap(), a);
        assert!(s.mask_for_step(0).is_err());

        let single = MaskSchedule::full(6).unwrap();
        assert!((1..10).all(|t| single.mask_for_step(t).unwrap() == single.masks()[0]));
    }

    #[test]
    fn flop_fractions() {
        assert_eq!(bistep_generator(16, 0.0).unwrap().flop_fraction(), 0.5);
        assert_eq!(bistep_generator(8, 0.25).unwrap().flop_fraction(), 0.625);
        assert_eq!(bistep_generator(10, 1.0).unwrap().flop_fraction(), 1.0);
    }

    #[test]
    fn schedule_validation() {
        let a = ChannelMask::new(0, 3, 6).unwrap();
        let b = ChannelMask::new(2, 6, 6).unwrap();
        assert!(MaskSchedule::new(6, vec![a, b], None).is_err());
        let b = ChannelMask::new(2, 5, 6).unwrap();
        assert!(matches!(
            MaskSchedule::new(6, vec![a, b], None),
            Err(Error::CoverageUnachievable(_))
        ));
        assert!(ChannelMask::new(3, 3, 6).is_err());
        assert!(ChannelMask::new(0, 7, 6).is_err());
    }

    #[test]
    fn random_generator() {
        let s = random_contiguous_generator(8, 8, 3, 99).unwrap();
        assert!(s.masks().iter().all(|m| m.is_full()));

        let a = random_contiguous_generator(8, 5, 4, 1234).unwrap();
        let b = random_contiguous_generator(8, 5, 4, 1234).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        assert_eq!(a.rho(), None);

        let c = random_contiguous_generator(8, 5, 4, 4321).unwrap();
        assert_eq!(c.count(), 5);

        assert!(random_contiguous_generator(8, 9, 2, 0).is_err());
        assert!(matches!(
            random_contiguous_generator(8, 5, 1, 0),
            Err(Error::CoverageUnachievable(_))
        ));
    }

    #[test]
    fn json_shape() {
        let s = bistep_generator(8, 0.25).unwrap();
        let v = serde_json::to_value(&s).unwrap();
        assert_eq!(
            v,
            serde_json::json!({"total": 8, "rho": 0.25, "masks": [{"start": 0, "end": 5}, {"start": 3, "end": 8}]})
        );
        let back: MaskSchedule = serde_json::from_value(v).unwrap();
        assert_eq!(back, s);
        let bad = serde_json::json!({"total": 8, "rho": null, "masks": [{"start": 0, "end": 4}]});
        assert!(serde_json::from_value::<MaskSchedule>(bad).is_err());
    }

    #[test]
    fn diagram() {
        let d = bistep_generator(8, 0.25).unwrap().ascii_diagram(4);
        assert!(d.contains("t=1   |#####...|"), "{d}");
        assert!(d.contains("t=2   |...#####|"), "{d}");
        assert!(d.contains("t=3   |#####...|"), "{d}");
    }

    proptest! {
        #[test]
        fn random_schedules_keep_invariants(
            channels in 2usize..64,
            frac in 0.5f64..=1.0,
            n_masks in 2usize..6,
            seed in any::<u64>(),
        ) {
            let count = ((channels as f64 * frac).ceil() as usize).clamp(channels.div_ceil(2), channels);
            let s = random_contiguous_generator(channels, count, n_masks, seed).unwrap();
            prop_assert!(s.masks().iter().all(|m| m.count() == count));
            prop_assert!(covers(s.masks(), channels));
        }

        #[test]
        fn bistep_two_steps_cover(channels in 2usize..300, rho in 0.0f64..=1.0, t in 1usize..50) {
            let s = bistep_generator(channels, rho).unwrap();
            let a = s.mask_for_step(t).unwrap();
            let b = s.mask_for_step(t + 1).unwrap();
            prop_assert!(covers(&[a, b], channels));
            prop_assert_eq!(s.mask_for_step(t + 2).unwrap(), a);
            let overlap = 2 * s.count() - channels;
            prop_assert_eq!(overlap, s.overlap());
            prop_assert!(overlap as f64 >= (rho * channels as f64).floor());
        }
    }
}
