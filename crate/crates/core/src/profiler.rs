//! FLOP accounting and wall-clock latency measurement.
//!
//! FLOP convention: one multiply-accumulate is two FLOPs and every computed
//! conv output element adds one FLOP for its bias. Only convolutions are
//! counted; activations, pooling, upsampling and residual adds are not.
//!
//! Latencies are measured on the monotonic clock with a single compute
//! thread. Configurations are interleaved round by round, so slow drift of
//! the machine affects all of them alike.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cwm::interlace;
use crate::error::{Error, Result};
use crate::mask::{bistep_count, ChannelMask};
use crate::net::{Layer, LayerKind, Network, NetworkSpec};
use crate::ops::{conv2d, conv2d_masked, conv_output_len};
use crate::tensor::Tensor;

pub const FLOP_CONVENTION: &str =
    "FLOPs = 2 x MACs + 1 bias add per computed output element; conv layers only";

/// MACs of a convolution computing `cout_active` output channels.
pub fn conv_macs(
    ho: usize,
    wo: usize,
    cout_active: usize,
    cin: usize,
    kh: usize,
    kw: usize,
) -> u64 {
    (ho * wo) as u64 * (cout_active * cin * kh * kw) as u64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlopMode {
    /// Every conv computes all of its channels.
    Stateless,
    /// A masked step `t ≥ 1`: masked convs compute their active channels.
    CwmStep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerFlops {
    pub layer: String,
    pub masked: bool,
    pub in_channels: usize,
    pub out_channels: usize,
    pub active_channels: usize,
    pub kernel: usize,
    pub out_height: usize,
    pub out_width: usize,
    pub macs: u64,
    pub bias_adds: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    pub convention: String,
    pub mode: FlopMode,
    pub height: usize,
    pub width: usize,
    pub layers: Vec<LayerFlops>,
    pub total_macs: u64,
    pub total_flops: u64,
}

impl FlopReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# {}\nlayer,masked,in,out,active,kernel,out_h,out_w,macs,flops\n",
            self.convention
        );
        for l in &self.layers {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                l.layer,
                l.masked,
                l.in_channels,
                l.out_channels,
                l.active_channels,
                l.kernel,
                l.out_height,
                l.out_width,
                l.macs,
                l.flops
            ));
        }
        out.push_str(&format!(
            "total,,,,,,,,{},{}\n",
            self.total_macs, self.total_flops
        ));
        out
    }

    pub fn layer(&self, name: &str) -> Option<&LayerFlops> {
        self.layers.iter().find(|l| l.layer == name)
    }
}

/// Output `(channels, height, width)` of every layer for an `h × w` input.
pub fn layer_shapes(
    spec: &NetworkSpec,
    (h, w): (usize, usize),
) -> Result<Vec<(usize, usize, usize)>> {
    spec.validate()?;
    let mut shapes: Vec<(usize, usize, usize)> = Vec::with_capacity(spec.layers.len());
    for (i, l) in spec.layers.iter().enumerate() {
        let src = match &l.input {
            Some(name) if name == crate::net::INPUT => (spec.input_channels, h, w),
            Some(name) => {
                let j = spec.layers[..i]
                    .iter()
                    .position(|p| &p.name == name)
                    .expect("validated");
                shapes[j]
            }
            None if i == 0 => (spec.input_channels, h, w),
            None => shapes[i - 1],
        };
        let (c, sh, sw) = src;
        let shape = match l.kind {
            LayerKind::Conv | LayerKind::CwmConv => {
                let cs = l.conv.as_ref().expect("validated");
                (
                    cs.out_channels,
                    conv_output_len(sh, cs.kernel, cs.stride, cs.padding)?,
                    conv_output_len(sw, cs.kernel, cs.stride, cs.padding)?,
                )
            }
            LayerKind::Maxpool => {
                if sh % 2 != 0 || sw % 2 != 0 {
                    return Err(Error::NonIntegralOutput {
                        op: "maxpool2x2",
                        detail: format!("layer `{}` gets {sh}×{sw}", l.name),
                    });
                }
                (c, sh / 2, sw / 2)
            }
            LayerKind::Upsample => (c, sh * 2, sw * 2),
            LayerKind::Relu | LayerKind::ResidualAdd => (c, sh, sw),
        };
        shapes.push(shape);
    }
    Ok(shapes)
}

fn count_with(
    spec: &NetworkSpec,
    hw: (usize, usize),
    mode: FlopMode,
    mut active: impl FnMut(usize, usize) -> Result<Option<usize>>,
) -> Result<FlopReport> {
    let shapes = layer_shapes(spec, hw)?;
    let mut layers = Vec::new();
    for (i, l, c) in spec.conv_layers() {
        let (_, ho, wo) = shapes[i];
        let masked_count = match (mode, l.kind) {
            (FlopMode::CwmStep, LayerKind::CwmConv) => active(i, c.out_channels)?,
            _ => None,
        };
        let count = masked_count.unwrap_or(c.out_channels);
        let macs = conv_macs(ho, wo, count, c.in_channels, c.kernel, c.kernel);
        let bias_adds = (ho * wo * count) as u64;
        layers.push(LayerFlops {
            layer: l.name.clone(),
            masked: masked_count.is_some(),
            in_channels: c.in_channels,
            out_channels: c.out_channels,
            active_channels: count,
            kernel: c.kernel,
            out_height: ho,
            out_width: wo,
            macs,
            bias_adds,
            flops: 2 * macs + bias_adds,
        });
    }
    Ok(FlopReport {
        convention: FLOP_CONVENTION.into(),
        mode,
        height: hw.0,
        width: hw.1,
        total_macs: layers.iter().map(|l| l.macs).sum(),
        total_flops: layers.iter().map(|l| l.flops).sum(),
        layers,
    })
}

/// Exact conv FLOPs of `spec` on an `h × w` input. Masked layers use the
/// ρ-bi-step active count of the spec.
pub fn count_flops(spec: &NetworkSpec, hw: (usize, usize), mode: FlopMode) -> Result<FlopReport> {
    count_with(spec, hw, mode, |_, channels| match spec.rho {
        Some(rho) => Ok(Some(bistep_count(channels, rho))),
        None => Err(Error::InvalidSpec("masked layer without rho".into())),
    })
}

/// Like [`count_flops`], reading the active counts from the network's own
/// schedules.
pub fn count_network_flops<T: crate::Scalar>(
    net: &Network<T>,
    hw: (usize, usize),
    mode: FlopMode,
) -> Result<FlopReport> {
    count_with(net.spec(), hw, mode, |i, _| match &net.layers()[i] {
        Layer::Cwm(l) => Ok(Some(l.schedule().count())),
        _ => Ok(None),
    })
}

/// Stateless and per-step CWM counts side by side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopComparison {
    pub stateless: FlopReport,
    pub cwm_step: FlopReport,
    /// `(layer, cwm_step / stateless)` for every conv.
    pub layer_ratios: Vec<(String, f64)>,
    pub total_ratio: f64,
}

impl FlopComparison {
    pub fn new(stateless: FlopReport, cwm_step: FlopReport) -> Self {
        let layer_ratios = stateless
            .layers
            .iter()
            .zip(&cwm_step.layers)
            .map(|(a, b)| (a.layer.clone(), b.flops as f64 / a.flops as f64))
            .collect();
        let total_ratio = cwm_step.total_flops as f64 / stateless.total_flops as f64;
        Self {
            stateless,
            cwm_step,
            layer_ratios,
            total_ratio,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# {}\nlayer,masked,active,out,stateless_macs,stateless_flops,cwm_macs,cwm_flops,ratio\n",
            self.stateless.convention
        );
        for ((a, b), (_, r)) in self
            .stateless
            .layers
            .iter()
            .zip(&self.cwm_step.layers)
            .zip(&self.layer_ratios)
        {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{:.6}\n",
                a.layer,
                b.masked,
                b.active_channels,
                a.out_channels,
                a.macs,
                a.flops,
                b.macs,
                b.flops,
                r
            ));
        }
        out.push_str(&format!(
            "total,,,,{},{},{},{},{:.6}\n",
            self.stateless.total_macs,
            self.stateless.total_flops,
            self.cwm_step.total_macs,
            self.cwm_step.total_flops,
            self.total_ratio
        ));
        out
    }
}

pub fn compare_flops(spec: &NetworkSpec, hw: (usize, usize)) -> Result<FlopComparison> {
    Ok(FlopComparison::new(
        count_flops(spec, hw, FlopMode::Stateless)?,
        count_flops(spec, hw, FlopMode::CwmStep)?,
    ))
}

pub fn compare_network_flops<T: crate::Scalar>(
    net: &Network<T>,
    hw: (usize, usize),
) -> Result<FlopComparison> {
    Ok(FlopComparison::new(
        count_network_flops(net, hw, FlopMode::Stateless)?,
        count_network_flops(net, hw, FlopMode::CwmStep)?,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimingParams {
    pub warmup: usize,
    pub iters: usize,
}

impl Default for TimingParams {
    fn default() -> Self {
        Self {
            warmup: 5,
            iters: 30,
        }
    }
}

impl TimingParams {
    pub fn validate(&self) -> Result<()> {
        if self.warmup < 5 {
            return Err(Error::invalid("warmup", format!("{} < 5", self.warmup)));
        }
        if self.iters < 30 {
            return Err(Error::invalid("iters", format!("{} < 30", self.iters)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub label: String,
    pub warmup: usize,
    pub iters: usize,
    pub median_us: f64,
    pub p10_us: f64,
    pub p90_us: f64,
    pub min_us: f64,
    pub mean_us: f64,
}

impl LatencyStats {
    pub fn from_samples(label: &str, warmup: usize, samples_us: &[f64]) -> Result<Self> {
        if samples_us.is_empty() {
            return Err(Error::Empty(format!("no samples for `{label}`")));
        }
        let mut sorted = samples_us.to_vec();
        sorted.sort_by(f64::total_cmp);
        Ok(Self {
            label: label.into(),
            warmup,
            iters: sorted.len(),
            median_us: quantile(&sorted, 0.5),
            p10_us: quantile(&sorted, 0.1),
            p90_us: quantile(&sorted, 0.9),
            min_us: sorted[0],
            mean_us: sorted.iter().sum::<f64>() / sorted.len() as f64,
        })
    }
}

/// Linear-interpolated quantile of sorted samples.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvNote {
    pub cpu: String,
    pub compute_threads: usize,
    pub os: String,
    pub arch: String,
    pub clock: String,
}

impl EnvNote {
    pub fn current() -> Self {
        let cpu = std::fs::read_to_string("/proc/cpuinfo")
            .ok()
            .and_then(|s| {
                s.lines()
                    .find(|l| l.starts_with("model name"))
                    .and_then(|l| l.split(':').nth(1))
                    .map(|m| m.trim().to_string())
            })
            .unwrap_or_else(|| "unknown".into());
        Self {
            cpu,
            compute_threads: 1,
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            clock: "monotonic (std::time::Instant)".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub env: EnvNote,
    pub entries: Vec<LatencyStats>,
}

impl LatencyReport {
    pub fn get(&self, label: &str) -> Option<&LatencyStats> {
        self.entries.iter().find(|e| e.label == label)
    }

    /// `median(a) / median(b)`.
    pub fn median_ratio(&self, a: &str, b: &str) -> Option<f64> {
        Some(self.get(a)?.median_us / self.get(b)?.median_us)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# cpu: {}; compute threads: {}; clock: {}\nlabel,warmup,iters,median_us,p10_us,p90_us,min_us,mean_us\n",
            self.env.cpu, self.env.compute_threads, self.env.clock
        );
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{:.3},{:.3},{:.3},{:.3},{:.3}\n",
                e.label, e.warmup, e.iters, e.median_us, e.p10_us, e.p90_us, e.min_us, e.mean_us
            ));
        }
        out
    }
}

type Case<'a> = (&'a str, Box<dyn FnMut() -> Result<()> + 'a>);

/// Times every case once per round, rotating the starting case.
pub fn measure_interleaved(
    params: &TimingParams,
    cases: &mut [Case<'_>],
) -> Result<Vec<LatencyStats>> {
    params.validate()?;
    for _ in 0..params.warmup {
        for (_, f) in cases.iter_mut() {
            f()?;
        }
    }
    let n = cases.len();
    let mut samples = vec![Vec::with_capacity(params.iters); n];
    for round in 0..params.iters {
        for k in 0..n {
            let idx = (round + k) % n;
            let start = Instant::now();
            (cases[idx].1)()?;
            let ns = start.elapsed().as_nanos();
            if ns == 0 {
                return Err(Error::DegenerateTiming(format!(
                    "`{}` took zero time on the monotonic clock",
                    cases[idx].0
                )));
            }
            samples[idx].push(ns as f64 / 1e3);
        }
    }
    cases
        .iter()
        .zip(&samples)
        .map(|((label, _), s)| LatencyStats::from_samples(label, params.warmup, s))
        .collect()
}

/// One conv layer for [`bench_layer`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerBench {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    /// Output channels computed by the masked variants.
    pub active: usize,
    pub seed: u64,
}

impl LayerBench {
    pub fn validate(&self) -> Result<()> {
        if self.active == 0 || self.active > self.out_channels {
            return Err(Error::invalid(
                "active",
                format!("{} not in [1, {}]", self.active, self.out_channels),
            ));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::invalid("kernel", "must be odd"));
        }
        Ok(())
    }

    /// Evenly spread channel indices: `⌊k·C / active⌋`.
    pub fn scattered_channels(&self) -> Vec<usize> {
        (0..self.active)
            .map(|k| k * self.out_channels / self.active)
            .collect()
    }
}

/// Masked convolution over arbitrary channel indices: the selected kernel
/// rows are gathered, convolved, scattered into a full-size buffer and
/// merged with `cached` by a per-element channel select.
pub fn scattered_masked_conv(
    input: &Tensor<f32>,
    kernel: &Tensor<f32>,
    bias: Option<&Tensor<f32>>,
    channels: &[usize],
    cached: &Tensor<f32>,
    padding: usize,
) -> Result<Tensor<f32>> {
    let (n, c, h, w) = cached.dims4("scattered_masked_conv")?;
    let cout = kernel.shape()[0];
    if c != cout || channels.iter().any(|&k| k >= cout) {
        return Err(Error::shape(
            "scattered_masked_conv",
            "channel index or cache mismatch",
        ));
    }
    let row = kernel.numel() / cout;
    let mut rows = Vec::with_capacity(channels.len() * row);
    for &k in channels {
        rows.extend_from_slice(&kernel.data()[k * row..(k + 1) * row]);
    }
    let mut shape = kernel.shape().to_vec();
    shape[0] = channels.len();
    let rows = Tensor::from_vec(shape, rows)?;
    let bias_rows = bias
        .map(|b| {
            Tensor::from_vec(
                vec![channels.len()],
                channels.iter().map(|&k| b.data()[k]).collect(),
            )
        })
        .transpose()?;
    let fresh = conv2d(input, &rows, bias_rows.as_ref(), 1, padding)?;

    let plane = h * w;
    let mut selected = vec![false; c];
    let mut scattered = vec![0f32; n * c * plane];
    for b in 0..n {
        for (slot, &k) in channels.iter().enumerate() {
            let src = (b * channels.len() + slot) * plane;
            let dst = (b * c + k) * plane;
            scattered[dst..dst + plane].copy_from_slice(&fresh.data()[src..src + plane]);
            selected[k] = true;
        }
    }
    let out = cached
        .data()
        .iter()
        .zip(&scattered)
        .enumerate()
        .map(|(e, (&old, &new))| if selected[(e / plane) % c] { new } else { old })
        .collect();
    Tensor::from_vec(cached.shape().to_vec(), out)
}

/// Times (a) the full conv, (b) a contiguous mask of `active` channels plus
/// interlace and (c) an evenly scattered mask of the same size.
pub fn bench_layer(cfg: &LayerBench, params: &TimingParams) -> Result<LatencyReport> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let input = Tensor::<f32>::uniform(
        &[1, cfg.in_channels, cfg.height, cfg.width],
        -1.0,
        1.0,
        &mut rng,
    );
    let k = cfg.kernel;
    let kernel = Tensor::<f32>::uniform(
        &[cfg.out_channels, cfg.in_channels, k, k],
        -0.1,
        0.1,
        &mut rng,
    );
    let bias = Tensor::<f32>::uniform(&[cfg.out_channels], -0.1, 0.1, &mut rng);
    let pad = k / 2;
    let cached = conv2d(&input, &kernel, Some(&bias), 1, pad)?;
    let mask = ChannelMask::new(0, cfg.active, cfg.out_channels)?;
    let channels = cfg.scattered_channels();

    let mut cases: Vec<Case> = vec![
        (
            "full",
            Box::new(|| conv2d(&input, &kernel, Some(&bias), 1, pad).map(drop)),
        ),
        (
            "contiguous",
            Box::new(|| {
                let fresh = conv2d_masked(&input, &kernel, Some(&bias), &mask, 1, pad)?;
                interlace(&cached, &fresh, &mask).map(drop)
            }),
        ),
        (
            "scattered",
            Box::new(|| {
                scattered_masked_conv(&input, &kernel, Some(&bias), &channels, &cached, pad)
                    .map(drop)
            }),
        ),
    ];
    let entries = measure_interleaved(params, &mut cases)?;
    Ok(LatencyReport {
        env: EnvNote::current(),
        entries,
    })
}

/// Per-frame latency of `net` streamed as a CWM network versus the same
/// weights run statelessly, on `h × w` frames. The CWM session's first
/// (full) frame is not timed.
pub fn bench_network(
    net: &Network<f32>,
    (h, w): (usize, usize),
    params: &TimingParams,
    seed: u64,
) -> Result<LatencyReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames: Vec<Tensor<f32>> = (0..4)
        .map(|_| Tensor::uniform(&[1, net.spec().input_channels, h, w], 0.0, 1.0, &mut rng))
        .collect();
    let plain = net.to_stateless();
    let mut session = net.session();
    session.forward(&frames[0])?;
    let mut i = 0;
    let mut j = 0;
    let mut cases: Vec<Case> = vec![
        (
            "stateless",
            Box::new(|| {
                i += 1;
                plain.forward_stateless(&frames[i % frames.len()]).map(drop)
            }),
        ),
        (
            "cwm",
            Box::new(|| {
                j += 1;
                session.forward(&frames[j % frames.len()]).map(drop)
            }),
        ),
    ];
    let entries = measure_interleaved(params, &mut cases)?;
    Ok(LatencyReport {
        env: EnvNote::current(),
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{toynet_spec, ToyNetConfig};

    fn spec(rho: Option<f64>, alpha: f64) -> NetworkSpec {
        toynet_spec(&ToyNetConfig {
            num_classes: 5,
            base_width: 16,
            alpha,
            rho,
            overrides: Default::default(),
        })
        .unwrap()
    }

    #[test]
    fn hand_counted_layer() {
        let macs = conv_macs(32, 32, 32, 16, 3, 3);
        assert_eq!(macs, 4_718_592);
        assert_eq!(2 * macs, 9_437_184);
        assert_eq!(conv_macs(32, 32, 16, 16, 3, 3), 2_359_296);
    }

    #[test]
    fn per_layer_ratio_is_the_mask_fraction() {
        for rho in [0.0, 0.25, 0.5, 0.9, 1.0] {
            let s = spec(Some(rho), 1.0);
            let full = count_flops(&s, (32, 32), FlopMode::Stateless).unwrap();
            let step = count_flops(&s, (32, 32), FlopMode::CwmStep).unwrap();
            for (a, b) in full.layers.iter().zip(&step.layers) {
                if b.masked {
                    let count = bistep_count(a.out_channels, rho) as u64;
                    assert_eq!(b.macs * a.out_channels as u64, a.macs * count);
                    assert_eq!(b.flops * a.out_channels as u64, a.flops * count);
                } else {
                    assert_eq!(a, b);
                }
            }
            assert!(step.total_flops <= full.total_flops);
            assert_eq!(step.total_flops == full.total_flops, rho == 1.0);
        }
    }

    #[test]
    fn totals_are_additive_and_stateless_ignores_masks() {
        let s = spec(Some(0.0), 1.0);
        let r = count_flops(&s, (64, 64), FlopMode::Stateless).unwrap();
        assert_eq!(r.total_macs, r.layers.iter().map(|l| l.macs).sum::<u64>());
        assert_eq!(
            r,
            count_flops(&spec(None, 1.0), (64, 64), FlopMode::Stateless).unwrap()
        );
        let stem = r.layer("stem").unwrap();
        assert_eq!(stem.macs, conv_macs(64, 64, 16, 3, 3, 3));
        let b3 = r.layer("b3_conv1").unwrap();
        assert_eq!((b3.out_height, b3.out_width), (32, 32));
        assert!(count_flops(&s, (31, 31), FlopMode::Stateless).is_err());
    }

    #[test]
    fn network_count_matches_spec_count() {
        let s = spec(Some(0.25), 0.65);
        let net = Network::<f32>::init(s.clone(), 1).unwrap();
        for mode in [FlopMode::Stateless, FlopMode::CwmStep] {
            assert_eq!(
                count_network_flops(&net, (32, 32), mode).unwrap(),
                count_flops(&s, (32, 32), mode).unwrap()
            );
        }
    }

    #[test]
    fn comparison_ratios() {
        let s = spec(Some(0.0), 0.8);
        let c = compare_flops(&s, (32, 32)).unwrap();
        for ((name, r), l) in c.layer_ratios.iter().zip(&c.cwm_step.layers) {
            let expected = if l.masked {
                l.active_channels as f64 / l.out_channels as f64
            } else {
                1.0
            };
            assert_eq!(*r, expected, "{name}");
        }
        assert!(c.total_ratio < 1.0);
        assert_eq!(c.to_csv().lines().count(), 2 + c.layer_ratios.len() + 1);
        let plain = compare_flops(&spec(None, 0.8), (32, 32)).unwrap();
        assert_eq!(plain.total_ratio, 1.0);
        let net = Network::<f32>::init(s, 0).unwrap();
        for layer in net.layers() {
            if let Layer::Cwm(l) = layer {
                let counts: Vec<usize> = (1..6)
                    .map(|t| l.schedule().mask_for_step(t).unwrap().count())
                    .collect();
                assert!(counts.iter().all(|&n| n == counts[0]));
            }
        }
    }

    #[test]
    fn quantiles() {
        let s: Vec<f64> = (1..=11).map(f64::from).collect();
        assert_eq!(quantile(&s, 0.5), 6.0);
        assert_eq!(quantile(&s, 0.1), 2.0);
        assert_eq!(quantile(&[1.0, 2.0], 0.5), 1.5);
        let st = LatencyStats::from_samples("x", 5, &[3.0, 1.0, 2.0]).unwrap();
        assert_eq!((st.median_us, st.min_us, st.iters), (2.0, 1.0, 3));
    }

    #[test]
    fn scattered_conv_matches_selection() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = Tensor::<f32>::uniform(&[1, 3, 6, 6], -1.0, 1.0, &mut rng);
        let kernel = Tensor::<f32>::uniform(&[6, 3, 3, 3], -1.0, 1.0, &mut rng);
        let cached = Tensor::<f32>::uniform(&[1, 6, 6, 6], -1.0, 1.0, &mut rng);
        let full = conv2d(&input, &kernel, None, 1, 1).unwrap();
        let out = scattered_masked_conv(&input, &kernel, None, &[1, 4], &cached, 1).unwrap();
        for ch in 0..6 {
            let got = out.slice_channels(ch, ch + 1).unwrap();
            let want = if ch == 1 || ch == 4 { &full } else { &cached }
                .slice_channels(ch, ch + 1)
                .unwrap();
            assert!(got.bit_eq(&want));
        }
    }

    #[test]
    fn timing_params_and_small_bench() {
        assert!(TimingParams {
            warmup: 4,
            iters: 30
        }
        .validate()
        .is_err());
        assert!(TimingParams {
            warmup: 5,
            iters: 29
        }
        .validate()
        .is_err());
        let cfg = LayerBench {
            in_channels: 4,
            out_channels: 8,
            height: 8,
            width: 8,
            kernel: 3,
            active: 4,
            seed: 1,
        };
        assert_eq!(cfg.scattered_channels(), [0, 2, 4, 6]);
        let r = bench_layer(&cfg, &TimingParams::default()).unwrap();
        for label in ["full", "contiguous", "scattered"] {
            let e = r.get(label).unwrap();
            assert_eq!(e.iters, 30);
            assert!(e.p10_us <= e.median_us && e.median_us <= e.p90_us);
        }
        assert!(r.to_csv().lines().count() == 5);
    }
}
