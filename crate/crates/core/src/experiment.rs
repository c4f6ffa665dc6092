//! The accuracy / cost trade-off experiment: a stateless baseline and two
//! bi-step families trained across a sweep of width multipliers.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{abt_eval, AbtConfig};
use crate::net::{build_toynet, save_weights, EligibilityOverrides, ToyNetConfig};
use crate::profiler::{bench_network, count_network_flops, FlopMode, TimingParams};
use crate::synth::{SynthConfig, SynthDataset, ANNOTATED_INDEX};
use crate::train::{train, TrainConfig};

pub const REPRODUCE_HEADER: &str =
    "model,alpha,rho,per_step_flops,params,median_latency_us,miou_abt";

/// A model family: `rho = None` is the stateless baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Family {
    pub name: String,
    pub rho: Option<f64>,
}

impl Family {
    pub fn baseline() -> Self {
        Self {
            name: "baseline".into(),
            rho: None,
        }
    }

    pub fn bistep(rho: f64) -> Self {
        Self {
            name: format!("{rho}-BG"),
            rho: Some(rho),
        }
    }
}

/// Network construction parameters of a single run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkParams {
    pub base_width: usize,
    pub alpha: f64,
    /// `None` builds the stateless network.
    pub rho: Option<f64>,
    /// Seeds weight initialization.
    pub init_seed: u64,
}

impl Default for NetworkParams {
    fn default() -> Self {
        Self {
            base_width: 32,
            alpha: 1.0,
            rho: Some(0.25),
            init_seed: 3,
        }
    }
}

/// The model grid of [`reproduce`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub alphas: Vec<f64>,
    pub families: Vec<Family>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            alphas: vec![0.5, 0.65, 0.8, 1.0],
            families: vec![
                Family::baseline(),
                Family::bistep(0.0),
                Family::bistep(0.25),
            ],
        }
    }
}

/// Every setting of a run. `reproduce` takes alpha and rho from `sweep`
/// instead of `network`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: SynthConfig,
    pub network: NetworkParams,
    pub train: TrainConfig,
    pub abt: AbtConfig,
    pub timing: TimingParams,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    /// 64×64 frames, base width 32.
    fn default() -> Self {
        Self {
            data: SynthConfig {
                train_count: 400,
                val_count: 100,
                seed: 1,
                ..Default::default()
            },
            network: NetworkParams::default(),
            train: TrainConfig {
                lr: 0.003,
                epochs: 30,
                bptt: true,
                ..Default::default()
            },
            abt: AbtConfig {
                k: 19,
                average_pair: true,
            },
            timing: TimingParams::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl RunConfig {
    /// 32×32 frames, base width 16, 200 training sequences.
    pub fn quick() -> Self {
        let mut cfg = Self::default();
        cfg.data = SynthConfig {
            height: 32,
            width: 32,
            min_size: 3,
            max_size: 5,
            train_count: 200,
            val_count: 100,
            seed: 1,
            ..Default::default()
        };
        cfg.network.base_width = 16;
        cfg.train.epochs = 10;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        self.abt.validate()?;
        self.timing.validate()?;
        let alphas = self.sweep.alphas.iter().chain([&self.network.alpha]);
        if let Some(a) = alphas.into_iter().find(|a| !(**a > 0.0 && **a <= 1.0)) {
            return Err(Error::invalid("alpha", format!("{a} not in (0, 1]")));
        }
        let rhos = self
            .sweep
            .families
            .iter()
            .map(|f| f.rho)
            .chain([self.network.rho]);
        if let Some(r) = rhos.flatten().find(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::invalid("rho", format!("{r} not in [0, 1]")));
        }
        if self.abt.k > ANNOTATED_INDEX || self.train.j > ANNOTATED_INDEX {
            return Err(Error::invalid(
                "k",
                format!("k and j must be ≤ {ANNOTATED_INDEX}"),
            ));
        }
        Ok(())
    }

    /// The configured single network.
    pub fn toynet(&self) -> ToyNetConfig {
        self.toynet_for(self.network.rho, self.network.alpha)
    }

    pub fn toynet_for(&self, rho: Option<f64>, alpha: f64) -> ToyNetConfig {
        ToyNetConfig {
            num_classes: self.data.num_classes,
            base_width: self.network.base_width,
            alpha,
            rho,
            overrides: EligibilityOverrides::default(),
        }
    }
}

/// One row of the trade-off table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReproduceRow {
    pub model: String,
    pub alpha: f64,
    /// 1 for the stateless baseline.
    pub rho: f64,
    pub per_step_flops: u64,
    pub params: usize,
    pub median_latency_us: f64,
    pub miou_abt: f64,
}

pub fn reproduce_csv(rows: &[ReproduceRow]) -> String {
    let mut out = format!("{REPRODUCE_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{:.3},{:.6}\n",
            r.model, r.alpha, r.rho, r.per_step_flops, r.params, r.median_latency_us, r.miou_abt
        ));
    }
    out
}

/// Trains, evaluates and profiles every (family, α) pair. With `out_dir`,
/// each model's weights and learning curve go to `out_dir/<model>_a<α>/`
/// and the table to `out_dir/reproduce.csv`.
pub fn reproduce(
    cfg: &RunConfig,
    data: &SynthDataset,
    out_dir: Option<&Path>,
    mut log: impl FnMut(&str),
) -> Result<Vec<ReproduceRow>> {
    cfg.validate()?;
    if cfg.sweep.alphas.is_empty() || cfg.sweep.families.is_empty() {
        return Err(Error::invalid(
            "sweep",
            "need at least one alpha and one family",
        ));
    }
    let hw = (cfg.data.height, cfg.data.width);
    let mut rows = Vec::new();
    for family in &cfg.sweep.families {
        for &alpha in &cfg.sweep.alphas {
            let tag = format!("{}_a{alpha}", family.name);
            let mut net =
                build_toynet::<f32>(&cfg.toynet_for(family.rho, alpha), cfg.network.init_seed)?;
            let report = train(&mut net, &data.train, &data.val, &cfg.train, None, |e| {
                log(&format!(
                    "{tag} epoch {} loss {:.4} ({:.1}s)",
                    e.epoch, e.loss, e.seconds
                ))
            })?;
            let miou = abt_eval(&net, &data.val, &cfg.abt)?;
            let mode = if family.rho.is_some() {
                FlopMode::CwmStep
            } else {
                FlopMode::Stateless
            };
            let flops = count_network_flops(&net, hw, mode)?;
            let latency = bench_network(&net, hw, &cfg.timing, cfg.network.init_seed)?;
            let label = if family.rho.is_some() {
                "cwm"
            } else {
                "stateless"
            };
            let row = ReproduceRow {
                model: family.name.clone(),
                alpha,
                rho: family.rho.unwrap_or(1.0),
                per_step_flops: flops.total_flops,
                params: net.num_params(),
                median_latency_us: latency.get(label).map_or(f64::NAN, |s| s.median_us),
                miou_abt: miou,
            };
            log(&format!(
                "{tag} miou {:.4} flops {}",
                row.miou_abt, row.per_step_flops
            ));
            if let Some(dir) = out_dir {
                let model_dir = dir.join(&tag);
                save_weights(&net, model_dir.join("weights"))?;
                fs::write(model_dir.join("train.csv"), report.to_csv())?;
                fs::write(
                    model_dir.join("train.json"),
                    serde_json::to_string_pretty(&report)?,
                )?;
            }
            rows.push(row);
        }
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("reproduce.csv"), reproduce_csv(&rows))?;
    }
    Ok(rows)
}

/// Directional checks on a trade-off table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffCheck {
    /// `(family, holds)`: mIoU non-increasing as per-step FLOPs decrease.
    pub monotone: Vec<(String, bool)>,
    /// Un-slimmed `candidate` mIoU minus un-slimmed baseline mIoU.
    pub gap_to_baseline: Option<f64>,
    pub fewer_flops: Option<bool>,
}

pub fn check_tradeoff(rows: &[ReproduceRow], baseline: &str, candidate: &str) -> TradeoffCheck {
    let mut families: Vec<&str> = Vec::new();
    for r in rows {
        if !families.contains(&r.model.as_str()) {
            families.push(&r.model);
        }
    }
    let monotone = families
        .iter()
        .map(|f| {
            let mut pts: Vec<(u64, f64)> = rows
                .iter()
                .filter(|r| r.model == *f)
                .map(|r| (r.per_step_flops, r.miou_abt))
                .collect();
            pts.sort_by_key(|p| p.0);
            (f.to_string(), pts.windows(2).all(|w| w[0].1 <= w[1].1))
        })
        .collect();
    let full = |m: &str| rows.iter().find(|r| r.model == m && r.alpha == 1.0);
    let (gap, fewer) = match (full(baseline), full(candidate)) {
        (Some(b), Some(c)) => (
            Some(c.miou_abt - b.miou_abt),
            Some(c.per_step_flops < b.per_step_flops),
        ),
        _ => (None, None),
    };
    TradeoffCheck {
        monotone,
        gap_to_baseline: gap,
        fewer_flops: fewer,
    }
}
