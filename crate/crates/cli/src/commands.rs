use std::path::Path;

use anyhow::Context;
use cwm_core::bistep_generator;
use cwm_core::experiment::{check_tradeoff, reproduce as run_grid, reproduce_csv, RunConfig};
use cwm_core::metrics::{abt_eval, abt_sweep, sweep_csv, AbtConfig};
use cwm_core::net::{build_toynet, load_network, save_weights, Network};
use cwm_core::profiler::{bench_layer, bench_network, compare_network_flops, LayerBench};
use cwm_core::synth::{self, SynthDataset};
use cwm_core::train::train as train_net;

use crate::config::{self, load_layered, write_provenance};
use crate::{
    BenchArgs, DataFlags, EvalArgs, Failure, FlopsArgs, GenDataArgs, MasksArgs, NetFlags,
    ReproduceArgs, TimingFlags, TrainArgs, TrainFlags,
};

type Outcome = Result<(), Failure>;

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn apply_data(cfg: &mut RunConfig, f: &DataFlags) {
    let d = &mut cfg.data;
    set(&mut d.height, f.height);
    set(&mut d.width, f.width);
    set(&mut d.num_classes, f.classes);
    set(&mut d.train_count, f.train_count);
    set(&mut d.val_count, f.val_count);
    set(&mut d.seed, f.data_seed);
    set(&mut d.noise, f.noise);
    set(&mut d.max_speed, f.max_speed);
}

fn apply_net(cfg: &mut RunConfig, f: &NetFlags) {
    let n = &mut cfg.network;
    set(&mut n.base_width, f.base_width);
    set(&mut n.alpha, f.alpha);
    set(&mut n.rho, f.rho.map(|r| r.0));
    set(&mut n.init_seed, f.init_seed);
}

fn apply_train(cfg: &mut RunConfig, f: &TrainFlags) {
    let t = &mut cfg.train;
    set(&mut t.epochs, f.epochs);
    set(&mut t.lr, f.lr);
    set(&mut t.momentum, f.momentum);
    set(&mut t.weight_decay, f.weight_decay);
    set(&mut t.j, f.j);
    set(&mut t.sequences_per_sample, f.sequences_per_sample);
    set(&mut t.seed, f.train_seed);
    set(&mut t.bptt, f.bptt);
}

fn apply_timing(cfg: &mut RunConfig, f: &TimingFlags) {
    set(&mut cfg.timing.warmup, f.warmup);
    set(&mut cfg.timing.iters, f.iters);
}

/// Preset plus config file; errors are configuration errors.
fn resolve(
    preset: RunConfig,
    file: Option<&Path>,
    edit: impl FnOnce(&mut RunConfig),
) -> Result<RunConfig, Failure> {
    let mut cfg = load_layered(preset, file).map_err(Failure::config)?;
    edit(&mut cfg);
    cfg.validate().map_err(Failure::config)?;
    Ok(cfg)
}

/// Loads `dir` and records its generation config in `cfg`, or generates
/// the configured dataset in memory.
fn dataset(cfg: &mut RunConfig, dir: Option<&Path>) -> Result<SynthDataset, Failure> {
    match dir {
        Some(dir) => {
            let data = synth::load_dataset(dir)
                .with_context(|| format!("loading dataset {}", dir.display()))?;
            cfg.data = data.config.clone();
            Ok(data)
        }
        None => Ok(synth::generate_in_memory(&cfg.data)?),
    }
}

fn log(msg: &str) {
    eprintln!("{msg}");
}

pub fn gen_data(a: GenDataArgs) -> Outcome {
    let cfg = resolve(RunConfig::default(), a.config.as_deref(), |c| {
        apply_data(c, &a.data)
    })?;
    let index = synth::generate(&cfg.data, &a.out)?;
    write_provenance(&a.out, "gen-data", &cfg)?;
    println!(
        "wrote {} sequences to {}",
        index.sequences.len(),
        a.out.display()
    );
    Ok(())
}

pub fn train(a: TrainArgs) -> Outcome {
    let mut cfg = resolve(RunConfig::default(), a.config.as_deref(), |c| {
        apply_data(c, &a.data);
        apply_net(c, &a.net);
        apply_train(c, &a.train);
    })?;
    let data = dataset(&mut cfg, a.data_dir.as_deref())?;
    let mut net =
        build_toynet::<f32>(&cfg.toynet(), cfg.network.init_seed).map_err(Failure::config)?;
    let eval = (!a.no_eval).then_some(&cfg.abt);
    let mut report = train_net(&mut net, &data.train, &data.val, &cfg.train, eval, |e| {
        let miou = e
            .val_miou
            .map(|m| format!(" val mIoU {m:.4}"))
            .unwrap_or_default();
        log(&format!(
            "epoch {} loss {:.4}{miou} ({:.1}s)",
            e.epoch, e.loss, e.seconds
        ));
    })?;
    let weights = a.out.join("weights");
    save_weights(&net, &weights)?;
    report.weights_path = Some(weights.display().to_string());
    config::write(
        &a.out,
        "train.json",
        &serde_json::to_string_pretty(&report)?,
    )?;
    config::write(&a.out, "train.csv", &report.to_csv())?;
    write_provenance(&a.out, "train", &cfg)?;
    print!("{}", report.to_csv());
    Ok(())
}

fn load_weights(dir: &Path) -> Result<Network<f32>, Failure> {
    Ok(load_network::<f32>(dir).with_context(|| format!("loading weights {}", dir.display()))?)
}

pub fn eval(a: EvalArgs) -> Outcome {
    let mut cfg = resolve(RunConfig::default(), a.config.as_deref(), |c| {
        apply_data(c, &a.data);
        c.data.train_count = 0;
        if let Some(k) = a.k {
            c.abt.k = k;
        }
        c.abt.average_pair = a.average_pair;
    })?;
    if let Some((_, kmax)) = a.sweep {
        AbtConfig {
            k: kmax,
            average_pair: false,
        }
        .validate()
        .map_err(Failure::config)?;
    }
    let net = load_weights(&a.weights)?;
    let data = dataset(&mut cfg, a.data_dir.as_deref())?;
    let output = match a.sweep {
        Some((lo, hi)) => (
            "sweep.csv",
            sweep_csv(&abt_sweep(&net, &data.val, lo..=hi)?),
        ),
        None => {
            let miou = abt_eval(&net, &data.val, &cfg.abt)?;
            let json = serde_json::json!({"k": cfg.abt.k, "average_pair": cfg.abt.average_pair, "miou": miou});
            ("eval.json", serde_json::to_string_pretty(&json)? + "\n")
        }
    };
    if let Some(out) = &a.out {
        config::write(out, output.0, &output.1)?;
        write_provenance(out, "eval", &cfg)?;
    }
    print!("{}", output.1);
    Ok(())
}

pub fn bench(a: BenchArgs) -> Outcome {
    let cfg = resolve(RunConfig::default(), a.config.as_deref(), |c| {
        apply_data(c, &a.data);
        apply_net(c, &a.net);
        apply_timing(c, &a.timing);
    })?;
    cwm_core::parallel::set_threads(1);
    let (report, extra) = if a.contiguity {
        let layer = LayerBench {
            in_channels: a.in_channels.unwrap_or(a.channels),
            out_channels: a.channels,
            height: a.size,
            width: a.size,
            kernel: a.kernel,
            active: a.active.unwrap_or(a.channels / 2),
            seed: cfg.network.init_seed,
        };
        layer.validate().map_err(Failure::config)?;
        let report = bench_layer(&layer, &cfg.timing)?;
        let ratio = report
            .median_ratio("scattered", "contiguous")
            .unwrap_or(f64::NAN);
        (
            report,
            format!("scattered / contiguous median: {ratio:.3}\n"),
        )
    } else {
        let net = match &a.weights {
            Some(dir) => load_weights(dir)?,
            None => build_toynet::<f32>(&cfg.toynet(), cfg.network.init_seed)
                .map_err(Failure::config)?,
        };
        let hw = (cfg.data.height, cfg.data.width);
        let report = bench_network(&net, hw, &cfg.timing, cfg.network.init_seed)?;
        let flops = compare_network_flops(&net, hw)?;
        let ratio = report.median_ratio("cwm", "stateless").unwrap_or(f64::NAN);
        (
            report,
            format!(
                "cwm / stateless median latency: {ratio:.3}; per-step FLOP ratio: {:.3}\n",
                flops.total_ratio
            ),
        )
    };
    let csv = report.to_csv();
    if let Some(out) = &a.out {
        config::write(out, "latency.csv", &csv)?;
        config::write(out, "latency.json", &serde_json::to_string_pretty(&report)?)?;
        write_provenance(out, "bench", &cfg)?;
    }
    print!("{csv}{extra}");
    Ok(())
}

pub fn flops(a: FlopsArgs) -> Outcome {
    let cfg = resolve(RunConfig::default(), a.config.as_deref(), |c| {
        apply_data(c, &a.data);
        apply_net(c, &a.net);
    })?;
    let net = match &a.weights {
        Some(dir) => load_weights(dir)?,
        None => {
            build_toynet::<f32>(&cfg.toynet(), cfg.network.init_seed).map_err(Failure::config)?
        }
    };
    let report =
        compare_network_flops(&net, (cfg.data.height, cfg.data.width)).map_err(Failure::config)?;
    let csv = report.to_csv();
    let json = serde_json::to_string_pretty(&report)? + "\n";
    if let Some(out) = &a.out {
        config::write(out, "flops.csv", &csv)?;
        config::write(out, "flops.json", &json)?;
        write_provenance(out, "flops", &cfg)?;
    }
    print!("{}", if a.json { json } else { csv });
    Ok(())
}

pub fn masks(a: MasksArgs) -> Outcome {
    let schedule = bistep_generator(a.channels, a.rho).map_err(Failure::config)?;
    println!("{}", serde_json::to_string(&schedule)?);
    print!("{}", schedule.ascii_diagram(a.steps));
    Ok(())
}

pub fn reproduce(a: ReproduceArgs) -> Outcome {
    let preset = if a.quick {
        RunConfig::quick()
    } else {
        RunConfig::default()
    };
    let mut cfg = resolve(preset, a.config.as_deref(), |c| {
        apply_data(c, &a.data);
        apply_train(c, &a.train);
        apply_timing(c, &a.timing);
        set(&mut c.network.base_width, a.base_width);
        set(&mut c.network.init_seed, a.init_seed);
    })?;
    let data = dataset(&mut cfg, a.data_dir.as_deref())?;
    write_provenance(&a.out, "reproduce", &cfg)?;
    let rows = run_grid(&cfg, &data, Some(&a.out), log)?;
    let check = check_tradeoff(&rows, "baseline", "0.25-BG");
    config::write(
        &a.out,
        "tradeoff.json",
        &(serde_json::to_string_pretty(&check)? + "\n"),
    )?;
    print!("{}", reproduce_csv(&rows));
    Ok(())
}
