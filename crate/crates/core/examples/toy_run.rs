//! Trains on the 128-sample toy set and prints per-epoch losses.
//!
//! `cargo run --release --example toy_run -- [epochs] [mode] [seed]`

use std::time::Instant;

use fusion_counting::data::synth_dataset;
use fusion_counting::model::{init_params_for, Mode};
use fusion_counting::train::{evaluate, train, TrainConfig};

fn main() -> fusion_counting::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).map_or(30, |v| v.parse().expect("epochs"));
    let mode: Mode = args.get(2).map_or(Mode::Multitask, |v| v.parse().expect("mode"));
    let seed: u64 = args.get(3).map_or(7, |v| v.parse().expect("seed"));

    let set = synth_dataset(128, 64, 64, (5, 15), 7)?;
    let cfg = TrainConfig {
        epochs,
        mode,
        ..TrainConfig::toy(seed)
    };
    let started = Instant::now();
    let out = train(&set, &cfg)?;
    for r in &out.log {
        println!(
            "{:3}  l_fusion {:10.3}  l_count {:8.3}  l_total {:10.3}  lambda ({:.3}, {:.3})",
            r.epoch, r.l_fusion, r.l_count, r.l_total, r.lambda1, r.lambda2
        );
    }
    let ev = evaluate(&out.params, &set, None, cfg.eta, cfg.count_sigma)?;
    let zero = evaluate(&init_params_for(mode, 0).zeroed(), &set, None, cfg.eta, cfg.count_sigma)?;
    println!(
        "GAME(0) {:.3} (zero model {:.3})  SSIM {:.3}  {:.1} s",
        ev.summary.game[0],
        zero.summary.game[0],
        ev.summary.fusion.ssim,
        started.elapsed().as_secs_f64()
    );
    Ok(())
}
