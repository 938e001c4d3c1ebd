//! Full-length toy training run on the seeded synthetic dataset; prints the
//! held-out mIoU. Usage: `toy_oracle [encoder_iters] [full_iters] [seed] [lr_init]`.

use std::time::Instant;

use fplnet::autograd::TrainConfig;
use fplnet::data::{synth_dataset, SynthSpec};
use fplnet::network::NetworkConfig;
use fplnet::train::{evaluate, train_two_stage, StageConfig, TwoStageConfig};

fn main() -> fplnet::Result<()> {
    let args: Vec<f64> = std::env::args().skip(1).map(|a| a.parse().expect("numeric argument")).collect();
    let enc = args.first().map_or(1000, |&v| v as usize);
    let full = args.get(1).map_or(1000, |&v| v as usize);
    let seed = args.get(2).map_or(0, |&v| v as u64);
    let lr_init = args.get(3).copied().unwrap_or(TrainConfig::default().lr_init);
    let train = synth_dataset(&SynthSpec { seed, ..SynthSpec::default() }, 200)?;
    let val = synth_dataset(&SynthSpec { seed: seed + 1000, ..SynthSpec::default() }, 50)?;
    let stage = |max_iter| StageConfig {
        optim: TrainConfig { max_iter, lr_init, ..TrainConfig::default() },
        augment: None,
    };
    let cfg = TwoStageConfig {
        network: NetworkConfig::tiny(),
        encoder: stage(enc),
        full: stage(full),
        seed,
    };
    let t = Instant::now();
    let out = train_two_stage::<f32>(&cfg, &train, &mut |l| {
        if l.iter % 50 == 0 {
            eprintln!("{} {:5} lr {:.5} loss {:.4} ({:.1}s)", l.stage, l.iter, l.lr, l.loss, t.elapsed().as_secs_f64());
        }
    })?;
    let r = evaluate(&out.network, &val, 10)?;
    let fit = evaluate(&out.network, &train, 10)?;
    println!("train mIoU {:.4}", fit.miou);
    println!("val mIoU {:.4} per-class {:?} in {:.1}s", r.miou, r.per_class, t.elapsed().as_secs_f64());
    Ok(())
}
