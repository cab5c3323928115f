//! Trains the small overfit configuration on synthetic sinusoids and prints
//! the per-epoch metrics.
//!
//! Usage: `cargo run --release --example overfit -- [epochs] [dropout]`

use std::time::Instant;

use freqmrn::data::{extract_windows, gen_synthetic, SequenceDataset, SynthSpec};
use freqmrn::kinematics::Skeleton;
use freqmrn::losses::LossConfig;
use freqmrn::model::ModelConfig;
use freqmrn::trainer::{TrainConfig, Trainer};

fn main() -> freqmrn::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(300);
    let dropout: f64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(0.3);
    let frames: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(40);

    let skeleton = Skeleton::synthetic(1, 4, 100.0)?;
    let sequences = (0..8)
        .map(|seed| {
            gen_synthetic(
                &skeleton,
                &SynthSpec {
                    frames,
                    seed,
                    ..SynthSpec::default()
                },
            )
        })
        .collect::<freqmrn::Result<Vec<_>>>()?;
    let dataset = SequenceDataset::new(skeleton.clone(), sequences)?;
    let windows = extract_windows(&dataset, 20, 5, 1)?;

    let model = ModelConfig {
        history: 20,
        query: 5,
        future: 5,
        stages: 2,
        residual_pairs: 1,
        latent: 32,
        dropout,
        ..ModelConfig::default()
    };
    let train = TrainConfig {
        epochs,
        batch_size: 4,
        lr: 0.005,
        lr_decay: 0.97,
        val_fraction: 0.0,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(model, LossConfig::default(), train, &skeleton, 0)?;
    println!(
        "{} windows, {} parameters",
        windows.len(),
        trainer.model.parameter_count()
    );
    let start = Instant::now();
    trainer.fit(&windows, &[], |_, m| {
        if m.epoch % 10 == 0 || m.epoch == 1 {
            println!(
                "epoch {:4} loss {:9.4} mpjpe {:8.3} stages {:?} ({:.1}s)",
                m.epoch,
                m.train_loss,
                m.train_mpjpe,
                m.stage_mpjpe.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>(),
                start.elapsed().as_secs_f64()
            );
        }
        Ok(())
    })?;
    Ok(())
}
