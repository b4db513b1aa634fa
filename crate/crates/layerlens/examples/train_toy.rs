//! Trains the bundled toy checkpoint on the bundled corpus.
//!
//! `cargo run --release -p layerlens --example train_toy -- [out.ltw]`

use std::path::PathBuf;
use std::time::Instant;

use layerlens::{checkpoint, corpus};
use layerlens_core::toy::{sequence_loss, train, ToyConfig, ToyModel, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/assets/toy_model.ltw")));
    let config = ToyConfig::default();
    let target = (config.vocab_size as f64).ln() / 2.0;
    let tokens = corpus::tokens();
    let mut model = ToyModel::random(config, 0)?;
    let cfg = TrainConfig::default();
    let start = Instant::now();
    train(&mut model, &tokens, &cfg, |step, loss| {
        if step % 100 == 0 || step + 1 == cfg.steps {
            eprintln!("step {step:5}  loss {loss:.4}  {:.0}s", start.elapsed().as_secs_f64());
        }
    })?;

    let eval = corpus::windows(&tokens, config.max_seq_len, 64, 99)?;
    let mean = eval.iter().map(|w| sequence_loss(&model, w)).sum::<Result<f64, _>>()? / eval.len() as f64;
    eprintln!("held-out-window loss {mean:.4} (target < {target:.4})");
    if mean >= target {
        return Err(format!("loss {mean:.4} did not reach {target:.4}").into());
    }
    checkpoint::save(&model, &out)?;
    eprintln!("wrote {}", out.display());
    Ok(())
}
