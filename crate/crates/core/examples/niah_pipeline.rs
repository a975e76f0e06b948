//! gen, sft, rl and eval on needle-in-a-haystack at a reduced scale that
//! finishes in about a minute. Pass `full` for the default configuration.
//!
//!   cargo run --release --example niah_pipeline
//!   cargo run --release --example niah_pipeline -- full

use longact::cli;
use longact::tasks::SeedRange;
use longact::RunConfig;

fn main() -> longact::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut cfg = RunConfig {
        name: "niah_example".into(),
        ..RunConfig::default()
    };
    if std::env::args().nth(1).as_deref() != Some("full") {
        cfg.task.context_len = 64;
        cfg.model.max_seq = 128;
        cfg.split.sft = SeedRange::new(0, 20_000);
        cfg.split.eval = SeedRange::new(900_000, 100);
        cfg.train.sft_steps = 1500;
        cfg.train.rl_steps = 60;
        cfg.train.eval_every = 20;
    }
    cfg.validate()?;
    let r = cli::pipeline(&cfg)?;
    println!(
        "sft: {} steps, eval accuracy {:.3}\nrl:  eval accuracy {:.3}, {} trainable W_Q/W_K rows\nartifacts in {}",
        r.sft.outcome.steps,
        r.sft.eval.accuracy,
        r.rl.eval.accuracy,
        r.rl.outcome.masks.as_ref().map_or(0, |m| m.trainable_rows()),
        cfg.run_dir().display()
    );
    Ok(())
}
