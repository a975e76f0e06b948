//! Layers defaults, a TOML file and command-line style overrides, then
//! prints the resolved configuration in the flat form written to
//! `config.resolved`.

use longact::saliency::PolicyKind;
use longact::training::Algorithm;
use longact::{Overrides, RunConfig};

fn main() -> longact::Result<()> {
    let file = "\
name = \"ablation\"
seed = 3
train.lambda = 0.2
train.policy = \"min\"
task.context_len = 128
";
    let mut cfg = RunConfig::from_toml(file)?;
    cfg.apply(&Overrides {
        seed: Some(7),
        algorithm: Some(Algorithm::Grpo),
        policy: Some(PolicyKind::Massive),
        ..Overrides::default()
    });
    cfg.validate()?;
    print!("{}", cfg.to_flat()?);
    println!("# run directory: {}", cfg.run_dir().display());
    println!("# objective: {:?}", cfg.train.objective());
    Ok(())
}
