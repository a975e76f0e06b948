//! Clamps the most and least salient Q/K columns of a trained model to their
//! global mean and compares accuracy, collapse and next-token divergence.
//!
//!   cargo run --release --example perturbation -- runs/run/checkpoints/rl_final.ckpt [fraction]

use longact::model::{load_checkpoint, ModelParams};
use longact::perturb::{perturb_eval, render_report, Calibration, PerturbSpec, Side, Target};
use longact::tasks::gen_niah;
use longact::training::EvalOptions;

fn main() -> longact::Result<()> {
    let mut args = std::env::args().skip(1);
    let path = args.next().expect("usage: perturbation <checkpoint> [fraction]");
    let fraction: f64 = args.next().map_or(0.3, |s| s.parse().expect("fraction"));
    let params: ModelParams<f32> = load_checkpoint(path.as_ref())?;

    let calib_prompts: Vec<Vec<u32>> = (0..8).map(|s| Ok(gen_niah(100_000 + s, 256, 3)?.prompt())).collect::<longact::Result<_>>()?;
    let calib = Calibration::from_prompts(&params, &calib_prompts)?;
    let eval: Vec<_> = (0..100).map(|s| gen_niah(900_000 + s, 256, 3)).collect::<longact::Result<_>>()?;

    let mut rows = Vec::new();
    for (target, frac, side) in [
        (Target::Both, 0.0, Side::Top),
        (Target::Both, fraction, Side::Top),
        (Target::Both, fraction, Side::Bottom),
        (Target::Q, fraction, Side::Top),
        (Target::K, fraction, Side::Top),
    ] {
        let spec = PerturbSpec::new(target, frac, side)?;
        let mut r = perturb_eval(&params, &eval, &spec, &calib, &EvalOptions::default())?;
        if frac == 0.0 {
            r.label = "none".into();
        }
        rows.push(r);
    }
    print!("{}", render_report(&rows));
    Ok(())
}
