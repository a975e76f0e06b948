//! Q/K magnitude heatmaps of a model on NIAH prompts, drawn in the terminal
//! with the massive-policy selection marked.
//!
//!   cargo run --release --example saliency_heatmap -- runs/run/checkpoints/rl_final.ckpt
//!
//! Without a checkpoint a freshly initialised default model is used.

use longact::model::{forward_with, load_checkpoint, CaptureMode, ForwardOptions, ModelConfig, ModelParams, Projection};
use longact::saliency::{build_mask, compute_magnitude, PolicyKind, SelectionPolicy};
use longact::tasks::gen_niah;

const SHADES: [char; 5] = [' ', '.', ':', 'o', '#'];

fn main() -> longact::Result<()> {
    let params: ModelParams<f32> = match std::env::args().nth(1) {
        Some(p) => load_checkpoint(p.as_ref())?,
        None => ModelParams::init(&ModelConfig::default(), 0)?,
    };
    let opts = ForwardOptions {
        capture: Some(CaptureMode::PreRotary),
        clamp: None,
    };
    let traces = (0..8)
        .map(|s| Ok(forward_with(&params, &[gen_niah(900_000 + s, 256, 3)?.prompt()], &opts)?.trace.expect("captured")))
        .collect::<longact::Result<Vec<_>>>()?;
    let policy = SelectionPolicy::new(PolicyKind::Massive, 0.3, 0)?;

    for layer in 0..params.config.n_layers {
        for proj in [Projection::Q, Projection::K] {
            let m = compute_magnitude(&traces, layer, proj)?;
            let mask = build_mask(&m, &policy)?;
            let max = m.values.data().iter().cloned().fold(0.0, f64::max);
            println!("layer {layer} {proj}   (max {max:.3}, '*' = selected)");
            for h in 0..m.heads() {
                let row: String = (0..m.head_dim())
                    .map(|d| {
                        if mask.selected[h].contains(&d) {
                            return '*';
                        }
                        let i = ((m.get(h, d) / max) * (SHADES.len() - 1) as f64).round() as usize;
                        SHADES[i.min(SHADES.len() - 1)]
                    })
                    .collect();
                println!("  h{h} |{row}|");
            }
        }
    }
    Ok(())
}
