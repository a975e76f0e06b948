//! A handful of masked RL updates on a small model, then a count of which
//! W_Q / W_K rows moved.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use longact::model::{ModelConfig, ModelParams};
use longact::tasks::gen_niah;
use longact::training::{calibration_masks, collect_groups, rl_step, sync_old_policy, OptimState, TrainConfig};

fn main() -> longact::Result<()> {
    let cfg = ModelConfig {
        d_model: 32,
        n_heads_q: 4,
        n_heads_kv: 2,
        head_dim: 8,
        mlp_hidden: 64,
        max_seq: 96,
        ..ModelConfig::default()
    };
    let train = TrainConfig {
        group_size: 4,
        max_new_tokens: 12,
        temperature: 1.5,
        ..TrainConfig::default()
    };
    let data: Vec<_> = (0..16).map(|s| gen_niah(s, 48, 3)).collect::<longact::Result<_>>()?;
    let start: ModelParams<f32> = ModelParams::init(&cfg, 0)?;
    let masks = calibration_masks(&start, &data, &train)?;
    println!("{} of {} W_Q/W_K rows trainable", masks.trainable_rows(), cfg.n_layers * (cfg.q_width() + cfg.kv_width()));

    let mut params = start.clone();
    let mut opt = OptimState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    // An untrained model almost never earns the task reward; score the parity of the first token instead.
    for step in 1..=5 {
        let old = sync_old_policy(&params);
        let picks: Vec<_> = data.iter().skip(step).take(2).collect();
        let mut groups = collect_groups(&old, &picks, &train, &mut rng)?;
        for g in &mut groups {
            let r: Vec<f64> = g.responses.iter().map(|t| (t[0] % 2) as f64).collect();
            g.advantages = longact::training::compute_advantages(&r);
            g.rewards = r;
        }
        let m = rl_step(&mut params, &mut opt, Some(&masks), &groups, None, &train, step)?;
        println!("step {step}: |g_qk| {:.4}  |g_other| {:.4}", m.grad_norm_qk, m.grad_norm_other);
    }

    for (l, (a, b)) in start.layers.iter().zip(&params.layers).enumerate() {
        for (name, w0, w1, mask) in [("q", &a.wq, &b.wq, &masks.query[l]), ("k", &a.wk, &b.wk, &masks.key[l])] {
            let c = w0.cols();
            let moved = |r: usize| w0.data()[r * c..(r + 1) * c] != w1.data()[r * c..(r + 1) * c];
            let (sel, frozen): (Vec<usize>, Vec<usize>) = (0..mask.rows.len()).partition(|&r| mask.rows[r]);
            println!(
                "layer {l} w{name}: {}/{} selected rows moved, {}/{} frozen rows moved",
                sel.iter().filter(|&&r| moved(r)).count(),
                sel.len(),
                frozen.iter().filter(|&&r| moved(r)).count(),
                frozen.len()
            );
        }
    }
    Ok(())
}
