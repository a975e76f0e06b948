//! Central-difference check of the supervised loss and the clipped RL
//! objective on a one-layer model in f64.

use longact::math::{finite_diff_check, Tensor};
use longact::model::{ModelConfig, ModelParams};
use longact::training::{group_log_probs, rl_loss_and_grad, sft_loss_and_grad, Algorithm, ObjectiveConfig, RolloutGroup};

fn main() -> longact::Result<()> {
    let cfg = ModelConfig {
        d_model: 8,
        n_layers: 1,
        n_heads_q: 2,
        n_heads_kv: 1,
        head_dim: 4,
        mlp_hidden: 16,
        vocab_size: 11,
        max_seq: 32,
        rope_base: 10000.0,
    };
    // Larger than the training init so gradients sit well above round-off.
    let base = ModelParams::<f64>::init(&cfg, 1)?;
    let scaled = base
        .tensors()
        .into_iter()
        .map(|(_, t)| Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * 8.0).collect()))
        .collect::<longact::Result<Vec<_>>>()?;
    let p = base.with_tensors(scaled)?;
    let flat = |m: &ModelParams<f64>| m.tensors().into_iter().map(|(_, t)| t.clone()).collect::<Vec<_>>();

    let batch = vec![(vec![1, 4, 2, 7, 3], vec![5, 9, 0])];
    let (_, g) = sft_loss_and_grad(&p, &batch)?;
    let rep = finite_diff_check(
        |ts| Ok(sft_loss_and_grad(&p.with_tensors(ts.to_vec())?, &batch)?.0),
        &flat(&p),
        &flat(&g),
        1e-5,
        200,
        0,
    )?;
    println!("sft       max rel error {:.2e} over {} coordinates", rep.max_rel_error, rep.checked);

    let prompt = vec![2, 5, 1, 9];
    let responses = vec![vec![3, 4, 0], vec![7, 1], vec![10, 2, 6, 4]];
    let old = group_log_probs(&p, &prompt, &responses)?;
    let groups = vec![RolloutGroup::new(prompt, "x".into(), responses, old, vec![2.0, 0.0, 1.0])?];
    let refs = vec![group_log_probs(&base, &groups[0].prompt, &groups[0].responses)?];
    for beta in [0.0, 0.001] {
        let obj = ObjectiveConfig {
            beta,
            ..Algorithm::Grpo.default_objective()
        };
        let (_, g, _) = rl_loss_and_grad(&p, &groups, Some(&refs), &obj)?;
        let rep = finite_diff_check(
            |ts| Ok(rl_loss_and_grad(&p.with_tensors(ts.to_vec())?, &groups, Some(&refs), &obj)?.0),
            &flat(&p),
            &flat(&g),
            1e-5,
            200,
            1,
        )?;
        println!("rl b={beta:<5} max rel error {:.2e} over {} coordinates", rep.max_rel_error, rep.checked);
    }
    Ok(())
}
