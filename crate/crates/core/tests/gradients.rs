use longact::math::{finite_diff_check, Tensor};
use longact::model::{ModelConfig, ModelParams};
use longact::training::{group_log_probs, rl_loss_and_grad, sft_loss_and_grad, ObjectiveConfig, RolloutGroup};

fn tiny() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_layers: 1,
        n_heads_q: 2,
        n_heads_kv: 1,
        head_dim: 4,
        mlp_hidden: 16,
        vocab_size: 11,
        max_seq: 32,
        rope_base: 10000.0,
    }
}

const SCALE: f64 = 8.0;

/// Weights scaled well above the 0.02 init so every path carries signal.
fn params(seed: u64) -> ModelParams<f64> {
    let p = ModelParams::<f64>::init(&tiny(), seed).unwrap();
    let ts = p.tensors().into_iter().map(|(_, t)| {
        let d: Vec<f64> = t.data().iter().map(|v| v * SCALE).collect();
        Tensor::new(t.shape().to_vec(), d).unwrap()
    }).collect();
    p.with_tensors(ts).unwrap()
}

fn flat(p: &ModelParams<f64>) -> Vec<Tensor<f64>> {
    p.tensors().into_iter().map(|(_, t)| t.clone()).collect()
}

#[test]
fn sft_loss_gradient_matches_finite_differences() {
    let p = params(1);
    let batch = vec![(vec![1, 4, 2, 7, 3], vec![5, 9, 0]), (vec![6, 6, 2], vec![8, 1])];
    let (_, g) = sft_loss_and_grad(&p, &batch).unwrap();
    let rep = finite_diff_check(
        |ts| Ok(sft_loss_and_grad(&p.with_tensors(ts.to_vec())?, &batch)?.0),
        &flat(&p),
        &flat(&g),
        1e-5,
        200,
        7,
    )
    .unwrap();
    assert!(rep.max_rel_error <= 1e-4, "{rep:?}");
}

fn group(p: &ModelParams<f64>, old: &ModelParams<f64>) -> RolloutGroup {
    let prompt = vec![2, 5, 1, 9];
    let responses = vec![vec![3, 4, 0], vec![7, 1], vec![10, 2, 6, 4], vec![5]];
    let old_lp = group_log_probs(old, &prompt, &responses).unwrap();
    let _ = p;
    RolloutGroup::new(prompt, "x".into(), responses, old_lp, vec![2.0, 0.0, 1.0, 0.0]).unwrap()
}

fn check_rl(beta: f64) {
    let p = params(2);
    let old = params(3).with_tensors(
        flat(&p).iter().zip(flat(&params(3))).map(|(a, b)| {
            Tensor::new(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(x, y)| x + 0.02 * y).collect()).unwrap()
        }).collect(),
    ).unwrap();
    let reference = params(4);
    let g = group(&p, &old);
    let refs = vec![group_log_probs(&reference, &g.prompt, &g.responses).unwrap()];
    let cfg = ObjectiveConfig { eps_low: 0.2, eps_high: 0.28, beta, token_level: false };
    let groups = vec![g];
    let (_, grad, _) = rl_loss_and_grad(&p, &groups, Some(&refs), &cfg).unwrap();
    let rep = finite_diff_check(
        |ts| Ok(rl_loss_and_grad(&p.with_tensors(ts.to_vec())?, &groups, Some(&refs), &cfg)?.0),
        &flat(&p),
        &flat(&grad),
        1e-5,
        200,
        9,
    )
    .unwrap();
    assert!(rep.max_rel_error <= 1e-4, "beta {beta}: {rep:?}");
}

#[test]
fn rl_objective_gradient_without_kl() {
    check_rl(0.0);
}

#[test]
fn rl_objective_gradient_with_kl() {
    check_rl(0.001);
}


#[test]
fn two_layer_grouped_query_sft_gradient() {
    let cfg = ModelConfig { d_model: 16, n_layers: 2, n_heads_q: 4, n_heads_kv: 2, ..tiny() };
    let base = ModelParams::<f64>::init(&cfg, 5).unwrap();
    let ts = base.tensors().into_iter().map(|(_, t)| {
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * SCALE).collect()).unwrap()
    }).collect();
    let p = base.with_tensors(ts).unwrap();
    let prompt: Vec<u32> = (0..14).map(|i| (i * 7 + 3) % 11).collect();
    let batch = vec![(prompt, vec![4, 9, 2, 2, 10])];
    let (_, g) = sft_loss_and_grad(&p, &batch).unwrap();
    let rep = finite_diff_check(
        |ts| Ok(sft_loss_and_grad(&p.with_tensors(ts.to_vec())?, &batch)?.0),
        &flat(&p),
        &flat(&g),
        1e-5,
        200,
        11,
    )
    .unwrap();
    assert!(rep.max_rel_error <= 1e-4, "{rep:?}");
}
