//! Prints one instance of every synthetic task with its gold response.
//!
//!   cargo run --example tasks_preview -- 48 11

use longact::tasks::{gen_instance, TaskConfig, TaskKind, Vocab};
use longact::training::compute_reward;

fn main() -> longact::Result<()> {
    let mut args = std::env::args().skip(1);
    let len: usize = args.next().map_or(48, |s| s.parse().expect("context length"));
    let seed: u64 = args.next().map_or(11, |s| s.parse().expect("seed"));
    let cfg = TaskConfig {
        context_len: len,
        common_freq: 2 * len.div_ceil(longact::tasks::N_FILLERS) + 1,
        ..TaskConfig::default()
    };
    let v = Vocab::standard();
    for kind in TaskKind::ALL {
        let inst = gen_instance(kind, seed, &cfg)?;
        let gold = inst.gold_response(v)?;
        println!("== {kind} (seed {seed})");
        println!("context : {}", v.decode(&inst.context));
        println!("question: {}", v.decode(&inst.question));
        println!("gold    : {}", v.decode(&gold));
        println!("reward  : {}\n", compute_reward(v, &gold, &inst.answer).total());
    }
    Ok(())
}
