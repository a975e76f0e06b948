//! Builds gradient masks for a hand-written 2 x 4 magnitude matrix under
//! each selection policy and prints the trainable W_Q rows.
//!
//!   cargo run --example appendix_mask -- 0.3

use longact::math::Tensor;
use longact::model::Projection;
use longact::saliency::{build_mask, MagnitudeMatrix, PolicyKind, SaliencyView, SelectionPolicy};

fn main() -> longact::Result<()> {
    let lambda: f64 = std::env::args().nth(1).map_or(Ok(0.3), |s| s.parse()).expect("lambda must be a number");
    let values = Tensor::new(vec![2, 4], vec![0.8, 0.2, 0.9, 0.5, 0.3, 0.7, 0.6, 0.4])?;
    let m = MagnitudeMatrix::new(0, Projection::Q, values)?;
    print!("{}", longact::saliency::render_saliency(&SaliencyView::HeadDim(&m))?);

    for kind in [PolicyKind::Massive, PolicyKind::Min, PolicyKind::Random] {
        let policy = SelectionPolicy::new(kind, lambda, 7)?;
        let mask = build_mask(&m, &policy)?;
        let bits: String = mask.rows.iter().map(|&b| if b { '1' } else { '.' }).collect();
        println!(
            "{kind:>8}: k={} per head, dims {:?}, rows {:?}  [{bits}]",
            policy.per_head(m.head_dim()),
            mask.selected,
            mask.trainable_rows()
        );
    }
    Ok(())
}
