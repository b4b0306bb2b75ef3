//! Compares the network's analytic gradients with central differences.
//!
//! `cargo run --release --example gradient_check`

use alc::nn::{init_params, loss_and_grad, Arch, BatchItem, LossSpecTerms, LossTerm, Target};
use alc::synthgen::make_shapes_dataset;

fn main() -> alc::Result<()> {
    let data = make_shapes_dataset(1, 2, (16, 16), 2)?;
    let state = init_params(&Arch::desk(2), 4)?;
    let batch: Vec<BatchItem> = data
        .samples
        .iter()
        .map(|s| BatchItem { image: &s.image, target: Target::Label(&s.label) })
        .collect();
    let spec = LossSpecTerms(vec![(LossTerm::Seg, 1.0)]);
    let (loss, grads) = loss_and_grad(&state, &batch, &spec)?;
    println!("seg loss {loss:.6}, {} parameters", state.param_count());

    let h = 1e-5;
    let n = state.param_count();
    for i in (0..n).step_by(n / 12) {
        let mut probe = state.clone();
        *probe.flat_mut(i) += h;
        let up = loss_and_grad(&probe, &batch, &spec)?.0;
        *probe.flat_mut(i) -= 2.0 * h;
        let down = loss_and_grad(&probe, &batch, &spec)?.0;
        let numeric = (up - down) / (2.0 * h);
        println!("coord {i:>6}: analytic {:+.6e}  numeric {numeric:+.6e}", grads.flat_get(i));
    }
    Ok(())
}
