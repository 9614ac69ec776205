//! Aggregate pixels into centers with the chunked online softmax and compare
//! against the dense attention matrix.
//!
//! `cargo run --release --example streaming_attention -- [pixels]`

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cluenet::gfc::{soft_aggregate, soft_aggregate_streaming};
use cluenet::layers::trunc_normal;
use cluenet::Tensor;

fn main() -> cluenet::Result<()> {
    let n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(16384);
    let (m, d, tau) = (49, 32, 0.05f32);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cs: Tensor<f32> = trunc_normal(&mut rng, &[m, d], 1.0);
    let ps: Tensor<f32> = trunc_normal(&mut rng, &[n, d], 1.0);
    let pv: Tensor<f32> = trunc_normal(&mut rng, &[n, d], 1.0);

    let t = Instant::now();
    let (dense, _) = soft_aggregate(&cs, &ps, &pv, tau)?;
    let dense_time = t.elapsed();
    println!("dense: {m}x{n} attention, {dense_time:?}");
    for chunk in [64, 512, 4096] {
        let t = Instant::now();
        let stream = soft_aggregate_streaming(&cs, &ps, &pv, tau, chunk)?;
        println!("chunk {chunk:>5}: max abs diff {:.2e}, {:?}", dense.max_abs_diff(&stream), t.elapsed());
    }
    Ok(())
}
