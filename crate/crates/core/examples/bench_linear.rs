//! Count forward multiply-adds of one clustering block while the feature map
//! width doubles at a fixed cluster grid.
//!
//! `cargo run --release --example bench_linear -- [sizes]`

use cluenet::cli::bench_block;

fn main() -> cluenet::Result<()> {
    let sizes = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let rows = bench_block(32, 32, 32, sizes, 0)?;
    println!("pixels,madds,ratio,seconds");
    for (k, r) in rows.iter().enumerate() {
        let ratio = if k == 0 { f64::NAN } else { r.madds as f64 / rows[k - 1].madds as f64 };
        println!("{},{},{:.4},{:.6}", r.pixels, r.madds, ratio, r.seconds);
    }
    Ok(())
}
