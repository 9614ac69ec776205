//! Compare analytic gradients with central differences for every block of the
//! toy model, in double precision.
//!
//! `cargo run --release --example gradcheck_model -- [seed]`

use cluenet::config::ModelConfig;
use cluenet::gradcheck::model_suite;

fn main() -> cluenet::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let cfg = ModelConfig::preset("micro-toy")?;
    let mut all = true;
    for (block, r) in model_suite(&cfg, seed, 2, 16, 1e-4)? {
        all &= r.pass;
        println!("{block:<16} max_rel_err={:.3e} checked={} {}", r.max_rel_err, r.checked, if r.pass { "ok" } else { "FAIL" });
    }
    println!("{}", if all { "all blocks pass" } else { "gradient mismatch" });
    Ok(())
}
