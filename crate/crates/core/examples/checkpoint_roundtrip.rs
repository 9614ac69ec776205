//! Save a model, reload it and confirm the container bytes and every
//! parameter survive exactly; then show that a mismatched config is refused.
//!
//! `cargo run --release --example checkpoint_roundtrip`

use cluenet::checkpoint;
use cluenet::config::ModelConfig;
use cluenet::net::Model;
use cluenet::Module;

fn main() -> cluenet::Result<()> {
    let dir = std::env::temp_dir().join("cluenet-roundtrip");
    std::fs::create_dir_all(&dir).map_err(|e| cluenet::Error::io(&dir, e))?;
    let path = dir.join("model.clue");

    let cfg = ModelConfig::preset("micro-cifar")?;
    let model = Model::<f32>::build(&cfg, 7)?;
    model.save(&path)?;
    let back = Model::<f32>::load(&path)?;
    let bytes = std::fs::read(&path).map_err(|e| cluenet::Error::io(&path, e))?;
    let same_bytes = checkpoint::encode(&back.to_entries())? == bytes;
    let mut same_params = true;
    model.visit(&mut |p| same_params &= back.param(&p.name).is_some_and(|v| v.bit_eq(&p.value)));
    println!("{} bytes, {} parameters, bytes equal {same_bytes}, params equal {same_params}", bytes.len(), back.count_params());

    let mut other = cfg.clone();
    other.stages[2].depth += 1;
    match Model::<f32>::load_expecting(&path, &other) {
        Ok(_) => println!("unexpected: mismatched config accepted"),
        Err(e) => println!("mismatched config refused: {e}"),
    }
    Ok(())
}
