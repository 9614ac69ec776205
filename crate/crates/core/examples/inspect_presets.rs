//! Parameter counts and per-stage map sizes of every preset.

use cluenet::config::{ModelConfig, PRESETS};
use cluenet::net::Model;

fn main() -> cluenet::Result<()> {
    for name in PRESETS {
        let cfg = ModelConfig::preset(name)?;
        let model = Model::<f32>::build(&cfg, 0)?;
        let sizes: Vec<String> = cfg.stage_sizes().iter().map(|(h, w)| format!("{h}x{w}")).collect();
        println!("{name:<12} params {:>10}  maps {}", model.count_params(), sizes.join(" "));
    }
    Ok(())
}
