//! Run an untrained toy model on synthetic images, merge the stage-2 clusters
//! with k-means and write PPM/PNG overlays plus a trace dump.
//!
//! `cargo run --release --example visualize_clusters -- [out_dir] [merge_k]`

use std::path::PathBuf;

use cluenet::config::ModelConfig;
use cluenet::interpret::{self, OverlaySpec, RgbImage, KMEANS_MAX_ITERS};
use cluenet::net::Model;
use cluenet::train::data::synth_dataset;
use cluenet::Tensor;

fn main() -> cluenet::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "clusters".into()));
    let merge_k: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(4);
    std::fs::create_dir_all(&out).map_err(|e| cluenet::Error::io(&out, e))?;

    let cfg = ModelConfig::preset("micro-toy")?;
    let model = Model::<f32>::build(&cfg, 0)?;
    let (h, w) = cfg.input_size;
    let data = synth_dataset(4, h, 3, 1)?;
    let x = Tensor::from_vec(&[data.len(), h, w, 3], data.images.clone())?;
    let (_, trace) = model.forward(&x, true)?;

    for (i, t) in trace.expect("trace requested").iter().enumerate() {
        for stage in 1..=cfg.stages.len() {
            let fields = interpret::receptive_fields(t, stage)?;
            println!("image {i} stage {stage}: {} points, map {:?}", fields.len(), t.stages[stage - 1].map_size);
        }
        let fields = interpret::cluster_fields(t, 2, 0, 0)?;
        let centers = &t.stages[1].blocks[0].centers_v;
        let labels = interpret::kmeans_merge(centers, merge_k.min(fields.len()), KMEANS_MAX_ITERS, 0)?;
        let merged = interpret::merge_fields(&fields, &labels);
        let image = RgbImage::from_unit(h, w, data.image(i))?;
        let spec = OverlaySpec::new(merged.len(), 0.6, true)?;
        let (img, paths) = interpret::render_overlay(&image, &merged, &spec, &out.join(format!("image{i}")))?;
        interpret::save_trace(&out.join(format!("image{i}_trace.clue")), t)?;
        println!("image {i}: {} clusters -> {} regions, hash {:016x}, {:?}", fields.len(), merged.len(), img.pixel_hash(), paths);
    }
    Ok(())
}
