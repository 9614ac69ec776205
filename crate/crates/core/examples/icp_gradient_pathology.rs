//! Pooling through argmax-weighted centers gives the projection layer a zero
//! gradient; pooling by cluster means keeps it alive.
//!
//! `cargo run --release --example icp_gradient_pathology -- [seeds]`

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cluenet::gradcheck::perturb;
use cluenet::icp::Icp;
use cluenet::layers::trunc_normal;
use cluenet::{FeatureMap, Module, Tensor};

fn grad_norm(icp: &Icp<f64>) -> f64 {
    let mut sq = 0.0;
    icp.proj_f.visit(&mut |p| sq += p.grad.as_ref().map_or(0.0, |g| g.data().iter().map(|v| v * v).sum()));
    sq.sqrt()
}

fn main() -> cluenet::Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut icp = Icp::<f64>::new("pool", 6, 8, 2, &mut rng)?;
        perturb(&mut icp, seed + 1, 0.3);
        let x: Tensor<f64> = trunc_normal(&mut rng, &[2, 4, 4, 6], 1.0);
        let x = FeatureMap::from_tensor(&x, 1)?;
        let dy: Tensor<f64> = trunc_normal(&mut rng, &[2 * 2 * 2 * 8], 1.0);

        let (_, cache) = icp.forward_fec(&x)?;
        icp.zero_grad();
        icp.backward(&cache, dy.data());
        let fec = grad_norm(&icp);
        let (_, cache) = icp.forward(&x)?;
        icp.zero_grad();
        icp.backward(&cache, dy.data());
        println!("seed {seed}: |dL/dproj_f| argmax-weighted {fec:e}, cluster mean {:.4e}", grad_norm(&icp));
    }
    Ok(())
}
