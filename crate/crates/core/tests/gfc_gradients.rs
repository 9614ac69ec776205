use cluenet::config::Ablation;
use cluenet::gfc::{GfcBlock, GfcStage};
use cluenet::gradcheck::{check_flat, check_parameters, DEFAULT_STEP};
use cluenet::layers::trunc_normal;
use cluenet::{FeatureMap, Module, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn perturb<M: Module<f64>>(m: &mut M, seed: u64, std: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    m.visit_mut(&mut |p| {
        let noise: Tensor<f64> = trunc_normal(&mut rng, p.value.shape(), std);
        p.value.data_mut().iter_mut().zip(noise.data()).for_each(|(v, n)| *v += n);
    });
}

fn input(seed: u64) -> FeatureMap<f64> {
    let v: Tensor<f64> = trunc_normal(&mut ChaCha8Rng::seed_from_u64(seed), &[2, 4, 4, 8], 1.0);
    FeatureMap::new(2, 4, 4, 8, 1, v.into_vec())
}

fn functional(len: usize, seed: u64) -> Vec<f64> {
    trunc_normal::<f64, _>(&mut ChaCha8Rng::seed_from_u64(seed), &[len], 1.0).into_vec()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_stage(flags: Ablation, depth: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stage = GfcStage::<f64>::new("s", depth, 8, 8, 2, (2, 2), flags, &mut rng).unwrap();
    perturb(&mut stage, seed + 1, 0.3);
    let x = input(seed + 2);
    let r = functional(x.data.len(), seed + 3);
    let (_, cache) = stage.forward(&x).unwrap();
    stage.zero_grad();
    let dx = stage.backward(&cache, &r);

    let loss = |s: &GfcStage<f64>, xs: &[f64]| {
        let xm = FeatureMap::new(2, 4, 4, 8, 1, xs.to_vec());
        dot(&s.forward(&xm).unwrap().0.data, &r)
    };
    let rep = check_flat(|xs| loss(&stage, xs), &x.data, &dx, 0..x.data.len(), DEFAULT_STEP, 1e-4).unwrap();
    assert!(rep.pass, "input gradient {flags:?}: {rep:?}");
    let reports = check_parameters(&stage, |s| loss(s, &x.data), 24, DEFAULT_STEP, 1e-4).unwrap();
    for (name, rep) in reports {
        assert!(rep.pass, "{name} {flags:?}: {rep:?}");
    }
}

#[test]
fn full_block_gradients() {
    check_stage(Ablation::default(), 1, 10);
}

#[test]
fn shared_stage_gradients() {
    check_stage(Ablation::default(), 3, 20);
}

#[test]
fn ablated_block_gradients() {
    let all = Ablation::default();
    for (i, flags) in [
        Ablation { fa: false, ..all },
        Ablation { tcos: false, ..all },
        Ablation { gate: false, ..all },
        Ablation { shared: false, ..all },
        Ablation { pos_emb: false, ..all },
    ]
    .into_iter()
    .enumerate()
    {
        check_stage(flags, 2, 100 + 10 * i as u64);
    }
}

#[test]
fn single_block_rejects_missing_shared_assignment() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let block = GfcBlock::<f64>::new("b", 8, 8, 2, (2, 2), Ablation::default(), false, &mut rng).unwrap();
    assert!(block.forward(&input(2), None).is_err());
}
