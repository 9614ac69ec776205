use cluenet::config::ModelConfig;
use cluenet::gradcheck::model_suite;

#[test]
fn toy_model_gradients_match_finite_differences() {
    let cfg = ModelConfig::preset("micro-toy").unwrap();
    for seed in [1, 2] {
        let reports = model_suite(&cfg, seed, 2, 16, 1e-4).unwrap();
        for (block, rep) in &reports {
            assert!(rep.pass, "seed {seed} {block}: {rep:?}");
        }
        let names: Vec<&str> = reports.iter().map(|(b, _)| b.as_str()).collect();
        for want in ["input", "pfe", "stage1.block0", "stage2.proj", "stage3.pool", "stage3.block0", "head"] {
            assert!(names.contains(&want), "{want} missing from {names:?}");
        }
    }
}
