use cluenet::config::Settings;
use cluenet::net::Model;
use cluenet::train::data::synth_dataset;
use cluenet::train::run::model_for;
use cluenet::train::{cosine_lr, train_loop, Normalizer, Trainer};

fn setup(epochs: usize) -> (Settings, cluenet::train::Dataset) {
    let mut s = Settings::from_preset("micro-toy").unwrap();
    for kv in [format!("epochs={epochs}"), "batch_size=8".into(), "warmup_epochs=1".into()] {
        s.apply_override(&kv).unwrap();
    }
    (s, synth_dataset(3, 16, 20, 1).unwrap())
}

fn fresh(s: &Settings, data: &cluenet::train::Dataset) -> Trainer {
    let model = Model::build(&model_for(s, 3), 4).unwrap();
    Trainer::new(model, &s.train, Normalizer::fit(data), 4).unwrap()
}

#[test]
fn resume_reproduces_losses_bitwise() {
    let (s, data) = setup(4);
    let mut whole = fresh(&s, &data);
    let full = train_loop(&mut whole, &data, None, None, &mut std::io::sink()).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut first = fresh(&s, &data);
    first.train_epoch(&data).unwrap();
    first.train_epoch(&data).unwrap();
    let ck = dir.path().join("checkpoint.clue");
    first.save(&ck).unwrap();
    let mut resumed = Trainer::load(&ck, &s.train, Some(&model_for(&s, 3))).unwrap();
    assert_eq!(resumed.epoch, 2);
    let rest = train_loop(&mut resumed, &data, None, None, &mut std::io::sink()).unwrap();
    assert_eq!(rest.len(), 2);
    for (a, b) in full[2..].iter().zip(&rest) {
        assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
    }
}

#[test]
fn resume_rejects_other_config() {
    let (s, data) = setup(1);
    let dir = tempfile::tempdir().unwrap();
    let mut t = fresh(&s, &data);
    train_loop(&mut t, &data, None, Some(dir.path()), &mut std::io::sink()).unwrap();
    let mut other = model_for(&s, 3);
    other.stages[0].depth = 1;
    let err = Trainer::load(&dir.path().join("checkpoint.clue"), &s.train, Some(&other)).err().unwrap();
    assert!(err.to_string().contains("stage1.depth"), "{err}");
}

#[test]
fn learning_rate_follows_schedule() {
    let (s, data) = setup(3);
    let mut t = fresh(&s, &data);
    let sched = t.schedule(data.len());
    let hist = train_loop(&mut t, &data, None, None, &mut std::io::sink()).unwrap();
    let lrs: Vec<f64> = hist.iter().flat_map(|r| r.lrs.iter().copied()).collect();
    assert_eq!(lrs.len(), sched.total_steps());
    for (i, lr) in lrs.iter().enumerate() {
        assert_eq!(*lr, cosine_lr(&sched, i + 1));
    }
    assert_eq!(*lrs.last().unwrap(), s.train.min_lr);
}

#[test]
fn overfit_loss_trends_down() {
    let (mut s, data) = setup(30);
    s.apply_override("base_lr=1e-3").unwrap();
    s.apply_override("flip=false").unwrap();
    let mut t = fresh(&s, &data);
    let hist = train_loop(&mut t, &data, None, None, &mut std::io::sink()).unwrap();
    let window = |r: &[cluenet::train::EpochRecord]| r.iter().map(|e| e.train_loss).sum::<f64>() / r.len() as f64;
    let means: Vec<f64> = hist.chunks(10).map(window).collect();
    for w in means.windows(2) {
        assert!(w[1] <= w[0], "{means:?}");
    }
}
