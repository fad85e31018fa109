use ecg_contrast::augment::AugmentationSpec;
use ecg_contrast::data::{generate_synthetic, normalize, Signal, SyntheticConfig};
use ecg_contrast::models::{Component, EncoderConfig, HeadConfig, ModelState, Variant};
use ecg_contrast::par::{set_exec, Exec};
use ecg_contrast::train::{self, TrainConfig};

fn run(exec: Exec) -> (Vec<f64>, Vec<f64>, u64, u64) {
    set_exec(exec);
    let recs: Vec<_> = generate_synthetic(&SyntheticConfig {
        n: 48,
        len: 250,
        seed: 4,
        ..Default::default()
    })
    .unwrap()
    .iter()
    .map(normalize)
    .collect();
    let sig: Vec<&Signal> = recs.iter().map(|r| &r.signal).collect();
    let lab: Vec<_> = recs.iter().map(|r| r.labels.unwrap()).collect();
    let cfg = TrainConfig {
        pretrain_epochs: 2,
        batch_size: 16,
        finetune_epochs: 3,
        ..TrainConfig::default()
    };
    let mut m = ModelState::new(&EncoderConfig::toy(Variant::A), &HeadConfig::toy(), 1).unwrap();
    let spec = AugmentationSpec::TimeWarp { segments: 4, warp: 0.25 };
    let pre = train::pretrain(&mut m, &sig, &spec, &cfg, 1, &mut train::no_observer()).unwrap();
    let ft = train::finetune(&mut m, &sig, &lab, &cfg, 1, &mut train::no_observer()).unwrap();
    (pre, ft.losses, m.checksum(Component::Encoder), m.checksum(Component::Classifier))
}

#[test]
fn sequential_and_parallel_agree_bitwise() {
    // several workers even on a single-core machine; must precede first pool use
    std::env::set_var("RAYON_NUM_THREADS", "4");
    let a = run(Exec::Sequential);
    let b = run(Exec::Parallel);
    set_exec(Exec::Parallel);
    assert_eq!(a, b);
}
