//! Time one training step per stage at the default architecture size.

use std::time::Instant;

use seada::data::{Disease, DomainId, Sample};
use seada::nets::{init_bundle, ArchConfig, Method};
use seada::trainer::{TrainConfig, Trainer};

fn main() {
    let arch = ArchConfig::desk_default(5);
    let cfg = TrainConfig::desk_default(Method::SEADA, 1);
    let bundle = init_bundle(&arch, Method::SEADA, 1, vec![0, 1, 2, 3, 4]).unwrap();
    let mut t = Trainer::new(bundle, cfg).unwrap();
    let samples: Vec<Sample> = (0..16)
        .map(|i| Sample {
            volume: seada::phantom::generate_base_anatomy(i as u64, arch.shape),
            patient_id: format!("p{i}"),
            disease: Disease::CN,
            domain: DomainId { index: i % 5, name: format!("d{}", i % 5) },
        })
        .collect();
    let refs: Vec<&Sample> = samples.iter().collect();
    t.stage1_step(&refs).unwrap(); // warm-up

    let t0 = Instant::now();
    for _ in 0..3 {
        t.stage1_step(&refs).unwrap();
    }
    println!("stage1 (batch 16): {:?}/step", t0.elapsed() / 3);
    let t0 = Instant::now();
    for _ in 0..3 {
        t.stage2_step(&refs).unwrap();
    }
    println!("stage2 (batch 16): {:?}/step", t0.elapsed() / 3);
    let t0 = Instant::now();
    for _ in 0..3 {
        t.stage3_step(&refs).unwrap();
    }
    println!("stage3 (batch 16): {:?}/step", t0.elapsed() / 3);
}
