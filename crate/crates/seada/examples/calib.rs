//! Scratch calibration harness: replicates the heavy acceptance fixture's
//! per-seed training runs and prints per-seed metrics. Usage:
//! `cargo run --release --example calib -- SEADA [CAE ...]`

use seada::data::{make_patient_split, Sample};
use seada::eval::{diag_f1, domain_f1, rmse};
use seada::nets::{ArchConfig, Method};
use seada::phantom::PhantomConfig;
use seada::seeds;
use seada::trainer::{extract_ldrs, train, LdrStore, TrainConfig, TrainingSet};

const MASTER_SEED: u64 = 20260826;

fn main() {
    let methods: Vec<Method> = std::env::args()
        .skip(1)
        .map(|a| Method::parse(&a).expect("method name"))
        .collect();

    let phantom = PhantomConfig::default_desk(seeds::derive(MASTER_SEED, "phantom"));
    let (manifest, samples) = seada::phantom::generate_dataset(&phantom).unwrap();
    let split =
        make_patient_split(&manifest, 0.8, seeds::derive(MASTER_SEED, "patient-split")).unwrap();
    let train_domains: Vec<usize> = manifest.train_domains().iter().map(|d| d.index).collect();
    let arch = ArchConfig::desk_default(train_domains.len());
    let train_samples: Vec<Sample> = samples
        .iter()
        .filter(|s| {
            train_domains.contains(&s.domain.index) && split.train_ids.contains(&s.patient_id)
        })
        .cloned()
        .collect();
    let domain_probe_seed = seeds::derive(seeds::derive(MASTER_SEED, "eval"), "domain-probe");

    for method in methods {
        for seed_idx in 0..3u64 {
            let t0 = std::time::Instant::now();
            let set =
                TrainingSet::new(train_samples.clone(), train_domains.clone()).unwrap();
            let mut cfg = TrainConfig::desk_default(
                method,
                seeds::derive_indexed(
                    seeds::derive(MASTER_SEED, &format!("train/{}", method.as_str())),
                    "seed",
                    seed_idx,
                ),
            );
            cfg.method = method;
            let (bundle, _) = train(&set, &arch, &cfg).unwrap();
            let ldrs = extract_ldrs(&bundle, &samples).unwrap();
            let in_train = |s: &LdrStore, i: usize| train_domains.contains(&s.domains[i].index);
            let train_rows = ldrs.select(|i| in_train(&ldrs, i));
            let test_rows = ldrs.select(|i| !in_train(&ldrs, i));
            let df1 = domain_f1(&train_rows, domain_probe_seed).unwrap();
            let dgout = diag_f1(&train_rows, &test_rows).unwrap();
            let mut rmses = Vec::new();
            for s in &samples {
                if !train_domains.contains(&s.domain.index)
                    || !split.eval_ids.contains(&s.patient_id)
                {
                    continue;
                }
                let xh = bundle.reconstruct(&s.volume, s.domain.index).unwrap();
                rmses.push(rmse(&s.volume, &xh).unwrap());
            }
            let r = rmses.iter().sum::<f64>() / rmses.len() as f64;
            println!(
                "{} seed{}: domain_f1={:.3} diag_out={:.3} rmse={:.4} ({:.0}s)",
                method.as_str(),
                seed_idx,
                df1,
                dgout,
                r,
                t0.elapsed().as_secs_f64()
            );
        }
    }
}
