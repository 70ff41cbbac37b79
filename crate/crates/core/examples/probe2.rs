//! Scratch calibration probe (not part of the deliverable).
//! args: n res sur_epochs prot_epochs batch [sur_cache_path]

use std::time::Instant;
use waveguard_core::dataio::make_dataset;
use waveguard_core::harness::{
    evaluate, init_train_state, load_surrogate, random_baseline, run_training, save_surrogate,
    TrainConfig,
};
use waveguard_core::surrogate::train_surrogate;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n: usize = args[1].parse().unwrap();
    let res: usize = args[2].parse().unwrap();
    let sur_epochs: usize = args[3].parse().unwrap();
    let prot_epochs: usize = args[4].parse().unwrap();
    let batch: usize = args[5].parse().unwrap();
    let cache = args.get(6).cloned();

    let t0 = Instant::now();
    let splits = make_dataset(n, res, 20240).unwrap();
    println!(
        "dataset {n}x{res}px train {} test {}  {:.1}s",
        splits.train.len(),
        splits.test.len(),
        t0.elapsed().as_secs_f64()
    );

    let t1 = Instant::now();
    let surrogate = match cache.as_deref().map(std::path::Path::new) {
        Some(p) if p.exists() => {
            let m = load_surrogate::<f32>(p).unwrap();
            println!("surrogate loaded from cache  {:.1}s", t1.elapsed().as_secs_f64());
            m
        }
        maybe => {
            let (m, log) = train_surrogate::<f32>(&splits.train, sur_epochs, 20240).unwrap();
            println!(
                "surrogate {sur_epochs} epochs  {:.1}s  loss {:.4} -> {:.4}",
                t1.elapsed().as_secs_f64(),
                log.first().unwrap(),
                log.last().unwrap()
            );
            if let Some(p) = maybe {
                save_surrogate(&m, 20240, std::path::Path::new(p)).unwrap();
            }
            m
        }
    };

    let cfg = TrainConfig { seed: 0, epochs: prot_epochs, batch, ..TrainConfig::default() };
    let mut state = init_train_state::<f32>(&cfg).unwrap();
    state.cfg.epochs = 0;
    let t2 = Instant::now();
    let mut done = 0usize;
    while done < prot_epochs {
        let next = (done + 10).min(prot_epochs);
        state.cfg.epochs = next;
        let log = run_training(&mut state, &surrogate, &splits.train).unwrap();
        for e in &log {
            println!(
                "  epoch {}  rec {:.4} adv {:.4} swap {:.4} total {:.4}",
                e.epoch, e.rec, e.adv, e.swap, e.total
            );
        }
        let report = evaluate(&state.model, &surrogate, &splits.test).unwrap();
        println!(
            "@{next}  PSNR {:.2} SSIM {:.4} meanL1 {:.4} ASR {:.3}  ({:.1}s/epoch)",
            report.mean_psnr(),
            report.mean_ssim(),
            report.mean_l1(),
            report.asr(),
            t2.elapsed().as_secs_f64() / next as f64
        );
        done = next;
    }
    println!(
        "protector {prot_epochs} epochs batch {batch}  {:.1}s  ({:.1}s/epoch)",
        t2.elapsed().as_secs_f64(),
        t2.elapsed().as_secs_f64() / prot_epochs.max(1) as f64
    );

    let base = random_baseline(&surrogate, &splits.test, cfg.epsilon, 100).unwrap();
    println!("baseline  meanL1 {:.4} ASR {:.3}", base.mean_l1(), base.asr());
}
