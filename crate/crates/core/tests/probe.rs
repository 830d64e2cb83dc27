//! Scratch probe for calibration runs; prints per-variant numbers.
//! Run with: cargo test -p mdmt-core --test probe -- --nocapture --ignored

mod common;

use mdmt_core::data::{generate_suite, GenConfig};
use mdmt_core::experiment::run_ablation_grid;
use mdmt_core::trainer::{TrainConfig, Variant};

#[test]
#[ignore]
fn probe_final_validation() {
    let (suite, _) = generate_suite(&GenConfig::default_suite(), 303).unwrap();
    let base = TrainConfig::defaults_for(Variant::MdMtl, 0);
    let seeds: Vec<u64> = vec![1, 2, 3, 4, 5];
    let out = run_ablation_grid(&suite, &base, &Variant::ALL, &seeds).unwrap();
    println!("elapsed {:.0}s", out.elapsed_secs);
    for row in &out.table.rows {
        let h = row.metrics.get("holdout_emotion").unwrap();
        let e = row.metrics.get("emotion").unwrap();
        println!(
            "{:>24}  emotion {:.3}±{:.3}  holdout {:.3}±{:.3}  gap {:+.3}",
            row.variant, e.mean, e.std, h.mean, h.std, e.mean - h.mean
        );
    }
    let get = |v: Variant| {
        out.table
            .rows
            .iter()
            .find(|r| r.variant == v.slug())
            .map(|r| {
                (
                    r.metrics["holdout_emotion"].mean,
                    r.metrics["emotion"].mean,
                )
            })
            .unwrap()
    };
    let (b, _) = get(Variant::Baseline);
    let (m, mi) = get(Variant::MdMtl);
    let (da, dai) = get(Variant::DaMdMtl);
    let (dm, _) = get(Variant::DistillMdMtl);
    let (db, _) = get(Variant::DistillBaseline);
    let (dda, _) = get(Variant::DistillDaMdMtl);
    println!("clause m-b>=3:      {:+.2}", (m - b) * 100.0);
    println!("clause dm>=m-0.5:   {:+.2}", (dm - m) * 100.0);
    println!("clause dda>=db-0.5: {:+.2}", (dda - db) * 100.0);
    println!("clause gapshrink:   {:+.2}", ((mi - m) - (dai - da)) * 100.0);
    println!("clause chance+10:   {:+.2}", (m - 1.0 / 7.0) * 100.0);
}
