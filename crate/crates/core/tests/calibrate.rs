//! Manual calibration harness (ignored by default): measures wall time and
//! oracle accuracy of the desk-scale benchmark across epoch budgets.
//! Run with: cargo test -p fet-core --test calibrate -- --ignored --nocapture

use std::time::Instant;

use fet_core::dataset::{generate_synthetic, split, SyntheticGenConfig};
use fet_core::eval::{evaluate_generation, NearestCenterOracle};
use fet_core::i2fet::{train, I2FetConfig, I2FetModel, LossFlags, TrainConfig};
use fet_core::text_embed::{EmbeddingTable, ExpressionVocabulary, HashingEmbedder};

fn bench_data() -> (fet_core::dataset::DatasetManifest, EmbeddingTable) {
    let cfg = SyntheticGenConfig::with_random_centers(ExpressionVocabulary::ck_plus(), 50, 50, 7);
    let manifest = generate_synthetic(&cfg).unwrap();
    let manifest = split(&manifest, 0.10, 0.10, 11).unwrap();
    let provider = HashingEmbedder::new(16, 64, 13).unwrap();
    let table = EmbeddingTable::build(
        &provider,
        manifest.samples().iter().map(|s| s.instruction.text.as_str()),
    )
    .unwrap();
    (manifest, table)
}

#[test]
#[ignore]
fn calibrate_benchmark() {
    let (manifest, table) = bench_data();
    let oracle = NearestCenterOracle::from_manifest(&manifest).unwrap();

    for (ifed, epochs, batch, lr, seed) in [
        (true, 10usize, 128usize, 8e-4f64, 2u64),
        (true, 10, 128, 8e-4, 3),
        (false, 10, 128, 8e-4, 2),
        (false, 10, 128, 8e-4, 3),
    ] {
        let mut mcfg = I2FetConfig::desk(64);
        mcfg.ifed_enabled = ifed;
        let model = I2FetModel::new(mcfg, seed).unwrap();
        let tcfg = TrainConfig {
            epochs,
            batch_size: batch,
            learning_rate: lr,
            seed,
            loss_flags: LossFlags::default(),
            ifed_enabled: ifed,
        };
        let t0 = Instant::now();
        let (trained, log) = train(model, &manifest, &table, None, &tcfg).unwrap();
        let train_secs = t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let eval = evaluate_generation(&trained, &manifest, &table, &oracle, 99).unwrap();
        let eval_secs = t1.elapsed().as_secs_f64();
        let best = &log.epochs[log.best_epoch].val;
        println!(
            "ifed={ifed} epochs={epochs} batch={batch} lr={lr} seed={seed}: train {train_secs:.1}s eval {eval_secs:.2}s \
             acc1={:.4} acc2={:.4} gmean={:.4} ceiling={:.4} best={} val_total={:.5} val_e={:.5} val_p={:.5}",
            eval.generated.acc1,
            eval.generated.acc2,
            eval.generated.gmean,
            eval.ground_truth.acc1,
            log.best_epoch,
            best.total,
            best.expr,
            best.pose,
        );
    }
}
