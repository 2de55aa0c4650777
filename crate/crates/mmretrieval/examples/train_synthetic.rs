//! Train the dual encoder on a synthetic corpus and inspect the step log.

use mmretrieval::trainer::synthetic::{make_synthetic, SyntheticSpec};
use mmretrieval::trainer::{TrainConfig, Trainer};

fn main() -> mmretrieval::Result<()> {
    let spec = SyntheticSpec {
        n_clusters: 4,
        products_per_cluster: 16,
        patches_per_product: 4,
        patch_dim: 8,
        noise: 0.1,
    };
    let (catalog, interactions, _) = make_synthetic(&spec, 42);
    let cfg = TrainConfig {
        d: 32,
        d_img: 8,
        l: 4,
        batch_size: 8,
        n_devices: 2,
        memory_bank_batches: 4,
        lr_peak: 0.01,
        steps: Some(80),
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(catalog, &interactions, cfg)?;
    let log = trainer.train()?;

    println!("step    lr        qpm     mpm     N1  N2");
    for s in log.steps.iter().step_by(8) {
        println!(
            "{:4}  {:.6}  {:.4}  {:.4}  {:3} {:3}",
            s.step, s.lr, s.loss_qpm, s.loss_mpm, s.n1, s.n2
        );
    }
    let first = &log.steps[0];
    let last = log.steps.last().unwrap();
    println!(
        "\nloss {:.4} -> {:.4}, temperature {:.4}",
        first.loss_qpm + first.loss_mpm,
        last.loss_qpm + last.loss_mpm,
        trainer.tau.tau()
    );
    println!(
        "cross-device negatives appear at step {} (50%), bank negatives at step {} (60%)",
        log.steps.iter().find(|s| s.n2 > 0).map(|s| s.step).unwrap(),
        log.steps.iter().find(|s| s.n1 > 0).map(|s| s.step).unwrap(),
    );
    Ok(())
}
