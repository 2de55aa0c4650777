//! The whole pipeline in one process: synthesize, train, index, query,
//! filter, evaluate.

use mmretrieval::encoder::{encode_product, encode_query};
use mmretrieval::filter::{apply_filter, build_inverted, parse_filter};
use mmretrieval::index::{EmbeddingMatrix, HcIndex};
use mmretrieval::metrics::{p_cate, p_rel, recall_at_k, JaccardScorer};
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
    let (catalog, interactions, mut cases) = make_synthetic(&spec, 11);
    let cfg = TrainConfig {
        d: 32,
        d_img: 8,
        l: 4,
        batch_size: 8,
        n_devices: 2,
        memory_bank_batches: 4,
        lr_peak: 0.01,
        steps: Some(120),
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(catalog, &interactions, cfg)?;
    let log = trainer.train()?;
    // raw qpm values are only comparable within one schedule phase: the
    // softmax denominator grows when cross-device and bank negatives join
    println!(
        "trained {} steps: mpm {:.3} -> {:.3}, final qpm {:.3} over {} negatives",
        log.steps.len(),
        log.steps[0].loss_mpm,
        log.steps.last().unwrap().loss_mpm,
        log.steps.last().unwrap().loss_qpm,
        log.steps.last().unwrap().n1 + log.steps.last().unwrap().n2 + 7,
    );

    let mut embs = EmbeddingMatrix::new(trainer.params.dims.d);
    for p in trainer.catalog.products() {
        let enc = encode_product(&trainer.params, &trainer.catalog.vocab, p)?;
        embs.push_f32_rounded(p.id, &enc.v)?;
    }
    let index = HcIndex::build(&embs, HcIndex::default_centroids(embs.len()), 10, 11)?;
    println!("indexed {} products into {} clusters", index.len(), index.n_centroids());

    // retrieve every held-out query
    let nprobe = HcIndex::default_nprobe(index.n_centroids());
    for case in &mut cases {
        let enc = encode_query(&trainer.params, &trainer.catalog.vocab, &case.query.tokens)?;
        case.retrieved = index.search(&enc.u, 10, nprobe).iter().map(|r| r.0).collect();
    }
    let scorer = JaccardScorer;
    println!(
        "recall@10 {:.4}  p_rel {:.4}  p_cate {:.4}",
        recall_at_k(&cases)?,
        p_rel(&cases, &trainer.catalog, &scorer)?,
        p_cate(&cases, &trainer.catalog, &scorer)?,
    );

    // one filtered query: restrict a ranked list to a single brand
    let case = &cases[0];
    let inverted = build_inverted(&trainer.catalog);
    let expr = parse_filter("Brand:brand0")?;
    let kept = apply_filter(&case.retrieved, &expr, &inverted);
    println!(
        "query {:?}: {} of {} results survive Brand:brand0",
        case.query.raw,
        kept.len(),
        case.retrieved.len()
    );
    Ok(())
}
