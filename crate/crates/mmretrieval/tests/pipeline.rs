//! Cross-module integration: file formats surviving real artifacts, larger
//! vocabularies, and in-process end-to-end determinism.

use mmretrieval::encoder::{encode_product, load_checkpoint, save_checkpoint};
use mmretrieval::index::{brute_force, EmbeddingMatrix, HcIndex};
use mmretrieval::trainer::synthetic::{make_synthetic, SyntheticSpec};
use mmretrieval::trainer::{TrainConfig, Trainer};
use mmretrieval::Vocab;

fn small_trainer(seed: u64) -> Trainer {
    let spec = SyntheticSpec {
        n_clusters: 2,
        products_per_cluster: 8,
        patches_per_product: 4,
        patch_dim: 4,
        noise: 0.1,
    };
    let (catalog, interactions, _) = make_synthetic(&spec, seed);
    let cfg = TrainConfig {
        d: 16,
        d_img: 4,
        l: 4,
        batch_size: 8,
        lr_peak: 0.01,
        steps: Some(10),
        seed,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(catalog, &interactions, cfg).unwrap();
    t.train().unwrap();
    t
}

fn embeddings_of(t: &Trainer) -> EmbeddingMatrix {
    let mut embs = EmbeddingMatrix::new(t.params.dims.d);
    for p in t.catalog.products() {
        let enc = encode_product(&t.params, &t.catalog.vocab, p).unwrap();
        embs.push_f32_rounded(p.id, &enc.v).unwrap();
    }
    embs
}

#[test]
fn trained_artifacts_survive_disk_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let t = small_trainer(3);

    // checkpoint: second trip is byte-stable
    let ckpt_a = dir.path().join("a.ckpt");
    let ckpt_b = dir.path().join("b.ckpt");
    save_checkpoint(&t.params, &ckpt_a).unwrap();
    let loaded = load_checkpoint(&ckpt_a).unwrap();
    save_checkpoint(&loaded, &ckpt_b).unwrap();
    assert_eq!(std::fs::read(&ckpt_a).unwrap(), std::fs::read(&ckpt_b).unwrap());

    // embedding matrix round trip preserves ids, data, and search results
    let embs = embeddings_of(&t);
    let emb_path = dir.path().join("products.emb");
    embs.save(&emb_path).unwrap();
    let embs2 = EmbeddingMatrix::load(&emb_path).unwrap();
    assert_eq!(embs.len(), embs2.len());
    let q = embs.row(0).to_vec();
    assert_eq!(brute_force(&embs, &q, 5), brute_force(&embs2, &q, 5));

    // index round trip answers identically
    let index = HcIndex::build(&embs, 4, 10, 3).unwrap();
    let idx_path = dir.path().join("products.idx");
    index.save(&idx_path).unwrap();
    let index2 = HcIndex::load(&idx_path).unwrap();
    for i in 0..embs.len() {
        let q = embs.row(i);
        assert_eq!(index.search(q, 5, 4), index2.search(q, 5, 4));
    }
}

#[test]
fn vocabulary_scales_and_round_trips() {
    let mut vocab = Vocab::default();
    let tokens: Vec<String> = (0..10_000).map(|i| format!("tok{i:05}")).collect();
    vocab.extend(tokens.iter().map(String::as_str));
    assert_eq!(vocab.len(), 10_000);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("big.vocab");
    vocab.save(&path).unwrap();
    let loaded = Vocab::load(&path).unwrap();
    assert_eq!(loaded.len(), 10_000);
    for (i, tok) in tokens.iter().enumerate() {
        assert_eq!(loaded.id_of(tok), Some(i as u32));
    }
    let ids = loaded.ids_for(&["tok00042".into(), "tok09999".into()]).unwrap();
    assert_eq!(ids, vec![42, 9999]);
}

#[test]
fn search_edges_match_brute_force() {
    let t = small_trainer(5);
    let embs = embeddings_of(&t);
    let index = HcIndex::build(&embs, 4, 10, 5).unwrap();
    let q = embs.row(3).to_vec();

    assert!(index.search(&q, 0, 2).is_empty());
    // k beyond the corpus returns everything, same order as brute force
    let all = index.search(&q, 1000, 4);
    assert_eq!(all.len(), embs.len());
    assert_eq!(all, brute_force(&embs, &q, 1000));
    // nprobe beyond the cluster count clamps to exhaustive
    assert_eq!(index.search(&q, 5, 1000), brute_force(&embs, &q, 5));
}

#[test]
fn in_process_pipeline_is_deterministic() {
    let a = small_trainer(9);
    let b = small_trainer(9);
    let embs_a = embeddings_of(&a);
    let embs_b = embeddings_of(&b);
    let dir = tempfile::tempdir().unwrap();
    let (pa, pb) = (dir.path().join("a.emb"), dir.path().join("b.emb"));
    embs_a.save(&pa).unwrap();
    embs_b.save(&pb).unwrap();
    assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());

    let ia = HcIndex::build(&embs_a, 4, 10, 9).unwrap();
    let ib = HcIndex::build(&embs_b, 4, 10, 9).unwrap();
    let (qa, qb) = (dir.path().join("a.idx"), dir.path().join("b.idx"));
    ia.save(&qa).unwrap();
    ib.save(&qb).unwrap();
    assert_eq!(std::fs::read(&qa).unwrap(), std::fs::read(&qb).unwrap());
}
