//! Generate the clustered synthetic corpus and estimate sampling
//! probabilities from a skewed interaction log.

use mmretrieval::catalog::qid_pairs;
use mmretrieval::trainer::synthetic::{make_synthetic, SyntheticSpec};

fn main() -> mmretrieval::Result<()> {
    let spec = SyntheticSpec {
        n_clusters: 4,
        products_per_cluster: 8,
        patches_per_product: 4,
        patch_dim: 8,
        noise: 0.1,
    };
    let (mut catalog, mut interactions, cases) = make_synthetic(&spec, 7);
    println!(
        "{} products, {} interactions, {} eval cases, vocabulary {}",
        catalog.len(),
        interactions.len(),
        cases.len(),
        catalog.vocab.len()
    );
    let sample = &catalog.products()[0];
    println!("first product: id {} title {:?} category {}", sample.id, sample.title_tokens, sample.category);

    // skew the log: product 1 gets many extra clicks
    let popular = interactions[0].clone();
    for _ in 0..60 {
        interactions.push(popular.clone());
    }
    catalog.estimate_sample_probs(&qid_pairs(&interactions), 1.0)?;

    let mut probs: Vec<(u64, f64)> = catalog
        .products()
        .iter()
        .map(|p| (p.id, p.sample_prob.unwrap()))
        .collect();
    probs.sort_by(|a, b| b.1.total_cmp(&a.1));
    println!("\nmost sampled products (id, probability):");
    for (id, p) in probs.iter().take(3) {
        println!("  {id:3} {p:.4}");
    }
    let total: f64 = probs.iter().map(|x| x.1).sum();
    println!("probabilities sum to {total:.6}");
    Ok(())
}
