//! Synthetic clustered corpus for training and evaluation runs.
//!
//! Products fall into clusters sharing a token family, a category, and a
//! patch-feature direction. Every product additionally carries a unique
//! token that appears in its title and in its queries, so a working
//! pipeline can single it out. Training and evaluation queries use
//! different token combinations around the shared unique token.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::catalog::{Catalog, Interaction, Product, Query};
use crate::error::Result;
use crate::math;
use crate::metrics::EvalCase;

#[derive(Debug, Clone, Copy)]
pub struct SyntheticSpec {
    pub n_clusters: usize,
    pub products_per_cluster: usize,
    pub patches_per_product: usize,
    pub patch_dim: usize,
    /// Standard deviation of per-patch noise around the cluster direction.
    pub noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> SyntheticSpec {
        SyntheticSpec {
            n_clusters: 4,
            products_per_cluster: 16,
            patches_per_product: 4,
            patch_dim: 8,
            noise: 0.1,
        }
    }
}

fn cluster_tokens(c: usize) -> [String; 4] {
    [format!("c{c}a"), format!("c{c}b"), format!("c{c}c"), format!("c{c}d")]
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

/// Build the corpus: a catalog, two training interactions per product, and
/// one held-out eval case per product whose intent is the product's
/// category.
pub fn make_synthetic(
    spec: &SyntheticSpec,
    seed: u64,
) -> (Catalog, Vec<Interaction>, Vec<EvalCase>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut products = Vec::new();
    let mut interactions = Vec::new();
    let mut cases = Vec::new();

    let centers: Vec<Vec<f64>> = (0..spec.n_clusters)
        .map(|_| {
            let g = gaussian(&mut rng, spec.patch_dim);
            math::normalized(&g).expect("gaussian draw is almost surely nonzero")
        })
        .collect();

    for c in 0..spec.n_clusters {
        let toks = cluster_tokens(c);
        for k in 0..spec.products_per_cluster {
            let id = (c * spec.products_per_cluster + k + 1) as u64;
            let unique = format!("p{id}");
            let title = vec![
                toks[k % 4].clone(),
                toks[(k + 1) % 4].clone(),
                toks[(k + 2) % 4].clone(),
                unique.clone(),
            ];
            let patches: Vec<Vec<f64>> = (0..spec.patches_per_product)
                .map(|_| {
                    let g = gaussian(&mut rng, spec.patch_dim);
                    centers[c]
                        .iter()
                        .zip(&g)
                        .map(|(m, n)| m + spec.noise * n)
                        .collect()
                })
                .collect();
            products.push(Product {
                id,
                title_tokens: title,
                patches,
                brand: format!("brand{}", k % 3),
                category: format!("cat{c}"),
                sample_prob: None,
            });

            let q1 = format!("{} {} {unique}", toks[k % 4], toks[(k + 1) % 4]);
            let q2 = format!("{} {} {unique}", toks[(k + 1) % 4], toks[(k + 2) % 4]);
            for raw in [q1, q2] {
                interactions.push(Interaction {
                    query: Query::parse(&raw).expect("synthetic queries are non-empty"),
                    product_id: id,
                });
            }

            let held_out = format!("{} {} {unique}", toks[(k + 2) % 4], toks[(k + 3) % 4]);
            cases.push(EvalCase::new(
                Query::parse(&held_out).expect("synthetic queries are non-empty"),
                vec![id],
                format!("cat{c}"),
            ));
        }
    }

    let catalog = Catalog::from_products(products).expect("synthetic ids are unique");
    (catalog, interactions, cases)
}

/// Convenience for tests and examples: parse a `CxP` shape like `"4x16"`.
pub fn parse_shape(s: &str) -> Result<(usize, usize)> {
    let err = || crate::error::Error::Config(format!(
        "synthetic shape must look like CxP (e.g. 4x16), got {s:?}"
    ));
    let (c, p) = s.split_once(['x', 'X']).ok_or_else(err)?;
    let c: usize = c.trim().parse().map_err(|_| err())?;
    let p: usize = p.trim().parse().map_err(|_| err())?;
    if c == 0 || p == 0 {
        return Err(err());
    }
    Ok((c, p))
}
