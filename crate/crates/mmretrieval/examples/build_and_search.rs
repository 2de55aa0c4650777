//! Clustered approximate search: build the index over planted clusters and
//! sweep the probe count against brute force.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use mmretrieval::index::{brute_force, recall_against_exact, EmbeddingMatrix, HcIndex};
use mmretrieval::math;

fn main() -> mmretrieval::Result<()> {
    let (d, clusters, per) = (32, 20, 100);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut gauss = |d: usize| -> Vec<f64> {
        (0..d).map(|_| StandardNormal.sample(&mut rng)).collect()
    };

    let centers: Vec<Vec<f64>> = (0..clusters).map(|_| math::normalized(&gauss(d)).unwrap()).collect();
    let mut embs = EmbeddingMatrix::new(d);
    let mut queries = Vec::new();
    for (c, center) in centers.iter().enumerate() {
        for k in 0..per {
            let noisy: Vec<f64> = center
                .iter()
                .zip(gauss(d))
                .map(|(m, n)| m + 0.3 * n)
                .collect();
            embs.push((c * per + k + 1) as u64, &math::normalized(&noisy)?)?;
        }
        queries.push(
            math::normalized(&center.iter().zip(gauss(d)).map(|(m, n)| m + 0.3 * n).collect::<Vec<_>>())?,
        );
    }

    let index = HcIndex::build(&embs, clusters, 10, 5)?;
    println!("{} embeddings in {} clusters", index.len(), index.n_centroids());

    for nprobe in [1, 2, 5, 10, clusters] {
        let mut recall = 0.0;
        for q in &queries {
            let approx = index.search(q, 10, nprobe);
            let exact = brute_force(&embs, q, 10);
            recall += recall_against_exact(&approx, &exact) / queries.len() as f64;
        }
        println!("nprobe {nprobe:3}: mean recall@10 vs brute force {recall:.4}");
    }

    // probing every cluster is exhaustive, so it must equal brute force
    let q = &queries[0];
    assert_eq!(index.search(q, 10, clusters), brute_force(&embs, q, 10));
    println!("nprobe = C reproduces brute force exactly");
    Ok(())
}
