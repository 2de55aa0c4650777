//! Product corpus, query records, and sampling-probability estimation.
//!
//! The catalog owns the canonical domain records: products with tokenized
//! titles, patch-feature sequences, and attributes, plus the dense token
//! vocabulary built from titles and query logs. Records are read from a
//! line-delimited file with one JSON object per line (see [`Catalog::load`]).
//!
//! A catalog is immutable after loading and safe to share read-only across
//! workers; probability estimation and patch materialization are single-writer
//! batch steps done before training starts.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::querynorm;

/// One product: id, pre-tokenized title, patch-feature sequence, attributes,
/// and (once estimated) its sampling probability.
#[derive(Debug, Clone, PartialEq)]
pub struct Product {
    pub id: u64,
    pub title_tokens: Vec<String>,
    /// `L` patch-feature vectors of dimension `D_img`. May be empty until
    /// [`Catalog::materialize_patches`] fills in synthetic features.
    pub patches: Vec<Vec<f64>>,
    pub brand: String,
    pub category: String,
    /// Strictly positive once estimated; `log` of it enters the corrected
    /// similarity, so zero is never allowed.
    pub sample_prob: Option<f64>,
}

/// A normalized query: raw text, sorted tokens, 32-bit qid, and optional
/// attribute constraints for Boolean filtering.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub raw: String,
    pub tokens: Vec<String>,
    pub qid: u32,
    pub constraints: Vec<(String, String)>,
}

impl Query {
    /// Normalize raw text into a sorted token list and its qid.
    pub fn parse(raw: &str) -> Result<Query> {
        let tokens = querynorm::normalize(raw)?;
        let qid = querynorm::qid(&tokens)?;
        Ok(Query {
            raw: raw.to_string(),
            tokens,
            qid,
            constraints: Vec::new(),
        })
    }
}

/// One click/purchase event pairing a query with a product.
#[derive(Debug, Clone)]
pub struct Interaction {
    pub query: Query,
    pub product_id: u64,
}

/// Project interactions down to the `(qid, product id)` pairs used for
/// sampling-probability estimation.
pub fn qid_pairs(interactions: &[Interaction]) -> Vec<(u32, u64)> {
    interactions
        .iter()
        .map(|i| (i.query.qid, i.product_id))
        .collect()
}

/// Dense token -> id map. Ids are assigned in first-appearance order, so the
/// same corpus always produces the same vocabulary.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Vocab {
    token_to_id: HashMap<String, u32>,
    tokens: Vec<String>,
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Add any unseen tokens, keeping ids dense.
    pub fn extend<'a, I: IntoIterator<Item = &'a str>>(&mut self, tokens: I) {
        for t in tokens {
            if !self.token_to_id.contains_key(t) {
                let id = self.tokens.len() as u32;
                self.token_to_id.insert(t.to_string(), id);
                self.tokens.push(t.to_string());
            }
        }
    }

    /// Map a token list to ids, failing on the first out-of-vocabulary token.
    pub fn ids_for(&self, tokens: &[String]) -> Result<Vec<u32>> {
        tokens
            .iter()
            .map(|t| {
                self.id_of(t)
                    .ok_or_else(|| Error::UnknownToken(t.to_string()))
            })
            .collect()
    }

    /// One token per line, id = line number.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        for t in &self.tokens {
            writeln!(w, "{t}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut vocab = Vocab::default();
        for line in BufReader::new(f).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            vocab.extend([line.as_str()]);
        }
        Ok(vocab)
    }
}

/// Serialized form of a product record: one JSON object per line.
#[derive(Debug, Serialize, Deserialize)]
struct ProductRecord {
    id: u64,
    title: String,
    brand: String,
    category: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    patches: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sample_prob: Option<f64>,
}

/// The product corpus plus its token vocabulary.
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    products: Vec<Product>,
    by_id: HashMap<u64, usize>,
    pub vocab: Vocab,
}

impl Catalog {
    /// Build a catalog from in-memory products, checking id uniqueness and
    /// building the vocabulary from titles in the given order.
    pub fn from_products(products: Vec<Product>) -> Result<Catalog> {
        let mut catalog = Catalog::default();
        for p in products {
            catalog.push_product(p)?;
        }
        Ok(catalog)
    }

    fn push_product(&mut self, product: Product) -> Result<()> {
        if self.by_id.contains_key(&product.id) {
            return Err(Error::DuplicateId(product.id));
        }
        self.vocab
            .extend(product.title_tokens.iter().map(String::as_str));
        self.by_id.insert(product.id, self.products.len());
        self.products.push(product);
        Ok(())
    }

    /// Read a line-delimited record file. Titles are lowercased and
    /// whitespace-split into tokens. Parse failures name the 1-based line
    /// number; duplicate ids fail with the offending id.
    pub fn load(path: &Path) -> Result<Catalog> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut catalog = Catalog::default();
        for (idx, line) in BufReader::new(f).lines().enumerate() {
            let lineno = idx + 1;
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ProductRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: lineno,
                msg: e.to_string(),
            })?;
            if let Some(p) = rec.sample_prob {
                if p <= 0.0 {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: format!("sample_prob must be positive, got {p}"),
                    });
                }
            }
            let title_tokens: Vec<String> = rec
                .title
                .to_lowercase()
                .split_whitespace()
                .map(str::to_string)
                .collect();
            catalog.push_product(Product {
                id: rec.id,
                title_tokens,
                patches: rec.patches.unwrap_or_default(),
                brand: rec.brand,
                category: rec.category,
                sample_prob: rec.sample_prob,
            })?;
        }
        Ok(catalog)
    }

    /// Write the catalog back out in the same line-delimited format. Token
    /// lists and attributes round-trip bit-identically through load/save.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        for p in &self.products {
            let rec = ProductRecord {
                id: p.id,
                title: p.title_tokens.join(" "),
                brand: p.brand.clone(),
                category: p.category.clone(),
                patches: if p.patches.is_empty() {
                    None
                } else {
                    Some(p.patches.clone())
                },
                sample_prob: p.sample_prob,
            };
            let line = serde_json::to_string(&rec).map_err(|e| Error::Parse {
                line: 0,
                msg: e.to_string(),
            })?;
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.products.len()
    }

    pub fn is_empty(&self) -> bool {
        self.products.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&Product> {
        self.by_id.get(&id).map(|&i| &self.products[i])
    }

    pub fn contains(&self, id: u64) -> bool {
        self.by_id.contains_key(&id)
    }

    /// Products in load order.
    pub fn products(&self) -> &[Product] {
        &self.products
    }

    /// Extend the vocabulary with query-side tokens (the vocabulary covers
    /// all titles and all logged queries).
    pub fn extend_vocab_with_queries<'a, I>(&mut self, queries: I)
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        for tokens in queries {
            self.vocab.extend(tokens.iter().map(String::as_str));
        }
    }

    /// Additive-smoothed empirical click frequency:
    /// `p(i) = (count(i) + smoothing) / (total + smoothing * |products|)`.
    ///
    /// The probabilities are strictly positive and sum to one. Interactions
    /// naming an unknown product id fail the whole estimation.
    pub fn estimate_sample_probs(
        &mut self,
        interactions: &[(u32, u64)],
        smoothing: f64,
    ) -> Result<()> {
        if smoothing <= 0.0 {
            return Err(Error::Config(format!(
                "smoothing must be positive, got {smoothing}"
            )));
        }
        if self.products.is_empty() {
            return Err(Error::Config("cannot estimate probabilities on an empty catalog".into()));
        }
        let mut counts = vec![0u64; self.products.len()];
        for &(_qid, pid) in interactions {
            let idx = *self.by_id.get(&pid).ok_or(Error::UnknownId(pid))?;
            counts[idx] += 1;
        }
        let denom = interactions.len() as f64 + smoothing * self.products.len() as f64;
        for (p, c) in self.products.iter_mut().zip(&counts) {
            p.sample_prob = Some((*c as f64 + smoothing) / denom);
        }
        Ok(())
    }

    /// Fill in synthetic Gaussian patch features for every product that has
    /// none. Features are keyed by product id with a fixed salt, so every
    /// command that loads the same patchless file sees identical features
    /// regardless of the run seed.
    pub fn materialize_patches(&mut self, l: usize, d_img: usize) {
        const PATCH_SALT: u64 = 0x70a7c4_f3a7u64;
        for p in &mut self.products {
            if !p.patches.is_empty() {
                continue;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(PATCH_SALT ^ p.id.wrapping_mul(0x9e37_79b9_7f4a_7c15));
            p.patches = (0..l)
                .map(|_| {
                    (0..d_img)
                        .map(|_| StandardNormal.sample(&mut rng))
                        .collect()
                })
                .collect();
        }
    }

    /// Check that every product carries `l` patches of dimension `d_img`.
    pub fn validate_patches(&self, l: usize, d_img: usize) -> Result<()> {
        for p in &self.products {
            if p.patches.len() != l {
                return Err(Error::Shape(format!(
                    "product {} has {} patches, expected {l}",
                    p.id,
                    p.patches.len()
                )));
            }
            if let Some(bad) = p.patches.iter().find(|v| v.len() != d_img) {
                return Err(Error::Shape(format!(
                    "product {} has a patch of dimension {}, expected {d_img}",
                    p.id,
                    bad.len()
                )));
            }
        }
        Ok(())
    }
}
