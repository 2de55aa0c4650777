//! Boolean attribute filtering over ANN results.
//!
//! An inverted index maps `(attribute, value)` pairs to sorted posting
//! lists of product ids. Filter expressions are pure conjunctions
//! (`Brand:Nike AND Category:Shoes`); applying one keeps the ANN ranking
//! order and drops every id outside the intersection of the conjunct
//! postings. An unknown pair has an empty posting, so strict AND semantics
//! filter everything (with a logged warning) rather than erroring.

use std::collections::HashMap;

use crate::catalog::Catalog;
use crate::error::{Error, Result};

/// Posting lists keyed by `(attribute name, value)`. Names are stored
/// lowercase; values are matched verbatim.
#[derive(Debug, Clone, Default)]
pub struct InvertedIndex {
    postings: HashMap<(String, String), Vec<u64>>,
}

impl InvertedIndex {
    /// Sorted, duplicate-free posting list for a pair; empty if unseen.
    pub fn posting(&self, name: &str, value: &str) -> &[u64] {
        self.postings
            .get(&(name.to_lowercase(), value.to_string()))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn n_postings(&self) -> usize {
        self.postings.len()
    }
}

/// Index every product's brand and category.
pub fn build_inverted(catalog: &Catalog) -> InvertedIndex {
    let mut postings: HashMap<(String, String), Vec<u64>> = HashMap::new();
    for p in catalog.products() {
        for (name, value) in [("brand", &p.brand), ("category", &p.category)] {
            postings
                .entry((name.to_string(), value.clone()))
                .or_default()
                .push(p.id);
        }
    }
    for list in postings.values_mut() {
        list.sort_unstable();
        list.dedup();
    }
    InvertedIndex { postings }
}

/// A conjunction of `(attribute, required value)` constraints. Empty means
/// no constraint.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FilterExpr {
    pub conjuncts: Vec<(String, String)>,
}

impl FilterExpr {
    pub fn is_empty(&self) -> bool {
        self.conjuncts.is_empty()
    }
}

#[derive(Debug, PartialEq)]
enum Token {
    Word(String),
    Colon,
    And,
}

fn tokenize(spec: &str) -> Vec<(Token, usize)> {
    let mut out = Vec::new();
    let mut word = String::new();
    let mut word_col = 0;
    let flush = |word: &mut String, word_col: usize, out: &mut Vec<(Token, usize)>| {
        if word.is_empty() {
            return;
        }
        let tok = if word.eq_ignore_ascii_case("and") {
            Token::And
        } else {
            Token::Word(std::mem::take(word))
        };
        word.clear();
        out.push((tok, word_col));
    };
    for (i, ch) in spec.char_indices() {
        match ch {
            c if c.is_whitespace() => flush(&mut word, word_col, &mut out),
            ':' => {
                flush(&mut word, word_col, &mut out);
                out.push((Token::Colon, i + 1));
            }
            c => {
                if word.is_empty() {
                    word_col = i + 1;
                }
                word.push(c);
            }
        }
    }
    flush(&mut word, word_col, &mut out);
    out
}

/// Parse `name ":" value ("AND" name ":" value)*`. Whitespace around
/// tokens is ignored; names are lowercased; values are kept verbatim. The
/// empty string parses to the no-constraint expression. Errors carry the
/// 1-based column of the offending token.
pub fn parse_filter(spec: &str) -> Result<FilterExpr> {
    let tokens = tokenize(spec);
    let mut conjuncts = Vec::new();
    let mut i = 0;
    let err = |col: usize, msg: &str| Error::FilterParse {
        col,
        msg: msg.to_string(),
    };
    while i < tokens.len() {
        if !conjuncts.is_empty() {
            match &tokens[i] {
                (Token::And, _) => i += 1,
                (_, col) => return Err(err(*col, "expected AND between constraints")),
            }
            if i >= tokens.len() {
                let col = tokens[i - 1].1;
                return Err(err(col, "dangling AND"));
            }
        }
        let name = match &tokens[i] {
            (Token::Word(w), _) => w.to_lowercase(),
            (_, col) => return Err(err(*col, "expected an attribute name")),
        };
        i += 1;
        match tokens.get(i) {
            Some((Token::Colon, _)) => i += 1,
            Some((_, col)) => return Err(err(*col, "expected ':' after attribute name")),
            None => {
                return Err(err(
                    tokens[i - 1].1,
                    "expected ':' and a value after attribute name",
                ))
            }
        }
        let value = match tokens.get(i) {
            Some((Token::Word(w), _)) => w.clone(),
            Some((_, col)) => return Err(err(*col, "expected a value after ':'")),
            None => return Err(err(tokens[i - 1].1, "expected a value after ':'")),
        };
        i += 1;
        conjuncts.push((name, value));
    }
    Ok(FilterExpr { conjuncts })
}

/// Galloping intersection of two sorted lists.
fn intersect_sorted(a: &[u64], b: &[u64]) -> Vec<u64> {
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let mut out = Vec::new();
    let mut base = 0;
    for &x in small {
        if base >= large.len() {
            break;
        }
        // exponential probe for a window whose last element is >= x
        let mut offset = 1;
        while base + offset < large.len() && large[base + offset] < x {
            offset *= 2;
        }
        let window_end = (base + offset + 1).min(large.len());
        match large[base..window_end].binary_search(&x) {
            Ok(pos) => {
                out.push(x);
                base += pos + 1;
            }
            Err(pos) => base += pos,
        }
    }
    out
}

/// Keep input ids that satisfy every conjunct, preserving order. Unknown
/// pairs log a warning and produce an empty result under strict AND.
pub fn apply_filter(ann_results: &[u64], expr: &FilterExpr, index: &InvertedIndex) -> Vec<u64> {
    if expr.is_empty() {
        return ann_results.to_vec();
    }
    let mut allowed: Option<Vec<u64>> = None;
    for (name, value) in &expr.conjuncts {
        let posting = index.posting(name, value);
        if posting.is_empty() {
            log::warn!("no products match {name}:{value}; strict AND filters everything");
            return Vec::new();
        }
        allowed = Some(match allowed {
            None => posting.to_vec(),
            Some(prev) => intersect_sorted(&prev, posting),
        });
        if allowed.as_ref().is_some_and(Vec::is_empty) {
            return Vec::new();
        }
    }
    let allowed = allowed.unwrap_or_default();
    ann_results
        .iter()
        .filter(|id| allowed.binary_search(id).is_ok())
        .copied()
        .collect()
}
