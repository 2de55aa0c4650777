//! Query normalization: lowercase, split, sort, hash.
//!
//! The qid is an FNV-1a hash over the sorted tokens, so word order and
//! letter case never change the retrieval key.

use mmretrieval::catalog::Query;

fn main() -> mmretrieval::Result<()> {
    for raw in ["red dress", "dress red", "Red  DRESS", "running shoes nike"] {
        let q = Query::parse(raw)?;
        println!("{raw:24} -> tokens {:?} qid {}", q.tokens, q.qid);
    }

    let a = Query::parse("red dress")?;
    let b = Query::parse("DRESS red")?;
    assert_eq!(a.qid, b.qid);
    println!("\nsame tokens, same qid: {}", a.qid);

    // duplicate tokens are kept: a multiset, not a set
    let c = Query::parse("red red dress")?;
    assert_ne!(a.qid, c.qid);
    println!("duplicates matter: {:?} hashes to {}", c.tokens, c.qid);
    Ok(())
}
