//! The three offline metrics on a hand-sized eval set.

use mmretrieval::catalog::{Catalog, Product, Query};
use mmretrieval::metrics::{p_cate, p_rel, recall_at_k, report_csv, EvalCase, JaccardScorer, MetricRow};

fn product(id: u64, title: &str, category: &str) -> Product {
    Product {
        id,
        title_tokens: title.split_whitespace().map(str::to_string).collect(),
        patches: Vec::new(),
        brand: "b".into(),
        category: category.into(),
        sample_prob: None,
    }
}

fn main() -> mmretrieval::Result<()> {
    let catalog = Catalog::from_products(vec![
        product(1, "red summer dress", "dresses"),
        product(2, "blue running shoe", "shoes"),
        product(3, "red canvas shoe", "shoes"),
        product(4, "green wool hat", "hats"),
    ])?;

    let mut cases = vec![
        EvalCase::new(Query::parse("red dress")?, vec![1], "dresses".into()),
        EvalCase::new(Query::parse("running shoe")?, vec![2], "shoes".into()),
        EvalCase::new(Query::parse("red shoe")?, vec![3], "shoes".into()),
    ];
    // pretend retrieval returned these top-3 lists
    cases[0].retrieved = vec![1, 3, 4];
    cases[1].retrieved = vec![3, 2, 1];
    cases[2].retrieved = vec![4, 1, 2];

    let scorer = JaccardScorer;
    let rows = vec![
        MetricRow { metric: "recall".into(), k: 3, value: recall_at_k(&cases)?, n_cases: cases.len() },
        MetricRow { metric: "p_rel".into(), k: 3, value: p_rel(&cases, &catalog, &scorer)?, n_cases: cases.len() },
        MetricRow { metric: "p_cate".into(), k: 3, value: p_cate(&cases, &catalog, &scorer)?, n_cases: cases.len() },
    ];
    print!("{}", report_csv(&rows));

    // the third case never retrieves its target, so recall is 2/3
    assert!((rows[0].value - 2.0 / 3.0).abs() < 1e-12);
    Ok(())
}
