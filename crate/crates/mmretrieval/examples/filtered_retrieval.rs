//! Boolean attribute filtering over ANN candidates.

use mmretrieval::catalog::{Catalog, Product};
use mmretrieval::filter::{apply_filter, build_inverted, parse_filter};

fn product(id: u64, title: &str, brand: &str, category: &str) -> Product {
    Product {
        id,
        title_tokens: title.split_whitespace().map(str::to_string).collect(),
        patches: Vec::new(),
        brand: brand.into(),
        category: category.into(),
        sample_prob: None,
    }
}

fn main() -> mmretrieval::Result<()> {
    let catalog = Catalog::from_products(vec![
        product(1, "air runner", "Nike", "Shoes"),
        product(2, "court classic", "Adidas", "Shoes"),
        product(3, "dri fit tee", "Nike", "Shirts"),
        product(4, "pegasus trail", "Nike", "Shoes"),
        product(5, "samba suede", "Adidas", "Shoes"),
    ])?;
    let inverted = build_inverted(&catalog);

    let ranked = vec![2, 1, 5, 4, 3];
    println!("ranked candidates: {ranked:?}");

    let expr = parse_filter("Brand:Nike AND Category:Shoes")?;
    println!("filter {:?}", expr.conjuncts);
    println!("kept: {:?}", apply_filter(&ranked, &expr, &inverted));

    let none = parse_filter("Brand:Puma")?;
    println!("unknown brand keeps: {:?}", apply_filter(&ranked, &none, &inverted));

    match parse_filter("Brand Nike") {
        Err(e) => println!("malformed filter: {e}"),
        Ok(_) => unreachable!("missing colon must not parse"),
    }
    Ok(())
}
