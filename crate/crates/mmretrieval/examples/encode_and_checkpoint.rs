//! Encoders and the checkpoint format: unit-sphere outputs, order-invariant
//! queries, patch masking, and a lossless save/load round trip.

use mmretrieval::encoder::{
    encode_product, encode_query, load_checkpoint, mask_patches, save_checkpoint, Dims,
    EncoderParams,
};
use mmretrieval::math;
use mmretrieval::trainer::synthetic::{make_synthetic, SyntheticSpec};

fn main() -> mmretrieval::Result<()> {
    let (catalog, _, _) = make_synthetic(&SyntheticSpec::default(), 21);
    let params = EncoderParams::init(Dims::new(catalog.vocab.len(), 32, 8), 21);

    let a = encode_query(&params, &catalog.vocab, &["c0a".into(), "c1b".into()])?;
    let b = encode_query(&params, &catalog.vocab, &["c1b".into(), "c0a".into()])?;
    println!("query norm {:.12}, order-invariant: {}", math::l2_norm(&a.u), a.u == b.u);

    let product = &catalog.products()[0];
    let enc = encode_product(&params, &catalog.vocab, product)?;
    println!("product {} norm {:.12}", product.id, math::l2_norm(&enc.v));

    let refs: Vec<&_> = catalog.products().iter().take(4).collect();
    let masked = mask_patches(&params, &refs, 0.25, 9)?;
    println!(
        "masked {} of {} patch slots",
        masked.n_mask,
        refs.len() * refs[0].patches.len()
    );

    // checkpoints store f32: the first load rounds, every later trip is
    // bit-exact
    let dir = tempfile::tempdir().expect("tempdir");
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&params, &path)?;
    let loaded = load_checkpoint(&path)?;
    let rounded = params
        .tensors()
        .iter()
        .zip(loaded.tensors().iter())
        .all(|(x, y)| x.iter().zip(y.iter()).all(|(a, b)| *a as f32 == *b as f32));
    let path2 = dir.path().join("model2.ckpt");
    save_checkpoint(&loaded, &path2)?;
    let stable = load_checkpoint(&path2)?
        .tensors()
        .iter()
        .zip(loaded.tensors().iter())
        .all(|(x, y)| x == y);
    println!(
        "checkpoint {} bytes, f32-rounded match: {rounded}, second trip bit-exact: {stable}",
        std::fs::metadata(&path).expect("metadata").len()
    );
    Ok(())
}
