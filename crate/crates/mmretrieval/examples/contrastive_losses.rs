//! The two training objectives and the sampling-probability correction.

use mmretrieval::losses::{
    corrected_similarity, mpm_r_loss, qpm_loss, NegativeSets, Temperature,
};
use mmretrieval::math::Grid3;

fn main() -> mmretrieval::Result<()> {
    // masked-patch loss on a 1x2 grid: the aligned slot scores e, the other
    // slot scores 1, so the loss is -log(e / (e + 1))
    let d = 3;
    let mut predictions = Grid3::zeros(1, 2, d);
    predictions.at_mut(0, 0)[0] = 1.0;
    let target = vec![1.0, 0.0, 0.0];
    let tau = Temperature::new(1.0)?;
    let mpm = mpm_r_loss(&[target], &[(0, 0)], &predictions, &tau, false)?;
    println!("two-slot masked loss: {:.10}", mpm.loss);
    println!("temperature gradient: {:+.6}", mpm.d_log_tau);

    // query-product loss with one negative at the same similarity: ln 2
    let u = vec![1.0, 0.0];
    let v_pos = vec![0.6, 0.8];
    let mut negs = NegativeSets::empty();
    negs.cdns.push(vec![0.6, 0.8], 0.1);
    let qpm = qpm_loss(&u, &v_pos, 0.1, &negs)?;
    println!("equal-similarity pair loss: {:.10} (ln 2 = {:.10})", qpm.loss, 2f64.ln());

    // the correction demotes frequently sampled products
    let query = vec![1.0, 0.0];
    let product = vec![1.0, 0.0];
    let popular = corrected_similarity(&query, &product, 0.5)?;
    let rare = corrected_similarity(&query, &product, 0.01)?;
    println!("same dot product, corrected: popular {popular:.4} rare {rare:.4}");
    Ok(())
}
