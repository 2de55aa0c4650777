//! Desk-scale query and product encoders with hand-rolled backward passes.
//!
//! Both encoders follow the same shape: embed, mean-pool, project, then
//! L2-normalize onto the unit sphere. The product encoder fuses a title tower
//! and an image tower; the image tower projects raw patch features into the
//! shared width and normalizes each patch. Masked-patch prediction replaces a
//! transformer with a single mixing layer: each position's prediction is a
//! linear map of the sequence mean plus a linear map of the position's own
//! input.
//!
//! All arithmetic is `f64` with fixed reduction order, so forward passes,
//! gradients, and checkpoints are bit-reproducible. Checkpoints are written
//! as little-endian `f32` (format `MMR1`).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::catalog::{Product, Vocab};
use crate::error::{Error, Result};
use crate::math::{self, Grid3};

/// Parameter shapes. `d` is the shared embedding width, `d_img` the raw
/// patch-feature width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub vocab: usize,
    pub d: usize,
    pub d_img: usize,
}

impl Dims {
    pub fn new(vocab: usize, d: usize, d_img: usize) -> Dims {
        Dims { vocab, d, d_img }
    }
}

/// All trainable tensors, stored row-major.
///
/// Checkpoint layout order: `token_emb`, `patch_proj`, `query_proj`,
/// `title_proj`, `image_proj`, `fuse_proj`, `mask_emb`, `mix_mean`,
/// `mix_self`. The two mixing matrices parameterize [`predict_masked`].
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub dims: Dims,
    /// `vocab x d` token table.
    pub token_emb: Vec<f64>,
    /// `d_img x d`; patches are projected by `W^T patch`.
    pub patch_proj: Vec<f64>,
    /// `d x d` projection for pooled query tokens.
    pub query_proj: Vec<f64>,
    /// `d x d` projection for pooled title tokens.
    pub title_proj: Vec<f64>,
    /// `d x d` projection for pooled patch embeddings.
    pub image_proj: Vec<f64>,
    /// `d x d` fusion applied to the sum of the two towers.
    pub fuse_proj: Vec<f64>,
    /// `d` replacement embedding for masked patch positions.
    pub mask_emb: Vec<f64>,
    /// `d x d` map applied to the sequence mean in [`predict_masked`].
    pub mix_mean: Vec<f64>,
    /// `d x d` map applied to the position's own input in [`predict_masked`].
    pub mix_self: Vec<f64>,
}

fn gauss_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let g: f64 = StandardNormal.sample(rng);
            g * std
        })
        .collect()
}

impl EncoderParams {
    /// Seeded Gaussian initialization. Scales keep projected vectors near
    /// unit norm so the initial similarities are well-conditioned.
    pub fn init(dims: Dims, seed: u64) -> EncoderParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = dims.d;
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        let patch_std = 1.0 / ((dims.d_img * d) as f64).sqrt();
        EncoderParams {
            dims,
            token_emb: gauss_vec(&mut rng, dims.vocab * d, 0.1),
            patch_proj: gauss_vec(&mut rng, dims.d_img * d, patch_std),
            query_proj: gauss_vec(&mut rng, d * d, inv_sqrt_d),
            title_proj: gauss_vec(&mut rng, d * d, inv_sqrt_d),
            image_proj: gauss_vec(&mut rng, d * d, inv_sqrt_d),
            fuse_proj: gauss_vec(&mut rng, d * d, inv_sqrt_d),
            mask_emb: gauss_vec(&mut rng, d, inv_sqrt_d),
            mix_mean: gauss_vec(&mut rng, d * d, inv_sqrt_d),
            mix_self: gauss_vec(&mut rng, d * d, inv_sqrt_d),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Tensors in checkpoint order.
    pub fn tensors(&self) -> [&Vec<f64>; 9] {
        [
            &self.token_emb,
            &self.patch_proj,
            &self.query_proj,
            &self.title_proj,
            &self.image_proj,
            &self.fuse_proj,
            &self.mask_emb,
            &self.mix_mean,
            &self.mix_self,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 9] {
        [
            &mut self.token_emb,
            &mut self.patch_proj,
            &mut self.query_proj,
            &mut self.title_proj,
            &mut self.image_proj,
            &mut self.fuse_proj,
            &mut self.mask_emb,
            &mut self.mix_mean,
            &mut self.mix_self,
        ]
    }
}

/// Gradient accumulator with the same shapes as [`EncoderParams`].
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub token_emb: Vec<f64>,
    pub patch_proj: Vec<f64>,
    pub query_proj: Vec<f64>,
    pub title_proj: Vec<f64>,
    pub image_proj: Vec<f64>,
    pub fuse_proj: Vec<f64>,
    pub mask_emb: Vec<f64>,
    pub mix_mean: Vec<f64>,
    pub mix_self: Vec<f64>,
    /// Gradient of the loss in the temperature's log-parameterization.
    pub d_log_tau: f64,
}

impl ParamGrads {
    pub fn zeros(dims: &Dims) -> ParamGrads {
        let d = dims.d;
        ParamGrads {
            token_emb: vec![0.0; dims.vocab * d],
            patch_proj: vec![0.0; dims.d_img * d],
            query_proj: vec![0.0; d * d],
            title_proj: vec![0.0; d * d],
            image_proj: vec![0.0; d * d],
            fuse_proj: vec![0.0; d * d],
            mask_emb: vec![0.0; d],
            mix_mean: vec![0.0; d * d],
            mix_self: vec![0.0; d * d],
            d_log_tau: 0.0,
        }
    }

    pub fn tensors(&self) -> [&Vec<f64>; 9] {
        [
            &self.token_emb,
            &self.patch_proj,
            &self.query_proj,
            &self.title_proj,
            &self.image_proj,
            &self.fuse_proj,
            &self.mask_emb,
            &self.mix_mean,
            &self.mix_self,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 9] {
        [
            &mut self.token_emb,
            &mut self.patch_proj,
            &mut self.query_proj,
            &mut self.title_proj,
            &mut self.image_proj,
            &mut self.fuse_proj,
            &mut self.mask_emb,
            &mut self.mix_mean,
            &mut self.mix_self,
        ]
    }

    pub fn scale(&mut self, alpha: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= alpha);
        }
        self.d_log_tau *= alpha;
    }
}

/// Backward through `y = x / ||x||`: `dx = (g - (g . y) y) / ||x||`.
fn normalize_backward(grad_out: &[f64], unit: &[f64], prenorm: f64) -> Vec<f64> {
    let gy = math::dot(grad_out, unit);
    let inv = 1.0 / prenorm;
    grad_out
        .iter()
        .zip(unit)
        .map(|(g, y)| (g - gy * y) * inv)
        .collect()
}

fn token_ids_sorted(p: &EncoderParams, vocab: &Vocab, tokens: &[String]) -> Result<Vec<u32>> {
    let mut ids = vocab.ids_for(tokens)?;
    if let Some(&max) = ids.iter().max() {
        if max as usize >= p.dims.vocab {
            return Err(Error::VersionMismatch(format!(
                "vocabulary id {max} out of range for a checkpoint with {} tokens",
                p.dims.vocab
            )));
        }
    }
    // Canonical order makes pooling bit-exactly permutation invariant.
    ids.sort_unstable();
    Ok(ids)
}

fn token_mean(p: &EncoderParams, ids: &[u32]) -> Vec<f64> {
    let d = p.dims.d;
    let mut h = vec![0.0; d];
    for &id in ids {
        let row = &p.token_emb[id as usize * d..(id as usize + 1) * d];
        math::axpy(1.0, row, &mut h);
    }
    let inv = 1.0 / ids.len() as f64;
    h.iter_mut().for_each(|v| *v *= inv);
    h
}

fn token_mean_backward(grads: &mut ParamGrads, d: usize, ids: &[u32], grad_mean: &[f64]) {
    let inv = 1.0 / ids.len() as f64;
    for &id in ids {
        let row = &mut grads.token_emb[id as usize * d..(id as usize + 1) * d];
        math::axpy(inv, grad_mean, row);
    }
}

/// Forward cache for [`encode_query`].
#[derive(Debug, Clone)]
pub struct QueryEncoding {
    /// Unit-norm query embedding.
    pub u: Vec<f64>,
    ids: Vec<u32>,
    h: Vec<f64>,
    y_norm: f64,
}

/// Embed tokens, mean-pool, project, normalize. Output is invariant to token
/// order because pooling runs over canonically sorted token ids.
pub fn encode_query(p: &EncoderParams, vocab: &Vocab, tokens: &[String]) -> Result<QueryEncoding> {
    if tokens.is_empty() {
        return Err(Error::EmptyQuery);
    }
    let d = p.dims.d;
    let ids = token_ids_sorted(p, vocab, tokens)?;
    let h = token_mean(p, &ids);
    let y = math::matvec(&p.query_proj, d, d, &h);
    let y_norm = math::l2_norm(&y);
    let u = math::normalized(&y)?;
    Ok(QueryEncoding { u, ids, h, y_norm })
}

/// Accumulate parameter gradients for `grad_u = dL/du`.
pub fn encode_query_backward(
    p: &EncoderParams,
    enc: &QueryEncoding,
    grad_u: &[f64],
    grads: &mut ParamGrads,
) {
    let d = p.dims.d;
    let gy = normalize_backward(grad_u, &enc.u, enc.y_norm);
    math::outer_acc(&mut grads.query_proj, &gy, &enc.h);
    let gh = math::matvec_t(&p.query_proj, d, d, &gy);
    token_mean_backward(grads, d, &enc.ids, &gh);
}

/// Forward cache for [`encode_product`].
#[derive(Debug, Clone)]
pub struct ProductEncoding {
    /// Unit-norm product embedding.
    pub v: Vec<f64>,
    ids: Vec<u32>,
    tmean: Vec<f64>,
    /// Per-patch unit embeddings and their pre-normalization norms.
    patch_unit: Vec<Vec<f64>>,
    patch_norms: Vec<f64>,
    imean: Vec<f64>,
    s: Vec<f64>,
    z_norm: f64,
}

/// Project one raw patch into the shared width and normalize it.
pub fn project_patch(p: &EncoderParams, patch: &[f64]) -> Result<(Vec<f64>, f64)> {
    if patch.len() != p.dims.d_img {
        return Err(Error::Shape(format!(
            "patch has dimension {}, expected {}",
            patch.len(),
            p.dims.d_img
        )));
    }
    let raw = math::matvec_t(&p.patch_proj, p.dims.d_img, p.dims.d, patch);
    let norm = math::l2_norm(&raw);
    let unit = math::normalized(&raw)?;
    Ok((unit, norm))
}

/// Fuse the title tower and the image tower into one unit vector:
/// `normalize(fuse_proj (title_proj tmean + image_proj imean))`.
pub fn encode_product(
    p: &EncoderParams,
    vocab: &Vocab,
    product: &Product,
) -> Result<ProductEncoding> {
    let d = p.dims.d;
    if product.title_tokens.is_empty() {
        return Err(Error::Shape(format!("product {} has an empty title", product.id)));
    }
    if product.patches.is_empty() {
        return Err(Error::Shape(format!("product {} has no patches", product.id)));
    }
    let ids = token_ids_sorted(p, vocab, &product.title_tokens)?;
    let tmean = token_mean(p, &ids);

    let mut patch_unit = Vec::with_capacity(product.patches.len());
    let mut patch_norms = Vec::with_capacity(product.patches.len());
    for patch in &product.patches {
        let (unit, norm) = project_patch(p, patch)?;
        patch_unit.push(unit);
        patch_norms.push(norm);
    }
    let imean = math::mean_of(&patch_unit);

    let a = math::matvec(&p.title_proj, d, d, &tmean);
    let b = math::matvec(&p.image_proj, d, d, &imean);
    let s: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
    let z = math::matvec(&p.fuse_proj, d, d, &s);
    let z_norm = math::l2_norm(&z);
    let v = math::normalized(&z)?;
    Ok(ProductEncoding {
        v,
        ids,
        tmean,
        patch_unit,
        patch_norms,
        imean,
        s,
        z_norm,
    })
}

/// Accumulate parameter gradients for `grad_v = dL/dv`. `product` supplies
/// the raw patch features for the projection gradient.
pub fn encode_product_backward(
    p: &EncoderParams,
    product: &Product,
    enc: &ProductEncoding,
    grad_v: &[f64],
    grads: &mut ParamGrads,
) {
    let d = p.dims.d;
    let gz = normalize_backward(grad_v, &enc.v, enc.z_norm);
    math::outer_acc(&mut grads.fuse_proj, &gz, &enc.s);
    let gs = math::matvec_t(&p.fuse_proj, d, d, &gz);

    math::outer_acc(&mut grads.title_proj, &gs, &enc.tmean);
    let gtm = math::matvec_t(&p.title_proj, d, d, &gs);
    token_mean_backward(grads, d, &enc.ids, &gtm);

    math::outer_acc(&mut grads.image_proj, &gs, &enc.imean);
    let gim = math::matvec_t(&p.image_proj, d, d, &gs);
    let inv_l = 1.0 / enc.patch_unit.len() as f64;
    for (j, patch) in product.patches.iter().enumerate() {
        let ge: Vec<f64> = gim.iter().map(|g| g * inv_l).collect();
        let gp = normalize_backward(&ge, &enc.patch_unit[j], enc.patch_norms[j]);
        math::outer_acc(&mut grads.patch_proj, patch, &gp);
    }
}

/// A batch of products with some patch positions masked out.
#[derive(Debug, Clone)]
pub struct MaskedBatch {
    /// `N x L x d` inputs: unit patch embeddings with masked slots replaced
    /// by `mask_emb`.
    pub inputs: Grid3,
    /// Unmasked unit patch embeddings (the forward cache for the targets).
    pub unit: Grid3,
    /// Pre-normalization norms, indexed `i * L + j`.
    pub norms: Vec<f64>,
    /// Original unit embeddings at the masked slots, in `mask_positions`
    /// order.
    pub targets: Vec<Vec<f64>>,
    pub mask_positions: Vec<(usize, usize)>,
    pub n_mask: usize,
}

/// Project a uniform batch of products and mask each position independently
/// with probability `mask_rate`. A sample is re-drawn if every one of its
/// positions came up masked, and one position is force-masked if the whole
/// batch drew none, so `1 <= n_mask < N*L` always holds.
pub fn mask_patches(
    p: &EncoderParams,
    products: &[&Product],
    mask_rate: f64,
    seed: u64,
) -> Result<MaskedBatch> {
    if !(mask_rate > 0.0 && mask_rate < 1.0) {
        return Err(Error::Config(format!(
            "mask_rate must lie in (0, 1), got {mask_rate}"
        )));
    }
    if products.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    let n = products.len();
    let l = products[0].patches.len();
    if l == 0 {
        return Err(Error::Shape(format!("product {} has no patches", products[0].id)));
    }
    let d = p.dims.d;

    let mut unit = Grid3::zeros(n, l, d);
    let mut norms = vec![0.0; n * l];
    for (i, product) in products.iter().enumerate() {
        if product.patches.len() != l {
            return Err(Error::Shape(format!(
                "product {} has {} patches, batch expects {l}",
                product.id,
                product.patches.len()
            )));
        }
        for (j, patch) in product.patches.iter().enumerate() {
            let (u, norm) = project_patch(p, patch)?;
            unit.at_mut(i, j).copy_from_slice(&u);
            norms[i * l + j] = norm;
        }
    }

    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masked = vec![false; n * l];
    for i in 0..n {
        loop {
            let row = &mut masked[i * l..(i + 1) * l];
            for m in row.iter_mut() {
                *m = rng.gen::<f64>() < mask_rate;
            }
            if row.iter().any(|m| !m) {
                break;
            }
        }
    }
    if masked.iter().all(|m| !m) {
        let i = rng.gen_range(0..n);
        let j = rng.gen_range(0..l);
        masked[i * l + j] = true;
    }

    let mut inputs = unit.clone();
    let mut targets = Vec::new();
    let mut mask_positions = Vec::new();
    for i in 0..n {
        for j in 0..l {
            if masked[i * l + j] {
                targets.push(unit.at(i, j).to_vec());
                mask_positions.push((i, j));
                inputs.at_mut(i, j).copy_from_slice(&p.mask_emb);
            }
        }
    }
    let n_mask = mask_positions.len();
    Ok(MaskedBatch {
        inputs,
        unit,
        norms,
        targets,
        mask_positions,
        n_mask,
    })
}

/// Forward cache for [`predict_masked`].
#[derive(Debug, Clone)]
pub struct Prediction {
    /// Raw (unnormalized) `N x L x d` predicted embeddings.
    pub pred: Grid3,
    means: Vec<Vec<f64>>,
}

/// One mixing layer: `pred[i][j] = mix_mean m_i + mix_self x[i][j]` with
/// `m_i` the mean of sample `i`'s masked inputs. Linear in the parameters,
/// so zero parameters give zero predictions.
pub fn predict_masked(p: &EncoderParams, m: &MaskedBatch) -> Prediction {
    let (n, l, d) = (m.inputs.n, m.inputs.l, m.inputs.d);
    let mut pred = Grid3::zeros(n, l, d);
    let mut means = Vec::with_capacity(n);
    for i in 0..n {
        let mut mi = vec![0.0; d];
        for j in 0..l {
            math::axpy(1.0, m.inputs.at(i, j), &mut mi);
        }
        let inv = 1.0 / l as f64;
        mi.iter_mut().for_each(|v| *v *= inv);
        let from_mean = math::matvec(&p.mix_mean, d, d, &mi);
        for j in 0..l {
            let from_self = math::matvec(&p.mix_self, d, d, m.inputs.at(i, j));
            let out = pred.at_mut(i, j);
            out.copy_from_slice(&from_mean);
            math::axpy(1.0, &from_self, out);
        }
        means.push(mi);
    }
    Prediction { pred, means }
}

/// Backward for [`predict_masked`]: accumulates mixing-matrix gradients and
/// returns the gradient with respect to the masked inputs.
pub fn predict_masked_backward(
    p: &EncoderParams,
    m: &MaskedBatch,
    fwd: &Prediction,
    grad_pred: &Grid3,
    grads: &mut ParamGrads,
) -> Grid3 {
    let (n, l, d) = (m.inputs.n, m.inputs.l, m.inputs.d);
    let mut grad_inputs = Grid3::zeros(n, l, d);
    let inv_l = 1.0 / l as f64;
    for i in 0..n {
        let mut gsum = vec![0.0; d];
        for j in 0..l {
            let g = grad_pred.at(i, j);
            math::axpy(1.0, g, &mut gsum);
            math::outer_acc(&mut grads.mix_self, g, m.inputs.at(i, j));
            let gx = math::matvec_t(&p.mix_self, d, d, g);
            math::axpy(1.0, &gx, grad_inputs.at_mut(i, j));
        }
        math::outer_acc(&mut grads.mix_mean, &gsum, &fwd.means[i]);
        let gmean = math::matvec_t(&p.mix_mean, d, d, &gsum);
        for j in 0..l {
            math::axpy(inv_l, &gmean, grad_inputs.at_mut(i, j));
        }
    }
    grad_inputs
}

/// Route masked-batch gradients back into `mask_emb` and `patch_proj`.
///
/// `grad_inputs` is the gradient with respect to the masked input grid
/// (masked slots flow into `mask_emb`, unmasked slots into the patch
/// projection); `grad_targets` is the gradient with respect to the target
/// embeddings at `mask_positions` (which are the pre-mask unit patches, so
/// they also flow into the projection).
pub fn masked_chain_backward(
    products: &[&Product],
    m: &MaskedBatch,
    grad_inputs: &Grid3,
    grad_targets: &[Vec<f64>],
    grads: &mut ParamGrads,
) {
    let (n, l) = (m.inputs.n, m.inputs.l);
    debug_assert_eq!(grad_targets.len(), m.n_mask);
    let mut masked = vec![false; n * l];
    let mut target_idx = vec![usize::MAX; n * l];
    for (k, &(i, j)) in m.mask_positions.iter().enumerate() {
        masked[i * l + j] = true;
        target_idx[i * l + j] = k;
    }
    for i in 0..n {
        for j in 0..l {
            let flat = i * l + j;
            let mut grad_unit: Option<Vec<f64>> = None;
            if masked[flat] {
                math::axpy(1.0, grad_inputs.at(i, j), &mut grads.mask_emb);
                let gt = &grad_targets[target_idx[flat]];
                if gt.iter().any(|v| *v != 0.0) {
                    grad_unit = Some(gt.clone());
                }
            } else {
                grad_unit = Some(grad_inputs.at(i, j).to_vec());
            }
            if let Some(gu) = grad_unit {
                let gp = normalize_backward(&gu, m.unit.at(i, j), m.norms[flat]);
                math::outer_acc(&mut grads.patch_proj, &products[i].patches[j], &gp);
            }
        }
    }
}

const CKPT_MAGIC: &[u8; 4] = b"MMR1";

fn write_u32(w: &mut impl Write, v: u32, path: &Path) -> Result<()> {
    w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))
}

fn write_f32s(w: &mut impl Write, vals: &[f64], path: &Path) -> Result<()> {
    for &v in vals {
        w.write_all(&(v as f32).to_le_bytes())
            .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::format(path, "truncated header"))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f32s(r: &mut impl Read, n: usize, path: &Path) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::format(path, "truncated parameter table"))?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

/// Write an `MMR1` checkpoint: magic, `d`, `d_img`, `|vocab|` (u32 LE), then
/// every tensor as little-endian `f32` in checkpoint order.
pub fn save_checkpoint(p: &EncoderParams, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    w.write_all(CKPT_MAGIC).map_err(|e| Error::io(path, e))?;
    write_u32(&mut w, p.dims.d as u32, path)?;
    write_u32(&mut w, p.dims.d_img as u32, path)?;
    write_u32(&mut w, p.dims.vocab as u32, path)?;
    for t in p.tensors() {
        write_f32s(&mut w, t, path)?;
    }
    Ok(())
}

/// Read an `MMR1` checkpoint. Values round-trip through `f32`.
pub fn load_checkpoint(path: &Path) -> Result<EncoderParams> {
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::format(path, "missing magic bytes"))?;
    if &magic != CKPT_MAGIC {
        return Err(Error::format(path, "not an MMR1 checkpoint"));
    }
    let d = read_u32(&mut r, path)? as usize;
    let d_img = read_u32(&mut r, path)? as usize;
    let vocab = read_u32(&mut r, path)? as usize;
    if d == 0 || d_img == 0 || vocab == 0 {
        return Err(Error::format(path, "zero dimension in header"));
    }
    let dims = Dims::new(vocab, d, d_img);
    let mut p = EncoderParams {
        dims,
        token_emb: Vec::new(),
        patch_proj: Vec::new(),
        query_proj: Vec::new(),
        title_proj: Vec::new(),
        image_proj: Vec::new(),
        fuse_proj: Vec::new(),
        mask_emb: Vec::new(),
        mix_mean: Vec::new(),
        mix_self: Vec::new(),
    };
    let sizes = [
        vocab * d,
        d_img * d,
        d * d,
        d * d,
        d * d,
        d * d,
        d,
        d * d,
        d * d,
    ];
    for (t, n) in p.tensors_mut().into_iter().zip(sizes) {
        *t = read_f32s(&mut r, n, path)?;
    }
    let mut rest = [0u8; 1];
    match r.read(&mut rest) {
        Ok(0) => {}
        Ok(_) => return Err(Error::format(path, "trailing bytes after parameter tables")),
        Err(e) => return Err(Error::io(path, e)),
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::Catalog;

    fn small_setup() -> (EncoderParams, Vocab, Vec<Product>) {
        let products: Vec<Product> = (0..3)
            .map(|i| Product {
                id: i + 1,
                title_tokens: match i {
                    0 => vec!["red".into(), "dress".into()],
                    1 => vec!["blue".into(), "shoe".into()],
                    _ => vec!["green".into(), "hat".into(), "red".into()],
                },
                patches: {
                    let mut rng = ChaCha8Rng::seed_from_u64(100 + i);
                    (0..4).map(|_| gauss_vec(&mut rng, 3, 1.0)).collect()
                },
                brand: "b".into(),
                category: "c".into(),
                sample_prob: Some(0.3),
            })
            .collect();
        let catalog = Catalog::from_products(products.clone()).unwrap();
        let vocab = catalog.vocab.clone();
        let dims = Dims::new(vocab.len(), 6, 3);
        (EncoderParams::init(dims, 7), vocab, products)
    }

    #[test]
    fn query_embedding_is_unit_and_order_invariant() {
        let (p, vocab, _) = small_setup();
        let toks = |s: &[&str]| s.iter().map(|t| t.to_string()).collect::<Vec<_>>();
        let a = encode_query(&p, &vocab, &toks(&["red", "dress", "blue"])).unwrap();
        let b = encode_query(&p, &vocab, &toks(&["blue", "red", "dress"])).unwrap();
        assert_eq!(a.u, b.u);
        assert!((math::l2_norm(&a.u) - 1.0).abs() < 1e-6);
        assert!(matches!(
            encode_query(&p, &vocab, &toks(&["unseen"])),
            Err(Error::UnknownToken(_))
        ));
    }

    #[test]
    fn single_token_query_matches_direct_formula() {
        let (p, vocab, _) = small_setup();
        let enc = encode_query(&p, &vocab, &["red".to_string()]).unwrap();
        let id = vocab.id_of("red").unwrap() as usize;
        let d = p.dims.d;
        let row = &p.token_emb[id * d..(id + 1) * d];
        let expect = math::normalized(&math::matvec(&p.query_proj, d, d, row)).unwrap();
        assert_eq!(enc.u, expect);
    }

    #[test]
    fn product_embedding_is_unit_and_deterministic() {
        let (p, vocab, products) = small_setup();
        let a = encode_product(&p, &vocab, &products[0]).unwrap();
        let b = encode_product(&p, &vocab, &products[0]).unwrap();
        assert_eq!(a.v, b.v);
        assert!((math::l2_norm(&a.v) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn constant_patches_collapse_to_single_patch_fusion() {
        let (p, vocab, mut products) = small_setup();
        let one = products[0].patches[0].clone();
        products[0].patches = vec![one.clone(); 4];
        let enc = encode_product(&p, &vocab, &products[0]).unwrap();
        // image mean over identical unit patches equals that single unit patch
        let (unit, _) = project_patch(&p, &one).unwrap();
        for j in 0..4 {
            assert_eq!(enc.patch_unit[j], unit);
        }
        let diff: f64 = enc
            .imean
            .iter()
            .zip(&unit)
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff < 1e-12);
    }

    #[test]
    fn bad_patch_shape_is_a_shape_error() {
        let (p, vocab, mut products) = small_setup();
        products[1].patches[2] = vec![1.0, 2.0];
        assert!(matches!(
            encode_product(&p, &vocab, &products[1]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn mask_is_deterministic_and_never_full_rows() {
        let (p, _, products) = small_setup();
        let refs: Vec<&Product> = products.iter().collect();
        let a = mask_patches(&p, &refs, 0.4, 11).unwrap();
        let b = mask_patches(&p, &refs, 0.4, 11).unwrap();
        assert_eq!(a.mask_positions, b.mask_positions);
        assert!(a.n_mask >= 1);
        for i in 0..refs.len() {
            let row: Vec<_> = a
                .mask_positions
                .iter()
                .filter(|(s, _)| *s == i)
                .collect();
            assert!(row.len() < 4, "sample {i} fully masked");
        }
        assert!(mask_patches(&p, &refs, 0.0, 1).is_err());
        assert!(mask_patches(&p, &refs, 1.0, 1).is_err());
    }

    #[test]
    fn tiny_mask_rate_forces_exactly_one_mask() {
        let (p, _, products) = small_setup();
        let refs: Vec<&Product> = products.iter().collect();
        for seed in 0..20 {
            let m = mask_patches(&p, &refs, 1e-12, seed).unwrap();
            assert_eq!(m.n_mask, 1, "seed {seed}");
        }
    }

    #[test]
    fn mask_counts_match_precomputed_binomial_interval() {
        // 100 seeds of an 8x16 batch at rate 0.25: each draw is Binomial(128, 1/4).
        // Central 99.9% interval per draw is [16, 48]; the 100-seed total is
        // Binomial(12800, 1/4) with 99.9% interval [3039, 3361]. Both intervals
        // computed from the exact binomial CDF ahead of time.
        let dims = Dims::new(4, 6, 3);
        let p = EncoderParams::init(dims, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(500);
        let products: Vec<Product> = (0..8)
            .map(|i| Product {
                id: i,
                title_tokens: vec!["t".into()],
                patches: (0..16).map(|_| gauss_vec(&mut rng, 3, 1.0)).collect(),
                brand: "b".into(),
                category: "c".into(),
                sample_prob: None,
            })
            .collect();
        let refs: Vec<&Product> = products.iter().collect();
        let mut total = 0usize;
        for seed in 0..100u64 {
            let m = mask_patches(&p, &refs, 0.25, seed).unwrap();
            assert!(
                (16..=48).contains(&m.n_mask),
                "seed {seed}: {} masks outside the 99.9% interval",
                m.n_mask
            );
            total += m.n_mask;
        }
        assert!(
            (3039..=3361).contains(&total),
            "total {total} outside the 99.9% interval"
        );
    }

    #[test]
    fn single_position_prediction_matches_hand_computation() {
        // N=1, L=1: mean equals the input, so pred = (mix_mean + mix_self) x.
        let dims = Dims::new(2, 2, 2);
        let mut p = EncoderParams::init(dims, 0);
        p.mix_mean = vec![1.0, 2.0, 3.0, 4.0];
        p.mix_self = vec![5.0, 6.0, 7.0, 8.0];
        let m = MaskedBatch {
            inputs: Grid3 {
                n: 1,
                l: 1,
                d: 2,
                data: vec![1.0, -1.0],
            },
            unit: Grid3::zeros(1, 1, 2),
            norms: vec![1.0],
            targets: vec![vec![1.0, -1.0]],
            mask_positions: vec![(0, 0)],
            n_mask: 1,
        };
        let out = predict_masked(&p, &m);
        assert_eq!(out.pred.data, vec![-2.0, -2.0]);
    }

    #[test]
    fn zero_parameters_give_zero_predictions() {
        let (mut p, _, products) = small_setup();
        let refs: Vec<&Product> = products.iter().collect();
        let m = mask_patches(&p, &refs, 0.3, 2).unwrap();
        p.mix_mean.iter_mut().for_each(|v| *v = 0.0);
        p.mix_self.iter_mut().for_each(|v| *v = 0.0);
        let out = predict_masked(&p, &m);
        assert!(out.pred.data.iter().all(|v| *v == 0.0));
    }

    fn block_rel_err(analytic: &[f64], fd: &[f64]) -> f64 {
        let diff: f64 = analytic
            .iter()
            .zip(fd)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let na = math::l2_norm(analytic);
        let nb = math::l2_norm(fd);
        diff / na.max(nb).max(1e-12)
    }

    /// Central finite differences of `f` with respect to every coordinate of
    /// the tensor selected by `pick`.
    fn fd_block(
        p: &EncoderParams,
        pick: fn(&mut EncoderParams) -> &mut Vec<f64>,
        f: &dyn Fn(&EncoderParams) -> f64,
    ) -> Vec<f64> {
        let h = 1e-5;
        let mut q = p.clone();
        let n = pick(&mut q).len();
        let mut g = vec![0.0; n];
        for k in 0..n {
            let mut hi = p.clone();
            pick(&mut hi)[k] += h;
            let mut lo = p.clone();
            pick(&mut lo)[k] -= h;
            g[k] = (f(&hi) - f(&lo)) / (2.0 * h);
        }
        g
    }

    #[test]
    fn query_encoder_gradients_match_finite_differences() {
        let (p, vocab, _) = small_setup();
        let tokens: Vec<String> = vec!["red".into(), "dress".into(), "blue".into()];
        // Loss: dot of the embedding with a fixed probe vector.
        let probe: Vec<f64> = (0..p.dims.d).map(|i| (i as f64 * 0.7).sin()).collect();
        let f = {
            let vocab = vocab.clone();
            let tokens = tokens.clone();
            let probe = probe.clone();
            move |pp: &EncoderParams| {
                let e = encode_query(pp, &vocab, &tokens).unwrap();
                math::dot(&e.u, &probe)
            }
        };
        let enc = encode_query(&p, &vocab, &tokens).unwrap();
        let mut grads = ParamGrads::zeros(&p.dims);
        encode_query_backward(&p, &enc, &probe, &mut grads);
        let fd_tok = fd_block(&p, |q| &mut q.token_emb, &f);
        let fd_proj = fd_block(&p, |q| &mut q.query_proj, &f);
        assert!(block_rel_err(&grads.token_emb, &fd_tok) < 1e-4);
        assert!(block_rel_err(&grads.query_proj, &fd_proj) < 1e-4);
    }

    #[test]
    fn product_encoder_gradients_match_finite_differences() {
        let (p, vocab, products) = small_setup();
        let product = products[2].clone();
        let probe: Vec<f64> = (0..p.dims.d).map(|i| (i as f64 * 1.3).cos()).collect();
        let f = {
            let vocab = vocab.clone();
            let product = product.clone();
            let probe = probe.clone();
            move |pp: &EncoderParams| {
                let e = encode_product(pp, &vocab, &product).unwrap();
                math::dot(&e.v, &probe)
            }
        };
        let enc = encode_product(&p, &vocab, &product).unwrap();
        let mut grads = ParamGrads::zeros(&p.dims);
        encode_product_backward(&p, &product, &enc, &probe, &mut grads);
        for (name, pick) in [
            ("token_emb", (|q: &mut EncoderParams| &mut q.token_emb) as fn(&mut EncoderParams) -> &mut Vec<f64>),
            ("patch_proj", |q| &mut q.patch_proj),
            ("title_proj", |q| &mut q.title_proj),
            ("image_proj", |q| &mut q.image_proj),
            ("fuse_proj", |q| &mut q.fuse_proj),
        ] {
            let fd = fd_block(&p, pick, &f);
            let analytic = match name {
                "token_emb" => &grads.token_emb,
                "patch_proj" => &grads.patch_proj,
                "title_proj" => &grads.title_proj,
                "image_proj" => &grads.image_proj,
                "fuse_proj" => &grads.fuse_proj,
                _ => unreachable!(),
            };
            assert!(
                block_rel_err(analytic, &fd) < 1e-4,
                "{name} gradient mismatch"
            );
        }
    }

    #[test]
    fn prediction_chain_gradients_match_finite_differences() {
        // End to end: patches -> projection -> mask -> mixing layer ->
        // quadratic probe loss, differentiated with respect to every block.
        let (p, _, products) = small_setup();
        let refs: Vec<&Product> = products.iter().collect();
        let seed = 9;
        let f = {
            let products = products.clone();
            move |pp: &EncoderParams| {
                let refs: Vec<&Product> = products.iter().collect();
                let m = mask_patches(pp, &refs, 0.3, seed).unwrap();
                let out = predict_masked(pp, &m);
                // 0.5 * sum(pred^2) + 0.5 * sum(target^2)
                0.5 * out.pred.data.iter().map(|v| v * v).sum::<f64>()
                    + 0.5 * m
                        .targets
                        .iter()
                        .flat_map(|t| t.iter())
                        .map(|v| v * v)
                        .sum::<f64>()
            }
        };
        let m = mask_patches(&p, &refs, 0.3, seed).unwrap();
        let out = predict_masked(&p, &m);
        let mut grads = ParamGrads::zeros(&p.dims);
        let grad_pred = out.pred.clone();
        let grad_targets: Vec<Vec<f64>> = m.targets.clone();
        let grad_inputs = predict_masked_backward(&p, &m, &out, &grad_pred, &mut grads);
        masked_chain_backward(&refs, &m, &grad_inputs, &grad_targets, &mut grads);
        for (name, pick) in [
            ("patch_proj", (|q: &mut EncoderParams| &mut q.patch_proj) as fn(&mut EncoderParams) -> &mut Vec<f64>),
            ("mask_emb", |q| &mut q.mask_emb),
            ("mix_mean", |q| &mut q.mix_mean),
            ("mix_self", |q| &mut q.mix_self),
        ] {
            let fd = fd_block(&p, pick, &f);
            let analytic = match name {
                "patch_proj" => grads.patch_proj.clone(),
                "mask_emb" => grads.mask_emb.clone(),
                "mix_mean" => grads.mix_mean.clone(),
                "mix_self" => grads.mix_self.clone(),
                _ => unreachable!(),
            };
            assert!(
                block_rel_err(&analytic, &fd) < 1e-4,
                "{name} gradient mismatch"
            );
        }
    }

    #[test]
    fn checkpoint_round_trips_to_f32_precision() {
        let (p, _, _) = small_setup();
        let f = tempfile::NamedTempFile::new().unwrap();
        save_checkpoint(&p, f.path()).unwrap();
        let q = load_checkpoint(f.path()).unwrap();
        assert_eq!(q.dims, p.dims);
        for (a, b) in p.tensors().iter().zip(q.tensors().iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(*x as f32, *y as f32);
                assert_eq!(*y, (*y as f32) as f64);
            }
        }
        // a second save of the loaded params is byte-identical
        let f2 = tempfile::NamedTempFile::new().unwrap();
        save_checkpoint(&q, f2.path()).unwrap();
        let b1 = std::fs::read(f.path()).unwrap();
        let b2 = std::fs::read(f2.path()).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn checkpoint_rejects_bad_magic_and_truncation() {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), b"NOPE").unwrap();
        assert!(matches!(
            load_checkpoint(f.path()),
            Err(Error::Format { .. })
        ));
        let (p, _, _) = small_setup();
        let g = tempfile::NamedTempFile::new().unwrap();
        save_checkpoint(&p, g.path()).unwrap();
        let bytes = std::fs::read(g.path()).unwrap();
        std::fs::write(g.path(), &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            load_checkpoint(g.path()),
            Err(Error::Format { .. })
        ));
        std::fs::write(g.path(), [bytes.clone(), vec![0u8; 4]].concat()).unwrap();
        assert!(matches!(
            load_checkpoint(g.path()),
            Err(Error::Format { .. })
        ));
    }
}
