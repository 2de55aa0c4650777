//! Simulated multi-device training loop.
//!
//! One global step encodes `n_devices * batch_size` distinct products, runs
//! the pair objective per (query, product) pair with corrected-similarity
//! negatives, runs the masked-patch objective once per device, averages
//! gradients, and applies one Adam update with linear warmup/decay. Device
//! parallelism is simulated sequentially; the only cross-device coupling is
//! the negative gather, which matches the synchronous all-gather in the
//! production setup.
//!
//! Negatives are detached: gradient flows only through the query and its
//! positive product. In-batch items from the querying device always serve
//! as extra cross-device-weighted negatives; the scheduled CDNS/MBNS counts
//! reported in the step log cover only the gathered sets.

pub mod synthetic;

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{qid_pairs, Catalog, Interaction, Query};
use crate::encoder::{
    encode_product, encode_product_backward, encode_query, encode_query_backward, mask_patches,
    masked_chain_backward, predict_masked, predict_masked_backward, Dims, EncoderParams,
    ParamGrads,
};
use crate::error::{Error, Result};
use crate::losses::{mpm_r_loss, qpm_loss, Temperature};
use crate::negsampling::{sample_negatives, BankBatch, DeviceBatch, DeviceGroup, MemoryBank, Schedule};

/// Everything the loop needs, loadable from a TOML file. Unset keys fall
/// back to the defaults below.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Overrides `epochs` when set; `Some(0)` returns the initial
    /// parameters untouched.
    pub steps: Option<usize>,
    pub batch_size: usize,
    pub n_devices: usize,
    pub lr_peak: f64,
    pub warmup_frac: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub mask_rate: f64,
    /// Weight of the masked-patch loss in the total objective.
    pub lambda_mpm: f64,
    pub memory_bank_batches: usize,
    pub cdns_start_frac: f64,
    pub mbns_start_frac: f64,
    pub smoothing: f64,
    pub d: usize,
    pub d_img: usize,
    /// Patches per product; used when the catalog needs synthetic patch
    /// features materialized.
    pub l: usize,
    pub init_tau: f64,
    pub exclude_self: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            epochs: 5,
            steps: None,
            batch_size: 8,
            n_devices: 1,
            lr_peak: 1e-4,
            warmup_frac: 0.2,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.0,
            mask_rate: 0.25,
            lambda_mpm: 1.0,
            memory_bank_batches: 8,
            cdns_start_frac: 0.5,
            mbns_start_frac: 0.6,
            smoothing: 1.0,
            d: 64,
            d_img: 8,
            l: 16,
            init_tau: 1.0,
            exclude_self: false,
            seed: 17,
        }
    }
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<TrainConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.n_devices == 0 {
            return Err(Error::Config("batch_size and n_devices must be positive".into()));
        }
        if self.d == 0 || self.d_img == 0 || self.l == 0 {
            return Err(Error::Config("d, d_img, and l must be positive".into()));
        }
        if !(self.lr_peak > 0.0) {
            return Err(Error::Config(format!("lr_peak must be positive, got {}", self.lr_peak)));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::Config(format!(
                "warmup_frac must lie in [0, 1), got {}",
                self.warmup_frac
            )));
        }
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return Err(Error::Config(format!(
                "mask_rate must lie in (0, 1), got {}",
                self.mask_rate
            )));
        }
        if self.lambda_mpm < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("lambda_mpm and weight_decay must be non-negative".into()));
        }
        Ok(())
    }

    fn pairs_per_step(&self) -> usize {
        self.n_devices * self.batch_size
    }
}

/// Linear warmup to `lr_peak` over the first `warmup_frac` of `total`
/// steps, then linear decay to zero at `total`.
pub fn lr_at(cfg: &TrainConfig, step: usize, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let t = step as f64;
    let big_t = total as f64;
    let w = cfg.warmup_frac * big_t;
    if w > 0.0 && t < w {
        cfg.lr_peak * t / w
    } else {
        cfg.lr_peak * (big_t - t).max(0.0) / (big_t - w)
    }
}

/// Adam with bias correction and decoupled weight decay. The temperature's
/// log parameter gets its own scalar moment channel and no weight decay.
pub struct AdamState {
    m: ParamGrads,
    v: ParamGrads,
    m_tau: f64,
    v_tau: f64,
    t: u64,
}

impl AdamState {
    pub fn new(dims: &Dims) -> AdamState {
        AdamState {
            m: ParamGrads::zeros(dims),
            v: ParamGrads::zeros(dims),
            m_tau: 0.0,
            v_tau: 0.0,
            t: 0,
        }
    }

    pub fn step(
        &mut self,
        params: &mut EncoderParams,
        tau: &mut Temperature,
        grads: &ParamGrads,
        lr: f64,
        cfg: &TrainConfig,
    ) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let p_tensors = params.tensors_mut();
        let g_tensors = grads.tensors();
        let m_tensors = self.m.tensors_mut();
        let v_tensors = self.v.tensors_mut();
        for i in 0..p_tensors.len() {
            let p = &mut *p_tensors[i];
            let g = g_tensors[i];
            let m = &mut *m_tensors[i];
            let v = &mut *v_tensors[i];
            for k in 0..p.len() {
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                p[k] -= lr * mhat / (vhat.sqrt() + cfg.eps);
                if cfg.weight_decay > 0.0 {
                    p[k] -= lr * cfg.weight_decay * p[k];
                }
            }
        }
        let g = grads.d_log_tau;
        self.m_tau = cfg.beta1 * self.m_tau + (1.0 - cfg.beta1) * g;
        self.v_tau = cfg.beta2 * self.v_tau + (1.0 - cfg.beta2) * g * g;
        let mhat = self.m_tau / bc1;
        let vhat = self.v_tau / bc2;
        tau.set_log_tau(tau.log_tau() - lr * mhat / (vhat.sqrt() + cfg.eps));
    }
}

/// One row of the step log.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss_qpm: f64,
    pub loss_mpm: f64,
    pub n1: usize,
    pub n2: usize,
}

/// The full training trace, writable as `step,lr,loss_qpm,loss_mpm,N1,N2`.
#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,lr,loss_qpm,loss_mpm,N1,N2\n");
        for s in &self.steps {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                s.step, s.lr, s.loss_qpm, s.loss_mpm, s.n1, s.n2
            ));
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

fn mask_seed(base: u64, step: usize, device: usize) -> u64 {
    base ^ (step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ (device as u64 + 1).wrapping_mul(0xd1b5_4a32_d192_ed03)
}

/// Owns the catalog, the interaction-derived query table, and the model
/// state for one training run.
pub struct Trainer {
    pub config: TrainConfig,
    pub catalog: Catalog,
    queries: HashMap<u64, Vec<Query>>,
    trainable: Vec<usize>,
    pub params: EncoderParams,
    pub tau: Temperature,
}

impl Trainer {
    /// Prepare a run: extend the vocabulary with query tokens, estimate
    /// sampling probabilities when the catalog lacks them, materialize
    /// patch features, and initialize parameters from `config.seed`.
    pub fn new(
        mut catalog: Catalog,
        interactions: &[Interaction],
        config: TrainConfig,
    ) -> Result<Trainer> {
        config.validate()?;
        catalog.extend_vocab_with_queries(interactions.iter().map(|i| i.query.tokens.as_slice()));
        if catalog.products().iter().any(|p| p.sample_prob.is_none()) {
            catalog.estimate_sample_probs(&qid_pairs(interactions), config.smoothing)?;
        }
        catalog.materialize_patches(config.l, config.d_img);
        catalog.validate_patches(config.l, config.d_img)?;

        let mut queries: HashMap<u64, Vec<Query>> = HashMap::new();
        for i in interactions {
            if !catalog.contains(i.product_id) {
                return Err(Error::UnknownId(i.product_id));
            }
            queries.entry(i.product_id).or_default().push(i.query.clone());
        }
        let trainable: Vec<usize> = catalog
            .products()
            .iter()
            .enumerate()
            .filter(|(_, p)| queries.contains_key(&p.id))
            .map(|(i, _)| i)
            .collect();

        let dims = Dims::new(catalog.vocab.len(), config.d, config.d_img);
        let params = EncoderParams::init(dims, config.seed);
        let tau = Temperature::new(config.init_tau)?;
        Ok(Trainer { config, catalog, queries, trainable, params, tau })
    }

    /// Total optimizer steps: the explicit override, or full epochs over
    /// the trainable products at `n_devices * batch_size` products a step.
    pub fn total_steps(&self) -> usize {
        match self.config.steps {
            Some(s) => s,
            None => self.config.epochs * (self.trainable.len() / self.config.pairs_per_step()),
        }
    }

    /// Run the loop. Returns the per-step log; the trained parameters stay
    /// on `self.params` / `self.tau`.
    pub fn train(&mut self) -> Result<TrainLog> {
        let cfg = self.config.clone();
        let total = self.total_steps();
        let mut log = TrainLog::default();
        if total == 0 {
            return Ok(log);
        }
        let per_step = cfg.pairs_per_step();
        if self.trainable.len() < per_step {
            return Err(Error::Config(format!(
                "need at least {per_step} products with interactions for one step, have {}",
                self.trainable.len()
            )));
        }

        let schedule = Schedule::new(total, cfg.cdns_start_frac, cfg.mbns_start_frac)?;
        let mut bank = MemoryBank::new(cfg.memory_bank_batches);
        let mut adam = AdamState::new(&self.params.dims);
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));

        let mut order = self.trainable.clone();
        order.shuffle(&mut shuffle_rng);
        let mut pos = 0usize;
        let mut epoch = 0usize;

        let inv_pairs = 1.0 / per_step as f64;
        let inv_devices = 1.0 / cfg.n_devices as f64;

        for step in 0..total {
            if pos + per_step > order.len() {
                order.shuffle(&mut shuffle_rng);
                pos = 0;
                epoch += 1;
            }
            let chunk: Vec<usize> = order[pos..pos + per_step].to_vec();
            pos += per_step;

            // forward pass per device
            let mut enc_q = Vec::with_capacity(per_step);
            let mut enc_p = Vec::with_capacity(per_step);
            let mut device_batches = Vec::with_capacity(cfg.n_devices);
            for g in 0..cfg.n_devices {
                let mut batch = DeviceBatch { ids: Vec::new(), embs: Vec::new(), probs: Vec::new() };
                for b in 0..cfg.batch_size {
                    let idx = chunk[g * cfg.batch_size + b];
                    let product = &self.catalog.products()[idx];
                    let qs = &self.queries[&product.id];
                    let q = &qs[epoch % qs.len()];
                    let qe = encode_query(&self.params, &self.catalog.vocab, &q.tokens)?;
                    let pe = encode_product(&self.params, &self.catalog.vocab, product)?;
                    let prob = product.sample_prob.expect("probabilities estimated in new()");
                    batch.ids.push(product.id);
                    batch.embs.push(pe.v.clone());
                    batch.probs.push(prob);
                    enc_q.push(qe);
                    enc_p.push(pe);
                }
                device_batches.push(batch);
            }
            let group = DeviceGroup::new(device_batches)?;

            let mut grads = ParamGrads::zeros(&self.params.dims);
            let mut loss_qpm = 0.0;
            let (mut n1, mut n2) = (0usize, 0usize);

            for g in 0..cfg.n_devices {
                for b in 0..cfg.batch_size {
                    let flat = g * cfg.batch_size + b;
                    let dev = group.device(g);
                    let mut negs =
                        sample_negatives(&bank, &group, g, step, &schedule, dev.ids[b])?;
                    if flat == 0 {
                        n1 = negs.mbns.len();
                        n2 = negs.cdns.len();
                    }
                    for b2 in 0..cfg.batch_size {
                        if b2 != b {
                            negs.cdns.push(dev.embs[b2].clone(), dev.probs[b2]);
                        }
                    }
                    let res = qpm_loss(&enc_q[flat].u, &enc_p[flat].v, dev.probs[b], &negs)?;
                    loss_qpm += res.loss * inv_pairs;
                    let gu: Vec<f64> = res.grad_u.iter().map(|x| x * inv_pairs).collect();
                    let gv: Vec<f64> = res.grad_v_pos.iter().map(|x| x * inv_pairs).collect();
                    encode_query_backward(&self.params, &enc_q[flat], &gu, &mut grads);
                    let idx = chunk[flat];
                    encode_product_backward(
                        &self.params,
                        &self.catalog.products()[idx],
                        &enc_p[flat],
                        &gv,
                        &mut grads,
                    );
                }
            }

            let mut loss_mpm = 0.0;
            for g in 0..cfg.n_devices {
                let prods: Vec<&crate::catalog::Product> = chunk
                    [g * cfg.batch_size..(g + 1) * cfg.batch_size]
                    .iter()
                    .map(|&i| &self.catalog.products()[i])
                    .collect();
                let mb = mask_patches(
                    &self.params,
                    &prods,
                    cfg.mask_rate,
                    mask_seed(cfg.seed, step, g),
                )?;
                let fwd = predict_masked(&self.params, &mb);
                let res =
                    mpm_r_loss(&mb.targets, &mb.mask_positions, &fwd.pred, &self.tau, cfg.exclude_self)?;
                loss_mpm += res.loss * inv_devices;
                let scale = cfg.lambda_mpm * inv_devices;
                let mut gp = res.grad_predictions;
                gp.data.iter_mut().for_each(|x| *x *= scale);
                let gi = predict_masked_backward(&self.params, &mb, &fwd, &gp, &mut grads);
                let gts: Vec<Vec<f64>> = res
                    .grad_targets
                    .iter()
                    .map(|t| t.iter().map(|x| x * scale).collect())
                    .collect();
                masked_chain_backward(&prods, &mb, &gi, &gts, &mut grads);
                grads.d_log_tau += res.d_log_tau * scale;
            }

            if !(loss_qpm.is_finite() && loss_mpm.is_finite()) {
                return Err(Error::Diverged(step));
            }
            let lr = lr_at(&cfg, step, total);
            adam.step(&mut self.params, &mut self.tau, &grads, lr, &cfg);
            if !self.params.is_finite() {
                return Err(Error::Diverged(step));
            }

            let dev0 = group.device(0);
            bank.push(BankBatch { embs: dev0.embs.clone(), probs: dev0.probs.clone() });

            log.steps.push(StepLog { step, lr, loss_qpm, loss_mpm, n1, n2 });
        }
        Ok(log)
    }
}

#[cfg(test)]
mod tests {
    use super::synthetic::{make_synthetic, SyntheticSpec};
    use super::*;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            d: 16,
            d_img: 4,
            l: 4,
            batch_size: 8,
            n_devices: 1,
            memory_bank_batches: 4,
            lr_peak: 0.02,
            ..TrainConfig::default()
        }
    }

    fn tiny_corpus(seed: u64) -> (Catalog, Vec<Interaction>) {
        let spec = SyntheticSpec {
            n_clusters: 2,
            products_per_cluster: 8,
            patches_per_product: 4,
            patch_dim: 4,
            noise: 0.1,
        };
        let (catalog, interactions, _) = make_synthetic(&spec, seed);
        (catalog, interactions)
    }

    #[test]
    fn lr_schedule_endpoints() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(&cfg, 0, 1000), 0.0);
        assert!((lr_at(&cfg, 200, 1000) - 1e-4).abs() < 1e-18);
        assert_eq!(lr_at(&cfg, 1000, 1000), 0.0);
        assert!((lr_at(&cfg, 100, 1000) - 5e-5).abs() < 1e-18);
        assert!((lr_at(&cfg, 600, 1000) - 5e-5).abs() < 1e-18);
        let no_warmup = TrainConfig { warmup_frac: 0.0, ..cfg };
        assert!((lr_at(&no_warmup, 0, 10) - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn zero_steps_returns_initial_params() {
        let (catalog, interactions) = tiny_corpus(3);
        let cfg = TrainConfig { steps: Some(0), ..tiny_config() };
        let mut t = Trainer::new(catalog, &interactions, cfg.clone()).unwrap();
        let before = t.params.clone();
        let log = t.train().unwrap();
        assert!(log.steps.is_empty());
        for (a, b) in t.params.tensors().iter().zip(before.tensors().iter()) {
            assert_eq!(a, b);
        }
        assert_eq!(t.tau.tau(), cfg.init_tau);
    }

    #[test]
    fn losses_fall_on_tiny_corpus() {
        let (catalog, interactions) = tiny_corpus(5);
        // no memory bank: scheduled negatives would enlarge the softmax
        // denominator mid-run and make early/late losses incomparable
        let cfg = TrainConfig { steps: Some(120), memory_bank_batches: 0, ..tiny_config() };
        let mut t = Trainer::new(catalog, &interactions, cfg).unwrap();
        let log = t.train().unwrap();
        assert_eq!(log.steps.len(), 120);
        let mean = |rows: &[StepLog], f: fn(&StepLog) -> f64| {
            rows.iter().map(f).sum::<f64>() / rows.len() as f64
        };
        let head = &log.steps[..10];
        let tail = &log.steps[110..];
        assert!(
            mean(tail, |s| s.loss_qpm) < mean(head, |s| s.loss_qpm),
            "qpm head {} tail {}",
            mean(head, |s| s.loss_qpm),
            mean(tail, |s| s.loss_qpm)
        );
        assert!(
            mean(tail, |s| s.loss_mpm) < mean(head, |s| s.loss_mpm),
            "mpm head {} tail {}",
            mean(head, |s| s.loss_mpm),
            mean(tail, |s| s.loss_mpm)
        );
    }

    #[test]
    fn log_matches_negative_schedule() {
        let spec = SyntheticSpec {
            n_clusters: 4,
            products_per_cluster: 8,
            patches_per_product: 4,
            patch_dim: 4,
            noise: 0.1,
        };
        let (catalog, interactions, _) = make_synthetic(&spec, 9);
        let cfg = TrainConfig {
            n_devices: 4,
            batch_size: 8,
            memory_bank_batches: 3,
            steps: Some(40),
            ..tiny_config()
        };
        let mut t = Trainer::new(catalog, &interactions, cfg).unwrap();
        let log = t.train().unwrap();
        for s in &log.steps {
            if s.step < 20 {
                assert_eq!(s.n2, 0, "step {}", s.step);
            } else {
                assert_eq!(s.n2, 3 * 8, "step {}", s.step);
            }
            if s.step < 24 {
                assert_eq!(s.n1, 0, "step {}", s.step);
            } else {
                assert_eq!(s.n1, 3 * 8, "step {}", s.step);
            }
        }
    }

    #[test]
    fn same_seed_reproduces_bitwise() {
        let run = || {
            let (catalog, interactions) = tiny_corpus(7);
            let cfg = TrainConfig { steps: Some(12), ..tiny_config() };
            let mut t = Trainer::new(catalog, &interactions, cfg).unwrap();
            let log = t.train().unwrap();
            (t, log)
        };
        let (t1, log1) = run();
        let (t2, log2) = run();
        for (a, b) in t1.params.tensors().iter().zip(t2.params.tensors().iter()) {
            assert_eq!(a, b);
        }
        assert_eq!(t1.tau.tau().to_bits(), t2.tau.tau().to_bits());
        assert_eq!(log1.to_csv(), log2.to_csv());
    }

    #[test]
    fn training_improves_across_seeds() {
        for seed in [11, 12, 13] {
            let (catalog, interactions) = tiny_corpus(seed);
            let cfg = TrainConfig {
                steps: Some(60),
                seed,
                memory_bank_batches: 0,
                ..tiny_config()
            };
            let mut t = Trainer::new(catalog, &interactions, cfg).unwrap();
            let log = t.train().unwrap();
            let first = log.steps[0].loss_qpm + log.steps[0].loss_mpm;
            let last = log.steps.last().unwrap();
            assert!(
                last.loss_qpm + last.loss_mpm < first,
                "seed {seed}: start {first}, end {}",
                last.loss_qpm + last.loss_mpm
            );
        }
    }

    #[test]
    fn csv_schema_and_round_numbers() {
        let (catalog, interactions) = tiny_corpus(2);
        let cfg = TrainConfig { steps: Some(3), ..tiny_config() };
        let mut t = Trainer::new(catalog, &interactions, cfg).unwrap();
        let log = t.train().unwrap();
        let csv = log.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "step,lr,loss_qpm,loss_mpm,N1,N2");
        assert_eq!(lines.len(), 4);
        for (i, line) in lines[1..].iter().enumerate() {
            let cols: Vec<&str> = line.split(',').collect();
            assert_eq!(cols.len(), 6);
            assert_eq!(cols[0].parse::<usize>().unwrap(), i);
            cols[1].parse::<f64>().unwrap();
            cols[2].parse::<f64>().unwrap();
        }
    }

    #[test]
    fn config_file_defaults_and_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("good.toml");
        std::fs::write(&good, "batch_size = 4\nlr_peak = 0.5\n").unwrap();
        let cfg = TrainConfig::load(&good).unwrap();
        assert_eq!(cfg.batch_size, 4);
        assert_eq!(cfg.lr_peak, 0.5);
        assert_eq!(cfg.epochs, 5);
        assert_eq!(cfg.d, 64);

        let bad = dir.path().join("bad.toml");
        std::fs::write(&bad, "batch_sizee = 4\n").unwrap();
        assert!(matches!(TrainConfig::load(&bad), Err(Error::Config(_))));

        let invalid = dir.path().join("invalid.toml");
        std::fs::write(&invalid, "mask_rate = 1.5\n").unwrap();
        assert!(matches!(TrainConfig::load(&invalid), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_undersized_corpus() {
        let (catalog, interactions) = tiny_corpus(1);
        let cfg = TrainConfig { n_devices: 4, batch_size: 8, steps: Some(2), ..tiny_config() };
        let mut t = Trainer::new(catalog, &interactions, cfg).unwrap();
        assert!(matches!(t.train(), Err(Error::Config(_))));
    }
}
