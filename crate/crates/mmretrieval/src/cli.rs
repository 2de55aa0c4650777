//! File-based command-line interface.
//!
//! Five subcommands cover the pipeline: `train`, `build-index`, `query`,
//! `eval`, and `hash-query`. Exit codes: 0 success, 1 usage error
//! (including an empty query after normalization), 2 runtime error.
//!
//! A checkpoint at `P` keeps its vocabulary in the sidecar `P.vocab`;
//! `train` writes both, the other subcommands read both and refuse
//! checkpoints whose vocabulary size disagrees.

use std::collections::HashSet;
use std::ffi::OsString;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::catalog::{Catalog, Interaction, Query, Vocab};
use crate::encoder::{encode_product, encode_query, load_checkpoint, save_checkpoint, EncoderParams};
use crate::error::{Error, Result};
use crate::filter::{apply_filter, build_inverted, parse_filter};
use crate::index::{EmbeddingMatrix, HcIndex};
use crate::metrics::{load_cases, p_cate, p_rel, recall_at_k, report_csv, save_cases, JaccardScorer, MetricRow};
use crate::trainer::synthetic::{make_synthetic, parse_shape, SyntheticSpec};
use crate::trainer::{TrainConfig, Trainer};

#[derive(Debug, Parser)]
#[command(name = "mmr", version, about = "text-to-multimodal product retrieval")]
struct Cli {
    /// Seed override for training and index building.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Training configuration file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Train an encoder and write a checkpoint plus its sidecars.
    Train(TrainArgs),
    /// Encode a catalog and build the clustered ANN index.
    BuildIndex(BuildIndexArgs),
    /// Run one query against an index.
    Query(QueryArgs),
    /// Score an eval-case file and emit the metric CSV.
    Eval(EvalArgs),
    /// Print the 32-bit id of a normalized query.
    HashQuery(HashQueryArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Generate a synthetic corpus of shape CxP (clusters x products).
    #[arg(long, value_name = "CxP")]
    synthetic: Option<String>,
    /// Product catalog (JSON lines), for training on real files.
    #[arg(long)]
    catalog: Option<PathBuf>,
    /// Interaction log (JSON lines: {"query", "product_id"}).
    #[arg(long)]
    interactions: Option<PathBuf>,
    /// Optimizer step override; 0 writes the freshly initialized model.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Checkpoint path. Sidecars: .vocab, .log.csv, and for synthetic
    /// corpora .catalog.jsonl and .cases.jsonl.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct BuildIndexArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    catalog: PathBuf,
    /// Embedding matrix output.
    #[arg(long)]
    out_emb: PathBuf,
    /// Index output.
    #[arg(long)]
    out_index: PathBuf,
    /// Cluster count; 0 picks ceil(sqrt(N)).
    #[arg(long, default_value_t = 0)]
    centroids: usize,
    #[arg(long, default_value_t = 10)]
    iters: usize,
    /// Patches per product when the catalog needs synthetic patch features.
    #[arg(long, default_value_t = 16)]
    patches: usize,
}

#[derive(Debug, Args)]
struct QueryArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    index: PathBuf,
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Probed clusters; 0 picks ceil(sqrt(C)).
    #[arg(long, default_value_t = 0)]
    nprobe: usize,
    /// Boolean attribute filter, e.g. "Brand:Nike AND Category:Shoes".
    #[arg(long)]
    filter: Option<String>,
    /// Catalog for filter postings; required with --filter.
    #[arg(long)]
    catalog: Option<PathBuf>,
    /// Candidates fetched before filtering; 0 picks 3*K.
    #[arg(long, default_value_t = 0)]
    overfetch: usize,
    /// Query text.
    text: String,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    catalog: PathBuf,
    /// Eval cases (JSON lines: {"query", "targets", "intent"}).
    #[arg(long)]
    cases: PathBuf,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    nprobe: usize,
    /// Report path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct HashQueryArgs {
    text: String,
}

/// Write to stdout, treating a closed pipe (`mmr query | head`) as a
/// normal early exit instead of the panic `println!` would raise.
fn emit(args: std::fmt::Arguments) {
    if std::io::stdout().write_fmt(args).is_err() {
        std::process::exit(0);
    }
}

/// Append a sidecar suffix to a checkpoint path: `model.ckpt` with
/// `".vocab"` becomes `model.ckpt.vocab`.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s: OsString = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

#[derive(Debug, Deserialize)]
struct InteractionRecord {
    query: String,
    product_id: u64,
}

/// Load a line-delimited interaction log.
pub fn load_interactions(path: &Path) -> Result<Vec<Interaction>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: InteractionRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            msg: e.to_string(),
        })?;
        out.push(Interaction {
            query: Query::parse(&rec.query)?,
            product_id: rec.product_id,
        });
    }
    Ok(out)
}

fn load_checkpoint_pair(ckpt: &Path) -> Result<(EncoderParams, Vocab)> {
    let params = load_checkpoint(ckpt)?;
    let vocab = Vocab::load(&sidecar(ckpt, ".vocab"))?;
    if vocab.len() != params.dims.vocab {
        return Err(Error::VersionMismatch(format!(
            "checkpoint {} embeds {} tokens but its vocabulary lists {}",
            ckpt.display(),
            params.dims.vocab,
            vocab.len()
        )));
    }
    Ok((params, vocab))
}

fn cmd_train(seed: Option<u64>, config: Option<&Path>, a: &TrainArgs) -> Result<()> {
    let mut cfg = match config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(s) = a.steps {
        cfg.steps = Some(s);
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
        if a.steps.is_none() {
            cfg.steps = None;
        }
    }

    let (catalog, interactions, cases) = match (&a.synthetic, &a.catalog, &a.interactions) {
        (Some(shape), None, None) => {
            let (c, p) = parse_shape(shape)?;
            let spec = SyntheticSpec {
                n_clusters: c,
                products_per_cluster: p,
                patches_per_product: cfg.l,
                patch_dim: cfg.d_img,
                noise: 0.1,
            };
            let (cat, ints, cases) = make_synthetic(&spec, cfg.seed);
            (cat, ints, Some(cases))
        }
        (None, Some(cat), Some(ints)) => (Catalog::load(cat)?, load_interactions(ints)?, None),
        _ => {
            return Err(Error::Config(
                "train needs either --synthetic CxP or both --catalog and --interactions".into(),
            ))
        }
    };

    let mut trainer = Trainer::new(catalog, &interactions, cfg)?;
    let log = trainer.train()?;
    save_checkpoint(&trainer.params, &a.out)?;
    trainer.catalog.vocab.save(&sidecar(&a.out, ".vocab"))?;
    log.save_csv(&sidecar(&a.out, ".log.csv"))?;
    if let Some(cases) = cases {
        trainer.catalog.save(&sidecar(&a.out, ".catalog.jsonl"))?;
        save_cases(&cases, &sidecar(&a.out, ".cases.jsonl"))?;
    }
    emit(format_args!(
        "trained {} steps, checkpoint {}\n",
        log.steps.len(),
        a.out.display()
    ));
    Ok(())
}

fn cmd_build_index(seed: Option<u64>, a: &BuildIndexArgs) -> Result<()> {
    let (params, vocab) = load_checkpoint_pair(&a.checkpoint)?;
    let mut catalog = Catalog::load(&a.catalog)?;
    catalog.materialize_patches(a.patches, params.dims.d_img);

    let mut embs = EmbeddingMatrix::new(params.dims.d);
    for p in catalog.products() {
        let enc = encode_product(&params, &vocab, p)?;
        embs.push_f32_rounded(p.id, &enc.v)?;
    }
    embs.save(&a.out_emb)?;

    let c = if a.centroids == 0 {
        HcIndex::default_centroids(embs.len())
    } else {
        a.centroids
    };
    let index = HcIndex::build(&embs, c, a.iters, seed.unwrap_or(17))?;
    index.save(&a.out_index)?;
    emit(format_args!(
        "indexed {} products into {} clusters, index {}\n",
        embs.len(),
        index.n_centroids(),
        a.out_index.display()
    ));
    Ok(())
}

fn cmd_query(a: &QueryArgs) -> Result<()> {
    let (params, vocab) = load_checkpoint_pair(&a.checkpoint)?;
    let index = HcIndex::load(&a.index)?;
    let query = Query::parse(&a.text)?;
    let enc = encode_query(&params, &vocab, &query.tokens)?;
    let nprobe = if a.nprobe == 0 {
        HcIndex::default_nprobe(index.n_centroids())
    } else {
        a.nprobe
    };

    let results = match &a.filter {
        None => index.search(&enc.u, a.k, nprobe),
        Some(spec) => {
            let cat_path = a.catalog.as_ref().ok_or_else(|| {
                Error::Config("--filter needs --catalog for the attribute postings".into())
            })?;
            let catalog = Catalog::load(cat_path)?;
            let inverted = build_inverted(&catalog);
            let expr = parse_filter(spec)?;
            // overfetch so the filter still has k candidates to keep
            let fetch = if a.overfetch == 0 { 3 * a.k } else { a.overfetch.max(a.k) };
            let fetched = index.search(&enc.u, fetch, nprobe);
            let ids: Vec<u64> = fetched.iter().map(|r| r.0).collect();
            let allowed: HashSet<u64> = apply_filter(&ids, &expr, &inverted).into_iter().collect();
            let mut kept: Vec<(u64, f64)> =
                fetched.into_iter().filter(|r| allowed.contains(&r.0)).collect();
            kept.truncate(a.k);
            kept
        }
    };

    emit(format_args!("{}\n", query.qid));
    for (rank, (id, score)) in results.iter().enumerate() {
        emit(format_args!("{} {} {:.6}\n", rank + 1, id, score));
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let (params, vocab) = load_checkpoint_pair(&a.checkpoint)?;
    let index = HcIndex::load(&a.index)?;
    let catalog = Catalog::load(&a.catalog)?;
    let mut cases = load_cases(&a.cases)?;
    let nprobe = if a.nprobe == 0 {
        HcIndex::default_nprobe(index.n_centroids())
    } else {
        a.nprobe
    };
    for case in &mut cases {
        let enc = encode_query(&params, &vocab, &case.query.tokens)?;
        case.retrieved = index
            .search(&enc.u, a.k, nprobe)
            .iter()
            .map(|r| r.0)
            .collect();
    }
    let scorer = JaccardScorer;
    let n = cases.len();
    let rows = vec![
        MetricRow { metric: "recall".into(), k: a.k, value: recall_at_k(&cases)?, n_cases: n },
        MetricRow { metric: "p_rel".into(), k: a.k, value: p_rel(&cases, &catalog, &scorer)?, n_cases: n },
        MetricRow { metric: "p_cate".into(), k: a.k, value: p_cate(&cases, &catalog, &scorer)?, n_cases: n },
    ];
    let csv = report_csv(&rows);
    match &a.out {
        Some(p) => std::fs::write(p, csv).map_err(|e| Error::io(p, e))?,
        None => emit(format_args!("{csv}")),
    }
    Ok(())
}

fn cmd_hash_query(a: &HashQueryArgs) -> Result<()> {
    let query = Query::parse(&a.text)?;
    emit(format_args!("{}\n", query.qid));
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Train(a) => cmd_train(cli.seed, cli.config.as_deref(), a),
        Cmd::BuildIndex(a) => cmd_build_index(cli.seed, a),
        Cmd::Query(a) => cmd_query(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::HashQuery(a) => cmd_hash_query(a),
    }
}

/// Parse and run; returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(Error::EmptyQuery) => {
            eprintln!("error: {}", Error::EmptyQuery);
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

/// Entry point for the `mmr` binary.
pub fn run() -> i32 {
    run_from(std::env::args_os())
}
