//! `a2s`: corpus generation, augmentation, training, evaluation and
//! retrieval from the command line.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error
//! (including a failed gradient check), 3 remote generation failure.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use a2s_core::corpus::{
    blend_datasets, generate_synthetic_corpus, split_train_valid, write_bundle, BundlePaths, DatasetBundle, ListingSet,
};
use a2s_core::evalmetrics::{build_bm25_index, distinct2, evaluate_model, mrr, ConfigEcho, GeneratedQuery};
use a2s_core::features::{featurize_document, featurize_query, DocumentFeatures};
use a2s_core::synthgen::{augment, Backend, RemoteClient, Strategy, SyntheticQuery, TemplateId};
use a2s_core::towers::{embed_documents, embed_query, Mode, ModelParams, ParamId};
use a2s_core::training::{gradient_check, load_checkpoint, save_checkpoint, train, Checkpoint, GradcheckConfig};
use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use config::{BackendKind, RunConfig};

const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "a2s", version, about = "Synthetic-data augmentation for two-tower retrieval")]
struct Cli {
    /// TOML run configuration (defaults apply when omitted).
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration value, e.g. `--set train.batch_size=128`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BackendArg {
    Det,
    Remote,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TemplateArg {
    T1,
    T2,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Valid,
    All,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic marketplace corpus into the data directory.
    GenCorpus,
    /// Run an augmentation strategy over the original corpus.
    Augment {
        #[arg(long)]
        strategy: Strategy,
        /// Overrides `backend.kind`.
        #[arg(long)]
        backend: Option<BackendArg>,
        /// Queries per listing (1–10); overrides `backend.queries_per_listing`.
        #[arg(long)]
        n: Option<usize>,
        /// Overrides `backend.template`.
        #[arg(long)]
        template: Option<TemplateArg>,
    },
    /// Train a model on original data, optionally blended with synthetic data.
    Train {
        /// Synthetic data to blend in (produced by `augment`).
        #[arg(long)]
        strategy: Option<Strategy>,
        /// Blend ratio `original:synthetic` (e.g. `4:1`); default `1:0`
        /// without a strategy and `4:1` with one.
        #[arg(long)]
        mix: Option<String>,
        /// Total engagement pairs in the blend; default = all original
        /// training pairs.
        #[arg(long)]
        volume: Option<usize>,
        /// Checkpoint name; default `ori`, or the strategy tag.
        #[arg(long)]
        name: Option<String>,
    },
    /// Score judgments with a checkpoint and write a metrics report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Judgment file (JSONL); default: judgments of the data bundle.
        #[arg(long)]
        judgments: Option<PathBuf>,
        /// Which judgments of the data bundle to score.
        #[arg(long, value_enum, default_value = "valid")]
        split: SplitArg,
        /// Generated queries (JSONL from `augment`) for Distinct-2 and BM25 MRR.
        #[arg(long)]
        queries: Option<PathBuf>,
    },
    /// Rank listings for a free-text query with a checkpoint.
    Retrieve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long, default_value_t = 10)]
        top_n: usize,
        #[arg(long, default_value_t = 0)]
        country: u32,
    },
    /// Compare analytic and finite-difference gradients on small models.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        /// Deliberately perturb one tensor's gradient (self-test of the check).
        #[arg(long, value_name = "TENSOR")]
        corrupt: Option<String>,
    },
}

/// An error with the process exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

trait Code<T> {
    fn code(self, code: u8) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Code<T> for Result<T, E> {
    fn code(self, code: u8) -> Result<T, Failure> {
        self.map_err(|e| Failure { code, error: e.into() })
    }
}

const USAGE: u8 = 1;
const DATA: u8 = 2;
const REMOTE: u8 = 3;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides).code(USAGE)?;
    match cli.command {
        Command::GenCorpus => gen_corpus(&cfg),
        Command::Augment { strategy, backend, n, template } => cmd_augment(&cfg, strategy, backend, n, template),
        Command::Train { strategy, mix, volume, name } => cmd_train(&cfg, strategy, mix.as_deref(), volume, name),
        Command::Eval { checkpoint, judgments, split, queries } => {
            cmd_eval(&cfg, &checkpoint, judgments.as_deref(), split, queries.as_deref())
        }
        Command::Retrieve { checkpoint, query, top_n, country } => cmd_retrieve(&cfg, &checkpoint, &query, top_n, country),
        Command::Gradcheck { seeds, corrupt } => cmd_gradcheck(seeds, corrupt.as_deref()),
    }
}

fn original_paths(cfg: &RunConfig) -> BundlePaths {
    BundlePaths::in_dir(&cfg.paths.data_dir, "")
}

fn synthetic_prefix(s: Strategy) -> String {
    format!("synthetic_{}_", s.tag())
}

fn load_original(cfg: &RunConfig) -> Result<DatasetBundle, Failure> {
    original_paths(cfg).load().context("loading the original corpus (run `a2s gen-corpus` first?)").code(DATA)
}

fn write_file(path: &Path, body: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).code(DATA)?;
    }
    fs::write(path, body).with_context(|| format!("writing {}", path.display())).code(DATA)
}

fn jsonl<T: serde::Serialize>(items: &[T]) -> String {
    items.iter().map(|i| serde_json::to_string(i).expect("serializable") + "\n").collect()
}

fn gen_corpus(cfg: &RunConfig) -> Result<(), Failure> {
    let bundle = generate_synthetic_corpus(&cfg.corpus).code(USAGE)?;
    write_bundle(&bundle, &original_paths(cfg)).code(DATA)?;
    let positives = bundle.engagements.iter().filter(|e| e.label == 1).count();
    println!(
        "wrote {} listings, {} queries, {} engagements ({} engaged), {} judgments to {}",
        bundle.listings.len(),
        bundle.queries.len(),
        bundle.engagements.len(),
        positives,
        bundle.judgments.len(),
        cfg.paths.data_dir.display()
    );
    Ok(())
}

fn cmd_augment(
    cfg: &RunConfig,
    strategy: Strategy,
    backend: Option<BackendArg>,
    n: Option<usize>,
    template: Option<TemplateArg>,
) -> Result<(), Failure> {
    let source = load_original(cfg)?;
    let kind = match backend {
        Some(BackendArg::Det) => BackendKind::Deterministic,
        Some(BackendArg::Remote) => BackendKind::Remote,
        None => cfg.backend.kind,
    };
    let backend = match kind {
        BackendKind::Deterministic => Backend::Deterministic { seed: cfg.backend.seed },
        BackendKind::Remote => Backend::Remote(RemoteClient::new(cfg.backend.remote.clone()).code(USAGE)?),
    };
    let template = match template {
        Some(TemplateArg::T1) => TemplateId::T1Basic,
        Some(TemplateArg::T2) => TemplateId::T2Detailed,
        None => cfg.backend.template,
    };
    let n = n.unwrap_or(cfg.backend.queries_per_listing);
    let out = augment(&source, strategy, &backend, template, n).code(USAGE)?;

    let prefix = synthetic_prefix(strategy);
    let dir = &cfg.paths.data_dir;
    write_bundle(&out.bundle, &BundlePaths::in_dir(dir, &prefix)).code(DATA)?;
    write_file(&dir.join(format!("{prefix}queries.jsonl")), &jsonl(&out.queries))?;
    write_file(&dir.join(format!("{prefix}enhanced.jsonl")), &jsonl(&out.enhanced))?;
    let failures: Vec<serde_json::Value> = out
        .failures
        .iter()
        .map(|f| serde_json::json!({"listing_id": f.listing_id, "error": f.error, "remote": f.remote}))
        .collect();
    write_file(&dir.join(format!("{prefix}failures.jsonl")), &jsonl(&failures))?;
    println!(
        "{}: {} queries, {} enhanced listings, {} engagements, {} failures ({})",
        strategy.tag(),
        out.queries.len(),
        out.enhanced.len(),
        out.bundle.engagements.len(),
        out.failures.len(),
        backend.descriptor()
    );
    let remote_failures = out.failures.iter().filter(|f| f.remote).count();
    if remote_failures > 0 {
        return Err(Failure {
            code: REMOTE,
            error: anyhow!("{remote_failures} listings failed on the remote backend; see {prefix}failures.jsonl"),
        });
    }
    Ok(())
}

/// `a:b` with non-negative weights, normalized to the synthetic fraction.
fn parse_mix(mix: &str) -> anyhow::Result<f64> {
    let (a, b) = mix.split_once(':').ok_or_else(|| anyhow!("--mix must look like ORIGINAL:SYNTHETIC, got {mix:?}"))?;
    let a: f64 = a.trim().parse().with_context(|| format!("bad --mix weight {a:?}"))?;
    let b: f64 = b.trim().parse().with_context(|| format!("bad --mix weight {b:?}"))?;
    if !(a >= 0.0 && b >= 0.0 && a + b > 0.0 && (a + b).is_finite()) {
        bail!("--mix weights must be non-negative and not both zero");
    }
    Ok(b / (a + b))
}

fn cmd_train(
    cfg: &RunConfig,
    strategy: Option<Strategy>,
    mix: Option<&str>,
    volume: Option<usize>,
    name: Option<String>,
) -> Result<(), Failure> {
    let syn_fraction = match (mix, strategy) {
        (Some(m), _) => parse_mix(m).code(USAGE)?,
        (None, Some(_)) => 0.2,
        (None, None) => 0.0,
    };
    if syn_fraction > 0.0 && strategy.is_none() {
        return Err(Failure { code: USAGE, error: anyhow!("a synthetic share in --mix needs --strategy") });
    }
    let original = load_original(cfg)?;
    let (train_o, valid) = split_train_valid(&original, cfg.train.valid_fraction, cfg.train.seed).code(DATA)?;
    let synthetic = match strategy {
        Some(s) => BundlePaths::in_dir(&cfg.paths.data_dir, &synthetic_prefix(s))
            .load()
            .with_context(|| format!("loading synthetic {} data (run `a2s augment --strategy {}` first?)", s.tag(), s.tag()))
            .code(DATA)?,
        None => DatasetBundle::new(ListingSet::new(), vec![], vec![], vec![]).code(DATA)?,
    };
    // S2 re-points original engagements at enhanced listings: drop the ones
    // whose queries landed in the validation split.
    let synthetic = if strategy == Some(Strategy::S2) {
        let valid_q: std::collections::HashSet<&str> = valid.queries.iter().map(|q| q.id.as_str()).collect();
        let kept = synthetic.engagements.iter().filter(|e| !valid_q.contains(e.query_id.as_str())).cloned().collect();
        synthetic.restricted_to(kept)
    } else {
        synthetic
    };
    let volume = volume.unwrap_or(train_o.engagements.len());
    let n_syn = (volume as f64 * syn_fraction).round() as usize;
    let blend = blend_datasets(&train_o, &synthetic, volume - n_syn, n_syn, cfg.train.seed).code(DATA)?;
    println!("training on {} pairs ({} synthetic), validating on {} judgments", volume, n_syn, valid.judgments.len());

    let outcome = train(&blend, &valid, &cfg.setup()).code(DATA)?;
    for e in &outcome.history {
        println!("epoch {}\tmean_loss {:.5}\tvalid_roc_auc {:.5}", e.epoch, e.mean_loss, e.valid_auc);
    }
    let name = name.unwrap_or_else(|| strategy.map_or("ori", Strategy::tag).to_owned());
    let ckpt_path = cfg.paths.checkpoint_dir.join(format!("{name}.ckpt"));
    if let Some(dir) = ckpt_path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).code(DATA)?;
    }
    save_checkpoint(&outcome.checkpoint, &ckpt_path).code(DATA)?;
    write_file(&cfg.paths.checkpoint_dir.join(format!("{name}.log.tsv")), &(outcome.log.join("\n") + "\n"))?;
    println!("best valid ROC_AUC {:.5}; checkpoint {}", outcome.best_valid_auc(), ckpt_path.display());
    Ok(())
}

fn load_model(path: &Path) -> Result<(Checkpoint, ModelParams), Failure> {
    let ckpt = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display())).code(DATA)?;
    let params = ckpt.to_params().code(DATA)?;
    Ok((ckpt, params))
}

/// Listing ids of enhanced copies (`id~s2`) map back to their parent.
fn parent_id(id: &str) -> &str {
    id.split_once('~').map_or(id, |(p, _)| p)
}

fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    judgments: Option<&Path>,
    split: SplitArg,
    queries: Option<&Path>,
) -> Result<(), Failure> {
    let (ckpt, params) = load_model(checkpoint)?;
    let original = load_original(cfg)?;
    let mut bundle = match split {
        SplitArg::All => original.clone(),
        SplitArg::Valid => split_train_valid(&original, cfg.train.valid_fraction, cfg.train.seed).code(DATA)?.1,
    };
    if let Some(path) = judgments {
        let js = a2s_core::corpus::load_judgments(path).code(DATA)?;
        bundle = DatasetBundle::new(original.listings.clone(), original.queries.clone(), vec![], js).code(DATA)?;
    }
    let m = &ckpt.meta;
    let echo = ConfigEcho {
        batch_size: m.batch_size,
        embed_dim: m.model.embed_dim,
        scale: m.loss.scale,
        lambda_relevance: m.loss.lambda_relevance,
        lambda_engagement: m.loss.lambda_engagement,
    };
    let mut report = evaluate_model(&params, &m.features, &bundle, echo).code(DATA)?;

    if let Some(path) = queries {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).code(DATA)?;
        let generated: Vec<SyntheticQuery> = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
            .collect::<anyhow::Result<_>>()
            .code(DATA)?;
        let texts: Vec<&str> = generated.iter().map(|q| q.text.as_str()).collect();
        report.distinct2 = Some(distinct2(&texts).code(DATA)?);
        let index = build_bm25_index(original.listings.as_slice()).code(DATA)?;
        let gq: Vec<GeneratedQuery> = generated
            .iter()
            .map(|q| GeneratedQuery {
                listing_id: parent_id(&q.parent_listing_id).to_owned(),
                text: q.text.clone(),
                ordinal: q.ordinal,
            })
            .collect();
        report.mrr = Some(
            mrr(&gq, cfg.eval.mrr_top_k, &index, &cfg.eval.bm25, cfg.eval.retrieval_cutoff).code(DATA)?,
        );
    }

    let dir = &cfg.paths.report_dir;
    write_file(&dir.join("report.tsv"), &format!("{}\n{}\n", report.tsv_header(), report.tsv_row()))?;
    write_file(&dir.join("report.json"), &(serde_json::to_string_pretty(&report).expect("serializable") + "\n"))?;
    println!("{report}");
    Ok(())
}

fn cmd_retrieve(cfg: &RunConfig, checkpoint: &Path, query: &str, top_n: usize, country: u32) -> Result<(), Failure> {
    let (ckpt, params) = load_model(checkpoint)?;
    let feats = &ckpt.meta.features;
    let original = load_original(cfg)?;
    let q = a2s_core::corpus::QueryRecord { id: "cli".into(), text: query.to_owned(), country };
    let qe = embed_query(&featurize_query(&q, feats).code(USAGE)?, &params, Mode::Eval).code(DATA)?;
    let listings = original.listings.as_slice();
    let docs: Vec<DocumentFeatures> = listings
        .iter()
        .map(|l| featurize_document(l, feats, feats.reference_time))
        .collect::<Result<_, _>>()
        .code(DATA)?;
    let mut scored: Vec<(f64, usize)> = Vec::with_capacity(docs.len());
    for (c, chunk) in docs.chunks(256).enumerate() {
        let refs: Vec<&DocumentFeatures> = chunk.iter().collect();
        for (k, de) in embed_documents(&refs, &params, Mode::Eval).code(DATA)?.iter().enumerate() {
            scored.push((qe.iter().zip(de).map(|(a, b)| a * b).sum(), c * 256 + k));
        }
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| listings[a.1].id.cmp(&listings[b.1].id)));
    println!("rank\tlisting_id\tscore\ttitle");
    for (rank, (s, i)) in scored.iter().take(top_n).enumerate() {
        println!("{}\t{}\t{:.5}\t{}", rank + 1, listings[*i].id, s, listings[*i].title);
    }
    Ok(())
}

fn cmd_gradcheck(seeds: u64, corrupt: Option<&str>) -> Result<(), Failure> {
    let corrupt = match corrupt {
        Some(name) => Some(ParamId::ALL.into_iter().find(|id| id.name() == name).ok_or_else(|| Failure {
            code: USAGE,
            error: anyhow!(
                "unknown tensor {name:?}; expected one of: {}",
                ParamId::ALL.map(ParamId::name).join(", ")
            ),
        })?),
        None => None,
    };
    if seeds == 0 {
        return Err(Failure { code: USAGE, error: anyhow!("--seeds must be at least 1") });
    }
    let cfg = GradcheckConfig { corrupt, ..Default::default() };
    let mut failing = Vec::new();
    println!("seed\tmax_rel_error\tworst_tensor");
    for seed in 0..seeds {
        let report = gradient_check(seed, &cfg).code(DATA)?;
        let worst = report.per_tensor.iter().max_by(|a, b| a.1.total_cmp(&b.1)).expect("tensors");
        println!("{seed}\t{:.3e}\t{}", worst.1, worst.0);
        for (name, err) in &report.per_tensor {
            if *err > GRADCHECK_TOLERANCE {
                failing.push(format!("seed {seed}: {name} relative error {err:.3e}"));
            }
        }
    }
    if failing.is_empty() {
        println!("gradient check passed: all relative errors <= {GRADCHECK_TOLERANCE:e}");
        Ok(())
    } else {
        Err(Failure { code: DATA, error: anyhow!("gradient check failed:\n  {}", failing.join("\n  ")) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mix_parsing() {
        assert_eq!(parse_mix("4:1").unwrap(), 0.2);
        assert_eq!(parse_mix("1:0").unwrap(), 0.0);
        assert!(parse_mix("0:0").is_err());
        assert!(parse_mix("-1:2").is_err());
        assert!(parse_mix("half").is_err());
    }

    #[test]
    fn enhanced_ids_map_to_parents() {
        assert_eq!(parent_id("l00001~s3"), "l00001");
        assert_eq!(parent_id("l00001"), "l00001");
    }
}
