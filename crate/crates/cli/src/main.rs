//! `repnet` command-line pipeline.
//!
//! Exit status: 0 success, 1 usage error, 2 data or format error,
//! 3 numerical error. Failures print one `error code=.. kind=.. msg=".."`
//! line to stderr.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use repnet::analysis::{occlusion_saliency, repression_cca, InputExtent, Occluder};
use repnet::checkpoint::{load_network, save_checkpoint};
use repnet::data::{generate_synthetic, read_manifest, write_manifest, Dataset};
use repnet::layers::RepressionKind;
use repnet::network::RepNet;
use repnet::par::Exec;
use repnet::retrieval::{
    bench, embed_dataset, evaluate_hits, read_embeddings, read_rankings, relevance, relevance_from_rows, search_batch,
    write_embeddings, write_rankings, BucketIndex, EmbeddedSample, Gallery, Query, SearchMode,
};
use repnet::train::{train, write_loss_log};

use config::RunConfig;

const CONFIG_FILE: &str = "config.json";
const CHECKPOINT_FILE: &str = "checkpoint.rpnc";
const LOSS_LOG_FILE: &str = "loss_log.csv";
const GALLERY_FILE: &str = "gallery.bin";
const QUERIES_FILE: &str = "queries.bin";
const RANKINGS_FILE: &str = "rankings.csv";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    fn line(&self) -> String {
        let (kind, msg) = match self {
            CliError::Usage(m) => ("usage", m),
            CliError::Data(m) => ("data", m),
            CliError::Numerical(m) => ("numerical", m),
        };
        let msg = msg.replace('\\', "\\\\").replace('"', "\\\"").replace('\n', " ");
        format!("error code={} kind={kind} msg=\"{msg}\"", self.code())
    }
}

impl From<repnet::Error> for CliError {
    fn from(e: repnet::Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Data(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(
    name = "repnet",
    version,
    about = "Repression-network training, retrieval and analysis pipeline"
)]
struct Cli {
    /// JSON run config; defaults to <out>/config.json when present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for data generation, initialization and sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Working directory for all inputs and outputs.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Repression layer: prl, srl, crl or norep.
    #[arg(long, global = true)]
    rep: Option<RepressionKind>,
    /// Ranking depth.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// linear or bucket.
    #[arg(long, global = true)]
    search: Option<SearchMode>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset into <out>/train and <out>/test.
    GenData,
    /// Train on a manifest; writes checkpoint, loss log and config.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Embed a manifest into an embedding file.
    Embed {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Report bucket statistics for a gallery.
    Index {
        #[arg(long)]
        gallery: Option<PathBuf>,
    },
    /// Rank queries against a gallery and write the ranking CSV.
    Query {
        #[arg(long)]
        gallery: Option<PathBuf>,
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Also print MAP and precision@k.
        #[arg(long)]
        with_eval: bool,
    },
    /// Score a ranking CSV against gallery and query labels.
    Eval {
        #[arg(long)]
        rankings: Option<PathBuf>,
        #[arg(long)]
        gallery: Option<PathBuf>,
        #[arg(long)]
        queries: Option<PathBuf>,
    },
    /// First canonical correlation between F_SLS-1 and F_SLS-2.
    Cca {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Occlusion saliency map for one sample.
    Saliency {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// sample_idx of the sample; the first sample when omitted.
        #[arg(long)]
        sample: Option<usize>,
    },
    /// Time linear vs bucket search.
    Bench {
        #[arg(long)]
        gallery: Option<PathBuf>,
        #[arg(long)]
        queries: Option<PathBuf>,
    },
    /// Print the effective config as JSON.
    Config,
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    exec: Exec,
}

impl Ctx {
    fn path(&self, given: &Option<PathBuf>, default: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| self.out.join(default))
    }

    fn dataset(&self, dir: &Path) -> CliResult<Dataset> {
        let ds = read_manifest(dir, self.cfg.network.n_colors, self.cfg.network.n_models)?;
        if ds.feature_dim != self.cfg.network.input_dim {
            return Err(CliError::Data(format!(
                "{} holds {}-dim features, config expects {}",
                dir.display(),
                ds.feature_dim,
                self.cfg.network.input_dim
            )));
        }
        Ok(ds)
    }

    fn network(&self, checkpoint: &Option<PathBuf>) -> CliResult<RepNet> {
        Ok(load_network(
            &self.path(checkpoint, CHECKPOINT_FILE),
            self.cfg.network.clone(),
        )?)
    }

    fn write_config(&self) -> CliResult<()> {
        std::fs::write(self.out.join(CONFIG_FILE), self.cfg.to_json())?;
        Ok(())
    }
}

fn gallery_from(items: &[EmbeddedSample]) -> CliResult<Gallery> {
    let first = items
        .first()
        .ok_or_else(|| CliError::Data("embedding file is empty".into()))?;
    let (nc, nm) = (first.embedding.color_probs.len(), first.embedding.model_probs.len());
    Ok(Gallery::from_embedded(items, nc, nm)?)
}

fn load_search_inputs(gallery: &Path, queries: &Path) -> CliResult<(Gallery, Vec<Query>)> {
    let g = gallery_from(&read_embeddings(gallery)?)?;
    let q: Vec<Query> = read_embeddings(queries)?.iter().map(Query::from_embedded).collect();
    if let Some(first) = q.first() {
        if first.sls.len() != g.d_sls() || first.acs.len() != g.d_acs() {
            return Err(CliError::Data(
                "query and gallery embeddings have different dimensions".into(),
            ));
        }
    }
    Ok((g, q))
}

fn run(cli: Cli, threads: usize) -> CliResult<()> {
    let config_path = cli.config.clone().or_else(|| {
        let p = cli.out.join(CONFIG_FILE);
        p.exists().then_some(p)
    });
    let mut cfg = match &config_path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.network.seed = seed;
    }
    if let Some(rep) = cli.rep {
        cfg.network.rep_kind = rep;
    }
    if let Some(k) = cli.k {
        if k == 0 {
            return Err(CliError::Usage("--k must be at least 1".into()));
        }
        cfg.retrieval.k = k;
    }
    if let Some(search) = cli.search {
        cfg.retrieval.search = search;
    }
    cfg.validate()?;
    std::fs::create_dir_all(&cli.out)?;
    let ctx = Ctx {
        cfg,
        out: cli.out,
        exec: Exec::from_threads(threads),
    };
    let cfg = &ctx.cfg;

    match &cli.command {
        Command::Config => print!("{}", cfg.to_json()),
        Command::GenData => {
            let data = generate_synthetic(&cfg.data, cfg.network.seed)?;
            let (train_set, test_set) = data.split_holdout(cfg.holdout)?;
            for (name, set) in [("train", &train_set), ("test", &test_set)] {
                let dir = ctx.out.join(name);
                std::fs::create_dir_all(&dir)?;
                write_manifest(set, &dir)?;
            }
            ctx.write_config()?;
            println!(
                "train_samples={}\ntest_samples={}\nidentities={}",
                train_set.len(),
                test_set.len(),
                data.distinct_ids()
            );
        }
        Command::Train { data } => {
            let ds = ctx.dataset(&ctx.path(data, "train"))?;
            let mut net = RepNet::new(cfg.network.clone())?;
            let rows = train(&mut net, &ds, cfg.train_steps, ctx.exec)?;
            save_checkpoint(net.params(), &ctx.out.join(CHECKPOINT_FILE))?;
            write_loss_log(&rows, &ctx.out.join(LOSS_LOG_FILE))?;
            ctx.write_config()?;
            let last = rows.last().map(|r| r.losses).unwrap_or_default();
            println!(
                "steps={}\nfinal_triplet_loss={}\nfinal_color_loss={}\nfinal_model_loss={}\nzero_embeddings={}",
                rows.len(),
                last.triplet,
                last.color,
                last.model,
                net.zero_embeddings()
            );
        }
        Command::Embed {
            checkpoint,
            data,
            output,
        } => {
            let net = ctx.network(checkpoint)?;
            let ds = ctx.dataset(&ctx.path(data, "train"))?;
            let items = embed_dataset(net.embed_all(&ds, ctx.exec)?, &ds);
            let out = ctx.path(output, GALLERY_FILE);
            write_embeddings(&items, &out)?;
            let (color_acc, model_acc) = net.attribute_accuracy(&ds, ctx.exec)?;
            println!(
                "embedded={}\noutput={}\ncolor_accuracy={color_acc}\nmodel_accuracy={model_acc}",
                items.len(),
                out.display()
            );
        }
        Command::Index { gallery } => {
            let g = gallery_from(&read_embeddings(&ctx.path(gallery, GALLERY_FILE))?)?;
            print!("{}", BucketIndex::build(&g).stats().to_key_value());
        }
        Command::Query {
            gallery,
            queries,
            output,
            with_eval,
        } => {
            let (g, q) = load_search_inputs(&ctx.path(gallery, GALLERY_FILE), &ctx.path(queries, QUERIES_FILE))?;
            let index = BucketIndex::build(&g);
            let rankings = search_batch(&q, &g, &index, cfg.retrieval.k, cfg.retrieval.search, ctx.exec)?;
            let out = ctx.path(output, RANKINGS_FILE);
            let mut buf = Vec::new();
            write_rankings(&q, &rankings, &g, &mut buf)?;
            std::fs::write(&out, buf)?;
            if *with_eval {
                let report = evaluate_hits(&relevance(&q, &rankings, &g), &cfg.retrieval.precision_at)?;
                print!("{}", report.to_key_value());
            }
        }
        Command::Eval {
            rankings,
            gallery,
            queries,
        } => {
            let (g, q) = load_search_inputs(&ctx.path(gallery, GALLERY_FILE), &ctx.path(queries, QUERIES_FILE))?;
            let text = std::fs::read_to_string(ctx.path(rankings, RANKINGS_FILE))?;
            let rows = read_rankings(&text)?;
            let report = evaluate_hits(&relevance_from_rows(&rows, &q, &g)?, &cfg.retrieval.precision_at)?;
            print!("{}", report.to_key_value());
        }
        Command::Cca { checkpoint, data } => {
            let net = ctx.network(checkpoint)?;
            let ds = ctx.dataset(&ctx.path(data, "train"))?;
            print!(
                "{}",
                repression_cca(&net, &ds, cfg.analysis.ridge, ctx.exec)?.to_key_value()
            );
        }
        Command::Saliency {
            checkpoint,
            data,
            sample,
        } => {
            let net = ctx.network(checkpoint)?;
            let ds = ctx.dataset(&ctx.path(data, "test"))?;
            let s = match sample {
                Some(idx) => ds
                    .samples
                    .iter()
                    .find(|s| s.sample_idx == *idx)
                    .ok_or_else(|| CliError::Data(format!("sample_idx {idx} not in manifest")))?,
                None => ds
                    .samples
                    .first()
                    .ok_or_else(|| CliError::Data("manifest is empty".into()))?,
            };
            let a = &cfg.analysis;
            let extent = match a.grid {
                Some([height, width]) => InputExtent::Grid { height, width },
                None => InputExtent::Linear(s.features.len()),
            };
            let default = Occluder::default_for(extent);
            let size = a.occluder_size.unwrap_or(default.size);
            let occluder = Occluder {
                size,
                stride: a.occluder_stride.unwrap_or(if a.occluder_size.is_some() {
                    (size / 2).max(1)
                } else {
                    default.stride
                }),
                fill: a.occluder_fill,
            };
            let map = occlusion_saliency(&net, &s.features, extent, a.saliency_feature, occluder, ctx.exec)?;
            std::fs::write(ctx.out.join("saliency.csv"), map.to_csv())?;
            std::fs::write(ctx.out.join("saliency.pgm"), map.to_pgm())?;
            println!(
                "sample_idx={}\nfeature={}\nrows={}\ncols={}\nsize={}\nstride={}\nmax={}",
                s.sample_idx,
                map.feature,
                map.rows,
                map.cols,
                occluder.size,
                occluder.stride,
                map.values.iter().copied().fold(0.0, f64::max)
            );
        }
        Command::Bench { gallery, queries } => {
            let (g, q) = load_search_inputs(&ctx.path(gallery, GALLERY_FILE), &ctx.path(queries, QUERIES_FILE))?;
            let index = BucketIndex::build(&g);
            let report = bench(
                &g,
                &index,
                &q,
                cfg.retrieval.k,
                cfg.retrieval.bench_repetitions,
                ctx.exec,
            )?;
            print!("{}", report.to_key_value());
        }
    }
    Ok(())
}

fn threads_from_env() -> CliResult<usize> {
    match std::env::var("REPNET_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::Usage(format!(
                "REPNET_THREADS must be a positive integer, got '{v}'"
            ))),
        },
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = threads_from_env().and_then(|threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot size worker pool: {e}")))?;
        run(cli, threads)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.code())
        }
    }
}
