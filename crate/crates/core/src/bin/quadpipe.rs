use std::io::{self, BufReader, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use quadpipe::corpus::{load_snapshot, CorpusSnapshot, StageManifest};
use quadpipe::curriculum;
use quadpipe::diagnostics::{self, compression_report, render_compression};
use quadpipe::gateway::{MockWorker, Workers};
use quadpipe::pipeline::{
    self, parse_override, CacheSetting, PipelineConfig, Preset, RunSettings, RunSummary, StageName,
};
use quadpipe::preference;
use quadpipe::synthesis::{self, SynthesisJob};

#[derive(Parser)]
#[command(
    name = "quadpipe",
    version,
    about = "Deterministic multimodal instruction-data curation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides one config key, e.g. `--set dedup.delta=0.2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run seed; overrides the config file.
    #[arg(long, env = "QUADPIPE_SEED")]
    seed: Option<u64>,
    /// Worker thread pool size.
    #[arg(long)]
    workers: Option<usize>,
    /// Cache directory, or `off`.
    #[arg(long)]
    cache: Option<String>,
}

impl Common {
    fn overrides(&self) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        for o in &self.overrides {
            out.push(parse_override(o)?);
        }
        if let Some(seed) = self.seed {
            out.push(("seed".into(), seed.to_string()));
        }
        Ok(out)
    }

    fn load(&self, required: bool) -> Result<PipelineConfig> {
        let overrides = self.overrides()?;
        match &self.config {
            Some(path) => Ok(PipelineConfig::load(path, &overrides)?),
            None if required => bail!("--config is required"),
            None => Ok(PipelineConfig::from_toml_with("", &overrides)?),
        }
    }

    fn settings(&self) -> RunSettings {
        RunSettings {
            cache: self
                .cache
                .as_deref()
                .map(CacheSetting::parse)
                .unwrap_or_default(),
            threads: self.workers,
            stop_after: None,
        }
    }

    fn install_threads(&self) -> Result<()> {
        if let Some(n) = self.workers {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()?;
        }
        Ok(())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the curation stages over an input corpus.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        /// Run directory.
        #[arg(long)]
        out: PathBuf,
        /// vqa_full, caption or custom.
        #[arg(long)]
        preset: Option<String>,
        /// Stop once this stage has completed (the run stays resumable).
        #[arg(long, value_name = "STAGE")]
        stop_after: Option<String>,
    },
    /// Continue an interrupted run.
    Resume {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Assign curriculum tiers and emit the training schedule.
    Tier {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build MPO preference pairs.
    Pairs {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        /// Output JSONL file of pairs.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute VNR/VIF/MG/ML from a correctness log.
    Diag {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Print compression (and distribution) tables.
    Report {
        /// A run directory.
        #[arg(long, conflicts_with_all = ["raw", "counts"])]
        run: Option<PathBuf>,
        /// Raw pool size, for an ad-hoc table.
        #[arg(long, requires = "counts")]
        raw: Option<f64>,
        /// Comma-separated stage counts.
        #[arg(long, value_delimiter = ',')]
        counts: Vec<f64>,
    },
    /// Serve the built-in mock worker over stdio or TCP.
    MockWorker {
        #[arg(long, env = "QUADPIPE_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "default")]
        name: String,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 10)]
        taxonomy: u64,
        #[arg(long, default_value_t = 64)]
        batch_limit: usize,
        /// Listen on this address instead of stdio; serves connections one at a time.
        #[arg(long)]
        tcp: Option<String>,
    },
    /// Mint candidate samples from raw media.
    Synthesize {
        #[command(flatten)]
        common: Common,
        /// JSON job file.
        #[arg(long)]
        job: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn print_summary(s: &RunSummary) {
    println!("run dir      {}", s.run_dir.display());
    println!("config       {}", &s.config_digest[..16]);
    println!("raw samples  {}", s.raw_count);
    for m in &s.manifests {
        let ratio = m
            .compression_ratio_vs_raw
            .map_or("-".to_string(), |r| format!("{r:.1}"));
        println!(
            "{:<10} {:>9} -> {:>9}  ratio {:>6}  quarantined {}",
            m.stage, m.input_count, m.output_count, ratio, m.quarantined
        );
    }
    if !s.reused.is_empty() {
        let names: Vec<&str> = s.reused.iter().map(|n| n.as_str()).collect();
        println!("reused       {}", names.join(", "));
    }
    println!("worker calls {}", s.worker_calls);
    match (&s.final_snapshot, &s.final_digest) {
        (Some(p), Some(d)) => println!("final        {} ({})", p.display(), &d[..16]),
        _ => println!(
            "halted; continue with `quadpipe resume --out {}`",
            s.run_dir.display()
        ),
    }
}

fn load_input(path: &Path) -> Result<CorpusSnapshot> {
    load_snapshot(path).with_context(|| format!("loading {}", path.display()))
}

fn workers_for(config: &PipelineConfig, common: &Common, dir: Option<&Path>) -> Result<Workers> {
    let cache = match (common.cache.as_deref().map(CacheSetting::parse), dir) {
        (Some(CacheSetting::Off), _) | (None, None) => None,
        (Some(CacheSetting::Dir(d)), _) => Some(d),
        (_, Some(dir)) => Some(
            config
                .cache_dir
                .clone()
                .unwrap_or_else(|| dir.join("cache")),
        ),
        (Some(CacheSetting::RunDir), None) => None,
    };
    let cache = match cache {
        Some(d) => Some(std::sync::Arc::new(quadpipe::gateway::ScoreCache::open(
            &d,
        )?)),
        None => None,
    };
    Ok(Workers::new(
        config.workers.clone(),
        config.gateway_options(),
        cache,
    ))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            common,
            input,
            out,
            preset,
            stop_after,
        } => {
            let mut overrides = common.clone();
            if let Some(p) = preset {
                p.parse::<Preset>()?;
                overrides.overrides.push(format!("preset={p}"));
            }
            let config = overrides.load(true)?;
            let mut settings = common.settings();
            settings.stop_after = stop_after
                .as_deref()
                .map(str::parse::<StageName>)
                .transpose()?;
            let summary = pipeline::run(&config, &input, &out, &settings)?;
            print_summary(&summary);
        }
        Command::Resume { common, out } => {
            let config = match &common.config {
                Some(_) => Some(common.load(true)?),
                None if !common.overrides.is_empty() || common.seed.is_some() => {
                    bail!("--set and --seed need --config on resume")
                }
                None => None,
            };
            let summary = pipeline::resume(&out, config.as_ref(), &common.settings())?;
            print_summary(&summary);
        }
        Command::Tier { common, input, out } => {
            common.install_threads()?;
            let config = common.load(true)?;
            let ocl = config
                .ocl
                .as_ref()
                .context("config needs an [ocl] section")?;
            let workers = workers_for(&config, &common, Some(&out))?;
            let corpus = load_input(&input)?;
            let result = curriculum::run(&corpus, ocl, &workers)?;
            workers.flush_cache()?;
            for t in &result.tiers {
                write_file(
                    &out.join("tiers").join(format!("{}.jsonl", t.name)),
                    &t.to_jsonl(),
                )?;
            }
            let audit: String = result
                .audit
                .iter()
                .map(|a| serde_json::to_string(a).expect("audit serializes") + "\n")
                .collect();
            write_file(&out.join("audit").join("ocl.jsonl"), &audit)?;
            write_file(
                &out.join("schedule.json"),
                &serde_json::to_string_pretty(&result.schedule)?,
            )?;
            let table = result.schedule.volume_table().render();
            write_file(&out.join("volumes.txt"), &table)?;
            for t in &result.tiers {
                println!("{:<6} {:>9}", t.name, t.len());
            }
            println!();
            print!("{table}");
            if !result.quarantined.is_empty() {
                println!("quarantined {}", result.quarantined.len());
            }
        }
        Command::Pairs { common, input, out } => {
            common.install_threads()?;
            let config = common.load(true)?;
            let mpo = config
                .mpo
                .as_ref()
                .context("config needs an [mpo] section")?;
            let workers = workers_for(&config, &common, out.parent())?;
            let corpus = load_input(&input)?;
            let result = preference::run(&corpus, mpo, &workers)?;
            workers.flush_cache()?;
            write_file(&out, &result.to_jsonl())?;
            let mut by_reason = std::collections::BTreeMap::new();
            for (_, r) in &result.skipped {
                *by_reason.entry(r.code()).or_insert(0usize) += 1;
            }
            println!("pairs        {}", result.pairs.len());
            for (code, n) in by_reason {
                println!("skipped      {n} ({code})");
            }
            println!("quarantined  {}", result.quarantined.len());
        }
        Command::Diag { input, json } => {
            let records = diagnostics::load_records(&input)?;
            let report = diagnostics::compute_report(&records)?;
            if json {
                let mut groups = serde_json::Map::new();
                for (g, r) in &report.per_group {
                    groups.insert(g.clone(), serde_json::to_value(r.row())?);
                }
                let v = serde_json::json!({ "all": report.row(), "groups": groups });
                println!("{}", serde_json::to_string_pretty(&v)?);
            } else {
                print!("{}", report.render());
            }
        }
        Command::Report { run, raw, counts } => match (run, raw) {
            (Some(dir), _) => {
                let config = pipeline::stored_config(&dir)?;
                let mut manifests = Vec::new();
                for stage in config.stage_list()? {
                    let path = pipeline::manifest_path(&dir, stage);
                    if path.exists() {
                        manifests.push(StageManifest::read(&path)?);
                    }
                }
                let Some(first) = manifests.first() else {
                    bail!("{} has no completed stages", dir.display())
                };
                let raw = first.raw_count as f64;
                let rows: Vec<(String, f64)> = manifests
                    .iter()
                    .map(|m| (m.stage.clone(), m.output_count as f64))
                    .collect();
                print!(
                    "{}",
                    render_compression(&compression_report(&rows, raw)?, raw)
                );
                let dist = dir.join("reports").join("distribution.txt");
                if dist.exists() {
                    println!();
                    print!("{}", std::fs::read_to_string(dist)?);
                }
            }
            (None, Some(raw)) => {
                let rows: Vec<(String, f64)> = counts
                    .iter()
                    .enumerate()
                    .map(|(i, c)| (format!("stage{}", i + 1), *c))
                    .collect();
                print!(
                    "{}",
                    render_compression(&compression_report(&rows, raw)?, raw)
                );
            }
            (None, None) => bail!("give --run <dir> or --raw with --counts"),
        },
        Command::MockWorker {
            seed,
            name,
            dim,
            taxonomy,
            batch_limit,
            tcp,
        } => {
            let mut worker = MockWorker::new(seed, name);
            worker.dim = dim;
            worker.taxonomy_size = taxonomy;
            worker.batch_limit = batch_limit;
            match tcp {
                None => {
                    let stdin = io::stdin();
                    worker.serve(stdin.lock(), io::stdout().lock())?;
                }
                Some(addr) => {
                    let listener =
                        TcpListener::bind(&addr).with_context(|| format!("binding {addr}"))?;
                    eprintln!("mock worker listening on {}", listener.local_addr()?);
                    for stream in listener.incoming() {
                        let stream = stream?;
                        let reader = BufReader::new(stream.try_clone()?);
                        if let Err(e) = worker.serve(reader, &stream) {
                            eprintln!("connection ended: {e}");
                        }
                    }
                }
            }
        }
        Command::Synthesize { common, job, out } => {
            common.install_threads()?;
            let config = common.load(false)?;
            let text = std::fs::read_to_string(&job)
                .with_context(|| format!("reading {}", job.display()))?;
            let job: SynthesisJob = serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", job.display()))?;
            let workers = workers_for(&config, &common, None)?;
            let result = synthesis::synthesize(&job, &workers)?;
            workers.flush_cache()?;
            let snap = CorpusSnapshot::new("D", result.samples);
            write_file(&out, &snap.to_jsonl())?;
            println!(
                "minted {} samples from {} media items",
                snap.len(),
                job.media.len()
            );
            for (uri, code) in &result.skipped {
                println!("skipped {uri}: {code}");
            }
        }
    }
    io::stdout().flush()?;
    Ok(())
}
