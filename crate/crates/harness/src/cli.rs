use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fedvtc::checkpoint::{read_checkpoint, restore};
use fedvtc::datapart::{dirichlet_partition, PartitionSpec};
use fedvtc::math::{PrototypeMap, StdVec};
use fedvtc::modelzoo::build_vtc_decoder;
use fedvtc::orchestrator::{generate_synthetic, write_samples, RunGlobals};
use rand::SeedableRng;

use crate::config::{ExperimentFile, Overrides, DATA_ROOT_ENV};
use crate::{report, runner};

#[derive(Debug, Parser)]
#[command(
    name = "fedvtc",
    version,
    about = "Federated learning with variational transposed-convolution decoders"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Dataset root (contains e.g. `mnist/train-images-idx3-ubyte.gz`).
    #[arg(long, global = true, env = DATA_ROOT_ENV)]
    pub data_root: Option<PathBuf>,
    /// Cap on training samples (seeded subsample).
    #[arg(long, global = true)]
    pub train_cap: Option<usize>,
    /// Cap on test samples (seeded subsample).
    #[arg(long, global = true)]
    pub test_cap: Option<usize>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build or inspect a client partition.
    #[command(subcommand)]
    Partition(PartitionCmd),
    /// Run one configuration.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Which `[[variant]]` to run (default: the `[run]` table).
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every variant over the seed set and summarize.
    Suite {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Seeds per variant, counted up from the base seed.
        #[arg(long)]
        repeats: Option<usize>,
        /// Concurrent runs.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Summaries and plots from stored runs.
    Report { dir: PathBuf },
    /// Decode fresh samples from a finished run and write them as PNGs.
    DumpSynthetic {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Subcommand)]
pub enum PartitionCmd {
    /// Write the partition manifest of a configuration.
    Build {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print shard sizes (and class histograms when `--config` names the dataset).
    Inspect {
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn load_file(path: &Path, g: &GlobalArgs, seed: Option<u64>) -> Result<ExperimentFile> {
    let mut f = ExperimentFile::load(path)?;
    f.apply(&Overrides {
        data_root: g.data_root.clone(),
        train_cap: g.train_cap,
        test_cap: g.test_cap,
        seed,
    });
    Ok(f)
}

fn histogram_table(spec: &PartitionSpec, labels: Option<(&[usize], usize)>) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "alpha {} seed {} clients {}", spec.alpha, spec.seed, spec.clients());
    let hist = labels.map(|(l, c)| spec.class_histogram(l, c));
    for (k, shard) in spec.shards.iter().enumerate() {
        let _ = write!(s, "client {k}: {} samples", shard.len());
        if let Some(h) = &hist {
            let cells: Vec<String> = h[k].iter().map(usize::to_string).collect();
            let _ = write!(s, " [{}]", cells.join(" "));
        }
        s.push('\n');
    }
    s
}

pub fn execute(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::Partition(PartitionCmd::Build { config, seed, out }) => {
            let f = load_file(&config, g, seed)?;
            let bundle = f.load_bundle()?;
            let cfg = f.base_config()?;
            let spec = dirichlet_partition(&bundle.train_labels, cfg.clients, f.partition.alpha, cfg.seed)?;
            fs::write(&out, spec.to_manifest())?;
            print!(
                "{}",
                histogram_table(&spec, Some((&bundle.train_labels, bundle.profile.classes)))
            );
        }
        Command::Partition(PartitionCmd::Inspect { manifest, config }) => {
            let spec = PartitionSpec::from_manifest(&fs::read_to_string(&manifest)?)?;
            let bundle = config.map(|c| load_file(&c, g, None)?.load_bundle()).transpose()?;
            if let Some(b) = &bundle {
                spec.validate(b.train_labels.len())?;
            }
            let labels = bundle.as_ref().map(|b| (b.train_labels.as_slice(), b.profile.classes));
            print!("{}", histogram_table(&spec, labels));
        }
        Command::Run {
            config,
            variant,
            seed,
            out,
        } => {
            let f = load_file(&config, g, seed)?;
            let variants = f.variants()?;
            let v = match &variant {
                Some(name) => variants
                    .into_iter()
                    .find(|v| &v.name == name)
                    .ok_or_else(|| anyhow!("no variant named {name:?}"))?,
                None if f.variants.is_empty() => variants.into_iter().next().expect("one variant"),
                None => crate::config::Variant {
                    name: f.name.clone(),
                    config: f.base_config()?,
                },
            };
            let bundle = f.load_bundle()?;
            let art = runner::execute_run(&f, &v, &bundle, &out)?;
            println!(
                "{}: final mean accuracy {:.2}% ({} evaluation points) -> {}",
                v.name,
                art.final_accuracy(),
                art.metrics.len(),
                out.display()
            );
        }
        Command::Suite {
            config,
            out,
            repeats,
            workers,
        } => {
            let mut f = load_file(&config, g, None)?;
            if repeats.is_some() {
                f.repeats = repeats;
                f.seeds = None;
            }
            if workers.is_some() {
                f.workers = workers;
            }
            let bundle = f.load_bundle()?;
            let outcomes = runner::run_suite(&f, &bundle, &out)?;
            let failed = outcomes.iter().filter(|o| o.error.is_some()).count();
            if failed == outcomes.len() {
                bail!("all {failed} runs failed; see {}", out.join("failures.tsv").display());
            }
            print!("{}", fs::read_to_string(out.join("summary.md"))?);
            if failed > 0 {
                eprintln!("{failed} of {} runs failed; see failures.tsv", outcomes.len());
            }
        }
        Command::Report { dir } => {
            let files = report::write_report(&dir)?;
            print!("{}", fs::read_to_string(&files.summary_md)?);
        }
        Command::DumpSynthetic { run, out, count, seed } => {
            let f = ExperimentFile::load(&run.join("experiment.toml"))?;
            let profile = f.profile()?;
            let globals: RunGlobals =
                serde_json::from_str(&fs::read_to_string(run.join("globals.json"))?).context("reading globals.json")?;
            let p = globals.sigma.len();
            let mut decoder = build_vtc_decoder::<f32>(&profile, p, 0)?;
            let (_, arrays) = read_checkpoint(&run.join("checkpoints/decoder.tar"))?;
            restore(&mut decoder.net, "decoder", &arrays)?;
            let prototypes: PrototypeMap<f32> = globals
                .prototypes
                .iter()
                .map(|(&y, c)| (y, c.iter().map(|&v| v as f32).collect()))
                .collect();
            let sigma = StdVec::floored(globals.sigma.iter().map(|&v| v as f32).collect());
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let synth = generate_synthetic(&decoder, &prototypes, &sigma, count, &mut rng)?;
            write_samples(&synth.images, &out)?;
            println!("wrote {count} samples and grid.png to {}", out.display());
        }
    }
    Ok(())
}
