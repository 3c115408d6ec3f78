use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::seq::SliceRandom;
use sifa_core::codec::Split;
use sifa_core::data::stream_rng;
use sifa_core::DomainTag;
use sifa_core::schedule::AblationMode;

use sifa::config::RunConfig;
use sifa::error::{Error, IoContext, Result};
use sifa::plot::sample_panel;
use sifa::run::{ablate, ablation_csv, ablation_medians, generate_data, load_run_state, train_run, RunData};
use sifa::train::evaluate_samples;

const PLOT_PURPOSE: u64 = 14;

#[derive(Parser)]
#[command(name = "sifa", version, about = "Synergistic image and feature adaptation on synthetic cross-domain data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-domain dataset directory.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Output directory (defaults to the config's data_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one configuration.
    Train {
        #[command(flatten)]
        common: Common,
        /// Resume from a checkpoint directory or from the latest checkpoint of a run directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on the target test split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory (defaults to the run's latest).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Grid)]
        format: Format,
    },
    /// Train every ablation mode under every seed and compare.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
        /// Comma-separated modes (default: all four, in ladder order).
        #[arg(long, value_delimiter = ',')]
        modes: Vec<String>,
    },
    /// Write qualitative panels for target test slices.
    Plot {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Number of panels (one file each).
        #[arg(long, default_value_t = 4)]
        count: usize,
        /// Output directory (defaults to `<run>/panels`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Grid,
    Csv,
}

/// Config file plus flag overrides shared by every verb.
#[derive(Args)]
struct Common {
    /// TOML config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    runs: Option<PathBuf>,
    #[arg(long)]
    scenes: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    train_ratio: Option<f64>,
    #[arg(long)]
    ablation: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    no_augment: bool,
    #[arg(long)]
    lambda_adv_s: Option<f64>,
    #[arg(long)]
    lambda_cyc: Option<f64>,
    #[arg(long)]
    lambda_seg: Option<f64>,
    #[arg(long)]
    lambda_adv_p: Option<f64>,
    #[arg(long)]
    lambda_adv_s_tilde: Option<f64>,
    #[arg(long)]
    adversarial_lr: Option<f64>,
    #[arg(long)]
    segmentation_lr: Option<f64>,
    /// `log` or `least_squares`.
    #[arg(long)]
    adv_variant: Option<String>,
    #[arg(long)]
    route_adv_p_to_classifier: bool,
    #[arg(long)]
    split_encoder_update: bool,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($field:ident => $target:ident),* $(,)?) => {
                $(if let Some(v) = &self.$field { c.$target = v.clone().into(); })*
            };
        }
        set!(name => name, data => data_dir, runs => runs_dir, scenes => scenes, size => size,
            train_ratio => train_ratio, ablation => mode, seed => seed, epochs => epochs,
            batch_size => batch_size, checkpoint_every => checkpoint_every, lambda_adv_s => lambda_adv_s,
            lambda_cyc => lambda_cyc, lambda_seg => lambda_seg, lambda_adv_p => lambda_adv_p,
            lambda_adv_s_tilde => lambda_adv_s_tilde, adversarial_lr => adversarial_lr,
            segmentation_lr => segmentation_lr, adv_variant => adv_variant);
        c.augment &= !self.no_augment;
        c.route_adv_p_to_classifier |= self.route_adv_p_to_classifier;
        c.split_encoder_update |= self.split_encoder_update;
        c.train_config()?;
        Ok(c)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { common, out } => {
            let cfg = common.resolve()?;
            let out = out.unwrap_or(cfg.data_dir.clone());
            generate_data(&out, cfg.scenes, cfg.size, cfg.size, cfg.seed, cfg.train_ratio)?;
            let records = sifa::io::read_manifest(&out)?;
            for domain in [DomainTag::Source, DomainTag::Target] {
                let count = |split| records.iter().filter(|r| r.domain == domain && r.split == split).count();
                println!("{domain}: {} train, {} test", count(Split::Train), count(Split::Test));
            }
            Ok(())
        }
        Command::Train { common, resume } => {
            let cfg = common.resolve()?;
            let data = RunData::load(&cfg.data_dir, cfg.classes)?;
            let summary = train_run(&cfg, &data, resume.as_deref(), &mut |m| eprintln!("{m}"))?;
            println!("{}", summary.metrics.to_grid());
            Ok(())
        }
        Command::Eval { common, checkpoint, format } => {
            let cfg = common.resolve()?;
            let data = RunData::load(&cfg.data_dir, cfg.classes)?;
            let state = load_run_state(&cfg, checkpoint.as_deref())?;
            let report = evaluate_samples(&state.nets, &data.target_test.samples)?;
            match format {
                Format::Grid => print!("{}", report.to_grid()),
                Format::Csv => print!("structure,dice,asd\n{}", report.to_csv()),
            }
            Ok(())
        }
        Command::Ablate { common, seeds, modes } => {
            let cfg = common.resolve()?;
            let modes = if modes.is_empty() {
                AblationMode::ALL.to_vec()
            } else {
                modes.iter().map(|m| m.parse().map_err(Error::from)).collect::<Result<Vec<AblationMode>>>()?
            };
            if seeds.is_empty() {
                return Err(sifa_core::Error::config("seeds", "need at least one seed").into());
            }
            let data = RunData::load(&cfg.data_dir, cfg.classes)?;
            let rows = ablate(&cfg, &data, &modes, &seeds, &mut |m| eprintln!("{m}"))?;
            let table = ablation_table(&ablation_medians(&rows));
            print!("{table}");
            std::fs::create_dir_all(&cfg.runs_dir).at(&cfg.runs_dir)?;
            let csv = cfg.runs_dir.join(format!("{}-ablation.csv", cfg.name));
            std::fs::write(&csv, ablation_csv(&rows)).at(&csv)?;
            let txt = cfg.runs_dir.join(format!("{}-ablation.txt", cfg.name));
            std::fs::write(&txt, table).at(&txt)
        }
        Command::Plot { common, checkpoint, count, out } => {
            let cfg = common.resolve()?;
            let data = RunData::load(&cfg.data_dir, cfg.classes)?;
            let state = load_run_state(&cfg, checkpoint.as_deref())?;
            let out = out.unwrap_or_else(|| cfg.run_dir().join("panels"));
            std::fs::create_dir_all(&out).at(&out)?;
            for (i, path) in write_panels(&cfg, &data, &state.nets, count, &out)?.iter().enumerate() {
                println!("panel {i}: {}", path.display());
            }
            Ok(())
        }
    }
}

fn write_panels(cfg: &RunConfig, data: &RunData, nets: &sifa::models::Nets, count: usize, out: &Path) -> Result<Vec<PathBuf>> {
    let tests = &data.target_test.samples;
    let sources = &data.source_train.samples;
    let mut order: Vec<usize> = (0..tests.len()).collect();
    order.shuffle(&mut stream_rng(cfg.seed, 0, PLOT_PURPOSE));
    let mut written = Vec::new();
    for (i, &k) in order.iter().cycle().take(count).enumerate() {
        let t = &tests[k];
        let canvas = sample_panel(nets, &sources[k % sources.len()].image, &t.image, t.mask.as_ref())?;
        let path = out.join(format!("panel-{i:03}.png"));
        canvas.save_png(&path)?;
        written.push(path);
    }
    Ok(written)
}

fn active_losses(mode: AblationMode) -> &'static str {
    match mode {
        AblationMode::NoAdapt => "seg",
        AblationMode::ImageOnly => "seg adv_t cyc adv_s",
        AblationMode::ImagePlusFap => "seg adv_t cyc adv_s adv_p",
        AblationMode::Full => "seg adv_t cyc adv_s adv_p adv_s_tilde",
    }
}

fn ablation_table(medians: &[(AblationMode, f64)]) -> String {
    let mut s = format!("{:<20} {:<42} {:>10}\n", "Method", "Active losses", "Dice [%]");
    for (mode, dice) in medians {
        s.push_str(&format!("{:<20} {:<42} {:>10.1}\n", mode.label(), active_losses(*mode), dice));
    }
    s
}
