//! Run orchestration shared by the command-line verbs: dataset generation,
//! training with logs and checkpoints, evaluation and the ablation ladder.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use sifa_core::codec::Split;
use sifa_core::data::{generate_synthetic, split_dataset, Dataset, SyntheticSceneSpec};
use sifa_core::losses::LossReport;
use sifa_core::metrics::MetricReport;
use sifa_core::schedule::AblationMode;
use sifa_core::{DomainTag, Sample};

use crate::checkpoint::{latest_checkpoint, load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::error::{Error, IoContext, Result};
use crate::io::{load_dataset, write_datasets};
use crate::train::{evaluate_samples, make_batch, TrainData, TrainState};

pub const LOSSES_FILE: &str = "losses.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const REPORT_FILE: &str = "report.txt";
pub const CONFIG_FILE: &str = "config.toml";

/// Generates paired synthetic domains, splits each by scene and writes
/// them as a dataset directory.
pub fn generate_data(out: &Path, scenes: usize, height: usize, width: usize, seed: u64, train_ratio: f64) -> Result<()> {
    let (src, tgt) = generate_synthetic(&SyntheticSceneSpec::new(height, width, seed), scenes)?;
    let (s_tr, s_te) = split_dataset(&src, train_ratio, seed)?;
    let (t_tr, t_te) = split_dataset(&tgt, train_ratio, seed)?;
    fs::create_dir_all(out).at(out)?;
    write_datasets(out, &[&s_tr, &s_te, &t_tr, &t_te])?;
    Ok(())
}

/// Everything a run reads: labeled source training slices, target training
/// slices (masks ignored) and labeled target test slices.
#[derive(Debug, Clone)]
pub struct RunData {
    pub source_train: Dataset,
    pub target_train: Dataset,
    pub target_test: Dataset,
}

impl RunData {
    pub fn load(dir: &Path, classes: usize) -> Result<Self> {
        Ok(Self {
            source_train: load_dataset(dir, DomainTag::Source, Split::Train, classes)?,
            target_train: load_dataset(dir, DomainTag::Target, Split::Train, classes)?,
            target_test: load_dataset(dir, DomainTag::Target, Split::Test, classes)?,
        })
    }

    /// Generates the data in memory, split as [`generate_data`] would.
    pub fn synthetic(scenes: usize, size: usize, seed: u64, train_ratio: f64) -> Result<Self> {
        let (src, tgt) = generate_synthetic(&SyntheticSceneSpec::new(size, size, seed), scenes)?;
        let (source_train, _) = split_dataset(&src, train_ratio, seed)?;
        let (target_train, target_test) = split_dataset(&tgt, train_ratio, seed)?;
        Ok(Self { source_train, target_train, target_test })
    }

    fn check(&self) -> Result<()> {
        for s in self.source_train.samples.iter().chain(&self.target_train.samples).chain(&self.target_test.samples) {
            s.image.check_divisible_by_8()?;
        }
        if self.source_train.samples.iter().any(|s| s.mask.is_none()) {
            return Err(sifa_core::Error::invalid("source training slices need masks").into());
        }
        if self.target_test.samples.iter().any(|s| s.mask.is_none()) {
            return Err(sifa_core::Error::invalid("target test slices need masks").into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub steps: u64,
    pub last: Option<LossReport>,
    pub metrics: MetricReport,
}

/// Trains one configuration to completion.
///
/// Writes `config.toml`, appends to `losses.csv`, checkpoints at step 0,
/// every `checkpoint_every` steps and at the last step, and finally writes
/// `metrics.csv` and `report.txt` for the target test split. With `resume`
/// a checkpoint (or the latest one below a run directory) is restored and
/// the loss log cut back to its step.
pub fn train_run(cfg: &RunConfig, data: &RunData, resume: Option<&Path>, progress: &mut dyn FnMut(&str)) -> Result<RunSummary> {
    let tc = cfg.train_config()?;
    data.check()?;
    let run_dir = cfg.run_dir();
    let resume_from = match resume {
        Some(p) if p.join(crate::checkpoint::MANIFEST_FILE).exists() => Some(p.to_path_buf()),
        Some(p) => Some(latest_checkpoint(p)?.ok_or_else(|| Error::checkpoint(p, "no checkpoint to resume from"))?),
        None => None,
    };
    if resume_from.is_none() && latest_checkpoint(&run_dir)?.is_some() {
        return Err(Error::checkpoint(&run_dir, "run already has checkpoints; resume it or pick another name"));
    }
    fs::create_dir_all(&run_dir).at(&run_dir)?;
    fs::write(run_dir.join(CONFIG_FILE), cfg.to_toml()).at(run_dir.join(CONFIG_FILE))?;

    let td = TrainData::new(&data.source_train.samples, &data.target_train.samples)?;
    let spe = td.steps_per_epoch(tc.batch_size);
    let total = (tc.epochs * spe) as u64;
    let losses = run_dir.join(LOSSES_FILE);

    let mut state = match resume_from {
        Some(dir) => {
            let st = load_checkpoint(&dir, tc)?;
            truncate_log(&losses, st.step)?;
            progress(&format!("resumed from {} at step {}", dir.display(), st.step));
            st
        }
        None => {
            fs::write(&losses, format!("{}\n", LossReport::CSV_HEADER)).at(&losses)?;
            let st = TrainState::new(tc)?;
            save_checkpoint(&run_dir, &st)?;
            st
        }
    };

    let mut log = OpenOptions::new().append(true).open(&losses).at(&losses)?;
    let mut last = None;
    while state.step < total {
        let batch = make_batch(&td, &tc, state.step);
        let report = state.train_step(&batch, spe)?.report;
        writeln!(log, "{}", report.csv_line()).at(&losses)?;
        let step = state.step;
        if step % cfg.checkpoint_every == 0 || step == total {
            log.flush().at(&losses)?;
            save_checkpoint(&run_dir, &state)?;
        }
        if step % spe as u64 == 0 {
            progress(&format!("epoch {} step {step} total loss {:.4}", step / spe as u64, report.total));
        }
        last = Some(report);
    }
    log.flush().at(&losses)?;

    let metrics = evaluate_samples(&state.nets, &data.target_test.samples)?;
    write_metrics(&run_dir, &metrics)?;
    Ok(RunSummary { run_dir, steps: state.step, last, metrics })
}

pub fn write_metrics(dir: &Path, metrics: &MetricReport) -> Result<()> {
    fs::write(dir.join(METRICS_FILE), format!("structure,dice,asd\n{}", metrics.to_csv())).at(dir.join(METRICS_FILE))?;
    fs::write(dir.join(REPORT_FILE), metrics.to_grid()).at(dir.join(REPORT_FILE))
}

/// Keeps the header and the records of steps `<= step`.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut out = format!("{}\n", LossReport::CSV_HEADER);
    for (i, line) in text.lines().enumerate().skip(1) {
        let rec = LossReport::parse_csv_line(line).map_err(|e| Error::parse(path, format!("line {}: {e}", i + 1)))?;
        if rec.step <= step {
            out.push_str(line);
            out.push('\n');
        }
    }
    fs::write(path, out).at(path)
}

pub fn read_losses(path: &Path) -> Result<Vec<LossReport>> {
    let text = fs::read_to_string(path).at(path)?;
    text.lines()
        .enumerate()
        .skip(1)
        .map(|(i, l)| LossReport::parse_csv_line(l).map_err(|e| Error::parse(path, format!("line {}: {e}", i + 1))))
        .collect()
}

/// Restores the run's latest (or a given) checkpoint and scores `samples`.
pub fn evaluate_run(cfg: &RunConfig, checkpoint: Option<&Path>, samples: &[Sample]) -> Result<MetricReport> {
    let state = load_run_state(cfg, checkpoint)?;
    Ok(evaluate_samples(&state.nets, samples)?)
}

pub fn load_run_state(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<TrainState> {
    let tc = cfg.train_config()?;
    let dir = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => latest_checkpoint(&cfg.run_dir())?
            .ok_or_else(|| Error::checkpoint(cfg.run_dir(), "no checkpoints in run directory"))?,
    };
    load_checkpoint(&dir, tc)
}

/// One cell of the ablation ladder.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub mode: AblationMode,
    pub seed: u64,
    pub dice: f64,
    pub seconds: f64,
}

/// Median of a non-empty list.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
}

/// Trains every mode under every seed. Runs are named
/// `<name>-<mode>-s<seed>` below the configured runs directory.
pub fn ablate(
    base: &RunConfig,
    data: &RunData,
    modes: &[AblationMode],
    seeds: &[u64],
    progress: &mut dyn FnMut(&str),
) -> Result<Vec<AblationRow>> {
    // validate every configuration before training any of them
    let configs: Vec<(AblationMode, u64, RunConfig)> = modes
        .iter()
        .flat_map(|&m| seeds.iter().map(move |&s| (m, s)))
        .map(|(mode, seed)| {
            let cfg = RunConfig { name: format!("{}-{}-s{seed}", base.name, mode.as_str()), mode: mode.as_str().into(), seed, ..base.clone() };
            cfg.train_config().map(|_| (mode, seed, cfg))
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (mode, seed, cfg) in configs {
        let t0 = std::time::Instant::now();
        let summary = train_run(&cfg, data, None, &mut |_| {})?;
        let row = AblationRow { mode, seed, dice: summary.metrics.dice_average, seconds: t0.elapsed().as_secs_f64() };
        progress(&format!("{} seed {seed}: target dice {:.1} in {:.0}s", mode.as_str(), row.dice, row.seconds));
        rows.push(row);
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("mode,seed,dice,seconds\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{:.1}\n", r.mode.as_str(), r.seed, r.dice, r.seconds));
    }
    s
}

/// Per-mode medians in ladder order.
pub fn ablation_medians(rows: &[AblationRow]) -> Vec<(AblationMode, f64)> {
    let mut modes: Vec<AblationMode> = Vec::new();
    for r in rows {
        if !modes.contains(&r.mode) {
            modes.push(r.mode);
        }
    }
    modes
        .into_iter()
        .map(|m| (m, median(&rows.iter().filter(|r| r.mode == m).map(|r| r.dice).collect::<Vec<_>>())))
        .collect()
}
