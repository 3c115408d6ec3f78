use std::fs;
use std::path::Path;

use sifa::checkpoint::{checkpoint_dir, load_checkpoint};
use sifa::config::RunConfig;
use sifa::run::{read_losses, train_run, RunData, LOSSES_FILE};
use sifa::train::{make_batch, TrainData};
use sifa_core::losses::LossReport;

const STEPS: u64 = 100;

fn config(runs: &Path) -> (RunConfig, RunData) {
    let data = RunData::synthetic(50, 32, 4, 0.8).unwrap();
    let spe = TrainData::new(&data.source_train.samples, &data.target_train.samples).unwrap().steps_per_epoch(4);
    let cfg = RunConfig {
        name: "det".into(),
        runs_dir: runs.to_path_buf(),
        size: 32,
        batch_size: 4,
        epochs: (STEPS as usize).div_ceil(spe),
        checkpoint_every: 50,
        seed: 11,
        ..Default::default()
    };
    (cfg, data)
}

#[test]
fn seeded_runs_write_identical_loss_logs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (cfg_a, data) = config(a.path());
    let (cfg_b, _) = config(b.path());
    let sa = train_run(&cfg_a, &data, None, &mut |_| {}).unwrap();
    let sb = train_run(&cfg_b, &data, None, &mut |_| {}).unwrap();
    assert!(sa.steps >= STEPS);
    let log_a = fs::read(sa.run_dir.join(LOSSES_FILE)).unwrap();
    let log_b = fs::read(sb.run_dir.join(LOSSES_FILE)).unwrap();
    assert_eq!(log_a, log_b);
    assert_eq!(read_losses(&sa.run_dir.join(LOSSES_FILE)).unwrap().len() as u64, sa.steps);
    // weights end up identical too
    assert_eq!(sa.metrics, sb.metrics);
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (cfg, data) = config(a.path());
    let full = train_run(&cfg, &data, None, &mut |_| {}).unwrap();
    let reference = read_losses(&full.run_dir.join(LOSSES_FILE)).unwrap();

    // one step straight from the mid-run checkpoint
    let tc = cfg.train_config().unwrap();
    let mut st = load_checkpoint(&checkpoint_dir(&full.run_dir, 50), tc).unwrap();
    let td = TrainData::new(&data.source_train.samples, &data.target_train.samples).unwrap();
    let spe = td.steps_per_epoch(tc.batch_size);
    let next = st.train_step(&make_batch(&td, &tc, st.step), spe).unwrap().report;
    let want = &reference[50];
    assert_eq!(next.step, want.step);
    assert!((next.total - want.total).abs() <= 1e-6, "{} vs {}", next.total, want.total);

    // the resumed run continues the same log
    let (cfg_b, _) = config(b.path());
    let run_b = cfg_b.run_dir();
    fs::create_dir_all(&run_b).unwrap();
    fs::copy(full.run_dir.join(LOSSES_FILE), run_b.join(LOSSES_FILE)).unwrap();
    let resumed = train_run(&cfg_b, &data, Some(&checkpoint_dir(&full.run_dir, 50)), &mut |_| {}).unwrap();
    let got = read_losses(&resumed.run_dir.join(LOSSES_FILE)).unwrap();
    assert_eq!(got.len(), reference.len());
    for (g, w) in got.iter().zip(&reference).skip(50) {
        assert_eq!(g.step, w.step);
        assert!((g.total - w.total).abs() <= 1e-6, "step {}: {} vs {}", g.step, g.total, w.total);
        for (x, y) in parts(g).iter().zip(parts(w)) {
            assert!((x - y).abs() <= 1e-6, "step {}", g.step);
        }
    }
    assert_eq!(resumed.metrics, full.metrics);
}

fn parts(r: &LossReport) -> [f64; 6] {
    let p = &r.parts;
    [p.adv_t, p.adv_s, p.cyc, p.seg, p.adv_p, p.adv_s_tilde]
}

#[test]
fn rerun_without_resume_is_refused() {
    let a = tempfile::tempdir().unwrap();
    let (mut cfg, data) = config(a.path());
    cfg.epochs = 1;
    train_run(&cfg, &data, None, &mut |_| {}).unwrap();
    let err = train_run(&cfg, &data, None, &mut |_| {}).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}
