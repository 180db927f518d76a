//! The `generate`, `train`, `eval` and `match` commands.

use std::fs;
use std::io::Write;
use std::path::PathBuf;

use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::{ConfigError, RunConfig};
use crate::eval::{
    accuracy_at_fpr, auc, best_confusion, correlation_baseline, emit_reports, keypoint_match,
    select_keypoints, sweep, threshold_grid, EvalError, ScoredPair, DEFAULT_GRID,
};
use crate::model::{ArchitectureSpec, ModelError};
use crate::patchpool::{generate_pool, read_pool, write_pool, PatchPool, PoolError};
use crate::train::{metrics_csv, score_pairs, train, TrainError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("invalid patch size: {0}")]
    PatchSize(ModelError),
    #[error("checkpoint was trained at patch size {checkpoint}, but {requested} was requested")]
    PatchSizeMismatch { checkpoint: usize, requested: usize },
    #[error("pool patches are {pool}px, smaller than the requested {requested}px")]
    PoolTooSmall { pool: usize, requested: usize },
    #[error("pool: {0}")]
    Pool(#[from] PoolError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("training: {0}")]
    Train(#[from] TrainError),
    #[error("evaluation: {0}")]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Generate,
    Train,
    Eval,
    Match,
}

/// Runs `command`, writing progress lines to `log`. Returns the files
/// written.
pub fn run(
    command: Command,
    cfg: &RunConfig,
    log: &mut dyn Write,
) -> Result<Vec<PathBuf>, CliError> {
    let spec = ArchitectureSpec::paper(cfg.patch_size);
    spec.validate_reference().map_err(CliError::PatchSize)?;
    match command {
        Command::Generate => generate(cfg, log),
        Command::Train => train_cmd(cfg, spec, log),
        Command::Eval => eval_cmd(cfg, log),
        Command::Match => match_cmd(cfg, log),
    }
}

fn generate(cfg: &RunConfig, log: &mut dyn Write) -> Result<Vec<PathBuf>, CliError> {
    let pool = generate_pool(&cfg.generator())?;
    write_pool(&pool, &cfg.pool)?;
    let [tr, va, te] = pool.counts();
    let [s0, s1, s2] = pool.shares();
    writeln!(log, "train {tr} ({:.1}%)", 100.0 * s0)?;
    writeln!(log, "val {va} ({:.1}%)", 100.0 * s1)?;
    writeln!(log, "test {te} ({:.1}%)", 100.0 * s2)?;
    writeln!(log, "wrote {}", cfg.pool.display())?;
    Ok(vec![cfg.pool.clone()])
}

fn load_pool(cfg: &RunConfig) -> Result<PatchPool, CliError> {
    let pool = read_pool(&cfg.pool)?;
    if pool.patch_size < cfg.patch_size {
        return Err(CliError::PoolTooSmall {
            pool: pool.patch_size,
            requested: cfg.patch_size,
        });
    }
    Ok(pool)
}

fn train_cmd(
    cfg: &RunConfig,
    spec: ArchitectureSpec,
    log: &mut dyn Write,
) -> Result<Vec<PathBuf>, CliError> {
    let pool = load_pool(cfg)?;
    let mut io_err = None;
    let outcome = train(&pool, spec, &cfg.training(), |m| {
        let line = writeln!(
            log,
            "epoch {} loss {:.4} val_acc {:.4} ({} ms)",
            m.epoch, m.train_loss, m.val_accuracy, m.wall_ms
        );
        if let Err(e) = line {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    let last = cfg.checkpoint_path();
    let best = cfg.with_suffix(".best.ckpt");
    let metrics = cfg.with_suffix(".metrics.csv");
    outcome.last.save(&last)?;
    outcome.best.save(&best)?;
    fs::write(&metrics, metrics_csv(&outcome.metrics))?;
    writeln!(log, "best epoch {}", outcome.best_epoch)?;
    Ok(vec![last, best, metrics])
}

fn load_checkpoint(cfg: &RunConfig) -> Result<Checkpoint, CliError> {
    let ckpt = Checkpoint::load(cfg.checkpoint_path())?;
    if ckpt.model.spec.patch_size != cfg.patch_size {
        return Err(CliError::PatchSizeMismatch {
            checkpoint: ckpt.model.spec.patch_size,
            requested: cfg.patch_size,
        });
    }
    Ok(ckpt)
}

fn eval_cmd(cfg: &RunConfig, log: &mut dyn Write) -> Result<Vec<PathBuf>, CliError> {
    let ckpt = load_checkpoint(cfg)?;
    let pool = load_pool(cfg)?.cropped(cfg.patch_size)?;
    let scores = score_pairs(&ckpt.model, &pool.test, cfg.eval_chunk)?;
    let scored: Vec<ScoredPair> = scores
        .iter()
        .zip(&pool.test)
        .map(|(&s, p)| ScoredPair::new(s, p.label.is_similar()))
        .collect();
    let grid = threshold_grid(DEFAULT_GRID);
    let rows = sweep(&scored, &grid)?;
    let best = best_confusion(&rows)?;
    let (acc_cap, thr_cap) = accuracy_at_fpr(&rows, cfg.fpr_cap)?;
    let model_auc = auc(&scored)?;
    let baseline = correlation_baseline(&pool.test);
    let base_best = best_confusion(&sweep(&baseline, &grid)?)?;
    let base_auc = auc(&baseline)?;

    let mut written = emit_reports(Some(&rows), None, &cfg.out)?;
    let summary = cfg.with_suffix(".summary.csv");
    let mut body = String::from(
        "patch_size,threshold,accuracy,tp_pct,tn_pct,fp_pct,fn_pct,fpr_cap,accuracy_at_cap,threshold_at_cap,auc,baseline_accuracy,baseline_auc\n",
    );
    body.push_str(&format!(
        "{},{:.6},{:.6},{:.4},{:.4},{:.4},{:.4},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
        cfg.patch_size,
        best.threshold,
        best.accuracy,
        best.tp_pct,
        best.tn_pct,
        best.fp_pct,
        best.fn_pct,
        cfg.fpr_cap,
        acc_cap,
        thr_cap,
        model_auc,
        base_best.accuracy,
        base_auc
    ));
    fs::write(&summary, body)?;
    written.push(summary);
    writeln!(
        log,
        "patch {}: best accuracy {:.4} at t={:.3} (TP {:.1}%, TN {:.1}%), accuracy {:.4} at FPR <= {}, AUC {:.4}",
        cfg.patch_size, best.accuracy, best.threshold, best.tp_pct, best.tn_pct, acc_cap, cfg.fpr_cap, model_auc
    )?;
    writeln!(
        log,
        "correlation baseline: best accuracy {:.4}, AUC {:.4}",
        base_best.accuracy, base_auc
    )?;
    Ok(written)
}

fn match_cmd(cfg: &RunConfig, log: &mut dyn Write) -> Result<Vec<PathBuf>, CliError> {
    let ckpt = load_checkpoint(cfg)?;
    let pool = load_pool(cfg)?.cropped(cfg.patch_size)?;
    let keypoints = select_keypoints(&pool.test, cfg.keypoints)?;
    let report = keypoint_match(
        &ckpt.model,
        &keypoints,
        &keypoints,
        cfg.match_threshold,
        cfg.eval_chunk,
    )?;
    let written = emit_reports(None, Some(&report), &cfg.out)?;
    writeln!(
        log,
        "{} key-points: top-1 {:.4}, top-3 {:.4}, no valid match {:.4} at t={}",
        keypoints.len(),
        report.top1,
        report.top3,
        report.no_valid_match,
        report.threshold
    )?;
    Ok(written)
}
