//! Threshold sweeps, confusion rates, ranking metrics and the key-point
//! matching experiment.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::model::{similarity_score, Model, ModelError, Stream};
use crate::patchpool::PatchPair;
use crate::tensor::{Tensor, TensorError};
use crate::train::{batch_tensors, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need both classes: {positives} positives, {negatives} negatives")]
    SingleClass { positives: usize, negatives: usize },
    #[error("score {0} is not a finite value in [0, 1]")]
    BadScore(f64),
    #[error("no sweep row has FPR <= {0}")]
    CapUnreachable(f64),
    #[error("empty sweep")]
    EmptySweep,
    #[error("{sar} SAR patches but {opt} optical patches")]
    LengthMismatch { sar: usize, opt: usize },
    #[error("need at least {min} key-points, got {got}")]
    TooFewKeypoints { min: usize, got: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredPair {
    /// Similar-class probability.
    pub score: f64,
    pub positive: bool,
}

impl ScoredPair {
    pub fn new(score: f64, positive: bool) -> Self {
        Self { score, positive }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub threshold: f64,
    pub tp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub fp: usize,
    pub tpr: f64,
    pub fpr: f64,
    pub tnr: f64,
    pub fnr: f64,
    pub accuracy: f64,
}

/// `n` evenly spaced thresholds covering `[0, 1]`.
pub fn threshold_grid(n: usize) -> Vec<f64> {
    assert!(n >= 2, "grid needs both end points");
    (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
}

pub const DEFAULT_GRID: usize = 1001;

fn class_counts(pairs: &[ScoredPair]) -> Result<(usize, usize), EvalError> {
    if let Some(p) = pairs
        .iter()
        .find(|p| !(p.score.is_finite() && (0.0..=1.0).contains(&p.score)))
    {
        return Err(EvalError::BadScore(p.score));
    }
    let positives = pairs.iter().filter(|p| p.positive).count();
    let negatives = pairs.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(EvalError::SingleClass {
            positives,
            negatives,
        });
    }
    Ok((positives, negatives))
}

/// Confusion counts and rates per threshold, predicting "similar" iff
/// `score >= threshold`. Rows follow the threshold order given.
pub fn sweep(pairs: &[ScoredPair], thresholds: &[f64]) -> Result<Vec<SweepRow>, EvalError> {
    let (np, nn) = class_counts(pairs)?;
    let mut pos: Vec<f64> = pairs
        .iter()
        .filter(|p| p.positive)
        .map(|p| p.score)
        .collect();
    let mut neg: Vec<f64> = pairs
        .iter()
        .filter(|p| !p.positive)
        .map(|p| p.score)
        .collect();
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);
    // count of scores >= t in an ascending list
    let at_least = |v: &[f64], t: f64| v.len() - v.partition_point(|&s| s < t);
    Ok(thresholds
        .iter()
        .map(|&t| {
            let tp = at_least(&pos, t);
            let fp = at_least(&neg, t);
            let (fn_, tn) = (np - tp, nn - fp);
            SweepRow {
                threshold: t,
                tp,
                fn_,
                tn,
                fp,
                tpr: tp as f64 / np as f64,
                fnr: fn_ as f64 / np as f64,
                tnr: tn as f64 / nn as f64,
                fpr: fp as f64 / nn as f64,
                accuracy: (tp + tn) as f64 / (np + nn) as f64,
            }
        })
        .collect())
}

/// Highest-accuracy row, preferring the highest threshold among ties.
fn best_row<'a>(rows: impl Iterator<Item = &'a SweepRow>) -> Option<&'a SweepRow> {
    rows.fold(None, |best: Option<&SweepRow>, r| match best {
        Some(b)
            if b.accuracy > r.accuracy
                || (b.accuracy == r.accuracy && b.threshold >= r.threshold) =>
        {
            Some(b)
        }
        _ => Some(r),
    })
}

/// Best accuracy among rows with `FPR <= fpr_cap`, and its threshold.
pub fn accuracy_at_fpr(rows: &[SweepRow], fpr_cap: f64) -> Result<(f64, f64), EvalError> {
    best_row(rows.iter().filter(|r| r.fpr <= fpr_cap))
        .map(|r| (r.accuracy, r.threshold))
        .ok_or(EvalError::CapUnreachable(fpr_cap))
}

/// Class-conditional rates (percent) at the accuracy-maximising threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Confusion {
    pub tp_pct: f64,
    pub tn_pct: f64,
    pub fp_pct: f64,
    pub fn_pct: f64,
    pub threshold: f64,
    pub accuracy: f64,
}

pub fn best_confusion(rows: &[SweepRow]) -> Result<Confusion, EvalError> {
    let r = best_row(rows.iter()).ok_or(EvalError::EmptySweep)?;
    Ok(Confusion {
        tp_pct: 100.0 * r.tpr,
        tn_pct: 100.0 * r.tnr,
        fp_pct: 100.0 * r.fpr,
        fn_pct: 100.0 * r.fnr,
        threshold: r.threshold,
        accuracy: r.accuracy,
    })
}

/// Probability that a random positive outscores a random negative (ties
/// count one half); the area under the ROC curve.
pub fn auc(pairs: &[ScoredPair]) -> Result<f64, EvalError> {
    let (np, nn) = class_counts(pairs)?;
    let mut sorted: Vec<&ScoredPair> = pairs.iter().collect();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score));
    // average ranks over tie groups, Mann-Whitney U
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].score == sorted[i].score {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        rank_sum += avg_rank * sorted[i..j].iter().filter(|p| p.positive).count() as f64;
        i = j;
    }
    let u = rank_sum - (np * (np + 1)) as f64 / 2.0;
    Ok(u / (np as f64 * nn as f64))
}

/// Pixelwise Pearson correlation of the SAR and optical patches, mapped to
/// `[0, 1]` as `(r + 1) / 2`; a constant patch scores 0.5.
pub fn correlation_score(sar: &[f32], opt: &[f32]) -> f64 {
    let n = sar.len() as f64;
    let (ms, mo) = (
        sar.iter().map(|&v| v as f64).sum::<f64>() / n,
        opt.iter().map(|&v| v as f64).sum::<f64>() / n,
    );
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in sar.iter().zip(opt) {
        let (x, y) = (a as f64 - ms, b as f64 - mo);
        sxy += x * y;
        sxx += x * x;
        syy += y * y;
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.5;
    }
    ((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0) + 1.0) / 2.0
}

pub fn correlation_baseline(pairs: &[PatchPair]) -> Vec<ScoredPair> {
    pairs
        .iter()
        .map(|p| ScoredPair::new(correlation_score(&p.sar, &p.opt), p.label.is_similar()))
        .collect()
}

/// Result of scoring every SAR key-point patch against every optical one.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchReport {
    /// `matrix[i][j]`: SAR patch `i` against optical patch `j`.
    pub matrix: Vec<Vec<f64>>,
    pub top1: f64,
    pub top3: f64,
    pub threshold: f64,
    /// Share of rows with no score reaching the threshold.
    pub no_valid_match: f64,
    /// Off-diagonal scores, descending.
    pub non_match_sorted: Vec<f64>,
}

/// Share of rows whose diagonal entry ranks within the `k` largest of the
/// row, counting every off-diagonal score `>=` the diagonal as ahead of it.
pub fn top_k_accuracy(matrix: &[Vec<f64>], k: usize) -> f64 {
    let hits = matrix
        .iter()
        .enumerate()
        .filter(|(i, row)| {
            let ahead = row
                .iter()
                .enumerate()
                .filter(|&(j, &s)| j != *i && s >= row[*i])
                .count();
            ahead < k
        })
        .count();
    hits as f64 / matrix.len().max(1) as f64
}

/// Builds a report from a precomputed `N × N` score matrix.
pub fn match_report(matrix: Vec<Vec<f64>>, threshold: f64) -> Result<MatchReport, EvalError> {
    let n = matrix.len();
    if n < 2 {
        return Err(EvalError::TooFewKeypoints { min: 2, got: n });
    }
    for row in &matrix {
        if row.len() != n {
            return Err(EvalError::LengthMismatch {
                sar: n,
                opt: row.len(),
            });
        }
        if let Some(&s) = row
            .iter()
            .find(|s| !(s.is_finite() && (0.0..=1.0).contains(*s)))
        {
            return Err(EvalError::BadScore(s));
        }
    }
    let no_valid = matrix
        .iter()
        .filter(|row| row.iter().all(|&s| s < threshold))
        .count();
    let mut non_match: Vec<f64> = matrix
        .iter()
        .enumerate()
        .flat_map(|(i, row)| {
            row.iter()
                .enumerate()
                .filter(move |&(j, _)| j != i)
                .map(|(_, &s)| s)
        })
        .collect();
    non_match.sort_by(|a, b| b.total_cmp(a));
    Ok(MatchReport {
        top1: top_k_accuracy(&matrix, 1),
        top3: top_k_accuracy(&matrix, 3),
        threshold,
        no_valid_match: no_valid as f64 / n as f64,
        non_match_sorted: non_match,
        matrix,
    })
}

/// Scores all `N²` (SAR `i`, optical `j`) combinations. Stream features are
/// computed once per patch and only the fusion stage runs per combination.
pub fn keypoint_match(
    model: &Model<f32>,
    sar: &[&PatchPair],
    opt: &[&PatchPair],
    threshold: f64,
    chunk: usize,
) -> Result<MatchReport, EvalError> {
    if sar.len() != opt.len() {
        return Err(EvalError::LengthMismatch {
            sar: sar.len(),
            opt: opt.len(),
        });
    }
    let n = sar.len();
    if n < 2 {
        return Err(EvalError::TooFewKeypoints { min: 2, got: n });
    }
    let chunk = chunk.max(1);
    let features = |stream: Stream, pairs: &[&PatchPair]| -> Result<Vec<Vec<f32>>, EvalError> {
        let mut out = Vec::with_capacity(n);
        for part in pairs.chunks(chunk) {
            let (s, o, _) = batch_tensors(part, model.spec.patch_size)?;
            let x = if stream == Stream::Sar { s } else { o };
            let f = model.stream_features(stream, &x)?;
            let per = f.len() / part.len();
            out.extend(f.data().chunks_exact(per).map(<[f32]>::to_vec));
        }
        Ok(out)
    };
    let sf = features(Stream::Sar, sar)?;
    let of = features(Stream::Optical, opt)?;
    let probe = {
        let (s, _, _) = batch_tensors(&sar[..1], model.spec.patch_size)?;
        model.stream_features(Stream::Sar, &s)?.shape().to_vec()
    };
    let mut matrix = vec![vec![0.0; n]; n];
    let combos: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).collect();
    for part in combos.chunks(chunk) {
        let mut shape = probe.clone();
        shape[0] = part.len();
        let s = Tensor::new(
            &shape,
            part.iter()
                .flat_map(|&(i, _)| sf[i].iter().copied())
                .collect(),
        )?;
        let o = Tensor::new(
            &shape,
            part.iter()
                .flat_map(|&(_, j)| of[j].iter().copied())
                .collect(),
        )?;
        let scores = similarity_score(&model.fuse(&s, &o)?);
        for (&(i, j), sc) in part.iter().zip(scores) {
            matrix[i][j] = sc as f64;
        }
    }
    match_report(matrix, threshold)
}

/// `n` positives clustered around the positive with the most close
/// neighbours (spatially neighbouring key-points). Neighbours from the
/// seed's own scene come first; when no scene holds `n` positives the
/// cluster continues into the same region of other scenes. Ties between
/// candidate seeds go to the earlier pair.
pub fn select_keypoints(pairs: &[PatchPair], n: usize) -> Result<Vec<&PatchPair>, EvalError> {
    let positives: Vec<&PatchPair> = pairs.iter().filter(|p| p.label.is_similar()).collect();
    if n == 0 || positives.len() < n {
        return Err(EvalError::TooFewKeypoints {
            min: n.max(1),
            got: positives.len(),
        });
    }
    let dist2 = |a: &PatchPair, b: &PatchPair| {
        let (dy, dx) = (
            (a.sar_center.0 - b.sar_center.0) as i64,
            (a.sar_center.1 - b.sar_center.1) as i64,
        );
        dy * dy + dx * dx
    };
    // (neighbours taken from other scenes, distance to the n-th neighbour)
    let mut best: Option<((usize, i64), Vec<&PatchPair>)> = None;
    for seed in &positives {
        let key = |p: &PatchPair| (p.scene_id != seed.scene_id, dist2(seed, p));
        let mut ranked = positives.clone();
        ranked.sort_by_key(|p| (key(p), p.scene_id, p.sar_center));
        ranked.truncate(n);
        let foreign = ranked
            .iter()
            .filter(|p| p.scene_id != seed.scene_id)
            .count();
        let rank = (foreign, key(ranked[n - 1]).1);
        if best.as_ref().is_none_or(|(r, _)| rank < *r) {
            best = Some((rank, ranked));
        }
    }
    Ok(best.map(|(_, v)| v).unwrap_or_default())
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("threshold,tpr,fpr,accuracy\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{}\n",
            fmt(r.threshold),
            fmt(r.tpr),
            fmt(r.fpr),
            fmt(r.accuracy)
        ));
    }
    s
}

pub fn matrix_csv(matrix: &[Vec<f64>]) -> String {
    matrix
        .iter()
        .map(|row| row.iter().map(|&v| fmt(v)).collect::<Vec<_>>().join(",") + "\n")
        .collect()
}

pub fn non_match_csv(scores: &[f64]) -> String {
    let mut s = String::from("rank,score\n");
    for (i, &v) in scores.iter().enumerate() {
        s.push_str(&format!("{},{}\n", i + 1, fmt(v)));
    }
    s
}

/// Writes `<prefix>.sweep.csv` and, given a match report,
/// `<prefix>.matrix.csv` and `<prefix>.nonmatch.csv`. Returns the paths.
pub fn emit_reports(
    rows: Option<&[SweepRow]>,
    report: Option<&MatchReport>,
    prefix: &Path,
) -> Result<Vec<PathBuf>, EvalError> {
    let path = |suffix: &str| {
        let mut p = prefix.as_os_str().to_owned();
        p.push(suffix);
        PathBuf::from(p)
    };
    let mut written = Vec::new();
    if let Some(rows) = rows {
        let p = path(".sweep.csv");
        fs::write(&p, sweep_csv(rows))?;
        written.push(p);
    }
    if let Some(r) = report {
        for (suffix, body) in [
            (".matrix.csv", matrix_csv(&r.matrix)),
            (".nonmatch.csv", non_match_csv(&r.non_match_sorted)),
        ] {
            let p = path(suffix);
            fs::write(&p, body)?;
            written.push(p);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sp(v: &[(f64, bool)]) -> Vec<ScoredPair> {
        v.iter().map(|&(s, p)| ScoredPair::new(s, p)).collect()
    }

    #[test]
    fn auc_by_hand() {
        let p = sp(&[(0.9, true), (0.6, true), (0.4, false), (0.7, false)]);
        // pairs (+,−): (0.9,0.4) (0.9,0.7) (0.6,0.4) win, (0.6,0.7) loses
        assert_eq!(auc(&p).unwrap(), 0.75);
        let ties = sp(&[(0.5, true), (0.5, false)]);
        assert_eq!(auc(&ties).unwrap(), 0.5);
    }

    #[test]
    fn correlation_extremes() {
        let a = [0.0f32, 1.0, 2.0, 3.0];
        let b = [3.0f32, 2.0, 1.0, 0.0];
        assert!((correlation_score(&a, &a) - 1.0).abs() < 1e-12);
        assert!(correlation_score(&a, &b).abs() < 1e-12);
        assert_eq!(correlation_score(&a, &[1.0; 4]), 0.5);
    }

    #[test]
    fn grid_ends() {
        let g = threshold_grid(DEFAULT_GRID);
        assert_eq!(g.len(), 1001);
        assert_eq!((g[0], g[500], g[1000]), (0.0, 0.5, 1.0));
    }
}
