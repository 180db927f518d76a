use proptest::prelude::*;
use psn_core::eval::{
    accuracy_at_fpr, auc, best_confusion, emit_reports, keypoint_match, match_report,
    select_keypoints, sweep, threshold_grid, top_k_accuracy, EvalError, ScoredPair, DEFAULT_GRID,
};
use psn_core::patchpool::{generate_pool, GeneratorConfig, Label, PatchPair};
use psn_core::{ArchitectureSpec, Model};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sp(score: f64, positive: bool) -> ScoredPair {
    ScoredPair::new(score, positive)
}

fn hand_case() -> Vec<ScoredPair> {
    vec![sp(0.9, true), sp(0.6, true), sp(0.4, false), sp(0.7, false)]
}

fn separated() -> Vec<ScoredPair> {
    (0..20)
        .map(|i| sp(if i % 2 == 0 { 0.9 } else { 0.1 }, i % 2 == 0))
        .collect()
}

#[test]
fn sweep_examples() {
    let rows = sweep(&separated(), &[0.5]).unwrap();
    assert_eq!(
        (rows[0].tpr, rows[0].fpr, rows[0].accuracy),
        (1.0, 0.0, 1.0)
    );

    let flat = [sp(0.5, true), sp(0.5, false)];
    let rows = sweep(&flat, &[0.5]).unwrap();
    assert_eq!((rows[0].tpr, rows[0].fpr), (1.0, 1.0));

    let r = sweep(&hand_case(), &[0.65]).unwrap()[0];
    assert_eq!((r.tp, r.fn_, r.tn, r.fp), (1, 1, 1, 1));
    assert_eq!(r.accuracy, 0.5);

    assert!(matches!(
        sweep(&[sp(0.2, true), sp(0.3, true)], &[0.5]),
        Err(EvalError::SingleClass { .. })
    ));
    assert!(matches!(
        sweep(&[sp(1.5, true), sp(0.3, false)], &[0.5]),
        Err(EvalError::BadScore(_))
    ));
}

#[test]
fn sweep_rows_follow_the_threshold_order_and_identities() {
    let rows = sweep(&hand_case(), &threshold_grid(DEFAULT_GRID)).unwrap();
    assert_eq!(rows.len(), 1001);
    assert!(rows.windows(2).all(|w| w[0].threshold < w[1].threshold));
    for r in &rows {
        assert!((r.tpr + r.fnr - 1.0).abs() < 1e-9);
        assert!((r.tnr + r.fpr - 1.0).abs() < 1e-9);
        assert_eq!(r.accuracy, (r.tp + r.tn) as f64 / 4.0);
    }
}

#[test]
fn best_confusion_on_separated_and_hand_cases() {
    let rows = sweep(&separated(), &threshold_grid(DEFAULT_GRID)).unwrap();
    let c = best_confusion(&rows).unwrap();
    assert_eq!((c.tp_pct, c.tn_pct), (100.0, 100.0));

    // 0.75 is reached on (0.4, 0.6] and on (0.7, 0.9]; the highest
    // threshold wins, where one positive is missed and no negative passes
    let rows = sweep(&hand_case(), &threshold_grid(DEFAULT_GRID)).unwrap();
    let c = best_confusion(&rows).unwrap();
    assert_eq!(c.accuracy, 0.75);
    assert_eq!(c.threshold, 0.9);
    assert_eq!(
        (c.tp_pct, c.tn_pct, c.fp_pct, c.fn_pct),
        (50.0, 100.0, 0.0, 50.0)
    );
}

#[test]
fn accuracy_under_an_fpr_cap() {
    let grid = threshold_grid(DEFAULT_GRID);
    let rows = sweep(&separated(), &grid).unwrap();
    assert_eq!(accuracy_at_fpr(&rows, 0.05).unwrap().0, 1.0);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let random: Vec<ScoredPair> = (0..4000)
        .map(|i| sp(rng.random::<f64>(), i % 2 == 0))
        .collect();
    let rows = sweep(&random, &grid).unwrap();
    let (acc, _) = accuracy_at_fpr(&rows, 0.05).unwrap();
    assert!(acc <= 0.55, "{acc}");

    let global = rows.iter().map(|r| r.accuracy).fold(0.0, f64::max);
    assert_eq!(accuracy_at_fpr(&rows, 1.0).unwrap().0, global);

    let zero_fpr_impossible = sweep(&[sp(1.0, false), sp(0.2, true)], &[0.5, 1.0]).unwrap();
    assert!(matches!(
        accuracy_at_fpr(&zero_fpr_impossible, 0.0),
        Err(EvalError::CapUnreachable(_))
    ));
}

#[test]
fn auc_against_pair_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    // coarse scores force ties
    let pairs: Vec<ScoredPair> = (0..300)
        .map(|_| {
            sp(
                (rng.random_range(0..20) as f64) / 19.0,
                rng.random_bool(0.4),
            )
        })
        .collect();
    let (pos, neg): (Vec<&ScoredPair>, Vec<&ScoredPair>) = pairs.iter().partition(|p| p.positive);
    let mut wins = 0.0;
    for p in &pos {
        for n in &neg {
            wins += if p.score > n.score {
                1.0
            } else if p.score == n.score {
                0.5
            } else {
                0.0
            };
        }
    }
    let expected = wins / (pos.len() * neg.len()) as f64;
    assert!((auc(&pairs).unwrap() - expected).abs() < 1e-12);
}

fn diag_matrix(n: usize, on: f64, off: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { on } else { off }).collect())
        .collect()
}

#[test]
fn match_report_examples() {
    let r = match_report(diag_matrix(5, 0.9, 0.1), 0.5).unwrap();
    assert_eq!((r.top1, r.top3, r.no_valid_match), (1.0, 1.0, 0.0));
    assert_eq!(r.non_match_sorted.len(), 20);

    let r = match_report(diag_matrix(5, 0.4, 0.4), 0.5).unwrap();
    assert_eq!((r.top1, r.top3, r.no_valid_match), (0.0, 0.0, 1.0));

    assert!(matches!(
        match_report(vec![vec![0.5]], 0.5),
        Err(EvalError::TooFewKeypoints { .. })
    ));
    assert!(matches!(
        match_report(vec![vec![0.5, 0.5], vec![0.5]], 0.5),
        Err(EvalError::LengthMismatch { .. })
    ));
}

#[test]
fn pessimistic_ties_by_hand() {
    // row 0: diagonal tied with one entry → rank 2; row 1: strictly best
    let m = vec![
        vec![0.5, 0.5, 0.1],
        vec![0.2, 0.8, 0.3],
        vec![0.9, 0.7, 0.6],
    ];
    assert!((top_k_accuracy(&m, 1) - 1.0 / 3.0).abs() < 1e-12);
    assert!((top_k_accuracy(&m, 2) - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(top_k_accuracy(&m, 3), 1.0);
}

proptest! {
    #[test]
    fn rates_fall_as_the_threshold_rises(scores in prop::collection::vec((0.0f64..=1.0, any::<bool>()), 2..200)) {
        let mut pairs: Vec<ScoredPair> = scores.iter().map(|&(s, p)| sp(s, p)).collect();
        pairs[0].positive = true;
        pairs[1].positive = false;
        let rows = sweep(&pairs, &threshold_grid(101)).unwrap();
        for w in rows.windows(2) {
            prop_assert!(w[1].tpr <= w[0].tpr);
            prop_assert!(w[1].fpr <= w[0].fpr);
        }
        let global = rows.iter().map(|r| r.accuracy).fold(0.0, f64::max);
        prop_assert_eq!(accuracy_at_fpr(&rows, 1.0).unwrap().0, global);
    }

    #[test]
    fn top_k_is_monotone_and_complete(n in 2usize..9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.random()).collect()).collect();
        let tops: Vec<f64> = (1..=n).map(|k| top_k_accuracy(&m, k)).collect();
        prop_assert!(tops.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(tops[n - 1], 1.0);
    }
}

fn small_pool() -> psn_core::PatchPool {
    generate_pool(&GeneratorConfig {
        patch_size: 32,
        scenes: 2,
        scene_height: 340,
        scene_width: 340,
        target_pairs: 160,
        ..GeneratorConfig::default()
    })
    .unwrap()
}

fn tiny_model() -> Model<f32> {
    let spec = ArchitectureSpec {
        patch_size: 16,
        stream_channels: vec![3, 4],
        stream_pool_after: vec![0],
        fusion_channels: vec![4, 4],
        fc1_width: 8,
        num_classes: 2,
    };
    Model::build(spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
}

#[test]
fn permuting_optical_patches_permutes_columns() {
    let pool = small_pool();
    let keys: Vec<&PatchPair> = pool
        .test
        .iter()
        .filter(|p| p.label == Label::Similar)
        .take(6)
        .collect();
    let model = tiny_model();
    let base = keypoint_match(&model, &keys, &keys, 0.5, 4).unwrap();
    let perm = [3usize, 0, 5, 1, 4, 2];
    let shuffled: Vec<&PatchPair> = perm.iter().map(|&k| keys[k]).collect();
    let moved = keypoint_match(&model, &keys, &shuffled, 0.5, 4).unwrap();
    for i in 0..6 {
        for (j, &pj) in perm.iter().enumerate() {
            assert_eq!(moved.matrix[i][j], base.matrix[i][pj]);
        }
    }
    // fused scores agree with whole-network predictions, pair by pair
    let direct =
        psn_core::train::score_pairs(&model, &[keys[1].clone(), keys[2].clone()], 2).unwrap();
    assert!((base.matrix[1][1] - direct[0]).abs() < 1e-6);
    assert!((base.matrix[2][2] - direct[1]).abs() < 1e-6);
    assert!(matches!(
        keypoint_match(&model, &keys, &keys[..3], 0.5, 4),
        Err(EvalError::LengthMismatch { .. })
    ));
}

#[test]
fn keypoints_are_clustered_positives() {
    let pool = small_pool();
    let keys = select_keypoints(&pool.test, 5).unwrap();
    assert_eq!(keys.len(), 5);
    assert!(keys
        .iter()
        .all(|p| p.label.is_similar() && p.scene_id == keys[0].scene_id));
    assert!(select_keypoints(&pool.test, 10_000).is_err());

    // more key-points than any single scene holds: the cluster spills over
    // into other scenes but keeps every positive at most once
    let per_scene = |id| {
        pool.test
            .iter()
            .filter(|p| p.label.is_similar() && p.scene_id == id)
            .count()
    };
    let total = pool.test.iter().filter(|p| p.label.is_similar()).count();
    let largest = (0..2).map(per_scene).max().unwrap();
    assert!(largest < total);
    let keys = select_keypoints(&pool.test, largest + 1).unwrap();
    assert_eq!(keys.len(), largest + 1);
    let mut ids: Vec<_> = keys.iter().map(|p| (p.scene_id, p.sar_center)).collect();
    ids.sort_unstable();
    ids.dedup();
    assert_eq!(ids.len(), largest + 1);
    let home = keys
        .iter()
        .filter(|p| p.scene_id == keys[0].scene_id)
        .count();
    assert_eq!(home, largest);
    assert_eq!(select_keypoints(&pool.test, total).unwrap().len(), total);
}

#[test]
fn reports_are_deterministic_files() {
    let dir = tempfile::tempdir().unwrap();
    let rows = sweep(&hand_case(), &[0.0, 0.5, 1.0]).unwrap();
    let report = match_report(diag_matrix(3, 0.9, 0.1), 0.5).unwrap();
    let prefix = dir.path().join("run");
    let paths = emit_reports(Some(&rows), Some(&report), &prefix).unwrap();
    assert_eq!(paths.len(), 3);
    let first: Vec<Vec<u8>> = paths.iter().map(|p| std::fs::read(p).unwrap()).collect();
    emit_reports(Some(&rows), Some(&report), &prefix).unwrap();
    let second: Vec<Vec<u8>> = paths.iter().map(|p| std::fs::read(p).unwrap()).collect();
    assert_eq!(first, second);

    let sweep_text = String::from_utf8(first[0].clone()).unwrap();
    let lines: Vec<&str> = sweep_text.lines().collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[0], "threshold,tpr,fpr,accuracy");
    let matrix_text = String::from_utf8(first[1].clone()).unwrap();
    assert_eq!(matrix_text.lines().count(), 3);
    assert!(matrix_text.lines().all(|l| l.split(',').count() == 3));
    assert!(emit_reports(Some(&rows), None, &dir.path().join("missing/dir/x")).is_err());
}
