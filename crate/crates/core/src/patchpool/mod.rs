//! Synthetic SAR/optical patch pools: scene simulation, pair assembly,
//! radiometric preprocessing, center cropping and spatially disjoint
//! train/val/test partitioning.

mod io;
pub mod sim;

use std::cmp::Ordering;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

pub use io::{read_pool, read_pool_from, write_pool, write_pool_to, POOL_MAGIC, POOL_VERSION};
pub use sim::{
    apply_speckle, generate_scene, render_optical, render_sar, sar_reflectivity, Scene,
    SceneConfig, SensorConfig,
};

use crate::rng::{indexed_rng, stream_rng, RngStream};

#[derive(Debug, Error)]
pub enum PoolError {
    #[error("scene {height}x{width} is smaller than the {min}x{min} minimum")]
    SceneTooSmall {
        height: usize,
        width: usize,
        min: usize,
    },
    #[error("{size}x{size} window at {center:?} leaves the {height}x{width} scene")]
    OutOfBounds {
        center: (i32, i32),
        size: usize,
        height: usize,
        width: usize,
    },
    #[error("not enough scene area: {0}")]
    InsufficientArea(String),
    #[error("region {index} spans {rows} rows, fewer than one {size}-pixel patch")]
    RegionTooSmall {
        index: usize,
        rows: usize,
        size: usize,
    },
    #[error("crop target {target} exceeds patch size {size}")]
    CropTooLarge { target: usize, size: usize },
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("pool file has bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported pool file version {0}")]
    UnsupportedVersion(u32),
    #[error("pool file is truncated")]
    Truncated,
    #[error("invalid label byte {0}")]
    InvalidLabel(u8),
    #[error("pool file has trailing bytes")]
    TrailingBytes,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Pair label; one-hot `[1,0]` for dissimilar, `[0,1]` for similar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Label {
    Dissimilar,
    Similar,
}

impl Label {
    pub fn one_hot(self) -> [f32; 2] {
        match self {
            Label::Dissimilar => [1.0, 0.0],
            Label::Similar => [0.0, 1.0],
        }
    }

    pub fn is_similar(self) -> bool {
        self == Label::Similar
    }

    pub fn to_byte(self) -> u8 {
        match self {
            Label::Dissimilar => 0,
            Label::Similar => 1,
        }
    }

    pub fn from_byte(b: u8) -> Result<Self, PoolError> {
        match b {
            0 => Ok(Label::Dissimilar),
            1 => Ok(Label::Similar),
            other => Err(PoolError::InvalidLabel(other)),
        }
    }
}

/// One SAR patch, one optical patch and their label, with the scene
/// coordinates (row, column) of both patch centres.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    pub size: usize,
    pub sar: Vec<f32>,
    pub opt: Vec<f32>,
    pub label: Label,
    pub sar_center: (i32, i32),
    pub opt_center: (i32, i32),
    pub scene_id: u32,
}

impl PatchPair {
    fn sort_key(&self) -> (u32, (i32, i32), (i32, i32), Label) {
        (self.scene_id, self.sar_center, self.opt_center, self.label)
    }

    fn canonical_cmp(&self, other: &Self) -> Ordering {
        self.sort_key().cmp(&other.sort_key()).then_with(|| {
            let bits = |p: &Self| -> Vec<u32> {
                p.sar.iter().chain(&p.opt).map(|v| v.to_bits()).collect()
            };
            bits(self).cmp(&bits(other))
        })
    }

    /// Row/column ranges covered by the SAR and the optical window.
    pub fn windows(&self) -> [(Range<i32>, Range<i32>); 2] {
        let d = self.size as i32;
        let win = |c: (i32, i32)| {
            let (top, left) = (c.0 - d / 2, c.1 - d / 2);
            (top..top + d, left..left + d)
        };
        [win(self.sar_center), win(self.opt_center)]
    }
}

/// Min-max rescale to `[0, 1]` (a constant patch maps to zeros), then
/// subtract the patch mean.
pub fn preprocess(patch: &[f64]) -> Vec<f32> {
    let (lo, hi) = patch
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    if patch.is_empty() || hi <= lo {
        return vec![0.0; patch.len()];
    }
    let scaled: Vec<f64> = patch.iter().map(|&v| (v - lo) / (hi - lo)).collect();
    let mean = scaled.iter().sum::<f64>() / scaled.len() as f64;
    scaled.iter().map(|&v| (v - mean) as f32).collect()
}

/// Concentric `target × target` crop of a `size × size` patch, offset
/// `floor((size − target) / 2)` on both axes.
pub fn center_crop<T: Copy>(patch: &[T], size: usize, target: usize) -> Result<Vec<T>, PoolError> {
    if target > size {
        return Err(PoolError::CropTooLarge { target, size });
    }
    assert_eq!(patch.len(), size * size, "patch is not {size}x{size}");
    let off = (size - target) / 2;
    Ok((off..off + target)
        .flat_map(|y| {
            patch[y * size + off..y * size + off + target]
                .iter()
                .copied()
        })
        .collect())
}

/// Renders `n_positive` corresponding pairs plus one non-corresponding
/// partner per SAR patch. Negatives keep the SAR patch and take the optical
/// patch from the same scene row at least `d` columns away. The output
/// order is shuffled.
pub fn make_pairs<R: Rng + ?Sized>(
    scenes: &[Scene],
    d: usize,
    n_positive: usize,
    sensor: &SensorConfig,
    rng: &mut R,
    speckle_rng: &mut R,
) -> Result<Vec<PatchPair>, PoolError> {
    if scenes.is_empty() {
        return Err(PoolError::InsufficientArea("no scenes".into()));
    }
    let half = (d / 2) as i32;
    for s in scenes {
        // a negative needs two centres at least d apart on one row
        if s.height < d || s.width < 2 * d {
            return Err(PoolError::InsufficientArea(format!(
                "scene {} is {}x{}, need {}x{}",
                s.scene_id,
                s.height,
                s.width,
                d,
                2 * d
            )));
        }
    }
    let per_scene = n_positive.div_ceil(scenes.len());
    let mut pairs = Vec::with_capacity(2 * n_positive);
    for i in 0..n_positive {
        let scene = &scenes[i % scenes.len()];
        let stratum = i / scenes.len();
        // stratified rows keep the partition shares close to their targets
        let (ylo, yhi) = (half, (scene.height - d) as i32 + half);
        let span = (yhi - ylo + 1) as f64;
        let y = ylo + (((stratum as f64 + rng.random::<f64>()) / per_scene as f64) * span) as i32;
        let y = y.min(yhi);
        let (xlo, xhi) = (half, (scene.width - d) as i32 + half);
        let x = rng.random_range(xlo..=xhi);
        let d_i = d as i32;
        let left_n = (x - d_i - xlo + 1).max(0);
        let right_n = (xhi - (x + d_i) + 1).max(0);
        let pick = rng.random_range(0..left_n + right_n);
        let xn = if pick < left_n {
            xlo + pick
        } else {
            x + d_i + (pick - left_n)
        };

        let sar = preprocess(&render_sar(scene, (y, x), d, sensor, speckle_rng)?);
        let opt_pos = preprocess(&render_optical(scene, (y, x), d, sensor)?);
        let opt_neg = preprocess(&render_optical(scene, (y, xn), d, sensor)?);
        pairs.push(PatchPair {
            size: d,
            sar: sar.clone(),
            opt: opt_pos,
            label: Label::Similar,
            sar_center: (y, x),
            opt_center: (y, x),
            scene_id: scene.scene_id,
        });
        pairs.push(PatchPair {
            size: d,
            sar,
            opt: opt_neg,
            label: Label::Dissimilar,
            sar_center: (y, x),
            opt_center: (y, xn),
            scene_id: scene.scene_id,
        });
    }
    pairs.shuffle(rng);
    Ok(pairs)
}

pub const PAPER_FRACTIONS: [f64; 3] = [0.55, 0.15, 0.30];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Three horizontal bands of a scene, one per split. Band heights are sized
/// so that the rows at which a full `d`-pixel window fits are shared in
/// proportion to the fractions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionLayout {
    pub bands: [Range<usize>; 3],
}

impl RegionLayout {
    pub fn new(scene_height: usize, d: usize, fractions: [f64; 3]) -> Result<Self, PoolError> {
        let total: f64 = fractions.iter().sum();
        if fractions.iter().any(|&f| f <= 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(PoolError::Config(format!(
                "fractions {fractions:?} must be positive and sum to 1"
            )));
        }
        let usable = scene_height as f64 - 3.0 * (d as f64 - 1.0);
        if usable < 3.0 {
            return Err(PoolError::RegionTooSmall {
                index: 0,
                rows: scene_height / 3,
                size: d,
            });
        }
        let mut bands: [Range<usize>; 3] = [0..0, 0..0, 0..0];
        let mut start = 0;
        for (i, f) in fractions.iter().enumerate() {
            let end = if i == 2 {
                scene_height
            } else {
                start + (d - 1) + (f * usable).round() as usize
            };
            if end - start < d {
                return Err(PoolError::RegionTooSmall {
                    index: i,
                    rows: end - start,
                    size: d,
                });
            }
            bands[i] = start..end;
            start = end;
        }
        Ok(Self { bands })
    }

    /// The band fully containing `rows`, if any.
    pub fn band_of(&self, rows: &Range<i32>) -> Option<usize> {
        self.bands
            .iter()
            .position(|b| rows.start >= b.start as i32 && rows.end <= b.end as i32)
    }
}

/// Generation-time bookkeeping carried alongside a pool.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PoolMetadata {
    pub seed: Option<u64>,
    pub generated: usize,
    pub discarded: usize,
}

/// A partitioned patch pool.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPool {
    pub patch_size: usize,
    pub fractions: [f64; 3],
    pub train: Vec<PatchPair>,
    pub val: Vec<PatchPair>,
    pub test: Vec<PatchPair>,
    pub metadata: PoolMetadata,
}

impl PatchPool {
    pub fn split(&self, split: Split) -> &[PatchPair] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn counts(&self) -> [usize; 3] {
        [self.train.len(), self.val.len(), self.test.len()]
    }

    pub fn total(&self) -> usize {
        self.counts().iter().sum()
    }

    /// Realised share of each split.
    pub fn shares(&self) -> [f64; 3] {
        let t = self.total().max(1) as f64;
        self.counts().map(|c| c as f64 / t)
    }

    /// Every pair re-cut to `target × target` around its centre.
    pub fn cropped(&self, target: usize) -> Result<PatchPool, PoolError> {
        let crop = |pairs: &[PatchPair]| -> Result<Vec<PatchPair>, PoolError> {
            pairs
                .iter()
                .map(|p| {
                    Ok(PatchPair {
                        size: target,
                        sar: center_crop(&p.sar, p.size, target)?,
                        opt: center_crop(&p.opt, p.size, target)?,
                        ..p.clone()
                    })
                })
                .collect()
        };
        Ok(PatchPool {
            patch_size: target,
            fractions: self.fractions,
            train: crop(&self.train)?,
            val: crop(&self.val)?,
            test: crop(&self.test)?,
            metadata: self.metadata.clone(),
        })
    }

    /// Number of (train, test) window pairs from the same scene that
    /// intersect, checked exhaustively over SAR and optical windows.
    pub fn train_test_overlaps(&self) -> usize {
        let intersects = |a: &(Range<i32>, Range<i32>), b: &(Range<i32>, Range<i32>)| {
            a.0.start < b.0.end && b.0.start < a.0.end && a.1.start < b.1.end && b.1.start < a.1.end
        };
        let mut n = 0;
        for tr in &self.train {
            let tw = tr.windows();
            for te in self.test.iter().filter(|p| p.scene_id == tr.scene_id) {
                let ew = te.windows();
                if tw.iter().any(|a| ew.iter().any(|b| intersects(a, b))) {
                    n += 1;
                }
            }
        }
        n
    }
}

/// Assigns each pair to the band containing both of its windows; pairs
/// crossing a band boundary are dropped together with their partner, so
/// every split stays exactly class-balanced. The result does not depend on
/// the input order.
pub fn partition(
    pairs: &[PatchPair],
    fractions: [f64; 3],
    scene_height: usize,
) -> Result<PatchPool, PoolError> {
    let d = pairs.first().map(|p| p.size).unwrap_or(1);
    let layout = RegionLayout::new(scene_height, d, fractions)?;
    let mut splits: [Vec<PatchPair>; 3] = Default::default();
    let mut discarded = 0;
    for p in pairs {
        let [sar, opt] = p.windows();
        match (layout.band_of(&sar.0), layout.band_of(&opt.0)) {
            (Some(a), Some(b)) if a == b => splits[a].push(p.clone()),
            _ => discarded += 1,
        }
    }
    for s in splits.iter_mut() {
        s.sort_by(PatchPair::canonical_cmp);
        // keep only SAR patches whose partner survived as well
        let positives = s.iter().filter(|p| p.label.is_similar()).count();
        let negatives = s.len() - positives;
        if positives != negatives {
            let mut by_sar: std::collections::BTreeMap<(u32, (i32, i32)), [usize; 2]> =
                Default::default();
            for p in s.iter() {
                by_sar.entry((p.scene_id, p.sar_center)).or_default()
                    [p.label.to_byte() as usize] += 1;
            }
            let before = s.len();
            s.retain(|p| {
                let c = by_sar[&(p.scene_id, p.sar_center)];
                c[0] == c[1]
            });
            discarded += before - s.len();
        }
    }
    let [train, val, test] = splits;
    Ok(PatchPool {
        patch_size: d,
        fractions,
        train,
        val,
        test,
        metadata: PoolMetadata {
            seed: None,
            generated: pairs.len(),
            discarded,
        },
    })
}

/// Everything that determines a generated pool.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub patch_size: usize,
    pub scenes: usize,
    pub scene_height: usize,
    pub scene_width: usize,
    /// Approximate number of pairs kept after partitioning.
    pub target_pairs: usize,
    pub fractions: [f64; 3],
    pub scene: SceneConfig,
    pub sensor: SensorConfig,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            patch_size: 112,
            scenes: 8,
            scene_height: 768,
            scene_width: 768,
            target_pairs: 3800,
            fractions: PAPER_FRACTIONS,
            scene: SceneConfig::default(),
            sensor: SensorConfig::default(),
        }
    }
}

impl GeneratorConfig {
    /// Share of uniformly drawn rows whose window lands inside one band.
    pub fn retained_share(&self) -> f64 {
        let d = self.patch_size as f64;
        let h = self.scene_height as f64;
        (h - 3.0 * (d - 1.0)) / (h - d + 1.0)
    }

    pub fn positives_to_generate(&self) -> usize {
        ((self.target_pairs as f64 / 2.0) / self.retained_share()).ceil() as usize
    }
}

pub fn generate_scenes(cfg: &GeneratorConfig) -> Result<Vec<Scene>, PoolError> {
    (0..cfg.scenes)
        .map(|i| {
            let mut rng = indexed_rng(cfg.seed, RngStream::Scene, i as u64);
            generate_scene(
                i as u32,
                cfg.seed,
                cfg.scene_height,
                cfg.scene_width,
                &cfg.scene,
                &mut rng,
            )
        })
        .collect()
}

/// Scenes → pairs → partition, all driven by `cfg.seed`.
pub fn generate_pool(cfg: &GeneratorConfig) -> Result<PatchPool, PoolError> {
    if cfg.scenes == 0 || cfg.target_pairs < 2 {
        return Err(PoolError::Config(
            "need at least one scene and two pairs".into(),
        ));
    }
    // fail on degenerate regions before rendering anything
    RegionLayout::new(cfg.scene_height, cfg.patch_size, cfg.fractions)?;
    let scenes = generate_scenes(cfg)?;
    let mut rng = stream_rng(cfg.seed, RngStream::Pairs);
    let mut speckle = stream_rng(cfg.seed, RngStream::Speckle);
    let pairs = make_pairs(
        &scenes,
        cfg.patch_size,
        cfg.positives_to_generate(),
        &cfg.sensor,
        &mut rng,
        &mut speckle,
    )?;
    let mut pool = partition(&pairs, cfg.fractions, cfg.scene_height)?;
    pool.metadata.seed = Some(cfg.seed);
    Ok(pool)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preprocess_by_hand() {
        let out = preprocess(&[0.0, 1.0, 2.0, 3.0]);
        let expected = [-0.5, -1.0 / 6.0, 1.0 / 6.0, 0.5];
        for (o, e) in out.iter().zip(expected) {
            assert!((*o as f64 - e).abs() < 1e-7);
        }
        assert!(preprocess(&[4.2; 9]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn center_crop_offsets() {
        let p: Vec<u32> = (0..112 * 112).collect();
        let c = center_crop(&p, 112, 64).unwrap();
        assert_eq!(c.len(), 64 * 64);
        assert_eq!(c[0], 24 * 112 + 24);
        assert_eq!(c[64 * 64 - 1], 87 * 112 + 87);
        assert_eq!(center_crop(&p, 112, 112).unwrap(), p);
        let twice = center_crop(&center_crop(&p, 112, 100).unwrap(), 100, 64).unwrap();
        assert_eq!(twice, c);
        assert!(matches!(
            center_crop(&p, 112, 113),
            Err(PoolError::CropTooLarge { .. })
        ));
    }

    #[test]
    fn label_bytes() {
        assert_eq!(Label::from_byte(1).unwrap(), Label::Similar);
        assert_eq!(Label::Dissimilar.one_hot(), [1.0, 0.0]);
        assert!(matches!(
            Label::from_byte(2),
            Err(PoolError::InvalidLabel(2))
        ));
    }

    #[test]
    fn region_layout_shares() {
        let l = RegionLayout::new(768, 112, PAPER_FRACTIONS).unwrap();
        let interior: Vec<f64> = l.bands.iter().map(|b| (b.len() - 111) as f64).collect();
        let total: f64 = interior.iter().sum();
        for (i, f) in PAPER_FRACTIONS.iter().enumerate() {
            assert!((interior[i] / total - f).abs() < 0.005);
        }
        assert_eq!(l.bands[2].end, 768);
        assert!(matches!(
            RegionLayout::new(300, 112, PAPER_FRACTIONS),
            Err(PoolError::RegionTooSmall { .. })
        ));
    }
}
