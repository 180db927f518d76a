//! Procedural scenes and the two forward renderers.
//!
//! Range runs along the column axis with the sensor on the low-column side,
//! so elevated scatterers are laid over towards smaller column indices.

use rand::Rng;
use rand_distr::{Distribution, Exp1};

use super::PoolError;

/// Smallest scene edge accepted by [`generate_scene`].
pub const MIN_SCENE_EDGE: usize = 336;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub bumps: usize,
    /// Peak heights are drawn from `[max_height / 4, max_height]` metres.
    pub max_height: f64,
    pub min_sigma: f64,
    pub max_sigma: f64,
    /// Number of 3×3 box-blur passes smoothing the albedo noise field.
    pub albedo_smoothing: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            bumps: 220,
            max_height: 30.0,
            min_sigma: 3.0,
            max_sigma: 10.0,
            albedo_smoothing: 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorConfig {
    /// Sun elevation above the horizon; the sun stands on the low-row side.
    pub sun_elevation_deg: f64,
    pub incidence_deg: f64,
    pub looks: usize,
    /// Share of the SAR reflectivity driven by surface albedo; the rest
    /// comes from the slope facing the sensor.
    pub sar_albedo_weight: f64,
    /// Amplitude scale applied before clipping to `[0, 1]`.
    pub amplitude_scale: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            sun_elevation_deg: 20.0,
            incidence_deg: 45.0,
            looks: 4,
            sar_albedo_weight: 0.5,
            amplitude_scale: 0.6,
        }
    }
}

impl SensorConfig {
    /// Unit vector from the ground towards the sun, (x, y, z).
    pub fn light(&self) -> [f64; 3] {
        let e = self.sun_elevation_deg.to_radians();
        [0.0, -e.cos(), e.sin()]
    }

    /// Range displacement per metre of height, `cot(θ)`.
    pub fn layover_per_metre(&self) -> f64 {
        1.0 / self.incidence_deg.to_radians().tan()
    }
}

/// Height field and albedo over a regular 1 m grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub scene_id: u32,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// Row-major heights in metres, ≥ 0.
    pub heights: Vec<f64>,
    /// Row-major albedo in `[0, 1]`.
    pub albedo: Vec<f64>,
}

impl Scene {
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.heights[y * self.width + x]
    }

    /// Surface normal from central differences, clamped at the borders.
    pub fn normal(&self, y: usize, x: usize) -> [f64; 3] {
        let xm = x.saturating_sub(1);
        let xp = (x + 1).min(self.width - 1);
        let ym = y.saturating_sub(1);
        let yp = (y + 1).min(self.height - 1);
        let dx = (self.at(y, xp) - self.at(y, xm)) / (xp - xm).max(1) as f64;
        let dy = (self.at(yp, x) - self.at(ym, x)) / (yp - ym).max(1) as f64;
        let n = (dx * dx + dy * dy + 1.0).sqrt();
        [-dx / n, -dy / n, 1.0 / n]
    }

    /// Top-left corner of the `d × d` window centred at `center` (the centre
    /// pixel sits at offset `d / 2`), or an error if it leaves the scene.
    pub fn window(&self, center: (i32, i32), d: usize) -> Result<(usize, usize), PoolError> {
        let top = center.0 as i64 - (d / 2) as i64;
        let left = center.1 as i64 - (d / 2) as i64;
        if top < 0 || left < 0 || top as usize + d > self.height || left as usize + d > self.width {
            return Err(PoolError::OutOfBounds {
                center,
                size: d,
                height: self.height,
                width: self.width,
            });
        }
        Ok((top as usize, left as usize))
    }
}

fn box_blur(field: &mut [f64], h: usize, w: usize) {
    let src = field.to_vec();
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            let mut n = 0.0;
            for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for xx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    acc += src[yy * w + xx];
                    n += 1.0;
                }
            }
            field[y * w + x] = acc / n;
        }
    }
}

/// Gaussian mounds on flat ground plus a smoothed random albedo field.
pub fn generate_scene<R: Rng + ?Sized>(
    scene_id: u32,
    seed: u64,
    height: usize,
    width: usize,
    cfg: &SceneConfig,
    rng: &mut R,
) -> Result<Scene, PoolError> {
    if height < MIN_SCENE_EDGE || width < MIN_SCENE_EDGE {
        return Err(PoolError::SceneTooSmall {
            height,
            width,
            min: MIN_SCENE_EDGE,
        });
    }
    let mut heights = vec![0.0; height * width];
    for _ in 0..cfg.bumps {
        let cy = rng.random_range(0.0..height as f64);
        let cx = rng.random_range(0.0..width as f64);
        let sigma = rng.random_range(cfg.min_sigma..=cfg.max_sigma);
        let peak = rng.random_range(cfg.max_height / 4.0..=cfg.max_height);
        let reach = (3.0 * sigma).ceil() as i64;
        let (y0, y1) = (
            (cy as i64 - reach).max(0),
            (cy as i64 + reach).min(height as i64 - 1),
        );
        let (x0, x1) = (
            (cx as i64 - reach).max(0),
            (cx as i64 + reach).min(width as i64 - 1),
        );
        for y in y0..=y1 {
            for x in x0..=x1 {
                let r2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                let v = &mut heights[y as usize * width + x as usize];
                *v += peak * (-r2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    heights
        .iter_mut()
        .for_each(|h| *h = h.clamp(0.0, cfg.max_height));

    let mut albedo: Vec<f64> = (0..height * width).map(|_| rng.random::<f64>()).collect();
    for _ in 0..cfg.albedo_smoothing {
        box_blur(&mut albedo, height, width);
    }
    let (lo, hi) = albedo
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    albedo
        .iter_mut()
        .for_each(|v| *v = ((*v - lo) / span).clamp(0.0, 1.0));

    Ok(Scene {
        scene_id,
        seed,
        height,
        width,
        heights,
        albedo,
    })
}

/// Nadir-view Lambertian rendering: `albedo · max(0, n·l)`.
pub fn render_optical(
    scene: &Scene,
    center: (i32, i32),
    d: usize,
    sensor: &SensorConfig,
) -> Result<Vec<f64>, PoolError> {
    let (top, left) = scene.window(center, d)?;
    let l = sensor.light();
    let mut out = Vec::with_capacity(d * d);
    for y in top..top + d {
        for x in left..left + d {
            let n = scene.normal(y, x);
            let shade = (n[0] * l[0] + n[1] * l[1] + n[2] * l[2]).max(0.0);
            out.push(scene.albedo[y * scene.width + x] * shade);
        }
    }
    Ok(out)
}

/// Radar roughness proxy: mid-tone materials scatter most, very dark and
/// very bright ones least, so SAR brightness is not a monotone function of
/// optical brightness.
pub fn roughness(albedo: f64) -> f64 {
    1.0 - (2.0 * albedo - 1.0).abs()
}

/// Noise-free SAR reflectivity of the window, including layover: every
/// ground cell is displaced towards near range by `height · cot(θ)` cells and
/// overlapping returns keep the brightest scatterer.
pub fn sar_reflectivity(
    scene: &Scene,
    center: (i32, i32),
    d: usize,
    sensor: &SensorConfig,
) -> Result<Vec<f64>, PoolError> {
    let (top, left) = scene.window(center, d)?;
    let theta = sensor.incidence_deg.to_radians();
    // ground → sensor, sensor at low column index
    let look = [-theta.sin(), 0.0, theta.cos()];
    let cot = sensor.layover_per_metre();
    let peak = (top..top + d)
        .flat_map(|y| scene.heights[y * scene.width + left..(y + 1) * scene.width].iter())
        .copied()
        .fold(0.0, f64::max);
    let reach = (cot * peak).ceil() as usize;
    let w_alb = sensor.sar_albedo_weight;
    let mut out = vec![0.0f64; d * d];
    for y in top..top + d {
        let row = &mut out[(y - top) * d..(y - top + 1) * d];
        for x in left..(left + d + reach).min(scene.width) {
            let shift = (scene.at(y, x) * cot).round() as usize;
            let Some(target) = x.checked_sub(shift) else {
                continue;
            };
            if target < left || target >= left + d {
                continue;
            }
            let n = scene.normal(y, x);
            let facing = (n[0] * look[0] + n[1] * look[1] + n[2] * look[2]).max(0.0);
            // flat ground → slope term 1
            let slope = (facing / theta.cos()).powi(2);
            let r = w_alb * roughness(scene.albedo[y * scene.width + x]) + (1.0 - w_alb) * slope;
            let cell = &mut row[target - left];
            *cell = cell.max(r);
        }
    }
    Ok(out)
}

/// Multiplies each intensity by the mean of `looks` i.i.d. Exponential(1)
/// draws (fully developed multi-look speckle).
pub fn apply_speckle<R: Rng + ?Sized>(intensity: &mut [f64], looks: usize, rng: &mut R) {
    let looks = looks.max(1);
    for v in intensity.iter_mut() {
        let s: f64 = (0..looks).map(|_| -> f64 { Exp1.sample(rng) }).sum::<f64>() / looks as f64;
        *v *= s;
    }
}

/// Speckled SAR amplitude patch in `[0, 1]`.
pub fn render_sar<R: Rng + ?Sized>(
    scene: &Scene,
    center: (i32, i32),
    d: usize,
    sensor: &SensorConfig,
    rng: &mut R,
) -> Result<Vec<f64>, PoolError> {
    let mut intensity = sar_reflectivity(scene, center, d, sensor)?;
    apply_speckle(&mut intensity, sensor.looks, rng);
    Ok(intensity
        .into_iter()
        .map(|i| (i.sqrt() * sensor.amplitude_scale).clamp(0.0, 1.0))
        .collect())
}
