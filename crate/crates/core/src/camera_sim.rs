//! Integrate-and-fire spike camera simulation and synthetic scenes with
//! closed-form ground-truth motion.
//!
//! Each pixel integrates `alpha * I(x, t)` into an accumulator. At every frame
//! boundary the accumulator is read out: if it reached the threshold a spike
//! bit is emitted and the threshold is subtracted. Scene intensity is expressed
//! in physical units; with the default camera (`alpha * delta == theta`) that
//! coincides with normalized intensity, where 1.0 means one spike per frame.

use std::fmt::Write as _;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::intensity::IntensityMap;
use crate::rng;
use crate::spike_stream::SpikeStream;

/// Relative slack on the threshold comparison. Absorbs rounding in the
/// running sum (ten additions of 0.1 must fire exactly once).
const THRESHOLD_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseMode {
    Deterministic,
    /// Photon shot noise: each integration step adds a Poisson draw with the
    /// deterministic charge as its mean.
    Poisson,
}

impl NoiseMode {
    pub fn name(self) -> &'static str {
        match self {
            NoiseMode::Deterministic => "deterministic",
            NoiseMode::Poisson => "poisson",
        }
    }
}

impl std::str::FromStr for NoiseMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deterministic" => Ok(NoiseMode::Deterministic),
            "poisson" => Ok(NoiseMode::Poisson),
            _ => Err(Error::InvalidArgument(format!("unknown noise mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraConfig {
    /// theta, accumulation units (electrons).
    pub threshold: f64,
    /// alpha, accumulation units per intensity-second.
    pub conversion_rate: f64,
    /// delta, seconds per frame.
    pub period: f64,
    pub noise: NoiseMode,
    /// Ignored in deterministic mode.
    pub seed: u64,
}

impl Default for CameraConfig {
    /// 40 kHz readout, 32-electron threshold, `alpha * delta == theta`.
    fn default() -> Self {
        let threshold = 32.0;
        let period = 25e-6;
        Self {
            threshold,
            conversion_rate: threshold / period,
            period,
            noise: NoiseMode::Deterministic,
            seed: 0,
        }
    }
}

impl CameraConfig {
    pub fn poisson(seed: u64) -> Self {
        Self {
            noise: NoiseMode::Poisson,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v > 0.0 && v.is_finite();
        if !(ok(self.threshold) && ok(self.conversion_rate) && ok(self.period)) {
            return Err(Error::InvalidArgument(format!(
                "camera needs theta, alpha, delta > 0 (got {}, {}, {})",
                self.threshold, self.conversion_rate, self.period
            )));
        }
        Ok(())
    }

    /// Intensity that yields exactly one spike per frame.
    pub fn unit_intensity(&self) -> f64 {
        self.threshold / (self.conversion_rate * self.period)
    }
}

/// Periodic texture defined by a coarse value grid and bilinear interpolation.
#[derive(Debug, Clone, PartialEq)]
pub struct Texture {
    grid_w: usize,
    grid_h: usize,
    cell_x: f64,
    cell_y: f64,
    values: Vec<f64>,
}

impl Texture {
    pub fn constant(value: f64) -> Self {
        Self {
            grid_w: 1,
            grid_h: 1,
            cell_x: 1.0,
            cell_y: 1.0,
            values: vec![value],
        }
    }

    /// Grid of `grid_w x grid_h` values, one every `cell` pixels.
    pub fn from_grid(grid_w: usize, grid_h: usize, cell: f64, values: Vec<f64>) -> Result<Self> {
        if grid_w == 0 || grid_h == 0 || values.len() != grid_w * grid_h {
            return Err(Error::ShapeMismatch(format!(
                "texture grid {grid_w}x{grid_h} with {} values",
                values.len()
            )));
        }
        if !(cell > 0.0) {
            return Err(Error::InvalidArgument("texture cell must be > 0".into()));
        }
        Ok(Self {
            grid_w,
            grid_h,
            cell_x: cell,
            cell_y: cell,
            values,
        })
    }

    /// Band-limited random texture tiling a `width x height` image: uniform
    /// random values on a grid with roughly `cell`-pixel spacing.
    pub fn smooth(width: usize, height: usize, cell: f64, range: (f64, f64), seed: u64) -> Self {
        let grid_w = ((width as f64 / cell).round() as usize).max(1);
        let grid_h = ((height as f64 / cell).round() as usize).max(1);
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..grid_w * grid_h)
            .map(|_| range.0 + (range.1 - range.0) * r.random::<f64>())
            .collect();
        Self {
            grid_w,
            grid_h,
            cell_x: width as f64 / grid_w as f64,
            cell_y: height as f64 / grid_h as f64,
            values,
        }
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    #[inline]
    fn at(&self, gx: usize, gy: usize) -> f64 {
        self.values[gy * self.grid_w + gx]
    }

    /// Bilinear sample at continuous pixel coordinates, periodic in both axes.
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let gx = (x / self.cell_x).rem_euclid(self.grid_w as f64);
        let gy = (y / self.cell_y).rem_euclid(self.grid_h as f64);
        let x0 = (gx.floor() as usize).min(self.grid_w - 1);
        let y0 = (gy.floor() as usize).min(self.grid_h - 1);
        let fx = gx - x0 as f64;
        let fy = gy - y0 as f64;
        let x1 = (x0 + 1) % self.grid_w;
        let y1 = (y0 + 1) % self.grid_h;
        let top = self.at(x0, y0) * (1.0 - fx) + self.at(x1, y0) * fx;
        let bottom = self.at(x0, y1) * (1.0 - fx) + self.at(x1, y1) * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneKind {
    Translate,
    Rotate,
    TwoLayer,
}

impl SceneKind {
    pub fn name(self) -> &'static str {
        match self {
            SceneKind::Translate => "translate",
            SceneKind::Rotate => "rotate",
            SceneKind::TwoLayer => "two_layer",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Motion {
    /// Pixels per frame `(u, v)`.
    Translate { velocity: [f64; 2] },
    /// Radians per frame about the image center.
    Rotate { omega: f64 },
    /// A textured disc moving over a moving background.
    TwoLayer {
        background: [f64; 2],
        foreground: [f64; 2],
        /// Disc center at frame 0, pixels.
        center: [f64; 2],
        radius: f64,
        texture: Texture,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    /// Background (or only) layer.
    pub texture: Texture,
    pub motion: Motion,
}

impl SceneSpec {
    pub fn translate(width: usize, height: usize, velocity: [f64; 2], texture: Texture) -> Self {
        Self {
            width,
            height,
            texture,
            motion: Motion::Translate { velocity },
        }
    }

    pub fn rotate(width: usize, height: usize, omega: f64, texture: Texture) -> Self {
        Self {
            width,
            height,
            texture,
            motion: Motion::Rotate { omega },
        }
    }

    pub fn kind(&self) -> SceneKind {
        match self.motion {
            Motion::Translate { .. } => SceneKind::Translate,
            Motion::Rotate { .. } => SceneKind::Rotate,
            Motion::TwoLayer { .. } => SceneKind::TwoLayer,
        }
    }

    /// Rotation center in pixel coordinates.
    pub fn center(&self) -> [f64; 2] {
        [(self.width as f64 - 1.0) / 2.0, (self.height as f64 - 1.0) / 2.0]
    }

    /// `(I_min, I_max)` over every layer.
    pub fn brightness_range(&self) -> (f64, f64) {
        let (mut lo, mut hi) = (self.texture.min(), self.texture.max());
        if let Motion::TwoLayer { texture, .. } = &self.motion {
            lo = lo.min(texture.min());
            hi = hi.max(texture.max());
        }
        (lo, hi)
    }

    pub fn validate(&self, camera: &CameraConfig) -> Result<()> {
        camera.validate()?;
        if self.width == 0 || self.height == 0 {
            return Err(Error::ZeroDimension(format!("scene {}x{}", self.width, self.height)));
        }
        let finite = match &self.motion {
            Motion::Translate { velocity } => velocity.iter().all(|v| v.is_finite()),
            Motion::Rotate { omega } => omega.is_finite(),
            Motion::TwoLayer {
                background,
                foreground,
                center,
                radius,
                ..
            } => background
                .iter()
                .chain(foreground)
                .chain(center)
                .chain(std::iter::once(radius))
                .all(|v| v.is_finite()),
        };
        if !finite {
            return Err(Error::InvalidArgument("scene motion must be finite".into()));
        }
        let (lo, hi) = self.brightness_range();
        if lo < 0.0 {
            return Err(Error::InvalidArgument(format!("negative intensity {lo}")));
        }
        let per_frame = hi * camera.conversion_rate * camera.period;
        if per_frame > camera.threshold * (1.0 + THRESHOLD_SLACK) {
            return Err(Error::InvalidArgument(format!(
                "I_max * alpha * delta = {per_frame} exceeds threshold {}; more than one spike per frame",
                camera.threshold
            )));
        }
        Ok(())
    }

    fn disc_center(center: [f64; 2], velocity: [f64; 2], tau: f64) -> [f64; 2] {
        [center[0] + velocity[0] * tau, center[1] + velocity[1] * tau]
    }

    fn in_disc(x: f64, y: f64, c: [f64; 2], radius: f64) -> bool {
        let (dx, dy) = (x - c[0], y - c[1]);
        dx * dx + dy * dy <= radius * radius
    }

    /// Intensity at pixel `(x, y)` and continuous time `tau` (frames).
    pub fn intensity(&self, x: f64, y: f64, tau: f64) -> f64 {
        match &self.motion {
            Motion::Translate { velocity } => {
                self.texture.sample(x - velocity[0] * tau, y - velocity[1] * tau)
            }
            Motion::Rotate { omega } => {
                let [cx, cy] = self.center();
                let (s, c) = (-omega * tau).sin_cos();
                let (px, py) = (x - cx, y - cy);
                self.texture.sample(c * px - s * py + cx, s * px + c * py + cy)
            }
            Motion::TwoLayer {
                background,
                foreground,
                center,
                radius,
                texture,
            } => {
                let c = Self::disc_center(*center, *foreground, tau);
                if Self::in_disc(x, y, c, *radius) {
                    texture.sample(x - foreground[0] * tau, y - foreground[1] * tau)
                } else {
                    self.texture
                        .sample(x - background[0] * tau, y - background[1] * tau)
                }
            }
        }
    }

    /// Analytic intensity frame at time `tau`.
    pub fn render(&self, tau: f64) -> IntensityMap<f64> {
        let mut values = Vec::with_capacity(self.width * self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                values.push(self.intensity(x as f64, y as f64, tau));
            }
        }
        IntensityMap::from_vec(self.height, self.width, values)
            .expect("render produces a full frame")
    }

    /// Displacement of the content at `(x, y)` over `dt` frames starting at `t`.
    fn displacement(&self, x: f64, y: f64, t: f64, dt: f64) -> [f64; 2] {
        match &self.motion {
            Motion::Translate { velocity } => [velocity[0] * dt, velocity[1] * dt],
            Motion::Rotate { omega } => {
                let [cx, cy] = self.center();
                let (s, c) = (omega * dt).sin_cos();
                let (px, py) = (x - cx, y - cy);
                [c * px - s * py - px, s * px + c * py - py]
            }
            Motion::TwoLayer {
                background,
                foreground,
                center,
                radius,
                ..
            } => {
                let v = if Self::in_disc(x, y, Self::disc_center(*center, *foreground, t), *radius) {
                    foreground
                } else {
                    background
                };
                [v[0] * dt, v[1] * dt]
            }
        }
    }

    fn flow_field(&self, t: f64, dt: f64) -> FlowField<f64> {
        let mut flow = FlowField::zeros(self.height, self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                let d = self.displacement(x as f64, y as f64, t, dt);
                flow.set(y, x, d[0], d[1]);
            }
        }
        flow
    }
}

/// Flow from `t0` to `t1` and back.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub t0: usize,
    pub t1: usize,
    pub flow: FlowField<f64>,
    pub reverse_flow: FlowField<f64>,
}

pub fn ground_truth_flow(scene: &SceneSpec, t0: usize, t1: usize) -> Result<GroundTruth> {
    if t0 >= t1 {
        return Err(Error::InvalidArgument(format!("need t0 < t1, got {t0}, {t1}")));
    }
    let dt = (t1 - t0) as f64;
    Ok(GroundTruth {
        t0,
        t1,
        flow: scene.flow_field(t0 as f64, dt),
        reverse_flow: scene.flow_field(t1 as f64, -dt),
    })
}

pub fn render_scene(scene: &SceneSpec, tau: f64) -> IntensityMap<f64> {
    scene.render(tau)
}

/// Runs the integrate-and-fire model over `frames` readout periods with
/// `substeps` midpoint integration steps per period.
pub fn simulate(
    scene: &SceneSpec,
    camera: &CameraConfig,
    frames: usize,
    substeps: usize,
) -> Result<SpikeStream> {
    scene.validate(camera)?;
    if frames == 0 || substeps == 0 {
        return Err(Error::InvalidArgument("frames and substeps must be >= 1".into()));
    }
    let (h, w) = (scene.height, scene.width);
    let theta = camera.threshold;
    let charge_scale = camera.conversion_rate * camera.period / substeps as f64;
    let fire_level = theta * (1.0 - THRESHOLD_SLACK);

    let columns: Vec<Vec<bool>> = (0..h * w)
        .into_par_iter()
        .map(|p| {
            let (x, y) = ((p % w) as f64, (p / w) as f64);
            let mut fired = vec![false; frames];
            match camera.noise {
                NoiseMode::Deterministic => {
                    let mut acc = 0.0;
                    for (t, bit) in fired.iter_mut().enumerate() {
                        for s in 0..substeps {
                            let tau = t as f64 + (s as f64 + 0.5) / substeps as f64;
                            acc += charge_scale * scene.intensity(x, y, tau);
                        }
                        if acc >= fire_level {
                            *bit = true;
                            acc -= theta;
                            assert!(
                                acc < fire_level,
                                "more than one spike per frame at pixel {p}, frame {t}"
                            );
                        }
                    }
                }
                NoiseMode::Poisson => {
                    let mut r = ChaCha8Rng::seed_from_u64(rng::derive_indexed(camera.seed, p as u64));
                    let mut acc = theta * r.random::<f64>();
                    for (t, bit) in fired.iter_mut().enumerate() {
                        for s in 0..substeps {
                            let tau = t as f64 + (s as f64 + 0.5) / substeps as f64;
                            let mean = charge_scale * scene.intensity(x, y, tau);
                            if mean > 0.0 {
                                acc += Poisson::new(mean).expect("positive mean").sample(&mut r);
                            }
                        }
                        if acc >= theta {
                            *bit = true;
                            acc %= theta;
                        }
                    }
                }
            }
            fired
        })
        .collect();

    let mut stream = SpikeStream::new(h, w, frames, camera.period)?;
    for (p, col) in columns.iter().enumerate() {
        for (t, &b) in col.iter().enumerate() {
            if b {
                stream.set(t, p / w, p % w, true);
            }
        }
    }
    Ok(stream)
}

/// `key=value` description of a simulated scene.
pub fn manifest(scene: &SceneSpec, camera: &CameraConfig, frames: usize, substeps: usize) -> String {
    let mut out = String::new();
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(out, "{k}={v}");
    };
    kv("kind", scene.kind().name().into());
    kv("width", scene.width.to_string());
    kv("height", scene.height.to_string());
    match &scene.motion {
        Motion::Translate { velocity } => kv("velocity", format!("{},{}", velocity[0], velocity[1])),
        Motion::Rotate { omega } => kv("velocity", format!("{omega}")),
        Motion::TwoLayer {
            background,
            foreground,
            center,
            radius,
            ..
        } => {
            kv("velocity", format!("{},{}", background[0], background[1]));
            kv("foreground_velocity", format!("{},{}", foreground[0], foreground[1]));
            kv("foreground_center", format!("{},{}", center[0], center[1]));
            kv("foreground_radius", format!("{radius}"));
        }
    }
    let (lo, hi) = scene.brightness_range();
    kv("i_min", lo.to_string());
    kv("i_max", hi.to_string());
    kv("noise", camera.noise.name().into());
    kv("seed", camera.seed.to_string());
    kv("threshold", camera.threshold.to_string());
    kv("conversion_rate", camera.conversion_rate.to_string());
    kv("period", camera.period.to_string());
    kv("frames", frames.to_string());
    kv("substeps", substeps.to_string());
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spike_stream::Pixel;
    use std::f64::consts::PI;

    fn constant_scene(i: f64) -> SceneSpec {
        SceneSpec::translate(2, 2, [0.0, 0.0], Texture::constant(i))
    }

    #[test]
    fn saturated_fires_every_frame() {
        let cam = CameraConfig::default();
        let s = simulate(&constant_scene(1.0), &cam, 16, 4).unwrap();
        assert_eq!(s.total_spikes(), 2 * 2 * 16);
    }

    #[test]
    fn quarter_intensity_spike_times() {
        let cam = CameraConfig::default();
        let s = simulate(&constant_scene(0.25), &cam, 16, 1).unwrap();
        assert_eq!(s.spike_times(Pixel::new(1, 1)).unwrap(), vec![3, 7, 11, 15]);
        // spike_timestamp(z) = 4z - 1
        for z in 1..=4 {
            assert_eq!(s.spike_timestamp(Pixel::new(0, 0), z).unwrap(), 4 * z - 1);
        }
    }

    #[test]
    fn dark_scene_never_fires() {
        let s = simulate(&constant_scene(0.0), &CameraConfig::default(), 50, 4).unwrap();
        assert_eq!(s.total_spikes(), 0);
        let s = simulate(&constant_scene(0.0), &CameraConfig::poisson(3), 50, 4).unwrap();
        assert_eq!(s.total_spikes(), 0);
    }

    #[test]
    fn rejects_overbright_scene() {
        assert!(simulate(&constant_scene(1.5), &CameraConfig::default(), 4, 1).is_err());
    }

    #[test]
    fn static_scene_render_is_constant_in_time() {
        let tex = Texture::smooth(16, 16, 4.0, (0.1, 0.9), 1);
        let scene = SceneSpec::translate(16, 16, [0.0, 0.0], tex);
        let r0 = scene.render(0.0);
        for tau in [1.0, 7.5, 100.0] {
            assert_eq!(scene.render(tau), r0);
        }
    }

    #[test]
    fn integer_translation_is_exact_shift() {
        let tex = Texture::smooth(16, 12, 4.0, (0.1, 0.9), 2);
        let scene = SceneSpec::translate(16, 12, [1.0, 0.0], tex);
        let r0 = scene.render(0.0);
        for tau in [1usize, 3, 17] {
            let r = scene.render(tau as f64);
            for y in 0..12 {
                for x in 0..16 {
                    let src = (x + 16 * 4 - tau) % 16;
                    assert_eq!(r.get(y, x), r0.get(y, src));
                }
            }
        }
    }

    #[test]
    fn half_turn_maps_diametrically() {
        let tex = Texture::smooth(9, 9, 3.0, (0.1, 0.9), 5);
        let scene = SceneSpec::rotate(9, 9, PI, tex);
        let r0 = scene.render(0.0);
        let r1 = scene.render(1.0);
        for y in 0..9 {
            for x in 0..9 {
                assert!((r1.get(y, x) - r0.get(8 - y, 8 - x)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn translate_ground_truth_is_constant() {
        let scene = SceneSpec::translate(8, 6, [0.5, -0.25], Texture::constant(0.5));
        let gt = ground_truth_flow(&scene, 3, 13).unwrap();
        for y in 0..6 {
            for x in 0..8 {
                assert_eq!(gt.flow.get(y, x), (5.0, -2.5));
                assert_eq!(gt.reverse_flow.get(y, x), (-5.0, 2.5));
            }
        }
        assert!(ground_truth_flow(&scene, 3, 3).is_err());
    }

    #[test]
    fn rotation_ground_truth_formula() {
        let omega = 0.01;
        let scene = SceneSpec::rotate(11, 11, omega, Texture::constant(0.5));
        let gt = ground_truth_flow(&scene, 0, 10).unwrap();
        let a = omega * 10.0;
        for (x, y) in [(0usize, 0usize), (10, 3), (5, 5), (7, 1)] {
            let (px, py) = (x as f64 - 5.0, y as f64 - 5.0);
            let expect = (a.cos() * px - a.sin() * py - px, a.sin() * px + a.cos() * py - py);
            let got = gt.flow.get(y, x);
            assert!((got.0 - expect.0).abs() < 1e-12 && (got.1 - expect.1).abs() < 1e-12);
        }
        assert_eq!(gt.flow.get(5, 5), (0.0, 0.0));
    }

    #[test]
    fn two_layer_ground_truth_selects_by_mask() {
        let scene = SceneSpec {
            width: 16,
            height: 16,
            texture: Texture::constant(0.3),
            motion: Motion::TwoLayer {
                background: [0.1, 0.0],
                foreground: [0.0, 0.2],
                center: [8.0, 8.0],
                radius: 3.0,
                texture: Texture::constant(0.7),
            },
        };
        let gt = ground_truth_flow(&scene, 10, 20).unwrap();
        // disc center at t0 = (8, 10)
        for y in 0..16 {
            for x in 0..16 {
                let inside = (x as f64 - 8.0).powi(2) + (y as f64 - 10.0).powi(2) <= 9.0;
                let expect = if inside { (0.0, 2.0) } else { (1.0, 0.0) };
                assert_eq!(gt.flow.get(y, x), expect, "pixel ({x},{y})");
            }
        }
        // at t1 the disc is centered at (8, 12)
        assert_eq!(gt.reverse_flow.get(12, 8), (0.0, -2.0));
        assert_eq!(gt.reverse_flow.get(0, 0), (-1.0, 0.0));
        let s = simulate(&scene, &CameraConfig::default(), 30, 2).unwrap();
        assert!(s.total_spikes() > 0);
    }

    #[test]
    fn poisson_is_seed_deterministic() {
        let scene = SceneSpec::translate(4, 4, [0.1, 0.0], Texture::smooth(4, 4, 2.0, (0.2, 0.6), 9));
        let a = simulate(&scene, &CameraConfig::poisson(11), 64, 4).unwrap();
        let b = simulate(&scene, &CameraConfig::poisson(11), 64, 4).unwrap();
        let c = simulate(&scene, &CameraConfig::poisson(12), 64, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn manifest_lists_required_keys() {
        let m = manifest(&constant_scene(0.5), &CameraConfig::default(), 100, 4);
        for key in ["kind=", "velocity=", "seed=", "threshold=", "conversion_rate=", "period=", "frames="] {
            assert!(m.lines().any(|l| l.starts_with(key)), "missing {key}");
        }
    }
}
