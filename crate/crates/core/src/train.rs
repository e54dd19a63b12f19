//! End-to-end model, training loop, configuration files and checkpoints.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::ops::RangeInclusive;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::camera_sim::{self, CameraConfig, SceneSpec, Texture};
use crate::diff::{read_checkpoint, write_checkpoint, Adam, AdamConfig, Bound, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::eval::{EvalReport, SceneScore};
use crate::flow::{BackboneConfig, FlowField, FlowNet};
use crate::intensity::{EstimatorTerms, ReconConfig};
use crate::loss::{self, FusionMode, LossConfig, WeightHead};
use crate::representation::{Representation, TmrConfig};
use crate::rng;
use crate::scalar::Scalar;
use crate::spike_stream::{SpikeIndex, SpikeStream};

/// Training hyper-parameters, readable from `key=value` files.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub lr: f64,
    pub iters: usize,
    pub batch: usize,
    /// Representation window length (odd).
    pub window_len: usize,
    pub short_half: usize,
    pub long_half: usize,
    pub max_order: usize,
    pub seed: u64,
    pub dt: usize,
    pub fusion: FusionMode,
    /// Evaluate AEE on scenes with ground truth every this many iterations
    /// (0 disables).
    pub log_every: usize,
    /// Iterations during which the fusion-weight head is held at its
    /// initial (uniform) output.
    pub head_warmup: usize,
    /// See [`LossConfig::static_baseline`](crate::loss::LossConfig).
    pub static_baseline: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            lr: 1e-3,
            iters: 2000,
            batch: 1,
            window_len: 41,
            short_half: 40,
            long_half: 100,
            max_order: 2,
            seed: 0,
            dt: 10,
            fusion: FusionMode::Full,
            log_every: 100,
            head_warmup: 0,
            static_baseline: true,
        }
    }
}

pub const CONFIG_KEYS: [&str; 14] = [
    "lambda", "lr", "iters", "batch", "L", "D_s", "D_l", "K", "seed", "dt", "fusion", "log_every", "head_warmup",
    "static_baseline",
];

impl TrainConfig {
    /// Applies one `key=value` pair.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
        }
        match key {
            "lambda" => self.lambda = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "iters" => self.iters = num(key, value)?,
            "batch" => self.batch = num(key, value)?,
            "L" => self.window_len = num(key, value)?,
            "D_s" => self.short_half = num(key, value)?,
            "D_l" => self.long_half = num(key, value)?,
            "K" => self.max_order = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "dt" => self.dt = num(key, value)?,
            "fusion" => self.fusion = value.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "log_every" => self.log_every = num(key, value)?,
            "head_warmup" => self.head_warmup = num(key, value)?,
            "static_baseline" => self.static_baseline = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Defaults overridden by a `key=value` file. Blank lines and `#`
    /// comments are skipped; unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if self.batch == 0 {
            return bad("batch must be >= 1".into());
        }
        if self.window_len % 2 == 0 {
            return bad(format!("L must be odd, got {}", self.window_len));
        }
        if self.max_order != 2 {
            return bad(format!("K must be 2 (four fusion terms), got {}", self.max_order));
        }
        if self.dt == 0 {
            return bad("dt must be >= 1".into());
        }
        self.recon().validate()
    }

    pub fn recon(&self) -> ReconConfig {
        ReconConfig {
            short_half: self.short_half,
            long_half: self.long_half,
            max_order: self.max_order,
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            fusion: self.fusion,
            static_baseline: self.static_baseline,
            ..LossConfig::default()
        }
    }

    pub fn tmr(&self) -> TmrConfig {
        TmrConfig {
            window_half: self.window_len / 2,
            ..TmrConfig::default()
        }
    }

    /// Effective values as strings, for reports.
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("lambda", self.lambda.to_string());
        put("lr", self.lr.to_string());
        put("iters", self.iters.to_string());
        put("batch", self.batch.to_string());
        put("L", self.window_len.to_string());
        put("D_s", self.short_half.to_string());
        put("D_l", self.long_half.to_string());
        put("K", self.max_order.to_string());
        put("seed", self.seed.to_string());
        put("dt", self.dt.to_string());
        put("fusion", self.fusion.name().to_string());
        put("log_every", self.log_every.to_string());
        put("head_warmup", self.head_warmup.to_string());
        put("static_baseline", self.static_baseline.to_string());
        m
    }
}

impl fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.to_map() {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

const META_DT: &str = "meta.dt";
const META_WINDOW: &str = "meta.L";

/// Representation, flow network and fusion-weight head over one parameter
/// store.
#[derive(Debug, Clone)]
pub struct SpikeFlowModel<T> {
    pub store: ParamStore<T>,
    pub representation: Representation,
    pub flow: FlowNet,
    pub head: WeightHead,
}

/// Graph handles of one bidirectional forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOut {
    pub flow: Var,
    pub flow_back: Var,
    pub attention0: Var,
    pub attention1: Var,
}

impl<T: Scalar> SpikeFlowModel<T> {
    /// Fresh model with parameters drawn from the `init` stream of `seed`.
    pub fn new(tmr: TmrConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut r = rng::stream(seed, "init");
        let representation = Representation::new(tmr.clone(), &mut store, &mut r)?;
        let backbone = BackboneConfig {
            in_channels: tmr.out_channels(),
            ..BackboneConfig::default()
        };
        let flow = FlowNet::new(backbone, &mut store, &mut r)?;
        let head = WeightHead::new(&mut store, &mut r)?;
        Ok(Self {
            store,
            representation,
            flow,
            head,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn window_half(&self) -> usize {
        self.representation.config().window_half
    }

    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, stream: &SpikeStream, t0: usize, t1: usize) -> Result<ForwardOut> {
        let half = self.window_half();
        let r0 = self.representation.forward(g, p, &stream.window(t0, half)?)?;
        let r1 = self.representation.forward(g, p, &stream.window(t1, half)?)?;
        let (flow, flow_back) = self.flow.estimate_bidirectional(g, p, r0.features, r1.features)?;
        Ok(ForwardOut {
            flow,
            flow_back,
            attention0: r0.attention,
            attention1: r1.attention,
        })
    }

    /// Forward and backward flow between frames `t0` and `t1`.
    pub fn estimate(&self, stream: &SpikeStream, t0: usize, t1: usize) -> Result<(FlowField<T>, FlowField<T>)> {
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let out = self.forward(&mut g, &p, stream, t0, t1)?;
        let (h, w) = (stream.height(), stream.width());
        Ok((
            FlowField::from_planes(h, w, g.value(out.flow).data().to_vec())?,
            FlowField::from_planes(h, w, g.value(out.flow_back).data().to_vec())?,
        ))
    }

    /// Writes parameters plus `dt` and `L` as metadata entries.
    pub fn save<W: Write>(&self, dt: usize, sink: W) -> Result<usize> {
        let mut entries = self.store.to_entries();
        entries.push((META_DT.into(), Tensor::scalar(dt as f64)));
        entries.push((
            META_WINDOW.into(),
            Tensor::scalar((2 * self.window_half() + 1) as f64),
        ));
        write_checkpoint(&entries, sink)
    }

    /// Restores a model and the `dt` it was trained for.
    pub fn load<R: Read>(source: R) -> Result<(Self, usize)> {
        let entries = read_checkpoint(source)?;
        let meta = |name: &str| -> Result<usize> {
            let t = entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Checkpoint(format!("missing {name}")))?;
            let v = t.data().first().copied().unwrap_or(f64::NAN);
            if !(v >= 1.0 && v.fract() == 0.0) {
                return Err(Error::Checkpoint(format!("{name} = {v} is not a positive integer")));
            }
            Ok(v as usize)
        };
        let dt = meta(META_DT)?;
        let window_len = meta(META_WINDOW)?;
        let tmr = TmrConfig {
            window_half: window_len / 2,
            ..TmrConfig::default()
        };
        let mut model = Self::new(tmr, 0)?;
        let known = model.store.len() + 2;
        if entries.len() != known {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} entries, model expects {known}",
                entries.len()
            )));
        }
        model.store.load(&entries)?;
        Ok((model, dt))
    }
}

/// Spike stream plus optional ground-truth flow valid for every pair
/// `(t0, t0 + dt)` (constant-velocity scenes).
#[derive(Debug, Clone)]
pub struct Sequence {
    pub name: String,
    pub stream: SpikeStream,
    pub index: SpikeIndex,
    pub ground_truth: Option<FlowField<f64>>,
}

impl Sequence {
    pub fn new(name: impl Into<String>, stream: SpikeStream, ground_truth: Option<FlowField<f64>>) -> Result<Self> {
        if let Some(gt) = &ground_truth {
            if gt.height() != stream.height() || gt.width() != stream.width() {
                return Err(Error::ShapeMismatch(format!(
                    "ground truth {}x{} vs stream {}x{}",
                    gt.width(),
                    gt.height(),
                    stream.width(),
                    stream.height()
                )));
            }
        }
        let index = stream.index();
        Ok(Self {
            name: name.into(),
            stream,
            index,
            ground_truth,
        })
    }

    /// Deterministic translating texture of `size x size` pixels moving at
    /// `displacement / dt` pixels per frame.
    pub fn translate(name: &str, size: usize, displacement: [f64; 2], dt: usize, frames: usize, seed: u64) -> Result<Self> {
        let velocity = [displacement[0] / dt as f64, displacement[1] / dt as f64];
        let texture = standard_texture(size, rng::derive_seed(seed, "scene"));
        let scene = SceneSpec::translate(size, size, velocity, texture);
        let stream = camera_sim::simulate(&scene, &CameraConfig::default(), frames, 16)?;
        let gt = camera_sim::ground_truth_flow(&scene, 0, dt)?;
        Self::new(name, stream, Some(gt.flow))
    }
}

/// Smooth random texture with 4-pixel cells and intensities in
/// `[0.15, 0.85]`.
pub fn standard_texture(size: usize, seed: u64) -> Texture {
    Texture::smooth(size, size, 4.0, (0.15, 0.85), seed)
}

/// Frames `t0` may take so neither representation window is clipped.
pub fn t0_range(stream_len: usize, window_half: usize, dt: usize) -> Result<RangeInclusive<usize>> {
    let hi = stream_len as isize - 1 - dt as isize - window_half as isize;
    if hi < window_half as isize {
        return Err(Error::InvalidArgument(format!(
            "stream of {stream_len} frames too short for L={} and dt={dt}",
            2 * window_half + 1
        )));
    }
    Ok(window_half..=hi as usize)
}

/// `n` evenly spaced evaluation frames in [`t0_range`].
pub fn eval_frames(stream_len: usize, window_half: usize, dt: usize, n: usize) -> Result<Vec<usize>> {
    let r = t0_range(stream_len, window_half, dt)?;
    let (lo, hi) = (*r.start(), *r.end());
    if n <= 1 {
        return Ok(vec![(lo + hi) / 2]);
    }
    let mut v: Vec<usize> = (0..n).map(|i| lo + (hi - lo) * i / (n - 1)).collect();
    v.dedup();
    Ok(v)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub iter: usize,
    pub loss: f64,
    pub photometric: f64,
    pub smoothness: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogEntry {
    pub iter: usize,
    pub loss: f64,
    /// Mean masked AEE over sequences with ground truth.
    pub aee: Option<f64>,
}

pub struct Trainer<T> {
    pub model: SpikeFlowModel<T>,
    pub config: TrainConfig,
    adam: Adam<T>,
    sequences: Vec<Sequence>,
    ranges: Vec<RangeInclusive<usize>>,
    sampling: ChaCha8Rng,
    iter: usize,
}

type TermTensors<T> = (Tensor<T>, Tensor<T>);

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig, sequences: Vec<Sequence>) -> Result<Self> {
        config.validate()?;
        if sequences.is_empty() {
            return Err(Error::InvalidArgument("no training sequences".into()));
        }
        let model = SpikeFlowModel::new(config.tmr(), config.seed)?;
        let ranges = sequences
            .iter()
            .map(|s| t0_range(s.stream.len(), model.window_half(), config.dt))
            .collect::<Result<Vec<_>>>()?;
        let adam = Adam::new(
            AdamConfig {
                lr: config.lr,
                ..AdamConfig::default()
            },
            &model.store,
        );
        Ok(Self {
            sampling: rng::stream(config.seed, "sampling"),
            model,
            config,
            adam,
            sequences,
            ranges,
            iter: 0,
        })
    }

    pub fn sequences(&self) -> &[Sequence] {
        &self.sequences
    }

    pub fn iterations_done(&self) -> usize {
        self.iter
    }

    fn terms(&self, seq: &Sequence, tau: usize) -> Result<TermTensors<T>> {
        let terms = EstimatorTerms::<T>::compute(&seq.index, tau, &self.config.recon())?;
        loss::terms_to_tensors(&terms, self.config.fusion)
    }

    fn pair_loss(&self, g: &mut Graph<T>, p: &Bound, seq: &Sequence, t0: usize) -> Result<loss::LossTerms> {
        let t1 = t0 + self.config.dt;
        let out = self.model.forward(g, p, &seq.stream, t0, t1)?;
        let (a, b) = (self.terms(seq, t0)?, self.terms(seq, t1)?);
        loss::total_loss(g, p, &self.model.head, out.flow, out.flow_back, &a, &b, &self.config.loss())
    }

    /// One Adam step on a batch of randomly sampled pairs.
    pub fn step(&mut self) -> Result<StepStats> {
        let mut g = Graph::new();
        let p = self.model.store.bind(&mut g);
        let mut parts = Vec::with_capacity(self.config.batch);
        for _ in 0..self.config.batch {
            let s = self.sampling.random_range(0..self.sequences.len());
            let t0 = self.sampling.random_range(self.ranges[s].clone());
            parts.push(self.pair_loss(&mut g, &p, &self.sequences[s], t0)?);
        }
        let scale = T::one() / T::from_usize_lossy(parts.len());
        let sum = |sel: fn(&loss::LossTerms) -> Var, g: &mut Graph<T>| -> Result<Var> {
            let mut acc = sel(&parts[0]);
            for part in &parts[1..] {
                acc = g.add(acc, sel(part))?;
            }
            Ok(g.scale(acc, scale))
        };
        let total = sum(|l| l.total, &mut g)?;
        let objective = sum(|l| l.objective, &mut g)?;
        let photometric = sum(|l| l.photometric, &mut g)?;
        let smoothness = sum(|l| l.smoothness, &mut g)?;
        g.backward(objective)?;
        let mut grads = self.model.store.gradients(&g, &p);
        if self.iter < self.config.head_warmup {
            for (name, grad) in self.model.store.iter().map(|(n, _)| n).zip(grads.iter_mut()) {
                if name.starts_with(WeightHead::PREFIX) {
                    *grad = Tensor::zeros(grad.shape());
                }
            }
        }
        self.adam.step(&mut self.model.store, &grads);
        self.iter += 1;
        Ok(StepStats {
            iter: self.iter,
            loss: g.value(total).item().to_f64_lossy(),
            photometric: g.value(photometric).item().to_f64_lossy(),
            smoothness: g.value(smoothness).item().to_f64_lossy(),
        })
    }

    /// Mean total loss over fixed evaluation pairs of every sequence.
    pub fn eval_loss(&self, pairs_per_sequence: usize) -> Result<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for seq in &self.sequences {
            for t0 in eval_frames(seq.stream.len(), self.model.window_half(), self.config.dt, pairs_per_sequence)? {
                let mut g = Graph::new();
                let p = self.model.store.bind_frozen(&mut g);
                let l = self.pair_loss(&mut g, &p, seq, t0)?;
                sum += g.value(l.total).item().to_f64_lossy();
                n += 1;
            }
        }
        Ok(sum / n as f64)
    }

    /// Per-sequence scores averaged over evenly spaced pairs; sequences
    /// without ground truth are skipped.
    pub fn evaluate(&self, pairs_per_sequence: usize) -> Result<EvalReport> {
        let mut report = EvalReport {
            config: self.config.to_map(),
            ..EvalReport::default()
        };
        for seq in &self.sequences {
            if let Some(score) = evaluate_sequence(&self.model, seq, self.config.dt, pairs_per_sequence)? {
                report.scenes.insert(seq.name.clone(), score);
            }
        }
        Ok(report)
    }

    /// Runs the remaining iterations, calling `observer` on every log entry.
    pub fn run(&mut self, mut observer: impl FnMut(&LogEntry, &StepStats)) -> Result<Vec<LogEntry>> {
        let mut log = Vec::new();
        while self.iter < self.config.iters {
            let stats = self.step()?;
            let every = self.config.log_every;
            if (every > 0 && stats.iter % every == 0) || stats.iter == self.config.iters {
                let aee = if every > 0 { self.evaluate(3)?.mean_aee() } else { None };
                let entry = LogEntry {
                    iter: stats.iter,
                    loss: stats.loss,
                    aee,
                };
                observer(&entry, &stats);
                log.push(entry);
            }
        }
        Ok(log)
    }
}

/// AEE of `model` on `seq`, averaged over `pairs` evenly spaced pairs.
pub fn evaluate_sequence<T: Scalar>(
    model: &SpikeFlowModel<T>,
    seq: &Sequence,
    dt: usize,
    pairs: usize,
) -> Result<Option<SceneScore>> {
    let Some(gt) = &seq.ground_truth else {
        return Ok(None);
    };
    let mut acc: Option<SceneScore> = None;
    let frames = eval_frames(seq.stream.len(), model.window_half(), dt, pairs)?;
    for &t0 in &frames {
        let (f, _) = model.estimate(&seq.stream, t0, t0 + dt)?;
        let s = SceneScore::compute(&f.cast::<f64>(), gt)?;
        acc = Some(match acc {
            None => s,
            Some(a) => SceneScore {
                aee: a.aee + s.aee,
                aee_unmasked: a.aee_unmasked + s.aee_unmasked,
                ..a
            },
        });
    }
    let mut s = acc.expect("at least one frame");
    s.aee /= frames.len() as f64;
    s.aee_unmasked /= frames.len() as f64;
    Ok(Some(s))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parse_and_reject() {
        let cfg = TrainConfig::parse("# run\nlambda = 0.2\nlr=1e-3\nL=31\nseed=7\n\ndt=20\n").unwrap();
        assert_eq!(cfg.lambda, 0.2);
        assert_eq!(cfg.lr, 1e-3);
        assert_eq!(cfg.window_len, 31);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.dt, 20);
        assert_eq!(cfg.iters, 2000);
        assert!(TrainConfig::parse("lamda=0.1").is_err());
        assert!(TrainConfig::parse("lambda").is_err());
        assert!(TrainConfig::parse("lambda=-1").is_err());
        assert!(TrainConfig::parse("L=40").is_err());
        assert!(TrainConfig::parse("K=3").is_err());
        assert!(TrainConfig::parse("D_s=100\nD_l=40").is_err());
        let echoed = TrainConfig::parse(&cfg.to_string()).unwrap();
        assert_eq!(echoed, cfg);
    }

    #[test]
    fn t0_range_keeps_windows_inside() {
        let r = t0_range(100, 20, 10).unwrap();
        assert_eq!(r, 20..=69);
        assert!(t0_range(50, 20, 10).is_err());
        assert_eq!(eval_frames(100, 20, 10, 3).unwrap(), vec![20, 44, 69]);
    }

    #[test]
    fn checkpoint_roundtrip_preserves_model() {
        let model = SpikeFlowModel::<f64>::new(TmrConfig::default(), 5).unwrap();
        let mut buf = Vec::new();
        model.save(20, &mut buf).unwrap();
        let (back, dt) = SpikeFlowModel::<f64>::load(buf.as_slice()).unwrap();
        assert_eq!(dt, 20);
        assert_eq!(back.store, model.store);
        let mut again = Vec::new();
        back.save(20, &mut again).unwrap();
        assert_eq!(again, buf);
    }

    #[test]
    fn same_seed_same_init() {
        let a = SpikeFlowModel::<f64>::new(TmrConfig::default(), 1).unwrap();
        let b = SpikeFlowModel::<f64>::new(TmrConfig::default(), 1).unwrap();
        let c = SpikeFlowModel::<f64>::new(TmrConfig::default(), 2).unwrap();
        assert_eq!(a.store, b.store);
        assert_ne!(a.store, c.store);
    }
}
