//! Endpoint error, Middlebury `.flo` I/O, colour-wheel visualization and
//! evaluation reports.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::{Read, Write};

use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::scalar::Scalar;

pub const FLO_MAGIC: f32 = 202021.25;

/// Mean endpoint error over pixels where `mask` is true.
pub fn aee<T: Scalar>(flow: &FlowField<T>, gt: &FlowField<T>, mask: &[bool]) -> Result<T> {
    if flow.height() != gt.height() || flow.width() != gt.width() {
        return Err(Error::ShapeMismatch(format!(
            "flow {}x{} vs ground truth {}x{}",
            flow.height(),
            flow.width(),
            gt.height(),
            gt.width()
        )));
    }
    let n = flow.height() * flow.width();
    if mask.len() != n {
        return Err(Error::ShapeMismatch(format!("mask has {} entries, expected {n}", mask.len())));
    }
    let (fu, fv, gu, gv) = (flow.u(), flow.v(), gt.u(), gt.v());
    let mut sum = T::zero();
    let mut count = 0usize;
    for p in (0..n).filter(|&p| mask[p]) {
        let (du, dv) = (fu[p] - gu[p], fv[p] - gv[p]);
        sum += (du * du + dv * dv).sqrt();
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(sum / T::from_usize_lossy(count))
}

/// AEE over all pixels.
pub fn aee_all<T: Scalar>(flow: &FlowField<T>, gt: &FlowField<T>) -> Result<T> {
    aee(flow, gt, &vec![true; flow.height() * flow.width()])
}

pub fn write_flo<T: Scalar, W: Write>(flow: &FlowField<T>, mut sink: W) -> Result<()> {
    let (h, w) = (flow.height(), flow.width());
    if h == 0 || w == 0 {
        return Err(Error::ZeroDimension(format!("flow is {w}x{h}")));
    }
    let mut buf = Vec::with_capacity(12 + 8 * h * w);
    buf.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    buf.extend_from_slice(&(w as i32).to_le_bytes());
    buf.extend_from_slice(&(h as i32).to_le_bytes());
    let (u, v) = (flow.u(), flow.v());
    for p in 0..h * w {
        buf.extend_from_slice(&(u[p].to_f64_lossy() as f32).to_le_bytes());
        buf.extend_from_slice(&(v[p].to_f64_lossy() as f32).to_le_bytes());
    }
    sink.write_all(&buf)?;
    Ok(())
}

pub fn read_flo<R: Read>(mut source: R) -> Result<FlowField<f32>> {
    let mut header = [0u8; 12];
    source
        .read_exact(&mut header)
        .map_err(|_| Error::Truncated("flo header truncated".into()))?;
    let word = |i: usize| [header[i], header[i + 1], header[i + 2], header[i + 3]];
    if f32::from_le_bytes(word(0)) != FLO_MAGIC {
        return Err(Error::BadMagic { expected: "202021.25" });
    }
    let w = i32::from_le_bytes(word(4));
    let h = i32::from_le_bytes(word(8));
    if w <= 0 || h <= 0 {
        return Err(Error::ZeroDimension(format!("flo header declares {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let mut body = vec![0u8; 8 * w * h];
    source
        .read_exact(&mut body)
        .map_err(|_| Error::Truncated(format!("flo body truncated, expected {} bytes", body.len())))?;
    let mut data = vec![0f32; 2 * w * h];
    for p in 0..w * h {
        let f = |o: usize| f32::from_le_bytes(body[o..o + 4].try_into().expect("4 bytes"));
        data[p] = f(8 * p);
        data[w * h + p] = f(8 * p + 4);
    }
    FlowField::from_planes(h, w, data)
}

/// Segment lengths of the Middlebury wheel: RY, YG, GC, CB, BM, MR.
pub const WHEEL_SEGMENTS: [usize; 6] = [15, 6, 4, 11, 13, 6];

/// The 55 wheel colours, each channel in `[0, 1]`.
pub fn color_wheel() -> Vec<[f64; 3]> {
    let [ry, yg, gc, cb, bm, mr] = WHEEL_SEGMENTS;
    let mut wheel = Vec::with_capacity(55);
    let ramp = |i: usize, n: usize| i as f64 / n as f64;
    for i in 0..ry {
        wheel.push([1.0, ramp(i, ry), 0.0]);
    }
    for i in 0..yg {
        wheel.push([1.0 - ramp(i, yg), 1.0, 0.0]);
    }
    for i in 0..gc {
        wheel.push([0.0, 1.0, ramp(i, gc)]);
    }
    for i in 0..cb {
        wheel.push([0.0, 1.0 - ramp(i, cb), 1.0]);
    }
    for i in 0..bm {
        wheel.push([ramp(i, bm), 0.0, 1.0]);
    }
    for i in 0..mr {
        wheel.push([1.0, 0.0, 1.0 - ramp(i, mr)]);
    }
    wheel
}

/// Colour of a flow vector already divided by the normalizing magnitude.
pub fn vector_color(u: f64, v: f64, wheel: &[[f64; 3]]) -> [u8; 3] {
    let ncols = wheel.len();
    let rad = (u * u + v * v).sqrt();
    let a = (-v).atan2(-u) / PI;
    let fk = (a + 1.0) / 2.0 * (ncols - 1) as f64;
    let k0 = fk.floor() as usize;
    let k1 = if k0 + 1 == ncols { 0 } else { k0 + 1 };
    let f = fk - k0 as f64;
    std::array::from_fn(|c| {
        let col = (1.0 - f) * wheel[k0][c] + f * wheel[k1][c];
        let col = if rad <= 1.0 { 1.0 - rad * (1.0 - col) } else { col * 0.75 };
        (255.0 * col).floor().clamp(0.0, 255.0) as u8
    })
}

/// 99th percentile of `|f|`, or 1 when that is zero.
pub fn auto_max_magnitude<T: Scalar>(flow: &FlowField<T>) -> f64 {
    let mut mags: Vec<f64> = flow
        .u()
        .iter()
        .zip(flow.v())
        .map(|(&u, &v)| (u * u + v * v).sqrt().to_f64_lossy())
        .collect();
    if mags.is_empty() {
        return 1.0;
    }
    mags.sort_by(f64::total_cmp);
    let idx = ((mags.len() - 1) as f64 * 0.99).round() as usize;
    let m = mags[idx];
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// Row-major RGB8 rendering of `flow`. `max_magnitude = None` picks
/// [`auto_max_magnitude`].
pub fn flow_to_color<T: Scalar>(flow: &FlowField<T>, max_magnitude: Option<f64>) -> Result<RgbImage> {
    let scale = match max_magnitude {
        Some(m) if m > 0.0 && m.is_finite() => m,
        Some(m) => return Err(Error::InvalidArgument(format!("max magnitude must be > 0, got {m}"))),
        None => auto_max_magnitude(flow),
    };
    let wheel = color_wheel();
    let mut pixels = Vec::with_capacity(3 * flow.height() * flow.width());
    for (&u, &v) in flow.u().iter().zip(flow.v()) {
        pixels.extend(vector_color(u.to_f64_lossy() / scale, v.to_f64_lossy() / scale, &wheel));
    }
    Ok(RgbImage {
        width: flow.width(),
        height: flow.height(),
        pixels,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn get(&self, y: usize, x: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Binary PPM (`P6`).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneScore {
    pub aee: f64,
    pub aee_unmasked: f64,
    pub n_valid: usize,
    pub n_pixels: usize,
}

impl SceneScore {
    /// Masked AEE counts pixels whose ground-truth target stays in frame.
    pub fn compute<T: Scalar>(flow: &FlowField<T>, gt: &FlowField<T>) -> Result<Self> {
        let mask = gt.in_bounds_mask();
        let n_valid = mask.iter().filter(|&&m| m).count();
        Ok(Self {
            aee: aee(flow, gt, &mask)?.to_f64_lossy(),
            aee_unmasked: aee_all(flow, gt)?.to_f64_lossy(),
            n_valid,
            n_pixels: mask.len(),
        })
    }

    pub fn valid_fraction(&self) -> f64 {
        self.n_valid as f64 / self.n_pixels.max(1) as f64
    }
}

/// Per-scene scores plus the unweighted mean and the effective config.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub scenes: BTreeMap<String, SceneScore>,
    pub config: BTreeMap<String, String>,
}

impl EvalReport {
    pub fn mean_aee(&self) -> Option<f64> {
        if self.scenes.is_empty() {
            return None;
        }
        Some(self.scenes.values().map(|s| s.aee).sum::<f64>() / self.scenes.len() as f64)
    }

    pub fn to_json(&self) -> Value {
        let scenes: serde_json::Map<String, Value> = self
            .scenes
            .iter()
            .map(|(k, s)| {
                (
                    k.clone(),
                    json!({
                        "aee": s.aee,
                        "aee_unmasked": s.aee_unmasked,
                        "n_valid": s.n_valid,
                        "valid_fraction": s.valid_fraction(),
                    }),
                )
            })
            .collect();
        json!({
            "scenes": scenes,
            "mean_aee": self.mean_aee(),
            "config": self.config,
        })
    }

    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_json()).expect("report serializes");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aee_identity_and_triangle() {
        let f = FlowField::<f64>::constant(3, 4, 3.0, 4.0);
        let z = FlowField::zeros(3, 4);
        assert_eq!(aee_all(&f, &f).unwrap(), 0.0);
        assert_eq!(aee_all(&f, &z).unwrap(), 5.0);
        assert!(matches!(aee(&f, &z, &[false; 12]), Err(Error::EmptyMask)));
        assert!(aee_all(&f, &FlowField::zeros(4, 3)).is_err());
    }

    #[test]
    fn flo_roundtrip_and_errors() {
        let f = FlowField::<f64>::from_planes(2, 3, vec![0.5, -1.25, 3.0, 0.0, 1e-3, 7.5, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut buf = Vec::new();
        write_flo(&f, &mut buf).unwrap();
        assert_eq!(buf.len(), 12 + 48);
        let back = read_flo(buf.as_slice()).unwrap();
        assert_eq!(back, f.cast::<f32>());
        let mut bad = buf.clone();
        bad[0] ^= 1;
        assert!(matches!(read_flo(bad.as_slice()), Err(Error::BadMagic { .. })));
        assert!(matches!(read_flo(&buf[..30]), Err(Error::Truncated(_))));
        assert!(write_flo(&FlowField::<f64>::zeros(0, 0), Vec::new()).is_err());
        let mut zero = buf[..12].to_vec();
        zero[4..8].copy_from_slice(&0i32.to_le_bytes());
        assert!(matches!(read_flo(zero.as_slice()), Err(Error::ZeroDimension(_))));
    }

    #[test]
    fn wheel_layout() {
        let w = color_wheel();
        assert_eq!(w.len(), 55);
        assert_eq!(w[0], [1.0, 0.0, 0.0]);
        assert_eq!(w[15], [1.0, 1.0, 0.0]);
        assert_eq!(w[21], [0.0, 1.0, 0.0]);
        assert_eq!(w[25], [0.0, 1.0, 1.0]);
        assert_eq!(w[36], [0.0, 0.0, 1.0]);
        assert_eq!(w[49], [1.0, 0.0, 1.0]);
    }

    #[test]
    fn zero_flow_is_white() {
        let img = flow_to_color(&FlowField::<f64>::zeros(3, 3), None).unwrap();
        assert!(img.pixels.iter().all(|&c| c == 255));
        assert!(img.to_ppm().starts_with(b"P6\n3 3\n255\n"));
    }

    #[test]
    fn auto_scale_uses_percentile() {
        let mut f = FlowField::<f64>::constant(10, 10, 1.0, 0.0);
        f.set(0, 0, 100.0, 0.0);
        assert_eq!(auto_max_magnitude(&f), 1.0);
        assert_eq!(auto_max_magnitude(&FlowField::<f64>::zeros(2, 2)), 1.0);
    }

    #[test]
    fn report_mean_is_unweighted() {
        let mut r = EvalReport::default();
        let s = |aee: f64, n: usize| SceneScore {
            aee,
            aee_unmasked: aee,
            n_valid: n,
            n_pixels: 100,
        };
        r.scenes.insert("a".into(), s(1.0, 10));
        r.scenes.insert("b".into(), s(3.0, 90));
        assert_eq!(r.mean_aee(), Some(2.0));
        let j = r.to_json();
        assert_eq!(j["mean_aee"], 2.0);
        assert_eq!(j["scenes"]["a"]["n_valid"], 10);
    }
}
