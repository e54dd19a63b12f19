//! Light intensity reconstruction from spike streams.
//!
//! Two families of estimators, all in normalized units (1.0 = one spike per
//! frame):
//!
//! * window estimators count spikes in `[tau - D, tau + D]` and divide by the
//!   effective window length. Good for slow motion.
//! * interval estimators divide `2k - 1` thresholds by the time spanned by the
//!   `2k - 1` inter-spike intervals around `tau`. Good for fast motion.
//!
//! [`fuse`] blends the short window, long window, `k = 1` and `k = 2` terms
//! with per-pixel convex weights.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::spike_stream::SpikeIndex;

#[derive(Debug, Clone, PartialEq)]
pub struct IntensityMap<T> {
    height: usize,
    width: usize,
    values: Vec<T>,
}

impl<T: Scalar> IntensityMap<T> {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![T::zero(); height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {height}x{width} map",
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> T {
        self.values[y * self.width + x]
    }

    /// 8-bit grayscale bytes, values clamped to `[0, 1]`.
    pub fn to_gray8(&self) -> Vec<u8> {
        self.values
            .iter()
            .map(|v| {
                let v = v.to_f64_lossy().clamp(0.0, 1.0);
                (v * 255.0).round() as u8
            })
            .collect()
    }

    /// Binary PGM (P5).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.to_gray8());
        out
    }
}

/// Estimator hyper-parameters: half window lengths and interval orders.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReconConfig {
    pub short_half: usize,
    pub long_half: usize,
    pub max_order: usize,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            short_half: 40,
            long_half: 100,
            max_order: 2,
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0 < self.short_half && self.short_half < self.long_half) {
            return Err(Error::Config(format!(
                "need 0 < D_s < D_l, got D_s={}, D_l={}",
                self.short_half, self.long_half
            )));
        }
        if self.max_order == 0 {
            return Err(Error::Config("K must be >= 1".into()));
        }
        Ok(())
    }
}

/// Spike count over the clipped window divided by its effective length.
pub fn window_estimate<T: Scalar>(index: &SpikeIndex, tau: usize, half: usize) -> IntensityMap<T> {
    let values = (0..index.height() * index.width())
        .map(|p| {
            let c = index.count_in_window(p, tau, half);
            T::from_usize_lossy(c.count) / T::from_usize_lossy(c.length)
        })
        .collect();
    IntensityMap {
        height: index.height(),
        width: index.width(),
        values,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntervalEstimate<T> {
    pub map: IntensityMap<T>,
    /// False where the `2k - 1` bracketing intervals do not exist; the map
    /// holds zero there.
    pub valid: Vec<bool>,
}

/// `(2k - 1) / (T(N + k - 1) - T(M - k + 1))` per pixel.
pub fn interval_estimate<T: Scalar>(index: &SpikeIndex, tau: usize, k: usize) -> Result<IntervalEstimate<T>> {
    if k == 0 {
        return Err(Error::InvalidArgument("interval order k must be >= 1".into()));
    }
    let n = index.height() * index.width();
    let mut values = vec![T::zero(); n];
    let mut valid = vec![false; n];
    for p in 0..n {
        let times = index.times(p);
        // M = number of spikes strictly before tau, N = M + 1
        let m = times.partition_point(|&t| (t as usize) < tau);
        if m < k || m + k > times.len() {
            continue;
        }
        let first = times[m - k] as usize;
        let last = times[m + k - 1] as usize;
        values[p] = T::from_usize_lossy(2 * k - 1) / T::from_usize_lossy(last - first);
        valid[p] = true;
    }
    Ok(IntervalEstimate {
        map: IntensityMap {
            height: index.height(),
            width: index.width(),
            values,
        },
        valid,
    })
}

/// Order of the four estimator terms everywhere in the crate.
pub const TERM_NAMES: [&str; 4] = ["window_short", "window_long", "interval_1", "interval_2"];
pub const NUM_TERMS: usize = 4;

/// Per-pixel convex weights over the four estimator terms, stored
/// term-major (`4 x H x W`).
#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights<T> {
    height: usize,
    width: usize,
    values: Vec<T>,
}

impl<T: Scalar> FusionWeights<T> {
    pub fn from_vec(height: usize, width: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != NUM_TERMS * height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} weights for a {height}x{width} map",
                values.len()
            )));
        }
        let tol = T::lit(1e-6);
        let hw = height * width;
        for p in 0..hw {
            let mut sum = T::zero();
            for k in 0..NUM_TERMS {
                let w = values[k * hw + p];
                if !(w >= T::zero()) {
                    return Err(Error::InvalidArgument(format!("negative weight {w} at pixel {p}")));
                }
                sum += w;
            }
            if (sum - T::one()).abs() > tol {
                return Err(Error::InvalidArgument(format!("weights sum to {sum} at pixel {p}")));
            }
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    /// Same weight vector at every pixel.
    pub fn uniform(height: usize, width: usize, w: [T; NUM_TERMS]) -> Result<Self> {
        let hw = height * width;
        let mut values = Vec::with_capacity(NUM_TERMS * hw);
        for wk in w {
            values.extend(std::iter::repeat_n(wk, hw));
        }
        Self::from_vec(height, width, values)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn at(&self, p: usize) -> [T; NUM_TERMS] {
        let hw = self.height * self.width;
        std::array::from_fn(|k| self.values[k * hw + p])
    }
}

/// All four estimator terms at one timestamp with their validity masks.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorTerms<T> {
    pub terms: [IntensityMap<T>; NUM_TERMS],
    pub valid: [Vec<bool>; NUM_TERMS],
}

impl<T: Scalar> EstimatorTerms<T> {
    pub fn compute(index: &SpikeIndex, tau: usize, cfg: &ReconConfig) -> Result<Self> {
        cfg.validate()?;
        let n = index.height() * index.width();
        let short = window_estimate(index, tau, cfg.short_half);
        let long = window_estimate(index, tau, cfg.long_half);
        let i1 = interval_estimate(index, tau, 1)?;
        let i2 = interval_estimate(index, tau, 2)?;
        Ok(Self {
            terms: [short, long, i1.map, i2.map],
            valid: [vec![true; n], vec![true; n], i1.valid, i2.valid],
        })
    }

    /// Term-major `4 x H x W` values.
    pub fn stacked_values(&self) -> Vec<T> {
        self.terms.iter().flat_map(|m| m.values().iter().copied()).collect()
    }

    /// Term-major `4 x H x W` 0/1 validity.
    pub fn stacked_mask(&self) -> Vec<T> {
        self.valid
            .iter()
            .flat_map(|v| v.iter().map(|&b| if b { T::one() } else { T::zero() }))
            .collect()
    }
}

/// Convex per-pixel blend of the four terms. The weight of an invalid term is
/// redistributed proportionally over the valid ones.
pub fn fuse<T: Scalar>(terms: &EstimatorTerms<T>, weights: &FusionWeights<T>) -> Result<IntensityMap<T>> {
    let (h, w) = (terms.terms[0].height(), terms.terms[0].width());
    if terms.terms.iter().any(|m| m.height() != h || m.width() != w)
        || weights.height() != h
        || weights.width() != w
    {
        return Err(Error::ShapeMismatch("fusion inputs differ in shape".into()));
    }
    let mut values = Vec::with_capacity(h * w);
    for p in 0..h * w {
        let wp = weights.at(p);
        let mut num = T::zero();
        let mut den = T::zero();
        for k in 0..NUM_TERMS {
            if terms.valid[k][p] {
                num += wp[k] * terms.terms[k].values()[p];
                den += wp[k];
            }
        }
        assert!(terms.valid[0][p] || terms.valid[1][p], "window terms are always valid");
        values.push(if den > T::zero() {
            num / den
        } else {
            // every valid term carries zero weight: fall back to an even split
            // of the valid terms
            let valid: Vec<usize> = (0..NUM_TERMS).filter(|&k| terms.valid[k][p]).collect();
            valid.iter().map(|&k| terms.terms[k].values()[p]).sum::<T>()
                / T::from_usize_lossy(valid.len())
        });
    }
    IntensityMap::from_vec(h, w, values)
}

/// Effective per-term weights at one pixel after renormalization.
pub fn effective_weights<T: Scalar>(w: [T; NUM_TERMS], valid: [bool; NUM_TERMS]) -> [T; NUM_TERMS] {
    let den: T = (0..NUM_TERMS).filter(|&k| valid[k]).map(|k| w[k]).sum();
    std::array::from_fn(|k| if valid[k] && den > T::zero() { w[k] / den } else { T::zero() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spike_stream::SpikeStream;

    fn train_index(n: usize, spikes: impl Fn(usize) -> bool) -> SpikeIndex {
        SpikeStream::from_fn(1, 1, n, 1e-3, |t, _, _| spikes(t)).unwrap().index()
    }

    #[test]
    fn saturated_and_dark_windows() {
        let ones = train_index(300, |_| true);
        for half in [1, 40, 100] {
            assert_eq!(window_estimate::<f64>(&ones, 150, half).get(0, 0), 1.0);
        }
        let dark = train_index(300, |_| false);
        assert_eq!(window_estimate::<f64>(&dark, 150, 40).get(0, 0), 0.0);
    }

    #[test]
    fn edge_windows_use_effective_length() {
        let ones = train_index(50, |_| true);
        assert_eq!(window_estimate::<f64>(&ones, 0, 40).get(0, 0), 1.0);
    }

    #[test]
    fn period_four_train_intervals() {
        // spikes at 3, 7, 11, ...
        let idx = train_index(100, |t| t % 4 == 3);
        for tau in [9, 10, 11, 50] {
            let k1 = interval_estimate::<f64>(&idx, tau, 1).unwrap();
            let k2 = interval_estimate::<f64>(&idx, tau, 2).unwrap();
            assert!(k1.valid[0] && k2.valid[0]);
            assert_eq!(k1.map.get(0, 0), 0.25);
            assert_eq!(k2.map.get(0, 0), 3.0 / 12.0);
        }
    }

    #[test]
    fn interval_validity() {
        let single = train_index(20, |t| t == 5);
        let e = interval_estimate::<f64>(&single, 5, 1).unwrap();
        assert!(!e.valid[0]);
        assert_eq!(e.map.get(0, 0), 0.0);
        // two spikes: k=1 valid between them, k=2 not
        let two = train_index(20, |t| t == 5 || t == 9);
        assert!(interval_estimate::<f64>(&two, 7, 1).unwrap().valid[0]);
        assert!(!interval_estimate::<f64>(&two, 7, 2).unwrap().valid[0]);
        assert!(interval_estimate::<f64>(&two, 7, 0).is_err());
    }

    fn terms_with(values: [f64; 4], valid: [bool; 4]) -> EstimatorTerms<f64> {
        EstimatorTerms {
            terms: values.map(|v| IntensityMap::from_vec(1, 1, vec![v]).unwrap()),
            valid: valid.map(|b| vec![b]),
        }
    }

    #[test]
    fn one_hot_weights_select_term() {
        let t = terms_with([0.3, 0.4, 0.5, 0.6], [true; 4]);
        let w = FusionWeights::uniform(1, 1, [1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(fuse(&t, &w).unwrap().get(0, 0), 0.3);
    }

    #[test]
    fn invalid_interval_weight_is_redistributed() {
        let eff = effective_weights([0.1, 0.1, 0.4, 0.4], [true, true, false, false]);
        assert_eq!(eff, [0.5, 0.5, 0.0, 0.0]);
        let t = terms_with([0.2, 0.4, 9.0, 9.0], [true, true, false, false]);
        let w = FusionWeights::uniform(1, 1, [0.1, 0.1, 0.4, 0.4]).unwrap();
        assert!((fuse(&t, &w).unwrap().get(0, 0) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn weights_must_be_convex() {
        assert!(FusionWeights::uniform(1, 1, [0.5, 0.5, 0.5, 0.0]).is_err());
        assert!(FusionWeights::uniform(1, 1, [1.5, -0.5, 0.0, 0.0]).is_err());
        assert!(FusionWeights::<f64>::from_vec(2, 2, vec![0.25; 8]).is_err());
    }

    #[test]
    fn pgm_header_and_clamping() {
        let m = IntensityMap::from_vec(1, 3, vec![-0.5, 0.5, 2.0]).unwrap();
        let pgm = m.to_pgm();
        assert!(pgm.starts_with(b"P5\n3 1\n255\n"));
        assert_eq!(&pgm[pgm.len() - 3..], &[0, 128, 255]);
    }
}
