//! Binary spike streams, the `.spk` codec and per-pixel spike timing queries.
//!
//! A stream is an `H x W x N` occupancy tensor: bit `(t, y, x)` is set when
//! pixel `(x, y)` fired during readout frame `t`. Bits are stored exactly as
//! they appear on disk: frame-major, row-major within a frame, LSB-first within
//! a byte, and every frame padded to a whole number of bytes.
//!
//! Spike ordinals (`z`) are 1-indexed, frame indices are 0-indexed.

use std::io::{Read, Write};
use std::ops::RangeInclusive;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const SPK_MAGIC: &[u8; 4] = b"SPKS";
pub const SPK_VERSION: u32 = 1;
/// magic + version + H + W + N + period
pub const SPK_HEADER_LEN: usize = 4 + 4 + 4 + 4 + 8 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Pixel {
    pub x: usize,
    pub y: usize,
}

impl Pixel {
    pub fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpikeStream {
    height: usize,
    width: usize,
    length: usize,
    period: f64,
    bits: Vec<u8>,
}

impl SpikeStream {
    /// All-zero stream.
    pub fn new(height: usize, width: usize, length: usize, period: f64) -> Result<Self> {
        if height == 0 || width == 0 || length == 0 {
            return Err(Error::ZeroDimension(format!(
                "H={height}, W={width}, N={length}"
            )));
        }
        if !(period > 0.0 && period.is_finite()) {
            return Err(Error::InvalidArgument(format!("period must be > 0, got {period}")));
        }
        let frame_bytes = (height * width).div_ceil(8);
        Ok(Self {
            height,
            width,
            length,
            period,
            bits: vec![0; frame_bytes * length],
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        length: usize,
        period: f64,
        mut f: impl FnMut(usize, usize, usize) -> bool,
    ) -> Result<Self> {
        let mut s = Self::new(height, width, length, period)?;
        for t in 0..length {
            for y in 0..height {
                for x in 0..width {
                    if f(t, y, x) {
                        s.set(t, y, x, true);
                    }
                }
            }
        }
        Ok(s)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of frames `N`.
    pub fn len(&self) -> usize {
        self.length
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn frame_bytes(&self) -> usize {
        self.num_pixels().div_ceil(8)
    }

    /// Raw packed payload, laid out exactly as in the `.spk` file body.
    pub fn as_bytes(&self) -> &[u8] {
        &self.bits
    }

    #[inline]
    fn bit_pos(&self, t: usize, y: usize, x: usize) -> (usize, u8) {
        assert!(
            t < self.length && y < self.height && x < self.width,
            "spike address (t={t}, y={y}, x={x}) out of bounds for {}x{}x{}",
            self.height,
            self.width,
            self.length
        );
        let p = y * self.width + x;
        (t * self.frame_bytes() + p / 8, (p % 8) as u8)
    }

    #[inline]
    pub fn get(&self, t: usize, y: usize, x: usize) -> bool {
        let (byte, bit) = self.bit_pos(t, y, x);
        (self.bits[byte] >> bit) & 1 == 1
    }

    pub fn try_get(&self, t: usize, y: usize, x: usize) -> Option<bool> {
        (t < self.length && y < self.height && x < self.width).then(|| self.get(t, y, x))
    }

    #[inline]
    pub fn set(&mut self, t: usize, y: usize, x: usize, spike: bool) {
        let (byte, bit) = self.bit_pos(t, y, x);
        if spike {
            self.bits[byte] |= 1 << bit;
        } else {
            self.bits[byte] &= !(1 << bit);
        }
    }

    pub fn total_spikes(&self) -> usize {
        self.bits.iter().map(|b| b.count_ones() as usize).sum()
    }

    fn check_pixel(&self, px: Pixel) -> Result<()> {
        if px.x >= self.width || px.y >= self.height {
            return Err(Error::PixelOutOfBounds {
                x: px.x,
                y: px.y,
                width: self.width,
                height: self.height,
            });
        }
        Ok(())
    }

    /// Frame indices of every spike at `px`, ascending.
    pub fn spike_times(&self, px: Pixel) -> Result<Vec<usize>> {
        self.check_pixel(px)?;
        Ok((0..self.length).filter(|&t| self.get(t, px.y, px.x)).collect())
    }

    /// Frame index of the `z`-th spike (1-indexed) at `px`.
    pub fn spike_timestamp(&self, px: Pixel, z: usize) -> Result<usize> {
        if z == 0 {
            return Err(Error::InvalidArgument("spike ordinals start at 1".into()));
        }
        self.check_pixel(px)?;
        let mut seen = 0;
        for t in 0..self.length {
            if self.get(t, px.y, px.x) {
                seen += 1;
                if seen == z {
                    return Ok(t);
                }
            }
        }
        Err(Error::InsufficientSpikes {
            requested: z,
            available: seen,
        })
    }

    /// Ordinals `(M, N)` of the last spike strictly before `tau` and the first
    /// spike at or after `tau`.
    pub fn bracketing_spikes(&self, px: Pixel, tau: usize) -> Result<(usize, usize)> {
        let times = self.spike_times(px)?;
        bracket(&times, tau)
    }

    /// Spikes at `px` in `[tau - half, tau + half]` clipped to the stream.
    pub fn count_in_window(&self, px: Pixel, tau: usize, half: usize) -> Result<WindowCount> {
        self.check_pixel(px)?;
        let range = clip_window(tau, half, self.length);
        let count = range.clone().filter(|&t| self.get(t, px.y, px.x)).count();
        Ok(WindowCount {
            count,
            length: range.end() + 1 - range.start(),
        })
    }

    pub fn window(&self, center: usize, half_length: usize) -> Result<StreamWindow<'_>> {
        StreamWindow::new(self, center, half_length)
    }

    pub fn index(&self) -> SpikeIndex {
        SpikeIndex::new(self)
    }

    /// Writes the `.spk` encoding; returns the number of bytes written.
    pub fn encode<W: Write>(&self, mut sink: W) -> Result<usize> {
        sink.write_all(SPK_MAGIC)?;
        sink.write_all(&SPK_VERSION.to_le_bytes())?;
        sink.write_all(&(self.height as u32).to_le_bytes())?;
        sink.write_all(&(self.width as u32).to_le_bytes())?;
        sink.write_all(&(self.length as u64).to_le_bytes())?;
        sink.write_all(&self.period.to_le_bytes())?;
        sink.write_all(&self.bits)?;
        Ok(SPK_HEADER_LEN + self.bits.len())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(SPK_HEADER_LEN + self.bits.len());
        self.encode(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn decode<R: Read>(mut source: R) -> Result<Self> {
        let mut header = [0u8; SPK_HEADER_LEN];
        read_exact_or_truncated(&mut source, &mut header, "header")?;
        if &header[0..4] != SPK_MAGIC {
            return Err(Error::BadMagic { expected: "SPKS" });
        }
        let u32_at = |o: usize| u32::from_le_bytes(header[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != SPK_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let height = u32_at(8) as usize;
        let width = u32_at(12) as usize;
        let length = u64::from_le_bytes(header[16..24].try_into().unwrap());
        let period = f64::from_le_bytes(header[24..32].try_into().unwrap());
        if height == 0 || width == 0 || length == 0 {
            return Err(Error::ZeroDimension(format!(
                "H={height}, W={width}, N={length}"
            )));
        }
        let length = usize::try_from(length)
            .map_err(|_| Error::InvalidArgument(format!("frame count {length} too large")))?;
        let frame_bytes = (height * width).div_ceil(8);
        let total = frame_bytes
            .checked_mul(length)
            .ok_or_else(|| Error::InvalidArgument("payload size overflows".into()))?;

        let mut stream = Self::new(height, width, length, period)?;
        let mut bits = Vec::new();
        source.take(total as u64).read_to_end(&mut bits)?;
        if bits.len() < total {
            return Err(Error::Truncated(format!(
                "payload has {} of {total} bytes",
                bits.len()
            )));
        }
        // padding bits past H*W in each frame carry no data
        let tail = (height * width) % 8;
        if tail != 0 {
            let mask = (1u8 << tail) - 1;
            for frame in bits.chunks_exact_mut(frame_bytes) {
                *frame.last_mut().unwrap() &= mask;
            }
        }
        stream.bits = bits;
        Ok(stream)
    }
}

fn read_exact_or_truncated<R: Read>(source: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    source.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Truncated(format!("incomplete {what}")),
        _ => Error::Io(e),
    })
}

/// `[tau - half, tau + half] ∩ [0, len - 1]`.
pub fn clip_window(tau: usize, half: usize, len: usize) -> RangeInclusive<usize> {
    let lo = tau.saturating_sub(half);
    let hi = tau.saturating_add(half).min(len - 1);
    lo.min(hi)..=hi
}

/// Ordinal bracketing on a sorted spike time list.
fn bracket(times: &[usize], tau: usize) -> Result<(usize, usize)> {
    // number of spikes with T < tau is the ordinal of the last such spike
    let left = times.partition_point(|&t| t < tau);
    if left == 0 {
        return Err(Error::NoLeftSpike { tau });
    }
    if left == times.len() {
        return Err(Error::NoRightSpike { tau });
    }
    Ok((left, left + 1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowCount {
    pub count: usize,
    /// Effective window length after clipping to the stream.
    pub length: usize,
}

/// `2 * half_length + 1` frames centered on `center`.
#[derive(Debug, Clone, Copy)]
pub struct StreamWindow<'a> {
    parent: &'a SpikeStream,
    center: usize,
    half_length: usize,
}

impl<'a> StreamWindow<'a> {
    pub fn new(parent: &'a SpikeStream, center: usize, half_length: usize) -> Result<Self> {
        if center >= parent.len() {
            return Err(Error::InvalidArgument(format!(
                "window center {center} outside stream of {} frames",
                parent.len()
            )));
        }
        Ok(Self {
            parent,
            center,
            half_length,
        })
    }

    pub fn parent(&self) -> &'a SpikeStream {
        self.parent
    }

    pub fn center(&self) -> usize {
        self.center
    }

    pub fn half_length(&self) -> usize {
        self.half_length
    }

    /// Nominal length `L = 2 * half + 1`.
    pub fn len(&self) -> usize {
        2 * self.half_length + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Frames actually inside the parent stream.
    pub fn clipped_range(&self) -> RangeInclusive<usize> {
        clip_window(self.center, self.half_length, self.parent.len())
    }

    pub fn is_clipped(&self) -> bool {
        self.center < self.half_length || self.center + self.half_length >= self.parent.len()
    }

    /// Dense `L x (H*W)` 0/1 matrix, time-major. Frames that fall outside the
    /// parent stream are zero rows.
    pub fn to_dense<T: Scalar>(&self) -> Vec<T> {
        let s = self.parent;
        let p = s.num_pixels();
        let mut out = vec![T::zero(); self.len() * p];
        let first = self.center as isize - self.half_length as isize;
        for (row, t) in (first..first + self.len() as isize).enumerate() {
            if t < 0 || t as usize >= s.len() {
                continue;
            }
            let t = t as usize;
            let dst = &mut out[row * p..(row + 1) * p];
            for y in 0..s.height() {
                for x in 0..s.width() {
                    if s.get(t, y, x) {
                        dst[y * s.width() + x] = T::one();
                    }
                }
            }
        }
        out
    }
}

/// Per-pixel sorted spike times for fast timing queries.
#[derive(Debug, Clone)]
pub struct SpikeIndex {
    height: usize,
    width: usize,
    length: usize,
    times: Vec<Vec<u32>>,
}

impl SpikeIndex {
    pub fn new(stream: &SpikeStream) -> Self {
        let mut times = vec![Vec::new(); stream.num_pixels()];
        let fb = stream.frame_bytes();
        for t in 0..stream.len() {
            let frame = &stream.bits[t * fb..(t + 1) * fb];
            for (bi, &byte) in frame.iter().enumerate() {
                let mut b = byte;
                while b != 0 {
                    let bit = b.trailing_zeros() as usize;
                    times[bi * 8 + bit].push(t as u32);
                    b &= b - 1;
                }
            }
        }
        Self {
            height: stream.height(),
            width: stream.width(),
            length: stream.len(),
            times,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.length
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Spike times at flat pixel index `y * W + x`.
    pub fn times(&self, pixel: usize) -> &[u32] {
        &self.times[pixel]
    }

    pub fn spike_timestamp(&self, pixel: usize, z: usize) -> Result<usize> {
        if z == 0 {
            return Err(Error::InvalidArgument("spike ordinals start at 1".into()));
        }
        let times = &self.times[pixel];
        times
            .get(z - 1)
            .map(|&t| t as usize)
            .ok_or(Error::InsufficientSpikes {
                requested: z,
                available: times.len(),
            })
    }

    pub fn bracketing_spikes(&self, pixel: usize, tau: usize) -> Result<(usize, usize)> {
        let times = &self.times[pixel];
        let left = times.partition_point(|&t| (t as usize) < tau);
        if left == 0 {
            return Err(Error::NoLeftSpike { tau });
        }
        if left == times.len() {
            return Err(Error::NoRightSpike { tau });
        }
        Ok((left, left + 1))
    }

    pub fn count_in_window(&self, pixel: usize, tau: usize, half: usize) -> WindowCount {
        let range = clip_window(tau, half, self.length);
        let (lo, hi) = (*range.start() as u32, *range.end() as u32);
        let times = &self.times[pixel];
        let a = times.partition_point(|&t| t < lo);
        let b = times.partition_point(|&t| t <= hi);
        WindowCount {
            count: b - a,
            length: (hi - lo + 1) as usize,
        }
    }
}
