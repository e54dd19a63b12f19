use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense displacement field `(u, v)` in pixels, stored as two planes
/// (`2 x H x W`, horizontal first).
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> FlowField<T> {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![T::zero(); 2 * height * width],
        }
    }

    pub fn constant(height: usize, width: usize, u: T, v: T) -> Self {
        let hw = height * width;
        let mut data = vec![u; 2 * hw];
        data[hw..].iter_mut().for_each(|x| *x = v);
        Self { height, width, data }
    }

    /// From planar `2 x H x W` data.
    pub fn from_planes(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != 2 * height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {height}x{width} flow",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("flow values must be finite".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn planes(&self) -> &[T] {
        &self.data
    }

    pub fn u(&self) -> &[T] {
        &self.data[..self.height * self.width]
    }

    pub fn v(&self) -> &[T] {
        &self.data[self.height * self.width..]
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> (T, T) {
        let p = y * self.width + x;
        (self.data[p], self.data[self.height * self.width + p])
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, u: T, v: T) {
        let p = y * self.width + x;
        let hw = self.height * self.width;
        self.data[p] = u;
        self.data[hw + p] = v;
    }

    /// Mean `(u, v)` over all pixels.
    pub fn mean(&self) -> (T, T) {
        let n = T::from_usize_lossy(self.height * self.width);
        (self.u().iter().copied().sum::<T>() / n, self.v().iter().copied().sum::<T>() / n)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// 1 where `x + f(x)` stays inside the image.
    pub fn in_bounds_mask(&self) -> Vec<bool> {
        let (w, h) = (T::from_usize_lossy(self.width - 1), T::from_usize_lossy(self.height - 1));
        let mut mask = Vec::with_capacity(self.height * self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                let (u, v) = self.get(y, x);
                let px = T::from_usize_lossy(x) + u;
                let py = T::from_usize_lossy(y) + v;
                mask.push(px >= T::zero() && px <= w && py >= T::zero() && py <= h);
            }
        }
        mask
    }

    pub fn cast<U: Scalar>(&self) -> FlowField<U> {
        FlowField {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
        }
    }
}
