//! Named parameters, the Adam optimizer and the `SPKW` checkpoint format.
//!
//! Checkpoint layout (little-endian): magic `SPKW`, version `u32`, parameter
//! count `u32`, then per parameter a `u16` name length, the UTF-8 name, a `u8`
//! rank, `rank` `u32` dims and the values as `f64`.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::ops::Index;

use crate::diff::graph::{Graph, Var};
use crate::diff::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SPKW";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Trainable tensors addressed by unique dotted names (`tmr.layer2.weight`).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    lookup: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            lookup: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name:?}")));
        }
        if name.len() > u16::MAX as usize || value.rank() > u8::MAX as usize {
            return Err(Error::InvalidArgument(format!("parameter {name:?} not representable")));
        }
        self.lookup.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.names.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Scalars in parameters whose name starts with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.names
            .iter()
            .zip(&self.values)
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, v)| v.numel())
            .sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Registers every parameter as a trainable leaf of `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound {
            vars: self.values.iter().map(|v| g.variable(v.clone())).collect(),
        }
    }

    /// Registers every parameter as a constant (inference only).
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Bound {
        Bound {
            vars: self.values.iter().map(|v| g.constant(v.clone())).collect(),
        }
    }

    /// Gradients after `g.backward`, zero for parameters the loss ignores.
    pub fn gradients(&self, g: &Graph<T>, bound: &Bound) -> Vec<Tensor<T>> {
        bound
            .vars
            .iter()
            .zip(&self.values)
            .map(|(&v, p)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect()
    }

    /// Copies values by name from checkpoint entries; every parameter must be
    /// present with a matching shape.
    pub fn load(&mut self, entries: &[(String, Tensor<f64>)]) -> Result<()> {
        let by_name: HashMap<&str, &Tensor<f64>> =
            entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let src = by_name
                .get(name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name:?}")))?;
            if src.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name:?} has shape {:?}, checkpoint has {:?}",
                    value.shape(),
                    src.shape()
                )));
            }
            for (d, &s) in value.data_mut().iter_mut().zip(src.data()) {
                *d = T::lit(s);
            }
        }
        Ok(())
    }

    pub fn to_entries(&self) -> Vec<(String, Tensor<f64>)> {
        self.iter()
            .map(|(n, t)| {
                let data = t.data().iter().map(|v| v.to_f64_lossy()).collect();
                (n.to_string(), Tensor::from_vec(t.shape(), data).expect("same shape"))
            })
            .collect()
    }
}

/// Graph handles of a [`ParamStore`] for one step.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Handles in store order, e.g. leaves created by a gradient check.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = store.values.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>]) {
        assert_eq!(grads.len(), store.len(), "one gradient per parameter");
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::one() - T::lit(c.beta1.powi(self.step as i32));
        let bc2 = T::one() - T::lit(c.beta2.powi(self.step as i32));
        let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));
        for ((p, g), (m, v)) in store
            .values
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

pub fn write_checkpoint<W: Write>(entries: &[(String, Tensor<f64>)], mut sink: W) -> Result<usize> {
    let mut n = 0;
    let mut put = |bytes: &[u8], sink: &mut W| -> Result<()> {
        sink.write_all(bytes)?;
        n += bytes.len();
        Ok(())
    };
    put(CHECKPOINT_MAGIC, &mut sink)?;
    put(&CHECKPOINT_VERSION.to_le_bytes(), &mut sink)?;
    let count = u32::try_from(entries.len())
        .map_err(|_| Error::Checkpoint("too many parameters".into()))?;
    put(&count.to_le_bytes(), &mut sink)?;
    for (name, t) in entries {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Checkpoint(format!("name too long: {name:?}")))?;
        put(&len.to_le_bytes(), &mut sink)?;
        put(name.as_bytes(), &mut sink)?;
        let rank = u8::try_from(t.rank()).map_err(|_| Error::Checkpoint("rank too large".into()))?;
        put(&[rank], &mut sink)?;
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Checkpoint("dimension too large".into()))?;
            put(&d.to_le_bytes(), &mut sink)?;
        }
        for &v in t.data() {
            put(&v.to_le_bytes(), &mut sink)?;
        }
    }
    Ok(n)
}

fn read_n<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Truncated("checkpoint ended early".into()),
        _ => Error::Io(e),
    })?;
    Ok(buf)
}

pub fn read_checkpoint<R: Read>(mut source: R) -> Result<Vec<(String, Tensor<f64>)>> {
    let magic: [u8; 4] = read_n(&mut source)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic { expected: "SPKW" });
    }
    let version = u32::from_le_bytes(read_n(&mut source)?);
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = u32::from_le_bytes(read_n(&mut source)?) as usize;
    let mut entries = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = u16::from_le_bytes(read_n(&mut source)?) as usize;
        let mut name = vec![0u8; len];
        source.read_exact(&mut name).map_err(|_| Error::Truncated("parameter name".into()))?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let [rank] = read_n::<_, 1>(&mut source)?;
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(read_n(&mut source)?) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel.min(1 << 20));
        for _ in 0..numel {
            data.push(f64::from_le_bytes(read_n(&mut source)?));
        }
        entries.push((name, Tensor::from_vec(&shape, data)?));
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f64>::new();
        s.add("a.weight", Tensor::zeros(&[2])).unwrap();
        assert!(s.add("a.weight", Tensor::zeros(&[3])).is_err());
        assert_eq!(s.num_scalars(), 2);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("x", Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap()).unwrap();
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..AdamConfig::default() }, &s);
        let g = Tensor::from_vec(&[2], vec![3.0, -0.5]).unwrap();
        opt.step(&mut s, &[g]);
        // bias-corrected first step is lr * sign(g)
        let v = s.get(id).data();
        assert!((v[0] - 0.9).abs() < 1e-6 && (v[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn checkpoint_layout() {
        let entries = vec![("w".to_string(), Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap())];
        let mut buf = Vec::new();
        let n = write_checkpoint(&entries, &mut buf).unwrap();
        assert_eq!(n, buf.len());
        // magic 4 + version 4 + count 4 + len 2 + name 1 + rank 1 + dims 8 + values 16
        assert_eq!(n, 40);
        assert_eq!(&buf[..4], b"SPKW");
        assert_eq!(read_checkpoint(&buf[..]).unwrap(), entries);
        assert!(matches!(read_checkpoint(&buf[..n - 1]), Err(Error::Truncated(_))));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(&bad[..]), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn load_checks_names_and_shapes() {
        let mut s = ParamStore::<f64>::new();
        s.add("a", Tensor::zeros(&[2])).unwrap();
        assert!(s.load(&[("b".into(), Tensor::zeros(&[2]))]).is_err());
        assert!(s.load(&[("a".into(), Tensor::zeros(&[3]))]).is_err());
        s.load(&[("a".into(), Tensor::full(&[2], 4.0))]).unwrap();
        assert_eq!(s.get(s.id("a").unwrap()).data(), &[4.0, 4.0]);
    }
}
