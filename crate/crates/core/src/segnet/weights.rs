//! Named parameter tensors, Kaiming initialisation and the `BUNW` weight file.
//!
//! File layout, all little-endian: magic `BUNW`, format version `u16`, tensor
//! count `u32`, then per tensor a `u16` name length, the UTF-8 name, a `u8`
//! rank, `rank` `u32` dimensions and the `f32` payload.

use std::path::Path;

use rand_distr::{Distribution, Normal};

use super::real::Real;
use super::NetworkConfig;
use crate::error::{Error, Result};
use crate::io;
use crate::rng::rng_from;

pub const MAGIC: &[u8; 4] = b"BUNW";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight,
    ConvBias,
    BnScale,
    BnShift,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    fn suffix(self) -> &'static str {
        match self {
            ParamKind::ConvWeight => "weight",
            ParamKind::ConvBias => "bias",
            ParamKind::BnScale => "gamma",
            ParamKind::BnShift => "beta",
            ParamKind::RunningMean => "running_mean",
            ParamKind::RunningVar => "running_var",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub data: Vec<T>,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvP {
    pub w: usize,
    pub b: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct BnP {
    pub gamma: usize,
    pub beta: usize,
    pub mean: usize,
    pub var: usize,
}

/// conv -> batch norm -> ReLU
#[derive(Clone, Copy, Debug)]
pub(crate) struct UnitP {
    pub conv: ConvP,
    pub bn: BnP,
}

/// Tensor indices of every layer, derived from the network configuration.
#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub enc: Vec<[UnitP; 2]>,
    /// Upsampling convolution feeding decoder level `l`.
    pub up: Vec<UnitP>,
    pub dec: Vec<[UnitP; 2]>,
    pub head: ConvP,
    pub specs: Vec<(String, Vec<usize>, ParamKind)>,
}

impl Layout {
    pub fn new(config: &NetworkConfig) -> Self {
        let mut specs = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, kind: ParamKind| {
            specs.push((format!("{name}.{}", kind.suffix()), shape, kind));
            specs.len() - 1
        };
        let mut unit = |prefix: &str, cin: usize, cout: usize, k: usize| {
            let conv = ConvP {
                w: push(format!("{prefix}.conv"), vec![cout, cin, k, k], ParamKind::ConvWeight),
                b: push(format!("{prefix}.conv"), vec![cout], ParamKind::ConvBias),
                cin,
                cout,
                k,
            };
            let bn = BnP {
                gamma: push(format!("{prefix}.bn"), vec![cout], ParamKind::BnScale),
                beta: push(format!("{prefix}.bn"), vec![cout], ParamKind::BnShift),
                mean: push(format!("{prefix}.bn"), vec![cout], ParamKind::RunningMean),
                var: push(format!("{prefix}.bn"), vec![cout], ParamKind::RunningVar),
            };
            UnitP { conv, bn }
        };
        let ch = &config.channels;
        let k = config.kernel_size;
        let mut enc = Vec::new();
        let mut cin = 1;
        for (l, &c) in ch.iter().enumerate() {
            enc.push([
                unit(&format!("enc{l}.1"), cin, c, k),
                unit(&format!("enc{l}.2"), c, c, k),
            ]);
            cin = c;
        }
        let mut up = Vec::new();
        let mut dec = Vec::new();
        for l in 0..config.depth - 1 {
            up.push(unit(&format!("dec{l}.up"), ch[l + 1], ch[l], k));
            dec.push([
                unit(&format!("dec{l}.1"), 2 * ch[l], ch[l], k),
                unit(&format!("dec{l}.2"), ch[l], ch[l], k),
            ]);
        }
        let head = ConvP {
            w: push("head.conv".into(), vec![config.num_classes, ch[0], 1, 1], ParamKind::ConvWeight),
            b: push("head.conv".into(), vec![config.num_classes], ParamKind::ConvBias),
            cin: ch[0],
            cout: config.num_classes,
            k: 1,
        };
        Layout {
            enc,
            up,
            dec,
            head,
            specs,
        }
    }
}

/// All network parameters plus the optimizer step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightStore<T = f32> {
    pub config: NetworkConfig,
    pub tensors: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Real> WeightStore<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors
            .iter()
            .filter(|t| t.kind.trainable())
            .map(|t| t.data.len())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> WeightStore<U> {
        WeightStore {
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    kind: t.kind,
                    data: t.data.iter().map(|v| U::lit(v.f64())).collect(),
                })
                .collect(),
            step: self.step,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Checks names, shapes and value constraints against the configuration.
    pub fn validate(&self) -> Result<()> {
        let layout = Layout::new(&self.config);
        if layout.specs.len() != self.tensors.len() {
            return Err(Error::shape(
                format!("{} tensors", layout.specs.len()),
                format!("{} tensors", self.tensors.len()),
            ));
        }
        for ((name, shape, _), t) in layout.specs.iter().zip(&self.tensors) {
            if *name != t.name || *shape != t.shape {
                return Err(Error::shape(
                    format!("{name} {shape:?}"),
                    format!("{} {:?}", t.name, t.shape),
                ));
            }
            if t.data.len() != shape.iter().product::<usize>() {
                return Err(Error::shape(format!("{name} payload"), t.data.len()));
            }
            if t.kind == ParamKind::RunningVar && t.data.iter().any(|v| *v <= T::zero()) {
                return Err(Error::config(format!("{name} has a nonpositive variance")));
            }
        }
        if !self.all_finite() {
            return Err(Error::NonFinite("weight store".into()));
        }
        Ok(())
    }
}

/// Kaiming-normal convolution kernels (variance `2 / fan_in`), zero biases,
/// identity batch norm.
pub fn init_weights(config: &NetworkConfig, seed: u64) -> Result<WeightStore<f32>> {
    config.validate()?;
    let layout = Layout::new(config);
    let mut rng = rng_from(seed);
    let tensors = layout
        .specs
        .into_iter()
        .map(|(name, shape, kind)| {
            let len = shape.iter().product();
            let data = match kind {
                ParamKind::ConvWeight => {
                    let fan_in: usize = shape[1..].iter().product();
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                    (0..len).map(|_| normal.sample(&mut rng) as f32).collect()
                }
                ParamKind::BnScale | ParamKind::RunningVar => vec![1.0; len],
                ParamKind::ConvBias | ParamKind::BnShift | ParamKind::RunningMean => vec![0.0; len],
            };
            Tensor { name, shape, kind, data }
        })
        .collect();
    Ok(WeightStore {
        config: config.clone(),
        tensors,
        step: 0,
    })
}

pub fn encode_weights(store: &WeightStore<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.tensors.len() as u32).to_le_bytes());
    for t in &store.tensors {
        out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(t.shape.len() as u8);
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::format("weight file", "truncated"))?;
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parses a weight file and checks it against `config`.
pub fn decode_weights(bytes: &[u8], config: &NetworkConfig) -> Result<WeightStore<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::format("weight file", "bad magic"));
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::format("weight file", format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let layout = Layout::new(config);
    let mut tensors = Vec::with_capacity(count);
    for i in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format("weight file", "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = r
            .take(n * 4)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let kind = layout
            .specs
            .get(i)
            .map(|s| s.2)
            .ok_or_else(|| Error::shape(format!("{} tensors", layout.specs.len()), count))?;
        tensors.push(Tensor { name, shape, kind, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::format("weight file", "trailing bytes"));
    }
    let store = WeightStore {
        config: config.clone(),
        tensors,
        step: 0,
    };
    store.validate()?;
    Ok(store)
}

pub fn save_weights(path: &Path, store: &WeightStore<f32>) -> Result<()> {
    io::write_atomic(path, &encode_weights(store))
}

pub fn load_weights(path: &Path, config: &NetworkConfig) -> Result<WeightStore<f32>> {
    decode_weights(&io::read_bytes(path)?, config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let cfg = NetworkConfig::default();
        assert_eq!(init_weights(&cfg, 5).unwrap(), init_weights(&cfg, 5).unwrap());
        assert_ne!(init_weights(&cfg, 5).unwrap(), init_weights(&cfg, 6).unwrap());
    }

    #[test]
    fn kaiming_variance() {
        let store = init_weights(&NetworkConfig::default(), 1).unwrap();
        let mut checked = 0;
        for t in store.tensors.iter().filter(|t| t.kind == ParamKind::ConvWeight) {
            if t.data.len() < 1000 {
                continue;
            }
            let fan_in: usize = t.shape[1..].iter().product();
            let n = t.data.len() as f64;
            let mean = t.data.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = t.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
            let target = 2.0 / fan_in as f64;
            assert!((var / target - 1.0).abs() < 0.2, "{}: {var} vs {target}", t.name);
            checked += 1;
        }
        assert!(checked > 10);
    }

    #[test]
    fn biases_zero_and_bn_identity() {
        let store = init_weights(&NetworkConfig::default(), 1).unwrap();
        for t in &store.tensors {
            let expect = match t.kind {
                ParamKind::ConvBias | ParamKind::BnShift | ParamKind::RunningMean => Some(0.0),
                ParamKind::BnScale | ParamKind::RunningVar => Some(1.0),
                ParamKind::ConvWeight => None,
            };
            if let Some(e) = expect {
                assert!(t.data.iter().all(|&v| v == e), "{}", t.name);
            }
        }
    }

    #[test]
    fn weight_file_roundtrip_and_header() {
        let cfg = NetworkConfig::micro();
        let store = init_weights(&cfg, 3).unwrap();
        let bytes = encode_weights(&store);
        assert_eq!(&bytes[..4], b"BUNW");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(
            u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize,
            store.tensors.len()
        );
        assert_eq!(decode_weights(&bytes, &cfg).unwrap(), store);
        assert!(decode_weights(&bytes[..bytes.len() - 1], &cfg).is_err());
        assert!(decode_weights(&bytes, &NetworkConfig::default()).is_err());
    }
}
