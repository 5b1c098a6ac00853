//! Named detector weights and the `ADVF` checkpoint container.
//!
//! Layout (little-endian): magic `ADVF`, `u32` version, `u32` length plus
//! UTF-8 JSON of the [`DetectorConfig`], `u32` tensor count, then per tensor
//! `u32` name length, name, `u32` rank, `u64` dims, and `f64` payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::DetectorConfig;
use crate::autodiff::{Graph, Value};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ADVF";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorParams {
    pub config: DetectorConfig,
    tensors: BTreeMap<String, Tensor>,
}

/// `(name, shape, fan_in)` for every conv layer; fan-in 0 marks zero init.
fn layout(cfg: &DetectorConfig) -> Vec<(String, Vec<usize>, usize)> {
    let [c1, c2] = cfg.image_channels;
    let (bc, fc) = (cfg.bev_channels, cfg.fuse_channels);
    let a = cfg.anchors_per_cell();
    let mut convs: Vec<(&str, usize, usize, usize, bool)> = vec![
        ("img.c1", c1, 3, 3, false),
        ("img.c2", c2, c1, 3, false),
        ("img.r1a", c2, c2, 3, false),
        ("img.r1b", c2, c2, 3, false),
    ];
    let half = (c2 / 2).max(1);
    if cfg.nonlocal {
        convs.extend([
            ("img.nl.theta", half, c2, 1, false),
            ("img.nl.phi", half, c2, 1, false),
            ("img.nl.g", half, c2, 1, false),
            ("img.nl.out", c2, half, 1, true),
        ]);
    }
    convs.extend([
        ("bev.c1", bc, cfg.z_slices, 3, false),
        ("bev.c2", fc, bc + c2, 3, false),
        ("bev.c3", fc, fc, 3, false),
        ("bev.c4", fc, fc, 3, false),
        ("head.cls", a, fc, 1, false),
        ("head.reg", 5 * a, fc, 1, false),
    ]);
    let mut out = Vec::new();
    for (name, cout, cin, k, zero) in convs {
        out.push((format!("{name}.w"), vec![cout, cin, k, k], if zero { 0 } else { cin * k * k }));
        out.push((format!("{name}.b"), vec![cout], 0));
    }
    out
}

/// Prior probability behind the classification bias initialization.
const PRIOR: f64 = 0.01;

impl DetectorParams {
    /// He-normal weights, zero biases, classification bias at a low prior.
    pub fn init(config: &DetectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, shape, fan_in) in layout(config) {
            let n: usize = shape.iter().product();
            let data = if fan_in > 0 {
                let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            } else if name == "head.cls.b" {
                vec![-((1.0 - PRIOR) / PRIOR).ln(); n]
            } else {
                vec![0.0; n]
            };
            tensors.insert(name, Tensor::new(&shape, data)?);
        }
        Ok(DetectorParams { config: config.clone(), tensors })
    }

    /// Same layout with every entry zero.
    pub fn zeros(config: &DetectorConfig) -> Result<Self> {
        config.validate()?;
        let tensors = layout(config).into_iter().map(|(n, s, _)| (n, Tensor::zeros(&s))).collect();
        Ok(DetectorParams { config: config.clone(), tensors })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.tensors.values_mut().collect()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    /// Adds the non-local block (zero output projection) to a model trained
    /// without it; existing weights are kept.
    pub fn with_nonlocal(&self, seed: u64) -> Result<Self> {
        let cfg = DetectorConfig { nonlocal: true, ..self.config.clone() };
        let mut fresh = DetectorParams::init(&cfg, seed)?;
        for (k, v) in &self.tensors {
            fresh.tensors.insert(k.clone(), v.clone());
        }
        Ok(fresh)
    }

    /// Graph values for every tensor, trainable or constant.
    pub fn bind<'g>(&self, g: &'g Graph, trainable: bool) -> BoundParams<'g> {
        let values = self
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), if trainable { g.param(t.clone()) } else { g.constant(t.clone()) }))
            .collect();
        BoundParams { values }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let cfg = serde_json::to_vec(&self.config)?;
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(&cfg);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {version}")));
        }
        let n = r.u32()? as usize;
        let config: DetectorConfig = serde_json::from_slice(r.take(n)?)?;
        let count = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::format("checkpoint", "bad name"))?;
            let rank = r.u32()? as usize;
            let shape: Vec<usize> = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
            let numel: usize = shape.iter().product();
            let data = r.take(8 * numel)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.insert(name, Tensor::new(&shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::format("checkpoint", "trailing bytes"));
        }
        let expected: Vec<(String, Vec<usize>)> = layout(&config).into_iter().map(|(n, s, _)| (n, s)).collect();
        let mut got: Vec<(String, Vec<usize>)> = tensors.iter().map(|(k, t)| (k.clone(), t.shape().to_vec())).collect();
        got.sort();
        let mut want = expected;
        want.sort();
        if got != want {
            return Err(Error::format("checkpoint", "tensor table does not match the stored configuration"));
        }
        Ok(DetectorParams { config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format("checkpoint", "truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parameters bound into one graph.
pub struct BoundParams<'g> {
    values: BTreeMap<String, Value<'g>>,
}

impl<'g> BoundParams<'g> {
    pub fn get(&self, name: &str) -> Result<Value<'g>> {
        self.values.get(name).copied().ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    /// Gradients in name order (zeros where unreachable).
    pub fn grads(&self, g: &Graph) -> Vec<Tensor> {
        self.values.values().map(|v| g.grad(*v).unwrap_or_else(|| Tensor::zeros(&v.shape()))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let cfg = DetectorConfig { nonlocal: true, ..DetectorConfig::micro() };
        let p = DetectorParams::init(&cfg, 9).unwrap();
        let bytes = p.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"ADVF");
        assert_eq!(DetectorParams::from_bytes(&bytes).unwrap(), p);
        assert!(DetectorParams::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(DetectorParams::from_bytes(&bad).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let cfg = DetectorConfig::micro();
        assert_eq!(DetectorParams::init(&cfg, 1).unwrap(), DetectorParams::init(&cfg, 1).unwrap());
        assert_ne!(DetectorParams::init(&cfg, 1).unwrap(), DetectorParams::init(&cfg, 2).unwrap());
    }

    #[test]
    fn nonlocal_output_starts_at_zero() {
        let p = DetectorParams::init(&DetectorConfig::micro(), 3).unwrap().with_nonlocal(4).unwrap();
        assert_eq!(p.get("img.nl.out.w").unwrap().max_abs(), 0.0);
        assert_eq!(p.get("img.c1.w").unwrap(), DetectorParams::init(&DetectorConfig::micro(), 3).unwrap().get("img.c1.w").unwrap());
    }
}
