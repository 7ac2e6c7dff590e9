//! Named parameter/buffer store, seeded initialization, and the versioned
//! binary checkpoint format.
//!
//! Checkpoints embed the digest of the model configuration that produced
//! them; loading refuses on a digest mismatch so activations can never be
//! recomputed under the wrong architecture.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use ndarray::IxDyn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

use super::graph::{Arr, Graph, Var};

const MAGIC: &[u8; 8] = b"IPLCKPT\0";
const FORMAT_VERSION: u32 = 1;

/// Trainable parameters plus non-trainable buffers (e.g. running
/// normalization statistics), both keyed by stable names.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: BTreeMap<String, Arr>,
    buffers: BTreeMap<String, Arr>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_param(&mut self, name: &str, value: Arr) {
        let prev = self.params.insert(name.to_string(), value);
        assert!(prev.is_none(), "duplicate parameter name {name}");
    }

    pub fn add_buffer(&mut self, name: &str, value: Arr) {
        let prev = self.buffers.insert(name.to_string(), value);
        assert!(prev.is_none(), "duplicate buffer name {name}");
    }

    pub fn param(&self, name: &str) -> &Arr {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn param_mut(&mut self, name: &str) -> &mut Arr {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn buffer(&self, name: &str) -> &Arr {
        self.buffers
            .get(name)
            .unwrap_or_else(|| panic!("missing buffer {name}"))
    }

    pub fn buffer_mut(&mut self, name: &str) -> &mut Arr {
        self.buffers
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing buffer {name}"))
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn param_names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn params(&self) -> &BTreeMap<String, Arr> {
        &self.params
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|a| a.len()).sum()
    }

    /// Absorb another set under a name prefix.
    pub fn merge_prefixed(&mut self, prefix: &str, other: ParamSet) {
        for (k, v) in other.params {
            self.add_param(&format!("{prefix}{k}"), v);
        }
        for (k, v) in other.buffers {
            self.add_buffer(&format!("{prefix}{k}"), v);
        }
    }

    /// Content digest over names, shapes, and raw values of parameters and
    /// buffers, in deterministic order.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for (kind, map) in [("p", &self.params), ("b", &self.buffers)] {
            for (name, arr) in map {
                hasher.update(kind.as_bytes());
                hasher.update(name.as_bytes());
                for d in arr.shape() {
                    hasher.update((*d as u64).to_le_bytes());
                }
                for v in arr.iter() {
                    hasher.update(v.to_le_bytes());
                }
            }
        }
        hex_string(&hasher.finalize())
    }

    /// Digest over a filtered subset of parameters/buffers (by name prefix).
    pub fn digest_prefix(&self, prefix: &str) -> String {
        let mut hasher = Sha256::new();
        for (kind, map) in [("p", &self.params), ("b", &self.buffers)] {
            for (name, arr) in map.iter().filter(|(n, _)| n.starts_with(prefix)) {
                hasher.update(kind.as_bytes());
                hasher.update(name.as_bytes());
                for d in arr.shape() {
                    hasher.update((*d as u64).to_le_bytes());
                }
                for v in arr.iter() {
                    hasher.update(v.to_le_bytes());
                }
            }
        }
        hex_string(&hasher.finalize())
    }

    pub fn save(&self, path: &Path, config_digest: &str) -> Result<()> {
        let mut out: Vec<u8> = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(config_digest.len() as u32).to_le_bytes());
        out.extend_from_slice(config_digest.as_bytes());
        let count = (self.params.len() + self.buffers.len()) as u64;
        out.extend_from_slice(&count.to_le_bytes());
        for (kind, map) in [(0u8, &self.params), (1u8, &self.buffers)] {
            for (name, arr) in map {
                out.push(kind);
                out.extend_from_slice(&(name.len() as u32).to_le_bytes());
                out.extend_from_slice(name.as_bytes());
                out.extend_from_slice(&(arr.ndim() as u32).to_le_bytes());
                for d in arr.shape() {
                    out.extend_from_slice(&(*d as u64).to_le_bytes());
                }
                for v in arr.iter() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path, expected_config_digest: &str) -> Result<Self> {
        let mut file = std::fs::File::open(path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };

        let magic = cur.take(8)?;
        if magic != MAGIC {
            return Err(Error::Store(format!("{}: not a checkpoint file", path.display())));
        }
        let version = cur.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion(version));
        }
        let dlen = cur.u32()? as usize;
        let digest = String::from_utf8_lossy(cur.take(dlen)?).to_string();
        if digest != expected_config_digest {
            return Err(Error::DigestMismatch {
                expected: expected_config_digest.to_string(),
                found: digest,
            });
        }
        let count = cur.u64()?;
        let mut set = ParamSet::new();
        for _ in 0..count {
            let kind = cur.take(1)?[0];
            let nlen = cur.u32()? as usize;
            let name = String::from_utf8_lossy(cur.take(nlen)?).to_string();
            let ndim = cur.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(cur.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(cur.f64()?);
            }
            let arr = Arr::from_shape_vec(IxDyn(&shape), data)
                .map_err(|e| Error::Store(format!("bad tensor shape in checkpoint: {e}")))?;
            match kind {
                0 => set.add_param(&name, arr),
                1 => set.add_buffer(&name, arr),
                k => return Err(Error::Store(format!("unknown entry kind {k}"))),
            }
        }
        Ok(set)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Store("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Seeded fan-in-scaled uniform initializer.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Arr {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        Arr::from_shape_vec(IxDyn(shape), data).unwrap()
    }

    /// Weight and bias bound `1/sqrt(fan_in)`.
    pub fn fan_in(&mut self, shape: &[usize], fan_in: usize) -> Arr {
        self.uniform(shape, 1.0 / (fan_in as f64).sqrt())
    }
}

/// Parameter leaves inserted into a graph for one forward/backward pass.
pub struct Leaves {
    vars: BTreeMap<String, Var>,
    trainable: bool,
}

impl Leaves {
    /// Insert every parameter of `set` as a leaf. `trainable` controls
    /// whether gradients are requested (frozen prefixes pass `false`).
    pub fn load(g: &mut Graph, set: &ParamSet, trainable: bool) -> Self {
        let mut vars = BTreeMap::new();
        for (name, value) in &set.params {
            vars.insert(name.clone(), g.leaf(value.clone(), trainable));
        }
        Leaves { vars, trainable }
    }

    /// Insert parameters with a name prefix filter; used to combine a frozen
    /// prefix with a trainable suffix in one graph.
    pub fn load_partitioned(
        g: &mut Graph,
        set: &ParamSet,
        is_trainable: impl Fn(&str) -> bool,
    ) -> Self {
        let mut vars = BTreeMap::new();
        for (name, value) in &set.params {
            vars.insert(name.clone(), g.leaf(value.clone(), is_trainable(name)));
        }
        Leaves { vars, trainable: true }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("missing leaf {name}"))
    }

    /// Collect gradients for all leaves that received one.
    pub fn gradients(&self, grads: &mut super::graph::Gradients) -> BTreeMap<String, Arr> {
        let mut out = BTreeMap::new();
        if !self.trainable {
            return out;
        }
        for (name, var) in &self.vars {
            if let Some(g) = grads.take(*var) {
                out.insert(name.clone(), g);
            }
        }
        out
    }
}
