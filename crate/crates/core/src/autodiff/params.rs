use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use rand::Rng;

use super::{AutodiffError, Result, Tensor, Var};

/// First line of every parameter checkpoint.
pub const CHECKPOINT_MAGIC: &str = "SCENESYNTH-PARAMS 1";

/// Named parameters in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl Params {
    pub fn new() -> Params {
        Params::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(AutodiffError::DuplicateParam(name.to_string()));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), value));
        Ok(())
    }

    /// Adds a weight of `shape` drawn uniformly from `±sqrt(6 / (fan_in + fan_out))`.
    pub fn init_xavier<R: Rng>(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Result<()> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.insert(name, Tensor::new(shape, data)?)
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Writes the checkpoint container:
    ///
    /// ```text
    /// SCENESYNTH-PARAMS 1
    /// <count>
    /// <name> <d0>x<d1>x... <offset> <len>     (one line per parameter; "scalar" for rank 0)
    /// END
    /// <payload: little-endian f64, parameters back to back; offsets count values>
    /// ```
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut header = format!("{CHECKPOINT_MAGIC}\n{}\n", self.entries.len());
        let mut offset = 0;
        for (name, t) in &self.entries {
            let shape = if t.shape().is_empty() {
                "scalar".to_string()
            } else {
                t.shape().iter().map(usize::to_string).collect::<Vec<_>>().join("x")
            };
            header.push_str(&format!("{name} {shape} {offset} {}\n", t.len()));
            offset += t.len();
        }
        header.push_str("END\n");
        w.write_all(header.as_bytes())?;
        let mut buf = Vec::with_capacity(offset * 8);
        for (_, t) in &self.entries {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf)
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_checkpoint(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_checkpoint<R: BufRead>(mut r: R) -> Result<Params> {
        let bad = |m: String| AutodiffError::Checkpoint(m);
        let mut line = String::new();
        let mut next_line = |r: &mut R| -> Result<String> {
            line.clear();
            let n = r.read_line(&mut line).map_err(|e| bad(e.to_string()))?;
            if n == 0 {
                return Err(bad("unexpected end of header".into()));
            }
            Ok(line.trim_end_matches('\n').to_string())
        };
        let magic = next_line(&mut r)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(bad(format!("unsupported header {magic:?}")));
        }
        let count: usize = next_line(&mut r)?.parse().map_err(|_| bad("bad parameter count".into()))?;
        let mut specs = Vec::with_capacity(count);
        let mut expected_offset = 0;
        for _ in 0..count {
            let l = next_line(&mut r)?;
            let parts: Vec<&str> = l.split(' ').collect();
            let [name, shape, offset, len] = parts[..] else {
                return Err(bad(format!("malformed entry {l:?}")));
            };
            let shape: Vec<usize> = if shape == "scalar" {
                vec![]
            } else {
                shape
                    .split('x')
                    .map(str::parse)
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad(format!("bad shape in {l:?}")))?
            };
            let offset: usize = offset.parse().map_err(|_| bad(format!("bad offset in {l:?}")))?;
            let len: usize = len.parse().map_err(|_| bad(format!("bad length in {l:?}")))?;
            if offset != expected_offset || len != shape.iter().product::<usize>() {
                return Err(bad(format!("inconsistent entry {l:?}")));
            }
            expected_offset += len;
            specs.push((name.to_string(), shape));
        }
        if next_line(&mut r)? != "END" {
            return Err(bad("missing END marker".into()));
        }
        let mut payload = Vec::new();
        r.read_to_end(&mut payload).map_err(|e| bad(e.to_string()))?;
        if payload.len() != expected_offset * 8 {
            return Err(bad(format!(
                "payload has {} bytes, header describes {}",
                payload.len(),
                expected_offset * 8
            )));
        }
        let mut values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        let mut params = Params::new();
        for (name, shape) in specs {
            let n = shape.iter().product();
            let data: Vec<f64> = values.by_ref().take(n).collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(bad(format!("non-finite value in {name}")));
            }
            params.insert(&name, Tensor::new(&shape, data)?)?;
        }
        Ok(params)
    }

    /// Lowercase hex SHA-256 of the checkpoint bytes.
    pub fn hash_hex(&self) -> String {
        crate::hash::sha256_hex(&self.to_checkpoint_bytes())
    }
}

/// Gradients returned by [`super::Tape::backward`].
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_name: BTreeMap<String, Tensor>,
    pub(super) leaves: HashMap<Var, Tensor>,
}

impl Gradients {
    pub(super) fn insert(&mut self, name: String, g: Tensor) {
        self.by_name.insert(name, g);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    /// Gradient of an unnamed leaf created with [`super::Tape::leaf`].
    pub fn leaf(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.by_name.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Adds `other` into `self`, parameter by parameter.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (name, g) in &other.by_name {
            match self.by_name.get_mut(name) {
                Some(acc) => acc.add_assign(g),
                None => {
                    self.by_name.insert(name.clone(), g.clone());
                }
            }
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.by_name.values().flat_map(|t| t.data()).map(|v| v * v).sum()
    }
}

/// SGD with classical momentum: `v <- mu * v - lr * g; p <- p + v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: HashMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Sgd {
        Sgd { lr, momentum, velocity: HashMap::new() }
    }

    pub fn velocity(&self, name: &str) -> Option<&[f64]> {
        self.velocity.get(name).map(Vec::as_slice)
    }

    /// Applies one update to every parameter that has a gradient; parameters
    /// missing from `grads` are left alone.
    pub fn step(&mut self, params: &mut Params, grads: &Gradients) -> Result<()> {
        for (name, g) in grads.iter() {
            let p = params.get_mut(name).ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))?;
            if p.shape() != g.shape() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "sgd",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            let v = self.velocity.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *vv = self.momentum * *vv - self.lr * gv;
                *pv += *vv;
            }
            if !p.is_finite() {
                return Err(AutodiffError::NumericFailure { op: "sgd" });
            }
        }
        Ok(())
    }
}
