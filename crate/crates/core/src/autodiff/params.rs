use std::fs;
use std::io::{self, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::tensor::Real;
use crate::archgraph::{ArchitectureGraph, Node};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One trainable array with its gradient and ADAM moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Real> Param<T> {
    fn new(name: String, value: Vec<T>) -> Self {
        let n = value.len();
        Self {
            name,
            value,
            grad: vec![T::zero(); n],
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
        }
    }
}

/// Indices into [`ParamStore::params`] owned by one graph node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeParams {
    pub weight: usize,
    pub bias: usize,
    pub norm: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    pub params: Vec<Param<T>>,
    /// Per graph node, the parameters it owns.
    pub slots: Vec<Option<NodeParams>>,
    pub step: u64,
}

fn fan_in(graph: &ArchitectureGraph, node: &Node) -> usize {
    node.in_channels(graph) * node.spec.filter_size * node.spec.filter_size
}

/// Bound of the uniform initializer for a layer with the given fan-in.
pub fn init_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

impl<T: Real> ParamStore<T> {
    /// Fan-in scaled uniform initialization: weights and biases drawn from
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`; normalization scale 1, shift 0.
    pub fn init(graph: &ArchitectureGraph, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut slots = Vec::with_capacity(graph.nodes.len());
        for node in &graph.nodes {
            if !node.spec.kind.has_conv() {
                slots.push(None);
                continue;
            }
            let fi = fan_in(graph, node);
            let bound = init_bound(fi);
            let out = node.spec.out_channels;
            let mut draw = |len: usize| -> Vec<T> {
                (0..len)
                    .map(|_| T::of(rng.gen_range(-bound..bound)))
                    .collect()
            };
            let w = draw(out * fi);
            let b = draw(out);
            let weight = params.len();
            params.push(Param::new(format!("{}.weight", node.label), w));
            params.push(Param::new(format!("{}.bias", node.label), b));
            let norm = node.spec.normalize.then(|| {
                let g = params.len();
                params.push(Param::new(format!("{}.gamma", node.label), vec![T::one(); out]));
                params.push(Param::new(format!("{}.beta", node.label), vec![T::zero(); out]));
                (g, g + 1)
            });
            slots.push(Some(NodeParams {
                weight,
                bias: weight + 1,
                norm,
            }));
        }
        Self {
            params,
            slots,
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    /// One bias-corrected ADAM update over every parameter, then clears the
    /// gradients.
    pub fn adam_step(&mut self, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::of(ADAM_BETA1);
        let b2 = T::of(ADAM_BETA2);
        let c1 = T::one() - b1;
        let c2 = T::one() - b2;
        let bc1 = T::of(1.0 - ADAM_BETA1.powi(t));
        let bc2 = T::of(1.0 - ADAM_BETA2.powi(t));
        let lr = T::of(lr);
        let eps = T::of(ADAM_EPS);
        for p in &mut self.params {
            for i in 0..p.value.len() {
                let g = p.grad[i];
                p.m[i] = b1 * p.m[i] + c1 * g;
                p.v[i] = b2 * p.v[i] + c2 * g * g;
                let m_hat = p.m[i] / bc1;
                let v_hat = p.v[i] / bc2;
                p.value[i] = p.value[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
            p.grad.fill(T::zero());
        }
    }

    /// Writes every parameter as raw little-endian values to `params.bin`
    /// with a `manifest.json` describing offsets.
    pub fn dump(&self, dir: &Path) -> io::Result<()> {
        #[derive(Serialize)]
        struct Entry<'a> {
            name: &'a str,
            offset: usize,
            len: usize,
        }
        #[derive(Serialize)]
        struct Manifest<'a> {
            dtype: &'static str,
            step: u64,
            params: Vec<Entry<'a>>,
        }
        fs::create_dir_all(dir)?;
        let width = std::mem::size_of::<T>();
        let mut bin = io::BufWriter::new(fs::File::create(dir.join("params.bin"))?);
        let mut entries = Vec::new();
        let mut offset = 0;
        for p in &self.params {
            for v in &p.value {
                let x = v.to_f64().unwrap();
                if width == 4 {
                    bin.write_all(&(x as f32).to_le_bytes())?;
                } else {
                    bin.write_all(&x.to_le_bytes())?;
                }
            }
            entries.push(Entry {
                name: &p.name,
                offset,
                len: p.value.len(),
            });
            offset += p.value.len() * width;
        }
        bin.flush()?;
        let manifest = Manifest {
            dtype: if width == 4 { "f32" } else { "f64" },
            step: self.step,
            params: entries,
        };
        fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest).map_err(io::Error::other)?,
        )
    }
}
