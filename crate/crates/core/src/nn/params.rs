//! Flat parameter storage with named segments.
//!
//! All trainable parameters of a model live in one contiguous vector;
//! layers hold `ParamId` handles into it. Gradients use an identically laid
//! out buffer, which makes optimizer steps, accumulation across task
//! branches and parameter hashing trivial.

use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
    pub frozen: bool,
}

#[derive(Debug, Clone)]
pub struct ParamSet<S> {
    entries: Vec<ParamEntry>,
    data: Vec<S>,
}

#[derive(Debug, Clone, Copy)]
pub enum InitKind {
    /// Kaiming-uniform with the given fan-in.
    HeUniform { fan_in: usize },
    Constant(f64),
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            data: Vec::new(),
        }
    }

    pub fn register(
        &mut self,
        name: &str,
        shape: &[usize],
        init: InitKind,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let len: usize = shape.iter().product();
        let offset = self.data.len();
        match init {
            InitKind::HeUniform { fan_in } => {
                let bound = (6.0 / fan_in.max(1) as f64).sqrt();
                for _ in 0..len {
                    let v: f64 = rng.random_range(-bound..bound);
                    self.data.push(S::from_f64(v));
                }
            }
            InitKind::Constant(c) => {
                self.data.extend(std::iter::repeat(S::from_f64(c)).take(len));
            }
        }
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            offset,
            len,
            frozen: false,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn slice(&self, id: ParamId) -> &[S] {
        let e = &self.entries[id.0];
        &self.data[e.offset..e.offset + e.len]
    }

    pub fn slice_mut(&mut self, id: ParamId) -> &mut [S] {
        let e = &self.entries[id.0];
        &mut self.data[e.offset..e.offset + e.len]
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Count of parameters, optionally restricted to trainable ones.
    pub fn count(&self, trainable_only: bool) -> usize {
        self.entries
            .iter()
            .filter(|e| !(trainable_only && e.frozen))
            .map(|e| e.len)
            .sum()
    }

    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) {
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.frozen = frozen;
            }
        }
    }

    /// Per-element mask: true where the owning segment is frozen.
    pub fn frozen_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.data.len()];
        for e in &self.entries {
            if e.frozen {
                mask[e.offset..e.offset + e.len].fill(true);
            }
        }
        mask
    }

    /// SHA-256 over the parameter values (as little-endian f64 bits), stable
    /// across scalar types for equal values.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for v in &self.data {
            hasher.update(v.as_f64().to_le_bytes());
        }
        hasher.finalize().into()
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }
}

impl<S: Scalar> Default for ParamSet<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient buffer laid out exactly like a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct GradBuf<S> {
    data: Vec<S>,
}

impl<S: Scalar> GradBuf<S> {
    pub fn zeros_like(params: &ParamSet<S>) -> Self {
        Self {
            data: vec![S::zero(); params.len()],
        }
    }

    pub fn slice_mut(&mut self, params: &ParamSet<S>, id: ParamId) -> &mut [S] {
        let e = params.entry(id);
        &mut self.data[e.offset..e.offset + e.len]
    }

    pub fn slice(&self, params: &ParamSet<S>, id: ParamId) -> &[S] {
        let e = params.entry(id);
        &self.data[e.offset..e.offset + e.len]
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn add_assign(&mut self, other: &GradBuf<S>) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, s: S) {
        for v in &mut self.data {
            *v *= s;
        }
    }
}

/// Kinds of layers a model is assembled from; used for structural
/// introspection (e.g. asserting the absence of max-pooling).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    GroupNorm,
    Relu,
    UpsampleNearest,
    GlobalAvgPool,
    MaxPool,
    Add,
}

#[derive(Debug, Clone)]
pub struct LayerInfo {
    pub name: String,
    pub kind: LayerKind,
}

/// Registration context used while building a model: owns the parameter set,
/// the init RNG and the layer inventory.
pub struct ParamReg<'a, S> {
    pub params: &'a mut ParamSet<S>,
    pub rng: &'a mut ChaCha8Rng,
    pub layers: &'a mut Vec<LayerInfo>,
}

impl<'a, S: Scalar> ParamReg<'a, S> {
    pub fn note_layer(&mut self, name: &str, kind: LayerKind) {
        self.layers.push(LayerInfo {
            name: name.to_string(),
            kind,
        });
    }
}
