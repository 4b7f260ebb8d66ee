//! Named-tensor checkpoints, model-graph metadata and layer surgery.
//!
//! A checkpoint holds every tensor of a micro-transformer (pre-norm decoder:
//! causal attention, gated MLP, learned positions, weight-tied output head)
//! together with a graph that marks each fully-connected slot as dense or
//! factored. Surgery swaps dense slots for factored pairs (or advances
//! existing pairs to a smaller rank) and never touches anything else.

mod format;
mod forward;

pub use format::file_digest;
pub(crate) use forward::forward_cached;
pub(crate) use forward::SeqCache;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factorize::{progressive_step, truncated_factor, FactoredPair};
use crate::linalg::{kernels, DenseMatrix};
use crate::planner::{LayerSpec, ModuleKind, PlanStep, SlotCost};

/// Core dimensions of the micro-transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphDims {
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub vocab: usize,
    pub max_seq_len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    Full,
    /// Single shared K/V head; K and V slots are never compressed.
    MultiQuery,
}

/// Fully-connected slots inside one transformer block, in layout order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotKind {
    Q,
    K,
    V,
    O,
    Up,
    Gate,
    Down,
}

impl SlotKind {
    pub const ALL: [SlotKind; 7] = [
        SlotKind::Q,
        SlotKind::K,
        SlotKind::V,
        SlotKind::O,
        SlotKind::Up,
        SlotKind::Gate,
        SlotKind::Down,
    ];

    pub fn module_kind(self) -> ModuleKind {
        match self {
            SlotKind::Q => ModuleKind::AttentionQ,
            SlotKind::K => ModuleKind::AttentionK,
            SlotKind::V => ModuleKind::AttentionV,
            SlotKind::O => ModuleKind::AttentionO,
            SlotKind::Up => ModuleKind::MlpUp,
            SlotKind::Gate => ModuleKind::MlpGate,
            SlotKind::Down => ModuleKind::MlpDown,
        }
    }

    fn name_suffix(self) -> &'static str {
        match self {
            SlotKind::Q => "attn.q",
            SlotKind::K => "attn.k",
            SlotKind::V => "attn.v",
            SlotKind::O => "attn.o",
            SlotKind::Up => "mlp.up",
            SlotKind::Gate => "mlp.gate",
            SlotKind::Down => "mlp.down",
        }
    }
}

/// Whether a slot currently holds one dense tensor or a factored pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum SlotState {
    Dense,
    Factored { rank: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSlots {
    pub q: SlotState,
    pub k: SlotState,
    pub v: SlotState,
    pub o: SlotState,
    pub up: SlotState,
    pub gate: SlotState,
    pub down: SlotState,
}

impl BlockSlots {
    fn all_dense() -> Self {
        BlockSlots {
            q: SlotState::Dense,
            k: SlotState::Dense,
            v: SlotState::Dense,
            o: SlotState::Dense,
            up: SlotState::Dense,
            gate: SlotState::Dense,
            down: SlotState::Dense,
        }
    }

    pub fn get(&self, kind: SlotKind) -> SlotState {
        match kind {
            SlotKind::Q => self.q,
            SlotKind::K => self.k,
            SlotKind::V => self.v,
            SlotKind::O => self.o,
            SlotKind::Up => self.up,
            SlotKind::Gate => self.gate,
            SlotKind::Down => self.down,
        }
    }

    fn set(&mut self, kind: SlotKind, state: SlotState) {
        match kind {
            SlotKind::Q => self.q = state,
            SlotKind::K => self.k = state,
            SlotKind::V => self.v = state,
            SlotKind::O => self.o = state,
            SlotKind::Up => self.up = state,
            SlotKind::Gate => self.gate = state,
            SlotKind::Down => self.down = state,
        }
    }
}

/// Architecture metadata: dimensions, attention mode and per-slot state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelGraph {
    pub dims: GraphDims,
    pub attention_mode: AttentionMode,
    pub blocks: Vec<BlockSlots>,
}

/// One tensor the graph expects in the checkpoint.
#[derive(Debug, Clone)]
pub struct TensorDecl {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ModelGraph {
    pub fn new(dims: GraphDims, attention_mode: AttentionMode) -> Result<Self> {
        if dims.d_model == 0 || dims.d_ff == 0 || dims.n_layers == 0 || dims.n_heads == 0 {
            return Err(Error::InvalidInput("graph dimensions must be positive".into()));
        }
        if dims.vocab < 2 || dims.max_seq_len < 2 {
            return Err(Error::InvalidInput("vocab and max_seq_len must be at least 2".into()));
        }
        if dims.d_model % dims.n_heads != 0 {
            return Err(Error::InvalidInput(format!(
                "d_model {} not divisible by n_heads {}",
                dims.d_model, dims.n_heads
            )));
        }
        Ok(ModelGraph {
            dims,
            attention_mode,
            blocks: vec![BlockSlots::all_dense(); dims.n_layers],
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dims.d_model / self.dims.n_heads
    }

    /// Width of the K/V projections: `d_model` normally, one head under
    /// multi-query attention.
    pub fn kv_dim(&self) -> usize {
        match self.attention_mode {
            AttentionMode::Full => self.dims.d_model,
            AttentionMode::MultiQuery => self.head_dim(),
        }
    }

    /// `(d_in, d_out)` of a slot kind.
    pub fn slot_shape(&self, kind: SlotKind) -> (usize, usize) {
        let d = self.dims.d_model;
        let f = self.dims.d_ff;
        match kind {
            SlotKind::Q | SlotKind::O => (d, d),
            SlotKind::K | SlotKind::V => (d, self.kv_dim()),
            SlotKind::Up | SlotKind::Gate => (d, f),
            SlotKind::Down => (f, d),
        }
    }

    pub fn slot_base_name(block: usize, kind: SlotKind) -> String {
        format!("blocks.{block}.{}", kind.name_suffix())
    }

    fn slot_compressible(&self, kind: SlotKind) -> bool {
        match kind {
            SlotKind::K | SlotKind::V => self.attention_mode == AttentionMode::Full,
            _ => true,
        }
    }

    /// Canonical tensor order: embeddings, then per-block norms and slots,
    /// then the final norm. Factored slots contribute two tensors named
    /// `<base>.w0` and `<base>.w1`.
    pub fn tensor_decls(&self) -> Vec<TensorDecl> {
        let d = self.dims.d_model;
        let mut out = vec![
            TensorDecl { name: "embed.tok".into(), shape: vec![self.dims.vocab, d] },
            TensorDecl { name: "embed.pos".into(), shape: vec![self.dims.max_seq_len, d] },
        ];
        for (b, block) in self.blocks.iter().enumerate() {
            out.push(TensorDecl { name: format!("blocks.{b}.norm_attn"), shape: vec![d] });
            for kind in [SlotKind::Q, SlotKind::K, SlotKind::V, SlotKind::O] {
                self.push_slot_decls(&mut out, b, kind, block.get(kind));
            }
            out.push(TensorDecl { name: format!("blocks.{b}.norm_mlp"), shape: vec![d] });
            for kind in [SlotKind::Up, SlotKind::Gate, SlotKind::Down] {
                self.push_slot_decls(&mut out, b, kind, block.get(kind));
            }
        }
        out.push(TensorDecl { name: "final_norm".into(), shape: vec![d] });
        out
    }

    fn push_slot_decls(&self, out: &mut Vec<TensorDecl>, block: usize, kind: SlotKind, state: SlotState) {
        let (d_in, d_out) = self.slot_shape(kind);
        let base = Self::slot_base_name(block, kind);
        match state {
            SlotState::Dense => out.push(TensorDecl { name: base, shape: vec![d_in, d_out] }),
            SlotState::Factored { rank } => {
                out.push(TensorDecl { name: format!("{base}.w0"), shape: vec![d_in, rank] });
                out.push(TensorDecl { name: format!("{base}.w1"), shape: vec![rank, d_out] });
            }
        }
    }

    /// FC slots as the planner sees them.
    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let mut out = Vec::new();
        for b in 0..self.blocks.len() {
            for kind in SlotKind::ALL {
                let (d_in, d_out) = self.slot_shape(kind);
                out.push(LayerSpec {
                    name: Self::slot_base_name(b, kind),
                    d_in,
                    d_out,
                    module_kind: kind.module_kind(),
                    compressible: self.slot_compressible(kind),
                });
            }
        }
        out
    }

    /// FC slots with their current factorization state, for cost accounting.
    pub fn slot_costs(&self) -> Vec<SlotCost> {
        let mut out = Vec::new();
        for (b, block) in self.blocks.iter().enumerate() {
            for kind in SlotKind::ALL {
                let (d_in, d_out) = self.slot_shape(kind);
                let rank = match block.get(kind) {
                    SlotState::Dense => None,
                    SlotState::Factored { rank } => Some(rank),
                };
                out.push(SlotCost { name: Self::slot_base_name(b, kind), d_in, d_out, rank });
            }
        }
        out
    }

    /// Parameter count of tensors outside the FC slots (embeddings, norms).
    pub fn non_slot_params(&self) -> u64 {
        let d = self.dims.d_model as u64;
        let embed = self.dims.vocab as u64 * d + self.dims.max_seq_len as u64 * d;
        let norms = (2 * self.dims.n_layers as u64 + 1) * d;
        embed + norms
    }
}

/// A named tensor; matrices are row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn elems(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn as_matrix(&self) -> Result<DenseMatrix> {
        if self.shape.len() != 2 {
            return Err(Error::Shape(format!("tensor has {} dims, expected 2", self.shape.len())));
        }
        DenseMatrix::new(self.shape[0], self.shape[1], self.data.clone())
    }

    pub fn from_matrix(m: DenseMatrix) -> Tensor {
        let shape = vec![m.rows(), m.cols()];
        Tensor { shape, data: m.into_data() }
    }

    /// The exact bytes this tensor serializes to (little-endian `f32`).
    pub fn payload_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 4);
        for &v in &self.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }
}

/// A named-tensor container plus graph metadata. Immutable in use: surgery
/// and training produce new checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub graph: ModelGraph,
    tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    /// Fresh checkpoint with N(0, init_std²) weights and unit norm scales,
    /// drawn in canonical tensor order from a seeded generator.
    pub fn new_seeded(graph: ModelGraph, seed: u64, init_std: f64) -> Result<Self> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, init_std).map_err(|e| Error::InvalidInput(e.to_string()))?;
        let mut tensors = BTreeMap::new();
        for decl in graph.tensor_decls() {
            let n: usize = decl.shape.iter().product();
            let data = if decl.name.contains("norm") {
                vec![1.0; n]
            } else {
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            };
            tensors.insert(decl.name, Tensor { shape: decl.shape, data });
        }
        Ok(Checkpoint { graph, tensors })
    }

    /// All-zero weights (norm scales included), mainly for tests.
    pub fn zeroed(graph: ModelGraph) -> Self {
        let mut tensors = BTreeMap::new();
        for decl in graph.tensor_decls() {
            let n: usize = decl.shape.iter().product();
            tensors.insert(decl.name, Tensor { shape: decl.shape, data: vec![0.0; n] });
        }
        Checkpoint { graph, tensors }
    }

    pub(crate) fn from_parts(graph: ModelGraph, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let ckpt = Checkpoint { graph, tensors };
        ckpt.validate()?;
        Ok(ckpt)
    }

    fn validate(&self) -> Result<()> {
        let decls = self.graph.tensor_decls();
        if decls.len() != self.tensors.len() {
            return Err(Error::Corruption(format!(
                "graph declares {} tensors, checkpoint holds {}",
                decls.len(),
                self.tensors.len()
            )));
        }
        for decl in decls {
            let t = self
                .tensors
                .get(&decl.name)
                .ok_or_else(|| Error::Corruption(format!("missing tensor {}", decl.name)))?;
            if t.shape != decl.shape {
                return Err(Error::Corruption(format!(
                    "shape drift for {}: header {:?}, graph {:?}",
                    decl.name, t.shape, decl.shape
                )));
            }
            if t.data.len() != t.elems() {
                return Err(Error::Corruption(format!("tensor {} length mismatch", decl.name)));
            }
        }
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub(crate) fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub(crate) fn expect_tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Corruption(format!("missing tensor {name}")))
    }

    pub fn tensor_names(&self) -> Vec<String> {
        self.graph.tensor_decls().into_iter().map(|d| d.name).collect()
    }

    pub(crate) fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    /// Exact total parameter count; factored slots contribute `R·(d_in+d_out)`.
    pub fn count_params(&self) -> u64 {
        self.tensors.values().map(|t| t.data.len() as u64).sum()
    }

    fn slot_pair(&self, base: &str) -> Result<FactoredPair> {
        let w0 = self.expect_tensor(&format!("{base}.w0"))?.as_matrix()?;
        let w1 = self.expect_tensor(&format!("{base}.w1"))?.as_matrix()?;
        let rank = w0.cols();
        if w1.rows() != rank {
            return Err(Error::Corruption(format!("factored pair {base} does not compose")));
        }
        Ok(FactoredPair { w0, w1, rank })
    }

    /// Applies one plan step: every targeted dense slot is replaced by a
    /// truncated factorization, every targeted already-factored slot is
    /// advanced by a progressive step, everything else is copied verbatim.
    pub fn apply_plan_step(&self, step: &PlanStep) -> Result<Checkpoint> {
        // Gather targets first so the factorizations can run in parallel.
        struct Target {
            block: usize,
            kind: SlotKind,
            base: String,
            rank: usize,
            current: SlotState,
        }

        let mut targets = Vec::new();
        for (b, block) in self.graph.blocks.iter().enumerate() {
            for kind in SlotKind::ALL {
                if !self.graph.slot_compressible(kind) {
                    continue;
                }
                let Some(rank) = step.rank_for(kind.module_kind()) else { continue };
                let (d_in, d_out) = self.graph.slot_shape(kind);
                let base = ModelGraph::slot_base_name(b, kind);
                if rank == 0 || rank > d_in.min(d_out) {
                    return Err(Error::PlanValidation(format!(
                        "rank {} exceeds min(d_in, d_out) = {} for layer {}",
                        rank,
                        d_in.min(d_out),
                        base
                    )));
                }
                let current = block.get(kind);
                if let SlotState::Factored { rank: prev } = current {
                    if rank > prev {
                        return Err(Error::PlanValidation(format!(
                            "rank {rank} for layer {base} increases over current rank {prev}"
                        )));
                    }
                }
                targets.push(Target { block: b, kind, base, rank, current });
            }
        }

        enum Work {
            Dense(DenseMatrix),
            Pair(FactoredPair),
        }

        let inputs: Vec<(String, usize, Result<Work>)> = targets
            .iter()
            .map(|t| {
                let work = match t.current {
                    SlotState::Dense => self
                        .expect_tensor(&t.base)
                        .and_then(|w| w.as_matrix())
                        .map(Work::Dense),
                    SlotState::Factored { .. } => self.slot_pair(&t.base).map(Work::Pair),
                };
                (t.base.clone(), t.rank, work)
            })
            .collect();

        let factored: Vec<(String, Result<FactoredPair>)> = kernels::map_ordered(inputs, |(base, rank, work)| {
            let result = work.and_then(|w| match w {
                Work::Dense(m) => truncated_factor(&m, rank),
                Work::Pair(p) => progressive_step(&p, rank),
            });
            (base, result)
        });

        let mut out = self.clone();
        for (target, (base, pair)) in targets.iter().zip(factored) {
            debug_assert_eq!(&base, &target.base);
            let pair = pair?;
            out.tensors.remove(&target.base);
            out.tensors.remove(&format!("{}.w0", target.base));
            out.tensors.remove(&format!("{}.w1", target.base));
            out.tensors.insert(format!("{}.w0", target.base), Tensor::from_matrix(pair.w0));
            out.tensors.insert(format!("{}.w1", target.base), Tensor::from_matrix(pair.w1));
            out.graph.blocks[target.block].set(target.kind, SlotState::Factored { rank: target.rank });
        }
        out.validate()?;
        Ok(out)
    }

    /// Deterministic logits (`T x vocab`) for one token sequence. Factored
    /// slots apply `x·w0` then `·w1`; the product matrix is never formed.
    pub fn forward(&self, tokens: &[u32]) -> Result<DenseMatrix> {
        forward::forward_cached(self, tokens).map(|(logits, _)| logits)
    }

    /// Per-sequence logits for a batch; sequences are independent, so the
    /// result is identical to calling [`Checkpoint::forward`] one at a time.
    pub fn forward_batch(&self, batch: &[Vec<u32>]) -> Result<Vec<DenseMatrix>> {
        let results = kernels::map_ordered(batch.to_vec(), |seq| self.forward(&seq));
        results.into_iter().collect()
    }

    /// Serialized byte image (see `docs/checkpoint-format.md`).
    pub fn to_bytes(&self) -> Vec<u8> {
        format::to_bytes(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        format::from_bytes(bytes)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<String> {
        let bytes = self.to_bytes();
        std::fs::write(path, &bytes)?;
        Ok(format::digest_of(&bytes))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    /// Hash of the serialized byte image (same value [`Checkpoint::save`] returns).
    pub fn digest(&self) -> String {
        format::digest_of(&self.to_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy_graph(n_layers: usize) -> ModelGraph {
        ModelGraph::new(
            GraphDims { d_model: 64, d_ff: 256, n_heads: 4, n_layers, vocab: 64, max_seq_len: 64 },
            AttentionMode::Full,
        )
        .unwrap()
    }

    #[test]
    fn graph_validation() {
        assert!(ModelGraph::new(
            GraphDims { d_model: 10, d_ff: 4, n_heads: 4, n_layers: 1, vocab: 8, max_seq_len: 8 },
            AttentionMode::Full,
        )
        .is_err());
    }

    #[test]
    fn count_params_single_slot() {
        // Dense 8x8 slot counts 64 params, factored at rank 2 counts 32.
        let t = Tensor { shape: vec![8, 8], data: vec![0.0; 64] };
        assert_eq!(t.elems(), 64);
        let pair_params = 2 * (8 + 8);
        assert_eq!(pair_params, 32);
    }

    #[test]
    fn seeded_checkpoint_is_deterministic() {
        let a = Checkpoint::new_seeded(toy_graph(2), 7, 0.02).unwrap();
        let b = Checkpoint::new_seeded(toy_graph(2), 7, 0.02).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let c = Checkpoint::new_seeded(toy_graph(2), 8, 0.02).unwrap();
        assert_ne!(a.to_bytes(), c.to_bytes());
    }

    #[test]
    fn non_slot_params_matches_enumeration() {
        let g = toy_graph(2);
        let ckpt = Checkpoint::zeroed(g.clone());
        let slot_total: u64 = g.slot_costs().iter().map(|s| (s.d_in * s.d_out) as u64).sum();
        assert_eq!(ckpt.count_params(), g.non_slot_params() + slot_total);
    }
}
