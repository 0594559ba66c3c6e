//! Parameter storage for the rewriting policy: a flat, named tensor layout
//! shared by the optimizer, the gradient code, and the checkpoint format.

use std::fs;
use std::path::Path;

use rand::rngs::StdRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tensor::Mat;
use super::{PolicyConfig, PolicyError, Role};

const CHECKPOINT_VERSION: u32 = 1;
pub(crate) const INIT_SCALE: f64 = 0.02;

/// Which attention projection an adapter wraps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterTarget {
    Q,
    K,
    V,
    O,
}

impl AdapterTarget {
    pub(crate) fn suffix(self) -> &'static str {
        match self {
            AdapterTarget::Q => "wq",
            AdapterTarget::K => "wk",
            AdapterTarget::V => "wv",
            AdapterTarget::O => "wo",
        }
    }
}

/// Low-rank adapter shape: rank and the projections it wraps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub rank: usize,
    pub targets: Vec<AdapterTarget>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum SlotGroup {
    Base,
    Value,
    Adapter,
}

#[derive(Debug, Clone)]
pub(crate) struct SlotInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub group: SlotGroup,
}

/// Flat indices of each tensor for one transformer layer.
#[derive(Debug, Clone)]
pub(crate) struct LayerIx {
    pub ln1: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub ln2: usize,
    pub w1: usize,
    pub w2: usize,
    /// `(a, b)` slot indices per wrapped target, in [`AdapterTarget`] order
    /// Q, K, V, O.
    pub lora: [Option<(usize, usize)>; 4],
}

#[derive(Debug, Clone)]
pub(crate) struct Ix {
    pub wte: usize,
    pub wpe: usize,
    pub layers: Vec<LayerIx>,
    pub ln_f: usize,
    pub head: usize,
    pub value_w: Option<usize>,
    pub value_b: Option<usize>,
}

fn target_index(t: AdapterTarget) -> usize {
    match t {
        AdapterTarget::Q => 0,
        AdapterTarget::K => 1,
        AdapterTarget::V => 2,
        AdapterTarget::O => 3,
    }
}

fn build_layout(
    config: &PolicyConfig,
    adapters: Option<&AdapterSpec>,
) -> (Vec<SlotInfo>, Ix) {
    let d = config.d_model;
    let mut slots = Vec::new();
    let push = |slots: &mut Vec<SlotInfo>, name: String, rows, cols, group| {
        slots.push(SlotInfo { name, rows, cols, group });
        slots.len() - 1
    };

    let wte = push(&mut slots, "wte".into(), config.vocab_size, d, SlotGroup::Base);
    let wpe = push(&mut slots, "wpe".into(), config.max_seq, d, SlotGroup::Base);
    let mut layers = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let ln1 = push(&mut slots, format!("layers.{l}.ln1.g"), 1, d, SlotGroup::Base);
        let wq = push(&mut slots, format!("layers.{l}.attn.wq"), d, d, SlotGroup::Base);
        let wk = push(&mut slots, format!("layers.{l}.attn.wk"), d, d, SlotGroup::Base);
        let wv = push(&mut slots, format!("layers.{l}.attn.wv"), d, d, SlotGroup::Base);
        let wo = push(&mut slots, format!("layers.{l}.attn.wo"), d, d, SlotGroup::Base);
        let ln2 = push(&mut slots, format!("layers.{l}.ln2.g"), 1, d, SlotGroup::Base);
        let w1 = push(&mut slots, format!("layers.{l}.ffn.w1"), config.d_ff, d, SlotGroup::Base);
        let w2 = push(&mut slots, format!("layers.{l}.ffn.w2"), d, config.d_ff, SlotGroup::Base);
        layers.push(LayerIx { ln1, wq, wk, wv, wo, ln2, w1, w2, lora: [None; 4] });
    }
    let ln_f = push(&mut slots, "ln_f.g".into(), 1, d, SlotGroup::Base);
    let head = push(&mut slots, "head.w".into(), config.vocab_size, d, SlotGroup::Base);

    let (value_w, value_b) = if config.value_head {
        (
            Some(push(&mut slots, "value.w".into(), 1, d, SlotGroup::Value)),
            Some(push(&mut slots, "value.b".into(), 1, 1, SlotGroup::Value)),
        )
    } else {
        (None, None)
    };

    if let Some(spec) = adapters {
        for (l, layer) in layers.iter_mut().enumerate() {
            for &target in &spec.targets {
                let suffix = target.suffix();
                let a = push(
                    &mut slots,
                    format!("layers.{l}.attn.{suffix}.lora_a"),
                    spec.rank,
                    d,
                    SlotGroup::Adapter,
                );
                let b = push(
                    &mut slots,
                    format!("layers.{l}.attn.{suffix}.lora_b"),
                    d,
                    spec.rank,
                    SlotGroup::Adapter,
                );
                layer.lora[target_index(target)] = Some((a, b));
            }
        }
    }

    (slots, Ix { wte, wpe, layers, ln_f, head, value_w, value_b })
}

/// All weights of one policy network, plus its role in training.
#[derive(Debug, Clone)]
pub struct PolicyParameters {
    config: PolicyConfig,
    pub role: Role,
    adapters: Option<AdapterSpec>,
    pub(crate) slots: Vec<SlotInfo>,
    pub(crate) tensors: Vec<Mat>,
    pub(crate) ix: Ix,
}

impl PolicyParameters {
    /// Fresh network. Weight matrices are drawn from a centered normal with
    /// scale 0.02, normalization gains start at one, and the value head (if
    /// enabled) starts at exactly zero.
    pub fn init(config: &PolicyConfig, rng: &mut StdRng) -> Result<Self, PolicyError> {
        config.validate()?;
        let (slots, ix) = build_layout(config, None);
        let normal = Normal::new(0.0, INIT_SCALE).expect("valid distribution");
        let tensors = slots
            .iter()
            .map(|slot| init_tensor(slot, &normal, rng))
            .collect();
        Ok(PolicyParameters {
            config: config.clone(),
            role: Role::TrainablePolicy,
            adapters: None,
            slots,
            tensors,
            ix,
        })
    }

    /// Wraps the configured attention projections with low-rank adapters.
    /// Factor `a` is randomly initialized, factor `b` starts at zero, so the
    /// wrapped network computes exactly what the base network computed.
    /// Once adapters are attached, only they and the value head train.
    pub fn attach_adapters(
        &mut self,
        rank: usize,
        targets: &[AdapterTarget],
        rng: &mut StdRng,
    ) -> Result<(), PolicyError> {
        if self.adapters.is_some() {
            return Err(PolicyError::AdaptersAlreadyAttached);
        }
        if rank == 0 {
            return Err(PolicyError::ConfigInvalid("adapter rank must be at least 1".into()));
        }
        if targets.is_empty() {
            return Err(PolicyError::ConfigInvalid("adapter target list is empty".into()));
        }
        let mut seen = [false; 4];
        for &t in targets {
            if std::mem::replace(&mut seen[target_index(t)], true) {
                return Err(PolicyError::ConfigInvalid("duplicate adapter target".into()));
            }
        }

        let spec = AdapterSpec { rank, targets: targets.to_vec() };
        let (slots, ix) = build_layout(&self.config, Some(&spec));
        let normal = Normal::new(0.0, INIT_SCALE).expect("valid distribution");
        for slot in &slots[self.slots.len()..] {
            self.tensors.push(init_tensor(slot, &normal, rng));
        }
        self.slots = slots;
        self.ix = ix;
        self.adapters = Some(spec);
        Ok(())
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn adapters(&self) -> Option<&AdapterSpec> {
        self.adapters.as_ref()
    }

    pub(crate) fn slot_trainable(&self, slot: usize) -> bool {
        match self.slots[slot].group {
            SlotGroup::Base => self.adapters.is_none(),
            SlotGroup::Value | SlotGroup::Adapter => true,
        }
    }

    /// Names of the tensors the optimizer is allowed to move.
    pub fn trainable_names(&self) -> Vec<String> {
        self.slots
            .iter()
            .enumerate()
            .filter(|(i, _)| self.slot_trainable(*i))
            .map(|(_, s)| s.name.clone())
            .collect()
    }

    pub fn tensor_names(&self) -> Vec<String> {
        self.slots.iter().map(|s| s.name.clone()).collect()
    }

    pub fn tensor(&self, name: &str) -> Option<&Mat> {
        self.slots.iter().position(|s| s.name == name).map(|i| &self.tensors[i])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.slots
            .iter()
            .position(|s| s.name == name)
            .map(|i| &mut self.tensors[i])
    }

    pub fn n_params(&self) -> usize {
        self.tensors.iter().map(Mat::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Mat::all_finite)
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        let records: Vec<TensorRecord> = self
            .slots
            .iter()
            .zip(&self.tensors)
            .map(|(slot, mat)| TensorRecord {
                name: slot.name.clone(),
                rows: mat.rows,
                cols: mat.cols,
                data: mat.data.clone(),
            })
            .collect();
        let file = CheckpointFile {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            role: self.role,
            adapters: self.adapters.clone(),
            tensors: records,
        };
        let body = serde_json::to_string(&file).expect("checkpoint serializes");
        fs::write(path, body + "\n").map_err(|e| PolicyError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let body = fs::read_to_string(path).map_err(|e| PolicyError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let file: CheckpointFile = serde_json::from_str(&body)
            .map_err(|e| PolicyError::MalformedCheckpoint(e.to_string()))?;
        if file.version != CHECKPOINT_VERSION {
            return Err(PolicyError::UnsupportedVersion(file.version));
        }
        file.config.validate()?;
        let (slots, ix) = build_layout(&file.config, file.adapters.as_ref());
        if file.tensors.len() != slots.len() {
            return Err(PolicyError::MalformedCheckpoint(format!(
                "expected {} tensors, found {}",
                slots.len(),
                file.tensors.len()
            )));
        }
        let mut tensors = Vec::with_capacity(slots.len());
        for (slot, record) in slots.iter().zip(file.tensors) {
            if record.name != slot.name || record.rows != slot.rows || record.cols != slot.cols {
                return Err(PolicyError::MalformedCheckpoint(format!(
                    "tensor {} has shape {}x{}, expected {} as {}x{}",
                    record.name, record.rows, record.cols, slot.name, slot.rows, slot.cols
                )));
            }
            if record.data.len() != record.rows * record.cols {
                return Err(PolicyError::MalformedCheckpoint(format!(
                    "tensor {} holds {} values for a {}x{} shape",
                    record.name,
                    record.data.len(),
                    record.rows,
                    record.cols
                )));
            }
            let mat = Mat { rows: record.rows, cols: record.cols, data: record.data };
            if !mat.all_finite() {
                return Err(PolicyError::NonFinite(format!("checkpoint tensor {}", slot.name)));
            }
            tensors.push(mat);
        }
        Ok(PolicyParameters {
            config: file.config,
            role: file.role,
            adapters: file.adapters,
            slots,
            tensors,
            ix,
        })
    }
}

fn init_tensor(slot: &SlotInfo, normal: &Normal<f64>, rng: &mut StdRng) -> Mat {
    let n = slot.rows * slot.cols;
    let is_gain = slot.name.ends_with(".g");
    let is_zero = slot.group == SlotGroup::Value || slot.name.ends_with(".lora_b");
    let data = if is_gain {
        vec![1.0; n]
    } else if is_zero {
        vec![0.0; n]
    } else {
        (0..n).map(|_| normal.sample(rng)).collect()
    };
    Mat { rows: slot.rows, cols: slot.cols, data }
}

/// Per-tensor gradients aligned with a [`PolicyParameters`] layout. Frozen
/// tensors hold no storage at all; only trainable entries exist.
#[derive(Debug, Clone)]
pub struct Grads {
    pub(crate) tensors: Vec<Mat>,
    pub(crate) trainable: Vec<bool>,
}

impl Grads {
    pub fn zeros_like(params: &PolicyParameters) -> Self {
        let trainable: Vec<bool> =
            (0..params.slots.len()).map(|i| params.slot_trainable(i)).collect();
        let tensors = params
            .slots
            .iter()
            .zip(&trainable)
            .map(|(slot, &t)| if t { Mat::zeros(slot.rows, slot.cols) } else { Mat::zeros(0, 0) })
            .collect();
        Grads { tensors, trainable }
    }

    /// Gradient for a named tensor; `None` when the tensor is frozen or
    /// unknown.
    pub fn by_name(&self, params: &PolicyParameters, name: &str) -> Option<&Mat> {
        let i = params.slots.iter().position(|s| s.name == name)?;
        self.trainable[i].then(|| &self.tensors[i])
    }

    pub fn add(&mut self, other: &Grads) {
        debug_assert_eq!(self.tensors.len(), other.tensors.len());
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.tensors {
            t.scale(factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Mat::all_finite)
    }

    pub(crate) fn accum(&mut self, slot: usize, delta: &Mat) {
        if self.trainable[slot] {
            self.tensors[slot].add_assign(delta);
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    config: PolicyConfig,
    role: Role,
    adapters: Option<AdapterSpec>,
    tensors: Vec<TensorRecord>,
}
