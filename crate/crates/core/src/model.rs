//! Layer-heterogeneity transformer.
//!
//! Image patches and text tokens are embedded into one sequence and run
//! through `n_layers` pre-norm blocks. The first `share_threshold` blocks are
//! shared by both task families; the remaining blocks exist twice, one branch
//! per [`TaskLabel`], and each family also has its own final norm and output
//! head. The branch is picked from the known task label, never learned.
//!
//! [`Topology::Dense`] is the single-branch baseline and
//! [`Topology::LayerHetHard`] separates every block.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};

use crate::codec::{gui_text_complete, parse_gui, Action, Codec, EMBODIED_DIMS};
use crate::codec::{decode_embodied, EmbodiedAction};
use crate::error::{Error, Result};
use crate::params::{Bindings, ParamId, ParamStore};
use crate::rng::{derive_seed, rng_for};
use crate::tensor::{Graph, NodeId, Tensor};

pub const LN_EPS: f32 = 1e-5;
/// Greedy GUI decoding gives up after this many tokens.
pub const GUI_DECODE_CAP: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskLabel {
    Gui,
    Robot,
}

impl TaskLabel {
    pub const ALL: [TaskLabel; 2] = [TaskLabel::Gui, TaskLabel::Robot];

    pub fn as_str(&self) -> &'static str {
        match self {
            TaskLabel::Gui => "gui",
            TaskLabel::Robot => "robot",
        }
    }

    /// Branch segment used in parameter names.
    pub fn branch(&self) -> &'static str {
        match self {
            TaskLabel::Gui => "gui",
            TaskLabel::Robot => "rob",
        }
    }
}

impl fmt::Display for TaskLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gui" => Ok(TaskLabel::Gui),
            "robot" => Ok(TaskLabel::Robot),
            other => Err(Error::Config(format!("unknown task family {other:?} (expected gui or robot)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Topology {
    Dense,
    LayerHet,
    LayerHetHard,
}

impl Topology {
    pub fn as_str(&self) -> &'static str {
        match self {
            Topology::Dense => "dense",
            Topology::LayerHet => "layer_het",
            Topology::LayerHetHard => "layer_het_hard",
        }
    }
}

impl FromStr for Topology {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(Topology::Dense),
            "layer_het" => Ok(Topology::LayerHet),
            "layer_het_hard" => Ok(Topology::LayerHetHard),
            other => Err(Error::Config(format!("unknown topology {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    /// Number of shared shallow blocks (`K`).
    pub share_threshold: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub patch_size: usize,
    pub image_side: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 14,
            share_threshold: 4,
            d_model: 128,
            n_heads: 4,
            d_ff: 512,
            max_seq_len: 96,
            vocab_size: 1024,
            patch_size: 8,
            image_side: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
            ("vocab_size", self.vocab_size),
            ("patch_size", self.patch_size),
            ("image_side", self.image_side),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.share_threshold < 1 || self.share_threshold >= self.n_layers {
            return Err(Error::Config(format!(
                "model.share_threshold must satisfy 1 <= K < n_layers, got K={} L={}",
                self.share_threshold, self.n_layers
            )));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !self.image_side.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_side {} not divisible by patch_size {}",
                self.image_side, self.patch_size
            )));
        }
        if self.n_patches() >= self.max_seq_len {
            return Err(Error::Config(format!(
                "{} patches leave no room for text in max_seq_len {}",
                self.n_patches(),
                self.max_seq_len
            )));
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        let per_side = self.image_side / self.patch_size;
        per_side * per_side
    }

    /// Shared blocks for a topology: all of them for dense, none for hard.
    pub fn shared_blocks(&self, topology: Topology) -> usize {
        match topology {
            Topology::Dense => self.n_layers,
            Topology::LayerHet => self.share_threshold,
            Topology::LayerHetHard => 0,
        }
    }

    pub fn block_param_count(&self) -> usize {
        let d = self.d_model;
        let f = self.d_ff;
        4 * d + 4 * d * d + d * f + f + f * d + d
    }

    pub fn dense_param_count(&self) -> usize {
        let d = self.d_model;
        let p2 = self.patch_size * self.patch_size;
        self.vocab_size * d + p2 * d + d + self.max_seq_len * d + self.n_layers * self.block_param_count() + 2 * d + self.vocab_size * d
    }

    /// Dense count plus one extra copy of each separated block, final norm
    /// and head.
    pub fn param_count(&self, topology: Topology) -> usize {
        match topology {
            Topology::Dense => self.dense_param_count(),
            t => {
                let split = self.n_layers - self.shared_blocks(t);
                self.dense_param_count() + split * self.block_param_count() + 2 * self.d_model + self.vocab_size * self.d_model
            }
        }
    }
}

#[derive(Clone, Debug)]
enum Slot<T> {
    Shared(T),
    Split { gui: T, rob: T },
}

impl<T> Slot<T> {
    fn pick(&self, label: TaskLabel) -> &T {
        match self {
            Slot::Shared(t) => t,
            Slot::Split { gui, rob } => match label {
                TaskLabel::Gui => gui,
                TaskLabel::Robot => rob,
            },
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct NormParams {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct BlockParams {
    ln1: NormParams,
    q: ParamId,
    k: ParamId,
    v: ParamId,
    o: ParamId,
    ln2: NormParams,
    up: ParamId,
    up_bias: ParamId,
    down: ParamId,
    down_bias: ParamId,
}

#[derive(Clone, Debug)]
struct Layout {
    token: ParamId,
    patch: ParamId,
    patch_bias: ParamId,
    pos: ParamId,
    blocks: Vec<Slot<BlockParams>>,
    final_norm: Slot<NormParams>,
    head: Slot<ParamId>,
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Normal(f32),
    Zeros,
    Ones,
}

/// One sequence: a grayscale raster plus text token ids.
#[derive(Clone, Copy, Debug)]
pub struct SeqInput<'a> {
    pub image: &'a [f32],
    pub tokens: &'a [u32],
}

/// A label-homogeneous training batch with next-token targets and loss mask
/// for every position of every sequence (patch positions included).
#[derive(Clone, Debug)]
pub struct Batch {
    pub label: TaskLabel,
    pub items: Vec<BatchItem>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchItem {
    pub sample_id: u64,
    pub image: Vec<f32>,
    pub tokens: Vec<u32>,
    pub targets: Vec<u32>,
    pub mask: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct LayerHetModel {
    config: ModelConfig,
    topology: Topology,
    params: ParamStore,
    layout: Layout,
}

/// Parameter names and shapes of a topology, in storage order.
pub fn param_specs(config: &ModelConfig, topology: Topology) -> Vec<(String, Vec<usize>)> {
    build_specs(config, topology).into_iter().map(|(n, s, _)| (n, s)).collect()
}

fn build_specs(config: &ModelConfig, topology: Topology) -> Vec<(String, Vec<usize>, Init)> {
    let d = config.d_model;
    let f = config.d_ff;
    let std = 0.02f32;
    let out_std = std / (2.0 * config.n_layers as f32).sqrt();
    let mut specs = vec![
        ("embed.token.weight".to_string(), vec![config.vocab_size, d], Init::Normal(std)),
        ("embed.patch.weight".to_string(), vec![config.patch_size * config.patch_size, d], Init::Normal(std)),
        ("embed.patch.bias".to_string(), vec![d], Init::Zeros),
        ("embed.pos.weight".to_string(), vec![config.max_seq_len, d], Init::Normal(std)),
    ];
    let shared = config.shared_blocks(topology);
    for i in 0..config.n_layers {
        let branches: &[&str] = if i < shared { &["shared"] } else { &["gui", "rob"] };
        for b in branches {
            let p = format!("blocks.{i}.{b}");
            specs.extend([
                (format!("{p}.ln1.gain"), vec![d], Init::Ones),
                (format!("{p}.ln1.bias"), vec![d], Init::Zeros),
                (format!("{p}.attn_q.weight"), vec![d, d], Init::Normal(std)),
                (format!("{p}.attn_k.weight"), vec![d, d], Init::Normal(std)),
                (format!("{p}.attn_v.weight"), vec![d, d], Init::Normal(std)),
                (format!("{p}.attn_o.weight"), vec![d, d], Init::Normal(out_std)),
                (format!("{p}.ln2.gain"), vec![d], Init::Ones),
                (format!("{p}.ln2.bias"), vec![d], Init::Zeros),
                (format!("{p}.ffn_up.weight"), vec![d, f], Init::Normal(std)),
                (format!("{p}.ffn_up.bias"), vec![f], Init::Zeros),
                (format!("{p}.ffn_down.weight"), vec![f, d], Init::Normal(out_std)),
                (format!("{p}.ffn_down.bias"), vec![d], Init::Zeros),
            ]);
        }
    }
    let tail: &[&str] = if topology == Topology::Dense { &["shared"] } else { &["gui", "rob"] };
    for b in tail {
        specs.push((format!("final_norm.{b}.gain"), vec![d], Init::Ones));
        specs.push((format!("final_norm.{b}.bias"), vec![d], Init::Zeros));
    }
    for b in tail {
        specs.push((format!("head.{b}.weight"), vec![d, config.vocab_size], Init::Normal(std)));
    }
    specs
}

fn resolve_layout(config: &ModelConfig, topology: Topology, store: &ParamStore) -> Result<Layout> {
    let get = |name: &str| store.id(name).ok_or_else(|| Error::CheckpointMismatch(format!("missing parameter {name}")));
    let norm = |prefix: &str, which: &str| -> Result<NormParams> {
        Ok(NormParams {
            gain: get(&format!("{prefix}.{which}.gain"))?,
            bias: get(&format!("{prefix}.{which}.bias"))?,
        })
    };
    let block = |p: &str| -> Result<BlockParams> {
        Ok(BlockParams {
            ln1: norm(p, "ln1")?,
            q: get(&format!("{p}.attn_q.weight"))?,
            k: get(&format!("{p}.attn_k.weight"))?,
            v: get(&format!("{p}.attn_v.weight"))?,
            o: get(&format!("{p}.attn_o.weight"))?,
            ln2: norm(p, "ln2")?,
            up: get(&format!("{p}.ffn_up.weight"))?,
            up_bias: get(&format!("{p}.ffn_up.bias"))?,
            down: get(&format!("{p}.ffn_down.weight"))?,
            down_bias: get(&format!("{p}.ffn_down.bias"))?,
        })
    };
    let shared = config.shared_blocks(topology);
    let mut blocks = Vec::with_capacity(config.n_layers);
    for i in 0..config.n_layers {
        blocks.push(if i < shared {
            Slot::Shared(block(&format!("blocks.{i}.shared"))?)
        } else {
            Slot::Split {
                gui: block(&format!("blocks.{i}.gui"))?,
                rob: block(&format!("blocks.{i}.rob"))?,
            }
        });
    }
    let (final_norm, head) = if topology == Topology::Dense {
        (Slot::Shared(norm("final_norm", "shared")?), Slot::Shared(get("head.shared.weight")?))
    } else {
        (
            Slot::Split {
                gui: norm("final_norm", "gui")?,
                rob: norm("final_norm", "rob")?,
            },
            Slot::Split {
                gui: get("head.gui.weight")?,
                rob: get("head.rob.weight")?,
            },
        )
    };
    Ok(Layout {
        token: get("embed.token.weight")?,
        patch: get("embed.patch.weight")?,
        patch_bias: get("embed.patch.bias")?,
        pos: get("embed.pos.weight")?,
        blocks,
        final_norm,
        head,
    })
}

/// Splits a grayscale raster into row-major flattened patches.
pub fn patchify(image: &[f32], side: usize, patch: usize) -> Result<Tensor> {
    if image.len() != side * side {
        return Err(Error::InvalidArgument(format!(
            "image has {} pixels, expected {side}x{side}",
            image.len()
        )));
    }
    let per = side / patch;
    let mut out = Vec::with_capacity(image.len());
    for pr in 0..per {
        for pc in 0..per {
            for r in 0..patch {
                let row = (pr * patch + r) * side + pc * patch;
                out.extend_from_slice(&image[row..row + patch]);
            }
        }
    }
    Tensor::new(vec![per * per, patch * patch], out)
}

/// Output of one forward pass.
pub struct ForwardPass {
    pub graph: Graph,
    pub bindings: Bindings,
    pub logits: NodeId,
    /// Residual stream after each block, all sequences stacked.
    pub hidden: Vec<NodeId>,
    pub segments: Vec<usize>,
}

impl LayerHetModel {
    /// Fresh model. Every tensor is drawn from its own stream keyed by
    /// `(seed, name)`, so a name gets the same initial value in every topology.
    pub fn new(config: ModelConfig, topology: Topology, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        for (name, shape, init) in build_specs(&config, topology) {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Normal(std) => {
                    let mut rng = rng_for(derive_seed(seed, &name, 0));
                    let dist = Normal::new(0.0f32, std).expect("valid std");
                    (0..n).map(|_| dist.sample(&mut rng)).collect()
                }
            };
            store.insert(name, Tensor::new(shape, data)?)?;
        }
        Self::from_params(config, topology, store)
    }

    /// Wraps an existing parameter set, checking names and shapes.
    pub fn from_params(config: ModelConfig, topology: Topology, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config, topology);
        if specs.len() != params.len() {
            return Err(Error::CheckpointMismatch(format!(
                "{} parameters given, topology {} needs {}",
                params.len(),
                topology.as_str(),
                specs.len()
            )));
        }
        for (name, shape) in &specs {
            let p = params
                .by_name(name)
                .ok_or_else(|| Error::CheckpointMismatch(format!("missing parameter {name}")))?;
            if p.value.shape() != shape.as_slice() {
                return Err(Error::CheckpointMismatch(format!(
                    "{name} has shape {:?}, config implies {:?}",
                    p.value.shape(),
                    shape
                )));
            }
        }
        let layout = resolve_layout(&config, topology, &params)?;
        Ok(Self {
            config,
            topology,
            params,
            layout,
        })
    }

    /// Builds a model of another topology whose branches are all copies of
    /// this model's single branch. Requires a dense source.
    pub fn expand_from_dense(&self, topology: Topology) -> Result<Self> {
        if self.topology != Topology::Dense {
            return Err(Error::Config("expand_from_dense needs a dense source model".into()));
        }
        let mut out = Self::new(self.config.clone(), topology, 0)?;
        for p in out.params.iter_mut() {
            let src_name = shared_name(&p.name);
            let src = self
                .params
                .by_name(&src_name)
                .ok_or_else(|| Error::CheckpointMismatch(format!("dense model lacks {src_name}")))?;
            p.value = src.value.clone();
        }
        Ok(out)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn topology(&self) -> Topology {
        self.topology
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    fn embed(&self, g: &mut Graph, b: &mut Bindings, input: SeqInput<'_>) -> Result<NodeId> {
        let c = &self.config;
        let len = c.n_patches() + input.tokens.len();
        if len > c.max_seq_len {
            return Err(Error::SequenceTooLong { len, max: c.max_seq_len });
        }
        let patches = g.constant(patchify(input.image, c.image_side, c.patch_size)?);
        let pw = b.bind(g, &self.params, self.layout.patch);
        let pb = b.bind(g, &self.params, self.layout.patch_bias);
        let pe = g.matmul(patches, pw)?;
        let pe = g.add_bias(pe, pb)?;
        let x = if input.tokens.is_empty() {
            pe
        } else {
            let ids: Vec<usize> = input.tokens.iter().map(|&t| t as usize).collect();
            let table = b.bind(g, &self.params, self.layout.token);
            let te = g.gather(table, &ids)?;
            g.concat_rows(&[pe, te])?
        };
        let pos_table = b.bind(g, &self.params, self.layout.pos);
        let positions: Vec<usize> = (0..len).collect();
        let pos = g.gather(pos_table, &positions)?;
        g.add(x, pos)
    }

    fn block(
        &self,
        g: &mut Graph,
        b: &mut Bindings,
        x: NodeId,
        p: &BlockParams,
        segments: &[usize],
    ) -> Result<NodeId> {
        let s = &self.params;
        let (g1, b1) = (b.bind(g, s, p.ln1.gain), b.bind(g, s, p.ln1.bias));
        let h = g.layer_norm(x, g1, b1, LN_EPS)?;
        let (wq, wk, wv, wo) = (b.bind(g, s, p.q), b.bind(g, s, p.k), b.bind(g, s, p.v), b.bind(g, s, p.o));
        let q = g.matmul(h, wq)?;
        let k = g.matmul(h, wk)?;
        let v = g.matmul(h, wv)?;
        let a = g.attention(q, k, v, segments, self.config.n_heads)?;
        let a = g.matmul(a, wo)?;
        let x = g.add(x, a)?;
        let (g2, b2) = (b.bind(g, s, p.ln2.gain), b.bind(g, s, p.ln2.bias));
        let h = g.layer_norm(x, g2, b2, LN_EPS)?;
        let (up, upb, down, downb) = (
            b.bind(g, s, p.up),
            b.bind(g, s, p.up_bias),
            b.bind(g, s, p.down),
            b.bind(g, s, p.down_bias),
        );
        let u = g.matmul(h, up)?;
        let u = g.add_bias(u, upb)?;
        let u = g.gelu(u)?;
        let dn = g.matmul(u, down)?;
        let dn = g.add_bias(dn, downb)?;
        g.add(x, dn)
    }

    /// Runs a batch of same-label sequences. Trainable passes put parameters
    /// on the tape as gradient leaves. With `head_rows`, logits are computed
    /// only for those rows of the stacked batch, in the given order.
    pub fn forward_pass(
        &self,
        inputs: &[SeqInput<'_>],
        label: TaskLabel,
        trainable: bool,
        head_rows: Option<&[usize]>,
    ) -> Result<ForwardPass> {
        if inputs.is_empty() {
            return Err(Error::InvalidArgument("forward of an empty batch".into()));
        }
        let mut g = Graph::new();
        let mut b = Bindings::new(&self.params, trainable);
        let mut parts = Vec::with_capacity(inputs.len());
        let mut segments = Vec::with_capacity(inputs.len());
        for &inp in inputs {
            parts.push(self.embed(&mut g, &mut b, inp)?);
            segments.push(self.config.n_patches() + inp.tokens.len());
        }
        let mut x = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts)? };
        let mut hidden = Vec::with_capacity(self.config.n_layers);
        for slot in &self.layout.blocks {
            x = self.block(&mut g, &mut b, x, slot.pick(label), &segments)?;
            hidden.push(x);
        }
        let fnorm = *self.layout.final_norm.pick(label);
        let (fg, fb) = (b.bind(&mut g, &self.params, fnorm.gain), b.bind(&mut g, &self.params, fnorm.bias));
        let x = match head_rows {
            Some(rows) => g.gather(x, rows)?,
            None => x,
        };
        let h = g.layer_norm(x, fg, fb, LN_EPS)?;
        let head = b.bind(&mut g, &self.params, *self.layout.head.pick(label));
        let logits = g.matmul(h, head)?;
        Ok(ForwardPass {
            graph: g,
            bindings: b,
            logits,
            hidden,
            segments,
        })
    }

    /// Logits of shape `(seq_len, vocab_size)` for one sequence.
    pub fn forward(&self, input: SeqInput<'_>, label: TaskLabel) -> Result<Tensor> {
        let pass = self.forward_pass(&[input], label, false, None)?;
        Ok(pass.graph.value(pass.logits).clone())
    }

    /// The embedded sequence (patches, then tokens, plus positions).
    pub fn embed_inputs(&self, input: SeqInput<'_>) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut b = Bindings::new(&self.params, false);
        let x = self.embed(&mut g, &mut b, input)?;
        Ok(g.value(x).clone())
    }

    /// Applies block `layer` to an arbitrary `(rows, d_model)` input using the
    /// branch selected by `label`.
    pub fn forward_block(&self, layer: usize, x: &Tensor, segments: &[usize], label: TaskLabel) -> Result<Tensor> {
        let slot = self
            .layout
            .blocks
            .get(layer)
            .ok_or_else(|| Error::InvalidArgument(format!("layer {layer} >= {}", self.config.n_layers)))?;
        let mut g = Graph::new();
        let mut b = Bindings::new(&self.params, false);
        let xn = g.constant(x.clone());
        let y = self.block(&mut g, &mut b, xn, slot.pick(label), segments)?;
        Ok(g.value(y).clone())
    }

    /// Residual-stream states after the requested blocks, one `(seq_len,
    /// d_model)` tensor per layer.
    pub fn hidden_states(&self, input: SeqInput<'_>, label: TaskLabel, layers: &[usize]) -> Result<Vec<Tensor>> {
        if let Some(&bad) = layers.iter().find(|&&l| l >= self.config.n_layers) {
            return Err(Error::InvalidArgument(format!(
                "layer {bad} requested but the model has {} layers",
                self.config.n_layers
            )));
        }
        let pass = self.forward_pass(&[input], label, false, None)?;
        Ok(layers.iter().map(|&l| pass.graph.value(pass.hidden[l]).clone()).collect())
    }

    /// Masked next-token loss of a batch; leaves gradients in the store.
    pub fn compute_gradients(&mut self, batch: &Batch) -> Result<f32> {
        self.params.zero_grad();
        let (loss, pass) = self.loss_pass(batch, true)?;
        let mut pass = pass;
        pass.graph.backward(loss)?;
        self.params.accumulate(&pass.graph, &pass.bindings);
        Ok(pass.graph.value(loss).item())
    }

    /// Masked next-token loss without gradients.
    pub fn batch_loss(&self, batch: &Batch) -> Result<f32> {
        let (loss, pass) = self.loss_pass(batch, false)?;
        Ok(pass.graph.value(loss).item())
    }

    fn loss_pass(&self, batch: &Batch, trainable: bool) -> Result<(NodeId, ForwardPass)> {
        let inputs: Vec<SeqInput<'_>> = batch
            .items
            .iter()
            .map(|it| SeqInput {
                image: &it.image,
                tokens: &it.tokens,
            })
            .collect();
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        let mut off = 0;
        for it in &batch.items {
            let len = self.config.n_patches() + it.tokens.len();
            if it.targets.len() != len || it.mask.len() != len {
                return Err(Error::InvalidArgument(format!(
                    "sample {} has {} targets and {} mask entries for a sequence of {len}",
                    it.sample_id,
                    it.targets.len(),
                    it.mask.len()
                )));
            }
            for (p, (&t, &m)) in it.targets.iter().zip(&it.mask).enumerate() {
                if m {
                    rows.push(off + p);
                    targets.push(t);
                }
            }
            off += it.mask.len();
        }
        if rows.is_empty() {
            return Err(Error::EmptyLoss);
        }
        let mut pass = self.forward_pass(&inputs, batch.label, trainable, Some(&rows))?;
        let mask = vec![true; rows.len()];
        let loss = pass.graph.softmax_cross_entropy(pass.logits, &targets, &mask)?;
        Ok((loss, pass))
    }

    fn next_token(&self, image: &[f32], tokens: &[u32], label: TaskLabel) -> Result<u32> {
        let last_row = self.config.n_patches() + tokens.len() - 1;
        let pass = self.forward_pass(&[SeqInput { image, tokens }], label, false, Some(&[last_row]))?;
        let last = pass.graph.value(pass.logits).row(0);
        let mut best = 0;
        for (i, &v) in last.iter().enumerate() {
            if v > last[best] {
                best = i;
            }
        }
        Ok(best as u32)
    }

    /// Greedy decoding of one action after the given prompt tokens.
    pub fn generate_action(&self, image: &[f32], prompt: &[u32], label: TaskLabel, codec: &Codec) -> Result<Action> {
        let mut tokens = prompt.to_vec();
        match label {
            TaskLabel::Robot => {
                let mut out = Vec::with_capacity(EMBODIED_DIMS);
                for _ in 0..EMBODIED_DIMS {
                    let t = self.next_token(image, &tokens, label)?;
                    if !codec.actions.is_action_token(t) {
                        return Err(Error::InvalidActionToken(t));
                    }
                    out.push(t);
                    tokens.push(t);
                }
                let a: EmbodiedAction = decode_embodied(&out, &codec.actions)?;
                Ok(Action::Embodied(a))
            }
            TaskLabel::Gui => {
                let mut text = String::new();
                for _ in 0..GUI_DECODE_CAP {
                    let t = self.next_token(image, &tokens, label)?;
                    let piece = codec.text.piece(t).ok_or(Error::InvalidActionToken(t))?;
                    text.push_str(piece);
                    tokens.push(t);
                    if gui_text_complete(&text) {
                        return Ok(Action::Gui(parse_gui(&text)?));
                    }
                }
                Err(Error::DecodeCap(GUI_DECODE_CAP))
            }
        }
    }
}

/// Maps a branch parameter name to its shared counterpart
/// (`blocks.5.rob.ln1.gain` -> `blocks.5.shared.ln1.gain`).
pub fn shared_name(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    let branch_at = if parts.first() == Some(&"blocks") { 2 } else { 1 };
    match parts.get(branch_at) {
        Some(&"gui") | Some(&"rob") => {
            let mut p = parts.clone();
            p[branch_at] = "shared";
            p.join(".")
        }
        _ => name.to_string(),
    }
}

/// Branch segment of a parameter name: `shared`, `gui`, `rob`, or `None` for
/// the embedding tensors.
pub fn branch_of(name: &str) -> Option<&str> {
    let parts: Vec<&str> = name.split('.').collect();
    match parts.first() {
        Some(&"blocks") => parts.get(2).copied(),
        Some(&"final_norm") | Some(&"head") => parts.get(1).copied(),
        _ => None,
    }
}

/// Block index of a parameter name, if it belongs to a block.
pub fn layer_of(name: &str) -> Option<usize> {
    let mut parts = name.split('.');
    if parts.next() != Some("blocks") {
        return None;
    }
    parts.next()?.parse().ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> ModelConfig {
        ModelConfig {
            n_layers: 3,
            share_threshold: 1,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 16,
            vocab_size: 40,
            patch_size: 2,
            image_side: 4,
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let mut c = tiny();
        c.share_threshold = 3;
        assert!(c.validate().is_err());
        c.share_threshold = 0;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.patch_size = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn default_config_preserves_share_ratio() {
        let c = ModelConfig::default();
        assert_eq!(c.share_threshold * 28, 8 * c.n_layers);
    }

    #[test]
    fn param_count_formula_matches_store() {
        let c = tiny();
        for t in [Topology::Dense, Topology::LayerHet, Topology::LayerHetHard] {
            let m = LayerHetModel::new(c.clone(), t, 1).unwrap();
            assert_eq!(m.params().num_scalars(), c.param_count(t), "{t:?}");
        }
        let extra = c.param_count(Topology::LayerHet) - c.dense_param_count();
        assert_eq!(
            extra,
            (c.n_layers - c.share_threshold) * c.block_param_count() + c.vocab_size * c.d_model + 2 * c.d_model
        );
    }

    #[test]
    fn patch_prefix_and_lookup() {
        let c = ModelConfig {
            image_side: 16,
            patch_size: 8,
            ..tiny()
        };
        let m = LayerHetModel::new(c.clone(), Topology::LayerHet, 3).unwrap();
        let image = vec![0.25; 256];
        let e = m.embed_inputs(SeqInput { image: &image, tokens: &[] }).unwrap();
        assert_eq!(e.shape(), &[4, c.d_model]);
        let e = m.embed_inputs(SeqInput { image: &image, tokens: &[7, 9] }).unwrap();
        assert_eq!(e.shape(), &[6, c.d_model]);
        let table = &m.params().by_name("embed.token.weight").unwrap().value;
        let pos = &m.params().by_name("embed.pos.weight").unwrap().value;
        for j in 0..c.d_model {
            assert_eq!(e.row(4)[j], table.row(7)[j] + pos.row(4)[j]);
        }
    }

    #[test]
    fn overlong_sequence_is_an_error() {
        let m = LayerHetModel::new(tiny(), Topology::Dense, 0).unwrap();
        let image = vec![0.0; 16];
        let tokens = vec![1u32; 13];
        let err = m.forward(SeqInput { image: &image, tokens: &tokens }, TaskLabel::Gui).unwrap_err();
        assert!(matches!(err, Error::SequenceTooLong { len: 17, max: 16 }));
    }

    #[test]
    fn name_helpers() {
        assert_eq!(shared_name("blocks.2.rob.ffn_up.weight"), "blocks.2.shared.ffn_up.weight");
        assert_eq!(shared_name("head.gui.weight"), "head.shared.weight");
        assert_eq!(shared_name("embed.pos.weight"), "embed.pos.weight");
        assert_eq!(branch_of("blocks.0.shared.ln1.gain"), Some("shared"));
        assert_eq!(branch_of("final_norm.rob.bias"), Some("rob"));
        assert_eq!(branch_of("embed.token.weight"), None);
        assert_eq!(layer_of("blocks.11.gui.attn_q.weight"), Some(11));
        assert_eq!(layer_of("head.gui.weight"), None);
    }
}
