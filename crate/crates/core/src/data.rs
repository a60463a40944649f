//! Unified samples, synthetic dataset generators, mixing and collation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use rand::seq::SliceRandom;

use crate::codec::{parse_gui, Action, Codec, EmbodiedAction, EMBODIED_DIMS};
use crate::env::RobotEnv;
use crate::error::{Error, Result};
use crate::model::{Batch, BatchItem, TaskLabel};
use crate::rng::{derive_seed, is_eval_seed, rng_for, train_seed};
use crate::scene::{GuiScene, RobotScene, WorldParams, GUI_SYSTEM_PROMPT, ROBOT_INSTRUCTION, ROBOT_SYSTEM_PROMPT};

/// Robot sample ids start here so they never collide with GUI ids.
pub const ROBOT_ID_BASE: u64 = 1 << 40;

/// One record: system prompt, image, instruction, optional history, action.
#[derive(Clone, Debug, PartialEq)]
pub struct UnifiedSample {
    pub id: u64,
    pub label: TaskLabel,
    pub system_prompt: String,
    pub image: Vec<f32>,
    pub instruction: String,
    pub history: Option<String>,
    pub action: Action,
}

impl UnifiedSample {
    pub fn validate(&self, image_side: usize) -> Result<()> {
        if self.image.len() != image_side * image_side {
            return Err(Error::InvalidArgument(format!(
                "sample {} has {} pixels, expected {}",
                self.id,
                self.image.len(),
                image_side * image_side
            )));
        }
        if self.image.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(format!("sample {} has pixels outside [0, 1]", self.id)));
        }
        match (&self.action, self.label) {
            (Action::Gui(a), TaskLabel::Gui) => a.validate(),
            (Action::Embodied(a), TaskLabel::Robot) => a.validate(),
            _ => Err(Error::InvalidArgument(format!(
                "sample {} carries an action that does not match label {}",
                self.id, self.label
            ))),
        }
    }

    pub fn prompt_tokens(&self, codec: &Codec) -> Result<Vec<u32>> {
        prompt_tokens(&self.system_prompt, &self.instruction, self.history.as_deref(), codec)
    }
}

/// Prompt part of a sequence: system prompt, instruction, then history.
pub fn prompt_tokens(system: &str, instruction: &str, history: Option<&str>, codec: &Codec) -> Result<Vec<u32>> {
    let mut out = codec.text.encode(system)?;
    out.extend(codec.text.encode(instruction)?);
    if let Some(h) = history.filter(|h| !h.is_empty()) {
        out.extend(codec.text.encode(h)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub seed: u64,
    pub family: TaskLabel,
    /// GUI samples, or robot episodes.
    pub count: usize,
    pub world: WorldParams,
    pub resample_factor: usize,
}

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        let w = &self.world;
        let mut s = String::new();
        let _ = writeln!(s, "family={}", self.family);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "count={}", self.count);
        let _ = writeln!(s, "resample_factor={}", self.resample_factor);
        let _ = writeln!(s, "world.image_side={}", w.image_side);
        let _ = writeln!(s, "world.gui_rows={}", w.gui_rows);
        let _ = writeln!(s, "world.gui_cols={}", w.gui_cols);
        let _ = writeln!(s, "world.gui_tolerance={}", w.gui_tolerance);
        let _ = writeln!(s, "world.robot_step={}", w.robot_step);
        let _ = writeln!(s, "world.grasp_radius={}", w.grasp_radius);
        let _ = writeln!(s, "world.robot_max_steps={}", w.robot_max_steps);
        let _ = writeln!(s, "world.robot_min_start_dist={}", w.robot_min_start_dist);
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let kv = crate::config::parse_kv(text)?;
        let get = |k: &str| kv.get(k).ok_or_else(|| Error::Config(format!("manifest lacks {k}")));
        let num = |k: &str| -> Result<f64> {
            get(k)?.parse::<f64>().map_err(|_| Error::Config(format!("manifest {k} is not a number")))
        };
        Ok(Self {
            family: get("family")?.parse()?,
            seed: get("seed")?.parse().map_err(|_| Error::Config("manifest seed".into()))?,
            count: num("count")? as usize,
            resample_factor: num("resample_factor")? as usize,
            world: WorldParams {
                image_side: num("world.image_side")? as usize,
                gui_rows: num("world.gui_rows")? as usize,
                gui_cols: num("world.gui_cols")? as usize,
                gui_tolerance: num("world.gui_tolerance")? as f32,
                robot_step: num("world.robot_step")? as f32,
                grasp_radius: num("world.grasp_radius")? as f32,
                robot_max_steps: num("world.robot_max_steps")? as usize,
                robot_min_start_dist: num("world.robot_min_start_dist")? as f32,
            },
        })
    }

    /// Regenerates the dataset this manifest describes.
    pub fn generate(&self) -> Result<Vec<UnifiedSample>> {
        match self.family {
            TaskLabel::Gui => gen_gui_dataset(self.seed, self.count, &self.world),
            TaskLabel::Robot => gen_robot_dataset(self.seed, self.count, &self.world),
        }
    }
}

pub fn gui_episode_seed(seed: u64, index: u64) -> u64 {
    train_seed(seed, "gui", index)
}

pub fn robot_episode_seed(seed: u64, index: u64) -> u64 {
    train_seed(seed, "robot", index)
}

/// One GUI sample per index: a grid with a bright target cell, labelled
/// with a click (or tap) at the target cell's center.
pub fn gui_sample(episode_seed: u64, id: u64, world: &WorldParams) -> UnifiedSample {
    assert!(!is_eval_seed(episode_seed), "training sample drawn from an evaluation seed");
    let mut rng = rng_for(episode_seed);
    let scene = GuiScene::sample(&mut rng, world);
    let (x, y) = scene.target_center();
    let action = if scene.tap {
        crate::codec::GuiAction::Tap { x, y }
    } else {
        crate::codec::GuiAction::Click { x, y }
    };
    UnifiedSample {
        id,
        label: TaskLabel::Gui,
        system_prompt: GUI_SYSTEM_PROMPT.to_string(),
        image: scene.render(world.image_side),
        instruction: scene.instruction(),
        history: None,
        action: Action::Gui(action),
    }
}

pub fn gen_gui_dataset(seed: u64, n: usize, world: &WorldParams) -> Result<Vec<UnifiedSample>> {
    if n == 0 {
        return Err(Error::EmptyDataset("gui dataset needs n >= 1".into()));
    }
    world.validate()?;
    Ok((0..n as u64).map(|i| gui_sample(gui_episode_seed(seed, i), i, world)).collect())
}

/// Rolls the scripted expert through the robot environment and emits every
/// visited state as a single-step sample, ending with the grasp.
pub fn robot_episode(episode_seed: u64, first_id: u64, world: &WorldParams) -> Vec<UnifiedSample> {
    assert!(!is_eval_seed(episode_seed), "training sample drawn from an evaluation seed");
    let mut rng = rng_for(episode_seed);
    let mut env = RobotEnv::new(RobotScene::sample(&mut rng, world), world.clone());
    let mut out = Vec::new();
    loop {
        let action = env.scene().expert_action(world);
        out.push(UnifiedSample {
            id: first_id + out.len() as u64,
            label: TaskLabel::Robot,
            system_prompt: ROBOT_SYSTEM_PROMPT.to_string(),
            image: env.render(),
            instruction: ROBOT_INSTRUCTION.to_string(),
            history: None,
            action: Action::Embodied(action),
        });
        let step = env.step_embodied(&action);
        if step.done {
            break;
        }
    }
    out
}

pub fn gen_robot_dataset(seed: u64, episodes: usize, world: &WorldParams) -> Result<Vec<UnifiedSample>> {
    if episodes == 0 {
        return Err(Error::EmptyDataset("robot dataset needs at least one episode".into()));
    }
    world.validate()?;
    let mut out = Vec::new();
    for e in 0..episodes as u64 {
        let first = ROBOT_ID_BASE + (e << 8);
        out.extend(robot_episode(robot_episode_seed(seed, e), first, world));
    }
    Ok(out)
}

/// Samples in a fixed pool plus a seeded visiting order. Each epoch
/// reshuffles the multiset with a seed derived from `(seed, epoch)`.
#[derive(Clone, Debug)]
pub struct TrainingStream {
    pool: Vec<UnifiedSample>,
    multiset: Vec<usize>,
    seed: u64,
}

impl TrainingStream {
    pub fn single(samples: Vec<UnifiedSample>, seed: u64) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyDataset("training stream".into()));
        }
        let multiset = (0..samples.len()).collect();
        Ok(Self {
            pool: samples,
            multiset,
            seed,
        })
    }

    pub fn pool(&self) -> &[UnifiedSample] {
        &self.pool
    }

    pub fn epoch_len(&self) -> usize {
        self.multiset.len()
    }

    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order = self.multiset.clone();
        order.shuffle(&mut rng_for(derive_seed(self.seed, "epoch", epoch)));
        order
    }

    /// First epoch as sample references.
    pub fn first_epoch(&self) -> Vec<&UnifiedSample> {
        self.epoch_order(0).into_iter().map(|i| &self.pool[i]).collect()
    }
}

/// GUI samples once each plus robot samples `factor` times each, shuffled.
pub fn mix_and_resample(gui: &[UnifiedSample], robot: &[UnifiedSample], factor: usize, seed: u64) -> Result<TrainingStream> {
    if factor == 0 {
        return Err(Error::Config("resample factor must be >= 1".into()));
    }
    if gui.is_empty() || robot.is_empty() {
        return Err(Error::EmptyDataset("mixing needs non-empty gui and robot datasets".into()));
    }
    let pool: Vec<UnifiedSample> = gui.iter().chain(robot).cloned().collect();
    let mut multiset: Vec<usize> = (0..gui.len()).collect();
    for _ in 0..factor {
        multiset.extend(gui.len()..gui.len() + robot.len());
    }
    Ok(TrainingStream { pool, multiset, seed })
}

/// Builds a label-homogeneous batch. The mask is true at position `p` exactly
/// when position `p + 1` holds an action token, and `targets[p]` is that
/// token.
pub fn collate(samples: &[&UnifiedSample], codec: &Codec, n_patches: usize) -> Result<Batch> {
    let first = samples.first().ok_or_else(|| Error::EmptyDataset("collate of nothing".into()))?;
    let label = first.label;
    let mut items = Vec::with_capacity(samples.len());
    for s in samples {
        if s.label != label {
            return Err(Error::MixedBatch);
        }
        let prompt = s.prompt_tokens(codec)?;
        let action = codec.encode_action(&s.action)?;
        let mut tokens = prompt.clone();
        tokens.extend_from_slice(&action);
        let len = n_patches + tokens.len();
        let action_start = n_patches + prompt.len();
        let mut targets = vec![0u32; len];
        let mut mask = vec![false; len];
        for p in 0..len - 1 {
            if p + 1 >= n_patches {
                targets[p] = tokens[p + 1 - n_patches];
            }
            mask[p] = p + 1 >= action_start;
        }
        items.push(BatchItem {
            sample_id: s.id,
            image: s.image.clone(),
            tokens,
            targets,
            mask,
        });
    }
    Ok(Batch { label, items })
}

/// Iterates label-homogeneous batches over an endless sequence of epochs.
/// Samples are routed into one buffer per label in stream order; a batch is
/// emitted whenever a buffer fills.
#[derive(Clone, Debug)]
pub struct BatchStream {
    stream: TrainingStream,
    batch_size: usize,
    epoch: u64,
    cursor: usize,
    order: Vec<usize>,
    buffers: BTreeMap<TaskLabel, Vec<usize>>,
}

impl BatchStream {
    pub fn new(stream: TrainingStream, batch_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        let order = stream.epoch_order(0);
        Ok(Self {
            stream,
            batch_size,
            epoch: 0,
            cursor: 0,
            order,
            buffers: BTreeMap::new(),
        })
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn pool(&self) -> &[UnifiedSample] {
        self.stream.pool()
    }

    /// Indices into the pool for the next batch.
    pub fn next_indices(&mut self) -> Vec<usize> {
        loop {
            if self.cursor == self.order.len() {
                self.epoch += 1;
                self.cursor = 0;
                self.order = self.stream.epoch_order(self.epoch);
            }
            let idx = self.order[self.cursor];
            self.cursor += 1;
            let label = self.stream.pool[idx].label;
            let buf = self.buffers.entry(label).or_default();
            buf.push(idx);
            if buf.len() == self.batch_size {
                return std::mem::take(buf);
            }
        }
    }

    pub fn next_batch(&mut self, codec: &Codec, n_patches: usize) -> Result<Batch> {
        let idx = self.next_indices();
        let refs: Vec<&UnifiedSample> = idx.iter().map(|&i| &self.stream.pool[i]).collect();
        collate(&refs, codec, n_patches)
    }
}

// ---------------------------------------------------------------------------
// Record files

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str, line: usize) -> Result<String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            _ => {
                return Err(Error::Parse {
                    pos: line,
                    msg: "bad escape in record".into(),
                })
            }
        }
    }
    Ok(out)
}

/// One sample per line, tab-separated:
/// `id  label  image(base64 f32 LE)  system_prompt  instruction  history  action`.
/// Embodied actions are seven comma-separated floats; GUI actions use the
/// canonical grammar. An empty history field means no history.
pub fn sample_to_line(s: &UnifiedSample) -> String {
    let bytes: Vec<u8> = s.image.iter().flat_map(|v| v.to_le_bytes()).collect();
    let action = match &s.action {
        Action::Gui(g) => g.to_string(),
        Action::Embodied(e) => e.to_array().iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(","),
    };
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}\t{}",
        s.id,
        s.label,
        B64.encode(bytes),
        escape(&s.system_prompt),
        escape(&s.instruction),
        escape(s.history.as_deref().unwrap_or("")),
        escape(&action)
    )
}

pub fn sample_from_line(line: &str, lineno: usize) -> Result<UnifiedSample> {
    let perr = |msg: &str| Error::Parse {
        pos: lineno,
        msg: msg.to_string(),
    };
    let f: Vec<&str> = line.split('\t').collect();
    if f.len() != 7 {
        return Err(perr("expected 7 tab-separated fields"));
    }
    let id = f[0].parse().map_err(|_| perr("bad id"))?;
    let label: TaskLabel = f[1].parse()?;
    let bytes = B64.decode(f[2]).map_err(|_| perr("bad base64 image"))?;
    if bytes.len() % 4 != 0 {
        return Err(perr("image byte count not a multiple of 4"));
    }
    let image = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let history = unescape(f[5], lineno)?;
    let action_text = unescape(f[6], lineno)?;
    let action = match label {
        TaskLabel::Gui => Action::Gui(parse_gui(&action_text)?),
        TaskLabel::Robot => {
            let vals: Vec<f32> = action_text
                .split(',')
                .map(|v| v.parse::<f32>().map_err(|_| perr("bad action component")))
                .collect::<Result<_>>()?;
            let arr: [f32; EMBODIED_DIMS] = vals.try_into().map_err(|_| perr("embodied action needs 7 components"))?;
            Action::Embodied(EmbodiedAction::from_array(arr))
        }
    };
    Ok(UnifiedSample {
        id,
        label,
        system_prompt: unescape(f[3], lineno)?,
        image,
        instruction: unescape(f[4], lineno)?,
        history: if history.is_empty() { None } else { Some(history) },
        action,
    })
}

pub fn write_dataset(path: &Path, samples: &[UnifiedSample]) -> Result<()> {
    let mut text = String::new();
    for s in samples {
        text.push_str(&sample_to_line(s));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Vec<UnifiedSample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| sample_from_line(l, i + 1))
        .collect()
}
