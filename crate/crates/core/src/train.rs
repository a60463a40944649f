//! Supervised training: masked next-token loss, AdamW, warmup + cosine.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::checkpoint::{params_hash, Checkpoint, OptimState};
use crate::codec::Codec;
use crate::data::{mix_and_resample, BatchStream, TrainingStream, UnifiedSample};
use crate::error::{Error, Result};
use crate::model::{LayerHetModel, TaskLabel, Topology};
use crate::params::ParamStore;
use crate::rng::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    GuiOnly,
    EaOnly,
    MixedShared,
    LayerHet,
    LayerHetHard,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::GuiOnly,
        Variant::EaOnly,
        Variant::MixedShared,
        Variant::LayerHetHard,
        Variant::LayerHet,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::GuiOnly => "gui_only",
            Variant::EaOnly => "ea_only",
            Variant::MixedShared => "mixed_shared",
            Variant::LayerHet => "layer_het",
            Variant::LayerHetHard => "layer_het_hard",
        }
    }

    pub fn topology(&self) -> Topology {
        match self {
            Variant::GuiOnly | Variant::EaOnly | Variant::MixedShared => Topology::Dense,
            Variant::LayerHet => Topology::LayerHet,
            Variant::LayerHetHard => Topology::LayerHetHard,
        }
    }

    /// Task families the variant trains on, and is therefore evaluated on.
    pub fn families(&self) -> &'static [TaskLabel] {
        match self {
            Variant::GuiOnly => &[TaskLabel::Gui],
            Variant::EaOnly => &[TaskLabel::Robot],
            _ => &TaskLabel::ALL,
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub variant: Variant,
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub seed: u64,
    /// Write a checkpoint every this many steps; 0 disables.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::LayerHet,
            steps: 20_000,
            batch_size: 32,
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_ratio: 0.03,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch size must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("learning rate must be >= 0 and betas in [0, 1)".into()));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) || !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config("eps must be > 0, weight decay >= 0, warmup ratio in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> u64 {
        ((self.warmup_ratio * self.steps as f64).ceil() as u64).max(1)
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        lr_at(step, self.steps, self.warmup_steps(), self.learning_rate)
    }

    pub fn write_kv(&self, out: &mut BTreeMap<String, String>) {
        out.insert("train.variant".into(), self.variant.as_str().into());
        out.insert("train.steps".into(), self.steps.to_string());
        out.insert("train.batch_size".into(), self.batch_size.to_string());
        out.insert("train.learning_rate".into(), self.learning_rate.to_string());
        out.insert("train.beta1".into(), self.beta1.to_string());
        out.insert("train.beta2".into(), self.beta2.to_string());
        out.insert("train.eps".into(), self.eps.to_string());
        out.insert("train.weight_decay".into(), self.weight_decay.to_string());
        out.insert("train.warmup_ratio".into(), self.warmup_ratio.to_string());
        out.insert("train.seed".into(), self.seed.to_string());
        out.insert("train.checkpoint_every".into(), self.checkpoint_every.to_string());
    }

    /// Reads `train.*` keys, keeping defaults for absent ones.
    pub fn read_kv(&mut self, kv: &BTreeMap<String, String>) -> Result<()> {
        fn num<T: FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("{k}={v:?} is not a valid number")))
        }
        for (k, v) in kv {
            let Some(key) = k.strip_prefix("train.") else { continue };
            match key {
                "variant" => self.variant = v.parse()?,
                "steps" => self.steps = num(k, v)?,
                "batch_size" => self.batch_size = num(k, v)?,
                "learning_rate" => self.learning_rate = num(k, v)?,
                "beta1" => self.beta1 = num(k, v)?,
                "beta2" => self.beta2 = num(k, v)?,
                "eps" => self.eps = num(k, v)?,
                "weight_decay" => self.weight_decay = num(k, v)?,
                "warmup_ratio" => self.warmup_ratio = num(k, v)?,
                "seed" => self.seed = num(k, v)?,
                "checkpoint_every" => self.checkpoint_every = num(k, v)?,
                _ => return Err(Error::Config(format!("unknown key {k}"))),
            }
        }
        Ok(())
    }
}

/// Linear warmup to `lr_max` over `warmup` steps, then cosine decay to zero
/// at `total`. Steps count from 1; step 0 is treated as step 1.
pub fn lr_at(step: u64, total: u64, warmup: u64, lr_max: f64) -> f64 {
    let s = step.max(1).min(total);
    if s <= warmup {
        return lr_max * s as f64 / warmup as f64;
    }
    let progress = (s - warmup) as f64 / (total - warmup) as f64;
    0.5 * lr_max * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
        }
    }

    /// One update of every parameter the last backward pass reached.
    /// Parameters it did not reach keep their values, moments and step
    /// counts. Weight decay applies to matrices only.
    pub fn update(&self, params: &mut ParamStore, state: &mut OptimState, lr: f64) {
        for (i, p) in params.iter_mut().enumerate() {
            if !p.touched {
                continue;
            }
            state.step[i] += 1;
            let t = state.step[i] as i32;
            let bc1 = 1.0 - self.beta1.powi(t);
            let bc2 = 1.0 - self.beta2.powi(t);
            let decay = if p.value.shape().len() >= 2 { self.weight_decay } else { 0.0 };
            let (m, v) = (&mut state.m[i], &mut state.v[i]);
            let w = p.value.data_mut();
            for j in 0..w.len() {
                let g = p.grad[j] as f64;
                let mj = self.beta1 * m[j] as f64 + (1.0 - self.beta1) * g;
                let vj = self.beta2 * v[j] as f64 + (1.0 - self.beta2) * g * g;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let mut wj = w[j] as f64;
                wj -= lr * decay * wj;
                wj -= lr * (mj / bc1) / ((vj / bc2).sqrt() + self.eps);
                w[j] = wj as f32;
            }
        }
    }
}

/// Builds the data stream a variant trains on.
pub fn variant_stream(
    variant: Variant,
    gui: &[UnifiedSample],
    robot: &[UnifiedSample],
    resample_factor: usize,
    seed: u64,
) -> Result<TrainingStream> {
    let s = derive_seed(seed, "stream", 0);
    match variant {
        Variant::GuiOnly => TrainingStream::single(gui.to_vec(), s),
        Variant::EaOnly => TrainingStream::single(robot.to_vec(), s),
        _ => mix_and_resample(gui, robot, resample_factor, s),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub loss: f32,
    pub lr: f64,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: LayerHetModel,
    pub optim: OptimState,
    pub step: u64,
    pub base_hash: String,
    pub log: Vec<LogRow>,
    adam: AdamW,
    batches: BatchStream,
    codec: Codec,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, model: LayerHetModel, stream: TrainingStream, codec: Codec) -> Result<Self> {
        cfg.validate()?;
        if codec.vocab_size() != model.config().vocab_size {
            return Err(Error::Config(format!(
                "codec vocabulary {} differs from model vocabulary {}",
                codec.vocab_size(),
                model.config().vocab_size
            )));
        }
        let batches = BatchStream::new(stream, cfg.batch_size)?;
        Ok(Self {
            adam: AdamW::from_config(&cfg),
            optim: OptimState::zeros(model.params()),
            base_hash: params_hash(model.params()),
            step: 0,
            log: Vec::new(),
            cfg,
            model,
            batches,
            codec,
        })
    }

    /// One optimizer step. A non-finite loss aborts before any update.
    pub fn train_step(&mut self) -> Result<f32> {
        let n_patches = self.model.config().n_patches();
        let batch = self.batches.next_batch(&self.codec, n_patches)?;
        let loss = self.model.compute_gradients(&batch)?;
        let next = self.step + 1;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("loss is {loss} at step {next}")));
        }
        let lr = self.cfg.lr_at(next);
        self.adam.update(self.model.params_mut(), &mut self.optim, lr);
        self.step = next;
        self.log.push(LogRow { step: next, loss, lr });
        Ok(loss)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_model(&self.model, self.step, self.base_hash.clone(), Some(self.optim.clone()));
        self.cfg.write_kv(&mut ck.meta);
        ck.meta.insert("data.epoch".into(), self.batches.epoch().to_string());
        ck.meta.insert("data.cursor".into(), self.batches.cursor().to_string());
        ck
    }

    pub fn log_csv(&self) -> String {
        let mut s = String::from("step,loss,lr\n");
        for r in &self.log {
            let _ = writeln!(s, "{},{},{}", r.step, r.loss, r.lr);
        }
        s
    }

    /// Runs to `cfg.steps`. With an output directory, writes `train_log.csv`,
    /// periodic `ckpt_<step>.bin` files and `final.bin`; on divergence writes
    /// `diverged.bin` and returns the numerical error.
    pub fn run(&mut self, out_dir: Option<&Path>) -> Result<()> {
        while self.step < self.cfg.steps {
            if let Err(e) = self.train_step() {
                if let (Error::Numerical(_), Some(dir)) = (&e, out_dir) {
                    self.checkpoint().save(&dir.join("diverged.bin"))?;
                    self.write_log(dir)?;
                }
                return Err(e);
            }
            if let Some(dir) = out_dir {
                let every = self.cfg.checkpoint_every;
                if every > 0 && self.step.is_multiple_of(every) && self.step < self.cfg.steps {
                    self.checkpoint().save(&dir.join(format!("ckpt_{}.bin", self.step)))?;
                }
            }
        }
        if let Some(dir) = out_dir {
            self.write_log(dir)?;
            self.checkpoint().save(&dir.join("final.bin"))?;
        }
        Ok(())
    }

    fn write_log(&self, dir: &Path) -> Result<()> {
        let p = dir.join("train_log.csv");
        std::fs::write(&p, self.log_csv()).map_err(|e| Error::io(&p, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_boundaries() {
        let total = 1000;
        let w = 30;
        let lr = 3e-4;
        assert_eq!(lr_at(0, total, w, lr), lr_at(1, total, w, lr));
        assert!((lr_at(1, total, w, lr) - lr / w as f64).abs() < 1e-15);
        assert!((lr_at(w, total, w, lr) - lr).abs() < 1e-15);
        assert!(lr_at(total, total, w, lr).abs() < 1e-9);
        let mut prev = lr;
        for s in w..=total {
            let v = lr_at(s, total, w, lr);
            assert!(v <= prev + 1e-18);
            prev = v;
        }
    }

    #[test]
    fn warmup_is_at_least_one_step() {
        let cfg = TrainConfig {
            steps: 10,
            warmup_ratio: 0.0,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.warmup_steps(), 1);
        assert_eq!(cfg.lr_at(1), cfg.learning_rate);
        let cfg = TrainConfig {
            steps: 1000,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.warmup_steps(), 30);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!("moe".parse::<Variant>().is_err());
    }

    #[test]
    fn config_kv_round_trip() {
        let cfg = TrainConfig {
            variant: Variant::LayerHetHard,
            steps: 123,
            learning_rate: 1e-3,
            seed: 9,
            ..TrainConfig::default()
        };
        let mut kv = BTreeMap::new();
        cfg.write_kv(&mut kv);
        let mut back = TrainConfig::default();
        back.read_kv(&kv).unwrap();
        assert_eq!(back, cfg);
    }
}
