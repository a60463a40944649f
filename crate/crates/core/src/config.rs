//! Flat `section.key=value` configuration files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::checkpoint::{model_config_from_kv, model_config_kv};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::scene::WorldParams;
use crate::train::{TrainConfig, Variant};

/// Parses `key=value` lines. Blank lines and `#` comments are skipped;
/// repeated keys are rejected.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            pos: i + 1,
            msg: format!("expected key=value, got {line:?}"),
        })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Parse {
                pos: i + 1,
                msg: "empty key".into(),
            });
        }
        if out.insert(k.to_string(), v.trim().to_string()).is_some() {
            return Err(Error::Parse {
                pos: i + 1,
                msg: format!("duplicate key {k}"),
            });
        }
    }
    Ok(out)
}

/// Every setting a command can take, with defaults sized for one CPU core.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub world: WorldParams,
    pub data_seed: u64,
    pub gui_samples: usize,
    pub robot_episodes: usize,
    pub resample_factor: usize,
    pub k_bins: usize,
    /// Optional bin table file replacing the default top-of-vocabulary table.
    pub codec_table: Option<PathBuf>,
    pub eval_episodes: usize,
    pub ablation_seeds: Vec<u64>,
    pub ablation_variants: Vec<Variant>,
    pub analysis_cutoff: f64,
    pub analysis_layers: Vec<usize>,
    pub analysis_samples: usize,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: desk_model(),
            train: TrainConfig {
                steps: 12_000,
                batch_size: 16,
                learning_rate: 1e-3,
                ..TrainConfig::default()
            },
            world: WorldParams::default(),
            data_seed: 0,
            gui_samples: 8000,
            robot_episodes: 300,
            resample_factor: 5,
            k_bins: crate::codec::DEFAULT_K_BINS,
            codec_table: None,
            eval_episodes: 100,
            ablation_seeds: vec![0, 1, 2],
            ablation_variants: Variant::ALL.to_vec(),
            analysis_cutoff: crate::analysis::DEFAULT_K_CUTOFF,
            analysis_layers: vec![1, 3, 5, 6],
            analysis_samples: 32,
            output_dir: PathBuf::from("runs"),
        }
    }
}

/// Seven blocks of width 32 with the first two shared.
pub fn desk_model() -> ModelConfig {
    ModelConfig {
        n_layers: 7,
        share_threshold: 2,
        d_model: 32,
        n_heads: 2,
        d_ff: 128,
        max_seq_len: 64,
        vocab_size: 512,
        patch_size: 8,
        image_side: 32,
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|x| x.trim().parse().map_err(|_| Error::Config(format!("{key}: bad list item {x:?}"))))
        .collect()
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}={v:?} is not a valid value")))
}

impl RunConfig {
    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut kv = BTreeMap::new();
        model_config_kv(&self.model, &mut kv);
        self.train.write_kv(&mut kv);
        let w = &self.world;
        kv.insert("world.image_side".into(), w.image_side.to_string());
        kv.insert("world.gui_rows".into(), w.gui_rows.to_string());
        kv.insert("world.gui_cols".into(), w.gui_cols.to_string());
        kv.insert("world.gui_tolerance".into(), w.gui_tolerance.to_string());
        kv.insert("world.robot_step".into(), w.robot_step.to_string());
        kv.insert("world.grasp_radius".into(), w.grasp_radius.to_string());
        kv.insert("world.robot_max_steps".into(), w.robot_max_steps.to_string());
        kv.insert("world.robot_min_start_dist".into(), w.robot_min_start_dist.to_string());
        kv.insert("data.seed".into(), self.data_seed.to_string());
        kv.insert("data.gui_samples".into(), self.gui_samples.to_string());
        kv.insert("data.robot_episodes".into(), self.robot_episodes.to_string());
        kv.insert("data.resample_factor".into(), self.resample_factor.to_string());
        kv.insert("codec.k_bins".into(), self.k_bins.to_string());
        kv.insert(
            "codec.table".into(),
            self.codec_table.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        );
        kv.insert("eval.episodes".into(), self.eval_episodes.to_string());
        kv.insert("ablation.seeds".into(), join(&self.ablation_seeds));
        kv.insert("ablation.variants".into(), join(&self.ablation_variants));
        kv.insert("analysis.cutoff".into(), self.analysis_cutoff.to_string());
        kv.insert("analysis.layers".into(), join(&self.analysis_layers));
        kv.insert("analysis.samples".into(), self.analysis_samples.to_string());
        kv.insert("output.dir".into(), self.output_dir.display().to_string());
        kv
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_kv() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    /// Applies one `key=value` override.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let key = key.trim();
        let v = v.trim();
        if key.starts_with("model.") {
            let mut kv = BTreeMap::new();
            model_config_kv(&self.model, &mut kv);
            if kv.insert(key.to_string(), v.to_string()).is_none() {
                return Err(Error::Config(format!("unknown key {key}")));
            }
            self.model = model_config_from_kv(&kv)?;
            return Ok(());
        }
        if key.starts_with("train.") {
            let kv = BTreeMap::from([(key.to_string(), v.to_string())]);
            return self.train.read_kv(&kv);
        }
        let w = &mut self.world;
        match key {
            "world.image_side" => w.image_side = num(key, v)?,
            "world.gui_rows" => w.gui_rows = num(key, v)?,
            "world.gui_cols" => w.gui_cols = num(key, v)?,
            "world.gui_tolerance" => w.gui_tolerance = num(key, v)?,
            "world.robot_step" => w.robot_step = num(key, v)?,
            "world.grasp_radius" => w.grasp_radius = num(key, v)?,
            "world.robot_max_steps" => w.robot_max_steps = num(key, v)?,
            "world.robot_min_start_dist" => w.robot_min_start_dist = num(key, v)?,
            "data.seed" => self.data_seed = num(key, v)?,
            "data.gui_samples" => self.gui_samples = num(key, v)?,
            "data.robot_episodes" => self.robot_episodes = num(key, v)?,
            "data.resample_factor" => self.resample_factor = num(key, v)?,
            "codec.k_bins" => self.k_bins = num(key, v)?,
            "codec.table" => self.codec_table = (!v.is_empty()).then(|| PathBuf::from(v)),
            "eval.episodes" => self.eval_episodes = num(key, v)?,
            "ablation.seeds" => self.ablation_seeds = parse_list(key, v)?,
            "ablation.variants" => self.ablation_variants = parse_list(key, v)?,
            "analysis.cutoff" => self.analysis_cutoff = num(key, v)?,
            "analysis.layers" => self.analysis_layers = parse_list(key, v)?,
            "analysis.samples" => self.analysis_samples = num(key, v)?,
            "output.dir" => self.output_dir = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown key {key}"))),
        }
        Ok(())
    }

    /// Parses a `--set` style `key=value` string.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {pair:?} is not key=value")))?;
        self.set(k, v)
    }

    /// Defaults overridden by every key in `text`.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_kv(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.world.validate()?;
        if self.world.image_side != self.model.image_side {
            return Err(Error::Config(format!(
                "world.image_side={} but model.image_side={}",
                self.world.image_side, self.model.image_side
            )));
        }
        if self.gui_samples == 0 || self.robot_episodes == 0 || self.resample_factor == 0 || self.eval_episodes == 0 {
            return Err(Error::Config("dataset sizes, resample factor and eval episodes must be >= 1".into()));
        }
        if self.ablation_seeds.is_empty() || self.ablation_variants.is_empty() {
            return Err(Error::Config("ablation needs at least one seed and one variant".into()));
        }
        Ok(())
    }

    pub fn codec(&self) -> Result<crate::codec::Codec> {
        let mut codec = crate::codec::Codec::new(self.model.vocab_size, self.k_bins)?;
        if let Some(path) = &self.codec_table {
            codec.actions = crate::codec::ActionCodecConfig::load_table(path, self.model.vocab_size, codec.text.len())?;
        }
        Ok(codec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set_pair("model.n_layers=9").unwrap();
        cfg.set_pair("ablation.variants=layer_het,mixed_shared").unwrap();
        cfg.set_pair("codec.table=t.tsv").unwrap();
        let back = RunConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_and_malformed_keys_fail() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set_pair("model.width=3").is_err());
        assert!(cfg.set_pair("train.steps=ten").is_err());
        assert!(cfg.set_pair("nonsense").is_err());
        assert!(parse_kv("a=1\na=2").is_err());
        assert!(parse_kv("no equals sign").is_err());
    }

    #[test]
    fn defaults_are_valid() {
        RunConfig::default().validate().unwrap();
        assert!(RunConfig::default().codec().is_ok());
    }
}
