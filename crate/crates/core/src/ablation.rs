//! Trains every variant on the same data and seeds, then evaluates each on
//! the families it was trained for.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::config::RunConfig;
use crate::data::{gen_gui_dataset, gen_robot_dataset, UnifiedSample};
use crate::env::evaluate_model;
use crate::error::{Error, Result};
use crate::model::{LayerHetModel, TaskLabel};
use crate::rng::derive_seed;
use crate::train::{variant_stream, TrainConfig, Trainer, Variant};

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub family: TaskLabel,
    pub seed: u64,
    /// `None` when the run failed.
    pub success_rate: Option<f64>,
    pub episodes: usize,
    pub status: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub variant: Variant,
    /// Seed-averaged success per trained family; `None` for untrained ones.
    pub gui: Option<f64>,
    pub robot: Option<f64>,
    pub avg: Option<f64>,
    pub complete: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationResults {
    pub rows: Vec<AblationRow>,
}

pub fn data_seed(seed: u64) -> u64 {
    derive_seed(seed, "data", 0)
}

pub fn init_seed(seed: u64) -> u64 {
    derive_seed(seed, "init", 0)
}

pub fn datasets(cfg: &RunConfig, seed: u64) -> Result<(Vec<UnifiedSample>, Vec<UnifiedSample>)> {
    let s = data_seed(seed);
    Ok((
        gen_gui_dataset(s, cfg.gui_samples, &cfg.world)?,
        gen_robot_dataset(s, cfg.robot_episodes, &cfg.world)?,
    ))
}

/// Trains one variant for one seed, returning the trained model.
pub fn train_variant(
    cfg: &RunConfig,
    variant: Variant,
    seed: u64,
    gui: &[UnifiedSample],
    robot: &[UnifiedSample],
    out_dir: Option<&Path>,
) -> Result<LayerHetModel> {
    let codec = cfg.codec()?;
    let model = LayerHetModel::new(cfg.model.clone(), variant.topology(), init_seed(seed))?;
    let tcfg = TrainConfig {
        variant,
        seed,
        ..cfg.train.clone()
    };
    let stream = variant_stream(variant, gui, robot, cfg.resample_factor, seed)?;
    let mut trainer = Trainer::new(tcfg, model, stream, codec)?;
    trainer.run(out_dir)?;
    Ok(trainer.model)
}

pub fn run_ablation(cfg: &RunConfig, out_dir: Option<&Path>, progress: &mut dyn FnMut(&str)) -> Result<AblationResults> {
    cfg.validate()?;
    let codec = cfg.codec()?;
    let mut rows = Vec::new();
    for &seed in &cfg.ablation_seeds {
        let (gui, robot) = datasets(cfg, seed)?;
        for &variant in &cfg.ablation_variants {
            let dir = match out_dir {
                Some(d) => {
                    let p = d.join(variant.as_str()).join(format!("seed{seed}"));
                    std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
                    Some(p)
                }
                None => None,
            };
            progress(&format!("training {variant} seed {seed}"));
            let trained = train_variant(cfg, variant, seed, &gui, &robot, dir.as_deref());
            for &family in variant.families() {
                let row = match &trained {
                    Ok(model) => match evaluate_model(model, &codec, family, cfg.eval_episodes, seed, &cfg.world) {
                        Ok(report) => {
                            if let Some(d) = &dir {
                                report.write(&d.join(format!("eval_{family}.txt")))?;
                            }
                            AblationRow {
                                variant,
                                family,
                                seed,
                                success_rate: Some(report.success_rate),
                                episodes: report.episodes,
                                status: "ok".into(),
                            }
                        }
                        Err(e) => failed_row(variant, family, seed, &e),
                    },
                    Err(e) => failed_row(variant, family, seed, e),
                };
                progress(&format!(
                    "{variant} seed {seed} {family}: {}",
                    row.success_rate.map(|r| r.to_string()).unwrap_or_else(|| row.status.clone())
                ));
                rows.push(row);
            }
        }
    }
    let results = AblationResults { rows };
    if let Some(d) = out_dir {
        let p = d.join("ablation_results.csv");
        std::fs::write(&p, results.results_csv()).map_err(|e| Error::io(&p, e))?;
        let p = d.join("ablation_summary.csv");
        std::fs::write(&p, results.summary_csv()).map_err(|e| Error::io(&p, e))?;
    }
    Ok(results)
}

fn failed_row(variant: Variant, family: TaskLabel, seed: u64, e: &Error) -> AblationRow {
    AblationRow {
        variant,
        family,
        seed,
        success_rate: None,
        episodes: 0,
        status: format!("failed: {}", e.to_string().replace([',', '\n'], ";")),
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "-".into())
}

impl AblationResults {
    pub fn results_csv(&self) -> String {
        let mut s = String::from("variant,family,seed,success_rate,episodes,status\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.variant,
                r.family,
                r.seed,
                cell(r.success_rate),
                r.episodes,
                r.status
            );
        }
        s
    }

    /// Success of `variant` on `family` for one seed.
    pub fn rate(&self, variant: Variant, family: TaskLabel, seed: u64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.family == family && r.seed == seed)
            .and_then(|r| r.success_rate)
    }

    /// Mean over the variant's families for one seed.
    pub fn seed_average(&self, variant: Variant, seed: u64) -> Option<f64> {
        let vals: Option<Vec<f64>> = variant.families().iter().map(|&f| self.rate(variant, f, seed)).collect();
        mean(&vals?)
    }

    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut variants: Vec<Variant> = Vec::new();
        for r in &self.rows {
            if !variants.contains(&r.variant) {
                variants.push(r.variant);
            }
        }
        variants
            .into_iter()
            .map(|variant| {
                let mut by_family: BTreeMap<TaskLabel, Vec<f64>> = BTreeMap::new();
                let mut complete = true;
                for r in self.rows.iter().filter(|r| r.variant == variant) {
                    match r.success_rate {
                        Some(v) => by_family.entry(r.family).or_default().push(v),
                        None => complete = false,
                    }
                }
                let gui = by_family.get(&TaskLabel::Gui).and_then(|v| mean(v));
                let robot = by_family.get(&TaskLabel::Robot).and_then(|v| mean(v));
                let fams: Vec<f64> = variant
                    .families()
                    .iter()
                    .filter_map(|f| match f {
                        TaskLabel::Gui => gui,
                        TaskLabel::Robot => robot,
                    })
                    .collect();
                let avg = if fams.len() == variant.families().len() { mean(&fams) } else { None };
                SummaryRow {
                    variant,
                    gui,
                    robot,
                    avg,
                    complete,
                }
            })
            .collect()
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("variant,gui,robot,avg,complete\n");
        for r in self.summary() {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.variant,
                cell(r.gui),
                cell(r.robot),
                cell(r.avg),
                if r.complete { "yes" } else { "incomplete" }
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(variant: Variant, family: TaskLabel, seed: u64, rate: Option<f64>) -> AblationRow {
        AblationRow {
            variant,
            family,
            seed,
            success_rate: rate,
            episodes: 10,
            status: if rate.is_some() { "ok".into() } else { "failed: x".into() },
        }
    }

    #[test]
    fn summary_averages_families() {
        let res = AblationResults {
            rows: vec![
                row(Variant::GuiOnly, TaskLabel::Gui, 0, Some(0.5)),
                row(Variant::GuiOnly, TaskLabel::Gui, 1, Some(0.7)),
                row(Variant::LayerHet, TaskLabel::Gui, 0, Some(0.4)),
                row(Variant::LayerHet, TaskLabel::Robot, 0, Some(0.2)),
                row(Variant::MixedShared, TaskLabel::Gui, 0, None),
                row(Variant::MixedShared, TaskLabel::Robot, 0, Some(0.1)),
            ],
        };
        let s = res.summary();
        assert!((s[0].gui.unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(s[0].robot, None);
        assert!((s[0].avg.unwrap() - 0.6).abs() < 1e-12);
        assert!((s[1].avg.unwrap() - 0.3).abs() < 1e-12);
        assert!(!s[2].complete);
        assert_eq!(s[2].avg, None);
        assert!(res.summary_csv().contains("gui_only,0.6,-,0.6,yes"));
        assert!((res.seed_average(Variant::LayerHet, 0).unwrap() - 0.3).abs() < 1e-12);
    }
}
