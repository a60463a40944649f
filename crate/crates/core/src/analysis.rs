//! Parameter-update and feature similarity diagnostics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::checkpoint::{params_hash, Checkpoint};
use crate::codec::Codec;
use crate::data::UnifiedSample;
use crate::error::{Error, Result};
use crate::model::{branch_of, layer_of, LayerHetModel, SeqInput};
use crate::tensor::Tensor;

pub const DEFAULT_K_CUTOFF: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cosine {
    pub value: f64,
    /// Set when either vector has zero norm; `value` is then 0.
    pub degenerate: bool,
}

/// Cosine similarity accumulated in f64.
pub fn cosine(a: &[f32], b: &[f32]) -> Result<Cosine> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine", &[a.len()], &[b.len()]));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(Cosine {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(Cosine {
        value: (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

/// `after - base` for every tensor of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct DeltaSet {
    pub names: Vec<String>,
    pub deltas: BTreeMap<String, Tensor>,
}

impl DeltaSet {
    /// Fails with `NotComparable` unless `after` records `base` as its
    /// starting point and has the same names and shapes.
    pub fn between(base: &Checkpoint, after: &Checkpoint) -> Result<Self> {
        let hash = params_hash(&base.param_store()?);
        if after.base_hash != hash {
            return Err(Error::NotComparable(format!(
                "runs not comparable: run started from {}, base is {hash}",
                short(&after.base_hash)
            )));
        }
        if after.params.len() != base.params.len() {
            return Err(Error::NotComparable("runs not comparable: parameter sets differ".into()));
        }
        let mut names = Vec::with_capacity(base.params.len());
        let mut deltas = BTreeMap::new();
        for ((bn, bt), (an, at)) in base.params.iter().zip(&after.params) {
            if bn != an || bt.shape() != at.shape() {
                return Err(Error::NotComparable(format!("runs not comparable: {bn} vs {an}")));
            }
            let d: Vec<f32> = at.data().iter().zip(bt.data()).map(|(a, b)| a - b).collect();
            names.push(bn.clone());
            deltas.insert(bn.clone(), Tensor::new(bt.shape().to_vec(), d)?);
        }
        Ok(Self { names, deltas })
    }
}

fn short(h: &str) -> &str {
    &h[..h.len().min(12)]
}

#[derive(Clone, Debug, PartialEq)]
pub struct UpdateRow {
    pub gui_name: String,
    pub robot_name: String,
    pub layer: Option<usize>,
    /// Name with the block prefix and branch removed (`attn_q.weight`).
    pub submodule: String,
    pub cosine: Cosine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerCosine {
    pub layer: usize,
    pub cosine: Cosine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UpdateSimilarityReport {
    pub rows: Vec<UpdateRow>,
    /// One cosine per block over all of its paired tensors concatenated.
    pub layers: Vec<LayerCosine>,
    pub cutoff: f64,
    /// Smallest layer whose whole-layer cosine falls below `cutoff`.
    pub recommended_k: Option<usize>,
    pub probe_steps: Option<u64>,
}

/// Submodule part of a parameter name.
pub fn submodule_of(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    if parts.first() == Some(&"blocks") && parts.len() > 3 {
        parts[3..].join(".")
    } else {
        name.to_string()
    }
}

fn rob_partner(name: &str) -> String {
    name.split('.')
        .map(|p| if p == "gui" { "rob" } else { p })
        .collect::<Vec<_>>()
        .join(".")
}

/// Pairs parameters across the two runs: identical names, plus each gui
/// branch tensor with its rob counterpart.
pub fn pair_names(gui: &DeltaSet, robot: &DeltaSet) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for n in &gui.names {
        let partner = match branch_of(n) {
            Some("rob") => continue,
            Some("gui") => rob_partner(n),
            _ => n.clone(),
        };
        if let (Some(a), Some(b)) = (gui.deltas.get(n), robot.deltas.get(&partner)) {
            if a.shape() == b.shape() {
                out.push((n.clone(), partner));
            }
        }
    }
    out
}

pub fn param_update_similarity(
    base: &Checkpoint,
    after_gui: &Checkpoint,
    after_rob: &Checkpoint,
    cutoff: f64,
) -> Result<UpdateSimilarityReport> {
    if after_gui.config != base.config || after_rob.config != base.config {
        return Err(Error::NotComparable("runs not comparable: model configs differ".into()));
    }
    let dg = DeltaSet::between(base, after_gui)?;
    let dr = DeltaSet::between(base, after_rob)?;
    let pairs = pair_names(&dg, &dr);
    let mut rows = Vec::with_capacity(pairs.len());
    let mut per_layer: BTreeMap<usize, (Vec<f32>, Vec<f32>)> = BTreeMap::new();
    for (gn, rn) in pairs {
        let (a, b) = (&dg.deltas[&gn], &dr.deltas[&rn]);
        let layer = layer_of(&gn);
        if let Some(l) = layer {
            let e = per_layer.entry(l).or_default();
            e.0.extend_from_slice(a.data());
            e.1.extend_from_slice(b.data());
        }
        rows.push(UpdateRow {
            submodule: submodule_of(&gn),
            cosine: cosine(a.data(), b.data())?,
            layer,
            gui_name: gn,
            robot_name: rn,
        });
    }
    let layers = per_layer
        .into_iter()
        .map(|(layer, (a, b))| Ok(LayerCosine { layer, cosine: cosine(&a, &b)? }))
        .collect::<Result<Vec<_>>>()?;
    let recommended_k = layers
        .iter()
        .find(|l| !l.cosine.degenerate && l.cosine.value < cutoff)
        .map(|l| l.layer);
    let probe_steps = match (after_gui.step, after_rob.step) {
        (a, b) if a == b => Some(a),
        _ => None,
    };
    Ok(UpdateSimilarityReport {
        rows,
        layers,
        cutoff,
        recommended_k,
        probe_steps,
    })
}

impl UpdateSimilarityReport {
    /// `layer,submodule,cosine,degenerate`; non-block tensors have an empty
    /// layer and their full name as submodule.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,submodule,cosine,degenerate\n");
        for r in &self.rows {
            let layer = r.layer.map(|l| l.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{layer},{},{},{}", r.submodule, r.cosine.value, r.cosine.degenerate as u8);
        }
        s
    }

    pub fn layers_csv(&self) -> String {
        let mut s = String::from("layer,cosine,degenerate\n");
        for l in &self.layers {
            let _ = writeln!(s, "{},{},{}", l.layer, l.cosine.value, l.cosine.degenerate as u8);
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "cutoff={}", self.cutoff);
        let _ = writeln!(
            s,
            "recommended_k={}",
            self.recommended_k.map(|k| k.to_string()).unwrap_or_else(|| "none".into())
        );
        let _ = writeln!(
            s,
            "probe_steps={}",
            self.probe_steps.map(|k| k.to_string()).unwrap_or_else(|| "mixed".into())
        );
        let vals: Vec<f64> = self.layers.iter().filter(|l| !l.cosine.degenerate).map(|l| l.cosine.value).collect();
        let _ = writeln!(s, "depth_trend={}", trend(&vals));
        s
    }

    /// Line chart of per-layer cosines for each block matrix kind.
    pub fn to_svg(&self) -> String {
        const W: f64 = 480.0;
        const H: f64 = 240.0;
        const PAD: f64 = 30.0;
        let kinds = [
            ("attn_q.weight", "#1f77b4"),
            ("attn_k.weight", "#ff7f0e"),
            ("attn_v.weight", "#2ca02c"),
            ("attn_o.weight", "#d62728"),
            ("ffn_up.weight", "#9467bd"),
            ("ffn_down.weight", "#8c564b"),
        ];
        let max_layer = self.rows.iter().filter_map(|r| r.layer).max().unwrap_or(0).max(1) as f64;
        let px = |l: usize| PAD + (W - 2.0 * PAD) * l as f64 / max_layer;
        let py = |c: f64| H - PAD - (H - 2.0 * PAD) * (c + 1.0) / 2.0;
        let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\">\n");
        let _ = writeln!(
            s,
            "<line x1=\"{PAD}\" y1=\"{y}\" x2=\"{x2}\" y2=\"{y}\" stroke=\"#999\"/>",
            y = py(0.0),
            x2 = W - PAD
        );
        for (i, (kind, color)) in kinds.iter().enumerate() {
            let pts: Vec<String> = self
                .rows
                .iter()
                .filter(|r| r.submodule == *kind && !r.cosine.degenerate)
                .filter_map(|r| r.layer.map(|l| format!("{:.1},{:.1}", px(l), py(r.cosine.value))))
                .collect();
            if pts.is_empty() {
                continue;
            }
            let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{color}\" points=\"{}\"/>", pts.join(" "));
            let _ = writeln!(
                s,
                "<text x=\"{}\" y=\"{}\" font-size=\"10\" fill=\"{color}\">{kind}</text>",
                W - PAD - 70.0,
                PAD + 12.0 * i as f64
            );
        }
        s.push_str("</svg>\n");
        s
    }

    pub fn write(&self, dir: &Path, svg: bool) -> Result<()> {
        write_file(&dir.join("update_similarity.csv"), &self.to_csv())?;
        write_file(&dir.join("layer_similarity.csv"), &self.layers_csv())?;
        write_file(&dir.join("update_summary.txt"), &self.summary())?;
        if svg {
            write_file(&dir.join("update_similarity.svg"), &self.to_svg())?;
        }
        Ok(())
    }
}

fn trend(vals: &[f64]) -> &'static str {
    if vals.len() < 2 {
        return "undetermined";
    }
    if vals.windows(2).all(|w| w[1] <= w[0]) {
        "non-increasing"
    } else if vals.windows(2).all(|w| w[1] >= w[0]) {
        "non-decreasing"
    } else if vals[vals.len() - 1] < vals[0] {
        "mixed, lower at depth"
    } else {
        "mixed, higher at depth"
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSimilarityMatrix {
    pub layer: usize,
    pub n_gui: usize,
    pub n_robot: usize,
    /// Row-major `n_gui × n_robot`.
    pub values: Vec<f64>,
    pub mean: f64,
}

impl FeatureSimilarityMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n_robot + j]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for i in 0..self.n_gui {
            let row: Vec<String> = (0..self.n_robot).map(|j| self.get(i, j).to_string()).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }
}

/// Mean over positions of the residual stream after each requested block,
/// for the full training sequence (prompt and action) of `sample`, routed
/// by the sample's own label.
pub fn pooled_features(model: &LayerHetModel, sample: &UnifiedSample, codec: &Codec, layers: &[usize]) -> Result<Vec<Vec<f32>>> {
    let mut tokens = sample.prompt_tokens(codec)?;
    tokens.extend(codec.encode_action(&sample.action)?);
    let states = model.hidden_states(
        SeqInput {
            image: &sample.image,
            tokens: &tokens,
        },
        sample.label,
        layers,
    )?;
    Ok(states
        .iter()
        .map(|t| {
            let (rows, cols) = (t.rows(), t.cols());
            let mut acc = vec![0.0f64; cols];
            for r in 0..rows {
                for (a, &v) in acc.iter_mut().zip(t.row(r)) {
                    *a += v as f64;
                }
            }
            acc.iter().map(|&a| (a / rows as f64) as f32).collect()
        })
        .collect())
}

pub fn feature_similarity(
    model_gui: &LayerHetModel,
    model_rob: &LayerHetModel,
    gui_samples: &[UnifiedSample],
    rob_samples: &[UnifiedSample],
    layers: &[usize],
    codec: &Codec,
) -> Result<Vec<FeatureSimilarityMatrix>> {
    if gui_samples.is_empty() || rob_samples.is_empty() {
        return Err(Error::EmptyDataset("feature similarity needs samples of both families".into()));
    }
    let fg = gui_samples
        .iter()
        .map(|s| pooled_features(model_gui, s, codec, layers))
        .collect::<Result<Vec<_>>>()?;
    let fr = rob_samples
        .iter()
        .map(|s| pooled_features(model_rob, s, codec, layers))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(layers.len());
    for (li, &layer) in layers.iter().enumerate() {
        let mut values = Vec::with_capacity(fg.len() * fr.len());
        for a in &fg {
            for b in &fr {
                values.push(cosine(&a[li], &b[li])?.value);
            }
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        out.push(FeatureSimilarityMatrix {
            layer,
            n_gui: fg.len(),
            n_robot: fr.len(),
            values,
            mean,
        });
    }
    Ok(out)
}

/// Writes `feature_similarity_L<k>.csv` per matrix and `feature_means.csv`.
pub fn write_feature_similarity(dir: &Path, mats: &[FeatureSimilarityMatrix]) -> Result<()> {
    let mut means = String::from("layer,mean,n_gui,n_robot,pooling\n");
    for m in mats {
        write_file(&dir.join(format!("feature_similarity_L{}.csv", m.layer)), &m.to_csv())?;
        let _ = writeln!(means, "{},{},{},{},mean_over_positions", m.layer, m.mean, m.n_gui, m.n_robot);
    }
    write_file(&dir.join("feature_means.csv"), &means)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_hand_cases() {
        let v = [0.3f32, -1.2, 2.0];
        let neg: Vec<f32> = v.iter().map(|x| -x).collect();
        assert!((cosine(&v, &v).unwrap().value - 1.0).abs() < 1e-12);
        assert!((cosine(&v, &neg).unwrap().value + 1.0).abs() < 1e-12);
        let c = cosine(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((c.value - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn zero_vector_is_degenerate() {
        let c = cosine(&[0.0, 0.0], &[1.0, 2.0]).unwrap();
        assert!(c.degenerate);
        assert_eq!(c.value, 0.0);
        assert!(cosine(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn submodule_strips_block_prefix() {
        assert_eq!(submodule_of("blocks.3.rob.attn_q.weight"), "attn_q.weight");
        assert_eq!(submodule_of("head.gui.weight"), "head.gui.weight");
        assert_eq!(rob_partner("blocks.3.gui.ln1.gain"), "blocks.3.rob.ln1.gain");
    }
}
