use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use layerhet::ablation::{datasets, init_seed, run_ablation};
use layerhet::analysis::{feature_similarity, param_update_similarity, write_feature_similarity};
use layerhet::checkpoint::Checkpoint;
use layerhet::codec::{decode_embodied, decode_gui, encode_embodied, encode_gui, parse_gui, ActionCodecConfig, EmbodiedAction, TextVocab, EMBODIED_DIMS};
use layerhet::config::RunConfig;
use layerhet::data::{gen_gui_dataset, gen_robot_dataset, read_dataset, write_dataset, DatasetManifest};
use layerhet::env::evaluate_model;
use layerhet::model::{LayerHetModel, TaskLabel, Topology};
use layerhet::train::{variant_stream, Trainer, Variant};
use layerhet::{Error, Result};

const EXIT_HELP: &str = "\
Exit codes:
  0  success
  2  usage error or invalid input
  3  file could not be read or written
  4  config or checkpoint mismatch (bad version, truncated file, incomparable runs)
  5  numerical failure (training diverged)

Outputs go under the run directory: `output.dir` from the config, overridden
by the OMNI_RUN_DIR environment variable.";

#[derive(Parser)]
#[command(name = "layerhet", version, about = "Layer-heterogeneity agent: data, training, evaluation, analysis", after_help = EXIT_HELP)]
struct Cli {
    /// Config file of `section.key=value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.steps=500`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a dataset file plus manifest.
    GenData(GenDataArgs),
    /// Train one variant.
    Train(TrainArgs),
    /// Evaluate a checkpoint in closed loop.
    Eval(EvalArgs),
    /// Similarity diagnostics.
    #[command(subcommand)]
    Analyze(AnalyzeCmd),
    /// Encode or decode single actions.
    #[command(subcommand)]
    Codec(CodecCmd),
    /// Train and evaluate every variant over several seeds.
    Ablation(AblationArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Family {
    Gui,
    Robot,
}

impl From<Family> for TaskLabel {
    fn from(f: Family) -> Self {
        match f {
            Family::Gui => TaskLabel::Gui,
            Family::Robot => TaskLabel::Robot,
        }
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, value_enum)]
    family: Family,
    /// Number of GUI samples.
    #[arg(long)]
    n: Option<usize>,
    /// Number of robot episodes.
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    /// Start from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    init: Option<PathBuf>,
    /// GUI dataset file; generated from the config when absent.
    #[arg(long)]
    gui_data: Option<PathBuf>,
    /// Robot dataset file; generated from the config when absent.
    #[arg(long)]
    robot_data: Option<PathBuf>,
    /// Run directory name under `<root>/train`.
    #[arg(long)]
    name: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum)]
    family: Family,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum AnalyzeCmd {
    /// Cosine similarity of parameter updates from a common base.
    Updates {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        gui: PathBuf,
        #[arg(long)]
        robot: PathBuf,
        /// Also write an SVG line chart.
        #[arg(long)]
        svg: bool,
    },
    /// Cross-family feature similarity matrices.
    Features {
        #[arg(long)]
        gui_model: PathBuf,
        #[arg(long)]
        robot_model: PathBuf,
        /// Comma-separated block indices; defaults to `analysis.layers`.
        #[arg(long, value_delimiter = ',')]
        layers: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum CodecCmd {
    /// Seven comma-separated values in [-1, 1] to token ids.
    EncodeEmbodied {
        action: String,
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Seven token ids (space or comma separated) to values.
    DecodeEmbodied {
        tokens: String,
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// A GUI action string such as `click(x=0.5,y=0.25)` to token ids.
    EncodeGui { action: String },
    /// Token ids back to the canonical GUI action string.
    DecodeGui { tokens: String },
}

#[derive(Args)]
struct AblationArgs {
    /// Comma-separated seeds; defaults to `ablation.seeds`.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => 3,
        Error::Config(_) | Error::CheckpointMismatch(_) | Error::Version(_) | Error::Truncated(_) | Error::NotComparable(_) => 4,
        Error::Numerical(_) => 5,
        _ => 2,
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for s in &cli.sets {
        cfg.set_pair(s)?;
    }
    if let Ok(dir) = std::env::var("OMNI_RUN_DIR") {
        if !dir.is_empty() {
            cfg.output_dir = PathBuf::from(dir);
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write(p: &Path, text: &str) -> Result<()> {
    std::fs::write(p, text).map_err(|e| Error::io(p, e))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match cli.cmd {
        Cmd::GenData(a) => gen_data(&cfg, a),
        Cmd::Train(a) => train(cfg, a),
        Cmd::Eval(a) => eval(&cfg, a),
        Cmd::Analyze(a) => analyze(&cfg, a),
        Cmd::Codec(c) => codec(&cfg, c),
        Cmd::Ablation(a) => ablation(cfg, a),
    }
}

fn gen_data(cfg: &RunConfig, a: GenDataArgs) -> Result<()> {
    let family = TaskLabel::from(a.family);
    let count = match family {
        TaskLabel::Gui => a.n.unwrap_or(cfg.gui_samples),
        TaskLabel::Robot => a.episodes.unwrap_or(cfg.robot_episodes),
    };
    let manifest = DatasetManifest {
        seed: a.seed,
        family,
        count,
        world: cfg.world.clone(),
        resample_factor: cfg.resample_factor,
    };
    let samples = manifest.generate()?;
    let dir = cfg.output_dir.join("data").join(format!("{family}_seed{}", a.seed));
    mkdir(&dir)?;
    write_dataset(&dir.join("samples.tsv"), &samples)?;
    write(&dir.join("manifest.txt"), &manifest.to_text())?;
    println!("{} samples -> {}", samples.len(), dir.display());
    Ok(())
}

fn train(mut cfg: RunConfig, a: TrainArgs) -> Result<()> {
    if let Some(v) = a.variant {
        cfg.train.variant = v;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    cfg.validate()?;
    let variant = cfg.train.variant;
    let seed = cfg.train.seed;
    let codec = cfg.codec()?;

    let (mut gui, mut robot) = (None, None);
    if let Some(p) = &a.gui_data {
        gui = Some(read_dataset(p)?);
    }
    if let Some(p) = &a.robot_data {
        robot = Some(read_dataset(p)?);
    }
    if gui.is_none() || robot.is_none() {
        let (g, r) = datasets(&cfg, cfg.data_seed)?;
        gui.get_or_insert(g);
        robot.get_or_insert(r);
    }
    let (gui, robot) = (gui.unwrap(), robot.unwrap());

    let model = match &a.init {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.config != cfg.model {
                return Err(Error::CheckpointMismatch(format!(
                    "{} was built with a different model config",
                    p.display()
                )));
            }
            let m = ck.model()?;
            if m.topology() == variant.topology() {
                m
            } else if m.topology() == Topology::Dense {
                m.expand_from_dense(variant.topology())?
            } else {
                return Err(Error::CheckpointMismatch(format!(
                    "cannot start a {} run from a {} checkpoint",
                    variant.topology().as_str(),
                    m.topology().as_str()
                )));
            }
        }
        None => LayerHetModel::new(cfg.model.clone(), variant.topology(), init_seed(seed))?,
    };

    let name = a.name.unwrap_or_else(|| format!("{variant}_seed{seed}"));
    let dir = cfg.output_dir.join("train").join(name);
    mkdir(&dir)?;
    cfg.save(&dir.join("config.txt"))?;
    let stream = variant_stream(variant, &gui, &robot, cfg.resample_factor, seed)?;
    let mut trainer = Trainer::new(cfg.train.clone(), model, stream, codec)?;
    trainer.checkpoint().save(&dir.join("init.bin"))?;
    trainer.run(Some(&dir))?;
    let last = trainer.log.last().map(|r| r.loss).unwrap_or(f32::NAN);
    println!("trained {variant} for {} steps, final loss {last} -> {}", trainer.step, dir.display());
    Ok(())
}

fn eval(cfg: &RunConfig, a: EvalArgs) -> Result<()> {
    let family = TaskLabel::from(a.family);
    let ck = Checkpoint::load(&a.checkpoint)?;
    let model = ck.model()?;
    let mut ccfg = cfg.clone();
    ccfg.model = ck.config.clone();
    let codec = ccfg.codec()?;
    let episodes = a.episodes.unwrap_or(cfg.eval_episodes);
    let report = evaluate_model(&model, &codec, family, episodes, a.seed, &cfg.world)?;
    let variant = ck.meta.get("train.variant").cloned().unwrap_or_else(|| "unknown".into());
    let stem = a
        .checkpoint
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into());
    let dir = cfg.output_dir.join("eval");
    mkdir(&dir)?;
    report.write(&dir.join(format!("{variant}_{stem}_{family}_seed{}.txt", a.seed)))?;
    report.append_csv(&dir.join("results.csv"), &variant)?;
    print!("{}", report.to_kv());
    Ok(())
}

fn analyze(cfg: &RunConfig, a: AnalyzeCmd) -> Result<()> {
    match a {
        AnalyzeCmd::Updates { base, gui, robot, svg } => {
            let report = param_update_similarity(
                &Checkpoint::load(&base)?,
                &Checkpoint::load(&gui)?,
                &Checkpoint::load(&robot)?,
                cfg.analysis_cutoff,
            )?;
            let dir = cfg.output_dir.join("analysis").join("updates");
            mkdir(&dir)?;
            report.write(&dir, svg)?;
            print!("{}", report.summary());
            Ok(())
        }
        AnalyzeCmd::Features {
            gui_model,
            robot_model,
            layers,
            seed,
        } => {
            let mg = Checkpoint::load(&gui_model)?.model()?;
            let mr = Checkpoint::load(&robot_model)?.model()?;
            if mg.config() != mr.config() {
                return Err(Error::CheckpointMismatch("the two models have different configs".into()));
            }
            let mut ccfg = cfg.clone();
            ccfg.model = mg.config().clone();
            let codec = ccfg.codec()?;
            let layers = if layers.is_empty() { cfg.analysis_layers.clone() } else { layers };
            let n = cfg.analysis_samples;
            let gui = gen_gui_dataset(seed, n, &cfg.world)?;
            let mut robot = gen_robot_dataset(seed, n, &cfg.world)?;
            robot.truncate(n);
            let mats = feature_similarity(&mg, &mr, &gui, &robot, &layers, &codec)?;
            let dir = cfg.output_dir.join("analysis").join("features");
            mkdir(&dir)?;
            write_feature_similarity(&dir, &mats)?;
            for m in &mats {
                println!("layer {} mean {}", m.layer, m.mean);
            }
            Ok(())
        }
    }
}

fn parse_ids(s: &str) -> Result<Vec<u32>> {
    s.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse()
                .map_err(|_| Error::InvalidArgument(format!("{t:?} is not a token id")))
        })
        .collect()
}

fn action_table(cfg: &RunConfig, table: &Option<PathBuf>) -> Result<ActionCodecConfig> {
    let text_len = TextVocab::new().len();
    match table {
        Some(p) => ActionCodecConfig::load_table(p, u32::MAX as usize, text_len),
        None => Ok(cfg.codec()?.actions),
    }
}

fn join_ids(ids: &[u32]) -> String {
    ids.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
}

fn codec(cfg: &RunConfig, c: CodecCmd) -> Result<()> {
    match c {
        CodecCmd::EncodeEmbodied { action, table } => {
            let vals: Vec<f32> = action
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse()
                        .map_err(|_| Error::InvalidArgument(format!("{v:?} is not a number")))
                })
                .collect::<Result<_>>()?;
            let arr: [f32; EMBODIED_DIMS] = vals
                .try_into()
                .map_err(|v: Vec<f32>| Error::InvalidArgument(format!("expected 7 values, got {}", v.len())))?;
            let ids = encode_embodied(&EmbodiedAction::from_array(arr), &action_table(cfg, &table)?)?;
            println!("{}", join_ids(&ids));
        }
        CodecCmd::DecodeEmbodied { tokens, table } => {
            let a = decode_embodied(&parse_ids(&tokens)?, &action_table(cfg, &table)?)?;
            let vals: Vec<String> = a.to_array().iter().map(|v| v.to_string()).collect();
            println!("{}", vals.join(","));
        }
        CodecCmd::EncodeGui { action } => {
            let ids = encode_gui(&parse_gui(&action)?, &TextVocab::new())?;
            println!("{}", join_ids(&ids));
        }
        CodecCmd::DecodeGui { tokens } => {
            println!("{}", decode_gui(&parse_ids(&tokens)?, &TextVocab::new())?);
        }
    }
    Ok(())
}

fn ablation(mut cfg: RunConfig, a: AblationArgs) -> Result<()> {
    if !a.seeds.is_empty() {
        cfg.ablation_seeds = a.seeds;
    }
    let dir = cfg.output_dir.join("ablation");
    mkdir(&dir)?;
    cfg.save(&dir.join("config.txt"))?;
    let results = run_ablation(&cfg, Some(&dir), &mut |msg| eprintln!("{msg}"))?;
    print!("{}", results.summary_csv());
    Ok(())
}
