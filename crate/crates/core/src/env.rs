//! Closed-loop toy environments and success-rate evaluation.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;

use crate::codec::{Action, Codec, EmbodiedAction, GuiAction, EMBODIED_DIMS};
use crate::data::prompt_tokens;
use crate::error::{Error, Result};
use crate::model::{LayerHetModel, TaskLabel};
use crate::rng::{eval_seed, is_eval_seed, rng_for, Rng};
use crate::scene::{GuiScene, RobotScene, WorldParams, GUI_SYSTEM_PROMPT, ROBOT_INSTRUCTION, ROBOT_SYSTEM_PROMPT};

/// What a policy sees. `state` exposes the underlying scene for scripted
/// baselines; learned policies ignore it.
#[derive(Clone, Debug)]
pub struct Observation {
    pub label: TaskLabel,
    pub image: Vec<f32>,
    pub system_prompt: &'static str,
    pub instruction: String,
    pub history: Option<String>,
    pub state: SceneState,
}

#[derive(Clone, Debug, PartialEq)]
pub enum SceneState {
    Gui(GuiScene),
    Robot(RobotScene),
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub done: bool,
    pub success: bool,
    /// Why the episode failed early, if it did.
    pub failure: Option<String>,
}

/// Single-step click-accuracy episode.
#[derive(Clone, Debug)]
pub struct GuiEnv {
    scene: GuiScene,
    world: WorldParams,
    done: bool,
}

impl GuiEnv {
    pub fn new(scene: GuiScene, world: WorldParams) -> Self {
        Self { scene, world, done: false }
    }

    pub fn scene(&self) -> &GuiScene {
        &self.scene
    }

    pub fn observe(&self) -> Observation {
        Observation {
            label: TaskLabel::Gui,
            image: self.scene.render(self.world.image_side),
            system_prompt: GUI_SYSTEM_PROMPT,
            instruction: self.scene.instruction(),
            history: None,
            state: SceneState::Gui(self.scene.clone()),
        }
    }

    pub fn step(&mut self, action: &Action) -> StepOutcome {
        self.done = true;
        let Action::Gui(a) = action else {
            return fail("embodied action sent to the gui environment");
        };
        if let Err(e) = a.validate() {
            return fail(&e.to_string());
        }
        let success = match a {
            GuiAction::Click { x, y } | GuiAction::Tap { x, y } => {
                let (tx, ty) = self.scene.target_center();
                ((x - tx).powi(2) + (y - ty).powi(2)).sqrt() <= self.world.gui_tolerance
            }
            _ => false,
        };
        StepOutcome {
            done: true,
            success,
            failure: None,
        }
    }

    pub fn is_done(&self) -> bool {
        self.done
    }
}

/// Planar reach-and-grasp. Opening the gripper is a grasp attempt and ends
/// the episode; it succeeds when the effector is within the grasp radius.
#[derive(Clone, Debug)]
pub struct RobotEnv {
    scene: RobotScene,
    world: WorldParams,
    steps: usize,
    done: bool,
}

impl RobotEnv {
    pub fn new(scene: RobotScene, world: WorldParams) -> Self {
        Self {
            scene,
            world,
            steps: 0,
            done: false,
        }
    }

    pub fn scene(&self) -> &RobotScene {
        &self.scene
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn render(&self) -> Vec<f32> {
        self.scene.render(self.world.image_side)
    }

    pub fn observe(&self) -> Observation {
        Observation {
            label: TaskLabel::Robot,
            image: self.render(),
            system_prompt: ROBOT_SYSTEM_PROMPT,
            instruction: ROBOT_INSTRUCTION.to_string(),
            history: None,
            state: SceneState::Robot(self.scene.clone()),
        }
    }

    pub fn step(&mut self, action: &Action) -> StepOutcome {
        match action {
            Action::Embodied(a) => self.step_embodied(a),
            Action::Gui(_) => {
                self.done = true;
                fail("gui action sent to the robot environment")
            }
        }
    }

    pub fn step_embodied(&mut self, a: &EmbodiedAction) -> StepOutcome {
        if self.done {
            return fail("step after episode end");
        }
        if let Err(e) = a.validate() {
            self.done = true;
            return fail(&e.to_string());
        }
        self.scene.apply(a, &self.world);
        self.steps += 1;
        if a.gripper_open() {
            self.done = true;
            return StepOutcome {
                done: true,
                success: self.scene.distance() <= self.world.grasp_radius,
                failure: None,
            };
        }
        if self.steps >= self.world.robot_max_steps {
            self.done = true;
            return StepOutcome {
                done: true,
                success: false,
                failure: Some("step cap reached".into()),
            };
        }
        StepOutcome {
            done: false,
            success: false,
            failure: None,
        }
    }
}

fn fail(msg: &str) -> StepOutcome {
    StepOutcome {
        done: true,
        success: false,
        failure: Some(msg.to_string()),
    }
}

pub trait Policy {
    fn act(&mut self, obs: &Observation) -> Result<Action>;
}

/// Greedy decoding from a frozen model.
pub struct ModelPolicy<'a> {
    pub model: &'a LayerHetModel,
    pub codec: &'a Codec,
}

impl Policy for ModelPolicy<'_> {
    fn act(&mut self, obs: &Observation) -> Result<Action> {
        let prompt = prompt_tokens(obs.system_prompt, &obs.instruction, obs.history.as_deref(), self.codec)?;
        self.model.generate_action(&obs.image, &prompt, obs.label, self.codec)
    }
}

/// Reads the true scene and emits the generator's ground-truth action.
pub struct ScriptedPolicy {
    pub world: WorldParams,
}

impl Policy for ScriptedPolicy {
    fn act(&mut self, obs: &Observation) -> Result<Action> {
        Ok(match &obs.state {
            SceneState::Gui(s) => {
                let (x, y) = s.target_center();
                Action::Gui(if s.tap { GuiAction::Tap { x, y } } else { GuiAction::Click { x, y } })
            }
            SceneState::Robot(s) => Action::Embodied(s.expert_action(&self.world)),
        })
    }
}

/// Uniform random actions: each embodied component in [-1, 1], GUI clicks
/// anywhere on screen.
pub struct RandomPolicy {
    rng: Rng,
}

impl RandomPolicy {
    pub fn new(seed: u64) -> Self {
        Self { rng: rng_for(seed) }
    }
}

impl Policy for RandomPolicy {
    fn act(&mut self, obs: &Observation) -> Result<Action> {
        Ok(match obs.label {
            TaskLabel::Gui => Action::Gui(GuiAction::Click {
                x: self.rng.random_range(0.0..=1.0),
                y: self.rng.random_range(0.0..=1.0),
            }),
            TaskLabel::Robot => {
                let mut a = [0.0f32; EMBODIED_DIMS];
                for v in &mut a {
                    *v = self.rng.random_range(-1.0..=1.0);
                }
                Action::Embodied(EmbodiedAction::from_array(a))
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeResult {
    pub index: u64,
    pub success: bool,
    pub steps: usize,
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub family: TaskLabel,
    pub seed: u64,
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_steps: f64,
    /// Episodes ended by a decode error or invalid action.
    pub failed_decodes: usize,
    pub results: Vec<EpisodeResult>,
}

impl EvalReport {
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "family={}", self.family);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "episodes={}", self.episodes);
        let _ = writeln!(s, "successes={}", self.successes);
        let _ = writeln!(s, "success_rate={}", self.success_rate);
        let _ = writeln!(s, "mean_steps={}", self.mean_steps);
        let _ = writeln!(s, "failed_decodes={}", self.failed_decodes);
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_kv()).map_err(|e| Error::io(path, e))
    }

    /// Appends `variant,family,seed,success_rate,episodes`, writing the
    /// header first when the file is new.
    pub fn append_csv(&self, path: &Path, variant: &str) -> Result<()> {
        use std::io::Write;
        let fresh = !path.exists();
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut text = String::new();
        if fresh {
            text.push_str("variant,family,seed,success_rate,episodes\n");
        }
        let _ = writeln!(text, "{variant},{},{},{},{}", self.family, self.seed, self.success_rate, self.episodes);
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

pub fn gui_eval_env(seed: u64, index: u64, world: &WorldParams) -> GuiEnv {
    let s = eval_seed(seed, "gui", index);
    assert!(is_eval_seed(s));
    GuiEnv::new(GuiScene::sample(&mut rng_for(s), world), world.clone())
}

pub fn robot_eval_env(seed: u64, index: u64, world: &WorldParams) -> RobotEnv {
    let s = eval_seed(seed, "robot", index);
    assert!(is_eval_seed(s));
    RobotEnv::new(RobotScene::sample(&mut rng_for(s), world), world.clone())
}

fn run_episode(policy: &mut dyn Policy, family: TaskLabel, seed: u64, index: u64, world: &WorldParams) -> EpisodeResult {
    let mut gui;
    let mut robot;
    let env: &mut dyn EnvStep = match family {
        TaskLabel::Gui => {
            gui = gui_eval_env(seed, index, world);
            &mut gui
        }
        TaskLabel::Robot => {
            robot = robot_eval_env(seed, index, world);
            &mut robot
        }
    };
    let mut steps = 0;
    loop {
        let obs = env.observation();
        let out = match policy.act(&obs) {
            Ok(a) => env.apply(&a),
            Err(e) => fail(&e.to_string()),
        };
        steps += 1;
        if out.done {
            return EpisodeResult {
                index,
                success: out.success,
                steps,
                failure: out.failure,
            };
        }
    }
}

trait EnvStep {
    fn observation(&self) -> Observation;
    fn apply(&mut self, a: &Action) -> StepOutcome;
}

impl EnvStep for GuiEnv {
    fn observation(&self) -> Observation {
        self.observe()
    }
    fn apply(&mut self, a: &Action) -> StepOutcome {
        self.step(a)
    }
}

impl EnvStep for RobotEnv {
    fn observation(&self) -> Observation {
        self.observe()
    }
    fn apply(&mut self, a: &Action) -> StepOutcome {
        self.step(a)
    }
}

/// Runs `n_episodes` on evaluation seeds derived from `seed`.
pub fn evaluate(policy: &mut dyn Policy, family: TaskLabel, n_episodes: usize, seed: u64, world: &WorldParams) -> Result<EvalReport> {
    if n_episodes == 0 {
        return Err(Error::InvalidArgument("evaluation needs at least one episode".into()));
    }
    world.validate()?;
    let results: Vec<EpisodeResult> = (0..n_episodes as u64)
        .map(|i| run_episode(policy, family, seed, i, world))
        .collect();
    let successes = results.iter().filter(|r| r.success).count();
    let failed_decodes = results
        .iter()
        .filter(|r| r.failure.as_deref().is_some_and(|f| f != "step cap reached"))
        .count();
    let total_steps: usize = results.iter().map(|r| r.steps).sum();
    Ok(EvalReport {
        family,
        seed,
        episodes: n_episodes,
        successes,
        success_rate: successes as f64 / n_episodes as f64,
        mean_steps: total_steps as f64 / n_episodes as f64,
        failed_decodes,
        results,
    })
}

pub fn evaluate_model(model: &LayerHetModel, codec: &Codec, family: TaskLabel, n_episodes: usize, seed: u64, world: &WorldParams) -> Result<EvalReport> {
    let mut policy = ModelPolicy { model, codec };
    evaluate(&mut policy, family, n_episodes, seed, world)
}
