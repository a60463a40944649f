//! Toy worlds shared by the dataset generators and the evaluation
//! environments. Both sides sample and render through these functions, so a
//! training observation and an evaluation observation of the same state are
//! pixel-identical.

use rand::Rng as _;

use crate::codec::EmbodiedAction;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct WorldParams {
    pub image_side: usize,
    pub gui_rows: usize,
    pub gui_cols: usize,
    /// Click distance (normalized units) that still counts as a hit.
    pub gui_tolerance: f32,
    /// Displacement per unit action component.
    pub robot_step: f32,
    pub grasp_radius: f32,
    pub robot_max_steps: usize,
    /// Minimum start distance between effector and goal.
    pub robot_min_start_dist: f32,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            image_side: 32,
            gui_rows: 4,
            gui_cols: 4,
            gui_tolerance: 0.1,
            robot_step: 0.1,
            grasp_radius: 0.08,
            robot_max_steps: 50,
            robot_min_start_dist: 0.3,
        }
    }
}

impl WorldParams {
    pub fn validate(&self) -> Result<()> {
        if self.gui_rows == 0 || self.gui_cols == 0 || !self.image_side.is_multiple_of(self.gui_rows) || !self.image_side.is_multiple_of(self.gui_cols) {
            return Err(Error::Config(format!(
                "a {}x{} grid does not tile a {} pixel image",
                self.gui_rows, self.gui_cols, self.image_side
            )));
        }
        if !(self.robot_step > 0.0 && self.grasp_radius > 0.0 && self.robot_max_steps > 0) {
            return Err(Error::Config("robot step, grasp radius and max steps must be positive".into()));
        }
        Ok(())
    }
}

pub const GUI_SYSTEM_PROMPT: &str = "gui agent: click tap type scroll done";
pub const ROBOT_SYSTEM_PROMPT: &str = "robot agent: seven bins";
pub const ROBOT_INSTRUCTION: &str = "move the effector to the goal and grasp";

/// A grid of cells with one bright target among dimmer distractors.
#[derive(Clone, Debug, PartialEq)]
pub struct GuiScene {
    pub rows: usize,
    pub cols: usize,
    pub target: (usize, usize),
    /// `(row, col, intensity)` of distractor cells.
    pub distractors: Vec<(usize, usize, f32)>,
    /// Whether the instruction asks for a tap instead of a click.
    pub tap: bool,
}

impl GuiScene {
    pub fn sample(rng: &mut Rng, p: &WorldParams) -> Self {
        let target = (rng.random_range(0..p.gui_rows), rng.random_range(0..p.gui_cols));
        let n_distract = rng.random_range(2..=5usize).min(p.gui_rows * p.gui_cols - 1);
        let mut distractors = Vec::with_capacity(n_distract);
        while distractors.len() < n_distract {
            let cell = (rng.random_range(0..p.gui_rows), rng.random_range(0..p.gui_cols));
            if cell == target || distractors.iter().any(|&(r, c, _)| (r, c) == cell) {
                continue;
            }
            distractors.push((cell.0, cell.1, rng.random_range(0.25f32..0.5)));
        }
        let tap = rng.random_bool(0.5);
        Self {
            rows: p.gui_rows,
            cols: p.gui_cols,
            target,
            distractors,
            tap,
        }
    }

    pub fn target_center(&self) -> (f32, f32) {
        let x = (self.target.1 as f32 + 0.5) / self.cols as f32;
        let y = (self.target.0 as f32 + 0.5) / self.rows as f32;
        (x, y)
    }

    /// Normalized bounds `(x0, y0, x1, y1)` of a cell.
    pub fn cell_bounds(&self, row: usize, col: usize) -> (f32, f32, f32, f32) {
        let w = 1.0 / self.cols as f32;
        let h = 1.0 / self.rows as f32;
        (col as f32 * w, row as f32 * h, (col + 1) as f32 * w, (row + 1) as f32 * h)
    }

    pub fn instruction(&self) -> String {
        let verb = if self.tap { "tap" } else { "click" };
        format!("{verb} the bright cell in row {}", self.target.0 + 1)
    }

    pub fn render(&self, side: usize) -> Vec<f32> {
        let mut img = vec![0.0f32; side * side];
        let ch = side / self.rows;
        let cw = side / self.cols;
        let mut fill = |r: usize, c: usize, v: f32| {
            for y in r * ch + 1..(r + 1) * ch - 1 {
                for x in c * cw + 1..(c + 1) * cw - 1 {
                    img[y * side + x] = v;
                }
            }
        };
        for &(r, c, v) in &self.distractors {
            fill(r, c, v);
        }
        fill(self.target.0, self.target.1, 1.0);
        img
    }
}

/// Planar reaching scene: an effector mark and a goal mark.
#[derive(Clone, Debug, PartialEq)]
pub struct RobotScene {
    pub effector: (f32, f32),
    pub goal: (f32, f32),
}

const GOAL_AMPLITUDE: f32 = 0.6;
const EFFECTOR_AMPLITUDE: f32 = 0.35;
const BLOB_SIGMA_PX: f32 = 1.0;

impl RobotScene {
    pub fn sample(rng: &mut Rng, p: &WorldParams) -> Self {
        loop {
            let e = (rng.random_range(0.1f32..0.9), rng.random_range(0.1f32..0.9));
            let g = (rng.random_range(0.1f32..0.9), rng.random_range(0.1f32..0.9));
            let s = Self { effector: e, goal: g };
            if s.distance() >= p.robot_min_start_dist {
                return s;
            }
        }
    }

    pub fn distance(&self) -> f32 {
        let dx = self.goal.0 - self.effector.0;
        let dy = self.goal.1 - self.effector.1;
        (dx * dx + dy * dy).sqrt()
    }

    /// Gaussian blobs centred on the continuous positions, so sub-pixel
    /// location survives rendering.
    pub fn render(&self, side: usize) -> Vec<f32> {
        let mut img = vec![0.0f32; side * side];
        let inv = 1.0 / (2.0 * BLOB_SIGMA_PX * BLOB_SIGMA_PX);
        for (pos, amp) in [(self.goal, GOAL_AMPLITUDE), (self.effector, EFFECTOR_AMPLITUDE)] {
            let (cx, cy) = (pos.0 * side as f32, pos.1 * side as f32);
            for r in 0..side {
                for c in 0..side {
                    let dx = c as f32 + 0.5 - cx;
                    let dy = r as f32 + 0.5 - cy;
                    img[r * side + c] += amp * (-(dx * dx + dy * dy) * inv).exp();
                }
            }
        }
        for v in &mut img {
            *v = v.clamp(0.0, 1.0);
        }
        img
    }

    /// Scripted expert: proportional move toward the goal, clipped to the
    /// action box, with the gripper opened once inside the grasp radius.
    pub fn expert_action(&self, p: &WorldParams) -> EmbodiedAction {
        let ax = ((self.goal.0 - self.effector.0) / p.robot_step).clamp(-1.0, 1.0);
        let ay = ((self.goal.1 - self.effector.1) / p.robot_step).clamp(-1.0, 1.0);
        let gripper = if self.distance() <= p.grasp_radius { 1.0 } else { -1.0 };
        EmbodiedAction::from_array([ax, ay, 0.0, 0.0, 0.0, 0.0, gripper])
    }

    /// Moves the effector, keeping it inside the unit box.
    pub fn apply(&mut self, a: &EmbodiedAction, p: &WorldParams) {
        self.effector.0 = (self.effector.0 + p.robot_step * a.pos_x).clamp(0.0, 1.0);
        self.effector.1 = (self.effector.1 + p.robot_step * a.pos_y).clamp(0.0, 1.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    #[test]
    fn expert_at_goal_is_still_and_open() {
        let p = WorldParams::default();
        let s = RobotScene {
            effector: (0.4, 0.6),
            goal: (0.4, 0.6),
        };
        let a = s.expert_action(&p).to_array();
        assert!(a[..6].iter().all(|&v| v == 0.0));
        assert_eq!(a[6], 1.0);
    }

    #[test]
    fn zero_displacement_leaves_state() {
        let p = WorldParams::default();
        let mut s = RobotScene {
            effector: (0.2, 0.3),
            goal: (0.8, 0.8),
        };
        let before = s.clone();
        s.apply(&EmbodiedAction::from_array([0.0, 0.0, 0.3, 0.1, 0.0, 0.0, -1.0]), &p);
        assert_eq!(s, before);
    }

    #[test]
    fn gui_render_marks_target_brightest() {
        let p = WorldParams::default();
        let mut rng = rng_for(5);
        for _ in 0..50 {
            let s = GuiScene::sample(&mut rng, &p);
            let img = s.render(p.image_side);
            let (x, y) = s.target_center();
            let px = (x * p.image_side as f32) as usize;
            let py = (y * p.image_side as f32) as usize;
            assert_eq!(img[py * p.image_side + px], 1.0);
            assert_eq!(img.iter().filter(|&&v| v == 1.0).count(), 36);
        }
    }

    #[test]
    fn robot_render_is_bounded() {
        let p = WorldParams::default();
        let mut rng = rng_for(9);
        let s = RobotScene::sample(&mut rng, &p);
        let img = s.render(p.image_side);
        assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(s.distance() >= p.robot_min_start_dist);
    }
}
