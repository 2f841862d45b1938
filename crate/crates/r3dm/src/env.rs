//! Multi-agent fire-fighting gridworld and tabular MDP fixtures.
//!
//! The gridworld is a cooperative Dec-POMDP: agents move on a rectangular
//! grid, fires burn at fixed anchor cells with integer intensity, and a
//! `douse` action lowers the intensity of the nearest adjacent fire. All
//! agents share one reward. Observations are flat numeric vectors so every
//! encoder downstream consumes a single layout.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{R3dmError, Result};

/// Number of discrete actions per agent.
pub const N_ACTIONS: usize = 6;

/// Action indices: up, down, left, right, stay, douse.
pub const ACTION_UP: usize = 0;
pub const ACTION_DOWN: usize = 1;
pub const ACTION_LEFT: usize = 2;
pub const ACTION_RIGHT: usize = 3;
pub const ACTION_STAY: usize = 4;
pub const ACTION_DOUSE: usize = 5;

/// Initial intensity of every fire.
pub const INITIAL_INTENSITY: u32 = 3;
/// Per-step time penalty.
pub const STEP_PENALTY: f64 = 0.01;
/// Bonus for extinguishing the last fire.
pub const CLEAR_BONUS: f64 = 5.0;

/// Static description of a gridworld instance.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EnvSpec {
    pub n_agents: usize,
    pub grid_width: usize,
    pub grid_height: usize,
    pub n_fires: usize,
    pub max_steps: usize,
    pub obs_radius: usize,
    pub stochastic_starts: bool,
    pub seed: u64,
}

impl Default for EnvSpec {
    fn default() -> Self {
        EnvSpec {
            n_agents: 2,
            grid_width: 5,
            grid_height: 5,
            n_fires: 2,
            max_steps: 25,
            obs_radius: 1,
            stochastic_starts: true,
            seed: 0,
        }
    }
}

impl EnvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_agents < 1 || self.n_fires < 1 || self.max_steps < 1 {
            return Err(R3dmError::Config(
                "n_agents, n_fires and max_steps must all be at least 1".into(),
            ));
        }
        if self.grid_width < 1 || self.grid_height < 1 {
            return Err(R3dmError::Config("grid must be at least 1x1".into()));
        }
        let fires = fire_cells(self)?;
        if fires.len() != self.n_fires {
            return Err(R3dmError::Config("fire anchors collide on this grid".into()));
        }
        if self.n_fires >= self.grid_width * self.grid_height {
            return Err(R3dmError::Config("no free cell left for agents".into()));
        }
        Ok(())
    }

    /// Length of one agent's flat observation vector.
    pub fn obs_len(&self) -> usize {
        let w = 2 * self.obs_radius + 1;
        w * w + 2 + 2 * (self.n_agents - 1) + N_ACTIONS
    }

    /// Length of the flat global-state vector fed to centralized networks.
    pub fn state_len(&self) -> usize {
        2 * self.n_agents + self.grid_width * self.grid_height + 1
    }
}

/// Deterministic fire anchor cells: opposite corners first, then centre and
/// edge midpoints.
pub fn fire_cells(spec: &EnvSpec) -> Result<Vec<(usize, usize)>> {
    let (w, h) = (spec.grid_width, spec.grid_height);
    let anchors = [
        (0, h - 1),
        (w - 1, 0),
        (w - 1, h - 1),
        (0, 0),
        (w / 2, h / 2),
        (w / 2, 0),
        (0, h / 2),
        (w - 1, h / 2),
        (w / 2, h - 1),
    ];
    let mut cells: Vec<(usize, usize)> = Vec::new();
    for c in anchors {
        if !cells.contains(&c) {
            cells.push(c);
        }
        if cells.len() == spec.n_fires {
            return Ok(cells);
        }
    }
    Err(R3dmError::Config(format!(
        "cannot place {} distinct fires on a {}x{} grid",
        spec.n_fires, w, h
    )))
}

/// Deterministic agent start cells for `stochastic_starts = false`.
fn fixed_agent_cells(spec: &EnvSpec, fires: &[(usize, usize)]) -> Vec<(usize, usize)> {
    let (w, h) = (spec.grid_width, spec.grid_height);
    let corners = [(0, 0), (w - 1, h - 1), (0, h - 1), (w - 1, 0)];
    let mut cells: Vec<(usize, usize)> = Vec::new();
    for c in corners {
        if cells.len() == spec.n_agents {
            break;
        }
        if !cells.contains(&c) && !fires.contains(&c) {
            cells.push(c);
        }
    }
    // Fill any remainder row-major over free cells.
    'outer: for y in 0..h {
        for x in 0..w {
            if cells.len() == spec.n_agents {
                break 'outer;
            }
            let c = (x, y);
            if !cells.contains(&c) && !fires.contains(&c) {
                cells.push(c);
            }
        }
    }
    cells
}

/// Full environment state. Fire intensities are keyed by row-major cell
/// index; zero-intensity entries are removed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalState {
    pub agent_positions: Vec<(usize, usize)>,
    pub fire_intensities: BTreeMap<usize, u32>,
    pub step_index: usize,
}

impl GlobalState {
    pub fn total_intensity(&self) -> u32 {
        self.fire_intensities.values().sum()
    }

    pub fn all_fires_out(&self) -> bool {
        self.fire_intensities.is_empty()
    }
}

/// One agent's flat observation vector: local fire window (row-major,
/// -1 outside the grid), normalized self position, per-teammate offsets
/// (zero-padded when out of range), one-hot last action.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub values: Vec<f64>,
}

/// One action index per agent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JointAction {
    pub actions: Vec<usize>,
}

impl JointAction {
    pub fn new(actions: Vec<usize>) -> Self {
        assert!(actions.iter().all(|&a| a < N_ACTIONS), "action index out of range");
        JointAction { actions }
    }
}

/// Result of a single environment transition.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub state: GlobalState,
    pub observations: Vec<Observation>,
    pub reward: f64,
    pub done: bool,
}

/// The fire-fighting gridworld.
#[derive(Debug, Clone)]
pub struct TwinFires {
    pub spec: EnvSpec,
    fires: Vec<(usize, usize)>,
}

impl TwinFires {
    pub fn new(spec: EnvSpec) -> Result<Self> {
        spec.validate()?;
        let fires = fire_cells(&spec)?;
        Ok(TwinFires { spec, fires })
    }

    fn cell_index(&self, (x, y): (usize, usize)) -> usize {
        y * self.spec.grid_width + x
    }

    /// Place agents and fires. Equal seeds produce identical states.
    pub fn reset(&self, seed: u64) -> (GlobalState, Vec<Observation>) {
        let fire_intensities: BTreeMap<usize, u32> = self
            .fires
            .iter()
            .map(|&c| (self.cell_index(c), INITIAL_INTENSITY))
            .collect();
        let agent_positions = if self.spec.stochastic_starts {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let mut free: Vec<(usize, usize)> = Vec::new();
            for y in 0..self.spec.grid_height {
                for x in 0..self.spec.grid_width {
                    if !self.fires.contains(&(x, y)) {
                        free.push((x, y));
                    }
                }
            }
            let mut picked = Vec::with_capacity(self.spec.n_agents);
            for _ in 0..self.spec.n_agents {
                let i = rng.gen_range(0..free.len());
                picked.push(free.swap_remove(i));
            }
            picked
        } else {
            fixed_agent_cells(&self.spec, &self.fires)
        };
        let state = GlobalState { agent_positions, fire_intensities, step_index: 0 };
        let obs = (0..self.spec.n_agents).map(|i| self.observe(&state, i, None)).collect();
        (state, obs)
    }

    pub fn is_terminal(&self, state: &GlobalState) -> bool {
        state.all_fires_out() || state.step_index >= self.spec.max_steps
    }

    /// Apply one joint action. Movement is blocked at walls; `douse` lowers
    /// the nearest burning fire among the agent's own cell and its four
    /// neighbours (own cell first, then lowest cell index).
    pub fn step(&self, state: &GlobalState, joint: &JointAction) -> Result<StepOutcome> {
        if self.is_terminal(state) {
            return Err(R3dmError::Contract("step called on terminal state".into()));
        }
        if joint.actions.len() != self.spec.n_agents {
            return Err(R3dmError::Contract("joint action length != n_agents".into()));
        }

        let mut next = state.clone();
        let (w, h) = (self.spec.grid_width as i64, self.spec.grid_height as i64);
        for (i, &a) in joint.actions.iter().enumerate() {
            let (x, y) = next.agent_positions[i];
            let (mut nx, mut ny) = (x as i64, y as i64);
            match a {
                ACTION_UP => ny -= 1,
                ACTION_DOWN => ny += 1,
                ACTION_LEFT => nx -= 1,
                ACTION_RIGHT => nx += 1,
                _ => {}
            }
            if nx >= 0 && nx < w && ny >= 0 && ny < h {
                next.agent_positions[i] = (nx as usize, ny as usize);
            }
        }

        let mut doused = 0u32;
        for (i, &a) in joint.actions.iter().enumerate() {
            if a != ACTION_DOUSE {
                continue;
            }
            let (x, y) = next.agent_positions[i];
            if let Some(target) = self.douse_target(&next, (x, y)) {
                let v = next.fire_intensities.get_mut(&target).expect("target burns");
                *v -= 1;
                doused += 1;
                if *v == 0 {
                    next.fire_intensities.remove(&target);
                }
            }
        }

        next.step_index += 1;
        let cleared = next.all_fires_out();
        let done = cleared || next.step_index >= self.spec.max_steps;
        let mut reward = doused as f64 - STEP_PENALTY;
        if cleared {
            reward += CLEAR_BONUS;
        }
        let observations = (0..self.spec.n_agents)
            .map(|i| self.observe(&next, i, Some(joint.actions[i])))
            .collect();
        Ok(StepOutcome { state: next, observations, reward, done })
    }

    /// Cell index of the fire a douse at `pos` hits, if any.
    fn douse_target(&self, state: &GlobalState, pos: (usize, usize)) -> Option<usize> {
        let own = self.cell_index(pos);
        if state.fire_intensities.contains_key(&own) {
            return Some(own);
        }
        let (x, y) = (pos.0 as i64, pos.1 as i64);
        let mut best: Option<usize> = None;
        for (dx, dy) in [(0i64, -1i64), (0, 1), (-1, 0), (1, 0)] {
            let (nx, ny) = (x + dx, y + dy);
            if nx < 0 || ny < 0 || nx >= self.spec.grid_width as i64 || ny >= self.spec.grid_height as i64
            {
                continue;
            }
            let idx = self.cell_index((nx as usize, ny as usize));
            if state.fire_intensities.contains_key(&idx) && best.map_or(true, |b| idx < b) {
                best = Some(idx);
            }
        }
        best
    }

    /// Deterministic observation for one agent.
    pub fn observe(&self, state: &GlobalState, agent: usize, last_action: Option<usize>) -> Observation {
        assert!(agent < self.spec.n_agents, "agent index out of range");
        let r = self.spec.obs_radius as i64;
        let (ax, ay) = state.agent_positions[agent];
        let (w, h) = (self.spec.grid_width as i64, self.spec.grid_height as i64);
        let mut values = Vec::with_capacity(self.spec.obs_len());
        for dy in -r..=r {
            for dx in -r..=r {
                let (x, y) = (ax as i64 + dx, ay as i64 + dy);
                if x < 0 || y < 0 || x >= w || y >= h {
                    values.push(-1.0);
                } else {
                    let idx = self.cell_index((x as usize, y as usize));
                    values.push(*state.fire_intensities.get(&idx).unwrap_or(&0) as f64);
                }
            }
        }
        values.push(ax as f64 / (self.spec.grid_width - 1).max(1) as f64);
        values.push(ay as f64 / (self.spec.grid_height - 1).max(1) as f64);
        for j in 0..self.spec.n_agents {
            if j == agent {
                continue;
            }
            let (tx, ty) = state.agent_positions[j];
            let (dx, dy) = (tx as i64 - ax as i64, ty as i64 - ay as i64);
            if dx.abs() <= r && dy.abs() <= r {
                values.push(dx as f64);
                values.push(dy as f64);
            } else {
                values.push(0.0);
                values.push(0.0);
            }
        }
        let mut one_hot = [0.0; N_ACTIONS];
        if let Some(a) = last_action {
            one_hot[a] = 1.0;
        }
        values.extend_from_slice(&one_hot);
        debug_assert_eq!(values.len(), self.spec.obs_len());
        Observation { values }
    }

    /// Flat global-state vector: normalized agent positions, full intensity
    /// grid scaled by the initial intensity, normalized step counter.
    pub fn state_vector(&self, state: &GlobalState) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.spec.state_len());
        for &(x, y) in &state.agent_positions {
            v.push(x as f64 / (self.spec.grid_width - 1).max(1) as f64);
            v.push(y as f64 / (self.spec.grid_height - 1).max(1) as f64);
        }
        for idx in 0..self.spec.grid_width * self.spec.grid_height {
            v.push(*state.fire_intensities.get(&idx).unwrap_or(&0) as f64 / INITIAL_INTENSITY as f64);
        }
        v.push(state.step_index as f64 / self.spec.max_steps as f64);
        v
    }
}

/// One logged environment step.
#[derive(Debug, Clone)]
pub struct StepLogEntry {
    pub step_index: usize,
    pub actions: Vec<usize>,
    pub reward: f64,
    pub done: bool,
}

/// Write a line-delimited episode record log, one step per line:
/// `step_index,action_0,...,action_{n-1},reward,done`.
pub fn write_episode_log(path: &Path, steps: &[StepLogEntry]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in steps {
        let actions: Vec<String> = e.actions.iter().map(|a| a.to_string()).collect();
        writeln!(out, "{},{},{},{}", e.step_index, actions.join(","), e.reward, e.done)?;
    }
    Ok(())
}

/// Small fully-specified MDP with role-indexed policies and a shared
/// transition kernel, used for exact mutual-information checks.
#[derive(Debug, Clone)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    pub n_roles: usize,
    /// `transition[s][a][s']`
    pub transition: Vec<Vec<Vec<f64>>>,
    /// `role_policy[z][s][a]`
    pub role_policy: Vec<Vec<Vec<f64>>>,
    pub role_prior: Vec<f64>,
}

impl TabularMdp {
    pub fn new(
        transition: Vec<Vec<Vec<f64>>>,
        role_policy: Vec<Vec<Vec<f64>>>,
        role_prior: Vec<f64>,
    ) -> Result<Self> {
        let n_states = transition.len();
        let n_actions = transition.first().map_or(0, |r| r.len());
        let n_roles = role_prior.len();
        let mdp = TabularMdp { n_states, n_actions, n_roles, transition, role_policy, role_prior };
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn validate(&self) -> Result<()> {
        let check_row = |row: &[f64], what: &str| -> Result<()> {
            if row.iter().any(|&p| p < 0.0) {
                return Err(R3dmError::Contract(format!("{what} has a negative entry")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(R3dmError::Contract(format!("{what} sums to {sum}, expected 1")));
            }
            Ok(())
        };
        if self.transition.len() != self.n_states || self.role_policy.len() != self.n_roles {
            return Err(R3dmError::Contract("tabular MDP table dimensions disagree".into()));
        }
        for (s, per_action) in self.transition.iter().enumerate() {
            for (a, row) in per_action.iter().enumerate() {
                check_row(row, &format!("transition[{s}][{a}]"))?;
            }
        }
        for (z, per_state) in self.role_policy.iter().enumerate() {
            for (s, row) in per_state.iter().enumerate() {
                check_row(row, &format!("role_policy[{z}][{s}]"))?;
            }
        }
        check_row(&self.role_prior, "role_prior")?;
        Ok(())
    }

    /// Random instance with rows normalized exactly.
    pub fn random<R: Rng>(rng: &mut R, n_states: usize, n_actions: usize, n_roles: usize) -> Self {
        let simplex = |rng: &mut R, n: usize| -> Vec<f64> {
            let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
            let sum: f64 = raw.iter().sum();
            raw.into_iter().map(|x| x / sum).collect()
        };
        let transition = (0..n_states)
            .map(|_| (0..n_actions).map(|_| simplex(rng, n_states)).collect())
            .collect();
        let role_policy = (0..n_roles)
            .map(|_| (0..n_states).map(|_| simplex(rng, n_actions)).collect())
            .collect();
        let role_prior = simplex(rng, n_roles);
        let mdp = TabularMdp { n_states, n_actions, n_roles, transition, role_policy, role_prior };
        mdp.validate().expect("normalized rows");
        mdp
    }
}
