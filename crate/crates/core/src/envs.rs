//! Built-in benchmarks: 2×2 matrix games and the Bridge gridworld.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{self, Behavior, DatasetMeta, OfflineDataset, Transition};
use crate::error::{Error, Result};
use crate::mmdp::{self, FactorizedPolicy, JointPolicy, MmdpParts, TabularMmdp};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatrixGameSpec {
    /// `payoff[a_1][a_2]`, actions ordered (A, B).
    pub payoff: [[f64; 2]; 2],
}

impl MatrixGameSpec {
    pub const PENALTY_XOR: MatrixGameSpec = MatrixGameSpec {
        payoff: [[0.0, 1.0], [1.0, -2.0]],
    };
    pub const XOR: MatrixGameSpec = MatrixGameSpec {
        payoff: [[0.0, 1.0], [1.0, 0.0]],
    };
}

/// One-shot game as a single-state MMDP with `γ = 0` and horizon 1.
pub fn build_matrix_game(spec: &MatrixGameSpec) -> Result<TabularMmdp> {
    if spec.payoff.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::invalid("payoff entries must be finite"));
    }
    let actions = vec!["A".to_string(), "B".to_string()];
    TabularMmdp::from_parts(MmdpParts {
        state_names: vec!["s".into()],
        action_names: vec![actions.clone(), actions],
        transitions: vec![vec![(0, 1.0)]; 4],
        reward: spec.payoff.iter().flatten().copied().collect(),
        gamma: 0.0,
        p0: vec![1.0],
        terminals: vec![],
        horizon: Some(1),
    })
}

pub fn penalty_xor() -> TabularMmdp {
    build_matrix_game(&MatrixGameSpec::PENALTY_XOR).expect("valid payoff")
}

pub fn xor() -> TabularMmdp {
    build_matrix_game(&MatrixGameSpec::XOR).expect("valid payoff")
}

/// The four literal matrix-game datasets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MatrixRecipe {
    /// {AB}
    A,
    /// {AB, BA}
    B,
    /// {AA, AB, BA}
    C,
    /// {AA, AB, BA, BB}
    D,
}

impl MatrixRecipe {
    pub const ALL: [MatrixRecipe; 4] = [MatrixRecipe::A, MatrixRecipe::B, MatrixRecipe::C, MatrixRecipe::D];

    pub fn joint_actions(self) -> &'static [[usize; 2]] {
        match self {
            MatrixRecipe::A => &[[0, 1]],
            MatrixRecipe::B => &[[0, 1], [1, 0]],
            MatrixRecipe::C => &[[0, 0], [0, 1], [1, 0]],
            MatrixRecipe::D => &[[0, 0], [0, 1], [1, 0], [1, 1]],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MatrixRecipe::A => "a",
            MatrixRecipe::B => "b",
            MatrixRecipe::C => "c",
            MatrixRecipe::D => "d",
        }
    }
}

impl FromStr for MatrixRecipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(MatrixRecipe::A),
            "b" => Ok(MatrixRecipe::B),
            "c" => Ok(MatrixRecipe::C),
            "d" => Ok(MatrixRecipe::D),
            other => Err(Error::invalid(format!("unknown matrix recipe {other:?} (expected a, b, c or d)"))),
        }
    }
}

/// One record per listed joint action; each record is its own episode.
pub fn matrix_dataset(mmdp: &TabularMmdp, recipe: MatrixRecipe) -> OfflineDataset {
    let records: Vec<Transition> = recipe
        .joint_actions()
        .iter()
        .map(|a| {
            let joint = mmdp.joint().index(a).expect("2x2 game");
            Transition {
                s: 0,
                a: a.to_vec(),
                r: mmdp.reward(0, joint),
                s_next: 0,
                done: false,
            }
        })
        .collect();
    let n = records.len();
    OfflineDataset::new(records, vec![0; n]).with_meta(DatasetMeta {
        recipe: Some(recipe.name().into()),
        n_trajectories: Some(n),
        horizon: Some(1),
        ..Default::default()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CollisionRule {
    /// Moving into the other agent's current cell is blocked, as is targeting
    /// the same cell.
    CellBlock,
    /// Only swaps and same-cell targets are blocked; following is allowed.
    SwapBlock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BridgeStart {
    OnBridgeHard,
    PlatformOriginal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BridgeSpec {
    pub bridge_length: usize,
    pub platform_size: usize,
    pub step_reward: f64,
    pub collision_rule: CollisionRule,
    pub horizon: usize,
    pub start: BridgeStart,
    pub discount: f64,
}

impl Default for BridgeSpec {
    fn default() -> Self {
        BridgeSpec {
            bridge_length: 3,
            platform_size: 2,
            step_reward: -0.1,
            collision_rule: CollisionRule::CellBlock,
            horizon: 50,
            start: BridgeStart::OnBridgeHard,
            discount: 0.99,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Pos {
    Cell(usize),
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Move {
    Left,
    Right,
    Up,
    Down,
    Stay,
}

impl Move {
    pub const ALL: [Move; 5] = [Move::Left, Move::Right, Move::Up, Move::Down, Move::Stay];

    pub fn name(self) -> &'static str {
        match self {
            Move::Left => "Left",
            Move::Right => "Right",
            Move::Up => "Up",
            Move::Down => "Down",
            Move::Stay => "Stay",
        }
    }

    pub fn arrow(self) -> char {
        match self {
            Move::Left => '←',
            Move::Right => '→',
            Move::Up => '↑',
            Move::Down => '↓',
            Move::Stay => '·',
        }
    }

    fn delta(self) -> (isize, isize) {
        match self {
            Move::Left => (0, -1),
            Move::Right => (0, 1),
            Move::Up => (-1, 0),
            Move::Down => (1, 0),
            Move::Stay => (0, 0),
        }
    }
}

pub const STAY: usize = 4;

/// Two platforms of `p × p` cells joined by a one-cell-wide corridor of
/// length `L` along row `(p − 1) / 2`. Agent 0 must reach the left platform,
/// agent 1 the right one. An agent that reaches its platform leaves the grid.
#[derive(Debug, Clone)]
pub struct Bridge {
    pub spec: BridgeSpec,
    pub mmdp: TabularMmdp,
    width: usize,
    height: usize,
    bridge_row: usize,
    /// `cell_of[r * width + c]`
    cell_of: Vec<Option<usize>>,
    cells: Vec<(usize, usize)>,
    positions: Vec<[Pos; 2]>,
    start: usize,
}

impl Bridge {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn cells(&self) -> &[(usize, usize)] {
        &self.cells
    }

    pub fn cell_at(&self, row: usize, col: usize) -> Option<usize> {
        if row < self.height && col < self.width {
            self.cell_of[row * self.width + col]
        } else {
            None
        }
    }

    pub fn start_state(&self) -> usize {
        self.start
    }

    pub fn positions(&self, s: usize) -> [Pos; 2] {
        self.positions[s]
    }

    pub fn state_of(&self, pos: [Pos; 2]) -> Option<usize> {
        self.positions.iter().position(|p| *p == pos)
    }

    /// Cell index of the bridge square `k` (0 = leftmost).
    pub fn bridge_cell(&self, k: usize) -> usize {
        self.cell_at(self.bridge_row, self.spec.platform_size + k).expect("bridge cell")
    }

    fn on_goal(&self, agent: usize, cell: usize) -> bool {
        let (_, c) = self.cells[cell];
        let p = self.spec.platform_size;
        match agent {
            0 => c < p,
            _ => c >= p + self.spec.bridge_length,
        }
    }

    fn target(&self, cell: usize, mv: Move) -> usize {
        let (r, c) = self.cells[cell];
        let (dr, dc) = mv.delta();
        let (nr, nc) = (r as isize + dr, c as isize + dc);
        if nr < 0 || nc < 0 {
            return cell;
        }
        self.cell_at(nr as usize, nc as usize).unwrap_or(cell)
    }

    fn step(&self, pos: [Pos; 2], moves: [Move; 2]) -> [Pos; 2] {
        let cur: [Option<usize>; 2] = pos.map(|p| match p {
            Pos::Cell(c) => Some(c),
            Pos::Done => None,
        });
        let mut tgt = [None, None];
        for i in 0..2 {
            tgt[i] = cur[i].map(|c| self.target(c, moves[i]));
        }
        if let (Some(c0), Some(c1), Some(t0), Some(t1)) = (cur[0], cur[1], tgt[0], tgt[1]) {
            let mut stay = [false, false];
            if t0 == t1 || (t0 == c1 && t1 == c0) {
                stay = [true, true];
            } else {
                match self.spec.collision_rule {
                    CollisionRule::CellBlock => {
                        stay[0] = t0 == c1;
                        stay[1] = t1 == c0;
                    }
                    CollisionRule::SwapBlock => {
                        // following is allowed unless the leader does not move
                        stay[0] = t0 == c1 && t1 == c1;
                        stay[1] = t1 == c0 && t0 == c0;
                    }
                }
            }
            for i in 0..2 {
                if stay[i] {
                    tgt[i] = cur[i];
                }
            }
        }
        let mut out = [Pos::Done, Pos::Done];
        for i in 0..2 {
            out[i] = match tgt[i] {
                Some(c) if !self.on_goal(i, c) => Pos::Cell(c),
                _ => Pos::Done,
            };
        }
        out
    }

    /// Deterministic successor of a joint move from a state.
    pub fn next_state(&self, s: usize, moves: [Move; 2]) -> usize {
        let next = self.step(self.positions[s], moves);
        self.state_of(next).expect("successor is a valid state")
    }
}

pub fn build_bridge(spec: &BridgeSpec) -> Result<Bridge> {
    let p = spec.platform_size;
    let l = spec.bridge_length;
    if p == 0 || l == 0 {
        return Err(Error::invalid("bridge_length and platform_size must be at least 1"));
    }
    if spec.horizon == 0 {
        return Err(Error::invalid("horizon must be at least 1"));
    }
    if !spec.step_reward.is_finite() {
        return Err(Error::invalid("step_reward must be finite"));
    }
    if spec.start == BridgeStart::OnBridgeHard && l < 2 {
        return Err(Error::invalid("the on-bridge start needs bridge_length >= 2"));
    }
    let width = 2 * p + l;
    let height = p;
    let bridge_row = (p - 1) / 2;
    let mut cell_of = vec![None; width * height];
    let mut cells = Vec::new();
    for r in 0..height {
        for c in 0..width {
            let on_platform = c < p || c >= p + l;
            if on_platform || r == bridge_row {
                cell_of[r * width + c] = Some(cells.len());
                cells.push((r, c));
            }
        }
    }
    let mut positions = Vec::new();
    let slots: Vec<Pos> = (0..cells.len()).map(Pos::Cell).chain([Pos::Done]).collect();
    for &a in &slots {
        for &b in &slots {
            if a == b && a != Pos::Done {
                continue;
            }
            positions.push([a, b]);
        }
    }
    let mut bridge = Bridge {
        spec: spec.clone(),
        mmdp: placeholder_mmdp(),
        width,
        height,
        bridge_row,
        cell_of,
        cells,
        positions,
        start: 0,
    };
    let start_pos = match spec.start {
        BridgeStart::OnBridgeHard => {
            let j = if l % 2 == 1 { (l - 3) / 2 } else { l / 2 - 1 };
            [Pos::Cell(bridge.bridge_cell(l - 1 - j)), Pos::Cell(bridge.bridge_cell(j))]
        }
        BridgeStart::PlatformOriginal => [
            Pos::Cell(bridge.cell_at(height - 1, width - 1).unwrap()),
            Pos::Cell(bridge.cell_at(0, 0).unwrap()),
        ],
    };
    // an agent placed on its own goal platform is done from the outset
    let start_pos = [0, 1].map(|i| match start_pos[i] {
        Pos::Cell(c) if bridge.on_goal(i, c) => Pos::Done,
        other => other,
    });
    bridge.start = bridge.state_of(start_pos).expect("start state exists");

    let n_states = bridge.positions.len();
    let n_joint = Move::ALL.len() * Move::ALL.len();
    let mut transitions = Vec::with_capacity(n_states * n_joint);
    let mut reward = Vec::with_capacity(n_states * n_joint);
    let mut terminals = vec![false; n_states];
    for s in 0..n_states {
        let pos = bridge.positions[s];
        let terminal = pos == [Pos::Done, Pos::Done];
        terminals[s] = terminal;
        for a0 in Move::ALL {
            for a1 in Move::ALL {
                if terminal {
                    transitions.push(vec![(s, 1.0)]);
                    reward.push(0.0);
                } else {
                    transitions.push(vec![(bridge.next_state(s, [a0, a1]), 1.0)]);
                    reward.push(spec.step_reward);
                }
            }
        }
    }
    let goal = terminals.iter().position(|&t| t).expect("terminal state exists");
    if !reachable(&transitions, n_joint, bridge.start, goal) {
        return Err(Error::invalid(format!(
            "bridge layout (length {l}, platform {p}) leaves the goals unreachable from the start"
        )));
    }
    let mut p0 = vec![0.0; n_states];
    p0[bridge.start] = 1.0;
    let moves: Vec<String> = Move::ALL.iter().map(|m| m.name().to_string()).collect();
    bridge.mmdp = TabularMmdp::from_parts(MmdpParts {
        state_names: bridge.positions.iter().map(|p| bridge.pos_name(*p)).collect(),
        action_names: vec![moves.clone(), moves],
        transitions,
        reward,
        gamma: spec.discount,
        p0,
        terminals,
        horizon: Some(spec.horizon),
    })?;
    Ok(bridge)
}

impl Bridge {
    fn pos_name(&self, pos: [Pos; 2]) -> String {
        let one = |p: Pos| match p {
            Pos::Cell(c) => format!("{},{}", self.cells[c].0, self.cells[c].1),
            Pos::Done => "done".to_string(),
        };
        format!("{}|{}", one(pos[0]), one(pos[1]))
    }
}

fn placeholder_mmdp() -> TabularMmdp {
    build_matrix_game(&MatrixGameSpec::XOR).expect("valid payoff")
}

fn reachable(transitions: &[Vec<(usize, f64)>], n_joint: usize, from: usize, to: usize) -> bool {
    let n = transitions.len() / n_joint;
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([from]);
    seen[from] = true;
    while let Some(s) = queue.pop_front() {
        if s == to {
            return true;
        }
        for a in 0..n_joint {
            for &(next, _) in &transitions[s * n_joint + a] {
                if !seen[next] {
                    seen[next] = true;
                    queue.push_back(next);
                }
            }
        }
    }
    false
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BridgeRecipe {
    /// 500 episodes from the two coordinated crossing modes, 50/50.
    Optimal,
    /// The optimal episodes plus 500 uniformly random ones.
    Mix,
}

impl BridgeRecipe {
    pub fn name(self) -> &'static str {
        match self {
            BridgeRecipe::Optimal => "optimal",
            BridgeRecipe::Mix => "mix",
        }
    }
}

impl FromStr for BridgeRecipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "optimal" => Ok(BridgeRecipe::Optimal),
            "mix" => Ok(BridgeRecipe::Mix),
            other => Err(Error::invalid(format!("unknown bridge recipe {other:?} (expected optimal or mix)"))),
        }
    }
}

impl fmt::Display for BridgeRecipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Joint-optimal deterministic policy that opens with the given joint move.
/// Ties are broken towards fewer non-Stay components, then lower index.
pub fn bridge_mode_policy(bridge: &Bridge, first: [Move; 2]) -> Result<JointPolicy> {
    let mmdp = &bridge.mmdp;
    let (values, _) = mmdp::optimal_values(mmdp, 1e-12)?;
    let q = values.q.expect("optimal values carry Q");
    let nj = mmdp.n_joint();
    let first_idx = move_index(first[0]) * Move::ALL.len() + move_index(first[1]);
    let start = bridge.start_state();
    if (q[start * nj + first_idx] - values.v[start]).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "({}, {}) is not optimal at the start state",
            first[0].name(),
            first[1].name()
        )));
    }
    let actions: Vec<usize> = (0..mmdp.n_states())
        .map(|s| {
            if s == start {
                return first_idx;
            }
            let row = &q[s * nj..(s + 1) * nj];
            let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (0..nj)
                .filter(|&a| row[a] >= best - 1e-9)
                .min_by_key(|&a| {
                    let moving = usize::from(a / 5 != STAY) + usize::from(a % 5 != STAY);
                    (moving, a)
                })
                .unwrap_or(0)
        })
        .collect();
    JointPolicy::deterministic(mmdp.n_states(), nj, &actions)
}

fn move_index(m: Move) -> usize {
    Move::ALL.iter().position(|&x| x == m).unwrap()
}

pub fn bridge_dataset(bridge: &Bridge, recipe: BridgeRecipe, seed: u64) -> Result<OfflineDataset> {
    let modes = vec![
        Behavior::Joint(bridge_mode_policy(bridge, [Move::Left, Move::Left])?),
        Behavior::Joint(bridge_mode_policy(bridge, [Move::Right, Move::Right])?),
    ];
    let horizon = bridge.spec.horizon;
    let mut data = dataset::generate(&bridge.mmdp, &modes, &[0.5, 0.5], 500, horizon, seed)?;
    if recipe == BridgeRecipe::Mix {
        let uniform = FactorizedPolicy::uniform(bridge.mmdp.n_states(), bridge.mmdp.joint().sizes());
        let random = dataset::generate(
            &bridge.mmdp,
            &[Behavior::Factorized(uniform)],
            &[1.0],
            500,
            horizon,
            seed.wrapping_add(1),
        )?;
        data.records.extend(random.records);
        data.initial_states.extend(random.initial_states);
    }
    let n_trajectories = data.initial_states.len();
    Ok(data.with_meta(DatasetMeta {
        env: Some("bridge".into()),
        recipe: Some(recipe.name().into()),
        seed: Some(seed),
        n_trajectories: Some(n_trajectories),
        horizon: Some(horizon),
    }))
}

/// Names accepted by [`builtin`].
pub const BUILTIN_NAMES: [(&str, &str); 3] = [
    ("penalty-xor", "2-agent one-shot game, payoffs AA=0 AB=1 BA=1 BB=-2"),
    ("xor", "2-agent one-shot game, payoffs AA=0 AB=1 BA=1 BB=0"),
    ("bridge", "2-agent gridworld; agents cross a one-wide bridge in opposite directions"),
];

pub fn builtin(name: &str, bridge: &BridgeSpec) -> Result<TabularMmdp> {
    match name {
        "penalty-xor" => Ok(penalty_xor()),
        "xor" => Ok(xor()),
        "bridge" => Ok(build_bridge(bridge)?.mmdp),
        other => Err(Error::invalid(format!(
            "unknown environment {other:?}; known: penalty-xor, xor, bridge"
        ))),
    }
}
