//! Task families, behavior policies of controllable quality, offline
//! datasets and the empirical MDP they induce.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, Array3};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MerpoError, Result};
use crate::mdp::{discounted_marginal, value_iteration, MarginalDist, StochasticPolicy, TabularMdp};
use crate::rng::SeedStream;

/// Count assigned to unvisited pairs wherever `1 / sqrt(|D(s,a)|)` appears.
pub const COUNT_FLOOR: f64 = 0.5;
/// Smallest softmax temperature accepted for expert behavior.
pub const MIN_TEMPERATURE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKind {
    /// Shared goal, per-task wind pushing the agent (dynamics differ).
    GridworldWind,
    /// Shared dynamics, per-task goal on a half circle around the start.
    PointGridGoal,
    /// Shared dynamics on a horizontal ring; reward for moving forward or
    /// backward depending on the task.
    RewardFlip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskFamily {
    pub kind: FamilyKind,
    /// Side length of the square grid.
    pub base_size: usize,
    /// Wind component range for `gridworld_wind`, goal angle range (radians)
    /// for `point_grid_goal`; unused by `reward_flip`.
    pub perturbation_range: (f64, f64),
    pub seed: u64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Probability mass spread uniformly over all moves.
    #[serde(default = "default_slip")]
    pub slip: f64,
}

fn default_gamma() -> f64 {
    0.9
}

fn default_slip() -> f64 {
    0.1
}

impl TaskFamily {
    pub fn new(kind: FamilyKind, base_size: usize, perturbation_range: (f64, f64), seed: u64) -> Self {
        Self {
            kind,
            base_size,
            perturbation_range,
            seed,
            gamma: default_gamma(),
            slip: default_slip(),
        }
    }

    pub fn n_states(&self) -> usize {
        self.base_size * self.base_size
    }

    pub fn shape(&self) -> TaskShape {
        TaskShape {
            n_states: self.n_states(),
            n_actions: MOVES.len(),
            gamma: self.gamma,
            r_max: 1.0,
        }
    }
}

/// What training code is allowed to know about a task without seeing it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskShape {
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub r_max: f64,
}

impl TabularMdp {
    pub fn shape(&self) -> TaskShape {
        TaskShape {
            n_states: self.n_states(),
            n_actions: self.n_actions(),
            gamma: self.gamma(),
            r_max: self.r_max(),
        }
    }
}

/// Stay, up, down, left, right as (dx, dy).
const MOVES: [(i64, i64); 5] = [(0, 0), (0, 1), (0, -1), (-1, 0), (1, 0)];

struct Grid {
    size: usize,
    wrap_x: bool,
}

impl Grid {
    fn index(&self, x: usize, y: usize) -> usize {
        y * self.size + x
    }

    fn coords(&self, s: usize) -> (usize, usize) {
        (s % self.size, s / self.size)
    }

    fn step(&self, s: usize, (dx, dy): (i64, i64)) -> usize {
        let (x, y) = self.coords(s);
        let n = self.size as i64;
        let nx = if self.wrap_x {
            (x as i64 + dx).rem_euclid(n)
        } else {
            (x as i64 + dx).clamp(0, n - 1)
        };
        let ny = (y as i64 + dy).clamp(0, n - 1);
        self.index(nx as usize, ny as usize)
    }

    /// Transition tensor where each `(s, a)` row is a mixture of moves.
    fn dynamics(&self, slip: f64, wind: (f64, f64)) -> Array3<f64> {
        let n = self.size * self.size;
        let mut t = Array3::zeros((n, MOVES.len(), n));
        let (wx, wy) = wind;
        for s in 0..n {
            for (a, &mv) in MOVES.iter().enumerate() {
                let mut add = |m: (i64, i64), p: f64| {
                    if p > 0.0 {
                        t[[s, a, self.step(s, m)]] += p;
                    }
                };
                add(mv, 1.0 - slip - wx.abs() - wy.abs());
                for &m in &MOVES {
                    add(m, slip / MOVES.len() as f64);
                }
                add((wx.signum() as i64, 0), wx.abs());
                add((0, wy.signum() as i64), wy.abs());
            }
        }
        t
    }
}

fn point_mass(n: usize, s: usize) -> Array1<f64> {
    let mut v = Array1::zeros(n);
    v[s] = 1.0;
    v
}

/// Expected indicator of landing on `goal`.
fn goal_reward(t: &Array3<f64>, goal: usize) -> Array2<f64> {
    let (n, na, _) = t.dim();
    Array2::from_shape_fn((n, na), |(s, a)| t[[s, a, goal]])
}

/// Draw `n` tasks from the family. Task `i` depends only on `(seed, i)`.
pub fn sample_tasks(family: &TaskFamily, n: usize) -> Result<Vec<TabularMdp>> {
    if n == 0 {
        return Err(MerpoError::InvalidArgument("need at least one task".into()));
    }
    (0..n).map(|i| sample_task(family, i)).collect()
}

/// Task `i` of the family, identical to `sample_tasks(family, i + 1)[i]`.
pub fn sample_task(family: &TaskFamily, i: usize) -> Result<TabularMdp> {
    if family.base_size < 2 {
        return Err(MerpoError::InvalidArgument("base_size must be at least 2".into()));
    }
    if !(0.0..1.0).contains(&family.slip) {
        return Err(MerpoError::InvalidArgument("slip must lie in [0, 1)".into()));
    }
    let (lo, hi) = family.perturbation_range;
    if !(lo <= hi) {
        return Err(MerpoError::InvalidArgument("empty perturbation range".into()));
    }
    let size = family.base_size;
    let n_states = size * size;
    let root = SeedStream::new(family.seed);
    let draw = |rng: &mut rand_chacha::ChaCha8Rng| if lo == hi { lo } else { rng.random_range(lo..=hi) };
    let mut rng = root.child(i as u64).rng();
    match family.kind {
        FamilyKind::GridworldWind => {
            let grid = Grid { size, wrap_x: false };
            let cap = (1.0 - family.slip) / 2.0;
            let wind = (draw(&mut rng).clamp(-cap, cap), draw(&mut rng).clamp(-cap, cap));
            let t = grid.dynamics(family.slip, wind);
            let r = goal_reward(&t, grid.index(size - 1, size - 1));
            TabularMdp::new(t, r, point_mass(n_states, 0), family.gamma, 1.0)
        }
        FamilyKind::PointGridGoal => {
            let grid = Grid { size, wrap_x: false };
            let t = grid.dynamics(family.slip, (0.0, 0.0));
            let cx = (size - 1) as f64 / 2.0;
            let radius = cx.min((size - 1) as f64);
            let theta = draw(&mut rng);
            let gx = (cx + radius * theta.cos()).round().clamp(0.0, (size - 1) as f64) as usize;
            let gy = (radius * theta.sin()).round().clamp(0.0, (size - 1) as f64) as usize;
            let r = goal_reward(&t, grid.index(gx, gy));
            let start = grid.index(size / 2, 0);
            TabularMdp::new(t, r, point_mass(n_states, start), family.gamma, 1.0)
        }
        FamilyKind::RewardFlip => {
            let grid = Grid { size, wrap_x: true };
            let t = grid.dynamics(family.slip, (0.0, 0.0));
            let direction = if i.is_multiple_of(2) { 1.0 } else { -1.0 };
            let half = size as i64 / 2;
            // Signed x displacement on the ring, in [-1, 1] per step.
            let dx = |s: usize, s2: usize| {
                let (x, _) = grid.coords(s);
                let (x2, _) = grid.coords(s2);
                let mut d = x2 as i64 - x as i64;
                if d > half {
                    d -= size as i64;
                } else if d < -half {
                    d += size as i64;
                }
                d.clamp(-1, 1) as f64
            };
            let r = Array2::from_shape_fn((n_states, MOVES.len()), |(s, a)| {
                direction * (0..n_states).map(|s2| t[[s, a, s2]] * dx(s, s2)).sum::<f64>()
            });
            let start = grid.index(size / 2, size / 2);
            TabularMdp::new(t, r, point_mass(n_states, start), family.gamma, 1.0)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BehaviorQuality {
    Random,
    Medium,
    Expert,
}

impl BehaviorQuality {
    pub const ALL: [BehaviorQuality; 3] = [Self::Random, Self::Medium, Self::Expert];
}

impl fmt::Display for BehaviorQuality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Random => "random",
            Self::Medium => "medium",
            Self::Expert => "expert",
        })
    }
}

impl FromStr for BehaviorQuality {
    type Err = MerpoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "medium" => Ok(Self::Medium),
            "expert" => Ok(Self::Expert),
            other => Err(MerpoError::InvalidArgument(format!("unknown quality `{other}`"))),
        }
    }
}

/// Behavior policy derived from the optimal Q of `mdp`.
///
/// Expert is `softmax(Q* / temperature)`, medium an even mix of expert and
/// uniform, random is uniform.
pub fn make_behavior_policy(
    mdp: &TabularMdp,
    quality: BehaviorQuality,
    temperature: f64,
) -> Result<StochasticPolicy> {
    if !(temperature > 0.0) {
        return Err(MerpoError::InvalidArgument(format!("temperature {temperature} must be positive")));
    }
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    if quality == BehaviorQuality::Random {
        return Ok(StochasticPolicy::uniform(ns, na));
    }
    let q = value_iteration(mdp, 1e-10)?;
    let expert = StochasticPolicy::from_logits(&q.values / temperature.max(MIN_TEMPERATURE))?;
    match quality {
        BehaviorQuality::Expert => Ok(expert),
        _ => {
            let mix = expert.probs().mapv(|p| 0.5 * p + 0.5 / na as f64);
            StochasticPolicy::from_probs(&mix)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub s: usize,
    pub a: usize,
    pub r: f64,
    pub next: usize,
}

/// Independent `(s, a, r, s')` tuples plus their sufficient statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineDataset {
    pub task_id: usize,
    pub quality: BehaviorQuality,
    pub seed: u64,
    n_states: usize,
    n_actions: usize,
    transitions: Vec<Transition>,
    count_sa: Array2<u64>,
    count_sas: Array3<u64>,
    reward_sum_sa: Array2<f64>,
    reward_sq_sum_sa: Array2<f64>,
}

impl OfflineDataset {
    pub fn from_transitions(
        task_id: usize,
        n_states: usize,
        n_actions: usize,
        quality: BehaviorQuality,
        seed: u64,
        transitions: Vec<Transition>,
    ) -> Result<Self> {
        let mut count_sa = Array2::zeros((n_states, n_actions));
        let mut count_sas = Array3::zeros((n_states, n_actions, n_states));
        let mut reward_sum_sa = Array2::zeros((n_states, n_actions));
        let mut reward_sq_sum_sa = Array2::zeros((n_states, n_actions));
        for (i, t) in transitions.iter().enumerate() {
            if t.s >= n_states || t.next >= n_states || t.a >= n_actions || !t.r.is_finite() {
                return Err(MerpoError::InvalidArgument(format!("tuple {i} out of range: {t:?}")));
            }
            count_sa[[t.s, t.a]] += 1;
            count_sas[[t.s, t.a, t.next]] += 1;
            reward_sum_sa[[t.s, t.a]] += t.r;
            reward_sq_sum_sa[[t.s, t.a]] += t.r * t.r;
        }
        Ok(Self {
            task_id,
            quality,
            seed,
            n_states,
            n_actions,
            transitions,
            count_sa,
            count_sas,
            reward_sum_sa,
            reward_sq_sum_sa,
        })
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn count_sa(&self) -> &Array2<u64> {
        &self.count_sa
    }

    pub fn count_sas(&self) -> &Array3<u64> {
        &self.count_sas
    }

    pub fn reward_sum_sa(&self) -> &Array2<f64> {
        &self.reward_sum_sa
    }

    pub fn reward_sq_sum_sa(&self) -> &Array2<f64> {
        &self.reward_sq_sum_sa
    }

    /// `|D(s,a)|` with unvisited pairs set to [`COUNT_FLOOR`].
    pub fn floored_counts(&self) -> Array2<f64> {
        self.count_sa.mapv(|c| if c == 0 { COUNT_FLOOR } else { c as f64 })
    }

    /// Fraction of tuples at each `(s, a)`.
    pub fn pair_freq(&self) -> Array2<f64> {
        let n = self.len().max(1) as f64;
        self.count_sa.mapv(|c| c as f64 / n)
    }

    /// Dataset marginal `d(s, a)`.
    pub fn marginal(&self) -> Result<MarginalDist> {
        if self.is_empty() {
            return Err(MerpoError::InvalidArgument("empty dataset has no marginal".into()));
        }
        MarginalDist::new(self.pair_freq())
    }

    pub fn state_freq(&self) -> Array1<f64> {
        self.pair_freq().sum_axis(ndarray::Axis(1))
    }

    /// Start distribution implied by tuples drawn from a discounted marginal:
    /// `mu0 = (d(s) - gamma d_next(s)) / (1 - gamma)`, clipped at zero and
    /// renormalized. Falls back to the state frequency when nothing survives.
    pub fn start_estimate(&self, gamma: f64) -> Array1<f64> {
        let freq = self.state_freq();
        let n = self.len().max(1) as f64;
        let mut next = Array1::<f64>::zeros(self.n_states);
        for t in &self.transitions {
            next[t.next] += 1.0 / n;
        }
        let mu = (&freq - &(next * gamma)).mapv(|x| x.max(0.0));
        let z = mu.sum();
        if z > 0.0 {
            mu / z
        } else {
            freq
        }
    }

    pub fn support(&self) -> Array2<bool> {
        self.count_sa.mapv(|c| c > 0)
    }

    /// Empirical behavior conditional `n(s,a) / n(s)`, uniform on unvisited
    /// states, with zero entries floored at `floor` before renormalizing.
    pub fn behavior_conditional(&self, floor: f64) -> StochasticPolicy {
        let mut probs = Array2::zeros((self.n_states, self.n_actions));
        for s in 0..self.n_states {
            let ns: u64 = self.count_sa.row(s).sum();
            for a in 0..self.n_actions {
                probs[[s, a]] = if ns == 0 {
                    1.0 / self.n_actions as f64
                } else {
                    (self.count_sa[[s, a]] as f64 / ns as f64).max(floor)
                };
            }
            let z: f64 = probs.row(s).sum();
            probs.row_mut(s).mapv_inplace(|p| p / z);
        }
        StochasticPolicy::from_probs(&probs).expect("normalized rows")
    }

    /// Shuffled split into `(train, validation)` with `train_frac` of the
    /// tuples in the first part.
    pub fn split(&self, train_frac: f64, seed: SeedStream) -> Result<(OfflineDataset, OfflineDataset)> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut seed.rng());
        let n_train = ((self.len() as f64) * train_frac).round() as usize;
        let n_train = n_train.clamp(1.min(self.len()), self.len());
        let pick = |ids: &[usize]| ids.iter().map(|&i| self.transitions[i]).collect::<Vec<_>>();
        let make = |t| Self::from_transitions(self.task_id, self.n_states, self.n_actions, self.quality, self.seed, t);
        Ok((make(pick(&idx[..n_train]))?, make(pick(&idx[n_train..]))?))
    }

    /// Header `task_id n_states n_actions quality seed`, then one `s a r s'`
    /// line per tuple.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "{} {} {} {} {}",
            self.task_id, self.n_states, self.n_actions, self.quality, self.seed
        )?;
        for t in &self.transitions {
            writeln!(w, "{} {} {} {}", t.s, t.a, crate::textio::fmt_real(t.r), t.next)?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let perr = |line: usize, msg: &str| MerpoError::Parse {
            line,
            msg: msg.to_string(),
        };
        let (_, header) = lines.next().ok_or_else(|| perr(1, "empty dataset file"))?;
        let header = header?;
        let h: Vec<&str> = header.split_whitespace().collect();
        if h.len() != 5 {
            return Err(perr(1, "header must be `task_id n_states n_actions quality seed`"));
        }
        let num = |s: &str| s.parse::<u64>().map_err(|_| perr(1, "bad integer in header"));
        let task_id = num(h[0])? as usize;
        let n_states = num(h[1])? as usize;
        let n_actions = num(h[2])? as usize;
        let quality: BehaviorQuality = h[3].parse()?;
        let seed = num(h[4])?;
        let mut transitions = Vec::new();
        for (i, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            let bad = || perr(i + 1, "expected `s a r s'`");
            if f.len() != 4 {
                return Err(bad());
            }
            transitions.push(Transition {
                s: f[0].parse().map_err(|_| bad())?,
                a: f[1].parse().map_err(|_| bad())?,
                r: f[2].parse().map_err(|_| bad())?,
                next: f[3].parse().map_err(|_| bad())?,
            });
        }
        Self::from_transitions(task_id, n_states, n_actions, quality, seed, transitions)
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| crate::error::io_at(path, e))?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| crate::error::io_at(path, e))?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

/// Sample `n_transitions` i.i.d. tuples: `(s, a) ~ d^beta`, `s' ~ T(.|s,a)`,
/// `r = r(s, a)`.
pub fn collect_dataset(
    mdp: &TabularMdp,
    beta: &StochasticPolicy,
    quality: BehaviorQuality,
    task_id: usize,
    n_transitions: usize,
    seed: u64,
) -> Result<OfflineDataset> {
    if n_transitions == 0 {
        return Err(MerpoError::InvalidArgument("n_transitions must be at least 1".into()));
    }
    let d = discounted_marginal(mdp, beta)?;
    let pairs = WeightedIndex::new(d.dist().iter().copied())
        .map_err(|e| MerpoError::InvalidArgument(format!("marginal not samplable: {e}")))?;
    let na = mdp.n_actions();
    let mut next_dists: Vec<Option<WeightedIndex<f64>>> = vec![None; mdp.n_states() * na];
    let mut rng = SeedStream::new(seed).rng();
    let mut transitions = Vec::with_capacity(n_transitions);
    for _ in 0..n_transitions {
        let idx = pairs.sample(&mut rng);
        let (s, a) = (idx / na, idx % na);
        let row = next_dists[idx].get_or_insert_with(|| {
            WeightedIndex::new(mdp.transition().slice(ndarray::s![s, a, ..]).iter().copied())
                .expect("transition rows are distributions")
        });
        let next = row.sample(&mut rng);
        transitions.push(Transition {
            s,
            a,
            r: mdp.reward()[[s, a]],
            next,
        });
    }
    OfflineDataset::from_transitions(task_id, mdp.n_states(), na, quality, seed, transitions)
}

/// MDP whose visited rows are dataset frequencies.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMdp {
    pub mdp: TabularMdp,
    /// Visited `(s, a)` pairs.
    pub support: Array2<bool>,
    /// `|D(s,a)|` with the floor applied to unvisited pairs.
    pub counts: Array2<f64>,
}

/// Build the empirical MDP of `data`.
///
/// Unvisited pairs get a uniform transition row and reward 0. The initial
/// distribution is [`OfflineDataset::start_estimate`].
pub fn induce_empirical(data: &OfflineDataset, shape: &TaskShape) -> Result<EmpiricalMdp> {
    if data.is_empty() {
        return Err(MerpoError::InvalidArgument("dataset is empty".into()));
    }
    let (ns, na) = (shape.n_states, shape.n_actions);
    if (data.n_states(), data.n_actions()) != (ns, na) {
        return Err(MerpoError::ShapeMismatch("dataset does not match task shape".into()));
    }
    let mut t = Array3::from_elem((ns, na, ns), 1.0 / ns as f64);
    let mut r = Array2::zeros((ns, na));
    for s in 0..ns {
        for a in 0..na {
            let c = data.count_sa[[s, a]];
            if c > 0 {
                for s2 in 0..ns {
                    t[[s, a, s2]] = data.count_sas[[s, a, s2]] as f64 / c as f64;
                }
                r[[s, a]] = (data.reward_sum_sa[[s, a]] / c as f64).clamp(-shape.r_max, shape.r_max);
            }
        }
    }
    let mdp = TabularMdp::new(t, r, data.start_estimate(shape.gamma), shape.gamma, shape.r_max)?;
    Ok(EmpiricalMdp {
        mdp,
        support: data.support(),
        counts: data.floored_counts(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::expected_return;

    fn wind_family(range: (f64, f64)) -> TaskFamily {
        TaskFamily::new(FamilyKind::GridworldWind, 4, range, 17)
    }

    #[test]
    fn reward_flip_pairs_share_dynamics() {
        let fam = TaskFamily::new(FamilyKind::RewardFlip, 4, (0.0, 0.0), 3);
        let tasks = sample_tasks(&fam, 2).unwrap();
        assert_eq!(tasks[0].transition(), tasks[1].transition());
        assert_eq!(tasks[0].reward(), &tasks[1].reward().mapv(|r| -r));
        assert!(tasks[0].reward().iter().any(|&r| r.abs() > 0.5));
    }

    #[test]
    fn zero_wind_gives_identical_tasks() {
        let tasks = sample_tasks(&wind_family((0.0, 0.0)), 5).unwrap();
        assert!(tasks.windows(2).all(|w| w[0] == w[1]));
        let tasks = sample_tasks(&wind_family((-0.3, 0.3)), 5).unwrap();
        assert_ne!(tasks[0].transition(), tasks[1].transition());
        assert_eq!(tasks[0].init_dist(), tasks[1].init_dist());
    }

    #[test]
    fn wind_split_sizes() {
        let tasks = sample_tasks(&wind_family((-0.05, 0.05)), 50).unwrap();
        let (train, test) = tasks.split_at(40);
        assert_eq!((train.len(), test.len()), (40, 10));
    }

    #[test]
    fn point_goals_vary() {
        let fam = TaskFamily::new(FamilyKind::PointGridGoal, 5, (0.0, std::f64::consts::PI), 9);
        let tasks = sample_tasks(&fam, 12).unwrap();
        assert!(tasks.iter().all(|t| t.transition() == tasks[0].transition()));
        assert!(tasks.iter().any(|t| t.reward() != tasks[0].reward()));
    }

    #[test]
    fn quality_ladder_orders_returns() {
        let root = SeedStream::new(21);
        for i in 0..50 {
            let mut rng = root.child(i).rng();
            let m = TabularMdp::random(6, 3, 0.9, 1.0, &mut rng);
            let j: Vec<f64> = BehaviorQuality::ALL
                .iter()
                .map(|&q| expected_return(&m, &make_behavior_policy(&m, q, 0.05).unwrap()).unwrap())
                .collect();
            assert!(j[2] > j[1] && j[1] > j[0], "{j:?}");
        }
    }

    #[test]
    fn random_behavior_is_uniform_and_expert_is_greedy() {
        let m = TabularMdp::random(4, 3, 0.9, 1.0, &mut SeedStream::new(2).rng());
        let r = make_behavior_policy(&m, BehaviorQuality::Random, 1.0).unwrap();
        assert!(r.probs().iter().all(|&p| p == 1.0 / 3.0));
        let e = make_behavior_policy(&m, BehaviorQuality::Expert, 1e-9).unwrap();
        let q = value_iteration(&m, 1e-10).unwrap();
        for s in 0..4 {
            let best = crate::mdp::argmax(q.values.row(s).iter().copied());
            assert!(e.prob(s, best) > 0.99);
        }
        assert!(make_behavior_policy(&m, BehaviorQuality::Expert, 0.0).is_err());
    }

    #[test]
    fn single_tuple_dataset() {
        let m = TabularMdp::random(3, 2, 0.9, 1.0, &mut SeedStream::new(4).rng());
        let d = collect_dataset(&m, &StochasticPolicy::uniform(3, 2), BehaviorQuality::Random, 0, 1, 5).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.count_sa().sum(), 1);
        let emp = induce_empirical(&d, &m.shape()).unwrap();
        assert_eq!(emp.support.iter().filter(|&&b| b).count(), 1);
        for s in 0..3 {
            for a in 0..2 {
                if !emp.support[[s, a]] {
                    assert_eq!(emp.counts[[s, a]], COUNT_FLOOR);
                    assert_eq!(emp.mdp.reward()[[s, a]], 0.0);
                    assert!(emp.mdp.transition().slice(ndarray::s![s, a, ..]).iter().all(|&p| p == 1.0 / 3.0));
                }
            }
        }
        assert!(collect_dataset(&m, &StochasticPolicy::uniform(3, 2), BehaviorQuality::Random, 0, 0, 5).is_err());
    }

    #[test]
    fn pair_frequencies_match_marginal() {
        let m = TabularMdp::random(4, 2, 0.8, 1.0, &mut SeedStream::new(12).rng());
        let beta = make_behavior_policy(&m, BehaviorQuality::Medium, 0.5).unwrap();
        let n = 1_000_000;
        let data = collect_dataset(&m, &beta, BehaviorQuality::Medium, 0, n, 13).unwrap();
        let d = discounted_marginal(&m, &beta).unwrap();
        for ((s, a), &c) in data.count_sa().indexed_iter() {
            let p = d.get(s, a);
            let se = (p * (1.0 - p) / n as f64).sqrt();
            let freq = c as f64 / n as f64;
            assert!((freq - p).abs() < 3.0 * se + 1e-12, "({s},{a}) {freq} vs {p}");
        }
    }

    #[test]
    fn deterministic_mdp_has_single_successor() {
        let fam = TaskFamily {
            slip: 0.0,
            ..wind_family((0.0, 0.0))
        };
        let m = &sample_tasks(&fam, 1).unwrap()[0];
        let data = collect_dataset(m, &StochasticPolicy::uniform(16, 5), BehaviorQuality::Random, 0, 2000, 3).unwrap();
        for s in 0..16 {
            for a in 0..5 {
                let nz = (0..16).filter(|&s2| data.count_sas()[[s, a, s2]] > 0).count();
                assert!(nz <= 1);
                assert_eq!(nz == 1, data.count_sa()[[s, a]] > 0);
            }
        }
    }

    #[test]
    fn counts_are_sufficient_statistics() {
        let m = TabularMdp::random(5, 3, 0.9, 1.0, &mut SeedStream::new(30).rng());
        let data = collect_dataset(&m, &StochasticPolicy::uniform(5, 3), BehaviorQuality::Random, 2, 3000, 31).unwrap();
        let rebuilt = OfflineDataset::from_transitions(2, 5, 3, data.quality, data.seed, data.transitions().to_vec()).unwrap();
        assert_eq!(rebuilt, data);
        for s in 0..5 {
            for a in 0..3 {
                let row: u64 = data.count_sas().slice(ndarray::s![s, a, ..]).sum();
                assert_eq!(row, data.count_sa()[[s, a]]);
            }
        }
        assert_eq!(induce_empirical(&data, &m.shape()).unwrap(), induce_empirical(&data, &m.shape()).unwrap());
    }

    #[test]
    fn empirical_transition_error_shrinks() {
        let m = TabularMdp::random(4, 2, 0.5, 1.0, &mut SeedStream::new(40).rng());
        let beta = StochasticPolicy::uniform(4, 2);
        let full = collect_dataset(&m, &beta, BehaviorQuality::Random, 0, 100_000, 41).unwrap();
        let mut last = f64::INFINITY;
        let base_support = OfflineDataset::from_transitions(0, 4, 2, full.quality, 0, full.transitions()[..1000].to_vec())
            .unwrap()
            .support();
        for n in [1_000, 10_000, 100_000] {
            let d = OfflineDataset::from_transitions(0, 4, 2, full.quality, 0, full.transitions()[..n].to_vec()).unwrap();
            let emp = induce_empirical(&d, &m.shape()).unwrap();
            let mut err = 0.0f64;
            for ((s, a), &sup) in base_support.indexed_iter() {
                if sup {
                    for s2 in 0..4 {
                        err = err.max((emp.mdp.transition()[[s, a, s2]] - m.transition()[[s, a, s2]]).abs());
                    }
                }
            }
            assert!(err <= last, "n={n}: {err} > {last}");
            last = err;
        }
        assert!(last < 0.02);
    }

    #[test]
    fn dataset_file_round_trip() {
        let m = TabularMdp::random(3, 2, 0.9, 1.0, &mut SeedStream::new(50).rng());
        let data = collect_dataset(&m, &StochasticPolicy::uniform(3, 2), BehaviorQuality::Random, 7, 50, 51).unwrap();
        let mut buf = Vec::new();
        data.write_to(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("7 3 2 random 51\n"));
        assert_eq!(OfflineDataset::read_from(buf.as_slice()).unwrap(), data);
        assert!(OfflineDataset::read_from("7 3 2 random\n".as_bytes()).is_err());
        assert!(OfflineDataset::read_from("7 3 2 random 1\n0 0 x 1\n".as_bytes()).is_err());
    }
}
