//! Model-based epsilon-greedy learning on the aggregated model.
//!
//! Each phase runs the simulator under an epsilon-greedy mixture of the current
//! policy and uniform restricted actions, accumulates visit counts and reward
//! sums per `(state, action, next state)`, then solves the Bellman equation of
//! the estimated model to get the next policy.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::aggregation::{AbstractAction, AggregatedState, StateSpace};
use crate::channel::{evaluate, realize_action, ChannelConfig, PolicyController, Throughput};
use crate::error::{Error, Result};
use crate::policy::{Criterion, Policy, ValueFunction};
use crate::state::{DetailedState, TieBreak};

/// Visit counts and reward sums of the aggregated model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionModel {
    n_states: usize,
    n_actions: usize,
    counts: Vec<u64>,
    rewards: Vec<f64>,
    visits: Vec<u64>,
}

impl TransitionModel {
    pub fn new(n_states: usize, n_actions: usize) -> Self {
        TransitionModel {
            n_states,
            n_actions,
            counts: vec![0; n_states * n_actions * n_states],
            rewards: vec![0.0; n_states * n_actions * n_states],
            visits: vec![0; n_states * n_actions],
        }
    }

    pub fn for_space(space: &StateSpace) -> Self {
        Self::new(space.len(), space.n_actions())
    }

    fn cell(&self, s: usize, a: AbstractAction, next: usize) -> usize {
        (s * self.n_actions + a.slot()) * self.n_states + next
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn record(&mut self, s: usize, a: AbstractAction, next: usize, reward: f64) {
        let c = self.cell(s, a, next);
        self.counts[c] += 1;
        self.rewards[c] += reward;
        self.visits[s * self.n_actions + a.slot()] += 1;
    }

    pub fn visits(&self, s: usize, a: AbstractAction) -> u64 {
        self.visits[s * self.n_actions + a.slot()]
    }

    pub fn count(&self, s: usize, a: AbstractAction, next: usize) -> u64 {
        self.counts[self.cell(s, a, next)]
    }

    pub fn is_empty(&self) -> bool {
        self.visits.iter().all(|&v| v == 0)
    }

    /// Estimated `p(next | s, a)`; `None` for an unvisited pair.
    pub fn p_hat(&self, s: usize, a: AbstractAction, next: usize) -> Option<f64> {
        let n = self.visits(s, a);
        (n > 0).then(|| self.count(s, a, next) as f64 / n as f64)
    }

    /// Mean reward observed on the transition `s --a--> next`.
    pub fn r_hat(&self, s: usize, a: AbstractAction, next: usize) -> Option<f64> {
        let c = self.cell(s, a, next);
        (self.counts[c] > 0).then(|| self.rewards[c] / self.counts[c] as f64)
    }

    /// Mean one-step reward of the pair.
    pub fn mean_reward(&self, s: usize, a: AbstractAction) -> Option<f64> {
        let n = self.visits(s, a);
        if n == 0 {
            return None;
        }
        let base = self.cell(s, a, 0);
        Some(self.rewards[base..base + self.n_states].iter().sum::<f64>() / n as f64)
    }

    /// `(next, count, reward sum)` for every observed successor.
    pub fn successors(&self, s: usize, a: AbstractAction) -> impl Iterator<Item = (usize, u64, f64)> + '_ {
        let base = self.cell(s, a, 0);
        (0..self.n_states)
            .filter(move |&j| self.counts[base + j] > 0)
            .map(move |j| (j, self.counts[base + j], self.rewards[base + j]))
    }

    /// Expected `r + gamma * V(next)` of one pair, or `None` if never tried.
    pub fn q_value(&self, s: usize, a: AbstractAction, gamma: f64, v: &[f64]) -> Option<f64> {
        let n = self.visits(s, a);
        if n == 0 {
            return None;
        }
        let base = self.cell(s, a, 0);
        let mut total = 0.0;
        for j in 0..self.n_states {
            let c = self.counts[base + j];
            if c > 0 {
                total += self.rewards[base + j] + gamma * c as f64 * v[j];
            }
        }
        Some(total / n as f64)
    }

    /// Checkpoint rows, one per visited pair.
    pub fn checkpoint(&self, space: &StateSpace) -> Vec<CheckpointRow> {
        let mut rows = Vec::new();
        for s in 0..self.n_states {
            for &a in space.scheme.actions() {
                let n = self.visits(s, a);
                if n == 0 {
                    continue;
                }
                rows.push(CheckpointRow {
                    state_index: s,
                    state: space.state(s),
                    action: a.label(),
                    visits: n,
                    reward_sum: self.successors(s, a).map(|x| x.2).sum(),
                    successors: self
                        .successors(s, a)
                        .map(|(next, count, reward_sum)| SuccessorCount {
                            next,
                            count,
                            reward_sum,
                        })
                        .collect(),
                });
            }
        }
        rows
    }

    pub fn from_checkpoint(space: &StateSpace, rows: &[CheckpointRow]) -> Result<Self> {
        let mut m = Self::for_space(space);
        for row in rows {
            let a = AbstractAction::from_label(row.action)?;
            if row.state_index >= m.n_states || a.slot() >= m.n_actions {
                return Err(Error::Parse(format!("checkpoint row {} out of range", row.state_index)));
            }
            for succ in &row.successors {
                if succ.next >= m.n_states {
                    return Err(Error::Parse(format!("successor {} out of range", succ.next)));
                }
                let c = m.cell(row.state_index, a, succ.next);
                m.counts[c] += succ.count;
                m.rewards[c] += succ.reward_sum;
                m.visits[row.state_index * m.n_actions + a.slot()] += succ.count;
            }
        }
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuccessorCount {
    pub next: usize,
    pub count: u64,
    pub reward_sum: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRow {
    pub state_index: usize,
    pub state: AggregatedState,
    pub action: u8,
    pub visits: u64,
    pub reward_sum: f64,
    pub successors: Vec<SuccessorCount>,
}

const MAX_SWEEPS: usize = 200_000;

/// Value iteration diagnostics: sup-norm change after each sweep.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveStats {
    pub iterations: usize,
    pub residuals: Vec<f64>,
}

/// Solves the Bellman equation of the estimated model.
///
/// Unvisited pairs take no part in the maximum; a state without any visited
/// action keeps value 0 and its first feasible action.
pub fn value_iteration(
    model: &TransitionModel,
    space: &StateSpace,
    gamma: f64,
    tol: f64,
) -> Result<(ValueFunction, Policy, SolveStats)> {
    if model.is_empty() {
        return Err(Error::NoData);
    }
    let n = space.len();
    let feasible: Vec<Vec<AbstractAction>> = (0..n).map(|i| space.feasible(i)).collect();
    let mut v = vec![0.0; n];
    let mut stats = SolveStats::default();
    loop {
        let mut next = vec![0.0; n];
        for (s, acts) in feasible.iter().enumerate() {
            next[s] = acts
                .iter()
                .filter_map(|&a| model.q_value(s, a, gamma, &v))
                .fold(None, |m: Option<f64>, q| Some(m.map_or(q, |m| m.max(q))))
                .unwrap_or(0.0);
        }
        let change = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        stats.iterations += 1;
        stats.residuals.push(change);
        if change < tol || stats.iterations >= MAX_SWEEPS {
            break;
        }
    }
    let policy = greedy_policy(model, space, gamma, &v);
    Ok((
        ValueFunction {
            criterion: Criterion::Discounted(gamma),
            values: v,
        },
        policy,
        stats,
    ))
}

/// Greedy policy of `v`; ties keep the earlier feasible action.
pub fn greedy_policy(model: &TransitionModel, space: &StateSpace, gamma: f64, v: &[f64]) -> Policy {
    let mut policy = Policy::default_for(space);
    for s in 0..space.len() {
        let mut best: Option<(AbstractAction, f64)> = None;
        for a in space.feasible(s) {
            if let Some(q) = model.q_value(s, a, gamma, v) {
                if best.is_none_or(|(_, b)| q > b + 1e-12 * b.abs().max(1.0)) {
                    best = Some((a, q));
                }
            }
        }
        if let Some((a, _)) = best {
            policy.set(space, s, a).expect("feasible by construction");
        }
    }
    policy
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Component {
    F,
    Size,
    E,
}

impl Component {
    fn get(self, s: &AggregatedState) -> Option<usize> {
        let (f, size, e) = s.components();
        match self {
            Component::F => f.map(usize::from),
            Component::Size => size,
            Component::E => e,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Ascending,
    Descending,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThresholdRule {
    pub component: Component,
    pub direction: Direction,
}

/// Forces at most one action switch along `component` in every slice of
/// states that agree on all other components.
///
/// The action found at the first switch is written to every later state of
/// the slice where it is feasible. A slice with more than one switch is an error unless
/// `allow_overwrite` is set.
pub fn threshold_accelerate(
    space: &StateSpace,
    policy: &Policy,
    component: Component,
    direction: Direction,
    allow_overwrite: bool,
) -> Result<Policy> {
    let mut out = policy.clone();
    let key = |s: &AggregatedState| {
        let (f, size, e) = s.components();
        (
            (component != Component::F).then_some(f),
            (component != Component::Size).then_some(size),
            (component != Component::E).then_some(e),
        )
    };
    let mut slices: Vec<(_, Vec<(usize, usize)>)> = Vec::new();
    for (i, s) in space.states().iter().enumerate() {
        let Some(pos) = component.get(s) else { continue };
        let k = key(s);
        match slices.iter_mut().find(|(kk, _)| *kk == k) {
            Some((_, v)) => v.push((pos, i)),
            None => slices.push((k, vec![(pos, i)])),
        }
    }
    for (_, mut members) in slices {
        members.sort();
        if direction == Direction::Descending {
            members.reverse();
        }
        let acts: Vec<AbstractAction> = members.iter().map(|&(_, i)| policy.action(i)).collect();
        let switches = acts.windows(2).filter(|w| w[0] != w[1]).count();
        if switches <= 1 {
            continue;
        }
        if !allow_overwrite {
            let (_, i) = members[0];
            return Err(Error::AmbiguousSlice(space.state(i).to_string()));
        }
        let first = acts.windows(2).position(|w| w[0] != w[1]).unwrap() + 1;
        let target = acts[first];
        for &(_, i) in &members[first..] {
            if space.feasible(i).contains(&target) {
                out.set(space, i, target)?;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningSchedule {
    pub eps0: f64,
    pub eps_decay: f64,
    pub eps_min: f64,
    pub slots_per_phase: u64,
    /// Sup-norm change in values between phases below which learning stops.
    pub eps_stop: f64,
    /// Consecutive phases with an unchanged policy after which learning stops.
    pub policy_patience: usize,
    pub min_phases: usize,
    pub max_phases: usize,
    /// Teleports to the least visited state-action pair per phase.
    pub resets_per_phase: u64,
    pub least_visited_seeding: bool,
    pub vi_tol: f64,
    pub threshold_rules: Vec<ThresholdRule>,
}

impl Default for LearningSchedule {
    fn default() -> Self {
        LearningSchedule {
            eps0: 1.0,
            eps_decay: 0.7,
            eps_min: 0.05,
            slots_per_phase: 50_000,
            eps_stop: 0.5,
            policy_patience: 3,
            min_phases: 4,
            max_phases: 40,
            resets_per_phase: 20,
            least_visited_seeding: true,
            vi_tol: 1e-6,
            threshold_rules: Vec::new(),
        }
    }
}

impl LearningSchedule {
    pub fn epsilon(&self, phase: usize) -> f64 {
        (self.eps0 * self.eps_decay.powi(phase as i32)).max(self.eps_min).clamp(0.0, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field, reason: &str| Err(Error::InvalidConfig { field, reason: reason.into() });
        if !(0.0..=1.0).contains(&self.eps0) || !(0.0..=1.0).contains(&self.eps_min) {
            return bad("schedule.eps0", "epsilon values must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.eps_decay) {
            return bad("schedule.eps_decay", "decay must lie in [0, 1]");
        }
        if self.slots_per_phase == 0 {
            return bad("schedule.slots_per_phase", "must be at least 1");
        }
        if self.max_phases == 0 {
            return bad("schedule.max_phases", "must be at least 1");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    ValueConverged,
    PolicyStable,
    Budget,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub phase: usize,
    pub epsilon: f64,
    pub slots: u64,
    pub sup_change: Option<f64>,
    pub policy_changes: usize,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningOutcome {
    pub values: ValueFunction,
    pub policy: Policy,
    pub model: TransitionModel,
    pub history: Vec<PhaseRecord>,
    pub stop: StopReason,
    pub converged: bool,
    pub total_slots: u64,
}

const POOL_CAPACITY: usize = 64;

/// Uniform reservoir samples of the detailed states seen in each aggregated state.
///
/// Teleporting into a previously visited detailed state keeps the fiber
/// distribution close to the one the system actually produces; the canonical
/// seed is used only for aggregates never reached yet.
struct StatePool {
    capacity: usize,
    seen: Vec<u64>,
    samples: Vec<Vec<DetailedState>>,
}

impl StatePool {
    fn new(n_states: usize, capacity: usize) -> Self {
        StatePool {
            capacity,
            seen: vec![0; n_states],
            samples: vec![Vec::new(); n_states],
        }
    }

    fn offer(&mut self, idx: usize, s: &DetailedState, rng: &mut impl Rng) {
        self.seen[idx] += 1;
        let bucket = &mut self.samples[idx];
        if bucket.len() < self.capacity {
            bucket.push(s.clone());
        } else {
            let j = rng.gen_range(0..self.seen[idx]);
            if (j as usize) < self.capacity {
                bucket[j as usize] = s.clone();
            }
        }
    }

    fn draw(&self, idx: usize, rng: &mut impl Rng) -> Option<DetailedState> {
        let bucket = &self.samples[idx];
        (!bucket.is_empty()).then(|| bucket[rng.gen_range(0..bucket.len())].clone())
    }
}

/// Least visited feasible pair, ties to the lowest index.
fn least_visited(model: &TransitionModel, space: &StateSpace) -> (usize, AbstractAction) {
    let mut best = (0, space.feasible(0)[0], u64::MAX);
    for s in 0..space.len() {
        for a in space.feasible(s) {
            let n = model.visits(s, a);
            if n < best.2 {
                best = (s, a, n);
            }
        }
    }
    (best.0, best.1)
}

/// Runs the learning loop from scratch.
pub fn algorithm_a(channel: &ChannelConfig, space: &StateSpace, schedule: &LearningSchedule) -> Result<LearningOutcome> {
    let model = TransitionModel::for_space(space);
    algorithm_a_from(channel, space, schedule, model)
}

/// Continues the learning loop from an existing model.
pub fn algorithm_a_from(
    channel: &ChannelConfig,
    space: &StateSpace,
    schedule: &LearningSchedule,
    mut model: TransitionModel,
) -> Result<LearningOutcome> {
    channel.validate()?;
    schedule.validate()?;
    if channel.mode() != space.scheme.mode() || channel.k != space.scheme.k {
        return Err(Error::ModeMismatch);
    }
    let gamma = channel.gamma;
    let mut rng = channel.rng(u64::MAX);
    let start = DetailedState::empty(channel.k, channel.mode())?;
    let mut policy = Policy::default_for(space);
    let mut values: Option<ValueFunction> = None;
    let mut history = Vec::new();
    let mut stable = 0usize;
    let mut stop = StopReason::Budget;
    let mut total_slots = 0;
    let reset_every = if schedule.least_visited_seeding && schedule.resets_per_phase > 0 {
        (schedule.slots_per_phase / schedule.resets_per_phase).max(1)
    } else {
        u64::MAX
    };

    let mut pool = StatePool::new(space.len(), POOL_CAPACITY);

    for phase in 0..schedule.max_phases {
        let eps = schedule.epsilon(phase);
        let mut s = start.clone();
        let mut forced: Option<AbstractAction> = None;
        for slot in 0..schedule.slots_per_phase {
            if slot % reset_every == 0 {
                let (idx, a) = least_visited(&model, space);
                s = match pool.draw(idx, &mut rng) {
                    Some(d) => d,
                    None => space.scheme.seed_state(&space.state(idx))?,
                };
                forced = Some(a);
            }
            let idx = space.locate(&s)?;
            pool.offer(idx, &s, &mut rng);
            let action = match forced.take() {
                Some(a) => a,
                None => {
                    // the initial policy is uniform over feasible actions
                    if values.is_none() || rng.gen::<f64>() < eps {
                        let f = space.feasible(idx);
                        f[rng.gen_range(0..f.len())]
                    } else {
                        policy.action(idx)
                    }
                }
            };
            let combo = realize_action(&space.scheme, &s, action, &mut TieBreak::Uniform(&mut rng))?;
            let out = channel.transmit(&s, combo, &mut rng as &mut dyn RngCore)?;
            let next = space.locate(&out.next_state)?;
            model.record(idx, action, next, out.reward as f64);
            s = out.next_state;
        }
        total_slots += schedule.slots_per_phase;

        let (v, mut new_policy, _) = value_iteration(&model, space, gamma, schedule.vi_tol)?;
        for rule in &schedule.threshold_rules {
            new_policy = threshold_accelerate(space, &new_policy, rule.component, rule.direction, true)?;
        }
        let sup_change = values.as_ref().map(|old| old.sup_distance(&v));
        let policy_changes = policy
            .actions()
            .iter()
            .zip(new_policy.actions())
            .filter(|(a, b)| a != b)
            .count();
        if policy_changes == 0 && values.is_some() {
            stable += 1;
        } else {
            stable = 0;
        }
        history.push(PhaseRecord {
            phase,
            epsilon: eps,
            slots: schedule.slots_per_phase,
            sup_change,
            policy_changes,
            values: v.values.clone(),
        });
        policy = new_policy;
        values = Some(v);
        if phase + 1 >= schedule.min_phases {
            if sup_change.is_some_and(|c| c < schedule.eps_stop) {
                stop = StopReason::ValueConverged;
                break;
            }
            if schedule.policy_patience > 0 && stable >= schedule.policy_patience {
                stop = StopReason::PolicyStable;
                break;
            }
        }
    }
    Ok(LearningOutcome {
        values: values.ok_or(Error::NoData)?,
        policy,
        model,
        history,
        converged: stop != StopReason::Budget,
        stop,
        total_slots,
    })
}

/// Long-run throughput of `policy`, averaged over independent seeds.
pub fn average_cost_eval(
    policy: &Policy,
    channel: &ChannelConfig,
    space: &StateSpace,
    n_slots: u64,
    n_seeds: u64,
) -> Result<Throughput> {
    evaluate(|| Box::new(PolicyController { space, policy }), channel, space, n_slots, n_seeds)
}
