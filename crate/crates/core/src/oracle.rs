//! Exact ground truth for small binary systems.
//!
//! Every binary storage matrix of a `K`-user system is enumerated (`2^(K(K-1))`
//! states), transitions are computed exactly by marginalizing over the
//! realization of each restricted action and over all reception vectors, and
//! the induced aggregated model is built from stationary conditional weights.

use std::collections::{BTreeMap, HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{AbstractAction, AggregatedState, SchemeKind, StateSpace};
use crate::channel::LossModel;
use crate::error::{Error, Result};
use crate::policy::{Criterion, Policy, ValueFunction};
use crate::state::{DetailedState, Reception, StorageMode, StorageRule, UserSet};

/// Largest `K` enumerated without an explicit override.
pub const GUARD_USERS: usize = 4;

/// `(successor code, probability, probability-weighted reward)`.
pub type Successor = (usize, f64, f64);

#[derive(Clone, Debug)]
pub struct ExactOracle {
    k: usize,
    loss: Vec<f64>,
    rule: StorageRule,
}

impl ExactOracle {
    pub fn new(k: usize, loss: &LossModel, rule: StorageRule, allow_large: bool) -> Result<Self> {
        if !(2..=5).contains(&k) || (k > GUARD_USERS && !allow_large) {
            return Err(Error::TooLarge(format!(
                "{k} users means 2^{} detailed states",
                k * (k.max(1) - 1)
            )));
        }
        let loss = match loss {
            LossModel::Uniform(p) => vec![*p; k],
            LossModel::PerUser(v) if v.len() == k => v.clone(),
            LossModel::PerUser(v) => {
                return Err(Error::InvalidConfig {
                    field: "loss",
                    reason: format!("{} per-user values for {k} users", v.len()),
                })
            }
        };
        if loss.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidConfig {
                field: "loss",
                reason: "loss probabilities must lie in [0, 1]".into(),
            });
        }
        Ok(ExactOracle { k, loss, rule })
    }

    pub fn uniform(k: usize, p: f64) -> Result<Self> {
        Self::new(k, &LossModel::Uniform(p), StorageRule::Persist, false)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_states(&self) -> usize {
        1 << (self.k * (self.k - 1))
    }

    fn bit(&self, i: usize, j: usize) -> usize {
        i * (self.k - 1) + if j < i { j } else { j - 1 }
    }

    /// Canonical index: off-diagonal entries as bits, row-major.
    pub fn encode(&self, s: &DetailedState) -> usize {
        let mut code = 0;
        for i in 0..self.k {
            for j in (0..self.k).filter(|&j| j != i) {
                if s.get(i, j) > 0 {
                    code |= 1 << self.bit(i, j);
                }
            }
        }
        code
    }

    pub fn decode(&self, code: usize) -> DetailedState {
        let k = self.k;
        let rows: Vec<Vec<u8>> = (0..k)
            .map(|i| {
                (0..k)
                    .map(|j| u8::from(j != i && code >> self.bit(i, j) & 1 == 1))
                    .collect()
            })
            .collect();
        DetailedState::from_rows(StorageMode::Binary, &rows).expect("valid by construction")
    }

    pub fn states(&self) -> impl Iterator<Item = DetailedState> + '_ {
        (0..self.n_states()).map(|c| self.decode(c))
    }

    /// Number of detailed states mapping to each aggregated state.
    pub fn fiber_sizes(&self, space: &StateSpace) -> Result<BTreeMap<usize, usize>> {
        let mut out = BTreeMap::new();
        for s in self.states() {
            *out.entry(space.locate(&s)?).or_insert(0) += 1;
        }
        Ok(out)
    }

    fn reception_prob(&self, ok: u32) -> f64 {
        (0..self.k)
            .map(|u| if ok >> u & 1 == 1 { 1.0 - self.loss[u] } else { self.loss[u] })
            .product()
    }

    /// Concrete combinations an action may realize, each equally likely.
    fn realizations(&self, kind: SchemeKind, s: &DetailedState, action: AbstractAction) -> Vec<UserSet> {
        match (action, kind) {
            (AbstractAction::EmptyLine, SchemeKind::OneD) => {
                let mut out = Vec::new();
                let cliques = s.maximum_cliques();
                // uniform clique, then uniform user outside it
                let weight_lcm: usize = (1..=self.k).product();
                for q in cliques {
                    let others = UserSet::all(self.k).difference(q);
                    if others.is_empty() {
                        continue;
                    }
                    for u in others.iter() {
                        for _ in 0..weight_lcm / others.len() {
                            out.push(UserSet::singleton(u));
                        }
                    }
                }
                out
            }
            (AbstractAction::EmptyLine, _) => s.empty_rows().iter().map(UserSet::singleton).collect(),
            (AbstractAction::CliqueWithOldest, SchemeKind::NoTte | SchemeKind::OneD) => {
                if kind == SchemeKind::NoTte && s.empty_lines() == self.k {
                    Vec::new()
                } else {
                    s.maximum_cliques()
                }
            }
            _ => Vec::new(),
        }
    }

    /// Exact successor distribution of `s` under a restricted action, merged by successor.
    pub fn exact_transition(&self, space: &StateSpace, s: &DetailedState, action: AbstractAction) -> Result<Vec<Successor>> {
        let kind = space.scheme.kind;
        if !matches!(kind, SchemeKind::NoTte | SchemeKind::OneD) || s.mode() != StorageMode::Binary {
            return Err(Error::ModeMismatch);
        }
        let options = self.realizations(kind, s, action);
        if options.is_empty() {
            return Err(Error::InfeasibleAction {
                state: space.scheme.aggregate(s)?,
                action: action.to_string(),
            });
        }
        let w = 1.0 / options.len() as f64;
        let mut merged: HashMap<usize, (f64, f64)> = HashMap::new();
        let mut distinct: HashMap<UserSet, usize> = HashMap::new();
        for q in options {
            *distinct.entry(q).or_insert(0) += 1;
        }
        for (q, mult) in distinct {
            for ok in 0u32..(1 << self.k) {
                let p = self.reception_prob(ok) * w * mult as f64;
                if p == 0.0 {
                    continue;
                }
                let rx = Reception::new(self.k, UserSet(ok))?;
                let out = s.advance(q, &rx, self.rule)?;
                let e = merged.entry(self.encode(&out.next_state)).or_insert((0.0, 0.0));
                e.0 += p;
                e.1 += p * out.reward as f64;
            }
        }
        let mut v: Vec<Successor> = merged.into_iter().map(|(c, (p, r))| (c, p, r)).collect();
        v.sort_by_key(|x| x.0);
        Ok(v)
    }

    /// All detailed transitions for every feasible action of `space`'s scheme.
    pub fn ground_model(&self, space: &StateSpace) -> Result<GroundModel> {
        let n_actions = space.n_actions();
        let rows = (0..self.n_states())
            .into_par_iter()
            .map(|code| {
                let s = self.decode(code);
                let agg = space.locate(&s)?;
                let mut per_action = vec![None; n_actions];
                for a in space.feasible(agg) {
                    per_action[a.slot()] = Some(self.exact_transition(space, &s, a)?);
                }
                Ok((agg, per_action))
            })
            .collect::<Result<Vec<_>>>()?;
        let (agg_of, trans) = rows.into_iter().unzip();
        Ok(GroundModel {
            space: space.clone(),
            agg_of,
            trans,
            start: 0,
        })
    }
}

/// Exact detailed transitions of every feasible restricted action.
#[derive(Clone, Debug)]
pub struct GroundModel {
    pub space: StateSpace,
    /// Aggregated index of every detailed state.
    pub agg_of: Vec<usize>,
    trans: Vec<Vec<Option<Vec<Successor>>>>,
    /// Code of the natural start state (the empty matrix).
    pub start: usize,
}

impl GroundModel {
    pub fn n_states(&self) -> usize {
        self.agg_of.len()
    }

    pub fn transitions(&self, code: usize, a: AbstractAction) -> Option<&[Successor]> {
        self.trans[code].get(a.slot())?.as_deref()
    }

    /// The detailed Markov chain induced by a policy over aggregated states.
    pub fn chain(&self, policy: &Policy) -> Result<DetailedChain> {
        if policy.scheme != self.space.scheme {
            return Err(Error::SchemeMismatch);
        }
        let mut rows = Vec::with_capacity(self.n_states());
        let mut reward = Vec::with_capacity(self.n_states());
        for code in 0..self.n_states() {
            let a = policy.action(self.agg_of[code]);
            let t = self.transitions(code, a).ok_or_else(|| Error::InfeasibleAction {
                state: self.space.state(self.agg_of[code]),
                action: a.to_string(),
            })?;
            reward.push(t.iter().map(|x| x.2).sum());
            rows.push(t.to_vec());
        }
        Ok(DetailedChain { rows, reward })
    }

    fn fibers(&self) -> Vec<Vec<usize>> {
        let mut f = vec![Vec::new(); self.space.len()];
        for (code, &a) in self.agg_of.iter().enumerate() {
            f[a].push(code);
        }
        f
    }

    /// Stationary conditional weights `p(s | fiber)` of a chain started from
    /// the empty matrix. Fibers without stationary mass get uniform weights and
    /// are flagged.
    pub fn conditional_weights(&self, chain: &DetailedChain) -> Result<(Vec<f64>, Vec<f64>, Vec<bool>)> {
        let mu = chain.stationary_from(self.start)?;
        let fibers = self.fibers();
        let mut w = vec![0.0; self.n_states()];
        let mut mass = vec![0.0; self.space.len()];
        let mut uniform = vec![false; self.space.len()];
        for (a, members) in fibers.iter().enumerate() {
            let m: f64 = members.iter().map(|&c| mu[c]).sum();
            mass[a] = m;
            if m > ZERO_MASS {
                for &c in members {
                    w[c] = mu[c] / m;
                }
            } else {
                uniform[a] = true;
                for &c in members {
                    w[c] = 1.0 / members.len() as f64;
                }
            }
        }
        Ok((w, mass, uniform))
    }

    /// Exact induced model for `policy`.
    pub fn induced_model(&self, policy: &Policy) -> Result<InducedModelExact> {
        let chain = self.chain(policy)?;
        let (weights, stationary, zero_mass) = self.conditional_weights(&chain)?;
        let n = self.space.len();
        let na = self.space.n_actions();
        let mut p = vec![0.0; n * na * n];
        let mut rmass = vec![0.0; n * na * n];
        for code in 0..self.n_states() {
            let from = self.agg_of[code];
            let w = weights[code];
            if w == 0.0 {
                continue;
            }
            for a in self.space.feasible(from) {
                let t = self.transitions(code, a).expect("feasible");
                for &(next, prob, rm) in t {
                    let cell = (from * na + a.slot()) * n + self.agg_of[next];
                    p[cell] += w * prob;
                    rmass[cell] += w * rm;
                }
            }
        }
        let r = p
            .iter()
            .zip(&rmass)
            .map(|(&p, &m)| if p > 0.0 { m / p } else { 0.0 })
            .collect();
        Ok(InducedModelExact {
            space: self.space.clone(),
            p,
            r,
            stationary,
            zero_mass,
            weights,
            chain,
        })
    }

    /// Gaps between the induced-model value and the weighted detailed value.
    pub fn verify_prop1(&self, policy: &Policy, gamma: f64) -> Result<Prop1Report> {
        let induced = self.induced_model(policy)?;
        let j = induced.chain.discounted(gamma);
        let v_hat = induced.evaluate_discounted(policy, gamma);
        let n = self.space.len();
        let mut v_bar = vec![0.0; n];
        for (code, &a) in self.agg_of.iter().enumerate() {
            v_bar[a] += induced.weights[code] * j[code];
        }
        let per_state: Vec<Prop1Row> = (0..n)
            .map(|i| Prop1Row {
                state: self.space.state(i),
                v_hat: v_hat[i],
                v_bar: v_bar[i],
                gap: (v_hat[i] - v_bar[i]).abs(),
                uniform_weights: induced.zero_mass[i],
            })
            .collect();
        let max_gap = per_state.iter().map(|r| r.gap).fold(0.0, f64::max);
        let weighted_gap = (0..n)
            .map(|i| induced.stationary[i] * (v_hat[i] - v_bar[i]))
            .sum::<f64>()
            .abs();
        Ok(Prop1Report {
            policy: policy.actions().iter().map(|a| a.label()).collect(),
            gamma,
            max_gap,
            weighted_gap,
            lumpable: self.is_lumpable(&induced.chain),
            per_state,
        })
    }

    /// True when every detailed state of a fiber has the same aggregated
    /// successor law and the same expected reward under the chain.
    pub fn is_lumpable(&self, chain: &DetailedChain) -> bool {
        let n = self.space.len();
        let mut reference: Vec<Option<(Vec<f64>, f64)>> = vec![None; n];
        for code in 0..self.n_states() {
            let mut law = vec![0.0; n];
            for &(next, p, _) in &chain.rows[code] {
                law[self.agg_of[next]] += p;
            }
            let r = chain.reward[code];
            let a = self.agg_of[code];
            match &reference[a] {
                None => reference[a] = Some((law, r)),
                Some((l0, r0)) => {
                    if (r - r0).abs() > 1e-12 || l0.iter().zip(&law).any(|(x, y)| (x - y).abs() > 1e-12) {
                        return false;
                    }
                }
            }
        }
        true
    }

    /// Long-run throughput of `policy` from the empty matrix.
    pub fn average_reward(&self, policy: &Policy) -> Result<f64> {
        let chain = self.chain(policy)?;
        let mu = chain.stationary_from(self.start)?;
        Ok(mu.iter().zip(&chain.reward).map(|(m, r)| m * r).sum())
    }

    /// Best long-run throughput over every deterministic policy, with all
    /// policies attaining it (within `tol`).
    pub fn exhaustive_average(&self, tol: f64) -> Result<(f64, Vec<Policy>)> {
        let scored = all_policies(&self.space)
            .into_par_iter()
            .map(|p| Ok((self.average_reward(&p)?, p)))
            .collect::<Result<Vec<_>>>()?;
        let best = scored.iter().map(|x| x.0).fold(f64::MIN, f64::max);
        let optimal = scored.into_iter().filter(|x| x.0 >= best - tol).map(|x| x.1).collect();
        Ok((best, optimal))
    }

    /// Aggregated states holding a detailed state of a closed class reachable from the start.
    pub fn recurrent_aggregates(&self, policy: &Policy) -> Result<HashSet<usize>> {
        let chain = self.chain(policy)?;
        Ok(chain
            .closed_classes_from(self.start)
            .into_iter()
            .flatten()
            .map(|c| self.agg_of[c])
            .collect())
    }

    /// Policy iteration on the induced construction: build the induced model of
    /// the current policy, solve it, repeat until the policy is a fixed point.
    pub fn exact_optimal(&self, criterion: Criterion, initial: Option<Policy>) -> Result<OptimalSolution> {
        let mut policy = match initial {
            Some(p) => p,
            None => Policy::semi_greedy(&self.space)?,
        };
        let mut seen: Vec<Policy> = vec![policy.clone()];
        for iteration in 1..=MAX_POLICY_ITERATIONS {
            let induced = self.induced_model(&policy)?;
            let (values, next, gain, solved) = match criterion {
                Criterion::Discounted(g) => {
                    let (v, p) = induced.solve_discounted(g, &policy);
                    (v, p, None, true)
                }
                Criterion::AverageCost => {
                    let sol = induced.solve_average(&policy);
                    (sol.bias, sol.policy, Some(sol.gain), sol.converged)
                }
            };
            if next == policy {
                return Ok(OptimalSolution {
                    values: ValueFunction { criterion, values },
                    policy,
                    gain,
                    iterations: iteration,
                    converged: solved,
                });
            }
            if seen.contains(&next) {
                return Ok(OptimalSolution {
                    values: ValueFunction { criterion, values },
                    policy: next,
                    gain,
                    iterations: iteration,
                    converged: false,
                });
            }
            seen.push(next.clone());
            policy = next;
        }
        let induced = self.induced_model(&policy)?;
        let values = match criterion {
            Criterion::Discounted(g) => induced.evaluate_discounted(&policy, g),
            Criterion::AverageCost => induced.solve_average(&policy).bias,
        };
        Ok(OptimalSolution {
            values: ValueFunction { criterion, values },
            policy,
            gain: None,
            iterations: MAX_POLICY_ITERATIONS,
            converged: false,
        })
    }
}

const ZERO_MASS: f64 = 1e-13;
const MAX_POLICY_ITERATIONS: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimalSolution {
    pub values: ValueFunction,
    pub policy: Policy,
    /// Optimal long-run throughput under the average criterion.
    pub gain: Option<f64>,
    pub iterations: usize,
    /// False when policy iteration cycled or an inner solve did not settle.
    pub converged: bool,
}

/// Markov chain over detailed states under a fixed policy.
#[derive(Clone, Debug)]
pub struct DetailedChain {
    pub rows: Vec<Vec<Successor>>,
    /// Expected one-step reward of each state.
    pub reward: Vec<f64>,
}

impl DetailedChain {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Long-run state distribution of the chain started at `start`, by power
    /// iteration on the lazy chain `(I + P) / 2` (which removes periodicity).
    pub fn stationary_from(&self, start: usize) -> Result<Vec<f64>> {
        let n = self.len();
        let mut x = vec![0.0; n];
        x[start] = 1.0;
        let mut next = vec![0.0; n];
        for _ in 0..2_000_000 {
            next.iter_mut().zip(&x).for_each(|(y, v)| *y = 0.5 * v);
            for (s, row) in self.rows.iter().enumerate() {
                let m = 0.5 * x[s];
                if m == 0.0 {
                    continue;
                }
                for &(t, p, _) in row {
                    next[t] += m * p;
                }
            }
            let change: f64 = next.iter().zip(&x).map(|(a, b)| (a - b).abs()).sum();
            std::mem::swap(&mut x, &mut next);
            if change < 1e-15 {
                return Ok(x);
            }
        }
        Err(Error::DegeneratePolicy)
    }

    /// Discounted values `J = r + gamma P J`.
    pub fn discounted(&self, gamma: f64) -> Vec<f64> {
        let mut j = vec![0.0; self.len()];
        loop {
            let mut change: f64 = 0.0;
            // Gauss-Seidel sweep
            for s in 0..self.len() {
                let v = self.reward[s] + gamma * self.rows[s].iter().map(|&(t, p, _)| p * j[t]).sum::<f64>();
                change = change.max((v - j[s]).abs());
                j[s] = v;
            }
            if change < 1e-13 * (1.0 - gamma).max(1e-6) || gamma == 0.0 {
                return j;
            }
        }
    }

    pub fn reachable_from(&self, start: usize) -> Vec<bool> {
        let mut seen = vec![false; self.len()];
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(s) = stack.pop() {
            for &(t, p, _) in &self.rows[s] {
                if p > 0.0 && !seen[t] {
                    seen[t] = true;
                    stack.push(t);
                }
            }
        }
        seen
    }

    /// Strongly connected components (iterative Tarjan).
    pub fn components(&self) -> Vec<Vec<usize>> {
        let n = self.len();
        let mut index = vec![usize::MAX; n];
        let mut low = vec![0; n];
        let mut on_stack = vec![false; n];
        let mut stack = Vec::new();
        let mut out = Vec::new();
        let mut counter = 0;
        for root in 0..n {
            if index[root] != usize::MAX {
                continue;
            }
            let mut call: Vec<(usize, usize)> = vec![(root, 0)];
            index[root] = counter;
            low[root] = counter;
            counter += 1;
            stack.push(root);
            on_stack[root] = true;
            while let Some(&mut (v, ref mut edge)) = call.last_mut() {
                let row = &self.rows[v];
                if *edge < row.len() {
                    let (w, p, _) = row[*edge];
                    *edge += 1;
                    if p <= 0.0 {
                        continue;
                    }
                    if index[w] == usize::MAX {
                        index[w] = counter;
                        low[w] = counter;
                        counter += 1;
                        stack.push(w);
                        on_stack[w] = true;
                        call.push((w, 0));
                    } else if on_stack[w] {
                        low[v] = low[v].min(index[w]);
                    }
                } else {
                    call.pop();
                    if let Some(&(parent, _)) = call.last() {
                        low[parent] = low[parent].min(low[v]);
                    }
                    if low[v] == index[v] {
                        let mut comp = Vec::new();
                        loop {
                            let w = stack.pop().unwrap();
                            on_stack[w] = false;
                            comp.push(w);
                            if w == v {
                                break;
                            }
                        }
                        out.push(comp);
                    }
                }
            }
        }
        out
    }

    /// Closed communicating classes (recurrent classes) of the whole chain.
    pub fn closed_classes(&self) -> Vec<Vec<usize>> {
        let comps = self.components();
        let mut comp_of = vec![0; self.len()];
        for (i, c) in comps.iter().enumerate() {
            for &s in c {
                comp_of[s] = i;
            }
        }
        comps
            .iter()
            .enumerate()
            .filter(|(i, c)| {
                c.iter()
                    .all(|&s| self.rows[s].iter().all(|&(t, p, _)| p <= 0.0 || comp_of[t] == *i))
            })
            .map(|(_, c)| c.clone())
            .collect()
    }

    pub fn closed_classes_from(&self, start: usize) -> Vec<Vec<usize>> {
        let reach = self.reachable_from(start);
        self.closed_classes().into_iter().filter(|c| reach[c[0]]).collect()
    }
}

/// Exact induced aggregated model for one policy.
#[derive(Clone, Debug)]
pub struct InducedModelExact {
    pub space: StateSpace,
    /// `p[(s * A + a) * S + s']`.
    pub p: Vec<f64>,
    /// Constructed reward of each aggregated transition (0 where `p` is 0).
    pub r: Vec<f64>,
    /// Stationary mass of each aggregated state.
    pub stationary: Vec<f64>,
    /// Aggregated states whose fiber had no stationary mass (uniform weights used).
    pub zero_mass: Vec<bool>,
    /// Conditional weight of every detailed state within its fiber.
    pub weights: Vec<f64>,
    pub chain: DetailedChain,
}

impl InducedModelExact {
    fn idx(&self, s: usize, a: AbstractAction, next: usize) -> usize {
        let n = self.space.len();
        (s * self.space.n_actions() + a.slot()) * n + next
    }

    pub fn prob(&self, s: usize, a: AbstractAction, next: usize) -> f64 {
        self.p[self.idx(s, a, next)]
    }

    pub fn reward(&self, s: usize, a: AbstractAction, next: usize) -> f64 {
        self.r[self.idx(s, a, next)]
    }

    fn q(&self, s: usize, a: AbstractAction, gamma: f64, v: &[f64]) -> f64 {
        (0..self.space.len())
            .map(|t| {
                let p = self.prob(s, a, t);
                if p > 0.0 {
                    p * (self.reward(s, a, t) + gamma * v[t])
                } else {
                    0.0
                }
            })
            .sum()
    }

    pub fn evaluate_discounted(&self, policy: &Policy, gamma: f64) -> Vec<f64> {
        let n = self.space.len();
        let mut v = vec![0.0; n];
        loop {
            let next: Vec<f64> = (0..n).map(|s| self.q(s, policy.action(s), gamma, &v)).collect();
            let change = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            v = next;
            if change < 1e-13 || gamma == 0.0 {
                return v;
            }
        }
    }

    /// Optimal values and a greedy policy; ties keep `incumbent`'s action.
    pub fn solve_discounted(&self, gamma: f64, incumbent: &Policy) -> (Vec<f64>, Policy) {
        let n = self.space.len();
        let mut v = vec![0.0; n];
        loop {
            let next: Vec<f64> = (0..n)
                .map(|s| {
                    self.space
                        .feasible(s)
                        .into_iter()
                        .map(|a| self.q(s, a, gamma, &v))
                        .fold(f64::MIN, f64::max)
                })
                .collect();
            let change = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            v = next;
            if change < 1e-12 || gamma == 0.0 {
                break;
            }
        }
        let policy = self.greedy(incumbent, |s, a| self.q(s, a, gamma, &v));
        (v, policy)
    }

    fn greedy(&self, incumbent: &Policy, q: impl Fn(usize, AbstractAction) -> f64) -> Policy {
        let mut policy = incumbent.clone();
        for s in 0..self.space.len() {
            let keep = incumbent.action(s);
            let mut best = (keep, q(s, keep));
            for a in self.space.feasible(s) {
                let value = q(s, a);
                if value > best.1 + 1e-10 * best.1.abs().max(1.0) {
                    best = (a, value);
                }
            }
            policy.set(&self.space, s, best.0).expect("feasible");
        }
        policy
    }

    /// Relative value iteration on the lazy (aperiodic) version of the model.
    pub fn solve_average(&self, incumbent: &Policy) -> AverageSolution {
        let n = self.space.len();
        let mut h = vec![0.0; n];
        let reference = 0;
        let mut converged = false;
        let mut gain = 0.0;
        // with P' = (P + I) / 2 and r' = r / 2 the gain halves and h is unchanged
        let backup = |s: usize, a: AbstractAction, h: &[f64]| 0.5 * self.q(s, a, 1.0, h) + 0.5 * h[s];
        for _ in 0..1_000_000 {
            let t: Vec<f64> = (0..n)
                .map(|s| {
                    self.space
                        .feasible(s)
                        .into_iter()
                        .map(|a| backup(s, a, &h))
                        .fold(f64::MIN, f64::max)
                })
                .collect();
            let g = t[reference];
            let next: Vec<f64> = t.iter().map(|x| x - g).collect();
            let change = next.iter().zip(&h).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            h = next;
            gain = 2.0 * g;
            if change < 1e-12 {
                converged = true;
                break;
            }
        }
        let policy = self.greedy(incumbent, |s, a| self.q(s, a, 1.0, &h));
        AverageSolution {
            gain,
            bias: h,
            policy,
            converged,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AverageSolution {
    pub gain: f64,
    pub bias: Vec<f64>,
    pub policy: Policy,
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prop1Row {
    pub state: AggregatedState,
    pub v_hat: f64,
    pub v_bar: f64,
    pub gap: f64,
    pub uniform_weights: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prop1Report {
    /// Action labels of the evaluated policy, by state index.
    pub policy: Vec<u8>,
    pub gamma: f64,
    pub max_gap: f64,
    /// Gap between stationary-weighted averages of the two value vectors.
    pub weighted_gap: f64,
    pub lumpable: bool,
    pub per_state: Vec<Prop1Row>,
}

/// Every deterministic policy over the space (product of feasible sets).
pub fn all_policies(space: &StateSpace) -> Vec<Policy> {
    let mut out: Vec<Vec<AbstractAction>> = vec![Vec::new()];
    for i in 0..space.len() {
        let feasible = space.feasible(i);
        out = out
            .into_iter()
            .flat_map(|prefix| {
                feasible.iter().map(move |&a| {
                    let mut p = prefix.clone();
                    p.push(a);
                    p
                })
            })
            .collect();
    }
    out.into_iter()
        .map(|a| Policy::new(space, a).expect("feasible by construction"))
        .collect()
}

/// Whether the policy switches action at most once along `L` (OneD scheme).
pub fn is_threshold_in_l(space: &StateSpace, policy: &Policy) -> bool {
    let mut by_l: Vec<(usize, AbstractAction)> = space
        .states()
        .iter()
        .enumerate()
        .filter_map(|(i, s)| match *s {
            AggregatedState::OneD { l } => Some((l, policy.action(i))),
            _ => None,
        })
        .collect();
    by_l.sort_by_key(|x| x.0);
    let switches = by_l.windows(2).filter(|w| w[0].1 != w[1].1).count();
    switches <= 1 && by_l.last().is_none_or(|x| x.1 == AbstractAction::CliqueWithOldest)
}

/// Smallest `L >= 2` at which a OneD policy sends a coded clique.
pub fn minimal_clique_action_size(space: &StateSpace, policy: &Policy) -> Option<usize> {
    space
        .states()
        .iter()
        .enumerate()
        .filter_map(|(i, s)| match *s {
            AggregatedState::OneD { l } if l >= 2 && policy.action(i) == AbstractAction::CliqueWithOldest => Some(l),
            _ => None,
        })
        .min()
}

/// Monotonicity and slope diagnostics of a value function.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SlopeBoundReport {
    /// Largest `V(next) - V(prev)` along the clique component.
    pub max_forward_difference: f64,
    /// Smallest `V(k) - V(k - i) + i` over valid `(k, i)` along the clique component.
    pub min_lower_slope: f64,
    /// `(description, amount)` of each monotonicity violation beyond the slack.
    pub violations: Vec<(String, f64)>,
    pub monotone: bool,
}

/// Checks value shape: nondecreasing in the clique component, nonincreasing
/// in `E` (for schemes that have it), both up to `slack`.
pub fn verify_value_shape(space: &StateSpace, values: &[f64], slack: f64) -> SlopeBoundReport {
    let mut report = SlopeBoundReport {
        max_forward_difference: 0.0,
        min_lower_slope: f64::INFINITY,
        ..SlopeBoundReport::default()
    };
    let states = space.states();
    let find = |f: Option<u8>, size: Option<usize>, e: Option<usize>| {
        states.iter().position(|s| s.components() == (f, size, e))
    };
    for (i, s) in states.iter().enumerate() {
        let (f, size, e) = s.components();
        let Some(size) = size else { continue };
        if let Some(j) = find(f, Some(size + 1), e) {
            let d = values[j] - values[i];
            report.max_forward_difference = report.max_forward_difference.max(d);
            if d < -slack {
                report.violations.push((format!("{} -> {}", s, states[j]), d));
            }
        }
        for step in 1..size {
            if let Some(j) = find(f, Some(size - step), e) {
                report.min_lower_slope = report.min_lower_slope.min(values[i] - values[j] + step as f64);
            }
        }
        if let Some(e) = e {
            if let Some(j) = find(f, Some(size), Some(e + 1)) {
                let d = values[i] - values[j];
                if d < -slack {
                    report.violations.push((format!("{} -> {}", s, states[j]), d));
                }
            }
        }
    }
    if !report.min_lower_slope.is_finite() {
        report.min_lower_slope = 0.0;
    }
    report.monotone = report.violations.is_empty();
    report
}

/// Distribution of the clique size left after sending `clique` from `s`,
/// where the size counts only non-empty rows (0 for the empty matrix).
pub fn clique_outcome_distribution(oracle: &ExactOracle, s: &DetailedState, clique: UserSet) -> Result<Vec<f64>> {
    let k = oracle.k();
    let mut dist = vec![0.0; k + 1];
    for ok in 0u32..(1 << k) {
        let p = oracle.reception_prob(ok);
        let rx = Reception::new(k, UserSet(ok))?;
        let next = s.advance(clique, &rx, oracle.rule)?.next_state;
        dist[occupied_clique_size(&next)] += p;
    }
    Ok(dist)
}

/// Largest clique size, counting 0 for a matrix with no stored packet.
pub fn occupied_clique_size(s: &DetailedState) -> usize {
    if s.is_empty_matrix() {
        0
    } else {
        s.max_clique_size()
    }
}

/// `C(k, i) p^i (1 - p)^(k - i)` for `i = 0..=k`.
pub fn binomial_law(k: usize, p: f64) -> Vec<f64> {
    (0..=k)
        .map(|i| {
            let c = (0..i).fold(1.0, |acc, j| acc * (k - j) as f64 / (j + 1) as f64);
            c * p.powi(i as i32) * (1.0 - p).powi((k - i) as i32)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::AggregationScheme;

    fn four_user_s5() -> DetailedState {
        let rows: Vec<Vec<u8>> = [[0, 1, 1, 0], [1, 0, 1, 1], [1, 1, 0, 0], [0, 0, 0, 0]]
            .iter()
            .map(|r| r.to_vec())
            .collect();
        DetailedState::from_rows(StorageMode::Binary, &rows).unwrap()
    }

    #[test]
    fn enumeration_sizes_and_guard() {
        assert_eq!(ExactOracle::uniform(3, 0.2).unwrap().n_states(), 64);
        assert_eq!(ExactOracle::uniform(4, 0.2).unwrap().n_states(), 4096);
        assert!(matches!(ExactOracle::uniform(5, 0.2), Err(Error::TooLarge(_))));
        assert!(ExactOracle::new(5, &LossModel::Uniform(0.2), StorageRule::Persist, true).is_ok());
        let o = ExactOracle::uniform(4, 0.2).unwrap();
        for code in [0, 1, 77, 4095] {
            assert_eq!(o.encode(&o.decode(code)), code);
        }
    }

    #[test]
    fn four_user_fiber_has_32_states() {
        let o = ExactOracle::uniform(4, 0.2).unwrap();
        let space = AggregationScheme::no_tte(4).unwrap().space();
        let sizes = o.fiber_sizes(&space).unwrap();
        let idx = space.index_of(&AggregatedState::NoTte { l: 3, e: 1 }).unwrap();
        assert_eq!(sizes[&idx], 32);
        assert_eq!(sizes.values().sum::<usize>(), 4096);
    }

    #[test]
    fn four_user_transition_probability() {
        let q = 0.3;
        let o = ExactOracle::uniform(4, q).unwrap();
        let space = AggregationScheme::no_tte(4).unwrap().space();
        let s5 = four_user_s5();
        let t = o.exact_transition(&space, &s5, AbstractAction::CliqueWithOldest).unwrap();
        let sa: Vec<Vec<u8>> = [[0, 0, 0, 0], [1, 0, 1, 1], [0, 0, 0, 0], [0, 0, 0, 0]]
            .iter()
            .map(|r| r.to_vec())
            .collect();
        let sa = o.encode(&DetailedState::from_rows(StorageMode::Binary, &sa).unwrap());
        let (_, p, rm) = t.iter().copied().find(|x| x.0 == sa).unwrap();
        assert!((p - q * (1.0 - q) * (1.0 - q)).abs() < 1e-15);
        assert!((rm / p - 2.0).abs() < 1e-12);
        assert!((t.iter().map(|x| x.1).sum::<f64>() - 1.0).abs() < 1e-14);
        // every successor aggregate is one of the four listed
        let allowed = [(3, 1), (2, 2), (1, 3), (1, 4)].map(|(l, e)| AggregatedState::NoTte { l, e });
        for (c, _, _) in t {
            assert!(allowed.contains(&space.scheme.aggregate(&o.decode(c)).unwrap()));
        }
    }

    #[test]
    fn lossless_uncoded_is_deterministic() {
        let o = ExactOracle::uniform(3, 0.0).unwrap();
        let space = AggregationScheme::no_tte(3).unwrap().space();
        let s = o.decode(0b000011);
        let t = o.exact_transition(&space, &s, AbstractAction::EmptyLine).unwrap();
        // either empty line is sent and always decoded; the matrix is unchanged
        assert_eq!(t, vec![(0b000011, 1.0, 1.0)]);
    }

    #[test]
    fn binomial_law_from_a_full_clique() {
        let o = ExactOracle::uniform(3, 0.25).unwrap();
        let full = o.decode(0b111111);
        let dist = clique_outcome_distribution(&o, &full, UserSet::all(3)).unwrap();
        let law = binomial_law(3, 0.25);
        assert!((law[0] - 0.421875).abs() < 1e-15);
        for (a, b) in dist.iter().zip(&law) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn disjoint_clique_shifts_mass_upward() {
        // clique {0,1,2} plus an extra mutual pair elsewhere dominates the binomial law
        let o = ExactOracle::uniform(5, 0.3);
        assert!(o.is_err());
        let o = ExactOracle::new(5, &LossModel::Uniform(0.3), StorageRule::Persist, true).unwrap();
        let mut rows = vec![vec![0u8; 5]; 5];
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    rows[i][j] = 1;
                }
            }
        }
        rows[3][4] = 1;
        rows[4][3] = 1;
        let s = DetailedState::from_rows(StorageMode::Binary, &rows).unwrap();
        let dist = clique_outcome_distribution(&o, &s, UserSet::from_users([0, 1, 2])).unwrap();
        let law = binomial_law(3, 0.3);
        let tail = |d: &[f64], i: usize| d[i..].iter().sum::<f64>();
        for i in 0..=3 {
            assert!(tail(&dist, i) >= tail(&law, i) - 1e-12);
        }
    }

    #[test]
    fn stationary_and_scc_basics() {
        // 0 -> 1 -> 2 -> 1 (cycle), 3 absorbing and unreachable from 0
        let chain = DetailedChain {
            rows: vec![
                vec![(1, 1.0, 0.0)],
                vec![(2, 1.0, 1.0)],
                vec![(1, 1.0, 0.0)],
                vec![(3, 1.0, 0.0)],
            ],
            reward: vec![0.0, 1.0, 0.0, 0.0],
        };
        let mu = chain.stationary_from(0).unwrap();
        assert!((mu[1] - 0.5).abs() < 1e-9 && (mu[2] - 0.5).abs() < 1e-9);
        let mut closed = chain.closed_classes();
        closed.iter_mut().for_each(|c| c.sort());
        closed.sort();
        assert_eq!(closed, vec![vec![1, 2], vec![3]]);
        assert_eq!(chain.closed_classes_from(0), vec![vec![2, 1]]);
        let j = chain.discounted(0.5);
        assert!((j[1] - 1.0 / (1.0 - 0.25)).abs() < 1e-12);
    }

    #[test]
    fn zero_discount_gap_vanishes() {
        let o = ExactOracle::uniform(3, 0.3).unwrap();
        let space = AggregationScheme::no_tte(3).unwrap().space();
        let g = o.ground_model(&space).unwrap();
        for p in all_policies(&space) {
            let r = g.verify_prop1(&p, 0.0).unwrap();
            assert!(r.max_gap < 1e-12, "{r:?}");
        }
    }

    #[test]
    fn induced_rows_sum_to_one() {
        let o = ExactOracle::uniform(3, 0.25).unwrap();
        let space = AggregationScheme::no_tte(3).unwrap().space();
        let g = o.ground_model(&space).unwrap();
        let m = g.induced_model(&Policy::semi_greedy(&space).unwrap()).unwrap();
        for s in 0..space.len() {
            for a in space.feasible(s) {
                let total: f64 = (0..space.len()).map(|t| m.prob(s, a, t)).sum();
                assert!((total - 1.0).abs() < 1e-12);
                for t in 0..space.len() {
                    assert!((0.0..=3.0).contains(&m.reward(s, a, t)));
                }
            }
        }
        assert!((m.stationary.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn near_certain_loss_drives_values_to_zero() {
        let o = ExactOracle::uniform(3, 0.9999).unwrap();
        let space = AggregationScheme::one_d(3).unwrap().space();
        let g = o.ground_model(&space).unwrap();
        let sol = g.exact_optimal(Criterion::Discounted(0.9), None).unwrap();
        assert!(sol.values.values.iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn shape_report_on_constant_values() {
        let space = AggregationScheme::one_d(4).unwrap().space();
        let r = verify_value_shape(&space, &[2.0; 4], 0.0);
        assert!(r.monotone);
        assert_eq!(r.max_forward_difference, 0.0);
    }
}
