//! Slot-by-slot broadcast channel with independent per-user erasures.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{AbstractAction, AggregationScheme, SchemeKind, StateSpace};
use crate::error::{Error, Result};
use crate::policy::Policy;
use crate::state::{DetailedState, Reception, SlotOutcome, StorageMode, StorageRule, TieBreak, UserSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LossModel {
    Uniform(f64),
    PerUser(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub k: usize,
    pub loss: LossModel,
    #[serde(default)]
    pub tte: Option<u8>,
    pub gamma: f64,
    pub seed: u64,
    /// Half-width of a uniform per-slot perturbation of every loss probability.
    #[serde(default)]
    pub jitter: f64,
    #[serde(default)]
    pub storage_rule: StorageRule,
}

impl ChannelConfig {
    pub fn uniform(k: usize, p: f64, tte: Option<u8>, gamma: f64, seed: u64) -> Self {
        ChannelConfig {
            k,
            loss: LossModel::Uniform(p),
            tte,
            gamma,
            seed,
            jitter: 0.0,
            storage_rule: StorageRule::Persist,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field, reason: String| Err(Error::InvalidConfig { field, reason });
        if !(2..=crate::state::MAX_USERS).contains(&self.k) {
            return bad("users", format!("{} is outside 2..={}", self.k, crate::state::MAX_USERS));
        }
        let probs: Vec<f64> = match &self.loss {
            LossModel::Uniform(p) => vec![*p],
            LossModel::PerUser(v) => {
                if v.len() != self.k {
                    return bad("loss", format!("{} per-user values for {} users", v.len(), self.k));
                }
                v.clone()
            }
        };
        if let Some(p) = probs.iter().find(|p| !(0.0..1.0).contains(*p)) {
            return bad("loss", format!("{p} is outside [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma", format!("{} is outside [0, 1)", self.gamma));
        }
        if self.tte == Some(0) {
            return bad("tte", "must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.jitter) {
            return bad("jitter", format!("{} is outside [0, 1]", self.jitter));
        }
        Ok(())
    }

    pub fn loss_of(&self, user: usize) -> f64 {
        match &self.loss {
            LossModel::Uniform(p) => *p,
            LossModel::PerUser(v) => v[user],
        }
    }

    pub fn mean_loss(&self) -> f64 {
        (0..self.k).map(|u| self.loss_of(u)).sum::<f64>() / self.k as f64
    }

    pub fn mode(&self) -> StorageMode {
        match self.tte {
            Some(t) => StorageMode::Tte(t),
            None => StorageMode::Binary,
        }
    }

    /// A copy of this configuration with a different base seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        ChannelConfig {
            seed,
            ..self.clone()
        }
    }

    pub fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }

    pub fn sample_reception(&self, rng: &mut dyn RngCore) -> Reception {
        let mut ok = UserSet::EMPTY;
        for u in 0..self.k {
            let mut p = self.loss_of(u);
            if self.jitter > 0.0 {
                p = (p + rng.gen_range(-self.jitter..=self.jitter)).clamp(0.0, 0.999);
            }
            if rng.gen::<f64>() >= p {
                ok.insert(u);
            }
        }
        Reception::new(self.k, ok).expect("mask fits k users")
    }

    /// Sends `combo` once and advances the state by one slot.
    pub fn transmit(&self, s: &DetailedState, combo: UserSet, rng: &mut dyn RngCore) -> Result<SlotOutcome> {
        let rx = self.sample_reception(rng);
        s.advance(combo, &rx, self.storage_rule)
    }
}

/// Turns a restricted action into the concrete set of users whose packets are combined.
pub fn realize_action(
    scheme: &AggregationScheme,
    s: &DetailedState,
    action: AbstractAction,
    tie: &mut TieBreak<'_>,
) -> Result<UserSet> {
    let infeasible = || -> Result<UserSet> {
        Err(Error::InfeasibleAction {
            state: scheme.aggregate(s)?,
            action: action.to_string(),
        })
    };
    match (action, scheme.kind) {
        (AbstractAction::EmptyLine, SchemeKind::OneD) => {
            let clique = s.max_clique(tie);
            let others = UserSet::all(s.k()).difference(clique);
            if others.is_empty() {
                return infeasible();
            }
            Ok(UserSet::singleton(tie.pick_user(others)))
        }
        (AbstractAction::EmptyLine, _) => {
            let empty = s.empty_rows();
            if empty.is_empty() {
                return infeasible();
            }
            Ok(UserSet::singleton(tie.pick_user(empty)))
        }
        (AbstractAction::CliqueWithOldest, SchemeKind::NoTte | SchemeKind::OneD) => {
            if scheme.kind == SchemeKind::NoTte && s.empty_lines() == s.k() {
                return infeasible();
            }
            Ok(s.max_clique(tie))
        }
        (AbstractAction::CliqueWithOldest, _) => match s.clique_with_oldest(tie) {
            Ok((_, q)) => Ok(q),
            Err(Error::AllExpired) => infeasible(),
            Err(e) => Err(e),
        },
        (AbstractAction::GlobalMaxClique, SchemeKind::Agg2) => {
            if s.is_empty_matrix() {
                return infeasible();
            }
            Ok(s.max_clique(tie))
        }
        (AbstractAction::GlobalMaxClique, _) => infeasible(),
    }
}

/// A controller's choice for one slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Decision {
    pub combo: UserSet,
    pub action: AbstractAction,
}

pub trait Controller {
    fn decide(&mut self, s: &DetailedState, rng: &mut dyn RngCore) -> Result<Decision>;
}

/// Follows a stationary policy over aggregated states.
pub struct PolicyController<'a> {
    pub space: &'a StateSpace,
    pub policy: &'a Policy,
}

impl Controller for PolicyController<'_> {
    fn decide(&mut self, s: &DetailedState, rng: &mut dyn RngCore) -> Result<Decision> {
        let idx = self.space.locate(s)?;
        let action = self.policy.action(idx);
        let combo = realize_action(&self.space.scheme, s, action, &mut TieBreak::Uniform(rng))?;
        Ok(Decision { combo, action })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub slot: u64,
    pub state_index: usize,
    pub action: u8,
    pub next_state_index: usize,
    pub reward: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
    pub slots: u64,
    pub total_reward: u64,
    pub discounted: f64,
    pub decoded_per_user: Vec<u64>,
    /// Slots in which each user was among the intended receivers.
    pub sent_per_user: Vec<u64>,
    /// Histogram of the number of non-empty rows seen at decision time.
    pub nonempty_rows: Vec<u64>,
}

impl Trace {
    pub fn throughput(&self) -> Option<f64> {
        (self.slots > 0).then(|| self.total_reward as f64 / self.slots as f64)
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.records {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Runs `controller` for `n_slots` slots from `s0`.
///
/// Per-slot records are kept only when `record` is set; counters are always kept.
pub fn run_episode(
    controller: &mut dyn Controller,
    channel: &ChannelConfig,
    space: &StateSpace,
    s0: &DetailedState,
    n_slots: u64,
    record: bool,
    rng: &mut dyn RngCore,
) -> Result<Trace> {
    let k = channel.k;
    let mut trace = Trace {
        decoded_per_user: vec![0; k],
        sent_per_user: vec![0; k],
        nonempty_rows: vec![0; k + 1],
        ..Trace::default()
    };
    let mut s = s0.clone();
    let mut idx = if record { space.locate(&s)? } else { 0 };
    let mut weight = 1.0;
    for slot in 0..n_slots {
        let d = controller.decide(&s, rng)?;
        let out = channel.transmit(&s, d.combo, rng)?;
        for u in d.combo.iter() {
            trace.sent_per_user[u] += 1;
        }
        for u in out.decoded.iter() {
            trace.decoded_per_user[u] += 1;
        }
        trace.nonempty_rows[k - s.empty_lines()] += 1;
        trace.total_reward += out.reward as u64;
        trace.discounted += weight * out.reward as f64;
        weight *= channel.gamma;
        if record {
            let next_idx = space.locate(&out.next_state)?;
            trace.records.push(TraceRecord {
                slot,
                state_index: idx,
                action: d.action.label(),
                next_state_index: next_idx,
                reward: out.reward,
            });
            idx = next_idx;
        }
        s = out.next_state;
    }
    trace.slots = n_slots;
    Ok(trace)
}

/// Mean and standard error of per-seed throughputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub mean: f64,
    pub stderr: f64,
    pub per_seed: Vec<f64>,
    pub decoded_per_user: Vec<u64>,
    pub sent_per_user: Vec<u64>,
}

impl Throughput {
    pub fn from_traces(traces: &[Trace]) -> Option<Self> {
        let per_seed: Vec<f64> = traces.iter().filter_map(Trace::throughput).collect();
        if per_seed.is_empty() {
            return None;
        }
        let (mean, stderr) = mean_stderr(&per_seed);
        let k = traces[0].decoded_per_user.len();
        let sum = |f: fn(&Trace) -> &Vec<u64>| {
            (0..k).map(|u| traces.iter().map(|t| f(t)[u]).sum()).collect()
        };
        Some(Throughput {
            mean,
            stderr,
            per_seed,
            decoded_per_user: sum(|t| &t.decoded_per_user),
            sent_per_user: sum(|t| &t.sent_per_user),
        })
    }
}

pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Long-run throughput over independent seeds, run in parallel.
///
/// `make` builds a fresh controller per seed; seed `i` uses stream `i` of the
/// configured base seed, so results do not depend on thread scheduling.
pub fn evaluate<'c, F>(
    make: F,
    channel: &ChannelConfig,
    space: &StateSpace,
    n_slots: u64,
    n_seeds: u64,
) -> Result<Throughput>
where
    F: Fn() -> Box<dyn Controller + 'c> + Sync,
{
    channel.validate()?;
    let start = DetailedState::empty(channel.k, channel.mode())?;
    let traces = (0..n_seeds)
        .into_par_iter()
        .map(|i| {
            let mut rng = channel.rng(i);
            let mut c = make();
            run_episode(c.as_mut(), channel, space, &start, n_slots, false, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Throughput::from_traces(&traces).ok_or(Error::NoData)
}

/// Monte-Carlo estimate of the discounted value from `s0`: mean and standard error
/// over `episodes` runs truncated at `horizon` slots.
pub fn discounted_value<'c, F>(
    make: F,
    channel: &ChannelConfig,
    space: &StateSpace,
    s0: &DetailedState,
    horizon: u64,
    episodes: u64,
) -> Result<(f64, f64)>
where
    F: Fn() -> Box<dyn Controller + 'c> + Sync,
{
    channel.validate()?;
    let sums = (0..episodes)
        .into_par_iter()
        .map(|i| {
            let mut rng = channel.rng(i);
            let mut c = make();
            run_episode(c.as_mut(), channel, space, s0, horizon, false, &mut rng).map(|t| t.discounted)
        })
        .collect::<Result<Vec<_>>>()?;
    if sums.is_empty() {
        return Err(Error::NoData);
    }
    Ok(mean_stderr(&sums))
}
