//! Experiment configuration, orchestration and file emission.
//!
//! A run evaluates one or more policy sources at every point of a loss sweep.
//! Outputs are plot-ready CSV files plus a JSON report that embeds the config,
//! so any number in it can be regenerated from the recorded seed.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{AbstractAction, AggregationScheme, SchemeKind, StateSpace};
use crate::baselines::{Baseline, BaselineId};
use crate::channel::{evaluate, ChannelConfig, Controller, LossModel, PolicyController, Throughput};
use crate::error::{Error, Result};
use crate::learning::{algorithm_a, CheckpointRow, LearningSchedule, StopReason};
use crate::oracle::{self, ExactOracle};
use crate::policy::{Criterion, Policy};

/// Where the actions of an evaluated policy come from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PolicySource {
    Learn,
    Baseline(BaselineId),
    File(PathBuf),
}

impl PolicySource {
    /// `learn`, a baseline id, or a path to a policy CSV.
    pub fn parse(s: &str) -> Self {
        if s.eq_ignore_ascii_case("learn") {
            PolicySource::Learn
        } else if let Ok(id) = s.parse() {
            PolicySource::Baseline(id)
        } else {
            PolicySource::File(PathBuf::from(s))
        }
    }

    pub fn name(&self) -> String {
        match self {
            PolicySource::Learn => "learned".into(),
            PolicySource::Baseline(id) => id.name().into(),
            PolicySource::File(p) => p.file_stem().map_or("file".into(), |s| s.to_string_lossy().into_owned()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub slots: u64,
    pub seeds: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            slots: 200_000,
            seeds: 5,
        }
    }
}

fn default_policies() -> Vec<String> {
    vec!["learn".into()]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub channel: ChannelConfig,
    pub scheme: SchemeKind,
    /// Policy sources to evaluate: `learn`, baseline ids, or policy CSV paths.
    #[serde(default = "default_policies")]
    pub policies: Vec<String>,
    /// Loss sweep; empty means the channel's own loss only.
    #[serde(default)]
    pub losses: Vec<LossModel>,
    #[serde(default)]
    pub schedule: LearningSchedule,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.channel.validate()?;
        self.schedule.validate()?;
        if self.scheme.needs_tte() && self.channel.tte.is_none() {
            return Err(Error::InvalidConfig {
                field: "tte",
                reason: format!("scheme {} needs a TTE", self.scheme),
            });
        }
        if !self.scheme.needs_tte() && self.channel.tte.is_some() {
            return Err(Error::InvalidConfig {
                field: "tte",
                reason: format!("scheme {} models binary storage; drop the TTE", self.scheme),
            });
        }
        if self.policies.is_empty() {
            return Err(Error::InvalidConfig {
                field: "policies",
                reason: "at least one policy source is needed".into(),
            });
        }
        if self.eval.slots == 0 || self.eval.seeds == 0 {
            return Err(Error::InvalidConfig {
                field: "eval",
                reason: "slots and seeds must both be at least 1".into(),
            });
        }
        for loss in &self.losses {
            self.channel_at(loss).validate()?;
        }
        self.scheme()?;
        Ok(())
    }

    pub fn scheme(&self) -> Result<AggregationScheme> {
        AggregationScheme::new(self.scheme, self.channel.k, self.channel.tte)
    }

    pub fn loss_points(&self) -> Vec<LossModel> {
        if self.losses.is_empty() {
            vec![self.channel.loss.clone()]
        } else {
            self.losses.clone()
        }
    }

    pub fn channel_at(&self, loss: &LossModel) -> ChannelConfig {
        ChannelConfig {
            loss: loss.clone(),
            ..self.channel.clone()
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Equal-mean per-user loss profiles with growing spread around `mean`.
pub fn equal_mean_sweep(k: usize, mean: f64, spreads: &[f64]) -> Vec<LossModel> {
    spreads
        .iter()
        .map(|&d| {
            if d == 0.0 {
                return LossModel::Uniform(mean);
            }
            let mid = (k as f64 - 1.0) / 2.0;
            LossModel::PerUser((0..k).map(|u| (mean + d * (u as f64 - mid)).clamp(0.0, 1.0)).collect())
        })
        .collect()
}

pub fn loss_label(loss: &LossModel) -> String {
    match loss {
        LossModel::Uniform(p) => format!("{p}"),
        LossModel::PerUser(v) => v.iter().map(|p| p.to_string()).collect::<Vec<_>>().join("/"),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningSummary {
    pub stop: StopReason,
    pub converged: bool,
    pub phases: usize,
    pub total_slots: u64,
    pub values: Vec<f64>,
    pub actions: Vec<u8>,
    pub checkpoint: Vec<CheckpointRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyResult {
    pub name: String,
    pub throughput: Throughput,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointReport {
    pub loss: LossModel,
    pub learning: Option<LearningSummary>,
    pub results: Vec<PolicyResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config: ExperimentConfig,
    /// Aggregated state labels in index order.
    pub states: Vec<String>,
    pub points: Vec<PointReport>,
}

/// Reads a policy CSV (`state_index` and `action` columns) for `space`.
pub fn read_policy_csv(space: &StateSpace, path: &Path) -> Result<Policy> {
    #[derive(Deserialize)]
    struct Row {
        state_index: usize,
        action: u8,
    }
    let mut actions: Vec<Option<AbstractAction>> = vec![None; space.len()];
    for row in csv::Reader::from_path(path)?.deserialize::<Row>() {
        let row = row?;
        let slot = actions.get_mut(row.state_index).ok_or_else(|| Error::InvalidConfig {
            field: "policy",
            reason: format!("state index {} is outside the {}-state space", row.state_index, space.len()),
        })?;
        *slot = Some(AbstractAction::from_label(row.action)?);
    }
    let actions = actions
        .into_iter()
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::InvalidConfig {
            field: "policy",
            reason: format!("{} does not cover every state", path.display()),
        })?;
    Policy::new(space, actions)
}

/// Writes one policy with its values: `state_index,scheme,f,size,e,value,action`.
pub fn write_policy_csv<W: std::io::Write>(space: &StateSpace, policy: &Policy, values: Option<&[f64]>, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["state_index", "scheme", "f", "size", "e", "value", "action"])?;
    for (i, s) in space.states().iter().enumerate() {
        let (f, size, e) = s.components();
        let opt = |x: Option<String>| x.unwrap_or_default();
        out.write_record([
            i.to_string(),
            space.scheme.kind.name().to_string(),
            opt(f.map(|x| x.to_string())),
            opt(size.map(|x| x.to_string())),
            opt(e.map(|x| x.to_string())),
            opt(values.map(|v| v[i].to_string())),
            policy.action(i).label().to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

fn run_point(config: &ExperimentConfig, space: &StateSpace, loss: &LossModel) -> Result<PointReport> {
    let channel = config.channel_at(loss);
    let sources: Vec<PolicySource> = config.policies.iter().map(|s| PolicySource::parse(s)).collect();
    let learning = if sources.contains(&PolicySource::Learn) {
        let out = algorithm_a(&channel, space, &config.schedule)?;
        Some(LearningSummary {
            stop: out.stop,
            converged: out.converged,
            phases: out.history.len(),
            total_slots: out.total_slots,
            values: out.values.values.clone(),
            actions: out.policy.actions().iter().map(|a| a.label()).collect(),
            checkpoint: out.model.checkpoint(space),
        })
    } else {
        None
    };
    let mut results = Vec::new();
    for source in &sources {
        let throughput = match source {
            PolicySource::Learn => {
                let labels = &learning.as_ref().expect("learned above").actions;
                let policy = Policy::new(
                    space,
                    labels.iter().map(|&l| AbstractAction::from_label(l)).collect::<Result<_>>()?,
                )?;
                eval_policy(&policy, &channel, space, config.eval)?
            }
            PolicySource::File(path) => eval_policy(&read_policy_csv(space, path)?, &channel, space, config.eval)?,
            PolicySource::Baseline(id) => eval_baseline(*id, &channel, space, config.eval)?,
        };
        results.push(PolicyResult {
            name: source.name(),
            throughput,
        });
    }
    Ok(PointReport {
        loss: loss.clone(),
        learning,
        results,
    })
}

pub fn eval_policy(policy: &Policy, channel: &ChannelConfig, space: &StateSpace, eval: EvalConfig) -> Result<Throughput> {
    evaluate(|| Box::new(PolicyController { space, policy }), channel, space, eval.slots, eval.seeds)
}

pub fn eval_baseline(id: BaselineId, channel: &ChannelConfig, space: &StateSpace, eval: EvalConfig) -> Result<Throughput> {
    let scheme = space.scheme;
    evaluate(
        || -> Box<dyn Controller> {
            match id {
                BaselineId::RandomRestricted => Box::new(Baseline::random_restricted(scheme)),
                other => Box::new(Baseline::new(other)),
            }
        },
        channel,
        space,
        eval.slots,
        eval.seeds,
    )
}

/// Runs every sweep point (concurrently) and assembles the report.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Report> {
    config.validate()?;
    let space = config.scheme()?.space();
    let points = config
        .loss_points()
        .par_iter()
        .map(|loss| run_point(config, &space, loss))
        .collect::<Result<Vec<_>>>()?;
    Ok(Report {
        config: config.clone(),
        states: space.states().iter().map(|s| s.to_string()).collect(),
        points,
    })
}

/// Writes `report.json`, `policy_table.csv`, `values.csv`, `throughput.csv`,
/// `per_user.csv` and one checkpoint per learned point into `dir`.
pub fn write_report(report: &Report, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let space = report.config.scheme()?.space();
    let mut written = Vec::new();
    let path = dir.join("report.json");
    fs::write(&path, serde_json::to_string_pretty(report)?)?;
    written.push(path);

    let learned: Vec<(String, &LearningSummary)> = report
        .points
        .iter()
        .filter_map(|p| p.learning.as_ref().map(|l| (loss_label(&p.loss), l)))
        .collect();
    if !learned.is_empty() {
        // one action column and one value column per loss point
        let mut policy = csv::Writer::from_path(dir.join("policy_table.csv"))?;
        let mut values = csv::Writer::from_path(dir.join("values.csv"))?;
        let mut head = vec!["state_index".to_string(), "state".into(), "f".into(), "size".into(), "e".into()];
        let mut vhead = vec!["state_index".to_string(), "state".into()];
        for (label, _) in &learned {
            head.push(format!("action@{label}"));
            vhead.push(format!("value@{label}"));
        }
        policy.write_record(&head)?;
        values.write_record(&vhead)?;
        for (i, s) in space.states().iter().enumerate() {
            let (f, size, e) = s.components();
            let mut row = vec![
                i.to_string(),
                s.to_string(),
                f.map_or(String::new(), |x| x.to_string()),
                size.map_or(String::new(), |x| x.to_string()),
                e.map_or(String::new(), |x| x.to_string()),
            ];
            let mut vrow = vec![i.to_string(), s.to_string()];
            for (_, l) in &learned {
                row.push(l.actions[i].to_string());
                vrow.push(l.values[i].to_string());
            }
            policy.write_record(&row)?;
            values.write_record(&vrow)?;
        }
        policy.flush()?;
        values.flush()?;
        written.push(dir.join("policy_table.csv"));
        written.push(dir.join("values.csv"));
        for (n, (label, l)) in learned.iter().enumerate() {
            let actions = l.actions.iter().map(|&a| AbstractAction::from_label(a)).collect::<Result<_>>()?;
            let path = dir.join(format!("policy_{n}.csv"));
            write_policy_csv(&space, &Policy::new(&space, actions)?, Some(&l.values), fs::File::create(&path)?)?;
            written.push(path);
            let path = dir.join(format!("checkpoint_{n}.json"));
            fs::write(
                &path,
                serde_json::to_string_pretty(&serde_json::json!({ "loss": label, "rows": l.checkpoint }))?,
            )?;
            written.push(path);
        }
    }

    let mut tp = csv::Writer::from_path(dir.join("throughput.csv"))?;
    tp.write_record(["policy", "loss", "mean_loss", "throughput", "stderr", "slots", "seeds"])?;
    let mut fair = csv::Writer::from_path(dir.join("per_user.csv"))?;
    fair.write_record(["policy", "loss", "user", "sent", "decoded"])?;
    for point in &report.points {
        let label = loss_label(&point.loss);
        let mean_loss = report.config.channel_at(&point.loss).mean_loss();
        for r in &point.results {
            tp.write_record([
                r.name.clone(),
                label.clone(),
                mean_loss.to_string(),
                r.throughput.mean.to_string(),
                r.throughput.stderr.to_string(),
                report.config.eval.slots.to_string(),
                report.config.eval.seeds.to_string(),
            ])?;
            for (u, (s, d)) in r.throughput.sent_per_user.iter().zip(&r.throughput.decoded_per_user).enumerate() {
                fair.write_record([r.name.clone(), label.clone(), u.to_string(), s.to_string(), d.to_string()])?;
            }
        }
    }
    tp.flush()?;
    fair.flush()?;
    written.push(dir.join("throughput.csv"));
    written.push(dir.join("per_user.csv"));
    Ok(written)
}

/// One verdict of the exact-oracle suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub users: usize,
    pub losses: Vec<f64>,
    pub gamma: f64,
    pub checks: Vec<Check>,
    pub prop1: Vec<oracle::Prop1Report>,
    pub shape: Vec<oracle::SlopeBoundReport>,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Exact checks at `k` users: induced-model gaps (NoTTE), average-cost
/// threshold structure and transience above the smallest coded clique (OneD), OneD value shape and
/// the binomial clique-outcome law.
pub fn run_oracle_suite(k: usize, losses: &[f64], gamma: f64, allow_large: bool) -> Result<OracleReport> {
    let mut checks = Vec::new();
    let mut prop1 = Vec::new();
    let mut shape = Vec::new();
    for &p in losses {
        let oracle = ExactOracle::new(k, &LossModel::Uniform(p), Default::default(), allow_large)?;
        let notte = oracle.ground_model(&AggregationScheme::no_tte(k)?.space())?;
        let mut exact = true;
        let mut worst = (0.0f64, Vec::new());
        for policy in oracle::all_policies(&notte.space) {
            let zero = notte.verify_prop1(&policy, 0.0)?;
            let r = notte.verify_prop1(&policy, gamma)?;
            exact &= zero.max_gap <= 1e-6 && r.weighted_gap <= 1e-6 && (!r.lumpable || r.max_gap <= 1e-6);
            if r.max_gap > worst.0 {
                worst = (r.max_gap, r.policy.clone());
            }
            prop1.push(r);
        }
        checks.push(Check {
            name: format!("induced-model equality in exact cases p={p}"),
            passed: exact,
            detail: format!("largest per-state gap {:.3e} at policy {:?}", worst.0, worst.1),
        });

        let oned = oracle.ground_model(&AggregationScheme::one_d(k)?.space())?;
        let (gain, optimal) = oned.exhaustive_average(1e-9)?;
        let thresholds: Vec<_> = optimal.iter().filter(|p| oracle::is_threshold_in_l(&oned.space, p)).collect();
        checks.push(Check {
            name: format!("threshold optimum p={p}"),
            passed: !thresholds.is_empty(),
            detail: format!(
                "gain {gain:.6}; optimal policies {:?}",
                optimal.iter().map(labels).collect::<Vec<_>>()
            ),
        });

        let mut transient_ok = true;
        let mut notes = Vec::new();
        for policy in oracle::all_policies(&oned.space) {
            let m = oracle::minimal_clique_action_size(&oned.space, &policy).unwrap_or(k);
            let recurrent = oned.recurrent_aggregates(&policy)?;
            let bad: Vec<usize> = recurrent
                .iter()
                .filter_map(|&i| oned.space.state(i).clique_size().filter(|&l| l > m))
                .collect();
            if !bad.is_empty() {
                transient_ok = false;
                notes.push(format!("{:?}: recurrent L={bad:?} with m={m}", labels(&policy)));
            }
        }
        checks.push(Check {
            name: format!("transience above m p={p}"),
            passed: transient_ok,
            detail: if notes.is_empty() { "all policies".into() } else { notes.join("; ") },
        });

        let sol = oned.exact_optimal(Criterion::Discounted(gamma), None)?;
        let report = oracle::verify_value_shape(&oned.space, &sol.values.values, 0.0);
        checks.push(Check {
            name: format!("OneD value monotone p={p}"),
            passed: report.monotone,
            detail: format!("{} violations, max step {:.4}", report.violations.len(), report.max_forward_difference),
        });
        shape.push(report);

        let full = oracle.decode(oracle.n_states() - 1);
        let dist = oracle::clique_outcome_distribution(&oracle, &full, crate::state::UserSet::all(k))?;
        let err = dist
            .iter()
            .zip(oracle::binomial_law(k, p))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        checks.push(Check {
            name: format!("binomial clique law p={p}"),
            passed: err < 1e-12,
            detail: format!("max abs error {err:.2e}"),
        });
    }
    Ok(OracleReport {
        users: k,
        losses: losses.to_vec(),
        gamma,
        checks,
        prop1,
        shape,
    })
}

fn labels(p: &Policy) -> Vec<u8> {
    p.actions().iter().map(|a| a.label()).collect()
}
