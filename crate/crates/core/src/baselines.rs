//! Reference schedulers: uncoded ARQ, greedy, semi-greedy, modified
//! semi-greedy, and a uniform choice among restricted actions.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::aggregation::{AbstractAction, AggregationScheme};
use crate::channel::{realize_action, Controller, Decision};
use crate::error::{Error, Result};
use crate::state::{DetailedState, TieBreak, UserSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineId {
    Uncoded,
    Greedy,
    #[serde(rename = "sg")]
    SemiGreedy,
    #[serde(rename = "msg")]
    ModifiedSemiGreedy,
    #[serde(rename = "random")]
    RandomRestricted,
}

impl BaselineId {
    pub const ALL: [BaselineId; 5] = [
        BaselineId::Uncoded,
        BaselineId::Greedy,
        BaselineId::SemiGreedy,
        BaselineId::ModifiedSemiGreedy,
        BaselineId::RandomRestricted,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineId::Uncoded => "uncoded",
            BaselineId::Greedy => "greedy",
            BaselineId::SemiGreedy => "sg",
            BaselineId::ModifiedSemiGreedy => "msg",
            BaselineId::RandomRestricted => "random",
        }
    }
}

impl fmt::Display for BaselineId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BaselineId::ALL
            .into_iter()
            .find(|b| b.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidConfig {
                field: "policy",
                reason: format!("unknown baseline `{s}` (expected uncoded, greedy, sg, msg or random)"),
            })
    }
}

/// A baseline scheduler. Uncoded keeps a round-robin cursor; the others are stateless.
pub struct Baseline {
    pub id: BaselineId,
    cursor: usize,
    /// Aggregation used by `RandomRestricted` to list feasible actions.
    scheme: Option<AggregationScheme>,
}

impl Baseline {
    pub fn new(id: BaselineId) -> Self {
        Baseline {
            id,
            cursor: 0,
            scheme: None,
        }
    }

    pub fn random_restricted(scheme: AggregationScheme) -> Self {
        Baseline {
            id: BaselineId::RandomRestricted,
            cursor: 0,
            scheme: Some(scheme),
        }
    }
}

fn label(s: &DetailedState, combo: UserSet) -> AbstractAction {
    match combo.first() {
        Some(u) if combo.len() == 1 && s.row_is_empty(u) => AbstractAction::EmptyLine,
        _ => AbstractAction::CliqueWithOldest,
    }
}

fn semi_greedy(s: &DetailedState, rng: &mut dyn RngCore) -> UserSet {
    let empty = s.empty_rows();
    if !empty.is_empty() {
        UserSet::singleton(TieBreak::Uniform(rng).pick_user(empty))
    } else {
        s.max_clique(&mut TieBreak::Uniform(rng))
    }
}

impl Controller for Baseline {
    fn decide(&mut self, s: &DetailedState, rng: &mut dyn RngCore) -> Result<Decision> {
        let k = s.k();
        let combo = match self.id {
            BaselineId::Uncoded => {
                let u = self.cursor % k;
                self.cursor = (u + 1) % k;
                UserSet::singleton(u)
            }
            BaselineId::Greedy => {
                if s.max_clique_size() >= 2 {
                    s.max_clique(&mut TieBreak::Uniform(rng))
                } else if s.empty_lines() > 0 {
                    UserSet::singleton(TieBreak::Uniform(rng).pick_user(s.empty_rows()))
                } else {
                    UserSet::singleton(rng.gen_range(0..k))
                }
            }
            BaselineId::SemiGreedy => semi_greedy(s, rng),
            BaselineId::ModifiedSemiGreedy => {
                if !s.mode().is_tte() {
                    return Err(Error::ModeMismatch);
                }
                if s.oldest_lifetime() == Some(1) {
                    s.clique_with_oldest(&mut TieBreak::Uniform(rng))?.1
                } else {
                    semi_greedy(s, rng)
                }
            }
            BaselineId::RandomRestricted => {
                let scheme = self.scheme.ok_or(Error::InvalidConfig {
                    field: "policy",
                    reason: "random baseline needs an aggregation scheme".into(),
                })?;
                let feasible = scheme.feasible_actions(&scheme.aggregate(s)?);
                let action = feasible[rng.gen_range(0..feasible.len())];
                let combo = realize_action(&scheme, s, action, &mut TieBreak::Uniform(rng))?;
                return Ok(Decision { combo, action });
            }
        };
        Ok(Decision {
            combo,
            action: label(s, combo),
        })
    }
}
