//! Policies and value functions over an enumerated aggregated state space.

use serde::{Deserialize, Serialize};

use crate::aggregation::{AbstractAction, AggregatedState, AggregationScheme, SchemeKind, StateSpace};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub scheme: AggregationScheme,
    actions: Vec<AbstractAction>,
}

impl Policy {
    /// Builds a policy, rejecting any action that is infeasible in its state.
    pub fn new(space: &StateSpace, actions: Vec<AbstractAction>) -> Result<Self> {
        if actions.len() != space.len() {
            return Err(Error::InvalidConfig {
                field: "policy",
                reason: format!("{} actions for {} states", actions.len(), space.len()),
            });
        }
        for (i, a) in actions.iter().enumerate() {
            if !space.feasible(i).contains(a) {
                return Err(Error::InfeasibleAction {
                    state: space.state(i),
                    action: a.to_string(),
                });
            }
        }
        Ok(Policy {
            scheme: space.scheme,
            actions,
        })
    }

    pub fn from_fn(space: &StateSpace, f: impl Fn(&AggregatedState) -> AbstractAction) -> Result<Self> {
        Self::new(space, space.states().iter().map(f).collect())
    }

    /// The first feasible action in every state.
    pub fn default_for(space: &StateSpace) -> Self {
        let actions = (0..space.len()).map(|i| space.feasible(i)[0]).collect();
        Policy {
            scheme: space.scheme,
            actions,
        }
    }

    /// Empty line whenever one exists, otherwise the largest clique.
    pub fn semi_greedy(space: &StateSpace) -> Result<Self> {
        Self::from_fn(space, |s| {
            let feasible = space.scheme.feasible_actions(s);
            if feasible.contains(&AbstractAction::EmptyLine) && s.empty_lines().unwrap_or(0) > 0 {
                AbstractAction::EmptyLine
            } else if feasible.contains(&AbstractAction::GlobalMaxClique) {
                AbstractAction::GlobalMaxClique
            } else {
                feasible[0]
            }
        })
    }

    /// Semi-greedy, except that a copy about to expire forces the clique through it.
    pub fn modified_semi_greedy(space: &StateSpace) -> Result<Self> {
        if space.scheme.kind != SchemeKind::Agg2 {
            return Err(Error::SchemeMismatch);
        }
        Self::from_fn(space, |s| match *s {
            AggregatedState::Agg2 { f: 1, .. } => AbstractAction::CliqueWithOldest,
            AggregatedState::Agg2 { e, .. } if e > 0 => AbstractAction::EmptyLine,
            AggregatedState::Agg2 { .. } => AbstractAction::GlobalMaxClique,
            _ => AbstractAction::EmptyLine,
        })
    }

    /// OneD policy sending the clique iff `L >= threshold`.
    pub fn one_d_threshold(space: &StateSpace, threshold: usize) -> Result<Self> {
        if space.scheme.kind != SchemeKind::OneD {
            return Err(Error::SchemeMismatch);
        }
        Self::from_fn(space, |s| match *s {
            AggregatedState::OneD { l } if l < threshold && l < space.scheme.k => AbstractAction::EmptyLine,
            _ => AbstractAction::CliqueWithOldest,
        })
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn action(&self, index: usize) -> AbstractAction {
        self.actions[index]
    }

    pub fn actions(&self) -> &[AbstractAction] {
        &self.actions
    }

    pub fn set(&mut self, space: &StateSpace, index: usize, action: AbstractAction) -> Result<()> {
        if !space.feasible(index).contains(&action) {
            return Err(Error::InfeasibleAction {
                state: space.state(index),
                action: action.to_string(),
            });
        }
        self.actions[index] = action;
        Ok(())
    }
}

/// One state on which two policies disagree.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Disagreement {
    pub index: usize,
    pub state: AggregatedState,
    pub left: AbstractAction,
    pub right: AbstractAction,
}

pub fn diff_policies(space: &StateSpace, a: &Policy, b: &Policy) -> Result<Vec<Disagreement>> {
    if a.scheme != b.scheme || a.scheme != space.scheme {
        return Err(Error::SchemeMismatch);
    }
    Ok(a.actions
        .iter()
        .zip(&b.actions)
        .enumerate()
        .filter(|(_, (x, y))| x != y)
        .map(|(index, (&left, &right))| Disagreement {
            index,
            state: space.state(index),
            left,
            right,
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Criterion {
    Discounted(f64),
    AverageCost,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueFunction {
    pub criterion: Criterion,
    pub values: Vec<f64>,
}

impl ValueFunction {
    pub fn sup_distance(&self, other: &ValueFunction) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sg_and_greedy_disagree_on_states_with_empty_lines_and_cliques() {
        let space = AggregationScheme::no_tte(5).unwrap().space();
        let sg = Policy::semi_greedy(&space).unwrap();
        assert!(diff_policies(&space, &sg, &sg).unwrap().is_empty());
        let greedy = Policy::from_fn(&space, |s| match *s {
            AggregatedState::NoTte { l, e } if l >= 2 || e == 0 => AbstractAction::CliqueWithOldest,
            _ => AbstractAction::EmptyLine,
        })
        .unwrap();
        let d = diff_policies(&space, &sg, &greedy).unwrap();
        assert!(!d.is_empty());
        for x in d {
            match x.state {
                AggregatedState::NoTte { l, e } => assert!(l >= 2 && e > 0),
                _ => unreachable!(),
            }
        }
    }

    #[test]
    fn infeasible_actions_are_rejected() {
        let space = AggregationScheme::no_tte(3).unwrap().space();
        let bad = vec![AbstractAction::EmptyLine; space.len()];
        assert!(matches!(Policy::new(&space, bad), Err(Error::InfeasibleAction { .. })));
        let other = AggregationScheme::one_d(3).unwrap().space();
        let a = Policy::default_for(&space);
        let b = Policy::default_for(&other);
        assert_eq!(diff_policies(&space, &a, &b), Err(Error::SchemeMismatch));
    }

    #[test]
    fn msg_forces_clique_at_expiry() {
        let space = AggregationScheme::agg2(5, 5).unwrap().space();
        let msg = Policy::modified_semi_greedy(&space).unwrap();
        let sg = Policy::semi_greedy(&space).unwrap();
        for (i, s) in space.states().iter().enumerate() {
            match *s {
                AggregatedState::Agg2 { f: 1, .. } => assert_eq!(msg.action(i), AbstractAction::CliqueWithOldest),
                _ => assert_eq!(msg.action(i), sg.action(i)),
            }
        }
    }
}
