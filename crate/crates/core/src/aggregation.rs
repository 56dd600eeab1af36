//! Aggregation maps from detailed states to small abstract states, the
//! restricted action sets, and the stable state indexing used in every output.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::state::{DetailedState, StorageMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeKind {
    /// `(L, E)` over binary storage.
    NoTte,
    /// `(F, C, E)` over TTE storage.
    Agg1,
    /// `(F, L, E)` over TTE storage.
    Agg2,
    /// `(L)` over binary storage.
    OneD,
}

impl SchemeKind {
    pub fn needs_tte(self) -> bool {
        matches!(self, SchemeKind::Agg1 | SchemeKind::Agg2)
    }

    pub fn name(self) -> &'static str {
        match self {
            SchemeKind::NoTte => "notte",
            SchemeKind::Agg1 => "agg1",
            SchemeKind::Agg2 => "agg2",
            SchemeKind::OneD => "oned",
        }
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "notte" | "no-tte" => Ok(SchemeKind::NoTte),
            "agg1" | "aggi" => Ok(SchemeKind::Agg1),
            "agg2" | "aggii" => Ok(SchemeKind::Agg2),
            "oned" | "1d" => Ok(SchemeKind::OneD),
            other => Err(Error::InvalidConfig {
                field: "scheme",
                reason: format!("unknown scheme `{other}` (expected notte, agg1, agg2 or oned)"),
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AggregationScheme {
    pub kind: SchemeKind,
    pub k: usize,
    pub tte: Option<u8>,
}

impl AggregationScheme {
    pub fn new(kind: SchemeKind, k: usize, tte: Option<u8>) -> Result<Self> {
        if !(2..=crate::state::MAX_USERS).contains(&k) {
            return Err(Error::InvalidConfig {
                field: "users",
                reason: format!("{k} is outside 2..={}", crate::state::MAX_USERS),
            });
        }
        match (kind.needs_tte(), tte) {
            (true, None) | (true, Some(0)) => Err(Error::InvalidConfig {
                field: "tte",
                reason: format!("scheme {kind} needs a positive TTE"),
            }),
            (false, Some(_)) => Err(Error::InvalidConfig {
                field: "tte",
                reason: format!("scheme {kind} works on binary storage and takes no TTE"),
            }),
            _ => Ok(AggregationScheme { kind, k, tte }),
        }
    }

    pub fn no_tte(k: usize) -> Result<Self> {
        Self::new(SchemeKind::NoTte, k, None)
    }

    pub fn one_d(k: usize) -> Result<Self> {
        Self::new(SchemeKind::OneD, k, None)
    }

    pub fn agg1(k: usize, t: u8) -> Result<Self> {
        Self::new(SchemeKind::Agg1, k, Some(t))
    }

    pub fn agg2(k: usize, t: u8) -> Result<Self> {
        Self::new(SchemeKind::Agg2, k, Some(t))
    }

    pub fn mode(&self) -> StorageMode {
        match self.tte {
            Some(t) => StorageMode::Tte(t),
            None => StorageMode::Binary,
        }
    }

    pub fn actions(&self) -> &'static [AbstractAction] {
        match self.kind {
            SchemeKind::Agg2 => &[
                AbstractAction::CliqueWithOldest,
                AbstractAction::EmptyLine,
                AbstractAction::GlobalMaxClique,
            ],
            _ => &[AbstractAction::CliqueWithOldest, AbstractAction::EmptyLine],
        }
    }

    /// Maps a detailed state to its aggregate.
    pub fn aggregate(&self, s: &DetailedState) -> Result<AggregatedState> {
        if s.mode() != self.mode() || s.k() != self.k {
            return Err(Error::ModeMismatch);
        }
        let e = s.empty_lines();
        Ok(match self.kind {
            SchemeKind::NoTte => AggregatedState::NoTte {
                l: s.max_clique_size(),
                e,
            },
            SchemeKind::OneD => AggregatedState::OneD {
                l: s.max_clique_size(),
            },
            SchemeKind::Agg1 | SchemeKind::Agg2 => match s.oldest_cliques() {
                Err(Error::AllExpired) => AggregatedState::TteEmpty,
                Err(other) => return Err(other),
                Ok((f, cliques)) => {
                    if self.kind == SchemeKind::Agg1 {
                        AggregatedState::Agg1 {
                            f,
                            c: cliques[0].len(),
                            e,
                        }
                    } else {
                        AggregatedState::Agg2 {
                            f,
                            l: s.max_clique_size(),
                            e,
                        }
                    }
                }
            },
        })
    }

    /// Restricted actions available in `state`; never empty for a valid state.
    pub fn feasible_actions(&self, state: &AggregatedState) -> Vec<AbstractAction> {
        use AbstractAction::*;
        match *state {
            AggregatedState::NoTte { e, .. } => {
                let mut out = Vec::with_capacity(2);
                if e < self.k {
                    out.push(CliqueWithOldest);
                }
                if e > 0 {
                    out.push(EmptyLine);
                }
                out
            }
            AggregatedState::OneD { l } => {
                if l < self.k {
                    vec![CliqueWithOldest, EmptyLine]
                } else {
                    vec![CliqueWithOldest]
                }
            }
            AggregatedState::Agg1 { e, .. } => {
                let mut out = vec![CliqueWithOldest];
                if e > 0 {
                    out.push(EmptyLine);
                }
                out
            }
            AggregatedState::Agg2 { e, .. } => {
                let mut out = vec![CliqueWithOldest];
                if e > 0 {
                    out.push(EmptyLine);
                }
                out.push(GlobalMaxClique);
                out
            }
            AggregatedState::TteEmpty => vec![EmptyLine],
        }
    }

    pub fn is_feasible(&self, state: &AggregatedState, action: AbstractAction) -> bool {
        self.feasible_actions(state).contains(&action)
    }

    /// A canonical detailed state whose aggregate is `target`.
    ///
    /// Non-empty rows are users `0..n` with `n = K - E`; row `i` carries lifetime
    /// `F + i` (so row 0 holds the oldest copy), the clique sits on users
    /// `0..size`, and every other non-empty row is held only by user 0. With a
    /// clique size of one, row `i` is held by user `i + 1` so no pair is mutual.
    pub fn seed_state(&self, target: &AggregatedState) -> Result<DetailedState> {
        let unrepresentable = || Error::Unrepresentable(*target);
        let k = self.k;
        let (f, size, e) = match (*target, self.kind) {
            (AggregatedState::NoTte { l, e }, SchemeKind::NoTte) => (1, l, e),
            (AggregatedState::OneD { l }, SchemeKind::OneD) => {
                (1, l, if l >= 2 { k - l } else { k - 1 })
            }
            (AggregatedState::Agg1 { f, c, e }, SchemeKind::Agg1) => (f, c, e),
            (AggregatedState::Agg2 { f, l, e }, SchemeKind::Agg2) => (f, l, e),
            (AggregatedState::TteEmpty, SchemeKind::Agg1 | SchemeKind::Agg2) => {
                return DetailedState::empty(k, self.mode());
            }
            _ => return Err(Error::SchemeMismatch),
        };
        if e > k || size == 0 || size > k {
            return Err(unrepresentable());
        }
        let n = k - e;
        if n == 0 {
            return if size == 1 && !self.kind.needs_tte() {
                DetailedState::empty(k, self.mode())
            } else {
                Err(unrepresentable())
            };
        }
        if size > n || (size == 1 && n == k && k == 2) {
            return Err(unrepresentable());
        }
        let mode = self.mode();
        let lifetime = |i: usize| -> Result<u8> {
            match mode {
                StorageMode::Binary => Ok(1),
                StorageMode::Tte(t) => {
                    let v = f as usize + i;
                    if f == 0 || v > t as usize {
                        Err(unrepresentable())
                    } else {
                        Ok(v as u8)
                    }
                }
            }
        };
        let mut rows = vec![vec![0u8; k]; k];
        for (i, row) in rows.iter_mut().enumerate().take(n) {
            let tau = lifetime(i)?;
            if size >= 2 && i < size {
                for (j, cell) in row.iter_mut().enumerate().take(size) {
                    if j != i {
                        *cell = tau;
                    }
                }
            } else if size >= 2 {
                row[0] = tau;
            } else {
                row[(i + 1) % k] = tau;
            }
        }
        let s = DetailedState::from_rows(mode, &rows)?;
        if self.aggregate(&s)? != *target {
            return Err(unrepresentable());
        }
        Ok(s)
    }

    /// All representable aggregated states in the documented index order:
    /// `E` ascending, then the clique component, then `F`; the TTE empty
    /// sentinel comes last.
    pub fn enumerate(&self) -> Vec<AggregatedState> {
        let k = self.k;
        let mut out = Vec::new();
        match self.kind {
            SchemeKind::OneD => out.extend((1..=k).map(|l| AggregatedState::OneD { l })),
            SchemeKind::NoTte => {
                for e in 0..=k {
                    for l in 1..=k {
                        out.push(AggregatedState::NoTte { l, e });
                    }
                }
            }
            SchemeKind::Agg1 | SchemeKind::Agg2 => {
                let t = self.tte.unwrap_or(1);
                for e in 0..=k {
                    for size in 1..=k {
                        for f in 1..=t {
                            out.push(if self.kind == SchemeKind::Agg1 {
                                AggregatedState::Agg1 { f, c: size, e }
                            } else {
                                AggregatedState::Agg2 { f, l: size, e }
                            });
                        }
                    }
                }
                out.push(AggregatedState::TteEmpty);
            }
        }
        out.retain(|s| self.seed_state(s).is_ok());
        out
    }

    pub fn space(&self) -> StateSpace {
        StateSpace::new(*self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AggregatedState {
    NoTte { l: usize, e: usize },
    Agg1 { f: u8, c: usize, e: usize },
    Agg2 { f: u8, l: usize, e: usize },
    OneD { l: usize },
    /// TTE storage holding nothing; `F` is undefined there.
    TteEmpty,
}

impl AggregatedState {
    /// `(F, clique size, E)` for tabular output; absent components are `None`.
    pub fn components(&self) -> (Option<u8>, Option<usize>, Option<usize>) {
        match *self {
            AggregatedState::NoTte { l, e } => (None, Some(l), Some(e)),
            AggregatedState::Agg1 { f, c, e } => (Some(f), Some(c), Some(e)),
            AggregatedState::Agg2 { f, l, e } => (Some(f), Some(l), Some(e)),
            AggregatedState::OneD { l } => (None, Some(l), None),
            AggregatedState::TteEmpty => (None, None, None),
        }
    }

    pub fn empty_lines(&self) -> Option<usize> {
        self.components().2
    }

    pub fn clique_size(&self) -> Option<usize> {
        self.components().1
    }
}

impl fmt::Display for AggregatedState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            AggregatedState::NoTte { l, e } => write!(f, "(L={l},E={e})"),
            AggregatedState::Agg1 { f: ff, c, e } => write!(f, "(F={ff},C={c},E={e})"),
            AggregatedState::Agg2 { f: ff, l, e } => write!(f, "(F={ff},L={l},E={e})"),
            AggregatedState::OneD { l } => write!(f, "(L={l})"),
            AggregatedState::TteEmpty => write!(f, "(empty)"),
        }
    }
}

/// Restricted action labels. Under `NoTte` and `OneD` label 1 sends the global
/// maximum clique; under `OneD` label 2 sends a line outside that clique.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AbstractAction {
    CliqueWithOldest = 1,
    EmptyLine = 2,
    GlobalMaxClique = 3,
}

impl AbstractAction {
    pub fn label(self) -> u8 {
        self as u8
    }

    pub fn from_label(label: u8) -> Result<Self> {
        match label {
            1 => Ok(AbstractAction::CliqueWithOldest),
            2 => Ok(AbstractAction::EmptyLine),
            3 => Ok(AbstractAction::GlobalMaxClique),
            other => Err(Error::Parse(format!("unknown action label {other}"))),
        }
    }

    /// Dense position used by tabular models.
    pub fn slot(self) -> usize {
        self as usize - 1
    }
}

impl fmt::Display for AbstractAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.label())
    }
}

/// Enumerated aggregated states with index lookup.
#[derive(Clone, Debug)]
pub struct StateSpace {
    pub scheme: AggregationScheme,
    states: Vec<AggregatedState>,
    index: HashMap<AggregatedState, usize>,
}

impl StateSpace {
    pub fn new(scheme: AggregationScheme) -> Self {
        let states = scheme.enumerate();
        let index = states.iter().enumerate().map(|(i, s)| (*s, i)).collect();
        StateSpace {
            scheme,
            states,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn states(&self) -> &[AggregatedState] {
        &self.states
    }

    pub fn state(&self, index: usize) -> AggregatedState {
        self.states[index]
    }

    pub fn index_of(&self, s: &AggregatedState) -> Result<usize> {
        self.index.get(s).copied().ok_or(Error::UnknownState(*s))
    }

    pub fn n_actions(&self) -> usize {
        self.scheme.actions().len()
    }

    pub fn feasible(&self, index: usize) -> Vec<AbstractAction> {
        self.scheme.feasible_actions(&self.states[index])
    }

    pub fn locate(&self, s: &DetailedState) -> Result<usize> {
        self.index_of(&self.scheme.aggregate(s)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::{Reception, StorageRule, UserSet};
    use std::collections::{HashSet, VecDeque};

    fn rows(r: &[&[u8]]) -> Vec<Vec<u8>> {
        r.iter().map(|x| x.to_vec()).collect()
    }

    #[test]
    fn example_states_share_an_aggregate() {
        let scheme = AggregationScheme::no_tte(5).unwrap();
        let s1 = DetailedState::from_rows(
            StorageMode::Binary,
            &rows(&[
                &[0, 1, 0, 0, 1],
                &[1, 0, 1, 1, 0],
                &[0, 1, 0, 1, 0],
                &[0, 1, 1, 0, 0],
                &[0, 1, 0, 0, 0],
            ]),
        )
        .unwrap();
        let s2 = DetailedState::from_rows(
            StorageMode::Binary,
            &rows(&[
                &[0, 1, 1, 0, 1],
                &[1, 0, 1, 0, 1],
                &[1, 1, 0, 0, 0],
                &[0, 0, 0, 0, 1],
                &[1, 1, 0, 0, 0],
            ]),
        )
        .unwrap();
        let target = AggregatedState::NoTte { l: 3, e: 0 };
        assert_eq!(scheme.aggregate(&s1).unwrap(), target);
        assert_eq!(scheme.aggregate(&s2).unwrap(), target);
        let empty = DetailedState::empty(5, StorageMode::Binary).unwrap();
        assert_eq!(scheme.aggregate(&empty).unwrap(), AggregatedState::NoTte { l: 1, e: 5 });
    }

    #[test]
    fn agg1_and_agg2_differ_on_oldest_clique() {
        let s = DetailedState::from_rows(
            StorageMode::Tte(5),
            &rows(&[&[0, 5, 5, 0], &[5, 0, 5, 0], &[5, 5, 0, 0], &[1, 0, 0, 0]]),
        )
        .unwrap();
        let a1 = AggregationScheme::agg1(4, 5).unwrap();
        let a2 = AggregationScheme::agg2(4, 5).unwrap();
        assert_eq!(a1.aggregate(&s).unwrap(), AggregatedState::Agg1 { f: 1, c: 1, e: 0 });
        assert_eq!(a2.aggregate(&s).unwrap(), AggregatedState::Agg2 { f: 1, l: 3, e: 0 });
        assert_eq!(
            AggregationScheme::no_tte(4).unwrap().aggregate(&s),
            Err(Error::ModeMismatch)
        );
    }

    #[test]
    fn feasible_action_examples() {
        use AbstractAction::*;
        let nt = AggregationScheme::no_tte(5).unwrap();
        assert_eq!(nt.feasible_actions(&AggregatedState::NoTte { l: 3, e: 0 }), vec![CliqueWithOldest]);
        assert_eq!(nt.feasible_actions(&AggregatedState::NoTte { l: 1, e: 5 }), vec![EmptyLine]);
        let a2 = AggregationScheme::agg2(5, 5).unwrap();
        assert_eq!(
            a2.feasible_actions(&AggregatedState::Agg2 { f: 2, l: 3, e: 1 }),
            vec![CliqueWithOldest, EmptyLine, GlobalMaxClique]
        );
        assert_eq!(a2.feasible_actions(&AggregatedState::TteEmpty), vec![EmptyLine]);
    }

    #[test]
    fn construction_guards() {
        assert!(AggregationScheme::no_tte(1).is_err());
        assert!(AggregationScheme::new(SchemeKind::Agg1, 5, None).is_err());
        assert!(AggregationScheme::new(SchemeKind::NoTte, 5, Some(3)).is_err());
        assert_eq!("agg2".parse::<SchemeKind>().unwrap(), SchemeKind::Agg2);
        assert!("agg3".parse::<SchemeKind>().is_err());
    }

    #[test]
    fn enumeration_sizes() {
        let nt5 = AggregationScheme::no_tte(5).unwrap().enumerate();
        assert_eq!(nt5.len(), 16);
        assert!(nt5.len() <= 30);
        assert_eq!(AggregationScheme::no_tte(3).unwrap().enumerate().len(), 7);
        assert_eq!(AggregationScheme::one_d(4).unwrap().enumerate().len(), 4);
        assert_eq!(AggregationScheme::agg1(5, 9).unwrap().enumerate().len(), 96);
        assert_eq!(AggregationScheme::agg2(5, 9).unwrap().enumerate().len(), 96);
    }

    #[test]
    fn enumeration_order_is_e_then_size_then_f() {
        let states = AggregationScheme::agg1(4, 4).unwrap().enumerate();
        let keys: Vec<(usize, usize, u8)> = states
            .iter()
            .filter_map(|s| match *s {
                AggregatedState::Agg1 { f, c, e } => Some((e, c, f)),
                _ => None,
            })
            .collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        assert_eq!(*states.last().unwrap(), AggregatedState::TteEmpty);
    }

    #[test]
    fn seed_round_trip_for_every_enumerated_state() {
        let schemes = [
            AggregationScheme::no_tte(5).unwrap(),
            AggregationScheme::one_d(5).unwrap(),
            AggregationScheme::agg1(5, 9).unwrap(),
            AggregationScheme::agg2(5, 5).unwrap(),
            AggregationScheme::agg1(3, 5).unwrap(),
        ];
        for scheme in schemes {
            for s in scheme.enumerate() {
                let d = scheme.seed_state(&s).unwrap();
                assert_eq!(scheme.aggregate(&d).unwrap(), s, "{scheme:?}");
            }
        }
        let agg1 = AggregationScheme::agg1(3, 5).unwrap();
        let d = agg1.seed_state(&AggregatedState::Agg1 { f: 2, c: 2, e: 1 }).unwrap();
        assert!(d.is_clique(UserSet::from_users([0, 1])));
        assert_eq!(d.oldest_lifetime(), Some(2));
        assert!(d.row_is_empty(2));
        assert_eq!(
            AggregationScheme::no_tte(5).unwrap().seed_state(&AggregatedState::NoTte { l: 1, e: 5 }).unwrap(),
            DetailedState::empty(5, StorageMode::Binary).unwrap()
        );
        assert!(matches!(
            AggregationScheme::no_tte(5).unwrap().seed_state(&AggregatedState::NoTte { l: 5, e: 1 }),
            Err(Error::Unrepresentable(_))
        ));
    }

    #[test]
    fn clique_of_oldest_never_exceeds_global_clique() {
        let a1 = AggregationScheme::agg1(4, 3).unwrap();
        let a2 = AggregationScheme::agg2(4, 3).unwrap();
        for (d, _) in reachable(a1, true) {
            match (a1.aggregate(&d).unwrap(), a2.aggregate(&d).unwrap()) {
                (AggregatedState::Agg1 { c, .. }, AggregatedState::Agg2 { l, .. }) => assert!(c <= l),
                (AggregatedState::TteEmpty, AggregatedState::TteEmpty) => {}
                other => panic!("inconsistent aggregates {other:?}"),
            }
        }
    }

    /// Breadth-first search from the empty matrix over every concrete
    /// combination a restricted action can realize and every reception vector.
    fn reachable(scheme: AggregationScheme, all_actions: bool) -> HashMap<DetailedState, AggregatedState> {
        let k = scheme.k;
        let start = DetailedState::empty(k, scheme.mode()).unwrap();
        let mut seen = HashMap::new();
        let mut queue = VecDeque::new();
        seen.insert(start.clone(), scheme.aggregate(&start).unwrap());
        queue.push_back(start);
        while let Some(s) = queue.pop_front() {
            let mut combos: HashSet<UserSet> = HashSet::new();
            combos.extend(s.empty_rows().iter().map(UserSet::singleton));
            combos.extend(s.maximum_cliques());
            if let Ok((_, q)) = s.oldest_cliques() {
                combos.extend(q);
            }
            if all_actions {
                combos.extend((0..k).map(UserSet::singleton));
            }
            for combo in combos {
                for bits in 0u32..(1 << k) {
                    let rx = Reception::new(k, UserSet(bits)).unwrap();
                    let next = s.advance(combo, &rx, StorageRule::Persist).unwrap().next_state;
                    if !seen.contains_key(&next) {
                        seen.insert(next.clone(), scheme.aggregate(&next).unwrap());
                        queue.push_back(next);
                    }
                }
            }
        }
        seen
    }

    #[test]
    fn enumeration_matches_reachable_aggregates() {
        let cases = [
            AggregationScheme::no_tte(3).unwrap(),
            AggregationScheme::no_tte(4).unwrap(),
            AggregationScheme::one_d(4).unwrap(),
            AggregationScheme::agg1(3, 2).unwrap(),
            AggregationScheme::agg1(3, 4).unwrap(),
            AggregationScheme::agg2(3, 3).unwrap(),
            AggregationScheme::agg1(4, 3).unwrap(),
            AggregationScheme::agg2(4, 3).unwrap(),
        ];
        for scheme in cases {
            let got: HashSet<AggregatedState> = reachable(scheme, false).into_values().collect();
            let expected: HashSet<AggregatedState> = scheme.enumerate().into_iter().collect();
            assert_eq!(got, expected, "{scheme:?}");
        }
    }

    #[test]
    fn each_row_carries_a_single_lifetime() {
        let scheme = AggregationScheme::agg1(3, 3).unwrap();
        for (d, _) in reachable(scheme, true) {
            for i in 0..3 {
                let positive: HashSet<u8> = d.row(i).iter().copied().filter(|&v| v > 0).collect();
                assert!(positive.len() <= 1, "row {i} of {d:?} mixes lifetimes");
            }
        }
    }
}
