//! Detailed (ground) storage state and its single-slot dynamics.
//!
//! Entry `(i, j)` of the `K x K` matrix records that user `j` holds the pending
//! packet of user `i`. In binary mode entries are 0/1; in TTE mode an entry is
//! the remaining lifetime `1..=T` of the stored copy, 0 meaning "not held".
//! A clique is a set of users that pairwise hold each other's pending packet,
//! so one XOR of their packets is instantly decodable by every member.
//!
//! Users are indexed from 0 throughout the crate.

use std::cmp::Ordering;
use std::fmt;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported user count (user sets are 32-bit masks).
pub const MAX_USERS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StorageMode {
    Binary,
    /// Stored copies expire after the given number of slots.
    Tte(u8),
}

impl StorageMode {
    /// Value written for a freshly stored copy.
    pub fn fresh(self) -> u8 {
        match self {
            StorageMode::Binary => 1,
            StorageMode::Tte(t) => t,
        }
    }

    pub fn max_entry(self) -> u8 {
        self.fresh()
    }

    pub fn is_tte(self) -> bool {
        matches!(self, StorageMode::Tte(_))
    }
}

/// How a failed uncoded transmission updates the intended user's row in binary mode.
///
/// `Persist` keeps copies already held by users that did not hear the
/// retransmission; `FreshOnly` keeps only this slot's hearers. TTE mode always
/// refreshes every holder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StorageRule {
    #[default]
    Persist,
    FreshOnly,
}

/// A set of user indices, stored as a bit mask.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UserSet(pub u32);

impl UserSet {
    pub const EMPTY: UserSet = UserSet(0);

    pub fn singleton(u: usize) -> Self {
        UserSet(1 << u)
    }

    pub fn all(k: usize) -> Self {
        if k >= 32 {
            UserSet(u32::MAX)
        } else {
            UserSet((1u32 << k) - 1)
        }
    }

    pub fn from_users<I: IntoIterator<Item = usize>>(users: I) -> Self {
        UserSet(users.into_iter().fold(0, |m, u| m | (1 << u)))
    }

    pub fn contains(self, u: usize) -> bool {
        self.0 >> u & 1 == 1
    }

    pub fn insert(&mut self, u: usize) {
        self.0 |= 1 << u;
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn first(self) -> Option<usize> {
        (self.0 != 0).then(|| self.0.trailing_zeros() as usize)
    }

    pub fn union(self, other: UserSet) -> UserSet {
        UserSet(self.0 | other.0)
    }

    pub fn intersection(self, other: UserSet) -> UserSet {
        UserSet(self.0 & other.0)
    }

    pub fn difference(self, other: UserSet) -> UserSet {
        UserSet(self.0 & !other.0)
    }

    pub fn iter(self) -> impl Iterator<Item = usize> {
        let mut bits = self.0;
        std::iter::from_fn(move || {
            if bits == 0 {
                None
            } else {
                let u = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                Some(u)
            }
        })
    }

    pub fn to_vec(self) -> Vec<usize> {
        self.iter().collect()
    }

    /// Lexicographic order of the sorted member lists.
    pub fn lex_cmp(self, other: UserSet) -> Ordering {
        let diff = self.0 ^ other.0;
        if diff == 0 {
            return Ordering::Equal;
        }
        let lowest = diff & diff.wrapping_neg();
        if self.0 & lowest != 0 {
            Ordering::Less
        } else {
            Ordering::Greater
        }
    }
}

impl fmt::Debug for UserSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

/// Per-user success flags for one slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Reception {
    k: usize,
    ok: UserSet,
}

impl Reception {
    pub fn new(k: usize, ok: UserSet) -> Result<Self> {
        if ok.0 & !UserSet::all(k).0 != 0 {
            return Err(Error::InvalidState(format!(
                "reception mask {:?} exceeds {k} users",
                ok
            )));
        }
        Ok(Reception { k, ok })
    }

    pub fn from_flags(flags: &[bool]) -> Self {
        let ok = UserSet::from_users(flags.iter().enumerate().filter(|(_, &f)| f).map(|(u, _)| u));
        Reception { k: flags.len(), ok }
    }

    pub fn received(&self, u: usize) -> bool {
        self.ok.contains(u)
    }

    pub fn successes(&self) -> UserSet {
        self.ok
    }

    pub fn len(&self) -> usize {
        self.k
    }

    pub fn is_empty(&self) -> bool {
        self.k == 0
    }
}

/// How to choose among equally good candidates (maximum cliques, rows, empty lines).
pub enum TieBreak<'a> {
    /// Lexicographically smallest user set; used by the exact oracle.
    Lexicographic,
    /// Uniform draw from the supplied generator; used in simulation.
    Uniform(&'a mut dyn RngCore),
}

impl TieBreak<'_> {
    /// Picks one of `options`, which must be non-empty.
    pub fn pick_set(&mut self, options: &[UserSet]) -> UserSet {
        match self {
            TieBreak::Lexicographic => *options
                .iter()
                .min_by(|a, b| a.lex_cmp(**b))
                .expect("non-empty candidate list"),
            TieBreak::Uniform(rng) => options[rng.gen_range(0..options.len())],
        }
    }

    pub fn pick_user(&mut self, options: UserSet) -> usize {
        match self {
            TieBreak::Lexicographic => options.first().expect("non-empty candidate set"),
            TieBreak::Uniform(rng) => {
                let n = options.len();
                options.iter().nth(rng.gen_range(0..n)).unwrap()
            }
        }
    }
}

/// Result of one transmission slot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SlotOutcome {
    pub next_state: DetailedState,
    /// Number of intended receivers that decoded this slot.
    pub reward: u32,
    pub decoded: UserSet,
    /// Row rewritten by a failed uncoded transmission, if any.
    pub refreshed_row: Option<usize>,
}

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct DetailedState {
    k: usize,
    mode: StorageMode,
    entries: Vec<u8>,
}

impl DetailedState {
    pub fn empty(k: usize, mode: StorageMode) -> Result<Self> {
        check_dims(k, mode)?;
        Ok(DetailedState {
            k,
            mode,
            entries: vec![0; k * k],
        })
    }

    /// Builds a state from row vectors, validating every invariant.
    pub fn from_rows(mode: StorageMode, rows: &[Vec<u8>]) -> Result<Self> {
        let k = rows.len();
        check_dims(k, mode)?;
        let mut entries = Vec::with_capacity(k * k);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != k {
                return Err(Error::InvalidState(format!(
                    "row {i} has {} entries, expected {k}",
                    row.len()
                )));
            }
            for (j, &v) in row.iter().enumerate() {
                if i == j && v != 0 {
                    return Err(Error::InvalidState(format!("diagonal entry ({i},{i}) is {v}")));
                }
                if v > mode.max_entry() {
                    return Err(Error::InvalidState(format!(
                        "entry ({i},{j}) = {v} exceeds {}",
                        mode.max_entry()
                    )));
                }
                entries.push(v);
            }
        }
        Ok(DetailedState { k, mode, entries })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn mode(&self) -> StorageMode {
        self.mode
    }

    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.entries[i * self.k + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: u8) -> Result<()> {
        if i == j && v != 0 {
            return Err(Error::InvalidState("diagonal must stay zero".into()));
        }
        if v > self.mode.max_entry() {
            return Err(Error::InvalidState(format!("entry {v} exceeds mode bound")));
        }
        self.entries[i * self.k + j] = v;
        Ok(())
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.entries[i * self.k..(i + 1) * self.k]
    }

    pub fn rows(&self) -> Vec<Vec<u8>> {
        (0..self.k).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn is_empty_matrix(&self) -> bool {
        self.entries.iter().all(|&v| v == 0)
    }

    pub fn row_is_empty(&self, i: usize) -> bool {
        self.row(i).iter().all(|&v| v == 0)
    }

    /// Users whose pending packet is stored nowhere.
    pub fn empty_rows(&self) -> UserSet {
        UserSet::from_users((0..self.k).filter(|&i| self.row_is_empty(i)))
    }

    pub fn nonempty_rows(&self) -> UserSet {
        UserSet::all(self.k).difference(self.empty_rows())
    }

    /// `E(s)`: the number of all-zero rows.
    pub fn empty_lines(&self) -> usize {
        self.empty_rows().len()
    }

    /// Mutual-storage adjacency: `j` is in `adj[i]` iff both hold each other's packet.
    fn adjacency(&self) -> Vec<u32> {
        let k = self.k;
        (0..k)
            .map(|i| {
                (0..k)
                    .filter(|&j| j != i && self.get(i, j) > 0 && self.get(j, i) > 0)
                    .fold(0u32, |m, j| m | (1 << j))
            })
            .collect()
    }

    pub fn is_clique(&self, set: UserSet) -> bool {
        let adj = self.adjacency();
        set.iter().all(|u| set.difference(UserSet::singleton(u)).0 & !adj[u] == 0)
    }

    /// All maximum-cardinality cliques.
    ///
    /// Without any mutual pair the maximum cliques are singletons; these are
    /// restricted to non-empty rows when one exists, so that a size-1 "clique"
    /// transmission targets a user whose packet is actually held somewhere.
    pub fn maximum_cliques(&self) -> Vec<UserSet> {
        let adj = self.adjacency();
        let mut search = CliqueSearch::new(&adj);
        search.expand(0, UserSet::all(self.k).0);
        if search.best <= 1 {
            return self.singleton_cliques(self.nonempty_rows());
        }
        search.found
    }

    fn singleton_cliques(&self, preferred: UserSet) -> Vec<UserSet> {
        let pool = if preferred.is_empty() {
            UserSet::all(self.k)
        } else {
            preferred
        };
        pool.iter().map(UserSet::singleton).collect()
    }

    /// `L(s)`: size of the largest clique (at least 1).
    pub fn max_clique_size(&self) -> usize {
        let adj = self.adjacency();
        let mut search = CliqueSearch::new(&adj);
        search.expand(0, UserSet::all(self.k).0);
        search.best.max(1)
    }

    pub fn max_clique(&self, tie: &mut TieBreak<'_>) -> UserSet {
        tie.pick_set(&self.maximum_cliques())
    }

    /// `F(s)`: the smallest strictly positive lifetime, if any entry is positive.
    pub fn oldest_lifetime(&self) -> Option<u8> {
        self.entries.iter().copied().filter(|&v| v > 0).min()
    }

    /// Rows holding an entry equal to `F(s)`.
    pub fn oldest_rows(&self) -> UserSet {
        match self.oldest_lifetime() {
            None => UserSet::EMPTY,
            Some(f) => UserSet::from_users((0..self.k).filter(|&i| self.row(i).contains(&f))),
        }
    }

    /// Maximum cliques among those containing at least one oldest row, with `F`.
    ///
    /// When several rows share the oldest lifetime, `C(s)` is the largest clique
    /// size over all of them, which keeps the aggregate a function of the state.
    pub fn oldest_cliques(&self) -> Result<(u8, Vec<UserSet>)> {
        if !self.mode.is_tte() {
            return Err(Error::ModeMismatch);
        }
        let f = self.oldest_lifetime().ok_or(Error::AllExpired)?;
        let adj = self.adjacency();
        let mut best = 0usize;
        let mut found: Vec<UserSet> = Vec::new();
        for r in self.oldest_rows().iter() {
            let mut search = CliqueSearch::new(&adj);
            search.expand(1 << r, adj[r]);
            let size = search.best;
            if size > best {
                best = size;
                found.clear();
            }
            if size == best {
                for q in search.found {
                    if !found.contains(&q) {
                        found.push(q);
                    }
                }
            }
        }
        Ok((f, found))
    }

    /// `(F(s), clique)`: the oldest lifetime and a maximum clique through an oldest row.
    pub fn clique_with_oldest(&self, tie: &mut TieBreak<'_>) -> Result<(u8, UserSet)> {
        let (f, options) = self.oldest_cliques()?;
        Ok((f, tie.pick_set(&options)))
    }

    /// `C(s)`: size of the largest clique containing an oldest row.
    pub fn oldest_clique_size(&self) -> Result<usize> {
        Ok(self.oldest_cliques()?.1[0].len())
    }

    /// Applies one transmission outcome without aging.
    ///
    /// Every member of `combo` that received decodes and its row is cleared.
    /// A failed uncoded transmission to `u` rewrites row `u`: users that heard
    /// it, or already held the packet, store a fresh copy. Coded packets are
    /// never stored.
    pub fn apply_outcome(&self, combo: UserSet, rx: &Reception) -> Result<SlotOutcome> {
        self.apply_outcome_with(combo, rx, StorageRule::Persist)
    }

    pub fn apply_outcome_with(
        &self,
        combo: UserSet,
        rx: &Reception,
        rule: StorageRule,
    ) -> Result<SlotOutcome> {
        if combo.is_empty() {
            return Err(Error::EmptyCombination);
        }
        if rx.len() != self.k || combo.0 & !UserSet::all(self.k).0 != 0 {
            return Err(Error::InvalidState("reception or combination size mismatch".into()));
        }
        if combo.len() > 1 && !self.is_clique(combo) {
            return Err(Error::NotAClique(combo.to_vec()));
        }
        let mut next = self.clone();
        let decoded = combo.intersection(rx.successes());
        for u in decoded.iter() {
            next.entries[u * self.k..(u + 1) * self.k].fill(0);
        }
        let mut refreshed_row = None;
        if combo.len() == 1 && decoded.is_empty() {
            let u = combo.first().unwrap();
            let fresh = self.mode.fresh();
            for j in (0..self.k).filter(|&j| j != u) {
                let holds = self.get(u, j) > 0;
                let keep = match (self.mode, rule) {
                    (StorageMode::Binary, StorageRule::FreshOnly) => false,
                    _ => holds,
                };
                next.entries[u * self.k + j] = if rx.received(j) || keep { fresh } else { 0 };
            }
            refreshed_row = Some(u);
        }
        Ok(SlotOutcome {
            next_state: next,
            reward: decoded.len() as u32,
            decoded,
            refreshed_row,
        })
    }

    /// Decrements every strictly positive lifetime by one.
    pub fn age_tte(&self) -> Result<DetailedState> {
        self.age_except(None)
    }

    fn age_except(&self, skip_row: Option<usize>) -> Result<DetailedState> {
        if !self.mode.is_tte() {
            return Err(Error::ModeMismatch);
        }
        let mut next = self.clone();
        for i in (0..self.k).filter(|&i| Some(i) != skip_row) {
            for v in &mut next.entries[i * self.k..(i + 1) * self.k] {
                *v = v.saturating_sub(1);
            }
        }
        Ok(next)
    }

    /// Full single-slot transition.
    ///
    /// In TTE mode every stored copy that was not rewritten this slot ages by
    /// one; copies rewritten this slot start the next slot at `T`, so a packet
    /// heard in slot `t` is usable in slots `t+1 ..= t+T`.
    pub fn advance(&self, combo: UserSet, rx: &Reception, rule: StorageRule) -> Result<SlotOutcome> {
        let mut out = self.apply_outcome_with(combo, rx, rule)?;
        if self.mode.is_tte() {
            out.next_state = out.next_state.age_except(out.refreshed_row)?;
        }
        Ok(out)
    }
}

fn check_dims(k: usize, mode: StorageMode) -> Result<()> {
    if !(2..=MAX_USERS).contains(&k) {
        return Err(Error::InvalidState(format!(
            "user count {k} outside 2..={MAX_USERS}"
        )));
    }
    if mode == StorageMode::Tte(0) {
        return Err(Error::InvalidState("TTE must be at least 1".into()));
    }
    Ok(())
}

impl fmt::Debug for DetailedState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DetailedState({:?}, [", self.mode)?;
        for i in 0..self.k {
            if i > 0 {
                write!(f, "; ")?;
            }
            let row: Vec<String> = self.row(i).iter().map(|v| v.to_string()).collect();
            write!(f, "{}", row.join(" "))?;
        }
        write!(f, "])")
    }
}

/// Branch-and-bound enumeration of maximum cliques over bit masks.
struct CliqueSearch<'a> {
    adj: &'a [u32],
    best: usize,
    found: Vec<UserSet>,
}

impl<'a> CliqueSearch<'a> {
    fn new(adj: &'a [u32]) -> Self {
        CliqueSearch {
            adj,
            best: 0,
            found: Vec::new(),
        }
    }

    /// Records every clique of the current best size; `candidates` are the
    /// vertices adjacent to all of `current` that may still be added.
    fn expand(&mut self, current: u32, mut candidates: u32) {
        let size = current.count_ones() as usize;
        if size > self.best {
            self.best = size;
            self.found.clear();
        }
        if size == self.best && size > 0 {
            self.found.push(UserSet(current));
        }
        while candidates != 0 {
            if size + (candidates.count_ones() as usize) < self.best {
                return;
            }
            let v = candidates.trailing_zeros() as usize;
            candidates &= candidates - 1;
            // Only later candidates are offered, so each clique is produced once.
            self.expand(current | 1 << v, candidates & self.adj[v]);
        }
    }
}
