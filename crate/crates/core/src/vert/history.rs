use std::collections::{BTreeMap, VecDeque};

use crate::error::{Error, Result};
use crate::tensor::Vector;

#[derive(Debug, Clone, PartialEq)]
struct UserEntry {
    round: usize,
    /// `None` once the entry has been flagged; readers then fall back to the
    /// round's global gradient.
    grad: Option<Vector>,
}

/// Sliding window of the last `m` rounds: each user's uploaded gradient and
/// the global gradient of the round.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryStore {
    window: usize,
    users: BTreeMap<usize, VecDeque<UserEntry>>,
    global: VecDeque<(usize, Vector)>,
}

impl HistoryStore {
    pub fn new(window: usize) -> Result<Self> {
        if window < 2 {
            return Err(Error::InvalidArgument(format!(
                "history window must be at least 2, got {window}"
            )));
        }
        Ok(Self {
            window,
            users: BTreeMap::new(),
            global: VecDeque::new(),
        })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// Commits round `round`: `(user, gradient, flagged)` for every user that
    /// uploaded, plus the round's global gradient. Rounds must increase.
    pub fn record_round<'a, I>(&mut self, round: usize, uploads: I, global: Vector) -> Result<()>
    where
        I: IntoIterator<Item = (usize, &'a Vector, bool)>,
    {
        if let Some(last) = self.latest_round() {
            if round <= last {
                return Err(Error::InvalidArgument(format!(
                    "history rounds must increase: got {round} after {last}"
                )));
            }
        }
        for (user, grad, flagged) in uploads {
            let entry = UserEntry {
                round,
                grad: (!flagged).then(|| grad.clone()),
            };
            self.users.entry(user).or_default().push_back(entry);
        }
        self.global.push_back((round, global));
        self.evict(round);
        Ok(())
    }

    fn evict(&mut self, newest: usize) {
        let oldest_kept = (newest + 1).saturating_sub(self.window);
        while self.global.front().is_some_and(|(r, _)| *r < oldest_kept) {
            self.global.pop_front();
        }
        self.users.retain(|_, buf| {
            while buf.front().is_some_and(|e| e.round < oldest_kept) {
                buf.pop_front();
            }
            !buf.is_empty()
        });
    }

    /// Marks `user`'s upload in `round` as malicious.
    pub fn flag(&mut self, user: usize, round: usize) -> Result<()> {
        let entry = self
            .users
            .get_mut(&user)
            .and_then(|b| b.iter_mut().find(|e| e.round == round))
            .ok_or(Error::OutsideWindow { round })?;
        entry.grad = None;
        Ok(())
    }

    pub fn latest_round(&self) -> Option<usize> {
        self.global.back().map(|(r, _)| *r)
    }

    /// Rounds currently held, ascending.
    pub fn rounds(&self) -> impl Iterator<Item = usize> + '_ {
        self.global.iter().map(|(r, _)| *r)
    }

    pub fn global(&self, round: usize) -> Option<&Vector> {
        self.global.iter().find(|(r, _)| *r == round).map(|(_, g)| g)
    }

    /// True if `user` uploaded in `round` and was flagged.
    pub fn is_flagged(&self, user: usize, round: usize) -> bool {
        self.users
            .get(&user)
            .and_then(|b| b.iter().find(|e| e.round == round))
            .is_some_and(|e| e.grad.is_none())
    }

    /// The user's gradient for `round`, or that round's global gradient when
    /// the user was absent or flagged.
    pub fn resolve(&self, user: usize, round: usize) -> Result<&Vector> {
        let global = self.global(round).ok_or(Error::OutsideWindow { round })?;
        let own = self
            .users
            .get(&user)
            .and_then(|b| b.iter().find(|e| e.round == round))
            .and_then(|e| e.grad.as_ref());
        Ok(own.unwrap_or(global))
    }

    /// Number of `f64` values held.
    pub fn stored_values(&self) -> usize {
        let users: usize = self
            .users
            .values()
            .flat_map(|b| b.iter())
            .filter_map(|e| e.grad.as_ref().map(|g| g.len()))
            .sum();
        users + self.global.iter().map(|(_, g)| g.len()).sum::<usize>()
    }
}
