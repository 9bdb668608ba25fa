//! Permutation sets for the jigsaw task.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;

pub type Perm = [u8; 9];

pub const IDENTITY: Perm = [0, 1, 2, 3, 4, 5, 6, 7, 8];
pub const DEFAULT_POOL: usize = 10_000;
const FACTORIAL_9: usize = 362_880;

/// Ordered permutations of the nine tiles; the position in the list is the
/// class label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PermutationSet {
    perms: Vec<Perm>,
    /// `None` for sets read from a file.
    seed: Option<u64>,
    /// `None` for a singleton set.
    min_hamming: Option<usize>,
}

pub fn hamming(a: &Perm, b: &Perm) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

fn min_pairwise(perms: &[Perm]) -> Option<usize> {
    let mut best = None;
    for (i, a) in perms.iter().enumerate() {
        for b in &perms[i + 1..] {
            let d = hamming(a, b);
            best = Some(best.map_or(d, |m: usize| m.min(d)));
        }
    }
    best
}

fn random_perm(rng: &mut Rng) -> Perm {
    let mut p = IDENTITY;
    rng.shuffle(&mut p);
    p
}

/// Greedy max-min Hamming selection.
///
/// The set starts from the identity. Each step adds the pool member whose
/// minimum distance to the current set is largest, lexicographically
/// smallest on ties. The pool holds `pool` distinct non-identity
/// permutations drawn from `seed`.
pub fn generate_permutation_set(size: usize, pool: usize, seed: u64) -> Result<PermutationSet> {
    if size == 0 || size > FACTORIAL_9 {
        return Err(Error::contract(format!("permutation set size {size} outside 1..=9!")));
    }
    if size > pool + 1 {
        return Err(Error::contract(format!(
            "permutation set size {size} exceeds pool {pool} plus the identity"
        )));
    }
    if pool >= FACTORIAL_9 {
        return Err(Error::contract(format!("pool {pool} must be below 9! = {FACTORIAL_9}")));
    }
    let mut rng = Rng::new(seed);
    let mut seen = HashSet::with_capacity(pool + 1);
    seen.insert(IDENTITY);
    let mut candidates = Vec::with_capacity(pool);
    while candidates.len() < pool {
        let p = random_perm(&mut rng);
        if seen.insert(p) {
            candidates.push(p);
        }
    }
    candidates.sort_unstable();

    let mut perms = vec![IDENTITY];
    let mut dist: Vec<usize> = candidates.iter().map(|c| hamming(c, &IDENTITY)).collect();
    let mut taken = vec![false; candidates.len()];
    while perms.len() < size {
        let mut pick: Option<usize> = None;
        for (i, &d) in dist.iter().enumerate() {
            // candidates are sorted, so strict `>` keeps the lexicographically first
            if !taken[i] && pick.is_none_or(|p| d > dist[p]) {
                pick = Some(i);
            }
        }
        let pick = pick.expect("pool larger than the requested set");
        taken[pick] = true;
        let chosen = candidates[pick];
        perms.push(chosen);
        for (d, c) in dist.iter_mut().zip(&candidates) {
            *d = (*d).min(hamming(c, &chosen));
        }
    }
    let min_hamming = min_pairwise(&perms);
    Ok(PermutationSet {
        perms,
        seed: Some(seed),
        min_hamming,
    })
}

impl PermutationSet {
    /// Validates and wraps an explicit list.
    pub fn from_perms(perms: Vec<Perm>) -> Result<Self> {
        if perms.is_empty() {
            return Err(Error::contract("empty permutation set"));
        }
        for (i, p) in perms.iter().enumerate() {
            let mut sorted = *p;
            sorted.sort_unstable();
            if sorted != IDENTITY {
                return Err(Error::contract(format!("entry {i} {p:?} is not a permutation of 0..8")));
            }
        }
        let min_hamming = min_pairwise(&perms);
        if min_hamming == Some(0) {
            return Err(Error::contract("permutation set contains duplicates"));
        }
        Ok(Self {
            perms,
            seed: None,
            min_hamming,
        })
    }

    pub fn len(&self) -> usize {
        self.perms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perms.is_empty()
    }

    pub fn perms(&self) -> &[Perm] {
        &self.perms
    }

    pub fn get(&self, label: usize) -> Option<&Perm> {
        self.perms.get(label)
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn min_hamming(&self) -> Option<usize> {
        self.min_hamming
    }

    /// Label of the identity permutation, if present.
    pub fn identity_index(&self) -> Option<usize> {
        self.perms.iter().position(|p| *p == IDENTITY)
    }

    /// One permutation per line, nine space-separated digits.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for p in &self.perms {
            let line: Vec<String> = p.iter().map(u8::to_string).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut perms = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let digits: Vec<u8> = line
                .split_whitespace()
                .map(|t| t.parse::<u8>())
                .collect::<Result<_, _>>()
                .map_err(|e| Error::contract(format!("line {}: {e}", n + 1)))?;
            let p: Perm = digits
                .try_into()
                .map_err(|d: Vec<u8>| Error::contract(format!("line {}: {} entries, expected 9", n + 1, d.len())))?;
            perms.push(p);
        }
        Self::from_perms(perms)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}
