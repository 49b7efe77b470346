use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::ndcore::Matrix;

/// Anchor-duplication baselines.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AnchorKind {
    #[serde(rename = "RAA_y")]
    RaaY,
    #[serde(rename = "RAA_a")]
    RaaA,
    #[serde(rename = "NRAA_y")]
    NraaY,
    #[serde(rename = "NRAA_a")]
    NraaA,
}

impl AnchorKind {
    pub const ALL: [AnchorKind; 4] = [AnchorKind::RaaY, AnchorKind::RaaA, AnchorKind::NraaY, AnchorKind::NraaA];

    pub fn name(self) -> &'static str {
        match self {
            AnchorKind::RaaY => "RAA_y",
            AnchorKind::RaaA => "RAA_a",
            AnchorKind::NraaY => "NRAA_y",
            AnchorKind::NraaA => "NRAA_a",
        }
    }

    fn neighbor_based(self) -> bool {
        matches!(self, AnchorKind::NraaY | AnchorKind::NraaA)
    }

    fn flips_label(self) -> bool {
        matches!(self, AnchorKind::RaaY | AnchorKind::NraaY)
    }
}

impl fmt::Display for AnchorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AnchorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        AnchorKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(&s.replace('-', "_")))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown anchor attack `{s}`")))
    }
}

/// The two anchor subgroups: `(y = 1, a = 0)` and `(y = 0, a = 1)`.
const ROLES: [(u8, usize); 2] = [(1, 0), (0, 1)];

/// Anchor attack state across epochs.
#[derive(Clone, Debug)]
pub struct AnchorAttack {
    kind: AnchorKind,
    budget: usize,
    members: [Vec<usize>; 2],
    /// NRAA: members ranked by neighbor count (desc), ties by index.
    ranking: [Vec<usize>; 2],
    cursor: [usize; 2],
    rng: ChaCha8Rng,
    anchors: [usize; 2],
    history: Vec<[usize; 2]>,
}

/// Number of same-subgroup rows of `rows` within Euclidean distance `tau` of each.
pub fn neighbor_counts(x: &Matrix, rows: &[usize], tau: f64) -> Vec<usize> {
    let t2 = tau * tau;
    let mut counts = vec![0usize; rows.len()];
    for i in 0..rows.len() {
        let xi = x.row(rows[i]);
        for j in i + 1..rows.len() {
            let d2: f64 = xi.iter().zip(x.row(rows[j])).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2 <= t2 {
                counts[i] += 1;
                counts[j] += 1;
            }
        }
    }
    counts
}

impl AnchorAttack {
    /// Picks the first pair of anchors from `pool`.
    pub fn new(kind: AnchorKind, pool: &Dataset, budget: usize, tau: f64, seed: u64) -> Result<Self> {
        if pool.sensitive_classes() != 2 {
            return Err(Error::InvalidConfig(
                "anchor attacks need a binary sensitive attribute".into(),
            ));
        }
        if !(tau >= 0.0) {
            return Err(Error::InvalidConfig("neighbor radius must be non-negative".into()));
        }
        let members = ROLES.map(|(y, a)| {
            (0..pool.len())
                .filter(|&i| pool.y()[i] == y && pool.a()[i] == a)
                .collect::<Vec<_>>()
        });
        for (r, m) in members.iter().enumerate() {
            if m.is_empty() {
                let (y, a) = ROLES[r];
                return Err(Error::MissingSubgroup { y, a });
            }
        }
        let ranking = if kind.neighbor_based() {
            [0, 1].map(|r| {
                let counts = neighbor_counts(pool.x(), &members[r], tau);
                let mut order: Vec<usize> = (0..members[r].len()).collect();
                // stable sort keeps lowest index first among equal counts
                order.sort_by(|&i, &j| counts[j].cmp(&counts[i]));
                order.into_iter().map(|i| members[r][i]).collect()
            })
        } else {
            [Vec::new(), Vec::new()]
        };
        let mut attack = AnchorAttack {
            kind,
            budget,
            members,
            ranking,
            cursor: [0, 0],
            rng: ChaCha8Rng::seed_from_u64(seed),
            anchors: [0, 0],
            history: Vec::new(),
        };
        attack.reselect();
        Ok(attack)
    }

    pub fn kind(&self) -> AnchorKind {
        self.kind
    }

    pub fn anchors(&self) -> [usize; 2] {
        self.anchors
    }

    /// Every anchor pair used so far, oldest first.
    pub fn history(&self) -> &[[usize; 2]] {
        &self.history
    }

    /// Draws the next anchor pair. NRAA walks down the neighbor ranking and
    /// restarts from the top only after every member has been used.
    pub fn reselect(&mut self) {
        for r in 0..2 {
            self.anchors[r] = if self.kind.neighbor_based() {
                let rank = &self.ranking[r];
                let pick = rank[self.cursor[r] % rank.len()];
                self.cursor[r] += 1;
                pick
            } else {
                *self.members[r]
                    .choose(&mut self.rng)
                    .expect("subgroup checked non-empty")
            };
        }
        self.history.push(self.anchors);
    }

    /// Copy counts for the two roles: the first gets the odd one out.
    pub fn split_budget(&self) -> [usize; 2] {
        [self.budget.div_ceil(2), self.budget / 2]
    }

    /// The `budget` flipped copies of the current anchors.
    pub fn copies(&self, pool: &Dataset) -> (Matrix, Vec<usize>, Vec<u8>) {
        let counts = self.split_budget();
        let mut rows = Vec::with_capacity(self.budget);
        let mut a = Vec::with_capacity(self.budget);
        let mut y = Vec::with_capacity(self.budget);
        for r in 0..2 {
            let src = self.anchors[r];
            for _ in 0..counts[r] {
                rows.push(src);
                if self.kind.flips_label() {
                    y.push(1 - pool.y()[src]);
                    a.push(pool.a()[src]);
                } else {
                    y.push(pool.y()[src]);
                    a.push(1 - pool.a()[src]);
                }
            }
        }
        (pool.x().select_rows(&rows), a, y)
    }

    /// `base` followed by the anchor copies.
    pub fn poisoned(&self, base: &Dataset, pool: &Dataset) -> Result<Dataset> {
        let (cx, ca, cy) = self.copies(pool);
        if self.budget == 0 {
            return Ok(base.clone());
        }
        let x = stack(base.x(), &cx)?;
        let mut a = base.a().to_vec();
        a.extend(ca);
        let mut y = base.y().to_vec();
        y.extend(cy);
        base.with_rows(x, a, y)
    }
}

fn stack(top: &Matrix, bottom: &Matrix) -> Result<Matrix> {
    if top.cols() != bottom.cols() {
        return Err(Error::ShapeMismatch {
            op: "stack",
            lhs: top.shape(),
            rhs: bottom.shape(),
        });
    }
    let mut data = top.data().to_vec();
    data.extend_from_slice(bottom.data());
    Ok(Matrix::from_vec(top.rows() + bottom.rows(), top.cols(), data))
}

/// Chooses anchors from `pool` and returns `base` plus `budget` flipped copies,
/// together with the attack state for per-epoch reselection.
pub fn craft_anchor(
    kind: AnchorKind,
    pool: &Dataset,
    base: &Dataset,
    budget: usize,
    tau: f64,
    seed: u64,
) -> Result<(Dataset, AnchorAttack)> {
    let attack = AnchorAttack::new(kind, pool, budget, tau, seed)?;
    let data = attack.poisoned(base, pool)?;
    Ok((data, attack))
}
