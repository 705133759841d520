//! Attention visibility masks over a `2K`-token context.
//!
//! Three rules are layered: causal visibility, exclusion of each `y` token's
//! own `(x, a)` token, and random dropping of whole preceding pairs per
//! query row.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MaskError {
    #[error("pair ({0}, {1}) is malformed for a {2}-token mask")]
    MalformedPair(usize, usize, usize),
    #[error("drop probability {0} outside [0, 1]")]
    BadProbability(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    pub p: f64,
    pub enable_pair_exclusion: bool,
    pub enable_random_drop: bool,
    /// One drop decision per pair shared by every later row, instead of
    /// independent draws per row.
    pub shared_draw: bool,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            p: 0.9,
            enable_pair_exclusion: true,
            enable_random_drop: true,
            shared_draw: false,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<(), MaskError> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(MaskError::BadProbability(self.p));
        }
        Ok(())
    }

    /// Deterministic evaluation mask rules: no random dropping.
    pub fn evaluation(&self) -> MaskConfig {
        MaskConfig {
            enable_random_drop: false,
            ..self.clone()
        }
    }
}

/// `visible[row * n + col]`: may query token `row` attend to key token `col`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskMatrix {
    n: usize,
    visible: Vec<bool>,
}

impl MaskMatrix {
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> bool) -> MaskMatrix {
        let mut visible = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                visible.push(f(i, j));
            }
        }
        MaskMatrix { n, visible }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.visible[row * self.n + col]
    }

    #[inline]
    fn set(&mut self, row: usize, col: usize, v: bool) {
        self.visible[row * self.n + col] = v;
    }

    pub fn row(&self, row: usize) -> &[bool] {
        &self.visible[row * self.n..(row + 1) * self.n]
    }

    pub fn count_visible(&self) -> usize {
        self.visible.iter().filter(|v| **v).count()
    }

    /// `#` for visible, `.` for hidden; one line per query row.
    pub fn to_ascii(&self) -> String {
        let mut s = String::with_capacity(self.n * (self.n + 1));
        for i in 0..self.n {
            for j in 0..self.n {
                s.push(if self.get(i, j) { '#' } else { '.' });
            }
            s.push('\n');
        }
        s
    }

    /// Plain (P1) PBM image; visible cells are black.
    pub fn to_pbm(&self) -> Vec<u8> {
        let mut s = String::new();
        let _ = write!(s, "P1\n{} {}\n", self.n, self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                if j > 0 {
                    s.push(' ');
                }
                s.push(if self.get(i, j) { '1' } else { '0' });
            }
            s.push('\n');
        }
        s.into_bytes()
    }
}

/// Lower-triangular (inclusive) visibility.
pub fn causal_mask(n: usize) -> MaskMatrix {
    MaskMatrix::from_fn(n, |i, j| j <= i)
}

/// Standard pair map for `k` pairs laid out as `(2i, 2i + 1)`.
pub fn standard_pairs(k: usize) -> Vec<(usize, usize)> {
    (0..k).map(|i| (2 * i, 2 * i + 1)).collect()
}

fn check_pairs(n: usize, pairs: &[(usize, usize)]) -> Result<(), MaskError> {
    for &(a, y) in pairs {
        if a >= y || y >= n {
            return Err(MaskError::MalformedPair(a, y, n));
        }
    }
    Ok(())
}

/// Hides each pair's `(x, a)` token from its `y` token.
pub fn pair_exclusion(
    mask: &MaskMatrix,
    pairs: &[(usize, usize)],
) -> Result<MaskMatrix, MaskError> {
    check_pairs(mask.n, pairs)?;
    let mut out = mask.clone();
    for &(a, y) in pairs {
        out.set(y, a, false);
    }
    Ok(out)
}

/// Randomly hides whole preceding pairs, independently per query row.
///
/// Draw order: rows ascending, and for each row the pairs that end strictly
/// before it in `pairs` order, one uniform draw each. The number of draws
/// does not depend on `p`.
pub fn random_pair_drop<R: Rng + ?Sized>(
    mask: &MaskMatrix,
    pairs: &[(usize, usize)],
    p: f64,
    rng: &mut R,
) -> Result<MaskMatrix, MaskError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(MaskError::BadProbability(p));
    }
    check_pairs(mask.n, pairs)?;
    let mut out = mask.clone();
    for i in 0..mask.n {
        for &(a, y) in pairs {
            if y >= i {
                continue;
            }
            let u: f64 = rng.gen();
            if u < p {
                out.set(i, a, false);
                out.set(i, y, false);
            }
        }
    }
    Ok(out)
}

/// Variant with one draw per pair applied to every later row.
pub fn shared_pair_drop<R: Rng + ?Sized>(
    mask: &MaskMatrix,
    pairs: &[(usize, usize)],
    p: f64,
    rng: &mut R,
) -> Result<MaskMatrix, MaskError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(MaskError::BadProbability(p));
    }
    check_pairs(mask.n, pairs)?;
    let mut out = mask.clone();
    for &(a, y) in pairs {
        let u: f64 = rng.gen();
        if u < p {
            for i in y + 1..mask.n {
                out.set(i, a, false);
                out.set(i, y, false);
            }
        }
    }
    Ok(out)
}

/// Causal, then pair exclusion, then random pair dropping, per the flags.
pub fn compose<R: Rng + ?Sized>(
    cfg: &MaskConfig,
    k: usize,
    rng: &mut R,
) -> Result<MaskMatrix, MaskError> {
    cfg.validate()?;
    let pairs = standard_pairs(k);
    let mut m = causal_mask(2 * k);
    if cfg.enable_pair_exclusion {
        m = pair_exclusion(&m, &pairs)?;
    }
    if cfg.enable_random_drop {
        m = if cfg.shared_draw {
            shared_pair_drop(&m, &pairs, cfg.p, rng)?
        } else {
            random_pair_drop(&m, &pairs, cfg.p, rng)?
        };
    }
    Ok(m)
}

/// Evaluation mask: `2K` context tokens under causal + pair exclusion, then
/// `q` query tokens that each see the whole context and themselves only.
pub fn query_mask(k: usize, q: usize, pair_exclusion_on: bool) -> MaskMatrix {
    let n_ctx = 2 * k;
    MaskMatrix::from_fn(n_ctx + q, |i, j| {
        if i < n_ctx {
            j <= i && !(pair_exclusion_on && i % 2 == 1 && j + 1 == i)
        } else {
            j < n_ctx || j == i
        }
    })
}

/// Row-wise pair consistency: for every row and every pair ending before
/// it, both pair columns share one visibility value.
pub fn is_pair_consistent(m: &MaskMatrix, pairs: &[(usize, usize)]) -> bool {
    (0..m.n).all(|i| {
        pairs
            .iter()
            .filter(|(_, y)| *y < i)
            .all(|&(a, y)| m.get(i, a) == m.get(i, y))
    })
}

/// Diagonal visible, strictly-upper triangle hidden.
pub fn is_causal(m: &MaskMatrix) -> bool {
    (0..m.n).all(|i| m.get(i, i) && (i + 1..m.n).all(|j| !m.get(i, j)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rows(m: &MaskMatrix) -> Vec<Vec<usize>> {
        (0..m.size())
            .map(|i| (0..m.size()).filter(|&j| m.get(i, j)).collect())
            .collect()
    }

    #[test]
    fn causal_examples() {
        assert_eq!(rows(&causal_mask(1)), vec![vec![0]]);
        assert_eq!(rows(&causal_mask(4))[2], vec![0, 1, 2]);
        assert_eq!(causal_mask(8).count_visible(), 36);
        assert_eq!(causal_mask(0).size(), 0);
    }

    #[test]
    fn pair_exclusion_examples() {
        let m = pair_exclusion(&causal_mask(2), &standard_pairs(1)).unwrap();
        assert_eq!(rows(&m)[1], vec![1]);
        let m = pair_exclusion(&causal_mask(4), &standard_pairs(2)).unwrap();
        assert!(!m.get(3, 2));
        assert!(m.get(3, 0) && m.get(3, 1));
        let twice = pair_exclusion(&m, &standard_pairs(2)).unwrap();
        assert_eq!(twice, m);
        assert!(pair_exclusion(&m, &[(3, 2)]).is_err());
        assert!(pair_exclusion(&m, &[(2, 4)]).is_err());
    }

    #[test]
    fn drop_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let base = pair_exclusion(&causal_mask(8), &standard_pairs(4)).unwrap();
        let same = random_pair_drop(&base, &standard_pairs(4), 0.0, &mut rng).unwrap();
        assert_eq!(same, base);
        let all = random_pair_drop(&base, &standard_pairs(4), 1.0, &mut rng).unwrap();
        for i in 0..8 {
            assert_eq!(rows(&all)[i], vec![i]);
        }
        assert!(random_pair_drop(&base, &standard_pairs(4), 1.5, &mut rng).is_err());
    }

    #[test]
    fn compose_k2_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = MaskConfig {
            p: 0.0,
            ..MaskConfig::default()
        };
        let m = compose(&cfg, 2, &mut rng).unwrap();
        assert_eq!(
            rows(&m),
            vec![vec![0], vec![1], vec![0, 1, 2], vec![0, 1, 3]]
        );
    }

    #[test]
    fn flags_off_is_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = MaskConfig {
            p: 0.7,
            enable_pair_exclusion: false,
            enable_random_drop: false,
            shared_draw: false,
        };
        assert_eq!(compose(&cfg, 5, &mut rng).unwrap(), causal_mask(10));
        let m = compose(&cfg, 3, &mut rng).unwrap();
        assert!(m.get(1, 0) && m.get(3, 2) && m.get(5, 4));
    }

    #[test]
    fn shared_draw_is_row_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = MaskConfig {
            p: 0.5,
            shared_draw: true,
            ..MaskConfig::default()
        };
        for _ in 0..50 {
            let m = compose(&cfg, 6, &mut rng).unwrap();
            for (a, y) in standard_pairs(6) {
                let seen: Vec<bool> = (y + 1..12).map(|i| m.get(i, a)).collect();
                assert!(seen.windows(2).all(|w| w[0] == w[1]));
            }
        }
    }

    #[test]
    fn query_mask_layout() {
        let m = query_mask(2, 3, true);
        assert_eq!(rows(&m)[3], vec![0, 1, 3]);
        assert_eq!(rows(&m)[4], vec![0, 1, 2, 3, 4]);
        assert_eq!(rows(&m)[6], vec![0, 1, 2, 3, 6]);
        let m = query_mask(0, 2, true);
        assert_eq!(rows(&m), vec![vec![0], vec![1]]);
    }

    #[test]
    fn ascii_and_pbm() {
        let m = causal_mask(2);
        assert_eq!(m.to_ascii(), "#.\n##\n");
        assert_eq!(m.to_pbm(), b"P1\n2 2\n1 0\n1 1\n".to_vec());
    }
}
