use ndarray::{Array1, Array2, ArrayView1, Axis};

use crate::error::{Error, Result};

/// Responsibilities are clamped to this value inside `r log r`.
pub const ENTROPY_FLOOR: f64 = 1e-12;

/// Soft cluster assignments for a batch; rows sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    pub r: Array2<f64>,
}

impl Responsibilities {
    pub fn rows(&self) -> usize {
        self.r.nrows()
    }

    pub fn k(&self) -> usize {
        self.r.ncols()
    }

    /// Index of the most responsible cluster for each row.
    pub fn argmax(&self) -> Vec<usize> {
        self.r
            .rows()
            .into_iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (k, &v)| {
                        if v > best.1 {
                            (k, v)
                        } else {
                            best
                        }
                    })
                    .0
            })
            .collect()
    }

    pub fn max_per_row(&self) -> Vec<f64> {
        self.r
            .rows()
            .into_iter()
            .map(|row| row.iter().copied().fold(0.0, f64::max))
            .collect()
    }
}

pub(crate) fn neg_r_log_r(r: f64) -> f64 {
    if r <= 0.0 {
        0.0
    } else {
        -r * r.max(ENTROPY_FLOOR).ln()
    }
}

/// Memoizable summary of a batch under a set of responsibilities.
///
/// `comp_entropy[k] = −Σₙ r_nk log r_nk`. `pair_entropy_delta[(a, b)]` holds
/// the change in assignment entropy if clusters `a` and `b` were fused:
/// `Σₙ [−(r_na + r_nb) log(r_na + r_nb) + r_na log r_na + r_nb log r_nb]`.
/// Entries become NaN once a merge makes them unknowable.
#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats {
    pub n_hat: Array1<f64>,
    pub s1: Array2<f64>,
    pub s2: Array2<f64>,
    pub comp_entropy: Array1<f64>,
    pub pair_entropy_delta: Array2<f64>,
    pub count: usize,
}

impl SufficientStats {
    pub fn zeros(k: usize, d: usize) -> Self {
        Self {
            n_hat: Array1::zeros(k),
            s1: Array2::zeros((k, d)),
            s2: Array2::zeros((k, d)),
            comp_entropy: Array1::zeros(k),
            pair_entropy_delta: Array2::zeros((k, k)),
            count: 0,
        }
    }

    pub fn k(&self) -> usize {
        self.n_hat.len()
    }

    pub fn dim(&self) -> usize {
        self.s1.ncols()
    }

    /// Total assignment entropy −ΣₙΣₖ r log r.
    pub fn entropy(&self) -> f64 {
        self.comp_entropy.sum()
    }

    pub fn add_assign(&mut self, other: &SufficientStats) -> Result<()> {
        if self.k() != other.k() || self.dim() != other.dim() {
            return Err(Error::Shape(format!(
                "cannot add stats with (K, D) = ({}, {}) to ({}, {})",
                other.k(),
                other.dim(),
                self.k(),
                self.dim()
            )));
        }
        self.n_hat += &other.n_hat;
        self.s1 += &other.s1;
        self.s2 += &other.s2;
        self.comp_entropy += &other.comp_entropy;
        self.pair_entropy_delta += &other.pair_entropy_delta;
        self.count += other.count;
        Ok(())
    }

    /// Sum of several batch summaries.
    pub fn sum<'a>(parts: impl IntoIterator<Item = &'a SufficientStats>) -> Result<Self> {
        let mut iter = parts.into_iter();
        let first = iter
            .next()
            .ok_or_else(|| Error::Contract("summing an empty set of stats".into()))?;
        let mut total = first.clone();
        for part in iter {
            total.add_assign(part)?;
        }
        Ok(total)
    }

    /// Append `extra` empty clusters.
    pub fn pad(&self, extra: usize) -> Self {
        let k = self.k();
        let d = self.dim();
        let mut out = Self::zeros(k + extra, d);
        out.n_hat.slice_mut(ndarray::s![..k]).assign(&self.n_hat);
        out.s1.slice_mut(ndarray::s![..k, ..]).assign(&self.s1);
        out.s2.slice_mut(ndarray::s![..k, ..]).assign(&self.s2);
        out.comp_entropy
            .slice_mut(ndarray::s![..k])
            .assign(&self.comp_entropy);
        out.pair_entropy_delta
            .slice_mut(ndarray::s![..k, ..k])
            .assign(&self.pair_entropy_delta);
        out.count = self.count;
        out
    }

    /// Reorder (or subset) clusters.
    pub fn select(&self, order: &[usize]) -> Self {
        Self {
            n_hat: self.n_hat.select(Axis(0), order),
            s1: self.s1.select(Axis(0), order),
            s2: self.s2.select(Axis(0), order),
            comp_entropy: self.comp_entropy.select(Axis(0), order),
            pair_entropy_delta: self
                .pair_entropy_delta
                .select(Axis(0), order)
                .select(Axis(1), order),
            count: self.count,
        }
    }

    /// Stats after fusing cluster `b` into cluster `a` (`a < b`); cluster `b`
    /// is removed. Returns `None` when the pair's entropy change is unknown.
    pub fn merged(&self, a: usize, b: usize) -> Option<Self> {
        assert!(a < b && b < self.k());
        let delta = self.pair_entropy_delta[(a, b)];
        if !delta.is_finite() {
            return None;
        }
        let mut out = self.clone();
        out.n_hat[a] += self.n_hat[b];
        let sb1 = self.s1.row(b).to_owned();
        let sb2 = self.s2.row(b).to_owned();
        out.s1.row_mut(a).scaled_add(1.0, &sb1);
        out.s2.row_mut(a).scaled_add(1.0, &sb2);
        out.comp_entropy[a] = self.comp_entropy[a] + self.comp_entropy[b] + delta;
        for c in 0..self.k() {
            if c != a {
                out.pair_entropy_delta[(a, c)] = f64::NAN;
                out.pair_entropy_delta[(c, a)] = f64::NAN;
            }
        }
        let keep: Vec<usize> = (0..self.k()).filter(|&c| c != b).collect();
        Some(out.select(&keep))
    }

    pub(crate) fn accumulate_row(&mut self, x: ArrayView1<f64>, r: ArrayView1<f64>) {
        let k = self.k();
        for c in 0..k {
            let w = r[c];
            if w == 0.0 {
                continue;
            }
            self.n_hat[c] += w;
            let mut s1 = self.s1.row_mut(c);
            for (acc, &xv) in s1.iter_mut().zip(x.iter()) {
                *acc += w * xv;
            }
            let mut s2 = self.s2.row_mut(c);
            for (acc, &xv) in s2.iter_mut().zip(x.iter()) {
                *acc += w * xv * xv;
            }
            self.comp_entropy[c] += neg_r_log_r(w);
        }
        // Pair terms vanish unless both responsibilities are non-negligible.
        let active: Vec<usize> = (0..k).filter(|&c| r[c] > ENTROPY_FLOOR).collect();
        for (i, &a) in active.iter().enumerate() {
            for &b in &active[i + 1..] {
                let delta = neg_r_log_r(r[a] + r[b]) - neg_r_log_r(r[a]) - neg_r_log_r(r[b]);
                self.pair_entropy_delta[(a, b)] += delta;
                self.pair_entropy_delta[(b, a)] += delta;
            }
        }
        self.count += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn stats_of(x: &Array2<f64>, r: &Array2<f64>) -> SufficientStats {
        let mut s = SufficientStats::zeros(r.ncols(), x.ncols());
        for (xr, rr) in x.rows().into_iter().zip(r.rows()) {
            s.accumulate_row(xr, rr);
        }
        s
    }

    #[test]
    fn merged_entropy_matches_direct_fusion() {
        let x = array![[0.0], [1.0], [2.0], [3.0]];
        let r = array![
            [0.7, 0.2, 0.1],
            [0.1, 0.5, 0.4],
            [0.3, 0.3, 0.4],
            [0.0, 0.9, 0.1]
        ];
        let s = stats_of(&x, &r);
        let merged = s.merged(1, 2).unwrap();
        let fused = array![[0.7, 0.3], [0.1, 0.9], [0.3, 0.7], [0.0, 1.0]];
        let direct = stats_of(&x, &fused);
        assert!((merged.entropy() - direct.entropy()).abs() < 1e-12);
        assert!((&merged.n_hat - &direct.n_hat).iter().all(|v| v.abs() < 1e-12));
        assert!((&merged.s2 - &direct.s2).iter().all(|v| v.abs() < 1e-12));
        // the fused cluster cannot be merged again from these stats
        assert!(merged.merged(0, 1).is_none());
    }

    #[test]
    fn argmax_picks_largest() {
        let r = Responsibilities {
            r: array![[0.2, 0.8], [0.6, 0.4]],
        };
        assert_eq!(r.argmax(), vec![1, 0]);
        assert_eq!(r.max_per_row(), vec![0.8, 0.6]);
    }
}
