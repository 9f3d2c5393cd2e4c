//! Dynamic quality sorting of spectra against the proxy.
//!
//! Scores are read off detached token values and only decide an ordering;
//! no gradient flows through them. [`apply_sort`] and [`inverse_sort`] are
//! pure relabelings, so gradients pass through the permuted token values
//! untouched.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::spectral::Spectrum;

/// Per-token cosine similarities of two `N_p×D` matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenCosine {
    pub scores: Vec<f64>,
    /// Pairs where either row had zero norm; their score is 0.
    pub zero_norm_pairs: usize,
}

pub fn token_cosine(a: &Tensor, b: &Tensor) -> Result<TokenCosine> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op: "token_cosine",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut zero_norm_pairs = 0;
    let scores = (0..a.rows())
        .map(|i| {
            let (x, y) = (a.row(i), b.row(i));
            let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
            let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            if nx == 0.0 || ny == 0.0 {
                zero_norm_pairs += 1;
                0.0
            } else {
                (dot / (nx * ny)).clamp(-1.0, 1.0)
            }
        })
        .collect();
    Ok(TokenCosine {
        scores,
        zero_norm_pairs,
    })
}

/// Quality scores and the ranking they induce.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityRanking {
    /// Indexed by [`Spectrum::index`].
    pub scores: [f64; 3],
    /// `order[k]` is the spectrum ranked `k`-th (0 = primary).
    pub order: [Spectrum; 3],
    /// `inverse[s]` is the rank of spectrum `s`.
    pub inverse: [usize; 3],
    pub zero_norm_pairs: usize,
}

impl QualityRanking {
    /// Sorts descending by score; ties keep RGB < NIR < TIR order.
    pub fn from_scores(scores: [f64; 3]) -> Self {
        let mut order = Spectrum::ALL;
        // Stable sort keeps the canonical order among equal scores.
        order.sort_by(|a, b| scores[b.index()].total_cmp(&scores[a.index()]));
        Self::with_order(scores, order)
    }

    /// A ranking with an explicitly chosen order.
    pub fn with_order(scores: [f64; 3], order: [Spectrum; 3]) -> Self {
        let mut inverse = [0; 3];
        for (rank, s) in order.iter().enumerate() {
            inverse[s.index()] = rank;
        }
        Self {
            scores,
            order,
            inverse,
            zero_norm_pairs: 0,
        }
    }

    pub fn identity() -> Self {
        Self::with_order([0.0; 3], Spectrum::ALL)
    }

    pub fn primary(&self) -> Spectrum {
        self.order[0]
    }

    pub fn score(&self, s: Spectrum) -> f64 {
        self.scores[s.index()]
    }
}

/// `Q_s` = mean token cosine between the proxy and spectrum `s`.
pub fn quality_scores(proxy: &Tensor, r: &Tensor, n: &Tensor, t: &Tensor) -> Result<QualityRanking> {
    let mut scores = [0.0; 3];
    let mut zero = 0;
    for (slot, x) in scores.iter_mut().zip([r, n, t]) {
        let c = token_cosine(proxy, x)?;
        *slot = c.scores.iter().sum::<f64>() / c.scores.len().max(1) as f64;
        zero += c.zero_norm_pairs;
    }
    let mut ranking = QualityRanking::from_scores(scores);
    ranking.zero_norm_pairs = zero;
    Ok(ranking)
}

/// Reorders `(r, n, t)` into `(1st, 2nd, 3rd)`.
pub fn apply_sort<T: Clone>(ranking: &QualityRanking, items: [T; 3]) -> [T; 3] {
    ranking.order.map(|s| items[s.index()].clone())
}

/// Restores quality-ordered items to `(r, n, t)`.
pub fn inverse_sort<T: Clone>(ranking: &QualityRanking, items: [T; 3]) -> [T; 3] {
    Spectrum::ALL.map(|s| items[ranking.inverse[s.index()]].clone())
}

/// All six orderings of the three spectra.
pub fn all_orders() -> [[Spectrum; 3]; 6] {
    use Spectrum::*;
    [
        [Rgb, Nir, Tir],
        [Rgb, Tir, Nir],
        [Nir, Rgb, Tir],
        [Nir, Tir, Rgb],
        [Tir, Rgb, Nir],
        [Tir, Nir, Rgb],
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use Spectrum::*;

    #[test]
    fn self_similarity_is_one() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[-3.0, 0.5]]);
        let c = token_cosine(&a, &a).unwrap();
        assert!(c.scores.iter().all(|v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn analytic_pairs() {
        let a = Tensor::from_rows(&[&[1.0, 0.0], &[1.0, 0.0]]);
        let b = Tensor::from_rows(&[&[0.0, 1.0], &[1.0, 1.0]]);
        let c = token_cosine(&a, &b).unwrap();
        assert_eq!(c.scores[0], 0.0);
        assert!((c.scores[1] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn zero_norm_rows_score_zero_and_are_counted() {
        let a = Tensor::from_rows(&[&[0.0, 0.0], &[1.0, 0.0]]);
        let b = Tensor::from_rows(&[&[1.0, 1.0], &[1.0, 0.0]]);
        let c = token_cosine(&a, &b).unwrap();
        assert_eq!(c.scores, vec![0.0, 1.0]);
        assert_eq!(c.zero_norm_pairs, 1);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[3, 2]);
        assert!(token_cosine(&a, &b).is_err());
    }

    #[test]
    fn proxy_equal_to_rgb_ranks_rgb_first() {
        let p = Tensor::from_rows(&[&[1.0, 2.0, -1.0], &[0.3, 0.1, 0.9]]);
        let n = Tensor::from_rows(&[&[-1.0, 0.2, 0.4], &[0.5, -0.7, 0.1]]);
        let t = Tensor::from_rows(&[&[0.2, -0.9, 0.3], &[-0.4, 0.6, 0.2]]);
        let q = quality_scores(&p, &p, &n, &t).unwrap();
        assert_eq!(q.primary(), Rgb);
        assert!((q.score(Rgb) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sort_semantics_and_tie_break() {
        let q = QualityRanking::from_scores([0.3, 0.9, 0.5]);
        assert_eq!(q.order, [Nir, Tir, Rgb]);
        let tied = QualityRanking::from_scores([0.2, 0.2, 0.2]);
        assert_eq!(tied.order, [Rgb, Nir, Tir]);
        let partial = QualityRanking::from_scores([0.1, 0.7, 0.7]);
        assert_eq!(partial.order, [Nir, Tir, Rgb]);
    }

    #[test]
    fn inverse_sort_example() {
        let q = QualityRanking::with_order([0.0; 3], [Nir, Tir, Rgb]);
        assert_eq!(inverse_sort(&q, ['a', 'b', 'c']), ['c', 'a', 'b']);
        assert_eq!(apply_sort(&q, ['r', 'n', 't']), ['n', 't', 'r']);
    }

    #[test]
    fn identity_ranking_is_identity() {
        let q = QualityRanking::identity();
        assert_eq!(apply_sort(&q, [1, 2, 3]), [1, 2, 3]);
        assert_eq!(inverse_sort(&q, [1, 2, 3]), [1, 2, 3]);
    }

    #[test]
    fn round_trip_every_order() {
        for order in all_orders() {
            let q = QualityRanking::with_order([0.0; 3], order);
            let items = ["rgb", "nir", "tir"];
            let sorted = apply_sort(&q, items);
            assert_eq!(sorted[0], items[order[0].index()]);
            assert_eq!(inverse_sort(&q, sorted), items);
        }
    }
}
