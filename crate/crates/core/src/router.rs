//! Token-level routing: score text tokens by embedding norm and position,
//! keep the top K, drop the rest.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Upweighting factor for mid-sequence positions.
pub const MID_WEIGHT: f64 = 1.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RouterConfig {
    pub k: usize,
    pub lambda_m: f64,
    pub lambda_p: f64,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            k: 64,
            lambda_m: 1.0,
            lambda_p: 1.0,
        }
    }
}

/// A padded token sequence with its input embeddings.
#[derive(Debug, Clone)]
pub struct TokenizedText<T> {
    pub ids: Vec<usize>,
    /// `true` for real tokens, `false` for padding.
    pub mask: Vec<bool>,
    /// `[L, d_model]`.
    pub embeddings: Tensor<T>,
}

impl<T: Scalar> TokenizedText<T> {
    pub fn new(ids: Vec<usize>, mask: Vec<bool>, embeddings: Tensor<T>) -> Result<Self> {
        let op = "TokenizedText";
        if ids.len() != mask.len() {
            return Err(shape_err(op, "mask length", ids.len(), mask.len()));
        }
        let s = embeddings.expect_rank(op, 2)?;
        if s[0] != ids.len() {
            return Err(shape_err(op, "embedding rows", ids.len(), s[0]));
        }
        Ok(Self { ids, mask, embeddings })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn non_pad(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Debug, Clone)]
pub struct RoutedTokens<T> {
    /// Zero-based positions in the original sequence, strictly increasing.
    pub kept_positions: Vec<usize>,
    pub kept_ids: Vec<usize>,
    /// `[K', d_model]`.
    pub kept_embeddings: Tensor<T>,
    /// Normalized score of every position (padding is 0).
    pub scores: Vec<f64>,
}

/// `1.2` when `L/4 <= pos <= 3L/4` (1-based, real-valued bounds), else `1.0`.
pub fn positional_weight(pos: usize, len: usize) -> Result<f64> {
    if pos == 0 || pos > len {
        return Err(invalid("positional_weight", format!("position {pos} outside 1..={len}")));
    }
    let (p, l) = (pos as f64, len as f64);
    Ok(if l / 4.0 <= p && p <= 3.0 * l / 4.0 {
        MID_WEIGHT
    } else {
        1.0
    })
}

/// Raw scores `(lambda_m * |e| + lambda_p * phi(pos)) * mask`.
pub fn score_tokens<T: Scalar>(seq: &TokenizedText<T>, lambda_m: f64, lambda_p: f64) -> Result<Vec<f64>> {
    seq.embeddings.check_finite("score_tokens")?;
    let len = seq.len();
    let d = if len == 0 { 0 } else { seq.embeddings.numel() / len };
    let rows = seq.embeddings.data().chunks(d.max(1));
    seq.mask
        .iter()
        .zip(rows)
        .enumerate()
        .map(|(i, (&real, row))| {
            if !real {
                return Ok(0.0);
            }
            let norm = row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
            Ok(lambda_m * norm + lambda_p * positional_weight(i + 1, len)?)
        })
        .collect()
}

/// Min-max over real tokens; padding stays 0 and a flat range maps to 1.
pub fn normalize_scores(raw: &[f64], mask: &[bool]) -> Vec<f64> {
    let real = raw.iter().zip(mask).filter(|(_, &m)| m).map(|(&v, _)| v);
    let (lo, hi) = real.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    raw.iter()
        .zip(mask)
        .map(|(&v, &m)| match (m, hi > lo) {
            (false, _) => 0.0,
            (true, true) => (v - lo) / (hi - lo),
            (true, false) => 1.0,
        })
        .collect()
}

/// Positions of the `min(k, #real)` highest-scored real tokens, ties going to
/// the earlier position, returned in sequence order.
pub fn select_top_k(scores: &[f64], mask: &[bool], k: usize) -> Vec<usize> {
    let mut cand: Vec<usize> = (0..scores.len()).filter(|&i| mask[i]).collect();
    cand.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    cand.truncate(k);
    cand.sort_unstable();
    cand
}

/// Scores, normalizes and keeps the top-K real tokens. Pruned tokens are
/// removed, not masked.
pub fn route_top_k<T: Scalar>(seq: &TokenizedText<T>, cfg: &RouterConfig) -> Result<RoutedTokens<T>> {
    if cfg.k == 0 {
        return Err(invalid("route_top_k", "K must be at least 1"));
    }
    if seq.non_pad() == 0 {
        return Err(Error::Empty("route_top_k: sequence has no real tokens"));
    }
    let raw = score_tokens(seq, cfg.lambda_m, cfg.lambda_p)?;
    let scores = normalize_scores(&raw, &seq.mask);
    let kept_positions = select_top_k(&raw, &seq.mask, cfg.k);
    let kept_ids = kept_positions.iter().map(|&p| seq.ids[p]).collect();
    let kept_embeddings = seq.embeddings.select_rows(&kept_positions)?;
    Ok(RoutedTokens {
        kept_positions,
        kept_ids,
        kept_embeddings,
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn positional_examples() {
        assert_eq!(positional_weight(50, 100).unwrap(), 1.2);
        assert_eq!(positional_weight(10, 100).unwrap(), 1.0);
        assert_eq!(positional_weight(1, 4).unwrap(), 1.2);
        assert_eq!(positional_weight(3, 4).unwrap(), 1.2);
        assert_eq!(positional_weight(4, 4).unwrap(), 1.0);
        assert!(positional_weight(0, 4).is_err());
        assert!(positional_weight(5, 4).is_err());
    }

    fn seq(rows: &[[f64; 2]], mask: &[bool]) -> TokenizedText<f64> {
        let data = rows.iter().flatten().copied().collect();
        TokenizedText::new((0..rows.len()).collect(), mask.to_vec(), Tensor::new(&[rows.len(), 2], data).unwrap())
            .unwrap()
    }

    #[test]
    fn score_examples() {
        // L = 4: positions 1..=3 are mid-sequence
        let s = seq(&[[3.0, 4.0], [0.0, 2.0], [1.0, 0.0], [0.0, 0.0]], &[false, true, true, true]);
        let raw = score_tokens(&s, 1.0, 1.0).unwrap();
        assert_eq!(raw[0], 0.0);
        assert!((raw[1] - 3.2).abs() < 1e-12);
        assert!((raw[2] - 2.2).abs() < 1e-12);
        assert!((raw[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn score_rejects_nan() {
        let s = seq(&[[f64::NAN, 0.0]], &[true]);
        assert!(score_tokens(&s, 1.0, 1.0).is_err());
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_scores(&[0.0, 2.2, 3.2], &[false, true, true]), vec![0.0, 0.0, 1.0]);
        assert_eq!(normalize_scores(&[0.0, 2.0, 2.0], &[false, true, true]), vec![0.0, 1.0, 1.0]);
    }

    #[test]
    fn short_sequence_keeps_everything() {
        let rows: Vec<[f64; 2]> = (0..50).map(|i| [i as f64, 1.0]).collect();
        let mask: Vec<bool> = (0..50).map(|i| i < 40).collect();
        let r = route_top_k(&seq(&rows, &mask), &RouterConfig::default()).unwrap();
        assert_eq!(r.kept_positions, (0..40).collect::<Vec<_>>());
        assert_eq!(r.kept_embeddings.shape(), &[40, 2]);
    }

    #[test]
    fn single_token_tie_goes_to_earlier() {
        // equal norms outside the mid window: positions 0 and 5 of L = 6
        let rows = [[1.0, 0.0], [0.0, 0.0], [0.0, 0.0], [0.0, 0.0], [0.0, 0.0], [0.0, 1.0]];
        let mask = [true, false, false, false, false, true];
        let cfg = RouterConfig { k: 1, ..Default::default() };
        assert_eq!(route_top_k(&seq(&rows, &mask), &cfg).unwrap().kept_positions, vec![0]);
    }

    #[test]
    fn all_padding_is_an_error() {
        let s = seq(&[[1.0, 0.0]], &[false]);
        assert!(route_top_k(&s, &RouterConfig::default()).is_err());
        let s = seq(&[[1.0, 0.0]], &[true]);
        assert!(route_top_k(&s, &RouterConfig { k: 0, ..Default::default() }).is_err());
    }

    fn arb_seq() -> impl Strategy<Value = (Vec<[f64; 2]>, Vec<bool>, usize)> {
        (1usize..40).prop_flat_map(|len| {
            (
                prop::collection::vec([-3.0f64..3.0, -3.0f64..3.0], len),
                prop::collection::vec(any::<bool>(), len),
                1usize..20,
                0..len,
            )
                .prop_map(|(rows, mut mask, k, force)| {
                    mask[force] = true;
                    (rows, mask, k)
                })
        })
    }

    proptest! {
        #[test]
        fn routing_properties((rows, mask, k) in arb_seq()) {
            let s = seq(&rows, &mask);
            let cfg = RouterConfig { k, ..Default::default() };
            let r = route_top_k(&s, &cfg).unwrap();
            prop_assert!(r.kept_positions.iter().all(|&p| mask[p]));
            prop_assert_eq!(r.kept_positions.len(), k.min(s.non_pad()));
            prop_assert!(r.kept_positions.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(r.scores.iter().all(|&v| (0.0..=1.0).contains(&v)));
            let raw = score_tokens(&s, 1.0, 1.0).unwrap();
            let cubed: Vec<f64> = raw.iter().map(|v| v.powi(3) + 2.0 * v).collect();
            prop_assert_eq!(select_top_k(&cubed, &mask, k), r.kept_positions.clone());
            prop_assert_eq!(select_top_k(&r.scores, &mask, k).len(), r.kept_positions.len());
            let again = route_top_k(&s, &cfg).unwrap();
            prop_assert_eq!(again.kept_positions, r.kept_positions);
        }
    }
}
