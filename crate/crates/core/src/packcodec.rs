//! Fixed-size FIX/PAD pack encoding, threshold decoding, and the history
//! tensor fed to the history encoder.

use crate::domain::{Fixation, FixationPack};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Pack indices are divided by `PACK_INDEX_MAX + 1` and clamped to 1.
pub const PACK_INDEX_MAX: usize = 30;

pub const HISTORY_WIDTH: usize = 4;

/// `lp` slots of `(x, y)` plus a validity flag per slot. PAD slots sit at
/// `(0, 0)` with validity 0, and validity is always a prefix of ones.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedPack {
    pub coords: Vec<[f64; 2]>,
    pub validity: Vec<f64>,
}

impl EncodedPack {
    pub fn lp(&self) -> usize {
        self.validity.len()
    }

    pub fn xs(&self) -> Vec<f64> {
        self.coords.iter().map(|c| c[0]).collect()
    }

    pub fn ys(&self) -> Vec<f64> {
        self.coords.iter().map(|c| c[1]).collect()
    }

    pub fn valid_count(&self) -> usize {
        self.validity.iter().filter(|&&v| v > 0.5).count()
    }

    pub fn coords_tensor(&self) -> Tensor {
        let data = self.coords.iter().flat_map(|c| c.iter().copied()).collect();
        Tensor::new(vec![self.coords.len(), 2], data).expect("lp x 2")
    }
}

pub fn encode_pack(pack: &FixationPack, lp: usize) -> Result<EncodedPack> {
    if lp == 0 {
        return Err(Error::Config("lp must be ≥ 1".into()));
    }
    let mut coords = vec![[0.0, 0.0]; lp];
    let mut validity = vec![0.0; lp];
    for (i, fx) in pack.fixations.iter().take(lp).enumerate() {
        if !fx.in_range() {
            return Err(Error::Range(format!(
                "fixation {i} at ({}, {}) outside [0,1]",
                fx.x, fx.y
            )));
        }
        coords[i] = [fx.x, fx.y];
        validity[i] = 1.0;
    }
    Ok(EncodedPack { coords, validity })
}

/// Walks the slots in order and keeps `(x_i, y_i)` while `v_i ≥ threshold`;
/// the first slot below threshold ends the pack.
pub fn decode_pack(xs: &[f64], ys: &[f64], vs: &[f64], threshold: f64) -> FixationPack {
    let fixations = xs
        .iter()
        .zip(ys)
        .zip(vs)
        .take_while(|(_, &v)| v >= threshold)
        .map(|((&x, &y), _)| Fixation::new(x, y))
        .collect();
    FixationPack::new(fixations)
}

/// `[L_h, 4]` rows of `(x, y, pack, order)` with normalized indices.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryTensor {
    pub rows: Vec<[f64; HISTORY_WIDTH]>,
}

impl HistoryTensor {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::new(vec![self.rows.len(), HISTORY_WIDTH], data).expect("L_h x 4")
    }
}

pub fn history_row(fx: Fixation, pack_index: usize, order: usize, lp: usize) -> [f64; HISTORY_WIDTH] {
    let pack_norm = (pack_index as f64 / (PACK_INDEX_MAX + 1) as f64).min(1.0);
    let order_norm = (order as f64 / lp.saturating_sub(1).max(1) as f64).min(1.0);
    [fx.x, fx.y, pack_norm, order_norm]
}

/// One row per fixation of `packs` (the packs before the one being
/// predicted), in pack then intra-pack order.
pub fn build_history(packs: &[FixationPack], lp: usize) -> HistoryTensor {
    let rows = packs
        .iter()
        .enumerate()
        .flat_map(|(k, p)| {
            p.fixations
                .iter()
                .enumerate()
                .map(move |(i, fx)| history_row(*fx, k, i, lp))
        })
        .collect();
    HistoryTensor { rows }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pack(points: &[(f64, f64)]) -> FixationPack {
        FixationPack::new(points.iter().map(|&(x, y)| Fixation::new(x, y)).collect())
    }

    #[test]
    fn short_pack_is_padded() {
        let e = encode_pack(&pack(&[(0.1, 0.2), (0.3, 0.4)]), 4).unwrap();
        assert_eq!(e.validity, vec![1.0, 1.0, 0.0, 0.0]);
        assert_eq!(e.coords[2], [0.0, 0.0]);
        assert_eq!(e.coords[3], [0.0, 0.0]);
    }

    #[test]
    fn long_pack_is_truncated_in_order() {
        let pts: Vec<(f64, f64)> = (0..6).map(|i| (i as f64 * 0.1, 0.5)).collect();
        let e = encode_pack(&pack(&pts), 4).unwrap();
        assert_eq!(e.validity, vec![1.0; 4]);
        for i in 0..4 {
            assert_eq!(e.coords[i], [i as f64 * 0.1, 0.5]);
        }
    }

    #[test]
    fn empty_pack_is_all_pad() {
        let e = encode_pack(&FixationPack::default(), 4).unwrap();
        assert_eq!(e.validity, vec![0.0; 4]);
    }

    #[test]
    fn out_of_range_fixation_is_rejected() {
        assert!(matches!(encode_pack(&pack(&[(1.2, 0.0)]), 4), Err(Error::Range(_))));
        assert!(encode_pack(&pack(&[]), 0).is_err());
    }

    #[test]
    fn decode_stops_at_first_invalid_slot() {
        let xs = [0.1, 0.2, 0.3, 0.4];
        let ys = [0.5, 0.6, 0.7, 0.8];
        assert_eq!(decode_pack(&xs, &ys, &[0.9, 0.7, 0.3, 0.8], 0.5), pack(&[(0.1, 0.5), (0.2, 0.6)]));
        assert!(decode_pack(&xs, &ys, &[0.4, 0.9, 0.9, 0.9], 0.5).is_empty());
        assert_eq!(decode_pack(&xs, &ys, &[0.5; 4], 0.5).len(), 4);
    }

    #[test]
    fn history_examples() {
        assert!(build_history(&[], 4).is_empty());

        let h = build_history(&[pack(&[(0.2, 0.3), (0.4, 0.5)])], 4);
        assert_eq!(h.rows[0], [0.2, 0.3, 0.0, 0.0]);
        assert_eq!(h.rows[1], [0.4, 0.5, 0.0, 1.0 / 3.0]);

        let h = build_history(&[pack(&[(0.1, 0.1)]), pack(&[(0.9, 0.9)])], 4);
        assert_eq!(h.len(), 2);
        assert_ne!(h.rows[0][2], h.rows[1][2]);
        assert_eq!(h.rows[1][2], 1.0 / 31.0);
        assert_eq!((h.rows[0][3], h.rows[1][3]), (0.0, 0.0));
    }

    #[test]
    fn history_indices_stay_normalized() {
        let packs: Vec<FixationPack> = (0..40).map(|_| pack(&[(0.5, 0.5); 6])).collect();
        let h = build_history(&packs, 1);
        assert!(h.rows.iter().all(|r| r.iter().all(|v| (0.0..=1.0).contains(v))));
        assert_eq!(h.len(), 240);
    }
}
