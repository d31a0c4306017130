//! Wearing-style classification and dynamic gradient truncation.
//!
//! The style ratio compares the aspect ratio (height over width) of the
//! torso-group bounding box in the warped parsing against the flat
//! garment parsing. A visibly tucked-in garment loses height, so its
//! ratio drops below one. Training uses the ratio to decide, per sample,
//! whether preserved-region pixels are excluded from the warping loss:
//! below 0.9 truncation is on, above 0.95 it is off, and inside the
//! closed band a fair coin decides.

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::types::{Image, LabelMap, PartGroup};
use crate::{Error, Result};

pub const TRUNCATE_BELOW: f64 = 0.9;
pub const KEEP_ABOVE: f64 = 0.95;

/// Inclusive pixel bounding box.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BBox {
    pub row_min: usize,
    pub row_max: usize,
    pub col_min: usize,
    pub col_max: usize,
}

impl BBox {
    pub fn height(&self) -> usize {
        self.row_max - self.row_min + 1
    }

    pub fn width(&self) -> usize {
        self.col_max - self.col_min + 1
    }

    /// Height over width.
    pub fn aspect(&self) -> f64 {
        self.height() as f64 / self.width() as f64
    }
}

/// Tight bounding box of the middle-group (torso or skirt) pixels.
pub fn torso_bbox(parsing: &LabelMap) -> Result<BBox> {
    let (h, w) = parsing.dims();
    let mut bb: Option<BBox> = None;
    for y in 0..h {
        for x in 0..w {
            let label = parsing.data[[y, x]];
            if matches!(crate::types::part_group_of(label), Ok(PartGroup::Middle)) {
                bb = Some(match bb {
                    None => BBox { row_min: y, row_max: y, col_min: x, col_max: x },
                    Some(b) => BBox {
                        row_min: b.row_min.min(y),
                        row_max: b.row_max.max(y),
                        col_min: b.col_min.min(x),
                        col_max: b.col_max.max(x),
                    },
                });
            }
        }
    }
    bb.ok_or(Error::EmptyTorso)
}

/// One style-classification outcome. `truncate` and `coin` stay unset
/// until a truncation decision is taken.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DGTDecision {
    pub r_flat: f64,
    pub r_warped: f64,
    pub r_style: f64,
    pub truncate: Option<bool>,
    pub coin: Option<f64>,
}

/// Style ratio between a flat garment parsing and a warped parsing:
/// the warped torso bbox aspect divided by the flat torso bbox aspect.
pub fn compute_r_style(flat_parsing: &LabelMap, warped_parsing: &LabelMap) -> Result<DGTDecision> {
    let r_flat = torso_bbox(flat_parsing)?.aspect();
    let r_warped = torso_bbox(warped_parsing)?.aspect();
    Ok(DGTDecision {
        r_flat,
        r_warped,
        r_style: r_warped / r_flat,
        truncate: None,
        coin: None,
    })
}

/// The truncation rule. The coin is a uniform draw in [0,1) and only
/// matters inside the closed band [0.9, 0.95].
pub fn truncation_decision(r_style: f64, coin: f64) -> Result<bool> {
    if !(r_style > 0.0) {
        return Err(Error::InvalidArg(format!("nonpositive r_style {r_style}")));
    }
    Ok(if r_style < TRUNCATE_BELOW {
        true
    } else if r_style > KEEP_ABOVE {
        false
    } else {
        coin < 0.5
    })
}

/// Deterministic coin for one (dataset seed, sample, epoch) triple.
pub fn dgt_coin(seed: u64, sample_id: u64, epoch: u64) -> f64 {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&sample_id.to_le_bytes());
    key[16..24].copy_from_slice(&epoch.to_le_bytes());
    key[24..32].copy_from_slice(b"dgtcoin1");
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.random_range(0.0..1.0)
}

/// Loss-side application of a truncation decision: when on, preserved
/// pixels are blanked in both the warped garment and its mask so no loss
/// term (and therefore no gradient) sees them. The zeroing mask enters as
/// a constant, never as a differentiable input.
pub fn apply_truncation(
    warped_garment: &Image,
    warped_mask: &LabelMap,
    preserved_mask: &LabelMap,
    truncate: bool,
) -> Result<(Image, LabelMap)> {
    let dims = warped_garment.dims();
    if warped_mask.dims() != dims || preserved_mask.dims() != dims {
        return Err(Error::DimMismatch(format!(
            "apply_truncation dims {:?} / {:?} / {:?}",
            dims,
            warped_mask.dims(),
            preserved_mask.dims()
        )));
    }
    if !truncate {
        return Ok((warped_garment.clone(), warped_mask.clone()));
    }
    let keep = LabelMap::from_fn(dims.0, dims.1, |y, x| {
        u8::from(preserved_mask.data[[y, x]] == 0)
    });
    let image = warped_garment.masked(&keep);
    let mask = LabelMap::from_fn(dims.0, dims.1, |y, x| {
        if keep.data[[y, x]] == 1 {
            warped_mask.data[[y, x]]
        } else {
            0
        }
    });
    Ok((image, mask))
}

/// The same decision as a multiplicative loss weight plane: ones
/// everywhere, or zero inside the preserved region when truncating.
pub fn truncation_weight(preserved_mask: &LabelMap, truncate: bool) -> ArrayD<f64> {
    let (h, w) = preserved_mask.dims();
    ArrayD::from_shape_fn(IxDyn(&[1, h, w]), |ix| {
        if truncate && preserved_mask.data[[ix[1], ix[2]]] != 0 {
            0.0
        } else {
            1.0
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{LABEL_SKIRT, LABEL_TORSO};
    use proptest::prelude::*;

    fn block(h: usize, w: usize, r0: usize, r1: usize, c0: usize, c1: usize, label: u8) -> LabelMap {
        LabelMap::from_fn(h, w, |y, x| {
            if (r0..=r1).contains(&y) && (c0..=c1).contains(&x) {
                label
            } else {
                0
            }
        })
    }

    #[test]
    fn torso_bbox_reads_out_extents() {
        let p = block(8, 8, 2, 5, 1, 3, LABEL_TORSO);
        let bb = torso_bbox(&p).unwrap();
        assert_eq!(bb, BBox { row_min: 2, row_max: 5, col_min: 1, col_max: 3 });
        assert_eq!((bb.height(), bb.width()), (4, 3));

        let single = block(4, 4, 0, 0, 0, 0, LABEL_SKIRT);
        let bb = torso_bbox(&single).unwrap();
        assert_eq!((bb.height(), bb.width()), (1, 1));

        // an L shape: bbox covers the extent, not the area
        let mut l = LabelMap::zeros(8, 8);
        for y in 1..6 {
            l.data[[y, 2]] = LABEL_TORSO;
        }
        for x in 2..7 {
            l.data[[5, x]] = LABEL_TORSO;
        }
        let bb = torso_bbox(&l).unwrap();
        assert_eq!(bb, BBox { row_min: 1, row_max: 5, col_min: 2, col_max: 6 });

        assert!(matches!(torso_bbox(&LabelMap::zeros(4, 4)), Err(Error::EmptyTorso)));
    }

    #[test]
    fn r_style_matches_hand_cases() {
        // ten constructed bbox pairs: (flat h,w, warped h,w, expected)
        let cases: [(usize, usize, usize, usize, f64); 10] = [
            (100, 50, 100, 50, 1.0),
            (120, 80, 90, 100, 0.6),
            (95, 50, 57, 30, 1.0),
            (40, 20, 20, 20, 0.5),
            (30, 30, 45, 30, 1.5),
            (24, 12, 18, 12, 0.75),
            (16, 8, 20, 8, 1.25),
            (10, 10, 9, 10, 0.9),
            (20, 10, 19, 10, 0.95),
            (33, 11, 22, 22, 1.0 / 3.0),
        ];
        for (fh, fw, wh, ww, expect) in cases {
            let flat = block(130, 130, 3, 2 + fh, 4, 3 + fw, LABEL_TORSO);
            let warped = block(130, 130, 7, 6 + wh, 1, ww, LABEL_SKIRT);
            let d = compute_r_style(&flat, &warped).unwrap();
            assert!((d.r_style - expect).abs() < 1e-9, "{fh}x{fw} vs {wh}x{ww}: {}", d.r_style);
            assert!((d.r_style - d.r_warped / d.r_flat).abs() < 1e-9);
            assert!(d.r_flat > 0.0 && d.r_warped > 0.0);
            assert!(d.truncate.is_none() && d.coin.is_none());
        }
    }

    #[test]
    fn r_style_is_scale_invariant() {
        let flat = block(20, 16, 2, 13, 3, 10, LABEL_TORSO);
        let warped = block(20, 16, 5, 12, 2, 11, LABEL_TORSO);
        let base = compute_r_style(&flat, &warped).unwrap().r_style;
        for s in [2usize, 3, 4] {
            let f2 = flat.upsample_nearest(s);
            let w2 = warped.upsample_nearest(s);
            let v = compute_r_style(&f2, &w2).unwrap().r_style;
            let tol = 1.0 / 16.0;
            assert!((v - base).abs() <= tol, "scale {s}: {v} vs {base}");
        }
    }

    #[test]
    fn truncation_rule_matches_thresholds() {
        assert!(truncation_decision(0.85, 0.99).unwrap());
        assert!(!truncation_decision(0.97, 0.01).unwrap());
        assert!(truncation_decision(0.92, 0.3).unwrap());
        assert!(!truncation_decision(0.92, 0.7).unwrap());
        // closed band boundaries use the coin
        assert!(truncation_decision(0.9, 0.2).unwrap());
        assert!(!truncation_decision(0.9, 0.8).unwrap());
        assert!(truncation_decision(0.95, 0.2).unwrap());
        assert!(!truncation_decision(0.95, 0.8).unwrap());
        assert!(truncation_decision(0.0, 0.5).is_err());
        assert!(truncation_decision(-1.0, 0.5).is_err());
    }

    #[test]
    fn coin_is_deterministic_and_well_spread() {
        let a = dgt_coin(7, 11, 3);
        assert_eq!(a, dgt_coin(7, 11, 3));
        assert_ne!(a, dgt_coin(7, 11, 4));
        assert_ne!(a, dgt_coin(7, 12, 3));
        let n = 2000;
        let heads = (0..n).filter(|&i| dgt_coin(1, i, 0) < 0.5).count();
        let frac = heads as f64 / n as f64;
        assert!((0.45..0.55).contains(&frac), "coin bias {frac}");
    }

    #[test]
    fn apply_truncation_blanks_preserved_pixels() {
        let img = Image::from_fn(8, 8, |c, y, x| ((c + y + x) % 5) as f64 / 5.0);
        let mask = block(8, 8, 0, 7, 0, 7, 1);
        let preserved = block(8, 8, 4, 7, 0, 7, 1);

        let (i0, m0) = apply_truncation(&img, &mask, &preserved, false).unwrap();
        assert_eq!(i0.data, img.data);
        assert_eq!(m0.data, mask.data);

        let (i1, m1) = apply_truncation(&img, &mask, &preserved, true).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                if y >= 4 {
                    assert_eq!(m1.data[[y, x]], 0);
                    for c in 0..3 {
                        assert_eq!(i1.data[[c, y, x]], 0.0);
                    }
                } else {
                    assert_eq!(m1.data[[y, x]], mask.data[[y, x]]);
                    for c in 0..3 {
                        assert_eq!(i1.data[[c, y, x]], img.data[[c, y, x]]);
                    }
                }
            }
        }

        let small = LabelMap::zeros(4, 4);
        assert!(apply_truncation(&img, &mask, &small, true).is_err());
    }

    #[test]
    fn truncation_weight_matches_rule() {
        let preserved = block(6, 6, 3, 5, 0, 5, 1);
        let on = truncation_weight(&preserved, true);
        let off = truncation_weight(&preserved, false);
        assert!(off.iter().all(|&v| v == 1.0));
        for y in 0..6 {
            for x in 0..6 {
                assert_eq!(on[[0, y, x]], if y >= 3 { 0.0 } else { 1.0 });
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn decision_is_monotone_in_r_style(a in 0.01f64..2.0, b in 0.01f64..2.0, coin in 0.0f64..1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let dl = truncation_decision(lo, coin).unwrap();
            let dh = truncation_decision(hi, coin).unwrap();
            // truncation can only switch off as the ratio grows
            prop_assert!(dl || !dh);
        }
    }
}
