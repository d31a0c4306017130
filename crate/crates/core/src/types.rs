//! Shared domain types: rasters, the label scheme, garment parts and
//! training samples.
//!
//! All rasters are channel-first in memory. Images hold f64 values in
//! [0,1]; label maps hold u8 ids from the scheme below; flow fields hold
//! per-pixel (dx, dy) sampling offsets in pixels, backward-warping
//! convention: `out(p) = src(p + flow(p))`.

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const LABEL_BG: u8 = 0;
pub const LABEL_LEFT_SLEEVE: u8 = 1;
pub const LABEL_RIGHT_SLEEVE: u8 = 2;
pub const LABEL_TORSO: u8 = 3;
pub const LABEL_LEFT_ARM: u8 = 4;
pub const LABEL_RIGHT_ARM: u8 = 5;
pub const LABEL_NECK: u8 = 6;
pub const LABEL_LEFT_PANT: u8 = 7;
pub const LABEL_RIGHT_PANT: u8 = 8;
pub const LABEL_SKIRT: u8 = 9;
pub const NUM_LABELS: usize = 10;

pub const SKIN_LABELS: [u8; 3] = [LABEL_LEFT_ARM, LABEL_RIGHT_ARM, LABEL_NECK];

pub fn label_name(label: u8) -> &'static str {
    match label {
        0 => "background",
        1 => "left-sleeve",
        2 => "right-sleeve",
        3 => "torso",
        4 => "left-arm",
        5 => "right-arm",
        6 => "neck",
        7 => "left-pant",
        8 => "right-pant",
        9 => "skirt",
        _ => "unknown",
    }
}

/// Which locally-warped part a garment label belongs to. Skin and
/// background labels belong to no part.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum PartGroup {
    None,
    Left,
    Middle,
    Right,
}

impl PartGroup {
    pub const GARMENT_GROUPS: [PartGroup; 3] = [PartGroup::Left, PartGroup::Middle, PartGroup::Right];

    /// Index into `PartSet.parts` for garment groups.
    pub fn index(self) -> Option<usize> {
        match self {
            PartGroup::Left => Some(0),
            PartGroup::Middle => Some(1),
            PartGroup::Right => Some(2),
            PartGroup::None => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PartGroup::Left => "left",
            PartGroup::Middle => "middle",
            PartGroup::Right => "right",
            PartGroup::None => "none",
        }
    }
}

pub fn part_group_of(label: u8) -> Result<PartGroup> {
    match label {
        LABEL_LEFT_SLEEVE | LABEL_LEFT_PANT => Ok(PartGroup::Left),
        LABEL_RIGHT_SLEEVE | LABEL_RIGHT_PANT => Ok(PartGroup::Right),
        LABEL_TORSO | LABEL_SKIRT => Ok(PartGroup::Middle),
        LABEL_BG | LABEL_LEFT_ARM | LABEL_RIGHT_ARM | LABEL_NECK => Ok(PartGroup::None),
        other => Err(Error::UnknownLabel(other)),
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Upper,
    Lower,
    Dresses,
}

impl Category {
    pub fn as_str(self) -> &'static str {
        match self {
            Category::Upper => "upper",
            Category::Lower => "lower",
            Category::Dresses => "dresses",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "upper" => Ok(Category::Upper),
            "lower" => Ok(Category::Lower),
            "dresses" => Ok(Category::Dresses),
            other => Err(Error::InvalidArg(format!("unknown category {other}"))),
        }
    }

    /// The garment labels a category's try-on garment may carry.
    pub fn garment_labels(self) -> &'static [u8] {
        match self {
            Category::Upper => &[LABEL_LEFT_SLEEVE, LABEL_RIGHT_SLEEVE, LABEL_TORSO],
            Category::Lower => &[LABEL_LEFT_PANT, LABEL_RIGHT_PANT, LABEL_SKIRT],
            Category::Dresses => &[LABEL_LEFT_SLEEVE, LABEL_RIGHT_SLEEVE, LABEL_TORSO, LABEL_SKIRT],
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum WearingStyle {
    #[serde(rename = "tuck-in")]
    TuckIn,
    #[serde(rename = "tuck-out")]
    TuckOut,
}

impl WearingStyle {
    pub fn as_str(self) -> &'static str {
        match self {
            WearingStyle::TuckIn => "tuck-in",
            WearingStyle::TuckOut => "tuck-out",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tuck-in" => Ok(WearingStyle::TuckIn),
            "tuck-out" => Ok(WearingStyle::TuckOut),
            other => Err(Error::InvalidArg(format!("unknown wearing style {other}"))),
        }
    }
}

/// A 3-channel raster with values in [0,1], stored CHW.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub data: Array3<f64>,
}

impl Image {
    pub fn zeros(h: usize, w: usize) -> Self {
        Image { data: Array3::zeros((3, h, w)) }
    }

    pub fn from_fn<F: FnMut(usize, usize, usize) -> f64>(h: usize, w: usize, mut f: F) -> Self {
        Image { data: Array3::from_shape_fn((3, h, w), |(c, y, x)| f(c, y, x)) }
    }

    pub fn dims(&self) -> (usize, usize) {
        let s = self.data.dim();
        (s.1, s.2)
    }

    /// Snap every value to the 8-bit grid used on disk, so in-memory
    /// values and PNG round-trips agree exactly.
    pub fn quantize(&mut self) {
        self.data.mapv_inplace(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
    }

    pub fn violations(&self, field: &str, out: &mut Vec<String>) {
        let bad = self.data.iter().filter(|v| !v.is_finite() || **v < 0.0 || **v > 1.0).count();
        if bad > 0 {
            out.push(format!("{field}: {bad} values outside [0,1] or non-finite"));
        }
        let (h, w) = self.dims();
        if h < 8 || w < 8 {
            out.push(format!("{field}: dims {h}x{w} below the 8x8 minimum"));
        }
    }

    pub fn to_dyn(&self) -> ArrayD<f64> {
        self.data.clone().into_dyn()
    }

    pub fn from_dyn(a: ArrayD<f64>) -> Result<Self> {
        let s = a.shape().to_vec();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::DimMismatch(format!("expected [3,H,W], got {:?}", s)));
        }
        Ok(Image {
            data: a
                .into_dimensionality::<ndarray::Ix3>()
                .map_err(|e| Error::DimMismatch(e.to_string()))?,
        })
    }

    /// Pixels where `mask` is zero are blanked.
    pub fn masked(&self, mask: &LabelMap) -> Image {
        let (h, w) = self.dims();
        Image::from_fn(h, w, |c, y, x| {
            if mask.data[[y, x]] != 0 { self.data[[c, y, x]] } else { 0.0 }
        })
    }

    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        let n = self.data.len();
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n as f64
    }
}

/// A per-pixel semantic (or binary) label raster.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    pub data: Array2<u8>,
}

impl LabelMap {
    pub fn zeros(h: usize, w: usize) -> Self {
        LabelMap { data: Array2::zeros((h, w)) }
    }

    pub fn from_fn<F: FnMut(usize, usize) -> u8>(h: usize, w: usize, mut f: F) -> Self {
        LabelMap { data: Array2::from_shape_fn((h, w), |(y, x)| f(y, x)) }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn violations(&self, field: &str, out: &mut Vec<String>) {
        let bad = self.data.iter().filter(|v| **v as usize >= NUM_LABELS).count();
        if bad > 0 {
            out.push(format!("{field}: {bad} pixels with unknown label id"));
        }
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|v| *v <= 1)
    }

    pub fn count(&self, label: u8) -> usize {
        self.data.iter().filter(|v| **v == label).count()
    }

    /// {0,1} mask of pixels whose label belongs to the given part group.
    /// Unknown ids count as no group.
    pub fn group_mask(&self, group: PartGroup) -> LabelMap {
        let (h, w) = self.dims();
        LabelMap::from_fn(h, w, |y, x| {
            (part_group_of(self.data[[y, x]]).unwrap_or(PartGroup::None) == group) as u8
        })
    }

    /// {0,1} mask of pixels carrying any garment label.
    pub fn garment_mask(&self) -> LabelMap {
        let (h, w) = self.dims();
        LabelMap::from_fn(h, w, |y, x| {
            (part_group_of(self.data[[y, x]]).unwrap_or(PartGroup::None) != PartGroup::None) as u8
        })
    }

    /// Single-channel float plane, each pixel `label * scale`.
    pub fn to_plane(&self, scale: f64) -> ArrayD<f64> {
        let (h, w) = self.dims();
        let v: Vec<f64> = self.data.iter().map(|l| *l as f64 * scale).collect();
        ArrayD::from_shape_vec(IxDyn(&[1, h, w]), v).unwrap()
    }

    /// 4-channel one-hot over part groups: background/none, left, middle,
    /// right. Compact conditioning for the garment encoder.
    pub fn group_onehot(&self) -> ArrayD<f64> {
        let (h, w) = self.dims();
        let mut out = ArrayD::zeros(IxDyn(&[4, h, w]));
        for y in 0..h {
            for x in 0..w {
                let g = part_group_of(self.data[[y, x]]).unwrap_or(PartGroup::None);
                let c = match g {
                    PartGroup::None => 0,
                    PartGroup::Left => 1,
                    PartGroup::Middle => 2,
                    PartGroup::Right => 3,
                };
                out[[c, y, x]] = 1.0;
            }
        }
        out
    }

    /// Nearest-neighbor downsample by factor 2 (top-left pixel of each
    /// block), with floor dims. Used to carry label targets down a pyramid.
    pub fn downsample_nearest(&self) -> LabelMap {
        let (h, w) = self.dims();
        LabelMap::from_fn(h / 2, w / 2, |y, x| self.data[[2 * y, 2 * x]])
    }

    pub fn upsample_nearest(&self, factor: usize) -> LabelMap {
        let (h, w) = self.dims();
        LabelMap::from_fn(h * factor, w * factor, |y, x| self.data[[y / factor, x / factor]])
    }
}

/// Dense sampling offsets, stored as a [2,H,W] array: channel 0 is dx
/// (columns), channel 1 is dy (rows). Offsets are resolution-relative.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub data: Array3<f64>,
}

impl FlowField {
    pub fn zeros(h: usize, w: usize) -> Self {
        FlowField { data: Array3::zeros((2, h, w)) }
    }

    pub fn from_fn<F: FnMut(usize, usize) -> (f64, f64)>(h: usize, w: usize, mut f: F) -> Self {
        let mut data = Array3::zeros((2, h, w));
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = f(y, x);
                data[[0, y, x]] = dx;
                data[[1, y, x]] = dy;
            }
        }
        FlowField { data }
    }

    pub fn dims(&self) -> (usize, usize) {
        let s = self.data.dim();
        (s.1, s.2)
    }

    pub fn violations(&self, field: &str, out: &mut Vec<String>) {
        let bad = self.data.iter().filter(|v| !v.is_finite()).count();
        if bad > 0 {
            out.push(format!("{field}: {bad} non-finite offsets"));
        }
    }

    /// Snap to f32 precision, matching the on-disk payload.
    pub fn quantize(&mut self) {
        self.data.mapv_inplace(|v| v as f32 as f64);
    }

    pub fn to_dyn(&self) -> ArrayD<f64> {
        self.data.clone().into_dyn()
    }

    pub fn from_dyn(a: ArrayD<f64>) -> Result<Self> {
        let s = a.shape().to_vec();
        if s.len() != 3 || s[0] != 2 {
            return Err(Error::DimMismatch(format!("expected [2,H,W], got {:?}", s)));
        }
        Ok(FlowField {
            data: a
                .into_dimensionality::<ndarray::Ix3>()
                .map_err(|e| Error::DimMismatch(e.to_string()))?,
        })
    }
}

/// One garment part: a masked image plus its binary support mask.
#[derive(Clone, Debug)]
pub struct Part {
    pub image: Image,
    pub mask: LabelMap,
}

impl Part {
    pub fn is_empty(&self) -> bool {
        self.mask.data.iter().all(|v| *v == 0)
    }
}

/// The left / middle / right garment parts, in that order.
#[derive(Clone, Debug)]
pub struct PartSet {
    pub parts: [Part; 3],
}

impl PartSet {
    /// Split a flat garment into its three local parts by parsing labels.
    pub fn from_garment(garment: &Image, parsing: &LabelMap) -> Result<PartSet> {
        if garment.dims() != parsing.dims() {
            return Err(Error::DimMismatch(format!(
                "garment {:?} vs parsing {:?}",
                garment.dims(),
                parsing.dims()
            )));
        }
        let build = |group: PartGroup| {
            let mask = parsing.group_mask(group);
            let image = garment.masked(&mask);
            Part { image, mask }
        };
        Ok(PartSet {
            parts: [build(PartGroup::Left), build(PartGroup::Middle), build(PartGroup::Right)],
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.parts[0].image.dims()
    }

    pub fn part(&self, group: PartGroup) -> &Part {
        &self.parts[group.index().expect("garment group")]
    }
}

/// One training record: everything the warping module and generator see,
/// plus synthetic-only ground truth.
#[derive(Clone, Debug)]
pub struct WarpSample {
    pub person: Image,
    pub human_parsing: LabelMap,
    pub garment: Image,
    pub garment_parsing: LabelMap,
    pub pose_map: Image,
    pub densepose_map: Image,
    pub preserved_mask: LabelMap,
    pub category: Category,
    pub wearing_style_gt: WearingStyle,
    pub gt_flows: Option<[FlowField; 3]>,
    pub gt_warped_parsing: LabelMap,
}

impl WarpSample {
    pub fn dims(&self) -> (usize, usize) {
        self.person.dims()
    }
}

/// Check every type invariant; returns one description per violation.
/// Never aborts: an invalid sample yields messages, not errors.
pub fn validate_sample(sample: &WarpSample) -> Vec<String> {
    let mut out = Vec::new();
    let dims = sample.person.dims();
    sample.person.violations("person", &mut out);
    sample.garment.violations("garment", &mut out);
    sample.pose_map.violations("pose_map", &mut out);
    sample.densepose_map.violations("densepose_map", &mut out);
    sample.human_parsing.violations("human_parsing", &mut out);
    sample.garment_parsing.violations("garment_parsing", &mut out);
    sample.gt_warped_parsing.violations("gt_warped_parsing", &mut out);

    let mut check_dims = |field: &str, d: (usize, usize)| {
        if d != dims {
            out.push(format!("{field}: dimension mismatch {d:?} vs person {dims:?}"));
        }
    };
    check_dims("garment", sample.garment.dims());
    check_dims("pose_map", sample.pose_map.dims());
    check_dims("densepose_map", sample.densepose_map.dims());
    check_dims("human_parsing", sample.human_parsing.dims());
    check_dims("garment_parsing", sample.garment_parsing.dims());
    check_dims("preserved_mask", sample.preserved_mask.dims());
    check_dims("gt_warped_parsing", sample.gt_warped_parsing.dims());

    if !sample.preserved_mask.is_binary() {
        out.push("preserved_mask: not {0,1}-valued".to_string());
    }
    if let Some(flows) = &sample.gt_flows {
        for (i, f) in flows.iter().enumerate() {
            let name = format!("gt_flows[{i}]");
            f.violations(&name, &mut out);
            if f.dims() != dims {
                out.push(format!("{name}: dimension mismatch {:?} vs person {dims:?}", f.dims()));
            }
        }
    }
    out
}

/// Loss term weights for the warping stage and the generator stage.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_per_w: f64,
    pub lambda_m_w: f64,
    pub lambda_ce: f64,
    pub lambda_adv_w: f64,
    pub lambda_sec: f64,
    pub lambda_per_g: f64,
    pub lambda_adv: f64,
    pub lambda_m_g: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_per_w: 0.2,
            lambda_m_w: 1.0,
            lambda_ce: 1.0,
            lambda_adv_w: 0.1,
            lambda_sec: 0.01,
            lambda_per_g: 0.2,
            lambda_adv: 0.1,
            lambda_m_g: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_per_w,
            self.lambda_m_w,
            self.lambda_ce,
            self.lambda_adv_w,
            self.lambda_sec,
            self.lambda_per_g,
            self.lambda_adv,
            self.lambda_m_g,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArg("loss weights must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny_sample() -> WarpSample {
        let h = 8;
        let w = 8;
        WarpSample {
            person: Image::zeros(h, w),
            human_parsing: LabelMap::zeros(h, w),
            garment: Image::zeros(h, w),
            garment_parsing: LabelMap::zeros(h, w),
            pose_map: Image::zeros(h, w),
            densepose_map: Image::zeros(h, w),
            preserved_mask: LabelMap::zeros(h, w),
            category: Category::Upper,
            wearing_style_gt: WearingStyle::TuckIn,
            gt_flows: Some([FlowField::zeros(h, w), FlowField::zeros(h, w), FlowField::zeros(h, w)]),
            gt_warped_parsing: LabelMap::zeros(h, w),
        }
    }

    #[test]
    fn part_groups_cover_the_scheme() {
        assert_eq!(part_group_of(LABEL_LEFT_SLEEVE).unwrap(), PartGroup::Left);
        assert_eq!(part_group_of(LABEL_LEFT_PANT).unwrap(), PartGroup::Left);
        assert_eq!(part_group_of(LABEL_RIGHT_SLEEVE).unwrap(), PartGroup::Right);
        assert_eq!(part_group_of(LABEL_RIGHT_PANT).unwrap(), PartGroup::Right);
        assert_eq!(part_group_of(LABEL_TORSO).unwrap(), PartGroup::Middle);
        assert_eq!(part_group_of(LABEL_SKIRT).unwrap(), PartGroup::Middle);
        for skin in [LABEL_BG, LABEL_LEFT_ARM, LABEL_RIGHT_ARM, LABEL_NECK] {
            assert_eq!(part_group_of(skin).unwrap(), PartGroup::None);
        }
        assert!(matches!(part_group_of(10), Err(Error::UnknownLabel(10))));
    }

    #[test]
    fn valid_sample_has_no_violations() {
        assert!(validate_sample(&tiny_sample()).is_empty());
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let mut s = tiny_sample();
        s.garment = Image::zeros(16, 8);
        let v = validate_sample(&s);
        assert_eq!(v.len(), 1);
        assert!(v[0].contains("dimension mismatch"), "{v:?}");
    }

    #[test]
    fn unknown_label_is_reported() {
        let mut s = tiny_sample();
        s.human_parsing.data[[3, 3]] = 11;
        let v = validate_sample(&s);
        assert_eq!(v.len(), 1);
        assert!(v[0].contains("unknown label"), "{v:?}");
    }

    #[test]
    fn out_of_range_pixels_are_reported() {
        let mut s = tiny_sample();
        s.person.data[[0, 0, 0]] = 1.5;
        s.person.data[[1, 2, 2]] = f64::NAN;
        let v = validate_sample(&s);
        assert_eq!(v.len(), 1);
        assert!(v[0].contains("person"), "{v:?}");
    }

    #[test]
    fn partset_partitions_garment_pixels() {
        let mut parsing = LabelMap::zeros(8, 8);
        parsing.data[[1, 1]] = LABEL_LEFT_SLEEVE;
        parsing.data[[2, 2]] = LABEL_TORSO;
        parsing.data[[3, 3]] = LABEL_RIGHT_SLEEVE;
        parsing.data[[4, 4]] = LABEL_NECK;
        let garment = Image::from_fn(8, 8, |_, y, x| ((y * 8 + x) as f64) / 64.0);
        let parts = PartSet::from_garment(&garment, &parsing).unwrap();
        assert_eq!(parts.part(PartGroup::Left).mask.count(1), 1);
        assert_eq!(parts.part(PartGroup::Middle).mask.count(1), 1);
        assert_eq!(parts.part(PartGroup::Right).mask.count(1), 1);
        // the neck pixel lands in no part
        let total: usize = parts.parts.iter().map(|p| p.mask.count(1)).sum();
        assert_eq!(total, 3);
        assert!((parts.part(PartGroup::Middle).image.data[[0, 2, 2]] - 18.0 / 64.0).abs() < 1e-12);
        assert_eq!(parts.part(PartGroup::Middle).image.data[[0, 1, 1]], 0.0);
    }

    #[test]
    fn quantize_matches_u8_grid() {
        let mut img = Image::from_fn(8, 8, |c, y, x| (c + y + x) as f64 * 0.037);
        img.quantize();
        for v in img.data.iter() {
            let u = (v * 255.0).round();
            assert!((u / 255.0 - v).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn validation_is_idempotent(seed in 0u64..1000) {
            let mut s = tiny_sample();
            // inject a pseudo-random defect or none
            if seed % 3 == 0 {
                s.human_parsing.data[[0, 0]] = 200;
            }
            if seed % 5 == 0 {
                s.person.data[[0, 1, 1]] = 2.0;
            }
            let a = validate_sample(&s);
            let b = validate_sample(&s);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn group_masks_are_binary_and_disjoint(labels in proptest::collection::vec(0u8..10, 16)) {
            let parsing = LabelMap::from_fn(4, 4, |y, x| labels[y * 4 + x]);
            let l = parsing.group_mask(PartGroup::Left);
            let m = parsing.group_mask(PartGroup::Middle);
            let r = parsing.group_mask(PartGroup::Right);
            for map in [&l, &m, &r] {
                prop_assert!(map.is_binary());
            }
            for y in 0..4 {
                for x in 0..4 {
                    let s = l.data[[y, x]] + m.data[[y, x]] + r.data[[y, x]];
                    prop_assert!(s <= 1);
                }
            }
        }
    }
}
