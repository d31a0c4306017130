//! Procedural paired data: a drawn body, a flat garment, and the person
//! wearing it, with exact per-part affine warps as ground truth.
//!
//! Every transform is affine, so the true flows have zero second-order
//! energy, and the person's garment pixels are composed by literally
//! warping the (already quantized) flat garment with the (already
//! quantized) flows. Re-warping at test time reproduces the person up to
//! image quantization.
//!
//! Wearing style is geometry, not decoration: tuck-in hides the lower
//! torso under the preserved clothing block, tuck-out scales the hem past
//! it. Garment textures are deliberately uniform along y (vertical
//! stripes, solids, a vertical two-tone split) so the visible crop of a
//! garment looks identical under any vertical stretch; the horizontal
//! stripe frequency still pins the horizontal scale.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::dgt::compute_r_style;
use crate::io::{self, ManifestEntry};
use crate::model::check_pyramid_dims;
use crate::types::{
    Category, FlowField, Image, LabelMap, PartSet, WarpSample, WearingStyle, LABEL_LEFT_ARM,
    LABEL_LEFT_PANT, LABEL_LEFT_SLEEVE, LABEL_NECK, LABEL_RIGHT_ARM, LABEL_RIGHT_PANT,
    LABEL_RIGHT_SLEEVE, LABEL_SKIRT, LABEL_TORSO,
};
use crate::warp::{assemble_by_parsing, warp_parts};
use crate::{Error, Result};

const MAX_ATTEMPTS: u64 = 64;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    /// Proportions of upper / lower / dresses.
    pub category_mix: [f64; 3],
    pub tuck_in_fraction: f64,
    /// Proportions of vertical stripes / solid / two-tone garments.
    pub texture_mix: [f64; 3],
    /// Proportions of simple / crossed-arms / raised-arms poses.
    pub pose_mix: [f64; 3],
    pub sleeveless_fraction: f64,
    pub long_sleeve_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            height: 64,
            width: 48,
            category_mix: [0.6, 0.25, 0.15],
            tuck_in_fraction: 0.5,
            texture_mix: [0.6, 0.25, 0.15],
            pose_mix: [0.5, 0.25, 0.25],
            sleeveless_fraction: 0.15,
            long_sleeve_fraction: 0.5,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        check_pyramid_dims(self.height, self.width)?;
        for (name, mix) in [
            ("category_mix", &self.category_mix),
            ("texture_mix", &self.texture_mix),
            ("pose_mix", &self.pose_mix),
        ] {
            if mix.iter().any(|p| !(0.0..=1.0).contains(p)) || (mix.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidArg(format!("{name} must be proportions summing to 1")));
            }
        }
        for (name, f) in [
            ("tuck_in_fraction", self.tuck_in_fraction),
            ("sleeveless_fraction", self.sleeveless_fraction),
            ("long_sleeve_fraction", self.long_sleeve_fraction),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::InvalidArg(format!("{name} must be in [0,1]")));
            }
        }
        Ok(())
    }
}

fn rng_for(seed: u64, index: u64, attempt: u64, tag: &[u8; 8]) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&index.to_le_bytes());
    key[16..24].copy_from_slice(&attempt.to_le_bytes());
    key[24..].copy_from_slice(tag);
    ChaCha8Rng::from_seed(key)
}

fn pick3(rng: &mut ChaCha8Rng, mix: &[f64; 3]) -> usize {
    let r: f64 = rng.random_range(0.0..1.0);
    if r < mix[0] {
        0
    } else if r < mix[0] + mix[1] {
        1
    } else {
        2
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Pose {
    Simple,
    Crossed,
    Raised,
}

#[derive(Clone, Copy)]
enum TexKind {
    VStripe,
    Solid,
    TwoTone,
}

/// Everything drawn from the attempt-independent stream, so rejection
/// retries never shift the category / style / pose statistics.
struct Meta {
    category: Category,
    style: WearingStyle,
    pose: Pose,
    tex_kind: TexKind,
    color_a: [f64; 3],
    color_b: [f64; 3],
    sleeveless: bool,
    long_sleeves: bool,
    lower_is_skirt: bool,
}

const PALETTE: [[f64; 3]; 8] = [
    [0.95, 0.35, 0.30],
    [0.98, 0.75, 0.20],
    [0.35, 0.80, 0.95],
    [0.45, 0.90, 0.40],
    [0.95, 0.55, 0.85],
    [0.70, 0.60, 0.98],
    [0.98, 0.90, 0.55],
    [0.40, 0.95, 0.80],
];
const BG: [f64; 3] = [0.86, 0.86, 0.88];
const SKIN: [f64; 3] = [0.82, 0.64, 0.52];
const PANTS_A: [f64; 3] = [0.13, 0.13, 0.17];
const PANTS_B: [f64; 3] = [0.20, 0.20, 0.24];
const SHIRT: [f64; 3] = [0.25, 0.28, 0.35];

fn draw_meta(cfg: &SynthConfig, index: u64) -> Meta {
    let mut rng = rng_for(cfg.seed, index, u64::MAX, b"synthmet");
    let category = match pick3(&mut rng, &cfg.category_mix) {
        0 => Category::Upper,
        1 => Category::Lower,
        _ => Category::Dresses,
    };
    let tuck_in: f64 = rng.random_range(0.0..1.0);
    let style = if category == Category::Dresses || tuck_in >= cfg.tuck_in_fraction {
        WearingStyle::TuckOut
    } else {
        WearingStyle::TuckIn
    };
    let pose = match pick3(&mut rng, &cfg.pose_mix) {
        0 => Pose::Simple,
        1 => Pose::Crossed,
        _ => Pose::Raised,
    };
    let tex_kind = match pick3(&mut rng, &cfg.texture_mix) {
        0 => TexKind::VStripe,
        1 => TexKind::Solid,
        _ => TexKind::TwoTone,
    };
    let ia = rng.random_range(0..PALETTE.len());
    let mut ib = rng.random_range(0..PALETTE.len());
    if ib == ia {
        ib = (ib + 3) % PALETTE.len();
    }
    let sleeveless = rng.random_bool(cfg.sleeveless_fraction);
    // raised arms leave no column room for long sleeves
    let long_sleeves = rng.random_bool(cfg.long_sleeve_fraction) && pose != Pose::Raised;
    let lower_is_skirt = rng.random_bool(0.5);
    Meta {
        category,
        style,
        pose,
        tex_kind,
        color_a: PALETTE[ia],
        color_b: PALETTE[ib],
        sleeveless,
        long_sleeves,
        lower_is_skirt,
    }
}

struct Texture {
    kind: TexKind,
    ca: [f64; 3],
    cb: [f64; 3],
    period: f64,
    split_x: f64,
}

impl Texture {
    /// Color at a flat-garment x coordinate. Independent of y on purpose.
    fn at(&self, x: f64) -> [f64; 3] {
        match self.kind {
            TexKind::VStripe => {
                if ((x / self.period).floor() as i64).rem_euclid(2) == 0 {
                    self.ca
                } else {
                    self.cb
                }
            }
            TexKind::Solid => self.ca,
            TexKind::TwoTone => {
                if x < self.split_x {
                    self.ca
                } else {
                    self.cb
                }
            }
        }
    }
}

/// Half-open integer pixel rectangle.
#[derive(Clone, Copy)]
struct Rect {
    x0: i64,
    y0: i64,
    x1: i64,
    y1: i64,
}

impl Rect {
    fn contains_px(&self, x: i64, y: i64) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    /// True when a continuous point sits in the fully-textured interior,
    /// meaning all four bilinear taps land on labeled pixels.
    fn contains_interior(&self, x: f64, y: f64) -> bool {
        x >= self.x0 as f64
            && x <= (self.x1 - 1) as f64
            && y >= self.y0 as f64
            && y <= (self.y1 - 1) as f64
    }
}

#[derive(Clone, Copy)]
struct Affine {
    m: [[f64; 2]; 2],
    t: [f64; 2],
}

impl Affine {
    fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.m[0][0] * x + self.m[0][1] * y + self.t[0],
            self.m[1][0] * x + self.m[1][1] * y + self.t[1],
        )
    }

    fn inverse(&self) -> Affine {
        let det = self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0];
        let inv = [
            [self.m[1][1] / det, -self.m[0][1] / det],
            [-self.m[1][0] / det, self.m[0][0] / det],
        ];
        let tx = -(inv[0][0] * self.t[0] + inv[0][1] * self.t[1]);
        let ty = -(inv[1][0] * self.t[0] + inv[1][1] * self.t[1]);
        Affine { m: inv, t: [tx, ty] }
    }

    fn scale_to(sx: f64, sy: f64, from: (f64, f64), to: (f64, f64)) -> Affine {
        Affine {
            m: [[sx, 0.0], [0.0, sy]],
            t: [to.0 - sx * from.0, to.1 - sy * from.1],
        }
    }

    /// Rigid map sending anchor `from` to `to` and flat direction `axis`
    /// onto unit direction `dir`.
    fn rigid_axis(axis: (f64, f64), dir: (f64, f64), from: (f64, f64), to: (f64, f64)) -> Affine {
        // rotation with columns chosen so that m * axis = dir
        let (c, s) = if axis.0 < 0.0 { (-dir.0, -dir.1) } else { (dir.0, dir.1) };
        let m = [[c, -s], [s, c]];
        Affine {
            m,
            t: [to.0 - m[0][0] * from.0 - m[0][1] * from.1, to.1 - m[1][0] * from.0 - m[1][1] * from.1],
        }
    }
}

/// Backward flow realizing a forward affine: flow(p) = A⁻¹(p) − p.
fn backward_flow(h: usize, w: usize, forward: &Affine) -> FlowField {
    let inv = forward.inverse();
    FlowField::from_fn(h, w, |y, x| {
        let (qx, qy) = inv.apply(x as f64, y as f64);
        (qx - x as f64, qy - y as f64)
    })
}

struct Body {
    cx: f64,
    y_shoulder: f64,
    y_waist: f64,
    y_leg_end: f64,
    torso_hw: f64,
    hip_hw: f64,
    /// Bottom row (exclusive) of the preserved upper block worn by
    /// lower-category samples; the crop line for their tuck-in.
    shirt_hem: f64,
}

fn make_body(h: usize, w: usize, geo: &mut ChaCha8Rng) -> Body {
    let sv = h as f64 / 64.0;
    let sh = w as f64 / 48.0;
    let w_b = geo.random_range(15..=19) as f64 * sh;
    Body {
        cx: w as f64 / 2.0,
        y_shoulder: (14.0 * sv).round(),
        y_waist: (32.0 * sv).round(),
        y_leg_end: (56.0 * sv).round(),
        torso_hw: w_b / 2.0,
        hip_hw: w_b / 2.0 + sh,
        shirt_hem: (38.0 * sv).round(),
    }
}

struct Arm {
    shoulder: (f64, f64),
    hand: (f64, f64),
    dir: (f64, f64),
}

fn make_arms(body: &Body, pose: Pose, arm_len: f64, geo: &mut ChaCha8Rng) -> [Arm; 2] {
    let jitter: f64 = geo.random_range(-0.06..0.06);
    let sl = (body.cx - body.torso_hw, body.y_shoulder + 1.0);
    let sr = (body.cx + body.torso_hw, body.y_shoulder + 1.0);
    let mk = |shoulder: (f64, f64), dir: (f64, f64)| {
        let n = (dir.0 * dir.0 + dir.1 * dir.1).sqrt();
        let dir = (dir.0 / n, dir.1 / n);
        Arm { shoulder, hand: (shoulder.0 + arm_len * dir.0, shoulder.1 + arm_len * dir.1), dir }
    };
    match pose {
        Pose::Simple => {
            let phi = 0.26 + jitter;
            [
                mk(sl, (-phi.sin(), phi.cos())),
                mk(sr, (phi.sin(), phi.cos())),
            ]
        }
        Pose::Crossed => {
            let tl = (body.cx + 5.0, body.y_shoulder + 12.0 + 8.0 * jitter);
            let tr = (body.cx - 5.0, body.y_shoulder + 12.0 - 8.0 * jitter);
            [
                mk(sl, (tl.0 - sl.0, tl.1 - sl.1)),
                mk(sr, (tr.0 - sr.0, tr.1 - sr.1)),
            ]
        }
        Pose::Raised => {
            let psi = 0.79 + jitter;
            [
                mk(sl, (-psi.cos(), -psi.sin())),
                mk(sr, (psi.cos(), -psi.sin())),
            ]
        }
    }
}

/// Which rows of which labels the wearing style removes from the warped
/// parsing.
enum Crop {
    None,
    /// Tucked under the lower block: clear labels at rows >= y.
    From(f64, &'static [u8]),
    /// Tucked under the upper block: clear labels at rows < y.
    To(f64, &'static [u8]),
}

struct Layout {
    /// Flat regions in z-order (later entries drawn over earlier ones
    /// when warped regions overlap).
    regions: Vec<(u8, Rect)>,
    /// Forward affine per part group (left, middle, right).
    affines: [Option<Affine>; 3],
    crop: Crop,
}

fn group_of(label: u8) -> usize {
    match label {
        LABEL_LEFT_SLEEVE | LABEL_LEFT_PANT => 0,
        LABEL_RIGHT_SLEEVE | LABEL_RIGHT_PANT => 2,
        _ => 1,
    }
}

fn layout_upper(
    body: &Body,
    arms: &[Arm; 2],
    meta: &Meta,
    geo: &mut ChaCha8Rng,
    dims: (usize, usize),
) -> Layout {
    let (h, w) = (dims.0 as f64, dims.1 as f64);
    let sv = h / 64.0;
    let sh = w / 48.0;
    let h_f = (geo.random_range(26..=32) as f64 * sv).round();
    let w_b = body.torso_hw * 2.0;
    let w_f = (1.18 * w_b).round();
    let u: f64 = geo.random_range(1.02..1.10);
    let sw = (geo.random_range(4..=5) as f64 * sv).round();
    let sl = if meta.long_sleeves {
        (geo.random_range(12..=15) as f64 * sh).round()
    } else {
        (geo.random_range(6..=9) as f64 * sh).round()
    };

    let y0 = (6.0 * sv).round();
    let cx_f = (w / 2.0).round();
    let tx0 = (cx_f - w_f / 2.0).round();
    let torso = Rect { x0: tx0 as i64, y0: y0 as i64, x1: (tx0 + w_f) as i64, y1: (y0 + h_f) as i64 };

    let s_x = w_b / w_f;
    let s_y = s_x * u;
    let mid = Affine::scale_to(s_x, s_y, (cx_f, y0), (body.cx, body.y_shoulder));

    let mut regions = vec![(LABEL_TORSO, torso)];
    let mut affines = [None, Some(mid), None];
    if !meta.sleeveless {
        let ls = Rect {
            x0: (tx0 - sl) as i64,
            y0: (y0 + 1.0) as i64,
            x1: tx0 as i64,
            y1: (y0 + 1.0 + sw) as i64,
        };
        let rs = Rect {
            x0: (tx0 + w_f) as i64,
            y0: (y0 + 1.0) as i64,
            x1: (tx0 + w_f + sl) as i64,
            y1: (y0 + 1.0 + sw) as i64,
        };
        let anchor_l = (tx0, y0 + 1.0 + sw / 2.0);
        let anchor_r = (tx0 + w_f, y0 + 1.0 + sw / 2.0);
        affines[0] = Some(Affine::rigid_axis((-1.0, 0.0), arms[0].dir, anchor_l, arms[0].shoulder));
        affines[2] = Some(Affine::rigid_axis((1.0, 0.0), arms[1].dir, anchor_r, arms[1].shoulder));
        regions.push((LABEL_LEFT_SLEEVE, ls));
        regions.push((LABEL_RIGHT_SLEEVE, rs));
    }
    let crop = match meta.style {
        WearingStyle::TuckIn => Crop::From(body.y_waist, &[LABEL_TORSO]),
        WearingStyle::TuckOut => Crop::None,
    };
    Layout { regions, affines, crop }
}

fn layout_lower(body: &Body, meta: &Meta, geo: &mut ChaCha8Rng, dims: (usize, usize)) -> Layout {
    let (h, w) = (dims.0 as f64, dims.1 as f64);
    let sv = h / 64.0;
    let u: f64 = geo.random_range(1.02..1.10);
    let y0 = (8.0 * sv).round();
    let cx_f = (w / 2.0).round();
    let top = match meta.style {
        WearingStyle::TuckIn => body.y_waist,
        WearingStyle::TuckOut => body.shirt_hem,
    };

    if meta.lower_is_skirt {
        let h_fs = (geo.random_range(18..=22) as f64 * sv).round();
        let hips = body.hip_hw * 2.0;
        let w_fs = (1.18 * hips).round();
        let x0 = (cx_f - w_fs / 2.0).round();
        let rect = Rect { x0: x0 as i64, y0: y0 as i64, x1: (x0 + w_fs) as i64, y1: (y0 + h_fs) as i64 };
        let s_x = hips / w_fs;
        let mid = Affine::scale_to(s_x, s_x * u, (cx_f, y0), (body.cx, top));
        let crop = match meta.style {
            WearingStyle::TuckIn => Crop::To(body.shirt_hem, &[LABEL_SKIRT]),
            WearingStyle::TuckOut => Crop::None,
        };
        Layout { regions: vec![(LABEL_SKIRT, rect)], affines: [None, Some(mid), None], crop }
    } else {
        let h_fp = (geo.random_range(18..=22) as f64 * sv).round();
        let leg_w = body.hip_hw - 1.0;
        let w_fl = (1.18 * leg_w).round();
        let gap = 4.0;
        let lx0 = (cx_f - gap / 2.0 - w_fl).round();
        let rx0 = (cx_f + gap / 2.0).round();
        let left = Rect { x0: lx0 as i64, y0: y0 as i64, x1: (lx0 + w_fl) as i64, y1: (y0 + h_fp) as i64 };
        let right = Rect { x0: rx0 as i64, y0: y0 as i64, x1: (rx0 + w_fl) as i64, y1: (y0 + h_fp) as i64 };
        let s_x = leg_w / w_fl;
        let s_y = s_x * u;
        let la = Affine::scale_to(s_x, s_y, (lx0 + w_fl / 2.0, y0), (body.cx - body.hip_hw / 2.0 - 0.5, top));
        let ra = Affine::scale_to(s_x, s_y, (rx0 + w_fl / 2.0, y0), (body.cx + body.hip_hw / 2.0 + 0.5, top));
        let crop = match meta.style {
            WearingStyle::TuckIn => Crop::To(body.shirt_hem, &[LABEL_LEFT_PANT, LABEL_RIGHT_PANT]),
            WearingStyle::TuckOut => Crop::None,
        };
        Layout {
            regions: vec![(LABEL_LEFT_PANT, left), (LABEL_RIGHT_PANT, right)],
            affines: [Some(la), None, Some(ra)],
            crop,
        }
    }
}

fn layout_dress(
    body: &Body,
    arms: &[Arm; 2],
    meta: &Meta,
    geo: &mut ChaCha8Rng,
    dims: (usize, usize),
) -> Layout {
    let (h, w) = (dims.0 as f64, dims.1 as f64);
    let sv = h / 64.0;
    let sh = w / 48.0;
    let h_f = (geo.random_range(24..=28) as f64 * sv).round();
    let h_s = (geo.random_range(12..=14) as f64 * sv).round();
    let w_b = body.torso_hw * 2.0;
    let w_f = (1.18 * w_b).round();
    let u: f64 = geo.random_range(1.02..1.10);
    let sw = (geo.random_range(4..=5) as f64 * sv).round();
    let sl = if meta.long_sleeves {
        (geo.random_range(12..=15) as f64 * sh).round()
    } else {
        (geo.random_range(6..=9) as f64 * sh).round()
    };

    let y0 = (2.0 * sv).round();
    let cx_f = (w / 2.0).round();
    let tx0 = (cx_f - w_f / 2.0).round();
    let torso = Rect { x0: tx0 as i64, y0: y0 as i64, x1: (tx0 + w_f) as i64, y1: (y0 + h_f) as i64 };
    let skirt = Rect { x0: tx0 as i64, y0: (y0 + h_f) as i64, x1: (tx0 + w_f) as i64, y1: (y0 + h_f + h_s) as i64 };

    let s_x = w_b / w_f;
    // one shared affine keeps the dress a single rigid-scaled piece
    let mid = Affine::scale_to(s_x, s_x * u, (cx_f, y0), (body.cx, body.y_shoulder));
    let mut regions = vec![(LABEL_TORSO, torso), (LABEL_SKIRT, skirt)];
    let mut affines = [None, Some(mid), None];
    if !meta.sleeveless {
        let ls = Rect { x0: (tx0 - sl) as i64, y0: (y0 + 1.0) as i64, x1: tx0 as i64, y1: (y0 + 1.0 + sw) as i64 };
        let rs = Rect { x0: (tx0 + w_f) as i64, y0: (y0 + 1.0) as i64, x1: (tx0 + w_f + sl) as i64, y1: (y0 + 1.0 + sw) as i64 };
        affines[0] = Some(Affine::rigid_axis((-1.0, 0.0), arms[0].dir, (tx0, y0 + 1.0 + sw / 2.0), arms[0].shoulder));
        affines[2] = Some(Affine::rigid_axis((1.0, 0.0), arms[1].dir, (tx0 + w_f, y0 + 1.0 + sw / 2.0), arms[1].shoulder));
        regions.push((LABEL_LEFT_SLEEVE, ls));
        regions.push((LABEL_RIGHT_SLEEVE, rs));
    }
    Layout { regions, affines, crop: Crop::None }
}

fn seg_dist(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 { (((px - a.0) * vx + (py - a.1) * vy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (cx, cy) = (a.0 + t * vx, a.1 + t * vy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

fn draw_capsule_labels(map: &mut LabelMap, a: (f64, f64), b: (f64, f64), r: f64, label: u8) {
    let (h, w) = map.dims();
    for y in 0..h {
        for x in 0..w {
            if seg_dist(x as f64, y as f64, a, b) <= r {
                map.data[[y, x]] = label;
            }
        }
    }
}

fn draw_capsule_image(img: &mut Image, a: (f64, f64), b: (f64, f64), r: f64, color: [f64; 3]) {
    let (h, w) = img.dims();
    for y in 0..h {
        for x in 0..w {
            if seg_dist(x as f64, y as f64, a, b) <= r {
                for c in 0..3 {
                    img.data[[c, y, x]] = color[c];
                }
            }
        }
    }
}

/// Rasterize the warped garment labels by inverse-mapping every output
/// pixel into the flat frame, then apply the style crop and overlay skin.
fn raster_warped_parsing(
    dims: (usize, usize),
    layout: &Layout,
    body: &Body,
    arms: &[Arm; 2],
) -> LabelMap {
    let (h, w) = dims;
    let inverses: Vec<(u8, Rect, Affine)> = layout
        .regions
        .iter()
        .filter_map(|(label, rect)| {
            layout.affines[group_of(*label)].map(|a| (*label, *rect, a.inverse()))
        })
        .collect();
    let mut map = LabelMap::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            for (label, rect, inv) in &inverses {
                let (qx, qy) = inv.apply(x as f64, y as f64);
                if rect.contains_interior(qx, qy) {
                    map.data[[y, x]] = *label;
                }
            }
        }
    }
    match layout.crop {
        Crop::None => {}
        Crop::From(y_cut, labels) => {
            for y in (y_cut as usize).min(h)..h {
                for x in 0..w {
                    if labels.contains(&map.data[[y, x]]) {
                        map.data[[y, x]] = 0;
                    }
                }
            }
        }
        Crop::To(y_cut, labels) => {
            for y in 0..(y_cut as usize).min(h) {
                for x in 0..w {
                    if labels.contains(&map.data[[y, x]]) {
                        map.data[[y, x]] = 0;
                    }
                }
            }
        }
    }
    // neck, then arms over everything: occlusion is part of the ground truth
    let neck = Rect {
        x0: (body.cx - 2.0) as i64,
        y0: (body.y_shoulder - 4.0) as i64,
        x1: (body.cx + 2.0) as i64,
        y1: (body.y_shoulder + 1.0) as i64,
    };
    for y in 0..h {
        for x in 0..w {
            if neck.contains_px(x as i64, y as i64) {
                map.data[[y, x]] = LABEL_NECK;
            }
        }
    }
    draw_capsule_labels(&mut map, arms[0].shoulder, arms[0].hand, 1.4, LABEL_LEFT_ARM);
    draw_capsule_labels(&mut map, arms[1].shoulder, arms[1].hand, 1.4, LABEL_RIGHT_ARM);
    map
}

fn flat_garment(dims: (usize, usize), layout: &Layout, tex: &Texture) -> (Image, LabelMap) {
    let (h, w) = dims;
    let mut parsing = LabelMap::zeros(h, w);
    for (label, rect) in &layout.regions {
        for y in rect.y0.max(0)..rect.y1.min(h as i64) {
            for x in rect.x0.max(0)..rect.x1.min(w as i64) {
                parsing.data[[y as usize, x as usize]] = *label;
            }
        }
    }
    let image = Image::from_fn(h, w, |c, y, x| {
        if parsing.data[[y, x]] != 0 { tex.at(x as f64)[c] } else { 0.0 }
    });
    (image, parsing)
}

fn preserved_block(body: &Body, category: Category, dims: (usize, usize)) -> Option<Rect> {
    match category {
        Category::Upper => Some(Rect {
            x0: (body.cx - body.hip_hw - 1.0) as i64,
            y0: body.y_waist as i64,
            x1: (body.cx + body.hip_hw + 1.0) as i64,
            y1: body.y_leg_end as i64,
        }),
        Category::Lower => Some(Rect {
            x0: (body.cx - body.torso_hw - 2.0) as i64,
            y0: (body.y_shoulder - 1.0) as i64,
            x1: (body.cx + body.torso_hw + 2.0) as i64,
            y1: body.shirt_hem as i64,
        }),
        Category::Dresses => None,
    }
    .filter(|r| r.x0 >= 0 && r.y0 >= 0 && r.x1 <= dims.1 as i64 && r.y1 <= dims.0 as i64)
}

fn pants_texture(x: usize, y: usize) -> [f64; 3] {
    if (x / 3 + y / 3) % 2 == 0 { PANTS_A } else { PANTS_B }
}

fn render_pose_map(dims: (usize, usize), body: &Body, arms: &[Arm; 2]) -> Image {
    let (h, w) = dims;
    let mut img = Image::zeros(h, w);
    let r = 0.8;
    let sl = arms[0].shoulder;
    let sr = arms[1].shoulder;
    draw_capsule_image(&mut img, (body.cx, body.y_shoulder), (body.cx, body.y_waist), r, [1.0, 0.0, 0.0]);
    draw_capsule_image(&mut img, sl, sr, r, [0.0, 1.0, 0.0]);
    draw_capsule_image(&mut img, sl, arms[0].hand, r, [0.2, 0.4, 1.0]);
    draw_capsule_image(&mut img, sr, arms[1].hand, r, [1.0, 0.9, 0.2]);
    let lx = body.cx - body.hip_hw / 2.0;
    let rx = body.cx + body.hip_hw / 2.0;
    draw_capsule_image(&mut img, (lx, body.y_waist), (lx, body.y_leg_end), r, [1.0, 0.0, 1.0]);
    draw_capsule_image(&mut img, (rx, body.y_waist), (rx, body.y_leg_end), r, [0.0, 1.0, 1.0]);
    img
}

fn render_densepose(dims: (usize, usize), body: &Body, arms: &[Arm; 2]) -> Image {
    let (h, w) = dims;
    let mut img = Image::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f64, y as f64);
            if yf >= body.y_shoulder
                && yf < body.y_waist
                && (xf - body.cx).abs() <= body.torso_hw
            {
                for (c, v) in [0.85, 0.25, 0.25].iter().enumerate() {
                    img.data[[c, y, x]] = *v;
                }
            }
            if yf >= body.y_shoulder - 4.0 && yf < body.y_shoulder + 1.0 && (xf - body.cx).abs() <= 2.0 {
                for (c, v) in [0.9, 0.55, 0.15].iter().enumerate() {
                    img.data[[c, y, x]] = *v;
                }
            }
        }
    }
    let lx = body.cx - body.hip_hw / 2.0;
    let rx = body.cx + body.hip_hw / 2.0;
    draw_capsule_image(&mut img, (lx, body.y_waist), (lx, body.y_leg_end), 2.0, [0.8, 0.8, 0.25]);
    draw_capsule_image(&mut img, (rx, body.y_waist), (rx, body.y_leg_end), 2.0, [0.3, 0.8, 0.8]);
    draw_capsule_image(&mut img, arms[0].shoulder, arms[0].hand, 2.0, [0.2, 0.8, 0.3]);
    draw_capsule_image(&mut img, arms[1].shoulder, arms[1].hand, 2.0, [0.25, 0.35, 0.9]);
    img
}

/// All warped region corners must land inside the canvas with a margin,
/// except the middle part's lower edge when the style crops it anyway.
fn warped_in_bounds(layout: &Layout, dims: (usize, usize)) -> bool {
    let (h, w) = (dims.0 as f64, dims.1 as f64);
    let ok = |p: (f64, f64)| p.0 >= 1.0 && p.0 <= w - 2.0 && p.1 >= 1.0 && p.1 <= h - 2.0;
    for (label, rect) in &layout.regions {
        let aff = match layout.affines[group_of(*label)] {
            Some(a) => a,
            None => return false,
        };
        let cropped_bottom = matches!(layout.crop, Crop::From(_, labels) if labels.contains(label));
        let corners = [
            (rect.x0 as f64, rect.y0 as f64),
            ((rect.x1 - 1) as f64, rect.y0 as f64),
            (rect.x0 as f64, (rect.y1 - 1) as f64),
            ((rect.x1 - 1) as f64, (rect.y1 - 1) as f64),
        ];
        for (i, q) in corners.iter().enumerate() {
            let p = aff.apply(q.0, q.1);
            if i >= 2 && cropped_bottom {
                // hem hidden under the preserved block: only x must fit
                if p.0 < 1.0 || p.0 > w - 2.0 {
                    return false;
                }
            } else if !ok(p) {
                return false;
            }
        }
    }
    true
}

fn measured_style_ok(meta: &Meta, flat: &LabelMap, warped: &LabelMap) -> bool {
    match compute_r_style(flat, warped) {
        Ok(d) => match meta.style {
            WearingStyle::TuckIn => d.r_style > 0.5 && d.r_style <= 0.87,
            WearingStyle::TuckOut => (1.0..=1.1).contains(&d.r_style),
        },
        // pants have no middle part; style geometry does not apply
        Err(Error::EmptyTorso) => true,
        Err(_) => false,
    }
}

fn build_sample(cfg: &SynthConfig, meta: &Meta, index: u64, attempt: u64) -> Result<Option<WarpSample>> {
    let dims = (cfg.height, cfg.width);
    let mut geo = rng_for(cfg.seed, index, attempt, b"synthgeo");
    let body = make_body(cfg.height, cfg.width, &mut geo);
    let texture = Texture {
        kind: meta.tex_kind,
        ca: meta.color_a,
        cb: meta.color_b,
        period: geo.random_range(3..=6) as f64,
        split_x: cfg.width as f64 / 2.0,
    };
    let arm_len = match meta.pose {
        Pose::Raised => geo.random_range(13..=15) as f64,
        _ => geo.random_range(18..=21) as f64,
    } * (cfg.width as f64 / 48.0);
    let arms = make_arms(&body, meta.pose, arm_len, &mut geo);
    let layout = match meta.category {
        Category::Upper => layout_upper(&body, &arms, meta, &mut geo, dims),
        Category::Lower => layout_lower(&body, meta, &mut geo, dims),
        Category::Dresses => layout_dress(&body, &arms, meta, &mut geo, dims),
    };

    if !warped_in_bounds(&layout, dims) {
        return Ok(None);
    }

    let (mut garment, garment_parsing) = flat_garment(dims, &layout, &texture);
    garment.quantize();
    let gt_warped_parsing = raster_warped_parsing(dims, &layout, &body, &arms);
    if !measured_style_ok(meta, &garment_parsing, &gt_warped_parsing) {
        return Ok(None);
    }
    // every flat part must stay at least partly visible after warping
    for (label, _) in &layout.regions {
        if !gt_warped_parsing.data.iter().any(|l| l == label) {
            return Ok(None);
        }
    }

    let zero = FlowField::zeros(cfg.height, cfg.width);
    let mut flows: [FlowField; 3] = std::array::from_fn(|k| {
        layout.affines[k]
            .map(|a| backward_flow(cfg.height, cfg.width, &a))
            .unwrap_or_else(|| zero.clone())
    });
    for f in &mut flows {
        f.quantize();
    }

    let parts = PartSet::from_garment(&garment, &garment_parsing)?;
    let warped = warp_parts(&parts, &flows)?;
    let (assembled, _) = assemble_by_parsing(&warped, &gt_warped_parsing)?;

    let block = preserved_block(&body, meta.category, dims);
    let garment_labels = meta.category.garment_labels();
    let head = (body.cx, body.y_shoulder - 7.0);
    let leg_l = body.cx - body.hip_hw / 2.0;
    let leg_r = body.cx + body.hip_hw / 2.0;
    let mut person = Image::from_fn(cfg.height, cfg.width, |c, y, x| {
        let label = gt_warped_parsing.data[[y, x]];
        if garment_labels.contains(&label) {
            return assembled.data[[c, y, x]];
        }
        if label == LABEL_LEFT_ARM || label == LABEL_RIGHT_ARM || label == LABEL_NECK {
            return SKIN[c];
        }
        if let Some(b) = block {
            if b.contains_px(x as i64, y as i64) {
                return match meta.category {
                    Category::Upper => pants_texture(x, y)[c],
                    _ => SHIRT[c],
                };
            }
        }
        let (xf, yf) = (x as f64, y as f64);
        let d_head = ((xf - head.0).powi(2) + (yf - head.1).powi(2)).sqrt();
        if d_head <= 3.0 {
            return SKIN[c];
        }
        if yf >= body.y_waist
            && yf < body.y_leg_end
            && ((xf - leg_l).abs() <= 2.0 || (xf - leg_r).abs() <= 2.0)
        {
            return SKIN[c];
        }
        BG[c]
    });
    person.quantize();

    let human_parsing = LabelMap::from_fn(cfg.height, cfg.width, |y, x| {
        let label = gt_warped_parsing.data[[y, x]];
        if label != 0 {
            return label;
        }
        if let Some(b) = block {
            if b.contains_px(x as i64, y as i64) {
                return match meta.category {
                    Category::Upper => {
                        if (x as f64) < body.cx { LABEL_LEFT_PANT } else { LABEL_RIGHT_PANT }
                    }
                    _ => LABEL_TORSO,
                };
            }
        }
        0
    });

    let preserved_mask = LabelMap::from_fn(cfg.height, cfg.width, |y, x| {
        block.map_or(0, |b| b.contains_px(x as i64, y as i64) as u8)
    });

    Ok(Some(WarpSample {
        pose_map: render_pose_map(dims, &body, &arms),
        densepose_map: render_densepose(dims, &body, &arms),
        person,
        human_parsing,
        garment,
        garment_parsing,
        preserved_mask,
        category: meta.category,
        wearing_style_gt: meta.style,
        gt_flows: Some(flows),
        gt_warped_parsing,
    }))
}

/// Deterministic in (config.seed, index): geometry that violates canvas
/// bounds or the style's aspect-ratio band is re-rolled from a fresh
/// attempt-keyed stream, so accepted samples are bit-stable.
pub fn generate_sample(cfg: &SynthConfig, index: u64) -> Result<WarpSample> {
    cfg.validate()?;
    let meta = draw_meta(cfg, index);
    for attempt in 0..MAX_ATTEMPTS {
        if let Some(sample) = build_sample(cfg, &meta, index, attempt)? {
            return Ok(sample);
        }
    }
    Err(Error::InvalidArg(format!(
        "no viable geometry for sample {index} after {MAX_ATTEMPTS} attempts"
    )))
}

/// Write `count` samples plus the manifest under `out_dir`.
pub fn generate_dataset(cfg: &SynthConfig, count: usize, out_dir: &Path) -> Result<Vec<ManifestEntry>> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let sample = generate_sample(cfg, i as u64)?;
        let dir = format!("sample_{i:05}");
        let sample_dir = out_dir.join(&dir);
        std::fs::create_dir_all(&sample_dir)
            .map_err(|e| Error::io(sample_dir.display().to_string(), e))?;
        io::save_sample_dir(&sample_dir, &sample)?;
        entries.push(ManifestEntry {
            id: i,
            category: sample.category,
            style: sample.wearing_style_gt,
            dir,
        });
    }
    io::write_manifest(out_dir, cfg.seed, &entries)?;
    Ok(entries)
}

/// Mean absolute error between re-warped garment pixels and the person,
/// over the garment-labeled region. The recomposition oracle.
pub fn recomposition_error(sample: &WarpSample) -> Result<f64> {
    let flows = sample
        .gt_flows
        .as_ref()
        .ok_or_else(|| Error::InvalidArg("sample has no ground-truth flows".into()))?;
    let parts = PartSet::from_garment(&sample.garment, &sample.garment_parsing)?;
    let warped = warp_parts(&parts, flows)?;
    let (assembled, _) = assemble_by_parsing(&warped, &sample.gt_warped_parsing)?;
    let labels = sample.category.garment_labels();
    let (h, w) = sample.dims();
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            if labels.contains(&sample.gt_warped_parsing.data[[y, x]]) {
                for c in 0..3 {
                    total += (assembled.data[[c, y, x]] - sample.person.data[[c, y, x]]).abs();
                }
                count += 3;
            }
        }
    }
    if count == 0 {
        return Err(Error::InvalidArg("sample has no garment pixels".into()));
    }
    Ok(total / count as f64)
}
