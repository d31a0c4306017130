//! The warping network: two pyramid feature encoders and a five-level
//! cascade of blocks estimating per-part local flows plus a global garment
//! parsing at every scale.
//!
//! Each cascade level runs three stages. The coarse flow block warps each
//! part's garment features by the incoming flow, correlates them with the
//! person features, and predicts a residual flow from the cost volume. The
//! fine flow block repeats the refinement but fuses by channel
//! concatenation instead of correlation. The parsing block warps each
//! part's features by the refined flows, fuses them into one global
//! garment feature, and predicts parsing logits. Flows are transported to
//! the next finer level by bilinear resize with resolution-relative offset
//! scaling. Residual heads start at zero, so an untrained cascade is the
//! identity on flows.
//!
//! `parts = 1` builds the single-global-flow baseline used in ablations:
//! one flow warps the whole garment and the parsing block fuses a single
//! branch.

use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;

use crate::nn::{Conv2d, ParamStore};
use crate::tensor::{Tape, Val};
use crate::types::{FlowField, Image, LabelMap, PartGroup, WarpSample, NUM_LABELS};
use crate::warp;
use crate::{Error, Result};

pub const PYRAMID_LEVELS: usize = 5;

/// Smallest input a five-level pyramid supports. Dims must be multiples
/// of 16 so the first four halvings are exact; the last level may floor.
pub fn check_pyramid_dims(h: usize, w: usize) -> Result<()> {
    if h < 32 || w < 32 || h % 16 != 0 || w % 16 != 0 {
        return Err(Error::InvalidArg(format!(
            "pyramid-incompatible resolution {h}x{w} (need >= 32 and divisible by 16)"
        )));
    }
    Ok(())
}

/// Spatial dims per pyramid level, finest first: level i has the input
/// dims halved i times (floor).
pub fn pyramid_dims(h: usize, w: usize) -> [(usize, usize); PYRAMID_LEVELS] {
    let mut out = [(0usize, 0usize); PYRAMID_LEVELS];
    let (mut ch, mut cw) = (h, w);
    for slot in &mut out {
        ch /= 2;
        cw /= 2;
        *slot = (ch, cw);
    }
    out
}

#[derive(Clone, Debug)]
pub struct WarpModelCfg {
    /// Feature channels per pyramid level, finest first.
    pub channels: [usize; PYRAMID_LEVELS],
    /// Hidden width of the flow and parsing heads.
    pub head_hidden: usize,
    pub corr_radius: usize,
    /// Number of independently warped parts: 3 for the local-flow model,
    /// 1 for the global-flow baseline.
    pub parts: usize,
}

impl Default for WarpModelCfg {
    fn default() -> Self {
        WarpModelCfg { channels: [6, 8, 10, 12, 16], head_hidden: 8, corr_radius: 3, parts: 3 }
    }
}

impl WarpModelCfg {
    pub fn global() -> Self {
        WarpModelCfg { parts: 1, ..Default::default() }
    }
}

struct EncLevel {
    down: Conv2d,
    conv: Conv2d,
}

/// A five-level strided convolutional feature pyramid. Downsampling uses
/// 2x2 stride-2 convolutions, which floor-halve odd dims exactly.
pub struct Encoder {
    levels: Vec<EncLevel>,
}

impl Encoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        channels: &[usize; PYRAMID_LEVELS],
    ) -> Self {
        let mut levels = Vec::with_capacity(PYRAMID_LEVELS);
        let mut ci = in_ch;
        for (i, &co) in channels.iter().enumerate() {
            let down = Conv2d::new(store, rng, &format!("{name}.l{i}.down"), ci, co, 2, 2, 0);
            let conv = Conv2d::new(store, rng, &format!("{name}.l{i}.conv"), co, co, 3, 1, 1);
            levels.push(EncLevel { down, conv });
            ci = co;
        }
        Encoder { levels }
    }

    /// Extract the feature pyramid, finest level first.
    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: Val) -> Vec<Val> {
        let mut out = Vec::with_capacity(PYRAMID_LEVELS);
        let mut cur = x;
        for level in &self.levels {
            let d = level.down.apply(t, store, cur);
            let d = t.leaky_relu(d, 0.2);
            let c = level.conv.apply(t, store, d);
            cur = t.leaky_relu(c, 0.2);
            out.push(cur);
        }
        out
    }
}

/// Residual flow head: pointwise mix of the fusion input, one 3x3 hidden
/// layer, and a zero-initialized 3x3 output layer emitting (dx, dy).
struct FlowHead {
    c1: Conv2d,
    c2: Conv2d,
    c3: Conv2d,
}

impl FlowHead {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, in_ch: usize, hidden: usize) -> Self {
        FlowHead {
            c1: Conv2d::new(store, rng, &format!("{name}.c1"), in_ch, hidden, 1, 1, 0),
            c2: Conv2d::new(store, rng, &format!("{name}.c2"), hidden, hidden, 3, 1, 1),
            c3: Conv2d::zeroed(store, &format!("{name}.c3"), hidden, 2, 3, 1, 1),
        }
    }

    fn apply(&self, t: &mut Tape, store: &ParamStore, x: Val) -> Val {
        let h = self.c1.apply(t, store, x);
        let h = t.leaky_relu(h, 0.2);
        let h = self.c2.apply(t, store, h);
        let h = t.leaky_relu(h, 0.2);
        self.c3.apply(t, store, h)
    }
}

/// Parsing block: fuse the warped part features, join with the person
/// features, and emit label logits. The logit layer starts at zero so the
/// untrained parsing is uniform.
struct GpBlock {
    fuse: Conv2d,
    hidden: Conv2d,
    logits: Conv2d,
}

impl GpBlock {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, ch: usize, parts: usize, hidden: usize) -> Self {
        GpBlock {
            fuse: Conv2d::new(store, rng, &format!("{name}.fuse"), parts * ch, ch, 3, 1, 1),
            hidden: Conv2d::new(store, rng, &format!("{name}.hidden"), 2 * ch, hidden, 3, 1, 1),
            logits: Conv2d::zeroed(store, &format!("{name}.logits"), hidden, NUM_LABELS, 1, 1, 0),
        }
    }
}

/// Scale a flow node to new dims, keeping offsets resolution-relative.
pub fn resize_flow_tape(t: &mut Tape, flow: Val, h_out: usize, w_out: usize) -> Val {
    let (h, w) = {
        let s = t.value(flow).shape();
        (s[1], s[2])
    };
    let resized = t.resize_bilinear(flow, h_out, w_out);
    let sx = w_out as f64 / w as f64;
    let sy = h_out as f64 / h as f64;
    let mut scale = ArrayD::zeros(IxDyn(&[2, h_out, w_out]));
    scale.index_axis_mut(ndarray::Axis(0), 0).fill(sx);
    scale.index_axis_mut(ndarray::Axis(0), 1).fill(sy);
    let scale = t.constant(scale);
    t.mul(resized, scale)
}

/// Everything one forward pass produces, finest level first. Residuals
/// are kept so the cascade can be replayed and audited.
pub struct WarpForward {
    pub flows: Vec<Vec<Val>>,
    pub logits: Vec<Val>,
    pub cf_residuals: Vec<Vec<Val>>,
    pub ff_residuals: Vec<Vec<Val>>,
}

pub struct WarpModel {
    pub cfg: WarpModelCfg,
    enc_p: Encoder,
    enc_g: Encoder,
    cf: Vec<Vec<FlowHead>>,
    ff: Vec<Vec<FlowHead>>,
    gp: Vec<GpBlock>,
}

/// Input planes for the person encoder: pose map, densepose map, and the
/// preserved-region mask. All are style-free conditioning.
pub fn person_input(sample: &WarpSample) -> ArrayD<f64> {
    stack_planes(&[
        sample.pose_map.to_dyn(),
        sample.densepose_map.to_dyn(),
        sample.preserved_mask.to_plane(1.0),
    ])
}

/// Input planes for the garment encoder: the garment image and a one-hot
/// encoding of its part groups.
pub fn garment_input(garment: &Image, parsing: &LabelMap) -> ArrayD<f64> {
    stack_planes(&[garment.to_dyn(), parsing.group_onehot()])
}

/// Garment input restricted to one part: pixels outside the part are
/// blanked in both image and one-hot planes.
pub fn garment_input_part(garment: &Image, parsing: &LabelMap, group: PartGroup) -> ArrayD<f64> {
    let mask = parsing.group_mask(group);
    let masked = garment.masked(&mask);
    let (h, w) = parsing.dims();
    let restricted = LabelMap::from_fn(h, w, |y, x| {
        if mask.data[[y, x]] != 0 { parsing.data[[y, x]] } else { 0 }
    });
    stack_planes(&[masked.to_dyn(), restricted.group_onehot()])
}

fn stack_planes(planes: &[ArrayD<f64>]) -> ArrayD<f64> {
    let (h, w) = (planes[0].shape()[1], planes[0].shape()[2]);
    let c: usize = planes.iter().map(|p| p.shape()[0]).sum();
    let mut out = Vec::with_capacity(c * h * w);
    for p in planes {
        assert_eq!(&p.shape()[1..], &[h, w]);
        out.extend_from_slice(p.as_slice().unwrap());
    }
    ArrayD::from_shape_vec(IxDyn(&[c, h, w]), out).unwrap()
}

pub const PERSON_IN_CH: usize = 7;
pub const GARMENT_IN_CH: usize = 7;

impl WarpModel {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: WarpModelCfg) -> Self {
        assert!(cfg.parts == 1 || cfg.parts == 3, "parts must be 1 or 3");
        let enc_p = Encoder::new(store, rng, "warp.enc_p", PERSON_IN_CH, &cfg.channels);
        let enc_g = Encoder::new(store, rng, "warp.enc_g", GARMENT_IN_CH, &cfg.channels);
        let corr_ch = (2 * cfg.corr_radius + 1) * (2 * cfg.corr_radius + 1);
        let mut cf = Vec::new();
        let mut ff = Vec::new();
        let mut gp = Vec::new();
        for (i, &ch) in cfg.channels.iter().enumerate() {
            let mut cf_i = Vec::new();
            let mut ff_i = Vec::new();
            for k in 0..cfg.parts {
                cf_i.push(FlowHead::new(store, rng, &format!("warp.cf.l{i}.p{k}"), corr_ch, cfg.head_hidden));
                ff_i.push(FlowHead::new(store, rng, &format!("warp.ff.l{i}.p{k}"), 2 * ch, cfg.head_hidden));
            }
            cf.push(cf_i);
            ff.push(ff_i);
            gp.push(GpBlock::new(store, rng, &format!("warp.gp.l{i}"), ch, cfg.parts, cfg.head_hidden));
        }
        WarpModel { cfg, enc_p, enc_g, cf, ff, gp }
    }

    pub fn extract_person_features(&self, t: &mut Tape, store: &ParamStore, input: ArrayD<f64>) -> Result<Vec<Val>> {
        check_pyramid_dims(input.shape()[1], input.shape()[2])?;
        let x = t.constant(input);
        Ok(self.enc_p.forward(t, store, x))
    }

    pub fn extract_garment_features(&self, t: &mut Tape, store: &ParamStore, input: ArrayD<f64>) -> Result<Vec<Val>> {
        check_pyramid_dims(input.shape()[1], input.shape()[2])?;
        let x = t.constant(input);
        Ok(self.enc_g.forward(t, store, x))
    }

    /// Per-part garment pyramids for one sample: the local model encodes
    /// each part-masked garment separately so parts stay independent; the
    /// global model encodes the whole garment once.
    pub fn garment_pyramids(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        sample: &WarpSample,
    ) -> Result<Vec<Vec<Val>>> {
        if self.cfg.parts == 1 {
            let input = garment_input(&sample.garment, &sample.garment_parsing);
            Ok(vec![self.extract_garment_features(t, store, input)?])
        } else {
            PartGroup::GARMENT_GROUPS
                .iter()
                .map(|&g| {
                    let input = garment_input_part(&sample.garment, &sample.garment_parsing, g);
                    self.extract_garment_features(t, store, input)
                })
                .collect()
        }
    }

    /// Run the cascade over prepared pyramids. `garment_pyrs` holds one
    /// pyramid per part (or one total for the global model).
    pub fn forward(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        person_pyr: &[Val],
        garment_pyrs: &[Vec<Val>],
    ) -> WarpForward {
        assert_eq!(garment_pyrs.len(), self.cfg.parts);
        let n = PYRAMID_LEVELS;
        let coarsest = {
            let s = t.value(person_pyr[n - 1]).shape();
            (s[1], s[2])
        };
        let mut flows: Vec<Val> = (0..self.cfg.parts)
            .map(|_| t.constant(ArrayD::zeros(IxDyn(&[2, coarsest.0, coarsest.1]))))
            .collect();

        let mut out_flows = vec![Vec::new(); n];
        let mut out_logits = vec![None; n];
        let mut out_cf = vec![Vec::new(); n];
        let mut out_ff = vec![Vec::new(); n];

        for li in (0..n).rev() {
            let p_i = person_pyr[li];
            let (h_i, w_i) = {
                let s = t.value(p_i).shape();
                (s[1], s[2])
            };
            if li < n - 1 {
                flows = flows.iter().map(|&f| resize_flow_tape(t, f, h_i, w_i)).collect();
            }
            // coarse refinement from a correlation cost volume
            for k in 0..self.cfg.parts {
                let g_w = t.flow_sample(garment_pyrs[k][li], flows[k]);
                let vol = t.correlation(p_i, g_w, self.cfg.corr_radius);
                let res = self.cf[li][k].apply(t, store, vol);
                out_cf[li].push(res);
                flows[k] = t.add(flows[k], res);
            }
            // fine refinement from concatenated features
            for k in 0..self.cfg.parts {
                let g_w = t.flow_sample(garment_pyrs[k][li], flows[k]);
                let cat = t.concat(&[g_w, p_i]);
                let res = self.ff[li][k].apply(t, store, cat);
                out_ff[li].push(res);
                flows[k] = t.add(flows[k], res);
            }
            // global parsing from the fused warped parts; the flow enters
            // as a constant so parsing losses cannot steer the warp
            let warped: Vec<Val> = (0..self.cfg.parts)
                .map(|k| {
                    let frozen = t.value(flows[k]).clone();
                    let frozen = t.constant(frozen);
                    t.flow_sample(garment_pyrs[k][li], frozen)
                })
                .collect();
            let fused_in = if warped.len() == 1 { warped[0] } else { t.concat(&warped) };
            let fused = self.gp[li].fuse.apply(t, store, fused_in);
            let fused = t.leaky_relu(fused, 0.2);
            let cat = t.concat(&[fused, p_i]);
            let h = self.gp[li].hidden.apply(t, store, cat);
            let h = t.leaky_relu(h, 0.2);
            out_logits[li] = Some(self.gp[li].logits.apply(t, store, h));
            out_flows[li] = flows.clone();
        }

        WarpForward {
            flows: out_flows,
            logits: out_logits.into_iter().map(|l| l.unwrap()).collect(),
            cf_residuals: out_cf,
            ff_residuals: out_ff,
        }
    }

    /// Convenience: encode a sample and run the cascade in one call.
    pub fn forward_sample(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        sample: &WarpSample,
    ) -> Result<WarpForward> {
        let p_in = person_input(sample);
        let person_pyr = self.extract_person_features(t, store, p_in)?;
        let garment_pyrs = self.garment_pyramids(t, store, sample)?;
        Ok(self.forward(t, store, &person_pyr, &garment_pyrs))
    }
}

/// Frozen-parameter products of one forward pass at full resolution:
/// three flows (the global model's single flow is replicated) and the
/// argmax parsing from the finest logits.
pub struct WarpInference {
    pub flows_full: [FlowField; 3],
    pub parsing_full: LabelMap,
    pub logits_finest: ArrayD<f64>,
}

pub fn infer_warp(model: &WarpModel, store: &ParamStore, sample: &WarpSample) -> Result<WarpInference> {
    let mut t = Tape::new();
    let fwd = model.forward_sample(&mut t, store, sample)?;
    let (h, w) = sample.dims();
    let mut flows = Vec::with_capacity(3);
    for k in 0..3 {
        let idx = if model.cfg.parts == 1 { 0 } else { k };
        let f = FlowField::from_dyn(t.value(fwd.flows[0][idx]).clone())?;
        flows.push(warp::resize_flow(&f, h, w));
    }
    let [l, m, r] = <[FlowField; 3]>::try_from(flows).ok().expect("three flows");
    let logits = t.value(fwd.logits[0]).clone();
    let up = crate::tensor::resize_bilinear_forward(&logits, h, w);
    let parsing = LabelMap::from_fn(h, w, |y, x| {
        let mut best = 0usize;
        let mut bv = f64::NEG_INFINITY;
        for c in 0..NUM_LABELS {
            let v = up[[c, y, x]];
            if v > bv {
                bv = v;
                best = c;
            }
        }
        best as u8
    });
    Ok(WarpInference { flows_full: [l, m, r], parsing_full: parsing, logits_finest: logits })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn toy_sample(h: usize, w: usize) -> WarpSample {
        let mut parsing = LabelMap::zeros(h, w);
        for y in h / 4..3 * h / 4 {
            for x in w / 4..3 * w / 4 {
                parsing.data[[y, x]] = crate::types::LABEL_TORSO;
            }
            parsing.data[[y, w / 4 - 1]] = crate::types::LABEL_LEFT_SLEEVE;
            parsing.data[[y, 3 * w / 4]] = crate::types::LABEL_RIGHT_SLEEVE;
        }
        let garment = Image::from_fn(h, w, |c, y, x| {
            (((c + 1) * (y * 3 + x)) % 17) as f64 / 17.0
        });
        WarpSample {
            person: Image::zeros(h, w),
            human_parsing: parsing.clone(),
            garment,
            garment_parsing: parsing.clone(),
            pose_map: Image::from_fn(h, w, |c, y, x| ((c + y + x) % 5) as f64 / 5.0),
            densepose_map: Image::from_fn(h, w, |c, y, x| ((c * y + x) % 7) as f64 / 7.0),
            preserved_mask: LabelMap::zeros(h, w),
            category: crate::types::Category::Upper,
            wearing_style_gt: crate::types::WearingStyle::TuckOut,
            gt_flows: None,
            gt_warped_parsing: parsing,
        }
    }

    #[test]
    fn pyramid_dims_match_halving() {
        assert_eq!(pyramid_dims(64, 48), [(32, 24), (16, 12), (8, 6), (4, 3), (2, 1)]);
        assert!(check_pyramid_dims(64, 48).is_ok());
        assert!(check_pyramid_dims(64, 47).is_err());
        assert!(check_pyramid_dims(16, 64).is_err());
        let err = check_pyramid_dims(60, 48).unwrap_err().to_string();
        assert!(err.contains("pyramid-incompatible"), "{err}");
    }

    #[test]
    fn untrained_cascade_is_identity_on_flows() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = WarpModel::new(&mut store, &mut rng, WarpModelCfg::default());
        let sample = toy_sample(32, 32);
        let mut t = Tape::new();
        let fwd = model.forward_sample(&mut t, &store, &sample).unwrap();
        for level in &fwd.flows {
            for &f in level {
                assert!(t.value(f).iter().all(|v| *v == 0.0));
            }
        }
        assert_eq!(fwd.flows.len(), PYRAMID_LEVELS);
        assert_eq!(fwd.logits.len(), PYRAMID_LEVELS);
        assert_eq!(fwd.flows[0].len(), 3);
        // finest logits live at half resolution with one channel per label
        assert_eq!(t.value(fwd.logits[0]).shape(), &[NUM_LABELS, 16, 16]);
    }

    #[test]
    fn forward_is_deterministic() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let model = WarpModel::new(&mut store, &mut rng, WarpModelCfg::default());
        let sample = toy_sample(32, 32);
        let run = || {
            let mut t = Tape::new();
            let fwd = model.forward_sample(&mut t, &store, &sample).unwrap();
            t.value(fwd.logits[0]).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn single_pixel_perturbation_reaches_finest_features() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let model = WarpModel::new(&mut store, &mut rng, WarpModelCfg::default());
        let sample = toy_sample(32, 32);
        let mut perturbed = sample.clone();
        perturbed.pose_map.data[[0, 9, 9]] = (perturbed.pose_map.data[[0, 9, 9]] + 0.5).min(1.0);
        let feats = |s: &WarpSample| {
            let mut t = Tape::new();
            let pyr = model.extract_person_features(&mut t, &store, person_input(s)).unwrap();
            t.value(pyr[0]).clone()
        };
        assert_ne!(feats(&sample), feats(&perturbed));
    }

    #[test]
    fn parts_are_independent_in_the_local_model() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let model = WarpModel::new(&mut store, &mut rng, WarpModelCfg::default());
        // with zero heads flows stay zero regardless; nudge the cf heads so
        // flows react to features
        for slot in 0..store.len() {
            if store.name(slot).contains(".c3.w") {
                let mut v = store.value(slot).clone();
                let mut r = ChaCha8Rng::seed_from_u64(slot as u64);
                v.mapv_inplace(|_| rand::Rng::random_range(&mut r, -0.05..0.05));
                *store.value_mut(slot) = v;
            }
        }
        let sample = toy_sample(32, 32);
        let mut blanked = sample.clone();
        // erase the left sleeve's image content, keep the parsing
        for y in 0..32 {
            for x in 0..32 {
                if blanked.garment_parsing.data[[y, x]] == crate::types::LABEL_LEFT_SLEEVE {
                    for c in 0..3 {
                        blanked.garment.data[[c, y, x]] = 0.0;
                    }
                }
            }
        }
        let flows = |s: &WarpSample| {
            let mut t = Tape::new();
            let fwd = model.forward_sample(&mut t, &store, s).unwrap();
            fwd.flows[0].iter().map(|&f| t.value(f).clone()).collect::<Vec<_>>()
        };
        let a = flows(&sample);
        let b = flows(&blanked);
        assert_ne!(a[0], b[0], "left flow should react to its own content");
        assert_eq!(a[1], b[1], "middle flow must ignore left-part content");
        assert_eq!(a[2], b[2], "right flow must ignore left-part content");
    }

    #[test]
    fn cascade_replays_from_residuals() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let model = WarpModel::new(&mut store, &mut rng, WarpModelCfg::default());
        for slot in 0..store.len() {
            if store.name(slot).contains(".c3.") {
                let mut v = store.value(slot).clone();
                let mut r = ChaCha8Rng::seed_from_u64(100 + slot as u64);
                v.mapv_inplace(|_| rand::Rng::random_range(&mut r, -0.02..0.02));
                *store.value_mut(slot) = v;
            }
        }
        let sample = toy_sample(32, 32);
        let mut t = Tape::new();
        let fwd = model.forward_sample(&mut t, &store, &sample).unwrap();
        // replay: chain residuals and inter-level transport by hand
        for k in 0..3 {
            let mut f = FlowField::zeros(1, 1);
            for li in (0..PYRAMID_LEVELS).rev() {
                let dims = t.value(fwd.cf_residuals[li][k]).shape().to_vec();
                if li == PYRAMID_LEVELS - 1 {
                    f = FlowField::zeros(dims[1], dims[2]);
                } else {
                    f = warp::resize_flow(&f, dims[1], dims[2]);
                }
                let cf = FlowField::from_dyn(t.value(fwd.cf_residuals[li][k]).clone()).unwrap();
                let ff = FlowField::from_dyn(t.value(fwd.ff_residuals[li][k]).clone()).unwrap();
                f = FlowField { data: f.data + cf.data + ff.data };
            }
            let direct = FlowField::from_dyn(t.value(fwd.flows[0][k]).clone()).unwrap();
            let diff = (f.data - direct.data).iter().map(|v| v.abs()).fold(0.0, f64::max);
            assert!(diff < 1e-12, "part {k} replay diff {diff}");
        }
    }

    #[test]
    #[ignore = "timing probe, run by hand"]
    fn timing_probe() {
        for (tag, cfg) in [
            ("default", WarpModelCfg::default()),
            ("global", WarpModelCfg::global()),
            (
                "wide",
                WarpModelCfg {
                    channels: [8, 10, 12, 16, 20],
                    head_hidden: 10,
                    corr_radius: 3,
                    parts: 3,
                },
            ),
        ] {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let model = WarpModel::new(&mut store, &mut rng, cfg);
            let sample = toy_sample(64, 48);
            let start = std::time::Instant::now();
            let reps = 10;
            for _ in 0..reps {
                let mut t = Tape::new();
                let fwd = model.forward_sample(&mut t, &store, &sample).unwrap();
                let mut terms = Vec::new();
                for level in &fwd.flows {
                    for &f in level {
                        terms.push((t.mean_all(f), 1.0));
                    }
                }
                for &l in &fwd.logits {
                    terms.push((t.mean_all(l), 1.0));
                }
                let loss = t.wsum(&terms);
                let g = t.backward(loss);
                std::hint::black_box(g.global_norm());
            }
            let el = start.elapsed();
            println!(
                "{tag}: params={} fwd+bwd {:.1} ms/sample",
                store.element_count(),
                el.as_secs_f64() * 1000.0 / reps as f64
            );
        }
    }

    #[test]
    fn global_variant_produces_one_flow_and_inference_replicates_it() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let model = WarpModel::new(&mut store, &mut rng, WarpModelCfg::global());
        let sample = toy_sample(32, 32);
        let mut t = Tape::new();
        let fwd = model.forward_sample(&mut t, &store, &sample).unwrap();
        assert_eq!(fwd.flows[0].len(), 1);
        let inf = infer_warp(&model, &store, &sample).unwrap();
        assert_eq!(inf.flows_full[0].data, inf.flows_full[1].data);
        assert_eq!(inf.flows_full[1].data, inf.flows_full[2].data);
        assert_eq!(inf.parsing_full.dims(), (32, 32));
    }
}
