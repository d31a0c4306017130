//! The try-on generator: a residual U-Net that paints the final person
//! from skin cues, the warped garment, and the untouched region, then
//! blends its own painting with the warped garment through a predicted
//! alpha mask.

use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;

use crate::model::{check_pyramid_dims, PYRAMID_LEVELS};
use crate::nn::{Conv2d, ParamStore};
use crate::tensor::{Tape, Val};
use crate::types::{Image, LabelMap, NUM_LABELS};
use crate::{Error, Result};

pub const GEN_IN_CH: usize = 10;
pub const GEN_CHANNELS: [usize; PYRAMID_LEVELS] = [8, 12, 16, 20, 24];

/// Constant image holding the per-channel median of the skin pixels
/// (arms and neck). Falls back to 0.5 when the person shows no skin.
pub fn make_skin_color_map(person: &Image, human_parsing: &LabelMap) -> Result<Image> {
    let (h, w) = person.dims();
    if human_parsing.dims() != (h, w) {
        return Err(Error::DimMismatch(format!(
            "person {:?} vs parsing {:?}",
            person.dims(),
            human_parsing.dims()
        )));
    }
    let mut median = [0.5f64; 3];
    for c in 0..3 {
        let mut vals: Vec<f64> = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if matches!(human_parsing.data[[y, x]], 4..=6) {
                    vals.push(person.data[[c, y, x]]);
                }
            }
        }
        if vals.is_empty() {
            break;
        }
        vals.sort_by(|a, b| a.total_cmp(b));
        let n = vals.len();
        median[c] = if n % 2 == 1 { vals[n / 2] } else { 0.5 * (vals[n / 2 - 1] + vals[n / 2]) };
    }
    Ok(Image::from_fn(h, w, |c, _, _| median[c]))
}

/// Keep the skin labels (arms, neck); zero everything else.
pub fn make_skin_parsing(parsing: &LabelMap) -> LabelMap {
    let (h, w) = parsing.dims();
    LabelMap::from_fn(h, w, |y, x| {
        let l = parsing.data[[y, x]];
        if matches!(l, 4..=6) { l } else { 0 }
    })
}

#[derive(Clone, Debug)]
pub struct GeneratorInputs {
    pub skin_color: Image,
    pub skin_parsing: LabelMap,
    pub warped_garment: Image,
    pub preserved_image: Image,
}

impl GeneratorInputs {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.skin_color.dims();
        check_pyramid_dims(h, w)?;
        for (name, d) in [
            ("skin_parsing", self.skin_parsing.dims()),
            ("warped_garment", self.warped_garment.dims()),
            ("preserved_image", self.preserved_image.dims()),
        ] {
            if d != (h, w) {
                return Err(Error::DimMismatch(format!("{name} {d:?} vs skin_color {:?}", (h, w))));
            }
        }
        Ok(())
    }

    /// Channel-concatenated conditioning: 3 skin color, 1 normalized skin
    /// parsing, 3 warped garment, 3 preserved region.
    pub fn to_planes(&self) -> ArrayD<f64> {
        let (h, w) = self.skin_color.dims();
        let mut out = ArrayD::zeros(IxDyn(&[GEN_IN_CH, h, w]));
        let norm = 1.0 / (NUM_LABELS - 1) as f64;
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    out[[c, y, x]] = self.skin_color.data[[c, y, x]];
                    out[[4 + c, y, x]] = self.warped_garment.data[[c, y, x]];
                    out[[7 + c, y, x]] = self.preserved_image.data[[c, y, x]];
                }
                out[[3, y, x]] = self.skin_parsing.data[[y, x]] as f64 * norm;
            }
        }
        out
    }
}

struct ResBlock {
    c1: Conv2d,
    c2: Conv2d,
}

impl ResBlock {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, ch: usize) -> Self {
        ResBlock {
            c1: Conv2d::new(store, rng, &format!("{name}.c1"), ch, ch, 3, 1, 1),
            c2: Conv2d::new(store, rng, &format!("{name}.c2"), ch, ch, 3, 1, 1),
        }
    }

    fn apply(&self, t: &mut Tape, store: &ParamStore, x: Val) -> Val {
        let a = self.c1.apply(t, store, x);
        let a = t.leaky_relu(a, 0.2);
        let b = self.c2.apply(t, store, a);
        let s = t.add(x, b);
        t.leaky_relu(s, 0.2)
    }
}

pub struct GenForward {
    pub tryon: Val,
    pub raw: Val,
    pub alpha: Val,
}

/// Res-UNet, five scales, skip connections by concatenation. Two sigmoid
/// heads split the output into the painted image and the blend mask.
pub struct Generator {
    stem: Conv2d,
    down_res: Vec<ResBlock>,
    downs: Vec<Conv2d>,
    up_convs: Vec<Conv2d>,
    fuses: Vec<Conv2d>,
    head_raw: Conv2d,
    head_alpha: Conv2d,
}

impl Generator {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let ch = GEN_CHANNELS;
        let stem = Conv2d::new(store, rng, "gen.stem", GEN_IN_CH, ch[0], 3, 1, 1);
        let mut down_res = Vec::new();
        let mut downs = Vec::new();
        for i in 0..PYRAMID_LEVELS {
            down_res.push(ResBlock::new(store, rng, &format!("gen.res{i}"), ch[i]));
            if i + 1 < PYRAMID_LEVELS {
                downs.push(Conv2d::new(store, rng, &format!("gen.down{i}"), ch[i], ch[i + 1], 2, 2, 0));
            }
        }
        let mut up_convs = Vec::new();
        let mut fuses = Vec::new();
        for i in (0..PYRAMID_LEVELS - 1).rev() {
            up_convs.push(Conv2d::new(store, rng, &format!("gen.up{i}"), ch[i + 1], ch[i], 3, 1, 1));
            fuses.push(Conv2d::new(store, rng, &format!("gen.fuse{i}"), 2 * ch[i], ch[i], 3, 1, 1));
        }
        let head_raw = Conv2d::new(store, rng, "gen.head_raw", ch[0], 3, 3, 1, 1);
        let head_alpha = Conv2d::new(store, rng, "gen.head_alpha", ch[0], 1, 3, 1, 1);
        Generator { stem, down_res, downs, up_convs, fuses, head_raw, head_alpha }
    }

    /// Run the net on already-validated inputs; `planes` is the 10-channel
    /// conditioning stack and `warped` the garment it may copy from.
    pub fn forward(&self, t: &mut Tape, store: &ParamStore, planes: Val, warped: Val) -> GenForward {
        let mut x = self.stem.apply(t, store, planes);
        x = t.leaky_relu(x, 0.2);
        let mut skips = Vec::with_capacity(PYRAMID_LEVELS);
        for i in 0..PYRAMID_LEVELS {
            x = self.down_res[i].apply(t, store, x);
            skips.push(x);
            if i + 1 < PYRAMID_LEVELS {
                x = self.downs[i].apply(t, store, x);
                x = t.leaky_relu(x, 0.2);
            }
        }
        let mut up = skips[PYRAMID_LEVELS - 1];
        for (j, i) in (0..PYRAMID_LEVELS - 1).rev().enumerate() {
            let s = t.value(skips[i]).shape().to_vec();
            let r = t.resize_bilinear(up, s[1], s[2]);
            let r = self.up_convs[j].apply(t, store, r);
            let r = t.leaky_relu(r, 0.2);
            let cat = t.concat(&[r, skips[i]]);
            let f = self.fuses[j].apply(t, store, cat);
            up = t.leaky_relu(f, 0.2);
        }
        let raw_logits = self.head_raw.apply(t, store, up);
        let raw = t.sigmoid(raw_logits);
        let alpha_logits = self.head_alpha.apply(t, store, up);
        let alpha = t.sigmoid(alpha_logits);

        let garment_part = t.mul_bcast(warped, alpha);
        let neg_alpha = t.scale(alpha, -1.0);
        let inv_alpha = t.add_scalar(neg_alpha, 1.0);
        let raw_part = t.mul_bcast(raw, inv_alpha);
        let tryon = t.add(garment_part, raw_part);
        GenForward { tryon, raw, alpha }
    }

    /// Convenience wrapper: validate, stage constants, run.
    pub fn forward_inputs(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        inputs: &GeneratorInputs,
    ) -> Result<GenForward> {
        inputs.validate()?;
        let planes = t.constant(inputs.to_planes());
        let warped = t.constant(inputs.warped_garment.to_dyn());
        Ok(self.forward(t, store, planes, warped))
    }
}

/// Deterministic parameter construction for the generator stage.
pub fn build_generator(store: &mut ParamStore, seed: u64) -> Generator {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Generator::new(store, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{LABEL_LEFT_ARM, LABEL_NECK, LABEL_TORSO};
    use rand::SeedableRng;

    fn toy_inputs(h: usize, w: usize, seed: u64) -> GeneratorInputs {
        let mix = |c: usize, y: usize, x: usize, k: u64| {
            (((c as u64 + 2) * (y as u64 * 31 + x as u64 * 7 + k)) % 97) as f64 / 96.0
        };
        GeneratorInputs {
            skin_color: Image::from_fn(h, w, |c, y, x| mix(c, y, x, seed)),
            skin_parsing: LabelMap::from_fn(h, w, |y, x| if (y + x) % 5 == 0 { LABEL_LEFT_ARM } else { 0 }),
            warped_garment: Image::from_fn(h, w, |c, y, x| mix(c, y, x, seed + 1)),
            preserved_image: Image::from_fn(h, w, |c, y, x| mix(c, y, x, seed + 2)),
        }
    }

    #[test]
    fn skin_color_map_takes_channel_medians() {
        let person = Image::from_fn(6, 6, |c, y, x| {
            if y == 0 {
                [0.9, 0.2, 0.4][(x % 3) as usize] * if c == 0 { 1.0 } else { 0.5 }
            } else {
                0.0
            }
        });
        let parsing = LabelMap::from_fn(6, 6, |y, _| if y == 0 { LABEL_NECK } else { 0 });
        let got = make_skin_color_map(&person, &parsing).unwrap();
        assert!((got.data[[0, 3, 3]] - 0.4).abs() < 1e-12);
        assert!((got.data[[1, 0, 0]] - 0.2).abs() < 1e-12);

        let bare = LabelMap::zeros(6, 6);
        let fallback = make_skin_color_map(&person, &bare).unwrap();
        assert_eq!(fallback.data[[0, 2, 2]], 0.5);
        assert_eq!(fallback.data[[2, 5, 1]], 0.5);

        let small = LabelMap::zeros(5, 6);
        assert!(make_skin_color_map(&person, &small).is_err());
    }

    #[test]
    fn skin_parsing_keeps_only_skin_labels() {
        let parsing = LabelMap::from_fn(8, 8, |y, x| ((y * 8 + x) % 10) as u8);
        let skin = make_skin_parsing(&parsing);
        for y in 0..8 {
            for x in 0..8 {
                let l = parsing.data[[y, x]];
                let expect = if matches!(l, 4..=6) { l } else { 0 };
                assert_eq!(skin.data[[y, x]], expect);
            }
        }
        let torso = LabelMap::from_fn(4, 4, |_, _| LABEL_TORSO);
        assert!(make_skin_parsing(&torso).data.iter().all(|l| *l == 0));
    }

    #[test]
    fn forward_shapes_ranges_and_determinism() {
        let mut store = ParamStore::new();
        let gen = build_generator(&mut store, 1);
        let inputs = toy_inputs(32, 32, 5);
        let mut t = Tape::new();
        let out = gen.forward_inputs(&mut t, &store, &inputs).unwrap();
        assert_eq!(t.value(out.tryon).shape(), &[3, 32, 32]);
        assert_eq!(t.value(out.alpha).shape(), &[1, 32, 32]);
        assert!(t.value(out.alpha).iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(t.value(out.tryon).iter().all(|v| (0.0..=1.0).contains(v)));

        let mut t2 = Tape::new();
        let out2 = gen.forward_inputs(&mut t2, &store, &inputs).unwrap();
        assert_eq!(t.value(out.tryon), t2.value(out2.tryon));

        let bad = toy_inputs(30, 32, 5);
        assert!(gen.forward_inputs(&mut Tape::new(), &store, &bad).is_err());
    }

    #[test]
    fn tryon_stays_in_the_hull_of_garment_and_raw() {
        let mut store = ParamStore::new();
        let gen = build_generator(&mut store, 2);
        let inputs = toy_inputs(32, 32, 9);
        let mut t = Tape::new();
        let out = gen.forward_inputs(&mut t, &store, &inputs).unwrap();
        let tryon = t.value(out.tryon).clone();
        let raw = t.value(out.raw).clone();
        let g = inputs.warped_garment.to_dyn();
        for (idx, v) in tryon.indexed_iter() {
            let a = g[&idx];
            let b = raw[&idx];
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12, "{v} outside [{lo}, {hi}]");
        }
    }

    #[test]
    fn saturated_alpha_head_copies_the_garment() {
        let mut store = ParamStore::new();
        let gen = build_generator(&mut store, 3);
        let slot = store.slot("gen.head_alpha.b").unwrap();
        store.value_mut(slot)[[0]] = 60.0;
        let inputs = toy_inputs(32, 32, 13);
        let mut t = Tape::new();
        let out = gen.forward_inputs(&mut t, &store, &inputs).unwrap();
        let tryon = t.value(out.tryon);
        let g = inputs.warped_garment.to_dyn();
        let max_diff = tryon
            .iter()
            .zip(g.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 1e-9, "forced alpha should copy the garment, diff {max_diff}");

        store.value_mut(slot)[[0]] = -60.0;
        let mut t2 = Tape::new();
        let out2 = gen.forward_inputs(&mut t2, &store, &inputs).unwrap();
        let diff = t2.value(out2.tryon)
            .iter()
            .zip(t2.value(out2.raw).iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(diff < 1e-9, "suppressed alpha should keep the painting, diff {diff}");
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let gen = build_generator(&mut store, 4);
        let inputs = toy_inputs(32, 32, 17);
        let person = Image::from_fn(32, 32, |c, y, x| ((c * 19 + y * 3 + x * 11) % 41) as f64 / 40.0);
        let target = std::sync::Arc::new(person.to_dyn());

        let loss_at = |store: &ParamStore| -> f64 {
            let mut t = Tape::new();
            let out = gen.forward_inputs(&mut t, store, &inputs).unwrap();
            let l = t.l1_masked(out.tryon, target.clone(), None);
            t.scalar_value(l)
        };

        let mut t = Tape::new();
        let out = gen.forward_inputs(&mut t, &store, &inputs).unwrap();
        let l = t.l1_masked(out.tryon, target.clone(), None);
        let grads = t.backward(l);

        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut checked = 0;
        while checked < 10 {
            let slot = rand::Rng::random_range(&mut rng, 0..store.len());
            let len = store.value(slot).len();
            let at = rand::Rng::random_range(&mut rng, 0..len);
            let g = match grads.by_slot.get(&slot) {
                Some(g) => g.as_slice().unwrap()[at],
                None => continue,
            };
            if g.abs() < 1e-7 {
                continue;
            }
            let eps = 1e-5;
            let orig = store.value(slot).as_slice().unwrap()[at];
            let mut probe = store.clone();
            probe.value_mut(slot).as_slice_mut().unwrap()[at] = orig + eps;
            let up = loss_at(&probe);
            probe.value_mut(slot).as_slice_mut().unwrap()[at] = orig - eps;
            let down = loss_at(&probe);
            let fd = (up - down) / (2.0 * eps);
            let rel = (fd - g).abs() / g.abs().max(fd.abs());
            assert!(rel < 1e-3, "slot {slot}[{at}]: fd {fd} vs grad {g} (rel {rel})");
            checked += 1;
        }
    }
}
