//! Warping primitives over domain types: bilinear flow sampling, flow
//! resampling across resolutions, windowed correlation, per-part warping
//! and parsing-guided assembly.
//!
//! These are the plain (non-autodiff) versions used by data generation,
//! evaluation and tests. Training builds the same computations as tape
//! operations in [`crate::tensor`]; both paths share one set of kernels.

use ndarray::ArrayD;

use crate::tensor;
use crate::types::{part_group_of, FlowField, Image, LabelMap, Part, PartGroup, PartSet};
use crate::{Error, Result};

/// Backward-warp any CHW raster by a flow: `out(p) = src(p + flow(p))`,
/// bilinearly interpolated, border-clamped.
pub fn bilinear_sample(src: &ArrayD<f64>, flow: &FlowField) -> Result<ArrayD<f64>> {
    let s = src.shape();
    let (h, w) = flow.dims();
    if s.len() != 3 || s[1] != h || s[2] != w {
        return Err(Error::DimMismatch(format!(
            "source {:?} vs flow {}x{}",
            s, h, w
        )));
    }
    Ok(tensor::flow_sample_forward(src, &flow.to_dyn()))
}

pub fn bilinear_sample_image(src: &Image, flow: &FlowField) -> Result<Image> {
    Image::from_dyn(bilinear_sample(&src.to_dyn(), flow)?)
}

/// Warp a binary mask as a float plane; the caller decides on thresholds.
pub fn bilinear_sample_mask(src: &LabelMap, flow: &FlowField) -> Result<ArrayD<f64>> {
    bilinear_sample(&src.to_plane(1.0), flow)
}

/// Scale a flow to new dims: bilinear resize of the offset planes, then
/// per-axis magnitude scaling so offsets stay resolution-relative.
pub fn resize_flow(flow: &FlowField, h_out: usize, w_out: usize) -> FlowField {
    let (h, w) = flow.dims();
    let mut out = tensor::resize_bilinear_forward(&flow.to_dyn(), h_out, w_out);
    let sx = w_out as f64 / w as f64;
    let sy = h_out as f64 / h as f64;
    {
        let o = out.as_slice_mut().unwrap();
        let hw = h_out * w_out;
        for v in &mut o[..hw] {
            *v *= sx;
        }
        for v in &mut o[hw..] {
            *v *= sy;
        }
    }
    FlowField::from_dyn(out).expect("resize keeps channel layout")
}

/// Upsample a flow by an integer factor, multiplying offsets by the same
/// factor.
pub fn upsample_flow(flow: &FlowField, factor: usize) -> Result<FlowField> {
    if factor < 2 {
        return Err(Error::InvalidArg(format!("upsample factor must be >= 2, got {factor}")));
    }
    let (h, w) = flow.dims();
    Ok(resize_flow(flow, h * factor, w * factor))
}

/// Windowed correlation cost volume; entry (p, d) is the channel mean of
/// `a(p) * b(p + d)`, with out-of-bounds b contributing zero.
pub fn correlate(a: &ArrayD<f64>, b: &ArrayD<f64>, radius: usize) -> Result<ArrayD<f64>> {
    if radius < 1 {
        return Err(Error::InvalidArg("correlation radius must be >= 1".into()));
    }
    if a.shape() != b.shape() {
        return Err(Error::DimMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(tensor::correlation_forward(a, b, radius))
}

/// Warp each part's image and mask by its own flow. Masks are
/// re-thresholded at 0.5 so the output parts stay binary.
pub fn warp_parts(parts: &PartSet, flows: &[FlowField; 3]) -> Result<PartSet> {
    let dims = parts.dims();
    for f in flows {
        if f.dims() != dims {
            return Err(Error::DimMismatch(format!(
                "flow {:?} vs parts {:?}",
                f.dims(),
                dims
            )));
        }
    }
    let mut warped = Vec::with_capacity(3);
    for (part, flow) in parts.parts.iter().zip(flows.iter()) {
        let image = bilinear_sample_image(&part.image, flow)?;
        let soft = bilinear_sample_mask(&part.mask, flow)?;
        let (h, w) = dims;
        let mask = LabelMap::from_fn(h, w, |y, x| (soft[[0, y, x]] >= 0.5) as u8);
        warped.push(Part { image, mask });
    }
    let [l, m, r] = <[Part; 3]>::try_from(warped).ok().expect("three parts");
    Ok(PartSet { parts: [l, m, r] })
}

/// Fuse warped parts into one garment using a global parsing: each pixel
/// takes the value of the part its label belongs to, so overlapping parts
/// never mix.
pub fn assemble_by_parsing(warped: &PartSet, parsing: &LabelMap) -> Result<(Image, LabelMap)> {
    let dims = warped.dims();
    if parsing.dims() != dims {
        return Err(Error::DimMismatch(format!(
            "parsing {:?} vs parts {:?}",
            parsing.dims(),
            dims
        )));
    }
    let (h, w) = dims;
    let mut garment = Image::zeros(h, w);
    let mut mask = LabelMap::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let group = part_group_of(parsing.data[[y, x]]).unwrap_or(PartGroup::None);
            if let Some(k) = group.index() {
                let part = &warped.parts[k];
                for c in 0..3 {
                    garment.data[[c, y, x]] = part.image.data[[c, y, x]];
                }
                mask.data[[y, x]] = 1;
            }
        }
    }
    Ok((garment, mask))
}

/// 2x2 average-pooled image, floor dims. The downsampling convention for
/// image pyramids (flows use [`resize_flow`] instead).
pub fn downsample_avg(x: &ArrayD<f64>) -> ArrayD<f64> {
    tensor::avg_pool2_forward(x)
}

pub fn downsample_avg_image(img: &Image) -> Image {
    Image::from_dyn(downsample_avg(&img.to_dyn())).expect("pooling keeps channels")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use proptest::prelude::*;

    #[test]
    fn identity_flow_is_identity() {
        let img = Image::from_fn(6, 8, |c, y, x| ((c + 1) * (y * 8 + x)) as f64 / 200.0);
        let flow = FlowField::zeros(6, 8);
        let out = bilinear_sample_image(&img, &flow).unwrap();
        assert!(img.mean_abs_diff(&out) < 1e-15);
    }

    #[test]
    fn integer_shift_clamps_at_border() {
        let w = 5;
        let img = Image::from_fn(3, w, |_, _, x| x as f64 / (w - 1) as f64);
        let flow = FlowField::from_fn(3, w, |_, _| (1.0, 0.0));
        let out = bilinear_sample_image(&img, &flow).unwrap();
        for x in 0..w {
            let expect = (x + 1).min(w - 1) as f64 / (w - 1) as f64;
            assert!((out.data[[0, 1, x]] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn half_pixel_interpolates() {
        let mut src = ArrayD::zeros(IxDyn(&[1, 1, 2]));
        src[[0, 0, 1]] = 1.0;
        let flow = FlowField::from_fn(1, 2, |_, x| if x == 0 { (0.5, 0.0) } else { (0.0, 0.0) });
        let out = bilinear_sample(&src, &flow).unwrap();
        assert!((out[[0, 0, 0]] - 0.5).abs() < 1e-12);
        assert!((out[[0, 0, 1]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sample_rejects_dim_mismatch() {
        let img = Image::zeros(6, 8);
        let flow = FlowField::zeros(6, 6);
        assert!(bilinear_sample_image(&img, &flow).is_err());
    }

    #[test]
    fn upsample_scales_offsets_and_dims() {
        let flow = FlowField::from_fn(4, 4, |_, _| (1.0, 0.0));
        let up = upsample_flow(&flow, 2).unwrap();
        assert_eq!(up.dims(), (8, 8));
        for v in up.data.index_axis(ndarray::Axis(0), 0).iter() {
            assert!((v - 2.0).abs() < 1e-12);
        }
        for v in up.data.index_axis(ndarray::Axis(0), 1).iter() {
            assert_eq!(*v, 0.0);
        }

        let zero = FlowField::zeros(4, 4);
        let up = upsample_flow(&zero, 3).unwrap();
        assert_eq!(up.dims(), (12, 12));
        assert!(up.data.iter().all(|v| *v == 0.0));

        assert!(upsample_flow(&flow, 1).is_err());
    }

    #[test]
    fn upsample_of_linear_flow_matches_closed_form() {
        // dx(x) = 0.3x + 0.5; origin-anchored doubling samples at x/2,
        // clamped to the last source column
        let w = 6;
        let flow = FlowField::from_fn(3, w, |_, x| (0.3 * x as f64 + 0.5, 0.0));
        let up = upsample_flow(&flow, 2).unwrap();
        for x in 0..2 * w {
            let s = (x as f64 / 2.0).min((w - 1) as f64);
            let expect = 2.0 * (0.3 * s + 0.5);
            assert!(
                (up.data[[0, 1, x]] - expect).abs() < 1e-6,
                "col {x}: {} vs {}",
                up.data[[0, 1, x]],
                expect
            );
        }
    }

    #[test]
    fn correlation_peaks_at_true_shift() {
        // one-hot per-pixel codes, distinct within any radius-1 window
        let (c, h, w) = (8, 5, 5);
        let code = |y: usize, x: usize| (y * w + x) % c;
        let mut a = ArrayD::zeros(IxDyn(&[c, h, w]));
        for y in 0..h {
            for x in 0..w {
                a[[code(y, x), y, x]] = 1.0;
            }
        }
        // self-correlation: argmax at zero displacement everywhere
        let vol = correlate(&a, &a, 1).unwrap();
        for y in 0..h {
            for x in 0..w {
                let best = (0..9).max_by(|i, j| {
                    vol[[*i, y, x]].partial_cmp(&vol[[*j, y, x]]).unwrap()
                });
                assert_eq!(best, Some(4), "pixel ({y},{x})");
            }
        }
        // b(p + (1,0)) = a(p): shift the codes right by one column
        let mut b = ArrayD::zeros(IxDyn(&[c, h, w]));
        for y in 0..h {
            for x in 1..w {
                b[[code(y, x - 1), y, x]] = 1.0;
            }
        }
        let vol = correlate(&a, &b, 1).unwrap();
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let best = (0..9).max_by(|i, j| {
                    vol[[*i, y, x]].partial_cmp(&vol[[*j, y, x]]).unwrap()
                });
                // channel index for (dy,dx) = (0,1) in a radius-1 volume
                assert_eq!(best, Some(5), "pixel ({y},{x})");
            }
        }
        assert_eq!(vol.shape()[0], 9);
    }

    fn striped_parts(h: usize, w: usize) -> PartSet {
        let mut parsing = LabelMap::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                parsing.data[[y, x]] = match x * 3 / w {
                    0 => crate::types::LABEL_LEFT_SLEEVE,
                    1 => crate::types::LABEL_TORSO,
                    _ => crate::types::LABEL_RIGHT_SLEEVE,
                };
            }
        }
        let garment = Image::from_fn(h, w, |c, y, x| ((c + 2) * (y + x)) as f64 / (3.0 * (h + w) as f64));
        PartSet::from_garment(&garment, &parsing).unwrap()
    }

    #[test]
    fn zero_flow_warp_is_identity_and_empty_parts_stay_empty() {
        let parts = striped_parts(8, 9);
        let zero = [FlowField::zeros(8, 9), FlowField::zeros(8, 9), FlowField::zeros(8, 9)];
        let warped = warp_parts(&parts, &zero).unwrap();
        for (a, b) in parts.parts.iter().zip(warped.parts.iter()) {
            assert!(a.image.mean_abs_diff(&b.image) < 1e-15);
            assert_eq!(a.mask.data, b.mask.data);
        }

        let mut parts = parts;
        parts.parts[0] = Part { image: Image::zeros(8, 9), mask: LabelMap::zeros(8, 9) };
        let shift = FlowField::from_fn(8, 9, |_, _| (2.0, -1.0));
        let flows = [shift.clone(), shift.clone(), shift];
        let warped = warp_parts(&parts, &flows).unwrap();
        assert!(warped.parts[0].is_empty());
        assert!(!warped.parts[1].is_empty());
    }

    #[test]
    fn assembly_follows_parsing() {
        let parts = striped_parts(8, 9);
        let zero = [FlowField::zeros(8, 9), FlowField::zeros(8, 9), FlowField::zeros(8, 9)];
        let warped = warp_parts(&parts, &zero).unwrap();

        let bg = LabelMap::zeros(8, 9);
        let (img, mask) = assemble_by_parsing(&warped, &bg).unwrap();
        assert!(img.data.iter().all(|v| *v == 0.0));
        assert_eq!(mask.count(1), 0);

        let torso = LabelMap::from_fn(8, 9, |_, _| crate::types::LABEL_TORSO);
        let (img, mask) = assemble_by_parsing(&warped, &torso).unwrap();
        assert!(img.mean_abs_diff(&warped.parts[1].image) < 1e-15);
        assert_eq!(mask.count(1), 72);

        // where parsing says left, the middle part's values are ignored
        let left = LabelMap::from_fn(8, 9, |_, _| crate::types::LABEL_LEFT_SLEEVE);
        let (img, _) = assemble_by_parsing(&warped, &left).unwrap();
        assert!(img.mean_abs_diff(&warped.parts[0].image) < 1e-15);
    }

    #[test]
    fn upsample_then_sample_commutes_on_smooth_inputs() {
        use std::f64::consts::PI;
        let (h, w) = (16, 16);
        let img_lo = Image::from_fn(h, w, |c, y, x| {
            0.5 + 0.4 * ((x as f64 * PI / 8.0 + c as f64).sin() * (y as f64 * PI / 9.0).cos())
        });
        let flow_lo = FlowField::from_fn(h, w, |y, x| {
            (0.8 * (y as f64 * PI / 16.0).sin(), 0.6 * (x as f64 * PI / 16.0).cos())
        });
        // path A: warp at low res, then upsample the result
        let a = bilinear_sample_image(&img_lo, &flow_lo).unwrap();
        let a_up = Image::from_dyn(tensor::resize_bilinear_forward(&a.to_dyn(), 2 * h, 2 * w)).unwrap();
        // path B: upsample image and flow, then warp at high res
        let img_hi = Image::from_dyn(tensor::resize_bilinear_forward(&img_lo.to_dyn(), 2 * h, 2 * w)).unwrap();
        let flow_hi = upsample_flow(&flow_lo, 2).unwrap();
        let b = bilinear_sample_image(&img_hi, &flow_hi).unwrap();
        assert!(a_up.mean_abs_diff(&b) < 2e-2);
    }

    proptest! {
        #[test]
        fn assembly_partitions_pixels(labels in proptest::collection::vec(0u8..10, 36)) {
            let parsing = LabelMap::from_fn(6, 6, |y, x| labels[y * 6 + x]);
            let parts = striped_parts(6, 6);
            let zero = [FlowField::zeros(6, 6), FlowField::zeros(6, 6), FlowField::zeros(6, 6)];
            let warped = warp_parts(&parts, &zero).unwrap();
            let (img, mask) = assemble_by_parsing(&warped, &parsing).unwrap();
            for y in 0..6 {
                for x in 0..6 {
                    let group = part_group_of(parsing.data[[y, x]]).unwrap();
                    match group.index() {
                        Some(k) => {
                            prop_assert_eq!(mask.data[[y, x]], 1);
                            for c in 0..3 {
                                prop_assert_eq!(img.data[[c, y, x]], warped.parts[k].image.data[[c, y, x]]);
                            }
                        }
                        None => {
                            prop_assert_eq!(mask.data[[y, x]], 0);
                            for c in 0..3 {
                                prop_assert_eq!(img.data[[c, y, x]], 0.0);
                            }
                        }
                    }
                }
            }
        }
    }
}
