//! Held-out evaluation for both stages, plus the metrics-file writers.
//!
//! Warp evaluation scores three things per sample: parsing overlap
//! against the ground truth, image similarity of the assembled warped
//! garment against the person's garment region, and the aspect-ratio
//! drift the predicted middle flow induces on the flat garment. Generator
//! evaluation scores the final composite against the person and reads the
//! blend mask inside the garment region.

use std::fs;
use std::path::Path;

use crate::generator::{make_skin_color_map, make_skin_parsing, Generator, GeneratorInputs};
use crate::metrics;
use crate::model::{infer_warp, WarpModel};
use crate::nn::ParamStore;
use crate::tensor::Tape;
use crate::types::{
    Image, LabelMap, PartGroup, PartSet, WarpSample, LABEL_LEFT_PANT, LABEL_LEFT_SLEEVE,
    LABEL_RIGHT_PANT, LABEL_RIGHT_SLEEVE, LABEL_SKIRT, LABEL_TORSO,
};
use crate::warp;
use crate::{Error, Result};

/// Labels that count toward parsing overlap: every garment class.
pub const GARMENT_CLASSES: [u8; 6] = [
    LABEL_LEFT_SLEEVE,
    LABEL_RIGHT_SLEEVE,
    LABEL_TORSO,
    LABEL_LEFT_PANT,
    LABEL_RIGHT_PANT,
    LABEL_SKIRT,
];

/// Trailing-fraction split: the last `val_fraction` of the manifest is
/// held out. Returns the index where the validation slice starts.
pub fn val_split_point(n: usize, val_fraction: f64) -> usize {
    let n_val = ((n as f64) * val_fraction).round() as usize;
    n - n_val.min(n)
}

/// Load either the whole manifest (`"all"`) or its held-out tail
/// (`"val"`).
pub fn load_split(ds: &crate::io::Dataset, split: &str, val_fraction: f64) -> Result<Vec<WarpSample>> {
    let n = ds.len();
    let start = match split {
        "all" => 0,
        "val" => val_split_point(n, val_fraction),
        other => {
            return Err(Error::InvalidArg(format!(
                "unknown split {other:?} (expected all or val)"
            )))
        }
    };
    (start..n).map(|i| ds.load_sample(i)).collect()
}

#[derive(Clone, Copy, Debug)]
pub struct SampleEval {
    pub miou: f64,
    pub ssim: f64,
    /// None when either torso is empty (fully occluded or legwear-only).
    pub r_diff: Option<f64>,
}

/// Score one sample with the current warp parameters.
pub fn eval_warp_sample(
    model: &WarpModel,
    store: &ParamStore,
    sample: &WarpSample,
) -> Result<SampleEval> {
    let inf = infer_warp(model, store, sample)?;
    let miou = metrics::miou(&inf.parsing_full, &sample.gt_warped_parsing, &GARMENT_CLASSES)?;

    let parts = PartSet::from_garment(&sample.garment, &sample.garment_parsing)?;
    let warped = warp::warp_parts(&parts, &inf.flows_full)?;
    let (assembled, _) = warp::assemble_by_parsing(&warped, &inf.parsing_full)?;
    let target = sample.person.masked(&sample.gt_warped_parsing.garment_mask());
    let ssim = metrics::ssim(&assembled, &target)?;

    let r_diff = predicted_r_diff(sample, &inf.flows_full[1])?;
    Ok(SampleEval { miou, ssim, r_diff })
}

/// Aspect-ratio drift of the torso region under the predicted middle
/// flow: warp the flat middle mask, rebuild a parsing, and compare its
/// bounding-box aspect against the flat one.
fn predicted_r_diff(
    sample: &WarpSample,
    middle_flow: &crate::types::FlowField,
) -> Result<Option<f64>> {
    let flat_mid = sample.garment_parsing.group_mask(PartGroup::Middle);
    let warped = warp::bilinear_sample_mask(&flat_mid, middle_flow)?;
    let (h, w) = sample.garment_parsing.dims();
    let warped_map = LabelMap::from_fn(h, w, |y, x| {
        if warped[[0, y, x]] >= 0.5 {
            LABEL_TORSO
        } else {
            0
        }
    });
    match metrics::r_diff(&sample.garment_parsing, &warped_map) {
        Ok(v) => Ok(Some(v)),
        Err(Error::EmptyTorso) => Ok(None),
        Err(e) => Err(e),
    }
}

#[derive(Clone, Copy, Debug)]
pub struct WarpEval {
    pub count: usize,
    pub miou: f64,
    pub ssim: f64,
    /// Mean over samples where both torsos are nonempty; NaN if none are.
    pub r_diff: f64,
    pub r_skipped: usize,
}

pub fn evaluate_warp_samples(
    model: &WarpModel,
    store: &ParamStore,
    samples: &[WarpSample],
) -> Result<WarpEval> {
    if samples.is_empty() {
        return Err(Error::InvalidArg("no samples to evaluate".into()));
    }
    let mut miou = 0.0;
    let mut ssim = 0.0;
    let mut r_sum = 0.0;
    let mut r_count = 0usize;
    for sample in samples {
        let e = eval_warp_sample(model, store, sample)?;
        miou += e.miou;
        ssim += e.ssim;
        match e.r_diff {
            Some(v) => {
                r_sum += v;
                r_count += 1;
            }
            None => {}
        }
    }
    let n = samples.len() as f64;
    Ok(WarpEval {
        count: samples.len(),
        miou: miou / n,
        ssim: ssim / n,
        r_diff: if r_count > 0 { r_sum / r_count as f64 } else { f64::NAN },
        r_skipped: samples.len() - r_count,
    })
}

/// The generator's conditioning for one sample, derived from a frozen
/// warp model, plus the targets its evaluation needs.
#[derive(Clone, Debug)]
pub struct GenSample {
    pub inputs: GeneratorInputs,
    /// Assembled warped-garment mask: the blend-mask target and the
    /// region the mask metric averages over.
    pub mask: LabelMap,
    pub person: Image,
}

pub fn prepare_gen_sample(
    model: &WarpModel,
    store: &ParamStore,
    sample: &WarpSample,
) -> Result<GenSample> {
    let inf = infer_warp(model, store, sample)?;
    let parts = PartSet::from_garment(&sample.garment, &sample.garment_parsing)?;
    let warped = warp::warp_parts(&parts, &inf.flows_full)?;
    let (assembled, mask) = warp::assemble_by_parsing(&warped, &inf.parsing_full)?;
    let inputs = GeneratorInputs {
        skin_color: make_skin_color_map(&sample.person, &sample.human_parsing)?,
        skin_parsing: make_skin_parsing(&sample.human_parsing),
        warped_garment: assembled,
        preserved_image: sample.person.masked(&sample.preserved_mask),
    };
    inputs.validate()?;
    Ok(GenSample { inputs, mask, person: sample.person.clone() })
}

#[derive(Clone, Copy, Debug)]
pub struct GenEval {
    pub count: usize,
    pub ssim: f64,
    /// Mean blend-mask value over garment pixels, pooled across samples.
    pub mean_alpha: f64,
}

pub fn evaluate_gen(
    gen: &Generator,
    store: &ParamStore,
    samples: &[GenSample],
) -> Result<GenEval> {
    if samples.is_empty() {
        return Err(Error::InvalidArg("no samples to evaluate".into()));
    }
    let mut ssim = 0.0;
    let mut alpha_sum = 0.0;
    let mut alpha_px = 0usize;
    for gs in samples {
        let mut t = Tape::new();
        let out = gen.forward_inputs(&mut t, store, &gs.inputs)?;
        let tryon = Image::from_dyn(t.value(out.tryon).clone())?;
        ssim += metrics::ssim(&tryon, &gs.person)?;
        let alpha = t.value(out.alpha);
        let (h, w) = gs.mask.dims();
        for y in 0..h {
            for x in 0..w {
                if gs.mask.data[[y, x]] != 0 {
                    alpha_sum += alpha[[0, y, x]];
                    alpha_px += 1;
                }
            }
        }
    }
    Ok(GenEval {
        count: samples.len(),
        ssim: ssim / samples.len() as f64,
        mean_alpha: if alpha_px > 0 { alpha_sum / alpha_px as f64 } else { 0.0 },
    })
}

/// Mean residual-flow magnitude at the finest and coarsest cascade levels
/// over a few samples. A trained coarse-to-fine cascade should do most of
/// its correction early, so finest < coarsest is the healthy shape.
#[derive(Clone, Copy, Debug)]
pub struct ResidualProbe {
    pub finest: f64,
    pub coarsest: f64,
}

pub fn residual_magnitudes(
    model: &WarpModel,
    store: &ParamStore,
    samples: &[WarpSample],
) -> Result<ResidualProbe> {
    if samples.is_empty() {
        return Err(Error::InvalidArg("no samples to probe".into()));
    }
    let mut fine = 0.0;
    let mut coarse = 0.0;
    for sample in samples {
        let mut t = Tape::new();
        let fwd = model.forward_sample(&mut t, store, sample)?;
        let level_mean = |t: &Tape, vals: &[crate::tensor::Val]| {
            let mut s = 0.0;
            let mut n = 0usize;
            for &v in vals {
                let a = t.value(v);
                s += a.iter().map(|x| x.abs()).sum::<f64>();
                n += a.len();
            }
            s / n as f64
        };
        let last = fwd.cf_residuals.len() - 1;
        fine += level_mean(&t, &fwd.cf_residuals[0]) + level_mean(&t, &fwd.ff_residuals[0]);
        coarse += level_mean(&t, &fwd.cf_residuals[last]) + level_mean(&t, &fwd.ff_residuals[last]);
    }
    let n = samples.len() as f64;
    Ok(ResidualProbe { finest: fine / n, coarsest: coarse / n })
}

pub fn format_metric(v: f64) -> String {
    format!("{v:.6}")
}

/// Write `<stem>.txt` (key=value lines) and `<stem>.json` next to each
/// other. Values arrive pre-formatted so both files are byte-stable.
pub fn write_metric_files(dir: &Path, stem: &str, pairs: &[(String, String)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let txt_path = dir.join(format!("{stem}.txt"));
    let mut txt = String::new();
    for (k, v) in pairs {
        txt.push_str(k);
        txt.push('=');
        txt.push_str(v);
        txt.push('\n');
    }
    fs::write(&txt_path, txt).map_err(|e| Error::io(txt_path.display().to_string(), e))?;

    let json_path = dir.join(format!("{stem}.json"));
    let mut json = String::from("{\n");
    for (i, (k, v)) in pairs.iter().enumerate() {
        let is_number = v.parse::<f64>().map(|x| x.is_finite()).unwrap_or(false);
        let sep = if i + 1 < pairs.len() { "," } else { "" };
        if is_number {
            json.push_str(&format!("  \"{k}\": {v}{sep}\n"));
        } else {
            json.push_str(&format!("  \"{k}\": \"{v}\"{sep}\n"));
        }
    }
    json.push_str("}\n");
    fs::write(&json_path, json).map_err(|e| Error::io(json_path.display().to_string(), e))?;
    Ok(())
}
