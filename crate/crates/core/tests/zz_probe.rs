//! Temporary probe: per-style drift of a trained pilot checkpoint.

use std::path::Path;

use tryon_core::config::RunConfig;
use tryon_core::dgt::compute_r_style;
use tryon_core::evaluate::eval_warp_sample;
use tryon_core::synth::{generate_sample, SynthConfig};
use tryon_core::train::load_warp_model;

#[test]
fn pilot_styles() {
    let ckpt = Path::new("/root/pilot/r_none/checkpoint.ckpt");
    if !ckpt.exists() {
        eprintln!("no pilot checkpoint, skipping");
        return;
    }
    let mut cfg = RunConfig::default();
    cfg.data.category_mix = [1.0, 0.0, 0.0];
    cfg.data.tuck_in_fraction = 0.58;
    cfg.data.seed = 7;
    cfg.train.seed = 7;
    let (model, store) = load_warp_model(&cfg, ckpt).expect("load");

    let synth = SynthConfig {
        category_mix: [1.0, 0.0, 0.0],
        tuck_in_fraction: 0.58,
        seed: 7,
        ..SynthConfig::default()
    };
    // validation tail of the 400-sample pilot manifest
    let mut tin: Vec<f64> = vec![];
    let mut tout: Vec<f64> = vec![];
    let mut tin_gt: Vec<f64> = vec![];
    let mut tout_gt: Vec<f64> = vec![];
    for i in 360..400u64 {
        let s = generate_sample(&synth, i).expect("sample");
        let gt = match compute_r_style(&s.garment_parsing, &s.gt_warped_parsing) {
            Ok(d) => d.r_style,
            Err(_) => continue,
        };
        let e = eval_warp_sample(&model, &store, &s).expect("eval");
        let Some(rd) = e.r_diff else { continue };
        if gt < 0.95 {
            tin.push(rd);
            tin_gt.push((gt - 1.0).abs());
        } else {
            tout.push(rd);
            tout_gt.push((gt - 1.0).abs());
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    println!(
        "tuck-in  n={:2} pred r_diff {:.4} (gt would be {:.4})",
        tin.len(),
        mean(&tin),
        mean(&tin_gt)
    );
    println!(
        "tuck-out n={:2} pred r_diff {:.4} (gt would be {:.4})",
        tout.len(),
        mean(&tout),
        mean(&tout_gt)
    );
}
