use oncoclip::survival::km_estimate;
use oncoclip::synth::{expected_event_fraction, gen_cohort, write_cohort, SynthConfig};
use oncoclip::volume::kvol::{load_mask, load_volume, save_volume, Dtype};
use oncoclip::volume::{center_crop, locate_roi_center, preprocess, PrepConfig, RoiStrategy};
use serde_json::json;

use super::{out_dir, with_suffix, Outcome};
use crate::args::{PrepArgs, StrategyArg, SynthArgs};
use crate::error::Result;
use crate::manifest::RunManifest;

fn triple<T: Copy>(v: &[T]) -> [T; 3] {
    [v[0], v[1], v[2]]
}

pub fn prep(a: &PrepArgs) -> Result<Outcome> {
    let mut manifest = RunManifest::new("prep", a, None)?;
    manifest.input(&a.input)?;
    manifest.input(&a.mask)?;
    let vol = load_volume(&a.input)?;
    let mask = load_mask(&a.mask)?;
    mask.check_paired(&vol)?;
    let strategy = match a.strategy {
        StrategyArg::LargestAxialLesion => RoiStrategy::LargestAxialLesion,
        StrategyArg::ForegroundCentroid => RoiStrategy::ForegroundCentroid,
    };
    let roi = locate_roi_center(&mask, strategy)?;
    let cfg = PrepConfig {
        extent_mm: triple(&a.extent),
        spacing_mm: triple(&a.spacing),
        dims: triple(&a.dims),
        level: a.level,
        width: a.width,
    };
    let mut out = preprocess(&vol, roi, &cfg)?;
    if a.center_crop {
        out = center_crop(&out, triple(&a.patch))?;
    }
    save_volume(&a.out, &out, Dtype::F32)?;
    let parent = a.out.parent().unwrap_or(std::path::Path::new(""));
    let manifest_path = with_suffix(&a.out, ".manifest.json");
    manifest.finish(parent, std::slice::from_ref(&a.out), &manifest_path)?;
    let result = json!({
        "roi_center_mm": roi.center,
        "dims": out.dims(),
        "spacing_mm": out.spacing(),
        "origin_mm": out.origin(),
        "value_range": [out.min_value(), out.max_value()],
        "output": a.out,
        "manifest": manifest_path,
    });
    Ok(Outcome { result, manifest })
}

pub fn synth(a: &SynthArgs) -> Result<Outcome> {
    let mut manifest = RunManifest::new("synth", a, Some(a.seed))?;
    let cfg = SynthConfig {
        phases: a.phases,
        noise_sigma: a.noise_sigma,
        beta: a.beta,
        lambda_c: a.lambda_c,
        ..SynthConfig::default()
    };
    let cohort = gen_cohort(a.n, a.seed, &cfg)?;
    let dir = out_dir(&a.out)?;
    let files = write_cohort(&cohort, &dir)?;
    let events = cohort.patients.iter().filter(|p| p.event).count();
    let times: Vec<f64> = cohort.patients.iter().map(|p| p.time).collect();
    let flags: Vec<bool> = cohort.patients.iter().map(|p| p.event).collect();
    let km = km_estimate(&times, &flags)?;
    manifest.finish(&dir, &files, &dir.join("manifest.json"))?;
    let result = json!({
        "n": cohort.len(),
        "seed": a.seed,
        "fingerprint": cohort.fingerprint,
        "malignant_fraction": cohort.patients.iter().filter(|p| p.malignant).count() as f64 / cohort.len() as f64,
        "event_fraction": events as f64 / cohort.len() as f64,
        "expected_event_fraction": expected_event_fraction(&cfg),
        "km_final_survival": km.survival.last(),
        "out": dir,
        "files": files.iter().filter_map(|f| f.file_name()).map(|f| f.to_string_lossy()).collect::<Vec<_>>(),
    });
    Ok(Outcome { result, manifest })
}
