use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::Serialize;
use serde_json::json;

use marsnet_core::config::RunConfig;
use marsnet_core::eval::{self, ablation::ablation_csv, footprint_eval, height_histogram, pixel_metrics, MetricsReport};
use marsnet_core::gedi::{self, io as gio, LabeledFootprint};
use marsnet_core::model::{checkpoint, ModelParams};
use marsnet_core::raster::io::{read_raster, write_raster};
use marsnet_core::raster::{self, NormStats, PatchDataset, SourceImagery};
use marsnet_core::synth::synth_generate;
use marsnet_core::train::{predict_map, predict_samples, train_model, with_target_scaling};

use crate::failure::{Failure, OutputContext};
use crate::{Command, Global, TrainOverrides};

type Out = Result<(), Failure>;

pub fn run(global: &Global, command: Command) -> Out {
    let cfg = load_config(global)?;
    match command {
        Command::Synth { out, width, height } => synth(cfg, &out, width, height),
        Command::FilterGedi {
            footprints,
            out,
            ndvi,
            forest_mask,
            report,
        } => filter_gedi(&cfg, &footprints, &out, ndvi.as_deref(), forest_mask.as_deref(), report),
        Command::Calibrate {
            plots,
            footprints,
            out_dir,
        } => calibrate(&cfg, &plots, &footprints, &out_dir),
        Command::BuildStack {
            sources,
            out,
            speckle_radius,
        } => build_stack(&cfg, &sources, &out, speckle_radius),
        Command::Patchify { stacks, labels, out } => patchify(&cfg, &stacks, &labels, &out),
        Command::Train { dataset, out, overrides } => train(cfg, &dataset, &out, &overrides),
        Command::Predict {
            checkpoint,
            stacks,
            forest_mask,
            norm_stats,
            out,
        } => predict(&checkpoint, &stacks, &forest_mask, norm_stats, &out),
        Command::Evaluate {
            map,
            labels,
            checkpoint,
            dataset,
            out,
        } => evaluate(&cfg, map, labels, checkpoint, dataset, &out),
        Command::Ablate { dataset, out, overrides } => ablate(cfg, &dataset, &out, &overrides),
        Command::Histogram {
            a,
            b,
            out_csv,
            out_png,
            bin_width,
        } => histogram(&cfg, &a, &b, &out_csv, &out_png, bin_width),
    }
}

fn load_config(global: &Global) -> Result<RunConfig, Failure> {
    let mut cfg = match &global.config {
        Some(p) => {
            require_file(p)?;
            RunConfig::load(p)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    cfg.resolve_seeds();
    cfg.validate()?;
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// Path and output helpers

fn require_file(p: &Path) -> Out {
    if p.is_file() {
        Ok(())
    } else {
        Err(Failure::Input(format!("input file not found: {}", p.display())))
    }
}

fn require_dir(p: &Path) -> Out {
    if p.is_dir() {
        Ok(())
    } else {
        Err(Failure::Input(format!("input directory not found: {}", p.display())))
    }
}

fn make_dir(p: &Path) -> Out {
    fs::create_dir_all(p).map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", p.display())))
}

/// Creates the parent directory of an output file.
fn make_parent(p: &Path) -> Out {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => make_dir(d),
        _ => Ok(()),
    }
}

fn write_text(p: &Path, text: &str) -> Out {
    make_parent(p)?;
    fs::write(p, text).map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", p.display())))
}

fn write_json<T: Serialize>(p: &Path, value: &T) -> Out {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    write_text(p, &text)
}

fn apply_overrides(cfg: &mut RunConfig, o: &TrainOverrides) -> Out {
    if let Some(e) = o.epochs {
        cfg.train.max_epochs = e;
    }
    if let Some(b) = o.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(lr) = o.lr {
        cfg.train.learning_rate = lr;
    }
    if let Some(w) = &o.widths {
        cfg.model.stage_widths = w.clone();
    }
    cfg.validate()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Subcommands

fn synth(mut cfg: RunConfig, out: &Path, width: Option<usize>, height: Option<usize>) -> Out {
    if let Some(w) = width {
        cfg.synth.width = w;
    }
    if let Some(h) = height {
        cfg.synth.height = h;
    }
    let data = synth_generate(&cfg.synth)?;
    make_dir(out)?;
    data.write(out).output()?;
    info!(
        "synthetic world {}x{}: {} footprints, {} plots, {} planted violations",
        cfg.synth.width,
        cfg.synth.height,
        data.footprints.len(),
        data.plots.len(),
        data.planted.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct FilterReport {
    input: usize,
    dropped_quality: usize,
    dropped_sensitivity: usize,
    dropped_ndvi: Option<usize>,
    dropped_forest_mask: Option<usize>,
    kept: usize,
    ndvi_threshold: Option<f64>,
    warning: Option<String>,
    /// Kept footprints per month, January first.
    monthly_counts: [usize; 12],
}

fn filter_gedi(
    cfg: &RunConfig,
    footprints: &Path,
    out: &Path,
    ndvi: Option<&Path>,
    forest_mask: Option<&Path>,
    report: Option<PathBuf>,
) -> Out {
    require_file(footprints)?;
    for p in ndvi.iter().chain(forest_mask.iter()) {
        require_file(p)?;
    }
    let ndvi = ndvi.map(read_raster).transpose()?.map(|r| r.0);
    let mask = forest_mask.map(read_raster).transpose()?.map(|r| r.0);
    let records = gio::read_footprints(footprints)?;
    let input = records.len();

    let records = gedi::quality_filter(records);
    let after_quality = records.len();
    let records = gedi::sensitivity_cover_filter(records);
    let after_sensitivity = records.len();
    let (records, dropped_ndvi, threshold, warning) = match &ndvi {
        Some(r) => {
            let before = records.len();
            let o = gedi::ndvi_consistency_filter(records, |lon, lat| r.value_at_lonlat(0, lon, lat))?;
            let dropped = before - o.kept.len();
            (o.kept, Some(dropped), o.threshold, o.warning)
        }
        None => (records, None, None, None),
    };
    let (records, dropped_forest) = match &mask {
        Some(r) => {
            let before = records.len();
            let t = cfg.filter.forest_threshold;
            let kept = gedi::forest_mask_filter(records, |lon, lat| r.value_at_lonlat(0, lon, lat).is_some_and(|v| v > t));
            let dropped = before - kept.len();
            (kept, Some(dropped))
        }
        None => (records, None),
    };

    let rep = FilterReport {
        input,
        dropped_quality: input - after_quality,
        dropped_sensitivity: after_quality - after_sensitivity,
        dropped_ndvi,
        dropped_forest_mask: dropped_forest,
        kept: records.len(),
        ndvi_threshold: threshold,
        warning,
        monthly_counts: gedi::monthly_counts(&records),
    };
    make_parent(out)?;
    gio::write_footprints(out, &records).output()?;
    let report = report.unwrap_or_else(|| out.with_extension("report.json"));
    write_json(&report, &rep)?;
    info!("kept {} of {input} footprints", records.len());
    Ok(())
}

fn calibrate(cfg: &RunConfig, plots: &Path, footprints: &Path, out_dir: &Path) -> Out {
    require_file(plots)?;
    require_file(footprints)?;
    let plots = gio::read_plots(plots)?;
    let records = gio::read_footprints(footprints)?;
    let pairs: Vec<(f64, f64)> = gedi::match_plots(&plots, &records)
        .into_iter()
        .map(|(p, r)| (r.rh98(), p.dominant_height()))
        .collect();
    let model = gedi::fit_calibration(&pairs)?;
    let table = gedi::rh_field_correlation(&plots, &records)?;
    let strata = gedi::stratify_by_rh_ratio(&plots, &records, cfg.calibrate.ratio_threshold)?;
    let labels: Vec<LabeledFootprint> = records
        .iter()
        .map(|r| LabeledFootprint {
            id: r.id.clone(),
            lon: r.lon,
            lat: r.lat,
            height: model.apply(r.rh98()),
        })
        .collect();

    make_dir(out_dir)?;
    write_text(&out_dir.join("calibration.toml"), &model.to_toml())?;
    write_text(&out_dir.join("rh_metrics.csv"), &table.to_csv())?;
    write_json(&out_dir.join("strata.json"), &strata)?;
    gio::write_labels(&out_dir.join("labels.csv"), &labels).output()?;
    info!(
        "calibration from {} pairs: height = {:.4}·RH98 + {:.4} (r² {:.3})",
        model.n, model.slope, model.intercept, model.r2
    );
    Ok(())
}

fn build_stack(cfg: &RunConfig, sources: &Path, out: &Path, speckle_radius: Option<f64>) -> Out {
    require_dir(sources)?;
    let radius = speckle_radius.unwrap_or(cfg.stack.speckle_radius_m);
    if !(radius >= 0.0) {
        return Err(Failure::Input(format!("speckle radius must be non-negative, got {radius}")));
    }
    let imagery = SourceImagery::read(sources)?;
    let stacks = imagery.build_stacks((radius > 0.0).then_some(radius))?;
    make_dir(out)?;
    raster::write_stacks(out, &stacks).output()?;
    let g = stacks.values().next().map(|s| s.raster.geometry).expect("four stacks");
    let modalities: Vec<_> = stacks
        .values()
        .map(|s| {
            json!({
                "modality": s.modality,
                "file": raster::stack_file(Path::new(""), s.modality),
                "bands": s.raster.bands,
                "band_names": s.band_names,
            })
        })
        .collect();
    let manifest = json!({
        "geometry": g,
        "speckle_radius_m": radius,
        "total_bands": stacks.values().map(|s| s.raster.bands).sum::<usize>(),
        "modalities": modalities,
    });
    write_json(&out.join("manifest.json"), &manifest)?;
    info!("wrote {} stacks on a {}x{} grid", stacks.len(), g.width, g.height);
    Ok(())
}

fn patchify(cfg: &RunConfig, stacks: &Path, labels: &Path, out: &Path) -> Out {
    require_dir(stacks)?;
    require_file(labels)?;
    let stacks = raster::read_stacks(stacks)?;
    let footprints = gio::read_labels(labels)?;
    let grid = stacks.values().next().map(|s| s.raster.geometry).expect("four stacks");
    let rasters = gedi::rasterize_labels(&footprints, &grid, cfg.patchify.footprint_diameter_m);
    let ds = PatchDataset::build(&stacks, &rasters, cfg.patchify.patch_size, cfg.split_seed())?;
    ds.save(out).output()?;
    info!(
        "{} patches ({} train / {} val / {} test), {} labeled pixels, split {}",
        ds.samples.len(),
        ds.split.train.len(),
        ds.split.val.len(),
        ds.split.test.len(),
        rasters.labeled_count(),
        ds.split.digest()
    );
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<PatchDataset, Failure> {
    require_dir(dir)?;
    Ok(PatchDataset::load(dir)?)
}

fn train(mut cfg: RunConfig, dataset: &Path, out: &Path, overrides: &TrainOverrides) -> Out {
    apply_overrides(&mut cfg, overrides)?;
    let ds = load_dataset(dataset)?;
    let (train, val, _) = ds.standardized_splits()?;
    let model_cfg = with_target_scaling(&cfg.model, &train)?;
    let params = ModelParams::init(&model_cfg)?;
    info!(
        "training {} parameters on {} patches, validating on {}",
        params.store.scalar_count(),
        train.len(),
        val.len()
    );
    let (params, history) = train_model(params, &train, &val, &cfg.train, |rec| {
        println!("{}", serde_json::to_string(rec).expect("record serializes"));
    })?;
    make_dir(out)?;
    checkpoint::save(&params, &out.join("model.bin")).output()?;
    write_json(&out.join("history.json"), &history)?;
    write_json(&out.join("norm_stats.json"), &ds.stats)?;
    write_text(&out.join("config.toml"), &cfg.to_toml())?;
    info!(
        "best epoch {} of {} (validation loss {:.4})",
        history.best_epoch,
        history.val_loss.len(),
        history.val_loss[history.best_epoch - 1]
    );
    Ok(())
}

fn load_checkpoint(p: &Path) -> Result<ModelParams, Failure> {
    require_file(p)?;
    Ok(checkpoint::load(p)?)
}

fn predict(ckpt: &Path, stacks: &Path, forest_mask: &Path, norm_stats: Option<PathBuf>, out: &Path) -> Out {
    let norm_stats = norm_stats.unwrap_or_else(|| ckpt.with_file_name("norm_stats.json"));
    require_file(ckpt)?;
    require_dir(stacks)?;
    require_file(forest_mask)?;
    require_file(&norm_stats)?;
    let params = load_checkpoint(ckpt)?;
    let text = fs::read_to_string(&norm_stats).map_err(|e| Failure::Input(format!("{}: {e}", norm_stats.display())))?;
    let stats: NormStats =
        serde_json::from_str(&text).map_err(|e| Failure::Input(format!("{}: {e}", norm_stats.display())))?;
    let mut stacks = raster::read_stacks(stacks)?;
    for s in stacks.values_mut() {
        stats.apply_raster(s.modality, &mut s.raster)?;
    }
    let (mask, _) = read_raster(forest_mask)?;
    let map = predict_map(&params, &stacks, &mask)?;
    make_parent(out)?;
    write_raster(out, &map, &["height_m".into()]).output()?;
    let valid = map.band(0).iter().filter(|v| v.is_finite()).count();
    info!("predicted {valid} forest pixels on a {}x{} grid", map.geometry.width, map.geometry.height);
    Ok(())
}

#[derive(Serialize)]
struct EvaluationOutput {
    mode: &'static str,
    report: MetricsReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    excluded_nodata: Option<usize>,
}

fn evaluate(
    cfg: &RunConfig,
    map: Option<PathBuf>,
    labels: Option<PathBuf>,
    ckpt: Option<PathBuf>,
    dataset: Option<PathBuf>,
    out: &Path,
) -> Out {
    let result = match (map, labels, ckpt, dataset) {
        (Some(map), Some(labels), None, None) => {
            require_file(&map)?;
            require_file(&labels)?;
            let (map, _) = read_raster(&map)?;
            let footprints = gio::read_labels(&labels)?;
            let fe = footprint_eval(&map, &footprints, cfg.evaluate.footprint_diameter_m)?;
            EvaluationOutput {
                mode: "footprint",
                report: fe.report,
                excluded_nodata: Some(fe.excluded_nodata),
            }
        }
        (None, None, Some(ckpt), Some(dataset)) => {
            let params = load_checkpoint(&ckpt)?;
            let ds = load_dataset(&dataset)?;
            let (_, _, test) = ds.standardized_splits()?;
            let preds = predict_samples(&params, &test)?;
            EvaluationOutput {
                mode: "test_pixels",
                report: pixel_metrics(&test, &preds)?,
                excluded_nodata: None,
            }
        }
        _ => {
            return Err(Failure::Input(
                "evaluate needs either --map with --labels or --checkpoint with --dataset".into(),
            ))
        }
    };
    write_json(out, &result)?;
    let r = &result.report;
    info!("{} evaluation: n {} rmse {:.3} r2 {:?}", result.mode, r.n, r.rmse, r.r2);
    Ok(())
}

fn ablate(mut cfg: RunConfig, dataset: &Path, out: &Path, overrides: &TrainOverrides) -> Out {
    apply_overrides(&mut cfg, overrides)?;
    let ds = load_dataset(dataset)?;
    let rows = eval::run_ablation(&cfg.ablate, &ds, &cfg.model, &cfg.train);
    write_text(out, &ablation_csv(&rows))?;
    let r2 = |name: &str| rows.iter().find(|r| r.name == name).and_then(|r| r.report).and_then(|m| m.r2);
    if let (Some(full), Some(single)) = (r2("full"), r2("s2_only")) {
        if full < single {
            warn!("full model r2 {full:.4} is below the optical-only r2 {single:.4}");
        }
    }
    let failed = rows.iter().filter(|r| r.failed()).count();
    if failed == rows.len() {
        return Err(Failure::Runtime(format!("all {failed} ablation variants failed")));
    }
    info!("ablation finished: {} rows, {failed} failed", rows.len());
    Ok(())
}

fn histogram(cfg: &RunConfig, a: &Path, b: &Path, out_csv: &Path, out_png: &Path, bin_width: Option<f64>) -> Out {
    require_file(a)?;
    require_file(b)?;
    let (ra, _) = read_raster(a)?;
    let (rb, _) = read_raster(b)?;
    let h = height_histogram(&ra, &rb, bin_width.unwrap_or(cfg.histogram.bin_width_m))?;
    write_text(out_csv, &h.to_csv())?;
    make_parent(out_png)?;
    crate::plot::histogram_chart(&h)
        .save_with_format(out_png, image::ImageFormat::Png)
        .map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", out_png.display())))?;
    info!("histogram with {} bins of {} m", h.counts_a.len(), h.bin_width);
    Ok(())
}
