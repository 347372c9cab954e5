use std::path::{Path, PathBuf};
use std::time::Instant;

use appa_core::detector::{
    generate_synthetic_dataset, train_toy_detector, DetectorAdapter, DetectorRegistry,
};
use appa_core::eval::bench::{run_dynamics_sweep, run_transfer_benchmark, DetectorSlot, EvalSettings};
use appa_core::eval::report::{matrix_csv, render_tables, summary_csv, BenchmarkReport, RuntimeInfo};
use appa_core::eval::TransferMatrix;
use appa_core::io::artifacts::{
    load_patch, load_report, save_patch_png, save_patch_record, save_report, write_bytes, write_json, PatchRecord,
    RunLayout, PATCH_SCHEMA_VERSION,
};
use appa_core::io::config::{parse_config, render_config};
use appa_core::io::dataset::{save_dataset, DatasetRef, Split};
use appa_core::io::plot::{pr_curve_csv, render_heatmap, render_pr_plot, save_png};
use appa_core::optimizer::{resume, DatasetSource, LossLog, RunConfig, Trainer};
use appa_core::{Error, Patch, PlacementMode, Result, SceneImage};

use crate::{Common, PlacementArg};

fn data_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Data {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Loads the config (or defaults) and applies command-line overrides.
pub fn resolve_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) if !p.is_file() => {
            return Err(Error::InvalidArgument(format!("config file {} does not exist", p.display())));
        }
        Some(p) => parse_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.output_dir = o.clone();
    }
    if let Some(p) = common.placement {
        cfg.placement.mode = match p {
            PlacementArg::On => PlacementMode::OnTarget,
            PlacementArg::Outside => PlacementMode::OutsideTarget,
        };
    }
    if let Some(d) = &common.detector {
        cfg.detector.checkpoint = Some(d.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Where `train-detector` stores its checkpoint for this config. Depends
/// only on the data and detector settings, so patch runs with different
/// placement or loss settings share it.
fn default_detector_path(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir
        .join("detectors")
        .join(format!("{}.bin", cfg.detector_hash()))
}

fn load_split(cfg: &RunConfig, split: Split, input: (usize, usize)) -> Result<Vec<SceneImage>> {
    let ds = &cfg.dataset;
    match ds.source {
        DatasetSource::Synthetic => {
            let (n, seed) = match split {
                Split::Train => (ds.n_train, ds.train_seed),
                Split::Test => (ds.n_test, ds.test_seed),
            };
            generate_synthetic_dataset(&ds.synthetic, n, seed)
        }
        DatasetSource::Files => {
            let root = match split {
                Split::Train => ds.train_root.clone(),
                Split::Test => ds.test_root.clone().or_else(|| ds.train_root.clone()),
            }
            .ok_or_else(|| Error::Config {
                key: "dataset.train_root".into(),
                message: "required when source = \"files\"".into(),
            })?;
            DatasetRef {
                root,
                format: ds.format,
                classes: ds.classes.clone(),
                split,
            }
            .load(input)
        }
    }
}

fn load_detector_at(id: &str, path: &Path) -> Result<Box<dyn DetectorAdapter>> {
    if !path.is_file() {
        return Err(data_err(
            path,
            "no detector checkpoint here; run `appa train-detector` with the same config or pass --detector",
        ));
    }
    DetectorRegistry::default().load(id, path)
}

fn load_detector(cfg: &RunConfig) -> Result<Box<dyn DetectorAdapter>> {
    let path = cfg.detector.checkpoint.clone().unwrap_or_else(|| default_detector_path(cfg));
    load_detector_at(&cfg.detector.id, &path)
}

fn prepare_run(cfg: &RunConfig) -> Result<RunLayout> {
    let layout = RunLayout::new(cfg.run_dir());
    layout.create()?;
    write_bytes(&layout.root.join("config.toml"), render_config(cfg)?.as_bytes())?;
    Ok(layout)
}

pub fn gen_data(common: &Common) -> Result<()> {
    let cfg = resolve_config(common)?;
    if cfg.dataset.source != DatasetSource::Synthetic {
        return Err(Error::Config {
            key: "dataset.source".into(),
            message: "gen-data needs source = \"synthetic\"".into(),
        });
    }
    let side = cfg.dataset.synthetic.image_size;
    let root = cfg.output_dir.join("data").join(cfg.detector_hash());
    for (split, name) in [(Split::Train, "train"), (Split::Test, "test")] {
        let imgs = load_split(&cfg, split, (side, side))?;
        let dir = root.join(name);
        save_dataset(&dir, &imgs)?;
        println!("{name}: {} images -> {}", imgs.len(), dir.display());
    }
    Ok(())
}

pub fn train_detector(common: &Common) -> Result<()> {
    let cfg = resolve_config(common)?;
    let side = cfg.dataset.synthetic.image_size;
    let train = load_split(&cfg, Split::Train, (side, side))?;
    let test = load_split(&cfg, Split::Test, (side, side))?;
    let t = Instant::now();
    let trained = train_toy_detector(&train, &test, cfg.dataset.classes.clone(), &cfg.detector.toy)?;
    let path = cfg.detector.checkpoint.clone().unwrap_or_else(|| default_detector_path(&cfg));
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    trained.detector.save(&path)?;
    println!(
        "clean AP {:.4} after {:.1}s; checkpoint {} (sha256 {})",
        trained.clean_ap,
        t.elapsed().as_secs_f64(),
        path.display(),
        trained.detector.parameter_checksum()
    );
    Ok(())
}

pub fn train_patch(common: &Common, resume_from: Option<&Path>) -> Result<()> {
    let cfg = resolve_config(common)?;
    let layout = prepare_run(&cfg)?;
    let det = load_detector(&cfg)?;
    let train = load_split(&cfg, Split::Train, det.input_size())?;
    let colors = cfg.colors()?;
    let mut trainer = match resume_from {
        Some(p) => Trainer::with_state(&cfg, det.as_ref(), &train, colors, resume(p, &cfg, det.as_ref())?)?,
        None => Trainer::new(&cfg, det.as_ref(), &train, colors)?,
    };
    trainer.set_dump_dir(&layout.root);
    let mut log = LossLog::create(&layout.loss_csv())?;
    for (k, b) in trainer.state().loss_history.iter().enumerate() {
        log.append(k as u64 + 1, b)?;
    }
    let t = Instant::now();
    trainer.run(Some(&layout.checkpoints()), Some(&mut log))?;
    let state = trainer.state();
    save_patch_png(&layout.patch_png(), &state.patch)?;
    save_patch_record(
        &layout.patch_json(),
        &PatchRecord {
            schema_version: PATCH_SCHEMA_VERSION,
            id: state.patch.id.clone(),
            resolution: state.patch.height(),
            placement: cfg.placement,
            hyperparameters: cfg.hyperparameters,
            detector_id: cfg.detector.id.clone(),
            detector_checksum: trainer.detector_checksum().to_string(),
            config_hash: cfg.hash(),
            epochs_completed: state.epoch,
            steps: state.step,
            final_loss: state.loss_history.last().copied(),
            pixels: state.patch.pixels().to_vec(),
        },
    )?;
    println!(
        "{} epochs, {} steps in {:.1}s; final loss {:?}; run dir {}",
        state.epoch,
        state.step,
        t.elapsed().as_secs_f64(),
        state.loss_history.last().map(|b| b.total),
        layout.root.display()
    );
    Ok(())
}

fn patch_or_default(cfg: &RunConfig, patch: Option<&Path>) -> Result<Patch> {
    let path = patch.map(Path::to_path_buf).unwrap_or_else(|| RunLayout::new(cfg.run_dir()).patch_json());
    if !path.is_file() {
        return Err(data_err(&path, "patch not found; run `appa train-patch` first or pass --patch"));
    }
    load_patch(&path)
}

fn write_benchmark(layout: &RunLayout, stem: &str, report: &BenchmarkReport) -> Result<()> {
    let dir = layout.reports();
    save_report(&dir.join(format!("{stem}.json")), report)?;
    write_bytes(&dir.join(format!("{stem}_summary.csv")), summary_csv(report).as_bytes())?;
    for m in &report.matrices {
        let mode = m.mode.to_string();
        write_bytes(&dir.join(format!("{stem}_matrix_{mode}.csv")), matrix_csv(m).as_bytes())?;
        let mut curves = Vec::new();
        for r in &m.rows {
            for (c, cell) in r.cells.iter().enumerate() {
                if let Some(curve) = &cell.curve {
                    let name = format!("{}__{}", r.proxy, m.detectors[c]);
                    let file = dir.join("pr").join(format!("{stem}_{mode}__{name}.csv"));
                    write_bytes(&file, pr_curve_csv(curve).as_bytes())?;
                    curves.push((name, curve.clone()));
                }
            }
        }
        save_png(&dir.join(format!("{stem}_pr_{mode}.png")), &render_pr_plot(&curves))?;
        save_png(&dir.join(format!("{stem}_heatmap_{mode}.png")), &render_heatmap(m))?;
    }
    let tables = render_tables(report);
    write_bytes(&dir.join(format!("{stem}_tables.txt")), tables.as_bytes())?;
    print!("{tables}");
    Ok(())
}

pub fn evaluate(common: &Common, patch: Option<&Path>) -> Result<()> {
    let cfg = resolve_config(common)?;
    let layout = prepare_run(&cfg)?;
    let det = load_detector(&cfg)?;
    let patch = patch_or_default(&cfg, patch)?;
    let test = load_split(&cfg, Split::Test, det.input_size())?;
    let t = Instant::now();
    let slots = [DetectorSlot {
        id: cfg.detector.id.clone(),
        adapter: Some(det.as_ref()),
    }];
    let s = EvalSettings::from_config(&cfg);
    let m = run_transfer_benchmark(&[(cfg.detector.id.clone(), patch)], &slots, &test, &s, cfg.evaluation.noise_seed)?;
    let report = BenchmarkReport::new(cfg.hash(), vec![m], runtime(t, test.len()));
    write_benchmark(&layout, "evaluate", &report)
}

fn runtime(t: Instant, n_images: usize) -> RuntimeInfo {
    RuntimeInfo {
        seconds: t.elapsed().as_secs_f64(),
        n_images,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
    }
}

fn split_pair(s: &str) -> Result<(String, PathBuf)> {
    match s.split_once('=') {
        Some((k, v)) if !k.is_empty() && !v.is_empty() => Ok((k.to_string(), PathBuf::from(v))),
        _ => Err(Error::InvalidArgument(format!("expected NAME=PATH, got `{s}`"))),
    }
}

pub fn benchmark(common: &Common, patches: &[String], outside: &[String], targets: &[String]) -> Result<()> {
    let cfg = resolve_config(common)?;
    let layout = prepare_run(&cfg)?;
    let targets: Vec<(String, PathBuf)> = if targets.is_empty() {
        let path = cfg.detector.checkpoint.clone().unwrap_or_else(|| default_detector_path(&cfg));
        vec![(cfg.detector.id.clone(), path)]
    } else {
        targets.iter().map(|t| split_pair(t)).collect::<Result<_>>()?
    };
    let mut loaded = Vec::with_capacity(targets.len());
    for (id, path) in &targets {
        match load_detector_at(id, path) {
            Ok(d) => loaded.push((id.clone(), Some(d))),
            Err(e) => {
                log::warn!("detector `{id}` unavailable: {e}");
                loaded.push((id.clone(), None));
            }
        }
    }
    let input = loaded
        .iter()
        .find_map(|(_, d)| d.as_ref().map(|d| d.input_size()))
        .ok_or_else(|| Error::InvalidArgument("none of the requested detectors could be loaded".into()))?;
    let slots: Vec<DetectorSlot> = loaded
        .iter()
        .map(|(id, d)| DetectorSlot {
            id: id.clone(),
            adapter: d.as_deref(),
        })
        .collect();
    let read_patches = |specs: &[String]| -> Result<Vec<(String, Patch)>> {
        specs
            .iter()
            .map(|s| {
                let (proxy, path) = split_pair(s)?;
                Ok((proxy, load_patch(&path)?))
            })
            .collect()
    };
    let on = if patches.is_empty() && outside.is_empty() {
        vec![(cfg.detector.id.clone(), patch_or_default(&cfg, None)?)]
    } else {
        read_patches(patches)?
    };
    let outside = read_patches(outside)?;

    let test = load_split(&cfg, Split::Test, input)?;
    let t = Instant::now();
    let mut matrices: Vec<TransferMatrix> = Vec::new();
    let mut s = EvalSettings::from_config(&cfg);
    for (mode, set) in [(cfg.placement.mode, &on), (PlacementMode::OutsideTarget, &outside)] {
        if set.is_empty() || matrices.iter().any(|m| m.mode == mode) {
            continue;
        }
        s.placement.mode = mode;
        matrices.push(run_transfer_benchmark(set, &slots, &test, &s, cfg.evaluation.noise_seed)?);
    }
    let report = BenchmarkReport::new(cfg.hash(), matrices, runtime(t, test.len()));
    write_benchmark(&layout, "benchmark", &report)
}

pub fn sweep(common: &Common, patch: Option<&Path>, angles: &[f64], scales: &[f64], brightness: &[f64]) -> Result<()> {
    let cfg = resolve_config(common)?;
    let layout = prepare_run(&cfg)?;
    let det = load_detector(&cfg)?;
    let patch = patch_or_default(&cfg, patch)?;
    let test = load_split(&cfg, Split::Test, det.input_size())?;
    let s = EvalSettings::from_config(&cfg);
    let table = run_dynamics_sweep(&patch, det.as_ref(), &test, &s, angles, scales, brightness)?;
    let mut csv = String::from("angle_deg,scale,brightness,ap\n");
    for c in &table.cells {
        let ap = c.ap.map_or_else(|| "N/A".to_string(), |v| format!("{v:.2}"));
        csv.push_str(&format!("{},{},{},{ap}\n", c.angle_deg, c.scale, c.brightness));
    }
    #[derive(serde::Serialize)]
    struct SweepFile<'a> {
        schema_version: u32,
        config_hash: String,
        table: &'a appa_core::eval::SweepTable,
    }
    write_json(
        &layout.reports().join("sweep.json"),
        &SweepFile {
            schema_version: 1,
            config_hash: cfg.hash(),
            table: &table,
        },
    )?;
    write_bytes(&layout.reports().join("sweep.csv"), csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

pub fn report(dir: &Path) -> Result<()> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut files: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("json"))
        .collect();
    files.sort();
    let mut rendered = 0;
    for f in files {
        let report = match load_report(&f) {
            Ok(r) => r,
            Err(e) => {
                log::debug!("skipping {}: {e}", f.display());
                continue;
            }
        };
        let (fixed, mismatches) = report.recompute();
        let mut out = render_tables(&fixed);
        if !mismatches.is_empty() {
            out.push_str("\nStored derived values disagreed with the raw cells and were recomputed:\n");
            for m in &mismatches {
                log::warn!("{}: {m}", f.display());
                out.push_str(&format!("  {m}\n"));
            }
        }
        let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
        write_bytes(&dir.join(format!("{stem}.tables.txt")), out.as_bytes())?;
        println!("== {}", f.display());
        print!("{out}");
        rendered += 1;
    }
    if rendered == 0 {
        return Err(data_err(dir, "no benchmark reports found"));
    }
    Ok(())
}
