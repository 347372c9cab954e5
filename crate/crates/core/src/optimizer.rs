//! The patch training loop: transform, place, detect, take the objectness
//! loss plus smoothness and printability penalties, and step the patch
//! pixels with an adaptive-moment update while the detector stays frozen.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detector::nn::Adam;
use crate::detector::synth::SyntheticSceneSpec;
use crate::detector::toy::ToyTrainConfig;
use crate::detector::{detect, postprocess, DetectorAdapter};
use crate::error::{Error, Result};
use crate::eval::metrics::ApInterpolation;
use crate::io::dataset::DatasetFormat;
use crate::losses::{nps_loss_grad, tv_loss_grad, LossBreakdown, PrintableColorSet};
use crate::placement::{apply_patches, ResampleMode};
use crate::transforms::{sample_transform, TransformConfig};
use crate::types::{
    clamp_patch, BoundingBox, Hyperparameters, Patch, PlacementSpec, SceneImage, CHANNELS,
    DEFAULT_PATCH_RESOLUTION, DEFAULT_TARGET_CLASS,
};

/// Which boxes the patch is placed on during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxSource {
    #[default]
    GroundTruth,
    /// Target-class detections of the proxy detector on the clean image.
    Detections,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EarlyStop {
    pub enabled: bool,
    pub patience_epochs: usize,
    pub min_improvement: f64,
}

impl Default for EarlyStop {
    fn default() -> Self {
        Self {
            enabled: true,
            patience_epochs: 50,
            min_improvement: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    #[default]
    Synthetic,
    Files,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    pub n_train: usize,
    pub n_test: usize,
    pub train_seed: u64,
    pub test_seed: u64,
    pub synthetic: SyntheticSceneSpec,
    pub train_root: Option<PathBuf>,
    pub test_root: Option<PathBuf>,
    pub format: DatasetFormat,
    /// Class names kept at ingestion (also the YOLO index order).
    pub classes: Vec<String>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let synthetic = SyntheticSceneSpec::default();
        Self {
            source: DatasetSource::Synthetic,
            n_train: 2000,
            n_test: 500,
            train_seed: 1,
            test_seed: 2,
            classes: synthetic.classes(),
            synthetic,
            train_root: None,
            test_root: None,
            format: DatasetFormat::InternalJson,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    /// Registry key, optionally `kind:name`.
    pub id: String,
    pub checkpoint: Option<PathBuf>,
    pub toy: ToyTrainConfig,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            id: crate::detector::toy::TOY_DETECTOR_KIND.to_string(),
            checkpoint: None,
            toy: ToyTrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    /// IoU needed for a detection to count as a true positive.
    pub match_iou: f64,
    pub interpolation: ApInterpolation,
    pub noise_seed: u64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            match_iou: 0.5,
            interpolation: ApInterpolation::AllPoint,
            noise_seed: 12345,
        }
    }
}

/// Fully resolved run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub patch_resolution: usize,
    pub target_class: String,
    pub box_source: BoxSource,
    pub resample: ResampleMode,
    pub printable_colors: Option<PathBuf>,
    /// Root under which `runs/<hash>/` directories are created. Not hashed.
    pub output_dir: PathBuf,
    pub hyperparameters: Hyperparameters,
    pub placement: PlacementSpec,
    pub transforms: TransformConfig,
    pub early_stop: EarlyStop,
    pub dataset: DatasetConfig,
    pub detector: DetectorConfig,
    pub evaluation: EvaluationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 8,
            patch_resolution: DEFAULT_PATCH_RESOLUTION,
            target_class: DEFAULT_TARGET_CLASS.to_string(),
            box_source: BoxSource::GroundTruth,
            resample: ResampleMode::Bilinear,
            printable_colors: None,
            output_dir: PathBuf::from("runs"),
            hyperparameters: Hyperparameters::default(),
            placement: PlacementSpec::default(),
            transforms: TransformConfig::default(),
            early_stop: EarlyStop::default(),
            dataset: DatasetConfig::default(),
            detector: DetectorConfig::default(),
            evaluation: EvaluationConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.hyperparameters.validate()?;
        self.placement.validate()?;
        self.transforms.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if self.patch_resolution < 2 {
            return Err(Error::config("patch_resolution", "must be >= 2"));
        }
        if self.target_class.is_empty() {
            return Err(Error::config("target_class", "must not be empty"));
        }
        if !(self.evaluation.match_iou > 0.0 && self.evaluation.match_iou <= 1.0) {
            return Err(Error::config("evaluation.match_iou", "not in (0, 1]"));
        }
        let ds = &self.dataset;
        if ds.source == DatasetSource::Synthetic && (ds.n_train == 0 || ds.n_test == 0) {
            return Err(Error::config("dataset.n_train", "synthetic splits must be nonempty"));
        }
        if ds.source == DatasetSource::Files && ds.train_root.is_none() {
            return Err(Error::config("dataset.train_root", "required when source = \"files\""));
        }
        Ok(())
    }

    /// Digest of every setting except the output root; stable under key
    /// reordering in the source file.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&json))[..16].to_string()
    }

    /// Digest of the settings that determine the trained detector: data and
    /// detector sections only.
    pub fn detector_hash(&self) -> String {
        let json = serde_json::to_vec(&(&self.dataset, &self.detector.id, &self.detector.toy)).expect("config serializes");
        hex::encode(Sha256::digest(&json))[..16].to_string()
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(self.hash())
    }

    pub fn colors(&self) -> Result<PrintableColorSet> {
        match &self.printable_colors {
            Some(p) => PrintableColorSet::load(p),
            None => Ok(PrintableColorSet::default_gamut()),
        }
    }
}

/// Uniform random patch in `[0, 1]`, deterministic per seed.
pub fn init_patch(resolution: usize, seed: u64) -> Result<Patch> {
    if resolution < 2 {
        return Err(Error::InvalidArgument(format!(
            "patch resolution {resolution} is below the 2x2 minimum"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels = (0..CHANNELS * resolution * resolution)
        .map(|_| rng.gen_range(0.0..=1.0))
        .collect();
    Patch::new(format!("init-{seed}"), resolution, resolution, pixels)
}

/// Mutable optimization state, enough to continue a run bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub patch: Patch,
    pub epoch: usize,
    /// Iteration within the current epoch.
    pub iteration: usize,
    pub step: u64,
    pub optimizer: Adam,
    pub loss_history: Vec<LossBreakdown>,
    pub rng: ChaCha8Rng,
    pub best_epoch_loss: f64,
    pub stale_epochs: usize,
    pub epoch_loss_sum: f64,
    pub finished: bool,
}

/// Drives the optimization of one patch against one frozen detector.
pub struct Trainer<'a> {
    cfg: &'a RunConfig,
    detector: &'a dyn DetectorAdapter,
    data: &'a [SceneImage],
    colors: PrintableColorSet,
    config_hash: String,
    detector_checksum: String,
    iterations_per_epoch: usize,
    state: TrainState,
    /// Where a NaN diagnostic is written, if anywhere.
    dump_dir: Option<PathBuf>,
}

#[derive(Serialize)]
struct NanDump<'a> {
    step: u64,
    epoch: usize,
    iteration: usize,
    batch: Vec<&'a str>,
    breakdown: LossBreakdown,
    patch_min: f64,
    patch_max: f64,
}

impl<'a> Trainer<'a> {
    pub fn new(
        cfg: &'a RunConfig,
        detector: &'a dyn DetectorAdapter,
        data: &'a [SceneImage],
        colors: PrintableColorSet,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut patch = init_patch(cfg.patch_resolution, cfg.seed)?;
        patch.id = format!("{}-{}-{}", detector.id(), cfg.placement.mode, cfg.patch_resolution);
        let n = patch.pixels().len();
        let state = TrainState {
            patch,
            epoch: 0,
            iteration: 0,
            step: 0,
            optimizer: Adam::new(n, cfg.hyperparameters.eta),
            loss_history: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ cfg.transforms.rng_seed.rotate_left(32)),
            best_epoch_loss: f64::INFINITY,
            stale_epochs: 0,
            epoch_loss_sum: 0.0,
            finished: false,
        };
        Self::with_state(cfg, detector, data, colors, state)
    }

    /// Continues from a saved state. The state's patch size must match the
    /// configuration.
    pub fn with_state(
        cfg: &'a RunConfig,
        detector: &'a dyn DetectorAdapter,
        data: &'a [SceneImage],
        colors: PrintableColorSet,
        state: TrainState,
    ) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::InvalidArgument("patch training needs at least one image".into()));
        }
        let (h, w) = detector.input_size();
        if let Some(img) = data.iter().find(|i| (i.height(), i.width()) != (h, w)) {
            return Err(Error::InvalidArgument(format!(
                "image `{}` is {}x{}, detector expects {w}x{h}",
                img.name,
                img.width(),
                img.height()
            )));
        }
        if state.patch.height() != cfg.patch_resolution || state.patch.width() != cfg.patch_resolution {
            return Err(Error::InvalidArgument("checkpoint patch size does not match the config".into()));
        }
        let iterations_per_epoch = cfg
            .hyperparameters
            .iterations_per_epoch
            .unwrap_or_else(|| data.len().div_ceil(cfg.batch_size));
        Ok(Self {
            cfg,
            detector,
            data,
            colors,
            config_hash: cfg.hash(),
            detector_checksum: detector.parameter_checksum(),
            iterations_per_epoch,
            state,
            dump_dir: None,
        })
    }

    pub fn set_dump_dir(&mut self, dir: impl Into<PathBuf>) {
        self.dump_dir = Some(dir.into());
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn detector_checksum(&self) -> &str {
        &self.detector_checksum
    }

    pub fn iterations_per_epoch(&self) -> usize {
        self.iterations_per_epoch
    }

    pub fn is_finished(&self) -> bool {
        self.state.finished || self.state.epoch >= self.cfg.hyperparameters.epochs
    }

    /// Image indices of the given batch. The per-epoch order depends only on
    /// the seed and epoch, so resumed runs reproduce it.
    fn batch_indices(&self, epoch: usize, iteration: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);
        let bs = self.cfg.batch_size;
        let n = order.len();
        let start = iteration * bs;
        if start + bs <= n || self.cfg.hyperparameters.iterations_per_epoch.is_some() {
            (start..start + bs).map(|k| order[k % n]).collect()
        } else {
            order[start.min(n)..].to_vec()
        }
    }

    fn placement_boxes(&self, img: &SceneImage) -> Result<Vec<BoundingBox>> {
        Ok(match self.cfg.box_source {
            crate::optimizer::BoxSource::GroundTruth => img.boxes_of(&self.cfg.target_class),
            crate::optimizer::BoxSource::Detections => {
                let h = &self.cfg.hyperparameters;
                detect(self.detector, img, h.conf_threshold, h.iou_threshold)?
                    .into_iter()
                    .filter(|d| d.top_class() == Some(self.cfg.target_class.as_str()))
                    .map(|d| d.bbox)
                    .collect()
            }
        })
    }

    /// Objectness part of the loss and its patch gradient for one batch.
    fn objectness_pass(&mut self, batch: &[usize]) -> Result<(f64, usize, Vec<f64>)> {
        let patch = &self.state.patch;
        let (ph, pw) = (patch.height(), patch.width());
        let h = &self.cfg.hyperparameters;
        let mut grad = vec![0.0; patch.pixels().len()];
        let mut l_obj = 0.0;
        let mut n_total = 0;
        let inv_b = 1.0 / batch.len() as f64;
        for &i in batch {
            let img = &self.data[i];
            let boxes = self.placement_boxes(img)?;
            let params: Vec<_> = boxes
                .iter()
                .map(|_| sample_transform(&self.cfg.transforms, &mut self.state.rng, ph, pw))
                .collect();
            let scene = apply_patches(img, patch, &self.cfg.placement, &boxes, &params, self.cfg.resample)?;
            let out = self.detector.forward(&scene.image, true)?;
            let dets: Vec<_> = postprocess(&out.candidates, self.detector.class_names(), h.conf_threshold, h.iou_threshold)
                .into_iter()
                .filter(|d| d.top_class() == Some(self.cfg.target_class.as_str()))
                .collect();
            if dets.is_empty() {
                continue;
            }
            let n = dets.len();
            n_total += n;
            l_obj += inv_b * dets.iter().map(|d| d.objectness).sum::<f64>() / n as f64;
            if scene.applied.is_empty() {
                continue;
            }
            let w = inv_b / n as f64;
            let seeds: Vec<(usize, f64)> = dets.iter().filter_map(|d| d.candidate.map(|c| (c, w))).collect();
            let grad_img = self.detector.objectness_input_gradient(&out, &seeds)?;
            for (g, v) in grad.iter_mut().zip(scene.backward(&grad_img, ph, pw)) {
                *g += v;
            }
        }
        Ok((l_obj, n_total, grad))
    }

    /// Runs one optimization step and returns the loss measured before it.
    pub fn step(&mut self) -> Result<LossBreakdown> {
        if self.is_finished() {
            return Err(Error::InvalidArgument("training already finished".into()));
        }
        let batch = self.batch_indices(self.state.epoch, self.state.iteration);
        let (l_obj, n_det, mut grad) = self.objectness_pass(&batch)?;
        let hp = self.cfg.hyperparameters;
        let (l_tv, g_tv) = tv_loss_grad(&self.state.patch)?;
        let (l_nps, g_nps) = nps_loss_grad(&self.state.patch, &self.colors);
        for ((g, t), n) in grad.iter_mut().zip(&g_tv).zip(&g_nps) {
            *g += hp.alpha * t + hp.beta * n;
        }
        let breakdown = LossBreakdown::new(l_obj, l_tv, l_nps, n_det, &hp);
        if !breakdown.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            self.write_nan_dump(&batch, &breakdown);
            return Err(Error::Numeric(format!(
                "non-finite loss at step {} (epoch {}, iteration {}): {breakdown:?}",
                self.state.step, self.state.epoch, self.state.iteration
            )));
        }
        self.state.optimizer.update(self.state.patch.pixels_mut(), &grad);
        let id = self.state.patch.id.clone();
        let clamped = clamp_patch(std::mem::replace(&mut self.state.patch, Patch::filled(id, 2, 2, 0.0)?))?;
        self.state.patch = clamped;

        self.state.loss_history.push(breakdown);
        self.state.epoch_loss_sum += breakdown.total;
        self.state.step += 1;
        self.state.iteration += 1;
        if self.state.iteration >= self.iterations_per_epoch {
            self.end_epoch()?;
        }
        Ok(breakdown)
    }

    fn end_epoch(&mut self) -> Result<()> {
        self.verify_detector()?;
        let mean = self.state.epoch_loss_sum / self.iterations_per_epoch as f64;
        log::info!(
            "epoch {}/{}: mean loss {mean:.5}",
            self.state.epoch + 1,
            self.cfg.hyperparameters.epochs
        );
        if mean < self.state.best_epoch_loss - self.cfg.early_stop.min_improvement {
            self.state.best_epoch_loss = mean;
            self.state.stale_epochs = 0;
        } else {
            self.state.stale_epochs += 1;
        }
        self.state.epoch += 1;
        self.state.iteration = 0;
        self.state.epoch_loss_sum = 0.0;
        let es = &self.cfg.early_stop;
        if es.enabled && self.state.stale_epochs >= es.patience_epochs {
            log::info!("early stop after {} stale epochs", self.state.stale_epochs);
            self.state.finished = true;
        }
        if self.state.epoch >= self.cfg.hyperparameters.epochs {
            self.state.finished = true;
        }
        Ok(())
    }

    /// Fails when the detector parameters no longer match the checksum taken
    /// when training started.
    pub fn verify_detector(&self) -> Result<()> {
        if self.detector.parameter_checksum() != self.detector_checksum {
            return Err(Error::WeightDrift {
                id: self.detector.id().to_string(),
            });
        }
        Ok(())
    }

    fn write_nan_dump(&self, batch: &[usize], breakdown: &LossBreakdown) {
        let Some(dir) = &self.dump_dir else { return };
        let px = self.state.patch.pixels();
        let dump = NanDump {
            step: self.state.step,
            epoch: self.state.epoch,
            iteration: self.state.iteration,
            batch: batch.iter().map(|&i| self.data[i].name.as_str()).collect(),
            breakdown: *breakdown,
            patch_min: px.iter().copied().fold(f64::INFINITY, f64::min),
            patch_max: px.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        };
        let path = dir.join("nan_dump.json");
        let written = std::fs::create_dir_all(dir)
            .and_then(|_| std::fs::write(&path, serde_json::to_vec_pretty(&dump).unwrap_or_default()));
        if let Err(e) = written {
            log::error!("could not write {}: {e}", path.display());
        }
    }

    /// Runs to completion, writing a checkpoint after every epoch and
    /// streaming losses, when the respective sinks are given.
    pub fn run(&mut self, checkpoint_dir: Option<&Path>, mut loss_log: Option<&mut LossLog>) -> Result<()> {
        self.verify_detector()?;
        while !self.is_finished() {
            let epoch = self.state.epoch;
            let b = self.step()?;
            if let Some(log) = loss_log.as_deref_mut() {
                log.append(self.state.step, &b)?;
            }
            if self.state.epoch != epoch {
                if let Some(dir) = checkpoint_dir {
                    let ckpt = Checkpoint::capture(self);
                    ckpt.save(&dir.join(format!("epoch_{:04}.ckpt", self.state.epoch)))?;
                    ckpt.save(&dir.join("latest.ckpt"))?;
                }
            }
        }
        self.verify_detector()
    }
}

/// Trains a patch from scratch; returns the final patch and state.
pub fn train_patch(
    cfg: &RunConfig,
    detector: &dyn DetectorAdapter,
    data: &[SceneImage],
    run_dir: Option<&Path>,
) -> Result<(Patch, TrainState)> {
    let mut trainer = Trainer::new(cfg, detector, data, cfg.colors()?)?;
    let mut log = match run_dir {
        Some(dir) => {
            trainer.set_dump_dir(dir);
            Some(LossLog::create(&dir.join("loss.csv"))?)
        }
        None => None,
    };
    let ckpt_dir = run_dir.map(|d| d.join("checkpoints"));
    trainer.run(ckpt_dir.as_deref(), log.as_mut())?;
    let state = trainer.into_state();
    Ok((state.patch.clone(), state))
}

/// Streams `step,l_obj,l_tv,l_nps,total,n_detections` rows.
pub struct LossLog {
    out: BufWriter<File>,
    path: PathBuf,
}

impl LossLog {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(f);
        writeln!(out, "step,l_obj,l_tv,l_nps,total,n_detections").map_err(|e| Error::io(path, e))?;
        Ok(Self {
            out,
            path: path.to_path_buf(),
        })
    }

    pub fn append(&mut self, step: u64, b: &LossBreakdown) -> Result<()> {
        writeln!(
            self.out,
            "{step},{},{},{},{},{}",
            b.l_obj, b.l_tv, b.l_nps, b.total, b.n_detections
        )
        .and_then(|_| self.out.flush())
        .map_err(|e| Error::io(&self.path, e))
    }
}

const CKPT_MAGIC: &[u8; 8] = b"APPAPTCH";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialized training state plus the identity of what produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub detector_checksum: String,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn capture(trainer: &Trainer<'_>) -> Self {
        Self {
            config_hash: trainer.config_hash.clone(),
            detector_checksum: trainer.detector_checksum.clone(),
            state: trainer.state.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let s = &self.state;
        let mut b = Vec::new();
        b.extend_from_slice(CKPT_MAGIC);
        put_u32(&mut b, CHECKPOINT_VERSION);
        put_str(&mut b, &self.config_hash);
        put_str(&mut b, &self.detector_checksum);
        put_str(&mut b, &s.patch.id);
        put_u64(&mut b, s.epoch as u64);
        put_u64(&mut b, s.iteration as u64);
        put_u64(&mut b, s.step);
        put_u32(&mut b, s.patch.height() as u32);
        put_u32(&mut b, s.patch.width() as u32);
        put_f64s(&mut b, s.patch.pixels());
        let o = &s.optimizer;
        for v in [o.lr, o.beta1, o.beta2, o.eps] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        put_u64(&mut b, o.step);
        put_f64s(&mut b, &o.m);
        put_f64s(&mut b, &o.v);
        put_str(&mut b, &serde_json::to_string(&s.rng)?);
        put_u64(&mut b, s.loss_history.len() as u64);
        for l in &s.loss_history {
            put_f64s(&mut b, &[l.l_obj, l.l_tv, l.l_nps, l.total]);
            put_u64(&mut b, l.n_detections as u64);
        }
        put_f64s(&mut b, &[s.best_epoch_loss, s.epoch_loss_sum]);
        put_u64(&mut b, s.stale_epochs as u64);
        b.push(s.finished as u8);
        let digest = Sha256::digest(&b);
        b.extend_from_slice(&digest);
        Ok(b)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let corrupt = |m: &str| Error::data(origin, format!("corrupt checkpoint: {m}"));
        if bytes.len() < CKPT_MAGIC.len() + 4 + 32 || &bytes[..8] != CKPT_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        let mut r = ByteReader { buf: body, pos: 8 };
        let version = r.u32().ok_or_else(|| corrupt("truncated"))?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch"));
        }
        let t = || corrupt("truncated");
        let config_hash = r.string().ok_or_else(t)?;
        let detector_checksum = r.string().ok_or_else(t)?;
        let id = r.string().ok_or_else(t)?;
        let epoch = r.u64().ok_or_else(t)? as usize;
        let iteration = r.u64().ok_or_else(t)? as usize;
        let step = r.u64().ok_or_else(t)?;
        let h = r.u32().ok_or_else(t)? as usize;
        let w = r.u32().ok_or_else(t)? as usize;
        let pixels = r.f64s().ok_or_else(t)?;
        let patch = Patch::new(id, h, w, pixels).map_err(|e| corrupt(&e.to_string()))?;
        let hyper: Vec<f64> = (0..4).map(|_| r.f64()).collect::<Option<_>>().ok_or_else(t)?;
        let opt_step = r.u64().ok_or_else(t)?;
        let m = r.f64s().ok_or_else(t)?;
        let v = r.f64s().ok_or_else(t)?;
        if m.len() != patch.pixels().len() || v.len() != m.len() {
            return Err(corrupt("moment buffers do not match the patch"));
        }
        let rng: ChaCha8Rng = serde_json::from_str(&r.string().ok_or_else(t)?)?;
        let n_hist = r.u64().ok_or_else(t)? as usize;
        let mut loss_history = Vec::with_capacity(n_hist.min(1 << 20));
        for _ in 0..n_hist {
            let v = r.f64s().ok_or_else(t)?;
            let [l_obj, l_tv, l_nps, total] = v[..] else {
                return Err(corrupt("bad loss record"));
            };
            loss_history.push(LossBreakdown {
                l_obj,
                l_tv,
                l_nps,
                total,
                n_detections: r.u64().ok_or_else(t)? as usize,
            });
        }
        let tail = r.f64s().ok_or_else(t)?;
        let [best_epoch_loss, epoch_loss_sum] = tail[..] else {
            return Err(corrupt("bad trailer"));
        };
        let stale_epochs = r.u64().ok_or_else(t)? as usize;
        let finished = r.take(1).ok_or_else(t)?[0] != 0;
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Self {
            config_hash,
            detector_checksum,
            state: TrainState {
                patch,
                epoch,
                iteration,
                step,
                optimizer: Adam {
                    lr: hyper[0],
                    beta1: hyper[1],
                    beta2: hyper[2],
                    eps: hyper[3],
                    step: opt_step,
                    m,
                    v,
                },
                loss_history,
                rng,
                best_epoch_loss,
                stale_epochs,
                epoch_loss_sum,
                finished,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Loads a checkpoint and checks it belongs to `cfg` and `detector`.
pub fn resume(path: &Path, cfg: &RunConfig, detector: &dyn DetectorAdapter) -> Result<TrainState> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.config_hash != cfg.hash() {
        return Err(Error::data(
            path,
            format!("checkpoint was written for config {}, not {}", ckpt.config_hash, cfg.hash()),
        ));
    }
    if ckpt.detector_checksum != detector.parameter_checksum() {
        return Err(Error::WeightDrift {
            id: detector.id().to_string(),
        });
    }
    Ok(ckpt.state)
}

fn put_u32(b: &mut Vec<u8>, v: u32) {
    b.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(b: &mut Vec<u8>, v: u64) {
    b.extend_from_slice(&v.to_le_bytes());
}

fn put_str(b: &mut Vec<u8>, s: &str) {
    put_u64(b, s.len() as u64);
    b.extend_from_slice(s.as_bytes());
}

fn put_f64s(b: &mut Vec<u8>, v: &[f64]) {
    put_u64(b, v.len() as u64);
    for x in v {
        b.extend_from_slice(&x.to_le_bytes());
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.buf.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }

    fn f64(&mut self) -> Option<f64> {
        Some(f64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }

    fn string(&mut self) -> Option<String> {
        let n = self.u64()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).ok()
    }

    fn f64s(&mut self) -> Option<Vec<f64>> {
        let n = self.u64()? as usize;
        let raw = self.take(n.checked_mul(8)?)?;
        Some(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::synth::generate_synthetic_dataset;
    use crate::detector::toy::{ArchDescriptor, ToyDetector};
    use crate::placement::place_all;

    fn detector() -> ToyDetector {
        let spec = SyntheticSceneSpec::default();
        ToyDetector::new("toy", ArchDescriptor::standard(96, spec.classes()), 5).unwrap()
    }

    fn data(n: usize) -> Vec<SceneImage> {
        generate_synthetic_dataset(&SyntheticSceneSpec::default(), n, 11).unwrap()
    }

    fn small_cfg() -> RunConfig {
        let mut c = RunConfig::default();
        c.patch_resolution = 8;
        c.batch_size = 2;
        c.hyperparameters.epochs = 3;
        // Untrained weights score low; admit everything.
        c.hyperparameters.conf_threshold = 1e-6;
        c
    }

    #[test]
    fn init_patch_contract() {
        let a = init_patch(50, 9).unwrap();
        assert_eq!(a, init_patch(50, 9).unwrap());
        assert_eq!(a.pixels().len(), 50 * 50 * 3);
        assert!(a.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(a, init_patch(50, 10).unwrap());
        assert!(init_patch(1, 0).is_err());
    }

    #[test]
    fn no_images_is_an_error() {
        let c = small_cfg();
        let d = detector();
        assert!(Trainer::new(&c, &d, &[], PrintableColorSet::default_gamut()).is_err());
    }

    #[test]
    fn unregularized_loss_is_mean_objectness() {
        let mut c = small_cfg();
        c.hyperparameters.alpha = 0.0;
        c.hyperparameters.beta = 0.0;
        c.batch_size = 1;
        c.transforms = TransformConfig::identity();
        let d = detector();
        let imgs = data(1);
        let mut t = Trainer::new(&c, &d, &imgs, PrintableColorSet::default_gamut()).unwrap();
        let p0 = t.state().patch.clone();
        let b = t.step().unwrap();
        let scene = place_all(&imgs[0], &p0, &c.placement, &imgs[0].boxes_of("aircraft")).unwrap();
        let dets: Vec<_> = detect(&d, &scene, 1e-6, 0.45)
            .unwrap()
            .into_iter()
            .filter(|d| d.top_class() == Some("aircraft"))
            .collect();
        assert!(!dets.is_empty());
        let mean = dets.iter().map(|d| d.objectness).sum::<f64>() / dets.len() as f64;
        assert!((b.total - mean).abs() < 1e-12, "{} vs {mean}", b.total);
        assert_eq!(b.n_detections, dets.len());
    }

    #[test]
    fn every_step_stays_in_range_and_detector_frozen() {
        let c = small_cfg();
        let d = detector();
        let before = d.parameter_checksum();
        let imgs = data(4);
        let mut t = Trainer::new(&c, &d, &imgs, PrintableColorSet::default_gamut()).unwrap();
        while !t.is_finished() {
            t.step().unwrap();
            assert!(t.state().patch.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(t.state().loss_history.len() as u64, t.state().step);
            assert!(t.state().loss_history.last().unwrap().n_detections > 0);
        }
        assert_eq!(t.state().step, 6);
        assert_eq!(d.parameter_checksum(), before);
        t.verify_detector().unwrap();
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let c = small_cfg();
        let d = detector();
        let imgs = data(5);
        let colors = PrintableColorSet::default_gamut;
        let mut full = Trainer::new(&c, &d, &imgs, colors()).unwrap();
        full.run(None, None).unwrap();

        let mut first = Trainer::new(&c, &d, &imgs, colors()).unwrap();
        for _ in 0..4 {
            first.step().unwrap();
        }
        let bytes = Checkpoint::capture(&first).to_bytes().unwrap();
        let ckpt = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(ckpt.state, *first.state());
        let mut second = Trainer::with_state(&c, &d, &imgs, colors(), ckpt.state).unwrap();
        second.run(None, None).unwrap();
        assert_eq!(second.state().loss_history, full.state().loss_history);
        assert_eq!(second.state().patch, full.state().patch);
    }

    #[test]
    fn resume_checks_file_integrity_and_config() {
        let dir = tempfile::tempdir().unwrap();
        let c = small_cfg();
        let d = detector();
        let imgs = data(2);
        let mut t = Trainer::new(&c, &d, &imgs, PrintableColorSet::default_gamut()).unwrap();
        t.step().unwrap();
        let path = dir.path().join("a.ckpt");
        Checkpoint::capture(&t).save(&path).unwrap();
        assert_eq!(resume(&path, &c, &d).unwrap(), *t.state());

        let mut other = c.clone();
        other.seed = 99;
        assert!(resume(&path, &other, &d).is_err());

        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(resume(&path, &c, &d).is_err());

        bytes[8] = 7;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Version { found: 7, .. })));
    }

    #[test]
    fn resuming_a_finished_run_is_a_no_op() {
        let c = small_cfg();
        let d = detector();
        let imgs = data(2);
        let mut t = Trainer::new(&c, &d, &imgs, PrintableColorSet::default_gamut()).unwrap();
        t.run(None, None).unwrap();
        let done = t.into_state();
        let mut again = Trainer::with_state(&c, &d, &imgs, PrintableColorSet::default_gamut(), done.clone()).unwrap();
        assert!(again.is_finished());
        again.run(None, None).unwrap();
        assert_eq!(*again.state(), done);
        assert!(again.step().is_err());
    }

    #[test]
    fn small_steps_descend() {
        let d = detector();
        let imgs = data(1);
        let mut failures = 0;
        for seed in 0..20 {
            let mut c = small_cfg();
            c.seed = seed;
            c.batch_size = 1;
            c.hyperparameters.eta = 1e-4;
            c.transforms = TransformConfig::identity();
            let mut t = Trainer::new(&c, &d, &imgs, PrintableColorSet::default_gamut()).unwrap();
            let a = t.step().unwrap().total;
            let b = t.step().unwrap().total;
            failures += (b > a) as usize;
        }
        assert!(failures < 2, "{failures} of 20 steps increased the loss");
    }

    #[test]
    fn same_seed_same_patch() {
        let c = small_cfg();
        let d = detector();
        let imgs = data(3);
        let (a, _) = train_patch(&c, &d, &imgs, None).unwrap();
        let (b, _) = train_patch(&c, &d, &imgs, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn partial_batches_are_kept() {
        let c = small_cfg();
        let d = detector();
        let imgs = data(5);
        let t = Trainer::new(&c, &d, &imgs, PrintableColorSet::default_gamut()).unwrap();
        assert_eq!(t.iterations_per_epoch(), 3);
        let mut seen: Vec<usize> = (0..3).flat_map(|j| t.batch_indices(0, j)).collect();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn run_writes_checkpoints_and_loss_log() {
        let dir = tempfile::tempdir().unwrap();
        let c = small_cfg();
        let d = detector();
        let imgs = data(2);
        let (_, state) = train_patch(&c, &d, &imgs, Some(dir.path())).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
        assert_eq!(csv.lines().next().unwrap(), "step,l_obj,l_tv,l_nps,total,n_detections");
        assert_eq!(csv.lines().count(), 1 + state.loss_history.len());
        for e in 1..=3 {
            assert!(dir.path().join(format!("checkpoints/epoch_{e:04}.ckpt")).exists());
        }
        let latest = Checkpoint::load(&dir.path().join("checkpoints/latest.ckpt")).unwrap();
        assert_eq!(latest.state, state);
    }
}
