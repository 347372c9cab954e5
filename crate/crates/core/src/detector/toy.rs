//! A small single-scale anchor-based detector that trains in minutes on one
//! CPU core.
//!
//! Backbone: three stride-2 convolutions followed by two dilated residual
//! convolutions (receptive field of about 110 px, wide enough to see context
//! around a target), then a 1x1 head predicting, per grid cell and anchor,
//! box offsets, an objectness logit and class logits.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::nn::{Adam, Conv2d, ConvSpec, LayerTrace};
use super::{DetectorAdapter, ForwardOutput, RawCandidate};
use crate::error::{Error, Result};
use crate::eval::metrics::{ApAccumulator, ApInterpolation};
use crate::types::{BoundingBox, SceneImage, CHANNELS};

pub const TOY_DETECTOR_KIND: &str = "toy";
const CHECKPOINT_MAGIC: &[u8; 8] = b"APPATOYD";
pub const CHECKPOINT_VERSION: u32 = 1;
const BOX_FIELDS: usize = 5;
const MAX_LOG_SCALE: f32 = 4.0;

/// Everything needed to rebuild the network shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchDescriptor {
    pub input_height: usize,
    pub input_width: usize,
    pub layers: Vec<ConvSpec>,
    /// Anchor `(width, height)` in pixels.
    pub anchors: Vec<[f64; 2]>,
    pub grid_stride: usize,
    pub classes: Vec<String>,
}

impl ArchDescriptor {
    pub fn standard(input_size: usize, classes: Vec<String>) -> Self {
        let conv = |i, o, stride, dilation, residual| ConvSpec {
            in_channels: i,
            out_channels: o,
            kernel: 3,
            stride,
            dilation,
            residual,
            activation: true,
        };
        let anchors = vec![[12.0, 12.0], [22.0, 22.0]];
        let head_out = anchors.len() * (BOX_FIELDS + classes.len());
        Self {
            input_height: input_size,
            input_width: input_size,
            layers: vec![
                conv(3, 12, 2, 1, false),
                conv(12, 24, 2, 1, false),
                conv(24, 32, 2, 1, false),
                conv(32, 32, 1, 2, true),
                conv(32, 32, 1, 4, true),
                ConvSpec {
                    in_channels: 32,
                    out_channels: head_out,
                    kernel: 1,
                    stride: 1,
                    dilation: 1,
                    residual: false,
                    activation: false,
                },
            ],
            anchors,
            grid_stride: 8,
            classes,
        }
    }

    fn fields(&self) -> usize {
        BOX_FIELDS + self.classes.len()
    }

    fn grid(&self) -> (usize, usize) {
        (
            self.input_height / self.grid_stride,
            self.input_width / self.grid_stride,
        )
    }

    fn validate(&self) -> Result<()> {
        let mut h = self.input_height;
        let mut w = self.input_width;
        let mut c = CHANNELS;
        for l in &self.layers {
            if l.in_channels != c {
                return Err(Error::InvalidArgument("layer channel chain is broken".into()));
            }
            let (oh, ow) = l.output_size(h, w);
            if l.residual && (oh, ow, l.out_channels) != (h, w, c) {
                return Err(Error::InvalidArgument("residual layer changes shape".into()));
            }
            (h, w, c) = (oh, ow, l.out_channels);
        }
        if (h, w) != self.grid() || c != self.anchors.len() * self.fields() {
            return Err(Error::InvalidArgument(format!(
                "head produces {c}x{h}x{w}, expected {}x{:?}",
                self.anchors.len() * self.fields(),
                self.grid()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDetector {
    id: String,
    arch: ArchDescriptor,
    seed: u64,
    layers: Vec<Conv2d>,
}

struct ToyTrace {
    layers: Vec<LayerTrace>,
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax(logits: &[f32]) -> Vec<f32> {
    let m = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let e: Vec<f32> = logits.iter().map(|&l| (l - m).exp()).collect();
    let s: f32 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

impl ToyDetector {
    /// Seeded He-style initialization.
    pub fn new(id: impl Into<String>, arch: ArchDescriptor, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers: Vec<Conv2d> = arch
            .layers
            .iter()
            .map(|&spec| {
                let fan_in = (spec.in_channels * spec.kernel * spec.kernel) as f64;
                let mut bound = (6.0 / fan_in).sqrt();
                if spec.residual {
                    bound *= 0.3;
                }
                let mut c = Conv2d::zeros(spec);
                for w in &mut c.weight {
                    *w = rng.gen_range(-bound..bound) as f32;
                }
                c
            })
            .collect();
        // Start with low objectness everywhere.
        let fields = arch.fields();
        let head = layers.last_mut().expect("architecture has a head");
        for w in &mut head.weight {
            *w *= 0.1;
        }
        for a in 0..arch.anchors.len() {
            head.bias[a * fields + 4] = -4.0;
        }
        Ok(Self {
            id: id.into(),
            arch,
            seed,
            layers,
        })
    }

    pub fn arch(&self) -> &ArchDescriptor {
        &self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn set_id(&mut self, id: impl Into<String>) {
        self.id = id.into();
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.spec.param_len()).sum()
    }

    fn run(&self, pixels: &[f32]) -> Vec<LayerTrace> {
        let mut traces = Vec::with_capacity(self.layers.len());
        let (mut h, mut w) = (self.arch.input_height, self.arch.input_width);
        for (i, layer) in self.layers.iter().enumerate() {
            let input = if i == 0 { pixels } else { &traces.last().map(|t: &LayerTrace| &t.output).unwrap()[..] };
            let (t, oh, ow) = layer.forward(input, h, w);
            traces.push(t);
            (h, w) = (oh, ow);
        }
        traces
    }

    fn decode(&self, head: &[f32]) -> Vec<RawCandidate> {
        let (gh, gw) = self.arch.grid();
        let plane = gh * gw;
        let fields = self.arch.fields();
        let stride = self.arch.grid_stride as f64;
        let (img_w, img_h) = (self.arch.input_width as f64, self.arch.input_height as f64);
        let n_anchor = self.arch.anchors.len();
        let mut out = Vec::with_capacity(plane * n_anchor);
        for gy in 0..gh {
            for gx in 0..gw {
                let g = gy * gw + gx;
                for (a, anchor) in self.arch.anchors.iter().enumerate() {
                    let at = |f: usize| head[(a * fields + f) * plane + g];
                    let cx = (gx as f64 + sigmoid(at(0)) as f64) * stride;
                    let cy = (gy as f64 + sigmoid(at(1)) as f64) * stride;
                    let bw = anchor[0] * (at(2).clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE) as f64).exp();
                    let bh = anchor[1] * (at(3).clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE) as f64).exp();
                    let bbox = BoundingBox {
                        x1: (cx - bw / 2.0).max(0.0),
                        y1: (cy - bh / 2.0).max(0.0),
                        x2: (cx + bw / 2.0).min(img_w),
                        y2: (cy + bh / 2.0).min(img_h),
                    };
                    let logits: Vec<f32> = (BOX_FIELDS..fields).map(at).collect();
                    out.push(RawCandidate {
                        bbox,
                        objectness: sigmoid(at(4)) as f64,
                        class_scores: softmax(&logits).into_iter().map(f64::from).collect(),
                    });
                }
            }
        }
        out
    }

    /// Backward pass from a head gradient; returns the input gradient when
    /// asked, and accumulates parameter gradients when given a buffer.
    fn backprop(
        &self,
        traces: &[LayerTrace],
        head_grad: Vec<f32>,
        mut param_grads: Option<&mut [Vec<f32>]>,
        need_input: bool,
    ) -> Option<Vec<f32>> {
        let mut grad = head_grad;
        for i in (0..self.layers.len()).rev() {
            let pg = param_grads.as_mut().map(|g| &mut g[i][..]);
            let want_input = i > 0 || need_input;
            match self.layers[i].backward(&traces[i], &mut grad, pg, want_input) {
                Some(g) => grad = g,
                None => return None,
            }
        }
        Some(grad)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let desc = serde_json::to_vec(&(&self.id, &self.arch))?;
        buf.extend_from_slice(&(desc.len() as u32).to_le_bytes());
        buf.extend_from_slice(&desc);
        buf.extend_from_slice(&self.seed.to_le_bytes());
        buf.extend_from_slice(&(self.parameter_count() as u64).to_le_bytes());
        for l in &self.layers {
            for v in l.weight.iter().chain(&l.bias) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let corrupt = |m: &str| Error::data(path, format!("corrupt toy detector checkpoint: {m}"));
        if bytes.len() < 8 + 4 + 32 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32().ok_or_else(|| corrupt("truncated"))?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let len = r.u32().ok_or_else(|| corrupt("truncated"))? as usize;
        let desc = r.take(len).ok_or_else(|| corrupt("truncated descriptor"))?;
        let (id, arch): (String, ArchDescriptor) = serde_json::from_slice(desc)?;
        let seed = r.u64().ok_or_else(|| corrupt("truncated"))?;
        let n = r.u64().ok_or_else(|| corrupt("truncated"))? as usize;
        let mut det = Self::new(id, arch, seed)?;
        if n != det.parameter_count() {
            return Err(corrupt("parameter count does not match architecture"));
        }
        for l in &mut det.layers {
            for v in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                *v = f32::from_le_bytes(r.take(4).ok_or_else(|| corrupt("truncated weights"))?.try_into().unwrap());
            }
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(det)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.buf.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

impl DetectorAdapter for ToyDetector {
    fn id(&self) -> &str {
        &self.id
    }

    fn input_size(&self) -> (usize, usize) {
        (self.arch.input_height, self.arch.input_width)
    }

    fn class_names(&self) -> &[String] {
        &self.arch.classes
    }

    fn forward(&self, image: &SceneImage, keep_trace: bool) -> Result<ForwardOutput> {
        if (image.height(), image.width()) != self.input_size() {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{} input", self.arch.input_width, self.arch.input_height),
                actual: format!("{}x{}", image.width(), image.height()),
            });
        }
        let traces = self.run(image.pixels());
        let candidates = self.decode(&traces.last().expect("head").output);
        Ok(ForwardOutput {
            candidates,
            trace: keep_trace.then(|| Box::new(ToyTrace { layers: traces }) as Box<dyn std::any::Any + Send>),
        })
    }

    fn objectness_input_gradient(&self, output: &ForwardOutput, seeds: &[(usize, f64)]) -> Result<Vec<f32>> {
        let trace = output
            .trace
            .as_ref()
            .and_then(|t| t.downcast_ref::<ToyTrace>())
            .ok_or_else(|| Error::Detector {
                id: self.id.clone(),
                message: "forward pass was run without a trace".into(),
            })?;
        let (gh, gw) = self.arch.grid();
        let plane = gh * gw;
        let n_anchor = self.arch.anchors.len();
        let fields = self.arch.fields();
        let mut head_grad = vec![0.0f32; n_anchor * fields * plane];
        for &(idx, w) in seeds {
            let c = output.candidates.get(idx).ok_or_else(|| Error::Detector {
                id: self.id.clone(),
                message: format!("candidate {idx} out of range"),
            })?;
            let (g, a) = (idx / n_anchor, idx % n_anchor);
            let p = c.objectness;
            head_grad[(a * fields + 4) * plane + g] += (w * p * (1.0 - p)) as f32;
        }
        Ok(self
            .backprop(&trace.layers, head_grad, None, true)
            .expect("input gradient requested"))
    }

    fn parameter_checksum(&self) -> String {
        let mut h = Sha256::new();
        for l in &self.layers {
            for v in l.weight.iter().chain(&l.bias) {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Probability that a target gets a random occluding square during
    /// training. Off by default: it hardens the detector against exactly
    /// the patch geometry under study.
    pub occlusion_prob: f64,
    pub required_ap: f64,
    pub conf_threshold: f64,
    pub nms_iou: f64,
    pub match_iou: f64,
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 16,
            learning_rate: 2e-3,
            seed: 0,
            occlusion_prob: 0.0,
            required_ap: 0.85,
            conf_threshold: 0.4,
            nms_iou: 0.45,
            match_iou: 0.5,
        }
    }
}

pub struct TrainedDetector {
    pub detector: ToyDetector,
    /// AP on the held-out images, in `[0, 1]`.
    pub clean_ap: f64,
}

struct SlotTarget {
    tx: f32,
    ty: f32,
    tw: f32,
    th: f32,
    class: usize,
}

/// Head gradient of the detection training loss for one image; returns the
/// loss value as well.
fn head_loss_grad(det: &ToyDetector, head: &[f32], annotations: &[(BoundingBox, usize)]) -> (f64, Vec<f32>) {
    let arch = &det.arch;
    let (gh, gw) = arch.grid();
    let plane = gh * gw;
    let fields = arch.fields();
    let n_anchor = arch.anchors.len();
    let stride = arch.grid_stride as f64;
    let mut targets: Vec<Option<SlotTarget>> = (0..plane * n_anchor).map(|_| None).collect();
    for &(b, class) in annotations {
        let (cx, cy) = b.center();
        let gx = ((cx / stride) as usize).min(gw - 1);
        let gy = ((cy / stride) as usize).min(gh - 1);
        let best = (0..n_anchor)
            .max_by(|&i, &j| {
                let shape_iou = |k: usize| {
                    let [aw, ah] = arch.anchors[k];
                    let inter = aw.min(b.width()) * ah.min(b.height());
                    inter / (aw * ah + b.area() - inter)
                };
                shape_iou(i).total_cmp(&shape_iou(j))
            })
            .unwrap_or(0);
        let [aw, ah] = arch.anchors[best];
        targets[(gy * gw + gx) * n_anchor + best] = Some(SlotTarget {
            tx: (cx / stride - gx as f64) as f32,
            ty: (cy / stride - gy as f64) as f32,
            tw: (b.width() / aw).ln() as f32,
            th: (b.height() / ah).ln() as f32,
            class,
        });
    }

    const BOX_WEIGHT: f32 = 2.0;
    const POS_WEIGHT: f32 = 2.0;
    let mut grad = vec![0.0f32; head.len()];
    let mut loss = 0.0f64;
    for g in 0..plane {
        for a in 0..n_anchor {
            let ch = |f: usize| (a * fields + f) * plane + g;
            let logit = head[ch(4)];
            let p = sigmoid(logit);
            match &targets[g * n_anchor + a] {
                None => {
                    loss -= ((1.0 - p).max(1e-7) as f64).ln();
                    grad[ch(4)] = p;
                }
                Some(t) => {
                    loss -= POS_WEIGHT as f64 * (p.max(1e-7) as f64).ln();
                    grad[ch(4)] = POS_WEIGHT * (p - 1.0);
                    for (f, target) in [(0, t.tx), (1, t.ty)] {
                        let s = sigmoid(head[ch(f)]);
                        loss += (BOX_WEIGHT * (s - target).powi(2)) as f64;
                        grad[ch(f)] = 2.0 * BOX_WEIGHT * (s - target) * s * (1.0 - s);
                    }
                    for (f, target) in [(2, t.tw), (3, t.th)] {
                        let d = head[ch(f)] - target;
                        loss += (BOX_WEIGHT * d * d) as f64;
                        grad[ch(f)] = 2.0 * BOX_WEIGHT * d;
                    }
                    let logits: Vec<f32> = (BOX_FIELDS..fields).map(|f| head[ch(f)]).collect();
                    let probs = softmax(&logits);
                    loss -= (probs[t.class].max(1e-7) as f64).ln();
                    for (k, pr) in probs.iter().enumerate() {
                        grad[ch(BOX_FIELDS + k)] = pr - if k == t.class { 1.0 } else { 0.0 };
                    }
                }
            }
        }
    }
    (loss, grad)
}

/// Pastes random noise or flat squares over some targets and some background
/// spots so the detector does not key on unbroken glyph interiors.
fn occlude(image: &mut SceneImage, prob: f64, rng: &mut ChaCha8Rng) {
    let (h, w) = (image.height(), image.width());
    let mut squares: Vec<(f64, f64, f64)> = Vec::new();
    for a in &image.annotations {
        if !rng.gen_bool(prob) {
            continue;
        }
        let b = a.bbox;
        let side = (rng.gen_range(0.05..0.3) * b.area()).sqrt();
        let (cx, cy) = b.center();
        let (cx, cy) = if rng.gen_bool(0.3) {
            (cx, cy - b.height() * rng.gen_range(0.7..1.3))
        } else {
            (
                cx + rng.gen_range(-0.2..0.2) * b.width(),
                cy + rng.gen_range(-0.2..0.2) * b.height(),
            )
        };
        squares.push((cx, cy, side));
    }
    if rng.gen_bool(prob * 0.6) {
        squares.push((rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64), rng.gen_range(5.0..14.0)));
    }
    for (cx, cy, side) in squares {
        let x0 = (cx - side / 2.0).round().max(0.0) as usize;
        let y0 = (cy - side / 2.0).round().max(0.0) as usize;
        let x1 = ((cx + side / 2.0).round().max(0.0) as usize).min(w);
        let y1 = ((cy + side / 2.0).round().max(0.0) as usize).min(h);
        let flat = rng.gen_bool(0.3);
        let color: [f32; 3] = [rng.gen(), rng.gen(), rng.gen()];
        for y in y0..y1 {
            for x in x0..x1 {
                for (c, col) in color.iter().enumerate() {
                    let i = image.index(c, y, x);
                    image.pixels_mut()[i] = if flat { *col } else { rng.gen() };
                }
            }
        }
    }
}

/// Clean-image AP of `det` on `images` for `class`.
pub fn clean_ap(det: &dyn DetectorAdapter, images: &[SceneImage], class: &str, cfg: &ToyTrainConfig) -> Result<f64> {
    let mut acc = ApAccumulator::default();
    for img in images {
        let dets = super::detect(det, img, cfg.conf_threshold, cfg.nms_iou)?;
        acc.add_image(&dets, &img.boxes_of(class), class, cfg.match_iou);
    }
    Ok(acc.finish(ApInterpolation::AllPoint).map(|r| r.ap).unwrap_or(0.0))
}

/// Trains a toy detector on `train` and checks its clean AP on `held_out`.
pub fn train_toy_detector(
    train: &[SceneImage],
    held_out: &[SceneImage],
    classes: Vec<String>,
    cfg: &ToyTrainConfig,
) -> Result<TrainedDetector> {
    if train.is_empty() || held_out.is_empty() {
        return Err(Error::InvalidArgument("toy detector training needs train and held-out images".into()));
    }
    if train.iter().all(|i| i.annotations.is_empty()) {
        return Err(Error::InvalidArgument("training images carry no annotations".into()));
    }
    let size = train[0].width();
    if train.iter().chain(held_out).any(|i| i.width() != size || i.height() != size) {
        return Err(Error::InvalidArgument("toy detector needs square images of one size".into()));
    }
    let arch = ArchDescriptor::standard(size, classes.clone());
    let mut det = ToyDetector::new(TOY_DETECTOR_KIND, arch, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut opts: Vec<(Adam, Adam)> = det
        .layers
        .iter()
        .map(|l| (Adam::new(l.weight.len(), cfg.learning_rate), Adam::new(l.bias.len(), cfg.learning_rate)))
        .collect();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = (steps_per_epoch * cfg.epochs).max(1);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads: Vec<Vec<f32>> = det.layers.iter().map(|l| vec![0.0; l.spec.param_len()]).collect();
            for &i in batch {
                let mut img = train[i].clone();
                occlude(&mut img, cfg.occlusion_prob, &mut rng);
                let annotations: Vec<(BoundingBox, usize)> = img
                    .annotations
                    .iter()
                    .filter_map(|a| classes.iter().position(|c| *c == a.class).map(|k| (a.bbox, k)))
                    .collect();
                let traces = det.run(img.pixels());
                let (loss, mut head_grad) = head_loss_grad(&det, &traces.last().unwrap().output, &annotations);
                epoch_loss += loss;
                let scale = 1.0 / batch.len() as f32;
                head_grad.iter_mut().for_each(|g| *g *= scale);
                det.backprop(&traces, head_grad, Some(&mut grads), false);
            }
            if !epoch_loss.is_finite() {
                return Err(Error::Numeric(format!("toy detector loss diverged in epoch {epoch}")));
            }
            // Cosine decay to 5% of the base rate.
            let progress = step as f64 / total_steps as f64;
            let lr = cfg.learning_rate * (0.05 + 0.95 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
            for ((layer, grad), (ow, ob)) in det.layers.iter_mut().zip(&grads).zip(opts.iter_mut()) {
                ow.lr = lr;
                ob.lr = lr;
                let (gw, gb) = grad.split_at(layer.weight.len());
                let gw: Vec<f64> = gw.iter().map(|&v| v as f64).collect();
                let gb: Vec<f64> = gb.iter().map(|&v| v as f64).collect();
                ow.update(&mut layer.weight, &gw);
                ob.update(&mut layer.bias, &gb);
            }
            step += 1;
        }
        log::info!(
            "toy detector epoch {}/{}: mean loss {:.4}",
            epoch + 1,
            cfg.epochs,
            epoch_loss / train.len() as f64
        );
    }
    let ap = clean_ap(&det, held_out, &classes[0], cfg)?;
    log::info!("toy detector held-out AP {ap:.4}");
    if ap < cfg.required_ap {
        return Err(Error::DetectorUnderfit {
            ap,
            required: cfg.required_ap,
        });
    }
    Ok(TrainedDetector { detector: det, clean_ap: ap })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::synth::{generate_synthetic_dataset, SyntheticSceneSpec};

    fn small() -> ToyDetector {
        let arch = ArchDescriptor::standard(48, vec!["aircraft".into(), "distractor".into()]);
        ToyDetector::new("toy", arch, 3).unwrap()
    }

    #[test]
    fn standard_arch_is_consistent_and_small() {
        let d = small();
        assert!(d.parameter_count() < 100_000);
        assert_eq!(d.arch().grid(), (6, 6));
    }

    #[test]
    fn forward_is_deterministic() {
        let d = small();
        let img = SceneImage::filled(48, 48, 0.4);
        let a = d.forward(&img, false).unwrap().candidates;
        let b = d.forward(&img, false).unwrap().candidates;
        assert_eq!(a, b);
        assert_eq!(a.len(), 6 * 6 * 2);
        assert!(a.iter().all(|c| (0.0..=1.0).contains(&c.objectness)));
    }

    #[test]
    fn wrong_input_size_rejected() {
        let d = small();
        assert!(d.forward(&SceneImage::filled(40, 48, 0.4), false).is_err());
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let d = small();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let px: Vec<f32> = (0..3 * 48 * 48).map(|_| rng.gen_range(0.2..0.8)).collect();
        let img = SceneImage::new("g", 48, 48, px, vec![]).unwrap();
        let out = d.forward(&img, true).unwrap();
        let seeds = [(20usize, 1.0), (41, 0.5)];
        let grad = d.objectness_input_gradient(&out, &seeds).unwrap();
        let objective = |im: &SceneImage| -> f64 {
            let c = d.forward(im, false).unwrap().candidates;
            seeds.iter().map(|&(i, w)| w * c[i].objectness).sum()
        };
        // Probe the pixels with the largest analytic gradient.
        let mut idx: Vec<usize> = (0..grad.len()).collect();
        idx.sort_by(|&a, &b| grad[b].abs().total_cmp(&grad[a].abs()));
        for &k in &idx[..5] {
            let h = 1e-2f32;
            let mut plus = img.clone();
            plus.pixels_mut()[k] += h;
            let mut minus = img.clone();
            minus.pixels_mut()[k] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h as f64);
            let an = grad[k] as f64;
            assert!((fd - an).abs() <= 0.05 * an.abs() + 1e-6, "{k}: {fd} vs {an}");
        }
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let d = small();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.bin");
        d.save(&path).unwrap();
        let back = ToyDetector::load(&path).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.parameter_checksum(), d.parameter_checksum());
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[100] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(ToyDetector::load(&path).is_err());
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let held = generate_synthetic_dataset(&SyntheticSceneSpec::default(), 1, 0).unwrap();
        assert!(train_toy_detector(&[], &held, vec!["aircraft".into()], &ToyTrainConfig::default()).is_err());
    }
}
