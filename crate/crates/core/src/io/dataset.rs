//! Annotated image sets on disk: an internal JSON manifest, VOC XML, YOLO
//! text and DOTA polygon labels. Images are letterboxed to the detector
//! input and boxes mapped into the same frame.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{imageops, Rgb32FImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Annotation, BoundingBox, Letterbox, SceneImage, CHANNELS};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    /// `manifest.json` next to the image files.
    #[default]
    InternalJson,
    /// `images/` plus `annotations/<stem>.xml`.
    VocXml,
    /// `images/` plus `labels/<stem>.txt` with normalized center boxes.
    YoloTxt,
    /// `images/` plus `labelTxt/<stem>.txt` with four-corner polygons.
    Dota,
}

impl std::str::FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "internal_json" => Ok(Self::InternalJson),
            "voc_xml" => Ok(Self::VocXml),
            "yolo_txt" => Ok(Self::YoloTxt),
            "dota" => Ok(Self::Dota),
            _ => Err(Error::InvalidArgument(format!("unknown dataset format `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Test,
}

/// Where a dataset lives and how to read it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub root: PathBuf,
    pub format: DatasetFormat,
    pub classes: Vec<String>,
    pub split: Split,
}

impl DatasetRef {
    pub fn load(&self, target: (usize, usize)) -> Result<Vec<SceneImage>> {
        if !self.root.is_dir() {
            return Err(Error::data(&self.root, format!("{:?} split root is not a directory", self.split)));
        }
        load_dataset(&self.root, self.format, &self.classes, target)
    }
}

/// Normalized `(cx, cy, w, h)` to pixel corners.
pub fn yolo_to_corners([cx, cy, bw, bh]: [f64; 4], width: f64, height: f64) -> [f64; 4] {
    let (cx, cy, bw, bh) = (cx * width, cy * height, bw * width, bh * height);
    [cx - bw / 2.0, cy - bh / 2.0, cx + bw / 2.0, cy + bh / 2.0]
}

pub fn corners_to_yolo([x1, y1, x2, y2]: [f64; 4], width: f64, height: f64) -> [f64; 4] {
    [
        (x1 + x2) / 2.0 / width,
        (y1 + y2) / 2.0 / height,
        (x2 - x1) / width,
        (y2 - y1) / height,
    ]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    schema_version: u32,
    images: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    file: String,
    annotations: Vec<ManifestBox>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestBox {
    class: String,
    bbox: [f64; 4],
}

/// Loads a dataset and letterboxes every image to `target` (height,
/// width). Images are returned in lexicographic file order. When
/// `classes` is nonempty, other classes are dropped; for YOLO labels it
/// also gives the index order.
pub fn load_dataset(root: &Path, format: DatasetFormat, classes: &[String], target: (usize, usize)) -> Result<Vec<SceneImage>> {
    let raw = match format {
        DatasetFormat::InternalJson => read_manifest(root)?,
        DatasetFormat::VocXml => read_paired(root, "annotations", "xml", |p, _, _| read_voc(p))?,
        DatasetFormat::YoloTxt => read_paired(root, "labels", "txt", |p, w, h| read_yolo(p, classes, w, h))?,
        DatasetFormat::Dota => read_paired(root, "labelTxt", "txt", |p, _, _| read_dota(p))?,
    };
    let mut out = Vec::with_capacity(raw.len());
    for (path, img, anns) in raw {
        let anns = anns
            .into_iter()
            .filter(|(c, _)| classes.is_empty() || classes.contains(c))
            .collect();
        out.push(letterbox(&path, &img, anns, target)?);
    }
    if out.is_empty() {
        return Err(Error::data(root, "dataset contains no images"));
    }
    Ok(out)
}

type RawBox = (String, [f64; 4]);
type RawImage = (PathBuf, RgbImage, Vec<RawBox>);

fn read_image(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::data(path, format!("cannot decode image: {e}")))?;
    Ok(img.to_rgb8())
}

fn read_manifest(root: &Path) -> Result<Vec<RawImage>> {
    let path = root.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::data(&path, e.to_string()))?;
    if m.schema_version != MANIFEST_VERSION {
        return Err(Error::Version {
            found: m.schema_version,
            expected: MANIFEST_VERSION,
        });
    }
    let mut entries = m.images;
    entries.sort_by(|a, b| a.file.cmp(&b.file));
    entries
        .into_iter()
        .map(|e| {
            let p = root.join(&e.file);
            let img = read_image(&p)?;
            let anns = e.annotations.into_iter().map(|a| (a.class, a.bbox)).collect();
            Ok((p, img, anns))
        })
        .collect()
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_file() && is_image(&p) {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

fn read_paired(
    root: &Path,
    label_dir: &str,
    ext: &str,
    parse: impl Fn(&Path, u32, u32) -> Result<Vec<RawBox>>,
) -> Result<Vec<RawImage>> {
    let mut out = Vec::new();
    for p in list_images(&root.join("images"))? {
        let img = read_image(&p)?;
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let label = root.join(label_dir).join(format!("{stem}.{ext}"));
        let anns = if label.exists() {
            parse(&label, img.width(), img.height())?
        } else {
            log::warn!("{} has no label file; treating it as empty", p.display());
            Vec::new()
        };
        out.push((p, img, anns));
    }
    Ok(out)
}

fn read_voc(path: &Path) -> Result<Vec<RawBox>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc = roxmltree::Document::parse(&text).map_err(|e| Error::data(path, e.to_string()))?;
    let child_text = |n: roxmltree::Node, tag: &str| {
        n.children()
            .find(|c| c.has_tag_name(tag))
            .and_then(|c| c.text())
            .map(str::trim)
            .map(str::to_string)
    };
    let mut out = Vec::new();
    for obj in doc.descendants().filter(|n| n.has_tag_name("object")) {
        let name = child_text(obj, "name").ok_or_else(|| Error::data(path, "object without <name>"))?;
        let bb = obj
            .children()
            .find(|c| c.has_tag_name("bndbox"))
            .ok_or_else(|| Error::data(path, "object without <bndbox>"))?;
        let mut v = [0.0; 4];
        for (slot, tag) in v.iter_mut().zip(["xmin", "ymin", "xmax", "ymax"]) {
            *slot = child_text(bb, tag)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::data(path, format!("missing or bad <{tag}>")))?;
        }
        out.push((name, v));
    }
    Ok(out)
}

fn read_yolo(path: &Path, classes: &[String], w: u32, h: u32) -> Result<Vec<RawBox>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.is_empty() {
            continue;
        }
        let bad = || Error::data(path, format!("line {}: expected `class cx cy w h`", ln + 1));
        if f.len() != 5 {
            return Err(bad());
        }
        let idx: usize = f[0].parse().map_err(|_| bad())?;
        let nums: Vec<f64> = f[1..].iter().map(|s| s.parse()).collect::<std::result::Result<_, _>>().map_err(|_| bad())?;
        let class = classes
            .get(idx)
            .cloned()
            .ok_or_else(|| Error::data(path, format!("line {}: class index {idx} has no name", ln + 1)))?;
        out.push((class, yolo_to_corners([nums[0], nums[1], nums[2], nums[3]], w as f64, h as f64)));
    }
    Ok(out)
}

/// Oriented polygons become their axis-aligned bounding hull.
fn read_dota(path: &Path) -> Result<Vec<RawBox>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() < 9 {
            // Header lines such as `imagesource:` and `gsd:`.
            continue;
        }
        let coords: Vec<f64> = f[..8]
            .iter()
            .map(|s| s.parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::data(path, format!("line {}: bad polygon coordinate", ln + 1)))?;
        let xs = coords.iter().step_by(2);
        let ys = coords.iter().skip(1).step_by(2);
        let x1 = xs.clone().copied().fold(f64::INFINITY, f64::min);
        let x2 = xs.copied().fold(f64::NEG_INFINITY, f64::max);
        let y1 = ys.clone().copied().fold(f64::INFINITY, f64::min);
        let y2 = ys.copied().fold(f64::NEG_INFINITY, f64::max);
        out.push((f[8].to_string(), [x1, y1, x2, y2]));
    }
    Ok(out)
}

/// Resizes preserving aspect ratio and pads with mid-gray.
fn letterbox(path: &Path, img: &RgbImage, anns: Vec<RawBox>, (th, tw): (usize, usize)) -> Result<SceneImage> {
    let (sw, sh) = (img.width() as usize, img.height() as usize);
    if sw == 0 || sh == 0 {
        return Err(Error::data(path, "empty image"));
    }
    let scale = (tw as f64 / sw as f64).min(th as f64 / sh as f64);
    let (nw, nh) = (
        ((sw as f64 * scale).round() as usize).clamp(1, tw),
        ((sh as f64 * scale).round() as usize).clamp(1, th),
    );
    let (pad_x, pad_y) = ((tw - nw) / 2, (th - nh) / 2);
    let mut pixels = vec![0.5f32; CHANNELS * th * tw];
    let plane = th * tw;
    if (nw, nh) == (sw, sh) {
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..CHANNELS {
                pixels[c * plane + (y as usize + pad_y) * tw + x as usize + pad_x] = p.0[c] as f32 / 255.0;
            }
        }
    } else {
        let f: Rgb32FImage = image::DynamicImage::ImageRgb8(img.clone()).to_rgb32f();
        let r = imageops::resize(&f, nw as u32, nh as u32, imageops::FilterType::Triangle);
        for (x, y, p) in r.enumerate_pixels() {
            for c in 0..CHANNELS {
                pixels[c * plane + (y as usize + pad_y) * tw + x as usize + pad_x] = p.0[c].clamp(0.0, 1.0);
            }
        }
    }
    let sx = nw as f64 / sw as f64;
    let sy = nh as f64 / sh as f64;
    let mut annotations = Vec::new();
    for (class, [x1, y1, x2, y2]) in anns {
        let map = |v: f64, s: f64, pad: usize, lim: usize| (v * s + pad as f64).clamp(0.0, lim as f64);
        let b = BoundingBox::new(
            map(x1, sx, pad_x, tw),
            map(y1, sy, pad_y, th),
            map(x2, sx, pad_x, tw),
            map(y2, sy, pad_y, th),
        );
        match b {
            Ok(bbox) => annotations.push(Annotation { class, bbox }),
            Err(e) => log::warn!("{}: dropping box of class `{class}`: {e}", path.display()),
        }
    }
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
    let mut scene = SceneImage::new(name, tw, th, pixels, annotations)?;
    scene.letterbox = Some(Letterbox {
        scale,
        pad_x: pad_x as f64,
        pad_y: pad_y as f64,
        source_width: sw,
        source_height: sh,
    });
    Ok(scene)
}

/// Converts to an 8-bit image, rounding each channel to the nearest level.
pub fn scene_to_rgb8(img: &SceneImage) -> RgbImage {
    let (h, w) = (img.height(), img.width());
    let plane = h * w;
    let px = img.pixels();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb(std::array::from_fn(|c| (px[c * plane + i] * 255.0).round().clamp(0.0, 255.0) as u8))
    })
}

/// Writes images as PNG plus a manifest that [`load_dataset`] reads back.
pub fn save_dataset(dir: &Path, images: &[SceneImage]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(images.len());
    let mut seen = BTreeMap::new();
    for img in images {
        let file = format!("{}.png", img.name);
        if seen.insert(file.clone(), ()).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate image name `{}`", img.name)));
        }
        let path = dir.join(&file);
        scene_to_rgb8(img)
            .save(&path)
            .map_err(|e| Error::data(&path, e.to_string()))?;
        entries.push(ManifestEntry {
            file,
            annotations: img
                .annotations
                .iter()
                .map(|a| ManifestBox {
                    class: a.class.clone(),
                    bbox: [a.bbox.x1, a.bbox.y1, a.bbox.x2, a.bbox.y2],
                })
                .collect(),
        });
    }
    let manifest = Manifest {
        schema_version: MANIFEST_VERSION,
        images: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::synth::{generate_synthetic_dataset, SyntheticSceneSpec};

    fn classes() -> Vec<String> {
        vec!["aircraft".into(), "distractor".into()]
    }

    #[test]
    fn manifest_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = generate_synthetic_dataset(&SyntheticSceneSpec::default(), 4, 3).unwrap();
        save_dataset(dir.path(), &imgs).unwrap();
        let back = load_dataset(dir.path(), DatasetFormat::InternalJson, &[], (96, 96)).unwrap();
        assert_eq!(back.len(), 4);
        for (a, b) in imgs.iter().zip(&back) {
            assert_eq!(a.pixels(), b.pixels());
            assert_eq!(a.annotations, b.annotations);
        }
    }

    fn write_png(path: &Path, w: u32, h: u32) {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        RgbImage::from_pixel(w, h, image::Rgb([10, 20, 30])).save(path).unwrap();
    }

    #[test]
    fn voc_boxes_are_letterboxed() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("images/a.png"), 192, 96);
        std::fs::create_dir_all(dir.path().join("annotations")).unwrap();
        std::fs::write(
            dir.path().join("annotations/a.xml"),
            "<annotation><object><name>aircraft</name><bndbox><xmin>0</xmin><ymin>0</ymin>\
             <xmax>96</xmax><ymax>96</ymax></bndbox></object></annotation>",
        )
        .unwrap();
        let imgs = load_dataset(dir.path(), DatasetFormat::VocXml, &classes(), (96, 96)).unwrap();
        let lb = imgs[0].letterbox.unwrap();
        assert_eq!(lb.scale, 0.5);
        assert_eq!(lb.pad_y, 24.0);
        let b = imgs[0].annotations[0].bbox;
        assert_eq!((b.x1, b.y1, b.x2, b.y2), (0.0, 24.0, 48.0, 72.0));
    }

    #[test]
    fn yolo_indices_map_to_class_names() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("images/b.png"), 96, 96);
        std::fs::create_dir_all(dir.path().join("labels")).unwrap();
        std::fs::write(dir.path().join("labels/b.txt"), "1 0.5 0.5 0.25 0.25\n").unwrap();
        let imgs = load_dataset(dir.path(), DatasetFormat::YoloTxt, &classes(), (96, 96)).unwrap();
        let a = &imgs[0].annotations[0];
        assert_eq!(a.class, "distractor");
        assert_eq!((a.bbox.x1, a.bbox.x2), (36.0, 60.0));
    }

    #[test]
    fn dota_polygon_becomes_hull() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("images/c.png"), 96, 96);
        std::fs::create_dir_all(dir.path().join("labelTxt")).unwrap();
        std::fs::write(
            dir.path().join("labelTxt/c.txt"),
            "imagesource:GoogleEarth\ngsd:0.1\n10 20 30 10 40 30 20 40 aircraft 0\n",
        )
        .unwrap();
        let imgs = load_dataset(dir.path(), DatasetFormat::Dota, &classes(), (96, 96)).unwrap();
        let b = imgs[0].annotations[0].bbox;
        assert_eq!((b.x1, b.y1, b.x2, b.y2), (10.0, 10.0, 40.0, 40.0));
    }

    #[test]
    fn files_come_back_sorted() {
        let dir = tempfile::tempdir().unwrap();
        for n in ["z", "a", "m"] {
            write_png(&dir.path().join(format!("images/{n}.png")), 96, 96);
        }
        let imgs = load_dataset(dir.path(), DatasetFormat::YoloTxt, &classes(), (96, 96)).unwrap();
        let names: Vec<_> = imgs.iter().map(|i| i.name.as_str()).collect();
        assert_eq!(names, ["a", "m", "z"]);
    }

    proptest::proptest! {
        #[test]
        fn yolo_round_trip(cx in 0.0..1.0f64, cy in 0.0..1.0f64, w in 0.01..1.0f64, h in 0.01..1.0f64,
                           iw in 16.0..4000.0f64, ih in 16.0..4000.0f64) {
            let back = corners_to_yolo(yolo_to_corners([cx, cy, w, h], iw, ih), iw, ih);
            for (a, b) in back.iter().zip([cx, cy, w, h]) {
                proptest::prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn loads_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = generate_synthetic_dataset(&SyntheticSceneSpec::default(), 3, 9).unwrap();
        save_dataset(dir.path(), &imgs).unwrap();
        let r = DatasetRef {
            root: dir.path().to_path_buf(),
            format: DatasetFormat::InternalJson,
            classes: classes(),
            split: Split::Test,
        };
        let a = r.load((96, 96)).unwrap();
        let b = r.load((96, 96)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn corrupt_image_names_path() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("images")).unwrap();
        std::fs::write(dir.path().join("images/e.png"), b"not a png").unwrap();
        let err = load_dataset(dir.path(), DatasetFormat::YoloTxt, &classes(), (96, 96)).unwrap_err();
        assert!(err.to_string().contains("e.png"), "{err}");
    }

    #[test]
    fn malformed_label_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("images/d.png"), 96, 96);
        std::fs::create_dir_all(dir.path().join("labels")).unwrap();
        std::fs::write(dir.path().join("labels/d.txt"), "0 0.5 oops\n").unwrap();
        let err = load_dataset(dir.path(), DatasetFormat::YoloTxt, &classes(), (96, 96)).unwrap_err();
        assert!(err.to_string().contains("d.txt"), "{err}");
    }
}
