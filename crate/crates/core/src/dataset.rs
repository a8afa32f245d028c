//! Corpus layout, sample loading, a synthetic RGB-T scene generator and
//! prediction colorization.
//!
//! ```text
//! root/manifest.txt
//! root/images/<id>.png     RGB (paired) or RGB+thermal in 4 channels (rgbt)
//! root/thermal/<id>.png    8-bit thermal (paired layout only)
//! root/labels/<id>.png     8-bit class indices
//! ```

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{DynamicImage, GrayImage, RgbImage, RgbaImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::aux_targets::{Grid, LabelMap};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Layout {
    #[default]
    Paired,
    Rgbt,
}

impl FromStr for Layout {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paired" => Ok(Layout::Paired),
            "rgbt" => Ok(Layout::Rgbt),
            _ => Err(Error::Manifest(format!("unknown layout `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Manifest(format!("unknown split `{s}`"))),
        }
    }
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassInfo {
    pub name: String,
    pub color: [u8; 3],
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub num_classes: usize,
    pub layout: Layout,
    pub classes: Vec<ClassInfo>,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetManifest {
    pub fn new(num_classes: usize, layout: Layout) -> Self {
        DatasetManifest {
            num_classes,
            layout,
            classes: default_classes(num_classes),
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        }
    }

    pub fn split(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn split_mut(&mut self, split: Split) -> &mut Vec<String> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }

    pub fn palette(&self) -> Vec<[u8; 3]> {
        self.classes.iter().map(|c| c.color).collect()
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut num_classes = None;
        let mut layout = Layout::Paired;
        let mut classes: Vec<Option<ClassInfo>> = Vec::new();
        let mut entries = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::Manifest(format!("line {}: cannot parse `{raw}`", n + 1));
            match fields[0] {
                "num_classes" if fields.len() == 2 => num_classes = Some(fields[1].parse().map_err(|_| bad())?),
                "layout" if fields.len() == 2 => layout = fields[1].parse()?,
                "class" if fields.len() == 6 => {
                    let idx: usize = fields[1].parse().map_err(|_| bad())?;
                    let mut color = [0u8; 3];
                    for (c, f) in color.iter_mut().zip(&fields[3..]) {
                        *c = f.parse().map_err(|_| bad())?;
                    }
                    if classes.len() <= idx {
                        classes.resize(idx + 1, None);
                    }
                    classes[idx] = Some(ClassInfo {
                        name: fields[2].to_string(),
                        color,
                    });
                }
                split if fields.len() == 2 => entries.push((split.parse::<Split>()?, fields[1].to_string())),
                _ => return Err(bad()),
            }
        }
        let num_classes = num_classes.ok_or_else(|| Error::Manifest("missing `num_classes`".into()))?;
        let mut m = DatasetManifest::new(num_classes, layout);
        if classes.len() > num_classes {
            return Err(Error::Manifest(format!(
                "class index {} exceeds num_classes {num_classes}",
                classes.len() - 1
            )));
        }
        for (i, c) in classes.into_iter().enumerate() {
            if let Some(c) = c {
                m.classes[i] = c;
            }
        }
        let mut seen = BTreeSet::new();
        for (split, id) in entries {
            if !seen.insert(id.clone()) {
                return Err(Error::Manifest(format!("sample `{id}` listed more than once")));
            }
            m.split_mut(split).push(id);
        }
        Ok(m)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "num_classes {}", self.num_classes);
        let _ = writeln!(
            s,
            "layout {}",
            match self.layout {
                Layout::Paired => "paired",
                Layout::Rgbt => "rgbt",
            }
        );
        for (i, c) in self.classes.iter().enumerate() {
            let _ = writeln!(s, "class {i} {} {} {} {}", c.name, c.color[0], c.color[1], c.color[2]);
        }
        for split in [Split::Train, Split::Val, Split::Test] {
            for id in self.split(split) {
                let _ = writeln!(s, "{} {id}", split.as_str());
            }
        }
        s
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join("manifest.txt");
        let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.clone()),
            _ => Error::Io(e),
        })?;
        Self::parse(&text)
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        fs::create_dir_all(root)?;
        fs::write(root.join("manifest.txt"), self.to_text())?;
        Ok(())
    }
}

fn default_classes(n: usize) -> Vec<ClassInfo> {
    const BASE: [[u8; 3]; 9] = [
        [0, 0, 0],
        [64, 0, 128],
        [64, 64, 0],
        [0, 128, 192],
        [0, 0, 192],
        [128, 128, 0],
        [64, 64, 128],
        [192, 128, 128],
        [192, 64, 0],
    ];
    (0..n)
        .map(|i| ClassInfo {
            name: if i == 0 { "unlabeled".into() } else { format!("class{i}") },
            color: BASE.get(i).copied().unwrap_or([(37 * i) as u8, (91 * i) as u8, (173 * i) as u8]),
        })
        .collect()
}

/// One aligned RGB / thermal / label triple, intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub id: String,
    pub rgb: Tensor<f32>,
    pub thermal: Tensor<f32>,
    pub labels: LabelMap,
}

impl SegSample {
    pub fn height(&self) -> usize {
        self.labels.height
    }

    pub fn width(&self) -> usize {
        self.labels.width
    }

    /// Mirror along the horizontal axis.
    pub fn flipped(&self) -> SegSample {
        let (h, w) = (self.height(), self.width());
        let flip = |t: &Tensor<f32>| {
            let c = t.shape()[0];
            Tensor::from_fn([c, h, w], |i| {
                let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
                t.data()[(ch * h + y) * w + (w - 1 - x)]
            })
        };
        let labels = Grid {
            height: h,
            width: w,
            data: (0..h * w).map(|i| self.labels.data[(i / w) * w + (w - 1 - i % w)]).collect(),
        };
        SegSample {
            id: self.id.clone(),
            rgb: flip(&self.rgb),
            thermal: flip(&self.thermal),
            labels,
        }
    }
}

fn to_unit(v: u8) -> f32 {
    v as f32 / 255.0
}

fn to_u8(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

fn open_image(path: &Path) -> Result<DynamicImage> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Ok(image::open(path)?)
}

fn sample_path(root: &Path, dir: &str, id: &str) -> PathBuf {
    root.join(dir).join(format!("{id}.png"))
}

fn load_labels(path: &Path, id: &str, num_classes: usize) -> Result<LabelMap> {
    let img = open_image(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<u32> = match &img {
        DynamicImage::ImageLuma8(g) => g.as_raw().iter().map(|&v| v as u32).collect(),
        DynamicImage::ImageLuma16(g) => g.as_raw().iter().map(|&v| v as u32).collect(),
        other => {
            return Err(Error::SizeMismatch {
                id: id.to_string(),
                detail: format!("label image must be single-channel, got {:?}", other.color()),
            })
        }
    };
    if let Some(i) = data.iter().position(|&v| v as usize >= num_classes) {
        return Err(Error::LabelOutOfRange {
            id: id.to_string(),
            row: i / w,
            col: i % w,
            value: data[i],
            max: num_classes as u32 - 1,
        });
    }
    Grid::new(h, w, data)
}

pub fn load_sample(root: &Path, manifest: &DatasetManifest, id: &str) -> Result<SegSample> {
    let labels = load_labels(&sample_path(root, "labels", id), id, manifest.num_classes)?;
    let (h, w) = (labels.height, labels.width);
    let mismatch = |what: &str, iw: u32, ih: u32| Error::SizeMismatch {
        id: id.to_string(),
        detail: format!("{what} is {ih}×{iw}, labels are {h}×{w}"),
    };
    let (rgb, thermal) = match manifest.layout {
        Layout::Paired => {
            let rgb = open_image(&sample_path(root, "images", id))?.to_rgb8();
            let th = open_image(&sample_path(root, "thermal", id))?.to_luma8();
            if rgb.dimensions() != (w as u32, h as u32) {
                return Err(mismatch("rgb image", rgb.width(), rgb.height()));
            }
            if th.dimensions() != (w as u32, h as u32) {
                return Err(mismatch("thermal image", th.width(), th.height()));
            }
            (planar(rgb.as_raw(), 3, 3, h, w), planar(th.as_raw(), 1, 1, h, w))
        }
        Layout::Rgbt => {
            let img = open_image(&sample_path(root, "images", id))?.to_rgba8();
            if img.dimensions() != (w as u32, h as u32) {
                return Err(mismatch("rgbt image", img.width(), img.height()));
            }
            let raw = img.as_raw();
            let rgb = planar(raw, 4, 3, h, w);
            let th: Vec<u8> = raw.chunks_exact(4).map(|p| p[3]).collect();
            (rgb, planar(&th, 1, 1, h, w))
        }
    };
    Ok(SegSample {
        id: id.to_string(),
        rgb,
        thermal,
        labels,
    })
}

/// Interleaved `stride`-channel bytes → first `c` planes, scaled to `[0, 1]`.
fn planar(raw: &[u8], stride: usize, c: usize, h: usize, w: usize) -> Tensor<f32> {
    Tensor::from_fn([c, h, w], |i| {
        let (ch, p) = (i / (h * w), i % (h * w));
        to_unit(raw[p * stride + ch])
    })
}

pub fn load_split(root: &Path, manifest: &DatasetManifest, split: Split) -> Result<Vec<SegSample>> {
    manifest.split(split).iter().map(|id| load_sample(root, manifest, id)).collect()
}

/// Writes a sample in the paired layout.
pub fn save_sample(root: &Path, sample: &SegSample) -> Result<()> {
    let (h, w) = (sample.height(), sample.width());
    for dir in ["images", "thermal", "labels"] {
        fs::create_dir_all(root.join(dir))?;
    }
    let hw = h * w;
    let rgb: Vec<u8> = (0..hw)
        .flat_map(|p| (0..3).map(move |c| (c, p)))
        .map(|(c, p)| to_u8(sample.rgb.data()[c * hw + p]))
        .collect();
    RgbImage::from_raw(w as u32, h as u32, rgb)
        .expect("buffer size")
        .save(sample_path(root, "images", &sample.id))?;
    let th: Vec<u8> = sample.thermal.data().iter().map(|&v| to_u8(v)).collect();
    GrayImage::from_raw(w as u32, h as u32, th)
        .expect("buffer size")
        .save(sample_path(root, "thermal", &sample.id))?;
    save_label_png(&sample.labels, &sample_path(root, "labels", &sample.id))
}

/// Writes a sample as one 4-channel image (thermal in the fourth channel).
pub fn save_sample_rgbt(root: &Path, sample: &SegSample) -> Result<()> {
    let (h, w) = (sample.height(), sample.width());
    fs::create_dir_all(root.join("images"))?;
    fs::create_dir_all(root.join("labels"))?;
    let hw = h * w;
    let raw: Vec<u8> = (0..hw)
        .flat_map(|p| {
            let rgb = &sample.rgb;
            let th = &sample.thermal;
            [
                to_u8(rgb.data()[p]),
                to_u8(rgb.data()[hw + p]),
                to_u8(rgb.data()[2 * hw + p]),
                to_u8(th.data()[p]),
            ]
        })
        .collect();
    RgbaImage::from_raw(w as u32, h as u32, raw)
        .expect("buffer size")
        .save(sample_path(root, "images", &sample.id))?;
    save_label_png(&sample.labels, &sample_path(root, "labels", &sample.id))
}

pub fn save_label_png(labels: &LabelMap, path: &Path) -> Result<()> {
    let data = labels
        .data
        .iter()
        .map(|&v| u8::try_from(v).map_err(|_| Error::InvalidArgument(format!("label {v} does not fit in 8 bits"))))
        .collect::<Result<Vec<_>>>()?;
    GrayImage::from_raw(labels.width as u32, labels.height as u32, data)
        .expect("buffer size")
        .save(path)?;
    Ok(())
}

pub fn save_gray_png(map: &Grid<u8>, path: &Path) -> Result<()> {
    GrayImage::from_raw(map.width as u32, map.height as u32, map.data.clone())
        .expect("buffer size")
        .save(path)?;
    Ok(())
}

/// Palette lookup per pixel.
pub fn colorize(pred: &LabelMap, palette: &[[u8; 3]]) -> Result<RgbImage> {
    let mut raw = Vec::with_capacity(pred.data.len() * 3);
    for &c in &pred.data {
        let color = palette.get(c as usize).ok_or(Error::MissingPalette(c))?;
        raw.extend_from_slice(color);
    }
    Ok(RgbImage::from_raw(pred.width as u32, pred.height as u32, raw).expect("buffer size"))
}

/// Knobs of the synthetic scene generator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthOptions {
    /// Multiplier on scene RGB radiance before sensor noise.
    pub light: f64,
    /// Standard deviation of additive RGB sensor noise.
    pub rgb_noise: f64,
    pub thermal_noise: f64,
    pub min_objects: usize,
    pub max_objects: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            light: 1.0,
            rgb_noise: 0.02,
            thermal_noise: 0.03,
            min_objects: 2,
            max_objects: 4,
        }
    }
}

impl SynthOptions {
    /// Night-time variant: RGB at 5% intensity.
    pub fn dark() -> Self {
        SynthOptions {
            light: 0.05,
            ..Self::default()
        }
    }
}

/// Thermal level of class `c`: background cool, classes spread over `[0.45, 0.9]`.
pub fn class_temperature(c: usize, num_classes: usize) -> f64 {
    if c == 0 {
        0.15
    } else if num_classes <= 2 {
        0.7
    } else {
        0.45 + 0.45 * (c - 1) as f64 / (num_classes - 2) as f64
    }
}

fn class_color(c: usize) -> [f64; 3] {
    const COLORS: [[f64; 3]; 8] = [
        [0.85, 0.25, 0.2],
        [0.2, 0.45, 0.85],
        [0.25, 0.8, 0.3],
        [0.9, 0.8, 0.2],
        [0.7, 0.3, 0.8],
        [0.2, 0.8, 0.8],
        [0.95, 0.55, 0.1],
        [0.6, 0.6, 0.6],
    ];
    COLORS[(c - 1) % COLORS.len()]
}

/// Deterministic scene of rectangles and ellipses on a textured background.
/// Each foreground class has a jittered base color and a distinct
/// temperature, so either modality alone separates the classes in daylight.
pub fn synth_scene(seed: u64, id: &str, h: usize, w: usize, num_classes: usize, opts: &SynthOptions) -> SegSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = vec![0u32; h * w];
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.3..0.6));
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let freq: f64 = rng.random_range(0.2..0.6);
    let mut rgb = vec![0f64; 3 * h * w];
    let mut thermal = vec![0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let tex = 0.08 * ((x as f64 * freq + phase).sin() * (y as f64 * freq * 0.7).cos());
            for c in 0..3 {
                rgb[c * h * w + y * w + x] = tint[c] + tex;
            }
            thermal[y * w + x] = class_temperature(0, num_classes) + 0.04 * (y as f64 / h as f64);
        }
    }
    let n_obj = rng.random_range(opts.min_objects..=opts.max_objects.max(opts.min_objects));
    let fg_classes = num_classes.saturating_sub(1).max(1);
    let scale = h.min(w) as f64;
    for o in 0..n_obj {
        // Cycle classes so every scene shows most of them.
        let class = 1 + (o + rng.random_range(0..fg_classes)) % fg_classes;
        let color: [f64; 3] = class_color(class).map(|v| (v + rng.random_range(-0.08..0.08)).clamp(0.0, 1.0));
        let temp = class_temperature(class, num_classes) + rng.random_range(-0.03..0.03);
        let cy = rng.random_range(0.15..0.85) * h as f64;
        let cx = rng.random_range(0.15..0.85) * w as f64;
        let ry = rng.random_range(0.12..0.28) * scale;
        let rx = rng.random_range(0.12..0.28) * scale;
        let ellipse = rng.random_bool(0.5);
        for y in 0..h {
            for x in 0..w {
                let dy = (y as f64 + 0.5 - cy) / ry;
                let dx = (x as f64 + 0.5 - cx) / rx;
                let inside = if ellipse {
                    dy * dy + dx * dx <= 1.0
                } else {
                    dy.abs() <= 1.0 && dx.abs() <= 1.0
                };
                if inside {
                    let p = y * w + x;
                    labels[p] = class as u32;
                    for c in 0..3 {
                        rgb[c * h * w + p] = color[c];
                    }
                    thermal[p] = temp;
                }
            }
        }
    }
    let rgb_noise = Normal::new(0.0, opts.rgb_noise.max(0.0)).expect("finite sigma");
    let th_noise = Normal::new(0.0, opts.thermal_noise.max(0.0)).expect("finite sigma");
    let rgb_u8: Vec<u8> = rgb
        .iter()
        .map(|&v| to_u8((v * opts.light + rgb_noise.sample(&mut rng)) as f32))
        .collect();
    let th_u8: Vec<u8> = thermal
        .iter()
        .map(|&v| to_u8((v + th_noise.sample(&mut rng)) as f32))
        .collect();
    SegSample {
        id: id.to_string(),
        rgb: Tensor::new([3, h, w], rgb_u8.into_iter().map(to_unit).collect()).expect("shape"),
        thermal: Tensor::new([1, h, w], th_u8.into_iter().map(to_unit).collect()).expect("shape"),
        labels: Grid {
            height: h,
            width: w,
            data: labels,
        },
    }
}

/// Writes `n_train + n_val` synthetic samples and a manifest under `root`.
pub fn write_synth_corpus(
    root: &Path,
    seed: u64,
    n_train: usize,
    n_val: usize,
    size: (usize, usize),
    num_classes: usize,
    opts: &SynthOptions,
) -> Result<DatasetManifest> {
    let mut manifest = DatasetManifest::new(num_classes, Layout::Paired);
    for i in 0..n_train + n_val {
        let id = format!("s{i:04}");
        let sample = synth_scene(
            seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64),
            &id,
            size.0,
            size.1,
            num_classes,
            opts,
        );
        save_sample(root, &sample)?;
        if i < n_train {
            manifest.train.push(id);
        } else {
            manifest.val.push(id);
        }
    }
    manifest.save(root)?;
    Ok(manifest)
}
