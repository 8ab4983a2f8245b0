//! Synthetic two-domain detection benchmark: colored discs, squares and
//! triangles on value-noise backgrounds. Target images are the same scenes
//! seen through a fog / color / noise shift.
//!
//! On disk a split is a directory with binary PPM images under `images/`, an
//! `annotations.jsonl` file with one `{"file", "boxes", "labels"}` row per
//! image and a `manifest.txt` listing the image files.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::detector::{Bbox, Domain, GroundTruth};
use crate::error::{config_err, Error, Result};
use crate::rng::{item_stream, Stream};
use crate::tensor::Tensor;

pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const IMAGE_DIR: &str = "images";

/// Object classes, in label order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Disc,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Disc, Shape::Square, Shape::Triangle];

    pub fn label(self) -> usize {
        self as usize
    }

    /// Whether pixel centre `(x, y)` lies inside the shape with the given
    /// centre and side length.
    fn covers(self, cx: f64, cy: f64, side: f64, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - cx, y - cy);
        let h = side / 2.0;
        match self {
            Shape::Disc => dx * dx + dy * dy <= h * h,
            Shape::Square => dx.abs() <= h && dy.abs() <= h,
            // apex at the top centre, base along the bottom edge
            Shape::Triangle => dy >= -h && dy <= h && dx.abs() <= (dy + h) / 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub center: (f64, f64),
    /// Side length of the bounding square.
    pub scale: f64,
    pub color: [f64; 3],
}

impl SceneObject {
    pub fn bbox(&self) -> Bbox {
        Bbox::from_center(self.center.0, self.center.1, self.scale, self.scale)
    }
}

/// Parameters of the scene sampler.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneParams {
    pub image_size: (usize, usize),
    pub max_objects: usize,
    pub min_side: f64,
    pub max_side: f64,
    pub max_pair_iou: f64,
    /// Value-noise lattice cells along each axis.
    pub noise_cells: usize,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            image_size: (64, 64),
            max_objects: 3,
            min_side: 14.0,
            max_side: 28.0,
            max_pair_iou: 0.4,
            noise_cells: 6,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if h == 0 || w == 0 || self.max_objects == 0 || self.noise_cells == 0 {
            return Err(config_err!("scene sizes and counts must be positive"));
        }
        if !(8.0 <= self.min_side && self.min_side <= self.max_side && self.max_side <= h.min(w) as f64) {
            return Err(config_err!(
                "object sides must satisfy 8 <= min_side <= max_side <= image side"
            ));
        }
        if !(0.0..=1.0).contains(&self.max_pair_iou) {
            return Err(config_err!("max_pair_iou must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub index: u64,
    pub image_size: (usize, usize),
    pub objects: Vec<SceneObject>,
    pub domain: Domain,
}

const PLACEMENT_ATTEMPTS: usize = 200;

impl SceneSpec {
    /// Samples scene `index` of the split with `seed`. The scene itself does
    /// not depend on `domain`.
    pub fn sample(seed: u64, index: u64, params: &SceneParams, domain: Domain) -> Self {
        let mut rng = item_stream(seed, Stream::Scenes, index);
        let (h, w) = params.image_size;
        let n = rng.random_range(1..=params.max_objects);
        let mut objects: Vec<SceneObject> = Vec::with_capacity(n);
        for _ in 0..n {
            let shape = Shape::ALL[rng.random_range(0..3)];
            // each channel dark or bright, so objects stand off the mid-tone background
            let color = [0; 3].map(|_| match rng.random_bool(0.5) {
                true => rng.random_range(0.75..1.0),
                false => rng.random_range(0.0..0.25),
            });
            for _ in 0..PLACEMENT_ATTEMPTS {
                let scale = rng.random_range(params.min_side..=params.max_side).round();
                let half = scale / 2.0;
                let cx = rng.random_range(half..=w as f64 - half).round();
                let cy = rng.random_range(half..=h as f64 - half).round();
                let cand = SceneObject {
                    shape,
                    center: (cx, cy),
                    scale,
                    color,
                };
                let b = cand.bbox();
                if objects.iter().all(|o| o.bbox().iou(&b) < params.max_pair_iou) {
                    objects.push(cand);
                    break;
                }
            }
        }
        Self {
            seed,
            index,
            image_size: params.image_size,
            objects,
            domain,
        }
    }

    pub fn ground_truth(&self) -> GroundTruth {
        GroundTruth {
            boxes: self.objects.iter().map(SceneObject::bbox).collect(),
            labels: self.objects.iter().map(|o| o.shape.label()).collect(),
        }
    }

    /// Renders the clean scene: value-noise background, then objects in order.
    pub fn render(&self, params: &SceneParams) -> RgbImage {
        let mut rng = item_stream(self.seed, Stream::Scenes, self.index ^ 0x5eed);
        let (h, w) = self.image_size;
        let cells = params.noise_cells;
        let lattice: Vec<[f64; 3]> = (0..(cells + 1) * (cells + 1))
            .map(|_| [0; 3].map(|_| rng.random_range(0.3..0.7)))
            .collect();
        let mut img = RgbImage::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let fx = (x as f64 + 0.5) / w as f64 * cells as f64;
                let fy = (y as f64 + 0.5) / h as f64 * cells as f64;
                let (ix, iy) = ((fx as usize).min(cells - 1), (fy as usize).min(cells - 1));
                let (tx, ty) = (smooth(fx - ix as f64), smooth(fy - iy as f64));
                let at = |i: usize, j: usize| lattice[j * (cells + 1) + i];
                let (a, b, c, d) = (at(ix, iy), at(ix + 1, iy), at(ix, iy + 1), at(ix + 1, iy + 1));
                let mut px = [0.0; 3];
                for k in 0..3 {
                    let top = a[k] + (b[k] - a[k]) * tx;
                    let bot = c[k] + (d[k] - c[k]) * tx;
                    px[k] = top + (bot - top) * ty;
                }
                img.set(x, y, px);
            }
        }
        for o in &self.objects {
            let b = o.bbox();
            let (x0, x1) = (b.x1.floor().max(0.0) as usize, (b.x2.ceil() as usize).min(w));
            let (y0, y1) = (b.y1.floor().max(0.0) as usize, (b.y2.ceil() as usize).min(h));
            for y in y0..y1 {
                for x in x0..x1 {
                    if o.shape.covers(o.center.0, o.center.1, o.scale, x as f64 + 0.5, y as f64 + 0.5) {
                        img.set(x, y, o.color);
                    }
                }
            }
        }
        img
    }
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Global appearance shift applied to target images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainShift {
    /// Blend factor toward the fog colour, in [0, 1].
    pub fog_alpha: f64,
    /// Fog intensity in [0, 1].
    pub fog_gray: f64,
    /// Per-channel multiplier.
    pub color_gain: [f64; 3],
    /// Standard deviation of additive Gaussian noise (intensity units).
    pub noise_sigma: f64,
}

impl DomainShift {
    pub fn identity() -> Self {
        Self {
            fog_alpha: 0.0,
            fog_gray: 0.5,
            color_gain: [1.0; 3],
            noise_sigma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.fog_alpha) || !(0.0..=1.0).contains(&self.fog_gray) {
            return Err(config_err!("fog_alpha and fog_gray must lie in [0, 1]"));
        }
        if self.color_gain.iter().any(|g| !g.is_finite() || *g < 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(config_err!("color_gain and noise_sigma must be non-negative"));
        }
        Ok(())
    }
}

impl Default for DomainShift {
    fn default() -> Self {
        Self {
            fog_alpha: 0.55,
            fog_gray: 0.8,
            color_gain: [1.3, 0.9, 0.6],
            noise_sigma: 0.05,
        }
    }
}

/// 8-bit RGB image, row-major, interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [0, 1, 2].map(|k| self.data[i + k] as f64 / 255.0)
    }

    /// Stores an intensity triple in [0, 1] (clamped, rounded).
    pub fn set(&mut self, x: usize, y: usize, px: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        for k in 0..3 {
            self.data[i + k] = (px[k].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }

    pub fn mean_intensity(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / (255.0 * self.data.len() as f64)
    }

    /// `[1, 3, H, W]` network input with intensities mapped to [-1, 1].
    pub fn to_tensor(&self) -> Tensor {
        let (w, h) = (self.width, self.height);
        let mut out = vec![0.0; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                for k in 0..3 {
                    out[k * h * w + y * w + x] = self.data[(y * w + x) * 3 + k] as f64 / 127.5 - 1.0;
                }
            }
        }
        Tensor::new(vec![1, 3, h, w], out).expect("shape matches")
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    /// Parses a binary PPM with maxval 255.
    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let mut fields = Vec::new();
        let mut i = 0;
        while fields.len() < 4 {
            while i < bytes.len() && bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            if i < bytes.len() && bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
                continue;
            }
            let start = i;
            while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            if start == i {
                return Err(Error::Format("truncated PPM header".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
        }
        if fields[0] != "P6" {
            return Err(Error::Format(format!("expected P6 magic, got {:?}", fields[0])));
        }
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad PPM header field {s:?}")))
        };
        let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval != 255 {
            return Err(Error::Format(format!("unsupported PPM maxval {maxval}")));
        }
        let data = bytes.get(i + 1..).unwrap_or(&[]);
        if data.len() != w * h * 3 {
            return Err(Error::Format(format!(
                "PPM payload has {} bytes, expected {}",
                data.len(),
                w * h * 3
            )));
        }
        Ok(Self {
            width: w,
            height: h,
            data: data.to_vec(),
        })
    }
}

/// `clamp(gain · (1 − α) · img + α · fog + noise)` per pixel and channel.
/// Noise is drawn from `rng` only when `noise_sigma > 0`.
pub fn apply_shift(image: &RgbImage, shift: &DomainShift, rng: &mut ChaCha8Rng) -> RgbImage {
    let noise = (shift.noise_sigma > 0.0).then(|| Normal::new(0.0, shift.noise_sigma).expect("valid sigma"));
    let mut out = image.clone();
    for y in 0..image.height {
        for x in 0..image.width {
            let px = image.get(x, y);
            let mut v = [0.0; 3];
            for k in 0..3 {
                let n = noise.as_ref().map_or(0.0, |d| d.sample(rng));
                v[k] = shift.color_gain[k] * (1.0 - shift.fog_alpha) * px[k] + shift.fog_alpha * shift.fog_gray + n;
            }
            out.set(x, y, v);
        }
    }
    out
}

/// Renders image `index` of a split, shifted when `domain` is the target.
pub fn render_item(
    seed: u64,
    index: u64,
    params: &SceneParams,
    domain: Domain,
    shift: &DomainShift,
) -> (SceneSpec, RgbImage) {
    let scene = SceneSpec::sample(seed, index, params, domain);
    let clean = scene.render(params);
    let img = match domain {
        Domain::Source => clean,
        Domain::Target => apply_shift(&clean, shift, &mut item_stream(seed, Stream::Noise, index)),
    };
    (scene, img)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRow {
    pub file: String,
    pub boxes: Vec<[f64; 4]>,
    pub labels: Vec<usize>,
}

impl AnnotationRow {
    pub fn ground_truth(&self) -> GroundTruth {
        GroundTruth {
            boxes: self.boxes.iter().map(|&b| Bbox::from_array(b)).collect(),
            labels: self.labels.clone(),
        }
    }
}

/// Writes `n` images of one domain under `dir`.
pub fn generate_split(
    dir: &Path,
    seed: u64,
    n: usize,
    domain: Domain,
    params: &SceneParams,
    shift: &DomainShift,
) -> Result<Vec<AnnotationRow>> {
    if n == 0 {
        return Err(config_err!("a split needs at least one image"));
    }
    params.validate()?;
    shift.validate()?;
    fs::create_dir_all(dir.join(IMAGE_DIR))?;
    let prefix = domain_prefix(domain);
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let (scene, img) = render_item(seed, i as u64, params, domain, shift);
        let file = format!("{IMAGE_DIR}/{prefix}_{i:05}.ppm");
        fs::write(dir.join(&file), img.to_ppm())?;
        let gt = scene.ground_truth();
        rows.push(AnnotationRow {
            file,
            boxes: gt.boxes.iter().map(Bbox::to_array).collect(),
            labels: gt.labels,
        });
    }
    let mut ann = BufWriter::new(fs::File::create(dir.join(ANNOTATIONS_FILE))?);
    let mut manifest = BufWriter::new(fs::File::create(dir.join(MANIFEST_FILE))?);
    for r in &rows {
        serde_json::to_writer(&mut ann, r)?;
        ann.write_all(b"\n")?;
        writeln!(manifest, "{}", r.file)?;
    }
    ann.flush()?;
    manifest.flush()?;
    Ok(rows)
}

/// Renders `n` images of one domain in memory, as [`generate_split`] would
/// write them.
pub fn render_split(
    seed: u64,
    n: usize,
    domain: Domain,
    params: &SceneParams,
    shift: &DomainShift,
) -> Result<Vec<Sample>> {
    params.validate()?;
    shift.validate()?;
    Ok((0..n)
        .map(|i| {
            let (scene, img) = render_item(seed, i as u64, params, domain, shift);
            Sample {
                file: PathBuf::from(format!("{IMAGE_DIR}/{}_{i:05}.ppm", domain_prefix(domain))),
                image: img.to_tensor(),
                gt: scene.ground_truth(),
            }
        })
        .collect())
}

fn domain_prefix(domain: Domain) -> &'static str {
    match domain {
        Domain::Source => "source",
        Domain::Target => "target",
    }
}

/// Scene seeds of the three benchmark splits: labeled source training
/// images, unlabeled target training images, and held-out target images for
/// evaluation. Distinct seeds keep the splits' layouts unpaired.
pub fn benchmark_seeds(seed: u64) -> [u64; 3] {
    [
        seed.wrapping_mul(3),
        seed.wrapping_mul(3).wrapping_add(1),
        seed.wrapping_mul(3).wrapping_add(2),
    ]
}

/// In-memory benchmark splits.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub source: Vec<Sample>,
    pub target: Vec<Sample>,
    pub eval: Vec<Sample>,
}

pub fn render_benchmark(
    seed: u64,
    n_train: usize,
    n_eval: usize,
    params: &SceneParams,
    shift: &DomainShift,
) -> Result<Benchmark> {
    let [s, t, e] = benchmark_seeds(seed);
    Ok(Benchmark {
        source: render_split(s, n_train, Domain::Source, params, shift)?,
        target: render_split(t, n_train, Domain::Target, params, shift)?,
        eval: render_split(e, n_eval, Domain::Target, params, shift)?,
    })
}

/// One loaded image with its annotation.
#[derive(Clone, Debug)]
pub struct Sample {
    pub file: PathBuf,
    pub image: Tensor,
    pub gt: GroundTruth,
}

pub fn read_annotations(dir: &Path) -> Result<Vec<AnnotationRow>> {
    let path = dir.join(ANNOTATIONS_FILE);
    let f = fs::File::open(&path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: AnnotationRow = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        rows.push(row);
    }
    Ok(rows)
}

/// Loads every image of a split directory with its annotation.
pub fn load_split(dir: &Path) -> Result<Vec<Sample>> {
    read_annotations(dir)?
        .into_iter()
        .map(|row| {
            let file = dir.join(&row.file);
            let bytes = fs::read(&file).map_err(|e| Error::Format(format!("{}: {e}", file.display())))?;
            Ok(Sample {
                image: RgbImage::from_ppm(&bytes)?.to_tensor(),
                gt: row.ground_truth(),
                file,
            })
        })
        .collect()
}
