//! Procedural paired label-map to photo dataset.
//!
//! Every sample is a pure function of the dataset seed and its `sample_id`.
//! Geometry and pixel noise use integer arithmetic only, so the stored bytes
//! are the same on every platform. Photos are kept as 8-bit RGB and mapped to
//! `[-1, 1]` when batches are built.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

/// Base RGB colour of the first classes. Further classes get a hashed colour.
pub const PALETTE: [[u8; 3]; 6] = [
    [128, 128, 128],
    [200, 70, 60],
    [70, 160, 80],
    [60, 90, 190],
    [200, 110, 40],
    [150, 70, 170],
];
/// Per-sample brightness offset range (noisy and textured).
pub const LIGHTING_JITTER: i32 = 12;
/// Per-pixel, per-channel noise range (noisy and textured).
pub const SPECKLE: i32 = 10;
/// Half peak-to-peak amplitude of the class patterns (textured only).
pub const PATTERN_AMPLITUDE: i32 = 24;

const MAGIC: &[u8; 8] = b"KDGDATA\0";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    Flat,
    #[default]
    Noisy,
    Textured,
}

impl Texture {
    /// Largest spread of photo values within one class region of one sample,
    /// in `[-1, 1]` units. Painting the per-region mean colour therefore has a
    /// mean absolute error no larger than this.
    pub fn amplitude_bound(self) -> f64 {
        let spread = match self {
            Texture::Flat => 0,
            Texture::Noisy => 2 * SPECKLE,
            Texture::Textured => 2 * SPECKLE + 2 * PATTERN_AMPLITUDE,
        };
        spread as f64 / 127.5
    }
}

impl std::str::FromStr for Texture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flat" => Ok(Texture::Flat),
            "noisy" => Ok(Texture::Noisy),
            "textured" => Ok(Texture::Textured),
            other => Err(Error::config("texture", format!("unknown level `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub seed: u64,
    pub n_classes: usize,
    pub image_size: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub texture: Texture,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_classes: 6,
            image_size: 48,
            n_train: 512,
            n_val: 64,
            n_test: 128,
            texture: Texture::Noisy,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.n_classes > 256 {
            return Err(Error::config("dataset.n_classes", "must lie in 1..=256"));
        }
        if self.image_size < 8 {
            return Err(Error::config("dataset.image_size", "must be at least 8"));
        }
        for (field, n) in [
            ("dataset.n_train", self.n_train),
            ("dataset.n_val", self.n_val),
            ("dataset.n_test", self.n_test),
        ] {
            if n == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn split_len(&self, split: SplitName) -> usize {
        match split {
            SplitName::Train => self.n_train,
            SplitName::Val => self.n_val,
            SplitName::Test => self.n_test,
        }
    }

    fn first_id(&self, split: SplitName) -> usize {
        match split {
            SplitName::Train => 0,
            SplitName::Val => self.n_train,
            SplitName::Test => self.n_train + self.n_val,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Val, SplitName::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairedSample {
    pub sample_id: u32,
    /// `H * W` class ids, row-major.
    pub label_map: Vec<u8>,
    /// `3 * H * W` channel-planar RGB bytes.
    pub photo: Vec<u8>,
}

impl PairedSample {
    /// Photo mapped to `[-1, 1]`.
    pub fn photo_real(&self) -> Vec<f32> {
        self.photo.iter().map(|&v| dequantize(v)).collect()
    }
}

pub fn dequantize(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

/// Inverse of [`dequantize`] with rounding and clamping.
pub fn quantize(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

pub fn class_color(class: usize) -> [u8; 3] {
    if class < PALETTE.len() {
        return PALETTE[class];
    }
    let c = class as u32;
    [
        (40 + (c * 67) % 176) as u8,
        (40 + (c * 131) % 176) as u8,
        (40 + (c * 197) % 176) as u8,
    ]
}

fn pattern(class: usize, x: usize, y: usize) -> i32 {
    let on = match class % 3 {
        0 => return 0,
        1 => (y / 2) % 2 == 0,
        _ => (x / 3 + y / 3) % 2 == 0,
    };
    if on {
        PATTERN_AMPLITUDE
    } else {
        -PATTERN_AMPLITUDE
    }
}

/// Builds one sample. Pure in `(spec.seed, sample_id)` and the spec's shape fields.
pub fn generate_sample(spec: &DatasetSpec, sample_id: u32) -> PairedSample {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(sample_id as u64);
    let s = spec.image_size;
    let k = spec.n_classes;
    let mut label = vec![0u8; s * s];

    let regions = rng.random_range(3..=8usize);
    for _ in 0..regions {
        let class = if k > 1 { rng.random_range(1..k) as u8 } else { 0 };
        if rng.random_bool(0.5) {
            let w = rng.random_range(s / 8..=s / 2);
            let h = rng.random_range(s / 8..=s / 2);
            let x0 = rng.random_range(0..=s - w);
            let y0 = rng.random_range(0..=s - h);
            for y in y0..y0 + h {
                label[y * s + x0..y * s + x0 + w].fill(class);
            }
        } else {
            let si = s as i64;
            let cx = rng.random_range(0..si);
            let cy = rng.random_range(0..si);
            let r = rng.random_range(si / 6..=si / 2);
            let mut v = [(0i64, 0i64); 3];
            for p in &mut v {
                // Doubled coordinates so pixel centres are integers.
                *p = (
                    2 * (cx + rng.random_range(-r..=r)),
                    2 * (cy + rng.random_range(-r..=r)),
                );
            }
            fill_triangle(&mut label, s, v, class);
        }
    }

    let lighting = match spec.texture {
        Texture::Flat => 0,
        _ => rng.random_range(-LIGHTING_JITTER..=LIGHTING_JITTER),
    };
    let plane = s * s;
    let mut photo = vec![0u8; 3 * plane];
    for y in 0..s {
        for x in 0..s {
            let c = label[y * s + x] as usize;
            let base = class_color(c);
            let tex = if spec.texture == Texture::Textured {
                pattern(c, x, y)
            } else {
                0
            };
            for (ch, &b) in base.iter().enumerate() {
                let noise = match spec.texture {
                    Texture::Flat => 0,
                    _ => rng.random_range(-SPECKLE..=SPECKLE),
                };
                let v = b as i32 + lighting + tex + noise;
                photo[ch * plane + y * s + x] = v.clamp(0, 255) as u8;
            }
        }
    }
    PairedSample {
        sample_id,
        label_map: label,
        photo,
    }
}

fn edge(a: (i64, i64), b: (i64, i64), p: (i64, i64)) -> i64 {
    (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
}

fn fill_triangle(label: &mut [u8], s: usize, v: [(i64, i64); 3], class: u8) {
    let area = edge(v[0], v[1], v[2]);
    if area == 0 {
        return;
    }
    for y in 0..s {
        for x in 0..s {
            let p = (2 * x as i64 + 1, 2 * y as i64 + 1);
            let e = [edge(v[0], v[1], p), edge(v[1], v[2], p), edge(v[2], v[0], p)];
            let inside = if area > 0 {
                e.iter().all(|&d| d >= 0)
            } else {
                e.iter().all(|&d| d <= 0)
            };
            if inside {
                label[y * s + x] = class;
            }
        }
    }
}

/// Class indicator planes scaled to `{-1, +1}`: `K x H x W`.
pub fn one_hot_encode(label_map: &[u8], k: usize) -> Result<Vec<f32>> {
    let n = label_map.len();
    let mut out = vec![-1.0f32; k * n];
    for (i, &l) in label_map.iter().enumerate() {
        let l = l as usize;
        if l >= k {
            return Err(Error::data(format!("label {l} at pixel {i} is not below K = {k}")));
        }
        out[l * n + i] = 1.0;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub name: SplitName,
    pub image_size: usize,
    pub n_classes: usize,
    pub samples: Vec<PairedSample>,
}

/// Network-ready tensors for a set of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedBatch {
    pub sample_ids: Vec<u32>,
    /// One-hot source images, `n x K x H x W`.
    pub x: Tensor<f32>,
    /// Target photos, `n x 3 x H x W`.
    pub y: Tensor<f32>,
    /// Label maps, `n * H * W`.
    pub labels: Vec<u8>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<PairedBatch> {
        let s = self.image_size;
        let mut x = Vec::with_capacity(indices.len() * self.n_classes * s * s);
        let mut y = Vec::with_capacity(indices.len() * 3 * s * s);
        let mut labels = Vec::with_capacity(indices.len() * s * s);
        let mut ids = Vec::with_capacity(indices.len());
        for &i in indices {
            let sample = self
                .samples
                .get(i)
                .ok_or_else(|| Error::data(format!("index {i} outside {} split", self.name.as_str())))?;
            x.extend(one_hot_encode(&sample.label_map, self.n_classes)?);
            y.extend(sample.photo_real());
            labels.extend_from_slice(&sample.label_map);
            ids.push(sample.sample_id);
        }
        let n = indices.len();
        Ok(PairedBatch {
            sample_ids: ids,
            x: Tensor::from_vec(&[n, self.n_classes, s, s], x)?,
            y: Tensor::from_vec(&[n, 3, s, s], y)?,
            labels,
        })
    }

    pub fn all(&self) -> Result<PairedBatch> {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }

    pub fn position_of(&self, sample_id: u32) -> Option<usize> {
        self.samples.iter().position(|s| s.sample_id == sample_id)
    }
}

/// Seed-determined shuffled batches of sample indices; the trailing partial
/// batch is dropped.
pub fn batch_iterator(split_len: usize, batch_size: usize, epoch_seed: u64) -> Result<BatchIter> {
    if split_len == 0 {
        return Err(Error::data("cannot iterate an empty split"));
    }
    if batch_size == 0 {
        return Err(Error::config("batch_size", "must be at least 1"));
    }
    if batch_size > split_len {
        return Err(Error::data(format!(
            "batch size {batch_size} exceeds split size {split_len}"
        )));
    }
    let mut order: Vec<usize> = (0..split_len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    for i in (1..split_len).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    Ok(BatchIter {
        order,
        batch_size,
        pos: 0,
    })
}

#[derive(Clone, Debug)]
pub struct BatchIter {
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl BatchIter {
    pub fn num_batches(&self) -> usize {
        self.order.len() / self.batch_size
    }
}

impl Iterator for BatchIter {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.pos + self.batch_size > self.order.len() {
            return None;
        }
        let b = self.order[self.pos..self.pos + self.batch_size].to_vec();
        self.pos += self.batch_size;
        Some(b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

#[derive(Serialize, Deserialize)]
struct FileHeader {
    spec: DatasetSpec,
    split: SplitName,
    count: usize,
}

impl Dataset {
    pub fn generate(spec: &DatasetSpec) -> Result<Self> {
        spec.validate()?;
        let make = |name: SplitName| {
            let first = spec.first_id(name);
            let samples = par::map_indexed(spec.split_len(name), |i| {
                generate_sample(spec, (first + i) as u32)
            });
            Split {
                name,
                image_size: spec.image_size,
                n_classes: spec.n_classes,
                samples,
            }
        };
        Ok(Self {
            spec: spec.clone(),
            train: make(SplitName::Train),
            val: make(SplitName::Val),
            test: make(SplitName::Test),
        })
    }

    pub fn split(&self, name: SplitName) -> &Split {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }

    pub fn split_path(dir: &Path, name: SplitName) -> PathBuf {
        dir.join(format!("{}.kdd", name.as_str()))
    }

    /// Serializes one split: magic, version, JSON header, then per sample the
    /// id (u32 LE), the label bytes and the photo bytes.
    pub fn split_bytes(&self, name: SplitName) -> Result<Vec<u8>> {
        let split = self.split(name);
        let header = serde_json::to_vec(&FileHeader {
            spec: self.spec.clone(),
            split: name,
            count: split.len(),
        })?;
        let s = self.spec.image_size;
        let mut out = Vec::with_capacity(16 + header.len() + split.len() * (4 + 4 * s * s));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for sample in &split.samples {
            out.extend_from_slice(&sample.sample_id.to_le_bytes());
            out.extend_from_slice(&sample.label_map);
            out.extend_from_slice(&sample.photo);
        }
        Ok(out)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for name in SplitName::ALL {
            fs::write(Self::split_path(dir, name), self.split_bytes(name)?)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mut spec = None;
        let mut splits = Vec::new();
        for name in SplitName::ALL {
            let path = Self::split_path(dir, name);
            let bytes = fs::read(&path).map_err(|e| Error::Load {
                path: path.clone(),
                reason: e.to_string(),
            })?;
            let (file_spec, split) = parse_split(&bytes).map_err(|reason| Error::Load {
                path: path.clone(),
                reason,
            })?;
            if split.name != name {
                return Err(Error::Load {
                    path,
                    reason: format!("file holds the {} split", split.name.as_str()),
                });
            }
            match &spec {
                None => spec = Some(file_spec),
                Some(s) if *s != file_spec => {
                    return Err(Error::Load {
                        path,
                        reason: "split files come from different dataset specs".into(),
                    })
                }
                Some(_) => {}
            }
            splits.push(split);
        }
        let mut it = splits.into_iter();
        Ok(Self {
            spec: spec.expect("three splits read"),
            train: it.next().expect("train"),
            val: it.next().expect("val"),
            test: it.next().expect("test"),
        })
    }

    /// Hex SHA-256 over the serialized bytes of all three splits.
    pub fn content_hash(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        for name in SplitName::ALL {
            hasher.update(self.split_bytes(name)?);
        }
        Ok(hex::encode(hasher.finalize()))
    }
}

fn parse_split(bytes: &[u8]) -> std::result::Result<(DatasetSpec, Split), String> {
    let mut r = bytes;
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| e.to_string())?;
    if &magic != MAGIC {
        return Err("not a dataset split file".into());
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(|e| e.to_string())?;
    if u32::from_le_bytes(b4) != VERSION {
        return Err("unsupported dataset file version".into());
    }
    r.read_exact(&mut b4).map_err(|e| e.to_string())?;
    let hlen = u32::from_le_bytes(b4) as usize;
    if r.len() < hlen {
        return Err("truncated header".into());
    }
    let header: FileHeader = serde_json::from_slice(&r[..hlen]).map_err(|e| e.to_string())?;
    r = &r[hlen..];
    let spec = header.spec;
    let plane = spec.image_size * spec.image_size;
    let record = 4 + 4 * plane;
    if r.len() != header.count * record {
        return Err(format!(
            "expected {} sample bytes, found {}",
            header.count * record,
            r.len()
        ));
    }
    let mut samples = Vec::with_capacity(header.count);
    for chunk in r.chunks_exact(record) {
        let sample_id = u32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        let label_map = chunk[4..4 + plane].to_vec();
        if let Some(&bad) = label_map.iter().find(|&&l| l as usize >= spec.n_classes) {
            return Err(format!("sample {sample_id} holds label {bad}"));
        }
        samples.push(PairedSample {
            sample_id,
            label_map,
            photo: chunk[4 + plane..].to_vec(),
        });
    }
    let split = Split {
        name: header.split,
        image_size: spec.image_size,
        n_classes: spec.n_classes,
        samples,
    };
    Ok((spec, split))
}

/// Display colour for a class id in label visualizations.
pub fn label_color(class: u8) -> [u8; 3] {
    const COLORS: [[u8; 3]; 8] = [
        [0, 0, 0],
        [230, 25, 75],
        [60, 180, 75],
        [255, 225, 25],
        [0, 130, 200],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
    ];
    let c = class as usize;
    if c < COLORS.len() {
        COLORS[c]
    } else {
        let v = class as u32;
        [(v * 53 % 256) as u8, (v * 97 % 256) as u8, (v * 151 % 256) as u8]
    }
}

pub fn colorize_labels(label_map: &[u8], size: usize) -> RgbImage {
    RgbImage::from_fn(size as u32, size as u32, |x, y| {
        Rgb(label_color(label_map[y as usize * size + x as usize]))
    })
}

/// Channel-planar RGB bytes to an image.
pub fn planar_to_image(photo: &[u8], size: usize) -> RgbImage {
    let plane = size * size;
    RgbImage::from_fn(size as u32, size as u32, |x, y| {
        let i = y as usize * size + x as usize;
        Rgb([photo[i], photo[plane + i], photo[2 * plane + i]])
    })
}

/// Contact sheet of the first `n` samples: each cell is the colourized label
/// map next to its photo, four pairs per row.
pub fn write_preview(split: &Split, n: usize, path: &Path) -> Result<()> {
    const PER_ROW: usize = 4;
    const GAP: u32 = 2;
    let n = n.min(split.len());
    if n == 0 {
        return Err(Error::data("preview needs at least one sample"));
    }
    let s = split.image_size as u32;
    let rows = n.div_ceil(PER_ROW) as u32;
    let cols = n.min(PER_ROW) as u32;
    let cell_w = 2 * s + GAP;
    let mut sheet = RgbImage::from_pixel(
        cols * (cell_w + GAP) + GAP,
        rows * (s + GAP) + GAP,
        Rgb([255, 255, 255]),
    );
    for (i, sample) in split.samples.iter().take(n).enumerate() {
        let ox = GAP + (i % PER_ROW) as u32 * (cell_w + GAP);
        let oy = GAP + (i / PER_ROW) as u32 * (s + GAP);
        image::imageops::replace(&mut sheet, &colorize_labels(&sample.label_map, split.image_size), ox as i64, oy as i64);
        image::imageops::replace(
            &mut sheet,
            &planar_to_image(&sample.photo, split.image_size),
            (ox + s + GAP) as i64,
            oy as i64,
        );
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    sheet.save(path)?;
    Ok(())
}
