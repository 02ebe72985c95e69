//! Images, the two toy extractor branches, fusion, L2 normalisation,
//! geometric augmentation, and assembly of a labelled feature table from a
//! dataset manifest.

use std::collections::HashSet;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::read_ppm;
use crate::numeric::{Matrix, RandomStream};

/// 8-bit RGB image, row-major, three interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height * 3 {
            return Err(Error::InvalidArgument(format!(
                "pixel buffer of {} bytes does not match {width}x{height}x3",
                pixels.len()
            )));
        }
        Ok(Image {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let pixels = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Image {
            width,
            height,
            pixels,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn put_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// A deterministic image embedding. Implementations stand in for a CNN
/// backbone followed by global average pooling.
pub trait Extractor: Send + Sync {
    fn name(&self) -> &str;
    fn output_dim(&self) -> usize;
    fn embed(&self, image: &Image) -> Vec<f64>;
}

/// Runs an extractor with the shared contract checks applied.
pub fn extract(image: &Image, extractor: &dyn Extractor) -> Result<FeatureVector> {
    if image.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "cannot extract features from a {}x{} image",
            image.width, image.height
        )));
    }
    let values = extractor.embed(image);
    if values.len() != extractor.output_dim() {
        return Err(Error::DimensionMismatch {
            op: "extract",
            left: format!("{} values", values.len()),
            right: format!("{} declared by {}", extractor.output_dim(), extractor.name()),
        });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{} features", extractor.name())));
    }
    Ok(FeatureVector(values))
}

pub const GRID_BRANCH: &str = "grid-pool-8x8";
pub const HISTOGRAM_BRANCH: &str = "color-hist-16x3";
pub const DEFAULT_BRANCH_DIM: usize = 64;

const GRID: usize = 8;
const HIST_BINS: usize = 16;
const GRID_PROJECTION_SEED: u64 = 0xA11C_E5ED_0000_000A;
const HIST_PROJECTION_SEED: u64 = 0xA11C_E5ED_0000_000B;

/// Gaussian random projection, entries scaled by `1/√in_dim`.
#[derive(Debug, Clone)]
struct Projection {
    weights: Matrix,
}

impl Projection {
    fn new(in_dim: usize, out_dim: usize, seed: u64) -> Self {
        let mut stream = RandomStream::new(seed);
        let scale = 1.0 / (in_dim as f64).sqrt();
        let data = (0..in_dim * out_dim)
            .map(|_| stream.next_gaussian() * scale)
            .collect();
        Projection {
            weights: Matrix::from_raw(out_dim, in_dim, data),
        }
    }

    fn apply(&self, input: &[f64]) -> Vec<f64> {
        self.weights
            .iter_rows()
            .map(|w| crate::numeric::dot(w, input))
            .collect()
    }
}

/// Branch A: 8×8 grid mean-pool of luminance, then a fixed random projection.
#[derive(Debug, Clone)]
pub struct GridPoolExtractor {
    projection: Projection,
}

impl GridPoolExtractor {
    pub fn new(output_dim: usize) -> Self {
        GridPoolExtractor {
            projection: Projection::new(GRID * GRID, output_dim, GRID_PROJECTION_SEED),
        }
    }

    /// Mean luminance (in [0, 1]) of each grid cell, row-major.
    pub fn pooled(&self, image: &Image) -> Vec<f64> {
        let mut cells = Vec::with_capacity(GRID * GRID);
        for gy in 0..GRID {
            let (y0, y1) = cell_span(gy, image.height);
            for gx in 0..GRID {
                let (x0, x1) = cell_span(gx, image.width);
                let mut acc = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        let [r, g, b] = image.pixel(x, y);
                        acc += 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64;
                    }
                }
                cells.push(acc / (((y1 - y0) * (x1 - x0)) as f64 * 255.0));
            }
        }
        cells
    }
}

/// Pixel range of grid cell `i` along an axis of `len` pixels; never empty
/// for a non-empty axis.
pub(crate) fn cell_span(i: usize, len: usize) -> (usize, usize) {
    let start = i * len / GRID;
    let end = ((i + 1) * len / GRID).max(start + 1).min(len);
    let start = start.min(end - 1);
    (start, end)
}

impl Extractor for GridPoolExtractor {
    fn name(&self) -> &str {
        GRID_BRANCH
    }

    fn output_dim(&self) -> usize {
        self.projection.weights.rows()
    }

    fn embed(&self, image: &Image) -> Vec<f64> {
        self.projection.apply(&self.pooled(image))
    }
}

/// Branch B: 16-bin histogram per colour channel (48 bins total, each
/// channel normalised to sum 1), then a fixed random projection.
#[derive(Debug, Clone)]
pub struct ColorHistogramExtractor {
    projection: Projection,
}

impl ColorHistogramExtractor {
    pub fn new(output_dim: usize) -> Self {
        ColorHistogramExtractor {
            projection: Projection::new(3 * HIST_BINS, output_dim, HIST_PROJECTION_SEED),
        }
    }

    pub fn histogram(&self, image: &Image) -> Vec<f64> {
        let mut bins = vec![0.0; 3 * HIST_BINS];
        for px in image.pixels.chunks_exact(3) {
            for (c, &v) in px.iter().enumerate() {
                bins[c * HIST_BINS + v as usize * HIST_BINS / 256] += 1.0;
            }
        }
        let n = (image.width * image.height) as f64;
        bins.iter_mut().for_each(|b| *b /= n);
        bins
    }
}

impl Extractor for ColorHistogramExtractor {
    fn name(&self) -> &str {
        HISTOGRAM_BRANCH
    }

    fn output_dim(&self) -> usize {
        self.projection.weights.rows()
    }

    fn embed(&self, image: &Image) -> Vec<f64> {
        self.projection.apply(&self.histogram(image))
    }
}

/// Rebuilds a built-in extractor from the name and width recorded in a
/// checkpoint.
pub fn builtin_extractor(name: &str, output_dim: usize) -> Result<Box<dyn Extractor>> {
    match name {
        GRID_BRANCH => Ok(Box::new(GridPoolExtractor::new(output_dim))),
        HISTOGRAM_BRANCH => Ok(Box::new(ColorHistogramExtractor::new(output_dim))),
        other => Err(Error::Data(format!("unknown extractor {other:?}"))),
    }
}

/// The two default branches, A then B.
pub fn default_branches() -> (Box<dyn Extractor>, Box<dyn Extractor>) {
    (
        Box::new(GridPoolExtractor::new(DEFAULT_BRANCH_DIM)),
        Box::new(ColorHistogramExtractor::new(DEFAULT_BRANCH_DIM)),
    )
}

/// Concatenation: `fa` is the prefix, `fb` the suffix.
pub fn fuse(fa: &FeatureVector, fb: &FeatureVector) -> FeatureVector {
    let mut values = Vec::with_capacity(fa.dim() + fb.dim());
    values.extend_from_slice(&fa.0);
    values.extend_from_slice(&fb.0);
    FeatureVector(values)
}

pub fn l2_normalize(v: &FeatureVector) -> Result<FeatureVector> {
    let norm = v.norm();
    if !norm.is_finite() {
        return Err(Error::NonFinite("vector to normalise".into()));
    }
    if norm == 0.0 {
        return Err(Error::Numeric("cannot L2-normalise a zero vector".into()));
    }
    Ok(FeatureVector(v.0.iter().map(|x| x / norm).collect()))
}

/// Branch A ⊕ branch B, L2-normalised.
pub fn fused_features(image: &Image, a: &dyn Extractor, b: &dyn Extractor) -> Result<FeatureVector> {
    let fa = extract(image, a)?;
    let fb = extract(image, b)?;
    l2_normalize(&fuse(&fa, &fb))
}

/// Sampling ranges for the random affine augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    /// Maximum absolute rotation in degrees.
    pub rotation_deg: f64,
    /// Maximum absolute translation as a fraction of each dimension.
    pub shift_frac: f64,
    pub zoom_min: f64,
    pub zoom_max: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            rotation_deg: 30.0,
            shift_frac: 0.10,
            zoom_min: 0.8,
            zoom_max: 1.2,
        }
    }
}

/// One concrete draw of augmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineDraw {
    pub rotation_deg: f64,
    pub shift_x: f64,
    pub shift_y: f64,
    pub zoom: f64,
}

impl AffineDraw {
    pub const IDENTITY: AffineDraw = AffineDraw {
        rotation_deg: 0.0,
        shift_x: 0.0,
        shift_y: 0.0,
        zoom: 1.0,
    };
}

impl AugmentParams {
    pub fn sample(&self, stream: &mut RandomStream) -> AffineDraw {
        AffineDraw {
            rotation_deg: stream.uniform_in(-self.rotation_deg, self.rotation_deg),
            shift_x: stream.uniform_in(-self.shift_frac, self.shift_frac),
            shift_y: stream.uniform_in(-self.shift_frac, self.shift_frac),
            zoom: stream.uniform_in(self.zoom_min, self.zoom_max),
        }
    }
}

pub fn augment(image: &Image, params: &AugmentParams, stream: &mut RandomStream) -> Image {
    apply_affine(image, &params.sample(stream))
}

/// Rotation about the centre, translation and central zoom as one inverse
/// map, sampled bilinearly; coordinates outside the image clamp to the edge.
pub fn apply_affine(image: &Image, draw: &AffineDraw) -> Image {
    let (w, h) = (image.width, image.height);
    if image.is_empty() {
        return image.clone();
    }
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let theta = draw.rotation_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let tx = draw.shift_x * w as f64;
    let ty = draw.shift_y * h as f64;
    let mut out = Image::filled(w, h, [0, 0, 0]);
    for y in 0..h {
        for x in 0..w {
            let dx = (x as f64 - cx - tx) / draw.zoom;
            let dy = (y as f64 - cy - ty) / draw.zoom;
            let sx = cx + cos * dx + sin * dy;
            let sy = cy - sin * dx + cos * dy;
            out.put_pixel(x, y, sample_bilinear(image, sx, sy));
        }
    }
    out
}

fn sample_bilinear(image: &Image, x: f64, y: f64) -> [u8; 3] {
    let x = x.clamp(0.0, (image.width - 1) as f64);
    let y = y.clamp(0.0, (image.height - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(image.width - 1);
    let y1 = (y0 + 1).min(image.height - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let p00 = image.pixel(x0, y0);
    let p10 = image.pixel(x1, y0);
    let p01 = image.pixel(x0, y1);
    let p11 = image.pixel(x1, y1);
    let mut rgb = [0u8; 3];
    for c in 0..3 {
        let top = (1.0 - fx) * p00[c] as f64 + fx * p10[c] as f64;
        let bottom = (1.0 - fx) * p01[c] as f64 + fx * p11[c] as f64;
        let v = (1.0 - fy) * top + fy * bottom;
        rgb[c] = v.round().clamp(0.0, 255.0) as u8;
    }
    rgb
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceTag {
    Mobile,
    Webcam,
    Public,
    Synthetic,
}

impl SourceTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            SourceTag::Mobile => "mobile",
            SourceTag::Webcam => "webcam",
            SourceTag::Public => "public",
            SourceTag::Synthetic => "synthetic",
        }
    }
}

impl std::str::FromStr for SourceTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mobile" => Ok(SourceTag::Mobile),
            "webcam" => Ok(SourceTag::Webcam),
            "public" => Ok(SourceTag::Public),
            "synthetic" => Ok(SourceTag::Synthetic),
            other => Err(Error::Data(format!("unknown source tag {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
    pub label: String,
    pub source: SourceTag,
}

/// The union of all image sources, with a declared label set.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    labels: Vec<String>,
    entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// `labels` is sorted to fix the label → index mapping.
    pub fn new(mut labels: Vec<String>, entries: Vec<ManifestEntry>) -> Result<Self> {
        labels.sort();
        labels.dedup();
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Data(format!("duplicate sample id {:?}", e.id)));
            }
        }
        Ok(DatasetManifest { labels, entries })
    }

    /// Manifest whose label set is exactly the labels its entries use.
    pub fn from_entries(entries: Vec<ManifestEntry>) -> Result<Self> {
        let labels = entries.iter().map(|e| e.label.clone()).collect();
        DatasetManifest::new(labels, entries)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.binary_search_by(|l| l.as_str().cmp(label)).ok()
    }

    /// Sub-manifest keeping the listed entries in the given order.
    pub fn subset(&self, indices: &[usize]) -> DatasetManifest {
        DatasetManifest {
            labels: self.labels.clone(),
            entries: indices.iter().map(|&i| self.entries[i].clone()).collect(),
        }
    }
}

/// Feature rows with per-row ids and class indices into `class_names`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub features: Matrix,
}

impl FeatureTable {
    pub fn new(
        ids: Vec<String>,
        labels: Vec<usize>,
        class_names: Vec<String>,
        features: Matrix,
    ) -> Result<Self> {
        if ids.len() != features.rows() || labels.len() != features.rows() {
            return Err(Error::InvalidArgument(format!(
                "{} ids and {} labels for {} feature rows",
                ids.len(),
                labels.len(),
                features.rows()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::Data(format!(
                "label index {bad} outside {} declared classes",
                class_names.len()
            )));
        }
        Ok(FeatureTable {
            ids,
            labels,
            class_names,
            features,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn select(&self, indices: &[usize]) -> FeatureTable {
        FeatureTable {
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
            features: self.features.select_rows(indices),
        }
    }

    pub fn with_features(&self, features: Matrix) -> Result<FeatureTable> {
        FeatureTable::new(
            self.ids.clone(),
            self.labels.clone(),
            self.class_names.clone(),
            features,
        )
    }
}

/// Reads every manifest image, emitting the fused, L2-normalised vector of
/// the original plus `augment_copies` augmented variants per image. Rows come
/// out in manifest order whatever the degree of parallelism: each image gets
/// its own child stream drawn from `stream` up front.
pub fn build_feature_table(
    manifest: &DatasetManifest,
    a: &dyn Extractor,
    b: &dyn Extractor,
    augment_copies: usize,
    params: &AugmentParams,
    stream: &mut RandomStream,
) -> Result<FeatureTable> {
    let mut labels_idx = Vec::with_capacity(manifest.len());
    for e in manifest.entries() {
        let idx = manifest.label_index(&e.label).ok_or_else(|| {
            Error::Data(format!(
                "sample {:?} has label {:?} outside the declared label set",
                e.id, e.label
            ))
        })?;
        labels_idx.push(idx);
    }
    let seeds: Vec<u64> = manifest
        .entries()
        .iter()
        .map(|_| rand_core::RngCore::next_u64(stream))
        .collect();

    let per_image: Vec<Result<Vec<Vec<f64>>>> = manifest
        .entries()
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(entry, &seed)| {
            let image = read_ppm(&entry.path)?;
            let mut rows = vec![fused_features(&image, a, b)?.0];
            let mut child = RandomStream::new(seed);
            for _ in 0..augment_copies {
                let aug = augment(&image, params, &mut child);
                rows.push(fused_features(&aug, a, b)?.0);
            }
            Ok(rows)
        })
        .collect();

    let dim = a.output_dim() + b.output_dim();
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for ((entry, &label), rows) in manifest.entries().iter().zip(&labels_idx).zip(per_image) {
        for (copy, row) in rows?.into_iter().enumerate() {
            ids.push(if copy == 0 {
                entry.id.clone()
            } else {
                format!("{}#aug{copy}", entry.id)
            });
            labels.push(label);
            data.extend(row);
        }
    }
    let features = Matrix::from_vec(ids.len(), dim, data)?;
    FeatureTable::new(ids, labels, manifest.labels().to_vec(), features)
}
