//! Persistence: PPM images, feature and manifest CSVs, the binary model
//! checkpoint, and JSON output that refuses non-finite numbers.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::features::{DatasetManifest, FeatureTable, Image, ManifestEntry, SourceTag};
use crate::mlp::{predict_proba, Activation, DenseLayer, LayerSpec, MlpModel};
use crate::numeric::{Matrix, RNG_ALGORITHM};
use crate::pca::{pca_transform, PcaModel};

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

// ---------------------------------------------------------------- PPM

/// Reads a binary "P6" image with maxval 255.
pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = read_bytes(path)?;
    decode_ppm(&bytes).map_err(|message| parse_err(path, 1, message))
}

fn decode_ppm(bytes: &[u8]) -> std::result::Result<Image, String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<String, String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err("truncated PPM header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    if magic != "P6" {
        return Err(format!("expected PPM magic P6, found {magic:?}"));
    }
    let mut number = |what: &str| -> std::result::Result<usize, String> {
        let t = token()?;
        t.parse().map_err(|_| format!("bad PPM {what} {t:?}"))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if maxval != 255 {
        return Err(format!("unsupported PPM maxval {maxval}, expected 255"));
    }
    if width == 0 || height == 0 {
        return Err(format!("PPM has empty dimensions {width}x{height}"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let start = pos + 1;
    let len = width * height * 3;
    if bytes.len() < start + len {
        return Err(format!(
            "PPM raster truncated: {} of {len} bytes",
            bytes.len().saturating_sub(start)
        ));
    }
    Image::new(width, height, bytes[start..start + len].to_vec()).map_err(|e| e.to_string())
}

pub fn write_ppm(path: &Path, image: &Image) -> Result<()> {
    let mut out = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend_from_slice(image.pixels());
    write_bytes(path, &out)
}

// ---------------------------------------------------------------- CSV

/// 17 significant digits: exact round-trip for any finite f64.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn check_cell(text: &str, what: &str) -> Result<()> {
    if text.is_empty() || text.contains([',', '\n', '\r', '"']) {
        return Err(Error::Data(format!(
            "{what} {text:?} cannot be stored in a CSV cell"
        )));
    }
    Ok(())
}

/// Header `id,label,f0,f1,…`; labels are written as class names.
pub fn write_feature_csv(path: &Path, table: &FeatureTable) -> Result<()> {
    if !table.features.is_finite() {
        return Err(Error::NonFinite("feature table".into()));
    }
    let mut out = String::from("id,label");
    for j in 0..table.dim() {
        out.push_str(&format!(",f{j}"));
    }
    out.push('\n');
    for (r, row) in table.features.iter_rows().enumerate() {
        check_cell(&table.ids[r], "id")?;
        let label = &table.class_names[table.labels[r]];
        check_cell(label, "label")?;
        out.push_str(&table.ids[r]);
        out.push(',');
        out.push_str(label);
        for v in row {
            out.push(',');
            out.push_str(&format_float(*v));
        }
        out.push('\n');
    }
    write_bytes(path, out.as_bytes())
}

/// Reads a feature CSV. Class names are the sorted distinct labels unless
/// `classes` is given, in which case any other label is an error.
pub fn read_feature_csv(path: &Path, classes: Option<&[String]>) -> Result<FeatureTable> {
    let bytes = read_bytes(path)?;
    let text = String::from_utf8(bytes).map_err(|_| parse_err(path, 1, "not UTF-8"))?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty feature file"))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < 3 || cols[0] != "id" || cols[1] != "label" {
        return Err(parse_err(path, 1, "header must be id,label,f0,..."));
    }
    for (j, c) in cols[2..].iter().enumerate() {
        if *c != format!("f{j}") {
            return Err(parse_err(path, 1, format!("column {} should be f{j}, found {c:?}", j + 2)));
        }
    }
    let dim = cols.len() - 2;
    let mut ids = Vec::new();
    let mut raw_labels = Vec::new();
    let mut data = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != dim + 2 {
            return Err(parse_err(
                path,
                lineno,
                format!("expected {} columns, found {}", dim + 2, cells.len()),
            ));
        }
        for (j, c) in cells[2..].iter().enumerate() {
            let v: f64 = c
                .parse()
                .map_err(|_| parse_err(path, lineno, format!("f{j}: {c:?} is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(path, lineno, format!("f{j}: non-finite value {c:?}")));
            }
            data.push(v);
        }
        ids.push(cells[0].to_string());
        raw_labels.push((lineno, cells[1].to_string()));
    }
    if ids.is_empty() {
        return Err(parse_err(path, 2, "feature file has a header but no rows"));
    }
    let class_names: Vec<String> = match classes {
        Some(c) => c.to_vec(),
        None => {
            let mut c: Vec<String> = raw_labels.iter().map(|(_, l)| l.clone()).collect();
            c.sort();
            c.dedup();
            c
        }
    };
    let mut labels = Vec::with_capacity(raw_labels.len());
    for (lineno, l) in &raw_labels {
        let idx = class_names
            .iter()
            .position(|c| c == l)
            .ok_or_else(|| parse_err(path, *lineno, format!("unknown label {l:?}")))?;
        labels.push(idx);
    }
    let features = Matrix::from_vec(ids.len(), dim, data)?;
    FeatureTable::new(ids, labels, class_names, features)
}

/// Manifest CSV `id,path,label,source`; relative paths resolve against the
/// manifest's directory.
pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let bytes = read_bytes(path)?;
    let text = String::from_utf8(bytes).map_err(|_| parse_err(path, 1, "not UTF-8"))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty manifest"))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols != ["id", "path", "label", "source"] {
        return Err(parse_err(path, 1, "header must be id,path,label,source"));
    }
    let mut entries = Vec::new();
    for (i, line) in lines {
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != 4 {
            return Err(parse_err(path, i + 1, format!("expected 4 columns, found {}", cells.len())));
        }
        let source: SourceTag = cells[3]
            .parse()
            .map_err(|e: Error| parse_err(path, i + 1, e.to_string()))?;
        let p = PathBuf::from(cells[1]);
        entries.push(ManifestEntry {
            id: cells[0].to_string(),
            path: if p.is_absolute() { p } else { base.join(p) },
            label: cells[2].to_string(),
            source,
        });
    }
    if entries.is_empty() {
        return Err(parse_err(path, 2, "manifest has no entries"));
    }
    DatasetManifest::from_entries(entries)
}

/// Writes entry paths relative to the manifest directory where possible.
pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = String::from("id,path,label,source\n");
    for e in manifest.entries() {
        let rel = e.path.strip_prefix(base).unwrap_or(&e.path);
        let shown = rel.to_string_lossy();
        check_cell(&e.id, "id")?;
        check_cell(&shown, "path")?;
        check_cell(&e.label, "label")?;
        out.push_str(&format!("{},{},{},{}\n", e.id, shown, e.label, e.source.as_str()));
    }
    write_bytes(path, out.as_bytes())
}

// ---------------------------------------------------------------- checkpoint

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"FHC1";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Everything needed to score a fused feature vector, or an image given the
/// named extractors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub labels: Vec<String>,
    /// `(name, output_dim)` of branch A then branch B.
    pub extractors: Vec<(String, usize)>,
    pub rng_algorithm: String,
    pub pca: PcaModel,
    pub mlp: MlpModel,
    pub seed: u64,
}

impl ModelBundle {
    pub fn new(
        labels: Vec<String>,
        extractors: Vec<(String, usize)>,
        pca: PcaModel,
        mlp: MlpModel,
        seed: u64,
    ) -> Result<Self> {
        let bundle = ModelBundle {
            labels,
            extractors,
            rng_algorithm: RNG_ALGORITHM.to_string(),
            pca,
            mlp,
            seed,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    /// Checks that extractors → PCA → MLP → labels chain up.
    pub fn validate(&self) -> Result<()> {
        self.pca.validate()?;
        self.mlp.validate()?;
        let fused: usize = self.extractors.iter().map(|e| e.1).sum();
        if fused != self.pca.input_dim() {
            return Err(Error::DimChain(format!(
                "extractors give {fused} features but PCA expects {}",
                self.pca.input_dim()
            )));
        }
        if self.pca.k != self.mlp.input_dim() {
            return Err(Error::DimChain(format!(
                "PCA keeps {} components but the MLP expects {}",
                self.pca.k,
                self.mlp.input_dim()
            )));
        }
        if self.mlp.class_count() != self.labels.len() {
            return Err(Error::DimChain(format!(
                "MLP has {} outputs for {} labels",
                self.mlp.class_count(),
                self.labels.len()
            )));
        }
        Ok(())
    }

    /// Class probabilities for fused, normalised feature rows.
    pub fn predict_fused(&self, fused: &Matrix) -> Result<Matrix> {
        predict_proba(&self.mlp, &pca_transform(&self.pca, fused)?)
    }
}

struct Encoder(Vec<u8>);

impl Encoder {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn vec(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        v.iter().for_each(|&x| self.f64(x));
    }
    fn matrix(&mut self, m: &Matrix) {
        self.u64(m.rows() as u64);
        self.u64(m.cols() as u64);
        m.data().iter().for_each(|&x| self.f64(x));
    }
}

struct Decoder<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(Error::UnexpectedEnd(what))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn len(&mut self, what: &'static str, elem: usize) -> Result<usize> {
        let n = self.u64(what)?;
        // A length that cannot fit in the rest of the buffer is truncation.
        let remaining = (self.bytes.len() - self.pos) as u64;
        if n.checked_mul(elem as u64).is_none_or(|b| b > remaining) {
            return Err(Error::UnexpectedEnd(what));
        }
        Ok(n as usize)
    }
    fn f64(&mut self, what: &'static str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn str(&mut self, what: &'static str) -> Result<String> {
        let n = self.len(what, 1)?;
        String::from_utf8(self.take(n, what)?.to_vec())
            .map_err(|_| Error::Data(format!("checkpoint {what} is not UTF-8")))
    }
    fn vec(&mut self, what: &'static str) -> Result<Vec<f64>> {
        let n = self.len(what, 8)?;
        (0..n).map(|_| self.f64(what)).collect()
    }
    fn matrix(&mut self, what: &'static str) -> Result<Matrix> {
        let rows = self.u64(what)? as usize;
        let cols = self.u64(what)? as usize;
        let n = rows.checked_mul(cols).ok_or(Error::UnexpectedEnd(what))?;
        if n.checked_mul(8).is_none_or(|b| b > self.bytes.len() - self.pos) {
            return Err(Error::UnexpectedEnd(what));
        }
        let data = (0..n).map(|_| self.f64(what)).collect::<Result<Vec<_>>>()?;
        Ok(Matrix::from_raw(rows, cols, data))
    }
}

pub fn encode_checkpoint(bundle: &ModelBundle) -> Vec<u8> {
    let mut e = Encoder(Vec::new());
    e.0.extend_from_slice(&CHECKPOINT_MAGIC);
    e.u16(CHECKPOINT_VERSION);
    e.u64(bundle.labels.len() as u64);
    bundle.labels.iter().for_each(|l| e.str(l));
    e.u64(bundle.extractors.len() as u64);
    for (name, dim) in &bundle.extractors {
        e.str(name);
        e.u64(*dim as u64);
    }
    e.str(&bundle.rng_algorithm);
    let p = &bundle.pca;
    e.u64(p.k as u64);
    e.f64(p.threshold);
    e.vec(&p.mean);
    e.vec(&p.eigenvalues);
    e.matrix(&p.basis);
    e.u64(bundle.mlp.layers.len() as u64);
    for l in &bundle.mlp.layers {
        let s = &l.spec;
        e.u64(s.in_dim as u64);
        e.u64(s.out_dim as u64);
        e.u8(match s.activation {
            Activation::Relu => 0,
            Activation::Softmax => 1,
        });
        e.f64(s.dropout);
        e.u8(s.batch_norm as u8);
        e.matrix(&l.weights);
        e.vec(&l.bias);
        e.vec(&l.gamma);
        e.vec(&l.beta);
        e.vec(&l.running_mean);
        e.vec(&l.running_var);
    }
    e.u64(bundle.seed);
    e.0
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelBundle> {
    let mut d = Decoder { bytes, pos: 0 };
    let magic: [u8; 4] = d.take(4, "magic")?.try_into().unwrap();
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found: magic,
        });
    }
    let version = d.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let n_labels = d.len("labels", 8)?;
    let labels = (0..n_labels).map(|_| d.str("labels")).collect::<Result<Vec<_>>>()?;
    let n_ext = d.len("extractors", 16)?;
    let extractors = (0..n_ext)
        .map(|_| Ok((d.str("extractors")?, d.u64("extractors")? as usize)))
        .collect::<Result<Vec<_>>>()?;
    let rng_algorithm = d.str("rng algorithm")?;
    let k = d.u64("pca")? as usize;
    let threshold = d.f64("pca")?;
    let mean = d.vec("pca mean")?;
    let eigenvalues = d.vec("pca eigenvalues")?;
    let basis = d.matrix("pca basis")?;
    let pca = PcaModel {
        mean,
        basis,
        eigenvalues,
        k,
        threshold,
    };
    let n_layers = d.len("mlp layers", 8)?;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let in_dim = d.u64("layer spec")? as usize;
        let out_dim = d.u64("layer spec")? as usize;
        let activation = match d.u8("layer spec")? {
            0 => Activation::Relu,
            1 => Activation::Softmax,
            other => return Err(Error::Data(format!("unknown activation code {other}"))),
        };
        let dropout = d.f64("layer spec")?;
        let batch_norm = match d.u8("layer spec")? {
            0 => false,
            1 => true,
            other => return Err(Error::Data(format!("bad batch-norm flag {other}"))),
        };
        layers.push(DenseLayer {
            spec: LayerSpec {
                in_dim,
                out_dim,
                activation,
                dropout,
                batch_norm,
            },
            weights: d.matrix("layer weights")?,
            bias: d.vec("layer bias")?,
            gamma: d.vec("batch-norm scale")?,
            beta: d.vec("batch-norm shift")?,
            running_mean: d.vec("running mean")?,
            running_var: d.vec("running variance")?,
        });
    }
    let seed = d.u64("seed")?;
    if d.pos != bytes.len() {
        return Err(Error::Data(format!(
            "{} trailing bytes after checkpoint",
            bytes.len() - d.pos
        )));
    }
    let bundle = ModelBundle {
        labels,
        extractors,
        rng_algorithm,
        pca,
        mlp: MlpModel { layers },
        seed,
    };
    bundle.validate()?;
    Ok(bundle)
}

pub fn save_checkpoint(path: &Path, bundle: &ModelBundle) -> Result<()> {
    bundle.validate()?;
    write_bytes(path, &encode_checkpoint(bundle))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelBundle> {
    decode_checkpoint(&read_bytes(path)?)
}

// ---------------------------------------------------------------- JSON

fn reject_null(v: &serde_json::Value, at: &mut String) -> Result<()> {
    match v {
        serde_json::Value::Null => Err(Error::NonFinite(format!("JSON output at {at}"))),
        serde_json::Value::Array(items) => {
            for (i, item) in items.iter().enumerate() {
                let len = at.len();
                at.push_str(&format!("[{i}]"));
                reject_null(item, at)?;
                at.truncate(len);
            }
            Ok(())
        }
        serde_json::Value::Object(map) => {
            for (k, item) in map {
                let len = at.len();
                at.push('.');
                at.push_str(k);
                reject_null(item, at)?;
                at.truncate(len);
            }
            Ok(())
        }
        _ => Ok(()),
    }
}

/// Pretty JSON. NaN and infinities serialise as null, and no value in the
/// reports is legitimately null, so any null aborts with an error.
pub fn to_json_checked<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value).map_err(|e| Error::Json(e.to_string()))?;
    reject_null(&v, &mut String::from("$"))?;
    let mut s = serde_json::to_string_pretty(&v).map_err(|e| Error::Json(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_bytes(path, to_json_checked(value)?.as_bytes())
}

/// Writes text, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_bytes(path, text.as_bytes())
}

/// Appends a line to a writer, mapping failures to the given path.
pub fn write_line(w: &mut impl Write, path: &Path, line: &str) -> Result<()> {
    writeln!(w, "{line}").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_with_comment() {
        let img = Image::new(2, 1, vec![1, 2, 3, 250, 251, 252]).unwrap();
        let mut bytes = b"P6\n# note\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(img.pixels());
        assert_eq!(decode_ppm(&bytes).unwrap(), img);
    }

    #[test]
    fn ppm_rejects_other_formats() {
        assert!(decode_ppm(b"P3\n1 1\n255\n0 0 0").is_err());
        assert!(decode_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0").is_err());
        assert!(decode_ppm(b"P6\n2 2\n255\n\0\0\0").is_err());
    }

    #[test]
    fn float_format_round_trips() {
        for v in [0.1, -1.0 / 3.0, 1e-300, 123456789.123456789, f64::MIN_POSITIVE] {
            assert_eq!(format_float(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn null_rejected_in_json() {
        assert!(to_json_checked(&vec![1.0, f64::NAN]).is_err());
        assert!(to_json_checked(&vec![1.0, 2.0]).is_ok());
    }
}
