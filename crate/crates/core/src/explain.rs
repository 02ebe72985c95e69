//! Model-agnostic local explanations: a LIME surrogate over image grid
//! segments or tabular dimensions, Kernel SHAP with the Shapley kernel and
//! an efficiency constraint, and exact Shapley values by enumeration.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{cell_span, fused_features, Extractor, Image};
use crate::mlp::{predict_proba, MlpModel};
use crate::numeric::{solve_spd, Matrix, RandomStream};
use crate::pca::{pca_transform, PcaModel};

/// Anything that maps rows of a feature matrix to per-class scores.
pub trait Predictor: Sync {
    fn predict_rows(&self, rows: &Matrix) -> Result<Matrix>;
}

impl Predictor for MlpModel {
    fn predict_rows(&self, rows: &Matrix) -> Result<Matrix> {
        predict_proba(self, rows)
    }
}

/// Wraps a closure `row → scores` as a predictor.
pub struct FnPredictor<F>(pub F);

impl<F> Predictor for FnPredictor<F>
where
    F: Fn(&[f64]) -> Vec<f64> + Sync,
{
    fn predict_rows(&self, rows: &Matrix) -> Result<Matrix> {
        let out: Vec<Vec<f64>> = rows.iter_rows().map(&self.0).collect();
        Matrix::from_rows(&out)
    }
}

/// image → branch A ⊕ branch B → L2 → PCA → MLP probabilities.
pub struct PipelinePredictor<'a> {
    pub branch_a: &'a dyn Extractor,
    pub branch_b: &'a dyn Extractor,
    pub pca: &'a PcaModel,
    pub mlp: &'a MlpModel,
}

impl PipelinePredictor<'_> {
    pub fn validate(&self) -> Result<()> {
        let fused = self.branch_a.output_dim() + self.branch_b.output_dim();
        if fused != self.pca.input_dim() || self.pca.k != self.mlp.input_dim() {
            return Err(Error::DimChain(format!(
                "extractors give {fused} features, PCA maps {} → {}, MLP expects {}",
                self.pca.input_dim(),
                self.pca.k,
                self.mlp.input_dim()
            )));
        }
        Ok(())
    }

    /// PCA-space rows for a batch of images, extracted in parallel.
    pub fn embed_images(&self, images: &[Image]) -> Result<Matrix> {
        let rows: Vec<Vec<f64>> = images
            .par_iter()
            .map(|img| fused_features(img, self.branch_a, self.branch_b).map(|v| v.0))
            .collect::<Result<_>>()?;
        pca_transform(self.pca, &Matrix::from_rows(&rows)?)
    }

    pub fn predict_images(&self, images: &[Image]) -> Result<Matrix> {
        predict_proba(self.mlp, &self.embed_images(images)?)
    }
}

impl Predictor for PipelinePredictor<'_> {
    /// Rows are PCA-space vectors.
    fn predict_rows(&self, rows: &Matrix) -> Result<Matrix> {
        predict_proba(self.mlp, rows)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Lime,
    KernelShap,
    ExactShap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnitMode {
    /// Units are cells of an 8×8 grid over the image.
    Image,
    /// Units are input dimensions (principal components).
    Tabular,
}

/// Per-unit weights for one explained prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct Attribution {
    pub method: Method,
    pub mode: UnitMode,
    pub target_class: usize,
    /// Indexed by unit.
    pub weights: Vec<f64>,
    /// Model output with every unit replaced by background.
    pub base_value: f64,
    /// Model output at the unperturbed instance.
    pub prediction: f64,
    pub intercept: Option<f64>,
    /// Kernel-weighted R² of the LIME surrogate.
    pub fidelity: Option<f64>,
    /// |prediction − surrogate(instance)| for LIME.
    pub local_residual: Option<f64>,
    pub n_samples: usize,
    pub seed: Option<u64>,
}

impl Attribution {
    /// Units sorted by descending |weight|, ties by unit index.
    pub fn ranked(&self) -> Vec<(usize, f64)> {
        let mut units: Vec<(usize, f64)> = self.weights.iter().copied().enumerate().collect();
        units.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()).then(a.0.cmp(&b.0)));
        units
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LimeConfig {
    pub n_samples: usize,
    /// Defaults to 0.75·√(unit count).
    pub kernel_width: Option<f64>,
    pub ridge: f64,
}

impl Default for LimeConfig {
    fn default() -> Self {
        LimeConfig {
            n_samples: 1000,
            kernel_width: None,
            ridge: 1e-3,
        }
    }
}

struct SurrogateFit {
    weights: Vec<f64>,
    intercept: f64,
    fidelity: f64,
    prediction: f64,
    local_residual: f64,
    base_value: f64,
}

/// Samples keep/drop masks over the active units (the first sample keeps
/// everything), scores them with `eval`, and fits a kernel-weighted ridge
/// regression. Inert units are never varied and get weight exactly zero: a
/// unit is inert when its replacement equals the original (`unchanged`), or
/// when dropping it from the full instance and adding it to the empty one
/// both leave the output bit-identical.
fn fit_surrogate<E>(
    unchanged: &[bool],
    eval: E,
    config: &LimeConfig,
    stream: &mut RandomStream,
) -> Result<SurrogateFit>
where
    E: Fn(&[Vec<bool>]) -> Result<Vec<f64>>,
{
    let units = unchanged.len();
    if config.n_samples < units + 2 {
        return Err(Error::InvalidArgument(format!(
            "LIME needs at least {} samples for {units} units, got {}",
            units + 2,
            config.n_samples
        )));
    }
    let probed: Vec<usize> = (0..units).filter(|&u| !unchanged[u]).collect();
    let mut probes = vec![vec![true; units], vec![false; units]];
    for &u in &probed {
        let mut without = vec![true; units];
        without[u] = false;
        let mut with = vec![false; units];
        with[u] = true;
        probes.push(without);
        probes.push(with);
    }
    let probe_out = eval(&probes)?;
    let (full, base_value) = (probe_out[0], probe_out[1]);
    let mut inert = unchanged.to_vec();
    for (i, &u) in probed.iter().enumerate() {
        inert[u] = probe_out[2 + 2 * i] == full && probe_out[3 + 2 * i] == base_value;
    }

    let active: Vec<usize> = (0..units).filter(|&u| !inert[u]).collect();
    let mut masks = vec![vec![true; units]];
    for _ in 1..config.n_samples {
        let mut mask = vec![true; units];
        if !active.is_empty() {
            let off = 1 + (stream.next_uniform() * active.len() as f64) as usize;
            for i in sample(stream, active.len(), off.min(active.len())).iter() {
                mask[active[i]] = false;
            }
        }
        masks.push(mask);
    }
    let outputs = eval(&masks)?;

    let width = config
        .kernel_width
        .unwrap_or(0.75 * (units as f64).sqrt());
    // Euclidean distance between binary masks: d² is the number of dropped units.
    let kernel: Vec<f64> = masks
        .iter()
        .map(|m| {
            let dropped = m.iter().filter(|&&k| !k).count() as f64;
            (-dropped / (width * width)).exp()
        })
        .collect();

    let p = active.len() + 1;
    let mut xtwx = Matrix::zeros(p, p);
    let mut xtwy = vec![0.0; p];
    let mut row = vec![0.0; p];
    for ((mask, &w), &y) in masks.iter().zip(&kernel).zip(&outputs) {
        row[0] = 1.0;
        for (j, &u) in active.iter().enumerate() {
            row[j + 1] = if mask[u] { 1.0 } else { 0.0 };
        }
        for a in 0..p {
            if row[a] == 0.0 {
                continue;
            }
            xtwy[a] += w * row[a] * y;
            for b in 0..p {
                let v = xtwx.get(a, b) + w * row[a] * row[b];
                xtwx.set(a, b, v);
            }
        }
    }
    for j in 1..p {
        let v = xtwx.get(j, j) + config.ridge;
        xtwx.set(j, j, v);
    }
    let beta = solve_spd(&xtwx, &xtwy).map_err(|_| {
        Error::Numeric(format!(
            "LIME design matrix is degenerate; try more than {} samples",
            config.n_samples
        ))
    })?;

    let mut weights = vec![0.0; units];
    for (j, &u) in active.iter().enumerate() {
        weights[u] = beta[j + 1];
    }
    let fitted: Vec<f64> = masks
        .iter()
        .map(|m| beta[0] + active.iter().enumerate().filter(|(_, &u)| m[u]).map(|(j, _)| beta[j + 1]).sum::<f64>())
        .collect();
    let wsum: f64 = kernel.iter().sum();
    let ymean = kernel.iter().zip(&outputs).map(|(w, y)| w * y).sum::<f64>() / wsum;
    let ss_res: f64 = kernel
        .iter()
        .zip(&outputs)
        .zip(&fitted)
        .map(|((w, y), f)| w * (y - f).powi(2))
        .sum();
    let ss_tot: f64 = kernel.iter().zip(&outputs).map(|(w, y)| w * (y - ymean).powi(2)).sum();
    let fidelity = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(SurrogateFit {
        weights,
        intercept: beta[0],
        fidelity,
        prediction: outputs[0],
        local_residual: (outputs[0] - fitted[0]).abs(),
        base_value,
    })
}

fn target_column(scores: &Matrix, target: usize) -> Result<Vec<f64>> {
    if target >= scores.cols() {
        return Err(Error::InvalidArgument(format!(
            "target class {target} outside {} predictor outputs",
            scores.cols()
        )));
    }
    Ok(scores.column(target))
}

/// LIME over input dimensions; dropped dimensions take the background value.
pub fn lime_tabular(
    predictor: &dyn Predictor,
    instance: &[f64],
    background_mean: &[f64],
    target: usize,
    config: &LimeConfig,
    stream: &mut RandomStream,
) -> Result<Attribution> {
    if instance.len() != background_mean.len() {
        return Err(Error::shapes(
            "lime_tabular",
            (1, instance.len()),
            (1, background_mean.len()),
        ));
    }
    let unchanged: Vec<bool> = instance.iter().zip(background_mean).map(|(x, b)| x == b).collect();
    let seed = stream.seed();
    let fit = fit_surrogate(
        &unchanged,
        |masks| {
            let mut data = Vec::with_capacity(masks.len() * instance.len());
            for m in masks {
                data.extend(
                    m.iter()
                        .zip(instance.iter().zip(background_mean))
                        .map(|(&keep, (&x, &b))| if keep { x } else { b }),
                );
            }
            let rows = Matrix::from_vec(masks.len(), instance.len(), data)?;
            target_column(&predictor.predict_rows(&rows)?, target)
        },
        config,
        stream,
    )?;
    Ok(lime_attribution(fit, UnitMode::Tabular, target, config, seed))
}

fn lime_attribution(
    fit: SurrogateFit,
    mode: UnitMode,
    target: usize,
    config: &LimeConfig,
    seed: u64,
) -> Attribution {
    Attribution {
        method: Method::Lime,
        mode,
        target_class: target,
        weights: fit.weights,
        base_value: fit.base_value,
        prediction: fit.prediction,
        intercept: Some(fit.intercept),
        fidelity: Some(fit.fidelity),
        local_residual: Some(fit.local_residual),
        n_samples: config.n_samples,
        seed: Some(seed),
    }
}

pub const SEGMENT_GRID: usize = 8;

/// Mean colour of each of the 8×8 grid segments, row-major.
pub fn segment_means(image: &Image) -> Vec<[u8; 3]> {
    let mut out = Vec::with_capacity(SEGMENT_GRID * SEGMENT_GRID);
    for gy in 0..SEGMENT_GRID {
        let (y0, y1) = cell_span(gy, image.height());
        for gx in 0..SEGMENT_GRID {
            let (x0, x1) = cell_span(gx, image.width());
            let mut acc = [0u64; 3];
            for y in y0..y1 {
                for x in x0..x1 {
                    let p = image.pixel(x, y);
                    (0..3).for_each(|c| acc[c] += p[c] as u64);
                }
            }
            let n = ((y1 - y0) * (x1 - x0)) as f64;
            out.push(acc.map(|a| (a as f64 / n).round() as u8));
        }
    }
    out
}

/// Replaces every dropped segment by its mean colour. Segments overlap on
/// images smaller than the grid; a pixel is filled if any owning segment is
/// dropped.
pub fn mask_image(image: &Image, keep: &[bool], fills: &[[u8; 3]]) -> Image {
    let mut out = image.clone();
    for gy in 0..SEGMENT_GRID {
        let (y0, y1) = cell_span(gy, image.height());
        for gx in 0..SEGMENT_GRID {
            let unit = gy * SEGMENT_GRID + gx;
            if keep[unit] {
                continue;
            }
            let (x0, x1) = cell_span(gx, image.width());
            for y in y0..y1 {
                for x in x0..x1 {
                    out.put_pixel(x, y, fills[unit]);
                }
            }
        }
    }
    out
}

/// LIME over the 8×8 grid segments of an image, scored through the full
/// pipeline.
pub fn lime_image(
    predictor: &PipelinePredictor<'_>,
    image: &Image,
    target: usize,
    config: &LimeConfig,
    stream: &mut RandomStream,
) -> Result<Attribution> {
    predictor.validate()?;
    if image.is_empty() {
        return Err(Error::InvalidArgument("cannot explain an empty image".into()));
    }
    let fills = segment_means(image);
    let units = SEGMENT_GRID * SEGMENT_GRID;
    let unchanged: Vec<bool> = (0..units)
        .map(|u| {
            let mut keep = vec![true; units];
            keep[u] = false;
            mask_image(image, &keep, &fills) == *image
        })
        .collect();
    let seed = stream.seed();
    let fit = fit_surrogate(
        &unchanged,
        |masks| {
            let images: Vec<Image> = masks.iter().map(|m| mask_image(image, m, &fills)).collect();
            target_column(&predictor.predict_images(&images)?, target)
        },
        config,
        stream,
    )?;
    Ok(lime_attribution(fit, UnitMode::Image, target, config, seed))
}

/// Coalition values: the mean prediction over background rows with the
/// features outside each coalition taken from the background row.
fn coalition_values(
    predictor: &dyn Predictor,
    background: &Matrix,
    instance: &[f64],
    target: usize,
    coalitions: &[Vec<bool>],
) -> Result<Vec<f64>> {
    let d = instance.len();
    let nb = background.rows();
    const CHUNK: usize = 256;
    let mut values = Vec::with_capacity(coalitions.len());
    for chunk in coalitions.chunks(CHUNK) {
        let mut data = Vec::with_capacity(chunk.len() * nb * d);
        for mask in chunk {
            for b in background.iter_rows() {
                data.extend((0..d).map(|j| if mask[j] { instance[j] } else { b[j] }));
            }
        }
        let rows = Matrix::from_vec(chunk.len() * nb, d, data)?;
        let scores = target_column(&predictor.predict_rows(&rows)?, target)?;
        values.extend(scores.chunks(nb).map(|c| c.iter().sum::<f64>() / nb as f64));
    }
    Ok(values)
}

fn check_shap_inputs(background: &Matrix, instance: &[f64]) -> Result<()> {
    if background.rows() == 0 {
        return Err(Error::InvalidArgument("SHAP needs a non-empty background set".into()));
    }
    if background.cols() != instance.len() {
        return Err(Error::shapes(
            "shap",
            (1, instance.len()),
            background.shape(),
        ));
    }
    if instance.is_empty() {
        return Err(Error::InvalidArgument("SHAP on a zero-width instance".into()));
    }
    Ok(())
}

pub const EXACT_SHAP_MAX_DIM: usize = 12;

/// Shapley values by enumerating all 2^d coalitions.
pub fn shap_exact(
    predictor: &dyn Predictor,
    background: &Matrix,
    instance: &[f64],
    target: usize,
) -> Result<Attribution> {
    check_shap_inputs(background, instance)?;
    let d = instance.len();
    if d > EXACT_SHAP_MAX_DIM {
        return Err(Error::InvalidArgument(format!(
            "exact enumeration supports at most {EXACT_SHAP_MAX_DIM} features, got {d}; use kernel SHAP"
        )));
    }
    let coalitions: Vec<Vec<bool>> = (0..1usize << d)
        .map(|bits| (0..d).map(|j| bits >> j & 1 == 1).collect())
        .collect();
    let v = coalition_values(predictor, background, instance, target, &coalitions)?;
    let fact: Vec<f64> = (0..=d).scan(1.0, |acc, i| {
        if i > 0 {
            *acc *= i as f64;
        }
        Some(*acc)
    })
    .collect();
    let mut phi = vec![0.0; d];
    for (i, p) in phi.iter_mut().enumerate() {
        for s in 0..1usize << d {
            if s >> i & 1 == 1 {
                continue;
            }
            let size = s.count_ones() as usize;
            let w = fact[size] * fact[d - size - 1] / fact[d];
            *p += w * (v[s | 1 << i] - v[s]);
        }
    }
    Ok(Attribution {
        method: Method::ExactShap,
        mode: UnitMode::Tabular,
        target_class: target,
        weights: phi,
        base_value: v[0],
        prediction: v[(1 << d) - 1],
        intercept: None,
        fidelity: None,
        local_residual: None,
        n_samples: 1 << d,
        seed: None,
    })
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Kernel SHAP. When every non-trivial coalition fits in the sample budget
/// they are all enumerated with their Shapley-kernel weights (the result is
/// then exact); otherwise coalition sizes are drawn in proportion to the
/// kernel mass of each size, paired with their complements, and weighted
/// equally. Attributions are fitted by weighted least squares with
/// Σφ = f(x) − base imposed by eliminating the last feature.
pub fn shap_kernel(
    predictor: &dyn Predictor,
    background: &Matrix,
    instance: &[f64],
    target: usize,
    n_samples: usize,
    stream: &mut RandomStream,
) -> Result<Attribution> {
    check_shap_inputs(background, instance)?;
    let d = instance.len();
    if n_samples < d + 2 {
        return Err(Error::InvalidArgument(format!(
            "kernel SHAP needs at least {} samples for {d} features, got {n_samples}",
            d + 2
        )));
    }
    let seed = stream.seed();
    let ends = coalition_values(
        predictor,
        background,
        instance,
        target,
        &[vec![false; d], vec![true; d]],
    )?;
    let (base, fx) = (ends[0], ends[1]);
    let delta = fx - base;
    let attribution = |weights: Vec<f64>| Attribution {
        method: Method::KernelShap,
        mode: UnitMode::Tabular,
        target_class: target,
        weights,
        base_value: base,
        prediction: fx,
        intercept: None,
        fidelity: None,
        local_residual: None,
        n_samples,
        seed: Some(seed),
    };
    if d == 1 {
        return Ok(attribution(vec![delta]));
    }

    let enumerate_all = d < usize::BITS as usize - 1 && (1usize << d) - 2 <= n_samples;
    let (coalitions, kernel): (Vec<Vec<bool>>, Vec<f64>) = if enumerate_all {
        (1..(1usize << d) - 1)
            .map(|bits| {
                let mask: Vec<bool> = (0..d).map(|j| bits >> j & 1 == 1).collect();
                let s = bits.count_ones() as usize;
                let w = (d - 1) as f64 / (binomial(d, s) * (s * (d - s)) as f64);
                (mask, w)
            })
            .unzip()
    } else {
        let size_mass: Vec<f64> = (1..d).map(|s| 1.0 / (s * (d - s)) as f64).collect();
        let total: f64 = size_mass.iter().sum();
        let mut coalitions = Vec::with_capacity(n_samples);
        while coalitions.len() + 1 < n_samples {
            let mut u = stream.next_uniform() * total;
            let mut size = d - 1;
            for (i, m) in size_mass.iter().enumerate() {
                if u < *m {
                    size = i + 1;
                    break;
                }
                u -= m;
            }
            let mut mask = vec![false; d];
            for j in sample(stream, d, size).iter() {
                mask[j] = true;
            }
            let complement: Vec<bool> = mask.iter().map(|b| !b).collect();
            coalitions.push(mask);
            coalitions.push(complement);
        }
        let n = coalitions.len();
        (coalitions, vec![1.0; n])
    };

    let values = coalition_values(predictor, background, instance, target, &coalitions)?;
    let p = d - 1;
    let mut xtwx = Matrix::zeros(p, p);
    let mut xtwy = vec![0.0; p];
    let mut row = vec![0.0; p];
    for ((mask, &w), &v) in coalitions.iter().zip(&kernel).zip(&values) {
        let last = if mask[d - 1] { 1.0 } else { 0.0 };
        for j in 0..p {
            row[j] = (if mask[j] { 1.0 } else { 0.0 }) - last;
        }
        let y = v - base - last * delta;
        for a in 0..p {
            if row[a] == 0.0 {
                continue;
            }
            xtwy[a] += w * row[a] * y;
            for b in 0..p {
                let val = xtwx.get(a, b) + w * row[a] * row[b];
                xtwx.set(a, b, val);
            }
        }
    }
    let reduced = solve_spd(&xtwx, &xtwy).map_err(|_| {
        Error::Numeric(format!(
            "kernel SHAP system is singular with {n_samples} samples; increase the sample count"
        ))
    })?;
    let mut phi = reduced;
    let rest: f64 = phi.iter().sum();
    phi.push(delta - rest);
    Ok(attribution(phi))
}

/// Mean |weight| per unit over a set of attributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalImportance {
    /// `(unit, mean |weight|)`, descending.
    pub ranking: Vec<(usize, f64)>,
    /// The same, restricted to attributions targeting each class.
    pub per_class: BTreeMap<usize, Vec<(usize, f64)>>,
}

fn mean_abs_ranking(set: &[&Attribution]) -> Vec<(usize, f64)> {
    let units = set[0].weights.len();
    let mut sums = vec![0.0; units];
    for a in set {
        for (s, w) in sums.iter_mut().zip(&a.weights) {
            *s += w.abs();
        }
    }
    let mut ranking: Vec<(usize, f64)> = sums
        .into_iter()
        .map(|s| s / set.len() as f64)
        .enumerate()
        .collect();
    ranking.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranking
}

pub fn global_importance(attributions: &[Attribution]) -> Result<GlobalImportance> {
    let first = attributions
        .first()
        .ok_or_else(|| Error::InvalidArgument("no attributions to aggregate".into()))?;
    if attributions.iter().any(|a| a.weights.len() != first.weights.len()) {
        return Err(Error::InvalidArgument(
            "attributions cover different unit counts".into(),
        ));
    }
    let all: Vec<&Attribution> = attributions.iter().collect();
    let mut by_class: BTreeMap<usize, Vec<&Attribution>> = BTreeMap::new();
    for a in attributions {
        by_class.entry(a.target_class).or_default().push(a);
    }
    Ok(GlobalImportance {
        ranking: mean_abs_ranking(&all),
        per_class: by_class
            .into_iter()
            .map(|(c, set)| (c, mean_abs_ranking(&set)))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear(coefs: Vec<f64>) -> FnPredictor<impl Fn(&[f64]) -> Vec<f64> + Sync> {
        FnPredictor(move |x: &[f64]| vec![x.iter().zip(&coefs).map(|(a, b)| a * b).sum()])
    }

    #[test]
    fn exact_shap_of_linear_model() {
        let f = linear(vec![2.0, 3.0]);
        let bg = Matrix::zeros(1, 2);
        let a = shap_exact(&f, &bg, &[1.0, 1.0], 0).unwrap();
        assert!((a.weights[0] - 2.0).abs() < 1e-12);
        assert!((a.weights[1] - 3.0).abs() < 1e-12);
        assert_eq!(a.base_value, 0.0);
    }

    #[test]
    fn kernel_shap_of_linear_model() {
        let f = linear(vec![2.0, 3.0]);
        let bg = Matrix::zeros(1, 2);
        let a = shap_kernel(&f, &bg, &[1.0, 1.0], 0, 200, &mut RandomStream::new(1)).unwrap();
        assert!((a.weights[0] - 2.0).abs() < 1e-9);
        assert!((a.weights[1] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn constant_predictor_has_no_attribution() {
        let f = FnPredictor(|_: &[f64]| vec![0.25]);
        let bg = Matrix::from_rows(&[vec![0.0, 1.0, 2.0], vec![1.0, 1.0, 1.0]]).unwrap();
        let a = shap_kernel(&f, &bg, &[5.0, 5.0, 5.0], 0, 50, &mut RandomStream::new(2)).unwrap();
        assert!(a.weights.iter().all(|w| w.abs() < 1e-12));
        assert_eq!(a.base_value, 0.25);
    }

    #[test]
    fn single_feature_takes_full_difference() {
        let f = FnPredictor(|x: &[f64]| vec![x[0] * x[0]]);
        let bg = Matrix::from_rows(&[vec![1.0]]).unwrap();
        let a = shap_exact(&f, &bg, &[3.0], 0).unwrap();
        assert!((a.weights[0] - 8.0).abs() < 1e-12);
        let k = shap_kernel(&f, &bg, &[3.0], 0, 10, &mut RandomStream::new(0)).unwrap();
        assert!((k.weights[0] - 8.0).abs() < 1e-12);
    }

    #[test]
    fn shap_rejects_bad_inputs() {
        let f = linear(vec![1.0; 13]);
        let bg = Matrix::zeros(1, 13);
        assert!(shap_exact(&f, &bg, &[1.0; 13], 0).is_err());
        assert!(shap_kernel(&f, &bg, &[1.0; 13], 0, 14, &mut RandomStream::new(0)).is_err());
        assert!(shap_kernel(&f, &Matrix::zeros(0, 13), &[1.0; 13], 0, 100, &mut RandomStream::new(0)).is_err());
    }

    #[test]
    fn sampled_kernel_shap_keeps_efficiency() {
        let f = FnPredictor(|x: &[f64]| vec![(x[0] * x[3]).tanh() + x.iter().map(|v| v.sin()).sum::<f64>()]);
        let d = 14;
        let bg = Matrix::from_rows(&[vec![0.1; d], vec![-0.3; d]]).unwrap();
        let x: Vec<f64> = (0..d).map(|i| i as f64 / 5.0).collect();
        let a = shap_kernel(&f, &bg, &x, 0, 300, &mut RandomStream::new(4)).unwrap();
        let total: f64 = a.weights.iter().sum();
        assert!((total + a.base_value - a.prediction).abs() < 1e-9);
    }

    #[test]
    fn lime_recovers_linear_coefficients() {
        let coefs = vec![0.5, -1.0, 2.0, 0.25];
        let f = linear(coefs.clone());
        let a = lime_tabular(
            &f,
            &[1.0; 4],
            &[0.0; 4],
            0,
            &LimeConfig::default(),
            &mut RandomStream::new(3),
        )
        .unwrap();
        for (w, c) in a.weights.iter().zip(&coefs) {
            assert!((w - c).abs() <= 0.05 * c.abs(), "{w} vs {c}");
        }
        assert_eq!(a.ranked()[0].0, 2);
    }

    #[test]
    fn lime_requires_enough_samples() {
        let f = linear(vec![1.0; 4]);
        let cfg = LimeConfig {
            n_samples: 5,
            ..LimeConfig::default()
        };
        assert!(lime_tabular(&f, &[1.0; 4], &[0.0; 4], 0, &cfg, &mut RandomStream::new(0)).is_err());
    }

    #[test]
    fn global_ranking_orders_by_mean_magnitude() {
        let mk = |w: Vec<f64>, c| Attribution {
            method: Method::KernelShap,
            mode: UnitMode::Tabular,
            target_class: c,
            weights: w,
            base_value: 0.0,
            prediction: 0.0,
            intercept: None,
            fidelity: None,
            local_residual: None,
            n_samples: 0,
            seed: None,
        };
        let set = vec![mk(vec![0.1, -0.5, 0.2], 0), mk(vec![0.3, 0.1, -0.2], 1)];
        let g = global_importance(&set).unwrap();
        let order: Vec<usize> = g.ranking.iter().map(|r| r.0).collect();
        assert_eq!(order, vec![1, 0, 2]);
        assert_eq!(g.per_class[&1][0].0, 0);
        let doubled: Vec<Attribution> = set.iter().chain(&set).cloned().collect();
        let again = global_importance(&doubled).unwrap().ranking;
        for (a, b) in again.iter().zip(&g.ranking) {
            assert_eq!(a.0, b.0);
            assert!((a.1 - b.1).abs() < 1e-15);
        }
    }
}
