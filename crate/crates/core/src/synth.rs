//! Synthetic labelled data: gaussian blobs around orthogonal class means,
//! optionally rendered as small images whose colour and stripe texture
//! encode the class.

use crate::error::{Error, Result};
use crate::features::{FeatureTable, Image};
use crate::numeric::{dot, Matrix, RandomStream};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub separation: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub table: FeatureTable,
    /// `classes × dim`, unit rows; class means are `separation` times these.
    pub directions: Matrix,
}

/// Class names zero-padded so that sorted order is index order.
pub fn class_names(classes: usize) -> Vec<String> {
    let width = (classes.saturating_sub(1)).to_string().len();
    (0..classes).map(|c| format!("class_{c:0width$}")).collect()
}

/// Unit class directions. With `dim ≥ classes` they are orthonormal (Gram–
/// Schmidt on gaussian draws). With `dim = classes − 1` there is no room for
/// that, so the vertices of a centred regular simplex are used instead.
fn class_directions(classes: usize, dim: usize, stream: &mut RandomStream) -> Matrix {
    let count = classes.min(dim);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| stream.next_gaussian()).collect();
        for _ in 0..2 {
            for b in &basis {
                let p = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    if classes <= dim {
        return Matrix::from_rows(&basis).expect("finite directions");
    }
    // Simplex: centre `classes` orthonormal points in a classes-dim space and
    // express them in the (classes − 1)-dim orthonormal basis drawn above.
    let c = classes as f64;
    let scale = (c / (c - 1.0)).sqrt();
    let mut rows = Vec::with_capacity(classes);
    // Helmert-style coordinates of e_i − 1/c in the sum-zero subspace.
    for i in 0..classes {
        let mut coords = vec![0.0; classes - 1];
        for (j, coord) in coords.iter_mut().enumerate() {
            let m = (j + 1) as f64;
            let norm = (m * (m + 1.0)).sqrt();
            *coord = if i <= j {
                1.0 / norm
            } else if i == j + 1 {
                -m / norm
            } else {
                0.0
            };
        }
        let mut row = vec![0.0; dim];
        for (coord, b) in coords.iter().zip(&basis) {
            row.iter_mut().zip(b).for_each(|(r, x)| *r += scale * coord * x);
        }
        rows.push(row);
    }
    Matrix::from_rows(&rows).expect("finite directions")
}

/// `per_class` samples of `mean_c + N(0, I)` per class, class-major order.
pub fn synth_dataset(config: &SynthConfig) -> Result<SynthData> {
    let SynthConfig {
        classes,
        dim,
        per_class,
        separation,
        seed,
    } = *config;
    if classes < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 classes, got {classes}")));
    }
    if dim + 1 < classes {
        return Err(Error::InvalidArgument(format!(
            "dimension {dim} cannot hold {classes} separated classes (need at least {})",
            classes - 1
        )));
    }
    if per_class == 0 {
        return Err(Error::InvalidArgument("per-class sample count must be positive".into()));
    }
    if !separation.is_finite() || separation < 0.0 {
        return Err(Error::InvalidArgument(format!("bad separation {separation}")));
    }
    let mut stream = RandomStream::new(seed);
    let directions = class_directions(classes, dim, &mut stream);
    let names = class_names(classes);
    let mut ids = Vec::with_capacity(classes * per_class);
    let mut labels = Vec::with_capacity(classes * per_class);
    let mut data = Vec::with_capacity(classes * per_class * dim);
    for c in 0..classes {
        let dir = directions.row(c);
        for i in 0..per_class {
            ids.push(format!("{}_{i:04}", names[c]));
            labels.push(c);
            data.extend(dir.iter().map(|d| separation * d + stream.next_gaussian()));
        }
    }
    let features = Matrix::from_vec(ids.len(), dim, data)?;
    Ok(SynthData {
        table: FeatureTable::new(ids, labels, names, features)?,
        directions,
    })
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as usize % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Draws one sample as a `size × size` image. The soft class assignment
/// `w = softmax(directions · x)` mixes per-class hues, stripe orientations
/// and stripe frequencies; the off-class noise shifts stripe phase and
/// brightness so that samples of one class still differ.
pub fn render_sample(x: &[f64], directions: &Matrix, size: usize) -> Result<Image> {
    if x.len() != directions.cols() {
        return Err(Error::shapes("render_sample", (1, x.len()), directions.shape()));
    }
    let classes = directions.rows();
    let proj: Vec<f64> = directions.iter_rows().map(|d| dot(d, x)).collect();
    let top = proj.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = proj.iter().map(|p| (p - top).exp()).collect();
    let z: f64 = exp.iter().sum();
    let w: Vec<f64> = exp.iter().map(|e| e / z).collect();

    let mut colour = [0.0; 3];
    let (mut cos2, mut sin2, mut freq) = (0.0, 0.0, 0.0);
    for (c, wc) in w.iter().enumerate() {
        let rgb = hsv_to_rgb(c as f64 / classes as f64, 0.85, 0.9);
        colour.iter_mut().zip(rgb).for_each(|(a, b)| *a += wc * b);
        let angle = std::f64::consts::PI * c as f64 / classes as f64;
        cos2 += wc * (2.0 * angle).cos();
        sin2 += wc * (2.0 * angle).sin();
        freq += wc * (2.0 + (c % 3) as f64);
    }
    let angle = 0.5 * sin2.atan2(cos2);

    // Jitter from the component of x orthogonal to the class directions.
    let mut residual = x.to_vec();
    for (d, p) in directions.iter_rows().zip(&proj) {
        residual.iter_mut().zip(d).for_each(|(r, di)| *r -= p * di);
    }
    let half = residual.len() / 2;
    let phase = residual[..half].iter().sum::<f64>() * 0.7;
    let brightness = 1.0 + 0.08 * (residual[half..].iter().sum::<f64>() * 0.2).tanh();

    let mut img = Image::filled(size, size, [0, 0, 0]);
    let (ca, sa) = (angle.cos(), angle.sin());
    for py in 0..size {
        for px in 0..size {
            let u = px as f64 / size as f64;
            let v = py as f64 / size as f64;
            let g = 0.5 + 0.5 * (std::f64::consts::TAU * freq * (u * ca + v * sa) + phase).sin();
            let shade = brightness * (0.55 + 0.45 * g);
            let rgb = colour.map(|ch| (255.0 * (ch * shade).clamp(0.0, 1.0)).round() as u8);
            img.put_pixel(px, py, rgb);
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn directions_are_orthonormal() {
        let d = class_directions(5, 8, &mut RandomStream::new(1));
        for i in 0..5 {
            for j in 0..5 {
                let g = dot(d.row(i), d.row(j));
                assert!((g - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn simplex_when_dimension_is_tight() {
        let d = class_directions(4, 3, &mut RandomStream::new(2));
        for i in 0..4 {
            assert!((dot(d.row(i), d.row(i)) - 1.0).abs() < 1e-12);
            for j in (i + 1)..4 {
                assert!((dot(d.row(i), d.row(j)) + 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_too_few_dimensions() {
        let cfg = SynthConfig {
            classes: 5,
            dim: 3,
            per_class: 2,
            separation: 1.0,
            seed: 0,
        };
        assert!(synth_dataset(&cfg).is_err());
    }

    #[test]
    fn same_seed_same_data() {
        let cfg = SynthConfig {
            classes: 3,
            dim: 4,
            per_class: 5,
            separation: 2.0,
            seed: 9,
        };
        assert_eq!(synth_dataset(&cfg).unwrap(), synth_dataset(&cfg).unwrap());
        let other = SynthConfig { seed: 10, ..cfg };
        assert_ne!(synth_dataset(&cfg).unwrap(), synth_dataset(&other).unwrap());
    }

    #[test]
    fn names_sort_in_index_order() {
        let names = class_names(12);
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(names, sorted);
    }
}
