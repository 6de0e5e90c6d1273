//! Procedural images of colored shapes on smooth backgrounds.
//!
//! Labels are `shape * 4 + color` with shapes `[circle, square]` and colors
//! `[red, green, blue, yellow]`, so label 0 is a red circle and label 4 a
//! red square.

use draft_lab_core::rng::{KeyedRng, Purpose};
use draft_lab_core::{Real, Tensor};
use rand::Rng;

pub const NUM_CLASSES: usize = 8;
pub const SIZE: usize = 24;
pub const SHAPES: [&str; 2] = ["circle", "square"];
pub const COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];
const RGB: [[f64; 3]; 4] = [[0.9, 0.15, 0.15], [0.15, 0.8, 0.2], [0.15, 0.25, 0.9], [0.9, 0.85, 0.15]];
/// Supersampling factor per axis for coverage.
const AA: usize = 4;
pub const MIN_AREA: f64 = 0.05;
pub const MAX_AREA: f64 = 0.5;

pub fn label(shape: usize, color: usize) -> usize {
    shape * 4 + color
}

pub fn class_name(label: usize) -> String {
    format!("{} {}", COLORS[label % 4], SHAPES[label / 4])
}

/// Index into [`SHAPES`] and [`COLORS`].
pub fn parts(label: usize) -> (usize, usize) {
    (label / 4, label % 4)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    /// `[3, 24, 24]` in `[0, 1]`.
    pub image: Tensor<f64>,
    /// `None` for background-only images.
    pub label: Option<usize>,
    /// Foreground coverage as a fraction of the image.
    pub area: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub seed: u64,
    pub items: Vec<Item>,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn labels(&self) -> Vec<Option<usize>> {
        self.items.iter().map(|i| i.label).collect()
    }

    /// Images in the model's `[-1, 1]` range.
    pub fn model_inputs<R: Real>(&self) -> Vec<Tensor<R>> {
        self.items.iter().map(|i| i.image.map(|v| 2.0 * v - 1.0).cast()).collect()
    }

    /// Images cast to the working precision, still in `[0, 1]`.
    pub fn images<R: Real>(&self) -> Vec<Tensor<R>> {
        self.items.iter().map(|i| i.image.cast()).collect()
    }

    /// Concatenated little-endian f64 bytes of every image and label.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for it in &self.items {
            out.extend_from_slice(&(it.label.map_or(-1, |l| l as i64)).to_le_bytes());
            for v in it.image.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

/// Scorer target: the foreground area fraction mapped onto `[1, 10]`.
pub fn area_score(area: f64) -> f64 {
    1.0 + 9.0 * ((area - MIN_AREA) / (MAX_AREA - MIN_AREA)).clamp(0.0, 1.0)
}

fn background(rng: &mut impl Rng) -> impl Fn(f64, f64) -> [f64; 3] {
    let mut c0 = [0.0; 3];
    let mut c1 = [0.0; 3];
    for k in 0..3 {
        c0[k] = rng.random_range(0.3..0.7);
        c1[k] = rng.random_range(0.3..0.7);
    }
    let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (theta.cos(), theta.sin());
    move |x, y| {
        // Position along the gradient direction, in [0, 1].
        let u = (((x - 0.5) * dx + (y - 0.5) * dy) / std::f64::consts::SQRT_2 + 0.5).clamp(0.0, 1.0);
        [0, 1, 2].map(|k| c0[k] + (c1[k] - c0[k]) * u)
    }
}

fn render(rng: &mut impl Rng, fg: Option<(usize, usize)>) -> Item {
    let n = SIZE;
    let bg = background(rng);
    let mut img = Tensor::zeros(&[3, n, n]);
    let mut covered = 0.0;
    let shape = fg.map(|(shape, color)| {
        // Target area within the allowed band, minus an anti-aliasing margin.
        let area = rng.random_range(0.07..0.45) * (n * n) as f64;
        let half = if shape == 0 {
            (area / std::f64::consts::PI).sqrt()
        } else {
            area.sqrt() / 2.0
        };
        let cx = rng.random_range(half + 0.5..n as f64 - half - 0.5);
        let cy = rng.random_range(half + 0.5..n as f64 - half - 0.5);
        (shape, color, half, cx, cy)
    });
    for y in 0..n {
        for x in 0..n {
            let mut cov = 0.0;
            if let Some((shape, _, half, cx, cy)) = shape {
                for sy in 0..AA {
                    for sx in 0..AA {
                        let px = x as f64 + (sx as f64 + 0.5) / AA as f64;
                        let py = y as f64 + (sy as f64 + 0.5) / AA as f64;
                        let inside = if shape == 0 {
                            (px - cx).powi(2) + (py - cy).powi(2) <= half * half
                        } else {
                            (px - cx).abs() <= half && (py - cy).abs() <= half
                        };
                        if inside {
                            cov += 1.0;
                        }
                    }
                }
                cov /= (AA * AA) as f64;
            }
            covered += cov;
            let b = bg((x as f64 + 0.5) / n as f64, (y as f64 + 0.5) / n as f64);
            let f = shape.map_or([0.0; 3], |s| RGB[s.1]);
            for k in 0..3 {
                img.data_mut()[(k * n + y) * n + x] = b[k] * (1.0 - cov) + f[k] * cov;
            }
        }
    }
    Item {
        image: img,
        label: fg.map(|(s, c)| label(s, c)),
        area: covered / (n * n) as f64,
    }
}

/// `n` labelled images, class `i % 8` for item `i`.
pub fn gen_dataset(seed: u64, n: usize) -> SyntheticDataset {
    let rng = KeyedRng::new(seed);
    let items = (0..n)
        .map(|i| {
            let mut r = rng.stream(Purpose::Dataset, 0, i as u64);
            render(&mut r, Some(parts(i % NUM_CLASSES)))
        })
        .collect();
    SyntheticDataset { seed, items }
}

/// Labelled images mixed with roughly `bg_fraction` background-only ones,
/// for training the area scorer.
pub fn gen_scorer_dataset(seed: u64, n: usize, bg_fraction: f64) -> SyntheticDataset {
    let rng = KeyedRng::new(seed);
    let items = (0..n)
        .map(|i| {
            let mut r = rng.stream(Purpose::Dataset, 1, i as u64);
            if r.random_bool(bg_fraction) {
                render(&mut r, None)
            } else {
                render(&mut r, Some(parts(i % NUM_CLASSES)))
            }
        })
        .collect();
    SyntheticDataset { seed, items }
}
