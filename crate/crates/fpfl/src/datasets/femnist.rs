//! Unfair digit dataset: three writing-style groups (black pen, blue pen,
//! chalk on blackboard) assigned per user, 45% / 45% / 10% by lexicographic
//! user id. Includes a seeded synthetic digit generator so the pipeline
//! runs without any external image source.
//!
//! Source images are 28x28 grayscale brightness maps: 1.0 is white paper,
//! 0.0 is full ink.

use std::collections::BTreeMap;

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use super::{FederatedSplit, ImageDataset, UserShard};
use crate::error::{Error, Result};

pub const IMG: usize = 28;
pub const GROUP_NAMES: [&str; 3] = ["black_pen", "blue_pen", "chalk"];

#[derive(Debug, Clone)]
pub struct DigitImage {
    /// Row-major 28x28 brightness values in [0,1].
    pub pixels: Vec<f64>,
    pub label: u32,
}

#[derive(Debug, Clone, Default)]
pub struct UserDigits {
    pub train: Vec<DigitImage>,
    pub test: Vec<DigitImage>,
}

/// Per-user digit images keyed by user id (iteration order is the
/// lexicographic order that drives the group assignment).
#[derive(Debug, Clone, Default)]
pub struct SourceDigits {
    pub users: BTreeMap<String, UserDigits>,
}

/// How many users fall into each style group: first 45%, next 45%, rest.
pub fn group_boundaries(user_count: usize) -> (usize, usize, usize) {
    let black = (user_count as f64 * 0.45).floor() as usize;
    let blue = black;
    (black, blue, user_count - black - blue)
}

// ---------------------------------------------------------------------------
// Synthetic digit generator
// ---------------------------------------------------------------------------

type Point = (f64, f64);

/// Stroke templates on the unit canvas, one polyline list per digit.
fn digit_strokes(digit: u32) -> Vec<Vec<Point>> {
    fn circle(cx: f64, cy: f64, rx: f64, ry: f64, segments: usize) -> Vec<Point> {
        (0..=segments)
            .map(|i| {
                let t = i as f64 / segments as f64 * std::f64::consts::TAU;
                (cx + rx * t.cos(), cy + ry * t.sin())
            })
            .collect()
    }
    match digit {
        0 => vec![circle(0.5, 0.5, 0.20, 0.30, 14)],
        1 => vec![
            vec![(0.40, 0.30), (0.54, 0.18)],
            vec![(0.54, 0.18), (0.54, 0.82)],
        ],
        2 => vec![
            vec![(0.32, 0.34), (0.38, 0.22), (0.55, 0.18), (0.66, 0.28), (0.64, 0.42)],
            vec![(0.64, 0.42), (0.34, 0.80)],
            vec![(0.34, 0.80), (0.70, 0.80)],
        ],
        3 => vec![
            vec![(0.34, 0.24), (0.50, 0.18), (0.64, 0.28), (0.52, 0.46)],
            vec![(0.52, 0.46), (0.68, 0.56), (0.64, 0.74), (0.46, 0.81), (0.33, 0.72)],
        ],
        4 => vec![
            vec![(0.58, 0.18), (0.30, 0.58), (0.74, 0.58)],
            vec![(0.62, 0.38), (0.62, 0.82)],
        ],
        5 => vec![
            vec![(0.66, 0.20), (0.37, 0.20), (0.35, 0.46)],
            vec![(0.35, 0.46), (0.56, 0.42), (0.67, 0.55), (0.62, 0.74), (0.42, 0.81), (0.32, 0.71)],
        ],
        6 => vec![
            vec![(0.62, 0.19), (0.46, 0.30), (0.37, 0.50), (0.37, 0.66)],
            circle(0.50, 0.65, 0.145, 0.155, 10),
        ],
        7 => vec![
            vec![(0.32, 0.20), (0.69, 0.20)],
            vec![(0.69, 0.20), (0.44, 0.82)],
        ],
        8 => vec![
            circle(0.50, 0.335, 0.135, 0.145, 10),
            circle(0.50, 0.645, 0.165, 0.165, 10),
        ],
        9 => vec![
            circle(0.51, 0.36, 0.15, 0.15, 10),
            vec![(0.655, 0.38), (0.63, 0.60), (0.55, 0.81)],
        ],
        _ => unreachable!("digits are 0..=9"),
    }
}

fn dist_to_segment(p: Point, a: Point, b: Point) -> f64 {
    let (px, py) = p;
    let (ax, ay) = a;
    let (bx, by) = b;
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (ax + t * dx, ay + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

struct WriterStyle {
    thickness: f64,
    slant: f64,
    scale: f64,
}

fn render_digit<R: Rng>(digit: u32, style: &WriterStyle, rng: &mut R) -> Vec<f64> {
    let theta: f64 = rng.random_range(-0.18..0.18);
    let scale = style.scale * rng.random_range(0.88..1.08);
    let slant = style.slant + rng.random_range(-0.05..0.05);
    let (tx, ty) = (rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05));
    let (sin, cos) = theta.sin_cos();

    let transform = |(x, y): Point| -> Point {
        let (x, y) = (x - 0.5, y - 0.5);
        let x = x + slant * y; // shear
        let (x, y) = (x * scale, y * scale);
        let (x, y) = (x * cos - y * sin, x * sin + y * cos);
        (x + 0.5 + tx, y + 0.5 + ty)
    };

    let strokes: Vec<Vec<Point>> = digit_strokes(digit)
        .into_iter()
        .map(|line| {
            line.into_iter()
                .map(|p| {
                    let (x, y) = transform(p);
                    (
                        x + rng.random_range(-0.012..0.012),
                        y + rng.random_range(-0.012..0.012),
                    )
                })
                .collect()
        })
        .collect();

    let pen_std = 0.6 * style.thickness;
    let mut pixels = vec![1.0; IMG * IMG];
    for py in 0..IMG {
        for px in 0..IMG {
            let point = (
                (px as f64 + 0.5) / IMG as f64,
                (py as f64 + 0.5) / IMG as f64,
            );
            let mut ink: f64 = 0.0;
            for line in &strokes {
                for seg in line.windows(2) {
                    let d = dist_to_segment(point, seg[0], seg[1]);
                    ink = ink.max((-d * d / (2.0 * pen_std * pen_std)).exp());
                }
            }
            pixels[py * IMG + px] = 1.0 - ink.min(1.0);
        }
    }
    pixels
}

/// Seeded synthetic per-user digit source. Train counts are Poisson
/// distributed (zero redrawn) around `mean_train_per_user`.
pub fn synthetic_source(
    user_count: usize,
    mean_train_per_user: f64,
    test_per_user: usize,
    seed: u64,
) -> Result<SourceDigits> {
    if user_count == 0 {
        return Err(Error::InvalidConfig("need at least one user".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let poisson = Poisson::new(mean_train_per_user)
        .map_err(|e| Error::InvalidConfig(format!("poisson: {e}")))?;
    let mut users = BTreeMap::new();
    for u in 0..user_count {
        let style = WriterStyle {
            thickness: rng.random_range(0.035..0.060),
            slant: rng.random_range(-0.20..0.20),
            scale: rng.random_range(0.85..1.05),
        };
        let mut n_train = 0usize;
        while n_train == 0 {
            n_train = poisson.sample(&mut rng) as usize;
        }
        let mut digits = UserDigits::default();
        for _ in 0..n_train {
            let label = rng.random_range(0..10u32);
            digits.train.push(DigitImage {
                pixels: render_digit(label, &style, &mut rng),
                label,
            });
        }
        for _ in 0..test_per_user {
            let label = rng.random_range(0..10u32);
            digits.test.push(DigitImage {
                pixels: render_digit(label, &style, &mut rng),
                label,
            });
        }
        users.insert(format!("f{u:05}"), digits);
    }
    Ok(SourceDigits { users })
}

// ---------------------------------------------------------------------------
// Style transforms
// ---------------------------------------------------------------------------

/// Separable Gaussian blur with reflect padding, kernel truncated at four
/// standard deviations.
pub fn gaussian_blur(pixels: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    for j in -radius..=radius {
        kernel.push((-((j * j) as f64) / (2.0 * sigma * sigma)).exp());
    }
    let sum: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= sum;
    }
    let reflect = |i: isize, n: isize| -> usize {
        let mut i = i;
        loop {
            if i < 0 {
                i = -i - 1;
            } else if i >= n {
                i = 2 * n - 1 - i;
            } else {
                return i as usize;
            }
        }
    };
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, j) in (-radius..=radius).enumerate() {
                acc += kernel[ki] * pixels[y * w + reflect(x as isize + j, w as isize)];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, j) in (-radius..=radius).enumerate() {
                acc += kernel[ki] * tmp[reflect(y as isize + j, h as isize) * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn rotate90(pixels: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            // counter-clockwise quarter turn
            out[y * n + x] = pixels[x * n + (n - 1 - y)];
        }
    }
    out
}

/// Black pen: the grayscale image replicated over three channels.
fn black_pen_rgb(pixels: &[f64]) -> [Vec<f64>; 3] {
    [pixels.to_vec(), pixels.to_vec(), pixels.to_vec()]
}

/// Blue pen: strokes recolored toward RGB (0.1, 0.1, 0.9), interpolated by
/// ink intensity, on a white background.
fn blue_pen_rgb(pixels: &[f64]) -> [Vec<f64>; 3] {
    let mut r = Vec::with_capacity(pixels.len());
    let mut g = Vec::with_capacity(pixels.len());
    let mut b = Vec::with_capacity(pixels.len());
    for &v in pixels {
        let ink = 1.0 - v;
        r.push(1.0 - 0.9 * ink);
        g.push(1.0 - 0.9 * ink);
        b.push(1.0 - 0.1 * ink);
    }
    [r, g, b]
}

/// Chalk on a blackboard: invert to white-on-black, add Gaussian-blurred
/// noise (kernel std 2), blur the result (kernel std 1), rotate a quarter
/// turn, and clamp to [0,1].
fn chalk_rgb<R: Rng>(pixels: &[f64], rng: &mut R) -> [Vec<f64>; 3] {
    let inverted: Vec<f64> = pixels.iter().map(|&v| 1.0 - v).collect();
    let noise: Vec<f64> = (0..pixels.len())
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let blurred_noise = gaussian_blur(&noise, IMG, IMG, 2.0);
    let mixed: Vec<f64> = inverted
        .iter()
        .zip(&blurred_noise)
        .map(|(a, b)| a + b)
        .collect();
    let softened = gaussian_blur(&mixed, IMG, IMG, 1.0);
    let rotated = rotate90(&softened, IMG);
    let clamped: Vec<f64> = rotated.iter().map(|&v| v.clamp(0.0, 1.0)).collect();
    [clamped.clone(), clamped.clone(), clamped]
}

// ---------------------------------------------------------------------------
// Assembly
// ---------------------------------------------------------------------------

pub struct UnfairFemnist {
    pub train: ImageDataset,
    pub test: ImageDataset,
    pub split: FederatedSplit,
    /// Users per style group.
    pub group_user_counts: [usize; 3],
}

/// Apply the per-group style transforms and assemble train/test tensors in
/// canonical (user id, sample index) order.
pub fn build_unfair_femnist(source: &SourceDigits, seed: u64) -> Result<UnfairFemnist> {
    let user_count = source.users.len();
    if user_count == 0 {
        return Err(Error::MissingData(
            "no source users; generate or supply a per-user digit source".into(),
        ));
    }
    if source.users.values().any(|u| u.train.is_empty()) {
        return Err(Error::InvalidConfig("every user needs train samples".into()));
    }
    let (n_black, n_blue, _) = group_boundaries(user_count);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    let n_train: usize = source.users.values().map(|u| u.train.len()).sum();
    let n_test: usize = source.users.values().map(|u| u.test.len()).sum();
    let mut train_images = Array4::zeros((n_train, 3, IMG, IMG));
    let mut train_labels = Vec::with_capacity(n_train);
    let mut train_groups = Vec::with_capacity(n_train);
    let mut test_images = Array4::zeros((n_test, 3, IMG, IMG));
    let mut test_labels = Vec::with_capacity(n_test);
    let mut test_groups = Vec::with_capacity(n_test);
    let mut shards = Vec::with_capacity(user_count);
    let mut group_user_counts = [0usize; 3];

    let write = |images: &mut Array4<f64>, at: usize, rgb: &[Vec<f64>; 3]| {
        for (c, plane) in rgb.iter().enumerate() {
            for y in 0..IMG {
                for x in 0..IMG {
                    images[[at, c, y, x]] = plane[y * IMG + x];
                }
            }
        }
    };

    let mut train_at = 0usize;
    let mut test_at = 0usize;
    for (u, (id, digits)) in source.users.iter().enumerate() {
        let group: u32 = if u < n_black {
            0
        } else if u < n_black + n_blue {
            1
        } else {
            2
        };
        group_user_counts[group as usize] += 1;
        let mut indices = Vec::with_capacity(digits.train.len());
        for img in &digits.train {
            let rgb = match group {
                0 => black_pen_rgb(&img.pixels),
                1 => blue_pen_rgb(&img.pixels),
                _ => chalk_rgb(&img.pixels, &mut rng),
            };
            write(&mut train_images, train_at, &rgb);
            train_labels.push(img.label);
            train_groups.push(group);
            indices.push(train_at as u32);
            train_at += 1;
        }
        for img in &digits.test {
            let rgb = match group {
                0 => black_pen_rgb(&img.pixels),
                1 => blue_pen_rgb(&img.pixels),
                _ => chalk_rgb(&img.pixels, &mut rng),
            };
            write(&mut test_images, test_at, &rgb);
            test_labels.push(img.label);
            test_groups.push(group);
            test_at += 1;
        }
        shards.push(UserShard {
            id: id.clone(),
            indices,
        });
    }

    Ok(UnfairFemnist {
        train: ImageDataset {
            images: train_images,
            labels: train_labels,
            groups: train_groups,
        },
        test: ImageDataset {
            images: test_images,
            labels: test_labels,
            groups: test_groups,
        },
        split: FederatedSplit { shards },
        group_user_counts,
    })
}
