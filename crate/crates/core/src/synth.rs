//! Procedural SEM-like images with pixel-exact defect masks, and the
//! N-way K-shot episode sampler built on top of them.

use std::f32::consts::PI;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::text::DEFAULT_CLASSES;

pub const IMAGE_SIZE: usize = 64;
pub const NOISE_STD: f32 = 0.02;
pub const GOOD_LABEL: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackgroundStyle {
    Grating,
    Grid,
    Dots,
    Plain,
}

impl BackgroundStyle {
    pub const ALL: [Self; 4] = [Self::Grating, Self::Grid, Self::Dots, Self::Plain];
}

impl FromStr for BackgroundStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grating" => Ok(Self::Grating),
            "grid" => Ok(Self::Grid),
            "dots" => Ok(Self::Dots),
            "plain" => Ok(Self::Plain),
            other => Err(Error::Config(format!("unknown background style `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DefectKind {
    Bridge,
    CopperResidue,
    Hole,
    Infilm,
    Particle,
    Scratch,
}

impl DefectKind {
    pub const ALL: [Self; 6] = [
        Self::Bridge,
        Self::CopperResidue,
        Self::Hole,
        Self::Infilm,
        Self::Particle,
        Self::Scratch,
    ];

    /// Index into [`DEFAULT_CLASSES`].
    pub fn label(self) -> usize {
        Self::ALL.iter().position(|&k| k == self).unwrap() + 1
    }

    pub fn name(self) -> &'static str {
        DEFAULT_CLASSES[self.label()]
    }

    pub fn from_label(label: usize) -> Option<Self> {
        label.checked_sub(1).and_then(|i| Self::ALL.get(i).copied())
    }
}

/// A rendered background and the parameters that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Background {
    pub image: Tensor,
    pub style: BackgroundStyle,
    /// Stripe period in pixels for gratings, lattice period for grids/dots.
    pub period: usize,
    /// Grating phase in pixels.
    pub phase: f32,
    /// Stripes vary along x (vertical lines) when true.
    pub vertical: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SemSample {
    pub image: Tensor,
    pub mask: Tensor,
    pub label: usize,
    pub seed: u64,
}

impl SemSample {
    pub fn defect_pixels(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m > 0.5).count()
    }
}

/// splitmix64 finalizer; used to derive per-sample seeds.
pub fn mix_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        ^ stream.wrapping_mul(0xD6E8_FEB8_6659_FD93)
        ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, stream, 0))
}

/// Smoothed square wave in `[0, 1]` with the given period and phase.
fn line_profile(u: f32, period: f32, phase: f32) -> f32 {
    let s = (2.0 * PI * (u + phase) / period).sin();
    0.5 + 0.5 * (3.0 * s).tanh() / 3.0f32.tanh()
}

/// Renders a background of `size × size` pixels.
pub fn render_background(seed: u64, style: BackgroundStyle, size: usize) -> Background {
    let mut rng = rng_for(seed, 1);
    let period = match style {
        BackgroundStyle::Grating => rng.random_range(4..=16),
        BackgroundStyle::Grid | BackgroundStyle::Dots => rng.random_range(8..=16),
        BackgroundStyle::Plain => 0,
    };
    let phase = if period > 0 {
        rng.random_range(0.0..period as f32)
    } else {
        0.0
    };
    let phase2 = if period > 0 {
        rng.random_range(0.0..period as f32)
    } else {
        0.0
    };
    let vertical = rng.random_bool(0.5);
    let p = period as f32;
    let mut image = Tensor::zeros(&[size, size]);
    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f32, y as f32);
            let v = match style {
                BackgroundStyle::Plain => 0.5,
                BackgroundStyle::Grating => {
                    let u = if vertical { xf } else { yf };
                    0.3 + 0.4 * line_profile(u, p, phase)
                }
                BackgroundStyle::Grid => {
                    0.3 + 0.4 * line_profile(xf, p, phase).max(line_profile(yf, p, phase2))
                }
                BackgroundStyle::Dots => {
                    let dx = (xf + phase).rem_euclid(p) - p / 2.0;
                    let dy = (yf + phase2).rem_euclid(p) - p / 2.0;
                    let r = p / 4.0;
                    let inside = (dx * dx + dy * dy).sqrt() <= r;
                    if inside {
                        0.7
                    } else {
                        0.35
                    }
                }
            };
            image.row_mut(y)[x] = v;
        }
    }
    let noise = Normal::new(0.0f32, NOISE_STD).unwrap();
    for v in image.data_mut() {
        *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
    }
    Background {
        image,
        style,
        period,
        phase,
        vertical,
    }
}

/// `size = 64` background as a bare tensor.
pub fn generate_background(seed: u64, style: BackgroundStyle) -> Tensor {
    render_background(seed, style, IMAGE_SIZE).image
}

struct Canvas {
    size: usize,
    image: Tensor,
    mask: Tensor,
}

impl Canvas {
    fn new(bg: &Tensor) -> Self {
        Self {
            size: bg.shape()[0],
            image: bg.clone(),
            mask: Tensor::zeros(bg.shape()),
        }
    }

    /// Marks every pixel selected by `inside` and rewrites its intensity.
    fn paint(
        &mut self,
        inside: impl Fn(f32, f32) -> bool,
        mut value: impl FnMut(f32, f32, f32) -> f32,
    ) {
        for y in 0..self.size {
            for x in 0..self.size {
                let (xf, yf) = (x as f32, y as f32);
                if inside(xf, yf) {
                    let bg = self.image.row(y)[x];
                    self.image.row_mut(y)[x] = value(xf, yf, bg).clamp(0.0, 1.0);
                    self.mask.row_mut(y)[x] = 1.0;
                }
            }
        }
    }
}

fn dist_to_segment(px: f32, py: f32, a: (f32, f32), b: (f32, f32)) -> f32 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

/// Patch size the generator sizes defects for.
pub const REFERENCE_PATCH: usize = 8;
const PLACEMENT_ATTEMPTS: usize = 32;

/// True when some `patch × patch` tile is at least half covered by `mask`.
pub fn covers_a_patch(mask: &Tensor, patch: usize) -> bool {
    let (h, w) = (mask.rows(), mask.cols());
    (0..h / patch).any(|gy| {
        (0..w / patch).any(|gx| {
            let count: usize = (0..patch)
                .map(|y| {
                    mask.row(gy * patch + y)[gx * patch..(gx + 1) * patch]
                        .iter()
                        .filter(|&&m| m > 0.5)
                        .count()
                })
                .sum();
            2 * count >= patch * patch
        })
    })
}

/// Renders one defect of `kind` onto `bg`. The mask is exactly the set of
/// pixels the defect touched. Placement is redrawn until the defect covers
/// at least one reference patch by majority, within a fixed attempt budget.
pub fn generate_defect(kind: DefectKind, bg: &Background, seed: u64) -> SemSample {
    let mut rng = rng_for(seed, 2);
    let mut canvas = render_defect(kind, bg, &mut rng);
    for _ in 1..PLACEMENT_ATTEMPTS {
        if covers_a_patch(&canvas.mask, REFERENCE_PATCH) {
            break;
        }
        canvas = render_defect(kind, bg, &mut rng);
    }
    SemSample {
        image: canvas.image,
        mask: canvas.mask,
        label: kind.label(),
        seed,
    }
}

fn render_defect(kind: DefectKind, bg: &Background, rng: &mut ChaCha8Rng) -> Canvas {
    let size = bg.image.shape()[0];
    let s = size as f32;
    let mut canvas = Canvas::new(&bg.image);
    let noise = Normal::new(0.0f32, 0.03).unwrap();
    match kind {
        DefectKind::Particle => {
            let r: f32 = rng.random_range(10.0..14.0);
            let (cx, cy) = center(rng, s, r + 2.0);
            canvas.paint(
                |x, y| (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
                |x, y, bg| {
                    let d2 = ((x - cx).powi(2) + (y - cy).powi(2)) / (r * r);
                    bg + 0.5 - 0.15 * d2
                },
            );
        }
        DefectKind::Hole => {
            let r = rng.random_range(10..=14usize);
            let cx = rng.random_range(r + 2..size - r - 2) as f32;
            let cy = rng.random_range(r + 2..size - r - 2) as f32;
            let r = r as f32;
            canvas.paint(
                |x, y| (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
                |_, _, bg| bg * 0.2,
            );
        }
        DefectKind::Scratch => {
            let len: f32 = rng.random_range(36.0..52.0);
            let horizontal = rng.random_bool(0.5);
            let fish_scale = rng.random_bool(0.5);
            let (cx, cy) = center(rng, s, len / 2.0 + 5.0);
            let tilt = if fish_scale {
                0.0
            } else {
                rng.random_range(-3.0f32..3.0).to_radians()
            };
            let (ux, uy) = if horizontal {
                (tilt.cos(), tilt.sin())
            } else {
                (tilt.sin(), tilt.cos())
            };
            let a = (cx - ux * len / 2.0, cy - uy * len / 2.0);
            let b = (cx + ux * len / 2.0, cy + uy * len / 2.0);
            if fish_scale {
                // chain of overlapping ellipses along the axis
                let scales: Vec<(f32, f32)> = (0..)
                    .map(|i| i as f32 * 6.0)
                    .take_while(|&t| t <= len)
                    .map(|t| (a.0 + ux * t, a.1 + uy * t))
                    .collect();
                canvas.paint(
                    |x, y| {
                        scales.iter().any(|&(ex, ey)| {
                            let along = (x - ex) * ux + (y - ey) * uy;
                            let across = -(x - ex) * uy + (y - ey) * ux;
                            (along / 4.5).powi(2) + (across / 5.5).powi(2) <= 1.0
                        })
                    },
                    |_, _, bg| bg - 0.35,
                );
            } else {
                canvas.paint(
                    |x, y| dist_to_segment(x, y, a, b) <= 5.0,
                    |_, _, bg| bg - 0.35,
                );
            }
        }
        DefectKind::Bridge => {
            let p = bg.period.max(4) as f32;
            let (gap_len, thickness) = ((p + 4.0).max(20.0), 14.0f32);
            let (mut cx, mut cy) = center(rng, s, gap_len / 2.0 + 3.0);
            if matches!(bg.style, BackgroundStyle::Grating) {
                // snap onto the middle of a dark gap between two lines
                let u = if bg.vertical { cx } else { cy };
                let k = ((u + bg.phase) / p - 0.75).round();
                let mut snapped = (k + 0.75) * p - bg.phase;
                while snapped < gap_len / 2.0 + 2.0 {
                    snapped += p;
                }
                while snapped > s - gap_len / 2.0 - 2.0 {
                    snapped -= p;
                }
                if bg.vertical {
                    cx = snapped;
                } else {
                    cy = snapped;
                }
            }
            let (hw, hh) = if bg.vertical || !matches!(bg.style, BackgroundStyle::Grating) {
                (gap_len / 2.0, thickness / 2.0)
            } else {
                (thickness / 2.0, gap_len / 2.0)
            };
            canvas.paint(
                |x, y| (x - cx).abs() <= hw && (y - cy).abs() <= hh,
                |_, _, _| 0.9,
            );
        }
        DefectKind::CopperResidue => {
            let (cx, cy) = center(rng, s, 14.0);
            let blobs: Vec<(f32, f32, f32)> = (0..rng.random_range(4..=7))
                .map(|_| {
                    (
                        cx + rng.random_range(-6.0..6.0),
                        cy + rng.random_range(-6.0..6.0),
                        rng.random_range(4.0..7.5),
                    )
                })
                .collect();
            canvas.paint(
                |x, y| {
                    blobs
                        .iter()
                        .any(|&(bx, by, r)| (x - bx).powi(2) + (y - by).powi(2) <= r * r)
                },
                |_, _, bg| bg + 0.28 + noise.sample(rng),
            );
        }
        DefectKind::Infilm => {
            let (rx, ry): (f32, f32) = (rng.random_range(10.0..14.0), rng.random_range(10.0..14.0));
            let (cx, cy) = center(rng, s, rx.max(ry) + 2.0);
            canvas.paint(
                |x, y| ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2) <= 1.0,
                |x, y, bg| {
                    let d2 = ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2);
                    bg + 0.14 * (1.0 - 0.5 * d2)
                },
            );
        }
    }
    canvas
}

fn center(rng: &mut ChaCha8Rng, size: f32, margin: f32) -> (f32, f32) {
    (
        rng.random_range(margin..size - margin).floor(),
        rng.random_range(margin..size - margin).floor(),
    )
}

/// Generator options.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SynthConfig {
    pub image_size: usize,
    /// Adds bright text-like strips along the top and bottom rows.
    pub text_banner: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: IMAGE_SIZE,
            text_banner: false,
        }
    }
}

fn add_banner(image: &mut Tensor, rng: &mut ChaCha8Rng) {
    let size = image.shape()[0];
    let band = (size / 12).max(2);
    for rows in [0..band, size - band..size] {
        for y in rows.clone() {
            image.row_mut(y).iter_mut().for_each(|v| *v = 0.08);
        }
        let mut x = 2;
        while x + 3 < size {
            let w = rng.random_range(1..=3);
            for y in rows.start + 1..rows.end.saturating_sub(1).max(rows.start + 1) {
                for xx in x..(x + w).min(size) {
                    image.row_mut(y)[xx] = 0.92;
                }
            }
            x += w + rng.random_range(1..=3);
        }
    }
}

/// Generates one sample of class `label` (0 = good).
pub fn generate_sample(label: usize, seed: u64, cfg: SynthConfig) -> Result<SemSample> {
    let kind =
        if label == GOOD_LABEL {
            None
        } else {
            Some(DefectKind::from_label(label).ok_or_else(|| {
                Error::Config(format!("class index {label} is not a known defect"))
            })?)
        };
    if cfg.image_size < IMAGE_SIZE {
        return Err(Error::Config(format!(
            "synthetic images need at least {IMAGE_SIZE} px, got {}",
            cfg.image_size
        )));
    }
    let mut rng = rng_for(seed, 3);
    let style = match kind {
        Some(DefectKind::Bridge) => BackgroundStyle::Grating,
        _ => BackgroundStyle::ALL[rng.random_range(0..4)],
    };
    let mut bg = render_background(seed, style, cfg.image_size);
    if cfg.text_banner {
        add_banner(&mut bg.image, &mut rng);
    }
    Ok(match kind {
        None => SemSample {
            mask: Tensor::zeros(bg.image.shape()),
            image: bg.image,
            label: GOOD_LABEL,
            seed,
        },
        Some(k) => generate_defect(k, &bg, seed),
    })
}

/// Support set with `k_shot` samples per class plus a query set.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub classes: Vec<String>,
    pub support: Vec<SemSample>,
    pub query: Vec<SemSample>,
}

const SUPPORT_STREAM: u64 = 0x5u64;
const QUERY_STREAM: u64 = 0x9u64;

/// Samples an N-way K-shot episode over the first `n_way` benchmark
/// classes (`good` always included). Query labels cycle through the
/// classes so every class appears.
pub fn sample_episode(
    n_way: usize,
    k_shot: usize,
    m_query: usize,
    seed: u64,
    cfg: SynthConfig,
) -> Result<Episode> {
    if !(2..=DEFAULT_CLASSES.len()).contains(&n_way) {
        return Err(Error::Config(format!("n-way {n_way} must be in 2..=7")));
    }
    if k_shot == 0 {
        return Err(Error::Config("k-shot must be ≥ 1".into()));
    }
    if m_query < 10 * k_shot {
        return Err(Error::Config(format!(
            "query size {m_query} must be at least 10 × k-shot ({})",
            10 * k_shot
        )));
    }
    let classes = DEFAULT_CLASSES[..n_way]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut support = Vec::with_capacity(n_way * k_shot);
    for label in 0..n_way {
        for shot in 0..k_shot {
            let s = mix_seed(seed, SUPPORT_STREAM, (label * k_shot + shot) as u64);
            support.push(generate_sample(label, s, cfg)?);
        }
    }
    let query = (0..m_query)
        .map(|i| generate_sample(i % n_way, mix_seed(seed, QUERY_STREAM, i as u64), cfg))
        .collect::<Result<_>>()?;
    Ok(Episode {
        classes,
        support,
        query,
    })
}
