//! Procedural two-phase microscopy look-alikes with exact instance masks.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{Image, InstanceMask};
use crate::scalar::Scalar;

/// Appearance and geometry of one synthetic family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextureFamily {
    pub background: f64,
    pub background_noise: f64,
    pub cell_mean: f64,
    /// Amplitude of the periodic pattern inside cells.
    pub cell_texture: f64,
    pub cell_noise: f64,
    /// Brighter centre, darker rim.
    pub shading: f64,
    pub radius: (f64, f64),
    pub cells: (usize, usize),
}

impl TextureFamily {
    /// Dark background, bright and smooth cells.
    pub fn smooth_bright() -> Self {
        Self {
            background: 0.1,
            background_noise: 0.0,
            cell_mean: 0.85,
            cell_texture: 0.0,
            cell_noise: 0.0,
            shading: 0.08,
            radius: (3.0, 5.0),
            cells: (2, 4),
        }
    }

    /// Grey background, dimmer cells with a strong periodic texture.
    pub fn textured_dim() -> Self {
        Self {
            background: 0.3,
            background_noise: 0.0,
            cell_mean: 0.55,
            cell_texture: 0.12,
            cell_noise: 0.0,
            shading: 0.0,
            radius: (3.0, 5.0),
            cells: (2, 4),
        }
    }

    /// Same look with every radius multiplied by `factor`.
    pub fn scaled(mut self, factor: f64) -> Self {
        self.radius = (self.radius.0 * factor, self.radius.1 * factor);
        self
    }
}

/// Ellipse placement of one cell.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Cell {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
}

impl Cell {
    /// Normalised radial coordinate; inside when `< 1`.
    fn rho(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.angle.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        ((u / self.rx).powi(2) + (v / self.ry).powi(2)).sqrt()
    }
}

fn place_cells(family: &TextureFamily, size: usize, rng: &mut ChaCha8Rng) -> Vec<Cell> {
    let n = rng.random_range(family.cells.0..=family.cells.1);
    let mut cells: Vec<Cell> = Vec::new();
    for _ in 0..n * 30 {
        if cells.len() == n {
            break;
        }
        let r = rng.random_range(family.radius.0..=family.radius.1);
        let aspect = rng.random_range(0.75..=1.0);
        let margin = r + 1.0;
        if 2.0 * margin >= size as f64 {
            break;
        }
        let cy = rng.random_range(margin..size as f64 - margin);
        let cx = rng.random_range(margin..size as f64 - margin);
        let cand = Cell {
            cy,
            cx,
            ry: r,
            rx: r * aspect,
            angle: rng.random_range(0.0..std::f64::consts::PI),
        };
        let clear = cells.iter().all(|c| {
            let d = ((c.cy - cy).powi(2) + (c.cx - cx).powi(2)).sqrt();
            d > c.ry + r + 2.0
        });
        if clear {
            cells.push(cand);
        }
    }
    cells
}

/// One image of `family` and its label mask.
pub fn generate_sample<T: Scalar>(family: &TextureFamily, size: usize, seed: u64) -> Result<(Image<T>, InstanceMask)> {
    if size < 8 {
        return Err(Error::InvalidArgument(format!("synthetic images need size >= 8, got {size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells = place_cells(family, size, &mut rng);
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let freq: f64 = rng.random_range(1.6..2.2);
    let mut labels = Array2::<u32>::zeros((size, size));
    let mut pixels = Array3::<T>::zeros((size, size, 1));
    for y in 0..size {
        for x in 0..size {
            let (yc, xc) = (y as f64 + 0.5, x as f64 + 0.5);
            let noise: f64 = rng.sample(StandardNormal);
            let hit = cells.iter().enumerate().find_map(|(i, c)| {
                let rho = c.rho(yc, xc);
                (rho < 1.0).then_some((i, rho))
            });
            let v = match hit {
                Some((i, rho)) => {
                    labels[[y, x]] = i as u32 + 1;
                    let pattern = (freq * xc + phase).sin() * (freq * yc - phase).cos();
                    family.cell_mean
                        + family.shading * (1.0 - 2.0 * rho * rho)
                        + family.cell_texture * pattern
                        + family.cell_noise * noise
                }
                None => family.background + family.background_noise * noise,
            };
            pixels[[y, x, 0]] = T::of(v.clamp(0.0, 1.0));
        }
    }
    Ok((Image::new(pixels)?, InstanceMask::new(labels)?))
}

/// `count` samples with seeds derived from `seed`.
pub fn generate_family<T: Scalar>(
    family: &TextureFamily,
    size: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<(Image<T>, InstanceMask)>> {
    (0..count)
        .map(|i| generate_sample(family, size, seed.wrapping_mul(1_000_003).wrapping_add(i as u64)))
        .collect()
}
