//! Procedural test scenes.

use std::collections::HashMap;

use gradvision::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Smooth random intensity field on the plane with blobs at several
/// scales, mapped into `(0, 1)`.
#[derive(Debug, Clone)]
pub struct Texture {
    /// `(x, y, sigma, amplitude)`
    blobs: Vec<[f64; 4]>,
    extent: f64,
    /// Blob indices per `CELL`-sized grid cell, covering each blob's ±4σ box.
    cells: HashMap<(i64, i64), Vec<usize>>,
}

const CELL: f64 = 16.0;

fn cell_of(v: f64) -> i64 {
    (v / CELL).floor() as i64
}

impl Texture {
    /// Blobs scattered over `[0, extent]²` (with a margin), with the
    /// smallest scale about `feature` units.
    pub fn new(seed: u64, extent: f64, feature: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blobs = Vec::new();
        for (octave, density) in [(32.0, 0.5), (16.0, 1.5), (8.0, 6.0), (4.0, 24.0), (2.0, 90.0), (1.0, 300.0)] {
            let sigma = feature * octave;
            let count = (density * (extent / (feature * 32.0)).powi(2)).ceil() as usize;
            for _ in 0..count {
                let pad = 3.0 * sigma;
                blobs.push([
                    -pad + rng.random::<f64>() * (extent + 2.0 * pad),
                    -pad + rng.random::<f64>() * (extent + 2.0 * pad),
                    sigma * (0.7 + 0.6 * rng.random::<f64>()),
                    (rng.random::<f64>() * 2.0 - 1.0) * (0.6 + 0.4 * (octave / 8.0).min(1.0)),
                ]);
            }
        }
        let mut cells: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, b) in blobs.iter().enumerate() {
            let r = 4.0 * b[2];
            for cy in cell_of(b[1] - r)..=cell_of(b[1] + r) {
                for cx in cell_of(b[0] - r)..=cell_of(b[0] + r) {
                    cells.entry((cx, cy)).or_default().push(i);
                }
            }
        }
        Self { blobs, extent, cells }
    }

    pub fn extent(&self) -> f64 {
        self.extent
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        let Some(ids) = self.cells.get(&(cell_of(x), cell_of(y))) else {
            return 0.5;
        };
        let s: f64 = ids
            .iter()
            .map(|&i| &self.blobs[i])
            .filter(|b| (x - b[0]).abs() < 4.0 * b[2] && (y - b[1]).abs() < 4.0 * b[2])
            .map(|&[bx, by, sg, a]| a * (-((x - bx).powi(2) + (y - by).powi(2)) / (2.0 * sg * sg)).exp())
            .sum();
        0.5 + 0.45 * s.tanh()
    }

    /// Renders `channels` planes of size `h×w`, sampling pixel `(u, v)` at
    /// `at(u, v)`; channels apply small distinct gains.
    pub fn render(&self, channels: usize, h: usize, w: usize, at: impl Fn(f64, f64) -> (f64, f64)) -> Tensor<f64> {
        let plane: Vec<f64> = (0..h * w)
            .map(|i| {
                let (x, y) = at((i % w) as f64, (i / w) as f64);
                self.eval(x, y)
            })
            .collect();
        Tensor::from_fn(&[1, channels, h, w], |i| {
            let gain = 1.0 - 0.15 * i[1] as f64;
            0.5 + gain * (plane[i[2] * w + i[3]] - 0.5)
        })
    }
}

/// `1×1×h×w` texture image in pixel units.
pub fn textured_image(seed: u64, h: usize, w: usize, feature: f64) -> Tensor<f64> {
    Texture::new(seed, h.max(w) as f64, feature).render(1, h, w, |u, v| (u, v))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let a = textured_image(3, 40, 50, 2.0);
        assert_eq!(a, textured_image(3, 40, 50, 2.0));
        assert_ne!(a, textured_image(4, 40, 50, 2.0));
        assert!(a.min_value() > 0.0 && a.max_value() < 1.0);
        let spread = a.max_value() - a.min_value();
        assert!(spread > 0.3, "{spread}");
    }
}
