use super::components::connected_components;
use super::Mask;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Tensor};

/// Produces unbounded per-pixel saliency logits for a `1×H×W` image.
pub trait SaliencyBackend: Send + Sync {
    fn score(&self, image: &Tensor) -> Result<Tensor>;
}

impl<F> SaliencyBackend for F
where
    F: Fn(&Tensor) -> Result<Tensor> + Send + Sync,
{
    fn score(&self, image: &Tensor) -> Result<Tensor> {
        self(image)
    }
}

/// `1[sigmoid(backend(image)) > tau]`.
pub fn coarse_mask(image: &Tensor, backend: &dyn SaliencyBackend, tau: f64) -> Result<Mask> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Config(format!("tau must lie in (0, 1), got {tau}")));
    }
    let scores = backend.score(image)?;
    if scores.shape() != image.shape() {
        return Err(Error::shape(
            "saliency backend output",
            format!("{:?}", image.shape()),
            format!("{:?}", scores.shape()),
        ));
    }
    let (_, h, w) = image.dims3()?;
    Ok(Mask::from_fn(h, w, |y, x| {
        sigmoid(scores.data()[y * w + x]) > tau
    }))
}

/// Training-free lung saliency heuristic.
///
/// Works on a grid of `cell×cell` blocks: intensities are percentile
/// normalized and block averaged, the two largest bright components above an
/// Otsu threshold form the lung template, and a second Otsu split inside the
/// template separates opacities from healthy tissue. Template cells near the
/// lung border are penalized. Every pixel of a block receives the block logit.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineSaliency {
    pub cell: usize,
    pub gain: f64,
    pub interior_weight: f64,
    pub interior_depth: usize,
    pub outside_logit: f64,
}

impl Default for BaselineSaliency {
    fn default() -> Self {
        BaselineSaliency {
            cell: 4,
            gain: 8.0,
            interior_weight: 1.0,
            interior_depth: 2,
            outside_logit: -8.0,
        }
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Otsu threshold of values in `[0, 1]` using a 256-bin histogram.
fn otsu(values: &[f64]) -> f64 {
    let mut hist = [0usize; 256];
    for &v in values {
        hist[(v.clamp(0.0, 1.0) * 255.0).round() as usize] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &c)| i as f64 * c as f64)
        .sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_t) = (-1.0, 0usize);
    for (t, &c) in hist.iter().enumerate() {
        w0 += c as f64;
        sum0 += t as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best {
            best = between;
            best_t = t;
        }
    }
    (best_t as f64 + 0.5) / 255.0
}

impl BaselineSaliency {
    fn grid_logits(&self, image: &Tensor) -> Result<(Vec<f64>, usize, usize)> {
        let (_, h, w) = image.dims3()?;
        let cell = self.cell.max(1);
        let (gh, gw) = (h.div_ceil(cell), w.div_ceil(cell));
        let mut sorted = image.data().to_vec();
        sorted.sort_by(f64::total_cmp);
        let (lo, hi) = (percentile(&sorted, 0.02), percentile(&sorted, 0.98));
        if hi - lo < 1e-9 {
            return Ok((vec![self.outside_logit; gh * gw], gh, gw));
        }
        let mut grid = vec![0.0; gh * gw];
        let mut counts = vec![0usize; gh * gw];
        for y in 0..h {
            for x in 0..w {
                let v = ((image.data()[y * w + x] - lo) / (hi - lo)).clamp(0.0, 1.0);
                let g = (y / cell) * gw + x / cell;
                grid[g] += v;
                counts[g] += 1;
            }
        }
        for (g, c) in grid.iter_mut().zip(&counts) {
            *g /= *c as f64;
        }

        let t1 = otsu(&grid);
        let bright = Mask::from_fn(gh, gw, |y, x| grid[y * gw + x] > t1);
        let comps = connected_components(&bright, false);
        let keep: Vec<u32> = comps.by_size().into_iter().take(2).collect();
        let template: Vec<bool> = comps.labels.iter().map(|l| keep.contains(l)).collect();

        let inside: Vec<f64> = grid
            .iter()
            .zip(&template)
            .filter_map(|(v, &t)| t.then_some(*v))
            .collect();
        if inside.is_empty() {
            return Ok((vec![self.outside_logit; gh * gw], gh, gw));
        }
        let t2 = otsu(&inside);
        let (mn, mx) = inside
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
                (a.min(v), b.max(v))
            });
        let spread = (mx - mn).max(1e-6);
        let depth = chessboard_depth(&template, gh, gw);
        let d = self.interior_depth.max(1) as f64;

        let logits = (0..gh * gw)
            .map(|g| {
                if !template[g] {
                    return self.outside_logit;
                }
                let interior = (depth[g] as f64).min(d) / d;
                self.gain * (grid[g] - t2) / spread + self.interior_weight * (interior - 1.0)
            })
            .collect();
        Ok((logits, gh, gw))
    }
}

/// Chessboard distance of each template cell to the nearest non-template
/// cell or grid edge; 1 on the border.
fn chessboard_depth(template: &[bool], h: usize, w: usize) -> Vec<usize> {
    let mut depth = vec![0usize; h * w];
    let mut frontier = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !template[i] {
                continue;
            }
            let edge = y == 0 || x == 0 || y == h - 1 || x == w - 1;
            let touches = edge
                || (-1..=1).any(|dy: isize| {
                    (-1..=1).any(|dx: isize| {
                        !template[(y as isize + dy) as usize * w + (x as isize + dx) as usize]
                    })
                });
            if touches {
                depth[i] = 1;
                frontier.push(i);
            }
        }
    }
    let mut level = 1;
    while !frontier.is_empty() {
        let mut next = Vec::new();
        for &i in &frontier {
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if template[j] && depth[j] == 0 {
                        depth[j] = level + 1;
                        next.push(j);
                    }
                }
            }
        }
        frontier = next;
        level += 1;
    }
    depth
}

impl SaliencyBackend for BaselineSaliency {
    fn score(&self, image: &Tensor) -> Result<Tensor> {
        let (c, h, w) = image.dims3()?;
        if c != 1 {
            return Err(Error::shape("saliency input channels", 1, c));
        }
        let (grid, _, gw) = self.grid_logits(image)?;
        let cell = self.cell.max(1);
        Ok(Tensor::from_fn(&[1, h, w], |i| {
            let (y, x) = (i / w, i % w);
            grid[(y / cell) * gw + x / cell]
        }))
    }
}

/// Wraps a backend and adds a smooth random logit field, standing in for
/// the idiosyncratic errors of an external saliency model.
///
/// The field is bilinearly interpolated from `grid×grid` cells of
/// `N(0, sigma²)` values and seeded by a hash of the image, so scores stay a
/// deterministic function of the input while their errors are not
/// predictable from image content. `sigma = 0` is the inner backend exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbedSaliency<B> {
    pub inner: B,
    pub sigma: f64,
    pub grid: usize,
    pub seed: u64,
}

/// FNV-1a over the image's bit patterns; stable across platforms and
/// toolchains, unlike `DefaultHasher`.
fn image_hash(image: &Tensor, seed: u64) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for v in image.data() {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

impl<B: SaliencyBackend> SaliencyBackend for PerturbedSaliency<B> {
    fn score(&self, image: &Tensor) -> Result<Tensor> {
        let mut scores = self.inner.score(image)?;
        if self.sigma == 0.0 {
            return Ok(scores);
        }
        let (_, h, w) = scores.dims3()?;
        let g = self.grid.max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(image_hash(image, self.seed));
        let nodes: Vec<f64> = (0..(g + 1) * (g + 1))
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                self.sigma * z
            })
            .collect();
        let at = |y: usize, x: usize| nodes[y * (g + 1) + x];
        for (i, s) in scores.data_mut().iter_mut().enumerate() {
            let fy = (i / w) as f64 * g as f64 / h as f64;
            let fx = (i % w) as f64 * g as f64 / w as f64;
            let (y0, x0) = (fy as usize, fx as usize);
            let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
            *s += at(y0, x0) * (1.0 - ty) * (1.0 - tx)
                + at(y0 + 1, x0) * ty * (1.0 - tx)
                + at(y0, x0 + 1) * (1.0 - ty) * tx
                + at(y0 + 1, x0 + 1) * ty * tx;
        }
        Ok(scores)
    }
}
