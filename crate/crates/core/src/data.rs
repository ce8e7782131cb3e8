//! Bouncing Gaussian blobs on a small grid, and pixel metrics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::container::Container;
use crate::error::{invalid, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct BouncingBlobConfig {
    pub grid: usize,
    /// Stamp width in pixels (odd).
    pub blob: usize,
    pub blobs: usize,
    pub speed_min: f64,
    pub speed_max: f64,
    pub seq_len: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub seed: u64,
}

impl Default for BouncingBlobConfig {
    fn default() -> Self {
        Self {
            grid: 16,
            blob: 3,
            blobs: 2,
            speed_min: 0.5,
            speed_max: 1.5,
            seq_len: 40,
            train_samples: 256,
            test_samples: 32,
            seed: 0,
        }
    }
}

/// Generated sequences in model layout `[L, N, H, W, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Tensor<f64>,
    pub test: Tensor<f64>,
}

const TRAIN_STREAM: u64 = 0;
const TEST_STREAM: u64 = 1;

/// Reflect `x` into `[0, m]`: a triangle wave of period `2m`.
pub fn reflect(x: f64, m: f64) -> f64 {
    if m <= 0.0 {
        return 0.0;
    }
    let r = x.rem_euclid(2.0 * m);
    if r > m {
        2.0 * m - r
    } else {
        r
    }
}

impl BouncingBlobConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blob == 0 || self.blob % 2 == 0 {
            return Err(invalid(format!("blob width must be odd, got {}", self.blob)));
        }
        if self.blob > self.grid {
            return Err(invalid(format!("blob width {} exceeds grid {}", self.blob, self.grid)));
        }
        if !(0.0 <= self.speed_min && self.speed_min <= self.speed_max) {
            return Err(invalid(format!("bad speed range [{}, {}]", self.speed_min, self.speed_max)));
        }
        Ok(())
    }

    /// The stamp: a Gaussian bump with unit peak.
    pub fn stamp(&self) -> Vec<f64> {
        let r = (self.blob / 2) as f64;
        let sigma = (r * 0.75).max(0.5);
        (0..self.blob * self.blob)
            .map(|i| {
                let (dy, dx) = ((i / self.blob) as f64 - r, (i % self.blob) as f64 - r);
                (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
            })
            .collect()
    }

    /// Top-left stamp corner of each blob over time: `[L][blobs] (row, col)`.
    pub fn trajectory(&self, start: &[(f64, f64)], velocity: &[(f64, f64)]) -> Vec<Vec<(f64, f64)>> {
        let m = (self.grid - self.blob) as f64;
        (0..self.seq_len)
            .map(|t| {
                start
                    .iter()
                    .zip(velocity)
                    .map(|(&(r, c), &(vr, vc))| (reflect(r + vr * t as f64, m), reflect(c + vc * t as f64, m)))
                    .collect()
            })
            .collect()
    }

    /// Render frames `[L, H, W]` for given corner positions with bilinear splats.
    pub fn render(&self, positions: &[Vec<(f64, f64)>]) -> Vec<f64> {
        let (g, k) = (self.grid, self.blob);
        let stamp = self.stamp();
        let mut out = vec![0.0; positions.len() * g * g];
        for (t, blobs) in positions.iter().enumerate() {
            let frame = &mut out[t * g * g..(t + 1) * g * g];
            for &(r, c) in blobs {
                let (r0, c0) = (r.floor(), c.floor());
                let (fr, fc) = (r - r0, c - c0);
                let (r0, c0) = (r0 as usize, c0 as usize);
                for (dr, wr) in [(0, 1.0 - fr), (1, fr)] {
                    for (dc, wc) in [(0, 1.0 - fc), (1, fc)] {
                        let wgt = wr * wc;
                        if wgt == 0.0 {
                            continue;
                        }
                        for i in 0..k {
                            for j in 0..k {
                                let (y, x) = (r0 + dr + i, c0 + dc + j);
                                if y < g && x < g {
                                    frame[y * g + x] += wgt * stamp[i * k + j];
                                }
                            }
                        }
                    }
                }
            }
            for v in frame.iter_mut() {
                *v = v.min(1.0);
            }
        }
        out
    }

    /// One sample `[L, H, W]` drawn from stream `stream`, index `index`.
    pub fn sample(&self, stream: u64, index: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream((stream << 40) | index);
        let m = (self.grid - self.blob) as f64;
        let mut start = Vec::with_capacity(self.blobs);
        let mut vel = Vec::with_capacity(self.blobs);
        for _ in 0..self.blobs {
            start.push((rng.gen_range(0.0..=m), rng.gen_range(0.0..=m)));
            let speed = if self.speed_max > self.speed_min { rng.gen_range(self.speed_min..self.speed_max) } else { self.speed_min };
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            vel.push((speed * angle.sin(), speed * angle.cos()));
        }
        self.render(&self.trajectory(&start, &vel))
    }

    fn split(&self, stream: u64, count: usize) -> Result<Tensor<f64>> {
        let (l, g) = (self.seq_len, self.grid);
        let samples: Vec<Vec<f64>> = (0..count as u64).into_par_iter().map(|i| self.sample(stream, i)).collect();
        // [N, L, H, W] → [L, N, H, W, 1]
        let frame = g * g;
        let mut data = vec![0.0; l * count * frame];
        for (n, s) in samples.iter().enumerate() {
            for t in 0..l {
                data[(t * count + n) * frame..(t * count + n + 1) * frame].copy_from_slice(&s[t * frame..(t + 1) * frame]);
            }
        }
        Tensor::new(vec![l, count, g, g, 1], data)
    }

    pub fn generate(&self) -> Result<Dataset> {
        self.validate()?;
        Ok(Dataset { train: self.split(TRAIN_STREAM, self.train_samples)?, test: self.split(TEST_STREAM, self.test_samples)? })
    }

    pub fn to_container(&self, c: &mut Container) {
        c.push_scalar("manifest.grid", self.grid as f64);
        c.push_scalar("manifest.blob", self.blob as f64);
        c.push_scalar("manifest.blobs", self.blobs as f64);
        c.push_scalar("manifest.speed_min", self.speed_min);
        c.push_scalar("manifest.speed_max", self.speed_max);
        c.push_scalar("manifest.seq_len", self.seq_len as f64);
        c.push_scalar("manifest.train_samples", self.train_samples as f64);
        c.push_scalar("manifest.test_samples", self.test_samples as f64);
        c.push_scalar("manifest.seed", self.seed as f64);
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let n = |k: &str| -> Result<usize> { Ok(c.scalar(&format!("manifest.{k}"))? as usize) };
        let cfg = Self {
            grid: n("grid")?,
            blob: n("blob")?,
            blobs: n("blobs")?,
            speed_min: c.scalar("manifest.speed_min")?,
            speed_max: c.scalar("manifest.speed_max")?,
            seq_len: n("seq_len")?,
            train_samples: n("train_samples")?,
            test_samples: n("test_samples")?,
            seed: n("seed")? as u64,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl Dataset {
    pub fn to_container(&self, cfg: &BouncingBlobConfig) -> Container {
        let mut c = Container::new();
        cfg.to_container(&mut c);
        c.push_tensor("data.train", &self.train);
        c.push_tensor("data.test", &self.test);
        c
    }
}

/// Select samples `idx` from `[L, N, ...]`, converting precision.
pub fn gather<T: Real>(seqs: &Tensor<f64>, idx: &[usize]) -> Result<Tensor<T>> {
    let s = seqs.shape();
    let (l, n) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    let mut data = Vec::with_capacity(l * idx.len() * inner);
    for t in 0..l {
        for &i in idx {
            if i >= n {
                return Err(invalid(format!("sample {i} out of {n}")));
            }
            data.extend(seqs.data()[(t * n + i) * inner..(t * n + i + 1) * inner].iter().map(|&v| T::of(v)));
        }
    }
    let mut shape = s.to_vec();
    shape[1] = idx.len();
    Tensor::new(shape, data)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub mse: f64,
    pub psnr: f64,
}

pub const PSNR_CAP: f64 = 99.0;

/// Mean squared error and PSNR (peak 1, capped at 99 dB).
pub fn metrics<T: Real>(pred: &[T], truth: &[T]) -> Metrics {
    assert_eq!(pred.len(), truth.len(), "metric inputs differ in length");
    let mse = if pred.is_empty() {
        0.0
    } else {
        pred.iter().zip(truth).map(|(&a, &b)| (a.as_f64() - b.as_f64()).powi(2)).sum::<f64>() / pred.len() as f64
    };
    let psnr = if mse == 0.0 { PSNR_CAP } else { (10.0 * (1.0 / mse).log10()).min(PSNR_CAP) };
    Metrics { mse, psnr }
}
