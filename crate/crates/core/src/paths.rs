//! Brownian ensembles on a uniform grid and the cross-sectional estimator of
//! conditional means given the common noise.
//!
//! Every increment stream is addressed by `(master seed, role, p, k, i)`: the
//! seed keys a ChaCha8 generator and the remaining fields are packed into its
//! 64-bit stream id, so a stream can be regenerated on its own and the result
//! never depends on generation order or thread count.
//!
//! Layout is path-major: `dw0[p*J + j]` and `dw[((p*J + j)*K + k)*M + i]`.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Default ceiling on ensemble memory.
pub const DEFAULT_CAP_BYTES: u64 = 2 << 30;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    pub horizon: f64,
    pub steps: usize,
    pub dt: f64,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) || steps == 0 {
            return Err(Error::Structure("time grid needs T > 0 and at least one step".into()));
        }
        Ok(Self { horizon, steps, dt: horizon / steps as f64 })
    }

    /// Node `t_j`; the last node is exactly `T`.
    #[inline]
    pub fn t(&self, j: usize) -> f64 {
        if j >= self.steps {
            self.horizon
        } else {
            j as f64 * self.dt
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.steps).map(|j| self.t(j)).collect()
    }

    /// Width of step `j`, with the final step absorbing rounding.
    #[inline]
    pub fn step(&self, j: usize) -> f64 {
        self.t(j + 1) - self.t(j)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum StreamRole {
    Common = 1,
    Minor = 2,
    Agent = 3,
    Auxiliary = 4,
}

/// Packs `(role, p, k, i)` into a stream id: 4 bits role, 24 bits `p`,
/// 8 bits `k`, 28 bits `i`.
pub fn stream_id(role: StreamRole, p: u64, k: u64, i: u64) -> Result<u64> {
    if p >= 1 << 24 || k >= 1 << 8 || i >= 1 << 28 {
        return Err(Error::Structure(format!("stream address ({p}, {k}, {i}) out of range")));
    }
    Ok(((role as u64) << 60) | (p << 36) | (k << 28) | i)
}

pub fn stream_rng(seed: u64, role: StreamRole, p: u64, k: u64, i: u64) -> Result<ChaCha8Rng> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(role, p, k, i)?);
    rng.set_word_pos(0);
    Ok(rng)
}

/// `J` Gaussian increments with variance `dt_j` from one stream.
pub fn increments(seed: u64, role: StreamRole, p: u64, k: u64, i: u64, grid: &TimeGrid) -> Result<Vec<f64>> {
    let mut rng = stream_rng(seed, role, p, k, i)?;
    Ok((0..grid.steps).map(|j| grid.step(j).sqrt() * rng.sample::<f64, _>(StandardNormal)).collect())
}

#[derive(Clone, Debug)]
pub struct NoiseEnsemble {
    pub grid: TimeGrid,
    pub paths: usize,
    pub particles: usize,
    pub types: usize,
    pub seed: u64,
    pub dw0: Vec<f64>,
    pub dw: Vec<f64>,
}

pub fn ensemble_bytes(grid: &TimeGrid, paths: usize, particles: usize, types: usize) -> u64 {
    8 * paths as u64 * grid.steps as u64 * (types as u64 * particles as u64 + 1)
}

pub fn sample_ensemble(grid: TimeGrid, paths: usize, particles: usize, types: usize, seed: u64) -> Result<NoiseEnsemble> {
    sample_ensemble_capped(grid, paths, particles, types, seed, DEFAULT_CAP_BYTES)
}

pub fn sample_ensemble_capped(
    grid: TimeGrid,
    paths: usize,
    particles: usize,
    types: usize,
    seed: u64,
    cap_bytes: u64,
) -> Result<NoiseEnsemble> {
    if paths == 0 || particles == 0 || types == 0 {
        return Err(Error::Structure("ensemble needs P, M, K >= 1".into()));
    }
    let needed = ensemble_bytes(&grid, paths, particles, types);
    if needed > cap_bytes {
        return Err(Error::Capacity { needed, cap: cap_bytes });
    }
    stream_id(StreamRole::Minor, paths as u64 - 1, types as u64 - 1, particles as u64 - 1)?;
    let jn = grid.steps;
    let mut dw0 = vec![0.0; paths * jn];
    dw0.par_chunks_mut(jn).enumerate().for_each(|(p, chunk)| {
        let inc = increments(seed, StreamRole::Common, p as u64, 0, 0, &grid).expect("checked range");
        chunk.copy_from_slice(&inc);
    });
    let per_path = jn * types * particles;
    let mut dw = vec![0.0; paths * per_path];
    dw.par_chunks_mut(per_path).enumerate().for_each(|(p, chunk)| {
        for k in 0..types {
            for i in 0..particles {
                let inc = increments(seed, StreamRole::Minor, p as u64, k as u64, i as u64, &grid).expect("checked range");
                for (j, v) in inc.into_iter().enumerate() {
                    chunk[(j * types + k) * particles + i] = v;
                }
            }
        }
    });
    Ok(NoiseEnsemble { grid, paths, particles, types, seed, dw0, dw })
}

impl NoiseEnsemble {
    #[inline]
    pub fn dw0(&self, p: usize, j: usize) -> f64 {
        self.dw0[p * self.grid.steps + j]
    }

    #[inline]
    pub fn dw(&self, p: usize, j: usize, k: usize, i: usize) -> f64 {
        self.dw[((p * self.grid.steps + j) * self.types + k) * self.particles + i]
    }

    /// Increments of particle `(k, i)` on path `p`, regenerated from its stream.
    pub fn regenerate(&self, p: usize, k: usize, i: usize) -> Result<Vec<f64>> {
        increments(self.seed, StreamRole::Minor, p as u64, k as u64, i as u64, &self.grid)
    }

    const MAGIC: &'static [u8; 8] = b"MFGNOISE";

    /// Header (magic, version, P, M, K, J as u64, dt and T as f64, seed),
    /// then `dw0` and `dw` in row-major little-endian f64.
    pub fn write_dump(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(Self::MAGIC)?;
        for v in [1u64, self.paths as u64, self.particles as u64, self.types as u64, self.grid.steps as u64] {
            f.write_all(&v.to_le_bytes())?;
        }
        f.write_all(&self.grid.dt.to_le_bytes())?;
        f.write_all(&self.grid.horizon.to_le_bytes())?;
        f.write_all(&self.seed.to_le_bytes())?;
        for v in self.dw0.iter().chain(self.dw.iter()) {
            f.write_all(&v.to_le_bytes())?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn read_dump(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(Error::Io("not a noise dump".into()));
        }
        let mut word = [0u8; 8];
        let mut next = |f: &mut std::io::BufReader<std::fs::File>| -> Result<[u8; 8]> {
            f.read_exact(&mut word)?;
            Ok(word)
        };
        let version = u64::from_le_bytes(next(&mut f)?);
        if version != 1 {
            return Err(Error::Io(format!("unsupported dump version {version}")));
        }
        let paths = u64::from_le_bytes(next(&mut f)?) as usize;
        let particles = u64::from_le_bytes(next(&mut f)?) as usize;
        let types = u64::from_le_bytes(next(&mut f)?) as usize;
        let steps = u64::from_le_bytes(next(&mut f)?) as usize;
        let _dt = f64::from_le_bytes(next(&mut f)?);
        let horizon = f64::from_le_bytes(next(&mut f)?);
        let seed = u64::from_le_bytes(next(&mut f)?);
        let grid = TimeGrid::new(horizon, steps)?;
        let mut read_vec = |len: usize| -> Result<Vec<f64>> {
            let mut buf = vec![0u8; len * 8];
            f.read_exact(&mut buf)?;
            Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
        };
        let dw0 = read_vec(paths * steps)?;
        let dw = read_vec(paths * steps * types * particles)?;
        Ok(Self { grid, paths, particles, types, seed, dw0, dw })
    }
}

/// Cross-sectional mean of `values` (row-major, `n` entries per particle).
pub fn conditional_mean(values: &[f64], n: usize) -> Result<Vec<f64>> {
    if n == 0 || values.is_empty() || values.len() % n != 0 {
        return Err(Error::Empty("conditional mean needs at least one particle".into()));
    }
    let count = values.len() / n;
    let mut out = vec![0.0; n];
    for row in values.chunks_exact(n) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= count as f64);
    Ok(out)
}

/// `Φ = Σ_k π_k m_k` with `means` laid out as `K` rows of length `n`.
pub fn phi_field(means: &[f64], pi: &[f64]) -> Vec<f64> {
    let n = means.len() / pi.len().max(1);
    let mut out = vec![0.0; n];
    for (row, p) in means.chunks_exact(n.max(1)).zip(pi) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += p * v;
        }
    }
    out
}
