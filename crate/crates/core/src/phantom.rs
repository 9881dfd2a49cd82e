//! Moving-blocks ground truth.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::ImageSequence;

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    /// Edge length in pixels.
    pub size: usize,
    /// Top-left corner `(row, col)` at frame 0.
    pub start: (usize, usize),
    /// Pixels per frame along `(row, col)`.
    pub velocity: (i64, i64),
    pub intensity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlocksPhantomConfig {
    pub n_x: usize,
    pub n_y: usize,
    /// Index of the last frame; the sequence has `t + 1` frames.
    pub t: usize,
    pub blocks: Vec<Block>,
    pub seed: u64,
}

const COMPASS: [(i64, i64); 8] = [
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
    (-1, 0),
    (-1, -1),
    (0, -1),
    (1, -1),
];

impl BlocksPhantomConfig {
    /// Places blocks of the given sizes and speeds at seeded positions with
    /// seeded compass directions.
    pub fn seeded(
        n_x: usize,
        n_y: usize,
        t: usize,
        sizes: &[usize],
        speeds: &[i64],
        intensities: &[f64],
        seed: u64,
    ) -> Result<Self> {
        if sizes.len() != speeds.len() || sizes.len() != intensities.len() {
            return Err(Error::Config(
                "block sizes, speeds and intensities must have equal length".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = Vec::with_capacity(sizes.len());
        for ((&size, &speed), &intensity) in sizes.iter().zip(speeds).zip(intensities) {
            if size == 0 || size > n_x || size > n_y {
                return Err(Error::Config(format!(
                    "block of size {size} does not fit a {n_x}x{n_y} image"
                )));
            }
            let start = (
                rng.random_range(0..=n_x - size),
                rng.random_range(0..=n_y - size),
            );
            let (dr, dc) = COMPASS[rng.random_range(0..COMPASS.len())];
            blocks.push(Block {
                size,
                start,
                velocity: (dr * speed, dc * speed),
                intensity,
            });
        }
        let cfg = Self {
            n_x,
            n_y,
            t,
            blocks,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Desk-scale default: 64×64, eleven frames, four blocks of which the two
    /// small ones move twice as fast.
    pub fn desk(seed: u64) -> Self {
        Self::seeded(
            64,
            64,
            10,
            &[6, 6, 10, 10],
            &[2, 2, 1, 1],
            &[0.9, 0.6, 1.0, 0.7],
            seed,
        )
        .expect("desk configuration is valid")
    }

    /// Full-size sequence: 400×400 with 31 frames.
    pub fn full_scale(seed: u64) -> Self {
        Self::seeded(
            400,
            400,
            30,
            &[36, 36, 60, 60],
            &[6, 6, 3, 3],
            &[0.9, 0.6, 1.0, 0.7],
            seed,
        )
        .expect("full-scale configuration is valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_x == 0 || self.n_y == 0 {
            return Err(Error::Config("phantom dimensions must be positive".into()));
        }
        for (k, b) in self.blocks.iter().enumerate() {
            if b.size == 0 || b.size > self.n_x || b.size > self.n_y {
                return Err(Error::Config(format!(
                    "block {k}: size {} does not fit a {}x{} image",
                    b.size, self.n_x, self.n_y
                )));
            }
            if b.start.0 + b.size > self.n_x || b.start.1 + b.size > self.n_y {
                return Err(Error::Config(format!(
                    "block {k}: start {:?} places it outside the image",
                    b.start
                )));
            }
            if !(b.intensity > 0.0 && b.intensity <= 1.0) {
                return Err(Error::Config(format!(
                    "block {k}: intensity {} outside (0, 1]",
                    b.intensity
                )));
            }
        }
        Ok(())
    }
}

/// Position after `steps` moves of `v` on `[0, span]` with elastic reflection.
fn reflect(start: usize, v: i64, steps: usize, span: usize) -> usize {
    if span == 0 {
        return 0;
    }
    let period = 2 * span as i64;
    let m = (start as i64 + v * steps as i64).rem_euclid(period);
    (if m > span as i64 { period - m } else { m }) as usize
}

/// Top-left corner of `block` at frame `t`.
pub fn block_position(cfg: &BlocksPhantomConfig, block: &Block, t: usize) -> (usize, usize) {
    (
        reflect(block.start.0, block.velocity.0, t, cfg.n_x - block.size),
        reflect(block.start.1, block.velocity.1, t, cfg.n_y - block.size),
    )
}

pub fn generate_blocks(cfg: &BlocksPhantomConfig) -> Result<ImageSequence> {
    cfg.validate()?;
    let mut frames = Vec::with_capacity(cfg.t + 1);
    for t in 0..=cfg.t {
        let mut f = DVector::zeros(cfg.n_x * cfg.n_y);
        for b in &cfg.blocks {
            let (r0, c0) = block_position(cfg, b, t);
            for i in r0..r0 + b.size {
                for j in c0..c0 + b.size {
                    let p = i * cfg.n_y + j;
                    f[p] = f64::max(f[p], b.intensity);
                }
            }
        }
        frames.push(f);
    }
    ImageSequence::new(cfg.n_x, cfg.n_y, frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(size: usize, start: (usize, usize), velocity: (i64, i64), n: usize, t: usize) -> BlocksPhantomConfig {
        BlocksPhantomConfig {
            n_x: n,
            n_y: n,
            t,
            blocks: vec![Block {
                size,
                start,
                velocity,
                intensity: 1.0,
            }],
            seed: 0,
        }
    }

    #[test]
    fn static_block_gives_identical_frames() {
        let seq = generate_blocks(&single(2, (1, 1), (0, 0), 6, 3)).unwrap();
        assert_eq!(seq.len(), 4);
        for f in &seq.frames[1..] {
            assert_eq!(f, &seq.frames[0]);
        }
    }

    #[test]
    fn unit_translation_moves_one_row_per_frame() {
        let seq = generate_blocks(&single(1, (0, 0), (1, 0), 8, 2)).unwrap();
        for t in 0..=2 {
            let hot: Vec<usize> = (0..64).filter(|&p| seq.frames[t][p] != 0.0).collect();
            assert_eq!(hot, vec![t * 8]);
        }
    }

    #[test]
    fn reflection_stays_inside() {
        let cfg = single(3, (0, 4), (2, 3), 8, 20);
        let seq = generate_blocks(&cfg).unwrap();
        for f in &seq.frames {
            assert_eq!(f.sum(), 9.0);
        }
        assert_eq!(reflect(4, 1, 2, 5), 5 - 1);
        assert_eq!(reflect(0, -1, 1, 5), 1);
    }

    #[test]
    fn oversized_block_is_rejected() {
        let cfg = single(9, (0, 0), (0, 0), 8, 1);
        assert!(generate_blocks(&cfg).unwrap_err().is_config());
    }

    #[test]
    fn desk_default_is_deterministic() {
        let a = generate_blocks(&BlocksPhantomConfig::desk(7)).unwrap();
        let b = generate_blocks(&BlocksPhantomConfig::desk(7)).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.n_x, a.n_y, a.len()), (64, 64, 11));
        let c = BlocksPhantomConfig::desk(7);
        let fast = c.blocks.iter().filter(|b| b.velocity.0.abs().max(b.velocity.1.abs()) == 2).count();
        assert_eq!(fast, 2);
    }

    #[test]
    fn full_scale_dimensions() {
        let cfg = BlocksPhantomConfig::full_scale(1);
        let seq = generate_blocks(&cfg).unwrap();
        assert_eq!((seq.n_x, seq.n_y, seq.len()), (400, 400, 31));
    }

    #[test]
    fn mass_is_conserved_without_contact() {
        let cfg = single(4, (10, 10), (1, -1), 64, 5);
        let seq = generate_blocks(&cfg).unwrap();
        let m0 = seq.frames[0].sum();
        for f in &seq.frames {
            assert_eq!(f.sum(), m0);
        }
    }
}
