use nalgebra::DVector;

use crate::error::{check_len, Error, Result};

/// Stack of `n_x × n_y` frames, each flattened row-major (`p = i·n_y + j`).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSequence {
    pub n_x: usize,
    pub n_y: usize,
    pub frames: Vec<DVector<f64>>,
}

impl ImageSequence {
    pub fn new(n_x: usize, n_y: usize, frames: Vec<DVector<f64>>) -> Result<Self> {
        if n_x == 0 || n_y == 0 {
            return Err(Error::Config("image dimensions must be positive".into()));
        }
        for f in &frames {
            check_len("image frame", n_x * n_y, f.len())?;
        }
        Ok(Self { n_x, n_y, frames })
    }

    pub fn zeros(n_x: usize, n_y: usize, count: usize) -> Self {
        Self {
            n_x,
            n_y,
            frames: vec![DVector::zeros(n_x * n_y); count],
        }
    }

    pub fn pixels(&self) -> usize {
        self.n_x * self.n_y
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        i * self.n_y + j
    }

    pub fn get(&self, t: usize, i: usize, j: usize) -> f64 {
        self.frames[t][self.index(i, j)]
    }
}
