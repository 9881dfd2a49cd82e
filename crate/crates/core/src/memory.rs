//! Accounting of the dense buffers held by the reconstruction.
//!
//! Every buffer that the filter, smoother, EM and motion phases allocate is
//! wrapped in a [`Tracked`] value that charges its byte size to a shared
//! [`MemoryMeter`] and gives it back when dropped. Inputs (the projection
//! basis, forward operators and data) are not charged.

use std::ops::{Deref, DerefMut};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

const F64: usize = std::mem::size_of::<f64>();

#[derive(Debug, Default)]
struct Counters {
    current: AtomicUsize,
    peak: AtomicUsize,
}

/// Shared counter of live and peak tracked bytes.
#[derive(Debug, Clone, Default)]
pub struct MemoryMeter {
    inner: Arc<Counters>,
}

impl MemoryMeter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn current_bytes(&self) -> usize {
        self.inner.current.load(Ordering::Relaxed)
    }

    pub fn peak_bytes(&self) -> usize {
        self.inner.peak.load(Ordering::Relaxed)
    }

    /// Restarts peak tracking from the current level.
    pub fn reset_peak(&self) {
        let cur = self.current_bytes();
        self.inner.peak.store(cur, Ordering::Relaxed);
    }

    fn acquire(&self, bytes: usize) {
        let now = self.inner.current.fetch_add(bytes, Ordering::Relaxed) + bytes;
        self.inner.peak.fetch_max(now, Ordering::Relaxed);
    }

    fn release(&self, bytes: usize) {
        self.inner.current.fetch_sub(bytes, Ordering::Relaxed);
    }

    /// Charges `bytes` until the returned guard is dropped.
    pub fn charge(&self, bytes: usize) -> Hold {
        self.acquire(bytes);
        Hold {
            meter: self.clone(),
            bytes,
        }
    }

    pub fn track<T: Footprint>(&self, value: T) -> Tracked<T> {
        let bytes = value.footprint();
        self.acquire(bytes);
        Tracked {
            value: Some(value),
            bytes,
            meter: self.clone(),
        }
    }

    pub fn zeros(&self, rows: usize, cols: usize) -> Tracked<DMatrix<f64>> {
        self.track(DMatrix::zeros(rows, cols))
    }

    pub fn zeros_vec(&self, len: usize) -> Tracked<DVector<f64>> {
        self.track(DVector::zeros(len))
    }
}

/// Byte count held until drop.
#[derive(Debug)]
pub struct Hold {
    meter: MemoryMeter,
    bytes: usize,
}

impl Drop for Hold {
    fn drop(&mut self) {
        self.meter.release(self.bytes);
    }
}

/// A value whose storage is charged to a [`MemoryMeter`].
#[derive(Debug)]
pub struct Tracked<T> {
    value: Option<T>,
    bytes: usize,
    meter: MemoryMeter,
}

impl<T: Footprint> Tracked<T> {
    /// Re-reads the footprint after the value changed size.
    pub fn refresh(&mut self) {
        let bytes = self.deref().footprint();
        if bytes > self.bytes {
            self.meter.acquire(bytes - self.bytes);
        } else {
            self.meter.release(self.bytes - bytes);
        }
        self.bytes = bytes;
    }
}

impl<T> Tracked<T> {
    pub fn bytes(&self) -> usize {
        self.bytes
    }

    /// Stops tracking and returns the value.
    pub fn into_inner(mut self) -> T {
        self.meter.release(self.bytes);
        self.bytes = 0;
        self.value.take().expect("tracked value present until drop")
    }
}

impl<T> Deref for Tracked<T> {
    type Target = T;
    fn deref(&self) -> &T {
        self.value.as_ref().expect("tracked value present until drop")
    }
}

impl<T> DerefMut for Tracked<T> {
    fn deref_mut(&mut self) -> &mut T {
        self.value.as_mut().expect("tracked value present until drop")
    }
}

impl<T> Drop for Tracked<T> {
    fn drop(&mut self) {
        self.meter.release(self.bytes);
    }
}

impl<T: Clone + Footprint> Clone for Tracked<T> {
    fn clone(&self) -> Self {
        self.meter.track(self.deref().clone())
    }
}

/// Bytes of dense storage held by a value.
pub trait Footprint {
    fn footprint(&self) -> usize;
}

impl Footprint for DMatrix<f64> {
    fn footprint(&self) -> usize {
        self.len() * F64
    }
}

impl Footprint for DVector<f64> {
    fn footprint(&self) -> usize {
        self.len() * F64
    }
}

impl Footprint for Vec<f64> {
    fn footprint(&self) -> usize {
        self.len() * F64
    }
}

impl<T: Footprint> Footprint for Vec<T> {
    fn footprint(&self) -> usize {
        self.iter().map(Footprint::footprint).sum()
    }
}

impl<T: Footprint> Footprint for Option<T> {
    fn footprint(&self) -> usize {
        self.as_ref().map_or(0, Footprint::footprint)
    }
}

/// Per-run scratch configuration shared by the chunked kernels.
#[derive(Debug, Clone)]
pub struct Workspace {
    /// Rows of an n_s×r block materialised at once.
    pub chunk_rows: usize,
    pub meter: MemoryMeter,
}

impl Workspace {
    pub fn new() -> Self {
        Self::with_chunk_rows(256)
    }

    pub fn with_chunk_rows(chunk_rows: usize) -> Self {
        Self {
            chunk_rows: chunk_rows.max(1),
            meter: MemoryMeter::new(),
        }
    }
}

impl Default for Workspace {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tracked_buffers_release_on_drop() {
        let meter = MemoryMeter::new();
        {
            let a = meter.zeros(10, 10);
            assert_eq!(meter.current_bytes(), 800);
            let b = meter.zeros_vec(5);
            assert_eq!(a.bytes() + b.bytes(), 840);
            assert_eq!(meter.current_bytes(), 840);
        }
        assert_eq!(meter.current_bytes(), 0);
        assert_eq!(meter.peak_bytes(), 840);
        meter.reset_peak();
        assert_eq!(meter.peak_bytes(), 0);
    }

    #[test]
    fn into_inner_stops_charging() {
        let meter = MemoryMeter::new();
        let m = meter.zeros(3, 4).into_inner();
        assert_eq!(m.nrows(), 3);
        assert_eq!(meter.current_bytes(), 0);
        assert_eq!(meter.peak_bytes(), 96);
    }

    #[test]
    fn refresh_follows_resize() {
        let meter = MemoryMeter::new();
        let mut v = meter.track(Vec::<f64>::new());
        v.extend_from_slice(&[1.0, 2.0, 3.0]);
        v.refresh();
        assert_eq!(meter.current_bytes(), 24);
        v.truncate(1);
        v.refresh();
        assert_eq!(meter.current_bytes(), 8);
    }
}
