use std::ops::{Index, IndexMut};

use crate::error::{invalid, Result};

/// Dense frequency × time grid, stored frequency-major (`data[k * time + t]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    freq: usize,
    time: usize,
    data: Vec<T>,
}

impl<T: Clone + Default> Grid<T> {
    pub fn zeros(freq: usize, time: usize) -> Self {
        Self {
            freq,
            time,
            data: vec![T::default(); freq * time],
        }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(freq: usize, time: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != freq * time {
            return Err(invalid(format!(
                "grid data has {} entries, expected {freq}x{time}",
                data.len()
            )));
        }
        Ok(Self { freq, time, data })
    }

    pub fn from_fn(freq: usize, time: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(freq * time);
        for k in 0..freq {
            for t in 0..time {
                data.push(f(k, t));
            }
        }
        Self { freq, time, data }
    }

    pub fn freq(&self) -> usize {
        self.freq
    }

    pub fn time(&self) -> usize {
        self.time
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.freq, self.time)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            freq: self.freq,
            time: self.time,
            data: self.data.iter().map(f).collect(),
        }
    }

    pub(crate) fn check_shape<U>(&self, other: &Grid<U>, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(invalid(format!(
                "{what}: shape {:?} does not match {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }
}

impl<T> Index<(usize, usize)> for Grid<T> {
    type Output = T;

    fn index(&self, (k, t): (usize, usize)) -> &T {
        debug_assert!(k < self.freq && t < self.time);
        &self.data[k * self.time + t]
    }
}

impl<T> IndexMut<(usize, usize)> for Grid<T> {
    fn index_mut(&mut self, (k, t): (usize, usize)) -> &mut T {
        debug_assert!(k < self.freq && t < self.time);
        &mut self.data[k * self.time + t]
    }
}
