use crate::error::{invalid, Result};

use super::Scalar;

/// Dense `[freq][time][chan]` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3<T> {
    freq: usize,
    time: usize,
    chans: usize,
    data: Vec<T>,
}

impl<T: Scalar> Tensor3<T> {
    pub fn zeros(freq: usize, time: usize, chans: usize) -> Self {
        Self {
            freq,
            time,
            chans,
            data: vec![T::zero(); freq * time * chans],
        }
    }

    pub fn from_vec(freq: usize, time: usize, chans: usize, data: Vec<T>) -> Result<Self> {
        if freq == 0 || time == 0 || chans == 0 {
            return Err(invalid(format!(
                "tensor dimensions must be positive, got {freq}x{time}x{chans}"
            )));
        }
        if data.len() != freq * time * chans {
            return Err(invalid(format!(
                "{} values for a {freq}x{time}x{chans} tensor",
                data.len()
            )));
        }
        Ok(Self {
            freq,
            time,
            chans,
            data,
        })
    }

    pub fn from_fn(
        freq: usize,
        time: usize,
        chans: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(freq * time * chans);
        for k in 0..freq {
            for t in 0..time {
                for c in 0..chans {
                    data.push(f(k, t, c));
                }
            }
        }
        Self {
            freq,
            time,
            chans,
            data,
        }
    }

    pub fn freq(&self) -> usize {
        self.freq
    }

    pub fn time(&self) -> usize {
        self.time
    }

    pub fn chans(&self) -> usize {
        self.chans
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.freq, self.time, self.chans)
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

    #[inline]
    pub fn index(&self, k: usize, t: usize, c: usize) -> usize {
        (k * self.time + t) * self.chans + c
    }

    #[inline]
    pub fn get(&self, k: usize, t: usize, c: usize) -> T {
        self.data[self.index(k, t, c)]
    }

    #[inline]
    pub fn set(&mut self, k: usize, t: usize, c: usize, v: T) {
        let i = self.index(k, t, c);
        self.data[i] = v;
    }

    /// Channel vector at `(k, t)`.
    #[inline]
    pub fn pixel(&self, k: usize, t: usize) -> &[T] {
        let i = self.index(k, t, 0);
        &self.data[i..i + self.chans]
    }

    #[inline]
    pub fn pixel_mut(&mut self, k: usize, t: usize) -> &mut [T] {
        let i = self.index(k, t, 0);
        let c = self.chans;
        &mut self.data[i..i + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            freq: self.freq,
            time: self.time,
            chans: self.chans,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor3<U> {
        Tensor3 {
            freq: self.freq,
            time: self.time,
            chans: self.chans,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}
