//! Dense 2-D grids and channel-major volumes.
//!
//! `Grid` is a single-channel `height x width` array in row-major order;
//! `Volume` stacks `channels` such grids (`C x H x W`). These are the plain
//! data carriers between event aggregation, the scene renderer and the
//! network input; they carry no gradient.

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Grid<S: Scalar> {
    pub width: usize,
    pub height: usize,
    data: Vec<S>,
}

impl<S: Scalar> Grid<S> {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![S::zero(); width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<S>) -> Self {
        assert_eq!(data.len(), width * height, "grid data length mismatch");
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> S {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: S) {
        self.data[y * self.width + x] = v;
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_volume(self) -> Volume<S> {
        Volume {
            channels: 1,
            height: self.height,
            width: self.width,
            data: self.data,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume<S: Scalar> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    data: Vec<S>,
}

impl<S: Scalar> Volume<S> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![S::zero(); channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<S>) -> Self {
        assert_eq!(data.len(), channels * height * width, "volume data length mismatch");
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> S {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: S) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Borrow one channel as a row-major plane.
    pub fn channel(&self, c: usize) -> &[S] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }
}
