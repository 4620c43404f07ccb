use candle_core::{DType, Tensor};

use crate::error::{Error, Result};

/// One sample's `h × w × c` feature map in channel-last layout.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureGrid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::invalid("feature grid dimensions must be positive"));
        }
        if data.len() != height * width * channels {
            return Err(Error::ShapeMismatch(format!(
                "{height}x{width}x{channels} grid needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Extracts sample `i` of an `(N, C, h, w)` tensor.
    pub fn from_batch(t: &Tensor, i: usize) -> Result<Self> {
        let (_, c, h, w) = t.dims4()?;
        let data: Vec<f64> = t
            .narrow(0, i, 1)?
            .squeeze(0)?
            .permute((1, 2, 0))?
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1()?;
        Self::new(h, w, c, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    /// Feature vector at `(row, col)`.
    #[inline]
    pub fn at(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.width + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    #[inline]
    pub fn at_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let start = (row * self.width + col) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Channel-wise spatial mean.
    pub fn mean_vector(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.channels];
        for px in self.data.chunks_exact(self.channels) {
            for (o, v) in out.iter_mut().zip(px) {
                *o += v;
            }
        }
        let n = (self.height * self.width) as f64;
        out.iter_mut().for_each(|v| *v /= n);
        out
    }
}
