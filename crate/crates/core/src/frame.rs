use crate::error::{Error, Result};

/// A single grayscale image, row-major, intensities nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Frame {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(
                format!("{height}x{width} = {} values", height * width),
                format!("{} values", data.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

/// Checks that all frames share one resolution and returns it.
pub fn common_shape(frames: &[Frame]) -> Result<(usize, usize)> {
    let first = frames
        .first()
        .ok_or_else(|| Error::InvalidInput("empty frame sequence".into()))?;
    for (i, f) in frames.iter().enumerate() {
        if f.shape() != first.shape() {
            return Err(Error::shape(
                format!("{}x{}", first.height, first.width),
                format!("{}x{} at frame {i}", f.height, f.width),
            ));
        }
    }
    Ok(first.shape())
}
