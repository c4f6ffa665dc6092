//! Per-pixel class maps.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Pixels carrying this id are excluded from losses and metrics.
pub const IGNORE_LABEL: u8 = 255;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(
                "LabelMap::from_vec",
                format!("{height}×{width} map with {} pixels", data.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        Self {
            height,
            width,
            data: vec![label; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Every pixel is a class in `[0, num_classes)` or [`IGNORE_LABEL`].
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self
            .data
            .iter()
            .position(|&l| l != IGNORE_LABEL && l as usize >= num_classes)
        {
            Some(index) => Err(Error::LabelOutOfRange {
                label: self.data[index],
                index,
                num_classes,
            }),
            None => Ok(()),
        }
    }

    /// Class ids stored as a `[H, W]` float tensor (the CWMT on-disk form).
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|&v| T::from_u8(v).unwrap()).collect();
        Tensor::from_vec(vec![self.height, self.width], data).expect("consistent shape")
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let [h, w] = t.shape() else {
            return Err(Error::shape(
                "LabelMap::from_tensor",
                format!("expected [H, W], got {:?}", t.shape()),
            ));
        };
        let data = t
            .data()
            .iter()
            .map(|&v| {
                let f = v.to_f64_lossy();
                if f.fract() == 0.0 && (0.0..=255.0).contains(&f) {
                    Ok(f as u8)
                } else {
                    Err(Error::Format(format!("label value {f} is not a class id")))
                }
            })
            .collect::<Result<_>>()?;
        Self::from_vec(*h, *w, data)
    }

    /// Per-pixel argmax over the channel axis of item `batch` in `logits`.
    pub fn argmax<T: Scalar>(logits: &Tensor<T>, batch: usize) -> Result<Self> {
        let (n, c, h, w) = logits.dims4("LabelMap::argmax")?;
        if batch >= n || c == 0 || c > IGNORE_LABEL as usize {
            return Err(Error::shape(
                "LabelMap::argmax",
                format!("batch {batch} of {n}, {c} classes"),
            ));
        }
        let plane = h * w;
        let x = &logits.data()[batch * c * plane..(batch + 1) * c * plane];
        let data = (0..plane)
            .map(|p| {
                let mut best = 0;
                for k in 1..c {
                    if x[k * plane + p] > x[best * plane + p] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect();
        Self::from_vec(h, w, data)
    }
}
