use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Dense row-major array of `f64`.
///
/// Gradients are not stored on the tensor itself; they live on the
/// [`Tape`](super::Tape) that recorded the computation.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "tensor",
                format!(
                    "shape {:?} holds {} elements but {} were supplied",
                    shape,
                    expected,
                    data.len()
                ),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Samples i.i.d. normal entries with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Interprets the tensor as `[C, H, W]`.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[c, h, w] => Ok((c, h, w)),
            other => Err(Error::shape(
                "dims3",
                format!("expected a [C, H, W] tensor, got shape {:?}", other),
            )),
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot reshape {:?} into {:?}", self.shape, shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Returns the `[H, W]` plane of channel `c` of a `[C, H, W]` tensor.
    pub fn channel(&self, c: usize) -> Result<&[f64]> {
        let (ch, h, w) = self.dims3()?;
        if c >= ch {
            return Err(Error::shape(
                "channel",
                format!("channel {} requested from a {}-channel tensor", c, ch),
            ));
        }
        Ok(&self.data[c * h * w..(c + 1) * h * w])
    }

    /// Stacks equally sized planes into a `[C, H, W]` tensor.
    pub fn stack_channels(planes: &[&[f64]], h: usize, w: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(planes.len() * h * w);
        for (i, p) in planes.iter().enumerate() {
            if p.len() != h * w {
                return Err(Error::shape(
                    "stack_channels",
                    format!("plane {} has {} elements, expected {}x{}", i, p.len(), h, w),
                ));
            }
            data.extend_from_slice(p);
        }
        Tensor::new(vec![planes.len(), h, w], data)
    }

    /// Rejects NaN and infinite entries, naming the first offender.
    pub fn validate_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::NonFinite(format!(
                "{} (element {} = {})",
                what, i, self.data[i]
            ))),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Per-channel population mean and standard deviation of a `[C, H, W]` tensor.
pub fn channel_moments(t: &Tensor) -> Result<Vec<(f64, f64)>> {
    let (c, h, w) = t.dims3()?;
    let n = (h * w) as f64;
    Ok((0..c)
        .map(|ci| {
            let plane = &t.data()[ci * h * w..(ci + 1) * h * w];
            let mean = plane.iter().sum::<f64>() / n;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            (mean, var.sqrt())
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn validate_finite_names_offender() {
        let t = Tensor::new(vec![3], vec![1.0, f64::NAN, 2.0]).unwrap();
        let err = t.validate_finite("weights").unwrap_err().to_string();
        assert!(err.contains("weights") && err.contains("element 1"), "{err}");
    }

    #[test]
    fn moments_of_known_channel() {
        let t = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let m = channel_moments(&t).unwrap();
        assert!((m[0].0 - 2.5).abs() < 1e-15);
        assert!((m[0].1 - 1.25f64.sqrt()).abs() < 1e-15);
    }
}
