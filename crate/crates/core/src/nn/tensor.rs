use crate::error::{Error, Result};
use crate::maskio::SemanticMask;

/// Dense row-major array of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "tensor of shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor contains non-finite values".into()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

/// One channel per class: shape `(palette_size, height, width)` with exactly
/// one 1.0 per spatial location.
pub fn one_hot_encode(mask: &SemanticMask, palette_size: usize) -> Result<Tensor> {
    if palette_size < mask.palette_size() {
        return Err(Error::Dimension(format!(
            "one-hot needs at least {} channels, got {palette_size}",
            mask.palette_size()
        )));
    }
    let plane = mask.len();
    let mut data = vec![0.0; palette_size * plane];
    for (i, &c) in mask.classes().iter().enumerate() {
        data[usize::from(c) * plane + i] = 1.0;
    }
    Ok(Tensor {
        shape: vec![palette_size, mask.height(), mask.width()],
        data,
    })
}

/// Scales `z` to unit Euclidean norm.
pub fn l2_normalize(z: &[f64]) -> Result<Vec<f64>> {
    let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::Degenerate(format!("cannot normalize vector with norm {norm}")));
    }
    Ok(z.iter().map(|v| v / norm).collect())
}

/// Gradient through `y = z / |z|`: `(g - y (y . g)) / |z|`.
pub fn l2_normalize_backward(z: &[f64], grad_y: &[f64]) -> Result<Vec<f64>> {
    let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0) {
        return Err(Error::Degenerate("normalization of a zero vector".into()));
    }
    let dot: f64 = z.iter().zip(grad_y).map(|(a, g)| a * g).sum::<f64>() / norm;
    Ok(z.iter()
        .zip(grad_y)
        .map(|(a, g)| (g - a / norm * dot) / norm)
        .collect())
}
