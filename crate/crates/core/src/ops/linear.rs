use crate::error::{Error, Result};
use crate::ops::sgemm_bt;

/// Fully connected layer, `y = W x + b` with `W` stored row-major as `out x in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, weight: Vec<f32>, bias: Vec<f32>) -> Result<Self> {
        if weight.len() != in_dim * out_dim || bias.len() != out_dim {
            return Err(Error::shape(format!(
                "linear {in_dim}->{out_dim} got {} weights and {} biases",
                weight.len(),
                bias.len()
            )));
        }
        Ok(Linear {
            in_dim,
            out_dim,
            weight,
            bias,
        })
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut l = Self::zeros(dim, dim);
        for i in 0..dim {
            l.weight[i * dim + i] = 1.0;
        }
        l
    }

    pub fn forward(&self, x: &[f32]) -> Result<Vec<f32>> {
        if x.len() != self.in_dim {
            return Err(Error::shape(format!(
                "linear expects {} inputs, got {}",
                self.in_dim,
                x.len()
            )));
        }
        Ok(self
            .weight
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f32>() + b)
            .collect())
    }

    /// Applies the layer to `rows` row-major vectors of length `in_dim`.
    pub fn forward_rows(&self, x: &[f32], rows: usize) -> Result<Vec<f32>> {
        if x.len() != rows * self.in_dim {
            return Err(Error::shape(format!(
                "linear expects {rows}x{} inputs, got {}",
                self.in_dim,
                x.len()
            )));
        }
        let mut out = vec![0.0f32; rows * self.out_dim];
        sgemm_bt(rows, self.in_dim, self.out_dim, x, &self.weight, &mut out);
        for row in out.chunks_exact_mut(self.out_dim) {
            row.iter_mut().zip(&self.bias).for_each(|(y, b)| *y += b);
        }
        Ok(out)
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vector_and_row_paths_agree() {
        let l = Linear::new(3, 2, vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0], vec![0.1, -0.1]).unwrap();
        let y = l.forward(&[1.0, 1.0, 2.0]).unwrap();
        assert_eq!(y, vec![9.1, -0.6]);
        let rows = l.forward_rows(&[1.0, 1.0, 2.0, 0.0, 0.0, 0.0], 2).unwrap();
        assert!((rows[0] - 9.1).abs() < 1e-6 && (rows[1] + 0.6).abs() < 1e-6);
        assert_eq!(&rows[2..], &[0.1, -0.1]);
        assert!(l.forward(&[1.0]).is_err());
    }
}
