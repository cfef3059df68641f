use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::Linear;

use crate::error::Result;
use crate::params::ParamStore;

pub const NORM_EPS: f64 = 1e-6;

/// Layer-norm statistics over the last dimension, no elementwise affine.
pub fn layer_norm(x: &Tensor) -> Result<Tensor> {
    let mu = x.mean_keepdim(D::Minus1)?;
    let xc = x.broadcast_sub(&mu)?;
    let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(xc.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?)
}

/// `γ ⊙ (z − μ(z)) / σ(z) + β`, with `γ` and `β` broadcast against `z`.
pub fn adaln_modulate(z: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    Ok(layer_norm(z)?.broadcast_mul(gamma)?.broadcast_add(beta)?)
}

/// Rows `[sin(p ω_0) … sin(p ω_{k-1}), cos(p ω_0) … cos(p ω_{k-1})]`
/// with `ω_i = 10000^{-i/k}`, `k = dim / 2`.
pub fn sinusoid_rows(positions: &[f64], dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(positions.len() * dim);
    for &p in positions {
        let mut row = vec![0.0; dim];
        for i in 0..half {
            let w = (-(i as f64) / half.max(1) as f64 * 10000f64.ln()).exp();
            row[i] = (p * w).sin();
            row[half + i] = (p * w).cos();
        }
        out.extend(row);
    }
    out
}

pub fn sinusoid_tensor(positions: &[f64], dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let data = sinusoid_rows(positions, dim);
    Ok(Tensor::from_vec(data, (positions.len(), dim), device)?.to_dtype(dtype)?)
}

/// Multi-head self-attention over the second-to-last axis of `(B, N, D)`.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    qkv: Linear,
    out: Linear,
    heads: usize,
}

impl SelfAttention {
    pub fn new(p: &mut ParamStore, name: &str, dim: usize, heads: usize, zero_out: bool) -> Result<Self> {
        Ok(SelfAttention {
            qkv: p.linear(&format!("{name}.qkv"), dim, 3 * dim, true, false)?,
            out: p.linear(&format!("{name}.out"), dim, dim, true, zero_out)?,
            heads,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        let hd = d / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, n, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let scale = 1.0 / (hd as f64).sqrt();
        let att = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
        let att = candle_nn::ops::softmax(&att, D::Minus1)?;
        let y = att.matmul(&v)?.transpose(1, 2)?.reshape((b, n, d))?;
        Ok(self.out.forward(&y)?)
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(p: &mut ParamStore, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Mlp {
            fc1: p.linear(&format!("{name}.fc1"), dim, hidden, true, false)?,
            fc2: p.linear(&format!("{name}.fc2"), hidden, dim, true, false)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.fc2.forward(&self.fc1.forward(x)?.gelu()?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> (Vec<f64>, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let t = Tensor::from_vec(v.clone(), shape, &Device::Cpu).unwrap();
        (v, t)
    }

    #[test]
    fn identity_modulation_standardizes() {
        let (_, z) = rand_tensor(&[7, 32], 1);
        let z = z.to_dtype(DType::F32).unwrap();
        let one = Tensor::ones(32, DType::F32, &Device::Cpu).unwrap();
        let zero = Tensor::zeros(32, DType::F32, &Device::Cpu).unwrap();
        let y = adaln_modulate(&z, &one, &zero).unwrap().to_vec2::<f32>().unwrap();
        for row in y {
            let m = row.iter().sum::<f32>() / 32.0;
            let v = row.iter().map(|x| (x - m).powi(2)).sum::<f32>() / 32.0;
            assert!(m.abs() < 1e-5 && (v - 1.0).abs() < 1e-4, "{m} {v}");
        }
    }

    #[test]
    fn zero_gamma_gives_beta() {
        let (_, z) = rand_tensor(&[5, 8], 2);
        let (bv, beta) = rand_tensor(&[8], 3);
        let y = adaln_modulate(&z, &Tensor::zeros(8, DType::F64, &Device::Cpu).unwrap(), &beta).unwrap();
        for row in y.to_vec2::<f64>().unwrap() {
            assert_eq!(row, bv);
        }
    }

    #[test]
    fn matches_two_pass_oracle() {
        let (zv, z) = rand_tensor(&[6, 24], 4);
        let (gv, g) = rand_tensor(&[24], 5);
        let (bv, b) = rand_tensor(&[24], 6);
        let y = adaln_modulate(&z, &g, &b).unwrap().to_vec2::<f64>().unwrap();
        for r in 0..6 {
            let row = &zv[r * 24..(r + 1) * 24];
            let mean = row.iter().sum::<f64>() / 24.0;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 24.0;
            for c in 0..24 {
                let want = gv[c] * (row[c] - mean) / (var + NORM_EPS).sqrt() + bv[c];
                assert!((y[r][c] - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn attention_batches_are_independent() {
        let mut p = ParamStore::new(0, DType::F64, Device::Cpu);
        let att = SelfAttention::new(&mut p, "a", 8, 2, false).unwrap();
        let (_, x) = rand_tensor(&[2, 5, 8], 7);
        let (_, other) = rand_tensor(&[1, 5, 8], 8);
        let y = att.forward(&x).unwrap();
        let x2 = Tensor::cat(&[&x.narrow(0, 0, 1).unwrap(), &other], 0).unwrap();
        let y2 = att.forward(&x2).unwrap();
        let a = y.get(0).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let b = y2.get(0).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(a, b);
    }
}
