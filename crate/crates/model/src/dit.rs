//! Diffusion transformer over patchified latent slots with per-slot AdaLN
//! modulation and zero-initialized residual gates.

use candle_core::{Module, Tensor, D};
use candle_nn::Linear;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::layers::{adaln_modulate, sinusoid_rows, Mlp, SelfAttention};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiTConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub patch: usize,
    pub c_in: usize,
    pub c_out: usize,
    /// Width of the timestep embeddings `t_i`.
    pub cond_dim: usize,
    pub mlp_ratio: usize,
}

impl DiTConfig {
    pub fn desk(c_in: usize, c_out: usize) -> Self {
        DiTConfig {
            depth: 6,
            dim: 192,
            heads: 6,
            patch: 2,
            c_in,
            c_out,
            cond_dim: 192,
            mlp_ratio: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.dim == 0 || self.heads == 0 || self.patch == 0 || self.mlp_ratio == 0 {
            return Err(ModelError::Config("dit sizes must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(ModelError::Config(format!("dim {} not divisible by heads {}", self.dim, self.heads)));
        }
        if self.dim % 4 != 0 {
            return Err(ModelError::Config(format!("dim {} must be a multiple of 4", self.dim)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Block {
    /// Shift and scale for both sub-layers.
    modulation: Linear,
    /// Residual gates α, zero at init.
    gates: Linear,
    attn: SelfAttention,
    mlp: Mlp,
}

#[derive(Debug, Clone)]
pub struct DiT {
    cfg: DiTConfig,
    embed: Linear,
    blocks: Vec<Block>,
    final_mod: Linear,
    head: Linear,
    /// Per-slot, per-channel gain on the noisy latent added to the output.
    skip: Linear,
    attention: bool,
}

/// Splits the last axis of `m` into `n` equal pieces.
fn split_last(m: &Tensor, n: usize) -> Result<Vec<Tensor>> {
    let d = m.dim(D::Minus1)? / n;
    (0..n).map(|i| Ok(m.narrow(D::Minus1, i * d, d)?)).collect()
}

impl DiT {
    pub fn new(p: &mut ParamStore, name: &str, cfg: DiTConfig) -> Result<Self> {
        cfg.validate()?;
        let pp = cfg.patch * cfg.patch;
        let embed = p.linear(&format!("{name}.embed"), pp * cfg.c_in, cfg.dim, true, false)?;
        let blocks = (0..cfg.depth)
            .map(|i| {
                let b = format!("{name}.block{i}");
                Ok(Block {
                    modulation: p.linear(&format!("{b}.mod"), cfg.cond_dim, 4 * cfg.dim, true, false)?,
                    gates: p.linear(&format!("{b}.gate"), cfg.cond_dim, 2 * cfg.dim, true, true)?,
                    attn: SelfAttention::new(p, &format!("{b}.attn"), cfg.dim, cfg.heads, false)?,
                    mlp: Mlp::new(p, &format!("{b}.mlp"), cfg.dim, cfg.mlp_ratio * cfg.dim)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DiT {
            cfg,
            embed,
            blocks,
            final_mod: p.linear(&format!("{name}.final_mod"), cfg.cond_dim, 2 * cfg.dim, true, false)?,
            head: p.linear(&format!("{name}.head"), cfg.dim, pp * cfg.c_out, true, true)?,
            skip: p.linear(&format!("{name}.skip"), cfg.cond_dim, cfg.c_out, true, true)?,
            attention: true,
        })
    }

    pub fn config(&self) -> &DiTConfig {
        &self.cfg
    }

    /// Test hook: skip the attention sub-layer in every block.
    pub fn set_attention(&mut self, on: bool) {
        self.attention = on;
    }

    /// Factorized position code `(S, N, dim)`: slot index sinusoid plus a
    /// spatial code built from half-width row and column sinusoids.
    fn position_code(&self, s: usize, hp: usize, wp: usize, like: &Tensor) -> Result<Tensor> {
        let d = self.cfg.dim;
        let slots: Vec<f64> = (0..s).map(|i| i as f64).collect();
        let temporal = sinusoid_rows(&slots, d);
        let rows: Vec<f64> = (0..hp).map(|i| i as f64).collect();
        let cols: Vec<f64> = (0..wp).map(|i| i as f64).collect();
        let (rr, cc) = (sinusoid_rows(&rows, d / 2), sinusoid_rows(&cols, d / 2));
        let n = hp * wp;
        let mut out = vec![0.0; s * n * d];
        for si in 0..s {
            for r in 0..hp {
                for c in 0..wp {
                    let base = (si * n + r * wp + c) * d;
                    for k in 0..d {
                        let spatial = if k < d / 2 {
                            rr[r * (d / 2) + k]
                        } else {
                            cc[c * (d / 2) + k - d / 2]
                        };
                        out[base + k] = temporal[si * d + k] + spatial;
                    }
                }
            }
        }
        Ok(Tensor::from_vec(out, (s, n, d), like.device())?.to_dtype(like.dtype())?)
    }

    /// `bundle`: `(B, S, h, w, C_in)` with slot 0 the reference.
    /// `per_frame`: `(B, S, cond_dim)`. Returns `(B, S−1, h, w, C_out)`.
    pub fn forward(&self, bundle: &Tensor, per_frame: &Tensor) -> Result<Tensor> {
        let cfg = &self.cfg;
        let (b, s, h, w, c) = bundle.dims5()?;
        let p = cfg.patch;
        if c != cfg.c_in {
            return Err(ModelError::shape("dit input channels", cfg.c_in, c));
        }
        if cfg.c_out > cfg.c_in {
            return Err(ModelError::shape("dit output channels", format!("at most {}", cfg.c_in), cfg.c_out));
        }
        if h % p != 0 || w % p != 0 {
            return Err(ModelError::shape("dit spatial size", format!("multiple of patch {p}"), (h, w)));
        }
        if s < 2 {
            return Err(ModelError::shape("dit slots", "at least 2", s));
        }
        if per_frame.dims() != [b, s, cfg.cond_dim] {
            return Err(ModelError::shape("timestep embeddings", (b, s, cfg.cond_dim), per_frame.dims()));
        }
        let (hp, wp) = (h / p, w / p);
        let n = hp * wp;
        let d = cfg.dim;

        let tokens = bundle
            .reshape((b * s, hp, p, wp, p, c))?
            .permute((0, 1, 3, 2, 4, 5))?
            .contiguous()?
            .reshape((b, s, n, p * p * c))?;
        let pe = self.position_code(s, hp, wp, bundle)?;
        let mut x = self.embed.forward(&tokens)?.broadcast_add(&pe)?;

        let cond = candle_nn::ops::silu(per_frame)?;
        for blk in &self.blocks {
            let m = blk.modulation.forward(&cond)?.unsqueeze(2)?;
            let parts = split_last(&m, 4)?;
            let g = split_last(&blk.gates.forward(&cond)?.unsqueeze(2)?, 2)?;
            let (shift1, scale1, gate1) = (&parts[0], &parts[1], &g[0]);
            let (shift2, scale2, gate2) = (&parts[2], &parts[3], &g[1]);
            if self.attention {
                let hdn = adaln_modulate(&x, &(scale1 + 1.0)?, shift1)?;
                let a = blk.attn.forward(&hdn.reshape((b, s * n, d))?)?.reshape((b, s, n, d))?;
                x = (x + a.broadcast_mul(gate1)?)?;
            }
            let hdn = adaln_modulate(&x, &(scale2 + 1.0)?, shift2)?;
            x = (&x + blk.mlp.forward(&hdn)?.broadcast_mul(gate2)?)?;
        }
        let fm = self.final_mod.forward(&cond)?.unsqueeze(2)?;
        let fparts = split_last(&fm, 2)?;
        let x = adaln_modulate(&x, &(&fparts[1] + 1.0)?, &fparts[0])?;
        let out = self.head.forward(&x)?;
        let co = cfg.c_out;
        let out = out
            .narrow(1, 1, s - 1)?
            .reshape((b * (s - 1), hp, wp, p, p, co))?
            .permute((0, 1, 3, 2, 4, 5))?
            .contiguous()?
            .reshape((b, s - 1, h, w, co))?;
        // The token width is smaller than a patch's latent values, so the
        // noisy latent (leading channels of the bundle) also bypasses it.
        let gain = self.skip.forward(&cond)?.narrow(1, 1, s - 1)?.reshape((b, s - 1, 1, 1, co))?;
        let noisy = bundle.narrow(1, 1, s - 1)?.narrow(4, 0, co)?;
        Ok((out + noisy.broadcast_mul(&gain)?)?)
    }
}
