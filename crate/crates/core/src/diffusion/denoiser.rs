use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::routers::{block_attention, time_embedding};
use crate::tensor::{ParamId, ParamStore, RngStream, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub n_z: usize,
    pub d_z: usize,
    pub d_h: usize,
    /// Attention width of the cross-attention blocks.
    pub d_attn: usize,
    /// Time-embedding width.
    pub d_t: usize,
    pub blocks: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            n_z: 4,
            d_z: 16,
            d_h: 32,
            d_attn: 16,
            d_t: 16,
            blocks: 2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BlockIds {
    pub q: ParamId,
    pub k: ParamId,
    pub v: ParamId,
    pub m1: ParamId,
    pub m2: ParamId,
}

/// Token-wise MLP trunk with cross-attention blocks reading the conditioning
/// tokens, plus a learned null token for the unconditional branch.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub d_c: usize,
    pub w_in: ParamId,
    pub b_in: ParamId,
    pub w_t: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<BlockIds>,
    pub w_out: ParamId,
    pub b_out: ParamId,
    pub null: ParamId,
}

/// Conditioning fed to one batched denoiser call.
#[derive(Clone, Copy, Debug)]
pub enum Cond<'a> {
    /// (B·n_z) × d_c routed tokens.
    Tokens(Var),
    /// Null token for every sample.
    Null,
    /// Routed tokens, except samples flagged `true` get the null token.
    Dropped(Var, &'a [bool]),
}

fn spec(c: &DenoiserConfig, d_c: usize) -> Vec<(String, [usize; 2], f64)> {
    let s = |n: usize| 1.0 / (n as f64).sqrt();
    let mut v = vec![
        ("denoiser.w_in".to_string(), [c.d_z, c.d_h], s(c.d_z)),
        ("denoiser.b_in".to_string(), [1, c.d_h], 0.0),
        ("denoiser.w_t".to_string(), [c.d_t, c.d_h], s(c.d_t)),
        ("denoiser.pos".to_string(), [c.n_z, c.d_h], 0.1),
    ];
    for b in 0..c.blocks {
        v.push((format!("denoiser.block{b}.q"), [c.d_h, c.d_attn], s(c.d_h)));
        v.push((format!("denoiser.block{b}.k"), [d_c, c.d_attn], s(d_c)));
        v.push((format!("denoiser.block{b}.v"), [d_c, c.d_h], s(d_c)));
        v.push((format!("denoiser.block{b}.m1"), [c.d_h, c.d_h], s(c.d_h)));
        v.push((format!("denoiser.block{b}.m2"), [c.d_h, c.d_h], s(c.d_h)));
    }
    // zero output layer: the untrained network predicts ε̂ = 0
    v.push(("denoiser.w_out".to_string(), [c.d_h, c.d_z], 0.0));
    v.push(("denoiser.b_out".to_string(), [1, c.d_z], 0.0));
    v.push(("denoiser.null".to_string(), [1, d_c], 0.0));
    v
}

impl Denoiser {
    pub fn init(config: DenoiserConfig, d_c: usize, store: &mut ParamStore, rng: &mut RngStream) -> Result<Self> {
        Self::validate(&config)?;
        let ids: Vec<ParamId> = spec(&config, d_c)
            .into_iter()
            .map(|(name, [r, c], std)| {
                let t = if std == 0.0 {
                    Tensor::zeros(r, c)
                } else {
                    rng.normal_tensor(r, c, std)
                };
                store.add(name, t)
            })
            .collect();
        Ok(Self::from_ids(config, d_c, &ids))
    }

    pub fn bind(config: DenoiserConfig, d_c: usize, store: &ParamStore) -> Result<Self> {
        Self::validate(&config)?;
        let ids: Vec<ParamId> = spec(&config, d_c)
            .into_iter()
            .map(|(name, shape, _)| store.lookup(&name, &shape))
            .collect::<Result<_>>()?;
        Ok(Self::from_ids(config, d_c, &ids))
    }

    fn validate(c: &DenoiserConfig) -> Result<()> {
        if c.n_z == 0 || c.d_z == 0 || c.d_h == 0 || c.d_attn == 0 || c.d_t < 4 || !c.d_t.is_multiple_of(2) {
            return Err(Error::Config("denoiser widths must be positive, d_t even ≥ 4".into()));
        }
        Ok(())
    }

    fn from_ids(config: DenoiserConfig, d_c: usize, ids: &[ParamId]) -> Self {
        let nb = config.blocks;
        let blocks = (0..nb)
            .map(|b| {
                let o = 4 + 5 * b;
                BlockIds {
                    q: ids[o],
                    k: ids[o + 1],
                    v: ids[o + 2],
                    m1: ids[o + 3],
                    m2: ids[o + 4],
                }
            })
            .collect();
        let tail = 4 + 5 * nb;
        Self {
            config,
            d_c,
            w_in: ids[0],
            b_in: ids[1],
            w_t: ids[2],
            pos: ids[3],
            blocks,
            w_out: ids[tail],
            b_out: ids[tail + 1],
            null: ids[tail + 2],
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.w_in, self.b_in, self.w_t, self.pos];
        for b in &self.blocks {
            v.extend([b.q, b.k, b.v, b.m1, b.m2]);
        }
        v.extend([self.w_out, self.b_out, self.null]);
        v
    }

    /// ε̂ for a batch: `z` is (B·n_z) × d_z, `t` the noise index per sample.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, z: Var, t: &[usize], cond: Cond) -> Result<Var> {
        let c = &self.config;
        let batch = t.len();
        if tape.value(z).shape() != [batch * c.n_z, c.d_z] {
            return Err(Error::shape(
                "denoise",
                format!("latent {:?} for batch {batch}", tape.value(z).shape()),
            ));
        }
        let (cv, k_off) = self.cond_rows(tape, store, cond, batch)?;
        let q_off: Vec<usize> = (0..=batch).map(|b| b * c.n_z).collect();

        let temb: Vec<f64> = t
            .iter()
            .flat_map(|&ti| {
                let e = time_embedding(ti as f64, c.d_t);
                std::iter::repeat_n(e, c.n_z).flatten()
            })
            .collect();
        let temb = tape.constant(Tensor::matrix(batch * c.n_z, c.d_t, temb)?);
        let p = |tape: &mut Tape, id| tape.param(store, id);
        let (w_in, b_in, w_t, pos) = (p(tape, self.w_in), p(tape, self.b_in), p(tape, self.w_t), p(tape, self.pos));
        let pos_idx: Vec<usize> = (0..batch * c.n_z).map(|r| r % c.n_z).collect();
        let pos = tape.gather_rows(pos, &pos_idx)?;
        let h = tape.linear(z, w_in, b_in)?;
        let ht = tape.matmul(temb, w_t)?;
        let h = tape.add(h, ht)?;
        let h = tape.add(h, pos)?;
        let mut h = tape.gelu(h);
        for blk in &self.blocks {
            let (wq, wk, wv) = (p(tape, blk.q), p(tape, blk.k), p(tape, blk.v));
            let (m1, m2) = (p(tape, blk.m1), p(tape, blk.m2));
            let q = tape.matmul(h, wq)?;
            let k = tape.matmul(cv, wk)?;
            let v = tape.matmul(cv, wv)?;
            let (att, _) = block_attention(tape, q, k, v, &q_off, &k_off)?;
            h = tape.add(h, att)?;
            let m = tape.matmul(h, m1)?;
            let m = tape.gelu(m);
            let m = tape.matmul(m, m2)?;
            h = tape.add(h, m)?;
        }
        let (w_out, b_out) = (p(tape, self.w_out), p(tape, self.b_out));
        tape.linear(h, w_out, b_out)
    }

    fn cond_rows(&self, tape: &mut Tape, store: &ParamStore, cond: Cond, batch: usize) -> Result<(Var, Vec<usize>)> {
        let n_z = self.config.n_z;
        let check = |tape: &Tape, v: Var| -> Result<()> {
            if tape.value(v).shape() != [batch * n_z, self.d_c] {
                return Err(Error::shape(
                    "denoise",
                    format!("conditioning {:?}, expected {} × {}", tape.value(v).shape(), batch * n_z, self.d_c),
                ));
            }
            Ok(())
        };
        match cond {
            Cond::Tokens(v) => {
                check(tape, v)?;
                Ok((v, (0..=batch).map(|b| b * n_z).collect()))
            }
            Cond::Null => {
                let null = tape.param(store, self.null);
                let rows = tape.gather_rows(null, &vec![0; batch])?;
                Ok((rows, (0..=batch).collect()))
            }
            Cond::Dropped(v, drop) => {
                check(tape, v)?;
                if drop.len() != batch {
                    return Err(Error::shape("denoise", "drop mask length differs from batch"));
                }
                if !drop.iter().any(|&d| d) {
                    return Ok((v, (0..=batch).map(|b| b * n_z).collect()));
                }
                let null = tape.param(store, self.null);
                let all = tape.concat_rows(&[v, null])?;
                let mut idx = Vec::new();
                let mut off = vec![0];
                for (b, &d) in drop.iter().enumerate() {
                    if d {
                        idx.push(batch * n_z);
                    } else {
                        idx.extend(b * n_z..(b + 1) * n_z);
                    }
                    off.push(idx.len());
                }
                Ok((tape.gather_rows(all, &idx)?, off))
            }
        }
    }
}

/// ε̂ for one latent (n_z × d_z); `c = None` selects the null token.
pub fn denoise(
    den: &Denoiser,
    store: &ParamStore,
    z: &Tensor,
    t: usize,
    c: Option<&Tensor>,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let cond = match c {
        Some(c) => Cond::Tokens(tape.constant(c.clone())),
        None => Cond::Null,
    };
    let out = den.forward(&mut tape, store, zv, &[t], cond)?;
    Ok(tape.value(out).clone())
}
