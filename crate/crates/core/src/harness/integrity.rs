//! Central-difference checks of the three training objectives on miniature models.

use crate::diffusion::{DenoiserConfig, Stage2Config, Stage2Draws, Stage2Model};
use crate::encoder::{encode_batch, stage1_loss, EncodeOptions, Encoder, HierarchyConfig, Stage1Weights};
use crate::error::Result;
use crate::routers::{kl_penalty_batch, SpaceRouterConfig, TimeRouterConfig};
use crate::tensor::{grad_check_store, GradCheckReport, ParamId, ParamStore, RngStream, Tape, Tensor};

/// Fourth-order stencil step; at 1e-6 the two-point oracle is roundoff-bound
/// on these losses (its error grows as the step shrinks).
const STEP: f64 = 1e-3;

/// Replace every listed tensor with N(0, std²) draws so no gradient path is
/// hidden behind a zero initialization.
fn randomize(store: &mut ParamStore, ids: &[ParamId], rng: &mut RngStream, std: f64) -> Result<()> {
    for &id in ids {
        let (r, c) = (store.get(id).rows(), store.get(id).cols());
        store.assign(id, rng.normal_tensor(r, c, std))?;
    }
    Ok(())
}

/// Stage-1 loss through a 2-level MoE (8 voxels, batch 3) w.r.t. every
/// encoder parameter. Routing is held at the unperturbed assignment, since
/// top-k selection is piecewise constant.
pub fn stage1_gradients(seed: u64) -> Result<GradCheckReport> {
    let cfg = HierarchyConfig {
        levels: 2,
        root_experts: 2,
        branching: 2,
        d_u: 2,
        d_f: 3,
        d_embed: 4,
        ..HierarchyConfig::default()
    };
    let mut rng = RngStream::new(seed, 0);
    let mut store = ParamStore::new();
    let enc = Encoder::init(cfg, 8, &mut store, &mut rng)?;
    randomize(&mut store, &enc.all_ids(), &mut rng, 0.7)?;
    let x = rng.normal_tensor(3, 8, 1.0);
    let gi = rng.normal_tensor(3, 4, 0.5);
    let gt = rng.normal_tensor(3, 4, 0.5);
    let routing = {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        encode_batch(&mut tape, &enc, &store, xv, EncodeOptions::default())?.assignments
    };
    let w = Stage1Weights::default();
    grad_check_store(
        |tape, s| {
            let xv = tape.constant(x.clone());
            let opts = EncodeOptions {
                assignment: Some(&routing),
                keep_probs: false,
            };
            let out = encode_batch(tape, &enc, s, xv, opts)?;
            let (a, b) = (tape.constant(gi.clone()), tape.constant(gt.clone()));
            Ok(stage1_loss(tape, &out, a, b, &w)?.total)
        },
        &store,
        &enc.all_ids(),
        STEP,
    )
}

fn miniature(seed: u64, t_max: usize) -> Result<(Stage2Model, ParamStore, Vec<Tensor>, Vec<Tensor>, RngStream)> {
    let cfg = Stage2Config {
        t_max,
        time: TimeRouterConfig {
            d_t: 4,
            d_k: 3,
            ..TimeRouterConfig::default()
        },
        space: SpaceRouterConfig { d_a: 3, d_c: 4 },
        denoiser: DenoiserConfig {
            n_z: 2,
            d_z: 4,
            d_h: 6,
            d_attn: 3,
            d_t: 4,
            blocks: 1,
        },
        ..Stage2Config::default()
    };
    let mut rng = RngStream::new(seed, 1);
    let mut store = ParamStore::new();
    let sizes = vec![2, 4];
    let rows = 2 * sizes.iter().sum::<usize>();
    let model = Stage2Model::init(cfg, sizes, 4, &mut store, &mut rng)?;
    randomize(&mut store, &model.ids(), &mut rng, 0.6)?;
    let stacked: Vec<Tensor> = (0..2).map(|_| rng.normal_tensor(rows, 4, 0.5)).collect();
    let z0: Vec<Tensor> = (0..2).map(|_| rng.normal_tensor(2, 4, 1.0)).collect();
    Ok((model, store, stacked, z0, rng))
}

/// KL(P_T ‖ guide) plus a random linear readout of the space-routed
/// conditioning, w.r.t. both routers' parameters.
pub fn router_gradients(seed: u64) -> Result<GradCheckReport> {
    let (model, store, stacked, _, mut rng) = miniature(seed, 30)?;
    let z = rng.normal_tensor(4, 4, 1.0);
    let readout = rng.normal_tensor(4, 4, 1.0);
    let t = [3usize, 22];
    let mut ids = model.time.ids();
    ids.extend(model.space.ids());
    let sr: Vec<&Tensor> = stacked.iter().collect();
    grad_check_store(
        |tape, s| {
            let zv = tape.constant(z.clone());
            let cond = model.condition(tape, s, zv, &t, &sr)?;
            let r = tape.constant(readout.clone());
            let prod = tape.mul(cond.c, r)?;
            let lin = tape.sum(prod);
            let guide: Vec<Vec<f64>> = cond.taus.iter().map(|&tau| model.guide(tau)).collect();
            let rows: Vec<&[f64]> = guide.iter().map(Vec::as_slice).collect();
            let kl = kl_penalty_batch(tape, cond.logits, &Tensor::from_rows(&rows))?;
            tape.add(lin, kl)
        },
        &store,
        &ids,
        STEP,
    )
}

/// Full stage-2 loss of a 2-step, 2-level miniature w.r.t. the denoiser and
/// both routers, with fixed noise draws (one sample conditioned, one dropped).
pub fn stage2_gradients(seed: u64) -> Result<GradCheckReport> {
    let (model, store, stacked, z0, mut rng) = miniature(seed, 2)?;
    let draws = Stage2Draws {
        t: vec![0, 1],
        eps: (0..2).map(|_| rng.normal_tensor(2, 4, 1.0)).collect(),
        drop: vec![false, true],
    };
    let zr: Vec<&Tensor> = z0.iter().collect();
    let sr: Vec<&Tensor> = stacked.iter().collect();
    grad_check_store(
        |tape, s| Ok(model.loss_with(tape, s, &zr, &sr, &draws)?.total),
        &store,
        &model.ids(),
        STEP,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn objectives_pass_gradient_checks() {
        for seed in 0..8 {
            for (name, rep) in [
                ("stage1", stage1_gradients(seed).unwrap()),
                ("routers", router_gradients(seed).unwrap()),
                ("stage2", stage2_gradients(seed).unwrap()),
            ] {
                assert!(rep.checked > 0);
                assert!(rep.max_rel_error <= 1e-4, "{name} seed {seed}: {rep:?}");
            }
        }
    }
}
