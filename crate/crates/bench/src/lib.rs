//! Fixtures shared by the kernel benchmarks.

use hiermoe::diffusion::{Stage2Config, Stage2Draws, Stage2Model};
use hiermoe::encoder::{Encoder, HierarchyConfig};
use hiermoe::tensor::{ParamStore, RngStream, Tensor};

/// Default-sized encoder over `voxels` voxels plus a batch of random inputs.
pub fn encoder_fixture(voxels: usize, batch: usize) -> (Encoder, ParamStore, Tensor) {
    let mut store = ParamStore::new();
    let mut rng = RngStream::new(0, 0);
    let enc = Encoder::init(HierarchyConfig::default(), voxels, &mut store, &mut rng).expect("valid default model");
    let x = rng.normal_tensor(batch, voxels, 1.0);
    (enc, store, x)
}

pub struct Stage2Fixture {
    pub model: Stage2Model,
    pub store: ParamStore,
    pub stacked: Vec<Tensor>,
    pub z0: Vec<Tensor>,
    pub draws: Stage2Draws,
}

/// Default stage-2 model over random expert embeddings.
pub fn stage2_fixture(batch: usize) -> Stage2Fixture {
    let cfg = Stage2Config::default();
    let sizes = HierarchyConfig::default().expert_counts();
    let rows = 2 * sizes.iter().sum::<usize>();
    let mut store = ParamStore::new();
    let mut rng = RngStream::new(1, 0);
    let model = Stage2Model::init(cfg, sizes, 32, &mut store, &mut rng).expect("valid default model");
    let stacked = (0..batch).map(|_| rng.normal_tensor(rows, 32, 0.2)).collect();
    let (n_z, d_z) = (model.config.denoiser.n_z, model.config.denoiser.d_z);
    let z0 = (0..batch).map(|_| rng.normal_tensor(n_z, d_z, 1.0)).collect();
    let draws = Stage2Draws::sample(&mut rng, batch, &model.config);
    Stage2Fixture {
        model,
        store,
        stacked,
        z0,
        draws,
    }
}
