//! Training loops, evaluation protocols, metrics and persistence.

mod analysis;
pub mod checkpoint;
pub mod config;
mod finetune;
pub mod integrity;
pub mod metrics;
mod stage1;
mod stage2;

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::RngStream;
use crate::world::{
    gen_dataset, gen_subject, gen_world, load_dataset, load_manifest, save_dataset, Dataset, DatasetManifest, Subject,
    World, FORMAT_VERSION,
};

pub use analysis::{
    attribute, bottleneck_eval, cosine_readout, expected_gradients, modal_final_labels, partition_recovery,
    random_input_cosine, random_inputs, ridge_oracle, routing_stats, Attribution, AttributionConfig, BottleneckRow,
    PartitionRecovery, PrincipalSubspace, RoutingStats,
};
pub use checkpoint::{Checkpoint, AUX_PREFIX, CheckpointManifest, TensorEntry};
pub use config::{DataConfig, EvalSection, FinetuneSection, RunConfig, Stage1Section, Stage2Section, TrainConfig, FRACTIONS};
pub use finetune::{finetune_routers, match_voxels, FinetuneRun};
pub use metrics::{
    cosine, mean_cosine, midranks, moving_average, mse, rand_index, random_partition_baseline, spearman, write_csv,
    MetricsReport, Ridge,
};
pub use stage2::{bind_encoder, bind_stage2, expected_levels, latents, mean_time_kl, sample_mse, train_stage2, Stage2Run};
pub use stage1::{encode_all, evaluate, predict, train_stage1, voxel_fingerprints, Stage1Run, FINGERPRINT_NAME};

/// A subject's train/test split together with the world that generated it.
#[derive(Clone, Debug)]
pub struct Splits {
    pub world: World,
    pub subject: Subject,
    pub train: Dataset,
    pub test: Dataset,
}

/// Seed of one (subject, split) dataset stream.
pub fn split_seed(data_seed: u64, subject: u64, split: u64) -> u64 {
    RngStream::new(data_seed, 2 * subject + split + 1).next_u64()
}

/// Generate (or load, if `cfg.dir` is set) the split of `subject`.
pub fn build_data(cfg: &DataConfig, subject: u64) -> Result<Splits> {
    let world = gen_world(&cfg.world)?;
    let subj = gen_subject(&world, subject);
    if let Some(dir) = &cfg.dir {
        let load = |name: &str| -> Result<Dataset> {
            let p = dir.join(format!("{name}_s{subject}.mrbd"));
            let m = load_manifest(&p)?;
            if m.spec != cfg.world || m.subject != subject {
                return Err(Error::Config(format!("{} was generated for another world or subject", p.display())));
            }
            load_dataset(&p)
        };
        return Ok(Splits {
            train: load("train")?,
            test: load("test")?,
            world,
            subject: subj,
        });
    }
    let train = gen_dataset(&world, &subj, cfg.n_train, split_seed(cfg.data_seed, subject, 0))?;
    let test = gen_dataset(&world, &subj, cfg.n_test, split_seed(cfg.data_seed, subject, 1))?;
    Ok(Splits {
        world,
        subject: subj,
        train,
        test,
    })
}

/// Write `train_s{id}.mrbd` and `test_s{id}.mrbd` (plus manifests) into `dir`.
pub fn write_data(cfg: &DataConfig, splits: &Splits, dir: &Path) -> Result<()> {
    let id = splits.subject.id;
    for (split, (name, ds)) in [("train", &splits.train), ("test", &splits.test)].into_iter().enumerate() {
        let manifest = DatasetManifest {
            format_version: FORMAT_VERSION,
            spec: cfg.world.clone(),
            subject: id,
            data_seed: split_seed(cfg.data_seed, id, split as u64),
            n: ds.len() as u64,
        };
        save_dataset(&dir.join(format!("{name}_s{id}.mrbd")), ds, &manifest)?;
    }
    Ok(())
}
