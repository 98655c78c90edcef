//! Hierarchical mixture-of-experts voxel encoder.
//!
//! Level 0 splits all voxels among `root_experts` experts; every later level
//! splits each parent expert's voxels among its `branching` children, whose
//! router input is the parent's per-voxel output features.

mod forward;
mod loss;
mod routing;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, RngStream, Tensor};

pub use forward::{
    aggregate, encode, encode_batch, expert_forward, EncodeOptions, EncodeOutput,
    ExpertEmbeddingSet, ExpertOutput, HierarchyAssignment, LevelAssignment, validate_assignment,
};
pub use loss::{
    contrastive_loss, load_balance_loss, load_balance_value, stage1_loss, Stage1Terms,
    Stage1Weights,
};
pub use routing::{assign_topk, router_affinity, voxel_features};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HierarchyConfig {
    pub levels: usize,
    pub root_experts: usize,
    pub branching: usize,
    /// Width of the per-voxel identity embedding U.
    pub d_u: usize,
    /// Per-voxel feature width inside experts.
    pub d_f: usize,
    /// Target embedding width D.
    pub d_embed: usize,
    pub capacity: f64,
    pub activation: Activation,
}

impl Default for HierarchyConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            root_experts: 2,
            branching: 2,
            d_u: 8,
            d_f: 16,
            d_embed: 32,
            capacity: 1.0,
            activation: Activation::Gelu,
        }
    }
}

impl HierarchyConfig {
    pub fn experts_at(&self, level: usize) -> usize {
        self.root_experts * self.branching.pow(level as u32)
    }

    pub fn expert_counts(&self) -> Vec<usize> {
        (0..self.levels).map(|l| self.experts_at(l)).collect()
    }

    /// Children of expert `parent` at `level` (level 0 has the single root as parent).
    pub fn children(&self, level: usize, parent: usize) -> std::ops::Range<usize> {
        if level == 0 {
            0..self.root_experts
        } else {
            parent * self.branching..(parent + 1) * self.branching
        }
    }

    pub fn validate(&self, voxels: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.levels == 0 || self.root_experts == 0 || self.branching == 0 {
            return bad("levels, root_experts and branching must be positive".into());
        }
        if self.d_u == 0 || self.d_f == 0 || self.d_embed == 0 {
            return bad("embedding widths must be positive".into());
        }
        if !(self.capacity > 0.0 && self.capacity <= 1.0) {
            return bad(format!("capacity factor {} outside (0, 1]", self.capacity));
        }
        let finest = self.experts_at(self.levels - 1);
        if finest > voxels {
            return bad(format!("{finest} final-level experts for {voxels} voxels"));
        }
        Ok(())
    }

    /// Input width of the level-0 router and experts: activity plus U.
    pub fn input_width(&self) -> usize {
        1 + self.d_u
    }

    fn level_input_width(&self, level: usize) -> usize {
        if level == 0 {
            self.input_width()
        } else {
            self.d_f
        }
    }
}

/// Parameter handles of one expert.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExpertIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub img_w: ParamId,
    pub img_b: ParamId,
    pub text_w: ParamId,
    pub text_b: ParamId,
}

impl ExpertIds {
    pub fn all(&self) -> [ParamId; 8] {
        [
            self.w1,
            self.b1,
            self.w2,
            self.b2,
            self.img_w,
            self.img_b,
            self.text_w,
            self.text_b,
        ]
    }
}

/// Parameter handles of the whole encoder inside a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: HierarchyConfig,
    pub voxels: usize,
    pub u: ParamId,
    pub routers: Vec<ParamId>,
    pub experts: Vec<Vec<ExpertIds>>,
}

pub const ENCODER_PREFIX: &str = "encoder.";

fn expert_name(level: usize, j: usize, part: &str) -> String {
    format!("{ENCODER_PREFIX}l{level}.e{j}.{part}")
}

fn router_name(level: usize) -> String {
    format!("{ENCODER_PREFIX}router{level}")
}

const U_NAME: &str = "encoder.U";
const EXPERT_PARTS: [&str; 8] = ["w1", "b1", "w2", "b2", "img_w", "img_b", "text_w", "text_b"];

impl Encoder {
    /// Register freshly initialized encoder parameters in `store`.
    pub fn init(
        config: HierarchyConfig,
        voxels: usize,
        store: &mut ParamStore,
        rng: &mut RngStream,
    ) -> Result<Self> {
        config.validate(voxels)?;
        let u = store.add(U_NAME, rng.normal_tensor(voxels, config.d_u, 1.0));
        let mut routers = Vec::new();
        let mut experts = Vec::new();
        let (df, de) = (config.d_f, config.d_embed);
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        for l in 0..config.levels {
            let din = config.level_input_width(l);
            let e = config.experts_at(l);
            routers.push(store.add(router_name(l), rng.normal_tensor(din, e, fan(din))));
            let mut level = Vec::with_capacity(e);
            for j in 0..e {
                let mut add = |part: &str, t: Tensor| store.add(expert_name(l, j, part), t);
                level.push(ExpertIds {
                    w1: add("w1", rng.normal_tensor(din, df, fan(din))),
                    b1: add("b1", Tensor::zeros(1, df)),
                    w2: add("w2", rng.normal_tensor(df, df, fan(df))),
                    b2: add("b2", Tensor::zeros(1, df)),
                    img_w: add("img_w", rng.normal_tensor(df, de, fan(df))),
                    img_b: add("img_b", Tensor::zeros(1, de)),
                    text_w: add("text_w", rng.normal_tensor(df, de, fan(df))),
                    text_b: add("text_b", Tensor::zeros(1, de)),
                });
            }
            experts.push(level);
        }
        Ok(Self {
            config,
            voxels,
            u,
            routers,
            experts,
        })
    }

    /// Re-attach to encoder parameters already present in `store`, checking shapes.
    pub fn bind(config: HierarchyConfig, voxels: usize, store: &ParamStore) -> Result<Self> {
        config.validate(voxels)?;
        let find = |name: String, shape: [usize; 2]| store.lookup(&name, &shape);
        let (df, de) = (config.d_f, config.d_embed);
        let u = find(U_NAME.into(), [voxels, config.d_u])?;
        let mut routers = Vec::new();
        let mut experts = Vec::new();
        for l in 0..config.levels {
            let din = config.level_input_width(l);
            let e = config.experts_at(l);
            routers.push(find(router_name(l), [din, e])?);
            let mut level = Vec::with_capacity(e);
            for j in 0..e {
                let shapes = [
                    [din, df],
                    [1, df],
                    [df, df],
                    [1, df],
                    [df, de],
                    [1, de],
                    [df, de],
                    [1, de],
                ];
                let ids: Vec<ParamId> = EXPERT_PARTS
                    .iter()
                    .zip(shapes)
                    .map(|(part, s)| find(expert_name(l, j, part), s))
                    .collect::<Result<_>>()?;
                level.push(ExpertIds {
                    w1: ids[0],
                    b1: ids[1],
                    w2: ids[2],
                    b2: ids[3],
                    img_w: ids[4],
                    img_b: ids[5],
                    text_w: ids[6],
                    text_b: ids[7],
                });
            }
            experts.push(level);
        }
        Ok(Self {
            config,
            voxels,
            u,
            routers,
            experts,
        })
    }

    /// U and every W_r: the set trained by router-only finetuning.
    pub fn router_ids(&self) -> Vec<ParamId> {
        std::iter::once(self.u).chain(self.routers.iter().copied()).collect()
    }

    pub fn expert_ids(&self) -> Vec<ParamId> {
        self.experts
            .iter()
            .flatten()
            .flat_map(|e| e.all())
            .collect()
    }

    pub fn all_ids(&self) -> Vec<ParamId> {
        let mut ids = self.router_ids();
        ids.extend(self.expert_ids());
        ids
    }
}
