//! Synthetic subjects with planted functional voxel groups.
//!
//! A world fixes the group structure, per-voxel weights and the target maps;
//! a subject is a voxel permutation plus gains; a dataset is a stream of
//! stimuli rendered through both.

mod io;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{RngStream, Tensor};

pub use io::{
    load_dataset, load_manifest, manifest_path, save_dataset, DatasetManifest, FORMAT_VERSION,
    HEADER_BYTES, MAGIC,
};

const WORLD_STREAM: u64 = 0x574F_524C;
const SUBJECT_STREAM: u64 = 0x5355_424A;
const DATA_STREAM: u64 = 0x4441_5441;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldSpec {
    pub groups: usize,
    pub voxels: usize,
    /// Stimulus latent width d.
    pub latent: usize,
    /// Target embedding width D.
    pub target: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            groups: 16,
            voxels: 128,
            latent: 8,
            target: 32,
            noise: 0.1,
            seed: 0,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.voxels == 0 || self.latent == 0 || self.target == 0 {
            return Err(Error::Config("world sizes must be positive".into()));
        }
        if !self.voxels.is_multiple_of(self.groups) {
            return Err(Error::Config(format!(
                "{} groups do not divide {} voxels",
                self.groups, self.voxels
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise {} must be finite and ≥ 0", self.noise)));
        }
        Ok(())
    }

    pub fn group_size(&self) -> usize {
        self.voxels / self.groups
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub spec: WorldSpec,
    /// Planted group of each pre-permutation voxel.
    pub gamma: Vec<usize>,
    /// G × d unit-norm loading rows.
    pub loadings: Tensor,
    /// Per-voxel response weight, ~N(1, 0.1²).
    pub weights: Vec<f64>,
    /// D × d
    pub m_img: Tensor,
    pub m_text: Tensor,
}

pub fn gen_world(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let mut rng = RngStream::new(spec.seed, WORLD_STREAM);
    let (g, d) = (spec.groups, spec.latent);
    let gamma = (0..spec.voxels).map(|i| i / spec.group_size()).collect();
    let mut loadings = rng.normal_tensor(g, d, 1.0);
    for r in 0..g {
        let row = &mut loadings.data_mut()[r * d..(r + 1) * d];
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= n);
    }
    let weights = (0..spec.voxels).map(|_| 1.0 + 0.1 * rng.normal()).collect();
    let m_img = rng.normal_tensor(spec.target, d, 1.0);
    let m_text = rng.normal_tensor(spec.target, d, 1.0);
    Ok(World {
        spec: spec.clone(),
        gamma,
        loadings,
        weights,
        m_img,
        m_text,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub id: u64,
    /// `perm[j]` is the subject position of pre-permutation voxel `j`.
    pub perm: Vec<usize>,
    /// Gain at each subject position.
    pub gains: Vec<f64>,
}

pub fn gen_subject(world: &World, subject_seed: u64) -> Subject {
    let v = world.spec.voxels;
    if subject_seed == 0 {
        return Subject {
            id: 0,
            perm: (0..v).collect(),
            gains: vec![1.0; v],
        };
    }
    let mut rng = RngStream::new(subject_seed, SUBJECT_STREAM);
    let perm = rng.permutation(v);
    let gains = (0..v).map(|_| rng.uniform_range(0.8, 1.2)).collect();
    Subject {
        id: subject_seed,
        perm,
        gains,
    }
}

impl Subject {
    /// `inverse()[i]` is the pre-permutation voxel seen at subject position `i`.
    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.perm.len()];
        for (j, &p) in self.perm.iter().enumerate() {
            inv[p] = j;
        }
        inv
    }

    /// x = g ⊙ (r ∘ π⁻¹).
    pub fn view(&self, r: &[f64]) -> Vec<f64> {
        self.inverse()
            .iter()
            .zip(&self.gains)
            .map(|(&j, g)| g * r[j])
            .collect()
    }

    /// Planted group of every subject-space voxel.
    pub fn planted(&self, world: &World) -> Vec<usize> {
        self.inverse().iter().map(|&j| world.gamma[j]).collect()
    }
}

/// One stimulus with its responses and targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y_img: Vec<f64>,
    pub y_text: Vec<f64>,
    pub s: Vec<f64>,
}

fn map_normalized(m: &Tensor, s: &[f64]) -> Vec<f64> {
    let y: Vec<f64> = (0..m.rows())
        .map(|r| m.row_slice(r).iter().zip(s).map(|(a, b)| a * b).sum())
        .collect();
    let n = y.iter().map(|x| x * x).sum::<f64>().sqrt();
    // s = 0 maps to the zero target rather than NaN
    if n == 0.0 {
        y
    } else {
        y.into_iter().map(|x| x / n).collect()
    }
}

/// Pre-permutation responses r_i = (b_γ(i)·s)·w_i + σ_n·η_i.
pub fn responses(world: &World, s: &[f64], eta: &[f64]) -> Vec<f64> {
    let d = world.spec.latent;
    let z: Vec<f64> = (0..world.spec.groups)
        .map(|g| world.loadings.row_slice(g).iter().zip(&s[..d]).map(|(a, b)| a * b).sum())
        .collect();
    world
        .gamma
        .iter()
        .zip(&world.weights)
        .zip(eta)
        .map(|((&g, w), e)| z[g] * w + world.spec.noise * e)
        .collect()
}

/// Render one stimulus in full precision.
pub fn render(world: &World, subject: &Subject, s: &[f64], eta: &[f64]) -> Sample {
    Sample {
        x: subject.view(&responses(world, s, eta)),
        y_img: map_normalized(&world.m_img, s),
        y_text: map_normalized(&world.m_text, s),
        s: s.to_vec(),
    }
}

/// n samples stacked row-wise; values are rounded to f32 so that what is in
/// memory is exactly what a dataset file stores.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub y_img: Tensor,
    pub y_text: Tensor,
    pub s: Tensor,
}

fn quantized(v: &[f64]) -> impl Iterator<Item = f64> + '_ {
    v.iter().map(|&x| x as f32 as f64)
}

impl Dataset {
    pub fn from_samples(samples: &[Sample]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::invalid("dataset", "no samples"))?;
        let n = samples.len();
        let widths = [first.x.len(), first.y_img.len(), first.y_text.len(), first.s.len()];
        let mut cols: [Vec<f64>; 4] = Default::default();
        for smp in samples {
            for (k, part) in [&smp.x, &smp.y_img, &smp.y_text, &smp.s].into_iter().enumerate() {
                if part.len() != widths[k] {
                    return Err(Error::shape("dataset", "samples of unequal width"));
                }
                cols[k].extend(quantized(part));
            }
        }
        let [x, yi, yt, s] = cols;
        Ok(Self {
            x: Tensor::matrix(n, widths[0], x)?,
            y_img: Tensor::matrix(n, widths[1], yi)?,
            y_text: Tensor::matrix(n, widths[2], yt)?,
            s: Tensor::matrix(n, widths[3], s)?,
        })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn voxels(&self) -> usize {
        self.x.cols()
    }

    pub fn target(&self) -> usize {
        self.y_img.cols()
    }

    pub fn latent(&self) -> usize {
        self.s.cols()
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        let pick = |t: &Tensor| {
            let rows: Vec<&[f64]> = idx.iter().map(|&i| t.row_slice(i)).collect();
            if rows.is_empty() {
                Tensor::zeros(0, t.cols())
            } else {
                Tensor::from_rows(&rows)
            }
        };
        Dataset {
            x: pick(&self.x),
            y_img: pick(&self.y_img),
            y_text: pick(&self.y_text),
            s: pick(&self.s),
        }
    }

    /// First `n` samples and the rest.
    pub fn split(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        (self.select(&head), self.select(&tail))
    }
}

/// `n` samples; sample `i` draws its stimulus and noise from its own derived
/// stream, so any subset can be regenerated independently.
pub fn gen_dataset(world: &World, subject: &Subject, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::invalid("gen_dataset", "n must be at least 1"));
    }
    if subject.perm.len() != world.spec.voxels {
        return Err(Error::shape("gen_dataset", "subject and world voxel counts differ"));
    }
    let base = RngStream::new(seed, DATA_STREAM);
    let samples: Vec<Sample> = (0..n as u64)
        .map(|i| {
            let mut rng = base.derive(i);
            let s = rng.normals(world.spec.latent);
            let eta = rng.normals(world.spec.voxels);
            render(world, subject, &s, &eta)
        })
        .collect();
    Dataset::from_samples(&samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WorldSpec {
        WorldSpec {
            groups: 4,
            voxels: 16,
            ..WorldSpec::default()
        }
    }

    #[test]
    fn groups_are_contiguous_blocks() {
        let w = gen_world(&small()).unwrap();
        let expect: Vec<usize> = [0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2, 3, 3, 3, 3].to_vec();
        assert_eq!(w.gamma, expect);
    }

    #[test]
    fn indivisible_groups_rejected() {
        let spec = WorldSpec {
            groups: 5,
            ..small()
        };
        assert!(matches!(gen_world(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn world_is_deterministic_with_unit_loadings() {
        let spec = WorldSpec::default();
        let (a, b) = (gen_world(&spec).unwrap(), gen_world(&spec).unwrap());
        assert_eq!(a, b);
        for g in 0..spec.groups {
            let n: f64 = a.loadings.row_slice(g).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
        let other = gen_world(&WorldSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a.loadings, other.loadings);
    }

    #[test]
    fn canonical_subject_and_bijection() {
        let w = gen_world(&WorldSpec::default()).unwrap();
        let s0 = gen_subject(&w, 0);
        assert_eq!(s0.perm, (0..128).collect::<Vec<_>>());
        assert!(s0.gains.iter().all(|&g| g == 1.0));
        let s = gen_subject(&w, 7);
        let mut sorted = s.perm.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..128).collect::<Vec<_>>());
        assert_ne!(s.perm, s0.perm);
    }

    #[test]
    fn gains_stay_in_range() {
        let w = gen_world(&WorldSpec::default()).unwrap();
        let mut count = 0;
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for seed in 1..=79 {
            for &g in &gen_subject(&w, seed).gains {
                assert!((0.8..=1.2).contains(&g));
                lo = lo.min(g);
                hi = hi.max(g);
                count += 1;
            }
        }
        assert!(count >= 10_000);
        // the draws fill the interval
        assert!(lo < 0.801 && hi > 1.199, "{lo} {hi}");
    }

    #[test]
    fn silent_noiseless_stimulus_gives_zero_response() {
        let spec = WorldSpec {
            noise: 0.0,
            ..WorldSpec::default()
        };
        let w = gen_world(&spec).unwrap();
        let smp = render(&w, &gen_subject(&w, 3), &[0.0; 8], &vec![1.0; 128]);
        assert!(smp.x.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn targets_are_unit_norm() {
        let w = gen_world(&WorldSpec::default()).unwrap();
        let ds = gen_dataset(&w, &gen_subject(&w, 2), 200, 5).unwrap();
        for t in [&ds.y_img, &ds.y_text] {
            for r in 0..t.rows() {
                let n: f64 = t.row_slice(r).iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn noise_variance_matches_sigma() {
        let w = gen_world(&WorldSpec::default()).unwrap();
        let ds = gen_dataset(&w, &gen_subject(&w, 0), 10_000, 11).unwrap();
        let n = ds.len() as f64;
        for i in (0..128).step_by(9) {
            let b = w.loadings.row_slice(w.gamma[i]);
            let var = (0..ds.len())
                .map(|k| {
                    let sig: f64 = b.iter().zip(ds.s.row_slice(k)).map(|(a, c)| a * c).sum::<f64>() * w.weights[i];
                    (ds.x.get(k, i) - sig).powi(2)
                })
                .sum::<f64>()
                / n;
            assert!((var / 0.01 - 1.0).abs() < 0.05, "voxel {i}: {var}");
        }
    }

    #[test]
    fn subjects_differ_by_permutation_and_gains() {
        let w = gen_world(&WorldSpec::default()).unwrap();
        let (a, b) = (gen_subject(&w, 0), gen_subject(&w, 9));
        let mut rng = RngStream::new(4, 0);
        for _ in 0..20 {
            let s = rng.normals(8);
            let eta = rng.normals(128);
            let xa = render(&w, &a, &s, &eta).x;
            let xb = render(&w, &b, &s, &eta).x;
            for j in 0..128 {
                let p = b.perm[j];
                assert_eq!(xb[p], b.gains[p] * xa[j]);
            }
        }
        let planted = b.planted(&w);
        for j in 0..128 {
            assert_eq!(planted[b.perm[j]], w.gamma[j]);
        }
    }

    #[test]
    fn within_group_correlation_exceeds_across() {
        let w = gen_world(&WorldSpec::default()).unwrap();
        let ds = gen_dataset(&w, &gen_subject(&w, 0), 2000, 3).unwrap();
        let n = ds.len();
        let col = |i: usize| -> Vec<f64> {
            let c: Vec<f64> = (0..n).map(|k| ds.x.get(k, i)).collect();
            let m = c.iter().sum::<f64>() / n as f64;
            let c: Vec<f64> = c.iter().map(|x| x - m).collect();
            let s = c.iter().map(|x| x * x).sum::<f64>().sqrt();
            c.iter().map(|x| x / s).collect()
        };
        let cols: Vec<Vec<f64>> = (0..128).map(col).collect();
        let (mut within, mut across, mut nw, mut na) = (0.0, 0.0, 0, 0);
        for i in 0..128 {
            for j in i + 1..128 {
                let r: f64 = cols[i].iter().zip(&cols[j]).map(|(a, b)| a * b).sum();
                if w.gamma[i] == w.gamma[j] {
                    within += r;
                    nw += 1;
                } else {
                    across += r.abs();
                    na += 1;
                }
            }
        }
        let (within, across) = (within / nw as f64, across / na as f64);
        assert!(within > 0.95 && within > across, "{within} vs {across}");
    }

    #[test]
    fn samples_regenerate_independently() {
        let w = gen_world(&small()).unwrap();
        let s = gen_subject(&w, 1);
        let all = gen_dataset(&w, &s, 10, 2).unwrap();
        let few = gen_dataset(&w, &s, 3, 2).unwrap();
        assert_eq!(all.select(&[0, 1, 2]), few);
        let (head, tail) = all.split(7);
        assert_eq!((head.len(), tail.len()), (7, 3));
    }
}
