//! Dataset generation and the on-disk container.
//!
//! A dataset file is:
//!
//! ```text
//! magic       4 bytes  b"GODS"
//! version     u32 LE   currently 1
//! header_len  u32 LE
//! header      header_len bytes of UTF-8 JSON (DatasetHeader)
//! sample × header.samples:
//!   n_objects   u32
//!   n_relations u32, then (i u32, j u32) per relation with i < j
//!   n_records   u32, then per record: object u32, time f64, features f64 × feature_dim
//! ```
//!
//! All numbers are little-endian. Records are grouped by object and sorted by
//! time within each object.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::observe::{normalize_observations, subsample_irregular_range, ScaleRecord};
use super::physics::{simulate, SimConfig, SystemKind};
use super::{InteractionGraph, Observation, ObservationSet, SimError};

pub const DATASET_MAGIC: &[u8; 4] = b"GODS";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }
}

/// Everything needed to regenerate a dataset bundle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub sim: SimConfig,
    pub train_samples: usize,
    pub val_samples: usize,
    pub test_samples: usize,
    pub n_min: usize,
    pub n_max: usize,
    /// Observations per object drawn from the second half of test trajectories.
    pub extrapolation_points: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            sim: SimConfig { n_objects: 3, ..SimConfig::default() },
            train_samples: 500,
            val_samples: 50,
            test_samples: 100,
            n_min: 40,
            n_max: 52,
            extrapolation_points: 40,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub split: Split,
    pub system: SystemKind,
    pub seed: u64,
    pub config: GenConfig,
    pub feature_dim: usize,
    /// Raw-time horizon of every sample.
    pub horizon: (f64, f64),
    /// Raw time separating conditioning and extrapolation halves (test only).
    pub boundary: Option<f64>,
    pub scale: ScaleRecord,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub samples: Vec<ObservationSet>,
}

impl Dataset {
    /// Raw-time horizon used for time rescaling (the training horizon).
    pub fn training_horizon(&self) -> (f64, f64) {
        self.header.config.sim.horizon()
    }

    /// Smallest and largest per-object observation counts in the whole set.
    pub fn length_range(&self) -> (usize, usize) {
        let lens = self.samples.iter().flat_map(|s| s.objects.iter().map(Vec::len));
        lens.fold((usize::MAX, 0), |(lo, hi), n| (lo.min(n), hi.max(n)))
    }
}

fn mix(mut z: u64) -> u64 {
    // splitmix64 finalizer
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn sample_seed(base: u64, split: Split, index: usize) -> u64 {
    mix(mix(mix(base) ^ split.tag()) ^ index as u64)
}

/// Unnormalized observation sets for one split.
pub fn generate_split(cfg: &GenConfig, split: Split, count: usize) -> Result<Vec<ObservationSet>, SimError> {
    let grid = cfg.sim.grid_len();
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, split, i));
            let mut sim = cfg.sim.clone();
            if split == Split::Test {
                sim.total_steps *= 2;
            }
            let traj = simulate(&sim, &mut rng)?;
            let mut obs = subsample_irregular_range(&traj, 0..grid, cfg.n_min, cfg.n_max, &mut rng)?;
            obs.horizon = cfg.sim.horizon();
            if split == Split::Test {
                let k = cfg.extrapolation_points;
                let second = subsample_irregular_range(&traj, grid..2 * grid, k, k, &mut rng)?;
                for (first, extra) in obs.objects.iter_mut().zip(second.objects) {
                    first.extend(extra);
                }
                obs.horizon = sim.horizon();
            }
            Ok(obs)
        })
        .collect()
}

/// Train, validation and test splits sharing one feature normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Generates all three splits and normalizes features across them.
pub fn generate_bundle(cfg: &GenConfig) -> Result<DatasetBundle, SimError> {
    cfg.sim.validate()?;
    let mut train = generate_split(cfg, Split::Train, cfg.train_samples)?;
    let mut val = generate_split(cfg, Split::Val, cfg.val_samples)?;
    let mut test = generate_split(cfg, Split::Test, cfg.test_samples)?;
    let scale = normalize_observations(train.iter_mut().chain(val.iter_mut()).chain(test.iter_mut()))?;
    let header = |split: Split, samples: &[ObservationSet]| {
        let horizon = if split == Split::Test {
            (0.0, 2.0 * cfg.sim.horizon().1)
        } else {
            cfg.sim.horizon()
        };
        DatasetHeader {
            split,
            system: cfg.sim.kind,
            seed: cfg.seed,
            config: cfg.clone(),
            feature_dim: 4,
            horizon,
            boundary: (split == Split::Test).then(|| cfg.sim.horizon().1),
            scale: scale.clone(),
            samples: samples.len(),
        }
    };
    Ok(DatasetBundle {
        train: Dataset { header: header(Split::Train, &train), samples: train },
        val: Dataset { header: header(Split::Val, &val), samples: val },
        test: Dataset { header: header(Split::Test, &test), samples: test },
    })
}

pub fn write_dataset<W: Write>(ds: &Dataset, mut w: W) -> Result<(), SimError> {
    let header = serde_json::to_vec(&ds.header).map_err(|e| SimError::Format(e.to_string()))?;
    w.write_all(DATASET_MAGIC)?;
    w.write_u32::<LittleEndian>(DATASET_VERSION)?;
    w.write_u32::<LittleEndian>(header.len() as u32)?;
    w.write_all(&header)?;
    for s in &ds.samples {
        w.write_u32::<LittleEndian>(s.n_objects() as u32)?;
        let rel: Vec<(usize, usize)> = s.relations.undirected_edges().collect();
        w.write_u32::<LittleEndian>(rel.len() as u32)?;
        for (i, j) in rel {
            w.write_u32::<LittleEndian>(i as u32)?;
            w.write_u32::<LittleEndian>(j as u32)?;
        }
        w.write_u32::<LittleEndian>(s.total_observations() as u32)?;
        for (i, obs) in s.objects.iter().enumerate() {
            for o in obs {
                if o.features.len() != ds.header.feature_dim {
                    return Err(SimError::Format("feature width differs from header".into()));
                }
                w.write_u32::<LittleEndian>(i as u32)?;
                w.write_f64::<LittleEndian>(o.time)?;
                for &x in &o.features {
                    w.write_f64::<LittleEndian>(x)?;
                }
            }
        }
    }
    Ok(())
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<Dataset, SimError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(SimError::Format("bad magic".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != DATASET_VERSION {
        return Err(SimError::Format(format!("unsupported version {version}")));
    }
    let len = r.read_u32::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    let header: DatasetHeader = serde_json::from_slice(&buf).map_err(|e| SimError::Format(e.to_string()))?;
    let mut samples = Vec::with_capacity(header.samples);
    for _ in 0..header.samples {
        let n = r.read_u32::<LittleEndian>()? as usize;
        let mut relations = InteractionGraph::new(n);
        for _ in 0..r.read_u32::<LittleEndian>()? {
            let i = r.read_u32::<LittleEndian>()? as usize;
            let j = r.read_u32::<LittleEndian>()? as usize;
            relations.add_edge(i, j)?;
        }
        let mut objects = vec![Vec::new(); n];
        for _ in 0..r.read_u32::<LittleEndian>()? {
            let i = r.read_u32::<LittleEndian>()? as usize;
            let time = r.read_f64::<LittleEndian>()?;
            let features = (0..header.feature_dim).map(|_| r.read_f64::<LittleEndian>()).collect::<Result<Vec<_>, _>>()?;
            objects.get_mut(i).ok_or_else(|| SimError::Format(format!("object id {i} out of range")))?.push(Observation { time, features });
        }
        let set = ObservationSet { objects, relations, horizon: header.horizon };
        set.validate()?;
        samples.push(set);
    }
    Ok(Dataset { header, samples })
}

/// Human-readable summary written next to the dataset files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub system: SystemKind,
    pub seed: u64,
    pub objects: usize,
    pub splits: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub split: Split,
    pub file: String,
    pub samples: usize,
}

impl DatasetBundle {
    pub fn file_name(split: Split) -> String {
        format!("{}.gods", split.name())
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            system: self.train.header.system,
            seed: self.train.header.seed,
            objects: self.train.header.config.sim.n_objects,
            splits: [&self.train, &self.val, &self.test]
                .iter()
                .map(|d| ManifestEntry { split: d.header.split, file: Self::file_name(d.header.split), samples: d.samples.len() })
                .collect(),
        }
    }

    pub fn write_dir(&self, dir: &Path) -> Result<(), SimError> {
        std::fs::create_dir_all(dir)?;
        for d in [&self.train, &self.val, &self.test] {
            let mut w = BufWriter::new(File::create(dir.join(Self::file_name(d.header.split)))?);
            write_dataset(d, &mut w)?;
            w.flush()?;
        }
        let manifest = serde_json::to_string_pretty(&self.manifest()).map_err(|e| SimError::Format(e.to_string()))?;
        std::fs::write(dir.join("manifest.json"), manifest + "\n")?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self, SimError> {
        let load = |s: Split| -> Result<Dataset, SimError> { read_dataset(BufReader::new(File::open(dir.join(Self::file_name(s)))?)) };
        Ok(Self { train: load(Split::Train)?, val: load(Split::Val)?, test: load(Split::Test)? })
    }
}
