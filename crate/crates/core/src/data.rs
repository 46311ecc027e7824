//! Synthetic vehicle data with planted attribute and identity structure,
//! the manifest + feature-file format, and the same-attribute triplet
//! sampler.
//!
//! Feature vectors are laid out in three blocks: a color prototype block, a
//! model prototype block and a per-identity detail block (a stand-in for the
//! windshield stickers that tell otherwise identical vehicles apart), plus
//! isotropic Gaussian noise.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const FEATURE_FILE: &str = "features.bin";
pub const MANIFEST_HEADER: &str = "sample_idx,vehicle_id,color,model,view";
const FEATURE_MAGIC: &[u8; 4] = b"RPNF";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Front,
    Back,
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            View::Front => "front",
            View::Back => "back",
        })
    }
}

impl FromStr for View {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "front" => Ok(View::Front),
            "back" => Ok(View::Back),
            other => Err(format!("unknown view '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Global index, stable across train/test splits.
    pub sample_idx: usize,
    pub vehicle_id: u32,
    pub color: u32,
    pub model: u32,
    pub view: View,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n_colors: usize,
    pub n_models: usize,
    pub feature_dim: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn distinct_ids(&self) -> usize {
        let mut ids: Vec<u32> = self.samples.iter().map(|s| s.vehicle_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }

    /// Checks label ranges, feature widths and that a vehicle id fixes its
    /// color, model and view.
    pub fn validate(&self) -> Result<()> {
        let mut seen: BTreeMap<u32, (u32, u32, View)> = BTreeMap::new();
        for s in &self.samples {
            if s.color as usize >= self.n_colors {
                return Err(Error::Validation(format!(
                    "sample {} has color {} but only {} colors exist",
                    s.sample_idx, s.color, self.n_colors
                )));
            }
            if s.model as usize >= self.n_models {
                return Err(Error::Validation(format!(
                    "sample {} has model {} but only {} models exist",
                    s.sample_idx, s.model, self.n_models
                )));
            }
            if s.features.len() != self.feature_dim {
                return Err(Error::Validation(format!(
                    "sample {} has {} features, expected {}",
                    s.sample_idx,
                    s.features.len(),
                    self.feature_dim
                )));
            }
            let labels = (s.color, s.model, s.view);
            match seen.get(&s.vehicle_id) {
                Some(prev) if *prev != labels => {
                    return Err(Error::Validation(format!(
                        "vehicle {} appears with labels {:?} and {:?}",
                        s.vehicle_id, prev, labels
                    )))
                }
                Some(_) => {}
                None => {
                    seen.insert(s.vehicle_id, labels);
                }
            }
        }
        Ok(())
    }

    /// Splits every identity's samples, sending the trailing
    /// `round(fraction · count)` of them to the held-out set while keeping at
    /// least one sample per identity in training.
    pub fn split_holdout(&self, fraction: f64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::Param(format!(
                "holdout fraction must be in [0, 1), got {fraction}"
            )));
        }
        let mut by_id: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            by_id.entry(s.vehicle_id).or_default().push(i);
        }
        let mut held = vec![false; self.samples.len()];
        for members in by_id.values() {
            let n = members.len();
            let k = ((fraction * n as f64).round() as usize).min(n - 1);
            for &i in &members[n - k..] {
                held[i] = true;
            }
        }
        let pick = |want: bool| Dataset {
            n_colors: self.n_colors,
            n_models: self.n_models,
            feature_dim: self.feature_dim,
            samples: self
                .samples
                .iter()
                .zip(&held)
                .filter(|(_, h)| **h == want)
                .map(|(s, _)| s.clone())
                .collect(),
        };
        Ok((pick(false), pick(true)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_colors: usize,
    pub n_models: usize,
    pub ids_per_combo: usize,
    pub samples_per_id: usize,
    pub feature_dim: usize,
    /// Scale of the color and model prototype entries.
    pub attr_signal: f64,
    /// Scale of the per-identity detail entries.
    pub id_signal: f64,
    pub noise_sigma: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_colors: 4,
            n_models: 6,
            ids_per_combo: 2,
            samples_per_id: 10,
            feature_dim: 64,
            attr_signal: 1.0,
            id_signal: 1.0,
            noise_sigma: 0.3,
        }
    }
}

impl SyntheticSpec {
    /// `(color block, model block, detail block)` widths.
    pub fn block_dims(&self) -> (usize, usize, usize) {
        let color = self.feature_dim / 4;
        let model = self.feature_dim / 4;
        (color, model, self.feature_dim - color - model)
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.n_colors == 0, "n_colors must be at least 1"),
            (self.n_models == 0, "n_models must be at least 1"),
            (self.ids_per_combo == 0, "ids_per_combo must be at least 1"),
            (self.samples_per_id == 0, "samples_per_id must be at least 1"),
            (
                self.feature_dim < 4,
                "feature_dim must be at least 4 to host color, model and detail blocks",
            ),
            (!(self.noise_sigma >= 0.0), "noise_sigma must be non-negative"),
            (
                !self.attr_signal.is_finite() || !self.id_signal.is_finite(),
                "signals must be finite",
            ),
        ];
        match checks.iter().find(|(bad, _)| *bad) {
            Some((_, msg)) => Err(Error::Spec((*msg).to_string())),
            None => Ok(()),
        }
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (dc, dm, dd) = spec.block_dims();
    let color_protos: Vec<Vec<f64>> = (0..spec.n_colors)
        .map(|_| normal_vec(&mut rng, dc, spec.attr_signal))
        .collect();
    let model_protos: Vec<Vec<f64>> = (0..spec.n_models)
        .map(|_| normal_vec(&mut rng, dm, spec.attr_signal))
        .collect();

    let n_ids = spec.n_colors * spec.n_models * spec.ids_per_combo;
    let mut samples = Vec::with_capacity(n_ids * spec.samples_per_id);
    let mut vehicle_id = 0u32;
    for color in 0..spec.n_colors {
        for model in 0..spec.n_models {
            for _ in 0..spec.ids_per_combo {
                let view = if rng.random_bool(0.5) { View::Front } else { View::Back };
                let detail = normal_vec(&mut rng, dd, spec.id_signal);
                let clean: Vec<f64> = color_protos[color]
                    .iter()
                    .chain(&model_protos[model])
                    .chain(&detail)
                    .copied()
                    .collect();
                for _ in 0..spec.samples_per_id {
                    let noise = normal_vec(&mut rng, spec.feature_dim, spec.noise_sigma);
                    let features = clean.iter().zip(&noise).map(|(c, n)| c + n).collect();
                    samples.push(Sample {
                        sample_idx: samples.len(),
                        vehicle_id,
                        color: color as u32,
                        model: model as u32,
                        view,
                        features,
                    });
                }
                vehicle_id += 1;
            }
        }
    }
    Ok(Dataset {
        n_colors: spec.n_colors,
        n_models: spec.n_models,
        feature_dim: spec.feature_dim,
        samples,
    })
}

/// Indices into `Dataset::samples`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TripletBatch {
    pub triplets: Vec<Triplet>,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }
}

/// Checks a triplet against the hardest-triplet rule: anchor and positive are
/// distinct samples of one vehicle, the negative is another vehicle with the
/// same color and model.
pub fn validate_triplet(dataset: &Dataset, t: &Triplet) -> Result<()> {
    let get = |i: usize, role: &str| {
        dataset
            .samples
            .get(i)
            .ok_or_else(|| Error::RejectedBatch(format!("{role} index {i} outside dataset of {}", dataset.len())))
    };
    let (a, p, n) = (
        get(t.anchor, "anchor")?,
        get(t.positive, "positive")?,
        get(t.negative, "negative")?,
    );
    if t.anchor == t.positive {
        return Err(Error::RejectedBatch(format!(
            "anchor and positive are the same sample {}",
            t.anchor
        )));
    }
    if a.vehicle_id != p.vehicle_id {
        return Err(Error::RejectedBatch(format!(
            "positive vehicle {} differs from anchor vehicle {}",
            p.vehicle_id, a.vehicle_id
        )));
    }
    if n.vehicle_id == a.vehicle_id {
        return Err(Error::RejectedBatch(format!(
            "negative shares anchor vehicle {}",
            a.vehicle_id
        )));
    }
    if n.color != a.color || n.model != a.model {
        return Err(Error::RejectedBatch(format!(
            "negative attributes ({}, {}) differ from anchor ({}, {})",
            n.color, n.model, a.color, a.model
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
struct Cell {
    /// Sample indices per identity, in id order.
    identities: Vec<Vec<usize>>,
    /// Positions in `identities` with at least two samples.
    anchors: Vec<usize>,
}

/// Precomputed (color, model) cells for repeated triplet draws.
#[derive(Debug, Clone)]
pub struct TripletSampler {
    cells: Vec<((u32, u32), Cell)>,
}

impl TripletSampler {
    pub fn new(dataset: &Dataset) -> Result<Self> {
        let mut grouped: BTreeMap<(u32, u32), BTreeMap<u32, Vec<usize>>> = BTreeMap::new();
        for (i, s) in dataset.samples.iter().enumerate() {
            grouped
                .entry((s.color, s.model))
                .or_default()
                .entry(s.vehicle_id)
                .or_default()
                .push(i);
        }
        let multi_id_cells = grouped.values().filter(|ids| ids.len() >= 2).count();
        let cells: Vec<((u32, u32), Cell)> = grouped
            .into_iter()
            .filter(|(_, ids)| ids.len() >= 2)
            .filter_map(|(key, ids)| {
                let identities: Vec<Vec<usize>> = ids.into_values().collect();
                let anchors: Vec<usize> = (0..identities.len()).filter(|&k| identities[k].len() >= 2).collect();
                (!anchors.is_empty()).then_some((key, Cell { identities, anchors }))
            })
            .collect();
        if multi_id_cells == 0 {
            return Err(Error::Exhausted(
                "no (color, model) cell holds two identities, so no same-attribute negative exists".into(),
            ));
        }
        if cells.is_empty() {
            return Err(Error::Exhausted(
                "no identity with at least two samples shares its (color, model) cell with another identity".into(),
            ));
        }
        Ok(Self { cells })
    }

    /// Attribute cells that can produce triplets.
    pub fn eligible_cells(&self) -> Vec<(u32, u32)> {
        self.cells.iter().map(|(k, _)| *k).collect()
    }

    /// Draws a cell uniformly, an anchor identity uniformly within it, two
    /// distinct samples of that identity and a sample of another identity in
    /// the cell.
    pub fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> TripletBatch {
        let triplets = (0..count)
            .map(|_| {
                let (_, cell) = &self.cells[rng.random_range(0..self.cells.len())];
                let a_id = cell.anchors[rng.random_range(0..cell.anchors.len())];
                let members = &cell.identities[a_id];
                let ai = rng.random_range(0..members.len());
                let mut pi = rng.random_range(0..members.len() - 1);
                if pi >= ai {
                    pi += 1;
                }
                let mut n_id = rng.random_range(0..cell.identities.len() - 1);
                if n_id >= a_id {
                    n_id += 1;
                }
                let negatives = &cell.identities[n_id];
                Triplet {
                    anchor: members[ai],
                    positive: members[pi],
                    negative: negatives[rng.random_range(0..negatives.len())],
                }
            })
            .collect();
        TripletBatch { triplets }
    }
}

pub fn sample_hard_triplets<R: Rng + ?Sized>(dataset: &Dataset, count: usize, rng: &mut R) -> Result<TripletBatch> {
    Ok(TripletSampler::new(dataset)?.sample(count, rng))
}

pub fn write_manifest(dataset: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join(MANIFEST_FILE)).map_err(csv_io)?;
    w.write_record(MANIFEST_HEADER.split(',')).map_err(csv_io)?;
    for s in &dataset.samples {
        w.write_record([
            s.sample_idx.to_string(),
            s.vehicle_id.to_string(),
            s.color.to_string(),
            s.model.to_string(),
            s.view.to_string(),
        ])
        .map_err(csv_io)?;
    }
    w.flush()?;

    let mut f = BufWriter::new(File::create(dir.join(FEATURE_FILE))?);
    f.write_all(FEATURE_MAGIC)?;
    f.write_u32::<LittleEndian>(dataset.samples.len() as u32)?;
    f.write_u32::<LittleEndian>(dataset.feature_dim as u32)?;
    for s in &dataset.samples {
        for &v in &s.features {
            f.write_f32::<LittleEndian>(v as f32)?;
        }
    }
    f.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

fn read_features(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::Format {
        offset: 0,
        msg: "truncated feature header".into(),
    })?;
    if &magic != FEATURE_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad feature magic {magic:?}"),
        });
    }
    let count = r.read_u32::<LittleEndian>().map_err(|_| Error::Format {
        offset: 4,
        msg: "truncated count".into(),
    })? as usize;
    let dim = r.read_u32::<LittleEndian>().map_err(|_| Error::Format {
        offset: 8,
        msg: "truncated dim".into(),
    })? as usize;
    let mut values = vec![0f32; count * dim];
    r.read_f32_into::<LittleEndian>(&mut values)
        .map_err(|_| Error::Format {
            offset: 12,
            msg: format!("feature payload shorter than {count}x{dim} values"),
        })?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Format {
            offset: 12 + 4 * (count * dim) as u64,
            msg: "trailing bytes after feature payload".into(),
        });
    }
    Ok((count, dim, values))
}

/// Loads a manifest directory written by [`write_manifest`]. Labels are
/// validated against the given class counts and the identity invariant.
pub fn read_manifest(dir: &Path, n_colors: usize, n_models: usize) -> Result<Dataset> {
    let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let header = text.lines().next().unwrap_or("");
    if header.trim_end_matches('\r') != MANIFEST_HEADER {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header '{MANIFEST_HEADER}', got '{header}'"),
        });
    }
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 5 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 5 fields, got {}", record.len()),
            });
        }
        let field = |i: usize| -> Result<u64> {
            record[i].trim().parse::<u64>().map_err(|e| Error::Parse {
                line,
                msg: format!("field {i} '{}': {e}", &record[i]),
            })
        };
        let view = record[4]
            .trim()
            .parse::<View>()
            .map_err(|msg| Error::Parse { line, msg })?;
        let ids = (field(0)?, field(1)?, field(2)?, field(3)?);
        if ids.1 > u32::MAX as u64 || ids.2 > u32::MAX as u64 || ids.3 > u32::MAX as u64 {
            return Err(Error::Parse {
                line,
                msg: "label exceeds u32".into(),
            });
        }
        rows.push((ids.0 as usize, ids.1 as u32, ids.2 as u32, ids.3 as u32, view));
    }
    let (count, dim, values) = read_features(&dir.join(FEATURE_FILE))?;
    if count != rows.len() {
        return Err(Error::Consistency(format!(
            "manifest lists {} samples but feature file holds {count}",
            rows.len()
        )));
    }
    let samples = rows
        .into_iter()
        .enumerate()
        .map(|(i, (sample_idx, vehicle_id, color, model, view))| Sample {
            sample_idx,
            vehicle_id,
            color,
            model,
            view,
            features: values[i * dim..(i + 1) * dim].iter().map(|&v| v as f64).collect(),
        })
        .collect();
    let dataset = Dataset {
        n_colors,
        n_models,
        feature_dim: dim,
        samples,
    };
    dataset.validate()?;
    Ok(dataset)
}
