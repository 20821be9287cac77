//! On-disk dataset format, normalization statistics and sample loading.
//!
//! A dataset directory holds:
//!
//! * `manifest.json`: [`DatasetManifest`]
//! * `stats.json`: [`NormStats`] computed from the training split
//! * `<var>.bin` per surface variable: `[T,H,W]` little-endian `f32`, row-major
//! * `target.bin`: `[T,C,H,W]` little-endian `f32`, row-major
//!
//! Sample `t` of a variable file starts at byte `4·t·H·W`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const STATS_FILE: &str = "stats.json";
pub const TARGET_FILE: &str = "target.bin";

/// Smallest standard deviation used for normalization, in native units.
pub const STD_FLOOR: f64 = 1e-8;

/// Target depth levels, in channel order.
pub const LEVELS: [&str; 3] = ["W20", "W40", "W60"];

/// Ordered set of surface variable names. Index `i` always denotes the same
/// variable for a given dataset and model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct VariableUniverse {
    names: Vec<String>,
}

impl VariableUniverse {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::Config("variable universe is empty".into()));
        }
        let mut seen = BTreeSet::new();
        for n in &names {
            if n.is_empty() || n.contains('+') || n.contains(',') {
                return Err(Error::Config(format!("invalid variable name {n:?}")));
            }
            if !seen.insert(n.as_str()) {
                return Err(Error::Config(format!("variable {n} listed twice")));
            }
        }
        Ok(VariableUniverse { names })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

impl Default for VariableUniverse {
    fn default() -> Self {
        VariableUniverse::new(["SSH", "U", "V", "B"]).expect("valid default")
    }
}

impl TryFrom<Vec<String>> for VariableUniverse {
    type Error = Error;
    fn try_from(v: Vec<String>) -> Result<Self> {
        VariableUniverse::new(v)
    }
}

impl From<VariableUniverse> for Vec<String> {
    fn from(u: VariableUniverse) -> Self {
        u.names
    }
}

/// Which universe variables are observed.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AvailabilityMask {
    bits: Vec<bool>,
}

impl AvailabilityMask {
    pub fn full(n: usize) -> Self {
        AvailabilityMask { bits: vec![true; n] }
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        AvailabilityMask { bits }
    }

    /// Mask from variable names, e.g. `["SSH", "U"]`.
    pub fn from_names<S: AsRef<str>>(universe: &VariableUniverse, names: &[S]) -> Result<Self> {
        let mut bits = vec![false; universe.len()];
        for n in names {
            let i = universe
                .index_of(n.as_ref())
                .ok_or_else(|| Error::Config(format!("unknown variable {:?}", n.as_ref())))?;
            bits[i] = true;
        }
        Ok(AvailabilityMask { bits })
    }

    /// Parses a `+`-separated label such as `SSH+U+V`.
    pub fn parse(universe: &VariableUniverse, label: &str) -> Result<Self> {
        let names: Vec<&str> = label.split('+').map(str::trim).filter(|s| !s.is_empty()).collect();
        let mask = Self::from_names(universe, &names)?;
        if mask.is_empty() {
            return Err(Error::Config(format!("mask {label:?} selects no variables")));
        }
        Ok(mask)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn is_full(&self) -> bool {
        self.bits.iter().all(|&b| b)
    }

    pub fn contains(&self, i: usize) -> bool {
        self.bits.get(i).copied().unwrap_or(false)
    }

    /// Universe indices of the present variables, ascending.
    pub fn present(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    pub fn is_subset_of(&self, other: &AvailabilityMask) -> bool {
        self.bits.len() == other.bits.len() && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    pub fn label(&self, universe: &VariableUniverse) -> String {
        self.present()
            .into_iter()
            .map(|i| universe.names()[i].as_str())
            .collect::<Vec<_>>()
            .join("+")
    }

    /// Every non-empty mask over `n` variables, in increasing bit-pattern order.
    pub fn all_nonempty(n: usize) -> Vec<AvailabilityMask> {
        (1u32..(1 << n))
            .map(|code| AvailabilityMask {
                bits: (0..n).map(|i| code & (1 << i) != 0).collect(),
            })
            .collect()
    }
}

/// One time snapshot: surface grids `[H,W]` keyed by variable name and the
/// filtered vertical velocity `[C,H,W]` in m/s.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldSample {
    pub surface: BTreeMap<String, Tensor<f32>>,
    pub target: Tensor<f32>,
    pub time_index: usize,
}

impl FieldSample {
    pub fn dims(&self) -> (usize, usize, usize) {
        self.target.dims3()
    }

    pub fn validate(&self, universe: &VariableUniverse) -> Result<()> {
        if self.target.shape().len() != 3 {
            return Err(Error::Shape(format!("target must be [C,H,W], got {:?}", self.target.shape())));
        }
        let (_, h, w) = self.dims();
        for name in universe.names() {
            let grid = self
                .surface
                .get(name)
                .ok_or_else(|| Error::Data(format!("sample {} lacks variable {name}", self.time_index)))?;
            if grid.shape() != [h, w] {
                return Err(Error::Shape(format!(
                    "sample {}: {name} is {:?}, target grid is {h}x{w}",
                    self.time_index,
                    grid.shape()
                )));
            }
            if !grid.is_finite() {
                return Err(Error::Data(format!("sample {}: {name} has non-finite values", self.time_index)));
            }
        }
        if !self.target.is_finite() {
            return Err(Error::Data(format!("sample {}: target has non-finite values", self.time_index)));
        }
        Ok(())
    }

    /// Present variables stacked in universe order as `[|S|,H,W]`.
    pub fn stack_surface(&self, universe: &VariableUniverse, mask: &AvailabilityMask) -> Result<Tensor<f32>> {
        let (_, h, w) = self.dims();
        let present = mask.present();
        let mut data = Vec::with_capacity(present.len() * h * w);
        for i in &present {
            let name = &universe.names()[*i];
            let grid = self
                .surface
                .get(name)
                .ok_or_else(|| Error::Data(format!("sample lacks variable {name}")))?;
            data.extend_from_slice(grid.data());
        }
        Tensor::from_vec(&[present.len(), h, w], data)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub std: f64,
}

impl Moments {
    /// Population mean and standard deviation, with the std floored at [`STD_FLOOR`].
    pub fn of(values: &[f64]) -> Moments {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Moments {
            mean,
            std: var.sqrt().max(STD_FLOOR),
        }
    }

    fn normalize(&self, x: f32) -> f32 {
        ((x as f64 - self.mean) / self.std) as f32
    }

    fn denormalize(&self, z: f32) -> f32 {
        (z as f64 * self.std + self.mean) as f32
    }
}

/// Per-variable and per-target-level normalization statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormStats {
    pub variables: BTreeMap<String, Moments>,
    pub target: Vec<Moments>,
}

impl NormStats {
    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a FieldSample>, universe: &VariableUniverse) -> Result<NormStats> {
        let samples: Vec<&FieldSample> = samples.into_iter().collect();
        let first = samples
            .first()
            .ok_or_else(|| Error::Data("cannot compute statistics of an empty training split".into()))?;
        let channels = first.target.dims3().0;
        let mut variables = BTreeMap::new();
        for name in universe.names() {
            let values: Vec<f64> = samples
                .iter()
                .flat_map(|s| s.surface[name].data().iter().map(|&v| v as f64))
                .collect();
            variables.insert(name.clone(), Moments::of(&values));
        }
        let target = (0..channels)
            .map(|c| {
                let values: Vec<f64> = samples
                    .iter()
                    .flat_map(|s| s.target.channel(c).iter().map(|&v| v as f64))
                    .collect();
                Moments::of(&values)
            })
            .collect();
        Ok(NormStats { variables, target })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn read(path: &Path) -> Result<NormStats> {
        read_json(path)
    }

    fn variable(&self, name: &str) -> Result<&Moments> {
        self.variables
            .get(name)
            .ok_or_else(|| Error::Data(format!("no normalization statistics for variable {name}")))
    }

    fn check_target(&self, target: &Tensor<f32>) -> Result<()> {
        if target.dims3().0 != self.target.len() {
            return Err(Error::Data(format!(
                "statistics cover {} target levels, sample has {}",
                self.target.len(),
                target.dims3().0
            )));
        }
        Ok(())
    }

    pub fn normalize_target(&self, target: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.check_target(target)?;
        let mut out = target.clone();
        for (c, m) in self.target.iter().enumerate() {
            out.channel_mut(c).iter_mut().for_each(|v| *v = m.normalize(*v));
        }
        Ok(out)
    }

    pub fn denormalize_target(&self, target: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.check_target(target)?;
        let mut out = target.clone();
        for (c, m) in self.target.iter().enumerate() {
            out.channel_mut(c).iter_mut().for_each(|v| *v = m.denormalize(*v));
        }
        Ok(out)
    }
}

fn map_sample(sample: &FieldSample, stats: &NormStats, forward: bool) -> Result<FieldSample> {
    let mut surface = BTreeMap::new();
    for (name, grid) in &sample.surface {
        let m = stats.variable(name)?;
        surface.insert(
            name.clone(),
            grid.map(|v| if forward { m.normalize(v) } else { m.denormalize(v) }),
        );
    }
    let target = if forward {
        stats.normalize_target(&sample.target)?
    } else {
        stats.denormalize_target(&sample.target)?
    };
    Ok(FieldSample {
        surface,
        target,
        time_index: sample.time_index,
    })
}

/// Maps every field to `(x - mean) / std`.
pub fn normalize(sample: &FieldSample, stats: &NormStats) -> Result<FieldSample> {
    map_sample(sample, stats, true)
}

/// Inverse of [`normalize`].
pub fn denormalize(sample: &FieldSample, stats: &NormStats) -> Result<FieldSample> {
    map_sample(sample, stats, false)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Sample indices of the three splits.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    /// Consecutive blocks: the first `train` indices, then `val`, then `test`.
    pub fn contiguous(train: usize, val: usize, test: usize) -> Splits {
        Splits {
            train: (0..train).collect(),
            val: (train..train + val).collect(),
            test: (train + val..train + val + test).collect(),
        }
    }

    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// The three index sets must be disjoint and cover `0..total`.
    pub fn validate(&self, total: usize) -> Result<()> {
        let mut seen = vec![false; total];
        for &i in self.train.iter().chain(&self.val).chain(&self.test) {
            if i >= total {
                return Err(Error::Data(format!("split index {i} out of range 0..{total}")));
            }
            if seen[i] {
                return Err(Error::Data(format!("sample {i} appears in more than one split")));
            }
            seen[i] = true;
        }
        if let Some(i) = seen.iter().position(|&s| !s) {
            return Err(Error::Data(format!("sample {i} belongs to no split")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub universe: VariableUniverse,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub levels: Vec<String>,
    pub t_total: usize,
    pub t_train: usize,
    pub t_val: usize,
    pub t_test: usize,
    pub splits: Splits,
    /// Variable name → file name relative to the dataset directory.
    pub files: BTreeMap<String, String>,
    pub target_file: String,
    pub stats_file: String,
    pub provenance: String,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn write_f32s(out: &mut impl Write, values: &[f32], path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Writes samples in index order plus manifest and training-split statistics.
pub fn write_dataset(
    samples: &[FieldSample],
    universe: &VariableUniverse,
    splits: &Splits,
    dir: &Path,
    provenance: &str,
) -> Result<DatasetManifest> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Data("cannot write an empty dataset".into()))?;
    let (channels, height, width) = first.dims();
    for s in samples {
        s.validate(universe)?;
        if s.dims() != (channels, height, width) {
            return Err(Error::Shape(format!(
                "sample {} has target {:?}, expected [{channels}, {height}, {width}]",
                s.time_index,
                s.target.shape()
            )));
        }
    }
    splits.validate(samples.len())?;
    if splits.train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }

    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = BTreeMap::new();
    for name in universe.names() {
        let file = format!("{name}.bin");
        let path = dir.join(&file);
        let mut out = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
        for s in samples {
            write_f32s(&mut out, s.surface[name].data(), &path)?;
        }
        out.flush().map_err(|e| Error::io(&path, e))?;
        files.insert(name.clone(), file);
    }
    let target_path = dir.join(TARGET_FILE);
    let mut out = BufWriter::new(File::create(&target_path).map_err(|e| Error::io(&target_path, e))?);
    for s in samples {
        write_f32s(&mut out, s.target.data(), &target_path)?;
    }
    out.flush().map_err(|e| Error::io(&target_path, e))?;

    let stats = NormStats::from_samples(splits.train.iter().map(|&i| &samples[i]), universe)?;
    stats.write(&dir.join(STATS_FILE))?;

    let levels = if channels == LEVELS.len() {
        LEVELS.iter().map(|s| s.to_string()).collect()
    } else {
        (0..channels).map(|c| format!("L{c}")).collect()
    };
    let manifest = DatasetManifest {
        schema_version: SCHEMA_VERSION,
        universe: universe.clone(),
        height,
        width,
        channels,
        levels,
        t_total: samples.len(),
        t_train: splits.train.len(),
        t_val: splits.val.len(),
        t_test: splits.test.len(),
        splits: splits.clone(),
        files,
        target_file: TARGET_FILE.to_string(),
        stats_file: STATS_FILE.to_string(),
        provenance: provenance.to_string(),
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// An opened, validated dataset directory. Reads are independent file
/// accesses, so a `Dataset` may be shared between threads.
#[derive(Clone, Debug)]
pub struct Dataset {
    dir: PathBuf,
    manifest: DatasetManifest,
}

fn expect_len(path: &Path, expected: u64) -> Result<()> {
    let len = fs::metadata(path).map_err(|e| Error::io(path, e))?.len();
    if len != expected {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("expected {expected} bytes, found {len}"),
        });
    }
    Ok(())
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Dataset> {
        let path = dir.join(MANIFEST_FILE);
        let manifest: DatasetManifest = read_json(&path)?;
        if manifest.schema_version != SCHEMA_VERSION {
            return Err(Error::Version {
                path,
                found: manifest.schema_version,
                expected: SCHEMA_VERSION,
            });
        }
        manifest.splits.validate(manifest.t_total)?;
        let counts = (manifest.splits.train.len(), manifest.splits.val.len(), manifest.splits.test.len());
        if counts != (manifest.t_train, manifest.t_val, manifest.t_test) {
            return Err(Error::Format {
                path,
                reason: "split counts disagree with split index lists".into(),
            });
        }
        let plane = (manifest.height * manifest.width) as u64 * 4;
        for name in manifest.universe.names() {
            let file = manifest.files.get(name).ok_or_else(|| Error::Format {
                path: dir.join(MANIFEST_FILE),
                reason: format!("no file listed for variable {name}"),
            })?;
            expect_len(&dir.join(file), manifest.t_total as u64 * plane)?;
        }
        expect_len(
            &dir.join(&manifest.target_file),
            manifest.t_total as u64 * manifest.channels as u64 * plane,
        )?;
        Ok(Dataset {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn universe(&self) -> &VariableUniverse {
        &self.manifest.universe
    }

    fn read_block(&self, file: &str, index: usize, count: usize) -> Result<Vec<f32>> {
        let path = self.dir.join(file);
        let mut f = File::open(&path).map_err(|e| Error::io(&path, e))?;
        f.seek(SeekFrom::Start((index * count * 4) as u64))
            .map_err(|e| Error::io(&path, e))?;
        let mut buf = vec![0u8; count * 4];
        f.read_exact(&mut buf).map_err(|e| Error::io(&path, e))?;
        Ok(buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    }

    /// Reads sample `index` (position in the files, not within a split).
    pub fn read_sample(&self, index: usize) -> Result<FieldSample> {
        let m = &self.manifest;
        if index >= m.t_total {
            return Err(Error::Data(format!("sample {index} out of range 0..{}", m.t_total)));
        }
        let plane = m.height * m.width;
        let mut surface = BTreeMap::new();
        for name in m.universe.names() {
            let data = self.read_block(&m.files[name], index, plane)?;
            surface.insert(name.clone(), Tensor::from_vec(&[m.height, m.width], data)?);
        }
        let target = Tensor::from_vec(
            &[m.channels, m.height, m.width],
            self.read_block(&m.target_file, index, m.channels * plane)?,
        )?;
        Ok(FieldSample {
            surface,
            target,
            time_index: index,
        })
    }

    pub fn read_stats(&self) -> Result<NormStats> {
        let stats = NormStats::read(&self.dir.join(&self.manifest.stats_file))?;
        for name in self.universe().names() {
            stats.variable(name)?;
        }
        if stats.target.len() != self.manifest.channels {
            return Err(Error::Data("statistics do not cover every target level".into()));
        }
        Ok(stats)
    }

    /// Loads a split into memory, normalized with `stats`.
    pub fn load_split(&self, split: Split, stats: &NormStats) -> Result<SplitData> {
        let universe = self.universe();
        let mut out = SplitData {
            indices: self.manifest.splits.get(split).to_vec(),
            surface: Vec::new(),
            target: Vec::new(),
            target_raw: Vec::new(),
        };
        let full = AvailabilityMask::full(universe.len());
        for &i in &out.indices {
            let raw = self.read_sample(i)?;
            let norm = normalize(&raw, stats)?;
            out.surface.push(norm.stack_surface(universe, &full)?);
            out.target.push(norm.target);
            out.target_raw.push(raw.target);
        }
        Ok(out)
    }
}

/// Recomputes training-split statistics from the files on disk.
pub fn compute_norm_stats(dataset: &Dataset) -> Result<NormStats> {
    let m = dataset.manifest();
    if m.splits.train.is_empty() {
        return Err(Error::Data("cannot compute statistics of an empty training split".into()));
    }
    let samples = m
        .splits
        .train
        .iter()
        .map(|&i| dataset.read_sample(i))
        .collect::<Result<Vec<_>>>()?;
    NormStats::from_samples(&samples, dataset.universe())
}

/// A split held in memory: normalized inputs with every universe variable
/// stacked `[N,H,W]`, normalized targets, and physical-unit targets.
#[derive(Clone, Debug)]
pub struct SplitData {
    pub indices: Vec<usize>,
    pub surface: Vec<Tensor<f32>>,
    pub target: Vec<Tensor<f32>>,
    pub target_raw: Vec<Tensor<f32>>,
}

impl SplitData {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Rows of sample `i` for the variables present in `mask`.
    pub fn inputs(&self, i: usize, mask: &AvailabilityMask) -> Tensor<f32> {
        gather_rows(&self.surface[i], mask)
    }
}

/// Selects the present-variable planes of an `[N,H,W]` stack.
pub fn gather_rows<T: crate::tensor::Real>(stack: &Tensor<T>, mask: &AvailabilityMask) -> Tensor<T> {
    let (_, h, w) = stack.dims3();
    let present = mask.present();
    let mut data = Vec::with_capacity(present.len() * h * w);
    for i in &present {
        data.extend_from_slice(stack.channel(*i));
    }
    Tensor::from_vec(&[present.len(), h, w], data).expect("gathered dims")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(t: usize, h: usize, w: usize, f: impl Fn(usize) -> f32) -> FieldSample {
        let universe = VariableUniverse::default();
        let mut surface = BTreeMap::new();
        for (vi, name) in universe.names().iter().enumerate() {
            let data = (0..h * w).map(|j| f(vi * 1000 + j + t * 7)).collect();
            surface.insert(name.clone(), Tensor::from_vec(&[h, w], data).unwrap());
        }
        let target = Tensor::from_vec(&[3, h, w], (0..3 * h * w).map(|j| f(j + 31 * t) * 1e-4).collect()).unwrap();
        FieldSample {
            surface,
            target,
            time_index: t,
        }
    }

    #[test]
    fn manifest_counts_splits() {
        let dir = tempfile::tempdir().unwrap();
        let samples: Vec<_> = (0..4).map(|t| sample(t, 4, 4, |j| j as f32 * 0.1)).collect();
        let splits = Splits {
            train: vec![0, 1],
            val: vec![2],
            test: vec![3],
        };
        let m = write_dataset(&samples, &VariableUniverse::default(), &splits, dir.path(), "test").unwrap();
        assert_eq!((m.t_train, m.t_val, m.t_test), (2, 1, 1));
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let samples: Vec<_> = (0..3).map(|t| sample(t, 5, 3, |j| (j as f32).sin() * 1e3)).collect();
        write_dataset(&samples, &VariableUniverse::default(), &Splits::contiguous(1, 1, 1), dir.path(), "t").unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        for (i, s) in samples.iter().enumerate() {
            let back = ds.read_sample(i).unwrap();
            for (name, grid) in &s.surface {
                let a: Vec<u32> = grid.data().iter().map(|v| v.to_bits()).collect();
                let b: Vec<u32> = back.surface[name].data().iter().map(|v| v.to_bits()).collect();
                assert_eq!(a, b);
            }
            assert_eq!(back.target, s.target);
        }
    }

    #[test]
    fn target_file_length_is_four_bytes_per_value() {
        let dir = tempfile::tempdir().unwrap();
        let samples = vec![sample(0, 8, 8, |j| j as f32)];
        let splits = Splits::contiguous(1, 0, 0);
        write_dataset(&samples, &VariableUniverse::default(), &splits, dir.path(), "t").unwrap();
        assert_eq!(fs::metadata(dir.path().join(TARGET_FILE)).unwrap().len(), 4 * 3 * 8 * 8);
        assert_eq!(fs::metadata(dir.path().join("SSH.bin")).unwrap().len(), 4 * 8 * 8);
    }

    #[test]
    fn overlapping_splits_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let samples: Vec<_> = (0..3).map(|t| sample(t, 4, 4, |j| j as f32)).collect();
        let splits = Splits {
            train: vec![0, 1],
            val: vec![1],
            test: vec![2],
        };
        assert!(write_dataset(&samples, &VariableUniverse::default(), &splits, dir.path(), "t").is_err());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let samples = vec![sample(0, 4, 4, |j| j as f32), sample(1, 4, 5, |j| j as f32)];
        assert!(write_dataset(&samples, &VariableUniverse::default(), &Splits::contiguous(1, 1, 0), dir.path(), "t").is_err());
    }

    #[test]
    fn truncated_file_is_rejected_on_open() {
        let dir = tempfile::tempdir().unwrap();
        let samples: Vec<_> = (0..2).map(|t| sample(t, 4, 4, |j| j as f32)).collect();
        write_dataset(&samples, &VariableUniverse::default(), &Splits::contiguous(1, 1, 0), dir.path(), "t").unwrap();
        let p = dir.path().join("U.bin");
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(Dataset::open(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn constant_field_gets_floor_std() {
        let m = Moments::of(&[2.5; 10]);
        assert_eq!(m.mean, 2.5);
        assert_eq!(m.std, STD_FLOOR);
    }

    #[test]
    fn symmetric_two_values_have_unit_std() {
        let m = Moments::of(&[-1.0, 1.0, -1.0, 1.0]);
        assert_eq!(m.mean, 0.0);
        assert_eq!(m.std, 1.0);
    }

    #[test]
    fn stats_are_deterministic_and_split_pure() {
        let dir = tempfile::tempdir().unwrap();
        let mut samples: Vec<_> = (0..4).map(|t| sample(t, 4, 4, |j| (j as f32 * 0.37).cos())).collect();
        let splits = Splits::contiguous(2, 1, 1);
        write_dataset(&samples, &VariableUniverse::default(), &splits, dir.path(), "t").unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        let a = compute_norm_stats(&ds).unwrap();
        let b = compute_norm_stats(&ds).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, ds.read_stats().unwrap());

        samples[3].surface.get_mut("SSH").unwrap().data_mut()[0] = 1e6;
        samples[3].target.data_mut()[5] = -3.0;
        let dir2 = tempfile::tempdir().unwrap();
        write_dataset(&samples, &VariableUniverse::default(), &splits, dir2.path(), "t").unwrap();
        assert_eq!(compute_norm_stats(&Dataset::open(dir2.path()).unwrap()).unwrap(), a);
    }

    #[test]
    fn normalize_maps_mean_to_zero_and_mean_plus_std_to_one() {
        let s = sample(0, 2, 2, |_| 0.0);
        let mut stats = NormStats::from_samples([&s], &VariableUniverse::default()).unwrap();
        for m in stats.variables.values_mut() {
            *m = Moments { mean: 3.0, std: 2.0 };
        }
        for m in stats.target.iter_mut() {
            *m = Moments { mean: 3.0, std: 2.0 };
        }
        let mut x = s.clone();
        for g in x.surface.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = 3.0);
        }
        x.target.data_mut().iter_mut().for_each(|v| *v = 5.0);
        let n = normalize(&x, &stats).unwrap();
        assert!(n.surface.values().all(|g| g.data().iter().all(|&v| v == 0.0)));
        assert!(n.target.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn missing_statistic_is_rejected() {
        let s = sample(0, 2, 2, |j| j as f32);
        let mut stats = NormStats::from_samples([&s], &VariableUniverse::default()).unwrap();
        stats.variables.remove("V");
        assert!(normalize(&s, &stats).is_err());
    }

    #[test]
    fn mask_parsing_and_labels() {
        let u = VariableUniverse::default();
        let m = AvailabilityMask::parse(&u, "SSH+V").unwrap();
        assert_eq!(m.bits(), &[true, false, true, false]);
        assert_eq!(m.label(&u), "SSH+V");
        assert!(AvailabilityMask::parse(&u, "SSH+X").is_err());
        assert!(AvailabilityMask::parse(&u, "").is_err());
        assert_eq!(AvailabilityMask::all_nonempty(4).len(), 15);
    }

    proptest! {
        #[test]
        fn denormalize_inverts_normalize(
            mean in -1e3f64..1e3,
            std in 1e-3f64..1e2,
            zs in proptest::collection::vec(-6.0f64..6.0, 16),
        ) {
            let values: Vec<f32> = zs.iter().map(|z| (mean + z * std) as f32).collect();
            let mut s = sample(0, 4, 4, |_| 0.0);
            for g in s.surface.values_mut() {
                g.data_mut().copy_from_slice(&values);
            }
            let mut stats = NormStats::from_samples([&s], &VariableUniverse::default()).unwrap();
            for m in stats.variables.values_mut() {
                *m = Moments { mean, std };
            }
            let back = denormalize(&normalize(&s, &stats).unwrap(), &stats).unwrap();
            let bound = 1e-6 * (mean.abs() + std);
            for (a, b) in s.surface["SSH"].data().iter().zip(back.surface["SSH"].data()) {
                prop_assert!(((*a as f64) - (*b as f64)).abs() <= bound);
            }
        }
    }
}
