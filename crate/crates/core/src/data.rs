//! Dataset primitives: labeled samples, the dataset index, and mini-batches.
//!
//! A dataset is a flat collection of image-like `H x W x C` tensors, each
//! tagged with an identity and a modality. The index (`sample_id`, `identity`,
//! `modality`) is the unit the sampler works on; tensors are only touched when
//! a batch is assembled.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sensor domain of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visible,
    Thermal,
}

impl Modality {
    /// Single-letter code used in CSV files.
    pub fn code(self) -> &'static str {
        match self {
            Modality::Visible => "V",
            Modality::Thermal => "T",
        }
    }

    /// The opposite modality.
    pub fn other(self) -> Modality {
        match self {
            Modality::Visible => Modality::Thermal,
            Modality::Thermal => Modality::Visible,
        }
    }

    /// Parse either the CSV code (`V`/`T`) or the long name.
    pub fn parse(s: &str) -> Result<Modality> {
        match s.trim() {
            "V" | "v" | "visible" => Ok(Modality::Visible),
            "T" | "t" | "thermal" => Ok(Modality::Thermal),
            other => Err(Error::parse(format!("unknown modality {other:?}"))),
        }
    }

    pub const BOTH: [Modality; 2] = [Modality::Visible, Modality::Thermal];
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// One row of a dataset index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub sample_id: u64,
    pub identity: u32,
    pub modality: Modality,
}

/// The sampler's view of a dataset: identity and modality per sample id.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub entries: Vec<IndexEntry>,
}

impl DatasetIndex {
    pub fn new(entries: Vec<IndexEntry>) -> Result<Self> {
        let index = DatasetIndex { entries };
        index.validate()?;
        Ok(index)
    }

    /// Check structural invariants: unique sample ids and both modalities
    /// present for every identity.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashMap::with_capacity(self.entries.len());
        for e in &self.entries {
            if seen.insert(e.sample_id, ()).is_some() {
                return Err(Error::data(format!("duplicate sample_id {}", e.sample_id)));
            }
        }
        let mut coverage: BTreeMap<u32, [usize; 2]> = BTreeMap::new();
        for e in &self.entries {
            let slot = coverage.entry(e.identity).or_insert([0, 0]);
            slot[e.modality as usize] += 1;
        }
        for (identity, counts) in &coverage {
            for m in Modality::BOTH {
                if counts[m as usize] == 0 {
                    return Err(Error::data(format!(
                        "identity {identity} has no {m} entries"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Sorted distinct identities.
    pub fn distinct_identities(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.entries.iter().map(|e| e.identity).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Sample ids of one `(identity, modality)` group, sorted ascending.
    pub fn group(&self, identity: u32, modality: Modality) -> Vec<u64> {
        let mut ids: Vec<u64> = self
            .entries
            .iter()
            .filter(|e| e.identity == identity && e.modality == modality)
            .map(|e| e.sample_id)
            .collect();
        ids.sort_unstable();
        ids
    }

    /// Split into (train, eval) by holding out the `per_group` largest sample
    /// ids of every `(identity, modality)` group. Deterministic: no RNG, the
    /// split is a function of the index alone.
    pub fn split_holdout(&self, per_group: usize) -> Result<(DatasetIndex, DatasetIndex)> {
        let mut held: HashMap<u64, ()> = HashMap::new();
        for identity in self.distinct_identities() {
            for m in Modality::BOTH {
                let group = self.group(identity, m);
                if group.len() <= per_group {
                    return Err(Error::config(format!(
                        "cannot hold out {per_group} of {} samples for identity {identity} {m}",
                        group.len()
                    )));
                }
                for &sid in &group[group.len() - per_group..] {
                    held.insert(sid, ());
                }
            }
        }
        let (eval, train): (Vec<_>, Vec<_>) = self
            .entries
            .iter()
            .copied()
            .partition(|e| held.contains_key(&e.sample_id));
        Ok((DatasetIndex::new(train)?, DatasetIndex::new(eval)?))
    }

    /// Read an index from CSV with header `sample_id,identity,modality`.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)
            .map_err(|e| Error::parse(format!("{}: {e}", path.display())))?;
        let headers = reader
            .headers()
            .map_err(|e| Error::parse(format!("{}: {e}", path.display())))?
            .clone();
        let expected = ["sample_id", "identity", "modality"];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(Error::parse(format!(
                "{}: expected header sample_id,identity,modality, got {:?}",
                path.display(),
                headers
            )));
        }
        let mut entries = Vec::new();
        for (line, record) in reader.records().enumerate() {
            let record = record.map_err(|e| Error::parse(format!("{}: {e}", path.display())))?;
            let row = line + 2; // 1-based, after header
            let field = |i: usize| -> Result<&str> {
                record.get(i).ok_or_else(|| {
                    Error::parse(format!("{}: row {row}: missing column {i}", path.display()))
                })
            };
            let sample_id = field(0)?.trim().parse::<u64>().map_err(|e| {
                Error::parse(format!("{}: row {row}, col sample_id: {e}", path.display()))
            })?;
            let identity = field(1)?.trim().parse::<u32>().map_err(|e| {
                Error::parse(format!("{}: row {row}, col identity: {e}", path.display()))
            })?;
            let modality = Modality::parse(field(2)?).map_err(|e| {
                Error::parse(format!("{}: row {row}, col modality: {e}", path.display()))
            })?;
            entries.push(IndexEntry {
                sample_id,
                identity,
                modality,
            });
        }
        DatasetIndex::new(entries)
    }

    /// Write the index as CSV with header `sample_id,identity,modality`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("sample_id,identity,modality\n");
        for e in &self.entries {
            out.push_str(&format!("{},{},{}\n", e.sample_id, e.identity, e.modality));
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// One image-like tensor with its labels.
#[derive(Debug, Clone)]
pub struct LabeledSample {
    pub sample_id: u64,
    pub identity: u32,
    pub modality: Modality,
    pub data: Array3<f64>,
}

/// Sidecar metadata stored next to the sample tensors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub input_shape: (usize, usize, usize),
    /// Echo of the generator spec when the dataset is synthetic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<serde_json::Value>,
}

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// In-memory dataset: samples plus an id lookup.
#[derive(Debug, Clone)]
pub struct Dataset {
    samples: Vec<LabeledSample>,
    lookup: HashMap<u64, usize>,
    input_shape: (usize, usize, usize),
    meta_generator: Option<serde_json::Value>,
}

impl Dataset {
    pub fn new(samples: Vec<LabeledSample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::data("dataset has no samples"));
        }
        let input_shape = {
            let d = samples[0].data.dim();
            (d.0, d.1, d.2)
        };
        let mut lookup = HashMap::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            if s.data.dim() != input_shape {
                return Err(Error::shape(format!(
                    "sample {} has shape {:?}, expected {:?}",
                    s.sample_id,
                    s.data.dim(),
                    input_shape
                )));
            }
            if !s.data.iter().all(|v| v.is_finite()) {
                return Err(Error::numerical(format!(
                    "sample {} contains non-finite values",
                    s.sample_id
                )));
            }
            if lookup.insert(s.sample_id, i).is_some() {
                return Err(Error::data(format!("duplicate sample_id {}", s.sample_id)));
            }
        }
        let ds = Dataset {
            samples,
            lookup,
            input_shape,
            meta_generator: None,
        };
        ds.index().validate()?;
        Ok(ds)
    }

    pub fn with_generator_echo(mut self, echo: serde_json::Value) -> Self {
        self.meta_generator = Some(echo);
        self
    }

    pub fn samples(&self) -> &[LabeledSample] {
        &self.samples
    }

    pub fn get(&self, sample_id: u64) -> Option<&LabeledSample> {
        self.lookup.get(&sample_id).map(|&i| &self.samples[i])
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    pub fn index(&self) -> DatasetIndex {
        DatasetIndex {
            entries: self
                .samples
                .iter()
                .map(|s| IndexEntry {
                    sample_id: s.sample_id,
                    identity: s.identity,
                    modality: s.modality,
                })
                .collect(),
        }
    }

    /// Map from identity label to contiguous class index (sorted order).
    pub fn class_mapping(&self) -> HashMap<u32, usize> {
        self.index()
            .distinct_identities()
            .into_iter()
            .enumerate()
            .map(|(i, id)| (id, i))
            .collect()
    }

    /// Write `index.csv`, `samples.csv` and `meta.json` into `dir`.
    ///
    /// `samples.csv` holds one row per sample: the id followed by the tensor
    /// values flattened in row-major (H, W, C) order, printed with Rust's
    /// shortest round-trip float formatting so a reload is bit-exact.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.index().write_csv(&dir.join("index.csv"))?;

        let n = self.input_shape.0 * self.input_shape.1 * self.input_shape.2;
        let file = std::fs::File::create(dir.join("samples.csv"))?;
        let mut w = std::io::BufWriter::new(file);
        write!(w, "sample_id")?;
        for i in 0..n {
            write!(w, ",v{i}")?;
        }
        writeln!(w)?;
        for s in &self.samples {
            write!(w, "{}", s.sample_id)?;
            for v in s.data.iter() {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        w.flush()?;

        let meta = DatasetMeta {
            format_version: DATASET_FORMAT_VERSION,
            input_shape: self.input_shape,
            generator: self.meta_generator.clone(),
        };
        let meta_json = serde_json::to_string_pretty(&meta)
            .map_err(|e| Error::parse(format!("meta encode: {e}")))?;
        std::fs::write(dir.join("meta.json"), meta_json + "\n")?;
        Ok(())
    }

    /// Load a dataset previously written by [`Dataset::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        let meta: DatasetMeta = serde_json::from_str(&std::fs::read_to_string(&meta_path)?)
            .map_err(|e| Error::parse(format!("{}: {e}", meta_path.display())))?;
        if meta.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::parse(format!(
                "unsupported dataset format_version {}",
                meta.format_version
            )));
        }
        let index = DatasetIndex::read_csv(&dir.join("index.csv"))?;
        let by_id: HashMap<u64, IndexEntry> =
            index.entries.iter().map(|e| (e.sample_id, *e)).collect();

        let (h, w_, c) = meta.input_shape;
        let n = h * w_ * c;
        let samples_path = dir.join("samples.csv");
        let mut reader = csv::Reader::from_path(&samples_path)
            .map_err(|e| Error::parse(format!("{}: {e}", samples_path.display())))?;
        let mut samples = Vec::new();
        for (line, record) in reader.records().enumerate() {
            let record =
                record.map_err(|e| Error::parse(format!("{}: {e}", samples_path.display())))?;
            let row = line + 2;
            if record.len() != n + 1 {
                return Err(Error::parse(format!(
                    "{}: row {row}: expected {} fields, got {}",
                    samples_path.display(),
                    n + 1,
                    record.len()
                )));
            }
            let sample_id = record[0].trim().parse::<u64>().map_err(|e| {
                Error::parse(format!("{}: row {row}: {e}", samples_path.display()))
            })?;
            let entry = by_id.get(&sample_id).ok_or_else(|| {
                Error::data(format!("sample {sample_id} missing from index.csv"))
            })?;
            let mut values = Vec::with_capacity(n);
            for i in 0..n {
                values.push(record[i + 1].trim().parse::<f64>().map_err(|e| {
                    Error::parse(format!(
                        "{}: row {row}, col v{i}: {e}",
                        samples_path.display()
                    ))
                })?);
            }
            let data = Array3::from_shape_vec((h, w_, c), values)
                .map_err(|e| Error::shape(format!("sample {sample_id}: {e}")))?;
            samples.push(LabeledSample {
                sample_id,
                identity: entry.identity,
                modality: entry.modality,
                data,
            });
        }
        if samples.len() != index.entries.len() {
            return Err(Error::data(format!(
                "index lists {} samples but samples.csv has {}",
                index.entries.len(),
                samples.len()
            )));
        }
        let mut ds = Dataset::new(samples)?;
        ds.meta_generator = meta.generator;
        Ok(ds)
    }

    /// Gather the samples named by an index subset (e.g. a holdout split).
    pub fn subset(&self, index: &DatasetIndex) -> Result<Vec<&LabeledSample>> {
        index
            .entries
            .iter()
            .map(|e| {
                self.get(e.sample_id)
                    .ok_or_else(|| Error::data(format!("sample {} not in dataset", e.sample_id)))
            })
            .collect()
    }
}

/// A materialized mini-batch in sampler slot order.
#[derive(Debug, Clone)]
pub struct MiniBatch {
    pub sample_ids: Vec<u64>,
    pub identities: Vec<u32>,
    pub modalities: Vec<Modality>,
    pub inputs: Vec<Array3<f64>>,
}

impl MiniBatch {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn from_samples(samples: &[&LabeledSample]) -> Self {
        MiniBatch {
            sample_ids: samples.iter().map(|s| s.sample_id).collect(),
            identities: samples.iter().map(|s| s.identity).collect(),
            modalities: samples.iter().map(|s| s.modality).collect(),
            inputs: samples.iter().map(|s| s.data.clone()).collect(),
        }
    }
}
