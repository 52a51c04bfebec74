//! Cross-modality retrieval evaluation: CMC rank-k curve and mAP.
//!
//! For each query the gallery is ranked by ascending Euclidean distance with
//! ties broken by gallery index. `cmc[k-1]` is the fraction of queries whose
//! first correct match ranks within the top k; a query's AP is the mean of
//! precision-at-hit over its correct gallery entries.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::Modality;
use crate::error::{Error, Result};
use crate::losses::FeatureBatch;

/// Query and gallery features for one retrieval direction.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub query: FeatureBatch,
    pub gallery: FeatureBatch,
}

impl EvalSet {
    /// Validate the protocol invariants: each side single-modality, the two
    /// modalities differ, and every query identity occurs in the gallery.
    pub fn new(query: FeatureBatch, gallery: FeatureBatch) -> Result<Self> {
        let single = |batch: &FeatureBatch, name: &str| -> Result<Modality> {
            let first = *batch
                .modalities
                .first()
                .ok_or_else(|| Error::protocol(format!("{name} set is empty")))?;
            if batch.modalities.iter().any(|&m| m != first) {
                return Err(Error::protocol(format!("{name} set mixes modalities")));
            }
            Ok(first)
        };
        let qm = single(&query, "query")?;
        let gm = single(&gallery, "gallery")?;
        if qm == gm {
            return Err(Error::protocol(format!(
                "query and gallery are both {qm}; cross-modality evaluation needs opposite modalities"
            )));
        }
        for &identity in &query.identities {
            if !gallery.identities.contains(&identity) {
                return Err(Error::protocol(format!(
                    "query identity {identity} is absent from the gallery"
                )));
            }
        }
        if query.features.ncols() != gallery.features.ncols() {
            return Err(Error::shape(format!(
                "query dim {} != gallery dim {}",
                query.features.ncols(),
                gallery.features.ncols()
            )));
        }
        Ok(EvalSet { query, gallery })
    }
}

/// CMC curve (index k-1 holds rank-k accuracy), mAP, and per-query APs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub cmc: Vec<f64>,
    pub map: f64,
    pub per_query_ap: Vec<f64>,
}

impl RetrievalResult {
    /// Rank-k accuracy (1-based k, clamped to the gallery size).
    pub fn rank(&self, k: usize) -> f64 {
        let k = k.clamp(1, self.cmc.len());
        self.cmc[k - 1]
    }
}

/// Evaluate one query-modality to gallery-modality direction.
pub fn evaluate(set: &EvalSet) -> Result<RetrievalResult> {
    let n_query = set.query.len();
    let n_gallery = set.gallery.len();
    let dim = set.query.features.ncols();

    let mut first_hit_ranks = Vec::with_capacity(n_query);
    let mut per_query_ap = Vec::with_capacity(n_query);

    for (qi, qrow) in set.query.features.rows().into_iter().enumerate() {
        let mut order: Vec<(f64, usize)> = (0..n_gallery)
            .map(|gi| {
                let mut sq = 0.0;
                for d in 0..dim {
                    let diff = qrow[d] - set.gallery.features[(gi, d)];
                    sq += diff * diff;
                }
                (sq.sqrt(), gi)
            })
            .collect();
        if order.iter().any(|(d, _)| !d.is_finite()) {
            return Err(Error::numerical(format!("non-finite distance for query {qi}")));
        }
        order.sort_by(|a, b| a.partial_cmp(b).unwrap());

        let identity = set.query.identities[qi];
        let mut first_hit = None;
        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        for (rank0, &(_, gi)) in order.iter().enumerate() {
            if set.gallery.identities[gi] == identity {
                hits += 1;
                precision_sum += hits as f64 / (rank0 + 1) as f64;
                if first_hit.is_none() {
                    first_hit = Some(rank0 + 1);
                }
            }
        }
        // EvalSet::new guarantees at least one correct entry.
        first_hit_ranks.push(first_hit.unwrap());
        per_query_ap.push(precision_sum / hits as f64);
    }

    let mut cmc = vec![0.0; n_gallery];
    for &rank in &first_hit_ranks {
        cmc[rank - 1] += 1.0;
    }
    let mut acc = 0.0;
    for v in cmc.iter_mut() {
        acc += *v;
        *v = acc / n_query as f64;
    }
    let map = per_query_ap.iter().sum::<f64>() / n_query as f64;
    Ok(RetrievalResult {
        cmc,
        map,
        per_query_ap,
    })
}

/// Read features from CSV with header `identity,modality,f0..f{D-1}`.
pub fn read_features_csv(path: &Path) -> Result<FeatureBatch> {
    let mut reader =
        csv::Reader::from_path(path).map_err(|e| Error::parse(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::parse(format!("{}: {e}", path.display())))?
        .clone();
    let cols: Vec<&str> = headers.iter().collect();
    if cols.len() < 3 || cols[0] != "identity" || cols[1] != "modality" {
        return Err(Error::parse(format!(
            "{}: expected header identity,modality,f0.., got {:?}",
            path.display(),
            cols
        )));
    }
    for (i, name) in cols[2..].iter().enumerate() {
        if *name != format!("f{i}") {
            return Err(Error::parse(format!(
                "{}: feature column {} named {name:?}, expected f{i}",
                path.display(),
                i + 2
            )));
        }
    }
    let dim = cols.len() - 2;
    let mut identities = Vec::new();
    let mut modalities = Vec::new();
    let mut values = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::parse(format!("{}: {e}", path.display())))?;
        let row = line + 2;
        if record.len() != dim + 2 {
            return Err(Error::parse(format!(
                "{}: row {row}: expected {} fields, got {}",
                path.display(),
                dim + 2,
                record.len()
            )));
        }
        identities.push(record[0].trim().parse::<u32>().map_err(|e| {
            Error::parse(format!("{}: row {row}, col identity: {e}", path.display()))
        })?);
        modalities.push(Modality::parse(&record[1]).map_err(|e| {
            Error::parse(format!("{}: row {row}, col modality: {e}", path.display()))
        })?);
        for d in 0..dim {
            values.push(record[d + 2].trim().parse::<f64>().map_err(|e| {
                Error::parse(format!("{}: row {row}, col f{d}: {e}", path.display()))
            })?);
        }
    }
    let n = identities.len();
    let features = Array2::from_shape_vec((n, dim), values)
        .map_err(|e| Error::shape(format!("{}: {e}", path.display())))?;
    FeatureBatch::new(features, identities, modalities)
}

/// Write features as CSV with header `identity,modality,f0..f{D-1}`.
pub fn write_features_csv(path: &Path, batch: &FeatureBatch) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write!(w, "identity,modality")?;
    for d in 0..batch.features.ncols() {
        write!(w, ",f{d}")?;
    }
    writeln!(w)?;
    for (i, row) in batch.features.rows().into_iter().enumerate() {
        write!(w, "{},{}", batch.identities[i], batch.modalities[i])?;
        for v in row.iter() {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}
