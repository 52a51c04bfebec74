//! Identity-balanced PK batch construction.
//!
//! Every mini-batch holds P identities with K visible and K thermal samples
//! each, 2PK slots total. One epoch is a shuffled round-robin over all
//! identities: `ceil(N / P)` batches, with the final short group padded by
//! re-drawing identities already used earlier in the epoch.
//!
//! The whole epoch is a pure function of `(index, cfg)`. Draw order, with a
//! single ChaCha8 stream seeded by `cfg.seed`:
//!   1. Fisher-Yates shuffle of the sorted distinct identity list.
//!   2. For a short final group, a without-replacement draw of the missing
//!      identities from the earlier part of the shuffled list.
//!   3. Per batch slot, identities in group order, visible before thermal:
//!      K indices into the identity's sample-id pool (sorted ascending),
//!      without replacement when the pool has at least K entries, with
//!      replacement otherwise.

use serde::{Deserialize, Serialize};

use crate::data::{DatasetIndex, Modality};
use crate::error::{Error, Result};
use crate::rng;

/// PK sampling settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Identities per batch.
    pub p: usize,
    /// Samples per identity per modality.
    pub k: usize,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p < 2 {
            return Err(Error::config(format!("P must be at least 2, got {}", self.p)));
        }
        if self.k < 1 {
            return Err(Error::config(format!("K must be at least 1, got {}", self.k)));
        }
        Ok(())
    }
}

/// One planned batch: 2PK sample ids with their labels, grouped by identity,
/// K visible slots then K thermal slots per identity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiniBatchSpec {
    pub slots: Vec<u64>,
    pub identities: Vec<u32>,
    pub modalities: Vec<Modality>,
}

impl MiniBatchSpec {
    /// Check the PK invariants: exactly P distinct identities, each with K
    /// slots per modality, and labels consistent with `index`.
    pub fn validate(&self, index: &DatasetIndex, p: usize, k: usize) -> Result<()> {
        let expect = 2 * p * k;
        if self.slots.len() != expect
            || self.identities.len() != expect
            || self.modalities.len() != expect
        {
            return Err(Error::data(format!(
                "batch has {} slots, expected {expect}",
                self.slots.len()
            )));
        }
        let mut counts: std::collections::BTreeMap<u32, [usize; 2]> = Default::default();
        let by_id: std::collections::HashMap<u64, (u32, Modality)> = index
            .entries
            .iter()
            .map(|e| (e.sample_id, (e.identity, e.modality)))
            .collect();
        for ((&sid, &identity), &modality) in self
            .slots
            .iter()
            .zip(&self.identities)
            .zip(&self.modalities)
        {
            let (true_id, true_mod) = *by_id
                .get(&sid)
                .ok_or_else(|| Error::data(format!("slot {sid} not in index")))?;
            if true_id != identity || true_mod != modality {
                return Err(Error::data(format!(
                    "slot {sid} labeled ({identity}, {modality}) but index says ({true_id}, {true_mod})"
                )));
            }
            counts.entry(identity).or_insert([0, 0])[modality as usize] += 1;
        }
        if counts.len() != p {
            return Err(Error::data(format!(
                "batch has {} distinct identities, expected {p}",
                counts.len()
            )));
        }
        for (identity, c) in counts {
            if c != [k, k] {
                return Err(Error::data(format!(
                    "identity {identity} has {}/{} slots per modality, expected {k}/{k}",
                    c[0], c[1]
                )));
            }
        }
        Ok(())
    }
}

/// Plan all batches of one epoch.
pub fn build_epoch(index: &DatasetIndex, cfg: &SamplerConfig) -> Result<Vec<MiniBatchSpec>> {
    cfg.validate()?;
    index.validate()?;
    let identities = index.distinct_identities();
    if cfg.p > identities.len() {
        return Err(Error::config(format!(
            "P = {} exceeds the {} distinct identities",
            cfg.p,
            identities.len()
        )));
    }

    let mut rng = rng::seeded(cfg.seed);
    let mut order = identities.clone();
    rng::shuffle(&mut rng, &mut order);

    let n = order.len();
    let num_batches = n.div_ceil(cfg.p);
    let mut batches = Vec::with_capacity(num_batches);
    for b in 0..num_batches {
        let start = b * cfg.p;
        let mut group: Vec<u32> = order[start..(start + cfg.p).min(n)].to_vec();
        if group.len() < cfg.p {
            // Pad the final short group from identities used earlier in the
            // epoch, without replacement.
            let missing = cfg.p - group.len();
            let used = &order[..start];
            for pick in rng::sample_without_replacement(&mut rng, used.len(), missing) {
                group.push(used[pick]);
            }
        }

        let mut slots = Vec::with_capacity(2 * cfg.p * cfg.k);
        let mut slot_ids = Vec::with_capacity(2 * cfg.p * cfg.k);
        let mut slot_mods = Vec::with_capacity(2 * cfg.p * cfg.k);
        for &identity in &group {
            for modality in Modality::BOTH {
                let pool = index.group(identity, modality);
                debug_assert!(!pool.is_empty(), "index invariant");
                let picks = if pool.len() >= cfg.k {
                    rng::sample_without_replacement(&mut rng, pool.len(), cfg.k)
                } else {
                    rng::sample_with_replacement(&mut rng, pool.len(), cfg.k)
                };
                for pick in picks {
                    slots.push(pool[pick]);
                    slot_ids.push(identity);
                    slot_mods.push(modality);
                }
            }
        }
        batches.push(MiniBatchSpec {
            slots,
            identities: slot_ids,
            modalities: slot_mods,
        });
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::IndexEntry;

    fn synthetic_index(identities: u32, per_group: usize) -> DatasetIndex {
        let mut entries = Vec::new();
        let mut sid = 0;
        for identity in 0..identities {
            for m in Modality::BOTH {
                for _ in 0..per_group {
                    entries.push(IndexEntry {
                        sample_id: sid,
                        identity,
                        modality: m,
                    });
                    sid += 1;
                }
            }
        }
        DatasetIndex::new(entries).unwrap()
    }

    #[test]
    fn batches_have_the_pk_shape() {
        let index = synthetic_index(20, 5);
        let cfg = SamplerConfig { p: 8, k: 4, seed: 7 };
        let batches = build_epoch(&index, &cfg).unwrap();
        assert_eq!(batches.len(), 3); // ceil(20 / 8)
        for batch in &batches {
            assert_eq!(batch.slots.len(), 64);
            batch.validate(&index, 8, 4).unwrap();
            let mut distinct = batch.identities.clone();
            distinct.sort_unstable();
            distinct.dedup();
            assert_eq!(distinct.len(), 8);
        }
    }

    #[test]
    fn two_identities_one_sample_each_is_forced() {
        let index = synthetic_index(2, 1);
        let cfg = SamplerConfig { p: 2, k: 1, seed: 0 };
        for seed in [0u64, 1, 99, 12345] {
            let batches = build_epoch(&index, &SamplerConfig { seed, ..cfg }).unwrap();
            assert_eq!(batches.len(), 1);
            let mut slots = batches[0].slots.clone();
            slots.sort_unstable();
            assert_eq!(slots, vec![0, 1, 2, 3]);
        }
    }

    #[test]
    fn epoch_is_deterministic() {
        let index = synthetic_index(11, 3);
        let cfg = SamplerConfig { p: 4, k: 2, seed: 55 };
        assert_eq!(
            build_epoch(&index, &cfg).unwrap(),
            build_epoch(&index, &cfg).unwrap()
        );
        let other = build_epoch(&index, &SamplerConfig { seed: 56, ..cfg }).unwrap();
        assert_ne!(build_epoch(&index, &cfg).unwrap(), other);
    }

    #[test]
    fn round_robin_covers_every_identity() {
        let index = synthetic_index(10, 2);
        let cfg = SamplerConfig { p: 3, k: 1, seed: 3 };
        let batches = build_epoch(&index, &cfg).unwrap();
        assert_eq!(batches.len(), 4);
        let mut seen: Vec<u32> = batches
            .iter()
            .flat_map(|b| b.identities.iter().copied())
            .collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 10);
        // floor(batches * P / N) = floor(12 / 10) = 1 selection minimum
        for identity in 0..10u32 {
            let selections = batches
                .iter()
                .filter(|b| b.identities.contains(&identity))
                .count();
            assert!(selections >= 1);
        }
    }

    #[test]
    fn small_pools_fall_back_to_replacement() {
        let index = synthetic_index(4, 2);
        let cfg = SamplerConfig { p: 2, k: 5, seed: 9 };
        let batches = build_epoch(&index, &cfg).unwrap();
        for batch in &batches {
            batch.validate(&index, 2, 5).unwrap();
        }
    }

    #[test]
    fn without_replacement_when_pool_suffices() {
        let index = synthetic_index(6, 8);
        let cfg = SamplerConfig { p: 3, k: 8, seed: 21 };
        let batches = build_epoch(&index, &cfg).unwrap();
        for batch in &batches {
            // all slots distinct because every pool has exactly K entries
            let mut slots = batch.slots.clone();
            slots.sort_unstable();
            slots.dedup();
            assert_eq!(slots.len(), batch.slots.len());
        }
    }

    #[test]
    fn p_larger_than_identity_count_is_a_config_error() {
        let index = synthetic_index(3, 2);
        let cfg = SamplerConfig { p: 4, k: 1, seed: 0 };
        assert!(matches!(build_epoch(&index, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn missing_modality_is_a_data_error() {
        let mut index = synthetic_index(3, 2);
        index
            .entries
            .retain(|e| !(e.identity == 2 && e.modality == Modality::Thermal));
        let cfg = SamplerConfig { p: 2, k: 1, seed: 0 };
        assert!(matches!(build_epoch(&index, &cfg), Err(Error::Data(_))));
    }
}
