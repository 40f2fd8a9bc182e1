use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ClipRecord, DataError, DatasetManifest, Domain};

/// A train/test partition around one held-out (scenario, location) domain.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub held_out_scenario: String,
    pub held_out_location: String,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

impl SplitSpec {
    pub fn held_out(&self) -> Domain {
        Domain::new(
            self.held_out_scenario.clone(),
            self.held_out_location.clone(),
        )
    }

    /// `"Co-JPN"` style name.
    pub fn name(&self) -> String {
        self.held_out().to_string()
    }
}

fn check_preconditions(manifest: &DatasetManifest) -> Result<(), DataError> {
    let scenarios: BTreeSet<&str> = manifest
        .domains
        .iter()
        .map(|d| d.scenario.as_str())
        .collect();
    let locations: BTreeSet<&str> = manifest
        .domains
        .iter()
        .map(|d| d.location.as_str())
        .collect();
    if scenarios.len() < 2 || locations.len() < 2 {
        return Err(DataError::Split(format!(
            "need at least 2 scenarios and 2 locations, found {} and {}",
            scenarios.len(),
            locations.len()
        )));
    }
    Ok(())
}

fn domain_clips<'a>(records: &'a [ClipRecord], d: &Domain) -> Vec<&'a ClipRecord> {
    records
        .iter()
        .filter(|r| r.scenario == d.scenario && r.location == d.location)
        .collect()
}

/// Strict leave-both-out splits, one per designated test domain.
///
/// The test set is every clip of the held-out domain; the training set drops
/// every clip that shares its scenario or its location.
pub fn make_splits(
    manifest: &DatasetManifest,
    records: &[ClipRecord],
) -> Result<Vec<SplitSpec>, DataError> {
    check_preconditions(manifest)?;
    manifest
        .designated_test_domains()
        .iter()
        .map(|d| {
            let test_ids: Vec<String> = domain_clips(records, d)
                .iter()
                .map(|r| r.clip_id.clone())
                .collect();
            if test_ids.is_empty() {
                return Err(DataError::Split(format!("test domain {d} has no clips")));
            }
            let train_ids = records
                .iter()
                .filter(|r| r.scenario != d.scenario && r.location != d.location)
                .map(|r| r.clip_id.clone())
                .collect();
            Ok(SplitSpec {
                held_out_scenario: d.scenario.clone(),
                held_out_location: d.location.clone(),
                train_ids,
                test_ids,
            })
        })
        .collect()
}

/// In-domain counterpart of [`make_splits`]: a seeded `test_fraction` of each
/// test domain is held out and every other clip, including the rest of that
/// domain, is available for training.
pub fn make_seen_domain_splits(
    manifest: &DatasetManifest,
    records: &[ClipRecord],
    test_fraction: f64,
    seed: u64,
) -> Result<Vec<SplitSpec>, DataError> {
    check_preconditions(manifest)?;
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DataError::Split(format!(
            "test_fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    manifest
        .designated_test_domains()
        .iter()
        .enumerate()
        .map(|(k, d)| {
            let clips = domain_clips(records, d);
            if clips.is_empty() {
                return Err(DataError::Split(format!("test domain {d} has no clips")));
            }
            let n_test = ((clips.len() as f64 * test_fraction).round() as usize)
                .clamp(1, clips.len().saturating_sub(1).max(1));
            let mut order: Vec<usize> = (0..clips.len()).collect();
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            order.shuffle(&mut rng);
            let mut picked: Vec<usize> = order[..n_test].to_vec();
            picked.sort_unstable();
            let test: BTreeSet<&str> = picked.iter().map(|&i| clips[i].clip_id.as_str()).collect();
            let test_ids = records
                .iter()
                .filter(|r| test.contains(r.clip_id.as_str()))
                .map(|r| r.clip_id.clone())
                .collect();
            let train_ids = records
                .iter()
                .filter(|r| !test.contains(r.clip_id.as_str()))
                .map(|r| r.clip_id.clone())
                .collect();
            Ok(SplitSpec {
                held_out_scenario: d.scenario.clone(),
                held_out_location: d.location.clone(),
                train_ids,
                test_ids,
            })
        })
        .collect()
}
