//! Participant-level stratified cross-validation splits.
//!
//! Folds partition participants (never images), so no person contributes
//! to both sides of a train/test boundary. Stratification is by each
//! participant's majority label; assignment is greedy by descending image
//! count into the currently lightest fold, which keeps both class
//! proportions and fold sizes balanced.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::data::record::DatasetManifest;
use crate::error::{Error, Result};
use crate::seeds::{self, tag};

pub const DEFAULT_STRATIFICATION_TOLERANCE_PP: f64 = 10.0;

#[derive(Debug, Clone)]
pub struct SplitSpec {
    pub fold_assignments: BTreeMap<String, usize>,
    pub folds: usize,
    pub seed: u64,
}

impl SplitSpec {
    pub fn fold_of(&self, participant: &str) -> Option<usize> {
        self.fold_assignments.get(participant).copied()
    }

    /// Record indices whose participant is NOT in `fold` (training side).
    pub fn train_indices(&self, manifest: &DatasetManifest, fold: usize) -> Vec<usize> {
        manifest
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| self.fold_of(&r.participant_id) != Some(fold))
            .map(|(i, _)| i)
            .collect()
    }

    /// Record indices whose participant is in `fold` (held-out side).
    pub fn test_indices(&self, manifest: &DatasetManifest, fold: usize) -> Vec<usize> {
        manifest
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| self.fold_of(&r.participant_id) == Some(fold))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Majority label of a participant's labeled images; ties break toward
/// the smallest label index. `None` if the participant has no labels.
fn majority_label(labels: &[usize], n_classes: usize) -> Option<usize> {
    if labels.is_empty() {
        return None;
    }
    let mut counts = vec![0usize; n_classes];
    for &l in labels {
        counts[l] += 1;
    }
    counts
        .iter()
        .enumerate()
        .max_by_key(|(i, &c)| (c, usize::MAX - i))
        .map(|(i, _)| i)
}

pub fn stratified_participant_split(
    manifest: &DatasetManifest,
    folds: usize,
    seed: u64,
) -> Result<SplitSpec> {
    if folds < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {folds}")));
    }
    // Gather per-participant labels and image counts in first-appearance
    // order so the result is independent of map iteration order.
    let mut order: Vec<String> = Vec::new();
    let mut labels: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let mut images: BTreeMap<String, usize> = BTreeMap::new();
    for r in &manifest.records {
        if !labels.contains_key(&r.participant_id) {
            order.push(r.participant_id.clone());
        }
        let e = labels.entry(r.participant_id.clone()).or_default();
        if let Some(l) = r.label {
            e.push(l);
        }
        *images.entry(r.participant_id.clone()).or_insert(0) += 1;
    }
    if order.len() < folds {
        return Err(Error::Data(format!(
            "cannot split {} participants into {} folds",
            order.len(),
            folds
        )));
    }

    // Group participants by stratum (majority label; unlabeled last).
    let n_classes = manifest.n_classes.max(1);
    let mut strata: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for p in &order {
        let key = majority_label(&labels[p], n_classes).unwrap_or(n_classes);
        strata.entry(key).or_default().push(p.clone());
    }

    let mut assignments = BTreeMap::new();
    // Each stratum is spread over folds independently by image load.
    // Deliberately NOT balancing total fold sizes across strata: when two
    // strata have similarly ragged participant sizes, assigning their big
    // members to the same folds keeps per-fold class proportions close to
    // global, which is the invariant that matters; per-fold totals are
    // allowed to drift instead.
    let mut fold_class_load: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (stratum, mut members) in strata {
        let loads = fold_class_load
            .entry(stratum)
            .or_insert_with(|| vec![0usize; folds]);
        // Seeded shuffle for tie-breaking, then a stable sort by image
        // count (descending) so big participants place first.
        let mut rng = seeds::rng_for(seed, &[tag::SPLIT, stratum as u64]);
        members.shuffle(&mut rng);
        members.sort_by_key(|p| usize::MAX - images[p]);
        for p in members {
            let fold = (0..folds).min_by_key(|&f| (loads[f], f)).unwrap();
            loads[fold] += images[&p];
            assignments.insert(p, fold);
        }
    }
    Ok(SplitSpec {
        fold_assignments: assignments,
        folds,
        seed,
    })
}

/// Check the stratification invariant: per-fold class frequencies within
/// `tolerance_pp` percentage points of the global frequencies, for every
/// class that has at least `folds` participants.
pub fn check_stratification(
    manifest: &DatasetManifest,
    split: &SplitSpec,
    tolerance_pp: f64,
) -> Result<()> {
    let n_classes = manifest.n_classes;
    if n_classes == 0 {
        return Ok(());
    }
    let mut global = vec![0usize; n_classes];
    let mut per_fold = vec![vec![0usize; n_classes]; split.folds];
    let mut class_participants = vec![std::collections::HashSet::new(); n_classes];
    for r in &manifest.records {
        if let Some(l) = r.label {
            global[l] += 1;
            class_participants[l].insert(r.participant_id.as_str());
            if let Some(f) = split.fold_of(&r.participant_id) {
                per_fold[f][l] += 1;
            }
        }
    }
    let total: usize = global.iter().sum();
    if total == 0 {
        return Ok(());
    }
    for f in 0..split.folds {
        let fold_total: usize = per_fold[f].iter().sum();
        if fold_total == 0 {
            continue;
        }
        for c in 0..n_classes {
            if class_participants[c].len() < split.folds {
                continue;
            }
            let got = 100.0 * per_fold[f][c] as f64 / fold_total as f64;
            let want = 100.0 * global[c] as f64 / total as f64;
            if (got - want).abs() >= tolerance_pp {
                return Err(Error::Data(format!(
                    "fold {f} class {c} frequency {got:.1}% deviates more than \
                     {tolerance_pp} pp from global {want:.1}%"
                )));
            }
        }
    }
    Ok(())
}
