use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::manifest::{Manifest, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::rng;

/// Records grouped by patient, in order of first appearance. A record with an
/// empty patient id forms a group of its own.
pub fn patient_groups(records: &[SampleRecord]) -> Vec<Vec<usize>> {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut by_patient: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        if r.patient_id.is_empty() {
            groups.push(vec![i]);
            continue;
        }
        let g = *by_patient.entry(r.patient_id.as_str()).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[g].push(i);
    }
    groups
}

/// Number of leading groups assigned to train: groups are taken in order until
/// the accumulated sample count reaches `fraction * total`.
pub fn greedy_prefix(sizes: &[usize], fraction: f64) -> usize {
    let total: usize = sizes.iter().sum();
    let target = fraction * total as f64;
    let mut taken = 0usize;
    for (k, &n) in sizes.iter().enumerate() {
        if taken as f64 >= target {
            return k;
        }
        taken += n;
    }
    sizes.len()
}

fn check_fraction(fraction: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("train fraction {fraction} outside [0, 1]")));
    }
    Ok(())
}

/// Assigns every record to train or test so that no patient is in both.
///
/// Patients are visited in an order shuffled by `seed` and moved to train one
/// at a time until the train split holds at least `train_fraction` of the
/// samples. Returns the new manifest and any warnings.
pub fn split_by_patient(manifest: &Manifest, train_fraction: f64, seed: u64) -> Result<(Manifest, Vec<String>)> {
    check_fraction(train_fraction)?;
    let mut groups = patient_groups(&manifest.records);
    groups.shuffle(&mut rng::stream(seed, "split"));
    let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
    let mut k = greedy_prefix(&sizes, train_fraction);
    let mut warnings = Vec::new();
    if groups.len() == 1 && train_fraction > 0.0 {
        k = 1;
        warnings.push("only one patient: every record goes to train and the test split is empty".into());
    } else if k == groups.len() && !groups.is_empty() {
        warnings.push("the test split is empty".into());
    }

    let mut records = manifest.records.clone();
    for (g, members) in groups.iter().enumerate() {
        let split = if g < k { Split::Train } else { Split::Test };
        for &i in members {
            records[i].split = split;
        }
    }
    Ok((manifest.derive(records, "split", Some(seed), manifest.meta.layout), warnings))
}

/// Partitions record indices into (kept, held out) with whole patients held
/// out: `round(fraction * patients)` of them, at least one when there are two
/// or more patients and the fraction is positive.
pub fn holdout_patients(records: &[SampleRecord], indices: &[usize], fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    check_fraction(fraction)?;
    let subset: Vec<SampleRecord> = indices.iter().map(|&i| records[i].clone()).collect();
    let mut groups = patient_groups(&subset);
    groups.shuffle(&mut rng::stream(seed, "validation"));
    let n = groups.len();
    let mut held = (fraction * n as f64).round() as usize;
    if fraction > 0.0 && n >= 2 {
        held = held.clamp(1, n - 1);
    } else if n < 2 {
        held = 0;
    }
    let mut kept = Vec::new();
    let mut out = Vec::new();
    for (g, members) in groups.iter().enumerate() {
        let dst = if g < held { &mut out } else { &mut kept };
        dst.extend(members.iter().map(|&j| indices[j]));
    }
    kept.sort_unstable();
    out.sort_unstable();
    Ok((kept, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::manifest::{ClassLabel, DatasetId};

    fn records(sizes: &[(&str, usize)]) -> Vec<SampleRecord> {
        let mut out = Vec::new();
        for (p, n) in sizes {
            for i in 0..*n {
                out.push(SampleRecord {
                    path: format!("{p}/{i}.png").into(),
                    patient_id: p.to_string(),
                    magnification: None,
                    class: ClassLabel::Normal,
                    subclass: None,
                    split: Split::Unassigned,
                });
            }
        }
        out
    }

    #[test]
    fn greedy_walk_stops_once_threshold_is_reached() {
        assert_eq!(greedy_prefix(&[10, 10, 5, 5], 0.7), 3);
        assert_eq!(greedy_prefix(&[10, 10, 5, 5], 0.0), 0);
        assert_eq!(greedy_prefix(&[10, 10, 5, 5], 1.0), 4);
        assert_eq!(greedy_prefix(&[21, 9], 0.7), 1);
    }

    #[test]
    fn single_patient_goes_to_train() {
        let m = Manifest::new(DatasetId::Challenge2015, records(&[("p", 5)]));
        let (s, warnings) = split_by_patient(&m, 0.3, 1).unwrap();
        assert!(s.records.iter().all(|r| r.split == Split::Train));
        assert_eq!(warnings.len(), 1);
    }

    #[test]
    fn empty_ids_are_split_individually() {
        let m = Manifest::new(DatasetId::Challenge2015, records(&[("", 10)]));
        let (s, _) = split_by_patient(&m, 0.7, 3).unwrap();
        assert_eq!(s.in_split(Split::Train).count(), 7);
    }

    #[test]
    fn deterministic_and_disjoint() {
        let m = Manifest::new(DatasetId::Challenge2015, records(&[("a", 3), ("b", 1), ("c", 4), ("d", 2)]));
        let (s1, _) = split_by_patient(&m, 0.5, 9).unwrap();
        let (s2, _) = split_by_patient(&m, 0.5, 9).unwrap();
        assert_eq!(s1, s2);
        for p in ["a", "b", "c", "d"] {
            let splits: std::collections::HashSet<_> =
                s1.records.iter().filter(|r| r.patient_id == p).map(|r| r.split).collect();
            assert_eq!(splits.len(), 1);
        }
    }

    #[test]
    fn holdout_keeps_patients_whole() {
        let rs = records(&[("a", 3), ("b", 1), ("c", 4), ("d", 2), ("e", 2)]);
        let all: Vec<usize> = (0..rs.len()).collect();
        let (kept, out) = holdout_patients(&rs, &all, 0.1, 4).unwrap();
        assert_eq!(kept.len() + out.len(), rs.len());
        let out_patients: std::collections::HashSet<_> = out.iter().map(|&i| &rs[i].patient_id).collect();
        assert_eq!(out_patients.len(), 1);
        assert!(kept.iter().all(|&i| !out_patients.contains(&rs[i].patient_id)));
        let (kept, out) = holdout_patients(&rs, &all, 0.0, 4).unwrap();
        assert_eq!((kept.len(), out.len()), (rs.len(), 0));
    }
}
