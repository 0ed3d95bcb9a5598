use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::manifest::{DatasetManifest, Marker, Split};
use crate::{Error, Result};

pub const DEFAULT_SPLIT_RATIOS: [f64; 3] = [0.8, 0.1, 0.1];

/// Image counts per (train, val, test).
pub fn split_counts(m: &DatasetManifest) -> [usize; 3] {
    let mut c = [0; 3];
    for e in &m.entries {
        match e.split() {
            Split::Train => c[0] += 1,
            Split::Val => c[1] += 1,
            Split::Test => c[2] += 1,
            Split::Unassigned => {}
        }
    }
    c
}

fn patient_counts(m: &DatasetManifest) -> Vec<(String, usize)> {
    let mut order = Vec::new();
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for e in &m.entries {
        let c = counts.entry(e.patient_id.as_str()).or_insert(0);
        if *c == 0 {
            order.push(e.patient_id.clone());
        }
        *c += 1;
    }
    order
        .into_iter()
        .map(|p| {
            let c = counts[p.as_str()];
            (p, c)
        })
        .collect()
}

/// Assigns every patient to train/val/test by greedy bin-packing on image
/// counts: patients are taken largest-first (seeded shuffle breaks ties) and
/// each goes to the split with the largest remaining deficit to its target.
/// Each split's image count ends within one patient's image count of its target.
pub fn patient_split(m: &DatasetManifest, ratios: [f64; 3], seed: u64) -> Result<DatasetManifest> {
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(Error::invalid(format!("split ratios must be non-negative, got {ratios:?}")));
    }
    let sum: f64 = ratios.iter().sum();
    if sum <= 0.0 {
        return Err(Error::invalid("split ratios sum to zero"));
    }
    let mut patients = patient_counts(m);
    if patients.len() < Split::ASSIGNABLE.len() {
        return Err(Error::invalid(format!(
            "need at least {} patients to split, got {}",
            Split::ASSIGNABLE.len(),
            patients.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    patients.shuffle(&mut rng);
    patients.sort_by(|a, b| b.1.cmp(&a.1));

    let total = m.len() as f64;
    let targets: Vec<f64> = ratios.iter().map(|r| r / sum * total).collect();
    let mut filled = [0usize; 3];
    let mut assignment: HashMap<String, Split> = HashMap::new();
    for (pid, count) in patients {
        let mut best = 0;
        let mut best_deficit = f64::NEG_INFINITY;
        for (i, t) in targets.iter().enumerate() {
            if ratios[i] == 0.0 {
                continue;
            }
            let deficit = t - filled[i] as f64;
            if deficit > best_deficit {
                best = i;
                best_deficit = deficit;
            }
        }
        filled[best] += count;
        assignment.insert(pid, Split::ASSIGNABLE[best]);
    }
    for (i, split) in Split::ASSIGNABLE.iter().enumerate() {
        if ratios[i] > 0.0 && filled[i] == 0 {
            log::warn!("split {split:?} received no patients");
        }
    }

    let mut out = m.clone();
    for e in &mut out.entries {
        e.split = Some(assignment[&e.patient_id]);
    }
    out.validate()?;
    Ok(out)
}

fn aggregate(markers: impl Iterator<Item = Marker>) -> char {
    let mut seen_negative = false;
    for mk in markers {
        match mk {
            Marker::Positive => return '1',
            Marker::Negative => seen_negative = true,
            Marker::Unknown => {}
        }
    }
    if seen_negative {
        '0'
    } else {
        'u'
    }
}

/// Patient-disjoint k-fold partition, stratified on the concatenated
/// tumor/HER-2/Ki-67/p53 pattern of each patient (unknown is its own symbol).
/// Returns `(train, val)` manifests per fold.
pub fn kfold_patient(
    m: &DatasetManifest,
    k: usize,
    seed: u64,
) -> Result<Vec<(DatasetManifest, DatasetManifest)>> {
    let patients = patient_counts(m);
    if k < 2 {
        return Err(Error::invalid(format!("k must be at least 2, got {k}")));
    }
    if k > patients.len() {
        return Err(Error::invalid(format!(
            "k = {k} exceeds the number of patients ({})",
            patients.len()
        )));
    }

    let mut strata: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (pid, _) in &patients {
        let rows: Vec<_> = m.entries.iter().filter(|e| &e.patient_id == pid).collect();
        let key: String = [
            aggregate(rows.iter().map(|e| Marker::from_label(e.tumor_label))),
            aggregate(rows.iter().map(|e| e.subtype().her2)),
            aggregate(rows.iter().map(|e| e.subtype().ki67)),
            aggregate(rows.iter().map(|e| e.subtype().p53)),
        ]
        .iter()
        .collect();
        strata.entry(key).or_default().push(pid.clone());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of: HashMap<String, usize> = HashMap::new();
    let mut next = 0usize;
    for members in strata.values_mut() {
        members.shuffle(&mut rng);
        for pid in members.iter() {
            fold_of.insert(pid.clone(), next);
            next = (next + 1) % k;
        }
    }

    Ok((0..k)
        .map(|fold| {
            let mut train = m.filtered(|e| fold_of[&e.patient_id] != fold);
            let mut val = m.filtered(|e| fold_of[&e.patient_id] == fold);
            train.entries.iter_mut().for_each(|e| e.split = Some(Split::Train));
            val.entries.iter_mut().for_each(|e| e.split = Some(Split::Val));
            (train, val)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::ManifestEntry;
    use std::collections::HashSet;

    fn manifest(patients: usize, per_patient: usize) -> DatasetManifest {
        let mut entries = Vec::new();
        for p in 0..patients {
            for i in 0..per_patient {
                entries.push(ManifestEntry::new(format!("p{p}_{i}"), format!("p{p}"), "x.png"));
            }
        }
        DatasetManifest::new(entries, ".").unwrap()
    }

    fn patients_in(m: &DatasetManifest, s: Split) -> HashSet<String> {
        m.entries
            .iter()
            .filter(|e| e.split() == s)
            .map(|e| e.patient_id.clone())
            .collect()
    }

    #[test]
    fn ten_by_ten_splits_eight_one_one() {
        let out = patient_split(&manifest(10, 10), DEFAULT_SPLIT_RATIOS, 7).unwrap();
        let counts: Vec<usize> = Split::ASSIGNABLE
            .iter()
            .map(|s| patients_in(&out, *s).len())
            .collect();
        assert_eq!(counts, vec![8, 1, 1]);
        for a in Split::ASSIGNABLE {
            for b in Split::ASSIGNABLE {
                if a != b {
                    assert!(patients_in(&out, a).is_disjoint(&patients_in(&out, b)));
                }
            }
        }
    }

    #[test]
    fn split_is_deterministic() {
        let mut m = manifest(17, 1);
        for (i, e) in m.entries.iter_mut().enumerate() {
            if i % 3 == 0 {
                e.id.push('x');
            }
        }
        let a = patient_split(&m, DEFAULT_SPLIT_RATIOS, 3).unwrap();
        let b = patient_split(&m, DEFAULT_SPLIT_RATIOS, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn two_patients_cannot_be_split() {
        assert!(patient_split(&manifest(2, 5), DEFAULT_SPLIT_RATIOS, 1).is_err());
    }

    #[test]
    fn kfold_partitions_validation_patients() {
        let m = manifest(25, 2);
        let folds = kfold_patient(&m, 5, 11).unwrap();
        assert_eq!(folds.len(), 5);
        let mut seen: HashMap<String, usize> = HashMap::new();
        for (train, val) in &folds {
            let vp = patients_in(val, Split::Val);
            let tp = patients_in(train, Split::Train);
            assert!(vp.is_disjoint(&tp));
            for p in vp {
                *seen.entry(p).or_default() += 1;
            }
        }
        assert_eq!(seen.len(), 25);
        assert!(seen.values().all(|&c| c == 1));
    }

    #[test]
    fn kfold_all_positive_stays_positive() {
        let mut m = manifest(10, 1);
        m.entries.iter_mut().for_each(|e| e.her2 = Some(1));
        for (_, val) in kfold_patient(&m, 5, 0).unwrap() {
            assert!(val.entries.iter().all(|e| e.her2 == Some(1)));
        }
    }

    #[test]
    fn kfold_balances_her2_positives() {
        let mut m = manifest(40, 1);
        m.entries
            .iter_mut()
            .enumerate()
            .for_each(|(i, e)| e.her2 = Some((i % 2) as u8));
        for (_, val) in kfold_patient(&m, 5, 9).unwrap() {
            let pos = val.entries.iter().filter(|e| e.her2 == Some(1)).count();
            let n = val.len();
            assert!((pos as f64 - n as f64 / 2.0).abs() <= 1.0, "{pos}/{n}");
        }
    }

    #[test]
    fn kfold_rejects_k_above_patients() {
        assert!(kfold_patient(&manifest(4, 3), 5, 0).is_err());
    }

    mod props {
        use super::*;
        use crate::dataio::ManifestEntry;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn achieved_ratios_stay_within_one_patient(
                sizes in proptest::collection::vec(1usize..12, 3..40),
                raw in (0.1f64..1.0, 0.05f64..1.0, 0.05f64..1.0),
                seed in any::<u64>(),
            ) {
                let mut entries = Vec::new();
                for (p, &k) in sizes.iter().enumerate() {
                    for i in 0..k {
                        entries.push(ManifestEntry::new(format!("p{p}_{i}"), format!("p{p}"), "x.png"));
                    }
                }
                let m = DatasetManifest::new(entries, ".").unwrap();
                let ratios = [raw.0, raw.1, raw.2];
                let out = patient_split(&m, ratios, seed).unwrap();
                let total = m.len() as f64;
                let sum: f64 = ratios.iter().sum();
                let bound = *sizes.iter().max().unwrap() as f64 / total;
                for (i, got) in split_counts(&out).iter().enumerate() {
                    let dev = (*got as f64 / total - ratios[i] / sum).abs();
                    prop_assert!(dev <= bound + 1e-12, "split {i}: deviation {dev} above {bound}");
                }
                prop_assert_eq!(patient_split(&m, ratios, seed).unwrap(), out);
            }
        }
    }
}
