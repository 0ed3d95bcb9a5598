//! Patient leakage scan over random manifests.

use cystonet::dataio::{kfold_patient, patient_split, DatasetManifest, ManifestEntry, Split, DEFAULT_SPLIT_RATIOS};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_manifest(rng: &mut ChaCha8Rng) -> DatasetManifest {
    let patients = rng.random_range(3..40);
    let mut entries = Vec::new();
    for p in 0..patients {
        for i in 0..rng.random_range(1..7) {
            let mut e = ManifestEntry::new(format!("img_{p}_{i}"), format!("P{p:02}"), format!("{p}_{i}.png"));
            e.tumor_label = Some(rng.random_range(0..2));
            e.her2 = rng.random_bool(0.7).then(|| rng.random_range(0..2));
            e.ki67 = rng.random_bool(0.7).then(|| rng.random_range(0..2));
            entries.push(e);
        }
    }
    // interleave patients so grouping cannot rely on file order
    entries.shuffle(rng);
    DatasetManifest::new(entries, ".").unwrap()
}

fn ids(m: &DatasetManifest) -> Vec<String> {
    let mut v: Vec<String> = m.entries.iter().map(|e| e.id.clone()).collect();
    v.sort();
    v
}

// every pair of images of one patient must share a split
fn scan(entries: &[(String, String)], what: &str) {
    for (i, (pa, sa)) in entries.iter().enumerate() {
        for (pb, sb) in &entries[i + 1..] {
            assert!(pa != pb || sa == sb, "{what}: patient {pa} appears in {sa} and {sb}");
        }
    }
}

pub fn run() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let mut images = 0;
    let mut folds = 0;
    for trial in 0..1000u64 {
        let m = random_manifest(&mut rng);
        images += m.len();
        let ratios = if trial % 2 == 0 {
            DEFAULT_SPLIT_RATIOS
        } else {
            [rng.random_range(0.2..1.0), rng.random_range(0.05..0.5), rng.random_range(0.05..0.5)]
        };
        let s = patient_split(&m, ratios, trial).unwrap();
        assert_eq!(ids(&s), ids(&m), "trial {trial}: split changed the image set");
        assert!(s.entries.iter().all(|e| e.split() != Split::Unassigned), "trial {trial}: unassigned image");
        let tagged: Vec<(String, String)> = s.entries.iter().map(|e| (e.patient_id.clone(), format!("{:?}", e.split()))).collect();
        scan(&tagged, &format!("trial {trial} split"));

        let patients = m.patients().len();
        let k = rng.random_range(2..=patients.min(5));
        let fs = kfold_patient(&m, k, trial).unwrap();
        assert_eq!(fs.len(), k);
        let mut val_count = std::collections::HashMap::new();
        for (f, (tr, va)) in fs.iter().enumerate() {
            let mut union = ids(tr);
            union.extend(ids(va));
            union.sort();
            assert_eq!(union, ids(&m), "trial {trial} fold {f}: train and val do not partition the images");
            let tagged: Vec<(String, String)> = tr
                .entries
                .iter()
                .map(|e| (e.patient_id.clone(), "train".to_string()))
                .chain(va.entries.iter().map(|e| (e.patient_id.clone(), "val".to_string())))
                .collect();
            scan(&tagged, &format!("trial {trial} fold {f}"));
            for p in va.patients() {
                *val_count.entry(p.to_string()).or_insert(0) += 1;
            }
            folds += 1;
        }
        assert_eq!(val_count.len(), patients, "trial {trial}: some patient never validates");
        assert!(val_count.values().all(|&c| c == 1), "trial {trial}: a patient validates in two folds");
    }
    format!("1000 manifests ({images} images) and {folds} folds scanned pairwise, no patient leakage")
}
