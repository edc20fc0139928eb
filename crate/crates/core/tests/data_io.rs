mod common;

use std::collections::{BTreeMap, BTreeSet};

use hyqal::data::{
    generate_synthetic, load_image_dir, save_image_dir, split_by_patient, DataError, Dataset, Sample, SplitRatios,
    SynthConfig, SPLIT_NAMES,
};
use hyqal::tensor::Tensor;
use proptest::prelude::*;

fn small(count: usize, patients: usize) -> SynthConfig {
    SynthConfig {
        count,
        height: 32,
        width: 32,
        patients,
        ..SynthConfig::default()
    }
}

fn split_of(patients: &[Vec<String>; 4]) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for (k, ps) in patients.iter().enumerate() {
        for p in ps {
            assert!(out.insert(p.clone(), k).is_none(), "patient {p} listed twice");
        }
    }
    out
}

#[test]
fn ten_patients_sixty_twenty_twenty() {
    let ds = generate_synthetic(&small(50, 10), 1).unwrap();
    let ratios = SplitRatios {
        unlabeled: 0.0,
        labeled: 60.0,
        validation: 20.0,
        test: 20.0,
    };
    let m = split_by_patient(&ds, ratios, f64::INFINITY, 3).unwrap();
    let sizes: Vec<usize> = m.patients.iter().map(Vec::len).collect();
    assert_eq!(sizes, vec![0, 6, 2, 2]);
    assert!(m.unlabeled.is_empty());
    assert_eq!(m.labeled.len() + m.validation.len() + m.test.len(), 50);
}

#[test]
fn default_split_is_patient_disjoint_exhaustively() {
    let ds = generate_synthetic(&SynthConfig::default(), 0).unwrap();
    let m = split_by_patient(&ds, SplitRatios::default(), 0.2, 0).unwrap();
    m.verify(&ds).unwrap();
    let owner = split_of(&m.patients);
    let patient_of: BTreeMap<&str, &str> = ds.samples.iter().map(|s| (s.id.as_str(), s.patient_id.as_str())).collect();
    let mut all = BTreeSet::new();
    for (k, ids) in m.splits().into_iter().enumerate() {
        for id in ids {
            assert!(all.insert(id.clone()));
            assert_eq!(owner[patient_of[id.as_str()]], k, "{id} in {}", SPLIT_NAMES[k]);
        }
    }
    assert_eq!(all.len(), ds.len());
    let sizes: Vec<usize> = m.splits().iter().map(|s| s.len()).collect();
    assert_eq!(sizes, vec![600, 100, 60, 120]);
    let test_pos = ds.select(&m.test).unwrap().iter().filter(|s| s.label == Some(1)).count();
    assert_eq!(test_pos, 60);
}

#[test]
fn split_seed_changes_manifest() {
    let ds = generate_synthetic(&small(200, 40), 4).unwrap();
    let a = split_by_patient(&ds, SplitRatios::default(), 1.0, 11).unwrap();
    let b = split_by_patient(&ds, SplitRatios::default(), 1.0, 11).unwrap();
    let c = split_by_patient(&ds, SplitRatios::default(), 1.0, 12).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.patients, c.patients);
}

#[test]
fn too_few_patients_rejected() {
    let ds = generate_synthetic(&small(20, 4), 0).unwrap();
    // 4 patients cannot fill four splits with weights 30/5/3/6.
    assert!(matches!(
        split_by_patient(&ds, SplitRatios::default(), 1.0, 0),
        Err(DataError::Split(_))
    ));
    let three: Vec<Sample> = ds.samples.iter().filter(|s| s.patient_id != "p003").cloned().collect();
    let ds3 = Dataset::new(32, 32, three).unwrap();
    let even = SplitRatios {
        unlabeled: 1.0,
        labeled: 1.0,
        validation: 1.0,
        test: 1.0,
    };
    assert!(matches!(split_by_patient(&ds3, even, 1.0, 0), Err(DataError::Split(_))));
}

#[test]
fn labeled_ratio_bound_enforced() {
    let ds = generate_synthetic(&small(100, 20), 0).unwrap();
    let heavy = SplitRatios {
        unlabeled: 1.0,
        labeled: 1.0,
        validation: 1.0,
        test: 1.0,
    };
    assert!(split_by_patient(&ds, heavy, 0.2, 0).is_err());
    assert!(split_by_patient(&ds, heavy, 1.0, 0).is_ok());
}

#[test]
fn generated_directory_roundtrips_exactly() {
    let mut ds = generate_synthetic(&small(24, 4), 9).unwrap();
    let unlabeled: Vec<String> = ds.samples.iter().take(5).map(|s| s.id.clone()).collect();
    ds.strip_labels(&unlabeled);
    let dir = tempfile::tempdir().unwrap();
    save_image_dir(&ds, dir.path(), Some("abc")).unwrap();
    let head = std::fs::read(dir.path().join(ds.samples[0].file_name())).unwrap();
    assert!(head.starts_with(b"P5\n# config_hash abc\n"));
    let back = load_image_dir(dir.path()).unwrap();
    let by_id = |d: &Dataset| -> BTreeMap<String, Sample> { d.samples.iter().map(|s| (s.id.clone(), s.clone())).collect() };
    assert_eq!(by_id(&ds), by_id(&back));
    assert_eq!(back.samples.iter().filter(|s| s.label.is_none()).count(), 5);
}

#[test]
fn loader_orders_by_file_name_and_rejects_bad_labels() {
    let dir = tempfile::tempdir().unwrap();
    let img = Tensor::new(vec![2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
    for name in ["pb_s2_1.pgm", "pa_s1_0.pgm", "pa_s3_u.pgm"] {
        hyqal::data::write_pgm(&dir.path().join(name), &img).unwrap();
    }
    std::fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
    let ds = load_image_dir(dir.path()).unwrap();
    let ids: Vec<&str> = ds.samples.iter().map(|s| s.id.as_str()).collect();
    assert_eq!(ids, vec!["s1", "s3", "s2"]);
    assert_eq!(ds.samples[1].label, None);

    hyqal::data::write_pgm(&dir.path().join("pc_s4_x.pgm"), &img).unwrap();
    let err = load_image_dir(dir.path()).unwrap_err();
    assert!(matches!(err, DataError::Label { ref token, .. } if token == "x"), "{err}");
}

#[test]
fn malformed_file_reports_name_and_offset() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("pa_s1_0.pgm"), b"P5 2 2 255\n\x00\x01").unwrap();
    match load_image_dir(dir.path()).unwrap_err() {
        DataError::Pgm { file, offset, .. } => {
            assert!(file.ends_with("pa_s1_0.pgm"), "{file}");
            assert_eq!(offset, 13);
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn class_means_indistinguishable() {
    let ds = generate_synthetic(&SynthConfig { count: 1000, patients: 50, ..SynthConfig::default() }, 21).unwrap();
    let mut sums = [0.0; 2];
    let mut counts = [0usize; 2];
    for s in &ds.samples {
        let k = s.label.unwrap() as usize;
        sums[k] += s.image.data().iter().sum::<f64>() / s.image.len() as f64;
        counts[k] += 1;
    }
    let gap = (sums[1] / counts[1] as f64 - sums[0] / counts[0] as f64).abs();
    assert!(gap < 0.02, "class mean intensity gap {gap}");
}

#[test]
fn raw_pixel_linear_probe_stays_weak() {
    let ds = generate_synthetic(&SynthConfig { count: 1000, patients: 50, ..SynthConfig::default() }, 22).unwrap();
    let (train, test) = ds.samples.split_at(600);
    let xs = |s: &[Sample]| -> (Vec<Vec<f64>>, Vec<u8>) {
        (s.iter().map(|s| s.image.data().to_vec()).collect(), s.iter().map(|s| s.label.unwrap()).collect())
    };
    let ((tx, ty), (vx, vy)) = (xs(train), xs(test));
    let auc = common::linear_probe_auc(&tx, &ty, &vx, &vy);
    assert!(auc < 0.75, "linear probe AUC {auc}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn any_manifest_is_patient_disjoint(seed in 0u64..1000, patients in 4usize..30, w in prop::array::uniform4(1u8..10)) {
        let ds = generate_synthetic(&small(patients * 2, patients), seed).unwrap();
        let ratios = SplitRatios {
            unlabeled: w[0] as f64,
            labeled: w[1] as f64,
            validation: w[2] as f64,
            test: w[3] as f64,
        };
        if let Ok(m) = split_by_patient(&ds, ratios, f64::INFINITY, seed) {
            m.verify(&ds).unwrap();
            split_of(&m.patients);
            let total: usize = m.splits().iter().map(|s| s.len()).sum();
            prop_assert_eq!(total, ds.len());
        }
    }

    #[test]
    fn generated_images_respect_bounds(seed in 0u64..10_000) {
        let ds = generate_synthetic(&small(8, 4), seed).unwrap();
        for s in &ds.samples {
            prop_assert_eq!(s.image.shape(), &[32, 32]);
            prop_assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
