mod common;

use std::collections::BTreeMap;

use babelkit::detect_eval::*;
use common::{oracle_ap, rand_instance, repo_root};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn ap_matches_prefix_enumeration_oracle_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..1000 {
        let (d, g) = rand_instance(&mut rng, "c", 8, 5);
        let thr = rng.gen_range(0.05..0.95);
        let got = average_precision(&d, &g, thr, ApMode::AllPoints).unwrap();
        assert_eq!(
            got.to_bits(),
            oracle_ap(&d, &g, thr).to_bits(),
            "thr {thr} dets {d:?} gts {g:?}"
        );
    }
}

#[test]
fn evaluate_matches_end_to_end_oracle() {
    let reg =
        ModalityRegistry::from_json(r#"{"modalities": {"m": ["c0", "c1"], "n": ["c2"]}}"#).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let mut dets = Vec::new();
        let mut gts = Vec::new();
        for (m, cats) in reg.modalities() {
            for c in cats {
                let (mut d, mut g) = rand_instance(&mut rng, c, 6, 4);
                d.iter_mut().for_each(|x| x.modality = m.into());
                g.iter_mut().for_each(|x| x.modality = m.into());
                dets.extend(d);
                gts.extend(g);
            }
        }
        let report = evaluate(&dets, &gts, &reg, &EvalConfig::default()).unwrap();
        let mut ap = BTreeMap::new();
        for c in reg.categories() {
            let d: Vec<_> = dets.iter().filter(|x| x.category == c).cloned().collect();
            let g: Vec<_> = gts.iter().filter(|x| x.category == c).cloned().collect();
            let per: Vec<f64> = DEFAULT_IOU_THRESHOLDS
                .iter()
                .map(|&t| oracle_ap(&d, &g, t))
                .collect();
            ap.insert(c.to_string(), per.iter().sum::<f64>() / per.len() as f64);
        }
        let m = (ap["c0"] + ap["c1"]) / 2.0;
        let n = ap["c2"];
        let global = (ap["c0"] + ap["c1"] + ap["c2"]) / 3.0;
        let h = if m == 0.0 || n == 0.0 {
            0.0
        } else {
            2.0 / (1.0 / m + 1.0 / n)
        };
        assert_eq!(report.per_modality_map["m"].ap, m);
        assert_eq!(report.per_modality_map["n"].ap, n);
        assert_eq!(report.global_map.ap, global);
        assert_eq!(report.hmap.ap, h);
    }
}

#[test]
fn reference_fixture_reproduces_published_row() {
    let root = repo_root();
    let reg = ModalityRegistry::load(&root.join("configs/registry_soi_det.json")).unwrap();
    let gts =
        load_ground_truth(&root.join("fixtures/soi_det_reference/ground_truth.jsonl")).unwrap();
    let dets = load_detections(&root.join("fixtures/soi_det_reference/detections.jsonl")).unwrap();
    let r = evaluate(&dets, &gts, &reg, &EvalConfig::default()).unwrap();
    let pct = |v: f64| format!("{:.2}", 100.0 * v);
    assert_eq!(pct(r.per_modality_map["sar"].ap), "63.30");
    assert_eq!(pct(r.per_modality_map["optical"].ap), "46.96");
    assert_eq!(pct(r.per_modality_map["ir"].ap), "51.32");
    assert_eq!(r.summary(), "mAP=51.57 H-mAP=53.02");
}

#[test]
fn parallel_evaluation_matches_single_thread() {
    let root = repo_root();
    let reg = ModalityRegistry::load(&root.join("configs/registry_soi_det.json")).unwrap();
    let gts =
        load_ground_truth(&root.join("fixtures/soi_det_reference/ground_truth.jsonl")).unwrap();
    let dets = load_detections(&root.join("fixtures/soi_det_reference/detections.jsonl")).unwrap();
    let par = evaluate(&dets, &gts, &reg, &EvalConfig::default()).unwrap();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let seq = pool.install(|| evaluate(&dets, &gts, &reg, &EvalConfig::default()).unwrap());
    assert_eq!(par, seq);
}

#[test]
fn report_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let reg = ModalityRegistry::from_json(r#"{"modalities": {"m": ["c"]}}"#).unwrap();
    let b = BBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
    let g = [GroundTruthEntry {
        image_id: "i".into(),
        modality: "m".into(),
        category: "c".into(),
        bbox: b,
    }];
    let r = evaluate(&[], &g, &reg, &EvalConfig::default()).unwrap();
    write_report_json(&r, &dir.path().join("r.json")).unwrap();
    write_report_csv(&r, &dir.path().join("r.csv")).unwrap();
    let back: EvalReport =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(back, r);
    let csv = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
    assert_eq!(csv, "category,modality,ap50,ap\nc,m,0.00,0.00\n*,m,0.00,0.00\n*,*,0.00,0.00\nH-mAP,*,0.00,0.00\n");
}

fn instance_strategy() -> impl Strategy<Value = (u64, f64)> {
    (any::<u64>(), 0.05f64..0.95)
}

proptest! {
    #[test]
    fn ap_invariant_under_squared_scores((seed, thr) in instance_strategy()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, g) = rand_instance(&mut rng, "c", 8, 5);
        let sq: Vec<Detection> = d.iter().cloned().map(|mut x| { x.score *= x.score; x }).collect();
        prop_assert_eq!(
            average_precision(&d, &g, thr, ApMode::AllPoints).unwrap(),
            average_precision(&sq, &g, thr, ApMode::AllPoints).unwrap()
        );
    }

    #[test]
    fn ap_invariant_under_record_order((seed, thr) in instance_strategy()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut d, mut g) = rand_instance(&mut rng, "c", 8, 5);
        let base = average_precision(&d, &g, thr, ApMode::AllPoints).unwrap();
        d.shuffle(&mut rng);
        g.shuffle(&mut rng);
        prop_assert_eq!(base, average_precision(&d, &g, thr, ApMode::AllPoints).unwrap());
    }

    #[test]
    fn hmap_bounded_by_arithmetic_mean(v in prop::collection::vec(0.01f64..1.0, 1..6)) {
        let h = harmonic_modality_map(&v, Unit::Fraction).unwrap();
        let a = v.iter().sum::<f64>() / v.len() as f64;
        prop_assert!(h <= a * (1.0 + 1e-12));
        let spread = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - v.iter().cloned().fold(f64::INFINITY, f64::min);
        if spread > 1e-6 {
            prop_assert!(h < a);
        }
    }

    #[test]
    fn hmap_equal_inputs_give_that_value(x in 0.0f64..=1.0, n in 1usize..6) {
        let h = harmonic_modality_map(&vec![x; n], Unit::Fraction).unwrap();
        prop_assert!((h - x).abs() <= 1e-15);
    }

    #[test]
    fn hmap_symmetric_and_increasing(v in prop::collection::vec(0.01f64..0.9, 2..6), i in 0usize..6, bump in 1e-3f64..0.1) {
        let h = harmonic_modality_map(&v, Unit::Fraction).unwrap();
        let mut rev = v.clone();
        rev.reverse();
        prop_assert!((h - harmonic_modality_map(&rev, Unit::Fraction).unwrap()).abs() <= 1e-15);
        let mut up = v.clone();
        let i = i % v.len();
        up[i] += bump;
        prop_assert!(harmonic_modality_map(&up, Unit::Fraction).unwrap() > h);
    }

    #[test]
    fn union_mean_is_count_weighted_modality_mean(sizes in prop::collection::vec(1usize..8, 1..4), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mods = BTreeMap::new();
        let mut aps = BTreeMap::new();
        for (k, &n) in sizes.iter().enumerate() {
            let cats: Vec<String> = (0..n).map(|j| format!("m{k}c{j}")).collect();
            for c in &cats {
                aps.insert(c.clone(), rng.gen_range(0.0..1.0));
            }
            mods.insert(format!("m{k}"), cats);
        }
        let reg = ModalityRegistry::new(mods).unwrap();
        let per_mod = modality_map(&aps, &reg).unwrap();
        let groups: Vec<(usize, f64)> = reg.modalities().map(|(m, c)| (c.len(), per_mod[m])).collect();
        let g = global_union_map(&aps).unwrap();
        prop_assert!((g - weighted_union_map(&groups).unwrap()).abs() <= 1e-12 * g.max(1.0));
    }
}
