//! Reference implementations shared by integration test targets.
#![allow(dead_code)]

use std::cmp::Ordering;
use std::path::PathBuf;

use babelkit::detect_eval::*;
use rand::Rng;

pub fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn rand_box(rng: &mut impl Rng) -> BBox {
    // coarse integer grid so IoU ties and duplicate boxes are common
    let x0 = rng.gen_range(0..6) as f64;
    let y0 = rng.gen_range(0..6) as f64;
    let w = rng.gen_range(0..5) as f64;
    let h = rng.gen_range(0..5) as f64;
    BBox::new(x0, y0, x0 + w, y0 + h).unwrap()
}

pub fn rand_instance(
    rng: &mut impl Rng,
    cat: &str,
    max_det: usize,
    max_gt: usize,
) -> (Vec<Detection>, Vec<GroundTruthEntry>) {
    let images = ["a", "b", "c"];
    let nd = rng.gen_range(0..=max_det);
    let ng = rng.gen_range(0..=max_gt);
    let dets = (0..nd)
        .map(|_| Detection {
            image_id: images[rng.gen_range(0..3)].into(),
            modality: "m".into(),
            category: cat.into(),
            bbox: rand_box(rng),
            score: rng.gen_range(1..=5) as f64 / 5.0,
        })
        .collect();
    let gts = (0..ng)
        .map(|_| GroundTruthEntry {
            image_id: images[rng.gen_range(0..3)].into(),
            modality: "m".into(),
            category: cat.into(),
            bbox: rand_box(rng),
        })
        .collect();
    (dets, gts)
}

pub fn box_cmp(a: &BBox, b: &BBox) -> Ordering {
    a.xmin
        .total_cmp(&b.xmin)
        .then(a.ymin.total_cmp(&b.ymin))
        .then(a.xmax.total_cmp(&b.xmax))
        .then(a.ymax.total_cmp(&b.ymax))
}

/// Number of true positives among the first `k` ranked detections,
/// recomputed from scratch.
pub fn true_positives_in_prefix(
    ranked: &[&Detection],
    gts: &[GroundTruthEntry],
    thr: f64,
    k: usize,
) -> usize {
    let mut pool: Vec<(&GroundTruthEntry, bool)> = gts.iter().map(|g| (g, false)).collect();
    pool.sort_by(|a, b| box_cmp(&a.0.bbox, &b.0.bbox));
    let mut hits = 0;
    for d in &ranked[..k] {
        let mut best: Option<(usize, f64)> = None;
        for (i, (g, used)) in pool.iter().enumerate() {
            if *used || g.image_id != d.image_id {
                continue;
            }
            let o = iou(&d.bbox, &g.bbox);
            if o >= thr && best.is_none_or(|(_, b)| o > b) {
                best = Some((i, o));
            }
        }
        if let Some((i, _)) = best {
            pool[i].1 = true;
            hits += 1;
        }
    }
    hits
}

/// Enumerate every prefix of the ranking, take the PR point of each and the
/// envelope by brute force over later prefixes.
pub fn oracle_ap(dets: &[Detection], gts: &[GroundTruthEntry], thr: f64) -> f64 {
    if gts.is_empty() {
        return if dets.is_empty() { 1.0 } else { 0.0 };
    }
    let mut ranked: Vec<&Detection> = dets.iter().collect();
    ranked.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.image_id.cmp(&b.image_id))
            .then(box_cmp(&a.bbox, &b.bbox))
    });
    let n = ranked.len();
    let points: Vec<(f64, f64)> = (1..=n)
        .map(|k| {
            let tp = true_positives_in_prefix(&ranked, gts, thr, k);
            (tp as f64 / gts.len() as f64, tp as f64 / k as f64)
        })
        .collect();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for k in 0..n {
        let env = points[k..]
            .iter()
            .map(|p| p.1)
            .fold(f64::NEG_INFINITY, f64::max);
        ap += (points[k].0 - prev) * env;
        prev = points[k].0;
    }
    ap
}
