use std::path::PathBuf;

use babelkit::mixture::*;

fn bundled() -> MixtureRecipe {
    MixtureRecipe::load(
        &PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../recipes/pretrain_mixture.json"),
    )
    .unwrap()
}

/// Bundled recipe shape at one tenth of the sizes, so 50 epochs stay fast.
fn scaled(recipe: &MixtureRecipe) -> MixtureRecipe {
    let mut r = recipe.clone();
    for e in &mut r.entries {
        e.size /= 10;
    }
    r
}

#[test]
fn bundled_recipe_has_twelve_rows_and_table_products() {
    let r = bundled();
    assert_eq!(r.entries.len(), 12);
    let e = expected_counts(&r);
    assert_eq!(e["Mini-InternVL"], 13_940.0);
    assert_eq!(e["SARLang"], 675_600.0);
    assert_eq!(e["GeoChat"], 64_000.0);
    assert_eq!(
        r.entry("Million-AID").unwrap().tasks,
        vec![TaskKind::Caption, TaskKind::Cls]
    );
}

#[test]
fn one_epoch_matches_configured_rates() {
    let r = bundled();
    let draws = draw_epoch(&r, 0);
    for c in verify_rates(&draws, &r, 0.01).unwrap() {
        assert!(c.pass, "{c:?}");
        if c.configured == 1.0 || c.configured == 0.0 {
            assert_eq!(c.empirical, c.configured);
        }
    }
}

/// Upper 0.1% point of chi-square with 4 degrees of freedom.
const CHI2_4DF_999: f64 = 18.467;
/// Standard normal quantiles at 0.2, 0.4, 0.6, 0.8.
const QUINTILES: [f64; 4] = [
    -0.841_621_233_572_914_3,
    -0.253_347_103_135_799_7,
    0.253_347_103_135_799_7,
    0.841_621_233_572_914_3,
];

#[test]
fn marginal_counts_fit_binomial_over_fifty_seeds() {
    let r = scaled(&bundled());
    let seeds = 50u64;
    let counts: Vec<Vec<u64>> = (0..seeds)
        .map(|s| {
            drawn_counts(&draw_epoch(&r, 1000 + s), &r)
                .unwrap()
                .into_iter()
                .map(|(_, n)| n)
                .collect()
        })
        .collect();
    for (k, e) in r.entries.iter().enumerate() {
        let mean = e.size as f64 * e.sample_rate;
        let sd = (mean * (1.0 - e.sample_rate)).sqrt();
        let samples: Vec<f64> = counts.iter().map(|c| c[k] as f64).collect();
        if sd == 0.0 {
            assert!(samples.iter().all(|&x| x == mean), "{}", e.name);
            continue;
        }
        let mut bins = [0f64; 5];
        for &x in &samples {
            // continuity correction for the discrete count
            let z = (x + 0.5 - mean) / sd;
            bins[QUINTILES.iter().filter(|&&q| z > q).count()] += 1.0;
        }
        let expect = seeds as f64 / 5.0;
        let chi2: f64 = bins.iter().map(|o| (o - expect).powi(2) / expect).sum();
        assert!(chi2 < CHI2_4DF_999, "{}: chi2 {chi2} bins {bins:?}", e.name);

        let avg = samples.iter().sum::<f64>() / seeds as f64;
        assert!(
            (avg - mean).abs() <= 3.0 * sd / (seeds as f64).sqrt(),
            "{}: mean {avg} vs {mean}",
            e.name
        );
    }
}

#[test]
fn manifest_is_reproducible() {
    let r = scaled(&bundled());
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    write_manifest(&draw_epoch(&r, 3), &a).unwrap();
    write_manifest(&draw_epoch(&r, 3), &b).unwrap();
    let text = std::fs::read(&a).unwrap();
    assert_eq!(text, std::fs::read(&b).unwrap());
    assert!(text.starts_with(b"position,dataset,index\n"));
}
