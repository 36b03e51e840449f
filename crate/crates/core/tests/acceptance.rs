//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use ndarray::{s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use varalloc::allocation::{
    congruence, loading_identity_test, misallocation_index, partial_combination, pearson_loadings,
    shape_match_pair, shape_match_test, verify_combination,
};
use varalloc::cli::{analyze_moments, AnalysisOptions, Basis, RotationKind, Source};
use varalloc::dataset::{ConditionDataset, CovarianceMode};
use varalloc::linalg::max_abs_diff;
use varalloc::pca::{
    pca_of_covariance, split_wanted, total_pca, within_and_between_from_moments,
    within_and_between_pca, PcaSolution,
};
use varalloc::rotation::{apply_rotation, varimax, VarimaxOptions};
use varalloc::synthgen::{
    build_preset, moment_matched_sample, population_moments, preset, sample, Preset, PresetOptions,
    ScenarioSpec,
};

const RECONSTRUCTION_TOL: f64 = 1e-10;
const RECONSTRUCTION_SECONDS: f64 = 5.0;
const PREDICTION_TOL: f64 = 1e-8;
const IDENTITY_MEANS_TOL: f64 = 1e-12;
const MIN_T_STAR: f64 = 0.1;
const SAMPLE_MIN_INDEX: f64 = 0.01;
const STANDARD_ERRORS: f64 = 3.0;
const IDENTITY_TOL: f64 = 1e-8;
const COMBINATION_TOL: f64 = 1e-8;
const MISALLOCATION_TOL: f64 = 1e-6;
const THETA_TOL: f64 = 1e-6;
const LEAK_TOL: f64 = 1e-8;
const MISMATCH_MIN_INDEX: f64 = 0.05;
const INVARIANCE_TOL: f64 = 1e-12;
const UNIT_TOL: f64 = 1e-10;
const MISMATCH_MAX_PEARSON: f64 = 0.99;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

/// Random orthogonal matrix by Gram-Schmidt on a Gaussian matrix.
fn random_orthogonal(rng: &mut ChaCha8Rng, q: usize) -> Array2<f64> {
    let mut m = normal_matrix(rng, q, q);
    for j in 0..q {
        for _ in 0..2 {
            for l in 0..j {
                let proj = m.column(l).dot(&m.column(j));
                let prev = m.column(l).to_owned();
                m.column_mut(j).scaled_add(-proj, &prev);
            }
        }
        let norm = m.column(j).dot(&m.column(j)).sqrt();
        m.column_mut(j).mapv_inplace(|x| x / norm);
    }
    m
}

/// Scores of the first `q` components of `basis` for every observation.
fn wanted_scores(basis: &PcaSolution, ds: &ConditionDataset, q: usize) -> Array2<f64> {
    basis.score_map().slice(s![..q, ..]).dot(ds.data())
}

fn condition_means(scores: &Array2<f64>, ds: &ConditionDataset) -> Array2<f64> {
    let mut out = Array2::zeros((scores.nrows(), ds.k()));
    for level in 0..ds.k() {
        let block = ds.select_level(scores, level);
        out.column_mut(level)
            .assign(&block.mean_axis(Axis(1)).unwrap());
    }
    out
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let start = Instant::now();
    let mut worst = 0.0_f64;
    for _ in 0..200 {
        let p = rng.random_range(1..=20);
        let m = rng.random_range(1..=p + 3);
        let b = normal_matrix(&mut rng, p, m);
        let sigma = b.dot(&b.t());
        let sol = pca_of_covariance(sigma.view()).map_err(|e| e.to_string())?;
        worst = worst.max(max_abs_diff(
            sol.reproduced_covariance().view(),
            sigma.view(),
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst < RECONSTRUCTION_TOL && secs < RECONSTRUCTION_SECONDS,
        format!("max |S - AA'| = {worst:.3e} (< {RECONSTRUCTION_TOL:e}), {secs:.3} s (< {RECONSTRUCTION_SECONDS} s)"),
    )
}

fn criterion_2() -> Outcome {
    let spec = preset("theorem1", 12, 2, 1.0).map_err(|e| e.to_string())?;
    let q = 3;
    let ds = moment_matched_sample(&spec, 40, 2).map_err(|e| e.to_string())?;
    let moments = population_moments(&spec).map_err(|e| e.to_string())?;
    let basis = pca_of_covariance(moments.pooled_within().view()).map_err(|e| e.to_string())?;
    let wanted = split_wanted(&basis, q)
        .map_err(|e| e.to_string())?
        .wanted_loadings;
    let w = wanted_scores(&basis, &ds, q);
    // the effect enters component 1 as effect_size times the contrast (+1, -1)
    let e_w1 = [1.0, -1.0];

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0_f64;
    let mut tried = 0;
    while tried < 50 {
        let t = random_orthogonal(&mut rng, q);
        let t_star = t.t().to_owned();
        if (0..q).any(|j| t_star[[j, 0]].abs() <= MIN_T_STAR) {
            continue;
        }
        tried += 1;
        let rot = apply_rotation(&wanted, Some(&w), &t).map_err(|e| e.to_string())?;
        let observed = condition_means(rot.rotated_scores.as_ref().unwrap(), &ds);
        for j in 0..q {
            for (i, e) in e_w1.iter().enumerate() {
                worst = worst.max((observed[[j, i]] - t_star[[j, 0]] * e).abs());
            }
        }
    }
    let identity = condition_means(&w, &ds);
    let off = identity
        .slice(s![1.., ..])
        .iter()
        .fold(0.0_f64, |m, &x| m.max(x.abs()));
    verdict(
        worst < PREDICTION_TOL && off < IDENTITY_MEANS_TOL,
        format!(
            "50 rotations: max |observed - t*_j1 E(w_1i)| = {worst:.3e} (< {PREDICTION_TOL:e}); \
             T = I off-component means {off:.3e} (< {IDENTITY_MEANS_TOL:e})"
        ),
    )
}

fn criterion_3() -> Outcome {
    let spec = preset("theorem1", 12, 2, 1.0).map_err(|e| e.to_string())?;
    let q = 3;
    let ds = sample(&spec, 10_000, 3).map_err(|e| e.to_string())?;
    let total = total_pca(&ds).map_err(|e| e.to_string())?;
    let split = split_wanted(&total, q).map_err(|e| e.to_string())?;
    let rot = varimax(&split.wanted_loadings, &VarimaxOptions::default())
        .and_then(|r| r.with_scores(split.wanted_scores.as_ref().unwrap()))
        .map_err(|e| e.to_string())?;
    let rotated = rot.rotated_scores.as_ref().unwrap();
    let index = misallocation_index(rotated, &ds, 0)
        .map_err(|e| e.to_string())?
        .misallocation_index;

    let baseline = condition_means(split.wanted_scores.as_ref().unwrap(), &ds);
    let observed = condition_means(rotated, &ds);
    let mut worst_z = 0.0_f64;
    for j in 0..q {
        for i in 0..ds.k() {
            let block = ds.select_level(rotated, i);
            let row = block.row(j);
            let n = row.len() as f64;
            let mean = row.mean().unwrap();
            let sd = (row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            let predicted = rot.inverse_transform[[j, 0]] * baseline[[0, i]];
            worst_z = worst_z.max((observed[[j, i]] - predicted).abs() / (sd / n.sqrt()));
        }
    }
    verdict(
        index > SAMPLE_MIN_INDEX && worst_z < STANDARD_ERRORS,
        format!(
            "n = 10^4 per condition, varimax: misallocation index {index:.4} (> {SAMPLE_MIN_INDEX}); \
             worst deviation from prediction {worst_z:.2} SE (< {STANDARD_ERRORS})"
        ),
    )
}

/// Data with the scenario's exact moments plus its within/between PCAs.
fn exact_pcas(
    spec: &ScenarioSpec,
) -> Result<(ConditionDataset, varalloc::pca::ConditionPca), String> {
    let ds = moment_matched_sample(spec, 2 * spec.p, 4).map_err(|e| e.to_string())?;
    let pca = within_and_between_pca(&ds).map_err(|e| e.to_string())?;
    Ok((ds, pca))
}

fn criterion_4() -> Outcome {
    let spec = preset("theorem2", 12, 2, 1.0).map_err(|e| e.to_string())?;
    let moments = population_moments(&spec).map_err(|e| e.to_string())?;
    let pop = within_and_between_from_moments(&moments).map_err(|e| e.to_string())?;
    let within: Vec<Array2<f64>> = pop.within.iter().map(|w| w.loadings.clone()).collect();
    let identity = loading_identity_test(&within, &spec.between_loadings, IDENTITY_TOL)
        .map_err(|e| e.to_string())?;

    let (ds, pca) = exact_pcas(&spec)?;
    let shared = &pca.within[0];
    let between_scores = shared.score_map().dot(&ds.between_replicate());
    let within_scores: Vec<Array2<f64>> = pca
        .within
        .iter()
        .map(|w| w.scores.clone().unwrap())
        .collect();
    let residual = verify_combination(&ds, &shared.loadings, &within_scores, &between_scores)
        .map_err(|e| e.to_string())?;
    let index = misallocation_index(&between_scores.slice(s![..spec.q, ..]).to_owned(), &ds, 0)
        .map_err(|e| e.to_string())?
        .misallocation_index;
    verdict(
        identity.iter().all(|&b| b) && residual < COMBINATION_TOL && index < MISALLOCATION_TOL,
        format!(
            "identity {identity:?} at {IDENTITY_TOL:e}; combination residual {residual:.3e} \
             (< {COMBINATION_TOL:e}); unrotated misallocation {index:.3e} (< {MISALLOCATION_TOL:e})"
        ),
    )
}

fn criterion_5() -> Outcome {
    let spec = preset("theorem3", 12, 2, 1.0).map_err(|e| e.to_string())?;
    let (ds, pca) = exact_pcas(&spec)?;
    let first =
        shape_match_test(&pca.within, &pca.between, 0, THETA_TOL).map_err(|e| e.to_string())?;
    let theta_err = first
        .thetas()
        .iter()
        .map(|t| t.map_or(f64::INFINITY, |t| (t - 1.0).abs()))
        .fold(0.0_f64, f64::max);
    let mut rejected = true;
    for s in 1..spec.q {
        let later = shape_match_pair(&pca.within, &pca.between, s, 0, THETA_TOL)
            .map_err(|e| e.to_string())?;
        rejected &= later.per_condition.iter().all(|c| !c.matched);
    }
    let weights: Vec<f64> = first
        .thetas()
        .iter()
        .map(|t| 1.0 / t.unwrap_or(f64::NAN))
        .collect();
    let combo = partial_combination(&ds, &pca.within, &pca.between, 0, &weights)
        .map_err(|e| e.to_string())?;
    verdict(
        first.proportional && theta_err < THETA_TOL && rejected && combo.leak < LEAK_TOL,
        format!(
            "component 1 matched = {}, max |theta - 1| = {theta_err:.3e} (< {THETA_TOL:e}); \
             components 2..{} rejected = {rejected}; residual outside later components {:.3e} (< {LEAK_TOL:e})",
            first.proportional, spec.q, combo.leak
        ),
    )
}

fn criterion_6() -> Outcome {
    let expected = [2.0, 0.5];
    let spec = build_preset(
        Preset::Theorem4,
        &PresetOptions {
            theta: Some(expected.to_vec()),
            ..Default::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let (ds, pca) = exact_pcas(&spec)?;
    let report =
        shape_match_test(&pca.within, &pca.between, 0, THETA_TOL).map_err(|e| e.to_string())?;
    let thetas: Vec<f64> = report
        .thetas()
        .iter()
        .map(|t| t.unwrap_or(f64::NAN))
        .collect();
    let theta_err = thetas
        .iter()
        .zip(expected)
        .map(|(t, e)| (t - e).abs())
        .fold(
            0.0_f64,
            |m, d| if d.is_nan() { f64::INFINITY } else { m.max(d) },
        );
    let weights: Vec<f64> = thetas.iter().map(|t| 1.0 / t).collect();
    let combo = partial_combination(&ds, &pca.within, &pca.between, 0, &weights)
        .map_err(|e| e.to_string())?;
    // the literal weights theta_i, for the record
    let literal = partial_combination(&ds, &pca.within, &pca.between, 0, &thetas)
        .map_err(|e| e.to_string())?;

    let mismatch = preset("mismatch", 12, 2, 1.0).map_err(|e| e.to_string())?;
    let moments = population_moments(&mismatch).map_err(|e| e.to_string())?;
    let mpca = within_and_between_from_moments(&moments).map_err(|e| e.to_string())?;
    let matched = shape_match_test(&mpca.within, &mpca.between, 0, THETA_TOL)
        .map_err(|e| e.to_string())?
        .proportional;
    let mut indices = Vec::new();
    for (rotation, normalize) in [
        (RotationKind::None, false),
        (RotationKind::Varimax, false),
        (RotationKind::Varimax, true),
    ] {
        let r = analyze_moments(
            &moments,
            vec![],
            &AnalysisOptions {
                q: mismatch.q,
                rotation,
                normalize,
                basis: Basis::Pooled,
                tolerance: THETA_TOL,
                mode: CovarianceMode::Population,
                target: 1,
            },
            Source::Moments,
        )
        .map_err(|e| e.to_string())?;
        indices.push(r.allocation.misallocation_index);
    }
    let min_index = indices.iter().cloned().fold(f64::INFINITY, f64::min);
    verdict(
        theta_err < THETA_TOL && combo.reconstruction_error < COMBINATION_TOL && !matched && min_index > MISMATCH_MIN_INDEX,
        format!(
            "theta = {thetas:?}, max error {theta_err:.3e} (< {THETA_TOL:e}); reconstruction with \
             weights 1/theta {:.3e} (< {COMBINATION_TOL:e}) [weights theta: {:.3e}]; mismatch matched = {matched}, \
             misallocation none/varimax/normalized = {:.4}/{:.4}/{:.4} (> {MISMATCH_MIN_INDEX})",
            combo.reconstruction_error, literal.reconstruction_error, indices[0], indices[1], indices[2]
        ),
    )
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst_cong = 0.0_f64;
    let mut worst_pear = 0.0_f64;
    for _ in 0..100 {
        let len = rng.random_range(2..=20);
        let x = Array1::from_shape_fn(len, |_| rng.sample::<f64, _>(StandardNormal));
        let y = Array1::from_shape_fn(len, |_| rng.sample::<f64, _>(StandardNormal));
        let (a, b) = (rng.random_range(0.1..10.0), rng.random_range(0.1..10.0));
        let (sx, sy) = (rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        let c0 = congruence(x.view(), y.view()).map_err(|e| e.to_string())?;
        let c1 = congruence((&x * a).view(), (&y * b).view()).map_err(|e| e.to_string())?;
        worst_cong = worst_cong.max((c0 - c1).abs());
        let p0 = pearson_loadings(x.view(), y.view()).map_err(|e| e.to_string())?;
        let p1 = pearson_loadings((&x * a + sx).view(), (&y * b + sy).view())
            .map_err(|e| e.to_string())?;
        worst_pear = worst_pear.max((p0 - p1).abs());
    }

    let mut unit_dev = 0.0_f64;
    for theta in [vec![2.0, 0.5], vec![3.0, 1.5, 0.25]] {
        let spec = build_preset(
            Preset::Theorem4,
            &PresetOptions {
                k: theta.len(),
                theta: Some(theta),
                ..Default::default()
            },
        )
        .map_err(|e| e.to_string())?;
        let pca =
            within_and_between_from_moments(&population_moments(&spec).map_err(|e| e.to_string())?)
                .map_err(|e| e.to_string())?;
        for w in &pca.within {
            let (a, b) = (w.loadings.column(0), pca.between.loadings.column(0));
            unit_dev = unit_dev
                .max((1.0 - congruence(a, b).map_err(|e| e.to_string())?).abs())
                .max((1.0 - pearson_loadings(a, b).map_err(|e| e.to_string())?).abs());
        }
    }

    let mut mismatch_pearson = f64::NEG_INFINITY;
    for k in [2, 3] {
        let spec = preset("mismatch", 12, k, 1.0).map_err(|e| e.to_string())?;
        let pca =
            within_and_between_from_moments(&population_moments(&spec).map_err(|e| e.to_string())?)
                .map_err(|e| e.to_string())?;
        for w in &pca.within {
            let r = pearson_loadings(w.loadings.column(0), pca.between.loadings.column(0))
                .map_err(|e| e.to_string())?;
            mismatch_pearson = mismatch_pearson.max(r);
        }
    }
    verdict(
        worst_cong < INVARIANCE_TOL
            && worst_pear < INVARIANCE_TOL
            && unit_dev < UNIT_TOL
            && mismatch_pearson < MISMATCH_MAX_PEARSON,
        format!(
            "scaling |dcongruence| {worst_cong:.3e}, affine |dpearson| {worst_pear:.3e} (< {INVARIANCE_TOL:e}); \
             theorem4 |1 - r| {unit_dev:.3e} (< {UNIT_TOL:e}); mismatch max pearson {mismatch_pearson:.4} (< {MISMATCH_MAX_PEARSON})"
        ),
    )
}

fn run_pipeline(dir: &Path) -> Result<(), String> {
    let bin = env!("CARGO_BIN_EXE_varalloc");
    let d = dir.to_str().unwrap();
    let runs: [&[&str]; 4] = [
        &[
            "simulate", "--preset", "theorem1", "--p", "12", "--k", "2", "--n", "300", "--seed",
            "11", "--out", d,
        ],
        &[
            "analyze",
            "--input",
            &format!("{d}/data.csv"),
            "--rotation",
            "varimax",
            "--out",
            &format!("{d}/report.json"),
        ],
        &[
            "analyze",
            "--moments",
            &format!("{d}/moments.json"),
            "--format",
            "csv",
            "--out",
            &format!("{d}/report.csv"),
        ],
        &["verify", "--scenario", &format!("{d}/scenario.json")],
    ];
    for args in runs {
        let status = Command::new(bin)
            .args(args)
            .env_remove("VARALLOC_SEED")
            .status()
            .map_err(|e| e.to_string())?;
        if !status.success() {
            return Err(format!("{args:?} exited with {status}"));
        }
    }
    Ok(())
}

fn criterion_8() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    run_pipeline(a.path())?;
    run_pipeline(b.path())?;
    let files = [
        "scenario.json",
        "data.csv",
        "moments.json",
        "report.json",
        "report.csv",
        "verify.json",
    ];
    let mut differing = Vec::new();
    for f in files {
        let x = std::fs::read(a.path().join(f)).map_err(|e| e.to_string())?;
        let y = std::fs::read(b.path().join(f)).map_err(|e| e.to_string())?;
        if x != y {
            differing.push(f);
        }
    }
    verdict(
        differing.is_empty(),
        format!(
            "{} files compared across two runs, differing: {differing:?}",
            files.len()
        ),
    )
}

fn main() {
    // libtest-style flags such as --nocapture or a filter are ignored
    let criteria: [Criterion; 8] = [
        ("PCA reconstruction", criterion_1),
        ("theorem1 population means", criterion_2),
        ("theorem1 sample", criterion_3),
        ("theorem2 identity", criterion_4),
        ("theorem3 first-column match", criterion_5),
        ("theorem4 proportional match", criterion_6),
        ("congruence and Pearson diagnostics", criterion_7),
        ("pipeline determinism", criterion_8),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!(
                "criterion {} [{name}]: PASS ({detail}) [{secs:.2} s]",
                i + 1
            ),
            Err(detail) => {
                failed += 1;
                println!(
                    "criterion {} [{name}]: FAIL ({detail}) [{secs:.2} s]",
                    i + 1
                );
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
