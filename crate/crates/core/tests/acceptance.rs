//! End-to-end acceptance checks, one pass/fail line per criterion.
//!
//! Runs without the libtest harness so the summary is always printed.

mod common;

use std::f64::consts::PI;
use std::fs;
use std::process::Command;
use std::time::Instant;

use evtach::estimator::{self, evaluate_sweep, refined_step, rmae, rpm_from_gamma, run_scene, EstimatorParams, SweepRow, SweepSpec};
use evtach::events::{Event, Polarity};
use evtach::extraction::{self, remove_outliers, ClusterResult};
use evtach::registration::{extract_yaw, icp_points, nearest_correspondence, yaw_matrix, IcpParams};
use evtach::simulator::{simulate, SceneSpec, Source};
use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SPEEDS: [f64; 7] = [300.0, 600.0, 1000.0, 2000.0, 3000.0, 4500.0, 6000.0];
const M: usize = 30;

struct Outcome {
    pass: bool,
    detail: String,
}

fn permille(x: f64) -> String {
    format!("{:.3}‰", x * 1e3)
}

fn print_rows(rows: &[SweepRow]) {
    for r in rows {
        println!(
            "    {:>6} rpm  blades {}  initial {:>9}  refined {:>9}  {:.0} ms",
            r.speed,
            r.n_blades,
            permille(r.rmae_initial),
            permille(r.rmae_refined),
            r.mean_runtime_ms
        );
    }
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn sweep(base: SceneSpec) -> Vec<SweepRow> {
    let spec = SweepSpec {
        speeds: SPEEDS.to_vec(),
        blades: vec![3],
        repeats: M,
        seed: 0,
    };
    evaluate_sweep(&base, &spec, &EstimatorParams::default()).expect("sweep runs")
}

/// Wall time of one estimate per speed on a single worker thread.
fn single_core_runtime() -> f64 {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let params = EstimatorParams::default();
    SPEEDS
        .iter()
        .map(|&rpm| {
            let sim = simulate(&SceneSpec::single(rpm, 1000)).unwrap();
            pool.install(|| {
                let start = Instant::now();
                estimator::estimate_speed(&sim.stream, &params).unwrap();
                start.elapsed().as_secs_f64()
            })
        })
        .fold(0.0, f64::max)
}

fn criterion_1_and_2() -> (Outcome, Outcome) {
    let rows = sweep(SceneSpec::single(3000.0, 0));
    print_rows(&rows);
    let worst = rows.iter().map(|r| r.rmae_refined).fold(0.0, f64::max);
    let avg_refined = mean(rows.iter().map(|r| r.rmae_refined));
    let avg_initial = mean(rows.iter().map(|r| r.rmae_initial));
    let runtime = single_core_runtime();
    let c1 = Outcome {
        pass: worst <= 0.005 && avg_refined <= 0.002 && runtime <= 5.0,
        detail: format!(
            "refined RMAE worst speed {} (<= 5‰), mean {} (<= 2‰); slowest single-core estimate {:.2} s (<= 5 s)",
            permille(worst),
            permille(avg_refined),
            runtime
        ),
    };
    let ratio = avg_initial / avg_refined;
    let c2 = Outcome {
        pass: ratio >= 2.0,
        detail: format!(
            "mean RMAE initial {} / refined {} = {:.2} (>= 2)",
            permille(avg_initial),
            permille(avg_refined),
            ratio
        ),
    };
    (c1, c2)
}

fn criterion_3() -> Outcome {
    let mut base = SceneSpec::single(3000.0, 0);
    base.noise_rate = 0.1 * 3.0 * base.events_per_blade_ms;
    base.jitter_amp = 2.0;
    let rows = sweep(base);
    print_rows(&rows);
    let avg = mean(rows.iter().map(|r| r.rmae_refined));
    Outcome {
        pass: avg <= 0.010,
        detail: format!("10% noise events, 2 px jitter: mean refined RMAE {} (<= 10‰)", permille(avg)),
    }
}

/// Fraction of propeller events whose cluster maps to their propeller, with
/// each cluster mapped to the propeller center nearest its centroid.
fn assignment_accuracy(clusters: &ClusterResult, labels: &[Source], centers: &[[f64; 2]]) -> f64 {
    let owner: Vec<usize> = clusters
        .centroids
        .iter()
        .map(|c| {
            (0..centers.len())
                .min_by(|&a, &b| {
                    let da = (c[0] - centers[a][0]).hypot(c[1] - centers[a][1]);
                    let db = (c[0] - centers[b][0]).hypot(c[1] - centers[b][1]);
                    da.total_cmp(&db)
                })
                .unwrap()
        })
        .collect();
    let mut total = 0usize;
    let mut right = 0usize;
    for (label, &cluster) in labels.iter().zip(&clusters.assignment) {
        if let Source::Propeller(p) = label {
            total += 1;
            if owner[cluster] == *p {
                right += 1;
            }
        }
    }
    right as f64 / total as f64
}

fn criterion_4() -> Outcome {
    let rpms = [1200.0, 2400.0, 3600.0, 4800.0];
    let params = EstimatorParams::default();
    let mut k4 = 0;
    let mut worst_accuracy: f64 = 1.0;
    let mut refined: Vec<Vec<f64>> = vec![Vec::new(); 4];
    for seed in 0..M as u64 {
        let scene = SceneSpec::quad(rpms, seed);
        let sim = simulate(&scene).unwrap();
        let report = estimator::estimate_speed(&sim.stream, &params).unwrap();
        assert_eq!(report.clusters.assignment.len(), sim.labels.len());
        if report.clusters.k == 4 {
            k4 += 1;
        }
        let centers: Vec<[f64; 2]> = scene.propellers.iter().map(|p| p.center).collect();
        worst_accuracy = worst_accuracy.min(assignment_accuracy(&report.clusters, &sim.labels, &centers));
        for (i, c) in centers.iter().enumerate() {
            let nearest = report.estimates().min_by(|a, b| {
                let da = (a.centroid[0] - c[0]).hypot(a.centroid[1] - c[1]);
                let db = (b.centroid[0] - c[0]).hypot(b.centroid[1] - c[1]);
                da.total_cmp(&db)
            });
            refined[i].push(nearest.map_or(0.0, |e| e.rpm_refined));
        }
    }
    let per_target: Vec<f64> = refined.iter().zip(rpms).map(|(r, truth)| rmae(r, truth).unwrap()).collect();
    let worst_target = per_target.iter().cloned().fold(0.0, f64::max);
    Outcome {
        pass: k4 >= 28 && worst_accuracy >= 0.99 && worst_target <= 0.010,
        detail: format!(
            "k = 4 in {k4}/{M} runs (>= 28); worst assignment accuracy {:.2}% (>= 99%); per-target refined RMAE [{}] (<= 10‰)",
            worst_accuracy * 100.0,
            per_target.iter().map(|&x| permille(x)).collect::<Vec<_>>().join(", ")
        ),
    }
}

fn criterion_5() -> Outcome {
    let params = EstimatorParams::default();
    let mut pass = true;
    let mut parts = Vec::new();
    for blades in [2u32, 3, 4] {
        let mut refined = Vec::new();
        let mut correct = 0;
        for seed in 0..M as u64 {
            let mut scene = SceneSpec::single(3000.0, seed);
            scene.propellers[0].n_blades = blades;
            let run = run_scene(&scene, &params).unwrap();
            refined.push(run.per_target[0].map_or(0.0, |(_, r)| r));
            if run.report.estimates().next().is_some_and(|e| e.n_blades == blades) {
                correct += 1;
            }
        }
        let err = rmae(&refined, 3000.0).unwrap();
        let rate = correct as f64 / M as f64;
        pass &= err <= 0.005 && rate >= 0.95;
        parts.push(format!("{blades} blades: RMAE {}, symmetry {correct}/{M}", permille(err)));
    }
    Outcome {
        pass,
        detail: format!("{} (<= 5‰, >= 95%)", parts.join("; ")),
    }
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cloud = |rng: &mut ChaCha8Rng, n: usize| -> Vec<Point3<f64>> {
        (0..n)
            .map(|_| Point3::new(rng.random_range(0.0..100.0), rng.random_range(0.0..100.0), rng.random_range(0.0..1000.0)))
            .collect()
    };
    let mut worst: f64 = 0.0;
    let mut icp_ok = 0;
    for _ in 0..200 {
        let n = rng.random_range(100..800);
        let source = cloud(&mut rng, n);
        let gamma = rng.random_range(1.0f64..30.0).to_radians() * if rng.random::<bool>() { 1.0 } else { -1.0 };
        let center = Vector3::new(rng.random_range(0.0..100.0), rng.random_range(0.0..100.0), 0.0);
        let shift = Vector3::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0));
        let r = yaw_matrix(gamma);
        let target: Vec<Point3<f64>> = source.iter().map(|p| Point3::from(r * (p.coords - center) + center + shift)).collect();
        let result = icp_points(&source, &target, &IcpParams::default()).unwrap();
        let err = (result.gamma_acc - gamma).abs().to_degrees();
        worst = worst.max(err);
        if err <= 0.1 {
            icp_ok += 1;
        }
    }
    let mut nn_ok = 0;
    for i in 0..100 {
        // Half the instances are large enough to use the grid index.
        let m = if i % 2 == 0 { rng.random_range(1..500) } else { rng.random_range(500..=1000) };
        let n = rng.random_range(1..=1000);
        let target = cloud(&mut rng, m);
        let source = cloud(&mut rng, n);
        if nearest_correspondence(&source, &target).unwrap() == common::nearest_oracle(&source, &target) {
            nn_ok += 1;
        }
    }
    Outcome {
        pass: icp_ok == 200 && nn_ok == 100,
        detail: format!("ICP yaw within 0.1° in {icp_ok}/200 (worst {worst:.5}°); nearest neighbors exact in {nn_ok}/100"),
    }
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    let mut dbi_err: f64 = 0.0;
    for _ in 0..100 {
        let k = rng.random_range(2..=8);
        let n = rng.random_range(k..=1000);
        let events: Vec<Event> = (0..n)
            .map(|_| Event::new(0, rng.random_range(0..346), rng.random_range(0..260), Polarity::Positive))
            .collect();
        let points: Vec<[f64; 2]> = events.iter().map(|e| e.xy()).collect();
        let labels: Vec<usize> = (0..n).map(|i| if i < k { i } else { rng.random_range(0..k) }).collect();
        let centroids = common::means(&points, &labels, k);
        let result = ClusterResult {
            k,
            centroids,
            assignment: labels.clone(),
            dbi: None,
            iterations: 0,
        };
        let got = extraction::dbi(&result, &events).unwrap();
        dbi_err = dbi_err.max((got - common::dbi_oracle(&points, &labels, k)).abs());
    }

    let mut yaw_err: f64 = 0.0;
    let steps = (2.0 * PI / 1e-3) as i64;
    for i in 1..=steps {
        let g = -PI + i as f64 * 1e-3;
        yaw_err = yaw_err.max((extract_yaw(&yaw_matrix(g)) - g).abs());
    }
    yaw_err = yaw_err.max((extract_yaw(&yaw_matrix(PI)) - PI).abs());

    let mut outliers_ok = 0;
    for _ in 0..100 {
        let n = rng.random_range(1..=500);
        let centroid = [rng.random_range(0.0..346.0), rng.random_range(0.0..260.0)];
        let events: Vec<Event> = (0..n)
            .map(|_| Event::new(0, rng.random_range(0..346), rng.random_range(0..260), Polarity::Negative))
            .collect();
        let distances: Vec<f64> = events.iter().map(|e| (e.xy()[0] - centroid[0]).hypot(e.xy()[1] - centroid[1])).collect();
        let want: Vec<Event> = common::outlier_oracle(&distances).into_iter().map(|i| events[i]).collect();
        if remove_outliers(&events, centroid) == want {
            outliers_ok += 1;
        }
    }

    let third = 2.0 * PI / 3.0;
    let arithmetic = [
        (rpm_from_gamma(2.0 * PI / 100.0, 1_000) - 600.0).abs() < 1e-9,
        (rpm_from_gamma(PI / 3.0, 10_000) - 1000.0).abs() < 1e-9,
        refined_step(6000.0, third, 0.8, 1_000, 150_000) == 1_333,
        (refined_step(300.0, third, 0.8, 1_000, 150_000) as f64 - 26_666.67).abs() < 1.0,
        refined_step(600.0, 2.0 * PI, 0.8, 1_000, 150_000) == 37_500,
        rmae(&[3000.0, 3000.0], 3000.0).unwrap() == 0.0,
        (rmae(&[3030.0], 3000.0).unwrap() - 0.01).abs() < 1e-12,
    ];
    let arithmetic_ok = arithmetic.iter().filter(|&&b| b).count();

    Outcome {
        pass: dbi_err <= 1e-9 && yaw_err <= 1e-12 && outliers_ok == 100 && arithmetic_ok == arithmetic.len(),
        detail: format!(
            "DBI max deviation {dbi_err:.2e}; yaw round trip max {yaw_err:.2e} over {} angles; outliers {outliers_ok}/100; speed/step arithmetic {arithmetic_ok}/{}",
            steps + 1,
            arithmetic.len()
        ),
    }
}

fn run_cli(args: &[&str], threads: &str) -> Vec<u8> {
    let out = Command::new(env!("CARGO_BIN_EXE_evtach"))
        .args(args)
        .env("EVTACH_THREADS", threads)
        .output()
        .expect("binary runs");
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    out.stdout
}

fn criterion_8() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("scene.json");
    fs::write(&scene, serde_json::to_string(&SceneSpec::quad([1200.0, 2400.0, 3600.0, 4800.0], 8)).unwrap()).unwrap();
    let scene = scene.to_str().unwrap();
    let mut files = Vec::new();
    let mut results = Vec::new();
    for (i, threads) in ["1", "4", "1"].iter().enumerate() {
        let events = dir.path().join(format!("events{i}.csv"));
        let events = events.to_str().unwrap();
        run_cli(&["simulate", "--in", scene, "--out", events], threads);
        files.push(fs::read(events).unwrap());
        results.push(run_cli(&["estimate", "--in", events], threads));
    }
    let sim_same = files.windows(2).all(|w| w[0] == w[1]);
    let est_same = results.windows(2).all(|w| w[0] == w[1]);
    Outcome {
        pass: sim_same && est_same && !results[0].is_empty(),
        detail: format!(
            "simulate identical across runs and 1/4 threads: {sim_same}; estimate identical: {est_same} ({} bytes)",
            results[0].len()
        ),
    }
}

fn main() {
    let started = Instant::now();
    let mut outcomes: Vec<(usize, Outcome)> = Vec::new();
    let mut report = |n: usize, o: Outcome| {
        println!("criterion {n}: {}  {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        outcomes.push((n, o));
    };

    report(7, criterion_7());
    report(6, criterion_6());
    report(8, criterion_8());
    let (c1, c2) = criterion_1_and_2();
    report(1, c1);
    report(2, c2);
    report(3, criterion_3());
    report(4, criterion_4());
    report(5, criterion_5());

    outcomes.sort_by_key(|(n, _)| *n);
    println!("\nsummary ({:.0} s)", started.elapsed().as_secs_f64());
    for (n, o) in &outcomes {
        println!("criterion {n}: {}", if o.pass { "PASS" } else { "FAIL" });
    }
    if outcomes.iter().any(|(_, o)| !o.pass) {
        std::process::exit(1);
    }
}
