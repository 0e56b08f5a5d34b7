//! Acceptance gate. Prints one PASS/FAIL line per criterion and fails if any
//! criterion fails. Run with `cargo test --test acceptance`.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use labo::cli::{cmd_train, ExperimentConfig};
use labo::data::{Dataset, Split};
use labo::oracle::{solve_inner_numeric, DEFAULT_MAX_ITER, DEFAULT_TOL};
use labo::smoothing::labo_optimal_smoothing;
use labo::train::Mode;
use labo::verify::{run_suite, CheckResult, VerifyOptions};
use labo::ProbVec;

const CLOSED_FORM_RUNTIME_S: f64 = 30.0;
const EXPERIMENT_RUNTIME_S: f64 = 300.0;
const CENTROID_ACC: (f64, f64) = (0.85, 0.95);
/// Accuracy slack in percentage points.
const ACC_BELOW_BASELINE: f64 = 0.5;
const ACC_VS_LS: f64 = 1.5;
const CONFIDENCE_DROP: f64 = 0.05;

struct Line {
    id: usize,
    name: &'static str,
    passed: bool,
    detail: String,
}

fn from_check(
    id: usize,
    name: &'static str,
    results: &[CheckResult],
    check: &str,
    extra: Option<(bool, String)>,
) -> Line {
    let r = results
        .iter()
        .find(|r| r.name == check)
        .expect("check present in suite");
    let (ok, note) = extra.unwrap_or((true, String::new()));
    Line {
        id,
        name,
        passed: r.passed && ok,
        detail: format!(
            "worst {:.3e} tol {:.0e} n={} {} {note}",
            r.worst, r.tolerance, r.instances, r.detail
        ),
    }
}

fn worked_example() -> (bool, String) {
    let p = ProbVec::new(vec![0.7, 0.2, 0.1]).unwrap();
    let report = solve_inner_numeric(&p, 1.0, 2.0, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
    let closed = labo_optimal_smoothing(&p, 2.0).unwrap();
    let want = [0.522_879_4, 0.279_490_8, 0.197_629_8];
    let d = report.argmin.linf_distance(&closed);
    let e = report
        .argmin
        .as_slice()
        .iter()
        .zip(want)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    (
        d <= 1e-6 && e <= 1e-6,
        format!("worked example dist {d:.1e}"),
    )
}

fn nearest_centroid_accuracy(data: &Dataset) -> f64 {
    let (k, d) = (data.classes(), data.dim());
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for &i in data.split(Split::Train) {
        counts[data.label(i)] += 1;
        for (s, x) in sums[data.label(i)].iter_mut().zip(data.row(i)) {
            *s += x;
        }
    }
    let test = data.split(Split::Test);
    let correct = test
        .iter()
        .filter(|&&i| {
            let dist = |c: usize| {
                sums[c]
                    .iter()
                    .zip(data.row(i))
                    .map(|(s, x)| (s / counts[c] as f64 - x).powi(2))
                    .sum::<f64>()
            };
            let best = (0..k).min_by(|&a, &b| dist(a).total_cmp(&dist(b))).unwrap();
            best == data.label(i)
        })
        .count();
    correct as f64 / test.len() as f64
}

fn desk_experiment() -> Line {
    let start = Instant::now();
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/blobs.toml");
    let cfg = ExperimentConfig::load(&config).unwrap();
    assert_eq!(cfg.seeds.len(), 5);
    let data = cfg.load_dataset().unwrap();
    let centroid = nearest_centroid_accuracy(&data);
    let out = tempfile::tempdir().unwrap();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let summary = pool.install(|| cmd_train(&cfg, out.path())).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let row = |m| summary.row(m).expect("mode in config");
    let (none, ls, labo) = (row(Mode::None), row(Mode::Ls), row(Mode::Labo));
    let all_ran = [none, ls, labo]
        .iter()
        .all(|r| r.runs == 5 && r.failed == 0);
    let centroid_ok = (CENTROID_ACC.0..=CENTROID_ACC.1).contains(&centroid);
    let acc_ok = labo.test_acc_mean >= none.test_acc_mean - ACC_BELOW_BASELINE
        && (labo.test_acc_mean - ls.test_acc_mean).abs() <= ACC_VS_LS;
    let conf_ok = none.mean_confidence - labo.mean_confidence >= CONFIDENCE_DROP;
    Line {
        id: 9,
        name: "desk_scale_blobs",
        passed: all_ran && centroid_ok && acc_ok && conf_ok && secs <= EXPERIMENT_RUNTIME_S,
        detail: format!(
            "centroid {centroid:.4}; acc none {} ls {} labo {}; confidence none {:.4} labo {:.4}; {secs:.1}s",
            none.test_acc, ls.test_acc, labo.test_acc, none.mean_confidence, labo.mean_confidence
        ),
    }
}

fn verify_binary() -> Line {
    let bin = env!("CARGO_BIN_EXE_labo");
    let clean = Command::new(bin).arg("verify").output().unwrap();
    let mutated = Command::new(bin)
        .args(["verify", "--quick", "--inject-exponent-inversion"])
        .output()
        .unwrap();
    let (a, b) = (clean.status.code(), mutated.status.code());
    Line {
        id: 10,
        name: "verify_command",
        passed: a == Some(0) && b.is_some_and(|c| c != 0),
        detail: format!("clean exit {a:?}, mutated exit {b:?}"),
    }
}

fn main() {
    let start = Instant::now();
    let results = run_suite(&VerifyOptions::default());
    let oracle_secs = results
        .iter()
        .find(|r| r.name == "closed_form_oracle")
        .unwrap()
        .seconds;
    let (example_ok, example_note) = worked_example();
    let mut lines = vec![
        from_check(
            1,
            "closed_form_oracle",
            &results,
            "closed_form_oracle",
            Some((
                example_ok && oracle_secs <= CLOSED_FORM_RUNTIME_S,
                format!("{example_note}, {oracle_secs:.2}s"),
            )),
        ),
        from_check(
            2,
            "temperature_identity",
            &results,
            "temperature_identity",
            None,
        ),
        from_check(3, "kd_decomposition", &results, "kd_decomposition", None),
        from_check(
            4,
            "closed_form_limits",
            &results,
            "closed_form_limits",
            None,
        ),
        from_check(
            5,
            "zero_hypergradient",
            &results,
            "zero_hypergradient",
            None,
        ),
        from_check(6, "hessian_structure", &results, "hessian_structure", None),
        from_check(
            7,
            "model_gradient_gate",
            &results,
            "model_gradient_gate",
            None,
        ),
        from_check(
            8,
            "warmup_equivalence",
            &results,
            "warmup_equivalence",
            None,
        ),
    ];
    lines.push(desk_experiment());
    lines.push(verify_binary());

    for l in &lines {
        println!(
            "criterion {:>2} {:<22} {}  {}",
            l.id,
            l.name,
            if l.passed { "PASS" } else { "FAIL" },
            l.detail
        );
    }
    println!(
        "acceptance finished in {:.1}s",
        start.elapsed().as_secs_f64()
    );
    let failed: Vec<usize> = lines.iter().filter(|l| !l.passed).map(|l| l.id).collect();
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
