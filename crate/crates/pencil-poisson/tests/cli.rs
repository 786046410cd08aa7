//! Drives the command-line entry point in-process and checks exit codes,
//! CSV shape, and byte-level determinism of repeated runs.

use pencil_poisson::bench::cli::cli_main;
use pencil_poisson::bench::CSV_HEADER;
use std::path::PathBuf;

fn tmp_csv(tag: &str) -> PathBuf {
    std::env::temp_dir().join(format!("pencil-poisson-{}-{tag}.csv", std::process::id()))
}

fn run(args: &[&str]) -> i32 {
    cli_main(std::iter::once("pencil-poisson").chain(args.iter().copied()))
}

#[test]
fn verify_small_grid_exits_zero() {
    assert_eq!(run(&["verify", "--grid", "8,8,8", "--workers", "2"]), 0);
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(run(&["sweep", "--grid", "8x8x8"]), 2);
    assert_eq!(run(&["no-such-subcommand"]), 2);
}

#[test]
fn runtime_errors_exit_one() {
    // A 4x4 process grid cannot split a 3-point axis.
    assert_eq!(run(&["verify", "--grid", "3,3,3", "--workers", "16"]), 1);
}

#[test]
fn sweep_is_deterministic_and_well_formed() {
    let a = tmp_csv("sweep-a");
    let b = tmp_csv("sweep-b");
    for out in [&a, &b] {
        let code = run(&[
            "sweep",
            "--grid",
            "12,12,12",
            "--workers",
            "2",
            "--seed",
            "9",
            "--no-timing",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
    }
    let text_a = std::fs::read_to_string(&a).unwrap();
    let text_b = std::fs::read_to_string(&b).unwrap();
    std::fs::remove_file(&a).ok();
    std::fs::remove_file(&b).ok();
    assert_eq!(text_a, text_b, "repeated sweeps differ");
    let mut lines = text_a.lines();
    assert_eq!(lines.next(), Some(CSV_HEADER));
    // Exactly one row per default tolerance.
    assert_eq!(lines.clone().count(), 4);
    for line in lines {
        assert_eq!(line.matches(',').count(), CSV_HEADER.matches(',').count());
        assert!(line.starts_with("cg,"));
    }
}

#[test]
fn compare_lists_every_solver_variant() {
    let out = tmp_csv("compare");
    let code = run(&[
        "compare",
        "--grid",
        "12,12,12",
        "--workers",
        "4",
        "--tol",
        "1e-5",
        "--seed",
        "4",
        "--no-timing",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let text = std::fs::read_to_string(&out).unwrap();
    std::fs::remove_file(&out).ok();
    for id in ["fft", "cg", "cg-nopc", "bicgstab", "bicgstab-nopc"] {
        assert!(
            text.lines().any(|l| l.starts_with(&format!("{id},"))),
            "missing row for {id} in:\n{text}"
        );
    }
}

#[test]
fn scale_covers_each_worker_count() {
    let out = tmp_csv("scale");
    let code = run(&[
        "scale",
        "--local-grid",
        "6,6,6",
        "--workers-list",
        "1,2,4",
        "--no-timing",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let text = std::fs::read_to_string(&out).unwrap();
    std::fs::remove_file(&out).ok();
    let workers: Vec<&str> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(5).unwrap())
        .collect();
    assert_eq!(workers, ["1", "2", "4"]);
}
