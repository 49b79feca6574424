//! One PASS/FAIL line per acceptance criterion. Run with
//! `cargo test -p ovseg-core --test acceptance -- --nocapture`.

mod common;

use common::*;

fn report(n: usize, title: &str, f: fn() -> Outcome) -> bool {
    let out = f();
    println!("[{}] {n}. {title}: {}", if out.pass { "PASS" } else { "FAIL" }, out.detail);
    out.pass
}

#[test]
fn acceptance_criteria() {
    let results = [
        report(1, "gradient correctness", criterion_gradients),
        report(2, "mIoU oracle equivalence", criterion_miou),
        report(3, "Fourier field properties", criterion_fourier),
        report(4, "fusion shape contract and cross-modal flow", criterion_fusion),
        report(5, "zero-shot protocol integrity", criterion_protocol),
        report(6, "ablation ordering", criterion_ablation),
        report(7, "segmentation head contracts", criterion_head),
        report(8, "reproducibility", criterion_reproducibility),
    ];
    let passed = results.iter().filter(|p| **p).count();
    println!("{passed}/{} criteria passed", results.len());
    assert_eq!(passed, results.len(), "some acceptance criteria failed");
}
