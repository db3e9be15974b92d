use std::time::Instant;

use patchrot::selftest::{geometry_oracles, loss_at_init, rotation_oracles, run_selftest};

#[test]
fn oracles_hold() {
    assert!(rotation_oracles(100, 3).unwrap());
    assert!(geometry_oracles().unwrap());
}

#[test]
fn untrained_loss_is_near_chance() {
    let ln4 = 4f64.ln();
    let (total, img, patch) = loss_at_init(1).unwrap();
    assert!((img - ln4).abs() < 0.05, "image term {img}");
    assert!((patch - ln4).abs() < 0.05, "patch term {patch}");
    assert!((total - img - patch).abs() < 1e-5);
}

#[test]
fn full_selftest_passes_quickly() {
    let start = Instant::now();
    let lines = run_selftest(None).unwrap();
    let secs = start.elapsed().as_secs_f64();
    for l in &lines {
        println!("{} {:<40} {}", if l.passed { "PASS" } else { "FAIL" }, l.name, l.detail);
    }
    assert!(lines.iter().any(|l| l.name == "fault injection detected"));
    assert!(lines.iter().all(|l| l.passed));
    assert!(secs < 60.0, "selftest took {secs:.1}s");
}

#[test]
fn injected_fault_names_the_primitive() {
    let lines = run_selftest(Some("gelu")).unwrap();
    let failing: Vec<&str> = lines.iter().filter(|l| !l.passed).map(|l| l.name.as_str()).collect();
    assert!(failing.contains(&"grad gelu"), "{failing:?}");
    assert!(!failing.contains(&"grad exp"));
}
