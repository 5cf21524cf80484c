//! The ten acceptance criteria. Each test prints its individual checks and
//! one summary line, then fails if any check failed.

use wentzell::verify::{self, Check};

fn report(number: usize, title: &str, checks: wentzell::Result<Vec<Check>>) {
    let checks = match checks {
        Ok(c) => c,
        Err(e) => {
            println!("FAIL criterion {number} ({title}): {e}");
            panic!("criterion {number} errored: {e}");
        }
    };
    for c in &checks {
        println!("    {c}");
    }
    let failed: Vec<&str> = checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| c.name.as_str())
        .collect();
    if failed.is_empty() {
        println!("PASS criterion {number} ({title}): {} checks", checks.len());
    } else {
        println!(
            "FAIL criterion {number} ({title}): {} of {} checks failed",
            failed.len(),
            checks.len()
        );
        panic!("criterion {number} failed: {failed:?}");
    }
}

#[test]
fn criterion_01_operator_structure() {
    report(1, "operator structure", verify::operator_structure());
}

#[test]
fn criterion_02_conservation_and_stability() {
    report(2, "conservation and stability", verify::conservation());
}

#[test]
fn criterion_03_spectral_regression() {
    report(3, "spectral regression", verify::spectral());
}

#[test]
fn criterion_04_discrete_duality() {
    report(4, "discrete duality", verify::duality());
}

#[test]
fn criterion_05_observability() {
    report(5, "observability", verify::observability());
}

#[test]
fn criterion_06_penalized_hum() {
    report(6, "penalized HUM", verify::hum());
}

#[test]
fn criterion_07_weighted_minimizer() {
    report(7, "weighted minimizer", verify::weighted());
}

#[test]
fn criterion_08_carleman_diagnostic() {
    report(8, "Carleman diagnostic", verify::carleman());
}

#[test]
fn criterion_09_semilinear() {
    report(9, "semilinear fixed point", verify::semilinear());
}

#[test]
fn criterion_10_reproducibility() {
    let tmp = tempfile::tempdir().unwrap();
    report(10, "reproducibility", verify::reproducibility(tmp.path()));
}
