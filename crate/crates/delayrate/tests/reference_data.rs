//! Checks against the reference series shipped in fixtures/.

use std::path::Path;

use delayrate::marketfit::{implied_phi_value, Interpolation, YieldCurve};
use delayrate::shortrate::ModelParams;

fn rows(name: &str) -> Vec<Vec<f64>> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name);
    csv::Reader::from_path(path)
        .unwrap()
        .records()
        .map(|r| r.unwrap().iter().map(|v| v.trim().parse().unwrap()).collect())
        .collect()
}

/// Max |φ − reference| per delay. The reference series was digitized from a
/// chart, hence the loose 2e-3.
#[test]
fn implied_phi_tracks_reference_series() {
    const TOL: f64 = 2e-3;
    let curve_rows = rows("us_yields.csv");
    let curve = YieldCurve::new(
        curve_rows.iter().map(|r| r[0]).collect(),
        curve_rows.iter().map(|r| r[1]).collect(),
        Interpolation::NelsonSiegel,
    )
    .unwrap();
    let reference = rows("implied_phi.csv");
    for p in rows("bond_params.csv") {
        let model = ModelParams::constant(p[1], p[2], vec![p[3]], vec![p[0]], p[4]).unwrap();
        let pts: Vec<&Vec<f64>> = reference.iter().filter(|r| r[0] == p[0]).collect();
        assert_eq!(pts.len(), 50);
        for r in pts {
            let v = implied_phi_value(&curve, &model, r[1]).unwrap();
            assert!((v - r[2]).abs() <= TOL, "tau {} s {}: {v} vs {}", p[0], r[1], r[2]);
        }
    }
}
