use dtr_core::sem_sim::{simulate_panel, OraclePropensities, RegimeSpec, SimSpec};
use dtr_core::weights::{cumulative_weights, normalize_weights, truncate_probability, ProbBounds};
use proptest::prelude::*;

proptest! {
    #[test]
    fn normalized_weights_sum_to_one(w in prop::collection::vec(1e-6f64..1e6, 1..200)) {
        let n = normalize_weights(&w).unwrap();
        prop_assert!((n.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(n.iter().all(|v| *v > 0.0));
    }

    #[test]
    fn truncation_lands_in_bounds(p in -1.0f64..2.0) {
        let t = truncate_probability(p, 0.1, 0.9);
        prop_assert!((0.1..=0.9).contains(&t));
        if (0.1..=0.9).contains(&p) {
            prop_assert_eq!(t, p);
        }
    }

    #[test]
    fn modified_weight_equals_observed_weight_on_agreement(seed in 0u64..1000, r in 0usize..4) {
        let regime = RegimeSpec::ALL[r];
        let panel = simulate_panel(&SimSpec::new(40, 3, seed)).unwrap();
        let table = cumulative_weights(&panel, &OraclePropensities, regime, ProbBounds::default(), 3).unwrap();
        for row in &table.rows {
            let traj = &panel.trajectories()[row.subject];
            let prev = row.m > 0 && traj.t(row.m - 1).unwrap();
            let agree = traj.t(row.m).unwrap() == regime.decide(traj.l(row.m).unwrap(), prev);
            prop_assert_eq!(agree, row.w_treat_md == row.w_treat);
            if agree {
                prop_assert_eq!(row.w_md, row.w);
            }
        }
        for m in 0..=3 {
            let s: f64 = table.normalized_at(m).unwrap().iter().map(|r| r.1).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_weights_cannot_be_normalized() {
    assert!(normalize_weights(&[0.0, 0.0]).is_err());
    assert!(normalize_weights(&[1.0, f64::NAN]).is_err());
}

#[test]
fn csv_export_has_one_line_per_row() {
    let panel = simulate_panel(&SimSpec::new(30, 2, 3)).unwrap();
    let table = cumulative_weights(&panel, &OraclePropensities, RegimeSpec::Threshold750, ProbBounds::default(), 2).unwrap();
    let mut buf = Vec::new();
    table.write_csv_to(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("id,m,W,Wmd"));
    assert_eq!(lines.count(), table.rows.len());
}
