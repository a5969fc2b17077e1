//! Finite-difference agreement of every primitive op and the three models.

use r2i_core::schedule::ScheduleConfig;
use r2i_core::verify::{grad_check_models, grad_check_primitives, GRAD_TOLERANCE};

#[test]
fn every_primitive_op_within_tolerance() {
    let report = grad_check_primitives(3).unwrap();
    assert!(report.len() >= 10, "only {} ops checked", report.len());
    for (op, err) in report {
        assert!(err < GRAD_TOLERANCE, "{op:?}: {err:e}");
    }
}

#[test]
fn unet_codec_and_classifier_within_tolerance() {
    let sched = ScheduleConfig::default().build().unwrap();
    let report = grad_check_models(5, &sched).unwrap();
    let names: Vec<&str> = report.iter().map(|r| r.0).collect();
    assert_eq!(report.len(), 3, "{names:?}");
    for (name, err) in report {
        assert!(err < GRAD_TOLERANCE, "{name}: {err:e}");
    }
}
