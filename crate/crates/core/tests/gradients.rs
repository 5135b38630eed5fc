//! Central finite-difference checks of every differentiable operation,
//! the layers built from them, and the DAP block.

mod common;

use common::{
    check_case, check_dap, grad_check, layer_cases, op_cases, DapCase, FD_STEP, FD_TOLERANCE,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const INSTANCES: usize = 8;

#[test]
fn tape_operations() {
    for (i, case) in op_cases().iter().enumerate() {
        let r = check_case(case, INSTANCES, 100 + i as u64);
        assert!(r.worst < FD_TOLERANCE, "{}: {r:?}", case.name);
    }
}

#[test]
fn cross_entropy_is_tight() {
    let ce = op_cases()
        .into_iter()
        .find(|c| c.name == "cross_entropy")
        .unwrap();
    let r = check_case(&ce, 20, 7);
    assert!(r.worst < 1e-6, "{r:?}");
}

#[test]
fn layers() {
    for (i, case) in layer_cases().iter().enumerate() {
        let r = check_case(case, INSTANCES, 200 + i as u64);
        assert!(r.worst < FD_TOLERANCE, "{}: {r:?}", case.name);
    }
}

#[test]
fn dap_block_every_setting() {
    for (i, case) in DapCase::all().into_iter().enumerate() {
        let r = check_dap(case, 6, 300 + i as u64);
        assert!(r.worst < FD_TOLERANCE, "{}: {r:?}", case.name());
    }
}

#[test]
fn kink_detector_flags_the_known_instance() {
    // this instance lies within 1e-5 of a selection switch; a smaller
    // step sees the smooth side and agrees with the tape
    let case = DapCase::all()[7];
    let mut rng = ChaCha8Rng::seed_from_u64(307);
    let (xs, f) = (0..6).map(|v| case.instance(&mut rng, v)).last().unwrap();
    let coarse = grad_check(&xs, f.as_ref(), FD_STEP);
    assert!(coarse.kinked, "{coarse:?}");
    let fine = grad_check(&xs, f.as_ref(), 1e-7);
    assert!(!fine.kinked && fine.error < FD_TOLERANCE, "{fine:?}");
}
