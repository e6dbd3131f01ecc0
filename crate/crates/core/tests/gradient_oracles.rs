//! Analytic gradients against central finite differences of the loss value.

mod common;

use common::{gradient_error, Loss, INSTANCES, TOL};
use medoe::losses::{aux_loss, ce_loss, combined_loss, focal_loss, MarginalTargets};
use medoe::model::LogitGrid;
use medoe::synthgen::LabelSet;

fn check(loss: Loss) {
    for s in 0..INSTANCES {
        let err = gradient_error(loss, s);
        assert!(err < TOL, "{loss:?} instance {s}: relative error {err:e}");
    }
}

#[test]
fn cross_entropy() {
    check(Loss::Ce);
}

#[test]
fn interfering_channel_penalty() {
    check(Loss::AuxL2);
}

#[test]
fn marginal_kl() {
    check(Loss::AuxKl);
}

#[test]
fn combined() {
    check(Loss::Combined);
    for s in 0..INSTANCES {
        let t = common::instance(s);
        let alpha = 0.3;
        let total = combined_loss(&t.logits, &t.labels, &t.set, &t.targets, alpha).unwrap().total;
        let ce = ce_loss(&t.logits, &t.labels, &t.set).unwrap().value;
        let aux = aux_loss(&t.logits, &t.labels, &t.set, &t.targets).unwrap();
        assert!((total - (ce + alpha * (aux.l2.value + aux.kl.value))).abs() <= 1e-12);
    }
}

#[test]
fn focal() {
    check(Loss::Focal);
}

#[test]
fn selection_loss() {
    check(Loss::Select);
}

#[test]
fn minimizers_have_vanishing_gradients() {
    // A pixel whose true logit dominates: ce and focal gradients vanish.
    let logits = LogitGrid { height: 1, width: 1, channels: 3, data: vec![60.0, 0.0, 0.0] };
    let all = LabelSet::all(3);
    let g = ce_loss(&logits, &[0], &all).unwrap().grad;
    assert!(g.iter().all(|v| v.abs() <= 1e-8));
    let g = focal_loss(&logits, &[0], 2.0).unwrap().grad;
    assert!(g.iter().all(|v| v.abs() <= 1e-8));

    // Zero interfering logits and a predicted marginal equal to the target.
    let set = LabelSet::from_ids(3, [1, 2]);
    let logits = LogitGrid { height: 1, width: 2, channels: 3, data: vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0] };
    let targets = MarginalTargets::from_weights(&[0.0, 1.0, 1.0], &set).unwrap();
    let aux = aux_loss(&logits, &[1, 2], &set, &targets).unwrap();
    assert!(aux.l2.value == 0.0 && aux.kl.value.abs() <= 1e-12);
    assert!(aux.l2.grad.iter().chain(&aux.kl.grad).all(|v| v.abs() <= 1e-8));
}
