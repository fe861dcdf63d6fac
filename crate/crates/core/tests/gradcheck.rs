//! Central finite differences against reverse-mode gradients on tiny models.

mod common;

#[test]
fn nll_gradient_matches_finite_differences() {
    let report = common::nll_gradcheck();
    assert!(report.worst <= 1e-3, "{report:?}");
    assert!(report.checked >= 100, "{report:?}");
}

#[test]
fn joint_loss_gradient_matches_finite_differences() {
    let (g, r) = common::joint_gradcheck();
    assert!(g.worst <= 1e-3 && g.checked >= 100, "generator: {g:?}");
    assert!(r.worst <= 1e-3 && r.checked >= 20, "retriever: {r:?}");
}
