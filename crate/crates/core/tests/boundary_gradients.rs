//! Boundary gradients against central differences of the frozen-index
//! surrogate, plus descent and feasibility properties of the Adam step.

mod common;

use common::{case, check, frozen, surrogate_loss};
use harmoq::refiner::{
    boundary_gradients, clip_gradient, refine_step, AdamState, LayerProblem, RefinerConfig, ResidualForm,
};
use harmoq::scale::BoundarySet;
use proptest::prelude::*;

#[test]
fn gradients_match_finite_differences_on_random_configs() {
    for form in [ResidualForm::FirstOrder, ResidualForm::Exact] {
        for t in 0..100u64 {
            let c = case(10_000 + 17 * t);
            let err = check(&c, form);
            assert!(err < 1e-5, "{form:?} config {t}: relative error {err:e}");
        }
    }
}

#[test]
fn small_step_does_not_increase_surrogate() {
    let cfg = RefinerConfig { lr_init: 1e-5, lr_final: 1e-5, warmup_steps: 0, ..RefinerConfig::default() };
    for t in 0..50u64 {
        let c = case(50_000 + 13 * t);
        let problem = LayerProblem::new(&c.w, &c.x).with_reference(&c.reference).with_act_inputs(&c.act);
        let lg = boundary_gradients(&problem, c.s, &c.theta, c.bits).unwrap();

        let frame = c.theta.to_scaled_frame(c.s);
        let ia = frozen(&c.act.scaled(1.0 / c.s), &frame.activation_config(c.bits.act).unwrap());
        let iw = frozen(&c.w.scaled(c.s), &frame.weight_config(c.bits.weight).unwrap());
        let (_, moved) = refine_step(AdamState::default(), &frame, lg.grad, &cfg, 0);
        let before = surrogate_loss(&c, ResidualForm::FirstOrder, frame.to_array(), &ia, &iw);
        let after = surrogate_loss(&c, ResidualForm::FirstOrder, moved.to_array(), &ia, &iw);
        assert!(after <= before + 1e-12 * before, "config {t}: {before} -> {after}");
    }
}

fn bounds() -> impl Strategy<Value = [f64; 4]> {
    prop::array::uniform4(-5.0f64..5.0)
}

proptest! {
    #[test]
    fn refine_step_output_is_feasible(p in bounds(), g in prop::array::uniform4(-1e3f64..1e3), step in 0usize..5000) {
        let theta = BoundarySet::from_array(p).project();
        let (_, next) = refine_step(AdamState::default(), &theta, g, &RefinerConfig::default(), step);
        prop_assert!(next.is_feasible());
        prop_assert!(next.beta_x - next.alpha_x >= 0.01 - 1e-12);
        prop_assert!(next.beta_w - next.alpha_w >= 0.01 - 1e-12);
    }

    #[test]
    fn clipped_norm_is_bounded(g in prop::array::uniform4(-1e6f64..1e6), max in 1e-3f64..10.0) {
        let c = clip_gradient(g, max);
        prop_assert!(c.iter().map(|v| v * v).sum::<f64>().sqrt() <= max + 1e-12);
    }
}
