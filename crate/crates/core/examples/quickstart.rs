//! Simulate a trial, fit a cross-validated model and evaluate its rule.

use cfam_core::{fit_pipeline, generate, value_monte_carlo, Augmentation, InteractionKind, PipelineOptions, Rule, Scenario};

fn main() -> cfam_core::Result<()> {
    let scenario = Scenario::standard(500, 1.0, 0.0, InteractionKind::Nonlinear);
    let sim = generate::<f64>(&scenario)?;
    let opts = PipelineOptions {
        augmentation: Augmentation::Lasso,
        seed: 7,
        ..Default::default()
    };
    let fitted = fit_pipeline(&sim.data, &opts)?;
    let rule = Rule::new(&fitted.fit)?;
    let arms = rule.decide_all(&sim.data.covariates)?;

    println!("active components: {:?}", fitted.fit.active_set());
    println!("arm 1 assigned to {} of {} subjects", arms.iter().filter(|&&a| a == 1).count(), arms.len());
    let v = value_monte_carlo(&rule, &sim.model, 20_000, 11)?;
    println!("value {:.3}, optimal {:.3}, regret {:.3}", v.value, v.optimal_value, v.regret);
    Ok(())
}
