use rand::Rng;

use super::forward::forward_on_tape;
use super::loss::total_loss_on_tape;
use super::params::{init_model, DvtieParams};
use super::DvtieConfig;
use crate::numerics::{check_gradients_per_tensor, Tensor};
use crate::seed;
use crate::Result;

/// N=4, M=3, d_p=8, d′=4, G=2: small enough for finite differences over
/// every parameter.
pub fn tiny_config() -> DvtieConfig {
    DvtieConfig {
        n_visual: 4,
        n_text: 3,
        d_in_visual: 5,
        d_in_text: 6,
        d_model: 8,
        d_lowrank: 4,
        n_dhct_layers: 2,
        ..DvtieConfig::default()
    }
}

/// Relative error between tape gradients of the total loss and central
/// differences with step `h`, per named parameter of a freshly initialised
/// model on random inputs and targets.
pub fn model_gradient_errors(
    config: &DvtieConfig,
    seed: u64,
    h: f64,
) -> Result<Vec<(String, f64)>> {
    config.validate()?;
    let model = init_model(config, seed)?;
    let mut rng = seed::rng_for(seed, "gradcheck-inputs");
    let mut uniform = |rows: usize, cols: usize| {
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Tensor::matrix(rows, cols, data)
    };
    let visual = uniform(config.n_visual, config.d_in_visual)?;
    let text = uniform(config.n_text, config.d_in_text)?;
    let target: Vec<f64> = uniform(1, config.n_visual)?
        .data()
        .iter()
        .map(|v| 2.0 * (v + 1.0))
        .collect();

    let names = model.params.named();
    let params: Vec<Tensor> = names.iter().map(|(_, t)| (*t).clone()).collect();
    let n_layers = config.n_dhct_layers;
    let errors = check_gradients_per_tensor(
        |tape, vars| {
            let bound = DvtieParams::from_slots(n_layers, vars.iter().copied())
                .expect("slot count matches the model");
            let v = tape.constant(visual.clone());
            let t = tape.constant(text.clone());
            let raw = forward_on_tape(tape, &bound, config, v, t)?;
            total_loss_on_tape(tape, raw, &target, config.lambda)
        },
        &params,
        h,
    )?;
    Ok(names.into_iter().map(|(n, _)| n).zip(errors).collect())
}

/// Largest entry of [`model_gradient_errors`].
pub fn model_gradient_check(config: &DvtieConfig, seed: u64, h: f64) -> Result<f64> {
    Ok(model_gradient_errors(config, seed, h)?
        .into_iter()
        .fold(0.0, |m, (_, e)| m.max(e)))
}
