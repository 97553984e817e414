//! Finite-difference check of the full flow loss on a small model, in f64.
//!
//! ```text
//! cargo run --release --example gradient_check -- [probes]
//! ```

use tacit::flow::flow_loss;
use tacit::image::Image;
use tacit::maze::generate_pair;
use tacit::model::{init_params, ModelConfig, ModelParams, ParamTree};
use tacit::tensor::{finite_diff_check, GradCheckConfig, Tensor};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let probes: usize = std::env::args().nth(1).map_or(Ok(40), |s| s.parse())?;
    let cfg = ModelConfig {
        resolution: 16,
        patch_size: 4,
        hidden_dim: 32,
        blocks: 2,
        heads: 2,
        head_dim: 16,
        mlp_dim: 128,
        time_freq_dim: 16,
    };
    let mut params = init_params::<f64>(&cfg, 0)?;
    // Move away from the zero-initialized layers so every gradient is nonzero.
    params.perturb(0.05, 1);

    let pairs: Vec<_> = (0..2)
        .map(|s| generate_pair(11, s, 16))
        .collect::<Result<_, _>>()?;
    let x0: Vec<Image<f64>> = pairs.iter().map(|p| p.input.to_float()).collect();
    let x1: Vec<Image<f64>> = pairs.iter().map(|p| p.target.to_float()).collect();
    let ts = [0.25, 0.75];

    let (loss, grads) = flow_loss(&params, &x0, &x1, &ts, true)?;
    let grads = grads.expect("gradients requested");
    let flat: Vec<Tensor<f64>> = params.tree.flat().into_iter().cloned().collect();
    let forward = |ps: &[Tensor<f64>]| {
        let model = ModelParams {
            config: cfg,
            pos_embed: params.pos_embed.clone(),
            tree: ParamTree::from_flat(&cfg, ps.to_vec()).unwrap(),
        };
        flow_loss(&model, &x0, &x1, &ts, false).unwrap().0
    };
    let report = finite_diff_check(
        forward,
        &flat,
        &grads,
        GradCheckConfig {
            probes,
            ..GradCheckConfig::default()
        },
    )?;
    let names: Vec<String> = cfg.layout().into_iter().map(|(n, _)| n).collect();
    println!("loss {loss:.6}");
    for p in &report.probes {
        println!(
            "{:<24} [{:>5}] analytic {:>12.4e} numeric {:>12.4e} rel {:.2e}",
            names[p.tensor], p.index, p.analytic, p.numeric, p.rel_error
        );
    }
    println!("max relative error {:.2e}", report.max_rel_error);
    Ok(())
}
