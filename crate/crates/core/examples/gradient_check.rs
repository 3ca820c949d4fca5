//! Checks every parameter gradient of a toy model against central finite
//! differences.

use powerformer::masks::MaskSpec;
use powerformer::model::{ModelConfig, Powerformer};
use powerformer::tensor::Tensor;

fn main() -> powerformer::Result<()> {
    let mut model = Powerformer::new(ModelConfig {
        seq_len: 32,
        pred_len: 4,
        patch_len: 8,
        stride: 4,
        layers: 2,
        embed_width: 8,
        heads: 2,
        ff_width: 16,
        dropout: 0.0,
        head_dropout: 0.0,
        mask: MaskSpec::weight_power_law(1.0).learnable(),
        banded_tau: None,
        seed: 1,
    })?;
    let windows: Vec<Vec<f64>> = (0..2).map(|c| (0..32).map(|t| ((t + 5 * c) as f64 * 0.4).sin()).collect()).collect();
    let target = Tensor::new(vec![2, 4], vec![0.1, -0.2, 0.3, 0.0, 0.5, 0.4, -0.1, 0.2])?;

    let loss = |m: &Powerformer| -> powerformer::Result<(f64, Vec<Vec<f64>>)> {
        let xs: Vec<&[f64]> = windows.iter().map(Vec::as_slice).collect();
        let mut g = m.build(&xs, None, false)?;
        let l = g.tape.mse(g.forecast, &target)?;
        let v = g.tape.value(l).item();
        g.tape.backward(l)?;
        Ok((v, g.param_grads()))
    };
    let (_, grads) = loss(&model)?;
    let h = 1e-5;
    let names: Vec<String> = model.params.names().iter().map(|s| s.to_string()).collect();
    for (k, name) in names.iter().enumerate() {
        let mut worst = 0.0f64;
        for e in 0..model.params.get(name).expect("listed").len() {
            let base = model.params.get(name).expect("listed").clone();
            let mut t = base.clone();
            t.data_mut()[e] += h;
            model.params.insert(name, t.clone());
            let lp = loss(&model)?.0;
            t.data_mut()[e] -= 2.0 * h;
            model.params.insert(name, t);
            let lm = loss(&model)?.0;
            model.params.insert(name, base);
            let n = (lp - lm) / (2.0 * h);
            let a = grads[k][e];
            worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(1e-6));
        }
        println!("{name:<28} max relative error {worst:.2e}");
    }
    Ok(())
}
