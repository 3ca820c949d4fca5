//! Runs a miniature version of the benchmark grid (two look-backs, four
//! horizons, two masks, three seeds) and prints the selected table.

use powerformer::data::Synthetic;
use powerformer::masks::MaskSpec;
use powerformer::model::ModelConfig;
use powerformer::training::{self, ProtocolGrid, TrainConfig};

fn main() -> powerformer::Result<()> {
    let ds = Synthetic::SineMixture.generate(8000, 9);
    let base = ModelConfig {
        layers: 1,
        embed_width: 8,
        heads: 2,
        ff_width: 16,
        ..ModelConfig::preset("etth1", 336, 96)?
    };
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 64,
        lr: 1e-3,
        window_stride: 64,
        eval_stride: 64,
        ..TrainConfig::default()
    };
    let grid = ProtocolGrid::new(vec![MaskSpec::none(), MaskSpec::weight_power_law(1.0)]);
    let mut done = 0;
    let records = training::run_grid(&ds, &base, &cfg, &grid, |_, r| {
        done += 1;
        eprintln!("run {done:>2}: T_seq={} T_pred={} {} seed {}", r.model.seq_len, r.model.pred_len, r.mask_label(), r.seed);
        Ok(())
    })?;
    let report = training::evaluate_protocol(&records, Some(&grid))?;
    training::write_table_csv(&report.table, std::io::stdout().lock())?;
    Ok(())
}
