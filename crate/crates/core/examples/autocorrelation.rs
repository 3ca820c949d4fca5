//! Pearson autocorrelation by lag for each synthetic generator.

use powerformer::data::{self, Synthetic};

fn main() -> powerformer::Result<()> {
    let lags = [1, 2, 6, 12, 24, 48, 96, 192];
    print!("{:<14}", "series");
    for l in lags {
        print!("{l:>8}");
    }
    println!();
    for g in [Synthetic::SineMixture, Synthetic::Ar1, Synthetic::SineTrend, Synthetic::WhiteNoise] {
        let ds = g.generate(4000, 7);
        let curves = data::autocorrelation_by_lag(&ds, 192)?;
        for (name, c) in ds.channel_names.iter().zip(&curves) {
            print!("{:<14}", format!("{}/{name}", g.name()));
            for l in lags {
                print!("{:>8.3}", c[l]);
            }
            println!();
        }
    }
    Ok(())
}
