//! Prints the lag profile `f(Δt)` and the implied weight factor of every
//! mask family, and writes one CSV per family.

use std::fs::File;

use powerformer::masks::{self, MaskSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let size = 24;
    let specs = [
        MaskSpec::none(),
        MaskSpec::weight_power_law(0.5),
        MaskSpec::weight_power_law(1.0),
        MaskSpec::similarity_power_law(1.0),
        MaskSpec::butterworth(1, 10.0),
        MaskSpec::butterworth(2, 10.0),
    ];
    let out = std::env::temp_dir().join("powerformer_masks");
    std::fs::create_dir_all(&out)?;

    print!("{:>6}", "lag");
    for s in &specs {
        print!("{:>12}", s.label());
    }
    println!();
    let profiles: Vec<Vec<f64>> = specs.iter().map(|s| masks::lag_profile(s, size)).collect::<Result<_, _>>()?;
    for lag in [0, 1, 2, 4, 8, 12, 16, 23] {
        print!("{lag:>6}");
        for p in &profiles {
            print!("{:>12.4}", p[lag].exp());
        }
        println!();
    }

    for s in &specs {
        let path = out.join(format!("{}.csv", s.label()));
        masks::write_profile_csv(s, size, File::create(&path)?)?;
    }
    println!("profiles written to {}", out.display());
    Ok(())
}
