//! Designs the digital low-pass filters behind the Butterworth masks and
//! prints their gain as a function of time lag.

use powerformer::masks::butterworth::{self, GainCurve};

fn main() -> powerformer::Result<()> {
    for order in [1, 2] {
        let f = butterworth::design_lowpass(order, butterworth::CUTOFF)?;
        println!("order {order}: b = {:?}", f.b);
        println!("         a = {:?}", f.a);
    }
    println!();

    let critical_time = 10.0;
    let cut = butterworth::cutoff_lag(critical_time);
    println!("critical time {critical_time}: half-power lag {cut:.3}");
    println!("{:>8} {:>12} {:>12}", "lag", "order 1", "order 2");
    let c1 = GainCurve::new(1, critical_time)?;
    let c2 = GainCurve::new(2, critical_time)?;
    for lag in [0.0, 1.0, 2.0, 5.0, cut, 15.0, 20.0, 40.0, 80.0] {
        println!("{lag:>8.2} {:>12.5} {:>12.5}", c1.interpolate(lag), c2.interpolate(lag));
    }
    Ok(())
}
