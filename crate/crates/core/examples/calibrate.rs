//! Convergence-oracle calibration: compares the trained PNC predictor with
//! the closed-form idealized-ensemble prediction for a grid of learning
//! rates and epoch counts, printing the max abs deviation over test points.
//!
//! Usage: cargo run -p pnc-core --example calibrate -- [n] [width_factor]

use pnc_core::{
    ensemble_closed_form, fit_pnc, generate_synthetic, Family, MeanInitSpec, NetConfig,
    NtkKernel, RngStream, Shift, SyntheticSpec, TrainConfig,
};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(64);
    let wf: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(32);

    let spec = SyntheticSpec::new(Family::SinSum, 2, 0.001);
    let stream = RngStream::new(20_240_817, 0);
    let data = generate_synthetic(&spec, n, &stream.substream(0)).unwrap();
    let test = generate_synthetic(&spec, 10, &stream.substream(1)).unwrap();

    let closed = ensemble_closed_form(NtkKernel::analytic(1), &data, 1e-10, Shift::Zero).unwrap();
    let targets: Vec<f64> = (0..test.n())
        .map(|i| closed.predict(&test.input_row(i)).unwrap())
        .collect();

    let net = NetConfig {
        input_dim: 2,
        depth: 1,
        width: wf * n,
        width_factor: Some(wf),
    };

    println!("n={n} width={} (factor {wf})", wf * n);
    println!("{:>6} {:>7} {:>12} {:>10}", "eta", "epochs", "max_dev", "secs");
    for eta in [5.0, 10.0, 20.0, 40.0] {
        for epochs in [250usize, 500, 1000, 2000] {
            let tc = TrainConfig::new(1e-10, eta, epochs);
            let t0 = std::time::Instant::now();
            match fit_pnc(&data, &net, &tc, &MeanInitSpec::Zero, &stream.substream(2)) {
                Ok(p) => {
                    let max_dev = (0..test.n())
                        .map(|i| (p.predict(&test.input_row(i)).unwrap() - targets[i]).abs())
                        .fold(0.0f64, f64::max);
                    println!(
                        "{eta:>6} {epochs:>7} {max_dev:>12.3e} {:>10.2}",
                        t0.elapsed().as_secs_f64()
                    );
                }
                Err(e) => println!("{eta:>6} {epochs:>7} diverged: {e}"),
            }
        }
    }
}
