//! Train and evaluate a surrogate on a synthetic feeder.
//!
//! ```text
//! cargo run --release -p fpsurrogate --example desk_run -- [buses] [train] [epochs] [feeder_seed]
//! ```

use fpsurrogate::datagen::{generate_dataset, random_pv_locations, ScenarioConfig};
use fpsurrogate::evaluate::evaluate;
use fpsurrogate::network::{derive_operators, generate_synthetic_feeder};
use fpsurrogate::trainer::{train_with_observer, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<u64> = std::env::args()
        .skip(1)
        .map(|a| a.parse())
        .collect::<Result<_, _>>()?;
    let arg = |i: usize, default: u64| args.get(i).copied().unwrap_or(default);
    let (buses, n_train, epochs, seed) = (
        arg(0, 13) as usize,
        arg(1, 40) as usize,
        arg(2, 7000) as usize,
        arg(3, 1),
    );

    let feeder = generate_synthetic_feeder(buses, seed)?;
    let op = derive_operators(&feeder)?;
    let scenario = ScenarioConfig {
        n_train,
        n_test: 1000,
        pv_buses: random_pv_locations(buses, 2, seed),
        seed,
        ..Default::default()
    };
    let mut scenario = scenario;
    if let Ok(v) = std::env::var("VARIATION") {
        scenario.load_variation = serde_json::from_str(&format!("\"{v}\""))?;
    }
    if let Ok(v) = std::env::var("LOAD") {
        let parts: Vec<f64> = v.split(',').map(|p| p.parse()).collect::<Result<_, _>>()?;
        scenario.load_range = [parts[0], parts[1]];
    }
    if let Ok(v) = std::env::var("NOMINAL") {
        let parts: Vec<f64> = v.split(',').map(|p| p.parse()).collect::<Result<_, _>>()?;
        scenario.nominal_load = num_complex::Complex64::new(parts[0], parts[1]);
    }
    if let Ok(v) = std::env::var("DELTA") {
        scenario.delta_fraction = v.parse()?;
    }
    if let Ok(v) = std::env::var("PV") {
        scenario.pv_buses = random_pv_locations(buses, v.parse()?, seed);
    }
    let (train, test) = generate_dataset(&feeder, &scenario)?;
    let mut config = TrainConfig {
        epochs,
        seed,
        ..Default::default()
    };
    if let Ok(v) = std::env::var("LR_EVERY") {
        config.lr_decay_every = v.parse()?;
    }
    let every = (epochs / 20).max(1);
    let (params, log) = train_with_observer(&train, &config, Some(&op), |r| {
        if r.epoch % every == 0 || r.epoch == 1 {
            println!(
                "epoch {:5}  loss {:.3e}  w_err {:.3e}  lr {:.1e}  nonconv {}  {:.1}s",
                r.epoch,
                r.mean_loss,
                r.w_error.unwrap_or(f64::NAN),
                r.lr,
                r.nonconverged_count,
                r.seconds
            );
        }
    })?;
    let report = evaluate(&params, &test)?;
    let first = log.records.first().unwrap().mean_loss;
    let last = log.records.last().unwrap().mean_loss;
    println!("loss ratio {:.3e}", last / first);
    println!(
        "test rmse |v| {:.4e}  angle {:.4e}  complex {:.4e}  {:.3} ms/sample",
        report.rmse_magnitude, report.rmse_angle, report.mean_complex_rmse, report.mean_predict_ms
    );
    Ok(())
}
