use dsmlr_core::data::synthetic_dataset;
use dsmlr_core::serial::{run_batch_oracle, OracleConfig};
use dsmlr_core::{objective_l1, run_async, Hyperparams};

fn main() {
    let data = synthetic_dataset(200, 20, 10, 42);
    for lambda in [1e-2, 3e-2] {
        let h0 = Hyperparams::new(lambda, 0.0).unwrap();
        let o = run_batch_oracle(&data, &h0, &OracleConfig::default()).unwrap();
        let lstar = o.objective;
        println!("lambda={lambda}: L*={lstar:.9} oracle iters={}", o.iterations);
        for eta0 in [0.1, 0.15, 0.2] {
            let h = Hyperparams::new(lambda, eta0).unwrap();
            for p in [1usize, 2, 4] {
                let mut worst = f64::NEG_INFINITY;
                for rep in 0..6 {
                    match run_async(&data, p, 100, &h, 11 + rep) {
                        Ok(out) => {
                            let exact = objective_l1(&out.weights, &data, &h).unwrap();
                            worst = worst.max((exact - lstar) / lstar.abs());
                        }
                        Err(_) => { worst = f64::INFINITY; break; }
                    }
                }
                println!("  lambda={lambda} eta0={eta0} P={p}: worst {worst:.3e}");
            }
        }
    }
}
