//! MAKLA keeps the Gaussian target exactly; UKLA's x-variance drifts to
//! 1 − h²/4 on U = |x|²/2.
//!
//! cargo run --release --example stationarity

use kla::diagnostics::stationarity_and_bias;
use kla::TargetModel;

fn main() -> kla::Result<()> {
    let model = TargetModel::isotropic_gaussian(4, 1.0)?;
    let r = stationarity_and_bias(&model, 10.0, &[0.05, 0.1, 0.2, 0.4], 2_000_000, 1000, 8)?;
    println!(
        "MAKLA within 3 stderr at every h: {}; UKLA deviation increasing: {}",
        r.makla_passed, r.ukla_increasing
    );
    for row in &r.rows {
        println!(
            "h = {:<5} MAKLA rejection {:.2e} | UKLA x-variance {:.5} ± {:.1e} (1 - h^2/4 = {:.5}), v-variance {:.5}",
            row.h,
            row.makla_rejection_rate,
            row.ukla_x_var,
            row.ukla_x_var_stderr,
            1.0 - row.h * row.h / 4.0,
            row.ukla_v_var
        );
    }
    Ok(())
}
