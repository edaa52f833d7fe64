//! The batch runner used from code instead of the `kla` binary.
//!
//! cargo run --release --example run_config

use kla::runner::{run, Command, RunConfig};

fn main() -> kla::Result<()> {
    let out = std::env::temp_dir().join("kla-example-run");
    let cfg = RunConfig::from_json(&format!(
        r#"{{ "model": "iso_gauss", "d": 4, "h": "auto", "gamma": "auto", "eps": 0.1,
             "start": {{ "kind": "product_gaussian" }}, "out": {:?} }}"#,
        out.display().to_string()
    ))?;
    let outcome = run(Command::Plan, &cfg)?;
    for line in &outcome.summary {
        println!("{line}");
    }
    println!(
        "exit code {}, artifacts {:?} under {}",
        outcome.exit_code,
        outcome.artifacts,
        out.display()
    );
    Ok(())
}
