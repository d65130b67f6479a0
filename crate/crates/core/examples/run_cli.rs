//! Drives the batch front end in-process: synthesize, analyze, simulate and
//! compare from a JSON configuration, as `pemadm` does on the command line.
//!
//! ```text
//! cargo run --example run_cli -- [config.json]
//! ```

use pemadm::cli;

fn main() {
    let config = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/examples/configs/car_following.json").to_string());
    let out = std::env::temp_dir().join("pemadm-example");
    let out = out.to_string_lossy();
    let common = ["--config", config.as_str(), "--out", &out, "--trials", "50"];
    for cmd in [&["synthesize", "refined"][..], &["analyze"], &["compare", "--run"]] {
        let args: Vec<&str> = std::iter::once("pemadm").chain(cmd.iter().copied()).chain(common).collect();
        println!("$ {}", args.join(" "));
        let code = cli::run(&args);
        println!("exit {code}\n");
    }
}
