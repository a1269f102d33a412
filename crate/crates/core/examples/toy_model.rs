//! Writes a seeded random toy model and a matching vocab map.
//!
//! ```text
//! cargo run -p overwhelm-core --example toy_model -- OUT.ovwm [SEED] [--no-rope]
//! ```
//!
//! The vocab map goes next to the model as `OUT.vocab`, with placeholder
//! tokens `tok0`, `tok1`, ….

use std::fs::File;
use std::path::PathBuf;
use std::process::ExitCode;

use overwhelm_core::format::write_model;
use overwhelm_core::toy::{random_model, ToyConfig};

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let rope = !args.iter().any(|a| a == "--no-rope");
    let positional: Vec<&String> = args.iter().filter(|a| !a.starts_with("--")).collect();
    let Some(out) = positional.first().map(PathBuf::from) else {
        eprintln!("usage: toy_model OUT.ovwm [SEED] [--no-rope]");
        return ExitCode::from(2);
    };
    let seed: u64 = match positional.get(1).map(|s| s.parse()) {
        None => 0,
        Some(Ok(s)) => s,
        Some(Err(_)) => {
            eprintln!("seed must be an unsigned integer");
            return ExitCode::from(2);
        }
    };
    let cfg = ToyConfig { rope, ..ToyConfig::default() };
    let weights = random_model(&cfg, seed);
    let written = File::create(&out)
        .map_err(overwhelm_core::Error::from)
        .and_then(|f| write_model(&weights, f));
    let vocab: String = (0..cfg.d_vocab).map(|t| format!("tok{t}\n")).collect();
    let vocab_path = out.with_extension("vocab");
    match written.and_then(|n| std::fs::write(&vocab_path, vocab).map(|_| n).map_err(Into::into)) {
        Ok(n) => {
            println!("wrote {} ({n} bytes) and {}", out.display(), vocab_path.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
