//! Regenerate configs/default.toml from the built-in desk-scale defaults.

use std::path::PathBuf;

fn main() {
    let cfg = seada::config::ExperimentConfig::desk_default(20260826, PathBuf::from("runs/default"));
    let path = PathBuf::from("configs/default.toml");
    seada::config::save_config(&path, &cfg).unwrap();
    println!("wrote {}", path.display());
}
