//! Regenerates `data/synthetic_nu30.csv`: Logit lane shares with ν = 30 km/h
//! at two stations (two and three lanes), no noise.

use std::fs::File;
use std::path::PathBuf;

use logit_lanes::estimation::{synthetic_samples, write_samples, SyntheticConfig};

fn main() -> logit_lanes::Result<()> {
    let mut samples = synthetic_samples(&SyntheticConfig {
        station: "S2".into(),
        samples: 300,
        ..SyntheticConfig::new(30.0, 2024)
    })?;
    samples.extend(synthetic_samples(&SyntheticConfig {
        station: "S3".into(),
        lanes: 3,
        samples: 300,
        ..SyntheticConfig::new(30.0, 2025)
    })?);
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/synthetic_nu30.csv");
    write_samples(File::create(&path)?, &samples)?;
    println!("wrote {} samples to {}", samples.len(), path.display());
    Ok(())
}
