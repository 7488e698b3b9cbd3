//! Generates the three synthetic anomaly kinds, writes one as CSV and reads
//! it back.
//!
//! ```bash
//! cargo run --release --example synth_dataset
//! ```

use drsmt::data::{load_csv, synth_generate, AnomalyKind, SynthConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for kind in [
        AnomalyKind::MeanShift,
        AnomalyKind::VarianceBurst,
        AnomalyKind::CorrelatedFault,
    ] {
        let cfg = SynthConfig {
            kind,
            timesteps: 5_000,
            ..SynthConfig::default()
        };
        let table = synth_generate(&cfg)?;
        let mean = |lab: u8| {
            let rows: Vec<usize> = (0..table.timesteps()).filter(|&t| table.labels()[t] == lab).collect();
            rows.iter().map(|&t| table.value(t, 0).abs()).sum::<f64>() / rows.len() as f64
        };
        println!(
            "{kind:?}: {} x {}, {} anomalous rows, mean |sensor_0| normal {:.3} / anomalous {:.3}",
            table.timesteps(),
            table.features(),
            table.anomaly_count(),
            mean(0),
            mean(1)
        );
    }

    let table = synth_generate(&SynthConfig::default())?;
    let dir = std::env::temp_dir().join("drsmt_synth_example");
    std::fs::create_dir_all(&dir)?;
    let (data, labels) = (dir.join("data.csv"), dir.join("labels.csv"));
    table.write_csv(&data, &labels)?;
    let back = load_csv(&data, Some(&labels))?;
    println!(
        "wrote {} and read it back: identical = {}",
        data.display(),
        back == table
    );
    Ok(())
}
