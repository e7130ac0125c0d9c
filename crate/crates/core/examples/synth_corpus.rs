//! Generates a small synthetic corpus and shows where the spoof artifact lives.

use sasv::synthgen::{synth_corpus, SynthConfig};

fn layer_energy(x: &sasv::LayeredFeatures, l: usize) -> f64 {
    let v = x.layer(l);
    v.iter().map(|a| a * a).sum::<f64>() / v.len() as f64
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = SynthConfig {
        num_speakers: 8,
        utts_per_speaker: 10,
        spoof_artifact_scale: 2.0,
        seed: 1,
        ..SynthConfig::default()
    };
    let dir = std::env::temp_dir().join("sasv_synth");
    let manifest = synth_corpus(&cfg, &dir)?;
    println!("{} utterances ({} spoofed) under {}", manifest.len(), manifest.spoof_count(), dir.display());

    let mut energy = vec![[0.0; 2]; cfg.num_layers];
    let mut count = [0usize; 2];
    for e in &manifest.entries {
        let x = manifest.load_features(e)?;
        let k = e.spoof as usize;
        count[k] += 1;
        for (l, row) in energy.iter_mut().enumerate() {
            row[k] += layer_energy(&x, l);
        }
    }
    println!("layer  bona_fide  spoof");
    for (l, [b, s]) in energy.iter().enumerate() {
        let mark = if l == cfg.artifact_layer { "  <- artifact" } else { "" };
        println!("{l:>5}  {:>9.3}  {:>5.3}{mark}", b / count[0] as f64, s / count[1] as f64);
    }
    Ok(())
}
