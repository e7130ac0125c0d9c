//! Trains a small countermeasure with BCE and DSU, then scores its dev split.

use sasv::dsu::DsuConfig;
use sasv::metrics::eer_from_scores;
use sasv::numerics::softmax;
use sasv::synthgen::{synth_features, SynthConfig};
use sasv::trainer::{train_with, Corpus, TRAIN_LOG_HEADER};
use sasv::{MhfaConfig, Task, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let synth = SynthConfig { num_speakers: 12, utts_per_speaker: 16, num_frames: 16, dim: 16, seed: 2, ..SynthConfig::default() };
    let corpus = Corpus::from_pairs(synth_features(&synth)?);
    let mhfa = MhfaConfig { num_heads: 4, compression_dim: 16, embed_dim: 16, ..MhfaConfig::new(synth.num_layers, synth.dim) };
    let cfg = TrainConfig {
        task: Task::CmBce,
        max_epochs: 4,
        batch_size: 16,
        base_lr: 1e-2,
        final_lr: 2e-4,
        warmup_epochs: 1,
        dsu: Some(DsuConfig::default()),
        ..TrainConfig::default()
    };

    println!("{TRAIN_LOG_HEADER}");
    let out = train_with(&corpus, &cfg, &mhfa, |log| println!("{log}"))?;
    println!("best epoch {}", out.best_epoch);

    let (mut bona, mut spoof) = (vec![], vec![]);
    for &i in &out.split.dev {
        let s = out.model.cm_logit(&corpus.features[i])?;
        if corpus.entries[i].spoof { spoof.push(s) } else { bona.push(s) }
    }
    println!("dev EER {:.2}%", 100.0 * eer_from_scores(&bona, &spoof)?);
    let w = softmax(&out.model.params.layer_values)?;
    println!("value weights {w:.3?} (artifact layer {})", synth.artifact_layer);
    Ok(())
}
