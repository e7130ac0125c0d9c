//! Trains a speaker embedder with AAM-softmax and scores trials by cosine, raw and s-normed.

use sasv::losses::{cosine_score, CohortEmbeddings};
use sasv::metrics::eer_from_scores;
use sasv::synthgen::{synth_features, SynthConfig};
use sasv::trainer::{train, Corpus};
use sasv::{MhfaConfig, Task, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let synth = SynthConfig { num_speakers: 10, utts_per_speaker: 16, num_frames: 16, dim: 16, seed: 3, ..SynthConfig::default() };
    let corpus = Corpus::from_pairs(synth_features(&synth)?);
    let mhfa = MhfaConfig { num_heads: 4, compression_dim: 16, embed_dim: 16, ..MhfaConfig::new(synth.num_layers, synth.dim) };
    let cfg = TrainConfig {
        task: Task::AsvAam,
        max_epochs: 4,
        batch_size: 16,
        base_lr: 1e-2,
        final_lr: 2e-4,
        warmup_epochs: 1,
        dev_fraction: 0.34,
        ..TrainConfig::default()
    };
    let out = train(&corpus, &cfg, &mhfa)?;
    println!("trained {} epochs, best {}", out.log.len(), out.best_epoch);

    let bona: Vec<usize> = (0..corpus.len()).filter(|&i| !corpus.entries[i].spoof).collect();
    let emb = |i: usize| out.model.embed(&corpus.features[i]).map(|e| e.0);
    let cohort = CohortEmbeddings::new(out.split.train.iter().map(|&i| emb(i)).collect::<Result<_, _>>()?, Some(20))?;

    let dev: Vec<usize> = out.split.dev.clone();
    let (mut tar, mut non, mut tar_n, mut non_n) = (vec![], vec![], vec![], vec![]);
    for (k, &a) in dev.iter().enumerate() {
        for &b in &dev[k + 1..] {
            let (ea, eb) = (emb(a)?, emb(b)?);
            let raw = cosine_score(&ea, &eb)?;
            let norm = cohort.normalized_score(&ea, &eb)?;
            if corpus.entries[a].speaker_id == corpus.entries[b].speaker_id {
                tar.push(raw);
                tar_n.push(norm);
            } else {
                non.push(raw);
                non_n.push(norm);
            }
        }
    }
    println!("{} bona fide utterances, {} target and {} nontarget dev pairs", bona.len(), tar.len(), non.len());
    println!("EER raw cosine {:.2}%, s-norm {:.2}%", 100.0 * eer_from_scores(&tar, &non)?, 100.0 * eer_from_scores(&tar_n, &non_n)?);
    Ok(())
}
