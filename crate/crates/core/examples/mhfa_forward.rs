//! Pools one utterance with MHFA and inspects the layer weights and attention maps.

use sasv::mhfa::{init_mhfa, mhfa_forward};
use sasv::numerics::softmax;
use sasv::synthgen::{synth_features, SynthConfig};
use sasv::{MhfaConfig, Rng};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let synth = SynthConfig { num_speakers: 1, utts_per_speaker: 1, ..SynthConfig::default() };
    let (entry, x) = synth_features(&synth)?.remove(0);

    let cfg = MhfaConfig {
        num_heads: 4,
        compression_dim: 16,
        embed_dim: 32,
        ..MhfaConfig::new(x.num_layers(), x.dim())
    };
    let params = init_mhfa(&cfg, &mut Rng::new(7))?;
    let (emb, cache) = mhfa_forward(&x, &params, &cfg, true)?;
    let cache = cache.expect("training forward keeps its cache");

    println!("utterance {} -> embedding of {} values", entry.utt_id, emb.0.len());
    println!("key layer weights   {:.3?}", softmax(&params.layer_keys)?);
    println!("value layer weights {:.3?}", softmax(&params.layer_values)?);
    for h in 0..cfg.num_heads {
        let a = cache.attention.column(h);
        let peak = a.iter().cloned().fold(f64::MIN, f64::max);
        println!("head {h}: attention sums to {:.6}, peak {:.3}", a.iter().sum::<f64>(), peak);
    }
    Ok(())
}
