//! Writes layered features, trials and scores to disk and reads them back.

use sasv::protocol::{
    parse_trials, read_features, read_scores, write_features, write_scores, write_trials, Trial,
};
use sasv::{LayeredFeatures, ScoreSet, TrialLabel, TrialSet};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join("sasv_feature_io");
    std::fs::create_dir_all(&dir)?;

    let x = LayeredFeatures::new(2, 3, 4, (0..24).map(|i| i as f64 / 8.0).collect())?;
    let path = dir.join("u0.lft");
    write_features(&path, &x)?;
    let back = read_features(&path)?;
    println!("{}: {} layers x {} frames x {} dims, equal {}", path.display(), back.num_layers(), back.num_frames(), back.dim(), back == x);

    let mut trials = TrialSet::new();
    for (i, label) in [TrialLabel::Target, TrialLabel::Nontarget, TrialLabel::Spoof].into_iter().enumerate() {
        trials.push(Trial {
            trial_id: format!("t{i}"),
            enroll_id: "spk0_enroll".into(),
            test_id: format!("u{i}"),
            label,
        })?;
    }
    write_trials(dir.join("trials.txt"), &trials)?;
    let trials = parse_trials(dir.join("trials.txt"))?;

    let mut scores = ScoreSet::new("demo");
    for (t, s) in trials.trials().iter().zip([2.5, -0.3, -1.7]) {
        scores.insert(&t.trial_id, s)?;
    }
    write_scores(dir.join("demo.scores"), &scores)?;
    for (id, s) in read_scores(dir.join("demo.scores"))?.iter() {
        let label = trials.get(id).map(|t| t.label.as_str()).unwrap_or("?");
        println!("{id} {label} {s}");
    }
    Ok(())
}
