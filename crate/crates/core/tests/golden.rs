//! Regression pin on a fixed-seed forward pass.
//!
//! Regenerate the recorded output with `TINYDETR_BLESS=1 cargo test -p tinydetr-core --test golden`.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use tinydetr::numerics::nn::Session;
use tinydetr::pipeline::scene::gen_scene;
use tinydetr::{Model, ModelConfig, SceneConfig};

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct Golden {
    selected: Vec<usize>,
    /// Per head: flattened probabilities then flattened boxes.
    probs: Vec<Vec<f64>>,
    boxes: Vec<Vec<f64>>,
}

fn path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/forward.json")
}

fn compute() -> Golden {
    let cfg = ModelConfig {
        channels: 16,
        heads: 2,
        queries: 12,
        ..Default::default()
    };
    let model = Model::new(cfg, 2024).unwrap();
    let scene = gen_scene(&SceneConfig { seed: 31, ..Default::default() }, 4);
    let mut s = Session::frozen(&model.store);
    let out = model.forward(&mut s, &scene.to_tensor()).unwrap();
    Golden {
        selected: out.selected.clone(),
        probs: out.heads.iter().map(|h| s.g.value(h.probs).data().to_vec()).collect(),
        boxes: out.heads.iter().map(|h| s.g.value(h.boxes).data().to_vec()).collect(),
    }
}

#[test]
fn forward_matches_recorded_output() {
    let got = compute();
    if std::env::var("TINYDETR_BLESS").is_ok_and(|v| v == "1") {
        let text = serde_json::to_string_pretty(&got).unwrap();
        std::fs::write(path(), text + "\n").unwrap();
        return;
    }
    let text = std::fs::read_to_string(path()).expect("golden file present; bless with TINYDETR_BLESS=1");
    let want: Golden = serde_json::from_str(&text).unwrap();
    assert_eq!(got.selected, want.selected);
    assert_eq!(got.probs.len(), want.probs.len());
    for (g, w) in got.probs.iter().chain(&got.boxes).zip(want.probs.iter().chain(&want.boxes)) {
        assert_eq!(g.len(), w.len());
        for (a, b) in g.iter().zip(w) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }
}
