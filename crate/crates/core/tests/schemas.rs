mod common;

use common::*;
use serde_json::Value;

fn schema(name: &str) -> jsonschema::Validator {
    let text = std::fs::read_to_string(repo_file(&format!("docs/schemas/{name}.schema.json"))).unwrap();
    jsonschema::validator_for(&serde_json::from_str(&text).unwrap()).expect("schema compiles")
}

fn assert_valid(v: &jsonschema::Validator, doc: &Value) {
    let errors: Vec<String> = v.iter_errors(doc).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:?}\n{doc:#}");
}

#[test]
fn flop_report_matches_schema() {
    let v = schema("flop_report");
    for args in [["3072", "768", "49", "8"], ["4", "4", "16", "16"]] {
        let text = ok(&["flops", "--cx", args[0], "--cy", args[1], "--len", args[2], "--rank", args[3], "--json"]);
        assert_valid(&v, &serde_json::from_str(&text).unwrap());
    }
    assert!(!v.is_valid(&serde_json::json!({"vanilla_bp": 1})));
}

#[test]
fn base_index_sets_match_schema() {
    let v = schema("base_index_set");
    for s in ["lp_l1:4", "lp_linf:3", "full"] {
        let text = ok(&["select", "--strategy", s, "--order", "8"]);
        assert_valid(&v, &serde_json::from_str(&text).unwrap());
    }
    assert!(!v.is_valid(&serde_json::json!({"strategy": "lp_l1:1", "n": 8, "indices": [[0, 0, 0]]})));
}

#[test]
fn bundled_configs_match_schema() {
    let v = schema("train_config");
    for name in ["exact", "full_rank", "sweep"] {
        let text = std::fs::read_to_string(repo_file(&format!("configs/{name}.json"))).unwrap();
        assert_valid(&v, &serde_json::from_str(&text).unwrap());
        lbp_wht::train::TrainConfig::from_json(&text).unwrap();
    }
    let default = serde_json::to_value(lbp_wht::train::TrainConfig::default()).unwrap();
    assert_valid(&v, &default);
    assert!(!v.is_valid(&serde_json::json!({"seed": 1, "epochs": 1, "batch_size": 1, "learning_rate": 0.1, "bp_mode": "lp_l1:0"})));
}

#[test]
fn train_outputs_match_schema() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.json");
    std::fs::write(
        &cfg,
        r#"{"seed": 2, "epochs": 2, "batch_size": 8, "learning_rate": 0.01,
            "layer_modes": ["lhe:3:2", "lora:2"], "model": {"hidden": [8, 8]},
            "dataset": {"n_samples": 40, "tokens": 16, "channels": 6, "classes": 2, "seed": 3, "difficulty": 1.0}}"#,
    )
    .unwrap();
    let out = dir.path().join("run");
    ok(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_valid(&schema("train_summary"), &summary);

    ok(&["sweep", "--config", cfg.to_str().unwrap(), "--ranks", "1,2", "--with-exact", "--out", out.to_str().unwrap()]);
    let sweep: Value = serde_json::from_str(&std::fs::read_to_string(out.join("sweep.json")).unwrap()).unwrap();
    assert_valid(&schema("sweep"), &sweep);
}
