use multimatch_web::{long_tail_json, plwm_weight_json, run_json};

#[test]
fn long_tail_matches_core() {
    let v: serde_json::Value = serde_json::from_str(&long_tail_json(5, 1000, 100.0, 10).unwrap()).unwrap();
    assert_eq!(v["labeled"], serde_json::json!([1000, 316, 100, 32, 10]));
    assert_eq!(v["unlabeled"], serde_json::json!([10000, 3160, 1000, 320, 100]));
    assert_eq!(v["degenerate"], false);
    assert!(long_tail_json(1, 10, 100.0, 10).is_err());
}

#[test]
fn plwm_weight_cases() {
    let get = |a, i, j, f| -> serde_json::Value { serde_json::from_str(&plwm_weight_json(a, i, j, f, 3.0).unwrap()).unwrap() };
    let easy = get(true, true, true, true);
    assert_eq!(easy["category"], "useful_easy");
    assert_eq!(easy["weight"], 1.0);
    let hard = get(false, false, true, true);
    assert_eq!(hard["weight"], 3.0);
    assert_eq!(hard["label_from"], "j");
    assert_eq!(get(true, true, true, false)["weight"], 0.0);
    assert!(plwm_weight_json(true, true, true, true, 0.0).is_err());
}

#[test]
fn run_returns_one_curve_per_algorithm() {
    let cfg = "split.unlabeled_per_class=20\nsplit.test=40\nsplit.validation=8\ntrain.epochs=2\n";
    let v: serde_json::Value = serde_json::from_str(&run_json(cfg, "fixmatch, multimatch", 3).unwrap()).unwrap();
    let curves = v.as_array().unwrap();
    assert_eq!(curves.len(), 2);
    assert_eq!(curves[1]["algorithm"], "multimatch");
    assert_eq!(curves[1]["mask_rate"].as_array().unwrap().len(), 2);
    assert!(run_json("bogus=1", "multimatch", 1).is_err());
    assert!(run_json(cfg, "nope", 1).is_err());
}
