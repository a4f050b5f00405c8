use crossmae_web::{mask_plan_json, normalize_patches_json, pe_table_values};
use serde_json::Value;

#[test]
fn mask_plan_partitions_tokens() {
    let v: Value = serde_json::from_str(&mask_plan_json("isometric", 16, 0.75, 3).unwrap()).unwrap();
    assert_eq!(v["segment"], 4);
    let mut all: Vec<u64> = v["masked"]
        .as_array()
        .unwrap()
        .iter()
        .chain(v["visible"].as_array().unwrap())
        .map(|x| x.as_u64().unwrap())
        .collect();
    assert_eq!(v["masked"].as_array().unwrap().len(), 12);
    all.sort_unstable();
    assert_eq!(all, (0..16).collect::<Vec<u64>>());

    let c: Value = serde_json::from_str(&mask_plan_json("continuous", 8, 0.5, 0).unwrap()).unwrap();
    assert_eq!(c["masked"], serde_json::json!([4, 5, 6, 7]));
    assert_eq!(c["segment"], Value::Null);
}

#[test]
fn bad_inputs_are_messages() {
    assert!(mask_plan_json("diagonal", 16, 0.75, 0).unwrap_err().contains("diagonal"));
    assert!(mask_plan_json("isometric", 10, 0.75, 0).is_err());
    assert!(pe_table_values(4, 3).is_err());
    assert!(normalize_patches_json(&[1.0, 2.0, 3.0], 2).is_err());
    assert!(normalize_patches_json(&[], 2).is_err());
}

#[test]
fn pe_first_row() {
    let t = pe_table_values(3, 4).unwrap();
    assert_eq!(t.len(), 12);
    assert_eq!(&t[..4], &[0.0, 1.0, 0.0, 1.0]);
    assert!((t[4] - 1f64.sin()).abs() < 1e-15);
}

#[test]
fn patches_are_normalized() {
    let v: Value = serde_json::from_str(&normalize_patches_json(&[1.0, 3.0, 1.0, 3.0], 2).unwrap()).unwrap();
    assert_eq!(v["mean"], 2.0);
    assert_eq!(v["std"], 1.0);
    assert_eq!(v["patches"], serde_json::json!([[-1.0, 1.0], [-1.0, 1.0]]));
    let flat: Value = serde_json::from_str(&normalize_patches_json(&[5.0; 4], 4).unwrap()).unwrap();
    assert_eq!(flat["normalized"], serde_json::json!([0.0, 0.0, 0.0, 0.0]));
}
