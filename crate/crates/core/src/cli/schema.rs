//! Bundled JSON schemas for `topics.json` and `metrics.json`.

use serde_json::Value;

pub const TOPICS_SCHEMA: &str = include_str!("../../schemas/topics.schema.json");
pub const METRICS_SCHEMA: &str = include_str!("../../schemas/metrics.schema.json");

fn validate(schema: &str, instance: &Value) -> Result<(), Vec<String>> {
    let schema: Value = serde_json::from_str(schema).expect("bundled schema is JSON");
    let validator = jsonschema::validator_for(&schema).expect("bundled schema compiles");
    let errors: Vec<String> = validator
        .iter_errors(instance)
        .map(|e| format!("{}: {}", e.instance_path, e))
        .collect();
    if errors.is_empty() {
        Ok(())
    } else {
        Err(errors)
    }
}

pub fn validate_topics(instance: &Value) -> Result<(), Vec<String>> {
    validate(TOPICS_SCHEMA, instance)
}

pub fn validate_metrics(instance: &Value) -> Result<(), Vec<String>> {
    validate(METRICS_SCHEMA, instance)
}
