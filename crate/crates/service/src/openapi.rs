use serde_json::{json, Value};

fn body(schema: Value) -> Value {
    json!({ "required": true, "content": { "application/json": { "schema": schema } } })
}

fn reply(description: &str) -> Value {
    json!({ "description": description })
}

/// OpenAPI 3.0 description of the HTTP interface.
pub fn document() -> Value {
    let metrics = json!({
        "type": "object",
        "properties": {
            "accuracy": { "type": "number" },
            "per_class_sensitivity": { "type": "object", "additionalProperties": { "type": "number" } },
            "avg_sensitivity": { "type": "number" },
            "avg_jaccard": { "type": "number", "nullable": true },
            "jaccard_sd": { "type": "number", "nullable": true },
            "n_samples": { "type": "integer" },
            "n_explained": { "type": "integer" },
            "threshold_used": { "type": "number" }
        }
    });
    json!({
        "openapi": "3.0.3",
        "info": { "title": "saliencytune feedback service", "version": env!("CARGO_PKG_VERSION") },
        "components": { "schemas": { "MetricsReport": metrics } },
        "paths": {
            "/predict": { "post": {
                "summary": "Classify a catalog sample or an uploaded image and explain the prediction",
                "requestBody": body(json!({ "type": "object", "properties": {
                    "sample_id": { "type": "string" },
                    "image": { "type": "string", "format": "byte", "description": "base64 PNG or JPEG" }
                }})),
                "responses": { "200": reply("prediction with saliency and mask PNG paths"),
                               "404": reply("unknown sample"), "422": reply("malformed image") }
            }},
            "/feedback": { "post": {
                "summary": "Record a label and/or mask correction",
                "requestBody": body(json!({ "type": "object", "required": ["sample_id"], "properties": {
                    "sample_id": { "type": "string" },
                    "corrected_label": { "type": "string" },
                    "corrected_mask": { "type": "string", "format": "byte", "description": "base64 binary PNG at image resolution" }
                }})),
                "responses": { "201": reply("feedback id"), "404": reply("unknown sample"),
                               "422": reply("no correction, unknown class or non-binary mask") }
            }},
            "/finetune": { "post": {
                "summary": "Queue a fine-tune job over pending or listed feedback",
                "requestBody": body(json!({ "type": "object", "properties": {
                    "feedback": { "oneOf": [
                        { "type": "array", "items": { "type": "integer" } },
                        { "type": "string", "enum": ["all-pending"] } ] },
                    "config": { "type": "object", "description": "training config overrides" }
                }})),
                "responses": { "202": reply("job id"), "409": reply("a job is already running"),
                               "422": reply("no pending feedback or invalid config") }
            }},
            "/jobs/{id}": { "get": {
                "summary": "Job status with before/after held-out metrics",
                "parameters": [{ "name": "id", "in": "path", "required": true, "schema": { "type": "string" } }],
                "responses": { "200": reply("job"), "404": reply("unknown job") }
            }},
            "/samples": { "get": {
                "summary": "Page through catalog samples",
                "parameters": [
                    { "name": "offset", "in": "query", "schema": { "type": "integer", "default": 0 } },
                    { "name": "limit", "in": "query", "schema": { "type": "integer", "default": 50, "maximum": 500 } }
                ],
                "responses": { "200": reply("page of samples") }
            }},
            "/checkpoints": { "get": { "summary": "All checkpoints and the active one", "responses": { "200": reply("checkpoints") } } },
            "/metrics/latest": { "get": { "summary": "Held-out metrics of the active checkpoint",
                "responses": { "200": { "description": "metrics", "content": { "application/json": { "schema": {
                    "type": "object", "properties": {
                        "checkpoint_id": { "type": "string" }, "job_id": { "type": "string", "nullable": true },
                        "holdout": { "$ref": "#/components/schemas/MetricsReport" } } } } } } } } },
            "/rollback": { "post": {
                "summary": "Serve an earlier checkpoint",
                "requestBody": body(json!({ "type": "object", "required": ["checkpoint_id"],
                    "properties": { "checkpoint_id": { "type": "string" } } })),
                "responses": { "200": reply("new active checkpoint"), "404": reply("unknown checkpoint"),
                               "409": reply("a job is running") }
            }},
            "/artifacts/{name}": { "get": {
                "summary": "Saliency and mask PNGs produced by /predict",
                "parameters": [{ "name": "name", "in": "path", "required": true, "schema": { "type": "string" } }],
                "responses": { "200": { "description": "PNG", "content": { "image/png": {} } }, "404": reply("missing") }
            }},
            "/spec": { "get": { "summary": "This document", "responses": { "200": reply("OpenAPI document") } } }
        }
    })
}
