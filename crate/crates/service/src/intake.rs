//! Validation of the subject intake payload.

use prefnet::dataset::{SubjectInfo, MISSING};
use serde_json::{Map, Value};

use crate::error::{Result, ServiceError};

const SPECS: [&str; 4] = ["impedance", "freq_low", "freq_high", "sensitivity"];
const KNOWN: [&str; 8] =
    ["subject_id", "age", "gender", "impedance", "freq_low", "freq_high", "sensitivity", "equipment_label"];

/// Parsed intake before a subject id has been settled.
#[derive(Debug, Clone, PartialEq)]
pub struct Intake {
    pub subject_id: Option<String>,
    pub subject: SubjectInfo,
}

fn parse_number(v: &Value) -> Option<f64> {
    match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
}

fn parse_gender(v: &Value) -> Option<i8> {
    match v {
        Value::Number(n) => match n.as_i64()? {
            g @ -1..=1 => Some(g as i8),
            _ => None,
        },
        Value::String(s) => match s.trim().to_ascii_lowercase().as_str() {
            "0" | "m" | "male" => Some(0),
            "1" | "f" | "female" => Some(1),
            "-1" | "" | "unknown" | "other" | "undisclosed" => Some(-1),
            _ => None,
        },
        Value::Null => Some(-1),
        _ => None,
    }
}

fn is_blank(v: &Value) -> bool {
    match v {
        Value::Null => true,
        Value::String(s) => s.trim().is_empty(),
        _ => false,
    }
}

/// Validates an intake object. Every offending field is reported at once.
/// Absent, null or blank specs become -1; unknown keys are kept as extras.
pub fn parse_intake(payload: &Value) -> Result<Intake> {
    let Some(obj) = payload.as_object() else {
        return Err(ServiceError::invalid("intake payload must be a JSON object", vec![]));
    };
    let mut bad = Vec::new();

    let age = match obj.get("age").and_then(parse_number) {
        Some(a) if a.is_finite() && a >= 0.0 => a,
        _ => {
            bad.push("age".to_string());
            0.0
        }
    };
    let gender = match obj.get("gender").and_then(parse_gender) {
        Some(g) => g,
        None => {
            bad.push("gender".to_string());
            -1
        }
    };
    let mut specs = [MISSING; 4];
    for (slot, name) in specs.iter_mut().zip(SPECS) {
        match obj.get(name) {
            None => {}
            Some(v) if is_blank(v) => {}
            Some(v) => match parse_number(v) {
                Some(x) if x.is_finite() && (x >= 0.0 || x == MISSING) => *slot = x,
                _ => bad.push(name.to_string()),
            },
        }
    }
    let subject_id = match obj.get("subject_id") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) if !s.trim().is_empty() => Some(s.trim().to_string()),
        Some(_) => {
            bad.push("subject_id".to_string());
            None
        }
    };
    let equipment_label = match obj.get("equipment_label") {
        None | Some(Value::Null) => String::new(),
        Some(Value::String(s)) => s.trim().to_string(),
        Some(_) => {
            bad.push("equipment_label".to_string());
            String::new()
        }
    };
    if !bad.is_empty() {
        return Err(ServiceError::invalid(format!("invalid intake fields: {}", bad.join(", ")), bad));
    }

    let extra: Map<String, Value> =
        obj.iter().filter(|(k, _)| !KNOWN.contains(&k.as_str())).map(|(k, v)| (k.clone(), v.clone())).collect();
    let mut subject = SubjectInfo::new(subject_id.clone().unwrap_or_default(), age, gender)
        .with_specs(specs[0], specs[1], specs[2], specs[3]);
    subject.equipment_label = equipment_label;
    subject.extra = extra;
    Ok(Intake { subject_id, subject })
}
