//! Structural schemas for structured chat replies and API bodies.
//!
//! A deliberately small subset of JSON Schema: objects with required and
//! optional fields, arrays with length bounds, strings (optionally non-empty
//! or enumerated), integers, numbers, booleans and nullable wrappers.

use serde_json::{json, Map, Value};

#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub name: String,
    pub schema: Schema,
    pub required: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Schema {
    Object {
        fields: Vec<Field>,
        additional: bool,
    },
    Array {
        items: Box<Schema>,
        min_items: usize,
        max_items: Option<usize>,
    },
    String {
        non_empty: bool,
        one_of: Option<Vec<String>>,
    },
    Integer {
        minimum: Option<i64>,
    },
    Number,
    Boolean,
    Nullable(Box<Schema>),
    Any,
}

impl Schema {
    pub fn object(fields: impl IntoIterator<Item = Field>) -> Self {
        Schema::Object {
            fields: fields.into_iter().collect(),
            additional: false,
        }
    }

    /// Object that tolerates keys beyond the declared ones.
    pub fn open_object(fields: impl IntoIterator<Item = Field>) -> Self {
        Schema::Object {
            fields: fields.into_iter().collect(),
            additional: true,
        }
    }

    pub fn array(items: Schema) -> Self {
        Schema::Array {
            items: Box::new(items),
            min_items: 0,
            max_items: None,
        }
    }

    pub fn non_empty_array(items: Schema) -> Self {
        Schema::Array {
            items: Box::new(items),
            min_items: 1,
            max_items: None,
        }
    }

    pub fn string() -> Self {
        Schema::String {
            non_empty: false,
            one_of: None,
        }
    }

    pub fn text() -> Self {
        Schema::String {
            non_empty: true,
            one_of: None,
        }
    }

    pub fn one_of<S: Into<String>>(values: impl IntoIterator<Item = S>) -> Self {
        Schema::String {
            non_empty: true,
            one_of: Some(values.into_iter().map(Into::into).collect()),
        }
    }

    pub fn integer() -> Self {
        Schema::Integer { minimum: None }
    }

    pub fn min_integer(minimum: i64) -> Self {
        Schema::Integer {
            minimum: Some(minimum),
        }
    }

    pub fn nullable(self) -> Self {
        Schema::Nullable(Box::new(self))
    }

    pub fn req(self, name: &str) -> Field {
        Field {
            name: name.to_string(),
            schema: self,
            required: true,
        }
    }

    pub fn opt(self, name: &str) -> Field {
        Field {
            name: name.to_string(),
            schema: self,
            required: false,
        }
    }

    pub fn validate(&self, value: &Value) -> Result<(), SchemaViolation> {
        self.check(value, "$")
    }

    fn check(&self, value: &Value, path: &str) -> Result<(), SchemaViolation> {
        let fail = |msg: String| {
            Err(SchemaViolation {
                path: path.to_string(),
                message: msg,
            })
        };
        match self {
            Schema::Any => Ok(()),
            Schema::Nullable(inner) => {
                if value.is_null() {
                    Ok(())
                } else {
                    inner.check(value, path)
                }
            }
            Schema::Boolean => match value {
                Value::Bool(_) => Ok(()),
                _ => fail(format!("expected boolean, found {}", kind(value))),
            },
            Schema::Number => match value {
                Value::Number(_) => Ok(()),
                _ => fail(format!("expected number, found {}", kind(value))),
            },
            Schema::Integer { minimum } => match value.as_i64() {
                Some(n) => match minimum {
                    Some(m) if n < *m => fail(format!("{n} is below minimum {m}")),
                    _ => Ok(()),
                },
                None => fail(format!("expected integer, found {}", kind(value))),
            },
            Schema::String { non_empty, one_of } => match value.as_str() {
                Some(s) => {
                    if *non_empty && s.trim().is_empty() {
                        return fail("string must not be empty".into());
                    }
                    if let Some(allowed) = one_of {
                        if !allowed.iter().any(|a| a == s) {
                            return fail(format!("{s:?} is not one of {allowed:?}"));
                        }
                    }
                    Ok(())
                }
                None => fail(format!("expected string, found {}", kind(value))),
            },
            Schema::Array {
                items,
                min_items,
                max_items,
            } => {
                let Some(arr) = value.as_array() else {
                    return fail(format!("expected array, found {}", kind(value)));
                };
                if arr.len() < *min_items {
                    return fail(format!("expected at least {min_items} items, found {}", arr.len()));
                }
                if let Some(max) = max_items {
                    if arr.len() > *max {
                        return fail(format!("expected at most {max} items, found {}", arr.len()));
                    }
                }
                for (i, item) in arr.iter().enumerate() {
                    items.check(item, &format!("{path}[{i}]"))?;
                }
                Ok(())
            }
            Schema::Object { fields, additional } => {
                let Some(obj) = value.as_object() else {
                    return fail(format!("expected object, found {}", kind(value)));
                };
                for f in fields {
                    match obj.get(&f.name) {
                        Some(v) => f.schema.check(v, &format!("{path}.{}", f.name))?,
                        None if f.required => {
                            return Err(SchemaViolation {
                                path: format!("{path}.{}", f.name),
                                message: "missing required field".into(),
                            })
                        }
                        None => {}
                    }
                }
                if !additional {
                    if let Some(extra) = obj.keys().find(|k| !fields.iter().any(|f| &f.name == *k)) {
                        return Err(SchemaViolation {
                            path: format!("{path}.{extra}"),
                            message: "unexpected field".into(),
                        });
                    }
                }
                Ok(())
            }
        }
    }

    /// Renders the schema as a JSON Schema document.
    pub fn to_json_schema(&self) -> Value {
        match self {
            Schema::Any => json!({}),
            Schema::Boolean => json!({"type": "boolean"}),
            Schema::Number => json!({"type": "number"}),
            Schema::Integer { minimum } => {
                let mut v = json!({"type": "integer"});
                if let Some(m) = minimum {
                    v["minimum"] = json!(m);
                }
                v
            }
            Schema::String { non_empty, one_of } => {
                let mut v = json!({"type": "string"});
                if *non_empty {
                    v["minLength"] = json!(1);
                }
                if let Some(values) = one_of {
                    v["enum"] = json!(values);
                }
                v
            }
            Schema::Nullable(inner) => json!({"anyOf": [inner.to_json_schema(), {"type": "null"}]}),
            Schema::Array {
                items,
                min_items,
                max_items,
            } => {
                let mut v = json!({"type": "array", "items": items.to_json_schema()});
                if *min_items > 0 {
                    v["minItems"] = json!(min_items);
                }
                if let Some(m) = max_items {
                    v["maxItems"] = json!(m);
                }
                v
            }
            Schema::Object { fields, additional } => {
                let mut props = Map::new();
                let mut required = Vec::new();
                for f in fields {
                    props.insert(f.name.clone(), f.schema.to_json_schema());
                    if f.required {
                        required.push(Value::String(f.name.clone()));
                    }
                }
                json!({
                    "type": "object",
                    "properties": Value::Object(props),
                    "required": required,
                    "additionalProperties": additional,
                })
            }
        }
    }
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemaViolation {
    pub path: String,
    pub message: String,
}

impl std::fmt::Display for SchemaViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

/// A schema with the name providers see it under.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseSchema {
    pub name: String,
    pub schema: Schema,
}

impl ResponseSchema {
    pub fn new(name: impl Into<String>, schema: Schema) -> Self {
        Self {
            name: name.into(),
            schema,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task_schema() -> Schema {
        Schema::object([Schema::non_empty_array(Schema::object([
            Schema::text().req("name"),
            Schema::string().opt("desc"),
            Schema::min_integer(1).nullable().opt("location"),
        ]))
        .req("tasks")])
    }

    #[test]
    fn accepts_valid() {
        task_schema()
            .validate(&json!({"tasks": [{"name": "a", "location": null}, {"name": "b", "desc": "", "location": 2}]}))
            .unwrap();
    }

    #[test]
    fn reports_paths() {
        let s = task_schema();
        let err = s.validate(&json!({"tasks": [{"name": "a"}, {"name": ""}]})).unwrap_err();
        assert_eq!(err.path, "$.tasks[1].name");
        let err = s.validate(&json!({"tasks": []})).unwrap_err();
        assert_eq!(err.path, "$.tasks");
        let err = s.validate(&json!({"tasks": [{"name": "a", "location": 0}]})).unwrap_err();
        assert_eq!(err.path, "$.tasks[0].location");
        let err = s.validate(&json!({"tasks": [], "x": 1})).unwrap_err();
        assert_eq!(err.path, "$.tasks");
        let err = s.validate(&json!({"tasks": [{"name": "a", "extra": 1}]})).unwrap_err();
        assert_eq!(err.path, "$.tasks[0].extra");
    }

    #[test]
    fn enum_strings() {
        let s = Schema::one_of(["arms", "legs"]);
        s.validate(&json!("arms")).unwrap();
        assert!(s.validate(&json!("torso")).is_err());
        assert_eq!(s.to_json_schema()["enum"], json!(["arms", "legs"]));
    }

    #[test]
    fn json_schema_rendering() {
        let js = task_schema().to_json_schema();
        assert_eq!(js["required"], json!(["tasks"]));
        assert_eq!(js["properties"]["tasks"]["minItems"], json!(1));
        assert_eq!(js["additionalProperties"], json!(false));
    }
}
