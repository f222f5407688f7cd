//! Versioned prompt templates with `{{placeholder}}` substitution.
//!
//! The template files live under `prompts/` at the repository root and are
//! compiled in. Each template's content hash is recorded wherever its output
//! is used.

use std::collections::BTreeSet;
use std::sync::OnceLock;

use regex::Regex;
use thiserror::Error;

use crate::digest::sha256_hex;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template {template} has no value for {{{{{name}}}}}")]
    MissingValue { template: String, name: String },
    #[error("template {template} does not use {{{{{name}}}}}")]
    UnusedValue { template: String, name: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Template {
    pub name: &'static str,
    pub text: &'static str,
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{\{([a-z_]+)\}\}").expect("static regex"))
}

impl Template {
    /// Content hash of the template text.
    pub fn hash(&self) -> String {
        sha256_hex(self.text.as_bytes())
    }

    pub fn placeholders(&self) -> BTreeSet<&'static str> {
        placeholder_re()
            .captures_iter(self.text)
            .map(|c| c.get(1).expect("group 1").as_str())
            .collect()
    }

    /// Substitutes every placeholder. Values are inserted verbatim, so a
    /// value containing `{{x}}` is never expanded again.
    pub fn render(&self, values: &[(&str, &str)]) -> Result<String, TemplateError> {
        let used = self.placeholders();
        for (k, _) in values {
            if !used.contains(k) {
                return Err(TemplateError::UnusedValue {
                    template: self.name.into(),
                    name: (*k).into(),
                });
            }
        }
        let mut missing = None;
        let out = placeholder_re().replace_all(self.text, |c: &regex::Captures| {
            let key = &c[1];
            match values.iter().find(|(k, _)| *k == key) {
                Some((_, v)) => (*v).to_string(),
                None => {
                    missing.get_or_insert_with(|| key.to_string());
                    String::new()
                }
            }
        });
        if let Some(name) = missing {
            return Err(TemplateError::MissingValue {
                template: self.name.into(),
                name,
            });
        }
        Ok(out.into_owned())
    }
}

pub const SYSTEM: Template = Template {
    name: "system",
    text: include_str!("../../../prompts/system.txt"),
};
pub const TASKS: Template = Template {
    name: "pipeline/tasks",
    text: include_str!("../../../prompts/pipeline/tasks.txt"),
};
pub const DECOMPOSITION: Template = Template {
    name: "pipeline/decomposition",
    text: include_str!("../../../prompts/pipeline/decomposition.txt"),
};
pub const CONCERNS: Template = Template {
    name: "pipeline/concerns",
    text: include_str!("../../../prompts/pipeline/concerns.txt"),
};
pub const SELF_DESCRIPTION: Template = Template {
    name: "elicitation/self_description",
    text: include_str!("../../../prompts/elicitation/self_description.txt"),
};
pub const ANNOTATIONS: Template = Template {
    name: "elicitation/annotations",
    text: include_str!("../../../prompts/elicitation/annotations.txt"),
};
pub const FEEDBACK_UPDATE: Template = Template {
    name: "elicitation/feedback_update",
    text: include_str!("../../../prompts/elicitation/feedback_update.txt"),
};
pub const NEW_CONCERN: Template = Template {
    name: "elicitation/new_concern",
    text: include_str!("../../../prompts/elicitation/new_concern.txt"),
};

pub const ALL: [Template; 8] = [
    SYSTEM,
    TASKS,
    DECOMPOSITION,
    CONCERNS,
    SELF_DESCRIPTION,
    ANNOTATIONS,
    FEEDBACK_UPDATE,
    NEW_CONCERN,
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_and_rejects_gaps() {
        let out = NEW_CONCERN
            .render(&[("env_description", "a bathroom"), ("text", "The outlet seems a bit tall {{x}}")])
            .unwrap();
        assert!(out.contains("a bathroom"));
        assert!(out.contains("{{x}}"));
        assert!(matches!(
            NEW_CONCERN.render(&[("text", "t")]),
            Err(TemplateError::MissingValue { .. })
        ));
        assert!(matches!(
            NEW_CONCERN.render(&[("text", "t"), ("env_description", "e"), ("bogus", "b")]),
            Err(TemplateError::UnusedValue { .. })
        ));
    }

    #[test]
    fn templates_have_expected_placeholders() {
        let names: Vec<_> = CONCERNS.placeholders().into_iter().collect();
        assert_eq!(names, ["labels", "subtasks", "task_desc", "task_name", "user_model"]);
        assert!(SYSTEM.placeholders().is_empty());
        let hashes: BTreeSet<String> = ALL.iter().map(|t| t.hash()).collect();
        assert_eq!(hashes.len(), ALL.len());
    }
}
