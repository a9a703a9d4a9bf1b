//! Versioned prompt templates for the three LLM roles.
//!
//! A template file starts with a `version: N` line. User templates contain
//! `{name}` placeholders (required) and `{name?}` placeholders (optional).
//! A line holding an optional placeholder whose value is absent or empty is
//! dropped entirely.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("template `{template}` needs a value for `{placeholder}`")]
    MissingValue {
        template: String,
        placeholder: String,
    },
    #[error("template `{0}` has no version header")]
    MissingVersion(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: String,
    pub version: u32,
    pub system: String,
    pub user: String,
}

fn strip_version(name: &str, text: &str) -> Result<(u32, String), TemplateError> {
    let (first, rest) = text.split_once('\n').unwrap_or((text, ""));
    let version = first
        .strip_prefix("version:")
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| TemplateError::MissingVersion(name.to_string()))?;
    Ok((version, rest.trim_end().to_string()))
}

impl PromptTemplate {
    pub fn from_parts(name: &str, system: &str, user: &str) -> Result<Self, TemplateError> {
        let (version, system) = strip_version(name, system)?;
        let (user_version, user) = strip_version(name, user)?;
        Ok(Self {
            name: name.to_string(),
            version: version.max(user_version),
            system,
            user,
        })
    }

    pub fn parser() -> Self {
        Self::from_parts(
            "parser",
            include_str!("../templates/parser.system.txt"),
            include_str!("../templates/parser.user.txt"),
        )
        .expect("bundled template")
    }

    pub fn reflector() -> Self {
        Self::from_parts(
            "reflector",
            include_str!("../templates/reflector.system.txt"),
            include_str!("../templates/reflector.user.txt"),
        )
        .expect("bundled template")
    }

    pub fn optimizer() -> Self {
        Self::from_parts(
            "optimizer",
            include_str!("../templates/optimizer.system.txt"),
            include_str!("../templates/optimizer.user.txt"),
        )
        .expect("bundled template")
    }

    pub fn render_user(&self, values: &[(&str, Option<&str>)]) -> Result<String, TemplateError> {
        let lookup = |name: &str| {
            values
                .iter()
                .find(|(k, _)| *k == name)
                .and_then(|(_, v)| *v)
                .filter(|v| !v.is_empty())
        };
        let mut lines = Vec::new();
        'lines: for line in self.user.lines() {
            let mut out = String::new();
            let mut rest = line;
            while let Some(open) = rest.find('{') {
                let Some(close) = rest[open..].find('}').map(|c| open + c) else {
                    break;
                };
                let inner = &rest[open + 1..close];
                let (name, optional) = match inner.strip_suffix('?') {
                    Some(n) => (n, true),
                    None => (inner, false),
                };
                if name.is_empty() || !name.chars().all(|c| c.is_ascii_lowercase() || c == '_') {
                    out.push_str(&rest[..=open]);
                    rest = &rest[open + 1..];
                    continue;
                }
                out.push_str(&rest[..open]);
                match lookup(name) {
                    Some(value) => out.push_str(value),
                    None if optional => continue 'lines,
                    None => {
                        return Err(TemplateError::MissingValue {
                            template: self.name.clone(),
                            placeholder: name.to_string(),
                        })
                    }
                }
                rest = &rest[close + 1..];
            }
            out.push_str(rest);
            lines.push(out);
        }
        Ok(lines.join("\n").trim().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_templates_load() {
        for t in [
            PromptTemplate::parser(),
            PromptTemplate::reflector(),
            PromptTemplate::optimizer(),
        ] {
            assert_eq!(t.version, 1);
            assert!(!t.system.is_empty());
        }
        assert!(PromptTemplate::optimizer()
            .system
            .contains("\"modifications\""));
    }

    #[test]
    fn optional_lines_drop_when_absent() {
        let t = PromptTemplate::reflector();
        let with = t
            .render_user(&[
                ("task", Some("q")),
                ("trajectory", Some("t")),
                ("reference_answer", Some("42")),
            ])
            .unwrap();
        assert!(with.contains("42"));
        let without = t
            .render_user(&[
                ("task", Some("q")),
                ("trajectory", Some("t")),
                ("reference_answer", None),
            ])
            .unwrap();
        assert!(!without.contains("Reference answer"));
    }

    #[test]
    fn missing_required_value_errors() {
        let t = PromptTemplate::parser();
        assert_eq!(
            t.render_user(&[("prompt", Some("x"))]),
            Err(TemplateError::MissingValue {
                template: "parser".into(),
                placeholder: "prompt_type".into()
            })
        );
    }

    #[test]
    fn values_are_not_re_expanded() {
        let t = PromptTemplate::from_parts("t", "version: 1\nsys", "version: 1\nA {a} B").unwrap();
        assert_eq!(t.render_user(&[("a", Some("{a}"))]).unwrap(), "A {a} B");
    }
}
