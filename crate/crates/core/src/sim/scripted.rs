use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::gateway::{ChatMessage, ChatProvider, Completion, ModelConfig, ProviderError};
use crate::util::sha256_hex;

/// What one scripted attempt yields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptedResponse {
    Reply(String),
    Transient(String),
    Reject(String),
}

impl ScriptedResponse {
    pub fn reply(text: impl Into<String>) -> Self {
        Self::Reply(text.into())
    }
}

/// A predicate over the request transcript (all message contents joined
/// with newlines).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Contains(String),
    Excludes(String),
    /// `text` occurs after the last occurrence of `anchor`.
    ContainsAfter {
        anchor: String,
        text: String,
    },
    /// SHA-256 of the JSON-encoded message list.
    Fingerprint(String),
}

impl Condition {
    fn holds(&self, transcript: &str, fingerprint: &str) -> bool {
        match self {
            Condition::Contains(s) => transcript.contains(s.as_str()),
            Condition::Excludes(s) => !transcript.contains(s.as_str()),
            Condition::ContainsAfter { anchor, text } => transcript
                .rfind(anchor.as_str())
                .is_some_and(|at| transcript[at + anchor.len()..].contains(text.as_str())),
            Condition::Fingerprint(f) => f == fingerprint,
        }
    }
}

/// Responses are consumed in order on each match; the last one repeats.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptRule {
    #[serde(default)]
    pub when: Vec<Condition>,
    pub responses: Vec<ScriptedResponse>,
}

impl ScriptRule {
    pub fn new(when: Vec<Condition>, responses: Vec<ScriptedResponse>) -> Self {
        Self { when, responses }
    }

    /// Matches every request.
    pub fn any(responses: Vec<ScriptedResponse>) -> Self {
        Self::new(vec![], responses)
    }

    pub fn contains(text: impl Into<String>, response: ScriptedResponse) -> Self {
        Self::new(vec![Condition::Contains(text.into())], vec![response])
    }
}

/// Serializable form of a [`ScriptedChat`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatScript {
    pub name: String,
    pub strict: bool,
    pub rules: Vec<ScriptRule>,
}

pub fn fingerprint(messages: &[ChatMessage]) -> String {
    sha256_hex(&serde_json::to_vec(messages).expect("messages serialize"))
}

/// Deterministic chat provider driven by an ordered rule list; the first
/// rule whose conditions all hold answers. In strict mode an unmatched
/// request is rejected, otherwise it gets an empty reply.
#[derive(Debug)]
pub struct ScriptedChat {
    script: ChatScript,
    cursors: Mutex<Vec<usize>>,
    requests: Mutex<Vec<Vec<ChatMessage>>>,
}

impl ScriptedChat {
    pub fn new(name: impl Into<String>, rules: Vec<ScriptRule>, strict: bool) -> Self {
        Self::from_script(ChatScript {
            name: name.into(),
            strict,
            rules,
        })
    }

    pub fn from_script(script: ChatScript) -> Self {
        let cursors = vec![0; script.rules.len()];
        Self {
            script,
            cursors: Mutex::new(cursors),
            requests: Mutex::new(Vec::new()),
        }
    }

    pub fn script(&self) -> &ChatScript {
        &self.script
    }

    /// Every request seen so far, in arrival order.
    pub fn requests(&self) -> Vec<Vec<ChatMessage>> {
        self.requests.lock().unwrap().clone()
    }

    fn respond(&self, messages: &[ChatMessage]) -> Option<ScriptedResponse> {
        let transcript = messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n");
        let fp = fingerprint(messages);
        let index = self
            .script
            .rules
            .iter()
            .position(|r| r.when.iter().all(|c| c.holds(&transcript, &fp)))?;
        let rule = &self.script.rules[index];
        let mut cursors = self.cursors.lock().unwrap();
        let at = cursors[index].min(rule.responses.len().checked_sub(1)?);
        cursors[index] += 1;
        Some(rule.responses[at].clone())
    }
}

impl ChatProvider for ScriptedChat {
    fn complete(
        &self,
        _: &ModelConfig,
        messages: &[ChatMessage],
    ) -> Result<Completion, ProviderError> {
        self.requests.lock().unwrap().push(messages.to_vec());
        match self.respond(messages) {
            Some(ScriptedResponse::Reply(text)) => Ok(Completion::text(text)),
            Some(ScriptedResponse::Transient(e)) => Err(ProviderError::Transient(e)),
            Some(ScriptedResponse::Reject(e)) => Err(ProviderError::Rejected(e)),
            None if self.script.strict => Err(ProviderError::Rejected(format!(
                "script `{}` has no response for request {}",
                self.script.name,
                fingerprint(messages)
            ))),
            None => Ok(Completion::text("")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ask(chat: &ScriptedChat, text: &str) -> Result<String, ProviderError> {
        chat.complete(&ModelConfig::default(), &[ChatMessage::user(text)])
            .map(|c| c.text)
    }

    #[test]
    fn first_matching_rule_answers_and_last_response_repeats() {
        let chat = ScriptedChat::new(
            "t",
            vec![
                ScriptRule::new(
                    vec![Condition::Contains("a".into())],
                    vec![ScriptedResponse::reply("1"), ScriptedResponse::reply("2")],
                ),
                ScriptRule::any(vec![ScriptedResponse::reply("other")]),
            ],
            true,
        );
        assert_eq!(ask(&chat, "a").unwrap(), "1");
        assert_eq!(ask(&chat, "a").unwrap(), "2");
        assert_eq!(ask(&chat, "a").unwrap(), "2");
        assert_eq!(ask(&chat, "b").unwrap(), "other");
        assert_eq!(chat.requests().len(), 4);
    }

    #[test]
    fn strict_mode_rejects_unkeyed_requests() {
        let chat = ScriptedChat::new(
            "t",
            vec![ScriptRule::contains("x", ScriptedResponse::reply("y"))],
            true,
        );
        assert!(matches!(ask(&chat, "z"), Err(ProviderError::Rejected(_))));
        let lax = ScriptedChat::new("t", vec![], false);
        assert_eq!(ask(&lax, "z").unwrap(), "");
    }

    #[test]
    fn anchored_and_fingerprint_conditions() {
        let messages = [ChatMessage::user("intro KEY\nSection:\nbody")];
        let fp = fingerprint(&messages);
        let chat = ScriptedChat::new(
            "t",
            vec![
                ScriptRule::new(
                    vec![Condition::ContainsAfter {
                        anchor: "Section:".into(),
                        text: "KEY".into(),
                    }],
                    vec![ScriptedResponse::reply("wrong")],
                ),
                ScriptRule::new(
                    vec![Condition::Fingerprint(fp)],
                    vec![ScriptedResponse::reply("fp")],
                ),
            ],
            true,
        );
        assert_eq!(
            chat.complete(&ModelConfig::default(), &messages)
                .unwrap()
                .text,
            "fp"
        );
    }

    #[test]
    fn script_round_trips_through_json() {
        let script = ChatScript {
            name: "r".into(),
            strict: true,
            rules: vec![ScriptRule::new(
                vec![Condition::Excludes("q".into())],
                vec![ScriptedResponse::Transient("t".into())],
            )],
        };
        let json = serde_json::to_string(&script).unwrap();
        assert_eq!(serde_json::from_str::<ChatScript>(&json).unwrap(), script);
    }
}
