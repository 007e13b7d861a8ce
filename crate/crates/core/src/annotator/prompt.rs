//! The annotation prompt template and the completion label grammar.

use serde::{Deserialize, Serialize};

use crate::corpus::Label;

const HEADER: &str = "I need your assistance in evaluating the authenticity of a news article. \n\
I will provide you the news article. You have to answer only with Fake or Real. \n";
const EXAMPLES_INTRO: &str = "I will give you some examples of news. Your answer after [output] should be consistent with the following examples:\n";
const NEWS_OPEN: &str = "[input news]: [news text: ";
const EXAMPLE_CLOSE: &str = "] \n[output]: [This is ";
const TARGET_HEADER: &str = "[target news]: \n";
const TARGET_CLOSE: &str = "]\n[output]";

/// Appended when a completion contains no label.
pub const REPROMPT_SUFFIX: &str = "\n\nAnswer only with Fake or Real.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    /// Instructions followed by retrieved nearest-neighbour demonstrations.
    Knn,
    /// Instructions only.
    Plain,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demonstration {
    pub text: String,
    pub label: Label,
}

/// Instantiates the annotation template. Examples are numbered from 1.
/// `Plain` omits the examples instruction line and every example block.
/// Returns `None` for `Knn` without demonstrations.
pub fn build_prompt(demos: &[Demonstration], query: &str, mode: PromptMode) -> Option<String> {
    let mut out = String::from(HEADER);
    if mode == PromptMode::Knn {
        if demos.is_empty() {
            return None;
        }
        out.push_str(EXAMPLES_INTRO);
        out.push('\n');
        for (i, d) in demos.iter().enumerate() {
            out.push_str(&format!("[example {}]: \n", i + 1));
            out.push_str(NEWS_OPEN);
            out.push_str(&d.text);
            out.push_str(EXAMPLE_CLOSE);
            out.push_str(d.label.title());
            out.push_str(" news]\n\n");
        }
    } else {
        out.push('\n');
    }
    out.push_str(TARGET_HEADER);
    out.push_str(NEWS_OPEN);
    out.push_str(query);
    out.push_str(TARGET_CLOSE);
    Some(out)
}

/// First case-insensitive occurrence of "fake" or "real".
pub fn parse_label(completion: &str) -> Option<Label> {
    let lower = completion.to_lowercase();
    match (lower.find("fake"), lower.find("real")) {
        (Some(f), Some(r)) => Some(if f < r { Label::Fake } else { Label::Real }),
        (Some(_), None) => Some(Label::Fake),
        (None, Some(_)) => Some(Label::Real),
        (None, None) => None,
    }
}

/// A prompt decomposed back into its demonstrations and target text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedPrompt {
    pub examples: Vec<Demonstration>,
    pub target: String,
}

/// Inverse of [`build_prompt`] (either mode, with or without the reprompt suffix).
pub fn parse_prompt(prompt: &str) -> Option<ParsedPrompt> {
    let prompt = prompt.strip_suffix(REPROMPT_SUFFIX).unwrap_or(prompt);
    let body = prompt.strip_prefix(HEADER)?;
    let target_at = body.rfind(TARGET_HEADER)?;
    let (examples_part, target_part) = body.split_at(target_at);
    let target = target_part
        .strip_prefix(TARGET_HEADER)?
        .strip_prefix(NEWS_OPEN)?
        .strip_suffix(TARGET_CLOSE)?
        .to_string();

    let mut examples = Vec::new();
    let mut rest = match examples_part.strip_prefix(EXAMPLES_INTRO) {
        Some(r) => r.strip_prefix('\n')?,
        None => examples_part.strip_prefix('\n')?,
    };
    let mut index = 1;
    while !rest.is_empty() {
        rest = rest.strip_prefix(&format!("[example {index}]: \n"))?;
        rest = rest.strip_prefix(NEWS_OPEN)?;
        let close = rest.find(EXAMPLE_CLOSE)?;
        let text = rest[..close].to_string();
        rest = &rest[close + EXAMPLE_CLOSE.len()..];
        let label = if let Some(r) = rest.strip_prefix("Fake news]\n\n") {
            rest = r;
            Label::Fake
        } else if let Some(r) = rest.strip_prefix("Real news]\n\n") {
            rest = r;
            Label::Real
        } else {
            return None;
        };
        examples.push(Demonstration { text, label });
        index += 1;
    }
    Some(ParsedPrompt { examples, target })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demos() -> Vec<Demonstration> {
        vec![
            Demonstration { text: "Senate passes budget".into(), label: Label::Real },
            Demonstration { text: "Aliens endorse candidate".into(), label: Label::Fake },
        ]
    }

    #[test]
    fn knn_prompt_is_byte_exact() {
        let p = build_prompt(&demos(), "Vaccine contains chips", PromptMode::Knn).unwrap();
        let expected = "I need your assistance in evaluating the authenticity of a news article. \n\
I will provide you the news article. You have to answer only with Fake or Real. \n\
I will give you some examples of news. Your answer after [output] should be consistent with the following examples:\n\
\n\
[example 1]: \n\
[input news]: [news text: Senate passes budget] \n\
[output]: [This is Real news]\n\
\n\
[example 2]: \n\
[input news]: [news text: Aliens endorse candidate] \n\
[output]: [This is Fake news]\n\
\n\
[target news]: \n\
[input news]: [news text: Vaccine contains chips]\n\
[output]";
        assert_eq!(p, expected);
        assert!(p.contains("[example 1]") && p.contains("[example 2]"));
        assert!(p.find("[example 2]").unwrap() < p.find("[target news]").unwrap());
    }

    #[test]
    fn plain_prompt_has_no_examples() {
        let p = build_prompt(&demos(), "query", PromptMode::Plain).unwrap();
        assert!(!p.contains("[example"));
        assert!(p.ends_with("[input news]: [news text: query]\n[output]"));
        assert!(build_prompt(&[], "q", PromptMode::Knn).is_none());
        assert!(build_prompt(&[], "q", PromptMode::Plain).is_some());
    }

    #[test]
    fn prompt_is_deterministic() {
        assert_eq!(
            build_prompt(&demos(), "q", PromptMode::Knn),
            build_prompt(&demos(), "q", PromptMode::Knn)
        );
    }

    #[test]
    fn label_grammar() {
        assert_eq!(parse_label("This is Fake news"), Some(Label::Fake));
        assert_eq!(parse_label("real"), Some(Label::Real));
        assert_eq!(parse_label("[This is REAL news] not fake"), Some(Label::Real));
        assert_eq!(parse_label("I cannot tell"), None);
    }

    #[test]
    fn parse_inverts_build() {
        for mode in [PromptMode::Knn, PromptMode::Plain] {
            let p = build_prompt(&demos(), "target ] with bracket", mode).unwrap();
            let parsed = parse_prompt(&p).unwrap();
            assert_eq!(parsed.target, "target ] with bracket");
            let expected = if mode == PromptMode::Knn { demos() } else { vec![] };
            assert_eq!(parsed.examples, expected);
            let re = format!("{p}{REPROMPT_SUFFIX}");
            assert_eq!(parse_prompt(&re).unwrap().target, "target ] with bracket");
        }
        assert!(parse_prompt("garbage").is_none());
    }
}
