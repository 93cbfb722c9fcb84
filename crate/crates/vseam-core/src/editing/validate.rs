//! Automated pre-screen for generated counterfactual questions.
//!
//! Accepts a candidate when it keeps the original's syntactic frame and
//! substitutes exactly one semantic unit (one content-word substitution or
//! one preposition swap, where a multi-word preposition like "on top of"
//! counts as one unit). Abstract, non-visualizable substitutions from a
//! configurable stop-list are rejected.

use serde::{Deserialize, Serialize};

/// Substituted segments may span up to this many words ("on top of").
const MAX_UNIT_WORDS: usize = 3;

/// Default stop-list of substitutions that cannot be grounded visually.
pub const DEFAULT_STOP_LIST: &[&str] = &[
    "bright",
    "nice",
    "good",
    "bad",
    "normal",
    "typical",
    "interesting",
    "abstract",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "verdict", content = "reason")]
pub enum CounterfactualVerdict {
    Accept,
    Reject(RejectReason),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    /// Zero substitutions: the candidate equals the original.
    NoSubstitution,
    /// The differing segment is too large to be a single semantic unit.
    SubstitutionTooLarge,
    /// The surrounding frame changed (empty common prefix and suffix).
    FrameChanged,
    /// The substituted word is on the abstract stop-list.
    StopListed(String),
}

impl CounterfactualVerdict {
    pub fn is_accept(&self) -> bool {
        matches!(self, CounterfactualVerdict::Accept)
    }
}

fn words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

/// Validate a candidate counterfactual against its original question.
/// Total function: always returns a verdict.
pub fn validate_counterfactual(
    original: &str,
    candidate: &str,
    stop_list: &[&str],
) -> CounterfactualVerdict {
    let orig = words(original);
    let cand = words(candidate);

    if orig == cand {
        return CounterfactualVerdict::Reject(RejectReason::NoSubstitution);
    }

    let mut prefix = 0;
    while prefix < orig.len() && prefix < cand.len() && orig[prefix] == cand[prefix] {
        prefix += 1;
    }
    let mut suffix = 0;
    while suffix < orig.len() - prefix
        && suffix < cand.len() - prefix
        && orig[orig.len() - 1 - suffix] == cand[cand.len() - 1 - suffix]
    {
        suffix += 1;
    }

    if prefix + suffix == 0 {
        return CounterfactualVerdict::Reject(RejectReason::FrameChanged);
    }

    let orig_unit = &orig[prefix..orig.len() - suffix];
    let cand_unit = &cand[prefix..cand.len() - suffix];
    if orig_unit.len() > MAX_UNIT_WORDS || cand_unit.len() > MAX_UNIT_WORDS {
        return CounterfactualVerdict::Reject(RejectReason::SubstitutionTooLarge);
    }
    // The frame must dominate the question: the substituted unit may not be
    // most of it.
    if prefix + suffix < orig.len().max(cand.len()).saturating_sub(MAX_UNIT_WORDS) {
        return CounterfactualVerdict::Reject(RejectReason::FrameChanged);
    }

    for w in cand_unit {
        if stop_list.contains(&w.as_str()) {
            return CounterfactualVerdict::Reject(RejectReason::StopListed(w.clone()));
        }
    }

    CounterfactualVerdict::Accept
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_color_substitution_is_accepted() {
        let v = validate_counterfactual("Is the shirt blue?", "Is the shirt black?", DEFAULT_STOP_LIST);
        assert!(v.is_accept());
    }

    #[test]
    fn identity_is_rejected() {
        let v = validate_counterfactual("Is the shirt blue?", "Is the shirt blue?", DEFAULT_STOP_LIST);
        assert_eq!(
            v,
            CounterfactualVerdict::Reject(RejectReason::NoSubstitution)
        );
    }

    #[test]
    fn stop_listed_abstract_attribute_is_rejected() {
        let v = validate_counterfactual(
            "Is the shirt blue?",
            "Is the shirt bright?",
            DEFAULT_STOP_LIST,
        );
        assert_eq!(
            v,
            CounterfactualVerdict::Reject(RejectReason::StopListed("bright".to_string()))
        );
    }

    #[test]
    fn preposition_swap_with_different_word_counts_is_accepted() {
        let v = validate_counterfactual(
            "Is the ball under the table?",
            "Is the ball on top of the table?",
            DEFAULT_STOP_LIST,
        );
        assert!(v.is_accept());
    }

    #[test]
    fn unrelated_question_is_rejected() {
        let v = validate_counterfactual(
            "Is the shirt blue?",
            "What color is the large truck parked outside?",
            DEFAULT_STOP_LIST,
        );
        assert!(matches!(v, CounterfactualVerdict::Reject(_)));
    }

    #[test]
    fn multi_clause_rewrite_is_rejected() {
        let v = validate_counterfactual(
            "Is the cat to the left of the sofa?",
            "Is the dog to the right of the table?",
            DEFAULT_STOP_LIST,
        );
        assert!(matches!(v, CounterfactualVerdict::Reject(_)));
    }
}
