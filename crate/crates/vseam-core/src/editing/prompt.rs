//! Few-shot counterfactual prompt assembly.
//!
//! Each semantic type gets a task instruction, a fixed set of in-context
//! reference examples, and the target record in the final slot. The prompt
//! always ends with `Counterfactual Question:` and instructs the language
//! model to output only the rewritten question. Assembly is deterministic:
//! the same inputs produce a byte-identical prompt.

use crate::dataset::SemanticLevel;
use crate::error::Result;

struct ReferenceExample {
    question: &'static str,
    answer: &'static str,
    full_answer: &'static str,
    counterfactual: &'static str,
}

const ATTRIBUTE_INSTRUCTION: &str = "You are given a binary Yes/No question about an object's attribute, along with its ground-truth answer and a full explanation.\nRewrite the question by changing the attribute (e.g., color or material) while preserving the original structure and context.";

const ATTRIBUTE_EXAMPLES: &[ReferenceExample] = &[
    ReferenceExample {
        question: "Is the shirt blue?",
        answer: "No",
        full_answer: "The shirt is black.",
        counterfactual: "Is the shirt black?",
    },
    ReferenceExample {
        question: "Is the chair made of wood?",
        answer: "Yes",
        full_answer: "The chair is made of wood.",
        counterfactual: "Is the chair made of metal?",
    },
    ReferenceExample {
        question: "Is the car black?",
        answer: "No",
        full_answer: "The car is white.",
        counterfactual: "Is the car white?",
    },
];

const OBJECT_INSTRUCTION: &str = "You are given a binary Yes/No question about the presence of an object in an image, along with its answer and a full explanation.\nRewrite the question by changing the queried object to another semantically plausible one.";

const OBJECT_EXAMPLES: &[ReferenceExample] = &[
    ReferenceExample {
        question: "Is there a dog in this picture?",
        answer: "No",
        full_answer: "There is a cat in the image.",
        counterfactual: "Is there a cat in this picture?",
    },
    ReferenceExample {
        question: "Is there a chair in this picture?",
        answer: "Yes",
        full_answer: "There is a chair in the image.",
        counterfactual: "Is there a table in this picture?",
    },
    ReferenceExample {
        question: "Is there a bus in this picture?",
        answer: "No",
        full_answer: "A bicycle is in the image.",
        counterfactual: "Is there a bicycle in this picture?",
    },
];

const RELATION_INSTRUCTION: &str = "You are given a binary Yes/No question about a spatial or action relationship between objects, along with its ground-truth answer and full explanation.\nRewrite the question by changing the relation (e.g., left to right, under to above, riding to feeding).";

const RELATION_EXAMPLES: &[ReferenceExample] = &[
    ReferenceExample {
        question: "Is the person riding the horse?",
        answer: "Yes",
        full_answer: "The person is riding the horse.",
        counterfactual: "Is the person feeding the horse?",
    },
    ReferenceExample {
        question: "Is the person holding a tennis racket?",
        answer: "Yes",
        full_answer: "The person is holding a tennis racket.",
        counterfactual: "Is the person throwing a tennis racket?",
    },
    ReferenceExample {
        question: "Is the cat to the left of the sofa?",
        answer: "Yes",
        full_answer: "The cat is positioned to the left of the sofa.",
        counterfactual: "Is the cat to the right of the sofa?",
    },
    ReferenceExample {
        question: "Is the ball under the table?",
        answer: "No",
        full_answer: "The ball is on top of the table.",
        counterfactual: "Is the ball above the table?",
    },
];

const COMPLETION_INSTRUCTION: &str =
    "Now please complete the following. Only output the rewritten counterfactual question, without explanation:";

fn capitalize(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().collect::<String>() + chars.as_str(),
        None => String::new(),
    }
}

/// Assemble the few-shot prompt for one semantic type with the target
/// record in the final slot.
pub fn build_counterfactual_prompt(
    semantic_type: SemanticLevel,
    question: &str,
    answer: &str,
    full_answer: &str,
) -> Result<String> {
    let (instruction, examples) = match semantic_type {
        SemanticLevel::Attribute => (ATTRIBUTE_INSTRUCTION, ATTRIBUTE_EXAMPLES),
        SemanticLevel::Object => (OBJECT_INSTRUCTION, OBJECT_EXAMPLES),
        SemanticLevel::Relation => (RELATION_INSTRUCTION, RELATION_EXAMPLES),
    };
    let mut prompt = String::new();
    prompt.push_str(instruction);
    prompt.push_str("\n\n");
    for (i, ex) in examples.iter().enumerate() {
        prompt.push_str(&format!(
            "Example {}:\nOriginal Question: {} Answer: {}. Full Answer: {} Counterfactual Question: {}\n\n",
            i + 1,
            ex.question,
            ex.answer,
            ex.full_answer,
            ex.counterfactual
        ));
    }
    prompt.push_str(COMPLETION_INSTRUCTION);
    prompt.push_str(&format!(
        "\nOriginal Question: {} Answer: {}. Full Answer: {} Counterfactual Question:",
        question,
        capitalize(answer),
        full_answer
    ));
    Ok(prompt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attribute_prompt_ends_with_target_slot() {
        let p = build_counterfactual_prompt(
            SemanticLevel::Attribute,
            "Is the sofa red?",
            "Yes",
            "The sofa is red.",
        )
        .unwrap();
        assert!(p.ends_with(
            "Original Question: Is the sofa red? Answer: Yes. Full Answer: The sofa is red. Counterfactual Question:"
        ));
        assert!(p.contains("Is the shirt black?"));
    }

    #[test]
    fn relation_prompt_has_four_examples() {
        let p = build_counterfactual_prompt(
            SemanticLevel::Relation,
            "Is the cup next to the book?",
            "No",
            "The cup is on top of the book.",
        )
        .unwrap();
        assert_eq!(p.matches("Example ").count(), 4);
        assert!(p.ends_with("Counterfactual Question:"));
        assert!(p.contains("Is the cup next to the book?"));
    }

    #[test]
    fn object_prompt_contains_dog_cat_example_verbatim() {
        let p = build_counterfactual_prompt(
            SemanticLevel::Object,
            "Is there a lamp in this picture?",
            "No",
            "There is a shelf in the image.",
        )
        .unwrap();
        assert!(p.contains(
            "Original Question: Is there a dog in this picture? Answer: No. Full Answer: There is a cat in the image. Counterfactual Question: Is there a cat in this picture?"
        ));
    }

    #[test]
    fn assembly_is_deterministic() {
        let a = build_counterfactual_prompt(SemanticLevel::Object, "q?", "yes", "Full.").unwrap();
        let b = build_counterfactual_prompt(SemanticLevel::Object, "q?", "yes", "Full.").unwrap();
        assert_eq!(a, b);
    }
}
