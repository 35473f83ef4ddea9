use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::TextMode;

const BUNDLED: &str = include_str!("../../templates.json");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskInstructions {
    pub text: String,
    pub summary: String,
    pub keyphrases: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRewrites {
    pub summary: String,
    pub keyphrases: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskTemplate {
    pub description: String,
    pub instruction: TaskInstructions,
    pub rewrite: TaskRewrites,
}

/// A ready-to-use lens: what to rewrite with (if anything) and what to
/// embed with.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplatePair {
    pub rewrite_prompt: Option<String>,
    pub embedding_instruction: String,
}

/// Rewrite prompts and embedding instructions for common analysis tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateLibrary {
    pub tasks: BTreeMap<String, TaskTemplate>,
}

impl TemplateLibrary {
    pub fn bundled() -> Self {
        Self {
            tasks: serde_json::from_str(BUNDLED).expect("bundled templates are valid JSON"),
        }
    }

    pub fn names(&self) -> Vec<&str> {
        self.tasks.keys().map(String::as_str).collect()
    }

    pub fn get(&self, task: &str, mode: TextMode) -> Option<TemplatePair> {
        let t = self.tasks.get(task)?;
        Some(match mode {
            TextMode::Text => TemplatePair {
                rewrite_prompt: None,
                embedding_instruction: t.instruction.text.clone(),
            },
            TextMode::Summary => TemplatePair {
                rewrite_prompt: Some(t.rewrite.summary.clone()),
                embedding_instruction: t.instruction.summary.clone(),
            },
            TextMode::Keyphrases => TemplatePair {
                rewrite_prompt: Some(t.rewrite.keyphrases.clone()),
                embedding_instruction: t.instruction.keyphrases.clone(),
            },
        })
    }
}
