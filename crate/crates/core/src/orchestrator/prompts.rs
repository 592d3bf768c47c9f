//! Prompt templates. The texts live in a TOML file (a copy is compiled in)
//! so deployments can tune wording, but two instruction fragments are
//! load-bearing — the verdict parser and the review contract depend on
//! them — and template validation refuses texts that drop them.

use std::path::Path;

use serde::Deserialize;

use crate::data::VQAItem;
use crate::orchestrator::{OrchestratorError, Stage};

/// Required verbatim in every initial-stage template.
pub const INITIAL_FRAGMENT: &str =
    "Please proceed with a step-by-step analysis and provide a rationale";
/// Required verbatim in every followup-stage template.
pub const VALIDITY_FRAGMENT: &str = "judge whether this rationale is effectively valid";

const BUILTIN: &str = include_str!("../../templates/prompts.toml");

#[derive(Debug, Clone, Deserialize)]
pub struct PromptTemplates {
    initial: String,
    followup: String,
    caption: String,
}

impl PromptTemplates {
    /// The compiled-in templates.
    pub fn builtin() -> Self {
        let t: PromptTemplates = toml::from_str(BUILTIN).expect("builtin template file parses");
        t.validate().expect("builtin templates satisfy contracts");
        t
    }

    pub fn from_file(path: &Path) -> Result<Self, OrchestratorError> {
        let text = std::fs::read_to_string(path).map_err(|source| OrchestratorError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let t: PromptTemplates = toml::from_str(&text)
            .map_err(|e| OrchestratorError::Config(format!("{}: {e}", path.display())))?;
        t.validate()?;
        Ok(t)
    }

    fn validate(&self) -> Result<(), OrchestratorError> {
        let checks: [(Stage, &str, &[&str]); 3] = [
            (
                Stage::Initial,
                &self.initial,
                &[INITIAL_FRAGMENT, "{question}", "{options}"],
            ),
            (
                Stage::Followup,
                &self.followup,
                &[VALIDITY_FRAGMENT, "{question}", "{rationale}"],
            ),
            (Stage::Caption, &self.caption, &["{question}"]),
        ];
        for (stage, text, needles) in checks {
            for needle in needles {
                if !text.contains(needle) {
                    return Err(OrchestratorError::BadTemplate {
                        stage,
                        needs: (*needle).to_string(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Render the template for a stage. The followup stage embeds the prior
    /// rationale and refuses to render without one; regeneration reuses the
    /// followup prompt (the review instructions ask for a corrected
    /// rationale when the verdict is ineffective).
    pub fn render(
        &self,
        stage: Stage,
        item: &VQAItem,
        prior: Option<&str>,
    ) -> Result<String, OrchestratorError> {
        let template = match stage {
            Stage::Initial => &self.initial,
            Stage::Followup | Stage::Regen => &self.followup,
            Stage::Caption => &self.caption,
        };
        let options = if item.options.is_empty() {
            "open-ended".to_string()
        } else {
            item.options.join(" | ")
        };
        let mut text = template
            .replace("{question}", &item.question)
            .replace("{options}", &options);
        if matches!(stage, Stage::Followup | Stage::Regen) {
            let prior = prior.ok_or_else(|| OrchestratorError::MissingPrior {
                item_id: item.id.clone(),
            })?;
            text = text.replace("{rationale}", prior);
        }
        Ok(text)
    }
}

/// Convenience wrapper over [`PromptTemplates::render`].
pub fn build_prompt(
    templates: &PromptTemplates,
    stage: Stage,
    item: &VQAItem,
    prior: Option<&str>,
) -> Result<String, OrchestratorError> {
    templates.render(stage, item, prior)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn item() -> VQAItem {
        VQAItem {
            id: "case-1".into(),
            question: "Is there a localized mass?".into(),
            options: vec!["yes".into(), "no".into()],
            answer: "yes".into(),
            image_features: PathBuf::from("f.txt"),
            category: "chest".into(),
        }
    }

    #[test]
    fn initial_prompt_carries_question_and_instruction() {
        let t = PromptTemplates::builtin();
        let p = t.render(Stage::Initial, &item(), None).unwrap();
        assert!(p.contains("Is there a localized mass?"));
        assert!(p.contains("yes | no"));
        assert!(p.contains(INITIAL_FRAGMENT));
    }

    #[test]
    fn rendering_is_deterministic() {
        let t = PromptTemplates::builtin();
        let a = t.render(Stage::Initial, &item(), None).unwrap();
        let b = t.render(Stage::Initial, &item(), None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn followup_embeds_prior_verbatim_and_requires_it() {
        let t = PromptTemplates::builtin();
        let prior = "Step 1: look left.\nStep 2: decide.";
        let p = t.render(Stage::Followup, &item(), Some(prior)).unwrap();
        assert!(p.contains(prior));
        assert!(p.contains(VALIDITY_FRAGMENT));
        assert!(matches!(
            t.render(Stage::Followup, &item(), None),
            Err(OrchestratorError::MissingPrior { .. })
        ));
    }

    #[test]
    fn open_ended_items_render_without_options() {
        let t = PromptTemplates::builtin();
        let mut it = item();
        it.options.clear();
        let p = t.render(Stage::Initial, &it, None).unwrap();
        assert!(p.contains("open-ended"));
    }

    #[test]
    fn file_templates_must_keep_required_fragments() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prompts.toml");

        std::fs::write(
            &path,
            r#"
initial = "Q {question} O {options}. Please proceed with a step-by-step analysis and provide a rationale."
followup = "R {rationale} for {question}; judge whether this rationale is effectively valid. VERDICT please."
caption = "caption for {question}"
"#,
        )
        .unwrap();
        let t = PromptTemplates::from_file(&path).unwrap();
        assert!(t.render(Stage::Initial, &item(), None).is_ok());

        std::fs::write(
            &path,
            r#"
initial = "Q {question} O {options} with no instruction"
followup = "R {rationale} {question}; judge whether this rationale is effectively valid."
caption = "caption {question}"
"#,
        )
        .unwrap();
        assert!(matches!(
            PromptTemplates::from_file(&path),
            Err(OrchestratorError::BadTemplate {
                stage: Stage::Initial,
                ..
            })
        ));
    }

    #[test]
    fn regen_uses_the_followup_prompt() {
        let t = PromptTemplates::builtin();
        let f = t.render(Stage::Followup, &item(), Some("r")).unwrap();
        let r = t.render(Stage::Regen, &item(), Some("r")).unwrap();
        assert_eq!(f, r);
    }
}
