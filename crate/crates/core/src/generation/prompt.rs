use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::Language;
use crate::retrieval::ContextBundle;

pub const CONTEXT_PLACEHOLDER: &str = "{context}";
pub const QUESTION_PLACEHOLDER: &str = "{question}";

#[derive(Debug, Error, PartialEq)]
pub enum TemplateError {
    #[error("template {template_id}: placeholder {placeholder} must appear exactly once (found {count})")]
    Placeholder {
        template_id: String,
        placeholder: &'static str,
        count: usize,
    },
    #[error("question is blank")]
    BlankQuestion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Context,
    Question,
}

/// A validated prompt template. Construction fails unless the user frame
/// contains `{context}` and `{question}` exactly once each, so rendering
/// itself cannot fail on template shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTemplate", into = "RawTemplate")]
pub struct PromptTemplate {
    template_id: String,
    language: Language,
    system_text: String,
    user_frame: String,
    no_context_text: String,
    // user_frame split around the two placeholders
    parts: [String; 3],
    order: [Slot; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawTemplate {
    template_id: String,
    language: Language,
    system_text: String,
    user_frame: String,
    no_context_text: String,
}

impl TryFrom<RawTemplate> for PromptTemplate {
    type Error = TemplateError;

    fn try_from(r: RawTemplate) -> Result<Self, Self::Error> {
        PromptTemplate::new(r.template_id, r.language, r.system_text, r.user_frame, r.no_context_text)
    }
}

impl From<PromptTemplate> for RawTemplate {
    fn from(t: PromptTemplate) -> Self {
        RawTemplate {
            template_id: t.template_id,
            language: t.language,
            system_text: t.system_text,
            user_frame: t.user_frame,
            no_context_text: t.no_context_text,
        }
    }
}

impl PromptTemplate {
    pub fn new(
        template_id: impl Into<String>,
        language: Language,
        system_text: impl Into<String>,
        user_frame: impl Into<String>,
        no_context_text: impl Into<String>,
    ) -> Result<Self, TemplateError> {
        let template_id = template_id.into();
        let user_frame = user_frame.into();
        for placeholder in [CONTEXT_PLACEHOLDER, QUESTION_PLACEHOLDER] {
            let count = user_frame.matches(placeholder).count();
            if count != 1 {
                return Err(TemplateError::Placeholder {
                    template_id,
                    placeholder,
                    count,
                });
            }
        }
        let c = user_frame.find(CONTEXT_PLACEHOLDER).expect("checked");
        let q = user_frame.find(QUESTION_PLACEHOLDER).expect("checked");
        let (first, first_len, second, second_len, order) = if c < q {
            (c, CONTEXT_PLACEHOLDER.len(), q, QUESTION_PLACEHOLDER.len(), [Slot::Context, Slot::Question])
        } else {
            (q, QUESTION_PLACEHOLDER.len(), c, CONTEXT_PLACEHOLDER.len(), [Slot::Question, Slot::Context])
        };
        let parts = [
            user_frame[..first].to_owned(),
            user_frame[first + first_len..second].to_owned(),
            user_frame[second + second_len..].to_owned(),
        ];
        Ok(Self {
            template_id,
            language,
            system_text: system_text.into(),
            user_frame,
            no_context_text: no_context_text.into(),
            parts,
            order,
        })
    }

    pub fn template_id(&self) -> &str {
        &self.template_id
    }

    pub fn language(&self) -> Language {
        self.language
    }

    pub fn system_text(&self) -> &str {
        &self.system_text
    }

    pub fn user_frame(&self) -> &str {
        &self.user_frame
    }

    /// Text substituted for `{context}` when no source fits the bundle.
    pub fn no_context_text(&self) -> &str {
        &self.no_context_text
    }

    /// Built-in template for a language; `Unknown` falls back to Finnish.
    pub fn builtin(language: Language) -> Self {
        let (id, system, frame, none) = match language {
            Language::En => (
                "grounded-en",
                "You answer agricultural questions using only the numbered sources provided. \
                 Cite the sources you use as [S1], [S2] and so on. If the sources do not contain \
                 the answer, say so plainly instead of guessing.",
                "Sources:\n{context}\nQuestion: {question}\n\nAnswer in English and cite your sources.",
                "NO SUPPORTING DOCUMENTS FOUND. Tell the user that no supporting documents were found for this question and do not invent an answer.",
            ),
            Language::Sv => (
                "grounded-sv",
                "Du besvarar jordbruksfrågor enbart utifrån de numrerade källorna. \
                 Hänvisa till källorna du använder som [S1], [S2] och så vidare. Om källorna \
                 inte innehåller svaret, säg det tydligt i stället för att gissa.",
                "Källor:\n{context}\nFråga: {question}\n\nSvara på svenska och hänvisa till dina källor.",
                "INGA STÖDJANDE DOKUMENT HITTADES. Berätta för användaren att inga stödjande dokument hittades för frågan och hitta inte på ett svar.",
            ),
            Language::Fi | Language::Unknown => (
                "grounded-fi",
                "Vastaat maatalouskysymyksiin käyttäen ainoastaan annettuja numeroituja lähteitä. \
                 Viittaa käyttämiisi lähteisiin muodossa [S1], [S2] ja niin edelleen. Jos lähteet \
                 eivät sisällä vastausta, kerro se suoraan arvaamatta.",
                "Lähteet:\n{context}\nKysymys: {question}\n\nVastaa suomeksi ja viittaa lähteisiin.",
                "TUKEVIA ASIAKIRJOJA EI LÖYTYNYT. Kerro käyttäjälle, ettei kysymykseen löytynyt tukevia asiakirjoja, äläkä keksi vastausta.",
            ),
        };
        let lang = if language == Language::Unknown { Language::Fi } else { language };
        Self::new(id, lang, system, frame, none).expect("built-in templates are well formed")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub system_text: String,
    pub user_text: String,
}

/// Substitutes the context bundle and question into a template in one pass,
/// so placeholder-like text inside either value is left alone.
pub fn render_prompt(
    bundle: &ContextBundle,
    question: &str,
    template: &PromptTemplate,
) -> Result<RenderedPrompt, TemplateError> {
    if question.trim().is_empty() {
        return Err(TemplateError::BlankQuestion);
    }
    let context = if bundle.no_context || bundle.hits.is_empty() {
        template.no_context_text.as_str()
    } else {
        bundle.context_text.as_str()
    };
    let value = |slot: Slot| match slot {
        Slot::Context => context,
        Slot::Question => question,
    };
    let p = &template.parts;
    let mut user_text = String::with_capacity(p.iter().map(String::len).sum::<usize>() + context.len() + question.len());
    user_text.push_str(&p[0]);
    user_text.push_str(value(template.order[0]));
    user_text.push_str(&p[1]);
    user_text.push_str(value(template.order[1]));
    user_text.push_str(&p[2]);
    Ok(RenderedPrompt {
        system_text: template.system_text.clone(),
        user_text,
    })
}
