//! Editable prompt templates for every LLM seat.
//!
//! Placeholders: `{{DOMAIN}}` and `{{REGION_GROUP}}` are filled once from
//! configuration; `{text}`, `{max_tags}`, `{max_n}`, `{q}`, `{hist}`,
//! `{sub_query}`, `{path}` and `{context}` are filled per request.

use std::fs;
use std::io;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub system: String,
    pub user: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    pub master_tags: Template,
    pub paragraph_tags: Template,
    pub rewrite: Template,
    pub prune: Template,
    pub answer: Template,
}

macro_rules! builtin {
    ($name:literal) => {
        Template {
            system: include_str!(concat!("../prompts/", $name, ".system.txt")).to_string(),
            user: include_str!(concat!("../prompts/", $name, ".user.txt")).to_string(),
        }
    };
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            master_tags: builtin!("master_tags"),
            paragraph_tags: builtin!("paragraph_tags"),
            rewrite: builtin!("rewrite"),
            prune: builtin!("prune"),
            answer: builtin!("answer"),
        }
    }
}

impl PromptTemplates {
    /// Loads `<name>.system.txt` / `<name>.user.txt` overrides from `dir`;
    /// missing files keep the built-in text.
    pub fn load_dir(dir: &Path) -> io::Result<Self> {
        let mut templates = Self::default();
        for (name, slot) in [
            ("master_tags", &mut templates.master_tags),
            ("paragraph_tags", &mut templates.paragraph_tags),
            ("rewrite", &mut templates.rewrite),
            ("prune", &mut templates.prune),
            ("answer", &mut templates.answer),
        ] {
            let sys = dir.join(format!("{name}.system.txt"));
            if sys.exists() {
                slot.system = fs::read_to_string(sys)?;
            }
            let user = dir.join(format!("{name}.user.txt"));
            if user.exists() {
                slot.user = fs::read_to_string(user)?;
            }
        }
        Ok(templates)
    }

    /// Substitutes the configuration-level placeholders in every template.
    pub fn with_domain(mut self, domain: &str, region_group: &str) -> Self {
        for t in [
            &mut self.master_tags,
            &mut self.paragraph_tags,
            &mut self.rewrite,
            &mut self.prune,
            &mut self.answer,
        ] {
            for s in [&mut t.system, &mut t.user] {
                *s = s
                    .replace("{{DOMAIN}}", domain)
                    .replace("{{REGION_GROUP}}", region_group);
            }
        }
        self
    }
}

/// Single-pass placeholder substitution, so values containing `{...}` are
/// never re-expanded.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    'outer: while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open..];
        for (name, value) in vars {
            let key_len = name.len() + 2;
            if after.len() >= key_len
                && after.as_bytes()[key_len - 1] == b'}'
                && &after[1..key_len - 1] == *name
            {
                out.push_str(value);
                rest = &after[key_len..];
                continue 'outer;
            }
        }
        out.push('{');
        rest = &after[1..];
    }
    out.push_str(rest);
    out
}
