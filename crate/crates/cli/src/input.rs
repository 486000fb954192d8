//! Argument forms shared by every command: `@file`, `@-` for stdin, inline
//! JSON, or a bare identifier.

use std::path::PathBuf;

use aura_core::{AuraError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Source {
    Stdin,
    File(PathBuf),
    Inline(String),
    Id(String),
}

impl Source {
    pub fn classify(arg: &str) -> Source {
        let t = arg.trim();
        if t == "@-" {
            Source::Stdin
        } else if let Some(p) = t.strip_prefix('@') {
            Source::File(PathBuf::from(p))
        } else if t.starts_with('{') || t.starts_with('[') {
            Source::Inline(t.to_string())
        } else {
            Source::Id(t.to_string())
        }
    }
}

/// Reads the document text of a non-id source.
pub fn read_text(src: &Source, stdin: &mut dyn FnMut() -> Result<String>) -> Result<String> {
    match src {
        Source::Stdin => stdin(),
        Source::File(p) => std::fs::read_to_string(p)
            .map_err(|e| AuraError::InvalidInput(format!("cannot read {}: {e}", p.display()))),
        Source::Inline(t) => Ok(t.clone()),
        Source::Id(id) => Err(AuraError::InvalidInput(format!(
            "expected @file, @- or inline JSON, got '{id}'"
        ))),
    }
}
