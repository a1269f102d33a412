//! Token lists on the command line: decimal ids, or token text resolved
//! through the exporter's vocab map.

use std::collections::HashMap;
use std::path::Path;

use overwhelm_core::TokenId;

use crate::error::{CliError, Result};

#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    /// `None` marks text shared by several ids.
    index: HashMap<String, Option<usize>>,
}

impl Vocab {
    pub fn parse(text: &str) -> Self {
        let body = text.strip_suffix('\n').unwrap_or(text);
        let tokens: Vec<String> = if text.is_empty() {
            Vec::new()
        } else {
            body.split('\n').map(str::to_owned).collect()
        };
        let mut index = HashMap::new();
        for (id, t) in tokens.iter().enumerate() {
            index
                .entry(t.clone())
                .and_modify(|slot| *slot = None)
                .or_insert(Some(id));
        }
        Self { tokens, index }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.to_owned(),
            source,
        })?;
        Ok(Self::parse(&text))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn text(&self, t: TokenId) -> Option<&str> {
        self.tokens.get(t.0).map(String::as_str)
    }

    fn lookup(&self, item: &str) -> Result<TokenId> {
        match self.index.get(item) {
            Some(Some(id)) => Ok(TokenId(*id)),
            Some(None) => Err(CliError::Usage(format!(
                "token text `{item}` appears more than once in the vocab map; use #<id>"
            ))),
            None => item
                .strip_prefix('#')
                .and_then(|id| id.parse().ok())
                .map(TokenId)
                .ok_or_else(|| CliError::Usage(format!("token `{item}` is not in the vocab map"))),
        }
    }
}

pub struct TokenReader<'a> {
    pub vocab: Option<&'a Vocab>,
}

impl TokenReader<'_> {
    pub fn one(&self, item: &str) -> Result<TokenId> {
        match self.vocab {
            Some(v) => v.lookup(item),
            None => item
                .trim()
                .parse()
                .map(TokenId)
                .map_err(|_| CliError::Usage(format!("`{item}` is not a token id"))),
        }
    }

    /// Comma-separated tokens; the empty string is the empty list.
    pub fn list(&self, s: &str) -> Result<Vec<TokenId>> {
        if s.is_empty() {
            return Ok(Vec::new());
        }
        s.split(',').map(|item| self.one(item)).collect()
    }
}
