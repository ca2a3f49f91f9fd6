// SPDX-License-Identifier: MIT OR Apache-2.0

//! Class index → human-readable label.
//!
//! Label files are plain UTF-8 with one label per line; line `i` names class
//! `i`. Without a file, labels fall back to the decimal class index.

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("label file has {got} lines, the model has {expected} classes")]
    Count { expected: usize, got: usize },
    #[error("reading label file: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Labels {
    names: Vec<String>,
}

impl Labels {
    pub fn numeric(num_classes: usize) -> Self {
        Self {
            names: (0..num_classes).map(|i| i.to_string()).collect(),
        }
    }

    pub fn parse(text: &str, num_classes: usize) -> Result<Self, LabelError> {
        let names: Vec<String> = text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect();
        if names.len() != num_classes {
            return Err(LabelError::Count {
                expected: num_classes,
                got: names.len(),
            });
        }
        Ok(Self { names })
    }

    /// Reads `path`; a missing file degrades to numeric labels.
    pub fn load_or_numeric(path: Option<&Path>, num_classes: usize) -> Result<Self, LabelError> {
        match path {
            None => Ok(Self::numeric(num_classes)),
            Some(p) => match std::fs::read_to_string(p) {
                Ok(text) => Self::parse(&text, num_classes),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                    log::warn!("label file {} not found, using numeric labels", p.display());
                    Ok(Self::numeric(num_classes))
                }
                Err(e) => Err(e.into()),
            },
        }
    }

    pub fn label(&self, class: usize) -> &str {
        self.names.get(class).map_or("?", String::as_str)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}
