//! Plain-text parameter snapshots.
//!
//! Each parameter is a header line followed by its tensor text:
//!
//! ```text
//! param: 0.weight manifold: stiefel(64,32,transposed)
//! shape: 32 64
//! ...
//! ```

use std::path::Path;

use crate::autodiff::Parameter;
use crate::error::{Error, Result};
use crate::manifold::ManifoldDescriptor;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub manifold: ManifoldDescriptor,
    pub value: Tensor,
}

impl From<&Parameter> for CheckpointEntry {
    fn from(p: &Parameter) -> Self {
        Self {
            name: p.name().to_string(),
            manifold: p.manifold().clone(),
            value: p.value().clone(),
        }
    }
}

pub fn to_text<'a>(params: impl IntoIterator<Item = &'a Parameter>) -> String {
    let mut out = String::new();
    for p in params {
        out.push_str(&format!("param: {} manifold: {}\n", p.name(), p.manifold()));
        out.push_str(&p.value().to_text());
    }
    out
}

pub fn parse(text: &str) -> Result<Vec<CheckpointEntry>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let mut entries = Vec::new();
    while let Some(header) = lines.next() {
        let bad = || Error::InvalidArgument(format!("bad checkpoint header `{header}`"));
        let rest = header.strip_prefix("param: ").ok_or_else(bad)?;
        let (name, manifold) = rest.split_once(" manifold: ").ok_or_else(bad)?;
        let manifold: ManifoldDescriptor = manifold.parse()?;
        let value = Tensor::from_text_lines(&mut lines)?;
        if value.shape() != manifold.storage_shape().as_slice() {
            return Err(Error::shape(
                format!("checkpoint entry {name}"),
                format!("{:?} stored for {manifold}", value.shape()),
            ));
        }
        entries.push(CheckpointEntry {
            name: name.to_string(),
            manifold,
            value,
        });
    }
    Ok(entries)
}

pub fn save<'a>(path: &Path, params: impl IntoIterator<Item = &'a Parameter>) -> Result<()> {
    std::fs::write(path, to_text(params))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<CheckpointEntry>> {
    parse(&std::fs::read_to_string(path)?)
}

/// Copies stored values into the parameters with matching names. Every
/// parameter must be present with the same manifold.
pub fn restore<'a>(params: impl IntoIterator<Item = &'a mut Parameter>, entries: &[CheckpointEntry]) -> Result<()> {
    for p in params {
        let entry = entries
            .iter()
            .find(|e| e.name == p.name())
            .ok_or_else(|| Error::InvalidArgument(format!("checkpoint has no parameter `{}`", p.name())))?;
        if &entry.manifold != p.manifold() {
            return Err(Error::InvalidArgument(format!(
                "parameter `{}` is on {}, checkpoint has {}",
                p.name(),
                p.manifold(),
                entry.manifold
            )));
        }
        p.value = entry.value.clone();
        p.zero_grad();
    }
    Ok(())
}
