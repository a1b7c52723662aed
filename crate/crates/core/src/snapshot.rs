//! JSON checkpoints of a [`FilterState`].

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::FilterState;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub format_version: u32,
    pub m: usize,
    pub t: usize,
    pub r: usize,
    pub state: FilterState,
}

impl Snapshot {
    pub fn new(state: FilterState) -> Self {
        Snapshot {
            format_version: FORMAT_VERSION,
            m: state.m(),
            t: state.t(),
            r: state.cfg.r(),
            state,
        }
    }

    /// Checks the version and that the declared dimensions match the payload.
    pub fn validate(self) -> Result<FilterState> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported snapshot format version {} (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        let s = &self.state;
        let r = s.cfg.rank.unwrap_or(0);
        let consistent = s.m() == self.m
            && s.t() == self.t
            && r == self.r
            && s.loadings.m() == self.m
            && s.loadings.means.iter().all(|v| v.len() == r)
            && s.loadings.covs.iter().all(|c| c.shape() == (r, r))
            && s.states.t() == self.t
            && s.states.means.iter().all(|v| v.len() == r)
            && s.states.diag_blocks.len() == self.t
            && s.states.super_blocks.len() == self.t.saturating_sub(1)
            && s.transition.r() == r
            && s.transition.shared_cov.shape() == (r, r)
            && s.precisions.gamma.len() == r
            && s.precisions.upsilon.len() == r
            && s.last_y_hat.shape() == (self.m, self.t);
        if !consistent {
            return Err(Error::Dimension(format!(
                "snapshot payload does not match declared dimensions m={}, t={}, r={}",
                self.m, self.t, self.r
            )));
        }
        Ok(self.state)
    }
}

pub fn to_json(state: &FilterState) -> Result<String> {
    Ok(serde_json::to_string_pretty(&Snapshot::new(state.clone()))?)
}

pub fn from_json(text: &str) -> Result<FilterState> {
    serde_json::from_str::<Snapshot>(text)?.validate()
}

pub fn save(state: &FilterState, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_json(state)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<FilterState> {
    from_json(&std::fs::read_to_string(path)?)
}
