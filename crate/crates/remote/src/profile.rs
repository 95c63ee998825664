//! How adapter commands map onto a platform's HTTP resources.

use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathTemplates {
    /// POST, body is the task description. Answers `{"id": ...}`.
    pub create: String,
    /// POST, body is `{"rows": [...]}`.
    pub rows: String,
    pub launch: String,
    pub pause: String,
    pub resume: String,
    pub cancel: String,
    /// GET, answers `{"events": [...], "cursor": ...}`.
    pub poll: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hide: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assign: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reject: Option<String>,
}

/// Endpoint layout and credential lookup for one platform. Paths may contain
/// `{task}`, replaced by the platform's job id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MappingProfile {
    #[serde(default = "default_name")]
    pub name: String,
    pub base_url: String,
    pub paths: PathTemplates,
    #[serde(default = "default_auth_header")]
    pub auth_header: String,
    /// Prepended to the credential, e.g. `"Bearer "`.
    #[serde(default)]
    pub auth_prefix: String,
    pub credential_env: String,
}

fn default_name() -> String {
    "remote".into()
}

fn default_auth_header() -> String {
    "Authorization".into()
}

#[derive(Debug, thiserror::Error)]
pub enum ProfileError {
    #[error("reading profile: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing profile: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("path template `{0}` must start with `/`")]
    BadTemplate(String),
}

impl MappingProfile {
    /// A conventional REST layout under `base_url`.
    pub fn rest(base_url: &str, credential_env: &str) -> Self {
        Self {
            name: default_name(),
            base_url: base_url.trim_end_matches('/').to_string(),
            paths: PathTemplates {
                create: "/jobs".into(),
                rows: "/jobs/{task}/units".into(),
                launch: "/jobs/{task}/launch".into(),
                pause: "/jobs/{task}/pause".into(),
                resume: "/jobs/{task}/resume".into(),
                cancel: "/jobs/{task}/cancel".into(),
                poll: "/jobs/{task}/events".into(),
                hide: None,
                assign: Some("/jobs/{task}/assignments".into()),
                reject: Some("/jobs/{task}/rejections".into()),
            },
            auth_header: default_auth_header(),
            auth_prefix: "Bearer ".into(),
            credential_env: credential_env.into(),
        }
    }

    pub fn parse(text: &str) -> Result<Self, ProfileError> {
        let p: Self = serde_json::from_str(text)?;
        p.check()?;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self, ProfileError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn check(&self) -> Result<(), ProfileError> {
        let p = &self.paths;
        let required = [&p.create, &p.rows, &p.launch, &p.pause, &p.resume, &p.cancel, &p.poll];
        let optional = [&p.hide, &p.assign, &p.reject];
        for t in required.into_iter().chain(optional.into_iter().flatten()) {
            if !t.starts_with('/') {
                return Err(ProfileError::BadTemplate(t.clone()));
            }
        }
        Ok(())
    }

    pub fn url(&self, template: &str, task: &str) -> String {
        format!("{}{}", self.base_url.trim_end_matches('/'), template.replace("{task}", task))
    }
}
