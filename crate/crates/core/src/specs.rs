//! Stage spec documents and prompt rendering.
//!
//! Every agent call in the pipeline is parameterized by a markdown spec for
//! its stage. Specs are loaded once into an immutable set, hashed for
//! provenance, and rendered into prompts by pure `{{key}}` substitution.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::sha256_hex;

/// The eight lifecycle stages. The first five form the build pipeline; the
/// last three belong to the daemon and have built-in default specs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Probe,
    Identify,
    Interface,
    Serve,
    Deploy,
    Watch,
    Heal,
    Perceive,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Probe,
        Stage::Identify,
        Stage::Interface,
        Stage::Serve,
        Stage::Deploy,
        Stage::Watch,
        Stage::Heal,
        Stage::Perceive,
    ];

    /// Stages whose spec file must exist on disk.
    pub const PIPELINE: [Stage; 5] = [
        Stage::Probe,
        Stage::Identify,
        Stage::Interface,
        Stage::Serve,
        Stage::Deploy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Probe => "probe",
            Stage::Identify => "identify",
            Stage::Interface => "interface",
            Stage::Serve => "serve",
            Stage::Deploy => "deploy",
            Stage::Watch => "watch",
            Stage::Heal => "heal",
            Stage::Perceive => "perceive",
        }
    }

    fn is_pipeline(self) -> bool {
        Self::PIPELINE.contains(&self)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("spec set incomplete: missing {0}.md")]
    SpecSetIncomplete(Stage),
    #[error("failed to read spec {path}: {source}")]
    IoFailure {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("missing context key: {0}")]
    MissingContext(String),
}

/// One stage spec: markdown body plus its content digest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecDocument {
    pub stage: Stage,
    pub body: String,
    pub content_hash: String,
    pub version: u64,
    /// True when the body came from the built-in default rather than a file.
    pub defaulted: bool,
}

impl SpecDocument {
    pub fn new(stage: Stage, body: String, version: u64, defaulted: bool) -> Self {
        let content_hash = sha256_hex(body.as_bytes());
        Self {
            stage,
            body,
            content_hash,
            version,
            defaulted,
        }
    }

    /// Recompute the digest from the body; must equal the stored hash.
    pub fn verify_hash(&self) -> bool {
        sha256_hex(self.body.as_bytes()) == self.content_hash
    }
}

/// A prompt produced from a spec body with all placeholders substituted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub stage: Stage,
    pub text: String,
    pub context_keys: Vec<String>,
    pub spec_hash: String,
}

/// An immutable set of the eight stage specs. Reloading produces a new set
/// with a bumped version rather than mutating in place.
#[derive(Debug, Clone)]
pub struct SpecSet {
    docs: BTreeMap<Stage, SpecDocument>,
    pub version: u64,
}

impl SpecSet {
    pub fn get(&self, stage: Stage) -> &SpecDocument {
        &self.docs[&stage]
    }

    pub fn iter(&self) -> impl Iterator<Item = &SpecDocument> {
        self.docs.values()
    }

    /// Per-stage content hashes, for manifest provenance.
    pub fn hashes(&self) -> BTreeMap<String, String> {
        self.docs
            .values()
            .map(|d| (d.stage.name().to_string(), d.content_hash.clone()))
            .collect()
    }

    pub fn reload(&self, dir: &Path) -> Result<SpecSet, SpecError> {
        load_spec_set_versioned(dir, self.version + 1)
    }
}

/// Load `<stage>.md` for all eight stages from `dir`.
///
/// Pipeline-stage files are mandatory; daemon-stage files fall back to the
/// built-in defaults and are flagged `defaulted`.
pub fn load_spec_set(dir: &Path) -> Result<SpecSet, SpecError> {
    load_spec_set_versioned(dir, 1)
}

fn load_spec_set_versioned(dir: &Path, version: u64) -> Result<SpecSet, SpecError> {
    let mut docs = BTreeMap::new();
    for stage in Stage::ALL {
        let path = dir.join(format!("{stage}.md"));
        let doc = match std::fs::read_to_string(&path) {
            Ok(body) => SpecDocument::new(stage, body, version, false),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                if stage.is_pipeline() {
                    return Err(SpecError::SpecSetIncomplete(stage));
                }
                SpecDocument::new(
                    stage,
                    crate::fixtures::default_spec_body(stage).to_string(),
                    version,
                    true,
                )
            }
            Err(e) => {
                return Err(SpecError::IoFailure {
                    path: path.display().to_string(),
                    source: e,
                })
            }
        };
        docs.insert(stage, doc);
    }
    Ok(SpecSet { docs, version })
}

/// Substitute `{{key}}` placeholders in the spec body.
///
/// Pure: identical inputs yield a byte-identical prompt. Unused context keys
/// are accepted silently; an unresolved placeholder is an error.
pub fn render_prompt(
    spec: &SpecDocument,
    context: &BTreeMap<String, String>,
) -> Result<RenderedPrompt, SpecError> {
    let re = placeholder_re();
    let mut missing: Option<String> = None;
    let text = re
        .replace_all(&spec.body, |caps: &regex::Captures<'_>| {
            let key = &caps[1];
            match context.get(key) {
                Some(v) => v.clone(),
                None => {
                    if missing.is_none() {
                        missing = Some(key.to_string());
                    }
                    String::new()
                }
            }
        })
        .into_owned();
    if let Some(key) = missing {
        return Err(SpecError::MissingContext(key));
    }
    Ok(RenderedPrompt {
        stage: spec.stage,
        text,
        context_keys: context.keys().cloned().collect(),
        spec_hash: spec.content_hash.clone(),
    })
}

fn placeholder_re() -> &'static regex::Regex {
    use std::sync::OnceLock;
    static RE: OnceLock<regex::Regex> = OnceLock::new();
    RE.get_or_init(|| regex::Regex::new(r"\{\{([A-Za-z0-9_]+)\}\}").unwrap())
}

/// Convenience for building render contexts.
pub fn context(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
    pairs
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}
