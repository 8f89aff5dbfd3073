//! Fixture directory loading.
//!
//! ```text
//! fixtures/
//!   entities.jsonl      central entity records, one JSON object per line
//!   tags.jsonl          tag fixtures, one JSON object per line
//!   actors.toml         [[actor]] tables
//!   devices.toml        [[device]] tables
//!   procedures/*.toml   one procedure per file
//!   manifests/*.toml    one source manifest per file
//!   scripts/*.toml      scenario scripts
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Deserialize;

use crate::delivery::DeviceProfile;
use crate::knowledge::SourceManifest;
use crate::scenario::ScenarioScript;
use crate::tags::{EntityRecord, TagFixture};
use crate::workflow::{Actor, ProcedureDefinition};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("fixture `{file}`: {message}")]
pub struct FixtureError {
    pub file: String,
    pub message: String,
}

impl FixtureError {
    fn new(file: &str, message: impl ToString) -> Self {
        FixtureError {
            file: file.to_string(),
            message: message.to_string(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FixtureBundle {
    pub entities: Vec<EntityRecord>,
    pub tags: Vec<TagFixture>,
    pub actors: Vec<Actor>,
    pub devices: Vec<DeviceProfile>,
    pub procedures: Vec<ProcedureDefinition>,
    pub manifests: Vec<SourceManifest>,
    pub scripts: Vec<ScenarioScript>,
}

const BUILTIN: &[(&str, &str)] = &[
    (
        "entities.jsonl",
        include_str!("../../../fixtures/entities.jsonl"),
    ),
    ("tags.jsonl", include_str!("../../../fixtures/tags.jsonl")),
    ("actors.toml", include_str!("../../../fixtures/actors.toml")),
    (
        "devices.toml",
        include_str!("../../../fixtures/devices.toml"),
    ),
    (
        "procedures/hd-replace.toml",
        include_str!("../../../fixtures/procedures/hd-replace.toml"),
    ),
    (
        "procedures/psu-check.toml",
        include_str!("../../../fixtures/procedures/psu-check.toml"),
    ),
    (
        "manifests/appendix.toml",
        include_str!("../../../fixtures/manifests/appendix.toml"),
    ),
    (
        "manifests/hd-replace-guide.toml",
        include_str!("../../../fixtures/manifests/hd-replace-guide.toml"),
    ),
    (
        "manifests/practice.toml",
        include_str!("../../../fixtures/manifests/practice.toml"),
    ),
    (
        "scripts/hd-replace-nominal.toml",
        include_str!("../../../fixtures/scripts/hd-replace-nominal.toml"),
    ),
    (
        "scripts/hd-replace-deviant.toml",
        include_str!("../../../fixtures/scripts/hd-replace-deviant.toml"),
    ),
    (
        "scripts/hd-replace-deviant-advisory.toml",
        include_str!("../../../fixtures/scripts/hd-replace-deviant-advisory.toml"),
    ),
    (
        "scripts/hd-replace-trainee.toml",
        include_str!("../../../fixtures/scripts/hd-replace-trainee.toml"),
    ),
];

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ActorsFile {
    #[serde(default)]
    actor: Vec<Actor>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DevicesFile {
    #[serde(default)]
    device: Vec<DeviceProfile>,
}

fn jsonl<T: DeserializeOwned>(file: &str, text: &str) -> Result<Vec<T>, FixtureError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| FixtureError::new(file, format!("line {}: {e}", i + 1)))
        })
        .collect()
}

fn toml_doc<T: DeserializeOwned>(file: &str, text: &str) -> Result<T, FixtureError> {
    toml::from_str(text).map_err(|e| FixtureError::new(file, e))
}

fn unique<'a>(
    file: &str,
    what: &str,
    ids: impl IntoIterator<Item = &'a str>,
) -> Result<(), FixtureError> {
    let mut seen = BTreeSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(FixtureError::new(file, format!("duplicate {what} `{id}`")));
        }
    }
    Ok(())
}

impl FixtureBundle {
    /// Builds a bundle from `(relative path, contents)` pairs. Files inside
    /// each directory are taken in path order.
    pub fn from_files<'a>(
        files: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<Self, FixtureError> {
        let mut files: Vec<(&str, &str)> = files.into_iter().collect();
        files.sort_by_key(|(path, _)| *path);
        let mut bundle = FixtureBundle::default();
        for (path, text) in files {
            match path {
                "entities.jsonl" => bundle.entities = jsonl(path, text)?,
                "tags.jsonl" => bundle.tags = jsonl(path, text)?,
                "actors.toml" => bundle.actors = toml_doc::<ActorsFile>(path, text)?.actor,
                "devices.toml" => bundle.devices = toml_doc::<DevicesFile>(path, text)?.device,
                p if p.starts_with("procedures/") => bundle.procedures.push(toml_doc(path, text)?),
                p if p.starts_with("manifests/") => bundle.manifests.push(toml_doc(path, text)?),
                p if p.starts_with("scripts/") => bundle.scripts.push(toml_doc(path, text)?),
                _ => {}
            }
        }
        unique(
            "entities.jsonl",
            "entity",
            bundle.entities.iter().map(|e| e.id.as_str()),
        )?;
        unique(
            "tags.jsonl",
            "tag",
            bundle.tags.iter().map(|t| t.tag_id.as_str()),
        )?;
        unique(
            "actors.toml",
            "actor",
            bundle.actors.iter().map(|a| a.id.as_str()),
        )?;
        unique(
            "devices.toml",
            "device",
            bundle.devices.iter().map(|d| d.id.as_str()),
        )?;
        unique(
            "procedures",
            "procedure",
            bundle.procedures.iter().map(|p| p.id.as_str()),
        )?;
        unique(
            "manifests",
            "document",
            bundle.manifests.iter().map(|m| m.doc_id.as_str()),
        )?;
        unique(
            "scripts",
            "script",
            bundle.scripts.iter().map(|s| s.name.as_str()),
        )?;
        Ok(bundle)
    }

    /// The fixtures compiled into the binary.
    pub fn builtin() -> Self {
        Self::from_files(BUILTIN.iter().copied()).expect("built-in fixtures are valid")
    }

    pub fn load_dir(dir: &Path) -> Result<Self, FixtureError> {
        if !dir.is_dir() {
            return Err(FixtureError::new(
                &dir.display().to_string(),
                "not a directory",
            ));
        }
        let mut files: Vec<(String, String)> = Vec::new();
        let read = |rel: String, files: &mut Vec<(String, String)>| -> Result<(), FixtureError> {
            let text =
                fs::read_to_string(dir.join(&rel)).map_err(|e| FixtureError::new(&rel, e))?;
            files.push((rel, text));
            Ok(())
        };
        for name in [
            "entities.jsonl",
            "tags.jsonl",
            "actors.toml",
            "devices.toml",
        ] {
            if dir.join(name).is_file() {
                read(name.to_string(), &mut files)?;
            }
        }
        for sub in ["procedures", "manifests", "scripts"] {
            let path = dir.join(sub);
            if !path.is_dir() {
                continue;
            }
            let entries = fs::read_dir(&path).map_err(|e| FixtureError::new(sub, e))?;
            for entry in entries {
                let entry = entry.map_err(|e| FixtureError::new(sub, e))?;
                let name = entry.file_name().to_string_lossy().into_owned();
                if name.ends_with(".toml") {
                    read(format!("{sub}/{name}"), &mut files)?;
                }
            }
        }
        Self::from_files(files.iter().map(|(p, t)| (p.as_str(), t.as_str())))
    }

    pub fn script(&self, name: &str) -> Option<&ScenarioScript> {
        self.scripts.iter().find(|s| s.name == name)
    }

    pub fn manifest(&self, doc_id: &str) -> Option<&SourceManifest> {
        self.manifests.iter().find(|m| m.doc_id == doc_id)
    }
}
