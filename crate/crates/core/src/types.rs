//! Vocabulary shared by every module: entity references and the ordered
//! classification enums used for actors, procedures and learning units.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Error returned when a string does not name a variant of one of the
/// vocabulary enums.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown {what} `{value}`")]
pub struct UnknownVariant {
    pub what: &'static str,
    pub value: String,
}

/// `FromStr` through the type's serde string form.
macro_rules! impl_from_str_via_serde {
    ($name:ty, $what:literal) => {
        impl std::str::FromStr for $name {
            type Err = $crate::types::UnknownVariant;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| {
                    $crate::types::UnknownVariant {
                        what: $what,
                        value: s.to_string(),
                    }
                })
            }
        }
    };
}
pub(crate) use impl_from_str_via_serde;

macro_rules! named_enum {
    (
        $(#[$meta:meta])*
        $name:ident ($what:literal) { $($variant:ident),+ $(,)? }
    ) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => stringify!($variant)),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = UnknownVariant;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $(stringify!($variant) => Ok($name::$variant),)+
                    _ => Err(UnknownVariant { what: $what, value: s.to_string() }),
                }
            }
        }
    };
}

named_enum! {
    /// What a tag (or central record) is attached to.
    EntityKind ("entity kind") { Appliance, Tool, Part, Location }
}

named_enum! {
    /// Media carried by a learning fragment. `Text` renders on every device.
    MediaKind ("media kind") { Text, Diagram, Blueprint, Photo, VideoRef, AudioRef }
}

named_enum! {
    /// Experience level targeted by a unit, also the expertise of an actor.
    /// Ordered from least to most experienced.
    Expertise ("expertise") { Beginner, Basic, Advanced, Expert }
}

named_enum! {
    /// Kind of maintenance task a unit supports.
    TaskCategory ("task category") { Use, DysfunctionIdentification, Diagnosis, Repair, Dismantling, Reassembly }
}

named_enum! {
    /// Authorization level of an actor. Ordered; a higher level may do
    /// everything a lower one may.
    Accreditation ("accreditation") { Trainee, Technician, Senior, Supervisor }
}

named_enum! {
    Specificity ("specificity") { Generic, ModelSpecific }
}

named_enum! {
    /// Where a unit is stored: the firm's EPSS or the open knowledge base.
    Protection ("protection") { FirmProtected, Open }
}

impl TaskCategory {
    /// Lowercase identifier used in generated unit ids.
    pub fn slug(self) -> &'static str {
        match self {
            TaskCategory::Use => "use",
            TaskCategory::DysfunctionIdentification => "dysfunction-identification",
            TaskCategory::Diagnosis => "diagnosis",
            TaskCategory::Repair => "repair",
            TaskCategory::Dismantling => "dismantling",
            TaskCategory::Reassembly => "reassembly",
        }
    }
}

/// Reference to an appliance, tool, part or location in the central store.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityRef {
    pub kind: EntityKind,
    pub id: String,
}

impl EntityRef {
    pub fn new(kind: EntityKind, id: impl Into<String>) -> Self {
        EntityRef {
            kind,
            id: id.into(),
        }
    }

    pub fn appliance(id: impl Into<String>) -> Self {
        Self::new(EntityKind::Appliance, id)
    }

    pub fn tool(id: impl Into<String>) -> Self {
        Self::new(EntityKind::Tool, id)
    }

    pub fn part(id: impl Into<String>) -> Self {
        Self::new(EntityKind::Part, id)
    }
}

impl fmt::Display for EntityRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.kind, self.id)
    }
}

/// A (procedure, step) pair a learning unit can be bound to.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StepRef {
    pub procedure: String,
    pub step: u32,
}

impl StepRef {
    pub fn new(procedure: impl Into<String>, step: u32) -> Self {
        StepRef {
            procedure: procedure.into(),
            step,
        }
    }
}

impl fmt::Display for StepRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.procedure, self.step)
    }
}
