//! XML codec for learning units (the LOM-subset profile described in
//! `schema/learning-unit.xsd`).
//!
//! ```xml
//! <learning-unit id="appendix:A" topics="hdd sata">
//!   <title>Data transfer rate</title>
//!   <expertise>Basic</expertise>
//!   <task-category>Use</task-category>
//!   <appliance-models/>
//!   <specificity>Generic</specificity>
//!   <protection>Open</protection>
//!   <fragments>
//!     <fragment id="frag-…" media-kind="Text" source-doc="appendix" locator="A">…</fragment>
//!   </fragments>
//! </learning-unit>
//! ```
//!
//! The seven child elements are mandatory and ordered. Step binding and topic
//! tags travel as optional attributes of the root element. Attribute order is
//! free; fragment order is significant.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use quick_xml::events::Event;
use quick_xml::Reader;

use super::{KnowledgeError, LearningFragment, LearningUnit, UnitMetadata};
use crate::types::{Expertise, MediaKind, Protection, Specificity, StepRef, TaskCategory};

/// A unit together with the fragments embedded in its document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImportedUnit {
    pub unit: LearningUnit,
    pub fragments: Vec<LearningFragment>,
}

pub const ROOT: &str = "learning-unit";
pub const PROFILE_ELEMENTS: [&str; 7] = [
    "title",
    "expertise",
    "task-category",
    "appliance-models",
    "specificity",
    "protection",
    "fragments",
];

fn escape_into(out: &mut String, s: &str, attribute: bool) {
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' if attribute => out.push_str("&quot;"),
            '\'' if attribute => out.push_str("&apos;"),
            '\n' | '\t' if attribute => {
                let _ = write!(out, "&#{};", c as u32);
            }
            '\r' => out.push_str("&#13;"),
            c if c.is_control() && c != '\n' && c != '\t' => {
                let _ = write!(out, "&#x{:X};", c as u32);
            }
            c => out.push(c),
        }
    }
}

fn attr(out: &mut String, name: &str, value: &str) {
    out.push(' ');
    out.push_str(name);
    out.push_str("=\"");
    escape_into(out, value, true);
    out.push('"');
}

fn text_element(out: &mut String, indent: &str, name: &str, text: &str) {
    let _ = write!(out, "{indent}<{name}>");
    escape_into(out, text, false);
    let _ = writeln!(out, "</{name}>");
}

/// Serializes a unit with its fragments. `fragments` must be the unit's
/// fragments in unit order.
pub fn export_xml(unit: &LearningUnit, fragments: &[LearningFragment]) -> String {
    let m = &unit.metadata;
    let mut out = String::from("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    out.push('<');
    out.push_str(ROOT);
    attr(&mut out, "id", &unit.id);
    if let Some(step) = &m.step_ref {
        attr(&mut out, "step-procedure", &step.procedure);
        attr(&mut out, "step-index", &step.step.to_string());
    }
    if !m.topics.is_empty() {
        let topics: Vec<&str> = m.topics.iter().map(String::as_str).collect();
        attr(&mut out, "topics", &topics.join(" "));
    }
    out.push_str(">\n");
    text_element(&mut out, "  ", "title", &unit.title);
    text_element(&mut out, "  ", "expertise", m.expertise.as_str());
    text_element(&mut out, "  ", "task-category", m.task_category.as_str());
    if m.appliance_models.is_empty() {
        out.push_str("  <appliance-models/>\n");
    } else {
        out.push_str("  <appliance-models>\n");
        for model in &m.appliance_models {
            text_element(&mut out, "    ", "model", model);
        }
        out.push_str("  </appliance-models>\n");
    }
    text_element(&mut out, "  ", "specificity", m.specificity.as_str());
    text_element(&mut out, "  ", "protection", m.protection.as_str());
    out.push_str("  <fragments>\n");
    for f in fragments {
        out.push_str("    <fragment");
        attr(&mut out, "id", &f.id);
        attr(&mut out, "media-kind", f.media_kind.as_str());
        attr(&mut out, "source-doc", &f.source_doc);
        attr(&mut out, "locator", &f.source_locator);
        if let Some(fallback) = &f.fallback_text {
            attr(&mut out, "fallback-text", fallback);
        }
        out.push('>');
        escape_into(&mut out, &f.body, false);
        out.push_str("</fragment>\n");
    }
    out.push_str("  </fragments>\n");
    out.push_str("</learning-unit>\n");
    out
}

#[derive(Debug, Default)]
struct Element {
    name: String,
    attrs: Vec<(String, String)>,
    children: Vec<Node>,
}

#[derive(Debug)]
enum Node {
    Element(Element),
    Text(String),
}

fn violation(msg: impl Into<String>) -> KnowledgeError {
    KnowledgeError::SchemaViolation(msg.into())
}

fn resolve_entity(name: &str) -> Option<char> {
    match name {
        "lt" => Some('<'),
        "gt" => Some('>'),
        "amp" => Some('&'),
        "apos" => Some('\''),
        "quot" => Some('"'),
        _ => None,
    }
}

fn parse_tree(doc: &str) -> Result<Element, KnowledgeError> {
    let mut reader = Reader::from_str(doc);
    reader.config_mut().trim_text(false);
    let mut stack: Vec<Element> = Vec::new();
    let mut root: Option<Element> = None;

    fn push_text(stack: &mut [Element], text: &str) {
        if let Some(top) = stack.last_mut() {
            if let Some(Node::Text(existing)) = top.children.last_mut() {
                existing.push_str(text);
            } else {
                top.children.push(Node::Text(text.to_string()));
            }
        }
    }

    loop {
        let event = reader
            .read_event()
            .map_err(|e| violation(format!("malformed XML: {e}")))?;
        match event {
            Event::Start(start) | Event::Empty(start) if root.is_some() => {
                let _ = start;
                return Err(violation("content after the root element"));
            }
            Event::Start(ref start) | Event::Empty(ref start) => {
                let name = start.name().as_ref().to_string();
                let mut attrs = Vec::new();
                for a in start.attributes() {
                    let a = a.map_err(|e| violation(format!("bad attribute: {e}")))?;
                    let key = a.key.as_ref().to_string();
                    let value = a
                        .normalized_value(quick_xml::XmlVersion::Implicit1_0)
                        .map_err(|e| violation(format!("bad attribute value: {e}")))?;
                    if attrs.iter().any(|(k, _)| *k == key) {
                        return Err(violation(format!("duplicate attribute `{key}`")));
                    }
                    attrs.push((key, value.into_owned()));
                }
                let element = Element {
                    name,
                    attrs,
                    children: Vec::new(),
                };
                if matches!(event, Event::Empty(_)) {
                    match stack.last_mut() {
                        Some(parent) => parent.children.push(Node::Element(element)),
                        None => root = Some(element),
                    }
                } else {
                    stack.push(element);
                }
            }
            Event::End(_) => {
                let done = stack.pop().ok_or_else(|| violation("unbalanced end tag"))?;
                match stack.last_mut() {
                    Some(parent) => parent.children.push(Node::Element(done)),
                    None => root = Some(done),
                }
            }
            Event::Text(text) => {
                let content = text.xml10_content();
                if stack.is_empty() {
                    if !content.trim().is_empty() {
                        return Err(violation("text outside the root element"));
                    }
                } else {
                    push_text(&mut stack, &content);
                }
            }
            Event::CData(data) => {
                push_text(&mut stack, &data.xml10_content());
            }
            Event::GeneralRef(reference) => {
                let resolved = match reference
                    .resolve_char_ref()
                    .map_err(|e| violation(format!("bad character reference: {e}")))?
                {
                    Some(c) => c,
                    None => resolve_entity(&reference)
                        .ok_or_else(|| violation(format!("unknown entity `&{};`", &*reference)))?,
                };
                push_text(&mut stack, resolved.encode_utf8(&mut [0u8; 4]));
            }
            Event::Decl(_) | Event::Comment(_) | Event::PI(_) => {}
            Event::DocType(_) => return Err(violation("DOCTYPE is not allowed")),
            Event::Eof => break,
        }
    }
    if !stack.is_empty() {
        return Err(violation("unterminated element"));
    }
    root.ok_or_else(|| violation("empty document"))
}

impl Element {
    fn attr(&self, name: &str) -> Option<&str> {
        self.attrs
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, v)| v.as_str())
    }

    fn required_attr(&self, name: &str) -> Result<&str, KnowledgeError> {
        self.attr(name)
            .ok_or_else(|| violation(format!("<{}> lacks required attribute `{name}`", self.name)))
    }

    fn check_attrs(&self, allowed: &[&str]) -> Result<(), KnowledgeError> {
        match self
            .attrs
            .iter()
            .find(|(k, _)| !allowed.contains(&k.as_str()))
        {
            Some((k, _)) => Err(violation(format!(
                "<{}> has unexpected attribute `{k}`",
                self.name
            ))),
            None => Ok(()),
        }
    }

    /// Child elements; whitespace-only text between them is ignored.
    fn element_children(&self) -> Result<Vec<&Element>, KnowledgeError> {
        self.children
            .iter()
            .filter_map(|n| match n {
                Node::Element(e) => Some(Ok(e)),
                Node::Text(t) if t.trim().is_empty() => None,
                Node::Text(_) => Some(Err(violation(format!(
                    "<{}> may not contain text",
                    self.name
                )))),
            })
            .collect()
    }

    fn text(&self) -> Result<String, KnowledgeError> {
        let mut out = String::new();
        for child in &self.children {
            match child {
                Node::Text(t) => out.push_str(t),
                Node::Element(e) => {
                    return Err(violation(format!(
                        "<{}> may not contain <{}>",
                        self.name, e.name
                    )))
                }
            }
        }
        Ok(out)
    }

    fn parsed<T: std::str::FromStr>(&self) -> Result<T, KnowledgeError>
    where
        T::Err: std::fmt::Display,
    {
        self.text()?
            .parse()
            .map_err(|e: T::Err| violation(format!("<{}>: {e}", self.name)))
    }
}

/// Parses and validates a learning-unit document.
pub fn import_xml(doc: &str) -> Result<ImportedUnit, KnowledgeError> {
    let root = parse_tree(doc)?;
    if root.name != ROOT {
        return Err(violation(format!(
            "root element must be <{ROOT}>, found <{}>",
            root.name
        )));
    }
    root.check_attrs(&["id", "step-procedure", "step-index", "topics"])?;
    let id = root.required_attr("id")?.to_string();
    if id.is_empty() {
        return Err(violation("empty unit id"));
    }
    let step_ref = match (root.attr("step-procedure"), root.attr("step-index")) {
        (None, None) => None,
        (Some(procedure), Some(index)) => Some(StepRef::new(
            procedure,
            index
                .parse()
                .map_err(|_| violation(format!("bad step-index `{index}`")))?,
        )),
        _ => {
            return Err(violation(
                "step-procedure and step-index must appear together",
            ))
        }
    };
    let topics: BTreeSet<String> = root
        .attr("topics")
        .map(|t| {
            t.split(' ')
                .filter(|s| !s.is_empty())
                .map(str::to_string)
                .collect()
        })
        .unwrap_or_default();

    let children = root.element_children()?;
    let names: Vec<&str> = children.iter().map(|c| c.name.as_str()).collect();
    if names != PROFILE_ELEMENTS {
        let missing: Vec<&str> = PROFILE_ELEMENTS
            .iter()
            .filter(|n| !names.contains(n))
            .copied()
            .collect();
        return Err(violation(if missing.is_empty() {
            format!("profile elements out of order or repeated: {names:?}")
        } else {
            format!("missing mandatory element(s): {}", missing.join(", "))
        }));
    }
    for child in &children[..6] {
        if child.name != "appliance-models" {
            child.check_attrs(&[])?;
        }
    }
    let title = children[0].text()?;
    if title.trim().is_empty() {
        return Err(violation("empty <title>"));
    }
    let expertise: Expertise = children[1].parsed()?;
    let task_category: TaskCategory = children[2].parsed()?;
    children[3].check_attrs(&[])?;
    let mut appliance_models = BTreeSet::new();
    for model in children[3].element_children()? {
        if model.name != "model" {
            return Err(violation(format!(
                "<appliance-models> may not contain <{}>",
                model.name
            )));
        }
        model.check_attrs(&[])?;
        if !appliance_models.insert(model.text()?) {
            return Err(violation("duplicate <model>"));
        }
    }
    let specificity: Specificity = children[4].parsed()?;
    let protection: Protection = children[5].parsed()?;
    children[6].check_attrs(&[])?;

    let mut fragments = Vec::new();
    for f in children[6].element_children()? {
        if f.name != "fragment" {
            return Err(violation(format!(
                "<fragments> may not contain <{}>",
                f.name
            )));
        }
        f.check_attrs(&["id", "media-kind", "source-doc", "locator", "fallback-text"])?;
        let media_kind: MediaKind = f
            .required_attr("media-kind")?
            .parse()
            .map_err(|e| violation(format!("{e}")))?;
        let body = f.text()?;
        if body.is_empty() {
            return Err(violation("empty fragment body"));
        }
        fragments.push(LearningFragment {
            id: f.required_attr("id")?.to_string(),
            media_kind,
            body,
            source_doc: f.required_attr("source-doc")?.to_string(),
            source_locator: f.required_attr("locator")?.to_string(),
            fallback_text: f.attr("fallback-text").map(str::to_string),
        });
    }
    if fragments.is_empty() {
        return Err(violation(
            "<fragments> must contain at least one <fragment>",
        ));
    }

    Ok(ImportedUnit {
        unit: LearningUnit {
            id,
            title,
            fragments: fragments.iter().map(|f| f.id.clone()).collect(),
            metadata: UnitMetadata {
                expertise,
                task_category,
                appliance_models,
                step_ref,
                specificity,
                protection,
                topics,
            },
        },
        fragments,
    })
}
