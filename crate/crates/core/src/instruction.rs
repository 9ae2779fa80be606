//! Instruction grammar: rendering and parsing of user commands, and the
//! text prompts derived from them.
//!
//! Two inference templates are recognised (keywords match case-insensitively,
//! the region caption is kept verbatim):
//!
//! ```text
//! make {caption} clear with {s1}, and make other parts with {s2}
//! make {caption} clear with {s1}, and keep other parts bokeh blur with {s2}
//! ```
//!
//! The parser also accepts the surface forms `keep other parts clear with`
//! (local) and `keep the bokeh blur of other parts with [the]` (bokeh).

use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    LocalRestore,
    BokehRestore,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Task::LocalRestore => f.write_str("local"),
            Task::BokehRestore => f.write_str("bokeh"),
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "local" | "local_restore" | "localrestore" => Ok(Task::LocalRestore),
            "bokeh" | "bokeh_restore" | "bokehrestore" => Ok(Task::BokehRestore),
            other => Err(Error::InvalidInstruction(format!("unknown task '{other}'"))),
        }
    }
}

/// A parsed user command. Construct through [`Instruction::new`], which
/// enforces the caption and scale invariants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instruction {
    task: Task,
    region_caption: String,
    s1: f64,
    s2: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPair {
    /// Fed to the frozen backbone.
    pub backbone_prompt: String,
    /// Fed to the control branch.
    pub control_prompt: String,
}

const FORBIDDEN_PHRASES: [&str; 2] = ["clear with", "bokeh blur with"];
const MAX_FRACTION_DIGITS: usize = 2;

impl Instruction {
    pub fn new(task: Task, region_caption: impl Into<String>, s1: f64, s2: f64) -> Result<Self> {
        let region_caption = region_caption.into();
        validate_caption(&region_caption)?;
        validate_scale("s1", s1)?;
        validate_scale("s2", s2)?;
        Ok(Self {
            task,
            region_caption,
            s1,
            s2,
        })
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn region_caption(&self) -> &str {
        &self.region_caption
    }

    pub fn s1(&self) -> f64 {
        self.s1
    }

    pub fn s2(&self) -> f64 {
        self.s2
    }
}

fn validate_caption(caption: &str) -> Result<()> {
    let bad = |why: &str| Err(Error::InvalidInstruction(format!("region caption {why}")));
    if caption.trim().is_empty() {
        return bad("is empty");
    }
    if caption.trim() != caption {
        return bad("has leading or trailing whitespace");
    }
    if caption.contains(['\n', '\r']) {
        return bad("spans multiple lines");
    }
    let lower = caption.to_lowercase();
    let squashed = lower.split_whitespace().collect::<Vec<_>>().join(" ");
    for phrase in FORBIDDEN_PHRASES {
        if squashed.contains(phrase) {
            return bad(&format!("contains the template keyword '{phrase}'"));
        }
    }
    let mut depth = 0i32;
    for ch in caption.chars() {
        match ch {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth < 0 {
                    return bad("has unbalanced braces");
                }
            }
            _ => {}
        }
    }
    if depth != 0 {
        return bad("has unbalanced braces");
    }
    Ok(())
}

fn validate_scale(name: &str, v: f64) -> Result<()> {
    if !v.is_finite() || v < 0.0 {
        return Err(Error::InvalidInstruction(format!(
            "{name} must be a finite non-negative decimal, got {v}"
        )));
    }
    let rendered = format_scale(v);
    if rendered.parse::<f64>().ok() != Some(v) {
        return Err(Error::InvalidInstruction(format!(
            "{name}={v} has more than {MAX_FRACTION_DIGITS} fractional digits"
        )));
    }
    Ok(())
}

/// Minimal decimal form: at most two fractional digits, at least one.
pub fn format_scale(v: f64) -> String {
    let mut s = format!("{:.*}", MAX_FRACTION_DIGITS, v);
    while s.ends_with('0') && !s.ends_with(".0") {
        s.pop();
    }
    s
}

pub fn render_inference_instruction(instr: &Instruction) -> String {
    let s1 = format_scale(instr.s1);
    let s2 = format_scale(instr.s2);
    match instr.task {
        Task::LocalRestore => format!(
            "make {} clear with {s1}, and make other parts with {s2}",
            instr.region_caption
        ),
        Task::BokehRestore => format!(
            "make {} clear with {s1}, and keep other parts bokeh blur with {s2}",
            instr.region_caption
        ),
    }
}

pub fn render_training_instruction(task: Task, region_caption: &str) -> String {
    match task {
        Task::LocalRestore => format!("make {region_caption} clear"),
        Task::BokehRestore => format!("make {region_caption} clear and keep other parts bokeh blur"),
    }
}

pub fn backbone_prompt(task: Task, region_caption: &str) -> String {
    match task {
        Task::LocalRestore => region_caption.to_string(),
        Task::BokehRestore => format!("{region_caption} in front of bokeh background"),
    }
}

pub fn derive_prompts(instr: &Instruction) -> PromptPair {
    PromptPair {
        backbone_prompt: backbone_prompt(instr.task, &instr.region_caption),
        control_prompt: render_training_instruction(instr.task, &instr.region_caption),
    }
}

fn grammar() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?is)^\s*make\s+(?P<caption>.+?)\s+clear\s+with\s+(?P<s1>\S+?)\s*,?\s+and\s+(?:(?P<bokeh>keep\s+other\s+parts\s+bokeh\s+blur|keep\s+the\s+bokeh\s+blur\s+of\s+other\s+parts)|make\s+other\s+parts|keep\s+other\s+parts\s+clear)\s+with\s+(?:the\s+)?(?P<s2>\S+?)\s*\.?\s*$",
        )
        .expect("instruction grammar compiles")
    })
}

fn scale_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\d+(?:\.\d{1,2})?$").expect("scale pattern compiles"))
}

fn parse_scale(name: &str, raw: &str) -> Result<f64> {
    if !scale_pattern().is_match(raw) {
        return Err(Error::MalformedInstruction(format!(
            "{name} '{raw}' is not a decimal with at most {MAX_FRACTION_DIGITS} fractional digits"
        )));
    }
    raw.parse::<f64>()
        .map_err(|e| Error::MalformedInstruction(format!("{name} '{raw}': {e}")))
}

pub fn parse_inference_instruction(text: &str) -> Result<Instruction> {
    let caps = grammar().captures(text).ok_or_else(|| {
        let lower = text.to_lowercase();
        let detail = if !lower.contains("clear with") {
            "missing 'clear with {s1}' clause"
        } else if !lower.contains(" with ") || lower.matches(" with ").count() < 2 {
            "missing scale for other parts"
        } else {
            "text does not follow either instruction template"
        };
        Error::MalformedInstruction(format!("{detail}: {text:?}"))
    })?;
    let caption = caps["caption"].to_string();
    let s1 = parse_scale("s1", &caps["s1"])?;
    let s2 = parse_scale("s2", &caps["s2"])?;
    let task = if caps.name("bokeh").is_some() {
        Task::BokehRestore
    } else {
        Task::LocalRestore
    };
    Instruction::new(task, caption, s1, s2).map_err(|e| match e {
        Error::InvalidInstruction(d) => Error::MalformedInstruction(d),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_local_template() {
        let i = Instruction::new(Task::LocalRestore, "the dog on the sand beach", 0.8, 1.0).unwrap();
        assert_eq!(
            render_inference_instruction(&i),
            "make the dog on the sand beach clear with 0.8, and make other parts with 1.0"
        );
    }

    #[test]
    fn renders_bokeh_template() {
        let i = Instruction::new(Task::BokehRestore, "flower", 1.0, 1.0).unwrap();
        assert_eq!(
            render_inference_instruction(&i),
            "make flower clear with 1.0, and keep other parts bokeh blur with 1.0"
        );
    }

    #[test]
    fn round_trip_simple() {
        let i = Instruction::new(Task::LocalRestore, "sign", 1.0, 1.0).unwrap();
        assert_eq!(parse_inference_instruction(&render_inference_instruction(&i)).unwrap(), i);
    }

    #[test]
    fn parses_examples() {
        let i = parse_inference_instruction(
            "make the bush in front of sign clear with 0.5, and make other parts with 0.9",
        )
        .unwrap();
        assert_eq!(i, Instruction::new(Task::LocalRestore, "the bush in front of sign", 0.5, 0.9).unwrap());

        let i = parse_inference_instruction(
            "make flower clear with 1.0, and keep other parts bokeh blur with 2.0",
        )
        .unwrap();
        assert_eq!(i, Instruction::new(Task::BokehRestore, "flower", 1.0, 2.0).unwrap());
    }

    #[test]
    fn accepts_alternate_surface_forms() {
        let i = parse_inference_instruction(
            "Make the bush in front of sign clear with 0.5 and keep other parts clear with 0.9",
        )
        .unwrap();
        assert_eq!(i.task(), Task::LocalRestore);
        assert_eq!(i.region_caption(), "the bush in front of sign");
        assert_eq!(
            render_inference_instruction(&i),
            "make the bush in front of sign clear with 0.5, and make other parts with 0.9"
        );
        let i = parse_inference_instruction(
            "Make the car clear with 1.0 and keep the bokeh blur of other parts with the 1.2.",
        )
        .unwrap();
        assert_eq!(i.task(), Task::BokehRestore);
        assert_eq!(i.s2(), 1.2);
    }

    #[test]
    fn keywords_case_insensitive_caption_verbatim() {
        let i = parse_inference_instruction("MAKE The Red Disk CLEAR WITH 0.7, AND MAKE OTHER PARTS WITH 1")
            .unwrap();
        assert_eq!(i.region_caption(), "The Red Disk");
        assert_eq!(i.s1(), 0.7);
        assert_eq!(i.s2(), 1.0);
    }

    #[test]
    fn rejects_no_scale() {
        assert!(matches!(
            parse_inference_instruction("make it nice"),
            Err(Error::MalformedInstruction(_))
        ));
    }

    #[test]
    fn training_instructions() {
        assert_eq!(render_training_instruction(Task::LocalRestore, "pagoda"), "make pagoda clear");
        assert_eq!(
            render_training_instruction(Task::BokehRestore, "cat"),
            "make cat clear and keep other parts bokeh blur"
        );
        assert_eq!(render_training_instruction(Task::LocalRestore, "x"), "make x clear");
    }

    #[test]
    fn prompt_derivation() {
        let i = Instruction::new(Task::LocalRestore, "sign", 0.3, 0.4).unwrap();
        let p = derive_prompts(&i);
        assert_eq!(p.backbone_prompt, "sign");
        assert_eq!(p.control_prompt, "make sign clear");
        let i = Instruction::new(Task::BokehRestore, "flower", 1.0, 1.0).unwrap();
        let p = derive_prompts(&i);
        assert_eq!(p.backbone_prompt, "flower in front of bokeh background");
        assert_eq!(p.control_prompt, "make flower clear and keep other parts bokeh blur");
    }

    #[test]
    fn caption_validation() {
        assert!(Instruction::new(Task::LocalRestore, "", 1.0, 1.0).is_err());
        assert!(Instruction::new(Task::LocalRestore, "a clear with b", 1.0, 1.0).is_err());
        assert!(Instruction::new(Task::LocalRestore, "a Bokeh  Blur with", 1.0, 1.0).is_err());
        assert!(Instruction::new(Task::LocalRestore, "a {b", 1.0, 1.0).is_err());
        assert!(Instruction::new(Task::LocalRestore, "a }b{", 1.0, 1.0).is_err());
        assert!(Instruction::new(Task::LocalRestore, "a {b}", 1.0, 1.0).is_ok());
        assert!(Instruction::new(Task::LocalRestore, "x", -0.1, 1.0).is_err());
        assert!(Instruction::new(Task::LocalRestore, "x", 0.125, 1.0).is_err());
        assert!(Instruction::new(Task::LocalRestore, "x", f64::NAN, 1.0).is_err());
    }

    #[test]
    fn scale_formatting() {
        assert_eq!(format_scale(1.0), "1.0");
        assert_eq!(format_scale(0.8), "0.8");
        assert_eq!(format_scale(0.25), "0.25");
        assert_eq!(format_scale(1.5), "1.5");
        assert_eq!(format_scale(3.0), "3.0");
    }
}
