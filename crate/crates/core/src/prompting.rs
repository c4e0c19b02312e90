//! Text rendering of I/Q samples into few-shot prompts, and the reverse
//! parse used by the deterministic mock scorer.
//!
//! Values are quantized before rendering: multiplied by `scale`, then
//! rounded half away from zero to `decimals` fractional digits, printed
//! without exponent notation (an exact zero always prints as `"0"`).
//! Templates are plain patterns over the placeholders `{index}`, `{re}`,
//! `{im}`, and `{label}`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::Path;

use crate::channel::ReceivedSample;

pub const PH_INDEX: &str = "{index}";
pub const PH_RE: &str = "{re}";
pub const PH_IM: &str = "{im}";
pub const PH_LABEL: &str = "{label}";

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("value {0} is not finite")]
    NonFinite(f64),
    #[error("template {id}: {msg}")]
    BadTemplate { id: String, msg: String },
    #[error("label {label} out of range for {k} verbalized labels")]
    LabelOutOfRange { label: usize, k: usize },
    #[error("prompt needs at least one demonstration")]
    NoDemos,
    #[error("text does not match any known template")]
    NoMatchingTemplate,
    #[error("template file io: {0}")]
    Io(#[from] std::io::Error),
    #[error("template file parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("template file encode: {0}")]
    Encode(#[from] toml::ser::Error),
}

/// Controls how raw coordinates become prompt numbers: the value is
/// multiplied by `scale` and rounded half away from zero to `decimals`
/// fractional digits.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizationConfig {
    pub scale: f64,
    pub decimals: u32,
}

impl Default for QuantizationConfig {
    fn default() -> Self {
        Self { scale: 10.0, decimals: 0 }
    }
}

/// Quantizes and renders one value. Plain decimal notation only; `"-0"`
/// collapses to `"0"`.
pub fn format_value(v: f64, q: &QuantizationConfig) -> Result<String, PromptError> {
    if !v.is_finite() {
        return Err(PromptError::NonFinite(v));
    }
    let shift = 10u64.pow(q.decimals) as f64;
    let n = (v * q.scale * shift).round() as i64;
    if n == 0 {
        return Ok("0".to_string());
    }
    let sign = if n < 0 { "-" } else { "" };
    let mag = n.unsigned_abs();
    if q.decimals == 0 {
        return Ok(format!("{sign}{mag}"));
    }
    let div = 10u64.pow(q.decimals);
    Ok(format!(
        "{sign}{}.{:0width$}",
        mag / div,
        mag % div,
        width = q.decimals as usize
    ))
}

/// One prompt format: fixed header, a per-demonstration line pattern, a
/// query line pattern, and the label strings the model is expected to emit
/// (index = class).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: String,
    pub header: String,
    pub demo_pattern: String,
    pub query_pattern: String,
    #[serde(default = "default_separator")]
    pub separator: String,
    pub labels: Vec<String>,
}

fn default_separator() -> String {
    "\n".to_string()
}

impl PromptTemplate {
    pub fn k(&self) -> usize {
        self.labels.len()
    }

    /// Checks placeholder presence, separator hygiene, and that the label
    /// strings are non-empty, whitespace-free, and pairwise distinct.
    pub fn validate(&self) -> Result<(), PromptError> {
        let fail = |msg: &str| {
            Err(PromptError::BadTemplate { id: self.id.clone(), msg: msg.to_string() })
        };
        if self.id.is_empty() {
            return fail("empty id");
        }
        if self.separator.is_empty() {
            return fail("empty separator");
        }
        for ph in [PH_INDEX, PH_RE, PH_IM, PH_LABEL] {
            if !self.demo_pattern.contains(ph) {
                return fail(&format!("demo pattern is missing {ph}"));
            }
        }
        for ph in [PH_RE, PH_IM] {
            if !self.query_pattern.contains(ph) {
                return fail(&format!("query pattern is missing {ph}"));
            }
        }
        if self.query_pattern.contains(PH_LABEL) {
            return fail("query pattern must not contain {label}");
        }
        for (name, text) in [
            ("header", &self.header),
            ("demo pattern", &self.demo_pattern),
            ("query pattern", &self.query_pattern),
        ] {
            if text.contains(&self.separator) {
                return fail(&format!("{name} contains the separator"));
            }
        }
        if self.labels.is_empty() {
            return fail("no labels");
        }
        let mut seen = HashSet::new();
        for label in &self.labels {
            if label.is_empty() || label.chars().any(char::is_whitespace) {
                return fail("labels must be non-empty and whitespace-free");
            }
            if !seen.insert(label.as_str()) {
                return fail("labels must be pairwise distinct");
            }
        }
        Ok(())
    }
}

/// A fully rendered prompt plus the label tokens to score, in class order.
/// The text ends exactly at the query pattern, so the backend's next token
/// is the label.
#[derive(Clone, Debug, PartialEq)]
pub struct Prompt {
    pub text: String,
    pub label_tokens: Vec<String>,
    pub template_id: String,
}

fn substitute(pattern: &str, pairs: &[(&str, &str)]) -> String {
    let mut out = pattern.to_string();
    for (ph, value) in pairs {
        out = out.replace(ph, value);
    }
    out
}

/// Renders demonstration line `index` (1-based) for one labeled sample.
pub fn render_demonstration(
    t: &PromptTemplate,
    index: usize,
    s: &ReceivedSample,
    q: &QuantizationConfig,
) -> Result<String, PromptError> {
    let label = t
        .labels
        .get(s.y)
        .ok_or(PromptError::LabelOutOfRange { label: s.y, k: t.k() })?;
    Ok(substitute(
        &t.demo_pattern,
        &[
            (PH_INDEX, index.to_string().as_str()),
            (PH_RE, format_value(s.x.re, q)?.as_str()),
            (PH_IM, format_value(s.x.im, q)?.as_str()),
            (PH_LABEL, label.as_str()),
        ],
    ))
}

/// Renders the query line for one received point.
pub fn render_query(
    t: &PromptTemplate,
    x: Complex64,
    q: &QuantizationConfig,
) -> Result<String, PromptError> {
    Ok(substitute(
        &t.query_pattern,
        &[
            (PH_RE, format_value(x.re, q)?.as_str()),
            (PH_IM, format_value(x.im, q)?.as_str()),
        ],
    ))
}

fn assemble(t: &PromptTemplate, demo_lines: Vec<String>, query_line: String) -> Prompt {
    let mut parts = Vec::with_capacity(demo_lines.len() + 2);
    parts.push(t.header.clone());
    parts.extend(demo_lines);
    parts.push(query_line);
    Prompt {
        text: parts.join(&t.separator),
        label_tokens: t.labels.clone(),
        template_id: t.id.clone(),
    }
}

/// Concatenates header, demonstration lines, and the query line with the
/// template separator.
pub fn build_prompt(
    t: &PromptTemplate,
    demos: &[ReceivedSample],
    query: Complex64,
    q: &QuantizationConfig,
) -> Result<Prompt, PromptError> {
    if demos.is_empty() {
        return Err(PromptError::NoDemos);
    }
    let demo_lines = demos
        .iter()
        .enumerate()
        .map(|(i, d)| render_demonstration(t, i + 1, d, q))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(assemble(t, demo_lines, render_query(t, query, q)?))
}

/// Same as [`build_prompt`], but both numeric slots of the query are
/// replaced by `cf_text`, so the query carries no signal information.
pub fn content_free_prompt(
    t: &PromptTemplate,
    demos: &[ReceivedSample],
    cf_text: &str,
    q: &QuantizationConfig,
) -> Result<Prompt, PromptError> {
    if demos.is_empty() {
        return Err(PromptError::NoDemos);
    }
    let demo_lines = demos
        .iter()
        .enumerate()
        .map(|(i, d)| render_demonstration(t, i + 1, d, q))
        .collect::<Result<Vec<_>, _>>()?;
    let query_line = substitute(&t.query_pattern, &[(PH_RE, cf_text), (PH_IM, cf_text)]);
    Ok(assemble(t, demo_lines, query_line))
}

fn digit_labels(k: usize) -> Vec<String> {
    (0..k).map(|i| i.to_string()).collect()
}

fn demo_pattern(label_word: &str) -> String {
    format!("Signal {{index}}'s real part is {{re}} and imaginary part is {{im}}. Actual {label_word}: {{label}}")
}

fn query_pattern(label_word: &str) -> String {
    format!("Test Signal's real part is {{re}} and imaginary part is {{im}}. Actual {label_word}:")
}

fn template(id: &str, header: &str, label_word: &str) -> PromptTemplate {
    PromptTemplate {
        id: id.to_string(),
        header: header.to_string(),
        demo_pattern: demo_pattern(label_word),
        query_pattern: query_pattern(label_word),
        separator: default_separator(),
        labels: digit_labels(8),
    }
}

/// The ten built-in formats. `format-1` through `format-4` are the
/// canonical wordings; the `variant-` entries are local paraphrases that
/// change only the header or the label word, never the numeric phrasing.
pub fn template_registry() -> Vec<PromptTemplate> {
    vec![
        template("format-1", "8APSK signals are as follows:", "Signal"),
        template("format-2", "8APSK signals are as follows:", "Constellation"),
        template(
            "format-3",
            "8APSK signals are as follows. Classify the signals based on the true set of classes [0, 1, 2, 3, 4, 5, 6, 7].",
            "Signal",
        ),
        template(
            "format-4",
            "Based on the 8APSK signals shown below, predict the Test Signal's output class from the set of classes [0, 1, 2, 3, 4, 5, 6, 7]:",
            "Signal",
        ),
        template("variant-5", "The following are 8APSK signals and their labels:", "Signal"),
        template("variant-6", "8APSK signal observations are listed below:", "Constellation"),
        template("variant-7", "8APSK signals are as follows:", "Class"),
        template("variant-8", "Received 8APSK signals are recorded below:", "Signal"),
        template(
            "variant-9",
            "Classify each 8APSK signal into one of the classes [0, 1, 2, 3, 4, 5, 6, 7]:",
            "Class",
        ),
        template("variant-10", "8APSK demodulation examples are as follows:", "Signal"),
    ]
}

#[derive(Serialize, Deserialize)]
struct TemplateFile {
    templates: Vec<PromptTemplate>,
}

/// Serializes templates to the TOML layout accepted by [`load_templates`].
pub fn templates_to_toml(templates: &[PromptTemplate]) -> Result<String, PromptError> {
    Ok(toml::to_string_pretty(&TemplateFile { templates: templates.to_vec() })?)
}

/// Loads and validates a template file (`[[templates]]` entries).
pub fn load_templates(path: &Path) -> Result<Vec<PromptTemplate>, PromptError> {
    let text = std::fs::read_to_string(path)?;
    let file: TemplateFile = toml::from_str(&text)?;
    for t in &file.templates {
        t.validate()?;
    }
    Ok(file.templates)
}

/// Writes templates to a file in the [`load_templates`] layout.
pub fn write_templates(path: &Path, templates: &[PromptTemplate]) -> Result<(), PromptError> {
    std::fs::write(path, templates_to_toml(templates)?)?;
    Ok(())
}

#[derive(Debug)]
enum Segment<'a> {
    Literal(&'a str),
    Placeholder(&'a str),
}

fn segments(pattern: &str) -> Vec<Segment<'_>> {
    let mut out = Vec::new();
    let mut rest = pattern;
    while !rest.is_empty() {
        let next = [PH_INDEX, PH_RE, PH_IM, PH_LABEL]
            .iter()
            .filter_map(|ph| rest.find(ph).map(|pos| (pos, *ph)))
            .min();
        match next {
            Some((pos, ph)) => {
                if pos > 0 {
                    out.push(Segment::Literal(&rest[..pos]));
                }
                out.push(Segment::Placeholder(&ph[1..ph.len() - 1]));
                rest = &rest[pos + ph.len()..];
            }
            None => {
                out.push(Segment::Literal(rest));
                rest = "";
            }
        }
    }
    out
}

/// Matches `line` against `pattern`, returning captured placeholder values.
/// Placeholders capture minimally up to the next literal; a trailing
/// placeholder captures the rest of the line. The whole line must match.
pub fn match_pattern(pattern: &str, line: &str) -> Option<Vec<(String, String)>> {
    let segs = segments(pattern);
    let mut caps = Vec::new();
    let mut pos = 0usize;
    let mut i = 0usize;
    while i < segs.len() {
        match &segs[i] {
            Segment::Literal(lit) => {
                if !line[pos..].starts_with(lit) {
                    return None;
                }
                pos += lit.len();
            }
            Segment::Placeholder(name) => {
                let end = match segs.get(i + 1) {
                    Some(Segment::Literal(lit)) => pos + line[pos..].find(lit)?,
                    Some(Segment::Placeholder(_)) => return None,
                    None => line.len(),
                };
                caps.push((name.to_string(), line[pos..end].to_string()));
                pos = end;
            }
        }
        i += 1;
    }
    (pos == line.len()).then_some(caps)
}

fn capture(caps: &[(String, String)], name: &str) -> Option<String> {
    caps.iter().find(|(n, _)| n == name).map(|(_, v)| v.clone())
}

/// One demonstration recovered from a prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct ParsedDemo {
    pub index: Option<usize>,
    pub re_text: String,
    pub im_text: String,
    pub label: usize,
}

/// The query slot recovered from a prompt. The texts may be non-numeric
/// (content-free queries).
#[derive(Clone, Debug, PartialEq)]
pub struct ParsedQuery {
    pub re_text: String,
    pub im_text: String,
}

/// A prompt broken back into parts, tagged with the template that matched.
#[derive(Clone, Debug, PartialEq)]
pub struct ParsedPrompt {
    pub template_id: String,
    pub labels: Vec<String>,
    pub demos: Vec<ParsedDemo>,
    pub query: ParsedQuery,
}

impl ParsedPrompt {
    pub fn k(&self) -> usize {
        self.labels.len()
    }
}

fn parse_with_template(text: &str, t: &PromptTemplate) -> Option<ParsedPrompt> {
    let rest = text.strip_prefix(&t.header)?.strip_prefix(&t.separator)?;
    let parts: Vec<&str> = rest.split(t.separator.as_str()).collect();
    let (query_part, demo_parts) = parts.split_last()?;
    if demo_parts.is_empty() {
        return None;
    }
    let caps = match_pattern(&t.query_pattern, query_part)?;
    let query = ParsedQuery {
        re_text: capture(&caps, "re")?,
        im_text: capture(&caps, "im")?,
    };
    let mut demos = Vec::with_capacity(demo_parts.len());
    for part in demo_parts {
        let caps = match_pattern(&t.demo_pattern, part)?;
        let label_text = capture(&caps, "label")?;
        let label = t.labels.iter().position(|l| *l == label_text)?;
        demos.push(ParsedDemo {
            index: capture(&caps, "index").and_then(|s| s.parse().ok()),
            re_text: capture(&caps, "re")?,
            im_text: capture(&caps, "im")?,
            label,
        });
    }
    Some(ParsedPrompt {
        template_id: t.id.clone(),
        labels: t.labels.clone(),
        demos,
        query,
    })
}

/// Tries each template in order and returns the first full match.
pub fn parse_prompt(
    text: &str,
    templates: &[PromptTemplate],
) -> Result<ParsedPrompt, PromptError> {
    templates
        .iter()
        .find_map(|t| parse_with_template(text, t))
        .ok_or(PromptError::NoMatchingTemplate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{default_ring_spec, generate_task, make_constellation, ChannelConfig};
    use crate::rng::SeedRecord;

    fn q() -> QuantizationConfig {
        QuantizationConfig::default()
    }

    fn sample(re: f64, im: f64, y: usize) -> ReceivedSample {
        ReceivedSample { x: Complex64::new(re, im), y }
    }

    #[test]
    fn quantizer_formats_documented_cases() {
        assert_eq!(format_value(-0.23, &q()).unwrap(), "-2");
        assert_eq!(format_value(0.349, &q()).unwrap(), "3");
        assert_eq!(format_value(0.0, &q()).unwrap(), "0");
        assert_eq!(format_value(-0.01, &q()).unwrap(), "0");
        assert_eq!(format_value(0.35, &q()).unwrap(), "4");
        assert_eq!(format_value(-0.35, &q()).unwrap(), "-4");
        assert!(matches!(
            format_value(f64::NAN, &q()),
            Err(PromptError::NonFinite(_))
        ));
        assert!(matches!(
            format_value(f64::INFINITY, &q()),
            Err(PromptError::NonFinite(_))
        ));
    }

    #[test]
    fn quantizer_renders_fractional_digits_without_exponents() {
        let q1 = QuantizationConfig { scale: 10.0, decimals: 1 };
        assert_eq!(format_value(0.347, &q1).unwrap(), "3.5");
        assert_eq!(format_value(-0.347, &q1).unwrap(), "-3.5");
        assert_eq!(format_value(0.0, &q1).unwrap(), "0");
        let q2 = QuantizationConfig { scale: 1.0, decimals: 2 };
        assert_eq!(format_value(1.006, &q2).unwrap(), "1.01");
        assert_eq!(format_value(12300.0, &q2).unwrap(), "12300.00");
    }

    #[test]
    fn demo_line_matches_canonical_wording() {
        let t = &template_registry()[0];
        let line = render_demonstration(t, 1, &sample(-0.2, 0.4, 5), &q()).unwrap();
        assert_eq!(
            line,
            "Signal 1's real part is -2 and imaginary part is 4. Actual Signal: 5"
        );
    }

    #[test]
    fn one_shot_prompt_matches_canonical_text_byte_for_byte() {
        let t = &template_registry()[0];
        let prompt =
            build_prompt(t, &[sample(-0.2, 0.4, 5)], Complex64::new(0.3, -0.1), &q()).unwrap();
        let expected = "8APSK signals are as follows:\n\
                        Signal 1's real part is -2 and imaginary part is 4. Actual Signal: 5\n\
                        Test Signal's real part is 3 and imaginary part is -1. Actual Signal:";
        assert_eq!(prompt.text, expected);
        assert_eq!(prompt.label_tokens, digit_labels(8));
        assert_eq!(prompt.template_id, "format-1");
    }

    #[test]
    fn prompt_text_ends_with_query_and_carries_no_answer() {
        let t = &template_registry()[0];
        let demos = [sample(0.1, 0.2, 3), sample(-0.4, 0.0, 7)];
        let prompt = build_prompt(t, &demos, Complex64::new(0.0, 0.0), &q()).unwrap();
        let query = render_query(t, Complex64::new(0.0, 0.0), &q()).unwrap();
        assert!(prompt.text.ends_with(&query));
        assert!(!prompt.text.ends_with(' '));
    }

    #[test]
    fn content_free_prompt_replaces_both_numeric_slots() {
        let t = &template_registry()[0];
        let prompt = content_free_prompt(t, &[sample(0.1, 0.2, 3)], "N/A", &q()).unwrap();
        assert!(prompt.text.ends_with(
            "Test Signal's real part is N/A and imaginary part is N/A. Actual Signal:"
        ));
        // An empty slot is allowed; it still renders and parses.
        let empty = content_free_prompt(t, &[sample(0.1, 0.2, 3)], "", &q()).unwrap();
        assert!(empty.text.ends_with(
            "Test Signal's real part is  and imaginary part is . Actual Signal:"
        ));
        let parsed = parse_prompt(&empty.text, &template_registry()).unwrap();
        assert_eq!(parsed.query.re_text, "");
    }

    #[test]
    fn registry_has_ten_validated_distinct_templates() {
        let registry = template_registry();
        assert_eq!(registry.len(), 10);
        assert_eq!(
            registry.iter().filter(|t| t.id.starts_with("format-")).count(),
            4
        );
        assert_eq!(
            registry.iter().filter(|t| t.id.starts_with("variant-")).count(),
            6
        );
        let mut ids = HashSet::new();
        let mut shapes = HashSet::new();
        for t in &registry {
            t.validate().unwrap();
            assert_eq!(t.labels, digit_labels(8), "{}", t.id);
            assert!(ids.insert(t.id.clone()), "duplicate id {}", t.id);
            assert!(
                shapes.insert((t.header.clone(), t.demo_pattern.clone(), t.query_pattern.clone())),
                "duplicate shape for {}",
                t.id
            );
        }
        assert_eq!(registry[0].header, "8APSK signals are as follows:");
        assert!(registry[3]
            .header
            .ends_with("predict the Test Signal's output class from the set of classes [0, 1, 2, 3, 4, 5, 6, 7]:"));
    }

    #[test]
    fn canonical_formats_differ_only_where_documented() {
        let registry = template_registry();
        assert!(registry[1].demo_pattern.contains("Actual Constellation:"));
        assert!(registry[1].query_pattern.ends_with("Actual Constellation:"));
        assert!(registry[2]
            .header
            .ends_with("Classify the signals based on the true set of classes [0, 1, 2, 3, 4, 5, 6, 7]."));
        assert_eq!(registry[0].demo_pattern, registry[2].demo_pattern);
        assert_eq!(registry[0].demo_pattern, registry[3].demo_pattern);
    }

    #[test]
    fn registry_round_trips_through_toml() {
        let registry = template_registry();
        let text = templates_to_toml(&registry).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("templates.toml");
        std::fs::write(&path, &text).unwrap();
        let loaded = load_templates(&path).unwrap();
        assert_eq!(loaded, registry);
    }

    #[test]
    fn template_validation_catches_malformed_patterns() {
        let mut t = template_registry()[0].clone();
        t.demo_pattern = "Signal {index}: {re} -> {label}".to_string();
        assert!(matches!(t.validate(), Err(PromptError::BadTemplate { .. })));
        let mut t = template_registry()[0].clone();
        t.query_pattern = "q {re} {im} {label}".to_string();
        assert!(t.validate().is_err());
        let mut t = template_registry()[0].clone();
        t.labels = vec!["0".into(), "0".into()];
        assert!(t.validate().is_err());
        let mut t = template_registry()[0].clone();
        t.labels[3] = "3 ".into();
        assert!(t.validate().is_err());
        let mut t = template_registry()[0].clone();
        t.header = "line one\nline two".into();
        assert!(t.validate().is_err());
    }

    #[test]
    fn build_prompt_rejects_empty_demos_and_bad_labels() {
        let t = &template_registry()[0];
        assert!(matches!(
            build_prompt(t, &[], Complex64::new(0.0, 0.0), &q()),
            Err(PromptError::NoDemos)
        ));
        let err =
            render_demonstration(t, 1, &sample(0.0, 0.0, 8), &q()).unwrap_err();
        assert!(matches!(err, PromptError::LabelOutOfRange { label: 8, k: 8 }));
    }

    #[test]
    fn rendered_prompts_parse_back_exactly_for_every_template() {
        let registry = template_registry();
        let constellation = make_constellation(&default_ring_spec()).unwrap();
        let cfg = ChannelConfig::default();
        for (ti, t) in registry.iter().enumerate() {
            for round in 0..10 {
                let seed = SeedRecord::new(round, format!("test/roundtrip-{ti}"));
                let task = generate_task(&seed, 10, 1, &constellation, &cfg).unwrap();
                let query = task.test[0].x;
                let prompt = build_prompt(t, &task.demos, query, &q()).unwrap();
                let parsed = parse_prompt(&prompt.text, &registry).unwrap();
                assert_eq!(parsed.template_id, t.id, "template {}", t.id);
                assert_eq!(parsed.demos.len(), task.demos.len());
                for (di, (pd, d)) in parsed.demos.iter().zip(task.demos.iter()).enumerate() {
                    assert_eq!(pd.index, Some(di + 1));
                    assert_eq!(pd.re_text, format_value(d.x.re, &q()).unwrap());
                    assert_eq!(pd.im_text, format_value(d.x.im, &q()).unwrap());
                    assert_eq!(pd.label, d.y);
                }
                assert_eq!(parsed.query.re_text, format_value(query.re, &q()).unwrap());
                assert_eq!(parsed.query.im_text, format_value(query.im, &q()).unwrap());
            }
        }
    }

    #[test]
    fn parser_rejects_text_from_no_known_template() {
        let registry = template_registry();
        assert!(matches!(
            parse_prompt("What is 2 + 2?", &registry),
            Err(PromptError::NoMatchingTemplate)
        ));
        // A header alone, or a header plus query with no demonstrations,
        // is not a usable prompt.
        assert!(parse_prompt("8APSK signals are as follows:", &registry).is_err());
        let t = &registry[0];
        let text = format!(
            "{}\nTest Signal's real part is 1 and imaginary part is 2. Actual Signal:",
            t.header
        );
        assert!(parse_prompt(&text, &registry).is_err());
    }

    #[test]
    fn pattern_matcher_requires_full_line_consumption() {
        let caps = match_pattern("a {re} b", "a 12 b").unwrap();
        assert_eq!(caps, vec![("re".to_string(), "12".to_string())]);
        assert!(match_pattern("a {re} b", "a 12 b trailing").is_none());
        assert!(match_pattern("a {re} b", "x 12 b").is_none());
        let caps = match_pattern("v={re}", "v=").unwrap();
        assert_eq!(caps[0].1, "");
    }
}
