//! The auditor system prompt.

/// Prompt template, byte for byte; the record goes at [`PLACEHOLDER`].
pub const TEMPLATE: &str = include_str!("auditor_prompt.txt");
pub const PLACEHOLDER: &str = "[CSV Content Inserted Here]";

/// Substitutes the record CSV into the template. Trailing newlines of the
/// CSV are trimmed so the template's own line structure is kept.
pub fn render_prompt(csv_text: &str) -> String {
    let (head, tail) = TEMPLATE.split_once(PLACEHOLDER).expect("template has a placeholder");
    let body = csv_text.trim_end_matches(['\n', '\r']);
    let mut out = String::with_capacity(TEMPLATE.len() + body.len());
    out.push_str(head);
    out.push_str(body);
    out.push_str(tail);
    out
}

/// The CSV a rendered prompt carries, if it has the template's shape.
pub fn extract_csv(prompt: &str) -> Option<&str> {
    let (head, tail) = TEMPLATE.split_once(PLACEHOLDER)?;
    prompt.strip_prefix(head)?.strip_suffix(tail)
}
