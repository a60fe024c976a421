//! Shared text normalization: tokenization for retrieval and provenance
//! checks, answer normalization for judging and grounding.

use std::collections::BTreeSet;

/// Lowercased alphanumeric runs.
pub fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub fn token_set(text: &str) -> BTreeSet<String> {
    tokens(text).into_iter().collect()
}

/// Lowercase and collapse whitespace; used to compare snippets.
pub fn collapse(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Case-folds, drops punctuation (keeping decimal points between digits),
/// and collapses whitespace.
pub fn normalize_answer(text: &str) -> String {
    let chars: Vec<char> = text.chars().collect();
    let mut out = String::with_capacity(text.len());
    for (i, &c) in chars.iter().enumerate() {
        let keep = c.is_alphanumeric()
            || (c == '.'
                && i > 0
                && chars[i - 1].is_ascii_digit()
                && chars.get(i + 1).is_some_and(|n| n.is_ascii_digit()));
        if keep {
            out.extend(c.to_lowercase());
        } else {
            out.push(' ');
        }
    }
    out.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Parses an answer as a number after trimming whitespace, terminal
/// punctuation and thousands separators.
pub fn parse_number(text: &str) -> Option<f64> {
    let trimmed = text
        .trim()
        .trim_end_matches(|c: char| matches!(c, '.' | '!' | '?' | ';' | ':'))
        .replace(',', "");
    let v: f64 = trimmed.trim().parse().ok()?;
    v.is_finite().then_some(v)
}

pub fn numbers_equal(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

/// Decimal numbers in order of appearance.
pub fn numbers(text: &str) -> Vec<f64> {
    let mut out = Vec::new();
    let mut start = None;
    let bytes = text.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        let digit = b.is_ascii_digit();
        match start {
            None if digit => start = Some(i),
            Some(s) if !(digit || (b == b'.' && bytes.get(i + 1).is_some_and(u8::is_ascii_digit))) => {
                out.extend(text[s..i].parse::<f64>().ok());
                start = digit.then_some(i);
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.extend(text[s..].parse::<f64>().ok());
    }
    out
}

/// First decimal number appearing in the text.
pub fn first_number(text: &str) -> Option<f64> {
    numbers(text).first().copied()
}

/// Integers print without a fractional part; other values keep up to six
/// decimals with trailing zeros removed.
pub fn format_number(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        let s = format!("{v:.6}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}
