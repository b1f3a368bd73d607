//! CPLEX LP text export.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{MilpProblem, ObjectiveSense, Result, Sense};

const MAX_LINE: usize = 255;
const MAX_NAME: usize = 255;
const SYMBOLS: &str = "!\"#$%&()/,.;?@_`'{}|~";

fn legal_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || SYMBOLS.contains(c)
}

fn sanitize_one(name: &str, fallback: &str) -> String {
    let mut s: String = name
        .chars()
        .map(|c| if legal_char(c) { c } else { '_' })
        .collect();
    let bad_start = match s.chars().next() {
        None => true,
        Some(c) if c.is_ascii_digit() || c == '.' => true,
        // e1, E5, ee... read as exponents by some parsers
        Some('e' | 'E') => matches!(s.chars().nth(1), Some(d) if d.is_ascii_digit() || d == 'e' || d == 'E'),
        _ => false,
    };
    let keyword = matches!(
        s.to_ascii_lowercase().as_str(),
        "free" | "inf" | "infinity" | "st" | "end" | "bounds" | "binary" | "binaries"
    );
    if bad_start || keyword {
        s = format!("{fallback}_{s}");
    }
    s.truncate(MAX_NAME);
    s
}

/// Make names legal and unique; changed names are reported once with a
/// warning. Deterministic for a given input order.
pub fn sanitize_names(names: &[String], fallback: &str) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(names.len());
    let mut changed = 0;
    for name in names {
        let base = sanitize_one(name, fallback);
        let mut candidate = base.clone();
        let mut k = 1;
        while seen.contains(&candidate) {
            let suffix = format!("_{k}");
            let mut b = base.clone();
            b.truncate(MAX_NAME - suffix.len());
            candidate = b + &suffix;
            k += 1;
        }
        if candidate != *name {
            changed += 1;
        }
        seen.insert(candidate.clone());
        out.push(candidate);
    }
    if changed > 0 {
        log::warn!("renamed {changed} LP identifiers to satisfy the file format");
    }
    out
}

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

/// Append `tokens` after `head`, wrapping onto indented continuation lines.
fn wrapped(out: &mut String, head: &str, tokens: &[String], tail: &str) {
    let mut line = String::from(head);
    let mut parts: Vec<&str> = tokens.iter().map(String::as_str).collect();
    if !tail.is_empty() {
        parts.push(tail);
    }
    for t in parts {
        if line.len() + 1 + t.len() > MAX_LINE && !line.trim().is_empty() {
            out.push_str(&line);
            out.push('\n');
            line = String::from(" ");
        }
        if !line.ends_with(' ') {
            line.push(' ');
        }
        line.push_str(t);
    }
    out.push_str(&line);
    out.push('\n');
}

fn linear_tokens(terms: &[(usize, f64)], names: &[String]) -> Vec<String> {
    terms
        .iter()
        .map(|(j, a)| {
            let sign = if *a < 0.0 { '-' } else { '+' };
            format!("{sign} {} {}", num(a.abs()), names[*j])
        })
        .collect()
}

/// Render `milp` in CPLEX LP format.
pub fn lp_string(milp: &MilpProblem) -> String {
    let vnames = sanitize_names(
        &milp.variables.iter().map(|v| v.name.clone()).collect::<Vec<_>>(),
        "v",
    );
    let cnames = sanitize_names(
        &milp.constraints.iter().map(|c| c.name.clone()).collect::<Vec<_>>(),
        "c",
    );
    let mut out = String::new();
    out.push_str(match milp.sense {
        ObjectiveSense::Maximize => "Maximize\n",
        ObjectiveSense::Minimize => "Minimize\n",
    });
    let mut obj = linear_tokens(&milp.objective, &vnames);
    if obj.is_empty() && !vnames.is_empty() {
        obj.push(format!("0 {}", vnames[0]));
    }
    wrapped(&mut out, " obj:", &obj, "");
    out.push_str("Subject To\n");
    for (c, name) in milp.constraints.iter().zip(&cnames) {
        let op = match c.sense {
            Sense::Le => "<=",
            Sense::Eq => "=",
            Sense::Ge => ">=",
        };
        let mut toks = linear_tokens(&c.terms, &vnames);
        if toks.is_empty() {
            toks.push(format!("0 {}", vnames[0]));
        }
        wrapped(&mut out, &format!(" {name}:"), &toks, &format!("{op} {}", num(c.rhs)));
    }
    out.push_str("Bounds\n");
    for (v, name) in milp.variables.iter().zip(&vnames) {
        if v.binary && v.lower == 0.0 && v.upper == 1.0 {
            continue;
        }
        let lo_inf = v.lower == f64::NEG_INFINITY;
        let hi_inf = v.upper == f64::INFINITY;
        let line = if v.lower == v.upper {
            format!(" {name} = {}", num(v.lower))
        } else if lo_inf && hi_inf {
            format!(" {name} free")
        } else {
            let lo = if lo_inf { "-inf".to_string() } else { num(v.lower) };
            let hi = if hi_inf { "+inf".to_string() } else { num(v.upper) };
            format!(" {lo} <= {name} <= {hi}")
        };
        writeln!(out, "{line}").unwrap();
    }
    let bins: Vec<&String> = milp
        .variables
        .iter()
        .zip(&vnames)
        .filter(|(v, _)| v.binary)
        .map(|(_, n)| n)
        .collect();
    if !bins.is_empty() {
        out.push_str("Binary\n");
        for n in bins {
            writeln!(out, " {n}").unwrap();
        }
    }
    out.push_str("End\n");
    out
}

pub fn export_lp_file(milp: &MilpProblem, path: &Path) -> Result<()> {
    milp.validate()?;
    fs::write(path, lp_string(milp))?;
    Ok(())
}
