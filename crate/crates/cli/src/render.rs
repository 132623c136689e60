// SPDX-License-Identifier: MIT OR Apache-2.0

//! Terminal and tab-separated renderings of a [`SalienceReport`].

use std::fmt::Write;

use promptlens_core::report::{SalienceReport, SegmentRecord};
use promptlens_core::Region;

/// Light to dark purple (xterm-256 indices), for unsigned scores.
pub const SEQUENTIAL: [u8; 8] = [255, 189, 183, 177, 141, 135, 97, 54];

/// Dark blue through light to dark red, for signed scores.
pub const DIVERGING: [u8; 8] = [19, 33, 75, 153, 224, 210, 203, 160];

/// Ramp bucket for a display value: `[0, 1]` for unsigned scores,
/// `[-1, 1]` for signed ones.
pub fn shade(display: f64, signed: bool) -> u8 {
    let (ramp, t) = if signed {
        (&DIVERGING, (display.clamp(-1.0, 1.0) + 1.0) / 2.0)
    } else {
        (&SEQUENTIAL, display.clamp(0.0, 1.0))
    };
    let i = ((t * ramp.len() as f64) as usize).min(ramp.len() - 1);
    ramp[i]
}

fn dark(color: u8) -> bool {
    matches!(color, 19 | 33 | 54 | 97 | 135 | 160)
}

fn visible(seg: &SegmentRecord) -> bool {
    !seg.special
}

/// Running text with a background color per segment. Target text is
/// underlined; explained target segments are also bold.
pub fn ansi(report: &SalienceReport) -> String {
    let signed = report.method.is_signed();
    let mut out = String::new();
    for seg in report.segments.iter().filter(|s| visible(s)) {
        let color = shade(seg.display, signed);
        let fg = if dark(color) { 15 } else { 16 };
        let mut style = format!("\x1b[48;5;{color};38;5;{fg}");
        if seg.region == Region::Target {
            style.push_str(";4");
            if selected(report, seg) {
                style.push_str(";1");
            }
        }
        // keep newlines outside the colored span so the background does
        // not bleed across the terminal
        for (i, line) in seg.text.split('\n').enumerate() {
            if i > 0 {
                out.push('\n');
            }
            if !line.is_empty() {
                let _ = write!(out, "{style}m{line}\x1b[0m");
            }
        }
    }
    out.push('\n');
    out.push_str(&legend(report));
    out
}

fn selected(report: &SalienceReport, seg: &SegmentRecord) -> bool {
    let first_target = report
        .tokens
        .iter()
        .position(|t| t.region == Region::Target)
        .unwrap_or(report.tokens.len());
    (seg.first_token..seg.end_token).any(|t| t >= first_target && report.target_mask.get(t - first_target) == Some(&true))
}

fn legend(report: &SalienceReport) -> String {
    let signed = report.method.is_signed();
    let ramp = if signed { &DIVERGING } else { &SEQUENTIAL };
    let mut out = String::new();
    let _ = write!(out, "{} | {} | gamma {} | ", report.method, report.granularity, report.gamma);
    out.push_str(if signed { "-1 " } else { "0 " });
    for c in ramp {
        let _ = write!(out, "\x1b[48;5;{c}m  \x1b[0m");
    }
    out.push_str(" 1\n");
    out
}

/// Plain text with `[display]` after each segment, for logs without color.
pub fn bracketed(report: &SalienceReport) -> String {
    let mut out = String::new();
    for seg in report.segments.iter().filter(|s| visible(s)) {
        let marker = if seg.region == Region::Target && selected(report, seg) { "*" } else { "" };
        let _ = write!(out, "{}[{marker}{:.3}]", seg.text, seg.display);
    }
    out.push('\n');
    let _ = writeln!(out, "{} | {} | gamma {}", report.method, report.granularity, report.gamma);
    out
}

fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\\' => out.push_str("\\\\"),
            c => out.push(c),
        }
    }
    out
}

pub const TSV_HEADER: &str = "segment\tstart\tend\tfirst_token\tend_token\tregion\tspecial\traw\tdisplay\ttext";

/// Header plus one row per segment. At token granularity that is one row
/// per token, BOS included.
pub fn tsv(report: &SalienceReport) -> String {
    let mut out = String::from(TSV_HEADER);
    out.push('\n');
    for s in &report.segments {
        let region = match s.region {
            Region::Prompt => "prompt",
            Region::Target => "target",
        };
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            s.index,
            s.start,
            s.end,
            s.first_token,
            s.end_token,
            region,
            s.special,
            s.raw,
            s.display,
            escape(&s.text)
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shades_cover_the_ramp_ends() {
        assert_eq!(shade(0.0, false), SEQUENTIAL[0]);
        assert_eq!(shade(1.0, false), SEQUENTIAL[7]);
        assert_eq!(shade(-1.0, true), DIVERGING[0]);
        assert_eq!(shade(1.0, true), DIVERGING[7]);
        assert_eq!(shade(0.5, false), SEQUENTIAL[4]);
    }

    #[test]
    fn escape_keeps_rows_on_one_line() {
        assert_eq!(escape("a\tb\nc\\"), "a\\tb\\nc\\\\");
    }
}
