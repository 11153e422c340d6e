//! Plain-text and CSV renderings of evaluation results.
//!
//! Every CSV starts with a `# config-sha256: <digest>` comment line. Numbers
//! use the shortest representation that parses back to the same `f64`.

use std::fmt::Write as _;

use crate::eval::{EvalResult, GroupReport, HardIdReport};

pub const DIGEST_PREFIX: &str = "# config-sha256: ";

fn header(digest: &str) -> String {
    format!("{DIGEST_PREFIX}{digest}\n")
}

/// The digest recorded in a report, if any.
pub fn embedded_digest(text: &str) -> Option<&str> {
    text.lines().find_map(|l| l.strip_prefix(DIGEST_PREFIX))
}

/// One `(metric, value)` row per channel metric plus the hard-ID threshold.
pub fn metrics_csv(channels: &[(String, EvalResult)], split: &HardIdReport, digest: &str) -> String {
    let mut s = header(digest);
    s.push_str("metric,value\n");
    for (name, r) in channels {
        let _ = writeln!(s, "{name}.auroc,{}", r.auroc);
        let _ = writeln!(s, "{name}.fpr95,{}", r.fpr95);
        let _ = writeln!(s, "{name}.ap,{}", r.ap);
    }
    let _ = writeln!(s, "hard_id.threshold,{}", split.threshold);
    s
}

pub fn channels_csv(channels: &[(String, EvalResult)], digest: &str) -> String {
    let mut s = header(digest);
    s.push_str("channel,auroc,fpr95,ap\n");
    for (name, r) in channels {
        let _ = writeln!(s, "{name},{},{},{}", r.auroc, r.fpr95, r.ap);
    }
    s
}

/// `(group, count, mean_<channel>...)`; an empty group leaves its means blank.
pub fn groups_csv(report: &GroupReport, digest: &str) -> String {
    let mut s = header(digest);
    s.push_str("group,count");
    for c in &report.channels {
        let _ = write!(s, ",mean_{c}");
    }
    s.push('\n');
    for g in &report.groups {
        let _ = write!(s, "{},{}", g.group.name(), g.count);
        for m in &g.means {
            match m {
                Some(v) => {
                    let _ = write!(s, ",{v}");
                }
                None => s.push(','),
            }
        }
        s.push('\n');
    }
    s
}

/// Human-readable summary table.
pub fn text_report(channels: &[(String, EvalResult)], split: &HardIdReport, truth: &GroupReport, digest: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "config sha256 {digest}");
    s.push('\n');
    let _ = writeln!(s, "{:<10} {:>10} {:>10} {:>10}", "channel", "AUROC", "FPR95", "AP");
    for (name, r) in channels {
        let _ = writeln!(s, "{:<10} {:>10.4} {:>10.4} {:>10.4}", name, r.auroc, r.fpr95, r.ap);
    }
    for (title, rep) in [
        (format!("groups at the 95%-TPR memory threshold {:.6}", split.threshold), &split.report),
        ("groups from ground truth".to_string(), truth),
    ] {
        s.push('\n');
        let _ = writeln!(s, "{title}");
        let _ = write!(s, "{:<10} {:>8}", "group", "pixels");
        for c in &rep.channels {
            let _ = write!(s, " {c:>10}");
        }
        s.push('\n');
        for g in &rep.groups {
            let _ = write!(s, "{:<10} {:>8}", g.group.name(), g.count);
            for m in &g.means {
                match m {
                    Some(v) => {
                        let _ = write!(s, " {v:>10.4}");
                    }
                    None => {
                        let _ = write!(s, " {:>10}", "-");
                    }
                }
            }
            s.push('\n');
        }
    }
    s
}
