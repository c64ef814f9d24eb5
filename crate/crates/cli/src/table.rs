//! Plain-text rendering for `--format table`.

use qualcode_core::audit::AuditReport;
use qualcode_core::metrics::MetricsReport;
use serde_json::Value;

fn grid(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in rows {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, cell)| format!("{cell:<w$}", w = widths[c]))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

pub fn metrics(report: &MetricsReport) -> String {
    let mut rows = vec![
        vec!["n_scored".into(), report.n_scored.to_string()],
        vec!["kappa".into(), format!("{:.4}", report.kappa)],
        vec!["mcc".into(), format!("{:.4}", report.mcc)],
        vec!["f1_micro".into(), format!("{:.4}", report.f1_micro)],
        vec!["f1_macro".into(), format!("{:.4}", report.f1_macro)],
        vec!["f1_weighted".into(), format!("{:.4}", report.f1_weighted)],
    ];
    for (c, f1) in &report.per_class_f1 {
        rows.push(vec![format!("f1[{c}]"), format!("{f1:.4}")]);
    }
    if let Some(stats) = &report.resampling {
        rows.push(vec!["kappa std".into(), format!("{:.4}", stats.std.kappa)]);
        rows.push(vec!["mcc std".into(), format!("{:.4}", stats.std.mcc)]);
    }
    let mut out = grid(&rows);
    out.push('\n');
    let cm = &report.confusion;
    let mut rows = vec![std::iter::once("human \\ predicted".to_string())
        .chain(cm.categories.iter().cloned())
        .collect::<Vec<_>>()];
    for (cat, counts) in cm.categories.iter().zip(&cm.counts) {
        rows.push(std::iter::once(cat.clone()).chain(counts.iter().map(u64::to_string)).collect());
    }
    out.push_str(&grid(&rows));
    out
}

pub fn audit(report: &AuditReport) -> String {
    let mut rows = vec![vec![
        "response".to_string(),
        "code".into(),
        "neighbors".into(),
        "nearest".into(),
        "distance".into(),
    ]];
    for f in &report.flags {
        let nearest = f.neighbors.first();
        rows.push(vec![
            f.response_id.clone(),
            f.code.clone(),
            f.neighbors.len().to_string(),
            nearest.map(|n| format!("{} ({})", n.response_id, n.code)).unwrap_or_default(),
            nearest.map(|n| format!("{:.4}", n.distance)).unwrap_or_default(),
        ]);
    }
    let mut out = format!(
        "{} flagged, {} conflict components at threshold {}\n\n",
        report.flags.len(),
        report.conflict_components.len(),
        report.threshold
    );
    out.push_str(&grid(&rows));
    out
}

/// Key/value listing of a JSON object; nested values stay compact JSON.
pub fn generic(value: &Value) -> String {
    match value {
        Value::Object(map) => {
            let rows: Vec<Vec<String>> = map
                .iter()
                .map(|(k, v)| {
                    let cell = match v {
                        Value::String(s) => s.clone(),
                        other => other.to_string(),
                    };
                    vec![k.clone(), cell]
                })
                .collect();
            grid(&rows)
        }
        Value::Array(items) => items.iter().map(generic).collect::<Vec<_>>().join("\n"),
        other => format!("{other}\n"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn grid_pads_columns() {
        let s = grid(&[vec!["a".into(), "bb".into()], vec!["ccc".into(), "d".into()]]);
        assert_eq!(s, "a    bb\nccc  d\n");
    }

    #[test]
    fn generic_lists_keys() {
        let s = generic(&json!({"revision": 3, "mode": "selective"}));
        assert_eq!(s, "mode      selective\nrevision  3\n");
    }
}
