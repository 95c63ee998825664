use serde::Serialize;

use super::BiasReport;

/// One row of the flat report table: a group and a worker class.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableRow {
    pub group_id: String,
    pub label: String,
    pub class: String,
    pub count: usize,
    pub mean_time: Option<f64>,
    pub median_time: Option<f64>,
    pub gold_count: usize,
    pub accuracy: Option<f64>,
    pub z_time: Option<f64>,
    pub z_accuracy: Option<f64>,
}

impl BiasReport {
    pub fn table(&self) -> Vec<TableRow> {
        self.per_condition
            .iter()
            .flat_map(|c| {
                c.classes.iter().chain(&c.switches).map(move |s| TableRow {
                    group_id: c.group_id.clone(),
                    label: c.label.clone(),
                    class: s.class.clone(),
                    count: s.count,
                    mean_time: s.mean_time,
                    median_time: s.median_time,
                    gold_count: s.gold_count,
                    accuracy: s.accuracy,
                    z_time: s.z_time,
                    z_accuracy: s.z_accuracy,
                })
            })
            .collect()
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

fn quote(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// CSV with a header line.
pub fn render_table(report: &BiasReport) -> String {
    let mut out =
        String::from("group_id,label,class,count,mean_time,median_time,gold_count,accuracy,z_time,z_accuracy\n");
    for r in report.table() {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            quote(&r.group_id),
            quote(&r.label),
            r.class,
            r.count,
            cell(r.mean_time),
            cell(r.median_time),
            r.gold_count,
            cell(r.accuracy),
            cell(r.z_time),
            cell(r.z_accuracy),
        ));
    }
    out
}

/// The full report as indented JSON.
pub fn render_document(report: &BiasReport) -> String {
    serde_json::to_string_pretty(report).expect("report serializes")
}
