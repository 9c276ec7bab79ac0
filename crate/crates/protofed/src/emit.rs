//! Metrics emission: CSV files and the JSON-lines transcript. Output is
//! byte-deterministic given the log.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use protofed_core::metrics::{MetricsLog, RoundClientRecord};

/// Write `metrics.csv`, `protos.csv`, `filters.csv` and `transcript.jsonl`
/// into `out_dir` (created if needed).
pub fn emit_metrics(log: &MetricsLog, out_dir: &Path) -> io::Result<()> {
    fs::create_dir_all(out_dir)?;

    let mut metrics = String::from("round,client,malicious,accuracy,loss\n");
    for r in &log.round_client {
        metrics.push_str(&format!(
            "{},{},{},{},{}\n",
            r.round, r.client, r.malicious, r.accuracy, r.loss
        ));
    }
    fs::write(out_dir.join("metrics.csv"), metrics)?;

    let mut protos = String::from("round,client,class,malicious");
    for d in 0..log.proto_dim {
        protos.push_str(&format!(",v{d}"));
    }
    protos.push('\n');
    for p in &log.prototypes {
        protos.push_str(&format!("{},{},{},{}", p.round, p.client, p.class, p.malicious));
        for v in &p.vector {
            protos.push_str(&format!(",{v}"));
        }
        protos.push('\n');
    }
    fs::write(out_dir.join("protos.csv"), protos)?;

    let mut filters = String::from("round,class,client,weight,filtered\n");
    for rc in &log.round_class {
        for w in &rc.weights {
            filters.push_str(&format!(
                "{},{},{},{},{}\n",
                rc.round, rc.class, w.client, w.weight, w.filtered
            ));
        }
    }
    fs::write(out_dir.join("filters.csv"), filters)?;

    let mut transcript = fs::File::create(out_dir.join("transcript.jsonl"))?;
    for t in &log.transcripts {
        for m in &t.messages {
            let line = serde_json::to_string(m).map_err(io::Error::other)?;
            writeln!(transcript, "{line}")?;
        }
    }
    Ok(())
}

/// Parse `metrics.csv` back into records (round-trip check and tooling).
pub fn parse_metrics_csv(text: &str) -> Result<Vec<RoundClientRecord>, String> {
    let mut lines = text.lines();
    let header = lines.next().ok_or("empty file")?;
    if header != "round,client,malicious,accuracy,loss" {
        return Err(format!("unexpected header '{header}'"));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 5 {
            return Err(format!("row {}: expected 5 columns", i + 2));
        }
        out.push(RoundClientRecord {
            round: cols[0].parse().map_err(|e| format!("row {}: {e}", i + 2))?,
            client: cols[1].parse().map_err(|e| format!("row {}: {e}", i + 2))?,
            malicious: cols[2].parse().map_err(|e| format!("row {}: {e}", i + 2))?,
            accuracy: cols[3].parse().map_err(|e| format!("row {}: {e}", i + 2))?,
            loss: cols[4].parse().map_err(|e| format!("row {}: {e}", i + 2))?,
        });
    }
    Ok(out)
}
