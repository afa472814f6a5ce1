//! Report emission: CSV tables, the JSON results bundle, SVG charts, and an
//! index manifest enumerating every written file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use dysbench_core::error::{Error, Result};

use crate::artifacts::atomic_write;
use crate::bench::{
    cross_dataset_matrix, error_profiles, severity_curves, BenchmarkResult,
};
use crate::svg;

/// Write every report artifact for a benchmark result. Returns the emitted
/// file names (also written to `index.json`).
pub fn emit_reports(result: &BenchmarkResult, out_dir: &Path) -> Result<Vec<String>> {
    if result.cells.is_empty() {
        return Err(Error::Config("no benchmark cells to report".into()));
    }
    let reports = out_dir.join("reports");
    std::fs::create_dir_all(&reports)?;
    let mut files = Vec::new();
    let put = |name: &str, content: String, files: &mut Vec<String>| -> Result<()> {
        atomic_write(&reports.join(name), content.as_bytes())?;
        files.push(name.to_string());
        Ok(())
    };

    // Benchmark table CSV: baselines first, then LLM-enhanced decoders,
    // mirroring the two-section table layout.
    let mut table = String::from(
        "section,architecture,train_corpus,test_corpus,seed,n_utterances,micro_wer,macro_wer,micro_cer,macro_cer\n",
    );
    let mut ordered = result.cells.clone();
    ordered.sort_by_key(|c| {
        (
            !is_baseline(&c.architecture),
            c.architecture.clone(),
            c.train_corpus.clone(),
            c.test_corpus.clone(),
            c.seed,
        )
    });
    for c in &ordered {
        let section = if is_baseline(&c.architecture) {
            "baseline"
        } else {
            "llm_enhanced"
        };
        writeln!(
            table,
            "{section},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6}",
            c.architecture,
            c.train_corpus,
            c.test_corpus,
            c.seed,
            c.n_utterances,
            c.micro_wer,
            c.macro_wer,
            c.micro_cer,
            c.macro_cer
        )
        .unwrap();
    }
    put("benchmark.csv", table, &mut files)?;

    // Severity stratification CSV.
    let mut sev = String::from(
        "architecture,corpus,severity,seed,n_utterances,micro_wer,micro_cer,char_S,char_D,char_I\n",
    );
    for c in &result.severity_cells {
        writeln!(
            sev,
            "{},{},{},{},{},{:.6},{:.6},{},{},{}",
            c.architecture,
            c.corpus,
            c.severity,
            c.seed,
            c.n_utterances,
            c.micro_wer,
            c.micro_cer,
            c.char_substitutions,
            c.char_deletions,
            c.char_insertions
        )
        .unwrap();
    }
    put("severity.csv", sev, &mut files)?;

    // Severity line chart per corpus (mean across seeds).
    for (corpus, archs) in severity_curves(result) {
        let x_labels: Vec<String> = archs
            .values()
            .next()
            .map(|series| series.iter().map(|(s, _)| s.clone()).collect())
            .unwrap_or_default();
        let series: Vec<(String, Vec<f64>)> = archs
            .iter()
            .map(|(arch, pts)| (arch.clone(), pts.iter().map(|(_, v)| *v).collect()))
            .collect();
        let chart = svg::line_chart(
            &format!("WER by severity: {corpus}"),
            &x_labels,
            &series,
            "micro WER",
        );
        put(&format!("severity-{corpus}.svg"), chart, &mut files)?;
    }

    // Benchmark bars per corpus (in-domain mean across seeds).
    let mut per_corpus: BTreeMap<String, Vec<(String, f64)>> = BTreeMap::new();
    let mut seen: BTreeMap<(String, String), (f64, usize)> = BTreeMap::new();
    for c in &result.cells {
        if c.train_corpus == c.test_corpus {
            let e = seen
                .entry((c.test_corpus.clone(), c.architecture.clone()))
                .or_insert((0.0, 0));
            e.0 += c.micro_wer;
            e.1 += 1;
        }
    }
    for ((corpus, arch), (sum, n)) in seen {
        per_corpus
            .entry(corpus)
            .or_default()
            .push((arch, sum / n as f64));
    }
    for (corpus, bars) in per_corpus {
        let chart = svg::bar_chart(
            &format!("In-domain WER: {corpus}"),
            &bars,
            "micro WER",
        );
        put(&format!("benchmark-{corpus}.svg"), chart, &mut files)?;
    }

    // Cross-dataset matrix CSV.
    let mut cross = String::from("architecture,train_corpus,test_corpus,mean_micro_wer\n");
    for (arch, matrix) in cross_dataset_matrix(result) {
        for ((train, test), wer) in matrix {
            writeln!(cross, "{arch},{train},{test},{wer:.6}").unwrap();
        }
    }
    put("cross_dataset.csv", cross, &mut files)?;

    // Error profiles CSV + transcription samples.
    let mut prof = String::from("architecture,mean_cer,char_S,char_D,char_I\n");
    for p in error_profiles(result) {
        writeln!(
            prof,
            "{},{:.6},{},{},{}",
            p.architecture, p.mean_cer, p.char_substitutions, p.char_deletions, p.char_insertions
        )
        .unwrap();
    }
    put("error_profile.csv", prof, &mut files)?;

    let mut samples = String::from("corpus,seed,severity,utterance_id,speaker_or_model,text\n");
    for row in &result.samples {
        writeln!(
            samples,
            "{},{},{},{},ground_truth,{}",
            row.corpus, row.seed, row.severity, row.utterance_id, row.reference
        )
        .unwrap();
        for (arch, text) in &row.hypotheses {
            writeln!(
                samples,
                "{},{},{},{},{},{}",
                row.corpus, row.seed, row.severity, row.utterance_id, arch, text
            )
            .unwrap();
        }
    }
    put("samples.csv", samples, &mut files)?;

    // Full JSON bundle.
    let bundle = serde_json::to_string_pretty(result).map_err(|e| Error::Format(e.to_string()))?;
    put("results.json", bundle, &mut files)?;

    // Index manifest enumerating the file set.
    files.sort();
    let index = serde_json::json!({
        "config_hash": result.provenance.config_hash,
        "tool_version": result.provenance.tool_version,
        "files": files,
    });
    atomic_write(
        &reports.join("index.json"),
        serde_json::to_string_pretty(&index).unwrap().as_bytes(),
    )?;
    files.push("index.json".to_string());
    Ok(files)
}

fn is_baseline(arch: &str) -> bool {
    matches!(arch, "A_ctc" | "A_ctc_fused" | "B_seq2seq")
}
