//! Report emission: fixed-schema CSVs, the markdown table bundle, the
//! per-round WER series, and an optional dependency-free SVG chart.
//!
//! CSV schemas (schema version 1, column names are the contract):
//!   wer_summary.csv      speaker, severity, bm_wer, sm_wer,
//!                        pers_server_all, pers_server_50, pers_ondevice
//!   atsr_summary.csv     speaker, severity, bm_atsr, sm_atsr,
//!                        atsr_server_all, atsr_server_50, atsr_ondevice
//!   correction_cost.csv  speaker, severity, consecutive_cost, single_cost
//!   wer_by_round.csv     speaker, severity, round, wer
//!
//! Floats are printed with two decimal places; identical runs produce
//! byte-identical files.

use std::path::Path;

use persim_core::error::Error;
use persim_core::evaluation::{median, relative_improvement, SeverityMedians};
use persim_core::synthcorpus::Severity;

use crate::experiment::{ExperimentResult, SpeakerOutcome};

pub const REPORT_FILES: [&str; 6] = [
    "manifest.tsv",
    "wer_summary.csv",
    "atsr_summary.csv",
    "correction_cost.csv",
    "wer_by_round.csv",
    "tables.md",
];

fn fmt2(x: f64) -> String {
    format!("{x:.2}")
}

fn write_file(path: &Path, body: String) -> Result<(), Error> {
    std::fs::write(path, body)?;
    Ok(())
}

pub fn wer_summary_csv(outcomes: &[SpeakerOutcome]) -> String {
    let mut s = String::from("speaker,severity,bm_wer,sm_wer,pers_server_all,pers_server_50,pers_ondevice\n");
    for o in outcomes {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            o.speaker,
            o.severity,
            fmt2(o.bm_wer),
            fmt2(o.sm_wer),
            fmt2(o.pers_server_all),
            fmt2(o.pers_server_50),
            fmt2(o.pers_ondevice),
        ));
    }
    s
}

pub fn atsr_summary_csv(outcomes: &[SpeakerOutcome]) -> String {
    let mut s = String::from("speaker,severity,bm_atsr,sm_atsr,atsr_server_all,atsr_server_50,atsr_ondevice\n");
    for o in outcomes {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            o.speaker,
            o.severity,
            fmt2(o.bm_atsr),
            fmt2(o.sm_atsr),
            fmt2(o.atsr_server_all),
            fmt2(o.atsr_server_50),
            fmt2(o.atsr_ondevice),
        ));
    }
    s
}

pub fn correction_cost_csv(outcomes: &[SpeakerOutcome]) -> String {
    let mut s = String::from("speaker,severity,consecutive_cost,single_cost\n");
    for o in outcomes {
        s.push_str(&format!(
            "{},{},{},{}\n",
            o.speaker,
            o.severity,
            fmt2(o.consecutive_cost),
            fmt2(o.single_cost),
        ));
    }
    s
}

pub fn wer_by_round_csv(outcomes: &[SpeakerOutcome]) -> String {
    let mut s = String::from("speaker,severity,round,wer\n");
    for o in outcomes {
        for (round, wer) in o.wer_by_round.iter().enumerate() {
            s.push_str(&format!("{},{},{},{}\n", o.speaker, o.severity, round, fmt2(*wer)));
        }
    }
    s
}

fn by_severity<F: Fn(&SpeakerOutcome) -> f64>(
    outcomes: &[SpeakerOutcome],
    f: F,
) -> Result<SeverityMedians, Error> {
    let values: Vec<f64> = outcomes.iter().map(&f).collect();
    let labels: Vec<Severity> = outcomes.iter().map(|o| o.severity).collect();
    persim_core::evaluation::median_by_severity(&values, &labels)
}

fn cell(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.1}"),
        None => "-".into(),
    }
}

fn improvement_cell(baseline: Option<f64>, new: Option<f64>) -> String {
    match (baseline, new) {
        (Some(b), Some(n)) if b > 0.0 => match relative_improvement(b, n) {
            Ok(ri) => format!("{ri}%"),
            Err(_) => "-".into(),
        },
        _ => "-".into(),
    }
}

/// Per-round median WER across the given outcomes (positions past a
/// speaker's recorded series are skipped; with the default config all
/// series have equal length).
pub fn median_round_series(outcomes: &[SpeakerOutcome], rounds: usize) -> Vec<Option<f64>> {
    (0..=rounds)
        .map(|r| {
            let vals: Vec<f64> = outcomes
                .iter()
                .filter_map(|o| o.wer_by_round.get(r).copied())
                .collect();
            median(&vals)
        })
        .collect()
}

pub fn tables_markdown(result: &ExperimentResult) -> Result<String, Error> {
    let o = &result.outcomes;
    let mut md = String::new();
    md.push_str("# Personalization experiment report\n\n");
    md.push_str(&format!(
        "Master seed {}; corpus digest {:016x}. Base model: best epoch {}, dev WER {:.1}, TYPICAL test WER {:.1}.\n\n",
        result.seed, result.corpus_digest, result.base_best_epoch, result.base_dev_wer, result.typical_test_wer
    ));

    let bm = by_severity(o, |s| s.bm_wer)?;
    let sm = by_severity(o, |s| s.sm_wer)?;
    let p50 = by_severity(o, |s| s.pers_server_50)?;
    let pall = by_severity(o, |s| s.pers_server_all)?;
    let pod = by_severity(o, |s| s.pers_ondevice)?;

    md.push_str("## Median test WER by severity: 50-utterance budget\n\n");
    md.push_str("| severity | base | seed | pers-50 | improvement vs base |\n");
    md.push_str("|---|---|---|---|---|\n");
    for sev in Severity::DISORDERED {
        md.push_str(&format!(
            "| {} | {} | {} | {} | {} |\n",
            sev,
            cell(bm.get(sev)),
            cell(sm.get(sev)),
            cell(p50.get(sev)),
            improvement_cell(bm.get(sev), p50.get(sev)),
        ));
    }
    md.push('\n');

    md.push_str("## Per-speaker test WER\n\n");
    md.push_str("| speaker | severity | base | seed | server-all | server-50 | on-device |\n");
    md.push_str("|---|---|---|---|---|---|---|\n");
    for s in o {
        md.push_str(&format!(
            "| {} | {} | {:.1} | {:.1} | {:.1} | {:.1} | {:.1} |\n",
            s.speaker, s.severity, s.bm_wer, s.sm_wer, s.pers_server_all, s.pers_server_50, s.pers_ondevice
        ));
    }
    md.push('\n');

    md.push_str("## Median test WER by severity: full-data server recipe\n\n");
    md.push_str("| severity | base | seed | pers | improvement vs base | improvement vs seed |\n");
    md.push_str("|---|---|---|---|---|---|\n");
    for sev in Severity::DISORDERED {
        md.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} |\n",
            sev,
            cell(bm.get(sev)),
            cell(sm.get(sev)),
            cell(pall.get(sev)),
            improvement_cell(bm.get(sev), pall.get(sev)),
            improvement_cell(sm.get(sev), pall.get(sev)),
        ));
    }
    md.push('\n');

    let bm_a = by_severity(o, |s| s.bm_atsr)?;
    let sm_a = by_severity(o, |s| s.sm_atsr)?;
    let pa_a = by_severity(o, |s| s.atsr_ondevice)?;
    md.push_str("## Median assistant task success rate by severity\n\n");
    md.push_str("| severity | base | seed | pers |\n");
    md.push_str("|---|---|---|---|\n");
    for sev in Severity::DISORDERED {
        md.push_str(&format!(
            "| {} | {} | {} | {} |\n",
            sev,
            cell(bm_a.get(sev)),
            cell(sm_a.get(sev)),
            cell(pa_a.get(sev)),
        ));
    }
    md.push('\n');

    let ccost = by_severity(o, |s| s.consecutive_cost)?;
    let scost = by_severity(o, |s| s.single_cost)?;
    md.push_str("## Median correction cost (WER of corrected hypotheses)\n\n");
    md.push_str("| severity | consecutive | single |\n");
    md.push_str("|---|---|---|\n");
    for sev in Severity::DISORDERED {
        md.push_str(&format!(
            "| {} | {} | {} |\n",
            sev,
            cell(ccost.get(sev)),
            cell(scost.get(sev)),
        ));
    }
    md.push('\n');

    md.push_str("## Median test WER by consecutive round (on-device recipe)\n\n");
    md.push_str("| round | median WER |\n");
    md.push_str("|---|---|\n");
    for (r, v) in median_round_series(o, result.rounds).into_iter().enumerate() {
        md.push_str(&format!("| {} | {} |\n", r, cell(v)));
    }
    md.push_str(&format!(
        "\nMedian on-device WER by severity after the final round: {} / {} / {} (mild / moderate / severe).\n",
        cell(pod.get(Severity::Mild)),
        cell(pod.get(Severity::Moderate)),
        cell(pod.get(Severity::Severe)),
    ));
    Ok(md)
}

/// Minimal line chart of the per-round median WER: pure text SVG, no
/// dependencies. One polyline per severity plus the overall median.
pub fn round_series_svg(result: &ExperimentResult) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const ML: f64 = 56.0; // margins
    const MR: f64 = 16.0;
    const MT: f64 = 24.0;
    const MB: f64 = 44.0;
    let rounds = result.rounds;
    let plot_w = W - ML - MR;
    let plot_h = H - MT - MB;

    let groups: Vec<(&str, Vec<&SpeakerOutcome>)> = vec![
        ("mild", result.outcomes.iter().filter(|o| o.severity == Severity::Mild).collect()),
        ("moderate", result.outcomes.iter().filter(|o| o.severity == Severity::Moderate).collect()),
        ("severe", result.outcomes.iter().filter(|o| o.severity == Severity::Severe).collect()),
    ];
    let colors = ["#2a7de1", "#e8a33d", "#d0423f"];

    type Series<'a> = (&'a str, &'a str, Vec<(usize, f64)>);
    let mut y_max: f64 = 10.0;
    let mut series: Vec<Series> = Vec::new();
    for ((name, group), color) in groups.iter().zip(colors) {
        if group.is_empty() {
            continue;
        }
        let owned: Vec<SpeakerOutcome> = group.iter().map(|o| (*o).clone()).collect();
        let meds = median_round_series(&owned, rounds);
        let pts: Vec<(usize, f64)> = meds
            .into_iter()
            .enumerate()
            .filter_map(|(r, m)| m.map(|v| (r, v)))
            .collect();
        for (_, v) in &pts {
            y_max = y_max.max(*v);
        }
        series.push((name, color, pts));
    }
    y_max = (y_max / 10.0).ceil() * 10.0;

    let x = |r: usize| ML + plot_w * r as f64 / rounds.max(1) as f64;
    let y = |wer: f64| MT + plot_h * (1.0 - wer / y_max);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    // Axes and gridlines.
    for i in 0..=5 {
        let wer = y_max * i as f64 / 5.0;
        let yy = y(wer);
        svg.push_str(&format!(
            "<line x1=\"{ML}\" y1=\"{yy:.1}\" x2=\"{:.1}\" y2=\"{yy:.1}\" stroke=\"#ddd\"/>\n",
            W - MR
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"end\" fill=\"#444\">{wer:.0}</text>\n",
            ML - 6.0,
            yy + 4.0
        ));
    }
    for r in 0..=rounds {
        let xx = x(r);
        svg.push_str(&format!(
            "<text x=\"{xx:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"middle\" fill=\"#444\">{r}</text>\n",
            H - MB + 16.0
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"middle\" fill=\"#222\">consecutive training round</text>\n",
        ML + plot_w / 2.0,
        H - 10.0
    ));
    svg.push_str(&format!(
        "<text x=\"14\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"middle\" fill=\"#222\" transform=\"rotate(-90 14 {:.1})\">median test WER</text>\n",
        MT + plot_h / 2.0,
        MT + plot_h / 2.0
    ));

    for (i, (name, color, pts)) in series.iter().enumerate() {
        let path: Vec<String> = pts.iter().map(|(r, v)| format!("{:.1},{:.1}", x(*r), y(*v))).collect();
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            path.join(" ")
        ));
        for (r, v) in pts {
            svg.push_str(&format!(
                "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"2.5\" fill=\"{color}\"/>\n",
                x(*r),
                y(*v)
            ));
        }
        let ly = MT + 14.0 * i as f64;
        svg.push_str(&format!(
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{color}\"/>\n",
            W - MR - 110.0,
            ly
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" fill=\"#222\">{name}</text>\n",
            W - MR - 96.0,
            ly + 9.0
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Serializes the full result for later `report` invocations.
pub fn results_toml(result: &ExperimentResult) -> Result<String, Error> {
    toml::to_string(result).map_err(|e| Error::Data(format!("results encode: {e}")))
}

pub fn load_results(path: &Path) -> Result<ExperimentResult, Error> {
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::Data(format!("results decode: {e}")))
}

/// Writes every report file for a finished experiment into `out`.
pub fn emit_all(result: &ExperimentResult, out: &Path, svg: bool) -> Result<(), Error> {
    write_file(&out.join("wer_summary.csv"), wer_summary_csv(&result.outcomes))?;
    write_file(&out.join("atsr_summary.csv"), atsr_summary_csv(&result.outcomes))?;
    write_file(&out.join("correction_cost.csv"), correction_cost_csv(&result.outcomes))?;
    write_file(&out.join("wer_by_round.csv"), wer_by_round_csv(&result.outcomes))?;
    write_file(&out.join("tables.md"), tables_markdown(result)?)?;
    write_file(&out.join("results.toml"), results_toml(result)?)?;
    if svg {
        write_file(&out.join("wer_by_round.svg"), round_series_svg(result))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outcome(speaker: &str, severity: Severity, bm: f64, sm: f64, od: f64) -> SpeakerOutcome {
        SpeakerOutcome {
            speaker: speaker.into(),
            severity,
            bm_wer: bm,
            sm_wer: sm,
            pers_server_all: od - 1.0,
            pers_server_50: od + 1.0,
            pers_ondevice: od,
            bm_atsr: 100.0 - bm,
            sm_atsr: 100.0 - sm,
            atsr_server_all: 100.0 - od + 1.0,
            atsr_server_50: 100.0 - od - 1.0,
            atsr_ondevice: 100.0 - od,
            wer_by_round: vec![sm, (sm + od) / 2.0, od],
            consecutive_cost: sm - 2.0,
            single_cost: sm,
            utterances_consumed: 10,
            max_buffer_len: 5,
            buffer_len_between_rounds: vec![0, 0],
            seed_best_epoch: 1,
            seed_dev_wer: sm,
        }
    }

    fn fixture() -> ExperimentResult {
        ExperimentResult {
            seed: 7,
            corpus_digest: 0xabcd,
            pretrain_losses: vec![2.5, 1.0],
            base_best_epoch: 3,
            base_dev_wer: 1.0,
            base_dev_wer_trace: vec![50.0, 10.0, 2.0, 1.0],
            typical_test_wer: 1.5,
            rounds: 2,
            outcomes: vec![
                outcome("mild-a", Severity::Mild, 20.0, 15.0, 8.0),
                outcome("mild-b", Severity::Mild, 24.0, 17.0, 10.0),
                outcome("mod-a", Severity::Moderate, 45.0, 30.0, 20.0),
                outcome("sev-a", Severity::Severe, 80.0, 60.0, 45.0),
            ],
        }
    }

    #[test]
    fn csv_headers_are_the_documented_schemas() {
        let r = fixture();
        let wer = wer_summary_csv(&r.outcomes);
        assert!(wer.starts_with(
            "speaker,severity,bm_wer,sm_wer,pers_server_all,pers_server_50,pers_ondevice\n"
        ));
        assert!(atsr_summary_csv(&r.outcomes).starts_with(
            "speaker,severity,bm_atsr,sm_atsr,atsr_server_all,atsr_server_50,atsr_ondevice\n"
        ));
        assert!(correction_cost_csv(&r.outcomes)
            .starts_with("speaker,severity,consecutive_cost,single_cost\n"));
        assert!(wer_by_round_csv(&r.outcomes).starts_with("speaker,severity,round,wer\n"));

        // One data row per speaker, values with two decimals.
        assert_eq!(wer.lines().count(), 1 + r.outcomes.len());
        assert!(wer.contains("mild-a,MILD,20.00,15.00,7.00,9.00,8.00"));
    }

    #[test]
    fn wer_by_round_lists_every_round_in_order() {
        let r = fixture();
        let csv = wer_by_round_csv(&r.outcomes);
        // 4 speakers x 3 recorded rounds (0..=2) plus the header.
        assert_eq!(csv.lines().count(), 1 + 4 * 3);
        let mild_a: Vec<&str> = csv.lines().filter(|l| l.starts_with("mild-a,")).collect();
        assert_eq!(
            mild_a,
            vec!["mild-a,MILD,0,15.00", "mild-a,MILD,1,11.50", "mild-a,MILD,2,8.00"]
        );
    }

    #[test]
    fn median_round_series_is_columnwise() {
        let r = fixture();
        let meds = median_round_series(&r.outcomes, 2);
        // Round 0 values: 15, 17, 30, 60 -> median 23.5.
        assert_eq!(meds[0], Some(23.5));
        // Round 2 values: 8, 10, 20, 45 -> median 15.0.
        assert_eq!(meds[2], Some(15.0));
        // Requesting rounds past the recorded series yields empty medians.
        let longer = median_round_series(&r.outcomes, 5);
        assert_eq!(longer[5], None);
    }

    #[test]
    fn tables_markdown_contains_every_section_and_real_medians() {
        let r = fixture();
        let md = tables_markdown(&r).unwrap();
        for heading in [
            "## Median test WER by severity: 50-utterance budget",
            "## Per-speaker test WER",
            "## Median test WER by severity: full-data server recipe",
            "## Median assistant task success rate by severity",
            "## Median correction cost (WER of corrected hypotheses)",
            "## Median test WER by consecutive round (on-device recipe)",
        ] {
            assert!(md.contains(heading), "missing {heading}");
        }
        // MILD base median is 22.0; pers-50 median 10.0 -> 55% improvement.
        assert!(md.contains("| MILD | 22.0 | 16.0 | 10.0 | 55% |"), "{md}");
    }

    #[test]
    fn emitted_reports_are_deterministic_and_reloadable() {
        let r = fixture();
        let dir = tempfile::tempdir().unwrap();
        emit_all(&r, dir.path(), true).unwrap();
        let first: Vec<Vec<u8>> = REPORT_FILES
            .iter()
            .skip(1) // the manifest is written by the experiment stage
            .map(|f| std::fs::read(dir.path().join(f)).unwrap())
            .collect();
        emit_all(&r, dir.path(), true).unwrap();
        for (name, before) in REPORT_FILES.iter().skip(1).zip(&first) {
            let after = std::fs::read(dir.path().join(name)).unwrap();
            assert_eq!(&after, before, "{name} changed between identical runs");
        }

        let reloaded = load_results(&dir.path().join("results.toml")).unwrap();
        assert_eq!(reloaded.seed, r.seed);
        assert_eq!(reloaded.outcomes.len(), r.outcomes.len());
        assert_eq!(reloaded.outcomes[3].wer_by_round, r.outcomes[3].wer_by_round);

        let svg = std::fs::read_to_string(dir.path().join("wer_by_round.svg")).unwrap();
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("polyline"));
        for name in ["mild", "moderate", "severe"] {
            assert!(svg.contains(name));
        }
    }
}
