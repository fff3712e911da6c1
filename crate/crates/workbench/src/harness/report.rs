//! Report assembly: folds raw stage results into a serializable evaluation
//! report plus a human-readable Markdown table.

use serde::{Deserialize, Serialize};

use super::{detect_red_flags, EvaluationRun, StageResult};
use crate::attacks::{worst_case_ensemble, AttackOutcome, ThreatModel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackSummary {
    pub name: String,
    pub on_defended: bool,
    pub robust_accuracy: f64,
    pub forwards: u64,
    pub backwards: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: String,
    pub skipped: bool,
    pub notes: Vec<String>,
    /// Per-example union over the stage's attacks on the defended model.
    pub robust_accuracy: Option<f64>,
    pub attacks: Vec<AttackSummary>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub defense: String,
    pub threat: ThreatModel,
    pub clean_accuracy_static: f64,
    pub clean_accuracy_defended: f64,
    pub stages: Vec<StageSummary>,
    /// Per-example union of every attack on the defended model, across all
    /// stages; at most every per-stage accuracy.
    pub worst_case_robust_accuracy: Option<f64>,
    /// Mean defended inference cost in call units (static forward = 1).
    pub overhead_call_units: f64,
    pub red_flags: Vec<String>,
    pub seed: u64,
    pub config_digest: String,
}

fn overall_union(stages: &[StageResult]) -> Option<AttackOutcome> {
    let outcomes: Vec<AttackOutcome> = stages
        .iter()
        .flat_map(|s| s.attacks.iter().filter(|a| a.on_defended).map(|a| a.outcome.clone()))
        .collect();
    if outcomes.is_empty() {
        None
    } else {
        worst_case_ensemble(&outcomes).ok()
    }
}

/// Folds a finished run into the report. The worst case is computed per
/// example — an example counts as robust only if every attack in every stage
/// failed on it — never as a minimum of aggregate numbers.
pub fn compile_report(
    defense: &str,
    threat: &ThreatModel,
    run: &EvaluationRun,
    seed: u64,
    config_digest: &str,
) -> Result<EvaluationReport> {
    if run.stages.is_empty() {
        return Err(Error::invalid("cannot compile a report from zero stages"));
    }
    let stages: Vec<StageSummary> = run
        .stages
        .iter()
        .map(|s| StageSummary {
            stage: s.stage.to_string(),
            skipped: s.skipped,
            notes: s.notes.clone(),
            robust_accuracy: s.robust_accuracy(),
            attacks: s
                .attacks
                .iter()
                .map(|a| AttackSummary {
                    name: a.name.clone(),
                    on_defended: a.on_defended,
                    robust_accuracy: a.outcome.robust_accuracy(),
                    forwards: a.outcome.total_forwards(),
                    backwards: a.outcome.total_backwards(),
                })
                .collect(),
        })
        .collect();
    Ok(EvaluationReport {
        defense: defense.to_string(),
        threat: *threat,
        clean_accuracy_static: run.clean_static,
        clean_accuracy_defended: run.clean_defended,
        stages,
        worst_case_robust_accuracy: overall_union(&run.stages).map(|o| o.robust_accuracy()),
        overhead_call_units: run.overhead_call_units,
        red_flags: detect_red_flags(&run.stages),
        seed,
        config_digest: config_digest.to_string(),
    })
}

fn pct(v: f64) -> String {
    format!("{:.1}%", 100.0 * v)
}

/// Renders the report as a Markdown summary table plus per-stage detail.
pub fn render_markdown(r: &EvaluationReport) -> String {
    let mut md = String::new();
    md.push_str("# Evaluation report\n\n");
    md.push_str("| Defense | Clean (static) | Clean (defended) |");
    for s in &r.stages {
        md.push_str(&format!(" {} |", s.stage));
    }
    md.push_str(" Worst case | Overhead | Red flags |\n");
    md.push_str("|---|---|---|");
    for _ in &r.stages {
        md.push_str("---|");
    }
    md.push_str("---|---|---|\n");
    md.push_str(&format!(
        "| {} | {} | {} |",
        r.defense,
        pct(r.clean_accuracy_static),
        pct(r.clean_accuracy_defended)
    ));
    for s in &r.stages {
        match (s.skipped, s.robust_accuracy) {
            (true, _) => md.push_str(" skipped |"),
            (false, Some(acc)) => md.push_str(&format!(" {} |", pct(acc))),
            (false, None) => md.push_str(" — |"),
        }
    }
    md.push_str(&format!(
        " {} | {:.1}x | {} |\n\n",
        r.worst_case_robust_accuracy.map_or("—".to_string(), pct),
        r.overhead_call_units,
        r.red_flags.len()
    ));

    md.push_str("## Stages\n\n");
    for s in &r.stages {
        md.push_str(&format!("### {}\n\n", s.stage));
        if s.skipped {
            for n in &s.notes {
                md.push_str(&format!("- skipped: {n}\n"));
            }
            md.push('\n');
            continue;
        }
        md.push_str("| Attack | Target | Robust accuracy | Forwards | Backwards |\n");
        md.push_str("|---|---|---|---|---|\n");
        for a in &s.attacks {
            md.push_str(&format!(
                "| {} | {} | {} | {} | {} |\n",
                a.name,
                if a.on_defended { "defended" } else { "static" },
                pct(a.robust_accuracy),
                a.forwards,
                a.backwards
            ));
        }
        for n in &s.notes {
            md.push_str(&format!("\n- note: {n}\n"));
        }
        md.push('\n');
    }

    if r.red_flags.is_empty() {
        md.push_str("## Red flags\n\nnone\n");
    } else {
        md.push_str("## Red flags\n\n");
        for f in &r.red_flags {
            md.push_str(&format!("- {f}\n"));
        }
    }
    md
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::{ExampleOutcome, ThreatModel};
    use crate::harness::StageAttack;
    use crate::tensor::Tensor;

    fn outcome(successes: &[bool]) -> AttackOutcome {
        AttackOutcome {
            examples: successes
                .iter()
                .enumerate()
                .map(|(id, &success)| ExampleOutcome {
                    example_id: id,
                    best_delta: Tensor::zeros(vec![2]),
                    best_loss: 0.0,
                    success,
                    forwards: 3,
                    backwards: 2,
                    queries: 3,
                })
                .collect(),
        }
    }

    fn run_with(stages: Vec<StageResult>) -> EvaluationRun {
        EvaluationRun {
            clean_static: 0.9,
            clean_defended: 0.85,
            stages,
            overhead_call_units: 41.0,
        }
    }

    fn single(stage: &'static str, name: &str, successes: &[bool]) -> StageResult {
        StageResult {
            stage,
            skipped: false,
            notes: Vec::new(),
            attacks: vec![StageAttack {
                name: name.to_string(),
                on_defended: true,
                outcome: outcome(successes),
            }],
        }
    }

    #[test]
    fn single_stage_worst_case_equals_that_stage() {
        let run = run_with(vec![single("white-box", "pgd-ce", &[true, false, false, false])]);
        let r = compile_report("hedge", &ThreatModel::linf(0.1), &run, 5, "abc").unwrap();
        assert_eq!(r.worst_case_robust_accuracy, Some(0.75));
        assert_eq!(r.stages[0].robust_accuracy, Some(0.75));
    }

    #[test]
    fn worst_case_is_the_per_example_union_not_the_aggregate_min() {
        // Two attacks, each 50% successful on disjoint halves: aggregate min
        // says 50% robust, the per-example union says 0%.
        let run = run_with(vec![
            single("white-box", "a", &[true, true, false, false]),
            single("bpda", "b", &[false, false, true, true]),
        ]);
        let r = compile_report("soap", &ThreatModel::linf(0.1), &run, 5, "abc").unwrap();
        assert_eq!(r.worst_case_robust_accuracy, Some(0.0));
        for s in &r.stages {
            assert!(r.worst_case_robust_accuracy.unwrap() <= s.robust_accuracy.unwrap());
        }
    }

    #[test]
    fn comparison_runs_on_the_static_core_do_not_enter_the_worst_case() {
        let mut st = single("black-box", "ray-search-defended", &[false, false, false, false]);
        st.attacks.push(StageAttack {
            name: "ray-search-static".to_string(),
            on_defended: false,
            outcome: outcome(&[true, true, true, true]),
        });
        let run = run_with(vec![st]);
        let r = compile_report("aid", &ThreatModel::linf(0.1), &run, 5, "abc").unwrap();
        assert_eq!(r.worst_case_robust_accuracy, Some(1.0));
    }

    #[test]
    fn report_round_trips_through_json_byte_identically() {
        let run = run_with(vec![single("white-box", "pgd-ce", &[true, false, true, false])]);
        let r = compile_report("adp", &ThreatModel::linf(0.1), &run, 5, "digest").unwrap();
        let a = serde_json::to_string_pretty(&r).unwrap();
        let parsed: EvaluationReport = serde_json::from_str(&a).unwrap();
        let b = serde_json::to_string_pretty(&parsed).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn markdown_contains_the_summary_row_and_every_stage() {
        let run = run_with(vec![
            single("white-box", "pgd-ce", &[true, false]),
            StageResult {
                stage: "randomness",
                skipped: true,
                notes: vec!["deterministic defense; randomness stage skipped".to_string()],
                attacks: Vec::new(),
            },
        ]);
        let r = compile_report("clc", &ThreatModel::linf(0.1), &run, 5, "abc").unwrap();
        let md = render_markdown(&r);
        assert!(md.contains("| clc |"));
        assert!(md.contains("### white-box"));
        assert!(md.contains("skipped"));
        assert!(md.contains("41.0x"));
    }

    #[test]
    fn empty_run_is_rejected() {
        let run = run_with(Vec::new());
        assert!(compile_report("none", &ThreatModel::linf(0.1), &run, 5, "x").is_err());
    }
}
