//! Paired-prediction bias metrics and report aggregation.
//!
//! All aggregates are computed from unrounded values; rounding to two
//! decimals (half away from zero) happens only when a report is rendered.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::transform::{PairedSample, TokenMasker, TokenSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MismatchCount {
    pub mismatches: usize,
    pub total_pairs: usize,
}

impl MismatchCount {
    pub fn new(mismatches: usize, total_pairs: usize) -> Result<Self> {
        if total_pairs == 0 {
            return Err(Error::EmptyCount);
        }
        if mismatches > total_pairs {
            return Err(Error::InvalidInput(format!(
                "{mismatches} mismatches exceed {total_pairs} pairs"
            )));
        }
        Ok(MismatchCount {
            mismatches,
            total_pairs,
        })
    }
}

fn view(tokens: &TokenSequence, masker: Option<&TokenMasker<'_>>) -> TokenSequence {
    match masker {
        Some(m) => m.mask(tokens),
        None => tokens.clone(),
    }
}

/// A pair is mismatched when the prediction on the original differs from
/// the prediction on its canonical variant. With a masker both sides are
/// masked first.
pub fn count_mismatches(
    model: &Model,
    pairs: &[PairedSample],
    masker: Option<&TokenMasker<'_>>,
) -> Result<MismatchCount> {
    let mut mismatches = 0;
    for p in pairs {
        let variant = p.canonical().ok_or_else(|| {
            Error::InvalidInput(format!("pair `{}` has no swapped variant", p.pair_id))
        })?;
        let a = model.predict(&view(&p.original, masker))?;
        let b = model.predict(&view(variant, masker))?;
        if a != b {
            mismatches += 1;
        }
    }
    MismatchCount::new(mismatches, pairs.len())
}

pub fn bias_percentage(count: &MismatchCount) -> Result<f64> {
    if count.total_pairs == 0 {
        return Err(Error::EmptyCount);
    }
    Ok(100.0 * count.mismatches as f64 / count.total_pairs as f64)
}

/// Mismatches of an approach relative to the zero-shot baseline, in percent.
/// Exceeds 100 when the approach is more biased than the baseline.
pub fn normalized_bias_score(approach: &MismatchCount, baseline: &MismatchCount) -> Result<f64> {
    if baseline.mismatches == 0 {
        return Err(Error::ZeroBaseline);
    }
    Ok(100.0 * approach.mismatches as f64 / baseline.mismatches as f64)
}

/// Percentage of `samples` whose prediction equals the label.
pub fn accuracy<'a, I>(model: &Model, samples: I, masker: Option<&TokenMasker<'_>>) -> Result<f64>
where
    I: IntoIterator<Item = (&'a TokenSequence, usize)>,
{
    let mut total = 0usize;
    let mut correct = 0usize;
    for (tokens, label) in samples {
        total += 1;
        if model.predict(&view(tokens, masker))? == label {
            correct += 1;
        }
    }
    if total == 0 {
        return Err(Error::InvalidInput("accuracy over an empty set".into()));
    }
    Ok(100.0 * correct as f64 / total as f64)
}

pub fn accuracy_original(
    model: &Model,
    pairs: &[PairedSample],
    masker: Option<&TokenMasker<'_>>,
) -> Result<f64> {
    accuracy(model, pairs.iter().map(|p| (&p.original, p.label)), masker)
}

pub fn accuracy_swapped(
    model: &Model,
    pairs: &[PairedSample],
    masker: Option<&TokenMasker<'_>>,
) -> Result<f64> {
    let mut items = Vec::with_capacity(pairs.len());
    for p in pairs {
        let v = p.canonical().ok_or_else(|| {
            Error::InvalidInput(format!("pair `{}` has no swapped variant", p.pair_id))
        })?;
        items.push((v, p.label));
    }
    accuracy(model, items, masker)
}

/// Rounds to `decimals` places, halves away from zero. Values within 1e-9
/// (relative) of a half are treated as exact halves so that decimal inputs
/// such as 36.465 round the way they read.
pub fn round_half_away(x: f64, decimals: u32) -> f64 {
    let scale = 10f64.powi(decimals as i32);
    let scaled = x * scale;
    let floor = scaled.floor();
    let frac = scaled - floor;
    let tol = 1e-9 * scaled.abs().max(1.0);
    let rounded = if (frac - 0.5).abs() <= tol {
        if scaled >= 0.0 {
            floor + 1.0
        } else {
            floor
        }
    } else {
        scaled.round()
    };
    rounded / scale
}

pub fn fmt2(x: f64) -> String {
    let r = round_half_away(x, 2);
    // avoid "-0.00"
    let r = if r == 0.0 { 0.0 } else { r };
    format!("{r:.2}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt2).unwrap_or_default()
}

// ---------------------------------------------------------------------------
// Reports

/// Raw per-task measurements fed to `aggregate_report`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskInput {
    pub task: String,
    pub count: MismatchCount,
    pub baseline: Option<MismatchCount>,
    pub accuracy_original: Option<f64>,
    pub accuracy_swapped: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: String,
    pub total_pairs: usize,
    pub mismatches: usize,
    pub bias_percentage: f64,
    pub baseline_mismatches: Option<usize>,
    pub normalized_bias_score: Option<f64>,
    pub accuracy_original: Option<f64>,
    pub accuracy_swapped: Option<f64>,
    pub accuracy_average: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub strategy: String,
    pub tasks: Vec<TaskReport>,
    pub overall_average_accuracy: Option<f64>,
    pub average_bias_score: Option<f64>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn task_report(input: &TaskInput) -> Result<TaskReport> {
    let normalized = input
        .baseline
        .as_ref()
        .map(|b| normalized_bias_score(&input.count, b))
        .transpose()?;
    let accs: Vec<f64> = [input.accuracy_original, input.accuracy_swapped]
        .into_iter()
        .flatten()
        .collect();
    Ok(TaskReport {
        task: input.task.clone(),
        total_pairs: input.count.total_pairs,
        mismatches: input.count.mismatches,
        bias_percentage: bias_percentage(&input.count)?,
        baseline_mismatches: input.baseline.map(|b| b.mismatches),
        normalized_bias_score: normalized,
        accuracy_original: input.accuracy_original,
        accuracy_swapped: input.accuracy_swapped,
        accuracy_average: (!accs.is_empty()).then(|| mean(&accs)),
    })
}

/// Per-task averages are the mean of the original and swapped accuracies;
/// the overall accuracy and the average bias score are means over tasks of
/// the unrounded per-task values. An aggregate is `None` unless every task
/// provides its input.
pub fn aggregate_report(strategy: &str, tasks: Vec<TaskReport>) -> Result<BiasReport> {
    if tasks.is_empty() {
        return Err(Error::InvalidInput("report needs at least one task".into()));
    }
    let accs: Option<Vec<f64>> = tasks.iter().map(|t| t.accuracy_average).collect();
    let scores: Option<Vec<f64>> = tasks.iter().map(|t| t.normalized_bias_score).collect();
    Ok(BiasReport {
        strategy: strategy.to_owned(),
        overall_average_accuracy: accs.map(|a| mean(&a)),
        average_bias_score: scores.map(|s| mean(&s)),
        tasks,
    })
}

pub fn aggregate_inputs(strategy: &str, inputs: &[TaskInput]) -> Result<BiasReport> {
    let tasks = inputs.iter().map(task_report).collect::<Result<Vec<_>>>()?;
    aggregate_report(strategy, tasks)
}

const REPORT_COLUMNS: [&str; 10] = [
    "strategy",
    "task",
    "size",
    "mismatches",
    "bias_percentage",
    "baseline_mismatches",
    "normalized_bias_score",
    "accuracy_original",
    "accuracy_swapped",
    "accuracy_average",
];

impl BiasReport {
    /// One row per task followed by an `Average` row.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(REPORT_COLUMNS)?;
        for t in &self.tasks {
            w.write_record([
                self.strategy.clone(),
                t.task.clone(),
                t.total_pairs.to_string(),
                t.mismatches.to_string(),
                fmt2(t.bias_percentage),
                t.baseline_mismatches
                    .map(|b| b.to_string())
                    .unwrap_or_default(),
                fmt_opt(t.normalized_bias_score),
                fmt_opt(t.accuracy_original),
                fmt_opt(t.accuracy_swapped),
                fmt_opt(t.accuracy_average),
            ])?;
        }
        w.write_record([
            self.strategy.clone(),
            "Average".to_owned(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            fmt_opt(self.average_bias_score),
            String::new(),
            String::new(),
            fmt_opt(self.overall_average_accuracy),
        ])?;
        let bytes = w
            .into_inner()
            .map_err(|e| Error::io("<report>", e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "## {}\n", self.strategy);
        s.push_str("| Task | Size | Mismatches | Bias% | Normalized Bias Score | Acc. Original | Acc. Swapped | Acc. Average |\n");
        s.push_str("|---|---:|---:|---:|---:|---:|---:|---:|\n");
        for t in &self.tasks {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {} | {} | {} |",
                t.task,
                t.total_pairs,
                t.mismatches,
                fmt2(t.bias_percentage),
                fmt_opt(t.normalized_bias_score),
                fmt_opt(t.accuracy_original),
                fmt_opt(t.accuracy_swapped),
                fmt_opt(t.accuracy_average),
            );
        }
        let _ = writeln!(
            s,
            "\nOverall average accuracy: {}  \nAverage bias score: {}",
            self.overall_average_accuracy
                .map(fmt2)
                .unwrap_or_else(|| "n/a".into()),
            self.average_bias_score
                .map(fmt2)
                .unwrap_or_else(|| "n/a".into()),
        );
        s
    }
}

/// Strategy x task grid merged from several reports.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub tasks: Vec<String>,
    pub rows: Vec<BiasReport>,
}

fn strategy_rank(name: &str) -> usize {
    ["zero_shot", "fod", "tm", "jlo", "foa"]
        .iter()
        .position(|s| *s == name)
        .unwrap_or(usize::MAX)
}

/// Merges per-run reports. Reports for the same strategy are combined task
/// by task; a task reported twice for one strategy with different numbers
/// is a conflict.
pub fn compare(reports: &[BiasReport]) -> Result<Comparison> {
    let mut tasks: Vec<String> = Vec::new();
    let mut by_strategy: BTreeMap<(usize, String), Vec<TaskReport>> = BTreeMap::new();
    let mut first_seen: Vec<String> = Vec::new();
    for r in reports {
        if !first_seen.contains(&r.strategy) {
            first_seen.push(r.strategy.clone());
        }
        let rank = strategy_rank(&r.strategy);
        let order = if rank == usize::MAX {
            1000 + first_seen.iter().position(|s| *s == r.strategy).unwrap()
        } else {
            rank
        };
        let slot = by_strategy.entry((order, r.strategy.clone())).or_default();
        for t in &r.tasks {
            if !tasks.contains(&t.task) {
                tasks.push(t.task.clone());
            }
            match slot.iter().find(|x| x.task == t.task) {
                Some(existing) if existing == t => {}
                Some(_) => {
                    return Err(Error::Validation(format!(
                        "conflicting results for task `{}` under strategy `{}`",
                        t.task, r.strategy
                    )))
                }
                None => slot.push(t.clone()),
            }
        }
    }
    let mut rows = Vec::new();
    for ((_, strategy), mut ts) in by_strategy {
        ts.sort_by_key(|t| tasks.iter().position(|x| *x == t.task));
        rows.push(aggregate_report(&strategy, ts)?);
    }
    Ok(Comparison { tasks, rows })
}

impl Comparison {
    fn cell(
        &self,
        row: &BiasReport,
        task: &str,
        pick: impl Fn(&TaskReport) -> Option<f64>,
    ) -> String {
        row.tasks
            .iter()
            .find(|t| t.task == task)
            .and_then(pick)
            .map(fmt2)
            .unwrap_or_default()
    }

    /// Normalized bias scores, shaped like a strategy x task table with an
    /// average column.
    pub fn bias_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["strategy".to_owned()];
        header.extend(self.tasks.iter().cloned());
        header.push("average".into());
        w.write_record(&header)?;
        for row in &self.rows {
            let mut rec = vec![row.strategy.clone()];
            for t in &self.tasks {
                rec.push(self.cell(row, t, |x| x.normalized_bias_score));
            }
            rec.push(fmt_opt(row.average_bias_score));
            w.write_record(&rec)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::io("<report>", e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn accuracy_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["strategy".to_owned(), "data".to_owned()];
        header.extend(self.tasks.iter().cloned());
        header.push("overall_average_accuracy".into());
        w.write_record(&header)?;
        for row in &self.rows {
            for (label, pick) in [
                (
                    "original",
                    (|x: &TaskReport| x.accuracy_original) as fn(&TaskReport) -> Option<f64>,
                ),
                ("swapped", |x: &TaskReport| x.accuracy_swapped),
                ("average", |x: &TaskReport| x.accuracy_average),
            ] {
                let mut rec = vec![row.strategy.clone(), label.to_owned()];
                for t in &self.tasks {
                    rec.push(self.cell(row, t, pick));
                }
                rec.push(if label == "average" {
                    fmt_opt(row.overall_average_accuracy)
                } else {
                    String::new()
                });
                w.write_record(&rec)?;
            }
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::io("<report>", e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("## Bias scores\n\n| Approach |");
        for t in &self.tasks {
            let _ = write!(s, " {t} |");
        }
        s.push_str(" Average |\n|---|");
        s.push_str(&"---:|".repeat(self.tasks.len() + 1));
        s.push('\n');
        for row in &self.rows {
            let _ = write!(s, "| {} |", row.strategy);
            for t in &self.tasks {
                let _ = write!(s, " {} |", self.cell(row, t, |x| x.normalized_bias_score));
            }
            let _ = writeln!(s, " {} |", fmt_opt(row.average_bias_score));
        }

        s.push_str("\n## Mismatches\n\n| Approach |");
        for t in &self.tasks {
            let _ = write!(s, " {t} |");
        }
        s.push_str("\n|---|");
        s.push_str(&"---:|".repeat(self.tasks.len()));
        s.push('\n');
        for row in &self.rows {
            let _ = write!(s, "| {} |", row.strategy);
            for t in &self.tasks {
                let c = row
                    .tasks
                    .iter()
                    .find(|x| x.task == *t)
                    .map(|x| {
                        format!(
                            "{} / {} ({}%)",
                            x.mismatches,
                            x.total_pairs,
                            fmt2(x.bias_percentage)
                        )
                    })
                    .unwrap_or_default();
                let _ = write!(s, " {c} |");
            }
            s.push('\n');
        }

        s.push_str("\n## Accuracy (%)\n\n| Approach | Data |");
        for t in &self.tasks {
            let _ = write!(s, " {t} |");
        }
        s.push_str(" Overall Average Accuracy |\n|---|---|");
        s.push_str(&"---:|".repeat(self.tasks.len() + 1));
        s.push('\n');
        for row in &self.rows {
            for (label, pick) in [
                (
                    "Original",
                    (|x: &TaskReport| x.accuracy_original) as fn(&TaskReport) -> Option<f64>,
                ),
                ("Swapped", |x: &TaskReport| x.accuracy_swapped),
                ("Average", |x: &TaskReport| x.accuracy_average),
            ] {
                let _ = write!(s, "| {} | {label} |", row.strategy);
                for t in &self.tasks {
                    let _ = write!(s, " {} |", self.cell(row, t, pick));
                }
                let overall = if label == "Average" {
                    fmt_opt(row.overall_average_accuracy)
                } else {
                    String::new()
                };
                let _ = writeln!(s, " {overall} |");
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{seeded_rng, ClassifierParams, Vocabulary};

    fn mc(m: usize, t: usize) -> MismatchCount {
        MismatchCount::new(m, t).unwrap()
    }

    #[test]
    fn bias_percentage_cases() {
        assert_eq!(fmt2(bias_percentage(&mc(528, 7057)).unwrap()), "7.48");
        assert_eq!(fmt2(bias_percentage(&mc(525, 10034)).unwrap()), "5.23");
        assert_eq!(bias_percentage(&mc(0, 12)).unwrap(), 0.0);
        assert!(MismatchCount::new(0, 0).is_err());
        assert!(MismatchCount::new(3, 2).is_err());
    }

    #[test]
    fn normalized_score_cases() {
        assert_eq!(
            fmt2(normalized_bias_score(&mc(30, 4857), &mc(218, 4857)).unwrap()),
            "13.76"
        );
        assert_eq!(
            fmt2(normalized_bias_score(&mc(119, 10034), &mc(525, 10034)).unwrap()),
            "22.67"
        );
        assert_eq!(
            normalized_bias_score(&mc(17, 50), &mc(17, 50)).unwrap(),
            100.0
        );
        assert!(matches!(
            normalized_bias_score(&mc(1, 5), &mc(0, 5)).unwrap_err(),
            Error::ZeroBaseline
        ));
        // worse than baseline is allowed
        assert_eq!(
            normalized_bias_score(&mc(20, 50), &mc(10, 50)).unwrap(),
            200.0
        );
    }

    #[test]
    fn rounding_half_away() {
        assert_eq!(fmt2(36.465), "36.47");
        assert_eq!(fmt2(79.945), "79.95");
        assert_eq!(fmt2(49.995), "50.00");
        assert_eq!(fmt2(-1.005), "-1.01");
        assert_eq!(fmt2(1.004999), "1.00");
        assert_eq!(fmt2(0.0), "0.00");
        assert_eq!(fmt2(-0.001), "0.00");
    }

    fn constant_model(bias: [f64; 2]) -> Model {
        let vocab = Vocabulary::from_tokens(["a", "b", "c"]).unwrap();
        let mut rng = seeded_rng(0);
        let mut params = ClassifierParams::init(vocab.len(), 4, 2, 0.0, &mut rng).unwrap();
        params.head_weights.data.iter_mut().for_each(|w| *w = 0.0);
        params.head_bias = bias.to_vec();
        Model {
            vocab,
            params,
            seed: 0,
            strategy: None,
        }
    }

    fn pair(id: &str, label: usize, o: &str, v: &str) -> PairedSample {
        PairedSample {
            pair_id: id.into(),
            label,
            original: o.split(' ').collect(),
            variants: vec![v.split(' ').collect()],
            canonical_variant: 0,
        }
    }

    #[test]
    fn constant_model_has_no_mismatches() {
        let m = constant_model([0.0, 1.0]);
        let pairs = [pair("1", 0, "a", "b"), pair("2", 1, "b c", "a")];
        assert_eq!(count_mismatches(&m, &pairs, None).unwrap(), mc(0, 2));
    }

    #[test]
    fn lookup_model_mismatches_bruteforce() {
        // one-hot-ish rows so that a token decides the class
        let vocab = Vocabulary::from_tokens(["pos", "neg"]).unwrap();
        let mut rng = seeded_rng(0);
        let mut params = ClassifierParams::init(vocab.len(), 2, 2, 0.0, &mut rng).unwrap();
        params.embedding.data = vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0];
        params.head_weights.data = vec![0.0, 1.0, 1.0, 0.0];
        params.head_bias = vec![0.0, 0.0];
        let m = Model {
            vocab,
            params,
            seed: 0,
            strategy: None,
        };
        let pairs = [
            pair("1", 1, "pos", "pos"),
            pair("2", 1, "pos", "neg"),
            pair("3", 0, "neg", "pos"),
            pair("4", 0, "neg", "neg"),
        ];
        let lookup = |t: &str| usize::from(t == "pos");
        let expected = pairs
            .iter()
            .filter(|p| lookup(&p.original[0]) != lookup(&p.variants[0][0]))
            .count();
        assert_eq!(expected, 2);
        assert_eq!(count_mismatches(&m, &pairs, None).unwrap(), mc(expected, 4));
        assert_eq!(accuracy_original(&m, &pairs, None).unwrap(), 100.0);
        assert_eq!(accuracy_swapped(&m, &pairs, None).unwrap(), 50.0);
    }

    #[test]
    fn accuracy_counts() {
        let m = constant_model([1.0, 0.0]);
        let seqs: Vec<TokenSequence> = (0..10).map(|_| "a".split(' ').collect()).collect();
        // 7 of 10 labeled 0
        let labels = [0, 0, 1, 0, 0, 1, 0, 0, 1, 0];
        let acc = accuracy(&m, seqs.iter().zip(labels), None).unwrap();
        assert!((acc - 70.0).abs() < 1e-12);
        let balanced = [0, 1, 0, 1];
        assert_eq!(
            accuracy(&m, seqs.iter().take(4).zip(balanced), None).unwrap(),
            50.0
        );
    }

    #[test]
    fn aggregate_single_task_is_identity() {
        let input = TaskInput {
            task: "t".into(),
            count: mc(5, 50),
            baseline: Some(mc(10, 50)),
            accuracy_original: Some(80.0),
            accuracy_swapped: Some(70.0),
        };
        let r = aggregate_inputs("jlo", &[input]).unwrap();
        assert_eq!(r.overall_average_accuracy, Some(75.0));
        assert_eq!(r.average_bias_score, Some(50.0));
        assert!(aggregate_report("jlo", vec![]).is_err());
    }

    #[test]
    fn compare_detects_conflict() {
        let mk = |m| {
            aggregate_inputs(
                "fod",
                &[TaskInput {
                    task: "x".into(),
                    count: mc(m, 10),
                    baseline: None,
                    accuracy_original: None,
                    accuracy_swapped: None,
                }],
            )
            .unwrap()
        };
        assert!(compare(&[mk(1), mk(1)]).is_ok());
        assert!(compare(&[mk(1), mk(2)]).is_err());
    }
}
