//! Accuracy matrix, Score / BWT and method comparison tables.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::Route;
use crate::backbone::{Model, Sampling};
use crate::error::{Error, Result};
use crate::tasks::Sample;

/// Lower-triangular accuracies: row `i` is the state after training task
/// `i + 1`, column `j` the test set of task `j + 1`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RMatrix {
    rows: Vec<Vec<f64>>,
}

impl RMatrix {
    pub fn new() -> Self {
        RMatrix::default()
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut r = RMatrix::new();
        for row in rows {
            r.push_row(row)?;
        }
        Ok(r)
    }

    /// Appends the row for the next task; it must hold one accuracy per task
    /// seen so far, each in `[0, 1]`.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.rows.len() + 1 {
            return Err(Error::contract(format!(
                "row {} needs {} entries, got {}",
                self.rows.len() + 1,
                self.rows.len() + 1,
                row.len()
            )));
        }
        if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::contract(format!("accuracy {v} outside [0, 1]")));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.rows.get(i).and_then(|r| r.get(j)).copied()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        self.rows.iter().enumerate().map(|(i, r)| r[i]).collect()
    }

    /// `row,task_1,..,task_t`; cells above the diagonal are left empty.
    /// Values use the shortest exact decimal form.
    pub fn to_csv(&self) -> String {
        let t = self.tasks();
        let mut out = String::from("row");
        for j in 1..=t {
            let _ = write!(out, ",task_{j}");
        }
        out.push('\n');
        for (i, row) in self.rows.iter().enumerate() {
            let _ = write!(out, "{}", i + 1);
            for j in 0..t {
                match row.get(j) {
                    Some(v) => {
                        let _ = write!(out, ",{v}");
                    }
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let parse_err = |detail: String| Error::Parse {
            what: "r-matrix csv",
            detail,
        };
        let mut lines = text.lines();
        lines.next().ok_or_else(|| parse_err("missing header".into()))?;
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let cells: Vec<&str> = line.split(',').skip(1).take(i + 1).collect();
            let row = cells
                .iter()
                .map(|c| c.parse::<f64>().map_err(|e| parse_err(format!("row {}: {e}", i + 1))))
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        RMatrix::from_rows(rows)
    }
}

/// Mean of the final row.
pub fn score(r: &RMatrix) -> Result<f64> {
    let last = r.rows().last().ok_or_else(|| Error::contract("empty R-matrix"))?;
    if last.len() != r.tasks() {
        return Err(Error::contract("final row incomplete"));
    }
    Ok(last.iter().sum::<f64>() / last.len() as f64)
}

/// Mean of `R[t,i] - R[i,i]` over earlier tasks; `None` for a single task.
pub fn bwt(r: &RMatrix) -> Option<f64> {
    let t = r.tasks();
    if t < 2 {
        return None;
    }
    let last = &r.rows()[t - 1];
    let sum: f64 = (0..t - 1).map(|i| last[i] - r.rows()[i][i]).sum();
    Some(sum / (t - 1) as f64)
}

/// Fraction of `test` whose greedy answer under `route` equals `y` exactly.
pub fn evaluate_task(model: &Model, route: &Route, test: &[Sample]) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::contract("empty test set"));
    }
    let vocab = model.vocab;
    let prompts: Vec<Vec<usize>> = test.iter().map(|s| s.prompt(&vocab)).collect();
    // Greedy decoding never draws from the generator.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = model.decode(&prompts, route, model.config().max_seq, Sampling::Greedy, &mut rng)?;
    let hits = test
        .iter()
        .zip(&out)
        .filter(|(s, seq)| {
            let answer = seq.get(s.x.len() + 2..).unwrap_or(&[]);
            answer.len() == s.y.len() + 1 && answer[..s.y.len()] == s.y[..] && answer[s.y.len()] == crate::tasks::EOS
        })
        .count();
    Ok(hits as f64 / test.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub seed: u64,
    pub scenario: String,
    pub score: f64,
    pub bwt: Option<f64>,
    pub learnable_params: usize,
    pub diagonal: Vec<f64>,
    pub r_matrix: RMatrix,
}

impl EvalReport {
    pub fn new(method: &str, seed: u64, scenario: &str, r: RMatrix, learnable_params: usize) -> Result<Self> {
        Ok(EvalReport {
            method: method.to_string(),
            seed,
            scenario: scenario.to_string(),
            score: score(&r)?,
            bwt: bwt(&r),
            learnable_params,
            diagonal: r.diagonal(),
            r_matrix: r,
        })
    }

    /// True when the stored metrics equal a recomputation from the matrix.
    pub fn is_consistent(&self) -> bool {
        score(&self.r_matrix).ok() == Some(self.score) && bwt(&self.r_matrix) == self.bwt && self.r_matrix.diagonal() == self.diagonal
    }
}

pub fn fmt_bwt(b: Option<f64>) -> String {
    b.map(|v| format!("{:.2}", 100.0 * v)).unwrap_or_else(|| "N/A".into())
}

/// Ranks reports by Score (ties keep method-tag order). All reports must
/// come from the same stream and seed. Returns markdown and CSV.
pub fn compare_methods(reports: &[EvalReport]) -> Result<(String, String)> {
    let first = reports.first().ok_or_else(|| Error::contract("no reports to compare"))?;
    if let Some(bad) = reports
        .iter()
        .find(|r| r.seed != first.seed || r.scenario != first.scenario || r.r_matrix.tasks() != first.r_matrix.tasks())
    {
        return Err(Error::contract(format!(
            "report for {} (seed {}, {}) does not share the stream of {} (seed {}, {})",
            bad.method, bad.seed, bad.scenario, first.method, first.seed, first.scenario
        )));
    }
    let mut order: Vec<&EvalReport> = reports.iter().collect();
    order.sort_by(|a, b| a.method.cmp(&b.method));
    order.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut md = String::from("| rank | method | Score | BWT | learnable params |\n|---|---|---|---|---|\n");
    let mut csv = String::from("rank,method,score,bwt,learnable_params\n");
    for (i, r) in order.iter().enumerate() {
        let _ = writeln!(
            md,
            "| {} | {} | {:.2} | {} | {} |",
            i + 1,
            r.method,
            100.0 * r.score,
            fmt_bwt(r.bwt),
            r.learnable_params
        );
        let bwt = r.bwt.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(csv, "{},{},{},{},{}", i + 1, r.method, r.score, bwt, r.learnable_params);
    }
    Ok((md, csv))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> RMatrix {
        RMatrix::from_rows(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    #[test]
    fn score_examples() {
        assert_eq!(score(&m(&[&[1.0], &[1.0, 1.0], &[0.8, 0.75, 0.7]])).unwrap(), 0.75);
        assert_eq!(score(&m(&[&[0.9]])).unwrap(), 0.9);
        assert_eq!(score(&m(&[&[1.0], &[1.0, 1.0]])).unwrap(), 1.0);
        assert!(score(&RMatrix::new()).is_err());
    }

    #[test]
    fn bwt_examples() {
        assert!((bwt(&m(&[&[0.9], &[0.8, 0.7]])).unwrap() + 0.1).abs() < 1e-15);
        assert_eq!(bwt(&m(&[&[0.9], &[0.9, 0.7]])).unwrap(), 0.0);
        let r = m(&[&[0.9], &[0.85, 0.8], &[0.8, 0.75, 0.6]]);
        assert!((bwt(&r).unwrap() + 0.075).abs() < 1e-15);
        assert_eq!(bwt(&m(&[&[0.9]])), None);
    }

    #[test]
    fn rows_must_grow_by_one_and_stay_in_range() {
        let mut r = RMatrix::new();
        assert!(r.push_row(vec![0.5, 0.5]).is_err());
        assert!(r.push_row(vec![1.5]).is_err());
        r.push_row(vec![0.5]).unwrap();
        assert_eq!(r.tasks(), 1);
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let r = m(&[&[0.1 + 0.2], &[1.0 / 3.0, 0.984375]]);
        let csv = r.to_csv();
        assert_eq!(csv.lines().next(), Some("row,task_1,task_2"));
        assert_eq!(csv.lines().nth(1), Some("1,0.30000000000000004,"));
        assert_eq!(RMatrix::from_csv(&csv).unwrap(), r);
    }

    fn report(method: &str, seed: u64, s: f64) -> EvalReport {
        EvalReport::new(method, seed, "similar", m(&[&[s], &[s, s]]), 10).unwrap()
    }

    #[test]
    fn comparison_is_stable_and_complete() {
        let rs = vec![report("safm", 1, 0.5), report("adaptercl", 1, 0.5), report("finetune", 1, 0.9)];
        let (md, csv) = compare_methods(&rs).unwrap();
        let names: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
        assert_eq!(names, vec!["finetune", "adaptercl", "safm"]);
        assert_eq!(md.lines().count(), 5);
        assert!(compare_methods(&[report("a", 1, 0.5), report("b", 2, 0.5)]).is_err());
    }

    #[test]
    fn reports_recompute_their_metrics() {
        let r = report("safm", 1, 0.25);
        assert!(r.is_consistent());
        let json = serde_json::to_string(&r).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert!(back.is_consistent());
        assert_eq!(back, r);
    }
}
