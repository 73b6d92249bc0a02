use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::eer::compute_eer;
use super::{split_scores, Condition, ScoredUtterance};
use crate::error::{KwsError, Result};
use crate::speaker::{AgeGroup, Locale};
use crate::train::Variant;

/// Strata with fewer positives or negatives than this are marked insufficient.
pub const MIN_CELL_COUNT: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    /// `None` means all locales.
    pub locale: Option<Locale>,
    /// `None` means all age groups.
    pub age_group: Option<AgeGroup>,
    pub positives: usize,
    pub negatives: usize,
    /// `None` when the cell is insufficient.
    pub eer: Option<f64>,
    pub threshold: Option<f64>,
    /// `(EER_sys − EER_ref) / EER_ref`; negative is better.
    pub relative_improvement: Option<f64>,
}

impl CellResult {
    pub fn insufficient(&self) -> bool {
        self.eer.is_none()
    }

    fn matches(&self, locale: Option<Locale>, age: Option<AgeGroup>) -> bool {
        self.locale == locale && self.age_group == age
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: Variant,
    pub condition: Condition,
    pub overall: CellResult,
    /// Locale × age grid including the "all" margins (overall excluded).
    pub cells: Vec<CellResult>,
    /// Pooled designated under-represented cells.
    pub underrepresented_cells: Vec<(Locale, AgeGroup)>,
    pub underrepresented: Option<CellResult>,
    /// Label of the reference run, when relative improvements are filled in.
    pub reference: Option<String>,
    pub corpus_fingerprint: Option<String>,
    pub skipped: usize,
}

/// `(sys − ref) / ref`; `0` when both are zero and undefined when only the
/// reference is zero.
pub fn relative_improvement(system: f64, reference: f64) -> Option<f64> {
    if reference == 0.0 {
        (system == 0.0).then_some(0.0)
    } else {
        Some((system - reference) / reference)
    }
}

fn cell<'a>(
    scored: impl IntoIterator<Item = &'a ScoredUtterance>,
    locale: Option<Locale>,
    age_group: Option<AgeGroup>,
    min_count: usize,
) -> Result<CellResult> {
    let (pos, neg) = split_scores(scored);
    let enough = pos.len() >= min_count.max(1) && neg.len() >= min_count.max(1);
    let eer = if enough { Some(compute_eer(&pos, &neg)?) } else { None };
    Ok(CellResult {
        locale,
        age_group,
        positives: pos.len(),
        negatives: neg.len(),
        eer: eer.map(|e| e.eer),
        threshold: eer.map(|e| e.threshold),
        relative_improvement: None,
    })
}

/// EER overall, per (locale × age) cell with margins, and on the pooled
/// under-represented cells, optionally relative to a reference score set.
pub fn stratified_report(
    scored: &[ScoredUtterance],
    reference: Option<(&str, &[ScoredUtterance])>,
    underrepresented: &[(Locale, AgeGroup)],
) -> Result<EvalReport> {
    let Some(first) = scored.first() else {
        return Err(KwsError::Validation("no scored utterances to report on".into()));
    };
    let (variant, condition) = (first.variant, first.condition);
    let build = |set: &[ScoredUtterance]| -> Result<(CellResult, Vec<CellResult>, Option<CellResult>)> {
        let overall = cell(set, None, None, 1)?;
        let mut cells = Vec::new();
        for locale in std::iter::once(None).chain(Locale::ALL.map(Some)) {
            for age in std::iter::once(None).chain(AgeGroup::ALL.map(Some)) {
                if locale.is_none() && age.is_none() {
                    continue;
                }
                let members = set
                    .iter()
                    .filter(|s| locale.is_none_or(|l| s.locale == l) && age.is_none_or(|a| s.age_group == a));
                cells.push(cell(members, locale, age, MIN_CELL_COUNT)?);
            }
        }
        let under = (!underrepresented.is_empty())
            .then(|| {
                let members = set.iter().filter(|s| underrepresented.contains(&(s.locale, s.age_group)));
                cell(members, None, None, MIN_CELL_COUNT)
            })
            .transpose()?;
        Ok((overall, cells, under))
    };
    let (mut overall, mut cells, mut under) = build(scored)?;
    let reference_label = if let Some((label, ref_scores)) = reference {
        if ref_scores.is_empty() {
            return Err(KwsError::Validation(format!("reference `{label}` has no scores")));
        }
        let (r_overall, r_cells, r_under) = build(ref_scores)?;
        let fill = |c: &mut CellResult, r: &CellResult| {
            c.relative_improvement = match (c.eer, r.eer) {
                (Some(s), Some(r)) => relative_improvement(s, r),
                _ => None,
            };
        };
        fill(&mut overall, &r_overall);
        for c in &mut cells {
            if let Some(r) = r_cells.iter().find(|r| r.matches(c.locale, c.age_group)) {
                fill(c, r);
            }
        }
        if let (Some(u), Some(r)) = (under.as_mut(), r_under.as_ref()) {
            fill(u, r);
        }
        Some(label.to_string())
    } else {
        None
    };
    Ok(EvalReport {
        variant,
        condition,
        overall,
        cells,
        underrepresented_cells: underrepresented.to_vec(),
        underrepresented: under,
        reference: reference_label,
        corpus_fingerprint: None,
        skipped: 0,
    })
}

impl EvalReport {
    pub fn cell(&self, locale: Option<Locale>, age_group: Option<AgeGroup>) -> Option<&CellResult> {
        if locale.is_none() && age_group.is_none() {
            return Some(&self.overall);
        }
        self.cells.iter().find(|c| c.matches(locale, age_group))
    }

    /// Copies relative improvements against `reference` into this report.
    pub fn compare_to(&mut self, label: &str, reference: &EvalReport) {
        let fill = |c: &mut CellResult, r: Option<&CellResult>| {
            c.relative_improvement = match (c.eer, r.and_then(|r| r.eer)) {
                (Some(s), Some(r)) => relative_improvement(s, r),
                _ => None,
            };
        };
        fill(&mut self.overall, Some(&reference.overall));
        for c in &mut self.cells {
            fill(c, reference.cell(c.locale, c.age_group));
        }
        if let Some(u) = self.underrepresented.as_mut() {
            fill(u, reference.underrepresented.as_ref());
        }
        self.reference = Some(label.to_string());
    }

    /// Locale × age grid of EER (%) and, when available, relative improvement (%).
    pub fn render_table(&self, title: &str) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{title} [{} / {} embedding]", self.variant.as_str(), self.condition.as_str());
        self.grid(&mut out, "EER (%)", |c| c.eer.map(|e| 100.0 * e));
        if let Some(r) = &self.reference {
            self.grid(&mut out, &format!("Relative improvement vs {r} (%)"), |c| {
                c.relative_improvement.map(|e| 100.0 * e)
            });
        }
        if let Some(u) = &self.underrepresented {
            let names: Vec<String> = self
                .underrepresented_cells
                .iter()
                .map(|(l, a)| format!("{}/{}", l.as_str(), a.as_str()))
                .collect();
            let _ = write!(out, "Under-represented ({}): EER {}", names.join(", "), fmt_pct(u.eer.map(|e| 100.0 * e)));
            if self.reference.is_some() {
                let _ = write!(out, ", relative {}", fmt_pct(u.relative_improvement.map(|e| 100.0 * e)));
            }
            out.push('\n');
        }
        if self.skipped > 0 {
            let _ = writeln!(out, "Skipped utterances (no enrollment): {}", self.skipped);
        }
        out
    }

    fn grid(&self, out: &mut String, caption: &str, value: impl Fn(&CellResult) -> Option<f64>) {
        let _ = writeln!(out, "{caption}");
        let _ = writeln!(out, "{:<8}{:>10}{:>10}{:>10}", "locale", "all", "adult", "child");
        for locale in std::iter::once(None).chain(Locale::ALL.map(Some)) {
            let _ = write!(out, "{:<8}", locale.map_or("all", Locale::as_str));
            for age in std::iter::once(None).chain(AgeGroup::ALL.map(Some)) {
                let v = self.cell(locale, age).and_then(&value);
                let _ = write!(out, "{:>10}", fmt_pct(v));
            }
            out.push('\n');
        }
    }
}

const COMPARISON_COLUMNS: [&str; 8] = ["all", "A", "B", "C", "D", "adult", "child", "under"];

fn comparison_cells(r: &EvalReport) -> Vec<Option<&CellResult>> {
    let mut cells = vec![Some(&r.overall)];
    cells.extend(Locale::ALL.map(|l| r.cell(Some(l), None)));
    cells.extend(AgeGroup::ALL.map(|a| r.cell(None, Some(a))));
    cells.push(r.underrepresented.as_ref());
    cells
}

/// Table with one EER row per run and, when `baseline` indexes a run, one
/// relative-improvement row per other run.
pub fn render_comparison(runs: &[(String, EvalReport)], baseline: Option<usize>) -> String {
    let width = runs.iter().map(|(l, _)| l.len() + 4).max().unwrap_or(8).max(24);
    let mut out = String::new();
    let header = |out: &mut String, caption: &str| {
        let _ = write!(out, "{caption:<width$}");
        for c in COMPARISON_COLUMNS {
            let _ = write!(out, "{c:>9}");
        }
        out.push('\n');
    };
    header(&mut out, "EER (%)");
    for (label, r) in runs {
        let _ = write!(out, "{:<width$}", format!("{label} [{}]", r.condition.as_str()));
        for c in comparison_cells(r) {
            let _ = write!(out, "{:>9}", fmt_pct(c.and_then(|c| c.eer).map(|e| 100.0 * e)));
        }
        out.push('\n');
    }
    if let Some(b) = baseline {
        let (base_label, base) = &runs[b];
        out.push('\n');
        header(&mut out, &format!("Relative to {base_label} (%)"));
        for (i, (label, r)) in runs.iter().enumerate() {
            if i == b {
                continue;
            }
            let _ = write!(out, "{:<width$}", format!("{label} [{}]", r.condition.as_str()));
            for (c, rc) in comparison_cells(r).into_iter().zip(comparison_cells(base)) {
                let rel = match (c.and_then(|c| c.eer), rc.and_then(|c| c.eer)) {
                    (Some(s), Some(r)) => relative_improvement(s, r),
                    _ => None,
                };
                let _ = write!(out, "{:>9}", fmt_pct(rel.map(|e| 100.0 * e)));
            }
            out.push('\n');
        }
    }
    out
}

fn fmt_pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.2}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Polarity;

    fn scored(locale: Locale, age: AgeGroup, pos: &[f64], neg: &[f64]) -> Vec<ScoredUtterance> {
        let mk = |polarity, score, i| ScoredUtterance {
            utterance_id: format!("{}{}{i}", locale.as_str(), age.as_str()),
            speaker_id: "s".into(),
            locale,
            age_group: age,
            polarity,
            score,
            variant: Variant::Baseline,
            condition: Condition::With,
        };
        pos.iter()
            .enumerate()
            .map(|(i, &s)| mk(Polarity::Positive, s, i))
            .chain(neg.iter().enumerate().map(|(i, &s)| mk(Polarity::Negative, s, 100 + i)))
            .collect()
    }

    #[test]
    fn single_cell_equals_direct_eer() {
        let pos = [0.9, 0.8, 0.3, 0.7, 0.6, 0.75];
        let neg = [0.1, 0.5, 0.35, 0.2, 0.65, 0.4];
        let s = scored(Locale::A, AgeGroup::Adult, &pos, &neg);
        let r = stratified_report(&s, None, &[]).unwrap();
        let direct = compute_eer(&pos, &neg).unwrap().eer;
        assert_eq!(r.overall.eer, Some(direct));
        assert_eq!(r.cell(Some(Locale::A), Some(AgeGroup::Adult)).unwrap().eer, Some(direct));
        assert!(r.cell(Some(Locale::B), None).unwrap().insufficient());
    }

    #[test]
    fn identical_reference_gives_zero_improvement() {
        let s = scored(Locale::C, AgeGroup::Child, &[0.9, 0.4, 0.8, 0.7, 0.2], &[0.1, 0.5, 0.3, 0.6, 0.05]);
        let r = stratified_report(&s, Some(("self", &s)), &[(Locale::C, AgeGroup::Child)]).unwrap();
        assert_eq!(r.overall.relative_improvement, Some(0.0));
        assert_eq!(r.underrepresented.as_ref().unwrap().relative_improvement, Some(0.0));
        assert!(r.render_table("t").contains("Relative improvement vs self"));
    }

    #[test]
    fn relative_improvement_sign() {
        assert_eq!(relative_improvement(0.5, 1.0), Some(-0.5));
        assert_eq!(relative_improvement(0.0, 0.0), Some(0.0));
        assert_eq!(relative_improvement(0.1, 0.0), None);
    }

    #[test]
    fn comparison_against_itself_is_zero() {
        let s = scored(Locale::A, AgeGroup::Adult, &[0.9, 0.4, 0.8, 0.7, 0.2], &[0.1, 0.5, 0.3, 0.6, 0.05]);
        let r = stratified_report(&s, None, &[]).unwrap();
        let table = render_comparison(&[("a".into(), r.clone()), ("b".into(), r)], Some(0));
        let rel = table.lines().last().unwrap();
        assert!(rel.starts_with("b [with]"));
        assert!(rel.contains("0.00"));
        assert!(!rel.contains('-'), "{rel}");
    }

    #[test]
    fn empty_input_rejected() {
        assert!(stratified_report(&[], None, &[]).is_err());
    }
}
