//! Assumption tests on per-prompt rollout samples.
//!
//! First-order uncorrelation of rewards and projected gradients is tested per
//! prompt with a Pearson test and combined across prompts with Fisher's or
//! Edgington's method. Equal gradient variance across prompts is tested with
//! the median-centred Levene (Brown–Forsythe) test or O'Brien's test.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VipError};
use crate::io;
use crate::stats::dist::{normal_cdf, student_t_two_sided, Distribution};

/// Smallest p-value passed to a logarithm.
pub const P_FLOOR: f64 = 1e-300;

/// Largest prompt count for which Edgington uses the exact Irwin–Hall law.
pub const EDGINGTON_EXACT_MAX_Q: usize = 11;

/// Tolerance for the O'Brien identity `mean(Y_q) = s_q²`, relative to `max(1, s_q²)`.
pub const OBRIEN_IDENTITY_TOL: f64 = 1e-10;

/// One prompt's samples: paired rewards `r` (optional) and projected gradients `z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleGroup {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<Vec<f64>>,
    pub z: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SampleTable {
    pub groups: Vec<SampleGroup>,
}

impl SampleTable {
    pub fn new(groups: Vec<SampleGroup>) -> Result<Self> {
        let table = SampleTable { groups };
        table.validate()?;
        Ok(table)
    }

    /// Unpaired table from bare gradient columns; ids are the group indices.
    pub fn from_columns(columns: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(
            columns
                .into_iter()
                .enumerate()
                .map(|(i, z)| SampleGroup {
                    id: i.to_string(),
                    r: None,
                    z,
                })
                .collect(),
        )
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        Self::new(io::read_jsonl(path)?)
    }

    pub fn parse_jsonl(text: &str) -> Result<Self> {
        Self::new(io::parse_jsonl(text.as_bytes())?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups.is_empty() {
            return Err(VipError::invalid("sample table has no groups"));
        }
        for g in &self.groups {
            if g.z.len() < 2 {
                return Err(VipError::invalid(format!(
                    "group '{}' has {} samples, need ≥ 2",
                    g.id,
                    g.z.len()
                )));
            }
            if g.z.iter().any(|v| !v.is_finite()) {
                return Err(VipError::invalid(format!(
                    "group '{}' has non-finite z values",
                    g.id
                )));
            }
            if let Some(r) = &g.r {
                if r.len() != g.z.len() {
                    return Err(VipError::invalid(format!(
                        "group '{}' has {} rewards for {} gradients",
                        g.id,
                        r.len(),
                        g.z.len()
                    )));
                }
                if r.iter().any(|v| !v.is_finite()) {
                    return Err(VipError::invalid(format!(
                        "group '{}' has non-finite rewards",
                        g.id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    Fisher,
    Edgington,
    Levene,
    #[serde(rename = "obrien")]
    OBrien,
}

impl TestKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TestKind::Fisher => "fisher",
            TestKind::Edgington => "edgington",
            TestKind::Levene => "levene",
            TestKind::OBrien => "obrien",
        }
    }
}

impl std::str::FromStr for TestKind {
    type Err = VipError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fisher" => Ok(TestKind::Fisher),
            "edgington" => Ok(TestKind::Edgington),
            "levene" | "brown_forsythe" => Ok(TestKind::Levene),
            "obrien" | "o'brien" => Ok(TestKind::OBrien),
            other => Err(VipError::invalid(format!("unknown test '{other}'"))),
        }
    }
}

/// Per-group line of a report.
///
/// Correlation tests store `(ρ_q, p_q)`; Levene stores `(Ȳ_q, median_q)`;
/// O'Brien stores `(Ȳ_q, s_q²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupDiagnostic {
    pub id: String,
    pub statistic: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedGroup {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub test_name: String,
    /// `None` when the statistic is undefined (degenerate input).
    pub statistic: Option<f64>,
    pub dof: Vec<f64>,
    pub p_global: Option<f64>,
    #[serde(default)]
    pub degenerate: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    pub per_group: Vec<GroupDiagnostic>,
    #[serde(default)]
    pub skipped: Vec<SkippedGroup>,
    /// Number of p-values raised to [`P_FLOOR`] before taking logs.
    #[serde(default)]
    pub floored: usize,
}

impl TestReport {
    fn new(kind: TestKind, statistic: f64, dof: Vec<f64>, p: f64) -> Self {
        TestReport {
            test_name: kind.as_str().to_string(),
            statistic: Some(statistic),
            dof,
            p_global: Some(p.clamp(0.0, 1.0)),
            degenerate: false,
            note: None,
            per_group: Vec::new(),
            skipped: Vec::new(),
            floored: 0,
        }
    }

    fn degenerate(kind: TestKind, dof: Vec<f64>, note: String) -> Self {
        TestReport {
            test_name: kind.as_str().to_string(),
            statistic: None,
            dof,
            p_global: None,
            degenerate: true,
            note: Some(note),
            per_group: Vec::new(),
            skipped: Vec::new(),
            floored: 0,
        }
    }

    /// `Some(true)` when `p_global < alpha`; `None` for degenerate reports.
    pub fn rejects(&self, alpha: f64) -> Option<bool> {
        self.p_global.map(|p| p < alpha)
    }

    /// Fixed-width text rendering for terminals.
    pub fn render(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        let fmt_opt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.6e}"));
        let dof = self
            .dof
            .iter()
            .map(|d| format!("{d}"))
            .collect::<Vec<_>>()
            .join(", ");
        let _ = writeln!(out, "{:<12} {}", "test", self.test_name);
        let _ = writeln!(out, "{:<12} {}", "statistic", fmt_opt(self.statistic));
        let _ = writeln!(out, "{:<12} ({dof})", "dof");
        let _ = writeln!(out, "{:<12} {}", "p_global", fmt_opt(self.p_global));
        if self.degenerate {
            let _ = writeln!(
                out,
                "{:<12} {}",
                "degenerate",
                self.note.as_deref().unwrap_or("")
            );
        }
        if self.floored > 0 {
            let _ = writeln!(
                out,
                "{:<12} {} p-values raised to {P_FLOOR:e}",
                "floored", self.floored
            );
        }
        let _ = writeln!(out, "{:<12} {}", "groups", self.per_group.len());
        for s in &self.skipped {
            let _ = writeln!(out, "{:<12} {} ({})", "skipped", s.id, s.reason);
        }
        out
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample Pearson correlation and its two-sided p-value from the t statistic
/// `t = ρ √((n−2)/(1−ρ²))` with `n − 2` degrees of freedom.
pub fn pearson_correlation_pvalue(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() {
        return Err(VipError::invalid(format!(
            "column lengths differ: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len();
    if n < 3 {
        return Err(VipError::invalid(format!(
            "Pearson test needs ≥ 3 pairs, got {n}"
        )));
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        let which = if sxx == 0.0 { "first" } else { "second" };
        return Err(VipError::Degenerate(format!("{which} column is constant")));
    }
    let rho = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let dof = (n - 2) as f64;
    let one_minus = (1.0 - rho) * (1.0 + rho);
    // within rounding of |ρ| = 1 the columns are collinear
    let p = if one_minus <= 4.0 * f64::EPSILON {
        0.0
    } else {
        student_t_two_sided(dof, rho.abs() * (dof / one_minus).sqrt())
    };
    Ok((rho, p))
}

fn check_pvalues(pvalues: &[f64], allow_zero: bool) -> Result<()> {
    if pvalues.is_empty() {
        return Err(VipError::invalid("no p-values to combine"));
    }
    for (i, &p) in pvalues.iter().enumerate() {
        let ok = if allow_zero {
            (0.0..=1.0).contains(&p)
        } else {
            p > 0.0 && p <= 1.0
        };
        if !ok {
            let range = if allow_zero { "[0, 1]" } else { "(0, 1]" };
            return Err(VipError::invalid(format!(
                "p-value {i} = {p} outside {range}"
            )));
        }
    }
    Ok(())
}

/// Fisher's method: `χ² = −2 Σ ln p_q` against `χ²_{2Q}`.
pub fn fisher_combine(pvalues: &[f64]) -> Result<TestReport> {
    check_pvalues(pvalues, false)?;
    let stat = -2.0 * pvalues.iter().map(|p| p.ln()).sum::<f64>();
    let dof = 2.0 * pvalues.len() as f64;
    let p = Distribution::ChiSquare { dof }.survival(stat)?;
    Ok(TestReport::new(TestKind::Fisher, stat, vec![dof], p))
}

/// Edgington's sum-of-p method: `S = Σ p_q`, lower tail of Irwin–Hall(Q).
pub fn edgington_combine(pvalues: &[f64]) -> Result<TestReport> {
    check_pvalues(pvalues, true)?;
    let q = pvalues.len();
    let s: f64 = pvalues.iter().sum();
    let p = if q <= EDGINGTON_EXACT_MAX_Q {
        irwin_hall_cdf(q, s)
    } else {
        let qf = q as f64;
        normal_cdf((s - qf / 2.0) / (qf / 12.0).sqrt())
    };
    Ok(TestReport::new(TestKind::Edgington, s, vec![q as f64], p))
}

/// CDF of the sum of `q` independent uniforms,
/// `(1/q!) Σ_{k ≤ ⌊s⌋} (−1)^k C(q, k) (s − k)^q`.
pub fn irwin_hall_cdf(q: usize, s: f64) -> f64 {
    let qf = q as f64;
    if s <= 0.0 {
        return 0.0;
    }
    if s >= qf {
        return 1.0;
    }
    let mut binom = 1.0;
    let mut total = 0.0;
    let top = s.floor() as usize;
    for k in 0..=top.min(q) {
        if k > 0 {
            binom *= (q - k + 1) as f64 / k as f64;
        }
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        total += sign * binom * (s - k as f64).powi(q as i32);
    }
    let fact: f64 = (1..=q).map(|i| i as f64).product();
    (total / fact).clamp(0.0, 1.0)
}

/// How per-prompt correlation p-values are pooled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combiner {
    Fisher,
    Edgington,
}

/// Per-prompt Pearson tests of `r` against `z`, pooled with `combiner`.
///
/// Groups with a constant column are skipped and listed. Zero p-values are
/// raised to [`P_FLOOR`] before Fisher's logarithm.
pub fn correlation_test(table: &SampleTable, combiner: Combiner) -> Result<TestReport> {
    table.validate()?;
    let mut per_group = Vec::with_capacity(table.len());
    let mut skipped = Vec::new();
    for g in &table.groups {
        let r = g
            .r
            .as_ref()
            .ok_or_else(|| VipError::invalid(format!("group '{}' has no reward column", g.id)))?;
        match pearson_correlation_pvalue(r, &g.z) {
            Ok((rho, p)) => per_group.push(GroupDiagnostic {
                id: g.id.clone(),
                statistic: rho,
                value: p,
            }),
            Err(VipError::Degenerate(reason)) => skipped.push(SkippedGroup {
                id: g.id.clone(),
                reason,
            }),
            Err(VipError::InvalidInput(reason)) if g.z.len() < 3 => skipped.push(SkippedGroup {
                id: g.id.clone(),
                reason,
            }),
            Err(e) => return Err(e),
        }
    }
    let kind = match combiner {
        Combiner::Fisher => TestKind::Fisher,
        Combiner::Edgington => TestKind::Edgington,
    };
    if per_group.is_empty() {
        let mut report = TestReport::degenerate(kind, Vec::new(), "every group was skipped".into());
        report.skipped = skipped;
        return Ok(report);
    }
    let mut floored = 0;
    let pvalues: Vec<f64> = per_group
        .iter()
        .map(|d| {
            if combiner == Combiner::Fisher && d.value < P_FLOOR {
                floored += 1;
                P_FLOOR
            } else {
                d.value
            }
        })
        .collect();
    let mut report = match combiner {
        Combiner::Fisher => fisher_combine(&pvalues)?,
        Combiner::Edgington => edgington_combine(&pvalues)?,
    };
    report.per_group = per_group;
    report.skipped = skipped;
    report.floored = floored;
    Ok(report)
}

/// One-way ANOVA F statistic on transformed observations.
/// Returns `None` when the within-group sum of squares vanishes.
fn anova(ys: &[Vec<f64>]) -> Option<(f64, f64, f64)> {
    let q = ys.len() as f64;
    let n: f64 = ys.iter().map(|y| y.len() as f64).sum();
    let means: Vec<f64> = ys.iter().map(|y| mean(y)).collect();
    let grand = ys.iter().flatten().sum::<f64>() / n;
    let between: f64 = ys
        .iter()
        .zip(&means)
        .map(|(y, m)| y.len() as f64 * (m - grand).powi(2))
        .sum();
    let within: f64 = ys
        .iter()
        .zip(&means)
        .map(|(y, m)| y.iter().map(|v| (v - m).powi(2)).sum::<f64>())
        .sum();
    let total: f64 = ys.iter().flatten().map(|v| (v - grand).powi(2)).sum();
    if within <= 1e-13 * total || within == 0.0 {
        return None;
    }
    let w = (n - q) * between / ((q - 1.0) * within);
    Some((w, q - 1.0, n - q))
}

fn check_variance_groups(table: &SampleTable, min_n: usize, name: &str) -> Result<()> {
    table.validate()?;
    if table.len() < 2 {
        return Err(VipError::invalid(format!(
            "{name} needs ≥ 2 groups, got {}",
            table.len()
        )));
    }
    if let Some(g) = table.groups.iter().find(|g| g.z.len() < min_n) {
        return Err(VipError::invalid(format!(
            "{name} needs ≥ {min_n} samples per group; '{}' has {}",
            g.id,
            g.z.len()
        )));
    }
    Ok(())
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn finish_anova(
    kind: TestKind,
    ys: &[Vec<f64>],
    per_group: Vec<GroupDiagnostic>,
) -> Result<TestReport> {
    let n: usize = ys.iter().map(Vec::len).sum();
    let dof = vec![(ys.len() - 1) as f64, (n - ys.len()) as f64];
    let mut report = match anova(ys) {
        Some((w, d1, d2)) => {
            let p = Distribution::F { d1, d2 }.survival(w)?;
            TestReport::new(kind, w, dof, p)
        }
        None => TestReport::degenerate(
            kind,
            dof,
            "zero within-group spread of the transformed samples".into(),
        ),
    };
    report.per_group = per_group;
    Ok(report)
}

/// Brown–Forsythe form of Levene's test: ANOVA on `|Z − median_q(Z)|`.
pub fn levene_test(table: &SampleTable) -> Result<TestReport> {
    check_variance_groups(table, 2, "Levene's test")?;
    let mut ys = Vec::with_capacity(table.len());
    let mut per_group = Vec::with_capacity(table.len());
    for g in &table.groups {
        let med = median(&g.z);
        let y: Vec<f64> = g.z.iter().map(|z| (z - med).abs()).collect();
        per_group.push(GroupDiagnostic {
            id: g.id.clone(),
            statistic: mean(&y),
            value: med,
        });
        ys.push(y);
    }
    finish_anova(TestKind::Levene, &ys, per_group)
}

/// O'Brien transform of one group:
/// `Y = [(n−1.5) n (Z − Z̄)² − 0.5 s² (n−1)] / [(n−1)(n−2)]`.
/// Returns `(Y, s²)`.
pub fn obrien_transform(z: &[f64]) -> Result<(Vec<f64>, f64)> {
    let n = z.len();
    if n < 3 {
        return Err(VipError::invalid(format!(
            "O'Brien transform needs ≥ 3 samples, got {n}"
        )));
    }
    let nf = n as f64;
    let m = mean(z);
    let s2 = z.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (nf - 1.0);
    let denom = (nf - 1.0) * (nf - 2.0);
    let y: Vec<f64> = z
        .iter()
        .map(|v| ((nf - 1.5) * nf * (v - m).powi(2) - 0.5 * s2 * (nf - 1.0)) / denom)
        .collect();
    let gap = (mean(&y) - s2).abs();
    if gap > OBRIEN_IDENTITY_TOL * s2.max(1.0) {
        return Err(VipError::Numerical(format!(
            "O'Brien identity mean(Y) = s² violated by {gap:e}"
        )));
    }
    Ok((y, s2))
}

/// O'Brien's test: ANOVA on the O'Brien-transformed samples.
pub fn obrien_test(table: &SampleTable) -> Result<TestReport> {
    check_variance_groups(table, 3, "O'Brien's test")?;
    let mut ys = Vec::with_capacity(table.len());
    let mut per_group = Vec::with_capacity(table.len());
    for g in &table.groups {
        let (y, s2) = obrien_transform(&g.z)?;
        per_group.push(GroupDiagnostic {
            id: g.id.clone(),
            statistic: mean(&y),
            value: s2,
        });
        ys.push(y);
    }
    finish_anova(TestKind::OBrien, &ys, per_group)
}

/// Dispatches on `kind`; the correlation tests need the reward column.
pub fn run_test(kind: TestKind, table: &SampleTable) -> Result<TestReport> {
    match kind {
        TestKind::Fisher => correlation_test(table, Combiner::Fisher),
        TestKind::Edgington => correlation_test(table, Combiner::Edgington),
        TestKind::Levene => levene_test(table),
        TestKind::OBrien => obrien_test(table),
    }
}
