//! Human-readable regression tables (coefficient, standard error in
//! parentheses, significance stars) and small formatting helpers.

use crate::regress::{RegressionResult, SeKind};

/// Standard normal CDF via the Abramowitz-Stegun 7.1.26 rational
/// approximation of erf; absolute error below 1.5e-7, plenty for stars.
pub fn normal_cdf(x: f64) -> f64 {
    let z = x / std::f64::consts::SQRT_2;
    let t = 1.0 / (1.0 + 0.3275911 * z.abs());
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    let erf_abs = 1.0 - poly * (-z * z).exp();
    let erf = if z < 0.0 { -erf_abs } else { erf_abs };
    0.5 * (1.0 + erf)
}

/// Two-sided p-value of a normal test statistic.
pub fn two_sided_p(t_stat: f64) -> f64 {
    if !t_stat.is_finite() {
        return f64::NAN;
    }
    2.0 * (1.0 - normal_cdf(t_stat.abs()))
}

/// Significance stars at the 10/5/1% levels.
pub fn stars(p_value: f64) -> &'static str {
    if p_value < 0.01 {
        "***"
    } else if p_value < 0.05 {
        "**"
    } else if p_value < 0.1 {
        "*"
    } else {
        ""
    }
}

/// 2,000-style thousands separators.
pub fn group_thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

/// One column of a regression table.
pub struct TableColumn<'a> {
    /// Dependent-variable heading.
    pub outcome: String,
    pub result: &'a RegressionResult,
    /// Terms to display (e.g. skip the intercept), with display names.
    pub display_terms: Vec<(String, String)>,
}

impl<'a> TableColumn<'a> {
    pub fn new(outcome: impl Into<String>, result: &'a RegressionResult) -> Self {
        let display_terms = result
            .terms
            .iter()
            .map(|t| (t.name.clone(), t.name.clone()))
            .collect();
        Self {
            outcome: outcome.into(),
            result,
            display_terms,
        }
    }
}

fn se_note(kind: &SeKind) -> String {
    match kind {
        SeKind::Classical => "classical".into(),
        SeKind::Cluster { key, groups } => format!("clustered by {key} ({groups} groups)"),
        SeKind::Bootstrap { replicates } => format!("bootstrap over {replicates} replicates"),
    }
}

/// Render regression columns in the journal layout: estimate with stars on
/// one line, the standard error in parentheses below, then observations and
/// R-squared.
pub fn regression_table(columns: &[TableColumn<'_>]) -> String {
    // Union of display rows across columns, in first-seen order.
    let mut row_names: Vec<String> = Vec::new();
    for col in columns {
        for (_, display) in &col.display_terms {
            if !row_names.contains(display) {
                row_names.push(display.clone());
            }
        }
    }

    let label_width = row_names
        .iter()
        .map(String::len)
        .chain(["Observations".len(), "Std. errors".len()])
        .max()
        .unwrap_or(12)
        + 2;
    let col_width = 16usize;
    let total = label_width + col_width * columns.len();

    let mut lines = Vec::new();
    let rule = "=".repeat(total);
    let thin_rule = "-".repeat(total);
    lines.push(rule.clone());
    lines.push(format!(
        "{:label_width$}{}",
        "",
        center("Dependent variable:", col_width * columns.len())
    ));
    let mut header = format!("{:label_width$}", "");
    for col in columns {
        header.push_str(&center(&col.outcome, col_width));
    }
    lines.push(header);
    let mut numbers = format!("{:label_width$}", "");
    for (i, _) in columns.iter().enumerate() {
        numbers.push_str(&center(&format!("({})", i + 1), col_width));
    }
    lines.push(numbers);
    lines.push(thin_rule.clone());

    for name in &row_names {
        let mut est_line = format!("{name:label_width$}");
        let mut se_line = format!("{:label_width$}", "");
        for col in columns {
            let term = col
                .display_terms
                .iter()
                .find(|(_, display)| display == name)
                .and_then(|(source, _)| {
                    col.result.terms.iter().find(|t| &t.name == source)
                });
            match term {
                Some(t) => {
                    let p = two_sided_p(t.estimate / t.std_error);
                    est_line.push_str(&center(
                        &format!("{:.3}{}", t.estimate, stars(p)),
                        col_width,
                    ));
                    let se_text = if t.std_error.is_nan() {
                        "(n/a)".to_string()
                    } else {
                        format!("({:.3})", t.std_error)
                    };
                    se_line.push_str(&center(&se_text, col_width));
                }
                None => {
                    est_line.push_str(&center("", col_width));
                    se_line.push_str(&center("", col_width));
                }
            }
        }
        lines.push(est_line);
        lines.push(se_line);
    }

    lines.push(thin_rule);
    let mut obs = format!("{:label_width$}", "Observations");
    for col in columns {
        obs.push_str(&center(&group_thousands(col.result.n_used), col_width));
    }
    lines.push(obs);
    let mut r2 = format!("{:label_width$}", "R2");
    for col in columns {
        r2.push_str(&center(&format!("{:.3}", col.result.r_squared), col_width));
    }
    lines.push(r2);
    let mut se_kinds = format!("{:label_width$}", "Std. errors");
    for col in columns {
        se_kinds.push_str(&center(&se_note(&col.result.se_kind), col_width));
    }
    lines.push(se_kinds);
    lines.push(rule);
    lines.push("Note: *p<0.1; **p<0.05; ***p<0.01".to_string());
    lines.push(String::new());
    lines.join("\n")
}

fn center(text: &str, width: usize) -> String {
    if text.len() >= width {
        return text.to_string();
    }
    let pad = width - text.len();
    let left = pad / 2;
    format!("{}{}{}", " ".repeat(left), text, " ".repeat(pad - left))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regress::{RegressionResult, SeKind, Term};

    #[test]
    fn normal_cdf_matches_reference_values() {
        for (x, expected) in [
            (0.0, 0.5),
            (1.0, 0.8413447460685429),
            (1.96, 0.9750021048517795),
            (2.576, 0.9950024972196295),
            (-1.0, 0.15865525393145707),
        ] {
            assert!(
                (normal_cdf(x) - expected).abs() < 2e-7,
                "cdf({x}) = {}",
                normal_cdf(x)
            );
        }
    }

    #[test]
    fn star_thresholds_follow_the_convention() {
        assert_eq!(stars(0.005), "***");
        assert_eq!(stars(0.02), "**");
        assert_eq!(stars(0.07), "*");
        assert_eq!(stars(0.2), "");
    }

    #[test]
    fn thousands_are_grouped() {
        assert_eq!(group_thousands(524), "524");
        assert_eq!(group_thousands(2000), "2,000");
        assert_eq!(group_thousands(1234567), "1,234,567");
    }

    #[test]
    fn table_renders_both_columns() {
        let full = RegressionResult {
            terms: vec![Term {
                name: "X".into(),
                estimate: 2.117,
                std_error: 0.024,
            }],
            se_kind: SeKind::Classical,
            r_squared: 0.8,
            n_used: 2000,
            residuals: vec![],
        };
        let subset = RegressionResult {
            terms: vec![Term {
                name: "X".into(),
                estimate: 1.968,
                std_error: 0.056,
            }],
            se_kind: SeKind::Bootstrap { replicates: 200 },
            r_squared: 0.749,
            n_used: 524,
            residuals: vec![],
        };
        let mut col2 = TableColumn::new("Y_p", &subset);
        col2.display_terms = vec![("X".into(), "X_p".into())];
        let text = regression_table(&[TableColumn::new("Y", &full), col2]);
        assert!(text.contains("2.117***"));
        assert!(text.contains("(0.024)"));
        assert!(text.contains("1.968***"));
        assert!(text.contains("2,000"));
        assert!(text.contains("524"));
        assert!(text.contains("*p<0.1"));
    }
}
