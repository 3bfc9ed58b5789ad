//! Human-readable equations for trained P-blocks and hybrids, with terms
//! ranked by mean absolute contribution `|c · T|`.

use std::borrow::Borrow;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecaster::DerivativeModel;
use crate::hybrid::HybridPde;
use crate::pblock::{Denominator, Factor, PBlock, TermSpec};
use crate::series::{resample, Channel, ResamplePlan, TimeSeries};

/// Terms shown by default.
pub const DEFAULT_TRUNCATION: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Notation {
    Unicode,
    Ascii,
    Latex,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedTerm {
    pub coefficient: f64,
    /// Canonical term grammar, e.g. `D2(y,x1)`.
    pub symbol: String,
    pub mean_contribution: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquationDoc {
    /// Order of the time derivative on the left-hand side.
    pub lhs_order: usize,
    /// Non-zero terms, largest contribution first.
    pub terms: Vec<RankedTerm>,
    pub bias: f64,
    pub truncation: usize,
    /// Channel names, target first.
    pub names: Vec<String>,
    /// For a hybrid: rendered component index and its weight.
    pub component: Option<(usize, f64)>,
}

/// Orders terms by the mean of `|coefficient · value|`, descending, keeping
/// input order among equals. Zero coefficients are dropped. Returns
/// `(input position, mean contribution)`.
pub fn rank_terms(terms: &[(f64, Vec<f64>)]) -> Vec<(usize, f64)> {
    let mut ranked: Vec<(usize, f64)> = terms
        .iter()
        .enumerate()
        .filter(|(_, (c, v))| *c != 0.0 && !v.is_empty())
        .map(|(i, (c, v))| (i, v.iter().map(|x| (c * x).abs()).sum::<f64>() / v.len() as f64))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    ranked
}

impl EquationDoc {
    /// Ranks a trained block's terms over every evaluable row of `series`.
    pub fn from_block(block: &PBlock, series: &TimeSeries) -> Result<Self> {
        if !block.is_trained() {
            return Err(Error::NotTrained);
        }
        let first = block.min_history().max(1) - 1;
        let mut columns = vec![Vec::new(); block.terms().len()];
        for i in first..series.len() {
            for (col, v) in columns.iter_mut().zip(block.term_values(series, i)?) {
                col.push(v);
            }
        }
        let specs: Vec<&TermSpec> = block.terms().iter().map(|t| &t.spec).collect();
        let input: Vec<(f64, Vec<f64>)> = block.weights().iter().copied().zip(columns).collect();
        let terms = rank_terms(&input)
            .into_iter()
            .map(|(i, c)| RankedTerm { coefficient: block.weights()[i], symbol: specs[i].to_string(), mean_contribution: c })
            .collect();
        Ok(Self {
            lhs_order: block.lhs_order(),
            terms,
            bias: block.bias(),
            truncation: DEFAULT_TRUNCATION,
            names: series.names().to_vec(),
            component: None,
        })
    }

    /// Documents the highest-weight component, ranked on its own view of
    /// `series`.
    pub fn from_hybrid<M: Borrow<PBlock>>(hybrid: &HybridPde<M>, series: &TimeSeries) -> Result<Self> {
        let d = hybrid.dominant();
        let plan = hybrid.plans()[d];
        let view = resample(series, ResamplePlan::new(series.len(), plan.rate))?;
        let mut doc = Self::from_block(hybrid.components()[d].borrow(), &view)?;
        doc.component = Some((d, hybrid.weights()[d]));
        Ok(doc)
    }

    pub fn with_truncation(mut self, truncation: usize) -> Self {
        self.truncation = truncation;
        self
    }

    pub fn render(&self, notation: Notation, precision: usize) -> Result<String> {
        let mut out = format!("{} =", lhs_symbol(self.lhs_order, &self.names[0], notation));
        let dot = match notation {
            Notation::Unicode => "·",
            Notation::Ascii => "*",
            Notation::Latex => " \\cdot ",
        };
        let mut first = true;
        let mut push = |out: &mut String, value: f64, symbol: Option<String>| {
            let (sign, mag) = if value < 0.0 { ("-", -value) } else { ("+", value) };
            let num = format!("{mag:.precision$}");
            let body = match symbol {
                Some(s) => format!("{num}{dot}{s}"),
                None => num,
            };
            if first {
                let lead = if sign == "-" { "-" } else { "" };
                let _ = write!(out, " {lead}{body}");
                first = false;
            } else {
                let _ = write!(out, " {sign} {body}");
            }
        };
        for t in self.terms.iter().take(self.truncation) {
            let spec: TermSpec = t.symbol.parse()?;
            push(&mut out, t.coefficient, Some(term_symbol(&spec, &self.names, notation)));
        }
        let shown_bias = format!("{:.precision$}", self.bias.abs()).parse::<f64>().unwrap_or(0.0);
        if shown_bias != 0.0 || self.terms.is_empty() {
            push(&mut out, self.bias, None);
        }
        if let Some((i, eps)) = self.component {
            let _ = match notation {
                Notation::Latex => write!(out, " \\quad (\\varepsilon_{{{i}}} = {eps:.precision$})"),
                Notation::Unicode => write!(out, "   [component {i}, ε = {eps:.precision$}]"),
                Notation::Ascii => write!(out, "   [component {i}, eps = {eps:.precision$}]"),
            };
        }
        Ok(out)
    }
}

/// Unicode rendering of a trained block at `precision` decimals.
pub fn render_equation(block: &PBlock, series: &TimeSeries, precision: usize) -> Result<String> {
    EquationDoc::from_block(block, series)?.render(Notation::Unicode, precision)
}

/// Unicode rendering of a hybrid's highest-weight component.
pub fn render_hybrid<M: Borrow<PBlock>>(hybrid: &HybridPde<M>, series: &TimeSeries, precision: usize) -> Result<String> {
    EquationDoc::from_hybrid(hybrid, series)?.render(Notation::Unicode, precision)
}

fn lhs_symbol(order: usize, target: &str, notation: Notation) -> String {
    derivative(target, "t", order, notation)
}

fn superscript(order: usize) -> &'static str {
    match order {
        1 => "",
        2 => "²",
        3 => "³",
        _ => "ⁿ",
    }
}

fn derivative(num: &str, den: &str, order: usize, notation: Notation) -> String {
    match notation {
        Notation::Unicode => {
            let s = superscript(order);
            format!("∂{s}{num}/∂{den}{s}")
        }
        Notation::Ascii if order == 1 => format!("d{num}/d{den}"),
        Notation::Ascii => format!("d{order}{num}/d{den}{order}"),
        Notation::Latex if order == 1 => format!("\\frac{{\\partial {num}}}{{\\partial {den}}}"),
        Notation::Latex => format!("\\frac{{\\partial^{order} {num}}}{{\\partial {den}^{order}}}"),
    }
}

fn channel_name(names: &[String], channel: Channel, notation: Notation) -> String {
    let name = match channel {
        Channel::Target => &names[0],
        Channel::Covariate(j) => &names[j + 1],
    };
    if notation == Notation::Latex {
        latex_name(name)
    } else {
        name.clone()
    }
}

/// `x12` becomes `x_{12}`; other names are wrapped in `\mathrm`.
fn latex_name(name: &str) -> String {
    let split = name.find(|c: char| c.is_ascii_digit()).unwrap_or(name.len());
    let (stem, digits) = name.split_at(split);
    if stem.chars().count() == 1 && digits.chars().all(|c| c.is_ascii_digit()) {
        if digits.is_empty() {
            stem.to_string()
        } else {
            format!("{stem}_{{{digits}}}")
        }
    } else {
        format!("\\mathrm{{{}}}", name.replace('_', "\\_"))
    }
}

fn term_symbol(spec: &TermSpec, names: &[String], notation: Notation) -> String {
    let dot = match notation {
        Notation::Unicode => "·",
        Notation::Ascii => "*",
        Notation::Latex => " \\cdot ",
    };
    let parts: Vec<String> = spec
        .factors()
        .iter()
        .map(|f| match f {
            Factor::Raw(c) => channel_name(names, *c, notation),
            Factor::Ratio { num, den, order } => {
                let n = channel_name(names, *num, notation);
                let d = match den {
                    Denominator::Time => "t".to_string(),
                    Denominator::Covariate(j) => channel_name(names, Channel::Covariate(*j), notation),
                };
                derivative(&n, &d, *order, notation)
            }
        })
        .collect();
    let mut parts: Vec<String> = if parts.len() > 1 || spec.time() {
        spec.factors()
            .iter()
            .zip(parts)
            .map(|(f, p)| if matches!(f, Factor::Ratio { .. }) && notation != Notation::Latex { format!("({p})") } else { p })
            .collect()
    } else {
        parts
    };
    if spec.time() {
        parts.push("t".into());
    }
    parts.join(dot)
}
