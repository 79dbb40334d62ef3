//! Sum-coded contrasts, model formulas and fixed-effects design matrices.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::epochs::{TrialTable, RESPONSE_COLUMN};
use crate::error::{Error, Result};
use crate::linalg::PivotedQr;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Factor {
    pub name: String,
    pub levels: Vec<String>,
}

impl Factor {
    pub fn new(name: impl Into<String>, levels: Vec<String>) -> Result<Self> {
        let name = name.into();
        let unique: BTreeSet<&String> = levels.iter().collect();
        if unique.len() != levels.len() {
            return Err(Error::invalid(format!("factor '{name}' has duplicate levels")));
        }
        if levels.len() < 2 {
            return Err(Error::invalid(format!(
                "factor '{name}' needs at least 2 levels, has {}",
                levels.len()
            )));
        }
        Ok(Self { name, levels })
    }

    /// Levels observed in `values`, sorted lexicographically.
    pub fn from_values(name: impl Into<String>, values: &[&str]) -> Result<Self> {
        let levels: BTreeSet<&str> = values.iter().copied().collect();
        Self::new(name, levels.into_iter().map(str::to_string).collect())
    }

    /// Column names `name[S.level]` for every level but the last.
    pub fn contrast_names(&self) -> Vec<String> {
        self.levels[..self.levels.len() - 1]
            .iter()
            .map(|l| format!("{}[S.{l}]", self.name))
            .collect()
    }

    /// Sum-coded contrast row for `level`.
    pub fn code(&self, level: &str) -> Result<Vec<f64>> {
        let k = self.levels.len();
        let pos = self
            .levels
            .iter()
            .position(|l| l == level)
            .ok_or_else(|| Error::invalid(format!("level '{level}' not in factor '{}'", self.name)))?;
        Ok(if pos == k - 1 {
            vec![-1.0; k - 1]
        } else {
            (0..k - 1).map(|j| if j == pos { 1.0 } else { 0.0 }).collect()
        })
    }
}

/// `k - 1` sum-coded contrast columns, one row per level in order.
pub fn sum_code(f: &Factor) -> Vec<Vec<f64>> {
    f.levels.iter().map(|l| f.code(l).expect("own level")).collect()
}

/// One model term: a product of factor and/or numeric column names.
pub type Term = Vec<String>;

pub fn term_label(t: &Term) -> String {
    t.join(":")
}

/// Fixed-effects specification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub response: String,
    pub intercept: bool,
    pub terms: Vec<Term>,
    /// Numeric covariates left uncentered (all others are centered).
    #[serde(default)]
    pub uncentered: BTreeSet<String>,
    /// Numeric covariates scaled to unit SD before fitting; coefficients are
    /// reported on the original scale.
    #[serde(default)]
    pub scaled: BTreeSet<String>,
    /// Explicit factor level order; the last level is the held-out one.
    #[serde(default)]
    pub levels: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub allow_rank_deficient: bool,
}

impl ModelSpec {
    pub fn new(response: &str, terms: &[&str]) -> Self {
        Self {
            response: response.into(),
            intercept: true,
            terms: terms.iter().map(|t| t.split(':').map(str::to_string).collect()).collect(),
            uncentered: BTreeSet::new(),
            scaled: BTreeSet::new(),
            levels: BTreeMap::new(),
            allow_rank_deficient: false,
        }
    }

    pub fn term_labels(&self) -> Vec<String> {
        self.terms.iter().map(term_label).collect()
    }

    pub fn mentions(&self, name: &str) -> bool {
        self.terms.iter().any(|t| t.iter().any(|n| n == name))
    }

    /// Copy with every term containing `name` removed.
    pub fn without(&self, name: &str) -> Self {
        Self {
            terms: self.terms.iter().filter(|t| !t.iter().any(|n| n == name)).cloned().collect(),
            ..self.clone()
        }
    }

    /// Copy without the term labelled exactly `label`.
    pub fn without_term(&self, label: &str) -> Result<Self> {
        if !self.terms.iter().any(|t| term_label(t) == label) {
            return Err(Error::Formula(format!("term '{label}' is not in {}", self.formula())));
        }
        Ok(Self {
            terms: self.terms.iter().filter(|t| term_label(t) != label).cloned().collect(),
            ..self.clone()
        })
    }

    pub fn with_levels(mut self, factor: &str, levels: &[&str]) -> Self {
        self.levels
            .insert(factor.into(), levels.iter().map(|s| s.to_string()).collect());
        self
    }

    /// Formula string, e.g. `uv ~ baseline + condition + baseline:condition`.
    pub fn formula(&self) -> String {
        let mut rhs: Vec<String> = Vec::new();
        if !self.intercept {
            rhs.push("0".into());
        } else if self.terms.is_empty() {
            rhs.push("1".into());
        }
        rhs.extend(self.term_labels());
        format!("{} ~ {}", self.response, rhs.join(" + "))
    }
}

/// A random-effects term `(1 | group)` or `(1 + slope | group)`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RandomTerm {
    pub group: String,
    pub slope: Option<String>,
}

impl std::fmt::Display for RandomTerm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.slope {
            Some(s) => write!(f, "(1 + {s} | {})", self.group),
            None => write!(f, "(1 | {})", self.group),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RandomSpec {
    pub terms: Vec<RandomTerm>,
}

impl RandomSpec {
    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }
}

impl std::fmt::Display for RandomSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.terms.iter().map(ToString::to_string).collect();
        write!(f, "{}", parts.join(" + "))
    }
}

/// Parses `resp ~ a + b + a:b + a*b + (1 + c | g)`. `0` or `-1` drops the
/// intercept; `a*b` expands to `a + b + a:b`.
pub fn parse_formula(s: &str) -> Result<(ModelSpec, RandomSpec)> {
    let (lhs, rhs) = s
        .split_once('~')
        .ok_or_else(|| Error::Formula(format!("missing '~' in '{s}'")))?;
    let response = lhs.trim();
    if response.is_empty() {
        return Err(Error::Formula("missing response".into()));
    }
    let mut spec = ModelSpec::new(response, &[]);
    let mut random = RandomSpec::default();
    let mut seen: BTreeSet<Vec<String>> = BTreeSet::new();

    for raw in split_top_level(rhs)? {
        let (negated, part) = match raw.strip_prefix('-') {
            Some(rest) => (true, rest.trim()),
            None => (false, raw.as_str()),
        };
        if part.is_empty() {
            continue;
        }
        if negated {
            if part == "1" {
                spec.intercept = false;
                continue;
            }
            return Err(Error::Formula(format!("cannot remove term '{part}'")));
        }
        if part == "1" {
            continue;
        }
        if part == "0" {
            spec.intercept = false;
            continue;
        }
        if let Some(inner) = part.strip_prefix('(').and_then(|p| p.strip_suffix(')')) {
            random.terms.push(parse_random(inner)?);
            continue;
        }
        for term in expand_star(part)? {
            let mut key = term.clone();
            key.sort();
            if !seen.insert(key) {
                return Err(Error::Formula(format!("duplicate term '{}'", term_label(&term))));
            }
            spec.terms.push(term);
        }
    }
    Ok((spec, random))
}

fn split_top_level(s: &str) -> Result<Vec<String>> {
    let mut parts = Vec::new();
    let mut depth = 0i32;
    let mut cur = String::new();
    for ch in s.chars() {
        match ch {
            '(' => {
                depth += 1;
                cur.push(ch);
            }
            ')' => {
                depth -= 1;
                if depth < 0 {
                    return Err(Error::Formula("unbalanced ')'".into()));
                }
                cur.push(ch);
            }
            '+' if depth == 0 => {
                parts.push(cur.trim().to_string());
                cur.clear();
            }
            '-' if depth == 0 => {
                parts.push(cur.trim().to_string());
                cur = "-".into();
            }
            _ => cur.push(ch),
        }
    }
    if depth != 0 {
        return Err(Error::Formula("unbalanced '('".into()));
    }
    parts.push(cur.trim().to_string());
    Ok(parts.into_iter().filter(|p| !p.is_empty()).collect())
}

fn valid_name(n: &str) -> bool {
    !n.is_empty() && n.chars().all(|c| c.is_alphanumeric() || c == '_' || c == '.')
}

fn expand_star(part: &str) -> Result<Vec<Term>> {
    let factors: Vec<&str> = part.split('*').map(str::trim).collect();
    let mut groups: Vec<Vec<String>> = Vec::new();
    for f in factors {
        let names: Vec<String> = f.split(':').map(|n| n.trim().to_string()).collect();
        if let Some(bad) = names.iter().find(|n| !valid_name(n)) {
            return Err(Error::Formula(format!("bad name '{bad}' in '{part}'")));
        }
        groups.push(names);
    }
    if groups.len() == 1 {
        return Ok(groups);
    }
    // all non-empty subsets, ordered by size then position
    let n = groups.len();
    let mut subsets: Vec<Vec<usize>> = (1u32..(1 << n))
        .map(|mask| (0..n).filter(|i| mask & (1 << i) != 0).collect())
        .collect();
    subsets.sort_by_key(|s: &Vec<usize>| (s.len(), s.clone()));
    Ok(subsets
        .into_iter()
        .map(|s| s.into_iter().flat_map(|i| groups[i].clone()).collect())
        .collect())
}

fn parse_random(inner: &str) -> Result<RandomTerm> {
    let (lhs, group) = inner
        .split_once('|')
        .ok_or_else(|| Error::Formula(format!("random term '({inner})' lacks '|'")))?;
    let group = group.trim();
    if !valid_name(group) {
        return Err(Error::Formula(format!("bad grouping factor '{group}'")));
    }
    let parts: Vec<&str> = lhs.split('+').map(str::trim).filter(|p| !p.is_empty()).collect();
    let slopes: Vec<&str> = parts.iter().copied().filter(|p| *p != "1").collect();
    if !parts.contains(&"1") && parts.len() > 1 {
        return Err(Error::Formula(format!("random term '({inner})' must include an intercept")));
    }
    match slopes.as_slice() {
        [] => Ok(RandomTerm {
            group: group.into(),
            slope: None,
        }),
        [s] if valid_name(s) => Ok(RandomTerm {
            group: group.into(),
            slope: Some(s.to_string()),
        }),
        _ => Err(Error::Formula(format!(
            "random term '({inner})': only an intercept plus one slope is supported"
        ))),
    }
}

/// How a single column name is encoded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Encoding {
    Factor(Factor),
    Numeric { center: f64, scale: f64 },
}

impl Encoding {
    fn width(&self) -> usize {
        match self {
            Encoding::Factor(f) => f.levels.len() - 1,
            Encoding::Numeric { .. } => 1,
        }
    }
}

/// A value looked up for one observation when encoding a design row.
#[derive(Debug, Clone, Copy)]
pub enum CellValue<'a> {
    Level(&'a str),
    Number(f64),
}

/// Numeric fixed-effects matrix with named columns.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub x: DMatrix<f64>,
    pub names: Vec<String>,
    /// Term label of each column (`(Intercept)` for the intercept).
    pub column_terms: Vec<String>,
    /// Divide fitted coefficients by these to undo covariate scaling.
    pub column_scale: Vec<f64>,
    pub intercept: bool,
    pub terms: Vec<Term>,
    pub encodings: BTreeMap<String, Encoding>,
    pub rank: usize,
}

impl DesignMatrix {
    pub fn n_obs(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.x.ncols()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Encodes one observation with the stored encodings.
    pub fn encode_row<'a>(&self, lookup: impl Fn(&str) -> Option<CellValue<'a>>) -> Result<Vec<f64>> {
        encode_row(self.intercept, &self.terms, &self.encodings, lookup)
    }

    /// Columns belonging to the term labelled `label`.
    pub fn term_columns(&self, label: &str) -> Vec<usize> {
        (0..self.n_cols()).filter(|&j| self.column_terms[j] == label).collect()
    }

    /// Copy with the columns of term `label` removed.
    pub fn without_term(&self, label: &str) -> Result<Self> {
        let drop = self.term_columns(label);
        if drop.is_empty() {
            return Err(Error::Formula(format!("design has no term '{label}'")));
        }
        let keep: Vec<usize> = (0..self.n_cols()).filter(|j| !drop.contains(j)).collect();
        let x = self.x.select_columns(&keep);
        let rank = PivotedQr::new(&x).rank();
        Ok(Self {
            x,
            names: keep.iter().map(|&j| self.names[j].clone()).collect(),
            column_terms: keep.iter().map(|&j| self.column_terms[j].clone()).collect(),
            column_scale: keep.iter().map(|&j| self.column_scale[j]).collect(),
            intercept: self.intercept && label != "(Intercept)",
            terms: self.terms.iter().filter(|t| term_label(t) != label).cloned().collect(),
            encodings: self.encodings.clone(),
            rank,
        })
    }

    /// Builds a matrix from raw rows (already encoded), for callers that
    /// assemble designs by hand.
    pub fn from_columns(names: Vec<String>, x: DMatrix<f64>) -> Result<Self> {
        if names.len() != x.ncols() {
            return Err(Error::invalid("column names do not match matrix width"));
        }
        let rank = PivotedQr::new(&x).rank();
        let intercept = names.first().is_some_and(|n| n == "(Intercept)");
        Ok(Self {
            column_terms: names.clone(),
            column_scale: vec![1.0; names.len()],
            names,
            x,
            intercept,
            terms: Vec::new(),
            encodings: BTreeMap::new(),
            rank,
        })
    }
}

fn encode_row<'a>(
    intercept: bool,
    terms: &[Term],
    encodings: &BTreeMap<String, Encoding>,
    lookup: impl Fn(&str) -> Option<CellValue<'a>>,
) -> Result<Vec<f64>> {
    let mut row = Vec::new();
    if intercept {
        row.push(1.0);
    }
    for term in terms {
        let mut block = vec![1.0];
        for name in term {
            let enc = encodings.get(name).ok_or_else(|| Error::UnknownColumn(name.clone()))?;
            let cols: Vec<f64> = match (enc, lookup(name)) {
                (Encoding::Factor(f), Some(CellValue::Level(l))) => f.code(l)?,
                (Encoding::Numeric { center, scale }, Some(CellValue::Number(v))) => {
                    vec![(v - center) / scale]
                }
                (_, None) => return Err(Error::UnknownColumn(name.clone())),
                (Encoding::Factor(_), Some(CellValue::Number(_))) => {
                    return Err(Error::invalid(format!("'{name}' is a factor, got a number")))
                }
                (Encoding::Numeric { .. }, Some(CellValue::Level(_))) => {
                    return Err(Error::invalid(format!("'{name}' is numeric, got a level")))
                }
            };
            // earlier names vary fastest
            let mut next = Vec::with_capacity(block.len() * cols.len());
            for c in &cols {
                for b in &block {
                    next.push(b * c);
                }
            }
            block = next;
        }
        row.extend(block);
    }
    Ok(row)
}

/// Builds the fixed-effects matrix for `spec` over `t`.
pub fn build_design(t: &TrialTable, spec: &ModelSpec) -> Result<DesignMatrix> {
    let mut encodings: BTreeMap<String, Encoding> = BTreeMap::new();
    let mut factor_cols: HashMap<String, Vec<&str>> = HashMap::new();
    let mut numeric_cols: HashMap<String, &[f64]> = HashMap::new();
    for name in spec.terms.iter().flatten() {
        if encodings.contains_key(name) {
            continue;
        }
        if let Some(values) = t.factor(name) {
            let factor = match spec.levels.get(name) {
                Some(order) => {
                    let f = Factor::new(name.clone(), order.clone())?;
                    if let Some(bad) = values.iter().find(|v| !f.levels.iter().any(|l| l == *v)) {
                        return Err(Error::invalid(format!(
                            "level '{bad}' of '{name}' missing from the declared level order"
                        )));
                    }
                    f
                }
                None => Factor::from_values(name.clone(), &values)?,
            };
            encodings.insert(name.clone(), Encoding::Factor(factor));
            factor_cols.insert(name.clone(), values);
        } else if let Some(values) = t.numeric(name) {
            if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("covariate '{name}' has non-finite value {bad}")));
            }
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let center = if spec.uncentered.contains(name) { 0.0 } else { mean };
            let scale = if spec.scaled.contains(name) {
                let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
                if !(var > 0.0) {
                    return Err(Error::invalid(format!("cannot scale constant covariate '{name}'")));
                }
                var.sqrt()
            } else {
                1.0
            };
            encodings.insert(name.clone(), Encoding::Numeric { center, scale });
            numeric_cols.insert(name.clone(), values);
        } else {
            return Err(Error::UnknownColumn(name.clone()));
        }
    }

    let mut names = Vec::new();
    let mut column_terms = Vec::new();
    let mut column_scale = Vec::new();
    if spec.intercept {
        names.push("(Intercept)".to_string());
        column_terms.push("(Intercept)".to_string());
        column_scale.push(1.0);
    }
    for term in &spec.terms {
        let mut block_names = vec![String::new()];
        let mut block_scale = vec![1.0];
        for name in term {
            let enc = &encodings[name];
            let (col_names, scale): (Vec<String>, f64) = match enc {
                Encoding::Factor(f) => (f.contrast_names(), 1.0),
                Encoding::Numeric { scale, .. } => (vec![name.clone()], *scale),
            };
            debug_assert_eq!(col_names.len(), enc.width());
            let mut next_names = Vec::new();
            let mut next_scale = Vec::new();
            for c in &col_names {
                for (b, s) in block_names.iter().zip(&block_scale) {
                    next_names.push(if b.is_empty() { c.clone() } else { format!("{b}:{c}") });
                    next_scale.push(s * scale);
                }
            }
            block_names = next_names;
            block_scale = next_scale;
        }
        column_terms.extend(std::iter::repeat_n(term_label(term), block_names.len()));
        names.extend(block_names);
        column_scale.extend(block_scale);
    }

    let n = t.len();
    let p = names.len();
    let mut x = DMatrix::<f64>::zeros(n, p);
    for i in 0..n {
        let row = encode_row(spec.intercept, &spec.terms, &encodings, |name| {
            if let Some(col) = factor_cols.get(name) {
                Some(CellValue::Level(col[i]))
            } else {
                numeric_cols.get(name).map(|col| CellValue::Number(col[i]))
            }
        })?;
        for (j, v) in row.into_iter().enumerate() {
            x[(i, j)] = v;
        }
    }
    let rank = PivotedQr::new(&x).rank();
    if rank < p && !spec.allow_rank_deficient {
        return Err(Error::RankDeficient {
            rank,
            cols: p,
            context: format!(" for '{}'", spec.formula()),
        });
    }
    Ok(DesignMatrix {
        x,
        names,
        column_terms,
        column_scale,
        intercept: spec.intercept,
        terms: spec.terms.clone(),
        encodings,
        rank,
    })
}

/// Response column named by `spec`.
pub fn response<'a>(t: &'a TrialTable, spec: &ModelSpec) -> Result<&'a [f64]> {
    let y = t
        .numeric(&spec.response)
        .ok_or_else(|| Error::UnknownColumn(spec.response.clone()))?;
    if let Some(bad) = y.iter().find(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("response has non-finite value {bad}")));
    }
    Ok(y)
}

/// Default response column name.
pub fn default_response() -> &'static str {
    RESPONSE_COLUMN
}
