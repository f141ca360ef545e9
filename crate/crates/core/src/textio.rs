//! Structured text files for MDPs, policies, Q tables, model checkpoints and
//! meta-training state.
//!
//! A file is a `<kind> <version>` header, then `key value` scalar lines, then
//! tables introduced by `table <name> <rows> <cols>` and followed by `rows`
//! lines of `cols` values. Reals are written with 17 significant digits so
//! every value round-trips bit-exactly.
//!
//! ```text
//! merpo-mdp 1
//! shape 2 1
//! gamma 9.0000000000000002e-1
//! r_max 1e0
//! logits false
//! table transition 2 2
//! ...
//! ```

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, Array3};

use crate::error::{MerpoError, Result};
use crate::mdp::{QTable, StochasticPolicy, TabularMdp};

pub const FORMAT_VERSION: u32 = 1;

/// 17 significant digits, the shortest width that round-trips every `f64`.
pub fn fmt_real(x: f64) -> String {
    format!("{x:.16e}")
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Document {
    pub kind: String,
    scalars: Vec<(String, String)>,
    tables: Vec<(String, usize, usize, Vec<f64>)>,
}

impl Document {
    pub fn new(kind: &str) -> Self {
        Self {
            kind: kind.to_string(),
            ..Default::default()
        }
    }

    pub fn scalar(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.scalars.push((key.to_string(), value.to_string()));
        self
    }

    pub fn real(&mut self, key: &str, value: f64) -> &mut Self {
        self.scalar(key, fmt_real(value))
    }

    pub fn table(&mut self, name: &str, rows: usize, cols: usize, values: Vec<f64>) -> &mut Self {
        assert_eq!(rows * cols, values.len(), "table {name} has wrong length");
        self.tables.push((name.to_string(), rows, cols, values));
        self
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.scalars
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| parse_err(0, format!("missing scalar `{key}`")))
    }

    pub fn get_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key)?;
        v.parse()
            .map_err(|_| parse_err(0, format!("bad value `{v}` for `{key}`")))
    }

    pub fn get_table(&self, name: &str) -> Result<(usize, usize, &[f64])> {
        self.tables
            .iter()
            .find(|(n, ..)| n == name)
            .map(|(_, r, c, v)| (*r, *c, v.as_slice()))
            .ok_or_else(|| parse_err(0, format!("missing table `{name}`")))
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{} {}", self.kind, FORMAT_VERSION);
        for (k, v) in &self.scalars {
            let _ = writeln!(out, "{k} {v}");
        }
        for (name, rows, cols, values) in &self.tables {
            let _ = writeln!(out, "table {name} {rows} {cols}");
            for r in 0..*rows {
                let line: Vec<String> = values[r * cols..(r + 1) * cols].iter().map(|&x| fmt_real(x)).collect();
                let _ = writeln!(out, "{}", line.join(" "));
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let (ln, header) = lines.next().ok_or_else(|| parse_err(1, "empty file".into()))?;
        let mut parts = header.split_whitespace();
        let kind = parts.next().unwrap_or_default().to_string();
        let version: u32 = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| parse_err(ln, "header must be `<kind> <version>`".into()))?;
        if version != FORMAT_VERSION {
            return Err(parse_err(ln, format!("unsupported version {version}")));
        }
        let mut doc = Document::new(&kind);
        while let Some((ln, line)) = lines.next() {
            let tokens: Vec<&str> = line.split_whitespace().collect();
            if tokens[0] == "table" {
                if tokens.len() != 4 {
                    return Err(parse_err(ln, "expected `table <name> <rows> <cols>`".into()));
                }
                let rows: usize = tokens[2].parse().map_err(|_| parse_err(ln, "bad row count".into()))?;
                let cols: usize = tokens[3].parse().map_err(|_| parse_err(ln, "bad column count".into()))?;
                let mut values = Vec::with_capacity(rows * cols);
                for _ in 0..rows {
                    let (ln, row) = lines
                        .next()
                        .ok_or_else(|| parse_err(ln, format!("table {} truncated", tokens[1])))?;
                    let before = values.len();
                    for tok in row.split_whitespace() {
                        values.push(tok.parse::<f64>().map_err(|_| parse_err(ln, format!("bad real `{tok}`")))?);
                    }
                    if values.len() - before != cols {
                        return Err(parse_err(ln, format!("expected {cols} values")));
                    }
                }
                doc.tables.push((tokens[1].to_string(), rows, cols, values));
            } else {
                if tokens.len() < 2 {
                    return Err(parse_err(ln, format!("scalar `{}` has no value", tokens[0])));
                }
                doc.scalars.push((tokens[0].to_string(), tokens[1..].join(" ")));
            }
        }
        Ok(doc)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(parse_err(1, format!("expected a `{kind}` file, found `{}`", self.kind)));
        }
        Ok(())
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.render()).map_err(|e| crate::error::io_at(path, e))?;
        Ok(())
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path).map_err(|e| crate::error::io_at(path, e))?)
    }
}

fn parse_err(line: usize, msg: String) -> MerpoError {
    MerpoError::Parse { line, msg }
}

pub(crate) fn shape(doc: &Document) -> Result<(usize, usize)> {
    let v = doc.get("shape")?;
    let dims: Vec<usize> = v.split_whitespace().filter_map(|x| x.parse().ok()).collect();
    match dims.as_slice() {
        [s, a] if *s > 0 && *a > 0 => Ok((*s, *a)),
        _ => Err(parse_err(0, format!("bad shape `{v}`"))),
    }
}

pub(crate) fn table2(doc: &Document, name: &str, rows: usize, cols: usize) -> Result<Array2<f64>> {
    let (r, c, v) = doc.get_table(name)?;
    if (r, c) != (rows, cols) {
        return Err(parse_err(0, format!("table {name} is {r}x{c}, expected {rows}x{cols}")));
    }
    Ok(Array2::from_shape_vec((rows, cols), v.to_vec()).expect("checked length"))
}

pub(crate) fn table3(doc: &Document, name: &str, s: usize, a: usize) -> Result<Array3<f64>> {
    let t = table2(doc, name, s * a, s)?;
    Ok(t.into_shape_with_order((s, a, s)).expect("checked length"))
}

pub(crate) fn flat<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> Vec<f64> {
    a.iter().copied().collect()
}

pub fn mdp_to_doc(mdp: &TabularMdp) -> Document {
    let (s, a) = (mdp.n_states(), mdp.n_actions());
    let mut doc = Document::new("merpo-mdp");
    doc.scalar("shape", format!("{s} {a}"))
        .real("gamma", mdp.gamma())
        .real("r_max", mdp.r_max())
        .scalar("logits", false)
        .table("transition", s * a, s, flat(mdp.transition()))
        .table("reward", s, a, flat(mdp.reward()))
        .table("init_dist", 1, s, flat(mdp.init_dist()));
    doc
}

pub fn mdp_from_doc(doc: &Document) -> Result<TabularMdp> {
    doc.expect_kind("merpo-mdp")?;
    let (s, a) = shape(doc)?;
    if doc.get("logits")? != "false" {
        return Err(parse_err(0, "an MDP file stores probabilities, not logits".into()));
    }
    let transition = table3(doc, "transition", s, a)?;
    let reward = table2(doc, "reward", s, a)?;
    let init = Array1::from(table2(doc, "init_dist", 1, s)?.into_raw_vec_and_offset().0);
    TabularMdp::new(transition, reward, init, doc.get_parsed("gamma")?, doc.get_parsed("r_max")?)
}

pub fn policy_to_doc(policy: &StochasticPolicy) -> Document {
    let (s, a) = (policy.n_states(), policy.n_actions());
    let mut doc = Document::new("merpo-policy");
    doc.scalar("shape", format!("{s} {a}"))
        .table("logits", s, a, flat(policy.logits()));
    doc
}

pub fn policy_from_doc(doc: &Document) -> Result<StochasticPolicy> {
    doc.expect_kind("merpo-policy")?;
    let (s, a) = shape(doc)?;
    StochasticPolicy::from_logits(table2(doc, "logits", s, a)?)
}

pub fn q_to_doc(q: &QTable) -> Document {
    let (s, a) = q.values.dim();
    let mut doc = Document::new("merpo-q");
    doc.scalar("shape", format!("{s} {a}")).table("values", s, a, flat(&q.values));
    doc
}

pub fn q_from_doc(doc: &Document) -> Result<QTable> {
    doc.expect_kind("merpo-q")?;
    let (s, a) = shape(doc)?;
    Ok(QTable::new(table2(doc, "values", s, a)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;
    use proptest::prelude::*;

    #[test]
    fn mdp_round_trip_is_bit_exact() {
        let m = TabularMdp::random(4, 3, 0.95, 1.0, &mut SeedStream::new(1).rng());
        let text = mdp_to_doc(&m).render();
        let back = mdp_from_doc(&Document::parse(&text).unwrap()).unwrap();
        assert_eq!(back, m);
        assert!(text.starts_with("merpo-mdp 1\nshape 4 3\n"));
    }

    #[test]
    fn golden_single_state_mdp() {
        let m = TabularMdp::new(
            Array3::ones((1, 1, 1)),
            ndarray::array![[0.5]],
            ndarray::array![1.0],
            0.9,
            1.0,
        )
        .unwrap();
        let expected = "merpo-mdp 1\nshape 1 1\ngamma 9.0000000000000002e-1\nr_max 1.0000000000000000e0\nlogits false\n\
table transition 1 1\n1.0000000000000000e0\ntable reward 1 1\n5.0000000000000000e-1\ntable init_dist 1 1\n1.0000000000000000e0\n";
        assert_eq!(mdp_to_doc(&m).render(), expected);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = Document::parse("merpo-q 1\nshape 1 1\ntable values 1 1\nabc\n").unwrap_err();
        assert!(matches!(err, MerpoError::Parse { line: 4, .. }));
        assert!(Document::parse("merpo-q 2\n").is_err());
        let doc = Document::parse("merpo-q 1\nshape 1 1\ntable values 1 1\n1\n").unwrap();
        assert!(policy_from_doc(&doc).is_err());
    }

    proptest! {
        #[test]
        fn reals_round_trip(x in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO) {
            let back: f64 = fmt_real(x).parse().unwrap();
            prop_assert_eq!(back.to_bits(), x.to_bits());
        }
    }
}
