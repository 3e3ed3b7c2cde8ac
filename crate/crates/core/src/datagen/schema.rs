use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FieldKind {
    /// One-hot encoded field. The level list is the persisted level
    /// dictionary: level `i` maps to one-hot column `offset + i`.
    Categorical {
        levels: Vec<String>,
    },
    Continuous,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Field {
    pub name: String,
    #[serde(flatten)]
    pub kind: FieldKind,
}

impl Field {
    pub fn categorical(name: impl Into<String>, levels: Vec<String>) -> Self {
        Field {
            name: name.into(),
            kind: FieldKind::Categorical { levels },
        }
    }

    /// Categorical field with levels named `L0, L1, ...`.
    pub fn categorical_n(name: impl Into<String>, cardinality: usize) -> Self {
        Self::categorical(name, (0..cardinality).map(|i| format!("L{i}")).collect())
    }

    pub fn continuous(name: impl Into<String>) -> Self {
        Field {
            name: name.into(),
            kind: FieldKind::Continuous,
        }
    }

    /// Number of one-hot columns the field expands to.
    pub fn width(&self) -> usize {
        match &self.kind {
            FieldKind::Categorical { levels } => levels.len(),
            FieldKind::Continuous => 1,
        }
    }

    pub fn is_categorical(&self) -> bool {
        matches!(self.kind, FieldKind::Categorical { .. })
    }
}

/// A single field value of an encoded covariate row.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Covariate {
    Level(u32),
    Value(f64),
}

/// Covariate value as supplied by a client, before encoding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RawValue {
    Number(f64),
    Text(String),
}

/// Ordered field layout. Columns of the one-hot expansion follow field order;
/// a categorical field occupies `cardinality` consecutive columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SchemaRepr", into = "SchemaRepr")]
pub struct FieldSchema {
    fields: Vec<Field>,
    offsets: Vec<usize>,
    width: usize,
}

#[derive(Serialize, Deserialize)]
struct SchemaRepr {
    fields: Vec<Field>,
}

impl TryFrom<SchemaRepr> for FieldSchema {
    type Error = Error;

    fn try_from(repr: SchemaRepr) -> Result<Self> {
        FieldSchema::new(repr.fields)
    }
}

impl From<FieldSchema> for SchemaRepr {
    fn from(s: FieldSchema) -> Self {
        SchemaRepr { fields: s.fields }
    }
}

impl FieldSchema {
    pub fn new(fields: Vec<Field>) -> Result<Self> {
        if fields.is_empty() {
            return Err(Error::Schema("schema has no fields".into()));
        }
        let mut seen = HashSet::new();
        for f in &fields {
            if !seen.insert(f.name.as_str()) {
                return Err(Error::Schema(format!("duplicate field name {:?}", f.name)));
            }
            if let FieldKind::Categorical { levels } = &f.kind {
                if levels.len() < 2 {
                    return Err(Error::Schema(format!(
                        "categorical field {:?} needs at least 2 levels, has {}",
                        f.name,
                        levels.len()
                    )));
                }
                let distinct: HashSet<&str> = levels.iter().map(String::as_str).collect();
                if distinct.len() != levels.len() {
                    return Err(Error::Schema(format!(
                        "categorical field {:?} has duplicate levels",
                        f.name
                    )));
                }
            }
        }
        let mut offsets = Vec::with_capacity(fields.len());
        let mut width = 0;
        for f in &fields {
            offsets.push(width);
            width += f.width();
        }
        Ok(FieldSchema {
            fields,
            offsets,
            width,
        })
    }

    /// The synthetic sales layout: two categorical blocks followed by
    /// continuous features (100 + 300 + 10 gives 410 one-hot columns).
    pub fn sales_layout(
        n_categories: usize,
        n_sellers: usize,
        n_continuous: usize,
    ) -> Result<Self> {
        let mut fields = vec![
            Field::categorical_n("category", n_categories),
            Field::categorical_n("seller", n_sellers),
        ];
        fields.extend((0..n_continuous).map(|i| Field::continuous(format!("x{i}"))));
        Self::new(fields)
    }

    pub fn fields(&self) -> &[Field] {
        &self.fields
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    /// One-hot width: sum of cardinalities plus the number of continuous fields.
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn offset(&self, field: usize) -> usize {
        self.offsets[field]
    }

    pub fn field_index(&self, name: &str) -> Option<usize> {
        self.fields.iter().position(|f| f.name == name)
    }

    pub fn n_categorical(&self) -> usize {
        self.fields.iter().filter(|f| f.is_categorical()).count()
    }

    pub fn level_index(&self, field: usize, level: &str) -> Result<u32> {
        let f = &self.fields[field];
        match &f.kind {
            FieldKind::Categorical { levels } => levels
                .iter()
                .position(|l| l == level)
                .map(|i| i as u32)
                .ok_or_else(|| Error::UnseenLevel {
                    field: f.name.clone(),
                    level: level.to_string(),
                }),
            FieldKind::Continuous => {
                Err(Error::Schema(format!("field {:?} is continuous", f.name)))
            }
        }
    }

    pub fn check_row(&self, row: &[Covariate]) -> Result<()> {
        if row.len() != self.fields.len() {
            return Err(Error::Schema(format!(
                "row has {} values, schema has {} fields",
                row.len(),
                self.fields.len()
            )));
        }
        for (f, v) in self.fields.iter().zip(row) {
            match (&f.kind, v) {
                (FieldKind::Categorical { levels }, Covariate::Level(i)) => {
                    if *i as usize >= levels.len() {
                        return Err(Error::UnseenLevel {
                            field: f.name.clone(),
                            level: format!("#{i}"),
                        });
                    }
                }
                (FieldKind::Continuous, Covariate::Value(x)) => {
                    if !x.is_finite() {
                        return Err(Error::Schema(format!("field {:?} is not finite", f.name)));
                    }
                }
                _ => {
                    return Err(Error::Schema(format!(
                        "value kind does not match field {:?}",
                        f.name
                    )))
                }
            }
        }
        Ok(())
    }

    /// Encodes covariates given by field name. Every field must be present;
    /// unknown names are rejected.
    pub fn encode_named(&self, values: &BTreeMap<String, RawValue>) -> Result<Vec<Covariate>> {
        for name in values.keys() {
            if self.field_index(name).is_none() {
                return Err(Error::Schema(format!("unknown field {name:?}")));
            }
        }
        self.fields
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let raw = values
                    .get(&f.name)
                    .ok_or_else(|| Error::Schema(format!("missing field {:?}", f.name)))?;
                match (&f.kind, raw) {
                    (FieldKind::Categorical { .. }, RawValue::Text(s)) => {
                        self.level_index(i, s).map(Covariate::Level)
                    }
                    (FieldKind::Categorical { .. }, RawValue::Number(x)) => self
                        .level_index(i, &format_number(*x))
                        .map(Covariate::Level),
                    (FieldKind::Continuous, RawValue::Number(x)) if x.is_finite() => {
                        Ok(Covariate::Value(*x))
                    }
                    (FieldKind::Continuous, RawValue::Text(s)) => s
                        .trim()
                        .parse::<f64>()
                        .ok()
                        .filter(|x| x.is_finite())
                        .map(Covariate::Value)
                        .ok_or_else(|| {
                            Error::Schema(format!("field {:?}: {s:?} is not a number", f.name))
                        }),
                    (FieldKind::Continuous, RawValue::Number(_)) => {
                        Err(Error::Schema(format!("field {:?} is not finite", f.name)))
                    }
                }
            })
            .collect()
    }

    /// Inverse of [`encode_named`](Self::encode_named).
    pub fn decode(&self, row: &[Covariate]) -> BTreeMap<String, RawValue> {
        self.fields
            .iter()
            .zip(row)
            .map(|(f, v)| {
                let raw = match (&f.kind, v) {
                    (FieldKind::Categorical { levels }, Covariate::Level(i)) => {
                        RawValue::Text(levels[*i as usize].clone())
                    }
                    (_, Covariate::Value(x)) => RawValue::Number(*x),
                    (_, Covariate::Level(i)) => RawValue::Number(*i as f64),
                };
                (f.name.clone(), raw)
            })
            .collect()
    }

    /// Nonzero one-hot columns of a row as `(column, value)` pairs.
    pub fn active(&self, row: &[Covariate]) -> Vec<(usize, f64)> {
        let mut out = Vec::with_capacity(row.len());
        self.active_into(row, &mut out);
        out
    }

    pub fn active_into(&self, row: &[Covariate], out: &mut Vec<(usize, f64)>) {
        out.clear();
        for (i, v) in row.iter().enumerate() {
            match *v {
                Covariate::Level(l) => out.push((self.offsets[i] + l as usize, 1.0)),
                Covariate::Value(x) => out.push((self.offsets[i], x)),
            }
        }
    }

    pub fn one_hot(&self, row: &[Covariate]) -> Vec<f64> {
        let mut x = vec![0.0; self.width];
        for (c, v) in self.active(row) {
            x[c] = v;
        }
        x
    }
}

fn format_number(x: f64) -> String {
    if x.fract() == 0.0 && x.abs() < 1e15 {
        format!("{}", x as i64)
    } else {
        format!("{x}")
    }
}
