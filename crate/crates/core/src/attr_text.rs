//! Rule-based extraction of the four lung-infection attributes from
//! three-clause clinical descriptions.
//!
//! Grammar:
//!
//! ```text
//! <side> pulmonary infection, <count> infected areas, <pos> left lung and <pos> right lung.
//! ```
//!
//! Clause 1 carries the side adjective, clause 2 a leading number word and
//! clause 3 one position phrase per lung joined by `and`. A lung that is not
//! mentioned in clause 3 gets the position `no`. The compact attribute
//! description (`Bilateral, three, middle lower, upper middle.`) is accepted
//! as well, so rendered descriptions parse back to their labels.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};

pub const NUM_ATTRIBUTES: usize = 4;
pub const SIDE: usize = 0;
pub const COUNT: usize = 1;
pub const LEFT: usize = 2;
pub const RIGHT: usize = 3;

/// Position value used for a lung without infection.
pub const NO_POSITION: &str = "no";

const DEFAULT_TABLE: &str = include_str!("taxonomy.txt");

#[derive(Error, Debug, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("description is empty")]
    Empty,
    #[error("expected {expected} comma-separated clauses, found {found}")]
    MissingClause { expected: usize, found: usize },
    #[error("clause {index} ({text:?}) matches no known attribute value")]
    UnparseableClause { index: usize, text: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeDef {
    pub id: usize,
    pub description: String,
    pub values: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeTaxonomy {
    pub attributes: Vec<AttributeDef>,
}

impl Default for AttributeTaxonomy {
    fn default() -> Self {
        Self::from_table_str(DEFAULT_TABLE).expect("bundled taxonomy is valid")
    }
}

impl AttributeTaxonomy {
    /// Parses the block format used by `taxonomy.txt`.
    pub fn from_table_str(text: &str) -> Result<Self> {
        let mut attributes = Vec::new();
        let mut current: (Option<usize>, Option<String>, Option<Vec<String>>) = (None, None, None);
        let flush = |cur: &mut (Option<usize>, Option<String>, Option<Vec<String>>),
                     attrs: &mut Vec<AttributeDef>|
         -> Result<()> {
            match std::mem::take(cur) {
                (None, None, None) => Ok(()),
                (Some(id), Some(description), Some(values)) => {
                    attrs.push(AttributeDef {
                        id,
                        description,
                        values,
                    });
                    Ok(())
                }
                _ => Err(Error::Taxonomy("incomplete attribute block".into())),
            }
        };
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.starts_with('#') {
                continue;
            }
            if line.is_empty() {
                flush(&mut current, &mut attributes)?;
                continue;
            }
            let (key, value) = line.split_once(':').ok_or_else(|| {
                Error::Taxonomy(format!("line {}: expected `key: value`", lineno + 1))
            })?;
            let value = value.trim();
            match key.trim() {
                "id" => {
                    let id = value.parse().map_err(|_| {
                        Error::Taxonomy(format!("line {}: bad id {value:?}", lineno + 1))
                    })?;
                    current.0 = Some(id);
                }
                "description" => current.1 = Some(value.to_string()),
                "values" => {
                    current.2 = Some(value.split(',').map(normalize_phrase).collect());
                }
                other => {
                    return Err(Error::Taxonomy(format!(
                        "line {}: unknown key {other:?}",
                        lineno + 1
                    )));
                }
            }
        }
        flush(&mut current, &mut attributes)?;
        let taxonomy = AttributeTaxonomy { attributes };
        taxonomy.validate()?;
        Ok(taxonomy)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => e.into(),
        })?;
        Self::from_table_str(&text)
    }

    pub fn to_table_string(&self) -> String {
        let mut out = String::new();
        for (i, a) in self.attributes.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            out.push_str(&format!(
                "id: {}\ndescription: {}\nvalues: {}\n",
                a.id,
                a.description,
                a.values.join(", ")
            ));
        }
        out
    }

    fn validate(&self) -> Result<()> {
        if self.attributes.len() != NUM_ATTRIBUTES {
            return Err(Error::Taxonomy(format!(
                "expected {NUM_ATTRIBUTES} attributes, found {}",
                self.attributes.len()
            )));
        }
        for (i, a) in self.attributes.iter().enumerate() {
            if a.id != i + 1 {
                return Err(Error::Taxonomy(format!(
                    "attribute ids must be 1..{NUM_ATTRIBUTES} in order"
                )));
            }
            if a.values.is_empty() || a.values.iter().any(|v| v.is_empty()) {
                return Err(Error::Taxonomy(format!(
                    "attribute {} has an empty value",
                    a.id
                )));
            }
            for (j, v) in a.values.iter().enumerate() {
                if a.values[..j].contains(v) {
                    return Err(Error::Taxonomy(format!(
                        "attribute {} repeats value {v:?}",
                        a.id
                    )));
                }
            }
        }
        if self.attributes[LEFT].values != self.attributes[RIGHT].values {
            return Err(Error::Taxonomy(
                "left and right position values must match".into(),
            ));
        }
        if !self.attributes[LEFT]
            .values
            .iter()
            .any(|v| v == NO_POSITION)
        {
            return Err(Error::Taxonomy(format!(
                "position values must include {NO_POSITION:?}"
            )));
        }
        Ok(())
    }

    /// Category counts `a_m` per attribute.
    pub fn sizes(&self) -> [usize; NUM_ATTRIBUTES] {
        let mut s = [0; NUM_ATTRIBUTES];
        for (i, a) in self.attributes.iter().enumerate() {
            s[i] = a.values.len();
        }
        s
    }

    pub fn value(&self, attribute: usize, category: usize) -> &str {
        &self.attributes[attribute].values[category]
    }

    pub fn index_of(&self, attribute: usize, value: &str) -> Option<usize> {
        self.attributes[attribute]
            .values
            .iter()
            .position(|v| v == value)
    }

    pub fn no_position(&self) -> usize {
        self.index_of(LEFT, NO_POSITION).expect("validated")
    }

    pub fn labels(&self, values: [&str; NUM_ATTRIBUTES]) -> Result<AttributeLabels> {
        let mut categories = [0; NUM_ATTRIBUTES];
        for (m, v) in values.iter().enumerate() {
            categories[m] = self.index_of(m, &normalize_phrase(v)).ok_or_else(|| {
                Error::InvalidLabels(format!("attribute {} has no value {v:?}", m + 1))
            })?;
        }
        Ok(AttributeLabels { categories })
    }

    /// Every valid label combination, in lexicographic category order.
    pub fn all_labels(&self) -> Vec<AttributeLabels> {
        let sizes = self.sizes();
        let total: usize = sizes.iter().product();
        (0..total)
            .map(|mut n| {
                let mut categories = [0; NUM_ATTRIBUTES];
                for m in (0..NUM_ATTRIBUTES).rev() {
                    categories[m] = n % sizes[m];
                    n /= sizes[m];
                }
                AttributeLabels { categories }
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttributeLabels {
    pub categories: [usize; NUM_ATTRIBUTES],
}

impl AttributeLabels {
    pub fn validate(&self, taxonomy: &AttributeTaxonomy) -> Result<()> {
        for (m, (&c, size)) in self.categories.iter().zip(taxonomy.sizes()).enumerate() {
            if c >= size {
                return Err(Error::InvalidLabels(format!(
                    "attribute {} category {c} out of range 0..{size}",
                    m + 1
                )));
            }
        }
        Ok(())
    }

    pub fn values<'t>(&self, taxonomy: &'t AttributeTaxonomy) -> [&'t str; NUM_ATTRIBUTES] {
        std::array::from_fn(|m| taxonomy.value(m, self.categories[m]))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeDescription {
    pub text: String,
    pub tokens: Vec<String>,
}

impl fmt::Display for AttributeDescription {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

/// Lower-cases and splits into word tokens and `,`/`.` punctuation tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            tokens.push(std::mem::take(&mut word));
        }
        if ch == ',' || ch == '.' {
            tokens.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

fn normalize_phrase(s: &str) -> String {
    s.split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

fn capitalize(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

const SIDE_GLUE: &[&str] = &[
    "pulmonary",
    "infection",
    "infections",
    "lung",
    "lungs",
    "the",
    "of",
];
const COUNT_GLUE: &[&str] = &[
    "infected",
    "infection",
    "infections",
    "area",
    "areas",
    "region",
    "regions",
    "lesion",
    "lesions",
    "of",
    "the",
];
const POSITION_GLUE: &[&str] = &["lung", "lungs", "of", "the", "in", "part", "field"];

/// Word-level spelling corrections applied before matching.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AliasTable {
    map: HashMap<String, String>,
}

impl AliasTable {
    /// Corrections for misspellings seen in clinical descriptions.
    pub fn builtin() -> Self {
        let pairs = [
            ("bilatral", "bilateral"),
            ("bilaterl", "bilateral"),
            ("unilatral", "unilateral"),
            ("uper", "upper"),
            ("uppper", "upper"),
            ("midle", "middle"),
            ("lowwer", "lower"),
            ("lft", "left"),
            ("rigth", "right"),
            ("infecion", "infection"),
            ("pulmunary", "pulmonary"),
        ];
        let mut t = AliasTable::default();
        for (from, to) in pairs {
            t.insert(from, to);
        }
        t
    }

    pub fn insert(&mut self, from: &str, to: &str) {
        self.map.insert(from.to_lowercase(), to.to_lowercase());
    }

    /// Reads `wrong = right` lines; `#` starts a comment.
    pub fn from_str_table(text: &str) -> Result<Self> {
        let mut t = AliasTable::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (from, to) = line.split_once('=').ok_or_else(|| Error::Format {
                location: format!("alias line {}", lineno + 1),
                message: "expected `wrong = right`".into(),
            })?;
            t.insert(from.trim(), to.trim());
        }
        Ok(t)
    }

    fn apply<'a>(&'a self, word: &'a str) -> &'a str {
        self.map.get(word).map(String::as_str).unwrap_or(word)
    }
}

#[derive(Clone, Debug)]
pub struct AttributeParser {
    taxonomy: AttributeTaxonomy,
    aliases: AliasTable,
}

impl Default for AttributeParser {
    fn default() -> Self {
        AttributeParser::new(AttributeTaxonomy::default(), AliasTable::builtin())
    }
}

impl AttributeParser {
    pub fn new(taxonomy: AttributeTaxonomy, aliases: AliasTable) -> Self {
        AttributeParser { taxonomy, aliases }
    }

    pub fn taxonomy(&self) -> &AttributeTaxonomy {
        &self.taxonomy
    }

    fn words(&self, clause: &str) -> Vec<String> {
        clause
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(|w| self.aliases.apply(&w.to_lowercase()).to_string())
            .collect()
    }

    /// Matches a clause against one attribute after dropping glue words.
    fn match_value(&self, attribute: usize, words: &[String], glue: &[&str]) -> Option<usize> {
        let phrase = words
            .iter()
            .filter(|w| !glue.contains(&w.as_str()))
            .cloned()
            .collect::<Vec<_>>()
            .join(" ");
        self.taxonomy.index_of(attribute, &phrase)
    }

    pub fn parse(&self, raw_text: &str) -> std::result::Result<AttributeLabels, ParseError> {
        let body = raw_text.trim();
        if body.is_empty() {
            return Err(ParseError::Empty);
        }
        let clauses: Vec<&str> = body
            .split(',')
            .map(|c| c.trim().trim_end_matches('.').trim())
            .collect();
        if clauses.iter().all(|c| c.is_empty()) {
            return Err(ParseError::Empty);
        }
        if clauses.len() < 3 || clauses.iter().any(|c| c.is_empty()) {
            let found = clauses.iter().filter(|c| !c.is_empty()).count();
            return Err(ParseError::MissingClause { expected: 3, found });
        }
        let unparseable = |index: usize| ParseError::UnparseableClause {
            index: index + 1,
            text: clauses[index.min(clauses.len() - 1)].to_string(),
        };
        let words: Vec<Vec<String>> = clauses.iter().map(|c| self.words(c)).collect();

        let side = self
            .match_value(SIDE, &words[0], SIDE_GLUE)
            .ok_or_else(|| unparseable(0))?;
        let count = self
            .match_value(COUNT, &words[1], COUNT_GLUE)
            .ok_or_else(|| unparseable(1))?;

        let mentions_side = |w: &[String]| w.iter().any(|x| x == "left" || x == "right");
        let compact = clauses.len() == 4 && !mentions_side(&words[2]) && !mentions_side(&words[3]);
        let (left, right) = if compact {
            (
                self.match_value(LEFT, &words[2], &[])
                    .ok_or_else(|| unparseable(2))?,
                self.match_value(RIGHT, &words[3], &[])
                    .ok_or_else(|| unparseable(3))?,
            )
        } else {
            let tail: Vec<String> = words[2..].join(&["and".to_string()][..]);
            self.parse_positions(&tail)
                .ok_or_else(|| ParseError::UnparseableClause {
                    index: 3,
                    text: clauses[2..].join(", "),
                })?
        };
        Ok(AttributeLabels {
            categories: [side, count, left, right],
        })
    }

    fn parse_positions(&self, words: &[String]) -> Option<(usize, usize)> {
        let no = self.taxonomy.no_position();
        let (mut left, mut right) = (None, None);
        for part in words.split(|w| w == "and") {
            if part.is_empty() {
                return None;
            }
            let sides: Vec<&String> = part
                .iter()
                .filter(|w| *w == "left" || *w == "right")
                .collect();
            if sides.len() != 1 {
                return None;
            }
            let is_left = sides[0] == "left";
            let rest: Vec<String> = part
                .iter()
                .filter(|w| *w != "left" && *w != "right")
                .cloned()
                .collect();
            let attr = if is_left { LEFT } else { RIGHT };
            let value = self.match_value(attr, &rest, POSITION_GLUE)?;
            let slot = if is_left { &mut left } else { &mut right };
            if slot.replace(value).is_some() {
                return None;
            }
        }
        Some((left.unwrap_or(no), right.unwrap_or(no)))
    }

    /// Compact attribute description: category strings joined by commas.
    pub fn to_attribute_description(
        &self,
        labels: &AttributeLabels,
    ) -> Result<AttributeDescription> {
        labels.validate(&self.taxonomy)?;
        let values = labels.values(&self.taxonomy);
        let text = format!("{}.", capitalize(&values.join(", ")));
        let tokens = tokenize(&text);
        Ok(AttributeDescription { text, tokens })
    }

    /// Full clinical sentence in the three-clause grammar.
    pub fn render_sentence(&self, labels: &AttributeLabels) -> Result<String> {
        labels.validate(&self.taxonomy)?;
        let [side, count, left, right] = labels.values(&self.taxonomy);
        let noun = if labels.categories[COUNT] == 0 {
            "area"
        } else {
            "areas"
        };
        let mut parts = Vec::new();
        if left != NO_POSITION {
            parts.push(format!("{left} left lung"));
        }
        if right != NO_POSITION {
            parts.push(format!("{right} right lung"));
        }
        if parts.is_empty() {
            parts.push(format!(
                "{NO_POSITION} left lung and {NO_POSITION} right lung"
            ));
        }
        Ok(format!(
            "{} pulmonary infection, {count} infected {noun}, {}.",
            capitalize(side),
            parts.join(" and ")
        ))
    }

    /// One-hot target vector per attribute.
    pub fn encode_targets(&self, labels: &AttributeLabels) -> Result<Vec<Vec<f64>>> {
        labels.validate(&self.taxonomy)?;
        Ok(self
            .taxonomy
            .sizes()
            .iter()
            .zip(labels.categories)
            .map(|(&n, c)| (0..n).map(|i| if i == c { 1.0 } else { 0.0 }).collect())
            .collect())
    }
}

/// Parses with the bundled taxonomy and alias table.
pub fn parse_description(raw_text: &str) -> std::result::Result<AttributeLabels, ParseError> {
    AttributeParser::default().parse(raw_text)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextRow {
    pub sample_id: String,
    pub raw_text: String,
}

pub const TEXT_HEADER: &str = "sample_id\traw_text";

/// Reads `sample_id<TAB>raw_text` rows; a leading header row is skipped.
pub fn read_text_tsv(reader: impl BufRead) -> Result<Vec<TextRow>> {
    let mut rows = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || (lineno == 0 && line == TEXT_HEADER) {
            continue;
        }
        let (id, text) = line.split_once('\t').ok_or_else(|| Error::Format {
            location: format!("line {}", lineno + 1),
            message: "expected two tab-separated columns".into(),
        })?;
        rows.push(TextRow {
            sample_id: id.trim().to_string(),
            raw_text: text.trim().to_string(),
        });
    }
    Ok(rows)
}

pub fn write_text_tsv(mut writer: impl Write, rows: &[TextRow]) -> Result<()> {
    writeln!(writer, "{TEXT_HEADER}")?;
    for r in rows {
        writeln!(writer, "{}\t{}", r.sample_id, r.raw_text)?;
    }
    Ok(())
}

pub struct BatchOutcome {
    pub parsed: Vec<(String, AttributeLabels, AttributeDescription)>,
    pub failed: Vec<(String, ParseError)>,
}

pub fn parse_batch(parser: &AttributeParser, rows: &[TextRow]) -> BatchOutcome {
    let mut outcome = BatchOutcome {
        parsed: Vec::new(),
        failed: Vec::new(),
    };
    for row in rows {
        match parser.parse(&row.raw_text) {
            Ok(labels) => {
                let desc = parser
                    .to_attribute_description(&labels)
                    .expect("parser output is always valid");
                outcome.parsed.push((row.sample_id.clone(), labels, desc));
            }
            Err(e) => outcome.failed.push((row.sample_id.clone(), e)),
        }
    }
    outcome
}

pub fn write_attribute_tsv(
    mut writer: impl Write,
    taxonomy: &AttributeTaxonomy,
    rows: &[(String, AttributeLabels, AttributeDescription)],
) -> Result<()> {
    writeln!(writer, "sample_id\tc1\tc2\tc3\tc4\tattribute_description")?;
    for (id, labels, desc) in rows {
        let v = labels.values(taxonomy);
        writeln!(
            writer,
            "{id}\t{}\t{}\t{}\t{}\t{}",
            v[0], v[1], v[2], v[3], desc.text
        )?;
    }
    Ok(())
}
