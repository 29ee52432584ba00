//! Corpus ingestion: JSONL records, preprocessing, schema construction and
//! id-indexed documents.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Canonical categorical feature names, in schema order.
pub const FEATURE_NAMES: [&str; 3] = ["user_language", "tweet_language", "time_zone"];

/// Reserved category id 0 in every feature dictionary.
pub const MISSING_CATEGORY: &str = "__missing__";

pub const DEFAULT_MIN_COUNT: usize = 10;

const SCHEMA_FORMAT_VERSION: u32 = 1;

/// One raw input record, as found in a JSONL line. Unknown fields are ignored.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RawRecord {
    #[serde(default)]
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile_location: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_language: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tweet_language: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_zone: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lat: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lon: Option<f64>,
}

impl RawRecord {
    pub fn feature(&self, idx: usize) -> Option<&str> {
        match idx {
            0 => self.user_language.as_deref(),
            1 => self.tweet_language.as_deref(),
            2 => self.time_zone.as_deref(),
            _ => None,
        }
    }

    pub fn set_feature(&mut self, idx: usize, value: String) {
        match idx {
            0 => self.user_language = Some(value),
            1 => self.tweet_language = Some(value),
            2 => self.time_zone = Some(value),
            _ => panic!("feature index {idx} out of range"),
        }
    }
}

/// String <-> id bijection with insertion-order ids.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Dict {
    names: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Dict {
    fn from(names: Vec<String>) -> Self {
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Dict { names, index }
    }
}

impl From<Dict> for Vec<String> {
    fn from(d: Dict) -> Self {
        d.names
    }
}

impl Dict {
    pub fn new() -> Self {
        Dict::default()
    }

    /// Insert if absent; returns the id either way.
    pub fn intern(&mut self, name: &str) -> usize {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.names.len();
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Shared vocabulary and category dictionaries for a corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusSchema {
    pub format_version: u32,
    pub vocabulary: Dict,
    /// One dictionary per canonical feature; id 0 is always [`MISSING_CATEGORY`].
    pub features: Vec<Dict>,
    pub regions: Dict,
    pub min_count: usize,
}

impl CorpusSchema {
    pub fn vocab_size(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn num_features(&self) -> usize {
        self.features.len()
    }

    pub fn num_regions(&self) -> usize {
        self.regions.len()
    }

    /// Category counts per feature, with the region dictionary appended as
    /// the trailing pseudo-feature used during training.
    pub fn category_sizes_with_region(&self) -> Vec<usize> {
        let mut sizes: Vec<usize> = self.features.iter().map(|f| f.len()).collect();
        sizes.push(self.regions.len());
        sizes
    }
}

/// Indexed document: the unit of inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub tokens: Vec<usize>,
    pub feature_values: Vec<usize>,
    pub region: Option<usize>,
    pub coords: Option<[f64; 2]>,
}

fn is_url(token: &str) -> bool {
    token.starts_with("http://") || token.starts_with("https://") || token.starts_with("www.")
}

/// Combine tweet text and profile location, lowercase, split on whitespace,
/// drop URL tokens. Mentions, hashtags and stop words are kept verbatim.
pub fn preprocess_text(text: &str, profile_location: &str) -> Vec<String> {
    let combined = format!("{text} {profile_location}").to_lowercase();
    combined
        .split_whitespace()
        .filter(|t| !is_url(t))
        .map(|t| t.to_string())
        .collect()
}

pub fn preprocess_record(record: &RawRecord) -> Vec<String> {
    preprocess_text(
        &record.text,
        record.profile_location.as_deref().unwrap_or(""),
    )
}

/// Build the corpus schema: vocabulary filtered by `min_count`, feature
/// dictionaries with a reserved missing category, region dictionary.
pub fn build_schema(records: &[RawRecord], min_count: usize) -> Result<CorpusSchema> {
    if records.is_empty() {
        return Err(Error::validation("empty corpus"));
    }
    if min_count < 1 {
        return Err(Error::validation("min_count must be >= 1"));
    }

    // Token counting in first-occurrence order keeps ids deterministic.
    let mut token_order: Vec<String> = Vec::new();
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut features: Vec<Dict> = FEATURE_NAMES
        .iter()
        .map(|_| {
            let mut d = Dict::new();
            d.intern(MISSING_CATEGORY);
            d
        })
        .collect();
    let mut regions = Dict::new();

    for record in records {
        for token in preprocess_record(record) {
            match counts.get_mut(&token) {
                Some(c) => *c += 1,
                None => {
                    counts.insert(token.clone(), 1);
                    token_order.push(token);
                }
            }
        }
        for (u, dict) in features.iter_mut().enumerate() {
            if let Some(v) = record.feature(u) {
                dict.intern(v);
            }
        }
        if let Some(r) = &record.region {
            regions.intern(r);
        }
    }

    let mut vocabulary = Dict::new();
    for token in token_order {
        if counts[&token] >= min_count {
            vocabulary.intern(&token);
        }
    }

    Ok(CorpusSchema {
        format_version: SCHEMA_FORMAT_VERSION,
        vocabulary,
        features,
        regions,
        min_count,
    })
}

fn validate_coords(idx: usize, lat: Option<f64>, lon: Option<f64>) -> Result<Option<[f64; 2]>> {
    match (lat, lon) {
        (None, None) => Ok(None),
        (Some(_), None) | (None, Some(_)) => Err(Error::validation(format!(
            "record {idx}: latitude and longitude must both be present or both absent"
        ))),
        (Some(lat), Some(lon)) => {
            if !(-90.0..=90.0).contains(&lat) {
                return Err(Error::validation(format!(
                    "record {idx}: latitude {lat} out of range [-90, 90]"
                )));
            }
            if !(-180.0..=180.0).contains(&lon) {
                return Err(Error::validation(format!(
                    "record {idx}: longitude {lon} out of range [-180, 180]"
                )));
            }
            Ok(Some([lat, lon]))
        }
    }
}

pub fn index_record(record: &RawRecord, schema: &CorpusSchema, idx: usize) -> Result<Document> {
    let tokens = preprocess_record(record)
        .iter()
        .filter_map(|t| schema.vocabulary.get(t))
        .collect();
    let feature_values = schema
        .features
        .iter()
        .enumerate()
        .map(|(u, dict)| {
            record.feature(u).and_then(|v| dict.get(v)).unwrap_or(0) // missing or unseen category
        })
        .collect();
    let region = match &record.region {
        None => None,
        Some(r) => match schema.regions.get(r) {
            Some(id) => Some(id),
            None => {
                return Err(Error::validation(format!(
                    "record {idx}: unknown region {r:?}"
                )))
            }
        },
    };
    let coords = validate_coords(idx, record.lat, record.lon)?;
    Ok(Document {
        tokens,
        feature_values,
        region,
        coords,
    })
}

/// Index every record against the schema. Out-of-vocabulary tokens are
/// dropped; unseen categories map to the missing category.
pub fn index_corpus(records: &[RawRecord], schema: &CorpusSchema) -> Result<Vec<Document>> {
    records
        .iter()
        .enumerate()
        .map(|(idx, r)| index_record(r, schema, idx))
        .collect()
}

/// Read a JSONL file of raw records; parse errors name the 1-based line.
pub fn read_jsonl(path: &Path) -> Result<Vec<RawRecord>> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: RawRecord = serde_json::from_str(&line)
            .map_err(|e| Error::validation(format!("line {}: invalid record: {e}", i + 1)))?;
        records.push(record);
    }
    Ok(records)
}

pub fn write_jsonl(path: &Path, records: &[RawRecord]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for record in records {
        serde_json::to_writer(&mut file, record)?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(text: &str, profile: &str) -> RawRecord {
        RawRecord {
            text: text.to_string(),
            profile_location: Some(profile.to_string()),
            ..Default::default()
        }
    }

    #[test]
    fn preprocess_empty_input() {
        assert!(preprocess_text("", "").is_empty());
    }

    #[test]
    fn preprocess_removes_urls_keeps_hashtags() {
        assert_eq!(
            preprocess_text("Rain in #London http://t.co/x", "UK"),
            vec!["rain", "in", "#london", "uk"]
        );
        assert_eq!(
            preprocess_text("see https://a.b and www.c.d", ""),
            vec!["see", "and"]
        );
    }

    #[test]
    fn preprocess_retains_mentions() {
        assert_eq!(preprocess_text("@bob hello", ""), vec!["@bob", "hello"]);
    }

    #[test]
    fn schema_filters_by_min_count() {
        let mut records = Vec::new();
        for _ in 0..10 {
            records.push(rec("a", ""));
        }
        for _ in 0..9 {
            records.push(rec("b", ""));
        }
        let schema = build_schema(&records, 10).unwrap();
        assert_eq!(schema.vocabulary.names(), &["a".to_string()]);
    }

    #[test]
    fn schema_min_count_one_keeps_everything() {
        let records = vec![rec("x y z", ""), rec("y", "")];
        let schema = build_schema(&records, 1).unwrap();
        assert_eq!(schema.vocab_size(), 3);
    }

    #[test]
    fn schema_feature_dict_has_missing_category() {
        let mut r1 = rec("a", "");
        r1.user_language = Some("en".to_string());
        let mut r2 = rec("a", "");
        r2.user_language = Some("fr".to_string());
        let schema = build_schema(&[r1, r2], 1).unwrap();
        assert_eq!(schema.features[0].len(), 3);
        assert_eq!(schema.features[0].name(0), MISSING_CATEGORY);
        assert_eq!(schema.features[0].get("en"), Some(1));
        assert_eq!(schema.features[0].get("fr"), Some(2));
    }

    #[test]
    fn schema_rejects_empty_corpus() {
        assert!(matches!(
            build_schema(&[], 1),
            Err(Error::Validation(msg)) if msg.contains("empty corpus")
        ));
    }

    #[test]
    fn index_drops_filtered_tokens() {
        let mut records = vec![rec("rare rare", "")];
        for _ in 0..10 {
            records.push(rec("common", ""));
        }
        let schema = build_schema(&records, 10).unwrap();
        let docs = index_corpus(&records, &schema).unwrap();
        assert!(docs[0].tokens.is_empty());
        assert_eq!(docs.len(), records.len());
    }

    #[test]
    fn index_maps_missing_feature_to_missing_id() {
        let mut r = rec("a", "");
        r.user_language = Some("en".to_string());
        let schema = build_schema(std::slice::from_ref(&r), 1).unwrap();
        let mut test = rec("a", "");
        test.time_zone = Some("never_seen".to_string());
        let doc = index_record(&test, &schema, 0).unwrap();
        assert_eq!(doc.feature_values, vec![0, 0, 0]);
    }

    #[test]
    fn index_rejects_out_of_range_latitude() {
        let mut r = rec("a", "");
        r.lat = Some(91.0);
        r.lon = Some(0.0);
        let schema = build_schema(std::slice::from_ref(&r), 1).unwrap();
        let err = index_record(&r, &schema, 3).unwrap_err();
        assert!(err.to_string().contains("record 3"));
    }

    #[test]
    fn schema_json_round_trip() {
        let mut r = rec("a b a", "c");
        r.region = Some("uk".to_string());
        r.user_language = Some("en".to_string());
        let schema = build_schema(std::slice::from_ref(&r), 1).unwrap();
        let json = serde_json::to_string(&schema).unwrap();
        let back: CorpusSchema = serde_json::from_str(&json).unwrap();
        assert_eq!(back.vocabulary.get("a"), schema.vocabulary.get("a"));
        assert_eq!(back.features[0].get("en"), Some(1));
        assert_eq!(back.regions.get("uk"), Some(0));
    }

    proptest! {
        #[test]
        fn round_trip_and_determinism(
            texts in proptest::collection::vec("[a-c ]{0,12}", 1..8),
            min_count in 1usize..4,
        ) {
            let records: Vec<RawRecord> = texts.iter().map(|t| rec(t, "")).collect();
            let s1 = build_schema(&records, min_count).unwrap();
            let s2 = build_schema(&records, min_count).unwrap();
            prop_assert_eq!(s1.vocabulary.names(), s2.vocabulary.names());

            // Corpus frequency of every retained token is >= min_count, and
            // decoding ids reproduces the retained token strings.
            let mut freq: HashMap<String, usize> = HashMap::new();
            for r in &records {
                for t in preprocess_record(r) {
                    *freq.entry(t).or_insert(0) += 1;
                }
            }
            let docs = index_corpus(&records, &s1).unwrap();
            for (doc, r) in docs.iter().zip(&records) {
                let decoded: Vec<&str> =
                    doc.tokens.iter().map(|&id| s1.vocabulary.name(id)).collect();
                let retained: Vec<String> = preprocess_record(r)
                    .into_iter()
                    .filter(|t| freq[t] >= min_count)
                    .collect();
                prop_assert_eq!(&decoded, &retained.iter().map(|s| s.as_str()).collect::<Vec<_>>());
                for t in decoded {
                    prop_assert!(freq[t] >= min_count);
                }
            }
        }
    }
}
