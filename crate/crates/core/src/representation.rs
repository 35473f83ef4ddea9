//! Cluster summaries: class-based TF-IDF keywords, centroids,
//! representative documents and generated names.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use unicode_segmentation::UnicodeSegmentation;

use crate::clustering::{ClusterId, Labeling, OUTLIER};
use crate::geometry::{cosine, Matrix};
use crate::providers::{GenerationRequest, Providers};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RepresentationError {
    #[error("no class contains a token")]
    NoTokens,
    #[error("cluster centroid is degenerate (mean norm {0:.3e} < 1e-12)")]
    DegenerateCentroid(f64),
    #[error("cluster {0} has no members")]
    EmptyCluster(ClusterId),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerConfig {
    /// Minimum token length in characters.
    pub min_len: usize,
    pub stopwords: BTreeSet<String>,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            min_len: 2,
            stopwords: BTreeSet::new(),
        }
    }
}

pub fn tokenize(text: &str, cfg: &TokenizerConfig) -> Vec<String> {
    text.unicode_words()
        .map(str::to_lowercase)
        .filter(|t| t.chars().count() >= cfg.min_len && !cfg.stopwords.contains(t))
        .collect()
}

/// Term statistics over a set of classes.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    /// f_t: occurrences of each term over all classes.
    pub global: BTreeMap<String, usize>,
    /// tf_{t,c}.
    pub per_class: Vec<BTreeMap<String, usize>>,
    /// A: mean token count per class.
    pub avg_tokens: f64,
}

impl Vocabulary {
    /// Each class is the concatenation of its documents.
    pub fn build<S: AsRef<str>>(classes: &[Vec<S>], cfg: &TokenizerConfig) -> Self {
        let mut global = BTreeMap::new();
        let mut per_class = Vec::with_capacity(classes.len());
        let mut total = 0usize;
        for docs in classes {
            let mut counts: BTreeMap<String, usize> = BTreeMap::new();
            for d in docs {
                for t in tokenize(d.as_ref(), cfg) {
                    total += 1;
                    *global.entry(t.clone()).or_insert(0) += 1;
                    *counts.entry(t).or_insert(0) += 1;
                }
            }
            per_class.push(counts);
        }
        let avg_tokens = if classes.is_empty() { 0.0 } else { total as f64 / classes.len() as f64 };
        Self {
            global,
            per_class,
            avg_tokens,
        }
    }

    pub fn score(&self, class: usize, term: &str) -> f64 {
        let tf = self.per_class[class].get(term).copied().unwrap_or(0);
        match self.global.get(term) {
            Some(&f) if tf > 0 => tf as f64 * (1.0 + self.avg_tokens / f as f64).ln(),
            _ => 0.0,
        }
    }

    /// Highest scoring terms of `class`, ties broken by term.
    pub fn top_terms(&self, class: usize, n: usize) -> Vec<(String, f64)> {
        let mut scored: Vec<(String, f64)> = self.per_class[class]
            .keys()
            .map(|t| (t.clone(), self.score(class, t)))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        scored.truncate(n);
        scored
    }
}

/// Top `top_n` keywords per class. Classes without tokens get an empty list.
pub fn ctfidf<S: AsRef<str>>(
    classes: &[Vec<S>],
    cfg: &TokenizerConfig,
    top_n: usize,
) -> Result<Vec<Vec<(String, f64)>>, RepresentationError> {
    let vocab = Vocabulary::build(classes, cfg);
    if vocab.global.is_empty() {
        return Err(RepresentationError::NoTokens);
    }
    Ok((0..classes.len()).map(|c| vocab.top_terms(c, top_n)).collect())
}

/// Normalised mean of the given rows.
pub fn centroid<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Result<Vec<f64>, RepresentationError> {
    let mut sum: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for r in rows {
        if sum.is_empty() {
            sum = vec![0.0; r.len()];
        } else if r.len() != sum.len() {
            return Err(RepresentationError::Shape("rows differ in length".into()));
        }
        sum.iter_mut().zip(r).for_each(|(s, x)| *s += x);
        n += 1;
    }
    if n == 0 {
        return Err(RepresentationError::DegenerateCentroid(0.0));
    }
    sum.iter_mut().for_each(|s| *s /= n as f64);
    let norm = crate::geometry::norm(&sum);
    if !(norm >= 1e-12) {
        return Err(RepresentationError::DegenerateCentroid(norm));
    }
    sum.iter_mut().for_each(|s| *s /= norm);
    Ok(sum)
}

/// The `m` members most cosine-similar to `center`, ties broken by id.
pub fn representatives(members: &[(&str, &[f64])], center: &[f64], m: usize) -> Vec<String> {
    let mut scored: Vec<(f64, &str)> = members.iter().map(|(id, e)| (cosine(e, center), *id)).collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    scored.into_iter().take(m).map(|(_, id)| id.to_string()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NamingConfig {
    /// Prompt with keywords only, no document snippets.
    pub keywords_only: bool,
    pub max_keywords: usize,
    pub max_snippets: usize,
    pub snippet_chars: usize,
    pub max_tokens: usize,
}

impl Default for NamingConfig {
    fn default() -> Self {
        Self {
            keywords_only: false,
            max_keywords: 10,
            max_snippets: 3,
            snippet_chars: 300,
            max_tokens: 256,
        }
    }
}

pub fn naming_schema() -> Value {
    json!({
        "type": "object",
        "properties": {
            "title": {"type": "string", "pattern": "^\\s*\\S+(\\s+\\S+){0,5}\\s*$"},
            "description": {"type": "string"}
        },
        "required": ["title", "description"]
    })
}

pub fn naming_prompt(keywords: &[String], snippets: &[String], focus: Option<&str>, cfg: &NamingConfig) -> String {
    let mut p = String::from("Give a name and a short description to a group of documents.\n");
    if let Some(f) = focus {
        p.push_str(&format!("The documents were grouped by this criterion: {f}\n"));
    }
    let kws: Vec<&str> = keywords.iter().take(cfg.max_keywords).map(String::as_str).collect();
    p.push_str(&format!("Keywords: {}\n", kws.join(", ")));
    if !cfg.keywords_only && !snippets.is_empty() {
        p.push_str("\nExample documents:\n");
        for (i, s) in snippets.iter().take(cfg.max_snippets).enumerate() {
            let cut: String = s.chars().take(cfg.snippet_chars).collect();
            p.push_str(&format!("{}. {}\n", i + 1, cut.replace('\n', " ")));
        }
    }
    p.push_str("\nAnswer in JSON with a \"title\" of at most 6 words and a \"description\" of at most 2 sentences.");
    p
}

fn first_sentences(text: &str, n: usize) -> String {
    let mut out = String::new();
    let mut count = 0;
    let mut chars = text.trim().chars().peekable();
    while let Some(c) = chars.next() {
        out.push(c);
        if matches!(c, '.' | '!' | '?') && chars.peek().map_or(true, |n| n.is_whitespace()) {
            count += 1;
            if count == n {
                break;
            }
        }
    }
    out.trim().to_string()
}

pub fn fallback_name(keywords: &[String]) -> String {
    if keywords.is_empty() {
        return "unnamed".into();
    }
    keywords.iter().take(3).cloned().collect::<Vec<_>>().join("/")
}

/// Generated `(name, description)`. Falls back to the top three keywords
/// when generation fails.
pub fn name_cluster(
    keywords: &[String],
    snippets: &[String],
    focus: Option<&str>,
    providers: &Providers,
    cfg: &NamingConfig,
) -> (String, String) {
    let req = GenerationRequest {
        prompt: naming_prompt(keywords, snippets, focus, cfg),
        max_tokens: cfg.max_tokens,
        schema: Some(naming_schema()),
    };
    let parsed = providers.generate(&req).ok().and_then(|out| {
        let v: Value = serde_json::from_str(&out).ok()?;
        Some((v["title"].as_str()?.trim().to_string(), first_sentences(v["description"].as_str()?, 2)))
    });
    match parsed {
        Some((t, d)) if !t.is_empty() => (t, d),
        _ => {
            tracing::warn!("cluster naming failed, using keywords");
            (fallback_name(keywords), String::new())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterRepresentation {
    pub cluster_id: ClusterId,
    pub size: usize,
    pub keywords: Vec<(String, f64)>,
    pub centroid: Vec<f64>,
    pub representative_doc_ids: Vec<String>,
    pub name: String,
    pub description: String,
    /// Name and description were given by the user and survive
    /// recomputation.
    #[serde(default)]
    pub user_named: bool,
}

impl ClusterRepresentation {
    pub fn keyword_terms(&self) -> Vec<String> {
        self.keywords.iter().map(|(t, _)| t.clone()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RepresentationConfig {
    pub tokenizer: TokenizerConfig,
    pub top_keywords: usize,
    pub representatives: usize,
    pub naming: NamingConfig,
}

impl Default for RepresentationConfig {
    fn default() -> Self {
        Self {
            tokenizer: TokenizerConfig::default(),
            top_keywords: 50,
            representatives: 5,
            naming: NamingConfig::default(),
        }
    }
}

/// Documents as the representation step sees them: ids, the text used for
/// keywords, and unit-norm full-dimensional embeddings, all in row order.
#[derive(Clone, Copy, Debug)]
pub struct DocView<'a> {
    pub ids: &'a [String],
    pub texts: &'a [String],
    pub embeddings: &'a Matrix,
}

impl DocView<'_> {
    fn check(&self, labeling: &Labeling) -> Result<(), RepresentationError> {
        let n = labeling.labels.len();
        if self.ids.len() != n || self.texts.len() != n || self.embeddings.rows() != n {
            return Err(RepresentationError::Shape(format!(
                "{} labels, {} ids, {} texts, {} embeddings",
                n,
                self.ids.len(),
                self.texts.len(),
                self.embeddings.rows()
            )));
        }
        Ok(())
    }
}

/// Keywords, centroid and representatives for every cluster; names are
/// left empty. Outliers get no entry.
pub fn describe_clusters(
    view: DocView<'_>,
    labeling: &Labeling,
    cfg: &RepresentationConfig,
) -> Result<BTreeMap<ClusterId, ClusterRepresentation>, RepresentationError> {
    view.check(labeling)?;
    let mut members: BTreeMap<ClusterId, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labeling.labels.iter().enumerate() {
        if l != OUTLIER {
            members.entry(l).or_default().push(i);
        }
    }
    let ids: Vec<ClusterId> = members.keys().copied().collect();
    let classes: Vec<Vec<&str>> = ids
        .iter()
        .map(|c| members[c].iter().map(|&i| view.texts[i].as_str()).collect())
        .collect();
    let keywords = match ctfidf(&classes, &cfg.tokenizer, cfg.top_keywords) {
        Ok(k) => k,
        Err(RepresentationError::NoTokens) => vec![Vec::new(); ids.len()],
        Err(e) => return Err(e),
    };
    let mut out = BTreeMap::new();
    for (c, kws) in ids.into_iter().zip(keywords) {
        let rows = &members[&c];
        let center = centroid(rows.iter().map(|&i| view.embeddings.row(i)))?;
        let pairs: Vec<(&str, &[f64])> = rows
            .iter()
            .map(|&i| (view.ids[i].as_str(), view.embeddings.row(i)))
            .collect();
        let reps = representatives(&pairs, &center, cfg.representatives);
        out.insert(
            c,
            ClusterRepresentation {
                cluster_id: c,
                size: rows.len(),
                keywords: kws,
                centroid: center,
                representative_doc_ids: reps,
                name: String::new(),
                description: String::new(),
                user_named: false,
            },
        );
    }
    Ok(out)
}

/// Fills in names for the clusters in `which`, running requests in
/// parallel.
pub fn name_clusters(
    reps: &mut BTreeMap<ClusterId, ClusterRepresentation>,
    which: &BTreeSet<ClusterId>,
    view: DocView<'_>,
    focus: Option<&str>,
    providers: &Providers,
    cfg: &RepresentationConfig,
) {
    let index: BTreeMap<&str, usize> = view.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let jobs: Vec<(ClusterId, Vec<String>, Vec<String>)> = reps
        .values()
        .filter(|r| which.contains(&r.cluster_id))
        .map(|r| {
            let snippets = r
                .representative_doc_ids
                .iter()
                .filter_map(|id| index.get(id.as_str()).map(|&i| view.texts[i].clone()))
                .collect();
            (r.cluster_id, r.keyword_terms(), snippets)
        })
        .collect();
    let names: Vec<(ClusterId, (String, String))> = jobs
        .into_par_iter()
        .map(|(c, kws, snippets)| (c, name_cluster(&kws, &snippets, focus, providers, &cfg.naming)))
        .collect();
    for (c, (name, description)) in names {
        let r = reps.get_mut(&c).expect("cluster present");
        r.name = name;
        r.description = description;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_rules() {
        let t = tokenize("A cat, the CAT's Ünïcode x-ray!", &TokenizerConfig::default());
        assert_eq!(t, ["cat", "the", "cat's", "ünïcode", "ray"]);
        let cfg = TokenizerConfig {
            stopwords: ["the".to_string()].into(),
            ..Default::default()
        };
        assert!(!tokenize("the cat", &cfg).contains(&"the".to_string()));
    }

    #[test]
    fn apple_example() {
        let classes = vec![vec!["apple apple banana"], vec!["car car banana"]];
        let k = ctfidf(&classes, &TokenizerConfig::default(), 50).unwrap();
        let apple = k[0].iter().find(|(t, _)| t == "apple").unwrap().1;
        assert!((apple - 2.0 * 2.5f64.ln()).abs() < 1e-12);
        assert_eq!(k[0][0].0, "apple");
        assert_eq!(k[0][1].0, "banana");
    }

    #[test]
    fn exclusive_term_outranks_shared_term() {
        let classes = vec![vec!["solo shared"], vec!["other shared"]];
        let k = ctfidf(&classes, &TokenizerConfig::default(), 50).unwrap();
        assert_eq!(k[0][0].0, "solo");
    }

    #[test]
    fn empty_class_and_no_tokens() {
        let k = ctfidf(&[vec!["word"], vec!["a"]], &TokenizerConfig::default(), 50).unwrap();
        assert!(k[1].is_empty());
        assert_eq!(ctfidf(&[vec!["a b"]], &TokenizerConfig::default(), 50), Err(RepresentationError::NoTokens));
    }

    #[test]
    fn centroid_cases() {
        let c = centroid([&[1.0, 0.0][..], &[0.0, 1.0][..]]).unwrap();
        let h = 1.0 / 2f64.sqrt();
        assert!((c[0] - h).abs() < 1e-15 && (c[1] - h).abs() < 1e-15);
        assert!(matches!(
            centroid([&[1.0, 0.0][..], &[-1.0, 0.0][..]]),
            Err(RepresentationError::DegenerateCentroid(_))
        ));
        assert_eq!(centroid([&[0.0, 3.0][..]]).unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn representatives_order() {
        let a = [1.0, 0.0];
        let b = [0.6, 0.8];
        let c = [0.8, 0.6];
        let d = [0.8, 0.6];
        let members = [("b", &b[..]), ("d", &d[..]), ("a", &a[..]), ("c", &c[..])];
        assert_eq!(representatives(&members, &[1.0, 0.0], 3), ["a", "c", "d"]);
        assert_eq!(representatives(&members, &[1.0, 0.0], 10).len(), 4);
    }

    #[test]
    fn mock_naming_and_fallback() {
        let p = Providers::mock(8);
        let kws: Vec<String> = ["rain", "storm", "flood", "wind"].iter().map(|s| s.to_string()).collect();
        let (name, desc) = name_cluster(&kws, &[], None, &p, &NamingConfig::default());
        assert_eq!(name, "rain storm flood");
        assert!(!desc.is_empty());

        struct Down;
        impl crate::providers::Generator for Down {
            fn complete(&self, _: &str, _: usize, _: Option<&Value>) -> Result<String, crate::providers::ProviderError> {
                Err(crate::providers::ProviderError::Transport("down".into()))
            }
        }
        let mut p = Providers::mock(8);
        p.generator = std::sync::Arc::new(Down);
        let (name, _) = name_cluster(&kws, &[], None, &p, &NamingConfig::default());
        assert_eq!(name, "rain/storm/flood");
    }

    #[test]
    fn long_titles_violate_schema() {
        let v = jsonschema::JSONSchema::compile(&naming_schema()).unwrap();
        assert!(v.is_valid(&json!({"title": "one two three four five six", "description": "x"})));
        assert!(!v.is_valid(&json!({"title": "one two three four five six seven", "description": "x"})));
    }

    #[test]
    fn description_cut_to_two_sentences() {
        assert_eq!(first_sentences("One. Two! Three? Four.", 2), "One. Two!");
        assert_eq!(first_sentences("Version 2.5 is out. Yes.", 2), "Version 2.5 is out. Yes.");
    }

    #[test]
    fn describe_skips_outliers() {
        let ids: Vec<String> = (0..4).map(|i| format!("d{i}")).collect();
        let texts: Vec<String> = ["red apple", "green apple", "noise", "fast car"].iter().map(|s| s.to_string()).collect();
        let emb = Matrix::from_rows(&[[1.0, 0.0], [0.8, 0.6], [0.0, 1.0], [0.0, 1.0]]).unwrap();
        let labeling = Labeling { labels: vec![0, 0, OUTLIER, 1] };
        let reps = describe_clusters(
            DocView { ids: &ids, texts: &texts, embeddings: &emb },
            &labeling,
            &RepresentationConfig::default(),
        )
        .unwrap();
        assert_eq!(reps.keys().copied().collect::<Vec<_>>(), [0, 1]);
        assert_eq!(reps[&0].keywords[0].0, "apple");
        assert_eq!(reps[&0].size, 2);
        assert!(reps[&0].representative_doc_ids.iter().all(|d| d == "d0" || d == "d1"));
    }
}
