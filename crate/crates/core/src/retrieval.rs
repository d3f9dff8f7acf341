//! Exact cosine search over projected audio embeddings, zero-shot
//! classification against template phrases, and the evaluation metrics.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifest::{Gender, ManifestError, RefKind, SegmentRecord, StoreSet, VectorStore};
use crate::model::{dot, l2_norm, Matrix, Modality, ModelError, RetrievalModel};

const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("index is empty")]
    EmptyIndex,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("duplicate id {0:?} in index")]
    DuplicateId(String),
    #[error("row {0} is not unit norm")]
    NotUnitNorm(usize),
    #[error("index has {ids} ids but {rows} vectors")]
    LengthMismatch { ids: usize, rows: usize },
    #[error("template set needs at least 2 distinct labels, got {0}")]
    TooFewLabels(usize),
    #[error("query label must be male or female, got {0}")]
    NonBinaryQuery(Gender),
    #[error("no queries for class {0}; macro average undefined")]
    EmptyClass(Gender),
    #[error("predictions ({predictions}) and labels ({labels}) differ in length")]
    PredictionLengthMismatch { predictions: usize, labels: usize },
}

/// Immutable store of unit-norm audio embeddings keyed by segment id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    ids: Vec<String>,
    vectors: Matrix,
    metadata: Vec<SegmentRecord>,
}

impl EmbeddingIndex {
    /// `metadata` is aligned with `ids` and may be empty when unavailable.
    pub fn new(
        ids: Vec<String>,
        vectors: Matrix,
        metadata: Vec<SegmentRecord>,
    ) -> Result<Self, RetrievalError> {
        if ids.len() != vectors.rows() || (!metadata.is_empty() && metadata.len() != ids.len()) {
            return Err(RetrievalError::LengthMismatch {
                ids: ids.len(),
                rows: vectors.rows(),
            });
        }
        let mut seen = HashSet::new();
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(RetrievalError::DuplicateId(id.clone()));
            }
        }
        for (i, row) in vectors.iter_rows().enumerate() {
            if (l2_norm(row) - 1.0).abs() > UNIT_TOLERANCE {
                return Err(RetrievalError::NotUnitNorm(i));
            }
        }
        Ok(Self {
            ids,
            vectors,
            metadata,
        })
    }

    /// Loads embeddings saved as 32-bit floats, renormalizing each row in f64.
    pub fn from_store(
        ids: Vec<String>,
        store: &VectorStore,
        metadata: Vec<SegmentRecord>,
    ) -> Result<Self, RetrievalError> {
        let rows: Vec<Vec<f64>> = (0..store.count())
            .map(|i| {
                let r = store.row_f64(i).unwrap();
                let n = l2_norm(&r);
                if n > 0.0 {
                    r.iter().map(|v| v / n).collect()
                } else {
                    r
                }
            })
            .collect();
        let vectors = if rows.is_empty() {
            Matrix::zeros(0, store.dim())
        } else {
            Matrix::from_rows(&rows)?
        };
        Self::new(ids, vectors, metadata)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    pub fn record(&self, pos: usize) -> Option<&SegmentRecord> {
        self.metadata.get(pos)
    }

    /// Embeddings narrowed to f32 for the on-disk vector store format.
    pub fn to_store(&self) -> VectorStore {
        let data = self.vectors.as_slice().iter().map(|&v| v as f32).collect();
        VectorStore::new(self.vectors.cols().max(1), data).expect("unit vectors are finite")
    }

    /// Positions of the top `k` rows by cosine with `query` (unit norm).
    fn top_positions(&self, query: &[f64], k: usize) -> Vec<(usize, f64)> {
        let mut scored: Vec<(usize, f64)> = self
            .vectors
            .iter_rows()
            .enumerate()
            .map(|(i, row)| (i, dot(row, query).clamp(-1.0, 1.0)))
            .collect();
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(Ordering::Equal)
                .then_with(|| self.ids[a.0].cmp(&self.ids[b.0]))
        });
        scored.truncate(k);
        scored
    }

    /// Exact search by an already-projected query embedding.
    pub fn search(&self, query: &[f64], k: usize) -> Result<RetrievalResult, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::ZeroK);
        }
        if self.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        if query.len() != self.vectors.cols() {
            return Err(ModelError::DimensionMismatch {
                expected: self.vectors.cols(),
                actual: query.len(),
            }
            .into());
        }
        Ok(RetrievalResult {
            hits: self
                .top_positions(query, k)
                .into_iter()
                .map(|(i, score)| Hit {
                    id: self.ids[i].clone(),
                    score,
                })
                .collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: String,
    pub score: f64,
}

/// Hits in descending score order; equal scores are ordered by id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub hits: Vec<Hit>,
}

/// Projects every record's audio vector. Records without an audio reference
/// are an error.
pub fn build_index(
    model: &RetrievalModel,
    records: &[SegmentRecord],
    stores: &StoreSet,
) -> Result<EmbeddingIndex, RetrievalError> {
    let mut rows = Vec::with_capacity(records.len());
    for r in records {
        let x: Vec<f64> = stores
            .resolve(r, RefKind::Audio)?
            .iter()
            .map(|&v| v as f64)
            .collect();
        rows.push(model.project(Modality::Audio, &x)?);
    }
    let vectors = if rows.is_empty() {
        Matrix::zeros(0, model.config.embed_dim)
    } else {
        Matrix::from_rows(&rows)?
    };
    EmbeddingIndex::new(
        records.iter().map(|r| r.id.clone()).collect(),
        vectors,
        records.to_vec(),
    )
}

/// Ranks index entries by cosine with the projected description vector.
pub fn retrieve_topk(
    index: &EmbeddingIndex,
    model: &RetrievalModel,
    description_vec: &[f64],
    k: usize,
) -> Result<RetrievalResult, RetrievalError> {
    if index.is_empty() {
        return Err(RetrievalError::EmptyIndex);
    }
    let q = model.project(Modality::Text, description_vec)?;
    index.search(&q, k)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pub label: String,
    pub phrase: String,
    pub embedding: Vec<f64>,
}

/// Template phrases with their projected text embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateSet {
    templates: Vec<Template>,
}

impl TemplateSet {
    pub fn new(templates: Vec<Template>) -> Result<Self, RetrievalError> {
        let labels: HashSet<&str> = templates.iter().map(|t| t.label.as_str()).collect();
        if labels.len() < 2 {
            return Err(RetrievalError::TooFewLabels(labels.len()));
        }
        Ok(Self { templates })
    }

    /// Projects `(label, phrase, text encoder vector)` entries through the model.
    pub fn build(
        model: &RetrievalModel,
        entries: impl IntoIterator<Item = (String, String, Vec<f64>)>,
    ) -> Result<Self, RetrievalError> {
        let templates = entries
            .into_iter()
            .map(|(label, phrase, vec)| {
                Ok(Template {
                    label,
                    phrase,
                    embedding: model.project(Modality::Text, &vec)?,
                })
            })
            .collect::<Result<Vec<_>, RetrievalError>>()?;
        Self::new(templates)
    }

    pub fn templates(&self) -> &[Template] {
        &self.templates
    }

    pub fn labels(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.templates
            .iter()
            .map(|t| t.label.as_str())
            .filter(|l| seen.insert(*l))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: String,
    pub score: f64,
}

/// Label of the template closest to `audio_embedding`; the earliest template
/// wins ties.
pub fn zero_shot_classify(audio_embedding: &[f64], templates: &TemplateSet) -> Prediction {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, t) in templates.templates.iter().enumerate() {
        let s = dot(audio_embedding, &t.embedding);
        if s > best.1 {
            best = (i, s);
        }
    }
    Prediction {
        label: templates.templates[best.0].label.clone(),
        score: best.1.clamp(-1.0, 1.0),
    }
}

/// Projects an audio encoder vector and classifies it.
pub fn classify_audio(
    model: &RetrievalModel,
    audio_vec: &[f64],
    templates: &TemplateSet,
) -> Result<Prediction, RetrievalError> {
    let e = model.project(Modality::Audio, audio_vec)?;
    Ok(zero_shot_classify(&e, templates))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenderAccuracy {
    pub macro_accuracy: f64,
    pub male: f64,
    pub female: f64,
    pub male_queries: usize,
    pub female_queries: usize,
}

/// Macro-averaged fraction of the top-`k` hits whose gender matches the query.
///
/// Per query, the fraction of matching hits; then the mean within each class;
/// then the mean of the two class means. Hits without a gender label count as
/// mismatches.
pub fn gender_accuracy_at_k(
    index: &EmbeddingIndex,
    model: &RetrievalModel,
    queries: &[(Vec<f64>, Gender)],
    k: usize,
) -> Result<GenderAccuracy, RetrievalError> {
    let embedded = queries
        .iter()
        .map(|(v, g)| Ok((model.project(Modality::Text, v)?, *g)))
        .collect::<Result<Vec<_>, RetrievalError>>()?;
    gender_accuracy_from_embeddings(index, &embedded, k)
}

/// Same as [`gender_accuracy_at_k`] with queries already projected.
pub fn gender_accuracy_from_embeddings(
    index: &EmbeddingIndex,
    queries: &[(Vec<f64>, Gender)],
    k: usize,
) -> Result<GenderAccuracy, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::ZeroK);
    }
    if index.is_empty() {
        return Err(RetrievalError::EmptyIndex);
    }
    let (mut sums, mut counts) = ([0.0f64; 2], [0usize; 2]);
    for (q, g) in queries {
        let class = match g {
            Gender::Male => 0,
            Gender::Female => 1,
            other => return Err(RetrievalError::NonBinaryQuery(*other)),
        };
        let top = index.top_positions(q, k);
        let hits = top
            .iter()
            .filter(|(pos, _)| index.record(*pos).and_then(|r| r.gender_label) == Some(*g))
            .count();
        sums[class] += hits as f64 / top.len() as f64;
        counts[class] += 1;
    }
    if counts[0] == 0 {
        return Err(RetrievalError::EmptyClass(Gender::Male));
    }
    if counts[1] == 0 {
        return Err(RetrievalError::EmptyClass(Gender::Female));
    }
    let male = sums[0] / counts[0] as f64;
    let female = sums[1] / counts[1] as f64;
    Ok(GenderAccuracy {
        macro_accuracy: 0.5 * (male + female),
        male,
        female,
        male_queries: counts[0],
        female_queries: counts[1],
    })
}

/// Fraction of correct predictions for each true label.
pub fn classification_accuracy<S: AsRef<str>>(
    predictions: &[S],
    labels: &[S],
) -> Result<BTreeMap<String, f64>, RetrievalError> {
    if predictions.len() != labels.len() {
        return Err(RetrievalError::PredictionLengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    let mut tally: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (p, l) in predictions.iter().zip(labels) {
        let e = tally.entry(l.as_ref().to_string()).or_default();
        e.1 += 1;
        if p.as_ref() == l.as_ref() {
            e.0 += 1;
        }
    }
    Ok(tally
        .into_iter()
        .map(|(label, (ok, n))| (label, ok as f64 / n as f64))
        .collect())
}

/// Fraction of queries whose expected id appears in the top `k`.
pub fn recall_at_k(
    index: &EmbeddingIndex,
    model: &RetrievalModel,
    queries: &[(Vec<f64>, String)],
    k: usize,
) -> Result<f64, RetrievalError> {
    if queries.is_empty() {
        return Ok(0.0);
    }
    let mut found = 0usize;
    for (v, expected) in queries {
        let res = retrieve_topk(index, model, v, k)?;
        if res.hits.iter().any(|h| &h.id == expected) {
            found += 1;
        }
    }
    Ok(found as f64 / queries.len() as f64)
}

/// Zero-shot accuracies reported for the full 7.6k-segment corpus with frozen
/// HuBERT / RoBERTa encoders, as `(task, alpha, first label, second label)`.
/// Context only; not reproducible without that corpus.
pub const REFERENCE_ZERO_SHOT_ACCURACY: [(&str, f64, f64, f64); 4] = [
    ("male/female", 0.0, 0.998, 0.941),
    ("male/female", 1.0, 0.986, 1.000),
    ("fast/slow", 0.0, 0.984, 0.997),
    ("fast/slow", 1.0, 0.990, 1.000),
];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(n: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                let n = l2_norm(&v);
                v.into_iter().map(|x| x / n).collect()
            })
            .collect();
        Matrix::from_rows(&rows).unwrap()
    }

    fn index(n: usize, d: usize, seed: u64) -> EmbeddingIndex {
        let ids = (0..n).map(|i| format!("seg{i:04}")).collect();
        EmbeddingIndex::new(ids, unit_rows(n, d, seed), vec![]).unwrap()
    }

    #[test]
    fn empty_index_and_bad_k() {
        let idx = EmbeddingIndex::new(vec![], Matrix::zeros(0, 4), vec![]).unwrap();
        assert!(idx.is_empty());
        assert!(matches!(
            idx.search(&[1.0, 0.0, 0.0, 0.0], 3),
            Err(RetrievalError::EmptyIndex)
        ));
        let idx = index(5, 4, 1);
        assert!(matches!(
            idx.search(&[1.0, 0.0, 0.0, 0.0], 0),
            Err(RetrievalError::ZeroK)
        ));
    }

    #[test]
    fn k_larger_than_index() {
        let idx = index(5, 4, 1);
        let q = unit_rows(1, 4, 2);
        assert_eq!(idx.search(q.row(0), 50).unwrap().hits.len(), 5);
    }

    #[test]
    fn ties_are_ordered_by_id() {
        let v = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let idx = EmbeddingIndex::new(vec!["b".into(), "a".into(), "c".into()], v, vec![]).unwrap();
        let res = idx.search(&[1.0, 0.0], 3).unwrap();
        let ids: Vec<_> = res.hits.iter().map(|h| h.id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
    }

    #[test]
    fn index_invariants_enforced() {
        let v = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.5, 0.0]]).unwrap();
        assert!(matches!(
            EmbeddingIndex::new(vec!["a".into(), "b".into()], v, vec![]),
            Err(RetrievalError::NotUnitNorm(1))
        ));
        let v = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(
            EmbeddingIndex::new(vec!["a".into(), "a".into()], v, vec![]),
            Err(RetrievalError::DuplicateId(_))
        ));
    }

    #[test]
    fn search_matches_brute_force_sort() {
        for seed in 0..10 {
            let idx = index(300, 8, seed);
            let q = unit_rows(1, 8, 1000 + seed);
            let mut brute: Vec<(String, f64)> = idx
                .ids()
                .iter()
                .zip(idx.vectors().iter_rows())
                .map(|(id, r)| (id.clone(), dot(r, q.row(0))))
                .collect();
            brute.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            for k in [1, 7, 300] {
                let res = idx.search(q.row(0), k).unwrap();
                let got: Vec<&str> = res.hits.iter().map(|h| h.id.as_str()).collect();
                let want: Vec<&str> = brute[..k].iter().map(|(id, _)| id.as_str()).collect();
                assert_eq!(got, want);
                assert!(res.hits.windows(2).all(|w| w[0].score >= w[1].score));
                assert!(res.hits.iter().all(|h| (-1.0..=1.0).contains(&h.score)));
            }
        }
    }

    fn templates() -> TemplateSet {
        TemplateSet::new(vec![
            Template {
                label: "male".into(),
                phrase: "a man is speaking".into(),
                embedding: vec![1.0, 0.0],
            },
            Template {
                label: "female".into(),
                phrase: "a woman is speaking".into(),
                embedding: vec![0.0, 1.0],
            },
        ])
        .unwrap()
    }

    #[test]
    fn zero_shot_argmax() {
        let t = templates();
        assert_eq!(zero_shot_classify(&[0.0, 1.0], &t).label, "female");
        assert_eq!(zero_shot_classify(&[1.0, 0.0], &t).label, "male");
        // Tie goes to the first template.
        let s = 0.5f64.sqrt();
        assert_eq!(zero_shot_classify(&[s, s], &t).label, "male");
    }

    #[test]
    fn zero_shot_ignores_worse_templates() {
        let mut t = templates().templates().to_vec();
        let before = zero_shot_classify(&[0.8, 0.6], &TemplateSet::new(t.clone()).unwrap());
        t.push(Template {
            label: "child".into(),
            phrase: String::new(),
            embedding: vec![-1.0, 0.0],
        });
        let after = zero_shot_classify(&[0.8, 0.6], &TemplateSet::new(t).unwrap());
        assert_eq!(before, after);
    }

    #[test]
    fn single_label_templates_rejected() {
        let one = vec![
            Template {
                label: "x".into(),
                phrase: "a".into(),
                embedding: vec![1.0],
            },
            Template {
                label: "x".into(),
                phrase: "b".into(),
                embedding: vec![1.0],
            },
        ];
        assert!(matches!(
            TemplateSet::new(one),
            Err(RetrievalError::TooFewLabels(1))
        ));
    }

    fn gendered_index(genders: &[Gender], d: usize, seed: u64) -> EmbeddingIndex {
        let n = genders.len();
        let ids: Vec<String> = (0..n).map(|i| format!("s{i:03}")).collect();
        let meta = ids
            .iter()
            .zip(genders)
            .map(|(id, g)| {
                let mut r = SegmentRecord::new(id.clone(), "c", 3.0);
                r.gender_label = Some(*g);
                r
            })
            .collect();
        EmbeddingIndex::new(ids, unit_rows(n, d, seed), meta).unwrap()
    }

    #[test]
    fn gender_accuracy_all_same_gender() {
        let idx = gendered_index(&[Gender::Male; 20], 4, 3);
        let q = unit_rows(4, 4, 4);
        // With an all-male index, male queries score 1 and female queries 0.
        let queries = vec![
            (q.row(0).to_vec(), Gender::Male),
            (q.row(1).to_vec(), Gender::Male),
            (q.row(2).to_vec(), Gender::Female),
        ];
        let acc = gender_accuracy_from_embeddings(&idx, &queries, 10).unwrap();
        assert_eq!(acc.male, 1.0);
        assert_eq!(acc.female, 0.0);
        assert_eq!(acc.macro_accuracy, 0.5);
    }

    #[test]
    fn gender_accuracy_errors_and_permutation_invariance() {
        let genders: Vec<Gender> = (0..40)
            .map(|i| {
                if i % 2 == 0 {
                    Gender::Male
                } else {
                    Gender::Female
                }
            })
            .collect();
        let idx = gendered_index(&genders, 6, 5);
        let q = unit_rows(10, 6, 6);
        let mut queries: Vec<(Vec<f64>, Gender)> = (0..10)
            .map(|i| {
                (
                    q.row(i).to_vec(),
                    if i < 4 { Gender::Male } else { Gender::Female },
                )
            })
            .collect();
        let a = gender_accuracy_from_embeddings(&idx, &queries, 10).unwrap();
        queries.reverse();
        let b = gender_accuracy_from_embeddings(&idx, &queries, 10).unwrap();
        assert!((a.macro_accuracy - b.macro_accuracy).abs() < 1e-12);

        let only_male: Vec<_> = queries
            .iter()
            .filter(|q| q.1 == Gender::Male)
            .cloned()
            .collect();
        assert!(matches!(
            gender_accuracy_from_embeddings(&idx, &only_male, 10),
            Err(RetrievalError::EmptyClass(Gender::Female))
        ));
        queries.push((q.row(0).to_vec(), Gender::Nonbinary));
        assert!(matches!(
            gender_accuracy_from_embeddings(&idx, &queries, 10),
            Err(RetrievalError::NonBinaryQuery(_))
        ));
    }

    #[test]
    fn classification_accuracy_examples() {
        let labels = ["a", "a", "b", "b"];
        let acc = classification_accuracy(&labels, &labels).unwrap();
        assert!(acc.values().all(|&v| v == 1.0));
        let preds: Vec<&str> = (0..10).map(|i| if i < 5 { "x" } else { "y" }).collect();
        let truth = vec!["x"; 10];
        assert_eq!(classification_accuracy(&preds, &truth).unwrap()["x"], 0.5);
        assert!(classification_accuracy(&preds[..3], &truth).is_err());
    }

    #[test]
    fn build_index_from_stores() {
        let cfg = ModelConfig {
            audio_in_dim: 3,
            text_in_dim: 3,
            embed_dim: 4,
            proj_hidden_dim: 5,
            feat_hidden_dim: 2,
            seed: 2,
            ..Default::default()
        };
        let model = init_model(&cfg).unwrap();
        let mut stores = StoreSet::new();
        stores.insert(
            "enc",
            VectorStore::new(3, vec![0.1, 0.2, 0.3, -0.3, 0.5, 0.9, 1.0, -1.0, 0.2]).unwrap(),
        );
        let records: Vec<SegmentRecord> = (0..3)
            .map(|i| {
                let mut r = SegmentRecord::new(format!("r{i}"), "c", 3.0);
                r.audio_vec_ref = Some(crate::manifest::VecRef {
                    store: "enc".into(),
                    row: i,
                });
                r
            })
            .collect();
        let idx = build_index(&model, &records, &stores).unwrap();
        assert_eq!(idx.len(), 3);
        assert_eq!(idx, build_index(&model, &records, &stores).unwrap());
        assert!(build_index(&model, &[], &stores).unwrap().is_empty());
        let mut missing = records.clone();
        missing[1].audio_vec_ref = None;
        assert!(build_index(&model, &missing, &stores).is_err());
    }
}
