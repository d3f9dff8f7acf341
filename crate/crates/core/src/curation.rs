//! Corpus quality assurance: threshold filters, comment keyword pre-filter,
//! Ward clustering over x-vectors, representative selection, channel-disjoint
//! splits and gender labels derived from descriptions.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifest::{Gender, SegmentRecord, VectorStore};

#[derive(Debug, Error)]
pub enum CurationError {
    #[error("invalid thresholds: {0}")]
    InvalidThresholds(String),
    #[error("cluster count {k} out of range 1..={count}")]
    ClusterCountOutOfRange { k: usize, count: usize },
    #[error("assignment is empty")]
    EmptyAssignment,
    #[error("need at least 3 channels, found {0}")]
    TooFewChannels(usize),
    #[error("invalid split fractions: {0}")]
    InvalidFractions(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterThresholds {
    pub min_duration_s: f64,
    pub max_duration_s: f64,
    /// Segments at or below this volume are dropped.
    pub min_volume_dbfs: f64,
    /// Segments with MOS at or above this are kept.
    pub min_nisqa_mos: f64,
    /// Segments with an MLM score at or above this are treated as non-verbal.
    pub max_mlm_score: f64,
}

impl Default for FilterThresholds {
    fn default() -> Self {
        Self {
            min_duration_s: 2.0,
            max_duration_s: 10.0,
            min_volume_dbfs: -55.0,
            min_nisqa_mos: 2.0,
            max_mlm_score: -0.01,
        }
    }
}

impl FilterThresholds {
    pub fn validate(&self) -> Result<(), CurationError> {
        if !(self.min_duration_s < self.max_duration_s) {
            return Err(CurationError::InvalidThresholds(format!(
                "min_duration_s {} must be < max_duration_s {}",
                self.min_duration_s, self.max_duration_s
            )));
        }
        Ok(())
    }
}

/// Why a record was dropped. The first failing rule wins, in declaration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RejectReason {
    MissingField,
    Duration,
    Volume,
    Nisqa,
    Mlm,
}

impl RejectReason {
    pub const ALL: [RejectReason; 5] = [
        RejectReason::MissingField,
        RejectReason::Duration,
        RejectReason::Volume,
        RejectReason::Nisqa,
        RejectReason::Mlm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::MissingField => "missing-field",
            RejectReason::Duration => "duration",
            RejectReason::Volume => "volume",
            RejectReason::Nisqa => "nisqa",
            RejectReason::Mlm => "mlm",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub input: usize,
    pub kept: usize,
    pub rejected: BTreeMap<RejectReason, usize>,
}

impl FilterReport {
    pub fn rejected_total(&self) -> usize {
        self.rejected.values().sum()
    }
}

pub fn check_record(r: &SegmentRecord, t: &FilterThresholds) -> Result<(), RejectReason> {
    let (Some(volume), Some(mos), Some(mlm)) = (r.volume_dbfs, r.nisqa_mos, r.mlm_score) else {
        return Err(RejectReason::MissingField);
    };
    if !(t.min_duration_s <= r.duration_s && r.duration_s <= t.max_duration_s) {
        return Err(RejectReason::Duration);
    }
    if !(volume > t.min_volume_dbfs) {
        return Err(RejectReason::Volume);
    }
    if !(mos >= t.min_nisqa_mos) {
        return Err(RejectReason::Nisqa);
    }
    if !(mlm < t.max_mlm_score) {
        return Err(RejectReason::Mlm);
    }
    Ok(())
}

pub fn apply_quality_filters(
    records: &[SegmentRecord],
    t: &FilterThresholds,
) -> (Vec<SegmentRecord>, FilterReport) {
    let mut report = FilterReport {
        input: records.len(),
        rejected: RejectReason::ALL.iter().map(|r| (*r, 0)).collect(),
        ..Default::default()
    };
    let kept: Vec<SegmentRecord> = records
        .iter()
        .filter(|r| match check_record(r, t) {
            Ok(()) => true,
            Err(reason) => {
                *report.rejected.entry(reason).or_default() += 1;
                false
            }
        })
        .cloned()
        .collect();
    report.kept = kept.len();
    (kept, report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KeywordSet {
    pub keywords: BTreeSet<String>,
    pub min_matching_comments: usize,
}

impl Default for KeywordSet {
    /// The eight voice-related surface forms: three spellings of "voice",
    /// resonance, sound, listen, hear, song.
    fn default() -> Self {
        Self {
            keywords: ["声", "ボイス", "ヴォイス", "響", "音", "聴", "聞", "歌"]
                .into_iter()
                .map(String::from)
                .collect(),
            min_matching_comments: 10,
        }
    }
}

impl KeywordSet {
    pub fn matches(&self, comment: &str) -> bool {
        self.keywords.iter().any(|k| comment.contains(k.as_str()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoComments {
    pub video_id: String,
    pub comments: Vec<String>,
}

/// Keeps videos with at least `min_matching_comments` comments that contain a keyword.
pub fn keyword_comment_filter(videos: &[VideoComments], k: &KeywordSet) -> Vec<String> {
    videos
        .iter()
        .filter(|v| v.comments.iter().filter(|c| k.matches(c)).count() >= k.min_matching_comments)
        .map(|v| v.video_id.clone())
        .collect()
}

/// Splits records by whether their transcription contains a listed word.
/// Matching is on lowercased text so Latin script is case-insensitive.
pub fn nsfw_filter(
    records: &[SegmentRecord],
    wordlist: &BTreeSet<String>,
) -> (Vec<SegmentRecord>, Vec<SegmentRecord>) {
    let words: Vec<String> = wordlist
        .iter()
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect();
    records.iter().cloned().partition(|r| {
        let text = r.transcription.to_lowercase();
        !words.iter().any(|w| text.contains(w.as_str()))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub cluster_a: usize,
    pub cluster_b: usize,
    /// `sqrt(2 * n_a * n_b / (n_a + n_b)) * |c_a - c_b|`; equals the Euclidean
    /// distance for two singletons.
    pub ward_distance: f64,
    pub new_cluster_id: usize,
}

/// Full agglomeration of `leaves` points. Leaves are ids `0..leaves`; merge `s`
/// creates id `leaves + s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterTree {
    pub leaves: usize,
    pub merges: Vec<Merge>,
}

impl ClusterTree {
    /// Flat cluster labels for every leaf after keeping the first `leaves - k`
    /// merges. Labels are numbered by first appearance in leaf order.
    pub fn cut(&self, k: usize) -> Result<Vec<usize>, CurationError> {
        if k == 0 || k > self.leaves {
            return Err(CurationError::ClusterCountOutOfRange {
                k,
                count: self.leaves,
            });
        }
        let mut parent: Vec<usize> = (0..self.leaves + self.merges.len()).collect();
        for m in &self.merges[..self.leaves - k] {
            parent[m.cluster_a] = m.new_cluster_id;
            parent[m.cluster_b] = m.new_cluster_id;
        }
        let root = |mut i: usize| {
            while parent[i] != i {
                i = parent[i];
            }
            i
        };
        let mut labels = BTreeMap::new();
        Ok((0..self.leaves)
            .map(|leaf| {
                let r = root(leaf);
                let next = labels.len();
                *labels.entry(r).or_insert(next)
            })
            .collect())
    }
}

/// Ward agglomerative clustering with Lance-Williams updates on squared
/// Euclidean distances.
///
/// Each active cluster occupies the row of its smallest leaf. At every step the
/// pair with the smallest distance is merged; ties go to the lexicographically
/// smallest `(row_a, row_b)`. Returns the complete tree and its `k`-cut.
pub fn ward_cluster(
    vectors: &VectorStore,
    k: usize,
) -> Result<(ClusterTree, Vec<usize>), CurationError> {
    let n = vectors.count();
    if k == 0 || k > n {
        return Err(CurationError::ClusterCountOutOfRange { k, count: n });
    }
    let tree = ward_tree(vectors);
    let labels = tree.cut(k)?;
    Ok((tree, labels))
}

fn ward_tree(vectors: &VectorStore) -> ClusterTree {
    let n = vectors.count();
    let rows: Vec<Vec<f64>> = (0..n).map(|i| vectors.row_f64(i).unwrap()).collect();

    // Upper-triangular squared distances, d[i][j] valid for i < j.
    let mut d = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            d[i][j] = rows[i]
                .iter()
                .zip(&rows[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
        }
    }
    let dist = |d: &Vec<Vec<f64>>, a: usize, b: usize| if a < b { d[a][b] } else { d[b][a] };

    let mut active = vec![true; n];
    let mut size = vec![1usize; n];
    let mut id: Vec<usize> = (0..n).collect();

    // Nearest neighbour among higher rows; ties keep the smallest column.
    let mut nn = vec![usize::MAX; n];
    let mut nn_dist = vec![f64::INFINITY; n];
    let refresh =
        |row: usize, d: &Vec<Vec<f64>>, active: &[bool], nn: &mut [usize], nn_dist: &mut [f64]| {
            nn[row] = usize::MAX;
            nn_dist[row] = f64::INFINITY;
            for col in row + 1..n {
                if active[col] && d[row][col] < nn_dist[row] {
                    nn[row] = col;
                    nn_dist[row] = d[row][col];
                }
            }
        };
    for row in 0..n {
        refresh(row, &d, &active, &mut nn, &mut nn_dist);
    }

    let mut merges = Vec::with_capacity(n.saturating_sub(1));
    for step in 0..n.saturating_sub(1) {
        let mut a = usize::MAX;
        for row in 0..n {
            if active[row]
                && nn[row] != usize::MAX
                && (a == usize::MAX || nn_dist[row] < nn_dist[a])
            {
                a = row;
            }
        }
        let b = nn[a];
        let d_ab = nn_dist[a];
        let (na, nb) = (size[a] as f64, size[b] as f64);

        for x in 0..n {
            if !active[x] || x == a || x == b {
                continue;
            }
            let nx = size[x] as f64;
            let updated = ((na + nx) * dist(&d, a, x) + (nb + nx) * dist(&d, b, x) - nx * d_ab)
                / (na + nb + nx);
            if x < a {
                d[x][a] = updated;
            } else {
                d[a][x] = updated;
            }
        }

        let (ia, ib) = (id[a], id[b]);
        merges.push(Merge {
            cluster_a: ia.min(ib),
            cluster_b: ia.max(ib),
            ward_distance: d_ab.max(0.0).sqrt(),
            new_cluster_id: n + step,
        });
        active[b] = false;
        size[a] += size[b];
        id[a] = n + step;

        for x in 0..n {
            if !active[x] {
                continue;
            }
            if x == a || nn[x] == a || nn[x] == b {
                refresh(x, &d, &active, &mut nn, &mut nn_dist);
            } else if x < a {
                let v = d[x][a];
                if v < nn_dist[x] || (v == nn_dist[x] && a < nn[x]) {
                    nn[x] = a;
                    nn_dist[x] = v;
                }
            }
        }
    }
    ClusterTree { leaves: n, merges }
}

/// Picks one member per cluster uniformly at random. `assignment` pairs a
/// segment id with its cluster label; output is ordered by cluster label.
pub fn select_representatives(
    assignment: &[(String, usize)],
    seed: u64,
) -> Result<Vec<String>, CurationError> {
    if assignment.is_empty() {
        return Err(CurationError::EmptyAssignment);
    }
    let mut clusters: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for (id, c) in assignment {
        clusters.entry(*c).or_default().push(id);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(clusters
        .values()
        .map(|members| members[rng.random_range(0..members.len())].to_string())
        .collect())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: BTreeSet<String>,
    pub valid: BTreeSet<String>,
    pub test: BTreeSet<String>,
}

impl DatasetSplit {
    pub fn parts(&self) -> [&BTreeSet<String>; 3] {
        [&self.train, &self.valid, &self.test]
    }
}

/// Assigns whole channels to train/valid/test.
///
/// Channels are shuffled with `seed`, then each goes to the split whose
/// current-to-target segment ratio is lowest (ties to the earlier split).
pub fn split_by_channel(
    records: &[SegmentRecord],
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetSplit, CurationError> {
    let fr = [fractions.0, fractions.1, fractions.2];
    if fr.iter().any(|f| !(f.is_finite() && *f > 0.0))
        || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(CurationError::InvalidFractions(format!(
            "{fr:?} must be positive and sum to 1"
        )));
    }
    let mut by_channel: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for r in records {
        by_channel.entry(&r.channel_id).or_default().push(&r.id);
    }
    if by_channel.len() < 3 {
        return Err(CurationError::TooFewChannels(by_channel.len()));
    }
    let mut channels: Vec<&str> = by_channel.keys().copied().collect();
    channels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let total = records.len() as f64;
    let mut counts = [0usize; 3];
    let mut split = DatasetSplit::default();
    for ch in channels {
        let target = (0..3)
            .min_by(|&a, &b| {
                let ra = counts[a] as f64 / (fr[a] * total);
                let rb = counts[b] as f64 / (fr[b] * total);
                ra.total_cmp(&rb)
            })
            .unwrap();
        let members = &by_channel[ch];
        counts[target] += members.len();
        let part = match target {
            0 => &mut split.train,
            1 => &mut split.valid,
            _ => &mut split.test,
        };
        part.extend(members.iter().map(|s| s.to_string()));
    }
    Ok(split)
}

/// Checks pairwise disjointness of ids and of channels between the three parts.
pub fn split_is_channel_disjoint(split: &DatasetSplit, records: &[SegmentRecord]) -> bool {
    let channel_of: BTreeMap<&str, &str> = records
        .iter()
        .map(|r| (r.id.as_str(), r.channel_id.as_str()))
        .collect();
    let channel_sets: Vec<HashSet<&str>> = split
        .parts()
        .iter()
        .map(|p| {
            p.iter()
                .filter_map(|id| channel_of.get(id.as_str()).copied())
                .collect()
        })
        .collect();
    let parts = split.parts();
    for i in 0..3 {
        for j in i + 1..3 {
            if !parts[i].is_disjoint(parts[j]) || !channel_sets[i].is_disjoint(&channel_sets[j]) {
                return false;
            }
        }
    }
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenderMarkers {
    pub male: Vec<String>,
    pub female: Vec<String>,
}

impl Default for GenderMarkers {
    fn default() -> Self {
        Self {
            male: vec!["男".into()],
            female: vec!["女".into()],
        }
    }
}

pub fn label_gender_with(description: &str, markers: &GenderMarkers) -> Gender {
    let has = |set: &[String]| {
        set.iter()
            .any(|m| !m.is_empty() && description.contains(m.as_str()))
    };
    match (has(&markers.male), has(&markers.female)) {
        (true, false) => Gender::Male,
        (false, true) => Gender::Female,
        (true, true) => Gender::Nonbinary,
        (false, false) => Gender::NotIndicated,
    }
}

pub fn label_gender_from_description(description: &str) -> Gender {
    label_gender_with(description, &GenderMarkers::default())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, dur: f64, vol: f64, mos: f64, mlm: f64) -> SegmentRecord {
        let mut r = SegmentRecord::new(id, "c", dur);
        r.volume_dbfs = Some(vol);
        r.nisqa_mos = Some(mos);
        r.mlm_score = Some(mlm);
        r
    }

    #[test]
    fn filter_examples() {
        let t = FilterThresholds::default();
        assert_eq!(check_record(&rec("a", 5.0, -30.0, 3.5, -3.0), &t), Ok(()));
        assert_eq!(
            check_record(&rec("b", 11.0, -30.0, 3.5, -3.0), &t),
            Err(RejectReason::Duration)
        );
        assert_eq!(
            check_record(&rec("c", 5.0, -30.0, 3.5, 0.0), &t),
            Err(RejectReason::Mlm)
        );
        let mut missing = rec("d", 5.0, -30.0, 3.5, -3.0);
        missing.nisqa_mos = None;
        assert_eq!(check_record(&missing, &t), Err(RejectReason::MissingField));
    }

    #[test]
    fn boundary_conventions() {
        let t = FilterThresholds::default();
        assert_eq!(check_record(&rec("a", 2.0, -30.0, 3.0, -3.0), &t), Ok(()));
        assert_eq!(check_record(&rec("a", 10.0, -30.0, 3.0, -3.0), &t), Ok(()));
        assert_eq!(
            check_record(&rec("a", 5.0, -55.0, 3.0, -3.0), &t),
            Err(RejectReason::Volume)
        );
        assert_eq!(check_record(&rec("a", 5.0, -30.0, 2.0, -3.0), &t), Ok(()));
        assert_eq!(
            check_record(&rec("a", 5.0, -30.0, 3.0, -0.01), &t),
            Err(RejectReason::Mlm)
        );
    }

    #[test]
    fn report_sums_to_rejections() {
        let recs = vec![
            rec("a", 5.0, -30.0, 3.5, -3.0),
            rec("b", 1.0, -30.0, 3.5, -3.0),
            rec("c", 5.0, -60.0, 3.5, -3.0),
            rec("d", 5.0, -30.0, 1.5, -3.0),
        ];
        let (kept, report) = apply_quality_filters(&recs, &FilterThresholds::default());
        assert_eq!(kept.len(), 1);
        assert_eq!(report.rejected_total(), 3);
        assert_eq!(report.rejected[&RejectReason::Nisqa], 1);
    }

    #[test]
    fn invalid_thresholds() {
        let t = FilterThresholds {
            min_duration_s: 10.0,
            max_duration_s: 2.0,
            ..Default::default()
        };
        assert!(t.validate().is_err());
    }

    #[test]
    fn keyword_filter_examples() {
        let k = KeywordSet::default();
        let ten = VideoComments {
            video_id: "v1".into(),
            comments: vec!["いい声".to_string(); 10],
        };
        let none = VideoComments {
            video_id: "v2".into(),
            comments: vec![],
        };
        let five_double = VideoComments {
            video_id: "v3".into(),
            comments: vec!["声と歌が好き".to_string(); 5],
        };
        assert_eq!(
            keyword_comment_filter(&[ten, none, five_double], &k),
            vec!["v1"]
        );
    }

    #[test]
    fn nsfw_examples() {
        let mut r = SegmentRecord::new("a", "c", 3.0);
        r.transcription = "this has BadWord inside".into();
        let (kept, rejected) = nsfw_filter(std::slice::from_ref(&r), &BTreeSet::new());
        assert_eq!((kept.len(), rejected.len()), (1, 0));
        let list: BTreeSet<String> = ["badword".to_string()].into();
        let (kept, rejected) = nsfw_filter(std::slice::from_ref(&r), &list);
        assert_eq!((kept.len(), rejected.len()), (0, 1));
    }

    fn store(points: &[[f32; 2]]) -> VectorStore {
        VectorStore::from_rows(2, points.iter()).unwrap()
    }

    #[test]
    fn ward_extremes() {
        let s = store(&[[0.0, 0.0], [1.0, 0.0], [5.0, 5.0], [6.0, 5.0]]);
        let (_, labels) = ward_cluster(&s, 4).unwrap();
        assert_eq!(labels, vec![0, 1, 2, 3]);
        let (tree, labels) = ward_cluster(&s, 1).unwrap();
        assert_eq!(labels, vec![0; 4]);
        assert_eq!(tree.merges.len(), 3);
        let (_, labels) = ward_cluster(&s, 2).unwrap();
        assert_eq!(labels, vec![0, 0, 1, 1]);
        assert!(ward_cluster(&s, 0).is_err());
        assert!(ward_cluster(&s, 5).is_err());
    }

    #[test]
    fn ward_hand_example() {
        // Singletons at distance 1 merge first with Ward distance 1.
        // Merging {0,1} (centroid 0.5) with 3.0: sqrt(2*2*1/3) * 2.5.
        let s = store(&[[0.0, 0.0], [1.0, 0.0], [3.0, 0.0]]);
        let (tree, _) = ward_cluster(&s, 1).unwrap();
        assert_eq!((tree.merges[0].cluster_a, tree.merges[0].cluster_b), (0, 1));
        assert!((tree.merges[0].ward_distance - 1.0).abs() < 1e-12);
        assert_eq!((tree.merges[1].cluster_a, tree.merges[1].cluster_b), (2, 3));
        let expected = (4.0f64 / 3.0).sqrt() * 2.5;
        assert!((tree.merges[1].ward_distance - expected).abs() < 1e-12);
    }

    #[test]
    fn ward_ties_take_smallest_pair() {
        // Four corners of a unit square: all side pairs tie.
        let s = store(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]);
        let (tree, _) = ward_cluster(&s, 1).unwrap();
        assert_eq!((tree.merges[0].cluster_a, tree.merges[0].cluster_b), (0, 1));
        assert_eq!((tree.merges[1].cluster_a, tree.merges[1].cluster_b), (2, 3));
    }

    #[test]
    fn representatives() {
        let singles: Vec<(String, usize)> = (0..5).map(|i| (format!("s{i}"), i)).collect();
        assert_eq!(
            select_representatives(&singles, 1).unwrap(),
            vec!["s0", "s1", "s2", "s3", "s4"]
        );
        let a: Vec<(String, usize)> = (0..20).map(|i| (format!("s{i}"), i % 3)).collect();
        assert_eq!(
            select_representatives(&a, 9).unwrap(),
            select_representatives(&a, 9).unwrap()
        );
        assert!(select_representatives(&[], 0).is_err());
    }

    #[test]
    fn representative_frequencies_are_uniform() {
        let cluster: Vec<(String, usize)> = (0..4).map(|i| (format!("m{i}"), 0)).collect();
        let mut counts = BTreeMap::new();
        for seed in 0..10_000 {
            let pick = select_representatives(&cluster, seed).unwrap().remove(0);
            *counts.entry(pick).or_insert(0usize) += 1;
        }
        for (_, c) in counts {
            let f = c as f64 / 10_000.0;
            assert!((f - 0.25).abs() < 0.02, "{f}");
        }
    }

    fn channel_records(channels: usize, per: usize) -> Vec<SegmentRecord> {
        (0..channels)
            .flat_map(|c| {
                (0..per)
                    .map(move |i| SegmentRecord::new(format!("c{c}-s{i}"), format!("c{c}"), 3.0))
            })
            .collect()
    }

    #[test]
    fn three_channels_one_each() {
        let recs = channel_records(3, 4);
        let third = 1.0 / 3.0;
        let s = split_by_channel(&recs, (third, third, 1.0 - 2.0 * third), 5).unwrap();
        assert!(s.parts().iter().all(|p| p.len() == 4));
        assert!(split_is_channel_disjoint(&s, &recs));
    }

    #[test]
    fn split_errors() {
        assert!(matches!(
            split_by_channel(&channel_records(2, 3), (0.8, 0.1, 0.1), 0),
            Err(CurationError::TooFewChannels(2))
        ));
        assert!(split_by_channel(&channel_records(5, 1), (0.8, 0.3, 0.1), 0).is_err());
        assert!(split_by_channel(&channel_records(5, 1), (1.0, 0.0, 0.0), 0).is_err());
    }

    #[test]
    fn gender_labels() {
        assert_eq!(label_gender_from_description("若い男性の声"), Gender::Male);
        assert_eq!(
            label_gender_from_description("落ち着いた女性"),
            Gender::Female
        );
        assert_eq!(
            label_gender_from_description("男か女かわからない"),
            Gender::Nonbinary
        );
        assert_eq!(label_gender_from_description(""), Gender::NotIndicated);
        let custom = GenderMarkers {
            male: vec!["man".into()],
            female: vec!["woman".into()],
        };
        // "woman" contains "man", so both markers are present.
        assert_eq!(label_gender_with("a woman", &custom), Gender::Nonbinary);
        assert_eq!(label_gender_with("a man", &custom), Gender::Male);
    }
}
