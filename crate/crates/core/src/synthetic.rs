//! Seeded paired corpora with planted cluster structure, for tests, demos
//! and the CLI fixtures.
//!
//! Audio vectors are a cluster center plus isotropic spread. Text vectors are
//! a fixed random linear map of the audio vector plus small noise. Features
//! and gender depend only on the cluster.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::features::SpeechFeatures;
use crate::manifest::{Gender, SegmentRecord, VecRef, VectorStore};
use crate::model::Matrix;
use crate::training::PairSet;

pub const AUDIO_STORE: &str = "audio";
pub const TEXT_STORE: &str = "text";

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub clusters: usize,
    pub audio_dim: usize,
    pub text_dim: usize,
    pub center_scale: f64,
    pub spread: f64,
    pub text_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            clusters: 4,
            audio_dim: 16,
            text_dim: 16,
            center_scale: 1.0,
            spread: 0.5,
            text_noise: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub spec: SyntheticSpec,
    centers: Vec<Vec<f64>>,
    map: Matrix,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Rounds through f32 so in-memory sets match what the vector files hold.
fn f32_exact(v: f64) -> f64 {
    v as f32 as f64
}

impl SyntheticCorpus {
    pub fn new(spec: SyntheticSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let centers = (0..spec.clusters)
            .map(|_| {
                (0..spec.audio_dim)
                    .map(|_| spec.center_scale * normal(&mut rng))
                    .collect()
            })
            .collect();
        let scale = 1.0 / (spec.audio_dim as f64).sqrt();
        let map = Matrix::from_vec(
            spec.text_dim,
            spec.audio_dim,
            (0..spec.text_dim * spec.audio_dim)
                .map(|_| scale * normal(&mut rng))
                .collect(),
        )
        .expect("shape is consistent");
        Self { spec, centers, map }
    }

    /// First half of the clusters are male, the rest female.
    pub fn gender(&self, cluster: usize) -> Gender {
        if cluster < self.spec.clusters.div_ceil(2) {
            Gender::Male
        } else {
            Gender::Female
        }
    }

    pub fn features(&self, cluster: usize) -> SpeechFeatures {
        let k = cluster as f64;
        SpeechFeatures::new(110.0 + 45.0 * k, 0.02 + 0.015 * k, 9.0 - 1.25 * k)
    }

    pub fn text_of(&self, audio: &[f64]) -> Vec<f64> {
        self.map
            .iter_rows()
            .map(|row| crate::model::dot(row, audio))
            .collect()
    }

    /// Text-side vector of each cluster center, labeled with its gender.
    pub fn cluster_templates(&self) -> Vec<(String, String, Vec<f64>)> {
        self.centers
            .iter()
            .enumerate()
            .map(|(k, c)| {
                let g = self.gender(k);
                (
                    g.as_str().to_string(),
                    format!("{} voice, cluster {k}", g.as_str()),
                    self.text_of(c),
                )
            })
            .collect()
    }

    /// `n` pairs, cluster `i % clusters` for pair `i`. Row `i` of both stores
    /// belongs to record `i`.
    pub fn sample(&self, n: usize, seed: u64, id_prefix: &str) -> PairSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = &self.spec;
        let mut records = Vec::with_capacity(n);
        let mut audio = Vec::with_capacity(n);
        let mut text = Vec::with_capacity(n);
        let mut feats = Vec::with_capacity(n);
        for i in 0..n {
            let k = i % s.clusters;
            let a: Vec<f64> = self.centers[k]
                .iter()
                .map(|c| f32_exact(c + s.spread * normal(&mut rng)))
                .collect();
            let t: Vec<f64> = self
                .text_of(&a)
                .into_iter()
                .map(|v| f32_exact(v + s.text_noise * normal(&mut rng)))
                .collect();
            let g = self.gender(k);
            let f = self.features(k);
            let mut r =
                SegmentRecord::new(format!("{id_prefix}{i:04}"), format!("cluster-{k}"), 5.0);
            r.volume_dbfs = Some(-30.0);
            r.nisqa_mos = Some(3.5);
            r.mlm_score = Some(-3.0);
            r.description = Some(match g {
                Gender::Male => "落ち着いた男性の声".to_string(),
                _ => "明るい女性の声".to_string(),
            });
            r.gender_label = Some(g);
            r.audio_vec_ref = Some(VecRef {
                store: AUDIO_STORE.into(),
                row: i as u32,
            });
            r.text_vec_ref = Some(VecRef {
                store: TEXT_STORE.into(),
                row: i as u32,
            });
            f.write_to(&mut r);
            records.push(r);
            audio.push(a);
            text.push(t);
            feats.push(f);
        }
        PairSet::new(
            records,
            Matrix::from_rows(&audio).expect("rows share a width"),
            Matrix::from_rows(&text).expect("rows share a width"),
            feats,
        )
        .expect("aligned by construction")
    }
}

/// Cluster index recorded in a synthetic record's channel id.
pub fn cluster_of(record: &SegmentRecord) -> Option<usize> {
    record.channel_id.strip_prefix("cluster-")?.parse().ok()
}

pub fn to_store(m: &Matrix) -> VectorStore {
    VectorStore::from_rows(
        m.cols(),
        m.iter_rows()
            .map(|r| r.iter().map(|&v| v as f32).collect::<Vec<f32>>()),
    )
    .expect("finite rows of equal width")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampling_is_seeded_and_balanced() {
        let c = SyntheticCorpus::new(SyntheticSpec::default());
        let a = c.sample(40, 7, "s");
        let b = c.sample(40, 7, "s");
        assert_eq!(a.audio, b.audio);
        assert_eq!(a.text, b.text);
        let male = a
            .records
            .iter()
            .filter(|r| r.gender_label == Some(Gender::Male))
            .count();
        assert_eq!(male, 20);
        assert_eq!(cluster_of(&a.records[6]), Some(2));
    }

    #[test]
    fn store_round_trip_is_exact() {
        let c = SyntheticCorpus::new(SyntheticSpec::default());
        let p = c.sample(5, 1, "s");
        let st = to_store(&p.audio);
        for i in 0..5 {
            assert_eq!(st.row_f64(i).unwrap(), p.audio.row(i));
        }
    }
}
