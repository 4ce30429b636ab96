//! Template-grammar synthetic corpora.
//!
//! Captions are built from a fixed phrase bank: `[then] <subject> <verb>
//! <object> <place>`. Each video keeps one subject and usually one place;
//! events after the first open with "then". Snippet features are the
//! caption's bag of phrases pushed through a fixed random linear map plus
//! Gaussian noise, so the caption is recoverable from the features.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::{EventSample, VideoRecord};

const SUBJECTS: [&str; 8] = [
    "a man",
    "a woman",
    "a young boy",
    "a little girl",
    "the chef",
    "an athlete",
    "a dog",
    "two people",
];
const VERBS: [&str; 10] = [
    "is slicing",
    "is holding",
    "is throwing",
    "is washing",
    "is mixing",
    "is riding",
    "is painting",
    "is carrying",
    "is cleaning",
    "is kicking",
];
const OBJECTS: [&str; 10] = [
    "a red ball",
    "the onions",
    "a bicycle",
    "a large bowl",
    "the wooden fence",
    "a green bottle",
    "the car",
    "some dough",
    "a blue kite",
    "the guitar",
];
const PLACES: [&str; 8] = [
    "in the kitchen",
    "on the beach",
    "in a park",
    "on the street",
    "in the yard",
    "at the gym",
    "near the lake",
    "in a garage",
];
const CONNECTIVE: &str = "then";
/// Slot layout of the phrase-count vector: subjects, verbs, objects, places, connective.
const N_PHRASES: usize = SUBJECTS.len() + VERBS.len() + OBJECTS.len() + PLACES.len() + 1;
const PLANT_SEED: u64 = 0x5eed_0f_f1e1d;
const SECONDS_PER_SNIPPET: f64 = 0.64;
const PLACE_KEEP_PROB: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// 3.65 events per video.
    Anet,
    /// 7.7 events per video.
    Youcook,
}

impl Profile {
    pub fn events_per_video(self) -> f64 {
        match self {
            Profile::Anet => 3.65,
            Profile::Youcook => 7.7,
        }
    }
}

impl std::str::FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "anet" => Ok(Profile::Anet),
            "youcook" => Ok(Profile::Youcook),
            other => Err(format!("unknown profile `{other}` (expected anet or youcook)")),
        }
    }
}

/// How many phrases of each slot the generator draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabSpec {
    pub subjects: usize,
    pub verbs: usize,
    pub objects: usize,
    pub places: usize,
}

impl Default for VocabSpec {
    fn default() -> Self {
        Self {
            subjects: SUBJECTS.len(),
            verbs: VERBS.len(),
            objects: OBJECTS.len(),
            places: PLACES.len(),
        }
    }
}

impl VocabSpec {
    fn clamped(self) -> Self {
        Self {
            subjects: self.subjects.clamp(1, SUBJECTS.len()),
            verbs: self.verbs.clamp(1, VERBS.len()),
            objects: self.objects.clamp(1, OBJECTS.len()),
            places: self.places.clamp(1, PLACES.len()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub profile: Profile,
    /// Overrides the profile's events-per-video mean when set.
    pub events_per_video: Option<f64>,
    pub n_videos: usize,
    pub seed: u64,
    pub vocab: VocabSpec,
    /// Spatial positions per snippet.
    pub n_positions: usize,
    pub d_v: usize,
    pub d_img: usize,
    pub noise: f64,
    pub min_snippets: usize,
    pub max_snippets: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            profile: Profile::Anet,
            events_per_video: None,
            n_videos: 200,
            seed: 0,
            vocab: VocabSpec::default(),
            n_positions: 4,
            d_v: 32,
            d_img: 32,
            noise: 0.1,
            min_snippets: 2,
            max_snippets: 12,
        }
    }
}

impl SynthSpec {
    pub fn mean_events(&self) -> f64 {
        self.events_per_video.unwrap_or_else(|| self.profile.events_per_video())
    }

    pub fn generate(&self) -> Vec<VideoRecord> {
        Generator::new(self).run()
    }
}

/// Corpus with default feature widths and the given shape parameters.
pub fn synth_corpus(seed: u64, n_videos: usize, events_per_video_mean: f64, vocab: VocabSpec) -> Vec<VideoRecord> {
    SynthSpec {
        seed,
        n_videos,
        events_per_video: Some(events_per_video_mean),
        vocab,
        ..SynthSpec::default()
    }
    .generate()
}

/// 80/10/10 split in corpus order.
pub fn split_corpus(records: Vec<VideoRecord>) -> (Vec<VideoRecord>, Vec<VideoRecord>, Vec<VideoRecord>) {
    let n = records.len();
    let n_train = n * 8 / 10;
    let n_val = n / 10;
    let mut it = records.into_iter();
    let train = it.by_ref().take(n_train).collect();
    let val = it.by_ref().take(n_val).collect();
    (train, val, it.collect())
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, std).expect("positive std");
    (0..rows)
        .map(|_| (0..cols).map(|_| normal.sample(rng)).collect())
        .collect()
}

struct Generator<'a> {
    spec: &'a SynthSpec,
    vocab: VocabSpec,
    plant_grid: Vec<Vec<f64>>,
    plant_frame: Vec<Vec<f64>>,
}

impl<'a> Generator<'a> {
    fn new(spec: &'a SynthSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(PLANT_SEED);
        let std = 0.5;
        Self {
            spec,
            vocab: spec.vocab.clamped(),
            plant_grid: random_matrix(&mut rng, N_PHRASES, spec.n_positions * spec.d_v, std),
            plant_frame: random_matrix(&mut rng, N_PHRASES, spec.d_img, std),
        }
    }

    fn run(&self) -> Vec<VideoRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        let extra = (self.spec.mean_events() - 1.0).max(0.0);
        let poisson = (extra > 0.0).then(|| Poisson::new(extra).expect("positive rate"));
        (0..self.spec.n_videos)
            .map(|v| {
                let n_events = 1 + poisson.as_ref().map_or(0, |p| p.sample(&mut rng) as usize);
                self.video(format!("synth_{v:05}"), n_events, &mut rng)
            })
            .collect()
    }

    fn video(&self, video_id: String, n_events: usize, rng: &mut ChaCha8Rng) -> VideoRecord {
        let subject = rng.random_range(0..self.vocab.subjects);
        let mut place = rng.random_range(0..self.vocab.places);
        let mut t = rng.random_range(0.0..2.0);
        let mut events = Vec::with_capacity(n_events);
        for e in 0..n_events {
            if e > 0 && !rng.random_bool(PLACE_KEEP_PROB) {
                place = rng.random_range(0..self.vocab.places);
            }
            let verb = rng.random_range(0..self.vocab.verbs);
            let object = rng.random_range(0..self.vocab.objects);
            let slots = [
                subject,
                SUBJECTS.len() + verb,
                SUBJECTS.len() + VERBS.len() + object,
                SUBJECTS.len() + VERBS.len() + OBJECTS.len() + place,
            ];
            let mut phrases: Vec<usize> = slots.to_vec();
            let mut words = Vec::new();
            if e > 0 {
                phrases.push(N_PHRASES - 1);
                words.push(CONNECTIVE);
            }
            words.extend([SUBJECTS[subject], VERBS[verb], OBJECTS[object], PLACES[place]]);
            let n_snippets = rng.random_range(self.spec.min_snippets..=self.spec.max_snippets.max(self.spec.min_snippets));
            let start = t;
            let end = start + n_snippets as f64 * SECONDS_PER_SNIPPET;
            t = end + rng.random_range(0.0..2.0);
            let (snippet_feats, frame_embeds) = self.features(&phrases, n_snippets, rng);
            events.push(EventSample {
                start,
                end,
                caption: words.join(" "),
                snippet_feats,
                frame_embeds,
            });
        }
        VideoRecord { video_id, events }
    }

    #[allow(clippy::type_complexity)]
    fn features(&self, phrases: &[usize], n_snippets: usize, rng: &mut ChaCha8Rng) -> (Vec<Vec<Vec<f64>>>, Vec<Vec<f64>>) {
        let noise = Normal::new(0.0, self.spec.noise.max(0.0)).expect("non-negative noise");
        let planted = |m: &[Vec<f64>]| -> Vec<f64> {
            let mut v = vec![0.0; m[0].len()];
            for &p in phrases {
                v.iter_mut().zip(&m[p]).for_each(|(a, b)| *a += b);
            }
            v
        };
        let grid = planted(&self.plant_grid);
        let frame = planted(&self.plant_frame);
        let (p, dv) = (self.spec.n_positions, self.spec.d_v);
        let mut snippets = Vec::with_capacity(n_snippets);
        let mut frames = Vec::with_capacity(n_snippets);
        for _ in 0..n_snippets {
            let cells = (0..p)
                .map(|i| (0..dv).map(|j| grid[i * dv + j] + noise.sample(rng)).collect())
                .collect();
            snippets.push(cells);
            frames.push(frame.iter().map(|v| v + noise.sample(rng)).collect());
        }
        (snippets, frames)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{tokenize, Vocabulary};

    #[test]
    fn deterministic_under_seed() {
        let a = synth_corpus(3, 20, 3.65, VocabSpec::default());
        let b = synth_corpus(3, 20, 3.65, VocabSpec::default());
        assert_eq!(a, b);
        let c = synth_corpus(4, 20, 3.65, VocabSpec::default());
        assert_ne!(a, c);
    }

    #[test]
    fn records_validate() {
        for rec in synth_corpus(1, 30, 7.7, VocabSpec::default()) {
            rec.validate().unwrap();
            for ev in &rec.events {
                assert!((2..=12).contains(&ev.n_snippets()));
            }
        }
    }

    #[test]
    fn generated_tokens_are_in_vocab() {
        let recs = synth_corpus(9, 40, 3.65, VocabSpec::default());
        let vocab = Vocabulary::build(&recs, 1);
        for ev in recs.iter().flat_map(|r| &r.events) {
            assert!(vocab.encode(&ev.caption).iter().all(|&i| i != crate::data::UNK));
        }
    }

    #[test]
    fn full_bank_fits_sixty_words() {
        let all: std::collections::HashSet<String> = SUBJECTS
            .iter()
            .chain(&VERBS)
            .chain(&OBJECTS)
            .chain(&PLACES)
            .chain(std::iter::once(&CONNECTIVE))
            .flat_map(|p| tokenize(p))
            .collect();
        assert!(all.len() <= 60, "{} words", all.len());
    }

    #[test]
    fn vocab_spec_restricts_phrases() {
        let spec = VocabSpec {
            subjects: 1,
            verbs: 1,
            objects: 1,
            places: 1,
        };
        let recs = synth_corpus(2, 5, 2.0, spec);
        for ev in recs.iter().flat_map(|r| &r.events) {
            assert!(ev.caption.ends_with("a man is slicing a red ball in the kitchen"));
        }
    }

    #[test]
    fn split_is_eighty_ten_ten() {
        let recs = synth_corpus(0, 50, 2.0, VocabSpec::default());
        let (tr, va, te) = split_corpus(recs);
        assert_eq!((tr.len(), va.len(), te.len()), (40, 5, 5));
    }
}
