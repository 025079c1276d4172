use std::collections::HashSet;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::note::{BehaviorEvent, Note, NoteId, LONG_NOTE_TOKENS, SHORT_NOTE_TOKENS};
use crate::error::{Error, Result};
use crate::text::{template_len, tokenize, truncate_note, PromptKind, MAX_PROMPT_TOKENS};

/// Knobs of the synthetic corpus. Everything except the first four fields
/// has a sensible default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_notes: usize,
    pub n_clusters: usize,
    /// Probability that a note's image comes from its own text cluster.
    pub rho: f64,
    /// Sub-topics per cluster; behavior concentrates within a theme.
    pub themes: usize,
    pub patches: usize,
    pub d_raw: usize,
    /// Spread of per-theme offsets around the cluster prototype.
    pub theme_spread: f64,
    /// Per-note pixel noise.
    pub image_noise: f64,
    /// Users per note.
    pub users_per_note: f64,
    /// Clicks per user are drawn uniformly from this inclusive range.
    pub clicks_per_user: (usize, usize),
    /// Probability that a click lands on a uniformly random note.
    pub click_noise: f64,
    pub short_fraction: f64,
    pub long_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 42,
            n_notes: 2000,
            n_clusters: 5,
            rho: 1.0,
            themes: 8,
            patches: 16,
            d_raw: 32,
            theme_spread: 0.6,
            image_noise: 0.5,
            users_per_note: 1.0,
            clicks_per_user: (4, 16),
            click_noise: 0.02,
            short_fraction: 0.1,
            long_fraction: 0.1,
        }
    }
}

impl SynthConfig {
    pub fn new(seed: u64, n_notes: usize, n_clusters: usize, rho: f64) -> Self {
        SynthConfig {
            seed,
            n_notes,
            n_clusters,
            rho,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_clusters < 2 {
            return bad(format!("need at least 2 clusters, got {}", self.n_clusters));
        }
        if self.n_notes < 2 * self.n_clusters {
            return bad(format!(
                "{} notes cannot fill {} clusters (need at least {})",
                self.n_notes,
                self.n_clusters,
                2 * self.n_clusters
            ));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return bad(format!("rho must lie in [0, 1], got {}", self.rho));
        }
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.click_noise)
            || !unit(self.short_fraction)
            || !unit(self.long_fraction)
            || self.short_fraction + self.long_fraction > 1.0
        {
            return bad("click_noise and length fractions must be probabilities".into());
        }
        if self.themes == 0 || self.patches == 0 || self.d_raw == 0 {
            return bad("themes, patches and d_raw must be positive".into());
        }
        let (lo, hi) = self.clicks_per_user;
        if lo < 1 || lo > hi {
            return bad(format!("invalid clicks_per_user range {lo}..={hi}"));
        }
        if !(self.theme_spread >= 0.0 && self.image_noise >= 0.0 && self.users_per_note > 0.0) {
            return bad("spreads must be non-negative and users_per_note positive".into());
        }
        Ok(())
    }
}

/// Generated corpus plus the latent labels that produced it.
#[derive(Clone, Debug)]
pub struct SynthData {
    pub notes: Vec<Note>,
    pub events: Vec<BehaviorEvent>,
    /// Text cluster of each note (index-aligned with `notes`).
    pub text_cluster: Vec<usize>,
    /// Cluster whose prototype the image was drawn from.
    pub image_cluster: Vec<usize>,
    /// Theme within the text cluster.
    pub theme: Vec<usize>,
}

impl SynthData {
    pub fn cluster_of(&self, id: NoteId) -> Option<usize> {
        self.notes
            .iter()
            .position(|n| n.id == id)
            .map(|i| self.text_cluster[i])
    }
}

struct Lexicon {
    common: Vec<String>,
    cluster: Vec<Vec<String>>,
    theme: Vec<Vec<Vec<String>>>,
    cluster_topic: Vec<Vec<String>>,
    theme_topic: Vec<Vec<String>>,
}

const ONSETS: &[&str] = &[
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "st", "tr", "pl",
    "gr", "sh",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];

fn fresh_word(rng: &mut ChaCha8Rng, taken: &mut HashSet<String>) -> String {
    loop {
        let syllables = rng.random_range(2..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(ONSETS.choose(rng).unwrap());
            w.push_str(VOWELS.choose(rng).unwrap());
        }
        if taken.insert(w.clone()) {
            return w;
        }
    }
}

fn word_pool(rng: &mut ChaCha8Rng, taken: &mut HashSet<String>, n: usize) -> Vec<String> {
    (0..n).map(|_| fresh_word(rng, taken)).collect()
}

impl Lexicon {
    fn new(rng: &mut ChaCha8Rng, clusters: usize, themes: usize) -> Self {
        let mut taken = HashSet::new();
        let common = word_pool(rng, &mut taken, 60);
        let cluster = (0..clusters)
            .map(|_| word_pool(rng, &mut taken, 30))
            .collect();
        let theme = (0..clusters)
            .map(|_| {
                (0..themes)
                    .map(|_| word_pool(rng, &mut taken, 12))
                    .collect()
            })
            .collect();
        let cluster_topic = (0..clusters)
            .map(|_| word_pool(rng, &mut taken, 3))
            .collect();
        let theme_topic = (0..clusters)
            .map(|_| word_pool(rng, &mut taken, themes))
            .collect();
        Lexicon {
            common,
            cluster,
            theme,
            cluster_topic,
            theme_topic,
        }
    }

    /// Draws a word: theme with probability `pt`, cluster with `pc`, common otherwise.
    fn word(&self, rng: &mut ChaCha8Rng, c: usize, t: usize, pt: f64, pc: f64) -> &str {
        let u: f64 = rng.random();
        let pool = if u < pt {
            &self.theme[c][t]
        } else if u < pt + pc {
            &self.cluster[c]
        } else {
            &self.common
        };
        pool.choose(rng).unwrap()
    }
}

fn total_len(title: &str, topics: &[String], content: &str) -> usize {
    tokenize(title).len() + tokenize(&topics.join(", ")).len() + tokenize(content).len()
}

fn fits_prompt(note: &Note) -> bool {
    template_len(PromptKind::Micl) + truncate_note(note).token_len() <= MAX_PROMPT_TOKENS
}

/// Deterministic clustered corpus: text and images share cluster structure
/// (with correlation `rho`) and users click within a theme.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (k, th) = (cfg.n_clusters, cfg.themes);
    let lex = Lexicon::new(&mut rng, k, th);

    let unit = Normal::new(0.0, 1.0).unwrap();
    let proto: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            (0..cfg.patches * cfg.d_raw)
                .map(|_| unit.sample(&mut rng))
                .collect()
        })
        .collect();
    let offset: Vec<Vec<Vec<f64>>> = (0..k)
        .map(|_| {
            (0..th)
                .map(|_| {
                    (0..cfg.patches * cfg.d_raw)
                        .map(|_| cfg.theme_spread * unit.sample(&mut rng))
                        .collect()
                })
                .collect()
        })
        .collect();

    let mut notes = Vec::with_capacity(cfg.n_notes);
    let (mut text_cluster, mut image_cluster, mut theme) = (vec![], vec![], vec![]);
    for i in 0..cfg.n_notes {
        // Round-robin over clusters guarantees every cluster has >= 2 notes.
        let c = i % k;
        let t = rng.random_range(0..th);
        let u: f64 = rng.random();
        let target = if u < cfg.short_fraction {
            rng.random_range(24..=SHORT_NOTE_TOKENS - 3)
        } else if u < cfg.short_fraction + cfg.long_fraction {
            rng.random_range(LONG_NOTE_TOKENS + 5..=LONG_NOTE_TOKENS + 60)
        } else {
            rng.random_range(SHORT_NOTE_TOKENS + 2..=76)
        };

        let title_words = rng.random_range(3..=7);
        let title: Vec<&str> = (0..title_words)
            .map(|_| lex.word(&mut rng, c, t, 0.5, 0.3))
            .collect();
        let title = title.join(" ");
        let mut topics = vec![lex.cluster_topic[c].choose(&mut rng).unwrap().clone()];
        if rng.random_bool(0.7) {
            topics.push(lex.theme_topic[c][t].clone());
        }
        // Generated words are single tokens and each '.' adds one more.
        let mut len = total_len(&title, &topics, "");
        let mut content = String::new();
        let mut sentence = 0;
        while len < target {
            if !content.is_empty() {
                content.push(' ');
            }
            content.push_str(lex.word(&mut rng, c, t, 0.25, 0.25));
            len += 1;
            sentence += 1;
            if sentence >= 6 && rng.random_bool(0.2) {
                content.push('.');
                len += 1;
                sentence = 0;
            }
        }
        debug_assert_eq!(len, total_len(&title, &topics, &content));

        let ic = if rng.random_bool(cfg.rho) {
            c
        } else {
            rng.random_range(0..k)
        };
        let it = if ic == c { t } else { rng.random_range(0..th) };
        let noise = Normal::new(0.0, cfg.image_noise.max(f64::MIN_POSITIVE)).unwrap();
        let flat: Vec<f64> = (0..cfg.patches * cfg.d_raw)
            .map(|j| {
                let n = if cfg.image_noise > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                ((proto[ic][j] + offset[ic][it][j] + n) * 1e4).round() / 1e4
            })
            .collect();
        let image = flat.chunks(cfg.d_raw).map(|r| r.to_vec()).collect();

        let note = Note {
            id: i as NoteId,
            title,
            topics,
            content,
            image,
        };
        if !fits_prompt(&note) {
            return Err(Error::Data(format!(
                "generated note {i} exceeds the prompt budget"
            )));
        }
        notes.push(note);
        text_cluster.push(c);
        image_cluster.push(ic);
        theme.push(t);
    }

    // Members of each (cluster, theme), for user behavior.
    let mut members = vec![vec![Vec::new(); th]; k];
    for i in 0..cfg.n_notes {
        members[text_cluster[i]][theme[i]].push(i);
    }
    let n_users = ((cfg.n_notes as f64) * cfg.users_per_note).ceil() as u64;
    let mut events = Vec::new();
    for user in 0..n_users {
        let c = rng.random_range(0..k);
        let t = rng.random_range(0..th);
        let own = if members[c][t].len() >= 2 {
            &members[c][t]
        } else {
            // Tiny corpora may leave a theme nearly empty; fall back to the cluster.
            let all: Vec<usize> = (0..cfg.n_notes).filter(|&i| text_cluster[i] == c).collect();
            members[c][t] = all;
            &members[c][t]
        };
        let clicks = rng.random_range(cfg.clicks_per_user.0..=cfg.clicks_per_user.1);
        for _ in 0..clicks {
            let viewed = *own.choose(&mut rng).unwrap();
            let clicked = if rng.random_bool(cfg.click_noise) {
                rng.random_range(0..cfg.n_notes)
            } else {
                *own.choose(&mut rng).unwrap()
            };
            if clicked != viewed {
                events.push(BehaviorEvent {
                    user_id: user,
                    viewed: viewed as NoteId,
                    clicked: clicked as NoteId,
                });
            }
        }
    }

    Ok(SynthData {
        notes,
        events,
        text_cluster,
        image_cluster,
        theme,
    })
}
