//! The synthetic world generator.
//!
//! A shared token "grammar" (a sparse bigram chain with terminal tokens)
//! and a shared prototype matrix `P` (`V × d_f`) are drawn once. Each
//! client gets an accent transform `M_c = I + σ_rot·G_c` and a token tilt
//! `exp(domain_bias · g_c[v])` that reweights the chain's transitions.
//! Every utterance has exactly one frame per token,
//! `x_t = M_c · P[v_t] + N(0, σ_n²)`, rounded to `f32` precision so the
//! dataset file round-trips exactly.
//!
//! Tokens come in three disjoint roles: initial tokens only start a
//! sentence, terminal tokens only end one, inner tokens fill the middle.
//! Sequence lengths are drawn uniformly from `[min_len, max_len]` and no
//! token repeats within a sentence. A decoder whose step sees only the
//! previous token can therefore find the first frame, the next frame and
//! the end of the sentence without positional information.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ClientDataset, Example};
use crate::error::{Error, Result};
use crate::model::{BOS, FIRST_TOKEN};
use crate::rng::stream_rng;

/// Client id used for the public (pre-training) corpus.
pub const PUBLIC_CLIENT: u32 = u32::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub vocab_size: usize,
    pub feature_dim: usize,
    /// Clients that take part in federation.
    pub num_clients: usize,
    /// Extra held-out clients for generalization runs.
    pub num_invisible: usize,
    /// Train split size per client; a single entry applies to every client.
    pub train_sizes: Vec<usize>,
    pub dev_size: usize,
    pub test_size: usize,
    pub public_train_size: usize,
    pub public_dev_size: usize,
    /// `σ_rot`
    pub accent_strength: f64,
    /// `σ_n`
    pub noise_std: f64,
    pub domain_bias: f64,
    pub min_len: usize,
    pub max_len: usize,
    /// Non-terminal successors per non-terminal token.
    pub branching: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            vocab_size: 32,
            feature_dim: 16,
            num_clients: 4,
            num_invisible: 2,
            train_sizes: vec![240, 200, 160, 120],
            dev_size: 40,
            test_size: 60,
            public_train_size: 1500,
            public_dev_size: 60,
            accent_strength: 0.5,
            noise_std: 0.3,
            domain_bias: 1.5,
            min_len: 3,
            max_len: 8,
            branching: 3,
            seed: 1,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.vocab_size < 4 {
            return bad("vocab_size must be at least 4");
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive");
        }
        if self.num_clients == 0 {
            return bad("num_clients must be at least 1");
        }
        if self.train_sizes.is_empty() || self.train_sizes.contains(&0) {
            return bad("train sizes must be at least 1");
        }
        if self.train_sizes.len() != 1 && self.train_sizes.len() != self.num_clients {
            return bad("train_sizes needs one entry or one per client");
        }
        if self.dev_size == 0 || self.test_size == 0 {
            return bad("dev and test sizes must be at least 1");
        }
        if self.public_train_size == 0 || self.public_dev_size == 0 {
            return bad("public split sizes must be at least 1");
        }
        if !(self.noise_std >= 0.0 && self.accent_strength >= 0.0) {
            return bad("noise_std and accent_strength must be non-negative");
        }
        if !self.domain_bias.is_finite() {
            return bad("domain_bias must be finite");
        }
        if self.min_len == 0 || self.max_len < self.min_len {
            return bad("need 1 <= min_len <= max_len");
        }
        let n_real = self.vocab_size - FIRST_TOKEN as usize;
        if self.max_len > 1 {
            let n_inner = n_real.saturating_sub(2 * (n_real / 4).max(1));
            if n_real < 3 || n_inner + 2 < self.max_len {
                return bad("vocabulary too small for max_len without repeated tokens");
            }
        }
        Ok(())
    }

    /// Train size of visible client `i` (invisible clients use the first entry).
    pub fn train_size(&self, i: usize) -> usize {
        *self.train_sizes.get(i).unwrap_or(&self.train_sizes[0])
    }
}

/// Where a token may appear in a sentence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenRole {
    /// BOS, EOS and PAD.
    Reserved,
    /// Only ever first.
    Initial,
    /// Only ever strictly inside.
    Inner,
    /// Only ever last.
    Terminal,
}

/// The shared bigram chain over ordinary tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Grammar {
    pub roles: Vec<TokenRole>,
    /// `(next, base weight)` pairs for each previous token (BOS included).
    pub successors: Vec<Vec<(u32, f64)>>,
}

impl Grammar {
    fn generate<R: Rng + ?Sized>(vocab_size: usize, branching: usize, rng: &mut R) -> Self {
        let mut real: Vec<u32> = (FIRST_TOKEN..vocab_size as u32).collect();
        real.shuffle(rng);
        let n_real = real.len();
        let n_term = (n_real / 4).max(1);
        let n_init = if n_real >= 3 { (n_real / 4).max(1) } else { 0 };
        let mut roles = vec![TokenRole::Reserved; vocab_size];
        for (i, &v) in real.iter().enumerate() {
            roles[v as usize] = if i < n_term {
                TokenRole::Terminal
            } else if i < n_term + n_init {
                TokenRole::Initial
            } else {
                TokenRole::Inner
            };
        }
        let of = |role: TokenRole| -> Vec<u32> {
            (FIRST_TOKEN..vocab_size as u32)
                .filter(|&v| roles[v as usize] == role)
                .collect()
        };
        let (initials, inner, terminals) = (of(TokenRole::Initial), of(TokenRole::Inner), of(TokenRole::Terminal));

        let weight = |rng: &mut R| rng.random_range(0.5..1.5);
        let mut successors = vec![Vec::new(); vocab_size];
        let mut starts: Vec<u32> = initials.iter().chain(&terminals).copied().collect();
        starts.sort_unstable();
        successors[BOS as usize] = starts.iter().map(|&v| (v, weight(rng))).collect();
        for &v in initials.iter().chain(&inner) {
            let mut pool: Vec<u32> = inner.iter().copied().filter(|&u| u != v).collect();
            pool.shuffle(rng);
            pool.truncate(branching.max(1));
            let mut ends = terminals.clone();
            ends.shuffle(rng);
            ends.truncate(2);
            let mut next: Vec<u32> = pool.into_iter().chain(ends).collect();
            next.sort_unstable();
            successors[v as usize] = next.into_iter().map(|u| (u, weight(rng))).collect();
        }
        Grammar { roles, successors }
    }

    pub fn role(&self, v: u32) -> TokenRole {
        self.roles[v as usize]
    }
}

/// What makes one client different from the others.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientProfile {
    pub client_id: u32,
    /// `M_c`, `d_f × d_f`
    pub accent: Array2<f64>,
    /// Per-token multiplicative tilt on transition weights.
    pub tilt: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub grammar: Grammar,
    /// `P`, `V × d_f`
    pub prototypes: Array2<f64>,
    pub clients: Vec<ClientDataset>,
    pub invisible: Vec<ClientDataset>,
    /// Unaccented, untilted corpus for backbone pre-training (its `test`
    /// split is empty).
    pub public: ClientDataset,
    /// Profiles of visible then invisible clients.
    pub profiles: Vec<ClientProfile>,
}

fn client_profile(config: &WorldConfig, client_id: u32) -> ClientProfile {
    let df = config.feature_dim;
    let mut rng = stream_rng(config.seed, "accent", &[u64::from(client_id)]);
    let scale = config.accent_strength / (df as f64).sqrt();
    let accent = Array2::from_shape_fn((df, df), |(i, j)| {
        let z: f64 = StandardNormal.sample(&mut rng);
        f64::from(u8::from(i == j)) + scale * z
    });
    let mut rng = stream_rng(config.seed, "domain", &[u64::from(client_id)]);
    let tilt = (0..config.vocab_size)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (config.domain_bias * z).exp()
        })
        .collect();
    ClientProfile {
        client_id,
        accent,
        tilt,
    }
}

fn neutral_profile(config: &WorldConfig) -> ClientProfile {
    ClientProfile {
        client_id: PUBLIC_CLIENT,
        accent: Array2::eye(config.feature_dim),
        tilt: vec![1.0; config.vocab_size],
    }
}

fn draw<R: Rng + ?Sized>(options: &[(u32, f64)], rng: &mut R) -> u32 {
    let total: f64 = options.iter().map(|(_, w)| w).sum();
    let mut u = rng.random::<f64>() * total;
    for &(v, w) in options {
        if u < w {
            return v;
        }
        u -= w;
    }
    options[options.len() - 1].0
}

fn sample_tokens<R: Rng + ?Sized>(
    config: &WorldConfig,
    grammar: &Grammar,
    profile: &ClientProfile,
    rng: &mut R,
) -> Vec<u32> {
    let len = rng.random_range(config.min_len..=config.max_len);
    let mut tokens: Vec<u32> = Vec::with_capacity(len);
    let mut prev = BOS;
    for pos in 1..=len {
        let wanted = if pos == len {
            TokenRole::Terminal
        } else if pos == 1 {
            TokenRole::Initial
        } else {
            TokenRole::Inner
        };
        let tilted = |v: u32, w: f64| (v, w * profile.tilt[v as usize]);
        let fresh = |v: &u32| !tokens.contains(v);
        let mut options: Vec<(u32, f64)> = grammar.successors[prev as usize]
            .iter()
            .filter(|(v, _)| grammar.role(*v) == wanted && fresh(v))
            .map(|&(v, w)| tilted(v, w))
            .collect();
        let mut last = pos == len;
        if options.is_empty() && wanted == TokenRole::Inner {
            // Dead end: every inner successor is already used.
            options = (FIRST_TOKEN..config.vocab_size as u32)
                .filter(|v| grammar.role(*v) == TokenRole::Inner && fresh(v))
                .map(|v| tilted(v, 1.0))
                .collect();
        }
        if options.is_empty() {
            options = grammar.successors[prev as usize]
                .iter()
                .filter(|(v, _)| grammar.role(*v) == TokenRole::Terminal)
                .map(|&(v, w)| tilted(v, w))
                .collect();
            last = true;
        }
        let next = draw(&options, rng);
        tokens.push(next);
        if last {
            break;
        }
        prev = next;
    }
    tokens
}

fn sample_example<R: Rng + ?Sized>(
    config: &WorldConfig,
    grammar: &Grammar,
    prototypes: &Array2<f64>,
    profile: &ClientProfile,
    rng: &mut R,
) -> Example {
    let tokens = sample_tokens(config, grammar, profile, rng);
    let noise = Normal::new(0.0, config.noise_std).expect("noise_std validated");
    let df = config.feature_dim;
    let mut frames = Array2::zeros((tokens.len(), df));
    for (mut row, &v) in frames.outer_iter_mut().zip(&tokens) {
        let clean: Array1<f64> = profile.accent.dot(&prototypes.row(v as usize));
        for (x, c) in row.iter_mut().zip(clean.iter()) {
            let n: f64 = if config.noise_std > 0.0 {
                noise.sample(rng)
            } else {
                0.0
            };
            *x = f64::from((c + n) as f32);
        }
    }
    Example { frames, tokens }
}

fn sample_split(
    config: &WorldConfig,
    grammar: &Grammar,
    prototypes: &Array2<f64>,
    profile: &ClientProfile,
    split: u64,
    count: usize,
) -> Vec<Example> {
    let mut rng = stream_rng(
        config.seed,
        "examples",
        &[u64::from(profile.client_id), split],
    );
    (0..count)
        .map(|_| sample_example(config, grammar, prototypes, profile, &mut rng))
        .collect()
}

fn client_dataset(
    config: &WorldConfig,
    grammar: &Grammar,
    prototypes: &Array2<f64>,
    profile: &ClientProfile,
    train: usize,
    dev: usize,
    test: usize,
) -> ClientDataset {
    ClientDataset {
        client_id: profile.client_id,
        train: sample_split(config, grammar, prototypes, profile, 0, train),
        dev: sample_split(config, grammar, prototypes, profile, 1, dev),
        test: sample_split(config, grammar, prototypes, profile, 2, test),
    }
}

/// Draws the whole world. A pure function of `config`.
pub fn generate_world(config: &WorldConfig) -> Result<World> {
    config.validate()?;
    let grammar = Grammar::generate(
        config.vocab_size,
        config.branching,
        &mut stream_rng(config.seed, "grammar", &[]),
    );
    let mut rng = stream_rng(config.seed, "prototypes", &[]);
    let prototypes = Array2::from_shape_fn((config.vocab_size, config.feature_dim), |_| {
        StandardNormal.sample(&mut rng)
    });

    let total = config.num_clients + config.num_invisible;
    let profiles: Vec<ClientProfile> = (0..total as u32)
        .map(|c| client_profile(config, c))
        .collect();
    let datasets: Vec<ClientDataset> = profiles
        .iter()
        .enumerate()
        .map(|(i, p)| {
            client_dataset(
                config,
                &grammar,
                &prototypes,
                p,
                config.train_size(i),
                config.dev_size,
                config.test_size,
            )
        })
        .collect();
    let public = client_dataset(
        config,
        &grammar,
        &prototypes,
        &neutral_profile(config),
        config.public_train_size,
        config.public_dev_size,
        0,
    );
    let mut clients = datasets;
    let invisible = clients.split_off(config.num_clients);
    Ok(World {
        config: config.clone(),
        grammar,
        prototypes,
        clients,
        invisible,
        public,
        profiles,
    })
}
