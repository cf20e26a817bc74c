//! Seeded observation streams.
//!
//! Every stream is driven by a ChaCha8 generator (a counter-based cipher
//! stream) keyed from a `(master_seed, replication_index)` pair through a
//! bijective 128-bit mix. Within one build the streams are bit-exact; the
//! algorithm is simple enough to re-implement elsewhere.
//!
//! Draw order per observation: i.i.d. mode draws the state, then the reward
//! atom, then the successor; Markov mode draws the reward atom, then the
//! successor. Each draw consumes one `f64` from the generator.

use std::io::Write;
use std::sync::Arc;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mrp_model::{stationary_distribution, FiniteMrp};

/// One transition tuple. The action is folded into the reward atom.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub s: usize,
    pub reward: f64,
    pub s_next: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedSpec {
    pub master_seed: u64,
    pub replication_index: u64,
}

impl SeedSpec {
    pub fn new(master_seed: u64, replication_index: u64) -> Self {
        Self { master_seed, replication_index }
    }

    /// The 32-byte ChaCha key for this stream.
    pub fn stream_key(&self) -> [u8; 32] {
        split_seed(self.master_seed, self.replication_index)
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::from_seed(self.stream_key())
    }

    /// A child spec whose master seed is derived from this stream; used when
    /// one replication needs a family of independent sub-streams.
    pub fn child(&self, index: u64) -> SeedSpec {
        let key = self.stream_key();
        let master = u64::from_le_bytes(key[16..24].try_into().expect("8 bytes"));
        SeedSpec::new(master, index)
    }
}

const MIX_K1: u128 = 0x9E37_79B9_7F4A_7C15_F39C_C060_5CED_C835;
const MIX_K2: u128 = 0xD6E8_FEB8_6659_FD93_A5B3_C3B1_E1C5_A2E9;
const MIX_SALT: u128 = 0x6A09_E667_F3BC_C908_BB67_AE85_84CA_A73B;

/// Bijection on `u128` (xorshift / odd-multiply rounds).
fn mix128(mut x: u128) -> u128 {
    x ^= x >> 64;
    x = x.wrapping_mul(MIX_K1);
    x ^= x >> 61;
    x = x.wrapping_mul(MIX_K2);
    x ^= x >> 67;
    x
}

/// Derives a stream key from `(master, index)`.
///
/// The pair is packed into one `u128` and pushed through a bijective mix, so
/// distinct pairs can never share the first 16 key bytes.
pub fn split_seed(master: u64, index: u64) -> [u8; 32] {
    let packed = ((master as u128) << 64) | index as u128;
    let head = mix128(packed);
    let tail = mix128(head ^ MIX_SALT);
    let mut key = [0u8; 32];
    key[..16].copy_from_slice(&head.to_le_bytes());
    key[16..].copy_from_slice(&tail.to_le_bytes());
    key
}

/// Inverse-CDF sampler over a finite support with nonzero weights only.
#[derive(Clone, Debug)]
pub struct Categorical {
    support: Vec<usize>,
    cdf: Vec<f64>,
}

impl Categorical {
    pub fn new(weights: impl IntoIterator<Item = f64>) -> Self {
        let mut support = Vec::new();
        let mut cdf = Vec::new();
        let mut acc = 0.0;
        for (i, w) in weights.into_iter().enumerate() {
            if w > 0.0 {
                acc += w;
                support.push(i);
                cdf.push(acc);
            }
        }
        assert!(!support.is_empty(), "categorical with no positive weight");
        Self { support, cdf }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let total = *self.cdf.last().expect("nonempty");
        let u = rng.random::<f64>() * total;
        let k = self.cdf.partition_point(|&c| c <= u).min(self.cdf.len() - 1);
        self.support[k]
    }
}

/// Precomputed per-state categorical tables shared across replications.
#[derive(Debug)]
pub struct SamplingTables {
    num_states: usize,
    stationary: Option<Categorical>,
    transitions: Vec<Categorical>,
    rewards: Vec<Categorical>,
    reward_values: Vec<Vec<f64>>,
}

impl SamplingTables {
    pub fn new(mrp: &FiniteMrp, mu: Option<&DVector<f64>>) -> Self {
        let s = mrp.num_states();
        let transitions = (0..s).map(|i| Categorical::new(mrp.transition().row(i).iter().copied())).collect();
        let rewards = mrp
            .reward_support()
            .iter()
            .map(|atoms| Categorical::new(atoms.iter().map(|&(_, p)| p)))
            .collect();
        let reward_values = mrp.reward_support().iter().map(|atoms| atoms.iter().map(|&(v, _)| v).collect()).collect();
        Self {
            num_states: s,
            stationary: mu.map(|m| Categorical::new(m.iter().copied())),
            transitions,
            rewards,
            reward_values,
        }
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    #[inline]
    fn draw_reward<R: Rng>(&self, s: usize, rng: &mut R) -> f64 {
        self.reward_values[s][self.rewards[s].sample(rng)]
    }

    #[inline]
    fn draw_next<R: Rng>(&self, s: usize, rng: &mut R) -> usize {
        self.transitions[s].sample(rng)
    }
}

/// Independent tuples `s ~ μ`, `r ~ R(s)`, `s' ~ P(·|s)`.
#[derive(Debug)]
pub struct IidSampler {
    tables: Arc<SamplingTables>,
    rng: ChaCha8Rng,
}

impl IidSampler {
    pub fn new(mrp: &FiniteMrp, mu: &DVector<f64>, seed: SeedSpec) -> Self {
        Self::with_tables(Arc::new(SamplingTables::new(mrp, Some(mu))), seed)
    }

    /// Panics if `tables` were built without a stationary distribution.
    pub fn with_tables(tables: Arc<SamplingTables>, seed: SeedSpec) -> Self {
        assert!(tables.stationary.is_some(), "i.i.d. sampling needs the stationary law");
        Self { tables, rng: seed.rng() }
    }
}

impl Iterator for IidSampler {
    type Item = Observation;

    #[inline]
    fn next(&mut self) -> Option<Observation> {
        let t = &*self.tables;
        let s = t.stationary.as_ref().expect("checked in constructor").sample(&mut self.rng);
        let reward = t.draw_reward(s, &mut self.rng);
        let s_next = t.draw_next(s, &mut self.rng);
        Some(Observation { s, reward, s_next })
    }
}

pub fn iid_sampler(mrp: &FiniteMrp, mu: &DVector<f64>, seed: SeedSpec) -> IidSampler {
    IidSampler::new(mrp, mu, seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialState {
    State(usize),
    Stationary,
}

/// Single trajectory `s_{k+1} ~ P(·|s_k)`; observation k is
/// `(s_k, r ~ R(s_k), s_{k+1})`.
#[derive(Debug)]
pub struct MarkovSampler {
    tables: Arc<SamplingTables>,
    state: usize,
    rng: ChaCha8Rng,
}

impl MarkovSampler {
    pub fn with_tables(tables: Arc<SamplingTables>, initial: InitialState, seed: SeedSpec) -> Result<Self> {
        let mut rng = seed.rng();
        let state = match initial {
            InitialState::State(i) if i < tables.num_states => i,
            InitialState::State(i) => {
                return Err(Error::InvalidArgument(format!(
                    "initial state {i} out of range for {} states",
                    tables.num_states
                )))
            }
            InitialState::Stationary => match &tables.stationary {
                Some(c) => c.sample(&mut rng),
                None => {
                    return Err(Error::InvalidArgument(
                        "stationary start requested but tables carry no stationary law".into(),
                    ))
                }
            },
        };
        Ok(Self { tables, state, rng })
    }

    pub fn current_state(&self) -> usize {
        self.state
    }
}

impl Iterator for MarkovSampler {
    type Item = Observation;

    #[inline]
    fn next(&mut self) -> Option<Observation> {
        let t = &*self.tables;
        let s = self.state;
        let reward = t.draw_reward(s, &mut self.rng);
        let s_next = t.draw_next(s, &mut self.rng);
        self.state = s_next;
        Some(Observation { s, reward, s_next })
    }
}

pub fn markov_sampler(mrp: &FiniteMrp, initial: InitialState, seed: SeedSpec) -> Result<MarkovSampler> {
    let mu = match initial {
        InitialState::Stationary => Some(stationary_distribution(mrp)?),
        InitialState::State(_) => None,
    };
    let tables = Arc::new(SamplingTables::new(mrp, mu.as_ref()));
    MarkovSampler::with_tables(tables, initial, seed)
}

/// Writes `(s, reward, s_next)` rows with a header, for auditing a stream.
pub fn write_trajectory_csv<W: Write>(mut w: W, observations: impl IntoIterator<Item = Observation>) -> Result<()> {
    writeln!(w, "s,reward,s_next")?;
    for o in observations {
        writeln!(w, "{},{},{}", o.s, crate::fmt_f64(o.reward), o.s_next)?;
    }
    Ok(())
}
