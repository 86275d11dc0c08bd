//! Counter-based random streams.
//!
//! Each stream is keyed by `(master seed, purpose, agent, iteration, index)`
//! and seeds its own ChaCha generator, so draws for one agent never depend
//! on how many draws another agent made or on the order agents are visited.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// What a stream is used for. Distinct purposes give independent streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Direction,
    UpperNoise,
    LowerInit,
    LowerNoiseMinus,
    LowerNoisePlus,
    AgentInit,
    Evaluation,
    EvaluationInit,
    EvaluationNoise,
    Graph,
    RunSeed,
    Problem,
    Test,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Direction => 1,
            Purpose::UpperNoise => 2,
            Purpose::LowerInit => 3,
            Purpose::LowerNoiseMinus => 5,
            Purpose::LowerNoisePlus => 6,
            Purpose::AgentInit => 7,
            Purpose::Evaluation => 8,
            Purpose::EvaluationInit => 9,
            Purpose::EvaluationNoise => 10,
            Purpose::Graph => 11,
            Purpose::RunSeed => 12,
            Purpose::Problem => 13,
            Purpose::Test => 14,
        }
    }
}

/// Address of one stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamKey {
    pub master: u64,
    pub purpose: Purpose,
    pub agent: u64,
    pub iteration: u64,
    pub index: u64,
}

impl StreamKey {
    pub fn new(master: u64, purpose: Purpose) -> Self {
        StreamKey { master, purpose, agent: 0, iteration: 0, index: 0 }
    }

    pub fn agent(mut self, agent: usize) -> Self {
        self.agent = agent as u64;
        self
    }

    pub fn iteration(mut self, iteration: usize) -> Self {
        self.iteration = iteration as u64;
        self
    }

    pub fn index(mut self, index: usize) -> Self {
        self.index = index as u64;
        self
    }

    /// 256-bit ChaCha key derived from all fields.
    fn key_bytes(&self) -> [u8; 32] {
        let mut state = splitmix64(self.master ^ 0x5EED_0F_D15C0);
        let fields = [self.purpose.tag(), self.agent, self.iteration, self.index];
        for f in fields {
            state = splitmix64(state ^ splitmix64(f.wrapping_add(0x9E37_79B9_7F4A_7C15)));
        }
        let mut out = [0u8; 32];
        let mut s = state;
        for chunk in out.chunks_exact_mut(8) {
            s = splitmix64(s);
            chunk.copy_from_slice(&s.to_le_bytes());
        }
        out
    }

    pub fn rng(&self) -> StreamRng {
        ChaCha8Rng::from_seed(self.key_bytes())
    }

    /// A derived 64-bit seed, for handing to code that takes a plain seed.
    pub fn seed(&self) -> u64 {
        u64::from_le_bytes(self.key_bytes()[..8].try_into().unwrap())
    }
}

/// Convenience constructor for a one-off stream.
pub fn stream(master: u64, purpose: Purpose, agent: usize, iteration: usize, index: usize) -> StreamRng {
    StreamKey::new(master, purpose).agent(agent).iteration(iteration).index(index).rng()
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
