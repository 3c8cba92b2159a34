//! Named random substreams derived from a single master seed.
//!
//! Every consumer of randomness asks for a stream by `(run, phase, index)`,
//! so changing how many draws one phase makes never shifts another phase.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// The purpose a substream is drawn for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Phase {
    Reliability = 1,
    BaselinePartition = 2,
    ClientInit = 3,
    ServerInit = 4,
    BatchShuffle = 5,
    TrainAvailability = 6,
    EvalAvailability = 7,
    TestAvailability = 8,
    DatasetSplit = 9,
    Synthetic = 10,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed source for one simulation run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedTree {
    master: u64,
    run: u64,
}

impl SeedTree {
    pub fn new(master: u64) -> Self {
        Self { master, run: 0 }
    }

    pub fn for_run(master: u64, run: u64) -> Self {
        Self { master, run }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    pub fn run(&self) -> u64 {
        self.run
    }

    pub fn seed(&self, phase: Phase, index: u64) -> u64 {
        let mut h = splitmix64(self.master);
        h = splitmix64(h ^ self.run);
        h = splitmix64(h ^ phase as u64);
        splitmix64(h ^ index)
    }

    pub fn stream(&self, phase: Phase, index: u64) -> SimRng {
        SimRng::seed_from_u64(self.seed(phase, index))
    }
}
