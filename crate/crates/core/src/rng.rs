//! Seeded random streams.
//!
//! Every consumer of randomness gets its own ChaCha stream derived from the
//! master seed, so adding a node never perturbs the draws of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::engine::NodeId;

pub type SimRng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RngSeed(pub u64);

const TOPOLOGY_STREAM: u64 = 0;
const NODE_STREAM_BASE: u64 = 1 << 32;

impl RngSeed {
    /// Stream used while building the topology (role assignment, vote times).
    pub fn topology(self) -> SimRng {
        self.stream(TOPOLOGY_STREAM)
    }

    /// Per-node stream for behavior draws and link jitter on packets it sends.
    pub fn node(self, node: NodeId) -> SimRng {
        self.stream(NODE_STREAM_BASE + node.0 as u64)
    }

    pub fn stream(self, stream: u64) -> SimRng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.0);
        rng.set_stream(stream);
        rng
    }
}
