use serde::Serialize;

/// Where an executed primitive is attributed in the instrumented count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Bucket {
    /// Patch embedding of visual tokens.
    Embed,
    /// Q/K/V/output projections of visual rows.
    Projection,
    /// Score and aggregation products of visual-row queries.
    Attention,
    /// Both FFN matmuls of visual rows.
    Ffn,
    /// Norms, biases, rotary, softmax and residuals of visual rows.
    LayerOverhead,
    /// Everything the always-recomputed readout row costs inside the layers.
    Readout,
    /// Final norm and action head.
    Head,
    /// Selector and predictor networks.
    Policy,
    /// Block-matching flow estimation.
    Flow,
    /// Losses, mask relaxations, anything else.
    Other,
}

impl Bucket {
    pub const ALL: [Bucket; 10] = [
        Bucket::Embed,
        Bucket::Projection,
        Bucket::Attention,
        Bucket::Ffn,
        Bucket::LayerOverhead,
        Bucket::Readout,
        Bucket::Head,
        Bucket::Policy,
        Bucket::Flow,
        Bucket::Other,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Bucket::Embed => "embed",
            Bucket::Projection => "msa_projection",
            Bucket::Attention => "attention",
            Bucket::Ffn => "ffn",
            Bucket::LayerOverhead => "layer_overhead",
            Bucket::Readout => "readout",
            Bucket::Head => "head",
            Bucket::Policy => "policy",
            Bucket::Flow => "flow",
            Bucket::Other => "other",
        }
    }

    fn index(self) -> usize {
        Bucket::ALL.iter().position(|&b| b == self).unwrap()
    }
}

/// Multiply-accumulates (from matmul/conv) and other elementwise FLOPs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct BucketCount {
    pub macs: u64,
    pub elementwise: u64,
}

impl BucketCount {
    /// FLOPs at two per multiply-accumulate plus elementwise work.
    pub fn flops(&self) -> u64 {
        2 * self.macs + self.elementwise
    }
}

/// Per-trace FLOP counter. Owned by a [`super::Tape`]; there is no global
/// counter.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FlopCounter {
    counts: [BucketCount; 10],
}

impl FlopCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_macs(&mut self, bucket: Bucket, macs: u64) {
        self.counts[bucket.index()].macs += macs;
    }

    pub fn add_elementwise(&mut self, bucket: Bucket, flops: u64) {
        self.counts[bucket.index()].elementwise += flops;
    }

    pub fn get(&self, bucket: Bucket) -> BucketCount {
        self.counts[bucket.index()]
    }

    pub fn merge(&mut self, other: &FlopCounter) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            a.macs += b.macs;
            a.elementwise += b.elementwise;
        }
    }

    pub fn total_flops(&self) -> u64 {
        self.counts.iter().map(BucketCount::flops).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Bucket, BucketCount)> + '_ {
        Bucket::ALL.iter().map(|&b| (b, self.get(b)))
    }
}
