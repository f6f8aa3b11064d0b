//! Closed-form multiply-add counts for routing, experts and attention.

/// Where the gate decision is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum RoutingMode {
    /// One decision per image from the pooled feature.
    ImageWise,
    /// One decision per token.
    TokenWise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopQuery {
    pub tokens: u64,
    pub dim: u64,
    pub experts: u64,
    pub top_k: u64,
    pub batch: u64,
}

/// Multiply-add tallies for one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FlopReport {
    pub mode: RoutingMode,
    pub tokens: u64,
    pub dim: u64,
    pub experts: u64,
    pub top_k: u64,
    pub batch: u64,
    /// Token pooling for the global feature.
    pub gate_pooling: u64,
    /// Feature × activation matrix.
    pub gate_projection: u64,
    pub gate_total: u64,
    /// `K` activated `C -> 4C -> C` experts on every token.
    pub expert: u64,
    /// QKV, scores, context and output projection.
    pub attention: u64,
}

/// Image-wise gating costs `B·(N·C + C·R)`; token-wise costs `B·N·C·R`.
pub fn count_routing_flops(q: FlopQuery, mode: RoutingMode) -> FlopReport {
    let FlopQuery {
        tokens: n,
        dim: c,
        experts: r,
        top_k: k,
        batch: b,
    } = q;
    let (gate_pooling, gate_projection) = match mode {
        RoutingMode::ImageWise => (b * n * c, b * c * r),
        RoutingMode::TokenWise => (0, b * n * c * r),
    };
    FlopReport {
        mode,
        tokens: n,
        dim: c,
        experts: r,
        top_k: k,
        batch: b,
        gate_pooling,
        gate_projection,
        gate_total: gate_pooling + gate_projection,
        expert: b * n * k * 8 * c * c,
        attention: b * (4 * n * c * c + 2 * n * n * c),
    }
}
