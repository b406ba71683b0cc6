//! Analytic per-layer descriptions used for parameter and MAC accounting.

/// What a layer computes, with just enough geometry to count it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerKind {
    /// `positions` = batch x output spatial cells.
    Conv { cin: usize, cout: usize, kernel: Vec<usize>, positions: usize, bias: bool },
    Linear { inp: usize, out: usize, tokens: usize, bias: bool },
    Norm { width: usize },
    Embedding { extents: Vec<usize> },
    /// Multi-head self-attention including its qkv and output projections,
    /// applied to `groups` independent sequences of `tokens` tokens.
    Attention { groups: usize, tokens: usize, dim: usize },
    /// Reshapes, activations, additions: no parameters, no MACs.
    Elementwise,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerDesc {
    pub name: String,
    pub kind: LayerKind,
}

impl LayerDesc {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        Self { name: name.into(), kind }
    }

    pub fn params(&self) -> u64 {
        let p = match &self.kind {
            LayerKind::Conv { cin, cout, kernel, bias, .. } => {
                cout * cin * kernel.iter().product::<usize>() + if *bias { *cout } else { 0 }
            }
            LayerKind::Linear { inp, out, bias, .. } => inp * out + if *bias { *out } else { 0 },
            LayerKind::Norm { width } => 2 * width,
            LayerKind::Embedding { extents } => extents.iter().product(),
            LayerKind::Attention { dim, .. } => 4 * dim * dim + 4 * dim,
            LayerKind::Elementwise => 0,
        };
        p as u64
    }

    pub fn macs(&self) -> u64 {
        match &self.kind {
            LayerKind::Conv { cin, cout, kernel, positions, .. } => {
                (*positions as u64) * (*cout as u64) * (*cin as u64) * kernel.iter().product::<usize>() as u64
            }
            LayerKind::Linear { inp, out, tokens, .. } => (*tokens as u64) * (*inp as u64) * (*out as u64),
            LayerKind::Attention { groups, tokens, dim } => {
                let (n, s) = (*tokens as u64, *dim as u64);
                (*groups as u64) * (3 * n * s * s + 2 * n * n * s + n * s * s)
            }
            LayerKind::Norm { .. } | LayerKind::Embedding { .. } | LayerKind::Elementwise => 0,
        }
    }
}
