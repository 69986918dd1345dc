//! Learnable components: parameter storage, MLPs, the PointNet global
//! encoder, patch token embedding, positional embeddings, pre-norm
//! Transformer stacks, the patch decoder and the fc / folding heads.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Scalar, Tensor, Var};
use crate::corruption::MaskPlan;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// A trainable tensor with its AdamW moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

/// Owns every parameter of a model, in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
}

/// Graph handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let n = value.numel();
        self.params.push(Parameter {
            name: name.into(),
            value,
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
        });
        ParamId(self.params.len() - 1)
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Inserts every parameter into `g` as a gradient-tracking leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| g.input(p.value.clone())).collect(),
        }
    }

    /// Inserts every parameter as a constant (inference).
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| g.constant(p.value.clone())).collect(),
        }
    }

    /// Gradients after `g.backward`, zero-filled for unreachable params.
    pub fn grads(&self, g: &Graph<T>, bound: &Bound) -> Vec<Vec<T>> {
        self.params
            .iter()
            .zip(bound.vars())
            .map(|(p, &v)| {
                g.grad(v)
                    .map(|s| s.to_vec())
                    .unwrap_or_else(|| vec![T::zero(); p.value.numel()])
            })
            .collect()
    }

    /// Same parameter values in another precision (moments reset).
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for p in &self.params {
            let data = p.value.data.iter().map(|v| U::lit(v.to_f64().unwrap())).collect();
            out.add(p.name.clone(), Tensor { shape: p.value.shape.clone(), data });
        }
        out
    }
}

/// Deterministic initializer handed to every constructor.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn uniform<T: Scalar>(&mut self, shape: Vec<usize>, bound: f64) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::lit(bound * (2.0 * self.rng.random::<f64>() - 1.0)))
            .collect();
        Tensor { shape, data }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

fn activate<T: Scalar>(g: &mut Graph<T>, x: Var, act: Activation) -> Var {
    match act {
        Activation::Relu => g.relu(x),
        Activation::Gelu => g.gelu(x),
    }
}

/// `y = x W + b` on the last axis of a 2-d input.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        zero: bool,
    ) -> Self {
        let bound = if zero { 0.0 } else { 1.0 / (fan_in as f64).sqrt() };
        let w = store.add(format!("{name}.weight"), init.uniform(vec![fan_in, fan_out], bound));
        let b = store.add(format!("{name}.bias"), init.uniform(vec![fan_out], bound));
        Self {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.get(self.w))?;
        g.add(y, p.get(self.b))
    }

    pub fn param_count(fan_in: usize, fan_out: usize) -> usize {
        fan_in * fan_out + fan_out
    }
}

/// Stack of linear layers with an activation between (not after) layers.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub act: Activation,
}

impl Mlp {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        widths: &[usize],
        act: Activation,
        zero_last: bool,
    ) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Config(format!("{name}: invalid MLP widths {widths:?}")));
        }
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, init, &format!("{name}.{i}"), w[0], w[1], zero_last && i == last))
            .collect();
        Ok(Self { layers, act })
    }

    /// Applies the MLP to the last axis of `x` (any rank ≥ 2).
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let last = *shape.last().unwrap();
        let rows = shape.iter().product::<usize>() / last.max(1);
        let mut h = if shape.len() == 2 { x } else { g.reshape(x, &[rows, last])? };
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = activate(g, h, self.act);
            }
            h = layer.forward(g, p, h)?;
        }
        if shape.len() == 2 {
            Ok(h)
        } else {
            let mut out = shape;
            *out.last_mut().unwrap() = self.out_dim();
            g.reshape(h, &out)
        }
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(|l| l.fan_out).unwrap_or(0)
    }

    pub fn param_count(widths: &[usize]) -> usize {
        widths.windows(2).map(|w| Linear::param_count(w[0], w[1])).sum()
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        let gamma = store.add(
            format!("{name}.gamma"),
            Tensor {
                shape: vec![d],
                data: vec![T::one(); d],
            },
        );
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(vec![d]));
        Self { gamma, beta }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p.get(self.gamma), p.get(self.beta))
    }
}

/// Multi-head self-attention over the rows of a `[t, d]` input.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let d = self.q.fan_out;
        let dh = d / self.heads;
        let q = self.q.forward(g, p, x)?;
        let k = self.k.forward(g, p, x)?;
        let v = self.v.forward(g, p, x)?;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.narrow(q, 1, h * dh, dh)?;
            let kh = g.narrow(k, 1, h * dh, dh)?;
            let vh = g.narrow(v, 1, h * dh, dh)?;
            let kt = g.transpose(kh)?;
            let s = g.matmul(qh, kt)?;
            let s = g.scale(s, scale);
            let a = g.softmax(s)?;
            outs.push(g.matmul(a, vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 1)? };
        self.o.forward(g, p, cat)
    }
}

/// Pre-norm Transformer block: `h = x + Attn(LN(x))`, `y = h + FFN(LN(h))`.
#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: SelfAttention,
    pub ln2: LayerNorm,
    pub ffn: Mlp,
}

impl Block {
    fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, name: &str, d: usize, heads: usize, ffn_mult: usize) -> Result<Self> {
        let ln1 = LayerNorm::new(store, &format!("{name}.ln1"), d);
        let attn = SelfAttention {
            q: Linear::new(store, init, &format!("{name}.attn.q"), d, d, false),
            k: Linear::new(store, init, &format!("{name}.attn.k"), d, d, false),
            v: Linear::new(store, init, &format!("{name}.attn.v"), d, d, false),
            o: Linear::new(store, init, &format!("{name}.attn.o"), d, d, false),
            heads,
        };
        let ln2 = LayerNorm::new(store, &format!("{name}.ln2"), d);
        let ffn = Mlp::new(store, init, &format!("{name}.ffn"), &[d, d * ffn_mult, d], Activation::Gelu, false)?;
        Ok(Self { ln1, attn, ln2, ffn })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let n1 = self.ln1.forward(g, p, x)?;
        let a = self.attn.forward(g, p, n1)?;
        let h = g.add(x, a)?;
        let n2 = self.ln2.forward(g, p, h)?;
        let f = self.ffn.forward(g, p, n2)?;
        g.add(h, f)
    }

    pub fn param_count(d: usize, ffn_mult: usize) -> usize {
        4 * d + 4 * Linear::param_count(d, d) + Mlp::param_count(&[d, d * ffn_mult, d])
    }
}

/// Blocks with the positional embedding added to every block input.
#[derive(Debug, Clone)]
pub struct TransformerStack {
    pub blocks: Vec<Block>,
}

impl TransformerStack {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        depth: usize,
        d: usize,
        heads: usize,
        ffn_mult: usize,
    ) -> Result<Self> {
        let blocks = (0..depth)
            .map(|i| Block::new(store, init, &format!("{name}.{i}"), d, heads, ffn_mult))
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, tokens: Var, pe: Var) -> Result<Var> {
        if g.shape(tokens) != g.shape(pe) {
            let (a, b) = (g.shape(tokens).to_vec(), g.shape(pe).to_vec());
            return Err(Error::ShapeMismatch {
                op: "transformer",
                lhs: a,
                rhs: b,
            });
        }
        let mut x = tokens;
        for b in &self.blocks {
            let xin = g.add(x, pe)?;
            x = b.forward(g, p, xin)?;
        }
        Ok(x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointNetEncoderConfig {
    /// Layer widths starting at 3 and ending at the feature dim.
    pub widths: Vec<usize>,
}

impl PointNetEncoderConfig {
    pub fn new(d: usize) -> Self {
        Self {
            widths: vec![3, 64, 128, d],
        }
    }

    pub fn feature_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 || self.widths[0] != 3 || self.widths.contains(&0) {
            return Err(Error::Config(format!("invalid pointnet widths {:?}", self.widths)));
        }
        Ok(())
    }
}

/// Shared per-point MLP followed by a max pool over all points.
#[derive(Debug, Clone)]
pub struct PointNetEncoder {
    pub mlp: Mlp,
}

impl PointNetEncoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, cfg: &PointNetEncoderConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            mlp: Mlp::new(store, init, "encoder.pointnet", &cfg.widths, Activation::Relu, false)?,
        })
    }

    /// `[w, 3]` points to a `[d]` global feature.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, points: Var) -> Result<Var> {
        let h = self.mlp.forward(g, p, points)?;
        g.max_pool(h, 0)
    }
}

/// Per-patch PointNet: MLP over coordinates, max pool across the k points.
#[derive(Debug, Clone)]
pub struct TokenEmbed {
    pub mlp: Mlp,
}

impl TokenEmbed {
    /// `[r, k, 3]` normalized patches to `[r, d]` tokens.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, patches: Var) -> Result<Var> {
        let s = g.shape(patches).to_vec();
        if s.len() != 3 || s[2] != 3 {
            return Err(Error::ShapeMismatch {
                op: "token_embed",
                lhs: s,
                rhs: vec![0, 0, 3],
            });
        }
        let h = self.mlp.forward(g, p, patches)?;
        g.max_pool(h, 1)
    }
}

/// Learnable MLP positional embedding `3 -> d`, last layer zero-initialized.
#[derive(Debug, Clone)]
pub struct PosEmbed {
    pub mlp: Mlp,
}

impl PosEmbed {
    fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(store, init, name, &[3, d, d], Activation::Gelu, true)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, centers: Var) -> Result<Var> {
        self.mlp.forward(g, p, centers)
    }
}

/// Fully connected decoder: each input row to `points` 3D points.
#[derive(Debug, Clone)]
pub struct FcDecoder {
    pub mlp: Mlp,
    pub points: usize,
}

impl FcDecoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, name: &str, d: usize, hidden: usize, points: usize) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(store, init, name, &Self::widths(d, hidden, points), Activation::Relu, false)?,
            points,
        })
    }

    fn widths(d: usize, hidden: usize, points: usize) -> [usize; 4] {
        [d, hidden, hidden, 3 * points]
    }

    pub fn param_count(d: usize, hidden: usize, points: usize) -> usize {
        Mlp::param_count(&Self::widths(d, hidden, points))
    }

    /// `[r, d]` to `[r, points, 3]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, features: Var) -> Result<Var> {
        let r = g.shape(features)[0];
        let h = self.mlp.forward(g, p, features)?;
        g.reshape(h, &[r, self.points, 3])
    }
}

/// `k` seeds on the smallest near-square grid covering `k`, spanning
/// `[-0.5, 0.5]^2`, row-major, truncated to `k`.
pub fn folding_grid(k: usize) -> Vec<[f64; 2]> {
    let cols = (k as f64).sqrt().ceil().max(1.0) as usize;
    let rows = k.div_ceil(cols).max(1);
    let coord = |i: usize, n: usize| if n <= 1 { 0.0 } else { -0.5 + i as f64 / (n - 1) as f64 };
    (0..rows)
        .flat_map(|r| (0..cols).map(move |c| [coord(c, cols), coord(r, rows)]))
        .take(k)
        .collect()
}

/// Folding decoder: deforms a fixed 2D grid conditioned on each input row.
#[derive(Debug, Clone)]
pub struct FoldDecoder {
    pub mlp: Mlp,
    pub grid: Vec<[f64; 2]>,
}

impl FoldDecoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, name: &str, d: usize, hidden: usize, points: usize) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(store, init, name, &Self::widths(d, hidden), Activation::Relu, false)?,
            grid: folding_grid(points),
        })
    }

    fn widths(d: usize, hidden: usize) -> [usize; 4] {
        [d + 2, hidden, hidden, 3]
    }

    pub fn param_count(d: usize, hidden: usize) -> usize {
        Mlp::param_count(&Self::widths(d, hidden))
    }

    /// `[r, d]` to `[r, k, 3]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, features: Var) -> Result<Var> {
        let r = g.shape(features)[0];
        let k = self.grid.len();
        let rep: Vec<usize> = (0..r).flat_map(|i| std::iter::repeat_n(i, k)).collect();
        let feat = g.gather_rows(features, &rep)?;
        let grid: Vec<f64> = (0..r).flat_map(|_| self.grid.iter().flatten().copied()).collect();
        let grid = g.constant(Tensor::from_f64(vec![r * k, 2], &grid)?);
        let x = g.concat(&[grid, feat], 1)?;
        let y = self.mlp.forward(g, p, x)?;
        g.reshape(y, &[r, k, 3])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderKind {
    Fc,
    Fold,
}

impl DecoderKind {
    pub fn name(self) -> &'static str {
        match self {
            DecoderKind::Fc => "fc",
            DecoderKind::Fold => "fold",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "fc" => Some(DecoderKind::Fc),
            "fold" => Some(DecoderKind::Fold),
            _ => None,
        }
    }
}

/// Either decoder kind, producing a fixed number of points per input row.
#[derive(Debug, Clone)]
pub enum PointDecoder {
    Fc(FcDecoder),
    Fold(FoldDecoder),
}

impl PointDecoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        kind: DecoderKind,
        d: usize,
        hidden: usize,
        points: usize,
    ) -> Result<Self> {
        Ok(match kind {
            DecoderKind::Fc => PointDecoder::Fc(FcDecoder::new(store, init, name, d, hidden, points)?),
            DecoderKind::Fold => PointDecoder::Fold(FoldDecoder::new(store, init, name, d, hidden, points)?),
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, features: Var) -> Result<Var> {
        match self {
            PointDecoder::Fc(d) => d.forward(g, p, features),
            PointDecoder::Fold(d) => d.forward(g, p, features),
        }
    }

    pub fn param_count(kind: DecoderKind, d: usize, hidden: usize, points: usize) -> usize {
        match kind {
            DecoderKind::Fc => FcDecoder::param_count(d, hidden, points),
            DecoderKind::Fold => FoldDecoder::param_count(d, hidden),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerConfig {
    pub d: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// Patch count.
    pub n: usize,
    /// Points per patch.
    pub k: usize,
    /// Hidden width of the decoder heads.
    pub head_hidden: usize,
    pub local_decoder: DecoderKind,
    pub global_decoder: DecoderKind,
    /// Point count of the whole-cloud head, when that objective is used.
    pub whole_points: Option<usize>,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            d: 64,
            encoder_depth: 4,
            decoder_depth: 2,
            heads: 4,
            ffn_mult: 2,
            n: 16,
            k: 16,
            head_hidden: 128,
            local_decoder: DecoderKind::Fold,
            global_decoder: DecoderKind::Fc,
            whole_points: None,
        }
    }
}

impl TransformerConfig {
    /// Tiny dims used for gradient verification.
    pub fn tiny() -> Self {
        Self {
            d: 16,
            encoder_depth: 2,
            decoder_depth: 1,
            heads: 2,
            ffn_mult: 2,
            n: 8,
            k: 8,
            head_hidden: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return bad(format!("model dim {} not divisible by {} heads", self.d, self.heads));
        }
        if self.decoder_depth >= self.encoder_depth {
            return bad(format!(
                "decoder depth {} must be smaller than encoder depth {}",
                self.decoder_depth, self.encoder_depth
            ));
        }
        if self.n == 0 || self.k == 0 || self.ffn_mult == 0 || self.head_hidden == 0 {
            return bad("patch counts, ffn multiplier and head width must be positive".into());
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let d = self.d;
        let token = Mlp::param_count(&[3, d, d]);
        let pe = 2 * Mlp::param_count(&[3, d, d]);
        let blocks = (self.encoder_depth + self.decoder_depth) * Block::param_count(d, self.ffn_mult);
        let norms = 2 * 2 * d;
        let mask = d;
        let local = PointDecoder::param_count(self.local_decoder, d, self.head_hidden, self.k);
        let global = PointDecoder::param_count(self.global_decoder, d, self.head_hidden, self.n);
        let whole = self
            .whole_points
            .map(|w| FcDecoder::param_count(d, self.head_hidden, w))
            .unwrap_or(0);
        token + pe + blocks + norms + mask + local + global + whole
    }
}

/// Outputs of one masked forward pass.
#[derive(Debug, Clone, Copy)]
pub struct TransformerOutputs {
    /// `[r, k, 3]` predicted normalized patches at the reconstructed positions.
    pub patches: Var,
    /// `[n, 3]` predicted centers.
    pub centers: Var,
    /// `[w, 3]` whole-cloud prediction, when that head exists.
    pub whole: Option<Var>,
    /// `[v, d]` encoded visible tokens.
    pub encoded: Var,
}

/// Patch-based masked autoencoder with decomposed local/global heads.
#[derive(Debug, Clone)]
pub struct TransformerModel {
    pub cfg: TransformerConfig,
    pub token_embed: TokenEmbed,
    pub pe_encoder: PosEmbed,
    pub pe_decoder: PosEmbed,
    pub encoder: TransformerStack,
    pub encoder_norm: LayerNorm,
    pub mask_token: ParamId,
    pub decoder: TransformerStack,
    pub decoder_norm: LayerNorm,
    pub local_head: PointDecoder,
    pub global_head: PointDecoder,
    pub whole_head: Option<FcDecoder>,
}

impl TransformerModel {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &TransformerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut init = Init::new(seed);
        let d = cfg.d;
        let token_embed = TokenEmbed {
            mlp: Mlp::new(store, &mut init, "token_embed", &[3, d, d], Activation::Relu, false)?,
        };
        let pe_encoder = PosEmbed::new(store, &mut init, "pe_encoder", d)?;
        let pe_decoder = PosEmbed::new(store, &mut init, "pe_decoder", d)?;
        let encoder = TransformerStack::new(store, &mut init, "encoder", cfg.encoder_depth, d, cfg.heads, cfg.ffn_mult)?;
        let encoder_norm = LayerNorm::new(store, "encoder.norm", d);
        let mask_token = store.add("mask_token", init.uniform(vec![1, d], 0.02));
        let decoder = TransformerStack::new(store, &mut init, "decoder", cfg.decoder_depth, d, cfg.heads, cfg.ffn_mult)?;
        let decoder_norm = LayerNorm::new(store, "decoder.norm", d);
        let local_head = PointDecoder::new(store, &mut init, "local_head", cfg.local_decoder, d, cfg.head_hidden, cfg.k)?;
        let global_head = PointDecoder::new(store, &mut init, "global_head", cfg.global_decoder, d, cfg.head_hidden, cfg.n)?;
        let whole_head = cfg
            .whole_points
            .map(|w| FcDecoder::new(store, &mut init, "whole_head", d, cfg.head_hidden, w))
            .transpose()?;
        Ok(Self {
            cfg: cfg.clone(),
            token_embed,
            pe_encoder,
            pe_decoder,
            encoder,
            encoder_norm,
            mask_token,
            decoder,
            decoder_norm,
            local_head,
            global_head,
            whole_head,
        })
    }

    /// Token embedding, encoder PE and encoder stack with final norm.
    /// `patches` `[v, k, 3]` normalized, `centers` `[v, 3]`.
    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, patches: Var, centers: Var) -> Result<Var> {
        let tokens = self.token_embed.forward(g, p, patches)?;
        let pe = self.pe_encoder.forward(g, p, centers)?;
        let h = self.encoder.forward(g, p, tokens, pe)?;
        self.encoder_norm.forward(g, p, h)
    }

    /// Assembles the full `n`-token sequence (encoded tokens at visible
    /// positions, the mask token at masked ones), runs the decoder with its
    /// own PE and returns the rows at `plan.masked` in ascending order.
    /// With an empty mask every position is visible and all rows return.
    pub fn patch_decode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        encoded: Var,
        pe_all: Var,
        plan: &MaskPlan,
    ) -> Result<Var> {
        let n = g.shape(pe_all)[0];
        plan.validate(n)?;
        if g.shape(encoded)[0] != plan.visible.len() {
            return Err(Error::DegenerateMask(format!(
                "{} encoded tokens for {} visible positions",
                g.shape(encoded)[0],
                plan.visible.len()
            )));
        }
        let seq = if plan.masked.is_empty() {
            encoded
        } else {
            let vis = g.scatter_rows(encoded, &plan.visible, n)?;
            let tokens = g.gather_rows(p.get(self.mask_token), &vec![0; plan.masked.len()])?;
            let masked = g.scatter_rows(tokens, &plan.masked, n)?;
            g.add(vis, masked)?
        };
        let h = self.decoder.forward(g, p, seq, pe_all)?;
        let h = self.decoder_norm.forward(g, p, h)?;
        if plan.masked.is_empty() {
            Ok(h)
        } else {
            g.gather_rows(h, &plan.masked)
        }
    }

    /// Max-pools encoded tokens to one feature and decodes `n` centers.
    pub fn global_centers<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, encoded: Var) -> Result<Var> {
        let pooled = self.pool(g, encoded)?;
        let c = self.global_head.forward(g, p, pooled)?;
        g.reshape(c, &[self.cfg.n, 3])
    }

    fn pool<T: Scalar>(&self, g: &mut Graph<T>, encoded: Var) -> Result<Var> {
        let pooled = g.max_pool(encoded, 0)?;
        g.reshape(pooled, &[1, self.cfg.d])
    }

    /// Full masked forward pass.
    ///
    /// `vis_patches` `[v, k, 3]` and `vis_centers` `[v, 3]` are the corrupted
    /// visible inputs; `dec_centers` `[n, 3]` drive the decoder PE.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        vis_patches: Var,
        vis_centers: Var,
        dec_centers: Var,
        plan: &MaskPlan,
    ) -> Result<TransformerOutputs> {
        let encoded = self.encode(g, p, vis_patches, vis_centers)?;
        let pe_all = self.pe_decoder.forward(g, p, dec_centers)?;
        let decoded = self.patch_decode(g, p, encoded, pe_all, plan)?;
        let patches = self.local_head.forward(g, p, decoded)?;
        let centers = self.global_centers(g, p, encoded)?;
        let whole = match &self.whole_head {
            Some(h) => {
                let pooled = self.pool(g, encoded)?;
                let w = h.forward(g, p, pooled)?;
                Some(g.reshape(w, &[h.points, 3])?)
            }
            None => None,
        };
        Ok(TransformerOutputs {
            patches,
            centers,
            whole,
            encoded,
        })
    }

    /// Probe feature: concat of max- and mean-pooled encoded tokens over all
    /// patches, `[2d]`.
    pub fn probe_feature<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, patches: Var, centers: Var) -> Result<Var> {
        let enc = self.encode(g, p, patches, centers)?;
        let mx = g.max_pool(enc, 0)?;
        let mn = g.mean_pool(enc, 0)?;
        g.concat(&[mx, mn], 0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointNetModelConfig {
    pub encoder: PointNetEncoderConfig,
    pub decoder: DecoderKind,
    pub head_hidden: usize,
    /// Reconstructed point count.
    pub points: usize,
}

impl PointNetModelConfig {
    pub fn param_count(&self) -> usize {
        let d = self.encoder.feature_dim();
        Mlp::param_count(&self.encoder.widths) + PointDecoder::param_count(self.decoder, d, self.head_hidden, self.points)
    }
}

/// Global-feature autoencoder: PointNet encoder and one point decoder.
#[derive(Debug, Clone)]
pub struct PointNetModel {
    pub cfg: PointNetModelConfig,
    pub encoder: PointNetEncoder,
    pub decoder: PointDecoder,
}

impl PointNetModel {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &PointNetModelConfig, seed: u64) -> Result<Self> {
        let mut init = Init::new(seed);
        let encoder = PointNetEncoder::new(store, &mut init, &cfg.encoder)?;
        let d = cfg.encoder.feature_dim();
        let decoder = PointDecoder::new(store, &mut init, "decoder", cfg.decoder, d, cfg.head_hidden, cfg.points)?;
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            decoder,
        })
    }

    /// `[v, 3]` visible points to a `[w, 3]` reconstruction.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, points: Var) -> Result<(Var, Var)> {
        let f = self.encoder.forward(g, p, points)?;
        let row = g.reshape(f, &[1, self.cfg.encoder.feature_dim()])?;
        let out = self.decoder.forward(g, p, row)?;
        let out = g.reshape(out, &[self.cfg.points, 3])?;
        Ok((f, out))
    }
}
