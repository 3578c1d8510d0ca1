//! Pre-norm decoder-only transformer with rotary position embeddings.
//!
//! Every forward pass takes an explicit positional-index vector, so the same
//! weights can be run on contiguous positions, skipped positions, or
//! interpolated positions without touching the parameters.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Graph, Real, Tensor, Var};

/// Architecture and positional-encoding configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub head_dim: usize,
    pub vocab: usize,
    /// Context window in tokens.
    pub context: usize,
    /// RoPE base.
    pub theta: f64,
    pub ffn_mult: f64,
    /// Position-interpolation divisor applied to every index before rotation.
    #[serde(default = "one")]
    pub pi_scale: f64,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
}

fn one() -> f64 {
    1.0
}

fn default_norm_eps() -> f64 {
    1e-6
}

impl ModelConfig {
    /// A config with `head_dim = d_model / heads`, no interpolation and gated FFN width `ffn_mult * d_model`.
    pub fn new(layers: usize, heads: usize, d_model: usize, vocab: usize, context: usize, theta: f64, ffn_mult: f64) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::config(format!("d_model {d_model} not divisible by {heads} heads")));
        }
        let cfg = ModelConfig {
            layers,
            heads,
            d_model,
            head_dim: d_model / heads,
            vocab,
            context,
            theta,
            ffn_mult,
            pi_scale: 1.0,
            norm_eps: default_norm_eps(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("layers", self.layers),
            ("heads", self.heads),
            ("d_model", self.d_model),
            ("head_dim", self.head_dim),
            ("vocab", self.vocab),
            ("context", self.context),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("model.{name} must be at least 1")));
        }
        if self.head_dim % 2 != 0 {
            return Err(Error::config(format!("head_dim {} must be even", self.head_dim)));
        }
        if self.heads * self.head_dim != self.d_model {
            return Err(Error::config(format!(
                "d_model {} != heads {} * head_dim {}",
                self.d_model, self.heads, self.head_dim
            )));
        }
        if !(self.theta > 1.0) || !self.theta.is_finite() {
            return Err(Error::config(format!("theta {} must be a finite value > 1", self.theta)));
        }
        if !(self.pi_scale >= 1.0) || !self.pi_scale.is_finite() {
            return Err(Error::config(format!("pi_scale {} must be >= 1", self.pi_scale)));
        }
        if !(self.ffn_mult > 0.0) || self.ffn_hidden() == 0 {
            return Err(Error::config(format!("ffn_mult {} too small", self.ffn_mult)));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::config("norm_eps must be positive"));
        }
        Ok(())
    }

    pub fn ffn_hidden(&self) -> usize {
        (self.ffn_mult * self.d_model as f64).round() as usize
    }

    /// Rotary frequencies `theta^(-2i/d)` for `i < head_dim / 2`.
    pub fn inv_freq(&self) -> Vec<f64> {
        inv_freq(self.theta, self.head_dim)
    }
}

pub(crate) fn inv_freq(theta: f64, d: usize) -> Vec<f64> {
    (0..d / 2)
        .map(|i| theta.powf(-2.0 * i as f64 / d as f64))
        .collect()
}

/// Segment boundaries of a skipped-index plan, in input coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanSegments {
    /// Length of the head (and tail) segment.
    pub boundary: usize,
    /// Positional index that the middle segment ends at.
    pub mid_end: usize,
}

/// Strictly increasing positional indices for one input sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionPlan {
    indices: Vec<usize>,
    segments: Option<PlanSegments>,
    max_position: usize,
}

impl PositionPlan {
    pub fn new(indices: Vec<usize>, max_position: usize) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::invalid("position plan is empty"));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("position plan must be strictly increasing"));
        }
        if let Some(&last) = indices.last() {
            if last > max_position {
                return Err(Error::OutOfRange {
                    context: "position plan",
                    index: last,
                    limit: max_position + 1,
                });
            }
        }
        Ok(PositionPlan {
            indices,
            segments: None,
            max_position,
        })
    }

    /// The contiguous plan `0..len`.
    pub fn contiguous(len: usize) -> Self {
        assert!(len > 0, "contiguous plan needs at least one position");
        PositionPlan {
            indices: (0..len).collect(),
            segments: None,
            max_position: len - 1,
        }
    }

    pub fn with_segments(mut self, segments: PlanSegments) -> Self {
        self.segments = Some(segments);
        self
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn segments(&self) -> Option<PlanSegments> {
        self.segments
    }

    pub fn max_position(&self) -> usize {
        self.max_position
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Cos/sin tables `[positions.len(), d/2]` for the given effective (real-valued) positions.
pub(crate) fn rotary_tables<F: Real>(positions: impl Iterator<Item = f64>, inv_freq: &[f64]) -> (Vec<F>, Vec<F>) {
    let mut cos = Vec::new();
    let mut sin = Vec::new();
    for p in positions {
        for &f in inv_freq {
            let (s, c) = (p * f).sin_cos();
            cos.push(F::of(c));
            sin.push(F::of(s));
        }
    }
    (cos, sin)
}

/// Rotates `q` and `k` (`[T, d]`, one head) by RoPE at the plan's positions.
pub fn apply_rope<F: Real>(q: &Tensor<F>, k: &Tensor<F>, plan: &PositionPlan, theta: f64) -> Result<(Tensor<F>, Tensor<F>)> {
    apply_rope_scaled(q, k, plan, theta, 1.0)
}

/// As [`apply_rope`], with every index divided by `scale` first (position interpolation).
pub fn apply_rope_scaled<F: Real>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    plan: &PositionPlan,
    theta: f64,
    scale: f64,
) -> Result<(Tensor<F>, Tensor<F>)> {
    if q.shape() != k.shape() || q.rank() != 2 {
        return Err(Error::shape(format!("rope needs equal [T, d] q/k, got {:?} and {:?}", q.shape(), k.shape())));
    }
    let (t, d) = (q.shape()[0], q.shape()[1]);
    if d % 2 != 0 {
        return Err(Error::shape(format!("rope head dimension {d} is odd")));
    }
    if plan.len() != t {
        return Err(Error::shape(format!("plan length {} != sequence length {t}", plan.len())));
    }
    let freqs = inv_freq(theta, d);
    let (cos, sin) = rotary_tables::<F>(plan.indices().iter().map(|&p| p as f64 / scale), &freqs);
    let mut g = Graph::new();
    let (qv, kv) = (g.constant(q.clone()), g.constant(k.clone()));
    let qr = g.rope(qv, cos.clone(), sin.clone(), d);
    let kr = g.rope(kv, cos, sin, d);
    Ok((g.tensor(qr), g.tensor(kr)))
}

/// What [`forward_trace`] records besides logits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Capture {
    pub hidden: bool,
    pub attention: bool,
}

impl Capture {
    pub const NONE: Capture = Capture {
        hidden: false,
        attention: false,
    };
    pub const ALL: Capture = Capture {
        hidden: true,
        attention: true,
    };
}

/// Per-layer hidden states and per-head attention of one sequence.
#[derive(Clone, Debug, Default)]
pub struct LayerTrace<F: Real = f64> {
    /// `layers + 1` tensors `[T, d_model]`: the embedding output, then each layer output.
    pub hidden: Vec<Tensor<F>>,
    /// `layers` entries of `heads` lower-triangular `[T, T]` matrices.
    pub attention: Vec<Vec<Tensor<F>>>,
}

/// Graph nodes produced by one batched forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub logits: Var,
    /// `layers + 1` nodes `[batch * T, d_model]`.
    pub hidden: Vec<Var>,
    /// One attention node per layer; see [`Graph::attention_probs`].
    pub attention: Vec<Var>,
}

const PER_LAYER: usize = 9;

#[derive(Clone, Copy)]
enum Slot {
    AttnNorm = 0,
    Wq,
    Wk,
    Wv,
    Wo,
    FfnNorm,
    Gate,
    Up,
    Down,
}

const SLOT_NAMES: [&str; PER_LAYER] = [
    "attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w_gate", "w_up", "w_down",
];

/// A decoder-only transformer: configuration plus named parameters.
#[derive(Clone, Debug)]
pub struct DecoderModel<F: Real = f32> {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor<F>>,
    frozen: bool,
}

impl<F: Real> DecoderModel<F> {
    /// Normal(0, 0.02) weights; attention and FFN output projections are scaled by
    /// `1/sqrt(2 L)`; norm gains start at one.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        Self::init_with_std(config, 0.02, rng)
    }

    pub fn init_with_std<R: Rng + ?Sized>(config: ModelConfig, std: f64, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let normal = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
        let out_scale = 1.0 / (2.0 * config.layers as f64).sqrt();
        let shapes = Self::param_shapes(&config);
        let mut names = Vec::with_capacity(shapes.len());
        let mut params = Vec::with_capacity(shapes.len());
        for (name, shape) in shapes {
            let t = if name.ends_with("norm") {
                Tensor::from_fn(shape, |_| F::one())
            } else {
                let s = if name.ends_with(".wo") || name.ends_with(".w_down") { out_scale } else { 1.0 };
                Tensor::from_fn(shape, |_| F::of(normal.sample(rng) * s))
            };
            names.push(name);
            params.push(t);
        }
        Ok(DecoderModel {
            config,
            names,
            params,
            frozen: false,
        })
    }

    /// Assembles a model from named tensors, checking them against the config's layout.
    pub fn from_parts(config: ModelConfig, named: Vec<(String, Tensor<F>)>) -> Result<Self> {
        config.validate()?;
        let shapes = Self::param_shapes(&config);
        if shapes.len() != named.len() {
            return Err(Error::shape(format!("expected {} parameters, got {}", shapes.len(), named.len())));
        }
        let mut names = Vec::with_capacity(named.len());
        let mut params = Vec::with_capacity(named.len());
        for ((want_name, want_shape), (name, t)) in shapes.into_iter().zip(named) {
            if want_name != name || want_shape != t.shape() {
                return Err(Error::shape(format!(
                    "parameter {name} {:?} does not match expected {want_name} {want_shape:?}",
                    t.shape()
                )));
            }
            names.push(name);
            params.push(t);
        }
        Ok(DecoderModel {
            config,
            names,
            params,
            frozen: false,
        })
    }

    fn param_shapes(c: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let (d, h, v) = (c.d_model, c.ffn_hidden(), c.vocab);
        let mut out = vec![("embed".to_string(), vec![v, d])];
        for l in 0..c.layers {
            let shapes = [
                vec![d],
                vec![d, d],
                vec![d, d],
                vec![d, d],
                vec![d, d],
                vec![d],
                vec![d, h],
                vec![d, h],
                vec![h, d],
            ];
            for (name, shape) in SLOT_NAMES.iter().zip(shapes) {
                out.push((format!("layers.{l}.{name}"), shape));
            }
        }
        out.push(("final_norm".to_string(), vec![d]));
        out.push(("lm_head".to_string(), vec![d, v]));
        out
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Replaces the configuration; parameter shapes must be unaffected.
    pub fn set_config(&mut self, config: ModelConfig) -> Result<()> {
        config.validate()?;
        let same_shapes = Self::param_shapes(&config)
            .iter()
            .zip(&self.params)
            .all(|((_, s), t)| s == t.shape());
        if !same_shapes {
            return Err(Error::config("new config changes parameter shapes"));
        }
        self.config = config;
        Ok(())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> Result<&mut [Tensor<F>]> {
        if self.frozen {
            return Err(Error::Frozen);
        }
        Ok(&mut self.params)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<F>> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor<F>> {
        if self.frozen {
            return Err(Error::Frozen);
        }
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::invalid(format!("no parameter named {name}")))?;
        Ok(&mut self.params[i])
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
        self.params.iter_mut().for_each(|p| p.set_requires_grad(false));
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// A trainable copy (used to derive a student from a frozen teacher).
    pub fn unfrozen_clone(&self) -> Self {
        let mut m = self.clone();
        m.frozen = false;
        m
    }

    pub fn cast<G: Real>(&self) -> DecoderModel<G> {
        DecoderModel {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            frozen: self.frozen,
        }
    }

    /// Records every parameter as a leaf. Leaves track gradients only when
    /// `track_grad` is set and the model is not frozen.
    pub fn register(&self, g: &mut Graph<F>, track_grad: bool) -> Vec<Var> {
        let rg = track_grad && !self.frozen;
        self.params.iter().map(|p| g.leaf(p, rg)).collect()
    }

    /// Adds the graph's parameter gradients into each parameter's grad buffer.
    pub fn accumulate_grads(&mut self, grads: &Gradients<F>, vars: &[Var]) -> Result<()> {
        if self.frozen {
            return Err(Error::Frozen);
        }
        for (p, &v) in self.params.iter_mut().zip(vars) {
            if let Some(g) = grads.get(v) {
                p.accumulate_grad(g);
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| {
            p.take_grad();
        });
    }

    fn slot(l: usize, s: Slot) -> usize {
        1 + l * PER_LAYER + s as usize
    }

    /// Effective rotary positions for a batch: default positions when `plans` is
    /// empty, else one plan shared or one plan per sequence.
    fn positions(&self, plans: &[PositionPlan], batch: usize, seq_len: usize) -> Result<Vec<f64>> {
        if plans.is_empty() {
            let one: Vec<f64> = (0..seq_len).map(|p| p as f64 / self.config.pi_scale).collect();
            return Ok(one.repeat(batch));
        }
        if plans.len() != 1 && plans.len() != batch {
            return Err(Error::shape(format!("{} plans for a batch of {batch}", plans.len())));
        }
        let mut out = Vec::with_capacity(batch * seq_len);
        for b in 0..batch {
            let plan = &plans[if plans.len() == 1 { 0 } else { b }];
            if plan.len() != seq_len {
                return Err(Error::shape(format!("plan length {} != sequence length {seq_len}", plan.len())));
            }
            out.extend(plan.indices().iter().map(|&p| p as f64 / self.config.pi_scale));
        }
        Ok(out)
    }

    /// Records a batched forward pass. `tokens` holds `batch` consecutive
    /// sequences of `seq_len` ids; an empty `plans` means positions `0..seq_len`.
    pub fn forward_graph(
        &self,
        g: &mut Graph<F>,
        vars: &[Var],
        tokens: &[usize],
        seq_len: usize,
        plans: &[PositionPlan],
    ) -> Result<ForwardVars> {
        let c = &self.config;
        if seq_len == 0 || tokens.is_empty() || tokens.len() % seq_len != 0 {
            return Err(Error::shape(format!("{} tokens do not form sequences of {seq_len}", tokens.len())));
        }
        if seq_len > c.context {
            return Err(Error::invalid(format!("sequence length {seq_len} exceeds context window {}", c.context)));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= c.vocab) {
            return Err(Error::OutOfRange {
                context: "token id",
                index: bad,
                limit: c.vocab,
            });
        }
        let batch = tokens.len() / seq_len;
        let positions = self.positions(plans, batch, seq_len)?;
        let (cos, sin) = rotary_tables::<F>(positions.into_iter(), &c.inv_freq());
        let eps = F::of(c.norm_eps);

        let mut x = g.embedding(vars[0], tokens)?;
        let mut hidden = vec![x];
        let mut attention = Vec::with_capacity(c.layers);
        for l in 0..c.layers {
            let p = |s: Slot| vars[Self::slot(l, s)];
            let h = g.rms_norm(x, p(Slot::AttnNorm), eps);
            let q = g.matmul(h, p(Slot::Wq));
            let k = g.matmul(h, p(Slot::Wk));
            let v = g.matmul(h, p(Slot::Wv));
            let q = g.rope(q, cos.clone(), sin.clone(), c.head_dim);
            let k = g.rope(k, cos.clone(), sin.clone(), c.head_dim);
            let a = g.causal_attention(q, k, v, seq_len, c.heads);
            attention.push(a);
            let o = g.matmul(a, p(Slot::Wo));
            x = g.add(x, o);
            let h2 = g.rms_norm(x, p(Slot::FfnNorm), eps);
            let gate = g.matmul(h2, p(Slot::Gate));
            let gate = g.silu(gate);
            let up = g.matmul(h2, p(Slot::Up));
            let gu = g.mul(gate, up);
            let down = g.matmul(gu, p(Slot::Down));
            x = g.add(x, down);
            hidden.push(x);
        }
        let n = vars.len();
        let h = g.rms_norm(x, vars[n - 2], eps);
        let logits = g.matmul(h, vars[n - 1]);
        Ok(ForwardVars {
            logits,
            hidden,
            attention,
        })
    }

    /// Logits `[T, V]` for one sequence.
    pub fn logits(&self, tokens: &[usize], plan: &PositionPlan) -> Result<Tensor<F>> {
        Ok(forward_trace(self, tokens, plan, Capture::NONE)?.0)
    }
}

/// Runs one sequence and returns its logits plus the requested per-layer trace.
pub fn forward_trace<F: Real>(
    model: &DecoderModel<F>,
    tokens: &[usize],
    plan: &PositionPlan,
    capture: Capture,
) -> Result<(Tensor<F>, LayerTrace<F>)> {
    if plan.len() != tokens.len() {
        return Err(Error::shape(format!("plan length {} != token count {}", plan.len(), tokens.len())));
    }
    let mut g = Graph::new();
    let vars = model.register(&mut g, false);
    let fw = model.forward_graph(&mut g, &vars, tokens, tokens.len(), std::slice::from_ref(plan))?;
    let trace = extract_traces(&g, &fw, 1, tokens.len(), capture).pop().unwrap_or_default();
    Ok((g.tensor(fw.logits), trace))
}

/// Splits the batched hidden/attention nodes of a forward pass into per-sequence traces.
pub fn extract_traces<F: Real>(
    g: &Graph<F>,
    fw: &ForwardVars,
    batch: usize,
    seq_len: usize,
    capture: Capture,
) -> Vec<LayerTrace<F>> {
    let mut traces: Vec<LayerTrace<F>> = (0..batch).map(|_| LayerTrace::default()).collect();
    if capture.hidden {
        for &h in &fw.hidden {
            let full = g.tensor(h);
            for (b, tr) in traces.iter_mut().enumerate() {
                tr.hidden.push(full.slice_rows(b * seq_len, (b + 1) * seq_len));
            }
        }
    }
    if capture.attention {
        for &a in &fw.attention {
            let (probs, heads, t) = g.attention_probs(a).expect("attention node");
            for (b, tr) in traces.iter_mut().enumerate() {
                let per_head = (0..heads)
                    .map(|h| {
                        let off = (b * heads + h) * t * t;
                        Tensor::new(vec![t, t], probs[off..off + t * t].to_vec()).expect("attention shape")
                    })
                    .collect();
                tr.attention.push(per_head);
            }
        }
    }
    traces
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn tiny() -> DecoderModel<f64> {
        let cfg = ModelConfig::new(2, 2, 8, 11, 16, 1e4, 2.0).unwrap();
        DecoderModel::init_with_std(cfg, 0.3, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    #[test]
    fn config_invariants() {
        assert!(ModelConfig::new(2, 2, 8, 11, 16, 1e4, 2.0).is_ok());
        assert!(ModelConfig::new(2, 3, 8, 11, 16, 1e4, 2.0).is_err());
        // head_dim 3 is odd
        assert!(ModelConfig::new(1, 2, 6, 11, 16, 1e4, 2.0).is_err());
        assert!(ModelConfig::new(1, 2, 8, 11, 16, 1.0, 2.0).is_err());
        assert!(ModelConfig::new(0, 2, 8, 11, 16, 1e4, 2.0).is_err());
    }

    #[test]
    fn plan_validation() {
        assert!(PositionPlan::new(vec![0, 2, 2], 5).is_err());
        assert!(PositionPlan::new(vec![0, 2, 6], 5).is_err());
        assert!(PositionPlan::new(vec![], 5).is_err());
        let p = PositionPlan::new(vec![0, 3, 5], 5).unwrap();
        assert_eq!(p.len(), 3);
    }

    #[test]
    fn param_layout_matches_config() {
        let m = tiny();
        assert_eq!(m.names().len(), 1 + 2 * PER_LAYER + 2);
        assert_eq!(m.param("layers.1.w_down").unwrap().shape(), &[16, 8]);
        assert_eq!(m.param("lm_head").unwrap().shape(), &[8, 11]);
        let named: Vec<_> = m.names().iter().cloned().zip(m.params().iter().cloned()).collect();
        let back = DecoderModel::from_parts(m.config().clone(), named).unwrap();
        assert_eq!(back.params(), m.params());
    }

    #[test]
    fn rope_rejects_odd_dim() {
        let q = Tensor::<f64>::zeros(vec![2, 3]);
        let plan = PositionPlan::contiguous(2);
        assert!(apply_rope(&q, &q, &plan, 1e4).is_err());
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let q = Tensor::<f64>::from_fn(vec![1, 6], |i| i as f64 - 2.5);
        let k = Tensor::<f64>::from_fn(vec![1, 6], |i| (i as f64).cos());
        let plan = PositionPlan::contiguous(1);
        let (qr, kr) = apply_rope(&q, &k, &plan, 1e4).unwrap();
        assert_eq!(qr, q);
        assert_eq!(kr, k);
    }

    #[test]
    fn rope_preserves_pair_norms() {
        let q = Tensor::<f64>::from_fn(vec![5, 8], |i| ((i * 13 % 7) as f64 - 3.0) * 0.4);
        let plan = PositionPlan::new(vec![0, 3, 17, 100, 4096], 4096).unwrap();
        let (qr, _) = apply_rope(&q, &q, &plan, 1e4).unwrap();
        for (a, b) in q.data().chunks(2).zip(qr.data().chunks(2)) {
            let na = a[0].hypot(a[1]);
            let nb = b[0].hypot(b[1]);
            assert!((na - nb).abs() < 1e-12);
        }
    }

    #[test]
    fn single_token_attention_is_one() {
        let m = tiny();
        let (_, tr) = forward_trace(&m, &[4], &PositionPlan::contiguous(1), Capture::ALL).unwrap();
        assert_eq!(tr.attention.len(), 2);
        for layer in &tr.attention {
            for head in layer {
                assert_eq!(head.data(), &[1.0]);
            }
        }
    }

    #[test]
    fn forward_errors() {
        let m = tiny();
        let plan = PositionPlan::contiguous(3);
        assert!(matches!(
            forward_trace(&m, &[1, 2, 11], &plan, Capture::NONE),
            Err(Error::OutOfRange { .. })
        ));
        assert!(forward_trace(&m, &[1, 2], &plan, Capture::NONE).is_err());
        let long: Vec<usize> = (0..17).map(|i| i % 11).collect();
        assert!(forward_trace(&m, &long, &PositionPlan::contiguous(17), Capture::NONE).is_err());
    }

    #[test]
    fn trace_shapes() {
        let m = tiny();
        let toks = [1, 5, 2, 9, 0];
        let (logits, tr) = forward_trace(&m, &toks, &PositionPlan::contiguous(5), Capture::ALL).unwrap();
        assert_eq!(logits.shape(), &[5, 11]);
        assert_eq!(tr.hidden.len(), 3);
        assert!(tr.hidden.iter().all(|h| h.shape() == [5, 8] && h.is_finite()));
        for layer in &tr.attention {
            assert_eq!(layer.len(), 2);
            for head in layer {
                for r in 0..5 {
                    let s: f64 = head.row(r).iter().sum();
                    assert!((s - 1.0).abs() < 1e-12);
                    assert!(head.row(r)[r + 1..].iter().all(|&x| x == 0.0));
                }
            }
        }
    }

    #[test]
    fn frozen_model_rejects_updates() {
        let mut m = tiny();
        m.freeze();
        assert!(matches!(m.params_mut(), Err(Error::Frozen)));
        assert!(matches!(m.param_mut("embed"), Err(Error::Frozen)));
        let mut g = Graph::new();
        let vars = m.register(&mut g, true);
        let fw = m
            .forward_graph(&mut g, &vars, &[1, 2], 2, &[PositionPlan::contiguous(2)])
            .unwrap();
        let s = g.sum(fw.logits);
        let grads = g.backward(s).unwrap();
        assert!(vars.iter().all(|&v| grads.get(v).is_none()));
    }
}
