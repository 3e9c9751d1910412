//! Decoder-only micro transformer: pre-norm residual blocks with
//! q/k/v/o attention projections, gated-SiLU MLP, RMSNorm, rotary
//! position embeddings, and strict causal masking. Any projection or
//! MLP weight can carry a fake quantizer; full-precision shadow weights
//! are trained while the forward pass sees grid values.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
#[cfg(test)]
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{
    self, calibrate_minmax, calibrate_mse, Granularity, QuantParams, QuantScheme, QuantizerState,
    Symmetry,
};
use crate::rng::Rng;
use crate::tensor::{shared, Scalar, SharedTensor, Tape, Tensor, Var};

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const PAD: u32 = 258;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub rope_base: f64,
    pub rmsnorm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 259,
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            d_ff: 344,
            max_seq_len: 256,
            rope_base: 10000.0,
            rmsnorm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if (self.d_model / self.n_heads) % 2 != 0 {
            return Err(Error::Config("head_dim must be even for rotary pairs".into()));
        }
        if self.vocab_size == 0 || self.n_layers == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Attention projection roles, the targets of the signal probes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjRole {
    Q,
    K,
    V,
    O,
}

impl ProjRole {
    pub const ALL: [ProjRole; 4] = [ProjRole::Q, ProjRole::K, ProjRole::V, ProjRole::O];
}

impl fmt::Display for ProjRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ProjRole::Q => "q",
            ProjRole::K => "k",
            ProjRole::V => "v",
            ProjRole::O => "o",
        };
        f.write_str(s)
    }
}

impl FromStr for ProjRole {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "q" => Ok(ProjRole::Q),
            "k" => Ok(ProjRole::K),
            "v" => Ok(ProjRole::V),
            "o" => Ok(ProjRole::O),
            other => Err(Error::Invalid(format!("unknown projection role '{other}'"))),
        }
    }
}

/// Weight roles a quantization policy can select. The default policy is
/// the per-layer roles; embedding and head quantization are opt-in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightRole {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
    Embed,
    Head,
}

impl WeightRole {
    /// The default quantization policy: every per-layer projection and
    /// MLP weight; embeddings, norms and head stay full precision.
    pub const ALL: [WeightRole; 7] = [
        WeightRole::Q,
        WeightRole::K,
        WeightRole::V,
        WeightRole::O,
        WeightRole::Gate,
        WeightRole::Up,
        WeightRole::Down,
    ];
}

impl FromStr for WeightRole {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "q" => Ok(WeightRole::Q),
            "k" => Ok(WeightRole::K),
            "v" => Ok(WeightRole::V),
            "o" => Ok(WeightRole::O),
            "gate" => Ok(WeightRole::Gate),
            "up" => Ok(WeightRole::Up),
            "down" => Ok(WeightRole::Down),
            "embed" => Ok(WeightRole::Embed),
            "head" => Ok(WeightRole::Head),
            other => Err(Error::Invalid(format!("unknown weight role '{other}'"))),
        }
    }
}

/// A linear weight with an optional attached fake quantizer.
#[derive(Debug)]
pub struct QuantizedLinear<T: Scalar> {
    pub weight: SharedTensor<T>,
    pub quantizer: Option<QuantizerState>,
}

impl<T: Scalar> QuantizedLinear<T> {
    fn new(weight: Tensor<T>) -> Self {
        QuantizedLinear { weight: shared(weight.requires_grad(true)), quantizer: None }
    }

    fn deep_clone(&self) -> Self {
        QuantizedLinear {
            weight: shared(self.weight.borrow().clone()),
            quantizer: self.quantizer.clone(),
        }
    }
}

#[derive(Debug)]
pub struct AttentionBlock<T: Scalar> {
    pub layer_id: usize,
    pub wq: QuantizedLinear<T>,
    pub wk: QuantizedLinear<T>,
    pub wv: QuantizedLinear<T>,
    pub wo: QuantizedLinear<T>,
}

#[derive(Debug)]
pub struct MlpBlock<T: Scalar> {
    pub w_gate: QuantizedLinear<T>,
    pub w_up: QuantizedLinear<T>,
    pub w_down: QuantizedLinear<T>,
}

#[derive(Debug)]
pub struct LayerBlock<T: Scalar> {
    pub attn_norm: SharedTensor<T>,
    pub attn: AttentionBlock<T>,
    pub mlp_norm: SharedTensor<T>,
    pub mlp: MlpBlock<T>,
}

/// Per-tensor asymmetric activation quantizer parameters, keyed by
/// activation point name; applied only in eval mode.
pub type ActivationQuant = BTreeMap<String, QuantizerState>;

#[derive(Debug)]
pub struct MicroLM<T: Scalar> {
    pub config: ModelConfig,
    pub embed: QuantizedLinear<T>,
    pub layers: Vec<LayerBlock<T>>,
    pub final_norm: SharedTensor<T>,
    pub head: QuantizedLinear<T>,
    pub activation_quant: Option<ActivationQuant>,
}

/// One projection output observed during a forward pass.
pub struct ProjOutput<T: Scalar> {
    pub layer_id: usize,
    pub role: ProjRole,
    pub var: Var<T>,
}

/// A completed forward pass; holds the tape alive so gradients and
/// observed activations stay readable.
pub struct ForwardPass<T: Scalar> {
    pub tape: Tape<T>,
    pub logits: Var<T>,
    pub projections: Vec<ProjOutput<T>>,
    pub activations: Vec<(String, Var<T>)>,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOpts {
    /// Record gradients for parameters (teacher passes set this false).
    pub grad: bool,
    /// Apply stored activation quantizers (eval mode only).
    pub act_quant: bool,
}

impl Default for ForwardOpts {
    fn default() -> Self {
        ForwardOpts { grad: true, act_quant: false }
    }
}

impl<T: Scalar> MicroLM<T> {
    /// Fresh model with gaussian init; o/down projections are scaled
    /// down by sqrt(2 * n_layers) to keep the residual stream tame.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let d = config.d_model;
        let std = 0.02;
        let resid_std = std / (2.0 * config.n_layers as f64).sqrt();
        let embed =
            QuantizedLinear::new(Tensor::randn(vec![config.vocab_size, d], std, &mut rng));
        let mut layers = Vec::with_capacity(config.n_layers);
        for layer_id in 0..config.n_layers {
            let attn = AttentionBlock {
                layer_id,
                wq: QuantizedLinear::new(Tensor::randn(vec![d, d], std, &mut rng)),
                wk: QuantizedLinear::new(Tensor::randn(vec![d, d], std, &mut rng)),
                wv: QuantizedLinear::new(Tensor::randn(vec![d, d], std, &mut rng)),
                wo: QuantizedLinear::new(Tensor::randn(vec![d, d], resid_std, &mut rng)),
            };
            let mlp = MlpBlock {
                w_gate: QuantizedLinear::new(Tensor::randn(vec![d, config.d_ff], std, &mut rng)),
                w_up: QuantizedLinear::new(Tensor::randn(vec![d, config.d_ff], std, &mut rng)),
                w_down: QuantizedLinear::new(Tensor::randn(
                    vec![config.d_ff, d],
                    resid_std,
                    &mut rng,
                )),
            };
            layers.push(LayerBlock {
                attn_norm: shared(Tensor::full(vec![d], T::one()).requires_grad(true)),
                attn,
                mlp_norm: shared(Tensor::full(vec![d], T::one()).requires_grad(true)),
                mlp,
            });
        }
        let final_norm = shared(Tensor::full(vec![d], T::one()).requires_grad(true));
        let head =
            QuantizedLinear::new(Tensor::randn(vec![d, config.vocab_size], std, &mut rng));
        Ok(MicroLM { config, embed, layers, final_norm, head, activation_quant: None })
    }

    /// Independent copy: parameters, quantizers, activation params.
    pub fn deep_clone(&self) -> Self {
        MicroLM {
            config: self.config.clone(),
            embed: self.embed.deep_clone(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerBlock {
                    attn_norm: shared(l.attn_norm.borrow().clone()),
                    attn: AttentionBlock {
                        layer_id: l.attn.layer_id,
                        wq: l.attn.wq.deep_clone(),
                        wk: l.attn.wk.deep_clone(),
                        wv: l.attn.wv.deep_clone(),
                        wo: l.attn.wo.deep_clone(),
                    },
                    mlp_norm: shared(l.mlp_norm.borrow().clone()),
                    mlp: MlpBlock {
                        w_gate: l.mlp.w_gate.deep_clone(),
                        w_up: l.mlp.w_up.deep_clone(),
                        w_down: l.mlp.w_down.deep_clone(),
                    },
                })
                .collect(),
            final_norm: shared(self.final_norm.borrow().clone()),
            head: self.head.deep_clone(),
            activation_quant: self.activation_quant.clone(),
        }
    }

    /// All parameters in checkpoint order.
    pub fn named_params(&self) -> Vec<(String, SharedTensor<T>)> {
        let mut out = vec![("embed".to_string(), self.embed.weight.clone())];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.attn_norm"), l.attn_norm.clone()));
            out.push((format!("layer{i}.wq"), l.attn.wq.weight.clone()));
            out.push((format!("layer{i}.wk"), l.attn.wk.weight.clone()));
            out.push((format!("layer{i}.wv"), l.attn.wv.weight.clone()));
            out.push((format!("layer{i}.wo"), l.attn.wo.weight.clone()));
            out.push((format!("layer{i}.mlp_norm"), l.mlp_norm.clone()));
            out.push((format!("layer{i}.w_gate"), l.mlp.w_gate.weight.clone()));
            out.push((format!("layer{i}.w_up"), l.mlp.w_up.weight.clone()));
            out.push((format!("layer{i}.w_down"), l.mlp.w_down.weight.clone()));
        }
        out.push(("final_norm".to_string(), self.final_norm.clone()));
        out.push(("head".to_string(), self.head.weight.clone()));
        out
    }

    /// Quantizable linears of one role: one per layer for the per-layer
    /// roles, a single entry for embed/head.
    pub fn linears_mut(&mut self, role: WeightRole) -> Vec<&mut QuantizedLinear<T>> {
        match role {
            WeightRole::Embed => vec![&mut self.embed],
            WeightRole::Head => vec![&mut self.head],
            _ => self
                .layers
                .iter_mut()
                .map(|l| match role {
                    WeightRole::Q => &mut l.attn.wq,
                    WeightRole::K => &mut l.attn.wk,
                    WeightRole::V => &mut l.attn.wv,
                    WeightRole::O => &mut l.attn.wo,
                    WeightRole::Gate => &mut l.mlp.w_gate,
                    WeightRole::Up => &mut l.mlp.w_up,
                    WeightRole::Down => &mut l.mlp.w_down,
                    WeightRole::Embed | WeightRole::Head => unreachable!(),
                })
                .collect(),
        }
    }

    pub fn linears(&self, role: WeightRole) -> Vec<&QuantizedLinear<T>> {
        match role {
            WeightRole::Embed => vec![&self.embed],
            WeightRole::Head => vec![&self.head],
            _ => self
                .layers
                .iter()
                .map(|l| match role {
                    WeightRole::Q => &l.attn.wq,
                    WeightRole::K => &l.attn.wk,
                    WeightRole::V => &l.attn.wv,
                    WeightRole::O => &l.attn.wo,
                    WeightRole::Gate => &l.mlp.w_gate,
                    WeightRole::Up => &l.mlp.w_up,
                    WeightRole::Down => &l.mlp.w_down,
                    WeightRole::Embed | WeightRole::Head => unreachable!(),
                })
                .collect(),
        }
    }

    pub fn weight_name(layer: usize, role: WeightRole) -> String {
        let suffix = match role {
            WeightRole::Q => "wq",
            WeightRole::K => "wk",
            WeightRole::V => "wv",
            WeightRole::O => "wo",
            WeightRole::Gate => "w_gate",
            WeightRole::Up => "w_up",
            WeightRole::Down => "w_down",
            WeightRole::Embed => return "embed".to_string(),
            WeightRole::Head => return "head".to_string(),
        };
        format!("layer{layer}.{suffix}")
    }

    pub fn zero_grads(&self) {
        for (_, p) in self.named_params() {
            p.borrow_mut().zero_grad();
        }
    }

    pub fn to_f64_model(&self) -> MicroLM<f64> {
        self.convert(|t| {
            let mut c = t.map(|x| x.to_f64());
            c.requires_grad = t.requires_grad;
            c
        })
    }

    fn convert<U: Scalar>(&self, f: impl Fn(&Tensor<T>) -> Tensor<U>) -> MicroLM<U> {
        let conv = |s: &SharedTensor<T>| shared(f(&s.borrow()));
        let conv_lin = |l: &QuantizedLinear<T>| QuantizedLinear {
            weight: conv(&l.weight),
            quantizer: l.quantizer.clone(),
        };
        MicroLM {
            config: self.config.clone(),
            embed: conv_lin(&self.embed),
            layers: self
                .layers
                .iter()
                .map(|l| LayerBlock {
                    attn_norm: conv(&l.attn_norm),
                    attn: AttentionBlock {
                        layer_id: l.attn.layer_id,
                        wq: conv_lin(&l.attn.wq),
                        wk: conv_lin(&l.attn.wk),
                        wv: conv_lin(&l.attn.wv),
                        wo: conv_lin(&l.attn.wo),
                    },
                    mlp_norm: conv(&l.mlp_norm),
                    mlp: MlpBlock {
                        w_gate: conv_lin(&l.mlp.w_gate),
                        w_up: conv_lin(&l.mlp.w_up),
                        w_down: conv_lin(&l.mlp.w_down),
                    },
                })
                .collect(),
            final_norm: conv(&self.final_norm),
            head: conv_lin(&self.head),
            activation_quant: self.activation_quant.clone(),
        }
    }

    fn quantizable_roles() -> impl Iterator<Item = WeightRole> {
        WeightRole::ALL.into_iter().chain([WeightRole::Embed, WeightRole::Head])
    }

    /// Toggle every attached weight quantizer.
    pub fn set_quantizers_enabled(&mut self, enabled: bool) {
        for role in Self::quantizable_roles() {
            for lin in self.linears_mut(role) {
                if let Some(q) = &mut lin.quantizer {
                    q.enabled = enabled;
                }
            }
        }
    }

    pub fn quantizer_count(&self) -> usize {
        Self::quantizable_roles()
            .map(|r| self.linears(r).iter().filter(|l| l.quantizer.is_some()).count())
            .sum()
    }

    fn act_point(
        &self,
        name: String,
        var: Var<T>,
        opts: ForwardOpts,
        sink: &mut Vec<(String, Var<T>)>,
    ) -> Result<Var<T>> {
        let out = if opts.act_quant {
            match self.activation_quant.as_ref().and_then(|m| m.get(&name)) {
                Some(state) if state.enabled => {
                    let value = var.value();
                    let y = quant::quantize_dequantize(&value, state)?;
                    let ones = vec![T::one(); value.numel()];
                    var.pass_through(y, ones)?
                }
                _ => var,
            }
        } else {
            var
        };
        sink.push((name, out.clone()));
        Ok(out)
    }

    /// Run the model over a [batch, seq] token grid.
    pub fn forward(
        &self,
        tokens: &[u32],
        batch: usize,
        seq: usize,
        opts: ForwardOpts,
    ) -> Result<ForwardPass<T>> {
        if tokens.len() != batch * seq || batch == 0 || seq == 0 {
            return Err(Error::Invalid(format!(
                "token grid {}x{} does not match {} ids",
                batch,
                seq,
                tokens.len()
            )));
        }
        if seq > self.config.max_seq_len {
            return Err(Error::Invalid(format!(
                "sequence length {seq} exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        let cfg = &self.config;
        let (d, h, hd) = (cfg.d_model, cfg.n_heads, cfg.head_dim());
        let eps = T::from_f64(cfg.rmsnorm_eps);
        let tape = Tape::new();
        let mut projections = Vec::new();
        let mut activations = Vec::new();

        let leaf = |p: &SharedTensor<T>| -> Var<T> {
            if opts.grad {
                tape.leaf(p)
            } else {
                tape.constant(p.borrow().clone())
            }
        };
        let lin_var = |l: &QuantizedLinear<T>| -> Result<Var<T>> {
            let lv = leaf(&l.weight);
            match &l.quantizer {
                Some(state) if state.enabled => quant::fake_quant_var(&lv, state),
                _ => Ok(lv),
            }
        };

        let scale = T::from_f64(1.0 / (hd as f64).sqrt());

        let embed = lin_var(&self.embed)?;
        let mut x = embed.embedding(tokens, &[batch, seq])?;

        for (li, layer) in self.layers.iter().enumerate() {
            let hn = x.rmsnorm(&leaf(&layer.attn_norm), eps)?;
            let q = hn.matmul(&lin_var(&layer.attn.wq)?)?;
            let k = hn.matmul(&lin_var(&layer.attn.wk)?)?;
            let v = hn.matmul(&lin_var(&layer.attn.wv)?)?;
            projections.push(ProjOutput { layer_id: li, role: ProjRole::Q, var: q.clone() });
            projections.push(ProjOutput { layer_id: li, role: ProjRole::K, var: k.clone() });
            projections.push(ProjOutput { layer_id: li, role: ProjRole::V, var: v.clone() });
            let q = self.act_point(format!("layer{li}.q"), q, opts, &mut activations)?;
            let k = self.act_point(format!("layer{li}.k"), k, opts, &mut activations)?;
            let v = self.act_point(format!("layer{li}.v"), v, opts, &mut activations)?;

            let qh = q.reshape(vec![batch, seq, h, hd])?.swap_axes(1, 2)?.rope(cfg.rope_base)?;
            let kh = k.reshape(vec![batch, seq, h, hd])?.swap_axes(1, 2)?.rope(cfg.rope_base)?;
            let vh = v.reshape(vec![batch, seq, h, hd])?.swap_axes(1, 2)?;

            let probs = qh.matmul(&kh.swap_axes(2, 3)?)?.causal_softmax(scale)?;
            let ctx = probs.matmul(&vh)?.swap_axes(1, 2)?.reshape(vec![batch, seq, d])?;
            let o = ctx.matmul(&lin_var(&layer.attn.wo)?)?;
            projections.push(ProjOutput { layer_id: li, role: ProjRole::O, var: o.clone() });
            let o = self.act_point(format!("layer{li}.o"), o, opts, &mut activations)?;
            x = x.add(&o)?;

            let hm = x.rmsnorm(&leaf(&layer.mlp_norm), eps)?;
            let gate = hm.matmul(&lin_var(&layer.mlp.w_gate)?)?;
            let gate = self.act_point(format!("layer{li}.gate"), gate, opts, &mut activations)?;
            let up = hm.matmul(&lin_var(&layer.mlp.w_up)?)?;
            let up = self.act_point(format!("layer{li}.up"), up, opts, &mut activations)?;
            let act = gate.silu()?.mul(&up)?;
            let down = act.matmul(&lin_var(&layer.mlp.w_down)?)?;
            let down = self.act_point(format!("layer{li}.down"), down, opts, &mut activations)?;
            x = x.add(&down)?;
        }

        let xf = x.rmsnorm(&leaf(&self.final_norm), eps)?;
        let logits = xf.matmul(&lin_var(&self.head)?)?;
        let logits = self.act_point("head".to_string(), logits, opts, &mut activations)?;

        Ok(ForwardPass { tape, logits, projections, activations })
    }

    /// Logits only, no gradient recording.
    pub fn logits(&self, tokens: &[u32], batch: usize, seq: usize, act_quant: bool) -> Result<Tensor<T>> {
        let fp = self.forward(tokens, batch, seq, ForwardOpts { grad: false, act_quant })?;
        Ok(fp.logits.value())
    }
}

/// Finite stand-in for -inf in masked-fill compositions: large enough
/// that exp underflows to exactly zero after row-max subtraction.
pub const MASK_FILL: f64 = -1e9;

/// Standalone causal attention over [batch, heads, seq, head_dim].
pub fn causal_attention<T: Scalar>(q: &Var<T>, k: &Var<T>, v: &Var<T>) -> Result<Var<T>> {
    causal_attention_with_probs(q, k, v).map(|(out, _)| out)
}

/// Causal attention that also exposes the attention probabilities.
pub fn causal_attention_with_probs<T: Scalar>(
    q: &Var<T>,
    k: &Var<T>,
    v: &Var<T>,
) -> Result<(Var<T>, Var<T>)> {
    let qs = q.shape();
    if qs.len() != 4 || qs != k.shape() || qs != v.shape() {
        return Err(Error::ShapeMismatch {
            op: "causal_attention",
            detail: format!("{:?} / {:?} / {:?}", q.shape(), k.shape(), v.shape()),
        });
    }
    let hd = qs[3];
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());
    let probs = q.matmul(&k.swap_axes(2, 3)?)?.causal_softmax(scale)?;
    let out = probs.matmul(v)?;
    Ok((out, probs))
}

/// Attach calibrated weight quantizers to the selected roles.
/// Returns the number of quantizers attached.
pub fn attach_quantizers<T: Scalar>(
    model: &mut MicroLM<T>,
    scheme: QuantScheme,
    policy: &[WeightRole],
    method: CalibrationMethod,
) -> Result<usize> {
    let mut count = 0;
    for &role in policy {
        for lin in model.linears_mut(role) {
            let w = lin.weight.borrow();
            let params = match method {
                CalibrationMethod::MinMax => calibrate_minmax(&w, &scheme)?,
                CalibrationMethod::Mse { grid_points } => calibrate_mse(&w, &scheme, grid_points)?,
            };
            drop(w);
            lin.quantizer = Some(QuantizerState::new(scheme, params));
            count += 1;
        }
    }
    Ok(count)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMethod {
    MinMax,
    Mse { grid_points: usize },
}

/// Observe activation ranges over sample batches and store per-tensor
/// asymmetric quantizers (applied only in eval mode).
pub fn calibrate_activations_minmax<T: Scalar>(
    model: &mut MicroLM<T>,
    sample: &[(Vec<u32>, usize, usize)],
    bits: u8,
) -> Result<usize> {
    if sample.is_empty() {
        return Err(Error::Invalid("activation calibration needs a nonempty sample".into()));
    }
    let mut ranges: BTreeMap<String, (f64, f64)> = BTreeMap::new();
    for (tokens, batch, seq) in sample {
        let fp = model.forward(tokens, *batch, *seq, ForwardOpts { grad: false, act_quant: false })?;
        for (name, var) in &fp.activations {
            let (lo, hi) = var.map_value(|d| {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for &v in d {
                    let v = v.to_f64();
                    if v < lo {
                        lo = v;
                    }
                    if v > hi {
                        hi = v;
                    }
                }
                (lo, hi)
            });
            let e = ranges.entry(name.clone()).or_insert((f64::INFINITY, f64::NEG_INFINITY));
            e.0 = e.0.min(lo);
            e.1 = e.1.max(hi);
        }
    }
    let scheme = QuantScheme::new(bits, Symmetry::Asymmetric, Granularity::PerTensor)?;
    let (qmin, qmax) = scheme.grid();
    let mut map = ActivationQuant::new();
    for (name, (lo, hi)) in ranges {
        let s = (((hi - lo) / qmax as f64) as f32).max(quant::SCALE_FLOOR);
        let z = (-lo / s as f64).round_ties_even().clamp(qmin as f64, qmax as f64) as i32;
        map.insert(
            name,
            QuantizerState::new(scheme, QuantParams { scale: vec![s], zero_point: vec![z] }),
        );
    }
    let n = map.len();
    model.activation_quant = Some(map);
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 13,
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ff: 24,
            max_seq_len: 16,
            rope_base: 10000.0,
            rmsnorm_eps: 1e-5,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::default();
        c.validate().unwrap();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.n_heads = 64; // head_dim 2 is even, fine
        c.validate().unwrap();
        c.n_heads = 128; // head_dim 1 is odd
        assert!(c.validate().is_err());
    }

    #[test]
    fn rmsnorm_hand_cases() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_vec(vec![1, 2], vec![3.0, 4.0]).unwrap());
        let w = tape.constant(Tensor::full(vec![2], 1.0));
        let y = x.rmsnorm(&w, 0.0).unwrap();
        let want = [3.0 / 12.5f64.sqrt(), 4.0 / 12.5f64.sqrt()];
        for (a, b) in y.value().data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }

        // Constant vector, eps -> 0: outputs approach sign(c).
        let x = tape.constant(Tensor::from_vec(vec![1, 4], vec![-2.5; 4]).unwrap());
        let w4 = tape.constant(Tensor::full(vec![4], 1.0));
        let y = x.rmsnorm(&w4, 1e-12).unwrap();
        for &v in y.value().data() {
            assert!((v + 1.0).abs() < 1e-9);
        }

        // Zero weight zeroes the output.
        let wz = tape.constant(Tensor::full(vec![4], 0.0));
        let x = tape.constant(Tensor::from_vec(vec![1, 4], vec![1.0, -7.0, 0.3, 2.2]).unwrap());
        assert!(x.rmsnorm(&wz, 1e-5).unwrap().value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attention_single_token_returns_v() {
        let tape = Tape::<f64>::new();
        let mut rng = Rng::new(4);
        let q = tape.constant(Tensor::rand_uniform(vec![1, 2, 1, 4], -1.0, 1.0, &mut rng));
        let k = tape.constant(Tensor::rand_uniform(vec![1, 2, 1, 4], -1.0, 1.0, &mut rng));
        let v = tape.constant(Tensor::rand_uniform(vec![1, 2, 1, 4], -1.0, 1.0, &mut rng));
        let out = causal_attention(&q, &k, &v).unwrap();
        assert_eq!(out.value().data(), v.value().data());
    }

    #[test]
    fn attention_identical_keys_average_values() {
        let tape = Tape::<f64>::new();
        let mut rng = Rng::new(5);
        let q = tape.constant(Tensor::rand_uniform(vec![1, 1, 2, 4], -1.0, 1.0, &mut rng));
        // Both key rows identical -> uniform softmax at position 1.
        let krow: Vec<f64> = (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let mut kd = krow.clone();
        kd.extend_from_slice(&krow);
        let k = tape.constant(Tensor::from_vec(vec![1, 1, 2, 4], kd).unwrap());
        let v = tape.constant(Tensor::rand_uniform(vec![1, 1, 2, 4], -1.0, 1.0, &mut rng));
        let out = causal_attention(&q, &k, &v).unwrap();
        let vd = v.value();
        for j in 0..4 {
            let mean = 0.5 * (vd.data()[j] + vd.data()[4 + j]);
            assert!((out.value().data()[4 + j] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_sum_to_one_and_row0_one_hot() {
        let tape = Tape::<f64>::new();
        let mut rng = Rng::new(6);
        let q = tape.constant(Tensor::rand_uniform(vec![1, 2, 5, 4], -1.0, 1.0, &mut rng));
        let k = tape.constant(Tensor::rand_uniform(vec![1, 2, 5, 4], -1.0, 1.0, &mut rng));
        let v = tape.constant(Tensor::rand_uniform(vec![1, 2, 5, 4], -1.0, 1.0, &mut rng));
        let (_, probs) = causal_attention_with_probs(&q, &k, &v).unwrap();
        let p = probs.value();
        for h in 0..2 {
            for i in 0..5 {
                let row = &p.data()[(h * 5 + i) * 5..(h * 5 + i + 1) * 5];
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
                if i == 0 {
                    assert_eq!(row[0], 1.0);
                    assert!(row[1..].iter().all(|&x| x == 0.0));
                }
            }
        }
    }

    #[test]
    fn forward_is_causal_bitwise_for_every_layer_count() {
        for n_layers in 1..=4 {
            let mut cfg = tiny_config();
            cfg.n_layers = n_layers;
            let model = MicroLM::<f32>::new(cfg, 7).unwrap();
            let tokens: Vec<u32> = vec![1, 2, 3, 4, 5, 6];
            let a = model.logits(&tokens, 1, 6, false).unwrap();
            let mut perturbed = tokens.clone();
            perturbed[4] = 9;
            let b = model.logits(&perturbed, 1, 6, false).unwrap();
            let vocab = model.config.vocab_size;
            for t in 0..4 {
                assert_eq!(
                    &a.data()[t * vocab..(t + 1) * vocab],
                    &b.data()[t * vocab..(t + 1) * vocab],
                    "{n_layers} layers: position {t} changed"
                );
            }
            assert_ne!(
                &a.data()[4 * vocab..5 * vocab],
                &b.data()[4 * vocab..5 * vocab],
                "{n_layers} layers: perturbed position should change"
            );
        }
    }

    #[test]
    fn quantizers_disabled_equals_fp_exactly() {
        let mut model = MicroLM::<f32>::new(tiny_config(), 8).unwrap();
        let tokens: Vec<u32> = vec![0, 1, 2, 3];
        let fp = model.logits(&tokens, 1, 4, false).unwrap();
        let scheme =
            QuantScheme::new(4, Symmetry::SymmetricSigned, Granularity::PerChannel { axis: 1 })
                .unwrap();
        attach_quantizers(&mut model, scheme, &WeightRole::ALL, CalibrationMethod::MinMax)
            .unwrap();
        model.set_quantizers_enabled(false);
        let off = model.logits(&tokens, 1, 4, false).unwrap();
        assert_eq!(fp.data(), off.data());
    }

    #[test]
    fn on_grid_weights_quantize_exactly() {
        // Snap every weight onto its calibrated grid, then compare the
        // quantized forward against the FP forward on the snapped
        // weights: idempotence makes the quantizer a bitwise no-op.
        let mut model = MicroLM::<f32>::new(tiny_config(), 9).unwrap();
        let scheme =
            QuantScheme::new(4, Symmetry::SymmetricSigned, Granularity::PerChannel { axis: 1 })
                .unwrap();
        attach_quantizers(&mut model, scheme, &WeightRole::ALL, CalibrationMethod::MinMax)
            .unwrap();
        for role in WeightRole::ALL {
            for lin in model.linears_mut(role) {
                let snapped = {
                    let w = lin.weight.borrow();
                    crate::quant::quantize_dequantize(&w, lin.quantizer.as_ref().unwrap())
                        .unwrap()
                };
                let mut w = lin.weight.borrow_mut();
                w.data_mut().copy_from_slice(snapped.data());
            }
        }
        let tokens: Vec<u32> = vec![5, 6, 7, 8, 9];
        model.set_quantizers_enabled(false);
        let fp = model.logits(&tokens, 1, 5, false).unwrap();
        model.set_quantizers_enabled(true);
        let q = model.logits(&tokens, 1, 5, false).unwrap();
        assert_eq!(fp.data(), q.data());
    }

    #[test]
    fn fused_causal_softmax_matches_masked_composition_bitwise() {
        // The fused op must equal mul_scalar + masked_fill(-1e9) +
        // softmax exactly: masked exps underflow to zero, and adding
        // zeros to the row sum is exact.
        let tape = Tape::<f32>::new();
        let mut rng = Rng::new(17);
        let scores = tape.constant(Tensor::rand_uniform(vec![2, 2, 6, 6], -4.0, 4.0, &mut rng));
        let scale = 0.37f32;
        let fused = scores.causal_softmax(scale).unwrap();

        let mut mask = vec![false; 2 * 2 * 6 * 6];
        for bh in 0..4 {
            for i in 0..6 {
                for j in (i + 1)..6 {
                    mask[(bh * 6 + i) * 6 + j] = true;
                }
            }
        }
        let composed = scores
            .mul_scalar(scale)
            .unwrap()
            .masked_fill(Arc::new(mask), MASK_FILL as f32)
            .unwrap()
            .softmax_last()
            .unwrap();
        assert_eq!(fused.value().data(), composed.value().data());
    }

    #[test]
    fn attach_counts_and_scale_lengths() {
        let mut model = MicroLM::<f32>::new(ModelConfig::default(), 1).unwrap();
        let scheme =
            QuantScheme::new(4, Symmetry::SymmetricSigned, Granularity::PerChannel { axis: 1 })
                .unwrap();
        let n = attach_quantizers(&mut model, scheme, &WeightRole::ALL, CalibrationMethod::MinMax)
            .unwrap();
        assert_eq!(n, 28, "7 quantizers per layer, 4 layers");
        assert_eq!(model.quantizer_count(), 28);
        // Per-channel over the output axis: scale length == output dim.
        let q = &model.layers[0].attn.wq.quantizer.as_ref().unwrap();
        assert_eq!(q.params.scale.len(), 128);
        let g = &model.layers[0].mlp.w_gate.quantizer.as_ref().unwrap();
        assert_eq!(g.params.scale.len(), 344);
    }

    #[test]
    fn empty_policy_means_fp() {
        let mut model = MicroLM::<f32>::new(tiny_config(), 10).unwrap();
        let tokens: Vec<u32> = vec![1, 2, 3];
        let fp = model.logits(&tokens, 1, 3, false).unwrap();
        let scheme =
            QuantScheme::new(4, Symmetry::SymmetricSigned, Granularity::PerChannel { axis: 1 })
                .unwrap();
        let n = attach_quantizers(&mut model, scheme, &[], CalibrationMethod::MinMax).unwrap();
        assert_eq!(n, 0);
        assert_eq!(model.logits(&tokens, 1, 3, false).unwrap().data(), fp.data());
    }

    #[test]
    fn out_of_range_token_is_error() {
        let model = MicroLM::<f32>::new(tiny_config(), 11).unwrap();
        assert!(model.logits(&[99], 1, 1, false).is_err());
    }

    #[test]
    fn activation_calibration_hand_case() {
        // Observed range [-1, 3] at 16 bits: s = 4/65535, z = round(1/s).
        let mut model = MicroLM::<f32>::new(tiny_config(), 12).unwrap();
        let sample = vec![(vec![1u32, 2, 3, 4], 1usize, 4usize)];
        calibrate_activations_minmax(&mut model, &sample, 16).unwrap();
        let map = model.activation_quant.as_ref().unwrap();
        assert_eq!(map.len(), 2 * 7 + 1, "seven points per layer plus head");

        let s = (4.0f64 / 65535.0) as f32;
        let z = (1.0 / s as f64).round_ties_even() as i32;
        let scheme = QuantScheme::new(16, Symmetry::Asymmetric, Granularity::PerTensor).unwrap();
        let want = QuantParams { scale: vec![s], zero_point: vec![z] };
        // Verify the formula on a synthetic range via the same code path.
        let t = Tensor::from_vec(vec![2], vec![-1.0f32, 3.0]).unwrap();
        let got = calibrate_minmax(&t, &scheme).unwrap();
        assert_eq!(got.scale, want.scale);
        assert_eq!(got.zero_point, want.zero_point);
    }

    #[test]
    fn embed_and_head_quantization_is_opt_in() {
        let mut model = MicroLM::<f32>::new(tiny_config(), 14).unwrap();
        let tokens: Vec<u32> = vec![0, 1, 2, 3];
        let fp = model.logits(&tokens, 1, 4, false).unwrap();
        let scheme =
            QuantScheme::new(4, Symmetry::SymmetricSigned, Granularity::PerChannel { axis: 1 })
                .unwrap();
        // Default policy leaves embed/head alone.
        attach_quantizers(&mut model, scheme, &WeightRole::ALL, CalibrationMethod::MinMax)
            .unwrap();
        assert!(model.embed.quantizer.is_none());
        assert!(model.head.quantizer.is_none());

        // Opting in quantizes them and changes the forward.
        let n = attach_quantizers(
            &mut model,
            scheme,
            &[WeightRole::Embed, WeightRole::Head],
            CalibrationMethod::MinMax,
        )
        .unwrap();
        assert_eq!(n, 2);
        assert_eq!(model.quantizer_count(), 2 * 7 + 2);
        let q = model.logits(&tokens, 1, 4, false).unwrap();
        assert_ne!(fp.data(), q.data());
    }

    #[test]
    fn deep_clone_is_independent() {
        let model = MicroLM::<f32>::new(tiny_config(), 13).unwrap();
        let copy = model.deep_clone();
        model.embed.weight.borrow_mut().data_mut()[0] += 1.0;
        assert_ne!(model.embed.weight.borrow().data()[0], copy.embed.weight.borrow().data()[0]);
    }
}
