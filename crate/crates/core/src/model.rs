//! Parameters and forward graph of the multi-view hashing network.
//!
//! Per enabled view `m` the graph computes
//!
//! ```text
//! E_m = tanh(relu(Z_m W1_m + b1_m) W2_m + b2_m)      encoder
//! w_m = sigmoid(E_m Wc_m + bc_m),  C_m = w_m ⊙ E_m   confidence gate
//! ```
//!
//! then fuses `A = Σ_m p_m C_m` with trainable scalars `p_m`, applies the
//! residual expansion block `G = relu(A Wu1 + bu1) Wu2 + bu2 + A`, and
//! produces `h = tanh(G Wh + bh)`. Codes are `sign(h)`; during training a
//! linear head `y' = h Wy + by` predicts the labels.
//!
//! Every stage can be switched off through [`Ablation`].

use std::convert::Infallible;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nd::{Tape, Tensor, Var};
use crate::retrieval::BinaryCodes;

/// Expansion factor of the residual block's hidden layer.
pub const EXPANSION: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    WeightedSum,
    Concat,
}

/// Architecture switches. The default is the full model over every view.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub use_gate: bool,
    pub use_adaptive: bool,
    pub use_dilation: bool,
    /// Indices of the views fed to the network; `None` means all.
    pub views_enabled: Option<Vec<usize>>,
    pub fusion: Fusion,
    /// One gate shared by every view instead of one per view.
    pub shared_gate: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            use_gate: true,
            use_adaptive: true,
            use_dilation: true,
            views_enabled: None,
            fusion: Fusion::WeightedSum,
            shared_gate: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Embedding width shared by every view after encoding.
    pub d: usize,
    /// Code length in bits.
    pub k: usize,
    pub n_classes: usize,
    pub view_dims: Vec<usize>,
    pub ablation: Ablation,
}

impl ModelConfig {
    pub fn new(view_dims: Vec<usize>, d: usize, k: usize, n_classes: usize) -> Self {
        Self {
            d,
            k,
            n_classes,
            view_dims,
            ablation: Ablation::default(),
        }
    }

    pub fn n_views(&self) -> usize {
        self.view_dims.len()
    }

    pub fn enabled_views(&self) -> Vec<usize> {
        match &self.ablation.views_enabled {
            Some(v) => v.clone(),
            None => (0..self.n_views()).collect(),
        }
    }

    /// Width of the fused representation `A`.
    pub fn fused_dim(&self) -> usize {
        match self.ablation.fusion {
            Fusion::WeightedSum => self.d,
            Fusion::Concat => self.d * self.enabled_views().len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.k == 0 {
            return bad("code length must be positive".into());
        }
        if self.d == 0 {
            return bad("embedding width must be positive".into());
        }
        if self.n_classes == 0 {
            return bad("at least one class is required".into());
        }
        if self.view_dims.is_empty() {
            return bad("at least one view is required".into());
        }
        if let Some(m) = self.view_dims.iter().position(|&d| d == 0) {
            return bad(format!("view {m} has input width 0"));
        }
        let enabled = self.enabled_views();
        if enabled.is_empty() {
            return bad("at least one view must be enabled".into());
        }
        for (i, &m) in enabled.iter().enumerate() {
            if m >= self.n_views() {
                return bad(format!("enabled view {m} does not exist"));
            }
            if enabled[..i].contains(&m) {
                return bad(format!("view {m} enabled twice"));
            }
        }
        if self.ablation.fusion == Fusion::Concat && self.ablation.use_adaptive {
            return bad("concat fusion cannot be combined with adaptive view weights".into());
        }
        Ok(())
    }
}

/// `x W + b`
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub w: T,
    pub b: T,
}

/// Two-layer per-view encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    pub hidden: Linear<T>,
    pub out: Linear<T>,
}

/// Every trainable quantity of the network. `T` is [`Tensor`] for stored
/// parameters and [`Var`] once bound to a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    pub encoders: Vec<Encoder<T>>,
    /// One per view, or a single entry when the gate is shared.
    pub gates: Vec<Linear<T>>,
    /// 1×1 confidence weight per view.
    pub view_weights: Vec<T>,
    pub expand: Linear<T>,
    pub contract: Linear<T>,
    pub hash: Linear<T>,
    pub classifier: Linear<T>,
}

pub type ModelParams = Params<Tensor>;

impl<T> Params<T> {
    /// Structure-preserving map in canonical order, stopping at the first
    /// error.
    pub fn try_map<U, E>(&self, mut f: impl FnMut(&str, &T) -> std::result::Result<U, E>) -> std::result::Result<Params<U>, E> {
        let mut lin = |name: &str, l: &Linear<T>| -> std::result::Result<Linear<U>, E> {
            Ok(Linear {
                w: f(&format!("{name}.w"), &l.w)?,
                b: f(&format!("{name}.b"), &l.b)?,
            })
        };
        let mut encoders = Vec::with_capacity(self.encoders.len());
        for (m, e) in self.encoders.iter().enumerate() {
            encoders.push(Encoder {
                hidden: lin(&format!("encoder{m}.hidden"), &e.hidden)?,
                out: lin(&format!("encoder{m}.out"), &e.out)?,
            });
        }
        let mut gates = Vec::with_capacity(self.gates.len());
        for (m, g) in self.gates.iter().enumerate() {
            gates.push(lin(&format!("gate{m}"), g)?);
        }
        let expand = lin("dilation.expand", &self.expand)?;
        let contract = lin("dilation.contract", &self.contract)?;
        let hash = lin("hash", &self.hash)?;
        let classifier = lin("classifier", &self.classifier)?;
        let mut view_weights = Vec::with_capacity(self.view_weights.len());
        for (m, p) in self.view_weights.iter().enumerate() {
            view_weights.push(f(&format!("view_weight{m}"), p)?);
        }
        Ok(Params {
            encoders,
            gates,
            view_weights,
            expand,
            contract,
            hash,
            classifier,
        })
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> Params<U> {
        match self.try_map(|n, t| Ok::<_, Infallible>(f(n, t))) {
            Ok(p) => p,
            Err(never) => match never {},
        }
    }

    /// `(name, value)` pairs in canonical order.
    pub fn entries(&self) -> Vec<(String, &T)> {
        let mut names = Vec::new();
        self.map(|name, _| names.push(name.to_owned()));
        names.into_iter().zip(self.values()).collect()
    }

    /// References in canonical order.
    pub fn values(&self) -> Vec<&T> {
        let mut out = Vec::new();
        for e in &self.encoders {
            out.extend([&e.hidden.w, &e.hidden.b, &e.out.w, &e.out.b]);
        }
        for g in &self.gates {
            out.extend([&g.w, &g.b]);
        }
        for l in [&self.expand, &self.contract, &self.hash, &self.classifier] {
            out.extend([&l.w, &l.b]);
        }
        out.extend(self.view_weights.iter());
        out
    }

    /// Mutable references in canonical order.
    pub fn values_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::new();
        for e in &mut self.encoders {
            out.extend([&mut e.hidden.w, &mut e.hidden.b, &mut e.out.w, &mut e.out.b]);
        }
        for g in &mut self.gates {
            out.extend([&mut g.w, &mut g.b]);
        }
        for l in [&mut self.expand, &mut self.contract, &mut self.hash, &mut self.classifier] {
            out.extend([&mut l.w, &mut l.b]);
        }
        out.extend(self.view_weights.iter_mut());
        out
    }
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases, view weights `1/M` over the
    /// enabled views.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d;
        let fused = config.fused_dim();
        let wide = EXPANSION * fused;
        let mut linear = |fan_in: usize, fan_out: usize| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            Linear {
                w: Tensor::from_fn(fan_in, fan_out, |_, _| rng.random_range(-limit..=limit)),
                b: Tensor::zeros(1, fan_out),
            }
        };
        let encoders = config
            .view_dims
            .iter()
            .map(|&dim| Encoder {
                hidden: linear(dim, d),
                out: linear(d, d),
            })
            .collect();
        let n_gates = if config.ablation.shared_gate { 1 } else { config.n_views() };
        let gates = (0..n_gates).map(|_| linear(d, d)).collect();
        let expand = linear(fused, wide);
        let contract = linear(wide, fused);
        let hash = linear(fused, config.k);
        let classifier = linear(config.k, config.n_classes);
        let p = 1.0 / config.enabled_views().len() as f64;
        Ok(Self {
            encoders,
            gates,
            view_weights: vec![Tensor::scalar(p); config.n_views()],
            expand,
            contract,
            hash,
            classifier,
        })
    }

    /// Checks every tensor against the shapes implied by `config`.
    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let reference = Self::init(config, 0)?;
        let mine = self.entries();
        let want = reference.entries();
        if mine.len() != want.len() {
            return Err(Error::Shape(format!(
                "{} parameter tensors, configuration implies {}",
                mine.len(),
                want.len()
            )));
        }
        for ((name, t), (_, r)) in mine.iter().zip(&want) {
            if t.shape() != r.shape() {
                return Err(Error::Shape(format!(
                    "{name} is {}x{}, configuration implies {}x{}",
                    t.rows(),
                    t.cols(),
                    r.rows(),
                    r.cols()
                )));
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.entries().iter().all(|(_, t)| t.is_finite())
    }

    /// Records every tensor as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Params<Var> {
        self.map(|_, t| tape.leaf(t.clone()))
    }

    /// Records every tensor as a constant, for inference.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Params<Var> {
        self.map(|_, t| tape.constant(t.clone()))
    }
}

/// Handles of every intermediate of one forward pass, per enabled view in
/// the order of [`ModelConfig::enabled_views`].
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub views: Vec<usize>,
    pub encoded: Vec<Var>,
    pub gates: Vec<Var>,
    pub gated: Vec<Var>,
    pub fused: Var,
    pub expanded: Option<Var>,
    pub global: Var,
    pub hash: Var,
    pub logits: Var,
}

/// Materialised intermediates of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub views: Vec<usize>,
    /// `E` per enabled view, S×d.
    pub encoded: Vec<Tensor>,
    /// Gate weights `w` per enabled view, S×d.
    pub gates: Vec<Tensor>,
    /// `C` per enabled view, S×d.
    pub gated: Vec<Tensor>,
    /// `A`
    pub fused: Tensor,
    /// `U`; absent when the residual block is disabled.
    pub expanded: Option<Tensor>,
    /// `G`
    pub global: Tensor,
    /// `h`
    pub hash: Tensor,
    /// `y'`
    pub logits: Tensor,
}

impl ForwardVars {
    pub fn materialise(&self, tape: &Tape) -> ForwardTrace {
        let get = |v: &Var| tape.value(*v).clone();
        ForwardTrace {
            views: self.views.clone(),
            encoded: self.encoded.iter().map(get).collect(),
            gates: self.gates.iter().map(get).collect(),
            gated: self.gated.iter().map(get).collect(),
            fused: get(&self.fused),
            expanded: self.expanded.as_ref().map(get),
            global: get(&self.global),
            hash: get(&self.hash),
            logits: get(&self.logits),
        }
    }
}

pub fn encode_view(tape: &mut Tape, params: &Params<Var>, m: usize, z: Var) -> Result<Var> {
    let enc = params
        .encoders
        .get(m)
        .ok_or_else(|| Error::Config(format!("no encoder for view {m}")))?;
    let hidden = tape.affine(z, enc.hidden.w, enc.hidden.b)?;
    let hidden = tape.relu(hidden);
    let out = tape.affine(hidden, enc.out.w, enc.out.b)?;
    Ok(tape.tanh(out))
}

/// Returns `(w, C)`. With the gate disabled `w` is all ones and `C` is `E`
/// itself.
pub fn gate_view(tape: &mut Tape, params: &Params<Var>, config: &ModelConfig, m: usize, e: Var) -> Result<(Var, Var)> {
    if !config.ablation.use_gate {
        let (r, c) = tape.value(e).shape();
        let ones = tape.constant(Tensor::ones(r, c));
        return Ok((ones, e));
    }
    let gate = if config.ablation.shared_gate {
        params.gates.first()
    } else {
        params.gates.get(m)
    }
    .ok_or_else(|| Error::Config(format!("no gate for view {m}")))?;
    let logits = tape.affine(e, gate.w, gate.b)?;
    let w = tape.sigmoid(logits);
    let c = tape.mul(w, e)?;
    Ok((w, c))
}

/// Combines gated views `(view index, C)` into `A`.
pub fn fuse(tape: &mut Tape, params: &Params<Var>, config: &ModelConfig, gated: &[(usize, Var)]) -> Result<Var> {
    let ab = &config.ablation;
    if gated.is_empty() {
        return Err(Error::Config("nothing to fuse".into()));
    }
    match ab.fusion {
        Fusion::Concat if ab.use_adaptive => Err(Error::Config(
            "concat fusion cannot be combined with adaptive view weights".into(),
        )),
        Fusion::Concat => {
            let parts: Vec<Var> = gated.iter().map(|&(_, c)| c).collect();
            tape.concat_cols(&parts)
        }
        Fusion::WeightedSum => {
            let mut acc: Option<Var> = None;
            for &(m, c) in gated {
                let term = if ab.use_adaptive {
                    let p = *params
                        .view_weights
                        .get(m)
                        .ok_or_else(|| Error::Config(format!("no view weight for view {m}")))?;
                    tape.scalar_scale(c, p)?
                } else {
                    c
                };
                acc = Some(match acc {
                    None => term,
                    Some(a) => tape.add(a, term)?,
                });
            }
            Ok(acc.expect("non-empty"))
        }
    }
}

/// Residual expansion block. Returns `(U, G)`; with the block disabled `U` is
/// absent and `G` is `A`.
pub fn dilate(tape: &mut Tape, params: &Params<Var>, config: &ModelConfig, a: Var) -> Result<(Option<Var>, Var)> {
    if !config.ablation.use_dilation {
        return Ok((None, a));
    }
    let u = tape.affine(a, params.expand.w, params.expand.b)?;
    let u = tape.relu(u);
    let back = tape.affine(u, params.contract.w, params.contract.b)?;
    let g = tape.add(back, a)?;
    Ok((Some(u), g))
}

pub fn hash_forward(tape: &mut Tape, params: &Params<Var>, g: Var) -> Result<Var> {
    let pre = tape.affine(g, params.hash.w, params.hash.b)?;
    Ok(tape.tanh(pre))
}

pub fn classify(tape: &mut Tape, params: &Params<Var>, h: Var) -> Result<Var> {
    tape.affine(h, params.classifier.w, params.classifier.b)
}

/// Sign with ties sent to +1.
pub fn binarize(h: &Tensor) -> BinaryCodes {
    let bits = h
        .data()
        .iter()
        .map(|&v| if v >= 0.0 { 1i8 } else { -1 })
        .collect();
    BinaryCodes::new(h.rows(), h.cols(), bits).expect("signs are ±1")
}

/// Full forward pass. `batch` holds one S×D_m input per view (disabled views
/// may hold anything, they are not read).
pub fn forward(tape: &mut Tape, params: &Params<Var>, config: &ModelConfig, batch: &[Var]) -> Result<ForwardVars> {
    if batch.len() != config.n_views() {
        return Err(Error::Shape(format!(
            "batch has {} views, model expects {}",
            batch.len(),
            config.n_views()
        )));
    }
    let views = config.enabled_views();
    let rows = tape.value(batch[views[0]]).rows();
    let mut encoded = Vec::with_capacity(views.len());
    let mut gates = Vec::with_capacity(views.len());
    let mut gated = Vec::with_capacity(views.len());
    for &m in &views {
        let z = batch[m];
        let zv = tape.value(z);
        if zv.cols() != config.view_dims[m] || zv.rows() != rows {
            return Err(Error::Shape(format!(
                "view {m} input is {}x{}, expected {rows}x{}",
                zv.rows(),
                zv.cols(),
                config.view_dims[m]
            )));
        }
        let e = encode_view(tape, params, m, z)?;
        let (w, c) = gate_view(tape, params, config, m, e)?;
        encoded.push(e);
        gates.push(w);
        gated.push((m, c));
    }
    let fused = fuse(tape, params, config, &gated)?;
    let (expanded, global) = dilate(tape, params, config, fused)?;
    let hash = hash_forward(tape, params, global)?;
    let logits = classify(tape, params, hash)?;
    Ok(ForwardVars {
        views,
        encoded,
        gates,
        gated: gated.into_iter().map(|(_, c)| c).collect(),
        fused,
        expanded,
        global,
        hash,
        logits,
    })
}

/// Inference-only forward pass over plain tensors.
pub fn infer(params: &ModelParams, config: &ModelConfig, batch: &[Tensor]) -> Result<ForwardTrace> {
    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let inputs: Vec<Var> = batch.iter().map(|x| tape.constant(x.clone())).collect();
    let vars = forward(&mut tape, &bound, config, &inputs)?;
    Ok(vars.materialise(&tape))
}

/// Hash activations `h` for all rows, computed in chunks of `chunk` rows.
pub fn hash_activations(params: &ModelParams, config: &ModelConfig, views: &[Tensor], chunk: usize) -> Result<Tensor> {
    let n = views.first().map_or(0, Tensor::rows);
    let chunk = chunk.max(1);
    let mut data = Vec::with_capacity(n * config.k);
    let mut start = 0;
    while start < n {
        let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
        let part: Vec<Tensor> = views.iter().map(|v| v.select_rows(&idx)).collect();
        data.extend_from_slice(infer(params, config, &part)?.hash.data());
        start += chunk;
    }
    Tensor::new(n, config.k, data)
}
