//! Named parameters, their binding onto a tape, and the shared layer helpers
//! (affine maps, attention, optimizer).

use std::cell::RefCell;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng::{self, Prng};
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// Parameter groups. A parameter's group is the prefix of its name before
/// the first `.`.
pub const GROUP_ENCODERS: &str = "encoders";
pub const GROUP_SFA: &str = "sfa";
pub const GROUP_BRANCHES: &str = "branches";
pub const GROUP_BASE: &str = "base";
pub const GROUP_ADAPTERS: &str = "adapters";

/// Frozen members of the encoder group (the text-encoder stand-in).
pub const FROZEN_ENCODER_PARAMS: [&str; 2] = ["encoders.table", "encoders.text_proj"];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

pub fn group_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::invalid("parameters", format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn remove_group(&mut self, group: &str) {
        self.params.retain(|k, _| group_of(k) != group);
    }

    pub fn groups(&self) -> Vec<String> {
        let mut g: Vec<String> = self.params.keys().map(|k| group_of(k).to_string()).collect();
        g.dedup();
        g
    }

    pub fn scalar_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// FNV-1a over names, shapes and raw bits of one group.
    pub fn checksum(&self, group: &str) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (name, t) in self.params.iter().filter(|(k, _)| group_of(k) == group) {
            eat(name.as_bytes());
            for &d in t.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    pub fn init_normal(&mut self, rng: &mut Prng, name: &str, shape: &[usize], std: f64) {
        self.insert(name, rng::normal_tensor(rng, shape.to_vec(), std));
    }

    /// `prefix.w` (`[fan_in, fan_out]`, std `gain/√fan_in`) and zero `prefix.b`.
    pub fn init_linear(&mut self, rng: &mut Prng, prefix: &str, fan_in: usize, fan_out: usize, gain: f64) {
        let std = gain / (fan_in as f64).sqrt();
        self.init_normal(rng, &format!("{prefix}.w"), &[fan_in, fan_out], std);
        self.insert(format!("{prefix}.b"), Tensor::zeros(vec![fan_out]));
    }

    pub fn init_zero_linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        self.insert(format!("{prefix}.w"), Tensor::zeros(vec![fan_in, fan_out]));
        self.insert(format!("{prefix}.b"), Tensor::zeros(vec![fan_out]));
    }

    /// Square query/key/value/output projections of width `d`.
    pub fn init_attention(&mut self, rng: &mut Prng, prefix: &str, d: usize) {
        for p in ["q", "k", "v", "o"] {
            let std = 1.0 / (d as f64).sqrt();
            self.init_normal(rng, &format!("{prefix}.{p}"), &[d, d], std);
        }
    }

    /// Copies every parameter under `from` to the same suffix under `to`.
    pub fn copy_prefix(&mut self, from: &str, to: &str) {
        let copies: Vec<(String, Tensor)> = self
            .params
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(from).map(|s| (format!("{to}{s}"), v.clone())))
            .collect();
        self.params.extend(copies);
    }
}

/// Which parameters receive gradients in a forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Trainable {
    None,
    /// Everything except the frozen base and the frozen text encoder.
    Stage1,
    /// Only the base denoiser (pretraining before it is frozen).
    Base,
    /// Only low-rank adapters.
    Adapters,
    All,
}

impl Trainable {
    pub fn includes(&self, name: &str) -> bool {
        match self {
            Trainable::None => false,
            Trainable::All => true,
            Trainable::Base => group_of(name) == GROUP_BASE,
            Trainable::Adapters => group_of(name) == GROUP_ADAPTERS,
            Trainable::Stage1 => {
                let g = group_of(name);
                (g == GROUP_ENCODERS || g == GROUP_SFA || g == GROUP_BRANCHES)
                    && !FROZEN_ENCODER_PARAMS.contains(&name)
            }
        }
    }
}

/// Binds parameters from a store onto one tape, once per name.
pub struct Ctx<'t, 's> {
    tape: &'t Tape,
    store: &'s ParamStore,
    trainable: Trainable,
    adapter_scale: Option<f64>,
    bound: RefCell<BTreeMap<String, Var<'t>>>,
}

impl<'t, 's> Ctx<'t, 's> {
    pub fn new(tape: &'t Tape, store: &'s ParamStore, trainable: Trainable) -> Self {
        Self {
            tape,
            store,
            trainable,
            adapter_scale: None,
            bound: RefCell::new(BTreeMap::new()),
        }
    }

    /// Applies `adapters.*` low-rank deltas with scale `s` to attention
    /// projections that have them.
    pub fn with_adapters(mut self, scale: f64) -> Self {
        self.adapter_scale = Some(scale);
        self
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.contains(name)
    }

    pub fn p(&self, name: &str) -> Result<Var<'t>> {
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(*v);
        }
        let t = self.store.get(name)?;
        let v = if self.trainable.includes(name) {
            self.tape.param(t)?
        } else {
            self.tape.constant(t)?
        };
        self.bound.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    /// Uses `var` for parameter `name` from now on (e.g. to differentiate
    /// with respect to an externally created variable).
    pub fn bind(&self, name: &str, var: Var<'t>) {
        self.bound.borrow_mut().insert(name.to_string(), var);
    }

    pub fn constant(&self, t: &Tensor) -> Result<Var<'t>> {
        Ok(self.tape.constant(t)?)
    }

    pub fn constant_owned(&self, t: Tensor) -> Result<Var<'t>> {
        Ok(self.tape.constant_owned(t)?)
    }

    /// Adjoints of every bound trainable parameter, keyed by name.
    pub fn collect(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.bound
            .borrow()
            .iter()
            .filter(|(k, _)| self.trainable.includes(k))
            .map(|(k, v)| (k.clone(), grads.wrt(*v)))
            .collect()
    }

    /// `x · prefix.w + prefix.b` over the last axis.
    pub fn linear(&self, prefix: &str, x: Var<'t>) -> Result<Var<'t>> {
        let w = self.p(&format!("{prefix}.w"))?;
        let y = x.matmul(w)?;
        let bname = format!("{prefix}.b");
        if !self.has(&bname) {
            return Ok(y);
        }
        let b = self.p(&bname)?;
        Ok(y.add(b.broadcast_to(&y.shape())?)?)
    }

    /// `linear → tanh → linear`.
    pub fn mlp(&self, prefix: &str, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.linear(&format!("{prefix}.0"), x)?.tanh()?;
        self.linear(&format!("{prefix}.1"), h)
    }

    /// Attention projection `x · W`, plus `s · (x Aᵀ) Bᵀ` when an adapter for
    /// `name` exists and adapters are enabled.
    pub fn projection(&self, name: &str, x: Var<'t>) -> Result<Var<'t>> {
        let y = x.matmul(self.p(name)?)?;
        let Some(scale) = self.adapter_scale else {
            return Ok(y);
        };
        let a_name = format!("{GROUP_ADAPTERS}.{name}.a");
        if !self.has(&a_name) {
            return Ok(y);
        }
        let a = self.p(&a_name)?;
        let b = self.p(&format!("{GROUP_ADAPTERS}.{name}.b"))?;
        let delta = x.matmul_t(a)?.matmul_t(b)?.scale(scale)?;
        Ok(y.add(delta)?)
    }

    /// Single-head scaled dot-product attention of `queries` (`[B, N, d]`)
    /// over `context` (`[B, M, d]`), including the output projection. An
    /// empty context yields zeros.
    pub fn attention(&self, prefix: &str, queries: Var<'t>, context: Var<'t>) -> Result<Var<'t>> {
        let qs = queries.shape();
        let cs = context.shape();
        if qs.len() != 3 || cs.len() != 3 || qs[0] != cs[0] || qs[2] != cs[2] {
            return Err(crate::tensor::TensorError::ShapeMismatch {
                op: "attention",
                lhs: qs,
                rhs: cs,
            }
            .into());
        }
        if cs[1] == 0 {
            return self.constant_owned(Tensor::zeros(qs));
        }
        let d = qs[2] as f64;
        let q = self.projection(&format!("{prefix}.q"), queries)?;
        let k = self.projection(&format!("{prefix}.k"), context)?;
        let v = self.projection(&format!("{prefix}.v"), context)?;
        let weights = q.matmul_t(k)?.scale(1.0 / d.sqrt())?.softmax()?;
        let mixed = weights.matmul(v)?;
        self.projection(&format!("{prefix}.o"), mixed)
    }
}

/// First-order adaptive optimizer with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Ascends when `sign` is `-1.0`, descends when `1.0`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>, sign: f64) -> Result<()> {
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - self.beta2.powi(self.steps as i32);
        for (name, g) in grads {
            let p = store
                .get_mut(name)
                .ok_or_else(|| Error::invalid("optimizer", format!("no parameter `{name}`")))?;
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gv = sign * gv;
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                *pv -= self.lr * (*mv / bc1) / ((*vv / bc2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Elementwise sum of gradient maps.
pub fn accumulate(into: &mut BTreeMap<String, Tensor>, from: BTreeMap<String, Tensor>) {
    for (k, g) in from {
        match into.get_mut(&k) {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            None => {
                into.insert(k, g);
            }
        }
    }
}

pub fn scale_grads(grads: &mut BTreeMap<String, Tensor>, s: f64) {
    for g in grads.values_mut() {
        for v in g.data_mut() {
            *v *= s;
        }
    }
}
