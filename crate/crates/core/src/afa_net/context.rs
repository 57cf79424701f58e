use std::collections::BTreeMap;

use crate::nn::{ParamId, ParamStore, Real, Tape, Tensor, Var};

/// Whether batch norm uses batch statistics (and records running-stat updates) or frozen stats.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Replacement values for named attention / SE gates, used for ablations and identity checks.
///
/// A value list of length one fills the whole gate; otherwise it must have one entry per gate
/// channel and is broadcast over batch and space.
#[derive(Clone, Debug, Default)]
pub struct GateOverrides(BTreeMap<String, Vec<f64>>);

impl GateOverrides {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, gate: impl Into<String>, values: Vec<f64>) -> &mut Self {
        self.0.insert(gate.into(), values);
        self
    }

    /// Pins a gate to 1 everywhere.
    pub fn ones(&mut self, gate: impl Into<String>) -> &mut Self {
        self.set(gate, vec![1.0])
    }

    pub fn get(&self, gate: &str) -> Option<&[f64]> {
        self.0.get(gate).map(Vec::as_slice)
    }
}

/// Pending running-statistics update produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

/// Exponential-average factor for running statistics.
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// State for one forward pass.
pub struct Ctx<'a, T: Real> {
    pub tape: Tape<T>,
    params: &'a ParamStore<T>,
    mode: Mode,
    param_vars: Vec<Option<Var>>,
    bn_updates: Vec<BnUpdate<T>>,
    overrides: Option<&'a GateOverrides>,
    recorded: Option<Vec<(String, Tensor<T>)>>,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn new(params: &'a ParamStore<T>, mode: Mode) -> Self {
        Self {
            tape: Tape::new(),
            params,
            mode,
            param_vars: vec![None; params.len()],
            bn_updates: Vec::new(),
            overrides: None,
            recorded: None,
        }
    }

    pub fn with_overrides(mut self, overrides: &'a GateOverrides) -> Self {
        self.overrides = Some(overrides);
        self
    }

    /// Keeps a copy of every gate value computed during the pass.
    pub fn record_gates(mut self) -> Self {
        self.recorded = Some(Vec::new());
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &'a ParamStore<T> {
        self.params
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.tape.constant(t)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id] {
            return v;
        }
        let v = self.tape.param(id, self.params.get(id).clone());
        self.param_vars[id] = Some(v);
        v
    }

    pub(crate) fn push_bn_update(&mut self, u: BnUpdate<T>) {
        self.bn_updates.push(u);
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate<T>> {
        std::mem::take(&mut self.bn_updates)
    }

    pub fn recorded_gates(&self) -> &[(String, Tensor<T>)] {
        self.recorded.as_deref().unwrap_or(&[])
    }

    /// Passes a computed gate through, replacing it with a constant when overridden.
    pub(crate) fn gate(&mut self, name: &str, computed: Var) -> Var {
        if let Some(values) = self.overrides.and_then(|o| o.get(name)) {
            let shape = self.tape.shape(computed);
            let [n, c, h, w] = shape;
            let per = h * w;
            let data = (0..n * c * per)
                .map(|i| {
                    let v = if values.len() == 1 {
                        values[0]
                    } else {
                        values[(i / per) % c]
                    };
                    T::from_f64_lossy(v)
                })
                .collect();
            assert!(
                values.len() == 1 || values.len() == c,
                "override for `{name}` has {} values, gate has {c} channels",
                values.len()
            );
            return self.tape.constant(Tensor::from_vec(shape, data));
        }
        if let Some(rec) = self.recorded.as_mut() {
            rec.push((name.to_string(), self.tape.value(computed).clone()));
        }
        computed
    }
}

/// Folds batch statistics into the running buffers.
pub fn apply_bn_updates<T: Real>(params: &mut ParamStore<T>, updates: &[BnUpdate<T>]) {
    let m = T::from_f64_lossy(BN_MOMENTUM);
    let keep = T::one() - m;
    for u in updates {
        for (r, &b) in params.get_mut(u.mean_id).data_mut().iter_mut().zip(&u.batch_mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in params.get_mut(u.var_id).data_mut().iter_mut().zip(&u.batch_var) {
            *r = keep * *r + m * b;
        }
    }
}
