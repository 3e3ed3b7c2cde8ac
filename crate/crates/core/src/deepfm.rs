//! DeepFM multi-quantile network.
//!
//! For a covariate row with active one-hot columns `c` (value `x_c`, which
//! is 1 for categorical levels and the standardized value for continuous
//! fields) the network predicts, for every grid level `j`,
//!
//! ```text
//! out_j   = b_j + sum_r A[r, j] phi_r(x) + a_j . mlp(e(x))
//! phi_r   = sum_c W[c, r] x_c + sum_d G[r, d] pair_d(x)
//! pair_d  = 1/2 [ (sum_c v_cd x_c)^2 - sum_c (v_cd x_c)^2 ]
//! ```
//!
//! The `R` channels `phi_r` are factorization machines sharing one set of
//! embeddings `v_c`; each level mixes them with its own weights `A[., j]`.
//! A location-scale family needs only two channels (`mu(x) + q_j s(x)`),
//! and sharing the first-order and interaction weights across levels keeps
//! the parameter count independent of the grid size. `e(x)` concatenates
//! the field embeddings `v_c x_c` and feeds a stack of dense layers. With
//! the interaction and deep parts switched off, every level is a linear
//! function of the covariates.
//!
//! Training minimizes the pinball loss summed over levels and rows with Adam
//! on mini-batches; gradients are derived by hand.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datagen::{Covariate, Dataset, FieldKind, FieldSchema};
use crate::error::{Error, Result};
use crate::quantreg::{pinball_loss, QuantileGrid};
use crate::rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `h`.
    #[inline]
    fn derivative(self, z: f64, h: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - h * h,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Optimizer {
    /// Adam with optional decoupled weight decay.
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
    Sgd {
        momentum: f64,
    },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeepFmConfig {
    pub embed_dim: usize,
    /// Number of shared factorization-machine channels mixed per level.
    pub channels: usize,
    pub hidden_sizes: Vec<usize>,
    pub activation: Activation,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
    /// Huber smoothing width of the training loss, on the standardized
    /// response scale. Zero trains on the exact pinball subgradient.
    pub smoothing: f64,
    pub use_deep: bool,
    pub use_interactions: bool,
    /// Standard deviation of the initial embedding entries.
    pub init_scale: f64,
    pub divergence_factor: f64,
    pub divergence_patience: usize,
    /// Share of the training rows held out for early stopping. Zero trains
    /// on every row for the full epoch budget.
    pub validation_fraction: f64,
    /// Epochs without a held-out improvement before training stops.
    pub patience: usize,
}

impl Default for DeepFmConfig {
    fn default() -> Self {
        DeepFmConfig {
            embed_dim: 8,
            channels: 4,
            hidden_sizes: vec![64, 32],
            activation: Activation::Relu,
            epochs: 50,
            batch_size: 256,
            learning_rate: 3e-3,
            optimizer: Optimizer::default(),
            seed: 0,
            smoothing: 1e-3,
            use_deep: true,
            use_interactions: true,
            init_scale: 0.05,
            divergence_factor: 1e3,
            divergence_patience: 3,
            validation_fraction: 0.1,
            patience: 10,
        }
    }
}

impl DeepFmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::Parameter("embed_dim must be at least 1".into()));
        }
        if self.channels == 0 {
            return Err(Error::Parameter("channels must be at least 1".into()));
        }
        if self.use_deep && (self.hidden_sizes.is_empty() || self.hidden_sizes.contains(&0)) {
            return Err(Error::Parameter(
                "hidden_sizes must be nonempty with positive widths".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Parameter("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Parameter(
                "batch_size and epochs must be at least 1".into(),
            ));
        }
        if !(0.0..0.5).contains(&self.validation_fraction) {
            return Err(Error::Parameter(
                "validation_fraction must lie in [0, 0.5)".into(),
            ));
        }
        if !(self.smoothing >= 0.0) {
            return Err(Error::Parameter("smoothing must be nonnegative".into()));
        }
        Ok(())
    }

    fn uses_embeddings(&self) -> bool {
        self.use_deep || self.use_interactions
    }
}

/// Train-set standardization of continuous fields and of the response.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    /// Per field; identity (0, 1) for categorical fields.
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub y_mean: f64,
    pub y_sd: f64,
}

impl Standardizer {
    pub fn identity(schema: &FieldSchema) -> Self {
        Standardizer {
            mean: vec![0.0; schema.len()],
            sd: vec![1.0; schema.len()],
            y_mean: 0.0,
            y_sd: 1.0,
        }
    }

    pub fn fit(data: &Dataset) -> Self {
        let schema = data.schema();
        let n = data.n() as f64;
        let mut st = Self::identity(schema);
        for (f, field) in schema.fields().iter().enumerate() {
            if let FieldKind::Continuous = field.kind {
                let vals: Vec<f64> = data
                    .rows()
                    .map(|r| match r[f] {
                        Covariate::Value(x) => x,
                        Covariate::Level(l) => l as f64,
                    })
                    .collect();
                let (m, s) = mean_sd(&vals, n);
                st.mean[f] = m;
                st.sd[f] = s;
            }
        }
        let (m, s) = mean_sd(data.response(), n);
        st.y_mean = m;
        st.y_sd = s;
        st
    }
}

fn mean_sd(vals: &[f64], n: f64) -> (f64, f64) {
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    (mean, if sd > 0.0 && sd.is_finite() { sd } else { 1.0 })
}

#[derive(Clone, Debug, PartialEq)]
struct DenseLayer {
    w: usize,
    b: usize,
    input: usize,
    output: usize,
}

/// Offsets of each parameter group in the flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
struct Layout {
    levels: usize,
    p: usize,
    k: usize,
    channels: usize,
    n_fields: usize,
    bias: Range<usize>,
    /// p × R
    linear: Range<usize>,
    /// R × L
    mix: Range<usize>,
    /// R × k
    gain: Range<usize>,
    embed: Range<usize>,
    layers: Vec<DenseLayer>,
    head: Range<usize>,
    last_width: usize,
    total: usize,
}

impl Layout {
    fn new(schema: &FieldSchema, levels: usize, cfg: &DeepFmConfig) -> Self {
        let p = schema.width();
        let k = cfg.embed_dim;
        let ch = cfg.channels;
        let mut at = 0;
        let mut take = |len: usize| {
            let r = at..at + len;
            at += len;
            r
        };
        let bias = take(levels);
        let linear = take(p * ch);
        let mix = take(ch * levels);
        let gain = take(if cfg.use_interactions { ch * k } else { 0 });
        let embed = take(if cfg.uses_embeddings() { p * k } else { 0 });
        let mut layers = Vec::new();
        let mut width = schema.len() * k;
        if cfg.use_deep {
            for &h in &cfg.hidden_sizes {
                let w = take(h * width).start;
                let b = take(h).start;
                layers.push(DenseLayer {
                    w,
                    b,
                    input: width,
                    output: h,
                });
                width = h;
            }
        }
        let head = take(if cfg.use_deep { levels * width } else { 0 });
        Layout {
            levels,
            p,
            k,
            channels: ch,
            n_fields: schema.len(),
            bias,
            linear,
            mix,
            gain,
            embed,
            layers,
            head,
            last_width: width,
            total: at,
        }
    }

    fn groups(&self) -> Vec<(String, Range<usize>)> {
        let mut g = vec![
            ("bias".to_string(), self.bias.clone()),
            ("linear".to_string(), self.linear.clone()),
            ("mix".to_string(), self.mix.clone()),
        ];
        if !self.gain.is_empty() {
            g.push(("fm_gain".into(), self.gain.clone()));
        }
        if !self.embed.is_empty() {
            g.push(("embedding".into(), self.embed.clone()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            g.push((format!("dense{i}.weight"), l.w..l.w + l.input * l.output));
            g.push((format!("dense{i}.bias"), l.b..l.b + l.output));
        }
        if !self.head.is_empty() {
            g.push(("head".into(), self.head.clone()));
        }
        g
    }
}

/// Per-epoch training diagnostics. Losses are exact (unsmoothed) pinball
/// sums over all training rows and levels, in response units.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainReport {
    pub initial_loss: f64,
    pub epoch_losses: Vec<f64>,
    /// Number of epochs whose loss did not exceed the previous epoch's.
    pub decreasing_epochs: usize,
    /// Held-out loss after each epoch, in response units (empty without a
    /// validation split).
    pub validation_losses: Vec<f64>,
    /// Epoch whose parameters were kept; 0 means the initialization.
    pub best_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeepFmQuantileModel {
    pub schema: FieldSchema,
    pub grid: QuantileGrid,
    pub config: DeepFmConfig,
    pub standardizer: Standardizer,
    params: Vec<f64>,
    pub train_report: TrainReport,
}

/// Scratch buffers for one forward/backward pass.
struct Workspace {
    active: Vec<(usize, f64)>,
    /// Field embeddings, n_fields × k.
    emb: Vec<f64>,
    sum: Vec<f64>,
    pair: Vec<f64>,
    phi: Vec<f64>,
    dphi: Vec<f64>,
    /// Pre-activations and activations per dense layer.
    z: Vec<Vec<f64>>,
    h: Vec<Vec<f64>>,
    out: Vec<f64>,
    dout: Vec<f64>,
    dh: Vec<f64>,
    dz: Vec<f64>,
    demb: Vec<f64>,
}

impl Workspace {
    fn new(l: &Layout) -> Self {
        Workspace {
            active: Vec::with_capacity(l.n_fields),
            emb: vec![0.0; l.n_fields * l.k],
            sum: vec![0.0; l.k],
            pair: vec![0.0; l.k],
            phi: vec![0.0; l.channels],
            dphi: vec![0.0; l.channels],
            z: l.layers.iter().map(|d| vec![0.0; d.output]).collect(),
            h: l.layers.iter().map(|d| vec![0.0; d.output]).collect(),
            out: vec![0.0; l.levels],
            dout: vec![0.0; l.levels],
            dh: Vec::new(),
            dz: Vec::new(),
            demb: vec![0.0; l.n_fields * l.k],
        }
    }
}

/// Huber-smoothed pinball loss and its derivative in `u`. With
/// `delta == 0` this is the exact loss with subgradient `tau - I(u <= 0)`.
#[inline]
pub fn smoothed_pinball(u: f64, tau: f64, delta: f64) -> (f64, f64) {
    let w = if u > 0.0 { tau } else { 1.0 - tau };
    if delta == 0.0 {
        return (pinball_loss(u, tau), if u > 0.0 { tau } else { tau - 1.0 });
    }
    let a = u.abs();
    if a <= delta {
        (w * u * u / (2.0 * delta), w * u / delta)
    } else {
        (w * (a - 0.5 * delta), w * u.signum())
    }
}

impl DeepFmQuantileModel {
    /// A model with every parameter zero and identity standardization.
    pub fn zeros(schema: FieldSchema, grid: QuantileGrid, config: DeepFmConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&schema, grid.len(), &config);
        Ok(DeepFmQuantileModel {
            standardizer: Standardizer::identity(&schema),
            params: vec![0.0; layout.total],
            schema,
            grid,
            config,
            train_report: TrainReport::default(),
        })
    }

    fn layout(&self) -> Layout {
        Layout::new(&self.schema, self.grid.len(), &self.config)
    }

    /// Checks that a deserialized model is internally consistent.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let layout = Layout::new(&self.schema, self.grid.len(), &self.config);
        if layout.total != self.params.len() {
            return Err(Error::Artifact(format!(
                "parameter vector has {} entries, architecture needs {}",
                self.params.len(),
                layout.total
            )));
        }
        if self.standardizer.mean.len() != self.schema.len()
            || self.standardizer.sd.len() != self.schema.len()
        {
            return Err(Error::Artifact("standardizer does not match schema".into()));
        }
        Ok(())
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Named parameter groups as ranges into [`params`](Self::params).
    pub fn parameter_groups(&self) -> Vec<(String, Range<usize>)> {
        self.layout().groups()
    }

    pub fn set_standardizer(&mut self, st: Standardizer) -> Result<()> {
        if st.mean.len() != self.schema.len() || st.sd.len() != self.schema.len() {
            return Err(Error::Parameter(
                "standardizer does not match schema".into(),
            ));
        }
        self.standardizer = st;
        Ok(())
    }

    fn active_into(&self, row: &[Covariate], out: &mut Vec<(usize, f64)>) {
        out.clear();
        let st = &self.standardizer;
        for (f, v) in row.iter().enumerate() {
            let off = self.schema.offset(f);
            match *v {
                Covariate::Level(l) => out.push((off + l as usize, 1.0)),
                Covariate::Value(x) => out.push((off, (x - st.mean[f]) / st.sd[f])),
            }
        }
    }

    /// Forward pass in standardized response units; fills `ws.out`.
    fn forward_ws(&self, l: &Layout, row: &[Covariate], ws: &mut Workspace) {
        let p = &self.params;
        let k = l.k;
        let ch = l.channels;
        let levels = l.levels;
        self.active_into(row, &mut ws.active);

        ws.phi.iter_mut().for_each(|v| *v = 0.0);
        for &(c, x) in &ws.active {
            let w = &p[l.linear.start + c * ch..l.linear.start + (c + 1) * ch];
            for (f, wr) in ws.phi.iter_mut().zip(w) {
                *f += wr * x;
            }
        }

        if !l.embed.is_empty() {
            ws.sum.iter_mut().for_each(|s| *s = 0.0);
            ws.pair.iter_mut().for_each(|s| *s = 0.0);
            for (f, &(c, x)) in ws.active.iter().enumerate() {
                let v = &p[l.embed.start + c * k..l.embed.start + (c + 1) * k];
                for d in 0..k {
                    let e = v[d] * x;
                    ws.emb[f * k + d] = e;
                    ws.sum[d] += e;
                    ws.pair[d] -= e * e;
                }
            }
            for d in 0..k {
                ws.pair[d] = 0.5 * (ws.sum[d] * ws.sum[d] + ws.pair[d]);
            }
        }

        if !l.gain.is_empty() {
            for r in 0..ch {
                let g = &p[l.gain.start + r * k..l.gain.start + (r + 1) * k];
                ws.phi[r] += g.iter().zip(&ws.pair).map(|(a, b)| a * b).sum::<f64>();
            }
        }

        ws.out.copy_from_slice(&p[l.bias.clone()]);
        for r in 0..ch {
            let a = &p[l.mix.start + r * levels..l.mix.start + (r + 1) * levels];
            let phi = ws.phi[r];
            for (o, ar) in ws.out.iter_mut().zip(a) {
                *o += ar * phi;
            }
        }

        if !l.layers.is_empty() {
            let act = self.config.activation;
            for (li, d) in l.layers.iter().enumerate() {
                let (prev, rest) = ws.h.split_at_mut(li);
                let input: &[f64] = if li == 0 { &ws.emb } else { &prev[li - 1] };
                let z = &mut ws.z[li];
                let h = &mut rest[0];
                for o in 0..d.output {
                    let w = &p[d.w + o * d.input..d.w + (o + 1) * d.input];
                    let s = p[d.b + o] + w.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
                    z[o] = s;
                    h[o] = act.apply(s);
                }
            }
            let last = &ws.h[l.layers.len() - 1];
            for (j, o) in ws.out.iter_mut().enumerate() {
                let a = &p[l.head.start + j * l.last_width..l.head.start + (j + 1) * l.last_width];
                *o += a.iter().zip(last).map(|(x, y)| x * y).sum::<f64>();
            }
        }
    }

    /// Accumulates `d loss / d params` into `grad` given `ws.dout`.
    fn backward_ws(&self, l: &Layout, ws: &mut Workspace, grad: &mut [f64]) {
        let p = &self.params;
        let k = l.k;
        let ch = l.channels;
        let levels = l.levels;

        for (g, d) in grad[l.bias.clone()].iter_mut().zip(&ws.dout) {
            *g += d;
        }
        for r in 0..ch {
            let start = l.mix.start + r * levels;
            let phi = ws.phi[r];
            let mut dphi = 0.0;
            for j in 0..levels {
                grad[start + j] += ws.dout[j] * phi;
                dphi += ws.dout[j] * p[start + j];
            }
            ws.dphi[r] = dphi;
        }
        for &(c, x) in &ws.active {
            let g = &mut grad[l.linear.start + c * ch..l.linear.start + (c + 1) * ch];
            for (gr, d) in g.iter_mut().zip(&ws.dphi) {
                *gr += d * x;
            }
        }

        ws.demb.iter_mut().for_each(|v| *v = 0.0);
        if !l.gain.is_empty() {
            // dpair_d = sum_r dphi_r G[r, d]
            let mut dpair = vec![0.0; k];
            for r in 0..ch {
                let start = l.gain.start + r * k;
                for d in 0..k {
                    grad[start + d] += ws.dphi[r] * ws.pair[d];
                    dpair[d] += ws.dphi[r] * p[start + d];
                }
            }
            for f in 0..ws.active.len() {
                for d in 0..k {
                    ws.demb[f * k + d] += dpair[d] * (ws.sum[d] - ws.emb[f * k + d]);
                }
            }
        }

        if !l.layers.is_empty() {
            let act = self.config.activation;
            let nl = l.layers.len();
            ws.dh.clear();
            ws.dh.resize(l.last_width, 0.0);
            let last = &ws.h[nl - 1];
            for (j, d) in ws.dout.iter().enumerate() {
                let hs = l.head.start + j * l.last_width;
                let a = &p[hs..hs + l.last_width];
                let ga = &mut grad[hs..hs + l.last_width];
                for i in 0..l.last_width {
                    ga[i] += d * last[i];
                    ws.dh[i] += d * a[i];
                }
            }
            for li in (0..nl).rev() {
                let dl = &l.layers[li];
                ws.dz.clear();
                ws.dz.extend(
                    ws.dh
                        .iter()
                        .zip(&ws.z[li])
                        .zip(&ws.h[li])
                        .map(|((dh, &z), &h)| dh * act.derivative(z, h)),
                );
                let input: &[f64] = if li == 0 { &ws.emb } else { &ws.h[li - 1] };
                let mut dinput = vec![0.0; dl.input];
                for o in 0..dl.output {
                    let dz = ws.dz[o];
                    if dz == 0.0 {
                        continue;
                    }
                    grad[dl.b + o] += dz;
                    let ws_ = dl.w + o * dl.input;
                    let gw = &mut grad[ws_..ws_ + dl.input];
                    for (g, x) in gw.iter_mut().zip(input) {
                        *g += dz * x;
                    }
                    for (di, w) in dinput.iter_mut().zip(&p[ws_..ws_ + dl.input]) {
                        *di += dz * w;
                    }
                }
                if li == 0 {
                    for (a, b) in ws.demb.iter_mut().zip(&dinput) {
                        *a += b;
                    }
                } else {
                    ws.dh = dinput;
                }
            }
        }

        if !l.embed.is_empty() {
            for (f, &(c, x)) in ws.active.iter().enumerate() {
                let g = &mut grad[l.embed.start + c * k..l.embed.start + (c + 1) * k];
                for d in 0..k {
                    g[d] += ws.demb[f * k + d] * x;
                }
            }
        }
    }

    /// Raw network outputs for all levels, in response units.
    pub fn forward(&self, row: &[Covariate]) -> Result<Vec<f64>> {
        self.schema.check_row(row)?;
        let l = self.layout();
        let mut ws = Workspace::new(&l);
        self.forward_ws(&l, row, &mut ws);
        let st = &self.standardizer;
        Ok(ws.out.iter().map(|o| st.y_mean + st.y_sd * o).collect())
    }

    /// Mean over `rows` of the smoothed loss summed over levels, and its
    /// gradient with respect to the flat parameter vector. Works on the
    /// standardized response scale.
    pub fn objective_and_gradient(
        &self,
        data: &Dataset,
        rows: &[usize],
        smoothing: f64,
    ) -> (f64, Vec<f64>) {
        let l = self.layout();
        let mut ws = Workspace::new(&l);
        let mut grad = vec![0.0; l.total];
        let loss = self
            .accumulate(&l, data, rows, smoothing, &mut ws, &mut grad)
            .0;
        let scale = 1.0 / rows.len().max(1) as f64;
        grad.iter_mut().for_each(|g| *g *= scale);
        (loss * scale, grad)
    }

    /// Returns (smoothed loss sum, exact loss sum) over `rows`.
    fn accumulate(
        &self,
        l: &Layout,
        data: &Dataset,
        rows: &[usize],
        smoothing: f64,
        ws: &mut Workspace,
        grad: &mut [f64],
    ) -> (f64, f64) {
        let st = &self.standardizer;
        let (mut total, mut exact) = (0.0, 0.0);
        for &i in rows {
            self.forward_ws(l, data.row(i), ws);
            let y = (data.response()[i] - st.y_mean) / st.y_sd;
            for j in 0..l.levels {
                let tau = self.grid.tau(j);
                let u = y - ws.out[j];
                let (v, dv) = smoothed_pinball(u, tau, smoothing);
                total += v;
                exact += pinball_loss(u, tau);
                ws.dout[j] = -dv;
            }
            self.backward_ws(l, ws, grad);
        }
        (total, exact)
    }

    /// Exact pinball loss summed over all rows and levels, in response units.
    pub fn total_loss(&self, data: &Dataset) -> f64 {
        let l = self.layout();
        let mut ws = Workspace::new(&l);
        self.rows_loss(&l, data, 0..data.n(), &mut ws)
    }

    fn rows_loss(
        &self,
        l: &Layout,
        data: &Dataset,
        rows: impl IntoIterator<Item = usize>,
        ws: &mut Workspace,
    ) -> f64 {
        let st = &self.standardizer;
        let mut total = 0.0;
        for i in rows {
            self.forward_ws(l, data.row(i), ws);
            let y = (data.response()[i] - st.y_mean) / st.y_sd;
            for j in 0..l.levels {
                total += pinball_loss(y - ws.out[j], self.grid.tau(j));
            }
        }
        total * st.y_sd
    }
}

/// Trains a DeepFM quantile network on `data` for every level of `grid`.
/// Deterministic for a fixed `cfg.seed`.
pub fn train(
    data: &Dataset,
    grid: &QuantileGrid,
    cfg: &DeepFmConfig,
) -> Result<DeepFmQuantileModel> {
    cfg.validate()?;
    let mut model = DeepFmQuantileModel::zeros(data.schema().clone(), *grid, cfg.clone())?;
    model.set_standardizer(Standardizer::fit(data))?;
    let layout = model.layout();
    initialize(&mut model, &layout, data);

    let n = data.n();
    let y_sd = model.standardizer.y_sd;
    let initial = model.total_loss(data);
    let mut report = TrainReport {
        initial_loss: initial,
        ..Default::default()
    };
    let mut order: Vec<usize> = (0..n).collect();
    let mut held_out = Vec::new();
    if cfg.validation_fraction > 0.0 && n >= 2 {
        order.shuffle(&mut rng::stream(cfg.seed, 2));
        let nv = ((n as f64 * cfg.validation_fraction).round() as usize).clamp(1, n - 1);
        held_out = order.drain(..nv).collect();
        held_out.sort_unstable();
    }
    let mut shuffle_rng = rng::stream(cfg.seed, 1);
    let mut ws = Workspace::new(&layout);
    let mut grad = vec![0.0; layout.total];
    let mut opt = OptimizerState::new(layout.total);
    let mut strikes = 0;
    let mut best = (f64::INFINITY, model.params.clone());
    if !held_out.is_empty() {
        best.0 = model.rows_loss(&layout, data, held_out.iter().copied(), &mut ws);
    }
    let mut stale = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_exact = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let (_, exact) =
                model.accumulate(&layout, data, batch, cfg.smoothing, &mut ws, &mut grad);
            epoch_exact += exact;
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            opt.step(&cfg.optimizer, cfg.learning_rate, &mut model.params, &grad);
        }
        let loss = epoch_exact * y_sd;
        if !loss.is_finite() || model.params.iter().any(|v| !v.is_finite()) {
            report.epoch_losses.push(loss);
            return Err(Error::Training {
                epoch: epoch + 1,
                message: "non-finite loss or parameters".into(),
                epoch_losses: report.epoch_losses,
            });
        }
        if let Some(&prev) = report.epoch_losses.last() {
            if loss <= prev {
                report.decreasing_epochs += 1;
            }
        }
        report.epoch_losses.push(loss);
        if loss > cfg.divergence_factor * initial {
            strikes += 1;
            if strikes >= cfg.divergence_patience {
                return Err(Error::Training {
                    epoch: epoch + 1,
                    message: format!(
                        "loss {loss} exceeded {} times the initial loss {initial} for {strikes} epochs",
                        cfg.divergence_factor
                    ),
                    epoch_losses: report.epoch_losses,
                });
            }
        } else {
            strikes = 0;
        }
        if !held_out.is_empty() {
            let v = model.rows_loss(&layout, data, held_out.iter().copied(), &mut ws);
            report.validation_losses.push(v);
            if v < best.0 {
                best = (v, model.params.clone());
                report.best_epoch = epoch + 1;
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience.max(1) {
                    break;
                }
            }
        }
    }
    if held_out.is_empty() {
        report.best_epoch = report.epoch_losses.len();
    } else {
        model.params = best.1;
    }
    model.train_report = report;
    Ok(model)
}

fn initialize(model: &mut DeepFmQuantileModel, l: &Layout, data: &Dataset) {
    let cfg = &model.config;
    let mut r = rng::stream(cfg.seed, 0);
    let st = &model.standardizer;
    let mut ys: Vec<f64> = data
        .response()
        .iter()
        .map(|y| (y - st.y_mean) / st.y_sd)
        .collect();
    ys.sort_by(f64::total_cmp);
    let levels = l.levels;
    let grid = model.grid;
    let p = &mut model.params;
    // Level intercepts start at the marginal quantiles.
    for j in 0..levels {
        let pos = ((grid.tau(j) * ys.len() as f64).ceil() as usize).clamp(1, ys.len()) - 1;
        p[l.bias.start + j] = ys[pos];
    }
    // Channel r starts as the r-th power of the normal score of each level:
    // a shift, a spread, a skew, and so on.
    let z: Vec<f64> = (0..levels)
        .map(|j| crate::dist::std_normal_quantile(grid.tau(j)))
        .collect();
    for ch in 0..l.channels {
        let pow: Vec<f64> = z.iter().map(|v| v.powi(ch as i32)).collect();
        let scale = pow.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-12);
        for j in 0..levels {
            p[l.mix.start + ch * levels + j] = pow[j] / scale;
        }
    }
    for d in 0..l.k.min(l.gain.len()) {
        p[l.gain.start + d] = 1.0;
    }
    for v in p[l.embed.clone()].iter_mut() {
        let z: f64 = StandardNormal.sample(&mut r);
        *v = cfg.init_scale * z;
    }
    let uniform = |r: &mut rng::Rng, limit: f64| limit * (2.0 * rng::unit_f64(r) - 1.0);
    for d in &l.layers {
        let limit = match cfg.activation {
            Activation::Relu => (6.0 / d.input as f64).sqrt(),
            Activation::Tanh => (6.0 / (d.input + d.output) as f64).sqrt(),
        };
        for w in d.w..d.w + d.input * d.output {
            p[w] = uniform(&mut r, limit);
        }
    }
    let limit = 0.1 * (6.0 / (l.last_width + levels) as f64).sqrt();
    for a in l.head.clone() {
        p[a] = uniform(&mut r, limit);
    }
}

struct OptimizerState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl OptimizerState {
    fn new(n: usize) -> Self {
        OptimizerState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, opt: &Optimizer, lr: f64, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        match *opt {
            Optimizer::Adam {
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    let mhat = self.m[i] / c1;
                    let vhat = self.v[i] / c2;
                    params[i] -= lr * (mhat / (vhat.sqrt() + eps) + weight_decay * params[i]);
                }
            }
            Optimizer::Sgd { momentum } => {
                for i in 0..params.len() {
                    self.m[i] = momentum * self.m[i] + grad[i];
                    params[i] -= lr * self.m[i];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::Field;

    fn two_field_schema() -> FieldSchema {
        FieldSchema::new(vec![
            Field::categorical_n("a", 2),
            Field::categorical_n("b", 2),
        ])
        .unwrap()
    }

    #[test]
    fn zero_network_outputs_zero() {
        let s = FieldSchema::sales_layout(3, 4, 2).unwrap();
        let m =
            DeepFmQuantileModel::zeros(s, QuantileGrid::new(6).unwrap(), DeepFmConfig::default())
                .unwrap();
        let out = m
            .forward(&[
                Covariate::Level(1),
                Covariate::Level(3),
                Covariate::Value(0.2),
                Covariate::Value(-1.0),
            ])
            .unwrap();
        assert_eq!(out, vec![0.0; 5]);
    }

    #[test]
    fn single_interaction_term() {
        let cfg = DeepFmConfig {
            embed_dim: 1,
            channels: 1,
            use_deep: false,
            ..Default::default()
        };
        let mut m =
            DeepFmQuantileModel::zeros(two_field_schema(), QuantileGrid::new(4).unwrap(), cfg)
                .unwrap();
        let groups = m.parameter_groups();
        let find = |name: &str| groups.iter().find(|g| g.0 == name).unwrap().1.clone();
        let (gain, emb, mix) = (find("fm_gain"), find("embedding"), find("mix"));
        // Channel 0 carries the interaction to every level.
        m.params_mut()[gain.start] = 1.0;
        for j in 0..3 {
            m.params_mut()[mix.start + j] = 1.0;
        }
        // Level 1 of field a is column 1, level 0 of field b is column 2.
        m.params_mut()[emb.start + 1] = 1.5;
        m.params_mut()[emb.start + 2] = -2.0;
        let out = m
            .forward(&[Covariate::Level(1), Covariate::Level(0)])
            .unwrap();
        assert_eq!(out, vec![-3.0; 3]);
    }

    #[test]
    fn unseen_level_is_rejected() {
        let m = DeepFmQuantileModel::zeros(
            two_field_schema(),
            QuantileGrid::new(4).unwrap(),
            DeepFmConfig::default(),
        )
        .unwrap();
        assert!(matches!(
            m.forward(&[Covariate::Level(2), Covariate::Level(0)]),
            Err(Error::UnseenLevel { .. })
        ));
    }

    #[test]
    fn smoothed_pinball_limits() {
        assert_eq!(smoothed_pinball(0.0, 0.3, 0.0), (0.0, -0.7));
        let (v, d) = smoothed_pinball(2.0, 0.3, 1e-3);
        assert!((v - 0.3 * (2.0 - 5e-4)).abs() < 1e-15);
        assert_eq!(d, 0.3);
        let (v, d) = smoothed_pinball(-5e-4, 0.3, 1e-3);
        assert!((v - 0.7 * 0.25e-6 / 2e-3).abs() < 1e-18);
        assert!((d + 0.35).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(DeepFmConfig {
            embed_dim: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(DeepFmConfig {
            hidden_sizes: vec![],
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(DeepFmConfig {
            learning_rate: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(DeepFmConfig {
            hidden_sizes: vec![],
            use_deep: false,
            ..Default::default()
        }
        .validate()
        .is_ok());
    }
}
