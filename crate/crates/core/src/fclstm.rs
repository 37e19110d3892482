//! Fully connected LSTM baseline: the whole network's values and mask bits
//! form one input vector per timestep, fed through stacked LSTM layers and
//! a two-layer head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datapipe::WindowSample;
use crate::error::{ensure, Result};
use crate::numcore::nn::{Dense, LayerNorm, Mode};
use crate::numcore::{glorot, rng, Bound, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LstmConfig {
    pub window: usize,
    pub horizon: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub num_nodes: usize,
    pub hidden: usize,
    pub layers: usize,
    /// Dropout after each layer; empty means the default linear schedule.
    pub dropout: Vec<f64>,
}

impl Default for LstmConfig {
    fn default() -> Self {
        LstmConfig {
            window: 12,
            horizon: 12,
            in_channels: 1,
            out_channels: 1,
            num_nodes: 1,
            hidden: 256,
            layers: 5,
            dropout: Vec::new(),
        }
    }
}

/// 0.8 down to 0.4 in equal steps.
pub fn default_dropout(layers: usize) -> Vec<f64> {
    match layers {
        0 => Vec::new(),
        1 => vec![0.8],
        _ => (0..layers)
            .map(|l| (8.0 - 4.0 * l as f64 / (layers - 1) as f64) / 10.0)
            .collect(),
    }
}

impl LstmConfig {
    pub fn dropout_rates(&self) -> Vec<f64> {
        if self.dropout.is_empty() {
            default_dropout(self.layers)
        } else {
            self.dropout.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("window", self.window),
            ("horizon", self.horizon),
            ("in_channels", self.in_channels),
            ("out_channels", self.out_channels),
            ("num_nodes", self.num_nodes),
            ("hidden", self.hidden),
            ("layers", self.layers),
        ] {
            ensure!(v >= 1, "{name} must be at least 1");
        }
        let rates = self.dropout_rates();
        ensure!(
            rates.len() == self.layers,
            "{} dropout rates for {} layers",
            rates.len(),
            self.layers
        );
        for r in rates {
            ensure!((0.0..1.0).contains(&r), "dropout {r} outside [0, 1)");
        }
        Ok(())
    }
}

/// One LSTM layer; gates are packed in the order i, f, g, o.
#[derive(Clone, Copy, Debug)]
pub struct LstmLayer {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl LstmLayer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, input: usize, hidden: usize) -> Self {
        LstmLayer {
            w_ih: store.add(format!("{name}.w_ih"), glorot(rng, input, 4 * hidden)),
            w_hh: store.add(format!("{name}.w_hh"), glorot(rng, hidden, 4 * hidden)),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[4 * hidden])),
            hidden,
        }
    }

    /// Cell update from pre-activations `gates` `[1, 4h]` (input part already applied).
    fn step(&self, t: &mut Tape, p: &Bound, gates_x: Var, h: Var, c: Var) -> (Var, Var) {
        let hh = t.matmul(h, p[self.w_hh]);
        let gates = t.add(gates_x, hh);
        let k = self.hidden;
        let i = t.narrow(gates, 1, 0, k);
        let f = t.narrow(gates, 1, k, k);
        let g = t.narrow(gates, 1, 2 * k, k);
        let o = t.narrow(gates, 1, 3 * k, k);
        let i = t.sigmoid(i);
        let f = t.sigmoid(f);
        let g = t.tanh(g);
        let o = t.sigmoid(o);
        let fc = t.mul(f, c);
        let ig = t.mul(i, g);
        let c2 = t.add(fc, ig);
        let tc = t.tanh(c2);
        let h2 = t.mul(o, tc);
        (h2, c2)
    }

    /// `x` `[1, in]`, `h`/`c` `[1, hidden]` → `(h', c')`.
    pub fn cell(&self, t: &mut Tape, p: &Bound, x: Var, h: Var, c: Var) -> (Var, Var) {
        let gx = t.linear(x, p[self.w_ih], Some(p[self.b]));
        self.step(t, p, gx, h, c)
    }

    /// Runs over `xs` `[W, in]` from zero state, returning all hidden states `[W, hidden]`.
    pub fn sequence(&self, t: &mut Tape, p: &Bound, xs: Var) -> Var {
        let steps = t.shape(xs)[0];
        let gx = t.linear(xs, p[self.w_ih], Some(p[self.b]));
        let mut h = t.constant(Tensor::zeros(&[1, self.hidden]));
        let mut c = h;
        let mut outs = Vec::with_capacity(steps);
        for s in 0..steps {
            let g = t.narrow(gx, 0, s, 1);
            (h, c) = self.step(t, p, g, h, c);
            outs.push(h);
        }
        t.concat(&outs, 0)
    }
}

#[derive(Clone, Debug)]
pub struct FcLstm {
    pub config: LstmConfig,
    pub params: ParamStore,
    pub layers: Vec<LstmLayer>,
    pub norms: Vec<LayerNorm>,
    pub fc1: Dense,
    pub fc2: Dense,
    rates: Vec<f64>,
}

impl FcLstm {
    pub fn new(config: LstmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let flat = c.num_nodes * c.in_channels;
        let mut r = rng::stream(seed, "fclstm_init", 0);
        let mut s = ParamStore::new();
        let mut layers = Vec::with_capacity(c.layers);
        let mut norms = Vec::with_capacity(c.layers);
        for l in 0..c.layers {
            let input = if l == 0 { 2 * flat } else { c.hidden };
            layers.push(LstmLayer::new(&mut s, &mut r, &format!("lstm.{l}"), input, c.hidden));
            norms.push(LayerNorm::new(&mut s, &format!("lstm.{l}.norm"), c.hidden));
        }
        let fc1 = Dense::new(&mut s, &mut r, "head.fc1", c.hidden, c.hidden);
        let fc2 = Dense::new(&mut s, &mut r, "head.fc2", c.hidden, c.num_nodes * c.horizon * c.out_channels);
        Ok(FcLstm {
            rates: config.dropout_rates(),
            config,
            params: s,
            layers,
            norms,
            fc1,
            fc2,
        })
    }

    pub fn check_sample(&self, s: &WindowSample) -> Result<()> {
        let c = &self.config;
        let want_in = [c.num_nodes, c.window, c.in_channels];
        let want_out = [c.num_nodes, c.horizon, c.out_channels];
        ensure!(
            s.input.shape() == want_in && s.input_mask.shape() == want_in,
            "input shape {:?} does not match model {want_in:?}",
            s.input.shape()
        );
        ensure!(
            s.target.shape() == want_out,
            "target shape {:?} does not match model {want_out:?}",
            s.target.shape()
        );
        Ok(())
    }

    pub fn forward(&self, t: &mut Tape, p: &Bound, s: &WindowSample, mode: &mut Mode) -> Result<Var> {
        self.check_sample(s)?;
        let c = &self.config;
        let flat = c.num_nodes * c.in_channels;
        let to_steps = |t: &mut Tape, x: &Tensor| {
            let v = t.constant(x.clone());
            let v = t.permute(v, &[1, 0, 2]);
            t.reshape(v, &[c.window, flat])
        };
        let values = to_steps(t, &s.input);
        let mask = to_steps(t, &s.input_mask);
        let mut x = t.concat(&[values, mask], 1);
        for ((layer, norm), &rate) in self.layers.iter().zip(&self.norms).zip(&self.rates) {
            x = layer.sequence(t, p, x);
            x = norm.apply(t, p, x);
            x = mode.dropout(t, x, rate);
        }
        let last = t.narrow(x, 0, c.window - 1, 1);
        let h = self.fc1.apply(t, p, last);
        let h = t.gelu(h);
        let y = self.fc2.apply(t, p, h);
        Ok(t.reshape(y, &[c.num_nodes, c.horizon, c.out_channels]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::grad_check;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng::stream(seed, "test", 0);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect())
    }

    fn sample(n: usize, w: usize, h: usize, seed: u64) -> WindowSample {
        WindowSample {
            start: 0,
            input: random(&[n, w, 1], seed),
            input_mask: Tensor::ones(&[n, w, 1]),
            target: random(&[n, h, 1], seed + 1),
            train_mask: Tensor::ones(&[n, h, 1]),
            eval_mask: Tensor::ones(&[n, h, 1]),
        }
    }

    fn small(layers: usize) -> LstmConfig {
        LstmConfig {
            window: 4,
            horizon: 2,
            num_nodes: 3,
            hidden: 5,
            layers,
            dropout: vec![0.0; layers],
            ..Default::default()
        }
    }

    #[test]
    fn default_schedule() {
        assert_eq!(default_dropout(5), vec![0.8, 0.7, 0.6, 0.5, 0.4]);
        assert_eq!(LstmConfig::default().dropout_rates().len(), 5);
        let bad = LstmConfig {
            dropout: vec![0.5; 3],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    fn one_cell(fill: impl Fn(&mut ParamStore, &LstmLayer), c0: f64) -> (Tensor, Tensor) {
        let mut r = rng::stream(0, "init", 0);
        let mut s = ParamStore::new();
        let cell = LstmLayer::new(&mut s, &mut r, "c", 2, 3);
        fill(&mut s, &cell);
        let mut t = Tape::new();
        let p = s.bind(&mut t);
        let x = t.constant(random(&[1, 2], 1));
        let h = t.constant(random(&[1, 3], 2));
        let c = t.constant(Tensor::full(&[1, 3], c0));
        let (h2, c2) = cell.cell(&mut t, &p, x, h, c);
        (t.value(h2).clone(), t.value(c2).clone())
    }

    #[test]
    fn zero_weights_and_state_give_zero() {
        let (h, c) = one_cell(
            |s, l| {
                for id in [l.w_ih, l.w_hh, l.b] {
                    s.get_mut(id).fill(0.0);
                }
            },
            0.0,
        );
        assert!(h.data().iter().chain(c.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_gates_carry_the_cell() {
        let (_, c) = one_cell(
            |s, l| {
                for id in [l.w_ih, l.w_hh] {
                    s.get_mut(id).fill(0.0);
                }
                let b = s.get_mut(l.b).data_mut();
                b[..3].fill(-50.0); // input gate closed
                b[3..6].fill(50.0); // forget gate open
            },
            0.7,
        );
        assert!(c.data().iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn cell_gradcheck() {
        let mut r = rng::stream(3, "init", 0);
        let mut s = ParamStore::new();
        let cell = LstmLayer::new(&mut s, &mut r, "c", 2, 3);
        let x = random(&[1, 2], 4);
        let h = random(&[1, 3], 5);
        let c = random(&[1, 3], 6);
        let rep = grad_check(
            |t, p| {
                let (xv, hv, cv) = (t.constant(x.clone()), t.constant(h.clone()), t.constant(c.clone()));
                let (h2, c2) = cell.cell(t, p, xv, hv, cv);
                let both = t.concat(&[h2, c2], 1);
                let w = t.constant(random(&[1, 6], 7));
                let y = t.mul(both, w);
                t.sum_all(y)
            },
            &s.tensors(),
            1e-5,
            0,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }

    #[test]
    fn two_layer_model_gradcheck() {
        let m = FcLstm::new(small(2), 1).unwrap();
        let s = sample(3, 4, 2, 2);
        let rep = grad_check(
            |t, p| {
                let y = m.forward(t, p, &s, &mut Mode::Eval).unwrap();
                let w = t.constant(random(&[3, 2, 1], 9));
                let y = t.mul(y, w);
                t.sum_all(y)
            },
            &m.params.tensors(),
            1e-5,
            0,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }

    #[test]
    fn shape_and_determinism() {
        let m = FcLstm::new(
            LstmConfig {
                num_nodes: 8,
                hidden: 16,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        let s = sample(8, 12, 12, 0);
        let run = || {
            let mut t = Tape::new();
            let p = m.params.bind(&mut t);
            let y = m.forward(&mut t, &p, &s, &mut Mode::Eval).unwrap();
            t.value(y).clone()
        };
        let a = run();
        assert_eq!(a.shape(), &[8, 12, 1]);
        assert_eq!(a, run());
        let bad = sample(7, 12, 12, 0);
        let mut t = Tape::new();
        let p = m.params.bind(&mut t);
        assert!(m.forward(&mut t, &p, &bad, &mut Mode::Eval).is_err());
    }
}
