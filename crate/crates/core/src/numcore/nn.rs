//! Parameterized building blocks shared by the models.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{glorot, Bound, ParamId, ParamStore, Tape, Tensor, Var};

/// Training mode carries the dropout stream; evaluation is deterministic.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Train(_))
    }

    pub fn dropout(&mut self, t: &mut Tape, x: Var, rate: f64) -> Var {
        match self {
            Mode::Eval => x,
            Mode::Train(rng) => t.dropout(x, rate, true, &mut **rng),
        }
    }
}

/// `x W + b` over the last axis; `W` is `[in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Dense {
            w: store.add(format!("{name}.w"), glorot(rng, fan_in, fan_out)),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[fan_out])),
        }
    }

    pub fn apply(&self, t: &mut Tape, p: &Bound, x: Var) -> Var {
        t.linear(x, p[self.w], Some(p[self.b]))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[dim])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn apply(&self, t: &mut Tape, p: &Bound, x: Var) -> Var {
        t.layer_norm(x, p[self.gamma], p[self.beta])
    }
}

/// Two dense layers with a GELU in between.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub fc1: Dense,
    pub fc2: Dense,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        fan_in: usize,
        hidden: usize,
        fan_out: usize,
    ) -> Self {
        Mlp {
            fc1: Dense::new(store, rng, &format!("{name}.fc1"), fan_in, hidden),
            fc2: Dense::new(store, rng, &format!("{name}.fc2"), hidden, fan_out),
        }
    }

    pub fn apply(&self, t: &mut Tape, p: &Bound, x: Var) -> Var {
        let h = self.fc1.apply(t, p, x);
        let h = t.gelu(h);
        self.fc2.apply(t, p, h)
    }

    /// Zeroes both layers, making the block output 0.
    pub fn zero(&self, store: &mut ParamStore) {
        for id in [self.fc1.w, self.fc1.b, self.fc2.w, self.fc2.b] {
            store.get_mut(id).fill(0.0);
        }
    }
}
