//! Finite-difference gradient checks over every differentiable op and the
//! model building blocks.

use std::rc::Rc;

use rand::Rng;

use crate::datapipe::WindowSample;
use crate::error::{contract, Result};
use crate::fclstm::{FcLstm, LstmConfig};
use crate::graphpart::{expand_one_hop, partition, SensorGraph};
use crate::numcore::nn::Mode;
use crate::numcore::{grad_check, rng, Bound, ParamStore, Tape, Tensor, Var};
use crate::tgmm::{DropoutRates, GineLayer, LocalEdges, NodeMixerBlock, PatchMixerBlock, Tgmm, TgmmConfig};

pub const TOLERANCE: f64 = 1e-4;
pub const EPS: f64 = 1e-5;
pub const MODULES: [&str; 6] = ["ops", "node-mixer", "patch-mixer", "gine", "tgmm", "fclstm"];

#[derive(Clone, Debug)]
pub struct CheckRow {
    pub module: &'static str,
    pub name: String,
    pub coords: usize,
    pub max_rel_error: f64,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::stream(seed, "gradcheck_input", 0);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect())
}

/// Random values bounded away from zero, for ops with a kink there.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    let mut t = random(shape, seed);
    for v in t.data_mut() {
        *v = v.signum() * (0.1 + v.abs());
    }
    t
}

fn binary_mask(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::stream(seed, "gradcheck_mask", 0);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| if r.random::<f64>() < 0.7 { 1.0 } else { 0.0 }).collect())
}

/// Scalar `sum(y * c)` with a fixed random `c`, so every output entry matters.
fn project(t: &mut Tape, y: Var, seed: u64) -> Var {
    let c = t.constant(random(t.shape(y), seed));
    let prod = t.mul(y, c);
    t.sum_all(prod)
}

fn check<F>(module: &'static str, name: &str, f: F, params: &[Tensor]) -> Result<CheckRow>
where
    F: Fn(&mut Tape, &Bound) -> Var,
{
    let rep = grad_check(f, params, EPS, 0)?;
    Ok(CheckRow {
        module,
        name: name.to_string(),
        coords: rep.coords_checked,
        max_rel_error: rep.max_rel_error,
    })
}

fn unary(name: &str, op: fn(&mut Tape, Var) -> Var, x: Tensor) -> Result<CheckRow> {
    check(
        "ops",
        name,
        |t, p| {
            let y = op(t, p.vars()[0]);
            project(t, y, 99)
        },
        &[x],
    )
}

fn op_checks() -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    let x = random(&[2, 3, 4], 1);
    let y = random(&[2, 3, 4], 2);

    rows.push(check(
        "ops",
        "matmul",
        |t, p| {
            let z = t.matmul(p.vars()[0], p.vars()[1]);
            project(t, z, 3)
        },
        &[random(&[3, 4], 4), random(&[4, 5], 5)],
    )?);
    rows.push(check(
        "ops",
        "linear",
        |t, p| {
            let v = p.vars();
            let z = t.linear(v[0], v[1], Some(v[2]));
            project(t, z, 6)
        },
        &[x.clone(), random(&[4, 5], 7), random(&[5], 8)],
    )?);
    for (name, op) in [
        ("add", Tape::add as fn(&mut Tape, Var, Var) -> Var),
        ("sub", Tape::sub),
        ("mul", Tape::mul),
    ] {
        rows.push(check(
            "ops",
            name,
            |t, p| {
                let z = op(t, p.vars()[0], p.vars()[1]);
                project(t, z, 9)
            },
            &[x.clone(), y.clone()],
        )?);
        rows.push(check(
            "ops",
            &format!("{name} (broadcast)"),
            |t, p| {
                let z = op(t, p.vars()[0], p.vars()[1]);
                project(t, z, 10)
            },
            &[x.clone(), random(&[3, 1], 11)],
        )?);
    }
    rows.push(unary("scale", |t, v| t.scale(v, -1.7), x.clone())?);
    rows.push(unary("relu", Tape::relu, away_from_zero(&[2, 3, 4], 12))?);
    rows.push(unary("gelu", Tape::gelu, random(&[2, 3, 4], 13))?);
    rows.push(unary("tanh", Tape::tanh, random(&[2, 3, 4], 14))?);
    rows.push(unary("sigmoid", Tape::sigmoid, random(&[2, 3, 4], 15))?);
    rows.push(check(
        "ops",
        "layer_norm",
        |t, p| {
            let v = p.vars();
            let z = t.layer_norm(v[0], v[1], v[2]);
            project(t, z, 16)
        },
        &[x.clone(), random(&[4], 17), random(&[4], 18)],
    )?);
    rows.push(unary(
        "dropout (fixed mask)",
        |t, v| {
            let mut r = rng::stream(0, "gradcheck_dropout", 0);
            t.dropout(v, 0.3, true, &mut r)
        },
        x.clone(),
    )?);
    rows.push(unary("mean", |t, v| t.mean(v, 1), x.clone())?);
    rows.push(unary("sum_all", Tape::sum_all, x.clone())?);
    rows.push(check(
        "ops",
        "concat",
        |t, p| {
            let z = t.concat(&[p.vars()[0], p.vars()[1]], 2);
            project(t, z, 19)
        },
        &[x.clone(), random(&[2, 3, 2], 20)],
    )?);
    rows.push(unary("permute", |t, v| t.permute(v, &[2, 0, 1]), x.clone())?);
    rows.push(unary("transpose", |t, v| t.transpose(v, 0, 2), x.clone())?);
    rows.push(unary("reshape", |t, v| t.reshape(v, &[6, 4]), x.clone())?);
    rows.push(unary("narrow", |t, v| t.narrow(v, 2, 1, 2), x.clone())?);
    rows.push(unary(
        "index_select",
        |t, v| t.index_select(v, Rc::from(&[1usize, 0, 1][..])),
        x.clone(),
    )?);
    rows.push(unary(
        "scatter_add",
        |t, v| t.scatter_add(v, Rc::from(&[2usize, 2][..]), 4),
        x.clone(),
    )?);
    let target = random(&[2, 3, 4], 21);
    let mask = binary_mask(&[2, 3, 4], 22);
    // keep |pred - target| away from the kink at zero
    let pred = {
        let mut p = away_from_zero(&[2, 3, 4], 23);
        for (v, tg) in p.data_mut().iter_mut().zip(target.data()) {
            *v += tg;
        }
        p
    };
    rows.push(check(
        "ops",
        "masked_abs_sum",
        |t, p| t.masked_abs_sum(p.vars()[0], &target, &mask),
        &[pred],
    )?);
    Ok(rows)
}

fn node_mixer_check() -> Result<CheckRow> {
    let mut r = rng::stream(1, "gradcheck_init", 0);
    let mut s = ParamStore::new();
    let b = NodeMixerBlock::new(&mut s, &mut r, "node", 4, 3, 2);
    let x = random(&[2, 4, 3], 30);
    check(
        "node-mixer",
        "node mixer block",
        |t, p| {
            let xv = t.constant(x.clone());
            let y = b.apply(t, p, xv, 0.0, &mut Mode::Eval);
            project(t, y, 31)
        },
        &s.tensors(),
    )
}

fn patch_mixer_check() -> Result<CheckRow> {
    let mut r = rng::stream(2, "gradcheck_init", 0);
    let mut s = ParamStore::new();
    let b = PatchMixerBlock::new(&mut s, &mut r, "patch", 2, 3, 4, 2);
    let x = random(&[2, 3, 4], 32);
    check(
        "patch-mixer",
        "patch mixer block",
        |t, p| {
            let xv = t.constant(x.clone());
            let y = b.apply(t, p, xv, 0.0, &mut Mode::Eval);
            project(t, y, 33)
        },
        &s.tensors(),
    )
}

fn gine_check() -> Result<CheckRow> {
    let mut r = rng::stream(3, "gradcheck_init", 0);
    let mut s = ParamStore::new();
    let layer = GineLayer::new(&mut s, &mut r, "gine", 3);
    // perturb eps off zero so its gradient path is exercised generically
    s.get_mut(layer.eps).fill(0.2);
    let edges = LocalEdges::undirected(4, [(0, 1, 0.5), (1, 2, 1.5), (0, 2, 1.0)]);
    let h = random(&[4, 2, 3], 34);
    let mut params = s.tensors();
    params.push(h);
    let hi = params.len() - 1;
    check(
        "gine",
        "GINE layer",
        |t, p| {
            let y = layer.apply(t, p, p.vars()[hi], &edges);
            project(t, y, 35)
        },
        &params,
    )
}

fn sample(n: usize, w: usize, h: usize, seed: u64) -> WindowSample {
    WindowSample {
        start: 0,
        input: random(&[n, w, 1], seed),
        input_mask: binary_mask(&[n, w, 1], seed),
        target: random(&[n, h, 1], seed + 1),
        train_mask: Tensor::ones(&[n, h, 1]),
        eval_mask: Tensor::ones(&[n, h, 1]),
    }
}

fn tgmm_check() -> Result<CheckRow> {
    let g = SensorGraph::path(6);
    let parts = expand_one_hop(&partition(&g, 2, 0.1, 0)?, &g);
    let cfg = TgmmConfig {
        window: 4,
        horizon: 2,
        d_node: 8,
        d_patch: 8,
        patches: 2,
        dropout: DropoutRates::none(),
        ..Default::default()
    };
    let m = Tgmm::new(cfg, &parts, 5)?;
    let s = sample(6, 4, 2, 36);
    check(
        "tgmm",
        "full model (6 nodes, W=4, H=2, P=2, d=8)",
        |t, p| {
            let y = m.forward(t, p, &s, &mut Mode::Eval).expect("sample matches config");
            project(t, y, 37)
        },
        &m.params.tensors(),
    )
}

fn fclstm_check() -> Result<CheckRow> {
    let cfg = LstmConfig {
        window: 4,
        horizon: 2,
        num_nodes: 3,
        hidden: 5,
        layers: 2,
        dropout: vec![0.0; 2],
        ..Default::default()
    };
    let m = FcLstm::new(cfg, 1)?;
    let s = sample(3, 4, 2, 38);
    check(
        "fclstm",
        "2-layer model",
        |t, p| {
            let y = m.forward(t, p, &s, &mut Mode::Eval).expect("sample matches config");
            project(t, y, 39)
        },
        &m.params.tensors(),
    )
}

/// Runs one module's checks, or all of them for `"all"`.
pub fn run(module: &str) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    for m in MODULES {
        if module != "all" && module != m {
            continue;
        }
        match m {
            "ops" => rows.extend(op_checks()?),
            "node-mixer" => rows.push(node_mixer_check()?),
            "patch-mixer" => rows.push(patch_mixer_check()?),
            "gine" => rows.push(gine_check()?),
            "tgmm" => rows.push(tgmm_check()?),
            _ => rows.push(fclstm_check()?),
        }
    }
    if rows.is_empty() {
        return Err(contract!("unknown gradcheck module {module:?}; expected all or one of {}", MODULES.join(", ")));
    }
    Ok(rows)
}

/// Fixed-width table, one line per check.
pub fn format_table(rows: &[CheckRow]) -> String {
    let mut out = format!("{:<12} {:<42} {:>7} {:>12}  status\n", "module", "check", "coords", "max_rel_err");
    for r in rows {
        out.push_str(&format!(
            "{:<12} {:<42} {:>7} {:>12.3e}  {}\n",
            r.module,
            r.name,
            r.coords,
            r.max_rel_error,
            if r.passed() { "ok" } else { "FAIL" }
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_module_is_rejected() {
        assert!(run("lstm").is_err());
    }

    #[test]
    fn ops_pass() {
        let rows = run("ops").unwrap();
        for r in &rows {
            assert!(r.passed(), "{r:?}");
        }
        assert!(rows.len() > 20);
    }
}
