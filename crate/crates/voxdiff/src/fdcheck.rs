//! Finite-difference gradient checking.
//!
//! The checker evaluates a graph twice per parameter element with central
//! differences (h = 1e-5) and compares against the tape's analytic gradient.
//! It exercises only the forward path, so it stays independent of the
//! backward implementation it verifies.

use crate::optim::{BoundParams, ParamStore};
use crate::rng::CounterRng;
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;

/// Relative error with a small-magnitude floor so that near-zero gradients
/// compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / f64::max(1e-3, f64::max(a.abs(), b.abs()))
}

fn bumped(params: &ParamStore, name: &str, idx: usize, delta: f64) -> ParamStore {
    let mut out = ParamStore::new();
    for (n, t) in params.iter() {
        if n == name {
            let mut data = t.data().to_vec();
            data[idx] += delta;
            out.insert(n.clone(), Tensor::new(t.shape(), data).unwrap());
        } else {
            out.insert(n.clone(), t.clone());
        }
    }
    out
}

/// Max relative error between analytic and central-difference gradients over
/// every element of every parameter. `build` must be a deterministic function
/// of the bound parameters.
pub fn max_gradient_error(
    params: &ParamStore,
    build: impl Fn(&mut Tape, &BoundParams) -> ValueId,
) -> f64 {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let loss = build(&mut tape, &bound);
    assert!(tape.value(loss).is_scalar(), "gradcheck loss must be scalar");
    let grads = tape.backward(loss).expect("backward");

    let eval = |p: &ParamStore| -> f64 {
        let mut t = Tape::new();
        let b = p.bind(&mut t);
        let l = build(&mut t, &b);
        t.value(l).item()
    };

    let mut worst = 0.0_f64;
    for (name, t) in params.iter() {
        let analytic = grads.get(bound.id(name), &tape);
        for i in 0..t.numel() {
            let plus = eval(&bumped(params, name, i, STEP));
            let minus = eval(&bumped(params, name, i, -STEP));
            let fd = (plus - minus) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic.data()[i], fd));
        }
    }
    worst
}

/// A fixed tensor used to project op outputs to a scalar so every output
/// element influences the loss.
fn probe(tape: &mut Tape, shape: &[usize], seed: u64) -> ValueId {
    let mut rng = CounterRng::new(seed);
    tape.leaf(Tensor::randn(shape, &mut rng))
}

fn scalarize(tape: &mut Tape, out: ValueId, seed: u64) -> ValueId {
    let shape = tape.value(out).shape().to_vec();
    let p = probe(tape, &shape, seed);
    let prod = tape.mul(out, p).unwrap();
    tape.sum(prod)
}

fn randn_store(entries: &[(&str, &[usize])], seed: u64) -> ParamStore {
    let mut rng = CounterRng::new(seed);
    let mut store = ParamStore::new();
    for (name, shape) in entries {
        store.insert(*name, Tensor::randn(shape, &mut rng));
    }
    store
}

/// Gradient-check every differentiable operation on randomized small shapes.
/// Returns (op label, max relative error) pairs.
pub fn run_op_battery() -> Vec<(String, f64)> {
    let mut results = Vec::new();
    let mut push = |label: &str, err: f64| results.push((label.to_string(), err));

    // conv3d variants
    for (label, stride, padding, xs, ws) in [
        (
            "conv3d k3 s1 p1",
            1usize,
            1usize,
            vec![1, 2, 4, 4, 4],
            vec![2, 2, 3, 3, 3],
        ),
        ("conv3d k3 s2 p1", 2, 1, vec![1, 1, 4, 4, 4], vec![2, 1, 3, 3, 3]),
        ("conv3d k1 s1 p0", 1, 0, vec![1, 2, 3, 3, 3], vec![3, 2, 1, 1, 1]),
        ("conv3d k3 s1 p0", 1, 0, vec![1, 1, 5, 5, 5], vec![1, 1, 3, 3, 3]),
    ] {
        let params = randn_store(&[("x", &xs), ("w", &ws)], 0xC0);
        let err = max_gradient_error(&params, |t, b| {
            let y = t.conv3d(b.id("x"), b.id("w"), stride, padding).unwrap();
            scalarize(t, y, 7)
        });
        push(label, err);
    }

    let params = randn_store(&[("x", &[2, 3, 4]), ("w", &[4, 3]), ("b", &[3])], 0xC1);
    push(
        "linear",
        max_gradient_error(&params, |t, b| {
            let y = t.linear(b.id("x"), b.id("w"), b.id("b")).unwrap();
            scalarize(t, y, 8)
        }),
    );

    let params = randn_store(&[("x", &[3, 5]), ("g", &[5]), ("s", &[5])], 0xC2);
    push(
        "layer_norm",
        max_gradient_error(&params, |t, b| {
            let y = t.layer_norm(b.id("x"), b.id("g"), b.id("s"), 1e-5).unwrap();
            scalarize(t, y, 9)
        }),
    );

    let params = randn_store(&[("x", &[2, 3, 2, 2, 2]), ("g", &[3]), ("s", &[3])], 0xC3);
    push(
        "channel_norm",
        max_gradient_error(&params, |t, b| {
            let y = t
                .channel_norm(b.id("x"), b.id("g"), b.id("s"), 1e-5)
                .unwrap();
            scalarize(t, y, 10)
        }),
    );

    let params = randn_store(
        &[("q", &[2, 3, 4]), ("k", &[2, 2, 4]), ("v", &[2, 2, 4])],
        0xC4,
    );
    push(
        "attention",
        max_gradient_error(&params, |t, b| {
            let y = t.attention(b.id("q"), b.id("k"), b.id("v")).unwrap();
            scalarize(t, y, 11)
        }),
    );

    let params = randn_store(&[("x", &[7])], 0xC5);
    push(
        "silu",
        max_gradient_error(&params, |t, b| {
            let y = t.silu(b.id("x"));
            scalarize(t, y, 12)
        }),
    );

    let params = randn_store(&[("x", &[9])], 0xC5A);
    push(
        "relu",
        max_gradient_error(&params, |t, b| {
            let y = t.relu(b.id("x"));
            scalarize(t, y, 121)
        }),
    );

    let params = randn_store(&[("a", &[6]), ("b", &[6])], 0xC6);
    push(
        "add/sub/mul/scale",
        max_gradient_error(&params, |t, b| {
            let s = t.add(b.id("a"), b.id("b")).unwrap();
            let d = t.sub(s, b.id("b")).unwrap();
            let m = t.mul(d, b.id("a")).unwrap();
            let sc = t.scale(m, 0.37);
            scalarize(t, sc, 13)
        }),
    );

    let params = randn_store(&[("a", &[5]), ("b", &[5])], 0xC7);
    push(
        "mse",
        max_gradient_error(&params, |t, b| t.mse(b.id("a"), b.id("b")).unwrap()),
    );

    let params = randn_store(&[("a", &[1, 2, 2, 2, 2]), ("b", &[1, 1, 2, 2, 2])], 0xC8);
    push(
        "concat_channels",
        max_gradient_error(&params, |t, b| {
            let y = t.concat_channels(b.id("a"), b.id("b")).unwrap();
            scalarize(t, y, 14)
        }),
    );

    let params = randn_store(&[("x", &[1, 2, 2, 2, 2])], 0xC9);
    push(
        "upsample2x",
        max_gradient_error(&params, |t, b| {
            let y = t.upsample2x(b.id("x")).unwrap();
            scalarize(t, y, 15)
        }),
    );

    let params = randn_store(&[("x", &[4, 4])], 0xCA);
    push(
        "dropout (fixed mask)",
        max_gradient_error(&params, |t, b| {
            let mut rng = CounterRng::new(42);
            let y = t.dropout(b.id("x"), 0.3, &mut rng, true).unwrap();
            scalarize(t, y, 16)
        }),
    );

    let params = randn_store(&[("x", &[1, 3, 2, 2, 2]), ("bias", &[3])], 0xCB);
    push(
        "add_channel_bias",
        max_gradient_error(&params, |t, b| {
            let y = t.add_channel_bias(b.id("x"), b.id("bias")).unwrap();
            scalarize(t, y, 17)
        }),
    );

    let params = randn_store(&[("x", &[1, 3, 2, 2, 2]), ("w", &[3, 4])], 0xCC);
    push(
        "proj_channels_to_seq",
        max_gradient_error(&params, |t, b| {
            let y = t.proj_channels_to_seq(b.id("x"), b.id("w")).unwrap();
            scalarize(t, y, 18)
        }),
    );

    let params = randn_store(&[("x", &[1, 8, 4]), ("w", &[4, 3])], 0xCD);
    push(
        "proj_seq_to_channels",
        max_gradient_error(&params, |t, b| {
            let y = t
                .proj_seq_to_channels(b.id("x"), b.id("w"), [2, 2, 2])
                .unwrap();
            scalarize(t, y, 19)
        }),
    );

    let params = randn_store(&[("x", &[3, 4])], 0xCE);
    push(
        "broadcast_to_batch",
        max_gradient_error(&params, |t, b| {
            let y = t.broadcast_to_batch(b.id("x"), 2).unwrap();
            scalarize(t, y, 20)
        }),
    );

    let params = randn_store(&[("table", &[5, 3])], 0xCF);
    push(
        "gather_rows (repeated ids)",
        max_gradient_error(&params, |t, b| {
            let y = t.gather_rows(b.id("table"), &[0, 2, 2, 4]).unwrap();
            scalarize(t, y, 21)
        }),
    );

    let params = randn_store(&[("logits", &[3, 4])], 0xD0);
    push(
        "cross_entropy",
        max_gradient_error(&params, |t, b| {
            t.cross_entropy(b.id("logits"), &[0, 2, 3]).unwrap()
        }),
    );

    let params = randn_store(&[("x", &[2, 3, 2, 2, 2])], 0xD1);
    push(
        "mean_spatial",
        max_gradient_error(&params, |t, b| {
            let y = t.mean_spatial(b.id("x")).unwrap();
            scalarize(t, y, 22)
        }),
    );

    let params = randn_store(&[("x", &[2, 3])], 0xD2);
    push(
        "sum/mean/reshape",
        max_gradient_error(&params, |t, b| {
            let r = t.reshape(b.id("x"), &[6]).unwrap();
            let m = t.mean(r);
            let s = t.sum(b.id("x"));
            t.add(m, s).unwrap()
        }),
    );

    // Composite graph: conv -> norm -> silu -> attention over flattened
    // positions -> projection back -> mse against a constant.
    let params = randn_store(
        &[
            ("x", &[1, 2, 4, 4, 4]),
            ("w1", &[3, 2, 3, 3, 3]),
            ("g", &[3]),
            ("s", &[3]),
            ("wq", &[3, 4]),
            ("wk", &[4, 4]),
            ("bk", &[4]),
            ("wv", &[4, 4]),
            ("bv", &[4]),
            ("wo", &[4, 3]),
            ("cond", &[2, 4]),
            ("bias", &[3]),
        ],
        0xD3,
    );
    push(
        "composite graph",
        max_gradient_error(&params, |t, b| {
            let h = t.conv3d(b.id("x"), b.id("w1"), 1, 1).unwrap();
            let h = t.channel_norm(h, b.id("g"), b.id("s"), 1e-5).unwrap();
            let h = t.silu(h);
            let h = t.add_channel_bias(h, b.id("bias")).unwrap();
            let q = t.proj_channels_to_seq(h, b.id("wq")).unwrap();
            let cond = t.broadcast_to_batch(b.id("cond"), 1).unwrap();
            let k = t.linear(cond, b.id("wk"), b.id("bk")).unwrap();
            let v = t.linear(cond, b.id("wv"), b.id("bv")).unwrap();
            let a = t.attention(q, k, v).unwrap();
            let back = t.proj_seq_to_channels(a, b.id("wo"), [4, 4, 4]).unwrap();
            let res = t.add(back, h).unwrap();
            let target = {
                let mut rng = CounterRng::new(77);
                t.leaf(Tensor::randn(&[1, 3, 4, 4, 4], &mut rng))
            };
            t.mse(res, target).unwrap()
        }),
    );

    results
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn battery_stays_under_tolerance() {
        for (label, err) in run_op_battery() {
            assert!(err < 1e-4, "{label}: max relative error {err:.3e}");
        }
    }
}
