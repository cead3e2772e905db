//! Central-difference gradient checking.
//!
//! [`grad_check`] compares taped gradients of a scalar function against
//! central differences. [`operator_checks`] is a registry with one named
//! check per operator; the CLI `grad-check` command and the acceptance suite
//! both run every entry.

use super::ops;
use super::{Buf, Tape, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Max over elements of `|analytic - central| / max(1, |central|)` for the
/// scalar function `f` at `x0`, using step `h`.
pub fn grad_check<F>(f: &F, x0: &Buf, h: f64) -> Result<f64>
where
    F: Fn(&Tape, &Tensor) -> Result<Tensor>,
{
    let tape = Tape::new();
    let x = tape.leaf(x0.clone(), true);
    let y = f(&tape, &x)?;
    if y.buf().len() != 1 {
        return Err(Error::shape("grad_check", format!("f must be scalar, got {:?}", y.shape())));
    }
    if !y.scalar().is_finite() {
        return Err(Error::Numeric("grad_check: non-finite value at the base point".into()));
    }
    tape.backward(&y)?;
    let analytic = x.grad().unwrap_or_else(|| vec![0.0; x0.len()]);

    let eval = |e: usize, delta: f64| -> Result<f64> {
        let mut vals = x0.values.as_ref().clone();
        vals[e] += delta;
        let tape = Tape::new();
        let xx = tape.leaf(Buf::new(x0.shape.clone(), vals), false);
        let v = f(&tape, &xx)?.scalar();
        if !v.is_finite() {
            return Err(Error::Numeric(format!("grad_check: NaN encountered at element {e}")));
        }
        Ok(v)
    };

    let mut max_err = 0.0f64;
    for e in 0..x0.len() {
        let central = (eval(e, h)? - eval(e, -h)?) / (2.0 * h);
        let err = (analytic[e] - central).abs() / central.abs().max(1.0);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}

/// One registered operator check: a single randomized trial returning the
/// worst relative error over all differentiable inputs.
pub struct OpCheck {
    pub name: &'static str,
    pub run: Box<dyn Fn(&mut Rng) -> Result<f64>>,
}

fn rdim(rng: &mut Rng) -> usize {
    1 + rng.below(5)
}

fn rvals(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

/// Random unit-free vectors kept away from zero norm.
fn rvals_safe_rows(rng: &mut Rng, rows: usize, cols: usize) -> Vec<f64> {
    loop {
        let v = rvals(rng, rows * cols);
        let ok = (0..rows).all(|i| {
            v[i * cols..(i + 1) * cols].iter().map(|x| x * x).sum::<f64>().sqrt() > 0.3
        });
        if ok {
            return v;
        }
    }
}

/// Contract a tensor to a scalar with fixed random weights so the incoming
/// gradient is generic.
fn weighted(t: &Tensor, w: &[f64]) -> Result<Tensor> {
    let wt = t.tape().constant(t.shape(), w.to_vec());
    ops::sum_all(&ops::mul(t, &wt)?)
}

const H: f64 = 1e-5;

/// The operator registry: every differentiable operator, checkable by name.
pub fn operator_checks() -> Vec<OpCheck> {
    let mut checks: Vec<OpCheck> = Vec::new();
    let mut push = |name: &'static str, run: Box<dyn Fn(&mut Rng) -> Result<f64>>| {
        checks.push(OpCheck { name, run });
    };

    push(
        "matmul",
        Box::new(|rng| {
            let (r, k, c) = (rdim(rng), rdim(rng), rdim(rng));
            let a = Buf::new(vec![r, k], rvals(rng, r * k));
            let b = Buf::new(vec![k, c], rvals(rng, k * c));
            let w = rvals(rng, r * c);
            let wa = w.clone();
            let (b2, a2) = (b.clone(), a.clone());
            let ea = grad_check(
                &move |tape: &Tape, x: &Tensor| {
                    let bc = tape.constant_buf(b2.clone());
                    weighted(&ops::matmul(x, &bc)?, &wa)
                },
                &a,
                H,
            )?;
            let eb = grad_check(
                &move |tape: &Tape, x: &Tensor| {
                    let ac = tape.constant_buf(a2.clone());
                    weighted(&ops::matmul(&ac, x)?, &w)
                },
                &b,
                H,
            )?;
            Ok(ea.max(eb))
        }),
    );

    push(
        "add",
        Box::new(|rng| {
            binary_elementwise_check(rng, |a, b| ops::add(a, b))
        }),
    );
    push(
        "sub",
        Box::new(|rng| {
            binary_elementwise_check(rng, |a, b| ops::sub(a, b))
        }),
    );
    push(
        "mul",
        Box::new(|rng| {
            binary_elementwise_check(rng, |a, b| ops::mul(a, b))
        }),
    );

    push(
        "scale",
        Box::new(|rng| {
            let (r, c) = (rdim(rng), rdim(rng));
            let x0 = Buf::new(vec![r, c], rvals(rng, r * c));
            let factor = rng.normal() * 2.0;
            let w = rvals(rng, r * c);
            grad_check(
                &move |_tape: &Tape, x: &Tensor| weighted(&ops::scale(x, factor)?, &w),
                &x0,
                H,
            )
        }),
    );

    push(
        "add_row",
        Box::new(|rng| {
            let (r, c) = (rdim(rng), rdim(rng));
            let a = Buf::new(vec![r, c], rvals(rng, r * c));
            let row = Buf::new(vec![c], rvals(rng, c));
            let w = rvals(rng, r * c);
            let (w2, row2, a2) = (w.clone(), row.clone(), a.clone());
            let ea = grad_check(
                &move |tape: &Tape, x: &Tensor| {
                    let rc = tape.constant_buf(row2.clone());
                    weighted(&ops::add_row(x, &rc)?, &w2)
                },
                &a,
                H,
            )?;
            let eb = grad_check(
                &move |tape: &Tape, x: &Tensor| {
                    let ac = tape.constant_buf(a2.clone());
                    weighted(&ops::add_row(&ac, x)?, &w)
                },
                &row,
                H,
            )?;
            Ok(ea.max(eb))
        }),
    );

    push(
        "transpose",
        Box::new(|rng| {
            let (r, c) = (rdim(rng), rdim(rng));
            let x0 = Buf::new(vec![r, c], rvals(rng, r * c));
            let w = rvals(rng, r * c);
            grad_check(&move |_t: &Tape, x: &Tensor| weighted(&ops::transpose(x)?, &w), &x0, H)
        }),
    );

    push(
        "reshape",
        Box::new(|rng| {
            let (r, c) = (rdim(rng), rdim(rng));
            let x0 = Buf::new(vec![r, c], rvals(rng, r * c));
            let w = rvals(rng, r * c);
            grad_check(
                &move |_t: &Tape, x: &Tensor| weighted(&ops::reshape(x, vec![x.buf().len()])?, &w),
                &x0,
                H,
            )
        }),
    );

    push(
        "concat_rows",
        Box::new(|rng| {
            let c = rdim(rng);
            let (r0, r1) = (rdim(rng), rdim(rng));
            let head = Buf::new(vec![r0, c], rvals(rng, r0 * c));
            let mid = Buf::new(vec![r1, c], rvals(rng, r1 * c));
            let w = rvals(rng, (r0 + r1) * c);
            grad_check(
                &move |tape: &Tape, x: &Tensor| {
                    let hc = tape.constant_buf(head.clone());
                    weighted(&ops::concat_rows(&[&hc, x])?, &w)
                },
                &mid,
                H,
            )
        }),
    );

    push(
        "concat_cols",
        Box::new(|rng| {
            let r = rdim(rng);
            let (c0, c1) = (rdim(rng), rdim(rng));
            let head = Buf::new(vec![r, c0], rvals(rng, r * c0));
            let tail = Buf::new(vec![r, c1], rvals(rng, r * c1));
            let w = rvals(rng, r * (c0 + c1));
            grad_check(
                &move |tape: &Tape, x: &Tensor| {
                    let hc = tape.constant_buf(head.clone());
                    weighted(&ops::concat_cols(&[&hc, x])?, &w)
                },
                &tail,
                H,
            )
        }),
    );

    push(
        "slice_rows",
        Box::new(|rng| {
            let (r, c) = (2 + rng.below(4), rdim(rng));
            let x0 = Buf::new(vec![r, c], rvals(rng, r * c));
            let r0 = rng.below(r - 1);
            let r1 = r0 + 1 + rng.below(r - r0 - 1);
            let w = rvals(rng, (r1 - r0) * c);
            grad_check(
                &move |_t: &Tape, x: &Tensor| weighted(&ops::slice_rows(x, r0, r1)?, &w),
                &x0,
                H,
            )
        }),
    );

    push(
        "slice_cols",
        Box::new(|rng| {
            let (r, c) = (rdim(rng), 2 + rng.below(4));
            let x0 = Buf::new(vec![r, c], rvals(rng, r * c));
            let c0 = rng.below(c - 1);
            let c1 = c0 + 1 + rng.below(c - c0 - 1);
            let w = rvals(rng, r * (c1 - c0));
            grad_check(
                &move |_t: &Tape, x: &Tensor| weighted(&ops::slice_cols(x, c0, c1)?, &w),
                &x0,
                H,
            )
        }),
    );

    push(
        "softmax",
        Box::new(|rng| {
            let (r, c) = (rdim(rng), rdim(rng));
            let x0 = Buf::new(vec![r, c], rvals(rng, r * c));
            let temp = 0.05 + rng.uniform() * 2.0;
            let w = rvals(rng, r * c);
            grad_check(
                &move |_t: &Tape, x: &Tensor| weighted(&ops::softmax_rows(x, temp, false)?, &w),
                &x0,
                H,
            )
        }),
    );

    push(
        "softmax_causal",
        Box::new(|rng| {
            let s = 2 + rng.below(4);
            let x0 = Buf::new(vec![s, s], rvals(rng, s * s));
            let temp = 0.05 + rng.uniform() * 2.0;
            let w = rvals(rng, s * s);
            grad_check(
                &move |_t: &Tape, x: &Tensor| weighted(&ops::softmax_rows(x, temp, true)?, &w),
                &x0,
                H,
            )
        }),
    );

    push(
        "layernorm",
        Box::new(|rng| {
            let (r, c) = (rdim(rng), 2 + rng.below(4));
            let x = Buf::new(vec![r, c], rvals(rng, r * c));
            let gain = Buf::new(vec![c], (0..c).map(|_| 0.5 + rng.uniform()).collect());
            let bias = Buf::new(vec![c], rvals(rng, c));
            let w = rvals(rng, r * c);
            let mut worst = 0.0f64;
            for slot in 0..3 {
                let (x2, g2, b2, w2) = (x.clone(), gain.clone(), bias.clone(), w.clone());
                let x0 = [&x, &gain, &bias][slot].clone();
                let err = grad_check(
                    &move |tape: &Tape, v: &Tensor| {
                        let parts = [
                            if slot == 0 { v.clone() } else { tape.constant_buf(x2.clone()) },
                            if slot == 1 { v.clone() } else { tape.constant_buf(g2.clone()) },
                            if slot == 2 { v.clone() } else { tape.constant_buf(b2.clone()) },
                        ];
                        weighted(&ops::layernorm_rows(&parts[0], &parts[1], &parts[2])?, &w2)
                    },
                    &x0,
                    H,
                )?;
                worst = worst.max(err);
            }
            Ok(worst)
        }),
    );

    push(
        "gelu",
        Box::new(|rng| {
            let (r, c) = (rdim(rng), rdim(rng));
            let x0 = Buf::new(vec![r, c], rvals(rng, r * c));
            let w = rvals(rng, r * c);
            grad_check(&move |_t: &Tape, x: &Tensor| weighted(&ops::gelu(x)?, &w), &x0, H)
        }),
    );

    push(
        "attention",
        Box::new(|rng| attention_check(rng, false)),
    );
    push(
        "attention_causal",
        Box::new(|rng| attention_check(rng, true)),
    );

    push(
        "cosine_sim",
        Box::new(|rng| {
            let (n, c, d) = (rdim(rng), rdim(rng), 2 + rng.below(4));
            let a = Buf::new(vec![n, d], rvals_safe_rows(rng, n, d));
            let b = Buf::new(vec![c, d], rvals_safe_rows(rng, c, d));
            let w = rvals(rng, n * c);
            let (a2, b2, w2) = (a.clone(), b.clone(), w.clone());
            let ea = grad_check(
                &move |tape: &Tape, x: &Tensor| {
                    let bc = tape.constant_buf(b2.clone());
                    weighted(&ops::cosine_sim(x, &bc)?, &w2)
                },
                &a,
                H,
            )?;
            let eb = grad_check(
                &move |tape: &Tape, x: &Tensor| {
                    let ac = tape.constant_buf(a2.clone());
                    weighted(&ops::cosine_sim(&ac, x)?, &w)
                },
                &b,
                H,
            )?;
            Ok(ea.max(eb))
        }),
    );

    push(
        "sum",
        Box::new(|rng| {
            let (r, c) = (rdim(rng), rdim(rng));
            let x0 = Buf::new(vec![r, c], rvals(rng, r * c));
            grad_check(&|_t: &Tape, x: &Tensor| ops::sum_all(x), &x0, H)
        }),
    );

    push(
        "l1_distance",
        Box::new(|rng| {
            let (r, c) = (rdim(rng), rdim(rng));
            let a: Vec<f64> = rvals(rng, r * c);
            // Keep |a - b| bounded away from the kink at zero.
            let b: Vec<f64> = a
                .iter()
                .map(|v| v + (0.1 + rng.uniform()) * if rng.uniform() < 0.5 { 1.0 } else { -1.0 })
                .collect();
            let a0 = Buf::new(vec![r, c], a);
            let b0 = Buf::new(vec![r, c], b);
            let (a2, b2) = (a0.clone(), b0.clone());
            let ea = grad_check(
                &move |tape: &Tape, x: &Tensor| {
                    let bc = tape.constant_buf(b2.clone());
                    ops::mean_abs_diff(x, &bc)
                },
                &a0,
                H,
            )?;
            let eb = grad_check(
                &move |tape: &Tape, x: &Tensor| {
                    let ac = tape.constant_buf(a2.clone());
                    ops::mean_abs_diff(&ac, x)
                },
                &b0,
                H,
            )?;
            Ok(ea.max(eb))
        }),
    );

    push(
        "nll",
        Box::new(|rng| {
            let (n, c) = (rdim(rng), 2 + rng.below(4));
            let probs: Vec<f64> = (0..n * c).map(|_| 0.1 + rng.uniform()).collect();
            let targets: Vec<u32> = (0..n).map(|_| rng.below(c) as u32).collect();
            let x0 = Buf::new(vec![n, c], probs);
            grad_check(&move |_t: &Tape, x: &Tensor| ops::nll_from_probs(x, &targets), &x0, H)
        }),
    );

    push(
        "gather_rows",
        Box::new(|rng| {
            let (r, c, k) = (2 + rng.below(4), rdim(rng), 1 + rng.below(6));
            let table = Buf::new(vec![r, c], rvals(rng, r * c));
            let idx: Vec<u32> = (0..k).map(|_| rng.below(r) as u32).collect();
            let w = rvals(rng, k * c);
            grad_check(
                &move |_t: &Tape, x: &Tensor| weighted(&ops::gather_rows(x, &idx)?, &w),
                &table,
                H,
            )
        }),
    );

    push(
        "clamp01",
        Box::new(|rng| {
            let (r, c) = (rdim(rng), rdim(rng));
            // Sample away from the kinks at 0 and 1.
            let vals: Vec<f64> = (0..r * c)
                .map(|_| loop {
                    let v = rng.uniform() * 3.0 - 1.0;
                    if v.abs() > 1e-3 && (v - 1.0).abs() > 1e-3 {
                        break v;
                    }
                })
                .collect();
            let x0 = Buf::new(vec![r, c], vals);
            let w = rvals(rng, r * c);
            grad_check(&move |_t: &Tape, x: &Tensor| weighted(&ops::clamp01(x)?, &w), &x0, H)
        }),
    );

    push(
        "ste",
        Box::new(|rng| {
            // Identity replacement makes the surrogate forward equal the true
            // forward, so central differences apply.
            let (r, c) = (rdim(rng), rdim(rng));
            let x0 = Buf::new(vec![r, c], rvals(rng, r * c));
            let w = rvals(rng, r * c);
            grad_check(
                &move |_t: &Tape, x: &Tensor| weighted(&ops::ste(x, x.buf())?, &w),
                &x0,
                H,
            )
        }),
    );

    push(
        "row_mix",
        Box::new(|rng| {
            let (n, d) = (2 + rng.below(4), rdim(rng));
            let base = Buf::new(vec![n, d], rvals(rng, n * d));
            let repl = Buf::new(vec![n, d], rvals(rng, n * d));
            let mask: Vec<bool> = (0..n).map(|_| rng.uniform() < 0.5).collect();
            let w = rvals(rng, n * d);
            let (r2, m2, w2) = (repl.clone(), mask.clone(), w.clone());
            let (b2, m3) = (base.clone(), mask.clone());
            let ea = grad_check(
                &move |tape: &Tape, x: &Tensor| {
                    let rc = tape.constant_buf(r2.clone());
                    weighted(&ops::row_mix(x, &rc, &m2)?, &w2)
                },
                &base,
                H,
            )?;
            let eb = grad_check(
                &move |tape: &Tape, x: &Tensor| {
                    let bc = tape.constant_buf(b2.clone());
                    weighted(&ops::row_mix(&bc, x, &m3)?, &w)
                },
                &repl,
                H,
            )?;
            Ok(ea.max(eb))
        }),
    );

    checks
}

/// Check both inputs of a same-shape binary operator.
fn binary_elementwise_check(
    rng: &mut Rng,
    op: fn(&Tensor, &Tensor) -> Result<Tensor>,
) -> Result<f64> {
    let (r, c) = (rdim(rng), rdim(rng));
    let a = Buf::new(vec![r, c], rvals(rng, r * c));
    let b = Buf::new(vec![r, c], rvals(rng, r * c));
    let w = rvals(rng, r * c);
    let (a2, b2, w2) = (a.clone(), b.clone(), w.clone());
    let ea = grad_check(
        &move |tape: &Tape, x: &Tensor| {
            let bc = tape.constant_buf(b2.clone());
            weighted(&op(x, &bc)?, &w2)
        },
        &a,
        H,
    )?;
    let eb = grad_check(
        &move |tape: &Tape, x: &Tensor| {
            let ac = tape.constant_buf(a2.clone());
            weighted(&op(&ac, x)?, &w)
        },
        &b,
        H,
    )?;
    Ok(ea.max(eb))
}

fn attention_check(rng: &mut Rng, causal: bool) -> Result<f64> {
    let s = 2 + rng.below(3);
    let dk = 1 + rng.below(3);
    let dv = 1 + rng.below(3);
    let q = Buf::new(vec![s, dk], rvals(rng, s * dk));
    let k = Buf::new(vec![s, dk], rvals(rng, s * dk));
    let v = Buf::new(vec![s, dv], rvals(rng, s * dv));
    let w = rvals(rng, s * dv);
    let mut worst = 0.0f64;
    for slot in 0..3 {
        let (q2, k2, v2, w2) = (q.clone(), k.clone(), v.clone(), w.clone());
        let x0 = [&q, &k, &v][slot].clone();
        let err = grad_check(
            &move |tape: &Tape, x: &Tensor| {
                let parts = [
                    if slot == 0 { x.clone() } else { tape.constant_buf(q2.clone()) },
                    if slot == 1 { x.clone() } else { tape.constant_buf(k2.clone()) },
                    if slot == 2 { x.clone() } else { tape.constant_buf(v2.clone()) },
                ];
                weighted(&ops::attention(&parts[0], &parts[1], &parts[2], causal)?, &w2)
            },
            &x0,
            H,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Run every registered operator check for `trials` random trials each and
/// return `(name, worst error)` rows in registry order.
pub fn run_operator_checks(trials: usize, seed: u64) -> Result<Vec<(String, f64)>> {
    let mut rng = Rng::new(seed);
    let mut rows = Vec::new();
    for check in operator_checks() {
        let mut stream = rng.split();
        let mut worst = 0.0f64;
        for _ in 0..trials {
            worst = worst.max((check.run)(&mut stream)?);
        }
        rows.push((check.name.to_string(), worst));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_exact() {
        let x0 = Buf::new(vec![3], vec![0.5, -1.25, 2.0]);
        let err = grad_check(&|_t: &Tape, x: &Tensor| ops::sum_all(x), &x0, 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn half_norm_sq_checks_under_1e6() {
        let mut rng = Rng::new(17);
        let vals: Vec<f64> = (0..12).map(|_| rng.normal()).collect();
        let x0 = Buf::new(vec![3, 4], vals);
        let err = grad_check(
            &|_t: &Tape, x: &Tensor| ops::scale(&ops::sum_all(&ops::mul(x, x)?)?, 0.5),
            &x0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn every_operator_passes_randomized_checks() {
        // Full 20-trial sweep lives in the acceptance suite; keep the unit
        // loop light.
        for (name, err) in run_operator_checks(3, 20250101).unwrap() {
            assert!(err < 1e-4, "{name}: {err}");
        }
    }

    #[test]
    fn non_scalar_function_rejected() {
        let x0 = Buf::new(vec![2, 2], vec![1.0; 4]);
        let res = grad_check(&|_t: &Tape, x: &Tensor| ops::gelu(x), &x0, 1e-5);
        assert!(res.is_err());
    }
}
