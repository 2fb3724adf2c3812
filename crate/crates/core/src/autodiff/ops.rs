//! Forward rules for every primitive. Shapes follow these rules (rank 0 and
//! rank 1 tensors are viewed as `1x1` and `1xn` matrices where a matrix is
//! expected):
//!
//! | kind | inputs | output |
//! |------|--------|--------|
//! | matmul | `[r,k]`, `[k,c]` | `[r,c]` |
//! | add / sub / mul | equal shapes (add also takes `[r,c]` + `[c]`) | lhs shape |
//! | scalar-mul, add-scalar, exp, log, sigmoid, relu, tanh, clamp | any | same |
//! | prelu | any, slope `[1]` | same |
//! | concat | rank 2, all dims equal except `axis` | summed along `axis` |
//! | slice | rank 2, `start + len <= dim(axis)` | `len` along `axis` |
//! | transpose | `[r,c]` | `[c,r]` |
//! | reshape | any, equal element count | requested |
//! | softmax-rows, log-softmax-rows | `[r,c]`, optional `[r,c]` validity mask | same |
//! | layer-norm | `[r,c]`, gain `[c]`, bias `[c]` | same |
//! | mean-over-axis / sum | `[r,c]`, optional mask over the reduced axis | `[c]`, `[r]` or `[]` |
//! | dropout | any | same |
//! | embedding-lookup | table `[v,c]`, ids `< v` | `[n,c]` |
//! | cross-entropy-from-logits | `[r,c]`, `r` targets `< c` | `[]` |
//! | cosine-similarity | `[p,d]`, `[q,d]` | `[p,q]` |
//! | mask-rows | `[r,c]`, `r` flags | same, invalid rows zeroed |

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{Axis, Op, Var};
use super::tensor::dims2;
use crate::error::{Error, Result};

/// Variance floor inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Lower clamp applied to the argument of `log`.
pub const LOG_FLOOR: f64 = 1e-6;

fn same_tape(a: &Var<'_>, b: &Var<'_>, op: &'static str) -> Result<()> {
    if std::ptr::eq(a.tape, b.tape) {
        Ok(())
    } else {
        Err(Error::invalid(op, "operands belong to different records"))
    }
}

impl<'t> Var<'t> {
    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let (shape, value) = {
            let nodes = self.tape.nodes();
            let n = &nodes[self.id];
            (n.shape.clone(), n.value.iter().map(|&x| f(x)).collect())
        };
        self.tape.push(shape, value, op)
    }

    pub fn matmul(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        same_tape(self, &rhs, "matmul")?;
        let (shape, out) = {
            let nodes = self.tape.nodes();
            let (a, b) = (&nodes[self.id], &nodes[rhs.id]);
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                return Err(Error::Shape {
                    op: "matmul",
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            let (r, k, c) = (a.shape[0], a.shape[1], b.shape[1]);
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                let orow = &mut out[i * c..(i + 1) * c];
                for p in 0..k {
                    let aip = a.value[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    let brow = &b.value[p * c..(p + 1) * c];
                    for j in 0..c {
                        orow[j] += aip * brow[j];
                    }
                }
            }
            (vec![r, c], out)
        };
        Ok(self.tape.push(shape, out, Op::MatMul(self.id, rhs.id)))
    }

    fn binary(&self, rhs: Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var<'t>> {
        same_tape(self, &rhs, name)?;
        let (shape, out) = {
            let nodes = self.tape.nodes();
            let (a, b) = (&nodes[self.id], &nodes[rhs.id]);
            if a.shape != b.shape {
                return Err(Error::Shape {
                    op: name,
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            let out = a.value.iter().zip(&b.value).map(|(&x, &y)| f(x, y)).collect();
            (a.shape.clone(), out)
        };
        Ok(self.tape.push(shape, out, op))
    }

    /// Elementwise sum of equal shapes, or `[r,c] + [c]` with the row broadcast.
    pub fn add(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (ls, rs) = (self.shape(), rhs.shape());
        if ls != rs && rs.len() == 1 && ls.len() == 2 && ls[1] == rs[0] {
            return self.add_row(rhs);
        }
        self.binary(rhs, "add", |a, b| a + b, Op::Add(self.id, rhs.id))
    }

    pub fn add_row(&self, row: Var<'t>) -> Result<Var<'t>> {
        same_tape(self, &row, "add")?;
        let (shape, out) = {
            let nodes = self.tape.nodes();
            let (a, b) = (&nodes[self.id], &nodes[row.id]);
            let (_, c) = dims2(&a.shape);
            if a.shape.len() != 2 || b.shape.len() != 1 || b.shape[0] != c {
                return Err(Error::Shape {
                    op: "add",
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            let mut out = a.value.clone();
            for r in out.chunks_mut(c) {
                for (o, v) in r.iter_mut().zip(&b.value) {
                    *o += v;
                }
            }
            (a.shape.clone(), out)
        };
        Ok(self.tape.push(shape, out, Op::AddRow(self.id, row.id)))
    }

    pub fn sub(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "sub", |a, b| a - b, Op::Sub(self.id, rhs.id))
    }

    pub fn mul(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "mul", |a, b| a * b, Op::Mul(self.id, rhs.id))
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, s), |x| x * s)
    }

    pub fn add_scalar(&self, s: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), |x| x + s)
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    /// Natural log with the argument clamped to at least [`LOG_FLOOR`].
    pub fn log(&self) -> Var<'t> {
        self.log_floor(LOG_FLOOR)
    }

    pub fn log_floor(&self, floor: f64) -> Var<'t> {
        self.unary(Op::Log { src: self.id, floor }, |x| x.max(floor).ln())
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), |x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(Op::Clamp { src: self.id, lo, hi }, |x| x.clamp(lo, hi))
    }

    pub fn prelu(&self, slope: Var<'t>) -> Result<Var<'t>> {
        same_tape(self, &slope, "prelu")?;
        if slope.numel() != 1 {
            return Err(Error::Shape {
                op: "prelu",
                lhs: self.shape(),
                rhs: slope.shape(),
            });
        }
        let a = slope.item();
        Ok(self.unary(
            Op::Prelu {
                src: self.id,
                slope: slope.id,
            },
            |x| if x > 0.0 { x } else { a * x },
        ))
    }

    /// Copy of the value with no path back to its inputs.
    pub fn detach(&self) -> Var<'t> {
        let (shape, value) = {
            let nodes = self.tape.nodes();
            (nodes[self.id].shape.clone(), nodes[self.id].value.clone())
        };
        self.tape.push_raw(shape, value, Op::Leaf, false)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let (numel, value) = {
            let nodes = self.tape.nodes();
            (nodes[self.id].value.len(), nodes[self.id].value.clone())
        };
        if shape.iter().product::<usize>() != numel {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape(),
                rhs: shape.to_vec(),
            });
        }
        Ok(self.tape.push(shape.to_vec(), value, Op::Reshape(self.id)))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::invalid("transpose", format!("expected rank 2, got {shape:?}")));
        }
        let (r, c) = (shape[0], shape[1]);
        let out = {
            let nodes = self.tape.nodes();
            let v = &nodes[self.id].value;
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = v[i * c + j];
                }
            }
            out
        };
        Ok(self.tape.push(vec![c, r], out, Op::Transpose(self.id)))
    }

    /// Concatenates rank-2 tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat", "no operands"))?;
        if axis > 1 {
            return Err(Error::invalid("concat", format!("axis {axis} out of range")));
        }
        let tape = first.tape;
        let (shape, out) = {
            let nodes = tape.nodes();
            let s0 = &nodes[first.id].shape;
            if s0.len() != 2 {
                return Err(Error::invalid("concat", format!("expected rank 2, got {s0:?}")));
            }
            let mut total = 0;
            for p in parts {
                same_tape(first, p, "concat")?;
                let s = &nodes[p.id].shape;
                if s.len() != 2 || s[1 - axis] != s0[1 - axis] {
                    return Err(Error::Shape {
                        op: "concat",
                        lhs: s0.clone(),
                        rhs: s.clone(),
                    });
                }
                total += s[axis];
            }
            if axis == 0 {
                let mut out = Vec::with_capacity(total * s0[1]);
                for p in parts {
                    out.extend_from_slice(&nodes[p.id].value);
                }
                (vec![total, s0[1]], out)
            } else {
                let rows = s0[0];
                let mut out = Vec::with_capacity(rows * total);
                for i in 0..rows {
                    for p in parts {
                        let c = nodes[p.id].shape[1];
                        out.extend_from_slice(&nodes[p.id].value[i * c..(i + 1) * c]);
                    }
                }
                (vec![rows, total], out)
            }
        };
        Ok(tape.push(
            shape,
            out,
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
                axis,
            },
        ))
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() != 2 || axis > 1 || start + len > shape[axis] {
            return Err(Error::invalid(
                "slice",
                format!("cannot take [{start}, {}) along axis {axis} of {shape:?}", start + len),
            ));
        }
        let (r, c) = (shape[0], shape[1]);
        let out = {
            let nodes = self.tape.nodes();
            let v = &nodes[self.id].value;
            if axis == 0 {
                v[start * c..(start + len) * c].to_vec()
            } else {
                let mut out = Vec::with_capacity(r * len);
                for i in 0..r {
                    out.extend_from_slice(&v[i * c + start..i * c + start + len]);
                }
                out
            }
        };
        let out_shape = if axis == 0 { vec![len, c] } else { vec![r, len] };
        Ok(self.tape.push(out_shape, out, Op::Slice { src: self.id, axis, start }))
    }

    fn check_mask(&self, op: &'static str, mask: Option<&[bool]>) -> Result<(usize, usize)> {
        let shape = self.shape();
        if shape.len() > 2 {
            return Err(Error::invalid(op, format!("expected rank <= 2, got {shape:?}")));
        }
        let (r, c) = dims2(&shape);
        if let Some(m) = mask {
            if m.len() != r * c {
                return Err(Error::Shape {
                    op,
                    lhs: shape,
                    rhs: vec![m.len()],
                });
            }
            for i in 0..r {
                if !m[i * c..(i + 1) * c].iter().any(|&v| v) {
                    return Err(Error::invalid(op, format!("row {i} has every entry masked")));
                }
            }
        }
        Ok((r, c))
    }

    /// Row-wise softmax. Entries where `mask` is false get exactly zero weight.
    pub fn softmax_rows(&self, mask: Option<&[bool]>) -> Result<Var<'t>> {
        let (r, c) = self.check_mask("softmax-rows", mask)?;
        let out = {
            let nodes = self.tape.nodes();
            let v = &nodes[self.id].value;
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                let valid = |j: usize| mask.is_none_or(|m| m[i * c + j]);
                let row = &v[i * c..(i + 1) * c];
                let max = (0..c).filter(|&j| valid(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..c {
                    if valid(j) {
                        let e = (row[j] - max).exp();
                        out[i * c + j] = e;
                        sum += e;
                    }
                }
                for o in &mut out[i * c..(i + 1) * c] {
                    *o /= sum;
                }
            }
            out
        };
        Ok(self.tape.push(self.shape(), out, Op::Softmax(self.id)))
    }

    /// Row-wise log-softmax. Masked entries are excluded from the normalizer
    /// and set to zero in the output.
    pub fn log_softmax_rows(&self, mask: Option<&[bool]>) -> Result<Var<'t>> {
        let (r, c) = self.check_mask("log-softmax-rows", mask)?;
        let out = {
            let nodes = self.tape.nodes();
            let v = &nodes[self.id].value;
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                let valid = |j: usize| mask.is_none_or(|m| m[i * c + j]);
                let row = &v[i * c..(i + 1) * c];
                let max = (0..c).filter(|&j| valid(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..c).filter(|&j| valid(j)).map(|j| (row[j] - max).exp()).sum::<f64>().ln();
                for j in 0..c {
                    if valid(j) {
                        out[i * c + j] = row[j] - lse;
                    }
                }
            }
            out
        };
        Ok(self.tape.push(
            self.shape(),
            out,
            Op::LogSoftmax {
                src: self.id,
                mask: mask.map(|m| m.to_vec()),
            },
        ))
    }

    /// Per-row layer normalization with learned gain and bias.
    pub fn layer_norm(&self, gain: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        same_tape(self, &gain, "layer-norm")?;
        same_tape(self, &bias, "layer-norm")?;
        let shape = self.shape();
        let (r, c) = dims2(&shape);
        if shape.len() != 2 || gain.shape() != [c] || bias.shape() != [c] {
            return Err(Error::Shape {
                op: "layer-norm",
                lhs: shape,
                rhs: gain.shape(),
            });
        }
        let (out, xhat, inv_std) = {
            let nodes = self.tape.nodes();
            let v = &nodes[self.id].value;
            let gv = &nodes[gain.id].value;
            let bv = &nodes[bias.id].value;
            let mut out = vec![0.0; r * c];
            let mut xhat = vec![0.0; r * c];
            let mut inv_std = vec![0.0; r];
            for i in 0..r {
                let row = &v[i * c..(i + 1) * c];
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
                let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                inv_std[i] = is;
                for j in 0..c {
                    let xh = (row[j] - mean) * is;
                    xhat[i * c + j] = xh;
                    out[i * c + j] = xh * gv[j] + bv[j];
                }
            }
            (out, xhat, inv_std)
        };
        Ok(self.tape.push(
            shape,
            out,
            Op::LayerNorm {
                src: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                inv_std,
            },
        ))
    }

    fn reduce(&self, op: &'static str, axis: Axis, mask: Option<&[bool]>, mean: bool) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() > 2 {
            return Err(Error::invalid(op, format!("expected rank <= 2, got {shape:?}")));
        }
        let (r, c) = dims2(&shape);
        let n = match axis {
            Axis::Rows => r,
            Axis::Cols => c,
            Axis::All => r * c,
        };
        if let Some(m) = mask {
            if m.len() != n {
                return Err(Error::Shape {
                    op,
                    lhs: shape,
                    rhs: vec![m.len()],
                });
            }
        }
        let count = mask.map_or(n, |m| m.iter().filter(|&&v| v).count());
        if mean && count == 0 {
            return Err(Error::invalid(op, "no valid entries to average"));
        }
        let w = if mean { 1.0 / count as f64 } else { 1.0 };
        let weights: Vec<f64> = (0..n).map(|k| if mask.is_none_or(|m| m[k]) { w } else { 0.0 }).collect();
        let (out_shape, out) = {
            let nodes = self.tape.nodes();
            let v = &nodes[self.id].value;
            match axis {
                Axis::Rows => {
                    let mut out = vec![0.0; c];
                    for i in 0..r {
                        if weights[i] != 0.0 {
                            for j in 0..c {
                                out[j] += v[i * c + j] * weights[i];
                            }
                        }
                    }
                    (vec![c], out)
                }
                Axis::Cols => {
                    let mut out = vec![0.0; r];
                    for i in 0..r {
                        for j in 0..c {
                            if weights[j] != 0.0 {
                                out[i] += v[i * c + j] * weights[j];
                            }
                        }
                    }
                    (vec![r], out)
                }
                Axis::All => {
                    let s = v.iter().zip(&weights).filter(|(_, &w)| w != 0.0).map(|(x, w)| x * w).sum();
                    (vec![], vec![s])
                }
            }
        };
        Ok(self.tape.push(
            out_shape,
            out,
            Op::Reduce {
                src: self.id,
                axis,
                weights,
            },
        ))
    }

    /// Mean over `axis`, counting only entries where `mask` is true.
    pub fn mean(&self, axis: Axis, mask: Option<&[bool]>) -> Result<Var<'t>> {
        self.reduce("mean-over-axis", axis, mask, true)
    }

    pub fn sum(&self, axis: Axis, mask: Option<&[bool]>) -> Result<Var<'t>> {
        self.reduce("sum", axis, mask, false)
    }

    pub fn mean_all(&self) -> Result<Var<'t>> {
        self.mean(Axis::All, None)
    }

    pub fn sum_all(&self) -> Result<Var<'t>> {
        self.sum(Axis::All, None)
    }

    /// Inverted dropout. Identity when `train` is false or `rate` is zero.
    pub fn dropout(&self, rate: f64, train: bool, seed: u64) -> Result<Var<'t>> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid("dropout", format!("rate {rate} outside [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(*self);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - rate);
        let n = self.numel();
        let scale: Vec<f64> = (0..n).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect();
        let out = {
            let nodes = self.tape.nodes();
            nodes[self.id].value.iter().zip(&scale).map(|(x, s)| x * s).collect()
        };
        Ok(self.tape.push(self.shape(), out, Op::Dropout { src: self.id, scale }))
    }

    /// Rows of this `[v,c]` table at `ids`.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::invalid("embedding-lookup", format!("table must be rank 2, got {shape:?}")));
        }
        let (v, c) = (shape[0], shape[1]);
        if let Some((pos, &id)) = ids.iter().enumerate().find(|(_, &id)| id >= v) {
            return Err(Error::invalid(
                "embedding-lookup",
                format!("id {id} at index {pos} out of range for table of {v} rows"),
            ));
        }
        let out = {
            let nodes = self.tape.nodes();
            let t = &nodes[self.id].value;
            let mut out = Vec::with_capacity(ids.len() * c);
            for &id in ids {
                out.extend_from_slice(&t[id * c..(id + 1) * c]);
            }
            out
        };
        Ok(self.tape.push(
            vec![ids.len(), c],
            out,
            Op::Gather {
                table: self.id,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Mean over rows of `-log softmax(row)[target]`.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        let (r, c) = dims2(&shape);
        if shape.len() != 2 || targets.len() != r || r == 0 {
            return Err(Error::Shape {
                op: "cross-entropy-from-logits",
                lhs: shape,
                rhs: vec![targets.len()],
            });
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::invalid(
                "cross-entropy-from-logits",
                format!("target {t} out of range for {c} classes"),
            ));
        }
        let (loss, probs) = {
            let nodes = self.tape.nodes();
            let v = &nodes[self.id].value;
            let mut probs = vec![0.0; r * c];
            let mut loss = 0.0;
            for i in 0..r {
                let row = &v[i * c..(i + 1) * c];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
                let lse = max + sum.ln();
                for j in 0..c {
                    probs[i * c + j] = (row[j] - lse).exp();
                }
                loss += lse - row[targets[i]];
            }
            (loss / r as f64, probs)
        };
        Ok(self.tape.push(
            vec![],
            vec![loss],
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Pairwise cosine similarity between the rows of `self` and `rhs`.
    pub fn cosine_similarity(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        same_tape(self, &rhs, "cosine-similarity")?;
        let (ls, rs) = (self.shape(), rhs.shape());
        if ls.len() != 2 || rs.len() != 2 || ls[1] != rs[1] {
            return Err(Error::Shape {
                op: "cosine-similarity",
                lhs: ls,
                rhs: rs,
            });
        }
        let (p, q, d) = (ls[0], rs[0], ls[1]);
        let (out, norm_a, norm_b) = {
            let nodes = self.tape.nodes();
            let av = &nodes[self.id].value;
            let bv = &nodes[rhs.id].value;
            let norms = |v: &[f64], n: usize, side: &str| -> Result<Vec<f64>> {
                (0..n)
                    .map(|i| {
                        let s = v[i * d..(i + 1) * d].iter().map(|x| x * x).sum::<f64>().sqrt();
                        if s == 0.0 {
                            Err(Error::invalid("cosine-similarity", format!("{side} row {i} has zero norm")))
                        } else {
                            Ok(s)
                        }
                    })
                    .collect()
            };
            let na = norms(av, p, "lhs")?;
            let nb = norms(bv, q, "rhs")?;
            let mut out = vec![0.0; p * q];
            for i in 0..p {
                for j in 0..q {
                    let dot: f64 = av[i * d..(i + 1) * d].iter().zip(&bv[j * d..(j + 1) * d]).map(|(x, y)| x * y).sum();
                    out[i * q + j] = dot / (na[i] * nb[j]);
                }
            }
            (out, na, nb)
        };
        Ok(self.tape.push(
            vec![p, q],
            out,
            Op::Cosine {
                a: self.id,
                b: rhs.id,
                norm_a,
                norm_b,
            },
        ))
    }

    /// Replaces rows whose flag is false with zeros (a select, so NaN in
    /// invalid rows does not propagate).
    pub fn mask_rows(&self, mask: &[bool]) -> Result<Var<'t>> {
        let shape = self.shape();
        let (r, c) = dims2(&shape);
        if shape.len() != 2 || mask.len() != r {
            return Err(Error::Shape {
                op: "mask-rows",
                lhs: shape,
                rhs: vec![mask.len()],
            });
        }
        let out = {
            let nodes = self.tape.nodes();
            let v = &nodes[self.id].value;
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                if mask[i] {
                    out[i * c..(i + 1) * c].copy_from_slice(&v[i * c..(i + 1) * c]);
                }
            }
            out
        };
        Ok(self.tape.push(
            shape,
            out,
            Op::MaskRows {
                src: self.id,
                mask: mask.to_vec(),
            },
        ))
    }
}
