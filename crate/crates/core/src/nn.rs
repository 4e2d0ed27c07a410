//! Recurrent and attention layers built on the tape.
//!
//! Parameter structs are generic over their leaf type: `Lstm<Tensor>` holds
//! weights, `Lstm<Var>` holds the same weights bound to a tape.

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::Result;

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub(crate) fn uniform_init(rows: usize, cols: usize, fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::from_parts(vec![rows, cols], data)
}

/// LSTM weights with gates packed as `[input, forget, cell, output]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Lstm<T = Tensor> {
    /// `[in, 4H]`
    pub input: T,
    /// `[H, 4H]`
    pub recurrent: T,
    /// `[1, 4H]`
    pub bias: T,
}

impl Lstm<Tensor> {
    /// Forget-gate bias starts at 1.0; other biases at zero.
    pub fn init(input_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut bias = Tensor::zeros(&[1, 4 * hidden]);
        bias.data_mut()[hidden..2 * hidden].fill(1.0);
        Lstm {
            input: uniform_init(input_dim, 4 * hidden, input_dim, rng),
            recurrent: uniform_init(hidden, 4 * hidden, hidden, rng),
            bias,
        }
    }

    pub fn hidden(&self) -> usize {
        self.recurrent.rows()
    }
}

impl<T> Lstm<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Lstm<U> {
        Lstm {
            input: f(&self.input),
            recurrent: f(&self.recurrent),
            bias: f(&self.bias),
        }
    }

    pub fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((format!("{prefix}.input"), &self.input));
        out.push((format!("{prefix}.recurrent"), &self.recurrent));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    pub fn slots_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        out.extend([&mut self.input, &mut self.recurrent, &mut self.bias]);
    }
}

/// Single-hop additive attention: `softmax(w · tanh(W h + b))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention<T = Tensor> {
    /// `[d, a]`
    pub proj: T,
    /// `[1, a]`
    pub bias: T,
    /// `[a, 1]`
    pub score: T,
}

impl Attention<Tensor> {
    pub fn init(input_dim: usize, attention_dim: usize, rng: &mut impl Rng) -> Self {
        Attention {
            proj: uniform_init(input_dim, attention_dim, input_dim, rng),
            bias: Tensor::zeros(&[1, attention_dim]),
            score: uniform_init(attention_dim, 1, attention_dim, rng),
        }
    }
}

impl<T> Attention<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Attention<U> {
        Attention {
            proj: f(&self.proj),
            bias: f(&self.bias),
            score: f(&self.score),
        }
    }

    pub fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((format!("{prefix}.proj"), &self.proj));
        out.push((format!("{prefix}.bias"), &self.bias));
        out.push((format!("{prefix}.score"), &self.score));
    }

    pub fn slots_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        out.extend([&mut self.proj, &mut self.bias, &mut self.score]);
    }
}

/// A contiguous run of rows `[start, start + len)` forming one sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub len: usize,
}

impl Span {
    pub fn end(self) -> usize {
        self.start + self.len
    }
}

/// Runs one LSTM direction over every span of `projected` (`[N, 4H]`, input
/// already multiplied by the input weights). Spans are packed longest first
/// so each time step is one `[active, H] x [H, 4H]` product. Returns `[N, H]`
/// in the original row order.
fn lstm_direction(tape: &mut Tape, cell: &Lstm<Var>, projected: Var, spans: &[Span], reverse: bool) -> Result<Var> {
    let hidden = tape.shape(cell.recurrent)[0];
    let mut order: Vec<usize> = (0..spans.len()).collect();
    order.sort_by(|&a, &b| spans[b].len.cmp(&spans[a].len));
    let max_len = spans.iter().map(|s| s.len).max().unwrap_or(0);

    let mut outputs: Vec<Var> = Vec::with_capacity(max_len);
    let mut source_rows: Vec<usize> = Vec::new();
    let mut state: Option<(Var, Var)> = None;
    for t in 0..max_len {
        let active = order.iter().take_while(|&&s| spans[s].len > t).count();
        let rows: Vec<usize> = order[..active]
            .iter()
            .map(|&s| {
                let sp = spans[s];
                sp.start + if reverse { sp.len - 1 - t } else { t }
            })
            .collect();
        let gx = tape.gather_rows(projected, &rows)?;
        let gates = match state {
            None => gx,
            Some((h, _)) => {
                let h = shrink(tape, h, active)?;
                let gh = tape.matmul(h, cell.recurrent)?;
                tape.add(gx, gh)?
            }
        };
        let i = tape.slice_cols(gates, 0, hidden)?;
        let i = tape.sigmoid(i)?;
        let f = tape.slice_cols(gates, hidden, 2 * hidden)?;
        let f = tape.sigmoid(f)?;
        let g = tape.slice_cols(gates, 2 * hidden, 3 * hidden)?;
        let g = tape.tanh(g)?;
        let o = tape.slice_cols(gates, 3 * hidden, 4 * hidden)?;
        let o = tape.sigmoid(o)?;
        let ig = tape.mul(i, g)?;
        let c = match state {
            None => ig,
            Some((_, c)) => {
                let c = shrink(tape, c, active)?;
                let fc = tape.mul(f, c)?;
                tape.add(fc, ig)?
            }
        };
        let tc = tape.tanh(c)?;
        let h = tape.mul(o, tc)?;
        outputs.push(h);
        source_rows.extend(rows);
        state = Some((h, c));
    }
    let stacked = if outputs.len() == 1 {
        outputs[0]
    } else {
        tape.concat(&outputs, 0)?
    };
    let mut inverse = vec![0usize; source_rows.len()];
    for (k, &r) in source_rows.iter().enumerate() {
        inverse[r] = k;
    }
    tape.gather_rows(stacked, &inverse)
}

fn shrink(tape: &mut Tape, m: Var, rows: usize) -> Result<Var> {
    if tape.shape(m)[0] == rows {
        Ok(m)
    } else {
        tape.slice_rows(m, 0, rows)
    }
}

/// Bidirectional LSTM over each span of `x` (`[N, in]`). Row `r` of the
/// result is `[forward_r ; backward_r]`, shape `[N, 2H]`.
pub fn bilstm(tape: &mut Tape, fwd: &Lstm<Var>, bwd: &Lstm<Var>, x: Var, spans: &[Span]) -> Result<Var> {
    let pf = tape.matmul(x, fwd.input)?;
    let pf = tape.add(pf, fwd.bias)?;
    let pb = tape.matmul(x, bwd.input)?;
    let pb = tape.add(pb, bwd.bias)?;
    let hf = lstm_direction(tape, fwd, pf, spans, false)?;
    let hb = lstm_direction(tape, bwd, pb, spans, true)?;
    tape.concat(&[hf, hb], 1)
}

/// Attention-pools each span of `h` (`[N, d]`) into one row. Returns the
/// pooled `[spans, d]` matrix and the `[1, len]` weight row of every span.
pub fn attention_pool(tape: &mut Tape, att: &Attention<Var>, h: Var, spans: &[Span]) -> Result<(Var, Vec<Var>)> {
    let proj = tape.matmul(h, att.proj)?;
    let proj = tape.add(proj, att.bias)?;
    let act = tape.tanh(proj)?;
    let scores = tape.matmul(act, att.score)?;
    let mut pooled = Vec::with_capacity(spans.len());
    let mut weights = Vec::with_capacity(spans.len());
    for sp in spans {
        let s = tape.slice_rows(scores, sp.start, sp.end())?;
        let s = tape.reshape(s, &[1, sp.len])?;
        let w = tape.softmax(s)?;
        let rows = tape.slice_rows(h, sp.start, sp.end())?;
        pooled.push(tape.matmul(w, rows)?);
        weights.push(w);
    }
    let out = if pooled.len() == 1 {
        pooled[0]
    } else {
        tape.concat(&pooled, 0)?
    };
    Ok((out, weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bind_lstm(tape: &mut Tape, l: &Lstm) -> Lstm<Var> {
        l.map(&mut |t| tape.param(t.clone()))
    }

    /// Straightforward per-sequence LSTM, one row at a time.
    fn naive_direction(l: &Lstm, x: &Tensor, span: Span, reverse: bool) -> Vec<Vec<f64>> {
        let hdim = l.hidden();
        let mut h = vec![0.0; hdim];
        let mut c = vec![0.0; hdim];
        let mut out = vec![Vec::new(); span.len];
        for t in 0..span.len {
            let pos = if reverse { span.len - 1 - t } else { t };
            let xr = x.row(span.start + pos);
            let mut gates = l.bias.data().to_vec();
            for (k, xv) in xr.iter().enumerate() {
                for j in 0..4 * hdim {
                    gates[j] += xv * l.input.data()[k * 4 * hdim + j];
                }
            }
            for (k, hv) in h.iter().enumerate() {
                for j in 0..4 * hdim {
                    gates[j] += hv * l.recurrent.data()[k * 4 * hdim + j];
                }
            }
            for j in 0..hdim {
                let i = crate::autodiff::sigmoid(gates[j]);
                let f = crate::autodiff::sigmoid(gates[hdim + j]);
                let g = gates[2 * hdim + j].tanh();
                let o = crate::autodiff::sigmoid(gates[3 * hdim + j]);
                c[j] = f * c[j] + i * g;
                h[j] = o * c[j].tanh();
            }
            out[pos] = h.clone();
        }
        out
    }

    #[test]
    fn packed_bilstm_matches_naive_recurrence() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let fwd = Lstm::init(3, 4, &mut rng);
        let bwd = Lstm::init(3, 4, &mut rng);
        let x = uniform_init(9, 3, 1, &mut rng);
        let spans = [Span { start: 0, len: 2 }, Span { start: 2, len: 5 }, Span { start: 7, len: 2 }];
        let mut tape = Tape::new();
        let f = bind_lstm(&mut tape, &fwd);
        let b = bind_lstm(&mut tape, &bwd);
        let xv = tape.constant(x.clone());
        let out = bilstm(&mut tape, &f, &b, xv, &spans).unwrap();
        let got = tape.value(out).clone();
        assert_eq!(got.shape(), &[9, 8]);
        for sp in spans {
            let nf = naive_direction(&fwd, &x, sp, false);
            let nb = naive_direction(&bwd, &x, sp, true);
            for t in 0..sp.len {
                let row = got.row(sp.start + t);
                for j in 0..4 {
                    assert!((row[j] - nf[t][j]).abs() < 1e-12);
                    assert!((row[4 + j] - nb[t][j]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn forget_bias_starts_at_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = Lstm::init(2, 3, &mut rng);
        assert_eq!(l.bias.data(), &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let bound = 1.0 / 2f64.sqrt();
        assert!(l.input.data().iter().all(|v| v.abs() <= bound));
    }
}
