//! Action embedding and the masked self-attentive history encoder.
//!
//! Each event is embedded from its mark, scaled absolute time and scaled gap,
//! plus a trainable positional row. Pre-norm blocks then apply multi-head
//! causal attention and an element-wise feed-forward layer, each inside a
//! residual connection, and a final layer norm yields the history rows `s_k`.
//!
//! Two evaluation routes exist: [`encode`] records the whole sequence on a
//! [`Graph`] for training, and [`EncoderState`] extends a cached prefix one
//! event at a time for generation.

use crate::data::{ActionEvent, MarkId};
use crate::model::{param_struct, ModelConfig, ModelError, Result, TimeScales};
use crate::tensor::{kernels, Graph, Tensor, Var};

param_struct!(
    /// Input-layer tables and projections.
    InputParams {
        mark_embed,
        w_time,
        w_delta,
        b_y,
        pos_embed,
    }
);

param_struct!(
    /// One attention block with its element-wise feed-forward layer.
    BlockParams {
        ln1_gain,
        ln1_bias,
        w_q,
        w_k,
        w_v,
        ln2_gain,
        ln2_bias,
        ffn_w_in,
        ffn_b_in,
        ffn_w_out,
        ffn_b_out,
    }
);

param_struct!(NormParams { gain, bias });

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    pub input: InputParams<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub final_norm: NormParams<T>,
}

impl<T> EncoderParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&str, &T) -> U) -> EncoderParams<U> {
        EncoderParams {
            input: self.input.map("encoder.input.", f),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.map(&format!("encoder.block{i}."), f))
                .collect(),
            final_norm: self.final_norm.map("encoder.final_", f),
        }
    }

    pub fn named(&self) -> Vec<(String, &T)> {
        let mut v = self.input.named("encoder.input.");
        for (i, b) in self.blocks.iter().enumerate() {
            v.extend(b.named(&format!("encoder.block{i}.")));
        }
        v.extend(self.final_norm.named("encoder.final_"));
        v
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut v = self.input.named_mut("encoder.input.");
        for (i, b) in self.blocks.iter_mut().enumerate() {
            v.extend(b.named_mut(&format!("encoder.block{i}.")));
        }
        v.extend(self.final_norm.named_mut("encoder.final_"));
        v
    }
}

/// History embedding: row `k` summarizes events `1..=k`.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryEmbedding {
    pub s: Tensor,
}

impl HistoryEmbedding {
    pub fn len(&self) -> usize {
        self.s.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, k: usize) -> &[f64] {
        self.s.row(k)
    }
}

fn scaled_features(events: &[ActionEvent], scales: &TimeScales) -> (Vec<f64>, Vec<f64>) {
    events
        .iter()
        .map(|e| (e.time / scales.time, e.delta / scales.delta))
        .unzip()
}

/// Input embeddings `Y` (K×D): mark row, scaled time and gap projections,
/// bias, and positional row.
pub fn embed_actions(
    g: &mut Graph,
    events: &[ActionEvent],
    scales: &TimeScales,
    p: &EncoderParams<Var>,
) -> Result<Var> {
    let k = events.len();
    let max_len = g.shape(p.input.pos_embed)[0];
    if k > max_len {
        return Err(ModelError::Capacity { len: k, max: max_len });
    }
    if k == 0 {
        return Err(ModelError::Contract("cannot embed an empty sequence".into()));
    }
    let marks: Vec<usize> = events.iter().map(|e| e.mark.0).collect();
    let (times, deltas) = scaled_features(events, scales);
    let rows = g.gather_rows(p.input.mark_embed, &marks)?;
    let tcol = g.constant(&[k, 1], times)?;
    let dcol = g.constant(&[k, 1], deltas)?;
    let tt = g.matmul(tcol, p.input.w_time)?;
    let dd = g.matmul(dcol, p.input.w_delta)?;
    let y = g.add(rows, tt)?;
    let y = g.add(y, dd)?;
    let y = g.add_row(y, p.input.b_y)?;
    let positions: Vec<usize> = (0..k).collect();
    let pos = g.gather_rows(p.input.pos_embed, &positions)?;
    Ok(g.add(y, pos)?)
}

/// Applies the attention blocks and final norm to input embeddings `Y`.
pub fn attend(g: &mut Graph, y: Var, p: &EncoderParams<Var>, heads: usize) -> Result<Var> {
    let d = g.shape(y)[1];
    let dh = d / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut x = y;
    for b in &p.blocks {
        let h = g.layer_norm(x, b.ln1_gain, b.ln1_bias)?;
        let q = g.matmul(h, b.w_q)?;
        let k = g.matmul(h, b.w_k)?;
        let v = g.matmul(h, b.w_v)?;
        let mut outs = Vec::with_capacity(heads);
        for head in 0..heads {
            let qh = g.slice_cols(q, head * dh, dh)?;
            let kh = g.slice_cols(k, head * dh, dh)?;
            let vh = g.slice_cols(v, head * dh, dh)?;
            outs.push(g.causal_attention(qh, kh, vh, scale)?);
        }
        let attn = if heads == 1 { outs[0] } else { g.concat(&outs)? };
        x = g.add(x, attn)?;
        let h2 = g.layer_norm(x, b.ln2_gain, b.ln2_bias)?;
        let inner = g.mul_row(h2, b.ffn_w_in)?;
        let inner = g.add_row(inner, b.ffn_b_in)?;
        let inner = g.relu(inner);
        let outer = g.mul_row(inner, b.ffn_w_out)?;
        let outer = g.add_row(outer, b.ffn_b_out)?;
        x = g.add(x, outer)?;
    }
    Ok(g.layer_norm(x, p.final_norm.gain, p.final_norm.bias)?)
}

/// History embedding rows (K×D) for a whole sequence.
pub fn encode(
    g: &mut Graph,
    events: &[ActionEvent],
    scales: &TimeScales,
    p: &EncoderParams<Var>,
    config: &ModelConfig,
) -> Result<Var> {
    let y = embed_actions(g, events, scales, p)?;
    attend(g, y, p, config.heads)
}

/// Records frozen parameters as constants.
pub fn bind_frozen(g: &mut Graph, p: &EncoderParams<Tensor>) -> EncoderParams<Var> {
    p.map(&mut |_, t| g.constant(t.shape(), t.values().to_vec()).expect("valid tensor"))
}

/// Full-sequence history embedding on frozen parameters.
pub fn history(
    events: &[ActionEvent],
    scales: &TimeScales,
    p: &EncoderParams<Tensor>,
    config: &ModelConfig,
) -> Result<HistoryEmbedding> {
    let mut g = Graph::new();
    let vars = bind_frozen(&mut g, p);
    let s = encode(&mut g, events, scales, &vars, config)?;
    Ok(HistoryEmbedding { s: g.tensor(s) })
}

/// Cached encoder state for one growing sequence.
#[derive(Debug, Clone)]
pub struct EncoderState {
    dim: usize,
    len: usize,
    last_time: f64,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    s: Vec<f64>,
}

impl EncoderState {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            dim: config.dim,
            len: 0,
            last_time: 0.0,
            keys: vec![Vec::new(); config.blocks],
            values: vec![Vec::new(); config.blocks],
            s: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn last_time(&self) -> f64 {
        self.last_time
    }

    /// Most recent history row.
    pub fn last(&self) -> Option<&[f64]> {
        (self.len > 0).then(|| &self.s[(self.len - 1) * self.dim..])
    }

    pub fn history(&self) -> Result<HistoryEmbedding> {
        Ok(HistoryEmbedding {
            s: Tensor::matrix(self.len, self.dim, self.s.clone())?,
        })
    }

    /// Appends one event and returns its history row.
    pub fn extend(
        &mut self,
        mark: MarkId,
        time: f64,
        p: &EncoderParams<Tensor>,
        config: &ModelConfig,
        scales: &TimeScales,
    ) -> Result<&[f64]> {
        let d = self.dim;
        let max_len = p.input.pos_embed.rows();
        if self.len >= max_len {
            return Err(ModelError::Capacity {
                len: self.len + 1,
                max: max_len,
            });
        }
        if mark.0 >= p.input.mark_embed.rows() {
            return Err(ModelError::Contract(format!("mark id {} out of range", mark.0)));
        }
        if (self.len > 0 && time <= self.last_time) || time < 0.0 {
            return Err(ModelError::Contract(format!(
                "event time {time} does not follow {}",
                self.last_time
            )));
        }
        let event = ActionEvent {
            mark,
            time,
            delta: time - self.last_time,
        };
        let (t, dl) = scaled_features(&[event], scales);
        let pi = &p.input;
        let mut x: Vec<f64> = (0..d)
            .map(|c| {
                pi.mark_embed.row(mark.0)[c] + t[0] * pi.w_time.values()[c] + dl[0] * pi.w_delta.values()[c]
                    + pi.b_y.values()[c]
            })
            .collect();
        for (c, xc) in x.iter_mut().enumerate() {
            *xc += pi.pos_embed.row(self.len)[c];
        }

        let heads = config.heads;
        let dh = d / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let n = self.len + 1;
        for (bi, b) in p.blocks.iter().enumerate() {
            let (h, _, _) = kernels::layer_norm(&x, b.ln1_gain.values(), b.ln1_bias.values(), kernels::LAYER_NORM_EPS);
            let q = kernels::vecmat(&h, b.w_q.values(), d);
            let k = kernels::vecmat(&h, b.w_k.values(), d);
            let v = kernels::vecmat(&h, b.w_v.values(), d);
            self.keys[bi].extend_from_slice(&k);
            self.values[bi].extend_from_slice(&v);
            let (keys, vals) = (&self.keys[bi], &self.values[bi]);
            let mut attn = vec![0.0; d];
            for head in 0..heads {
                let cols = head * dh..(head + 1) * dh;
                let scores: Vec<f64> = (0..n)
                    .map(|j| scale * kernels::dot(&q[cols.clone()], &keys[j * d + cols.start..j * d + cols.end]))
                    .collect();
                let w = kernels::softmax(&scores)?;
                for (j, wj) in w.iter().enumerate() {
                    for c in cols.clone() {
                        attn[c] += wj * vals[j * d + c];
                    }
                }
            }
            for (xc, a) in x.iter_mut().zip(&attn) {
                *xc += a;
            }
            let (h2, _, _) = kernels::layer_norm(&x, b.ln2_gain.values(), b.ln2_bias.values(), kernels::LAYER_NORM_EPS);
            for c in 0..d {
                let inner = (h2[c] * b.ffn_w_in.values()[c] + b.ffn_b_in.values()[c]).max(0.0);
                x[c] += inner * b.ffn_w_out.values()[c] + b.ffn_b_out.values()[c];
            }
        }
        let (s, _, _) = kernels::layer_norm(
            &x,
            p.final_norm.gain.values(),
            p.final_norm.bias.values(),
            kernels::LAYER_NORM_EPS,
        );
        self.s.extend_from_slice(&s);
        self.len = n;
        self.last_time = time;
        Ok(&self.s[(n - 1) * d..])
    }
}
