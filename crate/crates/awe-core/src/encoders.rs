//! Acoustic encoders mapping a `T x 39` frame matrix to a fixed-size
//! embedding: a 3-block temporal CNN with global average pooling, and a
//! stacked bidirectional GRU read out from its final states.

use serde::{Deserialize, Serialize};

use crate::rng::SeededRng;
use crate::tensor::{
    fan_in_uniform, Graph, Mode, NodeId, ParamId, ParamStore, Real, Tensor, TensorError,
    TensorResult,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Cnn,
    Bgru,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BgruReadout {
    /// Concatenation of the top layer's final forward and final backward
    /// states (the backward state after consuming the whole reversed input).
    LastStates,
    /// Mean over time of the top layer's bidirectional outputs.
    MeanOverTime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub input_dim: usize,
    /// CNN: filters per block.
    pub cnn_filters: Vec<usize>,
    /// CNN: kernel widths per block (in frames).
    pub cnn_widths: Vec<usize>,
    /// BGRU: hidden state size per direction.
    pub bgru_hidden: usize,
    pub bgru_layers: usize,
    pub bgru_readout: BgruReadout,
    pub dropout: f64,
}

impl EncoderConfig {
    /// The paper-scale CNN: 256/512/1024 filters, widths 16/32/48, stride 1.
    pub fn paper_cnn() -> Self {
        Self {
            kind: EncoderKind::Cnn,
            input_dim: 39,
            cnn_filters: vec![256, 512, 1024],
            cnn_widths: vec![16, 32, 48],
            bgru_hidden: 512,
            bgru_layers: 2,
            bgru_readout: BgruReadout::LastStates,
            dropout: 0.2,
        }
    }

    /// The paper-scale BGRU: 2 layers, hidden 512 per direction.
    pub fn paper_bgru() -> Self {
        Self {
            kind: EncoderKind::Bgru,
            ..Self::paper_cnn()
        }
    }

    pub fn embed_dim(&self) -> usize {
        match self.kind {
            EncoderKind::Cnn => *self.cnn_filters.last().unwrap_or(&0),
            EncoderKind::Bgru => 2 * self.bgru_hidden,
        }
    }

    fn validate(&self) -> TensorResult<()> {
        match self.kind {
            EncoderKind::Cnn => {
                if self.cnn_filters.is_empty() || self.cnn_filters.len() != self.cnn_widths.len() {
                    return Err(TensorError::Contract(
                        "encoder: cnn_filters and cnn_widths must be nonempty and equal length"
                            .into(),
                    ));
                }
            }
            EncoderKind::Bgru => {
                if self.bgru_hidden == 0 || self.bgru_layers == 0 {
                    return Err(TensorError::Contract(
                        "encoder: bgru hidden and layers must be >= 1".into(),
                    ));
                }
            }
        }
        if self.input_dim == 0 {
            return Err(TensorError::Contract("encoder: input_dim must be >= 1".into()));
        }
        Ok(())
    }
}

struct ConvBlock {
    weight: ParamId,
    bias: ParamId,
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
    width: usize,
}

struct GruDir {
    w_xr: ParamId,
    w_xz: ParamId,
    w_xn: ParamId,
    w_hr: ParamId,
    w_hz: ParamId,
    w_hn: ParamId,
    b_xr: ParamId,
    b_xz: ParamId,
    b_xn: ParamId,
    b_hr: ParamId,
    b_hz: ParamId,
    b_hn: ParamId,
}

struct GruLayer {
    fwd: GruDir,
    bwd: GruDir,
}

enum EncoderParams {
    Cnn(Vec<ConvBlock>),
    Bgru(Vec<GruLayer>),
}

/// The encoder `F_theta`: parameters live in a [`ParamStore`]; the struct
/// holds handles plus the configuration. Eval-mode embedding is a pure
/// function of the input and can be shared across threads.
pub struct AcousticEncoder {
    config: EncoderConfig,
    params: EncoderParams,
}

/// Gated-recurrent-unit weight layout per direction, exposed for the
/// transparent per-timestep reference used in tests.
pub struct GruDirWeights {
    pub w_xr: ParamId,
    pub w_xz: ParamId,
    pub w_xn: ParamId,
    pub w_hr: ParamId,
    pub w_hz: ParamId,
    pub w_hn: ParamId,
    pub b_xr: ParamId,
    pub b_xz: ParamId,
    pub b_xn: ParamId,
    pub b_hr: ParamId,
    pub b_hz: ParamId,
    pub b_hn: ParamId,
}

impl AcousticEncoder {
    pub fn init<F: Real>(
        config: EncoderConfig,
        store: &mut ParamStore<F>,
        rng: &mut SeededRng,
    ) -> TensorResult<Self> {
        config.validate()?;
        let params = match config.kind {
            EncoderKind::Cnn => {
                let mut blocks = Vec::new();
                let mut in_ch = config.input_dim;
                for (b, (&out_ch, &width)) in
                    config.cnn_filters.iter().zip(&config.cnn_widths).enumerate()
                {
                    let prefix = format!("encoder.cnn{b}");
                    let fan_in = width * in_ch;
                    blocks.push(ConvBlock {
                        weight: store.add(
                            &format!("{prefix}.weight"),
                            fan_in_uniform(&[fan_in, out_ch], fan_in, rng),
                            true,
                        ),
                        bias: store.add(&format!("{prefix}.bias"), Tensor::zeros(&[1, out_ch]), true),
                        gamma: store.add(
                            &format!("{prefix}.gamma"),
                            Tensor::filled(&[1, out_ch], F::one()),
                            true,
                        ),
                        beta: store.add(&format!("{prefix}.beta"), Tensor::zeros(&[1, out_ch]), true),
                        running_mean: store.add(
                            &format!("{prefix}.running_mean"),
                            Tensor::zeros(&[1, out_ch]),
                            false,
                        ),
                        running_var: store.add(
                            &format!("{prefix}.running_var"),
                            Tensor::filled(&[1, out_ch], F::one()),
                            false,
                        ),
                        width,
                    });
                    in_ch = out_ch;
                }
                EncoderParams::Cnn(blocks)
            }
            EncoderKind::Bgru => {
                let h = config.bgru_hidden;
                let mut layers = Vec::new();
                let mut in_dim = config.input_dim;
                for l in 0..config.bgru_layers {
                    let mk_dir = |dir: &str, store: &mut ParamStore<F>, rng: &mut SeededRng| {
                        let p = format!("encoder.gru{l}.{dir}");
                        GruDir {
                            w_xr: store.add(&format!("{p}.w_xr"), fan_in_uniform(&[in_dim, h], in_dim, rng), true),
                            w_xz: store.add(&format!("{p}.w_xz"), fan_in_uniform(&[in_dim, h], in_dim, rng), true),
                            w_xn: store.add(&format!("{p}.w_xn"), fan_in_uniform(&[in_dim, h], in_dim, rng), true),
                            w_hr: store.add(&format!("{p}.w_hr"), fan_in_uniform(&[h, h], h, rng), true),
                            w_hz: store.add(&format!("{p}.w_hz"), fan_in_uniform(&[h, h], h, rng), true),
                            w_hn: store.add(&format!("{p}.w_hn"), fan_in_uniform(&[h, h], h, rng), true),
                            b_xr: store.add(&format!("{p}.b_xr"), Tensor::zeros(&[1, h]), true),
                            b_xz: store.add(&format!("{p}.b_xz"), Tensor::zeros(&[1, h]), true),
                            b_xn: store.add(&format!("{p}.b_xn"), Tensor::zeros(&[1, h]), true),
                            b_hr: store.add(&format!("{p}.b_hr"), Tensor::zeros(&[1, h]), true),
                            b_hz: store.add(&format!("{p}.b_hz"), Tensor::zeros(&[1, h]), true),
                            b_hn: store.add(&format!("{p}.b_hn"), Tensor::zeros(&[1, h]), true),
                        }
                    };
                    let fwd = mk_dir("fwd", store, rng);
                    let bwd = mk_dir("bwd", store, rng);
                    layers.push(GruLayer { fwd, bwd });
                    in_dim = 2 * h;
                }
                EncoderParams::Bgru(layers)
            }
        };
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim()
    }

    /// Weight handles for layer `l`, (forward, backward). Test support.
    pub fn gru_weights(&self, layer: usize) -> Option<(GruDirWeights, GruDirWeights)> {
        match &self.params {
            EncoderParams::Bgru(layers) => layers.get(layer).map(|l| {
                let conv = |d: &GruDir| GruDirWeights {
                    w_xr: d.w_xr,
                    w_xz: d.w_xz,
                    w_xn: d.w_xn,
                    w_hr: d.w_hr,
                    w_hz: d.w_hz,
                    w_hn: d.w_hn,
                    b_xr: d.b_xr,
                    b_xz: d.b_xz,
                    b_xn: d.b_xn,
                    b_hr: d.b_hr,
                    b_hz: d.b_hz,
                    b_hn: d.b_hn,
                };
                (conv(&l.fwd), conv(&l.bwd))
            }),
            _ => None,
        }
    }

    /// Build the embedding subgraph for one segment. `frames_node` must hold
    /// a `T x input_dim` tensor already on the graph.
    pub fn embed_node<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        frames_node: NodeId,
    ) -> TensorResult<NodeId> {
        Ok(self.embed_batch_nodes(g, &[frames_node])?[0])
    }

    /// Build embedding subgraphs for a whole batch on one graph. For the CNN
    /// this is where train-mode batch normalization couples the segments:
    /// each block's statistics are taken over the concatenated time axes of
    /// the batch. In eval mode the result per segment is identical to a
    /// single-segment build.
    pub fn embed_batch_nodes<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        frames_nodes: &[NodeId],
    ) -> TensorResult<Vec<NodeId>> {
        if frames_nodes.is_empty() {
            return Err(TensorError::Contract("embed: empty batch".into()));
        }
        for &node in frames_nodes {
            let (t, d) = g.dims(node);
            if d != self.config.input_dim || t == 0 {
                return Err(TensorError::Shape {
                    op: "embed",
                    detail: format!(
                        "frames {t}x{d}, expected T x {} with T >= 1",
                        self.config.input_dim
                    ),
                });
            }
        }
        match &self.params {
            EncoderParams::Cnn(blocks) => {
                let mut seqs: Vec<NodeId> = frames_nodes.to_vec();
                for block in blocks {
                    let w = g.param(block.weight);
                    let b = g.param(block.bias);
                    let mut convs = Vec::with_capacity(seqs.len());
                    let mut lens = Vec::with_capacity(seqs.len());
                    for &s in &seqs {
                        let c = g.conv1d(s, w, b, block.width)?;
                        lens.push(g.dims(c).0);
                        convs.push(c);
                    }
                    let cat = g.concat_rows(&convs)?;
                    let gamma = g.param(block.gamma);
                    let beta = g.param(block.beta);
                    let bn = g.batch_norm(
                        cat,
                        gamma,
                        beta,
                        block.running_mean,
                        block.running_var,
                        0.1,
                        1e-5,
                    )?;
                    let act = g.relu(bn)?;
                    let dropped = g.dropout(act, self.config.dropout)?;
                    let mut offset = 0;
                    let mut next = Vec::with_capacity(seqs.len());
                    for &len in &lens {
                        next.push(g.slice_rows(dropped, offset, offset + len)?);
                        offset += len;
                    }
                    seqs = next;
                }
                seqs.into_iter().map(|s| g.mean_rows(s)).collect()
            }
            EncoderParams::Bgru(_) => frames_nodes
                .iter()
                .map(|&node| self.embed_bgru_node(g, node))
                .collect(),
        }
    }

    fn embed_bgru_node<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        frames_node: NodeId,
    ) -> TensorResult<NodeId> {
        match &self.params {
            EncoderParams::Bgru(layers) => {
                let h = self.config.bgru_hidden;
                let mut seq = frames_node;
                let mut final_fwd = None;
                let mut final_bwd = None;
                for (l, layer) in layers.iter().enumerate() {
                    let fwd_states = self.gru_direction(g, seq, &layer.fwd, h, false)?;
                    let bwd_states = self.gru_direction(g, seq, &layer.bwd, h, true)?;
                    final_fwd = Some(*fwd_states.last().unwrap());
                    final_bwd = Some(*bwd_states.last().unwrap());
                    // Stack per-time outputs; backward states come out in
                    // reverse time order and are realigned here.
                    let fwd_seq = g.concat_rows(&fwd_states)?;
                    let bwd_rev: Vec<NodeId> = bwd_states.iter().rev().copied().collect();
                    let bwd_seq = g.concat_rows(&bwd_rev)?;
                    let mut out = g.concat_cols(&[fwd_seq, bwd_seq])?;
                    if l + 1 < layers.len() {
                        out = g.dropout(out, self.config.dropout)?;
                    }
                    seq = out;
                }
                match self.config.bgru_readout {
                    BgruReadout::LastStates => {
                        g.concat_cols(&[final_fwd.unwrap(), final_bwd.unwrap()])
                    }
                    BgruReadout::MeanOverTime => g.mean_rows(seq),
                }
            }
            EncoderParams::Cnn(_) => unreachable!("bgru path called on cnn encoder"),
        }
    }

    /// One direction of one GRU layer. Returns the hidden state after each
    /// consumed timestep, in consumption order.
    fn gru_direction<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        seq: NodeId,
        dir: &GruDir,
        h: usize,
        reverse: bool,
    ) -> TensorResult<Vec<NodeId>> {
        let (t_len, _) = g.dims(seq);
        // Input-side projections for all timesteps at once.
        let w_xr = g.param(dir.w_xr);
        let w_xz = g.param(dir.w_xz);
        let w_xn = g.param(dir.w_xn);
        let b_xr = g.param(dir.b_xr);
        let b_xz = g.param(dir.b_xz);
        let b_xn = g.param(dir.b_xn);
        let xr_all = g.matmul(seq, w_xr)?;
        let xr_all = g.add_bias(xr_all, b_xr)?;
        let xz_all = g.matmul(seq, w_xz)?;
        let xz_all = g.add_bias(xz_all, b_xz)?;
        let xn_all = g.matmul(seq, w_xn)?;
        let xn_all = g.add_bias(xn_all, b_xn)?;

        let w_hr = g.param(dir.w_hr);
        let w_hz = g.param(dir.w_hz);
        let w_hn = g.param(dir.w_hn);
        let b_hr = g.param(dir.b_hr);
        let b_hz = g.param(dir.b_hz);
        let b_hn = g.param(dir.b_hn);

        let mut state = g.input(Tensor::zeros(&[1, h]))?;
        let mut states = Vec::with_capacity(t_len);
        for step in 0..t_len {
            let t = if reverse { t_len - 1 - step } else { step };
            let xr = g.slice_rows(xr_all, t, t + 1)?;
            let xz = g.slice_rows(xz_all, t, t + 1)?;
            let xn = g.slice_rows(xn_all, t, t + 1)?;

            let hr = g.matmul(state, w_hr)?;
            let hr = g.add(hr, b_hr)?;
            let pre_r = g.add(xr, hr)?;
            let r = g.sigmoid(pre_r)?;

            let hz = g.matmul(state, w_hz)?;
            let hz = g.add(hz, b_hz)?;
            let pre_z = g.add(xz, hz)?;
            let z = g.sigmoid(pre_z)?;

            let hn = g.matmul(state, w_hn)?;
            let hn = g.add(hn, b_hn)?;
            let gated = g.mul(r, hn)?;
            let pre_n = g.add(xn, gated)?;
            let n = g.tanh(pre_n)?;

            // h' = (1 - z) * n + z * h  ==  n - z*n + z*h
            let zn = g.mul(z, n)?;
            let zh = g.mul(z, state)?;
            let part = g.sub(n, zn)?;
            state = g.add(part, zh)?;
            states.push(state);
        }
        Ok(states)
    }

    /// Embed one segment, building a private graph. Returns the embedding as
    /// a plain vector.
    pub fn embed<F: Real>(
        &self,
        store: &ParamStore<F>,
        frames: &Tensor<F>,
        mode: Mode,
    ) -> TensorResult<Vec<F>> {
        self.embed_seeded(store, frames, mode, 0)
    }

    /// Embed with an explicit dropout stream (train-mode callers).
    pub fn embed_seeded<F: Real>(
        &self,
        store: &ParamStore<F>,
        frames: &Tensor<F>,
        mode: Mode,
        dropout_seed: u64,
    ) -> TensorResult<Vec<F>> {
        let mut g = Graph::with_dropout_seed(store, mode, dropout_seed);
        let x = g.input(frames.clone())?;
        let e = self.embed_node(&mut g, x)?;
        Ok(g.value_data(e).to_vec())
    }

    /// Embed a batch. Row `i` of the result equals `embed(frames[i])`
    /// exactly in eval mode; with `threads > 1` segments are partitioned
    /// across workers and results keep input order.
    pub fn embed_batch<F: Real>(
        &self,
        store: &ParamStore<F>,
        batch: &[&Tensor<F>],
        mode: Mode,
        threads: usize,
    ) -> TensorResult<Vec<Vec<F>>> {
        if batch.is_empty() {
            return Err(TensorError::Contract("embed_batch: empty batch".into()));
        }
        if threads <= 1 || batch.len() == 1 {
            return batch.iter().map(|f| self.embed(store, f, mode)).collect();
        }
        let mut out: Vec<TensorResult<Vec<F>>> = Vec::with_capacity(batch.len());
        for _ in 0..batch.len() {
            out.push(Ok(Vec::new()));
        }
        let chunk = batch.len().div_ceil(threads);
        std::thread::scope(|scope| {
            for (frames_chunk, out_chunk) in batch.chunks(chunk).zip(out.chunks_mut(chunk)) {
                scope.spawn(move || {
                    for (f, slot) in frames_chunk.iter().zip(out_chunk.iter_mut()) {
                        *slot = self.embed(store, f, mode);
                    }
                });
            }
        });
        out.into_iter().collect()
    }
}
