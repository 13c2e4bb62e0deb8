//! The three learning objectives: phone n-gram detection, word-to-phones
//! decoding, and the contrastive siamese triplet with its negative-sampling
//! strategies.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{NgramInventory, WordSegment};
use crate::rng::SeededRng;
use crate::tensor::{
    fan_in_uniform, Graph, NodeId, ParamId, ParamStore, Real, Tensor, TensorError, TensorResult,
};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("objectives: zero-norm embedding vector")]
    ZeroNorm,
    #[error("objectives: no segment of a different word type in the batch")]
    NoNegative,
    #[error("objectives: corpus too degenerate for triplets: {0}")]
    DegenerateCorpus(String),
    #[error("objectives: phone '{0}' outside decoder vocabulary")]
    UnknownPhone(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

type Result<T> = std::result::Result<T, ObjectiveError>;

// ---------------------------------------------------------------- detection

/// Linear multi-label head over the phone n-gram inventory:
/// `y_hat = sigma(x W + b)`.
pub struct DetectHead {
    pub w: ParamId,
    pub b: ParamId,
    inventory: NgramInventory,
}

impl DetectHead {
    pub fn init<F: Real>(
        embed_dim: usize,
        inventory: NgramInventory,
        store: &mut ParamStore<F>,
        rng: &mut SeededRng,
    ) -> Self {
        let k = inventory.len();
        let w = store.add(
            "head.detect.w",
            fan_in_uniform(&[embed_dim, k], embed_dim, rng),
            true,
        );
        let b = store.add("head.detect.b", Tensor::zeros(&[1, k]), true);
        Self { w, b, inventory }
    }

    pub fn inventory(&self) -> &NgramInventory {
        &self.inventory
    }

    /// Binary cross-entropy of one segment's multi-hot targets, computed in
    /// log-space from logits and summed over the inventory.
    pub fn detect_loss<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        x: NodeId,
        targets: &[f32],
    ) -> Result<NodeId> {
        if targets.len() != self.inventory.len() {
            return Err(ObjectiveError::Tensor(TensorError::Shape {
                op: "detect_loss",
                detail: format!(
                    "{} targets vs inventory of {}",
                    targets.len(),
                    self.inventory.len()
                ),
            }));
        }
        let w = g.param(self.w);
        let b = g.param(self.b);
        let z = g.matmul(x, w)?;
        let z = g.add_bias(z, b)?;
        let y: Vec<F> = targets.iter().map(|&t| F::of(t as f64)).collect();
        Ok(g.bce_with_logits(z, &y)?)
    }
}

// ---------------------------------------------------------------- decoding

/// Recurrent phonetic decoder: a single-layer unidirectional GRU whose
/// initial hidden state is a linear projection of the AWE, trained with
/// teacher forcing to emit the phone string plus EOS.
pub struct PhoneDecoder {
    symbols: Vec<String>,
    embed_table: ParamId,
    init_w: ParamId,
    init_b: ParamId,
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
    out_w: ParamId,
    out_b: ParamId,
}

impl PhoneDecoder {
    pub const BOS: &'static str = "<bos>";
    pub const EOS: &'static str = "<eos>";

    pub fn init<F: Real>(
        awe_dim: usize,
        hidden: usize,
        embed_dim: usize,
        phone_inventory: &[String],
        store: &mut ParamStore<F>,
        rng: &mut SeededRng,
    ) -> Self {
        let mut symbols = phone_inventory.to_vec();
        symbols.push(Self::BOS.to_owned());
        symbols.push(Self::EOS.to_owned());
        let v = symbols.len();
        let h = hidden;
        let e = embed_dim;
        let add = |store: &mut ParamStore<F>, name: &str, t: Tensor<F>| store.add(name, t, true);
        Self {
            embed_table: add(store, "head.dec.embed", fan_in_uniform(&[v, e], e, rng)),
            init_w: add(store, "head.dec.init_w", fan_in_uniform(&[awe_dim, h], awe_dim, rng)),
            init_b: add(store, "head.dec.init_b", Tensor::zeros(&[1, h])),
            w_xr: add(store, "head.dec.w_xr", fan_in_uniform(&[e, h], e, rng)),
            w_xz: add(store, "head.dec.w_xz", fan_in_uniform(&[e, h], e, rng)),
            w_xn: add(store, "head.dec.w_xn", fan_in_uniform(&[e, h], e, rng)),
            w_hr: add(store, "head.dec.w_hr", fan_in_uniform(&[h, h], h, rng)),
            w_hz: add(store, "head.dec.w_hz", fan_in_uniform(&[h, h], h, rng)),
            w_hn: add(store, "head.dec.w_hn", fan_in_uniform(&[h, h], h, rng)),
            b_xr: add(store, "head.dec.b_xr", Tensor::zeros(&[1, h])),
            b_xz: add(store, "head.dec.b_xz", Tensor::zeros(&[1, h])),
            b_xn: add(store, "head.dec.b_xn", Tensor::zeros(&[1, h])),
            b_hr: add(store, "head.dec.b_hr", Tensor::zeros(&[1, h])),
            b_hz: add(store, "head.dec.b_hz", Tensor::zeros(&[1, h])),
            b_hn: add(store, "head.dec.b_hn", Tensor::zeros(&[1, h])),
            out_w: add(store, "head.dec.out_w", fan_in_uniform(&[h, v], h, rng)),
            out_b: add(store, "head.dec.out_b", Tensor::zeros(&[1, v])),
            symbols,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.symbols.len()
    }

    fn symbol_index(&self, symbol: &str) -> Result<usize> {
        self.symbols
            .iter()
            .position(|s| s == symbol)
            .ok_or_else(|| ObjectiveError::UnknownPhone(symbol.to_owned()))
    }

    fn gru_step<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        input: NodeId,
        state: NodeId,
    ) -> TensorResult<NodeId> {
        let step_gate = |g: &mut Graph<'_, F>,
                         w_x: ParamId,
                         b_x: ParamId,
                         w_h: ParamId,
                         b_h: ParamId,
                         input: NodeId,
                         state: NodeId|
         -> TensorResult<NodeId> {
            let wx = g.param(w_x);
            let bx = g.param(b_x);
            let wh = g.param(w_h);
            let bh = g.param(b_h);
            let xa = g.matmul(input, wx)?;
            let xa = g.add(xa, bx)?;
            let ha = g.matmul(state, wh)?;
            let ha = g.add(ha, bh)?;
            g.add(xa, ha)
        };
        let pre_r = step_gate(g, self.w_xr, self.b_xr, self.w_hr, self.b_hr, input, state)?;
        let r = g.sigmoid(pre_r)?;
        let pre_z = step_gate(g, self.w_xz, self.b_xz, self.w_hz, self.b_hz, input, state)?;
        let z = g.sigmoid(pre_z)?;

        let wxn = g.param(self.w_xn);
        let bxn = g.param(self.b_xn);
        let whn = g.param(self.w_hn);
        let bhn = g.param(self.b_hn);
        let xn = g.matmul(input, wxn)?;
        let xn = g.add(xn, bxn)?;
        let hn = g.matmul(state, whn)?;
        let hn = g.add(hn, bhn)?;
        let gated = g.mul(r, hn)?;
        let pre_n = g.add(xn, gated)?;
        let n = g.tanh(pre_n)?;

        let zn = g.mul(z, n)?;
        let zh = g.mul(z, state)?;
        let part = g.sub(n, zn)?;
        g.add(part, zh)
    }

    /// Teacher-forced logits for inputs `[BOS, phi_1..phi_N]`:
    /// an `(N+1) x V` matrix, one row per prediction step.
    pub fn teacher_forced_logits<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        awe: NodeId,
        phones: &[String],
    ) -> Result<NodeId> {
        let mut input_ids = Vec::with_capacity(phones.len() + 1);
        input_ids.push(self.symbol_index(Self::BOS)?);
        for p in phones {
            input_ids.push(self.symbol_index(p)?);
        }
        let init_w = g.param(self.init_w);
        let init_b = g.param(self.init_b);
        let h0 = g.matmul(awe, init_w)?;
        let mut state = g.add(h0, init_b)?;
        let table = g.param(self.embed_table);
        let out_w = g.param(self.out_w);
        let out_b = g.param(self.out_b);
        let mut logit_rows = Vec::with_capacity(input_ids.len());
        for &idx in &input_ids {
            let input = g.gather_rows(table, &[idx])?;
            state = self.gru_step(g, input, state)?;
            let z = g.matmul(state, out_w)?;
            let z = g.add(z, out_b)?;
            logit_rows.push(z);
        }
        Ok(g.concat_rows(&logit_rows)?)
    }

    /// Categorical cross-entropy summed over timesteps, EOS included.
    pub fn word2phones_loss<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        awe: NodeId,
        phones: &[String],
    ) -> Result<NodeId> {
        let logits = self.teacher_forced_logits(g, awe, phones)?;
        let lsm = g.log_softmax(logits)?;
        let mut picks = Vec::with_capacity(phones.len() + 1);
        for (t, p) in phones.iter().enumerate() {
            picks.push((t, self.symbol_index(p)?));
        }
        picks.push((phones.len(), self.symbol_index(Self::EOS)?));
        let gold = g.gather_entries(lsm, &picks)?;
        let total = g.sum(gold)?;
        Ok(g.mul_scalar(total, -1.0)?)
    }

    /// Greedy decode for qualitative inspection only.
    pub fn greedy_decode<F: Real>(
        &self,
        store: &ParamStore<F>,
        awe: &[F],
        max_len: usize,
    ) -> Result<Vec<String>> {
        let mut g = Graph::new(store, crate::tensor::Mode::Eval);
        let x = g.input(Tensor::row(awe.to_vec()))?;
        let init_w = g.param(self.init_w);
        let init_b = g.param(self.init_b);
        let h0 = g.matmul(x, init_w)?;
        let mut state = g.add(h0, init_b)?;
        let table = g.param(self.embed_table);
        let out_w = g.param(self.out_w);
        let out_b = g.param(self.out_b);
        let mut current = self.symbol_index(Self::BOS)?;
        let eos = self.symbol_index(Self::EOS)?;
        let mut out = Vec::new();
        for _ in 0..max_len {
            let input = g.gather_rows(table, &[current])?;
            state = self.gru_step(&mut g, input, state)?;
            let z = g.matmul(state, out_w)?;
            let z = g.add(z, out_b)?;
            let logits = g.value_data(z);
            let (best, _) = logits
                .iter()
                .enumerate()
                .fold((0usize, F::neg_infinity()), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                });
            if best == eos {
                break;
            }
            out.push(self.symbols[best].clone());
            current = best;
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------- triplets

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingStrategy {
    /// Uniform over different-type segments in the batch.
    Random,
    /// The paper's "semi-hard": the different-type segment minimizing the
    /// cosine distance to the anchor (hardest in batch), ties to lowest index.
    SemiHard,
    /// Classic semi-hard band: hardest negative strictly farther than the
    /// positive; falls back to the overall hardest when the band is empty.
    SemiHardBand,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TripletConfig {
    pub margin: f64,
    pub sampling: SamplingStrategy,
    /// Scale cosine distance to [0, 1] as (1 - cos)/2; raw (1 - cos) when off.
    pub scaled_distance: bool,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self {
            margin: 0.4,
            sampling: SamplingStrategy::SemiHard,
            scaled_distance: true,
        }
    }
}

/// Cosine distance on plain vectors, accumulated in f64.
/// `scaled` maps it to [0, 1] as `(1 - cos)/2`; otherwise `1 - cos` in [0, 2].
pub fn cosine_distance<F: Real>(u: &[F], v: &[F], scaled: bool) -> Result<f64> {
    let mut dot = 0.0f64;
    let mut nu = 0.0f64;
    let mut nv = 0.0f64;
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (a.as_f64(), b.as_f64());
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(ObjectiveError::ZeroNorm);
    }
    let cos = dot / (nu.sqrt() * nv.sqrt());
    Ok(if scaled { (1.0 - cos) / 2.0 } else { 1.0 - cos })
}

/// Cosine-distance subgraph between two embedding nodes.
fn cosine_distance_node<F: Real>(
    g: &mut Graph<'_, F>,
    u: NodeId,
    v: NodeId,
    scaled: bool,
) -> Result<NodeId> {
    for id in [u, v] {
        let norm_sq: f64 = g.value_data(id).iter().map(|x| x.as_f64().powi(2)).sum();
        if norm_sq == 0.0 {
            return Err(ObjectiveError::ZeroNorm);
        }
    }
    let uv = g.mul(u, v)?;
    let dot = g.sum(uv)?;
    let uu = g.mul(u, u)?;
    let su = g.sum(uu)?;
    let nu = g.sqrt(su)?;
    let vv = g.mul(v, v)?;
    let sv = g.sum(vv)?;
    let nv = g.sqrt(sv)?;
    let denom = g.mul(nu, nv)?;
    let cos = g.div(dot, denom)?;
    let d = if scaled {
        // (1 - cos) / 2
        let half = g.mul_scalar(cos, -0.5)?;
        g.add_scalar(half, 0.5)?
    } else {
        let neg = g.mul_scalar(cos, -1.0)?;
        g.add_scalar(neg, 1.0)?
    };
    Ok(d)
}

/// Triplet margin loss `max(0, mu + d(a, p) - d(a, n))` over embedding nodes.
pub fn triplet_loss<F: Real>(
    g: &mut Graph<'_, F>,
    anchor: NodeId,
    positive: NodeId,
    negative: NodeId,
    cfg: &TripletConfig,
) -> Result<NodeId> {
    let d_ap = cosine_distance_node(g, anchor, positive, cfg.scaled_distance)?;
    let d_an = cosine_distance_node(g, anchor, negative, cfg.scaled_distance)?;
    let diff = g.sub(d_ap, d_an)?;
    let shifted = g.add_scalar(diff, cfg.margin)?;
    Ok(g.relu(shifted)?)
}

/// Choose a negative index from the batch for the given anchor.
/// `positive` is consulted only by [`SamplingStrategy::SemiHardBand`].
pub fn sample_negative<F: Real>(
    embeddings: &[Vec<F>],
    types: &[&str],
    anchor: usize,
    positive: Option<usize>,
    strategy: SamplingStrategy,
    margin: f64,
    scaled: bool,
    rng: &mut SeededRng,
) -> Result<usize> {
    let candidates: Vec<usize> = (0..embeddings.len())
        .filter(|&i| types[i] != types[anchor])
        .collect();
    if candidates.is_empty() {
        return Err(ObjectiveError::NoNegative);
    }
    match strategy {
        SamplingStrategy::Random => Ok(candidates[rng.below(candidates.len())]),
        SamplingStrategy::SemiHard => {
            let mut best = candidates[0];
            let mut best_d = f64::INFINITY;
            for &i in &candidates {
                let d = cosine_distance(&embeddings[anchor], &embeddings[i], scaled)?;
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            Ok(best)
        }
        SamplingStrategy::SemiHardBand => {
            let p = positive.ok_or_else(|| {
                ObjectiveError::Tensor(TensorError::Contract(
                    "semi_hard_band sampling requires the positive index".into(),
                ))
            })?;
            let d_ap = cosine_distance(&embeddings[anchor], &embeddings[p], scaled)?;
            let mut best_band: Option<(usize, f64)> = None;
            let mut best_any: Option<(usize, f64)> = None;
            for &i in &candidates {
                let d = cosine_distance(&embeddings[anchor], &embeddings[i], scaled)?;
                if best_any.map_or(true, |(_, bd)| d < bd) {
                    best_any = Some((i, d));
                }
                if d > d_ap && d < d_ap + margin && best_band.map_or(true, |(_, bd)| d < bd) {
                    best_band = Some((i, d));
                }
            }
            Ok(best_band.or(best_any).map(|(i, _)| i).unwrap())
        }
    }
}

/// Sample `(anchor, positive)` index pairs for one triplet batch.
///
/// Anchors are drawn uniformly over segments of types with at least two
/// segments (so anchor frequency tracks segment frequency); the positive is a
/// different segment of the same type. The returned batch always contains at
/// least two word types.
pub fn build_triplet_batch(
    segments: &[WordSegment],
    batch_size: usize,
    rng: &mut SeededRng,
) -> Result<Vec<(usize, usize)>> {
    use std::collections::HashMap;
    let mut by_type: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, s) in segments.iter().enumerate() {
        by_type.entry(&s.word_type).or_default().push(i);
    }
    let eligible: Vec<usize> = segments
        .iter()
        .enumerate()
        .filter(|(_, s)| by_type[s.word_type.as_str()].len() >= 2)
        .map(|(i, _)| i)
        .collect();
    let eligible_types: std::collections::HashSet<&str> = eligible
        .iter()
        .map(|&i| segments[i].word_type.as_str())
        .collect();
    if eligible_types.len() < 2 {
        return Err(ObjectiveError::DegenerateCorpus(format!(
            "need >= 2 word types with >= 2 segments each, found {}",
            eligible_types.len()
        )));
    }
    if batch_size < 2 {
        return Err(ObjectiveError::DegenerateCorpus(
            "triplet batches need at least 2 anchors".into(),
        ));
    }
    let mut pairs = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let anchor = eligible[rng.below(eligible.len())];
        let mates = &by_type[segments[anchor].word_type.as_str()];
        let positive = loop {
            let cand = mates[rng.below(mates.len())];
            if cand != anchor {
                break cand;
            }
        };
        pairs.push((anchor, positive));
    }
    // Guarantee a valid negative for every anchor: at least 2 types in batch.
    let first_type = segments[pairs[0].0].word_type.as_str();
    if pairs
        .iter()
        .all(|&(a, _)| segments[a].word_type == first_type)
    {
        let other: Vec<usize> = eligible
            .iter()
            .copied()
            .filter(|&i| segments[i].word_type != first_type)
            .collect();
        let anchor = other[rng.below(other.len())];
        let mates = &by_type[segments[anchor].word_type.as_str()];
        let positive = loop {
            let cand = mates[rng.below(mates.len())];
            if cand != anchor {
                break cand;
            }
        };
        let last = pairs.len() - 1;
        pairs[last] = (anchor, positive);
    }
    Ok(pairs)
}
