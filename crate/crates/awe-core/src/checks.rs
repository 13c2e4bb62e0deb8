//! The numerical verification suite behind `awe gradcheck`: every core op
//! plus all three losses driven through tiny encoders, checked against
//! central finite differences in f64.

use crate::corpus::ngram_inventory;
use crate::encoders::{AcousticEncoder, BgruReadout, EncoderConfig, EncoderKind};
use crate::objectives::{triplet_loss, DetectHead, PhoneDecoder, TripletConfig};
use crate::rng::SeededRng;
use crate::tensor::gradcheck::{check_params, op_suite, GradCheckReport};
use crate::tensor::{ParamStore, Tensor, TensorResult};
use std::collections::BTreeMap;

fn rand_frames(t: usize, d: usize, rng: &mut SeededRng) -> Tensor<f64> {
    let data = (0..t * d).map(|_| rng.normal()).collect();
    Tensor::from_vec(&[t, d], data).unwrap()
}

fn tiny_encoder(kind: EncoderKind) -> EncoderConfig {
    EncoderConfig {
        kind,
        input_dim: 4,
        cnn_filters: vec![2, 3],
        cnn_widths: vec![2, 3],
        bgru_hidden: 3,
        bgru_layers: 2,
        bgru_readout: BgruReadout::LastStates,
        dropout: 0.2,
    }
}

/// Gradient checks of each loss through a full encoder, both architectures.
pub fn loss_suite(seed: u64) -> TensorResult<GradCheckReport> {
    let mut report = GradCheckReport::default();
    let mut rng = SeededRng::new(seed);

    for kind in [EncoderKind::Cnn, EncoderKind::Bgru] {
        let kname = match kind {
            EncoderKind::Cnn => "cnn",
            EncoderKind::Bgru => "bgru",
        };

        // Phone n-gram detection.
        {
            let mut store = ParamStore::<f64>::new();
            let enc = AcousticEncoder::init(tiny_encoder(kind), &mut store, &mut rng)?;
            let mut vocab = BTreeMap::new();
            vocab.insert("w1".to_string(), vec!["a".to_string(), "b".to_string()]);
            vocab.insert("w2".to_string(), vec!["b".to_string(), "c".to_string()]);
            let inv = ngram_inventory(&vocab, &[2]).expect("orders nonempty");
            let head = DetectHead::init(enc.embed_dim(), inv, &mut store, &mut rng);
            let frames = rand_frames(5, 4, &mut rng);
            let phi = head.inventory().len();
            let targets: Vec<f32> = (0..phi).map(|i| (i % 2) as f32).collect();
            let err = check_params(&mut store, |g| {
                let x = g.input(frames.clone())?;
                let e = enc.embed_node(g, x)?;
                head.detect_loss(g, e, &targets)
                    .map_err(|e| crate::tensor::TensorError::Contract(e.to_string()))
            })?;
            report.record(&format!("detect_loss/{kname}"), err);
        }

        // Word-to-phones decoding.
        {
            let mut store = ParamStore::<f64>::new();
            let enc = AcousticEncoder::init(tiny_encoder(kind), &mut store, &mut rng)?;
            let inventory = vec!["a".to_string(), "b".to_string(), "c".to_string()];
            let dec = PhoneDecoder::init(enc.embed_dim(), 3, 2, &inventory, &mut store, &mut rng);
            let frames = rand_frames(4, 4, &mut rng);
            let phones = vec!["b".to_string(), "a".to_string()];
            let err = check_params(&mut store, |g| {
                let x = g.input(frames.clone())?;
                let e = enc.embed_node(g, x)?;
                dec.word2phones_loss(g, e, &phones)
                    .map_err(|e| crate::tensor::TensorError::Contract(e.to_string()))
            })?;
            report.record(&format!("word2phones_loss/{kname}"), err);
        }

        // Triplet margin loss over three encoder passes.
        {
            let mut store = ParamStore::<f64>::new();
            let enc = AcousticEncoder::init(tiny_encoder(kind), &mut store, &mut rng)?;
            let fa = rand_frames(5, 4, &mut rng);
            let fp = rand_frames(6, 4, &mut rng);
            let fn_ = rand_frames(4, 4, &mut rng);
            let cfg = TripletConfig {
                margin: 0.6,
                ..TripletConfig::default()
            };
            let err = check_params(&mut store, |g| {
                let xa = g.input(fa.clone())?;
                let xp = g.input(fp.clone())?;
                let xn = g.input(fn_.clone())?;
                let embs = enc.embed_batch_nodes(g, &[xa, xp, xn])?;
                triplet_loss(g, embs[0], embs[1], embs[2], &cfg)
                    .map_err(|e| crate::tensor::TensorError::Contract(e.to_string()))
            })?;
            report.record(&format!("triplet_loss/{kname}"), err);
        }
    }
    Ok(report)
}

/// The complete gradient-check suite: core ops plus all losses.
pub fn full_suite(seed: u64) -> TensorResult<GradCheckReport> {
    let mut report = op_suite(seed)?;
    report.merge(loss_suite(seed ^ 0xabcd)?);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::FD_TOLERANCE;

    #[test]
    fn losses_pass_finite_difference_checks() {
        let report = loss_suite(5150).unwrap();
        for c in &report.checks {
            assert!(
                c.max_rel_err < FD_TOLERANCE,
                "{} failed: {}",
                c.name,
                c.max_rel_err
            );
        }
    }
}
