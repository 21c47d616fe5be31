#![allow(dead_code)]

use sortsimul_core::encoder::ModelConfig;
use sortsimul_core::model::{ForwardRngs, Model};
use sortsimul_core::rng::{self, streams};
use sortsimul_core::sorting::AsnConfig;
use sortsimul_core::{Graph, Result};

/// A model small enough for exhaustive finite differences.
pub fn tiny_config(vocab: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        embed_dim: 8,
        ffn_dim: 12,
        heads: 2,
        layers: 2,
        dropout: 0.0,
        delay_k: 1,
        upsample_ratio: 2,
    }
}

pub fn tiny_model(vocab: usize, asn: bool, seed: u64) -> Model {
    let asn = asn.then(|| AsnConfig {
        decoder_layers: 1,
        ..AsnConfig::default()
    });
    Model::new(tiny_config(vocab), asn, seed).unwrap()
}

/// Loss with fixed noise and mask draws, so it is a pure function of the
/// parameters.
pub fn loss_value(
    model: &Model,
    pairs: &[(&[u32], &[u32])],
    use_asn: bool,
    eps: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let vars = model.store.register(&mut g, false);
    let mut sorting = rng::stream(99, streams::SORTING);
    let out = model.training_loss(
        &mut g,
        &vars,
        pairs,
        use_asn,
        eps,
        ForwardRngs {
            dropout: None,
            sorting: &mut sorting,
        },
    )?;
    Ok(g.value(out.loss).item())
}

/// Worst relative error over every parameter element.
pub fn model_grad_check(
    model: &Model,
    pairs: &[(&[u32], &[u32])],
    use_asn: bool,
    step: f64,
) -> f64 {
    let mut g = Graph::new();
    let vars = model.store.register(&mut g, true);
    let mut sorting = rng::stream(99, streams::SORTING);
    let out = model
        .training_loss(
            &mut g,
            &vars,
            pairs,
            use_asn,
            0.0,
            ForwardRngs {
                dropout: None,
                sorting: &mut sorting,
            },
        )
        .unwrap();
    g.backward(out.loss).unwrap();
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    let ids: Vec<_> = model.store.iter().map(|(id, _, _)| id).collect();
    for (k, id) in ids.into_iter().enumerate() {
        let analytic: Vec<f64> = g
            .grad(vars[k])
            .map(|d| d.to_vec())
            .unwrap_or_else(|| vec![0.0; model.store.get(id).numel()]);
        for j in 0..analytic.len() {
            let orig = model.store.get(id).data()[j];
            probe.store.get_mut(id).data_mut()[j] = orig + step;
            let up = loss_value(&probe, pairs, use_asn, 0.0).unwrap();
            probe.store.get_mut(id).data_mut()[j] = orig - step;
            let down = loss_value(&probe, pairs, use_asn, 0.0).unwrap();
            probe.store.get_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[j];
            worst = worst.max((a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs()));
        }
    }
    worst
}
