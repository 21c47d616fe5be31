mod common;

use common::{loss_value, model_grad_check, tiny_model};

// vocab: blank, pad, 4 source, 4 target
const VOCAB: usize = 10;

#[test]
fn encoder_projection_ctc_path() {
    let model = tiny_model(VOCAB, false, 3);
    let src: &[u32] = &[2, 3, 4, 5];
    let tgt: &[u32] = &[7, 6, 9, 8];
    let err = model_grad_check(&model, &[(src, tgt)], false, 1e-5);
    assert!(err <= 1e-4, "max relative error {err}");
}

#[test]
fn full_sorting_network_path() {
    let model = tiny_model(VOCAB, true, 5);
    let src: &[u32] = &[2, 3, 4, 5];
    let tgt: &[u32] = &[8, 9, 6, 7];
    let err = model_grad_check(&model, &[(src, tgt)], true, 1e-5);
    assert!(err <= 1e-4, "max relative error {err}");
}

#[test]
fn batched_loss_is_sum_of_sentences() {
    let model = tiny_model(VOCAB, false, 8);
    let a: (&[u32], &[u32]) = (&[2, 3, 4], &[6, 7, 8]);
    let b: (&[u32], &[u32]) = (&[5, 4], &[9, 8]);
    let both = loss_value(&model, &[a, b], false, 0.1).unwrap();
    let sep = loss_value(&model, &[a], false, 0.1).unwrap()
        + loss_value(&model, &[b], false, 0.1).unwrap();
    assert!((both - sep).abs() < 1e-9, "{both} vs {sep}");
}

#[test]
fn asn_path_reaches_encoder_and_sorting_parameters() {
    use sortsimul_core::model::ForwardRngs;
    use sortsimul_core::rng::{self, streams};
    use sortsimul_core::Graph;
    let model = tiny_model(VOCAB, true, 5);
    let mut g = Graph::new();
    let vars = model.store.register(&mut g, true);
    let mut sorting = rng::stream(1, streams::SORTING);
    let src: &[u32] = &[2, 3, 4, 5];
    let tgt: &[u32] = &[8, 9, 6, 7];
    let out = model
        .training_loss(
            &mut g,
            &vars,
            &[(src, tgt)],
            true,
            0.0,
            ForwardRngs {
                dropout: None,
                sorting: &mut sorting,
            },
        )
        .unwrap();
    g.backward(out.loss).unwrap();
    for (k, (_, name, _)) in model.store.iter().enumerate() {
        let grad = g.grad(vars[k]);
        let touched = grad.map(|d| d.iter().any(|v| *v != 0.0)).unwrap_or(false);
        assert!(touched, "{name} gets no gradient");
    }
}
