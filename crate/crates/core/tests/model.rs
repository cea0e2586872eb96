mod common;

use mabsrec::dataset::Example;
use mabsrec::encoder::encode_sequences;
use mabsrec::fusion::{fuse_features_vec, predict_vector_vec};
use mabsrec::item_graph::{propagate, NormalizedItemGraph};
use mabsrec::model::{rec_loss, score_items, Model};
use mabsrec::numeric::{ParamSet, Tape, Tensor};
use mabsrec::trainer::{Ablation, TrainConfig};
use mabsrec::Error;
use proptest::prelude::*;
use rand::Rng;

use common::*;

fn param<'a>(params: &'a ParamSet, name: &str) -> &'a Tensor {
    &params.by_name(name).unwrap().value
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One user's logits, assembled module by module outside the batched forward.
fn composed_logits(model: &Model, graphs: &[NormalizedItemGraph; 3], params: &ParamSet, ex: &Example) -> Vec<f64> {
    let config = &model.config;
    let cfg = model.encoder_config();
    let d = config.embed_dim;
    let e = param(params, "item_emb");
    let pos = param(params, "pos_emb");
    let mut encodings = Vec::new();
    for (view, window) in ex.views.iter().enumerate() {
        if window.is_empty() {
            encodings.push(vec![0.0; d]);
            continue;
        }
        let m = propagate(e, &graphs[view], config.n_graph_layers).unwrap();
        let mut rows = Vec::new();
        for (j, &slot) in window.slots.iter().enumerate() {
            rows.extend(m.row(slot as usize).iter().zip(pos.row(j)).map(|(a, b)| a + b));
        }
        let mut tape = Tape::new();
        let vars = model.encoder.bind(&mut tape, params);
        let x = tape.constant(Tensor::matrix(window.len(), d, rows).unwrap());
        let h = encode_sequences(&mut tape, &vars, x, &[window], &cfg).unwrap();
        encodings.push(tape.value(h).row(window.len() - 1).to_vec());
    }
    let o = fuse_features_vec(&encodings[0], &encodings[1], &encodings[2], config.fusion_triple_sum).unwrap();
    let (w1, b1, w2, b2) = (
        param(params, "fusion.w_1"),
        param(params, "fusion.b_1"),
        param(params, "fusion.w_2"),
        param(params, "fusion.b_2"),
    );
    let hidden: Vec<f64> = (0..d)
        .map(|c| (b1.get(0, c) + (0..o.len()).map(|r| o[r] * w1.get(r, c)).sum::<f64>()).max(0.0))
        .collect();
    let s: Vec<f64> = (0..3)
        .map(|k| sigmoid(b2.get(0, k) + (0..d).map(|r| hidden[r] * w2.get(r, k)).sum::<f64>()))
        .collect();
    let e_pred = predict_vector_vec([s[0], s[1], s[2]], &encodings[0], &encodings[1], &encodings[2]).unwrap();
    score_items(&e_pred, e).unwrap()
}

#[test]
fn batched_forward_matches_module_composition() {
    let (data, config) = toy_data();
    let config = TrainConfig {
        n_transformer_layers: 2,
        ..config
    };
    let (model, params) = Model::new(data.n_items, data.normalized.clone(), &config).unwrap();
    let batch: Vec<&Example> = data.train.iter().chain(&data.test).step_by(3).collect();
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, &params, &batch).unwrap();
    for (row, ex) in batch.iter().enumerate() {
        let oracle = composed_logits(&model, &data.normalized, &params, ex);
        for (c, v) in oracle.iter().enumerate() {
            let got = tape.value(fwd.logits).get(row, c);
            assert!((got - v).abs() < 1e-9, "row {row} item {}: {got} vs {v}", c + 1);
        }
    }
}

#[test]
fn zero_prediction_scores_zero() {
    let e = Tensor::matrix(4, 2, vec![0.0, 0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    assert_eq!(score_items(&[0.0, 0.0], &e).unwrap(), vec![0.0; 3]);
}

#[test]
fn self_match_is_argmax_for_orthonormal_rows() {
    // padding row, then the standard basis of R^3
    let mut data = vec![0.0; 12];
    for k in 0..3 {
        data[3 * (k + 1) + k] = 1.0;
    }
    let e = Tensor::matrix(4, 3, data).unwrap();
    for k in 1..4 {
        let logits = score_items(e.row(k), &e).unwrap();
        let best = (0..3).max_by(|&a, &b| logits[a].total_cmp(&logits[b])).unwrap();
        assert_eq!(best + 1, k);
    }
}

#[test]
fn scores_match_dot_product_loop() {
    let mut r = rng(3);
    let e = random_matrix(&mut r, 13, 5);
    let pred: Vec<f64> = (0..5).map(|_| r.random_range(-1.0..1.0)).collect();
    let got = score_items(&pred, &e).unwrap();
    assert_eq!(got.len(), 12);
    for i in 1..13 {
        let mut dot = 0.0;
        for (c, p) in pred.iter().enumerate() {
            dot += p * e.get(i, c);
        }
        assert!((got[i - 1] - dot).abs() < 1e-12);
    }
}

#[test]
fn uniform_logits_give_log_vocab() {
    assert!((rec_loss(&[0.7; 4], 2).unwrap() - 4f64.ln()).abs() < 1e-15);
}

#[test]
fn saturated_target_has_vanishing_loss() {
    let mut logits = vec![0.0; 10];
    logits[3] = 30.0;
    assert!(rec_loss(&logits, 4).unwrap() < 1e-9);
}

#[test]
fn out_of_range_target_is_rejected() {
    assert!(matches!(rec_loss(&[0.0; 3], 0), Err(Error::IndexOutOfRange { .. })));
    assert!(matches!(rec_loss(&[0.0; 3], 4), Err(Error::IndexOutOfRange { .. })));
}

proptest! {
    #[test]
    fn loss_matches_log_sum_exp(logits in prop::collection::vec(-50.0f64..50.0, 1..40), pick in 0usize..40) {
        let target = pick % logits.len();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        let got = rec_loss(&logits, target as u32 + 1).unwrap();
        prop_assert!((got - (lse - logits[target])).abs() < 1e-9);
    }
}

#[test]
fn equal_views_average_to_themselves() {
    let (data, config) = toy_data();
    let config = TrainConfig {
        ablation: Ablation::WithoutBoth,
        ..config
    };
    let (model, params) = Model::new(data.n_items, data.normalized.clone(), &config).unwrap();
    // a window whose three views coincide once the graph is out of the picture
    let mut ex = data.train[0].clone();
    ex.views[1] = ex.views[0].clone();
    ex.views[2] = ex.views[0].clone();
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, &params, &[&ex]).unwrap();
    let v = tape.value(fwd.x_p).clone();
    assert!(tape.value(fwd.e_pred).max_abs_diff(&v) < 1e-15);
}

#[test]
fn graph_free_variants_never_propagate() {
    let (data, base) = toy_data();
    for ablation in Ablation::ALL {
        let config = TrainConfig {
            ablation,
            ..base.clone()
        };
        let (model, params) = Model::new(data.n_items, data.normalized.clone(), &config).unwrap();
        let batch: Vec<&Example> = data.train.iter().take(4).collect();
        model.forward(&mut Tape::training(1), &params, &batch).unwrap();
        model.forward(&mut Tape::new(), &params, &batch).unwrap();
        let expected = if ablation.uses_graph() { 6 } else { 0 };
        assert_eq!(model.propagation_count(), expected, "{ablation}");
        assert_eq!(model.fusion.is_some(), ablation.uses_fusion());
    }
}

#[test]
fn graph_embedding_scoring_changes_logits() {
    let (data, base) = toy_data();
    let batch: Vec<&Example> = data.train.iter().take(3).collect();
    let logits = |flag: bool| {
        let config = TrainConfig {
            score_against_graph_embeddings: flag,
            ..base.clone()
        };
        let (model, params) = Model::new(data.n_items, data.normalized.clone(), &config).unwrap();
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &params, &batch).unwrap();
        tape.value(fwd.logits).clone()
    };
    let (raw, graph) = (logits(false), logits(true));
    assert_eq!(raw.shape(), graph.shape());
    assert!(raw.max_abs_diff(&graph) > 0.0);
}

#[test]
fn checkpoint_shapes_are_checked() {
    let (data, config) = toy_data();
    let (model, params) = Model::new(data.n_items, data.normalized.clone(), &config).unwrap();
    model.check_params(&params).unwrap();
    let other = TrainConfig {
        embed_dim: 16,
        ..config
    };
    let (_, wrong) = Model::new(data.n_items, data.normalized.clone(), &other).unwrap();
    assert!(model.check_params(&wrong).is_err());
}
