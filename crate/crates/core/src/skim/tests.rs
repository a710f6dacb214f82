use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::layers::{lstm_sequence, Direction, LstmInit, LstmState};
use crate::numerics::{finite_difference_gradient, Tensor};
use crate::testutil::assert_close;

use super::stream::InferModel;
use super::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_matrix(rng: &mut ChaCha8Rng, t: usize, n: usize) -> Tensor {
    let data: Vec<f64> = (0..t * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(&[t, n], data).unwrap()
}

fn random_signal(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-0.5..0.5)).collect()
}

#[test]
fn segment_counts_and_padding() {
    let mut r = rng(1);
    for (t, k, want_s, want_pad) in [(7, 3, 3, 2), (6, 3, 2, 0), (2, 150, 1, 148)] {
        let w = random_matrix(&mut r, t, 4);
        let batch = segment(&w, k).unwrap();
        assert_eq!(batch.segments.len(), want_s, "T={t} K={k}");
        assert_eq!(batch.pad_len, want_pad, "T={t} K={k}");
        for seg in &batch.segments {
            assert_eq!(seg.shape(), &[k, 4]);
        }
        // Pad region is exactly zero.
        let last = batch.segments.last().unwrap().to_vec();
        for &v in &last[(k - want_pad) * 4..] {
            assert_eq!(v, 0.0);
        }
    }
}

#[test]
fn merge_segment_round_trip() {
    let mut r = rng(2);
    for (t, k) in [(7, 3), (6, 3), (1, 5), (150, 150), (151, 150)] {
        let w = random_matrix(&mut r, t, 4);
        let batch = segment(&w, k).unwrap();
        let back = merge(&batch, t).unwrap();
        assert_eq!(back.to_vec(), w.to_vec(), "T={t} K={k}");
    }
}

#[test]
fn merge_rejects_inconsistent_length() {
    let mut r = rng(3);
    let w = random_matrix(&mut r, 7, 4);
    let batch = segment(&w, 3).unwrap();
    assert!(merge(&batch, 8).is_err());
}

#[test]
fn mem_update_identity_and_none() {
    let mut r = rng(4);
    let c = random_matrix(&mut r, 3, 5);
    let h = random_matrix(&mut r, 3, 5);
    let (ci, hi) = mem_lstm_update(&c, &h, MemMode::Identity, None, None).unwrap();
    assert_eq!(ci.to_vec(), c.to_vec());
    assert_eq!(hi.to_vec(), h.to_vec());
    let (cz, hz) = mem_lstm_update(&c, &h, MemMode::None, None, None).unwrap();
    assert!(cz.to_vec().iter().all(|&v| v == 0.0));
    assert!(hz.to_vec().iter().all(|&v| v == 0.0));
}

#[test]
fn mem_update_single_segment_matches_hand_trace() {
    // One segment, causal: the Mem-LSTM takes a single step from zero state.
    let mut r = rng(5);
    let h = 4;
    let cfg = SkimConfig {
        hidden_dim: h,
        ..SkimConfig::tiny(true)
    };
    let path = MemPath::init(&cfg, &mut r);
    let c = random_matrix(&mut r, 1, h);
    let hs = random_matrix(&mut r, 1, h);
    let (c_hat, _) =
        mem_lstm_update(&c, &hs, MemMode::CellOnly, Some(&path), None).unwrap();

    let (_, step) =
        crate::layers::lstm_step(&c.row(0).unwrap(), &LstmState::zeros(h), &path.lstm.fwd)
            .unwrap();
    let want = path
        .ln
        .apply(&step.h.reshape(&[1, h]).unwrap())
        .unwrap()
        .add(&c)
        .unwrap();
    assert_close(&c_hat.to_vec(), &want.to_vec(), 1e-12, "single-step mem");
}

#[test]
fn single_block_causal_long_segment_is_plain_lstm() {
    // L=1, no memory, K >= T: one segment, zero init — the whole forward
    // pass collapses to LN(LSTM(W)) + W.
    let mut r = rng(6);
    let cfg = SkimConfig {
        num_blocks: 1,
        hidden_dim: 6,
        feature_dim: 5,
        segment_len: 64,
        causal: true,
        mem_mode: MemMode::None,
        output_channels: 2,
        encoder: crate::layers::EncoderConfig::new(4, 5),
    };
    let model = SkimModel::init(cfg, &mut r).unwrap();
    let w = random_matrix(&mut r, 13, 5);
    let got = model.forward(&w).unwrap();

    let block = &model.blocks[0];
    let (raw, _) = lstm_sequence(&w, &LstmInit::zeros(&block.seg), &block.seg).unwrap();
    let projected = block.proj.as_ref().unwrap().apply(&raw).unwrap();
    let want = block.ln.apply(&projected).unwrap().add(&w).unwrap();
    assert_close(&got.to_vec(), &want.to_vec(), 1e-12, "plain LSTM oracle");
}

#[test]
fn single_block_noncausal_is_per_segment_bilstm() {
    let mut r = rng(7);
    let cfg = SkimConfig {
        num_blocks: 1,
        hidden_dim: 4,
        feature_dim: 4,
        segment_len: 5,
        causal: false,
        mem_mode: MemMode::None,
        output_channels: 2,
        encoder: crate::layers::EncoderConfig::new(4, 4),
    };
    let model = SkimModel::init(cfg, &mut r).unwrap();
    let w = random_matrix(&mut r, 15, 4);
    let got = model.forward(&w).unwrap();

    let block = &model.blocks[0];
    assert_eq!(block.seg.direction, Direction::Bidirectional);
    let mut rows = Vec::new();
    for s in 0..3 {
        let seg = w.slice_rows(s * 5, (s + 1) * 5).unwrap();
        let (raw, _) = lstm_sequence(&seg, &LstmInit::zeros(&block.seg), &block.seg).unwrap();
        let projected = block.proj.as_ref().unwrap().apply(&raw).unwrap();
        rows.push(block.ln.apply(&projected).unwrap().add(&seg).unwrap());
    }
    let want = Tensor::concat(&rows, 0).unwrap();
    assert_close(&got.to_vec(), &want.to_vec(), 1e-12, "per-segment oracle");
}

#[test]
fn causal_forward_ignores_future_frames() {
    let mut r = rng(8);
    for mode in MemMode::ALL {
        let cfg = SkimConfig {
            mem_mode: mode,
            segment_len: 4,
            ..SkimConfig::tiny(true)
        };
        let model = SkimModel::init(cfg, &mut r).unwrap();
        let w = random_matrix(&mut r, 18, 16);
        let t0 = 11;
        let mut noisy = w.to_vec();
        for v in noisy[t0 * 16..].iter_mut() {
            *v += r.gen_range(-2.0..2.0);
        }
        let a = model.forward(&w).unwrap().to_vec();
        let b = model
            .forward(&Tensor::from_vec(&[18, 16], noisy).unwrap())
            .unwrap()
            .to_vec();
        assert_eq!(&a[..t0 * 16], &b[..t0 * 16], "mode {}", mode.label());
    }
}

#[test]
fn separate_shapes_and_zero_model() {
    let mut r = rng(9);
    let cfg = SkimConfig::tiny(true);
    let model = SkimModel::init(cfg, &mut r).unwrap();
    let len = 167;
    let mix = Tensor::from_vec(&[len], random_signal(&mut r, len)).unwrap();
    let outs = model.separate(&mix).unwrap();
    assert_eq!(outs.len(), 2);
    for o in &outs {
        assert_eq!(o.shape(), &[len]);
    }

    for (_, p) in model.named_params() {
        p.set_data(&vec![0.0; p.numel()]).unwrap();
    }
    for o in model.separate(&mix).unwrap() {
        assert!(o.to_vec().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn separate_rejects_short_input() {
    let mut r = rng(10);
    let model = SkimModel::init(SkimConfig::tiny(true), &mut r).unwrap();
    let mix = Tensor::from_vec(&[5], vec![0.1; 5]).unwrap();
    assert!(model.separate(&mix).is_err());
}

#[test]
fn pipeline_gradient_matches_finite_differences() {
    let mut r = rng(11);
    let cfg = SkimConfig {
        num_blocks: 1,
        hidden_dim: 4,
        feature_dim: 4,
        segment_len: 3,
        causal: true,
        mem_mode: MemMode::HiddenCell,
        output_channels: 2,
        encoder: crate::layers::EncoderConfig::new(2, 4),
    };
    let model = SkimModel::init(cfg, &mut r).unwrap();
    let sig = random_signal(&mut r, 22);
    let loss_of = |m: &SkimModel| {
        let mix = Tensor::from_vec(&[22], sig.clone()).unwrap();
        let outs = m.separate(&mix).unwrap();
        let mut total = outs[0].square().unwrap().sum().unwrap();
        total = total.add(&outs[1].square().unwrap().sum().unwrap()).unwrap();
        total
    };
    let loss = loss_of(&model);
    loss.backward().unwrap();
    let got = model.encoder.weight.grad().unwrap();

    let base = model.encoder.weight.to_vec();
    let fd = finite_difference_gradient(
        |w| {
            model.encoder.weight.set_data(&w.to_vec())?;
            Ok(loss_of(&model))
        },
        &Tensor::from_vec(model.encoder.weight.shape(), base.clone()).unwrap(),
        1e-5,
    )
    .unwrap();
    model.encoder.weight.set_data(&base).unwrap();
    assert_close(&got, &fd, 1e-5, "pipeline encoder gradient");
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut r = rng(12);
    let model = SkimModel::init(SkimConfig::tiny(true), &mut r).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    model.save(&path).unwrap();
    let loaded = SkimModel::load(&path).unwrap();
    assert_eq!(loaded.cfg, model.cfg);
    let mix = Tensor::from_vec(&[201], random_signal(&mut r, 201)).unwrap();
    let a = model.separate(&mix).unwrap();
    let b = loaded.separate(&mix).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.to_vec(), y.to_vec());
    }
}

#[test]
fn checkpoint_rejects_corruption() {
    let mut r = rng(13);
    let model = SkimModel::init(SkimConfig::tiny(true), &mut r).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    model.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(SkimModel::load(&path).is_err());
}

#[test]
fn infer_model_matches_tape_pipeline() {
    let mut r = rng(14);
    for mode in MemMode::ALL {
        let cfg = SkimConfig {
            mem_mode: mode,
            segment_len: 5,
            ..SkimConfig::tiny(true)
        };
        let model = SkimModel::init(cfg, &mut r).unwrap();
        let sig = random_signal(&mut r, 307);
        let mix = Tensor::from_vec(&[307], sig.clone()).unwrap();
        let tape: Vec<Vec<f64>> = model
            .separate(&mix)
            .unwrap()
            .iter()
            .map(|t| t.to_vec())
            .collect();
        let infer = InferModel::<f64>::from_model(&model).unwrap();
        let fast = infer.separate(&sig).unwrap();
        for (a, b) in tape.iter().zip(&fast) {
            assert_close(a, b, 1e-12, &format!("infer vs tape, mode {}", mode.label()));
        }
    }
}

#[test]
fn streaming_equals_batch_inference() {
    let mut r = rng(15);
    for mode in MemMode::ALL {
        let cfg = SkimConfig {
            mem_mode: mode,
            segment_len: 4,
            ..SkimConfig::tiny(true)
        };
        let model = SkimModel::init(cfg, &mut r).unwrap();
        let infer = InferModel::<f32>::from_model(&model).unwrap();
        let sig: Vec<f32> = random_signal(&mut r, 253).iter().map(|&v| v as f32).collect();
        let batch = infer.separate(&sig).unwrap();

        let mut stream = infer.stream();
        let mut got = vec![Vec::new(); 2];
        let mut pos = 0;
        while pos < sig.len() {
            let chunk = r.gen_range(1..40).min(sig.len() - pos);
            let emitted = stream.push(&sig[pos..pos + chunk]).unwrap();
            for (q, e) in emitted.iter().enumerate() {
                got[q].extend_from_slice(e);
            }
            pos += chunk;
        }
        let tail = stream.finalize().unwrap();
        for (q, e) in tail.iter().enumerate() {
            got[q].extend_from_slice(e);
        }
        for (a, b) in batch.iter().zip(&got) {
            assert_eq!(a.len(), b.len(), "mode {}", mode.label());
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x, y, "mode {}", mode.label());
            }
        }
    }
}

#[test]
fn stream_under_one_frame_emits_nothing() {
    let mut r = rng(16);
    let model = SkimModel::init(SkimConfig::tiny(true), &mut r).unwrap();
    let infer = InferModel::<f32>::from_model(&model).unwrap();
    let mut stream = infer.stream();
    let kernel = infer.kernel_size;
    let out = stream.push(&vec![0.25; kernel - 1]).unwrap();
    assert!(out.iter().all(|ch| ch.is_empty()));
    let tail = stream.finalize().unwrap();
    assert!(tail.iter().all(|ch| ch.len() == kernel - 1));
}

#[test]
fn stream_requires_causal_model() {
    let mut r = rng(17);
    let model = SkimModel::init(SkimConfig::tiny(false), &mut r).unwrap();
    assert!(matches!(
        InferModel::<f32>::from_model(&model),
        Err(SkimError::StreamingNeedsCausal)
    ));
}

#[test]
fn config_serde_round_trip() {
    for mode in MemMode::ALL {
        let cfg = SkimConfig {
            mem_mode: mode,
            ..SkimConfig::paper(10, true)
        };
        let json = serde_json::to_string(&cfg).unwrap();
        let back: SkimConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
    }
    assert!(serde_json::to_string(&MemMode::HiddenCell).unwrap().contains("hc"));
}

#[test]
fn param_count_none_equals_id_and_causal_smaller() {
    let count = |cfg: SkimConfig| {
        crate::layers::total_params(&SkimModel::init(cfg, &mut rng(99)).unwrap().named_params())
    };
    let base = SkimConfig::tiny(true);
    let none = count(SkimConfig {
        mem_mode: MemMode::None,
        ..base
    });
    let id = count(SkimConfig {
        mem_mode: MemMode::Identity,
        ..base
    });
    let hc = count(SkimConfig {
        mem_mode: MemMode::HiddenCell,
        ..base
    });
    assert_eq!(none, id);
    assert!(hc > none);

    let causal = count(SkimConfig::tiny(true));
    let noncausal = count(SkimConfig::tiny(false));
    assert!(causal < noncausal);
}

#[test]
fn noncausal_none_segments_are_exchangeable() {
    // With no cross-segment memory, permuting input segments permutes the
    // outputs identically.
    let mut r = rng(19);
    let cfg = SkimConfig {
        mem_mode: MemMode::None,
        segment_len: 5,
        ..SkimConfig::tiny(false)
    };
    let model = SkimModel::init(cfg, &mut r).unwrap();
    let n = 16;
    let w = random_matrix(&mut r, 15, n);
    let out = model.forward(&w).unwrap().to_vec();

    let data = w.to_vec();
    let mut swapped = Vec::new();
    swapped.extend_from_slice(&data[5 * n..10 * n]);
    swapped.extend_from_slice(&data[..5 * n]);
    swapped.extend_from_slice(&data[10 * n..]);
    let out_sw = model
        .forward(&Tensor::from_vec(&[15, n], swapped).unwrap())
        .unwrap()
        .to_vec();
    assert_eq!(&out_sw[..5 * n], &out[5 * n..10 * n]);
    assert_eq!(&out_sw[5 * n..10 * n], &out[..5 * n]);
    assert_eq!(&out_sw[10 * n..], &out[10 * n..]);
}
