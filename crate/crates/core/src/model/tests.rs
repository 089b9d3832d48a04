use super::*;
use crate::data::EOS;

fn cfg(variant: Variant) -> ModelConfig {
    let mut c = ModelConfig {
        layers: 2,
        d_model: 8,
        heads: 2,
        d_ff: 16,
        vocab_size: 12,
        d_raw: 4,
        max_transcript_len: 8,
        max_visual_len: 6,
        max_summary_len: 6,
        bvla_layers: [2].into(),
        sdm_layers: [2].into(),
        variant,
    };
    c = c.with_variant(variant);
    c
}

fn video(rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

const TRANSCRIPT: [TokenId; 5] = [4, 7, 5, 9, 11];

fn encode_values(model: &FusionModel, transcript: &[TokenId], v: Option<&Tensor>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut g = Graph::new();
    let p = model.bind(&mut g, false);
    let enc = model.forward(&p).encode(&mut g, transcript, v).unwrap();
    let per_layer = enc.visual_per_layer.iter().map(|&v| g.value(v).to_vec()).collect();
    (g.value(enc.text_final).to_vec(), per_layer)
}

#[test]
fn parameter_count_is_fixed_by_dimensions() {
    let (d, f, v, r, cap, l) = (8usize, 16usize, 12usize, 4usize, 8usize, 2usize);
    let attn = 4 * d * d;
    let norm = 2 * d;
    let ffn = d * f + f + f * d + d;
    let enc_layer = attn + norm + ffn + norm + attn + d * d + norm;
    let dec_layer = attn + norm + attn + norm + ffn + norm;
    let positions = cap + 6 + 6;
    let expected = v * d + positions * d + r * d + 2 * l * enc_layer + l * dec_layer + d * v + v + d * d;
    for variant in Variant::ALL {
        let m = FusionModel::new(cfg(variant), 1).unwrap();
        assert_eq!(m.params().count(), expected, "{variant}");
    }
}

#[test]
fn same_seed_same_weights_across_variants() {
    let a = FusionModel::new(cfg(Variant::TextOnly), 3).unwrap();
    let b = FusionModel::new(cfg(Variant::SwrFromSummary), 3).unwrap();
    assert_eq!(a.params(), b.params());
    let c = FusionModel::new(cfg(Variant::TextOnly), 4).unwrap();
    assert_ne!(a.params(), c.params());
}

#[test]
fn project_visual_cases() {
    let model = FusionModel::new(cfg(Variant::DirectZv), 0).unwrap();
    let mut g = Graph::new();
    let p = model.bind(&mut g, false);
    let fwd = model.forward(&p);

    let zero = g.constant(&Tensor::zeros(vec![3, 4]));
    let out = fwd.project_visual(&mut g, zero).unwrap();
    assert_eq!(g.shape(out), &[3, 8]);
    assert!(g.value(out).iter().all(|&x| x == 0.0));

    // A one-hot row picks out the matching row of the projection.
    let w = model.params().get(model.layout().visual_projection);
    let mut raw = Tensor::zeros(vec![1, 4]);
    raw.data_mut()[2] = 1.0;
    let r = g.constant(&raw);
    let out = fwd.project_visual(&mut g, r).unwrap();
    assert_eq!(g.value(out), w.row(2));

    let raw = video(2, 4);
    let r = g.constant(&raw);
    let out = fwd.project_visual(&mut g, r).unwrap();
    for i in 0..2 {
        for j in 0..8 {
            let expected: f64 = (0..4).map(|k| raw.at(i, k) * w.at(k, j)).sum();
            assert!((g.value(out)[i * 8 + j] - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn injection_of_zero_cross_is_plain_norm() {
    let model = FusionModel::new(cfg(Variant::AuxEncoder), 0).unwrap();
    let mut g = Graph::new();
    let p = model.bind(&mut g, false);
    let fwd = model.forward(&p);
    let z = g.constant(&video(3, 8));
    let zero = g.constant(&Tensor::zeros(vec![3, 8]));
    let ids = model.layout().text[0].inject;
    let injected = fwd.inject(&mut g, z, zero, &ids).unwrap();
    let ln = g
        .layer_norm(z, fwd.var(ids.ln.gamma), fwd.var(ids.ln.beta), LN_EPS)
        .unwrap();
    assert_eq!(g.value(injected), g.value(ln));
}

#[test]
fn bvla_shapes_and_degenerate_cases() {
    let model = FusionModel::new(cfg(Variant::SwrFromTranscript), 0).unwrap();
    let mut g = Graph::new();
    let p = model.bind(&mut g, false);
    let fwd = model.forward(&p);
    let zt = g.constant(&video(5, 8));
    let zv = g.constant(&video(3, 8));
    let (to_v, to_t) = fwd.bvla(&mut g, 1, zt, zv).unwrap();
    assert_eq!(g.shape(to_v.output), &[3, 8]);
    assert_eq!(g.shape(to_t.output), &[5, 8]);

    // Zero text values give a zero text-to-visual message (no biases).
    let zeros = g.constant(&Tensor::zeros(vec![5, 8]));
    let (to_v, _) = fwd.bvla(&mut g, 1, zeros, zv).unwrap();
    assert!(g.value(to_v.output).iter().all(|&x| x == 0.0));

    // A single text token receives all of every visual row's attention.
    let one = g.constant(&video(1, 8));
    let (to_v, _) = fwd.bvla(&mut g, 1, one, zv).unwrap();
    for &w in &to_v.weights {
        assert!(g.value(w).iter().all(|&x| x == 1.0));
    }
}

#[test]
fn disabled_bvla_and_sdm_reduce_to_aux_encoder() {
    let aux = FusionModel::new(cfg(Variant::AuxEncoder), 5).unwrap();
    let mut c = cfg(Variant::SwrFromSummary);
    c.bvla_layers.clear();
    c.sdm_layers.clear();
    let swr = FusionModel::new(c, 5).unwrap();
    let v = video(4, 4);
    assert_eq!(encode_values(&aux, &TRANSCRIPT, Some(&v)), encode_values(&swr, &TRANSCRIPT, Some(&v)));
    assert_eq!(aux.generate(&TRANSCRIPT, Some(&v)).unwrap(), swr.generate(&TRANSCRIPT, Some(&v)).unwrap());
}

#[test]
fn layers_below_bvla_match_aux_encoder() {
    let aux = FusionModel::new(cfg(Variant::AuxEncoder), 2).unwrap();
    let swr = FusionModel::new(cfg(Variant::SwrFromTranscript), 2).unwrap();
    let v = video(4, 4);
    let (_, a) = encode_values(&aux, &TRANSCRIPT, Some(&v));
    let (_, b) = encode_values(&swr, &TRANSCRIPT, Some(&v));
    assert_eq!(a[0], b[0]);
    assert_ne!(a[1], b[1]);
}

#[test]
fn direct_variant_reuses_projected_features() {
    let m = FusionModel::new(cfg(Variant::DirectZv), 0).unwrap();
    let (_, per_layer) = encode_values(&m, &TRANSCRIPT, Some(&video(3, 4)));
    assert_eq!(per_layer.len(), 2);
    assert_eq!(per_layer[0], per_layer[1]);
}

#[test]
fn text_only_matches_reference_encoder() {
    let m = FusionModel::new(cfg(Variant::TextOnly), 9).unwrap();
    let (ours, visual) = encode_values(&m, &TRANSCRIPT, None);
    assert!(visual.is_empty());

    // Same kernels, composed by hand.
    let mut g = Graph::new();
    let p = m.bind(&mut g, false);
    let fwd = m.forward(&p);
    let lay = m.layout();
    let ids: Vec<usize> = TRANSCRIPT.iter().map(|&t| t as usize).collect();
    let tok = g.gather_rows(p[lay.token_embedding.index()], &ids).unwrap();
    let pos = g.gather_rows(p[lay.text_positions.index()], &[0, 1, 2, 3, 4]).unwrap();
    let mut z = g.add(tok, pos).unwrap();
    for l in &lay.text {
        z = fwd.encoder_block(&mut g, z, &l.block).unwrap();
    }
    assert_eq!(g.value(z), ours.as_slice());

    // Video is ignored entirely.
    let (with_video, _) = encode_values(&m, &TRANSCRIPT, Some(&video(3, 4)));
    assert_eq!(with_video, ours);
}

#[test]
fn visual_variants_require_video() {
    let m = FusionModel::new(cfg(Variant::AuxEncoder), 0).unwrap();
    let mut g = Graph::new();
    let p = m.bind(&mut g, false);
    assert!(matches!(
        m.forward(&p).encode(&mut g, &TRANSCRIPT, None),
        Err(Error::Data(_))
    ));
    assert!(matches!(
        m.forward(&p).encode(&mut g, &[], Some(&video(2, 4))),
        Err(Error::EmptySequence(_))
    ));
    assert!(matches!(
        m.forward(&p).encode(&mut g, &TRANSCRIPT, Some(&video(2, 3))),
        Err(Error::Shape { .. })
    ));
}

#[test]
fn over_length_inputs_are_truncated_with_warnings() {
    let m = FusionModel::new(cfg(Variant::SwrFromSummary), 0).unwrap();
    let long: Vec<TokenId> = (0..20).map(|i| 4 + i % 8).collect();
    let mut g = Graph::new();
    let p = m.bind(&mut g, false);
    let enc = m.forward(&p).encode(&mut g, &long, Some(&video(9, 4))).unwrap();
    assert_eq!(enc.warnings.len(), 2);
    assert_eq!(g.shape(enc.text_final), &[8, 8]);
    assert_eq!(g.shape(enc.visual_per_layer[0]), &[6, 8]);
    assert_eq!(
        encode_values(&m, &long, Some(&video(9, 4))).0,
        encode_values(&m, &long[..8], Some(&video(9, 4).truncate_rows(6))).0
    );
}

#[test]
fn diagnostics_mark_bvla_layers() {
    let m = FusionModel::new(cfg(Variant::SwrFromTranscript), 0).unwrap();
    let mut g = Graph::new();
    let p = m.bind(&mut g, false);
    let enc = m.forward(&p).encode(&mut g, &TRANSCRIPT, Some(&video(3, 4))).unwrap();
    let flags: Vec<bool> = enc.diagnostics.iter().map(|d| d.bvla).collect();
    assert_eq!(flags, [false, true]);
    assert!(enc.diagnostics[0].t2v_entropy.is_none());
    let h = enc.diagnostics[1].t2v_entropy.unwrap();
    assert!(h >= 0.0 && h <= (5f64).ln() + 1e-12);
}

#[test]
fn decoder_is_causal() {
    let m = FusionModel::new(cfg(Variant::TextOnly), 0).unwrap();
    let run = |inputs: &[TokenId]| {
        let mut g = Graph::new();
        let p = m.bind(&mut g, false);
        let fwd = m.forward(&p);
        let enc = fwd.encode(&mut g, &TRANSCRIPT, None).unwrap();
        let dec = fwd.decode_teacher_forced(&mut g, enc.text_final, inputs).unwrap();
        g.value(dec.logits).to_vec()
    };
    let a = run(&[BOS, 5, 6, 7]);
    let b = run(&[BOS, 5, 9, 10]);
    let v = 12;
    assert_eq!(a[..2 * v], b[..2 * v]);
    assert_ne!(a[2 * v..3 * v], b[2 * v..3 * v]);
}

#[test]
fn single_token_pool_is_the_hidden_state() {
    let m = FusionModel::new(cfg(Variant::TextOnly), 0).unwrap();
    let mut g = Graph::new();
    let p = m.bind(&mut g, false);
    let fwd = m.forward(&p);
    let enc = fwd.encode(&mut g, &TRANSCRIPT, None).unwrap();
    let dec = fwd.decode_teacher_forced(&mut g, enc.text_final, &[BOS]).unwrap();
    assert_eq!(g.value(dec.pooled), g.value(dec.hidden));
    assert!(fwd.decode_teacher_forced(&mut g, enc.text_final, &[5]).is_err());
    assert!(fwd.decode_teacher_forced(&mut g, enc.text_final, &[BOS; 7]).is_err());
}

#[test]
fn generation_stops_at_eos_or_cap() {
    let mut m = FusionModel::new(cfg(Variant::TextOnly), 0).unwrap();
    let out = m.generate(&TRANSCRIPT, None).unwrap();
    assert!(out.len() <= 6);
    assert!(!out.contains(&EOS));

    // A head biased hard towards EOS ends generation immediately.
    let bias = m.layout().head_bias;
    m.params_mut().get_mut(bias).data_mut()[EOS as usize] = 1e3;
    assert!(m.generate(&TRANSCRIPT, None).unwrap().is_empty());

    // Biased towards a content token, the output fills to the cap.
    let b = m.params_mut().get_mut(bias).data_mut();
    b[EOS as usize] = 0.0;
    b[7] = 1e3;
    assert_eq!(m.generate(&TRANSCRIPT, None).unwrap(), vec![7; 6]);
}

#[test]
fn config_validation() {
    let mut c = cfg(Variant::SwrFromSummary);
    c.heads = 3;
    assert!(matches!(FusionModel::new(c, 0), Err(Error::Config(_))));
    let mut c = cfg(Variant::AuxEncoder);
    c.sdm_layers = [1].into();
    assert!(matches!(FusionModel::new(c, 0), Err(Error::Config(_))));
    let mut c = cfg(Variant::SwrFromSummary);
    c.bvla_layers = [3].into();
    assert!(matches!(FusionModel::new(c, 0), Err(Error::Config(_))));
}
