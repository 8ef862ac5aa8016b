use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autograd::AttentionGeometry;
use crate::params::{ComponentTag, ParameterStore};
use crate::peft::{count_params, AdapterConfig, AttnTarget, CountFilter, Ia3Target};

const EOS: usize = 2;
const PAD: usize = 0;

fn text_cfg(d: usize, layers: usize) -> TextEncoderConfig {
    TextEncoderConfig {
        vocab_size: 12,
        d_model: d,
        n_heads: 2,
        n_layers: layers,
        max_seq_len: 10,
        eos_token_id: EOS,
        pad_token_id: PAD,
        unlock_positional: false,
    }
}

fn vision_cfg(image: usize, patch: usize, final_ln: bool) -> VisionEncoderConfig {
    VisionEncoderConfig {
        image_size: image,
        patch_size: patch,
        channels: 1,
        d_model: 8,
        n_heads: 2,
        n_layers: 2,
        final_layer_norm: final_ln,
    }
}

fn build_text(adapters: &AdapterConfig, seed: u64) -> (ParameterStore, TextEncoder) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    let enc = TextEncoder::build(&mut store, &mut rng, &text_cfg(8, 2), adapters).unwrap();
    (store, enc)
}

fn seq(ids: &[usize]) -> TokenSequence {
    TokenSequence::new(ids.to_vec(), EOS).unwrap()
}

fn encode(store: &ParameterStore, enc: &TextEncoder, seqs: &[TokenSequence]) -> Vec<f64> {
    let mut sess = Session::new(store);
    let v = enc.encode(&mut sess, seqs).unwrap();
    sess.graph.value(v).to_vec()
}

fn strip_adapters(enc: &TextEncoder) -> TextEncoder {
    let mut base = enc.clone();
    for b in &mut base.blocks {
        for l in [&mut b.q, &mut b.k, &mut b.v, &mut b.o] {
            l.lora = None;
            l.ia3 = None;
        }
        b.ffn_scale = None;
        b.prefix = None;
    }
    base
}

fn random_seqs(rng: &mut ChaCha8Rng, n: usize) -> Vec<TokenSequence> {
    (0..n)
        .map(|_| {
            let len = rng.random_range(1..9);
            let mut ids: Vec<usize> = (0..len).map(|_| rng.random_range(3..12)).collect();
            ids.push(EOS);
            seq(&ids)
        })
        .collect()
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

#[test]
fn lora_and_ia3_match_base_bit_exactly() {
    for adapters in [
        AdapterConfig::Lora {
            rank: 2,
            alpha: 4.0,
            targets: vec![AttnTarget::Q, AttnTarget::K, AttnTarget::V, AttnTarget::O],
        },
        AdapterConfig::ia3_default(),
    ] {
        let (store, enc) = build_text(&adapters, 3);
        let base = strip_adapters(&enc);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let seqs = random_seqs(&mut rng, 6);
        assert_eq!(bits(&encode(&store, &enc, &seqs)), bits(&encode(&store, &base, &seqs)));
    }
}

#[test]
fn pooled_vector_is_hidden_row_at_first_eos() {
    let (store, enc) = build_text(&AdapterConfig::None, 1);
    let s = seq(&[5, 7, EOS, PAD, PAD]);
    let mut sess = Session::new(&store);
    let (h, len) = enc.hidden_states(&mut sess, std::slice::from_ref(&s)).unwrap();
    assert_eq!(len, 3);
    let h = sess.graph.tensor(h);
    let pooled = enc.encode(&mut sess, &[s]).unwrap();
    assert_eq!(sess.graph.tensor(pooled).data(), h.row(2));
}

#[test]
fn pad_tail_and_batch_padding_do_not_change_embedding() {
    let (store, enc) = build_text(&AdapterConfig::lora_default(), 2);
    let a = encode(&store, &enc, &[seq(&[5, 7, EOS, PAD, PAD])]);
    let b = encode(&store, &enc, &[seq(&[5, 7, EOS, 9, 3])]);
    assert_eq!(bits(&a), bits(&b));
    let batched = encode(&store, &enc, &[seq(&[5, 7, EOS]), seq(&[4, 4, 4, 4, 4, 6, EOS])]);
    for (x, y) in a.iter().zip(&batched[..8]) {
        assert!((x - y).abs() <= 1e-12, "{x} {y}");
    }
}

#[test]
fn missing_eos_is_contract_error() {
    assert!(matches!(TokenSequence::new(vec![5, 6], EOS), Err(Error::Contract(_))));
}

#[test]
fn out_of_range_token_and_overlong_sequence_rejected() {
    let (store, enc) = build_text(&AdapterConfig::None, 1);
    let mut sess = Session::new(&store);
    assert!(matches!(enc.encode(&mut sess, &[seq(&[40, EOS])]), Err(Error::Index { .. })));
    let long: Vec<usize> = std::iter::repeat_n(5, 10).chain([EOS]).collect();
    assert!(matches!(enc.encode(&mut sess, &[seq(&long)]), Err(Error::Contract(_))));
}

#[test]
fn hidden_state_at_t_ignores_later_tokens() {
    let (store, enc) = build_text(&AdapterConfig::Prefix { length: 3 }, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let base: Vec<usize> = (0..7).map(|_| rng.random_range(3..12)).chain([EOS]).collect();
        let t = rng.random_range(0..7);
        let mut changed = base.clone();
        for id in changed.iter_mut().take(7).skip(t + 1) {
            *id = rng.random_range(3..12);
        }
        let run = |ids: &[usize]| {
            let mut sess = Session::new(&store);
            let (h, _) = enc.hidden_states(&mut sess, &[seq(ids)]).unwrap();
            sess.graph.tensor(h)
        };
        let (ha, hb) = (run(&base), run(&changed));
        for s in 0..=t {
            for (x, y) in ha.row(s).iter().zip(hb.row(s)) {
                assert!((x - y).abs() <= 1e-6);
            }
        }
    }
}

#[test]
fn permuting_tokens_changes_embedding() {
    let (store, enc) = build_text(&AdapterConfig::None, 6);
    let a = encode(&store, &enc, &[seq(&[5, 7, 9, EOS])]);
    let b = encode(&store, &enc, &[seq(&[9, 5, 7, EOS])]);
    let diff: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
    assert!(diff > 1e-4, "{diff}");
}

#[test]
fn masked_prefix_matches_base() {
    let (mut store, enc) = build_text(&AdapterConfig::Prefix { length: 2 }, 7);
    let d = 8;
    for (i, b) in enc.blocks.iter().enumerate() {
        // Constant queries of ones; prefix keys of -1e3 make every prefix score ~ -4e3.
        store.set(&b.q.base.weight, Tensor::zeros(&[d, d])).unwrap();
        store.set(b.q.base.bias.as_ref().unwrap(), Tensor::ones(&[d])).unwrap();
        let mut kv = store.tensor(b.prefix.as_ref().unwrap()).unwrap().clone();
        for p in 0..2 {
            kv.data_mut()[p * 2 * d..p * 2 * d + d].fill(-1e3);
        }
        store.set(b.prefix.as_ref().unwrap(), kv).unwrap();
        assert_eq!(b.prefix.as_deref(), Some(format!("text.layers.{i}.attn.prefix_kv").as_str()));
    }
    let base = strip_adapters(&enc);
    let seqs = random_seqs(&mut ChaCha8Rng::seed_from_u64(1), 4);
    let (a, b) = (encode(&store, &enc, &seqs), encode(&store, &base, &seqs));
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() <= 1e-9);
    }
}

#[test]
fn ia3_value_scaling_doubles_single_token_attention() {
    let (mut store, enc) = build_text(&AdapterConfig::ia3_default(), 8);
    let block = &enc.blocks[0];
    let geom = AttentionGeometry {
        batch: 1,
        seq: 1,
        heads: 2,
        causal: true,
        key_valid: None,
    };
    let x = Tensor::new(vec![1, 8], (0..8).map(|i| i as f32 * 0.3 - 1.0).collect()).unwrap();
    let run = |store: &ParameterStore| {
        let mut sess = Session::new(store);
        let xv = sess.graph.constant(&x);
        let y = block.attend(&mut sess, xv, &geom).unwrap();
        sess.graph.value(y).to_vec()
    };
    let one = run(&store);
    store.set(block.v.ia3.as_ref().unwrap(), Tensor::full(&[8], 2.0)).unwrap();
    let two = run(&store);
    for (a, b) in one.iter().zip(&two) {
        assert!((2.0 * a - b).abs() <= 1e-12);
    }
}

#[test]
fn ia3_zero_ffn_scale_removes_ffn() {
    let (mut store, enc) = build_text(&AdapterConfig::ia3_default(), 8);
    let block = &enc.blocks[1];
    store.set(block.ffn_scale.as_ref().unwrap(), Tensor::zeros(&[32])).unwrap();
    let mut sess = Session::new(&store);
    let x = sess.graph.constant(&Tensor::full(&[3, 8], 0.7));
    let f = block.feed_forward(&mut sess, x).unwrap();
    assert!(sess.graph.value(f).iter().all(|&v| v == 0.0));
}

#[test]
fn closed_form_adapter_counts() {
    let count = |adapters: AdapterConfig, cfg: TextEncoderConfig| {
        let mut store = ParameterStore::new();
        TextEncoder::build(&mut store, &mut ChaCha8Rng::seed_from_u64(0), &cfg, &adapters).unwrap();
        count_params(&store, CountFilter::All).tag(ComponentTag::Adapter)
    };
    let lora = AdapterConfig::Lora {
        rank: 4,
        alpha: 8.0,
        targets: vec![AttnTarget::Q, AttnTarget::V],
    };
    assert_eq!(count(lora, text_cfg(32, 2)), 2 * 2 * (4 * 32 + 32 * 4));
    assert_eq!(count(AdapterConfig::ia3_default(), text_cfg(32, 2)), 2 * (32 + 32 + 128));
    assert_eq!(count(AdapterConfig::Prefix { length: 4 }, text_cfg(8, 2)), 2 * 4 * 2 * 8);
    assert_eq!(count(AdapterConfig::None, text_cfg(8, 2)), 0);
}

#[test]
fn text_config_validation() {
    let mut c = text_cfg(8, 2);
    c.n_heads = 3;
    assert!(c.validate().is_err());
    let mut c = text_cfg(8, 2);
    c.pad_token_id = EOS;
    assert!(c.validate().is_err());
    let mut c = text_cfg(8, 2);
    c.eos_token_id = 12;
    assert!(c.validate().is_err());
}

fn vision(cfg: &VisionEncoderConfig, seed: u64) -> (ParameterStore, VisionEncoder) {
    let mut store = ParameterStore::new();
    let enc = VisionEncoder::build(&mut store, &mut ChaCha8Rng::seed_from_u64(seed), cfg).unwrap();
    (store, enc)
}

fn random_image(rng: &mut ChaCha8Rng, s: usize) -> Tensor {
    Tensor::new(vec![s, s, 1], (0..s * s).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn patchify_layout() {
    let cfg = vision_cfg(4, 2, false);
    let img = Tensor::new(vec![4, 4, 1], (0..16).map(|i| i as f32).collect()).unwrap();
    let p = patchify(&img, &cfg).unwrap();
    assert_eq!(p.shape(), &[4, 4]);
    assert_eq!(p.row(0), &[0.0, 1.0, 4.0, 5.0]);
    assert_eq!(p.row(1), &[2.0, 3.0, 6.0, 7.0]);
    assert_eq!(p.row(3), &[10.0, 11.0, 14.0, 15.0]);
}

#[test]
fn constant_image_with_zero_positions_gives_identical_tokens() {
    let cfg = vision_cfg(8, 2, false);
    let (mut store, enc) = vision(&cfg, 1);
    store.set(VisionEncoder::POSITION_EMBEDDING, Tensor::zeros(&[16, 8])).unwrap();
    let img = Tensor::full(&[8, 8, 1], 0.4);
    let mut sess = Session::new(&store);
    let tokens = enc.tokens(&mut sess, std::slice::from_ref(&img)).unwrap();
    let tokens = sess.graph.tensor(tokens);
    let pooled = enc.encode(&mut sess, &[img]).unwrap();
    let pooled = sess.graph.tensor(pooled);
    for r in 0..16 {
        for (a, b) in tokens.row(r).iter().zip(pooled.data()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }
}

#[test]
fn single_patch_pooling_is_identity() {
    let cfg = vision_cfg(4, 4, false);
    let (store, enc) = vision(&cfg, 2);
    let img = random_image(&mut ChaCha8Rng::seed_from_u64(0), 4);
    let mut sess = Session::new(&store);
    let t = enc.tokens(&mut sess, std::slice::from_ref(&img)).unwrap();
    let p = enc.encode(&mut sess, &[img]).unwrap();
    assert_eq!(sess.graph.value(t), sess.graph.value(p));
}

#[test]
fn final_layer_norm_toggle_changes_output() {
    let img = random_image(&mut ChaCha8Rng::seed_from_u64(0), 8);
    let run = |final_ln| {
        let (store, enc) = vision(&vision_cfg(8, 2, final_ln), 3);
        let mut sess = Session::new(&store);
        let v = enc.encode(&mut sess, std::slice::from_ref(&img)).unwrap();
        sess.graph.value(v).to_vec()
    };
    let (a, b) = (run(false), run(true));
    assert!(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() > 1e-3);
}

#[test]
fn patch_shuffle_invariance_without_positions() {
    let cfg = vision_cfg(8, 4, false);
    let (mut store, enc) = vision(&cfg, 4);
    store.set(VisionEncoder::POSITION_EMBEDDING, Tensor::zeros(&[4, 8])).unwrap();
    let img = random_image(&mut ChaCha8Rng::seed_from_u64(1), 8);
    // Swap the top-left and bottom-right 4x4 patches.
    let mut swapped = img.clone();
    for y in 0..4 {
        for x in 0..4 {
            let (a, b) = (y * 8 + x, (y + 4) * 8 + x + 4);
            swapped.data_mut().swap(a, b);
        }
    }
    let run = |img: &Tensor| {
        let mut sess = Session::new(&store);
        let v = enc.encode(&mut sess, std::slice::from_ref(img)).unwrap();
        sess.graph.value(v).to_vec()
    };
    for (a, b) in run(&img).iter().zip(&run(&swapped)) {
        assert!((a - b).abs() <= 1e-6);
    }
}

#[test]
fn wrong_image_size_is_dimension_error() {
    let (store, enc) = vision(&vision_cfg(8, 2, false), 0);
    let mut sess = Session::new(&store);
    let img = Tensor::zeros(&[6, 6, 1]);
    assert!(matches!(enc.encode(&mut sess, &[img]), Err(Error::Dimension { .. })));
    assert!(vision_cfg(8, 3, false).validate().is_err());
}

#[test]
fn projection_examples() {
    let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let e = project(&Tensor::new(vec![2], vec![3.0, 4.0]).unwrap(), &eye, true).unwrap();
    assert!((e.vector[0] - 0.6).abs() < 1e-7 && (e.vector[1] - 0.8).abs() < 1e-7);
    assert!(e.l2_normalized);
    let z = project(&Tensor::zeros(&[2]), &eye, true).unwrap();
    assert_eq!(z.vector, vec![0.0, 0.0]);
    assert!(!z.l2_normalized);
    assert!(project(&Tensor::zeros(&[3]), &eye, true).is_err());
}

proptest::proptest! {
    #[test]
    fn projection_is_unit_norm(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = Tensor::new(vec![6], (0..6).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
        let w = Tensor::new(vec![6, 4], (0..24).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let e = project(&h, &w, true).unwrap();
        proptest::prop_assert!((e.norm() - 1.0).abs() <= 1e-5);
    }
}

#[test]
fn ia3_query_target_needs_flag() {
    let adapters = AdapterConfig::Ia3 {
        targets: vec![Ia3Target::Q],
        allow_query: false,
    };
    let mut store = ParameterStore::new();
    let r = TextEncoder::build(&mut store, &mut ChaCha8Rng::seed_from_u64(0), &text_cfg(8, 1), &adapters);
    assert!(matches!(r, Err(Error::Config(_))));
}
