//! Property tests for the structural invariants.

mod common;

use lateral::adapters::{
    causal_conv2d, routed_apply_ordered, Adapter, AdapterDims, Linear, RoutedAdapterSet, Routing,
};
use lateral::decode::{generate, GenerationConfig};
use lateral::leafpipe::heuristics::grid_distance;
use lateral::leafpipe::{Outcome, Pipeline, PipelineConfig, RawInstance};
use lateral::model::VlgModel;
use lateral::params::VisitParams;
use lateral::seqcore::{
    deserialize_instance, serialize_instance, AdapterVariant, Element, FlatBuilder, FlatSequence,
    ModelConfig, PatchGrid, SpecialToken, TargetModality, TokenId,
};
use lateral::train::{randomize_adapters, synth_corpus, SynthSpec};
use ndarray::{s, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn small_config(h: usize, w: usize) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        vocab_size: 12,
        patch_channels: 3,
        grid_height: h,
        grid_width: w,
        lora_rank: 2,
        lora_alpha: 4.0,
        dropout_p: 0.0,
        max_seq_len: 48,
        ..ModelConfig::toy()
    }
}

fn tokens(n: usize, vocab: u32, rng: &mut impl Rng) -> Vec<TokenId> {
    (0..n)
        .map(|_| rng.random_range(SpecialToken::COUNT..vocab))
        .collect()
}

fn grid(h: usize, w: usize, c: usize, rng: &mut impl Rng) -> PatchGrid {
    PatchGrid::new(
        h,
        w,
        c,
        (0..h * w * c).map(|_| rng.sample(StandardNormal)).collect(),
    )
    .unwrap()
}

/// Random text/image sequence that fits `cfg`.
fn random_flat(cfg: &ModelConfig, rng: &mut impl Rng) -> FlatSequence {
    let (h, w, c) = (cfg.grid_height, cfg.grid_width, cfg.patch_channels);
    let mut b = FlatBuilder::new();
    b.push_tokens(&tokens(rng.random_range(1..4), cfg.vocab_size, rng))
        .unwrap();
    for _ in 0..rng.random_range(0..4) {
        let room = cfg.max_seq_len - 1 - b.len();
        if rng.random_bool(0.6) && room >= h * w + 2 {
            b.push_image(&grid(h, w, c, rng));
        } else if room >= 3 {
            b.push_tokens(&tokens(rng.random_range(1..4), cfg.vocab_size, rng))
                .unwrap();
        }
    }
    b.finish()
}

fn randomized_model(cfg: ModelConfig, variant: AdapterVariant, seed: u64) -> VlgModel {
    let mut m = VlgModel::new(ModelConfig { seed, ..cfg }).unwrap();
    m.attach_adapters(variant, seed);
    randomize_adapters(&mut m, seed + 1, 0.3);
    m
}

fn variant() -> impl Strategy<Value = AdapterVariant> {
    prop::sample::select(AdapterVariant::ALL.to_vec())
}

fn routed_set(variant: AdapterVariant, d: usize, seed: u64) -> RoutedAdapterSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = AdapterDims {
        d_in: d,
        d_out: d + 1,
        rank: 2,
        alpha: 1.5,
        kernel_size: 2,
        dropout_p: 0.0,
    };
    let mut set = RoutedAdapterSet {
        base: Linear::init(d, d + 1, true, 0.5, &mut rng),
        adapter: Some(Adapter::zero_init(variant, dims, &mut rng)),
    };
    set.visit_mut("", &mut |_, p| {
        p.value.mapv_inplace(|_| rng.sample(StandardNormal))
    });
    set
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    #[test]
    fn each_image_has_exactly_hw_image_targets(seed in any::<u64>(), h in 1usize..4, w in 1usize..4) {
        let cfg = small_config(h, w);
        let flat = random_flat(&cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        let routing = Routing::from_flat(&flat, h, w).unwrap();
        let mask = routing.mask();
        for &start in routing.span_starts() {
            prop_assert!(mask[start..start + h * w].iter().all(|m| *m == TargetModality::Image));
        }
        let images = mask.iter().filter(|m| **m == TargetModality::Image).count();
        prop_assert_eq!(images, routing.span_starts().len() * h * w);
        // A position predicts an image patch exactly when the next element is one.
        for p in 0..flat.len() {
            let next_is_patch = flat.elements().get(p + 1).is_some_and(|e| e.is_patch());
            prop_assert_eq!(mask[p] == TargetModality::Image, next_is_patch);
        }
    }

    #[test]
    fn group_order_does_not_change_routed_output(seed in any::<u64>(), v in variant()) {
        let cfg = small_config(2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flat = random_flat(&cfg, &mut rng);
        let routing = Routing::from_flat(&flat, 2, 3).unwrap();
        let hidden = Array2::from_shape_simple_fn((flat.len(), 5), || rng.sample(StandardNormal));
        let set = routed_set(v, 5, seed);
        let a = routed_apply_ordered(hidden.view(), &routing, &set, false).unwrap();
        let b = routed_apply_ordered(hidden.view(), &routing, &set, true).unwrap();
        prop_assert_eq!(&a, &b);
        // Text rows depend on their own row only.
        let text = match set.adapter.as_ref().unwrap() {
            Adapter::SharedLinear(t) | Adapter::MoeLinear { text: t, .. } | Adapter::Lateralization { text: t, .. } => t,
        };
        for p in routing.text_positions() {
            let row = hidden.slice(s![p..p + 1, ..]);
            let lora = row.dot(&text.a.value.t()).dot(&text.b.value.t()) * text.alpha;
            let own = set.base.apply(row).unwrap() + lora;
            for (x, y) in own.row(0).iter().zip(a.row(p)) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn perturbing_one_image_leaves_others_alone(seed in any::<u64>(), v in variant()) {
        let (h, w) = (2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = FlatBuilder::new();
        b.push_tokens(&[5]).unwrap();
        for _ in 0..3 {
            b.push_image(&grid(h, w, 3, &mut rng));
            b.push_tokens(&[6]).unwrap();
        }
        let flat = b.finish();
        let routing = Routing::from_flat(&flat, h, w).unwrap();
        let hidden = Array2::from_shape_simple_fn((flat.len(), 4), || rng.sample(StandardNormal));
        let set = routed_set(v, 4, seed);
        let out = routed_apply_ordered(hidden.view(), &routing, &set, false).unwrap();
        let starts = routing.span_starts().to_vec();
        let target = rng.random_range(0..starts.len());
        let mut moved = hidden.clone();
        moved.slice_mut(s![starts[target]..starts[target] + h * w, ..]).mapv_inplace(|x| x + 1.0);
        let out2 = routed_apply_ordered(moved.view(), &routing, &set, false).unwrap();
        for (i, &st) in starts.iter().enumerate() {
            if i != target {
                prop_assert_eq!(out.slice(s![st..st + h * w, ..]), out2.slice(s![st..st + h * w, ..]));
            }
        }
    }

    #[test]
    fn conv_output_ignores_inputs_outside_footprint(seed in any::<u64>(), h in 1usize..6, w in 1usize..6, k in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = 2;
        let kernel = Array2::from_shape_simple_fn((k * k * c, 3), || rng.sample(StandardNormal));
        let g = Array2::from_shape_simple_fn((h * w, c), || rng.sample(StandardNormal));
        let out = causal_conv2d(g.view(), h, w, kernel.view(), k).unwrap();
        let j = rng.random_range(0..h * w);
        let mut g2 = g.clone();
        g2.row_mut(j).mapv_inplace(|x| x + 1.0);
        let out2 = causal_conv2d(g2.view(), h, w, kernel.view(), k).unwrap();
        let (jr, jc) = (j / w, j % w);
        for i in 0..h * w {
            let (ir, ic) = (i / w, i % w);
            let inside = jr <= ir && ir < jr + k && jc <= ic && ic < jc + k;
            if !inside {
                prop_assert_eq!(out.row(i), out2.row(i));
            }
        }
    }

    #[test]
    fn network_is_causal(seed in any::<u64>(), v in variant()) {
        let cfg = small_config(2, 2);
        let m = randomized_model(cfg.clone(), v, seed % 1000);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flat = random_flat(&cfg, &mut rng);
        let q = rng.random_range(0..flat.len());
        let mut elems = flat.elements().to_vec();
        match &mut elems[q] {
            Element::Patch(p) => p.iter_mut().for_each(|x| *x -= 0.5),
            Element::Token(t) if *t >= SpecialToken::COUNT => *t = if *t == 5 { 6 } else { 5 },
            Element::Token(_) => return Ok(()),
        }
        let a = m.forward(&flat).unwrap();
        let b = m.forward(&FlatSequence::from_elements(elems, 2, 2).unwrap()).unwrap();
        for p in 0..q {
            prop_assert_eq!(a.logits.row(p), b.logits.row(p));
            prop_assert_eq!(a.patches.row(p), b.patches.row(p));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn generations_are_valid_and_deterministic(seed in any::<u64>(), v in variant(), img_bias in -2.0f64..6.0) {
        let cfg = small_config(2, 3);
        let mut m = randomized_model(cfg.clone(), v, seed % 1000);
        let bias = m.lm_head.bias.get_or_insert_with(|| lateral::params::Param::zeros(1, 12));
        bias.value[[0, SpecialToken::ImgStart.id() as usize]] = img_bias;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prompt = random_flat(&ModelConfig { max_seq_len: 24, ..cfg.clone() }, &mut rng);
        let gen_cfg = GenerationConfig { max_total_steps: 40, max_text_run: 8, ..Default::default() };
        let g = generate(&m, &prompt, gen_cfg).unwrap();
        prop_assert!(g.flat.len() <= cfg.max_seq_len, "len {} prompt {} steps {} trunc {}", g.flat.len(), g.prompt_len, g.steps, g.truncated);
        // Re-parsing the emitted sequence validates bracketing and image size.
        let reparsed = FlatSequence::from_elements(g.flat.elements().to_vec(), 2, 3).unwrap();
        let (seq, _) = reparsed.unflatten().unwrap();
        prop_assert!(seq.images().all(|im| im.height() == 2 && im.width() == 3));
        prop_assert!(g.output.images().all(|im| im.len() == 6));
        let again = generate(&m, &prompt, gen_cfg).unwrap();
        prop_assert_eq!(g.flat, again.flat);
    }

    #[test]
    fn instance_serialization_round_trips(seed in any::<u64>()) {
        let spec = SynthSpec { instances: 1, seed, ..Default::default() };
        let inst = synth_corpus(&spec).unwrap().remove(0);
        let bytes = serialize_instance(&inst);
        prop_assert_eq!(deserialize_instance(&bytes).unwrap(), inst);
    }
}

fn raw_strategy() -> impl Strategy<Value = RawInstance> {
    (any::<u64>(), 0usize..8, 0usize..15, prop::bool::ANY).prop_map(
        |(seed, n_img, n_sent, similar)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let images: Vec<PatchGrid> = (0..n_img)
                .map(|_| {
                    let v: f64 = if similar {
                        1.0 + rng.random_range(-0.1..0.1)
                    } else {
                        rng.random_range(-1.0..1.0)
                    };
                    common::flat(v)
                })
                .collect();
            let mut text = common::sentences(n_sent);
            if rng.random_bool(0.2) && !text.is_empty() {
                text.push(text[0].clone());
            }
            common::doc(&format!("p{seed}"), text, images)
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 128, ..ProptestConfig::default() })]

    #[test]
    fn pipeline_verdicts_are_consistent(batch in prop::collection::vec(raw_strategy(), 1..8)) {
        let cfg = PipelineConfig { coherence_threshold: Some(0.3), ..Default::default() };
        let p = Pipeline::new(cfg).unwrap();
        let out = p.run(&batch).unwrap();
        prop_assert_eq!(out.verdicts.len(), batch.len());
        let accepted: Vec<&str> = out.accepted.iter().map(|i| i.metadata.source_id.as_str()).collect();
        for v in &out.verdicts {
            let is_acc = accepted.contains(&v.source_id.as_str());
            prop_assert_eq!(is_acc, v.outcome == Outcome::Accepted);
            prop_assert!(!(is_acc && v.is_indeterminate()));
        }
        // Accepted instances survive a second pass.
        let again: Vec<RawInstance> = out
            .accepted
            .iter()
            .map(|i| RawInstance::from_dataset_instance(i).unwrap())
            .collect();
        let second = p.run(&again).unwrap();
        prop_assert_eq!(second.accepted.len(), again.len());
    }

    #[test]
    fn distance_is_a_bounded_symmetric_score(a in prop::collection::vec(-5.0f64..5.0, 8), b in prop::collection::vec(-5.0f64..5.0, 8)) {
        let (ga, gb) = (PatchGrid::new(2, 2, 2, a).unwrap(), PatchGrid::new(2, 2, 2, b).unwrap());
        let d = grid_distance(&ga, &gb);
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(d, grid_distance(&gb, &ga));
        prop_assert_eq!(grid_distance(&ga, &ga), 0.0);
    }
}
