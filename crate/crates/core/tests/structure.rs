use rand::Rng;
use robustlab_core::nn::{logits, Ctx, Network, ParamKind};
use robustlab_core::rng::seeded;
use robustlab_core::structure::*;
use robustlab_core::{grad_check, Error, Tape, Tensor};

fn images(b: usize, c: usize, side: usize, seed: u64) -> Tensor {
    let mut rng = seeded(seed);
    Tensor::from_fn([b, c, side, side], |_| rng.gen_range(0.0..1.0))
}

/// Small spec that keeps every structural feature but runs fast.
fn tiny(family: Family, embedding: Embedding, tm: TokenMixer, cmlp: Cmlp, stacking: Stacking) -> StructureSpec {
    let mut s = StructureSpec::desk(family, embedding, tm, cmlp, Norm::LayerNorm, Skip::Residual, stacking);
    s.image = ImageDims {
        height: 8,
        width: 8,
        channels: 2,
    };
    s.patch = 2;
    s.embed_dim = 8;
    s.heads = 2;
    s.mlp_ratio = 2.0;
    s.classes = 3;
    s.window = 2;
    s.stage_layers = vec![1; stacking.default_stage_layers().len().min(2)];
    s
}

#[test]
fn every_preset_maps_cifar_batch_to_ten_logits() {
    let x = images(2, 3, 32, 1);
    for family in [Family::Vit, Family::Vmlp] {
        for id in all_preset_ids() {
            let spec = structure_from_preset(&id, family).unwrap();
            let model = Model::new(&spec, 7).unwrap_or_else(|e| panic!("{id}: {e}"));
            let y = logits(&model, &x).unwrap();
            assert_eq!(y.shape(), &[2, 10], "{id} {family:?}");
            assert!(y.all_finite());
        }
    }
}

#[test]
fn compatibility_rules_name_the_violation() {
    let desk = |e, t, s| StructureSpec::desk(Family::Vit, e, t, Cmlp::Ori, Norm::LayerNorm, Skip::Residual, s);
    let rule = |spec: StructureSpec| match validate_structure(&spec) {
        Err(Error::Incompatible { rule, .. }) => Some(rule),
        Ok(()) => None,
        Err(e) => panic!("unexpected {e}"),
    };
    assert_eq!(rule(desk(Embedding::Pconv, TokenMixer::Ori, Stacking::OriVit)), Some(rules::ORIVIT_DIMENSION));
    assert_eq!(rule(desk(Embedding::Ori, TokenMixer::Conv, Stacking::OriVit)), Some(rules::ORIVIT_DIMENSION));
    assert_eq!(rule(desk(Embedding::Pconv, TokenMixer::Conv, Stacking::CnnBased)), None);
    assert_eq!(rule(desk(Embedding::Ori, TokenMixer::Conv, Stacking::CnnBased)), Some(rules::CNN_FIXED_COMPONENTS));
    assert_eq!(rule(desk(Embedding::Pconv, TokenMixer::Conv, Stacking::SwinBased)), Some(rules::SWIN_CONV_TM));
    assert_eq!(rule(desk(Embedding::Ori, TokenMixer::Ori, Stacking::ImagePy)), Some(rules::IMAGEPY_EMBEDDING));
    let mut s = desk(Embedding::Ori, TokenMixer::Ori, Stacking::OriVit);
    s.heads = 5;
    assert_eq!(rule(s), Some(rules::HEAD_DIVISIBILITY));
    let mut s = desk(Embedding::Ori, TokenMixer::Ori, Stacking::OriVit);
    s.patch = 5;
    assert_eq!(rule(s), Some(rules::PATCH_DIVISIBILITY));
}

#[test]
fn construction_and_forward_are_deterministic() {
    let spec = structure_from_preset("(n)", Family::Vit).unwrap();
    let a = Model::new(&spec, 3).unwrap();
    let b = Model::new(&spec, 3).unwrap();
    let names: Vec<_> = a.params().iter().map(|p| p.name.clone()).collect();
    assert_eq!(names, b.params().iter().map(|p| p.name.clone()).collect::<Vec<_>>());
    let x = images(2, 3, 32, 4);
    let (ya, yb) = (logits(&a, &x).unwrap(), logits(&b, &x).unwrap());
    assert_eq!(ya.data(), yb.data());
    let c = Model::new(&spec, 4).unwrap();
    assert_ne!(logits(&c, &x).unwrap().data(), ya.data());
}

#[test]
fn attention_rows_are_distributions() {
    for id in ["(b)", "(k)", "(n)"] {
        let spec = structure_from_preset(id, Family::Vit).unwrap();
        let model = Model::new(&spec, 5).unwrap();
        let (_, trace) = trace_forward(&model, &images(1, 3, 32, 6)).unwrap();
        assert_eq!(trace.attention.len(), 12, "{id}");
        for a in &trace.attention {
            let n = *a.shape().last().unwrap();
            for row in a.data().chunks(n) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12, "{id}");
            }
        }
    }
}

#[test]
fn zero_block_weights_make_the_stack_an_identity() {
    for family in [Family::Vit, Family::Vmlp] {
        for cmlp in [Cmlp::Ori, Cmlp::Conv] {
            let spec = structure_from_preset("(b)", family).unwrap();
            let mut spec = StructureSpec { cmlp, ..spec };
            spec.stage_layers = vec![4];
            let mut model = Model::new(&spec, 8).unwrap();
            let ids: Vec<usize> = model
                .params()
                .iter()
                .enumerate()
                .filter(|(_, p)| p.name.starts_with("stage") && p.kind != ParamKind::Norm)
                .map(|(i, _)| i)
                .collect();
            for i in ids {
                model.params_mut().value_mut(i).data_mut().fill(0.0);
            }
            let (_, trace) = trace_forward(&model, &images(2, 3, 32, 9)).unwrap();
            let z0 = trace.embedded.unwrap();
            for z in &trace.layers {
                assert_eq!(z.data(), z0.data(), "{family:?} {cmlp:?}");
            }
        }
    }
}

#[test]
fn single_token_attention_is_the_value_path() {
    let mut spec = StructureSpec::desk(Family::Vit, Embedding::Ori, TokenMixer::Ori, Cmlp::None, Norm::None, Skip::None, Stacking::OriVit);
    spec.image = ImageDims {
        height: 4,
        width: 4,
        channels: 3,
    };
    spec.stage_layers = vec![1];
    let model = Model::new(&spec, 10).unwrap();
    let (_, trace) = trace_forward(&model, &images(3, 3, 4, 11)).unwrap();
    for a in &trace.attention {
        assert!(a.data().iter().all(|&w| w == 1.0));
    }
    // Oracle: O(V(z)) computed directly from the parameter tables.
    let p = |n: &str| model.params().by_name(n).unwrap().value.clone();
    let affine = |z: &[f64], w: &Tensor, b: &Tensor| -> Vec<f64> {
        let (i, o) = (w.shape()[0], w.shape()[1]);
        (0..o).map(|c| b.data()[c] + (0..i).map(|r| z[r] * w.data()[r * o + c]).sum::<f64>()).collect()
    };
    let z0 = trace.embedded.unwrap();
    let out = &trace.layers[0];
    for (zi, oi) in z0.data().chunks(64).zip(out.data().chunks(64)) {
        let v = affine(zi, &p("stage0.block0.attn.v.weight"), &p("stage0.block0.attn.v.bias"));
        let o = affine(&v, &p("stage0.block0.attn.o.weight"), &p("stage0.block0.attn.o.bias"));
        for (a, b) in o.iter().zip(oi) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn embedding_geometry() {
    let spec = structure_from_preset("(n)", Family::Vit).unwrap();
    let model = Model::new(&spec, 1).unwrap();
    let tape = Tape::new();
    let params = model.params().bind(&tape, false);
    let ctx = Ctx { tape: &tape, params: &params };
    let e = model.embed(&ctx, tape.constant(images(1, 3, 32, 2))).unwrap();
    assert_eq!(e.shape(), vec![1, 64, 8, 8]);

    let bad = tape.constant(Tensor::zeros([65, 64]));
    let z = tape.constant(Tensor::zeros([1, 64, 64]));
    assert!(add_position(z, bad).is_err());
}

#[test]
fn zero_position_embedding_leaves_the_projection() {
    let spec = structure_from_preset("(b)", Family::Vit).unwrap();
    let mut model = Model::new(&spec, 1).unwrap();
    let pos = model.params().id_of("embed.pos").unwrap();
    model.params_mut().value_mut(pos).data_mut().fill(0.0);
    let x = images(1, 3, 32, 3);
    let tape = Tape::new();
    let params = model.params().bind(&tape, false);
    let ctx = Ctx { tape: &tape, params: &params };
    let e = model.embed(&ctx, tape.constant(x.clone())).unwrap();
    let proj = tape
        .constant(patchify(&x, 4).unwrap())
        .matmul(params[model.params().id_of("embed.proj.weight").unwrap()])
        .unwrap()
        .add(params[model.params().id_of("embed.proj.bias").unwrap()])
        .unwrap();
    assert_eq!(e.value().data(), proj.value().data());
}

#[test]
fn aggregate_halves_and_preserves_constants() {
    let mut store = robustlab_core::nn::ParamStore::new();
    let mut rng = seeded(0);
    let mut init = robustlab_core::nn::ParamInit {
        store: &mut store,
        rng: &mut rng,
        weight_std: 0.02,
    };
    let agg = BlockAggregate::new(&mut init, "agg", 2, 2, false).unwrap();
    // Identity kernel: centre tap of the matching channel.
    let w = store.value_mut(agg.conv.weight);
    w.data_mut().fill(0.0);
    for c in 0..2 {
        w.data_mut()[(c * 2 + c) * 9 + 4] = 1.0;
    }
    let tape = Tape::new();
    let params = store.bind(&tape, false);
    let ctx = Ctx { tape: &tape, params: &params };
    let y = agg.forward(&ctx, tape.constant(Tensor::full([1, 2, 8, 8], 0.37))).unwrap();
    assert_eq!(y.shape(), vec![1, 2, 4, 4]);
    assert!(y.value().data().iter().all(|&v| v == 0.37));
    assert!(agg.forward(&ctx, tape.constant(Tensor::zeros([1, 2, 7, 7]))).is_err());

    let err = grad_check(
        |t, x| {
            let params = store.bind(t, false);
            let ctx = Ctx { tape: t, params: &params };
            Ok(agg.forward(&ctx, x)?.gelu().sum())
        },
        &images(1, 2, 4, 12),
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn one_block_per_mixer_kind_matches_finite_differences() {
    let cases = [
        ("vit-global", tiny(Family::Vit, Embedding::Ori, TokenMixer::Ori, Cmlp::Ori, Stacking::OriVit)),
        ("vit-conv", tiny(Family::Vit, Embedding::Pconv, TokenMixer::Conv, Cmlp::Conv, Stacking::CnnBased)),
        ("vit-window", tiny(Family::Vit, Embedding::Ori, TokenMixer::WindowShift, Cmlp::Ori, Stacking::SwinBased)),
        ("vit-pyramid", tiny(Family::Vit, Embedding::Pconv, TokenMixer::Ori, Cmlp::Conv, Stacking::ImagePy)),
        ("vmlp-global", tiny(Family::Vmlp, Embedding::Ori, TokenMixer::Ori, Cmlp::Conv, Stacking::OriVit)),
        ("vmlp-conv", tiny(Family::Vmlp, Embedding::Pconv, TokenMixer::Conv, Cmlp::Ori, Stacking::CnnBased)),
        ("vmlp-window", tiny(Family::Vmlp, Embedding::Ori, TokenMixer::WindowShift, Cmlp::Ori, Stacking::SwinBased)),
    ];
    for (name, spec) in cases {
        let model = Model::with_weight_std(&spec, 13, 0.3).unwrap();
        let grid = spec.base_grid();
        let mut rng = seeded(14);
        let z = Tensor::from_fn([2, grid.tokens(), spec.embed_dim], |_| rng.gen_range(-1.0..1.0));
        let err = grad_check(
            |t, z| {
                let params = model.params().bind(t, false);
                let ctx = Ctx { tape: t, params: &params };
                let y = model.apply_block(&ctx, 0, 0, z)?;
                Ok(y.mul(y)?.sum())
            },
            &z,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "{name}: {err:e}");
    }
}

#[test]
fn shifted_windows_alternate_within_a_stage() {
    let mut spec = tiny(Family::Vit, Embedding::Ori, TokenMixer::WindowShift, Cmlp::Ori, Stacking::SwinBased);
    spec.stage_layers = vec![2, 1];
    let model = Model::new(&spec, 2).unwrap();
    let (y, trace) = trace_forward(&model, &images(2, 2, 8, 3)).unwrap();
    assert_eq!(y.shape(), &[2, 3]);
    // 4x4 grid in windows of 2: four windows per sample, two heads.
    assert_eq!(trace.attention[0].shape(), &[2 * 4 * 2, 4, 4]);
    assert_eq!(trace.layers[2].shape(), &[2, 4, 16]);
}

#[test]
fn input_normaliser_is_applied() {
    let spec = tiny(Family::Vit, Embedding::Ori, TokenMixer::Ori, Cmlp::Ori, Stacking::OriVit);
    let mut model = Model::new(&spec, 2).unwrap();
    let x = images(1, 2, 8, 4);
    let before = logits(&model, &x).unwrap();
    model
        .set_input_norm(InputNorm {
            mean: vec![0.5, 0.5],
            std: vec![0.25, 0.25],
        })
        .unwrap();
    let shifted = Tensor::from_fn([1, 2, 8, 8], |i| x.data()[i] * 0.25 + 0.5);
    let after = logits(&model, &shifted).unwrap();
    for (a, b) in before.data().iter().zip(after.data()) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(model.set_input_norm(InputNorm { mean: vec![0.0], std: vec![1.0] }).is_err());
}
