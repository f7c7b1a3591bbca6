use lisn::complexity::{count_flops, count_params, report, Layer, LayerOp, Sequential};
use lisn::model::{LisnConfig, LisnModel, Variant};
use lisn::tensor::Tape;
use lisn::Tensor;

fn conv(cin: usize, cout: usize, kernel: usize, groups: usize) -> LayerOp {
    LayerOp::Conv2d {
        cin,
        cout,
        kernel,
        groups,
        bias: true,
    }
}

#[test]
fn toy_model_matches_hand_enumeration() {
    let toy = Sequential {
        name: "toy".into(),
        layers: vec![
            Layer::new("a", conv(1, 8, 3, 1), (1, 1)),
            Layer::new("b", conv(8, 8, 3, 8), (1, 1)),
            Layer::new("c", conv(8, 4, 1, 1), (1, 1)),
        ],
    };
    // a: 8·1·9 + 8 = 80; b: 8·1·9 + 8 = 80; c: 4·8 + 4 = 36
    assert_eq!(count_params(&toy), 196);
    // at 10×12: a 2·9·1·8·120 = 17,280; b 2·9·1·8·120 = 17,280; c 2·8·4·120 = 7,680
    assert_eq!(count_flops(&toy, (10, 12)), 42_240);
    let r = report(&toy, (10, 12), 1).unwrap();
    assert_eq!(r.rows.iter().map(|r| r.flops).collect::<Vec<_>>(), [8_640, 8_640, 3_840]);
}

#[test]
fn symbolic_counts_match_execution() {
    for variant in Variant::ALL {
        let cfg = LisnConfig {
            width: 16,
            n_blocks: 2,
            scale: 2,
            ..LisnConfig::default()
        }
        .with_variant(variant);
        let model = LisnModel::<f32>::build(&cfg, 0).unwrap();
        assert_eq!(count_params(&model), model.num_params() as u64, "{variant}");
        let mut tape = Tape::new();
        let x = tape.input(Tensor::full(&[1, 1, 9, 7], 0.5));
        model.forward(&mut tape, x).unwrap();
        assert_eq!(count_flops(&model, (9, 7)), tape.flops(), "{variant}");
    }
}

#[test]
fn default_parameter_count_matches_hand_enumeration() {
    // Per block at C = 64: two shift layers of (norm 64 + expand 32·96+96
    // + gate 96·96+96 + project 96·32+32), depthwise 16·9+16, pointwise
    // 16·16+16, attention 64·16+16 and 16·64+64.
    let block: u64 = 2 * (64 + 3_168 + 9_312 + 3_104) + 160 + 272 + 1_040 + 1_088;
    // head 9·64+64; fusion 384·64+64, 9·64·64+64, 64·64+64; tail 9·64·16+16
    let rest: u64 = 640 + 24_640 + 36_928 + 4_160 + 9_232;
    assert_eq!(count_params(&LisnConfig::default()), 6 * block + rest);
    assert_eq!(6 * block + rest, 278_736);
    for n in [4u64, 8, 10, 12] {
        let cfg = LisnConfig::default().with_blocks(n as usize);
        assert_eq!(count_params(&cfg), n * (block + 64 * 64) + rest - 6 * 64 * 64, "N = {n}");
    }
}

#[test]
fn tail_flops_match_hand_count() {
    let r = report(&LisnConfig::default(), (64, 64), 2).unwrap();
    let iir = r.rows.iter().find(|row| row.name == "iir").unwrap();
    assert_eq!(iir.flops, 2 * 9 * 64 * 16 * 64 * 64);
}

#[test]
fn flops_are_affine_in_area_with_pooled_constant() {
    // The only size-independent work is the attention gate on the pooled
    // vector: sum 64, reduce 2·64·16, expand 2·16·64, sigmoid 4·64.
    let per_block = 64 + 2 * 64 * 16 + 2 * 16 * 64 + 4 * 64;
    let constant = 6 * per_block as i128;
    let base = LisnConfig::default();
    let f = |s: usize| count_flops(&base, (s, s)) as i128;
    assert_eq!(f(128) - 4 * f(64), -3 * constant);
    assert_eq!(f(32) - constant, (f(64) - constant) / 4);
    let no_cca = base.clone().with_variant(Variant::NoCca);
    assert_eq!(count_flops(&no_cca, (128, 128)), 4 * count_flops(&no_cca, (64, 64)));
}

#[test]
fn no_split_is_roughly_three_times_larger() {
    let base = LisnConfig::default();
    let ns = base.clone().with_variant(Variant::NoSplit);
    let ratio = count_params(&ns) as f64 / count_params(&base) as f64;
    assert!(ratio > 2.5 && ratio < 4.0, "{ratio}");
    let fratio = count_flops(&ns, (64, 64)) as f64 / count_flops(&base, (64, 64)) as f64;
    assert!(fratio > 2.5, "{fratio}");
}

#[test]
fn mac_convention_flag_scales_multiply_accumulates() {
    let base = LisnConfig::default();
    let two = report(&base, (64, 64), 2).unwrap();
    let one = report(&base, (64, 64), 1).unwrap();
    for (a, b) in one.rows.iter().zip(&two.rows) {
        if matches!(a.op, LayerOp::Conv2d { .. }) {
            assert_eq!(2 * a.flops, b.flops, "{}", a.name);
        } else {
            assert_eq!(a.flops, b.flops, "{}", a.name);
        }
    }
    assert!(one.to_table(false).contains("MAC = 1"));
}
