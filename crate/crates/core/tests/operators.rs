use oceanprompt::backbone::{GaroBlock, SsdcBlock};
use oceanprompt::datastore::AvailabilityMask;
use oceanprompt::embedder::{uoa_project, Embedder, EmbedderDims, UOA_WEIGHT};
use oceanprompt::model::{Model, ModelConfig, Variant};
use oceanprompt::{ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Bilinear read with the sampling coordinate clamped into the grid.
fn sample_clamped(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let at = |yy: usize, xx: usize| plane[yy * w + xx];
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
}

/// `b + Σ W · x(p + tap + (dy, dx))` plus the residual input.
fn garo_oracle(x: &Tensor<f64>, weight: &Tensor<f64>, bias: &Tensor<f64>, k: usize, dy: f64, dx: f64) -> Vec<f64> {
    let (c, h, w) = x.dims3();
    let half = (k / 2) as f64;
    let mut out = vec![0.0; c * h * w];
    for o in 0..c {
        for py in 0..h {
            for px in 0..w {
                let mut acc = bias.data()[o];
                for i in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let wv = weight.data()[((o * c + i) * k + ky) * k + kx];
                            let y = py as f64 + ky as f64 - half + dy;
                            let xx = px as f64 + kx as f64 - half + dx;
                            acc += wv * sample_clamped(x.channel(i), h, w, y, xx);
                        }
                    }
                }
                out[(o * h + py) * w + px] = acc + x.data()[(o * h + py) * w + px];
            }
        }
    }
    out
}

fn garo_with_constant_offset(k: usize, dy: f64, dx: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let block = GaroBlock::new("g", 3, k);
    let mut ps = ParamStore::new();
    block.init(&mut ps, &mut rng);
    let bias = ps.get_mut(block.offset.bias.as_ref().unwrap());
    for t in 0..k * k {
        bias.data_mut()[2 * t] = dy;
        bias.data_mut()[2 * t + 1] = dx;
    }
    let x = random_tensor(&[3, 7, 9], &mut rng);
    let (y, _) = block.forward(&ps, &x).unwrap();
    let want = garo_oracle(&x, ps.get(&block.conv.weight), ps.get(block.conv.bias.as_ref().unwrap()), k, dy, dx);
    y.data().iter().zip(&want).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
}

#[test]
fn garo_without_offsets_is_replicate_padded_conv_plus_input() {
    for k in [3, 5] {
        assert!(garo_with_constant_offset(k, 0.0, 0.0) < 1e-12);
    }
}

#[test]
fn garo_integer_offset_shifts_the_sampling_grid() {
    assert!(garo_with_constant_offset(3, 0.0, 1.0) < 1e-12);
    assert!(garo_with_constant_offset(3, -2.0, 0.0) < 1e-12);
}

#[test]
fn garo_fractional_offset_interpolates_bilinearly() {
    assert!(garo_with_constant_offset(3, 0.25, -0.5) < 1e-12);
    assert!(garo_with_constant_offset(3, 1.75, 3.5) < 1e-12);
}

#[test]
fn ssdc_one_hot_weights_select_a_single_branch() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let block = SsdcBlock::new("s", 4, &[3, 5, 7], 2);
    let mut ps = ParamStore::new();
    block.init(&mut ps, &mut rng);
    let x = random_tensor(&[4, 8, 8], &mut rng);
    for r in 0..3 {
        let mut omega = vec![0.0; 3];
        omega[r] = 1.0;
        let got = block.forward_with_weights(&ps, &x, &omega).unwrap();
        let (branch, _) = block.branches[r].forward(&ps, &x).unwrap();
        let (want, _) = block.psi.forward(&ps, &branch).unwrap();
        assert!(got.max_abs_diff(&want) < 1e-12);
    }
}

#[test]
fn ssdc_attention_is_a_distribution() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let block = SsdcBlock::new("s", 8, &[3, 5, 7], 4);
    let mut ps = ParamStore::new();
    block.init(&mut ps, &mut rng);
    let omega = block.attention(&ps, &random_tensor(&[8, 4, 4], &mut rng)).unwrap();
    assert!(omega.iter().all(|&w| w > 0.0));
    assert!((omega.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn adapter_equals_zero_imputed_full_projection() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (n, cb, h, w) = (4, 6, 5, 3);
    let weight = random_tensor(&[n, cb], &mut rng);
    let full = random_tensor(&[n, h, w], &mut rng);
    for mask in AvailabilityMask::all_nonempty(n) {
        let present = mask.present();
        let mut rows = Vec::new();
        for &i in &present {
            rows.extend_from_slice(full.channel(i));
        }
        let x_s = Tensor::from_vec(&[present.len(), h, w], rows).unwrap();
        let got = uoa_project(&x_s, &mask, &weight).unwrap();
        for c in 0..cb {
            for p in 0..h * w {
                let want: f64 = (0..n)
                    .map(|i| {
                        let v = if mask.contains(i) { full.channel(i)[p] } else { 0.0 };
                        weight.data()[i * cb + c] * v
                    })
                    .sum();
                assert!((got.channel(c)[p] - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn adapter_rejects_empty_and_mismatched_inputs() {
    let w = Tensor::<f64>::zeros(&[4, 2]);
    let x = Tensor::<f64>::zeros(&[2, 3, 3]);
    assert!(uoa_project(&x, &AvailabilityMask::from_bits(vec![false; 4]), &w).is_err());
    assert!(uoa_project(&x, &AvailabilityMask::full(4), &w).is_err());
}

fn dims(mixer_uses_mask: bool) -> EmbedderDims {
    EmbedderDims {
        n_vars: 4,
        channels: 6,
        codebook_size: 3,
        template_size: 4,
        mixer_hidden: 8,
        mixer_uses_mask,
        prompting: true,
    }
}

#[test]
fn prompt_mixture_is_a_convex_combination() {
    let emb = Embedder::new(dims(true)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut ps = ParamStore::new();
    emb.init(&mut ps, &mut rng);
    let e: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
    let (alpha, _) = emb.scp_mix(&ps, &e, &AvailabilityMask::full(4)).unwrap();
    assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let mixed = emb.mix_templates(&ps, &alpha).unwrap();
    let names: Vec<String> = ps.names().filter(|n| n.contains("templates")).map(String::from).collect();
    assert_eq!(names.len(), 3);
    for i in 0..mixed.len() {
        let want: f64 = (0..3)
            .map(|k| alpha[k] * ps.get(&format!("embedder.scp.templates.{k}")).data()[i])
            .sum();
        assert!((mixed.data()[i] - want).abs() < 1e-12);
    }
    let (prompt, _) = emb.scp_prompt(&ps, &alpha, 8, 12).unwrap();
    assert_eq!(prompt.shape(), &[6, 8, 12]);
    assert!(emb.scp_prompt(&ps, &alpha, 2, 2).is_err());
}

#[test]
fn mask_aware_mixer_reacts_to_the_mask() {
    let emb = Embedder::new(dims(true)).unwrap();
    let mut ps = ParamStore::new();
    emb.init(&mut ps, &mut ChaCha8Rng::seed_from_u64(2));
    let e = vec![0.1f64; 6];
    let a = emb.scp_mix(&ps, &e, &AvailabilityMask::from_bits(vec![true, false, false, false])).unwrap().0;
    let b = emb.scp_mix(&ps, &e, &AvailabilityMask::full(4)).unwrap().0;
    assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-9));
}

fn tiny(variant: Variant) -> Model {
    let cfg = ModelConfig {
        base_channels: 4,
        codebook_size: 3,
        template_size: 4,
        mixer_hidden: 8,
        stages: 2,
        variant,
        ..ModelConfig::default()
    };
    Model::new(&cfg, 4).unwrap()
}

/// With `no_scp` the model only sees `Σ_{i∈S} W_i x_i`, so adding a variable
/// whose field is identically zero cannot change the output.
#[test]
fn without_prompting_an_all_zero_extra_variable_changes_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ssh_u = random_tensor(&[2, 8, 8], &mut rng);
    let mut with_zero_v = ssh_u.data().to_vec();
    with_zero_v.extend(vec![0.0; 64]);
    let with_zero_v = Tensor::from_vec(&[3, 8, 8], with_zero_v).unwrap();
    let small = AvailabilityMask::from_bits(vec![true, true, false, false]);
    let large = AvailabilityMask::from_bits(vec![true, true, true, false]);

    let plain = tiny(Variant::NoScp);
    let ps = plain.init_params::<f64>(4);
    let a = plain.forward(&ps, &ssh_u, &small).unwrap();
    let b = plain.forward(&ps, &with_zero_v, &large).unwrap();
    assert_eq!(a, b);

    let full = tiny(Variant::Full);
    let ps = full.init_params::<f64>(4);
    let a = full.forward(&ps, &ssh_u, &small).unwrap();
    let b = full.forward(&ps, &with_zero_v, &large).unwrap();
    assert!(a.max_abs_diff(&b) > 0.0);
}

#[test]
fn variants_register_the_expected_parameter_groups() {
    let full = tiny(Variant::Full).init_params::<f32>(0);
    let no_scp = tiny(Variant::NoScp).init_params::<f32>(0);
    let no_gsao = tiny(Variant::NoGsao).init_params::<f32>(0);
    assert!(full.names().any(|n| n.starts_with("embedder.scp")));
    assert!(!no_scp.names().any(|n| n.starts_with("embedder.scp") || n.starts_with("embedder.interact")));
    assert!(no_scp.contains(UOA_WEIGHT));
    assert!(full.names().any(|n| n.contains(".garo.offset")));
    assert!(!no_gsao.names().any(|n| n.contains(".garo.") || n.contains("gsao.ssdc")));
}

#[test]
fn initialization_depends_only_on_the_seed() {
    let m = tiny(Variant::Full);
    assert_eq!(m.init_params::<f32>(7), m.init_params::<f32>(7));
    assert_ne!(m.init_params::<f32>(7), m.init_params::<f32>(8));
}
