mod common;

use common::*;
use eegx::atlas::{Atlas, ElectrodePosition};
use eegx::signal::RawRecording;
use eegx::synth::{MONTAGE_14, MONTAGE_19};
use eegx::tensor::check::gradcheck;
use eegx::tokenizer::*;
use eegx::{Error, Tape, Tensor};

fn single(x: Vec<f64>) -> RawRecording {
    RawRecording::new(vec![ElectrodePosition::new("Cz", 0.0, 0.0)], x, 128.0).unwrap()
}

fn dft_magnitude(x: &[f64]) -> Vec<f64> {
    let w = x.len();
    (0..w / 2 + 1)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, v) in x.iter().enumerate() {
                let h = (std::f64::consts::PI * t as f64 / w as f64).sin().powi(2);
                let a = -2.0 * std::f64::consts::PI * (k * t) as f64 / w as f64;
                re += v * h * a.cos();
                im += v * h * a.sin();
            }
            (re * re + im * im).sqrt()
        })
        .collect()
}

#[test]
fn segmentation_matches_enumeration_oracle() {
    let (cases, failures) = tokenizer_grid();
    assert_eq!(cases, 200);
    assert!(failures.is_empty(), "{:#?}", failures);
}

#[test]
fn single_window_is_whole_signal() {
    let x: Vec<f64> = (0..128).map(|t| (t as f64 * 0.3).sin()).collect();
    let tokens = segment(&single(x.clone()), 128, 32).unwrap();
    assert_eq!(tokens.shape(), [1, 1, 128]);
    assert_eq!(tokens.data(), x.as_slice());
}

#[test]
fn three_windows_with_zero_tail() {
    let x: Vec<f64> = (0..256).map(|t| t as f64 + 1.0).collect();
    let tokens = segment(&single(x), 128, 32).unwrap();
    assert_eq!(tokens.shape(), [1, 3, 128]);
    for (i, start) in [0usize, 96, 192].into_iter().enumerate() {
        assert_eq!(tokens.data()[i * 128], start as f64 + 1.0);
    }
    let last = &tokens.data()[2 * 128..];
    assert!(last[..64].iter().all(|&v| v != 0.0));
    assert!(last[64..].iter().all(|&v| v == 0.0));
}

#[test]
fn short_signal_gives_one_padded_token() {
    let tokens = segment(&single(vec![1.0; 20]), 128, 32).unwrap();
    assert_eq!(tokens.shape(), [1, 1, 128]);
    assert_eq!(tokens.data().iter().filter(|&&v| v == 1.0).count(), 20);
}

#[test]
fn overlap_not_below_window_is_config_error() {
    let rec = single(vec![0.0; 64]);
    assert!(matches!(segment(&rec, 32, 32), Err(Error::Config(_))));
    assert!(matches!(segment(&rec, 32, 40), Err(Error::Config(_))));
    let cfg = TokenizerConfig {
        window: 16,
        overlap: 16,
        d_e: 16,
    };
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
}

#[test]
fn token_length_must_match_frame() {
    let stft = Stft::new(16).unwrap();
    assert!(matches!(stft.magnitude(&[0.0; 15]), Err(Error::Config(_))));
}

#[test]
fn zero_token_embeds_to_bias() {
    let w = 32;
    let bins = w / 2 + 1;
    let weight = randn(&[bins, 8], 1);
    let bias = randn(&[8], 2);
    let mags = Stft::new(w).unwrap().magnitudes(&Tensor::zeros(&[1, 1, w])).unwrap();
    let tape = Tape::new();
    let e = stft_embed(tape.constant(mags), &tape.constant(weight), &tape.constant(bias.clone())).unwrap();
    assert_eq!(e.value().data(), bias.data());
}

#[test]
fn bin_centre_sinusoid_matches_direct_dft() {
    let w = 128;
    let k0 = 5;
    let x: Vec<f64> = (0..w).map(|t| (2.0 * std::f64::consts::PI * (k0 * t) as f64 / w as f64).cos()).collect();
    let mag = Stft::new(w).unwrap().magnitude(&x).unwrap();
    let oracle = dft_magnitude(&x);
    for (a, b) in mag.iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
    }
    let peak = mag.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
    assert_eq!(peak, k0);
    let outside: f64 = mag.iter().enumerate().filter(|(k, _)| k.abs_diff(k0) > 1).map(|(_, m)| m).sum();
    assert!(outside < 1e-9 * mag[k0]);

    let weight = randn(&[w / 2 + 1, 16], 3);
    let bias = randn(&[16], 4);
    let tape = Tape::new();
    let m = tape.constant(Tensor::new(vec![1, w / 2 + 1], mag).unwrap());
    let e = stft_embed(m, &tape.constant(weight.clone()), &tape.constant(bias.clone())).unwrap();
    for j in 0..16 {
        let want = bias.data()[j] + (0..w / 2 + 1).map(|k| oracle[k] * weight.data()[k * 16 + j]).sum::<f64>();
        assert!((e.value().data()[j] - want).abs() < 1e-9);
    }
}

#[test]
fn sign_flip_gives_identical_embedding() {
    let x = randn(&[1, 1, 64], 5);
    let stft = Stft::new(64).unwrap();
    let a = stft.magnitudes(&x).unwrap();
    let b = stft.magnitudes(&x.map(|v| -v)).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn stft_embed_gradients_match_finite_differences() {
    let mags = Stft::new(32).unwrap().magnitudes(&randn(&[2, 3, 32], 6)).unwrap();
    let report = gradcheck(&[randn(&[17, 8], 7), randn(&[8], 8)], FD_STEP, |t, v| {
        weighted_sum(t, stft_embed(t.constant(mags.clone()), &v[0], &v[1])?, 9)
    })
    .unwrap();
    assert!(report.max_rel_error < OP_TOL, "{:?}", report);
}

#[test]
fn origin_embedding_alternates() {
    let p = location_embedding(0.0, 0.0, 16).unwrap();
    let want: Vec<f64> = (0..16).map(|i| if i % 2 == 0 { 0.0 } else { 1.0 }).collect();
    assert_eq!(p, want);
    assert_eq!(p.iter().map(|x| x * x).sum::<f64>(), 8.0);
}

#[test]
fn embedding_entries_follow_formula() {
    let (u, v, d) = (123.0, 456.0, 16);
    let p = location_embedding(u, v, d).unwrap();
    for k in 0..d / 4 {
        let w = 1000f64.powf(-4.0 * k as f64 / d as f64);
        assert_eq!(p[4 * k], (u * w).sin());
        assert_eq!(p[4 * k + 1], (u * w).cos());
        assert_eq!(p[4 * k + 2], (v * w).sin());
        assert_eq!(p[4 * k + 3], (v * w).cos());
    }
    let norm: f64 = p.iter().map(|x| x * x).sum();
    assert!((norm - d as f64 / 2.0).abs() < 1e-12);
}

#[test]
fn width_not_multiple_of_four_is_config_error() {
    assert!(matches!(location_embedding(0.0, 0.0, 10), Err(Error::Config(_))));
    assert!(matches!(location_embedding(0.0, 0.0, 0), Err(Error::Config(_))));
}

#[test]
fn nearby_electrodes_are_more_similar() {
    let atlas = Atlas::bundled();
    for d in [16, LOCALITY_DIM] {
        assert!(locality_spot_checks(&atlas, d), "d_e = {}", d);
    }
}

#[test]
fn similarity_decreases_with_distance() {
    let atlas = Atlas::bundled();
    let rho = locality_spearman(&atlas, LOCALITY_DIM);
    eprintln!("spearman at d_e={}: {:.3}", LOCALITY_DIM, rho);
    eprintln!("spearman at d_e=16: {:.3}", locality_spearman(&atlas, 16));
    assert!(rho <= -0.7, "{}", rho);
}

#[test]
fn zero_signal_tokens_are_bias_plus_location() {
    let atlas = Atlas::bundled();
    let cfg = TokenizerConfig::default();
    let rec = RawRecording::from_names(&atlas, &["F4"], vec![0.0; 300], 128.0).unwrap();
    let weight = randn(&[cfg.bins(), cfg.d_e], 10);
    let bias = randn(&[cfg.d_e], 11);
    let batch = tokenize(&rec, &cfg, &atlas, &weight, &bias).unwrap();
    let loc = position_embedding(&atlas, atlas.lookup("F4").unwrap(), cfg.d_e).unwrap();
    assert_eq!(batch.n, 3);
    for i in 0..batch.n {
        let row = &batch.embeddings.data()[i * cfg.d_e..(i + 1) * cfg.d_e];
        for j in 0..cfg.d_e {
            assert_eq!(row[j], bias.data()[j] + loc[j]);
        }
    }
}

#[test]
fn channel_permutation_is_equivariant() {
    let atlas = Atlas::bundled();
    let cfg = TokenizerConfig::default();
    let names = ["O1", "Cz", "Fp2"];
    let x = randn(&[3, 400], 12);
    let rec = RawRecording::from_names(&atlas, &names, x.data().to_vec(), 128.0).unwrap();
    let perm = [2usize, 0, 1];
    let pnames: Vec<&str> = perm.iter().map(|&i| names[i]).collect();
    let psamples: Vec<f64> = perm.iter().flat_map(|&i| rec.channel(i).to_vec()).collect();
    let prec = RawRecording::from_names(&atlas, &pnames, psamples, 128.0).unwrap();
    let weight = randn(&[cfg.bins(), cfg.d_e], 13);
    let bias = randn(&[cfg.d_e], 14);
    let a = tokenize(&rec, &cfg, &atlas, &weight, &bias).unwrap();
    let b = tokenize(&prec, &cfg, &atlas, &weight, &bias).unwrap();
    let per = a.n * cfg.d_e;
    for (dst, &src) in perm.iter().enumerate() {
        assert_eq!(&b.embeddings.data()[dst * per..(dst + 1) * per], &a.embeddings.data()[src * per..(src + 1) * per]);
    }
}

#[test]
fn different_montages_need_no_configuration() {
    let atlas = Atlas::bundled();
    let cfg = TokenizerConfig::default();
    let weight = randn(&[cfg.bins(), cfg.d_e], 15);
    let bias = randn(&[cfg.d_e], 16);
    for names in [&MONTAGE_14[..], &MONTAGE_19[..]] {
        let x = randn(&[names.len(), 512], names.len() as u64);
        let rec = RawRecording::from_names(&atlas, names, x.data().to_vec(), 128.0).unwrap();
        let batch = tokenize(&rec, &cfg, &atlas, &weight, &bias).unwrap();
        assert_eq!(batch.embeddings.shape(), [names.len(), 5, cfg.d_e]);
        assert!(batch.embeddings.data().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn tokenize_is_deterministic() {
    let atlas = Atlas::bundled();
    let cfg = TokenizerConfig::default();
    let x = randn(&[2, 300], 17);
    let rec = RawRecording::from_names(&atlas, &["C3", "C4"], x.data().to_vec(), 128.0).unwrap();
    let weight = randn(&[cfg.bins(), cfg.d_e], 18);
    let bias = randn(&[cfg.d_e], 19);
    let a = tokenize(&rec, &cfg, &atlas, &weight, &bias).unwrap();
    let b = tokenize(&rec, &cfg, &atlas, &weight, &bias).unwrap();
    assert_eq!(a.embeddings.data(), b.embeddings.data());
    assert_eq!(a.tokens.data(), b.tokens.data());
}

#[test]
fn unknown_channel_is_not_found() {
    let atlas = Atlas::bundled();
    assert!(matches!(
        RawRecording::from_names(&atlas, &["XX99"], vec![0.0; 10], 128.0),
        Err(Error::NotFound(_))
    ));
}
