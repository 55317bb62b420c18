#![allow(dead_code)]

use eegx::atlas::Atlas;
use eegx::model::{Bound, ModelConfig, ModelState};
use eegx::synth::{generate, ArtifactMix, SynthSpec};
use eegx::tensor::check::{gradcheck, GradCheck};
use eegx::tokenizer::TokenizerConfig;
use eegx::train::{Trainer, TrainConfig};
use eegx::{Result, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const OP_TOL: f64 = 1e-4;
pub const FULL_TOL: f64 = 1e-3;
pub const FD_STEP: f64 = 1e-5;

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Entries with magnitude in [0.5, 1.5) and random sign, away from kinks.
pub fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    randn(shape, seed).map(|x| x.signum() * (0.5 + x.abs().fract()))
}

/// `sum(v ⊙ R)` for a fixed random `R`, so every output entry gets a distinct weight.
pub fn weighted_sum<'t>(tape: &'t Tape, v: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let r = tape.constant(randn(&v.shape(), seed ^ 0xabcdef));
    Ok(v.mul(&r)?.sum())
}

fn check<F>(name: &'static str, inputs: Vec<Tensor>, out: &mut Vec<(&'static str, GradCheck)>, f: F)
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let report = gradcheck(&inputs, FD_STEP, f).unwrap_or_else(|e| panic!("{}: {}", name, e));
    out.push((name, report));
}

/// Finite-difference reports for every differentiable op.
pub fn op_gradchecks() -> Vec<(&'static str, GradCheck)> {
    let mut out = Vec::new();
    let c = &mut out;
    check("add", vec![randn(&[3, 4], 1), randn(&[3, 4], 2)], c, |t, v| {
        weighted_sum(t, v[0].add(&v[1])?, 1)
    });
    check("sub", vec![randn(&[3, 4], 3), randn(&[3, 4], 4)], c, |t, v| {
        weighted_sum(t, v[0].sub(&v[1])?, 2)
    });
    check("mul", vec![randn(&[2, 5], 5), randn(&[2, 5], 6)], c, |t, v| {
        weighted_sum(t, v[0].mul(&v[1])?, 3)
    });
    check("add_bias", vec![randn(&[2, 3, 4], 7), randn(&[4], 8)], c, |t, v| {
        weighted_sum(t, v[0].add_bias(&v[1])?, 4)
    });
    check("scale", vec![randn(&[6], 9)], c, |t, v| weighted_sum(t, v[0].scale(-1.7), 5));
    check("add_scalar", vec![randn(&[6], 10)], c, |t, v| {
        weighted_sum(t, v[0].add_scalar(0.3), 6)
    });
    check("matmul", vec![randn(&[3, 4], 11), randn(&[4, 2], 12)], c, |t, v| {
        weighted_sum(t, v[0].matmul(&v[1])?, 7)
    });
    check("transpose", vec![randn(&[3, 5], 13)], c, |t, v| {
        weighted_sum(t, v[0].transpose()?, 8)
    });
    check("reshape", vec![randn(&[2, 6], 14)], c, |t, v| {
        weighted_sum(t, v[0].reshape(&[3, 2, 2])?, 9)
    });
    check("concat", vec![randn(&[2, 3], 15), randn(&[2, 2], 16)], c, |t, v| {
        let a = Var::concat(&[v[0], v[1]], 1)?;
        let b = Var::concat(&[a, a], 0)?;
        weighted_sum(t, b, 10)
    });
    check("slice", vec![randn(&[3, 6], 17)], c, |t, v| {
        weighted_sum(t, v[0].slice(1, 2, 3)?, 11)
    });
    check("index_rows", vec![randn(&[4, 3], 18)], c, |t, v| {
        weighted_sum(t, v[0].index_rows(&[3, 0, 3, 1])?, 12)
    });
    check("scatter_rows", vec![randn(&[2, 3], 19)], c, |t, v| {
        weighted_sum(t, v[0].scatter_rows(&[4, 1], 5)?, 13)
    });
    check("sum", vec![randn(&[3, 3], 20)], c, |_, v| Ok(v[0].mul(&v[0])?.sum()));
    check("mean", vec![randn(&[3, 3], 21)], c, |_, v| Ok(v[0].mul(&v[0])?.mean()));
    check("sum_axis", vec![randn(&[3, 4], 22)], c, |t, v| {
        let a = weighted_sum(t, v[0].sum_axis(0)?, 14)?;
        let b = weighted_sum(t, v[0].sum_axis(1)?, 15)?;
        a.add(&b)
    });
    check("mean_axis", vec![randn(&[3, 4], 23)], c, |t, v| {
        let a = weighted_sum(t, v[0].mean_axis(0)?, 16)?;
        let b = weighted_sum(t, v[0].mean_axis(1)?, 17)?;
        a.add(&b)
    });
    check("variance_rows", vec![randn(&[5, 3], 24)], c, |t, v| {
        weighted_sum(t, v[0].variance_rows()?, 18)
    });
    check("softmax", vec![randn(&[3, 5], 25)], c, |t, v| weighted_sum(t, v[0].softmax(), 19));
    check(
        "layer_norm",
        vec![randn(&[3, 6], 26), randn(&[6], 27), randn(&[6], 28)],
        c,
        |t, v| weighted_sum(t, v[0].layer_norm(&v[1], &v[2])?, 20),
    );
    check("gelu", vec![randn(&[10], 29)], c, |t, v| weighted_sum(t, v[0].gelu(), 21));
    check("relu", vec![away_from_zero(&[10], 30)], c, |t, v| weighted_sum(t, v[0].relu(), 22));
    check("sqrt", vec![away_from_zero(&[8], 31).map(f64::abs)], c, |t, v| {
        weighted_sum(t, v[0].sqrt(), 23)
    });
    check("squared_l2", vec![randn(&[7], 32)], c, |_, v| Ok(v[0].squared_l2()));
    check("max_axis", vec![randn(&[4, 5], 33)], c, |t, v| {
        let (a, _) = v[0].max_axis(0)?;
        let (b, _) = v[0].max_axis(1)?;
        weighted_sum(t, a, 24)?.add(&weighted_sum(t, b, 25)?)
    });
    check(
        "conv1d",
        vec![randn(&[2, 4, 11], 34), randn(&[6, 2, 3], 35), randn(&[6], 36)],
        c,
        |t, v| weighted_sum(t, v[0].conv1d(&v[1], Some(&v[2]), 2, 1, 2, 2)?, 26),
    );
    check(
        "conv1d_transpose",
        vec![randn(&[2, 3, 5], 37), randn(&[3, 2, 4], 38), randn(&[2], 39)],
        c,
        |t, v| weighted_sum(t, v[0].conv1d_transpose(&v[1], Some(&v[2]), 2, 1, 2)?, 27),
    );
    check("overlap_add", vec![randn(&[2, 3, 8], 40)], c, |t, v| {
        weighted_sum(t, v[0].overlap_add(6, 20)?, 28)
    });
    out
}

/// Toy configuration for full-pass checks: 2 channels, 3 tokens.
pub fn toy_train_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.model = ModelConfig {
        tokenizer: TokenizerConfig {
            window: 32,
            overlap: 8,
            d_e: 8,
        },
        heads: 2,
        ffn_mult: 2,
        dropout: 0.0,
        encoder_layers: 1,
        predictor_layers: 1,
        decoder_layers: 1,
        ..ModelConfig::default()
    };
    cfg.dict.groups = 2;
    cfg.dict.kernels = 4;
    cfg.batch_size = 2;
    cfg
}

/// Finite differences of the full pretraining loss (all three terms, DiCT
/// reconstruction) with respect to every student parameter.
pub fn full_pass_gradcheck() -> GradCheck {
    let atlas = Atlas::bundled();
    let cfg = toy_train_config();
    let mut spec = SynthSpec::default().with_montage(&["O1", "O2"]);
    spec.sample_rate = 32.0;
    spec.duration = 2.25;
    spec.artifacts = ArtifactMix::none();
    let data = generate(&spec, &atlas, 2).expect("toy data");
    let len = data[0].noisy.len();
    let trainer = Trainer::new(&cfg, &atlas, len).expect("trainer");
    let mut state = ModelState::new(cfg.model.clone(), &atlas, 3).expect("state");
    // Move the teacher away from the student so the alignment term is non-trivial.
    state.params_mut().tensors_mut().iter_mut().for_each(|t| {
        let noise = randn(t.shape(), t.numel() as u64);
        t.data_mut().iter_mut().zip(noise.data()).for_each(|(x, n)| *x += 0.05 * n);
    });
    let samples: Vec<_> = data.iter().map(|r| trainer.sample(&state, r).expect("sample")).collect();
    assert_eq!(samples[0].prep.tokens, 3);
    let refs: Vec<_> = samples.iter().collect();
    let params = state.params().clone();
    gradcheck(params.tensors(), FD_STEP, |tape, vars| {
        let p = Bound::from_vars(&params, vars)?;
        Ok(trainer.batch_losses(&state, tape, &p, &refs, &[11, 12], &mut None)?.total)
    })
    .expect("full pass gradcheck")
}

/// Minimal covering tokenization by enumeration: keep adding windows until one
/// reaches the end of the signal.
pub fn oracle_tokens(x: &[f64], w: usize, o: usize) -> Vec<Vec<f64>> {
    let hop = w - o;
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        let tok: Vec<f64> = (start..start + w).map(|t| x.get(t).copied().unwrap_or(0.0)).collect();
        out.push(tok);
        if start + w >= x.len() {
            return out;
        }
        start += hop;
    }
}

/// Runs `segment` over a 200-case (L, w, o) grid and returns the failing cases.
pub fn tokenizer_grid() -> (usize, Vec<String>) {
    use eegx::atlas::ElectrodePosition;
    use eegx::signal::RawRecording;
    use eegx::tokenizer::segment;
    let lens = [1, 5, 17, 32, 64, 100, 128, 129, 255, 256];
    let mut cases = 0;
    let mut failures = Vec::new();
    for &l in &lens {
        for &w in &[4usize, 8, 16, 32, 128] {
            for o in [0, 1, w / 4 + 1, w - 1] {
                cases += 1;
                let x: Vec<f64> = (0..l).map(|t| t as f64 + 1.0).collect();
                let mut samples = x.clone();
                samples.extend(x.iter().map(|v| -v));
                let chans = vec![ElectrodePosition::new("A", 0.0, 0.0), ElectrodePosition::new("B", 0.1, 0.0)];
                let rec = RawRecording::new(chans, samples, 128.0).unwrap();
                let got = segment(&rec, w, o).unwrap();
                let want = oracle_tokens(&x, w, o);
                let n = want.len();
                let ok = got.shape() == [2, n, w]
                    && (0..n).all(|i| {
                        let a = &got.data()[i * w..(i + 1) * w];
                        let b = &got.data()[(n + i) * w..(n + i + 1) * w];
                        a == want[i].as_slice() && b.iter().zip(&want[i]).all(|(p, q)| *p == -q)
                    })
                    && (1..n).all(|i| want[i - 1][w - o..] == want[i][..o]);
                if !ok {
                    failures.push(format!("L={} w={} o={} shape={:?} expected n={}", l, w, o, got.shape(), n));
                }
            }
        }
    }
    (cases, failures)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(x: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..x.len()).collect();
        idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
        let mut r = vec![0.0; x.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

pub fn embedding_dot(atlas: &Atlas, a: &str, b: &str, d_e: usize) -> f64 {
    use eegx::tokenizer::position_embedding;
    let pa = position_embedding(atlas, atlas.lookup(a).unwrap(), d_e).unwrap();
    let pb = position_embedding(atlas, atlas.lookup(b).unwrap(), d_e).unwrap();
    pa.iter().zip(&pb).map(|(x, y)| x * y).sum()
}

pub fn locality_spot_checks(atlas: &Atlas, d_e: usize) -> bool {
    let f2 = embedding_dot(atlas, "F4", "F2", d_e);
    let f6 = embedding_dot(atlas, "F4", "F6", d_e);
    let p7 = embedding_dot(atlas, "F4", "P7", d_e);
    f2 > p7 && f6 > p7
}

/// Spearman between pairwise scaled-coordinate distance and embedding dot
/// product over all atlas pairs.
pub fn locality_spearman(atlas: &Atlas, d_e: usize) -> f64 {
    use eegx::tokenizer::position_embedding;
    let pos = atlas.positions();
    let emb: Vec<Vec<f64>> = pos.iter().map(|p| position_embedding(atlas, p, d_e).unwrap()).collect();
    let coords: Vec<(f64, f64)> = pos.iter().map(|p| atlas.scaled(p)).collect();
    let (mut dist, mut sim) = (Vec::new(), Vec::new());
    for i in 0..pos.len() {
        for j in i + 1..pos.len() {
            let (a, b) = (coords[i], coords[j]);
            dist.push(((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt());
            sim.push(emb[i].iter().zip(&emb[j]).map(|(x, y)| x * y).sum());
        }
    }
    spearman(&dist, &sim)
}

/// Embedding width at which the statistical locality property is checked.
pub const LOCALITY_DIM: usize = 256;

/// Dictionary seeds `0..20` for which all three orderings hold.
pub fn a1_passing_seeds() -> Vec<u64> {
    use eegx::dict::{a1_experiment, A1Config};
    let cfg = A1Config::default();
    (0..20).filter(|&s| a1_experiment(&cfg, s).unwrap().all_hold()).collect()
}

/// Largest deviation, relative to `max(1, |expected|)`, between the teacher
/// after `steps` EMA updates toward a fixed student and the closed form
/// `tau^T·q + (1 − tau^T)·p`.
pub fn ema_closed_form_error(steps: i32) -> f64 {
    let atlas = Atlas::bundled();
    let tau = 0.9;
    let mut state = ModelState::new(toy_train_config().model, &atlas, 5).unwrap();
    let q: Vec<Tensor> = state.teacher().tensors().to_vec();
    state.params_mut().tensors_mut().iter_mut().enumerate().for_each(|(i, t)| {
        *t = randn(t.shape(), 1000 + i as u64);
    });
    let pairs: Vec<(usize, usize)> = state.teacher_pairs().collect();
    for _ in 0..steps {
        state.ema_update(tau);
    }
    let decay = f64::powi(tau, steps);
    let mut worst = 0.0f64;
    for (ti, si) in pairs {
        let p = &state.params().tensors()[si];
        for ((got, q), p) in state.teacher().tensors()[ti].data().iter().zip(q[ti].data()).zip(p.data()) {
            let want = decay * q + (1.0 - decay) * p;
            worst = worst.max((got - want).abs() / want.abs().max(1.0));
        }
    }
    worst
}

/// Training settings used for the representation experiments: small batches,
/// a higher learning rate and a 4-group dictionary keep a run within minutes.
pub fn test_scale_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.seed = seed;
    cfg.batch_size = 8;
    cfg.lr = 2e-3;
    cfg.epochs = 30;
    cfg.patience = 20;
    cfg.dict.groups = 4;
    cfg
}

/// Balanced accuracy of a linear probe on frozen mean-pooled representations
/// of the noisy recordings.
pub fn probe_bacc(
    state: &ModelState,
    train: &[eegx::synth::LabeledRecording],
    test: &[eegx::synth::LabeledRecording],
    atlas: &Atlas,
) -> f64 {
    use eegx::probe::{probe, ProbeConfig};
    use eegx::train::embed_all;
    let tr: Vec<_> = train.iter().map(|r| &r.noisy).collect();
    let te: Vec<_> = test.iter().map(|r| &r.noisy).collect();
    let a = embed_all(state, &tr, atlas).unwrap();
    let b = embed_all(state, &te, atlas).unwrap();
    let ya: Vec<_> = train.iter().map(|r| r.label).collect();
    let yb: Vec<_> = test.iter().map(|r| r.label).collect();
    probe(&a, &ya, &b, &yb, &ProbeConfig::default()).unwrap().balanced_accuracy
}

/// 600 8-channel recordings split 500 / 100.
pub fn probe_task(seed: u64, atlas: &Atlas) -> (Vec<eegx::synth::LabeledRecording>, Vec<eegx::synth::LabeledRecording>) {
    let mut spec = SynthSpec::default();
    spec.seed = seed;
    let data = generate(&spec, atlas, 600).unwrap();
    eegx::synth::split(&data, 500.0 / 600.0, seed).unwrap()
}

/// `(pretrained, random-init)` balanced accuracy; pretraining uses the
/// training split only.
pub fn pretraining_benefit(seed: u64) -> (f64, f64) {
    use eegx::train::{pretrain, PretrainOptions};
    let atlas = Atlas::bundled();
    let (train, test) = probe_task(seed, &atlas);
    let cfg = test_scale_config(seed);
    let (state, _) = pretrain(&train, &cfg, &atlas, &PretrainOptions::default()).unwrap();
    let random = ModelState::new(cfg.model.clone(), &atlas, seed + 100).unwrap();
    (probe_bacc(&state, &train, &test, &atlas), probe_bacc(&random, &train, &test, &atlas))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Full,
    NoChannelEmbedding,
    IdentityDenoiser,
}

/// Pretrains a variant on 200 19-channel recordings and probes it on the
/// 8-channel task.
pub fn ablation(seed: u64, variant: Variant) -> f64 {
    use eegx::denoise::DenoiserSpec;
    use eegx::model::ChannelEmbedding;
    use eegx::synth::MONTAGE_19;
    use eegx::train::{pretrain, PretrainOptions};
    let atlas = Atlas::bundled();
    let mut pre_spec = SynthSpec::default().with_montage(&MONTAGE_19);
    pre_spec.seed = seed * 2 + 1000;
    let pre = generate(&pre_spec, &atlas, 200).unwrap();
    let (train, test) = probe_task(seed, &atlas);
    let mut cfg = test_scale_config(seed);
    match variant {
        Variant::Full => {}
        Variant::NoChannelEmbedding => cfg.model.channel_embedding = ChannelEmbedding::None,
        Variant::IdentityDenoiser => cfg.denoiser = DenoiserSpec::Identity,
    }
    let (state, _) = pretrain(&pre, &cfg, &atlas, &PretrainOptions::default()).unwrap();
    probe_bacc(&state, &train, &test, &atlas)
}

pub fn median3(mut v: [f64; 3]) -> f64 {
    v.sort_by(f64::total_cmp);
    v[1]
}

/// Five epochs on 40 recordings; returns the logged step count and the largest
/// relative gap between `l_total` and the sum of its terms.
pub fn additivity_run() -> (usize, f64) {
    use eegx::train::{pretrain, PretrainOptions};
    let atlas = Atlas::bundled();
    let data = generate(&SynthSpec::default(), &atlas, 40).unwrap();
    let mut cfg = test_scale_config(1);
    cfg.epochs = 5;
    let (_, hist) = pretrain(&data, &cfg, &atlas, &PretrainOptions::default()).unwrap();
    let records = hist.steps.iter().chain(&hist.epochs).chain(&hist.validation);
    let mut worst = 0.0f64;
    let mut n = 0;
    for r in records {
        let sum = r.l_rec + r.l_align + r.l_reg;
        worst = worst.max((r.l_total - sum).abs() / r.l_total.abs().max(1e-300));
        n += 1;
    }
    (n, worst)
}

/// The closed-form alignment and regularizer examples, each with its verdict.
pub fn loss_examples() -> Vec<(&'static str, bool)> {
    use eegx::train::{align_loss, reg_loss};
    let tape = Tape::new();
    let c = |shape: &[usize], v: &[f64]| tape.constant(Tensor::new(shape.to_vec(), v.to_vec()).unwrap());
    let y = c(&[2, 3], &[0.1, 0.2, 0.3, -1.0, 2.0, 0.5]);
    let single = align_loss(c(&[1, 2], &[1.0, 0.0]), &c(&[1, 2], &[0.0, 0.0])).unwrap().item();
    let pred = c(&[2, 2], &[1.0, 0.0, 0.5, 0.5]);
    let targ = c(&[2, 2], &[0.0, 0.0, 0.0, 1.0]);
    let once = align_loss(pred, &targ).unwrap().item();
    let twice = align_loss(
        c(&[4, 2], &[1.0, 0.0, 0.5, 0.5, 1.0, 0.0, 0.5, 0.5]),
        &c(&[4, 2], &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]),
    )
    .unwrap()
    .item();
    let collapsed = reg_loss(c(&[4, 3], &[0.7, -0.2, 1.5].repeat(4))).unwrap().item();
    // five rows, two centered columns with squared norm 4 = n - 1 and zero dot product
    let white = [1.0, 1.0, -1.0, 1.0, 1.0, -1.0, -1.0, -1.0, 0.0, 0.0];
    let whitened = reg_loss(c(&[5, 2], &white)).unwrap().item();
    let z = randn(&[6, 4], 77);
    let zp: Vec<f64> = [3usize, 0, 5, 1, 4, 2].iter().flat_map(|&r| z.row(r).to_vec()).collect();
    let a = reg_loss(tape.constant(z.clone())).unwrap().item();
    let b = reg_loss(c(&[6, 4], &zp)).unwrap().item();
    vec![
        ("align(Y, Y) = 0", align_loss(y, &y).unwrap().item() == 0.0),
        ("align((1,0), (0,0)) = 1", single == 1.0),
        ("align unchanged by duplicated pairs", once == twice),
        ("align on empty set errors", align_loss(c(&[0, 2], &[]), &c(&[0, 2], &[])).is_err()),
        ("reg of identical vectors = 1", collapsed == 1.0),
        ("reg of whitened batch = 0", whitened == 0.0),
        ("reg invariant to batch order", (a - b).abs() <= 1e-15 * a.abs()),
        ("reg of batch of 1 errors", reg_loss(c(&[1, 3], &[1.0, 2.0, 3.0])).is_err()),
    ]
}
