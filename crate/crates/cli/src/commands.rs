use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use eegx::atlas::Atlas;
use eegx::denoise::DenoiserSpec;
use eegx::dict::{a1_experiment, A1Config, A1_LABELS};
use eegx::model::{ChannelEmbedding, ModelConfig, ModelState};
use eegx::probe::{probe, ProbeConfig, ProbeReport};
use eegx::signal::RawRecording;
use eegx::synth::{self, ArtifactMix, LabeledRecording, SynthSpec, MONTAGE_14, MONTAGE_19, MONTAGE_8};
use eegx::tokenizer::{position_embedding, tokenize, TokenizerConfig};
use eegx::train::{embed_all, pretrain, LossRecord, PretrainOptions, TrainConfig, TrainHistory};

use crate::{AblateArgs, AtlasArgs, Cli, Command, DictDemoArgs, EmbedArgs, ModelSource, Montage, PretrainArgs, ProbeArgs, SynthArgs, TokenizeArgs};

#[derive(Debug)]
pub enum CliError {
    Core(eegx::Error),
    Missing(PathBuf),
    Io(PathBuf, std::io::Error),
    Usage(String),
}

impl From<eegx::Error> for CliError {
    fn from(e: eegx::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    /// One line: `error kind=<kind> [path="..."] message="..."`.
    pub fn line(&self) -> String {
        use eegx::Error as E;
        let (kind, path, msg) = match self {
            CliError::Missing(p) => ("io", Some(p.clone()), "no such file or directory".to_string()),
            CliError::Io(p, e) => ("io", Some(p.clone()), e.to_string()),
            CliError::Usage(m) => ("usage", None, m.clone()),
            CliError::Core(e) => {
                let kind = match e {
                    E::Shape { .. } => "shape",
                    E::Config(_) => "config",
                    E::Parse { .. } => "parse",
                    E::Validation(_) => "validation",
                    E::NotFound(_) => "not_found",
                    E::Io { .. } => "io",
                    E::Format(_) => "format",
                    E::NonFinite { .. } => "non_finite",
                };
                let path = match e {
                    E::Io { path, .. } => Some(path.clone()),
                    _ => None,
                };
                (kind, path, e.to_string())
            }
        };
        match path {
            Some(p) => format!("error kind={} path={:?} message={:?}", kind, p.display().to_string(), msg),
            None => format!("error kind={} message={:?}", kind, msg),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Missing(path.to_path_buf()))
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::Io(path.to_path_buf(), e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::Io(parent.to_path_buf(), e))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::Io(path.to_path_buf(), e))
}

fn parse_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    toml::from_str(&text).map_err(|e| CliError::Core(eegx::Error::Config(format!("{}: {}", path.display(), e))))
}

fn load_atlas(cli: &Cli) -> Result<Atlas> {
    match &cli.atlas {
        Some(p) => {
            require(p)?;
            Ok(Atlas::load(p)?)
        }
        None => Ok(Atlas::bundled()),
    }
}

fn load_train_config(path: &Path, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::from_toml(&read_text(path)?)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Atlas(a) => atlas(cli, a),
        Command::Synth(a) => synth(cli, a),
        Command::Tokenize(a) => tokenize_cmd(cli, a),
        Command::DictDemo(a) => dict_demo(cli, a),
        Command::Pretrain(a) => pretrain_cmd(cli, a),
        Command::Embed(a) => embed(cli, a),
        Command::Probe(a) => probe_cmd(cli, a),
        Command::Ablate(a) => ablate(cli, a),
    }
}

fn atlas(cli: &Cli, args: &AtlasArgs) -> Result<()> {
    let atlas = load_atlas(cli)?;
    let d = args.d_e;
    let emb: Vec<Vec<f64>> = atlas
        .positions()
        .iter()
        .map(|p| position_embedding(&atlas, p, d))
        .collect::<eegx::Result<_>>()?;
    println!("positions,{}", atlas.len());
    println!("coordinate_scale,{}", atlas.coordinate_scale());
    let dot = |a: &str, b: &str| -> Result<f64> {
        let (i, j) = (atlas.index_of(a)?, atlas.index_of(b)?);
        Ok(emb[i].iter().zip(&emb[j]).map(|(x, y)| x * y).sum())
    };
    if ["F4", "F2", "F6", "P7"].iter().all(|n| atlas.lookup(n).is_ok()) {
        for other in ["F2", "F6", "P7"] {
            println!("dot_F4_{},{}", other, dot("F4", other)?);
        }
    }
    if let Some(path) = &args.positions_out {
        let mut out = String::from("name,u,v,scaled_u,scaled_v\n");
        for p in atlas.positions() {
            let (su, sv) = atlas.scaled(p);
            writeln!(out, "{},{},{},{},{}", p.name, p.u, p.v, su, sv).unwrap();
        }
        write_text(path, &out)?;
    }
    if let Some(path) = &args.similarity_out {
        let mut out = String::from("name");
        for p in atlas.positions() {
            write!(out, ",{}", p.name).unwrap();
        }
        out.push('\n');
        for (i, p) in atlas.positions().iter().enumerate() {
            out.push_str(&p.name);
            for e in &emb {
                let s: f64 = emb[i].iter().zip(e).map(|(x, y)| x * y).sum();
                write!(out, ",{}", s).unwrap();
            }
            out.push('\n');
        }
        write_text(path, &out)?;
    }
    Ok(())
}

fn montage_names(m: Montage) -> &'static [&'static str] {
    match m {
        Montage::M8 => &MONTAGE_8,
        Montage::M14 => &MONTAGE_14,
        Montage::M19 => &MONTAGE_19,
    }
}

fn synth(cli: &Cli, args: &SynthArgs) -> Result<()> {
    let atlas = load_atlas(cli)?;
    let mut spec = match &args.spec {
        Some(p) => {
            require(p)?;
            parse_toml::<SynthSpec>(p)?
        }
        None => SynthSpec::default().with_montage(montage_names(args.montage)),
    };
    if let Some(s) = cli.seed {
        spec.seed = s;
    }
    if let Some(d) = args.duration {
        spec.duration = d;
    }
    if args.no_artifacts {
        spec.artifacts = ArtifactMix::none();
    }
    let data = synth::generate(&spec, &atlas, args.count)?;
    synth::write_dataset(&args.out, &data)?;
    let spec_text = toml::to_string(&spec).map_err(|e| eegx::Error::Format(e.to_string()))?;
    write_text(&args.out.join("spec.toml"), &spec_text)?;
    println!("recordings,{}", data.len());
    println!("channels,{}", spec.montage.len());
    println!("samples,{}", data.first().map_or(0, |r| r.clean.len()));
    Ok(())
}

fn tokenize_cmd(cli: &Cli, args: &TokenizeArgs) -> Result<()> {
    require(&args.input)?;
    if let Some(p) = &args.checkpoint {
        require(p)?;
    }
    let atlas = load_atlas(cli)?;
    let rec = RawRecording::read_binary(&args.input, &atlas)?;
    let state = match &args.checkpoint {
        Some(p) => ModelState::load(p, &atlas)?,
        None => {
            let mut config = ModelConfig::default();
            config.tokenizer = TokenizerConfig {
                window: args.window,
                overlap: args.overlap,
                d_e: args.d_e,
            };
            config.heads = 1;
            ModelState::new(config, &atlas, cli.seed.unwrap_or(0))?
        }
    };
    let cfg = state.config().tokenizer.clone();
    let weight = state.params().get("embed.w").expect("model has an embedding");
    let bias = state.params().get("embed.b").expect("model has an embedding");
    let batch = tokenize(&rec, &cfg, &atlas, weight, bias)?;
    let e = batch.embeddings.data();
    let mean = e.iter().sum::<f64>() / e.len() as f64;
    let var = e.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / e.len() as f64;
    println!("channels,{}", rec.num_channels());
    println!("samples,{}", rec.len());
    println!("window,{}", batch.window);
    println!("overlap,{}", batch.overlap);
    println!("tokens_per_channel,{}", batch.n);
    println!("d_e,{}", cfg.d_e);
    println!("embedding_mean,{}", mean);
    println!("embedding_std,{}", var.sqrt());
    Ok(())
}

fn dict_demo(cli: &Cli, args: &DictDemoArgs) -> Result<()> {
    let config = match &args.config {
        Some(p) => {
            require(p)?;
            parse_toml::<A1Config>(p)?
        }
        None => A1Config::default(),
    };
    let seed = cli.seed.unwrap_or(0);
    let report = a1_experiment(&config, seed)?;
    let mut table = String::from("recon,label,direct_mse,dict_mse\n");
    for i in 0..3 {
        writeln!(table, "{},{},{},{}", i + 1, A1_LABELS[i], report.direct[i], report.dict[i]).unwrap();
    }
    let verdicts = format!(
        "check,holds\ndirect_increasing,{}\ndict_low_freq_worst,{}\ndict_phase_robust,{}\n",
        report.direct_ordered(),
        report.dict_low_worst(),
        report.phase_robust()
    );
    print!("{}", table);
    print!("{}", verdicts);
    if let Some(dir) = &args.out {
        write_text(&dir.join("report.csv"), &table)?;
        write_text(&dir.join("verdicts.csv"), &verdicts)?;
        let sig = config.signals();
        let mut dump = String::from("t,source,recon1,recon2,recon3\n");
        for (i, s) in sig.source.iter().enumerate() {
            let r = &sig.reconstructions;
            writeln!(dump, "{},{},{},{},{}", i as f64 / config.sample_rate, s, r[0][i], r[1][i], r[2][i]).unwrap();
        }
        write_text(&dir.join("signals.csv"), &dump)?;
    }
    Ok(())
}

fn records_csv(records: &[LossRecord]) -> String {
    let mut out = String::from("epoch,step,l_rec,l_align,l_reg,l_total\n");
    for r in records {
        writeln!(out, "{},{},{},{},{},{}", r.epoch, r.step, r.l_rec, r.l_align, r.l_reg, r.l_total).unwrap();
    }
    out
}

fn write_history(dir: &Path, h: &TrainHistory) -> Result<()> {
    write_text(&dir.join("epochs.csv"), &h.epochs_csv())?;
    write_text(&dir.join("steps.csv"), &records_csv(&h.steps))?;
    write_text(&dir.join("validation.csv"), &records_csv(&h.validation))
}

fn pretrain_cmd(cli: &Cli, args: &PretrainArgs) -> Result<()> {
    require(&args.config)?;
    let data_dir = match &args.data {
        Some(d) => {
            require(d)?;
            Some(d.clone())
        }
        None if args.dry_run => None,
        None => return Err(CliError::Usage("--data is required unless --dry-run is given".into())),
    };
    let cfg = load_train_config(&args.config, cli.seed)?;
    let atlas = load_atlas(cli)?;
    let data = match &data_dir {
        Some(d) => synth::read_dataset(d, &atlas)?,
        None => {
            let mut spec = SynthSpec::default();
            spec.seed = cfg.seed;
            synth::generate(&spec, &atlas, 2 * cfg.batch_size.max(2))?
        }
    };
    let opts = PretrainOptions {
        checkpoint_dir: args.out.clone(),
        max_steps: args.dry_run.then_some(1),
    };
    let (state, history) = pretrain(&data, &cfg, &atlas, &opts)?;
    if let Some(dir) = &args.out {
        write_history(dir, &history)?;
        write_text(&dir.join("config.toml"), &cfg.to_toml())?;
    }
    println!("steps,{}", state.step());
    println!("epochs,{}", history.epochs.len());
    println!("best_epoch,{}", history.best_epoch);
    println!("stopped_early,{}", history.stopped_early);
    if let Some(last) = history.epochs.last() {
        println!("final_l_total,{}", last.l_total);
    }
    Ok(())
}

fn load_model(cli: &Cli, src: &ModelSource, atlas: &Atlas) -> Result<ModelState> {
    match (&src.checkpoint, src.untrained) {
        (Some(p), _) => {
            require(p)?;
            Ok(ModelState::load(p, atlas)?)
        }
        (None, true) => {
            let model = match &src.config {
                Some(p) => {
                    require(p)?;
                    load_train_config(p, None)?.model
                }
                None => ModelConfig::default(),
            };
            Ok(ModelState::new(model, atlas, cli.seed.unwrap_or(0))?)
        }
        (None, false) => Err(CliError::Usage("one of --checkpoint or --untrained is required".into())),
    }
}

fn representations(state: &ModelState, data: &[LabeledRecording], atlas: &Atlas) -> Result<Vec<Vec<f64>>> {
    let recs: Vec<&RawRecording> = data.iter().map(|r| &r.noisy).collect();
    Ok(embed_all(state, &recs, atlas)?)
}

fn embed(cli: &Cli, args: &EmbedArgs) -> Result<()> {
    require(&args.data)?;
    let atlas = load_atlas(cli)?;
    let state = load_model(cli, &args.model, &atlas)?;
    let data = synth::read_dataset(&args.data, &atlas)?;
    let reps = representations(&state, &data, &atlas)?;
    let d = reps.first().map_or(0, |r| r.len());
    let mut out = String::from("index,label");
    for j in 0..d {
        write!(out, ",e{}", j).unwrap();
    }
    out.push('\n');
    for (i, (r, rec)) in reps.iter().zip(&data).enumerate() {
        write!(out, "{},{}", i, rec.label).unwrap();
        for v in r {
            write!(out, ",{}", v).unwrap();
        }
        out.push('\n');
    }
    write_text(&args.out, &out)?;
    println!("recordings,{}", reps.len());
    println!("dims,{}", d);
    Ok(())
}

fn split_probe(state: &ModelState, data: &[LabeledRecording], train_frac: f64, seed: u64, atlas: &Atlas) -> Result<ProbeReport> {
    let (train, test) = synth::split(data, train_frac, seed)?;
    let a = representations(state, &train, atlas)?;
    let b = representations(state, &test, atlas)?;
    let ya: Vec<usize> = train.iter().map(|r| r.label).collect();
    let yb: Vec<usize> = test.iter().map(|r| r.label).collect();
    Ok(probe(&a, &ya, &b, &yb, &ProbeConfig::default())?)
}

fn metrics_csv(r: &ProbeReport) -> String {
    let mut out = String::from("metric,value\n");
    writeln!(out, "balanced_accuracy,{}", r.balanced_accuracy).unwrap();
    writeln!(out, "weighted_f1,{}", r.weighted_f1).unwrap();
    if let Some(a) = r.auroc {
        writeln!(out, "auroc,{}", a).unwrap();
    }
    for (k, v) in r.recalls.iter().enumerate() {
        writeln!(out, "recall_{},{}", k, v).unwrap();
    }
    for (t, row) in r.confusion.iter().enumerate() {
        for (p, n) in row.iter().enumerate() {
            writeln!(out, "confusion_{}_{},{}", t, p, n).unwrap();
        }
    }
    out
}

fn probe_cmd(cli: &Cli, args: &ProbeArgs) -> Result<()> {
    require(&args.data)?;
    let atlas = load_atlas(cli)?;
    let state = load_model(cli, &args.model, &atlas)?;
    let data = synth::read_dataset(&args.data, &atlas)?;
    let report = split_probe(&state, &data, args.train_frac, cli.seed.unwrap_or(0), &atlas)?;
    let text = metrics_csv(&report);
    print!("{}", text);
    if let Some(p) = &args.out {
        write_text(p, &text)?;
    }
    Ok(())
}

fn parse_embedding(s: &str) -> Result<ChannelEmbedding> {
    match s {
        "none" => Ok(ChannelEmbedding::None),
        "learned" => Ok(ChannelEmbedding::Learned),
        "location" => Ok(ChannelEmbedding::Location),
        other => Err(CliError::Usage(format!("unknown channel embedding {:?}", other))),
    }
}

fn parse_loss(s: &str) -> Result<bool> {
    match s {
        "dict" => Ok(true),
        "direct" => Ok(false),
        other => Err(CliError::Usage(format!("unknown reconstruction loss {:?}", other))),
    }
}

fn parse_denoiser(s: &str) -> Result<DenoiserSpec> {
    match s {
        "identity" => Ok(DenoiserSpec::Identity),
        "spectral" => Ok(DenoiserSpec::spectral()),
        "oracle" => Ok(DenoiserSpec::Oracle),
        other => Err(CliError::Usage(format!("unknown denoiser {:?}", other))),
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn ablate(cli: &Cli, args: &AblateArgs) -> Result<()> {
    require(&args.pretrain_data)?;
    require(&args.probe_data)?;
    if let Some(p) = &args.config {
        require(p)?;
    }
    if args.runs == 0 {
        return Err(CliError::Usage("--runs must be at least 1".into()));
    }
    let embeddings: Vec<ChannelEmbedding> = args.channel_embedding.iter().map(|s| parse_embedding(s)).collect::<Result<_>>()?;
    let losses: Vec<bool> = args.loss.iter().map(|s| parse_loss(s)).collect::<Result<_>>()?;
    let denoisers: Vec<DenoiserSpec> = args.denoiser.iter().map(|s| parse_denoiser(s)).collect::<Result<_>>()?;
    let base = match &args.config {
        Some(p) => load_train_config(p, None)?,
        None => TrainConfig::default(),
    };
    let atlas = load_atlas(cli)?;
    let pre = synth::read_dataset(&args.pretrain_data, &atlas)?;
    let task = synth::read_dataset(&args.probe_data, &atlas)?;
    let first = cli.seed.unwrap_or(base.seed);

    let mut rows = String::from("channel_embedding,loss,denoiser,seed,balanced_accuracy,weighted_f1,auroc,epochs\n");
    let mut summary = String::from("channel_embedding,loss,denoiser,median_balanced_accuracy\n");
    for &ce in &embeddings {
        for &use_dict in &losses {
            for den in &denoisers {
                let ce_name = format!("{:?}", ce).to_lowercase();
                let loss_name = if use_dict { "dict" } else { "direct" };
                let mut accs = Vec::new();
                for seed in first..first + args.runs {
                    let mut cfg = base.clone();
                    cfg.seed = seed;
                    cfg.model.channel_embedding = ce;
                    cfg.use_dict = use_dict;
                    cfg.denoiser = den.clone();
                    cfg.validate()?;
                    log::info!("{} {} {} seed {}", ce_name, loss_name, den.name(), seed);
                    let (state, history) = pretrain(&pre, &cfg, &atlas, &PretrainOptions::default())?;
                    let r = split_probe(&state, &task, args.train_frac, seed, &atlas)?;
                    writeln!(
                        rows,
                        "{},{},{},{},{},{},{},{}",
                        ce_name,
                        loss_name,
                        den.name(),
                        seed,
                        r.balanced_accuracy,
                        r.weighted_f1,
                        r.auroc.map_or(String::new(), |a| a.to_string()),
                        history.epochs.len()
                    )
                    .unwrap();
                    accs.push(r.balanced_accuracy);
                }
                writeln!(summary, "{},{},{},{}", ce_name, loss_name, den.name(), median(accs)).unwrap();
            }
        }
    }
    write_text(&args.out, &rows)?;
    print!("{}", summary);
    Ok(())
}
