//! Subcommand bodies. Each one writes through an [`OutputSet`] and returns
//! the manifest it recorded.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use neurotok::checkpoint::Checkpoint;
use neurotok::dataset::{Dataset, Sample};
use neurotok::encoder::PatchBatch;
use neurotok::gradsuite::run_gradient_suite;
use neurotok::pretrain::{
    evaluate_masked, pooled_features, pretrain, teacher_for_samples, BackboneModel,
    LinearProbe, PretrainRow, PretrainStats,
};
use neurotok::signal::{
    bandpass, load_recording, save_recording, segment_patches, synth_generate, BandSpec, ElectrodeList,
    PatchGrid, Recording, RecordingFormat, SynthSpec,
};
use neurotok::spectral::{inverse_spectrum, SpectralTarget};
use neurotok::tokenizer::{
    eval_per_band, evaluate_samples, train_tokenizer, BandReport, CurveRow, StepLosses, TokenizerModel,
    CURVE_HEADER,
};
use neurotok::{Error, Result};

use crate::config::RunConfig;
use crate::manifest::{OutputSet, RunManifest};

pub const TOKENIZER_CKPT: &str = "tokenizer.ckpt";
pub const BACKBONE_CKPT: &str = "backbone.ckpt";
pub const TOKENS_CSV: &str = "tokens.csv";
pub const SWEEP_HEADER: &str = "levels,val_raw_mse,val_total";
pub const PROBE_HEADER: &str = "split,recordings,samples,accuracy";

const EVAL_BATCH: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub enum Command {
    SynthGen,
    TrainTokenizer,
    Tokenize { checkpoint: Option<PathBuf> },
    Reconstruct { checkpoint: Option<PathBuf>, tokens: Option<PathBuf> },
    EvalBands { checkpoint: Option<PathBuf> },
    Pretrain { tokenizer: Option<PathBuf> },
    Probe { backbone: Option<PathBuf> },
    SweepLevels,
    Gradcheck,
}

impl Command {
    pub const NAMES: [&'static str; 9] = [
        "synth-gen",
        "train-tokenizer",
        "tokenize",
        "reconstruct",
        "eval-bands",
        "pretrain",
        "probe",
        "sweep-levels",
        "gradcheck",
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Command::SynthGen => "synth-gen",
            Command::TrainTokenizer => "train-tokenizer",
            Command::Tokenize { .. } => "tokenize",
            Command::Reconstruct { .. } => "reconstruct",
            Command::EvalBands { .. } => "eval-bands",
            Command::Pretrain { .. } => "pretrain",
            Command::Probe { .. } => "probe",
            Command::SweepLevels => "sweep-levels",
            Command::Gradcheck => "gradcheck",
        }
    }

    pub fn args(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: &Option<PathBuf>| {
            if let Some(p) = v {
                m.insert(k.to_string(), p.display().to_string());
            }
        };
        match self {
            Command::Tokenize { checkpoint } | Command::EvalBands { checkpoint } => put("checkpoint", checkpoint),
            Command::Reconstruct { checkpoint, tokens } => {
                put("checkpoint", checkpoint);
                put("tokens", tokens);
            }
            Command::Pretrain { tokenizer } => put("tokenizer", tokenizer),
            Command::Probe { backbone } => put("backbone", backbone),
            _ => {}
        }
        m
    }

    /// The same command with every defaulted input path made explicit, so
    /// that a manifest re-run elsewhere reads the same files.
    pub fn with_defaults(&self, cfg: &RunConfig) -> Self {
        let fill = |p: &Option<PathBuf>, default: &str| Some(resolve_input(cfg, p.as_deref(), default));
        match self {
            Command::Tokenize { checkpoint } => Command::Tokenize {
                checkpoint: fill(checkpoint, TOKENIZER_CKPT),
            },
            Command::Reconstruct { checkpoint, tokens } => Command::Reconstruct {
                checkpoint: fill(checkpoint, TOKENIZER_CKPT),
                tokens: fill(tokens, TOKENS_CSV),
            },
            Command::EvalBands { checkpoint } => Command::EvalBands {
                checkpoint: fill(checkpoint, TOKENIZER_CKPT),
            },
            Command::Pretrain { tokenizer } => Command::Pretrain {
                tokenizer: fill(tokenizer, TOKENIZER_CKPT),
            },
            Command::Probe { backbone } => Command::Probe {
                backbone: fill(backbone, BACKBONE_CKPT),
            },
            other => other.clone(),
        }
    }

    pub fn from_parts(name: &str, args: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| args.get(k).map(PathBuf::from);
        let cmd = match name {
            "synth-gen" => Command::SynthGen,
            "train-tokenizer" => Command::TrainTokenizer,
            "tokenize" => Command::Tokenize { checkpoint: get("checkpoint") },
            "reconstruct" => Command::Reconstruct {
                checkpoint: get("checkpoint"),
                tokens: get("tokens"),
            },
            "eval-bands" => Command::EvalBands { checkpoint: get("checkpoint") },
            "pretrain" => Command::Pretrain { tokenizer: get("tokenizer") },
            "probe" => Command::Probe { backbone: get("backbone") },
            "sweep-levels" => Command::SweepLevels,
            "gradcheck" => Command::Gradcheck,
            other => return Err(Error::Config(format!("command: unknown subcommand `{other}`"))),
        };
        Ok(cmd)
    }
}

/// Runs `cmd`, writes its manifest next to the outputs and removes every
/// output on failure.
pub fn execute(cmd: &Command, cfg: &RunConfig) -> Result<RunManifest> {
    cfg.validate()?;
    let cmd = &cmd.with_defaults(cfg);
    let started = chrono::Utc::now().to_rfc3339();
    let mut out = OutputSet::new(&cfg.output_dir)?;
    let t0 = Instant::now();
    let result = match cmd {
        Command::SynthGen => synth_gen(cfg, &mut out),
        Command::TrainTokenizer => train_tokenizer_cmd(cfg, &mut out),
        Command::Tokenize { checkpoint } => tokenize_cmd(cfg, checkpoint.as_deref(), &mut out),
        Command::Reconstruct { checkpoint, tokens } => {
            reconstruct_cmd(cfg, checkpoint.as_deref(), tokens.as_deref(), &mut out)
        }
        Command::EvalBands { checkpoint } => eval_bands_cmd(cfg, checkpoint.as_deref(), &mut out),
        Command::Pretrain { tokenizer } => pretrain_cmd(cfg, tokenizer.as_deref(), &mut out),
        Command::Probe { backbone } => probe_cmd(cfg, backbone.as_deref(), &mut out),
        Command::SweepLevels => sweep_cmd(cfg, &mut out),
        Command::Gradcheck => gradcheck_cmd(cfg, &mut out),
    };
    if let Err(e) = result {
        out.discard();
        return Err(e);
    }
    log::info!("{} finished in {:.1?}", cmd.name(), t0.elapsed());
    let manifest = RunManifest {
        command: cmd.name().to_string(),
        args: cmd.args(),
        code_version: crate::manifest::CODE_VERSION.to_string(),
        seed: cfg.seed,
        started,
        finished: chrono::Utc::now().to_rfc3339(),
        config: cfg.clone(),
        outputs: out.finish(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(cfg.output_dir.join(RunManifest::file_name(cmd.name())), json)?;
    Ok(manifest)
}

fn json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("summary serializes");
    s.push('\n');
    s.into_bytes()
}

/// A named recording of the run's corpus, at `w` Hz.
pub struct NamedRecording {
    pub name: String,
    pub recording: Recording,
}

fn stem(p: &Path) -> String {
    p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned())
}

/// Low-pass before decimation; linear interpolation alone aliases.
fn to_patch_rate(rec: Recording, w: usize) -> Result<Recording> {
    let target = w as f64;
    if rec.sample_rate == target {
        return Ok(rec);
    }
    let rec = if rec.sample_rate > target {
        let band = BandSpec::new("anti-alias", 0.1, Some(0.45 * target));
        let data = rec
            .data
            .iter()
            .map(|row| bandpass(row, &band, rec.sample_rate))
            .collect::<Result<Vec<_>>>()?;
        Recording { data, ..rec }
    } else {
        rec
    };
    rec.resample_linear(target)
}

/// The recordings listed in `[data]`, or the synthetic corpus when the
/// list is empty.
pub fn load_corpus(cfg: &RunConfig) -> Result<Vec<NamedRecording>> {
    let w = cfg.model.patch_len;
    if cfg.data.recordings.is_empty() {
        return (0..cfg.synth.recordings)
            .map(|i| {
                Ok(NamedRecording {
                    name: format!("synth_{i:03}"),
                    recording: synth_generate(&cfg.synth_spec(i))?,
                })
            })
            .collect();
    }
    cfg.data
        .recordings
        .iter()
        .map(|p| {
            let rec = with_path(p, load_recording(p, RecordingFormat::from_path(p)))?;
            Ok(NamedRecording {
                name: stem(p),
                recording: to_patch_rate(rec, w)?,
            })
        })
        .collect()
}

pub fn build_dataset(cfg: &RunConfig, corpus: &[NamedRecording]) -> Result<Dataset> {
    let recs: Vec<Recording> = corpus.iter().map(|r| r.recording.clone()).collect();
    Dataset::from_recordings(&recs, None, cfg.model.patch_len, cfg.data.slots, cfg.data.val_fraction)
}

fn resolve_input(cfg: &RunConfig, given: Option<&Path>, default: &str) -> PathBuf {
    given.map_or_else(|| cfg.output_dir.join(default), Path::to_path_buf)
}

/// Names the file in I/O errors.
fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
}

pub fn load_tokenizer(path: &Path) -> Result<TokenizerModel> {
    TokenizerModel::from_checkpoint(&with_path(path, Checkpoint::load(path))?)
}

pub fn load_backbone(path: &Path) -> Result<BackboneModel> {
    BackboneModel::from_checkpoint(&with_path(path, Checkpoint::load(path))?)
}

fn check_patch_len(cfg: &RunConfig, found: usize) -> Result<()> {
    if found != cfg.model.patch_len {
        return Err(Error::Compat {
            field: "model.patch_len".into(),
            expected: cfg.model.patch_len.to_string(),
            found: found.to_string(),
        });
    }
    Ok(())
}

fn synth_gen(cfg: &RunConfig, out: &mut OutputSet) -> Result<()> {
    for i in 0..cfg.synth.recordings {
        let rec = synth_generate(&cfg.synth_spec(i))?;
        let rel = format!("synth/synth_{i:03}.csv");
        out.write_with(&rel, |path| save_recording(&rec, path, RecordingFormat::Csv))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct TokenizerSummary {
    train_samples: usize,
    val_samples: usize,
    steps: usize,
    untrained: StepLosses,
    epoch1_val: StepLosses,
    final_val: StepLosses,
    total_ratio: f64,
    raw_mse_ratio: f64,
}

/// Trains one tokenizer and returns its curves and summary.
fn fit_tokenizer(cfg: &RunConfig, data: &Dataset) -> Result<(TokenizerModel, Vec<CurveRow>, TokenizerSummary)> {
    let mut model = TokenizerModel::new(cfg.tokenizer_config(), cfg.seed)?;
    let eval_set = if data.val.is_empty() { &data.train } else { &data.val };
    let untrained = evaluate_samples(&model, eval_set, EVAL_BATCH)?;
    let outcome = train_tokenizer(&mut model, data, &cfg.train_config())?;
    let split = if data.val.is_empty() { "train" } else { "val" };
    let val: Vec<&CurveRow> = outcome.curves.iter().filter(|r| r.split == split).collect();
    let first = val.first().map_or(untrained, |r| r.losses);
    let last = val.last().map_or(untrained, |r| r.losses);
    let summary = TokenizerSummary {
        train_samples: data.train.len(),
        val_samples: data.val.len(),
        steps: outcome.state.step,
        untrained,
        epoch1_val: first,
        final_val: last,
        total_ratio: last.total / first.total,
        raw_mse_ratio: last.raw_mse / untrained.raw_mse,
    };
    Ok((model, outcome.curves, summary))
}

fn train_tokenizer_cmd(cfg: &RunConfig, out: &mut OutputSet) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    let data = build_dataset(cfg, &corpus)?;
    let (model, curves, summary) = fit_tokenizer(cfg, &data)?;
    out.write(TOKENIZER_CKPT, &model.to_checkpoint().to_bytes())?;
    out.write("tokenizer_curves.csv", CurveRow::csv(&curves).as_bytes())?;
    out.write("tokenizer_summary.json", &json(&summary))?;
    Ok(())
}

/// Windows of `slots` consecutive slots plus a shorter tail window, so that
/// every whole patch of the recording is covered.
fn windows_with_tail(grid: &PatchGrid, slots: usize) -> Vec<(usize, PatchGrid)> {
    let mut out: Vec<(usize, PatchGrid)> = grid
        .windows(slots)
        .into_iter()
        .enumerate()
        .map(|(i, g)| (i * slots, g))
        .collect();
    let total = grid.num_slots();
    let start = total / slots * slots;
    if start < total {
        let idx: Vec<usize> = (0..grid.len()).filter(|&i| grid.slot_idx[i] >= start).collect();
        let mut g = grid.select(&idx);
        for s in &mut g.slot_idx {
            *s -= start;
        }
        out.push((start, g));
    }
    out
}

fn tokens_header(branches: usize, levels: usize) -> String {
    let mut h = String::from("recording,window,channel,slot");
    for s in 0..branches {
        for l in 0..levels {
            write!(h, ",b{s}_l{l}").unwrap();
        }
    }
    h
}

fn tokenize_cmd(cfg: &RunConfig, checkpoint: Option<&Path>, out: &mut OutputSet) -> Result<()> {
    let model = load_tokenizer(&resolve_input(cfg, checkpoint, TOKENIZER_CKPT))?;
    check_patch_len(cfg, model.patch_len())?;
    let corpus = load_corpus(cfg)?;
    let electrodes = ElectrodeList::from_recordings(corpus.iter().map(|r| &r.recording));
    let (branches, levels) = (model.stacks.len(), model.cfg.rvq.levels);
    let mut csv = tokens_header(branches, levels);
    csv.push('\n');
    for rec in &corpus {
        let grid = segment_patches(&rec.recording, model.patch_len(), &electrodes)?;
        for (wi, (offset, g)) in windows_with_tail(&grid, cfg.data.slots).into_iter().enumerate() {
            let batch = PatchBatch::from_grids(&[&g])?;
            let tokens = model.tokenize(&batch)?;
            for p in 0..g.len() {
                write!(
                    csv,
                    "{},{},{},{}",
                    rec.name,
                    wi,
                    electrodes.0[g.channel_idx[p]],
                    offset + g.slot_idx[p]
                )
                .unwrap();
                for branch in &tokens {
                    for t in &branch[p] {
                        write!(csv, ",{t}").unwrap();
                    }
                }
                csv.push('\n');
            }
        }
    }
    out.write(TOKENS_CSV, csv.as_bytes())?;
    Ok(())
}

struct TokenRow {
    recording: String,
    window: usize,
    channel: String,
    slot: usize,
    /// `[branch][level]`.
    tokens: Vec<Vec<usize>>,
}

fn parse_tokens(path: &Path, branches: usize, levels: usize) -> Result<Vec<TokenRow>> {
    let text = with_path(path, std::fs::read_to_string(path).map_err(Error::from))?;
    let mut lines = text.lines().enumerate();
    let perr = |line: usize, message: String| Error::Parse {
        location: format!("{}:{}", path.display(), line + 1),
        message,
    };
    let expected = tokens_header(branches, levels);
    match lines.next() {
        Some((_, h)) if h == expected => {}
        Some((_, h)) => {
            return Err(Error::Compat {
                field: format!("{} header", path.display()),
                expected,
                found: h.to_string(),
            })
        }
        None => return Err(perr(0, "empty token file".into())),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 + branches * levels {
            return Err(perr(i, format!("{} fields, expected {}", f.len(), 4 + branches * levels)));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|e| perr(i, format!("`{s}`: {e}")));
        let mut tokens = Vec::with_capacity(branches);
        for s in 0..branches {
            tokens.push(
                (0..levels)
                    .map(|l| num(f[4 + s * levels + l]))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        rows.push(TokenRow {
            recording: f[0].to_string(),
            window: num(f[1])?,
            channel: f[2].to_string(),
            slot: num(f[3])?,
            tokens,
        });
    }
    Ok(rows)
}

fn reconstruct_cmd(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    tokens: Option<&Path>,
    out: &mut OutputSet,
) -> Result<()> {
    let model = load_tokenizer(&resolve_input(cfg, checkpoint, TOKENIZER_CKPT))?;
    let w = model.patch_len();
    let (branches, levels) = (model.stacks.len(), model.cfg.rvq.levels);
    let rows = parse_tokens(&resolve_input(cfg, tokens, TOKENS_CSV), branches, levels)?;
    // Group consecutive rows by recording, then by window.
    let mut i = 0;
    while i < rows.len() {
        let name = rows[i].recording.clone();
        let mut j = i;
        while j < rows.len() && rows[j].recording == name {
            j += 1;
        }
        let rec_rows = &rows[i..j];
        let mut channels: Vec<String> = Vec::new();
        let mut slots = 0;
        for r in rec_rows {
            if !channels.contains(&r.channel) {
                channels.push(r.channel.clone());
            }
            slots = slots.max(r.slot + 1);
        }
        let mut data = vec![vec![0.0; slots * w]; channels.len()];
        let mut a = 0;
        while a < rec_rows.len() {
            let mut b = a;
            while b < rec_rows.len() && rec_rows[b].window == rec_rows[a].window {
                b += 1;
            }
            let win = &rec_rows[a..b];
            let tok: Vec<Vec<Vec<usize>>> = (0..branches)
                .map(|s| win.iter().map(|r| r.tokens[s].clone()).collect())
                .collect();
            for (r, p) in win.iter().zip(model.detokenize(&tok, 1)?) {
                let x = inverse_spectrum(&SpectralTarget {
                    log_amp: p.log_amp_hat,
                    sin_phase: p.sin_hat,
                    cos_phase: p.cos_hat,
                    patch_len: w,
                });
                let c = channels.iter().position(|c| *c == r.channel).unwrap();
                data[c][r.slot * w..(r.slot + 1) * w].copy_from_slice(&x);
            }
            a = b;
        }
        let rec = Recording::new(w as f64, channels, data)?;
        let rel = format!("recon/{name}.csv");
        out.write_with(&rel, |path| save_recording(&rec, path, RecordingFormat::Csv))?;
        i = j;
    }
    Ok(())
}

fn eval_bands_cmd(cfg: &RunConfig, checkpoint: Option<&Path>, out: &mut OutputSet) -> Result<()> {
    let model = load_tokenizer(&resolve_input(cfg, checkpoint, TOKENIZER_CKPT))?;
    check_patch_len(cfg, model.patch_len())?;
    let corpus = load_corpus(cfg)?;
    let data = build_dataset(cfg, &corpus)?;
    let bands = BandSpec::eeg_bands();
    let mut reports = vec![eval_per_band(&model, &data.train, &bands, "train", EVAL_BATCH)?];
    if !data.val.is_empty() {
        reports.push(eval_per_band(&model, &data.val, &bands, "val", EVAL_BATCH)?);
    }
    out.write("bands.csv", BandReport::csv(&reports).as_bytes())?;
    Ok(())
}

#[derive(Serialize)]
struct PretrainSummary {
    train_samples: usize,
    val_samples: usize,
    chance: f64,
    ln_k: f64,
    initial: PretrainStats,
    final_val: PretrainStats,
    accuracy_over_chance: f64,
}

fn pretrain_cmd(cfg: &RunConfig, tokenizer: Option<&Path>, out: &mut OutputSet) -> Result<()> {
    let tok = load_tokenizer(&resolve_input(cfg, tokenizer, TOKENIZER_CKPT))?;
    let bcfg = cfg.backbone_config();
    bcfg.check_teacher(&tok)?;
    let corpus = load_corpus(cfg)?;
    let data = build_dataset(cfg, &corpus)?;
    let pcfg = cfg.pretrain_config();
    let mut model = BackboneModel::new(bcfg, cfg.seed ^ 0xb4c6)?;
    let eval_set = if data.val.is_empty() { &data.train } else { &data.val };
    let teachers = teacher_for_samples(&tok, eval_set, &model.cfg, EVAL_BATCH)?;
    let initial = evaluate_masked(&model, eval_set, &teachers, pcfg.mask_ratio, pcfg.seed ^ 0x7a1, EVAL_BATCH)?;
    let outcome = pretrain(&mut model, &tok, &data, &pcfg)?;
    let final_val = evaluate_masked(&model, eval_set, &teachers, pcfg.mask_ratio, pcfg.seed ^ 0x7a1, EVAL_BATCH)?;
    let k = cfg.model.codebook_size as f64;
    let summary = PretrainSummary {
        train_samples: data.train.len(),
        val_samples: data.val.len(),
        chance: 1.0 / k,
        ln_k: k.ln(),
        initial,
        final_val,
        accuracy_over_chance: final_val.masked_acc * k,
    };
    out.write(BACKBONE_CKPT, &model.to_checkpoint().to_bytes())?;
    out.write("pretrain_curves.csv", PretrainRow::csv(&outcome.curves).as_bytes())?;
    out.write("pretrain_summary.json", &json(&summary))?;
    Ok(())
}

/// Alpha-dominant (label 0) and beta-dominant (label 1) recordings; the
/// last `test_fraction` of each class is held out.
pub fn probe_corpus(cfg: &RunConfig) -> Result<(Vec<Recording>, Vec<bool>)> {
    let n = cfg.probe.recordings_per_class;
    let n_test = ((n as f64 * cfg.probe.test_fraction).round() as usize).clamp(1, n - 1);
    let mut recs = Vec::new();
    let mut held_out = Vec::new();
    for (label, band) in ["alpha", "beta"].into_iter().enumerate() {
        for i in 0..n {
            let seed = cfg
                .seed
                .wrapping_mul(7919)
                .wrapping_add(0x9b0b_0000 + (label * n + i) as u64);
            let spec = SynthSpec {
                noise_level: cfg.synth.noise_level,
                ..SynthSpec::dominated_by(
                    band,
                    cfg.model.patch_len as f64,
                    cfg.synth.channels,
                    cfg.probe.duration,
                    seed,
                )
            };
            let mut rec = synth_generate(&spec)?;
            rec.labels = Some(vec![label]);
            recs.push(rec);
            held_out.push(i >= n - n_test);
        }
    }
    Ok((recs, held_out))
}

fn probe_cmd(cfg: &RunConfig, backbone: Option<&Path>, out: &mut OutputSet) -> Result<()> {
    let model = load_backbone(&resolve_input(cfg, backbone, BACKBONE_CKPT))?;
    check_patch_len(cfg, model.cfg.encoder.patch_len)?;
    let (recs, held_out) = probe_corpus(cfg)?;
    let data = Dataset::from_recordings(&recs, None, cfg.model.patch_len, cfg.data.slots, 0.0)?;
    let (train, test): (Vec<Sample>, Vec<Sample>) =
        data.train.into_iter().partition(|s| !held_out[s.recording]);
    let labels = |s: &[Sample]| -> Vec<usize> { s.iter().map(|x| x.label.unwrap_or(0)).collect() };
    let x_train = pooled_features(&model, &train)?;
    let x_test = pooled_features(&model, &test)?;
    let probe = LinearProbe::fit(&x_train, &labels(&train), 2, &cfg.probe_config())?;
    let count = |flag: bool| held_out.iter().filter(|&&h| h == flag).count();
    let mut csv = String::from(PROBE_HEADER);
    csv.push('\n');
    writeln!(csv, "train,{},{},{}", count(false), train.len(), probe.accuracy(&x_train, &labels(&train))).unwrap();
    writeln!(csv, "test,{},{},{}", count(true), test.len(), probe.accuracy(&x_test, &labels(&test))).unwrap();
    out.write("probe.csv", csv.as_bytes())?;
    Ok(())
}

fn sweep_cmd(cfg: &RunConfig, out: &mut OutputSet) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    let data = build_dataset(cfg, &corpus)?;
    let mut table = String::from(SWEEP_HEADER);
    table.push('\n');
    let mut curves = format!("levels,{CURVE_HEADER}\n");
    for &n in &cfg.sweep.levels {
        let mut c = cfg.clone();
        c.model.levels = n;
        c.validate()?;
        log::info!("sweep: N={n}");
        let (_, rows, summary) = fit_tokenizer(&c, &data)?;
        writeln!(table, "{n},{},{}", summary.final_val.raw_mse, summary.final_val.total).unwrap();
        for line in CurveRow::csv(&rows).lines().skip(1) {
            writeln!(curves, "{n},{line}").unwrap();
        }
    }
    out.write("sweep.csv", table.as_bytes())?;
    out.write("sweep_curves.csv", curves.as_bytes())?;
    Ok(())
}

fn gradcheck_cmd(cfg: &RunConfig, out: &mut OutputSet) -> Result<()> {
    let report = run_gradient_suite(cfg.gradcheck.seeds)?;
    out.write("gradcheck.csv", report.csv().as_bytes())?;
    if !report.passed() {
        let w = report.worst().expect("non-empty suite");
        eprint!("{}", report.csv());
        return Err(Error::Numeric(format!(
            "gradient check failed: {} max relative error {:e} exceeds {:e}",
            w.primitive, w.max_rel_error, report.tolerance
        )));
    }
    Ok(())
}
