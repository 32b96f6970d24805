use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use bmace::chords::{parse_lab, Annotation, Vocab};
use bmace::eval::{evaluate_all, EvalReport, SongRecord};
use bmace::features::{
    compute_norm_stats, extract, read_feature_cache, read_wav, synth_corpus, write_feature_cache, write_wav,
    FeatureCache, FeatureMatrix, NormStats, ProgressionConfig, LOG_EPS, N_BINS, SAMPLE_RATE,
};
use bmace::model::{
    count_flops, count_params, forward_var, init_model, load_checkpoint, save_checkpoint, time_forward, ModelConfig,
    ModelVars,
};
use bmace::numerics::check_gradients;
use bmace::train::{cross_entropy, split_dataset, train_with_progress, transcribe, LabeledClip, TrainConfig};
use bmace::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::manifest::{beside, write_json, RunManifest, MANIFEST_NAME};
use crate::{
    BenchArgs, CheckFailed, Command, EvaluateArgs, FeaturesArgs, FlopsArgs, GradcheckArgs, ModelArgs, SynthArgs,
    TrainArgs,
};

pub fn run(cmd: &Command, threads: usize) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(cmd, a, threads),
        Command::Features(a) => features(cmd, a, threads),
        Command::Train(a) => train(cmd, a, threads),
        Command::Evaluate(a) => evaluate(cmd, a, threads),
        Command::Params(a) => params(a),
        Command::Flops(a) => flops(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Bench(a) => bench(a),
        Command::Replay(a) => {
            let m = RunManifest::read(&a.manifest)?;
            if matches!(m.args, Command::Replay(_)) {
                bail!("{} records a replay, not a runnable command", a.manifest.display());
            }
            eprintln!("replaying {} {}", m.tool, m.version);
            run(&m.args, threads)
        }
    }
}

/// Files in `dir` with extension `ext` (case-insensitive), sorted by name.
fn list_files(dir: &Path, ext: &str) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("reading directory {}", dir.display()))? {
        let path = entry?.path();
        let matches = path
            .extension()
            .is_some_and(|e| e.to_string_lossy().eq_ignore_ascii_case(ext));
        if matches && path.is_file() {
            let id = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            out.push((id, path));
        }
    }
    out.sort();
    Ok(out)
}

fn read_lab(path: &Path) -> Result<Annotation> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_lab(&text).with_context(|| format!("parsing {}", path.display()))
}

fn synth(cmd: &Command, a: &SynthArgs, threads: usize) -> Result<()> {
    let cfg = ProgressionConfig {
        seconds: a.seconds,
        vocab: a.vocab,
        ..ProgressionConfig::default()
    };
    let clips = synth_corpus(a.clips, &cfg, SAMPLE_RATE, a.seed)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut m = RunManifest::new(cmd, threads);
    for c in &clips {
        let wav = a.out.join(format!("{}.wav", c.id));
        let lab = a.out.join(format!("{}.lab", c.id));
        write_wav(&wav, &c.audio)?;
        std::fs::write(&lab, c.annotation.to_lab()).with_context(|| format!("writing {}", lab.display()))?;
        m.outputs.extend([wav, lab]);
    }
    m.seeds.insert("corpus".into(), a.seed);
    m.resolved = serde_json::json!({
        "seconds": cfg.seconds,
        "min_chord_s": cfg.min_chord_s,
        "max_chord_s": cfg.max_chord_s,
        "no_chord_prob": cfg.no_chord_prob,
        "vocab": cfg.vocab,
        "sample_rate": SAMPLE_RATE,
    });
    m.write(&a.out.join(MANIFEST_NAME))?;
    println!("wrote {} clips to {}", clips.len(), a.out.display());
    Ok(())
}

fn features(cmd: &Command, a: &FeaturesArgs, threads: usize) -> Result<()> {
    let files = list_files(&a.in_audio_dir, "wav")?;
    if files.is_empty() {
        bail!("no input: no .wav files in {}", a.in_audio_dir.display());
    }
    let entries = files
        .par_iter()
        .map(|(id, path)| {
            let clip = read_wav(path).with_context(|| format!("reading {}", path.display()))?;
            let f = extract(&clip, a.eps).with_context(|| format!("analysing {}", path.display()))?;
            Ok((id.clone(), f))
        })
        .collect::<Result<Vec<(String, FeatureMatrix)>>>()?;
    let stats = match &a.stats_from {
        Some(p) => read_feature_cache(p)
            .with_context(|| format!("reading {}", p.display()))?
            .stats
            .with_context(|| format!("{} stores no normalization statistics", p.display()))?,
        None => compute_norm_stats(entries.iter().map(|(_, f)| f))?,
    };
    let frames: usize = entries.iter().map(|(_, f)| f.frames()).sum();
    let cache = FeatureCache {
        entries,
        stats: Some(stats),
        eps: a.eps,
    };
    write_feature_cache(&a.out, &cache)?;

    let mut m = RunManifest::new(cmd, threads);
    m.inputs = files.into_iter().map(|(_, p)| p).collect();
    m.inputs.extend(a.stats_from.clone());
    m.outputs = vec![a.out.clone(), bmace::store::blob_path(&a.out)];
    m.resolved = serde_json::json!({ "eps": a.eps, "stats": stats, "n_bins": N_BINS, "sample_rate": SAMPLE_RATE });
    m.write(&beside(&a.out))?;
    println!(
        "{} clips, {frames} frames; mean {:.6} variance {:.6}",
        cache.entries.len(),
        stats.mean,
        stats.variance
    );
    Ok(())
}

/// Metadata stored next to the model config in a checkpoint.
#[derive(Debug, Serialize, Deserialize)]
struct CheckpointExtra {
    vocab: Vocab,
    stats: NormStats,
    eps: f64,
    train: TrainConfig,
    best_epoch: usize,
    steps: u64,
    split: SplitIds,
}

#[derive(Debug, Serialize, Deserialize)]
struct SplitIds {
    train: Vec<String>,
    val: Vec<String>,
    test: Vec<String>,
}

fn train(cmd: &Command, a: &TrainArgs, threads: usize) -> Result<()> {
    let vocab = a.model.vocab;
    let mut m = RunManifest::new(cmd, threads);
    let (data, eps): (Vec<(LabeledClip, Annotation)>, f64) = match (a.synthetic, &a.features, &a.labels) {
        (Some(n), None, None) => {
            let cfg = ProgressionConfig {
                seconds: a.clip_seconds,
                vocab,
                ..ProgressionConfig::default()
            };
            let clips = synth_corpus(n, &cfg, SAMPLE_RATE, a.seed)?;
            let data = clips
                .into_par_iter()
                .map(|c| {
                    let f = extract(&c.audio, LOG_EPS)?;
                    Ok((LabeledClip::new(c.id, f, &c.annotation, vocab), c.annotation))
                })
                .collect::<Result<Vec<_>>>()?;
            (data, LOG_EPS)
        }
        (None, Some(cache_path), Some(labels)) => {
            let cache = read_feature_cache(cache_path).with_context(|| format!("reading {}", cache_path.display()))?;
            m.inputs.push(cache_path.clone());
            let mut data = Vec::with_capacity(cache.entries.len());
            for (id, f) in cache.entries {
                let lab = labels.join(format!("{id}.lab"));
                ensure!(lab.is_file(), "missing label file for song id {id}: {}", lab.display());
                let ann = read_lab(&lab)?;
                m.inputs.push(lab);
                data.push((LabeledClip::new(id, f, &ann, vocab), ann));
            }
            (data, cache.eps)
        }
        _ => bail!("choose exactly one data source: --synthetic N, or --features CACHE with --labels DIR"),
    };
    let split = split_dataset(data, a.seed)?;
    let ids = |v: &[(LabeledClip, Annotation)]| v.iter().map(|(c, _)| c.id.clone()).collect::<Vec<_>>();
    let split_ids = SplitIds {
        train: ids(&split.train),
        val: ids(&split.val),
        test: ids(&split.test),
    };
    let train_clips: Vec<LabeledClip> = split.train.into_iter().map(|(c, _)| c).collect();
    let val_clips: Vec<LabeledClip> = split.val.into_iter().map(|(c, _)| c).collect();

    let model_cfg = a.model.config(a.seed);
    let train_cfg = TrainConfig {
        learning_rate: a.lr,
        batch_size: a.batch_size,
        max_epochs: a.epochs,
        patience: a.patience,
        clip_norm: (a.clip_norm > 0.0).then_some(a.clip_norm),
        seed: a.seed,
        ..TrainConfig::default()
    };
    eprintln!(
        "training {} ({} params) on {}/{}/{} clips",
        model_cfg.variant.name(),
        count_params(&model_cfg),
        train_clips.len(),
        val_clips.len(),
        split.test.len()
    );
    let out = train_with_progress(&model_cfg, &train_cfg, &train_clips, &val_clips, |r| {
        eprintln!(
            "epoch {:>3}  train {:.4}  val {:.4}  acc {:.4}",
            r.epoch, r.train_loss, r.val_loss, r.val_framewise_accuracy
        )
    })?;

    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let ckpt = a.out.join("model.json");
    let extra = CheckpointExtra {
        vocab,
        stats: out.stats,
        eps,
        train: train_cfg,
        best_epoch: out.best_epoch,
        steps: out.steps,
        split: split_ids,
    };
    save_checkpoint(&ckpt, &model_cfg, &out.params, serde_json::to_value(&extra)?)?;
    let history = a.out.join("history.json");
    write_json(&history, &out.history)?;

    let songs = split
        .test
        .par_iter()
        .map(|(clip, reference)| {
            let est = transcribe(&out.params, &model_cfg, &out.stats, &clip.features, vocab)?;
            Ok(SongRecord {
                id: clip.id.clone(),
                result: evaluate_all(reference, &est)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = EvalReport::new(songs);
    let report_path = a.out.join("test_report.json");
    write_json(&report_path, &report)?;

    m.outputs = vec![ckpt.clone(), bmace::store::blob_path(&ckpt), history, report_path];
    m.resolved = serde_json::json!({ "model": model_cfg, "train": train_cfg, "eps": eps, "sample_rate": SAMPLE_RATE });
    m.seeds.extend([
        ("corpus".to_string(), a.seed),
        ("split".to_string(), a.seed),
        ("init".to_string(), model_cfg.seed),
        ("shuffle".to_string(), train_cfg.seed),
    ]);
    m.write(&a.out.join(MANIFEST_NAME))?;

    let score = |v: Option<f64>| v.map_or("-".to_string(), |s| format!("{s:.4}"));
    println!(
        "best epoch {} of {}; held-out majmin {} root {}",
        out.best_epoch,
        out.history.len(),
        score(report.aggregate.weighted.majmin),
        score(report.aggregate.weighted.root)
    );
    Ok(())
}

fn evaluate(cmd: &Command, a: &EvaluateArgs, threads: usize) -> Result<()> {
    let refs = list_files(&a.reference, "lab")?;
    if refs.is_empty() {
        bail!("no input: no .lab files in {}", a.reference.display());
    }
    let mut m = RunManifest::new(cmd, threads);
    m.inputs = refs.iter().map(|(_, p)| p.clone()).collect();

    let songs: Vec<SongRecord> = match (&a.est, &a.model, &a.audio) {
        (Some(est_dir), None, None) => {
            let mut songs = Vec::with_capacity(refs.len());
            for (id, ref_path) in &refs {
                let est_path = est_dir.join(format!("{id}.lab"));
                ensure!(est_path.is_file(), "missing estimate for song id {id}: {}", est_path.display());
                let result = evaluate_all(&read_lab(ref_path)?, &read_lab(&est_path)?)?;
                m.inputs.push(est_path);
                songs.push(SongRecord { id: id.clone(), result });
            }
            songs
        }
        (None, Some(ckpt_path), Some(audio_dir)) => {
            let ckpt = load_checkpoint(ckpt_path).with_context(|| format!("loading {}", ckpt_path.display()))?;
            let extra: CheckpointExtra = serde_json::from_value(ckpt.extra.clone())
                .with_context(|| format!("{} lacks normalization metadata", ckpt_path.display()))?;
            m.inputs.push(ckpt_path.clone());
            let mut jobs = Vec::with_capacity(refs.len());
            for (id, ref_path) in &refs {
                let wav = audio_dir.join(format!("{id}.wav"));
                ensure!(wav.is_file(), "missing audio for song id {id}: {}", wav.display());
                m.inputs.push(wav.clone());
                jobs.push((id.clone(), ref_path.clone(), wav));
            }
            m.resolved = serde_json::json!({ "model": ckpt.config, "vocab": extra.vocab, "eps": extra.eps });
            jobs.par_iter()
                .map(|(id, ref_path, wav)| {
                    let clip = read_wav(wav).with_context(|| format!("reading {}", wav.display()))?;
                    let f = extract(&clip, extra.eps)?;
                    let est = transcribe(&ckpt.params, &ckpt.config, &extra.stats, &f, extra.vocab)?;
                    Ok(SongRecord {
                        id: id.clone(),
                        result: evaluate_all(&read_lab(ref_path)?, &est)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?
        }
        _ => bail!("give either --est DIR or --model CKPT with --audio DIR"),
    };
    let report = EvalReport::new(songs);
    match &a.out {
        Some(out) => {
            write_json(out, &report)?;
            m.outputs = vec![out.clone()];
            m.write(&beside(out))?;
        }
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    let agg = &report.aggregate;
    for c in bmace::eval::Comparator::ALL {
        let s = agg.weighted.get(c).map_or("-".to_string(), |v| format!("{v:.4}"));
        eprintln!("{:<9} {s}", c.name());
    }
    Ok(())
}

fn params(a: &ModelArgs) -> Result<()> {
    let cfg = a.config(0);
    cfg.validate()?;
    println!("params {}", count_params(&cfg));
    Ok(())
}

fn flops(a: &FlopsArgs) -> Result<()> {
    let cfg = a.model.config(0);
    cfg.validate()?;
    ensure!(a.frames > 0, "--frames must be positive");
    let n = count_flops(&cfg, a.frames);
    println!("flops {n}");
    println!("gflops {:.6}", n as f64 / 1e9);
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    let cfg = ModelConfig {
        variant: a.variant,
        d_model: 4,
        n_state: 2,
        dt_rank: 2,
        conv_k: 2,
        expand: 1,
        seed: a.seed,
        ..ModelConfig::default()
    };
    // jitter every tensor so no gradient is structurally near zero
    let mut p = init_model::<f64>(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let frames = 6;
    let x = Tensor::from_fn(&[frames, N_BINS], |_| rng.random_range(-1.0..1.0));
    let targets: Vec<Option<usize>> = (0..frames)
        .map(|t| (t != 2).then(|| rng.random_range(0..cfg.n_classes)))
        .collect();
    let report = check_gradients(&p.tensors(), a.step, |tape, vars| {
        let mv = ModelVars::from_ordered(vars, &cfg);
        let xv = tape.constant(x.clone());
        let logits = forward_var(tape, &mv, cfg.variant, xv)?;
        cross_entropy(tape, logits, &targets)
    })?;
    println!(
        "max_rel_error {:.3e} over {} parameters (tolerance {:.0e})",
        report.max_rel_error, report.checked, a.tolerance
    );
    if !report.passes(a.tolerance) {
        return Err(CheckFailed(format!(
            "relative error {:.3e} at tensor {} element {}: analytic {:.6e} numeric {:.6e}",
            report.max_rel_error, report.worst.0, report.worst.1, report.analytic, report.numeric
        ))
        .into());
    }
    Ok(())
}

fn bench(a: &BenchArgs) -> Result<()> {
    ensure!(!a.lengths.is_empty() && a.lengths.iter().all(|&l| l > 0), "--lengths must be positive");
    let cfg = a.model.config(0);
    cfg.validate()?;
    let times = time_forward(&cfg, &a.lengths, a.reps)?;
    for (&l, &t) in a.lengths.iter().zip(&times) {
        let f = count_flops(&cfg, l);
        println!("frames {l} wall_ms {:.3} flops {f} gflops_per_s {:.3}", t * 1e3, f as f64 / t / 1e9);
    }
    let mut worst: Option<f64> = None;
    for i in 0..a.lengths.len() {
        for j in 0..a.lengths.len() {
            if a.lengths[j] == 2 * a.lengths[i] {
                let ratio = times[j] / times[i];
                println!("ratio {}->{} {ratio:.3}", a.lengths[i], a.lengths[j]);
                worst = Some(worst.map_or(ratio, |w: f64| w.max(ratio)));
            }
        }
    }
    if let Some(w) = worst {
        if w > a.max_ratio {
            return Err(CheckFailed(format!("wall-time ratio {w:.3} for doubled length exceeds {}", a.max_ratio)).into());
        }
    }
    Ok(())
}
