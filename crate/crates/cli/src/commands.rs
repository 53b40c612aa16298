use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use mtur_core::imaging::{load_gray, load_image, save_image, ImageRGB};
use mtur_core::metrics::{config_hash, evaluate, fps_benchmark, EvalItem};
use mtur_core::network::{describe, MturModel};
use mtur_core::physics::{
    degrade, degrade_rgb, estimate_airlight, estimate_mt, invert_restore, synth_transmission_rgb, Airlight, MapRole,
    TransmissionMap,
};
use mtur_core::training::{
    dataset_hash, infer, list_images, load_dataset, make_synthetic_dataset, save_dataset, train, CleanSource,
};
use mtur_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{resolve, RunConfig};
use crate::{Cli, Command, DataFormat, RestoreMode};

/// Error tag and exit code: 1 usage/config, 2 I/O, 3 numerical.
pub fn classify(e: &anyhow::Error) -> (&'static str, u8) {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::Io { .. } | Error::Decode { .. } | Error::Format(_) => ("io", 2),
                Error::Numerical(_) => ("numerical", 3),
                Error::Dim { .. } | Error::Shape { .. } => ("shape", 1),
                Error::Config(_) | Error::Json(_) => ("config", 1),
                Error::Usage(_) => ("usage", 1),
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return ("io", 2);
        }
    }
    ("usage", 1)
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Error::Usage(msg.into()).into()
}

fn parse_airlight(s: &str) -> Result<Airlight> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| usage(format!("airlight {s:?} is not r,g,b")))?;
    match v[..] {
        [r, g, b] => Ok(Airlight::new(r, g, b)?),
        [a] => Ok(Airlight::gray(a)?),
        _ => Err(usage(format!("airlight {s:?} needs 1 or 3 values"))),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = resolve(cli.common.config.as_deref())?;
    if let Some(seed) = cli.common.seed {
        cfg.seed = seed;
    }
    cfg.train.seed = cfg.seed;
    if let Some(j) = cli.common.jobs {
        cfg.jobs = Some(j);
    }
    if let Some(s) = cli.common.size {
        cfg.data.image_size = s;
        cfg.train.image_size = s;
        cfg.bench.sizes = vec![s];
    }
    if let Command::Train { iterations: Some(n), .. } = &cli.command {
        cfg.train.iterations = *n;
    }
    if cli.common.dump_config {
        println!("{}", serde_json::to_string_pretty(&cfg)?);
        return Ok(());
    }
    eprintln!("config: {}", serde_json::to_string(&cfg)?);
    eprintln!("seed: {}", cfg.seed);
    if let Some(j) = cfg.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build_global()
            .map_err(|e| usage(format!("--jobs: {e}")))?;
    }

    match cli.command {
        Command::Mt { input, output, airlight } => cmd_mt(&cfg, &input, &output, airlight.as_deref()),
        Command::Degrade {
            input,
            output,
            transmission,
            airlight,
            save_transmission,
        } => cmd_degrade(&cfg, &input, &output, transmission.as_deref(), airlight.as_deref(), save_transmission.as_deref()),
        Command::Restore {
            input,
            output,
            mode,
            checkpoint,
            transmission,
            airlight,
            mt_output,
        } => match mode {
            RestoreMode::Classical => {
                cmd_restore_classical(&cfg, &input, &output, transmission.as_deref(), airlight.as_deref())
            }
            RestoreMode::Neural => {
                let ck = checkpoint.ok_or_else(|| usage("--mode neural needs --checkpoint"))?;
                let model = load_model(&cfg, &ck)?;
                let img = load_image(&input)?;
                let (enh, mt) = infer(&model, &img)?;
                save_image(&enh, &output)?;
                if let Some(p) = mt_output {
                    save_image(&mt, p)?;
                }
                Ok(())
            }
        },
        Command::SynthData {
            output,
            count,
            source,
            format,
        } => {
            let source = source.map_or(CleanSource::Procedural, CleanSource::Directory);
            let n = count.unwrap_or(cfg.dataset_size);
            let data = make_synthetic_dataset(&source, n, &cfg.data, cfg.seed)?;
            let ext = match format {
                DataFormat::Png => "png",
                DataFormat::Mttb => "mttb",
            };
            let manifest = save_dataset(&data, &output, ext)?;
            println!("samples: {n}");
            println!("dataset_hash: {}", dataset_hash(&data));
            println!("manifest: {}", manifest.display());
            Ok(())
        }
        Command::Train {
            data,
            output,
            checkpoint,
            log_every,
            ..
        } => cmd_train(cfg, data.as_deref(), output, checkpoint.as_deref(), log_every),
        Command::Eval {
            input,
            reference,
            output,
            checkpoint,
            csv,
            method,
        } => cmd_eval(&cfg, &input, reference.as_deref(), &output, checkpoint.as_deref(), csv.as_deref(), &method),
        Command::Bench { checkpoint, output } => cmd_bench(&cfg, checkpoint.as_deref(), output.as_deref()),
        Command::Describe => {
            let s = cfg.bench.sizes.first().copied().unwrap_or(64);
            print!("{}", describe(&cfg.model, (s, s)));
            Ok(())
        }
    }
}

fn load_model(cfg: &RunConfig, path: &Path) -> Result<MturModel<f32>> {
    let m = MturModel::<f32>::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    if m.config() != &cfg.model {
        eprintln!("note: using the architecture stored with the checkpoint");
    }
    Ok(m)
}

fn airlight_for(cfg: &RunConfig, img: &ImageRGB, given: Option<&str>) -> Result<Airlight> {
    let a = match given {
        Some(s) => parse_airlight(s)?,
        None => estimate_airlight(img, &cfg.physics)?,
    };
    eprintln!("airlight: {:.6},{:.6},{:.6}", a.a_r, a.a_g, a.a_b);
    Ok(a)
}

fn cmd_mt(cfg: &RunConfig, input: &Path, output: &Path, airlight: Option<&str>) -> Result<()> {
    let img = load_image(input)?;
    let a = airlight_for(cfg, &img, airlight)?;
    let t = estimate_mt(&img, &a, cfg.physics.patch_radius);
    save_image(t.map(), output)?;
    Ok(())
}

fn cmd_degrade(
    cfg: &RunConfig,
    input: &Path,
    output: &Path,
    transmission: Option<&Path>,
    airlight: Option<&str>,
    save_t: Option<&Path>,
) -> Result<()> {
    let a = match airlight {
        Some(s) => parse_airlight(s)?,
        None => {
            let [r, g, b] = cfg.degrade.airlight;
            Airlight::new(r, g, b)?
        }
    };
    let given = transmission
        .map(|p| load_gray(p).map(|m| TransmissionMap::new(m, MapRole::True)))
        .transpose()?;
    let one = |i: usize, clean: &ImageRGB| -> Result<(ImageRGB, TransmissionMap)> {
        if let Some(t) = &given {
            return Ok((degrade(clean, t, &a)?, t.clone()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(i as u64);
        let (h, w) = clean.dims();
        let d = &cfg.degrade;
        let t = synth_transmission_rgb(h, w, rng.random(), d.beta, d.depth_style, d.d_max)?;
        let out = degrade_rgb(clean, [&t[0], &t[1], &t[2]], &a)?;
        let [_, g, _] = t;
        Ok((out, g))
    };
    if input.is_dir() {
        if save_t.is_some() {
            return Err(usage("--save-transmission needs a single input file"));
        }
        std::fs::create_dir_all(output).map_err(|e| Error::Io {
            path: output.to_path_buf(),
            source: e,
        })?;
        let files = list_images(input)?;
        files.par_iter().enumerate().try_for_each(|(i, f)| -> Result<()> {
            let (img, _) = one(i, &load_image(f)?)?;
            save_image(&img, output.join(f.file_name().unwrap_or_default()))?;
            Ok(())
        })?;
        eprintln!("degraded {} images", files.len());
    } else {
        let (img, t) = one(0, &load_image(input)?)?;
        save_image(&img, output)?;
        if let Some(p) = save_t {
            save_image(t.map(), p)?;
        }
    }
    Ok(())
}

fn cmd_restore_classical(
    cfg: &RunConfig,
    input: &Path,
    output: &Path,
    transmission: Option<&Path>,
    airlight: Option<&str>,
) -> Result<()> {
    let img = load_image(input)?;
    let a = airlight_for(cfg, &img, airlight)?;
    let t = match transmission {
        Some(p) => TransmissionMap::new(load_gray(p)?, MapRole::True),
        None => estimate_mt(&img, &a, cfg.physics.patch_radius),
    };
    save_image(&invert_restore(&img, &t, &a, cfg.physics.t0)?, output)?;
    Ok(())
}

fn cmd_train(cfg: RunConfig, data: Option<&Path>, out: PathBuf, init: Option<&Path>, log_every: usize) -> Result<()> {
    let mut samples = match data {
        Some(m) => load_dataset(m)?,
        None => make_synthetic_dataset(
            &CleanSource::Procedural,
            cfg.dataset_size + cfg.val_size,
            &cfg.data,
            cfg.seed,
        )?,
    };
    let n_val = if samples.len() > cfg.val_size { cfg.val_size } else { 0 };
    let val = samples.split_off(samples.len() - n_val);
    eprintln!("train pairs: {}, validation pairs: {}", samples.len(), val.len());
    let mut model = match init {
        Some(p) => load_model(&cfg, p)?,
        None => MturModel::<f32>::build(cfg.model.clone(), cfg.seed)?,
    };
    let mut tc = cfg.train.clone();
    tc.out_dir = Some(out);
    let every = log_every.max(1);
    let report = train(&mut model, &samples, &val, &tc, |r| {
        if r.iteration % every == 0 || r.iteration == 1 {
            eprintln!(
                "iter {} loss {:.6} (image {:.6}, mt {:.6}) lr {:.2e} {:.1}s",
                r.iteration, r.loss, r.image_loss, r.mt_loss, r.lr, r.seconds
            );
        }
    })?;
    println!("initial_loss: {:.6}", report.initial_loss);
    println!("final_loss: {:.6}", report.final_loss);
    if let Some(v) = report.validation.last() {
        println!("validation: psnr {:.3} ssim {:.4} mt_mae {:.4}", v.psnr, v.ssim, v.mt_mae);
    }
    if let Some(p) = &report.final_checkpoint {
        println!("checkpoint: {}", p.display());
    }
    Ok(())
}

fn find_pair(dir: &Path, name: &Path) -> Result<PathBuf> {
    let exact = dir.join(name.file_name().unwrap_or_default());
    if exact.exists() {
        return Ok(exact);
    }
    let stem = name.file_stem().unwrap_or_default();
    list_images(dir)?
        .into_iter()
        .find(|p| p.file_stem() == Some(stem))
        .ok_or_else(|| {
            Error::Io {
                path: exact,
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "no reference with this name"),
            }
            .into()
        })
}

fn cmd_eval(
    cfg: &RunConfig,
    input: &Path,
    reference: Option<&Path>,
    output: &Path,
    checkpoint: Option<&Path>,
    csv: Option<&Path>,
    method: &str,
) -> Result<()> {
    let files = list_images(input)?;
    if files.is_empty() {
        return Err(usage(format!("no images in {}", input.display())));
    }
    let model = checkpoint.map(|p| load_model(cfg, p)).transpose()?;
    let items = files
        .par_iter()
        .map(|f| -> Result<EvalItem> {
            let mut image = load_image(f)?;
            if let Some(m) = &model {
                image = infer(m, &image)?.0;
            }
            let reference = reference.map(|d| find_pair(d, f).and_then(|p| Ok(load_image(p)?))).transpose()?;
            let id = f.file_name().unwrap_or_default().to_string_lossy().into_owned();
            Ok(EvalItem { id, image, reference })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = evaluate(&items, &cfg.metrics, config_hash(cfg)?)?;
    report.save_json(output)?;
    if let Some(p) = csv {
        report.save_csv(method, p)?;
    }
    for (k, a) in &report.aggregate {
        println!("{k}: {:.6} +- {:.6}", a.mean, a.std);
    }
    Ok(())
}

fn cmd_bench(cfg: &RunConfig, checkpoint: Option<&Path>, output: Option<&Path>) -> Result<()> {
    let model = match checkpoint {
        Some(p) => load_model(cfg, p)?,
        None => MturModel::<f32>::build(cfg.model.clone(), cfg.seed)?,
    };
    let b = &cfg.bench;
    let results = b
        .sizes
        .iter()
        .map(|&s| fps_benchmark(&model, s, b.warmup, b.runs, b.threading))
        .collect::<mtur_core::Result<Vec<_>>>()?;
    println!("{:>6} {:>7} {:>10} {:>10} {:>10} {:>10}", "size", "threads", "fps", "mean_ms", "p50_ms", "p95_ms");
    for r in &results {
        println!(
            "{:>6} {:>7} {:>10.3} {:>10.3} {:>10.3} {:>10.3}",
            r.image_size, r.threads, r.fps, r.mean_latency_ms, r.p50_ms, r.p95_ms
        );
    }
    if let Some(p) = output {
        let text = serde_json::to_string_pretty(&results)? + "\n";
        std::fs::write(p, text).map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        })?;
    }
    Ok(())
}
