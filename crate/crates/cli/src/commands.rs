use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use alfa_core::embeddings::{Mask, TileOffset};
use alfa_core::memory::{self, MemoryBank};
use alfa_core::metrics::{self, ImageMetrics, PixelEval, PixelMetrics};
use alfa_core::prompts::{self, HttpCompletionClient, Polarity, PromptCache};
use alfa_core::rtp;
use alfa_core::scoring::{self, AnomalyResult};
use alfa_core::synth::{self, SynthConfig};
use alfa_core::{Bundle, EmbeddedPromptSet, Grid, ImageEmbeddings, ImageScore, PipelineConfig};
use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::config::EngineConfig;
use crate::error::{CliError, Result};
use crate::{
    AdaptArgs, BankBuildArgs, DescriptorsArgs, EvalArgs, PolarityFilter, Preset, PromptsArgs,
    RtpFlags, ScoreArgs, SynthArgs,
};

fn load_bundle(path: &Path) -> Result<Bundle> {
    Bundle::load(path).map_err(|e| CliError::data(path, e))
}

fn load_image(path: &Path) -> Result<ImageEmbeddings> {
    ImageEmbeddings::from_bundle(&load_bundle(path)?).map_err(|e| CliError::data(path, e))
}

fn load_prompts(path: &Path) -> Result<EmbeddedPromptSet> {
    EmbeddedPromptSet::from_bundle(&load_bundle(path)?).map_err(|e| CliError::data(path, e))
}

fn save_bundle(bundle: &Bundle, path: &Path) -> Result<()> {
    create_parent(path)?;
    bundle.save(path).map_err(|e| CliError::data(path, e))
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
        }
        _ => Ok(()),
    }
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    create_parent(path)?;
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::data(path, e))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Files in `dir` with the given suffix, sorted by name.
fn list_files(dir: &Path, suffix: &str) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if path.is_file() && name.ends_with(suffix) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn apply_rtp(config: &mut PipelineConfig, flags: &RtpFlags) {
    if let Some(k) = flags.k {
        config.rtp.k = k;
    }
    if let Some(eps) = flags.epsilon {
        config.rtp.epsilon = eps;
    }
}

fn validated(config: PipelineConfig) -> Result<PipelineConfig> {
    config
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(config)
}

pub fn prompts(config: &EngineConfig, args: PromptsArgs) -> Result<()> {
    let mut config = config.clone();
    if let Some(p) = args.grammar {
        config.grammar = Some(p);
    }
    if let Some(p) = args.aliases {
        config.class_aliases = Some(p);
    }
    if let Some(n) = args.llm_count {
        config.llm_count = n;
    }
    if let Some(url) = args.llm_endpoint {
        config.llm_endpoint = url;
    }
    if let Some(model) = args.llm_model {
        config.llm_model = model;
    }
    if let Some(p) = args.llm_cache {
        config.llm_cache = Some(p);
    }
    if let Some(ms) = args.llm_delay_ms {
        config.llm_delay_ms = ms;
    }
    let grammar = config.grammar()?;
    let llm = config.llm();
    llm.validate().map_err(|e| CliError::Usage(e.to_string()))?;

    let set = if llm.count > 0 {
        let client = HttpCompletionClient::new(&llm);
        let mut cache = match &llm.cache_path {
            Some(p) => PromptCache::open(p).map_err(|e| CliError::data(p, e))?,
            None => PromptCache::in_memory(),
        };
        prompts::build_vanilla_pool(&grammar, Some((&llm, &client, &mut cache)), &args.class)
            .map_err(|e| CliError::data(&llm.endpoint, e))?
    } else {
        prompts::build_vanilla_pool(&grammar, None, &args.class)
            .map_err(|e| CliError::Usage(e.to_string()))?
    };
    let counts = set.counts();
    info!(
        "{}: {} normal, {} abnormal prompts",
        set.class_name,
        counts.normal(),
        counts.abnormal()
    );
    create_parent(&args.out)?;
    let mut text = set.to_json();
    text.push('\n');
    std::fs::write(&args.out, text).map_err(|e| CliError::io(&args.out, e))
}

pub fn adapt(config: &EngineConfig, args: AdaptArgs) -> Result<()> {
    let mut pipeline = config.pipeline();
    apply_rtp(&mut pipeline, &args.rtp);
    let pipeline = validated(pipeline)?;
    let image = load_image(&args.image_bundle)?;
    let pool = load_prompts(&args.prompt_bundle)?;
    let adaptation = rtp::adapt_prompts(&image.cls, &pool, &pipeline.rtp)
        .map_err(|e| CliError::data(&args.image_bundle, e))?;
    let (normal, abnormal) = adaptation.kept_counts();
    let report = json!({
        "image": image.source_path,
        "k": pipeline.rtp.k,
        "epsilon": pipeline.rtp.epsilon,
        "normal_interval": adaptation.normal_interval,
        "abnormal_interval": adaptation.abnormal_interval,
        "kept": {"normal": normal, "abnormal": abnormal},
        "prompts": adaptation.diagnostics,
    });
    write_json(&args.out, &report)
}

fn score_config(config: &EngineConfig, args: &ScoreArgs) -> Result<PipelineConfig> {
    let mut pipeline = config.pipeline();
    apply_rtp(&mut pipeline, &args.rtp);
    if let Some(tau) = args.tau {
        pipeline.scoring.tau = tau;
    }
    if let Some(scales) = &args.scales {
        pipeline.scoring.scales = scales.clone();
    }
    if let Some(sigma) = args.sigma {
        pipeline.scoring.sigma = sigma;
    }
    if let Some(w) = args.memory_weight {
        pipeline.scoring.memory_weight = w;
    }
    if args.no_rtp {
        pipeline.adapt = false;
    }
    validated(pipeline)
}

/// Name written into a result's `map` field: the bare file name when the
/// map sits next to the result, otherwise the path as given.
fn map_reference(result_path: &Path, map_path: &Path) -> String {
    let same_dir =
        result_path.parent().unwrap_or(Path::new("")) == map_path.parent().unwrap_or(Path::new(""));
    match map_path.file_name() {
        Some(name) if same_dir => name.to_string_lossy().into_owned(),
        _ => map_path.display().to_string(),
    }
}

fn image_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into())
}

pub fn score(config: &EngineConfig, args: ScoreArgs) -> Result<()> {
    let pipeline = score_config(config, &args)?;
    let pool = load_prompts(&args.prompt_bundle)?;
    let bank = match &args.bank {
        Some(p) => {
            Some(MemoryBank::from_bundle(&load_bundle(p)?).map_err(|e| CliError::data(p, e))?)
        }
        None => None,
    };

    if args.image_bundle.is_dir() {
        return score_dir(&args, &pipeline, &pool, bank.as_ref());
    }
    let image = load_image(&args.image_bundle)?;
    let scored = alfa_core::score_image(&image, &pool, &pipeline, bank.as_ref())
        .map_err(|e| CliError::data(&args.image_bundle, e))?;
    let map_path = args
        .map_out
        .clone()
        .unwrap_or_else(|| args.out.with_extension("map.alfb"));
    write_scored(&scored, &image, &args.out, &map_path)
}

fn write_scored(
    scored: &ImageScore,
    image: &ImageEmbeddings,
    out: &Path,
    map_path: &Path,
) -> Result<()> {
    save_bundle(
        &scored
            .map
            .to_bundle(&image.source_path, image.gt_mask.as_ref()),
        map_path,
    )?;
    let mut result = scored.result.clone();
    result.map = Some(map_reference(out, map_path));
    write_json(out, &result)
}

fn score_dir(
    args: &ScoreArgs,
    pipeline: &PipelineConfig,
    pool: &EmbeddedPromptSet,
    bank: Option<&MemoryBank>,
) -> Result<()> {
    let dir = &args.image_bundle;
    if args.map_out.is_some() {
        return Err(CliError::Usage(
            "--map-out applies to a single image; directory mode writes maps next to results"
                .into(),
        ));
    }
    let paths = list_files(dir, ".alfb")?;
    let loaded: Vec<(PathBuf, Bundle)> = paths
        .par_iter()
        .map(|p| Ok((p.clone(), load_bundle(p)?)))
        .collect::<Result<_>>()?;
    let mut images = Vec::new();
    for (path, bundle) in loaded {
        if bundle.kind() != Some("image") {
            info!("skipping {} (kind {:?})", path.display(), bundle.kind());
            continue;
        }
        let image = ImageEmbeddings::from_bundle(&bundle).map_err(|e| CliError::data(&path, e))?;
        images.push((path, image));
    }
    if images.is_empty() {
        return Err(CliError::data(dir, "no image bundles found"));
    }

    let scored: Vec<ImageScore> = images
        .par_iter()
        .map(|(path, image)| {
            alfa_core::score_image(image, pool, pipeline, bank).map_err(|e| CliError::data(path, e))
        })
        .collect::<Result<_>>()?;

    std::fs::create_dir_all(&args.out).map_err(|e| CliError::io(&args.out, e))?;
    let mut tiles: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (idx, ((path, image), s)) in images.iter().zip(&scored).enumerate() {
        if image.tile.is_some() {
            tiles
                .entry(image.source_path.clone())
                .or_default()
                .push(idx);
            continue;
        }
        let stem = image_stem(path);
        let out = args.out.join(format!("{stem}.json"));
        let map_path = args.out.join(format!("{stem}.map.alfb"));
        write_scored(s, image, &out, &map_path)?;
    }
    for (source, members) in tiles {
        write_merged(&args.out, &source, &members, &images, &scored)?;
    }
    Ok(())
}

/// Max-merges the tiles of one non-square image into a single result.
fn write_merged(
    out_dir: &Path,
    source: &str,
    members: &[usize],
    images: &[(PathBuf, ImageEmbeddings)],
    scored: &[ImageScore],
) -> Result<()> {
    let offsets: Vec<TileOffset> = members.iter().map(|&i| images[i].1.tile.unwrap()).collect();
    let parts: Vec<(TileOffset, &Grid, f64)> = members
        .iter()
        .zip(&offsets)
        .map(|(&i, &o)| (o, &scored[i].map.pixels, scored[i].result.score))
        .collect();
    let (canvas, score) = scoring::merge_tiles(&parts).expect("at least one tile");

    let masks: Option<Vec<(TileOffset, Grid)>> = members
        .iter()
        .zip(&offsets)
        .map(|(&i, &o)| {
            images[i].1.gt_mask.as_ref().map(|m| {
                let values = m.data.iter().map(|&v| f64::from(v)).collect();
                (o, Grid::from_vec(m.h, m.w, values).expect("mask shape"))
            })
        })
        .collect();
    let gt_mask = masks.map(|masks| {
        let refs: Vec<_> = masks.iter().map(|(o, g)| (*o, g, 0.0)).collect();
        let (merged, _) = scoring::merge_tiles(&refs).expect("at least one tile");
        Mask {
            h: merged.height(),
            w: merged.width(),
            data: merged.values().iter().map(|&v| u8::from(v > 0.5)).collect(),
        }
    });

    let stem = image_stem(Path::new(source));
    let map_path = out_dir.join(format!("{stem}.map.alfb"));
    let mut bundle = Bundle::with_kind("map");
    bundle.set_meta("image_h", canvas.height());
    bundle.set_meta("image_w", canvas.width());
    bundle.set_meta("source_path", source);
    bundle.set_meta("tiles", members.len());
    let tensor = alfa_core::tensor_io::Tensor::from_f32(
        vec![canvas.height(), canvas.width()],
        canvas.to_f32(),
    )
    .map_err(|e| CliError::data(&map_path, e))?;
    bundle
        .insert("anomaly_map", tensor)
        .map_err(|e| CliError::data(&map_path, e))?;
    if let Some(m) = &gt_mask {
        bundle
            .insert("gt_mask", m.to_tensor())
            .map_err(|e| CliError::data(&map_path, e))?;
    }
    save_bundle(&bundle, &map_path)?;

    let best = members
        .iter()
        .copied()
        .max_by(|&a, &b| scored[a].result.score.total_cmp(&scored[b].result.score))
        .unwrap();
    let out = out_dir.join(format!("{stem}.json"));
    let result = AnomalyResult {
        image: source.to_string(),
        score,
        map: Some(map_reference(&out, &map_path)),
        ..scored[best].result.clone()
    };
    write_json(&out, &result)
}

pub fn bank_build(config: &EngineConfig, args: BankBuildArgs) -> Result<()> {
    let scales = args.scales.unwrap_or_else(|| config.scales.clone());
    if scales.is_empty() {
        return Err(CliError::Usage(
            "--scales must name at least one scale".into(),
        ));
    }
    let paths = list_files(&args.bundles, ".alfb")?;
    let references: Vec<ImageEmbeddings> = paths
        .par_iter()
        .map(|p| load_image(p))
        .collect::<Result<_>>()?;
    let bank =
        memory::build_bank(&references, &scales).map_err(|e| CliError::data(&args.bundles, e))?;
    info!(
        "bank: {} references, scales {:?}",
        references.len(),
        bank.scales().collect::<Vec<_>>()
    );
    save_bundle(&bank.to_bundle(), &args.out)
}

#[derive(Debug, Serialize)]
struct ClassReport {
    images: usize,
    anomalous: usize,
    image: Option<ImageMetrics>,
    pixel: Option<PixelMetrics>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    notes: Vec<String>,
}

#[derive(Debug, Serialize)]
struct MacroReport {
    image: Option<ImageMetrics>,
    pixel: Option<PixelMetrics>,
}

#[derive(Debug, Serialize)]
struct EvalReport {
    pro_fpr: f64,
    classes: BTreeMap<String, ClassReport>,
    #[serde(rename = "macro")]
    macro_avg: MacroReport,
}

struct Evaluated {
    class: String,
    score: f64,
    pixels: PixelEval,
}

fn load_evaluated(dir: &Path, path: &Path) -> Result<Evaluated> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let result: AnomalyResult = serde_json::from_str(&text).map_err(|e| CliError::data(path, e))?;
    let map_name = result
        .map
        .as_deref()
        .ok_or_else(|| CliError::data(path, "result has no map bundle"))?;
    let map_path = dir.join(map_name);
    let bundle = load_bundle(&map_path)?;
    let h = bundle
        .meta_usize("image_h")
        .map_err(|e| CliError::data(&map_path, e))?;
    let w = bundle
        .meta_usize("image_w")
        .map_err(|e| CliError::data(&map_path, e))?;
    let scores = bundle
        .f32_tensor("anomaly_map", &[h, w])
        .map_err(|e| CliError::data(&map_path, e))?;
    let mask = Mask::from_bundle(&bundle, "gt_mask").map_err(|e| CliError::data(&map_path, e))?;
    let pixels = PixelEval::new(
        h,
        w,
        scores.iter().map(|&v| f64::from(v)).collect(),
        mask.data,
    )
    .map_err(|e| CliError::data(&map_path, e))?;
    Ok(Evaluated {
        class: result.class.unwrap_or_else(|| "default".into()),
        score: result.score,
        pixels,
    })
}

fn mean_of<T>(items: &[T], f: impl Fn(&T) -> f64) -> f64 {
    items.iter().map(f).sum::<f64>() / items.len() as f64
}

pub fn eval(config: &EngineConfig, args: EvalArgs) -> Result<()> {
    let pro_fpr = args.pro_fpr.unwrap_or(config.pro_fpr);
    if !(pro_fpr > 0.0 && pro_fpr <= 1.0) {
        return Err(CliError::Usage(format!(
            "--pro-fpr must be in (0, 1], got {pro_fpr}"
        )));
    }
    let paths = list_files(&args.results, ".json")?;
    if paths.is_empty() {
        return Err(CliError::data(&args.results, "no result files found"));
    }
    let evaluated: Vec<Evaluated> = paths
        .par_iter()
        .map(|p| load_evaluated(&args.results, p))
        .collect::<Result<_>>()?;

    let mut by_class: BTreeMap<String, Vec<&Evaluated>> = BTreeMap::new();
    for e in &evaluated {
        by_class.entry(e.class.clone()).or_default().push(e);
    }
    let mut classes = BTreeMap::new();
    for (class, items) in by_class {
        let scores: Vec<f64> = items.iter().map(|e| e.score).collect();
        let labels: Vec<bool> = items
            .iter()
            .map(|e| e.pixels.mask().iter().any(|&m| m != 0))
            .collect();
        let evals: Vec<PixelEval> = items.iter().map(|e| e.pixels.clone()).collect();
        let mut notes = Vec::new();
        let image = metrics::image_metrics(&scores, &labels)
            .map_err(|e| notes.push(format!("image metrics: {e}")))
            .ok();
        let pixel = metrics::pixel_metrics(&evals, pro_fpr)
            .map_err(|e| notes.push(format!("pixel metrics: {e}")))
            .ok();
        for n in &notes {
            warn!("{class}: {n}");
        }
        classes.insert(
            class,
            ClassReport {
                images: items.len(),
                anomalous: labels.iter().filter(|&&l| l).count(),
                image,
                pixel,
                notes,
            },
        );
    }

    let image: Vec<ImageMetrics> = classes.values().filter_map(|c| c.image).collect();
    let pixel: Vec<PixelMetrics> = classes.values().filter_map(|c| c.pixel).collect();
    let macro_avg = MacroReport {
        image: (!image.is_empty()).then(|| ImageMetrics {
            auroc: mean_of(&image, |m| m.auroc),
            aupr: mean_of(&image, |m| m.aupr),
            f1_max: mean_of(&image, |m| m.f1_max),
        }),
        pixel: (!pixel.is_empty()).then(|| PixelMetrics {
            pauroc: mean_of(&pixel, |m| m.pauroc),
            pro: mean_of(&pixel, |m| m.pro),
            pf1_max: mean_of(&pixel, |m| m.pf1_max),
        }),
    };
    write_json(
        &args.out,
        &EvalReport {
            pro_fpr,
            classes,
            macro_avg,
        },
    )
}

pub fn descriptors(args: DescriptorsArgs) -> Result<()> {
    let image = load_image(&args.image_bundle)?;
    let pool = load_prompts(&args.prompt_bundle)?;
    if pool.dim != image.dim {
        return Err(CliError::data(
            &args.prompt_bundle,
            format!(
                "embed_dim {} does not match image embed_dim {}",
                pool.dim, image.dim
            ),
        ));
    }
    let wanted = |p: Polarity| match args.polarity {
        PolarityFilter::All => true,
        PolarityFilter::Normal => p == Polarity::Normal,
        PolarityFilter::Abnormal => p == Polarity::Abnormal,
    };
    let candidates: Vec<_> = pool
        .prompts
        .iter()
        .filter(|p| wanted(p.prompt.polarity))
        .collect();
    let ranked = scoring::rank_descriptors(
        &image.cls,
        candidates
            .iter()
            .map(|p| (p.prompt.text.as_str(), p.embedding.as_slice())),
        args.top,
    );
    let polarity_of: BTreeMap<&str, Polarity> = candidates
        .iter()
        .rev()
        .map(|p| (p.prompt.text.as_str(), p.prompt.polarity))
        .collect();
    let descriptors: Vec<_> = ranked
        .iter()
        .map(|(text, sim)| json!({"text": text, "polarity": polarity_of[text.as_str()], "similarity": sim}))
        .collect();
    write_json(
        &args.out,
        &json!({"image": image.source_path, "descriptors": descriptors}),
    )
}

pub fn synth(args: SynthArgs) -> Result<()> {
    let mut config = match args.preset {
        Preset::Separated => SynthConfig::default(),
        Preset::Ambiguous => SynthConfig::ambiguous(),
    };
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(v) = args.dim {
        config.dim = v;
    }
    if let Some(v) = args.grid {
        config.grid = v;
    }
    if let Some(v) = args.separation {
        config.separation = v;
    }
    if let Some(v) = args.normal {
        config.n_normal = v;
    }
    if let Some(v) = args.abnormal {
        config.n_abnormal = v;
    }
    if config.dim < 5 {
        return Err(CliError::Usage("--dim must be at least 5".into()));
    }
    if config.grid == 0 || config.n_normal + config.n_abnormal == 0 {
        return Err(CliError::Usage(
            "--grid and the image counts must be positive".into(),
        ));
    }
    if !(0.0..=1.0).contains(&config.separation) {
        return Err(CliError::Usage("--separation must be in [0, 1]".into()));
    }
    if config.scales.iter().any(|&s| s > config.grid) {
        return Err(CliError::Usage(format!(
            "--grid {} is smaller than scale {:?}",
            config.grid, config.scales
        )));
    }

    let fixture = synth::synth_fixture(&config);
    let images_dir = args.out_dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| CliError::io(&images_dir, e))?;
    for image in &fixture.images {
        let name = image
            .source_path
            .rsplit('/')
            .next()
            .unwrap_or(&image.source_path);
        save_bundle(&image.to_bundle(), &images_dir.join(format!("{name}.alfb")))?;
    }
    save_bundle(
        &fixture.prompts.to_bundle(),
        &args.out_dir.join("prompts.alfb"),
    )?;
    let anomalous = fixture.labels.iter().filter(|&&l| l).count();
    write_json(
        &args.out_dir.join("fixture.json"),
        &json!({
            "config": config,
            "images": fixture.images.len(),
            "anomalous": anomalous,
            "prompts": fixture.prompts.prompts.len(),
        }),
    )
}
