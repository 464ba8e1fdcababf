//! The operations behind each command-line subcommand.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::config::{Method, RunConfig, TemplateSource};
use super::manifest::{FileRecord, RunManifest};
use super::tiling::{tile_image, EdgePolicy, TileSpec};
use crate::classical::TemplateStats;
use crate::color::{select_template_detailed, RgbImage};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::metrics::{ms_ssim, ssim, uqi, MetricReport, MetricRow};
use crate::model::{load_checkpoint, save_checkpoint, LossReport, StainPidr, Trainer};

/// File extensions treated as images (case-insensitive).
pub const IMAGE_EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "tif", "tiff"];
pub const MANIFEST_NAME: &str = "manifest.json";
pub const WINNER_HISTOGRAM_NAME: &str = "template-histogram.txt";
pub const MEAN_HISTOGRAM_NAME: &str = "mean-histogram.txt";

/// Files handed to the workers at once; results are written between batches.
const BATCH: usize = 64;

fn required<'a>(field: &'a Option<PathBuf>, name: &str) -> Result<&'a Path> {
    field
        .as_deref()
        .ok_or_else(|| Error::Config(format!("{name} is not set")))
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.iter().any(|x| x.eq_ignore_ascii_case(e)))
}

/// Image files directly inside `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::from(e).at(dir))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::from(e).at(dir))?.path();
        if path.is_file() && is_image(&path) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn file_name(path: &Path) -> String {
    path.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned())
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(String::new, |n| n.to_string_lossy().into_owned())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::from(e).at(dir))
}

/// Chosen template and where its statistics were written.
#[derive(Clone, Debug)]
pub struct TemplateChoice {
    pub path: PathBuf,
    pub index: usize,
    /// Wasserstein distance of the winner to the mean histogram.
    pub distance: f64,
    pub histogram_path: PathBuf,
    pub mean_histogram_path: PathBuf,
    /// Inputs that could not be decoded.
    pub skipped: Vec<FileRecord>,
}

/// Picks the image of `input_dir` closest to the dataset's mean color histogram.
///
/// The winning and mean histograms are written to `out_dir`, or beside the
/// winner when no directory is given.
pub fn cmd_select_template(input_dir: &Path, bins: usize, out_dir: Option<&Path>, mode: Execution) -> Result<TemplateChoice> {
    let files = list_images(input_dir)?;
    let loaded = exec::map(&files, mode, |p| RgbImage::load(p));
    let mut images = Vec::new();
    let mut paths = Vec::new();
    let mut skipped = Vec::new();
    for (path, img) in files.into_iter().zip(loaded) {
        match img {
            Ok(img) => {
                images.push(img);
                paths.push(path);
            }
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                skipped.push(FileRecord::skipped(file_name(&path), e));
            }
        }
    }
    if images.is_empty() {
        return Err(Error::Empty("decodable images").at(input_dir));
    }
    let selection = select_template_detailed(&images, bins, mode)?;
    let path = paths.swap_remove(selection.index);
    let dir = out_dir.map_or_else(|| path.parent().unwrap_or(Path::new(".")).to_path_buf(), Path::to_path_buf);
    create_dir(&dir)?;
    let histogram_path = dir.join(WINNER_HISTOGRAM_NAME);
    let mean_histogram_path = dir.join(MEAN_HISTOGRAM_NAME);
    std::fs::write(&histogram_path, selection.winner().to_text()).map_err(|e| Error::from(e).at(&histogram_path))?;
    std::fs::write(&mean_histogram_path, selection.mean.to_text()).map_err(|e| Error::from(e).at(&mean_histogram_path))?;
    Ok(TemplateChoice {
        path,
        index: selection.index,
        distance: selection.distances[selection.index],
        histogram_path,
        mean_histogram_path,
        skipped,
    })
}

/// Cuts every image of `config.input_dir` into tiles written to `config.output_dir`
/// as `<stem>_x<X>_y<Y>.png`.
pub fn cmd_tile(config: &RunConfig) -> Result<RunManifest> {
    let start = Instant::now();
    let input = required(&config.input_dir, "input_dir")?;
    let output = required(&config.output_dir, "output_dir")?;
    create_dir(output)?;
    let files = list_images(input)?;
    let mut manifest = RunManifest::new("tile", config);
    let spec = config.tile;
    exec::with_threads(config.threads, || -> Result<()> {
        for chunk in files.chunks(BATCH) {
            let results = exec::map(chunk, parallelism(config.threads), |p| {
                let t = Instant::now();
                let tiles = RgbImage::load(p).and_then(|img| tile_image(&img, &spec));
                (tiles, t.elapsed().as_secs_f64())
            });
            for (path, (tiles, secs)) in chunk.iter().zip(results) {
                let record = match tiles.and_then(|tiles| write_tiles(output, &stem(path), &tiles)) {
                    Ok(parts) => FileRecord {
                        output: parts.first().cloned(),
                        parts,
                        ..FileRecord::ok(file_name(path), "")
                    },
                    Err(e) => {
                        log::warn!("skipping {}: {e}", path.display());
                        FileRecord::skipped(file_name(path), e)
                    }
                };
                manifest.files.push(record);
                manifest.timings.per_file_seconds.push(secs);
            }
        }
        Ok(())
    })?;
    manifest.timings.total_seconds = start.elapsed().as_secs_f64();
    manifest.write(output.join(MANIFEST_NAME))?;
    Ok(manifest)
}

fn write_tiles(dir: &Path, stem: &str, tiles: &[super::tiling::Tile]) -> Result<Vec<String>> {
    tiles
        .iter()
        .map(|t| {
            let name = format!("{stem}_x{}_y{}.png", t.x, t.y);
            t.image.save(dir.join(&name))?;
            Ok(name)
        })
        .collect()
}

/// A prepared normalizer: template statistics or a loaded network.
pub enum Normalizer {
    Classical(TemplateStats),
    Pidr { model: Box<StainPidr>, template: RgbImage },
}

/// Square crop of side `size` from the middle of `img`.
fn center_crop(img: &RgbImage, size: usize) -> Result<RgbImage> {
    if img.width() < size || img.height() < size {
        return Err(Error::ImageTooSmall {
            width: img.width(),
            height: img.height(),
            min: size,
        });
    }
    img.crop((img.width() - size) / 2, (img.height() - size) / 2, size, size)
}

impl Normalizer {
    pub fn new(method: Method, template: &RgbImage, checkpoint: Option<&Path>) -> Result<Self> {
        match method.classical() {
            Some(m) => Ok(Normalizer::Classical(TemplateStats::fit(m, template)?)),
            None => {
                let path = checkpoint.ok_or_else(|| Error::Config("method pidr needs a checkpoint".into()))?;
                let model = load_checkpoint(path)?;
                let template = center_crop(template, model.config().image_size)?;
                Ok(Normalizer::Pidr {
                    model: Box::new(model),
                    template,
                })
            }
        }
    }

    /// Normalizes one image. The network handles images larger than its tile
    /// size by normalizing border-aligned tiles and pasting them in order.
    pub fn apply(&self, img: &RgbImage) -> Result<RgbImage> {
        match self {
            Normalizer::Classical(stats) => stats.apply(img),
            Normalizer::Pidr { model, template } => {
                let size = model.config().image_size;
                if img.width() == size && img.height() == size {
                    return model.normalize_image(img, template);
                }
                let spec = TileSpec {
                    tile_size: size,
                    edge_policy: EdgePolicy::Retain,
                };
                let mut out = img.clone();
                for tile in tile_image(img, &spec)? {
                    let restained = model.normalize_image(&tile.image, template)?;
                    for y in 0..size {
                        for x in 0..size {
                            out.put(tile.x + x, tile.y + y, restained.get(x, y));
                        }
                    }
                }
                Ok(out)
            }
        }
    }
}

fn resolve_template(config: &RunConfig, input: &Path, mode: Execution) -> Result<(PathBuf, RgbImage)> {
    let path = match &config.template {
        TemplateSource::Path(p) => p.clone(),
        TemplateSource::Auto => cmd_select_template(input, config.bins, config.output_dir.as_deref(), mode)?.path,
    };
    let img = RgbImage::load(&path)?;
    Ok((path, img))
}

fn parallelism(threads: usize) -> Execution {
    if threads == 1 {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

/// Normalizes every image of `config.input_dir` into `config.output_dir`
/// (PNG, same stem) and writes a manifest there.
///
/// Unreadable or unprocessable files are recorded as skipped; an empty input
/// directory produces an empty manifest.
pub fn cmd_normalize(config: &RunConfig) -> Result<RunManifest> {
    let start = Instant::now();
    config.validate()?;
    let input = required(&config.input_dir, "input_dir")?;
    let output = required(&config.output_dir, "output_dir")?;
    create_dir(output)?;
    let files = list_images(input)?;
    let mut manifest = RunManifest::new("normalize", config);
    if files.is_empty() {
        log::warn!("no images found in {}", input.display());
        manifest.timings.total_seconds = start.elapsed().as_secs_f64();
        manifest.write(output.join(MANIFEST_NAME))?;
        return Ok(manifest);
    }
    let mode = parallelism(config.threads);
    exec::with_threads(config.threads, || -> Result<()> {
        let (template_path, template) = resolve_template(config, input, mode)?;
        log::info!("template: {}", template_path.display());
        manifest.template = Some(template_path.to_string_lossy().into_owned());
        let normalizer = Normalizer::new(config.method, &template, config.checkpoint.as_deref())?;

        let mut taken: BTreeMap<String, String> = BTreeMap::new();
        for chunk in files.chunks(BATCH) {
            let results = exec::map(chunk, mode, |p| {
                let t = Instant::now();
                let out = RgbImage::load(p).and_then(|img| normalizer.apply(&img));
                (out, t.elapsed().as_secs_f64())
            });
            for (path, (result, secs)) in chunk.iter().zip(results) {
                let name = format!("{}.png", stem(path));
                let record = match result {
                    Ok(_) if taken.contains_key(&name) => {
                        FileRecord::skipped(file_name(path), format!("output {name} already written for {}", taken[&name]))
                    }
                    Ok(img) => match img.save(output.join(&name)) {
                        Ok(()) => {
                            taken.insert(name.clone(), file_name(path));
                            FileRecord::ok(file_name(path), name)
                        }
                        Err(e) => FileRecord::skipped(file_name(path), e),
                    },
                    Err(e) => FileRecord::skipped(file_name(path), e),
                };
                if let Some(err) = &record.error {
                    log::warn!("skipping {}: {err}", path.display());
                }
                manifest.files.push(record);
                manifest.timings.per_file_seconds.push(secs);
            }
        }
        Ok(())
    })?;
    manifest.timings.total_seconds = start.elapsed().as_secs_f64();
    manifest.write(output.join(MANIFEST_NAME))?;
    Ok(manifest)
}

/// Loads a training domain, cutting larger images into model-sized tiles.
/// Any unreadable file aborts.
fn load_domain(dir: &Path, size: usize) -> Result<Vec<RgbImage>> {
    let spec = TileSpec {
        tile_size: size,
        edge_policy: EdgePolicy::Discard,
    };
    let mut tiles = Vec::new();
    for path in list_images(dir)? {
        let img = RgbImage::load(&path)?;
        let before = tiles.len();
        tiles.extend(tile_image(&img, &spec).map_err(|e| e.at(&path))?.into_iter().map(|t| t.image));
        if tiles.len() == before {
            log::warn!("{} is smaller than {size}x{size}; ignored", path.display());
        }
    }
    if tiles.is_empty() {
        return Err(Error::Empty("training tiles").at(dir));
    }
    Ok(tiles)
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub history: Vec<LossReport>,
    pub used_codebook_entries: usize,
}

fn default_loss_csv(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.file_name().unwrap_or_default().to_os_string();
    name.push(".loss.csv");
    checkpoint.with_file_name(name)
}

/// Trains the network on two domain directories and writes a checkpoint and a loss-curve CSV.
///
/// Training runs on the calling thread.
pub fn cmd_train(config: &RunConfig) -> Result<TrainSummary> {
    config.validate()?;
    let model_config = config.seeded_model();
    let domain_a = load_domain(required(&config.domain_a_dir, "domain_a_dir")?, model_config.image_size)?;
    let domain_b = load_domain(required(&config.domain_b_dir, "domain_b_dir")?, model_config.image_size)?;
    let checkpoint = required(&config.checkpoint, "checkpoint")?.to_path_buf();
    let loss_csv = config.train.loss_csv.clone().unwrap_or_else(|| default_loss_csv(&checkpoint));
    for p in [&checkpoint, &loss_csv] {
        if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            create_dir(parent)?;
        }
    }
    log::info!(
        "training on {} + {} tiles for {} steps",
        domain_a.len(),
        domain_b.len(),
        config.train.steps
    );

    let previous = exec::kernel_execution();
    exec::set_kernel_execution(Execution::Sequential);
    let mut trainer = Trainer::new(StainPidr::new(model_config)?);
    let log_every = config.train.log_every;
    let result = trainer.fit(&domain_a, &domain_b, config.train.steps, |step, r| {
        if log_every > 0 && step % log_every == 0 {
            log::info!("step {step}: total {:.4} recon {:.4}/{:.4}", r.total, r.recon_a, r.recon_b);
        }
    });
    exec::set_kernel_execution(previous);
    let history = result?;

    let run = || -> Result<()> {
        let mut w = csv::Writer::from_writer(BufWriter::new(File::create(&loss_csv)?));
        let mut header = vec!["step"];
        header.extend(LossReport::COLUMNS);
        w.write_record(&header)?;
        for (i, r) in history.iter().enumerate() {
            let mut row = vec![(i + 1).to_string()];
            row.extend(r.values().iter().map(|v| format!("{v:.9}")));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    };
    run().map_err(|e| e.at(&loss_csv))?;
    save_checkpoint(&checkpoint, trainer.model())?;
    Ok(TrainSummary {
        checkpoint,
        loss_csv,
        used_codebook_entries: trainer.model().codebook().used_entries(),
        history,
    })
}

#[derive(Clone, Debug)]
pub struct EvalSummary {
    pub report: MetricReport,
    pub csv: PathBuf,
    /// Files present on only one side, prefixed by the directory role.
    pub unmatched: Vec<String>,
    /// Matched pairs whose metrics could not be computed.
    pub skipped: Vec<FileRecord>,
}

impl EvalSummary {
    pub fn is_partial(&self) -> bool {
        !self.unmatched.is_empty() || !self.skipped.is_empty()
    }
}

fn by_stem(files: Vec<PathBuf>) -> BTreeMap<String, PathBuf> {
    let mut map = BTreeMap::new();
    for f in files {
        map.entry(stem(&f)).or_insert(f);
    }
    map
}

/// Scores every image of `config.output_dir` against the reference with the same stem.
///
/// The CSV goes to `csv`, defaulting to `metrics.csv` inside the output directory.
pub fn cmd_evaluate(config: &RunConfig, csv: Option<&Path>) -> Result<EvalSummary> {
    let outputs = by_stem(list_images(required(&config.output_dir, "output_dir")?)?);
    let references = by_stem(list_images(required(&config.reference_dir, "reference_dir")?)?);
    let mut unmatched: Vec<String> = outputs
        .iter()
        .filter(|(k, _)| !references.contains_key(*k))
        .map(|(_, p)| format!("output:{}", file_name(p)))
        .collect();
    unmatched.extend(
        references
            .iter()
            .filter(|(k, _)| !outputs.contains_key(*k))
            .map(|(_, p)| format!("reference:{}", file_name(p))),
    );
    for u in &unmatched {
        log::warn!("no counterpart for {u}; skipped");
    }
    let pairs: Vec<(String, PathBuf, PathBuf)> = outputs
        .iter()
        .filter_map(|(k, p)| references.get(k).map(|r| (k.clone(), p.clone(), r.clone())))
        .collect();
    let mode = parallelism(config.threads);
    let scored = exec::with_threads(config.threads, || {
        exec::map(&pairs, mode, |(id, out, reference)| -> Result<MetricRow> {
            let a = RgbImage::load(out)?;
            let b = RgbImage::load(reference)?;
            Ok(MetricRow {
                image_id: id.clone(),
                ssim: ssim(&a, &b)?,
                ms_ssim: ms_ssim(&a, &b)?,
                uqi: uqi(&a, &b)?,
            })
        })
    });
    let mut report = MetricReport::default();
    let mut skipped = Vec::new();
    for ((id, _, _), row) in pairs.iter().zip(scored) {
        match row {
            Ok(row) => report.push(row),
            Err(e) => {
                log::warn!("cannot score {id}: {e}");
                skipped.push(FileRecord::skipped(id.clone(), e));
            }
        }
    }
    let csv = match csv {
        Some(p) => p.to_path_buf(),
        None => required(&config.output_dir, "output_dir")?.join("metrics.csv"),
    };
    let write = || -> Result<()> { report.write_csv(BufWriter::new(File::create(&csv)?)) };
    write().map_err(|e| e.at(&csv))?;
    Ok(EvalSummary {
        report,
        csv,
        unmatched,
        skipped,
    })
}
