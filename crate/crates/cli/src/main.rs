use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use emvq::checkpoint::EpochRecord;
use emvq::pipeline::{decode_top_only, decode_with_prior, encode_frame, DecodeMode};
use emvq::pixeldata::{load_grayscale, load_grayscale_with};
use emvq::prior::Sampling;
use emvq::synth::{synth_frame, SynthParams};
use emvq::tokenstream::{
    digest_hex, pack_container, parse_boxes, parse_container, ratio_report, roi_extract, roi_pack, RoiEncoding,
};
use emvq::trainer::{evaluate, list_frames, load_tiles, train, train_prior, write_eval_csv, EVAL_CSV_HEADER};
use emvq::{Checkpoint, Error, TrainConfig};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

/// Discrete-token codec for grayscale electron-microscopy frames.
///
/// Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numerical failure.
#[derive(Parser, Debug)]
#[command(name = "emvq", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic frames (band-limited texture with dark membranes).
    Synth {
        /// Output directory, created if missing.
        out_dir: PathBuf,
        /// Number of frames.
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 256)]
        height: usize,
        #[arg(long, default_value_t = 256)]
        width: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the autoencoder on every frame of a directory.
    Train {
        data_dir: PathBuf,
        out_checkpoint: PathBuf,
        /// key=value config file; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Per-epoch CSV log [default: <out_checkpoint>.log.csv].
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train the bottom-token prior of a two-level checkpoint.
    PriorTrain {
        checkpoint: PathBuf,
        data_dir: PathBuf,
        out_checkpoint: PathBuf,
        /// Prior initialization and batch-sampling seed [default: the checkpoint seed].
        #[arg(long)]
        seed: Option<u64>,
        /// Per-step CSV log [default: <out_checkpoint>.prior.csv].
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Encode a frame into an .emvq container.
    Encode {
        frame: PathBuf,
        checkpoint: PathBuf,
        out: PathBuf,
        /// Downsampling stages (2..=5); the nominal ratio is 4^d_s.
        #[arg(long = "d-s", default_value_t = 2)]
        d_s: u8,
        /// Keep only even-parity grid positions (doubles the ratio).
        #[arg(long, default_value_t = false)]
        checkerboard: bool,
        /// Convert color inputs to luma instead of rejecting them.
        #[arg(long, default_value_t = false)]
        convert_color: bool,
    },
    /// Decode a container to a PNG.
    Decode {
        input: PathBuf,
        checkpoint: PathBuf,
        out: PathBuf,
        /// top-only or prior.
        #[arg(long, default_value = "top-only")]
        mode: String,
        /// Sampling seed for prior mode.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Prior sampling temperature; greedy when omitted.
        #[arg(long)]
        temperature: Option<f64>,
        /// Restrict temperature sampling to the k most likely codes.
        #[arg(long)]
        top_k: Option<usize>,
        /// Decode even if the container digest does not match the checkpoint.
        #[arg(long, default_value_t = false)]
        force_digest: bool,
    },
    /// Evaluate reconstructions per compression ratio and write CSV.
    Eval {
        checkpoint: PathBuf,
        data_dir: PathBuf,
        /// Comma-separated nominal ratios, e.g. 16,64.
        #[arg(long, value_delimiter = ',', default_value = "16")]
        ratios: Vec<u64>,
        /// CSV output [default: stdout].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Append full-resolution ROI crops to a container.
    RoiPack {
        input: PathBuf,
        /// The uncompressed frame the container was encoded from.
        frame: PathBuf,
        /// One `x y h w` box per line.
        boxes: PathBuf,
        /// raw8, png or avif.
        #[arg(long, default_value = "png")]
        encoding: String,
        /// Output container [default: rewrite the input].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write one ROI of a container as PNG.
    RoiExtract {
        input: PathBuf,
        index: usize,
        out: PathBuf,
    },
    /// Print container header fields and ratios.
    Info { input: PathBuf },
}

fn usage(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::InvalidArgument(_) => EXIT_USAGE,
        Error::NonFinite(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

fn require_dir(path: &Path) -> Result<(), Error> {
    if !path.is_dir() {
        return Err(usage(format!("data directory {} does not exist", path.display())));
    }
    Ok(())
}

fn read(path: &Path) -> Result<Vec<u8>, Error> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Synth {
            out_dir,
            count,
            height,
            width,
            seed,
        } => {
            fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
            let params = SynthParams::new(height, width);
            for i in 0..count {
                let frame = synth_frame(&params, seed.wrapping_add(i as u64))?;
                let path = out_dir.join(format!("synth_{i:04}.png"));
                frame.save_png(&path)?;
                println!("{}", path.display());
            }
        }
        Command::Train {
            data_dir,
            out_checkpoint,
            config,
            seed,
            log,
        } => {
            require_dir(&data_dir)?;
            let mut cfg = match config {
                Some(p) => TrainConfig::from_file(&p)?,
                None => TrainConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let tiles = load_tiles(&data_dir, cfg.tile_size)?;
            let log_path = log.unwrap_or_else(|| with_suffix(&out_checkpoint, ".log.csv"));
            let mut log_file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
            writeln!(log_file, "{}", EpochRecord::CSV_HEADER).map_err(|e| Error::io(&log_path, e))?;
            let mut io_err = None;
            let mut hook = |r: &EpochRecord| {
                if let Err(e) = writeln!(log_file, "{}", r.to_csv()) {
                    io_err.get_or_insert(e);
                }
            };
            let outcome = train(&cfg, &tiles, Some(&mut hook))?;
            if let Some(e) = io_err {
                return Err(Error::io(&log_path, e));
            }
            outcome.checkpoint.save(&out_checkpoint)?;
            if let Some(msg) = outcome.aborted {
                return Err(Error::NonFinite(format!(
                    "{msg}; last good checkpoint written to {}",
                    out_checkpoint.display()
                )));
            }
            println!(
                "trained {} steps over {} tiles, digest {}",
                outcome.step_losses.len(),
                tiles.len(),
                digest_hex(&outcome.checkpoint.digest())
            );
        }
        Command::PriorTrain {
            checkpoint,
            data_dir,
            out_checkpoint,
            seed,
            log,
        } => {
            require_dir(&data_dir)?;
            let mut ck = Checkpoint::load(&checkpoint)?;
            let tiles = load_tiles(&data_dir, ck.tile_size())?;
            let seed = seed.unwrap_or(ck.config.seed);
            let losses = train_prior(&mut ck, &tiles, seed)?;
            let log_path = log.unwrap_or_else(|| with_suffix(&out_checkpoint, ".prior.csv"));
            let mut text = String::from("step,loss\n");
            for (i, l) in losses.iter().enumerate() {
                text.push_str(&format!("{i},{l}\n"));
            }
            write(&log_path, text.as_bytes())?;
            ck.save(&out_checkpoint)?;
            println!(
                "prior trained for {} steps, final loss {:.4} nats/token",
                losses.len(),
                losses.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Encode {
            frame,
            checkpoint,
            out,
            d_s,
            checkerboard,
            convert_color,
        } => {
            if !(2..=5).contains(&d_s) {
                return Err(usage(format!("--d-s must be in 2..=5, got {d_s}")));
            }
            let ck = Checkpoint::load(&checkpoint)?;
            let image = load_grayscale_with(&frame, convert_color)?;
            let container = encode_frame(&ck.model, ck.tile_size(), ck.digest(), &image, d_s, checkerboard)?;
            write(&out, &pack_container(&container)?)?;
        }
        Command::Decode {
            input,
            checkpoint,
            out,
            mode,
            seed,
            temperature,
            top_k,
            force_digest,
        } => {
            let mode: DecodeMode = mode.parse()?;
            let container = parse_container(&read(&input)?)?;
            let ck = Checkpoint::load(&checkpoint)?;
            let digest = ck.digest();
            if container.header.model_digest != digest {
                if !force_digest {
                    return Err(Error::DigestMismatch {
                        container: digest_hex(&container.header.model_digest),
                        checkpoint: digest_hex(&digest),
                    });
                }
                log::warn!("container digest does not match the checkpoint; decoding anyway");
            }
            let frame = match mode {
                DecodeMode::TopOnly => decode_top_only(&ck.model, ck.tile_size(), &container)?,
                DecodeMode::Prior => {
                    let prior = ck
                        .prior
                        .as_ref()
                        .ok_or_else(|| Error::Unsupported("checkpoint has no prior section".into()))?;
                    let vq = ck
                        .model
                        .as_vq()
                        .ok_or_else(|| Error::Unsupported("prior mode needs a learned model".into()))?;
                    let sampling = match temperature {
                        Some(t) => Sampling::Temperature { temperature: t, top_k },
                        None => Sampling::Greedy,
                    };
                    decode_with_prior(vq, prior, &container, sampling, seed)?
                }
            };
            frame.save_png(&out)?;
        }
        Command::Eval {
            checkpoint,
            data_dir,
            ratios,
            out,
        } => {
            require_dir(&data_dir)?;
            let ck = Checkpoint::load(&checkpoint)?;
            let frames = list_frames(&data_dir)?
                .into_iter()
                .map(|p| {
                    let id = p.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
                    load_grayscale(&p).map(|f| (id, f))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let rows = evaluate(&ck, &frames, &ratios)?;
            match out {
                Some(path) => write_eval_csv(&path, &rows)?,
                None => {
                    println!("{EVAL_CSV_HEADER}");
                    for r in &rows {
                        println!("{}", r.to_csv());
                    }
                }
            }
        }
        Command::RoiPack {
            input,
            frame,
            boxes,
            encoding,
            out,
        } => {
            let encoding: RoiEncoding = encoding.parse()?;
            let mut container = parse_container(&read(&input)?)?;
            let image = load_grayscale(&frame)?;
            let h = &container.header;
            if (image.height(), image.width()) != (h.frame_height as usize, h.frame_width as usize) {
                return Err(Error::Format(format!(
                    "frame is {}x{} but the container holds a {}x{} frame",
                    image.height(),
                    image.width(),
                    h.frame_height,
                    h.frame_width
                )));
            }
            let text = fs::read_to_string(&boxes).map_err(|e| Error::io(&boxes, e))?;
            let records = roi_pack(&image, &parse_boxes(&text)?, encoding)?;
            let n = records.len();
            container.push_rois(records)?;
            write(out.as_ref().unwrap_or(&input), &pack_container(&container)?)?;
            println!("packed {n} ROI(s)");
        }
        Command::RoiExtract { input, index, out } => {
            roi_extract(&read(&input)?, index)?.save_png(&out)?;
        }
        Command::Info { input } => {
            let bytes = read(&input)?;
            let c = parse_container(&bytes)?;
            let h = &c.header;
            let report = ratio_report(h, bytes.len(), h.frame_height as usize * h.frame_width as usize);
            println!("frame: {}x{}", h.frame_height, h.frame_width);
            println!("d_s: {}", h.downsample_stages);
            println!("grid: {}x{}", h.grid_rows, h.grid_cols);
            println!("codebook_size: {}", h.codebook_size);
            println!("embed_dim: {}", h.embed_dim);
            println!("checkerboard: {}", h.checkerboard);
            println!("two_level_hint: {}", h.two_level_hint);
            println!("tokens: {} x {} bits", h.token_count, report.token_bits_per_token);
            println!("rois: {}", c.rois.len());
            println!("model_digest: {}", digest_hex(&h.model_digest));
            println!("container_bytes: {}", bytes.len());
            println!("nominal_ratio: {}x", report.nominal_ratio);
            println!("actual_ratio: {:.2}x", report.actual_ratio);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
