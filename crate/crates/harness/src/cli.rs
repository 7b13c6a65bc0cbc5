//! `elitekv` command line.

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use elitekv_core::lowrank::{allocate_slrd_split, AllocationRequest};
use elitekv_core::{
    cost_jlrd, cost_slrd, decompose_jlrd, decompose_slrd, split_key_projection, CostReport,
    FactorMode, ModelConfig, ScoreMode, SelectionMethod,
};

use crate::alloc::{allocate, ProxyInputs, ProxyKind};
use crate::elite::{read_elite, write_elite};
use crate::error::{exit, HarnessError, Result};
use crate::format::{
    read_calib, read_factors, read_model, write_calib, write_factors, write_model,
};
use crate::pipeline::{run_pipeline, simulate, RunManifest};
use crate::report::Record;
use crate::synth::{gen_calib, gen_model, CalibSpec};
use crate::verify::{factor_residual, run_suite, Suite, VerifyInputs};

#[derive(Debug, Parser)]
#[command(
    name = "elitekv",
    version,
    about = "Partial-RoPE and low-rank KV cache toolkit"
)]
pub struct Cli {
    /// Seed for every generator.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (0 = one per core). Never changes any output.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a random model with N(0, 1/d) weights.
    GenModel {
        #[arg(long)]
        layers: usize,
        #[arg(long)]
        heads: usize,
        #[arg(long)]
        head_dim: usize,
        /// Defaults to heads · head_dim.
        #[arg(long)]
        embed_dim: Option<usize>,
        #[arg(long, default_value_t = elitekv_core::rope::DEFAULT_BASE)]
        base: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a random calibration batch.
    GenCalib {
        /// Take the embedding width from this model.
        #[arg(long, conflicts_with = "embed_dim")]
        model: Option<PathBuf>,
        #[arg(long)]
        embed_dim: Option<usize>,
        #[arg(long, default_value_t = 64)]
        vocab: usize,
        #[arg(long, default_value_t = 4)]
        seqs: usize,
        #[arg(long, default_value_t = 16)]
        len: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Select elite chunks per head.
    Search {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        calib: PathBuf,
        #[arg(long, default_value = "ropelite")]
        method: SelectionMethod,
        #[arg(long)]
        r: usize,
        #[arg(long, default_value = "pre")]
        score: ScoreMode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Factorize the non-elite keys and the values.
    Decompose {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        elite: PathBuf,
        #[arg(long, default_value = "jlrd")]
        mode: FactorMode,
        /// Joint latent width d_ckv.
        #[arg(long, conflicts_with_all = ["ranks", "budget"])]
        rank: Option<usize>,
        /// Separate latent widths as `d_ck,d_cv`.
        #[arg(long, value_parser = parse_pair, conflicts_with = "budget")]
        ranks: Option<(usize, usize)>,
        /// Separate mode: per-token per-layer cache budget, split greedily.
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank (r, d_ckv) configurations that hit a cache ratio.
    Allocate {
        #[command(flatten)]
        source: ShapeArgs,
        #[arg(long)]
        calib: Option<PathBuf>,
        #[arg(long)]
        target_ratio: f64,
        #[arg(long, default_value_t = 1)]
        alignment: usize,
        /// Accepted distance from the target ratio (0 = exact width).
        #[arg(long, default_value_t = 0.0)]
        tolerance: f64,
        #[arg(long, default_value = "frobenius")]
        proxy: ProxyKind,
        #[arg(long, default_value = "ropelite")]
        method: SelectionMethod,
        #[arg(long, default_value = "pre")]
        score: ScoreMode,
        /// Only consider this r.
        #[arg(long)]
        r: Option<usize>,
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
    /// Decode seeded tokens through the full, partial-RoPE and compressed caches.
    Simulate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        factors: PathBuf,
        #[arg(long, default_value_t = 32)]
        tokens: usize,
    },
    /// Run an invariant suite.
    Verify {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value = "full")]
        suite: Suite,
        #[arg(long)]
        factors: Option<PathBuf>,
        #[arg(long)]
        elite: Option<PathBuf>,
        #[arg(long)]
        calib: Option<PathBuf>,
    },
    /// Cost accounting for one configuration.
    Report {
        #[command(flatten)]
        source: ShapeArgs,
        #[arg(long, default_value = "jlrd")]
        mode: FactorMode,
        #[arg(long)]
        r: usize,
        #[arg(long, conflicts_with = "ranks")]
        rank: Option<usize>,
        #[arg(long, value_parser = parse_pair)]
        ranks: Option<(usize, usize)>,
    },
    /// Run a manifest end to end.
    Pipeline {
        #[arg(long)]
        manifest: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Pre-norm residual blocks: x + attn(rms_norm(x)).
    #[arg(long)]
    pub residual_norm: bool,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct ShapeArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// `layers,heads,head_dim,embed_dim` for shape-only accounting.
    #[arg(long, value_parser = parse_shape)]
    pub shape: Option<ModelConfig>,
}

fn parse_pair(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s
        .split_once(',')
        .ok_or("expected two comma-separated integers")?;
    Ok((
        a.trim().parse().map_err(|e| format!("{e}"))?,
        b.trim().parse().map_err(|e| format!("{e}"))?,
    ))
}

fn parse_shape(s: &str) -> std::result::Result<ModelConfig, String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|x| x.trim().parse().map_err(|e| format!("{e}")))
        .collect::<std::result::Result<_, _>>()?;
    let [l, nh, dh, d] = v[..] else {
        return Err("expected layers,heads,head_dim,embed_dim".into());
    };
    ModelConfig::new(l, nh, dh, d).map_err(|e| e.to_string())
}

fn emit(out: &mut dyn Write, records: &[Record]) -> Result<()> {
    for r in records {
        out.write_all(r.to_line().as_bytes())
            .map_err(|e| HarnessError::io("<stdout>", e))?;
    }
    Ok(())
}

fn load(m: &ModelArgs) -> Result<(ModelConfig, elitekv_core::AttentionWeights)> {
    let (cfg, w) = read_model(&m.model)?;
    Ok((cfg.with_residual_norm(m.residual_norm), w))
}

/// Parses `args`, runs, and returns the process exit code. Errors go to
/// `err`, reports to `out`.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{e}");
            return if e.use_stderr() {
                exit::VALIDATION
            } else {
                exit::OK
            };
        }
    };
    match run(cli, out) {
        Ok(()) => exit::OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(|e| HarnessError::Invalid(format!("thread pool: {e}")))?;
    let seed = cli.seed;
    // reports are buffered so the worker pool never touches the caller's writer
    let mut buf = Vec::new();
    let res = pool.install(|| dispatch(cli.command, seed, &mut buf));
    out.write_all(&buf)
        .map_err(|e| HarnessError::io("<stdout>", e))?;
    res
}

fn dispatch(cmd: Command, seed: u64, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::GenModel {
            layers,
            heads,
            head_dim,
            embed_dim,
            base,
            out: path,
        } => {
            let cfg = ModelConfig::with_base(
                layers,
                heads,
                head_dim,
                embed_dim.unwrap_or(heads * head_dim),
                base,
            )?;
            write_model(&path, &cfg, &gen_model(seed, &cfg))
        }
        Command::GenCalib {
            model,
            embed_dim,
            vocab,
            seqs,
            len,
            out: path,
        } => {
            let d = match (model, embed_dim) {
                (Some(m), _) => read_model(&m)?.0.embed_dim,
                (None, Some(d)) => d,
                (None, None) => {
                    return Err(HarnessError::Invalid("give --model or --embed-dim".into()))
                }
            };
            if d == 0 || vocab == 0 || seqs == 0 || len == 0 {
                return Err(HarnessError::Invalid(
                    "calibration dimensions must be positive".into(),
                ));
            }
            write_calib(
                &path,
                &gen_calib(
                    seed,
                    d,
                    CalibSpec {
                        vocab,
                        n_seqs: seqs,
                        seq_len: len,
                    },
                ),
            )
        }
        Command::Search {
            model,
            calib,
            method,
            r,
            score,
            out: path,
        } => {
            let (cfg, w) = load(&model)?;
            let calib = read_calib(&calib)?;
            let batch = calib.batch()?;
            let (sel, stats) =
                elitekv_core::chunk_select::select(method, &cfg, &w, &batch, r, score)?;
            let dist =
                elitekv_core::chunk_select::selection_distances(&cfg, &w, &batch, &sel, score)?;
            write_elite(&path, &sel)?;
            emit(
                out,
                &[Record::Search {
                    method: method.to_string(),
                    r,
                    score: score.to_string(),
                    forward_passes: stats.map(|s| s.forward_passes),
                    expected_forward_passes: elitekv_core::chunk_select::expected_forward_passes(
                        cfg.n_chunks(),
                        r,
                    ),
                    total_distance: dist.iter().flatten().sum(),
                }],
            )
        }
        Command::Decompose {
            model,
            elite,
            mode,
            rank,
            ranks,
            budget,
            out: path,
        } => {
            let (cfg, w) = load(&model)?;
            let sel = read_elite(&elite, &cfg)?;
            let mut factors = Vec::with_capacity(cfg.n_layers);
            let mut records = Vec::new();
            for (l, lw) in w.layers.iter().enumerate() {
                let split = split_key_projection(&lw.wk, &sel, l)?;
                let f = match (mode, rank, ranks, budget) {
                    (FactorMode::Jlrd, Some(k), None, None) => decompose_jlrd(&split, &lw.wv, k)?,
                    (FactorMode::Slrd, None, Some((k, v)), None) => {
                        decompose_slrd(&split, &lw.wv, k, v)?
                    }
                    (FactorMode::Slrd, None, None, Some(b)) => {
                        let (k, v) = allocate_slrd_split(&split.rest, &lw.wv, b, sel.r, &cfg)?;
                        decompose_slrd(&split, &lw.wv, k, v)?
                    }
                    (FactorMode::Jlrd, ..) => {
                        return Err(HarnessError::Invalid("jlrd takes --rank".into()))
                    }
                    (FactorMode::Slrd, ..) => {
                        return Err(HarnessError::Invalid(
                            "slrd takes --ranks K,V or --budget".into(),
                        ))
                    }
                };
                let (residual, oracle, _) = factor_residual(&split, &lw.wv, &f)?;
                records.push(Record::Factor {
                    layer: l,
                    key_rank: f.key_rank(),
                    value_rank: f.value_rank(),
                    residual,
                    oracle,
                });
                factors.push(f);
            }
            let (k, v) = (factors[0].key_rank(), factors[0].value_rank());
            let cost = match mode {
                FactorMode::Jlrd => cost_jlrd(&cfg, sel.r, k),
                FactorMode::Slrd => cost_slrd(&cfg, sel.r, k, v),
            };
            write_factors(&path, &cfg, &factors)?;
            records.insert(0, Record::cost(&cfg, mode, sel.r, k, v, &cost));
            emit(out, &records)
        }
        Command::Allocate {
            source,
            calib,
            target_ratio,
            alignment,
            tolerance,
            proxy,
            method,
            score,
            r,
            top,
        } => {
            let req = AllocationRequest {
                target_ratio,
                alignment,
                tolerance,
            };
            let ranked = match (&source.model, source.shape) {
                (Some(path), _) => {
                    let (cfg, w) = read_model(path)?;
                    let calib = match calib {
                        Some(p) => read_calib(&p)?,
                        None => gen_calib(seed, cfg.embed_dim, CalibSpec::default()),
                    };
                    let inputs = ProxyInputs {
                        weights: &w,
                        calib: &calib,
                        method,
                        score,
                        seed,
                    };
                    allocate(&cfg, req, proxy, Some(&inputs), r)?
                }
                (None, Some(cfg)) => {
                    if proxy != ProxyKind::None {
                        return Err(HarnessError::Invalid(
                            "--shape allows only --proxy none".into(),
                        ));
                    }
                    allocate(&cfg, req, proxy, None, r)?
                }
                (None, None) => unreachable!("clap enforces the group"),
            };
            let records: Vec<Record> = ranked
                .iter()
                .take(top)
                .enumerate()
                .map(|(rank, c)| Record::Allocation {
                    rank,
                    r: c.r,
                    d_ckv: c.d_ckv,
                    proxy: c.proxy,
                    params_original: c.cost.params_original,
                    params_after: c.cost.params_after,
                    cache_per_token_layer: c.cost.cache_per_token_layer,
                    cache_ratio: c.cost.cache_ratio.to_string(),
                })
                .collect();
            emit(out, &records)
        }
        Command::Simulate {
            model,
            factors,
            tokens,
        } => {
            let (cfg, w) = load(&model)?;
            let ff = read_factors(&factors)?;
            if !ff.header.matches(&cfg) {
                return Err(HarnessError::format(
                    &factors,
                    "factor file shape differs from model",
                ));
            }
            let elite: Vec<_> = ff.layers.iter().map(|f| f.layout.elite.clone()).collect();
            let sim = simulate(&cfg, &w, &elite, &ff.layers, seed, tokens)?;
            emit(out, &sim.records)
        }
        Command::Verify {
            model,
            suite,
            factors,
            elite,
            calib,
        } => {
            let (cfg, w) = load(&model)?;
            let calib = calib.map(|p| read_calib(&p)).transpose()?;
            let elite = elite.map(|p| read_elite(&p, &cfg)).transpose()?;
            let inputs = VerifyInputs {
                cfg,
                weights: &w,
                calib: calib.as_ref(),
                elite: elite.as_ref(),
                factors: factors.as_deref(),
                seed,
            };
            let records = run_suite(suite, &inputs)?;
            emit(out, &records)?;
            let failed = records.iter().filter(|r| !r.passed()).count();
            if failed > 0 {
                return Err(HarnessError::VerifyFailed {
                    failed,
                    total: records.len(),
                });
            }
            Ok(())
        }
        Command::Report {
            source,
            mode,
            r,
            rank,
            ranks,
        } => {
            let cfg = match (&source.model, source.shape) {
                (Some(p), _) => read_model(p)?.0,
                (None, Some(c)) => c,
                (None, None) => unreachable!("clap enforces the group"),
            };
            if r > cfg.n_chunks() {
                return Err(HarnessError::Invalid(format!(
                    "r={r} exceeds {} chunks",
                    cfg.n_chunks()
                )));
            }
            let (k, v, cost): (usize, usize, CostReport) = match (mode, rank, ranks) {
                (FactorMode::Jlrd, Some(k), None) => (k, k, cost_jlrd(&cfg, r, k)),
                (FactorMode::Slrd, None, Some((k, v))) => (k, v, cost_slrd(&cfg, r, k, v)),
                _ => {
                    return Err(HarnessError::Invalid(
                        "jlrd takes --rank, slrd takes --ranks K,V".into(),
                    ))
                }
            };
            emit(out, &[Record::cost(&cfg, mode, r, k, v, &cost)])
        }
        Command::Pipeline { manifest } => {
            let m = RunManifest::load(&manifest)?;
            let run = run_pipeline(&m)?;
            emit(out, &run.equivalence)
        }
    }
}
