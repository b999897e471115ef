//! Whole-model inference with ping-pong activation buffers.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::{rngs::StdRng, Rng, SeedableRng};

use super::model::{model_workspace, LayerKind, LayerSpec, ModelSpec};
use crate::conv::{conv_direct_into, conv_im2col_gemm_into, im2col_into};
use crate::convgemm::conv_gemm_into;
use crate::error::{ConvError, Result};
use crate::gemm::{gemm, zero_matrix, BlockingParams};
use crate::scratch::measure_peak;
use crate::tensor::{try_alloc, GemmDims, MatMut, MatRef};

/// Convolution back-end, or one stage of the explicit pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Algo {
    Direct,
    /// im2col followed by GEMM, both timed.
    Im2col,
    ConvGemm,
    /// Only the GEMM of the explicit pipeline; B̂ is built before timing.
    GemmOnly,
    /// Only the im2col transform. Dense layers are skipped.
    Im2colOnly,
}

impl Algo {
    pub const ALL: [Algo; 5] = [
        Algo::Direct,
        Algo::Im2col,
        Algo::ConvGemm,
        Algo::GemmOnly,
        Algo::Im2colOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algo::Direct => "direct",
            Algo::Im2col => "im2col",
            Algo::ConvGemm => "convgemm",
            Algo::GemmOnly => "gemm-only",
            Algo::Im2colOnly => "im2col-only",
        }
    }

    /// Whether the back-end needs the materialized B̂.
    pub fn uses_workspace(self) -> bool {
        matches!(self, Algo::Im2col | Algo::GemmOnly | Algo::Im2colOnly)
    }
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algo {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Algo::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            let names: Vec<_> = Algo::ALL.iter().map(|a| a.name()).collect();
            format!("unknown algorithm `{s}` (expected one of: {})", names.join(", "))
        })
    }
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub algo: Algo,
    pub bp: BlockingParams,
    pub threads: usize,
    /// Each layer is repeated until this much wall time has accumulated.
    pub min_time: Duration,
    /// Compare every conv output against the direct convolution.
    pub check: bool,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            algo: Algo::ConvGemm,
            bp: BlockingParams::default(),
            threads: 1,
            min_time: Duration::from_secs(1),
            check: false,
            seed: 0x5eed,
        }
    }
}

/// Largest error tolerated by `check`: `max|out − ref| / max(max|ref|, 1)`.
pub const CHECK_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerResult {
    /// Position of the layer in the model file, from 1.
    pub index: usize,
    pub kind: LayerKind,
    pub dims: GemmDims,
    /// Mean wall time of one execution, seconds.
    pub time_s: f64,
    pub reps: usize,
    pub gflops: f64,
    /// Tracked packing scratch plus B̂ where the back-end materializes it.
    pub workspace_bytes: u64,
    /// Error against the direct convolution, when checked.
    pub check_error: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub model: String,
    pub batch: usize,
    pub algo: Algo,
    pub threads: usize,
    pub layers: Vec<LayerResult>,
}

impl RunRecord {
    pub fn total_time(&self) -> f64 {
        self.layers.iter().map(|l| l.time_s).sum()
    }

    pub fn total_flops(&self) -> f64 {
        self.layers.iter().map(|l| l.dims.flops()).sum()
    }

    /// Sum of times over layers of one kind.
    pub fn time_of(&self, kind: LayerKind) -> f64 {
        self.layers.iter().filter(|l| l.kind == kind).map(|l| l.time_s).sum()
    }
}

/// Runs `op` until `min_time` has elapsed (at least once) and returns the
/// mean time per run and the repetition count.
fn time_repeated(min_time: Duration, mut op: impl FnMut() -> Result<()>) -> Result<(f64, usize)> {
    let start = Instant::now();
    let mut reps = 0;
    loop {
        op()?;
        reps += 1;
        let elapsed = start.elapsed();
        if elapsed >= min_time {
            let elapsed = elapsed.max(Duration::from_nanos(1));
            return Ok((elapsed.as_secs_f64() / reps as f64, reps));
        }
    }
}

fn alloc_random(len: usize, rng: &mut StdRng) -> Result<Vec<f32>> {
    let mut v = try_alloc::<f32>(len)?;
    v.iter_mut().for_each(|x| *x = rng.gen_range(-1.0..=1.0));
    Ok(v)
}

fn check_error(got: &[f32], want: &[f32]) -> f64 {
    let scale = want.iter().fold(1.0f64, |m, &v| m.max((v as f64).abs()));
    let diff = got
        .iter()
        .zip(want)
        .fold(0.0f64, |m, (&a, &b)| m.max((a as f64 - b as f64).abs()));
    if diff.is_nan() || got.iter().any(|v| !v.is_finite()) {
        return f64::INFINITY;
    }
    diff / scale
}

/// Simulates one forward pass of `model` at batch `b`.
///
/// Two activation buffers sized for the largest layer alternate as input and
/// output; each conv or dense layer reads one and writes the other, then the
/// roles swap. Weights and the initial activation are uniform in `[-1, 1]`
/// from `cfg.seed`; each output is rescaled to unit magnitude (untimed) before
/// it feeds the next layer. Every buffer, including B̂ for the explicit back-ends, is
/// allocated up front, and a failed allocation is returned as
/// [`ConvError::AllocationFailure`].
pub fn run_inference(model: &ModelSpec, b: usize, cfg: &RunConfig) -> Result<RunRecord> {
    if b == 0 {
        return Err(ConvError::InvalidGeometry("batch size must be positive".into()));
    }
    let algo = cfg.algo;
    let act_len = model
        .layers
        .iter()
        .map(|l| {
            let (i, o) = l.activation_lens(b);
            i.max(o)
        })
        .max()
        .unwrap_or(0);
    let weight_len = model.layers.iter().map(LayerSpec::weight_len).max().unwrap_or(0);

    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let weights = alloc_random(weight_len, &mut rng)?;
    let mut cur = alloc_random(act_len, &mut rng)?;
    let mut next = try_alloc::<f32>(act_len)?;
    let mut workspace = if algo.uses_workspace() {
        try_alloc::<f32>((model_workspace(model, b) / 4) as usize)?
    } else {
        Vec::new()
    };
    let mut reference = if cfg.check {
        try_alloc::<f32>(act_len)?
    } else {
        Vec::new()
    };

    let (bp, threads) = (&cfg.bp, cfg.threads);
    let mut layers = Vec::new();
    for (pos, layer) in model.layers.iter().enumerate() {
        let Some(dims) = layer.gemm_dims(b) else { continue };
        let (in_len, out_len) = layer.activation_lens(b);
        let input = &cur[..in_len];
        let out = &mut next[..out_len];
        let w = &weights[..layer.weight_len()];

        let mut scratch = 0usize;
        let mut first = true;
        let mut track = |f: &mut dyn FnMut() -> Result<()>| -> Result<()> {
            if first {
                first = false;
                let (r, peak) = measure_peak(f);
                scratch = peak;
                r
            } else {
                f()
            }
        };

        let mut check = None;
        let (time_s, reps) = match *layer {
            LayerSpec::Conv(cp) => {
                let cp = cp.with_batch(b);
                let bhat = &mut workspace[..if algo.uses_workspace() { dims.k * dims.n } else { 0 }];
                let timed = match algo {
                    Algo::Direct => {
                        time_repeated(cfg.min_time, || track(&mut || conv_direct_into(w, input, &cp, out)))?
                    }
                    Algo::ConvGemm => time_repeated(cfg.min_time, || {
                        track(&mut || conv_gemm_into(w, input, &cp, bp, threads, out).map(drop))
                    })?,
                    Algo::Im2col => time_repeated(cfg.min_time, || {
                        track(&mut || conv_im2col_gemm_into(w, input, &cp, bp, threads, bhat, out))
                    })?,
                    Algo::Im2colOnly => {
                        time_repeated(cfg.min_time, || track(&mut || im2col_into(input, &cp, bhat, threads)))?
                    }
                    Algo::GemmOnly => {
                        im2col_into(input, &cp, bhat, threads)?;
                        let bhat = &*bhat;
                        time_repeated(cfg.min_time, || track(&mut || dense(w, bhat, out, dims, bp, threads)))?
                    }
                };
                if cfg.check && algo != Algo::Im2colOnly {
                    let want = &mut reference[..out_len];
                    conv_direct_into(w, input, &cp, want)?;
                    let err = check_error(out, want);
                    if err > CHECK_TOLERANCE {
                        return Err(ConvError::CheckFailed {
                            layer: pos + 1,
                            error: err,
                        });
                    }
                    check = Some(err);
                }
                timed
            }
            LayerSpec::Fc { .. } if algo == Algo::Im2colOnly => continue,
            LayerSpec::Fc { .. } => {
                time_repeated(cfg.min_time, || track(&mut || dense(w, input, out, dims, bp, threads)))?
            }
            LayerSpec::Pool { .. } => unreachable!("pooling has no gemm dims"),
        };

        let mut workspace_bytes = scratch as u64;
        if layer.kind() == LayerKind::Conv && algo.uses_workspace() {
            workspace_bytes += (dims.k * dims.n * std::mem::size_of::<f32>()) as u64;
        }
        layers.push(LayerResult {
            index: pos + 1,
            kind: layer.kind(),
            dims,
            time_s,
            reps,
            gflops: dims.flops() / time_s / 1e9,
            workspace_bytes,
            check_error: check,
        });
        if algo != Algo::Im2colOnly {
            normalize(&mut next[..out_len]);
        }
        std::mem::swap(&mut cur, &mut next);
    }

    Ok(RunRecord {
        model: model.name.clone(),
        batch: b,
        algo,
        threads,
        layers,
    })
}

/// Rescales to unit max-magnitude, outside the timed region. Uniform weights
/// grow activations by roughly `sqrt(k)` per layer, which would overflow f32
/// within a few dozen layers.
fn normalize(v: &mut [f32]) {
    let peak = v.iter().fold(0.0f32, |m, x| m.max(x.abs()));
    if peak > 0.0 && peak.is_finite() {
        let scale = 1.0 / peak;
        v.iter_mut().for_each(|x| *x *= scale);
    }
}

/// `out = a · b` for column-major `a` (m × k), `b` (k × n), `out` (m × n).
fn dense(a: &[f32], b: &[f32], out: &mut [f32], d: GemmDims, bp: &BlockingParams, threads: usize) -> Result<()> {
    let a = MatRef::new(a, 0, d.m, d.k, d.m)?;
    let b = MatRef::new(b, 0, d.k, d.n, d.k)?;
    let mut c = MatMut::new(out, 0, d.m, d.n, d.m)?;
    zero_matrix(&mut c);
    gemm(&a, &b, &mut c, d, bp, threads).map(drop)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::model::parse_model_str;

    const TOY: &str = "\
conv 4 3 3 2 8 8 1 1
pool 4 4 4
conv 3 2 2 4 4 4 2 0
fc 5 12
";

    fn quick(algo: Algo) -> RunConfig {
        RunConfig {
            algo,
            bp: BlockingParams::new(8, 12, 16, 4, 4).unwrap(),
            min_time: Duration::ZERO,
            check: true,
            ..RunConfig::default()
        }
    }

    #[test]
    fn algo_names_round_trip() {
        for a in Algo::ALL {
            assert_eq!(a.name().parse::<Algo>(), Ok(a));
        }
        assert!("winograd".parse::<Algo>().is_err());
    }

    #[test]
    fn toy_model_every_algo() {
        let model = parse_model_str("toy", TOY).unwrap();
        for algo in Algo::ALL {
            let rec = run_inference(&model, 2, &quick(algo)).unwrap();
            let kinds: Vec<_> = rec.layers.iter().map(|l| (l.index, l.kind)).collect();
            if algo == Algo::Im2colOnly {
                assert_eq!(kinds, [(1, LayerKind::Conv), (3, LayerKind::Conv)]);
            } else {
                assert_eq!(kinds, [(1, LayerKind::Conv), (3, LayerKind::Conv), (4, LayerKind::Fc)]);
            }
            for l in &rec.layers {
                assert!(l.time_s > 0.0 && l.gflops.is_finite() && l.reps >= 1);
                if l.kind == LayerKind::Conv && algo != Algo::Im2colOnly {
                    assert!(l.check_error.unwrap() <= CHECK_TOLERANCE);
                }
            }
            assert_eq!(rec.layers[0].dims, GemmDims::new(4, 128, 18));
            assert_eq!(rec.layers[1].dims, GemmDims::new(3, 8, 16));
        }
    }

    #[test]
    fn workspace_accounting() {
        let model = parse_model_str("toy", TOY).unwrap();
        let cfg = quick(Algo::ConvGemm);
        let fused = run_inference(&model, 3, &cfg).unwrap();
        let explicit = run_inference(
            &model,
            3,
            &RunConfig {
                algo: Algo::Im2col,
                ..cfg.clone()
            },
        )
        .unwrap();
        let pack = cfg.bp.scratch_bytes::<f32>() as u64;
        for (f, e) in fused.layers.iter().zip(&explicit.layers) {
            assert_eq!(f.workspace_bytes, pack);
            let bhat = if e.kind == LayerKind::Conv {
                (e.dims.k * e.dims.n * 4) as u64
            } else {
                0
            };
            assert_eq!(e.workspace_bytes, pack + bhat);
        }
        let direct = run_inference(&model, 1, &quick(Algo::Direct)).unwrap();
        assert_eq!(direct.layers[0].workspace_bytes, 0);
    }

    #[test]
    fn repetition_reaches_min_time() {
        let model = parse_model_str("toy", TOY).unwrap();
        let cfg = RunConfig {
            min_time: Duration::from_millis(5),
            ..quick(Algo::ConvGemm)
        };
        let rec = run_inference(&model, 1, &cfg).unwrap();
        for l in &rec.layers {
            assert!(l.time_s * l.reps as f64 >= 0.005);
            assert!(l.reps > 1);
        }
    }

    #[test]
    fn zero_batch_rejected() {
        let model = parse_model_str("toy", TOY).unwrap();
        assert!(matches!(
            run_inference(&model, 0, &quick(Algo::Direct)),
            Err(ConvError::InvalidGeometry(_))
        ));
    }

    #[test]
    fn deep_chain_stays_finite() {
        let text = "conv 16 3 3 16 6 6 1 1\n".repeat(40);
        let model = parse_model_str("deep", &text).unwrap();
        let rec = run_inference(&model, 1, &quick(Algo::ConvGemm)).unwrap();
        assert!(rec.layers.iter().all(|l| l.check_error.unwrap() <= CHECK_TOLERANCE));
    }

    #[test]
    fn check_error_metric() {
        assert_eq!(check_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(check_error(&[0.5], &[0.25]), 0.25);
        assert_eq!(check_error(&[f32::NAN], &[0.0]), f64::INFINITY);
    }
}
