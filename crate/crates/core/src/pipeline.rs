//! End-to-end restoration loop and synthetic fixtures.
//!
//! Per grid step `t -> t_prev`: each branch denoises and takes a DDIM step;
//! for low light the operator is refitted; the image branch takes guidance
//! steps; latents are converted between spaces; ratios are searched on event
//! steps; the three fusions produce the next branch latents.

use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::codecs::LatentCodec;
use crate::config::{RunConfig, Task};
use crate::degradation::{add_measurement_noise, DegradationOp};
use crate::denoisers::{denoise_z0, Denoiser, DenoiserMode, GaussianPriorDenoiser, TemporalSmootherDenoiser};
use crate::error::{Error, Result, StageExt};
use crate::fusion::{fuse_final, fuse_for_hetero, fuse_homologous, FusionRatios, LatentBridge};
use crate::guidance::{guide, lowlight_fit, lowlight_lipschitz, GuidanceProblem, LowLightParams};
use crate::postprocess::strengthen_with;
use crate::quality::{evaluate, Metrics};
use crate::schedules::{add_noise, ddim_step, DdimGrid, DdpmSchedule};
use crate::search::{
    run_search_step, CandidateReport, RewardModel, SearchContext, SearchLatents, SearchState,
    SharpnessWarpReward, WhichLambda,
};
use crate::tensor::{FlowField, VideoTensor};

pub const CSV_SCHEMA_VERSION: u32 = 1;
pub const LAMBDA_TRACE_HEADER: &str = "step,t,lambda_f1,lambda_f2,lambda_f";
pub const CANDIDATES_HEADER: &str = "step,which_lambda,candidate,lambda,quality,temporal_err,rank_sum,chosen";

/// A restoration job: the measurement plus optional references.
#[derive(Clone, Debug)]
pub struct TaskSpec {
    pub task: Task,
    /// Forward operator. For `lowlight` only its shape matters; the factor and
    /// mask are estimated during sampling.
    pub operator: DegradationOp,
    pub input: VideoTensor,
    pub ground_truth: Option<VideoTensor>,
    pub flow: Option<FlowField>,
}

impl TaskSpec {
    /// Builds a spec for `input` with the operator described by `cfg`.
    pub fn new(cfg: &RunConfig, input: VideoTensor) -> Self {
        let dims = cfg.operator.signal_dims(input.dims());
        Self {
            task: cfg.operator.task,
            operator: cfg.operator.operator(dims),
            input,
            ground_truth: None,
            flow: None,
        }
    }

    pub fn with_ground_truth(mut self, gt: VideoTensor) -> Self {
        self.ground_truth = Some(gt);
        self
    }

    pub fn with_flow(mut self, flow: FlowField) -> Self {
        self.flow = Some(flow);
        self
    }

    /// Loads input, ground truth and flow from `cfg.paths`.
    pub fn from_paths(cfg: &RunConfig) -> Result<Self> {
        let input_path = cfg
            .paths
            .input
            .as_ref()
            .ok_or_else(|| Error::Config("paths.input is required".into()))?;
        let mut spec = Self::new(cfg, crate::io::load_raw(input_path)?);
        if let Some(p) = &cfg.paths.ground_truth {
            spec.ground_truth = Some(crate::io::load_raw(p)?);
        }
        if let Some(p) = &cfg.paths.flow {
            spec.flow = Some(crate::io::load_flow(p)?);
        }
        Ok(spec)
    }

    fn signal_dims(&self) -> Result<crate::tensor::Dims> {
        let [t, c, h, w] = self.input.dims();
        let dims = match self.operator {
            DegradationOp::Downsample { factor } => [t, c, h * factor, w * factor],
            _ => self.input.dims(),
        };
        if self.operator.output_dims(dims)? != self.input.dims() {
            return Err(Error::Shape(format!(
                "operator does not map {dims:?} to input {:?}",
                self.input.dims()
            )));
        }
        Ok(dims)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LambdaRow {
    pub step: usize,
    pub t: usize,
    pub lambda_f1: f64,
    pub lambda_f2: f64,
    pub lambda_f: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SearchEventRow {
    pub step: usize,
    pub t: usize,
    pub which: WhichLambda,
    pub radius: f64,
    pub chosen: usize,
    pub lambda: f64,
    pub candidates: Vec<CandidateReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LowLightEstimate {
    pub factor: f64,
    pub mask_mean: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Timing {
    pub sampling_ms: f64,
    pub postprocess_ms: f64,
    pub total_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub csv_schema_version: u32,
    pub task: Task,
    pub seed: u64,
    pub steps: usize,
    pub fusion: &'static str,
    pub postprocess: &'static str,
    pub lambda_trace: Vec<LambdaRow>,
    pub search_events: Vec<SearchEventRow>,
    /// Metrics of the sampler output before post-processing.
    pub metrics_sampled: Metrics,
    pub metrics: Metrics,
    /// `|y - A x|^2` of the final output.
    pub data_fidelity: f64,
    pub data_fidelity_sampled: f64,
    pub lowlight: Option<LowLightEstimate>,
    pub timing: Timing,
    pub config: RunConfig,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn lambda_trace_csv(&self) -> String {
        let mut out = String::from(LAMBDA_TRACE_HEADER);
        out.push('\n');
        for r in &self.lambda_trace {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.step, r.t, r.lambda_f1, r.lambda_f2, r.lambda_f
            ));
        }
        out
    }

    pub fn candidates_csv(&self) -> String {
        let mut out = String::from(CANDIDATES_HEADER);
        out.push('\n');
        for e in &self.search_events {
            for (i, c) in e.candidates.iter().enumerate() {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{}\n",
                    e.step,
                    e.which.label(),
                    i,
                    c.lambda,
                    c.quality,
                    c.temporal_err,
                    c.rank_sum,
                    u8::from(i == e.chosen)
                ));
            }
        }
        out
    }
}

/// Prior mean for the toy models: the measurement lifted to the signal grid,
/// min-max stretched for low light.
fn prior_pixels(spec: &TaskSpec) -> Result<VideoTensor> {
    let lifted = spec.operator.lift(&spec.input)?;
    if spec.task != Task::Lowlight {
        return Ok(lifted);
    }
    let (lo, hi) = lifted.min_max();
    let range = (hi - lo).max(1e-6);
    Ok(lifted.map(|v| (v - lo) / range))
}

struct Branches {
    den_i: Arc<dyn Denoiser>,
    den_v1: Arc<dyn Denoiser>,
    den_v2: Arc<dyn Denoiser>,
}

fn build_denoisers(cfg: &RunConfig, mu_i: &VideoTensor, mu_v2: &VideoTensor) -> Result<Branches> {
    let d = &cfg.denoiser;
    let den_i = GaussianPriorDenoiser::new(mu_i.clone(), d.prior_var)?.with_mode(DenoiserMode::PerFrame);
    let base_v1: Arc<dyn Denoiser> = Arc::new(GaussianPriorDenoiser::new(mu_i.clone(), d.video_prior_var)?);
    let base_v2: Arc<dyn Denoiser> = Arc::new(GaussianPriorDenoiser::new(mu_v2.clone(), d.video_prior_var)?);
    Ok(Branches {
        den_i: Arc::new(den_i),
        den_v1: Arc::new(TemporalSmootherDenoiser::new(
            base_v1,
            d.smoother_strength,
            d.smoother_window,
        )?),
        den_v2: Arc::new(TemporalSmootherDenoiser::new(
            base_v2,
            d.smoother_strength,
            d.smoother_window,
        )?),
    })
}

#[allow(clippy::too_many_arguments)]
fn branch_step(
    den: &dyn Denoiser,
    z: &VideoTensor,
    k: usize,
    t: usize,
    t_prev: usize,
    grid: &DdimGrid,
    sched: &DdpmSchedule,
    stream: u64,
) -> Result<VideoTensor> {
    let eps = den.predict_noise(z, t, sched)?;
    let noise = (grid.eta > 0.0).then(|| grid.step_noise(k, stream, z.dims()));
    ddim_step(z, &eps, t, t_prev, grid, sched, noise.as_ref())
}

/// Seed of the initial noise; the heterogeneous branch gets its own stream.
fn init_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Runs the full restoration loop on `spec` and post-processes the result.
pub fn run_restoration(spec: &TaskSpec, cfg: &RunConfig) -> Result<(VideoTensor, RunReport)> {
    cfg.validate().stage("config")?;
    let started = Instant::now();
    let fusion_on = cfg.fusion.enabled;

    let sched_i = cfg.schedule.image().stage("init")?;
    let sched_v2 = cfg.schedule.video().stage("init")?;
    let grid = cfg.schedule.grid(cfg.seed).stage("init")?;
    let codec2d = cfg.codec2d.build().stage("init")?;
    let codec3d = cfg.codec3d.build().stage("init")?;
    let signal = spec.signal_dims().stage("init")?;
    let latent_i = codec2d.latent_dims(signal).stage("init")?;
    let latent_v2 = codec3d.latent_dims(signal).stage("init")?;
    let min_frames = latent_i[0].min(latent_v2[0]);
    if cfg.fusion.enabled && cfg.denoiser.smoother_window > min_frames {
        return Err(Error::Shape(format!(
            "smoother window {} exceeds the {min_frames} latent frames of the video branches",
            cfg.denoiser.smoother_window
        )))
        .stage("init");
    }
    let y = &spec.input;

    let prior = prior_pixels(spec).stage("init")?;
    let mu_i = codec2d.encode(&prior).stage("init")?;
    let mu_v2 = codec3d.encode(&prior).stage("init")?;
    let dens = build_denoisers(cfg, &mu_i, &mu_v2).stage("init")?;

    let mut z_i = VideoTensor::randn(latent_i, &mut init_rng(cfg.seed, 0));
    let mut z_v1 = z_i.clone();
    let t_top = grid.step(0).0;
    let eps_v2 = VideoTensor::randn(mu_v2.dims(), &mut init_rng(cfg.seed, 1));
    let mut z_v2 = add_noise(&mu_v2, t_top, &eps_v2, &sched_v2).stage("init")?;

    let mut lowlight = (spec.task == Task::Lowlight)
        .then(|| LowLightParams::identity(signal, cfg.operator.lowlight_lr, cfg.operator.lowlight_iters));

    let bridge = LatentBridge {
        codec2d: &codec2d,
        codec3d: &codec3d,
        schedule_i: &sched_i,
        schedule_v2: &sched_v2,
    };
    let reward = SharpnessWarpReward;
    let mut ratios = if fusion_on {
        FusionRatios::from_array(cfg.search.initial)
    } else {
        FusionRatios::ZERO
    };
    let mut state = SearchState::new(&cfg.search);
    let mut trace = Vec::with_capacity(grid.len());
    let mut events = Vec::new();

    for (k, (t, t_prev)) in grid.steps().enumerate() {
        // Branch updates are independent within a step.
        let (zi, zv1, zv2) = if fusion_on {
            std::thread::scope(|s| {
                let h1 = s.spawn(|| branch_step(&*dens.den_v1, &z_v1, k, t, t_prev, &grid, &sched_i, 1));
                let h2 = s.spawn(|| branch_step(&*dens.den_v2, &z_v2, k, t, t_prev, &grid, &sched_v2, 2));
                let zi = branch_step(&*dens.den_i, &z_i, k, t, t_prev, &grid, &sched_i, 0);
                (
                    zi,
                    h1.join().expect("branch worker panicked"),
                    h2.join().expect("branch worker panicked"),
                )
            })
        } else {
            let zi = branch_step(&*dens.den_i, &z_i, k, t, t_prev, &grid, &sched_i, 0);
            (zi, Ok(z_v1.clone()), Ok(z_v2.clone()))
        };
        let mut zi = zi.stage("sample")?;
        let zv1 = zv1.stage("sample")?;
        let zv2 = zv2.stage("sample")?;

        if let Some(params) = lowlight.as_mut() {
            let z0 = denoise_z0(&*dens.den_i, &zi, t_prev, &sched_i).stage("lowlight")?;
            if params.lr == 0.0 {
                let x = codec2d.decode(&z0).stage("lowlight")?;
                params.lr = 1.0 / lowlight_lipschitz(&x).max(1e-12);
            }
            *params = lowlight_fit(y, &z0, &codec2d, params).stage("lowlight")?;
        }
        let op = match &lowlight {
            Some(p) => p.operator(),
            None => spec.operator.clone(),
        };
        let problem = GuidanceProblem {
            denoiser: &*dens.den_i,
            schedule: &sched_i,
            y,
            op: &op,
            codec: &codec2d,
        };
        zi = guide(&zi, t_prev, &problem, &cfg.guidance).stage("guidance")?;

        if fusion_on {
            let v2_to_i = bridge
                .v2_to_image(&zv2, &*dens.den_v2, t_prev)
                .stage("convert")?
                .z_t;
            let i_to_v2 = bridge
                .image_to_v2(&zi, &*dens.den_i, t_prev)
                .stage("convert")?
                .z_t;
            if !cfg.search.fixed_mode && cfg.search.is_event(k) {
                let ctx = SearchContext {
                    denoiser: &*dens.den_i,
                    schedule: &sched_i,
                    t: t_prev,
                    decoder: &codec2d,
                    reward: &reward as &dyn RewardModel,
                    flow: spec.flow.as_ref(),
                    parallel: cfg.search.parallel,
                };
                let latents = SearchLatents {
                    z_i: &zi,
                    z_v1: &zv1,
                    z_v2_to_i: &v2_to_i,
                };
                let (r, next, reports) =
                    run_search_step(&latents, &state, &ctx, &cfg.search).stage("search")?;
                ratios = r;
                state = next;
                events.extend(reports.into_iter().map(|e| SearchEventRow {
                    step: k,
                    t,
                    which: e.which,
                    radius: e.radius,
                    chosen: e.outcome.chosen,
                    lambda: e.outcome.lambda,
                    candidates: e.outcome.reports,
                }));
            }
            let z_f1 = fuse_homologous(&zi, &zv1, ratios.lambda_f1).stage("fuse")?;
            z_i = fuse_final(&zi, &z_f1, &v2_to_i, &ratios).stage("fuse")?;
            z_v2 = fuse_for_hetero(&zv2, &i_to_v2, ratios.lambda_f2).stage("fuse")?;
            z_v1 = z_f1;
        } else {
            z_i = zi;
        }
        trace.push(LambdaRow {
            step: k,
            t,
            lambda_f1: ratios.lambda_f1,
            lambda_f2: ratios.lambda_f2,
            lambda_f: ratios.lambda_f,
        });
    }

    let sampled = codec2d.decode(&z_i).stage("decode")?;
    let sampling_ms = started.elapsed().as_secs_f64() * 1e3;
    let pp_started = Instant::now();
    let output = if cfg.postprocess.enabled {
        strengthen_with(&sampled, &cfg.postprocess)
            .stage("postprocess")?
            .0
    } else {
        sampled.clone()
    };
    let postprocess_ms = pp_started.elapsed().as_secs_f64() * 1e3;

    let final_op = match &lowlight {
        Some(p) => p.operator(),
        None => spec.operator.clone(),
    };
    let fidelity = |x: &VideoTensor| -> Result<f64> { y.dist_sq(&final_op.apply(x)?) };
    let gt = spec.ground_truth.as_ref();
    let flow = spec.flow.as_ref();
    let report = RunReport {
        csv_schema_version: CSV_SCHEMA_VERSION,
        task: spec.task,
        seed: cfg.seed,
        steps: grid.len(),
        fusion: if fusion_on { "enabled" } else { "disabled" },
        postprocess: if cfg.postprocess.enabled {
            "enabled"
        } else {
            "disabled"
        },
        lambda_trace: trace,
        search_events: events,
        metrics_sampled: evaluate(&sampled, gt, flow).stage("metrics")?,
        metrics: evaluate(&output, gt, flow).stage("metrics")?,
        data_fidelity: fidelity(&output).stage("metrics")?,
        data_fidelity_sampled: fidelity(&sampled).stage("metrics")?,
        lowlight: lowlight.as_ref().map(|p| LowLightEstimate {
            factor: p.f,
            mask_mean: p.mask.mean(),
        }),
        timing: Timing {
            sampling_ms,
            postprocess_ms,
            total_ms: started.elapsed().as_secs_f64() * 1e3,
        },
        config: cfg.clone(),
    };
    Ok((output, report))
}

/// Applies the task's ground-truth degradation (plus measurement noise) to a clean clip.
pub fn degrade(clean: &VideoTensor, cfg: &RunConfig) -> Result<VideoTensor> {
    let op = cfg.operator.operator(clean.dims());
    let y = op.apply(clean)?;
    Ok(add_measurement_noise(
        &y,
        cfg.operator.noise_sigma,
        cfg.seed ^ 0x0D15_EA5E,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    MovingSquare,
    Ramp,
    Static,
}

impl std::str::FromStr for SyntheticKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "moving_square" => Ok(SyntheticKind::MovingSquare),
            "ramp" => Ok(SyntheticKind::Ramp),
            "static" => Ok(SyntheticKind::Static),
            _ => Err(Error::InvalidArgument(format!(
                "unknown fixture `{s}` (expected moving_square, ramp or static)"
            ))),
        }
    }
}

pub const SYNTHETIC_CHANNELS: usize = 3;

/// Cell size of the background checkerboard; matches the 4x pooling grid.
const TEXTURE_CELL: usize = 4;

/// Static background: smooth colour waves plus a checkerboard, in `[0.05, 0.75]`.
fn background(rng: &mut ChaCha8Rng, h: usize, w: usize) -> impl Fn(usize, usize, usize) -> f32 {
    let phases: Vec<f64> = (0..SYNTHETIC_CHANNELS * 2)
        .map(|_| rng.random::<f64>() * std::f64::consts::TAU)
        .collect();
    let (fh, fw) = (h.max(1) as f64, w.max(1) as f64);
    move |c, y, x| {
        let a = (2.0 * std::f64::consts::PI * y as f64 / fh + phases[2 * c]).sin();
        let b = (2.0 * std::f64::consts::PI * x as f64 / fw + phases[2 * c + 1]).cos();
        let chk = if (y / TEXTURE_CELL + x / TEXTURE_CELL).is_multiple_of(2) {
            0.2
        } else {
            -0.2
        };
        (0.4 + 0.075 * (a + b) + chk) as f32
    }
}

/// Deterministic clip with exact ground-truth flow, `(T, 3, H, W)` in `[0, 1]`.
///
/// `moving_square` moves a bright square one pixel right per frame over a
/// static background; flow is `(0, 1)` on the square in the later frame and
/// zero elsewhere. `ramp` translates a sinusoid right by one pixel per frame
/// (constant flow). `static` repeats one frame (zero flow).
pub fn generate_synthetic(
    kind: SyntheticKind,
    frames: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<(VideoTensor, FlowField)> {
    if frames == 0 || height == 0 || width == 0 {
        return Err(Error::InvalidArgument(format!(
            "synthetic dims must be positive, got {frames}x{height}x{width}"
        )));
    }
    let dims = [frames, SYNTHETIC_CHANNELS, height, width];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        SyntheticKind::Static => {
            let bg = background(&mut rng, height, width);
            let clip = VideoTensor::from_fn(dims, |_, c, y, x| bg(c, y, x));
            Ok((clip, FlowField::zeros_for(dims)))
        }
        SyntheticKind::Ramp => {
            let period = (width as f64 / 2.0).max(2.0);
            let phases: Vec<f64> = (0..SYNTHETIC_CHANNELS)
                .map(|_| rng.random::<f64>() * std::f64::consts::TAU)
                .collect();
            let clip = VideoTensor::from_fn(dims, |t, c, y, x| {
                let u = 2.0 * std::f64::consts::PI * (x as f64 - t as f64) / period;
                (0.5 + 0.35 * (u + phases[c]).sin() + 0.05 * (y as f64 / height as f64)) as f32
            });
            Ok((clip, FlowField::constant_for(dims, 0.0, 1.0)))
        }
        SyntheticKind::MovingSquare => {
            let bg = background(&mut rng, height, width);
            let size = (height.min(width) / 4).max(1);
            let color: Vec<f32> = (0..SYNTHETIC_CHANNELS)
                .map(|_| 0.75 + 0.2 * rng.random::<f32>())
                .collect();
            let travel = frames - 1;
            let x_room = width.saturating_sub(size + travel);
            let x0 = if x_room > 0 {
                rng.random_range(0..=x_room)
            } else {
                0
            };
            let y0 = rng.random_range(0..=height - size);
            let inside = |t: usize, y: usize, x: usize| {
                let xs = x0 + t;
                y >= y0 && y < y0 + size && x >= xs && x < xs + size
            };
            let clip = VideoTensor::from_fn(
                dims,
                |t, c, y, x| {
                    if inside(t, y, x) {
                        color[c]
                    } else {
                        bg(c, y, x)
                    }
                },
            );
            let flow = VideoTensor::from_fn([frames - 1, 2, height, width], |t, c, y, x| {
                if c == 1 && inside(t + 1, y, x) {
                    1.0
                } else {
                    0.0
                }
            });
            Ok((clip, FlowField::new(flow)?))
        }
    }
}
