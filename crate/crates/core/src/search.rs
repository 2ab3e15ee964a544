//! Best-of-N search over fusion ratios with rank-sum selection.

use serde::{Deserialize, Serialize};

use crate::codecs::LatentCodec;
use crate::denoisers::{denoise_z0, Denoiser};
use crate::error::{Error, Result};
use crate::fusion::{fuse_final, fuse_heterogeneous, fuse_homologous, FusionRatios};
use crate::quality::{sharpness_proxy, warping_error};
use crate::schedules::DdpmSchedule;
use crate::tensor::{FlowField, VideoTensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    /// Candidates per search are `m + 1`.
    pub m: usize,
    pub r0: f64,
    pub every_k: usize,
    pub initial: [f64; 3],
    pub clamp: bool,
    /// Keep `initial` for the whole run instead of searching.
    pub fixed_mode: bool,
    /// Score candidates on worker threads.
    pub parallel: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            m: 4,
            r0: 0.45,
            every_k: 10,
            initial: FusionRatios::FIXED.as_array(),
            clamp: true,
            fixed_mode: false,
            parallel: true,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.every_k == 0 {
            return Err(Error::Config("search.every_k must be >= 1".into()));
        }
        if !(self.r0 > 0.0 && self.r0.is_finite()) {
            return Err(Error::Config(format!("search.r0 must be > 0, got {}", self.r0)));
        }
        if self.initial.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return Err(Error::Config("search.initial ratios must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn is_event(&self, step: usize) -> bool {
        !self.fixed_mode && step.is_multiple_of(self.every_k)
    }
}

/// `m + 1` evenly spaced values spanning `[center - r, center + r]`.
pub fn sample_candidates(center: f64, r: f64, m: usize, clamp: bool) -> Vec<f64> {
    if m == 0 {
        return vec![center];
    }
    (0..=m)
        .map(|i| {
            let v = center + r * (2.0 * i as f64 / m as f64 - 1.0);
            if clamp {
                v.clamp(0.0, 1.0)
            } else {
                v
            }
        })
        .collect()
}

/// Scores a decoded candidate video.
pub trait RewardModel: Send + Sync {
    /// `(quality, temporal_err)`: higher quality and lower error are better.
    fn score(&self, video: &VideoTensor, flow: Option<&FlowField>) -> Result<(f64, f64)>;
}

/// Sharpness proxy plus warping error (zero flow when none is given).
#[derive(Clone, Copy, Debug, Default)]
pub struct SharpnessWarpReward;

impl RewardModel for SharpnessWarpReward {
    fn score(&self, video: &VideoTensor, flow: Option<&FlowField>) -> Result<(f64, f64)> {
        let we = match flow {
            Some(f) => warping_error(video, f)?,
            None => warping_error(video, &FlowField::zeros_for(video.dims()))?,
        };
        Ok((sharpness_proxy(video), we))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CandidateReport {
    pub lambda: f64,
    pub quality: f64,
    pub temporal_err: f64,
    pub rank_q: usize,
    pub rank_we: usize,
    pub rank_sum: usize,
}

/// Ordinal ranks, 0 best; ties keep the lower index first.
fn ordinal_ranks(values: &[f64], higher_better: bool) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        let ord = values[a].partial_cmp(&values[b]).expect("finite scores");
        let ord = if higher_better { ord.reverse() } else { ord };
        ord.then(a.cmp(&b))
    });
    let mut ranks = vec![0; values.len()];
    for (r, i) in idx.into_iter().enumerate() {
        ranks[i] = r;
    }
    ranks
}

/// Ranks every candidate and returns `(chosen index, (rank_q, rank_we) per candidate)`.
pub fn rank_candidates(scores: &[(f64, f64)]) -> Result<(usize, Vec<(usize, usize)>)> {
    if scores.is_empty() {
        return Err(Error::Scoring("no candidates to rank".into()));
    }
    if scores.iter().any(|(q, e)| !q.is_finite() || !e.is_finite()) {
        return Err(Error::Scoring("non-finite candidate score".into()));
    }
    let q: Vec<f64> = scores.iter().map(|s| s.0).collect();
    let e: Vec<f64> = scores.iter().map(|s| s.1).collect();
    let rq = ordinal_ranks(&q, true);
    let re = ordinal_ranks(&e, false);
    let ranks: Vec<(usize, usize)> = rq.into_iter().zip(re).collect();
    let best = (0..ranks.len())
        .min_by_key(|&i| (ranks[i].0 + ranks[i].1, i))
        .expect("nonempty");
    Ok((best, ranks))
}

/// Index with the lowest `rank_q + rank_we`.
pub fn rank_and_select(scores: &[(f64, f64)]) -> Result<usize> {
    rank_candidates(scores).map(|(i, _)| i)
}

/// Shared inputs for scoring fused candidates.
pub struct SearchContext<'a> {
    pub denoiser: &'a dyn Denoiser,
    pub schedule: &'a DdpmSchedule,
    pub t: usize,
    pub decoder: &'a dyn LatentCodec,
    pub reward: &'a dyn RewardModel,
    pub flow: Option<&'a FlowField>,
    /// Evaluate candidates on worker threads.
    pub parallel: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SearchOutcome {
    pub lambda: f64,
    pub chosen: usize,
    pub reports: Vec<CandidateReport>,
}

fn score_candidate(
    lambda: f64,
    fuse_fn: &(dyn Fn(f64) -> Result<VideoTensor> + Sync),
    ctx: &SearchContext<'_>,
) -> Result<(f64, f64)> {
    let z = fuse_fn(lambda)?;
    let z0 = denoise_z0(ctx.denoiser, &z, ctx.t, ctx.schedule)?;
    let video = ctx.decoder.decode(&z0)?;
    ctx.reward.score(&video, ctx.flow)
}

/// Fuses, denoises, decodes and scores each candidate, then picks by rank sum.
pub fn search_ratio(
    fuse_fn: &(dyn Fn(f64) -> Result<VideoTensor> + Sync),
    ctx: &SearchContext<'_>,
    center: f64,
    r: f64,
    cfg: &SearchConfig,
) -> Result<SearchOutcome> {
    if cfg.m == 0 {
        return Ok(SearchOutcome {
            lambda: center,
            chosen: 0,
            reports: Vec::new(),
        });
    }
    let lambdas = sample_candidates(center, r, cfg.m, cfg.clamp);
    let scores: Vec<(f64, f64)> = if ctx.parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = lambdas
                .iter()
                .map(|&l| s.spawn(move || score_candidate(l, fuse_fn, ctx)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("candidate worker panicked"))
                .collect::<Result<_>>()
        })?
    } else {
        lambdas
            .iter()
            .map(|&l| score_candidate(l, fuse_fn, ctx))
            .collect::<Result<_>>()?
    };
    let (chosen, ranks) = rank_candidates(&scores)?;
    let reports = lambdas
        .iter()
        .zip(&scores)
        .zip(&ranks)
        .map(
            |((&lambda, &(quality, temporal_err)), &(rank_q, rank_we))| CandidateReport {
                lambda,
                quality,
                temporal_err,
                rank_q,
                rank_we,
                rank_sum: rank_q + rank_we,
            },
        )
        .collect();
    Ok(SearchOutcome {
        lambda: lambdas[chosen],
        chosen,
        reports,
    })
}

/// Carry-over between search events.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchState {
    pub centers: [f64; 3],
    pub radius: f64,
    pub events: usize,
}

impl SearchState {
    pub fn new(cfg: &SearchConfig) -> Self {
        Self {
            centers: cfg.initial,
            radius: cfg.r0,
            events: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum WhichLambda {
    F1,
    F2,
    F,
}

impl WhichLambda {
    pub fn label(self) -> &'static str {
        match self {
            WhichLambda::F1 => "lambda_f1",
            WhichLambda::F2 => "lambda_f2",
            WhichLambda::F => "lambda_f",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EventReport {
    pub which: WhichLambda,
    pub radius: f64,
    pub outcome: SearchOutcome,
}

/// Image-latent-space inputs of one search event.
pub struct SearchLatents<'a> {
    pub z_i: &'a VideoTensor,
    pub z_v1: &'a VideoTensor,
    pub z_v2_to_i: &'a VideoTensor,
}

/// Searches `lambda_f1`, then `lambda_f2`, then `lambda_f`, each with the
/// previously confirmed values. Winners become the next centers and the radius halves.
pub fn run_search_step(
    latents: &SearchLatents<'_>,
    state: &SearchState,
    ctx: &SearchContext<'_>,
    cfg: &SearchConfig,
) -> Result<(FusionRatios, SearchState, Vec<EventReport>)> {
    let r = state.radius;
    let SearchLatents { z_i, z_v1, z_v2_to_i } = *latents;

    let f1 = search_ratio(&|l| fuse_homologous(z_i, z_v1, l), ctx, state.centers[0], r, cfg)?;
    let f2 = search_ratio(
        &|l| fuse_heterogeneous(z_i, z_v2_to_i, l),
        ctx,
        state.centers[1],
        r,
        cfg,
    )?;
    let z_f1 = fuse_homologous(z_i, z_v1, f1.lambda)?;
    let (l1, l2) = (f1.lambda, f2.lambda);
    let f = search_ratio(
        &|l| fuse_final(z_i, &z_f1, z_v2_to_i, &FusionRatios::new(l1, l2, l)),
        ctx,
        state.centers[2],
        r,
        cfg,
    )?;
    let ratios = FusionRatios::new(f1.lambda, f2.lambda, f.lambda);
    let next = SearchState {
        centers: ratios.as_array(),
        radius: r / 2.0,
        events: state.events + 1,
    };
    let reports = vec![
        EventReport {
            which: WhichLambda::F1,
            radius: r,
            outcome: f1,
        },
        EventReport {
            which: WhichLambda::F2,
            radius: r,
            outcome: f2,
        },
        EventReport {
            which: WhichLambda::F,
            radius: r,
            outcome: f,
        },
    ];
    Ok((ratios, next, reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codecs::Codec2D;
    use crate::denoisers::GaussianPriorDenoiser;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn candidate_grids() {
        assert!(close(
            &sample_candidates(0.5, 0.45, 4, true),
            &[0.05, 0.275, 0.5, 0.725, 0.95]
        ));
        assert!(close(&sample_candidates(0.01, 0.45, 2, true), &[0.0, 0.01, 0.46]));
        assert!(close(&sample_candidates(0.3, 0.1, 1, false), &[0.2, 0.4]));
        assert_eq!(sample_candidates(0.3, 0.1, 0, true), vec![0.3]);
        // Clamping keeps duplicates.
        assert_eq!(
            sample_candidates(0.0, 0.45, 4, true)
                .iter()
                .filter(|&&v| v == 0.0)
                .count(),
            3
        );
    }

    #[test]
    fn worked_ranking() {
        let scores = [(0.9, 0.2), (0.5, 0.1), (0.7, 0.3)];
        let (best, ranks) = rank_candidates(&scores).unwrap();
        assert_eq!(ranks, vec![(0, 1), (2, 0), (1, 2)]);
        assert_eq!(best, 0);
        assert_eq!(rank_and_select(&[(1.0, 1.0)]).unwrap(), 0);
        assert_eq!(rank_and_select(&[(1.0, 1.0); 4]).unwrap(), 0);
        assert!(matches!(
            rank_and_select(&[(f64::NAN, 0.0)]),
            Err(Error::Scoring(_))
        ));
        assert!(rank_and_select(&[]).is_err());
    }

    #[test]
    fn event_schedule() {
        let cfg = SearchConfig::default();
        let events: Vec<usize> = (0..50).filter(|&k| cfg.is_event(k)).collect();
        assert_eq!(events, vec![0, 10, 20, 30, 40]);
        let fixed = SearchConfig {
            fixed_mode: true,
            ..cfg
        };
        assert!((0..50).all(|k| !fixed.is_event(k)));
    }

    struct Target(VideoTensor);
    impl RewardModel for Target {
        fn score(&self, v: &VideoTensor, _: Option<&FlowField>) -> Result<(f64, f64)> {
            let d = v.dist_sq(&self.0)?;
            Ok((-d, d))
        }
    }

    #[test]
    fn oracle_reward_matches_exhaustive_argmin() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let codec = Codec2D::lossless(2);
        let s = DdpmSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let z_i = VideoTensor::randn([2, 4, 2, 2], &mut rng);
        let z_v1 = VideoTensor::randn([2, 4, 2, 2], &mut rng);
        let den = GaussianPriorDenoiser::new(VideoTensor::randn([2, 4, 2, 2], &mut rng), 0.5).unwrap();
        let target = codec
            .decode(&fuse_homologous(&z_i, &z_v1, 0.37).unwrap())
            .unwrap();
        let reward = Target(target.clone());
        let cfg = SearchConfig::default();
        for parallel in [false, true] {
            let ctx = SearchContext {
                denoiser: &den,
                schedule: &s,
                t: 0,
                decoder: &codec,
                reward: &reward,
                flow: None,
                parallel,
            };
            let out = search_ratio(&|l| fuse_homologous(&z_i, &z_v1, l), &ctx, 0.5, 0.45, &cfg).unwrap();
            let brute = sample_candidates(0.5, 0.45, 4, true)
                .into_iter()
                .min_by(|&a, &b| {
                    let da = codec
                        .decode(&fuse_homologous(&z_i, &z_v1, a).unwrap())
                        .unwrap()
                        .dist_sq(&target)
                        .unwrap();
                    let db = codec
                        .decode(&fuse_homologous(&z_i, &z_v1, b).unwrap())
                        .unwrap()
                        .dist_sq(&target)
                        .unwrap();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            assert_eq!(out.lambda, brute);
            assert_eq!(out.lambda, 0.275);
        }
    }

    #[test]
    fn identical_branches_pick_lowest_candidate() {
        let codec = Codec2D::lossless(2);
        let s = DdpmSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let z = VideoTensor::randn([2, 4, 2, 2], &mut ChaCha8Rng::seed_from_u64(1));
        let den = GaussianPriorDenoiser::new(VideoTensor::zeros(z.dims()), 0.5).unwrap();
        let ctx = SearchContext {
            denoiser: &den,
            schedule: &s,
            t: 0,
            decoder: &codec,
            reward: &SharpnessWarpReward,
            flow: None,
            parallel: false,
        };
        let cfg = SearchConfig::default();
        let out = search_ratio(&|l| fuse_homologous(&z, &z, l), &ctx, 0.5, 0.45, &cfg).unwrap();
        assert_eq!(out.chosen, 0);
        assert!((out.lambda - 0.05).abs() < 1e-12);
        let none = search_ratio(
            &|l| fuse_homologous(&z, &z, l),
            &ctx,
            0.42,
            0.45,
            &SearchConfig { m: 0, ..cfg },
        )
        .unwrap();
        assert_eq!(none.lambda, 0.42);
    }

    #[test]
    fn radius_halves_each_event() {
        let codec = Codec2D::lossless(2);
        let s = DdpmSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z_i = VideoTensor::randn([2, 4, 2, 2], &mut rng);
        let z_v1 = VideoTensor::randn([2, 4, 2, 2], &mut rng);
        let z_v2 = VideoTensor::randn([2, 4, 2, 2], &mut rng);
        let den = GaussianPriorDenoiser::new(VideoTensor::zeros(z_i.dims()), 0.5).unwrap();
        let ctx = SearchContext {
            denoiser: &den,
            schedule: &s,
            t: 500,
            decoder: &codec,
            reward: &SharpnessWarpReward,
            flow: None,
            parallel: false,
        };
        let cfg = SearchConfig::default();
        let latents = SearchLatents {
            z_i: &z_i,
            z_v1: &z_v1,
            z_v2_to_i: &z_v2,
        };
        let mut state = SearchState::new(&cfg);
        let mut radii = Vec::new();
        for _ in 0..3 {
            let (ratios, next, reports) = run_search_step(&latents, &state, &ctx, &cfg).unwrap();
            radii.push(reports[0].radius);
            assert_eq!(reports.len(), 3);
            for (rep, l) in reports.iter().zip(ratios.as_array()) {
                assert!(rep.outcome.reports.iter().any(|c| c.lambda == l));
            }
            assert_eq!(next.centers, ratios.as_array());
            state = next;
        }
        assert_eq!(radii, vec![0.45, 0.225, 0.1125]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn ranking_invariant_under_monotone_maps(
            scores in proptest::collection::vec((-5.0f64..5.0, 0.0f64..5.0), 1..8),
            a in 0.1f64..3.0, b in -2.0f64..2.0, c in 0.1f64..3.0,
        ) {
            let mapped: Vec<(f64, f64)> = scores
                .iter()
                .map(|&(q, e)| ((a * q + b).exp(), c * e.powi(3) + e))
                .collect();
            prop_assert_eq!(rank_candidates(&scores).unwrap(), rank_candidates(&mapped).unwrap());
        }
    }
}
