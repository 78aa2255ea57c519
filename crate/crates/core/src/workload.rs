//! Synthetic gradient-computation traces.
//!
//! A trace is the atomic traffic of a tile-based rasterizer's backward pass:
//! each warp covers an 8x4 pixel tile, iterates over the primitives that touch
//! the tile, and every lane whose pixel passed the per-fragment checks adds its
//! `N` gradient values to that primitive's parameters. The gradient math itself
//! is not modeled, only the resulting updates.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simt::{LaneMask, WARP_SIZE};

pub const TILE_WIDTH: u32 = 8;
pub const TILE_HEIGHT: u32 = 4;

/// Smallest and largest number of distinct primitives in a non-convergent warp.
const NEIGHBORHOOD_MIN: u32 = 2;
const NEIGHBORHOOD_MAX: u32 = 8;

/// How gradient values are drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradDistribution {
    /// Uniform over `{k/256 : k = 1..255}`. Every partial sum of up to 2^20
    /// such values is exact in `f64`, so any summation order gives the same bits.
    #[default]
    Dyadic,
    /// Uniform reals in `[-1, 1)`.
    Uniform,
}

impl GradDistribution {
    fn sample<R: Rng>(self, rng: &mut R) -> f64 {
        match self {
            GradDistribution::Dyadic => rng.random_range(1u32..=255) as f64 / 256.0,
            GradDistribution::Uniform => rng.random_range(-1.0..1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub num_primitives: u32,
    /// Gradient values per primitive (`N`).
    pub params_per_primitive: usize,
    pub image_width: u32,
    pub image_height: u32,
    /// Mean length, in pixels, of one primitive's fragment run.
    pub mean_fragment_span: f64,
    /// Mean loop trip count per warp.
    pub fragments_per_pixel_mean: f64,
    /// Probability that a lane passes its per-fragment checks.
    pub activity_prob: f64,
    /// Probability that all lanes of a warp iteration share one primitive.
    pub locality: f64,
    pub seed: u64,
    pub grad_distribution: GradDistribution,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            num_primitives: 4096,
            params_per_primitive: 3,
            image_width: 64,
            image_height: 32,
            mean_fragment_span: 96.0,
            fragments_per_pixel_mean: 4.0,
            activity_prob: 0.6,
            locality: 0.99,
            seed: 0,
            grad_distribution: GradDistribution::Dyadic,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        fn bad(field: &'static str, reason: impl Into<String>) -> Result<()> {
            Err(Error::InvalidScene {
                field,
                reason: reason.into(),
            })
        }
        if self.num_primitives == 0 {
            return bad("num_primitives", "must be at least 1");
        }
        if self.params_per_primitive == 0 {
            return bad("params_per_primitive", "must be at least 1");
        }
        if self.params_per_primitive > u16::MAX as usize {
            return bad("params_per_primitive", "must fit in 16 bits");
        }
        if self.image_width == 0 || self.image_height == 0 {
            return bad("image_width/image_height", "must be at least 1 pixel");
        }
        if !(self.mean_fragment_span >= 1.0 && self.mean_fragment_span.is_finite()) {
            return bad("mean_fragment_span", "must be a finite value >= 1");
        }
        if !(self.fragments_per_pixel_mean > 0.0 && self.fragments_per_pixel_mean.is_finite()) {
            return bad("fragments_per_pixel_mean", "must be a finite value > 0");
        }
        if !(0.0..=1.0).contains(&self.activity_prob) {
            return bad("activity_prob", "must be in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.locality) {
            return bad("locality", "must be in [0, 1]");
        }
        Ok(())
    }

    pub fn tiles_x(&self) -> u32 {
        self.image_width.div_ceil(TILE_WIDTH)
    }

    pub fn tiles_y(&self) -> u32 {
        self.image_height.div_ceil(TILE_HEIGHT)
    }

    pub fn num_warps(&self) -> u32 {
        self.tiles_x() * self.tiles_y()
    }

    /// Lanes of `warp_id` whose pixel lies inside the image.
    pub fn pixel_mask(&self, warp_id: u32) -> LaneMask {
        let tx = warp_id % self.tiles_x();
        let ty = warp_id / self.tiles_x();
        (0..WARP_SIZE)
            .filter(|&lane| {
                let px = tx * TILE_WIDTH + lane as u32 % TILE_WIDTH;
                let py = ty * TILE_HEIGHT + lane as u32 / TILE_WIDTH;
                px < self.image_width && py < self.image_height
            })
            .fold(LaneMask::EMPTY, LaneMask::with)
    }
}

/// One loop iteration of one warp.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpRecord {
    pub warp_id: u32,
    pub iteration: u32,
    pub active: LaneMask,
    pub lane_primitive: [u32; WARP_SIZE],
    /// `WARP_SIZE * N` values, lane-major.
    pub lane_grads: Vec<f64>,
}

impl WarpRecord {
    pub fn new(warp_id: u32, iteration: u32, params: usize) -> Self {
        WarpRecord {
            warp_id,
            iteration,
            active: LaneMask::EMPTY,
            lane_primitive: [0; WARP_SIZE],
            lane_grads: vec![0.0; WARP_SIZE * params],
        }
    }

    #[inline]
    pub fn params(&self) -> usize {
        self.lane_grads.len() / WARP_SIZE
    }

    #[inline]
    pub fn grads(&self, lane: usize) -> &[f64] {
        let n = self.params();
        &self.lane_grads[lane * n..(lane + 1) * n]
    }

    #[inline]
    pub fn grads_mut(&mut self, lane: usize) -> &mut [f64] {
        let n = self.params();
        &mut self.lane_grads[lane * n..(lane + 1) * n]
    }

    /// Sets `lane` active with the given primitive and gradients.
    pub fn set_lane(&mut self, lane: usize, primitive: u32, grads: &[f64]) {
        self.active = self.active.with(lane);
        self.lane_primitive[lane] = primitive;
        self.grads_mut(lane).copy_from_slice(grads);
    }

    pub fn distinct_primitives(&self) -> usize {
        self.active
            .lanes()
            .map(|lane| self.lane_primitive[lane])
            .collect::<BTreeSet<_>>()
            .len()
    }
}

/// Sub-core placement of a warp.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Slot {
    pub sm: u32,
    pub subcore: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub scene: SceneSpec,
    /// Issue order consumed by the simulator.
    pub records: Vec<WarpRecord>,
    /// Explicit warp placement. Empty means round-robin at simulation time.
    pub schedule: BTreeMap<u32, Slot>,
}

impl Trace {
    pub fn new(scene: SceneSpec, records: Vec<WarpRecord>) -> Self {
        Trace {
            scene,
            records,
            schedule: BTreeMap::new(),
        }
    }

    pub fn params(&self) -> usize {
        self.scene.params_per_primitive
    }

    pub fn warp_ids(&self) -> BTreeSet<u32> {
        self.records.iter().map(|r| r.warp_id).collect()
    }

    pub fn max_iteration(&self) -> Option<u32> {
        self.records.iter().map(|r| r.iteration).max()
    }

    /// All records of one iteration index, keeping order and schedule.
    pub fn segment(&self, iteration: u32) -> Trace {
        Trace {
            scene: self.scene.clone(),
            records: self
                .records
                .iter()
                .filter(|r| r.iteration == iteration)
                .cloned()
                .collect(),
            schedule: self.schedule.clone(),
        }
    }

    /// Copies a single-SM trace onto `num_sms` SMs so that every SM receives
    /// identical work. Original warps are spread round-robin over the
    /// sub-cores of each SM; copy `s` of warp `w` gets id `s * W + w`.
    pub fn replicate_across_sms(&self, num_sms: u32, subcores_per_sm: u32) -> Trace {
        let ids: Vec<u32> = self.warp_ids().into_iter().collect();
        let span = ids.last().map_or(0, |&w| w + 1);
        let local: BTreeMap<u32, u32> = ids
            .iter()
            .enumerate()
            .map(|(i, &w)| (w, i as u32 % subcores_per_sm))
            .collect();
        let mut schedule = BTreeMap::new();
        let mut records = Vec::with_capacity(self.records.len() * num_sms as usize);
        for rec in &self.records {
            for sm in 0..num_sms {
                let mut copy = rec.clone();
                copy.warp_id = sm * span + rec.warp_id;
                schedule.insert(
                    copy.warp_id,
                    Slot {
                        sm,
                        subcore: local[&rec.warp_id],
                    },
                );
                records.push(copy);
            }
        }
        Trace {
            scene: self.scene.clone(),
            records,
            schedule,
        }
    }
}

/// Fragment runs of one depth layer, walked in tile order.
struct LayerRuns {
    primitive: u32,
    remaining: u64,
}

/// Generates a deterministic trace for `scene`.
///
/// Per warp-iteration, with probability `locality` every lane references one
/// primitive (the fragment run covering the tile's first pixel at that layer);
/// otherwise the tile is split into 2..=8 contiguous lane segments that
/// reference neighboring primitives. Each in-image lane is independently
/// active with probability `activity_prob`. Records are emitted
/// iteration-major, warps ascending within an iteration.
pub fn generate(scene: &SceneSpec) -> Result<Trace> {
    scene.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
    let params = scene.params_per_primitive;
    let num_warps = scene.num_warps();

    let trips_dist = Poisson::new(scene.fragments_per_pixel_mean).map_err(|e| Error::InvalidScene {
        field: "fragments_per_pixel_mean",
        reason: e.to_string(),
    })?;
    let run_dist = Geometric::new(1.0 / scene.mean_fragment_span).map_err(|e| Error::InvalidScene {
        field: "mean_fragment_span",
        reason: e.to_string(),
    })?;

    let trips: Vec<u32> = (0..num_warps)
        .map(|_| (trips_dist.sample(&mut rng) as u32).max(1))
        .collect();
    let pixel_masks: Vec<LaneMask> = (0..num_warps).map(|w| scene.pixel_mask(w)).collect();
    let max_trip = trips.iter().copied().max().unwrap_or(0);

    let mut records = Vec::new();
    let mut values = vec![0.0; params];
    for iteration in 0..max_trip {
        let mut layer = LayerRuns {
            primitive: 0,
            remaining: 0,
        };
        for warp_id in 0..num_warps {
            if trips[warp_id as usize] <= iteration {
                continue;
            }
            if layer.remaining == 0 {
                layer.primitive = rng.random_range(0..scene.num_primitives);
                layer.remaining = 1 + run_dist.sample(&mut rng);
            }
            let base = layer.primitive;
            layer.remaining = layer.remaining.saturating_sub(WARP_SIZE as u64);

            let mut lane_prim = [base; WARP_SIZE];
            let convergent = rng.random_bool(scene.locality);
            let max_distinct = NEIGHBORHOOD_MAX.min(scene.num_primitives);
            if !convergent && max_distinct >= NEIGHBORHOOD_MIN {
                let k = rng.random_range(NEIGHBORHOOD_MIN..=max_distinct) as usize;
                let cuts = rand::seq::index::sample(&mut rng, WARP_SIZE - 1, k - 1);
                let mut starts: Vec<usize> = cuts.into_iter().map(|c| c + 1).collect();
                starts.sort_unstable();
                let mut segment = 0u32;
                for (lane, prim) in lane_prim.iter_mut().enumerate() {
                    while (segment as usize) < starts.len() && lane >= starts[segment as usize] {
                        segment += 1;
                    }
                    *prim = (base + segment) % scene.num_primitives;
                }
            }

            let mut record = WarpRecord::new(warp_id, iteration, params);
            for lane in pixel_masks[warp_id as usize].lanes() {
                if rng.random_bool(scene.activity_prob) {
                    for v in values.iter_mut() {
                        *v = scene.grad_distribution.sample(&mut rng);
                    }
                    record.set_lane(lane, lane_prim[lane], &values);
                }
            }
            records.push(record);
        }
    }
    Ok(Trace::new(scene.clone(), records))
}

/// Frequency of the number of distinct primitives among active lanes.
/// Records with an empty active mask are skipped.
pub fn histogram_distinct_primitives(trace: &Trace) -> Result<BTreeMap<u32, u64>> {
    if trace.records.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let mut hist = BTreeMap::new();
    for rec in trace.records.iter().filter(|r| !r.active.is_empty()) {
        *hist.entry(rec.distinct_primitives() as u32).or_insert(0) += 1;
    }
    Ok(hist)
}

/// Frequency of the active-lane count (0..=32) per record.
pub fn histogram_active_lanes(trace: &Trace) -> Result<BTreeMap<u32, u64>> {
    if trace.records.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let mut hist = BTreeMap::new();
    for rec in &trace.records {
        *hist.entry(rec.active.count()).or_insert(0) += 1;
    }
    Ok(hist)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene(locality: f64, activity: f64) -> SceneSpec {
        SceneSpec {
            locality,
            activity_prob: activity,
            ..SceneSpec::default()
        }
    }

    fn hand_record(warp_id: u32, prims: &[u32]) -> WarpRecord {
        let mut rec = WarpRecord::new(warp_id, 0, 1);
        for (lane, &p) in prims.iter().enumerate() {
            rec.set_lane(lane, p, &[0.5]);
        }
        rec
    }

    #[test]
    fn rejects_invalid_scenes() {
        let cases = [
            SceneSpec {
                num_primitives: 0,
                ..SceneSpec::default()
            },
            SceneSpec {
                params_per_primitive: 0,
                ..SceneSpec::default()
            },
            SceneSpec {
                image_width: 0,
                ..SceneSpec::default()
            },
            SceneSpec {
                mean_fragment_span: 0.5,
                ..SceneSpec::default()
            },
            SceneSpec {
                fragments_per_pixel_mean: 0.0,
                ..SceneSpec::default()
            },
            SceneSpec {
                activity_prob: 1.5,
                ..SceneSpec::default()
            },
            SceneSpec {
                locality: -0.1,
                ..SceneSpec::default()
            },
            SceneSpec {
                locality: f64::NAN,
                ..SceneSpec::default()
            },
        ];
        for case in cases {
            assert!(matches!(generate(&case), Err(Error::InvalidScene { .. })), "{case:?}");
        }
    }

    #[test]
    fn degenerate_scene_is_fully_convergent() {
        let trace = generate(&scene(1.0, 1.0)).unwrap();
        assert!(!trace.records.is_empty());
        for rec in &trace.records {
            assert_eq!(rec.active, LaneMask::FULL);
            assert_eq!(rec.distinct_primitives(), 1);
        }
        let hist = histogram_distinct_primitives(&trace).unwrap();
        assert_eq!(hist, BTreeMap::from([(1, trace.records.len() as u64)]));
        let active = histogram_active_lanes(&trace).unwrap();
        assert_eq!(active, BTreeMap::from([(32, trace.records.len() as u64)]));
    }

    #[test]
    fn generation_is_deterministic() {
        let s = scene(0.9, 0.7);
        assert_eq!(generate(&s).unwrap(), generate(&s).unwrap());
        let other = SceneSpec { seed: 1, ..s };
        assert_ne!(
            generate(&other).unwrap().records,
            generate(&scene(0.9, 0.7)).unwrap().records
        );
    }

    #[test]
    fn primitives_in_range_and_inactive_lanes_zeroed() {
        let s = SceneSpec {
            num_primitives: 5,
            image_width: 30,
            image_height: 10,
            ..scene(0.5, 0.5)
        };
        let trace = generate(&s).unwrap();
        for rec in &trace.records {
            assert_eq!(rec.active & !s.pixel_mask(rec.warp_id), LaneMask::EMPTY);
            for lane in 0..WARP_SIZE {
                if rec.active.contains(lane) {
                    assert!(rec.lane_primitive[lane] < 5);
                    assert!(rec.grads(lane).iter().all(|&g| g > 0.0 && g < 1.0));
                } else {
                    assert!(rec.grads(lane).iter().all(|&g| g == 0.0));
                }
            }
        }
    }

    #[test]
    fn partial_tiles_mask_out_of_image_lanes() {
        let s = SceneSpec {
            image_width: 10,
            image_height: 6,
            ..SceneSpec::default()
        };
        assert_eq!(s.num_warps(), 4);
        assert_eq!(s.pixel_mask(0), LaneMask::FULL);
        // tile x=1 covers px 8..16, only 8 and 9 are inside
        assert_eq!(s.pixel_mask(1), LaneMask(0x0303_0303));
        // tile y=1 covers py 4..8, only rows 4 and 5
        assert_eq!(s.pixel_mask(2), LaneMask(0x0000_FFFF));
    }

    #[test]
    fn histograms_of_hand_built_trace() {
        let records = vec![
            hand_record(0, &[1, 1, 1]),
            hand_record(1, &[4]),
            hand_record(2, &[2, 3, 2]),
        ];
        let mut trace = Trace::new(SceneSpec::default(), records);
        trace.records.push(WarpRecord::new(3, 0, 1));
        let hist = histogram_distinct_primitives(&trace).unwrap();
        assert_eq!(hist, BTreeMap::from([(1, 2), (2, 1)]));
        let active = histogram_active_lanes(&trace).unwrap();
        assert_eq!(active, BTreeMap::from([(0, 1), (1, 1), (3, 2)]));
    }

    #[test]
    fn histograms_reject_empty_trace() {
        let empty = Trace::new(SceneSpec::default(), vec![]);
        assert!(matches!(histogram_distinct_primitives(&empty), Err(Error::EmptyTrace)));
        assert!(matches!(histogram_active_lanes(&empty), Err(Error::EmptyTrace)));
    }

    #[test]
    fn distinct_histogram_matches_bruteforce_recount() {
        let trace = generate(&SceneSpec {
            seed: 11,
            ..scene(0.7, 0.8)
        })
        .unwrap();
        let hist = histogram_distinct_primitives(&trace).unwrap();
        let mut recount: BTreeMap<u32, u64> = BTreeMap::new();
        for rec in &trace.records {
            let mut seen = Vec::new();
            for lane in 0..WARP_SIZE {
                if rec.active.bits() >> lane & 1 == 1 && !seen.contains(&rec.lane_primitive[lane]) {
                    seen.push(rec.lane_primitive[lane]);
                }
            }
            if !seen.is_empty() {
                *recount.entry(seen.len() as u32).or_default() += 1;
            }
        }
        assert_eq!(hist, recount);
        let nonempty = trace.records.iter().filter(|r| !r.active.is_empty()).count() as u64;
        assert_eq!(hist.values().sum::<u64>(), nonempty);
        assert!(hist.keys().all(|&k| (1..=8).contains(&k)));
    }

    #[test]
    fn locality_controls_convergent_fraction() {
        let s = SceneSpec {
            image_width: 256,
            image_height: 128,
            fragments_per_pixel_mean: 12.0,
            seed: 3,
            ..scene(0.99, 1.0)
        };
        let trace = generate(&s).unwrap();
        assert!(trace.records.len() >= 10_000);
        let hist = histogram_distinct_primitives(&trace).unwrap();
        let total: u64 = hist.values().sum();
        let frac = hist[&1] as f64 / total as f64;
        assert!((frac - 0.99).abs() <= 0.01, "{frac}");
    }

    #[test]
    fn activity_gives_binomial_mean() {
        let s = SceneSpec {
            image_width: 512,
            image_height: 256,
            fragments_per_pixel_mean: 25.0,
            seed: 5,
            ..scene(0.99, 0.5)
        };
        let trace = generate(&s).unwrap();
        assert!(trace.records.len() >= 100_000);
        let active = histogram_active_lanes(&trace).unwrap();
        let direct: u64 = trace.records.iter().map(|r| r.active.count() as u64).sum();
        let from_hist: u64 = active.iter().map(|(k, v)| *k as u64 * v).sum();
        assert_eq!(direct, from_hist);
        let mean = direct as f64 / trace.records.len() as f64;
        assert!((mean - 16.0).abs() <= 0.2, "{mean}");
    }

    #[test]
    fn trip_counts_are_at_least_one() {
        let s = SceneSpec {
            fragments_per_pixel_mean: 0.01,
            ..SceneSpec::default()
        };
        let trace = generate(&s).unwrap();
        assert_eq!(trace.warp_ids().len() as u32, s.num_warps());
    }

    #[test]
    fn replicate_gives_every_sm_identical_work() {
        let base = generate(&SceneSpec {
            image_width: 16,
            image_height: 8,
            ..SceneSpec::default()
        })
        .unwrap();
        let rep = base.replicate_across_sms(3, 4);
        assert_eq!(rep.records.len(), base.records.len() * 3);
        assert_eq!(rep.schedule.len(), base.warp_ids().len() * 3);
        for sm in 0..3 {
            let on_sm: Vec<_> = rep
                .records
                .iter()
                .filter(|r| rep.schedule[&r.warp_id].sm == sm)
                .map(|r| (r.iteration, r.active, r.lane_primitive, r.lane_grads.clone()))
                .collect();
            let orig: Vec<_> = base
                .records
                .iter()
                .map(|r| (r.iteration, r.active, r.lane_primitive, r.lane_grads.clone()))
                .collect();
            assert_eq!(on_sm, orig);
        }
    }
}
