//! Random scene sampling and training-example assembly.
//!
//! A scene holds emitters and sensors for one training example. Sampling is
//! a pure function of (master seed, split, index): each example gets its own
//! counter-derived seed, so any record can be regenerated in isolation and
//! splits never share a random stream.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetManifest, Split};
use crate::grid::{CellIndex, Point2D, Region};
use crate::propagation::{
    ground_truth_map, mw_from_dbm, sensor_sample, transform_input, Emitter, GridMap, Sensor,
};
use crate::{Error, Result};

/// Emitter powers are drawn uniformly from this dBm interval.
pub const POWER_RANGE_DBM: (f64, f64) = (20.0, 30.0);

/// Attempts per emitter before position rejection sampling gives up.
const MAX_REJECTION_ATTEMPTS: usize = 10_000;

/// Placeholder coordinate for padding label rows.
pub const LABEL_PAD: i64 = -1;

/// One sampled scenario: emitter set, sensor set, and the seed that fully
/// determines both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub region: Region,
    pub emitters: Vec<Emitter>,
    pub sensors: Vec<Sensor>,
    pub seed: u64,
}

/// One row of the M-slot label matrix: existence bit plus 1-indexed cell
/// coordinates, `(-1, -1)` on padding rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRow {
    pub b: u8,
    pub u: i64,
    pub v: i64,
}

/// Fixed-size (M rows) per-example label set. Real rows precede padding rows;
/// training is order-invariant anyway via the permutation-invariant loss.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMatrix {
    pub rows: Vec<LabelRow>,
}

impl LabelMatrix {
    /// Build from the true emitter cells, padding up to `m` slots.
    pub fn from_cells(cells: &[CellIndex], m: usize) -> Result<Self> {
        if cells.is_empty() || cells.len() > m {
            return Err(Error::Config(format!(
                "label matrix needs 1..={m} emitters, got {}",
                cells.len()
            )));
        }
        let mut rows: Vec<LabelRow> = cells
            .iter()
            .map(|c| LabelRow { b: 1, u: c.u as i64, v: c.v as i64 })
            .collect();
        rows.resize(m, LabelRow { b: 0, u: LABEL_PAD, v: LABEL_PAD });
        Ok(LabelMatrix { rows })
    }

    /// Number of real (b=1) rows.
    pub fn k_true(&self) -> usize {
        self.rows.iter().filter(|r| r.b == 1).count()
    }

    /// Cells of the real rows, in stored order.
    pub fn true_cells(&self) -> Vec<CellIndex> {
        self.rows
            .iter()
            .filter(|r| r.b == 1)
            .map(|r| CellIndex::new(r.u as usize, r.v as usize))
            .collect()
    }

    pub fn m(&self) -> usize {
        self.rows.len()
    }
}

/// Binary ground-truth occupancy raster: 1 where the true power map reaches
/// the threshold tau, 0 elsewhere.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OccupancyMap {
    pub h: usize,
    pub w: usize,
    pub values: Vec<u8>,
}

/// Per-example seed: a splitmix chain over master seed, split id, and index.
pub fn scene_seed(master_seed: u64, split: Split, index: u64) -> u64 {
    use crate::propagation::splitmix64;
    let mut h = splitmix64(master_seed ^ 0x9E37_79B9_7F4A_7C15);
    h = splitmix64(h ^ split.id());
    h = splitmix64(h ^ index);
    h
}

/// Draw the scene for (split, index): K ~ Unif{1..M}, emitter positions
/// uniform over the region rejection-resampled until their cells are
/// distinct, powers ~ Unif[20, 30) dBm, then sensor cells uniform without
/// replacement with sensors placed at cell centroids. The draw order
/// (count, positions, powers, sensors) is part of the format contract.
pub fn sample_scene(manifest: &DatasetManifest, split: Split, index: u64) -> Result<Scene> {
    manifest.validate()?;
    let region = manifest.region;
    let seed = scene_seed(manifest.master_seed, split, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let k = rng.gen_range(1..=manifest.m);
    let mut taken: HashSet<CellIndex> = HashSet::with_capacity(k);
    let mut positions: Vec<Point2D> = Vec::with_capacity(k);
    for emitter_idx in 0..k {
        let mut placed = false;
        for _ in 0..MAX_REJECTION_ATTEMPTS {
            let p = Point2D::new(
                rng.gen_range(0.0..region.width_m),
                rng.gen_range(0.0..region.height_m),
            );
            let cell = region.cell_of(p)?;
            if taken.insert(cell) {
                positions.push(p);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::SceneGeneration(format!(
                "could not place emitter {emitter_idx} in a free cell after {MAX_REJECTION_ATTEMPTS} attempts ({}x{} grid)",
                region.grid_h, region.grid_w
            )));
        }
    }
    let emitters: Vec<Emitter> = positions
        .into_iter()
        .map(|position| Emitter {
            position,
            power_dbm: rng.gen_range(POWER_RANGE_DBM.0..POWER_RANGE_DBM.1),
        })
        .collect();

    let n_cells = region.n_cells();
    let sensor_cells = rand::seq::index::sample(&mut rng, n_cells, manifest.n_sensors);
    let sensors: Vec<Sensor> = sensor_cells
        .iter()
        .map(|flat| {
            let cell = CellIndex::new(flat / region.grid_w + 1, flat % region.grid_w + 1);
            Ok(Sensor { position: region.centroid_of(cell)? })
        })
        .collect::<Result<_>>()?;

    Ok(Scene { region, emitters, sensors, seed })
}

/// Assemble the training triple for a scene: transformed input map, M-slot
/// label matrix, and thresholded ground-truth occupancy.
pub fn build_example(
    scene: &Scene,
    manifest: &DatasetManifest,
) -> Result<(GridMap, LabelMatrix, OccupancyMap)> {
    if scene.emitters.is_empty() {
        return Err(Error::SceneGeneration(
            "scenes must contain at least one emitter".to_string(),
        ));
    }
    let region = &scene.region;
    let truth = ground_truth_map(region, &manifest.propagation, &scene.emitters)?;
    let sampled = sensor_sample(region, &manifest.propagation, &scene.emitters, &scene.sensors)?;
    let input = transform_input(&sampled, manifest.tau_dbm)?;

    let emitter_points: Vec<Point2D> = scene.emitters.iter().map(|e| e.position).collect();
    let cells = region.quantize_emitters(&emitter_points)?;
    let labels = LabelMatrix::from_cells(&cells, manifest.m)?;

    // Occupancy thresholds the true map at tau, compared in the linear
    // domain so empty cells (0 mW) need no special casing.
    let tau_linear = mw_from_dbm(manifest.tau_dbm);
    let values: Vec<u8> = truth.values.iter().map(|&v| u8::from(v >= tau_linear)).collect();
    let occupancy = OccupancyMap { h: truth.h, w: truth.w, values };

    Ok((input, labels, occupancy))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::propagation::dbm_from_mw;

    fn mini_manifest() -> DatasetManifest {
        DatasetManifest::desk_freespace(42).with_region(Region::square(32.0, 16).unwrap())
    }

    #[test]
    fn same_seed_reproduces_scene_exactly() {
        let manifest = mini_manifest();
        let a = sample_scene(&manifest, Split::Train, 7).unwrap();
        let b = sample_scene(&manifest, Split::Train, 7).unwrap();
        assert_eq!(a, b);
        let c = sample_scene(&manifest, Split::Val, 7).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn split_seed_streams_are_disjoint() {
        let mut seen = HashSet::new();
        for split in [Split::Train, Split::Val, Split::Test] {
            for index in 0..10_000u64 {
                assert!(
                    seen.insert(scene_seed(99, split, index)),
                    "seed collision at {split:?} {index}"
                );
            }
        }
    }

    #[test]
    fn emitter_count_is_uniform_and_powers_in_range() {
        let manifest = mini_manifest();
        let mut counts = [0usize; 3];
        for index in 0..10_000u64 {
            let scene = sample_scene(&manifest, Split::Train, index).unwrap();
            counts[scene.emitters.len() - 1] += 1;
            for e in &scene.emitters {
                assert!((20.0..=30.0).contains(&e.power_dbm), "power {}", e.power_dbm);
            }
        }
        for (k, &c) in counts.iter().enumerate() {
            let frac = c as f64 / 10_000.0;
            assert!(
                (frac - 1.0 / 3.0).abs() < 0.02,
                "P(K={}) = {frac}",
                k + 1
            );
        }
    }

    #[test]
    fn emitters_and_sensors_occupy_distinct_cells() {
        let manifest = mini_manifest();
        for index in 0..200u64 {
            let scene = sample_scene(&manifest, Split::Test, index).unwrap();
            let cells: HashSet<CellIndex> = scene
                .emitters
                .iter()
                .map(|e| scene.region.cell_of(e.position).unwrap())
                .collect();
            assert_eq!(cells.len(), scene.emitters.len());
            let sensor_cells: HashSet<CellIndex> = scene
                .sensors
                .iter()
                .map(|s| scene.region.cell_of(s.position).unwrap())
                .collect();
            assert_eq!(sensor_cells.len(), manifest.n_sensors);
            assert_eq!(scene.sensors.len(), manifest.n_sensors);
        }
    }

    #[test]
    fn labels_pad_after_real_rows() {
        let manifest = mini_manifest();
        for index in 0..300u64 {
            let scene = sample_scene(&manifest, Split::Train, index).unwrap();
            let (_, labels, _) = build_example(&scene, &manifest).unwrap();
            assert_eq!(labels.m(), manifest.m);
            let k = scene.emitters.len();
            assert_eq!(labels.k_true(), k);
            for (i, row) in labels.rows.iter().enumerate() {
                if i < k {
                    let cell = scene.region.cell_of(scene.emitters[i].position).unwrap();
                    assert_eq!((row.b, row.u, row.v), (1, cell.u as i64, cell.v as i64));
                } else {
                    assert_eq!((row.b, row.u, row.v), (0, LABEL_PAD, LABEL_PAD));
                }
            }
        }
    }

    #[test]
    fn input_is_transformed_sensor_map() {
        let manifest = mini_manifest();
        let scene = sample_scene(&manifest, Split::Train, 3).unwrap();
        let (input, _, _) = build_example(&scene, &manifest).unwrap();
        let mask = input.sensor_mask.as_ref().expect("mask carried through");
        let sampled =
            sensor_sample(&scene.region, &manifest.propagation, &scene.emitters, &scene.sensors)
                .unwrap();
        for (idx, &value) in input.values.iter().enumerate() {
            if mask[idx] {
                let expect = ((dbm_from_mw(sampled.values[idx]) - manifest.tau_dbm) / 10.0).max(0.0);
                assert!((value - expect).abs() < 1e-12);
            } else {
                assert_eq!(value, 0.0);
            }
        }
        assert_eq!(mask.iter().filter(|&&b| b).count(), manifest.n_sensors);
    }

    #[test]
    fn every_emitter_cell_is_occupied_at_default_threshold() {
        // Free-space with the min-distance clamp keeps own-cell power far
        // above tau = -45 dBm for 20..30 dBm transmitters at this scale.
        let manifest = mini_manifest();
        for index in 0..200u64 {
            let scene = sample_scene(&manifest, Split::Val, index).unwrap();
            let (_, labels, occupancy) = build_example(&scene, &manifest).unwrap();
            for cell in labels.true_cells() {
                let idx = cell.flat(occupancy.w);
                assert_eq!(occupancy.values[idx], 1, "emitter cell {cell:?} not occupied");
            }
        }
    }

    #[test]
    fn empty_scene_is_rejected() {
        let manifest = mini_manifest();
        let mut scene = sample_scene(&manifest, Split::Train, 0).unwrap();
        scene.emitters.clear();
        assert!(matches!(
            build_example(&scene, &manifest),
            Err(Error::SceneGeneration(_))
        ));
    }

    #[test]
    fn rejection_gives_up_on_impossible_grids() {
        // 1x1 grid cannot hold two distinct emitter cells; K is forced to 1
        // there, so exercise the bound directly with a 1x2 grid and M=3.
        let mut manifest = DatasetManifest::desk_freespace(1)
            .with_region(Region::new(2.0, 1.0, 1, 2).unwrap());
        manifest.n_sensors = 1;
        let mut saw_error = false;
        for index in 0..50 {
            match sample_scene(&manifest, Split::Train, index) {
                Err(Error::SceneGeneration(_)) => {
                    saw_error = true;
                    break;
                }
                Ok(scene) => assert!(scene.emitters.len() <= 2),
                Err(other) => panic!("unexpected error {other:?}"),
            }
        }
        assert!(saw_error, "K=3 on a 2-cell grid must eventually fail placement");
    }
}
