#![allow(dead_code, clippy::needless_range_loop)]

pub mod oracles;
pub mod reference;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use feedsynth::data::{parse_records, Sample};
use feedsynth::region::{load_region_features, RegionFeatureSet};

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn overfit_corpus() -> (Vec<Sample>, BTreeMap<String, RegionFeatureSet>) {
    let samples = parse_records(fixture("overfit_records.jsonl")).expect("records fixture");
    let regions = load_region_features(fixture("overfit_regions.jsonl")).expect("regions fixture");
    (samples, regions)
}
