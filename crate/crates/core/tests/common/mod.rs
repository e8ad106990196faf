#![allow(dead_code)]

use std::path::{Path, PathBuf};

use fedpkg::config::RunConfig;
use fedpkg::pipeline::{
    build_dataset, synthesize, BuildDatasetOptions, DatasetPaths, DatasetSource, SynthOptions,
};
use fedpkg::synth::SynthConfig;

pub fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data")
}

pub fn movie_convs() -> PathBuf {
    data_dir().join("movie_mini.convs.jsonl")
}

pub fn recipe_ratings() -> PathBuf {
    data_dir().join("recipe_mini.ratings.jsonl")
}

/// Builds the movie dataset and its augmented training file under `dir`.
pub fn movie_dataset(dir: &Path) -> DatasetPaths {
    let paths = DatasetPaths::in_dir(dir);
    build_dataset(&BuildDatasetOptions::new(
        DatasetSource::Conversations(movie_convs()),
        dir,
    ))
    .expect("fixture builds");
    synthesize(&SynthOptions {
        input: paths.train.clone(),
        pkgs: paths.pkgs.clone(),
        out: augmented_path(dir),
        domain: "movie".into(),
        synth: SynthConfig::default(),
    })
    .expect("fixture augments");
    paths
}

pub fn augmented_path(dir: &Path) -> PathBuf {
    dir.join("augmented.examples.jsonl")
}

/// Run configuration pointing at a dataset built by [`movie_dataset`].
pub fn run_config(dir: &Path, extra: &str) -> RunConfig {
    let paths = DatasetPaths::in_dir(dir);
    let text = format!(
        "[data]\ndomain = \"movie\"\ntrain = {:?}\naugmented = {:?}\ntest = {:?}\ncatalog = {:?}\n{extra}",
        paths.train,
        augmented_path(dir),
        paths.test,
        paths.catalog
    );
    RunConfig::from_toml_str(&text, "test config").expect("valid config")
}
