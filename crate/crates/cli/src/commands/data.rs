//! `gen-data`: synthetic datasets as tensor files.

use flowattack::data::DataKind;
use flowattack::rng::stream;
use flowattack::Result;

use super::save_tensor;
use crate::config::{key, Key, RunConfig};
use crate::{CommandSpec, Options};

const KEYS: &[Key] = &[
    key("kind", "two-moons", "Dataset: two-moons, blobs, digits8 or digits16"),
    key("n", "1000", "Number of samples"),
    key("seed", "0", "Global seed"),
];

pub const SPEC: CommandSpec = CommandSpec {
    name: "gen-data",
    about: "Generate a dataset as data.nftd and labels.nftd",
    keys: KEYS,
    parallel: false,
    run,
};

fn run(cfg: &RunConfig, opts: &Options) -> Result<()> {
    let kind: DataKind = cfg.choice("kind")?;
    let ds = kind.generate(cfg.usize("n")?, &mut stream(cfg.u64("seed")?, "data"))?;
    save_tensor(&opts.out.join("data.nftd"), &ds.x)?;
    save_tensor(&opts.out.join("labels.nftd"), &ds.labels_tensor())
}
