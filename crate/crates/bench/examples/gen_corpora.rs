//! Regenerates the bundled prompt corpora in `data/`.
//!
//!     cargo run -p qverify-bench --example gen_corpora
//!
//! `repetitive.txt` fills five templates that repeat a phrase several times,
//! so prompt lookup finds matches often. `distinct.txt` strings together
//! words that never repeat within a prompt.

use std::fs;
use std::path::Path;

const SUBJECTS: [&str; 16] = [
    "the cat",
    "a red fox",
    "my robot",
    "the river",
    "our garden",
    "the old clock",
    "a paper boat",
    "the lamp",
    "your bicycle",
    "the small bird",
    "a green apple",
    "the north wind",
    "this kettle",
    "the violin",
    "a stone",
    "the lighthouse",
];

const VARS: [&str; 16] = [
    "x", "count", "total", "idx", "sum", "acc", "n", "value", "len", "step", "pos", "k", "score",
    "width", "rate", "level",
];

const WORDS: [&str; 64] = [
    "amber", "bridge", "canyon", "dancer", "ember", "falcon", "glacier", "harbor", "island",
    "jungle", "kettle", "lantern", "meadow", "nectar", "orchid", "pepper", "quartz", "rocket",
    "saddle", "timber", "umbrella", "velvet", "walnut", "yonder", "zephyr", "anchor", "blossom",
    "cobalt", "drizzle", "echo", "fable", "garnet", "hollow", "ivory", "jasper", "kindle",
    "lagoon", "marble", "nimbus", "oyster", "pebble", "quiver", "ripple", "sierra", "thistle",
    "unicorn", "vortex", "willow", "xenon", "yarrow", "zinnia", "atlas", "beacon", "cinder",
    "dune", "eclipse", "fjord", "gravel", "heron", "indigo", "juniper", "kelp", "lilac", "mosaic",
];

fn repetitive() -> Vec<String> {
    let mut out = Vec::new();
    for (i, (s, v)) in SUBJECTS.iter().zip(VARS).enumerate() {
        let n = i + 2;
        out.push(format!(
            "{s} is here. {s} is here. {s} is here. where is {s}? {s} is here."
        ));
        out.push(format!(
            "let {v} = {v} + {n}; let {v} = {v} + {n}; let {v} = {v} + {n};"
        ));
        out.push(format!(
            "step 1: add {n}. step 2: add {n}. step 3: add {n}. step 4: add {n}."
        ));
        out.push(format!("{s} and {s} and {s} and {s} and"));
        out.push(format!("{v}, {v}, {v}, {v}, {v}, {v}, {v}, {v},"));
    }
    out
}

fn distinct() -> Vec<String> {
    (0..64)
        .map(|i| {
            let words: Vec<&str> = (0..8)
                .map(|j| WORDS[(i * 7 + j * 13) % WORDS.len()])
                .collect();
            words.join(" ")
        })
        .collect()
}

fn main() -> std::io::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("data");
    fs::create_dir_all(&dir)?;
    for (name, lines) in [
        ("repetitive.txt", repetitive()),
        ("distinct.txt", distinct()),
    ] {
        let path = dir.join(name);
        fs::write(&path, lines.join("\n") + "\n")?;
        println!("{}: {} prompts", path.display(), lines.len());
    }
    Ok(())
}
