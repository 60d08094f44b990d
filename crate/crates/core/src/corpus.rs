//! Synthetic question-answering corpus.
//!
//! A fixed cast of animals is assigned a habitat, a color, a food, and a
//! sound by a seeded shuffle; lines are Q/A sentences over those facts. The
//! fact assignment is a pure function of the seed, so train, calibration,
//! and held-out splits drawn with the same seed describe one consistent
//! world while varying line order.

use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

const ANIMALS: [&str; 12] = [
    "otter", "heron", "badger", "lynx", "marmot", "puffin", "viper", "stork", "weasel", "bison",
    "crane", "gecko",
];
const PLACES: [&str; 12] = [
    "river", "marsh", "forest", "ridge", "meadow", "cliff", "dune", "valley", "burrow", "reef",
    "prairie", "cave",
];
const COLORS: [&str; 12] = [
    "brown", "grey", "black", "white", "golden", "spotted", "striped", "pale", "russet", "silver",
    "tawny", "dun",
];
const FOODS: [&str; 12] = [
    "fish", "seeds", "roots", "hares", "grass", "krill", "mice", "frogs", "eggs", "sedge",
    "grain", "moths",
];
const SOUNDS: [&str; 12] = [
    "whistles", "clatters", "growls", "hisses", "chirps", "drums", "rattles", "hoots", "squeaks",
    "snorts", "trills", "clicks",
];

struct World {
    places: Vec<&'static str>,
    colors: Vec<&'static str>,
    foods: Vec<&'static str>,
    sounds: Vec<&'static str>,
}

impl World {
    fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shuffled = |src: &[&'static str]| {
            let mut v = src.to_vec();
            v.shuffle(&mut rng);
            v
        };
        World {
            places: shuffled(&PLACES),
            colors: shuffled(&COLORS),
            foods: shuffled(&FOODS),
            sounds: shuffled(&SOUNDS),
        }
    }
}

fn qa_line(world: &World, animal_idx: usize, kind: usize) -> String {
    let a = ANIMALS[animal_idx];
    match kind {
        0 => format!(
            "Q: where does the {a} live? A: the {a} lives in the {}.",
            world.places[animal_idx]
        ),
        1 => format!(
            "Q: what color is the {a}? A: the {a} is {}.",
            world.colors[animal_idx]
        ),
        2 => format!(
            "Q: what does the {a} eat? A: the {a} eats {}.",
            world.foods[animal_idx]
        ),
        _ => format!(
            "Q: what sound does the {a} make? A: the {a} {}.",
            world.sounds[animal_idx]
        ),
    }
}

fn question_prefix(animal_idx: usize, kind: usize) -> String {
    let a = ANIMALS[animal_idx];
    match kind {
        0 => format!("Q: where does the {a} live? A:"),
        1 => format!("Q: what color is the {a}? A:"),
        2 => format!("Q: what does the {a} eat? A:"),
        _ => format!("Q: what sound does the {a} make? A:"),
    }
}

/// Number of distinct fact sentences the schema produces.
pub fn distinct_lines() -> usize {
    ANIMALS.len() * 4
}

/// `n` Q/A lines over the seed's fact world. Each full cycle of the 48
/// distinct lines is emitted in a fresh seeded order; facts never vary.
pub fn generate_corpus(n: usize, seed: u64) -> Vec<String> {
    let world = World::from_seed(seed);
    let mut order_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut pairs: Vec<(usize, usize)> = (0..ANIMALS.len())
        .flat_map(|a| (0..4).map(move |k| (a, k)))
        .collect();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        pairs.shuffle(&mut order_rng);
        for &(a, k) in &pairs {
            if out.len() == n {
                break;
            }
            out.push(qa_line(&world, a, k));
        }
    }
    out
}

/// Question prefixes (prompts ending in "A:") in a seeded order, one per
/// distinct fact, truncated to `n`.
pub fn generate_prompts(n: usize, seed: u64) -> Vec<String> {
    let mut order_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x517c_c1b7_2722_0a95);
    let mut pairs: Vec<(usize, usize)> = (0..ANIMALS.len())
        .flat_map(|a| (0..4).map(move |k| (a, k)))
        .collect();
    pairs.shuffle(&mut order_rng);
    pairs
        .iter()
        .cycle()
        .take(n)
        .map(|&(a, k)| question_prefix(a, k))
        .collect()
}

/// Newline-delimited UTF-8 corpus file. Blank lines are dropped; an empty
/// result is an error.
pub fn load_corpus(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    let lines: Vec<String> = text
        .lines()
        .map(str::trim_end)
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect();
    if lines.is_empty() {
        return Err(Error::EmptyInput(format!(
            "corpus {} has no non-empty lines",
            path.display()
        )));
    }
    Ok(lines)
}

/// Write one line per entry.
pub fn write_corpus(path: &Path, lines: &[String]) -> Result<()> {
    let mut text = lines.join("\n");
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}
