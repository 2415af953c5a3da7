use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::InstructionLexicon;
use crate::error::{Error, Result};
use crate::modulation::TaskId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledInstruction {
    pub text: String,
    pub task: TaskId,
}

/// Clauses unrelated to any task, mixed into generated instructions.
pub const DISTRACTORS: &[&str] = &[
    "I took this on my phone yesterday",
    "thanks in advance",
    "it is for my grandmother's birthday album",
    "the colors are fine otherwise",
    "we were hiking in the mountains",
    "it was shot at dusk",
    "my friend sent it to me",
    "I want to print it later",
    "this is my favourite picture of the dog",
    "be careful with the faces",
];

const OBJECTS: &[&str] = &["photo", "picture", "image", "shot", "snapshot", "pic"];
const VERBS: &[&str] = &[
    "remove",
    "get rid of",
    "clean up",
    "clear",
    "reduce",
    "take out",
    "eliminate",
];

struct Bank {
    task: &'static str,
    nouns: &'static [&'static str],
    adjectives: &'static [&'static str],
    /// Whole sentences; `{obj}` is substituted.
    special: &'static [&'static str],
}

const BANKS: &[Bank] = &[
    Bank {
        task: "denoise",
        nouns: &["noise", "grain", "speckles", "sensor noise", "static", "color noise"],
        adjectives: &["noisy", "grainy", "speckled", "full of grain"],
        special: &[
            "denoise this {obj}",
            "the {obj} has a lot of high iso noise",
            "smooth out the grain",
        ],
    },
    Bank {
        task: "deblur",
        nouns: &["blur", "motion blur", "camera shake", "blurriness"],
        adjectives: &["blurry", "blurred", "shaky", "out of focus"],
        special: &[
            "sharpen this {obj}",
            "deblur it please",
            "I moved the camera and now the {obj} is blurry",
        ],
    },
    Bank {
        task: "derain",
        nouns: &["rain", "rain streaks", "raindrops", "drizzle", "streaks of rain"],
        adjectives: &["rainy", "covered in rain streaks", "full of raindrops"],
        special: &[
            "derain this {obj}",
            "it was drizzling when I took this {obj}",
            "get the downpour out of it",
        ],
    },
    Bank {
        task: "dehaze",
        nouns: &["haze", "fog", "mist", "smog", "morning fog"],
        adjectives: &["hazy", "foggy", "misty", "smoggy"],
        special: &[
            "dehaze this {obj}",
            "I can barely see through the fog",
            "make the {obj} less hazy",
        ],
    },
    Bank {
        task: "desnow",
        nouns: &["snow", "snowflakes", "falling snow", "snow flakes", "blizzard"],
        adjectives: &["snowy", "full of snowflakes", "covered in falling snow"],
        special: &[
            "desnow this {obj}",
            "it was snowing heavily",
            "the sleet ruins the {obj}",
        ],
    },
];

fn pick<'a>(rng: &mut ChaCha8Rng, xs: &'a [&'a str]) -> &'a str {
    xs.choose(rng).expect("bank is nonempty")
}

fn core_sentence(rng: &mut ChaCha8Rng, bank: &Bank) -> String {
    let obj = pick(rng, OBJECTS);
    let noun = pick(rng, bank.nouns);
    let adj = pick(rng, bank.adjectives);
    let verb = pick(rng, VERBS);
    match rng.random_range(0..8) {
        0 => format!("{verb} the {noun}"),
        1 => format!("please {verb} the {noun} from this {obj}"),
        2 => format!("this {obj} is {adj}"),
        3 => format!("my {obj} looks {adj}, can you fix it"),
        4 => format!("can you {verb} all the {noun}"),
        5 => format!("there is too much {noun} in this {obj}"),
        6 => format!("the {obj} is so {adj}, clean it up"),
        _ => pick(rng, bank.special).replace("{obj}", obj),
    }
}

fn decorate(rng: &mut ChaCha8Rng, core: String) -> String {
    let mut text = match rng.random_range(0..10) {
        0..=3 => format!("{}. {core}", pick(rng, DISTRACTORS)),
        4..=6 => format!("{core}, {}", pick(rng, DISTRACTORS)),
        _ => core,
    };
    if rng.random_bool(0.5) {
        let mut c = text.chars();
        if let Some(first) = c.next() {
            text = first.to_uppercase().chain(c).collect();
        }
    }
    text.push_str(pick(rng, &["", ".", "!", "?", "..."]));
    text
}

/// Templated instructions with known labels: `n_per_task` per standard task,
/// shuffled, fully determined by `seed`.
pub fn generate_eval_set(seed: u64, n_per_task: usize) -> Result<Vec<LabeledInstruction>> {
    if n_per_task == 0 {
        return Err(Error::Parameter("n_per_task must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_per_task * BANKS.len());
    for bank in BANKS {
        for _ in 0..n_per_task {
            let core = core_sentence(&mut rng, bank);
            out.push(LabeledInstruction {
                text: decorate(&mut rng, core),
                task: TaskId::from(bank.task),
            });
        }
    }
    out.shuffle(&mut rng);
    Ok(out)
}

/// Fraction of `items` routed to their label.
pub fn accuracy(lexicon: &InstructionLexicon, items: &[LabeledInstruction]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Input("no instructions to score".into()));
    }
    let mut hits = 0usize;
    for it in items {
        if lexicon.route(&it.text)?.task() == Some(&it.task) {
            hits += 1;
        }
    }
    Ok(hits as f64 / items.len() as f64)
}
