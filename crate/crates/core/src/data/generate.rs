use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::vocab::{build_vocab, Vocab};
use super::{Category, QaSample};
use crate::error::{Error, Result};

pub const SHAPES: [&str; 6] = ["cube", "sphere", "cylinder", "cone", "torus", "prism"];
pub const COLORS: [&str; 6] = ["red", "green", "blue", "yellow", "purple", "gray"];
pub const SIZES: [&str; 2] = ["small", "large"];

/// Stream offset separating distractor draws from scene draws.
const DISTRACTOR_STREAM: u64 = 1 << 40;

/// Scene and question generation parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorSpec {
    pub min_objects: usize,
    pub max_objects: usize,
    /// Side of the square placement grid.
    pub grid: usize,
    pub shapes: usize,
    pub colors: usize,
    pub noise: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            min_objects: 4,
            max_objects: 12,
            grid: 4,
            shapes: SHAPES.len(),
            colors: COLORS.len(),
            noise: 0.05,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::Config(format!(
                "object range {}..={} is empty or starts at zero",
                self.min_objects, self.max_objects
            )));
        }
        if self.max_objects > self.grid * self.grid {
            return Err(Error::Config(format!(
                "{} objects do not fit a {}x{} grid",
                self.max_objects, self.grid, self.grid
            )));
        }
        if !(1..=SHAPES.len()).contains(&self.shapes) || !(1..=COLORS.len()).contains(&self.colors) {
            return Err(Error::Config(format!(
                "shapes and colors must lie in 1..={}",
                SHAPES.len()
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise σ {} is invalid", self.noise)));
        }
        Ok(())
    }

    /// Object feature width: shape, color and size one-hots, then row and
    /// column one-hots.
    pub fn d_in(&self) -> usize {
        self.shapes + self.colors + SIZES.len() + 2 * self.grid
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: usize,
    pub color: usize,
    pub size: usize,
    pub cell: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: usize,
    pub objects: Vec<SceneObject>,
    pub features: Vec<Vec<f64>>,
}

impl Scene {
    fn count_shape(&self, shape: usize) -> usize {
        self.objects.iter().filter(|o| o.shape == shape).count()
    }

    fn count_color(&self, color: usize) -> usize {
        self.objects.iter().filter(|o| o.color == color).count()
    }

    fn has(&self, color: usize, shape: usize) -> bool {
        self.objects.iter().any(|o| o.color == color && o.shape == shape)
    }
}

#[derive(Clone, Debug)]
pub struct GeneratedDataset {
    pub spec: GeneratorSpec,
    pub scenes: Vec<Scene>,
    pub samples: Vec<QaSample>,
    pub question_vocab: Vocab,
    pub answer_vocab: Vocab,
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Vec<QaSample>,
    pub val: Vec<QaSample>,
    pub test: Vec<QaSample>,
    pub question_vocab: Vocab,
    pub answer_vocab: Vocab,
    pub d_in: usize,
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn other_question(shape: usize) -> Vec<String> {
    words(&format!("what color is the {} ?", SHAPES[shape]))
}

fn yesno_question(color: usize, shape: usize) -> Vec<String> {
    words(&format!("is there a {} {} ?", COLORS[color], SHAPES[shape]))
}

fn number_question(color: usize) -> Vec<String> {
    words(&format!("how many {} objects ?", COLORS[color]))
}

fn sample(scene: &Scene, question: Vec<String>, answer: String, category: Category) -> QaSample {
    QaSample {
        scene_id: scene.id,
        features: scene.features.clone(),
        question,
        answer,
        category,
        soft: None,
    }
}

fn make_scene(spec: &GeneratorSpec, id: usize, rng: &mut ChaCha8Rng) -> Scene {
    let m = rng.gen_range(spec.min_objects..=spec.max_objects);
    let cells: Vec<usize> = (0..spec.grid * spec.grid).collect();
    let cells: Vec<usize> = cells.choose_multiple(rng, m).copied().collect();
    let noise = Normal::new(0.0, spec.noise).expect("validated σ");
    let mut objects = Vec::with_capacity(m);
    let mut features = Vec::with_capacity(m);
    for cell in cells {
        let o = SceneObject {
            shape: rng.gen_range(0..spec.shapes),
            color: rng.gen_range(0..spec.colors),
            size: rng.gen_range(0..SIZES.len()),
            cell,
        };
        let mut f = vec![0.0; spec.d_in()];
        let mut at = 0;
        f[at + o.shape] = 1.0;
        at += spec.shapes;
        f[at + o.color] = 1.0;
        at += spec.colors;
        f[at + o.size] = 1.0;
        at += SIZES.len();
        f[at + cell / spec.grid] = 1.0;
        at += spec.grid;
        f[at + cell % spec.grid] = 1.0;
        for v in &mut f {
            *v += noise.sample(rng);
        }
        objects.push(o);
        features.push(f);
    }
    Scene {
        id,
        objects,
        features,
    }
}

fn other_for(scene: &Scene, spec: &GeneratorSpec, rng: &mut ChaCha8Rng) -> Option<QaSample> {
    let unique: Vec<usize> = (0..spec.shapes).filter(|&s| scene.count_shape(s) == 1).collect();
    let &shape = unique.choose(rng)?;
    let obj = scene.objects.iter().find(|o| o.shape == shape)?;
    Some(sample(
        scene,
        other_question(shape),
        COLORS[obj.color].into(),
        Category::Other,
    ))
}

fn absent_combos(scene: &Scene, spec: &GeneratorSpec) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for c in 0..spec.colors {
        for s in 0..spec.shapes {
            if !scene.has(c, s) {
                out.push((c, s));
            }
        }
    }
    out
}

fn yesno_for(scene: &Scene, spec: &GeneratorSpec, rng: &mut ChaCha8Rng) -> Option<QaSample> {
    if rng.gen_bool(0.5) {
        let o = scene.objects.choose(rng)?;
        Some(sample(
            scene,
            yesno_question(o.color, o.shape),
            "yes".into(),
            Category::YesNo,
        ))
    } else {
        absent_yesno(scene, spec, rng)
    }
}

fn absent_yesno(scene: &Scene, spec: &GeneratorSpec, rng: &mut ChaCha8Rng) -> Option<QaSample> {
    let &(c, s) = absent_combos(scene, spec).choose(rng)?;
    Some(sample(scene, yesno_question(c, s), "no".into(), Category::YesNo))
}

fn number_for(scene: &Scene, spec: &GeneratorSpec, rng: &mut ChaCha8Rng) -> QaSample {
    let c = rng.gen_range(0..spec.colors);
    let n = scene.count_color(c);
    sample(scene, number_question(c), n.to_string(), Category::Number)
}

/// A question referring to a shape/color combination absent from the
/// scene: a yes/no question with answer "no", or a count of an absent
/// color with answer "0".
fn distractor_for(scene: &Scene, spec: &GeneratorSpec, rng: &mut ChaCha8Rng) -> Option<QaSample> {
    let absent_colors: Vec<usize> = (0..spec.colors).filter(|&c| scene.count_color(c) == 0).collect();
    if !absent_colors.is_empty() && rng.gen_bool(0.5) {
        let &c = absent_colors.choose(rng)?;
        return Some(sample(scene, number_question(c), "0".into(), Category::Number));
    }
    absent_yesno(scene, spec, rng)
}

fn scene_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Generates `n_scenes` scenes and up to `qa_per_scene` questions each.
/// Every scene draws from its own ChaCha stream, so scenes are
/// independent of each other and of generation order. Templates that do
/// not apply to a scene are skipped.
pub fn generate_dataset(
    n_scenes: usize,
    qa_per_scene: usize,
    spec: &GeneratorSpec,
    seed: u64,
) -> Result<GeneratedDataset> {
    if n_scenes == 0 {
        return Err(Error::Contract("need at least one scene".into()));
    }
    spec.validate()?;
    let mut scenes = Vec::with_capacity(n_scenes);
    let mut samples = Vec::with_capacity(n_scenes * qa_per_scene);
    for id in 0..n_scenes {
        let mut rng = scene_rng(seed, id as u64);
        let scene = make_scene(spec, id, &mut rng);
        for _ in 0..qa_per_scene {
            let q = match rng.gen_range(0..3) {
                0 => other_for(&scene, spec, &mut rng),
                1 => yesno_for(&scene, spec, &mut rng),
                _ => Some(number_for(&scene, spec, &mut rng)),
            };
            samples.extend(q);
        }
        scenes.push(scene);
    }
    if samples.is_empty() {
        return Err(Error::Contract("no template applied to any scene".into()));
    }
    let (question_vocab, answer_vocab) = build_vocab(&samples);
    Ok(GeneratedDataset {
        spec: spec.clone(),
        scenes,
        samples,
        question_vocab,
        answer_vocab,
    })
}

/// Shuffles samples with `seed` and cuts them 80/10/10. With
/// `distractor`, half of the validation and test questions are replaced
/// by questions about absent objects; training data is untouched.
pub fn generate_splits(
    n_scenes: usize,
    qa_per_scene: usize,
    spec: &GeneratorSpec,
    seed: u64,
    distractor: bool,
) -> Result<Splits> {
    let ds = generate_dataset(n_scenes, qa_per_scene, spec, seed)?;
    let mut samples = ds.samples;
    samples.shuffle(&mut scene_rng(seed, u64::MAX));
    let n = samples.len();
    let n_train = (n as f64 * 0.8).round() as usize;
    let n_val = (n as f64 * 0.1).round() as usize;
    let mut test = samples.split_off(n_train + n_val);
    let mut val = samples.split_off(n_train);
    let train = samples;
    if distractor {
        for (offset, split) in [(0u64, &mut val), (1, &mut test)] {
            let mut rng = scene_rng(seed, DISTRACTOR_STREAM + offset);
            for s in split.iter_mut() {
                if rng.gen_bool(0.5) {
                    if let Some(d) = distractor_for(&ds.scenes[s.scene_id], spec, &mut rng) {
                        *s = d;
                    }
                }
            }
        }
    }
    let all: Vec<QaSample> = train.iter().chain(&val).chain(&test).cloned().collect();
    let (question_vocab, answer_vocab) = build_vocab(&all);
    Ok(Splits {
        train,
        val,
        test,
        question_vocab,
        answer_vocab,
        d_in: spec.d_in(),
    })
}

/// Re-derives the answer to `question` by reading the scene; `None` when
/// the question matches no template or is ambiguous for the scene.
pub fn recompute_answer(scene: &Scene, question: &[String]) -> Option<(String, Category)> {
    let q: Vec<&str> = question.iter().map(String::as_str).collect();
    let shape = |w: &str| SHAPES.iter().position(|&s| s == w);
    let color = |w: &str| COLORS.iter().position(|&c| c == w);
    match q[..] {
        ["what", "color", "is", "the", s, "?"] => {
            let s = shape(s)?;
            let mut hits = scene.objects.iter().filter(|o| o.shape == s);
            let first = hits.next()?;
            if hits.next().is_some() {
                return None;
            }
            Some((COLORS[first.color].into(), Category::Other))
        }
        ["is", "there", "a", c, s, "?"] => {
            let yes = scene.has(color(c)?, shape(s)?);
            Some((if yes { "yes" } else { "no" }.into(), Category::YesNo))
        }
        ["how", "many", c, "objects", "?"] => {
            Some((scene.count_color(color(c)?).to_string(), Category::Number))
        }
        _ => None,
    }
}
