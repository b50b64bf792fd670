//! Question templates. Each quad is two reversal pairs: pair A inverts
//! colour and location, pair B inverts shape and location (falling back to
//! shape and count).

use super::record::{PairGroup, Question};
use super::scene::{Color, Scene, ShapeKind};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

pub const NUMBER_WORDS: [&str; 10] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
];

/// Every word the templates, options and captions can produce.
pub fn grammar_words() -> Vec<&'static str> {
    let mut words = vec![
        "what", "color", "is", "the", "shape", "at", "where", "with", "which", "in", "cell",
        "how", "many", "are", "image", "appears", "times", "a", "and", "top", "middle", "bottom",
        "left", "center", "right",
    ];
    words.extend(Color::ALL.iter().map(|c| c.name()));
    words.extend(ShapeKind::ALL.iter().map(|s| s.name()));
    words.extend(ShapeKind::ALL.iter().map(|s| s.plural()));
    words.extend(NUMBER_WORDS);
    words
}

pub mod category {
    pub const COLOR_AT: &str = "color_at";
    pub const LOCATE_COLOR: &str = "locate_color";
    pub const SHAPE_AT: &str = "shape_at";
    pub const LOCATE_SHAPE: &str = "locate_shape";
    pub const COUNT_SHAPE: &str = "count_shape";
    pub const SHAPE_WITH_COUNT: &str = "shape_with_count";
}

fn question_text_color_at(pos: &str) -> String {
    format!("what color is the shape at the {pos}?")
}

fn question_text_locate_color(color: &str) -> String {
    format!("where is the shape with color {color}?")
}

/// Four options: the answer plus three distractors drawn without
/// replacement from `pool`, in a seeded order. The dataset-level balancing
/// pass may move the answer afterwards.
fn options_with(answer: &str, pool: &[String], rng: &mut SplitMix64) -> (Vec<String>, usize) {
    let mut distractors: Vec<String> = pool.iter().filter(|p| *p != answer).cloned().collect();
    rng.shuffle(&mut distractors);
    distractors.truncate(3);
    let mut options = Vec::with_capacity(4);
    options.push(answer.to_string());
    options.extend(distractors);
    let perm = rng.permutation(options.len());
    let shuffled: Vec<String> = perm.iter().map(|&i| options[i].clone()).collect();
    let idx = perm.iter().position(|&i| i == 0).expect("answer present");
    (shuffled, idx)
}

fn question(
    text: String,
    answer: &str,
    pool: &[String],
    group: PairGroup,
    cat: &str,
    rng: &mut SplitMix64,
) -> Question {
    let (options, answer_index) = options_with(answer, pool, rng);
    Question {
        text,
        options,
        answer_index,
        pair_group: group,
        category: cat.to_string(),
    }
}

fn pick<T: Copy>(items: &[T], rng: &mut SplitMix64) -> Option<T> {
    if items.is_empty() {
        None
    } else {
        Some(items[rng.below(items.len() as u64) as usize])
    }
}

fn pair_color_location(scene: &Scene, rng: &mut SplitMix64) -> Option<(usize, [Question; 2])> {
    let cfg = &scene.config;
    let unique: Vec<usize> = scene
        .present()
        .filter(|(_, c)| scene.present().filter(|(_, o)| o.color == c.color).count() == 1)
        .map(|(i, _)| i)
        .collect();
    let cell = pick(&unique, rng)?;
    let pos = cfg.position_name(cell);
    let color = scene.cells[cell].color.name();
    let colors: Vec<String> = Color::ALL.iter().map(|c| c.name().to_string()).collect();
    let positions = cfg.position_names();
    let q1 = question(
        question_text_color_at(&pos),
        color,
        &colors,
        PairGroup::A,
        category::COLOR_AT,
        rng,
    );
    let q2 = question(
        question_text_locate_color(color),
        &pos,
        &positions,
        PairGroup::A,
        category::LOCATE_COLOR,
        rng,
    );
    Some((cell, [q1, q2]))
}

fn pair_shape_location(
    scene: &Scene,
    avoid: usize,
    rng: &mut SplitMix64,
) -> Option<[Question; 2]> {
    let cfg = &scene.config;
    let unique: Vec<usize> = scene
        .present()
        .filter(|(_, c)| scene.present().filter(|(_, o)| o.shape == c.shape).count() == 1)
        .map(|(i, _)| i)
        .collect();
    let others: Vec<usize> = unique.iter().copied().filter(|&i| i != avoid).collect();
    let cell = pick(if others.is_empty() { &unique } else { &others }, rng)?;
    let pos = cfg.position_name(cell);
    let shape = scene.cells[cell].shape.name();
    let shapes: Vec<String> = ShapeKind::ALL.iter().map(|s| s.name().to_string()).collect();
    let q3 = question(
        format!("which shape is in the {pos} cell?"),
        shape,
        &shapes,
        PairGroup::B,
        category::SHAPE_AT,
        rng,
    );
    let q4 = question(
        format!("in which cell is the {shape}?"),
        &pos,
        &cfg.position_names(),
        PairGroup::B,
        category::LOCATE_SHAPE,
        rng,
    );
    Some([q3, q4])
}

fn pair_shape_count(scene: &Scene, rng: &mut SplitMix64) -> Option<[Question; 2]> {
    let count = |s: ShapeKind| scene.present().filter(|(_, c)| c.shape == s).count();
    let candidates: Vec<ShapeKind> = ShapeKind::ALL
        .iter()
        .copied()
        .filter(|&s| {
            let k = count(s);
            k > 0 && ShapeKind::ALL.iter().filter(|&&o| count(o) == k).count() == 1
        })
        .collect();
    let shape = pick(&candidates, rng)?;
    let k = count(shape);
    let max = scene.config.num_cells().min(NUMBER_WORDS.len() - 1);
    let numbers: Vec<String> = NUMBER_WORDS[..=max].iter().map(|s| s.to_string()).collect();
    let shapes: Vec<String> = ShapeKind::ALL.iter().map(|s| s.name().to_string()).collect();
    let q3 = question(
        format!("how many {} are in the image?", shape.plural()),
        NUMBER_WORDS[k],
        &numbers,
        PairGroup::B,
        category::COUNT_SHAPE,
        rng,
    );
    let q4 = question(
        format!("which shape appears {} times in the image?", NUMBER_WORDS[k]),
        shape.name(),
        &shapes,
        PairGroup::B,
        category::SHAPE_WITH_COUNT,
        rng,
    );
    Some([q3, q4])
}

/// Two reversal pairs about `scene`. Options are in a seeded order.
pub fn generate_question_quad(scene: &Scene, rng: &mut SplitMix64) -> Result<[Question; 4]> {
    let (cell, [q1, q2]) = pair_color_location(scene, rng).ok_or_else(|| {
        Error::Generation(format!("scene {} has no uniquely coloured shape", scene.seed))
    })?;
    let [q3, q4] = pair_shape_location(scene, cell, rng)
        .or_else(|| pair_shape_count(scene, rng))
        .ok_or_else(|| {
            Error::Generation(format!(
                "scene {} has no unique shape referent for pair B",
                scene.seed
            ))
        })?;
    Ok([q1, q2, q3, q4])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::scene::{generate_scene, render, Cell, SceneConfig};

    fn scene_from(cells: Vec<Cell>) -> Scene {
        let cfg = SceneConfig::default();
        let image = render(&cfg, &cells).unwrap();
        Scene {
            seed: 0,
            config: cfg,
            cells,
            image,
        }
    }

    #[test]
    fn quad_schema_and_reversal() {
        let cfg = SceneConfig::default();
        let mut made = 0;
        for seed in 0..200 {
            let scene = generate_scene(seed, &cfg).unwrap();
            let mut rng = SplitMix64::new(seed);
            let Ok(quad) = generate_question_quad(&scene, &mut rng) else { continue };
            made += 1;
            let groups: Vec<PairGroup> = quad.iter().map(|q| q.pair_group).collect();
            assert_eq!(groups, vec![PairGroup::A, PairGroup::A, PairGroup::B, PairGroup::B]);
            for q in &quad {
                assert_eq!(q.options.len(), 4);
                assert!(q.answer_index < 4);
                let mut o = q.options.clone();
                o.sort();
                o.dedup();
                assert_eq!(o.len(), 4, "duplicate options in {q:?}");
            }
            // Q2's answer names the position Q1 asks about
            let pos = quad[1].answer().unwrap();
            assert!(quad[0].text.contains(pos), "{} vs {pos}", quad[0].text);
            // Q1's answer is the colour Q2 asks about
            assert!(quad[1].text.contains(quad[0].answer().unwrap()));
            assert_ne!(quad[2].category, quad[0].category);
        }
        assert!(made > 100, "only {made} scenes yielded quads");
    }

    #[test]
    fn pair_b_template_order() {
        let c = |shape, color| Cell {
            shape,
            color,
            present: true,
        };
        let scene = scene_from(vec![
            c(ShapeKind::Square, Color::Red),
            c(ShapeKind::Square, Color::Green),
            c(ShapeKind::Circle, Color::Blue),
            c(ShapeKind::Square, Color::Yellow),
        ]);
        let mut rng = SplitMix64::new(1);
        let quad = generate_question_quad(&scene, &mut rng).unwrap();
        // the circle is unique, so shape/location is used
        assert_eq!(quad[2].category, category::SHAPE_AT);
        assert_eq!(quad[2].answer(), Some("circle"));

        let scene = scene_from(vec![
            c(ShapeKind::Square, Color::Red),
            c(ShapeKind::Square, Color::Green),
            c(ShapeKind::Circle, Color::Blue),
            c(ShapeKind::Circle, Color::Yellow),
        ]);
        let err = generate_question_quad(&scene, &mut rng);
        assert!(matches!(err, Err(Error::Generation(_))));

        let scene = scene_from(vec![
            c(ShapeKind::Square, Color::Red),
            c(ShapeKind::Square, Color::Green),
            c(ShapeKind::Circle, Color::Blue),
            Cell {
                present: false,
                ..c(ShapeKind::Circle, Color::Yellow)
            },
        ]);
        let quad = generate_question_quad(&scene, &mut rng).unwrap();
        assert_eq!(quad[2].category, category::SHAPE_AT);
    }

    #[test]
    fn counting_pair_when_shapes_repeat() {
        let c = |shape, color, present| Cell {
            shape,
            color,
            present,
        };
        // three squares and nothing else unique by shape: count 3 is unique
        let scene = scene_from(vec![
            c(ShapeKind::Square, Color::Red, true),
            c(ShapeKind::Square, Color::Green, true),
            c(ShapeKind::Square, Color::Blue, true),
            c(ShapeKind::Circle, Color::Yellow, false),
        ]);
        let mut rng = SplitMix64::new(3);
        let quad = generate_question_quad(&scene, &mut rng).unwrap();
        assert_eq!(quad[2].category, category::COUNT_SHAPE);
        assert_eq!(quad[2].answer(), Some("three"));
        assert_eq!(quad[3].answer(), Some("square"));
        assert!(quad[3].text.contains("three"));
    }

    #[test]
    fn grammar_covers_generated_text() {
        let words = grammar_words();
        let cfg = SceneConfig::default();
        for seed in 0..100 {
            let scene = generate_scene(seed, &cfg).unwrap();
            let mut rng = SplitMix64::new(seed);
            let mut texts = vec![scene.caption()];
            if let Ok(quad) = generate_question_quad(&scene, &mut rng) {
                for q in quad {
                    texts.push(q.text.clone());
                    texts.extend(q.options.clone());
                }
            }
            for t in texts {
                for w in t.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
                    assert!(words.contains(&w), "{w} missing from grammar");
                }
            }
        }
    }
}
