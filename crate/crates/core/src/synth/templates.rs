//! Question templates and their symbolic answer functions.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;

use super::scene::{Color, Scene, Shape};
use super::vocab::{TokenId, Vocab};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Yesno,
    Color,
    Shape,
    Count,
    Caption,
    Mmalign,
    Asr,
}

impl Task {
    /// Tasks that ask about a scene.
    pub const VISUAL: [Task; 6] = [Task::Yesno, Task::Color, Task::Shape, Task::Count, Task::Caption, Task::Mmalign];

    pub fn name(self) -> &'static str {
        match self {
            Task::Yesno => "yesno",
            Task::Color => "color",
            Task::Shape => "shape",
            Task::Count => "count",
            Task::Caption => "caption",
            Task::Mmalign => "mmalign",
            Task::Asr => "asr",
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relation {
    /// Subject column strictly smaller than object column.
    LeftOf,
    /// Subject row strictly smaller than object row.
    Above,
}

/// `<color> <shape> is <relation> <color> <shape>`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Caption {
    pub subject: (Color, Shape),
    pub relation: Relation,
    pub object: (Color, Shape),
}

impl Caption {
    pub fn words(&self) -> Vec<&'static str> {
        let mut w = vec![self.subject.0.word(), self.subject.1.word(), "is"];
        match self.relation {
            Relation::LeftOf => w.extend(["left", "of"]),
            Relation::Above => w.push("above"),
        }
        w.extend([self.object.0.word(), self.object.1.word()]);
        w
    }

    /// True when some matching subject and object stand in the relation.
    pub fn holds(&self, scene: &Scene) -> bool {
        let find = |(color, shape): (Color, Shape)| {
            scene.objects().filter(move |(_, _, c)| c.color == color && c.shape == shape)
        };
        find(self.subject).any(|(r1, c1, _)| {
            find(self.object).any(|(r2, c2, _)| match self.relation {
                Relation::LeftOf => c1 < c2,
                Relation::Above => r1 < r2,
            })
        })
    }

    fn parse(words: &[&str]) -> Option<Self> {
        let obj = |c: &str, s: &str| Some((Color::from_word(c)?, Shape::from_word(s)?));
        match words {
            [c1, s1, "is", "left", "of", c2, s2] => {
                Some(Caption { subject: obj(c1, s1)?, relation: Relation::LeftOf, object: obj(c2, s2)? })
            }
            [c1, s1, "is", "above", c2, s2] => {
                Some(Caption { subject: obj(c1, s1)?, relation: Relation::Above, object: obj(c2, s2)? })
            }
            _ => None,
        }
    }
}

/// A concrete instantiation of one question template.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Query {
    /// is there a <color> <shape>
    Exists { color: Color, shape: Shape },
    /// what color is the <shape> at row r col c
    ColorAt { shape: Shape, row: usize, col: usize },
    /// what shape is at row r col c
    ShapeAt { row: usize, col: usize },
    /// how many <shape>
    Count { shape: Shape },
    /// describe the grid at row r col c
    Describe { row: usize, col: usize },
    /// which matches a or b a <caption> b <caption>
    Choice { first: Caption, second: Caption },
}

impl Query {
    pub fn task(&self) -> Task {
        match self {
            Query::Exists { .. } => Task::Yesno,
            Query::ColorAt { .. } => Task::Color,
            Query::ShapeAt { .. } => Task::Shape,
            Query::Count { .. } => Task::Count,
            Query::Describe { .. } => Task::Caption,
            Query::Choice { .. } => Task::Mmalign,
        }
    }

    pub fn words(&self) -> Vec<String> {
        let n = |v: &usize| v.to_string();
        let w: Vec<String> = match self {
            Query::Exists { color, shape } => {
                ["is", "there", "a", color.word(), shape.word()].map(String::from).to_vec()
            }
            Query::ColorAt { shape, row, col } => {
                let mut w: Vec<String> =
                    ["what", "color", "is", "the", shape.word(), "at", "row"].map(String::from).to_vec();
                w.extend([n(row), "col".into(), n(col)]);
                w
            }
            Query::ShapeAt { row, col } => {
                let mut w: Vec<String> = ["what", "shape", "is", "at", "row"].map(String::from).to_vec();
                w.extend([n(row), "col".into(), n(col)]);
                w
            }
            Query::Count { shape } => ["how", "many", shape.word()].map(String::from).to_vec(),
            Query::Describe { row, col } => {
                let mut w: Vec<String> = ["describe", "the", "grid", "at", "row"].map(String::from).to_vec();
                w.extend([n(row), "col".into(), n(col)]);
                w
            }
            Query::Choice { first, second } => {
                let mut w: Vec<String> = ["which", "matches", "a", "or", "b", "a"].map(String::from).to_vec();
                w.extend(first.words().into_iter().map(String::from));
                w.push("b".into());
                w.extend(second.words().into_iter().map(String::from));
                w
            }
        };
        w
    }

    pub fn tokens(&self, vocab: &Vocab) -> Result<Vec<TokenId>> {
        self.words().iter().map(|w| vocab.id(w)).collect()
    }

    /// Recovers the query from its words; inverse of [`Query::words`].
    pub fn parse(words: &[&str]) -> Option<Self> {
        let num = |s: &str| s.parse::<usize>().ok();
        match words {
            ["is", "there", "a", c, s] => Some(Query::Exists { color: Color::from_word(c)?, shape: Shape::from_word(s)? }),
            ["what", "color", "is", "the", s, "at", "row", r, "col", c] => {
                Some(Query::ColorAt { shape: Shape::from_word(s)?, row: num(r)?, col: num(c)? })
            }
            ["what", "shape", "is", "at", "row", r, "col", c] => Some(Query::ShapeAt { row: num(r)?, col: num(c)? }),
            ["how", "many", s] => Some(Query::Count { shape: Shape::from_word(s)? }),
            ["describe", "the", "grid", "at", "row", r, "col", c] => {
                Some(Query::Describe { row: num(r)?, col: num(c)? })
            }
            ["which", "matches", "a", "or", "b", "a", rest @ ..] => {
                let split = rest.iter().position(|&w| w == "b")?;
                Some(Query::Choice {
                    first: Caption::parse(&rest[..split])?,
                    second: Caption::parse(&rest[split + 1..])?,
                })
            }
            _ => None,
        }
    }

    /// Symbolic answer on `scene`, or `None` when the template has no unique
    /// referent there.
    pub fn answer(&self, scene: &Scene) -> Option<Vec<String>> {
        let g = scene.grid_size();
        let one = |w: &str| Some(vec![w.to_string()]);
        match *self {
            Query::Exists { color, shape } => one(if scene.contains(color, shape) { "yes" } else { "no" }),
            Query::ColorAt { shape, row, col } => {
                (row < g && col < g && scene.cell(row, col).shape == shape).then(|| vec![scene.cell(row, col).color.word().into()])
            }
            Query::ShapeAt { row, col } => {
                let cell = (row < g && col < g).then(|| scene.cell(row, col))?;
                (!cell.is_empty()).then(|| vec![cell.shape.word().into()])
            }
            Query::Count { shape } => Some(vec![scene.count_shape(shape).to_string()]),
            Query::Describe { row, col } => {
                let cell = (row < g && col < g).then(|| scene.cell(row, col))?;
                if cell.is_empty() {
                    one("empty")
                } else {
                    Some(vec![cell.color.word().into(), cell.shape.word().into()])
                }
            }
            Query::Choice { first, second } => match (first.holds(scene), second.holds(scene)) {
                (true, false) => one("a"),
                (false, true) => one("b"),
                _ => None,
            },
        }
    }

    /// Samples a query of `task` for `scene`; `None` when the scene cannot
    /// support one (the caller resamples the scene).
    pub fn sample<R: Rng>(task: Task, scene: &Scene, yes_rate: f64, rng: &mut R) -> Option<Self> {
        let g = scene.grid_size();
        let objects: Vec<_> = scene.objects().collect();
        match task {
            Task::Yesno => {
                if rng.random_bool(yes_rate) {
                    let &(_, _, c) = objects.choose(rng)?;
                    Some(Query::Exists { color: c.color, shape: c.shape })
                } else {
                    let absent: Vec<(Color, Shape)> = Color::ALL
                        .iter()
                        .flat_map(|&c| Shape::ALL.iter().map(move |&s| (c, s)))
                        .filter(|&(c, s)| !scene.contains(c, s))
                        .collect();
                    let &(color, shape) = absent.choose(rng)?;
                    Some(Query::Exists { color, shape })
                }
            }
            Task::Color => {
                let &(row, col, c) = objects.choose(rng)?;
                Some(Query::ColorAt { shape: c.shape, row, col })
            }
            Task::Shape => {
                let &(row, col, _) = objects.choose(rng)?;
                Some(Query::ShapeAt { row, col })
            }
            Task::Count => Some(Query::Count { shape: *Shape::ALL.choose(rng)? }),
            Task::Caption => Some(Query::Describe { row: rng.random_range(0..g), col: rng.random_range(0..g) }),
            Task::Mmalign => {
                let kind = if rng.random_bool(0.5) { Perturbation::Relation } else { Perturbation::Attribute };
                let (correct, perturbed) = caption_pair(scene, kind, rng)?;
                Some(if rng.random_bool(0.5) {
                    Query::Choice { first: correct, second: perturbed }
                } else {
                    Query::Choice { first: perturbed, second: correct }
                })
            }
            Task::Asr => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Perturbation {
    /// The two objects trade places around the relation word.
    Relation,
    /// The two objects trade colors.
    Attribute,
}

/// A true caption of `scene` and a false perturbation of it.
pub fn caption_pair<R: Rng>(scene: &Scene, kind: Perturbation, rng: &mut R) -> Option<(Caption, Caption)> {
    let objects: Vec<_> = scene.objects().collect();
    let unique = |c: Color, s: Shape| objects.iter().filter(|(_, _, o)| o.color == c && o.shape == s).count() == 1;
    let mut candidates = Vec::new();
    for &(r1, c1, a) in &objects {
        for &(r2, c2, b) in &objects {
            if !unique(a.color, a.shape) || !unique(b.color, b.shape) || (r1, c1) == (r2, c2) {
                continue;
            }
            for relation in [Relation::LeftOf, Relation::Above] {
                let holds = match relation {
                    Relation::LeftOf => c1 < c2,
                    Relation::Above => r1 < r2,
                };
                if !holds {
                    continue;
                }
                let correct = Caption { subject: (a.color, a.shape), relation, object: (b.color, b.shape) };
                let perturbed = match kind {
                    Perturbation::Relation => Caption { subject: correct.object, relation, object: correct.subject },
                    Perturbation::Attribute => {
                        if a.color == b.color {
                            continue;
                        }
                        Caption { subject: (b.color, a.shape), relation, object: (a.color, b.shape) }
                    }
                };
                if correct.holds(scene) && !perturbed.holds(scene) {
                    candidates.push((correct, perturbed));
                }
            }
        }
    }
    candidates.choose(rng).copied()
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::super::scene::Cell;
    use super::*;

    fn scene(objs: &[(usize, usize, Color, Shape)]) -> Scene {
        let mut cells = vec![vec![Cell::EMPTY; 4]; 4];
        for &(r, c, color, shape) in objs {
            cells[r][c] = Cell { shape, color };
        }
        Scene::from_cells(cells).unwrap()
    }

    #[test]
    fn red_circle_exists() {
        let s = scene(&[(1, 2, Color::Red, Shape::Circle), (3, 0, Color::Blue, Shape::Square)]);
        let q = Query::Exists { color: Color::Red, shape: Shape::Circle };
        assert_eq!(q.answer(&s).unwrap(), vec!["yes"]);
        let q = Query::Count { shape: Shape::Triangle };
        assert_eq!(q.answer(&s).unwrap(), vec!["0"]);
        assert_eq!(Query::ShapeAt { row: 0, col: 0 }.answer(&s), None);
        assert_eq!(Query::Describe { row: 0, col: 0 }.answer(&s).unwrap(), vec!["empty"]);
        assert_eq!(Query::Describe { row: 1, col: 2 }.answer(&s).unwrap(), vec!["red", "circle"]);
    }

    #[test]
    fn words_parse_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for i in 0..300 {
            let s = Scene::generate(&mut rng, 4);
            let task = Task::VISUAL[i % Task::VISUAL.len()];
            if let Some(q) = Query::sample(task, &s, 0.5, &mut rng) {
                let words = q.words();
                let refs: Vec<&str> = words.iter().map(String::as_str).collect();
                assert_eq!(Query::parse(&refs), Some(q));
                assert!(q.answer(&s).is_some(), "{q:?}");
                assert!(words.len() <= 24);
            }
        }
    }

    #[test]
    fn relation_captions() {
        let s = scene(&[(0, 0, Color::Red, Shape::Circle), (2, 3, Color::Blue, Shape::Square)]);
        let cap = Caption { subject: (Color::Red, Shape::Circle), relation: Relation::LeftOf, object: (Color::Blue, Shape::Square) };
        assert!(cap.holds(&s));
        let swapped = Caption { subject: cap.object, relation: cap.relation, object: cap.subject };
        assert!(!swapped.holds(&s));
        assert_eq!(cap.words().join(" "), "red circle is left of blue square");
    }

    #[test]
    fn caption_pair_differs_only_in_perturbed_span() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut seen = 0;
        for i in 0..400 {
            let s = Scene::generate(&mut rng, 4);
            let kind = if i % 2 == 0 { Perturbation::Relation } else { Perturbation::Attribute };
            let Some((good, bad)) = caption_pair(&s, kind, &mut rng) else { continue };
            seen += 1;
            assert!(good.holds(&s) && !bad.holds(&s));
            let (gw, bw) = (good.words(), bad.words());
            assert_eq!(gw.len(), bw.len());
            let last = gw.len() - 1;
            let allowed: Vec<usize> = match kind {
                Perturbation::Relation => vec![0, 1, last - 1, last],
                Perturbation::Attribute => vec![0, last - 1],
            };
            for (j, (a, b)) in gw.iter().zip(&bw).enumerate() {
                if a != b {
                    assert!(allowed.contains(&j), "{gw:?} vs {bw:?}");
                }
            }
        }
        assert!(seen > 100);
    }
}
