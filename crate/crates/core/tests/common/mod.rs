//! Fixtures and oracles shared by the integration tests.
#![allow(dead_code)]

use ndarray::Array1;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use seqhtc::cdv::CdvStore;
use seqhtc::neural::{model_rng, ModelConfig, ModelParams};
use seqhtc::taxonomy::{Direction, LevelSpec, Taxonomy};

pub fn shaped(sizes: &[usize]) -> Taxonomy {
    let levels = sizes
        .iter()
        .enumerate()
        .map(|(j, &n)| LevelSpec {
            name: format!("level{j}"),
            classes: (0..n).map(|k| format!("c{j}_{k}")).collect(),
        })
        .collect();
    Taxonomy::new(levels, None).unwrap()
}

pub fn random_vectors(rng: &mut impl Rng, n: usize, dim: usize, scale: f64) -> Vec<Array1<f64>> {
    (0..n)
        .map(|_| Array1::from_shape_fn(dim, |_| rng.random_range(-scale..scale)))
        .collect()
}

pub fn random_cdv(rng: &mut impl Rng, taxonomy: &Taxonomy, dim: usize) -> CdvStore {
    let n = taxonomy.num_classes();
    CdvStore::from_vectors(random_vectors(rng, n, dim, 1.0), vec![true; n]).unwrap()
}

/// A tiny random model/document/target instance for gradient checking.
pub struct GradInstance {
    pub params: ModelParams,
    pub taxonomy: Taxonomy,
    pub words: Vec<Array1<f64>>,
    pub targets: Vec<usize>,
    pub masks: Vec<Vec<bool>>,
    pub cdv: CdvStore,
}

pub fn grad_instance(seed: u64) -> GradInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hidden = rng.random_range(3..=8);
    let dim = rng.random_range(2..=6);
    let n_tokens = rng.random_range(1..=5);
    let levels = rng.random_range(2..=3);
    let sizes: Vec<usize> = (0..levels).map(|_| rng.random_range(1..=4)).collect();
    let taxonomy = shaped(&sizes);
    let direction = if rng.random_bool(0.5) {
        Direction::Forward
    } else {
        Direction::Reversed
    };
    let pnc = rng.random_bool(0.5);
    let config = ModelConfig::new(dim, hidden, taxonomy.num_classes()).with_pnc(pnc);
    let params = ModelParams::init(config, &mut model_rng(seed ^ 0x5eed));
    let words = random_vectors(&mut rng, n_tokens, dim, 1.0);
    let masks: Vec<Vec<bool>> = (0..levels)
        .map(|j| taxonomy.level_mask(j, direction).unwrap())
        .collect();
    let targets = (0..levels)
        .map(|j| {
            let level = direction.level_at(j, levels);
            let range = taxonomy.level_range(level);
            rng.random_range(range)
        })
        .collect();
    let cdv = random_cdv(&mut rng, &taxonomy, dim);
    GradInstance {
        params,
        taxonomy,
        words,
        targets,
        masks,
        cdv,
    }
}

/// Maximum relative error between the analytic gradient and central finite
/// differences over every parameter entry, plus the number of entries.
///
/// Relative error is `|a - n| / max(|a|, |n|, floor)`.
pub fn max_gradient_error(inst: &GradInstance, step: f64, floor: f64, dropout_seed: Option<u64>) -> (f64, usize) {
    let loss_of = |p: &ModelParams| {
        let mut rng = dropout_seed.map(model_rng);
        p.forward_loss(&inst.words, &inst.targets, &inst.masks, Some(&inst.cdv), rng.as_mut())
            .unwrap()
    };
    let (_, cache) = loss_of(&inst.params);
    let mut grads = inst.params.zeros_like();
    inst.params.backward(&cache, &mut grads);
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.data.to_vec()).collect();

    let mut probe = inst.params.clone();
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for (ti, tensor) in analytic.iter().enumerate() {
        for (k, &a) in tensor.iter().enumerate() {
            let orig = probe.slices_mut()[ti][k];
            probe.slices_mut()[ti][k] = orig + step;
            let plus = loss_of(&probe).0;
            probe.slices_mut()[ti][k] = orig - step;
            let minus = loss_of(&probe).0;
            probe.slices_mut()[ti][k] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(rel);
            count += 1;
        }
    }
    (worst, count)
}

/// A separable two-level corpus: each document carries one token naming
/// its parent class and one naming its child class, among noise words.
pub struct Synthetic {
    pub taxonomy: Taxonomy,
    pub table: seqhtc::embeddings::EmbeddingTable,
    pub documents: Vec<seqhtc::corpus::Document>,
    pub cdv: CdvStore,
}

pub fn synthetic(
    parents: usize,
    children: usize,
    docs: usize,
    dim: usize,
    noise_words: std::ops::RangeInclusive<usize>,
    seed: u64,
) -> Synthetic {
    use seqhtc::corpus::{DefinitionStore, Document};
    use seqhtc::embeddings::{EmbeddingTable, MeanDenominator};
    use seqhtc::taxonomy::{ClassId, LabelPath};

    let per_parent = children.div_ceil(parents);
    let levels = vec![
        LevelSpec {
            name: "top".into(),
            classes: (0..parents).map(|a| format!("topic{a}")).collect(),
        },
        LevelSpec {
            name: "leaf".into(),
            classes: (0..children).map(|b| format!("sub{b}")).collect(),
        },
    ];
    let edges = (0..children)
        .map(|b| (ClassId::new(0, b / per_parent), ClassId::new(1, b)))
        .collect();
    let taxonomy = Taxonomy::new(levels, Some(edges)).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<String> = (0..30).map(|k| format!("w{k}")).collect();
    let labels: Vec<String> = (0..parents)
        .map(|a| format!("topic{a}"))
        .chain((0..children).map(|b| format!("sub{b}")))
        .collect();
    let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..dim).map(|_| rng.random_range(-4.0..4.0)).collect() };
    // Label-token vectors are redrawn until no two point in nearly the
    // same direction.
    let mut label_vectors: Vec<Vec<f64>> = Vec::new();
    while label_vectors.len() < labels.len() {
        let v = draw(&mut rng);
        if label_vectors
            .iter()
            .all(|u| seqhtc::cdv::cosine_similarity(u, &v) <= 0.5)
        {
            label_vectors.push(v);
        }
    }
    let mut rows: Vec<(String, Vec<f64>)> = noise.iter().map(|w| (w.clone(), draw(&mut rng))).collect();
    rows.extend(labels.into_iter().zip(label_vectors));
    rows.push(("area".into(), draw(&mut rng)));
    let table = EmbeddingTable::from_rows(dim, rows).unwrap();

    let documents = (0..docs)
        .map(|i| {
            let b = rng.random_range(0..children);
            let a = b / per_parent;
            let mut tokens: Vec<String> = (0..rng.random_range(noise_words.clone()))
                .map(|_| noise[rng.random_range(0..noise.len())].clone())
                .collect();
            tokens.insert(rng.random_range(0..=tokens.len()), format!("topic{a}"));
            tokens.insert(rng.random_range(0..=tokens.len()), format!("sub{b}"));
            Document {
                id: format!("doc{i}"),
                tokens,
                labels: LabelPath::new(&taxonomy, vec![ClassId::new(0, a), ClassId::new(1, b)]).unwrap(),
            }
        })
        .collect();

    let defs = DefinitionStore::from_entries(
        &taxonomy,
        (0..parents)
            .map(|a| (ClassId::new(0, a), format!("topic{a} area")))
            .chain((0..children).map(|b| (ClassId::new(1, b), format!("sub{b} topic{}", b / per_parent)))),
    );
    let cdv = seqhtc::cdv::build_cdv_store(&taxonomy, &defs, &table, MeanDenominator::All);
    Synthetic {
        taxonomy,
        table,
        documents,
        cdv,
    }
}
