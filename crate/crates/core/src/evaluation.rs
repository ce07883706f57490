//! AUC, the repeated-training protocol, and interest-evolution visualization.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{truncate_history, Corpus, Instance};
use crate::embedding::sample_negative;
use crate::error::{Error, Result};
use crate::model::{Model, ModelVariant};
use crate::numerics::{dot, symmetric_eigen, Matrix, Vector};
use crate::recurrent::{attention_scores, evolve, gru_sequence, StackMode};
use crate::training::{build_pool, train, TrainConfig};

/// Area under the ROC curve by rank summation with midranks for ties.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::Numeric {
            coordinate: i,
            value: scores[i],
        });
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::DegenerateMetric(format!(
            "AUC needs both classes, got {n_pos} positives and {n_neg} negatives"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let midrank = (i + j + 2) as f64 / 2.0;
        pos_rank_sum += midrank * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let n_pos = n_pos as f64;
    Ok((pos_rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg as f64))
}

/// Click probabilities for `instances`, truncated to `max_history`.
pub fn predict_all(model: &Model, instances: &[Instance], max_history: usize, workers: usize) -> Result<Vec<f64>> {
    let pool = build_pool(workers)?;
    pool.install(|| {
        instances
            .par_iter()
            .map(|i| model.predict(&truncate_history(i, max_history)?))
            .collect()
    })
}

pub fn evaluate(model: &Model, instances: &[Instance], max_history: usize, workers: usize) -> Result<f64> {
    let scores = predict_all(model, instances, max_history, workers)?;
    let labels: Vec<u8> = instances.iter().map(|i| i.label).collect();
    auc(&scores, &labels)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub variant: ModelVariant,
    /// Mean AUC over the repeats.
    pub auc: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub seeds: Vec<u64>,
    pub aucs: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation over the repeats.
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Trains once per seed and scores each model on the test split.
pub fn repeat_eval_with_seeds(corpus: &Corpus, config: &TrainConfig, seeds: &[u64]) -> Result<EvalReport> {
    if seeds.is_empty() {
        return Err(Error::config("n_repeats must be at least 1"));
    }
    if corpus.test.is_empty() {
        return Err(Error::Usage("the corpus has no test instances".into()));
    }
    let mut aucs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let cfg = TrainConfig {
            seed,
            ..config.clone()
        };
        let out = train(corpus, &cfg)?;
        let a = evaluate(&out.checkpoint.model, &corpus.test, cfg.max_history, cfg.workers)?;
        log::info!("{} seed {seed}: test AUC {a:.5}", cfg.variant);
        aucs.push(a);
    }
    let (mean, std) = mean_std(&aucs);
    let n_pos = corpus.test.iter().filter(|i| i.label == 1).count();
    Ok(EvalReport {
        variant: config.variant,
        auc: mean,
        n_pos,
        n_neg: corpus.test.len() - n_pos,
        seeds: seeds.to_vec(),
        aucs,
        mean,
        std,
    })
}

/// Repeats with seeds `config.seed + i` for `i < n_repeats`.
pub fn repeat_eval(corpus: &Corpus, config: &TrainConfig, n_repeats: usize) -> Result<EvalReport> {
    let seeds: Vec<u64> = (0..n_repeats as u64).map(|i| config.seed + i).collect();
    repeat_eval_with_seeds(corpus, config, &seeds)
}

pub fn write_metrics(path: &Path, reports: &[EvalReport]) -> Result<()> {
    write_lines(path, "variant,seed,auc", reports.iter().flat_map(|r| {
        r.seeds.iter().zip(&r.aucs).map(move |(s, a)| format!("{},{s},{a}", r.variant))
    }))
}

pub fn write_summary(path: &Path, reports: &[EvalReport]) -> Result<()> {
    write_lines(path, "variant,mean,std", reports.iter().map(|r| format!("{},{},{}", r.variant, r.mean, r.std)))
}

fn write_lines(path: &Path, header: &str, lines: impl Iterator<Item = String>) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let write = || -> std::io::Result<()> {
        writeln!(out, "{header}")?;
        for l in lines {
            writeln!(out, "{l}")?;
        }
        out.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vector,
    /// Orthonormal components, by descending eigenvalue.
    pub basis: Vec<Vector>,
    pub eigenvalues: Vec<f64>,
    pub projected: Vec<Vector>,
}

impl Pca {
    pub fn project(&self, x: &[f64]) -> Vector {
        let centered: Vec<f64> = x.iter().zip(self.mean.iter()).map(|(a, m)| a - m).collect();
        Vector::from_vec(self.basis.iter().map(|b| dot(b, &centered)).collect())
    }
}

/// Projects mean-centered states onto the top `out_dim` eigenvectors of
/// their sample covariance (divisor `n - 1`). Each component's first
/// nonzero coordinate is made positive.
pub fn pca_project(states: &[Vector], out_dim: usize) -> Result<Pca> {
    if states.len() < 2 {
        return Err(Error::DegenerateSequence(format!("PCA needs at least 2 states, got {}", states.len())));
    }
    let d = states[0].len();
    if states.iter().any(|s| s.len() != d) {
        return Err(Error::shape("PCA states have different dimensions"));
    }
    if out_dim == 0 || out_dim > d {
        return Err(Error::shape(format!("cannot project {d}-dimensional states to {out_dim} dimensions")));
    }
    let n = states.len() as f64;
    let mut mean = vec![0.0; d];
    for s in states {
        for (m, x) in mean.iter_mut().zip(s.iter()) {
            *m += x / n;
        }
    }
    let mut cov = Matrix::zeros(d, d);
    for s in states {
        let c: Vec<f64> = s.iter().zip(&mean).map(|(x, m)| x - m).collect();
        for i in 0..d {
            let row = cov.row_mut(i);
            for j in 0..d {
                row[j] += c[i] * c[j] / (n - 1.0);
            }
        }
    }
    let (values, vectors) = symmetric_eigen(&cov)?;
    let basis: Vec<Vector> = vectors
        .into_iter()
        .take(out_dim)
        .map(|v| {
            let sign = v.iter().find(|x| x.abs() > 1e-12).map_or(1.0, |x| x.signum());
            v.scale(sign)
        })
        .collect();
    let mut pca = Pca {
        mean: Vector::from_vec(mean),
        basis,
        eigenvalues: values[..out_dim].to_vec(),
        projected: Vec::new(),
    };
    pca.projected = states.iter().map(|s| pca.project(s)).collect();
    Ok(pca)
}

/// Probe target for the visualization; `None` gates every step equally.
#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub name: String,
    pub target: Option<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeTrace {
    pub name: String,
    pub scores: Vec<f64>,
    pub states: Vec<Vector>,
    /// 2-D PCA coordinates, one per valid step.
    pub projected: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VizBundle {
    pub history_cats: Vec<usize>,
    pub probes: Vec<ProbeTrace>,
    pub pca: Pca,
}

impl VizBundle {
    pub fn probe(&self, name: &str) -> Option<&ProbeTrace> {
        self.probes.iter().find(|p| p.name == name)
    }

    pub fn write_csvs(&self, trajectories: &Path, attention: &Path) -> Result<()> {
        write_lines(
            trajectories,
            "probe,step,x,y",
            self.probes.iter().flat_map(|p| {
                p.projected
                    .iter()
                    .enumerate()
                    .map(move |(t, [x, y])| format!("{},{},{x},{y}", p.name, t + 1))
            }),
        )?;
        write_lines(
            attention,
            "probe,step,score",
            self.probes.iter().flat_map(|p| {
                p.scores
                    .iter()
                    .enumerate()
                    .map(move |(t, s)| format!("{},{},{s}", p.name, t + 1))
            }),
        )
    }
}

/// Mean Euclidean distance between two equally long 2-D trajectories.
pub fn mean_trajectory_distance(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    let n = a.len().min(b.len()).max(1) as f64;
    a.iter()
        .zip(b)
        .map(|(p, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt())
        .sum::<f64>()
        / n
}

/// Runs the evolution layer over one shared history for each probe and
/// projects all evolved states with a PCA fitted on their union.
pub fn export_viz(model: &Model, history: &Instance, probes: &[Probe]) -> Result<VizBundle> {
    let cell = match model.variant.stack_mode() {
        Some(StackMode::Evolve(cell)) => cell,
        _ => {
            return Err(Error::config(format!(
                "{} has no interest evolving layer to visualize",
                model.variant
            )))
        }
    };
    let emb = model.embed(history)?;
    let valid_len = emb.valid_len;
    if valid_len == 0 {
        return Err(Error::DegenerateSequence("visualization needs a nonempty history".into()));
    }
    let inputs: Vec<Vector> = emb
        .behavior_item_vecs
        .iter()
        .zip(&emb.behavior_cat_vecs)
        .map(|(i, c)| Vector::concat(&[i, c]))
        .collect();
    let n = model.extractor.hidden_dim();
    let h0 = vec![0.0; n];
    let trace = gru_sequence(&model.extractor, &inputs, &h0, valid_len)?;

    let mut traces = Vec::with_capacity(probes.len());
    for probe in probes {
        let scores = match probe.target {
            Some((item, cat)) => {
                let e_a = Vector::concat(&[model.item_embedding.row(item)?, model.cat_embedding.row(cat)?]);
                attention_scores(&trace, &e_a, &model.attention)?
            }
            None => {
                let mut s = vec![0.0; inputs.len()];
                s[..valid_len].fill(1.0 / valid_len as f64);
                Vector::from_vec(s)
            }
        };
        let evo = evolve(&model.evolution, &trace, &scores, cell, &h0)?;
        traces.push(ProbeTrace {
            name: probe.name.clone(),
            scores: scores[..valid_len].to_vec(),
            states: evo.evolved[..valid_len].to_vec(),
            projected: Vec::new(),
        });
    }
    let union: Vec<Vector> = traces.iter().flat_map(|t| t.states.iter().cloned()).collect();
    let pca = pca_project(&union, 2)?;
    for t in &mut traces {
        t.projected = t
            .states
            .iter()
            .map(|s| {
                let p = pca.project(s);
                [p[0], p[1]]
            })
            .collect();
    }
    Ok(VizBundle {
        history_cats: history.history_cats[..valid_len].to_vec(),
        probes: traces,
        pca,
    })
}

pub const RELATED_PROBE: &str = "P1";
pub const UNRELATED_PROBE: &str = "P2";
pub const NONE_PROBE: &str = "None";

/// A seeded history whose behaviors all come from distinct categories,
/// plus probes: `P1` shares the last behavior's category, `P2` is from a
/// category absent from the history, and `None` gates uniformly.
pub fn planted_probes(corpus: &Corpus, history_len: usize, seed: u64) -> Result<(Instance, Vec<Probe>)> {
    let n_cats = corpus.n_cats() - 1;
    if history_len < 2 {
        return Err(Error::config("planted probes need a history of at least 2 behaviors"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_cat: Vec<Vec<usize>> = vec![Vec::new(); corpus.n_cats()];
    for (item, &c) in corpus.item_category.iter().enumerate().skip(1) {
        by_cat[c].push(item);
    }
    let populated = by_cat.iter().filter(|items| !items.is_empty()).count();
    if populated < history_len + 1 {
        return Err(Error::config(format!(
            "planted probes need {} populated categories, the corpus has {populated}",
            history_len + 1
        )));
    }
    let mut cats: Vec<usize> = Vec::new();
    while cats.len() < history_len + 1 {
        let c = sample_negative(&mut rng, n_cats, n_cats)? + 1;
        if !cats.contains(&c) && !by_cat[c].is_empty() {
            cats.push(c);
        }
    }
    let unrelated = cats.pop().expect("history_len + 1 categories");
    let last = cats[history_len - 1];
    let mut pick = |c: usize| by_cat[c][rng.random_range(0..by_cat[c].len())];
    let history_items: Vec<usize> = cats.iter().map(|&c| pick(c)).collect();
    let history_cats = cats;
    let p1 = loop {
        let i = pick(last);
        if !history_items.contains(&i) || by_cat[last].len() == 1 {
            break i;
        }
    };
    let p2 = pick(unrelated);
    let history = Instance {
        history_items,
        history_cats,
        target_item: p1,
        target_cat: last,
        label: 1,
    };
    let probes = vec![
        Probe {
            name: RELATED_PROBE.into(),
            target: Some((p1, last)),
        },
        Probe {
            name: UNRELATED_PROBE.into(),
            target: Some((p2, unrelated)),
        },
        Probe {
            name: NONE_PROBE.into(),
            target: None,
        },
    ];
    Ok((history, probes))
}

/// The two visualization checks on one bundle: the related probe attends
/// most to the last step, and the unrelated probe stays closer to `None`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VizFindings {
    pub related_peaks_at_last: bool,
    pub related_distance: f64,
    pub unrelated_distance: f64,
}

impl VizFindings {
    pub fn holds(&self) -> bool {
        self.related_peaks_at_last && self.unrelated_distance < self.related_distance
    }
}

pub fn viz_findings(bundle: &VizBundle) -> Result<VizFindings> {
    let get = |name: &str| bundle.probe(name).ok_or_else(|| Error::config(format!("missing probe `{name}`")));
    let (p1, p2, none) = (get(RELATED_PROBE)?, get(UNRELATED_PROBE)?, get(NONE_PROBE)?);
    let last = p1.scores.len() - 1;
    let peak = p1.scores[last];
    Ok(VizFindings {
        related_peaks_at_last: p1.scores[..last].iter().all(|&s| s < peak),
        related_distance: mean_trajectory_distance(&p1.projected, &none.projected),
        unrelated_distance: mean_trajectory_distance(&p2.projected, &none.projected),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use crate::data::{synth_generate, SynthConfig};
    use crate::model::ModelDims;
    use proptest::prelude::*;

    fn brute_force_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut total = 0.0;
        let mut pairs = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    total += if si > sj {
                        1.0
                    } else if si == sj {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        total / pairs
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.3, 0.6], &[1, 0, 1]).unwrap(), 1.0);
        assert_eq!(auc(&[0.4; 6], &[1, 0, 1, 0, 0, 1]).unwrap(), 0.5);
        assert_eq!(auc(&[0.9, 0.6, 0.3], &[1, 0, 1]).unwrap(), 0.5);
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(Error::DegenerateMetric(_))));
        assert!(matches!(auc(&[0.1, 0.2], &[0, 0]), Err(Error::DegenerateMetric(_))));
        assert!(auc(&[0.1], &[1, 0]).is_err());
    }

    fn labels_with_both(raw: Vec<bool>) -> Vec<u8> {
        let mut l: Vec<u8> = raw.into_iter().map(u8::from).collect();
        l[0] = 1;
        l[1] = 0;
        l
    }

    proptest! {
        #[test]
        fn auc_matches_brute_force(
            raw in proptest::collection::vec((0u8..6, any::<bool>()), 2..100),
            ties in any::<bool>(),
        ) {
            let scores: Vec<f64> = raw.iter().enumerate().map(|(i, (s, _))| if ties { *s as f64 } else { *s as f64 + i as f64 * 1e-3 }).collect();
            let labels = labels_with_both(raw.iter().map(|r| r.1).collect());
            let a = auc(&scores, &labels).unwrap();
            prop_assert!((a - brute_force_auc(&scores, &labels)).abs() < 1e-12);
        }

        #[test]
        fn auc_is_invariant_under_increasing_maps(
            scores in proptest::collection::vec(-5.0f64..5.0, 2..60),
            raw in proptest::collection::vec(any::<bool>(), 60),
        ) {
            let labels = labels_with_both(raw[..scores.len()].to_vec());
            let a = auc(&scores, &labels).unwrap();
            let e: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
            let affine: Vec<f64> = scores.iter().map(|s| 3.0 * s - 7.0).collect();
            prop_assert!((auc(&e, &labels).unwrap() - a).abs() < 1e-12);
            prop_assert!((auc(&affine, &labels).unwrap() - a).abs() < 1e-12);
        }

        #[test]
        fn flipping_labels_complements_auc(
            raw in proptest::collection::vec(any::<bool>(), 2..60),
        ) {
            let labels = labels_with_both(raw);
            let scores: Vec<f64> = (0..labels.len()).map(|i| (i as f64 * 0.37).sin()).collect();
            let flipped: Vec<u8> = labels.iter().map(|l| 1 - l).collect();
            let sum = auc(&scores, &labels).unwrap() + auc(&scores, &flipped).unwrap();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }

        #[test]
        fn pca_variances_match_nalgebra_eigenvalues(seed in 0u64..1000, n in 3usize..20, d in 2usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let states: Vec<Vector> = (0..n)
                .map(|_| Vector::from_vec((0..d).map(|_| rng.random_range(-2.0..2.0)).collect()))
                .collect();
            let k = 2.min(d);
            let pca = pca_project(&states, k).unwrap();
            for (i, a) in pca.basis.iter().enumerate() {
                for (j, b) in pca.basis.iter().enumerate() {
                    let want = if i == j { 1.0 } else { 0.0 };
                    prop_assert!((dot(a, b) - want).abs() < 1e-10);
                }
            }
            let oracle = nalgebra::DMatrix::from_fn(n, d, |r, c| states[r][c]);
            let mean = oracle.row_mean();
            let centered = nalgebra::DMatrix::from_fn(n, d, |r, c| oracle[(r, c)] - mean[c]);
            let cov = centered.transpose() * &centered / (n as f64 - 1.0);
            let mut eig: Vec<f64> = cov.symmetric_eigen().eigenvalues.iter().copied().collect();
            eig.sort_by(|a, b| b.total_cmp(a));
            for c in 0..k {
                let var = pca.projected.iter().map(|p| p[c] * p[c]).sum::<f64>() / (n as f64 - 1.0);
                prop_assert!((var - eig[c]).abs() < 1e-9, "component {}: {} vs {}", c, var, eig[c]);
            }
            // reconstruction error never grows with more components
            let mut prev = f64::INFINITY;
            for k in 1..=d {
                let p = pca_project(&states, k).unwrap();
                let err: f64 = states.iter().zip(&p.projected).map(|(s, z)| {
                    let mut rec = p.mean.to_vec();
                    for (b, &w) in p.basis.iter().zip(z.iter()) {
                        for (r, x) in rec.iter_mut().zip(b.iter()) {
                            *r += w * x;
                        }
                    }
                    rec.iter().zip(s.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
                }).sum();
                prop_assert!(err <= prev + 1e-9);
                prev = err;
            }
        }
    }

    #[test]
    fn pca_examples() {
        let line: Vec<Vector> = [-2.0, -1.0, 0.5, 1.0, 3.0]
            .iter()
            .map(|&s| Vector::from_vec(vec![s, 2.0 * s, -s]))
            .collect();
        let pca = pca_project(&line, 2).unwrap();
        let dir = [1.0, 2.0, -1.0].map(|x| x / 6f64.sqrt());
        assert!((dot(&pca.basis[0], &dir).abs() - 1.0).abs() < 1e-10);
        assert!(pca.basis[0][0] > 0.0);
        assert!(pca.eigenvalues[1].abs() < 1e-10);

        let flat: Vec<Vector> = [[1.0, 0.0], [-1.0, 0.5], [0.0, -0.5], [0.3, 0.2]]
            .iter()
            .map(|p| Vector::from_vec(p.to_vec()))
            .collect();
        let pca = pca_project(&flat, 2).unwrap();
        for i in 0..flat.len() {
            for j in 0..flat.len() {
                let d0: f64 = flat[i].iter().zip(flat[j].iter()).map(|(a, b)| (a - b).powi(2)).sum();
                let d1: f64 = pca.projected[i].iter().zip(pca.projected[j].iter()).map(|(a, b)| (a - b).powi(2)).sum();
                assert!((d0 - d1).abs() < 1e-12);
            }
        }
        assert!(matches!(pca_project(&flat[..1], 1), Err(Error::DegenerateSequence(_))));
        assert!(pca_project(&flat, 3).is_err());
    }

    fn corpus() -> Corpus {
        synth_generate(&SynthConfig {
            n_users: 300,
            n_items: 120,
            n_cats: 6,
            t: 8,
            seed: 4,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    fn quick(variant: ModelVariant) -> TrainConfig {
        TrainConfig {
            variant,
            epochs: 1,
            batch_size: 50,
            embedding_dim: 4,
            hidden_dim: 8,
            mlp_hidden: vec![8],
            ..TrainConfig::default()
        }
    }

    #[test]
    fn repeat_eval_protocol() {
        let c = corpus();
        let one = repeat_eval(&c, &quick(ModelVariant::Base), 1).unwrap();
        assert_eq!(one.std, 0.0);
        assert_eq!(one.aucs.len(), 1);
        let same = repeat_eval_with_seeds(&c, &quick(ModelVariant::Base), &[5, 5, 5]).unwrap();
        assert_eq!(same.std, 0.0);
        assert!(same.aucs.iter().all(|&a| a == same.aucs[0]));
        let three = repeat_eval(&c, &quick(ModelVariant::Dien), 3).unwrap();
        assert_eq!(three.seeds, vec![1, 2, 3]);
        assert_eq!(three, repeat_eval(&c, &quick(ModelVariant::Dien), 3).unwrap());
        let (m, s) = mean_std(&three.aucs);
        assert_eq!((three.mean, three.std), (m, s));
        assert_eq!(three.n_pos + three.n_neg, c.test.len());
    }

    #[test]
    fn mean_std_is_population() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - 1.25f64.sqrt()).abs() < 1e-15);
    }

    fn toy_model(variant: ModelVariant, c: &Corpus) -> Model {
        let dims = ModelDims {
            item_vocab: c.n_items(),
            cat_vocab: c.n_cats(),
            embedding_dim: 4,
            hidden_dim: 8,
            mlp_hidden: vec![],
        };
        Model::new(variant, &dims, &mut ChaCha8Rng::seed_from_u64(2)).unwrap()
    }

    #[test]
    fn viz_bundle_shapes_and_none_independence() {
        let c = corpus();
        let model = toy_model(ModelVariant::Dien, &c);
        assert!(matches!(planted_probes(&c, 6, 3), Err(Error::Config(_))));
        let (history, probes) = planted_probes(&c, 5, 3).unwrap();
        let mut distinct = history.history_cats.clone();
        distinct.sort();
        distinct.dedup();
        assert_eq!(distinct.len(), 5);
        assert_eq!(history.history_cats[4], probes[0].target.unwrap().1);
        assert!(!history.history_cats.contains(&probes[1].target.unwrap().1));
        let bundle = export_viz(&model, &history, &probes).unwrap();
        assert_eq!(bundle.probes.len(), 3);
        for p in &bundle.probes {
            assert_eq!(p.projected.len(), 5);
            assert_eq!(p.scores.len(), 5);
            assert!((p.scores.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let none_only = export_viz(&model, &history, &probes[2..]).unwrap();
        assert_eq!(none_only.probes[0].states, bundle.probe(NONE_PROBE).unwrap().states);
        assert!(viz_findings(&bundle).unwrap().related_distance >= 0.0);

        let dir = tempfile::tempdir().unwrap();
        let (t, a) = (dir.path().join("t.csv"), dir.path().join("a.csv"));
        bundle.write_csvs(&t, &a).unwrap();
        let traj = fs::read_to_string(&t).unwrap();
        assert!(traj.starts_with("probe,step,x,y\nP1,1,"));
        assert_eq!(traj.lines().count(), 1 + 15);
        assert!(fs::read_to_string(&a).unwrap().starts_with("probe,step,score\n"));

        for variant in [ModelVariant::Base, ModelVariant::TwoLayerGruAtt] {
            assert!(matches!(export_viz(&toy_model(variant, &c), &history, &probes), Err(Error::Config(_))));
        }
    }

    #[test]
    fn csv_writers_use_fixed_headers() {
        let r = EvalReport {
            variant: ModelVariant::Dien,
            auc: 0.7,
            n_pos: 1,
            n_neg: 1,
            seeds: vec![1, 2],
            aucs: vec![0.6, 0.8],
            mean: 0.7,
            std: 0.1,
        };
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.csv");
        let s = dir.path().join("s.csv");
        write_metrics(&m, &[r.clone()]).unwrap();
        write_summary(&s, &[r]).unwrap();
        assert_eq!(fs::read_to_string(m).unwrap(), "variant,seed,auc\nDIEN,1,0.6\nDIEN,2,0.8\n");
        assert_eq!(fs::read_to_string(s).unwrap(), "variant,mean,std\nDIEN,0.7,0.1\n");
    }
}
