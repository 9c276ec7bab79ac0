//! Client-side prototype learning: per-class prototype computation, the
//! cosine-regularized local loss, the iterative training loop and the
//! generation of normalized prototypes for submission.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::fmath;
use crate::nn::{
    self, backward, sgd_step, DenseTensor, LossTrace, ModelParams, ParamVars, Tape,
};
use crate::{Error, Result};

/// Norms below this are treated as directionless.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Per-class feature vector exchanged between parties.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototype {
    pub class_id: usize,
    pub vector: Vec<f64>,
    pub round: u64,
    pub owner: usize,
}

/// The global prototypes distributed after aggregation, keyed by class.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GlobalPrototypeSet {
    pub round: u64,
    /// Size of the federation's class universe (the `|I|` divisor).
    pub n_classes: usize,
    pub by_class: BTreeMap<usize, Vec<f64>>,
}

impl GlobalPrototypeSet {
    pub fn empty(round: u64, n_classes: usize) -> Self {
        GlobalPrototypeSet {
            round,
            n_classes,
            by_class: BTreeMap::new(),
        }
    }

    pub fn get(&self, class: usize) -> Option<&Vec<f64>> {
        self.by_class.get(&class)
    }

    pub fn is_empty(&self) -> bool {
        self.by_class.is_empty()
    }
}

/// A client's private dataset with a per-class index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LocalDataset {
    samples: Vec<(Vec<f64>, usize)>,
    class_index: BTreeMap<usize, Vec<usize>>,
}

impl LocalDataset {
    pub fn new(samples: Vec<(Vec<f64>, usize)>) -> Self {
        let mut class_index: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, (_, label)) in samples.iter().enumerate() {
            class_index.entry(*label).or_default().push(i);
        }
        LocalDataset {
            samples,
            class_index,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[(Vec<f64>, usize)] {
        &self.samples
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.class_index.keys().copied()
    }

    pub fn class_indices(&self, class: usize) -> Option<&Vec<usize>> {
        self.class_index.get(&class)
    }

    pub fn feature_dim(&self) -> usize {
        self.samples.first().map(|(x, _)| x.len()).unwrap_or(0)
    }

    /// Feature matrix and labels for the given sample indices.
    pub fn batch(&self, indices: &[usize]) -> (DenseTensor, Vec<usize>) {
        let rows: Vec<Vec<f64>> = indices.iter().map(|&i| self.samples[i].0.clone()).collect();
        let labels = indices.iter().map(|&i| self.samples[i].1).collect();
        (DenseTensor::from_rows(&rows).unwrap(), labels)
    }
}

/// L2-normalize, rejecting (near-)zero vectors.
pub fn normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = fmath::norm(v);
    if n < DEGENERATE_NORM {
        return Err(Error::DegenerateVector(format!("norm {n} below 1e-12")));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Mean of compressed features per class, over the classes of `data` that
/// appear in `classes`. Classes absent from the data produce no prototype.
pub fn compute_prototypes(
    params: &ModelParams,
    data: &LocalDataset,
    classes: &BTreeSet<usize>,
) -> Result<Vec<Prototype>> {
    let mut out = Vec::new();
    for class in data.classes() {
        if !classes.contains(&class) {
            continue;
        }
        let idx = data.class_indices(class).unwrap();
        let (features, _) = data.batch(idx);
        let compressed = nn::forward_extract(params, &features)?;
        let d = compressed.shape()[1];
        let mut mean = alloc::vec![0.0; d];
        for r in 0..idx.len() {
            for (m, v) in mean.iter_mut().zip(compressed.row(r)) {
                *m += v;
            }
        }
        let inv = 1.0 / idx.len() as f64;
        for m in &mut mean {
            *m *= inv;
        }
        out.push(Prototype {
            class_id: class,
            vector: mean,
            round: 0,
            owner: 0,
        });
    }
    Ok(out)
}

/// Mean over the class universe of `1 - cos(local, global)`. Classes the
/// client does not hold contribute zero while the divisor stays `|I|`, so the
/// term remains bounded by 2.
pub fn auxiliary_loss(local: &[Prototype], global: &GlobalPrototypeSet) -> Result<f64> {
    if global.n_classes == 0 {
        return Err(Error::Config("class universe size is zero".into()));
    }
    let mut sum = 0.0;
    for p in local {
        let Some(g) = global.get(p.class_id) else {
            continue;
        };
        let cos = fmath::cosine(&p.vector, g).ok_or_else(|| {
            Error::DegenerateVector(format!("class {} prototype has zero norm", p.class_id))
        })?;
        sum += 1.0 - cos;
    }
    Ok(sum / global.n_classes as f64)
}

fn cross_entropy(params: &ModelParams, features: &DenseTensor, labels: &[usize]) -> Result<f64> {
    let u = nn::forward_extract(params, features)?;
    let z = nn::forward_classify(params, &u)?;
    let k = z.shape()[1];
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Range(format!("label {y} outside {k} classes")));
        }
        let row = z.row(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + fmath::ln(row.iter().map(|&v| fmath::exp(v - m)).sum::<f64>());
        total += lse - row[y];
    }
    Ok(total / labels.len() as f64)
}

/// The full local objective on a batch: mean cross-entropy plus
/// `lambda` times the prototype-alignment term, with batch prototypes
/// recomputed from the batch itself. Pure evaluation, no trace.
pub fn total_loss(
    params: &ModelParams,
    batch: &LocalDataset,
    global: &GlobalPrototypeSet,
    lambda: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    if lambda < 0.0 {
        return Err(Error::Range("lambda must be non-negative".into()));
    }
    let indices: Vec<usize> = (0..batch.len()).collect();
    let (features, labels) = batch.batch(&indices);
    let ce = cross_entropy(params, &features, &labels)?;
    if lambda == 0.0 {
        return Ok(ce);
    }
    let classes: BTreeSet<usize> = batch.classes().collect();
    let protos = compute_prototypes(params, batch, &classes)?;
    Ok(ce + lambda * auxiliary_loss(&protos, global)?)
}

/// Record the forward graph of [`total_loss`] so gradients can flow through
/// the classifier loss, the batch prototype means and the cosine chain.
pub fn loss_trace(
    params: &ModelParams,
    batch: &LocalDataset,
    global: &GlobalPrototypeSet,
    lambda: f64,
) -> Result<LossTrace> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    params.validate()?;
    if batch.feature_dim() != params.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "sample dim {} != model input {}",
            batch.feature_dim(),
            params.input_dim()
        )));
    }
    let indices: Vec<usize> = (0..batch.len()).collect();
    let (features, labels) = batch.batch(&indices);

    let mut tape = Tape::new();
    let pvars = ParamVars::register(&mut tape, params);
    let x = tape.leaf(&features);

    let mut cur = x;
    for (layer, &(w, b)) in params.extractor.iter().zip(&pvars.extractor) {
        let lin = tape.matmul_t(cur, w);
        cur = tape.add_row(lin, b);
        if layer.activation == nn::Activation::Relu {
            cur = tape.relu(cur);
        }
    }
    let compressed = cur;
    let (cw, cb) = pvars.classifier;
    let lin = tape.matmul_t(compressed, cw);
    let logits = tape.add_row(lin, cb);
    let ce = tape.softmax_ce(logits, labels.clone());

    let loss = if lambda > 0.0 && !global.is_empty() {
        let mut aux = tape.scalar(0.0);
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (row, &label) in labels.iter().enumerate() {
            by_class.entry(label).or_default().push(row);
        }
        for (class, rows) in by_class {
            let Some(gvec) = global.get(class) else {
                continue;
            };
            let gnorm = fmath::norm(gvec);
            if gnorm < DEGENERATE_NORM {
                return Err(Error::DegenerateVector(format!(
                    "global prototype for class {class} has zero norm"
                )));
            }
            let c = tape.mean_rows(compressed, rows);
            if fmath::norm(tape.value(c)) < DEGENERATE_NORM {
                return Err(Error::DegenerateVector(format!(
                    "batch prototype for class {class} has zero norm"
                )));
            }
            let g = tape.leaf_vec(gvec.clone());
            let d = tape.dot(c, g);
            let n = tape.norm(c);
            let denom = tape.s_affine(n, gnorm, 0.0);
            let cos = tape.s_div(d, denom);
            let term = tape.s_affine(cos, -1.0, 1.0);
            aux = tape.s_add(aux, term);
        }
        let scaled = tape.s_affine(aux, lambda / global.n_classes as f64, 0.0);
        tape.s_add(ce, scaled)
    } else {
        ce
    };

    Ok(nn::trace_from_parts(tape, loss, pvars, params))
}

/// Options for the local training loop.
#[derive(Debug, Clone, Copy)]
pub struct TrainOpts {
    pub eta: f64,
    pub lambda: f64,
    pub local_iters: usize,
    pub batch_size: usize,
}

/// Run `local_iters` iterations of batch sampling, gradient computation and
/// SGD. Batches are drawn uniformly without replacement, fresh per iteration.
pub fn local_train(
    params: &ModelParams,
    data: &LocalDataset,
    global: &GlobalPrototypeSet,
    opts: &TrainOpts,
    rng: &mut impl Rng,
) -> Result<ModelParams> {
    if opts.local_iters == 0 || opts.batch_size == 0 {
        return Err(Error::Config("local_iters and batch_size must be >= 1".into()));
    }
    if data.is_empty() {
        return Err(Error::Config("client has no training data".into()));
    }
    // With no global prototypes yet (first round), the alignment term is off.
    let lambda = if global.is_empty() { 0.0 } else { opts.lambda };
    let mut cur = params.clone();
    for _ in 0..opts.local_iters {
        let take = opts.batch_size.min(data.len());
        let indices = rand::seq::index::sample(rng, data.len(), take).into_vec();
        let batch = LocalDataset::new(
            indices
                .iter()
                .map(|&i| data.samples()[i].clone())
                .collect(),
        );
        let trace = loss_trace(&cur, &batch, global, lambda)?;
        let grads = backward(&trace)?;
        if opts.eta > 0.0 {
            cur = sgd_step(&cur, &grads, opts.eta)?;
        }
    }
    Ok(cur)
}

/// Recompute prototypes from the full local dataset with the final parameters
/// and L2-normalize each. Classes whose raw prototype is degenerate are
/// skipped.
pub fn submit_prototypes(
    params: &ModelParams,
    data: &LocalDataset,
    round: u64,
    owner: usize,
) -> Result<Vec<Prototype>> {
    let classes: BTreeSet<usize> = data.classes().collect();
    let raw = compute_prototypes(params, data, &classes)?;
    let mut out = Vec::with_capacity(raw.len());
    for p in raw {
        match normalize(&p.vector) {
            Ok(vector) => out.push(Prototype {
                class_id: p.class_id,
                vector,
                round,
                owner,
            }),
            Err(Error::DegenerateVector(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Fraction of samples whose argmax logit matches the label.
pub fn evaluate_accuracy(params: &ModelParams, data: &LocalDataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let indices: Vec<usize> = (0..data.len()).collect();
    let (features, labels) = data.batch(&indices);
    let u = nn::forward_extract(params, &features)?;
    let z = nn::forward_classify(params, &u)?;
    let mut hits = 0usize;
    for (r, &y) in labels.iter().enumerate() {
        let row = z.row(r);
        let pred = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        if pred == y {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::{finite_difference_grads, max_rel_error};
    use crate::nn::{Activation, DenseLayer, DenseTensor};
    use crate::rng::{stream, Domain};
    use alloc::vec;

    fn identity_layer(dim: usize) -> DenseLayer {
        let mut w = vec![0.0; dim * dim];
        for i in 0..dim {
            w[i * dim + i] = 1.0;
        }
        DenseLayer {
            weight: DenseTensor::new(vec![dim, dim], w).unwrap(),
            bias: DenseTensor::zeros(vec![dim]),
            activation: Activation::Linear,
        }
    }

    fn identity_model(dim: usize) -> ModelParams {
        ModelParams {
            extractor: vec![identity_layer(dim)],
            classifier: identity_layer(dim),
        }
    }

    fn seeded_model(seed: u64, input: usize, hidden: usize, proto: usize, classes: usize) -> ModelParams {
        let mut rng = stream(seed, Domain::ModelInit, 0, 0);
        nn::init_model(input, hidden, proto, classes, &mut rng)
    }

    fn global_from(protos: &[Prototype], n_classes: usize) -> GlobalPrototypeSet {
        GlobalPrototypeSet {
            round: 1,
            n_classes,
            by_class: protos.iter().map(|p| (p.class_id, p.vector.clone())).collect(),
        }
    }

    #[test]
    fn identity_extractor_prototype_is_arithmetic_mean() {
        let m = identity_model(2);
        let data = LocalDataset::new(vec![(vec![1.0, 0.0], 7), (vec![0.0, 1.0], 7)]);
        let classes: BTreeSet<usize> = [7].into();
        let protos = compute_prototypes(&m, &data, &classes).unwrap();
        assert_eq!(protos.len(), 1);
        assert_eq!(protos[0].vector, vec![0.5, 0.5]);
    }

    #[test]
    fn single_sample_prototype_equals_extracted_feature() {
        let m = seeded_model(6, 3, 5, 4, 2);
        let x = vec![0.4, -0.2, 1.1];
        let data = LocalDataset::new(vec![(x.clone(), 0)]);
        let classes: BTreeSet<usize> = [0].into();
        let protos = compute_prototypes(&m, &data, &classes).unwrap();
        let u = nn::forward_extract(&m, &DenseTensor::vector(x).unwrap()).unwrap();
        for (a, b) in protos[0].vector.iter().zip(u.as_slice()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn absent_classes_produce_no_prototype() {
        let m = identity_model(2);
        let data = LocalDataset::new(vec![(vec![1.0, 0.0], 0)]);
        let classes: BTreeSet<usize> = [0, 1, 2].into();
        let protos = compute_prototypes(&m, &data, &classes).unwrap();
        assert_eq!(protos.len(), 1);
        assert_eq!(protos[0].class_id, 0);
    }

    /// Independent oracle: naive per-sample forward with index loops, then a
    /// per-class loop-and-average.
    #[test]
    fn seeded_prototypes_match_naive_mean_oracle() {
        let m = seeded_model(11, 4, 6, 3, 2);
        let mut rng = stream(11, Domain::BlobGen, 1, 0);
        let samples: Vec<(Vec<f64>, usize)> = (0..8)
            .map(|i| ((0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(), i % 2))
            .collect();
        let data = LocalDataset::new(samples.clone());
        let classes: BTreeSet<usize> = [0, 1].into();
        let protos = compute_prototypes(&m, &data, &classes).unwrap();

        let naive_forward = |x: &[f64]| -> Vec<f64> {
            let mut cur = x.to_vec();
            for layer in &m.extractor {
                let mut next = vec![0.0; layer.out_dim()];
                for o in 0..layer.out_dim() {
                    let mut s = layer.bias.as_slice()[o];
                    for i in 0..layer.in_dim() {
                        s += layer.weight.as_slice()[o * layer.in_dim() + i] * cur[i];
                    }
                    next[o] = if layer.activation == Activation::Relu && s < 0.0 { 0.0 } else { s };
                }
                cur = next;
            }
            cur
        };
        for class in 0..2usize {
            let members: Vec<&Vec<f64>> = samples
                .iter()
                .filter(|(_, l)| *l == class)
                .map(|(x, _)| x)
                .collect();
            let mut want = vec![0.0; 3];
            for x in &members {
                for (w, v) in want.iter_mut().zip(naive_forward(x)) {
                    *w += v;
                }
            }
            for w in &mut want {
                *w /= members.len() as f64;
            }
            let got = &protos.iter().find(|p| p.class_id == class).unwrap().vector;
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn auxiliary_loss_is_zero_when_local_equals_global() {
        let protos = vec![
            Prototype { class_id: 0, vector: vec![0.6, 0.8], round: 1, owner: 0 },
            Prototype { class_id: 1, vector: vec![1.0, 0.0], round: 1, owner: 0 },
        ];
        let global = global_from(&protos, 10);
        assert!(auxiliary_loss(&protos, &global).unwrap().abs() < 1e-12);
    }

    #[test]
    fn auxiliary_loss_of_opposed_single_class_is_two_over_universe() {
        let local = vec![Prototype { class_id: 3, vector: vec![-0.6, -0.8], round: 1, owner: 0 }];
        let mut global = GlobalPrototypeSet::empty(1, 10);
        global.by_class.insert(3, vec![0.6, 0.8]);
        let l = auxiliary_loss(&local, &global).unwrap();
        assert!((l - 0.2).abs() < 1e-12);
    }

    #[test]
    fn auxiliary_loss_matches_per_class_cosine_oracle() {
        let mut rng = stream(5, Domain::BlobGen, 2, 0);
        let mut local = Vec::new();
        let mut global = GlobalPrototypeSet::empty(1, 3);
        for class in 0..3usize {
            let a: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            local.push(Prototype {
                class_id: class,
                vector: normalize(&a).unwrap(),
                round: 1,
                owner: 0,
            });
            global.by_class.insert(class, normalize(&b).unwrap());
        }
        let got = auxiliary_loss(&local, &global).unwrap();
        // Explicit dot/norm computation per class.
        let mut want = 0.0;
        for p in &local {
            let g = &global.by_class[&p.class_id];
            let dot: f64 = p.vector.iter().zip(g).map(|(x, y)| x * y).sum();
            let na: f64 = p.vector.iter().map(|x| x * x).sum::<f64>();
            let nb: f64 = g.iter().map(|x| x * x).sum::<f64>();
            want += 1.0 - dot / (libm::sqrt(na) * libm::sqrt(nb));
        }
        want /= 3.0;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn auxiliary_loss_rejects_zero_norm() {
        let local = vec![Prototype { class_id: 0, vector: vec![0.0, 0.0], round: 1, owner: 0 }];
        let mut global = GlobalPrototypeSet::empty(1, 2);
        global.by_class.insert(0, vec![1.0, 0.0]);
        assert!(matches!(
            auxiliary_loss(&local, &global),
            Err(Error::DegenerateVector(_))
        ));
    }

    #[test]
    fn auxiliary_loss_is_scale_invariant() {
        let mut rng = stream(15, Domain::BlobGen, 3, 0);
        let local: Vec<Prototype> = (0..3)
            .map(|class| Prototype {
                class_id: class,
                vector: (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                round: 1,
                owner: 0,
            })
            .collect();
        let mut global = GlobalPrototypeSet::empty(1, 3);
        for class in 0..3usize {
            global
                .by_class
                .insert(class, (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect());
        }
        let base = auxiliary_loss(&local, &global).unwrap();
        let scaled_local: Vec<Prototype> = local
            .iter()
            .map(|p| Prototype {
                vector: p.vector.iter().map(|v| v * 7.0).collect(),
                ..p.clone()
            })
            .collect();
        let mut scaled_global = global.clone();
        for v in scaled_global.by_class.values_mut() {
            for x in v.iter_mut() {
                *x *= 7.0;
            }
        }
        assert!((auxiliary_loss(&scaled_local, &global).unwrap() - base).abs() < 1e-9);
        assert!((auxiliary_loss(&local, &scaled_global).unwrap() - base).abs() < 1e-9);
    }

    fn seeded_batch(seed: u64, n: usize, dim: usize, classes: usize) -> LocalDataset {
        let mut rng = stream(seed, Domain::BlobGen, 4, 0);
        LocalDataset::new(
            (0..n)
                .map(|i| ((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect(), i % classes))
                .collect(),
        )
    }

    #[test]
    fn lambda_zero_total_loss_is_pure_cross_entropy() {
        let m = seeded_model(20, 4, 6, 3, 2);
        let batch = seeded_batch(20, 6, 4, 2);
        let global = GlobalPrototypeSet::empty(1, 2);
        let loss = total_loss(&m, &batch, &global, 0.0).unwrap();
        // Manual log-sum-exp cross-entropy oracle.
        let mut want = 0.0;
        for (x, y) in batch.samples() {
            let u = nn::forward_extract(&m, &DenseTensor::vector(x.clone()).unwrap()).unwrap();
            let z = nn::forward_classify(&m, &u).unwrap();
            let row = z.as_slice();
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + libm::log(row.iter().map(|&v| libm::exp(v - mx)).sum::<f64>());
            want += lse - row[*y];
        }
        want /= batch.len() as f64;
        assert!((loss - want).abs() < 1e-12);
    }

    #[test]
    fn matching_global_prototypes_cancel_auxiliary_term() {
        let m = seeded_model(21, 4, 6, 3, 2);
        let batch = seeded_batch(21, 6, 4, 2);
        let classes: BTreeSet<usize> = batch.classes().collect();
        let protos = compute_prototypes(&m, &batch, &classes).unwrap();
        let global = global_from(&protos, 2);
        let with = total_loss(&m, &batch, &global, 1.0).unwrap();
        let without = total_loss(&m, &batch, &global, 0.0).unwrap();
        assert!((with - without).abs() < 1e-12);
    }

    #[test]
    fn total_loss_is_cross_entropy_plus_scaled_auxiliary() {
        let m = seeded_model(7, 4, 6, 3, 2);
        let batch = seeded_batch(7, 4, 4, 2);
        let mut rng = stream(7, Domain::BlobGen, 5, 0);
        let mut global = GlobalPrototypeSet::empty(1, 2);
        for class in 0..2usize {
            let v: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            global.by_class.insert(class, normalize(&v).unwrap());
        }
        let lambda = 1.0;
        let total = total_loss(&m, &batch, &global, lambda).unwrap();
        let ce = total_loss(&m, &batch, &global, 0.0).unwrap();
        let classes: BTreeSet<usize> = batch.classes().collect();
        let protos = compute_prototypes(&m, &batch, &classes).unwrap();
        let aux = auxiliary_loss(&protos, &global).unwrap();
        assert!((total - (ce + lambda * aux)).abs() < 1e-12);
    }

    #[test]
    fn trace_value_agrees_with_pure_evaluation() {
        let m = seeded_model(8, 4, 6, 3, 2);
        let batch = seeded_batch(8, 5, 4, 2);
        let mut global = GlobalPrototypeSet::empty(1, 2);
        global.by_class.insert(0, vec![0.3, -0.5, 0.8]);
        global.by_class.insert(1, vec![-0.2, 0.9, 0.1]);
        let trace = loss_trace(&m, &batch, &global, 1.0).unwrap();
        let pure = total_loss(&m, &batch, &global, 1.0).unwrap();
        assert!((trace.loss_value() - pure).abs() < 1e-12);
    }

    #[test]
    fn full_objective_gradient_matches_finite_differences() {
        let m = seeded_model(7, 5, 6, 4, 3);
        let batch = seeded_batch(77, 4, 5, 3);
        let mut rng = stream(7, Domain::BlobGen, 6, 0);
        let mut global = GlobalPrototypeSet::empty(1, 3);
        for class in 0..3usize {
            let v: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            global.by_class.insert(class, normalize(&v).unwrap());
        }
        let trace = loss_trace(&m, &batch, &global, 1.0).unwrap();
        let analytic = backward(&trace).unwrap();
        let numeric = finite_difference_grads(&m, &batch, &global, 1.0, 1e-5).unwrap();
        let err = max_rel_error(&analytic, &numeric);
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn local_train_with_zero_rate_keeps_params() {
        let m = seeded_model(30, 4, 6, 3, 2);
        let data = seeded_batch(30, 12, 4, 2);
        let global = GlobalPrototypeSet::empty(1, 2);
        let opts = TrainOpts { eta: 0.0, lambda: 1.0, local_iters: 3, batch_size: 4 };
        let mut rng = stream(30, Domain::ClientTrain, 0, 1);
        let out = local_train(&m, &data, &global, &opts, &mut rng).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn single_full_batch_iteration_equals_manual_step() {
        let m = seeded_model(31, 4, 6, 3, 2);
        let data = seeded_batch(31, 5, 4, 2);
        let mut global = GlobalPrototypeSet::empty(1, 2);
        global.by_class.insert(0, vec![0.5, 0.1, -0.3]);
        global.by_class.insert(1, vec![-0.1, 0.7, 0.2]);
        let opts = TrainOpts { eta: 0.05, lambda: 1.0, local_iters: 1, batch_size: 5 };
        let mut rng = stream(31, Domain::ClientTrain, 0, 1);
        let trained = local_train(&m, &data, &global, &opts, &mut rng).unwrap();
        // Manual step on the same full batch (sampling takes all 5 rows).
        let mut rng2 = stream(31, Domain::ClientTrain, 0, 1);
        let idx = rand::seq::index::sample(&mut rng2, 5, 5).into_vec();
        let batch = LocalDataset::new(idx.iter().map(|&i| data.samples()[i].clone()).collect());
        let trace = loss_trace(&m, &batch, &global, 1.0).unwrap();
        let grads = backward(&trace).unwrap();
        let manual = nn::sgd_step(&m, &grads, 0.05).unwrap();
        assert_eq!(trained, manual);
    }

    #[test]
    fn local_train_is_deterministic_for_a_fixed_seed() {
        let m = seeded_model(32, 4, 6, 3, 2);
        let data = seeded_batch(32, 16, 4, 2);
        let mut global = GlobalPrototypeSet::empty(1, 2);
        global.by_class.insert(0, vec![0.5, 0.1, -0.3]);
        global.by_class.insert(1, vec![-0.1, 0.7, 0.2]);
        let opts = TrainOpts { eta: 0.01, lambda: 1.0, local_iters: 4, batch_size: 6 };
        let a = local_train(&m, &data, &global, &opts, &mut stream(9, Domain::ClientTrain, 2, 3)).unwrap();
        let b = local_train(&m, &data, &global, &opts, &mut stream(9, Domain::ClientTrain, 2, 3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn three_four_five_normalization() {
        assert_eq!(normalize(&[3.0, 4.0]).unwrap(), vec![0.6, 0.8]);
    }

    #[test]
    fn normalizing_unit_vector_changes_nothing() {
        let u = [0.6, 0.8];
        let n = normalize(&u).unwrap();
        for (a, b) in n.iter().zip(&u) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_rejects_degenerate_vector() {
        assert!(matches!(
            normalize(&[0.0, 1e-13]),
            Err(Error::DegenerateVector(_))
        ));
    }

    #[test]
    fn submitted_prototypes_are_unit_and_direction_preserving() {
        let m = seeded_model(13, 4, 6, 3, 2);
        let data = seeded_batch(13, 10, 4, 2);
        let submitted = submit_prototypes(&m, &data, 2, 5).unwrap();
        assert!(!submitted.is_empty());
        let classes: BTreeSet<usize> = data.classes().collect();
        let raw = compute_prototypes(&m, &data, &classes).unwrap();
        for p in &submitted {
            assert!((fmath::norm(&p.vector) - 1.0).abs() < 1e-9);
            assert_eq!(p.round, 2);
            assert_eq!(p.owner, 5);
            let r = raw.iter().find(|r| r.class_id == p.class_id).unwrap();
            let oracle = normalize(&r.vector).unwrap();
            for (a, b) in p.vector.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_batch_is_config_error() {
        let m = identity_model(2);
        let global = GlobalPrototypeSet::empty(1, 2);
        assert!(total_loss(&m, &LocalDataset::new(vec![]), &global, 0.0).is_err());
    }
}
