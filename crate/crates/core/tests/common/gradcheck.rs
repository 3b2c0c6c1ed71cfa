//! Central finite differences against the tape's analytic gradients, in f64.

use qe_core::encoder::EncoderConfig;
use qe_core::model::{mse_loss, Architecture, ModelConfig, ModelInput, QEModel};
use qe_core::vocab::Vocabulary;
use qe_core::{Graph, Tensor, Var};
use rand::{Rng, RngExt, SeedableRng};
use rand_pcg::Pcg64Mcg;

pub const H: f64 = 1e-5;
pub const ATOL: f64 = 1e-6;
pub const PRIMITIVE_RTOL: f64 = 1e-4;
pub const MODEL_RTOL: f64 = 1e-3;

pub type Build = dyn Fn(&mut Graph<'_, f64>, &[Var]) -> qe_core::Result<Var>;

fn close(analytic: f64, numeric: f64, rtol: f64) -> bool {
    (analytic - numeric).abs() <= (rtol * analytic.abs().max(numeric.abs())).max(ATOL)
}

/// Scalarizes `build`'s output with fixed random weights so that every
/// output element contributes to the checked gradient.
fn projected(build: &Build, inputs: &[Tensor<f64>], proj_seed: u64, grads: bool) -> Result<(f64, Vec<Vec<f64>>), String> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = build(&mut g, &vars).map_err(|e| e.to_string())?;
    let mut rng = Pcg64Mcg::seed_from_u64(proj_seed);
    let n = g.data(out).len();
    let w = Tensor::new(g.shape(out).to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape");
    let w = g.constant(w);
    let p = g.mul(out, w).map_err(|e| e.to_string())?;
    let loss = g.sum(p);
    let value = g.data(loss)[0];
    if !grads {
        return Ok((value, Vec::new()));
    }
    g.backward(loss).map_err(|e| e.to_string())?;
    let grads = vars.iter().zip(inputs).map(|(&v, t)| g.grad_data(v).map_or(vec![0.0; t.len()], <[f64]>::to_vec)).collect();
    Ok((value, grads))
}

/// Checks every input element; returns the largest `|analytic − numeric|`.
pub fn check(name: &str, build: &Build, inputs: &[Tensor<f64>], rtol: f64) -> Result<f64, String> {
    let (_, analytic) = projected(build, inputs, 7, true)?;
    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.len() {
            let x = t.data()[j];
            work[i].data_mut()[j] = x + H;
            let (plus, _) = projected(build, &work, 7, false)?;
            work[i].data_mut()[j] = x - H;
            let (minus, _) = projected(build, &work, 7, false)?;
            work[i].data_mut()[j] = x;
            let numeric = (plus - minus) / (2.0 * H);
            let a = analytic[i][j];
            worst = worst.max((a - numeric).abs());
            if !close(a, numeric, rtol) {
                return Err(format!("{name}: input {i} element {j}: analytic {a:.10e} vs numeric {numeric:.10e}"));
            }
        }
    }
    Ok(worst)
}

fn uniform(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-2.0..2.0))
}

/// Values at least `gap` away from each other and from zero, so that kinks
/// (relu at 0, max ties) stay outside the finite-difference stencil.
fn separated(rng: &mut impl Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = Vec::with_capacity(n);
    while vals.len() < n {
        let x: f64 = rng.random_range(-2.0..2.0);
        if x.abs() >= gap && vals.iter().all(|v| (v - x).abs() >= gap) {
            vals.push(x);
        }
    }
    Tensor::new(shape.to_vec(), vals).expect("shape")
}

fn partition(rng: &mut impl Rng, rows: usize) -> Vec<usize> {
    let mut lens = Vec::new();
    let mut left = rows;
    while left > 0 {
        let n = rng.random_range(1..=left);
        lens.push(n);
        left -= n;
    }
    lens
}

/// One random instance of every primitive; each entry is `(name, inputs, build)`.
pub fn primitive_cases(seed: u64) -> Vec<(String, Vec<Tensor<f64>>, Box<Build>)> {
    let mut rng = Pcg64Mcg::seed_from_u64(seed);
    let (m, k, n) = (rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4));
    let mut cases: Vec<(String, Vec<Tensor<f64>>, Box<Build>)> = Vec::new();
    let mut add = |name: &str, inputs: Vec<Tensor<f64>>, f: Box<Build>| cases.push((name.to_string(), inputs, f));

    add("matmul", vec![uniform(&mut rng, &[m, k]), uniform(&mut rng, &[k, n])], Box::new(|g, v| g.matmul(v[0], v[1])));
    add("matmul_nt", vec![uniform(&mut rng, &[m, k]), uniform(&mut rng, &[n, k])], Box::new(|g, v| g.matmul_nt(v[0], v[1])));
    add("add", vec![uniform(&mut rng, &[m, n]), uniform(&mut rng, &[m, n])], Box::new(|g, v| g.add(v[0], v[1])));
    add("add_row", vec![uniform(&mut rng, &[m, n]), uniform(&mut rng, &[n])], Box::new(|g, v| g.add_row(v[0], v[1])));
    add("sub", vec![uniform(&mut rng, &[m, n]), uniform(&mut rng, &[m, n])], Box::new(|g, v| g.sub(v[0], v[1])));
    add("mul", vec![uniform(&mut rng, &[m, n]), uniform(&mut rng, &[m, n])], Box::new(|g, v| g.mul(v[0], v[1])));
    add("mul_self", vec![uniform(&mut rng, &[m, n])], Box::new(|g, v| g.mul(v[0], v[0])));
    let factor = rng.random_range(-2.0..2.0);
    add("scale", vec![uniform(&mut rng, &[m, n])], Box::new(move |g, v| Ok(g.scale(v[0], factor))));
    add("gelu", vec![uniform(&mut rng, &[m, n])], Box::new(|g, v| Ok(g.gelu(v[0]))));
    add("relu", vec![separated(&mut rng, &[m, n], 1e-3)], Box::new(|g, v| Ok(g.relu(v[0]))));
    add("softmax_rows", vec![uniform(&mut rng, &[m, n])], Box::new(|g, v| g.softmax(v[0], 1)));
    add("softmax_cols", vec![uniform(&mut rng, &[m, n])], Box::new(|g, v| g.softmax(v[0], 0)));
    let width = rng.random_range(2..=5);
    add(
        "layer_norm",
        vec![uniform(&mut rng, &[m, width]), uniform(&mut rng, &[width]), uniform(&mut rng, &[width])],
        Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)),
    );
    let ids: Vec<usize> = (0..rng.random_range(1..=6)).map(|_| rng.random_range(0..m)).collect();
    add("gather_rows", vec![uniform(&mut rng, &[m, n])], Box::new(move |g, v| g.gather_rows(v[0], &ids)));
    let (start, w) = {
        let s = rng.random_range(0..n);
        (s, rng.random_range(1..=n - s))
    };
    add("slice_cols", vec![uniform(&mut rng, &[m, n])], Box::new(move |g, v| g.slice_cols(v[0], start, w)));
    add(
        "concat_rows",
        vec![uniform(&mut rng, &[m, n]), uniform(&mut rng, &[k, n])],
        Box::new(|g, v| g.concat(&[v[0], v[1]], 0)),
    );
    add(
        "concat_cols",
        vec![uniform(&mut rng, &[m, n]), uniform(&mut rng, &[m, k])],
        Box::new(|g, v| g.concat(&[v[0], v[1], v[0]], 1)),
    );
    add("mean_rows", vec![uniform(&mut rng, &[m, n])], Box::new(|g, v| g.mean_along(v[0], 0)));
    add("mean_cols", vec![uniform(&mut rng, &[m, n])], Box::new(|g, v| g.mean_along(v[0], 1)));
    add("max_rows", vec![separated(&mut rng, &[m, n], 1e-3)], Box::new(|g, v| g.max_along(v[0], 0)));
    add("max_cols", vec![separated(&mut rng, &[m, n], 1e-3)], Box::new(|g, v| g.max_along(v[0], 1)));
    add("sum", vec![uniform(&mut rng, &[m, n])], Box::new(|g, v| Ok(g.sum(v[0]))));
    add("reshape", vec![uniform(&mut rng, &[m, n])], Box::new(move |g, v| g.reshape(v[0], &[n * m])));
    let d = rng.random_range(1..=5);
    add("cosine", vec![uniform(&mut rng, &[d]), uniform(&mut rng, &[d])], Box::new(|g, v| g.cosine(v[0], v[1])));
    add(
        "cosine_rows",
        vec![uniform(&mut rng, &[m, d]), uniform(&mut rng, &[m, d])],
        Box::new(|g, v| g.cosine_rows(v[0], v[1])),
    );

    let heads = rng.random_range(1..=3);
    let dh = rng.random_range(1..=3);
    let rows = rng.random_range(1..=7);
    let lens = partition(&mut rng, rows);
    let mask: Vec<u8> = {
        let mut mask = Vec::with_capacity(rows);
        for &len in &lens {
            mask.push(1);
            mask.extend((1..len).map(|_| u8::from(rng.random_bool(0.6))));
        }
        mask
    };
    let qkv = |rng: &mut Pcg64Mcg| vec![uniform(rng, &[rows, heads * dh]), uniform(rng, &[rows, heads * dh]), uniform(rng, &[rows, heads * dh])];
    let l1 = lens.clone();
    add("attention", qkv(&mut rng), Box::new(move |g, v| g.attention(v[0], v[1], v[2], &l1, heads, None)));
    let l2 = lens.clone();
    add(
        "attention_masked",
        qkv(&mut rng),
        Box::new(move |g, v| g.attention(v[0], v[1], v[2], &l2, heads, Some(&mask))),
    );
    let l3 = lens.clone();
    add("segment_mean", vec![uniform(&mut rng, &[rows, n])], Box::new(move |g, v| g.segment_mean(v[0], &l3)));
    let l4 = lens;
    add("segment_max", vec![separated(&mut rng, &[rows, n], 1e-3)], Box::new(move |g, v| g.segment_max(v[0], &l4)));

    let labels: Vec<f64> = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
    add("mse_loss", vec![uniform(&mut rng, &[m])], Box::new(move |g, v| mse_loss(g, v[0], &labels)));
    cases
}

/// Checks one random instance of every primitive.
pub fn check_primitives(seed: u64) -> Result<f64, String> {
    let mut worst = 0.0f64;
    for (name, inputs, build) in primitive_cases(seed) {
        worst = worst.max(check(&name, &*build, &inputs, PRIMITIVE_RTOL)?);
    }
    Ok(worst)
}

pub fn micro_vocab() -> Vocabulary {
    Vocabulary::build(["a b c d e f g", "u v w x y z"], 1).expect("vocab")
}

/// The micro configuration: 2 layers, d_model 8.
pub fn micro_model(arch: Architecture, seed: u64) -> QEModel<f64> {
    let vocab = micro_vocab();
    let enc = EncoderConfig { vocab_size: vocab.len(), d_model: 8, n_heads: 2, n_layers: 2, d_ff: 16, max_seq_len: 12 };
    let mut model = QEModel::<f64>::new(ModelConfig::new(arch, enc), vocab, seed).expect("model");
    // Larger weights than the 0.02 init make every path contribute visibly.
    let mut rng = Pcg64Mcg::seed_from_u64(seed ^ 0x5eed);
    for t in model.tensors_mut() {
        for x in t.data_mut() {
            *x += rng.random_range(-0.3..0.3);
        }
    }
    model
}

pub fn micro_batch(model: &QEModel<f64>, seed: u64) -> (Vec<ModelInput>, Vec<f64>) {
    let mut rng = Pcg64Mcg::seed_from_u64(seed);
    let words = ["a", "b", "c", "d", "e", "f", "g", "u", "v", "w", "x", "y", "z"];
    let sentence = |rng: &mut Pcg64Mcg| {
        let n = rng.random_range(1..=4);
        (0..n).map(|_| words[rng.random_range(0..words.len())]).collect::<Vec<_>>().join(" ")
    };
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..3 {
        let (s, t) = (sentence(&mut rng), sentence(&mut rng));
        inputs.push(model.prepare(&s, &t).expect("prepare"));
        labels.push(rng.random_range(-0.8..0.8));
    }
    (inputs, labels)
}

fn model_loss(model: &QEModel<f64>, inputs: &[ModelInput], labels: &[f64], grads: bool) -> Result<(f64, Vec<Vec<f64>>), String> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let refs: Vec<&ModelInput> = inputs.iter().collect();
    let preds = model.forward(&mut g, &bound, &refs).map_err(|e| e.to_string())?;
    let loss = mse_loss(&mut g, preds, labels).map_err(|e| e.to_string())?;
    let value = g.data(loss)[0];
    if !grads {
        return Ok((value, Vec::new()));
    }
    g.backward(loss).map_err(|e| e.to_string())?;
    let out = bound.vars().into_iter().map(|v| g.grad_data(v).map_or(vec![0.0; g.data(v).len()], <[f64]>::to_vec)).collect();
    Ok((value, out))
}

/// Full-model check. `per_tensor = None` checks every weight; otherwise that
/// many randomly chosen entries of each tensor.
pub fn check_model(arch: Architecture, seed: u64, per_tensor: Option<usize>) -> Result<(usize, f64), String> {
    let mut model = micro_model(arch, seed);
    let (inputs, labels) = micro_batch(&model, seed.wrapping_add(1));
    let names: Vec<String> = model.config.weight_shapes().into_iter().map(|(n, _)| n).collect();
    let (_, analytic) = model_loss(&model, &inputs, &labels, true)?;
    let mut rng = Pcg64Mcg::seed_from_u64(seed.wrapping_add(2));
    let mut checked = 0;
    let mut worst = 0.0f64;
    for (ti, name) in names.iter().enumerate() {
        let len = analytic[ti].len();
        let picks: Vec<usize> = match per_tensor {
            None => (0..len).collect(),
            Some(k) => (0..k.min(len)).map(|_| rng.random_range(0..len)).collect(),
        };
        for j in picks {
            let x = model.tensors()[ti].data()[j];
            model.tensors_mut()[ti].data_mut()[j] = x + H;
            let (plus, _) = model_loss(&model, &inputs, &labels, false)?;
            model.tensors_mut()[ti].data_mut()[j] = x - H;
            let (minus, _) = model_loss(&model, &inputs, &labels, false)?;
            model.tensors_mut()[ti].data_mut()[j] = x;
            let numeric = (plus - minus) / (2.0 * H);
            let a = analytic[ti][j];
            worst = worst.max((a - numeric).abs());
            checked += 1;
            if !close(a, numeric, MODEL_RTOL) {
                return Err(format!("{arch} {name}[{j}]: analytic {a:.10e} vs numeric {numeric:.10e}"));
            }
        }
    }
    Ok((checked, worst))
}
