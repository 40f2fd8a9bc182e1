#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use mmdg::datamodel::Dims;
use mmdg::losses::{total_loss, LossConfig};
use mmdg::model::{
    forward, init_params, Batch, ForwardMode, LayerOrder, ModelConfig, ParamVars, Streams,
};
use mmdg::numerics::{check_gradients, GradCheckReport, NumericsError, Tape, Tensor, Var};
use mmdg::trainer::TrainConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SHIFT_TABLE_SPLITS: [&str; 5] = ["Me-SAU", "Co-JPN", "Ar-ITA", "Sh-IND", "Cl-US-MN"];

/// One modality block of the shift table: starred accuracies, plain
/// accuracies, printed drops (per split, then the mean).
pub struct ShiftRow {
    pub setting: &'static str,
    pub acc_star: [f64; 5],
    pub acc: [f64; 5],
    pub drops: [f64; 5],
    pub mean_drop: f64,
}

pub const SHIFT_TABLE: [ShiftRow; 4] = [
    ShiftRow {
        setting: "Audio",
        acc_star: [27.6, 42.9, 30.4, 29.3, 28.7],
        acc: [25.8, 23.1, 23.0, 24.9, 24.5],
        drops: [6.9, 85.7, 32.1, 21.6, 17.1],
        mean_drop: 32.7,
    },
    ShiftRow {
        setting: "Motion",
        acc_star: [27.0, 29.3, 32.0, 29.6, 26.2],
        acc: [25.9, 19.1, 21.9, 26.8, 22.8],
        drops: [4.2, 53.4, 46.1, 10.4, 14.9],
        mean_drop: 25.8,
    },
    ShiftRow {
        setting: "Appearance",
        acc_star: [34.9, 56.4, 51.2, 43.0, 39.2],
        acc: [31.6, 26.6, 29.3, 31.1, 28.7],
        drops: [10.4, 112.0, 74.7, 38.2, 38.2],
        mean_drop: 54.8,
    },
    ShiftRow {
        setting: "Multimodal",
        acc_star: [36.5, 59.0, 52.5, 44.9, 40.4],
        acc: [34.7, 30.7, 31.8, 34.2, 32.4],
        drops: [5.1, 92.1, 65.1, 31.2, 24.7],
        mean_drop: 42.8,
    },
];

/// Two values agree when they print the same to one decimal, give or take one tenth.
pub fn within_a_tenth(computed: f64, printed: f64) -> bool {
    ((computed * 10.0).round() - (printed * 10.0).round()).abs() <= 1.0
}

/// Training settings used for every synthetic ordering experiment: short,
/// undecayed runs at a learning rate suited to the small batch count.
pub fn synthetic_train_config() -> TrainConfig {
    TrainConfig {
        epochs: 10,
        lr: 1e-2,
        lr_decay_epochs: vec![],
        out_dim: 32,
        ..TrainConfig::default()
    }
}

/// Chat-completion stand-in that answers every request with `reply` and
/// counts what it receives.
pub struct MockEndpoint {
    pub url: String,
    pub hits: Arc<AtomicUsize>,
    pub bodies: Arc<Mutex<Vec<String>>>,
    pub auth: Arc<Mutex<Vec<String>>>,
}

impl MockEndpoint {
    pub fn start(reply: &str, status: u16) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!(
            "http://{}/v1/chat/completions",
            listener.local_addr().unwrap()
        );
        let hits = Arc::new(AtomicUsize::new(0));
        let bodies = Arc::new(Mutex::new(Vec::new()));
        let auth = Arc::new(Mutex::new(Vec::new()));
        let body = serde_json::json!({ "choices": [{ "message": { "role": "assistant", "content": reply } }] })
            .to_string();
        let (h, b, a) = (hits.clone(), bodies.clone(), auth.clone());
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { continue };
                let (h, b, a, body) = (h.clone(), b.clone(), a.clone(), body.clone());
                thread::spawn(move || serve(stream, status, &body, &h, &b, &a));
            }
        });
        Self {
            url,
            hits,
            bodies,
            auth,
        }
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }
}

fn serve(
    stream: TcpStream,
    status: u16,
    body: &str,
    hits: &AtomicUsize,
    bodies: &Mutex<Vec<String>>,
    auth: &Mutex<Vec<String>>,
) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut len = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap_or(0) == 0 {
            return;
        }
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        let lower = line.to_ascii_lowercase();
        if let Some(v) = lower.strip_prefix("content-length:") {
            len = v.trim().parse().unwrap_or(0);
        }
        if lower.starts_with("authorization:") {
            auth.lock()
                .unwrap()
                .push(line["authorization:".len()..].trim().to_string());
        }
    }
    let mut buf = vec![0u8; len];
    if reader.read_exact(&mut buf).is_err() {
        return;
    }
    hits.fetch_add(1, Ordering::SeqCst);
    bodies
        .lock()
        .unwrap()
        .push(String::from_utf8_lossy(&buf).into_owned());
    let reason = if status == 200 { "OK" } else { "Error" };
    let resp = format!(
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    let mut stream = stream;
    let _ = stream.write_all(resp.as_bytes());
    let _ = stream.flush();
}

/// A loopback URL with nothing listening behind it.
pub fn dead_endpoint() -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    format!("http://{addr}/v1/chat/completions")
}

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap()
}

/// Contracts any tensor to a scalar with fixed, non-uniform weights so every
/// output element carries a distinct sensitivity.
pub fn readout(tape: &mut Tape<f64>, out: Var) -> Result<Var, NumericsError> {
    let v = tape.value(out);
    if v.len() == 1 {
        return Ok(out);
    }
    if v.shape().len() != 2 {
        return Err(NumericsError::Shape(format!(
            "readout expects a matrix, got {:?}",
            v.shape()
        )));
    }
    let (n, m) = (v.rows(), v.cols());
    let ones = tape.constant(Tensor::matrix(
        1,
        n,
        (0..n).map(|i| 1.0 + 0.1 * i as f64).collect(),
    )?);
    let w = tape.constant(Tensor::matrix(
        m,
        1,
        (0..m).map(|j| (1.7 * j as f64 + 0.3).sin()).collect(),
    )?);
    let row = tape.matmul(ones, out)?;
    tape.matmul(row, w)
}

type OpBuilder<'a> = &'a dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var, NumericsError>;

/// Finite-difference checks of every differentiable tape operation at
/// inputs uniform in [-1, 1].
pub fn op_gradient_suite(seed: u64, tolerance: f64) -> Vec<(&'static str, GradCheckReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut run = |name: &'static str, inputs: Vec<Tensor<f64>>, f: OpBuilder| {
        out.push((
            name,
            check_gradients(
                |t, v| {
                    let y = f(t, v)?;
                    readout(t, y)
                },
                &inputs,
                tolerance,
            ),
        ));
    };

    let a = uniform(&mut rng, 5, 7);
    let b = uniform(&mut rng, 7, 3);
    run("matmul", vec![a, b], &|t, v| t.matmul(v[0], v[1]));

    let x = uniform(&mut rng, 4, 3);
    let bias = uniform(&mut rng, 1, 3).reshape(vec![3]).unwrap();
    run("add_bias", vec![x, bias], &|t, v| t.add_bias(v[0], v[1]));

    let (x, y) = (uniform(&mut rng, 3, 4), uniform(&mut rng, 3, 4));
    run("add", vec![x, y], &|t, v| t.add(v[0], v[1]));

    let x = uniform(&mut rng, 3, 4);
    run("scale", vec![x], &|t, v| Ok(t.scale(v[0], -1.3)));

    let x = uniform(&mut rng, 6, 5);
    run("relu", vec![x], &|t, v| Ok(t.relu(v[0])));

    let x = uniform(&mut rng, 8, 4);
    let gamma = uniform(&mut rng, 1, 4).reshape(vec![4]).unwrap();
    let beta = uniform(&mut rng, 1, 4).reshape(vec![4]).unwrap();
    let stats = mmdg::numerics::BnRunningStats::<f64>::new(4);
    {
        let stats = stats.clone();
        run(
            "batchnorm_train",
            vec![x.clone(), gamma.clone(), beta.clone()],
            &move |t, v| {
                Ok(
                    t.batchnorm(v[0], v[1], v[2], &stats, mmdg::numerics::BnMode::Train)?
                        .0,
                )
            },
        );
    }
    let mut eval_stats = stats;
    eval_stats.mean = (0..4).map(|_| rng.random_range(-0.5..0.5)).collect();
    eval_stats.var = (0..4).map(|_| rng.random_range(0.5..2.0)).collect();
    run("batchnorm_eval", vec![x, gamma, beta], &move |t, v| {
        Ok(
            t.batchnorm(v[0], v[1], v[2], &eval_stats, mmdg::numerics::BnMode::Eval)?
                .0,
        )
    });

    let (x, y) = (uniform(&mut rng, 3, 2), uniform(&mut rng, 3, 4));
    run("concat_cols", vec![x, y], &|t, v| {
        t.concat_cols(&[v[0], v[1]])
    });

    let x = uniform(&mut rng, 4, 3);
    let w: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..1.0)).collect();
    run("scale_rows", vec![x], &move |t, v| t.scale_rows(v[0], &w));

    let x = uniform(&mut rng, 3, 5);
    run("transpose", vec![x], &|t, v| t.transpose(v[0]));

    let (x, y) = (uniform(&mut rng, 4, 6), uniform(&mut rng, 5, 6));
    run("cosine", vec![x, y], &|t, v| t.cosine(v[0], v[1]));

    let (u, w) = (
        uniform(&mut rng, 1, 6).reshape(vec![6]).unwrap(),
        uniform(&mut rng, 1, 6).reshape(vec![6]).unwrap(),
    );
    run("cosine_vectors", vec![u, w], &|t, v| t.cosine(v[0], v[1]));

    let s = uniform(&mut rng, 3, 3);
    let lt = Tensor::scalar(rng.random_range(-1.0..1.0));
    run("inv_temperature", vec![s, lt], &|t, v| {
        t.inv_temperature(v[0], v[1])
    });

    let logits = uniform(&mut rng, 6, 4);
    let labels: Vec<usize> = (0..6).map(|_| rng.random_range(0..4)).collect();
    run("softmax_cross_entropy", vec![logits], &move |t, v| {
        t.softmax_cross_entropy(v[0], &labels)
    });

    out
}

/// Model dims and batch for the composed check. Small widths keep the
/// O(n²) finite-difference sweep fast.
pub const GRAD_DIMS: Dims = Dims {
    appearance: 5,
    motion: 3,
    audio: 4,
    text: 6,
};

/// Finite-difference check of the full train-mode forward pass and total
/// objective with respect to every trainable tensor, including the log
/// temperature. Weights come from the regular initializer, batch features
/// are uniform in [-1, 1], and τ = 1.
pub fn full_model_gradcheck(seed: u64, order: LayerOrder, tolerance: f64) -> GradCheckReport {
    let classes = 3;
    let batch_size = 16;
    let cfg = ModelConfig {
        dims: GRAD_DIMS,
        num_classes: classes,
        out_dim: 16,
        layer_order: order,
        streams: Streams::default(),
    };
    let params = init_params::<f64>(&cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let batch = Batch {
        appearance: Some(uniform(&mut rng, batch_size, GRAD_DIMS.appearance)),
        motion: Some(uniform(&mut rng, batch_size, GRAD_DIMS.motion)),
        audio: Some(uniform(&mut rng, batch_size, GRAD_DIMS.audio)),
        vis_narration: Some(uniform(&mut rng, batch_size, GRAD_DIMS.text)),
        aud_narration: Some(uniform(&mut rng, batch_size, GRAD_DIMS.text)),
        consistency: Some(
            (0..batch_size)
                .map(|_| rng.random_range(0.0..1.0))
                .collect(),
        ),
        labels: (0..batch_size).map(|i| i % classes).collect(),
    };
    let mut inputs: Vec<Tensor<f64>> = params
        .named_trainable()
        .into_iter()
        .map(|(_, t)| t.clone())
        .collect();
    let last = inputs.len() - 1;
    inputs[last] = Tensor::scalar(0.0);
    let mode = ForwardMode::Train {
        weight_audio: true,
        vis_narration: true,
        aud_narration: true,
    };
    let as_numerics = |e: mmdg::model::ModelError| NumericsError::Config(e.to_string());
    check_gradients(
        |tape, vars| {
            let pv = ParamVars::from_list(&params, vars).map_err(as_numerics)?;
            let out = forward(tape, &params, &pv, &batch, mode).map_err(as_numerics)?;
            let (loss, _) = total_loss(
                tape,
                &out,
                &batch.labels,
                pv.log_tau,
                &LossConfig::default(),
            )
            .map_err(as_numerics)?;
            Ok(loss)
        },
        &inputs,
        tolerance,
    )
}
