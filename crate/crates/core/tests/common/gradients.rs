//! Finite-difference checks for every tape primitive and the tiny models.

use cxr_fusion::autodiff::{finite_diff_grad, Tape, Var};
use cxr_fusion::labels::NUM_PATHOLOGIES;
use cxr_fusion::model::{build_model, BackbonePreset, MetaBranchConfig, PresetName};
use cxr_fusion::rng::{Purpose, Stream};
use cxr_fusion::{Result, Tensor};

pub const REL_TOL: f64 = 1e-4;
pub const ABS_TOL: f64 = 1e-6;
pub const EPS: f64 = 1e-6;
pub const CASES: u64 = 100;

pub fn close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= ABS_TOL.max(REL_TOL * analytic.abs().max(numeric.abs()))
}

#[derive(Debug, Default)]
pub struct Tally {
    pub cases: u64,
    pub coords: u64,
    pub failures: Vec<String>,
}

impl Tally {
    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }
}

fn rng(name: &str, seed: u64) -> Stream {
    let tag = name.bytes().fold(0u64, |h, b| h.wrapping_mul(31).wrapping_add(u64::from(b)));
    Stream::keyed(seed, Purpose::Sweep, &[tag])
}

fn normal(r: &mut Stream, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.normal()).collect()).unwrap()
}

fn dim(r: &mut Stream, lo: usize, hi: usize) -> usize {
    lo + r.below((hi - lo + 1) as u64) as usize
}

/// Checks d(build)/d(inputs[i]) for every input against central differences.
fn check_case(
    tally: &mut Tally,
    label: &str,
    inputs: &[Tensor],
    build: &dyn Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
) {
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = xs.iter().map(|t| tape.input(t.clone())).collect::<Result<Vec<_>>>()?;
        let root = build(&mut tape, &vars)?;
        Ok(tape.value(root).data()[0])
    };
    let mut tape = Tape::new();
    let vars = inputs.iter().map(|t| tape.input(t.clone())).collect::<Result<Vec<_>>>().unwrap();
    let root = build(&mut tape, &vars).unwrap();
    let grads = tape.backward(root).unwrap();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.tensor(*v);
        let numeric = finite_diff_grad(
            |probe| {
                let mut xs = inputs.to_vec();
                xs[i] = probe.clone();
                eval(&xs)
            },
            &inputs[i],
            EPS,
        )
        .unwrap();
        for (j, (a, n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
            tally.coords += 1;
            if !close(*a, *n) {
                tally.failures.push(format!("{label}: input {i} coord {j}: analytic {a} vs numeric {n}"));
            }
        }
    }
    tally.cases += 1;
}

fn project(tape: &mut Tape<'_>, y: Var, r: &mut Stream) -> Result<Var> {
    let n = tape.value(y).len();
    let w: Vec<f64> = (0..n).map(|_| r.normal()).collect();
    tape.weighted_sum(y, &w)
}

pub const PRIMITIVES: [&str; 14] = [
    "affine",
    "conv2d",
    "channel_bias",
    "global_avg_pool",
    "avg_pool2",
    "pad_channels",
    "add",
    "swish",
    "relu",
    "concat",
    "sum",
    "weighted_sum",
    "masked_bce",
    "masked_bce_with_denom",
];

/// Runs `CASES` seeded cases for one primitive.
pub fn check_primitive(name: &str) -> Tally {
    let mut tally = Tally::default();
    for seed in 0..CASES {
        let mut r = rng(name, seed);
        let proj_seed = r.next_u64();
        let proj = move || Stream::new(proj_seed);
        let label = format!("{name}#{seed}");
        match name {
            "affine" => {
                let (n_in, n_out) = (dim(&mut r, 1, 6), dim(&mut r, 1, 6));
                let inputs = [normal(&mut r, &[n_in]), normal(&mut r, &[n_out, n_in]), normal(&mut r, &[n_out])];
                check_case(&mut tally, &label, &inputs, &|t, v| {
                    let y = t.affine(v[0], v[1], v[2])?;
                    project(t, y, &mut proj())
                });
            }
            "conv2d" => {
                let (ci, co) = (dim(&mut r, 1, 3), dim(&mut r, 1, 3));
                let (h, w) = (dim(&mut r, 3, 7), dim(&mut r, 3, 7));
                let (kh, kw) = (dim(&mut r, 1, 3), dim(&mut r, 1, 3));
                let stride = dim(&mut r, 1, 2);
                let pad = dim(&mut r, 0, 2);
                let inputs = [normal(&mut r, &[ci, h, w]), normal(&mut r, &[co, ci, kh, kw])];
                check_case(&mut tally, &format!("{label} s{stride} p{pad}"), &inputs, &|t, v| {
                    let y = t.conv2d(v[0], v[1], stride, pad)?;
                    project(t, y, &mut proj())
                });
            }
            "channel_bias" => {
                let (c, h, w) = (dim(&mut r, 1, 4), dim(&mut r, 1, 5), dim(&mut r, 1, 5));
                let inputs = [normal(&mut r, &[c, h, w]), normal(&mut r, &[c])];
                check_case(&mut tally, &label, &inputs, &|t, v| {
                    let y = t.channel_bias(v[0], v[1])?;
                    project(t, y, &mut proj())
                });
            }
            "global_avg_pool" => {
                let (c, h, w) = (dim(&mut r, 1, 4), dim(&mut r, 1, 5), dim(&mut r, 1, 5));
                let inputs = [normal(&mut r, &[c, h, w])];
                check_case(&mut tally, &label, &inputs, &|t, v| {
                    let y = t.global_avg_pool(v[0])?;
                    project(t, y, &mut proj())
                });
            }
            "avg_pool2" => {
                let (c, h, w) = (dim(&mut r, 1, 3), 2 * dim(&mut r, 1, 3), 2 * dim(&mut r, 1, 3));
                let inputs = [normal(&mut r, &[c, h, w])];
                check_case(&mut tally, &label, &inputs, &|t, v| {
                    let y = t.avg_pool2(v[0])?;
                    project(t, y, &mut proj())
                });
            }
            "pad_channels" => {
                let (c, h, w) = (dim(&mut r, 1, 3), dim(&mut r, 1, 4), dim(&mut r, 1, 4));
                let extra = dim(&mut r, 0, 3);
                let inputs = [normal(&mut r, &[c, h, w])];
                check_case(&mut tally, &label, &inputs, &|t, v| {
                    let y = t.pad_channels(v[0], c + extra)?;
                    project(t, y, &mut proj())
                });
            }
            "add" => {
                let shape = [dim(&mut r, 1, 3), dim(&mut r, 1, 4), dim(&mut r, 1, 4)];
                let inputs = [normal(&mut r, &shape), normal(&mut r, &shape)];
                check_case(&mut tally, &label, &inputs, &|t, v| {
                    let y = t.add(v[0], v[1])?;
                    project(t, y, &mut proj())
                });
            }
            "swish" => {
                let n = dim(&mut r, 1, 12);
                let mut x = normal(&mut r, &[n]);
                x.data_mut().iter_mut().for_each(|v| *v *= 3.0);
                check_case(&mut tally, &label, &[x], &|t, v| {
                    let y = t.swish(v[0])?;
                    project(t, y, &mut proj())
                });
            }
            "relu" => {
                // keep clear of the kink, where the derivative is undefined
                let n = dim(&mut r, 1, 12);
                let data: Vec<f64> = (0..n)
                    .map(|_| {
                        let v = r.normal();
                        if v.abs() < 1e-3 {
                            v.signum() * 0.5
                        } else {
                            v
                        }
                    })
                    .collect();
                check_case(&mut tally, &label, &[Tensor::vector(data)], &|t, v| {
                    let y = t.relu(v[0])?;
                    project(t, y, &mut proj())
                });
            }
            "concat" => {
                let k = dim(&mut r, 1, 4);
                let lens: Vec<usize> = (0..k).map(|_| dim(&mut r, 1, 5)).collect();
                let inputs: Vec<Tensor> = lens.iter().map(|&n| normal(&mut r, &[n])).collect();
                check_case(&mut tally, &label, &inputs, &|t, v| {
                    let y = t.concat(v)?;
                    project(t, y, &mut proj())
                });
            }
            "sum" => {
                let shape = [dim(&mut r, 1, 3), dim(&mut r, 1, 4)];
                let inputs = [normal(&mut r, &shape)];
                check_case(&mut tally, &label, &inputs, &|t, v| t.sum(v[0]));
            }
            "weighted_sum" => {
                let shape = [dim(&mut r, 1, 3), dim(&mut r, 1, 4), dim(&mut r, 1, 4)];
                let inputs = [normal(&mut r, &shape)];
                check_case(&mut tally, &label, &inputs, &|t, v| project(t, v[0], &mut proj()));
            }
            "masked_bce" | "masked_bce_with_denom" => {
                let n = dim(&mut r, 1, NUM_PATHOLOGIES);
                let mut z = normal(&mut r, &[n]);
                z.data_mut().iter_mut().for_each(|v| *v *= 4.0);
                let targets: Vec<f64> = (0..n).map(|_| f64::from(r.bernoulli(0.5))).collect();
                let mask: Vec<f64> = (0..n).map(|_| f64::from(r.bernoulli(0.7))).collect();
                let denom = 1.0 + r.below(20) as f64;
                let with_denom = name == "masked_bce_with_denom";
                check_case(&mut tally, &label, &[z], &|t, v| {
                    // feed the logits through swish first so the upstream gradient is not trivially 1
                    let h = t.swish(v[0])?;
                    if with_denom {
                        t.masked_bce_with_denom(h, &targets, &mask, denom)
                    } else {
                        t.masked_bce(h, &targets, &mask)
                    }
                });
            }
            other => panic!("unknown primitive {other}"),
        }
    }
    tally
}

/// End-to-end check of the tiny version of `preset`: masked BCE of the
/// logits, differentiated with respect to every parameter. Even seeds use
/// fusion mode, odd seeds image-only.
pub fn check_tiny_model(preset: PresetName) -> Tally {
    let mut tally = Tally::default();
    let tiny = BackbonePreset::tiny(preset);
    for seed in 0..CASES {
        let mut r = rng(preset.as_str(), seed);
        let fusion = seed % 2 == 0;
        let meta_cfg = fusion.then(MetaBranchConfig::default);
        let mut model = build_model(&tiny, meta_cfg, seed).unwrap();
        for p in model.params_mut() {
            if p.rank() == 1 {
                p.data_mut().iter_mut().for_each(|v| *v = 0.1 * r.normal());
            }
        }
        let side = tiny.image_size;
        let pixels = (0..tiny.in_channels * side * side).map(|_| r.uniform()).collect();
        let image = Tensor::new(vec![tiny.in_channels, side, side], pixels).unwrap();
        let meta: Option<Vec<f64>> = fusion.then(|| (0..3).map(|_| r.uniform()).collect());
        let targets: Vec<f64> = (0..NUM_PATHOLOGIES).map(|_| f64::from(r.bernoulli(0.4))).collect();
        let mut mask: Vec<f64> = (0..NUM_PATHOLOGIES).map(|_| f64::from(r.bernoulli(0.8))).collect();
        mask[seed as usize % NUM_PATHOLOGIES] = 1.0;

        let loss_of = |m: &cxr_fusion::model::FusionModel| -> Result<f64> {
            let mut tape = Tape::new();
            let rec = m.record(&mut tape, &image, meta.as_deref())?;
            let l = tape.masked_bce(rec.logits, &targets, &mask)?;
            Ok(tape.value(l).data()[0])
        };
        let mut tape = Tape::new();
        let rec = model.record(&mut tape, &image, meta.as_deref()).unwrap();
        let l = tape.masked_bce(rec.logits, &targets, &mask).unwrap();
        let grads = tape.backward(l).unwrap();
        let analytic = model.collect_grads(&rec, &grads);
        drop(tape);

        for (pi, a) in analytic.iter().enumerate() {
            let numeric = finite_diff_grad(
                |probe| {
                    let mut m = model.clone();
                    m.params_mut()[pi] = probe.clone();
                    loss_of(&m)
                },
                &model.params()[pi],
                EPS,
            )
            .unwrap();
            for (j, (x, y)) in a.data().iter().zip(numeric.data()).enumerate() {
                tally.coords += 1;
                if !close(*x, *y) {
                    tally.failures.push(format!(
                        "{preset}#{seed} {}[{j}]: analytic {x} vs numeric {y}",
                        model.param_names()[pi]
                    ));
                }
            }
        }
        tally.cases += 1;
    }
    tally
}
