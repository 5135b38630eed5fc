//! Oracles shared by the integration tests: central finite differences,
//! brute-force neighbor search, and the gradient suites.

#![allow(dead_code)]

use dapconv::dap::{Cloud, DapConfig, DapConv, DapInputs, Integration, Space};
use dapconv::knn::{KnnIndex, NeighborMatrix};
use dapconv::localconv::{LocalConv, LocalConvKind, Neighborhood, Positions};
use dapconv::param::{Init, Linear, Mlp, ParamId, Params};
use dapconv::tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

/// Builds a scalar loss from input vectors. The returned tensors are the
/// tape leaves holding those inputs, in the same order.
pub type LossFn<'a> = dyn Fn(&Tape, &[Vec<f64>]) -> (Tensor, Vec<Tensor>) + 'a;

/// Second differences above this mark a kink (a neighbor selection or a
/// max switching) inside `[x - h, x + h]`. Smooth losses here have second
/// differences near `h^2 |f''|`, about 1e-10.
pub const KINK_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)`.
    pub error: f64,
    /// Whether some coordinate straddles a kink, judged from forward
    /// values alone.
    pub kinked: bool,
}

/// Central differences of step `h` against the tape gradient.
pub fn grad_check(x0: &[Vec<f64>], f: &LossFn, h: f64) -> GradCheck {
    let tape = Tape::new();
    let (loss, leaves) = f(&tape, x0);
    let f0 = loss.item();
    let grads = tape.backward(&loss).expect("backward");
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nn = 0.0;
    let mut kinked = false;
    let mut x = x0.to_vec();
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get(leaf).expect("leaf on tape").to_vec();
        for j in 0..x[i].len() {
            let orig = x[i][j];
            x[i][j] = orig + h;
            let up = f(&Tape::new(), &x).0.item();
            x[i][j] = orig - h;
            let down = f(&Tape::new(), &x).0.item();
            x[i][j] = orig;
            kinked |= (up - 2.0 * f0 + down).abs() > KINK_TOLERANCE;
            let numeric = (up - down) / (2.0 * h);
            diff += (analytic[j] - numeric).powi(2);
            na += analytic[j].powi(2);
            nn += numeric.powi(2);
        }
    }
    GradCheck {
        error: diff.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-10),
        kinked,
    }
}

pub fn leaves(tape: &Tape, xs: &[Vec<f64>], shapes: &[Vec<usize>]) -> Vec<Tensor> {
    xs.iter()
        .zip(shapes)
        .map(|(v, s)| tape.param(Tensor::from_vec(s.clone(), v.clone()).unwrap()))
        .collect()
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Values bounded away from zero, so no input sits on an activation kink.
pub fn off_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

/// `sum(out * w)` for a fixed weight tensor.
pub fn project(tape: &Tape, out: &Tensor, w: &[f64]) -> Tensor {
    let w = Tensor::from_vec(out.shape().to_vec(), w.to_vec()).unwrap();
    tape.sum(&tape.mul(out, &w).unwrap())
}

fn product(s: &[usize]) -> usize {
    s.iter().product()
}

/// One operation under test: its name and a generator of random
/// instances (initial inputs and loss function).
pub type Instance = (Vec<Vec<f64>>, Box<LossFn<'static>>);

pub struct GradCase {
    pub name: &'static str,
    pub make: fn(&mut ChaCha8Rng) -> Instance,
}

fn simple(
    shapes: Vec<Vec<usize>>,
    xs: Vec<Vec<f64>>,
    out_len: usize,
    rng: &mut ChaCha8Rng,
    body: impl Fn(&Tape, &[Tensor]) -> Tensor + 'static,
) -> (Vec<Vec<f64>>, Box<LossFn<'static>>) {
    let w = uniform(rng, out_len, -1.0, 1.0);
    let f = move |tape: &Tape, xs: &[Vec<f64>]| {
        let ls = leaves(tape, xs, &shapes);
        let out = body(tape, &ls);
        (project(tape, &out, &w), ls)
    };
    (xs, Box::new(f))
}

/// Every differentiable tape operation.
pub fn op_cases() -> Vec<GradCase> {
    vec![
        GradCase {
            name: "matmul",
            make: |rng| {
                let (m, k, n) = (
                    rng.gen_range(1..5),
                    rng.gen_range(1..6),
                    rng.gen_range(1..5),
                );
                let xs = vec![
                    uniform(rng, m * k, -1.0, 1.0),
                    uniform(rng, k * n, -1.0, 1.0),
                ];
                simple(vec![vec![m, k], vec![k, n]], xs, m * n, rng, |t, l| {
                    t.matmul(&l[0], &l[1]).unwrap()
                })
            },
        },
        GradCase {
            name: "add",
            make: |rng| {
                let s = vec![rng.gen_range(1..5), rng.gen_range(1..5)];
                let xs = vec![
                    uniform(rng, product(&s), -1.0, 1.0),
                    uniform(rng, product(&s), -1.0, 1.0),
                ];
                simple(vec![s.clone(), s.clone()], xs, product(&s), rng, |t, l| {
                    t.add(&l[0], &l[1]).unwrap()
                })
            },
        },
        GradCase {
            name: "sub",
            make: |rng| {
                let s = vec![rng.gen_range(1..5), rng.gen_range(1..5)];
                let xs = vec![
                    uniform(rng, product(&s), -1.0, 1.0),
                    uniform(rng, product(&s), -1.0, 1.0),
                ];
                simple(vec![s.clone(), s.clone()], xs, product(&s), rng, |t, l| {
                    t.sub(&l[0], &l[1]).unwrap()
                })
            },
        },
        GradCase {
            name: "mul",
            make: |rng| {
                let s = vec![rng.gen_range(1..5), rng.gen_range(1..5)];
                let xs = vec![
                    uniform(rng, product(&s), -1.0, 1.0),
                    uniform(rng, product(&s), -1.0, 1.0),
                ];
                simple(vec![s.clone(), s.clone()], xs, product(&s), rng, |t, l| {
                    t.mul(&l[0], &l[1]).unwrap()
                })
            },
        },
        GradCase {
            name: "scale",
            make: |rng| {
                let s = vec![rng.gen_range(1..5), rng.gen_range(1..5)];
                let c = rng.gen_range(-2.0..2.0);
                let xs = vec![uniform(rng, product(&s), -1.0, 1.0)];
                simple(vec![s.clone()], xs, product(&s), rng, move |t, l| {
                    t.scale(&l[0], c)
                })
            },
        },
        GradCase {
            name: "add_bias",
            make: |rng| {
                let s = vec![
                    rng.gen_range(1..4),
                    rng.gen_range(1..4),
                    rng.gen_range(1..5),
                ];
                let xs = vec![
                    uniform(rng, product(&s), -1.0, 1.0),
                    uniform(rng, s[2], -1.0, 1.0),
                ];
                simple(vec![s.clone(), vec![s[2]]], xs, product(&s), rng, |t, l| {
                    t.add_bias(&l[0], &l[1]).unwrap()
                })
            },
        },
        GradCase {
            name: "add_center",
            make: |rng| {
                let s = vec![
                    rng.gen_range(1..4),
                    rng.gen_range(1..4),
                    rng.gen_range(1..5),
                ];
                let xs = vec![
                    uniform(rng, product(&s), -1.0, 1.0),
                    uniform(rng, s[0] * s[2], -1.0, 1.0),
                ];
                simple(
                    vec![s.clone(), vec![s[0], s[2]]],
                    xs,
                    product(&s),
                    rng,
                    |t, l| t.add_center(&l[0], &l[1]).unwrap(),
                )
            },
        },
        GradCase {
            name: "sub_center",
            make: |rng| {
                let s = vec![
                    rng.gen_range(1..4),
                    rng.gen_range(1..4),
                    rng.gen_range(1..5),
                ];
                let xs = vec![
                    uniform(rng, product(&s), -1.0, 1.0),
                    uniform(rng, s[0] * s[2], -1.0, 1.0),
                ];
                simple(
                    vec![s.clone(), vec![s[0], s[2]]],
                    xs,
                    product(&s),
                    rng,
                    |t, l| t.sub_center(&l[0], &l[1]).unwrap(),
                )
            },
        },
        GradCase {
            name: "leaky_relu",
            make: |rng| {
                let s = vec![rng.gen_range(1..5), rng.gen_range(1..6)];
                let xs = vec![off_zero(rng, product(&s))];
                simple(vec![s.clone()], xs, product(&s), rng, |t, l| {
                    t.leaky_relu(&l[0], 0.2).unwrap()
                })
            },
        },
        GradCase {
            name: "gather_rows",
            make: |rng| {
                let (n, c, m, k) = (
                    rng.gen_range(1..6),
                    rng.gen_range(1..4),
                    rng.gen_range(1..4),
                    rng.gen_range(1..4),
                );
                let idx: Vec<usize> = (0..m * k).map(|_| rng.gen_range(0..n)).collect();
                let xs = vec![uniform(rng, n * c, -1.0, 1.0)];
                simple(vec![vec![n, c]], xs, m * k * c, rng, move |t, l| {
                    t.gather_rows(&l[0], &idx, k).unwrap()
                })
            },
        },
        GradCase {
            name: "concat",
            make: |rng| {
                let (n, a, b) = (
                    rng.gen_range(1..5),
                    rng.gen_range(1..4),
                    rng.gen_range(1..4),
                );
                let xs = vec![
                    uniform(rng, n * a, -1.0, 1.0),
                    uniform(rng, n * b, -1.0, 1.0),
                ];
                simple(
                    vec![vec![n, a], vec![n, b]],
                    xs,
                    n * (a + b),
                    rng,
                    |t, l| t.concat(&[&l[0], &l[1]]).unwrap(),
                )
            },
        },
        GradCase {
            name: "max_reduce",
            make: |rng| {
                let s = vec![
                    rng.gen_range(1..4),
                    rng.gen_range(1..5),
                    rng.gen_range(1..4),
                ];
                let xs = vec![uniform(rng, product(&s), -1.0, 1.0)];
                simple(vec![s.clone()], xs, s[0] * s[2], rng, |t, l| {
                    t.max_reduce(&l[0]).unwrap()
                })
            },
        },
        GradCase {
            name: "gather_max",
            make: |rng| {
                let (n, c, m, k) = (
                    rng.gen_range(2..7),
                    rng.gen_range(1..4),
                    rng.gen_range(1..4),
                    rng.gen_range(1..4),
                );
                // distinct indices per row keep the maximum unique
                let idx: Vec<usize> = (0..m)
                    .flat_map(|_| rand::seq::index::sample(rng, n, k.min(n)).into_vec())
                    .collect();
                let k = k.min(n);
                let xs = vec![uniform(rng, n * c, -1.0, 1.0)];
                simple(vec![vec![n, c]], xs, m * c, rng, move |t, l| {
                    t.gather_max(&l[0], &idx, k).unwrap()
                })
            },
        },
        GradCase {
            name: "reshape",
            make: |rng| {
                let (a, b) = (rng.gen_range(1..4), rng.gen_range(1..4));
                let xs = vec![uniform(rng, a * b * 2, -1.0, 1.0)];
                simple(vec![vec![a, b * 2]], xs, a * b * 2, rng, move |t, l| {
                    t.reshape(&l[0], &[a, b, 2]).unwrap()
                })
            },
        },
        GradCase {
            name: "slice_rows",
            make: |rng| {
                let (n, c) = (rng.gen_range(2..6), rng.gen_range(1..4));
                let start = rng.gen_range(0..n - 1);
                let end = rng.gen_range(start + 1..=n);
                let xs = vec![uniform(rng, n * c, -1.0, 1.0)];
                simple(vec![vec![n, c]], xs, (end - start) * c, rng, move |t, l| {
                    t.slice_rows(&l[0], start, end).unwrap()
                })
            },
        },
        GradCase {
            name: "sum",
            make: |rng| {
                let s = vec![rng.gen_range(1..5), rng.gen_range(1..5)];
                let xs = vec![uniform(rng, product(&s), -1.0, 1.0)];
                simple(vec![s], xs, 1, rng, |t, l| t.sum(&l[0]))
            },
        },
        GradCase {
            name: "mean",
            make: |rng| {
                let s = vec![rng.gen_range(1..5), rng.gen_range(1..5)];
                let xs = vec![uniform(rng, product(&s), -1.0, 1.0)];
                simple(vec![s], xs, 1, rng, |t, l| t.mean(&l[0]))
            },
        },
        GradCase {
            name: "cross_entropy",
            make: |rng| {
                let (m, c) = (rng.gen_range(1..5), rng.gen_range(2..6));
                let labels: Vec<usize> = (0..m).map(|_| rng.gen_range(0..c)).collect();
                let xs = vec![uniform(rng, m * c, -3.0, 3.0)];
                simple(vec![vec![m, c]], xs, 1, rng, move |t, l| {
                    t.cross_entropy(&l[0], &labels).unwrap()
                })
            },
        },
    ]
}

/// Random `n x 3` points in the unit cube, flat.
pub fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    uniform(rng, n * 3, -1.0, 1.0)
}

/// Replaces every parameter with uniform values in `[-a, a]`.
pub fn randomize(params: &mut Params, rng: &mut ChaCha8Rng, a: f64) {
    for i in 0..params.len() {
        let n = params.get(ParamId(i)).len();
        params.set(ParamId(i), uniform(rng, n, -a, a)).unwrap();
    }
}

/// Loss over a parameter set plus one feature tensor: the inputs are every
/// parameter in order, then the features.
fn with_params(
    params: Params,
    feat_shape: Vec<usize>,
    w: Vec<f64>,
    body: impl Fn(&dapconv::param::Bound, &Tensor) -> Tensor + 'static,
) -> Box<LossFn<'static>> {
    Box::new(move |tape: &Tape, xs: &[Vec<f64>]| {
        let mut p = params.clone();
        for (i, x) in xs.iter().take(p.len()).enumerate() {
            p.set(ParamId(i), x.clone()).unwrap();
        }
        let bound = p.bind(tape, true);
        let feats = tape.param(Tensor::from_vec(feat_shape.clone(), xs[p.len()].clone()).unwrap());
        let out = body(&bound, &feats);
        let mut ls = bound.tensors().to_vec();
        ls.push(feats);
        (project(tape, &out, &w), ls)
    })
}

fn inputs_of(params: &Params, feats: Vec<f64>) -> Vec<Vec<f64>> {
    let mut xs: Vec<Vec<f64>> = params.entries().iter().map(|e| e.value.to_vec()).collect();
    xs.push(feats);
    xs
}

/// Linear layers, MLPs and both local convolutions, through their
/// parameters and inputs.
pub fn layer_cases() -> Vec<GradCase> {
    vec![
        GradCase {
            name: "linear",
            make: |rng| {
                let (n, a, b) = (
                    rng.gen_range(1..5),
                    rng.gen_range(1..5),
                    rng.gen_range(1..5),
                );
                let mut params = Params::new();
                let lin = Linear::new(&mut params, &mut Init { rng }, "lin", a, b);
                randomize(&mut params, rng, 1.0);
                let feats = uniform(rng, n * a, -1.0, 1.0);
                let w = uniform(rng, n * b, -1.0, 1.0);
                let xs = inputs_of(&params, feats);
                (
                    xs,
                    with_params(params, vec![n, a], w, move |bd, f| {
                        lin.forward(bd, f).unwrap()
                    }),
                )
            },
        },
        GradCase {
            name: "mlp",
            make: |rng| {
                let (n, a) = (rng.gen_range(1..5), rng.gen_range(1..5));
                let widths = [rng.gen_range(1..5), rng.gen_range(1..5)];
                let mut params = Params::new();
                let mlp =
                    Mlp::new(&mut params, &mut Init { rng }, "mlp", a, &widths, true).unwrap();
                randomize(&mut params, rng, 1.0);
                let feats = uniform(rng, n * a, -1.0, 1.0);
                let w = uniform(rng, n * widths[1], -1.0, 1.0);
                let xs = inputs_of(&params, feats);
                (
                    xs,
                    with_params(params, vec![n, a], w, move |bd, f| {
                        mlp.forward(bd, f).unwrap()
                    }),
                )
            },
        },
        GradCase {
            name: "edge_conv",
            make: |rng| local_conv_case(rng, LocalConvKind::EdgeConv),
        },
        GradCase {
            name: "shared_mlp_pool",
            make: |rng| local_conv_case(rng, LocalConvKind::SharedMlpPool),
        },
    ]
}

fn local_conv_case(
    rng: &mut ChaCha8Rng,
    kind: LocalConvKind,
) -> (Vec<Vec<f64>>, Box<LossFn<'static>>) {
    let n = rng.gen_range(4..12);
    let c = rng.gen_range(1..4);
    let k = rng.gen_range(1..4);
    let rel_pos = rng.gen_bool(0.5);
    let widths: Vec<usize> = if rng.gen_bool(0.5) {
        vec![4]
    } else {
        vec![3, 4]
    };
    let pts = random_points(rng, n);
    let graph = KnnIndex::build(&pts).unwrap().batch(&pts, k).unwrap();
    let positions = Tensor::from_vec(vec![n, 3], pts).unwrap();
    let mut params = Params::new();
    let conv = LocalConv::new(
        &mut params,
        &mut Init { rng },
        "conv",
        kind,
        c,
        &widths,
        rel_pos,
    )
    .unwrap();
    randomize(&mut params, rng, 1.0);
    let feats = uniform(rng, n * c, -1.0, 1.0);
    let w = uniform(rng, n * 4, -1.0, 1.0);
    let xs = inputs_of(&params, feats);
    let f = with_params(params, vec![n, c], w, move |bd, f| {
        conv.apply(
            bd,
            &Neighborhood {
                features: f,
                centers: f,
                neighbors: &graph,
                positions: rel_pos.then_some(Positions {
                    points: &positions,
                    queries: &positions,
                }),
            },
        )
        .unwrap()
    });
    (xs, f)
}

/// A DAP block setting under test.
#[derive(Debug, Clone, Copy)]
pub struct DapCase {
    pub space: Space,
    pub integration: Integration,
    pub heads: usize,
}

impl DapCase {
    pub fn all() -> Vec<DapCase> {
        let mut v = Vec::new();
        for space in [Space::Euclidean, Space::Feature] {
            for integration in [Integration::Add, Integration::ConcatMlp] {
                for heads in [1, 2, 4] {
                    v.push(DapCase {
                        space,
                        integration,
                        heads,
                    });
                }
            }
        }
        v
    }

    pub fn name(&self) -> String {
        format!(
            "dap-conv {} {} m={}",
            self.space, self.integration, self.heads
        )
    }

    /// A random instance. Instances alternate between one- and two-layer
    /// convolutions, edge and shared-MLP kernels, and relative positions
    /// in the first convolution.
    pub fn instance(
        &self,
        rng: &mut ChaCha8Rng,
        variant: usize,
    ) -> (Vec<Vec<f64>>, Box<LossFn<'static>>) {
        let n = rng.gen_range(10..20);
        let (c_in, c_out, k) = (3, 4, rng.gen_range(2..5));
        let pts = random_points(rng, n);
        let index = KnnIndex::build(&pts).unwrap();
        let graph: NeighborMatrix = index.batch(&pts, k).unwrap();
        let positions = Tensor::from_vec(vec![n, 3], pts).unwrap();
        let mut cfg = DapConfig::new(self.space, c_in, c_out, k);
        cfg.dap_count = self.heads;
        cfg.integration = self.integration;
        if variant % 2 == 1 {
            cfg.conv_widths = vec![3, c_out];
        }
        if variant % 3 == 2 {
            cfg.conv_kind = LocalConvKind::SharedMlpPool;
            cfg.conv1_rel_pos = true;
        }
        let mut params = Params::new();
        let block = DapConv::new(&mut params, &mut Init { rng }, "dap", cfg).unwrap();
        randomize(&mut params, rng, 0.8);
        let feats = uniform(rng, n * c_in, -1.0, 1.0);
        let w = uniform(rng, n * c_out, -1.0, 1.0);
        let xs = inputs_of(&params, feats);
        let f = with_params(params, vec![n, c_in], w, move |bd, f| {
            let inputs = DapInputs {
                cloud: Cloud {
                    positions: &positions,
                    index: &index,
                },
                features: f,
                graph: &graph,
                random_seed: 0,
            };
            block.forward(bd, &inputs).unwrap().0
        });
        (xs, f)
    }
}

/// Result of one suite entry.
#[derive(Debug, Clone, Copy)]
pub struct SuiteResult {
    /// Worst relative error over the smooth instances.
    pub worst: f64,
    pub instances: usize,
    /// Instances redrawn because they straddled a kink.
    pub redrawn: usize,
}

/// Draws instances until `instances` smooth ones have been checked.
fn run_suite(instances: usize, mut draw: impl FnMut(usize) -> GradCheck) -> SuiteResult {
    let mut res = SuiteResult {
        worst: 0.0,
        instances: 0,
        redrawn: 0,
    };
    let mut v = 0;
    while res.instances < instances {
        let c = draw(v);
        v += 1;
        if c.kinked {
            res.redrawn += 1;
            assert!(res.redrawn <= instances, "most instances straddle kinks");
            continue;
        }
        res.worst = res.worst.max(c.error);
        res.instances += 1;
    }
    res
}

pub fn check_case(case: &GradCase, instances: usize, seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    run_suite(instances, |_| {
        let (xs, f) = (case.make)(&mut rng);
        grad_check(&xs, f.as_ref(), FD_STEP)
    })
}

pub fn check_dap(case: DapCase, instances: usize, seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    run_suite(instances, |v| {
        let (xs, f) = case.instance(&mut rng, v);
        grad_check(&xs, f.as_ref(), FD_STEP)
    })
}

/// Full sort by `(squared distance, index)`.
pub fn brute_knn(points: &[f64], q: [f64; 3], k: usize) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = points
        .chunks_exact(3)
        .enumerate()
        .map(|(i, p)| {
            let d: f64 = (0..3).map(|c| (p[c] - q[c]) * (p[c] - q[c])).sum();
            (d, i)
        })
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(_, i)| i).collect()
}

/// A random cloud of `n` points where roughly a fifth are copies of
/// earlier points, and some coordinates are snapped to a coarse grid.
pub fn cloud_with_duplicates(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut pts: Vec<f64> = Vec::with_capacity(n * 3);
    for i in 0..n {
        if i > 0 && rng.gen_bool(0.2) {
            let j = rng.gen_range(0..i);
            let p = [pts[3 * j], pts[3 * j + 1], pts[3 * j + 2]];
            pts.extend_from_slice(&p);
        } else if rng.gen_bool(0.2) {
            pts.extend((0..3).map(|_| rng.gen_range(-2..=2) as f64 * 0.5));
        } else {
            pts.extend(uniform(rng, 3, -1.0, 1.0));
        }
    }
    pts
}

/// A small classification or segmentation model config for fast tests.
pub fn small_model(head: dapconv::models::Head) -> dapconv::models::ModelConfig {
    dapconv::models::ModelConfig {
        widths: vec![6, 8],
        k: 5,
        head_hidden: vec![8],
        ..dapconv::models::ModelConfig::mini_dgcnn(head)
    }
}

/// Largest `|logit(cloud) - logit(permuted)|` for a classifier.
pub fn classify_permutation_gap(
    model: &dapconv::models::Model,
    cloud: &dapconv::data::PointCloud,
    perm: &[usize],
) -> f64 {
    let a = model.infer(cloud).unwrap().logits;
    let b = model.infer(&cloud.permuted(perm)).unwrap().logits;
    a.values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Largest gap between row `i` of the permuted output and row `perm[i]`
/// of the original, for a segmenter.
pub fn segment_equivariance_gap(
    model: &dapconv::models::Model,
    cloud: &dapconv::data::PointCloud,
    perm: &[usize],
) -> f64 {
    let a = model.infer(cloud).unwrap().logits;
    let b = model.infer(&cloud.permuted(perm)).unwrap().logits;
    let mut gap = 0.0f64;
    for (i, &p) in perm.iter().enumerate() {
        for (x, y) in b.row(i).iter().zip(a.row(p)) {
            gap = gap.max((x - y).abs());
        }
    }
    gap
}

/// Rotation about an arbitrary axis followed by a translation.
pub fn rigid_motion(rng: &mut ChaCha8Rng) -> impl Fn([f64; 3]) -> [f64; 3] {
    let axis = {
        let v = uniform(rng, 3, -1.0, 1.0);
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-9);
        [v[0] / n, v[1] / n, v[2] / n]
    };
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let t = uniform(rng, 3, -2.0, 2.0);
    let (s, c) = angle.sin_cos();
    let [x, y, z] = axis;
    let r = [
        [
            c + x * x * (1.0 - c),
            x * y * (1.0 - c) - z * s,
            x * z * (1.0 - c) + y * s,
        ],
        [
            y * x * (1.0 - c) + z * s,
            c + y * y * (1.0 - c),
            y * z * (1.0 - c) - x * s,
        ],
        [
            z * x * (1.0 - c) - y * s,
            z * y * (1.0 - c) + x * s,
            c + z * z * (1.0 - c),
        ],
    ];
    move |p: [f64; 3]| {
        let mut out = [0.0; 3];
        for i in 0..3 {
            out[i] = r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2] + t[i];
        }
        out
    }
}

/// Attention neighborhoods of a zero-offset Euclidean DAP block on `pts`.
pub fn zero_offset_selection(pts: &[[f64; 3]], k: usize) -> NeighborMatrix {
    let flat: Vec<f64> = pts.iter().flatten().copied().collect();
    let n = pts.len();
    let index = KnnIndex::build(&flat).unwrap();
    let graph = index.batch(&flat, k).unwrap();
    let positions = Tensor::from_vec(vec![n, 3], flat.clone()).unwrap();
    let mut params = Params::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let block = DapConv::new(
        &mut params,
        &mut Init { rng: &mut rng },
        "dap",
        DapConfig::new(Space::Euclidean, 3, 4, k),
    )
    .unwrap();
    let tape = Tape::new();
    let bound = params.bind(&tape, false);
    let inputs = DapInputs {
        cloud: Cloud {
            positions: &positions,
            index: &index,
        },
        features: &positions,
        graph: &graph,
        random_seed: 0,
    };
    block.forward(&bound, &inputs).unwrap().1.neighbor_idx
}
