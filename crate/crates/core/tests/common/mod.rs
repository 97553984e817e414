//! Oracles and fixtures shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use std::collections::HashMap;

use tacit::flow::flow_loss;
use tacit::image::{Image, ImageU8, RED};
use tacit::maze::{cells_pixel_mask, Cell, MazeGrid, PairSample, SolutionPath};
use tacit::model::{init_params, ModelConfig, ModelParams, ParamGroup, ParamTree};
use tacit::sampler::Trajectory;
use tacit::tensor::{finite_diff_check, GradCheckConfig, Scalar, Tape, Tensor, Var};

// ---------------------------------------------------------------------------
// Maze oracles

/// Open cells, and whether the open cells form one tree under 4-adjacency.
pub fn tree_check(grid: &MazeGrid) -> (usize, bool) {
    let s = grid.size();
    let open: Vec<Cell> = (0..s)
        .flat_map(|r| (0..s).map(move |c| (r, c)))
        .filter(|&c| grid.is_open(c))
        .collect();
    let index: HashMap<Cell, usize> = open.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let mut parent: Vec<usize> = (0..open.len()).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    let mut acyclic = true;
    let mut components = open.len();
    for (i, &(r, c)) in open.iter().enumerate() {
        for nb in [(r + 1, c), (r, c + 1)] {
            if let Some(&j) = index.get(&nb) {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a == b {
                    acyclic = false;
                } else {
                    parent[a] = b;
                    components -= 1;
                }
            }
        }
    }
    (open.len(), acyclic && components == 1)
}

/// Every simple entry→exit path, by exhaustive depth-first enumeration.
pub fn all_simple_paths(grid: &MazeGrid) -> Vec<Vec<Cell>> {
    fn go(
        grid: &MazeGrid,
        at: Cell,
        path: &mut Vec<Cell>,
        seen: &mut Vec<bool>,
        out: &mut Vec<Vec<Cell>>,
    ) {
        if at == grid.exit() {
            out.push(path.clone());
            return;
        }
        let s = grid.size();
        let (r, c) = at;
        let mut nbs = vec![(r + 1, c), (r, c + 1)];
        if r > 0 {
            nbs.push((r - 1, c));
        }
        if c > 0 {
            nbs.push((r, c - 1));
        }
        for nb in nbs {
            if nb.0 < s && nb.1 < s && grid.is_open(nb) && !seen[nb.0 * s + nb.1] {
                seen[nb.0 * s + nb.1] = true;
                path.push(nb);
                go(grid, nb, path, seen, out);
                path.pop();
                seen[nb.0 * s + nb.1] = false;
            }
        }
    }
    let s = grid.size();
    let mut seen = vec![false; s * s];
    let e = grid.entry();
    seen[e.0 * s + e.1] = true;
    let mut out = Vec::new();
    go(grid, e, &mut vec![e], &mut seen, &mut out);
    out
}

// ---------------------------------------------------------------------------
// Velocity sparsity

/// Pixels where input and target differ, and the target's red pixels.
pub fn changed_and_red(pair: &PairSample) -> (Vec<bool>, Vec<bool>) {
    let n = pair.input.height * pair.input.width;
    let px = |img: &ImageU8, i: usize| [img.data[3 * i], img.data[3 * i + 1], img.data[3 * i + 2]];
    let changed = (0..n)
        .map(|i| px(&pair.input, i) != px(&pair.target, i))
        .collect();
    let red = (0..n).map(|i| px(&pair.target, i) == RED).collect();
    (changed, red)
}

// ---------------------------------------------------------------------------
// Synthetic trajectories

/// States at `t = i/N`: the input before `switch`, the target from `switch` on.
pub fn switch_trajectory(pair: &PairSample, steps: usize, switch: f64) -> Trajectory<f32> {
    let (x0, x1) = (pair.input.to_float::<f32>(), pair.target.to_float::<f32>());
    let states = (0..=steps)
        .map(|i| {
            let t = i as f64 / steps as f64;
            (
                t,
                if t + 1e-12 >= switch {
                    x1.clone()
                } else {
                    x0.clone()
                },
            )
        })
        .collect();
    Trajectory { steps, states }
}

/// The input with the pixels of `cells` painted red.
pub fn paint(input: &Image<f32>, cells: &[Cell], size: usize) -> Image<f32> {
    let res = input.height;
    let mask = cells_pixel_mask(cells, size, res);
    let plane = res * res;
    let mut out = input.clone();
    for (i, &m) in mask.iter().enumerate() {
        if m {
            out.data[i] = 1.0;
            out.data[plane + i] = 0.0;
            out.data[2 * plane + i] = 0.0;
        }
    }
    out
}

/// Thirds of the path interior become red at their own times `onsets`.
pub fn staged_trajectory(
    pair: &PairSample,
    path: &SolutionPath,
    steps: usize,
    onsets: [f64; 3],
) -> Trajectory<f32> {
    let x0 = pair.input.to_float::<f32>();
    let interior = path.interior();
    let thirds = tacit::analysis::thirds(interior.len());
    let size = pair.size as usize;
    let states = (0..=steps)
        .map(|i| {
            let t = i as f64 / steps as f64;
            let mut cells = Vec::new();
            for (range, &on) in thirds.iter().zip(&onsets) {
                if t + 1e-12 >= on {
                    cells.extend_from_slice(&interior[range.clone()]);
                }
            }
            (t, paint(&x0, &cells, size))
        })
        .collect();
    Trajectory { steps, states }
}

// ---------------------------------------------------------------------------
// Gradient checks

/// A differentiable computation over a list of parameter tensors, written once
/// for any scalar type.
pub trait Layer {
    fn name(&self) -> &'static str;
    fn shapes(&self) -> Vec<Vec<usize>>;
    /// Output whose MSE against a fixed random target is the loss.
    fn build<T: Scalar>(&self, tape: &mut Tape<T>, params: &[Var]) -> Var;
}

pub fn random_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = tacit::rng::seeded(seed);
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z * scale
    })
}

fn layer_loss<T: Scalar, L: Layer>(
    layer: &L,
    params: &[Tensor<T>],
    with_grads: bool,
) -> (f64, Vec<Tensor<T>>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| {
            if with_grads {
                tape.param(p.clone())
            } else {
                tape.constant(p.clone())
            }
        })
        .collect();
    let out = layer.build(&mut tape, &vars);
    let shape = tape.value(out).shape().to_vec();
    let target = tape.constant(random_tensor(&shape, 999, 1.0).cast());
    let loss = tape.mse_loss(out, target).unwrap();
    let value = tape.value(loss).data()[0].as_f64();
    if !with_grads {
        return (value, Vec::new());
    }
    let mut g = tape.backward(loss).unwrap();
    let grads = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| g.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    (value, grads)
}

/// Denominator floor for f32 comparisons, per unit of loss. Structurally zero
/// gradients (a key bias under softmax) come out of f32 arithmetic at about
/// `1e-8 × loss`.
pub const F32_ABS_FLOOR: f64 = 1e-5;

fn f32_floor(loss: f64) -> f64 {
    F32_ABS_FLOOR * loss.abs().max(1.0)
}

#[derive(Clone, Copy, Debug)]
pub struct LayerCheck {
    pub f64_max: f64,
    pub f32_max: f64,
    pub probes: usize,
}

/// f64 analytic vs f64 central differences, and f32 analytic vs the same f64
/// central differences.
pub fn check_layer<L: Layer>(layer: &L, probes: usize, seed: u64) -> LayerCheck {
    let params: Vec<Tensor<f64>> = layer
        .shapes()
        .iter()
        .enumerate()
        .map(|(i, s)| random_tensor(s, seed + i as u64, 0.5))
        .collect();
    let cfg = GradCheckConfig {
        probes,
        seed,
        ..GradCheckConfig::default()
    };
    let (loss, g64) = layer_loss(layer, &params, true);
    let forward = |p: &[Tensor<f64>]| layer_loss(layer, p, false).0;
    let r64 = finite_diff_check(forward, &params, &g64, cfg).unwrap();

    let p32: Vec<Tensor<f32>> = params.iter().map(|p| p.cast()).collect();
    let params_rounded: Vec<Tensor<f64>> = p32.iter().map(|p| p.cast()).collect();
    let (_, g32) = layer_loss(layer, &p32, true);
    let g32: Vec<Tensor<f64>> = g32.iter().map(|g| g.cast()).collect();
    let cfg32 = GradCheckConfig {
        abs_floor: f32_floor(loss),
        ..cfg
    };
    let r32 = finite_diff_check(forward, &params_rounded, &g32, cfg32).unwrap();
    LayerCheck {
        f64_max: r64.max_rel_error,
        f32_max: r32.max_rel_error,
        probes,
    }
}

pub struct LinearLayer;
impl Layer for LinearLayer {
    fn name(&self) -> &'static str {
        "linear"
    }
    fn shapes(&self) -> Vec<Vec<usize>> {
        vec![vec![6, 5], vec![5, 4], vec![4]]
    }
    fn build<T: Scalar>(&self, tape: &mut Tape<T>, p: &[Var]) -> Var {
        tape.linear(p[0], p[1], p[2]).unwrap()
    }
}

pub struct LayerNormLayer;
impl Layer for LayerNormLayer {
    fn name(&self) -> &'static str {
        "layer_norm"
    }
    fn shapes(&self) -> Vec<Vec<usize>> {
        vec![vec![5, 8]]
    }
    fn build<T: Scalar>(&self, tape: &mut Tape<T>, p: &[Var]) -> Var {
        tape.layer_norm(p[0], 1e-6).unwrap()
    }
}

/// `γ ⊙ LN(h) + β` with `[γ | β] = linear(e)`.
pub struct AdaLnLayer;
impl Layer for AdaLnLayer {
    fn name(&self) -> &'static str {
        "adaln"
    }
    fn shapes(&self) -> Vec<Vec<usize>> {
        vec![vec![6, 4], vec![2, 3], vec![3, 8], vec![8]]
    }
    fn build<T: Scalar>(&self, tape: &mut Tape<T>, p: &[Var]) -> Var {
        let lin = tacit::model::Linear {
            weight: p[2],
            bias: p[3],
        };
        tacit::model::adaln_modulate(tape, p[0], p[1], &lin, 4).unwrap()
    }
}

pub struct GeluLayer;
impl Layer for GeluLayer {
    fn name(&self) -> &'static str {
        "gelu"
    }
    fn shapes(&self) -> Vec<Vec<usize>> {
        vec![vec![4, 6]]
    }
    fn build<T: Scalar>(&self, tape: &mut Tape<T>, p: &[Var]) -> Var {
        tape.gelu(p[0])
    }
}

pub struct SiluLayer;
impl Layer for SiluLayer {
    fn name(&self) -> &'static str {
        "silu"
    }
    fn shapes(&self) -> Vec<Vec<usize>> {
        vec![vec![4, 6]]
    }
    fn build<T: Scalar>(&self, tape: &mut Tape<T>, p: &[Var]) -> Var {
        tape.silu(p[0])
    }
}

pub struct SoftmaxLayer;
impl Layer for SoftmaxLayer {
    fn name(&self) -> &'static str {
        "softmax"
    }
    fn shapes(&self) -> Vec<Vec<usize>> {
        vec![vec![3, 7]]
    }
    fn build<T: Scalar>(&self, tape: &mut Tape<T>, p: &[Var]) -> Var {
        tape.softmax(p[0])
    }
}

/// Multi-head self-attention: qkv projection, head split, attention, merge,
/// output projection, on two sequences of four tokens.
pub struct AttentionLayer;
impl Layer for AttentionLayer {
    fn name(&self) -> &'static str {
        "attention"
    }
    fn shapes(&self) -> Vec<Vec<usize>> {
        vec![vec![8, 6], vec![6, 18], vec![18], vec![6, 6], vec![6]]
    }
    fn build<T: Scalar>(&self, tape: &mut Tape<T>, p: &[Var]) -> Var {
        let (d, heads, seq) = (6, 2, 4);
        let qkv = tape.linear(p[0], p[1], p[2]).unwrap();
        let mut hs = Vec::new();
        for i in 0..3 {
            let part = tape.slice_cols(qkv, i * d, d).unwrap();
            hs.push(tape.split_heads(part, heads, seq).unwrap());
        }
        let a = tape.scaled_attention(hs[0], hs[1], hs[2]).unwrap();
        let m = tape.merge_heads(a, heads).unwrap();
        tape.linear(m, p[3], p[4]).unwrap()
    }
}

/// Positional table added per sequence.
pub struct AddTiledLayer;
impl Layer for AddTiledLayer {
    fn name(&self) -> &'static str {
        "add_tiled"
    }
    fn shapes(&self) -> Vec<Vec<usize>> {
        vec![vec![6, 3], vec![2, 3]]
    }
    fn build<T: Scalar>(&self, tape: &mut Tape<T>, p: &[Var]) -> Var {
        tape.add_tiled(p[0], p[1]).unwrap()
    }
}

/// A full transformer block with random (non-identity) weights.
pub struct BlockLayer;
impl BlockLayer {
    fn cfg() -> ModelConfig {
        ModelConfig {
            resolution: 4,
            patch_size: 2,
            hidden_dim: 8,
            blocks: 1,
            heads: 2,
            head_dim: 4,
            mlp_dim: 32,
            time_freq_dim: 4,
        }
    }
}
impl Layer for BlockLayer {
    fn name(&self) -> &'static str {
        "block"
    }
    fn shapes(&self) -> Vec<Vec<usize>> {
        let d = 8;
        let mut s = vec![vec![2 * 4, d], vec![2, d]];
        for (i, o) in [(d, 2 * d), (d, 3 * d), (d, d), (d, 2 * d), (d, 32), (32, d)] {
            s.push(vec![i, o]);
            s.push(vec![o]);
        }
        s
    }
    fn build<T: Scalar>(&self, tape: &mut Tape<T>, p: &[Var]) -> Var {
        let lin = |i: usize| tacit::model::Linear {
            weight: p[2 + 2 * i],
            bias: p[3 + 2 * i],
        };
        let block = tacit::model::Block {
            ada1: lin(0),
            qkv: lin(1),
            attn_out: lin(2),
            ada2: lin(3),
            ffn_in: lin(4),
            ffn_out: lin(5),
        };
        tacit::model::block_forward(tape, p[0], p[1], &block, &Self::cfg()).unwrap()
    }
}

// ---------------------------------------------------------------------------
// Whole-model check

pub struct ModelCheck {
    pub group: ParamGroup,
    pub f64_max: f64,
    pub f32_max: f64,
    pub probes: usize,
}

fn tiny_batch(cfg: &ModelConfig, n: usize) -> (Vec<Image<f64>>, Vec<Image<f64>>, Vec<f64>) {
    let res = cfg.resolution;
    let pairs: Vec<PairSample> = (0..n as u64)
        .map(|s| tacit::maze::generate_pair(11, s, res).unwrap())
        .collect();
    let x0 = pairs.iter().map(|p| p.input.to_float()).collect();
    let x1 = pairs.iter().map(|p| p.target.to_float()).collect();
    let ts = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
    (x0, x1, ts)
}

/// Flow-loss gradient check of a model of shape `cfg`, `probes` entries per
/// parameter group. Weights are randomly perturbed away from the
/// initialization so that no layer sits at an exact zero.
pub fn check_model(cfg: &ModelConfig, batch: usize, probes: usize, seed: u64) -> Vec<ModelCheck> {
    let mut p64 = init_params::<f64>(cfg, seed).unwrap();
    p64.perturb(0.05, seed + 1);
    let p32: ModelParams<f32> = p64.cast();
    let p64r: ModelParams<f64> = p32.cast();
    let (x0, x1, ts) = tiny_batch(cfg, batch);
    let x0_32: Vec<Image<f32>> = x0.iter().map(|x| x.cast()).collect();
    let x1_32: Vec<Image<f32>> = x1.iter().map(|x| x.cast()).collect();

    let (loss, g64) = flow_loss(&p64, &x0, &x1, &ts, true).unwrap();
    let g64 = g64.unwrap();
    let g32: Vec<Tensor<f64>> = flow_loss(&p32, &x0_32, &x1_32, &ts, true)
        .unwrap()
        .1
        .unwrap()
        .iter()
        .map(|g| g.cast())
        .collect();

    let names: Vec<String> = cfg.layout().into_iter().map(|(n, _)| n).collect();
    let mut groups: Vec<(ParamGroup, Vec<usize>)> = Vec::new();
    for (i, n) in names.iter().enumerate() {
        let g = ParamGroup::of(n);
        match groups.iter_mut().find(|(k, _)| *k == g) {
            Some((_, v)) => v.push(i),
            None => groups.push((g, vec![i])),
        }
    }

    let run =
        |base: &ModelParams<f64>, grads: &[Tensor<f64>], idx: &[usize], gseed: u64, floor: f64| {
            let flat: Vec<Tensor<f64>> = base.tree.flat().into_iter().cloned().collect();
            let sub: Vec<Tensor<f64>> = idx.iter().map(|&i| flat[i].clone()).collect();
            let sub_g: Vec<Tensor<f64>> = idx.iter().map(|&i| grads[i].clone()).collect();
            let forward = |ps: &[Tensor<f64>]| {
                let mut all = flat.clone();
                for (k, &i) in idx.iter().enumerate() {
                    all[i] = ps[k].clone();
                }
                let model = ModelParams {
                    config: *cfg,
                    pos_embed: base.pos_embed.clone(),
                    tree: ParamTree::from_flat(cfg, all).unwrap(),
                };
                flow_loss(&model, &x0, &x1, &ts, false).unwrap().0
            };
            let gc = GradCheckConfig {
                probes,
                seed: gseed,
                abs_floor: floor,
                ..GradCheckConfig::default()
            };
            finite_diff_check(forward, &sub, &sub_g, gc)
                .unwrap()
                .max_rel_error
        };

    groups
        .iter()
        .enumerate()
        .map(|(k, (group, idx))| ModelCheck {
            group: *group,
            f64_max: run(
                &p64,
                &g64,
                idx,
                seed + k as u64,
                GradCheckConfig::default().abs_floor,
            ),
            f32_max: run(&p64r, &g32, idx, seed + k as u64, f32_floor(loss)),
            probes,
        })
        .collect()
}

/// Layers whose parameters get no gradient at exact zero init, and the
/// smallest number of Adam steps after which every group has a nonzero
/// gradient.
pub fn steps_until_all_groups_flow(cfg: &ModelConfig, max_steps: usize) -> Option<usize> {
    use tacit::tensor::{AdamConfig, AdamState};
    let mut params = init_params::<f32>(cfg, 0).unwrap();
    let mut adam = AdamState::new(AdamConfig::with_lr(1e-3), params.tree.flat());
    let pairs: Vec<PairSample> = (0..4u64)
        .map(|s| tacit::maze::generate_pair(11, s, cfg.resolution).unwrap())
        .collect();
    let x0: Vec<Image<f32>> = pairs.iter().map(|p| p.input.to_float()).collect();
    let x1: Vec<Image<f32>> = pairs.iter().map(|p| p.target.to_float()).collect();
    let ts = [0.1, 0.4, 0.6, 0.9];
    let names: Vec<String> = cfg.layout().into_iter().map(|(n, _)| n).collect();
    for step in 0..=max_steps {
        let grads = flow_loss(&params, &x0, &x1, &ts, true).unwrap().1.unwrap();
        let mut nonzero: HashMap<ParamGroup, bool> = HashMap::new();
        for (n, g) in names.iter().zip(&grads) {
            *nonzero.entry(ParamGroup::of(n)).or_default() |= g.sq_norm() > 0.0;
        }
        if nonzero.values().all(|&v| v) {
            return Some(step);
        }
        let refs: Vec<&Tensor<f32>> = grads.iter().collect();
        adam.update(&mut params.tree.flat_mut(), &refs).unwrap();
    }
    None
}

/// Desk-shaped model with fewer blocks for quick checks.
pub fn small_desk() -> ModelConfig {
    ModelConfig {
        blocks: 2,
        ..ModelConfig::desk()
    }
}

// ---------------------------------------------------------------------------
// Overfitting

pub struct Overfit {
    pub losses: Vec<f64>,
    pub params: ModelParams<f32>,
}

impl Overfit {
    /// Mean loss of the first `n` steps over the mean of the last `n`.
    pub fn reduction(&self, n: usize) -> f64 {
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        let n = n.min(self.losses.len());
        mean(&self.losses[..n]) / mean(&self.losses[self.losses.len() - n..])
    }
}

/// Trains on `batch` copies of one pair for `steps` Adam steps.
pub fn overfit_single_pair(
    cfg: &ModelConfig,
    pair: &PairSample,
    steps: usize,
    batch: usize,
    lr: f64,
) -> Overfit {
    use tacit::flow::{step_rng, train_step};
    use tacit::tensor::{AdamConfig, AdamState};
    let mut params = init_params::<f32>(cfg, 0).unwrap();
    let mut adam = AdamState::new(AdamConfig::with_lr(lr), params.tree.flat());
    let copies = vec![pair.clone(); batch];
    let losses = (0..steps)
        .map(|_| {
            let mut rng = step_rng(0, adam.step);
            train_step(&copies, &mut params, &mut adam, &mut rng)
                .unwrap()
                .loss
        })
        .collect();
    Overfit { losses, params }
}

/// IoU of the red pixels of an `steps`-step sample against the pair's target.
pub fn sample_iou(params: &ModelParams<f32>, pair: &PairSample, steps: usize) -> f64 {
    use tacit::analysis::{iou, red_mask, red_mask_u8};
    use tacit::sampler::{euler_sample, EulerOptions};
    let x0 = pair.input.to_float::<f32>();
    let out = euler_sample(params, &x0, EulerOptions::new(steps)).unwrap();
    iou(&red_mask(&out.output), &red_mask_u8(&pair.target)).unwrap()
}
