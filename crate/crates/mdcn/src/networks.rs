//! Network definitions: feature embedder, per-arm outcome heads, and the two
//! multi-output critics, plus checkpoint I/O.

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// Architecture of a fully connected network. Hidden layers use ELU; the
/// output layer is linear.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden: Vec<usize>, output_dim: usize) -> Self {
        assert!(
            input_dim > 0 && output_dim > 0 && hidden.iter().all(|&h| h > 0),
            "all dimensions must be positive: {input_dim} {hidden:?} {output_dim}"
        );
        MlpSpec {
            input_dim,
            hidden,
            output_dim,
        }
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut prev = self.input_dim;
        for &h in &self.hidden {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.output_dim));
        dims
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    /// `in x out`, row-major.
    pub w: Tensor,
    /// `1 x out`.
    pub b: Tensor,
}

/// A fully connected network with ELU hidden activations.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub layers: Vec<Linear>,
}

/// Tape node ids for an inserted network's parameters, in declaration order.
pub struct MlpVars {
    pub ws: Vec<NodeId>,
    pub bs: Vec<NodeId>,
}

impl Mlp {
    /// Xavier/Glorot uniform initialization, deterministic in `rng`.
    pub fn new(spec: MlpSpec, rng: &mut ChaCha8Rng) -> Self {
        let layers = spec
            .layer_dims()
            .iter()
            .map(|&(fi, fo)| {
                let bound = (6.0 / (fi + fo) as f64).sqrt();
                let w: Vec<f64> = (0..fi * fo)
                    .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * bound)
                    .collect();
                Linear {
                    w: Tensor::matrix(fi, fo, w),
                    b: Tensor::matrix(1, fo, vec![0.0; fo]),
                }
            })
            .collect();
        Mlp { spec, layers }
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.w.numel() + l.b.numel())
            .sum()
    }

    /// Forward pass without recording gradients.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(
            x.cols(),
            self.spec.input_dim,
            "input dim {} does not match spec {}",
            x.cols(),
            self.spec.input_dim
        );
        let n = x.rows();
        let mut cur = x.clone();
        for (li, layer) in self.layers.iter().enumerate() {
            let (fi, fo) = (layer.w.rows(), layer.w.cols());
            let mut out = vec![0.0; n * fo];
            crate::autodiff::matmul_acc(&mut out, cur.data(), layer.w.data(), n, fi, fo, false, false);
            for i in 0..n {
                for j in 0..fo {
                    out[i * fo + j] += layer.b.data()[j];
                }
            }
            if li + 1 < self.layers.len() {
                for v in out.iter_mut() {
                    *v = crate::autodiff::elu(*v);
                }
            }
            cur = Tensor::matrix(n, fo, out);
        }
        cur
    }

    /// Registers parameters on the tape; `trainable` controls whether
    /// gradients are accumulated for them.
    pub fn insert(&self, tape: &mut Tape, trainable: bool) -> MlpVars {
        let mut ws = Vec::with_capacity(self.layers.len());
        let mut bs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            ws.push(tape.leaf(layer.w.clone(), trainable));
            bs.push(tape.leaf(layer.b.clone(), trainable));
        }
        MlpVars { ws, bs }
    }

    /// Forward pass on the tape using previously inserted parameters.
    pub fn forward_tape(&self, tape: &mut Tape, vars: &MlpVars, x: NodeId) -> NodeId {
        let mut cur = x;
        for li in 0..self.layers.len() {
            let z = tape.matmul(cur, vars.ws[li]);
            let z = tape.add(z, vars.bs[li]);
            cur = if li + 1 < self.layers.len() {
                tape.elu(z)
            } else {
                z
            };
        }
        cur
    }

    /// Parameter tensors in declaration order (w then b per layer).
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.w, &mut l.b])
            .collect()
    }
}

/// Treatment arm.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arm {
    Control = 0,
    Treated = 1,
}

impl Arm {
    pub fn from_flag(t: u8) -> Result<Arm> {
        match t {
            0 => Ok(Arm::Control),
            1 => Ok(Arm::Treated),
            other => Err(Error::Data(format!("treatment flag must be 0 or 1, got {other}"))),
        }
    }
}

/// Which critic to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CriticKind {
    BetweenTreatment,
    CrossDomain,
}

/// Shape parameters of a model bundle.
#[derive(Clone, Debug, PartialEq)]
pub struct BundleConfig {
    pub feature_dim: usize,
    pub embed_dim: usize,
    /// Total domain count S, target included.
    pub domains: usize,
    /// Output heads of the between-treatment critic (S-1, or 1 for the
    /// global variant).
    pub bt_heads: usize,
    pub hidden: Vec<usize>,
}

impl BundleConfig {
    pub fn new(feature_dim: usize, embed_dim: usize, domains: usize) -> Result<Self> {
        if domains < 2 {
            return Err(Error::Config(format!(
                "need at least 2 domains, got {domains}"
            )));
        }
        if embed_dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        Ok(BundleConfig {
            feature_dim,
            embed_dim,
            domains,
            bt_heads: domains - 1,
            hidden: vec![50, 50],
        })
    }

    pub fn with_bt_heads(mut self, heads: usize) -> Self {
        self.bt_heads = heads;
        self
    }
}

/// Parameters of the embedder, the two outcome heads (a T-learner: no shared
/// parameters between arms), and the two critics.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub config: BundleConfig,
    pub seed: u64,
    pub embedder: Mlp,
    pub head0: Mlp,
    pub head1: Mlp,
    pub critic_bt: Mlp,
    pub critic_cd: Mlp,
}

impl ModelBundle {
    /// Deterministic build: the same seed yields bitwise-identical parameters.
    pub fn build(config: BundleConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = config.embed_dim;
        let embedder = Mlp::new(
            MlpSpec::new(config.feature_dim, config.hidden.clone(), q),
            &mut rng,
        );
        let head0 = Mlp::new(MlpSpec::new(q, config.hidden.clone(), 1), &mut rng);
        let head1 = Mlp::new(MlpSpec::new(q, config.hidden.clone(), 1), &mut rng);
        let critic_bt = Mlp::new(
            MlpSpec::new(q, config.hidden.clone(), config.bt_heads),
            &mut rng,
        );
        let critic_cd = Mlp::new(
            MlpSpec::new(q, config.hidden.clone(), config.domains),
            &mut rng,
        );
        ModelBundle {
            config,
            seed,
            embedder,
            head0,
            head1,
            critic_bt,
            critic_cd,
        }
    }

    pub fn embed(&self, x: &Tensor) -> Tensor {
        self.embedder.forward(x)
    }

    /// Outcome prediction for one arm on already-embedded inputs.
    pub fn predict(&self, phi: &Tensor, arm: Arm) -> Tensor {
        match arm {
            Arm::Control => self.head0.forward(phi),
            Arm::Treated => self.head1.forward(phi),
        }
    }

    /// All critic head outputs on embedded inputs: `n x heads`.
    pub fn critic_eval(&self, phi: &Tensor, which: CriticKind) -> Tensor {
        match which {
            CriticKind::BetweenTreatment => self.critic_bt.forward(phi),
            CriticKind::CrossDomain => self.critic_cd.forward(phi),
        }
    }
}

/// Per-feature affine standardization fitted on pooled source domains and
/// applied identically to the target domain.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Standardizer {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn fit_rows(rows: &[&[f64]]) -> Self {
        assert!(!rows.is_empty(), "cannot standardize zero rows");
        let dim = rows[0].len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; dim];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(*r) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= n;
        }
        let mut var = vec![0.0; dim];
        for r in rows {
            for j in 0..dim {
                let d = r[j] - mean[j];
                var[j] += d * d;
            }
        }
        let std = var
            .iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, std }
    }

    pub fn apply_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn apply(&self, rows: &[&[f64]]) -> Tensor {
        let dim = self.mean.len();
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            data.extend(self.apply_row(r));
        }
        Tensor::matrix(rows.len(), dim, data)
    }
}

// ---- checkpoint format -------------------------------------------------
//
// Line-oriented UTF-8 text. Floats use Rust's shortest round-trip decimal
// form, so save/load is bit-exact. Layout:
//
//   mdcn-net v1
//   spec <input_dim> <output_dim> <n_hidden> <hidden...>
//   layer <index> w <values...>
//   layer <index> b <values...>

pub fn write_mlp<W: Write>(out: &mut W, net: &Mlp) -> std::io::Result<()> {
    writeln!(out, "mdcn-net v1")?;
    write!(
        out,
        "spec {} {} {}",
        net.spec.input_dim,
        net.spec.output_dim,
        net.spec.hidden.len()
    )?;
    for h in &net.spec.hidden {
        write!(out, " {h}")?;
    }
    writeln!(out)?;
    for (i, layer) in net.layers.iter().enumerate() {
        write!(out, "layer {i} w")?;
        for v in layer.w.data() {
            write!(out, " {v}")?;
        }
        writeln!(out)?;
        write!(out, "layer {i} b")?;
        for v in layer.b.data() {
            write!(out, " {v}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

fn parse_floats(tokens: &[&str], path: &Path) -> Result<Vec<f64>> {
    tokens
        .iter()
        .map(|t| {
            t.parse::<f64>().map_err(|_| {
                Error::Checkpoint(format!("{}: bad float '{t}'", path.display()))
            })
        })
        .collect()
}

pub fn read_mlp<R: BufRead>(input: &mut R, path: &Path) -> Result<Mlp> {
    let bad = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
    let mut lines = Vec::new();
    for l in input.lines() {
        lines.push(l.map_err(|e| Error::io(path.display().to_string(), e))?);
    }
    let mut it = lines.iter();
    if it.next().map(String::as_str) != Some("mdcn-net v1") {
        return Err(bad("missing 'mdcn-net v1' header"));
    }
    let spec_line = it.next().ok_or_else(|| bad("missing spec line"))?;
    let tok: Vec<&str> = spec_line.split_whitespace().collect();
    if tok.len() < 4 || tok[0] != "spec" {
        return Err(bad("malformed spec line"));
    }
    let input_dim: usize = tok[1].parse().map_err(|_| bad("bad input dim"))?;
    let output_dim: usize = tok[2].parse().map_err(|_| bad("bad output dim"))?;
    let n_hidden: usize = tok[3].parse().map_err(|_| bad("bad hidden count"))?;
    if tok.len() != 4 + n_hidden {
        return Err(bad("hidden width count mismatch"));
    }
    let hidden: Vec<usize> = tok[4..]
        .iter()
        .map(|t| t.parse::<usize>().map_err(|_| bad("bad hidden width")))
        .collect::<Result<_>>()?;
    let spec = MlpSpec::new(input_dim, hidden, output_dim);
    let dims = spec.layer_dims();
    let mut layers = Vec::with_capacity(dims.len());
    for (i, &(fi, fo)) in dims.iter().enumerate() {
        let wl = it.next().ok_or_else(|| bad("missing weight line"))?;
        let wt: Vec<&str> = wl.split_whitespace().collect();
        if wt.len() != 3 + fi * fo || wt[0] != "layer" || wt[2] != "w" {
            return Err(bad(&format!("malformed weight line for layer {i}")));
        }
        let w = parse_floats(&wt[3..], path)?;
        let bl = it.next().ok_or_else(|| bad("missing bias line"))?;
        let bt: Vec<&str> = bl.split_whitespace().collect();
        if bt.len() != 3 + fo || bt[0] != "layer" || bt[2] != "b" {
            return Err(bad(&format!("malformed bias line for layer {i}")));
        }
        let b = parse_floats(&bt[3..], path)?;
        layers.push(Linear {
            w: Tensor::matrix(fi, fo, w),
            b: Tensor::matrix(1, fo, b),
        });
    }
    Ok(Mlp { spec, layers })
}

pub fn save_mlp(net: &Mlp, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_mlp(&mut buf, net).map_err(|e| Error::io(path.display().to_string(), e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_mlp(path: &Path) -> Result<Mlp> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    read_mlp(&mut BufReader::new(f), path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundle(s: usize) -> ModelBundle {
        ModelBundle::build(BundleConfig::new(3, 10, s).unwrap(), 7)
    }

    #[test]
    fn critic_head_counts_follow_domain_count() {
        let b = bundle(10);
        assert_eq!(b.critic_bt.spec.output_dim, 9);
        assert_eq!(b.critic_cd.spec.output_dim, 10);
        let phi = b.embed(&Tensor::matrix(4, 3, vec![0.1; 12]));
        assert_eq!(phi.shape(), &[4, 10]);
        let bt = b.critic_eval(&phi, CriticKind::BetweenTreatment);
        assert_eq!(bt.shape(), &[4, 9]);
        let cd = b.critic_eval(&phi, CriticKind::CrossDomain);
        assert_eq!(cd.shape(), &[4, 10]);
    }

    #[test]
    fn same_seed_gives_bitwise_identical_parameters() {
        let a = bundle(5);
        let b = bundle(5);
        for (pa, pb) in a.embedder.params().iter().zip(b.embedder.params()) {
            assert_eq!(pa.data(), pb.data());
        }
        for (pa, pb) in a.critic_cd.params().iter().zip(b.critic_cd.params()) {
            assert_eq!(pa.data(), pb.data());
        }
    }

    #[test]
    fn embedder_parameter_count_matches_arithmetic() {
        // 3 -> 50 -> 50 -> 10: (3*50+50) + (50*50+50) + (50*10+10) = 3260
        let b = bundle(4);
        assert_eq!(b.embedder.param_count(), 3260);
    }

    #[test]
    fn zeroed_final_layer_predicts_zero() {
        let mut b = bundle(4);
        let last = b.head1.layers.len() - 1;
        b.head1.layers[last].w = Tensor::zeros(b.head1.layers[last].w.shape().to_vec());
        b.head1.layers[last].b = Tensor::zeros(b.head1.layers[last].b.shape().to_vec());
        let phi = b.embed(&Tensor::matrix(6, 3, vec![0.37; 18]));
        let y = b.predict(&phi, Arm::Treated);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_set_chain_matches_hand_computation() {
        // 1 -> 1 -> 1 net: w1=2, b1=0.5, w2=-1, b2=0.25 on x=0.3
        // hidden: elu(2*0.3+0.5)=1.1 (positive branch), out: -1*1.1+0.25
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = Mlp::new(MlpSpec::new(1, vec![1], 1), &mut rng);
        net.layers[0].w = Tensor::matrix(1, 1, vec![2.0]);
        net.layers[0].b = Tensor::matrix(1, 1, vec![0.5]);
        net.layers[1].w = Tensor::matrix(1, 1, vec![-1.0]);
        net.layers[1].b = Tensor::matrix(1, 1, vec![0.25]);
        let out = net.forward(&Tensor::matrix(1, 1, vec![0.3]));
        assert!((out.item() - (-1.1 + 0.25)).abs() < 1e-15);

        // Negative branch: x=-1 gives elu(-1.5)=exp(-1.5)-1
        let out2 = net.forward(&Tensor::matrix(1, 1, vec![-1.0]));
        let expect = -((-1.5f64).exp() - 1.0) + 0.25;
        assert!((out2.item() - expect).abs() < 1e-15);
    }

    #[test]
    fn perturbing_one_head_leaves_the_other_unchanged() {
        let mut b = bundle(6);
        let x = Tensor::matrix(5, 3, (0..15).map(|i| i as f64 * 0.1).collect());
        let phi = b.embed(&x);
        let before = b.predict(&phi, Arm::Treated);
        b.head0.layers[0].w.data_mut()[0] += 10.0;
        let after = b.predict(&phi, Arm::Treated);
        assert_eq!(before.data(), after.data());
    }

    #[test]
    fn tape_forward_matches_numeric_forward() {
        let b = bundle(4);
        let x = Tensor::matrix(3, 3, (0..9).map(|i| (i as f64 - 4.0) * 0.3).collect());
        let numeric = b.embed(&x);
        let mut tape = Tape::new();
        let vars = b.embedder.insert(&mut tape, true);
        let xn = tape.constant(x);
        let out = b.embedder.forward_tape(&mut tape, &vars, xn);
        assert_eq!(tape.value(out).data(), numeric.data());
    }

    #[test]
    fn mlp_checkpoint_round_trip_is_bit_exact() {
        let b = bundle(7);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.txt");
        save_mlp(&b.embedder, &path).unwrap();
        let loaded = load_mlp(&path).unwrap();
        assert_eq!(loaded.spec, b.embedder.spec);
        for (a, l) in b.embedder.params().iter().zip(loaded.params()) {
            assert_eq!(a.data(), l.data());
        }
        // Saving the loaded net reproduces the file byte for byte.
        let path2 = dir.path().join("net2.txt");
        save_mlp(&loaded, &path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn corrupt_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.txt");
        std::fs::write(&path, "mdcn-net v1\nspec 2 1 0\nlayer 0 w 1.0 oops\nlayer 0 b 0.0\n")
            .unwrap();
        assert!(load_mlp(&path).is_err());
    }

    #[test]
    fn standardizer_centers_and_scales() {
        let rows: Vec<Vec<f64>> = vec![vec![1.0, 10.0], vec![3.0, 10.0]];
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let st = Standardizer::fit_rows(&refs);
        assert_eq!(st.mean, vec![2.0, 10.0]);
        // Zero-variance features fall back to unit scale.
        assert_eq!(st.std[1], 1.0);
        let z = st.apply(&refs);
        assert_eq!(z.at(0, 0), -1.0);
        assert_eq!(z.at(1, 0), 1.0);
        assert_eq!(z.at(0, 1), 0.0);
    }
}
