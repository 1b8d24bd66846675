use crate::error::{shape_err, Error, Result};
use crate::field::{
    self, compose_affine_with_flow_backward, resample_flow_backward, sample::Stencil,
    warp_flow_backward, warp_volume_backward, AffineTransform, FlowField, GridSpec, RegionBox,
    Volume,
};
use crate::losses::{self, EntropyConfig};

use super::params::{GradientSet, ParameterSet, Value};

/// Handle to a recorded node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Tape handles of the parameter blocks, by name.
#[derive(Clone, Debug)]
pub struct Bindings {
    vars: Vec<(String, Var)>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Config(format!("pipeline uses unregistered parameter `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.iter().map(|(n, _)| n.as_str())
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    AffineToFlow(Var),
    Resample(Var),
    Warp { image: Var, flow: Var },
    WarpFlow { source: Var, by: Var },
    AddFlows(Var, Var),
    ComposeAffine { affine: Var, flow: Var },
    Correlation(Var, Var),
    L2(Var, Var),
    MutualInformation(Var, Var, EntropyConfig),
    TotalVariation(Var),
    Orthogonality(Var),
    Determinant(Var),
    RegionMeanSq(Var, RegionBox),
    WeightedSum(Vec<(f64, Var)>),
    SquaredNorm(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::AffineToFlow(_) => "affine_to_flow",
            Op::Resample(_) => "resample_flow",
            Op::Warp { .. } => "warp_volume",
            Op::WarpFlow { .. } => "warp_flow",
            Op::AddFlows(..) => "add_flows",
            Op::ComposeAffine { .. } => "compose_affine_with_flow",
            Op::Correlation(..) => "correlation_loss",
            Op::L2(..) => "l2_loss",
            Op::MutualInformation(..) => "mutual_information_loss",
            Op::TotalVariation(_) => "total_variation_loss",
            Op::Orthogonality(_) => "orthogonality_loss",
            Op::Determinant(_) => "determinant_loss",
            Op::RegionMeanSq(..) => "region_mean_sq",
            Op::WeightedSum(_) => "weighted_sum",
            Op::SquaredNorm(_) => "squared_norm",
        }
    }
}

struct Node {
    value: Value,
    op: Op,
    needs_grad: bool,
}

/// Deliberate adjoint corruption, used to show that gradient checks catch
/// a broken backward pass.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Fault {
    /// Scales the flow adjoint of every volume warp.
    ScaleWarpFlowAdjoint(f64),
}

/// Records primitive applications and replays their adjoints in reverse.
///
/// A tape belongs to one evaluation; it is not shared across threads.
pub struct Tape {
    nodes: Vec<Node>,
    track_cells: bool,
    cell_signature: u64,
    fault: Option<Fault>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn mix(h: u64, x: u64) -> u64 {
    (h ^ x).wrapping_mul(0x9e3779b97f4a7c15).rotate_left(23)
}

impl Tape {
    pub fn new() -> Self {
        let fault = if cfg!(feature = "fault-injection") {
            Some(Fault::ScaleWarpFlowAdjoint(1.05))
        } else {
            None
        };
        Self { nodes: Vec::new(), track_cells: false, cell_signature: 0, fault }
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Option<Fault>) {
        self.fault = fault;
    }

    /// Folds the interpolation cell and clamp state of every warp sample
    /// into [`Tape::cell_signature`].
    pub fn track_cells(&mut self, on: bool) {
        self.track_cells = on;
    }

    pub fn cell_signature(&self) -> u64 {
        self.cell_signature
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers every block of `params` as a differentiable leaf.
    pub fn bind(&mut self, params: &ParameterSet) -> Bindings {
        let vars = params
            .blocks()
            .map(|(name, value)| (name.to_string(), self.leaf(value.clone(), true)))
            .collect();
        Bindings { vars }
    }

    fn leaf(&mut self, value: Value, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Value) -> Var {
        self.leaf(value, false)
    }

    pub fn constant_volume(&mut self, v: &Volume) -> Var {
        self.constant(Value::Volume(v.clone()))
    }

    pub fn constant_flow(&mut self, f: &FlowField) -> Var {
        self.constant(Value::Flow(f.clone()))
    }

    pub fn value(&self, v: Var) -> &Value {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        self.value(v).as_scalar().ok_or_else(|| self.kind_err(v, "scalar"))
    }

    pub fn volume(&self, v: Var) -> Result<&Volume> {
        self.value(v).as_volume().ok_or_else(|| self.kind_err(v, "volume"))
    }

    pub fn flow(&self, v: Var) -> Result<&FlowField> {
        self.value(v).as_flow().ok_or_else(|| self.kind_err(v, "flow"))
    }

    pub fn affine(&self, v: Var) -> Result<&AffineTransform> {
        self.value(v).as_affine().ok_or_else(|| self.kind_err(v, "affine"))
    }

    fn kind_err(&self, v: Var, want: &str) -> Error {
        shape_err(format!("expected a {want} operand, got {}", self.value(v).kind()))
    }

    fn push(&mut self, value: Value, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric { primitive: op.name() });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn note_cells(&mut self, grid: &GridSpec, by: &FlowField) {
        if !self.track_cells {
            return;
        }
        let mut h = self.cell_signature;
        for (i, d) in by.data().iter().enumerate() {
            let p = grid.position(i);
            let s = Stencil::new(grid, [p[0] + d[0], p[1] + d[1], p[2] + d[2]]);
            h = mix(h, s.signature());
        }
        self.cell_signature = h;
    }

    pub fn affine_to_flow(&mut self, t: Var, grid: GridSpec) -> Result<Var> {
        let f = field::affine_to_flow(self.affine(t)?, grid);
        self.push(Value::Flow(f), Op::AffineToFlow(t), &[t])
    }

    pub fn resample(&mut self, f: Var, target: GridSpec) -> Result<Var> {
        let out = field::resample_flow(self.flow(f)?, target);
        self.push(Value::Flow(out), Op::Resample(f), &[f])
    }

    pub fn warp(&mut self, image: Var, flow: Var) -> Result<Var> {
        let out = field::warp_volume(self.volume(image)?, self.flow(flow)?)?;
        if self.track_cells {
            let by = self.flow(flow)?.clone();
            self.note_cells(&by.grid(), &by);
        }
        self.push(Value::Volume(out), Op::Warp { image, flow }, &[image, flow])
    }

    pub fn warp_flow(&mut self, source: Var, by: Var) -> Result<Var> {
        let out = field::warp_flow(self.flow(source)?, self.flow(by)?)?;
        if self.track_cells {
            let b = self.flow(by)?.clone();
            self.note_cells(&b.grid(), &b);
        }
        self.push(Value::Flow(out), Op::WarpFlow { source, by }, &[source, by])
    }

    pub fn add_flows(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.flow(a)?.add(self.flow(b)?)?;
        self.push(Value::Flow(out), Op::AddFlows(a, b), &[a, b])
    }

    /// `g1 * g2 = g2 + g1 o g2`.
    pub fn compose_flows(&mut self, g1: Var, g2: Var) -> Result<Var> {
        let w = self.warp_flow(g1, g2)?;
        self.add_flows(w, g2)
    }

    pub fn compose_affine_with_flow(&mut self, affine: Var, flow: Var) -> Result<Var> {
        let out = field::compose_affine_with_flow(self.affine(affine)?, self.flow(flow)?);
        self.push(Value::Flow(out), Op::ComposeAffine { affine, flow }, &[affine, flow])
    }

    pub fn correlation_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let l = losses::correlation_loss(self.volume(a)?, self.volume(b)?)?;
        self.push(Value::Scalar(l), Op::Correlation(a, b), &[a, b])
    }

    pub fn l2_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let l = losses::l2_loss(self.volume(a)?, self.volume(b)?)?;
        self.push(Value::Scalar(l), Op::L2(a, b), &[a, b])
    }

    /// Laplacian-kernel mutual information loss (differentiable).
    pub fn mutual_information_loss(&mut self, a: Var, b: Var, cfg: EntropyConfig) -> Result<Var> {
        let l = losses::mutual_information_loss(
            self.volume(a)?,
            self.volume(b)?,
            &cfg,
            losses::Kernel::Laplacian,
        )?;
        self.push(Value::Scalar(l), Op::MutualInformation(a, b, cfg), &[a, b])
    }

    pub fn total_variation_loss(&mut self, f: Var) -> Result<Var> {
        let l = losses::total_variation_loss(self.flow(f)?);
        self.push(Value::Scalar(l), Op::TotalVariation(f), &[f])
    }

    pub fn orthogonality_loss(&mut self, t: Var) -> Result<Var> {
        let l = losses::orthogonality_loss(self.affine(t)?)?;
        self.push(Value::Scalar(l), Op::Orthogonality(t), &[t])
    }

    pub fn determinant_loss(&mut self, t: Var) -> Result<Var> {
        let l = losses::determinant_loss(self.affine(t)?);
        self.push(Value::Scalar(l), Op::Determinant(t), &[t])
    }

    /// Mean squared displacement magnitude over `region`.
    pub fn region_mean_sq(&mut self, f: Var, region: RegionBox) -> Result<Var> {
        let flow = self.flow(f)?;
        region.check(&flow.grid())?;
        let l = losses::region_mean_sq(flow, &region);
        self.push(Value::Scalar(l), Op::RegionMeanSq(f, region), &[f])
    }

    /// Invertibility loss of a flow pair restricted to `region`.
    pub fn invertibility_loss(&mut self, f12: Var, f21: Var, region: RegionBox) -> Result<Var> {
        let a = self.compose_flows(f12, f21)?;
        let b = self.compose_flows(f21, f12)?;
        let la = self.region_mean_sq(a, region)?;
        let lb = self.region_mean_sq(b, region)?;
        self.weighted_sum(&[(1.0, la), (1.0, lb)])
    }

    /// `sum_k w_k * x_k` over scalar nodes, accumulated left to right.
    pub fn weighted_sum(&mut self, terms: &[(f64, Var)]) -> Result<Var> {
        let mut s = 0.0;
        for &(w, v) in terms {
            s += w * self.scalar(v)?;
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.1).collect();
        self.push(Value::Scalar(s), Op::WeightedSum(terms.to_vec()), &inputs)
    }

    /// Sum of squares of every entry of `x`.
    pub fn squared_norm(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = (0..v.len()).map(|i| v.get(i) * v.get(i)).sum();
        self.push(Value::Scalar(s), Op::SquaredNorm(x), &[x])
    }

    /// Reverse accumulation from scalar `loss`; returns the adjoints of the
    /// bound parameter blocks (zero for blocks `loss` does not reach).
    pub fn backward(&self, loss: Var, bindings: &Bindings) -> Result<GradientSet> {
        self.scalar(loss)?;
        let mut adj: Vec<Option<Value>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(Value::Scalar(1.0));

        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                adj[id] = Some(g);
                continue;
            }
            for (input, grad) in self.node_adjoints(node, &g)? {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                if !grad.is_finite() {
                    return Err(Error::Numeric { primitive: node.op.name() });
                }
                match &mut adj[input.0] {
                    Some(acc) => acc.add_scaled(&grad, 1.0)?,
                    slot @ None => *slot = Some(grad),
                }
            }
        }

        let blocks = bindings
            .vars
            .iter()
            .map(|(name, var)| {
                let g = adj[var.0].take().unwrap_or_else(|| self.value(*var).zeros_like());
                (name.clone(), g)
            })
            .collect();
        Ok(GradientSet::new(blocks))
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn node_adjoints(&self, node: &Node, g: &Value) -> Result<Vec<(Var, Value)>> {
        let upstream_scalar = || g.as_scalar().ok_or_else(|| shape_err("scalar adjoint expected"));
        let upstream_flow = || g.as_flow().ok_or_else(|| shape_err("flow adjoint expected"));
        let upstream_volume = || g.as_volume().ok_or_else(|| shape_err("volume adjoint expected"));

        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::AffineToFlow(t) => {
                let u = upstream_flow()?;
                let grid = u.grid();
                let mut ga = [[0.0; 3]; 3];
                let mut gb = [0.0; 3];
                let data = u.data();
                field::for_each_voxel(&grid, |i, x| {
                    let d = data[i];
                    for r in 0..3 {
                        for c in 0..3 {
                            ga[r][c] += d[r] * x[c];
                        }
                        gb[r] += d[r];
                    }
                });
                vec![(*t, Value::Affine(AffineTransform { matrix: ga, translation: gb }))]
            }
            Op::Resample(f) => {
                let u = upstream_flow()?;
                let src = self.flow(*f)?.grid();
                let g = resample_flow_backward(src, u.grid(), u.data());
                vec![(*f, Value::Flow(FlowField::from_raw(src, g)))]
            }
            Op::Warp { image, flow } => {
                let u = upstream_volume()?;
                let (v, f) = (self.volume(*image)?, self.flow(*flow)?);
                let (gi, gf) =
                    warp_volume_backward(v, f, u.data(), self.wants(*image), self.wants(*flow));
                let mut out = Vec::new();
                if let Some(gi) = gi {
                    out.push((*image, Value::Volume(Volume::from_raw(v.grid(), gi))));
                }
                if let Some(mut gf) = gf {
                    if let Some(Fault::ScaleWarpFlowAdjoint(s)) = self.fault {
                        gf.iter_mut().flatten().for_each(|c| *c *= s);
                    }
                    out.push((*flow, Value::Flow(FlowField::from_raw(f.grid(), gf))));
                }
                out
            }
            Op::WarpFlow { source, by } => {
                let u = upstream_flow()?;
                let (s, b) = (self.flow(*source)?, self.flow(*by)?);
                let (gs, gb) =
                    warp_flow_backward(s, b, u.data(), self.wants(*source), self.wants(*by));
                let mut out = Vec::new();
                if let Some(gs) = gs {
                    out.push((*source, Value::Flow(FlowField::from_raw(s.grid(), gs))));
                }
                if let Some(gb) = gb {
                    out.push((*by, Value::Flow(FlowField::from_raw(b.grid(), gb))));
                }
                out
            }
            Op::AddFlows(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::ComposeAffine { affine, flow } => {
                let u = upstream_flow()?;
                let (t, f) = (self.affine(*affine)?, self.flow(*flow)?);
                let (ga, gf) = compose_affine_with_flow_backward(t, f, u.data());
                vec![
                    (*affine, Value::Affine(ga)),
                    (*flow, Value::Flow(FlowField::from_raw(f.grid(), gf))),
                ]
            }
            Op::Correlation(a, b) => {
                let u = upstream_scalar()?;
                let (va, vb) = (self.volume(*a)?, self.volume(*b)?);
                let (ga, gb) = losses::correlation_backward(va, vb, u);
                vec![
                    (*a, Value::Volume(Volume::from_raw(va.grid(), ga))),
                    (*b, Value::Volume(Volume::from_raw(vb.grid(), gb))),
                ]
            }
            Op::L2(a, b) => {
                let u = upstream_scalar()?;
                let (va, vb) = (self.volume(*a)?, self.volume(*b)?);
                let (ga, gb) = losses::l2_backward(va, vb, u);
                vec![
                    (*a, Value::Volume(Volume::from_raw(va.grid(), ga))),
                    (*b, Value::Volume(Volume::from_raw(vb.grid(), gb))),
                ]
            }
            Op::MutualInformation(a, b, cfg) => {
                let u = upstream_scalar()?;
                let (va, vb) = (self.volume(*a)?, self.volume(*b)?);
                let (ga, gb) = losses::mutual_information_backward(va, vb, cfg, u);
                vec![
                    (*a, Value::Volume(Volume::from_raw(va.grid(), ga))),
                    (*b, Value::Volume(Volume::from_raw(vb.grid(), gb))),
                ]
            }
            Op::TotalVariation(f) => {
                let u = upstream_scalar()?;
                let flow = self.flow(*f)?;
                let gf = losses::total_variation_backward(flow, u);
                vec![(*f, Value::Flow(FlowField::from_raw(flow.grid(), gf)))]
            }
            Op::Orthogonality(t) => {
                let u = upstream_scalar()?;
                let m = losses::orthogonality_backward(self.affine(*t)?, u);
                vec![(*t, Value::Affine(AffineTransform { matrix: m, translation: [0.0; 3] }))]
            }
            Op::Determinant(t) => {
                let u = upstream_scalar()?;
                let m = losses::determinant_backward(self.affine(*t)?, u);
                vec![(*t, Value::Affine(AffineTransform { matrix: m, translation: [0.0; 3] }))]
            }
            Op::RegionMeanSq(f, region) => {
                let u = upstream_scalar()?;
                let flow = self.flow(*f)?;
                let gf = losses::region_mean_sq_backward(flow, region, u);
                vec![(*f, Value::Flow(FlowField::from_raw(flow.grid(), gf)))]
            }
            Op::WeightedSum(terms) => {
                let u = upstream_scalar()?;
                terms.iter().map(|&(w, v)| (v, Value::Scalar(w * u))).collect()
            }
            Op::SquaredNorm(x) => {
                let u = upstream_scalar()?;
                let v = self.value(*x);
                let mut gv = v.zeros_like();
                for i in 0..v.len() {
                    gv.set(i, 2.0 * u * v.get(i));
                }
                vec![(*x, gv)]
            }
        };
        Ok(out)
    }
}
