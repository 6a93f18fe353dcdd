//! Low-rank adapters, the two-branch adapted layer with its per-input mixer,
//! and trainable-parameter accounting.
//!
//! An adapted layer computes, for every input row `x`,
//!
//! ```text
//! y = W0·x + α(x)·s·B_L·A_L·x + (1 − α(x))·s·B_R·A_R·x
//! ```
//!
//! where `s` is the adapter scale (`lora_alpha / r`) and `(α, 1 − α)` is the
//! softmax of the mixer logits `G·x`. Gating is evaluated independently for
//! each row, so for sequence inputs every token gets its own weight.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::federation::Strategy;
use crate::matrix::{linear_forward, Matrix};
use crate::nn::{Grads, Model, ParamRef, Role, RoleSet};

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    /// `r × d`.
    pub a: Matrix,
    /// `l × r`.
    pub b: Matrix,
    pub scale: f64,
}

impl LoraAdapter {
    pub fn zeros(d: usize, l: usize, r: usize, scale: f64) -> Self {
        LoraAdapter {
            a: Matrix::zeros(r, d),
            b: Matrix::zeros(l, r),
            scale,
        }
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.a.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.b.rows()
    }

    /// Effective weight update `s·B·A` (`l × d`).
    pub fn delta(&self) -> Matrix {
        self.b
            .matmul(&self.a)
            .expect("adapter shapes are consistent")
            .scale(self.scale)
    }

    /// Returns `(x·Aᵀ, x·Aᵀ·Bᵀ)`, the rank-space activation and the unscaled
    /// branch output.
    fn project(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        let h = x.matmul_t(&self.a)?;
        let u = h.matmul_t(&self.b)?;
        Ok((h, u))
    }
}

/// Gaussian `A` with standard deviation `1/√r`, zero `B`.
pub fn lora_init(d: usize, l: usize, r: usize, scale: f64, seed: u64) -> Result<LoraAdapter> {
    lora_init_with(d, l, r, scale, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn lora_init_with<R: Rng + ?Sized>(
    d: usize,
    l: usize,
    r: usize,
    scale: f64,
    rng: &mut R,
) -> Result<LoraAdapter> {
    if r == 0 || r > d.min(l) {
        return Err(Error::InvalidRank { rank: r, d, l });
    }
    Ok(LoraAdapter {
        a: Matrix::random_normal(r, d, 1.0 / (r as f64).sqrt(), rng),
        b: Matrix::zeros(l, r),
        scale,
    })
}

/// Per-client gating matrix `G` (`2 × d`).
#[derive(Debug, Clone, PartialEq)]
pub struct Mixer {
    pub g: Matrix,
    pub owner: usize,
}

impl Mixer {
    /// Zero gate: both branches start at weight 0.5.
    pub fn zeros(d: usize, owner: usize) -> Self {
        Mixer {
            g: Matrix::zeros(2, d),
            owner,
        }
    }
}

/// `(α, 1 − α) = softmax(G·x)`.
pub fn mixer_weights(mixer: &Mixer, x: &[f64]) -> (f64, f64) {
    gate(&mixer.g, x)
}

fn gate(g: &Matrix, x: &[f64]) -> (f64, f64) {
    let z0: f64 = g.row(0).iter().zip(x).map(|(a, b)| a * b).sum();
    let z1: f64 = g.row(1).iter().zip(x).map(|(a, b)| a * b).sum();
    let m = z0.max(z1);
    let e0 = (z0 - m).exp();
    let e1 = (z1 - m).exp();
    let sum = e0 + e1;
    (e0 / sum, e1 / sum)
}

/// How an adapted layer combines its branches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerMode {
    /// Base weights only.
    Plain,
    /// Base plus the individual adapter.
    Single,
    /// Individual and RoW adapters weighted by the mixer.
    FedAlt,
    /// Individual and RoW adapters with a constant individual weight.
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedLayer {
    pub id: usize,
    /// `l × d`.
    pub base: Matrix,
    pub individual: Option<LoraAdapter>,
    pub row: Option<LoraAdapter>,
    pub mixer: Option<Mixer>,
    pub mode: LayerMode,
    pub trainable: RoleSet,
    /// Inverted-dropout rate on the adapter input path, training only.
    pub dropout: f64,
}

/// Forward activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerCache {
    x: Matrix,
    /// Scaled keep-mask applied to the adapter input, when dropout is active.
    mask: Option<Matrix>,
    individual: Option<(Matrix, Matrix)>,
    row: Option<(Matrix, Matrix)>,
    /// Weight of the individual branch per row.
    alpha: Vec<f64>,
}

impl AdaptedLayer {
    pub fn plain(id: usize, base: Matrix) -> Self {
        AdaptedLayer {
            id,
            base,
            individual: None,
            row: None,
            mixer: None,
            mode: LayerMode::Plain,
            trainable: RoleSet::EMPTY,
            dropout: 0.0,
        }
    }

    pub fn single(id: usize, base: Matrix, individual: LoraAdapter) -> Result<Self> {
        check_adapter(&base, &individual)?;
        Ok(AdaptedLayer {
            id,
            base,
            individual: Some(individual),
            row: None,
            mixer: None,
            mode: LayerMode::Single,
            trainable: RoleSet::of(&[Role::IndividualA, Role::IndividualB]),
            dropout: 0.0,
        })
    }

    pub fn fedalt(
        id: usize,
        base: Matrix,
        individual: LoraAdapter,
        row: LoraAdapter,
        mixer: Mixer,
    ) -> Result<Self> {
        check_adapter(&base, &individual)?;
        check_adapter(&base, &row)?;
        if mixer.g.shape() != (2, base.cols()) {
            return Err(Error::dim("mixer", format!("2x{}", base.cols()), format!("{:?}", mixer.g.shape())));
        }
        Ok(AdaptedLayer {
            id,
            base,
            individual: Some(individual),
            row: Some(row),
            mixer: Some(mixer),
            mode: LayerMode::FedAlt,
            trainable: RoleSet::of(&[Role::IndividualA, Role::IndividualB, Role::Mixer]),
            dropout: 0.0,
        })
    }

    pub fn fixed(id: usize, base: Matrix, individual: LoraAdapter, row: LoraAdapter, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        check_adapter(&base, &individual)?;
        check_adapter(&base, &row)?;
        Ok(AdaptedLayer {
            id,
            base,
            individual: Some(individual),
            row: Some(row),
            mixer: None,
            mode: LayerMode::Fixed(alpha),
            trainable: RoleSet::of(&[Role::IndividualA, Role::IndividualB]),
            dropout: 0.0,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.base.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.base.rows()
    }

    pub fn is_adapted(&self) -> bool {
        self.individual.is_some()
    }

    pub fn param(&self, role: Role) -> Option<&Matrix> {
        match role {
            Role::Base => Some(&self.base),
            Role::IndividualA => self.individual.as_ref().map(|a| &a.a),
            Role::IndividualB => self.individual.as_ref().map(|a| &a.b),
            Role::RowA => self.row.as_ref().map(|a| &a.a),
            Role::RowB => self.row.as_ref().map(|a| &a.b),
            Role::Mixer => self.mixer.as_ref().map(|m| &m.g),
        }
    }

    pub fn param_mut(&mut self, role: Role) -> Option<&mut Matrix> {
        match role {
            Role::Base => Some(&mut self.base),
            Role::IndividualA => self.individual.as_mut().map(|a| &mut a.a),
            Role::IndividualB => self.individual.as_mut().map(|a| &mut a.b),
            Role::RowA => self.row.as_mut().map(|a| &mut a.a),
            Role::RowB => self.row.as_mut().map(|a| &mut a.b),
            Role::Mixer => self.mixer.as_mut().map(|m| &mut m.g),
        }
    }

    /// Roles present in this layer.
    pub fn roles(&self) -> impl Iterator<Item = Role> + '_ {
        Role::ALL.into_iter().filter(|r| self.param(*r).is_some())
    }

    /// Per-row weights `(α, 1 − α)` of the individual and RoW branches.
    fn branch_weights(&self, x: &Matrix) -> Vec<f64> {
        match self.mode {
            LayerMode::Plain => Vec::new(),
            LayerMode::Single => vec![1.0; x.rows()],
            LayerMode::Fixed(alpha) => vec![alpha; x.rows()],
            LayerMode::FedAlt => {
                let g = &self.mixer.as_ref().expect("fedalt layer has a mixer").g;
                (0..x.rows()).map(|i| gate(g, x.row(i)).0).collect()
            }
        }
    }

    /// Forward pass. Dropout applies only when `rng` is given.
    pub fn forward(&self, x: &Matrix, rng: Option<&mut dyn RngCore>) -> Result<(Matrix, LayerCache)> {
        let mut y = linear_forward(&self.base, x)?;
        let alpha = self.branch_weights(x);

        let mask = match rng {
            Some(rng) if self.dropout > 0.0 && self.is_adapted() => {
                let keep = 1.0 - self.dropout;
                let mut m = Matrix::zeros(x.rows(), x.cols());
                for v in m.data_mut() {
                    *v = if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 };
                }
                Some(m)
            }
            _ => None,
        };
        let dropped;
        let adapter_in = match &mask {
            Some(m) => {
                dropped = x.hadamard(m)?;
                &dropped
            }
            None => x,
        };

        let individual = match &self.individual {
            Some(ad) => {
                let (h, u) = ad.project(adapter_in)?;
                for i in 0..y.rows() {
                    let c = alpha[i] * ad.scale;
                    for (yv, uv) in y.row_mut(i).iter_mut().zip(u.row(i)) {
                        *yv += c * uv;
                    }
                }
                Some((h, u))
            }
            None => None,
        };
        let row = match (&self.row, self.mode) {
            (Some(ad), LayerMode::FedAlt | LayerMode::Fixed(_)) => {
                let (h, u) = ad.project(adapter_in)?;
                for i in 0..y.rows() {
                    let c = (1.0 - alpha[i]) * ad.scale;
                    for (yv, uv) in y.row_mut(i).iter_mut().zip(u.row(i)) {
                        *yv += c * uv;
                    }
                }
                Some((h, u))
            }
            _ => None,
        };

        if !y.is_finite() {
            return Err(Error::NonFinite { layer: self.id });
        }
        Ok((
            y,
            LayerCache {
                x: x.clone(),
                mask,
                individual,
                row,
                alpha,
            },
        ))
    }

    /// Backward pass. Gradients of trainable roles are accumulated into
    /// `grads`; the input gradient is returned when `need_dx` is set.
    pub fn backward(&self, cache: &LayerCache, dy: &Matrix, grads: &mut Grads, need_dx: bool) -> Result<Option<Matrix>> {
        let x = &cache.x;
        if self.trainable.contains(Role::Base) {
            accumulate(grads, ParamRef::new(self.id, Role::Base), dy.t_matmul(x)?)?;
        }
        let mut dx = if need_dx { Some(dy.matmul(&self.base)?) } else { None };

        let adapter_in = match &cache.mask {
            Some(m) => x.hadamard(m)?,
            None => x.clone(),
        };
        let mut d_adapter_in = Matrix::zeros(x.rows(), x.cols());
        let mut any_adapter_path = false;

        let branches = [
            (&self.individual, &cache.individual, Role::IndividualA, Role::IndividualB, true),
            (&self.row, &cache.row, Role::RowA, Role::RowB, false),
        ];
        for (adapter, acts, role_a, role_b, is_individual) in branches {
            let (Some(ad), Some((h, _))) = (adapter, acts) else {
                continue;
            };
            let coeffs: Vec<f64> = cache
                .alpha
                .iter()
                .map(|a| if is_individual { a * ad.scale } else { (1.0 - a) * ad.scale })
                .collect();
            let du = dy.scale_rows(&coeffs);
            let train_a = self.trainable.contains(role_a);
            let train_b = self.trainable.contains(role_b);
            if train_b {
                accumulate(grads, ParamRef::new(self.id, role_b), du.t_matmul(h)?)?;
            }
            if train_a || need_dx {
                let dh = du.matmul(&ad.b)?;
                if train_a {
                    accumulate(grads, ParamRef::new(self.id, role_a), dh.t_matmul(&adapter_in)?)?;
                }
                if need_dx {
                    d_adapter_in.add_assign(&dh.matmul(&ad.a)?)?;
                    any_adapter_path = true;
                }
            }
        }

        if self.mode == LayerMode::FedAlt {
            let (Some(ind), Some(row)) = (&self.individual, &self.row) else {
                unreachable!("fedalt layer has both adapters");
            };
            let (Some((_, u_l)), Some((_, u_r))) = (&cache.individual, &cache.row) else {
                unreachable!("fedalt cache has both branches");
            };
            let mut dz = Matrix::zeros(x.rows(), 2);
            for i in 0..x.rows() {
                let d_alpha: f64 = dy
                    .row(i)
                    .iter()
                    .zip(u_l.row(i).iter().zip(u_r.row(i)))
                    .map(|(g, (l, r))| g * (ind.scale * l - row.scale * r))
                    .sum();
                let a = cache.alpha[i];
                let dz0 = d_alpha * a * (1.0 - a);
                dz[(i, 0)] = dz0;
                dz[(i, 1)] = -dz0;
            }
            if self.trainable.contains(Role::Mixer) {
                accumulate(grads, ParamRef::new(self.id, Role::Mixer), dz.t_matmul(x)?)?;
            }
            if let Some(dx) = dx.as_mut() {
                let g = &self.mixer.as_ref().expect("fedalt layer has a mixer").g;
                dx.add_assign(&dz.matmul(g)?)?;
            }
        }

        if let Some(dx) = dx.as_mut() {
            if any_adapter_path {
                match &cache.mask {
                    Some(m) => dx.add_assign(&d_adapter_in.hadamard(m)?)?,
                    None => dx.add_assign(&d_adapter_in)?,
                }
            }
        }
        Ok(dx)
    }
}

pub(crate) fn accumulate(grads: &mut Grads, key: ParamRef, g: Matrix) -> Result<()> {
    match grads.get_mut(&key) {
        Some(existing) => existing.add_assign(&g),
        None => {
            grads.insert(key, g);
            Ok(())
        }
    }
}

fn check_adapter(base: &Matrix, adapter: &LoraAdapter) -> Result<()> {
    let (l, d) = base.shape();
    if adapter.in_dim() != d || adapter.out_dim() != l || adapter.b.cols() != adapter.rank() {
        return Err(Error::dim(
            "adapter",
            format!("A r×{d}, B {l}×r"),
            format!("A {:?}, B {:?}", adapter.a.shape(), adapter.b.shape()),
        ));
    }
    Ok(())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidAlpha(alpha));
    }
    Ok(())
}

/// Mixer-gated two-branch forward (inference, no dropout).
pub fn fedalt_forward(layer: &AdaptedLayer, x: &Matrix) -> Result<Matrix> {
    if layer.mode != LayerMode::FedAlt {
        return Err(Error::config("mode", format!("fedalt_forward needs a fedalt layer, got {:?}", layer.mode)));
    }
    Ok(layer.forward(x, None)?.0)
}

/// The two-branch composition with a constant individual weight `alpha`
/// in place of the mixer.
pub fn fixed_weight_forward(layer: &AdaptedLayer, x: &Matrix, alpha: f64) -> Result<Matrix> {
    check_alpha(alpha)?;
    let (Some(individual), Some(row)) = (&layer.individual, &layer.row) else {
        return Err(Error::config("mode", "fixed-weight forward needs both adapters"));
    };
    let fixed = AdaptedLayer::fixed(layer.id, layer.base.clone(), individual.clone(), row.clone(), alpha)?;
    Ok(fixed.forward(x, None)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamCount {
    pub trainable: usize,
    pub total: usize,
    pub ratio: f64,
}

/// Trainable parameters a client optimizes under `strategy`, against the
/// model's total (frozen base weights plus the trainable set).
///
/// Per adapted layer with input width `d`, output width `l` and rank `r`:
/// individual A is `r·d`, B is `l·r`, the RoW pair the same again, and the
/// mixer `2·d`.
pub fn count_params(model: &Model, strategy: &Strategy) -> ParamCount {
    let roles = strategy.trainable_roles();
    let mut base = 0;
    let mut trainable = 0;
    for layer in model.layers() {
        let (l, d) = layer.base.shape();
        base += l * d;
        let Some(ind) = &layer.individual else {
            continue;
        };
        let r = strategy.rank_override().unwrap_or(ind.rank());
        for role in roles.iter() {
            trainable += match role {
                Role::Base => 0,
                Role::IndividualA | Role::RowA => r * d,
                Role::IndividualB | Role::RowB => l * r,
                Role::Mixer => 2 * d,
            };
        }
    }
    let total = base + trainable;
    ParamCount {
        trainable,
        total,
        ratio: if total == 0 { 0.0 } else { trainable as f64 / total as f64 },
    }
}
