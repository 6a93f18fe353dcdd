//! Payload schema and server-side aggregation.

use std::collections::BTreeMap;

use crate::codec::Container;
use crate::error::{Error, Result};
use crate::federation::Strategy;
use crate::matrix::Matrix;
use crate::nn::{ParamRef, Role, RoleSet};

/// Per-layer `(A, B)` pairs.
pub type AdapterPairs = BTreeMap<usize, (Matrix, Matrix)>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PayloadKind {
    Upload,
    Broadcast,
}

impl PayloadKind {
    fn tag(self) -> &'static str {
        match self {
            PayloadKind::Upload => "upload",
            PayloadKind::Broadcast => "broadcast",
        }
    }
}

/// Matrices exchanged between one client and the server in one round.
#[derive(Debug, Clone, PartialEq)]
pub struct Payload {
    pub kind: PayloadKind,
    pub strategy: Strategy,
    pub client: usize,
    pub round: usize,
    /// Number of clients in the federation.
    pub participants: usize,
    pub matrices: BTreeMap<ParamRef, Matrix>,
}

impl Payload {
    fn allowed_roles(&self) -> RoleSet {
        match self.kind {
            PayloadKind::Upload => self.strategy.upload_roles(),
            PayloadKind::Broadcast => self.strategy.broadcast_roles(),
        }
    }

    /// Every layer carries exactly the strategy's role set for this kind.
    pub fn validate(&self) -> Result<()> {
        let allowed = self.allowed_roles();
        let mut per_layer: BTreeMap<usize, RoleSet> = BTreeMap::new();
        for p in self.matrices.keys() {
            if !allowed.contains(p.role) {
                return Err(Error::Payload(format!(
                    "{} role {} not allowed in a {} {} payload",
                    p,
                    p.role,
                    self.strategy,
                    self.kind.tag()
                )));
            }
            per_layer.entry(p.layer).or_default().insert(p.role);
        }
        for (layer, roles) in per_layer {
            if roles != allowed {
                return Err(Error::Payload(format!("layer {layer} is missing roles of the {} schema", self.strategy)));
            }
        }
        Ok(())
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(self.kind.tag(), self.client, self.round);
        c.meta.insert("strategy".into(), self.strategy.to_string());
        c.meta.insert("participants".into(), self.participants.to_string());
        for (p, m) in &self.matrices {
            c.push(p.layer, p.role.tag(), m.clone());
        }
        c
    }

    /// Decodes and schema-checks a payload received over the wire.
    pub fn from_container(c: &Container, kind: PayloadKind, strategy: Strategy) -> Result<Self> {
        if c.kind != kind.tag() {
            return Err(Error::Payload(format!("expected a {} payload, got `{}`", kind.tag(), c.kind)));
        }
        let tag = c.meta.get("strategy").ok_or_else(|| Error::Payload("missing strategy".into()))?;
        let sent: Strategy = tag.parse()?;
        if sent != strategy {
            return Err(Error::Payload(format!("strategy mismatch: expected {strategy}, got {sent}")));
        }
        let participants = c
            .meta
            .get("participants")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Payload("missing participant count".into()))?;
        let mut matrices = BTreeMap::new();
        for e in &c.entries {
            let role: Role = e.role.parse()?;
            if matrices.insert(ParamRef::new(e.layer, role), e.matrix.clone()).is_some() {
                return Err(Error::Payload(format!("duplicate entry layer{}:{}", e.layer, e.role)));
            }
        }
        let payload = Payload {
            kind,
            strategy,
            client: c.client,
            round: c.round,
            participants,
            matrices,
        };
        payload.validate()?;
        Ok(payload)
    }

    /// Wire round trip through the text codec.
    pub fn transmit(&self) -> Result<Payload> {
        let text = self.to_container().encode();
        Payload::from_container(&Container::decode(&text)?, self.kind, self.strategy)
    }

    fn pairs(&self, role_a: Role, role_b: Role) -> AdapterPairs {
        let mut out = AdapterPairs::new();
        for (p, m) in &self.matrices {
            if p.role == role_a {
                let b = self.matrices.get(&ParamRef::new(p.layer, role_b));
                if let Some(b) = b {
                    out.insert(p.layer, (m.clone(), b.clone()));
                }
            }
        }
        out
    }
}

/// Running mean, so identical inputs reproduce themselves bit-exactly.
fn mean<'a>(items: impl Iterator<Item = &'a Matrix>) -> Result<Option<Matrix>> {
    let mut acc: Option<Matrix> = None;
    for (i, m) in items.enumerate() {
        match acc.as_mut() {
            None => acc = Some(m.clone()),
            Some(a) => {
                if a.shape() != m.shape() {
                    return Err(Error::dim("aggregation", format!("{:?}", a.shape()), format!("{:?}", m.shape())));
                }
                let w = 1.0 / (i + 1) as f64;
                for (av, mv) in a.data_mut().iter_mut().zip(m.data()) {
                    *av += (mv - *av) * w;
                }
            }
        }
    }
    Ok(acc)
}

fn check_uploads(uploads: &BTreeMap<usize, AdapterPairs>, k: usize) -> Result<()> {
    if uploads.len() < 2 {
        return Err(Error::RowUndefined(uploads.len()));
    }
    let own = uploads.get(&k).ok_or(Error::MissingUpload(k))?;
    for (client, pairs) in uploads {
        if pairs.len() != own.len() || !pairs.keys().eq(own.keys()) {
            return Err(Error::Payload(format!("client {client} uploaded a different layer set")));
        }
    }
    Ok(())
}

/// Rest-of-World adapter of client `k`: the mean over every other client.
pub fn compute_row(uploads: &BTreeMap<usize, AdapterPairs>, k: usize) -> Result<AdapterPairs> {
    check_uploads(uploads, k)?;
    let own = &uploads[&k];
    let mut out = AdapterPairs::new();
    for &layer in own.keys() {
        let others = || uploads.iter().filter(|(c, _)| **c != k).map(move |(_, p)| &p[&layer]);
        let a = mean(others().map(|(a, _)| a))?.expect("at least one other client");
        let b = mean(others().map(|(_, b)| b))?.expect("at least one other client");
        out.insert(layer, (a, b));
    }
    Ok(out)
}

/// Same quantity via the global mean: `(K·mean_all − own) / (K − 1)`.
pub fn compute_row_via_global(uploads: &BTreeMap<usize, AdapterPairs>, k: usize) -> Result<AdapterPairs> {
    check_uploads(uploads, k)?;
    let global = global_mean(uploads)?;
    Ok(subtract_self(&global, &uploads[&k], uploads.len()))
}

fn global_mean(uploads: &BTreeMap<usize, AdapterPairs>) -> Result<AdapterPairs> {
    let mut out = AdapterPairs::new();
    let Some(first) = uploads.values().next() else {
        return Ok(out);
    };
    for &layer in first.keys() {
        let a = mean(uploads.values().map(|p| &p[&layer].0))?.expect("nonempty");
        let b = mean(uploads.values().map(|p| &p[&layer].1))?.expect("nonempty");
        out.insert(layer, (a, b));
    }
    Ok(out)
}

/// Client-side half of the global-mean route.
pub fn subtract_self(global: &AdapterPairs, own: &AdapterPairs, participants: usize) -> AdapterPairs {
    let k = participants as f64;
    let inv = 1.0 / (k - 1.0);
    global
        .iter()
        .map(|(&layer, (ga, gb))| {
            let (oa, ob) = &own[&layer];
            let f = |g: &Matrix, o: &Matrix| {
                let mut m = g.scale(k);
                m.axpy(-1.0, o).expect("same shape");
                m.scale(inv)
            };
            (layer, (f(ga, oa), f(gb, ob)))
        })
        .collect()
}

/// Server step: turns one round of uploads into per-client broadcasts.
///
/// `uploads` must hold one payload for every client `0..clients`. Strategies
/// without a server step return no payloads.
pub fn aggregate(strategy: Strategy, uploads: &BTreeMap<usize, Payload>, clients: usize, round: usize) -> Result<BTreeMap<usize, Payload>> {
    if strategy == Strategy::LocalOnly {
        return Ok(BTreeMap::new());
    }
    for k in 0..clients {
        let up = uploads.get(&k).ok_or(Error::MissingUpload(k))?;
        if up.strategy != strategy || up.kind != PayloadKind::Upload {
            return Err(Error::Payload(format!("client {k} sent a payload for another strategy")));
        }
        up.validate()?;
    }
    let broadcast = |client: usize, matrices: BTreeMap<ParamRef, Matrix>| Payload {
        kind: PayloadKind::Broadcast,
        strategy,
        client,
        round,
        participants: clients,
        matrices,
    };
    let insert_pairs = |into: &mut BTreeMap<ParamRef, Matrix>, pairs: AdapterPairs, ra: Role, rb: Role| {
        for (layer, (a, b)) in pairs {
            into.insert(ParamRef::new(layer, ra), a);
            into.insert(ParamRef::new(layer, rb), b);
        }
    };

    let mut out = BTreeMap::new();
    match strategy {
        Strategy::FedAlt | Strategy::FixedWeight(_) | Strategy::AvgMixer | Strategy::RowUpdate { .. } => {
            let (ua, ub) = match strategy {
                Strategy::RowUpdate { .. } => (Role::RowA, Role::RowB),
                _ => (Role::IndividualA, Role::IndividualB),
            };
            let pairs: BTreeMap<usize, AdapterPairs> = uploads.iter().map(|(&c, p)| (c, p.pairs(ua, ub))).collect();
            let mixer = if strategy == Strategy::AvgMixer {
                Some(shared_mean(uploads, Role::Mixer)?)
            } else {
                None
            };
            for k in 0..clients {
                let mut m = BTreeMap::new();
                insert_pairs(&mut m, compute_row(&pairs, k)?, Role::RowA, Role::RowB);
                if let Some(g) = &mixer {
                    m.extend(g.iter().map(|(p, v)| (*p, v.clone())));
                }
                out.insert(k, broadcast(k, m));
            }
        }
        Strategy::GlobalAvgRow | Strategy::FedIt | Strategy::Ffa | Strategy::FedSa => {
            let mut shared = BTreeMap::new();
            for role in strategy.broadcast_roles().iter() {
                shared.extend(shared_mean(uploads, role)?);
            }
            for k in 0..clients {
                out.insert(k, broadcast(k, shared.clone()));
            }
        }
        Strategy::LocalOnly => unreachable!(),
    }
    Ok(out)
}

/// Mean over all clients of every matrix with the given role.
fn shared_mean(uploads: &BTreeMap<usize, Payload>, role: Role) -> Result<BTreeMap<ParamRef, Matrix>> {
    let Some(first) = uploads.values().next() else {
        return Ok(BTreeMap::new());
    };
    let mut out = BTreeMap::new();
    for p in first.matrices.keys().filter(|p| p.role == role) {
        let items: Vec<&Matrix> = uploads
            .iter()
            .map(|(c, u)| u.matrices.get(p).ok_or_else(|| Error::Payload(format!("client {c} missing {p}"))))
            .collect::<Result<_>>()?;
        out.insert(*p, mean(items.into_iter())?.expect("nonempty"));
    }
    Ok(out)
}
