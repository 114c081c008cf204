//! Per-application dataflow trees and the shared advertise-discover tree.
//!
//! A tree is the union of JOIN routes toward its key. The live node closest
//! to the key is the master. Nodes on a JOIN path that were not yet in the
//! tree become forwarders; the first on-path node already in the tree
//! becomes the joiner's parent.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::idspace::{ad_app_id, AppId, NodeId};
use crate::overlay::{Overlay, OverlayError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ForestError {
    #[error("tree {0} already exists")]
    AlreadyExists(AppId),
    #[error("no tree for {0}")]
    UnknownTree(AppId),
    #[error("node {0} is not live")]
    NotLive(NodeId),
    #[error("node {node} is already subscribed to {app}")]
    AlreadyMember { app: AppId, node: NodeId },
    #[error("node {node} is not a member of {app}")]
    NotMember { app: AppId, node: NodeId },
    #[error("join of {node} rejected by {parent}: {reason}")]
    Rejected { node: NodeId, parent: NodeId, reason: String },
    #[error("join blocked at zone boundary by {0}")]
    Blocked(NodeId),
    #[error("{caller} is not the master of {app} (master is {master})")]
    Authority { app: AppId, caller: NodeId, master: NodeId },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("master state of {app} lost: no live replica; {new_master} restarts from round 0")]
    Unrecoverable { app: AppId, new_master: NodeId },
    #[error("tree invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Overlay(#[from] OverlayError),
}

/// Which part of the ring a tree's key lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum TreeScope {
    /// The AppId itself is the key.
    #[default]
    Global,
    /// The key keeps the AppId suffix under a fixed zone prefix, so the
    /// master and forwarders stay inside that zone.
    Zone(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum AggregationKind {
    #[default]
    WeightedMean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TreeRole {
    Master,
    Forwarder,
    Worker,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MasterState {
    pub round: u64,
    pub model: Vec<f64>,
    pub roster: Vec<NodeId>,
    pub aggregation: AggregationKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdEntry {
    pub app: AppId,
    pub name: String,
    pub requirements: String,
    pub master: NodeId,
    /// Advertisement sequence number; the latest writer wins.
    pub seq: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TreeConfig {
    pub scope: TreeScope,
    pub aggregation: AggregationKind,
    /// Number of master-state replicas.
    pub replicas: usize,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self {
            scope: TreeScope::Global,
            aggregation: AggregationKind::WeightedMean,
            replicas: 2,
        }
    }
}

/// One dataflow tree.
#[derive(Debug, Clone)]
pub struct Tree {
    pub app: AppId,
    pub key: u128,
    pub cfg: TreeConfig,
    root: NodeId,
    parent: BTreeMap<NodeId, NodeId>,
    children: BTreeMap<NodeId, BTreeSet<NodeId>>,
    members: BTreeSet<NodeId>,
    pub state: MasterState,
    replicas: Vec<(NodeId, MasterState)>,
}

impl Tree {
    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn contains(&self, n: NodeId) -> bool {
        n == self.root || self.parent.contains_key(&n)
    }

    pub fn parent_of(&self, n: NodeId) -> Option<NodeId> {
        self.parent.get(&n).copied()
    }

    pub fn children_of(&self, n: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        self.children.get(&n).into_iter().flatten().copied()
    }

    pub fn members(&self) -> &BTreeSet<NodeId> {
        &self.members
    }

    pub fn is_member(&self, n: NodeId) -> bool {
        self.members.contains(&n)
    }

    /// Every node in the tree, root first.
    pub fn nodes(&self) -> Vec<NodeId> {
        std::iter::once(self.root).chain(self.parent.keys().copied()).collect()
    }

    pub fn size(&self) -> usize {
        1 + self.parent.len()
    }

    pub fn role(&self, n: NodeId) -> Option<TreeRole> {
        if n == self.root {
            Some(TreeRole::Master)
        } else if !self.contains(n) {
            None
        } else if self.children.get(&n).is_some_and(|c| !c.is_empty()) {
            Some(TreeRole::Forwarder)
        } else {
            Some(TreeRole::Worker)
        }
    }

    /// Hops from `n` up to the root.
    pub fn depth(&self, n: NodeId) -> Option<usize> {
        let mut d = 0;
        let mut cur = n;
        while cur != self.root {
            cur = *self.parent.get(&cur)?;
            d += 1;
            if d > self.size() {
                return None;
            }
        }
        Some(d)
    }

    pub fn max_depth(&self) -> usize {
        self.nodes().into_iter().filter_map(|n| self.depth(n)).max().unwrap_or(0)
    }

    /// `n` and all of its descendants.
    pub fn subtree(&self, n: NodeId) -> Vec<NodeId> {
        let mut out = vec![n];
        let mut i = 0;
        while i < out.len() {
            out.extend(self.children_of(out[i]));
            i += 1;
        }
        out
    }

    pub fn replicas(&self) -> &[(NodeId, MasterState)] {
        &self.replicas
    }

    fn link(&mut self, child: NodeId, parent: NodeId) {
        self.parent.insert(child, parent);
        self.children.entry(parent).or_default().insert(child);
    }

    fn unlink(&mut self, child: NodeId) -> Option<NodeId> {
        let p = self.parent.remove(&child)?;
        if let Some(set) = self.children.get_mut(&p) {
            set.remove(&child);
            if set.is_empty() {
                self.children.remove(&p);
            }
        }
        Some(p)
    }

    /// Removes childless pure forwarders walking up from `n`.
    fn prune_from(&mut self, mut n: NodeId) {
        while n != self.root && !self.members.contains(&n) && self.children_of(n).next().is_none() {
            match self.unlink(n) {
                Some(p) => n = p,
                None => break,
            }
        }
    }

    /// Tab-separated `parent child app` lines.
    pub fn edge_list(&self) -> String {
        let mut s = String::new();
        for (c, p) in &self.parent {
            s.push_str(&format!("{}\t{}\t{}\n", p, c, self.app));
        }
        s
    }
}

/// Identity by default; compression or privacy transforms plug in here.
pub trait PayloadTransform {
    fn encode(&self, payload: &[f64]) -> Vec<f64> {
        payload.to_vec()
    }
    fn decode(&self, payload: &[f64]) -> Vec<f64> {
        payload.to_vec()
    }
}

pub struct Identity;
impl PayloadTransform for Identity {}

#[derive(Debug, Clone, PartialEq)]
pub struct Membership {
    pub parent: Option<NodeId>,
    /// Overlay hops walked before grafting.
    pub join_hops: usize,
    /// Nodes that became forwarders for this join.
    pub new_forwarders: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DeliveryReport {
    /// Depth at which each member received the payload.
    pub depths: BTreeMap<NodeId, usize>,
    pub messages: usize,
    pub max_depth: usize,
}

impl DeliveryReport {
    pub fn deliveries(&self) -> usize {
        self.depths.len()
    }
}

/// A weighted partial aggregate: `(Σ w·v, Σ w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Partial {
    pub weighted_sum: Vec<f64>,
    pub weight: f64,
}

impl Partial {
    pub fn new(value: &[f64], weight: f64) -> Self {
        Self {
            weighted_sum: value.iter().map(|v| v * weight).collect(),
            weight,
        }
    }

    pub fn merge(&self, other: &Partial) -> Result<Partial, ForestError> {
        if self.weighted_sum.len() != other.weighted_sum.len() {
            return Err(ForestError::Schema(format!(
                "payload dimension {} != {}",
                self.weighted_sum.len(),
                other.weighted_sum.len()
            )));
        }
        Ok(Partial {
            weighted_sum: self
                .weighted_sum
                .iter()
                .zip(&other.weighted_sum)
                .map(|(a, b)| a + b)
                .collect(),
            weight: self.weight + other.weight,
        })
    }

    pub fn mean(&self) -> Vec<f64> {
        self.weighted_sum.iter().map(|v| v / self.weight).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateReport<T> {
    pub value: Option<T>,
    pub messages: usize,
    pub contributors: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerRecovery {
    pub new_parent: NodeId,
    /// Nodes touched by the repair: the orphan, its JOIN path and the new parent.
    pub contacted: usize,
    pub join_hops: usize,
    pub recovered: bool,
    /// JOIN route from the orphan to the graft point.
    pub path: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MasterRecovery {
    pub new_master: NodeId,
    pub restored_round: u64,
    /// Holder the state came from; `None` for a tree with nothing committed.
    pub replica: Option<NodeId>,
    pub contacted: usize,
    pub regrafted: Vec<NodeId>,
    /// JOIN route of each regrafted orphan, the electing JOIN first.
    pub paths: Vec<Vec<NodeId>>,
}

/// The overlay plus every tree built on it.
#[derive(Debug)]
pub struct Forest {
    overlay: Overlay,
    trees: BTreeMap<AppId, Tree>,
    directory: BTreeMap<AppId, AdEntry>,
    ad_seq: u64,
}

impl Forest {
    pub fn new(overlay: Overlay) -> Self {
        Self {
            overlay,
            trees: BTreeMap::new(),
            directory: BTreeMap::new(),
            ad_seq: 0,
        }
    }

    pub fn overlay(&self) -> &Overlay {
        &self.overlay
    }

    pub fn overlay_mut(&mut self) -> &mut Overlay {
        &mut self.overlay
    }

    pub fn tree(&self, app: AppId) -> Option<&Tree> {
        self.trees.get(&app)
    }

    pub fn trees(&self) -> impl Iterator<Item = &Tree> {
        self.trees.values()
    }

    fn tree_mut(&mut self, app: AppId) -> Result<&mut Tree, ForestError> {
        self.trees.get_mut(&app).ok_or(ForestError::UnknownTree(app))
    }

    pub fn key_for(&self, app: AppId, scope: TreeScope) -> u128 {
        let z = self.overlay.config().zone;
        match scope {
            TreeScope::Global => app.0,
            TreeScope::Zone(p) => z.zone_start(p) | z.suffix_of(app.0),
        }
    }

    fn rendezvous(&self, key: u128) -> NodeId {
        self.overlay.closest_live(key).expect("overlay is never empty")
    }

    /// Creates an application tree. Its master joins the AD tree and
    /// advertises the application under `name`.
    pub fn create_tree(&mut self, app: AppId, name: &str, cfg: TreeConfig) -> Result<NodeId, ForestError> {
        let master = self.create_bare(app, cfg)?;
        if app != ad_app_id() {
            self.advertise(app, master, name, "")?;
        }
        Ok(master)
    }

    fn create_bare(&mut self, app: AppId, cfg: TreeConfig) -> Result<NodeId, ForestError> {
        if self.trees.contains_key(&app) {
            return Err(ForestError::AlreadyExists(app));
        }
        let key = self.key_for(app, cfg.scope);
        let root = self.rendezvous(key);
        self.trees.insert(
            app,
            Tree {
                app,
                key,
                cfg,
                root,
                parent: BTreeMap::new(),
                children: BTreeMap::new(),
                members: BTreeSet::new(),
                state: MasterState {
                    round: 0,
                    model: Vec::new(),
                    roster: Vec::new(),
                    aggregation: cfg.aggregation,
                },
                replicas: Vec::new(),
            },
        );
        Ok(root)
    }

    /// Routes a JOIN for `node` and grafts the path, skipping nodes in `avoid`.
    /// Returns (graft parent, hops walked, new forwarders).
    fn graft(
        &mut self,
        app: AppId,
        node: NodeId,
        avoid: &BTreeSet<NodeId>,
        predicate: &mut dyn FnMut(NodeId, NodeId) -> Result<(), String>,
    ) -> Result<(NodeId, usize, Vec<NodeId>, Vec<NodeId>), ForestError> {
        let key = self.tree(app).ok_or(ForestError::UnknownTree(app))?.key;
        let path = match self.overlay.route(key, node) {
            Ok(p) => p,
            Err(OverlayError::Blocked { at, .. }) => return Err(ForestError::Blocked(at)),
            Err(e) => return Err(e.into()),
        };
        let tree = &self.trees[&app];
        let hops = &path.hops;
        let graft_idx = (1..hops.len()).find(|&i| tree.contains(hops[i]) && !avoid.contains(&hops[i]));
        let (graft_idx, via_path) = match graft_idx {
            Some(i) => (i, hops[1..i].iter().all(|h| !avoid.contains(h))),
            None => {
                // The route ended outside the tree: the root moved. Hand the
                // root over to the route's destination first.
                let dest = path.destination();
                self.handoff_root(app, dest);
                let tree = &self.trees[&app];
                let i = (1..hops.len())
                    .find(|&i| tree.contains(hops[i]) && !avoid.contains(&hops[i]))
                    .ok_or_else(|| ForestError::Invariant(format!("JOIN of {node} found no graft point")))?;
                (i, hops[1..i].iter().all(|h| !avoid.contains(h)))
            }
        };
        let first_parent = if via_path { hops[1] } else { hops[graft_idx] };
        predicate(node, first_parent).map_err(|reason| ForestError::Rejected {
            node,
            parent: first_parent,
            reason,
        })?;
        let tree = self.trees.get_mut(&app).expect("checked");
        let mut forwarders = Vec::new();
        if via_path {
            for i in (1..graft_idx).rev() {
                tree.link(hops[i], hops[i + 1]);
                forwarders.push(hops[i]);
            }
        }
        tree.link(node, first_parent);
        Ok((hops[graft_idx], graft_idx, forwarders, hops[..=graft_idx].to_vec()))
    }

    /// Makes `new_root` the root; the old root becomes its child.
    fn handoff_root(&mut self, app: AppId, new_root: NodeId) {
        let tree = self.trees.get_mut(&app).expect("checked");
        if tree.root == new_root {
            return;
        }
        let old = tree.root;
        if tree.contains(new_root) {
            tree.unlink(new_root);
        }
        tree.root = new_root;
        if self.overlay.is_live(old) {
            tree.link(old, new_root);
        }
    }

    /// Root handoff after overlay joins: trees whose key is now closer to a
    /// new node move their master there.
    pub fn rebalance_roots(&mut self) {
        let apps: Vec<AppId> = self.trees.keys().copied().collect();
        for app in apps {
            let key = self.trees[&app].key;
            let best = self.rendezvous(key);
            if best != self.trees[&app].root && self.overlay.is_live(self.trees[&app].root) {
                self.handoff_root(app, best);
            }
        }
    }

    pub fn subscribe(&mut self, app: AppId, node: NodeId) -> Result<Membership, ForestError> {
        self.subscribe_with(app, node, &mut |_, _| Ok(()))
    }

    /// Subscribes `node`; `predicate(joiner, parent)` may reject the join at
    /// the parent.
    pub fn subscribe_with(
        &mut self,
        app: AppId,
        node: NodeId,
        predicate: &mut dyn FnMut(NodeId, NodeId) -> Result<(), String>,
    ) -> Result<Membership, ForestError> {
        if !self.overlay.is_live(node) {
            return Err(ForestError::NotLive(node));
        }
        let tree = self.tree(app).ok_or(ForestError::UnknownTree(app))?;
        if tree.is_member(node) {
            return Err(ForestError::AlreadyMember { app, node });
        }
        if tree.contains(node) {
            let parent = tree.parent_of(node);
            self.tree_mut(app)?.members.insert(node);
            return Ok(Membership {
                parent,
                join_hops: 0,
                new_forwarders: Vec::new(),
            });
        }
        let (_, hops, new_forwarders, _) = self.graft(app, node, &BTreeSet::new(), predicate)?;
        let tree = self.tree_mut(app)?;
        tree.members.insert(node);
        Ok(Membership {
            parent: tree.parent_of(node),
            join_hops: hops,
            new_forwarders,
        })
    }

    pub fn unsubscribe(&mut self, app: AppId, node: NodeId) -> Result<(), ForestError> {
        let tree = self.tree_mut(app)?;
        if !tree.members.remove(&node) {
            return Err(ForestError::NotMember { app, node });
        }
        tree.prune_from(node);
        Ok(())
    }

    /// Sends `payload` from the master down the tree to every member.
    pub fn broadcast(
        &self,
        app: AppId,
        caller: NodeId,
        payload: &[f64],
        transform: &dyn PayloadTransform,
        on_broadcast: &mut dyn FnMut(NodeId, &[f64]),
    ) -> Result<DeliveryReport, ForestError> {
        let tree = self.tree(app).ok_or(ForestError::UnknownTree(app))?;
        if caller != tree.root {
            return Err(ForestError::Authority {
                app,
                caller,
                master: tree.root,
            });
        }
        Ok(self.broadcast_from(tree, tree.root, 0, payload, transform, on_broadcast))
    }

    /// Pushes a payload through the subtree below `from`; used to retransmit
    /// a round to a subtree after it is regrafted.
    pub fn retransmit(
        &self,
        app: AppId,
        from: NodeId,
        payload: &[f64],
        on_broadcast: &mut dyn FnMut(NodeId, &[f64]),
    ) -> Result<DeliveryReport, ForestError> {
        let tree = self.tree(app).ok_or(ForestError::UnknownTree(app))?;
        let depth = tree
            .depth(from)
            .ok_or_else(|| ForestError::Invariant(format!("{from} is not attached to {app}")))?;
        let mut report = DeliveryReport::default();
        if tree.is_member(from) && from != tree.root {
            on_broadcast(from, payload);
            report.depths.insert(from, depth);
            report.messages += 1;
        }
        let sub = self.broadcast_from(tree, from, depth, payload, &Identity, on_broadcast);
        report.depths.extend(sub.depths);
        report.messages += sub.messages;
        report.max_depth = report.depths.values().copied().max().unwrap_or(0);
        Ok(report)
    }

    fn broadcast_from(
        &self,
        tree: &Tree,
        from: NodeId,
        base_depth: usize,
        payload: &[f64],
        transform: &dyn PayloadTransform,
        on_broadcast: &mut dyn FnMut(NodeId, &[f64]),
    ) -> DeliveryReport {
        let mut report = DeliveryReport::default();
        let mut queue = VecDeque::from([(from, payload.to_vec(), base_depth)]);
        while let Some((n, data, d)) = queue.pop_front() {
            for c in tree.children_of(n) {
                let wire = transform.encode(&data);
                let recv = transform.decode(&wire);
                report.messages += 1;
                if tree.is_member(c) {
                    on_broadcast(c, &recv);
                    report.depths.insert(c, d + 1);
                    report.max_depth = report.max_depth.max(d + 1);
                }
                queue.push_back((c, recv, d + 1));
            }
        }
        report
    }

    /// Progressive aggregation: every node combines its children's partials
    /// with its own contribution and forwards one value to its parent.
    pub fn aggregate_with<T: Clone>(
        &self,
        app: AppId,
        contributions: &BTreeMap<NodeId, T>,
        combine: &mut dyn FnMut(&T, &T) -> Result<T, ForestError>,
        on_aggregate: &mut dyn FnMut(NodeId, &T),
    ) -> Result<AggregateReport<T>, ForestError> {
        let tree = self.tree(app).ok_or(ForestError::UnknownTree(app))?;
        for n in contributions.keys() {
            if !tree.contains(*n) {
                return Err(ForestError::NotMember { app, node: *n });
            }
        }
        // Post-order: children before parents.
        let mut order = Vec::with_capacity(tree.size());
        let mut stack = vec![(tree.root, false)];
        while let Some((n, expanded)) = stack.pop() {
            if expanded {
                order.push(n);
            } else {
                stack.push((n, true));
                for c in tree.children_of(n) {
                    stack.push((c, false));
                }
            }
        }
        let mut partial: BTreeMap<NodeId, T> = BTreeMap::new();
        let mut messages = 0;
        for n in order {
            let mut acc = contributions.get(&n).cloned();
            for c in tree.children_of(n) {
                if let Some(v) = partial.remove(&c) {
                    messages += 1;
                    acc = Some(match acc {
                        Some(a) => combine(&a, &v)?,
                        None => v,
                    });
                }
            }
            if let Some(v) = acc {
                on_aggregate(n, &v);
                partial.insert(n, v);
            }
        }
        Ok(AggregateReport {
            value: partial.remove(&tree.root),
            messages,
            contributors: contributions.len(),
        })
    }

    /// Aggregates `(value, weight)` payloads with the tree's aggregation kind.
    pub fn aggregate(
        &self,
        app: AppId,
        payloads: &BTreeMap<NodeId, (Vec<f64>, f64)>,
    ) -> Result<AggregateReport<Vec<f64>>, ForestError> {
        let tree = self.tree(app).ok_or(ForestError::UnknownTree(app))?;
        let kind = tree.cfg.aggregation;
        let parts: BTreeMap<NodeId, Partial> = payloads
            .iter()
            .map(|(n, (v, w))| {
                let w = if kind == AggregationKind::Sum { 1.0 } else { *w };
                (*n, Partial::new(v, w))
            })
            .collect();
        let rep = self.aggregate_with(app, &parts, &mut |a, b| a.merge(b), &mut |_, _| {})?;
        Ok(AggregateReport {
            value: rep.value.map(|p| match kind {
                AggregationKind::WeightedMean => p.mean(),
                AggregationKind::Sum => p.weighted_sum,
            }),
            messages: rep.messages,
            contributors: rep.contributors,
        })
    }

    fn ensure_ad_tree(&mut self) -> AppId {
        let ad = ad_app_id();
        if !self.trees.contains_key(&ad) {
            self.create_bare(ad, TreeConfig::default())
                .expect("absent AD tree can be created");
        }
        ad
    }

    /// A master publishes (or refreshes) its application in the directory.
    pub fn advertise(&mut self, app: AppId, caller: NodeId, name: &str, requirements: &str) -> Result<(), ForestError> {
        let tree = self.tree(app).ok_or(ForestError::UnknownTree(app))?;
        if tree.root != caller {
            return Err(ForestError::Authority {
                app,
                caller,
                master: tree.root,
            });
        }
        let ad = self.ensure_ad_tree();
        if !self.trees[&ad].is_member(caller) {
            self.subscribe(ad, caller)?;
        }
        self.ad_seq += 1;
        self.directory.insert(
            app,
            AdEntry {
                app,
                name: name.to_string(),
                requirements: requirements.to_string(),
                master: caller,
                seq: self.ad_seq,
            },
        );
        Ok(())
    }

    pub fn withdraw(&mut self, app: AppId) -> Option<AdEntry> {
        self.directory.remove(&app)
    }

    /// Ends an application: drops its tree and its directory entry.
    pub fn remove_tree(&mut self, app: AppId) -> Option<Tree> {
        self.directory.remove(&app);
        self.trees.remove(&app)
    }

    /// Joins the AD tree, receives the directory and leaves again unless
    /// the node was already subscribed.
    pub fn discover(&mut self, node: NodeId) -> Result<Vec<AdEntry>, ForestError> {
        let ad = self.ensure_ad_tree();
        let was_member = self.trees[&ad].is_member(node);
        if !was_member {
            self.subscribe(ad, node)?;
        }
        let entries: Vec<AdEntry> = self.directory.values().cloned().collect();
        if !was_member {
            self.unsubscribe(ad, node)?;
        }
        Ok(entries)
    }

    pub fn directory(&self) -> &BTreeMap<AppId, AdEntry> {
        &self.directory
    }

    /// Commits a finished round at the master and replicates its state to
    /// the `k` proximity-nearest live neighborhood members.
    pub fn commit_round(&mut self, app: AppId, model: Vec<f64>) -> Result<u64, ForestError> {
        let tree = self.tree(app).ok_or(ForestError::UnknownTree(app))?;
        let roster: Vec<NodeId> = tree.members.iter().copied().collect();
        let root = tree.root;
        let k = tree.cfg.replicas;
        let holders: Vec<NodeId> = self
            .overlay
            .state(root)
            .map(|s| {
                s.neighborhood
                    .iter()
                    .copied()
                    .filter(|n| self.overlay.is_live(*n))
                    .take(k)
                    .collect()
            })
            .unwrap_or_default();
        let tree = self.tree_mut(app)?;
        tree.state.round += 1;
        tree.state.model = model;
        tree.state.roster = roster;
        let snapshot = tree.state.clone();
        tree.replicas = holders.into_iter().map(|h| (h, snapshot.clone())).collect();
        Ok(tree.state.round)
    }

    /// Detaches a failed node from a tree. Returns its orphaned children.
    pub fn detach_failed(&mut self, app: AppId, failed: NodeId) -> Result<Vec<NodeId>, ForestError> {
        let tree = self.tree_mut(app)?;
        if !tree.contains(failed) || failed == tree.root {
            return Ok(Vec::new());
        }
        let orphans: Vec<NodeId> = tree.children_of(failed).collect();
        for &o in &orphans {
            tree.unlink(o);
        }
        tree.members.remove(&failed);
        if let Some(p) = tree.unlink(failed) {
            tree.prune_from(p);
        }
        Ok(orphans)
    }

    /// Detaches every failed non-root node at once, including chains of
    /// failed nodes. Returns the live nodes left without a parent, each with
    /// its failed parent.
    pub fn detach_all_failed(
        &mut self,
        app: AppId,
        failed: &BTreeSet<NodeId>,
    ) -> Result<Vec<(NodeId, NodeId)>, ForestError> {
        let tree = self.tree_mut(app)?;
        let root = tree.root;
        let dead: Vec<NodeId> = failed
            .iter()
            .copied()
            .filter(|f| *f != root && tree.contains(*f))
            .collect();
        let mut orphans: Vec<(NodeId, NodeId)> = dead
            .iter()
            .flat_map(|f| tree.children_of(*f).map(|c| (c, *f)).collect::<Vec<_>>())
            .filter(|(c, _)| !failed.contains(c))
            .collect();
        orphans.sort();
        for &(o, _) in &orphans {
            tree.unlink(o);
        }
        let mut parents = Vec::new();
        for &f in &dead {
            tree.members.remove(&f);
            if let Some(p) = tree.unlink(f) {
                parents.push(p);
            }
        }
        for &f in &dead {
            tree.children.remove(&f);
        }
        for p in parents {
            if !failed.contains(&p) {
                tree.prune_from(p);
            }
        }
        Ok(orphans)
    }

    /// Re-grafts `node` (with its subtree) after its parent failed.
    pub fn recover_worker(&mut self, app: AppId, node: NodeId, failed_parent: NodeId) -> Result<WorkerRecovery, ForestError> {
        if self.overlay.is_live(failed_parent) {
            let tree = self.tree(app).ok_or(ForestError::UnknownTree(app))?;
            if tree.parent_of(node) == Some(failed_parent) {
                return Ok(WorkerRecovery {
                    new_parent: failed_parent,
                    contacted: 0,
                    join_hops: 0,
                    recovered: false,
                    path: Vec::new(),
                });
            }
        }
        if !self.overlay.is_live(node) {
            return Err(ForestError::NotLive(node));
        }
        if self.tree(app).ok_or(ForestError::UnknownTree(app))?.contains(failed_parent) {
            self.detach_failed(app, failed_parent)?;
        }
        let tree = self.tree(app).expect("checked");
        if tree.root == node {
            return Err(ForestError::Invariant(format!("{node} is the master of {app}")));
        }
        if let Some(p) = tree.parent_of(node) {
            return Ok(WorkerRecovery {
                new_parent: p,
                contacted: 0,
                join_hops: 0,
                recovered: false,
                path: Vec::new(),
            });
        }
        let avoid: BTreeSet<NodeId> = tree.subtree(node).into_iter().collect();
        let (parent, hops, _, path) = self.graft(app, node, &avoid, &mut |_, _| Ok(()))?;
        Ok(WorkerRecovery {
            new_parent: parent,
            contacted: hops + 1,
            join_hops: hops,
            recovered: true,
            path,
        })
    }

    /// Elects the live key minimizer as master after the master failed,
    /// re-grafts orphaned subtrees and restores state from a live replica.
    pub fn recover_master(&mut self, app: AppId) -> Result<MasterRecovery, ForestError> {
        let tree = self.tree(app).ok_or(ForestError::UnknownTree(app))?;
        let old = tree.root;
        if self.overlay.is_live(old) {
            return Err(ForestError::Invariant(format!("master {old} of {app} is still live")));
        }
        let orphans: Vec<NodeId> = tree.children_of(old).collect();
        let key = tree.key;
        let mut contacted = 0;
        let mut paths = Vec::new();
        // The first child's JOIN reaches the new minimizer.
        let new_master = match orphans.first() {
            Some(&c) => {
                let path = self.overlay.route(key, c).map_err(|e| match e {
                    OverlayError::Blocked { at, .. } => ForestError::Blocked(at),
                    e => e.into(),
                })?;
                contacted += path.hops.len();
                let dest = path.destination();
                paths.push(path.hops);
                dest
            }
            None => self.rendezvous(key),
        };
        let tree = self.tree_mut(app)?;
        for &o in &orphans {
            tree.unlink(o);
        }
        tree.members.remove(&old);
        tree.children.remove(&old);
        if tree.contains(new_master) {
            tree.unlink(new_master);
        }
        tree.root = new_master;
        let mut regrafted = Vec::new();
        for o in orphans {
            let tree = self.tree(app).expect("checked");
            if tree.contains(o) {
                continue;
            }
            let avoid: BTreeSet<NodeId> = tree.subtree(o).into_iter().collect();
            let (_, hops, _, path) = self.graft(app, o, &avoid, &mut |_, _| Ok(()))?;
            contacted += hops + 1;
            regrafted.push(o);
            if paths.first().is_none_or(|p| p[0] != o) {
                paths.push(path);
            }
        }
        let live_replica = self
            .tree(app)
            .expect("checked")
            .replicas
            .iter()
            .filter(|(h, _)| self.overlay.is_live(*h))
            .max_by_key(|(_, s)| s.round)
            .cloned();
        if let Some(entry) = self.directory.get_mut(&app) {
            entry.master = new_master;
        }
        let tree = self.tree_mut(app)?;
        match live_replica {
            Some((holder, state)) => {
                tree.state = state;
                contacted += 1;
                Ok(MasterRecovery {
                    new_master,
                    restored_round: self.trees[&app].state.round,
                    replica: Some(holder),
                    contacted,
                    regrafted,
                    paths,
                })
            }
            // Nothing was ever committed, so nothing is lost.
            None if tree.state.round == 0 => Ok(MasterRecovery {
                new_master,
                restored_round: 0,
                replica: None,
                contacted,
                regrafted,
                paths,
            }),
            None => {
                let aggregation = tree.cfg.aggregation;
                tree.state = MasterState {
                    round: 0,
                    model: Vec::new(),
                    roster: tree.members.iter().copied().collect(),
                    aggregation,
                };
                tree.replicas.clear();
                Err(ForestError::Unrecoverable { app, new_master })
            }
        }
    }

    /// Full-graph validation of one tree.
    pub fn validate(&self, app: AppId) -> Result<(), ForestError> {
        let tree = self.tree(app).ok_or(ForestError::UnknownTree(app))?;
        let bad = |m: String| Err(ForestError::Invariant(format!("{app}: {m}")));
        let best = self.rendezvous(tree.key);
        if tree.root != best {
            return bad(format!("root {} is not the key minimizer {best}", tree.root));
        }
        if tree.parent.contains_key(&tree.root) {
            return bad("root has a parent".into());
        }
        for n in tree.nodes() {
            if !self.overlay.is_live(n) {
                return bad(format!("{n} is not live"));
            }
            if tree.depth(n).is_none() {
                return bad(format!("{n} does not reach the root"));
            }
        }
        for (c, p) in &tree.parent {
            if !tree.children.get(p).is_some_and(|s| s.contains(c)) {
                return bad(format!("{p} does not list child {c}"));
            }
        }
        for (p, cs) in &tree.children {
            if !tree.contains(*p) {
                return bad(format!("{p} has children but is not in the tree"));
            }
            for c in cs {
                if tree.parent.get(c) != Some(p) {
                    return bad(format!("child {c} does not point back to {p}"));
                }
            }
        }
        for m in &tree.members {
            if !tree.contains(*m) {
                return bad(format!("member {m} is detached"));
            }
        }
        Ok(())
    }

    pub fn validate_all(&self) -> Result<(), ForestError> {
        self.trees.keys().try_for_each(|a| self.validate(*a))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::idspace::app_id;
    use crate::overlay::{OverlayConfig, Proximity};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn prox() -> Arc<dyn Proximity> {
        Arc::new(|a: NodeId, b: NodeId| ((a.0 ^ b.0) % 89) as f64 + 1.0)
    }

    fn forest(n: usize, seed: u64) -> Forest {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<NodeId> = (0..n).map(|_| NodeId(rng.random())).collect();
        Forest::new(Overlay::build(OverlayConfig::default(), ids, prox()).unwrap())
    }

    #[test]
    fn three_node_master_is_closest() {
        let ids = [0x10u128 << 120, 0x40u128 << 120, 0x90u128 << 120].map(NodeId);
        let ov = Overlay::build(OverlayConfig::default(), ids, prox()).unwrap();
        let mut f = Forest::new(ov);
        let app = AppId(0x41u128 << 120);
        let m = f.create_tree(app, "x", TreeConfig::default()).unwrap();
        assert_eq!(m, ids[1]);
        assert!(matches!(
            f.create_tree(app, "x", TreeConfig::default()),
            Err(ForestError::AlreadyExists(_))
        ));
    }

    #[test]
    fn first_subscriber_and_inverse() {
        let mut f = forest(200, 3);
        let app = app_id("t", b"", b"");
        let master = f.create_tree(app, "t", TreeConfig::default()).unwrap();
        let before = f.tree(app).unwrap().edge_list();
        let node = f.overlay().live_nodes().find(|&n| n != master).unwrap();
        f.subscribe(app, node).unwrap();
        f.validate(app).unwrap();
        f.unsubscribe(app, node).unwrap();
        assert_eq!(f.tree(app).unwrap().edge_list(), before);
        assert_eq!(f.tree(app).unwrap().size(), 1);
    }

    #[test]
    fn weighted_mean_example() {
        let mut f = forest(100, 4);
        let app = app_id("w", b"", b"");
        let master = f.create_tree(app, "w", TreeConfig::default()).unwrap();
        let others: Vec<NodeId> = f.overlay().live_nodes().filter(|&n| n != master).take(2).collect();
        for &n in &others {
            f.subscribe(app, n).unwrap();
        }
        let payloads = BTreeMap::from([(others[0], (vec![2.0], 1.0)), (others[1], (vec![4.0], 3.0))]);
        let r = f.aggregate(app, &payloads).unwrap();
        assert_eq!(r.value.unwrap(), vec![3.5]);
        let bad = BTreeMap::from([(others[0], (vec![2.0], 1.0)), (others[1], (vec![4.0, 1.0], 3.0))]);
        assert!(matches!(f.aggregate(app, &bad), Err(ForestError::Schema(_))));
    }

    #[test]
    fn broadcast_requires_master() {
        let mut f = forest(50, 5);
        let app = app_id("b", b"", b"");
        let master = f.create_tree(app, "b", TreeConfig::default()).unwrap();
        let n = f.overlay().live_nodes().find(|&n| n != master).unwrap();
        f.subscribe(app, n).unwrap();
        let r = f.broadcast(app, master, &[1.0], &Identity, &mut |_, _| {}).unwrap();
        assert_eq!(r.deliveries(), 1);
        assert!(matches!(
            f.broadcast(app, n, &[1.0], &Identity, &mut |_, _| {}),
            Err(ForestError::Authority { .. })
        ));
    }

    #[test]
    fn predicate_rejects() {
        let mut f = forest(50, 6);
        let app = app_id("p", b"", b"");
        let master = f.create_tree(app, "p", TreeConfig::default()).unwrap();
        let n = f.overlay().live_nodes().find(|&n| n != master).unwrap();
        let r = f.subscribe_with(app, n, &mut |_, _| Err("capacity".into()));
        assert!(matches!(r, Err(ForestError::Rejected { .. })));
        assert_eq!(f.tree(app).unwrap().size(), 1);
    }

    #[test]
    fn advertise_refresh_keeps_one_entry() {
        let mut f = forest(80, 7);
        let app = app_id("a", b"", b"");
        let master = f.create_tree(app, "a", TreeConfig::default()).unwrap();
        f.advertise(app, master, "a", "v2").unwrap();
        let probe = f.overlay().live_nodes().nth(5).unwrap();
        let d = f.discover(probe).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].requirements, "v2");
    }

    #[test]
    fn k0_master_failure_is_unrecoverable() {
        let mut f = forest(60, 8);
        let app = app_id("k0", b"", b"");
        let cfg = TreeConfig {
            replicas: 0,
            ..TreeConfig::default()
        };
        let master = f.create_tree(app, "k0", cfg).unwrap();
        for n in f.overlay().live_nodes().take(10).collect::<Vec<_>>() {
            if n != master {
                f.subscribe(app, n).unwrap();
            }
        }
        f.commit_round(app, vec![1.0]).unwrap();
        f.overlay_mut().fail(master).unwrap();
        f.overlay_mut().repair_all(master);
        assert!(matches!(f.recover_master(app), Err(ForestError::Unrecoverable { .. })));
        f.validate(app).unwrap();
        assert_eq!(f.tree(app).unwrap().state.round, 0);
    }

    #[test]
    fn uncommitted_tree_recovers_without_replicas() {
        let mut f = forest(60, 9);
        let app = app_id("fresh", b"", b"");
        let master = f.create_tree(app, "fresh", TreeConfig::default()).unwrap();
        f.overlay_mut().fail(master).unwrap();
        f.overlay_mut().repair_all(master);
        let m = f.recover_master(app).unwrap();
        assert_eq!((m.restored_round, m.replica), (0, None));
        assert_eq!(f.directory()[&app].master, m.new_master);
        f.validate(app).unwrap();
    }

    #[test]
    fn removed_tree_leaves_the_directory() {
        let mut f = forest(40, 10);
        let app = app_id("gone", b"", b"");
        f.create_tree(app, "gone", TreeConfig::default()).unwrap();
        assert!(f.remove_tree(app).is_some());
        assert!(f.tree(app).is_none() && !f.directory().contains_key(&app));
        assert!(f.remove_tree(app).is_none());
    }
}
